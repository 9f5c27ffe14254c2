//! `pint` subcommands: generate-data, train, eval, render, sweep.
//!
//! Exit codes: 0 ok, 1 usage/config, 2 I/O, 3 numeric divergence, 4 file
//! format.

mod manifest;
pub mod pgm;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use pint::data::{corrupt_labels, generate_shapes, read_dataset, write_dataset, Dataset, NoiseMode, NoiseSpec};
use pint::model::{MiniSegNet, ModelConfig};
use pint::noise::{PerturbationSpec, PseudoLabelMode, UncertaintyBundle};
use pint::sweep::{run_sweep, SweepSpec};
use pint::tensor::{read_params, write_params};
use pint::trainer::{batch_tensor, evaluate, normalized_images, predict, Strategy, TrainConfig, Trainer};
use pint::{PintError, SplitRng};

pub use manifest::{blob_hash, Manifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pint(#[from] PintError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Pint(PintError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pint(e) => match e {
                PintError::Io(_) => 2,
                PintError::Divergence { .. } | PintError::Numeric(_) => 3,
                PintError::Format(_) | PintError::Truncated(_) | PintError::VersionMismatch { .. } => 4,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pint", version, about = "Noise-tolerant segmentation training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with optional contour label noise.
    GenerateData(GenerateArgs),
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Evaluate a weights file against a dataset's clean masks.
    Eval(EvalArgs),
    /// Write PGM renders of inputs, masks, predictions and uncertainty.
    Render(RenderArgs),
    /// Run a strategy × noise-rate grid over several seeds.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 80)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    #[arg(long, default_value_t = 2)]
    radius_min: usize,
    #[arg(long, default_value_t = 5)]
    radius_max: usize,
    /// erode, dilate or random-per-sample
    #[arg(long, default_value = "random-per-sample")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_data: PathBuf,
    /// Clean-mask split used for evaluation and early stopping.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    phase1_iters: Option<usize>,
    #[arg(long)]
    phase2_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Any config key, e.g. `--set lr_phase2=0.005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Save a resumable checkpoint under `<out>/checkpoint` every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Weights file (PNTW).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write per-sample scores here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sample indices; defaults to the first four.
    #[arg(long, value_delimiter = ',')]
    samples: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    passes: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Disable dropout during the perturbed passes.
    #[arg(long)]
    no_dropout: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Base training config; `strategy` and `seed` are set per run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "baseline-ce,pnt,int,pint")]
    strategies: Vec<String>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 80)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    radius_min: usize,
    #[arg(long, default_value_t = 5)]
    radius_max: usize,
    #[arg(long, default_value = "random-per-sample")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for sweep.csv and sweep.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing human-readable output to `out`.
pub fn run(args: &[String], out: &mut dyn Write) -> CliResult<()> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}")?;
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    match cli.command {
        Command::GenerateData(a) => cmd_generate_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Render(a) => cmd_render(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
    }
}

fn cmd_generate_data(a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let mode: NoiseMode = a.mode.parse()?;
    let spec = NoiseSpec {
        mode,
        ..NoiseSpec::new(a.noise_rate, a.radius_min, a.radius_max, a.seed)
    };
    spec.validate()?;
    let mut ds = generate_shapes(a.n, a.size, a.size, a.seed)?;
    corrupt_labels(&mut ds, &spec)?;
    write_dataset(&a.out, &ds)?;
    writeln!(
        out,
        "wrote {} samples ({} corrupted) to {}",
        ds.len(),
        ds.corrupted_count(),
        a.out.display()
    )?;
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, pairs: &[String]) -> CliResult<()> {
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {p:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    })
}

/// Resolves the effective training config: file, then typed flags, then
/// `--set` pairs.
fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    let mut pairs = Vec::new();
    if let Some(s) = &a.strategy {
        pairs.push(format!("strategy={s}"));
    }
    let typed = [
        ("phase1_iters", a.phase1_iters.map(|v| v.to_string())),
        ("phase2_iters", a.phase2_iters.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("eval_every", a.eval_every.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
    ];
    for (k, v) in typed {
        if let Some(v) = v {
            pairs.push(format!("{k}={v}"));
        }
    }
    pairs.extend(a.set.iter().cloned());
    apply_overrides(&mut cfg, &pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = train_config(&a)?;
    if a.checkpoint_every == Some(0) {
        return Err(CliError::Usage("--checkpoint-every must be positive".into()));
    }
    let train_set = read_dataset(&a.train_data)?;
    let test_set = a.test_data.as_deref().map(read_dataset).transpose()?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let ckpt_dir = a.out.join("checkpoint");

    let mut trainer = if a.resume {
        Trainer::resume(cfg.clone(), &train_set, test_set.as_ref(), &ckpt_dir)?
    } else {
        let t = Trainer::new(cfg.clone(), &train_set, test_set.as_ref())?;
        write_params(&a.out.join("init_student.pntw"), t.student().params())?;
        t
    };

    let mut manifest = Manifest::new(&cfg);
    manifest.add_input("train_data", &a.train_data)?;
    if let Some(p) = &a.test_data {
        manifest.add_input("test_data", p)?;
    }

    while !trainer.is_done() {
        if let Err(e) = trainer.step() {
            // keep the last good state on disk before reporting
            trainer.save_checkpoint(&ckpt_dir)?;
            std::fs::write(a.out.join("metrics.csv"), pint::trainer::to_csv(trainer.log()))?;
            manifest.status = "diverged".into();
            manifest.write(&a.out)?;
            return Err(e.into());
        }
        if let Some(every) = a.checkpoint_every {
            if trainer.completed() % every == 0 {
                trainer.save_checkpoint(&ckpt_dir)?;
            }
        }
    }
    if a.checkpoint_every.is_some() {
        trainer.save_checkpoint(&ckpt_dir)?;
    }

    let outcome = trainer.finish();
    write_params(&a.out.join("student.pntw"), outcome.student.params())?;
    write_params(&a.out.join("teacher.pntw"), outcome.teacher.params())?;
    write_params(&a.out.join("final_student.pntw"), outcome.final_student.params())?;
    write_params(&a.out.join("final_teacher.pntw"), outcome.final_teacher.net().params())?;
    std::fs::write(a.out.join("metrics.csv"), pint::trainer::to_csv(&outcome.log))?;
    manifest.selected = outcome.selected.map(|s| s.0);
    manifest.status = "complete".into();
    manifest.write(&a.out)?;

    writeln!(out, "strategy {} finished {} steps", cfg.strategy, outcome.log.len())?;
    if let Some((it, d, asd)) = outcome.selected {
        writeln!(out, "selected iteration {it}: dice {d:.4} asd {asd:.4}")?;
    } else if let Some(r) = outcome.log.iter().rev().find(|r| r.test_dice.is_some()) {
        writeln!(
            out,
            "final iteration {}: dice {:.4} asd {:.4}",
            r.iteration,
            r.test_dice.unwrap_or(f64::NAN),
            r.test_asd.unwrap_or(f64::NAN)
        )?;
    }
    writeln!(out, "run directory {}", a.out.display())?;
    Ok(())
}

fn load_net(path: &Path) -> CliResult<MiniSegNet> {
    Ok(MiniSegNet::from_params(read_params(path)?, ModelConfig::default().dropout_rate)?)
}

fn check_classes(net: &MiniSegNet, ds: &Dataset) -> CliResult<()> {
    if net.num_classes() != ds.num_classes {
        return Err(PintError::Config(format!(
            "network predicts {} classes, dataset has {}",
            net.num_classes(),
            ds.num_classes
        ))
        .into());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let net = load_net(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    check_classes(&net, &ds)?;
    let ev = evaluate(&net, &ds)?;
    writeln!(out, "samples = {}", ds.len())?;
    writeln!(out, "dice = {:.6}", ev.dice)?;
    writeln!(out, "asd = {:.6}", ev.asd)?;
    writeln!(out, "asd_sentinels = {}", ev.asd_sentinels)?;
    if let Some(p) = &a.csv {
        let mut s = String::from("sample,dice,asd\n");
        for (i, (d, asd)) in ev.per_sample.iter().enumerate() {
            s.push_str(&format!("{i},{d},{asd}\n"));
        }
        s.push_str(&format!("mean,{},{}\n", ev.dice, ev.asd));
        std::fs::write(p, s)?;
    }
    Ok(())
}

fn cmd_render(a: RenderArgs, out: &mut dyn Write) -> CliResult<()> {
    let net = load_net(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    check_classes(&net, &ds)?;
    let indices: Vec<usize> = if a.samples.is_empty() {
        (0..ds.len().min(4)).collect()
    } else {
        a.samples.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::Usage(format!("sample {bad} out of range (dataset has {})", ds.len())));
    }
    let spec = PerturbationSpec {
        passes: a.passes,
        gaussian_sigma: a.sigma,
        teacher_dropout_active: !a.no_dropout,
    };
    spec.validate()?;
    let subset = Dataset {
        samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        ..ds.clone()
    };
    let (h, w) = (ds.height, ds.width);
    let preds = predict(&net, &subset)?;
    let images = normalized_images(&subset)?;
    let all: Vec<usize> = (0..subset.len()).collect();
    let x = batch_tensor(&images, &all, h, w)?;
    let mut rng = SplitRng::new(a.seed);
    let bundle = UncertaintyBundle::estimate(&net, &x, &spec, PseudoLabelMode::Soft, true, &mut rng)?;
    let u = bundle.pixel_uncertainty.data();

    std::fs::create_dir_all(&a.out)?;
    let plane = h * w;
    for (k, &i) in indices.iter().enumerate() {
        let s = &subset.samples[k];
        let variance: Vec<u8> = s
            .clean_mask
            .iter()
            .zip(&s.noisy_mask)
            .map(|(&c, &n)| ((c != 0) != (n != 0)) as u8)
            .collect();
        let maps: [(&str, Vec<u8>); 6] = [
            ("input", pgm::stretch(&s.image)),
            ("clean", pgm::mask_pixels(&s.clean_mask)),
            ("noisy", pgm::mask_pixels(&s.noisy_mask)),
            ("pred", pgm::mask_pixels(&preds[k])),
            ("uncertainty", pgm::unit_pixels(&u[k * plane..(k + 1) * plane])),
            ("noise", pgm::mask_pixels(&variance)),
        ];
        for (name, px) in maps {
            pgm::write_pgm(&a.out.join(format!("sample{i:03}_{name}.pgm")), w, h, &px)?;
        }
    }
    writeln!(out, "rendered {} samples to {}", indices.len(), a.out.display())?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut base = load_config(a.config.as_deref())?;
    apply_overrides(&mut base, &a.set)?;
    let strategies = a
        .strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        base,
        noise_rates: a.rates.clone(),
        strategies,
        repeats: a.repeats,
        n_train: a.n_train,
        n_test: a.n_test,
        size: a.size,
        radius_min: a.radius_min,
        radius_max: a.radius_max,
        mode: a.mode.parse()?,
        base_seed: a.seed,
    };
    let mut progress = Vec::new();
    let table = run_sweep(&spec, |r| {
        let line = match &r.result {
            Ok((d, asd)) => format!(
                "{} rate {} repeat {}: dice {d:.4} asd {asd:.4}",
                r.strategy, r.noise_rate, r.repeat
            ),
            Err(e) => format!("{} rate {} repeat {}: failed: {e}", r.strategy, r.noise_rate, r.repeat),
        };
        eprintln!("{line}");
        progress.push(line);
    })?;
    for line in &progress {
        writeln!(out, "{line}")?;
    }
    let text = table.to_text();
    write!(out, "\n{text}")?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), table.to_csv())?;
        std::fs::write(dir.join("sweep.txt"), &text)?;
    }
    Ok(())
}
