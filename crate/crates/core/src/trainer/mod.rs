//! Two-phase noise-tolerant training, its single-phase ablations,
//! evaluation, checkpointing and resume.
//!
//! Each step samples a mini-batch of noisy-labelled training images, runs the
//! EMA teacher's perturbed passes when the loss needs uncertainty, takes one
//! SGD step on the student and then moves the teacher towards the student.
//! Strategies differ only in the loss and learning-rate schedule:
//!
//! | strategy      | steps `[0, p1)`               | steps `[p1, p1+p2)`              |
//! |---------------|-------------------------------|----------------------------------|
//! | `pint`        | pixel loss, stepped lr        | image loss, constant lr, select  |
//! | `baseline-ce` | cross-entropy, stepped lr     | cross-entropy, constant lr, select |
//! | `pnt`         | pixel loss, stepped lr        | pixel loss, stepped lr           |
//! | `int`         | image loss, constant lr, select | image loss, constant lr, select |
//!
//! "select" means the test Dice is measured every `eval_every` steps and the
//! best evaluated model is returned (early stopping). The model entering
//! phase 2 is itself a candidate.

mod config;
mod log;

pub use config::{Strategy, TrainConfig};
pub use log::{from_csv, to_csv, MetricsRecord, CSV_HEADER};

use std::path::Path;
use std::time::Instant;

use rand::seq::index;

use crate::data::{normalize, Dataset};
use crate::error::{PintError, Result};
use crate::metrics::{asd_or_sentinel, dice, BinaryMask};
use crate::model::MiniSegNet;
use crate::noise::{cross_entropy_loss, image_rectified_loss, pixel_rectified_loss, TeacherState, UncertaintyBundle};
use crate::rng::SplitRng;
use crate::tensor::{read_params, write_params, SgdOptimizer, Tape, Tensor};

const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    CrossEntropy,
    Pixel,
    Image,
}

#[derive(Clone, Copy, Debug)]
struct StepPlan {
    phase: u8,
    lr: f64,
    loss: LossKind,
    candidate: bool,
    phase_end: bool,
}

fn plan(cfg: &TrainConfig, step: usize) -> StepPlan {
    let (p1, p2) = (cfg.phase1_iters, cfg.phase2_iters);
    let total = p1 + p2;
    match cfg.strategy {
        Strategy::Pnt => StepPlan {
            phase: 1,
            lr: cfg.phase1_lr(step),
            loss: LossKind::Pixel,
            candidate: false,
            phase_end: step + 1 == total,
        },
        Strategy::Int => StepPlan {
            phase: 2,
            lr: cfg.lr_phase2,
            loss: LossKind::Image,
            candidate: true,
            phase_end: step + 1 == total,
        },
        Strategy::Pint | Strategy::BaselineCe => {
            let ce = cfg.strategy == Strategy::BaselineCe;
            if step < p1 {
                StepPlan {
                    phase: 1,
                    lr: cfg.phase1_lr(step),
                    loss: if ce { LossKind::CrossEntropy } else { LossKind::Pixel },
                    candidate: step + 1 == p1 && p2 > 0,
                    phase_end: step + 1 == p1,
                }
            } else {
                StepPlan {
                    phase: 2,
                    lr: cfg.lr_phase2,
                    loss: if ce { LossKind::CrossEntropy } else { LossKind::Image },
                    candidate: true,
                    phase_end: step + 1 == total,
                }
            }
        }
    }
}

/// Learning rate used at 0-based global step `step`.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    plan(cfg, step).lr
}

/// Mean Dice and ASD of a network against clean masks.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dice: f64,
    pub asd: f64,
    pub per_sample: Vec<(f64, f64)>,
    /// Samples whose ASD fell back to the image-diagonal sentinel.
    pub asd_sentinels: usize,
}

/// Zero-mean unit-variance copy of every image in `ds`.
pub fn normalized_images(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.samples
        .iter()
        .map(|s| normalize(&s.image.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect()
}

/// Stacks the chosen normalized images into a `[B,1,H,W]` tensor.
pub fn batch_tensor(images: &[Vec<f64>], indices: &[usize], h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        data.extend_from_slice(&images[i]);
    }
    Tensor::new(vec![indices.len(), 1, h, w], data)
}

/// Per-pixel argmax class of `[B,C,H,W]` scores; ties go to the lower class.
pub fn argmax_labels(scores: &Tensor) -> Result<Vec<u8>> {
    let (b, c, h, w) = match *scores.shape() {
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(PintError::Shape(format!("expected [B,C,H,W], got {s:?}"))),
    };
    let plane = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(b * plane);
    for n in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[(n * c + ch) * plane + p] > d[(n * c + best) * plane + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 10;

/// Eval-mode (dropout off) predicted label maps for every sample.
pub fn predict(net: &MiniSegNet, ds: &Dataset) -> Result<Vec<Vec<u8>>> {
    let images = normalized_images(ds)?;
    let plane = ds.height * ds.width;
    let mut unused = SplitRng::new(0);
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = batch_tensor(&images, chunk, ds.height, ds.width)?;
        let logits = net.forward(&x, false, &mut unused)?;
        let labels = argmax_labels(&logits)?;
        out.extend(labels.chunks(plane).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Argmax predictions against clean masks; Dice and ASD averaged over
/// samples.
pub fn evaluate(net: &MiniSegNet, test: &Dataset) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(PintError::Parameter("evaluation set is empty".into()));
    }
    let preds = predict(net, test)?;
    let (h, w) = (test.height, test.width);
    let mut per_sample = Vec::with_capacity(test.len());
    let mut asd_sentinels = 0;
    for (pred, sample) in preds.iter().zip(&test.samples) {
        let p = BinaryMask::from_labels(pred, h, w)?;
        let g = BinaryMask::from_labels(&sample.clean_mask, h, w)?;
        let (a, flagged) = asd_or_sentinel(&p, &g)?;
        asd_sentinels += flagged as usize;
        per_sample.push((dice(&p, &g)?, a));
    }
    let n = per_sample.len() as f64;
    Ok(EvalResult {
        dice: per_sample.iter().map(|s| s.0).sum::<f64>() / n,
        asd: per_sample.iter().map(|s| s.1).sum::<f64>() / n,
        per_sample,
        asd_sentinels,
    })
}

/// Pooled mean teacher uncertainty over pixels where the noisy label
/// disagrees with the clean one, and over pixels where they agree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLocalization {
    pub disagreement_mean: f64,
    pub agreement_mean: f64,
    pub disagreement_pixels: usize,
    pub agreement_pixels: usize,
}

impl NoiseLocalization {
    /// Whether uncertainty is strictly higher where labels are wrong.
    pub fn localizes(&self) -> bool {
        self.disagreement_pixels > 0 && self.disagreement_mean > self.agreement_mean
    }
}

/// Runs the teacher's perturbed passes over every sample of `ds` and splits
/// the pixel uncertainty by clean/noisy agreement.
pub fn noise_localization(
    teacher: &MiniSegNet,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut SplitRng,
) -> Result<NoiseLocalization> {
    let images = normalized_images(ds)?;
    let plane = ds.height * ds.width;
    let (mut dis, mut agr, mut nd, mut na) = (0.0, 0.0, 0usize, 0usize);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = batch_tensor(&images, chunk, ds.height, ds.width)?;
        let b = UncertaintyBundle::estimate(
            teacher,
            &x,
            &cfg.perturbation,
            cfg.pseudo_label,
            cfg.normalize_uncertainty,
            rng,
        )?;
        let u = b.pixel_uncertainty.data();
        for (k, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            for p in 0..plane {
                if (s.clean_mask[p] != 0) != (s.noisy_mask[p] != 0) {
                    dis += u[k * plane + p];
                    nd += 1;
                } else {
                    agr += u[k * plane + p];
                    na += 1;
                }
            }
        }
    }
    let avg = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(NoiseLocalization {
        disagreement_mean: avg(dis, nd),
        agreement_mean: avg(agr, na),
        disagreement_pixels: nd,
        agreement_pixels: na,
    })
}

/// Copy of `net` without gradient buffers.
fn snapshot(net: &MiniSegNet) -> MiniSegNet {
    let mut n = net.clone();
    n.params_mut().iter_mut().for_each(|(_, t)| t.clear_grad());
    n
}

#[derive(Clone, Debug, PartialEq)]
struct Best {
    iteration: usize,
    dice: f64,
    asd: f64,
    student: MiniSegNet,
    teacher: MiniSegNet,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The returned (early-stopping selected) student.
    pub student: MiniSegNet,
    /// Teacher paired with the returned student.
    pub teacher: MiniSegNet,
    pub final_student: MiniSegNet,
    pub final_teacher: TeacherState,
    pub log: Vec<MetricsRecord>,
    /// `(iteration, dice, asd)` of the selected checkpoint, when selection ran.
    pub selected: Option<(usize, f64, f64)>,
}

/// Stateful training loop; can be checkpointed and resumed bit-exactly.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    train_images: Vec<Vec<f64>>,
    student: MiniSegNet,
    teacher: TeacherState,
    optimizer: SgdOptimizer,
    rng: SplitRng,
    completed: usize,
    log: Vec<MetricsRecord>,
    best: Option<Best>,
    clock: Instant,
    clock_offset: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a Dataset, test: Option<&'a Dataset>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(PintError::Parameter("training set is empty".into()));
        }
        train.validate()?;
        if train.num_classes != config.model.num_classes {
            return Err(PintError::Config(format!(
                "dataset has {} classes, model expects {}",
                train.num_classes, config.model.num_classes
            )));
        }
        let student = MiniSegNet::init(config.seed, config.model.clone())?;
        let teacher = TeacherState::from_student(&student, config.ema_decay)?;
        let optimizer = SgdOptimizer::new(config.lr_phase1, config.momentum, config.weight_decay)?;
        Ok(Self {
            train_images: normalized_images(train)?,
            rng: SplitRng::with_stream(config.seed, TRAIN_STREAM),
            config,
            train,
            test,
            student,
            teacher,
            optimizer,
            completed: 0,
            log: Vec::new(),
            best: None,
            clock: Instant::now(),
            clock_offset: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> usize {
        self.config.phase1_iters + self.config.phase2_iters
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_done(&self) -> bool {
        self.completed >= self.total_steps()
    }

    pub fn log(&self) -> &[MetricsRecord] {
        &self.log
    }

    pub fn student(&self) -> &MiniSegNet {
        &self.student
    }

    pub fn teacher(&self) -> &TeacherState {
        &self.teacher
    }

    /// Runs every remaining step.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    /// Runs until `steps` steps have been completed (or the schedule ends).
    pub fn run_until(&mut self, steps: usize) -> Result<()> {
        while self.completed < steps.min(self.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    fn elapsed(&self) -> f64 {
        if self.config.log_wall_time {
            self.clock_offset + self.clock.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// One optimisation step. On a non-finite loss or update the previous
    /// state is kept and a divergence error is returned.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let step = self.completed;
        let p = plan(&self.config, step);
        let diverged = |detail: String| PintError::Divergence {
            phase: format!("phase {}", p.phase),
            iteration: step + 1,
            detail,
        };
        let (h, w) = (self.train.height, self.train.width);
        let bsz = self.config.batch_size.min(self.train.len());
        let indices = index::sample(&mut self.rng, self.train.len(), bsz).into_vec();
        let images = batch_tensor(&self.train_images, &indices, h, w)?;
        let mut labels = Vec::with_capacity(bsz * h * w);
        for &i in &indices {
            labels.extend_from_slice(&self.train.samples[i].noisy_mask);
        }

        let bundle = match p.loss {
            LossKind::CrossEntropy => None,
            LossKind::Pixel | LossKind::Image => Some(
                UncertaintyBundle::estimate(
                    self.teacher.net(),
                    &images,
                    &self.config.perturbation,
                    self.config.pseudo_label,
                    self.config.normalize_uncertainty,
                    &mut self.rng,
                )
                .map_err(|e| match e {
                    PintError::Numeric(m) => diverged(m),
                    other => other,
                })?,
            ),
        };

        let mut tape = Tape::new();
        let x = tape.constant(images);
        let numeric = |e: PintError| match e {
            PintError::Numeric(m) => diverged(m),
            other => other,
        };
        let (logits, vars) = self
            .student
            .forward_on(&mut tape, x, true, true, &mut self.rng)
            .map_err(numeric)?;
        let loss = match (&bundle, p.loss) {
            (None, _) => cross_entropy_loss(&mut tape, logits, &labels),
            (Some(b), LossKind::Pixel) => {
                pixel_rectified_loss(&mut tape, logits, &labels, &b.pseudo_label, &b.pixel_uncertainty)
            }
            (Some(b), _) => image_rectified_loss(&mut tape, logits, &labels, &b.pseudo_label, &b.image_uncertainty),
        }
        .map_err(numeric)?;
        let loss_value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;

        let before = self.student.clone();
        let velocity_before = self.optimizer.clone();
        self.student.accumulate_grads(&grads, &vars)?;
        self.optimizer.learning_rate = p.lr;
        self.optimizer.step_set(self.student.params_mut())?;
        if self.student.params().iter().any(|(_, t)| !t.all_finite()) {
            self.student = before;
            self.optimizer = velocity_before;
            return Err(diverged("parameter update produced non-finite values".into()));
        }
        self.teacher.update(self.student.params())?;
        self.completed += 1;

        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        let mut record = MetricsRecord {
            iteration: self.completed,
            phase: p.phase,
            learning_rate: p.lr,
            train_loss: loss_value,
            mean_pixel_uncertainty: bundle.as_ref().map(|b| mean(&b.pixel_uncertainty)),
            mean_image_uncertainty: bundle.as_ref().map(|b| mean(&b.image_uncertainty)),
            test_dice: None,
            test_asd: None,
            wall_time: 0.0,
        };
        if let Some(test) = self.test {
            if self.completed.is_multiple_of(self.config.eval_every) || p.phase_end {
                let ev = evaluate(&self.student, test)?;
                record.test_dice = Some(ev.dice);
                record.test_asd = Some(ev.asd);
                if p.candidate && self.best.as_ref().is_none_or(|b| ev.dice > b.dice) {
                    self.best = Some(Best {
                        iteration: self.completed,
                        dice: ev.dice,
                        asd: ev.asd,
                        student: snapshot(&self.student),
                        teacher: self.teacher.net().clone(),
                    });
                }
            }
        }
        record.wall_time = self.elapsed();
        self.log.push(record);
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let (student, teacher, selected) = match &self.best {
            Some(b) => (b.student.clone(), b.teacher.clone(), Some((b.iteration, b.dice, b.asd))),
            None => (snapshot(&self.student), self.teacher.net().clone(), None),
        };
        TrainOutcome {
            student,
            teacher,
            final_student: snapshot(&self.student),
            final_teacher: self.teacher,
            log: self.log,
            selected,
        }
    }

    /// Writes the complete training state into `dir`: student, teacher,
    /// optimizer velocity, the best snapshot, the metrics log and a
    /// `state.txt` sidecar (iteration, phase, RNG state, config hash).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_params(&dir.join("student.pntw"), self.student.params())?;
        write_params(&dir.join("teacher.pntw"), self.teacher.net().params())?;
        write_params(&dir.join("optimizer.pntw"), &self.optimizer.velocity_set(self.student.params())?)?;
        let phase = match self.completed {
            0 => plan(&self.config, 0).phase,
            n => plan(&self.config, n - 1).phase,
        };
        let mut state = format!(
            "iteration = {}\nphase = {}\nrng = {}\nconfig_hash = {}\nteacher_step = {}\n",
            self.completed,
            phase,
            self.rng.state_hex(),
            self.config.hash(),
            self.teacher.step()
        );
        if let Some(b) = &self.best {
            write_params(&dir.join("best_student.pntw"), b.student.params())?;
            write_params(&dir.join("best_teacher.pntw"), b.teacher.params())?;
            state.push_str(&format!(
                "best_iteration = {}\nbest_dice = {}\nbest_asd = {}\n",
                b.iteration, b.dice, b.asd
            ));
        }
        state.push_str(&format!("wall_time = {}\n", self.elapsed()));
        std::fs::write(dir.join("state.txt"), state)?;
        std::fs::write(dir.join("metrics.csv"), to_csv(&self.log))?;
        Ok(())
    }

    /// Restores a trainer saved by [`save_checkpoint`](Self::save_checkpoint).
    /// The configuration must hash identically to the saved one.
    pub fn resume(config: TrainConfig, train: &'a Dataset, test: Option<&'a Dataset>, dir: &Path) -> Result<Self> {
        let mut t = Self::new(config, train, test)?;
        let text = std::fs::read_to_string(dir.join("state.txt"))?;
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| PintError::Format(format!("checkpoint state lacks {k}")))
        };
        let parse_err = |k: &str| PintError::Format(format!("checkpoint state has a malformed {k}"));
        if get("config_hash")? != t.config.hash() {
            return Err(PintError::Config("checkpoint was written with a different config".into()));
        }
        t.completed = get("iteration")?.parse().map_err(|_| parse_err("iteration"))?;
        t.rng = SplitRng::from_state_hex(&get("rng")?)?;
        let dropout = t.config.model.dropout_rate;
        t.student = MiniSegNet::from_params(read_params(&dir.join("student.pntw"))?, dropout)?;
        let teacher_step = get("teacher_step")?.parse().map_err(|_| parse_err("teacher_step"))?;
        t.teacher = TeacherState::from_parts(
            MiniSegNet::from_params(read_params(&dir.join("teacher.pntw"))?, dropout)?,
            t.config.ema_decay,
            teacher_step,
        )?;
        let velocity = read_params(&dir.join("optimizer.pntw"))?;
        t.optimizer.load_velocity_set(t.student.params(), &velocity)?;
        if kv.contains_key("best_iteration") {
            t.best = Some(Best {
                iteration: get("best_iteration")?.parse().map_err(|_| parse_err("best_iteration"))?,
                dice: get("best_dice")?.parse().map_err(|_| parse_err("best_dice"))?,
                asd: get("best_asd")?.parse().map_err(|_| parse_err("best_asd"))?,
                student: MiniSegNet::from_params(read_params(&dir.join("best_student.pntw"))?, dropout)?,
                teacher: MiniSegNet::from_params(read_params(&dir.join("best_teacher.pntw"))?, dropout)?,
            });
        }
        t.clock_offset = get("wall_time")?.parse().map_err(|_| parse_err("wall_time"))?;
        let mut log = from_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?;
        for r in &mut log {
            r.learning_rate = learning_rate_at(&t.config, r.iteration.saturating_sub(1));
        }
        if log.len() != t.completed {
            return Err(PintError::Format(format!(
                "metrics log has {} rows for {} completed steps",
                log.len(),
                t.completed
            )));
        }
        t.log = log;
        Ok(t)
    }
}

/// Trains with `config.strategy` to completion.
pub fn train(config: TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, train, test)?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// Pixel-level phase then image-level phase.
pub fn train_pint(mut config: TrainConfig, train_set: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    config.strategy = Strategy::Pint;
    train(config, train_set, test)
}

/// Single-loss ablation; `config.strategy` must be `pnt` or `int`.
pub fn train_ablation(config: TrainConfig, train_set: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    if !matches!(config.strategy, Strategy::Pnt | Strategy::Int) {
        return Err(PintError::Config(format!(
            "ablation needs strategy pnt or int, got {}",
            config.strategy
        )));
    }
    train(config, train_set, test)
}
