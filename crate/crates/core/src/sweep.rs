//! Strategy × noise-rate grids repeated over seeds, aggregated to mean ± std.

use std::fmt::Write as _;

use crate::data::{corrupt_labels, generate_shapes, Dataset, NoiseMode, NoiseSpec};
use crate::error::{PintError, Result};
use crate::trainer::{evaluate, train, Strategy, TrainConfig};

/// Offset separating test-set seeds from training-set seeds.
const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct SweepSpec {
    /// Template for every run; `strategy` and `seed` are overridden per run.
    pub base: TrainConfig,
    pub noise_rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub repeats: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    pub mode: NoiseMode,
    pub base_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            noise_rates: vec![0.25, 0.5, 0.75],
            strategies: Strategy::ALL.to_vec(),
            repeats: 3,
            n_train: 80,
            n_test: 20,
            size: 32,
            radius_min: 2,
            radius_max: 5,
            mode: NoiseMode::RandomPerSample,
            base_seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(PintError::Parameter("repeats must be at least 1".into()));
        }
        if self.noise_rates.is_empty() || self.strategies.is_empty() {
            return Err(PintError::Parameter("sweep grid is empty".into()));
        }
        self.base.validate()?;
        for &rate in &self.noise_rates {
            self.noise_spec(rate, 0).validate()?;
        }
        Ok(())
    }

    fn noise_spec(&self, rate: f64, repeat: usize) -> NoiseSpec {
        NoiseSpec {
            mode: self.mode,
            ..NoiseSpec::new(rate, self.radius_min, self.radius_max, self.seed(repeat))
        }
    }

    /// Seed shared by the data and the training run of repeat `repeat`.
    pub fn seed(&self, repeat: usize) -> u64 {
        self.base_seed.wrapping_add(repeat as u64)
    }

    /// Noisy training split and clean test split for one grid cell and
    /// repeat. The clean images depend only on the repeat, so every rate and
    /// strategy sees the same underlying shapes.
    pub fn datasets(&self, rate: f64, repeat: usize) -> Result<(Dataset, Dataset)> {
        let seed = self.seed(repeat);
        let mut train = generate_shapes(self.n_train, self.size, self.size, seed)?;
        corrupt_labels(&mut train, &self.noise_spec(rate, repeat))?;
        let test = generate_shapes(self.n_test, self.size, self.size, seed.wrapping_add(TEST_SEED_OFFSET))?;
        Ok((train, test))
    }

    /// Config used for one run.
    pub fn run_config(&self, strategy: Strategy, repeat: usize) -> TrainConfig {
        TrainConfig {
            strategy,
            seed: self.seed(repeat),
            ..self.base.clone()
        }
    }
}

/// Outcome of one training run inside the grid.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub strategy: Strategy,
    pub noise_rate: f64,
    pub repeat: usize,
    pub result: std::result::Result<(f64, f64), String>,
}

/// Trains one run and evaluates the returned network on the test split.
pub fn run_once(spec: &SweepSpec, strategy: Strategy, rate: f64, repeat: usize) -> Result<(f64, f64)> {
    let (train_set, test) = spec.datasets(rate, repeat)?;
    let out = train(spec.run_config(strategy, repeat), &train_set, Some(&test))?;
    let ev = evaluate(&out.student, &test)?;
    Ok((ev.dice, ev.asd))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub strategy: Strategy,
    pub noise_rate: f64,
    pub dice: Vec<f64>,
    pub asd: Vec<f64>,
    pub failures: Vec<String>,
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CellStats {
    pub fn dice_stats(&self) -> (f64, f64) {
        mean_std(&self.dice)
    }

    pub fn asd_stats(&self) -> (f64, f64) {
        mean_std(&self.asd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub noise_rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub repeats: usize,
    /// Strategy-major: `cells[s * rates + r]`.
    pub cells: Vec<CellStats>,
}

impl SweepTable {
    pub fn cell(&self, strategy: Strategy, rate: f64) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.strategy == strategy && c.noise_rate == rate)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,noise_rate,runs,dice_mean,dice_std,asd_mean,asd_std,failures\n");
        for c in &self.cells {
            let (dm, ds) = c.dice_stats();
            let (am, ad) = c.asd_stats();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.strategy,
                c.noise_rate,
                c.dice.len(),
                dm,
                ds,
                am,
                ad,
                c.failures.len()
            );
        }
        s
    }

    /// Rows are strategies, columns noise rates; each cell holds
    /// `Dice ± std` over `ASD ± std`.
    pub fn to_text(&self) -> String {
        let fmt = |(m, s): (f64, f64)| {
            if m.is_nan() {
                "failed".to_string()
            } else {
                format!("{m:.4} ± {s:.4}")
            }
        };
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["strategy".to_string()];
        for r in &self.noise_rates {
            header.push(format!("Dice @{r}"));
            header.push(format!("ASD @{r}"));
        }
        rows.push(header);
        for &st in &self.strategies {
            let mut row = vec![st.to_string()];
            for &r in &self.noise_rates {
                match self.cell(st, r) {
                    Some(c) => {
                        let mut d = fmt(c.dice_stats());
                        if !c.failures.is_empty() {
                            d.push_str(&format!(" ({} failed)", c.failures.len()));
                        }
                        row.push(d);
                        row.push(fmt(c.asd_stats()));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// Runs the grid with the provided per-run function. Failures are recorded
/// in their cell and the sweep continues.
pub fn run_sweep_with(
    spec: &SweepSpec,
    mut run: impl FnMut(Strategy, f64, usize) -> Result<(f64, f64)>,
    mut on_run: impl FnMut(&RunReport),
) -> Result<SweepTable> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &strategy in &spec.strategies {
        for &rate in &spec.noise_rates {
            let mut cell = CellStats {
                strategy,
                noise_rate: rate,
                dice: Vec::new(),
                asd: Vec::new(),
                failures: Vec::new(),
            };
            for repeat in 0..spec.repeats {
                let result = run(strategy, rate, repeat).map_err(|e| e.to_string());
                match &result {
                    Ok((d, a)) => {
                        cell.dice.push(*d);
                        cell.asd.push(*a);
                    }
                    Err(e) => cell.failures.push(format!("repeat {repeat}: {e}")),
                }
                on_run(&RunReport {
                    strategy,
                    noise_rate: rate,
                    repeat,
                    result,
                });
            }
            cells.push(cell);
        }
    }
    Ok(SweepTable {
        noise_rates: spec.noise_rates.clone(),
        strategies: spec.strategies.clone(),
        repeats: spec.repeats,
        cells,
    })
}

pub fn run_sweep(spec: &SweepSpec, on_run: impl FnMut(&RunReport)) -> Result<SweepTable> {
    run_sweep_with(spec, |s, r, k| run_once(spec, s, r, k), on_run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> SweepSpec {
        SweepSpec {
            base: TrainConfig {
                phase1_iters: 3,
                phase2_iters: 2,
                eval_every: 2,
                batch_size: 2,
                model: ModelConfig {
                    widths: vec![4, 8],
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
            noise_rates: vec![0.5],
            strategies: vec![Strategy::Pint],
            repeats: 1,
            n_train: 4,
            n_test: 2,
            size: 16,
            ..SweepSpec::default()
        }
    }

    #[test]
    fn std_of_single_repeat_is_zero() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn single_cell_matches_direct_run() {
        let spec = tiny();
        let table = run_sweep(&spec, |_| {}).unwrap();
        assert_eq!(table.cells.len(), 1);
        let c = &table.cells[0];
        assert_eq!(c.dice_stats().1, 0.0);
        let (train_set, test) = spec.datasets(0.5, 0).unwrap();
        let out = train(spec.run_config(Strategy::Pint, 0), &train_set, Some(&test)).unwrap();
        assert_eq!(c.dice[0], evaluate(&out.student, &test).unwrap().dice);
        assert!(table.to_text().contains("pint"));
        assert_eq!(table.to_csv().lines().count(), 2);
    }

    #[test]
    fn failures_are_recorded_and_sweep_continues() {
        let spec = SweepSpec {
            strategies: vec![Strategy::Pnt, Strategy::Int],
            repeats: 2,
            ..tiny()
        };
        let mut seen = 0;
        let table = run_sweep_with(
            &spec,
            |s, _, k| {
                if s == Strategy::Pnt && k == 0 {
                    Err(PintError::Numeric("boom".into()))
                } else {
                    Ok((0.5, 1.0))
                }
            },
            |_| seen += 1,
        )
        .unwrap();
        assert_eq!(seen, 4);
        let pnt = table.cell(Strategy::Pnt, 0.5).unwrap();
        assert_eq!(pnt.failures.len(), 1);
        assert_eq!(pnt.dice, vec![0.5]);
        assert!(table.to_text().contains("(1 failed)"));
    }

    #[test]
    fn rates_share_clean_images() {
        let spec = tiny();
        let (a, ta) = spec.datasets(0.25, 0).unwrap();
        let (b, tb) = spec.datasets(0.75, 0).unwrap();
        assert_eq!(ta, tb);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.image == y.image && x.clean_mask == y.clean_mask));
    }

    #[test]
    fn zero_repeats_rejected() {
        assert!(SweepSpec { repeats: 0, ..tiny() }.validate().is_err());
    }
}
