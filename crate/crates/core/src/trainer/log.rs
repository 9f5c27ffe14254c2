//! Per-iteration metrics and their CSV form.

use crate::error::{PintError, Result};

pub const CSV_HEADER: &str = "iter,phase,loss,mean_u,mean_U,dice,asd,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based count of optimisation steps completed, across phases.
    pub iteration: usize,
    pub phase: u8,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub mean_pixel_uncertainty: Option<f64>,
    pub mean_image_uncertainty: Option<f64>,
    pub test_dice: Option<f64>,
    pub test_asd: Option<f64>,
    pub wall_time: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.phase,
            self.train_loss,
            opt(self.mean_pixel_uncertainty),
            opt(self.mean_image_uncertainty),
            opt(self.test_dice),
            opt(self.test_asd),
            self.wall_time
        )
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses a log written by [`to_csv`]. Learning rates are not stored and
/// come back as NaN until the caller fills them in.
pub fn from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(PintError::Format("metrics log lacks the expected header".into()));
    }
    let bad = |n: usize| PintError::Format(format!("malformed metrics row {n}"));
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(n));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(MetricsRecord {
            iteration: f[0].parse().map_err(|_| bad(n))?,
            phase: f[1].parse().map_err(|_| bad(n))?,
            learning_rate: f64::NAN,
            train_loss: num(f[2])?,
            mean_pixel_uncertainty: maybe(f[3])?,
            mean_image_uncertainty: maybe(f[4])?,
            test_dice: maybe(f[5])?,
            test_asd: maybe(f[6])?,
            wall_time: num(f[7])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_preserves_bits() {
        let recs = vec![
            MetricsRecord {
                iteration: 1,
                phase: 1,
                learning_rate: 0.01,
                train_loss: 0.1 + 0.2,
                mean_pixel_uncertainty: Some(1.0 / 3.0),
                mean_image_uncertainty: Some(2.0 / 3.0),
                test_dice: None,
                test_asd: None,
                wall_time: 0.0,
            },
            MetricsRecord {
                iteration: 2,
                phase: 2,
                learning_rate: 0.01,
                train_loss: 1e-300,
                mean_pixel_uncertainty: None,
                mean_image_uncertainty: None,
                test_dice: Some(0.875),
                test_asd: Some(1.25),
                wall_time: 3.5,
            },
        ];
        let text = to_csv(&recs);
        assert!(text.starts_with("iter,phase,loss,mean_u,mean_U,dice,asd,seconds\n"));
        let back = from_csv(&text).unwrap();
        assert_eq!(to_csv(&back), text);
        assert_eq!(back[0].train_loss.to_bits(), (0.1f64 + 0.2).to_bits());
        assert!(from_csv("bad\n").is_err());
    }
}
