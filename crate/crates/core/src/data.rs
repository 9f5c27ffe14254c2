//! Synthetic ellipse segmentation data, contour label noise and the `PNTD`
//! dataset file.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PintError, Result};
use crate::io_util::{read_exact_or_truncated, read_u32};
use crate::metrics::BinaryMask;
use crate::rng::SplitRng;

pub const DATASET_MAGIC: &[u8; 4] = b"PNTD";
pub const DATASET_VERSION: u32 = 1;

const TEXTURE_SIGMA: f64 = 0.3;
const NOISE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// Raw intensities, row-major `H*W` (single channel).
    pub image: Vec<f32>,
    /// Reference labels, used for evaluation only.
    pub clean_mask: Vec<u8>,
    /// Labels seen by training.
    pub noisy_mask: Vec<u8>,
    pub is_corrupted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_corrupted).count()
    }

    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != plane || s.clean_mask.len() != plane || s.noisy_mask.len() != plane {
                return Err(PintError::Shape(format!("sample {i} does not match {}x{}", self.height, self.width)));
            }
            let bad = s
                .clean_mask
                .iter()
                .chain(&s.noisy_mask)
                .any(|&c| c as usize >= self.num_classes);
            if bad {
                return Err(PintError::Contract(format!("sample {i} has a class id >= {}", self.num_classes)));
            }
            if !s.is_corrupted && s.clean_mask != s.noisy_mask {
                return Err(PintError::Contract(format!("sample {i} is uncorrupted but its masks differ")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Erode,
    Dilate,
    RandomPerSample,
}

impl std::str::FromStr for NoiseMode {
    type Err = PintError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erode" => Ok(Self::Erode),
            "dilate" => Ok(Self::Dilate),
            "random" | "random-per-sample" => Ok(Self::RandomPerSample),
            other => Err(PintError::Config(format!("unknown noise mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Erode => "erode",
            Self::Dilate => "dilate",
            Self::RandomPerSample => "random-per-sample",
        })
    }
}

/// Label-noise corruption settings.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub noise_rate: f64,
    pub radius_min: usize,
    pub radius_max: usize,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(noise_rate: f64, radius_min: usize, radius_max: usize, seed: u64) -> Self {
        Self {
            noise_rate,
            radius_min,
            radius_max,
            mode: NoiseMode::RandomPerSample,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(PintError::Parameter(format!("noise rate {} outside [0,1]", self.noise_rate)));
        }
        if self.radius_min == 0 || self.radius_min > self.radius_max {
            return Err(PintError::Parameter(format!(
                "radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            )));
        }
        Ok(())
    }
}

/// `n` clean samples of 1-3 filled ellipses (class 1) on background
/// (class 0). Foreground intensity 1, background 0, plus N(0, 0.3^2)
/// texture. Sample `i` draws only from stream `i` of `seed`.
pub fn generate_shapes(n: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(PintError::Parameter("sample count must be positive".into()));
    }
    if height < 16 || width < 16 {
        return Err(PintError::Parameter(format!("images must be at least 16x16, got {height}x{width}")));
    }
    let samples = (0..n)
        .map(|i| generate_one(height, width, &mut SplitRng::with_stream(seed, i as u64)))
        .collect();
    Ok(Dataset {
        height,
        width,
        num_classes: 2,
        samples,
    })
}

fn generate_one(h: usize, w: usize, rng: &mut SplitRng) -> SegmentationSample {
    let side = h.min(w) as f64;
    let (amin, amax) = (0.12 * side, 0.28 * side);
    let mut mask = vec![0u8; h * w];
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let a = rng.gen_range(amin..amax);
        let b = rng.gen_range(amin..amax);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let reach = a.max(b) + 1.0;
        let cy = rng.gen_range(reach..h as f64 - 1.0 - reach);
        let cx = rng.gen_range(reach..w as f64 - 1.0 - reach);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    mask[y * w + x] = 1;
                }
            }
        }
        mask[cy.round() as usize * w + cx.round() as usize] = 1;
    }
    let texture = Normal::new(0.0, TEXTURE_SIGMA).expect("positive sigma");
    let image = mask
        .iter()
        .map(|&m| (m as f64 + texture.sample(rng)) as f32)
        .collect();
    SegmentationSample {
        image,
        noisy_mask: mask.clone(),
        clean_mask: mask,
        is_corrupted: false,
    }
}

/// Zero-mean, unit-variance rescaling of one image.
pub fn normalize(image: &[f64]) -> Result<Vec<f64>> {
    if image.is_empty() {
        return Err(PintError::Degenerate("empty image".into()));
    }
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return Err(PintError::Degenerate("cannot normalize a constant image".into()));
    }
    let std = var.sqrt();
    Ok(image.iter().map(|v| (v - mean) / std).collect())
}

/// Half-widths of the disk `dx^2 + dy^2 <= r^2` per row offset `dy = -r..=r`.
fn disk_rows(radius: usize) -> Vec<(isize, usize)> {
    let r2 = radius * radius;
    (-(radius as isize)..=radius as isize)
        .map(|dy| {
            let rest = r2 - (dy * dy) as usize;
            let mut hw = 0;
            while (hw + 1) * (hw + 1) <= rest {
                hw += 1;
            }
            (dy, hw)
        })
        .collect()
}

/// Binary erosion or dilation with a disk structuring element. Pixels
/// outside the image count as background.
pub fn morph(mask: &BinaryMask, radius: usize, op: MorphOp) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut prefix = vec![0usize; h * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            prefix[y * (w + 1) + x + 1] = prefix[y * (w + 1) + x] + mask.get(y, x) as usize;
        }
    }
    let run = |y: usize, lo: usize, hi: usize| prefix[y * (w + 1) + hi] - prefix[y * (w + 1) + lo];
    let rows = disk_rows(radius);
    let mut out = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let hit = match op {
                MorphOp::Dilate => rows.iter().any(|&(dy, hw)| {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        return false;
                    }
                    let lo = x.saturating_sub(hw);
                    let hi = (x + hw + 1).min(w);
                    run(yy as usize, lo, hi) > 0
                }),
                MorphOp::Erode => rows.iter().all(|&(dy, hw)| {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize || x < hw || x + hw >= w {
                        return false;
                    }
                    run(yy as usize, x - hw, x + hw + 1) == 2 * hw + 1
                }),
            };
            out.set(y, x, hit);
        }
    }
    out
}

/// Corrupts exactly `round(rate * n)` uniformly chosen samples by eroding or
/// dilating their foreground. An erosion that would erase the foreground is
/// retried with smaller radii; if radius 1 still erases it, the empty mask
/// is kept as the noisy label.
pub fn corrupt_labels(dataset: &mut Dataset, spec: &NoiseSpec) -> Result<()> {
    spec.validate()?;
    let n = dataset.samples.len();
    let count = (spec.noise_rate * n as f64).round() as usize;
    let mut rng = SplitRng::with_stream(spec.seed, NOISE_STREAM);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    let (h, w) = (dataset.height, dataset.width);
    for i in chosen {
        let op = match spec.mode {
            NoiseMode::Erode => MorphOp::Erode,
            NoiseMode::Dilate => MorphOp::Dilate,
            NoiseMode::RandomPerSample => {
                if rng.gen::<bool>() {
                    MorphOp::Erode
                } else {
                    MorphOp::Dilate
                }
            }
        };
        let radius = rng.gen_range(spec.radius_min..=spec.radius_max);
        let sample = &mut dataset.samples[i];
        let clean = BinaryMask::from_labels(&sample.clean_mask, h, w)?;
        let mut noisy = morph(&clean, radius, op);
        if op == MorphOp::Erode {
            let mut r = radius;
            while noisy.is_empty() && r > 1 {
                r -= 1;
                noisy = morph(&clean, r, op);
            }
        }
        sample.noisy_mask = noisy.to_labels();
        sample.is_corrupted = true;
    }
    Ok(())
}

fn payload_len(h: usize, w: usize) -> usize {
    h * w * 4 + 2 * h * w + 1
}

pub fn write_dataset_to(mut out: impl Write, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    out.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, ds.samples.len() as u32, ds.height as u32, ds.width as u32, ds.num_classes as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(payload_len(ds.height, ds.width));
    for s in &ds.samples {
        buf.clear();
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.clean_mask);
        buf.extend_from_slice(&s.noisy_mask);
        buf.push(s.is_corrupted as u8);
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset_from(mut r: impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "dataset magic")?;
    if &magic != DATASET_MAGIC {
        return Err(PintError::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(PintError::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = read_u32(&mut r, "sample count")? as usize;
    let height = read_u32(&mut r, "height")? as usize;
    let width = read_u32(&mut r, "width")? as usize;
    let num_classes = read_u32(&mut r, "class count")? as usize;
    let plane = height * width;
    let mut buf = vec![0u8; payload_len(height, width)];
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        read_exact_or_truncated(&mut r, &mut buf, &format!("sample {i}"))?;
        let image = buf[..4 * plane]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let clean_mask = buf[4 * plane..5 * plane].to_vec();
        let noisy_mask = buf[5 * plane..6 * plane].to_vec();
        let is_corrupted = match buf[6 * plane] {
            0 => false,
            1 => true,
            b => return Err(PintError::Format(format!("sample {i} has corrupted flag {b}"))),
        };
        samples.push(SegmentationSample {
            image,
            clean_mask,
            noisy_mask,
            is_corrupted,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(PintError::Format("trailing bytes after the last sample".into()));
    }
    let ds = Dataset {
        height,
        width,
        num_classes,
        samples,
    };
    ds.validate().map_err(|e| PintError::Format(e.to_string()))?;
    Ok(ds)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, ds)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    read_dataset_from(bytes.as_slice())
}
