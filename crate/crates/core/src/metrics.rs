//! Dice overlap and symmetric average surface distance on binary masks.
//!
//! Boundary pixels are foreground pixels with at least one background or
//! off-image 4-neighbour. ASD is
//! `(sum_{p in dP} d(p, dG) + sum_{g in dG} d(g, dP)) / (|dP| + |dG|)`
//! with Euclidean pixel distances, evaluated through an exact squared
//! distance transform.

use crate::error::{PintError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(PintError::Shape(format!(
                "{} mask values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Foreground is every non-zero class id.
    pub fn from_labels(labels: &[u8], height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l != 0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn to_labels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    /// Pixelwise exclusive or.
    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_shape(self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a ^ b).collect();
        BinaryMask::new(self.height, self.width, data)
    }

    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        if !self.get(y, x) {
            return false;
        }
        y == 0
            || x == 0
            || y + 1 == self.height
            || x + 1 == self.width
            || !self.get(y - 1, x)
            || !self.get(y + 1, x)
            || !self.get(y, x - 1)
            || !self.get(y, x + 1)
    }

    pub fn boundary(&self) -> BinaryMask {
        let mut out = BinaryMask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_boundary(y, x) {
                    out.set(y, x, true);
                }
            }
        }
        out
    }
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(PintError::Shape(format!(
            "mask shapes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Symmetric average surface distance in pixels. Undefined when either
/// mask is empty.
pub fn asd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(PintError::UndefinedMetric(
            "average surface distance of an empty mask".into(),
        ));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    // each direction summed separately so the result is exactly symmetric
    let directed = |from: &BinaryMask, to: &BinaryMask| {
        let dt = squared_distance_transform(to);
        from.data
            .iter()
            .zip(&dt)
            .filter(|(&v, _)| v)
            .fold((0.0, 0usize), |(s, n), (_, d)| (s + d.sqrt(), n + 1))
    };
    let (s1, n1) = directed(&bp, &bg);
    let (s2, n2) = directed(&bg, &bp);
    Ok((s1 + s2) / (n1 + n2) as f64)
}

/// ASD with the empty-mask sentinel: the image diagonal. The flag reports
/// whether the sentinel was used.
pub fn asd_or_sentinel(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, bool)> {
    match asd(pred, gt) {
        Ok(v) => Ok((v, false)),
        Err(PintError::UndefinedMetric(_)) => {
            let (h, w) = (pred.height as f64, pred.width as f64);
            Ok(((h * h + w * w).sqrt(), true))
        }
        Err(e) => Err(e),
    }
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel (separable lower-envelope-of-parabolas transform).
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid: Vec<f64> = mask.data.iter().map(|&v| if v { 0.0 } else { FAR }).collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        envelope_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&buf[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn envelope_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    let intersect = |q: usize, p: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] is -inf, so this never underflows
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}
