//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code under test to produce an expected
//! value.

#![allow(dead_code)]

use std::collections::HashSet;

use pint::metrics::BinaryMask;
use pint::noise::{cross_entropy_loss, image_rectified_loss, pixel_rectified_loss};
use pint::tensor::{Tape, Tensor, Var};
use pint::SplitRng;
use rand::seq::SliceRandom;
use rand::Rng;

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
pub const GRAD_INSTANCES: usize = 20;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> pint::Result<Var>>;

pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn uniform(rng: &mut SplitRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (for kinks at the origin).
fn off_zero(rng: &mut SplitRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values with gaps of at least 0.01 (no ties inside pool windows).
fn distinct(rng: &mut SplitRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    vals.shuffle(rng);
    for v in &mut vals {
        *v += rng.gen_range(0.0..0.01);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn simplex(rng: &mut SplitRng, shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut data = vec![0.0; b * c * plane];
    for n in 0..b {
        for p in 0..plane {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for ch in 0..c {
                data[(n * c + ch) * plane + p] = raw[ch] / s;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn labels(rng: &mut SplitRng, n: usize, c: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..c) as u8).collect()
}

fn bchw(rng: &mut SplitRng, cmin: usize) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(cmin..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)]
}

/// Random instances for every differentiable operation and loss.
pub fn grad_cases(op: &str, instance: usize) -> GradCase {
    let mut rng = SplitRng::with_stream(instance as u64, 0x6772_6164);
    let r = &mut rng;
    let unary = |inputs: Vec<Tensor>, f: Build| GradCase { inputs, build: f };
    let s1 = bchw(r, 1);
    match op {
        "conv2d" => {
            let k = *[1usize, 3].choose(r).unwrap();
            let stride = r.gen_range(1..=2);
            let pad = r.gen_range(0..=1);
            let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            let (h, w) = (r.gen_range(k..=5), r.gen_range(k..=5));
            let with_bias = r.gen::<bool>();
            let mut inputs = vec![uniform(r, &[b, cin, h, w], -1.0, 1.0), uniform(r, &[cout, cin, k, k], -1.0, 1.0)];
            if with_bias {
                inputs.push(uniform(r, &[cout], -1.0, 1.0));
            }
            unary(
                inputs,
                Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
            )
        }
        "upsample_nearest" => {
            let f = r.gen_range(2..=3);
            unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(move |t, v| t.upsample_nearest(v[0], f)))
        }
        "relu" => unary(vec![off_zero(r, &s1)], Box::new(|t, v| t.relu(v[0]))),
        "max_pool2d" => {
            let k = r.gen_range(1..=2);
            let shape = [r.gen_range(1..=2), r.gen_range(1..=3), k * r.gen_range(1..=3), k * r.gen_range(1..=3)];
            unary(vec![distinct(r, &shape)], Box::new(move |t, v| t.max_pool2d(v[0], k)))
        }
        "dropout" => {
            let rate = *[0.2, 0.5].choose(r).unwrap();
            let seed = r.gen::<u64>();
            unary(
                vec![uniform(r, &s1, -1.0, 1.0)],
                Box::new(move |t, v| t.dropout(v[0], rate, true, &mut SplitRng::new(seed))),
            )
        }
        "softmax_channel" => unary(vec![uniform(r, &s1, -2.0, 2.0)], Box::new(|t, v| t.softmax_channel(v[0]))),
        "log_softmax_channel" => unary(
            vec![uniform(r, &s1, -2.0, 2.0)],
            Box::new(|t, v| t.log_softmax_channel(v[0])),
        ),
        "add" | "mul" => {
            let s = bchw(r, 1);
            let inputs = vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)];
            if op == "add" {
                unary(inputs, Box::new(|t, v| t.add(v[0], v[1])))
            } else {
                unary(inputs, Box::new(|t, v| t.mul(v[0], v[1])))
            }
        }
        "scale" => {
            let f = r.gen_range(-3.0..3.0);
            unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(move |t, v| t.scale(v[0], f)))
        }
        "add_scalar" => {
            let f = r.gen_range(-3.0..3.0);
            unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(move |t, v| t.add_scalar(v[0], f)))
        }
        "add_const" | "mul_const" => {
            let s = bchw(r, 1);
            let c = uniform(r, &s, -2.0, 2.0);
            let x = uniform(r, &s, -1.0, 1.0);
            if op == "add_const" {
                unary(vec![x], Box::new(move |t, v| t.add_const(v[0], &c)))
            } else {
                unary(vec![x], Box::new(move |t, v| t.mul_const(v[0], &c)))
            }
        }
        "square" => unary(vec![uniform(r, &s1, -2.0, 2.0)], Box::new(|t, v| t.square(v[0]))),
        "concat_channels" => {
            let s = bchw(r, 1);
            let s2 = [s[0], r.gen_range(1..=3), s[2], s[3]];
            unary(
                vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s2, -1.0, 1.0)],
                Box::new(|t, v| t.concat_channels(v[0], v[1])),
            )
        }
        "sum_channels" => unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(|t, v| t.sum_channels(v[0]))),
        "gather_channel" => {
            let s = bchw(r, 1);
            let y = labels(r, s[0] * s[2] * s[3], s[1]);
            unary(vec![uniform(r, &s, -1.0, 1.0)], Box::new(move |t, v| t.gather_channel(v[0], &y)))
        }
        "mean_trailing" => unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(|t, v| t.mean_trailing(v[0]))),
        "mean" => unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(|t, v| t.mean(v[0]))),
        "sum" => unary(vec![uniform(r, &s1, -1.0, 1.0)], Box::new(|t, v| t.sum(v[0]))),
        "cross_entropy_loss" | "pixel_rectified_loss" | "image_rectified_loss" => {
            let s = bchw(r, 2);
            let y = labels(r, s[0] * s[2] * s[3], s[1]);
            let pseudo = simplex(r, &s);
            let logits = uniform(r, &s, -2.0, 2.0);
            match op {
                "cross_entropy_loss" => unary(vec![logits], Box::new(move |t, v| cross_entropy_loss(t, v[0], &y))),
                "pixel_rectified_loss" => {
                    let u = uniform(r, &[s[0], s[2], s[3]], 0.0, 1.0);
                    unary(
                        vec![logits],
                        Box::new(move |t, v| pixel_rectified_loss(t, v[0], &y, &pseudo, &u)),
                    )
                }
                _ => {
                    let u = uniform(r, &[s[0]], 0.0, 1.0);
                    unary(
                        vec![logits],
                        Box::new(move |t, v| image_rectified_loss(t, v[0], &y, &pseudo, &u)),
                    )
                }
            }
        }
        other => panic!("no generator for {other}"),
    }
}

pub const GRAD_OPS: &[&str] = &[
    "conv2d",
    "upsample_nearest",
    "relu",
    "max_pool2d",
    "dropout",
    "softmax_channel",
    "log_softmax_channel",
    "add",
    "mul",
    "scale",
    "add_scalar",
    "add_const",
    "mul_const",
    "square",
    "concat_channels",
    "sum_channels",
    "gather_channel",
    "mean_trailing",
    "mean",
    "sum",
    "cross_entropy_loss",
    "pixel_rectified_loss",
    "image_rectified_loss",
];

/// Random projection weights so every output element contributes.
fn projection(shape: &[usize]) -> Tensor {
    let mut rng = SplitRng::new(shape.iter().product::<usize>() as u64);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap()
}

fn scalar_value(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let w = projection(tape.value(out).shape());
    let p = tape.mul_const(out, &w).unwrap();
    let s = tape.sum(p).unwrap();
    tape.value(s).item().unwrap()
}

/// Worst `|analytic - numeric| / max(REL_TOL * max(|a|,|n|), ABS_FLOOR)` over
/// every input element; at most 1 means the case passes.
pub fn grad_check(case: &GradCase) -> f64 {
    let leaves: Vec<Tensor> = case.inputs.iter().map(|t| t.clone().requiring_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let w = projection(tape.value(out).shape());
    let p = tape.mul_const(out, &w).unwrap();
    let s = tape.sum(p).unwrap();
    let grads = tape.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, case.inputs[i].numel());
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (scalar_value(case, &plus) - scalar_value(case, &minus)) / (2.0 * FD_STEP);
            let a = analytic[j];
            let tol = (REL_TOL * a.abs().max(numeric.abs())).max(ABS_FLOOR);
            worst = worst.max((a - numeric).abs() / tol);
        }
    }
    worst
}

/// `(op, instances, worst ratio)` for every operation.
pub fn gradient_suite() -> Vec<(&'static str, usize, f64)> {
    GRAD_OPS
        .iter()
        .map(|&op| {
            let worst = (0..GRAD_INSTANCES)
                .map(|i| grad_check(&grad_cases(op, i)))
                .fold(0.0, f64::max);
            (op, GRAD_INSTANCES, worst)
        })
        .collect()
}

// ---------------------------------------------------------------- entropy

/// Shannon entropy, natural log, `0 ln 0 = 0`.
pub fn entropy_oracle(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &q in p {
        if q > 0.0 {
            h += q * (1.0 / q).ln();
        }
    }
    h
}

/// Random points of the simplex, a fraction of them with exact zeros.
pub fn random_simplex_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitRng::new(seed);
    (0..n)
        .map(|_| {
            let c = rng.gen_range(2..=5);
            let mut raw: Vec<f64> = (0..c).map(|_| -rng.gen_range(f64::EPSILON..1.0).ln()).collect();
            if rng.gen_range(0..10) == 0 {
                let k = rng.gen_range(0..c);
                raw[k] = 0.0;
            }
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

// ---------------------------------------------------------------- masks

pub fn random_mask(rng: &mut SplitRng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    match rng.gen_range(0..3) {
        0 => {
            let density = rng.gen_range(0.05..0.9);
            for y in 0..h {
                for x in 0..w {
                    m.set(y, x, rng.gen_bool(density));
                }
            }
        }
        1 => {
            for _ in 0..rng.gen_range(1..=3) {
                let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let (ry, rx) = (rng.gen_range(0.5..h as f64 / 2.0 + 1.0), rng.gen_range(0.5..w as f64 / 2.0 + 1.0));
                for y in 0..h {
                    for x in 0..w {
                        let dy = (y as f64 - cy) / ry;
                        let dx = (x as f64 - cx) / rx;
                        if dy * dy + dx * dx <= 1.0 {
                            m.set(y, x, true);
                        }
                    }
                }
            }
        }
        _ => {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    m.set(y, x, true);
                }
            }
        }
    }
    if m.is_empty() {
        m.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
    }
    m
}

fn points(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn dice_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (pa, pb) = (points(a), points(b));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    2.0 * pa.intersection(&pb).count() as f64 / (pa.len() + pb.len()) as f64
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
fn boundary_points(m: &BinaryMask) -> Vec<(f64, f64)> {
    let p = points(m);
    let mut out: Vec<(usize, usize)> = p
        .iter()
        .copied()
        .filter(|&(y, x)| {
            let nbrs = [
                (y as isize - 1, x as isize),
                (y as isize + 1, x as isize),
                (y as isize, x as isize - 1),
                (y as isize, x as isize + 1),
            ];
            nbrs.iter().any(|&(ny, nx)| {
                ny < 0 || nx < 0 || !p.contains(&(ny as usize, nx as usize))
            })
        })
        .collect();
    out.sort();
    out.into_iter().map(|(y, x)| (y as f64, x as f64)).collect()
}

/// All-pairs symmetric mean boundary distance.
pub fn asd_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ba, bb) = (boundary_points(a), boundary_points(b));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = ba.iter().map(|p| nearest(p, &bb)).sum::<f64>() + bb.iter().map(|p| nearest(p, &ba)).sum::<f64>();
    total / (ba.len() + bb.len()) as f64
}

/// Per-pixel disk-neighbourhood scan; off-image pixels are background.
pub fn morph_oracle(m: &BinaryMask, radius: usize, dilate: bool) -> BinaryMask {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let r = radius as isize;
    let mut out = BinaryMask::empty(m.height(), m.width());
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (yy, xx) = (y + dy, x + dx);
                    let v = yy >= 0 && xx >= 0 && yy < h && xx < w && m.get(yy as usize, xx as usize);
                    any |= v;
                    all &= v;
                }
            }
            out.set(y as usize, x as usize, if dilate { any } else { all });
        }
    }
    out
}

// ---------------------------------------------------------------- losses

/// Packs points with `c` classes into a `[1, c, 1, n]` tensor.
pub fn pack(points: &[&Vec<f64>], c: usize) -> Tensor {
    let n = points.len();
    let mut data = vec![0.0; c * n];
    for (i, p) in points.iter().enumerate() {
        for ch in 0..c {
            data[ch * n + i] = p[ch];
        }
    }
    Tensor::new(vec![1, c, 1, n], data).unwrap()
}

pub fn random_loss_batch(rng: &mut SplitRng, b: usize) -> (Tensor, Vec<u8>, Tensor) {
    let (c, h, w) = (rng.gen_range(2..=4), rng.gen_range(1..=5), rng.gen_range(1..=5));
    let plane = h * w;
    let logits = Tensor::new(vec![b, c, h, w], (0..b * c * plane).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let labels = (0..b * plane).map(|_| rng.gen_range(0..c) as u8).collect();
    let mut pseudo = vec![0.0; b * c * plane];
    for n in 0..b {
        for p in 0..plane {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for ch in 0..c {
                pseudo[(n * c + ch) * plane + p] = raw[ch] / s;
            }
        }
    }
    (logits, labels, Tensor::new(vec![b, c, h, w], pseudo).unwrap())
}

pub fn loss_value(f: impl FnOnce(&mut Tape, pint::tensor::Var) -> pint::Result<pint::tensor::Var>, logits: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = f(&mut tape, x).unwrap();
    tape.value(l).item().unwrap()
}

/// Per-pixel CE and squared error computed without the tape.
pub fn direct_terms(logits: &Tensor, labels: &[u8], pseudo: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = logits.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let (mut ce, mut mse) = (Vec::new(), Vec::new());
    for n in 0..b {
        for p in 0..plane {
            let z: Vec<f64> = (0..c).map(|ch| logits.data()[(n * c + ch) * plane + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce.push(lse - z[labels[n * plane + p] as usize]);
            mse.push(
                (0..c)
                    .map(|ch| ((z[ch] - lse).exp() - pseudo.data()[(n * c + ch) * plane + p]).powi(2))
                    .sum(),
            );
        }
    }
    (ce, mse)
}


/// Largest `|pixel loss - image loss|` over single-image batches with
/// spatially constant uncertainty.
pub fn reduction_gap(instances: usize, seed: u64) -> f64 {
    let mut rng = SplitRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (logits, labels, pseudo) = random_loss_batch(&mut rng, 1);
        let s = logits.shape().to_vec();
        let c = rng.gen_range(0.0..2.0);
        let u = Tensor::full(&[1, s[2], s[3]], c);
        let big_u = Tensor::full(&[1], c);
        let lp = loss_value(|t, x| pixel_rectified_loss(t, x, &labels, &pseudo, &u), &logits);
        let li = loss_value(|t, x| image_rectified_loss(t, x, &labels, &pseudo, &big_u), &logits);
        worst = worst.max((lp - li).abs());
    }
    worst
}

/// Largest gap between either rectified loss at zero uncertainty and the
/// directly evaluated mean cross-entropy.
pub fn zero_uncertainty_gap(instances: usize, seed: u64) -> f64 {
    let mut rng = SplitRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = rng.gen_range(1..=3);
        let (logits, labels, pseudo) = random_loss_batch(&mut rng, b);
        let s = logits.shape().to_vec();
        let u = Tensor::zeros(&[b, s[2], s[3]]);
        let big_u = Tensor::zeros(&[b]);
        let (direct, _) = direct_terms(&logits, &labels, &pseudo);
        let ce = direct.iter().sum::<f64>() / direct.len() as f64;
        let lp = loss_value(|t, x| pixel_rectified_loss(t, x, &labels, &pseudo, &u), &logits);
        let li = loss_value(|t, x| image_rectified_loss(t, x, &labels, &pseudo, &big_u), &logits);
        worst = worst.max((lp - ce).abs()).max((li - ce).abs());
    }
    worst
}
