//! Noise-tolerant supervision: the EMA teacher, Monte-Carlo perturbed
//! pseudo labels, entropy uncertainty at pixel and image level, and the
//! uncertainty-rectified losses that blend cross-entropy on the given labels
//! with squared error against the pseudo labels.
//!
//! Uncertainty enters the losses only as a constant weight
//! `alpha = exp(-u)`; no gradient flows through it or through the teacher.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{PintError, Result};
use crate::model::MiniSegNet;
use crate::rng::SplitRng;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Exponential moving average of the student's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    net: MiniSegNet,
    decay: f64,
    step: u64,
}

fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(PintError::Parameter(format!("EMA decay {decay} outside [0,1]")));
    }
    Ok(())
}

impl TeacherState {
    /// Teacher initialised as an exact copy of `student`.
    pub fn from_student(student: &MiniSegNet, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        let mut net = student.clone();
        for (_, t) in net.params_mut().iter_mut() {
            t.set_requires_grad(false);
        }
        Ok(Self { net, decay, step: 0 })
    }

    /// Restores a teacher from checkpointed parameters.
    pub fn from_parts(mut net: MiniSegNet, decay: f64, step: u64) -> Result<Self> {
        check_decay(decay)?;
        for (_, t) in net.params_mut().iter_mut() {
            t.set_requires_grad(false);
        }
        Ok(Self { net, decay, step })
    }

    pub fn net(&self) -> &MiniSegNet {
        &self.net
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `teacher <- decay*teacher + (1-decay)*student`, then `step += 1`.
    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        ema_update(self.net.params_mut(), student, self.decay)?;
        self.step += 1;
        Ok(())
    }
}

/// Elementwise EMA of aligned parameter sets. `student` is not modified.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, decay: f64) -> Result<()> {
    check_decay(decay)?;
    teacher.check_aligned(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

/// How the teacher's inputs are perturbed for the Monte-Carlo passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub passes: usize,
    pub gaussian_sigma: f64,
    pub teacher_dropout_active: bool,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            passes: 4,
            gaussian_sigma: 0.1,
            teacher_dropout_active: true,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(PintError::Parameter("at least one perturbed pass is required".into()));
        }
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(PintError::Parameter(format!("sigma {} must be >= 0", self.gaussian_sigma)));
        }
        Ok(())
    }
}

/// Mean teacher softmax over `spec.passes` perturbed copies of `images`.
/// Splits one child stream per pass off `rng`.
pub fn mc_pseudo_labels(
    teacher: &MiniSegNet,
    images: &Tensor,
    spec: &PerturbationSpec,
    rng: &mut SplitRng,
) -> Result<Tensor> {
    spec.validate()?;
    let mut streams = rng.split(spec.passes);
    mc_pseudo_labels_with_streams(teacher, images, spec, &mut streams)
}

/// As [`mc_pseudo_labels`] with caller-provided per-pass streams. Pass `m`
/// draws its Gaussian noise and dropout masks from `streams[m]` only.
pub fn mc_pseudo_labels_with_streams(
    teacher: &MiniSegNet,
    images: &Tensor,
    spec: &PerturbationSpec,
    streams: &mut [SplitRng],
) -> Result<Tensor> {
    spec.validate()?;
    if streams.len() != spec.passes {
        return Err(PintError::Contract(format!(
            "{} rng streams for {} passes",
            streams.len(),
            spec.passes
        )));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for (m, rng) in streams.iter_mut().enumerate() {
        let mut perturbed = images.clone();
        if spec.gaussian_sigma > 0.0 {
            for v in perturbed.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += spec.gaussian_sigma * e;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(perturbed);
        let probs = teacher
            .forward_on(&mut tape, x, spec.teacher_dropout_active, false, rng)
            .and_then(|(logits, _)| tape.softmax_channel(logits))
            .map_err(|e| match e {
                PintError::Numeric(msg) => PintError::Numeric(format!("teacher pass {m}: {msg}")),
                other => other,
            })?;
        let p = tape.value(probs);
        shape = p.shape().to_vec();
        match &mut acc {
            Some(a) => a.iter_mut().zip(p.data()).for_each(|(s, v)| *s += v),
            None => acc = Some(p.data().to_vec()),
        }
    }
    let inv = 1.0 / spec.passes as f64;
    let data = acc.expect("passes >= 1").into_iter().map(|v| v * inv).collect();
    Tensor::new(shape, data)
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(PintError::Shape(format!("{what} must be [B,C,H,W], got {s:?}"))),
    }
}

const SIMPLEX_TOL: f64 = 1e-6;

/// Per-pixel Shannon entropy `-sum_c p_c ln p_c` (with `0 ln 0 = 0`),
/// divided by `ln C` when `normalize` is set. `[B,C,H,W] -> [B,H,W]`.
pub fn pixel_uncertainty(pseudo_prob: &Tensor, normalize: bool) -> Result<Tensor> {
    let (b, c, h, w) = dims4(pseudo_prob, "pseudo probabilities")?;
    let plane = h * w;
    let p = pseudo_prob.data();
    let scale = if normalize { 1.0 / (c as f64).ln() } else { 1.0 };
    let mut out = vec![0.0; b * plane];
    for n in 0..b {
        for px in 0..plane {
            let mut sum = 0.0;
            let mut ent = 0.0;
            for ch in 0..c {
                let v = p[(n * c + ch) * plane + px];
                if !(0.0..=1.0).contains(&v) {
                    return Err(PintError::Contract(format!("probability {v} outside [0,1]")));
                }
                sum += v;
                if v > 0.0 {
                    ent -= v * v.ln();
                }
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(PintError::Contract(format!("pixel probabilities sum to {sum}")));
            }
            out[n * plane + px] = ent.max(0.0) * scale;
        }
    }
    Tensor::new(vec![b, h, w], out)
}

/// `exp(-u)` elementwise.
pub fn alpha(uncertainty: &Tensor) -> Tensor {
    let data = uncertainty.data().iter().map(|u| (-u).exp()).collect();
    Tensor::new(uncertainty.shape().to_vec(), data).expect("same shape")
}

/// Mean pixel uncertainty of each image: `[B,H,W] -> [B]`.
pub fn image_uncertainty(pixel_u: &Tensor) -> Result<Tensor> {
    let b = match *pixel_u.shape() {
        [b, _, _] => b,
        ref s => return Err(PintError::Shape(format!("pixel uncertainty must be [B,H,W], got {s:?}"))),
    };
    if pixel_u.numel() == 0 {
        return Err(PintError::Shape("empty uncertainty map".into()));
    }
    let per = pixel_u.numel() / b;
    let data = pixel_u
        .data()
        .chunks(per)
        .map(|c| c.iter().sum::<f64>() / per as f64)
        .collect();
    Tensor::new(vec![b], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoLabelMode {
    Soft,
    Hard,
}

impl std::str::FromStr for PseudoLabelMode {
    type Err = PintError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => Err(PintError::Config(format!("unknown pseudo-label mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PseudoLabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        })
    }
}

/// Soft targets are `p` itself; hard targets are its per-pixel one-hot
/// argmax (lowest class index wins ties).
pub fn pseudo_targets(pseudo_prob: &Tensor, mode: PseudoLabelMode) -> Result<Tensor> {
    let (b, c, h, w) = dims4(pseudo_prob, "pseudo probabilities")?;
    if mode == PseudoLabelMode::Soft {
        return Ok(pseudo_prob.clone());
    }
    let plane = h * w;
    let p = pseudo_prob.data();
    let mut out = vec![0.0; p.len()];
    for n in 0..b {
        for px in 0..plane {
            let best = (0..c)
                .max_by(|&i, &j| {
                    p[(n * c + i) * plane + px]
                        .total_cmp(&p[(n * c + j) * plane + px])
                        .then(j.cmp(&i))
                })
                .unwrap();
            out[(n * c + best) * plane + px] = 1.0;
        }
    }
    Tensor::new(pseudo_prob.shape().to_vec(), out)
}

/// Everything derived from one batch's Monte-Carlo teacher passes.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBundle {
    pub pseudo_prob: Tensor,
    pub pseudo_label: Tensor,
    pub pixel_uncertainty: Tensor,
    pub pixel_alpha: Tensor,
    pub image_uncertainty: Tensor,
    pub image_alpha: Tensor,
}

impl UncertaintyBundle {
    pub fn from_pseudo_prob(pseudo_prob: Tensor, mode: PseudoLabelMode, normalize: bool) -> Result<Self> {
        let pseudo_label = pseudo_targets(&pseudo_prob, mode)?;
        let pixel_uncertainty = pixel_uncertainty(&pseudo_prob, normalize)?;
        let pixel_alpha = alpha(&pixel_uncertainty);
        let image_uncertainty = image_uncertainty(&pixel_uncertainty)?;
        let image_alpha = alpha(&image_uncertainty);
        Ok(Self {
            pseudo_prob,
            pseudo_label,
            pixel_uncertainty,
            pixel_alpha,
            image_uncertainty,
            image_alpha,
        })
    }

    /// Runs the teacher passes and derives every quantity.
    pub fn estimate(
        teacher: &MiniSegNet,
        images: &Tensor,
        spec: &PerturbationSpec,
        mode: PseudoLabelMode,
        normalize: bool,
        rng: &mut SplitRng,
    ) -> Result<Self> {
        let p = mc_pseudo_labels(teacher, images, spec, rng)?;
        Self::from_pseudo_prob(p, mode, normalize)
    }
}

/// Per-pixel cross-entropy `-ln softmax(logits)_y` and squared error
/// `sum_c (softmax(logits)_c - target_c)^2`, both `[B,H,W]`.
fn pixel_terms(tape: &mut Tape, logits: Var, labels: &[u8], pseudo: &Tensor) -> Result<(Var, Var)> {
    let shape = tape.value(logits).shape().to_vec();
    if pseudo.shape() != shape.as_slice() {
        return Err(PintError::Shape(format!(
            "pseudo labels {:?} do not match logits {shape:?}",
            pseudo.shape()
        )));
    }
    let logp = tape.log_softmax_channel(logits)?;
    let picked = tape.gather_channel(logp, labels)?;
    let ce = tape.scale(picked, -1.0)?;
    let prob = tape.softmax_channel(logits)?;
    let neg_target = Tensor::new(shape, pseudo.data().iter().map(|v| -v).collect())?;
    let diff = tape.add_const(prob, &neg_target)?;
    let sq = tape.square(diff)?;
    let mse = tape.sum_channels(sq)?;
    Ok((ce, mse))
}

fn blend(tape: &mut Tape, seg: Var, pse: Var, alpha: &Tensor) -> Result<Var> {
    if tape.value(seg).shape() != alpha.shape() {
        return Err(PintError::Shape(format!(
            "uncertainty {:?} does not match loss terms {:?}",
            alpha.shape(),
            tape.value(seg).shape()
        )));
    }
    let rest = Tensor::new(alpha.shape().to_vec(), alpha.data().iter().map(|a| 1.0 - a).collect())?;
    let a = tape.mul_const(seg, alpha)?;
    let b = tape.mul_const(pse, &rest)?;
    let total = tape.add(a, b)?;
    tape.mean(total)
}

/// Mean pixel cross-entropy against `labels` (`[B*H*W]` class ids).
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let logp = tape.log_softmax_channel(logits)?;
    let picked = tape.gather_channel(logp, labels)?;
    let ce = tape.scale(picked, -1.0)?;
    tape.mean(ce)
}

/// Pixel-rectified loss: mean over all pixels of
/// `exp(-u) * CE(f, y) + (1 - exp(-u)) * ||f - y_hat||^2`.
pub fn pixel_rectified_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    pseudo: &Tensor,
    pixel_u: &Tensor,
) -> Result<Var> {
    let (ce, mse) = pixel_terms(tape, logits, labels, pseudo)?;
    blend(tape, ce, mse, &alpha(pixel_u))
}

/// Image-rectified loss: per image the pixel-mean CE and pixel-mean squared
/// error are blended with `exp(-U_i)`; the result is averaged over images.
pub fn image_rectified_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    pseudo: &Tensor,
    image_u: &Tensor,
) -> Result<Var> {
    let (ce, mse) = pixel_terms(tape, logits, labels, pseudo)?;
    let ce_i = tape.mean_trailing(ce)?;
    let mse_i = tape.mean_trailing(mse)?;
    blend(tape, ce_i, mse_i, &alpha(image_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use std::f64::consts::LN_2;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn ema_examples() {
        let mut teacher = ParamSet::new();
        teacher.insert("w", t(&[1], &[0.0])).unwrap();
        let mut student = ParamSet::new();
        student.insert("w", t(&[1], &[1.0])).unwrap();
        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert!((teacher.get("w").unwrap().data()[0] - 0.01).abs() < 1e-15);
        let frozen = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, frozen);
        assert_eq!(student.get("w").unwrap().data(), &[1.0]);
        let mut other = ParamSet::new();
        other.insert("v", t(&[1], &[1.0])).unwrap();
        assert!(matches!(ema_update(&mut teacher, &other, 0.9), Err(PintError::Contract(_))));
    }

    #[test]
    fn teacher_counts_steps_and_never_requires_grad() {
        let student = MiniSegNet::init(0, ModelConfig::default()).unwrap();
        let mut teacher = TeacherState::from_student(&student, 0.99).unwrap();
        assert!(teacher.net().params().iter().all(|(_, p)| !p.requires_grad()));
        teacher.update(student.params()).unwrap();
        teacher.update(student.params()).unwrap();
        assert_eq!(teacher.step(), 2);
        assert!(TeacherState::from_student(&student, 1.5).is_err());
    }

    #[test]
    fn entropy_examples() {
        let p = t(&[1, 2, 1, 3], &[0.5, 1.0, 0.9, 0.5, 0.0, 0.1]);
        let raw = pixel_uncertainty(&p, false).unwrap();
        assert!((raw.data()[0] - LN_2).abs() < 1e-15);
        assert_eq!(raw.data()[1], 0.0);
        assert!((raw.data()[2] - 0.325_082_973_391_448).abs() < 1e-12);
        let norm = pixel_uncertainty(&p, true).unwrap();
        assert!((norm.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        assert!(matches!(pixel_uncertainty(&t(&[1, 2, 1, 1], &[0.7, 0.7]), false), Err(PintError::Contract(_))));
        assert!(matches!(pixel_uncertainty(&t(&[1, 2, 1, 1], &[1.2, -0.2]), false), Err(PintError::Contract(_))));
    }

    #[test]
    fn image_uncertainty_examples() {
        let u = t(&[1, 2, 2], &[0.0, 0.0, LN_2, LN_2]);
        assert!((image_uncertainty(&u).unwrap().data()[0] - LN_2 / 2.0).abs() < 1e-15);
        let c = Tensor::full(&[2, 3, 3], 0.3);
        assert!(image_uncertainty(&c).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn hard_targets_are_one_hot_argmax() {
        let p = t(&[1, 2, 1, 2], &[0.7, 0.5, 0.3, 0.5]);
        let hard = pseudo_targets(&p, PseudoLabelMode::Hard).unwrap();
        assert_eq!(hard.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_pixel_loss_example() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2, 1, 1], &[0.0, 0.0]).requiring_grad());
        let pseudo = t(&[1, 2, 1, 1], &[0.5, 0.5]);
        let u = t(&[1, 1, 1], &[LN_2]);
        let loss = pixel_rectified_loss(&mut tape, logits, &[1], &pseudo, &u).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.5 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_uncertainty_is_plain_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2, 1, 2], &[0.3, -1.0, 2.0, 0.5]).requiring_grad());
        let pseudo = t(&[1, 2, 1, 2], &[0.2, 0.9, 0.8, 0.1]);
        let rect = pixel_rectified_loss(&mut tape, logits, &[0, 1], &pseudo, &Tensor::zeros(&[1, 1, 2])).unwrap();
        let img = image_rectified_loss(&mut tape, logits, &[0, 1], &pseudo, &Tensor::zeros(&[1])).unwrap();
        let ce = cross_entropy_loss(&mut tape, logits, &[0, 1]).unwrap();
        let ce = tape.value(ce).item().unwrap();
        assert_eq!(tape.value(rect).item().unwrap(), ce);
        assert!((tape.value(img).item().unwrap() - ce).abs() < 1e-15);
    }

    #[test]
    fn self_consistent_pseudo_labels_with_huge_uncertainty_vanish() {
        let logits_t = t(&[1, 2, 1, 2], &[0.3, -1.0, 2.0, 0.5]);
        let mut tape = Tape::new();
        let logits = tape.leaf(&logits_t);
        let soft = tape.softmax_channel(logits).unwrap();
        let pseudo = tape.value(soft).clone();
        let u = Tensor::full(&[1, 1, 2], 1e3);
        let loss = pixel_rectified_loss(&mut tape, logits, &[0, 1], &pseudo, &u).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let student = MiniSegNet::init(1, ModelConfig::default()).unwrap();
        let teacher = TeacherState::from_student(&student, 0.99).unwrap();
        let images = Tensor::full(&[1, 1, 8, 8], 0.5);
        let mut rng = SplitRng::new(2);
        let p = mc_pseudo_labels(teacher.net(), &images, &PerturbationSpec::default(), &mut rng).unwrap();
        let sums: Vec<f64> = (0..64).map(|i| p.data()[i] + p.data()[64 + i]).collect();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(!p.requires_grad());
    }

    #[test]
    fn loss_rejects_bad_labels_and_shapes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 2, 1, 1]));
        let pseudo = Tensor::full(&[1, 2, 1, 1], 0.5);
        let u = Tensor::zeros(&[1, 1, 1]);
        assert!(matches!(
            pixel_rectified_loss(&mut tape, logits, &[2], &pseudo, &u),
            Err(PintError::Contract(_))
        ));
        assert!(matches!(
            pixel_rectified_loss(&mut tape, logits, &[1], &Tensor::zeros(&[1, 3, 1, 1]), &u),
            Err(PintError::Shape(_))
        ));
    }
}
