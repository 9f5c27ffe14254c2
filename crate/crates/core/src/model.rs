//! Small 2-D encoder-decoder segmentation network with two Monte-Carlo
//! dropout sites.
//!
//! For widths `[w1, .., wL]` the network has `L` encoder stages (two 3x3
//! conv + ReLU each, separated by 2x2 max pooling), `L-1` decoder stages
//! (nearest 2x upsample, skip concatenation, two 3x3 conv + ReLU) and a 1x1
//! classification head. Dropout follows the deepest encoder stage and the
//! last decoder stage.
//!
//! Parameters are named `stage.index.kind`, e.g. `enc2.1.weight`,
//! `dec1.0.bias`, `head.0.weight`.

use rand_distr::{Distribution, Normal};

use crate::error::{PintError, Result};
use crate::rng::SplitRng;
use crate::tensor::{Gradients, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            num_classes: 2,
            dropout_rate: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(PintError::Parameter(format!("invalid widths {:?}", self.widths)));
        }
        if self.num_classes < 2 {
            return Err(PintError::Parameter(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PintError::Parameter(format!(
                "dropout rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// `(name, shape)` for every parameter, in canonical order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = &self.widths;
        let mut out = Vec::new();
        let mut conv = |stage: &str, idx: usize, cin: usize, cout: usize, k: usize| {
            out.push((format!("{stage}.{idx}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{stage}.{idx}.bias"), vec![cout]));
        };
        let mut cin = 1;
        for (i, &width) in w.iter().enumerate() {
            let stage = format!("enc{}", i + 1);
            conv(&stage, 0, cin, width, 3);
            conv(&stage, 1, width, width, 3);
            cin = width;
        }
        for i in (0..w.len() - 1).rev() {
            let stage = format!("dec{}", i + 1);
            conv(&stage, 0, w[i + 1] + w[i], w[i], 3);
            conv(&stage, 1, w[i], w[i], 3);
        }
        conv("head", 0, w[0], self.num_classes, 1);
        out
    }
}

/// Student or teacher network: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniSegNet {
    config: ModelConfig,
    params: ParamSet,
}

/// Recorded parameter handles of one forward pass, in parameter order.
#[derive(Debug)]
pub struct ParamVars(Vec<Var>);

impl MiniSegNet {
    /// He-normal kernels (variance `2/fan_in`) and zero biases.
    pub fn init(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitRng::new(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; numel]
            };
            params.insert(name, Tensor::new(shape, data)?.requiring_grad())?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a network from checkpointed parameters, inferring widths and
    /// class count from the tensor shapes.
    pub fn from_params(mut params: ParamSet, dropout_rate: f64) -> Result<Self> {
        let mut widths = Vec::new();
        while let Some(t) = params.get(&format!("enc{}.0.weight", widths.len() + 1)) {
            widths.push(t.shape()[0]);
        }
        let num_classes = params
            .get("head.0.weight")
            .map(|t| t.shape()[0])
            .ok_or_else(|| PintError::Format("checkpoint has no head.0.weight".into()))?;
        let config = ModelConfig {
            widths,
            num_classes,
            dropout_rate,
        };
        config.validate()?;
        let mut template = ParamSet::new();
        for (name, shape) in config.layout() {
            template.insert(name, Tensor::zeros(&shape))?;
        }
        template
            .check_aligned(&params)
            .map_err(|e| PintError::Format(format!("checkpoint does not describe a network: {e}")))?;
        for (_, t) in params.iter_mut() {
            t.set_requires_grad(true);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Records a forward pass of `input` (`[B,1,H,W]`) on `tape`. With
    /// `track_grad` the parameters are trainable leaves whose handles are
    /// returned for [`accumulate_grads`](Self::accumulate_grads).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        input: Var,
        train: bool,
        track_grad: bool,
        rng: &mut SplitRng,
    ) -> Result<(Var, ParamVars)> {
        let shape = tape.value(input).shape().to_vec();
        let m = self.config.spatial_multiple();
        match shape[..] {
            [_, 1, h, w] if h % m == 0 && w % m == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(PintError::Shape(format!(
                    "network input must be [B,1,H,W] with H,W divisible by {m}, got {shape:?}"
                )))
            }
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| if track_grad { tape.leaf(t) } else { tape.constant(t.clone()) })
            .collect();
        let mut next = vars.iter().copied();
        let mut conv = |tape: &mut Tape, x: Var, pad: usize, relu: bool| -> Result<Var> {
            let w = next.next().expect("layout/param count agree");
            let b = next.next().expect("layout/param count agree");
            let y = tape.conv2d(x, w, Some(b), 1, pad)?;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };

        let levels = self.config.widths.len();
        let rate = self.config.dropout_rate;
        let mut skips = Vec::with_capacity(levels);
        let mut x = input;
        for level in 0..levels {
            if level > 0 {
                x = tape.max_pool2d(x, 2)?;
            }
            x = conv(tape, x, 1, true)?;
            x = conv(tape, x, 1, true)?;
            skips.push(x);
        }
        x = tape.dropout(x, rate, train, rng)?;
        for level in (0..levels - 1).rev() {
            let up = tape.upsample_nearest(x, 2)?;
            let cat = tape.concat_channels(up, skips[level])?;
            x = conv(tape, cat, 1, true)?;
            x = conv(tape, x, 1, true)?;
        }
        x = tape.dropout(x, rate, train, rng)?;
        let logits = conv(tape, x, 0, false)?;
        Ok((logits, ParamVars(vars)))
    }

    /// Logits for `input` without recording gradients.
    pub fn forward(&self, input: &Tensor, train: bool, rng: &mut SplitRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (logits, _) = self.forward_on(&mut tape, x, train, false, rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Adds the gradients of a backward pass into each parameter's buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &ParamVars) -> Result<()> {
        for ((_, t), &v) in self.params.iter_mut().zip(&vars.0) {
            let g = grads.get_or_zeros(v, t.numel());
            t.accumulate_grad(&g)?;
        }
        Ok(())
    }
}
