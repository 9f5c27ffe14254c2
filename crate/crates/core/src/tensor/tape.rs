//! Reverse-mode tape. Values are recorded in creation order, so the node list
//! is already topologically sorted and backward is a single reverse sweep.

use rand::Rng;

use super::conv::{col2im, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{PintError, Result};
use crate::rng::SplitRng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    SoftmaxChannel(Var),
    LogSoftmaxChannel(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddConst(Var),
    MulConst {
        input: Var,
        factor: Vec<f64>,
    },
    Square(Var),
    ConcatChannels(Var, Var),
    SumChannels(Var),
    GatherChannel {
        input: Var,
        labels: Vec<u8>,
    },
    MeanTrailing(Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable does not require grad or is unreachable from
    /// the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zeros for unreachable trainable leaves.
    pub fn get_or_zeros(&self, var: Var, numel: usize) -> Vec<f64> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; numel])
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(PintError::Shape(format!(
            "{what} expects a rank-4 [B,C,H,W] tensor, got {s:?}"
        ))),
    }
}

fn finite(op: &str, data: &[f64]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(PintError::Numeric(format!(
            "{op} produced non-finite value {} at flat index {pos}",
            data[pos]
        )));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a copy of `tensor`; it participates in gradients iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor.detached(), requires_grad, Op::Leaf)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, requires_grad, op))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(PintError::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// 2-D cross-correlation with zero padding. `weight` is `[Cout,Cin,k,k]`,
    /// `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (b, cin, h, w) = dims4(self.value(input), "conv2d input")?;
        let (cout, wcin, kh, kw) = dims4(self.value(weight), "conv2d weight")?;
        if wcin != cin || kh != kw {
            return Err(PintError::Shape(format!(
                "conv2d weight {:?} incompatible with input channels {cin}",
                self.value(weight).shape()
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(PintError::Shape(format!(
                    "conv2d bias shape {:?}, expected [{cout}]",
                    self.value(bv).shape()
                )));
            }
        }
        let geom = ConvGeom::new(cin, h, w, kh, stride, padding).ok_or_else(|| {
            PintError::Shape(format!(
                "conv2d kernel {kh} stride {stride} padding {padding} does not fit {h}x{w}"
            ))
        })?;
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let wdata = self.value(weight).data();
        let mut out = vec![0.0; b * cout * plane];
        let mut cols = vec![0.0; rows * plane];
        for n in 0..b {
            im2col(&x[n * cin * h * w..(n + 1) * cin * h * w], &geom, &mut cols);
            let dst = &mut out[n * cout * plane..(n + 1) * cout * plane];
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bd[co]);
                }
            }
            gemm(cout, rows, plane, wdata, false, &cols, false, 1.0, dst);
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            "conv2d",
            vec![b, cout, geom.ho, geom.wo],
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(input), "upsample")?;
        if factor == 0 {
            return Err(PintError::Shape("upsample factor must be >= 1".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for oy in 0..ho {
                let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
                let drow = &mut dst[oy * wo..(oy + 1) * wo];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / factor];
                }
            }
        }
        self.record("upsample", vec![b, c, ho, wo], out, &[input], Op::Upsample { input, factor })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        self.record("relu", t.shape().to_vec(), out, &[input], Op::Relu(input))
    }

    /// Non-overlapping max pooling with a square window of side `k`.
    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(input), "max_pool2d")?;
        if k == 0 || h < k || w < k {
            return Err(PintError::Shape(format!("max_pool2d window {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = p * h * w + (oy * k + dy) * w + ox * k + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.record("max_pool2d", vec![b, c, ho, wo], out, &[input], Op::MaxPool { input, argmax })
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`. Identity otherwise.
    pub fn dropout(&mut self, input: Var, rate: f64, train: bool, rng: &mut SplitRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PintError::Parameter(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let t = self.value(input);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.record("dropout", shape, out, &[input], Op::Dropout { input, mask })
    }

    /// Softmax across the channel axis of a `[B,C,H,W]` tensor.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let (b, c, h, w) = dims4(t, "softmax_channel")?;
        let out = softmax_channel_data(t.data(), b, c, h * w);
        self.record("softmax_channel", t.shape().to_vec(), out, &[input], Op::SoftmaxChannel(input))
    }

    pub fn log_softmax_channel(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let (b, c, h, w) = dims4(t, "log_softmax_channel")?;
        let plane = h * w;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for n in 0..b {
            let base = n * c * plane;
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(x[base + ch * plane + p]);
                }
                let mut s = 0.0;
                for ch in 0..c {
                    s += (x[base + ch * plane + p] - m).exp();
                }
                let lse = m + s.ln();
                for ch in 0..c {
                    out[base + ch * plane + p] = x[base + ch * plane + p] - lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.record("log_softmax_channel", shape, out, &[input], Op::LogSoftmaxChannel(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        self.record("add", shape, out, &[a, b], Op::Add(a, b))
    }

    /// Elementwise product of two recorded values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        self.record("mul", shape, out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|v| v * factor).collect();
        self.record("scale", t.shape().to_vec(), out, &[input], Op::Scale(input, factor))
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|v| v + offset).collect();
        self.record("add_scalar", t.shape().to_vec(), out, &[input], Op::AddScalar(input))
    }

    /// Adds a constant (non-differentiated) tensor of identical shape.
    pub fn add_const(&mut self, input: Var, offset: &Tensor) -> Result<Var> {
        let t = self.value(input);
        if t.shape() != offset.shape() {
            return Err(PintError::Shape(format!(
                "add_const: shapes {:?} and {:?} differ",
                t.shape(),
                offset.shape()
            )));
        }
        let out = t.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect();
        self.record("add_const", t.shape().to_vec(), out, &[input], Op::AddConst(input))
    }

    /// Multiplies elementwise by a constant tensor of identical shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor) -> Result<Var> {
        let t = self.value(input);
        if t.shape() != factor.shape() {
            return Err(PintError::Shape(format!(
                "mul_const: shapes {:?} and {:?} differ",
                t.shape(),
                factor.shape()
            )));
        }
        let out = t.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let shape = t.shape().to_vec();
        self.record(
            "mul_const",
            shape,
            out,
            &[input],
            Op::MulConst {
                input,
                factor: factor.data().to_vec(),
            },
        )
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|v| v * v).collect();
        self.record("square", t.shape().to_vec(), out, &[input], Op::Square(input))
    }

    /// Concatenates `[B,C1,H,W]` and `[B,C2,H,W]` into `[B,C1+C2,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = dims4(self.value(a), "concat_channels")?;
        let (nb, cb, hb, wb) = dims4(self.value(b), "concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(PintError::Shape(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&xa[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&xb[n * cb * plane..(n + 1) * cb * plane]);
        }
        self.record("concat_channels", vec![na, ca + cb, ha, wa], out, &[a, b], Op::ConcatChannels(a, b))
    }

    /// Sums `[B,C,H,W]` over channels into `[B,H,W]`.
    pub fn sum_channels(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(input), "sum_channels")?;
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; b * plane];
        for n in 0..b {
            for ch in 0..c {
                let src = &x[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                out[n * plane..(n + 1) * plane].iter_mut().zip(src).for_each(|(o, s)| *o += s);
            }
        }
        self.record("sum_channels", vec![b, h, w], out, &[input], Op::SumChannels(input))
    }

    /// Picks channel `labels[b,y,x]` at every pixel: `[B,C,H,W] -> [B,H,W]`.
    pub fn gather_channel(&mut self, input: Var, labels: &[u8]) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(input), "gather_channel")?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(PintError::Shape(format!(
                "gather_channel: {} labels for {b}x{h}x{w} pixels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(PintError::Contract(format!("label id {bad} >= class count {c}")));
        }
        let x = self.value(input).data();
        let out = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (n, p) = (i / plane, i % plane);
                x[(n * c + l as usize) * plane + p]
            })
            .collect();
        self.record(
            "gather_channel",
            vec![b, h, w],
            out,
            &[input],
            Op::GatherChannel {
                input,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over every axis but the first: `[B,...] -> [B]`.
    pub fn mean_trailing(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let b = *t.shape().first().ok_or_else(|| PintError::Shape("mean_trailing on a scalar".into()))?;
        if b == 0 || t.numel() == 0 {
            return Err(PintError::Shape("mean_trailing on an empty tensor".into()));
        }
        let per = t.numel() / b;
        let out = t.data().chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
        self.record("mean_trailing", vec![b], out, &[input], Op::MeanTrailing(input))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(PintError::Shape("mean of an empty tensor".into()));
        }
        let out = vec![t.data().iter().sum::<f64>() / t.numel() as f64];
        self.record("mean", vec![], out, &[input], Op::Mean(input))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = vec![self.value(input).data().iter().sum::<f64>()];
        self.record("sum", vec![], out, &[input], Op::Sum(input))
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(PintError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(PintError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only trainable leaves are reported.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (b, cin, h, w) = dims4(self.value(*input), "conv2d").unwrap();
                let cout = self.value(*weight).shape()[0];
                let (rows, plane) = (geom.col_rows(), geom.col_cols());
                let x = self.value(*input).data();
                let wdata = self.value(*weight).data();
                let mut dw = vec![0.0; cout * rows];
                let mut dx = vec![0.0; x.len()];
                let mut cols = vec![0.0; rows * plane];
                let mut dcols = vec![0.0; rows * plane];
                for n in 0..b {
                    let gout = &g[n * cout * plane..(n + 1) * cout * plane];
                    if self.wants(*weight) {
                        im2col(&x[n * cin * h * w..(n + 1) * cin * h * w], geom, &mut cols);
                        gemm(cout, plane, rows, gout, false, &cols, true, 1.0, &mut dw);
                    }
                    if self.wants(*input) {
                        gemm(rows, cout, plane, wdata, true, gout, false, 0.0, &mut dcols);
                        col2im(&dcols, geom, &mut dx[n * cin * h * w..(n + 1) * cin * h * w]);
                    }
                }
                if self.wants(*weight) {
                    add_into(&mut grads[weight.0], &dw);
                }
                if self.wants(*input) {
                    add_into(&mut grads[input.0], &dx);
                }
                if let Some(bv) = bias.filter(|bv| self.wants(*bv)) {
                    let mut db = vec![0.0; cout];
                    for n in 0..b {
                        for (co, d) in db.iter_mut().enumerate() {
                            let base = (n * cout + co) * plane;
                            *d += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    add_into(&mut grads[bv.0], &db);
                }
            }
            Op::Upsample { input, factor } => {
                let (b, c, h, w) = dims4(self.value(*input), "upsample").unwrap();
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[p * h * w + (oy / factor) * w + ox / factor] += g[p * ho * wo + oy * wo + ox];
                        }
                    }
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx: Vec<f64> = x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                add_into(&mut grads[input.0], &dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::Dropout { input, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                add_into(&mut grads[input.0], &dx);
            }
            Op::SoftmaxChannel(input) => {
                let (b, c, h, w) = dims4(&node.value, "softmax_channel").unwrap();
                let plane = h * w;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for n in 0..b {
                    let base = n * c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..c).map(|ch| g[base + ch * plane + p] * y[base + ch * plane + p]).sum();
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::LogSoftmaxChannel(input) => {
                let (b, c, h, w) = dims4(&node.value, "log_softmax_channel").unwrap();
                let plane = h * w;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for n in 0..b {
                    let base = n * c * plane;
                    for p in 0..plane {
                        let gsum: f64 = (0..c).map(|ch| g[base + ch * plane + p]).sum();
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            dx[i] = g[i] - y[i].exp() * gsum;
                        }
                    }
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(xb).map(|(u, v)| u * v).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(xa).map(|(u, v)| u * v).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Scale(input, factor) => {
                let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
                add_into(&mut grads[input.0], &d);
            }
            Op::AddScalar(input) | Op::AddConst(input) => add_into(&mut grads[input.0], g),
            Op::MulConst { input, factor } => {
                let d: Vec<f64> = g.iter().zip(factor).map(|(u, v)| u * v).collect();
                add_into(&mut grads[input.0], &d);
            }
            Op::Square(input) => {
                let x = self.value(*input).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(u, v)| 2.0 * u * v).collect();
                add_into(&mut grads[input.0], &d);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = dims4(self.value(*a), "concat").unwrap();
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g[base..base + ca * plane]);
                    db.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                if self.wants(*a) {
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::SumChannels(input) => {
                let (b, c, h, w) = dims4(self.value(*input), "sum_channels").unwrap();
                let plane = h * w;
                let mut dx = vec![0.0; b * c * plane];
                for n in 0..b {
                    for ch in 0..c {
                        dx[(n * c + ch) * plane..(n * c + ch + 1) * plane].copy_from_slice(&g[n * plane..(n + 1) * plane]);
                    }
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::GatherChannel { input, labels } => {
                let (_, c, h, w) = dims4(self.value(*input), "gather_channel").unwrap();
                let plane = h * w;
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (i, &l) in labels.iter().enumerate() {
                    let (n, p) = (i / plane, i % plane);
                    dx[(n * c + l as usize) * plane + p] += g[i];
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::MeanTrailing(input) => {
                let t = self.value(*input);
                let per = t.numel() / g.len();
                let dx: Vec<f64> = (0..t.numel()).map(|i| g[i / per] / per as f64).collect();
                add_into(&mut grads[input.0], &dx);
            }
            Op::Mean(input) => {
                let n = self.value(*input).numel();
                add_into(&mut grads[input.0], &vec![g[0] / n as f64; n]);
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                add_into(&mut grads[input.0], &vec![g[0]; n]);
            }
        }
    }
}

/// Channel softmax on raw `[B,C,plane]` data.
pub(crate) fn softmax_channel_data(x: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * plane + p]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= s;
            }
        }
    }
    out
}
