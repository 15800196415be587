//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward sweep. Node inputs always precede the node itself, so a single
//! reverse walk visits each node once in topological order.

use crate::error::{data_err, dim_err, Error, Result};

use super::conv::{self, Geometry};
use super::{ConvSpec, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
        cin: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannel {
        input: Var,
        scales: Var,
        per_sample: bool,
    },
    MulPixel {
        input: Var,
        gate: Var,
        per_sample: bool,
    },
    GlobalAvgPool(Var),
    BroadcastSpatial(Var),
    Concat(Vec<Var>),
    Sum(Var),
    DotConst(Var, Vec<T>),
    /// Loss ops keep d(loss)/d(input) from the forward pass.
    LossGrad(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values each statistic was computed over (`N·H·W`).
    pub count: usize,
}

/// Normalization statistics source for [`Tape::batch_norm`].
pub enum NormStats<'a, T> {
    /// Normalize with the batch statistics (training).
    Batch,
    /// Normalize with fixed running statistics (inference).
    Running { mean: &'a [T], var: &'a [T] },
}

/// Operation record for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf value. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .map_err(|_| dim_err!("{what}: expected NCHW input, got {:?}", self.shape(v)))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "conv2d")?;
        if c != spec.in_channels {
            return Err(dim_err!(
                "conv2d: input has {c} channels, spec expects {}",
                spec.in_channels
            ));
        }
        spec.check_weights(self.shape(weight), false)?;
        if let Some(b) = bias {
            if self.shape(b) != [spec.out_channels] {
                return Err(dim_err!("conv2d: bias shape {:?}", self.shape(b)));
            }
        }
        let (oh, ow) = spec.output_size(h, w)?;
        let geom = Geometry { channels: c, h, w, oh, ow, spec };
        let out = conv::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, spec.out_channels, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { input, weight, bias, geom }, &inputs)
    }

    /// Transposed convolution with weights laid out `[in, out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "conv_transpose2d")?;
        if c != spec.in_channels {
            return Err(dim_err!(
                "conv_transpose2d: input has {c} channels, spec expects {}",
                spec.in_channels
            ));
        }
        spec.check_weights(self.shape(weight), true)?;
        if let Some(b) = bias {
            if self.shape(b) != [spec.out_channels] {
                return Err(dim_err!("conv_transpose2d: bias shape {:?}", self.shape(b)));
            }
        }
        let (oh, ow) = spec.transpose_output_size(h, w)?;
        // The adjoint convolution maps the oh×ow output back onto h×w.
        let geom = Geometry {
            channels: spec.out_channels,
            h: oh,
            w: ow,
            oh: h,
            ow: w,
            spec,
        };
        let out = conv::conv_transpose2d_forward(
            self.value(input).data(),
            n,
            &geom,
            c,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, spec.out_channels, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv_transpose2d",
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                cin: c,
            },
            &inputs,
        )
    }

    /// Batch normalization over N, H, W per channel. Returns the batch
    /// statistics when normalizing with them, so callers can update running
    /// averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.dims4(input, "batch_norm")?;
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(p) != [c] {
                return Err(dim_err!(
                    "batch_norm: {name} shape {:?} for {c} channels",
                    self.shape(p)
                ));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let x = self.value(input).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        s += x[off..off + hw].iter().copied().sum();
                    }
                    let m = s / T::of(count as f64);
                    let mut v = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        v += x[off..off + hw].iter().map(|&e| (e - m) * (e - m)).sum();
                    }
                    mean[ch] = m;
                    var[ch] = v / T::of(count as f64);
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!(
                        "batch_norm: running statistics have {} channels, input {c}",
                        mean.len()
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let var_out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: batch,
            },
            &[input, gamma, beta],
        )?;
        let stats = batch.then_some(BatchStats { mean, var, count });
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Sums any number of equally shaped values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| dim_err!("add_all: no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Scales each channel of an NCHW tensor. `scales` is `N×C×1×1`
    /// (per-sample) or `C` / `1×C×1×1` (shared across the batch).
    pub fn mul_channelwise(&mut self, input: Var, scales: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "mul_channelwise")?;
        let per_sample = match *self.shape(scales) {
            [sn, sc, 1, 1] if sn == n && sc == c => true,
            [1, sc, 1, 1] | [sc] if sc == c => false,
            _ => {
                return Err(dim_err!(
                    "mul_channelwise: scales {:?} do not broadcast over channels of {:?}",
                    self.shape(scales),
                    self.shape(input)
                ))
            }
        };
        let hw = h * w;
        let s = self.value(scales).data();
        let mut out = self.value(input).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let k = s[if per_sample { b * c + ch } else { ch }];
                let off = (b * c + ch) * hw;
                out[off..off + hw].iter_mut().for_each(|v| *v *= k);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            "mul_channelwise",
            value,
            Op::MulChannel {
                input,
                scales,
                per_sample,
            },
            &[input, scales],
        )
    }

    /// Scales each spatial location of an NCHW tensor by a gate shared
    /// across channels: `N×1×H×W` (per-sample) or `1×1×H×W`.
    pub fn mul_pixelwise(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "mul_pixelwise")?;
        let per_sample = match *self.shape(gate) {
            [gn, 1, gh, gw] if gh == h && gw == w && gn == n => true,
            [1, 1, gh, gw] if gh == h && gw == w => false,
            _ => {
                return Err(dim_err!(
                    "mul_pixelwise: gate {:?} does not broadcast over channels of {:?}",
                    self.shape(gate),
                    self.shape(input)
                ))
            }
        };
        let hw = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(input).data().to_vec();
        for b in 0..n {
            let goff = if per_sample { b * hw } else { 0 };
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    out[off + i] *= g[goff + i];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            "mul_pixelwise",
            value,
            Op::MulPixel {
                input,
                gate,
                per_sample,
            },
            &[input, gate],
        )
    }

    /// Mean over the spatial extent: `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "global_avg_pool")?;
        let hw = h * w;
        let data = self.value(x).data();
        let out = (0..n * c)
            .map(|i| data[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / T::of(hw as f64))
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Repeats an `N×C×1×1` tensor over an `h×w` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, xh, xw) = self.dims4(x, "broadcast_spatial")?;
        if (xh, xw) != (1, 1) {
            return Err(dim_err!("broadcast_spatial: input must be N×C×1×1, got {:?}", self.shape(x)));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in data {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push("broadcast_spatial", value, Op::BroadcastSpatial(x), &[x])
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat_channels: no inputs"))?;
        let (n, _, h, w) = self.dims4(first, "concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.dims4(p, "concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(dim_err!(
                    "concat_channels: {:?} does not match {:?} outside the channel axis",
                    self.shape(p),
                    self.shape(first)
                ));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        self.push("concat_channels", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// `Σ x_i·w_i` against a constant weight tensor of the same size.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(dim_err!(
                "dot_const: {:?} against {:?}",
                self.shape(x),
                weights.shape()
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(
            "dot_const",
            Tensor::scalar(s),
            Op::DotConst(x, weights.data().to_vec()),
            &[x],
        )
    }

    /// Class-weighted softmax cross-entropy over an `N×C×H×W` logit map,
    /// averaged over pixels whose label is not `ignore_index`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[i32],
        class_weights: &[T],
        ignore_index: i32,
    ) -> Result<Var> {
        let (n, c, h, w) = self.dims4(logits, "softmax_cross_entropy")?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(dim_err!(
                "softmax_cross_entropy: {} labels for logits {:?}",
                labels.len(),
                self.shape(logits)
            ));
        }
        if class_weights.len() != c {
            return Err(dim_err!(
                "softmax_cross_entropy: {} class weights for {c} classes",
                class_weights.len()
            ));
        }
        let z = self.value(logits).data();
        let mut grad = vec![T::zero(); z.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut probs = vec![T::zero(); c];
        for b in 0..n {
            for p in 0..hw {
                let label = labels[b * hw + p];
                if label == ignore_index {
                    continue;
                }
                if label < 0 || label as usize >= c {
                    return Err(data_err!(
                        "label {label} outside [0, {c}) and not the ignore index {ignore_index}"
                    ));
                }
                let at = |k: usize| (b * c + k) * hw + p;
                let m = (0..c).map(|k| z[at(k)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for (k, pk) in probs.iter_mut().enumerate() {
                    *pk = (z[at(k)] - m).exp();
                    denom += *pk;
                }
                let y = label as usize;
                let alpha = class_weights[y];
                let nll = m + denom.ln() - z[at(y)];
                total += (alpha * nll).as_f64();
                for (k, pk) in probs.iter().enumerate() {
                    let onehot = if k == y { T::one() } else { T::zero() };
                    grad[at(k)] = alpha * (*pk / denom - onehot);
                }
                count += 1;
            }
        }
        let loss = if count > 0 {
            let inv = T::of(1.0 / count as f64);
            grad.iter_mut().for_each(|g| *g *= inv);
            T::of(total / count as f64)
        } else {
            T::zero()
        };
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::LossGrad(logits, grad),
            &[logits],
        )
    }

    /// Reverse Huber loss of `pred` against a constant `target`, averaged
    /// over `valid` entries. The threshold is a fifth of the largest valid
    /// residual and is held constant in the backward pass. Returns the loss
    /// and the threshold that was used.
    pub fn berhu(&mut self, pred: Var, target: &[T], valid: &[bool]) -> Result<(Var, T)> {
        let p = self.value(pred).data();
        if target.len() != p.len() || valid.len() != p.len() {
            return Err(dim_err!(
                "berhu: prediction has {} values, target {}, mask {}",
                p.len(),
                target.len(),
                valid.len()
            ));
        }
        let count = valid.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(data_err!("berhu: no valid pixels"));
        }
        let beta = berhu_threshold(p, target, valid);
        let inv = T::of(1.0 / count as f64);
        let mut total = 0.0f64;
        let mut grad = vec![T::zero(); p.len()];
        for i in 0..p.len() {
            if !valid[i] {
                continue;
            }
            let d = p[i] - target[i];
            let r = d.abs();
            let (value, slope) = if r <= beta {
                (r, sign(d))
            } else {
                ((r * r + beta * beta) / (beta + beta), d / beta)
            };
            total += value.as_f64();
            grad[i] = slope * inv;
        }
        let loss = self.push(
            "berhu",
            Tensor::scalar(T::of(total / count as f64)),
            Op::LossGrad(pred, grad),
            &[pred],
        )?;
        Ok((loss, beta))
    }

    /// Runs the backward sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += *d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let n = self.shape(*input)[0];
                let mut gw = self.wants(*weight).then(|| vec![T::zero(); self.value(*weight).len()]);
                let mut gb = bias
                    .filter(|b| self.wants(*b))
                    .map(|b| vec![T::zero(); self.value(b).len()]);
                let gi = conv::conv2d_backward(
                    self.value(*input).data(),
                    n,
                    geom,
                    self.value(*weight).data(),
                    g,
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    self.wants(*input),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gw) = gw {
                    acc(*weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    acc(*b, gb);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                cin,
            } => {
                let n = self.shape(*input)[0];
                let mut gw = self.wants(*weight).then(|| vec![T::zero(); self.value(*weight).len()]);
                let mut gb = bias
                    .filter(|b| self.wants(*b))
                    .map(|b| vec![T::zero(); self.value(b).len()]);
                let gi = conv::conv_transpose2d_backward(
                    self.value(*input).data(),
                    n,
                    geom,
                    *cin,
                    self.value(*weight).data(),
                    g,
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    self.wants(*input),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gw) = gw {
                    acc(*weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    acc(*b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = self.shape(*input)[..] else {
                    unreachable!("batch_norm input is NCHW")
                };
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let scale = gamma_v[ch] * inv_std[ch];
                        // Σ dxhat and Σ dxhat·xhat, with dxhat = γ·dy.
                        let (sum_d, sum_dx) = (dbeta[ch] * gamma_v[ch], dgamma[ch] * gamma_v[ch]);
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = if *batch_stats {
                                    inv_std[ch] / m
                                        * (m * gamma_v[ch] * g[i] - sum_d - xhat[i] * sum_dx)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect());
                acc(*b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|&v| v * *f).collect()),
            Op::MulChannel {
                input,
                scales,
                per_sample,
            } => {
                let [n, c, h, w] = self.shape(*input)[..] else {
                    unreachable!()
                };
                let hw = h * w;
                let s = self.value(*scales).data();
                let x = self.value(*input).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut ds = vec![T::zero(); s.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let si = if *per_sample { b * c + ch } else { ch };
                        let off = (b * c + ch) * hw;
                        let mut dot = T::zero();
                        for i in off..off + hw {
                            dx[i] = g[i] * s[si];
                            dot += g[i] * x[i];
                        }
                        ds[si] += dot;
                    }
                }
                acc(*input, dx);
                acc(*scales, ds);
            }
            Op::MulPixel {
                input,
                gate,
                per_sample,
            } => {
                let [n, c, h, w] = self.shape(*input)[..] else {
                    unreachable!()
                };
                let hw = h * w;
                let gv = self.value(*gate).data();
                let x = self.value(*input).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for b in 0..n {
                    let goff = if *per_sample { b * hw } else { 0 };
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in 0..hw {
                            dx[off + i] = g[off + i] * gv[goff + i];
                            dg[goff + i] += g[off + i] * x[off + i];
                        }
                    }
                }
                acc(*input, dx);
                acc(*gate, dg);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.shape(*x)[..] else {
                    unreachable!()
                };
                let hw = h * w;
                let inv = T::of(1.0 / hw as f64);
                let d = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi * inv, hw))
                    .collect();
                acc(*x, d);
            }
            Op::BroadcastSpatial(x) => {
                let hw = node.value.shape()[2] * node.value.shape()[3];
                acc(*x, g.chunks(hw).map(|ch| ch.iter().copied().sum()).collect());
            }
            Op::Concat(parts) => {
                let [n, total, h, w] = node.value.shape()[..] else {
                    unreachable!()
                };
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        acc(p, d);
                    }
                    offset += pc;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                acc(*x, vec![g[0]; len]);
            }
            Op::DotConst(x, w) => acc(*x, w.iter().map(|&wi| wi * g[0]).collect()),
            Op::LossGrad(x, d) => acc(*x, d.iter().map(|&di| di * g[0]).collect()),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// One fifth of the largest valid absolute residual.
pub(crate) fn berhu_threshold<T: Element>(pred: &[T], target: &[T], valid: &[bool]) -> T {
    let max = pred
        .iter()
        .zip(target)
        .zip(valid)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p - t).abs())
        .fold(T::zero(), T::max);
    max / T::of(5.0)
}
