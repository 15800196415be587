//! Parameter storage, forward sessions and the conv/batchnorm building blocks.

mod params;

pub use params::{Init, Param, ParamBuilder, ParamGrads, ParamId, ParamKind, ParamStore};

use crate::error::Result;
use crate::tensor::{ConvSpec, Element, NormStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics, no state changes.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        NormSettings {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// One forward pass: a fresh tape plus the bindings of parameters onto it.
pub struct Session<'s, T> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    norm: NormSettings,
}

impl<'s, T: Element> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, norm: NormSettings) -> Self {
        let bound = vec![None; store.len()];
        Session {
            tape: Tape::new(),
            store,
            bound,
            mode,
            track_grads: true,
            norm,
        }
    }

    /// Forward pass whose parameters are constants (nothing to differentiate).
    pub fn inference(store: &'s mut ParamStore<T>, norm: NormSettings) -> Self {
        let mut s = Self::new(store, Mode::Eval, norm);
        s.track_grads = false;
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Tape variable bound to a parameter; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let v = self
            .tape
            .leaf(p.value.clone(), self.track_grads && p.kind.trainable());
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn batch_norm(&mut self, bn: &BatchNorm2d, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let eps = T::of(self.norm.eps);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormStats::Batch,
                    eps,
                )?;
                let stats = stats.expect("batch statistics in train mode");
                let m = T::of(self.norm.momentum);
                let one = T::one();
                let unbias = if stats.count > 1 {
                    T::of(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    one
                };
                let rm = self.store.value_mut(bn.running_mean).data_mut();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (one - m) * *r + m * b;
                }
                let rv = self.store.value_mut(bn.running_var).data_mut();
                for (r, &b) in rv.iter_mut().zip(&stats.var) {
                    *r = (one - m) * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.value(bn.running_mean).data().to_vec();
                let var = self.store.value(bn.running_var).data().to_vec();
                let (y, _) = self.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormStats::Running {
                        mean: &mean,
                        var: &var,
                    },
                    eps,
                )?;
                Ok(y)
            }
        }
    }

    /// Runs backward from `loss` and collects parameter gradients.
    pub fn backward(self, loss: Var) -> Result<ParamGrads<T>> {
        Ok(self.backward_with(loss, &[])?.0)
    }

    /// Like [`Session::backward`], additionally returning the gradients of
    /// the given non-parameter variables (e.g. leaves created with
    /// `tape.leaf(.., true)`).
    pub fn backward_with(self, loss: Var, extra: &[Var]) -> Result<(ParamGrads<T>, Vec<Option<Tensor<T>>>)> {
        let bound = self.bound;
        let mut grads = self.tape.backward(loss)?;
        let extra = extra.iter().map(|&v| grads.take(v)).collect();
        let grads = bound
            .into_iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect();
        Ok((ParamGrads { grads }, extra))
    }
}

/// Convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight = b.add("weight", &spec.weight_shape(), ParamKind::Weight, Init::HeNormal { fan_in })?;
        let bias = if bias {
            Some(b.add("bias", &[spec.out_channels], ParamKind::Bias, Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.spec)
    }
}

/// Transposed convolution (weights `[in, out, kh, kw]`) with optional bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl ConvTranspose2d {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        // Each output position receives in·kh·kw/(sh·sw) taps on average.
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1 / (spec.stride.0 * spec.stride.1)).max(1);
        let weight = b.add(
            "weight",
            &spec.transpose_weight_shape(),
            ParamKind::Weight,
            Init::HeNormal { fan_in },
        )?;
        let bias = if bias {
            Some(b.add("bias", &[spec.out_channels], ParamKind::Bias, Init::Zeros)?)
        } else {
            None
        };
        Ok(ConvTranspose2d { weight, bias, spec })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv_transpose2d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: b.add("gamma", &[channels], ParamKind::Gamma, Init::Ones)?,
            beta: b.add("beta", &[channels], ParamKind::Beta, Init::Zeros)?,
            running_mean: b.add("running_mean", &[channels], ParamKind::RunningMean, Init::Zeros)?,
            running_var: b.add("running_var", &[channels], ParamKind::RunningVar, Init::Ones)?,
        })
    }
}

/// Convolution → batch normalization → optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, spec: ConvSpec, relu: bool) -> Result<Self> {
        let conv = Conv2d::new(&mut b.scope("conv"), spec, false)?;
        let bn = BatchNorm2d::new(&mut b.scope("bn"), spec.out_channels)?;
        Ok(ConvBn { conv, bn, relu })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = s.batch_norm(&self.bn, y)?;
        if self.relu {
            s.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// Transposed convolution → batch normalization → ReLU.
#[derive(Debug, Clone)]
pub struct UpBn {
    pub up: ConvTranspose2d,
    pub bn: BatchNorm2d,
}

impl UpBn {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, spec: ConvSpec) -> Result<Self> {
        let up = ConvTranspose2d::new(&mut b.scope("up"), spec, false)?;
        let bn = BatchNorm2d::new(&mut b.scope("bn"), spec.out_channels)?;
        Ok(UpBn { up, bn })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.up.forward(s, x)?;
        let y = s.batch_norm(&self.bn, y)?;
        s.tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store, 0).scope("bn"), 1).unwrap();
        let mut s = Session::new(&mut store, Mode::Train, NormSettings::default());
        // values 1..4: mean 2.5, unbiased variance 5/3
        let x = s.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        s.batch_norm(&bn, x).unwrap();
        drop(s);
        let rm = store.value(bn.running_mean).item();
        let rv = store.value(bn.running_var).item();
        assert!((rm - 0.25).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_leaves_state_alone() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store, 0).scope("bn"), 2).unwrap();
        let before = store.checksum(&[""]);
        let mut s = Session::new(&mut store, Mode::Eval, NormSettings::default());
        let x = s.input(Tensor::ones(vec![1, 2, 2, 2]));
        let y = s.batch_norm(&bn, x).unwrap();
        // running mean 0, var 1: y = x / sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(s.value(y).data().iter().all(|&v| (v - expect).abs() < 1e-15));
        drop(s);
        assert_eq!(store.checksum(&[""]), before);
    }
}
