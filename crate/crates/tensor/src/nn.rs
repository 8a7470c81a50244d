//! Parameterized layers. Each layer only holds ids into a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::params::{BufferId, Ctx, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, std²).
    Normal(f64),
    /// U(−b, b) with `b = gain·√(3 / fan_in)`.
    Uniform { gain: f64 },
    Zeros,
}

impl Init {
    fn sample<T: Scalar, R: Rng + ?Sized>(&self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match *self {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Uniform { gain } => {
                let b = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -b, b, rng)
            }
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = init.sample(&shape, in_channels * kernel * kernel, rng);
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init.sample(&[out_features, in_features], in_features, rng);
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_features])));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        x.linear(&w, b.as_ref())
    }
}

/// Batch normalization over (batch, height, width) with running estimates
/// used in eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        let eps = T::lit(self.eps);
        if cx.is_train() {
            let (y, stats) = x.batch_norm_train(&g, &b, eps)?;
            let mom = T::lit(self.momentum);
            let keep = T::one() - mom;
            let rm = cx.store.buffer(self.running_mean);
            let rv = cx.store.buffer(self.running_var);
            let rm = rm.zip_map(&Tensor::from_vec(&[self.channels], stats.mean)?, |r, s| keep * r + mom * s)?;
            let rv = rv.zip_map(&Tensor::from_vec(&[self.channels], stats.var_unbiased)?, |r, s| keep * r + mom * s)?;
            cx.store.set_buffer(self.running_mean, rm);
            cx.store.set_buffer(self.running_var, rv);
            Ok(y)
        } else {
            let rm = cx.store.buffer(self.running_mean);
            let rv = cx.store.buffer(self.running_var);
            x.batch_norm_eval(&g, &b, rm.data(), rv.data(), eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Mode;
    use crate::tape::Tape;

    #[test]
    fn batch_norm_updates_running_stats_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let x = Tensor::randn(&[2, 2, 3, 3], 2.0, &mut rng).map(|v| v + 1.0);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, Mode::Eval);
        bn.forward(&cx, tape.constant(x.clone())).unwrap();
        assert_eq!(store.buffer(bn.running_mean).data(), &[0.0, 0.0]);
        let cx = Ctx::new(&tape, &store, Mode::Train);
        bn.forward(&cx, tape.constant(x)).unwrap();
        assert!(store.buffer(bn.running_mean).data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn frozen_store_yields_no_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, Init::Normal(0.1), &mut rng);
        store.freeze();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.leaf(Tensor::ones(&[1, 3]));
        let y = lin.forward(&cx, x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param_count(), 0);
        assert!(g.wrt(x).is_some());
    }
}
