//! Residual cross-attention that injects encoder features into a generator
//! feature map:
//!
//! `F_out = F_gen + α · BN(W_out * (softmax(Q Kᵀ / √d) V))`
//!
//! with Q projected from the generator map and K, V from the encoder map.

use rand::Rng;
use stainfuse_tensor::nn::{BatchNorm2d, Conv2d, Init};
use stainfuse_tensor::{Ctx, ParamStore, Scalar, Var};

use crate::error::{Error, Result};

/// Query rows materialized at once; bounds attention memory to
/// `chunk × N` per batch item.
pub const DEFAULT_ATTENTION_CHUNK: usize = 1024;

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub channels: usize,
    pub enc_channels: usize,
    pub dim: usize,
    pub alpha: f64,
    pub chunk: usize,
    pub q_proj: Conv2d,
    pub k_proj: Conv2d,
    pub v_proj: Conv2d,
    pub out_proj: Conv2d,
    pub bn: BatchNorm2d,
}

impl CrossAttention {
    /// `dim = 0` selects `dim = channels`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        enc_channels: usize,
        dim: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::Config(format!("fusion strength must be finite and >= 0, got {alpha}")));
        }
        let dim = if dim == 0 { channels } else { dim };
        let init = Init::Uniform { gain: 1.0 };
        let mut proj = |n: &str, cin: usize, cout: usize| {
            Conv2d::new(store, &format!("{name}.{n}"), cin, cout, 1, 1, 0, true, init, rng)
        };
        let q_proj = proj("q", channels, dim);
        let k_proj = proj("k", enc_channels, dim);
        let v_proj = proj("v", enc_channels, dim);
        let out_proj = proj("out", dim, channels);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), channels);
        Ok(Self {
            channels,
            enc_channels,
            dim,
            alpha,
            chunk: DEFAULT_ATTENTION_CHUNK,
            q_proj,
            k_proj,
            v_proj,
            out_proj,
            bn,
        })
    }

    /// The attended map before normalization and scaling,
    /// `W_out * (softmax(QKᵀ/√d) V)`, shape of `f_gen`.
    pub fn attended<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        f_gen: Var<'t, T>,
        f_enc: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (gs, es) = (f_gen.shape(), f_enc.shape());
        if gs.len() != 4 || gs[1] != self.channels {
            return Err(Error::shape("cross_attention f_gen", ["B", "C"], gs));
        }
        if es.len() != 4 || es[0] != gs[0] || es[2..] != gs[2..] || es[1] != self.enc_channels {
            return Err(Error::shape(
                "cross_attention f_enc",
                [gs[0], self.enc_channels, gs[2], gs[3]],
                es,
            ));
        }
        let (h, w) = (gs[2], gs[3]);
        let q = self.q_proj.forward(cx, f_gen)?.to_tokens()?;
        let k = self.k_proj.forward(cx, f_enc)?.to_tokens()?;
        let v = self.v_proj.forward(cx, f_enc)?.to_tokens()?;
        let scale = T::lit(1.0 / (self.dim as f64).sqrt());
        let a = q.attention(&k, &v, scale, self.chunk)?.from_tokens(h, w)?;
        Ok(self.out_proj.forward(cx, a)?)
    }

    pub fn fuse<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, f_gen: Var<'t, T>, f_enc: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.alpha == 0.0 {
            return Ok(f_gen);
        }
        let a = self.attended(cx, f_gen, f_enc)?;
        let n = self.bn.forward(cx, a)?;
        Ok(f_gen.add(&n.mul_scalar(T::lit(self.alpha)))?)
    }
}
