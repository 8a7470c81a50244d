//! Conditional patch discriminator scoring (H&E, IHC) pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::nn::{Conv2d, Init};
use stainfuse_tensor::{Ctx, ParamStore, Scalar, Var};

use crate::error::{Error, Result};
use crate::vmfe::NORM_EPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Channels of the condition plus the judged image.
    pub input_channels: usize,
    pub base_width: usize,
    /// Stride-2 layers after the first; 3 gives a 70×70 receptive field.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 6,
            base_width: 64,
            n_layers: 3,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    conv: Conv2d,
    norm: bool,
    act: bool,
}

/// 4×4 convolutions: one plain stride-2 layer, `n_layers − 1` normalized
/// stride-2 layers, one normalized stride-1 layer and a stride-1 scoring
/// layer.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub config: DiscriminatorConfig,
    layers: Vec<Layer>,
}

impl PatchDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.n_layers == 0 || config.base_width == 0 || config.input_channels == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        let init = Init::Normal(0.02);
        let w = config.base_width;
        let mut layers = Vec::new();
        let mut add = |store: &mut ParamStore<T>, cin: usize, cout: usize, stride: usize, norm: bool, act: bool| {
            let i = layers.len();
            let conv = Conv2d::new(store, &format!("disc.conv{i}"), cin, cout, 4, stride, 1, !norm, init, rng);
            layers.push(Layer { conv, norm, act });
        };
        add(store, config.input_channels, w, 2, false, true);
        let mut mult = 1;
        for n in 1..config.n_layers {
            let next = (1 << n).min(8);
            add(store, w * mult, w * next, 2, true, true);
            mult = next;
        }
        let next = (1 << config.n_layers).min(8);
        add(store, w * mult, w * next, 1, true, true);
        add(store, w * next, 1, 1, false, false);
        Ok(Self { config, layers })
    }

    /// Patch scores for the channel concatenation of condition and image.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        condition: Var<'t, T>,
        image: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut h = Var::concat_channels(&[condition, image])?;
        let c = h.shape()[1];
        if c != self.config.input_channels {
            return Err(Error::shape("discriminator input channels", self.config.input_channels, c));
        }
        let slope = T::lit(0.2);
        for l in &self.layers {
            h = l.conv.forward(cx, h)?;
            if l.norm {
                h = h.instance_norm(T::lit(NORM_EPS))?;
            }
            if l.act {
                h = h.leaky_relu(slope);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use stainfuse_tensor::{Mode, Tape, Tensor};

    use super::*;

    #[test]
    fn patch_map_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = DiscriminatorConfig { base_width: 4, ..Default::default() };
        let d = PatchDiscriminator::new(&mut store, cfg, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, Mode::Train);
        let a = tape.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let y = d.forward(&cx, a, a).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 6, 6]);
    }
}
