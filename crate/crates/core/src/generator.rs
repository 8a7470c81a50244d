//! Residual image-to-image generator. Its downsampling path is the wavelet
//! pyramid, its bottleneck maps receive the recurrent hidden states by
//! addition, and its first bottleneck map is fused with encoder features by
//! cross-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::nn::{Conv2d, Init};
use stainfuse_tensor::{Ctx, ParamStore, Scalar, Tensor, Var};

use crate::attention::{CrossAttention, DEFAULT_ATTENTION_CHUNK};
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::vmfe::{HiddenSequence, Resample, Stem, Vmfe, VmfeConfig, NORM_EPS};

/// Where the four fused bottleneck maps F₁..F₄ are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSite {
    /// F_k is the output of residual block k.
    BlockOutputs,
    /// F₁ is the bottleneck input, F_k the output of block k−1.
    BlockInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    pub fusion_strength: f64,
    pub fusion_site: FusionSite,
    pub resample: Resample,
    /// Attention feature dimension; 0 means the bottleneck width.
    pub attention_dim: usize,
    pub attention_chunk: usize,
    /// Encoder stage (1..=4) whose output guides the attention.
    pub encoder_stage: usize,
    /// Set from the training config's ablation flags, not read from files.
    #[serde(skip)]
    pub use_vmfe: bool,
    #[serde(skip)]
    pub use_attention: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            output_channels: 3,
            base_width: 64,
            n_resblocks: 6,
            fusion_strength: 0.2,
            fusion_site: FusionSite::BlockOutputs,
            resample: Resample::Wavelet,
            attention_dim: 0,
            attention_chunk: DEFAULT_ATTENTION_CHUNK,
            encoder_stage: 4,
            use_vmfe: true,
            use_attention: true,
        }
    }
}

impl GeneratorConfig {
    pub fn bottleneck_channels(&self) -> usize {
        4 * self.base_width
    }

    fn first_fusion_point(&self) -> usize {
        match self.fusion_site {
            FusionSite::BlockInputs => 0,
            FusionSite::BlockOutputs => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        if !(self.fusion_strength >= 0.0) || !self.fusion_strength.is_finite() {
            return Err(Error::Config(format!("fusion_strength must be >= 0, got {}", self.fusion_strength)));
        }
        let needed = self.first_fusion_point() + 3;
        if self.n_resblocks < needed {
            return Err(Error::Config(format!(
                "{:?} fusion needs at least {needed} residual blocks, got {}",
                self.fusion_site, self.n_resblocks
            )));
        }
        if !(1..=4).contains(&self.encoder_stage) {
            return Err(Error::Config(format!("encoder_stage must be in 1..=4, got {}", self.encoder_stage)));
        }
        Ok(())
    }
}

/// The four bottleneck maps that take part in fusion.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorFeatureMaps<'t, T: Scalar> {
    pub f1: Var<'t, T>,
    pub f2: Var<'t, T>,
    pub f3: Var<'t, T>,
    pub f4: Var<'t, T>,
}

/// `F'_k = F_k + h_{4−k}` for k = 2, 3, 4; F₁ passes through.
pub fn fuse_hidden<'t, T: Scalar>(
    f: &GeneratorFeatureMaps<'t, T>,
    hs: &HiddenSequence<'t, T>,
) -> Result<GeneratorFeatureMaps<'t, T>> {
    let add = |a: Var<'t, T>, h: Var<'t, T>| -> Result<Var<'t, T>> {
        if a.shape() != h.shape() {
            return Err(Error::shape("fuse_hidden", a.shape(), h.shape()));
        }
        Ok(a.add(&h)?)
    };
    Ok(GeneratorFeatureMaps {
        f1: f.f1,
        f2: add(f.f2, hs.h3)?,
        f3: add(f.f3, hs.h2)?,
        f4: add(f.f4, hs.h1)?,
    })
}

/// Hidden state added at fused map F_k (k = 2, 3, 4).
fn hidden_for<'t, T: Scalar>(hs: &HiddenSequence<'t, T>, k: usize) -> Var<'t, T> {
    match k {
        2 => hs.h3,
        3 => hs.h2,
        _ => hs.h1,
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        let mut conv = |n: &str| Conv2d::new(store, &format!("{name}.{n}"), c, c, 3, 1, 0, false, Init::Normal(0.02), rng);
        Self {
            conv1: conv("conv1"),
            conv2: conv("conv2"),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let eps = T::lit(NORM_EPS);
        let y = self.conv1.forward(cx, x.reflect_pad(1)?)?.instance_norm(eps)?.relu();
        let y = self.conv2.forward(cx, y.reflect_pad(1)?)?.instance_norm(eps)?;
        Ok(x.add(&y)?)
    }
}

/// Convolution, instance norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
}

impl ConvNormRelu {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv.forward(cx, x)?.instance_norm(T::lit(NORM_EPS))?.relu())
    }
}

#[derive(Debug, Clone)]
pub enum Downsampling {
    /// Wavelet pyramid plus recurrence.
    Vmfe(Vmfe),
    /// Stem and two stride-2 3×3 convolutions.
    Strided { stem: Stem, down: [ConvNormRelu; 2] },
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub encoder_channels: usize,
    pub down: Downsampling,
    pub blocks: Vec<ResBlock>,
    pub attention: Option<CrossAttention>,
    /// Nearest-neighbour ×2 followed by these.
    pub up: [ConvNormRelu; 2],
    pub head: Conv2d,
}

/// Whether the recurrent hidden states are computed or replaced by zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenMode {
    Computed,
    Zero,
}

impl Generator {
    /// `encoder_channels` is the channel count of the encoder stage that
    /// guides the attention.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: GeneratorConfig,
        encoder_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let init = Init::Normal(0.02);
        let down = if config.use_vmfe {
            let mut vc = VmfeConfig::for_base_width(config.input_channels, w);
            vc.resample = config.resample;
            Downsampling::Vmfe(Vmfe::new(store, "gen.vmfe", vc, rng))
        } else {
            let stem = Stem::new(store, "gen.stem", config.input_channels, w, rng);
            let down = [(1, w, 2 * w), (2, 2 * w, 4 * w)].map(|(i, cin, cout)| ConvNormRelu {
                conv: Conv2d::new(store, &format!("gen.down{i}"), cin, cout, 3, 2, 1, false, init, rng),
            });
            Downsampling::Strided { stem, down }
        };
        let c = config.bottleneck_channels();
        let blocks = (0..config.n_resblocks)
            .map(|i| ResBlock::new(store, &format!("gen.block{}", i + 1), c, rng))
            .collect();
        let attention = if config.use_attention {
            let mut a = CrossAttention::new(
                store,
                "gen.attention",
                c,
                encoder_channels,
                config.attention_dim,
                config.fusion_strength,
                rng,
            )?;
            a.chunk = config.attention_chunk.max(1);
            Some(a)
        } else {
            None
        };
        let up = [(1, 4 * w, 2 * w), (2, 2 * w, w)].map(|(i, cin, cout)| ConvNormRelu {
            conv: Conv2d::new(store, &format!("gen.up{i}"), cin, cout, 3, 1, 1, false, init, rng),
        });
        let head = Conv2d::new(store, "gen.head", w, config.output_channels, 7, 1, 0, true, init, rng);
        Ok(Self {
            config,
            encoder_channels,
            down,
            blocks,
            attention,
            up,
            head,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::shape(
                "generator_forward",
                format!("(B, {}, H, W) with H, W divisible by 4", self.config.input_channels),
                shape,
            ));
        }
        Ok(())
    }

    /// Bottleneck map and, on the wavelet path, the pyramid hidden states.
    fn encode<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        hidden: HiddenMode,
    ) -> Result<(Var<'t, T>, Option<HiddenSequence<'t, T>>)> {
        self.check_input(&x.shape())?;
        match &self.down {
            Downsampling::Vmfe(v) => {
                let p = v.build_pyramid(cx, x)?;
                let hs = match hidden {
                    HiddenMode::Computed => v.run_msfpm(cx, &p)?,
                    HiddenMode::Zero => HiddenSequence::zeros(cx.tape, &p.x3.shape()),
                };
                Ok((p.x3, Some(hs)))
            }
            Downsampling::Strided { stem, down } => {
                let mut h = stem.forward(cx, x)?;
                for d in down {
                    h = d.forward(cx, h)?;
                }
                Ok((h, None))
            }
        }
    }

    fn decode<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = f;
        for u in &self.up {
            h = u.forward(cx, h.upsample_nearest(2)?)?;
        }
        Ok(self.head.forward(cx, h.reflect_pad(3)?)?.tanh())
    }

    /// Full forward pass. `enc_features` are the guiding encoder features,
    /// already at bottleneck resolution; required when attention is enabled.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        enc_features: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        self.forward_with(cx, x, enc_features, HiddenMode::Computed)
    }

    pub fn forward_with<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        enc_features: Option<Var<'t, T>>,
        hidden: HiddenMode,
    ) -> Result<Var<'t, T>> {
        let (mut f, hs) = self.encode(cx, x, hidden)?;
        let first = self.config.first_fusion_point();
        for point in 0..=self.blocks.len() {
            if point > 0 {
                f = self.blocks[point - 1].forward(cx, f)?;
            }
            if point < first || point - first >= 4 {
                continue;
            }
            let k = point - first + 1;
            if k == 1 {
                if let Some(att) = &self.attention {
                    let e = enc_features.ok_or_else(|| {
                        Error::Config("attention is enabled but no encoder features were supplied".into())
                    })?;
                    f = att.fuse(cx, f, e)?;
                }
            } else if let Some(hs) = &hs {
                let h = hidden_for(hs, k);
                if h.shape() != f.shape() {
                    return Err(Error::shape("fuse_hidden", f.shape(), h.shape()));
                }
                f = f.add(&h)?;
            }
        }
        self.decode(cx, f)
    }

    /// The plain residual backbone on the same weights: no attention, no
    /// hidden-state fusion.
    pub fn forward_backbone<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        let mut f = match &self.down {
            Downsampling::Vmfe(v) => v.build_pyramid(cx, x)?.x3,
            Downsampling::Strided { .. } => self.encode(cx, x, HiddenMode::Zero)?.0,
        };
        for b in &self.blocks {
            f = b.forward(cx, f)?;
        }
        self.decode(cx, f)
    }

    /// Encoder features for `x` at this generator's bottleneck resolution.
    pub fn guide_features<T: Scalar>(&self, encoder: &EncoderModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        let f = encoder.feature_map(x, self.config.encoder_stage)?;
        if f.shape()[1] != self.encoder_channels {
            return Err(Error::shape("guide_features channels", self.encoder_channels, f.shape()[1]));
        }
        Ok(f.resize_bilinear(h / 4, w / 4)?)
    }
}
