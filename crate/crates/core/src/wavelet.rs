//! Orthonormal 2-D Haar analysis/synthesis and the wavelet downsampling layer
//! built on it.
//!
//! For a 2×2 input block
//!
//! ```text
//! a b
//! c d
//! ```
//!
//! the four coefficients are
//!
//! ```text
//! ll = (a + b + c + d) / 2
//! lh = (a + b − c − d) / 2   (vertical change)
//! hl = (a − b + c − d) / 2   (horizontal change)
//! hh = (a − b − c + d) / 2
//! ```
//!
//! The transform matrix is orthogonal and symmetric, so the synthesis step
//! applies the same matrix and energy is conserved exactly.

use rand::Rng;
use stainfuse_tensor::nn::{Conv2d, Init};
use stainfuse_tensor::{Ctx, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Four half-resolution detail bands of one transform level.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletSubbands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> WaveletSubbands<T> {
    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    pub fn energy(&self) -> T {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }
}

fn even_dims(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 {
        return Err(Error::OddDimension { op, axis: "height", size: h });
    }
    if w % 2 != 0 {
        return Err(Error::OddDimension { op, axis: "width", size: w });
    }
    Ok(())
}

/// Applies the 4×4 butterfly to every 2×2 block of every plane. `out` holds
/// the four result planes for plane `p` at `out[k][p]`.
fn analysis_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> [Vec<T>; 4] {
    let half = T::lit(0.5);
    let (oh, ow) = (h / 2, w / 2);
    let mut out: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(planes * oh * ow));
    for plane in x.chunks(h * w).take(planes) {
        for y in 0..oh {
            let top = &plane[2 * y * w..(2 * y + 1) * w];
            let bot = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..ow {
                let (a, b, c, d) = (top[2 * xx], top[2 * xx + 1], bot[2 * xx], bot[2 * xx + 1]);
                out[0].push((a + b + c + d) * half);
                out[1].push((a + b - c - d) * half);
                out[2].push((a - b + c - d) * half);
                out[3].push((a - b - c + d) * half);
            }
        }
    }
    out
}

/// Inverse of [`analysis_planes`] for `planes` planes of size `oh×ow`.
fn synthesis_planes<T: Scalar>(bands: [&[T]; 4], planes: usize, oh: usize, ow: usize) -> Vec<T> {
    let half = T::lit(0.5);
    let (h, w) = (oh * 2, ow * 2);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = p * oh * ow + y * ow + xx;
                let (ll, lh, hl, hh) = (bands[0][i], bands[1][i], bands[2][i], bands[3][i]);
                dst[2 * y * w + 2 * xx] = (ll + lh + hl + hh) * half;
                dst[2 * y * w + 2 * xx + 1] = (ll + lh - hl - hh) * half;
                dst[(2 * y + 1) * w + 2 * xx] = (ll - lh + hl - hh) * half;
                dst[(2 * y + 1) * w + 2 * xx + 1] = (ll - lh - hl + hh) * half;
            }
        }
    }
    out
}

/// Single-level orthonormal Haar analysis of a (B, C, H, W) tensor.
pub fn haar_dwt2d<T: Scalar>(x: &Tensor<T>) -> Result<WaveletSubbands<T>> {
    let (b, c, h, w) = x.dims4()?;
    even_dims("haar_dwt2d", h, w)?;
    let [ll, lh, hl, hh] = analysis_planes(x.data(), b * c, h, w);
    let shape = [b, c, h / 2, w / 2];
    Ok(WaveletSubbands {
        ll: Tensor::from_vec(&shape, ll)?,
        lh: Tensor::from_vec(&shape, lh)?,
        hl: Tensor::from_vec(&shape, hl)?,
        hh: Tensor::from_vec(&shape, hh)?,
    })
}

/// Synthesis step: exact inverse of [`haar_dwt2d`].
pub fn haar_idwt2d<T: Scalar>(s: &WaveletSubbands<T>) -> Result<Tensor<T>> {
    let shape = s.ll.shape();
    for band in [&s.lh, &s.hl, &s.hh] {
        if band.shape() != shape {
            return Err(Error::shape("haar_idwt2d", shape, band.shape()));
        }
    }
    let (b, c, oh, ow) = s.ll.dims4()?;
    let data = synthesis_planes([s.ll.data(), s.lh.data(), s.hl.data(), s.hh.data()], b * c, oh, ow);
    Ok(Tensor::from_vec(&[b, c, oh * 2, ow * 2], data)?)
}

/// Differentiable analysis returning the bands stacked on the channel axis
/// as `[ll, lh, hl, hh]`, shape (B, 4C, H/2, W/2).
pub fn haar_dwt_stacked<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    even_dims("haar_dwt2d", h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let bands = analysis_planes(xv.data(), b * c, h, w);
    let plane = oh * ow;
    let mut data = Vec::with_capacity(4 * b * c * plane);
    for bi in 0..b {
        for band in &bands {
            data.extend_from_slice(&band[bi * c * plane..(bi + 1) * c * plane]);
        }
    }
    let out = Tensor::from_vec(&[b, 4 * c, oh, ow], data)?;
    Ok(x.tape().op(out, &[x], move |g| {
        // The transform is orthogonal, so its adjoint is the synthesis step.
        let mut split: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(b * c * plane));
        for gb in g.data().chunks(4 * c * plane) {
            for (k, part) in split.iter_mut().enumerate() {
                part.extend_from_slice(&gb[k * c * plane..(k + 1) * c * plane]);
            }
        }
        let dx = synthesis_planes([&split[0], &split[1], &split[2], &split[3]], b * c, oh, ow);
        vec![Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap())]
    }))
}

/// Pointwise nonlinearity applied after subband mixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<'t, T: Scalar>(&self, x: Var<'t, T>) -> Var<'t, T> {
        match *self {
            Activation::Linear => x,
            Activation::LeakyRelu(s) => x.leaky_relu(T::lit(s)),
        }
    }
}

/// Wavelet downsampling: Haar analysis, learnable 1×1 mixing of the stacked
/// subbands (4·in → out channels), then a pointwise nonlinearity.
#[derive(Debug, Clone)]
pub struct WtConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub mix: Conv2d,
    pub activation: Activation,
}

impl WtConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mix = Conv2d::new(
            store,
            &format!("{name}.mix"),
            4 * in_channels,
            out_channels,
            1,
            1,
            0,
            true,
            Init::Uniform { gain: 2f64.sqrt() },
            rng,
        );
        Self {
            in_channels,
            out_channels,
            mix,
            activation: Activation::LeakyRelu(0.2),
        }
    }

    /// Sets the mixing map so output channel `o` copies the LL band of input
    /// channel `o` (zero for `o ≥ in_channels`) with zero bias.
    pub fn set_ll_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let w = store.get_mut(self.mix.weight);
        w.data_mut().fill(T::zero());
        let cin4 = 4 * self.in_channels;
        for o in 0..self.out_channels.min(self.in_channels) {
            w.data_mut()[o * cin4 + o] = T::one();
        }
        if let Some(b) = self.mix.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, _, _) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape {
                op: "wtconv_down",
                expected: format!("{} channels", self.in_channels),
                actual: format!("{c} channels"),
            });
        }
        let bands = haar_dwt_stacked(x)?;
        let mixed = self.mix.forward(cx, bands)?;
        Ok(self.activation.apply(mixed))
    }
}
