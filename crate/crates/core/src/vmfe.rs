//! Multi-scale feature extraction: a wavelet pyramid at scales 1, 1/2, 1/4
//! and a convolutional GRU that consumes it coarse to fine.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::nn::{Conv2d, Init};
use stainfuse_tensor::{Ctx, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::wavelet::{haar_dwt_stacked, WtConvLayer};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// How pyramid levels above 1/4 scale are brought down to it before entering
/// the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Repeated parameter-free Haar analysis, keeping all subbands.
    Wavelet,
    /// Non-overlapping average pooling.
    AvgPool,
}

/// Feature maps X₁, X₂, X₃ at scales 1, 1/2, 1/4 of the input.
#[derive(Debug, Clone, Copy)]
pub struct MultiScalePyramid<'t, T: Scalar> {
    pub x1: Var<'t, T>,
    pub x2: Var<'t, T>,
    pub x3: Var<'t, T>,
}

/// Recurrent state at 1/4 scale.
#[derive(Debug, Clone, Copy)]
pub struct MsfpmState<'t, T: Scalar> {
    pub h: Var<'t, T>,
}

/// Hidden states after consuming X₃, X₂, X₁, in that order.
#[derive(Debug, Clone, Copy)]
pub struct HiddenSequence<'t, T: Scalar> {
    pub h3: Var<'t, T>,
    pub h2: Var<'t, T>,
    pub h1: Var<'t, T>,
}

impl<'t, T: Scalar> HiddenSequence<'t, T> {
    pub fn zeros(tape: &'t stainfuse_tensor::Tape<T>, shape: &[usize]) -> Self {
        let z = tape.constant(Tensor::zeros(shape));
        Self { h3: z, h2: z, h1: z }
    }
}

/// Reflect-padded 7×7 convolution, instance norm, ReLU.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Conv2d,
}

impl Stem {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, name, in_channels, out_channels, 7, 1, 0, false, Init::Normal(0.02), rng);
        Self { conv }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(cx, x.reflect_pad(3)?)?;
        Ok(y.instance_norm(T::lit(NORM_EPS))?.relu())
    }
}

/// Convolutional GRU with 3×3, padding-1 gates.
#[derive(Debug, Clone)]
pub struct ConvGru {
    pub channels: usize,
    pub update: Conv2d,
    pub reset: Conv2d,
    pub candidate: Conv2d,
}

impl ConvGru {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let init = Init::Uniform { gain: 1.0 };
        let mut gate = |n: &str| Conv2d::new(store, &format!("{name}.{n}"), 2 * channels, channels, 3, 1, 1, true, init, rng);
        Self {
            channels,
            update: gate("update"),
            reset: gate("reset"),
            candidate: gate("candidate"),
        }
    }

    pub fn step<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, h: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (xs, hs) = (x.shape(), h.shape());
        if xs != hs {
            return Err(Error::shape("msfpm_step", hs, xs));
        }
        if xs[1] != self.channels {
            return Err(Error::shape("msfpm_step channels", self.channels, xs[1]));
        }
        let xh = Var::concat_channels(&[x, h])?;
        let z = self.update.forward(cx, xh)?.sigmoid();
        let r = self.reset.forward(cx, xh)?.sigmoid();
        let xrh = Var::concat_channels(&[x, r.mul(&h)?])?;
        let cand = self.candidate.forward(cx, xrh)?.tanh();
        // h' = h + z ⊙ (ĥ − h)
        h.add(&z.mul(&cand.sub(&h)?)?).map_err(Into::into)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfeConfig {
    pub in_channels: usize,
    /// Channel counts of X₁, X₂, X₃.
    pub widths: [usize; 3],
    /// GRU width; also the generator bottleneck width.
    pub hidden_channels: usize,
    pub resample: Resample,
}

impl VmfeConfig {
    pub fn for_base_width(in_channels: usize, base: usize) -> Self {
        Self {
            in_channels,
            widths: [base, 2 * base, 4 * base],
            hidden_channels: 4 * base,
            resample: Resample::Wavelet,
        }
    }
}

/// Pyramid builder plus recurrence. The stem and the two wavelet layers are
/// also the generator's downsampling path.
#[derive(Debug, Clone)]
pub struct Vmfe {
    pub config: VmfeConfig,
    pub stem: Stem,
    pub down1: WtConvLayer,
    pub down2: WtConvLayer,
    /// 1×1 maps from each resampled level to the GRU width, for X₃, X₂, X₁.
    pub proj: [Conv2d; 3],
    pub gru: ConvGru,
}

impl Vmfe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: VmfeConfig,
        rng: &mut R,
    ) -> Self {
        let [w1, w2, w3] = config.widths;
        let stem = Stem::new(store, &format!("{name}.stem"), config.in_channels, w1, rng);
        let down1 = WtConvLayer::new(store, &format!("{name}.down1"), w1, w2, rng);
        let down2 = WtConvLayer::new(store, &format!("{name}.down2"), w2, w3, rng);
        let (c2, c1) = match config.resample {
            Resample::Wavelet => (4 * w2, 16 * w1),
            Resample::AvgPool => (w2, w1),
        };
        let hid = config.hidden_channels;
        let init = Init::Uniform { gain: 1.0 };
        let proj = [("proj3", w3), ("proj2", c2), ("proj1", c1)]
            .map(|(n, c)| Conv2d::new(store, &format!("{name}.{n}"), c, hid, 1, 1, 0, true, init, rng));
        let gru = ConvGru::new(store, &format!("{name}.gru"), hid, rng);
        Self {
            config,
            stem,
            down1,
            down2,
            proj,
            gru,
        }
    }

    pub fn build_pyramid<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<MultiScalePyramid<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::shape("build_pyramid", "(B, C, H, W) with H, W divisible by 4", s));
        }
        let x1 = self.stem.forward(cx, x)?;
        let x2 = self.down1.forward(cx, x1)?;
        let x3 = self.down2.forward(cx, x2)?;
        Ok(MultiScalePyramid { x1, x2, x3 })
    }

    fn to_quarter<'t, T: Scalar>(&self, x: Var<'t, T>, halvings: usize) -> Result<Var<'t, T>> {
        match self.config.resample {
            Resample::Wavelet => (0..halvings).try_fold(x, |v, _| haar_dwt_stacked(v)),
            Resample::AvgPool if halvings == 0 => Ok(x),
            Resample::AvgPool => Ok(x.avg_pool(1 << halvings)?),
        }
    }

    /// Resamples a pyramid level to 1/4 scale and projects it to GRU width.
    /// `level` is 3, 2 or 1.
    pub fn prepare_input<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>, level: usize) -> Result<Var<'t, T>> {
        if !(1..=3).contains(&level) {
            return Err(Error::Config(format!("pyramid level {level} (expected 1, 2 or 3)")));
        }
        let q = self.to_quarter(x, 3 - level)?;
        self.proj[3 - level].forward(cx, q).map_err(Into::into)
    }

    pub fn msfpm_step<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        state: MsfpmState<'t, T>,
        x_t: Var<'t, T>,
    ) -> Result<MsfpmState<'t, T>> {
        Ok(MsfpmState {
            h: self.gru.step(cx, state.h, x_t)?,
        })
    }

    /// Runs the recurrence over X₃, X₂, X₁ from a zero state.
    pub fn run_msfpm<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        p: &MultiScalePyramid<'t, T>,
    ) -> Result<HiddenSequence<'t, T>> {
        let s3 = p.x3.shape();
        let h0 = cx.tape.constant(Tensor::zeros(&[s3[0], self.config.hidden_channels, s3[2], s3[3]]));
        let mut state = MsfpmState { h: h0 };
        let mut out = Vec::with_capacity(3);
        for (level, x) in [(3, p.x3), (2, p.x2), (1, p.x1)] {
            let xin = self.prepare_input(cx, x, level)?;
            state = self.msfpm_step(cx, state, xin)?;
            out.push(state.h);
        }
        Ok(HiddenSequence {
            h3: out[0],
            h2: out[1],
            h1: out[2],
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use stainfuse_tensor::{Mode, Tape};

    use super::*;

    fn small(resample: Resample) -> (ParamStore<f64>, Vmfe) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mut cfg = VmfeConfig::for_base_width(3, 2);
        cfg.resample = resample;
        let v = Vmfe::new(&mut store, "vmfe", cfg, &mut rng);
        (store, v)
    }

    #[test]
    fn pyramid_halves_each_level() {
        for r in [Resample::Wavelet, Resample::AvgPool] {
            let (store, v) = small(r);
            let tape = Tape::no_grad();
            let cx = Ctx::new(&tape, &store, Mode::Eval);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = tape.constant(Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng));
            let p = v.build_pyramid(&cx, x).unwrap();
            assert_eq!(p.x1.shape(), vec![1, 2, 8, 8]);
            assert_eq!(p.x2.shape(), vec![1, 4, 4, 4]);
            assert_eq!(p.x3.shape(), vec![1, 8, 2, 2]);
            let hs = v.run_msfpm(&cx, &p).unwrap();
            for h in [hs.h3, hs.h2, hs.h1] {
                assert_eq!(h.shape(), vec![1, 8, 2, 2]);
                assert!(h.value().data().iter().all(|v| v.abs() < 1.0));
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let (store, v) = small(Resample::Wavelet);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, Mode::Eval);
        let x = tape.constant(Tensor::zeros(&[1, 3, 6, 8]));
        assert!(matches!(v.build_pyramid(&cx, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_input_gives_zero_states() {
        let (store, v) = small(Resample::Wavelet);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, Mode::Eval);
        let p = v.build_pyramid(&cx, tape.constant(Tensor::zeros(&[1, 3, 8, 8]))).unwrap();
        for x in [p.x1, p.x2, p.x3] {
            assert!(x.value().data().iter().all(|&v| v == 0.0));
        }
        let hs = v.run_msfpm(&cx, &p).unwrap();
        for h in [hs.h3, hs.h2, hs.h1] {
            assert!(h.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn step_rejects_scale_mismatch() {
        let (store, v) = small(Resample::Wavelet);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, Mode::Eval);
        let h = MsfpmState { h: tape.constant(Tensor::zeros(&[1, 8, 2, 2])) };
        let e = v.msfpm_step(&cx, h, tape.constant(Tensor::zeros(&[1, 8, 4, 4]))).unwrap_err();
        assert!(e.to_string().contains("msfpm_step"), "{e}");
    }
}
