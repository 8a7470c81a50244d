use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one (C, H, W) image into a (C·kh·kw, OH·OW) column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation with zero padding. `weight` is (O, C, kh, kw),
    /// `bias` is (O).
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = weight.value();
        let (b, c, h, w) = x.dims4()?;
        let (o, wc, kh, kw) = wt.dims4()?;
        if wc != c {
            return Err(TensorError::invalid(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        let bv = match bias {
            Some(bv) => {
                let t = bv.value();
                t.expect_shape("conv2d bias", &[o])?;
                Some(t)
            }
            None => None,
        };
        let g = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = g.out_hw();
        let (ck, ohw) = (c * kh * kw, oh * ow);
        let mut out = vec![T::zero(); b * o * ohw];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * ohw] };
        for bi in 0..b {
            let xb = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
            let colsb: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            let ob = &mut out[bi * o * ohw..(bi + 1) * o * ohw];
            if let Some(bt) = &bv {
                for (row, &bias) in ob.chunks_mut(ohw).zip(bt.data()) {
                    row.fill(bias);
                }
            }
            T::gemm(o, ck, ohw, T::one(), wt.data(), ck as isize, 1, colsb, ohw as isize, 1, T::one(), ob, ohw as isize, 1);
        }
        let out = Tensor::from_vec(&[b, o, oh, ow], out)?;
        let mut parents = vec![*self, *weight];
        if let Some(bv) = bias {
            parents.push(*bv);
        }
        let has_bias = bias.is_some();
        let (xs, ws) = (Arc::clone(&x), Arc::clone(&wt));
        Ok(self.tape.op(out, &parents, move |gout| {
            let mut dx = vec![T::zero(); b * c * h * w];
            let mut dw = vec![T::zero(); o * ck];
            let mut cols = vec![T::zero(); ck * ohw];
            let mut dcols = vec![T::zero(); ck * ohw];
            for bi in 0..b {
                let gb = &gout.data()[bi * o * ohw..(bi + 1) * o * ohw];
                let xb = &xs.data()[bi * c * h * w..(bi + 1) * c * h * w];
                let colsb: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut cols);
                    &cols
                };
                // dW += dOut · colsᵀ
                T::gemm(o, ohw, ck, T::one(), gb, ohw as isize, 1, colsb, 1, ohw as isize, T::one(), &mut dw, ck as isize, 1);
                let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
                if g.is_pointwise() {
                    T::gemm(ck, o, ohw, T::one(), ws.data(), 1, ck as isize, gb, ohw as isize, 1, T::zero(), dxb, ohw as isize, 1);
                } else {
                    T::gemm(ck, o, ohw, T::one(), ws.data(), 1, ck as isize, gb, ohw as isize, 1, T::zero(), &mut dcols, ohw as isize, 1);
                    col2im(&dcols, &g, dxb);
                }
            }
            let mut grads = vec![
                Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap()),
                Some(Tensor::from_vec(&[o, c, kh, kw], dw).unwrap()),
            ];
            if has_bias {
                let mut db = vec![T::zero(); o];
                for gb in gout.data().chunks(o * ohw) {
                    for (d, row) in db.iter_mut().zip(gb.chunks(ohw)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::from_vec(&[o], db).unwrap()));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::gradcheck::{numerical_grad, rel_err};
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    /// Direct nested-loop convolution.
    fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b[oi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.get(&[ni, ci, iy as usize, ix as usize]) * w.get(&[oi, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[ni, oi, y, xx], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (7, 1, 0), (3, 2, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 9, 8], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let tape = Tape::no_grad();
            let y = tape
                .constant(x.clone())
                .conv2d(&tape.constant(w.clone()), Some(&tape.constant(Tensor::from_vec(&[4], b.clone()).unwrap())), stride, pad)
                .unwrap()
                .value();
            let r = conv_ref(&x, &w, &b, stride, pad);
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12, "k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let x0 = Tensor::<f64>::randn(&[2, 2, 5, 6], 1.0, &mut rng);
            let w0 = Tensor::<f64>::randn(&[3, 2, k, k], 1.0, &mut rng);
            let b0 = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
            let probe = Tensor::<f64>::randn(&[2, 3, (5 + 2 * pad - k) / stride + 1, (6 + 2 * pad - k) / stride + 1], 1.0, &mut rng);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let tape = Tape::no_grad();
                let y = tape.constant(x.clone()).conv2d(&tape.constant(w.clone()), Some(&tape.constant(b.clone())), stride, pad).unwrap();
                y.mul(&tape.constant(probe.clone())).unwrap().sum().item()
            };
            let tape = Tape::new();
            let (x, w, b) = (tape.leaf(x0.clone()), tape.leaf(w0.clone()), tape.leaf(b0.clone()));
            let y = x.conv2d(&w, Some(&b), stride, pad).unwrap().mul(&tape.constant(probe.clone())).unwrap().sum();
            let g = tape.backward(y).unwrap();
            let nx = numerical_grad(&x0, 1e-6, |p| loss(p, &w0, &b0));
            let nw = numerical_grad(&w0, 1e-6, |p| loss(&x0, p, &b0));
            let nb = numerical_grad(&b0, 1e-6, |p| loss(&x0, &w0, p));
            assert!(rel_err(g.wrt(x).unwrap(), &nx) < 1e-8);
            assert!(rel_err(g.wrt(w).unwrap(), &nw) < 1e-8);
            assert!(rel_err(g.wrt(b).unwrap(), &nb) < 1e-8);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(x.conv2d(&w, None, 1, 1).is_err());
    }
}
