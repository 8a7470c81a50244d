use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Per-channel statistics of one batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the form folded into running estimates.
    pub var_unbiased: Vec<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Normalizes every (batch, channel) plane to zero mean and unit biased
    /// variance. No affine parameters.
    pub fn instance_norm(&self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let m = h * w;
        let inv_m = T::one() / T::lit(m as f64);
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(b * c);
        for plane in x.data().chunks(m) {
            let mean = plane.iter().copied().sum::<T>() * inv_m;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(plane.iter().map(|&v| (v - mean) * is));
        }
        let out = Tensor::from_vec(&[b, c, h, w], xhat)?;
        let xh = out.clone();
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut dx = Vec::with_capacity(g.len());
            for ((gp, xp), &is) in g.data().chunks(m).zip(xh.data().chunks(m)).zip(&inv_std) {
                let mg = gp.iter().copied().sum::<T>() * inv_m;
                let mgx = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>() * inv_m;
                dx.extend(gp.iter().zip(xp).map(|(&gi, &xi)| is * (gi - mg - xi * mgx)));
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Batch normalization with batch statistics over (batch, height, width).
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (gv, bv) = (gamma.value(), beta.value());
        gv.expect_shape("batch_norm gamma", &[c])?;
        bv.expect_shape("batch_norm beta", &[c])?;
        let plane = h * w;
        let m = b * plane;
        if m < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                "batch statistics need at least two values per channel",
            ));
        }
        let inv_m = T::one() / T::lit(m as f64);
        let idx = move |bi: usize, ci: usize| (bi * c + ci) * plane;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s += x.data()[idx(bi, ci)..idx(bi, ci) + plane].iter().copied().sum::<T>();
            }
            mean[ci] = s * inv_m;
            let mut v = T::zero();
            for bi in 0..b {
                v += x.data()[idx(bi, ci)..idx(bi, ci) + plane]
                    .iter()
                    .map(|&xi| (xi - mean[ci]) * (xi - mean[ci]))
                    .sum::<T>();
            }
            var[ci] = v * inv_m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let o = idx(bi, ci);
                for i in o..o + plane {
                    let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = xh * gv.data()[ci] + bv.data()[ci];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var_unbiased: var
                .iter()
                .map(|&v| v * T::lit(m as f64) / T::lit((m - 1) as f64))
                .collect(),
        };
        let out = Tensor::from_vec(&[b, c, h, w], out)?;
        let y = self.tape.op(out, &[*self, *gamma, *beta], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ci in 0..c {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for bi in 0..b {
                    let o = idx(bi, ci);
                    for i in o..o + plane {
                        sg += gd[i];
                        sgx += gd[i] * xhat[i];
                    }
                }
                dgamma[ci] = sgx;
                dbeta[ci] = sg;
                let k = gv.data()[ci] * inv_std[ci];
                let (mg, mgx) = (sg * inv_m, sgx * inv_m);
                for bi in 0..b {
                    let o = idx(bi, ci);
                    for i in o..o + plane {
                        dx[i] = k * (gd[i] - mg - xhat[i] * mgx);
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap()),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        });
        Ok((y, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (gv, bv) = (gamma.value(), beta.value());
        gv.expect_shape("batch_norm gamma", &[c])?;
        bv.expect_shape("batch_norm beta", &[c])?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::invalid("batch_norm", "running statistics width"));
        }
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let mut out = vec![T::zero(); x.len()];
        for (pi, (dst, src)) in out.chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
            let ci = pi % c;
            let k = gv.data()[ci] * inv_std[ci];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean[ci]) * k + bv.data()[ci];
            }
        }
        let out = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.tape.op(out, &[*self, *gamma, *beta], move |g| {
            let mut dx = vec![T::zero(); g.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (pi, ((dst, gp), xp)) in dx
                .chunks_mut(plane)
                .zip(g.data().chunks(plane))
                .zip(x.data().chunks(plane))
                .enumerate()
            {
                let ci = pi % c;
                let k = gv.data()[ci] * inv_std[ci];
                for ((d, &gi), &xi) in dst.iter_mut().zip(gp).zip(xp) {
                    *d = gi * k;
                    dgamma[ci] += gi * (xi - mean[ci]) * inv_std[ci];
                    dbeta[ci] += gi;
                }
            }
            vec![
                Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap()),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        }))
    }
}
