use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let from = x.shape().to_vec();
        let v = x.reshape(shape)?;
        Ok(self
            .tape
            .op(v, &[*self], move |g| vec![Some(g.reshape(&from).unwrap())]))
    }

    /// Concatenation along the channel axis of rank-4 variables.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (b, _, h, w) = values[0].dims4()?;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (b2, c, h2, w2) = v.dims4()?;
            if (b2, h2, w2) != (b, h, w) {
                return Err(TensorError::mismatch("concat_channels", &[b, c, h, w], v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (v, &c) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec(&[b, total, h, w], data)?;
        Ok(first.tape.op(out, parts, move |g| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(b * c * plane)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..b {
                for (gi, &c) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&gd[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .map(|(d, &c)| Some(Tensor::from_vec(&[b, c, h, w], d).unwrap()))
                .collect()
        }))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if start + len > c || len == 0 {
            return Err(TensorError::invalid(
                "slice_channels",
                format!("range {start}..{} of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        let out = Tensor::from_vec(&[b, len, h, w], data)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut d = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                let base = (bi * c + start) * plane;
                d.data_mut()[base..base + len * plane]
                    .copy_from_slice(&g.data()[bi * len * plane..(bi + 1) * len * plane]);
            }
            vec![Some(d)]
        }))
    }

    /// Spatial window of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, ih, iw) = x.dims4()?;
        let out = x.crop(y0, x0, h, w)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut d = Tensor::zeros(&[b, c, ih, iw]);
            for (dst, src) in d.data_mut().chunks_mut(ih * iw).zip(g.data().chunks(h * w)) {
                for y in 0..h {
                    dst[(y0 + y) * iw + x0..(y0 + y) * iw + x0 + w]
                        .copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            vec![Some(d)]
        }))
    }

    /// Mirror padding without repeating the edge sample.
    pub fn reflect_pad(&self, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if pad >= h || pad >= w {
            return Err(TensorError::invalid(
                "reflect_pad",
                format!("pad {pad} needs spatial dims > pad, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = move |o: usize, n: usize| -> usize {
            let i = o as isize - pad as isize;
            let n = n as isize;
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        };
        let ys: Vec<usize> = (0..oh).map(|o| src(o, h)).collect();
        let xs: Vec<usize> = (0..ow).map(|o| src(o, w)).collect();
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for &y in &ys {
                for &xx in &xs {
                    data.push(plane[y * w + xx]);
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], data)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut d = Tensor::zeros(&[b, c, h, w]);
            for (dst, gp) in d.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for (oy, &y) in ys.iter().enumerate() {
                    for (ox, &xx) in xs.iter().enumerate() {
                        dst[y * w + xx] += gp[oy * ow + ox];
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if factor == 0 {
            return Err(TensorError::invalid("upsample_nearest", "factor 0"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    data.push(row[ox / factor]);
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], data)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut d = Tensor::zeros(&[b, c, h, w]);
            for (dst, gp) in d.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::invalid(
                "avg_pool",
                format!("window {k} does not divide {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let mut data = vec![T::zero(); b * c * oh * ow];
        for (dst, plane) in data.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += plane[y * w + xx];
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], data)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut d = Tensor::zeros(&[b, c, h, w]);
            for (dst, gp) in d.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = gp[(y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// (B, C, H, W) → (B, C).
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data: Vec<T> = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[b, c], data)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut d = Vec::with_capacity(b * c * h * w);
            for &gi in g.data() {
                d.extend(std::iter::repeat(gi * inv).take(h * w));
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], d).unwrap())]
        }))
    }

    /// (B, C, H, W) → (B, H·W, C): one token per spatial position.
    pub fn to_tokens(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let out = transpose_last2(x.data(), b, c, h * w);
        let out = Tensor::from_vec(&[b, h * w, c], out)?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let d = transpose_last2(g.data(), b, h * w, c);
            vec![Some(Tensor::from_vec(&[b, c, h, w], d).unwrap())]
        }))
    }

    /// (B, H·W, C) → (B, C, H, W).
    pub fn from_tokens(&self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let [b, n, c] = x.shape()[..] else {
            return Err(TensorError::Rank {
                op: "from_tokens",
                expected: 3,
                actual: x.shape().to_vec(),
            });
        };
        if n != h * w {
            return Err(TensorError::invalid(
                "from_tokens",
                format!("{n} tokens cannot fill {h}x{w}"),
            ));
        }
        let out = Tensor::from_vec(&[b, c, h, w], transpose_last2(x.data(), b, n, c))?;
        Ok(self.tape.op(out, &[*self], move |g| {
            let d = transpose_last2(g.data(), b, c, n);
            vec![Some(Tensor::from_vec(&[b, n, c], d).unwrap())]
        }))
    }

    /// Matrix transpose of a rank-2 variable.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let out = Tensor::from_vec(&[c, r], transpose_last2(x.data(), 1, r, c))?;
        Ok(self.tape.op(out, &[*self], move |g| {
            vec![Some(Tensor::from_vec(&[r, c], transpose_last2(g.data(), 1, c, r)).unwrap())]
        }))
    }
}

/// Transposes each of `batch` row-major `rows×cols` matrices.
pub(crate) fn transpose_last2<T: Copy>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for m in src.chunks(rows * cols).take(batch) {
        for c in 0..cols {
            for r in 0..rows {
                out.push(m[r * cols + c]);
            }
        }
    }
    out
}
