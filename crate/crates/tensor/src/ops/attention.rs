use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

fn dims3<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 3,
            actual: t.shape().to_vec(),
        }),
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Softmax row `i` of `scale·Q·Kᵀ` into `p`.
fn prob_row<T: Scalar>(q: &[T], k: &[T], d: usize, scale: T, p: &mut [T]) {
    let mut mx = T::neg_infinity();
    for (j, pj) in p.iter_mut().enumerate() {
        *pj = scale * dot(q, &k[j * d..(j + 1) * d]);
        mx = mx.max(*pj);
    }
    let mut z = T::zero();
    for pj in p.iter_mut() {
        *pj = (*pj - mx).exp();
        z += *pj;
    }
    for pj in p.iter_mut() {
        *pj /= z;
    }
}

/// Row-stochastic attention matrices `softmax(scale·Q·Kᵀ)`, (B, N, M).
pub fn attention_probs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (b, n, d) = dims3(q, "attention_probs")?;
    let (b2, m, d2) = dims3(k, "attention_probs")?;
    if b != b2 || d != d2 {
        return Err(TensorError::mismatch("attention_probs", q.shape(), k.shape()));
    }
    let mut out = vec![T::zero(); b * n * m];
    for bi in 0..b {
        let kb = &k.data()[bi * m * d..(bi + 1) * m * d];
        for i in 0..n {
            let qi = &q.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
            prob_row(qi, kb, d, scale, &mut out[(bi * n + i) * m..(bi * n + i + 1) * m]);
        }
    }
    Tensor::from_vec(&[b, n, m], out)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `softmax(scale·Q·Kᵀ)·V` for Q (B, N, d), K (B, M, d), V (B, M, e).
    ///
    /// At most `chunk` rows of the attention matrix are materialized at a
    /// time. Every output row and every gradient accumulation follows the same
    /// arithmetic order for any chunk size, so results are bit-identical
    /// across chunkings.
    pub fn attention(&self, k: &Var<'t, T>, v: &Var<'t, T>, scale: T, chunk: usize) -> Result<Var<'t, T>> {
        let (qt, kt, vt) = (self.value(), k.value(), v.value());
        let (b, n, d) = dims3(&qt, "attention")?;
        let (bk, m, dk) = dims3(&kt, "attention")?;
        let (bv, mv, e) = dims3(&vt, "attention")?;
        if bk != b || bv != b || dk != d || mv != m {
            return Err(TensorError::invalid(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qt.shape(), kt.shape(), vt.shape()),
            ));
        }
        let chunk = chunk.max(1);
        let mut out = vec![T::zero(); b * n * e];
        let mut probs = vec![T::zero(); chunk.min(n) * m];
        for bi in 0..b {
            let kb = &kt.data()[bi * m * d..(bi + 1) * m * d];
            let vb = &vt.data()[bi * m * e..(bi + 1) * m * e];
            for start in (0..n).step_by(chunk) {
                let rows = chunk.min(n - start);
                for r in 0..rows {
                    let i = start + r;
                    let qi = &qt.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                    prob_row(qi, kb, d, scale, &mut probs[r * m..(r + 1) * m]);
                }
                for r in 0..rows {
                    let i = start + r;
                    let oi = &mut out[(bi * n + i) * e..(bi * n + i + 1) * e];
                    for (j, &p) in probs[r * m..(r + 1) * m].iter().enumerate() {
                        for (o, &vj) in oi.iter_mut().zip(&vb[j * e..(j + 1) * e]) {
                            *o += p * vj;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[b, n, e], out)?;
        Ok(self.tape.op(out, &[*self, *k, *v], move |g| {
            let mut dq = vec![T::zero(); b * n * d];
            let mut dkk = vec![T::zero(); b * m * d];
            let mut dv = vec![T::zero(); b * m * e];
            let mut probs = vec![T::zero(); chunk.min(n) * m];
            let mut ds = vec![T::zero(); m];
            for bi in 0..b {
                let kb = &kt.data()[bi * m * d..(bi + 1) * m * d];
                let vb = &vt.data()[bi * m * e..(bi + 1) * m * e];
                let dkb = &mut dkk[bi * m * d..(bi + 1) * m * d];
                let dvb = &mut dv[bi * m * e..(bi + 1) * m * e];
                for start in (0..n).step_by(chunk) {
                    let rows = chunk.min(n - start);
                    for r in 0..rows {
                        let i = start + r;
                        let qi = &qt.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                        prob_row(qi, kb, d, scale, &mut probs[r * m..(r + 1) * m]);
                    }
                    for r in 0..rows {
                        let i = start + r;
                        let p = &probs[r * m..(r + 1) * m];
                        let gi = &g.data()[(bi * n + i) * e..(bi * n + i + 1) * e];
                        let qi = &qt.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                        let mut rowdot = T::zero();
                        for (j, dsj) in ds.iter_mut().enumerate() {
                            *dsj = dot(gi, &vb[j * e..(j + 1) * e]);
                            rowdot += p[j] * *dsj;
                        }
                        let dqi = &mut dq[(bi * n + i) * d..(bi * n + i + 1) * d];
                        for j in 0..m {
                            let s = p[j] * (ds[j] - rowdot) * scale;
                            let kj = &kb[j * d..(j + 1) * d];
                            for c in 0..d {
                                dqi[c] += s * kj[c];
                                dkb[j * d + c] += s * qi[c];
                            }
                            let pj = p[j];
                            for (dvv, &gg) in dvb[j * e..(j + 1) * e].iter_mut().zip(gi) {
                                *dvv += pj * gg;
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&[b, n, d], dq).unwrap()),
                Some(Tensor::from_vec(&[b, m, d], dkk).unwrap()),
                Some(Tensor::from_vec(&[b, m, e], dv).unwrap()),
            ]
        }))
    }
}
