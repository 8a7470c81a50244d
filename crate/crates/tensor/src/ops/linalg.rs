use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    /// (M, K) · (K, N).
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(TensorError::invalid("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.tape.op(out, &[*self, *other], move |g| {
            let mut da = vec![T::zero(); m * k];
            let mut db = vec![T::zero(); k * n];
            // dA = G·Bᵀ, dB = Aᵀ·G
            T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
            T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
            vec![
                Some(Tensor::from_vec(&[m, k], da).unwrap()),
                Some(Tensor::from_vec(&[k, n], db).unwrap()),
            ]
        }))
    }

    /// Affine map of row vectors: `x·Wᵀ + b` with `x` (B, in), `W` (out, in).
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (bsz, fin) = x.dims2()?;
        let (fout, fin2) = w.dims2()?;
        if fin != fin2 {
            return Err(TensorError::invalid("linear", format!("input width {fin}, weight expects {fin2}")));
        }
        let mut out = vec![T::zero(); bsz * fout];
        if let Some(bv) = bias {
            let bt = bv.value();
            bt.expect_shape("linear bias", &[fout])?;
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bt.data());
            }
        }
        T::gemm(bsz, fin, fout, T::one(), x.data(), fin as isize, 1, w.data(), 1, fin as isize, T::one(), &mut out, fout as isize, 1);
        let out = Tensor::from_vec(&[bsz, fout], out)?;
        let mut parents = vec![*self, *weight];
        if let Some(bv) = bias {
            parents.push(*bv);
        }
        let has_bias = bias.is_some();
        Ok(self.tape.op(out, &parents, move |g| {
            let mut dx = vec![T::zero(); bsz * fin];
            let mut dw = vec![T::zero(); fout * fin];
            T::gemm(bsz, fout, fin, T::one(), g.data(), fout as isize, 1, w.data(), fin as isize, 1, T::zero(), &mut dx, fin as isize, 1);
            T::gemm(fout, bsz, fin, T::one(), g.data(), 1, fout as isize, x.data(), fin as isize, 1, T::zero(), &mut dw, fin as isize, 1);
            let mut grads = vec![
                Some(Tensor::from_vec(&[bsz, fin], dx).unwrap()),
                Some(Tensor::from_vec(&[fout, fin], dw).unwrap()),
            ];
            if has_bias {
                let mut db = vec![T::zero(); fout];
                for row in g.data().chunks(fout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads.push(Some(Tensor::from_vec(&[fout], db).unwrap()));
            }
            grads
        }))
    }

    /// Scales every row of a (R, C) variable to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let norms: Vec<T> = x
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let mut out = Vec::with_capacity(r * c);
        for (row, &n) in x.data().chunks(c).zip(&norms) {
            out.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::from_vec(&[r, c], out)?;
        let y = out.clone();
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut dx = Vec::with_capacity(r * c);
            for ((gr, yr), &n) in g.data().chunks(c).zip(y.data().chunks(c)).zip(&norms) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                if n > eps {
                    dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * dot) / n));
                } else {
                    dx.extend(gr.iter().map(|&gi| gi / n));
                }
            }
            vec![Some(Tensor::from_vec(&[r, c], dx).unwrap())]
        }))
    }

    /// Row-wise log-softmax of a (R, C) variable.
    pub fn log_softmax_rows(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for row in x.data().chunks(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::from_vec(&[r, c], out)?;
        let y = out.clone();
        Ok(self.tape.op(out, &[*self], move |g| {
            let mut dx = Vec::with_capacity(r * c);
            for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                let s: T = gr.iter().copied().sum();
                dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * s));
            }
            vec![Some(Tensor::from_vec(&[r, c], dx).unwrap())]
        }))
    }
}
