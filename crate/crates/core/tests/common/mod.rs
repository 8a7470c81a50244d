//! Reference implementations written as plain loops, independent of the
//! library code paths they are compared against.
#![allow(dead_code)]

use stainfuse_core::attention::CrossAttention;
use stainfuse_core::losses::PatchEmbedder;
use stainfuse_core::tensor::gradcheck::{numerical_grad, rel_err};
use stainfuse_core::tensor::{ParamId, ParamStore, Tensor};
use stainfuse_core::vmfe::ConvGru;

/// 1-D orthonormal Haar analysis matrix: averages in the top half, details
/// in the bottom half.
pub fn haar_matrix(n: usize) -> Vec<Vec<f64>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = vec![vec![0.0; n]; n];
    for k in 0..n / 2 {
        m[k][2 * k] = s;
        m[k][2 * k + 1] = s;
        m[n / 2 + k][2 * k] = s;
        m[n / 2 + k][2 * k + 1] = -s;
    }
    m
}

/// `A_H · X · A_Wᵀ` for one (H, W) plane, split into its four quadrants
/// (LL, LH, HL, HH); LH is low-pass along width and high-pass along height.
pub fn haar_plane_oracle(x: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (ah, aw) = (haar_matrix(h), haar_matrix(w));
    let mut y = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for p in 0..h {
                for q in 0..w {
                    acc += ah[i][p] * x[p * w + q] * aw[j][q];
                }
            }
            y[i * w + j] = acc;
        }
    }
    let (h2, w2) = (h / 2, w / 2);
    let quad = |r0: usize, c0: usize| {
        let mut v = Vec::with_capacity(h2 * w2);
        for i in 0..h2 {
            for j in 0..w2 {
                v.push(y[(r0 + i) * w + c0 + j]);
            }
        }
        v
    };
    [quad(0, 0), quad(h2, 0), quad(0, w2), quad(h2, w2)]
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Centre tap of a 3×3 convolution applied to a 1×1 input: `W[:, :, 1, 1]·v + b`.
fn centre_tap(store: &ParamStore<f64>, weight: ParamId, bias: Option<ParamId>, v: &[f64]) -> Vec<f64> {
    let w = store.get(weight);
    let s = w.shape();
    let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
    (0..o)
        .map(|oi| {
            let mut acc = bias.map_or(0.0, |b| store.get(b).data()[oi]);
            for ci in 0..c {
                acc += w.data()[((oi * c + ci) * kh + kh / 2) * kw + kw / 2] * v[ci];
            }
            acc
        })
        .collect()
}

/// A dense GRU cell: the convolutional GRU restricted to 1×1 maps.
pub fn gru_oracle(store: &ParamStore<f64>, gru: &ConvGru, h: &[f64], x: &[f64]) -> Vec<f64> {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let z: Vec<f64> = centre_tap(store, gru.update.weight, gru.update.bias, &xh).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = centre_tap(store, gru.reset.weight, gru.reset.bias, &xh).into_iter().map(sigmoid).collect();
    let xrh: Vec<f64> = x.iter().copied().chain(r.iter().zip(h).map(|(a, b)| a * b)).collect();
    let cand: Vec<f64> = centre_tap(store, gru.candidate.weight, gru.candidate.bias, &xrh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

fn conv1x1(store: &ParamStore<f64>, weight: ParamId, bias: Option<ParamId>, v: &[f64]) -> Vec<f64> {
    let w = store.get(weight);
    let (o, c) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|oi| bias.map_or(0.0, |b| store.get(b).data()[oi]) + (0..c).map(|ci| w.data()[oi * c + ci] * v[ci]).sum::<f64>())
        .collect()
}

/// Eval-mode cross-attention fusion for a batch of one, by explicit loops
/// over tokens.
pub fn attention_oracle(store: &ParamStore<f64>, att: &CrossAttention, f_gen: &Tensor<f64>, f_enc: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (f_gen.shape()[1], f_gen.shape()[2], f_gen.shape()[3]);
    let ce = f_enc.shape()[1];
    let n = h * w;
    let token = |t: &Tensor<f64>, ch: usize, i: usize| (0..ch).map(|k| t.data()[k * n + i]).collect::<Vec<_>>();
    let q: Vec<Vec<f64>> = (0..n).map(|i| conv1x1(store, att.q_proj.weight, att.q_proj.bias, &token(f_gen, c, i))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| conv1x1(store, att.k_proj.weight, att.k_proj.bias, &token(f_enc, ce, i))).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| conv1x1(store, att.v_proj.weight, att.v_proj.bias, &token(f_enc, ce, i))).collect();
    let d = q[0].len() as f64;
    let rm = store.buffer(att.bn.running_mean);
    let rv = store.buffer(att.bn.running_var);
    let gamma = store.get(att.bn.gamma);
    let beta = store.get(att.bn.beta);
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut a = vec![0.0; v[0].len()];
        for j in 0..n {
            for (ak, vk) in a.iter_mut().zip(&v[j]) {
                *ak += e[j] / z * vk;
            }
        }
        let o = conv1x1(store, att.out_proj.weight, att.out_proj.bias, &a);
        for ch in 0..c {
            let bn = (o[ch] - rm.data()[ch]) / (rv.data()[ch] + att.bn.eps).sqrt() * gamma.data()[ch] + beta.data()[ch];
            out[ch * n + i] = f_gen.data()[ch * n + i] + att.alpha * bn;
        }
    }
    out
}

/// Patch embedder whose embedding is (channel means, 1); the oracle below
/// recomputes it by hand.
pub struct MeanEmbedder;

pub fn mean_embedding(patch: &[f64], channels: usize) -> Vec<f64> {
    let per = patch.len() / channels;
    let mut e: Vec<f64> = (0..channels).map(|c| patch[c * per..(c + 1) * per].iter().sum::<f64>() / per as f64).collect();
    e.push(1.0);
    e
}

impl PatchEmbedder<f64> for MeanEmbedder {
    fn embed_patches(&self, patches: &Tensor<f64>) -> stainfuse_core::Result<Tensor<f64>> {
        let s = patches.shape();
        let (n, c) = (s[0], s[1]);
        let per = patches.len() / n;
        let mut out = Vec::with_capacity(n * (c + 1));
        for p in patches.data().chunks(per) {
            out.extend(mean_embedding(p, c));
        }
        Ok(Tensor::from_vec(&[n, c + 1], out)?)
    }
}

/// Embedder returning the same vector for every patch.
pub struct ConstEmbedder(pub Vec<f64>);

impl PatchEmbedder<f64> for ConstEmbedder {
    fn embed_patches(&self, patches: &Tensor<f64>) -> stainfuse_core::Result<Tensor<f64>> {
        let n = patches.shape()[0];
        let data = (0..n).flat_map(|_| self.0.iter().copied()).collect();
        Ok(Tensor::from_vec(&[n, self.0.len()], data)?)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `(1/(B·n)) Σ (α + β·cos(e(gen_i), e(gt_i))) · meanAbs(gen_i − gt_i)` with
/// patches cut by explicit index arithmetic.
pub fn adaptive_l1_oracle(gen: &Tensor<f64>, gt: &Tensor<f64>, grid: [usize; 2], alpha: f64, beta: f64) -> f64 {
    let s = gen.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h / grid[0], w / grid[1]);
    let patch = |t: &Tensor<f64>, bi: usize, r: usize, q: usize| {
        let mut v = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    v.push(t.data()[((bi * c + ch) * h + r * ph + y) * w + q * pw + x]);
                }
            }
        }
        v
    };
    let mut total = 0.0;
    for bi in 0..b {
        for r in 0..grid[0] {
            for q in 0..grid[1] {
                let (a, g) = (patch(gen, bi, r, q), patch(gt, bi, r, q));
                let sim = cosine(&mean_embedding(&a, c), &mean_embedding(&g, c));
                let mae = a.iter().zip(&g).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
                total += (alpha + beta * sim) * mae;
            }
        }
    }
    total / (b * grid[0] * grid[1]) as f64
}

/// Closed-form Fréchet distance between 2-D Gaussians, using
/// `Tr √M = √(tr M + 2√det M)` for a 2×2 matrix with positive eigenvalues.
pub fn frechet_2d(mu1: [f64; 2], s1: [[f64; 2]; 2], mu2: [f64; 2], s2: [[f64; 2]; 2]) -> f64 {
    let m = [
        [
            s1[0][0] * s2[0][0] + s1[0][1] * s2[1][0],
            s1[0][0] * s2[0][1] + s1[0][1] * s2[1][1],
        ],
        [
            s1[1][0] * s2[0][0] + s1[1][1] * s2[1][0],
            s1[1][0] * s2[0][1] + s1[1][1] * s2[1][1],
        ],
    ];
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let tr_sqrt = (tr + 2.0 * det.sqrt()).sqrt();
    let dmu = (mu1[0] - mu2[0]).powi(2) + (mu1[1] - mu2[1]).powi(2);
    dmu + s1[0][0] + s1[1][1] + s2[0][0] + s2[1][1] - 2.0 * tr_sqrt
}

/// `2d` points whose sample mean is exactly `mu` and whose unbiased sample
/// covariance is exactly `L·Lᵀ`: `mu ± c·L[:, k]` with `c = √((2d − 1)/2)`.
pub fn points_with_moments(mu: &[f64], l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = mu.len();
    let c = ((2 * d - 1) as f64 / 2.0).sqrt();
    let mut pts = Vec::with_capacity(2 * d);
    for k in 0..d {
        for sign in [1.0, -1.0] {
            pts.push((0..d).map(|i| mu[i] + sign * c * l[i][k]).collect());
        }
    }
    pts
}

/// Relative error between the autodiff gradient of a parameter and central
/// differences of `loss` with respect to that parameter.
pub fn param_grad_rel_err(
    store: &ParamStore<f64>,
    id: ParamId,
    analytic: &Tensor<f64>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> f64 {
    let base = store.get(id).clone();
    let numeric = numerical_grad(&base, 1e-6, |p| {
        let mut s = store.clone();
        *s.get_mut(id) = p.clone();
        loss(&s)
    });
    rel_err(analytic, &numeric)
}
