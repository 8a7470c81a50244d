//! PSNR, SSIM and Fréchet distance between feature distributions, plus
//! report tables.
//!
//! Conventions: images are compared in [0, 1]; PSNR is capped at
//! [`PSNR_CAP_DB`]; SSIM uses an 11×11 Gaussian window (σ = 1.5,
//! K₁ = 0.01, K₂ = 0.03) over luma with valid-region filtering; the FID
//! matrix square root clamps eigenvalues below [`EIGEN_FLOOR`].

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::{Scalar, Tensor};

use crate::data::{list_images, load_image, to_unit_range};
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const EIGEN_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `10·log₁₀(max_val² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::Data("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// Luma planes (ITU-R BT.601 weights) of a (B, 3, H, W) or (B, 1, H, W)
/// tensor.
fn luma_planes<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let d = x.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        match c {
            1 => out.extend(d[bi * plane..(bi + 1) * plane].iter().map(|v| v.to_f64_lossy())),
            3 => {
                let base = bi * 3 * plane;
                for i in 0..plane {
                    let r = d[base + i].to_f64_lossy();
                    let g = d[base + plane + i].to_f64_lossy();
                    let bl = d[base + 2 * plane + i].to_f64_lossy();
                    out.push(0.299 * r + 0.587 * g + 0.114 * bl);
                }
            }
            _ => return Err(Error::shape("ssim channels", "1 or 3", c)),
        }
    }
    Ok((b, h, w, out))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|j| k[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM over the batch, on luma, for data in
/// `[0, data_range]`.
pub fn ssim_with_range<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (n, h, w, la) = luma_planes(a)?;
    let (_, _, _, lb) = luma_planes(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            op: "ssim",
            expected: format!("images at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            actual: format!("{h}x{w}"),
        });
    }
    let k = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for bi in 0..n {
        let x = &la[bi * plane..(bi + 1) * plane];
        let y = &lb[bi * plane..(bi + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let [mx, my, exx, eyy, exy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|p| filter_valid(p, h, w, &k));
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ma, mb) = (mx[i], my[i]);
            let va = exx[i] - ma * ma;
            let vb = eyy[i] - mb * mb;
            let cov = exy[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / n as f64)
}

/// SSIM for images in [0, 1].
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with_range(a, b, 1.0)
}

/// Mean and unbiased covariance of feature rows.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Data(format!("Fréchet distance needs at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Data("feature vectors must be non-empty and of equal length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|l| l.max(EIGEN_FLOOR).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// Fréchet distance between N(μ₁, Σ₁) and N(μ₂, Σ₂):
/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace of the root
/// computed as `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, which is symmetric.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::shape("frechet_distance", d, mu2.len()));
    }
    let a = sym_sqrt(s1);
    let inner = &a * s2 * &a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    let v = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_root;
    if !v.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(v.max(0.0))
}

/// FID between two sets of feature vectors.
pub fn fid_from_features(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = feature_stats(real)?;
    let (m2, s2) = feature_stats(fake)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Image → feature vector map used by FID. Inputs are (1, 3, H, W) in [0, 1].
pub trait FeatureExtractor {
    fn extract(&self, image: &Tensor<f64>) -> Result<Vec<f64>>;
    fn name(&self) -> &str;
}

/// Fixed, seeded random convolutional features: three 3×3 stride-2 ReLU
/// layers on a 64×64 resize, summarized by per-channel mean and standard
/// deviation. Needs no downloaded weights, so FID is reproducible offline;
/// absolute values are not comparable with Inception-based FID.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    weights: Vec<(Tensor<f64>, usize)>,
    size: usize,
}

impl RandomConvFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 32, 48];
        let weights = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] * 9) as f64).sqrt();
                (Tensor::randn(&[w[1], w[0], 3, 3], std, &mut rng), w[1])
            })
            .collect();
        Self { weights, size: 64 }
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new(0x00f1d)
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn extract(&self, image: &Tensor<f64>) -> Result<Vec<f64>> {
        let tape = stainfuse_tensor::Tape::no_grad();
        let x = image.resize_bilinear(self.size, self.size)?.map(|v| v * 2.0 - 1.0);
        let mut h = tape.constant(x);
        for (w, _) in &self.weights {
            h = h.conv2d(&tape.constant(w.clone()), None, 2, 1)?.relu();
        }
        let v = h.value();
        let (_, c, hh, ww) = v.dims4()?;
        let plane = hh * ww;
        let mut f = Vec::with_capacity(2 * c);
        for p in v.data().chunks(plane) {
            let m = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane as f64;
            f.push(m);
            f.push(var.sqrt());
        }
        Ok(f)
    }

    fn name(&self) -> &str {
        "random-conv-48x2"
    }
}

pub fn fid<E: FeatureExtractor + ?Sized>(real: &[Tensor<f64>], fake: &[Tensor<f64>], extractor: &E) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Data("FID needs at least 2 images per set".into()));
    }
    let fr = real.iter().map(|x| extractor.extract(x)).collect::<Result<Vec<_>>>()?;
    let ff = fake.iter().map(|x| extractor.extract(x)).collect::<Result<Vec<_>>>()?;
    fid_from_features(&fr, &ff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub key: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Absent when fewer than two images were compared.
    pub fid: Option<f64>,
    pub fid_features: String,
    pub n_images: usize,
    pub per_image: Vec<ImageRecord>,
}

impl MetricReport {
    /// Metrics over matched (prediction, ground truth) pairs in [0, 1].
    pub fn compute<E: FeatureExtractor + ?Sized>(
        keys: &[String],
        pred: &[Tensor<f64>],
        gt: &[Tensor<f64>],
        extractor: &E,
    ) -> Result<Self> {
        if pred.is_empty() || pred.len() != gt.len() || keys.len() != pred.len() {
            return Err(Error::Data("metric report needs equally many keys, predictions and targets".into()));
        }
        let mut per_image = Vec::with_capacity(pred.len());
        for ((k, p), g) in keys.iter().zip(pred).zip(gt) {
            per_image.push(ImageRecord {
                key: k.clone(),
                psnr: psnr(p, g, 1.0)?,
                ssim: ssim(p, g)?,
            });
        }
        let n = per_image.len() as f64;
        let fid = if pred.len() >= 2 { Some(fid(gt, pred, extractor)?) } else { None };
        Ok(Self {
            psnr_mean: per_image.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim_mean: per_image.iter().map(|r| r.ssim).sum::<f64>() / n,
            fid,
            fid_features: extractor.name().to_string(),
            n_images: per_image.len(),
            per_image,
        })
    }
}

/// Aligned plain-text table with one row per method: PSNR, SSIM, FID.
pub fn format_table(title: &str, rows: &[(String, &MetricReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<name_w$}  {:>8}  {:>7}  {:>9}", "Method", "PSNR", "SSIM", "FID");
    let _ = writeln!(s, "{}", "-".repeat(name_w + 2 + 8 + 2 + 7 + 2 + 9));
    for (name, r) in rows {
        let fid = r.fid.map_or_else(|| "n/a".to_string(), |f| format!("{f:.3}"));
        let _ = writeln!(s, "{:<name_w$}  {:>8.3}  {:>7.3}  {:>9}", name, r.psnr_mean, r.ssim_mean, fid);
    }
    s
}

/// Compares same-named images of two directories.
pub fn evaluate_dirs<E: FeatureExtractor + ?Sized>(pred_dir: &Path, gt_dir: &Path, extractor: &E) -> Result<MetricReport> {
    let pred = list_images(pred_dir)?;
    let gt = list_images(gt_dir)?;
    let mut keys = Vec::new();
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (k, pp) in &pred {
        let Some(gp) = gt.get(k) else {
            log::warn!("{}: no ground truth for '{k}', skipped", gt_dir.display());
            continue;
        };
        let a = to_unit_range(&load_image::<f64>(pp)?);
        let b = to_unit_range(&load_image::<f64>(gp)?);
        if a.shape() != b.shape() {
            return Err(Error::Data(format!("'{k}': prediction {:?} vs ground truth {:?}", a.shape(), b.shape())));
        }
        keys.push(k.clone());
        p.push(a);
        g.push(b);
    }
    if keys.is_empty() {
        return Err(Error::Data(format!(
            "no matching file names between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    MetricReport::compute(&keys, &p, &g, extractor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_arithmetic() {
        let a = Tensor::<f64>::full(&[1, 1, 4, 4], 10.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 1.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-3);
        assert!(psnr(&a, &Tensor::zeros(&[1, 1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_small_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let small = Tensor::<f64>::zeros(&[1, 1, 10, 16]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn fid_needs_two_samples() {
        assert!(fid_from_features(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn table_has_one_row_per_method() {
        let r = MetricReport {
            psnr_mean: 20.0,
            ssim_mean: 0.5,
            fid: None,
            fid_features: "x".into(),
            n_images: 1,
            per_image: vec![],
        };
        let t = format_table("t", &[("a".into(), &r), ("b".into(), &r)]);
        assert_eq!(t.lines().count(), 5);
    }
}
