//! Generator and discriminator objectives: the similarity-weighted patch L1,
//! least-squares adversarial terms and their combination.

use serde::{Deserialize, Serialize};
use stainfuse_tensor::{Scalar, Tensor, Var};

use crate::encoders::EncoderModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveL1Config {
    pub alpha: f64,
    pub beta: f64,
    /// Patch grid as (rows, cols).
    pub grid: [usize; 2],
}

impl Default for AdaptiveL1Config {
    fn default() -> Self {
        Self {
            alpha: 50.0,
            beta: 50.0,
            grid: [4, 4],
        }
    }
}

impl AdaptiveL1Config {
    pub fn validate(&self) -> Result<()> {
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return Err(Error::Config("adaptive L1 grid must be at least 1x1".into()));
        }
        // The weight is affine in s, so checking both ends covers [−1, 1].
        if self.alpha - self.beta < 0.0 || self.alpha + self.beta < 0.0 {
            return Err(Error::Config(format!(
                "adaptive L1 weights alpha + beta*s must stay >= 0 on [-1, 1] (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn weight(&self, sim: f64) -> f64 {
        self.alpha + self.beta * sim
    }
}

/// Maps a batch of image patches (n, C, h, w) to embeddings (n, D).
pub trait PatchEmbedder<T: Scalar> {
    fn embed_patches(&self, patches: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A frozen encoder embeds patches after resizing them to its input size.
impl<T: Scalar> PatchEmbedder<T> for EncoderModel<T> {
    fn embed_patches(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config().image_size;
        let resized = patches.resize_bilinear(s, s)?;
        self.encode(&resized)
    }
}

fn patch_dims(shape: &[usize], grid: [usize; 2], op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    let [b, c, h, w] = shape[..] else {
        return Err(Error::shape(op, "(B, C, H, W)", shape));
    };
    if grid[0] == 0 || grid[1] == 0 || h % grid[0] != 0 || w % grid[1] != 0 {
        return Err(Error::Shape {
            op,
            expected: format!("spatial dims divisible by the {}x{} grid", grid[0], grid[1]),
            actual: format!("{h}x{w}"),
        });
    }
    Ok((b, c, h / grid[0], w / grid[1], grid[0] * grid[1]))
}

/// Splits (B, C, H, W) into (B·n, C, H/rows, W/cols) patches, batch-major,
/// grid cells in row-major order.
pub fn split_patches<T: Scalar>(x: &Tensor<T>, grid: [usize; 2]) -> Result<Tensor<T>> {
    let (b, _, ph, pw, _) = patch_dims(x.shape(), grid, "split_patches")?;
    let mut items = Vec::with_capacity(b * grid[0] * grid[1]);
    for bi in 0..b {
        let img = x.batch_item(bi)?;
        for r in 0..grid[0] {
            for c in 0..grid[1] {
                items.push(img.crop(r * ph, c * pw, ph, pw)?);
            }
        }
    }
    Ok(Tensor::stack_batch(&items)?)
}

/// Row-wise cosine similarity of two (n, D) matrices, clamped to [−1, 1].
pub fn cosine_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
    }
    let d = a.shape()[1];
    Ok(a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(&p, &q)| (p * q).to_f64_lossy()).sum();
            let nx = x.iter().map(|&p| (p * p).to_f64_lossy()).sum::<f64>().sqrt();
            let ny = y.iter().map(|&q| (q * q).to_f64_lossy()).sum::<f64>().sqrt();
            let s = if nx > 0.0 && ny > 0.0 { dot / (nx * ny) } else { 0.0 };
            s.clamp(-1.0, 1.0)
        })
        .collect())
}

/// Sim_i for every patch of every batch item, batch-major. Computed from
/// values only; no gradient flows through it.
pub fn patch_similarities<T: Scalar, E: PatchEmbedder<T> + ?Sized>(
    gen: &Tensor<T>,
    gt: &Tensor<T>,
    embedder: &E,
    grid: [usize; 2],
) -> Result<Vec<f64>> {
    if gen.shape() != gt.shape() {
        return Err(Error::shape("patch_similarities", gt.shape(), gen.shape()));
    }
    let eg = embedder.embed_patches(&split_patches(gen, grid)?)?;
    let et = embedder.embed_patches(&split_patches(gt, grid)?)?;
    cosine_rows(&eg, &et)
}

/// `(1/(B·n)) Σ_i w_i · meanAbs(gen_i − gt_i)` over the grid patches of every
/// batch item, with one weight per patch (batch-major).
pub fn weighted_patch_l1<'t, T: Scalar>(
    gen: Var<'t, T>,
    gt: &Tensor<T>,
    weights: &[f64],
    grid: [usize; 2],
) -> Result<Var<'t, T>> {
    let g = gen.value();
    if g.shape() != gt.shape() {
        return Err(Error::shape("weighted_patch_l1", gt.shape(), g.shape()));
    }
    let (b, c, ph, pw, n) = patch_dims(g.shape(), grid, "weighted_patch_l1")?;
    if weights.len() != b * n {
        return Err(Error::shape("weighted_patch_l1 weights", b * n, weights.len()));
    }
    let (h, w) = (ph * grid[0], pw * grid[1]);
    let cols = grid[1];
    // Per-pixel coefficient w_patch / (B·n·patch_numel).
    let norm = 1.0 / (b * n * c * ph * pw) as f64;
    let pix_w: Vec<T> = {
        let mut v = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    v.push(T::lit(weights[bi * n + (y / ph) * cols + x / pw] * norm));
                }
            }
        }
        v
    };
    let mut loss = T::zero();
    let plane = h * w;
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in 0..plane {
                loss += pix_w[bi * plane + i] * (g.data()[off + i] - gt.data()[off + i]).abs();
            }
        }
    }
    let gt = gt.clone();
    let shape = g.shape().to_vec();
    Ok(gen.tape().op(Tensor::scalar(loss), &[gen], move |up| {
        let s = up.data()[0];
        let mut d = Vec::with_capacity(g.len());
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in 0..plane {
                    let diff = g.data()[off + i] - gt.data()[off + i];
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    d.push(s * pix_w[bi * plane + i] * sign);
                }
            }
        }
        vec![Some(Tensor::from_vec(&shape, d).unwrap())]
    }))
}

/// Adaptive L1 between generated and ground-truth images. Returns the loss
/// and the per-patch similarities that set its weights.
pub fn adaptive_l1_loss<'t, T: Scalar, E: PatchEmbedder<T> + ?Sized>(
    gen: Var<'t, T>,
    gt: &Tensor<T>,
    embedder: &E,
    cfg: &AdaptiveL1Config,
) -> Result<(Var<'t, T>, Vec<f64>)> {
    cfg.validate()?;
    let sims = patch_similarities(&gen.value(), gt, embedder, cfg.grid)?;
    let weights: Vec<f64> = sims.iter().map(|&s| cfg.weight(s)).collect();
    Ok((weighted_patch_l1(gen, gt, &weights, cfg.grid)?, sims))
}

/// Mean absolute error.
pub fn plain_l1<'t, T: Scalar>(gen: Var<'t, T>, gt: &Tensor<T>) -> Result<Var<'t, T>> {
    if gen.shape() != gt.shape() {
        return Err(Error::shape("plain_l1", gt.shape(), gen.shape()));
    }
    Ok(gen.sub(&gen.tape().constant(gt.clone()))?.abs().mean())
}

/// `½·mean((d_real − 1)²) + ½·mean(d_fake²)`.
pub fn lsgan_d_loss<'t, T: Scalar>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    let half = T::lit(0.5);
    let r = d_real.add_scalar(-T::one()).square().mean().mul_scalar(half);
    let f = d_fake.square().mean().mul_scalar(half);
    Ok(r.add(&f)?)
}

/// `½·mean((d_fake − 1)²)`, the same scaling as each term of the
/// discriminator loss.
pub fn lsgan_g_loss<'t, T: Scalar>(d_fake: Var<'t, T>) -> Var<'t, T> {
    d_fake.add_scalar(-T::one()).square().mean().mul_scalar(T::lit(0.5))
}

#[derive(Debug, Clone, Copy)]
pub struct GanLosses<'t, T: Scalar> {
    pub g_adv: Var<'t, T>,
    pub d_loss: Var<'t, T>,
}

pub fn gan_losses<'t, T: Scalar>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<GanLosses<'t, T>> {
    Ok(GanLosses {
        g_adv: lsgan_g_loss(d_fake),
        d_loss: lsgan_d_loss(d_real, d_fake)?,
    })
}

/// `g_adv + λ_L1 · l1`.
pub fn total_generator_loss<'t, T: Scalar>(g_adv: Var<'t, T>, l1: Var<'t, T>, lambda_l1: f64) -> Result<Var<'t, T>> {
    if !(lambda_l1 >= 0.0) {
        return Err(Error::Config(format!("lambda_l1 must be >= 0, got {lambda_l1}")));
    }
    Ok(g_adv.add(&l1.mul_scalar(T::lit(lambda_l1)))?)
}
