//! Paired H&E / IHC encoders trained with a symmetric InfoNCE objective plus
//! an L2 weight penalty, then frozen for feature guidance and patch
//! similarity.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::nn::{Conv2d, Init, Linear};
use stainfuse_tensor::optim::{Adam, AdamConfig};
use stainfuse_tensor::{Ctx, Mode, ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

use crate::data::PairedSample;
use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of the four stride-2 stages.
    pub widths: [usize; 4],
    pub proj_hidden: usize,
    pub embed_dim: usize,
    /// Side length patches are resized to before embedding.
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [32, 64, 128, 256],
            proj_hidden: 256,
            embed_dim: 256,
            image_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub l2_reg: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Random horizontal flips, applied identically to both images of a pair.
    pub flip: bool,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            temperature: 0.07,
            l2_reg: 1e-4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            flip: true,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.l2_reg >= 0.0) {
            return Err(Error::Config(format!("l2_reg must be >= 0, got {}", self.l2_reg)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("encoder batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Four 4×4 stride-2 convolutions with leaky rectifiers, global average
/// pooling and a two-layer projection head onto the unit sphere.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Conv2d>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let conv_init = Init::Uniform { gain: 2f64.sqrt() };
        let mut cin = config.in_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("{name}.stage{}", i + 1), cin, w, 4, 2, 1, true, conv_init, rng));
            cin = w;
        }
        let lin_init = Init::Uniform { gain: 1.0 };
        let head_hidden = Linear::new(store, &format!("{name}.head1"), cin, config.proj_hidden, true, lin_init, rng);
        let head_out = Linear::new(store, &format!("{name}.head2"), config.proj_hidden, config.embed_dim, true, lin_init, rng);
        Self {
            config,
            stages,
            head_hidden,
            head_out,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape("encode", format!("(B, {}, H, W)", self.config.in_channels), shape));
        }
        if shape[2] < 16 || shape[3] < 16 {
            return Err(Error::shape("encode", "spatial dims >= 16", shape));
        }
        Ok(())
    }

    /// Output of stage `stage` (1..=4), at 1/2^stage of the input scale.
    pub fn features<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>, stage: usize) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        if !(1..=self.stages.len()).contains(&stage) {
            return Err(Error::Config(format!("encoder stage {stage} out of range 1..=4")));
        }
        let slope = T::lit(0.2);
        let mut h = x;
        for conv in &self.stages[..stage] {
            h = conv.forward(cx, h)?.leaky_relu(slope);
        }
        Ok(h)
    }

    /// Unit-norm embeddings, (B, embed_dim).
    pub fn embed<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.features(cx, x, self.stages.len())?.global_avg_pool()?;
        let h = self.head_hidden.forward(cx, f)?.relu();
        let z = self.head_out.forward(cx, h)?;
        Ok(z.l2_normalize_rows(T::lit(NORM_FLOOR))?)
    }
}

/// An encoder together with its own parameters.
#[derive(Debug, Clone)]
pub struct EncoderModel<T: Scalar> {
    pub net: Encoder,
    pub store: ParamStore<T>,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, config: EncoderConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = Encoder::new(&mut store, name, config, rng);
        Self { net, store }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.net.config
    }

    /// Eval-mode embeddings without gradient tracking.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &self.store, Mode::Eval);
        let z = self.net.embed(&cx, tape.constant(x.clone()))?;
        Ok((*z.value()).clone())
    }

    pub fn feature_map(&self, x: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &self.store, Mode::Eval);
        let f = self.net.features(&cx, tape.constant(x.clone()), stage)?;
        Ok((*f.value()).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stain {
    He,
    Ihc,
}

/// Independent H&E and IHC encoders.
#[derive(Debug, Clone)]
pub struct DualEncoder<T: Scalar> {
    pub he: EncoderModel<T>,
    pub ihc: EncoderModel<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = EncoderModel::new("he", config.clone(), &mut rng);
        let ihc = EncoderModel::new("ihc", config, &mut rng);
        Self { he, ihc }
    }

    pub fn get(&self, stain: Stain) -> &EncoderModel<T> {
        match stain {
            Stain::He => &self.he,
            Stain::Ihc => &self.ihc,
        }
    }

    pub fn encode(&self, stain: Stain, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.get(stain).encode(x)
    }

    pub fn freeze(&mut self) {
        self.he.store.freeze();
        self.ihc.store.freeze();
    }
}

/// Symmetric InfoNCE between two (N, D) embedding batches whose rows are
/// paired by index. Rows are normalized internally, so similarities are
/// cosine similarities. Each anchor scores all N counterparts (its positive
/// and the N−1 in-batch negatives); the result averages both directions.
pub fn info_nce_loss<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, temperature: f64) -> Result<Var<'t, T>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("info_nce_loss", sa, sb));
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::Config("info_nce_loss needs at least 2 pairs for in-batch negatives".into()));
    }
    let eps = T::lit(NORM_FLOOR);
    let za = a.l2_normalize_rows(eps)?;
    let zb = b.l2_normalize_rows(eps)?;
    let logits = za.matmul(&zb.transpose()?)?.mul_scalar(T::lit(1.0 / temperature));
    let eye = {
        let mut e = Tensor::zeros(&[n, n]);
        for i in 0..n {
            e.set(&[i, i], T::one());
        }
        a.tape().constant(e)
    };
    let fwd = logits.log_softmax_rows()?.mul(&eye)?.sum();
    let bwd = logits.transpose()?.log_softmax_rows()?.mul(&eye)?.sum();
    Ok(fwd.add(&bwd)?.mul_scalar(T::lit(-0.5 / n as f64)))
}

/// `λ · Σ‖w‖²` over weight parameters of `store`; biases and normalization
/// parameters are excluded.
pub fn l2_penalty<'t, T: Scalar>(cx: &Ctx<'t, '_, T>, lambda: f64) -> Var<'t, T> {
    let mut total = cx.tape.constant(Tensor::scalar(T::zero()));
    if lambda == 0.0 {
        return total;
    }
    for (id, p) in cx.store.iter() {
        if p.kind == ParamKind::Weight {
            total = total.add(&cx.param(id).square().sum()).expect("scalar sum");
        }
    }
    total.mul_scalar(T::lit(lambda))
}

pub fn l2_penalty_value<T: Scalar>(store: &ParamStore<T>, lambda: f64) -> f64 {
    let s: f64 = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(_, p)| p.value().sum_sq().to_f64_lossy())
        .sum();
    lambda * s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpochRecord {
    pub epoch: usize,
    pub info_nce: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainLog {
    pub epochs: Vec<EncoderEpochRecord>,
}

/// Stacks the pair at `idx` into (B, 3, H, W) batches, flipping pairs where
/// `flips` says so.
fn make_batch<T: Scalar>(samples: &[PairedSample<T>], idx: &[usize], flips: &[bool]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut he = Vec::with_capacity(idx.len());
    let mut ihc = Vec::with_capacity(idx.len());
    for (&i, &f) in idx.iter().zip(flips) {
        let s = &samples[i];
        if f {
            he.push(s.he.flip_horizontal()?);
            ihc.push(s.ihc.flip_horizontal()?);
        } else {
            he.push(s.he.clone());
            ihc.push(s.ihc.clone());
        }
    }
    Ok((Tensor::stack_batch(&he)?, Tensor::stack_batch(&ihc)?))
}

/// Trains both encoders jointly on InfoNCE plus the L2 penalty with Adam.
/// The batch order of every epoch is a pure function of `seed`.
pub fn pretrain_dual_encoders<T: Scalar>(
    samples: &[PairedSample<T>],
    enc_cfg: &EncoderConfig,
    cfg: &EncoderTrainConfig,
    seed: u64,
) -> Result<(DualEncoder<T>, EncoderTrainLog)> {
    cfg.validate()?;
    if samples.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "encoder pretraining needs at least one batch ({} pairs), dataset has {}",
            cfg.batch_size,
            samples.len()
        )));
    }
    let mut dual = DualEncoder::new(enc_cfg.clone(), seed);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..Default::default()
    };
    let mut opt_he = Adam::new(adam_cfg, &dual.he.store);
    let mut opt_ihc = Adam::new(adam_cfg, &dual.ihc.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4c0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = EncoderTrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nce_sum, mut l2_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let flips: Vec<bool> = idx.iter().map(|_| cfg.flip && rng.gen_bool(0.5)).collect();
            let (he, ihc) = make_batch(samples, idx, &flips)?;
            let tape = Tape::new();
            let cx_he = Ctx::new(&tape, &dual.he.store, Mode::Train);
            let cx_ihc = Ctx::new(&tape, &dual.ihc.store, Mode::Train);
            let za = dual.he.net.embed(&cx_he, tape.constant(he))?;
            let zb = dual.ihc.net.embed(&cx_ihc, tape.constant(ihc))?;
            let nce = info_nce_loss(za, zb, cfg.temperature)?;
            let l2 = l2_penalty(&cx_he, cfg.l2_reg).add(&l2_penalty(&cx_ihc, cfg.l2_reg))?;
            let loss = nce.add(&l2)?;
            let (nv, lv) = (nce.item().to_f64_lossy(), l2.item().to_f64_lossy());
            if !(nv + lv).is_finite() {
                return Err(Error::Numerical(format!("non-finite encoder loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            opt_he.step(&mut dual.he.store, &grads, cfg.lr)?;
            opt_ihc.step(&mut dual.ihc.store, &grads, cfg.lr)?;
            nce_sum += nv;
            l2_sum += lv;
            batches += 1;
        }
        let rec = EncoderEpochRecord {
            epoch: epoch + 1,
            info_nce: nce_sum / batches as f64,
            l2: l2_sum / batches as f64,
            total: (nce_sum + l2_sum) / batches as f64,
        };
        log::info!(
            "encoder epoch {}/{}: info_nce {:.4} l2 {:.5}",
            rec.epoch,
            cfg.epochs,
            rec.info_nce,
            rec.l2
        );
        log.epochs.push(rec);
    }
    dual.freeze();
    Ok((dual, log))
}

/// Cosine similarities of matched pairs and of an equal number of
/// mismatched pairs. Mismatches pair each H&E image with the IHC image
/// following it in a seeded random cycle, so no image meets its own partner.
pub fn pair_similarities<T: Scalar>(
    dual: &DualEncoder<T>,
    samples: &[PairedSample<T>],
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(Error::Data("similarity analysis needs at least 2 pairs".into()));
    }
    let mut he = Vec::with_capacity(samples.len());
    let mut ihc = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let h: Vec<_> = chunk.iter().map(|s| s.he.clone()).collect();
        let i: Vec<_> = chunk.iter().map(|s| s.ihc.clone()).collect();
        let zh = dual.he.encode(&Tensor::stack_batch(&h)?)?;
        let zi = dual.ihc.encode(&Tensor::stack_batch(&i)?)?;
        let d = zh.shape()[1];
        he.extend(zh.data().chunks(d).map(|r| r.to_vec()));
        ihc.extend(zi.data().chunks(d).map(|r| r.to_vec()));
    }
    let cos = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x * y).to_f64_lossy()).sum::<f64>();
    let pos = he.iter().zip(&ihc).map(|(a, b)| cos(a, b)).collect();
    let mut cycle: Vec<usize> = (0..samples.len()).collect();
    cycle.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let neg = (0..cycle.len())
        .map(|k| cos(&he[cycle[k]], &ihc[cycle[(k + 1) % cycle.len()]]))
        .collect();
    Ok((pos, neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` edges spanning [−1, 1].
    pub edges: Vec<f64>,
    pub paired: Vec<usize>,
    pub unpaired: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAnalysis {
    pub best_threshold: f64,
    pub accuracy: f64,
    pub mean_paired: f64,
    pub mean_unpaired: f64,
    pub histogram: SimilarityHistogram,
}

pub const HISTOGRAM_BINS: usize = 40;

/// Finds the cosine-similarity threshold that best separates matched
/// (similarity > threshold) from mismatched pairs.
pub fn similarity_threshold_analysis(paired: &[f64], unpaired: &[f64]) -> Result<ThresholdAnalysis> {
    if paired.is_empty() || unpaired.is_empty() {
        return Err(Error::Data("similarity analysis needs non-empty paired and unpaired sets".into()));
    }
    if paired.iter().chain(unpaired).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite similarity".into()));
    }
    let mut all: Vec<f64> = paired.iter().chain(unpaired).copied().collect();
    all.sort_by(|a, b| a.total_cmp(b));
    all.dedup();
    let mut candidates = vec![-1.0];
    candidates.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(1.0);
    let total = (paired.len() + unpaired.len()) as f64;
    let accuracy = |t: f64| {
        let tp = paired.iter().filter(|&&s| s > t).count();
        let tn = unpaired.iter().filter(|&&s| s <= t).count();
        (tp + tn) as f64 / total
    };
    let (mut best_threshold, mut best) = (candidates[0], accuracy(candidates[0]));
    for &t in &candidates[1..] {
        let a = accuracy(t);
        if a > best {
            best = a;
            best_threshold = t;
        }
    }
    let width = 2.0 / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|i| -1.0 + i as f64 * width).collect();
    let bin = |s: f64| (((s + 1.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
    let mut hp = vec![0; HISTOGRAM_BINS];
    let mut hn = vec![0; HISTOGRAM_BINS];
    paired.iter().for_each(|&s| hp[bin(s)] += 1);
    unpaired.iter().for_each(|&s| hn[bin(s)] += 1);
    Ok(ThresholdAnalysis {
        best_threshold,
        accuracy: best,
        mean_paired: paired.iter().sum::<f64>() / paired.len() as f64,
        mean_unpaired: unpaired.iter().sum::<f64>() / unpaired.len() as f64,
        histogram: SimilarityHistogram {
            edges,
            paired: hp,
            unpaired: hn,
        },
    })
}

/// Stores both encoders under `he_encoder/` and `ihc_encoder/` sections.
pub fn dual_named_tensors<T: Scalar>(dual: &DualEncoder<T>) -> Vec<(String, Vec<(String, Tensor<T>)>)> {
    vec![
        ("he_encoder".to_string(), dual.he.store.named_tensors()),
        ("ihc_encoder".to_string(), dual.ihc.store.named_tensors()),
    ]
}

pub fn load_dual_from_sections<T: Scalar>(
    config: EncoderConfig,
    he: &HashMap<String, Tensor<T>>,
    ihc: &HashMap<String, Tensor<T>>,
) -> Result<DualEncoder<T>> {
    let mut dual = DualEncoder::new(config, 0);
    dual.he.store.load_named(he)?;
    dual.ihc.store.load_named(ihc)?;
    dual.freeze();
    Ok(dual)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nce_value(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> f64 {
        let tape = Tape::no_grad();
        info_nce_loss(tape.constant(a.clone()), tape.constant(b.clone()), tau).unwrap().item()
    }

    #[test]
    fn uniform_similarities_give_log_n() {
        for n in [2, 8, 64] {
            let z = Tensor::<f64>::ones(&[n, 4]);
            assert!((nce_value(&z, &z, 0.07) - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_pair_hand_value() {
        // s(z1, z1+) = 1, s(z1, z2+) = 0; the second anchor mirrors it.
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = nce_value(&a, &a, 1.0);
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let tape = Tape::<f64>::no_grad();
        let one = tape.constant(Tensor::ones(&[1, 3]));
        assert!(info_nce_loss(one, one, 0.1).is_err());
        let two = tape.constant(Tensor::ones(&[2, 3]));
        assert!(info_nce_loss(two, two, 0.0).is_err());
    }

    #[test]
    fn penalty_counts_only_weights() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ParamKind::Weight, Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        store.add("b", ParamKind::Bias, Tensor::from_vec(&[1], vec![10.0]).unwrap());
        store.add("g", ParamKind::Norm, Tensor::from_vec(&[1], vec![10.0]).unwrap());
        assert_eq!(l2_penalty_value(&store, 0.5), 12.5);
        assert_eq!(l2_penalty_value(&store, 0.0), 0.0);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, Mode::Train);
        assert_eq!(l2_penalty(&cx, 0.5).item(), 12.5);
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let mut cfg = EncoderConfig::default();
        cfg.widths = [4, 4, 8, 8];
        cfg.proj_hidden = 8;
        cfg.embed_dim = 6;
        let dual = DualEncoder::<f64>::new(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
        let x2 = Tensor::stack_batch(&[x.clone(), x]).unwrap();
        let z = dual.encode(Stain::He, &x2).unwrap();
        assert_eq!(z.shape(), &[2, 6]);
        for row in z.data().chunks(6) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert_eq!(z.data()[..6], z.data()[6..]);
        assert!(dual.encode(Stain::Ihc, &Tensor::zeros(&[1, 4, 16, 16])).is_err());
    }

    #[test]
    fn threshold_on_separable_sets() {
        let a = similarity_threshold_analysis(&[0.9; 5], &[0.1; 7]).unwrap();
        assert_eq!(a.accuracy, 1.0);
        assert!(a.best_threshold > 0.1 && a.best_threshold < 0.9);
        assert_eq!(a.histogram.paired.iter().sum::<usize>(), 5);
        assert_eq!(a.histogram.unpaired.iter().sum::<usize>(), 7);
        assert!(similarity_threshold_analysis(&[], &[0.1]).is_err());
    }
}
