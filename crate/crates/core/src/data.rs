//! Paired image folders, deterministic synthetic stain pairs and aligned
//! augmentation.
//!
//! Images are decoded to 8-bit RGB and carried as (1, 3, H, W) tensors in
//! [−1, 1]; metrics map them to [0, 1].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stainfuse_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// One H&E image, its IHC counterpart and their shared identity key.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample<T> {
    pub key: String,
    pub he: Tensor<T>,
    pub ihc: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of `dir` keyed by file stem, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_path(&p) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p);
            }
        }
    }
    Ok(out)
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::lit(px.0[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("rgb tensor shape")
}

/// Quantizes a (1, 3, H, W) tensor in [−1, 1] to 8-bit RGB.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::shape("tensor_to_rgb", "(1, 3, H, W)", t.shape()));
    }
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            let v = t.data()[ch * h * w + i].to_f64_lossy();
            let v = if v.is_finite() { v } else { 0.0 };
            buf.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn save_tensor_png<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    save_png(&tensor_to_rgb(t)?, path)
}

/// Maps [−1, 1] to [0, 1].
pub fn to_unit_range<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    t.map(|v| (v + T::one()) * half)
}

/// Folder conventions for paired data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `<split>/HE`, `<split>/IHC`
    SplitFirst,
    /// `HE/<split>`, `IHC/<split>`
    StainFirst,
    /// `<split>A`, `<split>B` (test data may live under `valA`/`valB`)
    Domains,
    /// `HE`, `IHC` directly under the root, whatever the split.
    Flat,
}

fn detect_layout(root: &Path, split: Split) -> Option<(Layout, PathBuf, PathBuf)> {
    let s = split.name();
    let mut candidates = vec![
        (Layout::SplitFirst, root.join(s).join("HE"), root.join(s).join("IHC")),
        (Layout::StainFirst, root.join("HE").join(s), root.join("IHC").join(s)),
        (Layout::Domains, root.join(format!("{s}A")), root.join(format!("{s}B"))),
    ];
    if split == Split::Test {
        candidates.push((Layout::Domains, root.join("valA"), root.join("valB")));
    }
    candidates.push((Layout::Flat, root.join("HE"), root.join("IHC")));
    candidates.into_iter().find(|(_, a, b)| a.is_dir() && b.is_dir())
}

#[derive(Debug, Clone)]
pub struct PairEntry {
    pub key: String,
    pub he: PathBuf,
    pub ihc: PathBuf,
}

/// Filename-matched pairs of one split; images are decoded on demand.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub layout: Layout,
    pub entries: Vec<PairEntry>,
    /// Keys present on only one side.
    pub unmatched: Vec<String>,
    /// Optional square side length images are resized to on load.
    pub resize: Option<usize>,
}

impl PairedDataset {
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let (layout, he_dir, ihc_dir) = detect_layout(root, split).ok_or_else(|| {
            Error::Data(format!(
                "{}: no {s}/HE + {s}/IHC, HE/{s} + IHC/{s} or {s}A + {s}B directories",
                root.display(),
                s = split.name()
            ))
        })?;
        let he = list_images(&he_dir)?;
        let mut ihc = list_images(&ihc_dir)?;
        let mut entries = Vec::new();
        let mut unmatched = Vec::new();
        for (key, he_path) in he {
            match ihc.remove(&key) {
                Some(ihc_path) => entries.push(PairEntry {
                    key,
                    he: he_path,
                    ihc: ihc_path,
                }),
                None => unmatched.push(key),
            }
        }
        unmatched.extend(ihc.into_keys());
        unmatched.sort();
        for k in &unmatched {
            log::warn!("{}: '{k}' has no counterpart, skipped", root.display());
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{}: no matched pairs", root.display())));
        }
        log::info!("{}: {} pairs ({} unmatched)", root.display(), entries.len(), unmatched.len());
        Ok(Self {
            root: root.to_path_buf(),
            layout,
            entries,
            unmatched,
            resize: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.key.as_str()).collect()
    }

    pub fn load<T: Scalar>(&self, i: usize) -> Result<PairedSample<T>> {
        let e = &self.entries[i];
        let mut he = load_image::<T>(&e.he)?;
        let mut ihc = load_image::<T>(&e.ihc)?;
        if he.shape() != ihc.shape() {
            return Err(Error::Data(format!(
                "pair '{}': H&E {:?} and IHC {:?} differ in size",
                e.key,
                he.shape(),
                ihc.shape()
            )));
        }
        if let Some(s) = self.resize {
            he = he.resize_bilinear(s, s)?;
            ihc = ihc.resize_bilinear(s, s)?;
        }
        Ok(PairedSample {
            key: e.key.clone(),
            he,
            ihc,
        })
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Vec<PairedSample<T>>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Same window for both images of a pair.
pub fn random_crop_pair<T: Scalar, R: Rng + ?Sized>(
    s: &PairedSample<T>,
    size: usize,
    rng: &mut R,
) -> Result<PairedSample<T>> {
    let (_, _, h, w) = s.he.dims4()?;
    if size == 0 || size > h || size > w {
        return Err(Error::Data(format!("crop {size} exceeds image {h}x{w} of '{}'", s.key)));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    Ok(PairedSample {
        key: s.key.clone(),
        he: s.he.crop(y0, x0, size, size)?,
        ihc: s.ihc.crop(y0, x0, size, size)?,
    })
}

pub fn flip_pair<T: Scalar>(s: &PairedSample<T>) -> Result<PairedSample<T>> {
    Ok(PairedSample {
        key: s.key.clone(),
        he: s.he.flip_horizontal()?,
        ihc: s.ihc.flip_horizontal()?,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the synthetic pseudo-H&E → pseudo-IHC generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStainSpec {
    pub seed: u64,
    pub n_samples: usize,
    /// Additional pairs written to the test split.
    pub n_test: usize,
    pub image_size: usize,
    /// Nuclei per 1000 pixels, sampled uniformly per image.
    pub density: (f64, f64),
    /// Nucleus radius in pixels, sampled per image.
    pub nucleus_radius: (f64, f64),
    /// Cells of the coarse grid behind the background texture.
    pub texture_cells: usize,
    pub texture_amplitude: f64,
    /// Smooth expression blobs per image.
    pub expression_blobs: usize,
    /// Expression level above which a nucleus stains positive.
    pub positive_threshold: f64,
}

impl Default for SyntheticStainSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_samples: 200,
            n_test: 0,
            image_size: 64,
            density: (2.0, 9.0),
            nucleus_radius: (1.8, 3.6),
            texture_cells: 6,
            texture_amplitude: 0.04,
            expression_blobs: 3,
            positive_threshold: 0.5,
        }
    }
}

/// Luminance below which a pixel belongs to a nucleus, in both stains.
pub const STRUCTURE_LUMA_THRESHOLD: f64 = 0.5;

/// Per-image latent variables shared by both stains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLatents {
    pub key: String,
    /// Expression grade 0..=3.
    pub grade: u8,
    pub density: f64,
    pub nucleus_radius: f64,
    pub stain_strength: f64,
    pub n_nuclei: usize,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticStainSpec,
    pub train: Vec<SampleLatents>,
    pub test: Vec<SampleLatents>,
}

impl SyntheticStainSpec {
    /// Reads a TOML spec; absent keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "synthetic image_size must be a multiple of 4 and >= 16, got {}",
                self.image_size
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("synthetic n_samples must be positive".into()));
        }
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo;
        if !ok(self.density) || !ok(self.nucleus_radius) || self.texture_cells == 0 {
            return Err(Error::Config("synthetic density/radius ranges must be positive and ordered".into()));
        }
        Ok(())
    }

    /// Pair `index`; a pure function of `(seed, index)`.
    pub fn synthesize(&self, index: u64) -> (RgbImage, RgbImage, SampleLatents) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        synthesize_pair(self, &mut rng, format!("s{index:05}"))
    }
}

struct Nucleus {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
    expression: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinearly interpolated value noise on a `cells × cells` grid in [−1, 1].
fn value_noise<R: Rng>(rng: &mut R, cells: usize, size: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / size as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / size as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let top = lerp(grid[iy * g + ix], grid[iy * g + ix + 1], tx);
            let bot = lerp(grid[(iy + 1) * g + ix], grid[(iy + 1) * g + ix + 1], tx);
            out.push(lerp(top, bot, ty));
        }
    }
    out
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn synthesize_pair<R: Rng>(spec: &SyntheticStainSpec, rng: &mut R, key: String) -> (RgbImage, RgbImage, SampleLatents) {
    let n = spec.image_size;
    let grade: u8 = rng.gen_range(0..4);
    let density = rng.gen_range(spec.density.0..=spec.density.1);
    let radius = rng.gen_range(spec.nucleus_radius.0..=spec.nucleus_radius.1);
    let strength = rng.gen_range(0.8..1.2);

    // Smooth expression field in [0, 1], scaled by the grade.
    let blobs: Vec<(f64, f64, f64)> = (0..spec.expression_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.15..0.4) * n as f64,
            )
        })
        .collect();
    let level = grade as f64 / 3.0;
    let expression = |y: f64, x: f64| -> f64 {
        let e: f64 = blobs
            .iter()
            .map(|&(by, bx, s)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        (level * e.min(1.0)).clamp(0.0, 1.0)
    };

    let count = ((density * (n * n) as f64 / 1000.0).round() as usize).max(1);
    let nuclei: Vec<Nucleus> = (0..count)
        .map(|_| {
            let cy = rng.gen_range(0.0..n as f64);
            let cx = rng.gen_range(0.0..n as f64);
            let r = radius * rng.gen_range(0.8..1.2);
            let elong = rng.gen_range(1.0..1.5);
            Nucleus {
                cy,
                cx,
                ry: r * elong,
                rx: r / elong,
                rot: rng.gen_range(0.0..std::f64::consts::PI),
                expression: expression(cy, cx),
            }
        })
        .collect();
    let positive = nuclei.iter().filter(|c| c.expression > spec.positive_threshold).count();

    let texture = value_noise(rng, spec.texture_cells, n);
    let fine = value_noise(rng, spec.texture_cells * 3, n);
    let amp = spec.texture_amplitude;

    let mut he = RgbImage::new(n as u32, n as u32);
    let mut ihc = RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let hit = nuclei.iter().find(|c| {
                let (dy, dx) = (py - c.cy, px - c.cx);
                let (s, co) = c.rot.sin_cos();
                let u = (dy * co + dx * s) / c.ry;
                let v = (-dy * s + dx * co) / c.rx;
                u * u + v * v <= 1.0
            });
            let t = amp * (0.7 * texture[i] + 0.3 * fine[i]);
            let e = expression(py, px);
            let (he_px, ihc_px) = match hit {
                Some(c) => {
                    let pos = c.expression > spec.positive_threshold;
                    // Positive nuclei are slightly denser in H&E as well.
                    let dark = if pos { 0.05 } else { 0.0 };
                    let he_c = [0.36 - dark + t, 0.20 - dark + 0.5 * t, 0.52 - dark + t];
                    let ihc_c = if pos {
                        [0.46 + t, 0.29 + 0.5 * t, 0.13 + 0.5 * t]
                    } else {
                        [0.30 + t, 0.36 + t, 0.62 + t]
                    };
                    (he_c, ihc_c)
                }
                None => {
                    // Eosin tone deepens with expression so the IHC
                    // membrane signal is visible from H&E.
                    let eo = strength * (0.55 + 0.35 * e);
                    let he_c = [0.96 - 0.06 * eo + t, 0.86 - 0.25 * eo + t, 0.92 - 0.12 * eo + t];
                    let ihc_c = [0.94 - 0.18 * e + t, 0.92 - 0.34 * e + t, 0.90 - 0.52 * e + t];
                    (he_c, ihc_c)
                }
            };
            debug_assert_eq!(luma(he_px) < STRUCTURE_LUMA_THRESHOLD, hit.is_some());
            debug_assert_eq!(luma(ihc_px) < STRUCTURE_LUMA_THRESHOLD, hit.is_some());
            he.put_pixel(x as u32, y as u32, image::Rgb(to_u8(he_px)));
            ihc.put_pixel(x as u32, y as u32, image::Rgb(to_u8(ihc_px)));
        }
    }
    let latents = SampleLatents {
        key,
        grade,
        density,
        nucleus_radius: radius,
        stain_strength: strength,
        n_nuclei: count,
        positive_fraction: positive as f64 / count as f64,
    };
    (he, ihc, latents)
}

/// Binary nucleus mask by luminance threshold.
pub fn structure_mask(img: &RgbImage) -> Vec<bool> {
    img.pixels()
        .map(|p| luma(p.0.map(|v| v as f64 / 255.0)) < STRUCTURE_LUMA_THRESHOLD)
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes `train/HE`, `train/IHC` (and `test/...` when `n_test > 0`) plus a
/// manifest recording the spec and every sample's latent variables.
pub fn generate_synthetic_dataset(spec: &SyntheticStainSpec, out: &Path) -> Result<SyntheticManifest> {
    spec.validate()?;
    let mut manifest = SyntheticManifest {
        spec: spec.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    let splits = [(Split::Train, 0..spec.n_samples), (Split::Test, spec.n_samples..spec.n_samples + spec.n_test)];
    for (split, range) in splits {
        for i in range {
            let (he, ihc, lat) = spec.synthesize(i as u64);
            let dir = out.join(split.name());
            save_png(&he, &dir.join("HE").join(format!("{}.png", lat.key)))?;
            save_png(&ihc, &dir.join("IHC").join(format!("{}.png", lat.key)))?;
            match split {
                Split::Train => manifest.train.push(lat),
                Split::Test => manifest.test.push(lat),
            }
        }
    }
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// In-memory synthetic pairs, identical to what
/// [`generate_synthetic_dataset`] writes for the train split.
pub fn synthetic_samples<T: Scalar>(spec: &SyntheticStainSpec) -> Result<Vec<PairedSample<T>>> {
    spec.validate()?;
    Ok((0..spec.n_samples as u64)
        .map(|i| {
            let (he, ihc, lat) = spec.synthesize(i);
            PairedSample {
                key: lat.key,
                he: rgb_to_tensor(&he),
                ihc: rgb_to_tensor(&ihc),
            }
        })
        .collect())
}
