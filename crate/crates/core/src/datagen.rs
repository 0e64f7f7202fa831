//! Synthetic semi-supervised segmentation scenes.
//!
//! Each scene is a `G×G` grid of class regions built from layered axis-aligned
//! rectangles. Pixel features are the class centroid plus Gaussian noise;
//! region boundaries are optionally blurred by mixing in the neighbouring
//! class centroid, which produces ambiguous pixels with a correct label.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{PrclError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"PRCLDATA";
pub const DATASET_VERSION: u32 = 1;

const COVERAGE_RETRIES: usize = 16;

/// Generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub labeled_fraction: f64,
    pub num_classes: usize,
    pub grid: usize,
    pub features: usize,
    /// Mean pairwise distance between class centroids.
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Probability that a boundary pixel is mixed with its neighbour's class.
    pub boundary_blur: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_scenes: 200,
            labeled_fraction: 0.05,
            num_classes: 6,
            grid: 16,
            features: 8,
            class_separation: 4.0,
            noise_sigma: 1.0,
            boundary_blur: 0.15,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(PrclError::Config { key: key.into(), msg });
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction", "must lie in (0, 1]".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes", "must lie in [2, 255]".into());
        }
        if self.grid == 0 || self.features == 0 {
            return bad("grid", "grid and feature sizes must be positive".into());
        }
        if self.num_classes > self.grid * self.grid {
            return bad("num_classes", format!("{} classes cannot fit a {}x{} grid", self.num_classes, self.grid, self.grid));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation", "must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.boundary_blur) {
            return bad("boundary_blur", "must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Noise level of one class. Classes get progressively noisier, from
    /// 0.75× to 1.25× the base level.
    pub fn class_noise(&self, class: usize) -> f64 {
        let t = class as f64 / (self.num_classes - 1) as f64;
        self.noise_sigma * (0.75 + 0.5 * t)
    }
}

/// One synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub grid: usize,
    pub feature_dim: usize,
    /// `G·G·F` values, pixel-major.
    pub features: Vec<f32>,
    /// `G·G` class ids.
    pub labels: Vec<u8>,
    pub is_labeled: bool,
}

impl ToyScene {
    pub fn num_pixels(&self) -> usize {
        self.grid * self.grid
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

/// Generated scenes split into labeled and unlabeled sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Class centroids, `C × F`.
    pub centroids: Vec<Vec<f64>>,
    pub labeled: Vec<ToyScene>,
    pub unlabeled: Vec<ToyScene>,
}

impl Dataset {
    /// Labeled scenes followed by unlabeled ones.
    pub fn all_scenes(&self) -> Vec<ToyScene> {
        self.labeled.iter().chain(&self.unlabeled).cloned().collect()
    }
}

fn centroids(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.features).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..raw.len() {
        for j in i + 1..raw.len() {
            total += raw[i].iter().zip(&raw[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    let scale = spec.class_separation / (total / pairs as f64);
    raw.into_iter()
        .map(|c| c.into_iter().map(|v| v * scale).collect())
        .collect()
}

fn layout(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let g = spec.grid;
    let mut labels = vec![rng.random_range(0..spec.num_classes) as u8; g * g];
    let rects = rng.random_range(2..=5);
    let lo = (g / 4).max(1);
    let hi = (3 * g / 4).max(lo);
    for _ in 0..rects {
        let class = rng.random_range(0..spec.num_classes) as u8;
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=g - w);
        let y0 = rng.random_range(0..=g - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                labels[y * g + x] = class;
            }
        }
    }
    labels
}

fn scene(spec: &DatasetSpec, centroids: &[Vec<f64>], rng: &mut ChaCha8Rng) -> ToyScene {
    let g = spec.grid;
    let f = spec.features;
    let labels = layout(spec, rng);
    let mut features = Vec::with_capacity(g * g * f);
    let mut neighbours = Vec::with_capacity(4);
    for y in 0..g {
        for x in 0..g {
            let own = labels[y * g + x] as usize;
            neighbours.clear();
            if x > 0 {
                neighbours.push(labels[y * g + x - 1] as usize);
            }
            if x + 1 < g {
                neighbours.push(labels[y * g + x + 1] as usize);
            }
            if y > 0 {
                neighbours.push(labels[(y - 1) * g + x] as usize);
            }
            if y + 1 < g {
                neighbours.push(labels[(y + 1) * g + x] as usize);
            }
            neighbours.retain(|&c| c != own);
            let blur = !neighbours.is_empty() && rng.random::<f64>() < spec.boundary_blur;
            let other = if blur { Some(neighbours[rng.random_range(0..neighbours.len())]) } else { None };
            let sigma = spec.class_noise(own);
            for k in 0..f {
                let centre = match other {
                    Some(o) => 0.5 * (centroids[own][k] + centroids[o][k]),
                    None => centroids[own][k],
                };
                let eps: f64 = rng.sample(StandardNormal);
                features.push((centre + sigma * eps) as f32);
            }
        }
    }
    ToyScene {
        grid: g,
        feature_dim: f,
        features,
        labels,
        is_labeled: false,
    }
}

/// Generates the dataset described by `spec`. Bit-reproducible for a given
/// spec.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids = centroids(spec, &mut rng);

    let mut scenes = Vec::new();
    for _ in 0..COVERAGE_RETRIES {
        scenes = (0..spec.num_scenes).map(|_| scene(spec, &centroids, &mut rng)).collect();
        let mut seen = vec![false; spec.num_classes];
        for s in &scenes {
            for &l in &s.labels {
                seen[l as usize] = true;
            }
        }
        if seen.iter().all(|&b| b) {
            break;
        }
    }

    let n = scenes.len();
    let n_labeled = if n == 0 {
        0
    } else {
        ((spec.labeled_fraction * n as f64).round() as usize).clamp(1, n)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_labeled = vec![false; n];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (mut s, flag) in scenes.into_iter().zip(is_labeled) {
        s.is_labeled = flag;
        if flag {
            labeled.push(s);
        } else {
            unlabeled.push(s);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        centroids,
        labeled,
        unlabeled,
    })
}

/// Serializes scenes into the binary dataset container.
pub fn encode_scenes(spec: &DatasetSpec, scenes: &[ToyScene]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.num_scenes as u64).to_le_bytes());
    buf.extend_from_slice(&spec.labeled_fraction.to_le_bytes());
    buf.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.grid as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.features as u32).to_le_bytes());
    buf.extend_from_slice(&spec.class_separation.to_le_bytes());
    buf.extend_from_slice(&spec.noise_sigma.to_le_bytes());
    buf.extend_from_slice(&spec.boundary_blur.to_le_bytes());
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    buf.extend_from_slice(&(scenes.len() as u64).to_le_bytes());
    for s in scenes {
        if s.grid != spec.grid || s.feature_dim != spec.features {
            return Err(PrclError::contract("scene shape disagrees with spec"));
        }
        buf.push(s.is_labeled as u8);
        buf.extend_from_slice(&s.labels);
        for v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes the dataset file, creating missing parent directories.
pub fn export_scenes(spec: &DatasetSpec, scenes: &[ToyScene], path: &Path) -> Result<()> {
    let bytes = encode_scenes(spec, scenes)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PrclError::Parse {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn error(&self, msg: impl Into<String>) -> PrclError {
        PrclError::Parse {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

/// Parses a dataset container. Nothing is returned unless the whole buffer
/// is well formed.
pub fn decode_scenes(bytes: &[u8]) -> Result<(DatasetSpec, Vec<ToyScene>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != DATASET_MAGIC {
        return Err(PrclError::Parse { offset: 0, msg: "not a dataset file".into() });
    }
    let version = c.u32("version")?;
    if version != DATASET_VERSION {
        return Err(c.error(format!("unsupported dataset version {version}")));
    }
    let spec = DatasetSpec {
        num_scenes: c.u64("num_scenes")? as usize,
        labeled_fraction: c.f64("labeled_fraction")?,
        num_classes: c.u32("num_classes")? as usize,
        grid: c.u32("grid")? as usize,
        features: c.u32("features")? as usize,
        class_separation: c.f64("class_separation")?,
        noise_sigma: c.f64("noise_sigma")?,
        boundary_blur: c.f64("boundary_blur")?,
        seed: c.u64("seed")?,
    };
    let count = c.u64("record count")? as usize;
    let pixels = spec.grid * spec.grid;
    let record = 1 + pixels + 4 * pixels * spec.features;
    if (bytes.len() - c.pos) / record.max(1) < count {
        return Err(c.error(format!("file too short for {count} records")));
    }
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let flag = c.take(1, "labeled flag")?[0];
        if flag > 1 {
            return Err(c.error("labeled flag must be 0 or 1"));
        }
        let at = c.pos;
        let labels = c.take(pixels, "label grid")?.to_vec();
        if let Some(i) = labels.iter().position(|&l| l as usize >= spec.num_classes) {
            return Err(PrclError::Parse {
                offset: (at + i) as u64,
                msg: format!("label {} out of range", labels[i]),
            });
        }
        let features = c
            .take(4 * pixels * spec.features, "feature grid")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        scenes.push(ToyScene {
            grid: spec.grid,
            feature_dim: spec.features,
            features,
            labels,
            is_labeled: flag == 1,
        });
    }
    if c.pos != bytes.len() {
        return Err(c.error("trailing bytes after last record"));
    }
    Ok((spec, scenes))
}

pub fn import_scenes(path: &Path) -> Result<(DatasetSpec, Vec<ToyScene>)> {
    decode_scenes(&fs::read(path)?)
}
