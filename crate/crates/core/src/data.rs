//! Datasets: manifests, the procedural training corpus, and epoch batching.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor};
use crate::tensor::Tensor;

/// SplitMix64 finalizer; derives independent stream seeds from `(seed, salt)`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

/// Where a manifest entry's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    File(PathBuf),
    Synth { seed: u64, index: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
}

/// Ordered list of images; the order is the canonical pre-shuffle epoch order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub target_size: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate image id `{}`", e.id)));
            }
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::Invalid("target_size must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// A manifest together with its decoded images, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    /// Loads or regenerates every entry. Relative file paths resolve against
    /// `base_dir`.
    pub fn materialize(manifest: DatasetManifest, base_dir: &Path) -> Result<Self> {
        manifest.validate()?;
        let target = manifest.target_size;
        let images = manifest
            .entries
            .par_iter()
            .map(|e| match &e.source {
                Source::File(p) => load_image(&base_dir.join(p), target),
                Source::Synth { seed, index } => synth_image(*seed, *index, target),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// SHA-256 over every image in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            img.tensor().feed(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// `n` procedural images of `size = (H, W)` fully determined by `seed`.
///
/// Each image layers a smooth color gradient, Gaussian blobs, low-frequency
/// sinusoidal noise and (usually) a hard step edge, then clips to `[0, 1]`.
pub fn synth_corpus(seed: u64, n: usize, size: (usize, usize)) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("corpus size must be positive".into()));
    }
    let manifest = DatasetManifest {
        entries: (0..n as u64)
            .map(|index| ManifestEntry {
                id: format!("synth-{seed}-{index:05}"),
                source: Source::Synth { seed, index },
            })
            .collect(),
        seed,
        target_size: size,
        config_digest: None,
    };
    Dataset::materialize(manifest, Path::new("."))
}

pub fn synth_image(seed: u64, index: u64, (h, w): (usize, usize)) -> Result<ImageTensor> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid("image size must be positive".into()));
    }
    let mut rng = rng_for(seed, index);
    let mut px = vec![0.0f64; 3 * h * w];
    let coord = |y: usize, x: usize| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);

    // smooth gradient
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = coord(y, x);
            let t = ((u - 0.5) * theta.cos() + (v - 0.5) * theta.sin() + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[(c * h + y) * w + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }

    // Gaussian blobs
    for _ in 0..rng.gen_range(1..=3) {
        let (cu, cv) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let sigma: f64 = rng.gen_range(0.08..0.3);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.4..0.4));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = coord(y, x);
                let g = (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    px[(c * h + y) * w + x] += amp[c] * g;
                }
            }
        }
    }

    // band-limited noise: a few low-frequency plane waves
    for _ in 0..4 {
        let fu = rng.gen_range(1.0..4.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let fv = rng.gen_range(1.0..4.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = coord(y, x);
                let s = (std::f64::consts::TAU * (fu * u + fv * v) + phase).sin();
                for c in 0..3 {
                    px[(c * h + y) * w + x] += amp[c] * s;
                }
            }
        }
    }

    // step edge
    if rng.gen_bool(0.7) {
        let (pu, pv) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let off: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = coord(y, x);
                if (u - pu) * phi.cos() + (v - pv) * phi.sin() > 0.0 {
                    for c in 0..3 {
                        px[(c * h + y) * w + x] += off[c];
                    }
                }
            }
        }
    }

    let data = px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ImageTensor::new(Tensor::new(vec![3, h, w], data)?)
}

/// Seeded permutation of all entries split into consecutive batches of
/// `batch_size` (the last may be shorter). Returns indices into the manifest.
pub fn make_batches(manifest: &DatasetManifest, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
