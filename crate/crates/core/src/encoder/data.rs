//! Synthetic labelled images with tunable spatial redundancy.
//!
//! Classes come in pairs. Both classes of a pair share a main colour and (up to
//! a small offset) a texture colour; each class has its own ordering of the
//! patch cells. An image paints the first `round(redundancy * cells)` cells of
//! its class ordering in the (jittered) main colour and fills the remaining
//! cells with noisy texture. Telling the two classes of a pair apart needs the
//! layout, which survives only while tokens of different positions stay
//! separate.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// An `H x W x C` image with values in `[0, 1]`, stored row-major
/// (`(y * W + x) * C + c`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>, label: usize) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Shape("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            label,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, label: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
            label,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Pixels of the `patch x patch` cell at grid position `(gy, gx)`, flattened
    /// as `(dy, dx, c)`.
    pub fn patch(&self, gy: usize, gx: usize, patch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(patch * patch * self.channels);
        for dy in 0..patch {
            for dx in 0..patch {
                for c in 0..self.channels {
                    out.push(self.at(gy * patch + dy, gx * patch + dx, c));
                }
            }
        }
        out
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub seed: u64,
    pub n_samples: usize,
    pub classes: usize,
    pub redundancy: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_image_size() -> usize {
    32
}
fn default_patch() -> usize {
    8
}
fn default_channels() -> usize {
    3
}

impl DatasetParams {
    pub fn new(seed: u64, n_samples: usize, classes: usize, redundancy: f64) -> Self {
        Self {
            seed,
            n_samples,
            classes,
            redundancy,
            image_size: default_image_size(),
            patch: default_patch(),
            channels: default_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes <= 1 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(Error::Config(format!("redundancy {} outside [0, 1]", self.redundancy)));
        }
        if self.n_samples < self.classes {
            return Err(Error::Config(format!(
                "n_samples {} smaller than class count {}",
                self.n_samples, self.classes
            )));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }
}

struct ClassTemplate {
    color: Vec<f64>,
    texture: Vec<f64>,
    cell_order: Vec<usize>,
}

const COLOR_JITTER: f64 = 0.08;
const TEXTURE_NOISE: f64 = 0.35;
/// Largest per-channel difference between the texture colours of paired classes.
const TEXTURE_OFFSET: f64 = 0.1;

fn random_color(rng: &mut seed::Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(0.1..0.9)).collect()
}

fn templates(params: &DatasetParams, rng: &mut seed::Rng) -> Vec<ClassTemplate> {
    let grid = params.image_size / params.patch;
    let cells = grid * grid;
    let palette: Vec<Vec<f64>> = (0..params.classes.div_ceil(2))
        .map(|_| random_color(rng, params.channels))
        .collect();
    let textures: Vec<Vec<f64>> = (0..params.classes.div_ceil(2))
        .map(|_| random_color(rng, params.channels))
        .collect();
    (0..params.classes)
        .map(|k| {
            let mut cell_order: Vec<usize> = (0..cells).collect();
            cell_order.shuffle(rng);
            ClassTemplate {
                color: palette[k / 2].clone(),
                texture: textures[k / 2]
                    .iter()
                    .map(|c| (c + rng.random_range(-TEXTURE_OFFSET..=TEXTURE_OFFSET)).clamp(0.0, 1.0))
                    .collect(),
                cell_order,
            }
        })
        .collect()
}

/// Generates `n_samples` images with labels `i mod classes`.
pub fn generate_dataset(params: &DatasetParams) -> Result<Vec<ToyImage>> {
    params.validate()?;
    let mut rng = seed::rng(params.seed);
    let templates = templates(params, &mut rng);
    let grid = params.image_size / params.patch;
    let cells = grid * grid;
    let n_const = (params.redundancy * cells as f64).round() as usize;
    let jitter = Normal::new(0.0, COLOR_JITTER * (1.0 - params.redundancy)).expect("finite std");

    let mut images = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let label = i % params.classes;
        let t = &templates[label];
        let mut img = ToyImage::filled(params.image_size, params.image_size, params.channels, 0.0, label);
        let color: Vec<f64> = t
            .color
            .iter()
            .map(|&c| (c + jitter.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        for (rank, &cell) in t.cell_order.iter().enumerate() {
            let (gy, gx) = (cell / grid, cell % grid);
            let constant = rank < n_const;
            for dy in 0..params.patch {
                for dx in 0..params.patch {
                    for c in 0..params.channels {
                        let v = if constant {
                            color[c]
                        } else {
                            let noise = rng.random_range(-TEXTURE_NOISE..TEXTURE_NOISE);
                            (t.texture[c] + noise).clamp(0.0, 1.0)
                        };
                        img.set(gy * params.patch + dy, gx * params.patch + dx, c, v);
                    }
                }
            }
        }
        images.push(img);
    }
    Ok(images)
}

/// Disjoint index splits of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub calibration: Vec<usize>,
    pub evaluation: Vec<usize>,
    /// Fixed subset of `evaluation` used inside the search loop.
    pub search_subset: Vec<usize>,
    pub adversary: Vec<usize>,
    pub holdout: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub calibration: usize,
    pub evaluation: usize,
    pub search_subset: usize,
    pub adversary: usize,
    pub holdout: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.calibration + self.evaluation + self.adversary + self.holdout
    }
}

impl SplitManifest {
    pub fn build(n_samples: usize, sizes: &SplitSizes, seed: u64) -> Result<Self> {
        if sizes.total() > n_samples {
            return Err(Error::Config(format!(
                "splits need {} samples but only {n_samples} are generated",
                sizes.total()
            )));
        }
        if sizes.search_subset > sizes.evaluation {
            return Err(Error::Config("search subset larger than evaluation split".into()));
        }
        let mut rng = seed::rng(seed);
        let mut idx: Vec<usize> = (0..n_samples).collect();
        idx.shuffle(&mut rng);
        let take = |n: usize, from: &mut Vec<usize>| -> Vec<usize> {
            let mut v: Vec<usize> = from.drain(..n).collect();
            v.sort_unstable();
            v
        };
        let calibration = take(sizes.calibration, &mut idx);
        let evaluation = take(sizes.evaluation, &mut idx);
        let adversary = take(sizes.adversary, &mut idx);
        let holdout = take(sizes.holdout, &mut idx);
        let mut pool = evaluation.clone();
        pool.shuffle(&mut rng);
        let mut search_subset: Vec<usize> = pool.into_iter().take(sizes.search_subset).collect();
        search_subset.sort_unstable();
        Ok(Self {
            calibration,
            evaluation,
            search_subset,
            adversary,
            holdout,
        })
    }

    /// Checks that calibration, evaluation, adversary and hold-out splits are
    /// pairwise disjoint and that the search subset lies inside evaluation.
    pub fn check_disjoint(&self) -> Result<()> {
        use std::collections::HashSet;
        let mut seen = HashSet::new();
        for (name, split) in [
            ("calibration", &self.calibration),
            ("evaluation", &self.evaluation),
            ("adversary", &self.adversary),
            ("holdout", &self.holdout),
        ] {
            for &i in split {
                if !seen.insert(i) {
                    return Err(Error::Config(format!("index {i} of split {name} appears in another split")));
                }
            }
        }
        let eval: HashSet<_> = self.evaluation.iter().collect();
        if let Some(i) = self.search_subset.iter().find(|i| !eval.contains(i)) {
            return Err(Error::Config(format!("search subset index {i} not in evaluation split")));
        }
        Ok(())
    }
}

pub fn gather(images: &[ToyImage], indices: &[usize]) -> Vec<ToyImage> {
    indices.iter().map(|&i| images[i].clone()).collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    params: DatasetParams,
    splits: Option<SplitManifest>,
    images: Vec<ToyImage>,
}

pub const DATASET_FORMAT: &str = "tokmerge-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Writes the dataset and its split manifest as a versioned JSON document.
pub fn save_dataset(
    path: &std::path::Path,
    params: &DatasetParams,
    images: &[ToyImage],
    splits: Option<&SplitManifest>,
) -> Result<()> {
    let file = DatasetFile {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        params: *params,
        splits: splits.cloned(),
        images: images.to_vec(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &std::path::Path) -> Result<(DatasetParams, Vec<ToyImage>, Option<SplitManifest>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DatasetFile = serde_json::from_str(&text)?;
    if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset file {} v{}",
            file.format, file.version
        )));
    }
    for img in &file.images {
        ToyImage::new(img.height, img.width, img.channels, img.pixels.clone(), img.label)?;
    }
    Ok((file.params, file.images, file.splits))
}
