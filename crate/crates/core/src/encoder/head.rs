use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{EncoderWeights, ToyImage, TokenMatrix, CLASS_TOKEN};
use crate::merging::NoMerge;
use crate::{Error, Execution, Result};

/// Source-count-weighted mean of the patch rows (the class token is skipped).
/// Returns zeros when only the class token is left.
pub fn pool_patch_tokens(z: &TokenMatrix) -> DVector<f64> {
    let mut acc = DVector::zeros(z.dim());
    let mut weight = 0.0;
    for i in 0..z.n_tokens() {
        if i == CLASS_TOKEN {
            continue;
        }
        let c = f64::from(z.source_counts()[i]);
        acc += z.tokens().row(i).transpose() * c;
        weight += c;
    }
    if weight > 0.0 {
        acc /= weight;
    }
    acc
}

/// Nearest-class-mean head calibrated on clean, merge-free features.
///
/// Features and prototypes are compared by cosine similarity after removing
/// the calibration mean, which is shared by every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHead {
    prototypes: Vec<Vec<f64>>,
    center: Vec<f64>,
    calibration_size: usize,
}

impl PrototypeHead {
    pub fn from_parts(prototypes: Vec<Vec<f64>>, center: Vec<f64>, calibration_size: usize) -> Result<Self> {
        if prototypes.is_empty() || prototypes.iter().any(|p| p.len() != center.len()) {
            return Err(Error::Shape("prototype dimensions disagree".into()));
        }
        Ok(Self {
            prototypes,
            center,
            calibration_size,
        })
    }

    /// Mean pooled feature per class on the calibration images, computed with
    /// no merging and a noiseless channel.
    pub fn calibrate(
        encoder: &EncoderWeights,
        images: &[ToyImage],
        classes: usize,
        exec: Execution,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("empty calibration split".into()));
        }
        let feats = exec.try_map(images, |_, img| {
            Ok(pool_patch_tokens(&encoder.forward(img, &NoMerge)?.tokens))
        })?;
        let d = encoder.dim();
        let mut sums = vec![DVector::<f64>::zeros(d); classes];
        let mut counts = vec![0usize; classes];
        let mut center = DVector::<f64>::zeros(d);
        for (img, f) in images.iter().zip(&feats) {
            if img.label >= classes {
                return Err(Error::Config(format!("label {} >= class count {classes}", img.label)));
            }
            sums[img.label] += f;
            counts[img.label] += 1;
            center += f;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("class {k} missing from calibration split")));
        }
        center /= images.len() as f64;
        let prototypes = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| (s / c as f64).iter().copied().collect())
            .collect();
        Ok(Self {
            prototypes,
            center: center.iter().copied().collect(),
            calibration_size: images.len(),
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn calibration_size(&self) -> usize {
        self.calibration_size
    }

    pub fn prototypes(&self) -> DMatrix<f64> {
        let d = self.center.len();
        DMatrix::from_fn(self.prototypes.len(), d, |k, j| self.prototypes[k][j])
    }

    /// Class whose prototype is most cosine-similar to `feature`; lowest index
    /// wins ties.
    pub fn classify_feature(&self, feature: &DVector<f64>) -> usize {
        let centered: Vec<f64> = feature.iter().zip(&self.center).map(|(f, c)| f - c).collect();
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, proto) in self.prototypes.iter().enumerate() {
            let p: Vec<f64> = proto.iter().zip(&self.center).map(|(p, c)| p - c).collect();
            let sim = crate::merging::cosine_similarity(&centered, &p);
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        best
    }

    pub fn classify(&self, z: &TokenMatrix) -> usize {
        self.classify_feature(&pool_patch_tokens(z))
    }
}
