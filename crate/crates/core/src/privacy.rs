//! Black-box inversion probe: the adversary queries the pipeline, fits a ridge
//! map from received tokens back to pixels, and leakage is scored with SSIM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenMatrix, ToyImage};
use crate::error::{Error, Result};
use crate::objectives::{EvalSet, MergeSchedule, Pipeline};

pub const DEFAULT_RIDGE: f64 = 1e-2;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Length of [`token_features`] for `pad_length` rows of width `d`.
pub fn feature_len(pad_length: usize, d: usize) -> usize {
    pad_length * (d + 1) + d + d * (d + 1) / 2
}

/// Which columns of [`token_features`] the inverse map reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Padded rows and the order-free summary.
    #[default]
    Full,
    /// Only the count-weighted mean and second moment.
    Summary,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 2] = [FeatureSet::Full, FeatureSet::Summary];

    pub fn columns(self, pad_length: usize, d: usize) -> std::ops::Range<usize> {
        let end = feature_len(pad_length, d);
        match self {
            FeatureSet::Full => 0..end,
            FeatureSet::Summary => pad_length * (d + 1)..end,
        }
    }
}

/// Flattens `z` into `pad_length` rows of `[token, source_count]`, then appends
/// the source-count-weighted mean of the rows and the upper triangle of their
/// weighted second moment. Missing rows are zero, so a zero count marks
/// padding. Rows past `pad_length` are dropped from the padded block but still
/// enter the summary.
///
/// Once merging starts, padded row `i` no longer refers to the same image
/// region across inputs. The summary does not depend on row order, and its
/// products of token coordinates pair content with position.
pub fn token_features(z: &TokenMatrix, pad_length: usize) -> Vec<f64> {
    let d = z.dim();
    let mut out = vec![0.0; feature_len(pad_length, d)];
    let (padded, summary) = out.split_at_mut(pad_length * (d + 1));
    let (mean, second) = summary.split_at_mut(d);
    for (i, row) in padded.chunks_exact_mut(d + 1).enumerate().take(z.n_tokens()) {
        for j in 0..d {
            row[j] = z.tokens()[(i, j)];
        }
        row[d] = z.source_counts()[i] as f64;
    }
    let total: f64 = z.source_counts().iter().map(|&n| n as f64).sum();
    for (i, &n) in z.source_counts().iter().enumerate() {
        let w = n as f64 / total;
        let t = z.tokens().row(i);
        let mut k = 0;
        for j in 0..d {
            mean[j] += w * t[j];
            for l in j..d {
                second[k] += w * t[j] * t[l];
                k += 1;
            }
        }
    }
    out
}

/// Token/image pairs collected by querying the pipeline.
#[derive(Debug, Clone)]
pub struct Surrogate {
    /// One [`token_features`] row per image.
    pub features: DMatrix<f64>,
    /// One pixel row per image.
    pub pixels: DMatrix<f64>,
    pub pad_length: usize,
    /// Token width.
    pub dim: usize,
    pub token_counts: Vec<usize>,
    pub shape: (usize, usize, usize),
}

impl Surrogate {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Feature columns read under `set`.
    pub fn design(&self, set: FeatureSet) -> DMatrix<f64> {
        let cols = set.columns(self.pad_length, self.dim);
        self.features.columns(cols.start, cols.len()).into_owned()
    }
}

/// Runs every image through encoder, merging and channel and pairs the received
/// tokens with the clean pixels. With `pad_length = None` the set's own maximum
/// token count is used.
pub fn build_surrogate(
    schedule: &MergeSchedule,
    set: &EvalSet,
    pipeline: &Pipeline,
    seed: u64,
    pad_length: Option<usize>,
) -> Result<Surrogate> {
    let first = set
        .images
        .first()
        .ok_or_else(|| Error::Config("empty adversary set".into()))?;
    let shape = (first.height, first.width, first.channels);
    if set.images.iter().any(|im| (im.height, im.width, im.channels) != shape) {
        return Err(Error::Shape("images in the adversary set differ in shape".into()));
    }
    let pipeline = pipeline.with_channel_seed(seed);
    let received: Vec<TokenMatrix> = schedule.with_merger(|merge| {
        pipeline
            .exec
            .try_map(&set.images, |i, img| pipeline.received_tokens(img, merge, set.ids[i]))
    })?;
    let token_counts: Vec<usize> = received.iter().map(|z| z.n_tokens()).collect();
    let pad = pad_length.unwrap_or_else(|| token_counts.iter().copied().max().unwrap_or(0));
    let d = pipeline.encoder.dim();
    let feats: Vec<f64> = received.iter().flat_map(|z| token_features(z, pad)).collect();
    let pixels: Vec<f64> = set.images.iter().flat_map(|im| im.pixels.iter().copied()).collect();
    let m = set.images.len();
    Ok(Surrogate {
        features: DMatrix::from_row_slice(m, feature_len(pad, d), &feats),
        pixels: DMatrix::from_row_slice(m, first.pixel_count(), &pixels),
        pad_length: pad,
        dim: d,
        token_counts,
        shape,
    })
}

/// Affine map from token features to pixels.
#[derive(Debug, Clone)]
pub struct InversionOracle {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub lambda: f64,
    pub features: FeatureSet,
    pub pad_length: usize,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn centered(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Ridge regression on centered data (the bias is not penalized). Solves in
/// whichever of the primal or dual forms is smaller.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::Shape(format!("{} feature rows vs {} target rows", x.nrows(), y.nrows())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let (xm, ym) = (column_means(x), column_means(y));
    let (xc, yc) = (centered(x, &xm), centered(y, &ym));
    let singular = || Error::Numerical("ridge normal equations are singular".into());
    let weights = if x.nrows() >= x.ncols() {
        let mut a = xc.tr_mul(&xc);
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        a.cholesky().ok_or_else(singular)?.solve(&xc.tr_mul(&yc))
    } else {
        let mut g = &xc * xc.transpose();
        for i in 0..g.nrows() {
            g[(i, i)] += lambda;
        }
        xc.tr_mul(&g.cholesky().ok_or_else(singular)?.solve(&yc))
    };
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(singular());
    }
    let bias = ym - weights.tr_mul(&xm);
    Ok((weights, bias))
}

/// Fits the adversary's inverse map on all token features.
pub fn fit_inversion(surrogate: &Surrogate, lambda: f64) -> Result<InversionOracle> {
    fit_inversion_with(surrogate, FeatureSet::Full, lambda)
}

pub fn fit_inversion_with(surrogate: &Surrogate, features: FeatureSet, lambda: f64) -> Result<InversionOracle> {
    let (weights, bias) = fit_ridge(&surrogate.design(features), &surrogate.pixels, lambda)?;
    Ok(InversionOracle {
        weights,
        bias,
        lambda,
        features,
        pad_length: surrogate.pad_length,
    })
}

/// Ridge strengths tried by [`select_ridge`].
pub const DEFAULT_RIDGE_GRID: [f64; 6] = [1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

/// Held-out error of one feature set across the ridge grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCurve {
    pub features: FeatureSet,
    pub validation_mse: Vec<f64>,
}

/// Outcome of the adversary's model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSelection {
    pub lambda: f64,
    pub features: FeatureSet,
    pub grid: Vec<f64>,
    pub curves: Vec<ValidationCurve>,
}

/// Held-out MSE of every ridge strength; one eigendecomposition of the training
/// Gram matrix serves the whole grid.
fn validation_curve(x: &DMatrix<f64>, y: &DMatrix<f64>, n_fit: usize, grid: &[f64]) -> Vec<f64> {
    let n_val = x.nrows() - n_fit;
    let xt = x.rows(0, n_fit).into_owned();
    let yt = y.rows(0, n_fit).into_owned();
    let (xm, ym) = (column_means(&xt), column_means(&yt));
    let (xc, yc) = (centered(&xt, &xm), centered(&yt, &ym));
    let xv = centered(&x.rows(n_fit, n_val).into_owned(), &xm);
    let yv = centered(&y.rows(n_fit, n_val).into_owned(), &ym);

    // dual solution: W = Xc^T U (S + λ)^-1 U^T Yc
    let eig = (&xc * xc.transpose()).symmetric_eigen();
    let b = eig.eigenvectors.tr_mul(&yc);
    let kv = &xv * xc.transpose() * &eig.eigenvectors;
    grid.iter()
        .map(|&lambda| {
            let mut scaled = b.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row /= eig.eigenvalues[i].max(0.0) + lambda;
            }
            (&kv * scaled - &yv).norm_squared() / (yv.nrows() * yv.ncols()) as f64
        })
        .collect()
}

/// Picks the feature set and ridge strength with the lowest held-out MSE. The
/// last `validation_fraction` of the surrogate rows are held out. Ties go to
/// the earlier feature set, then the smaller strength.
pub fn select_ridge(surrogate: &Surrogate, grid: &[f64], validation_fraction: f64) -> Result<RidgeSelection> {
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Config("ridge grid must hold positive values".into()));
    }
    let m = surrogate.len();
    let n_val = ((m as f64) * validation_fraction).round() as usize;
    if n_val == 0 || n_val + 2 > m {
        return Ok(RidgeSelection {
            lambda: grid[0],
            features: FeatureSet::Full,
            grid: grid.to_vec(),
            curves: Vec::new(),
        });
    }
    let curves: Vec<ValidationCurve> = FeatureSet::ALL
        .iter()
        .map(|&features| ValidationCurve {
            features,
            validation_mse: validation_curve(&surrogate.design(features), &surrogate.pixels, m - n_val, grid),
        })
        .collect();
    let mut best = (f64::INFINITY, FeatureSet::Full, grid[0]);
    for c in &curves {
        for (&lambda, &err) in grid.iter().zip(&c.validation_mse) {
            if err < best.0 {
                best = (err, c.features, lambda);
            }
        }
    }
    Ok(RidgeSelection {
        lambda: best.2,
        features: best.1,
        grid: grid.to_vec(),
        curves,
    })
}

impl InversionOracle {
    /// Raw (unclamped) prediction for each feature row.
    pub fn predict(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = features * &self.weights;
        for mut row in p.row_iter_mut() {
            row += self.bias.transpose();
        }
        p
    }

    pub fn mse(&self, s: &Surrogate) -> f64 {
        let p = self.predict(&s.features);
        (p - &s.pixels).norm_squared() / (s.pixels.nrows() * s.pixels.ncols()) as f64
    }

    /// Reconstructed image with pixels clamped to `[0, 1]`.
    pub fn reconstruct(&self, z: &TokenMatrix, shape: (usize, usize, usize)) -> Result<ToyImage> {
        let all = token_features(z, self.pad_length);
        let cols = self.features.columns(self.pad_length, z.dim());
        let f = DMatrix::from_row_slice(1, cols.len(), &all[cols]);
        let p = self.predict(&f);
        let pixels = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ToyImage::new(shape.0, shape.1, shape.2, pixels, 0)
    }
}

/// Mean SSIM over uniform 8x8 windows at stride 4, averaged over channels.
pub fn ssim(a: &ToyImage, b: &ToyImage) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::Shape(format!(
            "ssim of {}x{}x{} and {}x{}x{} images",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Shape(format!("images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..a.channels {
        for y0 in (0..=a.height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=a.width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (a.at(y, x, c), b.at(y, x, c));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub schedule: MergeSchedule,
    pub mean_ssim: f64,
    pub mean_comm_cost: f64,
    pub n_eval: usize,
}

/// Reconstructs every held-out image from what the receiver gets and scores it.
pub fn leakage_eval(
    schedule: &MergeSchedule,
    oracle: &InversionOracle,
    holdout: &EvalSet,
    pipeline: &Pipeline,
    seed: u64,
) -> Result<LeakageReport> {
    if holdout.is_empty() {
        return Err(Error::Config("empty holdout set".into()));
    }
    let pipeline = pipeline.with_channel_seed(seed);
    let scored: Vec<(f64, usize)> = schedule.with_merger(|merge| {
        pipeline.exec.try_map(&holdout.images, |i, img| {
            let z = pipeline.received_tokens(img, merge, holdout.ids[i])?;
            let rec = oracle.reconstruct(&z, (img.height, img.width, img.channels))?;
            Ok((ssim(img, &rec)?, z.n_tokens()))
        })
    })?;
    let n = scored.len() as f64;
    Ok(LeakageReport {
        schedule: schedule.clone(),
        mean_ssim: scored.iter().map(|s| s.0).sum::<f64>() / n,
        mean_comm_cost: scored.iter().map(|s| s.1 as f64).sum::<f64>() / n,
        n_eval: scored.len(),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}
