//! Gaussian-process regression with a Matérn-5/2 ARD kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sobol::Sobol;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest noise variance the fit may choose.
pub const NOISE_FLOOR: f64 = 1e-6;
const NOISE_CEIL: f64 = 1.0;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Domain width of one policy coordinate.
const DOMAIN_WIDTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, length_scales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(signal_variance) || !ok(noise_variance) || length_scales.is_empty() || !length_scales.iter().all(|&l| ok(l))
        {
            return Err(Error::Numerical("kernel parameters must be finite and positive".into()));
        }
        Ok(Self {
            signal_variance,
            length_scales,
            noise_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// `[ln σ_f², ln ℓ_1, .., ln ℓ_L, ln noise]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.signal_variance.ln());
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let l = theta.len() - 2;
        Self {
            signal_variance: theta[0].exp(),
            length_scales: theta[1..=l].iter().map(|t| t.exp()).collect(),
            noise_variance: theta[l + 1].exp(),
        }
    }
}

/// Matérn-5/2 kernel with one length-scale per input dimension.
pub fn matern52_ard(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(y)
        .zip(&p.length_scales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    matern52_from_r2(r2, p.signal_variance)
}

fn matern52_from_r2(r2: f64, signal_variance: f64) -> f64 {
    let r = r2.sqrt();
    signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// Gram matrix without noise, row-major.
pub fn gram(inputs: &[Vec<f64>], p: &KernelParams) -> Vec<f64> {
    let n = inputs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = matern52_ard(&inputs[i], &inputs[j], p);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// In-place lower Cholesky factor of a row-major SPD matrix.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let d = a[j * n + j] - dot(&a[j * n..j * n + j], &a[j * n..j * n + j]);
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        let (head, tail) = a.split_at_mut((j + 1) * n);
        let row_j = &head[j * n..j * n + j];
        for i in j + 1..n {
            let row_i = &mut tail[(i - j - 1) * n..(i - j) * n];
            row_i[j] = (row_i[j] - dot(&row_i[..j], row_j)) / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        b[i] = (b[i] - dot(&l[i * n..i * n + i], &b[..i])) / l[i * n + i];
    }
}

fn solve_upper_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Factorizes `K + noise I`, escalating jitter on failure. Returns the factor and jitter used.
fn factorize(mut k: Vec<f64>, n: usize, noise: f64) -> Result<(Vec<f64>, f64)> {
    for i in 0..n {
        k[i * n + i] += noise;
    }
    let mut jitter = 0.0;
    loop {
        let mut a = k.clone();
        if jitter > 0.0 {
            for i in 0..n {
                a[i * n + i] += jitter;
            }
        }
        if cholesky(&mut a, n) {
            return Ok((a, jitter));
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * 1.000_001 {
            return Err(Error::Numerical("kernel matrix not positive definite after jitter".into()));
        }
    }
}

/// Affine target standardization `y = mean + std * s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    pub fn from_targets(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 },
        }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, s: f64) -> f64 {
        self.mean + self.std * s
    }
}

/// A conditioned GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    params: KernelParams,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    standardization: Standardization,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    log_marginal: f64,
}

impl GpModel {
    /// Conditions on data with fixed hyperparameters.
    pub fn condition(
        inputs: Vec<Vec<f64>>,
        targets: &[f64],
        params: KernelParams,
        standardization: Standardization,
    ) -> Result<Self> {
        validate_data(&inputs, targets, params.dim())?;
        let n = inputs.len();
        let y: Vec<f64> = targets.iter().map(|&t| standardization.forward(t)).collect();
        let (chol, jitter) = factorize(gram(&inputs, &params), n, params.noise_variance)?;
        let mut alpha = y.clone();
        solve_lower(&chol, n, &mut alpha);
        let quad: f64 = alpha.iter().map(|a| a * a).sum();
        solve_upper_t(&chol, n, &mut alpha);
        let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
        let log_marginal = -0.5 * quad - log_det - 0.5 * n as f64 * LN_2PI;
        Ok(Self {
            params,
            inputs,
            targets: y,
            standardization,
            chol,
            alpha,
            jitter,
            log_marginal,
        })
    }

    /// Conditions with targets standardized from the data.
    pub fn with_params(inputs: Vec<Vec<f64>>, targets: &[f64], params: KernelParams) -> Result<Self> {
        let s = Standardization::from_targets(targets);
        Self::condition(inputs, targets, params, s)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn n_train(&self) -> usize {
        self.inputs.len()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Standardized training targets.
    pub fn standardized_targets(&self) -> &[f64] {
        &self.targets
    }

    /// Predictive mean and variance (noise included) in target units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let mut k: Vec<f64> = self.inputs.iter().map(|xi| matern52_ard(x, xi, &self.params)).collect();
        let mean: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        solve_lower(&self.chol, n, &mut k);
        let explained: f64 = k.iter().map(|v| v * v).sum();
        let var = (self.params.signal_variance + self.params.noise_variance - explained).max(0.0);
        let s = self.standardization.std;
        (self.standardization.inverse(mean), var * s * s)
    }
}

fn validate_data(inputs: &[Vec<f64>], targets: &[f64], dim: usize) -> Result<()> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.iter().any(|x| x.len() != dim) {
        return Err(Error::Shape(format!("inputs must have dimension {dim}")));
    }
    if !targets.iter().all(|t| t.is_finite()) {
        return Err(Error::Numerical("non-finite target".into()));
    }
    Ok(())
}

/// Settings of the marginal-likelihood search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_evals: 200,
        }
    }
}

struct Objective<'a> {
    // squared coordinate differences of each strictly-lower pair, dimension-contiguous
    sq: Vec<f64>,
    dim: usize,
    y: &'a [f64],
    n: usize,
    bounds: Vec<(f64, f64)>,
}

impl Objective<'_> {
    fn new<'a>(inputs: &[Vec<f64>], y: &'a [f64]) -> Objective<'a> {
        let n = inputs.len();
        let dim = inputs[0].len();
        let mut sq = Vec::with_capacity(n * (n - 1) / 2 * dim);
        for i in 0..n {
            for j in 0..i {
                sq.extend(inputs[i].iter().zip(&inputs[j]).map(|(a, b)| (a - b) * (a - b)));
            }
        }
        let mut bounds = vec![(1e-3f64.ln(), 1e2f64.ln())];
        bounds.extend(std::iter::repeat_n((1e-3f64.ln(), 1e2f64.ln()), dim));
        bounds.push((NOISE_FLOOR.ln(), NOISE_CEIL.ln()));
        Objective { sq, dim, y, n, bounds }
    }

    fn clamp(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.bounds)
            .map(|(&t, &(lo, hi))| t.clamp(lo, hi))
            .collect()
    }

    fn log_marginal(&self, theta: &[f64]) -> Option<f64> {
        let p = KernelParams::from_log(theta);
        let n = self.n;
        let inv_l2: Vec<f64> = p.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        // only the lower triangle is read by the factorization
        let mut k = vec![0.0; n * n];
        let mut pairs = self.sq.chunks_exact(self.dim);
        for i in 0..n {
            for j in 0..i {
                let d = pairs.next().expect("one entry per pair");
                let r2: f64 = d.iter().zip(&inv_l2).map(|(m, w)| m * w).sum();
                k[i * n + j] = matern52_from_r2(r2, p.signal_variance);
            }
            k[i * n + i] = p.signal_variance;
        }
        let (chol, _) = factorize(k, n, p.noise_variance).ok()?;
        let mut a = self.y.to_vec();
        solve_lower(&chol, n, &mut a);
        let quad: f64 = a.iter().map(|v| v * v).sum();
        let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
        Some(-0.5 * quad - log_det - 0.5 * n as f64 * LN_2PI)
    }

    /// Log marginal likelihood plus log prior, `-inf` where undefined.
    fn value(&self, theta: &[f64]) -> f64 {
        let t = self.clamp(theta);
        match self.log_marginal(&t) {
            Some(lml) => lml + log_prior(&t),
            None => f64::NEG_INFINITY,
        }
    }
}

fn log_normal_term(x: f64, center: f64, scale: f64) -> f64 {
    -0.5 * ((x - center) / scale).powi(2)
}

/// Log prior over `[ln σ_f², ln ℓ.., ln noise]`, up to a constant.
pub fn log_prior(theta: &[f64]) -> f64 {
    let l = theta.len() - 2;
    let ls_center = (0.25 * DOMAIN_WIDTH).ln();
    let mut lp = log_normal_term(theta[0], 0.0, 1.0);
    lp += theta[1..=l].iter().map(|&t| log_normal_term(t, ls_center, 1.0)).sum::<f64>();
    lp += log_normal_term(theta[l + 1], 1e-2f64.ln(), 2.0);
    lp
}

/// The restart points of the hyperparameter search, in log space.
pub fn restart_points(dim: usize, restarts: usize) -> Vec<Vec<f64>> {
    let ls_center = (0.25 * DOMAIN_WIDTH).ln();
    let sobol = Sobol::unscrambled((dim + 2).min(crate::sobol::MAX_DIM)).expect("dimension checked");
    (0..restarts as u64)
        .map(|i| {
            // skip the origin so the first start is the box centre
            let u = sobol.point(i + 1);
            let at = |j: usize| u[j.min(u.len() - 1)];
            let mut theta = Vec::with_capacity(dim + 2);
            theta.push(-1.0 + 2.0 * at(0));
            for d in 0..dim {
                theta.push(ls_center - 1.5 + 3.0 * at(d + 1));
            }
            theta.push(1e-5f64.ln() + (1e-1f64.ln() - 1e-5f64.ln()) * at(dim + 1));
            theta
        })
        .collect()
}

/// Record of one hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Objective value (log marginal likelihood + log prior) at each start.
    pub start_values: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
}

/// Fits hyperparameters by maximizing log marginal likelihood plus log prior.
pub fn fit(inputs: Vec<Vec<f64>>, targets: &[f64], options: FitOptions) -> Result<GpModel> {
    fit_with_report(inputs, targets, options, None).map(|(m, _)| m)
}

/// Like [`fit`], optionally adding a warm-start point to the restart grid.
pub fn fit_with_report(
    inputs: Vec<Vec<f64>>,
    targets: &[f64],
    options: FitOptions,
    warm_start: Option<&KernelParams>,
) -> Result<(GpModel, FitReport)> {
    if inputs.len() < 2 {
        return Err(Error::Shape("fitting needs at least two observations".into()));
    }
    let dim = inputs[0].len();
    validate_data(&inputs, targets, dim)?;
    let standardization = Standardization::from_targets(targets);
    let y: Vec<f64> = targets.iter().map(|&t| standardization.forward(t)).collect();
    let obj = Objective::new(&inputs, &y);

    let mut starts = restart_points(dim, options.restarts.max(1));
    if let Some(w) = warm_start.filter(|w| w.dim() == dim) {
        starts.push(obj.clamp(&w.to_log()));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut start_values = Vec::with_capacity(starts.len());
    let mut evaluations = 0;
    for s in &starts {
        start_values.push(obj.value(s));
        let (theta, v, used) = nelder_mead(|t| -obj.value(t), s, 0.5, options.max_evals);
        evaluations += used;
        let v = -v;
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((obj.clamp(&theta), v));
        }
    }
    let (theta, best_value) = best.expect("at least one start");
    if !best_value.is_finite() {
        return Err(Error::Numerical("no restart produced a finite marginal likelihood".into()));
    }
    let model = GpModel::condition(inputs, targets, KernelParams::from_log(&theta), standardization)?;
    Ok((
        model,
        FitReport {
            start_values,
            best_value,
            evaluations,
        },
    ))
}

/// Minimizes `f` with the Nelder–Mead simplex. Returns (argmin, min, evaluations).
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let nan_to_inf = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut values: Vec<f64> = simplex.iter().map(|x| nan_to_inf(f(x))).collect();
    let mut evals = n + 1;

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() < 1e-10 * (1.0 + values[0].abs()) {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let xr = along(-1.0);
        let fr = nan_to_inf(f(&xr));
        evals += 1;
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = nan_to_inf(f(&xe));
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-0.5);
                let v = nan_to_inf(f(&x));
                (x, v)
            } else {
                let x = along(0.5);
                let v = nan_to_inf(f(&x));
                (x, v)
            };
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, x)| b + 0.5 * (x - b))
                        .collect();
                    values[i] = nan_to_inf(f(&simplex[i]));
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).expect("nonempty simplex");
    (simplex[best].clone(), values[best], evals)
}
