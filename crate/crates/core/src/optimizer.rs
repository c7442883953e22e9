//! Multi-objective Bayesian optimization over threshold policies, and the
//! baseline searches it is compared against.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::objectives::{
    constant_threshold_policy, EvalRecord, Evaluator, MergePolicy, MergeSchedule, TAU_MAX, TAU_MIN,
};
use crate::pareto::{non_dominated_indices, Normalizer, ParetoFront, Point3};
use crate::seed;
use crate::sobol::Sobol;
use crate::surrogate::{fit_with_report, FitOptions, GpModel, KernelParams};

/// Reference margin beyond the worst initial objective values.
pub const REFERENCE_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bo,
    Random,
    Sobol,
    ConstantThreshold,
    FixedRatio,
}

impl Method {
    pub const BASELINES: [Method; 4] = [
        Method::Random,
        Method::Sobol,
        Method::ConstantThreshold,
        Method::FixedRatio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bo => "bo",
            Method::Random => "random",
            Method::Sobol => "sobol",
            Method::ConstantThreshold => "constant_threshold",
            Method::FixedRatio => "fixed_ratio",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Bo, Method::Random, Method::Sobol, Method::ConstantThreshold, Method::FixedRatio]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    pub n_init: usize,
    pub budget: usize,
    pub candidate_pool_size: usize,
    pub mc_samples: usize,
    /// Gaussian perturbations drawn around each incumbent Pareto policy.
    pub perturbations: usize,
    pub perturbation_sigma: f64,
    /// Hyperparameters are re-optimized every iteration up to this many
    /// records, then every `refit_interval` iterations.
    pub refit_all_until: usize,
    pub refit_interval: usize,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n_init: 20,
            budget: 100,
            candidate_pool_size: 512,
            mc_samples: 128,
            perturbations: 10,
            perturbation_sigma: 0.02,
            refit_all_until: 200,
            refit_interval: 5,
            fit: FitOptions::default(),
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.n_init < 2 * (layers + 1) {
            return Err(Error::Config(format!(
                "bo.n_init = {} must be at least 2(L+1) = {}",
                self.n_init,
                2 * (layers + 1)
            )));
        }
        if self.budget <= self.n_init {
            return Err(Error::Config(format!(
                "bo.budget = {} must exceed bo.n_init = {}",
                self.budget, self.n_init
            )));
        }
        if self.candidate_pool_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("bo.candidate_pool_size and bo.mc_samples must be positive".into()));
        }
        if !(self.perturbation_sigma >= 0.0) || self.refit_interval == 0 || self.fit.restarts == 0 {
            return Err(Error::Config(
                "bo.perturbation_sigma must be >= 0, bo.refit_interval and bo.fit.restarts positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration surrogate state, kept for relevance analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub n_train: usize,
    pub refit: bool,
    /// Hyperparameters of the `-A`, `F`, `C` models.
    pub hyperparameters: Vec<KernelParams>,
    pub best_ehvi: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone)]
pub struct SearchTrace {
    pub method: Method,
    pub records: Vec<EvalRecord>,
    /// Normalized hypervolume after each evaluation.
    pub hv_curve: Vec<f64>,
    pub normalizer: Normalizer,
    pub iterations: Vec<IterationLog>,
}

impl SearchTrace {
    pub fn objectives(&self) -> Vec<Point3> {
        self.records.iter().map(|r| r.objectives.as_array()).collect()
    }

    /// Indices of the non-dominated records.
    pub fn pareto_indices(&self) -> Vec<usize> {
        non_dominated_indices(&self.objectives())
    }

    pub fn pareto_records(&self) -> Vec<&EvalRecord> {
        self.pareto_indices().into_iter().map(|i| &self.records[i]).collect()
    }

    pub fn final_hv(&self) -> f64 {
        self.hv_curve.last().copied().unwrap_or(0.0)
    }
}

/// Normalized hypervolume of every prefix of `points`.
pub fn hv_curve(points: &[Point3], normalizer: &Normalizer) -> Vec<f64> {
    let mut kept: Vec<Point3> = Vec::new();
    let mut hv = 0.0;
    points
        .iter()
        .map(|p| {
            let q = normalizer.normalize(p);
            if q.iter().all(|v| *v < 1.0) {
                let front = ParetoFront::clipped(&kept, [1.0; 3]);
                let gain = front.hvi(&q);
                if gain > 0.0 {
                    kept.push(q);
                    kept = front_points(&kept);
                    hv += gain;
                }
            }
            hv
        })
        .collect()
}

fn front_points(points: &[Point3]) -> Vec<Point3> {
    non_dominated_indices(points).into_iter().map(|i| points[i]).collect()
}

fn unit_to_policy(u: &[f64]) -> MergePolicy {
    MergePolicy::from_unit(u).expect("unit-cube point maps into bounds")
}

/// First `n` points of a seeded Sobol sequence mapped onto `[0.5, 1]^L`.
pub fn sobol_policies(n: usize, layers: usize, seed: u64) -> Result<Vec<MergePolicy>> {
    let s = Sobol::new(layers, seed)?;
    Ok((0..n as u64).map(|i| unit_to_policy(&s.point(i))).collect())
}

/// Uniform random policies in `[0.5, 1]^L`.
pub fn random_policies(n: usize, layers: usize, seed: u64) -> Vec<MergePolicy> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            let u: Vec<f64> = (0..layers).map(|_| rng.random::<f64>()).collect();
            unit_to_policy(&u)
        })
        .collect()
}

/// Standard-normal draws shared by every candidate of one acquisition step.
#[derive(Debug, Clone)]
pub struct CommonDraws {
    z: Vec<[f64; 3]>,
}

impl CommonDraws {
    pub fn new(samples: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let z = (0..samples)
            .map(|_| {
                [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ]
            })
            .collect();
        Self { z }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Monte-Carlo EHVI of an independent Gaussian with the given moments.
pub fn ehvi_from_moments(mean: &Point3, var: &Point3, front: &ParetoFront, draws: &CommonDraws) -> f64 {
    let sd = [var[0].max(0.0).sqrt(), var[1].max(0.0).sqrt(), var[2].max(0.0).sqrt()];
    if sd == [0.0; 3] {
        return front.hvi(mean);
    }
    let total: f64 = draws
        .z
        .iter()
        .map(|z| {
            let f = [mean[0] + sd[0] * z[0], mean[1] + sd[1] * z[1], mean[2] + sd[2] * z[2]];
            front.hvi(&f)
        })
        .sum();
    total / draws.len() as f64
}

/// Predictive means and variances of the three models at thresholds `x`.
pub fn predict3(models: &[GpModel; 3], x: &[f64]) -> (Point3, Point3) {
    let mut mean = [0.0; 3];
    let mut var = [0.0; 3];
    for k in 0..3 {
        let (m, v) = models[k].predict(x);
        mean[k] = m;
        var[k] = v;
    }
    (mean, var)
}

/// EHVI of policy `x` under the three models.
pub fn ehvi(models: &[GpModel; 3], front: &ParetoFront, x: &[f64], draws: &CommonDraws) -> f64 {
    let (mean, var) = predict3(models, x);
    ehvi_from_moments(&mean, &var, front, draws)
}

/// Index and value of the pool's EHVI maximizer; ties go to the earlier index.
pub fn propose_next(
    models: &[GpModel; 3],
    front: &ParetoFront,
    pool: &[MergePolicy],
    draws: &CommonDraws,
    exec: Execution,
) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(Error::Config("empty candidate pool".into()));
    }
    let scores = exec.map(pool, |_, p| ehvi(models, front, p.thresholds(), draws));
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores[best]))
}

/// Fresh Sobol batch followed by clipped Gaussian perturbations of each incumbent.
pub fn candidate_pool(
    layers: usize,
    incumbents: &[&MergePolicy],
    cfg: &BoConfig,
    seed: u64,
) -> Result<Vec<MergePolicy>> {
    let mut pool = sobol_policies(cfg.candidate_pool_size, layers, seed::derive(seed, "pool"))?;
    let mut rng = seed::rng(seed::derive(seed, "perturb"));
    for inc in incumbents {
        for _ in 0..cfg.perturbations {
            let t: Vec<f64> = inc
                .thresholds()
                .iter()
                .map(|&t| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (t + cfg.perturbation_sigma * e).clamp(TAU_MIN, TAU_MAX)
                })
                .collect();
            pool.push(MergePolicy::new(t)?);
        }
    }
    Ok(pool)
}

fn evaluate_logged(
    evaluator: &dyn Evaluator,
    schedule: &MergeSchedule,
    records: &[EvalRecord],
    sink: &mut dyn FnMut(&EvalRecord) -> Result<()>,
) -> Result<EvalRecord> {
    let r = evaluator.evaluate(schedule).map_err(|e| Error::Evaluation {
        completed: records.len(),
        source: Box::new(e),
    })?;
    if !r.objectives.is_finite() {
        return Err(Error::Evaluation {
            completed: records.len(),
            source: Box::new(Error::Numerical("non-finite objective".into())),
        });
    }
    sink(&r)?;
    Ok(r)
}

/// Runs the BO loop. Every completed evaluation is passed to `sink` before the
/// next one starts, so a failure leaves the partial set on disk.
pub fn run_bo_with(
    cfg: &BoConfig,
    evaluator: &dyn Evaluator,
    exec: Execution,
    sink: &mut dyn FnMut(&EvalRecord) -> Result<()>,
) -> Result<SearchTrace> {
    let layers = evaluator.n_layers();
    cfg.validate(layers)?;
    let mut records: Vec<EvalRecord> = Vec::with_capacity(cfg.budget);
    for p in sobol_policies(cfg.n_init, layers, seed::derive(cfg.seed, "init"))? {
        let r = evaluate_logged(evaluator, &MergeSchedule::threshold(p), &records, sink)?;
        records.push(r);
    }
    let raw: Vec<Point3> = records.iter().map(|r| r.objectives.as_array()).collect();
    let normalizer = Normalizer::from_points(&raw, REFERENCE_MARGIN)?;

    let mut iterations = Vec::new();
    let mut previous: Option<Vec<KernelParams>> = None;
    let mut iteration = 0;
    while records.len() < cfg.budget {
        let inputs: Vec<Vec<f64>> = records
            .iter()
            .map(|r| r.policy().expect("bo evaluates threshold policies").thresholds().to_vec())
            .collect();
        let normed: Vec<Point3> = records
            .iter()
            .map(|r| normalizer.normalize_objectives(&r.objectives))
            .collect();
        let refit = records.len() <= cfg.refit_all_until || iteration % cfg.refit_interval == 0;
        let fitted: Vec<Result<GpModel>> = exec.map_range(3, |k| {
            let y: Vec<f64> = normed.iter().map(|p| p[k]).collect();
            let warm = previous.as_ref().map(|v| &v[k]);
            match (refit, warm) {
                (false, Some(w)) => GpModel::with_params(inputs.clone(), &y, w.clone()),
                _ => fit_with_report(inputs.clone(), &y, cfg.fit, warm).map(|(m, _)| m),
            }
        });
        let mut models = Vec::with_capacity(3);
        for m in fitted {
            models.push(m?);
        }
        let models: [GpModel; 3] = models.try_into().expect("three models");
        let params: Vec<KernelParams> = models.iter().map(|m| m.params().clone()).collect();

        let front = ParetoFront::clipped(&normed, [1.0; 3]);
        let pareto = non_dominated_indices(&normed);
        let incumbents: Vec<&MergePolicy> = pareto
            .iter()
            .filter_map(|&i| records[i].policy())
            .collect();
        let step_seed = seed::derive_indexed(seed::derive(cfg.seed, "iteration"), iteration as u64);
        let pool = candidate_pool(layers, &incumbents, cfg, step_seed)?;
        let draws = CommonDraws::new(cfg.mc_samples, seed::derive(step_seed, "mc"));
        let (best, value) = propose_next(&models, &front, &pool, &draws, exec)?;

        iterations.push(IterationLog {
            iteration,
            n_train: records.len(),
            refit,
            hyperparameters: params.clone(),
            best_ehvi: value,
            pool_size: pool.len(),
        });
        previous = Some(params);
        let r = evaluate_logged(evaluator, &MergeSchedule::threshold(pool[best].clone()), &records, sink)?;
        records.push(r);
        iteration += 1;
    }

    let points: Vec<Point3> = records.iter().map(|r| r.objectives.as_array()).collect();
    Ok(SearchTrace {
        method: Method::Bo,
        hv_curve: hv_curve(&points, &normalizer),
        records,
        normalizer,
        iterations,
    })
}

pub fn run_bo(cfg: &BoConfig, evaluator: &dyn Evaluator, exec: Execution) -> Result<SearchTrace> {
    run_bo_with(cfg, evaluator, exec, &mut |_| Ok(()))
}

/// Schedules a baseline evaluates, in order.
pub fn baseline_schedules(method: Method, budget: usize, layers: usize, n_tokens: usize, seed: u64) -> Result<Vec<MergeSchedule>> {
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    let schedules = match method {
        Method::Bo => return Err(Error::Config("bo is not a baseline".into())),
        Method::Random => random_policies(budget, layers, seed)
            .into_iter()
            .map(MergeSchedule::threshold)
            .collect(),
        Method::Sobol => sobol_policies(budget, layers, seed)?
            .into_iter()
            .map(MergeSchedule::threshold)
            .collect(),
        Method::ConstantThreshold => {
            let mut v = Vec::new();
            for k in 0..=50 {
                v.push(MergeSchedule::threshold(constant_threshold_policy(
                    layers,
                    TAU_MIN + k as f64 / 100.0,
                )?));
            }
            v.into_iter().take(budget).collect()
        }
        Method::FixedRatio => (0..=n_tokens / 2)
            .map(|r| MergeSchedule::FixedRatio { r })
            .take(budget)
            .collect(),
    };
    Ok(schedules)
}

/// Runs a baseline. Without a normalizer the reference box is taken from all
/// of the baseline's own evaluations.
pub fn run_baseline_with(
    method: Method,
    budget: usize,
    evaluator: &dyn Evaluator,
    seed: u64,
    normalizer: Option<Normalizer>,
    sink: &mut dyn FnMut(&EvalRecord) -> Result<()>,
) -> Result<SearchTrace> {
    let schedules = baseline_schedules(method, budget, evaluator.n_layers(), evaluator.n_tokens(), seed)?;
    let mut records = Vec::with_capacity(schedules.len());
    for s in &schedules {
        let r = evaluate_logged(evaluator, s, &records, sink)?;
        records.push(r);
    }
    let points: Vec<Point3> = records.iter().map(|r| r.objectives.as_array()).collect();
    let normalizer = match normalizer {
        Some(n) => n,
        None => Normalizer::from_points(&points, REFERENCE_MARGIN)?,
    };
    Ok(SearchTrace {
        method,
        hv_curve: hv_curve(&points, &normalizer),
        records,
        normalizer,
        iterations: Vec::new(),
    })
}

pub fn run_baseline(
    method: Method,
    budget: usize,
    evaluator: &dyn Evaluator,
    seed: u64,
    normalizer: Option<Normalizer>,
) -> Result<SearchTrace> {
    run_baseline_with(method, budget, evaluator, seed, normalizer, &mut |_| Ok(()))
}
