//! Experiment harness: builds the pipeline from a config and implements the
//! command-line subcommands on top of it.

pub mod artifacts;
pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::encoder::{generate_dataset, DatasetParams, EncoderWeights, PrototypeHead, SplitManifest, ToyImage};
use crate::error::{Error, Result};
use crate::objectives::{
    constant_threshold_policy, EvalRecord, EvalSet, MergePolicy, MergeSchedule, Pipeline, PipelineEvaluator,
    TAU_MIN,
};
use crate::optimizer::{hv_curve, run_baseline_with, run_bo_with, BoConfig, Method, SearchTrace};
use crate::pareto::{non_dominated_indices, Normalizer, Point3};
use crate::privacy::{build_surrogate, fit_inversion_with, leakage_eval, select_ridge, spearman, FeatureSet, LeakageReport};
use crate::seed::{self, SeedStreams};

use artifacts::*;
pub use config::{ExperimentConfig, EXAMPLE_CONFIG};

/// Everything derived deterministically from a config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub streams: SeedStreams,
    pub images: Vec<ToyImage>,
    pub splits: SplitManifest,
    /// Pipeline at the operating SNR.
    pub pipeline: Pipeline,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let streams = SeedStreams::from_root(config.root_seed);
        let enc_cfg = config.encoder.to_config();
        let encoder = EncoderWeights::random(enc_cfg, streams.encoder)?;
        let d = &config.data;
        let mut params = DatasetParams::new(streams.data, d.n_samples, d.classes, d.redundancy);
        params.image_size = enc_cfg.image_size;
        params.patch = enc_cfg.patch;
        params.channels = enc_cfg.channels;
        let images = generate_dataset(&params)?;
        let splits = SplitManifest::build(d.n_samples, &d.splits, seed::derive(streams.data, "splits"))?;
        splits.check_disjoint()?;
        let calibration: Vec<ToyImage> = splits.calibration.iter().map(|&i| images[i].clone()).collect();
        let head = PrototypeHead::calibrate(&encoder, &calibration, d.classes, config.execution)?;
        let channel = ChannelConfig {
            snr_db: config.channel.snr_db,
            seed: streams.channel,
            codec: config.channel.codec,
        };
        let pipeline = Pipeline::new(encoder, head, channel, config.execution)?;
        Ok(Self {
            config,
            streams,
            images,
            splits,
            pipeline,
        })
    }

    pub fn load(config_path: &Path) -> Result<Self> {
        Self::build(ExperimentConfig::load(config_path)?)
    }

    pub fn layers(&self) -> usize {
        self.config.encoder.layers
    }

    pub fn set(&self, indices: &[usize]) -> EvalSet {
        EvalSet::from_indices(&self.images, indices)
    }

    pub fn search_set(&self) -> EvalSet {
        self.set(&self.splits.search_subset)
    }

    pub fn evaluation_set(&self) -> EvalSet {
        self.set(&self.splits.evaluation)
    }

    pub fn bo_config(&self) -> BoConfig {
        self.config.bo.to_config(self.streams.bo)
    }

    pub fn baseline_seed(&self, method: Method) -> u64 {
        seed::derive(self.streams.bo, method.as_str())
    }
}

fn identity_policy(layers: usize) -> MergePolicy {
    MergePolicy::constant(layers, 1.0).expect("1.0 is in bounds")
}

/// Re-evaluates the non-dominated records of `trace` on the full evaluation split.
pub fn reevaluate_pareto(exp: &Experiment, trace: &SearchTrace) -> Result<Vec<ParetoRow>> {
    let full = exp.evaluation_set();
    let mut rows = Vec::new();
    for id in trace.pareto_indices() {
        let r = &trace.records[id];
        let Some(policy) = r.policy() else { continue };
        let full_r = exp.pipeline.evaluate(&r.schedule, &full)?;
        rows.push(ParetoRow {
            id,
            accuracy: full_r.objectives.accuracy(),
            gflops: full_r.objectives.gflops(),
            comm_cost: full_r.objectives.comm_cost,
            search_accuracy: r.objectives.accuracy(),
            search_gflops: r.objectives.gflops(),
            search_comm_cost: r.objectives.comm_cost,
            thresholds: policy.thresholds().to_vec(),
        });
    }
    Ok(rows)
}

#[derive(Debug)]
pub struct BoRun {
    pub trace: SearchTrace,
    pub pareto: Vec<ParetoRow>,
    pub manifest: RunManifest,
}

/// Search on the subset, re-evaluate the Pareto set on the full split, and
/// write the manifest, evaluation log, Pareto CSV and HV curve into `out`.
pub fn run_bo(exp: &Experiment, out: &Path) -> Result<BoRun> {
    create_dir(out)?;
    let search = exp.search_set();
    let evaluator = PipelineEvaluator {
        pipeline: &exp.pipeline,
        set: &search,
    };
    let mut log = JsonlWriter::create(&out.join(EVALUATIONS), exp.config.record_wall_time)?;
    let start = Instant::now();
    let trace = run_bo_with(&exp.bo_config(), &evaluator, exp.config.execution, &mut |r| log.append(r))?;
    let search_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let pareto = reevaluate_pareto(exp, &trace)?;
    let reevaluation_seconds = start.elapsed().as_secs_f64();

    write_pareto(&out.join(PARETO), &pareto, exp.layers())?;
    write_hv_curve(&out.join(HV_CURVE), &trace.hv_curve)?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        tool_version: tool_version(),
        config_hash: exp.config.hash(),
        config: exp.config.clone(),
        seeds: exp.streams,
        normalizer: trace.normalizer,
        n_records: trace.records.len(),
        pareto_ids: trace.pareto_indices(),
        hv_final: trace.final_hv(),
        iterations: trace.iterations.clone(),
        timing: Timing {
            search_seconds,
            reevaluation_seconds,
        },
    };
    manifest.save(out)?;
    Ok(BoRun {
        trace,
        pareto,
        manifest,
    })
}

/// Runs a baseline on the search subset. With a run directory the baseline is
/// scored against that run's frozen reference box and written under
/// `<run>/baselines/`; otherwise it uses its own box and writes under `out`.
pub fn run_baseline(exp: &Experiment, method: Method, budget: usize, run_dir: Option<&Path>, out: &Path) -> Result<SearchTrace> {
    let normalizer = match run_dir {
        Some(d) => Some(RunManifest::load(d)?.normalizer),
        None => None,
    };
    let dir = run_dir.map_or_else(|| out.join(BASELINE_DIR), |d| d.join(BASELINE_DIR));
    create_dir(&dir)?;
    let search = exp.search_set();
    let evaluator = PipelineEvaluator {
        pipeline: &exp.pipeline,
        set: &search,
    };
    let mut log = JsonlWriter::create(&dir.join(format!("{method}.jsonl")), exp.config.record_wall_time)?;
    let trace = run_baseline_with(
        method,
        budget,
        &evaluator,
        exp.baseline_seed(method),
        normalizer,
        &mut |r| log.append(r),
    )?;
    write_hv_curve(&dir.join(format!("{method}_hv.csv")), &trace.hv_curve)?;
    Ok(trace)
}

/// Evaluates one schedule on the full evaluation split, at the operating SNR
/// unless `snr_db` overrides it.
pub fn eval_policy(exp: &Experiment, schedule: &MergeSchedule, snr_db: Option<f64>) -> Result<EvalRecord> {
    if let Some(p) = schedule.policy() {
        if p.len() != exp.layers() {
            return Err(Error::Config(format!(
                "policy has {} thresholds, encoder has {} layers",
                p.len(),
                exp.layers()
            )));
        }
    }
    let pipeline = match snr_db {
        Some(s) => exp.pipeline.with_snr(s),
        None => exp.pipeline.clone(),
    };
    pipeline.evaluate(schedule, &exp.evaluation_set())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub method: String,
    pub label: String,
    pub accuracy: f64,
    pub accuracy_se: f64,
    pub comm_cost: f64,
    pub gflops: f64,
}

/// The schedules compared in the SNR sweep, each with its method and label.
pub fn sweep_schedules(exp: &Experiment, pareto: &[ParetoRow]) -> Result<Vec<(String, String, MergeSchedule)>> {
    if pareto.is_empty() {
        return Err(Error::Config("snr sweep needs at least one Pareto policy".into()));
    }
    let budget = match exp.config.channel.sweep_budget_tokens {
        Some(b) => b,
        None => {
            let mut c: Vec<f64> = pareto.iter().map(|r| r.comm_cost).collect();
            c.sort_by(f64::total_cmp);
            c[(c.len() - 1) / 2]
        }
    };
    let nearest = |costs: &[f64]| -> usize {
        (0..costs.len())
            .min_by(|&a, &b| (costs[a] - budget).abs().total_cmp(&(costs[b] - budget).abs()))
            .expect("nonempty")
    };
    let layers = exp.layers();
    let full = exp.evaluation_set();
    let noiseless = exp.pipeline.with_snr(f64::INFINITY);

    let bo = &pareto[nearest(&pareto.iter().map(|r| r.comm_cost).collect::<Vec<_>>())];
    let taus: Vec<f64> = (0..=50).map(|k| TAU_MIN + k as f64 / 100.0).collect();
    let mut tau_cost = Vec::new();
    for &t in &taus {
        let s = MergeSchedule::threshold(constant_threshold_policy(layers, t)?);
        tau_cost.push(noiseless.evaluate(&s, &full)?.objectives.comm_cost);
    }
    let tau0 = taus[nearest(&tau_cost)];
    let n0 = exp.config.encoder.to_config().n_tokens();
    let mut r_cost = Vec::new();
    for r in 0..=n0 / 2 {
        r_cost.push(noiseless.evaluate(&MergeSchedule::FixedRatio { r }, &full)?.objectives.comm_cost);
    }
    let r = nearest(&r_cost);
    Ok(vec![
        ("identity".into(), "identity".into(), MergeSchedule::threshold(identity_policy(layers))),
        (
            "bo_pareto".into(),
            format!("pareto_{}", bo.id),
            MergeSchedule::threshold(MergePolicy::new(bo.thresholds.clone())?),
        ),
        (
            "constant_threshold".into(),
            format!("tau0_{tau0}"),
            MergeSchedule::threshold(constant_threshold_policy(layers, tau0)?),
        ),
        ("fixed_ratio".into(), format!("r_{r}"), MergeSchedule::FixedRatio { r }),
    ])
}

/// Accuracy of every compared schedule at every sweep SNR on the full split.
pub fn snr_sweep(exp: &Experiment, schedules: &[(String, String, MergeSchedule)]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &snr in &exp.config.channel.sweep_snr_db {
        for (method, label, schedule) in schedules {
            let r = eval_policy(exp, schedule, Some(snr))?;
            let a = r.objectives.accuracy();
            rows.push(SweepRow {
                snr_db: snr,
                method: method.clone(),
                label: label.clone(),
                accuracy: a,
                accuracy_se: (a * (1.0 - a) / r.n_samples as f64).sqrt(),
                comm_cost: r.objectives.comm_cost,
                gflops: r.objectives.gflops(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.snr_db),
                r.method.clone(),
                r.label.clone(),
                num(r.accuracy),
                num(r.accuracy_se),
                num(r.comm_cost),
                num(r.gflops),
            ]
        })
        .collect();
    write_table(
        path,
        &["snr_db", "method", "policy", "A", "A_se", "C_tokens", "F_gflops"],
        &table,
    )
}

/// Sweep over the Pareto set stored in `run_dir` (or explicit policies) and
/// write `snr_sweep.csv` there.
pub fn cmd_snr_sweep(exp: &Experiment, run_dir: &Path, policies: Option<Vec<MergePolicy>>) -> Result<Vec<SweepRow>> {
    let pareto = match policies {
        Some(ps) => explicit_pareto_rows(exp, ps)?,
        None => read_pareto(&run_dir.join(PARETO))?,
    };
    let schedules = sweep_schedules(exp, &pareto)?;
    let rows = snr_sweep(exp, &schedules)?;
    create_dir(run_dir)?;
    write_sweep(&run_dir.join(SNR_SWEEP), &rows)?;
    Ok(rows)
}

fn explicit_pareto_rows(exp: &Experiment, policies: Vec<MergePolicy>) -> Result<Vec<ParetoRow>> {
    policies
        .into_iter()
        .enumerate()
        .map(|(id, p)| {
            let r = eval_policy(exp, &MergeSchedule::threshold(p.clone()), None)?;
            Ok(ParetoRow {
                id,
                accuracy: r.objectives.accuracy(),
                gflops: r.objectives.gflops(),
                comm_cost: r.objectives.comm_cost,
                search_accuracy: r.objectives.accuracy(),
                search_gflops: r.objectives.gflops(),
                search_comm_cost: r.objectives.comm_cost,
                thresholds: p.thresholds().to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRow {
    pub id: usize,
    pub policy_hash: String,
    pub accuracy: f64,
    pub comm_cost: f64,
    pub mean_ssim: f64,
    pub ridge_lambda: f64,
    pub features: FeatureSet,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub n_policies: usize,
    /// Rank correlation of mean token count and mean SSIM over the Pareto set.
    pub spearman_c_ssim: Option<f64>,
    pub identity_ssim: f64,
    pub identity_comm_cost: f64,
    pub most_aggressive_id: usize,
    pub most_aggressive_ssim: f64,
    pub most_aggressive_comm_cost: f64,
}

/// Fits the adversary for one schedule on the adversary split and scores it on
/// the hold-out split.
pub fn leakage_for(exp: &Experiment, schedule: &MergeSchedule) -> Result<(LeakageReport, f64, FeatureSet)> {
    let seed = exp.streams.privacy;
    let adversary = exp.set(&exp.splits.adversary);
    let holdout = exp.set(&exp.splits.holdout);
    let surrogate = build_surrogate(schedule, &adversary, &exp.pipeline, seed, None)?;
    let p = &exp.config.privacy;
    let sel = select_ridge(&surrogate, &p.ridge_grid, p.validation_fraction)?;
    let oracle = fit_inversion_with(&surrogate, sel.features, sel.lambda)?;
    Ok((leakage_eval(schedule, &oracle, &holdout, &exp.pipeline, seed)?, sel.lambda, sel.features))
}

pub fn privacy_eval(exp: &Experiment, pareto: &[ParetoRow]) -> Result<(Vec<PrivacyRow>, PrivacySummary)> {
    if pareto.is_empty() {
        return Err(Error::Config("privacy evaluation needs at least one Pareto policy".into()));
    }
    if exp.splits.adversary.len() < 2 || exp.splits.holdout.is_empty() {
        return Err(Error::Config("adversary and holdout splits must be non-empty".into()));
    }
    let mut rows = Vec::new();
    for p in pareto {
        let schedule = MergeSchedule::threshold(MergePolicy::new(p.thresholds.clone())?);
        let (rep, lambda, features) = leakage_for(exp, &schedule)?;
        rows.push(PrivacyRow {
            id: p.id,
            policy_hash: policy_hash(&p.thresholds),
            accuracy: p.accuracy,
            comm_cost: rep.mean_comm_cost,
            mean_ssim: rep.mean_ssim,
            ridge_lambda: lambda,
            features,
            n_eval: rep.n_eval,
        });
    }
    let (identity, ..) = leakage_for(exp, &MergeSchedule::threshold(identity_policy(exp.layers())))?;
    let aggressive = rows
        .iter()
        .min_by(|a, b| a.comm_cost.total_cmp(&b.comm_cost).then(a.id.cmp(&b.id)))
        .expect("nonempty");
    let c: Vec<f64> = rows.iter().map(|r| r.comm_cost).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.mean_ssim).collect();
    let summary = PrivacySummary {
        n_policies: rows.len(),
        spearman_c_ssim: spearman(&c, &s),
        identity_ssim: identity.mean_ssim,
        identity_comm_cost: identity.mean_comm_cost,
        most_aggressive_id: aggressive.id,
        most_aggressive_ssim: aggressive.mean_ssim,
        most_aggressive_comm_cost: aggressive.comm_cost,
    };
    Ok((rows, summary))
}

pub fn cmd_privacy_eval(exp: &Experiment, run_dir: &Path) -> Result<(Vec<PrivacyRow>, PrivacySummary)> {
    let pareto = read_pareto(&run_dir.join(PARETO))?;
    let (rows, summary) = privacy_eval(exp, &pareto)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.id.to_string(),
                r.policy_hash.clone(),
                num(r.accuracy),
                num(r.comm_cost),
                num(r.mean_ssim),
                num(r.ridge_lambda),
                match r.features {
                    FeatureSet::Full => "full",
                    FeatureSet::Summary => "summary",
                }
                .to_string(),
                r.n_eval.to_string(),
            ]
        })
        .collect();
    write_table(
        &run_dir.join(PRIVACY),
        &["id", "policy_hash", "A", "C_tokens", "mean_ssim", "ridge_lambda", "features", "n_eval"],
        &table,
    )?;
    let path = run_dir.join(PRIVACY_SUMMARY);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((rows, summary))
}

/// Files written by [`emit_plots`].
pub const PLOT_FILES: [&str; 4] = ["pareto_points.csv", "hv_curves.csv", "policy_profiles.csv", "token_trace.csv"];

/// Tidy plot inputs under `<run>/plots/`. Returns the written paths.
pub fn emit_plots(exp: &Experiment, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::load(run_dir)?;
    let records = read_jsonl(&run_dir.join(EVALUATIONS))?;
    let pareto = read_pareto(&run_dir.join(PARETO))?;
    let dir = run_dir.join(PLOT_DIR);
    create_dir(&dir)?;

    let points: Vec<Point3> = records.iter().map(|r| r.objectives.as_array()).collect();
    let front: std::collections::HashSet<usize> = non_dominated_indices(&points).into_iter().collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                num(r.objectives.accuracy()),
                num(r.objectives.gflops()),
                num(r.objectives.comm_cost),
                (!front.contains(&i)).to_string(),
            ]
        })
        .collect();
    let mut paths = Vec::new();
    let p = dir.join(PLOT_FILES[0]);
    write_table(&p, &["id", "A", "F_gflops", "C_tokens", "dominated"], &rows)?;
    paths.push(p);

    let mut hv_rows = curve_rows("bo", &hv_curve(&points, &manifest.normalizer));
    for m in Method::BASELINES {
        let f = run_dir.join(BASELINE_DIR).join(format!("{m}.jsonl"));
        if f.exists() {
            let pts: Vec<Point3> = read_jsonl(&f)?.iter().map(|r| r.objectives.as_array()).collect();
            hv_rows.extend(curve_rows(m.as_str(), &hv_curve(&pts, &manifest.normalizer)));
        }
    }
    let p = dir.join(PLOT_FILES[1]);
    write_table(&p, &["method", "iter", "hv"], &hv_rows)?;
    paths.push(p);

    let mut prof = Vec::new();
    for r in &pareto {
        for (l, t) in r.thresholds.iter().enumerate() {
            prof.push(vec![r.id.to_string(), (l + 1).to_string(), num(*t)]);
        }
    }
    let p = dir.join(PLOT_FILES[2]);
    write_table(&p, &["policy_id", "layer", "tau"], &prof)?;
    paths.push(p);

    let trace_rows = match median_cost_policy(&pareto) {
        Some(row) => token_trace(exp, &MergePolicy::new(row.thresholds.clone())?)?,
        None => Vec::new(),
    };
    let p = dir.join(PLOT_FILES[3]);
    write_table(&p, &["sample_id", "layer", "n_tokens"], &trace_rows)?;
    paths.push(p);
    Ok(paths)
}

fn curve_rows(method: &str, hv: &[f64]) -> Vec<Vec<String>> {
    hv.iter()
        .enumerate()
        .map(|(i, h)| vec![method.to_string(), (i + 1).to_string(), num(*h)])
        .collect()
}

/// The Pareto policy whose token count is the lower median of the set.
pub fn median_cost_policy(pareto: &[ParetoRow]) -> Option<&ParetoRow> {
    let mut idx: Vec<usize> = (0..pareto.len()).collect();
    idx.sort_by(|&a, &b| pareto[a].comm_cost.total_cmp(&pareto[b].comm_cost).then(pareto[a].id.cmp(&pareto[b].id)));
    idx.get(idx.len().saturating_sub(1) / 2).map(|&i| &pareto[i])
}

/// Per-layer token counts of every search-subset image under `policy`.
pub fn token_trace(exp: &Experiment, policy: &MergePolicy) -> Result<Vec<Vec<String>>> {
    let schedule = MergeSchedule::threshold(policy.clone());
    let set = exp.search_set();
    let outcomes = exp.pipeline.outcomes(&schedule, &set)?;
    let mut rows = Vec::new();
    for (o, id) in outcomes.iter().zip(&set.ids) {
        for (l, n) in o.token_counts.iter().enumerate() {
            rows.push(vec![id.to_string(), l.to_string(), n.to_string()]);
        }
    }
    Ok(rows)
}

/// Builds the experiment recorded in a run directory's manifest.
pub fn experiment_for_run(run_dir: &Path) -> Result<Experiment> {
    Experiment::build(RunManifest::load(run_dir)?.config)
}

/// Normalizer shared by several traces: the box of all their evaluations.
pub fn common_normalizer(traces: &[&SearchTrace]) -> Result<Normalizer> {
    let pts: Vec<Point3> = traces.iter().flat_map(|t| t.objectives()).collect();
    Normalizer::from_points(&pts, crate::optimizer::REFERENCE_MARGIN)
}
