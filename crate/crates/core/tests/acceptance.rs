//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --release -p tokmerge --test acceptance -- 4 7`.

mod common;

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;
use tokmerge::channel::*;
use tokmerge::encoder::*;
use tokmerge::experiment::artifacts::{EVALUATIONS, HV_CURVE, PARETO};
use tokmerge::experiment::{self, BoRun, Experiment, ExperimentConfig, EXAMPLE_CONFIG};
use tokmerge::merging::*;
use tokmerge::objectives::*;
use tokmerge::optimizer::{self, CommonDraws, Method};
use tokmerge::pareto::*;
use tokmerge::surrogate::*;
use tokmerge::seed;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The example run shared by criteria 7 to 11.
struct SharedRun {
    exp: Experiment,
    dir: TempDir,
    run: BoRun,
    seconds: f64,
}

fn shared_run(cell: &OnceCell<SharedRun>) -> &SharedRun {
    cell.get_or_init(|| {
        let exp = Experiment::build(ExperimentConfig::from_toml(EXAMPLE_CONFIG).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let run = experiment::run_bo(&exp, dir.path()).unwrap();
        SharedRun {
            exp,
            dir,
            run,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn random_tokens(n: usize, d: usize, rng: &mut impl rand::Rng) -> (TokenMatrix, DMatrix<f64>) {
    let z = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let v = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let counts = (0..n).map(|_| rng.random_range(1..4)).collect();
    (TokenMatrix::new(z, 0, counts).unwrap(), v)
}

fn merged_sources(r: &LayerMergeResult) -> Vec<usize> {
    let mut s: Vec<usize> = r.assignments.iter().map(|a| a.source_index).collect();
    s.sort_unstable();
    s
}

fn merging_suite() -> Outcome {
    let mut rng = seed::rng(0xacc1);
    let mut failed: Vec<(usize, &str)> = Vec::new();
    let mut tiny_norm = 0;
    for i in 0..1000 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=32);
        let (z, v) = random_tokens(n, d, &mut rng);
        let (a, b): (f64, f64) = (rng.random_range(0.5..=1.0), rng.random_range(0.5..=1.0));
        let (lo, hi) = (a.min(b), a.max(b));

        let r_lo = merge_layer(z.clone(), &v, lo, &[0]).unwrap();
        let r_hi = merge_layer(z.clone(), &v, hi, &[0]).unwrap();
        let s_lo = merged_sources(&r_lo);
        if r_lo.n_merged < r_hi.n_merged || merged_sources(&r_hi).iter().any(|s| s_lo.binary_search(s).is_err()) {
            failed.push((i, "monotonicity"));
        }

        let conserved = r_lo.tokens.n_tokens() == n - r_lo.n_merged
            && r_lo.tokens.total_count() == z.total_count()
            && r_lo.assignments.iter().all(|m| m.similarity >= lo && m.source_index != 0);
        if !conserved {
            failed.push((i, "conservation"));
        }

        let by_r = merge_layer_fixed_ratio(z.clone(), &v, r_lo.n_merged, &[0]).unwrap();
        if by_r.tokens != r_lo.tokens {
            failed.push((i, "fixed-ratio"));
        }

        let k = rng.random_range(1..20);
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut rows = vec![0.5; d];
        for _ in 0..2 * k {
            rows.extend_from_slice(&t);
        }
        let m = DMatrix::from_row_slice(2 * k + 1, d, &rows);
        let dup = merge_layer(TokenMatrix::unit(m.clone(), 0).unwrap(), &m, 1.0, &[0]).unwrap();
        let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        // a survivor built from c > 1 copies is t * c|t| / (c|t| + eps)
        let shrink = |r: usize| {
            let c = dup.tokens.source_counts()[r] as f64;
            if c > 1.0 { c * norm / (c * norm + MERGE_EPS) } else { 1.0 }
        };
        if 1.0 - shrink(1) >= 1e-5 {
            tiny_norm += 1;
        }
        let idempotent = dup.n_merged == k
            && (1..dup.tokens.n_tokens())
                .all(|r| (0..d).all(|j| (dup.tokens.tokens()[(r, j)] - shrink(r) * t[j]).abs() <= 1e-5 * norm));
        if !idempotent {
            failed.push((i, "duplicates"));
        }

        // whole encoder with up to 6 layers and 50 tokens; widths below 3 are
        // left out because layer norm then maps every token onto one line,
        // so all value vectors are collinear and tau = 1 merges them
        let cfg = EncoderConfig {
            layers: rng.random_range(1..=6),
            dim: d.max(3),
            image_size: 8 * rng.random_range(1..=7),
            ..EncoderConfig::default()
        };
        let w = EncoderWeights::random(cfg, i as u64).unwrap();
        let s = cfg.image_size;
        let img = ToyImage::new(s, s, 3, (0..s * s * 3).map(|_| rng.random()).collect(), 0).unwrap();
        let ident = MergePolicy::constant(cfg.layers, 1.0).unwrap();
        let plain = w.forward(&img, &NoMerge).unwrap();
        if w.forward(&img, &ThresholdMerge::new(&ident)).unwrap() != plain {
            failed.push((i, "identity"));
        }
        let taus = (0..cfg.layers).map(|_| rng.random_range(0.5..=1.0)).collect();
        let out = w.forward(&img, &ThresholdMerge::new(&MergePolicy::new(taus).unwrap())).unwrap();
        if out.tokens.total_count() != cfg.n_tokens() as u64 || out.token_counts.windows(2).any(|c| c[1] > c[0]) {
            failed.push((i, "conservation"));
        }
    }
    outcome(
        failed.is_empty(),
        format!(
            "1000 instances (N<=64, d<=32, L<=6), 5 properties each, {} failures{}; \
             {tiny_norm} duplicate cases with |t| small enough that eps alone shifts them by >= 1e-5",
            failed.len(),
            failed.first().map_or(String::new(), |f| format!(", first: instance {} {}", f.0, f.1))
        ),
    )
}

fn channel_statistics() -> Outcome {
    let mut rng = seed::rng(0xacc2);
    // 62 500 tokens of width 32 pack into 10^6 symbols
    let z = TokenMatrix::unit(DMatrix::from_fn(62_500, 32, |_, _| StandardNormal.sample(&mut rng)), 6).unwrap();
    let codec = TokenCodec::new(Codec::Identity, 32).unwrap();
    let s = normalize_power(&codec.encode(&z).unwrap()).unwrap();
    let mut worst_db: f64 = 0.0;
    for snr in [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0] {
        let cfg = ChannelConfig {
            snr_db: snr,
            seed: 0xacc2,
            codec: Codec::Identity,
        };
        let y = transmit(&s, &cfg, 0);
        let noise: f64 = y
            .symbols
            .iter()
            .zip(&s.symbols)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum::<f64>()
            / s.len() as f64;
        worst_db = worst_db.max((10.0 * (s.mean_power() / noise).log10() - snr).abs());
    }
    let mut worst_rel: f64 = 0.0;
    for (n, d) in [(17, 32), (9, 7), (1, 1), (64, 32)] {
        let z = TokenMatrix::unit(DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng)), 0).unwrap();
        let tc = TokenCodec::new(Codec::Identity, d).unwrap();
        let out = send_tokens(&z, &tc, &ChannelConfig::noiseless(Codec::Identity), 0).unwrap();
        worst_rel = worst_rel.max((out.tokens() - z.tokens()).norm() / z.tokens().norm());
    }
    outcome(
        worst_db < 0.1 && worst_rel <= 1e-12,
        format!(
            "{} symbols, max |SNR error| {worst_db:.4} dB (< 0.1); round-trip rel. error {worst_rel:.2e} (<= 1e-12)",
            s.len()
        ),
    )
}

fn flops_oracle() -> Outcome {
    let w = EncoderWeights::random(EncoderConfig::default(), 0xacc3).unwrap();
    let imgs = generate_dataset(&DatasetParams::new(0xacc3, 20, 8, 0.7)).unwrap();
    let mut rng = seed::rng(0xacc3);
    let mut equal = 0;
    let mut counts = Vec::new();
    for img in &imgs {
        let taus = (0..6).map(|_| rng.random_range(TAU_MIN..=TAU_MAX)).collect();
        let policy = MergePolicy::new(taus).unwrap();
        let mut log = Vec::new();
        let out = w.forward_instrumented(img, &ThresholdMerge::new(&policy), &mut log).unwrap();
        if flops_forward(&out.token_counts, 32, 4) == instrumented_flops(&log) {
            equal += 1;
        }
        counts.push(*out.token_counts.last().unwrap());
    }
    outcome(
        equal == 20,
        format!(
            "{equal}/20 random policies exact; final token counts {}..={}",
            counts.iter().min().unwrap(),
            counts.iter().max().unwrap()
        ),
    )
}

fn hypervolume_oracle() -> Outcome {
    let r = [1.0; 3];
    let mut worst: f64 = 0.0;
    for f in 0..50 {
        let pts = random_points(10, 0xacc4 + f);
        let exact = hypervolume(&pts, &r).unwrap();
        worst = worst.max((exact - monte_carlo_hv(&pts, &r, 1_000_000, f)).abs() / exact);
    }
    let h1 = hypervolume(&[[0.5; 3]], &r).unwrap();
    let h2 = hypervolume(&[[0.0, 0.5, 0.5], [0.5, 0.0, 0.5]], &r).unwrap();
    let hand = (h1 - 0.125).abs().max((h2 - 0.375).abs());
    outcome(
        worst < 0.01 && hand <= 1e-12,
        format!("50 fronts x 10^6 samples, max rel. error {worst:.2e} (< 1e-2); hand cases error {hand:.1e} (<= 1e-12)"),
    )
}

fn gp_suite() -> Outcome {
    let mut rng = seed::rng(0xacc5);
    let inputs = |n: usize, dim: usize, rng: &mut tokmerge::seed::Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.5..1.0)).collect()).collect()
    };

    let mut min_eig = f64::INFINITY;
    for _ in 0..50 {
        let dim = rng.random_range(1..=6);
        let x = inputs(20, dim, &mut rng);
        let ls = (0..dim).map(|_| rng.random_range(0.01..2.0)).collect();
        let p = KernelParams::new(rng.random_range(0.1..3.0), ls, 1e-6).unwrap();
        min_eig = min_eig.min(DMatrix::from_row_slice(20, 20, &gram(&x, &p)).symmetric_eigenvalues().min());
    }

    let x = inputs(15, 3, &mut rng);
    let y: Vec<f64> = x.iter().map(|v| (6.0 * v[0]).sin() + v[1] * v[2]).collect();
    let m = GpModel::with_params(x.clone(), &y, KernelParams::new(1.0, vec![0.3; 3], 1e-6).unwrap()).unwrap();
    let interp = x.iter().zip(&y).map(|(xi, yi)| (m.predict(xi).0 - yi).abs()).fold(0.0, f64::max);

    let p = KernelParams::new(1.7, vec![0.05, 0.1], 1e-3).unwrap();
    let xs = inputs(10, 2, &mut rng);
    let ys: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
    let st = Standardization::from_targets(&ys);
    let m = GpModel::condition(xs, &ys, p.clone(), st).unwrap();
    let (mu, var) = m.predict(&[50.0, -50.0]);
    let mean = ys.iter().sum::<f64>() / 10.0;
    let prior = (p.signal_variance + p.noise_variance) * st.std * st.std;
    let reversion = ((mu - mean).abs() / st.std).max((var - prior).abs() / prior);

    let p = KernelParams::new(1.3, vec![0.2, 0.4], 0.05).unwrap();
    let x1 = vec![0.7, 0.8];
    let m = GpModel::condition(vec![x1.clone()], &[0.9], p.clone(), Standardization::IDENTITY).unwrap();
    let mut closed: f64 = 0.0;
    for q in inputs(50, 2, &mut rng) {
        let k = matern52_ard(&q, &x1, &p);
        let s = p.signal_variance + p.noise_variance;
        let (mu, var) = m.predict(&q);
        closed = closed.max((mu - k / s * 0.9).abs()).max((var - (s - k * k / s)).abs());
    }
    outcome(
        min_eig >= -1e-8 && interp <= 1e-3 && reversion <= 0.01 && closed <= 1e-9,
        format!(
            "min eig {min_eig:.2e} (>= -1e-8); interpolation {interp:.2e} (<= 1e-3); reversion {reversion:.2e} (<= 1e-2); 1-point {closed:.2e} (<= 1e-9)"
        ),
    )
}

fn ehvi_oracle() -> Outcome {
    let front = ParetoFront::clipped(&random_points(10, 0xacc6), [1.0; 3]);
    let draws = CommonDraws::new(16, 1);
    let mut rng = seed::rng(0xacc6);
    let mut degenerate: f64 = 0.0;
    for _ in 0..1000 {
        let m = [rng.random_range(0.0..1.2), rng.random_range(0.0..1.2), rng.random_range(0.0..1.2)];
        degenerate = degenerate.max((optimizer::ehvi_from_moments(&m, &[0.0; 3], &front, &draws) - front.hvi(&m)).abs());
    }
    let p = [0.5, 0.4, 0.6];
    let single = ParetoFront::new(&[p], [1.0; 3]).unwrap();
    let big = CommonDraws::new(100_000, 0xacc6);
    let mut worst: f64 = 0.0;
    for (m, s) in [
        ([0.4, 0.6, 0.45], [0.1, 0.15, 0.2]),
        ([0.7, 0.7, 0.7], [0.2, 0.2, 0.2]),
        ([0.3, 0.2, 0.9], [0.05, 0.3, 0.1]),
    ] {
        let oracle = one_point_ehvi(&m, &s, &p, &[1.0; 3]);
        let mc = optimizer::ehvi_from_moments(&m, &[s[0] * s[0], s[1] * s[1], s[2] * s[2]], &single, &big);
        worst = worst.max((mc - oracle).abs() / oracle);
    }
    outcome(
        degenerate <= 1e-12 && worst <= 0.02,
        format!("zero-variance error {degenerate:.1e} (<= 1e-12); S=10^5 vs quadrature max rel. error {worst:.2e} (<= 2e-2)"),
    )
}

fn search_efficiency(cell: &OnceCell<SharedRun>) -> Outcome {
    let shared = shared_run(cell);
    let mut seconds = shared.run.manifest.timing.search_seconds;
    let start = Instant::now();
    let (mut beats_random, mut beats_sobol) = (0, 0);
    let mut lines = Vec::new();
    for root in 0..10u64 {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE_CONFIG).unwrap();
        cfg.root_seed = root;
        let own;
        let exp = if root == shared.exp.config.root_seed {
            &shared.exp
        } else {
            own = Experiment::build(cfg).unwrap();
            &own
        };
        let search = exp.search_set();
        let ev = PipelineEvaluator {
            pipeline: &exp.pipeline,
            set: &search,
        };
        let bo = if root == shared.exp.config.root_seed {
            shared.run.trace.clone()
        } else {
            optimizer::run_bo(&exp.bo_config(), &ev, exp.config.execution).unwrap()
        };
        let budget = exp.config.bo.budget;
        let rnd = optimizer::run_baseline(Method::Random, budget, &ev, exp.baseline_seed(Method::Random), None).unwrap();
        let sob = optimizer::run_baseline(Method::Sobol, budget, &ev, exp.baseline_seed(Method::Sobol), None).unwrap();
        let n = experiment::common_normalizer(&[&bo, &rnd, &sob]).unwrap();
        let hv = |t: &optimizer::SearchTrace| *optimizer::hv_curve(&t.objectives(), &n).last().unwrap();
        let (h_bo, h_rnd, h_sob) = (hv(&bo), hv(&rnd), hv(&sob));
        beats_random += (h_bo >= h_rnd) as usize;
        beats_sobol += (h_bo >= h_sob) as usize;
        lines.push(format!("{root}:{h_bo:.3}/{h_rnd:.3}/{h_sob:.3}"));
    }
    seconds += start.elapsed().as_secs_f64();
    outcome(
        beats_random >= 8 && beats_sobol >= 7 && seconds < 1800.0,
        format!(
            "BO >= random {beats_random}/10 (>= 8), BO >= Sobol {beats_sobol}/10 (>= 7), {seconds:.0} s (< 1800); HV bo/random/sobol per seed [{}]",
            lines.join(" ")
        ),
    )
}

fn pareto_shape(cell: &OnceCell<SharedRun>) -> Outcome {
    let shared = shared_run(cell);
    let rows = &shared.run.pareto;
    let pts: Vec<Point3> = rows.iter().map(|r| [-r.accuracy, r.gflops, r.comm_cost]).collect();
    let mut front: Vec<Point3> = non_dominated(&pts);
    front.dedup();
    let mut parts = Vec::new();
    let mut pass = front.len() >= 5;
    for (k, name) in [(1, "F"), (2, "C")] {
        let mut order = front.clone();
        order.sort_by(|a, b| a[k].total_cmp(&b[k]).then(a[0].total_cmp(&b[0]).reverse()));
        let acc: Vec<f64> = order.iter().map(|p| -p[0]).collect();
        let up = isotonic(&acc);
        let neg: Vec<f64> = acc.iter().map(|a| -a).collect();
        let down: Vec<f64> = isotonic(&neg).iter().map(|a| -a).collect();
        let (e_up, e_down) = (sse(&up, &acc), sse(&down, &acc));
        let rise = up.last().unwrap() - up[0];
        pass &= e_up < e_down && rise > 0.0;
        parts.push(format!(
            "A vs {name}: increasing-fit SSE {e_up:.4} < decreasing-fit SSE {e_down:.4}, rise {rise:.3}"
        ));
    }
    outcome(
        pass,
        format!("{} distinct non-dominated points at {} dB (>= 5); {}", front.len(), shared.exp.config.channel.snr_db, parts.join("; ")),
    )
}

fn snr_robustness(cell: &OnceCell<SharedRun>) -> Outcome {
    let shared = shared_run(cell);
    let all = experiment::sweep_schedules(&shared.exp, &shared.run.pareto).unwrap();
    let chosen: Vec<_> = all.into_iter().filter(|s| s.0 == "identity" || s.0 == "bo_pareto").collect();
    let rows = experiment::snr_sweep(&shared.exp, &chosen).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (method, label, _) in &chosen {
        let mut curve: Vec<_> = rows.iter().filter(|r| &r.method == method).collect();
        curve.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        let (lo, hi) = (curve.first().unwrap(), curve.last().unwrap());
        let gap = hi.accuracy - lo.accuracy;
        let monotone = curve.windows(2).all(|w| w[1].accuracy >= w[0].accuracy - w[0].accuracy_se);
        pass &= lo.snr_db == -5.0 && hi.snr_db == 20.0 && gap >= 0.05 && monotone;
        let accs: Vec<String> = curve.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
        parts.push(format!(
            "{label} (C={:.2}): A[-5..20 dB] = {}, gap {gap:.3} (>= 0.05), monotone within 1 s.e.: {monotone}",
            hi.comm_cost,
            accs.join("/")
        ));
    }
    outcome(pass, parts.join("; "))
}

fn privacy_trend(cell: &OnceCell<SharedRun>) -> Outcome {
    let shared = shared_run(cell);
    let (rows, summary) = experiment::privacy_eval(&shared.exp, &shared.run.pareto).unwrap();
    let rho = summary.spearman_c_ssim;
    let pass = rows.len() >= 8 && rho.is_some_and(|r| r >= 0.5) && summary.identity_ssim > summary.most_aggressive_ssim;
    outcome(
        pass,
        format!(
            "{} Pareto policies (>= 8), Spearman(C, SSIM) {} (>= 0.5), identity SSIM {:.4} > most aggressive (C={:.2}) SSIM {:.4}",
            rows.len(),
            rho.map_or("undefined".into(), |r| format!("{r:.3}")),
            summary.identity_ssim,
            summary.most_aggressive_comm_cost,
            summary.most_aggressive_ssim
        ),
    )
}

fn determinism(cell: &OnceCell<SharedRun>) -> Outcome {
    let shared = shared_run(cell);
    let other = tempfile::tempdir().unwrap();
    let exp = Experiment::build(ExperimentConfig::from_toml(EXAMPLE_CONFIG).unwrap()).unwrap();
    experiment::run_bo(&exp, other.path()).unwrap();
    let same = |f: &str, a: &Path, b: &Path| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let files = [PARETO, EVALUATIONS, HV_CURVE];
    let identical: Vec<&str> = files.iter().copied().filter(|f| same(f, shared.dir.path(), other.path())).collect();
    outcome(
        identical.len() == files.len(),
        format!(
            "byte-identical on rerun: {} of {} ({}); first run {:.0} s",
            identical.len(),
            files.len(),
            identical.join(", "),
            shared.seconds
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cell = OnceCell::new();
    let criteria: [(&str, &dyn Fn() -> Outcome); 11] = [
        ("merging correctness", &merging_suite),
        ("channel statistics", &channel_statistics),
        ("FLOPs oracle", &flops_oracle),
        ("hypervolume", &hypervolume_oracle),
        ("GP suite", &gp_suite),
        ("EHVI", &ehvi_oracle),
        ("search efficiency", &|| search_efficiency(&cell)),
        ("Pareto shape", &|| pareto_shape(&cell)),
        ("SNR robustness", &|| snr_robustness(&cell)),
        ("privacy trend", &|| privacy_trend(&cell)),
        ("determinism", &|| determinism(&cell)),
    ];
    // the panic message is folded into the FAIL line instead
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failures += !o.pass as usize;
        println!(
            "{} [{n:>2}] {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
