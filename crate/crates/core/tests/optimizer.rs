mod common;

use common::one_point_ehvi;
use rand::Rng as _;
use tokmerge::objectives::*;
use tokmerge::optimizer::*;
use tokmerge::pareto::{ParetoFront, Point3};
use tokmerge::sobol::Sobol;
use tokmerge::{seed, Execution, Result};

/// Smooth three-objective trade-off over `[0.5, 1]^3`: higher thresholds keep
/// more accuracy and cost more.
struct Analytic;

impl Evaluator for Analytic {
    fn evaluate(&self, schedule: &MergeSchedule) -> Result<EvalRecord> {
        let u: Vec<f64> = match schedule.policy() {
            Some(p) => p.thresholds().iter().map(|t| (t - 0.5) / 0.5).collect(),
            None => vec![1.0; 3],
        };
        let acc = 0.3 + 0.6 * (0.5 * u[0] + 0.3 * u[1] + 0.2 * u[2]).sqrt();
        let flops = 1.0 + u[0] * u[0] + 0.5 * u[1];
        let comm = 1.0 + u[1] + u[2] * u[2];
        Ok(EvalRecord {
            schedule: schedule.clone(),
            objectives: ObjectiveVector::new(acc, flops, comm),
            snr_db: f64::INFINITY,
            n_samples: 1,
            seed: 0,
            wall_time: 0.0,
        })
    }

    fn n_layers(&self) -> usize {
        3
    }

    fn n_tokens(&self) -> usize {
        17
    }
}

fn small_config(seed_: u64) -> BoConfig {
    BoConfig {
        n_init: 8,
        budget: 30,
        candidate_pool_size: 256,
        mc_samples: 64,
        seed: seed_,
        ..BoConfig::default()
    }
}

#[test]
fn zero_variance_ehvi_is_exact_hvi() {
    let front = ParetoFront::new(&[[0.2, 0.6, 0.5], [0.6, 0.2, 0.4], [0.5, 0.5, 0.1]], [1.0; 3]).unwrap();
    let draws = CommonDraws::new(16, 1);
    let mut rng = seed::rng(2);
    for _ in 0..100 {
        let m: Point3 = [rng.random_range(0.0..1.2), rng.random_range(0.0..1.2), rng.random_range(0.0..1.2)];
        let e = ehvi_from_moments(&m, &[0.0; 3], &front, &draws);
        assert!((e - front.hvi(&m)).abs() <= 1e-12);
    }
    let single = ParetoFront::new(&[[0.5; 3]], [1.0; 3]).unwrap();
    assert!((ehvi_from_moments(&[0.25; 3], &[0.0; 3], &single, &draws) - 0.296875).abs() <= 1e-12);
    assert_eq!(ehvi_from_moments(&[0.75; 3], &[0.0; 3], &single, &draws), 0.0);
}

#[test]
fn monte_carlo_ehvi_matches_quadrature() {
    // with one front point the improvement factors over coordinates
    let p = [0.5, 0.4, 0.6];
    let front = ParetoFront::new(&[p], [1.0; 3]).unwrap();
    let cases = [
        ([0.4, 0.6, 0.45], [0.1, 0.15, 0.2]),
        ([0.7, 0.7, 0.7], [0.2, 0.2, 0.2]),
        ([0.3, 0.2, 0.9], [0.05, 0.3, 0.1]),
    ];
    for (m, s) in cases {
        let oracle = one_point_ehvi(&m, &s, &p, &[1.0; 3]);
        let var = [s[0] * s[0], s[1] * s[1], s[2] * s[2]];
        let mc = ehvi_from_moments(&m, &var, &front, &CommonDraws::new(100_000, 7));
        assert!((mc - oracle).abs() <= 0.02 * oracle, "mean {m:?}: mc {mc} oracle {oracle}");
    }
}

/// Exact star discrepancy of a 2-D point set.
fn star_discrepancy(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let mut xs: Vec<f64> = points.iter().map(|p| p[0]).chain([1.0]).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p[1]).chain([1.0]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut worst: f64 = 0.0;
    for &x in &xs {
        for &y in &ys {
            let open = points.iter().filter(|p| p[0] < x && p[1] < y).count() as f64;
            let closed = points.iter().filter(|p| p[0] <= x && p[1] <= y).count() as f64;
            worst = worst.max(x * y - open / n).max(closed / n - x * y);
        }
    }
    worst
}

#[test]
fn sobol_is_more_uniform_than_random() {
    let mut sobol = Vec::new();
    let mut random = Vec::new();
    for s in 0..10 {
        sobol.push(star_discrepancy(&Sobol::new(2, s).unwrap().points(128)));
        let mut rng = seed::rng(s);
        random.push(star_discrepancy(&(0..128).map(|_| vec![rng.random(), rng.random()]).collect::<Vec<_>>()));
    }
    sobol.sort_by(f64::total_cmp);
    random.sort_by(f64::total_cmp);
    assert!(sobol[5] < random[5], "sobol {} random {}", sobol[5], random[5]);
    // the unshifted sequence fills dyadic boxes evenly
    let p = Sobol::unscrambled(2).unwrap().points(16);
    for i in 0..4 {
        for j in 0..4 {
            let hits = p.iter().filter(|q| (q[0] * 4.0) as usize == i && (q[1] * 4.0) as usize == j).count();
            assert_eq!(hits, 1);
        }
    }
}

#[test]
fn policies_stay_in_bounds() {
    for p in sobol_policies(64, 6, 3).unwrap().iter().chain(&random_policies(64, 6, 3)) {
        assert!(p.thresholds().iter().all(|t| (TAU_MIN..=TAU_MAX).contains(t)));
        assert_eq!(p.thresholds().len(), 6);
    }
}

#[test]
fn bo_is_deterministic_and_well_formed() {
    let a = run_bo(&small_config(4), &Analytic, Execution::Sequential).unwrap();
    let b = run_bo(&small_config(4), &Analytic, Execution::Parallel).unwrap();
    assert_eq!(a.records.len(), 30);
    assert_eq!(a.iterations.len(), 22);
    assert_eq!(a.objectives(), b.objectives());
    assert_eq!(a.hv_curve, b.hv_curve);
    assert!(a.hv_curve.windows(2).all(|w| w[1] >= w[0]));
    // the initial batch is the seeded Sobol design
    let init = sobol_policies(8, 3, seed::derive(4, "init")).unwrap();
    for (r, p) in a.records.iter().zip(&init) {
        assert_eq!(r.policy().unwrap(), p);
    }
    let c = run_bo(&small_config(5), &Analytic, Execution::Sequential).unwrap();
    assert_ne!(a.objectives(), c.objectives());
}

#[test]
fn bo_beats_random_on_a_smooth_problem() {
    let mut wins = 0;
    for s in 0..5 {
        let bo = run_bo(&small_config(s), &Analytic, Execution::Parallel).unwrap();
        let rnd = run_baseline(Method::Random, 30, &Analytic, s, Some(bo.normalizer)).unwrap();
        if bo.final_hv() >= rnd.final_hv() {
            wins += 1;
        }
    }
    assert!(wins >= 4, "bo won {wins} of 5");
}

#[test]
fn baselines_have_the_expected_shape() {
    let ct = baseline_schedules(Method::ConstantThreshold, 100, 6, 17, 0).unwrap();
    assert_eq!(ct.len(), 51);
    let first = ct[0].policy().unwrap().thresholds().to_vec();
    assert_eq!(first, vec![0.5; 6]);
    let fr = baseline_schedules(Method::FixedRatio, 100, 6, 17, 0).unwrap();
    assert_eq!(fr.len(), 9);
    assert_eq!(fr[8], MergeSchedule::FixedRatio { r: 8 });
    assert_eq!(baseline_schedules(Method::Random, 7, 6, 17, 0).unwrap().len(), 7);
    assert!(baseline_schedules(Method::Bo, 7, 6, 17, 0).is_err());
    assert!(baseline_schedules(Method::Sobol, 0, 6, 17, 0).is_err());
    let t = run_baseline(Method::Sobol, 20, &Analytic, 1, None).unwrap();
    assert_eq!(t.hv_curve.len(), 20);
    assert_eq!(t.records.len(), 20);
}

#[test]
fn hv_curve_is_the_prefix_hypervolume() {
    let t = run_baseline(Method::Random, 25, &Analytic, 9, None).unwrap();
    let pts = t.objectives();
    for k in [1, 5, 12, 25] {
        let exact = t.normalizer.front(&pts[..k]).hypervolume();
        assert!((t.hv_curve[k - 1] - exact).abs() < 1e-12);
    }
}
