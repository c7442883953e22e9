//! Independent reference computations shared by the test targets.
#![allow(dead_code)]

use rand::Rng as _;
use tokmerge::encoder::{MatmulOp, MatmulStage};
use tokmerge::pareto::Point3;
use tokmerge::seed;

/// Operation count from the recorded matrix products: attention products count
/// one op per multiply-accumulate and MLP products two, which is the
/// convention of the closed form.
pub fn instrumented_flops(log: &[MatmulOp]) -> f64 {
    log.iter()
        .map(|op| {
            let mac = (op.m * op.k * op.n) as f64;
            match op.stage {
                MatmulStage::PatchEmbed => 0.0,
                MatmulStage::Attention => mac,
                MatmulStage::Mlp => 2.0 * mac,
            }
        })
        .sum()
}

/// Fraction of uniform samples in `[0, r)` dominated by some front point,
/// scaled by the box volume.
pub fn monte_carlo_hv(points: &[Point3], r: &Point3, n: usize, seed_: u64) -> f64 {
    let mut rng = seed::rng(seed_);
    let mut hits = 0usize;
    for _ in 0..n {
        let x = [rng.random::<f64>() * r[0], rng.random::<f64>() * r[1], rng.random::<f64>() * r[2]];
        if points.iter().any(|p| p[0] <= x[0] && p[1] <= x[1] && p[2] <= x[2]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64 * r[0] * r[1] * r[2]
}

/// Indices not weakly dominated by another point; of equal points the first stays.
pub fn brute_force_filter(points: &[Point3]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                let weak = (0..3).all(|k| points[j][k] <= points[i][k]);
                weak && (points[j] != points[i] || j < i)
            })
        })
        .collect()
}

pub fn random_points(n: usize, seed_: u64) -> Vec<Point3> {
    let mut rng = seed::rng(seed_);
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

/// E[(r - max(f, lower))^+] for f ~ N(m, s^2), by trapezoid quadrature.
pub fn expected_slab(m: f64, s: f64, lower: f64, r: f64) -> f64 {
    let n = 200_000;
    let (a, b) = (m - 10.0 * s, m + 10.0 * s);
    let h = (b - a) / n as f64;
    let mut total = 0.0;
    for i in 0..=n {
        let x = a + i as f64 * h;
        let pdf = (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        total += w * pdf * (r - x.max(lower)).max(0.0);
    }
    total * h
}

/// Expected improvement of N(m, diag(s^2)) over the single point `p` in the
/// box below `r`. Both products of the improvement factor over coordinates.
pub fn one_point_ehvi(m: &Point3, s: &Point3, p: &Point3, r: &Point3) -> f64 {
    let mut all = 1.0;
    let mut beyond = 1.0;
    for k in 0..3 {
        all *= expected_slab(m[k], s[k], f64::NEG_INFINITY, r[k]);
        beyond *= expected_slab(m[k], s[k], p[k], r[k]);
    }
    all - beyond
}

/// Least-squares non-decreasing fit (pool adjacent violators) of `y` taken in
/// the given order.
pub fn isotonic(y: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s0 / n0 as f64 <= s1 / n1 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s0 + s1, n0 + n1);
        }
    }
    blocks.iter().flat_map(|&(s, n)| std::iter::repeat_n(s / n as f64, n)).collect()
}

pub fn sse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}
