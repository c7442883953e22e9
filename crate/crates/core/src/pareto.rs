//! Pareto dominance, non-dominated filtering and exact 3-D hypervolume
//! (minimisation convention throughout).

use serde::{Deserialize, Serialize};

use crate::objectives::ObjectiveVector;
use crate::{Error, Result};

pub type Point3 = [f64; 3];

/// `a` is no worse than `b` everywhere and differs somewhere.
pub fn dominates(a: &Point3, b: &Point3) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a != b
}

fn weakly_dominates(a: &Point3, b: &Point3) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Indices (ascending) of the non-dominated points. Of a group of duplicates
/// only the first is kept.
pub fn non_dominated_indices(points: &[Point3]) -> Vec<usize> {
    // A point can only be weakly dominated by a point that sorts before it
    // lexicographically, so one pass over the sorted order suffices.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&points[i], &points[j]);
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept.iter().any(|&k| weakly_dominates(&points[k], &points[i])) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

pub fn non_dominated(points: &[Point3]) -> Vec<Point3> {
    non_dominated_indices(points).into_iter().map(|i| points[i]).collect()
}

/// Non-dominated objective vectors with a reference point strictly worse than
/// all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoFront {
    points: Vec<Point3>,
    reference: Point3,
}

impl ParetoFront {
    /// Filters `points` to their non-dominated subset. Every point must lie
    /// strictly below `reference`.
    pub fn new(points: &[Point3], reference: Point3) -> Result<Self> {
        for p in points {
            if !p.iter().zip(&reference).all(|(a, r)| a < r) {
                return Err(Error::OutsideReference {
                    point: *p,
                    reference,
                });
            }
        }
        Ok(Self {
            points: non_dominated(points),
            reference,
        })
    }

    /// Like [`new`](Self::new) but silently drops points outside the box.
    pub fn clipped(points: &[Point3], reference: Point3) -> Self {
        let inside: Vec<Point3> = points
            .iter()
            .filter(|p| p.iter().zip(&reference).all(|(a, r)| a < r))
            .copied()
            .collect();
        Self {
            points: non_dominated(&inside),
            reference,
        }
    }

    pub fn empty(reference: Point3) -> Self {
        Self {
            points: Vec::new(),
            reference,
        }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn reference(&self) -> Point3 {
        self.reference
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn hypervolume(&self) -> f64 {
        sweep_volume(&self.points, &self.reference)
    }

    /// Hypervolume improvement of adding `candidate`.
    pub fn hvi(&self, candidate: &Point3) -> f64 {
        hvi(self, candidate)
    }
}

/// Exact measure of the union of boxes `[p, reference]`. Fails if a point is
/// not strictly below the reference.
pub fn hypervolume(points: &[Point3], reference: &Point3) -> Result<f64> {
    Ok(ParetoFront::new(points, *reference)?.hypervolume())
}

/// Dimension sweep: points in increasing third coordinate, a 2-D staircase of
/// the first two coordinates maintained between consecutive slabs. Dominated
/// points are tolerated (they never enter the staircase).
fn sweep_volume(points: &[Point3], r: &Point3) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut pts: Vec<Point3> = points.to_vec();
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let mut stair: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    let mut area = 0.0;
    let mut volume = 0.0;
    for i in 0..pts.len() {
        let (x, y) = (pts[i][0], pts[i][1]);
        if insert_staircase(&mut stair, x, y) {
            area = staircase_area(&stair, r[0], r[1]);
        }
        let z_next = if i + 1 < pts.len() { pts[i + 1][2] } else { r[2] };
        let dz = z_next - pts[i][2];
        if dz > 0.0 {
            volume += area * dz;
        }
    }
    volume
}

/// Inserts `(x, y)` into a staircase sorted by increasing x and strictly
/// decreasing y. Returns false if the point is weakly dominated.
fn insert_staircase(stair: &mut Vec<(f64, f64)>, x: f64, y: f64) -> bool {
    let le = stair.partition_point(|q| q.0 <= x);
    if le > 0 && stair[le - 1].1 <= y {
        return false;
    }
    let start = stair.partition_point(|q| q.0 < x);
    let mut end = start;
    while end < stair.len() && stair[end].1 >= y {
        end += 1;
    }
    stair.splice(start..end, std::iter::once((x, y)));
    true
}

fn staircase_area(stair: &[(f64, f64)], rx: f64, ry: f64) -> f64 {
    let mut a = 0.0;
    for (j, &(x, y)) in stair.iter().enumerate() {
        let x_next = stair.get(j + 1).map_or(rx, |q| q.0);
        a += (x_next - x) * (ry - y);
    }
    a
}

/// `max(HV(P + {c}) - HV(P), 0)`, computed as the volume of `[c, r]` minus the
/// part of it already covered by `P`.
pub fn hvi(front: &ParetoFront, candidate: &Point3) -> f64 {
    let r = front.reference;
    if !candidate.iter().zip(&r).all(|(c, r)| c < r) || candidate.iter().any(|c| !c.is_finite()) {
        return 0.0;
    }
    if front.points.iter().any(|p| weakly_dominates(p, candidate)) {
        return 0.0;
    }
    let box_volume: f64 = (0..3).map(|k| r[k] - candidate[k]).product();
    let clipped: Vec<Point3> = front
        .points
        .iter()
        .map(|p| [p[0].max(candidate[0]), p[1].max(candidate[1]), p[2].max(candidate[2])])
        .collect();
    (box_volume - sweep_volume(&clipped, &r)).max(0.0)
}

/// Min-max view of objective vectors onto a frozen box whose upper corner is
/// the reference point. The reference maps to `(1, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lower: Point3,
    pub reference: Point3,
}

impl Normalizer {
    /// Box from the componentwise min/max of `points`, with the reference
    /// pushed `margin` of the span beyond the max.
    pub fn from_points(points: &[Point3], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("cannot build a reference box from zero points".into()));
        }
        let mut lower = [f64::INFINITY; 3];
        let mut upper = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lower[k] = lower[k].min(p[k]);
                upper[k] = upper[k].max(p[k]);
            }
        }
        let mut reference = [0.0; 3];
        for k in 0..3 {
            let span = (upper[k] - lower[k]).max(1e-9 * (1.0 + upper[k].abs()));
            reference[k] = upper[k] + margin * span;
        }
        Ok(Self { lower, reference })
    }

    pub fn normalize(&self, p: &Point3) -> Point3 {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (p[k] - self.lower[k]) / (self.reference[k] - self.lower[k]);
        }
        out
    }

    pub fn normalize_objectives(&self, o: &ObjectiveVector) -> Point3 {
        self.normalize(&o.as_array())
    }

    /// Normalised front of `points`; points outside the box are dropped.
    pub fn front(&self, points: &[Point3]) -> ParetoFront {
        let normed: Vec<Point3> = points.iter().map(|p| self.normalize(p)).collect();
        ParetoFront::clipped(&normed, [1.0; 3])
    }
}
