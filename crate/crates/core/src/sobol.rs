//! Sobol low-discrepancy points with a seeded digital shift.
//!
//! Direction numbers follow the Joe–Kuo construction. Dimension 1 is the
//! van der Corput sequence in base 2.

use crate::error::{Error, Result};
use crate::seed;

const BITS: usize = 32;

// (degree s, coefficient a, initial m_1..m_s) for dimensions 2..
const PRIMITIVES: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
];

/// Largest supported dimension.
pub const MAX_DIM: usize = PRIMITIVES.len() + 1;

/// A digitally shifted Sobol sequence in `[0,1)^dim`.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    shift: Vec<u32>,
}

impl Sobol {
    /// Unshifted sequence; its first point is the origin.
    pub fn unscrambled(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Config(format!("sobol dimension must be in 1..={MAX_DIM}, got {dim}")));
        }
        let directions = (0..dim).map(direction_numbers).collect();
        Ok(Self {
            directions,
            shift: vec![0; dim],
        })
    }

    /// Sequence XOR-shifted by per-dimension words drawn from `seed`.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut s = Self::unscrambled(dim)?;
        for (j, w) in s.shift.iter_mut().enumerate() {
            *w = (seed::derive_indexed(seed, j as u64) >> 32) as u32;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// Point `index` of the sequence.
    pub fn point(&self, index: u64) -> Vec<f64> {
        self.directions
            .iter()
            .zip(&self.shift)
            .map(|(v, &shift)| {
                let mut x = shift;
                let mut i = index;
                let mut k = 0;
                while i != 0 {
                    if i & 1 == 1 {
                        x ^= v[k];
                    }
                    i >>= 1;
                    k += 1;
                }
                x as f64 / (1u64 << BITS) as f64
            })
            .collect()
    }

    /// The first `n` points.
    pub fn points(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n as u64).map(|i| self.point(i)).collect()
    }
}

fn direction_numbers(j: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if j == 0 {
        for (k, w) in v.iter_mut().enumerate() {
            *w = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = PRIMITIVES[j - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut w = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                w ^= v[k - i];
            }
        }
        v[k] = w;
    }
    v
}
