//! Input designs on the unit cube and seeded random streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream identifiers reserved by the library. Experiment runners use their
/// own identifiers above `STREAM_USER`.
pub const STREAM_LHS: u64 = 1;
pub const STREAM_UNIFORM: u64 = 2;
pub const STREAM_MULTISTART: u64 = 3;
pub const STREAM_DISCREPANCY: u64 = 4;
pub const STREAM_USER: u64 = 16;

/// Independent random stream `(seed, stream, index)`.
///
/// Streams with different `(stream, index)` pairs never overlap, so
/// replicate `r` of experiment `e` can be generated on any thread in any
/// order and still see the same numbers.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"sgasp-rn");
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Grid,
    Lhs,
    Uniform,
    File,
}

/// `n × p` matrix of inputs in `[0, 1]^p`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSet {
    n: usize,
    p: usize,
    values: Vec<f64>,
    provenance: Provenance,
}

impl DesignSet {
    /// Builds a design from row-major values, validating the unit-cube domain.
    pub fn from_row_major(
        n: usize,
        p: usize,
        values: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::domain("design needs n >= 1 and p >= 1"));
        }
        if values.len() != n * p {
            return Err(Error::DimensionMismatch {
                expected: n * p,
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain(format!(
                "design entry ({}, {}) = {} is outside [0, 1]",
                pos / p,
                pos % p,
                values[pos]
            )));
        }
        Ok(Self {
            n,
            p,
            values,
            provenance,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: bad.len(),
            });
        }
        Self::from_row_major(rows.len(), p, rows.concat(), provenance)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.p)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.values
    }

    /// Smallest Euclidean distance between two distinct rows (infinite for n = 1).
    pub fn min_distance(&self) -> f64 {
        min_pairwise_sq(&self.values, self.n, self.p).0.sqrt()
    }

    /// Checks that every column places exactly one point in each of the
    /// `n` strata `[k/n, (k+1)/n)`.
    pub fn is_latin_hypercube(&self) -> bool {
        (0..self.p).all(|j| {
            let mut seen = vec![false; self.n];
            self.rows().all(|r| {
                let k = ((r[j] * self.n as f64).floor() as usize).min(self.n - 1);
                !std::mem::replace(&mut seen[k], true)
            })
        })
    }
}

/// Equally spaced design: `x_i = (i-1)/(n-1)` per axis, tensor grid for `p > 1`.
/// A single point per axis sits at 0.5.
pub fn equispaced(n: usize, p: usize) -> Result<DesignSet> {
    if n == 0 || p == 0 {
        return Err(Error::domain("equispaced design needs n >= 1 and p >= 1"));
    }
    let axis: Vec<f64> = if n == 1 {
        vec![0.5]
    } else {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    };
    let total = n
        .checked_pow(p as u32)
        .ok_or_else(|| Error::domain("grid too large"))?;
    let mut values = Vec::with_capacity(total * p);
    for idx in 0..total {
        // first coordinate varies slowest, keeping rows sorted lexicographically
        let mut rem = idx;
        let mut row = vec![0.0; p];
        for d in (0..p).rev() {
            row[d] = axis[rem % n];
            rem /= n;
        }
        values.extend(row);
    }
    DesignSet::from_row_major(total, p, values, Provenance::Grid)
}

/// Midpoint Latin hypercube before any maximin improvement: the `restart`-th
/// draw for `seed`.
pub fn random_lhs(n: usize, p: usize, seed: u64, restart: u64) -> Result<DesignSet> {
    if n < 2 || p == 0 {
        return Err(Error::domain("Latin hypercube needs n >= 2 and p >= 1"));
    }
    let mut rng = stream_rng(seed, STREAM_LHS, restart);
    let perms = lhs_permutations(n, p, &mut rng);
    DesignSet::from_row_major(n, p, perm_values(&perms, n, p), Provenance::Lhs)
}

fn lhs_permutations(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..p)
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            perm
        })
        .collect()
}

fn perm_values(perms: &[Vec<usize>], n: usize, p: usize) -> Vec<f64> {
    let mut values = vec![0.0; n * p];
    for (j, perm) in perms.iter().enumerate() {
        for (i, &k) in perm.iter().enumerate() {
            values[i * p + j] = (k as f64 + 0.5) / n as f64;
        }
    }
    values
}

/// Latin hypercube with a uniform jitter inside each stratum, row-major.
pub(crate) fn jittered_lhs(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let perms = lhs_permutations(n, p, rng);
    let mut values = vec![0.0; n * p];
    for (j, perm) in perms.iter().enumerate() {
        for (i, &k) in perm.iter().enumerate() {
            values[i * p + j] = (k as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    values
}

/// Returns (minimum squared distance, number of pairs attaining it).
fn min_pairwise_sq(values: &[f64], n: usize, p: usize) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut count = 0;
    for i in 0..n {
        let a = &values[i * p..(i + 1) * p];
        for k in (i + 1)..n {
            let b = &values[k * p..(k + 1) * p];
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best - 1e-15 {
                best = d;
                count = 1;
            } else if (d - best).abs() <= 1e-15 {
                count += 1;
            }
        }
    }
    (best, count)
}

/// Maximin Latin hypercube.
///
/// Each of `restarts` random midpoint Latin hypercubes is improved by
/// coordinate-exchange hill climbing (swap two rows within one column,
/// keep the swap when the minimum pairwise distance grows, or stays equal
/// with fewer pairs at the minimum). The best improved design wins; ties go
/// to the earliest restart.
pub fn maximin_lhs(n: usize, p: usize, seed: u64, restarts: usize) -> Result<DesignSet> {
    if n < 2 {
        return Err(Error::domain("maximin LHS needs n >= 2"));
    }
    if p == 0 || restarts == 0 {
        return Err(Error::domain("maximin LHS needs p >= 1 and restarts >= 1"));
    }
    let mut best: Option<((f64, usize), Vec<f64>)> = None;
    for restart in 0..restarts as u64 {
        let mut rng = stream_rng(seed, STREAM_LHS, restart);
        let perms = lhs_permutations(n, p, &mut rng);
        let mut values = perm_values(&perms, n, p);
        let mut score = min_pairwise_sq(&values, n, p);
        let proposals = 50 * n * p;
        let mut stale = 0;
        for _ in 0..proposals {
            let col = rng.random_range(0..p);
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                continue;
            }
            values.swap(a * p + col, b * p + col);
            let cand = min_pairwise_sq(&values, n, p);
            if better(cand, score) {
                score = cand;
                stale = 0;
            } else {
                values.swap(a * p + col, b * p + col);
                stale += 1;
                if stale > 10 * n * p {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|(s, _)| better(score, *s)) {
            best = Some((score, values));
        }
    }
    let (_, values) = best.expect("restarts >= 1");
    DesignSet::from_row_major(n, p, values, Provenance::Lhs)
}

fn better(cand: (f64, usize), cur: (f64, usize)) -> bool {
    cand.0 > cur.0 + 1e-15 || ((cand.0 - cur.0).abs() <= 1e-15 && cand.1 < cur.1)
}

/// I.i.d. uniform points on `[0, 1]^p`.
pub fn uniform(n: usize, p: usize, seed: u64) -> Result<DesignSet> {
    uniform_from(n, p, &mut stream_rng(seed, STREAM_UNIFORM, 0))
}

pub(crate) fn uniform_from(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Result<DesignSet> {
    let values = (0..n * p).map(|_| rng.random::<f64>()).collect();
    DesignSet::from_row_major(n, p, values, Provenance::Uniform)
}
