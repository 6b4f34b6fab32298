//! Empirical 2-Wasserstein distance and sampling-cost accounting.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;

use crate::error::{MagtError, Result};
use crate::rng::{stream_rng, streams};
use crate::samplers::SampleOutput;
use crate::scalar::Scalar;

pub const W2_MAX_POINTS: usize = 4096;
pub const DEFAULT_SUBSAMPLE: usize = 2000;
pub const DEFAULT_REPEATS: usize = 5;

/// Minimum-cost perfect matching for a dense square cost matrix.
///
/// Returns `row_to_col`. Jonker–Volgenant: column reduction with reduction
/// transfer, then Dijkstra-style shortest augmenting paths with column
/// potentials. The augmenting row reduction phase is left out; on squared
/// Euclidean costs it cost several times more than it saved.
pub fn linear_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(MagtError::Dimension {
            what: "cost matrix columns",
            expected: n,
            got: cost.ncols(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(MagtError::Numerical("non-finite assignment cost".into()));
    }
    match n {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![0]),
        _ => {}
    }
    let c = cost
        .as_standard_layout()
        .into_owned()
        .into_raw_vec_and_offset()
        .0;
    let mut lap = Lap {
        n,
        c: &c,
        x: vec![-1; n],
        y: vec![-1; n],
        v: vec![0.0; n],
    };
    let free = lap.column_reduction();
    let mut pred = vec![0usize; n];
    for &row in &free {
        let mut j = lap.shortest_path(row, &mut pred);
        loop {
            let i = pred[j];
            lap.y[j] = i as isize;
            let prev = lap.x[i];
            lap.x[i] = j as isize;
            if i == row {
                break;
            }
            j = prev as usize;
        }
    }
    Ok(lap.x.iter().map(|&j| j as usize).collect())
}

struct Lap<'a> {
    n: usize,
    c: &'a [f64],
    x: Vec<isize>,
    y: Vec<isize>,
    v: Vec<f64>,
}

impl Lap<'_> {
    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.n + j]
    }

    fn column_reduction(&mut self) -> Vec<usize> {
        let n = self.n;
        self.v.fill(f64::INFINITY);
        for i in 0..n {
            for j in 0..n {
                let c = self.cost(i, j);
                if c < self.v[j] {
                    self.v[j] = c;
                    self.y[j] = i as isize;
                }
            }
        }
        let mut unique = vec![true; n];
        for j in (0..n).rev() {
            let i = self.y[j] as usize;
            if self.x[i] < 0 {
                self.x[i] = j as isize;
            } else {
                unique[i] = false;
                self.y[j] = -1;
            }
        }
        let mut free = Vec::new();
        for i in 0..n {
            if self.x[i] < 0 {
                free.push(i);
            } else if unique[i] {
                let j = self.x[i] as usize;
                let mut min = f64::INFINITY;
                for j2 in 0..n {
                    if j2 != j {
                        min = min.min(self.cost(i, j2) - self.v[j2]);
                    }
                }
                self.v[j] -= min;
            }
        }
        free
    }

    /// Shortest alternating path from `start` to an unassigned column.
    fn shortest_path(&mut self, start: usize, pred: &mut [usize]) -> usize {
        let n = self.n;
        let mut cols: Vec<usize> = (0..n).collect();
        let mut d: Vec<f64> = (0..n).map(|j| self.cost(start, j) - self.v[j]).collect();
        pred.fill(start);
        let (mut lo, mut hi, mut n_ready) = (0usize, 0usize, 0usize);
        let mut final_j = None;
        while final_j.is_none() {
            if lo == hi {
                n_ready = lo;
                // collect the columns at the current minimum distance
                hi = lo + 1;
                let mut mind = d[cols[lo]];
                for k in lo + 1..n {
                    let j = cols[k];
                    if d[j] <= mind {
                        if d[j] < mind {
                            hi = lo;
                            mind = d[j];
                        }
                        cols[k] = cols[hi];
                        cols[hi] = j;
                        hi += 1;
                    }
                }
                for &j in &cols[lo..hi] {
                    if self.y[j] < 0 {
                        final_j = Some(j);
                    }
                }
            }
            if final_j.is_none() {
                final_j = self.scan(&mut lo, &mut hi, &mut d, &mut cols, pred);
            }
        }
        let mind = d[cols[lo]];
        for &j in &cols[..n_ready] {
            self.v[j] += d[j] - mind;
        }
        final_j.unwrap()
    }

    /// Scans the columns at the current minimum distance. The bounds are
    /// written back only when no free column was reached, so that
    /// `cols[lo]` still carries the minimum for the price update.
    fn scan(
        &self,
        plo: &mut usize,
        phi: &mut usize,
        d: &mut [f64],
        cols: &mut [usize],
        pred: &mut [usize],
    ) -> Option<usize> {
        let (mut lo, mut hi) = (*plo, *phi);
        while lo != hi {
            let j = cols[lo];
            lo += 1;
            let i = self.y[j] as usize;
            let mind = d[j];
            let h = self.cost(i, j) - self.v[j] - mind;
            for k in hi..self.n {
                let j = cols[k];
                let reduced = self.cost(i, j) - self.v[j] - h;
                if reduced < d[j] {
                    d[j] = reduced;
                    pred[j] = i;
                    if reduced == mind {
                        if self.y[j] < 0 {
                            return Some(j);
                        }
                        cols[k] = cols[hi];
                        cols[hi] = j;
                        hi += 1;
                    }
                }
            }
        }
        *plo = lo;
        *phi = hi;
        None
    }
}

fn squared_cost<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<f64> {
    let n = a.nrows();
    let mut cost = Array2::zeros((n, n));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            cost[[i, j]] = ra
                .iter()
                .zip(rb.iter())
                .map(|(&x, &y)| {
                    let diff = x.as_f64() - y.as_f64();
                    diff * diff
                })
                .sum();
        }
    }
    cost
}

/// Exact empirical W2 between two equal-size point sets.
pub fn w2_exact<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(MagtError::Dimension {
            what: "point count",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if a.ncols() != b.ncols() {
        return Err(MagtError::Dimension {
            what: "point dimension",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let n = a.nrows();
    if n == 0 {
        return Err(MagtError::Config("W2 of empty point sets".into()));
    }
    if n > W2_MAX_POINTS {
        return Err(MagtError::Config(format!(
            "exact W2 supports at most {W2_MAX_POINTS} points, got {n}; use w2_subsampled"
        )));
    }
    let cost = squared_cost(a, b);
    let assignment = linear_assignment(&cost)?;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    Ok((total / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2Summary {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

/// Mean and sample standard deviation of exact W2 over `repeats` independent
/// subsample pairs of size `n`.
pub fn w2_subsampled<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    n: usize,
    repeats: usize,
    seed: u64,
) -> Result<W2Summary> {
    if n == 0 || repeats == 0 {
        return Err(MagtError::Config("subsample size and repeats must be positive".into()));
    }
    if n > a.nrows() || n > b.nrows() {
        return Err(MagtError::Config(format!(
            "subsample size {n} exceeds the point sets ({} and {})",
            a.nrows(),
            b.nrows()
        )));
    }
    let mut rng = stream_rng(seed, streams::METRICS);
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let ia = index::sample(&mut rng, a.nrows(), n).into_vec();
        let ib = index::sample(&mut rng, b.nrows(), n).into_vec();
        let sa = a.select(Axis(0), &ia);
        let sb = b.select(Axis(0), &ib);
        values.push(w2_exact(sa.view(), sb.view())?);
    }
    let mean = values.iter().sum::<f64>() / repeats as f64;
    let sd = if repeats > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(W2Summary { mean, sd, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub seconds: f64,
    pub nfe: usize,
}

/// Times one call of `sampler(n)` after a warm-up call.
pub fn timing_harness<T, F>(mut sampler: F, n: usize) -> Result<(Timing, SampleOutput<T>)>
where
    F: FnMut(usize) -> Result<SampleOutput<T>>,
{
    sampler(n)?;
    let start = Instant::now();
    let out = sampler(n)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((
        Timing {
            seconds,
            nfe: out.nfe,
        },
        out,
    ))
}
