//! Distances between empirical distributions: exact squared 2-Wasserstein by
//! optimal assignment, and its sliced estimate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{ensure_dim, invalid, Error, Result};

/// Largest sample size accepted by [`w2sq_exact`].
pub const MAX_EXACT_POINTS: usize = 4096;

/// `n` points in `d` dimensions, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Array2<f64>,
    pub label: Option<String>,
}

impl SampleSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("sample set"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { points, label: None })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn mean(&self) -> Array1<f64> {
        self.points.mean_axis(Axis(0)).expect("non-empty")
    }

    /// Covariance with divisor `n`.
    pub fn covariance(&self) -> Array2<f64> {
        let centered = &self.points - &self.mean();
        centered.t().dot(&centered) / self.len() as f64
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a square cost matrix by the shortest
/// augmenting path method with potentials, `O(n^3)`. Returns the column
/// assigned to each row.
pub fn assignment(cost: ArrayView2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Minimum over pairings of the mean squared distance between paired points.
pub fn w2sq_exact(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    ensure_dim(a.dim(), b.dim())?;
    let n = a.len();
    if n > MAX_EXACT_POINTS {
        return Err(invalid(format!("exact assignment is limited to {MAX_EXACT_POINTS} points, got {n}")));
    }
    let (pa, pb) = (a.points(), b.points());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| squared_distance(pa.row(i), pb.row(j))).collect())
        .collect();
    let cost = Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("square");
    let cols = assignment(cost.view());
    Ok(cols.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64)
}

/// Squared 2-Wasserstein distance between two 1-D empirical measures with
/// uniform weights, by matching quantiles.
pub fn w2sq_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (wa, wb);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        total += m * (a[i] - b[j]) * (a[i] - b[j]);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            ra = wa;
        }
        if rb <= 1e-15 {
            j += 1;
            rb = wb;
        }
    }
    total
}

/// Sliced estimate of the squared 2-Wasserstein distance: the mean over
/// `n_projections` random unit directions of the 1-D squared distance of the
/// projected samples.
pub fn w2_sliced<R: Rng + ?Sized>(a: &SampleSet, b: &SampleSet, n_projections: usize, rng: &mut R) -> Result<f64> {
    ensure_dim(a.dim(), b.dim())?;
    if n_projections == 0 {
        return Err(invalid("need at least one projection"));
    }
    let d = a.dim();
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal));
        let norm = dir.dot(&dir).sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir /= norm;
        }
        let mut pa = a.points().dot(&dir).to_vec();
        let mut pb = b.points().dot(&dir).to_vec();
        total += w2sq_1d(&mut pa, &mut pb);
    }
    Ok(total / n_projections as f64)
}
