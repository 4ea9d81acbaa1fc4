//! Dense matrices, index sets and the selection/norm kernels used by the
//! certification code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};

pub const DEFAULT_POWER_TOL: f64 = 1e-9;
pub const DEFAULT_POWER_MAX_ITER: usize = 1000;
const POWER_SEED: u64 = 0x5eed_0f_5ca1e;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| x * c).collect()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place updates; callers keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(dim(format!(
                "matvec: {} columns vs vector of length {}",
                self.cols,
                x.len()
            )));
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Mᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(dim(format!(
                "transposed matvec: {} rows vs vector of length {}",
                self.rows,
                y.len()
            )));
        }
        Ok(self.matvec_t_unchecked(y))
    }

    pub(crate) fn matvec_t_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += yi * w;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|i| norm2(self.row(i))).collect()
    }

    /// Largest row norm, `‖M‖_{2,∞}`.
    pub fn group_norm(&self) -> Result<f64> {
        if self.rows == 0 || self.cols == 0 {
            return Err(invalid("group norm of an empty matrix"));
        }
        Ok(self.row_norms().into_iter().fold(0.0, f64::max))
    }

    pub fn submatrix(&self, rows: &IndexSet, cols: &IndexSet) -> Result<Self> {
        if rows.universe() != self.rows || cols.universe() != self.cols {
            return Err(dim(format!(
                "submatrix of {}x{} with index universes {}x{}",
                self.rows,
                self.cols,
                rows.universe(),
                cols.universe()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows.iter() {
            let r = self.row(i);
            data.extend(cols.iter().map(|&j| r[j]));
        }
        Ok(Self {
            rows: rows.len(),
            cols: cols.len(),
            data,
        })
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        self.spectral_norm_with(DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)
    }

    /// Largest singular value by power iteration on the smaller Gram matrix.
    ///
    /// Stops once the eigen-residual of the Gram iterate certifies the
    /// estimate to within `tol * max(1, ‖M‖₂)`, or after `max_iter` steps.
    pub fn spectral_norm_with(&self, tol: f64, max_iter: usize) -> Result<f64> {
        if !self.is_finite() {
            return Err(invalid("spectral norm of a non-finite matrix"));
        }
        if !(tol > 0.0) {
            return Err(invalid("spectral norm tolerance must be positive"));
        }
        if self.rows == 0 || self.cols == 0 {
            return Ok(0.0);
        }
        if self.rows == 1 || self.cols == 1 {
            return Ok(self.frobenius_norm());
        }
        let wide = self.cols > self.rows;
        let n = if wide { self.rows } else { self.cols };
        let forward = |v: &[f64]| {
            if wide {
                self.matvec_t_unchecked(v)
            } else {
                self.matvec_unchecked(v)
            }
        };
        let backward = |u: &[f64]| {
            if wide {
                self.matvec_unchecked(u)
            } else {
                self.matvec_t_unchecked(u)
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let nv = norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);

        let mut best = 0.0_f64;
        for _ in 0..max_iter {
            let u = forward(&v);
            let rho = dot(&u, &u);
            best = best.max(rho);
            if rho == 0.0 {
                // Landed in the null space; restart from a fresh direction.
                v = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let nv = norm2(&v);
                if nv == 0.0 {
                    break;
                }
                v.iter_mut().for_each(|x| *x /= nv);
                continue;
            }
            let w = backward(&u);
            let resid = w
                .iter()
                .zip(&v)
                .map(|(wi, vi)| (wi - rho * vi).powi(2))
                .sum::<f64>()
                .sqrt();
            let sigma = rho.sqrt();
            if resid <= tol * sigma * sigma.max(1.0) {
                break;
            }
            let nw = norm2(&w);
            v = w.into_iter().map(|x| x / nw).collect();
        }
        if best == 0.0 && self.data.iter().any(|&x| x != 0.0) {
            return Err(Error::Consistency(
                "power iteration failed to leave the null space".into(),
            ));
        }
        Ok(best.sqrt())
    }
}

/// Sorted, duplicate-free subset of `0..universe`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe: usize,
}

impl IndexSet {
    /// Builds a set from arbitrary indices, sorting and deduplicating.
    pub fn new(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= universe) {
            return Err(invalid(format!(
                "index {bad} outside universe of size {universe}"
            )));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(Self { indices, universe })
    }

    pub fn full(universe: usize) -> Self {
        Self {
            indices: (0..universe).collect(),
            universe,
        }
    }

    pub fn empty(universe: usize) -> Self {
        Self {
            indices: Vec::new(),
            universe,
        }
    }

    pub fn complement(&self) -> Self {
        let mut mask = vec![true; self.universe];
        for &i in &self.indices {
            mask[i] = false;
        }
        Self {
            indices: (0..self.universe).filter(|&i| mask[i]).collect(),
            universe: self.universe,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.indices.iter()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.universe == other.universe && self.indices.iter().all(|&i| other.contains(i))
    }

    pub fn gather(&self, v: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| v[i]).collect()
    }

    /// Inverse of [`gather`](Self::gather): places `values` at the set's
    /// positions of a zero vector of length `universe`.
    pub fn scatter(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.indices.len() {
            return Err(dim("scatter length mismatch"));
        }
        let mut out = vec![0.0; self.universe];
        for (&i, &v) in self.indices.iter().zip(values) {
            out[i] = v;
        }
        Ok(out)
    }
}

/// Indices of `v` ordered by decreasing value, lowest index first among ties.
pub fn descending_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

/// The `s`-th largest entry (1-based). `s = 0` gives `+∞`, the maximum over
/// an empty selection in the radius convention.
pub fn kth_largest(v: &[f64], s: usize) -> Result<f64> {
    if s > v.len() {
        return Err(invalid(format!(
            "cannot take the {s}-th largest of {} entries",
            v.len()
        )));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(invalid("NaN in selection input"));
    }
    if s == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[s - 1])
}

/// Positions of the `s` largest entries; ties go to the lowest index.
pub fn top_k_indices(v: &[f64], s: usize) -> Result<IndexSet> {
    if s > v.len() {
        return Err(invalid(format!("cannot select {s} of {} entries", v.len())));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(invalid("NaN in selection input"));
    }
    let mut idx = descending_order(v);
    idx.truncate(s);
    IndexSet::new(idx, v.len())
}
