//! Reduced babel function and the sub-matrix operator-norm bound
//! `‖P_{J1,J2} W‖₂ ≤ √(1 + μ_{s1,s2}(W)) · ‖W‖_{2,∞}`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::registry::Registry;

/// Largest dimension accepted by the exhaustive estimator.
pub const EXACT_MAX_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BabelMode {
    Exact,
    Cheap,
}

impl BabelMode {
    pub fn name(self) -> &'static str {
        match self {
            BabelMode::Exact => "exact",
            BabelMode::Cheap => "cheap",
        }
    }

    pub fn estimator(self) -> Arc<dyn CoherenceEstimator> {
        match self {
            BabelMode::Exact => Arc::new(ExactBabel),
            BabelMode::Cheap => Arc::new(CheapBabel),
        }
    }
}

impl fmt::Display for BabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(BabelMode::Exact),
            "cheap" => Ok(BabelMode::Cheap),
            other => Err(Error::UnknownStrategy {
                kind: "babel mode",
                name: other.to_string(),
                available: "cheap, exact".into(),
            }),
        }
    }
}

/// Pairwise coherence tables and the babel values built from them.
pub trait CoherenceEstimator: Send + Sync {
    fn mode(&self) -> BabelMode;

    /// `C[i][j]` for column sparsity `s2`; the diagonal is zero.
    fn pairwise(&self, w: &DenseMatrix, s2: usize) -> Result<DenseMatrix>;

    /// `C[i][j]` maximised over every admissible column sparsity.
    fn pairwise_sup(&self, w: &DenseMatrix) -> Result<DenseMatrix>;

    fn reduced_babel(&self, w: &DenseMatrix, s1: usize, s2: usize) -> Result<f64> {
        check_levels(w, s1, s2)?;
        Ok(babel_profile(&self.pairwise(w, s2)?)[s1])
    }

    /// `max_{s2} μ_{s1,s2}(W)` for every `s1 = 0..d1`.
    fn row_profile(&self, w: &DenseMatrix) -> Result<Vec<f64>> {
        check_levels(w, 0, 0)?;
        Ok(babel_profile(&self.pairwise_sup(w)?))
    }
}

fn check_levels(w: &DenseMatrix, s1: usize, s2: usize) -> Result<()> {
    let (d1, d2) = w.shape();
    if d1 == 0 || d2 == 0 {
        return Err(invalid("babel function of an empty matrix"));
    }
    if s1 >= d1 || s2 >= d2 {
        return Err(invalid(format!(
            "sparsity ({s1}, {s2}) out of range for a {d1}x{d2} matrix"
        )));
    }
    Ok(())
}

/// `μ(s1) = max_j` sum of the `d1 − s1 − 1` largest off-diagonal entries of
/// column `j`, for `s1 = 0..d1`.
pub fn babel_profile(c: &DenseMatrix) -> Vec<f64> {
    let d1 = c.rows();
    let mut best = vec![0.0; d1];
    for j in 0..d1 {
        let mut col: Vec<f64> = (0..d1).filter(|&i| i != j).map(|i| c.get(i, j)).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        let mut prefix = 0.0;
        // prefix over the m largest; μ(s1) uses m = d1 − s1 − 1
        let mut sums = vec![0.0; d1];
        for (m, v) in col.iter().enumerate() {
            prefix += v;
            sums[m + 1] = prefix;
        }
        for s1 in 0..d1 {
            best[s1] = f64::max(best[s1], sums[d1 - s1 - 1]);
        }
    }
    best
}

/// Coherence with `‖W‖²_{2,∞}` in every denominator. The inner maximum over
/// column subsets of a fixed size is the larger of the top and (negated)
/// bottom partial sums of the sorted elementwise products.
pub struct CheapBabel;

impl CheapBabel {
    fn table(w: &DenseMatrix, pair: impl Fn(&mut Vec<f64>) -> f64) -> DenseMatrix {
        let d1 = w.rows();
        let g2 = (0..d1).map(|i| dot(w.row(i), w.row(i))).fold(0.0, f64::max);
        let mut out = DenseMatrix::zeros(d1, d1);
        if g2 == 0.0 {
            return out;
        }
        let mut prods = Vec::with_capacity(w.cols());
        for i in 0..d1 {
            for j in (i + 1)..d1 {
                prods.clear();
                prods.extend(w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b));
                let v = pair(&mut prods) / g2;
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

impl CoherenceEstimator for CheapBabel {
    fn mode(&self) -> BabelMode {
        BabelMode::Cheap
    }

    fn pairwise(&self, w: &DenseMatrix, s2: usize) -> Result<DenseMatrix> {
        check_levels(w, 0, s2)?;
        let keep = w.cols() - s2;
        Ok(Self::table(w, |p| {
            p.sort_by(|a, b| b.total_cmp(a));
            let top: f64 = p[..keep].iter().sum();
            let bottom: f64 = p[p.len() - keep..].iter().sum();
            top.max(-bottom).max(0.0)
        }))
    }

    /// Over all non-empty column subsets the best signed sum keeps exactly
    /// the positive (or exactly the negative) products.
    fn pairwise_sup(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        check_levels(w, 0, 0)?;
        Ok(Self::table(w, |p| {
            let pos: f64 = p.iter().filter(|&&v| v > 0.0).sum();
            let neg: f64 = p.iter().filter(|&&v| v < 0.0).sum();
            pos.max(-neg)
        }))
    }
}

/// Exhaustive evaluation with restricted row norms in the denominators.
pub struct ExactBabel;

impl ExactBabel {
    fn guard(w: &DenseMatrix) -> Result<()> {
        if w.rows() > EXACT_MAX_DIM || w.cols() > EXACT_MAX_DIM {
            return Err(Error::ComplexityGuard(format!(
                "exact babel on a {}x{} matrix (limit {EXACT_MAX_DIM}x{EXACT_MAX_DIM})",
                w.rows(),
                w.cols()
            )));
        }
        Ok(())
    }

    /// Max over column masks accepted by `admit` of the normalised |⟨·,·⟩|.
    fn table(w: &DenseMatrix, admit: impl Fn(u32) -> bool) -> DenseMatrix {
        let (d1, d2) = w.shape();
        let mut out = DenseMatrix::zeros(d1, d1);
        for i in 0..d1 {
            for j in (i + 1)..d1 {
                let (a, b) = (w.row(i), w.row(j));
                let mut best = 0.0_f64;
                for mask in 1u32..(1 << d2) {
                    if !admit(mask) {
                        continue;
                    }
                    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                    for c in (0..d2).filter(|c| mask >> c & 1 == 1) {
                        ab += a[c] * b[c];
                        aa += a[c] * a[c];
                        bb += b[c] * b[c];
                    }
                    if aa > 0.0 && bb > 0.0 {
                        best = best.max(ab.abs() / (aa.sqrt() * bb.sqrt()));
                    }
                }
                out.set(i, j, best);
                out.set(j, i, best);
            }
        }
        out
    }
}

impl CoherenceEstimator for ExactBabel {
    fn mode(&self) -> BabelMode {
        BabelMode::Exact
    }

    fn pairwise(&self, w: &DenseMatrix, s2: usize) -> Result<DenseMatrix> {
        check_levels(w, 0, s2)?;
        Self::guard(w)?;
        let keep = (w.cols() - s2) as u32;
        Ok(Self::table(w, |mask| mask.count_ones() == keep))
    }

    fn pairwise_sup(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        check_levels(w, 0, 0)?;
        Self::guard(w)?;
        Ok(Self::table(w, |_| true))
    }
}

pub fn estimators() -> Registry<dyn CoherenceEstimator> {
    let mut r: Registry<dyn CoherenceEstimator> = Registry::new("babel mode");
    r.register("cheap", Arc::new(CheapBabel));
    r.register("exact", Arc::new(ExactBabel));
    r
}

pub fn pairwise_coherence_cheap(w: &DenseMatrix, s2: usize) -> Result<DenseMatrix> {
    CheapBabel.pairwise(w, s2)
}

pub fn reduced_babel(w: &DenseMatrix, s1: usize, s2: usize, mode: BabelMode) -> Result<f64> {
    mode.estimator().reduced_babel(w, s1, s2)
}

/// `√(1 + μ_{s1,s2}(W)) · ‖W‖_{2,∞}`.
pub fn babel_bound(w: &DenseMatrix, s1: usize, s2: usize, mode: BabelMode) -> Result<f64> {
    let mu = reduced_babel(w, s1, s2, mode)?;
    Ok((1.0 + mu).sqrt() * w.group_norm()?)
}
