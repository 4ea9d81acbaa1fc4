//! Sparse local Lipschitz analysis with respect to the parameters of
//! zero-bias networks: ζ bounds, scaled parameter distances, critical
//! angular distances, robust radii and scales, robust sparse regularity,
//! flatness and the generalization bound.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;

use crate::babel::{babel_profile, BabelMode, CheapBabel, CoherenceEstimator};
use crate::certify::{compose, SparsityVector};
use crate::data::Dataset;
use crate::error::{dim, invalid, Error, Result};
use crate::linalg::{dot, kth_largest, norm2, sub, DenseMatrix};
use crate::network::{margin, Network};

const ANGLE_SLACK: f64 = 1e-12;
const BALL_SLACK: f64 = 1e-12;

/// Bounds on `‖W^k‖_{2,∞}` and on the reduced babel function of every layer,
/// including the transposed classifier as layer `K+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisConstraints {
    group_norms: Vec<f64>,
    babel: Vec<Vec<f64>>,
    /// `d^k` for `k = 0..=K`.
    widths: Vec<usize>,
    num_classes: usize,
}

impl HypothesisConstraints {
    /// `babel[k-1][s]` bounds `μ_{s,·}` of layer `k` for `s = 0..rows_k`.
    pub fn new(
        group_norms: Vec<f64>,
        babel: Vec<Vec<f64>>,
        widths: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("constraints need at least one hidden layer"));
        }
        let depth = widths.len() - 1;
        if group_norms.len() != depth + 1 || babel.len() != depth + 1 {
            return Err(dim(format!("expected {} layers of constraints", depth + 1)));
        }
        if group_norms.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(invalid("group-norm bounds must be finite and non-negative"));
        }
        for (k, table) in babel.iter().enumerate() {
            let rows = if k < depth {
                widths[k + 1]
            } else {
                widths[depth]
            };
            if table.len() != rows {
                return Err(dim(format!(
                    "babel table {} has {} entries for {rows} rows",
                    k + 1,
                    table.len()
                )));
            }
            if table.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid("babel bounds must be finite and non-negative"));
            }
            if table.last().is_some_and(|&v| v != 0.0) {
                return Err(invalid("babel bound at the last level must be zero"));
            }
            if table.windows(2).any(|p| p[1] > p[0]) {
                return Err(invalid("babel bounds must be non-increasing in s"));
            }
        }
        Ok(Self {
            group_norms,
            babel,
            widths,
            num_classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn group_norms(&self) -> &[f64] {
        &self.group_norms
    }

    /// `M_W[k]` for `k = 1..=K+1`.
    pub fn group_norm(&self, k: usize) -> f64 {
        self.group_norms[k - 1]
    }

    pub fn babel_table(&self, k: usize) -> &[f64] {
        &self.babel[k - 1]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Row count of layer `k`'s matrix; the classifier enters as `Aᵀ`.
    pub fn rows(&self, k: usize) -> usize {
        self.widths[k.min(self.depth())]
    }

    /// Entrywise maximum with `other`; both must describe one architecture.
    pub fn envelope(&self, other: &Self) -> Result<Self> {
        if self.widths != other.widths || self.num_classes != other.num_classes {
            return Err(dim("constraints describe different architectures"));
        }
        let group_norms = self
            .group_norms
            .iter()
            .zip(&other.group_norms)
            .map(|(a, b)| a.max(*b))
            .collect();
        let babel = self
            .babel
            .iter()
            .zip(&other.babel)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.max(*y)).collect())
            .collect();
        Self::new(group_norms, babel, self.widths.clone(), self.num_classes)
    }

    /// Whether `net`'s own constraints are dominated by `self`.
    pub fn admits(&self, net: &Network, mode: BabelMode) -> Result<bool> {
        let own = constraints_from_network(net, mode)?;
        if own.widths != self.widths {
            return Ok(false);
        }
        let norms = own
            .group_norms
            .iter()
            .zip(&self.group_norms)
            .all(|(a, b)| a <= b);
        let babel = own
            .babel
            .iter()
            .zip(&self.babel)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x <= y));
        Ok(norms && babel)
    }

    fn check_sparsity(&self, s: &SparsityVector) -> Result<()> {
        s.check_depth(self.depth())?;
        for k in 1..=self.depth() {
            if s.get(k) > self.widths[k] {
                return Err(invalid(format!(
                    "sparsity {} exceeds width {} at layer {k}",
                    s.get(k),
                    self.widths[k]
                )));
            }
        }
        Ok(())
    }
}

/// `W^1, ..., W^K, Aᵀ`.
pub fn layer_matrices(net: &Network) -> Vec<DenseMatrix> {
    let mut ms: Vec<DenseMatrix> = net.layers().iter().map(|l| l.weights.clone()).collect();
    ms.push(net.classifier().transpose());
    ms
}

fn require_zero_bias(net: &Network) -> Result<()> {
    if net.has_zero_bias() {
        Ok(())
    } else {
        Err(invalid(
            "parameter sensitivity is defined for zero-bias networks only",
        ))
    }
}

/// Constraints tight at `net`: its own group norms and babel values.
///
/// Hidden layers use the babel value maximised over every column sparsity,
/// so one table serves any `s^{k-1}`; the classifier keeps all columns.
pub fn constraints_from_network(net: &Network, mode: BabelMode) -> Result<HypothesisConstraints> {
    require_zero_bias(net)?;
    let est = mode.estimator();
    let mats = layer_matrices(net);
    let depth = net.depth();
    let mut group_norms = Vec::with_capacity(depth + 1);
    let mut babel = Vec::with_capacity(depth + 1);
    for (k, w) in mats.iter().enumerate() {
        group_norms.push(w.group_norm()?);
        if k < depth {
            babel.push(est.row_profile(w)?);
        } else {
            babel.push(babel_profile(&est.pairwise(w, 0)?));
        }
    }
    HypothesisConstraints::new(group_norms, babel, net.widths(), net.num_classes())
}

/// Factor `M_W[n] · √(1 + M_s[n][level])`; a fully removed layer
/// contributes `0`.
fn layer_factor(c: &HypothesisConstraints, n: usize, level: usize) -> f64 {
    match c.babel_table(n).get(level) {
        Some(&mu) => c.group_norm(n) * (1.0 + mu).sqrt(),
        None => 0.0,
    }
}

/// `ζ^k(s) = ∏_{n≤k} M_W[n] √(1 + M_s[n][s^n])`, with the classifier
/// (`n = K+1`) indexed by `s^K`.
pub fn zeta(c: &HypothesisConstraints, s: &SparsityVector, k: usize) -> Result<f64> {
    c.check_sparsity(s)?;
    if k > c.depth() + 1 {
        return Err(invalid(format!("layer {k} beyond K+1 = {}", c.depth() + 1)));
    }
    let mut z = 1.0;
    for n in 1..=k {
        let level = s.get(n.min(c.depth()));
        z *= layer_factor(c, n, level);
    }
    Ok(z)
}

/// `max_k (√rows_k / M_W[k]) · ‖Ŵ^k − W^k‖_{2,∞}`.
pub fn hypothesis_distance(a: &Network, b: &Network, c: &HypothesisConstraints) -> Result<f64> {
    if a.dims() != b.dims() || a.widths() != c.widths() {
        return Err(dim("networks and constraints must share one architecture"));
    }
    let (ma, mb) = (layer_matrices(a), layer_matrices(b));
    let mut d = 0.0_f64;
    for (k, (wa, wb)) in ma.iter().zip(&mb).enumerate() {
        let diff = (0..wa.rows())
            .map(|i| norm2(&sub(wa.row(i), wb.row(i))))
            .fold(0.0, f64::max);
        let m = c.group_norm(k + 1);
        let term = if diff == 0.0 {
            0.0
        } else if m == 0.0 {
            f64::INFINITY
        } else {
            (wa.rows() as f64).sqrt() / m * diff
        };
        d = d.max(term);
    }
    Ok(d)
}

/// `(K+1) · ζ^{K+1}(0) · (1+ν)`.
pub fn robust_global_lipschitz(c: &HypothesisConstraints, nu: f64) -> Result<f64> {
    let zero = SparsityVector::zeros(c.depth());
    Ok((c.depth() + 1) as f64 * zeta(c, &zero, c.depth() + 1)? * (1.0 + nu))
}

/// `(K+1) · ζ^{K+1}(s) · (1+ν)`.
pub fn robust_scale(c: &HypothesisConstraints, s: &SparsityVector, nu: f64) -> Result<f64> {
    Ok((c.depth() + 1) as f64 * zeta(c, s, c.depth() + 1)? * (1.0 + nu))
}

/// Critical angular distances `β^k_i ∈ [0, 1]` of every hidden neuron.
pub fn angular_distances(
    net: &Network,
    x: &[f64],
    c: &HypothesisConstraints,
) -> Result<Vec<Vec<f64>>> {
    require_zero_bias(net)?;
    if net.widths() != c.widths() {
        return Err(dim("network and constraints differ in architecture"));
    }
    if norm2(x) > 1.0 + BALL_SLACK {
        return Err(invalid("inputs must lie in the unit ball"));
    }
    let reps = net.representations(x)?;
    let zero = SparsityVector::zeros(net.depth());
    let mut out = Vec::with_capacity(net.depth());
    for k in 1..=net.depth() {
        let prev: &[f64] = if k == 1 { x } else { &reps[k - 2] };
        let denom = c.group_norm(k) * zeta(c, &zero, k - 1)?;
        let w = &net.layer(k).weights;
        let mut beta = Vec::with_capacity(w.rows());
        for i in 0..w.rows() {
            let ip = dot(w.row(i), prev);
            let arg = if denom == 0.0 { 0.0 } else { ip / denom };
            if arg.abs() > 1.0 + ANGLE_SLACK {
                return Err(Error::Consistency(format!(
                    "angular argument {arg} at layer {k}, neuron {i} exceeds 1"
                )));
            }
            beta.push(arg.clamp(-1.0, 1.0).acos() / PI);
        }
        out.push(beta);
    }
    Ok(out)
}

/// Per-layer slack `−cos(π θ) − ν`, or `None` for layers with `s^k = 0`.
fn layer_terms(
    net: &Network,
    x: &[f64],
    s: &SparsityVector,
    nu: f64,
    c: &HypothesisConstraints,
) -> Result<Vec<Option<f64>>> {
    let trace = net.forward(x)?;
    let beta = angular_distances(net, x, c)?;
    let mut out = Vec::with_capacity(net.depth());
    for k in 1..=net.depth() {
        let sk = s.get(k);
        if sk == 0 {
            out.push(None);
        } else if sk > trace.inactive_count(k) {
            out.push(Some(f64::NEG_INFINITY));
        } else {
            let theta = kth_largest(&beta[k - 1], sk)?;
            out.push(Some(-(PI * theta).cos() - nu));
        }
    }
    Ok(out)
}

/// Radius in scaled parameter distance within which the `s^k` neurons of
/// largest angular distance stay inactive under input perturbations `ν`.
///
/// Layers with `s^k = 0` impose no constraint, so the all-zero vector gives
/// `+∞`. Sparsity beyond the inactive count gives `0`.
pub fn robust_radius(
    net: &Network,
    x: &[f64],
    s: &SparsityVector,
    nu: f64,
    c: &HypothesisConstraints,
) -> Result<f64> {
    check_nu(nu)?;
    c.check_sparsity(s)?;
    let terms = layer_terms(net, x, s, nu, c)?;
    let mut r = f64::INFINITY;
    for (k, t) in terms.into_iter().enumerate() {
        if let Some(t) = t {
            r = r.min(t.max(0.0) / ((k + 1) as f64 * (1.0 + nu)));
        }
    }
    Ok(r)
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(invalid("ν must be finite and non-negative"));
    }
    Ok(())
}

/// Largest per-layer sparsity whose radius term stays `≥ ε` over `V`.
pub fn optimal_robust_sparsity(
    net: &Network,
    v: &Dataset,
    epsilon: f64,
    nu: f64,
    c: &HypothesisConstraints,
) -> Result<SparsityVector> {
    check_nu(nu)?;
    if v.is_empty() {
        return Err(invalid("reference set is empty"));
    }
    if !(epsilon > 0.0) {
        return Err(invalid("ε must be positive"));
    }
    let depth = net.depth();
    let per_point: Vec<Vec<usize>> = v
        .inputs()
        .par_iter()
        .map(|x| -> Result<Vec<usize>> {
            let trace = net.forward(x)?;
            let beta = angular_distances(net, x, c)?;
            Ok((1..=depth)
                .map(|k| {
                    let need = epsilon * k as f64 * (1.0 + nu);
                    let ok = beta[k - 1]
                        .iter()
                        .filter(|&&b| -(PI * b).cos() - nu >= need)
                        .count();
                    ok.min(trace.inactive_count(k))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut s = vec![0; depth + 1];
    for k in 1..=depth {
        s[k] = per_point.iter().map(|p| p[k - 1]).min().unwrap_or(0);
    }
    SparsityVector::new(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustSensitivity {
    pub nu: f64,
    pub epsilon: f64,
    pub s_star: SparsityVector,
    /// Smallest robust radius over the reference set at `s_star`.
    pub r_par: f64,
    pub l_par: f64,
    pub l_rob: f64,
    pub l_global: f64,
}

impl RobustSensitivity {
    pub fn ratio(&self) -> f64 {
        if self.l_global == 0.0 {
            1.0
        } else {
            self.l_rob / self.l_global
        }
    }
}

pub fn robust_sparse_regularity(
    net: &Network,
    v: &Dataset,
    epsilon: f64,
    nu: f64,
    c: &HypothesisConstraints,
) -> Result<RobustSensitivity> {
    let s_star = optimal_robust_sparsity(net, v, epsilon, nu, c)?;
    let r_par = v
        .inputs()
        .par_iter()
        .map(|x| robust_radius(net, x, &s_star, nu, c))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let l_rob = robust_scale(c, &s_star, nu)?;
    Ok(RobustSensitivity {
        nu,
        epsilon,
        s_star,
        r_par,
        l_par: l_rob,
        l_rob,
        l_global: robust_global_lipschitz(c, nu)?,
    })
}

/// Writes `nu,L_rob,L_global,ratio,s_star_1,...,s_star_K`.
pub fn write_regularity_csv<W: Write>(rows: &[RobustSensitivity], mut w: W) -> std::io::Result<()> {
    let depth = rows.first().map_or(0, |r| r.s_star.depth());
    let mut header = String::from("nu,L_rob,L_global,ratio");
    for k in 1..=depth {
        header.push_str(&format!(",s_star_{k}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        let mut line = format!("{},{},{},{}", r.nu, r.l_rob, r.l_global, r.ratio());
        for k in 1..=depth {
            line.push_str(&format!(",{}", r.s_star.get(k)));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessReport {
    pub radius: f64,
    /// Set when the input-side validity condition fails.
    pub diagnostic: Option<String>,
}

/// Parameter radius within which every training point keeps a positive
/// robust margin at budget `ν`.
pub fn flatness_radius(
    net: &Network,
    data: &Dataset,
    s: &SparsityVector,
    nu: f64,
    c: &HypothesisConstraints,
) -> Result<FlatnessReport> {
    check_nu(nu)?;
    c.check_sparsity(s)?;
    if data.is_empty() {
        return Err(invalid("flatness over an empty dataset"));
    }
    let zeta_s = zeta(c, s, c.depth() + 1)?;
    let l_par = robust_scale(c, s, nu)?;
    let per_point = data
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(x, y)| -> Result<(f64, f64)> {
            let trace = net.forward(x)?;
            let r_inp = compose(net, &trace, s)?.r_cum;
            let rho = margin(&trace.logits, y)?;
            let r_par = robust_radius(net, x, s, nu, c)?;
            let slack = (rho - zeta_s * nu).max(0.0);
            let margin_term = if slack == 0.0 {
                0.0
            } else if l_par == 0.0 {
                f64::INFINITY
            } else {
                slack / (2.0 * l_par)
            };
            Ok((r_inp, r_par.min(margin_term)))
        })
        .collect::<Result<Vec<_>>>()?;
    let min_inp = per_point.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if nu > min_inp {
        return Ok(FlatnessReport {
            radius: 0.0,
            diagnostic: Some(format!(
                "ν = {nu} exceeds the smallest input-side radius {min_inp} at s = {s}"
            )),
        });
    }
    Ok(FlatnessReport {
        radius: per_point.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        diagnostic: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub term1: f64,
    pub term2: f64,
    pub total: f64,
    pub ln_covering: f64,
    /// `Σ_k ln(2 + K ‖W^k‖_{2,∞})`, the union-bound cost of bucketing the
    /// constraint hyper-parameters; not included in `total`.
    pub bucketing_log_term: f64,
}

/// Robust generalization bound with all hidden constants set to one.
pub fn generalization_bound(
    net: &Network,
    gamma: f64,
    nu: f64,
    alpha: f64,
    m: usize,
    s: &SparsityVector,
) -> Result<BoundReport> {
    if !(gamma > 0.0) {
        return Err(invalid("γ must be positive"));
    }
    if m == 0 {
        return Err(invalid("sample size must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("α must lie in (0, 1)"));
    }
    check_nu(nu)?;
    require_zero_bias(net)?;
    s.check_depth(net.depth())?;
    let widths = net.widths();
    let depth = net.depth();
    for k in 1..=depth {
        if s.get(k) > widths[k] {
            return Err(invalid(format!("sparsity exceeds width at layer {k}")));
        }
    }
    let mats = layer_matrices(net);
    let mf = m as f64;
    let kp1 = (depth + 1) as f64;

    let mut ln_cover = 0.0;
    for w in &mats {
        let (rows, cols) = w.shape();
        ln_cover += (rows * cols) as f64 * (1.0 + 4.0 * (rows as f64).sqrt() * mf * kp1).ln();
    }
    let term1 = ((ln_cover + (2.0 / alpha).ln()) / mf).sqrt();

    let mut prod = 1.0;
    let mut bucket = 0.0;
    for (idx, w) in mats.iter().enumerate() {
        let k = idx + 1;
        let g = w.group_norm()?;
        bucket += (2.0 + depth as f64 * g).ln();
        let (s_row, s_col) = if k <= depth {
            (s.get(k), s.get(k - 1))
        } else {
            (s.get(depth), 0)
        };
        if s_row >= w.rows() || s_col >= w.cols() {
            prod = 0.0;
            continue;
        }
        let mu = CheapBabel.reduced_babel(w, s_row, s_col)?;
        prod *= g * (1.0 + mu).sqrt();
    }
    let term2 = (1.0 + nu) / (gamma * mf) * prod;
    Ok(BoundReport {
        term1,
        term2,
        total: term1 + term2,
        ln_covering: ln_cover,
        bucketing_log_term: bucket,
    })
}
