//! Sparse local Lipschitz certification of input perturbations.
//!
//! A sparsity vector `s = (s^0, ..., s^K)` names, per layer, how many
//! currently inactive neurons are assumed to stay inactive. Each choice gives
//! a cumulative radius within which that assumption holds and a Lipschitz
//! constant of the correspondingly reduced network; the certificate
//! maximises the resulting margin bound over `s`.

mod curve;
mod monotone;

pub use curve::{security_curve, security_curve_from, CurvePoint, SecurityCurve};
pub use monotone::{monotone_check, MonotoneReport};

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use crate::error::{dim, invalid, Result};
use crate::linalg::{descending_order, norm2, DenseMatrix, IndexSet};
use crate::network::{ForwardTrace, Network};

pub const DEFAULT_TOL: f64 = 1e-6;

/// Per-layer counts of neurons kept inactive; `s^0` is always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparsityVector(Vec<usize>);

impl SparsityVector {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        match levels.first() {
            Some(0) => Ok(Self(levels)),
            Some(_) => Err(invalid("input-level sparsity s^0 must be zero")),
            None => Err(invalid("a sparsity vector needs at least the input level")),
        }
    }

    /// The all-zero vector for a network with `depth` hidden layers.
    pub fn zeros(depth: usize) -> Self {
        Self(vec![0; depth + 1])
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn get(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&s| s == 0)
    }

    /// Entrywise `self ⪰ other`.
    pub fn dominates(&self, other: &SparsityVector) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }

    pub(crate) fn check_depth(&self, depth: usize) -> Result<()> {
        if self.depth() != depth {
            return Err(dim(format!(
                "sparsity vector of depth {} for a network of depth {depth}",
                self.depth()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SparsityVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(";"))
    }
}

/// Per-layer radius and scale functions of a sparse local Lipschitz model.
///
/// `radius(k, s_in, s_out)` bounds how far `Φ^{[k-1]}` may move while the
/// `s_out` selected neurons of layer `k` stay inactive; `scale(k, s_in, s_out)`
/// is the Lipschitz constant of layer `k` restricted to the retained neurons.
pub trait SensitivityModel {
    fn depth(&self) -> usize;

    /// Largest admissible `s^k`.
    fn max_level(&self, k: usize) -> usize;

    fn radius(&self, k: usize, s_in: usize, s_out: usize) -> Result<f64>;

    fn scale(&self, k: usize, s_in: usize, s_out: usize) -> Result<f64>;
}

/// Sensitivity of a fully connected ReLU network around one input.
pub struct FeedforwardSensitivity<'a> {
    net: &'a Network,
    trace: ForwardTrace,
    /// Neurons of each layer ordered by decreasing `−q`.
    order: Vec<Vec<usize>>,
    /// `−q` sorted in decreasing order.
    sorted_neg_q: Vec<Vec<f64>>,
    /// Zero coordinates of the input, lowest index first.
    input_zeros: Vec<usize>,
    cache: RefCell<HashMap<(usize, usize, usize), f64>>,
}

impl<'a> FeedforwardSensitivity<'a> {
    pub fn new(net: &'a Network, trace: ForwardTrace) -> Result<Self> {
        if trace.depth() != net.depth() || trace.input.len() != net.input_dim() {
            return Err(dim("trace does not belong to this network"));
        }
        let mut order = Vec::with_capacity(net.depth());
        let mut sorted_neg_q = Vec::with_capacity(net.depth());
        for lt in &trace.layers {
            let neg: Vec<f64> = lt.normalized.iter().map(|q| -q).collect();
            let o = descending_order(&neg);
            sorted_neg_q.push(o.iter().map(|&i| neg[i]).collect());
            order.push(o);
        }
        let input_zeros = (0..trace.input.len())
            .filter(|&i| trace.input[i] == 0.0)
            .collect();
        Ok(Self {
            net,
            trace,
            order,
            sorted_neg_q,
            input_zeros,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub(crate) fn seed_scale(&self, k: usize, s_in: usize, s_out: usize, value: f64) {
        self.cache.borrow_mut().insert((k, s_in, s_out), value);
    }

    /// `I^k = Top-k(−q^k, s)`; for `k = 0`, the first `s` zero coordinates.
    pub fn removed(&self, k: usize, s: usize) -> Result<IndexSet> {
        let width = self.trace.representation(k).len();
        if s > width {
            return Err(invalid(format!(
                "sparsity {s} exceeds width {width} at layer {k}"
            )));
        }
        let picked = if k == 0 {
            if s > self.input_zeros.len() {
                return Err(invalid(format!(
                    "input has only {} zero coordinates",
                    self.input_zeros.len()
                )));
            }
            self.input_zeros[..s].to_vec()
        } else {
            self.order[k - 1][..s].to_vec()
        };
        IndexSet::new(picked, width)
    }

    /// `J^k`, the complement of [`removed`](Self::removed).
    pub fn retained(&self, k: usize, s: usize) -> Result<IndexSet> {
        Ok(self.removed(k, s)?.complement())
    }

    pub fn retained_sets(&self, s: &SparsityVector) -> Result<Vec<IndexSet>> {
        (0..=self.depth())
            .map(|k| self.retained(k, s.get(k)))
            .collect()
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.depth() {
            return Err(invalid(format!(
                "layer index {k} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }
}

impl SensitivityModel for FeedforwardSensitivity<'_> {
    fn depth(&self) -> usize {
        self.net.depth()
    }

    fn max_level(&self, k: usize) -> usize {
        self.trace.inactive_count(k)
    }

    fn radius(&self, k: usize, _s_in: usize, s_out: usize) -> Result<f64> {
        self.check_layer(k)?;
        let sorted = &self.sorted_neg_q[k - 1];
        if s_out > sorted.len() {
            return Err(invalid(format!(
                "sparsity {s_out} exceeds width {} at layer {k}",
                sorted.len()
            )));
        }
        if s_out == 0 {
            return Ok(f64::INFINITY);
        }
        if s_out > self.max_level(k) {
            return Ok(0.0);
        }
        Ok(sorted[s_out - 1].max(0.0))
    }

    fn scale(&self, k: usize, s_in: usize, s_out: usize) -> Result<f64> {
        self.check_layer(k)?;
        if let Some(&v) = self.cache.borrow().get(&(k, s_in, s_out)) {
            return Ok(v);
        }
        let rows = self.retained(k, s_out)?;
        let cols = self.retained(k - 1, s_in)?;
        let v = layer_scale(self.net, &cols, &rows, k)?;
        self.cache.borrow_mut().insert((k, s_in, s_out), v);
        Ok(v)
    }
}

/// Radius and retained-complement for layer `k` at sparsity `s_k`.
///
/// Returns `I^k = Top-k(−q^k, s_k)` and `r^(k) = ReLU(s_k-th largest of −q^k)`,
/// which is `+∞` at `s_k = 0` and `0` when `s_k` exceeds the inactive count.
pub fn layer_radius(trace: &ForwardTrace, k: usize, s_k: usize) -> Result<(IndexSet, f64)> {
    if k == 0 || k > trace.depth() {
        return Err(invalid(format!(
            "layer index {k} outside 1..={}",
            trace.depth()
        )));
    }
    let lt = &trace.layers[k - 1];
    let d = lt.normalized.len();
    if s_k > d {
        return Err(invalid(format!(
            "sparsity {s_k} exceeds width {d} at layer {k}"
        )));
    }
    let neg: Vec<f64> = lt.normalized.iter().map(|q| -q).collect();
    let order = descending_order(&neg);
    let removed = IndexSet::new(order[..s_k].to_vec(), d)?;
    let r = if s_k == 0 {
        f64::INFINITY
    } else if s_k > lt.inactive.len() {
        0.0
    } else {
        neg[order[s_k - 1]].max(0.0)
    };
    Ok((removed, r))
}

/// `‖P_{J^k, J^{k-1}} W^k‖₂`; zero when either set is empty.
pub fn layer_scale(net: &Network, j_prev: &IndexSet, j_cur: &IndexSet, k: usize) -> Result<f64> {
    if k == 0 || k > net.depth() {
        return Err(invalid(format!(
            "layer index {k} outside 1..={}",
            net.depth()
        )));
    }
    let w: &DenseMatrix = &net.layer(k).weights;
    if j_cur.is_empty() || j_prev.is_empty() {
        if j_cur.universe() != w.rows() || j_prev.universe() != w.cols() {
            return Err(dim("index universes do not match the layer shape"));
        }
        return Ok(0.0);
    }
    w.submatrix(j_cur, j_prev)?.spectral_norm()
}

/// Cumulative radius and Lipschitz constant for one sparsity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    /// `r^(k)` for `k = 1..=K`.
    pub radii: Vec<f64>,
    /// `l^(k)` for `k = 1..=K`.
    pub scales: Vec<f64>,
    pub r_cum: f64,
    pub l_cum: f64,
    pub feasible: bool,
}

/// Combines per-layer radii and scales: `r_cum = min_k r^(k) / l^{[k-1]}`
/// and `l_cum = ∏ l^(k)`. An infeasible `s` yields `r_cum = 0` with the
/// unreduced scales.
pub fn compose_with(model: &impl SensitivityModel, s: &SparsityVector) -> Result<Composition> {
    s.check_depth(model.depth())?;
    let depth = model.depth();
    let feasible = (1..=depth).all(|k| s.get(k) <= model.max_level(k));
    let mut radii = Vec::with_capacity(depth);
    let mut scales = Vec::with_capacity(depth);
    let mut r_cum = f64::INFINITY;
    let mut l_prev = 1.0;
    for k in 1..=depth {
        let (s_in, s_out) = if feasible {
            (s.get(k - 1), s.get(k))
        } else {
            (0, 0)
        };
        let r = model.radius(k, s_in, s_out)?;
        let l = model.scale(k, s_in, s_out)?;
        // A vanishing prefix constant freezes the representation entirely.
        let term = if l_prev == 0.0 {
            f64::INFINITY
        } else {
            r / l_prev
        };
        r_cum = r_cum.min(term);
        radii.push(r);
        scales.push(l);
        l_prev *= l;
    }
    if !feasible {
        r_cum = 0.0;
    }
    Ok(Composition {
        radii,
        scales,
        r_cum,
        l_cum: l_prev,
        feasible,
    })
}

pub fn compose(net: &Network, trace: &ForwardTrace, s: &SparsityVector) -> Result<Composition> {
    let model = FeedforwardSensitivity::new(net, trace.clone())?;
    compose_with(&model, s)
}

/// `margin / (2 ‖A‖₂ l_cum)` with the conventions `0/0 = 0` and `ρ/0 = ∞`.
fn margin_radius(margin: f64, classifier_norm: f64, l_cum: f64) -> f64 {
    if margin <= 0.0 {
        0.0
    } else {
        let denom = 2.0 * classifier_norm * l_cum;
        if denom == 0.0 {
            f64::INFINITY
        } else {
            margin / denom
        }
    }
}

/// Certified radius at a fixed sparsity vector.
pub fn certify_at(net: &Network, x: &[f64], s: &SparsityVector) -> Result<f64> {
    let ctx = InputCertifier::new(net)?;
    let model = ctx.model(x)?;
    ctx.certify_at_with(&model, s)
}

/// Algorithm 1: greedily picks, layer by layer, the largest sparsity whose
/// radius still covers the propagated perturbation `ν̂^{k-1}`.
pub fn greedy_sparsity(model: &impl SensitivityModel, nu: f64) -> Result<SparsityVector> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(invalid(
            "perturbation budget must be finite and non-negative",
        ));
    }
    let depth = model.depth();
    let mut s = vec![0usize; depth + 1];
    let mut nu_hat = nu;
    for k in 1..=depth {
        let mut best = 0;
        for cand in (1..=model.max_level(k)).rev() {
            if nu_hat <= model.radius(k, s[k - 1], cand)? {
                best = cand;
                break;
            }
        }
        s[k] = best;
        nu_hat *= model.scale(k, s[k - 1], best)?;
    }
    SparsityVector::new(s)
}

/// Full input certificate for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCertificate {
    pub predicted: usize,
    pub margin: f64,
    /// Global Lipschitz certificate, `s = 0`.
    pub r_global: f64,
    /// Sparse local certificate.
    pub r_sparse: f64,
    /// Sparsity vector achieving `r_sparse`.
    pub s_hat: SparsityVector,
    pub radii: Vec<f64>,
    pub scales: Vec<f64>,
    pub r_cum: f64,
    pub l_cum: f64,
    pub l_cum_global: f64,
    /// `‖A‖₂`, used in the margin bound.
    pub classifier_norm: f64,
    /// `‖A P_{J^K}‖₂` at `s_hat`, reported only.
    pub reduced_classifier_norm: f64,
    pub tol: f64,
}

/// Certifies inputs against one network, sharing the unreduced norms.
pub struct InputCertifier<'a> {
    net: &'a Network,
    classifier_norm: f64,
    full_scales: Vec<f64>,
    tol: f64,
}

impl<'a> InputCertifier<'a> {
    pub fn new(net: &'a Network) -> Result<Self> {
        Self::with_tol(net, DEFAULT_TOL)
    }

    pub fn with_tol(net: &'a Network, tol: f64) -> Result<Self> {
        if !(tol > 0.0) || !tol.is_finite() {
            return Err(invalid("tolerance must be positive"));
        }
        let classifier_norm = net.classifier().spectral_norm()?;
        let full_scales = net
            .layers()
            .iter()
            .map(|l| l.weights.spectral_norm())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            classifier_norm,
            full_scales,
            tol,
        })
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn classifier_norm(&self) -> f64 {
        self.classifier_norm
    }

    pub fn model(&self, x: &[f64]) -> Result<FeedforwardSensitivity<'a>> {
        let model = FeedforwardSensitivity::new(self.net, self.net.forward(x)?)?;
        for (k, &v) in self.full_scales.iter().enumerate() {
            model.seed_scale(k + 1, 0, 0, v);
        }
        Ok(model)
    }

    pub fn certify_at_with(
        &self,
        model: &FeedforwardSensitivity<'_>,
        s: &SparsityVector,
    ) -> Result<f64> {
        let c = compose_with(model, s)?;
        let margin = model.trace().margin;
        Ok(c.r_cum
            .min(margin_radius(margin, self.classifier_norm, c.l_cum)))
    }

    /// Binary search over `ν` with the greedy sparsity as the safety oracle.
    pub fn certify(&self, x: &[f64]) -> Result<InputCertificate> {
        let model = self.model(x)?;
        let margin = model.trace().margin;
        let zeros = SparsityVector::zeros(self.net.depth());
        let global = compose_with(&model, &zeros)?;
        let r_global = global
            .r_cum
            .min(margin_radius(margin, self.classifier_norm, global.l_cum));

        // ν = r_global is certified by s = 0 itself.
        let mut lo = r_global;
        let mut best = (zeros.clone(), global.clone());
        let mut hi = norm2(x).max(r_global);
        while hi - lo > self.tol {
            let mid = 0.5 * (lo + hi);
            let s = greedy_sparsity(&model, mid)?;
            let c = compose_with(&model, &s)?;
            if mid <= c.r_cum && mid <= margin_radius(margin, self.classifier_norm, c.l_cum) {
                lo = mid;
                best = (s, c);
            } else {
                hi = mid;
            }
        }
        let (s_hat, comp) = best;
        let jk = model.retained(self.net.depth(), s_hat.get(self.net.depth()))?;
        let reduced_classifier_norm = if jk.is_empty() {
            0.0
        } else {
            self.net
                .classifier()
                .submatrix(&IndexSet::full(self.net.num_classes()), &jk)?
                .spectral_norm()?
        };
        Ok(InputCertificate {
            predicted: model.trace().predicted,
            margin,
            r_global,
            r_sparse: lo,
            s_hat,
            radii: comp.radii,
            scales: comp.scales,
            r_cum: comp.r_cum,
            l_cum: comp.l_cum,
            l_cum_global: global.l_cum,
            classifier_norm: self.classifier_norm,
            reduced_classifier_norm,
            tol: self.tol,
        })
    }
}

pub fn certify(net: &Network, x: &[f64], tol: f64) -> Result<InputCertificate> {
    InputCertifier::with_tol(net, tol)?.certify(x)
}
