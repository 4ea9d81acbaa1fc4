//! SGD training with cross-entropy and orthogonal frame regularization,
//! classification losses, and activation-pattern diagnostics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{dim, invalid, Result};
use crate::linalg::{dot, norm2, DenseMatrix};
use crate::network::{argmax, margin, LayerWeights, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths `d^1, ..., d^K`.
    pub hidden: Vec<usize>,
    /// Orthogonal frame coefficient.
    pub eta: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            eta: 0.0,
            steps: 2000,
            batch: 100,
            lr: 0.01,
            seed: 0,
            bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be non-empty and positive"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(invalid("η must be finite and non-negative"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Ramp loss: `1` at non-positive margin, `0` from margin `γ` on.
pub fn margin_loss(logits: &[f64], y: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(invalid("γ must be positive"));
    }
    let m = margin(logits, y)?;
    Ok((1.0 - m / gamma).clamp(0.0, 1.0))
}

pub fn zero_one_loss(logits: &[f64], y: usize) -> f64 {
    if argmax(logits) == y {
        0.0
    } else {
        1.0
    }
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("accuracy over an empty dataset"));
    }
    let mut hits = 0usize;
    for (x, y) in data.iter() {
        if net.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn normalized_rows(w: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let norms = w.row_norms();
    let mut t = w.clone();
    for (i, &n) in norms.iter().enumerate() {
        if n > 0.0 {
            t.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    (t, norms)
}

fn gram_residual(t: &DenseMatrix) -> DenseMatrix {
    let r = t.rows();
    let mut e = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            let g = dot(t.row(i), t.row(j));
            let v = if i == j { 1.0 - g } else { -g };
            e.set(i, j, v);
            e.set(j, i, v);
        }
    }
    e
}

/// `‖I − W̃ W̃ᵀ‖²_F` with unit-normalised rows; zero rows stay zero.
pub fn orth_penalty(w: &DenseMatrix) -> f64 {
    let (t, _) = normalized_rows(w);
    gram_residual(&t).as_slice().iter().map(|v| v * v).sum()
}

/// Gradient of [`orth_penalty`] with respect to the unnormalised rows.
pub fn orth_penalty_grad(w: &DenseMatrix) -> DenseMatrix {
    let (t, norms) = normalized_rows(w);
    let e = gram_residual(&t);
    let (r, c) = w.shape();
    let mut g = DenseMatrix::zeros(r, c);
    for i in 0..r {
        if norms[i] == 0.0 {
            continue;
        }
        // ∂/∂w̃_i = −4 Σ_j E_ij w̃_j
        let mut gt = vec![0.0; c];
        for j in 0..r {
            let eij = e.get(i, j);
            if eij != 0.0 {
                for (o, v) in gt.iter_mut().zip(t.row(j)) {
                    *o -= 4.0 * eij * v;
                }
            }
        }
        let proj = dot(&gt, t.row(i));
        for ((o, gv), tv) in g.row_mut(i).iter_mut().zip(&gt).zip(t.row(i)) {
            *o = (gv - proj * tv) / norms[i];
        }
    }
    g
}

/// `(η/(K+1)) Σ_k ‖I − W̃^k W̃^kᵀ‖²_F` over all layers and the classifier.
pub fn frame_regularizer(net: &Network, eta: f64) -> f64 {
    let k1 = (net.depth() + 1) as f64;
    let total: f64 = net
        .layers()
        .iter()
        .map(|l| orth_penalty(&l.weights))
        .sum::<f64>()
        + orth_penalty(net.classifier());
    eta / k1 * total
}

/// Gradients of the training objective, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DenseMatrix>,
    pub bias: Vec<Vec<f64>>,
    pub classifier: DenseMatrix,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers()
                .iter()
                .map(|l| DenseMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            bias: net
                .layers()
                .iter()
                .map(|l| vec![0.0; l.out_dim()])
                .collect(),
            classifier: DenseMatrix::zeros(net.num_classes(), net.classifier().cols()),
        }
    }
}

fn add_outer(m: &mut DenseMatrix, u: &[f64], v: &[f64]) {
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for (o, vj) in m.row_mut(i).iter_mut().zip(v) {
            *o += ui * vj;
        }
    }
}

/// Mean cross-entropy over `batch` plus the frame regularizer, and its
/// gradient.
pub fn objective_gradient(
    net: &Network,
    inputs: &[&[f64]],
    labels: &[usize],
    eta: f64,
) -> Result<(f64, Gradients)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(dim("batch inputs and labels must be non-empty and aligned"));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let n = inputs.len() as f64;
    for (&x, &y) in inputs.iter().zip(labels) {
        if y >= net.num_classes() {
            return Err(invalid("label out of range"));
        }
        let mut reps: Vec<Vec<f64>> = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(net.depth());
        for l in net.layers() {
            let prev = reps.last().expect("non-empty");
            if prev.len() != l.in_dim() {
                return Err(dim("input has the wrong dimension"));
            }
            let z: Vec<f64> = (0..l.out_dim())
                .map(|i| dot(l.weights.row(i), prev) + l.bias[i])
                .collect();
            reps.push(z.iter().map(|v| v.max(0.0)).collect());
            pre.push(z);
        }
        let last = reps.last().expect("non-empty");
        let logits = net.classifier().matvec_unchecked(last);
        loss += cross_entropy(&logits, y);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut g_out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        g_out[y] -= 1.0;
        add_outer(&mut grads.classifier, &g_out, last);
        let mut g = net.classifier().matvec_t_unchecked(&g_out);
        for k in (0..net.depth()).rev() {
            for (gi, zi) in g.iter_mut().zip(&pre[k]) {
                if *zi <= 0.0 {
                    *gi = 0.0;
                }
            }
            add_outer(&mut grads.weights[k], &g, &reps[k]);
            for (b, gi) in grads.bias[k].iter_mut().zip(&g) {
                *b += gi;
            }
            if k > 0 {
                g = net.layers()[k].weights.matvec_t_unchecked(&g);
            }
        }
    }
    loss /= n;
    let scale_all = |m: &mut DenseMatrix| m.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    grads.weights.iter_mut().for_each(scale_all);
    scale_all(&mut grads.classifier);
    grads
        .bias
        .iter_mut()
        .for_each(|b| b.iter_mut().for_each(|v| *v /= n));

    if eta > 0.0 {
        let c = eta / (net.depth() + 1) as f64;
        loss += frame_regularizer(net, eta);
        for (gw, l) in grads.weights.iter_mut().zip(net.layers()) {
            let r = orth_penalty_grad(&l.weights);
            for (o, v) in gw.as_mut_slice().iter_mut().zip(r.as_slice()) {
                *o += c * v;
            }
        }
        let r = orth_penalty_grad(net.classifier());
        for (o, v) in grads.classifier.as_mut_slice().iter_mut().zip(r.as_slice()) {
            *o += c * v;
        }
    }
    Ok((loss, grads))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let a = 1.0 / (cols.max(1) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// Uniform `±1/√fan-in` initialisation.
pub fn init_network(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut fan_in = input_dim;
    for &h in hidden {
        let w = uniform_matrix(rng, h, fan_in);
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let b = if bias {
            (0..h).map(|_| rng.gen_range(-a..a)).collect()
        } else {
            vec![0.0; h]
        };
        layers.push(LayerWeights::new(w, b)?);
        fan_in = h;
    }
    let a = uniform_matrix(rng, classes, fan_in);
    Network::new(layers, a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub network: Network,
    /// Objective on each minibatch, before the step.
    pub losses: Vec<f64>,
}

/// Plain minibatch SGD with per-epoch reshuffling.
pub fn sgd_train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = init_network(
        data.dim(),
        &cfg.hidden,
        data.num_classes(),
        cfg.bias,
        &mut rng,
    )?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = cfg.batch.min(data.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xs: Vec<&[f64]> = idx.iter().map(|&i| data.inputs()[i].as_slice()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let (loss, g) = objective_gradient(&net, &xs, &ys, cfg.eta)?;
        losses.push(loss);
        for (l, (gw, gb)) in net
            .layers_mut()
            .iter_mut()
            .zip(g.weights.iter().zip(&g.bias))
        {
            for (w, d) in l.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= cfg.lr * d;
            }
            if cfg.bias {
                for (b, d) in l.bias.iter_mut().zip(gb) {
                    *b -= cfg.lr * d;
                }
            }
        }
        for (w, d) in net
            .classifier_mut()
            .as_mut_slice()
            .iter_mut()
            .zip(g.classifier.as_slice())
        {
            *w -= cfg.lr * d;
        }
        if !losses.last().is_some_and(|l| l.is_finite()) {
            return Err(invalid("training diverged; lower the learning rate"));
        }
    }
    let network = Network::new(net.layers().to_vec(), net.classifier().clone())?;
    Ok(TrainReport { network, losses })
}

pub const FLIP_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityReport {
    /// `histograms[k-1][a]` counts inputs with exactly `a` active neurons in
    /// layer `k`.
    pub histograms: Vec<Vec<usize>>,
    pub median_active_fraction: Vec<f64>,
    /// `(ν, mean number of neurons changing state)`.
    pub flips: Vec<(f64, f64)>,
}

fn activation_pattern(net: &Network, x: &[f64]) -> Result<Vec<bool>> {
    let mut pat = Vec::new();
    let mut cur = x.to_vec();
    for l in net.layers() {
        let z: Vec<f64> = (0..l.out_dim())
            .map(|i| dot(l.weights.row(i), &cur) + l.bias[i])
            .collect();
        pat.extend(z.iter().map(|&v| v > 0.0));
        cur = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    Ok(pat)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Activity histograms per layer and mean activation flips under random
/// perturbations of each norm in `nus`. The same directions are reused for
/// every norm.
pub fn activity_report(
    net: &Network,
    data: &Dataset,
    nus: &[f64],
    seed: u64,
) -> Result<ActivityReport> {
    if data.is_empty() {
        return Err(invalid("activity over an empty dataset"));
    }
    if nus.iter().any(|nu| !(*nu >= 0.0) || !nu.is_finite()) {
        return Err(invalid(
            "perturbation norms must be finite and non-negative",
        ));
    }
    let widths = net.widths();
    let mut histograms: Vec<Vec<usize>> = widths[1..].iter().map(|&d| vec![0; d + 1]).collect();
    let mut fractions: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); net.depth()];
    let mut flip_totals = vec![0.0; nus.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (x, _) in data.iter() {
        let base = activation_pattern(net, x)?;
        let mut offset = 0;
        for (k, &d) in widths[1..].iter().enumerate() {
            let active = base[offset..offset + d].iter().filter(|&&a| a).count();
            histograms[k][active] += 1;
            fractions[k].push(active as f64 / d as f64);
            offset += d;
        }
        for _ in 0..FLIP_SAMPLES {
            let mut u: Vec<f64> = (0..x.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = norm2(&u);
            if n > 0.0 {
                u.iter_mut().for_each(|v| *v /= n);
            }
            for (t, &nu) in flip_totals.iter_mut().zip(nus) {
                let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + nu * b).collect();
                let pat = activation_pattern(net, &xp)?;
                *t += pat.iter().zip(&base).filter(|(a, b)| a != b).count() as f64;
            }
        }
    }
    let denom = (data.len() * FLIP_SAMPLES) as f64;
    Ok(ActivityReport {
        histograms,
        median_active_fraction: fractions.iter_mut().map(|f| median(f)).collect(),
        flips: nus
            .iter()
            .zip(flip_totals)
            .map(|(&nu, t)| (nu, t / denom))
            .collect(),
    })
}
