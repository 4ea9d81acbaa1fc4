//! Fully connected ReLU networks, forward traces and reduced sub-networks.

mod io;

pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION};

use crate::error::{dim, invalid, Result};
use crate::linalg::{all_finite, dot, DenseMatrix, IndexSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LayerWeights {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(dim(format!(
                "bias of length {} for a layer with {} rows",
                bias.len(),
                weights.rows()
            )));
        }
        if !all_finite(&bias) {
            return Err(invalid("bias entries must be finite"));
        }
        Ok(Self { weights, bias })
    }

    pub fn zero_bias(weights: DenseMatrix) -> Self {
        let bias = vec![0.0; weights.rows()];
        Self { weights, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// `x ↦ A Φ^{[K]}(x)` with `Φ^{[k]} = ReLU(W^k Φ^{[k-1]} + b^k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerWeights>,
    classifier: DenseMatrix,
}

impl Network {
    pub fn new(layers: Vec<LayerWeights>, classifier: DenseMatrix) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a network needs at least one hidden layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(dim(format!(
                    "layer {} expects {} inputs but layer {} has {} outputs",
                    k + 2,
                    pair[1].in_dim(),
                    k + 1,
                    pair[0].out_dim()
                )));
            }
        }
        let last = layers.last().map_or(0, LayerWeights::out_dim);
        if classifier.cols() != last {
            return Err(dim(format!(
                "classifier has {} columns but the last layer has width {last}",
                classifier.cols()
            )));
        }
        if classifier.rows() < 2 {
            return Err(invalid("the classifier needs at least two classes"));
        }
        for l in &layers {
            if !l.weights.is_finite() {
                return Err(invalid("layer weights must be finite"));
            }
        }
        if !classifier.is_finite() {
            return Err(invalid("classifier weights must be finite"));
        }
        Ok(Self { layers, classifier })
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    /// Layer `k` in 1-based numbering.
    pub fn layer(&self, k: usize) -> &LayerWeights {
        &self.layers[k - 1]
    }

    pub fn classifier(&self) -> &DenseMatrix {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut DenseMatrix {
        &mut self.classifier
    }

    /// Number of hidden layers `K`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    /// `d^k` for `k = 0..=K`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(LayerWeights::out_dim));
        w
    }

    /// `[d^0, ..., d^K, C]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = self.widths();
        d.push(self.num_classes());
        d
    }

    pub fn has_zero_bias(&self) -> bool {
        self.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0))
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum::<usize>()
            + self.classifier.as_slice().len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(dim(format!(
                "input of length {} for a network with input dimension {}",
                x.len(),
                self.input_dim()
            )));
        }
        if !all_finite(x) {
            return Err(invalid("input must be finite"));
        }
        Ok(())
    }

    /// Output of every hidden layer, without the bookkeeping of [`forward`].
    ///
    /// [`forward`]: Self::forward
    pub fn representations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut reps = Vec::with_capacity(self.depth());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut z = l.weights.matvec_unchecked(&cur);
            for (zi, bi) in z.iter_mut().zip(&l.bias) {
                *zi = (*zi + bi).max(0.0);
            }
            reps.push(z.clone());
            cur = z;
        }
        Ok(reps)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let reps = self.representations(x)?;
        let last = reps.last().expect("depth >= 1");
        Ok(self.classifier.matvec_unchecked(last))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.depth());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let norms = l.weights.row_norms();
            let mut pre = Vec::with_capacity(l.out_dim());
            let mut q = Vec::with_capacity(l.out_dim());
            for i in 0..l.out_dim() {
                let z = dot(l.weights.row(i), &cur) + l.bias[i];
                pre.push(z);
                q.push(normalized_activity(z, norms[i]));
            }
            let output: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
            let inactive = IndexSet::new(
                (0..pre.len()).filter(|&i| pre[i] <= 0.0).collect(),
                pre.len(),
            )?;
            layers.push(LayerTrace {
                pre_activation: pre,
                normalized: q,
                output: output.clone(),
                inactive,
            });
            cur = output;
        }
        let logits = self.classifier.matvec_unchecked(&cur);
        let predicted = argmax(&logits);
        let margin = margin(&logits, predicted)?;
        Ok(ForwardTrace {
            input: x.to_vec(),
            layers,
            logits,
            predicted,
            margin,
        })
    }
}

/// Signed distance of the input to the neuron's switching hyperplane.
/// Zero-weight rows never switch; their activity is pinned at `±∞`.
fn normalized_activity(z: f64, row_norm: f64) -> f64 {
    if row_norm > 0.0 {
        z / row_norm
    } else if z > 0.0 {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `z^k = W^k Φ^{[k-1]} + b^k`.
    pub pre_activation: Vec<f64>,
    /// `q^k_i = z^k_i / ‖w^k_i‖`.
    pub normalized: Vec<f64>,
    /// `Φ^{[k]}`.
    pub output: Vec<f64>,
    /// Neurons with `z^k_i ≤ 0`.
    pub inactive: IndexSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub margin: f64,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `Φ^{[k]}` for `k = 0..=K`, with `Φ^{[0]} = x`.
    pub fn representation(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.input
        } else {
            &self.layers[k - 1].output
        }
    }

    /// `|𝓘^k(x)|`; for `k = 0` the number of zero input coordinates.
    pub fn inactive_count(&self, k: usize) -> usize {
        if k == 0 {
            self.input.iter().filter(|&&v| v == 0.0).count()
        } else {
            self.layers[k - 1].inactive.len()
        }
    }

    pub fn active_count(&self, k: usize) -> usize {
        self.representation(k).len() - self.inactive_count(k)
    }
}

/// Index of the largest entry, lowest index among ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `ρ(u, y) = u_y − max_{j≠y} u_j`.
pub fn margin(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(invalid("margin needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[label] - runner_up)
}

/// A network restricted to retained neuron sets `J^0, ..., J^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedNetwork {
    layers: Vec<LayerWeights>,
    classifier: DenseMatrix,
    retained: Vec<IndexSet>,
}

impl ReducedNetwork {
    pub fn retained(&self) -> &[IndexSet] {
        &self.retained
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn classifier(&self) -> &DenseMatrix {
        &self.classifier
    }

    /// Reduced representation `Φ^{[K]}_J(P_{J^0} x)` scattered back to full width.
    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j0 = &self.retained[0];
        if x.len() != j0.universe() {
            return Err(dim("input length does not match the reduced network"));
        }
        let mut cur = j0.gather(x);
        for l in &self.layers {
            let mut z = l.weights.matvec_unchecked(&cur);
            for (zi, bi) in z.iter_mut().zip(&l.bias) {
                *zi = (*zi + bi).max(0.0);
            }
            cur = z;
        }
        self.retained.last().expect("depth >= 1").scatter(&cur)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let rep = self.representation(x)?;
        let jk = self.retained.last().expect("depth >= 1");
        Ok(self.classifier.matvec_unchecked(&jk.gather(&rep)))
    }
}

/// Restricts `net` to the retained sets `J^0, ..., J^K`.
pub fn reduce(net: &Network, retained: &[IndexSet]) -> Result<ReducedNetwork> {
    let widths = net.widths();
    if retained.len() != widths.len() {
        return Err(dim(format!(
            "need {} retained sets, got {}",
            widths.len(),
            retained.len()
        )));
    }
    for (k, (j, &d)) in retained.iter().zip(&widths).enumerate() {
        if j.universe() != d {
            return Err(dim(format!(
                "retained set {k} has universe {} but layer width is {d}",
                j.universe()
            )));
        }
    }
    let mut layers = Vec::with_capacity(net.depth());
    for (k, l) in net.layers().iter().enumerate() {
        let w = l.weights.submatrix(&retained[k + 1], &retained[k])?;
        let b = retained[k + 1].gather(&l.bias);
        layers.push(LayerWeights {
            weights: w,
            bias: b,
        });
    }
    let classifier = net.classifier().submatrix(
        &IndexSet::full(net.num_classes()),
        retained.last().expect("depth >= 1"),
    )?;
    Ok(ReducedNetwork {
        layers,
        classifier,
        retained: retained.to_vec(),
    })
}
