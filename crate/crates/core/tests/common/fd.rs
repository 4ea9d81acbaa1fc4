//! Central finite differences against the hand-written gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sllcert::attack::surrogate_gradient;
use sllcert::linalg::DenseMatrix;
use sllcert::network::Network;
use sllcert::train::{objective_gradient, orth_penalty, orth_penalty_grad};

use super::{ball_point, gaussian_matrix, random_small_net};

const H: f64 = 1e-6;

/// `‖got − want‖ / ‖want‖`, with the denominator floored at `1e-8` for
/// vanishing gradients.
fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Distance to the nearest kink of the surrogate at `x`: ReLU switches and
/// ties for the runner-up logit.
fn kink_distance(net: &Network, x: &[f64], label: usize) -> f64 {
    let t = net.forward(x).unwrap();
    let mut d = f64::INFINITY;
    for l in &t.layers {
        for &z in &l.pre_activation {
            d = d.min(z.abs());
        }
    }
    let mut rivals: Vec<f64> = (0..t.logits.len())
        .filter(|&j| j != label)
        .map(|j| t.logits[j])
        .collect();
    rivals.sort_by(|a, b| b.total_cmp(a));
    if rivals.len() > 1 {
        d = d.min(rivals[0] - rivals[1]);
    }
    d
}

/// Relative error of the input gradient of the margin surrogate at a random
/// differentiable point.
pub fn surrogate_check(r: &mut ChaCha8Rng) -> f64 {
    loop {
        let net = random_small_net(r, 10, 3, true);
        let x = ball_point(r, net.input_dim());
        let label = r.gen_range(0..net.num_classes());
        if kink_distance(&net, &x, label) < 1e-3 {
            continue;
        }
        let (_, g) = surrogate_gradient(&net, &x, label).unwrap();
        let fd = central(|p| surrogate_gradient(&net, p, label).unwrap().0, &x);
        return rel_err(&g, &fd);
    }
}

/// Relative error of the frame-penalty gradient on a random matrix.
pub fn orth_check(r: &mut ChaCha8Rng) -> f64 {
    let (rows, cols) = (r.gen_range(1..=6), r.gen_range(1..=6));
    let w = gaussian_matrix(r, rows, cols, 1.0);
    let g = orth_penalty_grad(&w);
    let fd = central(
        |p| orth_penalty(&DenseMatrix::new(rows, cols, p.to_vec()).unwrap()),
        w.as_slice(),
    );
    rel_err(g.as_slice(), &fd)
}

fn flatten(net: &Network) -> Vec<f64> {
    let mut v = Vec::new();
    for l in net.layers() {
        v.extend(l.weights.as_slice());
        v.extend(&l.bias);
    }
    v.extend(net.classifier().as_slice());
    v
}

fn unflatten(template: &Network, p: &[f64]) -> Network {
    let mut net = template.clone();
    let mut at = 0;
    for l in net.layers_mut() {
        let n = l.weights.as_slice().len();
        l.weights.as_mut_slice().copy_from_slice(&p[at..at + n]);
        at += n;
        let b = l.bias.len();
        l.bias.copy_from_slice(&p[at..at + b]);
        at += b;
    }
    let n = net.classifier().as_slice().len();
    net.classifier_mut()
        .as_mut_slice()
        .copy_from_slice(&p[at..at + n]);
    net
}

/// Relative error of the full training-objective gradient on a small batch.
pub fn objective_check(r: &mut ChaCha8Rng) -> f64 {
    loop {
        let net = random_small_net(r, 6, 2, true);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| ball_point(r, net.input_dim())).collect();
        if xs.iter().any(|x| {
            net.forward(x)
                .unwrap()
                .layers
                .iter()
                .flat_map(|l| &l.pre_activation)
                .any(|z| z.abs() < 1e-3)
        }) {
            continue;
        }
        let ys: Vec<usize> = (0..4).map(|_| r.gen_range(0..net.num_classes())).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let eta = r.gen_range(0.0..0.5);
        let (_, g) = objective_gradient(&net, &refs, &ys, eta).unwrap();
        let mut gv = Vec::new();
        for (w, b) in g.weights.iter().zip(&g.bias) {
            gv.extend(w.as_slice());
            gv.extend(b);
        }
        gv.extend(g.classifier.as_slice());
        let fd = central(
            |p| {
                objective_gradient(&unflatten(&net, p), &refs, &ys, eta)
                    .unwrap()
                    .0
            },
            &flatten(&net),
        );
        return rel_err(&gv, &fd);
    }
}
