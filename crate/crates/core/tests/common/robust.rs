//! Randomised soundness trials for the parameter-side radii and constants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sllcert::babel::BabelMode;
use sllcert::certify::SparsityVector;
use sllcert::linalg::{top_k_indices, DenseMatrix};
use sllcert::network::{LayerWeights, Network};
use sllcert::param::{
    angular_distances, constraints_from_network, hypothesis_distance, robust_global_lipschitz,
    robust_radius, robust_scale, HypothesisConstraints,
};

use super::{ball_point, gaussian_matrix, norm, random_net, unit_vector};

pub enum Outcome {
    Pass,
    Skipped,
    Fail(String),
}

fn random_widths(r: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = r.gen_range(1..=3);
    (0..=depth).map(|_| r.gen_range(2..=8)).collect()
}

/// `h + t·D` for per-layer directions `D`.
fn shifted(h: &Network, dirs: &[DenseMatrix], t: f64) -> Network {
    let k = h.depth();
    let add = |a: &DenseMatrix, d: &DenseMatrix| {
        DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + t * d.get(i, j))
    };
    let layers = h
        .layers()
        .iter()
        .zip(dirs)
        .map(|(l, d)| LayerWeights::zero_bias(add(&l.weights, d)))
        .collect();
    Network::new(layers, add(h.classifier(), &dirs[k])).unwrap()
}

fn directions(r: &mut ChaCha8Rng, h: &Network) -> Vec<DenseMatrix> {
    let mut dirs: Vec<DenseMatrix> = h
        .layers()
        .iter()
        .map(|l| gaussian_matrix(r, l.out_dim(), l.in_dim(), 1.0))
        .collect();
    let a = h.classifier();
    dirs.push(gaussian_matrix(r, a.rows(), a.cols(), 1.0));
    // Sometimes move a single layer only.
    if r.gen_bool(0.3) {
        let keep = r.gen_range(0..dirs.len());
        for (i, d) in dirs.iter_mut().enumerate() {
            if i != keep {
                *d = DenseMatrix::zeros(d.rows(), d.cols());
            }
        }
    }
    dirs
}

fn perturbed_input(r: &mut ChaCha8Rng, x: &[f64], nu: f64) -> Vec<f64> {
    let u = unit_vector(r, x.len());
    let rad = if r.gen_bool(0.5) {
        nu
    } else {
        nu * r.gen_range(0.0..1.0)
    };
    x.iter().zip(&u).map(|(a, b)| a + rad * b).collect()
}

fn gap(h: &Network, g: &Network, x: &[f64]) -> f64 {
    let (a, b) = (h.logits(x).unwrap(), g.logits(x).unwrap());
    norm(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>())
}

/// Sparsity with a positive robust radius, drawn per layer among neurons
/// whose slack is positive.
fn sample_sparsity(
    r: &mut ChaCha8Rng,
    h: &Network,
    x: &[f64],
    nu: f64,
    c: &HypothesisConstraints,
) -> Option<SparsityVector> {
    let beta = angular_distances(h, x, c).ok()?;
    let mut s = vec![0];
    for b in &beta {
        let ok = b
            .iter()
            .filter(|&&v| -(std::f64::consts::PI * v).cos() - nu > 1e-9)
            .count();
        s.push(if ok == 0 { 0 } else { r.gen_range(0..=ok) });
    }
    if s.iter().all(|&v| v == 0) {
        return None;
    }
    SparsityVector::new(s).ok()
}

/// Perturbed net inside the robust radius, inactive sets and output gap.
pub fn sparse_trial(r: &mut ChaCha8Rng) -> Outcome {
    let widths = random_widths(r);
    let classes = r.gen_range(2..=4);
    let h = random_net(r, &widths, classes, false);
    let x = ball_point(r, widths[0]);
    let nu = if r.gen_bool(0.3) {
        0.0
    } else {
        r.gen_range(0.0..0.2)
    };
    let mut c = constraints_from_network(&h, BabelMode::Cheap).unwrap();
    let Some(s) = sample_sparsity(r, &h, &x, nu, &c) else {
        return Outcome::Skipped;
    };
    let dirs = directions(r, &h);
    let unit = shifted(&h, &dirs, 1.0);
    let mut found = None;
    for _ in 0..30 {
        let rad = robust_radius(&h, &x, &s, nu, &c).unwrap();
        if !(rad > 0.0) || !rad.is_finite() {
            return Outcome::Skipped;
        }
        let t = 0.999 * rad / hypothesis_distance(&h, &unit, &c).unwrap();
        let g = shifted(&h, &dirs, t);
        if c.admits(&g, BabelMode::Cheap).unwrap() {
            found = Some((g, rad));
            break;
        }
        c = c
            .envelope(&constraints_from_network(&g, BabelMode::Cheap).unwrap())
            .unwrap();
    }
    let Some((g, rad)) = found else {
        return Outcome::Skipped;
    };
    let dist = hypothesis_distance(&h, &g, &c).unwrap();
    if dist > rad {
        return Outcome::Fail(format!("distance {dist} outside radius {rad}"));
    }
    let beta = angular_distances(&h, &x, &c).unwrap();
    let scale = robust_scale(&c, &s, nu).unwrap();
    for _ in 0..4 {
        let xp = perturbed_input(r, &x, nu);
        let (th, tg) = (h.forward(&xp).unwrap(), g.forward(&xp).unwrap());
        for k in 1..=h.depth() {
            let removed = top_k_indices(&beta[k - 1], s.get(k)).unwrap();
            for &i in removed.iter() {
                let (zh, zg) = (
                    th.layers[k - 1].pre_activation[i],
                    tg.layers[k - 1].pre_activation[i],
                );
                if zh > 1e-12 || zg > 1e-12 {
                    return Outcome::Fail(format!(
                        "layer {k} neuron {i} active: h {zh}, perturbed {zg} (s = {s}, ν = {nu})"
                    ));
                }
            }
        }
        let d = gap(&h, &g, &xp);
        if d > scale * dist * (1.0 + 1e-9) + 1e-12 {
            return Outcome::Fail(format!("output gap {d} above {scale} · {dist}"));
        }
    }
    Outcome::Pass
}

/// Arbitrary perturbed net: output gap against the global constant.
pub fn global_trial(r: &mut ChaCha8Rng) -> Outcome {
    let widths = random_widths(r);
    let classes = r.gen_range(2..=4);
    let h = random_net(r, &widths, classes, false);
    let x = ball_point(r, widths[0]);
    let nu = r.gen_range(0.0..0.5);
    let dirs = directions(r, &h);
    let t = 10f64.powf(r.gen_range(-3.0..0.0));
    let g = shifted(&h, &dirs, t);
    let c = constraints_from_network(&h, BabelMode::Cheap)
        .unwrap()
        .envelope(&constraints_from_network(&g, BabelMode::Cheap).unwrap())
        .unwrap();
    let dist = hypothesis_distance(&h, &g, &c).unwrap();
    let l = robust_global_lipschitz(&c, nu).unwrap();
    for _ in 0..4 {
        let xp = perturbed_input(r, &x, nu);
        let d = gap(&h, &g, &xp);
        if d > l * dist * (1.0 + 1e-9) + 1e-12 {
            return Outcome::Fail(format!("output gap {d} above {l} · {dist}"));
        }
    }
    Outcome::Pass
}
