#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sllcert::linalg::DenseMatrix;
use sllcert::network::{LayerWeights, Network};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

/// Gaussian network with `widths = [d0, ..., dK]`.
pub fn random_net(rng: &mut ChaCha8Rng, widths: &[usize], classes: usize, bias: bool) -> Network {
    let mut layers = Vec::new();
    for pair in widths.windows(2) {
        let s = 1.0 / (pair[0] as f64).sqrt();
        let w = gaussian_matrix(rng, pair[1], pair[0], s);
        let b = if bias {
            (0..pair[1])
                .map(|_| 0.3 * rng.gen_range(-1.0..1.0))
                .collect()
        } else {
            vec![0.0; pair[1]]
        };
        layers.push(LayerWeights::new(w, b).unwrap());
    }
    let last = *widths.last().unwrap();
    let a = gaussian_matrix(rng, classes, last, 1.0 / (last as f64).sqrt());
    Network::new(layers, a).unwrap()
}

pub fn random_small_net(
    rng: &mut ChaCha8Rng,
    max_width: usize,
    max_depth: usize,
    bias: bool,
) -> Network {
    let depth = rng.gen_range(1..=max_depth);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..=max_width)).collect();
    let classes = rng.gen_range(2..=4);
    random_net(rng, &widths, classes, bias)
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform point in the closed unit ball.
pub fn ball_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let u = unit_vector(rng, d);
    let r: f64 = rng.gen_range(0.0f64..1.0).powf(1.0 / d as f64);
    u.into_iter().map(|x| x * r).collect()
}

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Largest singular value from a full SVD.
pub fn svd_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub mod fd;
pub mod oracle;
pub mod robust;
