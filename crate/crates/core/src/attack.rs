//! Empirical adversarial search: ℓ₂ PGD on the margin surrogate, random
//! directions, and bisection for the smallest successful budget.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{invalid, Result};
use crate::linalg::{dot, norm2};
use crate::network::{argmax, Network};
use crate::registry::Registry;

/// Upper end of the bisection interval for [`min_adv_radius`].
pub const ADV_SEARCH_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub steps: usize,
    /// Defaults to `2.5 ν / steps` when unset.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            step_size: None,
            restarts: 10,
            seed: 0,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("attack needs at least one step"));
        }
        if self.restarts == 0 {
            return Err(invalid("attack needs at least one restart"));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0) || !a.is_finite() {
                return Err(invalid("step size must be positive"));
            }
        }
        Ok(())
    }
}

/// Searches for `x'` with `‖x' − x‖₂ ≤ ν` and a prediction other than `label`.
pub trait Attack: Send + Sync {
    fn find(&self, net: &Network, x: &[f64], label: usize, nu: f64) -> Result<Option<Vec<f64>>>;
}

fn check_budget(nu: f64) -> Result<()> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(invalid("attack budget must be finite and non-negative"));
    }
    Ok(())
}

fn flipped(net: &Network, x: &[f64], label: usize) -> Result<bool> {
    Ok(argmax(&net.logits(x)?) != label)
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Surrogate `max_{j≠y} u_j − u_y` and its gradient in `x`, with ReLU
/// subgradient `0` at the kink.
pub fn surrogate_gradient(net: &Network, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= net.num_classes() {
        return Err(invalid("label out of range"));
    }
    let mut pre = Vec::with_capacity(net.depth());
    let mut cur = x.to_vec();
    if cur.len() != net.input_dim() {
        return Err(invalid("input has the wrong dimension"));
    }
    for l in net.layers() {
        let z: Vec<f64> = (0..l.out_dim())
            .map(|i| dot(l.weights.row(i), &cur) + l.bias[i])
            .collect();
        cur = z.iter().map(|v| v.max(0.0)).collect();
        pre.push(z);
    }
    let logits = net.classifier().matvec_unchecked(&cur);
    let mut rival = if label == 0 { 1 } else { 0 };
    for (j, &v) in logits.iter().enumerate() {
        if j != label && v > logits[rival] {
            rival = j;
        }
    }
    let loss = logits[rival] - logits[label];
    let a = net.classifier();
    let mut g: Vec<f64> = (0..a.cols())
        .map(|c| a.get(rival, c) - a.get(label, c))
        .collect();
    for (l, z) in net.layers().iter().zip(&pre).rev() {
        for (gi, zi) in g.iter_mut().zip(z) {
            if *zi <= 0.0 {
                *gi = 0.0;
            }
        }
        g = l.weights.matvec_t_unchecked(&g);
    }
    Ok((loss, g))
}

/// Normalised-gradient ascent with projection onto the ℓ₂ ball.
pub struct Pgd {
    pub config: AttackConfig,
}

impl Pgd {
    pub fn new(config: AttackConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl Attack for Pgd {
    fn find(&self, net: &Network, x: &[f64], label: usize, nu: f64) -> Result<Option<Vec<f64>>> {
        check_budget(nu)?;
        self.config.validate()?;
        if flipped(net, x, label)? {
            return Ok(Some(x.to_vec()));
        }
        if nu == 0.0 {
            return Ok(None);
        }
        let cfg = &self.config;
        let alpha = cfg.step_size.unwrap_or(2.5 * nu / cfg.steps as f64);
        let d = x.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let radial = Uniform::new(0.0, 1.0);
        for restart in 0..cfg.restarts {
            let mut delta = if restart == 0 {
                vec![0.0; d]
            } else {
                let u = random_unit(&mut rng, d);
                let t: f64 = radial.sample(&mut rng);
                let r = nu * t.powf(1.0 / d as f64);
                u.into_iter().map(|v| v * r).collect()
            };
            for _ in 0..cfg.steps {
                let probe: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let (_, g) = surrogate_gradient(net, &probe, label)?;
                let gn = norm2(&g);
                if gn == 0.0 {
                    break;
                }
                for (di, gi) in delta.iter_mut().zip(&g) {
                    *di += alpha * gi / gn;
                }
                let dn = norm2(&delta);
                if dn > nu {
                    delta.iter_mut().for_each(|v| *v *= nu / dn);
                }
                let cand: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
                if flipped(net, &cand, label)? {
                    return Ok(Some(cand));
                }
            }
        }
        Ok(None)
    }
}

/// Uniform directions on the sphere of radius `ν`.
pub struct RandomDirections {
    pub samples: usize,
    pub seed: u64,
}

impl Attack for RandomDirections {
    fn find(&self, net: &Network, x: &[f64], label: usize, nu: f64) -> Result<Option<Vec<f64>>> {
        check_budget(nu)?;
        if flipped(net, x, label)? {
            return Ok(Some(x.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..self.samples {
            let u = random_unit(&mut rng, x.len());
            let cand: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + nu * b).collect();
            if flipped(net, &cand, label)? {
                return Ok(Some(cand));
            }
        }
        Ok(None)
    }
}

pub fn attacks(config: AttackConfig) -> Result<Registry<dyn Attack>> {
    let mut r: Registry<dyn Attack> = Registry::new("attack");
    r.register("pgd", Arc::new(Pgd::new(config)?));
    r.register(
        "random",
        Arc::new(RandomDirections {
            samples: config.steps * config.restarts,
            seed: config.seed,
        }),
    );
    Ok(r)
}

pub fn pgd_attack(
    net: &Network,
    x: &[f64],
    label: usize,
    nu: f64,
    config: &AttackConfig,
) -> Result<Option<Vec<f64>>> {
    Pgd::new(*config)?.find(net, x, label, nu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdvRadius {
    Found(f64),
    /// No attack succeeded anywhere up to the given budget.
    NotFound(f64),
}

impl AdvRadius {
    /// Found radius, or `+∞` when nothing was found.
    pub fn value(self) -> f64 {
        match self {
            AdvRadius::Found(r) => r,
            AdvRadius::NotFound(_) => f64::INFINITY,
        }
    }
}

impl fmt::Display for AdvRadius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdvRadius::Found(r) => write!(f, "{r}"),
            AdvRadius::NotFound(_) => f.write_str("inf"),
        }
    }
}

/// Bisection on `[0, 2]` for the smallest budget at which `attack` flips the
/// prediction of `x`.
pub fn min_adv_radius(
    net: &Network,
    x: &[f64],
    tol: f64,
    attack: &dyn Attack,
) -> Result<AdvRadius> {
    if !(tol > 0.0) {
        return Err(invalid("bisection tolerance must be positive"));
    }
    let label = net.predict(x)?;
    if attack.find(net, x, label, ADV_SEARCH_MAX)?.is_none() {
        return Ok(AdvRadius::NotFound(ADV_SEARCH_MAX));
    }
    let (mut lo, mut hi) = (0.0, ADV_SEARCH_MAX);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if attack.find(net, x, label, mid)?.is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(AdvRadius::Found(hi))
}
