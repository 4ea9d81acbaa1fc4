//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    ball_point, fd, gaussian_matrix, norm, oracle, random_small_net, rng, robust, svd_norm, to_na,
    unit_vector,
};
use rand::seq::SliceRandom;
use rand::Rng;
use sllcert::attack::{min_adv_radius, pgd_attack, AttackConfig, Pgd};
use sllcert::babel::{babel_bound, reduced_babel, BabelMode};
use sllcert::certify::{compose_with, InputCertificate, InputCertifier};
use sllcert::data::{load_idx, Dataset};
use sllcert::linalg::IndexSet;
use sllcert::network::{reduce, Network};
use sllcert::param::{constraints_from_network, robust_sparse_regularity};
use sllcert::train::{accuracy, activity_report, sgd_train, TrainConfig};

const TRAIN: usize = 4000;
const EVAL: usize = 200;
const LR: f64 = 0.6;
const ETA: f64 = 0.1;

const SOUNDNESS_SHRINK: f64 = 0.999;
const SOUNDNESS_BUDGET: Duration = Duration::from_secs(600);
const SANDWICH_LOW: f64 = 1e-6;
const SANDWICH_HIGH: f64 = 1e-3;
const ADV_TOL: f64 = 1e-4;
const LCUM_RATIO_MAX: f64 = 0.8;
const RADIUS_RATIO_MIN: f64 = 1.2;
const OPTIMALITY_TOL: f64 = 2e-6;
const OPTIMALITY_BUDGET: Duration = Duration::from_secs(60);
const REDUCED_REL_TOL: f64 = 1e-6;
const BABEL_SLACK: f64 = 1e-9;
const EXACT_BABEL_TOL: f64 = 1e-12;
const ROBUST_TRIALS: usize = 500;
const ACTIVE_FRACTION_MAX: f64 = 0.5;
const FLIP_NUS: [f64; 3] = [0.05, 0.1, 0.2];
const REGULARITY_WIDTHS: [usize; 3] = [50, 100, 200];
const FD_TOL: f64 = 1e-4;
const SVD_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mnist() -> Dataset {
    let base = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/");
    load_idx(
        format!("{base}mnist5k-images-idx3-ubyte.gz"),
        format!("{base}mnist5k-labels-idx1-ubyte.gz"),
        None,
    )
    .expect("bundled MNIST subset")
}

fn train_config(hidden: Vec<usize>, bias: bool) -> TrainConfig {
    TrainConfig {
        hidden,
        eta: ETA,
        steps: 2000,
        batch: 100,
        lr: LR,
        seed: 0,
        bias,
    }
}

struct Model {
    net: Network,
    eval: Dataset,
    held_out: Dataset,
    certs: Vec<InputCertificate>,
    certify_time: Duration,
}

fn soundness(m: &Model) -> Outcome {
    let start = Instant::now();
    let mut flips = 0;
    for (i, (x, c)) in m.eval.inputs().iter().zip(&m.certs).enumerate() {
        if c.r_sparse == 0.0 {
            continue;
        }
        let cfg = AttackConfig {
            steps: 50,
            restarts: 10,
            seed: i as u64,
            step_size: None,
        };
        let nu = SOUNDNESS_SHRINK * c.r_sparse;
        if pgd_attack(&m.net, x, c.predicted, nu, &cfg)
            .unwrap()
            .is_some()
        {
            flips += 1;
        }
    }
    let elapsed = start.elapsed() + m.certify_time;
    outcome(
        flips == 0 && elapsed < SOUNDNESS_BUDGET,
        format!(
            "{flips}/{} flips at 0.999 r_sparse, {:.1} s",
            m.eval.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn sandwich(m: &Model) -> Outcome {
    let mut bad = 0;
    let mut tightest = f64::INFINITY;
    for (i, (x, c)) in m.eval.inputs().iter().zip(&m.certs).enumerate() {
        let pgd = Pgd::new(AttackConfig {
            seed: i as u64,
            ..AttackConfig::default()
        })
        .unwrap();
        let adv = min_adv_radius(&m.net, x, ADV_TOL, &pgd).unwrap().value();
        tightest = tightest.min(adv - c.r_sparse);
        if !(c.r_global - SANDWICH_LOW <= c.r_sparse && c.r_sparse <= adv + SANDWICH_HIGH) {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{bad} violations, min(r_adv - r_sparse) = {tightest:.3e}"),
    )
}

fn improvement(m: &Model) -> Outcome {
    let n = m.certs.len() as f64;
    let lcum = m
        .certs
        .iter()
        .map(|c| c.l_cum / c.l_cum_global)
        .sum::<f64>()
        / n;
    let usable: Vec<&InputCertificate> = m.certs.iter().filter(|c| c.r_global > 0.0).collect();
    let radius = usable.iter().map(|c| c.r_sparse / c.r_global).sum::<f64>() / usable.len() as f64;
    let depth = m.net.depth();
    let full: Vec<f64> = m
        .net
        .layers()
        .iter()
        .map(|l| l.weights.spectral_norm().unwrap())
        .collect();
    let per_layer: Vec<String> = (0..depth)
        .map(|k| {
            format!(
                "{:.3}",
                m.certs.iter().map(|c| c.scales[k] / full[k]).sum::<f64>() / n
            )
        })
        .collect();
    outcome(
        lcum <= LCUM_RATIO_MAX && radius >= RADIUS_RATIO_MIN,
        format!(
            "mean l_cum ratio {lcum:.4} (<= {LCUM_RATIO_MAX}), mean r_sparse/r_global {radius:.4} (>= {RADIUS_RATIO_MIN}), per-layer scale ratios [{}]",
            per_layer.join(", ")
        ),
    )
}

fn optimality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1004);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let net = random_small_net(&mut r, 6, 2, true);
        let ctx = InputCertifier::new(&net).unwrap();
        for _ in 0..20 {
            let x = ball_point(&mut r, net.input_dim());
            let got = ctx.certify(&x).unwrap().r_sparse;
            worst = worst.max((got - oracle::best_certificate(&net, &x)).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= OPTIMALITY_TOL && elapsed < OPTIMALITY_BUDGET,
        format!(
            "max gap {worst:.2e} over 400 inputs, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn reduced_equivalence(m: &Model) -> Outcome {
    let mut r = rng(1005);
    let ctx = InputCertifier::new(&m.net).unwrap();
    let (mut pairs, mut failures, mut worst) = (0, 0, 0.0f64);
    for (x, c) in m.eval.inputs().iter().zip(&m.certs) {
        let model = ctx.model(x).unwrap();
        let comp = compose_with(&model, &c.s_hat).unwrap();
        let red = reduce(&m.net, &model.retained_sets(&c.s_hat).unwrap()).unwrap();
        let reach = comp.r_cum.min(1.0);
        for _ in 0..5 {
            let u = unit_vector(&mut r, x.len());
            let t = SOUNDNESS_SHRINK * r.gen_range(0.0..=1.0);
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + t * reach * b).collect();
            let full = m.net.representations(&xp).unwrap().pop().unwrap();
            let got = red.representation(&xp).unwrap();
            let diff: Vec<f64> = full.iter().zip(&got).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&full).max(f64::MIN_POSITIVE);
            worst = worst.max(if norm(&diff) == 0.0 { 0.0 } else { rel });
            if norm(&diff) > REDUCED_REL_TOL * norm(&full) {
                failures += 1;
            }
            pairs += 1;
        }
    }
    outcome(
        failures == 0 && pairs == 1000,
        format!("{failures}/{pairs} failures, max relative gap {worst:.2e}"),
    )
}

fn random_subset(r: &mut impl Rng, n: usize, k: usize) -> IndexSet {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    idx.truncate(k);
    IndexSet::new(idx, n).unwrap()
}

fn babel_dominance() -> Outcome {
    let mut r = rng(1006);
    let mut failures = 0;
    for _ in 0..1000 {
        let (d1, d2) = (r.gen_range(1..=50), r.gen_range(1..=50));
        let w = gaussian_matrix(&mut r, d1, d2, 1.0);
        let (s1, s2) = (r.gen_range(0..d1), r.gen_range(0..d2));
        let bound = babel_bound(&w, s1, s2, BabelMode::Cheap).unwrap();
        let sub = w
            .submatrix(
                &random_subset(&mut r, d1, d1 - s1),
                &random_subset(&mut r, d2, d2 - s2),
            )
            .unwrap();
        if svd_norm(&to_na(&sub)) > bound + BABEL_SLACK {
            failures += 1;
        }
    }
    let (mut cases, mut mismatches) = (0, 0);
    for d1 in 1..=5 {
        for d2 in 1..=5 {
            for _ in 0..4 {
                let w = gaussian_matrix(&mut r, d1, d2, 1.0);
                let na = to_na(&w);
                for s1 in 0..d1 {
                    for s2 in 0..d2 {
                        let got = reduced_babel(&w, s1, s2, BabelMode::Exact).unwrap();
                        let want = oracle::babel(&na, s1, s2, false);
                        if (got - want).abs() > EXACT_BABEL_TOL * want.max(1.0) {
                            mismatches += 1;
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    outcome(
        failures == 0 && mismatches == 0,
        format!("{failures}/1000 dominance failures, {mismatches}/{cases} exact-mode mismatches"),
    )
}

fn robust_soundness() -> Outcome {
    let mut r = rng(1007);
    let (mut pass, mut skipped, mut fails) = (0, 0, Vec::new());
    while pass < ROBUST_TRIALS && pass + skipped < 20 * ROBUST_TRIALS {
        match robust::sparse_trial(&mut r) {
            robust::Outcome::Pass => pass += 1,
            robust::Outcome::Skipped => skipped += 1,
            robust::Outcome::Fail(msg) => {
                fails.push(msg);
                pass += 1;
            }
        }
    }
    let mut global_fails = 0;
    for _ in 0..ROBUST_TRIALS {
        if let robust::Outcome::Fail(msg) = robust::global_trial(&mut r) {
            global_fails += 1;
            fails.push(msg);
        }
    }
    let mut detail = format!(
        "sparse {}/{pass} failures ({skipped} draws skipped), global {global_fails}/{ROBUST_TRIALS} failures",
        fails.len() - global_fails
    );
    if let Some(first) = fails.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    outcome(fails.is_empty() && pass == ROBUST_TRIALS, detail)
}

fn activity(m: &Model) -> Outcome {
    let rep = activity_report(&m.net, &m.held_out, &FLIP_NUS, 0).unwrap();
    let sparse = rep
        .median_active_fraction
        .iter()
        .all(|&f| f <= ACTIVE_FRACTION_MAX);
    let increasing = rep.flips.windows(2).all(|w| w[1].1 > w[0].1);
    let flips: Vec<String> = rep
        .flips
        .iter()
        .map(|(nu, f)| format!("{nu}:{f:.3}"))
        .collect();
    outcome(
        sparse && increasing,
        format!(
            "median active fraction {:?}, mean flips [{}]",
            rep.median_active_fraction,
            flips.join(", ")
        ),
    )
}

fn regularity(train: &Dataset, held_out: &Dataset) -> Outcome {
    let nus: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let epsilon = 1.0 / (held_out.len() as f64 * 2.0);
    let mut ok = true;
    let mut minima = Vec::new();
    let mut notes = Vec::new();
    for &width in &REGULARITY_WIDTHS {
        let net = sgd_train(train, &train_config(vec![width], false))
            .unwrap()
            .network;
        let c = constraints_from_network(&net, BabelMode::Cheap).unwrap();
        let rows: Vec<_> = nus
            .iter()
            .map(|&nu| robust_sparse_regularity(&net, held_out, epsilon, nu, &c).unwrap())
            .collect();
        let ratios: Vec<f64> = rows.iter().map(|r| r.ratio()).collect();
        let bounded = ratios.iter().all(|&q| q <= 1.0);
        let first_one = ratios.iter().rposition(|&q| q != 1.0).map_or(0, |i| i + 1);
        let saturates = first_one < ratios.len();
        let shrinking = rows
            .windows(2)
            .all(|w| w[1].s_star.get(1) <= w[0].s_star.get(1));
        ok &= bounded && saturates && shrinking;
        let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        minima.push(min);
        notes.push(format!(
            "d={width}: min ratio {min:.4}, s*/d at nu=0 {:.2}, ratio 1 from nu={}",
            rows[0].s_star.get(1) as f64 / width as f64,
            nus.get(first_one)
                .map_or("never".to_string(), |v| format!("{v:.2}"))
        ));
    }
    let wider_smaller = minima.windows(2).all(|w| w[1] < w[0]);
    outcome(ok && wider_smaller, notes.join("; "))
}

fn hygiene() -> Outcome {
    let mut r = rng(1010);
    let surrogate = (0..100)
        .map(|_| fd::surrogate_check(&mut r))
        .fold(0.0, f64::max);
    let frame = (0..100).map(|_| fd::orth_check(&mut r)).fold(0.0, f64::max);
    let mut spectral = 0.0f64;
    for rows in 1..=8 {
        for cols in 1..=8 {
            for _ in 0..3 {
                let w = gaussian_matrix(&mut r, rows, cols, 1.0);
                spectral = spectral.max((w.spectral_norm().unwrap() - svd_norm(&to_na(&w))).abs());
            }
        }
    }
    outcome(
        surrogate <= FD_TOL && frame <= FD_TOL && spectral <= SVD_TOL,
        format!("PGD gradient {surrogate:.2e}, frame gradient {frame:.2e}, spectral norm {spectral:.2e}"),
    )
}

fn report(id: usize, name: &str, o: &Outcome, started: Instant) -> bool {
    println!(
        "criterion {id:>2} {} {name}: {} [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    o.pass
}

fn main() -> ExitCode {
    let data = mnist();
    let train = data.slice(0..TRAIN);
    let held_out = data.slice(TRAIN..data.len());
    let start = Instant::now();
    let net = sgd_train(&train, &train_config(vec![100, 100], true))
        .unwrap()
        .network;
    println!(
        "2x100 model (eta {ETA}, lr {LR}): held-out accuracy {:.3}, trained in {:.1} s",
        accuracy(&net, &held_out).unwrap(),
        start.elapsed().as_secs_f64()
    );
    let eval = held_out.take(EVAL);
    let start = Instant::now();
    let ctx = InputCertifier::new(&net).unwrap();
    let certs: Vec<InputCertificate> = eval
        .inputs()
        .iter()
        .map(|x| ctx.certify(x).unwrap())
        .collect();
    let model = Model {
        net,
        eval,
        held_out: held_out.clone(),
        certs,
        certify_time: start.elapsed(),
    };

    let mut all = true;
    let t = Instant::now();
    all &= report(1, "certificate soundness", &soundness(&model), t);
    let t = Instant::now();
    all &= report(2, "sandwich", &sandwich(&model), t);
    let t = Instant::now();
    all &= report(3, "sparse vs global improvement", &improvement(&model), t);
    let t = Instant::now();
    all &= report(4, "binary-search optimality", &optimality(), t);
    let t = Instant::now();
    all &= report(
        5,
        "reduced-model equivalence",
        &reduced_equivalence(&model),
        t,
    );
    let t = Instant::now();
    all &= report(6, "babel dominance", &babel_dominance(), t);
    let t = Instant::now();
    all &= report(7, "robust parameter soundness", &robust_soundness(), t);
    let t = Instant::now();
    all &= report(8, "activity shape", &activity(&model), t);
    let t = Instant::now();
    all &= report(9, "regularity shape", &regularity(&train, &held_out), t);
    let t = Instant::now();
    all &= report(10, "numerical hygiene", &hygiene(), t);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
