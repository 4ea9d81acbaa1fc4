//! Independent re-derivation of the per-input certificate: nalgebra forward
//! pass, full-SVD norms and exhaustive enumeration of sparsity vectors.

use nalgebra::{DMatrix, DVector};
use sllcert::network::Network;

use super::{svd_norm, to_na};

pub struct OracleTrace {
    /// `−q^k` per layer.
    pub neg_q: Vec<Vec<f64>>,
    pub inactive: Vec<usize>,
    pub margin: f64,
}

pub fn trace(net: &Network, x: &[f64]) -> OracleTrace {
    let mut cur = DVector::from_column_slice(x);
    let mut neg_q = Vec::new();
    let mut inactive = Vec::new();
    for l in net.layers() {
        let w = to_na(&l.weights);
        let z = &w * &cur + DVector::from_column_slice(&l.bias);
        let nq: Vec<f64> = (0..w.nrows())
            .map(|i| {
                let n = w.row(i).norm();
                if n > 0.0 {
                    -z[i] / n
                } else if z[i] > 0.0 {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        inactive.push(z.iter().filter(|&&v| v <= 0.0).count());
        neg_q.push(nq);
        cur = z.map(|v| v.max(0.0));
    }
    let logits = to_na(net.classifier()) * cur;
    let mut best = 0;
    for j in 1..logits.len() {
        if logits[j] > logits[best] {
            best = j;
        }
    }
    let runner = (0..logits.len())
        .filter(|&j| j != best)
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    OracleTrace {
        neg_q,
        inactive,
        margin: logits[best] - runner,
    }
}

/// Indices of the `s` largest entries, ties to the lowest index.
fn top(v: &[f64], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(s);
    idx
}

fn restricted(w: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let sub = DMatrix::from_fn(rows.len(), cols.len(), |i, j| w[(rows[i], cols[j])]);
    svd_norm(&sub)
}

/// `min{r_cum(s), margin / (2‖A‖ l_cum(s))}`, with `s` given for layers `1..=K`.
pub fn certify_at(net: &Network, t: &OracleTrace, s: &[usize]) -> f64 {
    let depth = net.depth();
    assert_eq!(s.len(), depth);
    if (0..depth).any(|k| s[k] > t.inactive[k]) {
        return 0.0;
    }
    let mut retained_prev: Vec<usize> = (0..net.input_dim()).collect();
    let mut r_cum = f64::INFINITY;
    let mut l_cum = 1.0;
    for k in 0..depth {
        let removed = top(&t.neg_q[k], s[k]);
        let r = if s[k] == 0 {
            f64::INFINITY
        } else {
            t.neg_q[k][removed[s[k] - 1]].max(0.0)
        };
        let term = if l_cum == 0.0 {
            f64::INFINITY
        } else {
            r / l_cum
        };
        r_cum = r_cum.min(term);
        let retained: Vec<usize> = (0..t.neg_q[k].len())
            .filter(|i| !removed.contains(i))
            .collect();
        l_cum *= restricted(&to_na(&net.layer(k + 1).weights), &retained, &retained_prev);
        retained_prev = retained;
    }
    let a = svd_norm(&to_na(net.classifier()));
    let m = if t.margin <= 0.0 {
        0.0
    } else if a * l_cum == 0.0 {
        f64::INFINITY
    } else {
        t.margin / (2.0 * a * l_cum)
    };
    r_cum.min(m)
}

/// Maximum of [`certify_at`] over every `s ∈ ∏_k {0, ..., d^k}`.
pub fn best_certificate(net: &Network, x: &[f64]) -> f64 {
    let t = trace(net, x);
    let widths: Vec<usize> = net.widths()[1..].to_vec();
    let mut s = vec![0usize; widths.len()];
    let mut best = 0.0f64;
    loop {
        best = best.max(certify_at(net, &t, &s));
        let mut k = 0;
        loop {
            if k == s.len() {
                return best;
            }
            if s[k] < widths[k] {
                s[k] += 1;
                break;
            }
            s[k] = 0;
            k += 1;
        }
    }
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Reduced babel function by enumeration of `J1`, the reference row and a
/// per-pair `J2`. `cheap` swaps the restricted norms for `max_i ‖w_i‖²`.
pub fn babel(w: &DMatrix<f64>, s1: usize, s2: usize, cheap: bool) -> f64 {
    let (d1, d2) = (w.nrows(), w.ncols());
    if s1 == d1 - 1 {
        return 0.0;
    }
    let g2 = (0..d1).map(|i| w.row(i).norm_squared()).fold(0.0, f64::max);
    let cols = subsets(d2, d2 - s2);
    let pair = |i: usize, j: usize| -> f64 {
        let mut best = 0.0f64;
        for j2 in &cols {
            let ab: f64 = j2.iter().map(|&c| w[(i, c)] * w[(j, c)]).sum();
            let den = if cheap {
                g2
            } else {
                let aa: f64 = j2.iter().map(|&c| w[(i, c)].powi(2)).sum();
                let bb: f64 = j2.iter().map(|&c| w[(j, c)].powi(2)).sum();
                aa.sqrt() * bb.sqrt()
            };
            if den > 0.0 {
                best = best.max(ab.abs() / den);
            }
        }
        best
    };
    let mut best = 0.0f64;
    for j1 in subsets(d1, d1 - s1) {
        for &j in &j1 {
            let total: f64 = j1.iter().filter(|&&i| i != j).map(|&i| pair(i, j)).sum();
            best = best.max(total);
        }
    }
    best
}
