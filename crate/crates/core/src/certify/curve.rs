use rayon::prelude::*;

use super::{InputCertificate, InputCertifier};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub nu: f64,
    pub certified_acc_sparse: f64,
    pub certified_acc_global: f64,
    pub clean_acc: f64,
}

/// Certified accuracy as a function of the perturbation budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SecurityCurve {
    pub points: Vec<CurvePoint>,
}

impl SecurityCurve {
    /// Builds the curve from `(correct, r_sparse, r_global)` per sample.
    pub fn from_records(records: &[(bool, f64, f64)], grid: &[f64]) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("security curve over an empty dataset"));
        }
        if grid.iter().any(|nu| !(*nu >= 0.0) || !nu.is_finite()) {
            return Err(invalid("curve grid values must be finite and non-negative"));
        }
        let n = records.len() as f64;
        let clean = records.iter().filter(|r| r.0).count() as f64 / n;
        let points = grid
            .iter()
            .map(|&nu| {
                let count = |pick: fn(&(bool, f64, f64)) -> f64| {
                    records.iter().filter(|r| r.0 && pick(r) >= nu).count() as f64 / n
                };
                CurvePoint {
                    nu,
                    certified_acc_sparse: count(|r| r.1),
                    certified_acc_global: count(|r| r.2),
                    clean_acc: clean,
                }
            })
            .collect();
        Ok(Self { points })
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "nu,certified_acc_sparse,certified_acc_global,clean_acc")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{}",
                p.nu, p.certified_acc_sparse, p.certified_acc_global, p.clean_acc
            )?;
        }
        Ok(())
    }
}

/// Curve from precomputed certificates aligned with `labels`.
pub fn security_curve_from(
    labels: &[usize],
    certs: &[InputCertificate],
    grid: &[f64],
) -> Result<SecurityCurve> {
    if labels.len() != certs.len() {
        return Err(invalid("one certificate per label is required"));
    }
    let records: Vec<(bool, f64, f64)> = labels
        .iter()
        .zip(certs)
        .map(|(&y, c)| (c.predicted == y, c.r_sparse, c.r_global))
        .collect();
    SecurityCurve::from_records(&records, grid)
}

/// Certifies every sample of `data` and tabulates certified accuracy on `grid`.
pub fn security_curve(
    net: &Network,
    data: &Dataset,
    grid: &[f64],
    tol: f64,
) -> Result<SecurityCurve> {
    let ctx = InputCertifier::with_tol(net, tol)?;
    let certs: Vec<InputCertificate> = data
        .inputs()
        .par_iter()
        .map(|x| ctx.certify(x))
        .collect::<Result<_>>()?;
    security_curve_from(data.labels(), &certs, grid)
}
