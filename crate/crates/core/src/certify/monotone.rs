use super::SensitivityModel;
use crate::error::Result;

const SLACK: f64 = 1e-9;

/// Violations of the monotone ordering of a sensitivity model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonotoneReport {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `b` exceeds `a` beyond round-off.
fn worse(a: f64, b: f64) -> bool {
    b > a + SLACK * a.abs().max(1.0)
}

/// Checks that radii are non-increasing in `s_out` and non-decreasing in
/// `s_in`, and that scales are non-increasing in both, over every
/// admissible pair of consecutive levels.
pub fn monotone_check(model: &impl SensitivityModel) -> Result<MonotoneReport> {
    let mut report = MonotoneReport::default();
    for k in 1..=model.depth() {
        let max_in = model.max_level(k - 1);
        let max_out = model.max_level(k);
        let mut radius = vec![vec![0.0; max_out + 1]; max_in + 1];
        let mut scale = vec![vec![0.0; max_out + 1]; max_in + 1];
        for a in 0..=max_in {
            for b in 0..=max_out {
                radius[a][b] = model.radius(k, a, b)?;
                scale[a][b] = model.scale(k, a, b)?;
                report.checked += 1;
            }
        }
        for a in 0..=max_in {
            for b in 0..=max_out {
                if b > 0 && worse(radius[a][b - 1], radius[a][b]) {
                    report
                        .violations
                        .push(format!("layer {k}: radius grows with s_out at ({a}, {b})"));
                }
                if a > 0 && worse(radius[a][b], radius[a - 1][b]) {
                    report
                        .violations
                        .push(format!("layer {k}: radius shrinks with s_in at ({a}, {b})"));
                }
                if b > 0 && worse(scale[a][b - 1], scale[a][b]) {
                    report
                        .violations
                        .push(format!("layer {k}: scale grows with s_out at ({a}, {b})"));
                }
                if a > 0 && worse(scale[a - 1][b], scale[a][b]) {
                    report
                        .violations
                        .push(format!("layer {k}: scale grows with s_in at ({a}, {b})"));
                }
            }
        }
    }
    Ok(report)
}
