//! Single-pixel loss-curve sweeps: `x` ranges over a uniform grid of [0, 1]
//! against a fixed label value.

use std::io::Write;

use super::HarnessError;
use crate::autodiff::Tensor;
use crate::losses::{
    cross_entropy, lovasz_softmax, JmlKind, LossVariant, Norm, PairLoss,
};

const VALID_NAMES: &str =
    "sjl-l1, sjl-l2, jml1, jml2, jml1-l2, jml2-l2, tversky, dml, ce, lovasz";

/// A sweepable loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveLoss {
    Variant(LossVariant),
    BinaryCrossEntropy,
    Lovasz,
}

impl CurveLoss {
    pub fn name(&self) -> String {
        match self {
            CurveLoss::Variant(v) => v.name(),
            CurveLoss::BinaryCrossEntropy => "ce".to_string(),
            CurveLoss::Lovasz => "lovasz".to_string(),
        }
    }
}

fn parse_one(name: &str) -> Result<CurveLoss, HarnessError> {
    let variant = match name {
        "sjl-l1" => LossVariant::Sjl { norm: Norm::L1 },
        "sjl-l2" => LossVariant::Sjl { norm: Norm::SquaredL2 },
        "jml1" => LossVariant::jml1(),
        "jml2" => LossVariant::jml2(),
        "jml1-l2" => LossVariant::Jml { kind: JmlKind::Jml1, norm: Norm::SquaredL2 },
        "jml2-l2" => LossVariant::Jml { kind: JmlKind::Jml2, norm: Norm::SquaredL2 },
        "tversky" => LossVariant::Tversky { alpha: 1.0, beta: 1.0 },
        "dml" => LossVariant::Tversky { alpha: 0.5, beta: 0.5 },
        "ce" => return Ok(CurveLoss::BinaryCrossEntropy),
        "lovasz" => return Ok(CurveLoss::Lovasz),
        other => {
            return Err(HarnessError::UnknownLoss {
                name: other.to_string(),
                valid: VALID_NAMES.to_string(),
            })
        }
    };
    Ok(CurveLoss::Variant(variant))
}

/// Parses a comma-separated list of loss names (`jml1,jml2` sweeps both).
pub fn parse_curve_losses(spec: &str) -> Result<Vec<CurveLoss>, HarnessError> {
    let losses: Result<Vec<_>, _> =
        spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_one).collect();
    let losses = losses?;
    if losses.is_empty() {
        return Err(HarnessError::UnknownLoss {
            name: spec.to_string(),
            valid: VALID_NAMES.to_string(),
        });
    }
    Ok(losses)
}

/// A computed sweep: one row per grid point, one value column per loss.
#[derive(Debug, Clone)]
pub struct CurveTable {
    pub y: f64,
    pub names: Vec<String>,
    pub rows: Vec<(f64, Vec<f64>)>,
}

impl CurveTable {
    /// Value column of one loss.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|(_, vs)| vs[idx]).collect())
    }

    /// Largest |d loss / d x| between consecutive grid points whose left
    /// endpoint lies in `[lo, hi]`.
    pub fn max_abs_slope(&self, name: &str, lo: f64, hi: f64) -> Option<f64> {
        let idx = self.names.iter().position(|n| n == name)?;
        let mut best: f64 = 0.0;
        for pair in self.rows.windows(2) {
            let (x0, ref v0) = pair[0];
            let (x1, ref v1) = pair[1];
            if x0 >= lo && x0 <= hi {
                best = best.max(((v1[idx] - v0[idx]) / (x1 - x0)).abs());
            }
        }
        Some(best)
    }
}

/// Sweeps `loss(x, y)` for a single pixel over an `n`-point uniform grid.
///
/// Cross-entropy is evaluated as the binary two-class distribution
/// `[x, 1-x]` against `[y, 1-y]`; the Lovász sweep requires a binary `y`.
pub fn loss_curve(losses: &[CurveLoss], y: f64, n: usize) -> Result<CurveTable, HarnessError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(HarnessError::Config { detail: format!("label value {y} outside [0, 1]") });
    }
    if n < 2 {
        return Err(HarnessError::Config { detail: format!("grid size {n} must be at least 2") });
    }
    let mut evaluators: Vec<(String, PairLossOrSpecial)> = Vec::new();
    for loss in losses {
        let eval = match loss {
            CurveLoss::Variant(v) => PairLossOrSpecial::Pair(PairLoss::new(*v)?),
            CurveLoss::BinaryCrossEntropy => PairLossOrSpecial::BinaryCe,
            CurveLoss::Lovasz => {
                if y != 0.0 && y != 1.0 {
                    return Err(HarnessError::Loss(
                        crate::losses::LossError::SoftLabelsUnsupported,
                    ));
                }
                PairLossOrSpecial::Lovasz
            }
        };
        evaluators.push((loss.name(), eval));
    }

    let y_vec = Tensor::vector(&[y]).expect("finite");
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        let x_vec = Tensor::vector(&[x]).expect("finite");
        let mut values = Vec::with_capacity(evaluators.len());
        for (_, eval) in &evaluators {
            let v = match eval {
                PairLossOrSpecial::Pair(loss) => loss.eval(&x_vec, &y_vec)?,
                PairLossOrSpecial::BinaryCe => {
                    let xx = Tensor::new(vec![2, 1], vec![x, 1.0 - x]).expect("finite");
                    let yy = Tensor::new(vec![2, 1], vec![y, 1.0 - y]).expect("finite");
                    cross_entropy(&xx, &yy)?
                }
                PairLossOrSpecial::Lovasz => lovasz_softmax(&x_vec, &y_vec)?,
            };
            values.push(v);
        }
        rows.push((x, values));
    }
    Ok(CurveTable { y, names: evaluators.into_iter().map(|(n, _)| n).collect(), rows })
}

enum PairLossOrSpecial {
    Pair(PairLoss),
    BinaryCe,
    Lovasz,
}

/// CSV with an `x` column followed by one column per loss.
pub fn write_curve_csv<W: Write>(out: &mut W, table: &CurveTable) -> Result<(), HarnessError> {
    write!(out, "x")?;
    for name in &table.names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for (x, values) in &table.rows {
        write!(out, "{x}")?;
        for v in values {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
