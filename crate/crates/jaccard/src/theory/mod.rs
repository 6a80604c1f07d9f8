//! Mechanical verification of the loss-family theory: metric axioms,
//! hard-label equivalence, the JML1 <= JML2 ordering, the distillation
//! triangle bound, gradient-sign analysis of the soft Jaccard loss, convex
//! closures, and the 2-D non-concavity counterexample.
//!
//! Every verdict is reproducible from (seed, tolerance) alone; reports carry
//! the worst violating sample so a failure can be replayed by re-evaluating
//! the stored point.

mod closure;
mod simplex;
mod suite;

pub use closure::{convex_closure, vertex_coordinate, MAX_CLOSURE_DIM};
pub use simplex::{solve_min, SimplexError, SimplexSolution};
pub use suite::{run_suite, CheckResult, SuiteConfig, SuiteReport};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::losses::{JmlKind, LossError, LossVariant, Norm, PairLoss};

#[derive(Debug, Clone, PartialEq)]
pub enum TheoryError {
    UnsupportedDimension { p: usize, max: usize },
    PointOutsideCube { index: usize, value: f64 },
    ValueTableSize { expected: usize, actual: usize },
    Simplex(SimplexError),
    Loss(LossError),
}

impl fmt::Display for TheoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TheoryError::UnsupportedDimension { p, max } => {
                write!(f, "dimension {p} unsupported (max {max})")
            }
            TheoryError::PointOutsideCube { index, value } => {
                write!(f, "coordinate {index} = {value} lies outside [0, 1]")
            }
            TheoryError::ValueTableSize { expected, actual } => {
                write!(f, "expected {expected} vertex values, got {actual}")
            }
            TheoryError::Simplex(e) => write!(f, "{e}"),
            TheoryError::Loss(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TheoryError {}

impl From<LossError> for TheoryError {
    fn from(e: LossError) -> Self {
        TheoryError::Loss(e)
    }
}

/// Configuration of one metric-axiom check.
#[derive(Debug, Clone, Serialize)]
pub struct AxiomCheckConfig {
    pub dim: usize,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

/// A violating sample: the points and how far past the tolerance they land.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub magnitude: f64,
    pub a: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<f64>>,
}

/// Outcome of one axiom.
#[derive(Debug, Clone, Serialize)]
pub struct AxiomResult {
    pub axiom: &'static str,
    pub pass: bool,
    pub violations: u64,
    pub worst: Option<Violation>,
}

/// Named evaluation at one of the fixed probe points.
#[derive(Debug, Clone, Serialize)]
pub struct WitnessEval {
    pub name: &'static str,
    pub value: f64,
}

/// Full axiom report for one loss at one dimension.
#[derive(Debug, Clone, Serialize)]
pub struct AxiomReport {
    pub loss: String,
    pub dim: usize,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub axioms: Vec<AxiomResult>,
    pub witness: Vec<WitnessEval>,
    pub pass: bool,
}

impl AxiomReport {
    pub fn axiom(&self, name: &str) -> Option<&AxiomResult> {
        self.axioms.iter().find(|a| a.axiom == name)
    }
}

struct Tally {
    axiom: &'static str,
    violations: u64,
    worst: Option<Violation>,
}

impl Tally {
    fn new(axiom: &'static str) -> Self {
        Tally { axiom, violations: 0, worst: None }
    }

    fn record(&mut self, magnitude: f64, a: &[f64], b: Option<&[f64]>, c: Option<&[f64]>) {
        if magnitude <= 0.0 {
            return;
        }
        self.violations += 1;
        if self.worst.as_ref().map_or(true, |w| magnitude > w.magnitude) {
            self.worst = Some(Violation {
                magnitude,
                a: a.to_vec(),
                b: b.map(<[f64]>::to_vec),
                c: c.map(<[f64]>::to_vec),
            });
        }
    }

    fn result(self) -> AxiomResult {
        AxiomResult {
            axiom: self.axiom,
            pass: self.violations == 0,
            violations: self.violations,
            worst: self.worst,
        }
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| rng.gen()).collect()
}

fn near_vertex_point(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p)
        .map(|_| {
            let corner = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            let jitter = rng.gen::<f64>() * 0.02;
            if corner == 1.0 {
                1.0 - jitter
            } else {
                jitter
            }
        })
        .collect()
}

fn near_point(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    base.iter()
        .map(|&v| (v + (rng.gen::<f64>() - 0.5) * 0.02).clamp(0.0, 1.0))
        .collect()
}

/// Distinct enough for a positivity claim: separated beyond jitter scale.
fn clearly_distinct(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6)
}

/// Samples triples and checks reflexivity, positivity, symmetry and the
/// triangle inequality at the given tolerance.
///
/// Sampling mixes uniform triples with near-vertex and near-diagonal ones,
/// where violations of the broken variants concentrate, and always includes
/// a fixed probe battery (the all-0.5 point, the (0.8, 0.4, 0.2) triple and
/// the cube corners); probe values are echoed in `witness`.
pub fn check_metric_axioms(
    variant: &LossVariant,
    cfg: &AxiomCheckConfig,
) -> Result<AxiomReport, TheoryError> {
    let loss = PairLoss::new(*variant)?;
    let p = cfg.dim;
    let eval = |x: &[f64], y: &[f64]| -> Result<f64, TheoryError> {
        Ok(loss.eval(&Tensor::vector(x).expect("finite"), &Tensor::vector(y).expect("finite"))?)
    };

    let mut reflexivity = Tally::new("reflexivity");
    let mut positivity = Tally::new("positivity");
    let mut symmetry = Tally::new("symmetry");
    let mut triangle = Tally::new("triangle");

    let check_triple = |a: &[f64],
                            b: &[f64],
                            c: &[f64],
                            reflexivity: &mut Tally,
                            positivity: &mut Tally,
                            symmetry: &mut Tally,
                            triangle: &mut Tally|
     -> Result<(), TheoryError> {
        let f_aa = eval(a, a)?;
        reflexivity.record(f_aa.abs() - cfg.tolerance, a, None, None);
        let f_ab = eval(a, b)?;
        if clearly_distinct(a, b) {
            positivity.record(cfg.tolerance - f_ab, a, Some(b), None);
        }
        let f_ba = eval(b, a)?;
        symmetry.record((f_ab - f_ba).abs() - cfg.tolerance, a, Some(b), None);
        let f_bc = eval(b, c)?;
        let f_ac = eval(a, c)?;
        triangle.record(f_ac - f_ab - f_bc - cfg.tolerance, a, Some(b), Some(c));
        Ok(())
    };

    // Fixed probes first.
    let battery: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = vec![
        (vec![0.5; p], vec![0.5; p], vec![0.5; p]),
        (vec![0.8; p], vec![0.4; p], vec![0.2; p]),
        (vec![0.0; p], vec![0.0; p], vec![0.0; p]),
        (vec![1.0; p], vec![1.0; p], vec![0.0; p]),
        (vec![0.8; p], vec![0.5; p], vec![0.1; p]),
    ];
    for (a, b, c) in &battery {
        check_triple(a, b, c, &mut reflexivity, &mut positivity, &mut symmetry, &mut triangle)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.samples {
        let (a, b, c) = match i % 5 {
            3 => {
                let a = near_vertex_point(&mut rng, p);
                let b = uniform_point(&mut rng, p);
                let c = near_vertex_point(&mut rng, p);
                (a, b, c)
            }
            4 => {
                let a = uniform_point(&mut rng, p);
                let b = near_point(&mut rng, &a);
                let c = uniform_point(&mut rng, p);
                (a, b, c)
            }
            _ => (
                uniform_point(&mut rng, p),
                uniform_point(&mut rng, p),
                uniform_point(&mut rng, p),
            ),
        };
        check_triple(
            &a,
            &b,
            &c,
            &mut reflexivity,
            &mut positivity,
            &mut symmetry,
            &mut triangle,
        )?;
    }

    let half = vec![0.5; p];
    let witness = vec![
        WitnessEval { name: "loss-at-(0.5,0.5)", value: eval(&half, &half)? },
        WitnessEval {
            name: "triangle-gap-at-(0.8,0.4,0.2)",
            value: {
                let (a, b, c) = (vec![0.8; p], vec![0.4; p], vec![0.2; p]);
                eval(&a, &c)? - eval(&a, &b)? - eval(&b, &c)?
            },
        },
    ];

    let axioms =
        vec![reflexivity.result(), positivity.result(), symmetry.result(), triangle.result()];
    let pass = axioms.iter().all(|a| a.pass);
    Ok(AxiomReport {
        loss: variant.name(),
        dim: p,
        samples: cfg.samples,
        seed: cfg.seed,
        tolerance: cfg.tolerance,
        axioms,
        witness,
        pass,
    })
}

/// Report of the hard-label equivalence checks.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub max_dim: usize,
    pub samples: usize,
    pub seed: u64,
    /// Max deviation among JML1/JML2/SJL-L1 on hard-label pairs, both
    /// orientations.
    pub max_dev_hard_l1: f64,
    /// Max deviation among the squared-L2 variants on fully soft pairs.
    pub max_dev_soft_l2: f64,
    /// The three L1 losses at the soft witness x = 0.8, y = 0.5.
    pub witness_jml1: f64,
    pub witness_jml2: f64,
    pub witness_sjl_l1: f64,
    /// Smallest pairwise gap between the witness values.
    pub witness_min_gap: f64,
    pub pass: bool,
}

/// Checks that JML1 = JML2 = SJL-L1 whenever either argument is binary,
/// that the squared-L2 variants collapse to SJL-L2 everywhere, and that the
/// soft witness x = 0.8, y = 0.5 separates all three L1 losses.
pub fn verify_hard_label_equivalence(
    max_dim: usize,
    samples: usize,
    seed: u64,
) -> Result<EquivalenceReport, TheoryError> {
    let jml1 = PairLoss::new(LossVariant::jml1())?;
    let jml2 = PairLoss::new(LossVariant::jml2())?;
    let sjl1 = PairLoss::new(LossVariant::Sjl { norm: Norm::L1 })?;
    let jml1_l2 = PairLoss::new(LossVariant::Jml { kind: JmlKind::Jml1, norm: Norm::SquaredL2 })?;
    let jml2_l2 = PairLoss::new(LossVariant::Jml { kind: JmlKind::Jml2, norm: Norm::SquaredL2 })?;
    let sjl_l2 = PairLoss::new(LossVariant::Sjl { norm: Norm::SquaredL2 })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev_hard = 0.0f64;
    let mut max_dev_l2 = 0.0f64;
    for i in 0..samples {
        let p = 1 + i % max_dim;
        let soft: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
        let hard: Vec<f64> = (0..p).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let soft_t = Tensor::vector(&soft).expect("finite");
        let hard_t = Tensor::vector(&hard).expect("finite");
        for (x, y) in [(&soft_t, &hard_t), (&hard_t, &soft_t)] {
            let v1 = jml1.eval(x, y)?;
            let v2 = jml2.eval(x, y)?;
            let vs = sjl1.eval(x, y)?;
            max_dev_hard = max_dev_hard.max((v1 - v2).abs()).max((v1 - vs).abs());
        }
        let other: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
        let other_t = Tensor::vector(&other).expect("finite");
        let w1 = jml1_l2.eval(&soft_t, &other_t)?;
        let w2 = jml2_l2.eval(&soft_t, &other_t)?;
        let ws = sjl_l2.eval(&soft_t, &other_t)?;
        max_dev_l2 = max_dev_l2.max((w1 - w2).abs()).max((w1 - ws).abs());
    }

    let x = Tensor::vector(&[0.8]).expect("finite");
    let y = Tensor::vector(&[0.5]).expect("finite");
    let witness_jml1 = jml1.eval(&x, &y)?;
    let witness_jml2 = jml2.eval(&x, &y)?;
    let witness_sjl_l1 = sjl1.eval(&x, &y)?;
    let witness_min_gap = (witness_jml1 - witness_jml2)
        .abs()
        .min((witness_jml1 - witness_sjl_l1).abs())
        .min((witness_jml2 - witness_sjl_l1).abs());

    let pass = max_dev_hard <= 1e-12 && max_dev_l2 <= 1e-12 && witness_min_gap > 0.04;
    Ok(EquivalenceReport {
        max_dim,
        samples,
        seed,
        max_dev_hard_l1: max_dev_hard,
        max_dev_soft_l2: max_dev_l2,
        witness_jml1,
        witness_jml2,
        witness_sjl_l1,
        witness_min_gap,
        pass,
    })
}

/// Report of the JML1 <= JML2 ordering check.
#[derive(Debug, Clone, Serialize)]
pub struct OrderingReport {
    pub max_dim: usize,
    pub samples: usize,
    pub seed: u64,
    /// Largest observed JML1 - JML2 (should never exceed the tolerance).
    pub max_excess: f64,
    pub pass: bool,
}

pub fn verify_ordering(
    max_dim: usize,
    samples: usize,
    seed: u64,
) -> Result<OrderingReport, TheoryError> {
    let jml1 = PairLoss::new(LossVariant::jml1())?;
    let jml2 = PairLoss::new(LossVariant::jml2())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..samples {
        let p = 1 + i % max_dim;
        let x = Tensor::vector(&uniform_point(&mut rng, p)).expect("finite");
        let y = Tensor::vector(&uniform_point(&mut rng, p)).expect("finite");
        let excess = jml1.eval(&x, &y)? - jml2.eval(&x, &y)?;
        max_excess = max_excess.max(excess);
    }
    Ok(OrderingReport { max_dim, samples, seed, max_excess, pass: max_excess <= 1e-12 })
}

/// Report of the distillation triangle bound `JML1(S,L) <= JML1(S,T) + JML1(T,L)`.
#[derive(Debug, Clone, Serialize)]
pub struct TriangleBoundReport {
    pub max_dim: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_excess: f64,
    pub pass: bool,
}

pub fn verify_triangle_bound(
    max_dim: usize,
    samples: usize,
    seed: u64,
) -> Result<TriangleBoundReport, TheoryError> {
    let jml1 = PairLoss::new(LossVariant::jml1())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..samples {
        let p = 1 + i % max_dim;
        let s = Tensor::vector(&uniform_point(&mut rng, p)).expect("finite");
        let t = Tensor::vector(&uniform_point(&mut rng, p)).expect("finite");
        let l = Tensor::vector(&uniform_point(&mut rng, p)).expect("finite");
        let excess = jml1.eval(&s, &l)? - jml1.eval(&s, &t)? - jml1.eval(&t, &l)?;
        max_excess = max_excess.max(excess);
    }
    Ok(TriangleBoundReport { max_dim, samples, seed, max_excess, pass: max_excess <= 1e-12 })
}

/// Predicted gradient sign of SJL-L1 at one pixel.
///
/// With `a` and `b` the off-pixel denominator and numerator masses, the
/// derivative with respect to `x_i` is non-positive iff `y_i >= r2` where
/// `r2 = (-(a+b) + sqrt((a+b)^2 + 4b)) / 2`; otherwise the loss pushes the
/// prediction up regardless of the label.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SignPrediction {
    pub r2: f64,
    pub non_positive: bool,
}

pub fn sjl_gradient_sign(a: f64, b: f64, y_i: f64) -> SignPrediction {
    let s = a + b;
    let r2 = (-s + (s * s + 4.0 * b).sqrt()) / 2.0;
    SignPrediction { r2, non_positive: y_i >= r2 }
}

/// Agreement between [`sjl_gradient_sign`] and the finite-difference sign of
/// a concretely constructed SJL-L1.
#[derive(Debug, Clone, Serialize)]
pub struct SignAgreementReport {
    pub samples: usize,
    pub tested: u64,
    pub skipped_near_root: u64,
    pub disagreements: u64,
    pub pass: bool,
}

/// For random off-pixel tails (which induce `a` and `b`), compares the
/// predicted sign against the central-difference sign of the full loss.
/// Samples with `|y_i - r2| < 1e-3` are skipped: the derivative vanishes at
/// the root and the sign is not defined there.
pub fn check_sjl_gradient_sign(samples: usize, seed: u64) -> Result<SignAgreementReport, TheoryError> {
    let sjl = PairLoss::new(LossVariant::Sjl { norm: Norm::L1 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tested = 0u64;
    let mut skipped = 0u64;
    let mut disagreements = 0u64;
    for _ in 0..samples {
        let tail = 1 + rng.gen_range(0..6usize);
        let tail_x: Vec<f64> = (0..tail).map(|_| rng.gen()).collect();
        let tail_y: Vec<f64> = (0..tail).map(|_| rng.gen()).collect();
        let a: f64 = tail_x.iter().zip(&tail_y).map(|(&x, &y)| x + y - x * y).sum();
        let b: f64 = tail_x.iter().zip(&tail_y).map(|(&x, &y)| x * y).sum();
        let y_i: f64 = rng.gen();
        let prediction = sjl_gradient_sign(a, b, y_i);
        if (y_i - prediction.r2).abs() < 1e-3 {
            skipped += 1;
            continue;
        }
        let x_i: f64 = rng.gen_range(0.05..0.95);
        let step = 1e-5;
        let mut xs = vec![x_i];
        xs.extend_from_slice(&tail_x);
        let mut ys = vec![y_i];
        ys.extend_from_slice(&tail_y);
        let mut plus = xs.clone();
        plus[0] += step;
        let mut minus = xs.clone();
        minus[0] -= step;
        let y_t = Tensor::vector(&ys).expect("finite");
        let f_plus = sjl.eval(&Tensor::vector(&plus).expect("finite"), &y_t)?;
        let f_minus = sjl.eval(&Tensor::vector(&minus).expect("finite"), &y_t)?;
        let derivative = (f_plus - f_minus) / (2.0 * step);
        tested += 1;
        if (derivative <= 0.0) != prediction.non_positive {
            disagreements += 1;
        }
    }
    Ok(SignAgreementReport {
        samples,
        tested,
        skipped_near_root: skipped,
        disagreements,
        pass: disagreements == 0 && tested > 0,
    })
}

/// One Jensen probe: the chord average versus the loss at the midpoint.
#[derive(Debug, Clone, Serialize)]
pub struct JensenCheck {
    pub loss: String,
    pub chord_average: f64,
    pub at_midpoint: f64,
    /// `chord_average - at_midpoint`; strictly positive means concavity
    /// fails at this triple.
    pub gap: f64,
    pub strict_violation: bool,
}

/// The fixed 2-D counterexample showing neither JML1 nor JML2 is piece-wise
/// concave: y = [0.5, 0.5], x = [0.4087, 0.7855], x' = [0.6285, 0.7551].
#[derive(Debug, Clone, Serialize)]
pub struct NonConcavityReport {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub jml1: JensenCheck,
    pub jml2: JensenCheck,
    pub pass: bool,
}

pub fn verify_nonconcavity_counterexample() -> Result<NonConcavityReport, TheoryError> {
    let y = vec![0.5, 0.5];
    let x = vec![0.4087, 0.7855];
    let x_prime = vec![0.6285, 0.7551];
    let midpoint: Vec<f64> = x.iter().zip(&x_prime).map(|(a, b)| 0.5 * (a + b)).collect();

    let probe = |variant: LossVariant| -> Result<JensenCheck, TheoryError> {
        let loss = PairLoss::new(variant)?;
        let y_t = Tensor::vector(&y).expect("finite");
        let f_x = loss.eval(&Tensor::vector(&x).expect("finite"), &y_t)?;
        let f_xp = loss.eval(&Tensor::vector(&x_prime).expect("finite"), &y_t)?;
        let f_mid = loss.eval(&Tensor::vector(&midpoint).expect("finite"), &y_t)?;
        let chord_average = 0.5 * f_x + 0.5 * f_xp;
        Ok(JensenCheck {
            loss: variant.name(),
            chord_average,
            at_midpoint: f_mid,
            gap: chord_average - f_mid,
            strict_violation: chord_average > f_mid,
        })
    };

    let jml1 = probe(LossVariant::jml1())?;
    let jml2 = probe(LossVariant::jml2())?;
    let pass = jml1.strict_violation && jml2.strict_violation;
    Ok(NonConcavityReport { y, x, x_prime, jml1, jml2, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axiom_cfg(dim: usize, samples: usize) -> AxiomCheckConfig {
        AxiomCheckConfig { dim, samples, seed: 99, tolerance: 1e-9 }
    }

    #[test]
    fn jml_variants_satisfy_all_axioms() {
        for variant in [LossVariant::jml1(), LossVariant::jml2()] {
            for dim in [1usize, 3] {
                let report = check_metric_axioms(&variant, &axiom_cfg(dim, 3_000)).unwrap();
                assert!(report.pass, "{}: {:?}", variant.name(), report.axioms);
            }
        }
    }

    #[test]
    fn sjl_l1_fails_reflexivity_with_recorded_witness() {
        let variant = LossVariant::Sjl { norm: Norm::L1 };
        let report = check_metric_axioms(&variant, &axiom_cfg(1, 2_000)).unwrap();
        let reflexivity = report.axiom("reflexivity").unwrap();
        assert!(!reflexivity.pass);
        assert!(reflexivity.worst.is_some());
        // The probe battery pins the documented value at a = 0.5.
        let witness = &report.witness[0];
        assert_eq!(witness.name, "loss-at-(0.5,0.5)");
        assert_abs_diff_eq!(witness.value, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sjl_l2_fails_triangle_at_documented_triple() {
        let variant = LossVariant::Sjl { norm: Norm::SquaredL2 };
        let report = check_metric_axioms(&variant, &axiom_cfg(1, 2_000)).unwrap();
        let triangle = report.axiom("triangle").unwrap();
        assert!(!triangle.pass);
        let gap = report.witness[1].value;
        // Direct evaluation gives 9/13 - 1/3 - 1/3 = 1/39.
        assert_abs_diff_eq!(gap, 1.0 / 39.0, epsilon = 1e-12);
        assert!(gap > 0.02);
    }

    #[test]
    fn violations_are_reproducible_from_stored_samples() {
        let variant = LossVariant::Sjl { norm: Norm::L1 };
        let report = check_metric_axioms(&variant, &axiom_cfg(2, 500)).unwrap();
        let worst = report.axiom("reflexivity").unwrap().worst.as_ref().unwrap();
        let loss = PairLoss::new(variant).unwrap();
        let a = Tensor::vector(&worst.a).unwrap();
        let again = loss.eval(&a, &a).unwrap();
        assert_abs_diff_eq!(again.abs() - 1e-9, worst.magnitude, epsilon = 1e-12);
    }

    #[test]
    fn axiom_reports_are_deterministic_per_seed() {
        let variant = LossVariant::jml1();
        let a = check_metric_axioms(&variant, &axiom_cfg(2, 500)).unwrap();
        let b = check_metric_axioms(&variant, &axiom_cfg(2, 500)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn equivalence_holds_and_witness_separates() {
        let report = verify_hard_label_equivalence(6, 2_000, 7).unwrap();
        assert!(report.pass, "{report:?}");
        assert_abs_diff_eq!(report.witness_jml1, 0.375, epsilon = 1e-12);
        assert_abs_diff_eq!(report.witness_jml2, 3.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.witness_sjl_l1, 5.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_binary_masks_have_zero_loss_everywhere() {
        let jml1 = PairLoss::new(LossVariant::jml1()).unwrap();
        let jml2 = PairLoss::new(LossVariant::jml2()).unwrap();
        let sjl = PairLoss::new(LossVariant::Sjl { norm: Norm::L1 }).unwrap();
        for bits in 0..16u32 {
            let v: Vec<f64> = (0..4).map(|i| ((bits >> i) & 1) as f64).collect();
            let t = Tensor::vector(&v).unwrap();
            assert_eq!(jml1.eval(&t, &t).unwrap(), 0.0);
            assert_eq!(jml2.eval(&t, &t).unwrap(), 0.0);
            let _ = sjl; // SJL-L1 is *not* zero on soft pairs; binary is.
            assert_eq!(sjl.eval(&t, &t).unwrap(), 0.0);
        }
    }

    #[test]
    fn ordering_holds_on_samples() {
        let report = verify_ordering(6, 20_000, 13).unwrap();
        assert!(report.pass, "max excess {}", report.max_excess);
    }

    #[test]
    fn triangle_bound_holds_on_samples() {
        let report = verify_triangle_bound(6, 5_000, 13).unwrap();
        assert!(report.pass, "max excess {}", report.max_excess);
    }

    #[test]
    fn sign_formula_closed_forms() {
        // a = b = 0 -> r2 = 0: derivative non-positive for all y > 0.
        let p = sjl_gradient_sign(0.0, 0.0, 0.5);
        assert_eq!(p.r2, 0.0);
        assert!(p.non_positive);
        // a = 1, b = 0 -> r2 = 0.
        assert_eq!(sjl_gradient_sign(1.0, 0.0, 0.3).r2, 0.0);
        // r2 <= 1 always, so y_i = 1 predicts non-positive for any tail.
        for (a, b) in [(0.0, 0.0), (2.0, 1.0), (0.3, 4.0), (5.0, 0.2)] {
            let pred = sjl_gradient_sign(a, b, 1.0);
            assert!(pred.r2 <= 1.0 + 1e-12);
            assert!(pred.non_positive);
        }
    }

    #[test]
    fn sign_prediction_matches_finite_differences() {
        let report = check_sjl_gradient_sign(1_000, 3).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn nonconcavity_counterexample_holds() {
        let report = verify_nonconcavity_counterexample().unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.jml1.gap > 0.0);
        assert!(report.jml2.gap > 0.0);
    }

    #[test]
    fn concave_probe_shows_no_jensen_violation() {
        // Control: a concave quadratic through the same midpoint test never
        // violates Jensen.
        let f = |x: &[f64]| -> f64 { 1.0 - x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() };
        let x = [0.4087, 0.7855];
        let xp = [0.6285, 0.7551];
        let mid = [0.5 * (x[0] + xp[0]), 0.5 * (x[1] + xp[1])];
        assert!(0.5 * f(&x) + 0.5 * f(&xp) <= f(&mid) + 1e-12);
    }
}
