//! The full verification battery behind the `verify` CLI subcommand.
//!
//! Each check has a name, a PASS/FAIL verdict, a magnitude (how far the
//! worst case sits from the threshold) and, where useful, the worst case
//! itself. A check verifying a documented *failure* (the SJL
//! counterexamples) passes when the failure is reproduced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{
    check_metric_axioms, check_sjl_gradient_sign, convex_closure, verify_hard_label_equivalence,
    verify_nonconcavity_counterexample, verify_ordering, verify_triangle_bound, AxiomCheckConfig,
    TheoryError,
};
use crate::autodiff::{Bindings, ExprGraph, Tensor};
use crate::losses::{
    build_cross_entropy, build_lovasz_softmax, iou_loss_hard, JmlKind, LossVariant, Norm, PairLoss,
};

/// Sample sizes and tolerances of the battery. The defaults match the
/// acceptance thresholds of the test suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub max_dim: usize,
    pub axiom_samples: usize,
    pub axiom_tolerance: f64,
    pub equivalence_samples: usize,
    pub ordering_samples: usize,
    pub triangle_samples: usize,
    pub sign_samples: usize,
    pub fd_points: usize,
    pub closure_pairs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 7,
            max_dim: 8,
            axiom_samples: 100_000,
            axiom_tolerance: 1e-9,
            equivalence_samples: 10_000,
            ordering_samples: 100_000,
            triangle_samples: 10_000,
            sign_samples: 1_000,
            fd_points: 100,
            closure_pairs: 1_000,
        }
    }
}

/// One named verification outcome.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub verdict: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_case: Option<serde_json::Value>,
}

impl CheckResult {
    fn new(name: &str, pass: bool) -> Self {
        CheckResult {
            name: name.to_string(),
            verdict: if pass { "PASS" } else { "FAIL" },
            magnitude: None,
            worst_case: None,
        }
    }

    fn with_magnitude(mut self, magnitude: f64) -> Self {
        self.magnitude = Some(magnitude);
        self
    }

    fn with_worst(mut self, worst: serde_json::Value) -> Self {
        self.worst_case = Some(worst);
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == "PASS"
    }
}

/// Battery report; serializes to the machine-readable `verify` output.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

/// Runs the whole battery. Deterministic per config.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport, TheoryError> {
    let mut checks = Vec::new();

    // 1-2. Metric axioms for both JML variants across dimensions.
    for variant in [LossVariant::jml1(), LossVariant::jml2()] {
        let mut pass = true;
        let mut worst_magnitude = 0.0f64;
        let mut worst: Option<serde_json::Value> = None;
        for dim in 1..=cfg.max_dim {
            let report = check_metric_axioms(
                &variant,
                &AxiomCheckConfig {
                    dim,
                    samples: cfg.axiom_samples,
                    seed: cfg.seed ^ dim as u64,
                    tolerance: cfg.axiom_tolerance,
                },
            )?;
            if !report.pass {
                pass = false;
                for axiom in &report.axioms {
                    if let Some(v) = &axiom.worst {
                        if v.magnitude > worst_magnitude {
                            worst_magnitude = v.magnitude;
                            worst = Some(json!({
                                "dim": dim,
                                "axiom": axiom.axiom,
                                "sample": v,
                            }));
                        }
                    }
                }
            }
        }
        let mut check =
            CheckResult::new(&format!("{}-metric-axioms", variant.name()), pass)
                .with_magnitude(worst_magnitude);
        if let Some(w) = worst {
            check = check.with_worst(w);
        }
        checks.push(check);
    }

    // 3. SJL-L1 reflexivity counterexample at a = 0.5 (exact value 2/3).
    {
        let sjl = PairLoss::new(LossVariant::Sjl { norm: Norm::L1 })?;
        let half = Tensor::vector(&[0.5]).expect("finite");
        let value = sjl.eval(&half, &half)?;
        let deviation = (value - 2.0 / 3.0).abs();
        let report = check_metric_axioms(
            &LossVariant::Sjl { norm: Norm::L1 },
            &AxiomCheckConfig {
                dim: 1,
                samples: cfg.axiom_samples.min(10_000),
                seed: cfg.seed,
                tolerance: cfg.axiom_tolerance,
            },
        )?;
        let reflexivity_fails = !report.axiom("reflexivity").map_or(true, |a| a.pass);
        let pass = deviation <= 1e-12 && reflexivity_fails;
        checks.push(
            CheckResult::new("sjl-l1-reflexivity-counterexample", pass)
                .with_magnitude(deviation)
                .with_worst(json!({"loss_at_half": value})),
        );
    }

    // 4. SJL-L2 triangle counterexample at (0.8, 0.4, 0.2).
    {
        let sjl2 = PairLoss::new(LossVariant::Sjl { norm: Norm::SquaredL2 })?;
        let t = |v: f64| Tensor::vector(&[v]).expect("finite");
        let gap = sjl2.eval(&t(0.8), &t(0.2))?
            - sjl2.eval(&t(0.8), &t(0.4))?
            - sjl2.eval(&t(0.4), &t(0.2))?;
        let report = check_metric_axioms(
            &LossVariant::Sjl { norm: Norm::SquaredL2 },
            &AxiomCheckConfig {
                dim: 1,
                samples: cfg.axiom_samples.min(10_000),
                seed: cfg.seed,
                tolerance: cfg.axiom_tolerance,
            },
        )?;
        let triangle_fails = !report.axiom("triangle").map_or(true, |a| a.pass);
        let pass = gap > 0.02 && triangle_fails;
        checks.push(
            CheckResult::new("sjl-l2-triangle-counterexample", pass)
                .with_magnitude(gap)
                .with_worst(json!({"triple": [0.8, 0.4, 0.2], "violation": gap})),
        );
    }

    // 5-6. Hard-label equivalence and the squared-L2 collapse.
    {
        let report =
            verify_hard_label_equivalence(cfg.max_dim, cfg.equivalence_samples, cfg.seed)?;
        checks.push(
            CheckResult::new(
                "hard-label-equivalence",
                report.max_dev_hard_l1 <= 1e-12 && report.witness_min_gap > 0.04,
            )
            .with_magnitude(report.max_dev_hard_l1)
            .with_worst(json!({
                "witness": {
                    "jml1": report.witness_jml1,
                    "jml2": report.witness_jml2,
                    "sjl_l1": report.witness_sjl_l1,
                }
            })),
        );
        checks.push(
            CheckResult::new("squared-l2-collapse", report.max_dev_soft_l2 <= 1e-12)
                .with_magnitude(report.max_dev_soft_l2),
        );
    }

    // 7. JML1 <= JML2.
    {
        let report = verify_ordering(cfg.max_dim, cfg.ordering_samples, cfg.seed)?;
        checks.push(
            CheckResult::new("jml1-below-jml2", report.pass).with_magnitude(report.max_excess),
        );
    }

    // 8. Distillation triangle bound.
    {
        let report = verify_triangle_bound(cfg.max_dim, cfg.triangle_samples, cfg.seed)?;
        checks.push(
            CheckResult::new("kd-triangle-bound", report.pass).with_magnitude(report.max_excess),
        );
    }

    // 9. 2-D non-concavity counterexample.
    {
        let report = verify_nonconcavity_counterexample()?;
        checks.push(
            CheckResult::new("nonconcavity-2d", report.pass)
                .with_magnitude(report.jml1.gap.min(report.jml2.gap))
                .with_worst(json!({
                    "jml1_gap": report.jml1.gap,
                    "jml2_gap": report.jml2.gap,
                })),
        );
    }

    // 10. Gradient-sign analysis of SJL-L1.
    {
        let report = check_sjl_gradient_sign(cfg.sign_samples, cfg.seed)?;
        checks.push(
            CheckResult::new("sjl-gradient-sign", report.pass)
                .with_magnitude(report.disagreements as f64)
                .with_worst(json!({
                    "tested": report.tested,
                    "skipped_near_root": report.skipped_near_root,
                })),
        );
    }

    // 11. Convex closure reproduces set functions at vertices exactly.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc105);
        let mut pass = true;
        let mut worst = 0.0f64;
        for p in 1..=6usize {
            let table: Vec<f64> = (0..1usize << p).map(|_| rng.gen()).collect();
            for v in 0..1usize << p {
                let point: Vec<f64> =
                    (0..p).map(|i| super::vertex_coordinate(v, i)).collect();
                let c = convex_closure(&table, &point)?;
                let dev = (c - table[v]).abs();
                worst = worst.max(dev);
                if dev != 0.0 {
                    pass = false;
                }
            }
        }
        checks.push(CheckResult::new("closure-vertex-exactness", pass).with_magnitude(worst));
    }

    // 12. Convex closure is midpoint convex.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc106);
        let mut worst = f64::NEG_INFINITY;
        for i in 0..cfg.closure_pairs {
            let p = 1 + i % 3;
            let table: Vec<f64> = (0..1usize << p).map(|_| rng.gen()).collect();
            let a: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let excess = convex_closure(&table, &mid)?
                - 0.5 * (convex_closure(&table, &a)? + convex_closure(&table, &b)?);
            worst = worst.max(excess);
        }
        checks.push(
            CheckResult::new("closure-midpoint-convexity", worst <= 1e-9).with_magnitude(worst),
        );
    }

    // 13. Lovász-Softmax agrees with the discrete IoU loss on binary inputs.
    {
        let mut worst = 0.0f64;
        let mut pass = true;
        for p in 1..=6usize {
            for xb in 0..1usize << p {
                for yb in 0..1usize << p {
                    let x: Vec<f64> =
                        (0..p).map(|i| super::vertex_coordinate(xb, i)).collect();
                    let y: Vec<f64> =
                        (0..p).map(|i| super::vertex_coordinate(yb, i)).collect();
                    let xt = Tensor::vector(&x).expect("finite");
                    let yt = Tensor::vector(&y).expect("finite");
                    let lovasz = crate::losses::lovasz_softmax(&xt, &yt)?;
                    let hard = iou_loss_hard(&xt, &yt)?;
                    let dev = (lovasz - hard).abs();
                    worst = worst.max(dev);
                    if dev != 0.0 {
                        pass = false;
                    }
                }
            }
        }
        checks.push(CheckResult::new("lovasz-binary-exactness", pass).with_magnitude(worst));
    }

    // 14. Finite-difference gradients of every differentiable loss.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfd);
        let mut worst = 0.0f64;
        let variants = [
            LossVariant::Sjl { norm: Norm::L1 },
            LossVariant::Sjl { norm: Norm::SquaredL2 },
            LossVariant::jml1(),
            LossVariant::jml2(),
            LossVariant::Jml { kind: JmlKind::Jml1, norm: Norm::SquaredL2 },
            LossVariant::Jml { kind: JmlKind::Jml2, norm: Norm::SquaredL2 },
            LossVariant::Tversky { alpha: 1.0, beta: 1.0 },
            LossVariant::Tversky { alpha: 0.5, beta: 0.5 },
        ];
        for variant in variants {
            let loss = PairLoss::new(variant)?;
            for _ in 0..cfg.fd_points {
                let (x, y) = kink_free_pair(&mut rng, 8);
                let report = loss.fd_check(
                    &Tensor::vector(&x).expect("finite"),
                    &Tensor::vector(&y).expect("finite"),
                    1e-5,
                )?;
                worst = worst.max(report.max_rel_err);
            }
        }
        worst = worst.max(cross_entropy_fd_worst(&mut rng, cfg.fd_points)?);
        worst = worst.max(lovasz_fd_worst(&mut rng, cfg.fd_points)?);
        checks.push(
            CheckResult::new("gradient-finite-difference", worst < 1e-4).with_magnitude(worst),
        );
    }

    let pass = checks.iter().all(CheckResult::passed);
    Ok(SuiteReport { config: cfg.clone(), checks, pass })
}

/// Interior points separated from the |x - y| kinks.
fn kink_free_pair(rng: &mut ChaCha8Rng, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(p);
    let mut y = Vec::with_capacity(p);
    for _ in 0..p {
        if rng.gen::<bool>() {
            x.push(rng.gen_range(0.05..0.45));
            y.push(rng.gen_range(0.55..0.95));
        } else {
            x.push(rng.gen_range(0.55..0.95));
            y.push(rng.gen_range(0.05..0.45));
        }
    }
    (x, y)
}

fn cross_entropy_fd_worst(rng: &mut ChaCha8Rng, points: usize) -> Result<f64, TheoryError> {
    let (classes, pixels) = (3usize, 4usize);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let x = random_distribution_field(rng, classes, pixels);
        let y = random_distribution_field(rng, classes, pixels);
        let mut g = ExprGraph::new();
        let xin = g.input("x");
        let yc = g.constant(y);
        let root = build_cross_entropy(&mut g, xin, yc, pixels);
        let mut b = Bindings::new();
        b.set("x", x);
        let report = g
            .finite_difference_check(root, &b, "x", 1e-6)
            .map_err(crate::losses::LossError::from)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

fn lovasz_fd_worst(rng: &mut ChaCha8Rng, points: usize) -> Result<f64, TheoryError> {
    let p = 6usize;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let y: Vec<f64> = (0..p).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        // Spread the mispredictions out so the frozen permutation is stable
        // under the probe step.
        let mut ms: Vec<f64> = (0..p).map(|i| 0.1 + 0.12 * i as f64).collect();
        for i in (1..p).rev() {
            let j = rng.gen_range(0..=i);
            ms.swap(i, j);
        }
        let x: Vec<f64> =
            y.iter().zip(&ms).map(|(&yi, &m)| if yi == 1.0 { 1.0 - m } else { m }).collect();
        let xt = Tensor::vector(&x).expect("finite");
        let yt = Tensor::vector(&y).expect("finite");
        let mut g = ExprGraph::new();
        let xin = g.input("x");
        let root = build_lovasz_softmax(&mut g, xin, &xt, &yt)?;
        let mut b = Bindings::new();
        b.set("x", xt);
        let report = g
            .finite_difference_check(root, &b, "x", 1e-6)
            .map_err(crate::losses::LossError::from)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

fn random_distribution_field(rng: &mut ChaCha8Rng, classes: usize, pixels: usize) -> Tensor {
    let mut data = vec![0.0f64; classes * pixels];
    for pixel in 0..pixels {
        let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (c, v) in raw.iter().enumerate() {
            data[c * pixels + pixel] = v / total;
        }
    }
    Tensor::new(vec![classes, pixels], data).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> SuiteConfig {
        SuiteConfig {
            seed: 11,
            max_dim: 3,
            axiom_samples: 500,
            axiom_tolerance: 1e-9,
            equivalence_samples: 500,
            ordering_samples: 1_000,
            triangle_samples: 500,
            sign_samples: 200,
            fd_points: 5,
            closure_pairs: 30,
        }
    }

    #[test]
    fn quick_suite_passes_and_is_deterministic() {
        let cfg = quick_config();
        let a = run_suite(&cfg).unwrap();
        assert!(a.pass, "failing checks: {:?}",
            a.checks.iter().filter(|c| !c.passed()).map(|c| &c.name).collect::<Vec<_>>());
        let b = run_suite(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn check_names_are_stable() {
        let report = run_suite(&quick_config()).unwrap();
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"jml1-metric-axioms"));
        assert!(names.contains(&"sjl-l1-reflexivity-counterexample"));
        assert!(names.contains(&"lovasz-binary-exactness"));
        assert!(names.contains(&"gradient-finite-difference"));
    }
}
