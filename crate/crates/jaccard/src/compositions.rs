//! Training objectives mixing cross-entropy and class-aggregated IoU terms.
//!
//! Every objective is a non-negative weighted combination built on a graph:
//! zeroing a weight removes exactly that term's gradient contribution.
//! Teacher probabilities and semi-supervised targets enter the graph as
//! constants, so no gradient ever flows into them; the EMA teacher update is
//! the one mutating operation and must be serialized with training steps by
//! the caller.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ExprGraph, NodeId, Tensor};
use crate::losses::{
    build_cross_entropy_batch, build_jaccard_aggregate, select_active_classes, ActiveClassMode,
    ActiveClassPolicy, ClassSet, ImageNodes, LossConfig, LossError,
};

/// Mixing weights for the composed objectives:
/// `lambda_*` balance cross-entropy against the IoU term, `mu`/`nu` weight
/// label and teacher supervision in distillation, `eta`/`theta` weight the
/// supervised and unsupervised branches in semi-supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionWeights {
    pub lambda_ce: f64,
    pub lambda_jml: f64,
    pub mu_label: f64,
    pub mu_teacher: f64,
    pub nu_label: f64,
    pub nu_teacher: f64,
    pub eta_sup: f64,
    pub eta_unsup: f64,
    pub theta_sup: f64,
    pub theta_unsup: f64,
}

impl Default for CompositionWeights {
    fn default() -> Self {
        CompositionWeights {
            lambda_ce: 0.25,
            lambda_jml: 0.75,
            mu_label: 0.5,
            mu_teacher: 0.5,
            nu_label: 0.5,
            nu_teacher: 0.5,
            eta_sup: 0.5,
            eta_unsup: 0.5,
            theta_sup: 0.5,
            theta_unsup: 0.5,
        }
    }
}

impl CompositionWeights {
    pub fn validate(&self) -> Result<(), CompositionError> {
        let all = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_jml", self.lambda_jml),
            ("mu_label", self.mu_label),
            ("mu_teacher", self.mu_teacher),
            ("nu_label", self.nu_label),
            ("nu_teacher", self.nu_teacher),
            ("eta_sup", self.eta_sup),
            ("eta_unsup", self.eta_unsup),
            ("theta_sup", self.theta_sup),
            ("theta_unsup", self.theta_unsup),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CompositionError::InvalidWeight { name, value: v });
            }
        }
        if self.lambda_ce + self.lambda_jml <= 0.0 {
            return Err(CompositionError::NoObjective);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompositionError {
    InvalidWeight { name: &'static str, value: f64 },
    NoObjective,
    EmptyBatch,
    ClassCountMismatch { expected: usize, actual: usize },
    ShapeMismatch { detail: String },
    InvalidDecay { decay: f64 },
    StudentValuesRequired,
    Loss(LossError),
}

impl fmt::Display for CompositionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositionError::InvalidWeight { name, value } => {
                write!(f, "weight {name} must be a finite non-negative value, got {value}")
            }
            CompositionError::NoObjective => {
                write!(f, "lambda_ce + lambda_jml must be positive")
            }
            CompositionError::EmptyBatch => write!(f, "objective needs at least one image"),
            CompositionError::ClassCountMismatch { expected, actual } => {
                write!(f, "class counts differ: {expected} vs {actual}")
            }
            CompositionError::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
            CompositionError::InvalidDecay { decay } => {
                write!(f, "EMA decay must lie in [0, 1), got {decay}")
            }
            CompositionError::StudentValuesRequired => {
                write!(f, "active-class mode needs current student probabilities")
            }
            CompositionError::Loss(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CompositionError {}

impl From<LossError> for CompositionError {
    fn from(e: LossError) -> Self {
        CompositionError::Loss(e)
    }
}

/// One image inside a batch objective. `labels` (and teacher targets, where
/// applicable) are concrete tensors shaped `(C, pixels...)`; `probs` is the
/// graph node producing the student's distributions for the same pixels.
#[derive(Debug, Clone, Copy)]
pub struct BatchImage<'a> {
    pub probs: NodeId,
    /// Student's current output values; required only by the `Prob`/`Both`
    /// active-class modes.
    pub probs_values: Option<&'a Tensor>,
    pub labels: &'a Tensor,
    /// Optional `(1, P)` 0/1 mask of scored pixels.
    pub valid_mask: Option<&'a Tensor>,
    /// Count of scored pixels (mask weight), normalizing cross-entropy.
    pub scored_pixels: usize,
}

fn batch_class_count(tensors: &[&Tensor]) -> Result<usize, CompositionError> {
    let Some(first) = tensors.first() else {
        return Err(CompositionError::EmptyBatch);
    };
    if first.shape().is_empty() {
        return Err(CompositionError::ShapeMismatch { detail: "scalar label field".into() });
    }
    let classes = first.shape()[0];
    for t in tensors {
        if t.shape().is_empty() || t.shape()[0] != classes {
            return Err(CompositionError::ClassCountMismatch {
                expected: classes,
                actual: t.shape().first().copied().unwrap_or(0),
            });
        }
    }
    Ok(classes)
}

fn concat_fields(tensors: &[&Tensor], classes: usize) -> Tensor {
    let pixels: usize = tensors.iter().map(|t| t.len() / classes).sum();
    let mut data = vec![0.0f64; classes * pixels];
    let mut offset = 0usize;
    for t in tensors {
        let p = t.len() / classes;
        for c in 0..classes {
            data[c * pixels + offset..c * pixels + offset + p]
                .copy_from_slice(&t.data()[c * p..(c + 1) * p]);
        }
        offset += p;
    }
    Tensor::new(vec![classes, pixels], data).expect("finite concatenation")
}

/// Selects active classes for a batch against the given target fields.
/// Selection is batch-level: one set for all images.
fn select_for_batch(
    targets: &[&Tensor],
    student_values: &[Option<&Tensor>],
    policy: ActiveClassPolicy,
) -> Result<ClassSet, CompositionError> {
    let classes = batch_class_count(targets)?;
    let labels = concat_fields(targets, classes);
    let probs = match policy.mode {
        ActiveClassMode::Prob | ActiveClassMode::Both => {
            let values: Option<Vec<&Tensor>> = student_values.iter().copied().collect();
            let values = values.ok_or(CompositionError::StudentValuesRequired)?;
            concat_fields(&values, classes)
        }
        // Other modes ignore the student argument; reuse the labels to
        // satisfy the shared-class-count contract.
        _ => labels.clone(),
    };
    Ok(select_active_classes(&labels, &probs, policy)?)
}

fn to_image_nodes(
    g: &mut ExprGraph,
    batch: &[BatchImage<'_>],
    targets: &[&Tensor],
    classes: usize,
) -> Vec<ImageNodes> {
    batch
        .iter()
        .zip(targets)
        .map(|(image, target)| {
            let pixels = target.len() / classes;
            let flat = target.reshaped(&[classes, pixels]).expect("same length");
            let labels = g.constant(flat);
            let valid_mask = image.valid_mask.map(|m| {
                let flat = m.reshaped(&[1, pixels]).expect("same length");
                g.constant(flat)
            });
            ImageNodes { probs: image.probs, labels, valid_mask, pixels: image.scored_pixels }
        })
        .collect()
}

/// `lambda_ce * CE + lambda_jml * JML` against the provided (already
/// smoothed) label fields; the objective of supervised and label-smoothing
/// training.
pub fn ls_objective(
    g: &mut ExprGraph,
    batch: &[BatchImage<'_>],
    weights: &CompositionWeights,
    cfg: &LossConfig,
) -> Result<NodeId, CompositionError> {
    weights.validate()?;
    let targets: Vec<&Tensor> = batch.iter().map(|i| i.labels).collect();
    let values: Vec<Option<&Tensor>> = batch.iter().map(|i| i.probs_values).collect();
    let classes = batch_class_count(&targets)?;
    let active = select_for_batch(&targets, &values, cfg.policy)?;
    let nodes = to_image_nodes(g, batch, &targets, classes);
    let ce = build_cross_entropy_batch(g, &nodes)?;
    let jml = build_jaccard_aggregate(g, &nodes, &cfg.variant, &active, classes, cfg.scope)?;
    let wce = g.scale(ce, weights.lambda_ce);
    let wjml = g.scale(jml, weights.lambda_jml);
    Ok(g.add(wce, wjml))
}

/// Distillation image: ground-truth labels plus detached teacher targets.
#[derive(Debug, Clone, Copy)]
pub struct KdImage<'a> {
    pub probs: NodeId,
    pub probs_values: Option<&'a Tensor>,
    pub hard_labels: &'a Tensor,
    pub teacher: &'a Tensor,
    pub valid_mask: Option<&'a Tensor>,
    pub scored_pixels: usize,
}

/// Knowledge-distillation objective:
/// `lambda_ce (mu_L CE(S,L) + mu_T CE(S,T)) + lambda_jml (nu_L JML(S,L) + nu_T JML(S,T))`.
///
/// The `JML(S,T)` term selects active classes against the teacher's
/// confidences under `teacher_policy` (`Label` mode by default); the label
/// terms use `cfg.policy`. Teacher tensors are embedded as constants, so the
/// teacher receives no gradient.
pub fn kd_objective(
    g: &mut ExprGraph,
    batch: &[KdImage<'_>],
    weights: &CompositionWeights,
    cfg: &LossConfig,
    teacher_policy: ActiveClassPolicy,
) -> Result<NodeId, CompositionError> {
    weights.validate()?;
    let labels: Vec<&Tensor> = batch.iter().map(|i| i.hard_labels).collect();
    let teachers: Vec<&Tensor> = batch.iter().map(|i| i.teacher).collect();
    let values: Vec<Option<&Tensor>> = batch.iter().map(|i| i.probs_values).collect();
    let classes = batch_class_count(&labels)?;
    let teacher_classes = batch_class_count(&teachers)?;
    if classes != teacher_classes {
        return Err(CompositionError::ClassCountMismatch {
            expected: classes,
            actual: teacher_classes,
        });
    }

    let images: Vec<BatchImage<'_>> = batch
        .iter()
        .map(|i| BatchImage {
            probs: i.probs,
            probs_values: i.probs_values,
            labels: i.hard_labels,
            valid_mask: i.valid_mask,
            scored_pixels: i.scored_pixels,
        })
        .collect();

    let active_labels = select_for_batch(&labels, &values, cfg.policy)?;
    let active_teacher = select_for_batch(&teachers, &values, teacher_policy)?;

    let label_nodes = to_image_nodes(g, &images, &labels, classes);
    let teacher_nodes = to_image_nodes(g, &images, &teachers, classes);

    let ce_label = build_cross_entropy_batch(g, &label_nodes)?;
    let ce_teacher = build_cross_entropy_batch(g, &teacher_nodes)?;
    let jml_label =
        build_jaccard_aggregate(g, &label_nodes, &cfg.variant, &active_labels, classes, cfg.scope)?;
    let jml_teacher = build_jaccard_aggregate(
        g,
        &teacher_nodes,
        &cfg.variant,
        &active_teacher,
        classes,
        cfg.scope,
    )?;

    let ce_l = g.scale(ce_label, weights.mu_label);
    let ce_t = g.scale(ce_teacher, weights.mu_teacher);
    let ce = g.add(ce_l, ce_t);
    let jml_l = g.scale(jml_label, weights.nu_label);
    let jml_t = g.scale(jml_teacher, weights.nu_teacher);
    let jml = g.add(jml_l, jml_t);
    let wce = g.scale(ce, weights.lambda_ce);
    let wjml = g.scale(jml, weights.lambda_jml);
    Ok(g.add(wce, wjml))
}

/// Semi-supervised objective:
/// `lambda_ce (eta_S CE_S + eta_U CE_U) + lambda_jml (theta_S JML_S + theta_U JML_U)`.
///
/// The supervised branch scores predictions on augmented labeled images
/// against their (possibly boundary-smoothed) labels; the unsupervised
/// branch scores predictions on augmented unlabeled images against detached
/// teacher targets.
pub fn ssl_objective(
    g: &mut ExprGraph,
    supervised: &[BatchImage<'_>],
    unsupervised: &[BatchImage<'_>],
    weights: &CompositionWeights,
    cfg: &LossConfig,
) -> Result<NodeId, CompositionError> {
    weights.validate()?;
    let build_branch = |g: &mut ExprGraph,
                        batch: &[BatchImage<'_>]|
     -> Result<(NodeId, NodeId), CompositionError> {
        let targets: Vec<&Tensor> = batch.iter().map(|i| i.labels).collect();
        let values: Vec<Option<&Tensor>> = batch.iter().map(|i| i.probs_values).collect();
        let classes = batch_class_count(&targets)?;
        let active = select_for_batch(&targets, &values, cfg.policy)?;
        let nodes = to_image_nodes(g, batch, &targets, classes);
        let ce = build_cross_entropy_batch(g, &nodes)?;
        let jml = build_jaccard_aggregate(g, &nodes, &cfg.variant, &active, classes, cfg.scope)?;
        Ok((ce, jml))
    };
    let (ce_s, jml_s) = build_branch(g, supervised)?;
    let (ce_u, jml_u) = build_branch(g, unsupervised)?;
    let ce_s = g.scale(ce_s, weights.eta_sup);
    let ce_u = g.scale(ce_u, weights.eta_unsup);
    let ce = g.add(ce_s, ce_u);
    let jml_s = g.scale(jml_s, weights.theta_sup);
    let jml_u = g.scale(jml_u, weights.theta_unsup);
    let jml = g.add(jml_s, jml_u);
    let wce = g.scale(ce, weights.lambda_ce);
    let wjml = g.scale(jml, weights.lambda_jml);
    Ok(g.add(wce, wjml))
}

/// Exponential moving average: `theta_T <- decay * theta_T + (1 - decay) * theta_S`.
pub fn ema_update(
    teacher: &mut [Tensor],
    student: &[Tensor],
    decay: f64,
) -> Result<(), CompositionError> {
    if !(0.0..1.0).contains(&decay) {
        return Err(CompositionError::InvalidDecay { decay });
    }
    if teacher.len() != student.len() {
        return Err(CompositionError::ShapeMismatch {
            detail: format!("{} teacher buffers vs {} student buffers", teacher.len(), student.len()),
        });
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        if t.shape() != s.shape() {
            return Err(CompositionError::ShapeMismatch {
                detail: format!("parameter shapes {:?} vs {:?}", t.shape(), s.shape()),
            });
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Bindings;
    use crate::losses::{cross_entropy, AggregationScope, LossVariant};
    use approx::assert_abs_diff_eq;

    fn field(c: usize, pixels: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![c, pixels], data.to_vec()).unwrap()
    }

    fn eval_objective(
        build: impl FnOnce(&mut ExprGraph, NodeId) -> NodeId,
        probs: &Tensor,
    ) -> f64 {
        let mut g = ExprGraph::new();
        let p = g.input("probs");
        let root = build(&mut g, p);
        let mut b = Bindings::new();
        b.set("probs", probs.clone());
        g.evaluate(root, &b).unwrap().as_scalar().unwrap()
    }

    fn cfg_all() -> LossConfig {
        LossConfig {
            variant: LossVariant::jml1(),
            policy: ActiveClassPolicy::all(),
            scope: AggregationScope::PerBatch,
        }
    }

    #[test]
    fn zero_jml_weight_reduces_to_ce() {
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let labels = field(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let weights =
            CompositionWeights { lambda_ce: 1.0, lambda_jml: 0.0, ..Default::default() };
        let v = eval_objective(
            |g, p| {
                let batch = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &labels,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                ls_objective(g, &batch, &weights, &cfg_all()).unwrap()
            },
            &probs,
        );
        assert_abs_diff_eq!(v, cross_entropy(&probs, &labels).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn perfect_hard_prediction_zeroes_jml_term() {
        let onehot = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let weights =
            CompositionWeights { lambda_ce: 0.0, lambda_jml: 1.0, ..Default::default() };
        let v = eval_objective(
            |g, p| {
                let batch = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &onehot,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                ls_objective(g, &batch, &weights, &cfg_all()).unwrap()
            },
            &onehot,
        );
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ls_objective_matches_hand_combination() {
        let probs = field(2, 3, &[0.6, 0.3, 0.8, 0.4, 0.7, 0.2]);
        let labels = field(2, 3, &[0.8, 0.15, 0.9, 0.2, 0.85, 0.1]);
        let ce = cross_entropy(&probs, &labels).unwrap();
        let jml = crate::losses::aggregate_classes(
            &LossVariant::jml1(),
            &[(&probs, &labels)],
            &[0usize, 1].into_iter().collect(),
            AggregationScope::PerBatch,
        )
        .unwrap();
        let weights = CompositionWeights::default();
        let v = eval_objective(
            |g, p| {
                let batch = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &labels,
                    valid_mask: None,
                    scored_pixels: 3,
                }];
                ls_objective(g, &batch, &weights, &cfg_all()).unwrap()
            },
            &probs,
        );
        assert_abs_diff_eq!(v, 0.25 * ce + 0.75 * jml, epsilon = 1e-12);
    }

    #[test]
    fn kd_without_teacher_terms_is_supervised() {
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let labels = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let teacher = field(2, 2, &[0.6, 0.5, 0.4, 0.5]);
        let weights = CompositionWeights {
            mu_label: 1.0,
            mu_teacher: 0.0,
            nu_label: 1.0,
            nu_teacher: 0.0,
            ..Default::default()
        };
        let kd = eval_objective(
            |g, p| {
                let batch = [KdImage {
                    probs: p,
                    probs_values: None,
                    hard_labels: &labels,
                    teacher: &teacher,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                kd_objective(g, &batch, &weights, &cfg_all(), ActiveClassPolicy::label())
                    .unwrap()
            },
            &probs,
        );
        let plain = eval_objective(
            |g, p| {
                let batch = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &labels,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                ls_objective(g, &batch, &CompositionWeights::default(), &cfg_all()).unwrap()
            },
            &probs,
        );
        assert_abs_diff_eq!(kd, plain, epsilon = 1e-12);
    }

    #[test]
    fn kd_reflexive_terms_vanish() {
        // S = T = one-hot(L): every term is reflexive, only CE clamping
        // leaves a residue.
        let onehot = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = eval_objective(
            |g, p| {
                let batch = [KdImage {
                    probs: p,
                    probs_values: None,
                    hard_labels: &onehot,
                    teacher: &onehot,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                kd_objective(
                    g,
                    &batch,
                    &CompositionWeights::default(),
                    &cfg_all(),
                    ActiveClassPolicy::label(),
                )
                .unwrap()
            },
            &onehot,
        );
        assert!(v.abs() < 1e-6, "residual {v}");
    }

    #[test]
    fn kd_matches_hand_combined_terms() {
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let labels = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let teacher = field(2, 2, &[0.8, 0.3, 0.2, 0.7]);
        let cfg = cfg_all();
        let active: ClassSet = [0usize, 1].into_iter().collect();
        let ce_l = cross_entropy(&probs, &labels).unwrap();
        let ce_t = cross_entropy(&probs, &teacher).unwrap();
        let jml_l = crate::losses::aggregate_classes(
            &cfg.variant,
            &[(&probs, &labels)],
            &active,
            cfg.scope,
        )
        .unwrap();
        let jml_t = crate::losses::aggregate_classes(
            &cfg.variant,
            &[(&probs, &teacher)],
            &active,
            cfg.scope,
        )
        .unwrap();
        let expected = 0.25 * (0.5 * ce_l + 0.5 * ce_t) + 0.75 * (0.5 * jml_l + 0.5 * jml_t);
        let v = eval_objective(
            |g, p| {
                let batch = [KdImage {
                    probs: p,
                    probs_values: None,
                    hard_labels: &labels,
                    teacher: &teacher,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                kd_objective(
                    g,
                    &batch,
                    &CompositionWeights::default(),
                    &cfg,
                    ActiveClassPolicy::all(),
                )
                .unwrap()
            },
            &probs,
        );
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn teacher_gets_no_gradient() {
        let labels = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let teacher = field(2, 2, &[0.8, 0.3, 0.2, 0.7]);
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let mut g = ExprGraph::new();
        let p = g.input("probs");
        // Declare a teacher input; the objective embeds teacher values as
        // constants, so the root must not depend on it.
        let _t = g.input("teacher");
        let batch = [KdImage {
            probs: p,
            probs_values: None,
            hard_labels: &labels,
            teacher: &teacher,
            valid_mask: None,
            scored_pixels: 2,
        }];
        let root = kd_objective(
            &mut g,
            &batch,
            &CompositionWeights::default(),
            &cfg_all(),
            ActiveClassPolicy::label(),
        )
        .unwrap();
        let mut b = Bindings::new();
        b.set("probs", probs.clone());
        b.set("teacher", teacher.clone());
        let grads = g.gradients(root, &b, &["probs", "teacher"]).unwrap();
        assert!(grads[0].data().iter().any(|&v| v != 0.0));
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroing_a_weight_removes_exactly_its_gradient() {
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let labels = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let teacher = field(2, 2, &[0.8, 0.3, 0.2, 0.7]);
        let grad_with = |nu_teacher: f64| -> Tensor {
            let mut g = ExprGraph::new();
            let p = g.input("probs");
            let batch = [KdImage {
                probs: p,
                probs_values: None,
                hard_labels: &labels,
                teacher: &teacher,
                valid_mask: None,
                scored_pixels: 2,
            }];
            let weights = CompositionWeights { nu_teacher, ..Default::default() };
            let root =
                kd_objective(&mut g, &batch, &weights, &cfg_all(), ActiveClassPolicy::all())
                    .unwrap();
            let mut b = Bindings::new();
            b.set("probs", probs.clone());
            g.gradient(root, &b, "probs").unwrap()
        };
        // The gradient difference between nu_T = 0.5 and nu_T = 0 must be
        // exactly 0.5 * lambda_jml * grad(JML(S,T)).
        let with = grad_with(0.5);
        let without = grad_with(0.0);
        let term_grad = {
            let mut g = ExprGraph::new();
            let p = g.input("probs");
            let teacher_const = g.constant(teacher.reshaped(&[2, 2]).unwrap());
            let nodes = [ImageNodes {
                probs: p,
                labels: teacher_const,
                valid_mask: None,
                pixels: 2,
            }];
            let active: ClassSet = [0usize, 1].into_iter().collect();
            let root = build_jaccard_aggregate(
                &mut g,
                &nodes,
                &LossVariant::jml1(),
                &active,
                2,
                AggregationScope::PerBatch,
            )
            .unwrap();
            let mut b = Bindings::new();
            b.set("probs", probs.clone());
            g.gradient(root, &b, "probs").unwrap()
        };
        for i in 0..with.len() {
            let diff = with.data()[i] - without.data()[i];
            assert_abs_diff_eq!(diff, 0.75 * 0.5 * term_grad.data()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn ssl_reduces_to_supervised_when_unsup_weights_vanish() {
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let labels = field(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let targets = field(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let weights = CompositionWeights {
            eta_sup: 1.0,
            eta_unsup: 0.0,
            theta_sup: 1.0,
            theta_unsup: 0.0,
            ..Default::default()
        };
        let ssl = eval_objective(
            |g, p| {
                let sup = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &labels,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                let unsup = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &targets,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                ssl_objective(g, &sup, &unsup, &weights, &cfg_all()).unwrap()
            },
            &probs,
        );
        let plain = eval_objective(
            |g, p| {
                let batch = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &labels,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                ls_objective(g, &batch, &CompositionWeights::default(), &cfg_all()).unwrap()
            },
            &probs,
        );
        assert_abs_diff_eq!(ssl, plain, epsilon = 1e-12);
    }

    #[test]
    fn ssl_reflexive_unsupervised_terms_vanish() {
        // Teacher targets equal the (near one-hot) student output: the
        // unsupervised branch contributes only the CE clamping residue.
        let sharp = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let labels = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let sup_only = CompositionWeights { eta_unsup: 0.0, theta_unsup: 0.0, ..Default::default() };
        let both = CompositionWeights::default();
        let run = |weights: &CompositionWeights| {
            let w = *weights;
            eval_objective(
                |g, p| {
                    let sup = [BatchImage {
                        probs: p,
                        probs_values: None,
                        labels: &labels,
                        valid_mask: None,
                        scored_pixels: 2,
                    }];
                    let unsup = [BatchImage {
                        probs: p,
                        probs_values: None,
                        labels: &sharp,
                        valid_mask: None,
                        scored_pixels: 2,
                    }];
                    ssl_objective(g, &sup, &unsup, &w, &cfg_all()).unwrap()
                },
                &sharp,
            )
        };
        assert!((run(&both) - run(&sup_only)).abs() < 1e-6);
    }

    #[test]
    fn ssl_matches_hand_combination() {
        let probs = field(2, 2, &[0.7, 0.4, 0.3, 0.6]);
        let labels = field(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let targets = field(2, 2, &[0.6, 0.45, 0.4, 0.55]);
        let cfg = cfg_all();
        let active: ClassSet = [0usize, 1].into_iter().collect();
        let ce_s = cross_entropy(&probs, &labels).unwrap();
        let ce_u = cross_entropy(&probs, &targets).unwrap();
        let jml_s =
            crate::losses::aggregate_classes(&cfg.variant, &[(&probs, &labels)], &active, cfg.scope)
                .unwrap();
        let jml_u = crate::losses::aggregate_classes(
            &cfg.variant,
            &[(&probs, &targets)],
            &active,
            cfg.scope,
        )
        .unwrap();
        let expected = 0.25 * (0.5 * ce_s + 0.5 * ce_u) + 0.75 * (0.5 * jml_s + 0.5 * jml_u);
        let v = eval_objective(
            |g, p| {
                let sup = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &labels,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                let unsup = [BatchImage {
                    probs: p,
                    probs_values: None,
                    labels: &targets,
                    valid_mask: None,
                    scored_pixels: 2,
                }];
                ssl_objective(g, &sup, &unsup, &CompositionWeights::default(), &cfg_all())
                    .unwrap()
            },
            &probs,
        );
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn ema_update_examples() {
        // decay = 0 copies the student.
        let mut teacher = vec![Tensor::vector(&[5.0, -1.0]).unwrap()];
        let student = vec![Tensor::vector(&[1.0, 2.0]).unwrap()];
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher[0].data(), student[0].data());

        // Equal parameters are a fixed point.
        let mut teacher = vec![Tensor::vector(&[0.3]).unwrap()];
        let student = vec![Tensor::vector(&[0.3]).unwrap()];
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert_eq!(teacher[0].data(), &[0.3]);

        // theta_T = 0, theta_S = 1, decay 0.9 -> 0.1.
        let mut teacher = vec![Tensor::vector(&[0.0]).unwrap()];
        let student = vec![Tensor::vector(&[1.0]).unwrap()];
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert_abs_diff_eq!(teacher[0].data()[0], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn ema_rejects_bad_inputs() {
        let mut teacher = vec![Tensor::vector(&[0.0]).unwrap()];
        let student = vec![Tensor::vector(&[1.0, 2.0]).unwrap()];
        assert!(matches!(
            ema_update(&mut teacher, &student, 0.5),
            Err(CompositionError::ShapeMismatch { .. })
        ));
        let student = vec![Tensor::vector(&[1.0]).unwrap()];
        assert!(matches!(
            ema_update(&mut teacher, &student, 1.0),
            Err(CompositionError::InvalidDecay { .. })
        ));
    }

    #[test]
    fn jml_triangle_bound_for_distillation() {
        use crate::losses::PairLoss;
        use rand::{Rng, SeedableRng};
        let jml1 = PairLoss::new(LossVariant::jml1()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let p = rng.gen_range(1..=6);
            let s: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
            let t: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
            let l: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
            let (s, t, l) = (
                Tensor::vector(&s).unwrap(),
                Tensor::vector(&t).unwrap(),
                Tensor::vector(&l).unwrap(),
            );
            let sl = jml1.eval(&s, &l).unwrap();
            let st = jml1.eval(&s, &t).unwrap();
            let tl = jml1.eval(&t, &l).unwrap();
            assert!(sl <= st + tl + 1e-12, "{sl} > {st} + {tl}");
        }
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let w = CompositionWeights { lambda_ce: 0.0, lambda_jml: 0.0, ..Default::default() };
        assert_eq!(w.validate().unwrap_err(), CompositionError::NoObjective);
        let w = CompositionWeights { mu_label: -0.1, ..Default::default() };
        assert!(matches!(
            w.validate().unwrap_err(),
            CompositionError::InvalidWeight { name: "mu_label", .. }
        ));
    }
}
