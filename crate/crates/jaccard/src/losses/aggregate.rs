//! Class aggregation: turning per-class pixel vectors into one scalar loss.
//!
//! Two routes are provided. [`aggregate_classes`] evaluates concrete tensors
//! and works for every loss family. [`build_jaccard_aggregate`] assembles a
//! differentiable expression for the ratio family (SJL/JML/Tversky) from
//! per-class axis sums, which is what the training objectives use.

use serde::{Deserialize, Serialize};

use super::{
    build_cross_entropy, eval_loss, floor_denominator, ClassSet, JmlKind, LossError, LossVariant,
    Norm,
};
use crate::autodiff::{ExprGraph, NodeId, Tensor};

/// How per-class losses are pooled.
///
/// `PerBatch` flattens each class over every image in the batch before the
/// ratio (aligned with dataset-scope mIoU); `PerImage` computes per class
/// per image and averages (image-scope mIoU); `ClassAgnostic` pools all
/// active classes' pixels into a single intersection/union pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationScope {
    PerBatch,
    PerImage,
    ClassAgnostic,
}

fn class_geometry(images: &[(&Tensor, &Tensor)]) -> Result<usize, LossError> {
    let Some((first, _)) = images.first() else {
        return Err(LossError::EmptyInput);
    };
    if first.shape().is_empty() {
        return Err(LossError::EmptyInput);
    }
    let classes = first.shape()[0];
    for (x, y) in images {
        super::validate_same_shape(x, y)?;
        if x.shape().is_empty() || x.shape()[0] != classes {
            return Err(LossError::ShapeMismatch {
                x: x.shape().to_vec(),
                y: first.shape().to_vec(),
            });
        }
    }
    Ok(classes)
}

fn check_active(active: &ClassSet, classes: usize) -> Result<(), LossError> {
    if active.is_empty() {
        return Err(LossError::EmptyActiveSet);
    }
    if let Some(&class) = active.iter().find(|&&c| c >= classes) {
        return Err(LossError::ClassOutOfRange { class, classes });
    }
    Ok(())
}

fn class_row<'t>(t: &'t Tensor, class: usize) -> &'t [f64] {
    let pixels = t.len() / t.shape()[0];
    &t.data()[class * pixels..(class + 1) * pixels]
}

/// Aggregates a pairwise loss over images and active classes.
///
/// Each image is a `(probs, labels)` pair shaped `(C, pixels...)`.
/// Cross-entropy is pixel-wise rather than class-averaged and is rejected
/// here.
pub fn aggregate_classes(
    variant: &LossVariant,
    images: &[(&Tensor, &Tensor)],
    active: &ClassSet,
    scope: AggregationScope,
) -> Result<f64, LossError> {
    if matches!(variant, LossVariant::CrossEntropy) {
        return Err(LossError::UnsupportedVariant {
            variant: variant.name(),
            context: "class aggregation (cross-entropy is pixel-wise)",
        });
    }
    let classes = class_geometry(images)?;
    check_active(active, classes)?;

    let eval_pair = |xs: &[f64], ys: &[f64]| -> Result<f64, LossError> {
        eval_loss(variant, &Tensor::vector(xs).expect("finite"), &Tensor::vector(ys).expect("finite"))
    };

    match scope {
        AggregationScope::PerBatch => {
            let mut total = 0.0;
            for &class in active {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for (x, y) in images {
                    xs.extend_from_slice(class_row(x, class));
                    ys.extend_from_slice(class_row(y, class));
                }
                total += eval_pair(&xs, &ys)?;
            }
            Ok(total / active.len() as f64)
        }
        AggregationScope::PerImage => {
            // Mean over images of the mean over classes; every (image,
            // class) pair is defined, so the flat mean is identical.
            let mut total = 0.0;
            for (x, y) in images {
                for &class in active {
                    total += eval_pair(class_row(x, class), class_row(y, class))?;
                }
            }
            Ok(total / (images.len() * active.len()) as f64)
        }
        AggregationScope::ClassAgnostic => {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (x, y) in images {
                for &class in active {
                    xs.extend_from_slice(class_row(x, class));
                    ys.extend_from_slice(class_row(y, class));
                }
            }
            eval_pair(&xs, &ys)
        }
    }
}

/// Graph-side handle for one image in a batch objective.
#[derive(Debug, Clone, Copy)]
pub struct ImageNodes {
    /// Predicted per-pixel class distributions, `(C, P)`.
    pub probs: NodeId,
    /// Label field, `(C, P)`; all-zero columns mark ignored pixels.
    pub labels: NodeId,
    /// Optional `(1, P)` mask of scored pixels (1 = scored). Ignored pixels
    /// are removed from every sum.
    pub valid_mask: Option<NodeId>,
    /// Count of scored pixels, used to normalize cross-entropy.
    pub pixels: usize,
}

#[derive(Clone, Copy)]
enum RatioKind {
    Sjl(Norm),
    Jml(JmlKind, Norm),
    Tversky { alpha: f64, beta: f64 },
}

fn ratio_kind(variant: &LossVariant) -> Result<RatioKind, LossError> {
    match variant {
        LossVariant::Sjl { norm } => Ok(RatioKind::Sjl(*norm)),
        LossVariant::Jml { kind, norm } => Ok(RatioKind::Jml(*kind, *norm)),
        LossVariant::Tversky { alpha, beta } => {
            if !(*alpha > 0.0) {
                return Err(LossError::InvalidCoefficient { name: "alpha", value: *alpha });
            }
            if !(*beta > 0.0) {
                return Err(LossError::InvalidCoefficient { name: "beta", value: *beta });
            }
            Ok(RatioKind::Tversky { alpha: *alpha, beta: *beta })
        }
        other => Err(LossError::UnsupportedVariant {
            variant: other.name(),
            context: "a differentiable class-aggregated expression",
        }),
    }
}

/// Per-class pixel sums feeding one ratio loss; every entry is a `(C,)` node.
fn ratio_stats(g: &mut ExprGraph, kind: RatioKind, x: NodeId, y: NodeId) -> Vec<NodeId> {
    let per_class = |g: &mut ExprGraph, t: NodeId| g.sum_axes(t, &[1]);
    match kind {
        RatioKind::Sjl(Norm::L1) => {
            let sx = per_class(g, x);
            let sy = per_class(g, y);
            let xy = g.mul(x, y);
            let dot = per_class(g, xy);
            vec![sx, sy, dot]
        }
        RatioKind::Sjl(Norm::SquaredL2) => {
            let x2 = g.pow(x, 2.0);
            let sx = per_class(g, x2);
            let y2 = g.pow(y, 2.0);
            let sy = per_class(g, y2);
            let xy = g.mul(x, y);
            let dot = per_class(g, xy);
            let diff = g.sub(x, y);
            let d2 = g.pow(diff, 2.0);
            let sq = per_class(g, d2);
            vec![sx, sy, dot, sq]
        }
        RatioKind::Jml(JmlKind::Jml1, norm) => {
            let diff = g.sub(x, y);
            let (sx, sy, dist) = match norm {
                Norm::L1 => {
                    let a = g.abs(diff);
                    (per_class(g, x), per_class(g, y), per_class(g, a))
                }
                Norm::SquaredL2 => {
                    let x2 = g.pow(x, 2.0);
                    let y2 = g.pow(y, 2.0);
                    let d2 = g.pow(diff, 2.0);
                    let sx = per_class(g, x2);
                    let sy = per_class(g, y2);
                    (sx, sy, per_class(g, d2))
                }
            };
            vec![sx, sy, dist]
        }
        RatioKind::Jml(JmlKind::Jml2, norm) => {
            let xy = g.mul(x, y);
            let dot = per_class(g, xy);
            let diff = g.sub(x, y);
            let dist = match norm {
                Norm::L1 => {
                    let a = g.abs(diff);
                    per_class(g, a)
                }
                Norm::SquaredL2 => {
                    let d2 = g.pow(diff, 2.0);
                    per_class(g, d2)
                }
            };
            vec![dot, dist]
        }
        RatioKind::Tversky { .. } => {
            let sx = per_class(g, x);
            let sy = per_class(g, y);
            let diff = g.sub(x, y);
            let a = g.abs(diff);
            let dist = per_class(g, a);
            let fp_elem = g.relu(diff);
            let fp = per_class(g, fp_elem);
            let ndiff = g.neg(diff);
            let fn_elem = g.relu(ndiff);
            let fn_ = per_class(g, fn_elem);
            vec![sx, sy, dist, fp, fn_]
        }
    }
}

/// Elementwise ratio formula over stat vectors (any shape).
fn ratio_from_stats(g: &mut ExprGraph, kind: RatioKind, stats: &[NodeId]) -> NodeId {
    match kind {
        RatioKind::Sjl(Norm::L1) => {
            let (sx, sy, dot) = (stats[0], stats[1], stats[2]);
            let sxy = g.add(sx, sy);
            let two_dot = g.scale(dot, 2.0);
            let num = g.sub(sxy, two_dot);
            let den_raw = g.sub(sxy, dot);
            let den = floor_denominator(g, den_raw);
            g.div(num, den)
        }
        RatioKind::Sjl(Norm::SquaredL2) => {
            let (sx, sy, dot, sq) = (stats[0], stats[1], stats[2], stats[3]);
            let sxy = g.add(sx, sy);
            let den_raw = g.sub(sxy, dot);
            let den = floor_denominator(g, den_raw);
            g.div(sq, den)
        }
        RatioKind::Jml(JmlKind::Jml1, _) => {
            let (sx, sy, dist) = (stats[0], stats[1], stats[2]);
            let sxy = g.add(sx, sy);
            let den_raw = g.add(sxy, dist);
            let den = floor_denominator(g, den_raw);
            let num = g.scale(dist, 2.0);
            g.div(num, den)
        }
        RatioKind::Jml(JmlKind::Jml2, _) => {
            let (dot, dist) = (stats[0], stats[1]);
            let den_raw = g.add(dot, dist);
            let den = floor_denominator(g, den_raw);
            g.div(dist, den)
        }
        RatioKind::Tversky { alpha, beta } => {
            let (sx, sy, dist, fp, fn_) = (stats[0], stats[1], stats[2], stats[3], stats[4]);
            let sxy = g.add(sx, sy);
            let sub = g.sub(sxy, dist);
            let tp = g.scale(sub, 0.5);
            let wfp = g.scale(fp, alpha);
            let wfn = g.scale(fn_, beta);
            let num = g.add(wfp, wfn);
            let den_raw = g.add(tp, num);
            let den = floor_denominator(g, den_raw);
            g.div(num, den)
        }
    }
}

fn masked(g: &mut ExprGraph, t: NodeId, mask: Option<NodeId>) -> NodeId {
    match mask {
        Some(m) => g.mul(t, m),
        None => t,
    }
}

/// Active-class averaging weights: `1/|active|` on active classes.
fn active_weights(g: &mut ExprGraph, active: &ClassSet, classes: usize, value: f64) -> NodeId {
    let mut w = vec![0.0f64; classes];
    for &c in active {
        w[c] = value;
    }
    g.constant(Tensor::new(vec![classes], w).expect("finite"))
}

/// Builds the class-aggregated ratio loss for a batch of images.
pub fn build_jaccard_aggregate(
    g: &mut ExprGraph,
    images: &[ImageNodes],
    variant: &LossVariant,
    active: &ClassSet,
    classes: usize,
    scope: AggregationScope,
) -> Result<NodeId, LossError> {
    let kind = ratio_kind(variant)?;
    if images.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_active(active, classes)?;

    match scope {
        AggregationScope::PerBatch => {
            let mut totals: Option<Vec<NodeId>> = None;
            for image in images {
                let x = masked(g, image.probs, image.valid_mask);
                let y = masked(g, image.labels, image.valid_mask);
                let stats = ratio_stats(g, kind, x, y);
                totals = Some(match totals {
                    None => stats,
                    Some(acc) => {
                        acc.iter().zip(&stats).map(|(&a, &s)| g.add(a, s)).collect()
                    }
                });
            }
            let loss_vec = ratio_from_stats(g, kind, &totals.expect("non-empty batch"));
            let w = active_weights(g, active, classes, 1.0 / active.len() as f64);
            Ok(g.dot(loss_vec, w))
        }
        AggregationScope::PerImage => {
            let w = active_weights(g, active, classes, 1.0 / active.len() as f64);
            let mut per_image = Vec::with_capacity(images.len());
            for image in images {
                let x = masked(g, image.probs, image.valid_mask);
                let y = masked(g, image.labels, image.valid_mask);
                let stats = ratio_stats(g, kind, x, y);
                let loss_vec = ratio_from_stats(g, kind, &stats);
                per_image.push(g.dot(loss_vec, w));
            }
            let mut acc = per_image[0];
            for &s in &per_image[1..] {
                acc = g.add(acc, s);
            }
            Ok(g.scale(acc, 1.0 / images.len() as f64))
        }
        AggregationScope::ClassAgnostic => {
            let ind = active_weights(g, active, classes, 1.0);
            let mut totals: Option<Vec<NodeId>> = None;
            for image in images {
                let x = masked(g, image.probs, image.valid_mask);
                let y = masked(g, image.labels, image.valid_mask);
                let stats = ratio_stats(g, kind, x, y);
                let pooled: Vec<NodeId> = stats.iter().map(|&s| g.dot(s, ind)).collect();
                totals = Some(match totals {
                    None => pooled,
                    Some(acc) => {
                        acc.iter().zip(&pooled).map(|(&a, &s)| g.add(a, s)).collect()
                    }
                });
            }
            Ok(ratio_from_stats(g, kind, &totals.expect("non-empty batch")))
        }
    }
}

/// Pixel-mean cross-entropy over a batch: the per-image sums are pooled and
/// normalized by the total count of scored pixels.
pub fn build_cross_entropy_batch(
    g: &mut ExprGraph,
    images: &[ImageNodes],
) -> Result<NodeId, LossError> {
    if images.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let total_pixels: usize = images.iter().map(|i| i.pixels).sum();
    if total_pixels == 0 {
        return Err(LossError::EmptyInput);
    }
    let mut acc: Option<NodeId> = None;
    for image in images {
        let y = masked(g, image.labels, image.valid_mask);
        // build_cross_entropy normalizes internally; request the raw sum by
        // normalizing with 1 and scale once at the end.
        let term = build_cross_entropy(g, image.probs, y, 1);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / total_pixels as f64))
}
