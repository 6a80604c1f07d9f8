//! IoU surrogate losses over soft predictions and soft labels.
//!
//! All ratio-form losses share a single 0/0 convention: when the denominator
//! vanishes (both operands empty) the loss is 0, since empty-vs-empty is a
//! perfect match. Expressions encode this by flooring the denominator at
//! `DENOM_FLOOR`, which is far below any value reachable from non-degenerate
//! inputs but keeps the quotient finite (and exactly 0 whenever the numerator
//! is exactly 0).

mod active;
mod aggregate;

pub use active::{select_active_classes, ActiveClassMode, ActiveClassPolicy};
pub use aggregate::{
    aggregate_classes, build_cross_entropy_batch, build_jaccard_aggregate, AggregationScope,
    ImageNodes,
};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, ExprGraph, FdReport, GraphError, NodeId, Tensor};

/// Probabilities are clamped into `[PROB_CLAMP_LO, PROB_CLAMP_HI]` before any
/// logarithm, so cross-entropy on exact 0/1 predictions stays finite.
pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

/// Denominator floor implementing the 0/0 -> 0 convention. Small enough to
/// be invisible for any non-degenerate input (denominators of interest are
/// >= one ulp of a pixel value) yet keeps every quotient finite.
pub const DENOM_FLOOR: f64 = 1e-300;

/// Norm used to relax set cardinalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    L1,
    SquaredL2,
}

/// The two soft-label-compatible relaxations of the Jaccard loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JmlKind {
    Jml1,
    Jml2,
}

/// Loss family selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LossVariant {
    /// Discrete IoU loss on binary masks (not differentiable).
    IouHard,
    /// Soft Jaccard loss: set counts relaxed with a norm.
    Sjl { norm: Norm },
    /// Jaccard metric losses.
    Jml { kind: JmlKind, norm: Norm },
    /// Lovász extension of the IoU loss; requires binary labels.
    LovaszSoftmax,
    /// Tversky generalization; `alpha`/`beta` weight false positives and
    /// false negatives. `alpha = beta = 1` reproduces JML1, 0.5/0.5 the
    /// Dice-style analogue.
    Tversky { alpha: f64, beta: f64 },
    /// Pixel-mean cross-entropy over per-pixel class distributions.
    CrossEntropy,
}

impl LossVariant {
    pub fn jml1() -> Self {
        LossVariant::Jml { kind: JmlKind::Jml1, norm: Norm::L1 }
    }

    pub fn jml2() -> Self {
        LossVariant::Jml { kind: JmlKind::Jml2, norm: Norm::L1 }
    }

    pub fn name(&self) -> String {
        match self {
            LossVariant::IouHard => "iou-hard".to_string(),
            LossVariant::Sjl { norm: Norm::L1 } => "sjl-l1".to_string(),
            LossVariant::Sjl { norm: Norm::SquaredL2 } => "sjl-l2".to_string(),
            LossVariant::Jml { kind, norm } => {
                let base = match kind {
                    JmlKind::Jml1 => "jml1",
                    JmlKind::Jml2 => "jml2",
                };
                match norm {
                    Norm::L1 => base.to_string(),
                    Norm::SquaredL2 => format!("{base}-l2"),
                }
            }
            LossVariant::LovaszSoftmax => "lovasz-softmax".to_string(),
            LossVariant::Tversky { alpha, beta } => format!("tversky({alpha},{beta})"),
            LossVariant::CrossEntropy => "cross-entropy".to_string(),
        }
    }
}

/// Errors from loss construction and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    ShapeMismatch { x: Vec<usize>, y: Vec<usize> },
    OutOfRange { which: &'static str, index: usize, value: f64 },
    NonBinary { which: &'static str, index: usize, value: f64 },
    NotNormalized { pixel: usize, sum: f64 },
    /// The Lovász extension is undefined for labels strictly inside (0,1).
    SoftLabelsUnsupported,
    InvalidCoefficient { name: &'static str, value: f64 },
    EmptyInput,
    EmptyActiveSet,
    ClassOutOfRange { class: usize, classes: usize },
    UnsupportedVariant { variant: String, context: &'static str },
    Graph(GraphError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::ShapeMismatch { x, y } => {
                write!(f, "operand shapes differ: {x:?} vs {y:?}")
            }
            LossError::OutOfRange { which, index, value } => {
                write!(f, "{which}[{index}] = {value} is outside [0, 1]")
            }
            LossError::NonBinary { which, index, value } => {
                write!(f, "{which}[{index}] = {value} is not binary")
            }
            LossError::NotNormalized { pixel, sum } => {
                write!(f, "pixel {pixel} distribution sums to {sum}, expected 1")
            }
            LossError::SoftLabelsUnsupported => {
                write!(f, "Lovász extension requires binary labels")
            }
            LossError::InvalidCoefficient { name, value } => {
                write!(f, "coefficient {name} must be positive, got {value}")
            }
            LossError::EmptyInput => write!(f, "empty input"),
            LossError::EmptyActiveSet => write!(f, "active class set is empty"),
            LossError::ClassOutOfRange { class, classes } => {
                write!(f, "class {class} out of range for {classes} classes")
            }
            LossError::UnsupportedVariant { variant, context } => {
                write!(f, "loss '{variant}' is not supported for {context}")
            }
            LossError::Graph(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<GraphError> for LossError {
    fn from(e: GraphError) -> Self {
        LossError::Graph(e)
    }
}

/// Loss hyper-parameters shared by objectives and the training harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub policy: ActiveClassPolicy,
    pub scope: AggregationScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::jml1(),
            policy: ActiveClassPolicy::present(),
            scope: AggregationScope::PerBatch,
        }
    }
}

pub(crate) fn validate_same_shape(x: &Tensor, y: &Tensor) -> Result<(), LossError> {
    if x.shape() != y.shape() {
        return Err(LossError::ShapeMismatch { x: x.shape().to_vec(), y: y.shape().to_vec() });
    }
    Ok(())
}

pub(crate) fn validate_unit_range(t: &Tensor, which: &'static str) -> Result<(), LossError> {
    for (index, &value) in t.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(LossError::OutOfRange { which, index, value });
        }
    }
    Ok(())
}

pub(crate) fn validate_binary(t: &Tensor, which: &'static str) -> Result<(), LossError> {
    for (index, &value) in t.data().iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(LossError::NonBinary { which, index, value });
        }
    }
    Ok(())
}

/// Checks that every pixel column of a `(C, pixels...)` tensor sums to 1
/// within 1e-6.
pub(crate) fn validate_distribution(t: &Tensor) -> Result<(), LossError> {
    if t.shape().is_empty() || t.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let c = t.shape()[0];
    let pixels = t.len() / c;
    for pixel in 0..pixels {
        let mut sum = 0.0;
        for class in 0..c {
            sum += t.data()[class * pixels + pixel];
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::NotNormalized { pixel, sum });
        }
    }
    Ok(())
}

fn floor_denominator(g: &mut ExprGraph, den: NodeId) -> NodeId {
    g.clamp(den, DENOM_FLOOR, f64::MAX)
}

/// Sum of entries; equals the L1 norm on the `[0,1]` domain.
fn sum_l1(g: &mut ExprGraph, t: NodeId) -> NodeId {
    g.sum_all(t)
}

fn sum_sq(g: &mut ExprGraph, t: NodeId) -> NodeId {
    let sq = g.pow(t, 2.0);
    g.sum_all(sq)
}

/// Soft Jaccard loss (norm-relaxed set counts).
///
/// Written in difference form so the loss is exactly 0 when numerator terms
/// cancel and the 0/0 convention falls out of the denominator floor:
/// L1: `(|x| + |y| - 2<x,y>) / (|x| + |y| - <x,y>)`;
/// squared L2 replaces the numerator with `||x - y||^2`.
pub fn build_sjl(g: &mut ExprGraph, x: NodeId, y: NodeId, norm: Norm) -> NodeId {
    let dot = g.dot(x, y);
    match norm {
        Norm::L1 => {
            let sx = sum_l1(g, x);
            let sy = sum_l1(g, y);
            let sxy = g.add(sx, sy);
            let two_dot = g.scale(dot, 2.0);
            let num = g.sub(sxy, two_dot);
            let den_raw = g.sub(sxy, dot);
            let den = floor_denominator(g, den_raw);
            g.div(num, den)
        }
        Norm::SquaredL2 => {
            let diff = g.sub(x, y);
            let num = sum_sq(g, diff);
            let sx = sum_sq(g, x);
            let sy = sum_sq(g, y);
            let sxy = g.add(sx, sy);
            let den_raw = g.sub(sxy, dot);
            let den = floor_denominator(g, den_raw);
            g.div(num, den)
        }
    }
}

/// Jaccard metric losses:
/// JML1 = `2 d / (|x| + |y| + d)`, JML2 = `d / (<x,y> + d)`,
/// with `d` the L1 (or squared-L2) distance. Both are exactly 0 at `x = y`
/// and at the empty-vs-empty corner.
pub fn build_jml(g: &mut ExprGraph, x: NodeId, y: NodeId, kind: JmlKind, norm: Norm) -> NodeId {
    let diff = g.sub(x, y);
    let dist = match norm {
        Norm::L1 => {
            let a = g.abs(diff);
            g.sum_all(a)
        }
        Norm::SquaredL2 => sum_sq(g, diff),
    };
    match kind {
        JmlKind::Jml1 => {
            let (sx, sy) = match norm {
                Norm::L1 => (sum_l1(g, x), sum_l1(g, y)),
                Norm::SquaredL2 => (sum_sq(g, x), sum_sq(g, y)),
            };
            let sxy = g.add(sx, sy);
            let den_raw = g.add(sxy, dist);
            let den = floor_denominator(g, den_raw);
            let num = g.scale(dist, 2.0);
            g.div(num, den)
        }
        JmlKind::Jml2 => {
            let dot = g.dot(x, y);
            let den_raw = g.add(dot, dist);
            let den = floor_denominator(g, den_raw);
            g.div(dist, den)
        }
    }
}

/// Tversky-weighted metric loss from the TP/FP/FN decomposition:
/// `TP = (|x| + |y| - ||x-y||_1) / 2`, `FP = sum max(x-y, 0)`,
/// `FN = sum max(y-x, 0)`, loss `= (a FP + b FN) / (TP + a FP + b FN)`.
/// `alpha = beta = 1` is exactly JML1.
pub fn build_tversky(
    g: &mut ExprGraph,
    x: NodeId,
    y: NodeId,
    alpha: f64,
    beta: f64,
) -> NodeId {
    let diff = g.sub(x, y);
    let abs = g.abs(diff);
    let dist = g.sum_all(abs);
    let sx = sum_l1(g, x);
    let sy = sum_l1(g, y);
    let sxy = g.add(sx, sy);
    let sub = g.sub(sxy, dist);
    let tp = g.scale(sub, 0.5);
    let fp_elem = g.relu(diff);
    let fp = g.sum_all(fp_elem);
    let ndiff = g.neg(diff);
    let fn_elem = g.relu(ndiff);
    let fn_ = g.sum_all(fn_elem);
    let wfp = g.scale(fp, alpha);
    let wfn = g.scale(fn_, beta);
    let num = g.add(wfp, wfn);
    let den_raw = g.add(tp, num);
    let den = floor_denominator(g, den_raw);
    g.div(num, den)
}

/// Pixel-mean cross-entropy: `mean_p -sum_c y_cp log(clamp(x_cp))`.
/// `pixels` is the normalizer (the count of scored pixels).
pub fn build_cross_entropy(g: &mut ExprGraph, x: NodeId, y: NodeId, pixels: usize) -> NodeId {
    let clamped = g.clamp(x, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let lg = g.log(clamped);
    let prod = g.mul(y, lg);
    let total = g.sum_all(prod);
    let neg = g.neg(total);
    g.scale(neg, 1.0 / pixels as f64)
}

/// Discrete IoU loss `|m| / |y U m|` on binary masks; 0 when both masks are
/// empty.
pub fn iou_loss_hard(x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    validate_same_shape(x, y)?;
    validate_binary(x, "x")?;
    validate_binary(y, "y")?;
    let mut mispredicted = 0u64;
    let mut union = 0u64;
    for (&xi, &yi) in x.data().iter().zip(y.data()) {
        let differs = xi != yi;
        if differs {
            mispredicted += 1;
        }
        if yi == 1.0 || differs {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(mispredicted as f64 / union as f64)
}

/// Builds the Lovász-Softmax expression for prediction input `x` whose
/// current value is `x_at`, against binary labels `y`.
///
/// Mispredictions are `m_i = |x_i - y_i|`; the permutation sorting `m`
/// descending (ties to the lowest index) and the prefix IoU deltas are
/// frozen as constants, so gradient flows through `m` only. The expression
/// computes the telescoped form `sum_i (m_{pi_i} - m_{pi_{i+1}}) Delta_i`,
/// which on binary predictions collapses to a single prefix ratio and
/// therefore reproduces [`iou_loss_hard`] bit for bit.
pub fn build_lovasz_softmax(
    g: &mut ExprGraph,
    x: NodeId,
    x_at: &Tensor,
    y: &Tensor,
) -> Result<NodeId, LossError> {
    validate_same_shape(x_at, y)?;
    validate_unit_range(x_at, "x")?;
    if validate_binary(y, "y").is_err() {
        return Err(LossError::SoftLabelsUnsupported);
    }
    let p = y.len();
    if p == 0 {
        return Err(LossError::EmptyInput);
    }

    let m: Vec<f64> = x_at.data().iter().zip(y.data()).map(|(&xi, &yi)| (xi - yi).abs()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| m[b].partial_cmp(&m[a]).expect("finite").then(a.cmp(&b)));

    let label_count = y.data().iter().filter(|&&v| v == 1.0).count();
    let mut outside = 0usize;
    let mut deltas = Vec::with_capacity(p);
    for (i, &pix) in order.iter().enumerate() {
        if y.data()[pix] == 0.0 {
            outside += 1;
        }
        deltas.push((i + 1) as f64 / (label_count + outside) as f64);
    }

    // D[i][j] = [pi_i == j] - [pi_{i+1} == j]; row sums against m give the
    // successive differences m_{pi_i} - m_{pi_{i+1}} before any rounding.
    let mut d = vec![0.0f64; p * p];
    for i in 0..p {
        d[i * p + order[i]] += 1.0;
        if i + 1 < p {
            d[i * p + order[i + 1]] -= 1.0;
        }
    }

    let yc = g.constant(y.clone());
    let diff = g.sub(x, yc);
    let m_node = g.abs(diff);
    let m_row = g.reshape(m_node, &[1, p]);
    let d_node = g.constant(Tensor::new(vec![p, p], d).expect("finite"));
    let prod = g.mul(d_node, m_row);
    let diffs = g.sum_axes(prod, &[1]);
    let delta_node = g.constant(Tensor::new(vec![p], deltas).expect("finite"));
    Ok(g.dot(diffs, delta_node))
}

/// Evaluates the Lovász-Softmax loss at concrete tensors.
pub fn lovasz_softmax(x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    let mut g = ExprGraph::new();
    let xin = g.input("x");
    let root = build_lovasz_softmax(&mut g, xin, x, y)?;
    let mut b = Bindings::new();
    b.set("x", x.clone());
    let out = g.evaluate(root, &b)?;
    Ok(out.as_scalar().expect("scalar loss"))
}

/// Evaluates pixel-mean cross-entropy; both arguments are `(C, pixels...)`
/// per-pixel distributions (each column must sum to 1 within 1e-6).
pub fn cross_entropy(x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    validate_same_shape(x, y)?;
    validate_distribution(x)?;
    validate_distribution(y)?;
    let pixels = x.len() / x.shape()[0];
    let mut g = ExprGraph::new();
    let xin = g.input("x");
    let yin = g.input("y");
    let root = build_cross_entropy(&mut g, xin, yin, pixels);
    let mut b = Bindings::new();
    b.set("x", x.clone());
    b.set("y", y.clone());
    Ok(g.evaluate(root, &b)?.as_scalar().expect("scalar loss"))
}

/// A reusable pairwise loss expression with inputs `x` and `y`.
///
/// Supported variants are the static ratio family (SJL, JML, Tversky); the
/// discrete, sort-based and distribution-shaped losses have dedicated entry
/// points ([`iou_loss_hard`], [`lovasz_softmax`], [`cross_entropy`]).
#[derive(Debug, Clone)]
pub struct PairLoss {
    graph: ExprGraph,
    root: NodeId,
    variant: LossVariant,
}

impl PairLoss {
    pub fn new(variant: LossVariant) -> Result<Self, LossError> {
        let mut graph = ExprGraph::new();
        let x = graph.input("x");
        let y = graph.input("y");
        let root = match variant {
            LossVariant::Sjl { norm } => build_sjl(&mut graph, x, y, norm),
            LossVariant::Jml { kind, norm } => build_jml(&mut graph, x, y, kind, norm),
            LossVariant::Tversky { alpha, beta } => {
                if !(alpha > 0.0) {
                    return Err(LossError::InvalidCoefficient { name: "alpha", value: alpha });
                }
                if !(beta > 0.0) {
                    return Err(LossError::InvalidCoefficient { name: "beta", value: beta });
                }
                build_tversky(&mut graph, x, y, alpha, beta)
            }
            other => {
                return Err(LossError::UnsupportedVariant {
                    variant: other.name(),
                    context: "a static pairwise expression",
                })
            }
        };
        Ok(PairLoss { graph, root, variant })
    }

    pub fn variant(&self) -> &LossVariant {
        &self.variant
    }

    fn bindings(x: &Tensor, y: &Tensor) -> Bindings {
        let mut b = Bindings::new();
        b.set("x", x.clone());
        b.set("y", y.clone());
        b
    }

    fn validate(&self, x: &Tensor, y: &Tensor) -> Result<(), LossError> {
        validate_same_shape(x, y)?;
        validate_unit_range(x, "x")?;
        validate_unit_range(y, "y")?;
        Ok(())
    }

    pub fn eval(&self, x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
        self.validate(x, y)?;
        let out = self.graph.evaluate(self.root, &Self::bindings(x, y))?;
        Ok(out.as_scalar().expect("scalar loss"))
    }

    /// Gradient of the loss with respect to the prediction vector.
    pub fn grad_x(&self, x: &Tensor, y: &Tensor) -> Result<Tensor, LossError> {
        self.validate(x, y)?;
        Ok(self.graph.gradient(self.root, &Self::bindings(x, y), "x")?)
    }

    pub fn fd_check(&self, x: &Tensor, y: &Tensor, step: f64) -> Result<FdReport, LossError> {
        self.validate(x, y)?;
        Ok(self.graph.finite_difference_check(self.root, &Self::bindings(x, y), "x", step)?)
    }
}

/// One-shot evaluation of any variant on a pair of same-shaped tensors.
///
/// Cross-entropy interprets the tensors as `(C, pixels...)` distributions.
pub fn eval_loss(variant: &LossVariant, x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    match variant {
        LossVariant::IouHard => iou_loss_hard(x, y),
        LossVariant::LovaszSoftmax => lovasz_softmax(x, y),
        LossVariant::CrossEntropy => cross_entropy(x, y),
        _ => PairLoss::new(*variant)?.eval(x, y),
    }
}

/// Classes selected by [`select_active_classes`] stay ordered; alias for the
/// set type used throughout.
pub type ClassSet = BTreeSet<usize>;
