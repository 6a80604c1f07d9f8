//! Soft-label IoU surrogate losses and their companion machinery.
//!
//! The crate bundles:
//!
//! - [`autodiff`]: a small reverse-mode differentiation engine over dense
//!   tensors;
//! - [`losses`]: the IoU loss family (hard IoU, soft Jaccard, the metric
//!   variants, Lovász-Softmax, the Tversky generalization, cross-entropy)
//!   with active-class selection and class aggregation;
//! - [`labels`]: one-hot encoding, uniform and boundary label smoothing;
//! - [`compositions`]: training objectives mixing cross-entropy and IoU terms
//!   for label smoothing, knowledge distillation and semi-supervised setups;
//! - [`metrics`]: accuracy, mean IoU under dataset/image scopes, and
//!   expected/static calibration errors with optional boundary masking;
//! - [`theory`]: mechanical checks of the metric axioms, equivalence and
//!   ordering properties, and a small exact LP for convex closures;
//! - [`harness`]: configuration, portable tensor files, synthetic data
//!   generation, and a desk-scale training loop driven by the `jaccard` CLI.

pub mod autodiff;
pub mod compositions;
pub mod harness;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod theory;
