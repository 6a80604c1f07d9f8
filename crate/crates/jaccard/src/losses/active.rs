//! Active-class selection: which classes contribute to a class-averaged loss.

use serde::{Deserialize, Serialize};

use super::{ClassSet, LossError};
use crate::autodiff::Tensor;

/// Selection mode for active classes.
///
/// `Present` keeps classes that win the per-pixel argmax of the labels
/// somewhere; `Label` keeps classes whose maximum label value clears the
/// threshold; `Prob` applies the same test to the student's probabilities;
/// `Both` intersects `Label` and `Prob`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActiveClassMode {
    All,
    Present,
    Prob,
    Label,
    Both,
}

/// Mode plus confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveClassPolicy {
    pub mode: ActiveClassMode,
    pub threshold: f64,
}

impl ActiveClassPolicy {
    /// Default threshold below which a class is considered unimportant.
    pub const DEFAULT_THRESHOLD: f64 = 0.1;

    pub fn new(mode: ActiveClassMode, threshold: f64) -> Self {
        ActiveClassPolicy { mode, threshold }
    }

    pub fn all() -> Self {
        Self::new(ActiveClassMode::All, Self::DEFAULT_THRESHOLD)
    }

    /// Default for hard labels.
    pub fn present() -> Self {
        Self::new(ActiveClassMode::Present, Self::DEFAULT_THRESHOLD)
    }

    /// Default for distillation against teacher confidences.
    pub fn label() -> Self {
        Self::new(ActiveClassMode::Label, Self::DEFAULT_THRESHOLD)
    }
}

impl Default for ActiveClassPolicy {
    fn default() -> Self {
        Self::present()
    }
}

fn class_count(t: &Tensor) -> Result<(usize, usize), LossError> {
    if t.shape().is_empty() || t.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let c = t.shape()[0];
    Ok((c, t.len() / c))
}

/// Classes winning the per-pixel argmax somewhere; ties go to the lowest
/// class index. Never empty when there is at least one pixel.
fn present_classes(labels: &Tensor) -> Result<ClassSet, LossError> {
    let (c, pixels) = class_count(labels)?;
    let mut set = ClassSet::new();
    for pixel in 0..pixels {
        let mut best = labels.data()[pixel];
        let mut arg = 0usize;
        for class in 1..c {
            let v = labels.data()[class * pixels + pixel];
            if v > best {
                best = v;
                arg = class;
            }
        }
        set.insert(arg);
    }
    Ok(set)
}

/// Classes whose maximum value over pixels reaches the threshold.
fn confident_classes(t: &Tensor, threshold: f64) -> Result<ClassSet, LossError> {
    let (c, pixels) = class_count(t)?;
    let mut set = ClassSet::new();
    for class in 0..c {
        let row = &t.data()[class * pixels..(class + 1) * pixels];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max >= threshold {
            set.insert(class);
        }
    }
    Ok(set)
}

/// Selects the classes contributing to a class-averaged loss.
///
/// `labels` and `student_probs` are `(C, pixels...)` tensors sharing the
/// class count. An empty selection under a non-`All` mode falls back to
/// `Present`, so the loss never loses all its terms.
pub fn select_active_classes(
    labels: &Tensor,
    student_probs: &Tensor,
    policy: ActiveClassPolicy,
) -> Result<ClassSet, LossError> {
    let (c, _) = class_count(labels)?;
    let (cs, _) = class_count(student_probs)?;
    if c != cs {
        return Err(LossError::ShapeMismatch {
            x: student_probs.shape().to_vec(),
            y: labels.shape().to_vec(),
        });
    }
    let set = match policy.mode {
        ActiveClassMode::All => (0..c).collect(),
        ActiveClassMode::Present => present_classes(labels)?,
        ActiveClassMode::Label => confident_classes(labels, policy.threshold)?,
        ActiveClassMode::Prob => confident_classes(student_probs, policy.threshold)?,
        ActiveClassMode::Both => {
            let by_label = confident_classes(labels, policy.threshold)?;
            let by_prob = confident_classes(student_probs, policy.threshold)?;
            by_label.intersection(&by_prob).cloned().collect()
        }
    };
    if set.is_empty() {
        // Documented fallback: prevents a zero-term loss.
        return present_classes(labels);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(c: usize, pixels: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![c, pixels], data.to_vec()).unwrap()
    }

    #[test]
    fn all_selects_every_class() {
        let labels = field(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let probs = labels.clone();
        let set = select_active_classes(&labels, &probs, ActiveClassPolicy::all()).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn present_selects_argmax_winners() {
        // Hard labels containing only classes {0, 2} of C = 4.
        let labels = field(
            4,
            3,
            &[
                1.0, 0.0, 1.0, // class 0 wins pixels 0 and 2
                0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, // class 2 wins pixel 1
                0.0, 0.0, 0.0,
            ],
        );
        let probs = Tensor::filled(&[4, 3], 0.25).unwrap();
        let set = select_active_classes(&labels, &probs, ActiveClassPolicy::present()).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn label_mode_thresholds_per_class_maxima() {
        // Per-class maxima [0.95, 0.04, 0.30] with threshold 0.1 -> {0, 2}.
        let labels = field(3, 2, &[0.95, 0.5, 0.04, 0.02, 0.30, 0.1]);
        let probs = Tensor::filled(&[3, 2], 1.0 / 3.0).unwrap();
        let set = select_active_classes(&labels, &probs, ActiveClassPolicy::label()).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn both_intersects_label_and_prob() {
        let labels = field(2, 1, &[0.9, 0.1]);
        let probs = field(2, 1, &[0.05, 0.95]);
        let policy = ActiveClassPolicy::new(ActiveClassMode::Both, 0.5);
        // Label keeps {0}, Prob keeps {1}; intersection empty, so the
        // fallback returns the presence set {0}.
        let set = select_active_classes(&labels, &probs, policy).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn empty_selection_falls_back_to_present() {
        let labels = field(2, 2, &[0.04, 0.03, 0.02, 0.01]);
        let probs = Tensor::filled(&[2, 2], 0.5).unwrap();
        let policy = ActiveClassPolicy::new(ActiveClassMode::Label, 0.9);
        let set = select_active_classes(&labels, &probs, policy).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let labels = field(2, 1, &[1.0, 0.0]);
        let probs = field(3, 1, &[0.2, 0.3, 0.5]);
        assert!(select_active_classes(&labels, &probs, ActiveClassPolicy::all()).is_err());
    }
}
