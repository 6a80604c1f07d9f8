//! Experiment configuration; JSON-serializable with defaults for every
//! field, so sparse config files stay valid.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::compositions::CompositionWeights;
use crate::labels::SmoothingMode;
use crate::losses::{ActiveClassPolicy, LossConfig};

/// Synthetic dataset shape: image geometry, class count, how densely shapes
/// are scattered, the feature noise level, and which fraction of boundary
/// pixels carries jittered labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    /// 0 disables shapes entirely (all-background labels).
    pub shape_density: f64,
    /// Standard deviation of the per-pixel signal noise.
    pub noise: f64,
    /// Fraction of boundary pixels whose label is replaced by a neighboring
    /// class.
    pub boundary_jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            width: 32,
            height: 32,
            classes: 5,
            train_images: 12,
            val_images: 6,
            shape_density: 0.8,
            noise: 0.55,
            boundary_jitter: 0.5,
        }
    }
}

/// Per-pixel MLP over local patch features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Odd patch side length; the classifier sees `patch x patch` windows of
    /// every feature channel.
    pub patch: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { patch: 3, hidden: vec![16] }
    }
}

/// SGD with momentum and polynomial learning-rate decay
/// `lr = lr0 * (1 - iter/total)^poly_power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            learning_rate: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            iterations: 1_200,
            batch_size: 2,
        }
    }
}

/// Label smoothing parameters (boundary kernel shared with BECE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingSpec {
    pub epsilon: f64,
    pub kernel: usize,
    pub mode: SmoothingMode,
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        SmoothingSpec { epsilon: 0.5, kernel: 3, mode: SmoothingMode::Boundary }
    }
}

/// Knowledge distillation: the teacher is the same MLP with scaled hidden
/// widths, trained with the boundary-smoothed objective first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdSpec {
    pub teacher_hidden_scale: usize,
    /// Active-class policy of the JML(student, teacher) term.
    pub teacher_policy: ActiveClassPolicy,
}

impl Default for KdSpec {
    fn default() -> Self {
        KdSpec { teacher_hidden_scale: 4, teacher_policy: ActiveClassPolicy::label() }
    }
}

/// Semi-supervised split and augmentation strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslSpec {
    pub labeled_fraction: f64,
    pub ema_decay: f64,
    /// Extra feature noise applied to the student's unlabeled inputs.
    pub feature_noise: f64,
}

impl Default for SslSpec {
    fn default() -> Self {
        SslSpec { labeled_fraction: 0.5, ema_decay: 0.999, feature_noise: 0.3 }
    }
}

/// Which training technique the harness runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    Supervised,
    LabelSmoothing,
    BoundaryLabelSmoothing,
    KnowledgeDistillation,
    SemiSupervised,
}

/// Everything one training run needs; (config, seed) fully determines every
/// emitted artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub technique: Technique,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub loss: LossConfig,
    pub weights: CompositionWeights,
    pub smoothing: SmoothingSpec,
    pub kd: KdSpec,
    pub ssl: SslSpec,
    /// Validate every this many iterations (and always at the end).
    pub eval_every: usize,
    pub calibration_bins: usize,
    /// Boundary kernel for the BECE metric.
    pub boundary_metric_kernel: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            technique: Technique::Supervised,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            optimizer: OptimizerSpec::default(),
            loss: LossConfig::default(),
            weights: CompositionWeights::default(),
            smoothing: SmoothingSpec::default(),
            kd: KdSpec::default(),
            ssl: SslSpec::default(),
            eval_every: 300,
            calibration_bins: 15,
            boundary_metric_kernel: 3,
        }
    }
}

impl ExperimentConfig {
    /// Config preset for a technique: smoothed-label techniques default to
    /// the all-classes policy, hard-label ones to presence.
    pub fn for_technique(technique: Technique) -> Self {
        let mut cfg = ExperimentConfig { technique, ..Default::default() };
        match technique {
            Technique::LabelSmoothing
            | Technique::BoundaryLabelSmoothing
            | Technique::SemiSupervised => {
                cfg.loss.policy = ActiveClassPolicy::all();
            }
            Technique::Supervised | Technique::KnowledgeDistillation => {
                cfg.loss.policy = ActiveClassPolicy::present();
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |detail: String| Err(HarnessError::Config { detail });
        if self.dataset.width == 0 || self.dataset.height == 0 {
            return fail("image size must be positive".into());
        }
        if self.dataset.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.dataset.classes));
        }
        if self.dataset.train_images == 0 || self.dataset.val_images == 0 {
            return fail("need at least one training and one validation image".into());
        }
        if !(0.0..=1.0).contains(&self.dataset.shape_density) {
            return fail(format!("shape density {} outside [0, 1]", self.dataset.shape_density));
        }
        if !(0.0..=1.0).contains(&self.dataset.boundary_jitter) {
            return fail(format!(
                "boundary jitter {} outside [0, 1]",
                self.dataset.boundary_jitter
            ));
        }
        if self.model.patch % 2 == 0 || self.model.patch == 0 {
            return fail(format!("patch size must be odd, got {}", self.model.patch));
        }
        if self.optimizer.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        if self.optimizer.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return fail(format!("learning rate {} must be positive", self.optimizer.learning_rate));
        }
        if self.smoothing.kernel % 2 == 0 {
            return fail(format!("smoothing kernel must be odd, got {}", self.smoothing.kernel));
        }
        if !(0.0..=1.0).contains(&self.smoothing.epsilon) {
            return fail(format!("epsilon {} outside [0, 1]", self.smoothing.epsilon));
        }
        if self.kd.teacher_hidden_scale == 0 {
            return fail("teacher hidden scale must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ssl.ema_decay) {
            return fail(format!("ema decay {} outside [0, 1)", self.ssl.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.ssl.labeled_fraction) || self.ssl.labeled_fraction == 0.0 {
            return fail(format!(
                "labeled fraction {} must lie in (0, 1]",
                self.ssl.labeled_fraction
            ));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.calibration_bins == 0 {
            return fail("calibration bins must be positive".into());
        }
        if self.boundary_metric_kernel % 2 == 0 {
            return fail(format!(
                "boundary metric kernel must be odd, got {}",
                self.boundary_metric_kernel
            ));
        }
        self.weights.validate().map_err(HarnessError::Composition)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::for_technique(Technique::KnowledgeDistillation);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sparse_json_uses_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 9, "technique": "boundary-label-smoothing"}"#)
                .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.technique, Technique::BoundaryLabelSmoothing);
        assert_eq!(cfg.smoothing.epsilon, 0.5);
    }

    #[test]
    fn validation_rejects_degenerate_specs() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.width = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.optimizer.iterations = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.model.patch = 4;
        assert!(cfg.validate().is_err());
    }
}
