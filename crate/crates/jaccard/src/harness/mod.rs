//! Experiment harness: configuration, portable tensor I/O, synthetic
//! segmentation data, the desk-scale training loop, and loss-curve sweeps.

mod config;
mod curve;
mod model;
mod ptf;
mod synth;
mod train;

pub use config::{
    DatasetSpec, ExperimentConfig, KdSpec, ModelSpec, OptimizerSpec, SmoothingSpec, SslSpec,
    Technique,
};
pub use curve::{loss_curve, parse_curve_losses, write_curve_csv, CurveLoss, CurveTable};
pub use model::PatchModel;
pub use ptf::{read_ptf, read_ptf_file, write_ptf, write_ptf_file};
pub use synth::{generate_synthetic, SyntheticDataset, SyntheticImage};
pub use train::{train, write_outputs, EvalRecord, TrainOutcome, TrainReport};

use std::fmt;

use crate::autodiff::GraphError;
use crate::compositions::CompositionError;
use crate::labels::LabelError;
use crate::losses::LossError;
use crate::metrics::MetricError;

#[derive(Debug)]
pub enum HarnessError {
    Config { detail: String },
    UnknownLoss { name: String, valid: String },
    Divergence { iteration: usize, detail: String },
    Format { detail: String },
    Io(std::io::Error),
    Graph(GraphError),
    Label(LabelError),
    Loss(LossError),
    Composition(CompositionError),
    Metric(MetricError),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config { detail } => write!(f, "invalid configuration: {detail}"),
            HarnessError::UnknownLoss { name, valid } => {
                write!(f, "unknown loss '{name}'; valid names: {valid}")
            }
            HarnessError::Divergence { iteration, detail } => {
                write!(f, "training diverged at iteration {iteration}: {detail}")
            }
            HarnessError::Format { detail } => write!(f, "{detail}"),
            HarnessError::Io(e) => write!(f, "io error: {e}"),
            HarnessError::Graph(e) => write!(f, "{e}"),
            HarnessError::Label(e) => write!(f, "{e}"),
            HarnessError::Loss(e) => write!(f, "{e}"),
            HarnessError::Composition(e) => write!(f, "{e}"),
            HarnessError::Metric(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<GraphError> for HarnessError {
    fn from(e: GraphError) -> Self {
        HarnessError::Graph(e)
    }
}

impl From<LabelError> for HarnessError {
    fn from(e: LabelError) -> Self {
        HarnessError::Label(e)
    }
}

impl From<LossError> for HarnessError {
    fn from(e: LossError) -> Self {
        HarnessError::Loss(e)
    }
}

impl From<CompositionError> for HarnessError {
    fn from(e: CompositionError) -> Self {
        HarnessError::Composition(e)
    }
}

impl From<MetricError> for HarnessError {
    fn from(e: MetricError) -> Self {
        HarnessError::Metric(e)
    }
}
