//! Dataset generation, the joint-vs-separate comparison, optimization
//! campaigns and their reports.

mod campaign;
mod config;
mod dataset;
mod experiment;
mod report;

use std::path::Path;

use thiserror::Error;

use crate::flowsim::FlowError;
use crate::latentnet::LatentError;
use crate::optimizer::OptError;
use crate::shapegen::ShapeError;
use crate::surrogate::SurrogateError;

pub use campaign::{evaluate_contours, run_optimization, CampaignReport, CandidateOutcome, SkippedCandidate, Timings};
pub use config::{PipelineConfig, Table1Grid};
pub use dataset::{generate_dataset, shape_seed, Dataset, DatasetHeader, LabelStats, ManifestRow, Split};
pub use experiment::{run_table1_experiment, ModelSpec, Table1, METRIC_NAMES};
pub use report::{render_speed, write_report, write_speed_ppm};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("solver failed on {failed} of {total} shapes (resolution {resolution}, nu {nu}, v_in {v_in})")]
    SolverFailureRate { failed: usize, total: usize, resolution: f64, nu: f64, v_in: f64 },
    #[error("no candidate survived decoding and evaluation")]
    NoCandidates,
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Opt(#[from] OptError),
}

impl PipelineError {
    /// 1 for bad invocations, configs and files; 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Io { .. } | PipelineError::Manifest(_) => 1,
            PipelineError::Shape(ShapeError::Io(_) | ShapeError::Parse(_)) => 1,
            PipelineError::Latent(LatentError::Config(_) | LatentError::Checkpoint(_)) => 1,
            PipelineError::Surrogate(SurrogateError::Io(_)) => 1,
            PipelineError::Opt(OptError::Io(_)) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), msg: e.to_string() }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Independent seed for stream `tag` of a master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    crate::shapegen::attempt_seed(master ^ 0x5EED_0000_0000_0000, tag.wrapping_add(1))
}
