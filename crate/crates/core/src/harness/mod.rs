//! Operational surface: configuration, run modes, sweeps and artifacts.

mod config;
mod output;
mod run;

pub use config::{
    parse_config, AttackSection, DataSource, DivergenceSection, ExperimentSpec, FlSection, IdxSource, Mode, ModelSection, SweepSection,
    SweepTarget, SyntheticSource, SCHEMA_VERSION, SWEEP_AXES,
};
pub use output::{line_plot, num, ppm_bytes, quantize, read_ppm, write_atomic, FileEntry, Series, Table, Writer};
pub use run::{run_experiment, sweep_points, RunManifest, TOOL_NAME};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit status: 1 for bad input, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse(_) | HarnessError::Validation(_) => 1,
            HarnessError::Io(_) | HarnessError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    crate::fl::FlError,
    crate::attack::AttackError,
    crate::analysis::AnalysisError,
    crate::models::ModelError,
    crate::data::DataError
);
