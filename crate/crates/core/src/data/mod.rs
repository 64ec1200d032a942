//! Set batches, samplers, result tables and configuration files.

mod batch;
pub mod config;
pub mod results;
pub mod sampling;

pub use batch::{duplicate_set, SetBatch};
pub use config::{parse_config, parse_config_str, CoordNorm, Experiment, ExperimentConfig};
pub use results::{read_results, write_results, EvalReport, ReportRow, RESULTS_HEADER};
pub use sampling::{sample_robust_sets, sample_uniform_cube_sets, ContaminationDraw, RobustParams};
