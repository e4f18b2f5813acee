//! Pipeline orchestration for the `elp` command: configuration, dataset
//! ingestion per task, detection and segmentation stages, the
//! cross-validated experiment, and a hash-gated artifact manifest.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod manifest;
pub mod stages;
pub mod waves;

pub use config::{Overrides, PipelineConfig, Task};
pub use stages::Pipeline;
