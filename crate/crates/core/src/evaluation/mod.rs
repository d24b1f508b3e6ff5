//! Cross-validation protocol, WAR/UAR metrics and the architecture ablation
//! runner.

mod corpus;
mod folds;
mod manifest;
mod metrics;
mod protocol;
mod report;
pub mod synthetic;

pub use corpus::Corpus;
pub use folds::{build_folds, Fold, FoldMode, FoldPlan};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use metrics::{aggregate_utterance, argmax_lowest, compute_metrics, Metrics};
pub use protocol::{run_ablations, run_protocol, AblationReport, AblationRow, FoldResult, ProtocolResult};
pub use report::format_percent;
