//! Synthetic task generation, experiment configuration, sweeps and result
//! files.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod results;
pub mod sweep;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint};
pub use config::{ContextPoint, Coverage, ExperimentSpec, Future, Past};
pub use corpus::{generate_corpus, Corpus, SyntheticTaskSpec};
pub use results::{read_results, write_results, CheckResult, LatencyRow, RescoreCell, SweepResults, WerCell};
pub use sweep::{decode_wer, latency_row, persist, prepare_data, rescore_table, run_sweep, train_model, Datasets, SweepOutput};
