//! File formats: TSPLIB input, labeled datasets, checkpoints and results.

mod checkpoint;
mod dataset;
mod results;
mod tsplib;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ModelKind, OptimizerRecord, TensorRecord, CHECKPOINT_VERSION,
};
pub use dataset::{
    check_snapshot_progress, decode_binary, decode_dataset, decode_text, encode_binary, encode_text, is_dataset,
    load_dataset, read_file, save_dataset, write_atomic, DatasetFormat, LabeledDataset, DATASET_VERSION,
    LENGTH_TOLERANCE,
};
pub use results::{format_tour_file, gap_pct, parse_tour_file, read_optima, read_results, write_results, ResultRow};
pub use tsplib::{parse_tsplib, parse_tsplib_bytes, parse_tsplib_tour, tsplib_round, tsplib_rounded_length};
