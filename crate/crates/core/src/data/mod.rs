//! Dataset ingestion, synthetic data and client partitioning.

mod dataset;
mod idx;
mod partition;
mod synth;

pub use dataset::{ClientDataset, Dataset, SplitIndices};
pub use idx::{load_client_dirs, load_idx, write_client_dirs, write_idx};
pub use partition::{partition, split_sizes, PartitionMode, PartitionPlan};
pub use synth::{synth_dataset, synth_dataset_with_noise, SYNTH_NOISE};
