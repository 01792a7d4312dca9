//! Trial datasets, synthetic generators, masking and the on-disk container.

pub mod container;
pub mod dataset;
pub mod generators;
pub mod mask;

pub use container::{dataset_hash, load_dataset, save_dataset, Manifest};
pub use dataset::{make_splits, DatasetMeta, Splits, TrialDataset};
pub use generators::{generate, generate_with, GeneratorConfig, GeneratorKind};
pub use mask::{apply_mask, make_mask, Mask, MaskMode};
