//! Feature files, dataset manifests, synthetic data and class tokens.

mod manifest;
mod synthetic;
mod tokens;
pub mod tpf;

pub use manifest::{Dataset, DatasetManifest, FeatureSequence, VideoEntry, TEST, TRAIN};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset, SyntheticVideo, NORMAL_CLASS};
pub use tokens::{class_token_embeddings, VOCABULARY_SEED};
pub use tpf::{load_features, save_features};
