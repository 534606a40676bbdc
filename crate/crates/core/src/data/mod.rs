//! Embedding bags, dataset manifests and the synthetic corpus generator.

mod embedding;
mod manifest;
mod synthetic;

pub use embedding::{read_embedding_file, write_embedding_file, SlideBag, EMBEDDING_MAGIC};
pub use manifest::{
    load_manifest, DatasetManifest, Label, ManifestEntry, Split, SurvivalRecord, Task,
};
pub use synthetic::{generate_synthetic_dataset, write_synthetic_dataset, SyntheticDataset, SyntheticSpec};
