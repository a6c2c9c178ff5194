//! Manifests, pixmaps, embedding containers and the synthetic dataset.

pub mod embeddings;
pub mod manifest;
pub mod ppm;
pub mod synthetic;

pub use embeddings::{read_embeddings, write_embeddings};
pub use manifest::{load_manifest, Manifest, ManifestRecord, Split};
pub use ppm::{load_image, save_image};
pub use synthetic::{generate_synthetic, SyntheticConfig};
