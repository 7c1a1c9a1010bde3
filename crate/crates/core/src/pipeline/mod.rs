//! Dataset handling, configuration, file formats and the end-to-end
//! workflow.

pub mod config;
pub mod dataset;
pub mod imageio;
pub mod run;
pub mod synth;

pub use config::{Config, CrfInput, Widths, SEED_ENV};
pub use dataset::{augment_images, ingest, split_1_1_2, split_counts, DatasetManifest, ManifestEntry, Sample, Split};
pub use run::*;
pub use synth::{synth_dataset, SynthConfig};
