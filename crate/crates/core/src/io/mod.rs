//! Bundle serialization, text ingestion and synthetic graphs.

pub mod bundle_file;
pub mod ingest;
pub mod sbm;

pub use bundle_file::{read_bundle, write_bundle, BundleError, MAGIC};
pub use ingest::ingest_text;
pub use sbm::{generate_sbm, SbmSpec};
