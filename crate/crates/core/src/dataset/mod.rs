//! Image catalogs, canonical preprocessing, and synthetic training sets.

mod bench;
mod manifest;
mod preprocess;
mod ptl;
pub mod synth;
mod tt;

pub use bench::{generate_retrieval_benchmark, retrieval_benchmark, BenchmarkItem, BenchmarkManifests};
pub use manifest::{DatasetManifest, ImageRecord, Purpose, TypeLabel};
pub use preprocess::{preprocess_image, CANONICAL_SIDE};
pub use ptl::{generate_ptl_dataset, generate_ptl_sample, PtlSample};
pub use synth::{ColorPolicy, FigureSpec, SynthesisConfig, Synthesizer, TrademarkSample};
pub use tt::{build_tt_manifest, generate_type_catalog, TtSplit};
