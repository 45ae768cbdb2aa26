//! Corpus ingestion, window segmentation and synthetic corpora.

pub mod dapf;
pub mod manifest;
pub mod synth;
pub mod window;

pub use dapf::{read_dapf, read_feature_matrix, write_dapf};
pub use manifest::{
    load_corpus, load_manifest, load_session, read_labels, write_labels, Corpus, Manifest, Session,
    SessionRecord, Split,
};
pub use synth::{generate_synthetic_corpus, synthesize, synthetic_corpus, AnnotationStyle, SyntheticSpec};
pub use window::{segment_windows, stitch_predictions, WindowOrigin, WindowSample, WindowScheme};
