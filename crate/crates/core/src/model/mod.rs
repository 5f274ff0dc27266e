//! The detector: frozen encoders, fusion by concatenation, a trainable
//! projection and a two-logit classifier head.

mod checkpoint;
mod detector;
mod encoder;

use thiserror::Error;

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, CHECKPOINT_FORMAT_VERSION,
};
pub use detector::{
    Affine, DetectorModel, ForwardPass, Logits, ModelMetadata, ParameterGroup, Prediction,
    DEFAULT_HIDDEN, INIT_RANGE,
};
pub use encoder::{
    EncoderBackend, EncoderKind, FeatureVector, Modality, DEFAULT_TRIGRAM_DIM, HISTOGRAM_BINS,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty image bytes")]
    EmptyImage,
    #[error("empty text")]
    EmptyText,
    #[error("encoder {0} cannot encode this modality")]
    WrongModality(String),
    #[error("invalid backend: {0}")]
    InvalidBackend(String),
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("malformed parameter shape: {0}")]
    Shape(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
