//! Frozen feature extractors.
//!
//! Two deterministic backends stand in for pretrained encoders at desk scale:
//! a normalized 256-bin byte histogram for images and a hashed character
//! trigram bag for text. Neither has trainable state; the backend
//! description itself is what freeze checks hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

pub const HISTOGRAM_BINS: usize = 256;
pub const DEFAULT_TRIGRAM_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

// Boundary markers so short strings still produce at least one trigram.
const START: char = '\u{2}';
const END: char = '\u{3}';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    /// L1-normalized histogram of raw byte values.
    ByteHistogram,
    /// L2-normalized bag of hashed character trigrams.
    CharTrigram { hash_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl EncoderKind {
    pub fn modality(&self) -> Modality {
        match self {
            EncoderKind::ByteHistogram => Modality::Image,
            EncoderKind::CharTrigram { .. } => Modality::Text,
        }
    }
}

/// A finite embedding produced by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(ModelError::NonFinite("feature vector"))
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBackend {
    pub name: String,
    pub output_dim: usize,
    pub frozen: bool,
    #[serde(flatten)]
    pub kind: EncoderKind,
}

impl EncoderBackend {
    pub fn byte_histogram() -> Self {
        Self {
            name: "byte-histogram-256".to_string(),
            output_dim: HISTOGRAM_BINS,
            frozen: true,
            kind: EncoderKind::ByteHistogram,
        }
    }

    pub fn char_trigram(dim: usize, hash_seed: u64) -> Self {
        Self {
            name: format!("char-trigram-{dim}"),
            output_dim: dim,
            frozen: true,
            kind: EncoderKind::CharTrigram { hash_seed },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = match self.kind {
            EncoderKind::ByteHistogram => self.output_dim == HISTOGRAM_BINS,
            EncoderKind::CharTrigram { .. } => self.output_dim > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidBackend(format!(
                "{} cannot produce {} dimensions",
                self.name, self.output_dim
            )))
        }
    }

    pub fn modality(&self) -> Modality {
        self.kind.modality()
    }

    pub fn encode_image(&self, bytes: &[u8]) -> Result<FeatureVector, ModelError> {
        if self.modality() != Modality::Image {
            return Err(ModelError::WrongModality(self.name.clone()));
        }
        if bytes.is_empty() {
            return Err(ModelError::EmptyImage);
        }
        let mut hist = vec![0.0; HISTOGRAM_BINS];
        for &b in bytes {
            hist[b as usize] += 1.0;
        }
        let n = bytes.len() as f64;
        hist.iter_mut().for_each(|v| *v /= n);
        FeatureVector::new(hist)
    }

    pub fn encode_text(&self, text: &str) -> Result<FeatureVector, ModelError> {
        let EncoderKind::CharTrigram { hash_seed } = self.kind else {
            return Err(ModelError::WrongModality(self.name.clone()));
        };
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let chars: Vec<char> = std::iter::once(START)
            .chain(text.chars())
            .chain(std::iter::once(END))
            .collect();
        let mut bag = vec![0.0; self.output_dim];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = fnv1a(hash_seed, &buf[..len]) % self.output_dim as u64;
            bag[bucket as usize] += 1.0;
        }
        let norm = bag.iter().map(|v| v * v).sum::<f64>().sqrt();
        bag.iter_mut().for_each(|v| *v /= norm);
        FeatureVector::new(bag)
    }

    /// SHA-256 over the backend's full description, hex encoded.
    pub fn state_digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("backend serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts() {
        let enc = EncoderBackend::byte_histogram();
        let f = enc.encode_image(&[0, 0, 255]).unwrap();
        assert_eq!(f.dim(), 256);
        assert_eq!(f.values()[0], 2.0 / 3.0);
        assert_eq!(f.values()[255], 1.0 / 3.0);
        assert!(f.values()[1..255].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_encodings() {
        let img = EncoderBackend::byte_histogram();
        let bytes = b"\x89PNG some bytes";
        assert_eq!(
            img.encode_image(bytes).unwrap(),
            img.encode_image(bytes).unwrap()
        );
        let txt = EncoderBackend::char_trigram(64, 7);
        assert_eq!(
            txt.encode_text("héllo").unwrap(),
            txt.encode_text("héllo").unwrap()
        );
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(
            EncoderBackend::byte_histogram().encode_image(&[]),
            Err(ModelError::EmptyImage)
        ));
        assert!(matches!(
            EncoderBackend::char_trigram(16, 0).encode_text(""),
            Err(ModelError::EmptyText)
        ));
    }

    #[test]
    fn trigram_is_unit_norm_and_seed_dependent() {
        let a = EncoderBackend::char_trigram(256, 1)
            .encode_text("a")
            .unwrap();
        let norm: f64 = a.values().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let t = "a dog on a beach";
        let x = EncoderBackend::char_trigram(256, 1).encode_text(t).unwrap();
        let y = EncoderBackend::char_trigram(256, 2).encode_text(t).unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn modality_enforced() {
        assert!(matches!(
            EncoderBackend::byte_histogram().encode_text("x"),
            Err(ModelError::WrongModality(_))
        ));
        assert!(matches!(
            EncoderBackend::char_trigram(8, 0).encode_image(b"x"),
            Err(ModelError::WrongModality(_))
        ));
    }

    #[test]
    fn digest_tracks_description() {
        let a = EncoderBackend::char_trigram(32, 0);
        let mut b = a.clone();
        assert_eq!(a.state_digest(), b.state_digest());
        b.frozen = false;
        assert_ne!(a.state_digest(), b.state_digest());
    }

    #[test]
    fn non_finite_features_rejected() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
    }
}
