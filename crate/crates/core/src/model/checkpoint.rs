//! Versioned JSON checkpoints.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! exact round-tripping, so a save/load cycle is bit-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Affine, DetectorModel, EncoderBackend, ModelError, ModelMetadata};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vision: EncoderBackend,
    pub text: EncoderBackend,
    pub projection: Affine,
    pub classifier: Affine,
    pub template_id: String,
    pub question: String,
    pub seed: u64,
    pub epoch: u32,
}

impl From<&DetectorModel> for Checkpoint {
    fn from(m: &DetectorModel) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            vision: m.vision.clone(),
            text: m.text.clone(),
            projection: m.projection.clone(),
            classifier: m.classifier.clone(),
            template_id: m.metadata.template_id.clone(),
            question: m.metadata.question.clone(),
            seed: m.metadata.seed,
            epoch: m.metadata.epoch,
        }
    }
}

impl TryFrom<Checkpoint> for DetectorModel {
    type Error = ModelError;

    fn try_from(c: Checkpoint) -> Result<Self, Self::Error> {
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(c.format_version));
        }
        let model = DetectorModel {
            vision: c.vision,
            text: c.text,
            projection: c.projection,
            classifier: c.classifier,
            metadata: ModelMetadata {
                template_id: c.template_id,
                question: c.question,
                seed: c.seed,
                epoch: c.epoch,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn to_bytes(model: &DetectorModel) -> Result<Vec<u8>, ModelError> {
    let mut bytes = serde_json::to_vec(&Checkpoint::from(model))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<DetectorModel, ModelError> {
    let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
    DetectorModel::try_from(ckpt)
}

/// Write through a temporary sibling and rename into place.
pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<(), ModelError> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorModel, ModelError> {
    from_bytes(&fs::read(path)?)
}
