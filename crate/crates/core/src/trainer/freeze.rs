//! Snapshots of parameter groups and the frozen-encoder check.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{DetectorModel, ParameterGroup};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupSnapshot {
    pub shape: Vec<usize>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterSnapshot {
    pub groups: BTreeMap<ParameterGroup, GroupSnapshot>,
}

impl ParameterSnapshot {
    pub fn of(model: &DetectorModel) -> Self {
        let groups = ParameterGroup::ALL
            .iter()
            .map(|&g| {
                (
                    g,
                    GroupSnapshot {
                        shape: model.group_shape(g),
                        digest: model.group_digest(g),
                    },
                )
            })
            .collect();
        Self { groups }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FreezeError {
    #[error("group {group}: snapshot shape {before:?} does not match model shape {after:?}")]
    ShapeMismatch {
        group: &'static str,
        before: Vec<usize>,
        after: Vec<usize>,
    },
    #[error("snapshot lacks group {0}")]
    MissingGroup(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupChange {
    pub group: ParameterGroup,
    pub trainable: bool,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FreezeReport {
    pub groups: Vec<GroupChange>,
    pub violations: Vec<String>,
    pub note: Option<String>,
    pub passed: bool,
}

impl fmt::Display for FreezeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<15} {:<9} changed: {}",
                g.group.name(),
                if g.trainable { "trainable" } else { "frozen" },
                if g.changed { "yes" } else { "no" }
            )?;
        }
        if let Some(note) = &self.note {
            writeln!(f, "note: {note}")?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        write!(
            f,
            "freeze check: {}",
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub const NO_OP_NOTE: &str = "no-op training";

/// Compare a pre-training snapshot with the trained model.
///
/// Fails if an encoder group changed or is no longer marked frozen, or if
/// `expect_update` is set and no trainable group moved. When nothing moved
/// and no update was expected the report carries a no-op note.
pub fn verify_frozen(
    before: &ParameterSnapshot,
    after: &DetectorModel,
    expect_update: bool,
) -> Result<FreezeReport, FreezeError> {
    let mut groups = Vec::with_capacity(ParameterGroup::ALL.len());
    let mut violations = Vec::new();

    for group in ParameterGroup::ALL {
        let snap = before
            .groups
            .get(&group)
            .ok_or(FreezeError::MissingGroup(group.name()))?;
        let shape = after.group_shape(group);
        if snap.shape != shape {
            return Err(FreezeError::ShapeMismatch {
                group: group.name(),
                before: snap.shape.clone(),
                after: shape,
            });
        }
        let changed = snap.digest != after.group_digest(group);
        let trainable = group.is_trainable();
        if !trainable && changed {
            violations.push(format!("{} changed during training", group.name()));
        }
        groups.push(GroupChange {
            group,
            trainable,
            changed,
        });
    }

    for (group, backend) in [
        (ParameterGroup::VisionEncoder, &after.vision),
        (ParameterGroup::TextEncoder, &after.text),
    ] {
        if !backend.frozen {
            violations.push(format!("{} is marked trainable", group.name()));
        }
    }

    let any_trained = groups.iter().any(|g| g.trainable && g.changed);
    let any_changed = groups.iter().any(|g| g.changed);
    if expect_update && !any_trained {
        violations.push("no trainable group changed".to_string());
    }
    let note = (!expect_update && !any_changed).then(|| NO_OP_NOTE.to_string());

    Ok(FreezeReport {
        passed: violations.is_empty(),
        groups,
        violations,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderKind, ModelMetadata};

    fn model() -> DetectorModel {
        DetectorModel::toy(ModelMetadata::default()).unwrap()
    }

    #[test]
    fn trained_projection_passes() {
        let m = model();
        let snap = ParameterSnapshot::of(&m);
        let mut trained = m.clone();
        trained.projection.weights[0] += 0.01;
        let r = verify_frozen(&snap, &trained, true).unwrap();
        assert!(r.passed, "{r}");
        let changed: Vec<_> = r
            .groups
            .iter()
            .filter(|g| g.changed)
            .map(|g| g.group)
            .collect();
        assert_eq!(changed, vec![ParameterGroup::Projection]);
    }

    #[test]
    fn untouched_model_is_no_op() {
        let m = model();
        let r = verify_frozen(&ParameterSnapshot::of(&m), &m, false).unwrap();
        assert!(r.passed);
        assert_eq!(r.note.as_deref(), Some(NO_OP_NOTE));
        assert!(r.groups.iter().all(|g| !g.changed));

        let r = verify_frozen(&ParameterSnapshot::of(&m), &m, true).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn mutated_encoder_fails_naming_group() {
        let m = model();
        let snap = ParameterSnapshot::of(&m);
        let mut tampered = m.clone();
        tampered.projection.bias[0] = 1.0;
        tampered.text.kind = EncoderKind::CharTrigram { hash_seed: 99 };
        let r = verify_frozen(&snap, &tampered, true).unwrap();
        assert!(!r.passed);
        assert!(
            r.violations.iter().any(|v| v.contains("text_encoder")),
            "{r}"
        );
    }

    #[test]
    fn encoder_marked_trainable_fails() {
        let mut m = model();
        m.vision.frozen = false;
        let snap = ParameterSnapshot::of(&m);
        let mut trained = m.clone();
        trained.classifier.bias[1] = 0.5;
        let r = verify_frozen(&snap, &trained, true).unwrap();
        assert!(!r.passed);
        assert!(r.violations[0].contains("vision_encoder is marked trainable"));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let m = model();
        let snap = ParameterSnapshot::of(&m);
        let other = DetectorModel::new(
            m.vision.clone(),
            m.text.clone(),
            3,
            ModelMetadata::default(),
        )
        .unwrap();
        assert!(matches!(
            verify_frozen(&snap, &other, true),
            Err(FreezeError::ShapeMismatch {
                group: "projection",
                ..
            })
        ));
    }
}
