//! Central finite-difference audit of the analytic gradients.
//!
//! Each trainable scalar is nudged by `±step` and the batch loss recomputed.
//! Only the affected hidden unit or logit is re-evaluated, which keeps a full
//! sweep over the projection matrix affordable on every training run.

use serde::Serialize;

use super::loss::{cross_entropy, loss_and_gradients, ClassWeights, Gradients, LossError};
use crate::manifest::Label;
use crate::model::{DetectorModel, Logits, ModelError, ParameterGroup};

pub const FD_STEP: f64 = 1e-5;
pub const MAX_RELATIVE_ERROR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorAudit {
    pub name: String,
    pub analytic_norm: f64,
    pub max_abs_diff: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientAudit {
    pub batch_size: usize,
    pub step: f64,
    pub tensors: Vec<TensorAudit>,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

struct Cached {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Logits,
}

/// Numeric gradient of the batch loss with respect to every trainable
/// parameter, by central differences with step `step`.
pub fn finite_difference_gradients(
    model: &DetectorModel,
    inputs: &[Vec<f64>],
    targets: &[Label],
    weights: ClassWeights,
    step: f64,
) -> Result<Gradients, AuditError> {
    let hidden_dim = model.projection.out_dim;
    let in_dim = model.projection.in_dim;
    let cls = &model.classifier;

    let cache: Vec<Cached> = inputs
        .iter()
        .map(|x| {
            let pass = model.forward(x)?;
            let pre = model.projection.apply(x);
            Ok(Cached {
                pre,
                hidden: pass.hidden,
                logits: pass.logits,
            })
        })
        .collect::<Result<_, ModelError>>()?;

    let loss_with = |shift: &dyn Fn(usize, &Cached) -> Logits| -> Result<f64, LossError> {
        let logits: Vec<Logits> = cache.iter().enumerate().map(|(n, c)| shift(n, c)).collect();
        cross_entropy(&logits, targets, weights)
    };
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * step);

    let mut grads = Gradients::zeros_like(model);

    // Classifier row k only moves logit k, by `delta * input_to_that_weight`.
    let bumped = |c: &Cached, k: usize, d: f64| {
        let mut l = c.logits;
        if k == 0 {
            l.matched += d;
        } else {
            l.mismatched += d;
        }
        l
    };
    for k in 0..2 {
        for j in 0..hidden_dim {
            let plus = loss_with(&|_, c| bumped(c, k, step * c.hidden[j]))?;
            let minus = loss_with(&|_, c| bumped(c, k, -step * c.hidden[j]))?;
            grads.classifier.weights[k * hidden_dim + j] = central(plus, minus);
        }
        let plus = loss_with(&|_, c| bumped(c, k, step))?;
        let minus = loss_with(&|_, c| bumped(c, k, -step))?;
        grads.classifier.bias[k] = central(plus, minus);
    }

    // Perturbing projection row j only moves hidden unit j.
    let moved = |c: &Cached, j: usize, delta_pre: f64| {
        let dh = (c.pre[j] + delta_pre).tanh() - c.hidden[j];
        Logits::new(
            c.logits.matched + cls.weights[j] * dh,
            c.logits.mismatched + cls.weights[hidden_dim + j] * dh,
        )
    };
    for j in 0..hidden_dim {
        for i in 0..in_dim {
            if inputs.iter().all(|x| x[i] == 0.0) {
                continue;
            }
            let plus = loss_with(&|n, c| moved(c, j, step * inputs[n][i]))?;
            let minus = loss_with(&|n, c| moved(c, j, -step * inputs[n][i]))?;
            grads.projection.weights[j * in_dim + i] = central(plus, minus);
        }
        let plus = loss_with(&|_, c| moved(c, j, step))?;
        let minus = loss_with(&|_, c| moved(c, j, -step))?;
        grads.projection.bias[j] = central(plus, minus);
    }
    Ok(grads)
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorAudit {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let (na, nn, nd) = (norm(analytic), norm(numeric), norm(&diff));
    let denom = na.max(nn);
    TensorAudit {
        name: name.to_string(),
        analytic_norm: na,
        max_abs_diff: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        relative_error: if denom == 0.0 { 0.0 } else { nd / denom },
    }
}

/// Compare backpropagated gradients with central differences on one batch.
pub fn audit_gradients(
    model: &DetectorModel,
    inputs: &[Vec<f64>],
    targets: &[Label],
    weights: ClassWeights,
) -> Result<GradientAudit, AuditError> {
    let passes = inputs
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, analytic) = loss_and_gradients(model, &passes, targets, weights)?;
    let numeric = finite_difference_gradients(model, inputs, targets, weights, FD_STEP)?;

    let tensors = vec![
        compare(
            &format!("{}.weights", ParameterGroup::Projection.name()),
            &analytic.projection.weights,
            &numeric.projection.weights,
        ),
        compare(
            &format!("{}.bias", ParameterGroup::Projection.name()),
            &analytic.projection.bias,
            &numeric.projection.bias,
        ),
        compare(
            &format!("{}.weights", ParameterGroup::Classifier.name()),
            &analytic.classifier.weights,
            &numeric.classifier.weights,
        ),
        compare(
            &format!("{}.bias", ParameterGroup::Classifier.name()),
            &analytic.classifier.bias,
            &numeric.classifier.bias,
        ),
    ];
    let max_relative_error = tensors.iter().fold(0.0f64, |m, t| m.max(t.relative_error));
    Ok(GradientAudit {
        batch_size: inputs.len(),
        step: FD_STEP,
        tensors,
        max_relative_error,
        passed: max_relative_error <= MAX_RELATIVE_ERROR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderBackend, ModelMetadata};

    #[test]
    fn audit_passes_on_small_model() {
        let model = DetectorModel::new(
            EncoderBackend::byte_histogram(),
            EncoderBackend::char_trigram(16, 1),
            6,
            ModelMetadata {
                seed: 5,
                ..ModelMetadata::default()
            },
        )
        .unwrap();
        let inputs: Vec<Vec<f64>> = [("ab", "one"), ("zzzz", "two two"), ("\x00\x01", "three")]
            .iter()
            .map(|(img, txt)| model.fuse(img.as_bytes(), txt).unwrap())
            .collect();
        let targets = [Label::Match, Label::Mismatch, Label::Match];
        let audit =
            audit_gradients(&model, &inputs, &targets, ClassWeights::from([1.0, 2.0])).unwrap();
        assert!(audit.passed, "{audit:?}");
        assert_eq!(audit.tensors.len(), 4);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let model = DetectorModel::new(
            EncoderBackend::byte_histogram(),
            EncoderBackend::char_trigram(8, 1),
            4,
            ModelMetadata::default(),
        )
        .unwrap();
        let x = model.fuse(b"img", "text").unwrap();
        let pass = model.forward(&x).unwrap();
        let (_, mut analytic) =
            loss_and_gradients(&model, &[pass], &[Label::Match], ClassWeights::default()).unwrap();
        analytic.classifier.bias[0] += 0.1;
        let numeric = finite_difference_gradients(
            &model,
            &[x],
            &[Label::Match],
            ClassWeights::default(),
            FD_STEP,
        )
        .unwrap();
        let t = compare("cls", &analytic.classifier.bias, &numeric.classifier.bias);
        assert!(t.relative_error > MAX_RELATIVE_ERROR);
    }
}
