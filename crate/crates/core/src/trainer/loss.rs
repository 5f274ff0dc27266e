//! Weighted two-class cross-entropy and its gradient through the detector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Label;
use crate::model::{Affine, DetectorModel, ForwardPass, Logits};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{logits} logit pairs for {targets} targets")]
    LengthMismatch { logits: usize, targets: usize },
    #[error("non-finite logits at batch index {0}")]
    NonFinite(usize),
}

/// Per-class weights `(w_match, w_mismatch)`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ClassWeights {
    pub matched: f64,
    pub mismatched: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            matched: 1.0,
            mismatched: 1.0,
        }
    }
}

impl From<[f64; 2]> for ClassWeights {
    fn from([matched, mismatched]: [f64; 2]) -> Self {
        Self {
            matched,
            mismatched,
        }
    }
}

impl From<ClassWeights> for [f64; 2] {
    fn from(w: ClassWeights) -> Self {
        [w.matched, w.mismatched]
    }
}

impl ClassWeights {
    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Match => self.matched,
            Label::Mismatch => self.mismatched,
        }
    }
}

/// `ln(1 + e^d)` without overflow.
fn softplus(d: f64) -> f64 {
    d.max(0.0) + (-d.abs()).exp().ln_1p()
}

/// Negative log-softmax of the target logit. Depends only on the logit
/// difference, so it is exact under common shifts and safe for large logits.
pub fn sample_nll(logits: Logits, target: Label) -> f64 {
    let other = match target {
        Label::Match => logits.mismatched,
        Label::Mismatch => logits.matched,
    };
    softplus(other - logits.get(target))
}

fn check_batch(logits: &[Logits], targets: &[Label]) -> Result<(), LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != targets.len() {
        return Err(LossError::LengthMismatch {
            logits: logits.len(),
            targets: targets.len(),
        });
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(LossError::NonFinite(i));
    }
    Ok(())
}

/// Weighted mean of `w_y * -log softmax(x)_y` over the batch, normalized by
/// the sum of the target weights.
pub fn cross_entropy(
    logits: &[Logits],
    targets: &[Label],
    weights: ClassWeights,
) -> Result<f64, LossError> {
    check_batch(logits, targets)?;
    let mut total = 0.0;
    let mut norm = 0.0;
    for (&l, &y) in logits.iter().zip(targets) {
        let w = weights.get(y);
        total += w * sample_nll(l, y);
        norm += w;
    }
    Ok(total / norm)
}

/// Gradients for the trainable partition, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub projection: Affine,
    pub classifier: Affine,
}

impl Gradients {
    pub fn zeros_like(model: &DetectorModel) -> Self {
        Self {
            projection: Affine::zeros(model.projection.in_dim, model.projection.out_dim),
            classifier: Affine::zeros(model.classifier.in_dim, model.classifier.out_dim),
        }
    }

    pub fn norm(&self) -> f64 {
        [&self.projection, &self.classifier]
            .iter()
            .flat_map(|a| a.weights.iter().chain(&a.bias))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Plain gradient descent on projection and classifier.
    pub fn apply(&self, model: &mut DetectorModel, learning_rate: f64) {
        for (param, grad) in [
            (&mut model.projection, &self.projection),
            (&mut model.classifier, &self.classifier),
        ] {
            for (p, g) in param.weights.iter_mut().zip(&grad.weights) {
                *p -= learning_rate * g;
            }
            for (p, g) in param.bias.iter_mut().zip(&grad.bias) {
                *p -= learning_rate * g;
            }
        }
    }
}

/// Loss and analytic gradients by backpropagation through
/// `classifier(tanh(projection(x)))`.
pub fn loss_and_gradients(
    model: &DetectorModel,
    passes: &[ForwardPass],
    targets: &[Label],
    weights: ClassWeights,
) -> Result<(f64, Gradients), LossError> {
    let logits: Vec<Logits> = passes.iter().map(|p| p.logits).collect();
    let loss = cross_entropy(&logits, targets, weights)?;
    let norm: f64 = targets.iter().map(|&y| weights.get(y)).sum();

    let mut grads = Gradients::zeros_like(model);
    let hidden_dim = model.projection.out_dim;
    let in_dim = model.projection.in_dim;
    let mut d_hidden = vec![0.0; hidden_dim];

    for (pass, &y) in passes.iter().zip(targets) {
        let scale = weights.get(y) / norm;
        let p_match = pass.logits.p_match();
        let mut dz = [p_match, 1.0 - p_match];
        dz[y.index()] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= scale);

        let cls = &mut grads.classifier;
        for (k, &dzk) in dz.iter().enumerate() {
            cls.bias[k] += dzk;
            let row = &mut cls.weights[k * hidden_dim..(k + 1) * hidden_dim];
            for (g, &h) in row.iter_mut().zip(&pass.hidden) {
                *g += dzk * h;
            }
        }

        for (j, dh) in d_hidden.iter_mut().enumerate() {
            let back = dz[0] * model.classifier.weights[j]
                + dz[1] * model.classifier.weights[hidden_dim + j];
            let h = pass.hidden[j];
            *dh = back * (1.0 - h * h);
        }

        let proj = &mut grads.projection;
        for (j, &da) in d_hidden.iter().enumerate() {
            if da == 0.0 {
                continue;
            }
            proj.bias[j] += da;
            let row = &mut proj.weights[j * in_dim..(j + 1) * in_dim];
            for (g, &x) in row.iter_mut().zip(&pass.input) {
                *g += da * x;
            }
        }
    }
    Ok((loss, grads))
}
