use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{EncoderBackend, FeatureVector};
use super::ModelError;
use crate::manifest::Label;
use crate::prompt::{DEFAULT_QUESTION, DEFAULT_TEMPLATE_ID};

pub const DEFAULT_HIDDEN: usize = 64;
pub const INIT_RANGE: f64 = 0.05;

/// Dense affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights uniform in `[-INIT_RANGE, INIT_RANGE]`, zero bias.
    pub fn uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|r| {
                let dot: f64 = self.row(r).iter().zip(x).map(|(w, v)| w * v).sum();
                dot + self.bias[r]
            })
            .collect()
    }

    pub fn check_shape(&self, what: &'static str) -> Result<(), ModelError> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(ModelError::Shape(what));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite(what));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.in_dim as u64).to_le_bytes());
        h.update((self.out_dim as u64).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub template_id: String,
    pub question: String,
    pub seed: u64,
    pub epoch: u32,
}

impl Default for ModelMetadata {
    fn default() -> Self {
        Self {
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
            question: DEFAULT_QUESTION.to_string(),
            seed: 0,
            epoch: 0,
        }
    }
}

/// The two-logit pair `(match, mismatch)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub matched: f64,
    pub mismatched: f64,
}

impl Logits {
    pub fn new(matched: f64, mismatched: f64) -> Self {
        Self {
            matched,
            mismatched,
        }
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Match => self.matched,
            Label::Mismatch => self.mismatched,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matched.is_finite() && self.mismatched.is_finite()
    }

    /// Softmax probability of the match class, computed as a logistic of the
    /// logit difference.
    pub fn p_match(&self) -> f64 {
        let d = self.mismatched - self.matched;
        if d >= 0.0 {
            let e = (-d).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + d.exp())
        }
    }

    pub fn p_mismatch(&self) -> f64 {
        Logits::new(self.mismatched, self.matched).p_match()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub p_match: f64,
}

impl Prediction {
    /// Argmax over the logits; equal logits resolve to `Mismatch`.
    pub fn from_logits(logits: Logits) -> Self {
        let label = if logits.matched > logits.mismatched {
            Label::Match
        } else {
            Label::Mismatch
        };
        Self {
            label,
            p_match: logits.p_match(),
        }
    }

    pub fn p_mismatch(&self) -> f64 {
        1.0 - self.p_match
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterGroup {
    VisionEncoder,
    TextEncoder,
    Projection,
    Classifier,
}

impl ParameterGroup {
    pub const ALL: [ParameterGroup; 4] = [
        ParameterGroup::VisionEncoder,
        ParameterGroup::TextEncoder,
        ParameterGroup::Projection,
        ParameterGroup::Classifier,
    ];

    pub fn is_trainable(self) -> bool {
        matches!(
            self,
            ParameterGroup::Projection | ParameterGroup::Classifier
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ParameterGroup::VisionEncoder => "vision_encoder",
            ParameterGroup::TextEncoder => "text_encoder",
            ParameterGroup::Projection => "projection",
            ParameterGroup::Classifier => "classifier",
        }
    }
}

/// Frozen encoders, a trainable `tanh` projection over the concatenated
/// features, and a two-logit classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub vision: EncoderBackend,
    pub text: EncoderBackend,
    pub projection: Affine,
    pub classifier: Affine,
    pub metadata: ModelMetadata,
}

impl DetectorModel {
    pub fn new(
        vision: EncoderBackend,
        text: EncoderBackend,
        hidden: usize,
        metadata: ModelMetadata,
    ) -> Result<Self, ModelError> {
        if hidden == 0 {
            return Err(ModelError::Shape("hidden width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(metadata.seed);
        let fused = vision.output_dim + text.output_dim;
        let projection = Affine::uniform(fused, hidden, &mut rng);
        let classifier = Affine::uniform(hidden, 2, &mut rng);
        let model = Self {
            vision,
            text,
            projection,
            classifier,
            metadata,
        };
        model.validate()?;
        Ok(model)
    }

    /// Toy image + text backends with the default hidden width.
    pub fn toy(metadata: ModelMetadata) -> Result<Self, ModelError> {
        Self::new(
            EncoderBackend::byte_histogram(),
            EncoderBackend::char_trigram(super::encoder::DEFAULT_TRIGRAM_DIM, 0),
            DEFAULT_HIDDEN,
            metadata,
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.vision.validate()?;
        self.text.validate()?;
        self.projection.check_shape("projection")?;
        self.classifier.check_shape("classifier")?;
        let fused = self.vision.output_dim + self.text.output_dim;
        if self.projection.in_dim != fused {
            return Err(ModelError::DimensionMismatch {
                what: "projection input",
                expected: fused,
                found: self.projection.in_dim,
            });
        }
        if self.classifier.in_dim != self.projection.out_dim {
            return Err(ModelError::DimensionMismatch {
                what: "classifier input",
                expected: self.projection.out_dim,
                found: self.classifier.in_dim,
            });
        }
        if self.classifier.out_dim != 2 {
            return Err(ModelError::DimensionMismatch {
                what: "classifier output",
                expected: 2,
                found: self.classifier.out_dim,
            });
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.out_dim
    }

    pub fn encode_image(&self, bytes: &[u8]) -> Result<FeatureVector, ModelError> {
        self.vision.encode_image(bytes)
    }

    pub fn encode_text(&self, text: &str) -> Result<FeatureVector, ModelError> {
        self.text.encode_text(text)
    }

    /// Concatenation of image and prompt features.
    pub fn fuse(&self, image: &[u8], prompt: &str) -> Result<Vec<f64>, ModelError> {
        let mut fused = self.encode_image(image)?.into_inner();
        fused.extend_from_slice(self.encode_text(prompt)?.values());
        Ok(fused)
    }

    pub fn forward(&self, fused: &[f64]) -> Result<ForwardPass, ModelError> {
        if fused.len() != self.projection.in_dim {
            return Err(ModelError::DimensionMismatch {
                what: "fused feature",
                expected: self.projection.in_dim,
                found: fused.len(),
            });
        }
        if self.classifier.in_dim != self.projection.out_dim || self.classifier.out_dim != 2 {
            return Err(ModelError::DimensionMismatch {
                what: "classifier input",
                expected: self.projection.out_dim,
                found: self.classifier.in_dim,
            });
        }
        let hidden: Vec<f64> = self
            .projection
            .apply(fused)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let z = self.classifier.apply(&hidden);
        let logits = Logits::new(z[0], z[1]);
        if !logits.is_finite() {
            return Err(ModelError::NonFinite("logits"));
        }
        Ok(ForwardPass {
            input: fused.to_vec(),
            hidden,
            logits,
        })
    }

    pub fn classify(&self, image: &[u8], prompt: &str) -> Result<Logits, ModelError> {
        let fused = self.fuse(image, prompt)?;
        Ok(self.forward(&fused)?.logits)
    }

    pub fn predict(&self, image: &[u8], prompt: &str) -> Result<Prediction, ModelError> {
        Ok(Prediction::from_logits(self.classify(image, prompt)?))
    }

    pub fn group_digest(&self, group: ParameterGroup) -> String {
        match group {
            ParameterGroup::VisionEncoder => self.vision.state_digest(),
            ParameterGroup::TextEncoder => self.text.state_digest(),
            ParameterGroup::Projection => self.projection.digest(),
            ParameterGroup::Classifier => self.classifier.digest(),
        }
    }

    /// Shape descriptor of a parameter group, compared before digests.
    pub fn group_shape(&self, group: ParameterGroup) -> Vec<usize> {
        match group {
            ParameterGroup::VisionEncoder => vec![self.vision.output_dim],
            ParameterGroup::TextEncoder => vec![self.text.output_dim],
            ParameterGroup::Projection => vec![self.projection.out_dim, self.projection.in_dim],
            ParameterGroup::Classifier => vec![self.classifier.out_dim, self.classifier.in_dim],
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.projection.param_count() + self.classifier.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::EncoderKind;
    use proptest::prelude::*;

    fn one_dim_model() -> DetectorModel {
        let vision = EncoderBackend {
            name: "v1".into(),
            output_dim: 1,
            frozen: true,
            kind: EncoderKind::CharTrigram { hash_seed: 0 },
        };
        let text = EncoderBackend {
            name: "t1".into(),
            output_dim: 1,
            frozen: true,
            kind: EncoderKind::CharTrigram { hash_seed: 0 },
        };
        DetectorModel {
            vision,
            text,
            projection: Affine {
                in_dim: 2,
                out_dim: 2,
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
            },
            classifier: Affine {
                in_dim: 2,
                out_dim: 2,
                weights: vec![1.0, 0.0, -1.0, 0.0],
                bias: vec![0.0, 0.0],
            },
            metadata: ModelMetadata::default(),
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = DetectorModel::toy(ModelMetadata::default()).unwrap();
        m.projection = Affine::zeros(m.projection.in_dim, m.projection.out_dim);
        m.classifier = Affine::zeros(m.classifier.in_dim, 2);
        let l = m.classify(b"anything", "any prompt").unwrap();
        assert_eq!(l, Logits::new(0.0, 0.0));
    }

    #[test]
    fn hand_linear_algebra() {
        // identity projection then tanh; classifier rows (+1, -1) on hidden[0]
        let m = one_dim_model();
        let pass = m.forward(&[1.0, 0.0]).unwrap();
        let t = 1f64.tanh();
        assert_eq!(pass.logits, Logits::new(t, -t));
        assert_eq!(pass.hidden, vec![t, 0.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = one_dim_model();
        assert!(matches!(
            m.forward(&[1.0, 0.0, 0.0]),
            Err(ModelError::DimensionMismatch { .. })
        ));
        let mut bad = m.clone();
        bad.projection = Affine::zeros(3, 2);
        assert!(matches!(
            bad.validate(),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn seeded_model_is_bit_deterministic() {
        let meta = ModelMetadata {
            seed: 42,
            ..ModelMetadata::default()
        };
        let a = DetectorModel::toy(meta.clone()).unwrap();
        let b = DetectorModel::toy(meta).unwrap();
        assert_eq!(a, b);
        let la = a.classify(b"img", "prompt").unwrap();
        let lb = a.classify(b"img", "prompt").unwrap();
        assert_eq!(la.matched.to_bits(), lb.matched.to_bits());
        assert_eq!(la.mismatched.to_bits(), lb.mismatched.to_bits());
        assert!(a.projection.weights.iter().all(|w| w.abs() <= INIT_RANGE));
    }

    #[test]
    fn predictions_from_logits() {
        // 1 / (1 + e^-2) and 1 / (1 + e^4), evaluated independently
        let p = Prediction::from_logits(Logits::new(2.0, 0.0));
        assert_eq!(p.label, Label::Match);
        assert!((p.p_match - 0.8807970779778823).abs() < 1e-15);

        let p = Prediction::from_logits(Logits::new(0.0, 0.0));
        assert_eq!(p.label, Label::Mismatch);
        assert_eq!(p.p_match, 0.5);

        let p = Prediction::from_logits(Logits::new(-1.0, 3.0));
        assert_eq!(p.label, Label::Mismatch);
        assert!((p.p_match - 0.01798620996209156).abs() < 1e-15);
    }

    #[test]
    fn encoding_leaves_model_untouched() {
        let m = DetectorModel::toy(ModelMetadata::default()).unwrap();
        let before: Vec<String> = ParameterGroup::ALL
            .iter()
            .map(|&g| m.group_digest(g))
            .collect();
        m.encode_image(b"bytes").unwrap();
        m.encode_text("text").unwrap();
        m.predict(b"bytes", "text").unwrap();
        let after: Vec<String> = ParameterGroup::ALL
            .iter()
            .map(|&g| m.group_digest(g))
            .collect();
        assert_eq!(before, after);
    }

    proptest! {
        #[test]
        fn shift_invariance(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -100.0f64..100.0) {
            let p = Prediction::from_logits(Logits::new(a, b));
            let q = Prediction::from_logits(Logits::new(a + c, b + c));
            // a shifted tie may stop being a tie after rounding
            if ((a + c) - (b + c)) == (a - b) {
                prop_assert_eq!(p.label, q.label);
            }
            prop_assert!((p.p_match - q.p_match).abs() < 1e-12);
        }

        #[test]
        fn probabilities_sum_to_one(a in -700.0f64..700.0, b in -700.0f64..700.0) {
            let l = Logits::new(a, b);
            prop_assert!((l.p_match() + l.p_mismatch() - 1.0).abs() <= 1e-12);
        }
    }
}
