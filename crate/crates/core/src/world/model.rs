use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One sigmoid output: probability of the positive class.
    Classifier,
    /// `2P` sigmoid outputs: keypoint coordinates in `[0, 1]`.
    Keypoint,
}

/// Two-layer perceptron over the flattened image.
///
/// `out = sigmoid(W2 softplus(W1 (x - 0.5) + b1) + b2)`; weights row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub(crate) const INPUT_CENTER: f64 = 0.5;

impl TargetModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden * self.input_dim
            && self.b1.len() == self.hidden
            && self.w2.len() == self.outputs * self.hidden
            && self.b2.len() == self.outputs
            && self.hidden > 0
            && self.outputs > 0;
        if !ok {
            return Err(Error::shape("target_model", "parameter lengths disagree with declared sizes"));
        }
        if self.kind == ModelKind::Classifier && self.outputs != 1 {
            return Err(Error::shape("target_model", "classifier must have a single output"));
        }
        if self.kind == ModelKind::Keypoint && self.outputs % 2 != 0 {
            return Err(Error::shape("target_model", "keypoint model needs an even output count"));
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite { op: "target_model" });
        }
        Ok(())
    }

    /// Classifier that outputs `probability` for every input.
    pub fn constant(input_dim: usize, probability: f64) -> Self {
        let logit = (probability / (1.0 - probability)).ln();
        Self {
            kind: ModelKind::Classifier,
            input_dim,
            hidden: 1,
            outputs: 1,
            w1: vec![0.0; input_dim],
            b1: vec![0.0],
            w2: vec![0.0],
            b2: vec![logit],
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.kind == ModelKind::Classifier
    }

    /// Records the forward pass on a tape; `image` is any node with `input_dim` entries.
    pub fn forward_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let logits = self.logits_on_tape(tape, image)?;
        tape.sigmoid(logits)
    }

    /// Pre-sigmoid outputs.
    pub fn logits_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        if tape.value(image).len() != self.input_dim {
            return Err(Error::shape(
                "target_model",
                format!("input has {} entries, model expects {}", tape.value(image).len(), self.input_dim),
            ));
        }
        let flat = tape.reshape(image, &[self.input_dim])?;
        let centered = tape.shift(flat, -INPUT_CENTER)?;
        let w1 = tape.constant(Tensor::matrix(self.hidden, self.input_dim, self.w1.clone())?)?;
        let b1 = tape.constant(Tensor::vector(self.b1.clone())?)?;
        let pre = tape.matvec(w1, centered)?;
        let pre = tape.add(pre, b1)?;
        let neg = tape.neg(pre)?;
        let ls = tape.log_sigmoid(neg)?;
        let h = tape.neg(ls)?;
        let w2 = tape.constant(Tensor::matrix(self.outputs, self.hidden, self.w2.clone())?)?;
        let b2 = tape.constant(Tensor::vector(self.b2.clone())?)?;
        let logits = tape.matvec(w2, h)?;
        tape.add(logits, b2)
    }

    /// Same arithmetic as [`TargetModel::forward_on_tape`], so values agree bit-exactly.
    pub fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone())?;
        let out = self.forward_on_tape(&mut tape, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn predict_scalar(&self, image: &ImageTensor) -> Result<f64> {
        Ok(self.predict(image)?[0])
    }
}
