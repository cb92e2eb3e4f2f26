use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::world::{compose_prompt, ImageTensor, TargetModel, World};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5, gamma: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// The three loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub target: f64,
    pub structure: f64,
    pub attribute: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.alpha * terms.target + weights.beta * terms.structure + weights.gamma * terms.attribute
}

pub(crate) fn weighted_sum_on_tape(tape: &mut Tape, terms: [Var; 3], weights: &LossWeights) -> Result<Var> {
    let a = tape.scale(terms[0], weights.alpha)?;
    let b = tape.scale(terms[1], weights.beta)?;
    let c = tape.scale(terms[2], weights.gamma)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

fn check_extents(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean local SSIM of two `[h, w]` nodes.
pub fn ssim_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_extents(tape.value(a), tape.value(b), "ssim")?;
    let shape = tape.value(a).shape();
    if shape[0] < SSIM_WINDOW || shape[1] < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("window {SSIM_WINDOW} larger than image {shape:?}")));
    }
    let k = SSIM_WINDOW;
    let mu_a = tape.window_mean(a, k)?;
    let mu_b = tape.window_mean(b, k)?;
    let var_a = tape.window_cov(a, a, k)?;
    let var_b = tape.window_cov(b, b, k)?;
    let cov = tape.window_cov(a, b, k)?;

    let mu_ab = tape.mul(mu_a, mu_b)?;
    let n1 = tape.scale(mu_ab, 2.0)?;
    let n1 = tape.shift(n1, SSIM_C1)?;
    let n2 = tape.scale(cov, 2.0)?;
    let n2 = tape.shift(n2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;

    let sq_a = tape.mul(mu_a, mu_a)?;
    let sq_b = tape.mul(mu_b, mu_b)?;
    let d1 = tape.add(sq_a, sq_b)?;
    let d1 = tape.shift(d1, SSIM_C1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.shift(d2, SSIM_C2)?;
    let den = tape.mul(d1, d2)?;

    let map = tape.div(num, den)?;
    tape.mean(map)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.constant(a.tensor().clone())?;
    let vb = tape.constant(b.tensor().clone())?;
    let s = ssim_on_tape(&mut tape, va, vb)?;
    Ok(tape.value(s).item())
}

/// Peak signal-to-noise ratio for unit peak; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_extents(a.tensor(), b.tensor(), "psnr")?;
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Binary cross-entropy of `sigmoid(logit)` against soft target `p`.
pub(crate) fn bce_logit_on_tape(tape: &mut Tape, logit: Var, p: f64) -> Result<Var> {
    let log_p = tape.log_sigmoid(logit)?;
    let neg = tape.neg(logit)?;
    let log_q = tape.log_sigmoid(neg)?;
    let a = tape.scale(log_p, -p)?;
    let b = tape.scale(log_q, -(1.0 - p))?;
    let s = tape.add(a, b)?;
    tape.sum(s)
}

pub(crate) fn mse_on_tape(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    let t = tape.constant(Tensor::vector(targets.to_vec())?)?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Text anchors of the attribute scorer: `[p + attr, p]`.
pub(crate) fn attribute_anchors(world: &World, attribute: &str) -> Result<Tensor> {
    let index = world.feature_index(attribute)?;
    let name = world.feature_names()[index];
    let prefix = world.neutral_prefix();
    let with = world.embed_text(&compose_prompt(prefix, name))?;
    let without = world.embed_text(prefix)?;
    let mut data = with.values().to_vec();
    data.extend_from_slice(without.values());
    Tensor::matrix(2, world.embed_dim(), data)
}

/// Log of the two-way similarity softmax for an embedding node.
pub(crate) fn attribute_log_probs_on_tape(tape: &mut Tape, embedding: Var, anchors: &Tensor, temperature: f64) -> Result<Var> {
    let a = tape.constant(anchors.clone())?;
    let cos = tape.matvec(a, embedding)?;
    tape.log_softmax(cos, temperature)
}

/// Two-way similarity-softmax distribution `[P(attr), P(neutral)]` of an image.
pub fn attribute_distribution(world: &World, attribute: &str, image: &ImageTensor, temperature: f64) -> Result<[f64; 2]> {
    let anchors = attribute_anchors(world, attribute)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.tensor().clone())?;
    let e = world.embed_image_on_tape(&mut tape, x)?;
    let lp = attribute_log_probs_on_tape(&mut tape, e, &anchors, temperature)?;
    let v = tape.value(lp).data();
    Ok([v[0].exp(), v[1].exp()])
}

/// Cross-entropy of the counterfactual's distribution against the original's.
pub(crate) fn attribute_ce_on_tape(tape: &mut Tape, log_probs: Var, reference: [f64; 2]) -> Result<Var> {
    let r = tape.constant(Tensor::vector(vec![-reference[0], -reference[1]])?)?;
    tape.dot(r, log_probs)
}

pub fn loss_target_classifier(model: &TargetModel, x_hat: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    if !model.is_classifier() {
        return Err(Error::precondition("classifier loss needs a classifier"));
    }
    let p_hat = 1.0 - model.predict_scalar(x)?;
    let mut tape = Tape::new();
    let v = tape.constant(x_hat.tensor().clone())?;
    let z = model.logits_on_tape(&mut tape, v)?;
    let l = bce_logit_on_tape(&mut tape, z, p_hat)?;
    Ok(tape.value(l).item())
}

pub fn loss_target_keypoint(model: &TargetModel, x_hat: &ImageTensor, targets: &[f64]) -> Result<f64> {
    if model.is_classifier() {
        return Err(Error::precondition("keypoint loss needs a keypoint model"));
    }
    if targets.len() != model.outputs {
        return Err(Error::shape("keypoint_loss", format!("{} targets for {} outputs", targets.len(), model.outputs)));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x_hat.tensor().clone())?;
    let y = model.forward_on_tape(&mut tape, v)?;
    let l = mse_on_tape(&mut tape, y, targets)?;
    Ok(tape.value(l).item())
}

pub fn loss_attr(world: &World, attribute: &str, x_hat: &ImageTensor, x: &ImageTensor, temperature: f64) -> Result<f64> {
    let reference = attribute_distribution(world, attribute, x, temperature)?;
    let anchors = attribute_anchors(world, attribute)?;
    let mut tape = Tape::new();
    let v = tape.constant(x_hat.tensor().clone())?;
    let e = world.embed_image_on_tape(&mut tape, v)?;
    let lp = attribute_log_probs_on_tape(&mut tape, e, &anchors, temperature)?;
    let l = attribute_ce_on_tape(&mut tape, lp, reference)?;
    Ok(tape.value(l).item())
}
