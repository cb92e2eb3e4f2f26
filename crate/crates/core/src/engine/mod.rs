//! Counterfactual search: a clamped gradient descent over edit strengths that
//! flips the target model while keeping the image and the diagnosed
//! attribute's embedding score close to the original.

mod loss;

use serde::{Deserialize, Serialize};

pub use loss::{
    attribute_distribution, loss_attr, loss_target_classifier, loss_target_keypoint, psnr, ssim, ssim_on_tape,
    total_loss, LossTerms, LossWeights, SSIM_C1, SSIM_C2, SSIM_WINDOW,
};

use crate::autodiff::{Tape, Tensor, Var};
use crate::direction::AttributeSpace;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::world::{ImageTensor, ModelKind, StyleVector, TargetModel, World};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `w - eta * grad`
    #[default]
    Plain,
    /// `w - eta * sign(grad)`
    Signed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// Weights over the normalized edit directions.
    #[default]
    Attribute,
    /// One weight per style channel.
    RawStyle,
    /// The ground-truth intensities of the space's attributes, bounded to `[-1, 1]`.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub step_size: f64,
    pub bound: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub space: SpaceKind,
    pub flip_threshold: f64,
    /// Mean keypoint displacement that counts as a flip for keypoint models.
    pub keypoint_flip_distance: f64,
    pub weights: LossWeights,
    pub temperature: f64,
    pub keypoint_seed: u64,
    /// Attribute the model predicts; its embedding score is held fixed.
    pub diag_attribute: Option<String>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            step_size: 0.2,
            bound: 30.0,
            iterations: 100,
            optimizer: OptimizerKind::Plain,
            space: SpaceKind::Attribute,
            flip_threshold: 0.5,
            keypoint_flip_distance: 0.25,
            weights: LossWeights::default(),
            temperature: 0.1,
            keypoint_seed: 0,
            diag_attribute: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be nonnegative, got {}", self.step_size)));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Config(format!("bound must be positive, got {}", self.bound)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.weights.validate()
    }
}

/// One evaluated iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub terms: LossTerms,
    pub loss: f64,
    pub output: Vec<f64>,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub space: SpaceKind,
    pub original_style: StyleVector,
    /// Final edited style; `None` for oracle-space searches.
    pub edited_style: Option<StyleVector>,
    pub weights: Vec<f64>,
    pub best_iteration: usize,
    pub trace: Vec<TraceStep>,
    pub original_image: ImageTensor,
    pub counterfactual_image: ImageTensor,
    pub original_output: Vec<f64>,
    pub counterfactual_output: Vec<f64>,
    pub flipped: bool,
    pub ssim: f64,
    pub psnr: f64,
}

impl CounterfactualResult {
    pub fn loss(&self) -> f64 {
        self.trace[self.best_iteration].loss
    }

    /// Whether any of the first `budget` iterates flipped the model.
    pub fn flipped_within(&self, budget: usize) -> bool {
        self.trace.iter().take(budget).any(|t| t.flipped)
    }

    /// Mean absolute change of the model outputs.
    pub fn output_change(&self) -> f64 {
        let n = self.original_output.len() as f64;
        self.original_output.iter().zip(&self.counterfactual_output).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    /// CSV with one row per iterate.
    pub fn trace_csv(&self) -> String {
        let n = self.weights.len();
        let outs = self.original_output.len();
        let mut header: Vec<String> = vec!["iteration".into()];
        header.extend((0..n).map(|i| format!("w{i}")));
        header.extend(["l_target", "l_struct", "l_attr", "total"].map(String::from));
        header.extend((0..outs).map(|i| format!("output{i}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .trace
            .iter()
            .map(|t| {
                let mut row = vec![t.iteration.to_string()];
                row.extend(t.weights.iter().map(|&v| crate::report::fmt_real(v)));
                for v in [t.terms.target, t.terms.structure, t.terms.attribute, t.loss] {
                    row.push(crate::report::fmt_real(v));
                }
                row.extend(t.output.iter().map(|&v| crate::report::fmt_real(v)));
                row
            })
            .collect();
        crate::report::csv_text(&header_refs, &rows)
    }
}

/// Everything in a search that does not depend on the search variable.
struct Problem<'a> {
    world: &'a World,
    model: &'a TargetModel,
    config: &'a SearchConfig,
    style: Tensor,
    kind: SpaceKind,
    /// `[c_S, N]` direction matrix for attribute searches.
    directions: Option<Tensor>,
    /// Intensities of the original, and the feature index of each search coordinate (oracle searches).
    alpha: Vec<f64>,
    oracle_features: Vec<usize>,
    original: ImageTensor,
    original_output: Vec<f64>,
    flip_reference: Vec<f64>,
    target_prob: f64,
    keypoint_targets: Vec<f64>,
    anchors: Option<(Tensor, [f64; 2])>,
    start: Vec<f64>,
    lo: f64,
    hi: f64,
}

fn style_key(s: &StyleVector) -> u64 {
    s.values().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3))
}

/// Keypoint targets for a search from `style`, drawn from `N(0.5, 0.25^2)` and clipped.
pub fn keypoint_targets(seed: u64, style: &StyleVector, count: usize) -> Vec<f64> {
    let mut r = rng::derive(seed, Stream::KeypointTargets, style_key(style));
    rng::standard_normals(&mut r, count).into_iter().map(|z| (0.5 + 0.25 * z).clamp(0.0, 1.0)).collect()
}

impl<'a> Problem<'a> {
    fn new(world: &'a World, model: &'a TargetModel, space: &AttributeSpace, s: &StyleVector, config: &'a SearchConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let (h, w) = world.extent();
        if model.input_dim != h * w {
            return Err(Error::precondition(format!("model expects {} pixels, world renders {}", model.input_dim, h * w)));
        }
        let original = world.render(s)?;
        let original_output = model.predict(&original)?;
        let kind = config.space;
        if kind != SpaceKind::RawStyle && space.is_empty() {
            return Err(Error::precondition("attribute space is empty"));
        }
        let (mut directions, mut alpha, mut oracle_features) = (None, Vec::new(), Vec::new());
        let (start, lo, hi) = match kind {
            SpaceKind::Attribute => {
                if space.style_dim() != world.style_dim() {
                    return Err(Error::shape("search", "attribute space does not match the world's style dimension"));
                }
                directions = Some(Tensor::matrix(space.style_dim(), space.len(), space.direction_matrix())?);
                (vec![0.0; space.len()], -config.bound, config.bound)
            }
            SpaceKind::RawStyle => (vec![0.0; world.style_dim()], -config.bound, config.bound),
            SpaceKind::Oracle => {
                alpha = world.intensities(s)?;
                let mut start = Vec::with_capacity(space.len());
                for name in space.names() {
                    oracle_features.push(world.feature_index(name)?);
                    start.push(world.oracle_intensity(s, name)?);
                }
                (start, -1.0, 1.0)
            }
        };
        let (flip_reference, keypoint_targets, target_prob) = match model.kind {
            ModelKind::Classifier => (original_output.clone(), Vec::new(), 1.0 - original_output[0]),
            ModelKind::Keypoint => {
                (original_output.clone(), keypoint_targets(config.keypoint_seed, s, model.outputs), 0.0)
            }
        };
        let anchors = match &config.diag_attribute {
            Some(attr) => {
                let reference = attribute_distribution(world, attr, &original, config.temperature)?;
                Some((loss::attribute_anchors(world, attr)?, reference))
            }
            None => None,
        };
        Ok(Self {
            world,
            model,
            config,
            style: Tensor::vector(s.values().to_vec())?,
            kind,
            directions,
            alpha,
            oracle_features,
            original,
            original_output,
            flip_reference,
            target_prob,
            keypoint_targets,
            anchors,
            start,
            lo,
            hi,
        })
    }

    /// Image node and, for style spaces, the edited style node.
    fn image_on_tape(&self, tape: &mut Tape, v: Var) -> Result<(Var, Option<Var>)> {
        let world = self.world;
        match self.kind {
            SpaceKind::Attribute | SpaceKind::RawStyle => {
                let s = tape.constant(self.style.clone())?;
                let delta = match &self.directions {
                    Some(d) => {
                        let d = tape.constant(d.clone())?;
                        tape.matvec(d, v)?
                    }
                    None => v,
                };
                let edited = tape.add(s, delta)?;
                Ok((world.render_on_tape(tape, edited)?, Some(edited)))
            }
            SpaceKind::Oracle => {
                let k = self.alpha.len();
                let n = self.oracle_features.len();
                let mut select = vec![0.0; k * n];
                let mut base = self.alpha.clone();
                for (i, &j) in self.oracle_features.iter().enumerate() {
                    select[j * n + i] = 1.0;
                    base[j] = 0.0;
                }
                let select = tape.constant(Tensor::matrix(k, n, select)?)?;
                let placed = tape.matvec(select, v)?;
                let base = tape.constant(Tensor::vector(base)?)?;
                let alpha = tape.add(base, placed)?;
                Ok((world.render_intensities_on_tape(tape, alpha)?, None))
            }
        }
    }

    fn is_flip(&self, output: &[f64]) -> bool {
        match self.model.kind {
            ModelKind::Classifier => {
                let t = self.config.flip_threshold;
                (output[0] > t) != (self.flip_reference[0] > t)
            }
            ModelKind::Keypoint => {
                let d: f64 = output
                    .chunks(2)
                    .zip(self.flip_reference.chunks(2))
                    .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                    .sum::<f64>()
                    / (output.len() / 2) as f64;
                d > self.config.keypoint_flip_distance
            }
        }
    }

    /// Loss terms, model output and gradient at `w`.
    fn evaluate(&self, w: &[f64]) -> Result<(LossTerms, f64, Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let v = tape.variable(Tensor::vector(w.to_vec())?)?;
        let (x_hat, _) = self.image_on_tape(&mut tape, v)?;

        let (target_term, output) = match self.model.kind {
            ModelKind::Classifier => {
                let z = self.model.logits_on_tape(&mut tape, x_hat)?;
                let y = tape.sigmoid(z)?;
                (loss::bce_logit_on_tape(&mut tape, z, self.target_prob)?, y)
            }
            ModelKind::Keypoint => {
                let y = self.model.forward_on_tape(&mut tape, x_hat)?;
                (loss::mse_on_tape(&mut tape, y, &self.keypoint_targets)?, y)
            }
        };

        let x = tape.constant(self.original.tensor().clone())?;
        let s = ssim_on_tape(&mut tape, x_hat, x)?;
        let neg = tape.neg(s)?;
        let struct_term = tape.shift(neg, 1.0)?;

        let attr_term = match &self.anchors {
            Some((anchors, reference)) => {
                let e = self.world.embed_image_on_tape(&mut tape, x_hat)?;
                let lp = loss::attribute_log_probs_on_tape(&mut tape, e, anchors, self.config.temperature)?;
                loss::attribute_ce_on_tape(&mut tape, lp, *reference)?
            }
            None => tape.constant(Tensor::vector(vec![0.0])?)?,
        };

        let total = loss::weighted_sum_on_tape(&mut tape, [target_term, struct_term, attr_term], &self.config.weights)?;
        let grads = tape.backward(total, &[v])?;
        let grad = grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; w.len()]);
        let terms = LossTerms {
            target: tape.value(target_term).item(),
            structure: tape.value(struct_term).item(),
            attribute: tape.value(attr_term).item(),
        };
        Ok((terms, tape.value(total).item(), tape.value(output).data().to_vec(), grad))
    }

    fn render(&self, w: &[f64]) -> Result<(ImageTensor, Option<StyleVector>)> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(w.to_vec())?)?;
        let (x, s) = self.image_on_tape(&mut tape, v)?;
        let style = s.map(|s| StyleVector(tape.value(s).data().to_vec()));
        Ok((ImageTensor(tape.value(x).clone()), style))
    }
}

/// Searches for the counterfactual of `s` in the configured space.
///
/// Starts at the original image, records every evaluated iterate and returns
/// the iterate with the lowest loss.
pub fn search_counterfactual(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    s: &StyleVector,
    config: &SearchConfig,
) -> Result<CounterfactualResult> {
    let problem = Problem::new(world, model, space, s, config)?;
    let mut w = problem.start.clone();
    let mut trace: Vec<TraceStep> = Vec::with_capacity(config.iterations);
    let mut best = 0usize;
    for t in 0..config.iterations {
        let (terms, loss, output, grad) = match problem.evaluate(&w) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(trace)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(trace));
        }
        let flipped = problem.is_flip(&output);
        trace.push(TraceStep { iteration: t, weights: w.clone(), terms, loss, output, flipped });
        if loss < trace[best].loss {
            best = t;
        }
        if t + 1 == config.iterations {
            break;
        }
        let eta = config.step_size;
        for (wi, g) in w.iter_mut().zip(&grad) {
            let step = match config.optimizer {
                OptimizerKind::Plain => eta * g,
                OptimizerKind::Signed => eta * sign(*g),
            };
            *wi = (*wi - step).clamp(problem.lo, problem.hi);
        }
    }

    let chosen = &trace[best];
    let (image, edited_style) = problem.render(&chosen.weights)?;
    let ssim_value = ssim(&image, &problem.original)?;
    let psnr_value = psnr(&image, &problem.original)?;
    Ok(CounterfactualResult {
        space: config.space,
        original_style: s.clone(),
        edited_style,
        weights: chosen.weights.clone(),
        best_iteration: best,
        original_output: problem.original_output.clone(),
        counterfactual_output: chosen.output.clone(),
        flipped: chosen.flipped,
        original_image: problem.original,
        counterfactual_image: image,
        ssim: ssim_value,
        psnr: psnr_value,
        trace,
    })
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn diverged(trace: Vec<TraceStep>) -> Error {
    Error::SearchDiverged { trace_len: trace.len(), trace }
}

/// Loss terms and total at the fixed weights `w`, without searching.
///
/// Exposed for gradient checks of the full objective.
pub fn objective(
    world: &World,
    model: &TargetModel,
    space: &AttributeSpace,
    s: &StyleVector,
    config: &SearchConfig,
    w: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let problem = Problem::new(world, model, space, s, config)?;
    if w.len() != problem.start.len() {
        return Err(Error::shape("objective", format!("{} weights for a {}-dimensional space", w.len(), problem.start.len())));
    }
    let (_, loss, _, grad) = problem.evaluate(w)?;
    Ok((loss, grad))
}
