use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::INPUT_CENTER;
use super::{ModelKind, Sample, TargetModel};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Every `holdout_every`-th sample is held out; 0 disables the split.
    pub holdout_every: usize,
    /// Stop once the epoch loss improved by less than this over `patience` epochs.
    pub plateau_tolerance: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            hidden: 8,
            learning_rate: 1e-3,
            max_epochs: 60,
            batch_size: 32,
            holdout_every: 5,
            plateau_tolerance: 1e-4,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
    /// Classification accuracy, or mean keypoint L2 error for keypoint models.
    pub train_metric: f64,
    pub heldout_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: TargetModel,
    pub summary: TrainingSummary,
}

/// Adam on the perceptron parameters, with hand-derived batched gradients.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: TargetModel,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    iteration: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Trainer {
    pub fn new(model: TargetModel, learning_rate: f64) -> Self {
        let n = model.w1.len() + model.b1.len() + model.w2.len() + model.b2.len();
        Self {
            model,
            learning_rate,
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
            iteration: 0,
        }
    }

    /// Fresh randomly initialized perceptron.
    pub fn init(kind: ModelKind, input_dim: usize, outputs: usize, hyper: &TrainHyper) -> Self {
        let mut r = rng::derive(hyper.seed, Stream::Trainer, 0);
        let s1 = (1.0 / input_dim as f64).sqrt();
        let s2 = (1.0 / hyper.hidden as f64).sqrt();
        let w1 = rng::standard_normals(&mut r, hyper.hidden * input_dim).into_iter().map(|z| z * s1).collect();
        let w2 = rng::standard_normals(&mut r, outputs * hyper.hidden).into_iter().map(|z| z * s2).collect();
        let model = TargetModel {
            kind,
            input_dim,
            hidden: hyper.hidden,
            outputs,
            w1,
            b1: vec![0.0; hyper.hidden],
            w2,
            b2: vec![0.0; outputs],
        };
        Self::new(model, hyper.learning_rate)
    }

    pub fn model(&self) -> &TargetModel {
        &self.model
    }

    pub fn into_model(self) -> TargetModel {
        self.model
    }

    /// Mean loss and its gradient over a batch, flattened as `[w1, b1, w2, b2]`.
    pub fn batch_gradient(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Vec<f64>)> {
        let m = &self.model;
        let (d, hdim, o) = (m.input_dim, m.hidden, m.outputs);
        let (n_w1, n_b1, n_w2) = (hdim * d, hdim, o * hdim);
        let mut grad = vec![0.0; n_w1 + n_b1 + n_w2 + o];
        let mut total_loss = 0.0;
        let mut xc = vec![0.0; d];
        let mut h = vec![0.0; hdim];
        let mut gate = vec![0.0; hdim];
        let mut dz = vec![0.0; o];

        for (pixels, target) in batch {
            if pixels.len() != d || target.len() != o {
                return Err(Error::shape("train", format!("sample of {} pixels / {} targets", pixels.len(), target.len())));
            }
            for (c, &p) in xc.iter_mut().zip(pixels.iter()) {
                *c = p - INPUT_CENTER;
            }
            for k in 0..hdim {
                let row = &m.w1[k * d..(k + 1) * d];
                let pre: f64 = row.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>() + m.b1[k];
                h[k] = softplus(pre);
                gate[k] = crate::autodiff::sigmoid_scalar(pre);
            }
            for q in 0..o {
                let z: f64 = m.w2[q * hdim..(q + 1) * hdim].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + m.b2[q];
                let y = crate::autodiff::sigmoid_scalar(z);
                let t = target[q];
                match m.kind {
                    ModelKind::Classifier => {
                        // softplus(z) - t z
                        total_loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
                        dz[q] = y - t;
                    }
                    ModelKind::Keypoint => {
                        total_loss += (y - t).powi(2) / o as f64;
                        dz[q] = 2.0 * (y - t) / o as f64 * y * (1.0 - y);
                    }
                }
            }
            let (g_w1, rest) = grad.split_at_mut(n_w1);
            let (g_b1, rest) = rest.split_at_mut(n_b1);
            let (g_w2, g_b2) = rest.split_at_mut(n_w2);
            for k in 0..hdim {
                let mut dh = 0.0;
                for q in 0..o {
                    g_w2[q * hdim + k] += dz[q] * h[k];
                    dh += m.w2[q * hdim + k] * dz[q];
                }
                let dpre = dh * gate[k];
                g_b1[k] += dpre;
                for (r, &x) in g_w1[k * d..(k + 1) * d].iter_mut().zip(&xc) {
                    *r += dpre * x;
                }
            }
            for q in 0..o {
                g_b2[q] += dz[q];
            }
        }
        let n = batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total_loss / n, grad))
    }

    /// One Adam step on a mini-batch of `(pixels, target)` pairs; returns the mean loss.
    pub fn step_batch(&mut self, batch: &[(&[f64], &[f64])]) -> Result<f64> {
        let (loss, grad) = self.batch_gradient(batch)?;
        self.iteration += 1;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: self.iteration });
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let lr = self.learning_rate;
        let model = &mut self.model;
        let params = model
            .w1
            .iter_mut()
            .chain(model.b1.iter_mut())
            .chain(model.w2.iter_mut())
            .chain(model.b2.iter_mut());
        for (j, (p, g)) in params.zip(&grad).enumerate() {
            self.first[j] = BETA1 * self.first[j] + (1.0 - BETA1) * g;
            self.second[j] = BETA2 * self.second[j] + (1.0 - BETA2) * g * g;
            let mhat = self.first[j] / bc1;
            let vhat = self.second[j] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            if !p.is_finite() {
                return Err(Error::TrainingDiverged { iteration: self.iteration });
            }
        }
        Ok(loss)
    }

    /// One pass over `samples` in the given order, `batch_size` at a time.
    pub fn epoch(&mut self, samples: &[(&[f64], &[f64])], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in samples.chunks(batch_size.max(1)) {
            total += self.step_batch(chunk)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fraction of samples whose thresholded prediction matches the thresholded target.
pub fn accuracy(model: &TargetModel, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        let p = model.predict_scalar(&s.image)?;
        if (p > 0.5) == (s.target[0] > 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean per-keypoint L2 distance between prediction and target.
pub fn keypoint_error(model: &TargetModel, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let p = model.predict(&s.image)?;
        for (a, b) in p.chunks(2).zip(s.target.chunks(2)) {
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub(crate) fn metric(model: &TargetModel, samples: &[&Sample]) -> Result<f64> {
    match model.kind {
        ModelKind::Classifier => accuracy(model, samples),
        ModelKind::Keypoint => keypoint_error(model, samples),
    }
}

/// Trains a fresh perceptron on `dataset`, holding out every `holdout_every`-th sample.
pub fn train_target(dataset: &super::LabeledDataset, kind: ModelKind, hyper: &TrainHyper) -> Result<TrainedModel> {
    if dataset.is_empty() {
        return Err(Error::precondition("cannot train on an empty dataset"));
    }
    if hyper.batch_size == 0 || hyper.hidden == 0 {
        return Err(Error::Config("batch_size and hidden must be positive".into()));
    }
    let first = &dataset.samples[0];
    let outputs = first.target.len();
    match kind {
        ModelKind::Classifier => {
            if dataset.samples.iter().any(|s| s.target.len() != 1 || !(0.0..=1.0).contains(&s.target[0])) {
                return Err(Error::precondition("classifier training needs one label in [0, 1] per sample"));
            }
        }
        ModelKind::Keypoint => {
            if outputs == 0 || outputs % 2 != 0 || dataset.samples.iter().any(|s| s.target.len() != outputs) {
                return Err(Error::precondition("keypoint training needs 2P coordinates per sample"));
            }
        }
    }

    let (mut train, mut heldout): (Vec<&Sample>, Vec<&Sample>) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples.iter().enumerate() {
        if hyper.holdout_every > 1 && i % hyper.holdout_every == hyper.holdout_every - 1 {
            heldout.push(s);
        } else {
            train.push(s);
        }
    }

    let input_dim = first.image.pixels().len();
    let mut trainer = Trainer::init(kind, input_dim, outputs, hyper);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<f64> = Vec::new();
    let mut epochs = 0;
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng::derive(hyper.seed, Stream::Trainer, 1 + epoch as u64));
        let batch: Vec<(&[f64], &[f64])> = order
            .iter()
            .map(|&i| (train[i].image.pixels(), train[i].target.as_slice()))
            .collect();
        let loss = trainer.epoch(&batch, hyper.batch_size)?;
        history.push(loss);
        epochs = epoch + 1;
        if history.len() > hyper.patience {
            let past = history[history.len() - 1 - hyper.patience];
            if past - loss < hyper.plateau_tolerance {
                break;
            }
        }
    }
    let model = trainer.into_model();
    let summary = TrainingSummary {
        epochs,
        final_loss: *history.last().unwrap_or(&0.0),
        train_samples: train.len(),
        heldout_samples: heldout.len(),
        train_metric: metric(&model, &train)?,
        heldout_metric: metric(&model, &heldout)?,
    };
    Ok(TrainedModel { model, summary })
}
