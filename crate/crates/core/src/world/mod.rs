//! Hermetic, seeded stand-in for a pretrained generator, a joint text/image
//! embedder, and the target models they are used to diagnose.
//!
//! The generator is template-additive: feature `j` has intensity
//! `alpha_j(s) = tanh(u_j . s[channels(j)] + b_j)` read from its own pair of
//! style channels, and the image is `squash(base + g * sum_j alpha_j T_j)`.
//! Because channel ownership is disjoint, ground-truth attribute semantics
//! exist and every diagnosis can be checked against them.

mod config;
mod dataset;
mod model;
mod prompts;
mod templates;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{FeatureSpec, TemplateKind, WorldConfig};
pub use dataset::{make_dataset, make_keypoint_dataset, CellCounts, DatasetDesign, LabeledDataset, Sample};
pub use model::{ModelKind, TargetModel};
pub use prompts::{compose_prompt, AttributePhrases, PromptTable};
pub use train::{accuracy, keypoint_error, train_target, TrainHyper, TrainedModel, Trainer, TrainingSummary};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::report::canonical_hash;
use crate::rng::{self, Stream};

/// Point in the generator's style space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `self + delta`, entrywise.
    pub fn shifted(&self, delta: &[f64]) -> Self {
        Self(self.0.iter().zip(delta).map(|(a, b)| a + b).collect())
    }
}

/// Single-channel image of shape `[height, width]` with entries in `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor(pub Tensor);

impl ImageTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn pixels(&self) -> &[f64] {
        self.0.data()
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Unit-norm vector in the joint text/image embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }

    pub fn sub(&self, other: &Embedding) -> Embedding {
        Embedding(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

pub(crate) fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn orthonormal_set(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng::standard_normals(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            for (x, bx) in v.iter_mut().zip(b) {
                *x -= p * bx;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

#[derive(Clone, Debug)]
struct Keypoint {
    feature: usize,
    center: [f64; 2],
    direction: [f64; 2],
}

/// Immutable world; safe to share across concurrent searches.
#[derive(Debug)]
pub struct World {
    config: WorldConfig,
    hash: String,
    templates: Vec<Vec<f64>>,
    mixing: Tensor,
    projection: Tensor,
    readout: Tensor,
    feature_bias: Vec<f64>,
    base: Vec<f64>,
    embed_map: Tensor,
    embed_offset: Vec<f64>,
    neutral_text: Vec<f64>,
    attribute_axes: Vec<Vec<f64>>,
    prompts: PromptTable,
    keypoints: Vec<Keypoint>,
    oracle_reads: AtomicU64,
}

impl Clone for World {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            hash: self.hash.clone(),
            templates: self.templates.clone(),
            mixing: self.mixing.clone(),
            projection: self.projection.clone(),
            readout: self.readout.clone(),
            feature_bias: self.feature_bias.clone(),
            base: self.base.clone(),
            embed_map: self.embed_map.clone(),
            embed_offset: self.embed_offset.clone(),
            neutral_text: self.neutral_text.clone(),
            attribute_axes: self.attribute_axes.clone(),
            prompts: self.prompts.clone(),
            keypoints: self.keypoints.clone(),
            oracle_reads: AtomicU64::new(self.oracle_reads.load(Ordering::Relaxed)),
        }
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let k = config.features.len();
        let pixels = config.height * config.width;
        let (c_s, c_t) = (config.style_dim, config.embed_dim);

        let templates = templates::build_templates(&config);
        let mut mixing = vec![0.0; pixels * k];
        let mut projection = vec![0.0; k * pixels];
        for (j, t) in templates.iter().enumerate() {
            for (p, &v) in t.iter().enumerate() {
                mixing[p * k + j] = config.mixing_gain * v;
                projection[j * pixels + p] = v;
            }
        }

        let mut params = rng::derive(config.seed, Stream::WorldParams, 0);
        let mut readout = vec![0.0; k * c_s];
        for (j, f) in config.features.iter().enumerate() {
            for &c in &f.channels {
                readout[j * c_s + c] = params.random_range(0.6..1.0);
            }
        }
        let feature_bias = config.features.iter().map(|f| f.bias).collect();
        let base = templates::build_base(&config);

        let mut text_rng = rng::derive(config.seed, Stream::WorldParams, 1);
        let mut axes = orthonormal_set(&mut text_rng, k + 1, c_t);
        let neutral_text = axes.remove(0);
        let attribute_axes = axes;

        let mut embed_map = vec![0.0; c_t * k];
        for (j, axis) in attribute_axes.iter().enumerate() {
            for (r, &v) in axis.iter().enumerate() {
                embed_map[r * k + j] = config.embed_gain * v;
            }
        }

        let keypoints = config
            .features
            .iter()
            .enumerate()
            .filter_map(|(j, f)| match f.template {
                TemplateKind::SpotShift { center, direction, .. } => Some(Keypoint {
                    feature: j,
                    center,
                    direction,
                }),
                _ => None,
            })
            .collect();

        let mut world = Self {
            hash: canonical_hash(&config)?,
            templates,
            mixing: Tensor::matrix(pixels, k, mixing)?,
            projection: Tensor::matrix(k, pixels, projection)?,
            readout: Tensor::matrix(k, c_s, readout)?,
            feature_bias,
            base,
            embed_map: Tensor::matrix(c_t, k, embed_map)?,
            embed_offset: vec![0.0; c_t],
            neutral_text,
            attribute_axes,
            prompts: PromptTable::new(config.neutral_prefix.clone()),
            keypoints,
            oracle_reads: AtomicU64::new(0),
            config,
        };

        // Neutral image embeds onto the neutral text direction.
        let neutral_image = world.render_intensities(&vec![0.0; k])?;
        let p0 = crate::autodiff::matvec_values(world.projection.data(), k, pixels, neutral_image.pixels());
        let e_p0 = crate::autodiff::matvec_values(world.embed_map.data(), c_t, k, &p0);
        world.embed_offset = world.neutral_text.iter().zip(&e_p0).map(|(t, e)| t - e).collect();

        world.prompts = world.build_prompts();
        Ok(world)
    }

    fn build_prompts(&self) -> PromptTable {
        let cfg = &self.config;
        let mut table = PromptTable::new(cfg.neutral_prefix.clone());
        table.insert(&cfg.neutral_prefix, Embedding(self.neutral_text.clone()));
        let cap = 3.0 * cfg.prompt_noise;
        for (j, f) in cfg.features.iter().enumerate() {
            let offset: Vec<f64> = self.attribute_axes[j].iter().map(|a| cfg.attribute_strength * a).collect();
            let canonical: Vec<f64> = self.neutral_text.iter().zip(&offset).map(|(t, o)| t + o).collect();
            table.insert(&compose_prompt(&cfg.neutral_prefix, &f.name), Embedding(normalized(canonical.clone())));
            for (i, syn) in f.synonyms.iter().enumerate() {
                let mut noise_rng = rng::derive(cfg.seed, Stream::PromptNoise, (j * 64 + i) as u64);
                let mut eta: Vec<f64> = rng::standard_normals(&mut noise_rng, cfg.embed_dim)
                    .into_iter()
                    .map(|z| cfg.prompt_noise * z)
                    .collect();
                let n = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > cap {
                    eta.iter_mut().for_each(|x| *x *= cap / n);
                }
                let v = canonical.iter().zip(&eta).map(|(c, e)| c + e).collect();
                table.insert(&compose_prompt(&cfg.neutral_prefix, syn), Embedding(normalized(v)));
            }
            table.push_attribute(AttributePhrases {
                canonical: f.name.clone(),
                synonyms: f.synonyms.clone(),
            });
        }
        table
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    /// Hash of the canonical serialized configuration.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    pub fn num_features(&self) -> usize {
        self.config.features.len()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.config.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn feature_index(&self, attribute: &str) -> Result<usize> {
        self.config
            .features
            .iter()
            .position(|f| f.name == attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    pub fn channels(&self, feature: usize) -> [usize; 2] {
        self.config.features[feature].channels
    }

    pub fn templates(&self) -> &[Vec<f64>] {
        &self.templates
    }

    pub fn prompts(&self) -> &PromptTable {
        &self.prompts
    }

    pub fn neutral_prefix(&self) -> &str {
        &self.config.neutral_prefix
    }

    /// Unit axis along which attribute `feature` moves text and image embeddings.
    pub fn attribute_axis(&self, feature: usize) -> Embedding {
        Embedding(self.attribute_axes[feature].clone())
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    /// Draws from the style prior `N(0, I)` for cell `(seed, stream, index)`.
    pub fn sample_style(&self, stream: Stream, index: u64) -> StyleVector {
        let mut r = rng::derive(self.config.seed, stream, index);
        StyleVector(rng::standard_normals(&mut r, self.config.style_dim))
    }

    pub fn sample_style_with(&self, rng: &mut ChaCha8Rng) -> StyleVector {
        StyleVector(rng::standard_normals(rng, self.config.style_dim))
    }

    fn check_style(&self, s: &StyleVector) -> Result<()> {
        if s.dim() != self.config.style_dim {
            return Err(Error::shape(
                "render",
                format!("style has {} entries, world expects {}", s.dim(), self.config.style_dim),
            ));
        }
        Ok(())
    }

    /// Feature intensities `alpha(s)` without touching the oracle access counter.
    pub(crate) fn intensities(&self, s: &StyleVector) -> Result<Vec<f64>> {
        self.check_style(s)?;
        let k = self.num_features();
        let pre = crate::autodiff::matvec_values(self.readout.data(), k, self.config.style_dim, s.values());
        Ok(pre.iter().zip(&self.feature_bias).map(|(a, b)| (a + b).tanh()).collect())
    }

    /// Ground-truth intensity of one attribute, exactly as the renderer uses it.
    pub fn oracle_intensity(&self, s: &StyleVector, attribute: &str) -> Result<f64> {
        let j = self.feature_index(attribute)?;
        self.oracle_reads.fetch_add(1, Ordering::Relaxed);
        Ok(self.intensities(s)?[j])
    }

    /// Number of [`World::oracle_intensity`] calls so far.
    pub fn oracle_reads(&self) -> u64 {
        self.oracle_reads.load(Ordering::Relaxed)
    }

    /// Ground-truth keypoints `[x0, y0, x1, y1, ...]` in normalized coordinates.
    pub fn keypoints(&self, s: &StyleVector) -> Result<Vec<f64>> {
        let alpha = self.intensities(s)?;
        Ok(self.keypoints_from_intensities(&alpha))
    }

    pub(crate) fn keypoints_from_intensities(&self, alpha: &[f64]) -> Vec<f64> {
        let travel = self.config.keypoint_travel;
        self.keypoints
            .iter()
            .flat_map(|kp| {
                let a = alpha[kp.feature];
                [
                    (kp.center[0] + travel * a * kp.direction[0]).clamp(0.0, 1.0),
                    (kp.center[1] + travel * a * kp.direction[1]).clamp(0.0, 1.0),
                ]
            })
            .collect()
    }

    /// Records `alpha(s)` on a tape.
    pub fn intensities_on_tape(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let readout = tape.constant(self.readout.clone())?;
        let pre = tape.matvec(readout, s)?;
        let bias = tape.constant(Tensor::vector(self.feature_bias.clone())?)?;
        let shifted = tape.add(pre, bias)?;
        tape.tanh(shifted)
    }

    /// Records the image for given feature intensities; output shape `[height, width]`.
    pub fn render_intensities_on_tape(&self, tape: &mut Tape, alpha: Var) -> Result<Var> {
        let mixing = tape.constant(self.mixing.clone())?;
        let mix = tape.matvec(mixing, alpha)?;
        let base = tape.constant(Tensor::vector(self.base.clone())?)?;
        let z = tape.add(mix, base)?;
        let image = tape.squash(z)?;
        tape.reshape(image, &[self.config.height, self.config.width])
    }

    /// Records `G(s)` on a tape.
    pub fn render_on_tape(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        if tape.value(s).len() != self.config.style_dim {
            return Err(Error::shape(
                "render",
                format!("style has {} entries, world expects {}", tape.value(s).len(), self.config.style_dim),
            ));
        }
        let alpha = self.intensities_on_tape(tape, s)?;
        self.render_intensities_on_tape(tape, alpha)
    }

    pub fn render(&self, s: &StyleVector) -> Result<ImageTensor> {
        self.check_style(s)?;
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::vector(s.0.clone())?)?;
        let image = self.render_on_tape(&mut tape, sv)?;
        Ok(ImageTensor(tape.value(image).clone()))
    }

    pub fn render_intensities(&self, alpha: &[f64]) -> Result<ImageTensor> {
        if alpha.len() != self.num_features() {
            return Err(Error::shape("render", format!("{} intensities for {} features", alpha.len(), self.num_features())));
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(alpha.to_vec())?)?;
        let image = self.render_intensities_on_tape(&mut tape, a)?;
        Ok(ImageTensor(tape.value(image).clone()))
    }

    /// Records the image-side embedding of an image node.
    pub fn embed_image_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let pixels = self.config.height * self.config.width;
        if tape.value(image).len() != pixels {
            return Err(Error::shape(
                "embed_image",
                format!("image has {} pixels, world expects {pixels}", tape.value(image).len()),
            ));
        }
        let flat = tape.reshape(image, &[pixels])?;
        let projection = tape.constant(self.projection.clone())?;
        let p = tape.matvec(projection, flat)?;
        let map = tape.constant(self.embed_map.clone())?;
        let e = tape.matvec(map, p)?;
        let offset = tape.constant(Tensor::vector(self.embed_offset.clone())?)?;
        let v = tape.add(e, offset)?;
        tape.normalize(v)
    }

    pub fn embed_image(&self, image: &ImageTensor) -> Result<Embedding> {
        let (h, w) = self.extent();
        if image.tensor().shape() != [h, w] {
            return Err(Error::shape("embed_image", format!("image extent {:?}, world is {h}x{w}", image.tensor().shape())));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.0.clone())?;
        let e = self.embed_image_on_tape(&mut tape, x)?;
        Ok(Embedding(tape.value(e).data().to_vec()))
    }

    pub fn embed_text(&self, prompt: &str) -> Result<Embedding> {
        self.prompts.lookup(prompt).cloned()
    }

    /// Projections of an image onto each feature template.
    pub fn template_projections(&self, image: &ImageTensor) -> Vec<f64> {
        let pixels = self.config.height * self.config.width;
        crate::autodiff::matvec_values(self.projection.data(), self.num_features(), pixels, image.pixels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let w = world();
        assert_eq!(w.sample_style(Stream::Prior, 0), w.sample_style(Stream::Prior, 0));
        assert_ne!(w.sample_style(Stream::Prior, 0), w.sample_style(Stream::Prior, 1));
    }

    #[test]
    fn prior_moments() {
        let w = world();
        let n = 10_000;
        let samples: Vec<StyleVector> = (0..n).map(|i| w.sample_style(Stream::Prior, i as u64)).collect();
        for c in 0..w.style_dim() {
            let mean = samples.iter().map(|s| s.0[c]).sum::<f64>() / n as f64;
            let var = samples.iter().map(|s| (s.0[c] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 0.05, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() <= 0.05, "channel {c} var {var}");
        }
    }

    #[test]
    fn zero_style_renders_bias_fixed_point() {
        let mut config = WorldConfig::default();
        config.features[0].bias = 0.3;
        let w = World::new(config).unwrap();
        let s = StyleVector::zeros(w.style_dim());
        let img = w.render(&s).unwrap();
        let mut alpha = vec![0.0; w.num_features()];
        alpha[0] = 0.3f64.tanh();
        assert_eq!(img, w.render_intensities(&alpha).unwrap());
        assert_eq!(img, w.render(&s).unwrap());
        assert_eq!(w.oracle_intensity(&s, "stripes").unwrap(), 0.3f64.tanh());
        assert!(img.pixels().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn owned_channel_perturbation_moves_own_template_most() {
        let w = world();
        for seed in 0..100 {
            let s = w.sample_style(Stream::Custom(99), seed);
            let base = w.template_projections(&w.render(&s).unwrap());
            for j in 0..w.num_features() {
                let mut moved = s.clone();
                for c in w.channels(j) {
                    moved.0[c] += 1.0;
                }
                let after = w.template_projections(&w.render(&moved).unwrap());
                let change: Vec<f64> = after.iter().zip(&base).map(|(a, b)| (a - b).abs()).collect();
                for k in 0..w.num_features() {
                    if k != j {
                        assert!(change[j] > change[k], "seed {seed} feature {j} vs {k}: {change:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_pure() {
        let w = world();
        let s = w.sample_style(Stream::Prior, 3);
        let img = w.render(&s).unwrap();
        let e = w.embed_image(&img).unwrap();
        assert!((e.norm() - 1.0).abs() <= 1e-9);
        assert_eq!(e, w.embed_image(&img).unwrap());
        for prompt in w.prompts().prompts() {
            assert!((w.embed_text(prompt).unwrap().norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_a_feature_moves_embedding_toward_its_prompt() {
        let w = world();
        for j in 0..w.num_features() {
            let text = w.embed_text(&compose_prompt(w.neutral_prefix(), &w.feature_names()[j])).unwrap();
            let mut previous = f64::NEG_INFINITY;
            for step in 0..=16 {
                let mut alpha = vec![0.0; w.num_features()];
                alpha[j] = -0.8 + 0.1 * step as f64;
                let e = w.embed_image(&w.render_intensities(&alpha).unwrap()).unwrap();
                let cos = e.cosine(&text);
                assert!(cos > previous, "feature {j} step {step}");
                previous = cos;
            }
        }
    }

    #[test]
    fn text_deltas() {
        let w = world();
        let p = w.neutral_prefix();
        let neutral = w.embed_text(p).unwrap();
        assert!(neutral.sub(&neutral).values().iter().all(|&v| v == 0.0));
        let stripes = w.embed_text(&compose_prompt(p, "stripes")).unwrap();
        let axis = w.attribute_axis(w.feature_index("stripes").unwrap());
        assert!(stripes.sub(&neutral).cosine(&axis) >= 0.95);
        assert!(matches!(w.embed_text("a canvas with wings"), Err(Error::UnknownPrompt(_))));
    }

    #[test]
    fn synonym_noise_is_bounded() {
        let w = world();
        let cfg = w.config();
        for (j, f) in cfg.features.iter().enumerate() {
            let canonical_raw: Vec<f64> = w
                .neutral_text
                .iter()
                .zip(&w.attribute_axes[j])
                .map(|(t, a)| t + cfg.attribute_strength * a)
                .collect();
            let scale = canonical_raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let canonical = w.embed_text(&compose_prompt(p(&w), &f.name)).unwrap();
            for syn in &f.synonyms {
                let e = w.embed_text(&compose_prompt(p(&w), syn)).unwrap();
                // The synonym is normalize(raw + eta); recover eta's norm bound through the angle.
                let diff = e.sub(&canonical).norm();
                assert!(diff <= 2.0 * 3.0 * cfg.prompt_noise / scale, "{syn}: {diff}");
            }
        }
        fn p(w: &World) -> &str {
            w.neutral_prefix()
        }
    }

    #[test]
    fn oracle_ignores_foreign_channels_and_counts_reads() {
        let w = world();
        let s = w.sample_style(Stream::Prior, 5);
        let j = w.feature_index("ring").unwrap();
        let mut other = s.clone();
        for c in 0..w.style_dim() {
            if !w.channels(j).contains(&c) {
                other.0[c] += 2.5;
            }
        }
        let before = w.oracle_reads();
        assert_eq!(w.oracle_intensity(&s, "ring").unwrap(), w.oracle_intensity(&other, "ring").unwrap());
        assert_eq!(w.oracle_reads(), before + 2);
        assert!(matches!(w.oracle_intensity(&s, "wings"), Err(Error::UnknownAttribute(_))));
    }

    #[test]
    fn intensity_gradient_is_zero_off_owned_channels() {
        let w = world();
        let s = w.sample_style(Stream::Prior, 8);
        for j in 0..w.num_features() {
            let mut tape = Tape::new();
            let sv = tape.variable(Tensor::vector(s.0.clone()).unwrap()).unwrap();
            let alpha = w.intensities_on_tape(&mut tape, sv).unwrap();
            let aj = tape.slice(alpha, j, 1).unwrap();
            let loss = tape.sum(aj).unwrap();
            let g = tape.backward(loss, &[sv]).unwrap();
            for (c, &v) in g.get(sv).unwrap().data().iter().enumerate() {
                if !w.channels(j).contains(&c) {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v != 0.0);
                }
            }
        }
    }

    #[test]
    fn intensity_matches_projection_regression() {
        let w = world();
        for j in 0..w.num_features() {
            let name = w.feature_names()[j].to_string();
            let pts: Vec<(f64, f64)> = (0..100)
                .map(|i| {
                    let s = w.sample_style(Stream::Custom(5), i);
                    let a = w.oracle_intensity(&s, &name).unwrap();
                    let p = w.template_projections(&w.render(&s).unwrap())[j];
                    (a, p)
                })
                .collect();
            let n = pts.len() as f64;
            let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
            let r2 = sxy * sxy / (sxx * syy);
            assert!(r2 >= 0.99, "{name}: r2 = {r2}");
        }
    }
}
