use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a feature template on the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateKind {
    /// Horizontal bands, `sin(2 pi f y)`.
    Stripes { frequency: f64 },
    /// `sin(2 pi f x) sin(2 pi f y)`.
    Checkers { frequency: f64 },
    /// Gaussian annulus around the centre.
    Ring { radius: f64, width: f64 },
    /// Linear ramp along a direction.
    Ramp { angle: f64 },
    /// Derivative of a Gaussian spot along `(dx, dy)`; adding it displaces the
    /// spot, which makes the spot centre a keypoint.
    SpotShift {
        center: [f64; 2],
        direction: [f64; 2],
        sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub template: TemplateKind,
    /// Style channels read by this feature's intensity.
    pub channels: [usize; 2],
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub style_dim: usize,
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the template mix before the range squash.
    pub mixing_gain: f64,
    /// Height of the two background spots that keypoint features move.
    pub spot_amplitude: f64,
    /// Scale of image projections inside the joint embedding.
    pub embed_gain: f64,
    /// Norm of an attribute's offset from the neutral text embedding.
    pub attribute_strength: f64,
    /// Synonym noise scale; synonym offsets are capped at three times this.
    pub prompt_noise: f64,
    /// Keypoint displacement per unit of feature intensity.
    pub keypoint_travel: f64,
    pub neutral_prefix: String,
    pub features: Vec<FeatureSpec>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::with_seed(7)
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        let feature = |name: &str, template, channels, synonyms: &[&str]| FeatureSpec {
            name: name.to_string(),
            template,
            channels,
            bias: 0.0,
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            seed,
            style_dim: 16,
            embed_dim: 12,
            height: 32,
            width: 32,
            mixing_gain: 16.0,
            spot_amplitude: 1.0,
            embed_gain: 0.1,
            attribute_strength: 0.4,
            prompt_noise: 0.02,
            keypoint_travel: 0.2,
            neutral_prefix: "a canvas".to_string(),
            features: vec![
                feature("stripes", TemplateKind::Stripes { frequency: 4.0 }, [0, 1], &["bands", "horizontal lines"]),
                feature("checkers", TemplateKind::Checkers { frequency: 3.0 }, [2, 3], &["a checkerboard", "tiles"]),
                feature("ring", TemplateKind::Ring { radius: 0.3, width: 0.06 }, [4, 5], &["a circle", "a halo"]),
                feature("shading", TemplateKind::Ramp { angle: 0.6 }, [6, 7], &["a gradient", "a ramp"]),
                feature(
                    "drift",
                    TemplateKind::SpotShift { center: [0.3, 0.3], direction: [1.0, 0.0], sigma: 0.1 },
                    [8, 9],
                    &["a sideways spot", "a wandering dot"],
                ),
                feature(
                    "rise",
                    TemplateKind::SpotShift { center: [0.7, 0.7], direction: [0.0, -1.0], sigma: 0.1 },
                    [10, 11],
                    &["a lifted spot", "a climbing dot"],
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.features.is_empty() {
            return bad("world needs at least one feature".into());
        }
        if 2 * self.features.len() > self.style_dim {
            return bad(format!(
                "{} features need {} style channels, style_dim is {}",
                self.features.len(),
                2 * self.features.len(),
                self.style_dim
            ));
        }
        if self.features.len() + 1 > self.embed_dim {
            return bad(format!("embed_dim {} must exceed the feature count {}", self.embed_dim, self.features.len()));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("image extent {}x{} is below 8x8", self.height, self.width));
        }
        for (name, v) in [
            ("mixing_gain", self.mixing_gain),
            ("embed_gain", self.embed_gain),
            ("attribute_strength", self.attribute_strength),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.prompt_noise >= 0.0) {
            return bad(format!("prompt_noise must be nonnegative, got {}", self.prompt_noise));
        }
        let mut owned = vec![false; self.style_dim];
        let mut names = std::collections::BTreeSet::new();
        for f in &self.features {
            if f.name.trim().is_empty() {
                return bad("feature names must be nonempty".into());
            }
            if !names.insert(f.name.as_str()) {
                return bad(format!("duplicate feature `{}`", f.name));
            }
            if f.channels[0] == f.channels[1] {
                return bad(format!("feature `{}` lists channel {} twice", f.name, f.channels[0]));
            }
            for &c in &f.channels {
                if c >= self.style_dim {
                    return bad(format!("feature `{}` channel {c} outside style_dim {}", f.name, self.style_dim));
                }
                if owned[c] {
                    return bad(format!("style channel {c} is assigned to more than one feature"));
                }
                owned[c] = true;
            }
        }
        Ok(())
    }
}
