use std::f64::consts::PI;

use super::config::{TemplateKind, WorldConfig};

fn gaussian(x: f64, y: f64, center: [f64; 2], sigma: f64) -> f64 {
    let dx = x - center[0];
    let dy = y - center[1];
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

fn raw_template(kind: &TemplateKind, x: f64, y: f64) -> f64 {
    match *kind {
        TemplateKind::Stripes { frequency } => (2.0 * PI * frequency * y).sin(),
        TemplateKind::Checkers { frequency } => (2.0 * PI * frequency * x).sin() * (2.0 * PI * frequency * y).sin(),
        TemplateKind::Ring { radius, width } => {
            let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
            (-(r - radius).powi(2) / (2.0 * width * width)).exp()
        }
        TemplateKind::Ramp { angle } => (x - 0.5) * angle.cos() + (y - 0.5) * angle.sin(),
        TemplateKind::SpotShift { center, direction, sigma } => {
            let along = (x - center[0]) * direction[0] + (y - center[1]) * direction[1];
            along * gaussian(x, y, center, sigma)
        }
    }
}

fn pixel_centers(height: usize, width: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..height).flat_map(move |i| {
        (0..width).map(move |j| ((j as f64 + 0.5) / width as f64, (i as f64 + 0.5) / height as f64))
    })
}

/// Feature templates, Gram-Schmidt orthonormalized in feature order.
///
/// Returns one row of `height * width` pixels per feature.
pub(crate) fn build_templates(config: &WorldConfig) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(config.features.len());
    for feature in &config.features {
        let mut t: Vec<f64> = pixel_centers(config.height, config.width)
            .map(|(x, y)| raw_template(&feature.template, x, y))
            .collect();
        for b in &basis {
            let proj: f64 = t.iter().zip(b).map(|(a, b)| a * b).sum();
            for (v, bv) in t.iter_mut().zip(b) {
                *v -= proj * bv;
            }
        }
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut t {
            *v /= norm;
        }
        basis.push(t);
    }
    basis
}

/// Pre-squash background: the spots that keypoint features displace.
pub(crate) fn build_base(config: &WorldConfig) -> Vec<f64> {
    let spots: Vec<([f64; 2], f64)> = config
        .features
        .iter()
        .filter_map(|f| match f.template {
            TemplateKind::SpotShift { center, sigma, .. } => Some((center, sigma)),
            _ => None,
        })
        .collect();
    pixel_centers(config.height, config.width)
        .map(|(x, y)| spots.iter().map(|(c, s)| config.spot_amplitude * gaussian(x, y, *c, *s)).sum())
        .collect()
}
