use crate::error::{Error, Result};
use crate::world::ImageTensor;
use crate::autodiff::Tensor;

/// Plain (ASCII) portable graymap, maxval 255, one image row per line.
pub fn write_pgm(image: &ImageTensor) -> String {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in image.pixels().chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Reads a plain graymap back into `[0, 1]` pixel values.
pub fn parse_pgm(text: &str) -> Result<ImageTensor> {
    let bad = |d: &str| Error::Format { path: "<pgm>".into(), detail: d.to_string() };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let w = next_num("width")?;
    let h = next_num("height")?;
    let max = next_num("maxval")? as f64;
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(next_num("pixel")? as f64 / max);
    }
    Ok(ImageTensor(Tensor::new(vec![h, w], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graymap_layout() {
        let img = ImageTensor(Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap());
        let text = write_pgm(&img);
        assert_eq!(text, "P2\n3 2\n255\n0 128 255\n64 191 26\n");
        let back = parse_pgm(&text).unwrap();
        assert_eq!(back.tensor().shape(), &[2, 3]);
        assert!((back.pixels()[1] - 128.0 / 255.0).abs() < 1e-12);
    }
}
