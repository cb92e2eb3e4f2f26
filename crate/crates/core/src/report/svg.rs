/// Minimal standalone SVG bar chart. Values are drawn relative to the largest bar.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let bar_w = 48.0;
    let gap = 16.0;
    let chart_h = 200.0;
    let left = 40.0;
    let top = 40.0;
    let width = left + labels.len() as f64 * (bar_w + gap) + gap;
    let height = top + chart_h + 60.0;
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { chart_h / max } else { 0.0 };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{left}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        escape(title)
    ));
    out.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{y}\" x2=\"{width}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = top + chart_h
    ));
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let h = (v * scale).max(0.0);
        let y = top + chart_h - h;
        out.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y:.3}\" width=\"{bar_w}\" height=\"{h:.3}\" fill=\"#4a78b5\"/>\n"
        ));
        out.push_str(&format!(
            "  <text x=\"{tx}\" y=\"{ty:.3}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>\n",
            tx = x + bar_w / 2.0,
            ty = y - 4.0
        ));
        out.push_str(&format!(
            "  <text x=\"{tx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            escape(label),
            tx = x + bar_w / 2.0,
            ty = top + chart_h + 18.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
