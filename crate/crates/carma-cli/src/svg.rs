//! Minimal hand-rolled SVG line plots; convenience output only, the CSV
//! plot data is the contract.

use std::collections::BTreeMap;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &BTreeMap<String, Vec<(f64, f64)>>,
) -> String {
    let points: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (y0, mut y1) = (0.0f64, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = 0.0;
        x1 = 1.0;
    }
    if y1 <= y0 {
        y1 = 1.0;
    }
    y1 *= 1.05;

    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{tx}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>
<line x1="{m}" y1="{ybase}" x2="{xmax}" y2="{ybase}" stroke="black"/>
<line x1="{m}" y1="{m}" x2="{m}" y2="{ybase}" stroke="black"/>
<text x="{tx}" y="{xl}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>
<text x="16" y="{ty}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {ty})">{y_label}</text>
"#,
        tx = W / 2.0,
        m = MARGIN,
        ybase = H - MARGIN,
        xmax = W - MARGIN,
        xl = H - 14.0,
        ty = H / 2.0,
    );

    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let xv = x0 + frac * (x1 - x0);
        let yv = y0 + frac * (y1 - y0);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{:.2}</text>\n",
            sx(xv),
            H - MARGIN + 16.0,
            xv
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.0}</text>\n",
            MARGIN - 6.0,
            sy(yv) + 3.0,
            yv
        ));
    }

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in &sorted {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - MARGIN + 6.0,
            MARGIN + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_svg() {
        let mut series = BTreeMap::new();
        series.insert("ft".to_string(), vec![(0.25, 40.0), (0.5, 55.0), (1.0, 60.0)]);
        series.insert("carma".to_string(), vec![(0.25, 45.0), (0.5, 58.0), (1.0, 59.0)]);
        let svg = line_plot("t", "x", "y", &series);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
