//! Deterministic SVG rendering of keypoints and match lines.

use superglue_core::features::LocalFeatureSet;
use superglue_core::matcher::MatchSet;
use superglue_core::synthgen::GroundTruthLabels;

const GAP: f64 = 24.0;
const MARGIN: f64 = 8.0;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Confidence colormap: dark blue (0) through violet to red (1).
fn confidence_color(c: f64) -> String {
    let c = c.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * c).round() as u8;
    let g = (60.0 * (1.0 - c)).round() as u8;
    let b = (200.0 * (1.0 - c) + 30.0).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Side-by-side layout: image A at the origin, image B shifted right.
pub fn render(
    features_a: &LocalFeatureSet,
    features_b: &LocalFeatureSet,
    matches: &MatchSet,
    labels: Option<&GroundTruthLabels>,
) -> String {
    let (wa, ha) = features_a.image_size;
    let (wb, hb) = features_b.image_size;
    let offset_x = MARGIN + wa + GAP;
    let width = MARGIN * 2.0 + wa + GAP + wb;
    let height = MARGIN * 2.0 + ha.max(hb);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        fmt(width),
        fmt(height),
        fmt(width),
        fmt(height)
    ));
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    for (x, y, w, h) in [(MARGIN, MARGIN, wa, ha), (offset_x, MARGIN, wb, hb)] {
        out.push_str(&format!(
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#f4f4f4\" stroke=\"#888888\"/>\n",
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h)
        ));
    }

    let truth: Option<std::collections::HashSet<(usize, usize)>> =
        labels.map(|l| l.matches.iter().copied().collect());
    for m in &matches.matches {
        let a = features_a.keypoints[m.i];
        let b = features_b.keypoints[m.j];
        let color = match &truth {
            Some(t) => {
                if t.contains(&(m.i, m.j)) {
                    "#2ca02c".to_string()
                } else {
                    "#d62728".to_string()
                }
            }
            None => confidence_color(m.confidence),
        };
        out.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1\" stroke-opacity=\"0.8\"/>\n",
            fmt(MARGIN + a.x),
            fmt(MARGIN + a.y),
            fmt(offset_x + b.x),
            fmt(MARGIN + b.y)
        ));
    }

    for kp in &features_a.keypoints {
        out.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#1f77b4\"/>\n",
            fmt(MARGIN + kp.x),
            fmt(MARGIN + kp.y)
        ));
    }
    for kp in &features_b.keypoints {
        out.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#1f77b4\"/>\n",
            fmt(offset_x + kp.x),
            fmt(MARGIN + kp.y)
        ));
    }
    out.push_str("</svg>\n");
    out
}
