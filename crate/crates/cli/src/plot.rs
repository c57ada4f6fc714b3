//! Dependency-free SVG exports: per-sample score scatter and a ROC polyline.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 50.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-family=\"monospace\" font-size=\"15\">{title}</text>\n",
        W / 2.0 - 80.0
    )
}

fn axis_box() -> String {
    format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )
}

/// Scatter of prediction scores by sample index, colored by true label.
pub fn scores_svg(scores: &[f64], labels: &[bool], threshold: f64) -> String {
    let mut out = svg_header("prediction scores");
    out.push_str(&axis_box());
    let n = scores.len().max(1);
    let x_of = |i: usize| MARGIN + (W - 2.0 * MARGIN) * (i as f64 + 0.5) / n as f64;
    let y_of = |s: f64| H - MARGIN - (H - 2.0 * MARGIN) * s.clamp(0.0, 1.0);
    let ty = y_of(threshold);
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN}\" y1=\"{ty:.2}\" x2=\"{:.2}\" y2=\"{ty:.2}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>",
        W - MARGIN
    );
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let color = if y { "#c0392b" } else { "#2980b9" };
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
            x_of(i),
            y_of(s)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\">positives red, negatives blue; dashed line = threshold {threshold}</text>",
        H - 18.0
    );
    out.push_str("</svg>\n");
    out
}

/// ROC polyline swept over descending score thresholds.
pub fn roc_svg(scores: &[f64], labels: &[bool]) -> String {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    let mut out = svg_header("ROC");
    out.push_str(&axis_box());
    let x_of = |fpr: f64| MARGIN + (W - 2.0 * MARGIN) * fpr;
    let y_of = |tpr: f64| H - MARGIN - (H - 2.0 * MARGIN) * tpr;
    let _ = writeln!(
        out,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>",
        x_of(0.0),
        y_of(0.0),
        x_of(1.0),
        y_of(1.0)
    );
    if n_pos > 0 && n_neg > 0 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut points = vec![(0.0f64, 0.0f64)];
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut i = 0usize;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
                j += 1;
            }
            for &idx in &order[i..=j] {
                if labels[idx] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
            i = j + 1;
        }
        let path: Vec<String> = points
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", x_of(fpr), y_of(tpr)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>",
            path.join(" ")
        );
    } else {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"13\">single-class labels: ROC undefined</text>",
            W / 2.0 - 140.0,
            H / 2.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\">x: false positive rate, y: true positive rate</text>",
        H - 18.0
    );
    out.push_str("</svg>\n");
    out
}
