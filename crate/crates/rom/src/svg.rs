//! Side-by-side box overlays. Predicted matches that are in the ground truth
//! are drawn green, wrong ones red, and ground-truth matches that were not
//! predicted yellow and dashed.

use std::fmt::Write as _;

use rom_core::scene::{BBox, ScenePair};

const PANEL_WIDTH: f64 = 480.0;
const GAP: f64 = 16.0;

pub const CORRECT: &str = "#2ca02c";
pub const WRONG: &str = "#d62728";
pub const MISSING: &str = "#e6b800";

fn panel_height(pair: &ScenePair) -> f64 {
    let cam = &pair.camera1;
    PANEL_WIDTH * cam.height as f64 / cam.width as f64
}

fn rect(out: &mut String, b: &BBox, x0: f64, h: f64, label: &str) {
    let _ = writeln!(
        out,
        r##"  <rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#555" stroke-width="1.5"/>"##,
        x0 + b.x_min * PANEL_WIDTH,
        b.y_min * h,
        b.width() * PANEL_WIDTH,
        b.height() * h
    );
    let _ = writeln!(
        out,
        r##"  <text x="{:.1}" y="{:.1}" font-size="11" fill="#333">{label}</text>"##,
        x0 + b.x_min * PANEL_WIDTH + 2.0,
        b.y_min * h + 12.0
    );
}

/// Drawing of `pair` with `predicted` matches classified against the ground
/// truth.
pub fn render_pair(pair: &ScenePair, predicted: &[(usize, usize)]) -> String {
    let h = panel_height(pair);
    let x2 = PANEL_WIDTH + GAP;
    let total = 2.0 * PANEL_WIDTH + GAP;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total:.0}" height="{h:.0}" viewBox="0 0 {total:.0} {h:.0}">"#
    );
    let _ = writeln!(out, "  <title>pair {}</title>", pair.pair_id);
    for x0 in [0.0, x2] {
        let _ = writeln!(
            out,
            r##"  <rect x="{x0:.1}" y="0" width="{PANEL_WIDTH:.1}" height="{h:.1}" fill="#f4f4f4" stroke="#999"/>"##
        );
    }
    for (k, d) in pair.detections1.iter().enumerate() {
        rect(&mut out, &d.bbox, 0.0, h, &k.to_string());
    }
    for (k, d) in pair.detections2.iter().enumerate() {
        rect(&mut out, &d.bbox, x2, h, &k.to_string());
    }
    let line = |out: &mut String, i: usize, j: usize, color: &str, dash: bool| {
        let a = pair.detections1[i].bbox.center();
        let b = pair.detections2[j].bbox.center();
        let _ = writeln!(
            out,
            r#"  <line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"{}/>"#,
            a[0] * PANEL_WIDTH,
            a[1] * h,
            x2 + b[0] * PANEL_WIDTH,
            b[1] * h,
            if dash {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            }
        );
    };
    for &(i, j) in &pair.gt_matches {
        if !predicted.contains(&(i, j)) {
            line(&mut out, i, j, MISSING, true);
        }
    }
    for &(i, j) in predicted {
        if i < pair.m() && j < pair.n() {
            let color = if pair.gt_matches.contains(&(i, j)) {
                CORRECT
            } else {
                WRONG
            };
            line(&mut out, i, j, color, false);
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rom_core::scene::{generate_corpus, SceneConfig};

    #[test]
    fn colors_follow_classification() {
        let cfg = SceneConfig {
            d_viz: 4,
            ..SceneConfig::default()
        };
        let pair = &generate_corpus(&cfg, 1, 0).unwrap()[0];
        let (i, j) = pair.gt_matches[0];
        let wrong = (0..pair.n()).find(|&b| b != j).map(|b| (i, b));
        let mut pred = vec![(i, j)];
        pred.extend(wrong.filter(|w| !pair.gt_matches.contains(w)));
        let svg = render_pair(pair, &pred);
        assert_eq!(svg.matches(CORRECT).count(), 1);
        assert_eq!(svg.matches(WRONG).count(), pred.len() - 1);
        assert_eq!(svg.matches(MISSING).count(), pair.gt_matches.len() - 1);
        assert_eq!(svg.matches("<rect").count(), 2 + pair.m() + pair.n());
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
