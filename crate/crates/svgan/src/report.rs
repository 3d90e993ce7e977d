//! Self-contained SVG loss curves, summary tables and PPM label overlays.

use std::fmt::Write as _;

use svgan_core::metrics::MetricsReport;

use crate::log::{LogRow, LOSS_TERMS};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of one series against step.
pub fn line_chart_svg(title: &str, xs: &[f64], ys: &[f64]) -> String {
    let (xmin, xmax) = bounds(xs);
    let (ymin, ymax) = bounds(ys);
    let sx = |x: f64| PAD + (x - xmin) / (xmax - xmin) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - ymin) / (ymax - ymin) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, y) in [(ymin, H - PAD), (ymax, PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#,
            PAD - 4.0,
            y + 4.0,
            v
        );
    }
    for (v, x) in [(xmin, PAD), (xmax, W - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x,
            H - PAD + 16.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        W / 2.0,
        H - 8.0
    );
    let mut pts = String::new();
    for (&x, &y) in xs.iter().zip(ys) {
        let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        pts.trim_end()
    );
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// `(term, svg)` for every loss column.
pub fn loss_charts(rows: &[LogRow]) -> Vec<(&'static str, String)> {
    let xs: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    LOSS_TERMS
        .iter()
        .map(|&t| {
            let ys: Vec<f64> = rows.iter().map(|r| r.term(t)).collect();
            (t, line_chart_svg(t, &xs, &ys))
        })
        .collect()
}

/// Markdown table of first/last/min/mean per loss term.
pub fn loss_table(rows: &[LogRow]) -> String {
    let mut s = String::from("| term | first | last | min | mean |\n|---|---|---|---|---|\n");
    for t in LOSS_TERMS {
        let v: Vec<f64> = rows.iter().map(|r| r.term(t)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let _ = writeln!(
            s,
            "| {} | {:.5} | {:.5} | {:.5} | {:.5} |",
            t,
            v[0],
            v[v.len() - 1],
            min,
            mean
        );
    }
    s
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.4}", x))
}

/// Markdown table of region averages.
pub fn metrics_table(r: &MetricsReport) -> String {
    let mut s = format!(
        "patients: {}  disease accuracy: {:.4}  mean foreground Dice: {:.4}\n\n",
        r.patients.len(),
        r.accuracy,
        r.mean_foreground_dice
    );
    s.push_str("| region | Dice | Hausdorff | excluded | sensitivity | excluded | pooled sensitivity |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for g in &r.regions {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {} | {} | {} | {} | {} |",
            g.region,
            g.dice,
            cell(g.hausdorff),
            g.hausdorff_excluded,
            cell(g.sensitivity),
            g.sensitivity_excluded,
            cell(g.sensitivity_pooled)
        );
    }
    s
}

/// Colour per class: background black, then red, green, blue, yellow...
pub fn class_colour(c: u8) -> [u8; 3] {
    const TABLE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [220, 40, 40],
        [40, 200, 60],
        [50, 90, 230],
        [240, 220, 40],
        [200, 60, 220],
        [40, 210, 220],
        [255, 255, 255],
    ];
    TABLE[c as usize % TABLE.len()]
}

/// Binary PPM with ground truth left and prediction right, separated by a
/// grey column, each pixel scaled up by `zoom`.
pub fn overlay_ppm(gt: &[u8], pred: &[u8], h: usize, w: usize, zoom: usize) -> Vec<u8> {
    let zoom = zoom.max(1);
    let (ow, oh) = ((2 * w + 1) * zoom, h * zoom);
    let mut out = format!("P6\n{} {}\n255\n", ow, oh).into_bytes();
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = (y / zoom, x / zoom);
            let rgb = if sx < w {
                class_colour(gt[sy * w + sx])
            } else if sx == w {
                [128, 128, 128]
            } else {
                class_colour(pred[sy * w + sx - w - 1])
            };
            out.extend_from_slice(&rgb);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_self_contained() {
        let svg = line_chart_svg("a<b", &[1.0, 2.0, 3.0], &[0.5, 0.25, 0.75]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("href"));
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn flat_series_does_not_divide_by_zero() {
        let svg = line_chart_svg("flat", &[1.0], &[2.0]);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn ppm_layout() {
        let gt = [0u8, 1, 2, 3];
        let pred = [1u8, 1, 1, 1];
        let img = overlay_ppm(&gt, &pred, 2, 2, 1);
        let header = b"P6\n5 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 5 * 2 * 3);
        let px = |x: usize, y: usize| &img[header.len() + (y * 5 + x) * 3..][..3];
        assert_eq!(px(1, 0), class_colour(1));
        assert_eq!(px(2, 0), [128, 128, 128]);
        assert_eq!(px(3, 1), class_colour(1));
    }
}
