//! Minimal SVG line and bar charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write(path: &Path, svg: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

/// One polyline per named series of `(x, y)` points.
pub fn line_chart(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = header(title);
    let _ = writeln!(s, r#"<text x="{}" y="{}">{y1:.4}</text>"#, 4, PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}">{y0:.4}</text>"#, 4, H - PAD);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{x0}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1}</text>"#, W - PAD, H - PAD + 16.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - PAD - 140.0, PAD + 14.0 * i as f64, escape(name));
    }
    s.push_str("</svg>\n");
    write(path, s)
}

/// Vertical bars on a `[0, max(1, largest)]` scale.
pub fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(1.0f64, f64::max);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let mut s = header(title);
    for (i, (name, v)) in bars.iter().enumerate() {
        let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
        let h = v / top * (H - 2.0 * PAD);
        let x = PAD + i as f64 * slot + slot * 0.15;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            H - PAD - h,
            slot * 0.7,
            COLORS[0]
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#, x + slot * 0.35, H - PAD - h - 3.0);
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.2},{:.2}) rotate(40)">{}</text>"#,
            x + slot * 0.2,
            H - PAD + 12.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_svg() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.svg");
        line_chart(&p, "loss <total>", &[("total".into(), vec![(0.0, 2.0), (1.0, 1.0), (2.0, f64::NAN)])]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.starts_with("<svg") && s.contains("polyline") && s.contains("&lt;total&gt;"));
        let b = dir.path().join("b.svg");
        bar_chart(&b, "scores", &[("Rec".into(), 0.9), ("sim-I".into(), f64::NAN)]).unwrap();
        assert_eq!(std::fs::read_to_string(&b).unwrap().matches("<rect").count(), 3);
    }
}
