//! Static SVG timelines: one row per label stream, one colored band per segment.

use std::fmt::Write as _;

const ROW_HEIGHT: f64 = 28.0;
const ROW_GAP: f64 = 10.0;
const LABEL_WIDTH: f64 = 140.0;
const PLOT_WIDTH: f64 = 800.0;
const LEGEND_ROW: f64 = 18.0;

/// Stable color per class name (FNV-1a hash into HSL). Background is white.
pub fn class_color(name: &str, background: Option<&str>) -> String {
    if Some(name) == background {
        return "#ffffff".to_string();
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let hue = h % 360;
    let sat = 55 + (h >> 16) % 30;
    let light = 45 + (h >> 32) % 20;
    format!("hsl({hue},{sat}%,{light}%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Runs of equal consecutive labels as `(name, start, end)`.
fn runs(labels: &[String]) -> Vec<(&str, usize, usize)> {
    let mut out: Vec<(&str, usize, usize)> = Vec::new();
    for (t, l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((name, _, end)) if *name == l.as_str() => *end = t + 1,
            _ => out.push((l, t, t + 1)),
        }
    }
    out
}

/// Renders `(row title, per-frame class names)` rows on a shared time axis.
/// Output depends only on the rows and the background name.
pub fn render_timeline(rows: &[(String, Vec<String>)], background: Option<&str>) -> String {
    let frames = rows.iter().map(|(_, l)| l.len()).max().unwrap_or(0).max(1);
    let scale = PLOT_WIDTH / frames as f64;
    let mut classes: Vec<&str> = rows.iter().flat_map(|(_, l)| l.iter().map(String::as_str)).collect();
    classes.sort_unstable();
    classes.dedup();

    let plot_h = rows.len() as f64 * (ROW_HEIGHT + ROW_GAP);
    let height = plot_h + 30.0 + classes.len() as f64 * LEGEND_ROW + 10.0;
    let width = LABEL_WIDTH + PLOT_WIDTH + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    for (r, (title, labels)) in rows.iter().enumerate() {
        let y = 10.0 + r as f64 * (ROW_HEIGHT + ROW_GAP);
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.2}">{}</text>"#,
            y + ROW_HEIGHT * 0.65,
            escape(title)
        );
        for (name, start, end) in runs(labels) {
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{y:.2}" width="{:.3}" height="{ROW_HEIGHT}" fill="{}"><title>{} [{start}, {end})</title></rect>"#,
                LABEL_WIDTH + start as f64 * scale,
                (end - start) as f64 * scale,
                class_color(name, background),
                escape(name)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{LABEL_WIDTH}" y="{y:.2}" width="{:.3}" height="{ROW_HEIGHT}" fill="none" stroke="#444"/>"##,
            labels.len() as f64 * scale
        );
    }
    let ly = plot_h + 20.0;
    for (i, name) in classes.iter().enumerate() {
        let y = ly + i as f64 * LEGEND_ROW;
        let _ = writeln!(
            s,
            r##"<rect x="{LABEL_WIDTH}" y="{y:.2}" width="14" height="12" fill="{}" stroke="#444"/><text x="{:.2}" y="{:.2}">{}</text>"##,
            class_color(name, background),
            LABEL_WIDTH + 20.0,
            y + 10.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(title: &str, labels: &[&str]) -> (String, Vec<String>) {
        (title.to_string(), labels.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn one_band_per_run() {
        let svg = render_timeline(&[row("gt", &["bg", "a", "a", "b"])], Some("bg"));
        assert_eq!(svg.matches("<title>").count(), 3);
        assert!(svg.contains(r##"fill="#ffffff""##));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn deterministic_colors() {
        assert_eq!(class_color("pour", None), class_color("pour", None));
        assert_ne!(class_color("pour", None), class_color("stir", None));
        let rows = [row("x", &["a", "b"]), row("y", &["b", "b", "a"])];
        assert_eq!(render_timeline(&rows, None), render_timeline(&rows, None));
    }

    #[test]
    fn titles_are_escaped() {
        let svg = render_timeline(&[row("<v&1>", &["a"])], None);
        assert!(svg.contains("&lt;v&amp;1&gt;"));
    }
}
