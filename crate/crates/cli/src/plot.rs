//! Static SVG of stage bars: one horizontal row per labelling, one color per
//! stage, shared time axis.

use std::fmt::Write;

use edk_core::stage::SegmentList;

use crate::Failure;

pub struct Row {
    pub name: String,
    pub labels: Vec<usize>,
}

const LABEL_W: f64 = 140.0;
const BAR_W: f64 = 720.0;
const ROW_H: f64 = 22.0;
const GAP: f64 = 8.0;
const LEGEND_H: f64 = 18.0;

/// `c` evenly spaced hues as `#rrggbb`.
pub fn palette(c: usize) -> Vec<String> {
    (0..c)
        .map(|i| {
            let h = i as f64 / c as f64;
            let (r, g, b) = hsl_to_rgb(h, 0.62, 0.52);
            format!("#{:02x}{:02x}{:02x}", r, g, b)
        })
        .collect()
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let q = if l < 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let p = 2.0 * l - q;
    let channel = |mut t: f64| {
        if t < 0.0 {
            t += 1.0;
        }
        if t > 1.0 {
            t -= 1.0;
        }
        let v = if t < 1.0 / 6.0 {
            p + (q - p) * 6.0 * t
        } else if t < 0.5 {
            q
        } else if t < 2.0 / 3.0 {
            p + (q - p) * (2.0 / 3.0 - t) * 6.0
        } else {
            p
        };
        (v * 255.0).round() as u8
    };
    (channel(h + 1.0 / 3.0), channel(h), channel(h - 1.0 / 3.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders rows over the stage names in `vocab`. Output depends only on the
/// inputs, so equal inputs give byte-identical files.
pub fn render(rows: &[Row], vocab: &[String]) -> Result<String, Failure> {
    let c = vocab.len();
    if rows.is_empty() || c == 0 {
        return Err(Failure::data("nothing to plot"));
    }
    let frames = rows.iter().map(|r| r.labels.len()).max().unwrap_or(0);
    if frames == 0 {
        return Err(Failure::data("label rows are empty"));
    }
    if let Some(bad) = rows.iter().flat_map(|r| &r.labels).find(|&&l| l >= c) {
        return Err(Failure::data(format!("label {bad} outside a {c}-stage vocabulary")));
    }
    let colors = palette(c);
    let scale = BAR_W / frames as f64;
    let legend_rows = c.div_ceil(6);
    let height = GAP + rows.len() as f64 * (ROW_H + GAP) + legend_rows as f64 * LEGEND_H + GAP;
    let width = LABEL_W + BAR_W + GAP;
    let mut s = String::new();
    // Writing into a String cannot fail.
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (i, row) in rows.iter().enumerate() {
        let y = GAP + i as f64 * (ROW_H + GAP);
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" dominant-baseline="middle">{}</text>"#,
            y + ROW_H / 2.0,
            escape(&row.name)
        );
        let _ = writeln!(s, r#"<g class="row" data-row="{i}">"#);
        for seg in SegmentList::from_labels(&row.labels).as_slice() {
            let _ = writeln!(
                s,
                r#"<rect class="seg" x="{:.2}" y="{y:.1}" width="{:.2}" height="{ROW_H:.1}" fill="{}"><title>{} [{}, {})</title></rect>"#,
                LABEL_W + seg.start as f64 * scale,
                seg.len() as f64 * scale,
                colors[seg.stage],
                escape(&vocab[seg.stage]),
                seg.start,
                seg.end
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let legend_y = GAP + rows.len() as f64 * (ROW_H + GAP);
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (k, name) in vocab.iter().enumerate() {
        let x = LABEL_W + (k % 6) as f64 * (BAR_W / 6.0);
        let y = legend_y + (k / 6) as f64 * LEGEND_H;
        let _ = writeln!(
            s,
            r#"<rect class="swatch" x="{x:.1}" y="{y:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            colors[k],
            x + 16.0,
            y + 10.0,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}
