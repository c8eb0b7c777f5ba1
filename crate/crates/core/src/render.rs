//! SVG overlays of char-grids, class masks, keypoint heat and links.

use std::fmt::Write as _;

use crate::chargrid::CharGrid;
use crate::funsd::{BoxPx, FormDocument, Label};

pub fn label_color(label: Label) -> &'static str {
    match label {
        Label::Header => "#f2c500",
        Label::Question => "#2e9d3a",
        Label::Answer => "#2f6fd6",
        Label::Other => "#9a9a9a",
    }
}

pub const LINK_COLOR: &str = "#ff8c00";

/// Per-cell heat in `[0, 1]` over a coarse field.
#[derive(Debug, Clone, PartialEq)]
pub struct Heat {
    pub height: usize,
    pub width: usize,
    /// Page pixels per heat cell.
    pub cell_px: f64,
    pub values: Vec<f64>,
}

/// Draw `form` (its entity boxes and links) over `grid`, optionally with
/// keypoint heat. Coordinates are page pixels.
pub fn render_svg(form: &FormDocument, grid: &CharGrid, heat: Option<&Heat>) -> String {
    let (w, h) = (form.page_width.max(1), form.page_height.max(1));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);

    let _ = writeln!(s, r##"<g fill="#444" fill-opacity="0.35">"##);
    for r in 0..grid.height {
        for c in 0..grid.width {
            if grid.get(r, c) != 0 {
                let b = grid.geometry().cells_to_box(r..r + 1, c..c + 1);
                rect(&mut s, &b, "");
            }
        }
    }
    s.push_str("</g>\n");

    for e in &form.entities {
        let style = format!(
            r#" fill="{}" fill-opacity="0.35" stroke="{}" stroke-width="1""#,
            label_color(e.label),
            label_color(e.label)
        );
        rect(&mut s, &e.bbox, &style);
    }

    if let Some(heat) = heat {
        let _ = writeln!(s, r#"<g fill="red">"#);
        for i in 0..heat.height {
            for j in 0..heat.width {
                let v = heat.values[i * heat.width + j].clamp(0.0, 1.0);
                if v < 0.05 {
                    continue;
                }
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill-opacity="{:.3}"/>"#,
                    j as f64 * heat.cell_px,
                    i as f64 * heat.cell_px,
                    heat.cell_px,
                    heat.cell_px,
                    0.6 * v
                );
            }
        }
        s.push_str("</g>\n");
    }

    let _ = writeln!(s, r#"<g stroke="{LINK_COLOR}" stroke-width="2">"#);
    for &(q, a) in &form.links {
        if let (Some(q), Some(a)) = (form.entity(q), form.entity(a)) {
            let (x1, y1) = a.bbox.bottom_left();
            let (x2, y2) = q.bbox.bottom_left();
            let _ = writeln!(s, r#"<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}"/>"#);
        }
    }
    s.push_str("</g>\n</svg>\n");
    s
}

fn rect(s: &mut String, b: &BoxPx, style: &str) {
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{}" height="{}"{style}/>"#,
        b.x1,
        b.y1,
        b.width(),
        b.height()
    );
}
