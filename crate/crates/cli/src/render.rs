//! SVG overlays: the patch as an embedded PNG with the ground truth, the
//! initial contour and the prediction drawn on top.

use std::fmt::Write as _;
use std::io::Cursor;

use anyhow::Result;
use base64::Engine as _;
use image::ImageFormat;
use snake_core::geometry::Contour;
use snake_core::patch::Patch;

pub const GT_COLOR: &str = "#00FF00";
pub const INIT_COLOR: &str = "#0000FF";
pub const PRED_COLOR: &str = "#FFFF00";

/// Screen pixels per patch pixel.
const ZOOM: usize = 4;

fn png_base64(patch: &Patch) -> Result<String> {
    let mut bytes = Vec::new();
    patch.to_image()?.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn points(c: &Contour) -> String {
    c.nodes()
        .iter()
        .map(|p| format!("{:.3},{:.3}", p.u, p.v))
        .collect::<Vec<_>>()
        .join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pixel centres sit at integer coordinates, so the image spans
/// `[-0.5, w - 0.5] x [-0.5, h - 0.5]`.
pub fn overlay_svg(id: &str, patch: &Patch, gt: &Contour, init: &Contour, pred: &Contour) -> Result<String> {
    let (w, h) = (patch.width(), patch.height());
    let stroke = 0.35;
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#)?;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" version="1.1" width="{}" height="{}" viewBox="-0.5 -0.5 {w} {h}">"#,
        w * ZOOM,
        h * ZOOM
    )?;
    writeln!(s, "  <title>{}</title>", escape(id))?;
    writeln!(
        s,
        r#"  <image x="-0.5" y="-0.5" width="{w}" height="{h}" preserveAspectRatio="none" style="image-rendering:pixelated" xlink:href="data:image/png;base64,{}"/>"#,
        png_base64(patch)?
    )?;
    let layers = [
        ("gt", gt, GT_COLOR, None),
        ("init", init, INIT_COLOR, Some("1.2,0.6,0.3,0.6")),
        ("pred", pred, PRED_COLOR, Some("1,0.6")),
    ];
    for (class, c, color, dash) in layers {
        let dash = dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        writeln!(
            s,
            r#"  <polygon class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="{stroke}"{dash}/>"#,
            points(c)
        )?;
    }
    writeln!(s, "</svg>")?;
    Ok(s)
}
