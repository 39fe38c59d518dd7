use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Match;
use crate::image::Image;

/// Red (0) through yellow (0.5) to green (1).
pub fn confidence_color(c: f64) -> [u8; 3] {
    let c = if c.is_finite() { c.clamp(0.0, 1.0) } else { 0.0 };
    let (r, g) = if c < 0.5 { (1.0, 2.0 * c) } else { (2.0 - 2.0 * c, 1.0) };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, 0]
}

/// Integer points of the segment from `p0` to `p1` (Bresenham).
pub fn line_points(p0: (i64, i64), p1: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = p0;
    let dx = (p1.0 - x).abs();
    let dy = -(p1.1 - y).abs();
    let sx = if x < p1.0 { 1 } else { -1 };
    let sy = if y < p1.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if (x, y) == p1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Renders A and B side by side with one colored segment per match and
/// returns the image and the number of segments drawn.
pub fn render_matches(a: &Image, b: &Image, matches: &[(Match, f64)]) -> (image::RgbImage, usize) {
    let (w, h) = (a.width + b.width, a.height.max(b.height));
    let mut canvas = image::RgbImage::new(w as u32, h as u32);
    image::imageops::replace(&mut canvas, &a.to_rgb8(), 0, 0);
    image::imageops::replace(&mut canvas, &b.to_rgb8(), a.width as i64, 0);
    let mut drawn = 0;
    for (m, c) in matches {
        if !m.is_finite() {
            continue;
        }
        let color = image::Rgb(confidence_color(*c));
        let p0 = (m.xa.round() as i64, m.ya.round() as i64);
        let p1 = (m.xb.round() as i64 + a.width as i64, m.yb.round() as i64);
        for (x, y) in line_points(p0, p1) {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                canvas.put_pixel(x as u32, y as u32, color);
            }
        }
        drawn += 1;
    }
    (canvas, drawn)
}

/// Writes the rendering of [`render_matches`] as PNG.
pub fn visualize_matches(a: &Image, b: &Image, matches: &[(Match, f64)], out: impl AsRef<Path>) -> Result<usize> {
    let out = out.as_ref();
    let (canvas, n) = render_matches(a, b, matches);
    canvas.save(out).map_err(|e| Error::Image {
        path: out.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(n)
}
