//! Binary PPM heatmaps of per-cell bounds over a planar workspace.

use crate::scenario::Scenario;
use crate::{Error, Result};

const OBSTACLE: [u8; 3] = [0, 0, 0];
const BORDER: [u8; 3] = [64, 64, 64];
const OUTSIDE: [u8; 3] = [255, 255, 255];

/// Color stops of the `[0, 1]` scale, low to high.
const STOPS: [[u8; 3]; 5] = [
    [48, 18, 59],
    [40, 123, 229],
    [61, 212, 142],
    [245, 196, 45],
    [180, 4, 38],
];

/// Color of a value on the fixed `[0, 1]` scale.
pub fn color(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 1.0 } else { v.clamp(0.0, 1.0) };
    let pos = v * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let t = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let a = STOPS[i][c] as f64;
        let b = STOPS[i + 1][c] as f64;
        out[c] = (a + (b - a) * t).round() as u8;
    }
    out
}

/// Rasterizes the partition colored by `values` (one per cell). The image is
/// `width` pixels wide with the domain's aspect ratio; obstacles are black
/// and cell borders dark gray.
pub fn render_heatmap(values: &[f64], s: &Scenario, width: usize) -> Result<Vec<u8>> {
    if s.state_dim() != 2 || s.workspace.position != [0, 1] {
        return Err(Error::NotPlanar);
    }
    if values.len() != s.cell_count() {
        return Err(Error::Dimension(format!(
            "{} values for {} cells",
            values.len(),
            s.cell_count()
        )));
    }
    let bx = s.workspace.domain.bounding_box(2)?;
    let (x0, x1) = bx[0];
    let (y0, y1) = bx[1];
    let width = width.max(2);
    let height = (((y1 - y0) / (x1 - x0)) * width as f64).round().max(2.0) as usize;
    let px = (x1 - x0) / width as f64;
    let py = (y1 - y0) / height as f64;

    // owner cell of every pixel center; row 0 is the top of the image
    let mut owner = vec![None; width * height];
    for r in 0..height {
        let y = y1 - (r as f64 + 0.5) * py;
        for c in 0..width {
            let x = x0 + (c as f64 + 0.5) * px;
            owner[r * width + c] = s.locate(&[x, y]);
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for r in 0..height {
        let y = y1 - (r as f64 + 0.5) * py;
        for c in 0..width {
            let x = x0 + (c as f64 + 0.5) * px;
            let me = owner[r * width + c];
            let border = (c + 1 < width && owner[r * width + c + 1] != me)
                || (r + 1 < height && owner[(r + 1) * width + c] != me);
            let rgb = if s.workspace.is_unsafe(&[x, y]) {
                OBSTACLE
            } else if border {
                BORDER
            } else {
                match me {
                    Some(i) => color(values[i]),
                    None => OUTSIDE,
                }
            };
            out.extend_from_slice(&rgb);
        }
    }
    Ok(out)
}
