//! Attention heatmaps and similarity-matrix images.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::preprocess::Frame;

/// Sums each AU's PTA weights into the grid cells of its tokens. A cell
/// shared by several landmarks collects all of their weight.
pub fn pta_heat_grid(grid: (usize, usize), indices: &[Vec<usize>], weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = grid;
    let mut heat = vec![vec![0.0; w]; h];
    for (ids, ws) in indices.iter().zip(weights) {
        for (&i, &v) in ids.iter().zip(ws) {
            heat[i / w][i % w] += v;
        }
    }
    heat
}

/// Row and column of the hottest cell; ties keep the first in row order.
pub fn argmax_cell(heat: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    for (r, row) in heat.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if *v > heat[best.0][best.1] {
                best = (r, c);
            }
        }
    }
    best
}

/// Grayscale background with a red overlay proportional to the cell heat.
pub fn render_heatmap(background: &Frame, heat: &[Vec<f64>]) -> RgbImage {
    let (h, w) = (heat.len(), heat.first().map_or(0, Vec::len));
    let peak = heat.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
    RgbImage::from_fn(background.width as u32, background.height as u32, |x, y| {
        let g = background.at(x as usize, y as usize).clamp(0.0, 255.0);
        let r = (y as usize * h / background.height).min(h - 1);
        let c = (x as usize * w / background.width).min(w - 1);
        let a = if peak > 0.0 { heat[r][c] / peak } else { 0.0 } * 0.6;
        let mix = |bg: f64, fg: f64| (bg * (1.0 - a) + fg * a).round() as u8;
        Rgb([mix(g, 255.0), mix(g, 0.0), mix(g, 0.0)])
    })
}

/// Each matrix entry in [-1, 1] as a `cell` x `cell` gray square.
pub fn render_matrix(m: &[Vec<f64>], cell: usize) -> RgbImage {
    let n = m.len() as u32;
    let cols = m.first().map_or(0, Vec::len) as u32;
    let cell = cell as u32;
    RgbImage::from_fn(cols * cell, n * cell, |x, y| {
        let v = m[(y / cell) as usize][(x / cell) as usize];
        let g = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

/// Whitespace-separated rows with fixed precision.
pub fn matrix_text(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(s, "{}", cells.join(" ")).expect("string write");
    }
    s
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Image(other),
    })
}
