//! Landmark-to-token mapping and per-AU token gathering.

use std::path::Path;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::task::{AuTaskSpec, NUM_LANDMARKS};

/// The 68 apex-frame landmarks, (x, y) in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub points: Vec<[f64; 2]>,
}

impl Landmarks {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Landmarks> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::LengthMismatch(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        Ok(Landmarks { points })
    }

    /// Fails with `OutOfBounds` on the first point outside the image.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for &[x, y] in &self.points {
            check_point(x, y, width, height)?;
        }
        Ok(())
    }

    /// Parses 68 lines of `x y`.
    pub fn parse(text: &str) -> Result<Landmarks> {
        let points = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let v: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::LengthMismatch(format!("landmark line {}: `{line}`", i + 1)))?;
                match v.as_slice() {
                    [x, y] => Ok([*x, *y]),
                    _ => Err(Error::LengthMismatch(format!("landmark line {}: `{line}`", i + 1))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Landmarks::new(points)
    }

    pub fn load(path: &Path) -> Result<Landmarks> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Landmarks::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.points.iter().map(|[x, y]| format!("{x} {y}\n")).collect()
    }
}

fn check_point(x: f64, y: f64, width: usize, height: usize) -> Result<()> {
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Ok(())
    } else {
        Err(Error::OutOfBounds { x, y, w: width, h: height })
    }
}

/// Grid cell (row, col) holding the landmark: rows scale y by h/h0 and
/// columns scale x by w/w0, floored and clamped into the grid.
pub fn map_landmark_to_token(
    landmark: [f64; 2],
    image: (usize, usize),
    grid: (usize, usize),
) -> Result<(usize, usize)> {
    let [x, y] = landmark;
    let (h0, w0) = image;
    let (h, w) = grid;
    check_point(x, y, w0, h0)?;
    let row = ((y * h as f64) / h0 as f64).floor() as usize;
    let col = ((x * w as f64) / w0 as f64).floor() as usize;
    Ok((row.min(h - 1), col.min(w - 1)))
}

/// Flat token indices (row * w + col) per AU, in task-spec landmark order.
pub fn au_token_indices(
    spec: &AuTaskSpec,
    landmarks: &Landmarks,
    image: (usize, usize),
    grid: (usize, usize),
) -> Result<Vec<Vec<usize>>> {
    spec.aus
        .iter()
        .map(|au| {
            au.landmarks
                .iter()
                .map(|&j| {
                    let (r, c) = map_landmark_to_token(landmarks.points[j], image, grid)?;
                    Ok(r * grid.1 + c)
                })
                .collect()
        })
        .collect()
}

/// Per AU, the (N_L, d) stack of tokens at its landmark cells. Duplicate
/// cells are kept.
#[derive(Debug, Clone)]
pub struct AuTokenGroups {
    pub indices: Vec<Vec<usize>>,
    pub groups: Vec<Tensor>,
}

/// Gathers tokens from an (h, w, d) grid for every AU of the task.
pub fn gather_au_tokens(
    grid: &crate::encoders::TokenGrid,
    spec: &AuTaskSpec,
    landmarks: &Landmarks,
    image: (usize, usize),
) -> Result<AuTokenGroups> {
    let indices = au_token_indices(spec, landmarks, image, (grid.h, grid.w))?;
    let flat = grid.tokens.reshape((grid.h * grid.w, grid.d))?;
    let groups = indices
        .iter()
        .map(|ids| {
            let ids: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
            let ids = Tensor::new(ids.as_slice(), flat.device())?;
            Ok(flat.index_select(&ids, 0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuTokenGroups { indices, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_examples() {
        let img = (224, 224);
        let grid = (7, 7);
        assert_eq!(map_landmark_to_token([0.0, 0.0], img, grid).unwrap(), (0, 0));
        assert_eq!(map_landmark_to_token([112.0, 112.0], img, grid).unwrap(), (3, 3));
        assert_eq!(map_landmark_to_token([223.0, 223.0], img, grid).unwrap(), (6, 6));
        // x picks the column, y the row.
        assert_eq!(map_landmark_to_token([200.0, 10.0], img, grid).unwrap(), (0, 6));
    }

    #[test]
    fn out_of_bounds() {
        for p in [[224.0, 0.0], [0.0, 224.0], [-0.5, 3.0]] {
            assert!(matches!(
                map_landmark_to_token(p, (224, 224), (7, 7)),
                Err(Error::OutOfBounds { .. })
            ));
        }
    }

    #[test]
    fn every_pixel_maps_into_the_grid() {
        for y in 0..224 {
            for x in 0..224 {
                let (r, c) = map_landmark_to_token([x as f64, y as f64], (224, 224), (7, 7)).unwrap();
                assert!(r < 7 && c < 7);
            }
        }
    }

    #[test]
    fn landmark_text_round_trip() {
        let lm = Landmarks::new((0..68).map(|i| [i as f64, (2 * i) as f64]).collect()).unwrap();
        assert_eq!(Landmarks::parse(&lm.to_text()).unwrap(), lm);
        assert!(Landmarks::parse("1 2\n3 4\n").is_err());
        assert!(lm.check_bounds(67, 200).is_err());
        assert!(lm.check_bounds(68, 134).is_err());
        assert!(lm.check_bounds(68, 135).is_ok());
    }
}
