//! Dense optical flow: estimation, magnification, file IO and rendering to
//! the 3-channel encoder input.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::frame::Frame;

/// Per-pixel (dx, dy) motion in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> FlowField {
        FlowField { width, height, data: vec![[0.0, 0.0]; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        let [dx, dy] = self.at(x, y);
        dx.hypot(dy)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.data.len() as f64;
        let (sx, sy) = self.data.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
        [sx / n, sy / n]
    }

    /// Writes the flow file: an ASCII header line `MAUFLOW1 <h> <w> f32`
    /// followed by little-endian (dx, dy) pairs, row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = format!("MAUFLOW1 {} {} f32\n", self.height, self.width).into_bytes();
        for [dx, dy] in &self.data {
            buf.extend_from_slice(&(*dx as f32).to_le_bytes());
            buf.extend_from_slice(&(*dy as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<FlowField> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |msg: &str| Error::EstimatorFailure(format!("{}: {msg}", path.display()));
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| bad("header is not text"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "MAUFLOW1" {
            return Err(bad("unrecognised header"));
        }
        let height: usize = fields[1].parse().map_err(|_| bad("bad height"))?;
        let width: usize = fields[2].parse().map_err(|_| bad("bad width"))?;
        let body = &bytes[newline + 1..];
        let n = width * height * 2;
        let values: Vec<f64> = match fields[3] {
            "f32" if body.len() == n * 4 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            "f64" if body.len() == n * 8 => {
                body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
            "f32" | "f64" => return Err(bad("payload length does not match header")),
            _ => return Err(bad("unsupported dtype")),
        };
        let data = values.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let flow = FlowField { width, height, data };
        if !flow.is_finite() {
            return Err(bad("non-finite values"));
        }
        Ok(flow)
    }
}

/// Any dense optical-flow estimator.
pub trait FlowEstimator {
    fn estimate(&self, onset: &Frame, apex: &Frame) -> Result<FlowField>;
}

/// Pyramidal iterative Lucas-Kanade over every pixel.
#[derive(Debug, Clone)]
pub struct LucasKanade {
    pub levels: usize,
    pub window_radius: usize,
    pub iterations: usize,
    pub presmooth: f64,
}

impl Default for LucasKanade {
    fn default() -> Self {
        LucasKanade { levels: 3, window_radius: 4, iterations: 5, presmooth: 1.0 }
    }
}

/// Sum over a (2r+1)^2 window, truncated at borders.
fn box_sum(values: &[f64], width: usize, height: usize, r: usize) -> Vec<f64> {
    let stride = width + 1;
    let mut integral = vec![0.0; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += values[y * width + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(height);
        for x in 0..width {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(width);
            out[y * width + x] = integral[y1 * stride + x1] - integral[y0 * stride + x1]
                - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
        }
    }
    out
}

impl LucasKanade {
    fn refine(&self, i0: &Frame, i1: &Frame, flow: &mut FlowField) {
        let (w, h) = (i0.width, i0.height);
        let mut ix = vec![0.0; w * h];
        let mut iy = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                ix[y * w + x] = 0.5 * (i0.clamped(xi + 1, yi) - i0.clamped(xi - 1, yi));
                iy[y * w + x] = 0.5 * (i0.clamped(xi, yi + 1) - i0.clamped(xi, yi - 1));
            }
        }
        let r = self.window_radius;
        let sxx = box_sum(&ix.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, r);
        let sxy = box_sum(&ix.iter().zip(&iy).map(|(a, b)| a * b).collect::<Vec<_>>(), w, h, r);
        let syy = box_sum(&iy.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, r);

        for _ in 0..self.iterations {
            let mut it = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let [u, v] = flow.at(x, y);
                    it[y * w + x] = i1.sample(x as f64 + u, y as f64 + v) - i0.at(x, y);
                }
            }
            let bx = box_sum(&ix.iter().zip(&it).map(|(a, b)| a * b).collect::<Vec<_>>(), w, h, r);
            let by = box_sum(&iy.iter().zip(&it).map(|(a, b)| a * b).collect::<Vec<_>>(), w, h, r);
            for k in 0..w * h {
                let det = sxx[k] * syy[k] - sxy[k] * sxy[k];
                let trace = sxx[k] + syy[k];
                if det <= 1e-9 * trace * trace || det <= 1e-12 {
                    continue;
                }
                let du = -(syy[k] * bx[k] - sxy[k] * by[k]) / det;
                let dv = -(sxx[k] * by[k] - sxy[k] * bx[k]) / det;
                flow.data[k][0] += du;
                flow.data[k][1] += dv;
            }
        }
    }
}

fn upsample_flow(coarse: &FlowField, width: usize, height: usize) -> FlowField {
    let mut out = FlowField::zeros(width, height);
    let sx = coarse.width as f64 / width as f64;
    let sy = coarse.height as f64 / height as f64;
    let dx = Frame::new(coarse.width, coarse.height, coarse.data.iter().map(|v| v[0]).collect());
    let dy = Frame::new(coarse.width, coarse.height, coarse.data.iter().map(|v| v[1]).collect());
    for y in 0..height {
        for x in 0..width {
            let cx = (x as f64 + 0.5) * sx - 0.5;
            let cy = (y as f64 + 0.5) * sy - 0.5;
            out.data[y * width + x] = [dx.sample(cx, cy) / sx, dy.sample(cx, cy) / sy];
        }
    }
    out
}

impl FlowEstimator for LucasKanade {
    fn estimate(&self, onset: &Frame, apex: &Frame) -> Result<FlowField> {
        let mut p0 = vec![onset.blur(self.presmooth)];
        let mut p1 = vec![apex.blur(self.presmooth)];
        for _ in 1..self.levels.max(1) {
            let (a, b) = (p0.last().unwrap(), p1.last().unwrap());
            if a.width < 8 || a.height < 8 {
                break;
            }
            let (a, b) = (a.downsample(), b.downsample());
            p0.push(a);
            p1.push(b);
        }
        let coarsest = p0.last().unwrap();
        let mut flow = FlowField::zeros(coarsest.width, coarsest.height);
        for level in (0..p0.len()).rev() {
            let (i0, i1) = (&p0[level], &p1[level]);
            if flow.width != i0.width || flow.height != i0.height {
                flow = upsample_flow(&flow, i0.width, i0.height);
            }
            self.refine(i0, i1, &mut flow);
        }
        if !flow.is_finite() {
            return Err(Error::EstimatorFailure("non-finite flow vectors".into()));
        }
        Ok(flow)
    }
}

/// Flow between two frames of identical size.
pub fn compute_flow(onset: &Frame, apex: &Frame, method: &dyn FlowEstimator) -> Result<FlowField> {
    if (onset.width, onset.height) != (apex.width, apex.height) {
        return Err(Error::SizeMismatch {
            onset: (onset.height, onset.width),
            apex: (apex.height, apex.width),
        });
    }
    method.estimate(onset, apex)
}

/// Linear motion magnification: every vector scaled by `factor`.
pub fn magnify_flow(flow: &FlowField, factor: f64) -> Result<FlowField> {
    if !(factor > 0.0) {
        return Err(Error::NonPositiveFactor(factor));
    }
    Ok(FlowField {
        width: flow.width,
        height: flow.height,
        data: flow.data.iter().map(|[dx, dy]| [dx * factor, dy * factor]).collect(),
    })
}

/// Channel-major (3, size, size) image with channels (dx, dy, magnitude).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    pub size: usize,
    pub data: Vec<f64>,
}

/// Renders flow as (dx, dy, magnitude) scaled by the largest magnitude, so
/// dx and dy land in [-1, 1], magnitude in [0, 1], and zero motion stays 0.
/// The result is bilinearly resized to `size` x `size`.
pub fn render_flow_image(flow: &FlowField, size: usize) -> FlowImage {
    let (w, h) = (flow.width, flow.height);
    let peak = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| flow.magnitude(x, y))
        .fold(0.0, f64::max);
    let scale = if peak > 1e-12 { 1.0 / peak } else { 0.0 };
    let channels: Vec<Frame> = (0..3)
        .map(|c| {
            let data = flow
                .data
                .iter()
                .map(|[dx, dy]| match c {
                    0 => dx * scale,
                    1 => dy * scale,
                    _ => dx.hypot(*dy) * scale,
                })
                .collect();
            Frame::new(w, h, data)
        })
        .collect();
    let mut data = Vec::with_capacity(3 * size * size);
    for ch in &channels {
        if w == size && h == size {
            data.extend_from_slice(&ch.data);
            continue;
        }
        let sx = w as f64 / size as f64;
        let sy = h as f64 / size as f64;
        for y in 0..size {
            for x in 0..size {
                data.push(ch.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5));
            }
        }
    }
    FlowImage { size, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn texture(size: usize, seed: u64) -> Frame {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Frame::new(size, size, (0..size * size).map(|_| rng.gen_range(0.0..255.0)).collect());
        let smooth = noise.blur(2.0);
        let (lo, hi) = smooth.data.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        Frame::new(size, size, smooth.data.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect())
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = texture(64, 3);
        let flow = compute_flow(&f, &f, &LucasKanade::default()).unwrap();
        assert!(flow.data.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn recovers_two_pixel_translation() {
        let base = texture(128, 9);
        // apex(x) = onset(x - 2): the content moves 2px to the right.
        let shifted = Frame::new(
            128,
            128,
            (0..128 * 128).map(|k| base.clamped((k % 128) as isize - 2, (k / 128) as isize)).collect(),
        );
        let flow = compute_flow(&base, &shifted, &LucasKanade::default()).unwrap();
        // Ignore the 16px border where clamping distorts the signal.
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 16..112 {
            for x in 16..112 {
                let [dx, dy] = flow.at(x, y);
                sx += dx;
                sy += dy;
                n += 1.0;
            }
        }
        let (mx, my) = (sx / n, sy / n);
        assert!((mx - 2.0).abs() < 0.5, "mean dx {mx}");
        assert!(my.abs() < 0.5, "mean dy {my}");
        let [gx, gy] = flow.mean();
        assert!((gx - 2.0).abs() < 0.5 && gy.abs() < 0.5, "global mean ({gx}, {gy})");
    }

    #[test]
    fn size_mismatch() {
        let err = compute_flow(&Frame::zeros(224, 224), &Frame::zeros(200, 200), &LucasKanade::default());
        assert!(matches!(err, Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn magnification_cases() {
        let flow = FlowField { width: 2, height: 1, data: vec![[1.0, 0.0], [1.0, 0.0]] };
        assert_eq!(magnify_flow(&flow, 1.0).unwrap(), flow);
        assert_eq!(magnify_flow(&flow, 3.0).unwrap().data, vec![[3.0, 0.0], [3.0, 0.0]]);
        assert!(matches!(magnify_flow(&flow, 0.0), Err(Error::NonPositiveFactor(_))));
        assert!(matches!(magnify_flow(&flow, -1.0), Err(Error::NonPositiveFactor(_))));
    }

    #[test]
    fn flow_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flow");
        let flow = FlowField { width: 3, height: 2, data: (0..6).map(|i| [i as f64, -0.5 * i as f64]).collect() };
        flow.save(&path).unwrap();
        assert_eq!(FlowField::load(&path).unwrap(), flow);
        std::fs::write(&path, b"MAUFLOW1 2 3 f32\n1234").unwrap();
        assert!(FlowField::load(&path).is_err());
    }

    #[test]
    fn rendering_keeps_zero_motion_at_zero() {
        let mut flow = FlowField::zeros(4, 4);
        flow.data[5] = [3.0, -4.0];
        let img = render_flow_image(&flow, 4);
        assert!((img.data[5] - 0.6).abs() < 1e-15);
        assert!((img.data[16 + 5] + 0.8).abs() < 1e-15);
        assert_eq!(img.data[32 + 5], 1.0);
        assert_eq!(img.data[0], 0.0);
        let still = render_flow_image(&FlowField::zeros(4, 4), 8);
        assert!(still.data.iter().all(|v| *v == 0.0));
        assert_eq!(still.data.len(), 3 * 64);
    }

    proptest::proptest! {
        #[test]
        fn magnification_composes(a in 0.01f64..10.0, b in 0.01f64..10.0, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            // Powers of two keep both paths exact in floating point.
            let a = 2f64.powi(a.log2().round() as i32);
            let b = 2f64.powi(b.log2().round() as i32);
            let flow = FlowField { width: 1, height: 1, data: vec![[dx, dy]] };
            let twice = magnify_flow(&magnify_flow(&flow, a).unwrap(), b).unwrap();
            proptest::prop_assert_eq!(twice, magnify_flow(&flow, a * b).unwrap());
        }
    }
}
