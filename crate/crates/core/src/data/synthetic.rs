//! Synthetic micro-expression pairs with known AU ground truth.
//!
//! The onset frame is a blurred noise texture. The apex frame warps it by a
//! smooth bump displacement inside the region of every active AU. The AU's
//! landmarks are placed inside its region and the remaining landmarks
//! follow a fixed face template. Emotions follow the nearest AU prototype.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mer::{EmotionEntry, EmotionSpec, LabelEmbedding};
use crate::preprocess::{Frame, Landmarks};
use crate::task::{default_au_entry, validate_task_spec, AuTaskSpec, NUM_LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Cycle through every AU combination, including none.
    Balanced,
    /// Cycle through every combination with at least one active AU.
    Nonzero,
    /// Each AU active with probability 1/2.
    Random,
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` and the peak displacement
/// injected there when the AU is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub au: u32,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    /// sin^2 bump weight, zero on and outside the border.
    pub fn weight(&self, x: f64, y: f64) -> f64 {
        if !self.contains(x, y) {
            return 0.0;
        }
        let tx = (x - self.x0 as f64) / (self.x1 - self.x0) as f64;
        let ty = (y - self.y0 as f64) / (self.y1 - self.y0) as f64;
        (std::f64::consts::PI * tx).sin().powi(2) * (std::f64::consts::PI * ty).sin().powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub image_size: usize,
    pub labels: LabelMode,
    /// Texture blur; each subject draws from sigma +- sigma_spread.
    pub texture_sigma: f64,
    pub sigma_spread: f64,
    /// Per-subject landmark offset bound, in pixels.
    pub landmark_jitter: f64,
    /// Per-sample motion intensity range.
    pub intensity: [f64; 2],
    /// Std of pixel noise added to both frames.
    pub noise: f64,
    #[serde(rename = "region")]
    pub regions: Vec<Region>,
    /// AU pairs that always activate together.
    #[serde(default)]
    pub cooccur: Vec<[u32; 2]>,
    /// Emotion rule; defaults to positive = last AU, negative = first AU,
    /// surprise = all AUs.
    #[serde(default, rename = "emotion", skip_serializing_if = "Vec::is_empty")]
    pub emotions: Vec<EmotionEntry>,
}

impl Default for SyntheticSpec {
    /// Two subjects of eight samples with AU4 in a brow band and AU12 in a
    /// mouth band.
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 2,
            samples_per_subject: 8,
            image_size: 224,
            labels: LabelMode::Nonzero,
            texture_sigma: 2.0,
            sigma_spread: 0.4,
            landmark_jitter: 4.0,
            intensity: [0.8, 1.2],
            noise: 0.0,
            regions: vec![
                Region { au: 4, x0: 48, y0: 40, x1: 176, y1: 104, dx: 0.0, dy: 3.0 },
                Region { au: 12, x0: 48, y0: 144, x1: 176, y1: 208, dx: 0.0, dy: -3.0 },
            ],
            cooccur: Vec::new(),
            emotions: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<SyntheticSpec> {
        toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {}", e.message())))
    }

    pub fn from_file(path: &Path) -> Result<SyntheticSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        SyntheticSpec::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synthetic spec serializes")
    }

    /// Task built from the region AUs, in region order.
    pub fn task(&self) -> Result<AuTaskSpec> {
        let aus = self
            .regions
            .iter()
            .map(|r| default_au_entry(r.au).ok_or_else(|| Error::Config(format!("AU{} has no landmark table entry", r.au))))
            .collect::<Result<Vec<_>>>()?;
        validate_task_spec(AuTaskSpec { aus })
    }

    pub fn emotion_spec(&self) -> Result<EmotionSpec> {
        let emotions = if self.emotions.is_empty() {
            let ids: Vec<u32> = self.regions.iter().map(|r| r.au).collect();
            let entry = |name: &str, proto: Vec<u32>| EmotionEntry {
                name: name.into(),
                text: format!("A face showing a {name} emotion"),
                prototype: Some(proto),
            };
            let mut v = vec![entry("positive", vec![*ids.last().expect("validated")]), entry("negative", vec![ids[0]])];
            if ids.len() == 1 {
                v[1].prototype = Some(Vec::new());
            } else {
                v.push(entry("surprise", ids.clone()));
            }
            v
        } else {
            self.emotions.clone()
        };
        EmotionSpec { emotions, embedding: LabelEmbedding::Prototype, au_filter: None }.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one region".into()));
        }
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return Err(Error::Config("synthetic spec needs subjects and samples".into()));
        }
        if self.image_size < 16 || !(self.texture_sigma > 0.0) || self.intensity[0] > self.intensity[1] {
            return Err(Error::Config("synthetic spec has an invalid image size, sigma or intensity".into()));
        }
        for r in &self.regions {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > self.image_size || r.y1 > self.image_size {
                return Err(Error::RegionOutOfBounds { au: r.au, size: self.image_size });
            }
        }
        let task = self.task()?;
        for (i, a) in task.aus.iter().enumerate() {
            for b in &task.aus[i + 1..] {
                if a.landmarks.iter().any(|l| b.landmarks.contains(l)) {
                    return Err(Error::Config(format!("AU{} and AU{} share landmarks", a.id, b.id)));
                }
            }
        }
        for [a, b] in &self.cooccur {
            if task.position(*a).is_none() || task.position(*b).is_none() {
                return Err(Error::Config(format!("co-occurrence pair ({a}, {b}) names an AU without a region")));
            }
        }
        self.emotion_spec()?;
        Ok(())
    }
}

/// A neutral 68-point layout for a 224 px face, scaled to `size`.
pub fn template_landmarks(size: usize) -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let t = i as f64 / 16.0;
        p.push([32.0 + 160.0 * t, 120.0 + 80.0 * (PI * t).sin()]);
    }
    for i in 0..10 {
        p.push([50.0 + 124.0 * i as f64 / 9.0, 70.0]);
    }
    for i in 0..4 {
        p.push([112.0, 90.0 + 13.0 * i as f64]);
    }
    for i in 0..5 {
        p.push([96.0 + 8.0 * i as f64, 138.0]);
    }
    for cx in [80.0, 144.0] {
        for i in 0..6 {
            let a = PI * i as f64 / 3.0;
            p.push([cx + 12.0 * a.cos(), 95.0 - 5.0 * a.sin()]);
        }
    }
    for (n, rx, ry) in [(12, 28.0, 12.0), (8, 18.0, 6.0)] {
        for i in 0..n {
            let a = PI - 2.0 * PI * i as f64 / n as f64;
            p.push([112.0 + rx * a.cos(), 176.0 - ry * a.sin()]);
        }
    }
    let s = size as f64 / 224.0;
    let hi = size as f64 - 1.0;
    p.into_iter().map(|[x, y]| [(x * s).clamp(0.0, hi), (y * s).clamp(0.0, hi)]).collect()
}

fn texture(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Frame {
    let raw = Frame::new(size, size, (0..size * size).map(|_| rng.gen::<f64>()).collect());
    let blurred = raw.blur(sigma);
    let (lo, hi) = blurred.data.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = (hi - lo).max(1e-12);
    Frame::new(size, size, blurred.data.iter().map(|v| (v - lo) / span * 255.0).collect())
}

/// Backward warp of `onset` by the bump displacements of `active` regions.
pub fn warp(onset: &Frame, active: &[(&Region, f64)]) -> Frame {
    let mut out = onset.clone();
    for y in 0..onset.height {
        for x in 0..onset.width {
            let (px, py) = (x as f64, y as f64);
            let (mut ux, mut uy) = (0.0, 0.0);
            for (r, k) in active {
                let w = r.weight(px, py) * k;
                ux += w * r.dx;
                uy += w * r.dy;
            }
            if ux != 0.0 || uy != 0.0 {
                out.data[y * onset.width + x] = onset.sample(px - ux, py - uy);
            }
        }
    }
    out
}

fn add_noise(frame: &mut Frame, rng: &mut ChaCha8Rng, std: f64) {
    if std > 0.0 {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        for v in &mut frame.data {
            *v += rng.sample(dist);
        }
    }
}

fn combination(mode: LabelMode, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let bits = |c: usize| (0..n).map(|i| ((c >> i) & 1) as u8).collect();
    let count = 1usize << n.min(20);
    match mode {
        LabelMode::Balanced => bits(k % count),
        LabelMode::Nonzero => bits(1 + k % (count - 1)),
        LabelMode::Random => (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub subject: String,
    pub labels: Vec<u8>,
    pub emotion: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub manifest: PathBuf,
    pub task_file: PathBuf,
    pub emotion_file: PathBuf,
    pub config_file: PathBuf,
    pub task: AuTaskSpec,
    pub emotions: EmotionSpec,
    pub samples: Vec<SyntheticSample>,
}

/// Training config tuned for the synthetic set and the toy encoder.
pub fn synthetic_train_config(spec: &SyntheticSpec) -> Config {
    let mut c = Config::with_coefficients(0.6, 1.0);
    c.input_size = spec.image_size;
    c.toy_patch = spec.image_size / 7;
    c.finetune_last_k_layers = 1;
    c.lr_encoders = 0.01;
    c.gd_normalize_labels = true;
    c.epochs = 300;
    c.lr_decay_epoch = 200;
    c.task = "task.toml".into();
    c.emotion_spec = Some("emotions.toml".into());
    c.run_name = "synthetic".into();
    c
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes frames, landmarks, the manifest, the task, the emotion spec and a
/// matching training config under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<SyntheticOutput> {
    spec.validate()?;
    let task = spec.task()?;
    let emotions = spec.emotion_spec()?;
    for dir in [out.to_path_buf(), out.join("frames"), out.join("landmarks")] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let template = template_landmarks(size);
    let n = spec.regions.len();
    let mut manifest = String::from("sample_id,subject_id,onset,apex,flow,landmarks,aus,emotion\n");
    let mut samples = Vec::new();
    for s in 0..spec.n_subjects {
        let subject = format!("s{:02}", s + 1);
        let sigma = spec.texture_sigma + spec.sigma_spread * (2.0 * rng.gen::<f64>() - 1.0);
        let offsets: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let j = spec.landmark_jitter;
                [rng.gen_range(-j..=j), rng.gen_range(-j..=j)]
            })
            .collect();
        for k in 0..spec.samples_per_subject {
            let id = format!("{subject}_{k:03}");
            let mut labels = combination(spec.labels, n, k + s, &mut rng);
            for [a, b] in &spec.cooccur {
                let (i, j) = (task.position(*a).expect("validated"), task.position(*b).expect("validated"));
                if labels[i] == 1 || labels[j] == 1 {
                    labels[i] = 1;
                    labels[j] = 1;
                }
            }
            let mut onset = texture(&mut rng, size, sigma.max(0.5));
            let active: Vec<(&Region, f64)> = spec
                .regions
                .iter()
                .zip(&labels)
                .filter(|(_, y)| **y == 1)
                .map(|(r, _)| (r, rng.gen_range(spec.intensity[0]..=spec.intensity[1])))
                .collect();
            let mut apex = warp(&onset, &active);
            add_noise(&mut onset, &mut rng, spec.noise);
            add_noise(&mut apex, &mut rng, spec.noise);

            let mut points = template.clone();
            for ((region, au), off) in spec.regions.iter().zip(&task.aus).zip(&offsets) {
                let m = au.landmarks.len();
                let cy = (region.y0 + region.y1) as f64 / 2.0;
                for (j, &idx) in au.landmarks.iter().enumerate() {
                    let x = region.x0 as f64 + (j as f64 + 0.5) / m as f64 * (region.x1 - region.x0) as f64;
                    let x = (x + off[0] + rng.gen_range(-1.0..=1.0)).clamp(region.x0 as f64 + 1.0, region.x1 as f64 - 2.0);
                    let y = (cy + off[1] + rng.gen_range(-1.0..=1.0)).clamp(region.y0 as f64 + 1.0, region.y1 as f64 - 2.0);
                    points[idx] = [(x * 100.0).round() / 100.0, (y * 100.0).round() / 100.0];
                }
            }
            let landmarks = Landmarks::new(points)?;

            let onset_rel = format!("frames/{id}_onset.png");
            let apex_rel = format!("frames/{id}_apex.png");
            let lm_rel = format!("landmarks/{id}.txt");
            onset.save_png(&out.join(&onset_rel))?;
            apex.save_png(&out.join(&apex_rel))?;
            write(&out.join(&lm_rel), &landmarks.to_text())?;
            let aus: Vec<String> =
                task.aus.iter().zip(&labels).filter(|(_, y)| **y == 1).map(|(a, _)| a.id.to_string()).collect();
            let emotion = emotions.emotions[emotions.rule_emotion(&task, &labels).expect("prototypes set")].name.clone();
            writeln!(manifest, "{id},{subject},{onset_rel},{apex_rel},,{lm_rel},{},{emotion}", aus.join("+"))
                .expect("string write");
            samples.push(SyntheticSample { id, subject: subject.clone(), labels, emotion });
        }
    }
    let paths = SyntheticOutput {
        manifest: out.join("manifest.csv"),
        task_file: out.join("task.toml"),
        emotion_file: out.join("emotions.toml"),
        config_file: out.join("train.toml"),
        task,
        emotions,
        samples,
    };
    write(&paths.manifest, &manifest)?;
    write(&paths.task_file, &paths.task.to_toml())?;
    write(&paths.emotion_file, &paths.emotions.to_toml())?;
    write(&paths.config_file, &synthetic_train_config(spec).to_toml())?;
    write(&out.join("synthetic.toml"), &spec.to_toml())?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_in_bounds() {
        let lm = Landmarks::new(template_landmarks(224)).unwrap();
        lm.check_bounds(224, 224).unwrap();
        Landmarks::new(template_landmarks(64)).unwrap().check_bounds(64, 64).unwrap();
    }

    #[test]
    fn default_spec_is_valid() {
        let spec = SyntheticSpec::default();
        spec.validate().unwrap();
        assert_eq!(SyntheticSpec::from_toml_str(&spec.to_toml()).unwrap(), spec);
        assert_eq!(spec.task().unwrap().au_ids(), vec![4, 12]);
        let e = spec.emotion_spec().unwrap();
        assert_eq!(e.len(), 3);
    }

    #[test]
    fn out_of_bounds_region() {
        let mut spec = SyntheticSpec::default();
        spec.regions[1].y1 = 300;
        assert!(matches!(spec.validate(), Err(Error::RegionOutOfBounds { au: 12, size: 224 })));
    }

    #[test]
    fn label_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nz: Vec<Vec<u8>> = (0..3).map(|k| combination(LabelMode::Nonzero, 2, k, &mut rng)).collect();
        assert_eq!(nz, vec![vec![1, 0], vec![0, 1], vec![1, 1]]);
        let b: Vec<Vec<u8>> = (0..4).map(|k| combination(LabelMode::Balanced, 2, k, &mut rng)).collect();
        assert_eq!(b, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
    }

    #[test]
    fn warp_moves_only_inside_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let onset = texture(&mut rng, 64, 2.0);
        let r = Region { au: 4, x0: 10, y0: 10, x1: 40, y1: 30, dx: 2.0, dy: 0.0 };
        let apex = warp(&onset, &[(&r, 1.0)]);
        for y in 0..64 {
            for x in 0..64 {
                if !r.contains(x as f64, y as f64) {
                    assert_eq!(apex.at(x, y), onset.at(x, y));
                }
            }
        }
        assert_ne!(apex.data, onset.data);
        assert_eq!(warp(&onset, &[]).data, onset.data);
    }
}
