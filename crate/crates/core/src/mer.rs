//! Zero-shot emotion recognition from per-AU visual features.
//!
//! Each emotion is scored by summing, over AUs, the cosine between the AU's
//! projected visual feature and the emotion's label embedding. No emotion
//! labels are used for training.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, l2_normalize};
use crate::task::AuTaskSpec;

/// How label embeddings are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEmbedding {
    /// Encode each emotion's label text.
    #[default]
    Text,
    /// Build each emotion's embedding from the AU prompt embeddings named by
    /// its prototype: normalize(Σ_n normalize(E_n)), with E_n the positive
    /// prompt of AU n when it is in the prototype and the negative one
    /// otherwise.
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionEntry {
    pub name: String,
    pub text: String,
    /// Active AU ids characterizing the emotion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionSpec {
    #[serde(rename = "emotion")]
    pub emotions: Vec<EmotionEntry>,
    #[serde(default)]
    pub embedding: LabelEmbedding,
    /// Emotion name to the AU ids allowed to contribute to its score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub au_filter: Option<BTreeMap<String, Vec<u32>>>,
}

impl Default for EmotionSpec {
    /// Three categories with placeholder label texts.
    fn default() -> Self {
        let entry = |name: &str, text: &str| EmotionEntry { name: name.into(), text: text.into(), prototype: None };
        EmotionSpec {
            emotions: vec![
                entry("positive", "A face showing a positive emotion"),
                entry("negative", "A face showing a negative emotion"),
                entry("surprise", "A face showing surprise"),
            ],
            embedding: LabelEmbedding::Text,
            au_filter: None,
        }
    }
}

impl EmotionSpec {
    pub fn validate(self) -> Result<EmotionSpec> {
        if self.emotions.len() < 2 {
            return Err(Error::EmotionSpec(format!("need at least 2 emotions, got {}", self.emotions.len())));
        }
        for (i, e) in self.emotions.iter().enumerate() {
            if e.name.trim().is_empty() || e.text.trim().is_empty() {
                return Err(Error::EmotionSpec(format!("emotion {i} has an empty name or text")));
            }
            if self.emotions[..i].iter().any(|o| o.text == e.text || o.name == e.name) {
                return Err(Error::EmotionSpec(format!("emotion `{}` repeats a name or text", e.name)));
            }
            if self.embedding == LabelEmbedding::Prototype && e.prototype.is_none() {
                return Err(Error::EmotionSpec(format!("emotion `{}` has no prototype", e.name)));
            }
        }
        if let Some(filter) = &self.au_filter {
            if let Some(k) = filter.keys().find(|k| self.index(k).is_none()) {
                return Err(Error::EmotionSpec(format!("filter names unknown emotion `{k}`")));
            }
        }
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<EmotionSpec> {
        let spec: EmotionSpec = toml::from_str(text).map_err(|e| Error::EmotionSpec(e.message().to_string()))?;
        spec.validate()
    }

    pub fn from_file(path: &Path) -> Result<EmotionSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        EmotionSpec::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("emotion spec serializes")
    }

    pub fn len(&self) -> usize {
        self.emotions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emotions.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.emotions.iter().position(|e| e.name == name)
    }

    pub fn texts(&self) -> Vec<&str> {
        self.emotions.iter().map(|e| e.text.as_str()).collect()
    }

    /// R x N contribution mask, or `None` when unfiltered.
    pub fn filter_mask(&self, task: &AuTaskSpec) -> Result<Option<Vec<Vec<bool>>>> {
        let Some(filter) = &self.au_filter else { return Ok(None) };
        let ids = task.au_ids();
        let mask = self
            .emotions
            .iter()
            .map(|e| {
                let allowed = filter.get(&e.name).map(Vec::as_slice).unwrap_or(&[]);
                ids.iter().map(|id| allowed.contains(id)).collect()
            })
            .collect();
        Ok(Some(mask))
    }

    /// Index of the emotion whose prototype is nearest in Hamming distance
    /// to `labels` (ordered per `task`); lowest index wins ties.
    pub fn rule_emotion(&self, task: &AuTaskSpec, labels: &[u8]) -> Option<usize> {
        let ids = task.au_ids();
        let mut best: Option<(usize, usize)> = None;
        for (r, e) in self.emotions.iter().enumerate() {
            let proto = e.prototype.as_ref()?;
            let dist = ids
                .iter()
                .zip(labels)
                .filter(|(id, y)| proto.contains(id) != (**y == 1))
                .count();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((r, dist));
            }
        }
        best.map(|(r, _)| r)
    }
}

/// (R, d_t) label embeddings built from AU prompt embeddings.
pub fn prototype_embeddings(spec: &EmotionSpec, task: &AuTaskSpec, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    let pos = l2_normalize(pos)?;
    let neg = l2_normalize(neg)?;
    let ids = task.au_ids();
    let rows = spec
        .emotions
        .iter()
        .map(|e| {
            let proto = e
                .prototype
                .as_ref()
                .ok_or_else(|| Error::EmotionSpec(format!("emotion `{}` has no prototype", e.name)))?;
            let picks = ids
                .iter()
                .enumerate()
                .map(|(n, id)| if proto.contains(id) { pos.get(n) } else { neg.get(n) })
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(Tensor::stack(&picks, 0)?.sum(0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    l2_normalize(&Tensor::stack(&rows, 0)?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// score_r = Σ_n cos(F_n, L_r) over the AUs the filter lets contribute.
pub fn emotion_scores(au_visual: &[Vec<f64>], labels: &[Vec<f64>], filter: Option<&[Vec<bool>]>) -> Result<Vec<f64>> {
    for (i, row) in au_visual.iter().chain(labels).enumerate() {
        if row.iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNormRow(i));
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, l)| {
            let mut used = 0;
            let mut score = 0.0;
            for (n, f) in au_visual.iter().enumerate() {
                if filter.is_none_or(|m| m[r][n]) {
                    used += 1;
                    score += cosine(f, l);
                }
            }
            if used == 0 {
                return Err(Error::EmptyContribution { emotion: r.to_string() });
            }
            Ok(score)
        })
        .collect()
}

/// Argmax with ties going to the lowest index.
pub fn classify_emotion(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// R x R confusion counts, rows are true classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionConfusion {
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmotionMetrics {
    pub per_class: Vec<ClassMetric>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetric {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f1: f64,
}

impl EmotionConfusion {
    pub fn new(r: usize) -> Self {
        EmotionConfusion { counts: vec![vec![0; r]; r] }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &EmotionConfusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn metrics(&self, names: &[&str]) -> Result<EmotionMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let r = self.counts.len();
        let per_class: Vec<ClassMetric> = (0..r)
            .map(|c| {
                let tp = self.counts[c][c];
                let fp = (0..r).filter(|&t| t != c).map(|t| self.counts[t][c]).sum();
                let fn_ = (0..r).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
                ClassMetric { name: names.get(c).map_or(c.to_string(), |s| s.to_string()), tp, fp, fn_, f1: f1(tp, fp, fn_) }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / r as f64;
        let correct: u64 = (0..r).map(|c| self.counts[c][c]).sum();
        Ok(EmotionMetrics { per_class, macro_f1, accuracy: correct as f64 / total as f64, total })
    }
}

/// 2TP / (2TP + FP + FN), zero when nothing was present or predicted.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// Rows of an (N, d_t) tensor as host vectors.
pub fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_device(&device())?.to_vec2::<f64>()?)
}
