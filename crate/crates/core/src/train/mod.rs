//! Leave-one-subject-out training and evaluation.

pub mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mer::{classify_emotion, emotion_scores, f1, rows, EmotionConfusion, EmotionMetrics, EmotionSpec};
use crate::model::{predictions, Model, PreparedSample};
use crate::nn::{Param, ParamGroup};
use crate::task::AuTaskSpec;
use checkpoint::{Checkpoint, FoldMeta, RngState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub held_out_subject: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// One fold per subject, in sorted subject order. Sample order within a
/// fold follows the input.
pub fn loso_split<'a>(samples: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Vec<Fold>> {
    let samples: Vec<(&str, &str)> = samples.into_iter().collect();
    let subjects: BTreeSet<&str> = samples.iter().map(|(_, s)| *s).collect();
    if subjects.len() < 2 {
        return Err(Error::SingleSubject);
    }
    Ok(subjects
        .into_iter()
        .enumerate()
        .map(|(index, held)| {
            let (test, train): (Vec<_>, Vec<_>) = samples.iter().partition(|(_, s)| *s == held);
            Fold {
                index,
                held_out_subject: held.to_string(),
                train_ids: train.into_iter().map(|(id, _)| id.to_string()).collect(),
                test_ids: test.into_iter().map(|(id, _)| id.to_string()).collect(),
            }
        })
        .collect())
}

/// (encoder, head) learning rates. Both drop tenfold from the 0-based epoch
/// index `lr_decay_epoch` on, so with the defaults epochs 0..=39 run at
/// the base rates and epochs 40..=79 at a tenth.
pub fn lr_schedule(config: &Config, epoch: usize) -> (f64, f64) {
    let factor = if epoch >= config.lr_decay_epoch { 0.1 } else { 1.0 };
    (config.lr_encoders * factor, config.lr_heads * factor)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Running per-AU confusion counts, plus emotion counts when scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricAccumulator {
    pub au_ids: Vec<u32>,
    pub counts: Vec<Counts>,
    pub emotion: Option<EmotionConfusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuMetric {
    pub au: u32,
    #[serde(flatten)]
    pub counts: Counts,
    pub f1: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuMetrics {
    pub per_au: Vec<AuMetric>,
    pub f1: f64,
    pub acc: f64,
    pub samples: u64,
}

impl MetricAccumulator {
    pub fn new(au_ids: Vec<u32>) -> Self {
        let n = au_ids.len();
        MetricAccumulator { au_ids, counts: vec![Counts::default(); n], emotion: None }
    }

    pub fn add(&mut self, truth: &[u8], predicted: &[u8]) {
        for ((c, t), p) in self.counts.iter_mut().zip(truth).zip(predicted) {
            match (*t == 1, *p == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }

    pub fn add_emotion(&mut self, r: usize, truth: usize, predicted: usize) {
        self.emotion.get_or_insert_with(|| EmotionConfusion::new(r)).add(truth, predicted);
    }

    /// Associative, commutative merge.
    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        match (&mut self.emotion, &other.emotion) {
            (Some(a), Some(b)) => a.merge(b),
            (None, Some(b)) => self.emotion = Some(b.clone()),
            _ => {}
        }
    }

    pub fn samples(&self) -> u64 {
        self.counts.first().map_or(0, Counts::total)
    }

    /// Per-AU F1 and accuracy over the accumulated counts, macro-averaged.
    pub fn f1_and_acc(&self) -> Result<AuMetrics> {
        let total = self.samples();
        if total == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let per_au: Vec<AuMetric> = self
            .au_ids
            .iter()
            .zip(&self.counts)
            .map(|(&au, c)| AuMetric {
                au,
                counts: *c,
                f1: f1(c.tp, c.fp, c.fn_),
                acc: (c.tp + c.tn) as f64 / c.total() as f64,
            })
            .collect();
        let n = per_au.len() as f64;
        Ok(AuMetrics {
            f1: per_au.iter().map(|m| m.f1).sum::<f64>() / n,
            acc: per_au.iter().map(|m| m.acc).sum::<f64>() / n,
            per_au,
            samples: total,
        })
    }
}

/// SGD with momentum: v = mu v + g, w = w - lr v.
pub struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &[&Param], grads: &GradStore, lrs: (f64, f64)) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            let lr = match p.group {
                ParamGroup::Encoder => lrs.0,
                ParamGroup::Head => lrs.1,
            };
            let v = match (self.velocity.get(&p.name), grads.get(p.raw())) {
                (Some(v), Some(g)) => ((v * self.momentum)? + g)?,
                (Some(v), None) => (v * self.momentum)?,
                (None, Some(g)) => g.detach(),
                (None, None) => continue,
            };
            p.set(&(p.raw().detach() - (&v * lr)?)?)?;
            self.velocity.insert(p.name.clone(), v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Root for checkpoints; none are written when absent.
    pub out_dir: Option<PathBuf>,
    pub emotion: Option<EmotionSpec>,
    /// Train folds on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossSummary {
    pub total: f64,
    pub multitask: f64,
    pub contrastive: f64,
    pub gd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePrediction {
    pub id: String,
    /// P_n[1] per AU.
    pub probs: Vec<f64>,
    pub predicted: Vec<u8>,
    pub labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion_predicted: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricAccumulator,
    pub predictions: Vec<SamplePrediction>,
}

/// Runs the model over `samples` in minibatches of the configured size.
/// Emotion scores are computed when `emotion` is given, and counted for
/// samples carrying an emotion label.
pub fn evaluate(model: &Model, samples: &[&PreparedSample], emotion: Option<&EmotionSpec>) -> Result<Evaluation> {
    let mut metrics = MetricAccumulator::new(model.task.au_ids());
    let mer = match emotion {
        Some(spec) => Some((spec, rows(&model.label_embeddings(spec)?)?, spec.filter_mask(&model.task)?)),
        None => None,
    };
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(model.config.batch_size) {
        let fwd = model.forward(batch)?;
        let preds = predictions(&fwd.probs)?;
        let probs = fwd.probs.to_vec3::<f64>()?;
        let projected = fwd.projected.to_vec3::<f64>()?;
        for (i, s) in batch.iter().enumerate() {
            metrics.add(&s.labels, &preds[i]);
            let mut p = SamplePrediction {
                id: s.id.clone(),
                probs: probs[i].iter().map(|pn| pn[1]).collect(),
                predicted: preds[i].clone(),
                labels: s.labels.clone(),
                emotion_scores: None,
                emotion_predicted: None,
                emotion: s.emotion.clone(),
            };
            if let Some((spec, labels, mask)) = &mer {
                let scores = emotion_scores(&projected[i], labels, mask.as_deref())?;
                let k = classify_emotion(&scores);
                if let Some(name) = &s.emotion {
                    let truth = spec
                        .index(name)
                        .ok_or_else(|| Error::EmotionSpec(format!("sample {} has unknown emotion `{name}`", s.id)))?;
                    metrics.add_emotion(spec.len(), truth, k);
                }
                p.emotion_scores = Some(scores);
                p.emotion_predicted = Some(spec.emotions[k].name.clone());
            }
            out.push(p);
        }
    }
    Ok(Evaluation { metrics, predictions: out })
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: FoldMeta,
    pub n_train: usize,
    pub n_test: usize,
    /// Mean losses over the last epoch.
    pub final_loss: LossSummary,
    pub test: Evaluation,
    pub train: Evaluation,
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, run_name: &str, fold: usize, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(run_name).join(format!("fold{fold:02}")).join(format!("epoch_{epoch}.ckpt"))
}

fn select<'a>(samples: &'a [PreparedSample], ids: &[String]) -> Vec<&'a PreparedSample> {
    let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    samples.iter().filter(|s| set.contains(s.id.as_str())).collect()
}

/// Trains a freshly seeded model on the fold's training subjects.
pub fn train_fold(
    config: &Config,
    task: &AuTaskSpec,
    samples: &[PreparedSample],
    fold: &Fold,
    opts: &TrainOptions,
) -> Result<(Model, FoldResult)> {
    let model = Model::new(config, task)?;
    let train = select(samples, &fold.train_ids);
    let test = select(samples, &fold.test_ids);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.momentum);
    let params = model.trainable_params();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut summary = LossSummary::default();
    for epoch in 0..config.epochs {
        let lrs = lr_schedule(config, epoch);
        order.shuffle(&mut rng);
        let mut acc = LossSummary::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<Vec<u8>> = batch.iter().map(|s| s.labels.clone()).collect();
            let out = model.forward(&batch)?;
            let loss = model.loss(&out, &labels)?;
            let total = loss.total.to_scalar::<f64>()?;
            if !total.is_finite() {
                return Err(Error::DivergedLoss {
                    fold: fold.held_out_subject.clone(),
                    epoch,
                    detail: format!(
                        "total {total}, multitask {}, contrastive {}, gd {}",
                        loss.multitask, loss.contrastive, loss.gd
                    ),
                });
            }
            let grads = loss.total.backward()?;
            sgd.step(&params, &grads, lrs)?;
            let w = batch.len() as f64 / train.len() as f64;
            acc.total += w * total;
            acc.multitask += w * loss.multitask;
            acc.contrastive += w * loss.contrastive;
            acc.gd += w * loss.gd;
        }
        summary = acc;
    }
    let meta = FoldMeta { index: fold.index, held_out: fold.held_out_subject.clone() };
    let checkpoint = match &opts.out_dir {
        Some(out) => {
            let path = checkpoint_path(out, &config.run_name, fold.index, config.epochs);
            let mut ckpt = Checkpoint::from_tensors(&model.named_tensors()?)?;
            ckpt.config = Some(config.clone());
            ckpt.task = Some(task.clone());
            ckpt.epoch = Some(config.epochs);
            ckpt.fold = Some(meta.clone());
            ckpt.rng = Some(RngState { seed: config.seed, word_pos: rng.get_word_pos().to_string() });
            ckpt.save(&path)?;
            Some(path)
        }
        None => None,
    };
    let emotion = opts.emotion.as_ref();
    let result = FoldResult {
        fold: meta,
        n_train: train.len(),
        n_test: test.len(),
        final_loss: summary,
        test: evaluate(&model, &test, emotion)?,
        train: evaluate(&model, &train, emotion)?,
        checkpoint,
    };
    Ok((model, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsBlock {
    #[serde(flatten)]
    pub au: AuMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mer: Option<EmotionMetrics>,
}

impl MetricsBlock {
    pub fn from_accumulator(acc: &MetricAccumulator, emotion: Option<&EmotionSpec>) -> Result<MetricsBlock> {
        let mer = match (&acc.emotion, emotion) {
            (Some(c), Some(spec)) => {
                let names: Vec<&str> = spec.emotions.iter().map(|e| e.name.as_str()).collect();
                Some(c.metrics(&names)?)
            }
            _ => None,
        };
        Ok(MetricsBlock { au: acc.f1_and_acc()?, mer })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub index: usize,
    pub held_out: String,
    pub n_train: usize,
    pub n_test: usize,
    pub final_loss: LossSummary,
    pub test: MetricsBlock,
    pub train: MetricsBlock,
}

/// The aggregate results file of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: Config,
    pub aus: Vec<u32>,
    pub test: MetricsBlock,
    pub train: MetricsBlock,
    pub folds: Vec<FoldReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs every LOSO fold and accumulates test predictions over all of them.
pub fn run_loso(
    config: &Config,
    task: &AuTaskSpec,
    samples: &[PreparedSample],
    opts: &TrainOptions,
) -> Result<(RunReport, Vec<FoldResult>)> {
    let folds = loso_split(samples.iter().map(|s| (s.id.as_str(), s.subject.as_str())))?;
    let run = |f: &Fold| train_fold(config, task, samples, f, opts).map(|(_, r)| r);
    let results: Vec<FoldResult> = if opts.parallel {
        folds.par_iter().map(run).collect::<Result<_>>()?
    } else {
        folds.iter().map(run).collect::<Result<_>>()?
    };
    let emotion = opts.emotion.as_ref();
    let mut test = MetricAccumulator::new(task.au_ids());
    let mut train = MetricAccumulator::new(task.au_ids());
    let mut reports = Vec::with_capacity(results.len());
    for r in &results {
        test.merge(&r.test.metrics);
        train.merge(&r.train.metrics);
        reports.push(FoldReport {
            index: r.fold.index,
            held_out: r.fold.held_out.clone(),
            n_train: r.n_train,
            n_test: r.n_test,
            final_loss: r.final_loss,
            test: MetricsBlock::from_accumulator(&r.test.metrics, emotion)?,
            train: MetricsBlock::from_accumulator(&r.train.metrics, emotion)?,
        });
    }
    let report = RunReport {
        config: config.clone(),
        aus: task.au_ids(),
        test: MetricsBlock::from_accumulator(&test, emotion)?,
        train: MetricsBlock::from_accumulator(&train, emotion)?,
        folds: reports,
    };
    Ok((report, results))
}
