//! The full detector: flow image to per-AU probabilities and projected
//! AU features.

use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ClVariant, Config, ContrastiveFeature, EncoderKind, Fusion, Pooling};
use crate::encoders::{
    encode_prompts, encode_texts, CharTextEncoder, PatchEncoder, PatchEncoderConfig, TextEncoder, TextEncoderConfig,
    VisualEncoder,
};
use crate::error::{Error, Result};
use crate::gsd::{gd_loss, gsd_forward, normalize_labels, GdaParams};
use crate::losses::{
    matched_text, miauc_loss, multitask_loss_from_logits, origcl_loss, similarity_matrix, total_loss, ContrastiveBatch,
    OrigClVariant,
    VisualProjection,
};
use crate::lsi::{lsi_forward, PtaScorer};
use crate::mer::{prototype_embeddings, EmotionSpec, LabelEmbedding};
use crate::nn::{device, l2_normalize, Init, Param, ParamGroup};
use crate::preprocess::FlowImage;
use crate::task::AuTaskSpec;

/// One sample ready for the network.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub subject: String,
    pub image: FlowImage,
    /// Per AU, flat token indices of its landmark cells.
    pub token_indices: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
    pub emotion: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per AU, (B, N_L) PTA weights.
    pub pta_weights: Option<Vec<Tensor>>,
    /// (B, N, N)
    pub attention: Option<Tensor>,
    /// (B, N)
    pub dep_weights: Option<Tensor>,
    /// (B, N, 2)
    pub logits: Tensor,
    /// (B, N, 2)
    pub probs: Tensor,
    /// LSI output, (B, N, d).
    pub features: Tensor,
    /// Unit-norm projected AU features, (B, N, d_t).
    pub projected: Tensor,
    /// Unit-norm projected mean AU feature, (B, d_t).
    pub pooled: Tensor,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub multitask: f64,
    pub contrastive: f64,
    pub gd: f64,
}

pub struct Model {
    pub config: Config,
    pub task: AuTaskSpec,
    pub visual: PatchEncoder,
    pub text: CharTextEncoder,
    pub scorer: Option<PtaScorer>,
    pub gsd: GdaParams,
    pub projection: VisualProjection,
    /// Natural log of the contrastive logit scale.
    pub log_scale: Param,
}

impl Model {
    /// Builds every module from `config.seed`. The pretrained adapter then
    /// overwrites the encoder weights from `pretrained_weights`.
    pub fn new(config: &Config, task: &AuTaskSpec) -> Result<Model> {
        Model::build(config, task, true)
    }

    /// Same layout as [`Model::new`] without reading pretrained weights;
    /// used when every tensor comes from a checkpoint next.
    pub fn skeleton(config: &Config, task: &AuTaskSpec) -> Result<Model> {
        Model::build(config, task, false)
    }

    fn build(config: &Config, task: &AuTaskSpec, pretrained: bool) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (vcfg, tcfg) = match config.encoder_kind {
            EncoderKind::Toy => (
                PatchEncoderConfig::toy(config.input_size, config.toy_patch, config.toy_width, config.toy_visual_depth),
                TextEncoderConfig::toy(config.toy_width, config.toy_text_depth),
            ),
            EncoderKind::PretrainedAdapter => {
                if config.input_size != 224 {
                    return Err(Error::Config("the pretrained adapter takes 224x224 input".into()));
                }
                (PatchEncoderConfig::vit_b32(), TextEncoderConfig::clip_b32())
            }
        };
        let width = vcfg.width;
        let text_dim = tcfg.out_dim;
        let n = task.len();
        let mut enc = Init::new(&mut rng, ParamGroup::Encoder);
        let mut visual = PatchEncoder::new(&mut enc, vcfg)?;
        let mut text = CharTextEncoder::new(&mut enc, tcfg)?;
        let mut head = Init::new(&mut rng, ParamGroup::Head);
        let scorer = match config.pooling {
            Pooling::Pta => Some(PtaScorer::new(&mut head, n, width, config.scorer_sharing)?),
            _ => None,
        };
        let gsd = GdaParams::new(&mut head, n, width, config.fusion)?;
        let projection = VisualProjection::new(&mut head, width, text_dim)?;
        let mut log_scale = head.constant("log_scale", &[], config.logit_scale.ln())?;
        log_scale.trainable = config.learn_logit_scale;
        visual.set_trainable(config.finetune_last_k_layers)?;
        text.set_trainable(config.finetune_last_k_layers)?;
        let mut model = Model {
            config: config.clone(),
            task: task.clone(),
            visual,
            text,
            scorer,
            gsd,
            projection,
            log_scale,
        };
        if pretrained && config.encoder_kind == EncoderKind::PretrainedAdapter {
            let path = config.pretrained_weights.as_ref().expect("validated");
            let tensors = crate::train::checkpoint::read_tensor_file(std::path::Path::new(path))?;
            model.load_encoder_weights(&tensors)?;
        }
        Ok(model)
    }

    /// Every parameter in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.visual.params();
        p.extend(self.text.params());
        if let Some(s) = &self.scorer {
            p.extend(s.params());
        }
        p.extend(self.gsd.params());
        p.extend(self.projection.params());
        p.push(&self.log_scale);
        p
    }

    pub fn trainable_params(&self) -> Vec<&Param> {
        self.params().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn named_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params().into_iter().map(|p| Ok((p.name.clone(), p.raw().copy()?))).collect()
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let params = self.params();
        if params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                params.len()
            )));
        }
        for p in params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{}`", p.name)))?;
            if t.dims() != p.dims().as_slice() {
                return Err(Error::Checkpoint(format!("`{}` has shape {:?}, expected {:?}", p.name, t.dims(), p.dims())));
            }
            p.set(t)?;
        }
        Ok(())
    }

    /// Copies every `visual.*` and `text.*` tensor; all must be present.
    pub fn load_encoder_weights(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.visual.params().into_iter().chain(self.text.params()) {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained weights lack `{}`", p.name)))?;
            if t.dims() != p.dims().as_slice() {
                return Err(Error::Checkpoint(format!("`{}` has shape {:?}, expected {:?}", p.name, t.dims(), p.dims())));
            }
            p.set(t)?;
        }
        Ok(())
    }

    pub fn logit_scale(&self) -> Result<Tensor> {
        Ok(self.log_scale.tensor().exp()?)
    }

    /// Grid (h, w) of the visual encoder.
    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.visual.grid();
        (h, w)
    }

    pub fn forward(&self, batch: &[&PreparedSample]) -> Result<ForwardOutput> {
        let b = batch.len();
        let s = self.visual.input_size();
        let mut data = Vec::with_capacity(b * 3 * s * s);
        for sample in batch {
            if sample.image.size != s {
                return Err(Error::ShapeMismatch(format!(
                    "sample {} has a {}px flow image, encoder expects {s}px",
                    sample.id, sample.image.size
                )));
            }
            data.extend_from_slice(&sample.image.data);
        }
        let images = Tensor::from_vec(data, (b, 3, s, s), &device())?;
        let tokens = self.visual.forward(&images)?;
        let (_, hw, d) = tokens.dims3()?;
        let flat = tokens.reshape((b * hw, d))?;
        let groups = (0..self.task.len())
            .map(|n| {
                let nl = batch[0].token_indices[n].len();
                let ids: Vec<u32> = batch
                    .iter()
                    .flat_map(|smp| smp.token_indices[n].iter().map(|&i| i as u32))
                    .enumerate()
                    .map(|(k, i)| (k / nl * hw) as u32 + i)
                    .collect();
                let ids = Tensor::new(ids.as_slice(), &device())?;
                Ok(flat.index_select(&ids, 0)?.reshape((b, nl, d))?)
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = lsi_forward(self.scorer.as_ref(), &groups, self.config.pooling)?;
        let gsd = gsd_forward(&self.gsd, &fused.features, self.config.fusion)?;
        let feature = match self.config.contrastive_feature {
            ContrastiveFeature::PreGsd => fused.features.clone(),
            ContrastiveFeature::PostGsd => gsd.enhanced.clone(),
        };
        let projected = self.projection.forward(&feature)?;
        let pooled = self.projection.forward(&feature.mean(1)?)?;
        Ok(ForwardOutput {
            pta_weights: fused.weights,
            attention: gsd.attention,
            dep_weights: gsd.dep_weights,
            logits: gsd.logits,
            probs: gsd.probs,
            features: fused.features,
            projected,
            pooled,
        })
    }

    /// Whole-face description for a label vector: every AU's matching prompt.
    pub fn face_description(&self, labels: &[u8]) -> String {
        self.task
            .aus
            .iter()
            .zip(labels)
            .map(|(au, y)| if *y == 1 { au.positive.as_str() } else { au.negative.as_str() })
            .collect::<Vec<_>>()
            .join(". ")
    }

    fn contrastive(&self, out: &ForwardOutput, labels: &[Vec<u8>]) -> Result<Option<Tensor>> {
        if self.config.alpha == 0.0 || self.config.cl_variant == ClVariant::None {
            return Ok(None);
        }
        let scale = self.logit_scale()?;
        let n = self.task.len();
        let per_au = |o: &ForwardOutput| -> Result<Vec<Tensor>> {
            (0..n).map(|i| Ok(o.projected.narrow(1, i, 1)?.squeeze(1)?)).collect()
        };
        let transpose = |labels: &[Vec<u8>]| -> Vec<Vec<u8>> {
            (0..n).map(|i| labels.iter().map(|row| row[i]).collect()).collect()
        };
        let loss = match self.config.cl_variant {
            ClVariant::Miauc | ClVariant::LocalOrig => {
                let prompts = encode_prompts(&self.text, &self.task, &[])?;
                let batch = ContrastiveBatch {
                    visual: per_au(out)?,
                    text: matched_text(&prompts.pos, &prompts.neg, labels)?,
                    labels: transpose(labels),
                };
                if self.config.cl_variant == ClVariant::Miauc {
                    miauc_loss(&batch, &scale)?
                } else {
                    origcl_loss(&batch, OrigClVariant::Local, &scale)?
                }
            }
            ClVariant::GlobalOrig => {
                let mut unique: BTreeMap<&[u8], usize> = BTreeMap::new();
                for row in labels {
                    let next = unique.len();
                    unique.entry(row.as_slice()).or_insert(next);
                }
                let mut keys: Vec<(&[u8], usize)> = unique.iter().map(|(k, v)| (*k, *v)).collect();
                keys.sort_by_key(|(_, v)| *v);
                let texts: Vec<String> = keys.iter().map(|(k, _)| self.face_description(k)).collect();
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                let encoded = encode_texts(&self.text, &refs)?;
                let ids: Vec<u32> = labels.iter().map(|row| unique[row.as_slice()] as u32).collect();
                let text = encoded.index_select(&Tensor::new(ids.as_slice(), &device())?, 0)?;
                let batch = ContrastiveBatch { visual: vec![out.pooled.clone()], text: vec![text], labels: vec![vec![0; labels.len()]] };
                origcl_loss(&batch, OrigClVariant::Global, &scale)?
            }
            ClVariant::None => unreachable!(),
        };
        Ok(Some(loss))
    }

    /// mt + alpha * contrastive + beta * gd for one batch.
    pub fn loss(&self, out: &ForwardOutput, labels: &[Vec<u8>]) -> Result<LossBreakdown> {
        let mt = multitask_loss_from_logits(&out.logits, labels)?;
        let zero = Tensor::new(0.0f64, &device())?;
        let cl = self.contrastive(out, labels)?;
        let gd = match (&out.dep_weights, self.config.beta != 0.0 && self.config.fusion == Fusion::Gda) {
            (Some(w), true) => {
                let y = label_tensor(labels)?;
                let y = if self.config.gd_normalize_labels { normalize_labels(&y)? } else { y };
                Some(gd_loss(w, &y)?)
            }
            _ => None,
        };
        let total = total_loss(
            &mt,
            cl.as_ref().unwrap_or(&zero),
            gd.as_ref().unwrap_or(&zero),
            self.config.alpha,
            self.config.beta,
        )?;
        let value = |t: &Option<Tensor>| -> Result<f64> { Ok(t.as_ref().map(|t| t.to_scalar::<f64>()).transpose()?.unwrap_or(0.0)) };
        Ok(LossBreakdown { multitask: mt.to_scalar::<f64>()?, contrastive: value(&cl)?, gd: value(&gd)?, total })
    }

    /// (B, B) cosine similarities between AU `n`'s features and the
    /// label-matched prompt embeddings of the same batch.
    pub fn au_similarity(&self, out: &ForwardOutput, labels: &[Vec<u8>], n: usize) -> Result<Tensor> {
        let prompts = encode_prompts(&self.text, &self.task, &[])?;
        let text = matched_text(&prompts.pos, &prompts.neg, labels)?;
        let visual = out.projected.narrow(1, n, 1)?.squeeze(1)?;
        similarity_matrix(&visual, &text[n])
    }

    /// (R, d_t) unit label embeddings for zero-shot emotion scoring.
    pub fn label_embeddings(&self, spec: &EmotionSpec) -> Result<Tensor> {
        match spec.embedding {
            LabelEmbedding::Text => l2_normalize(&encode_texts(&self.text, &spec.texts())?),
            LabelEmbedding::Prototype => {
                let prompts = encode_prompts(&self.text, &self.task, &[])?;
                prototype_embeddings(spec, &self.task, &prompts.pos, &prompts.neg)
            }
        }
    }
}

/// (B, N) float tensor of binary labels.
pub fn label_tensor(labels: &[Vec<u8>]) -> Result<Tensor> {
    let b = labels.len();
    let n = labels.first().map_or(0, Vec::len);
    let data: Vec<f64> = labels.iter().flatten().map(|&y| y as f64).collect();
    Ok(Tensor::from_vec(data, (b, n), &device())?)
}

/// Binary decisions P_n[1] > P_n[0] from (B, N, 2) probabilities.
pub fn predictions(probs: &Tensor) -> Result<Vec<Vec<u8>>> {
    Ok(probs
        .to_vec3::<f64>()?
        .into_iter()
        .map(|row| row.into_iter().map(|p| u8::from(p[1] > p[0])).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::default_task_spec;

    fn toy_config() -> Config {
        let mut c = Config::with_coefficients(0.6, 1.0);
        c.input_size = 64;
        c.toy_patch = 16;
        c.toy_width = 8;
        c.finetune_last_k_layers = 1;
        c
    }

    fn sample(seed: usize, task: &AuTaskSpec, labels: Vec<u8>) -> PreparedSample {
        let size = 64;
        let data = (0..3 * size * size).map(|i| (((i + seed) * 2654435761) % 1000) as f64 / 1000.0 - 0.5).collect();
        PreparedSample {
            id: format!("s{seed}"),
            subject: "a".into(),
            image: FlowImage { size, data },
            token_indices: task.aus.iter().map(|au| au.landmarks.iter().map(|j| (j + seed) % 16).collect()).collect(),
            labels,
            emotion: None,
        }
    }

    #[test]
    fn forward_shapes() {
        let task = default_task_spec("samm").unwrap();
        let model = Model::new(&toy_config(), &task).unwrap();
        let s: Vec<PreparedSample> = (0..3).map(|i| sample(i, &task, vec![1, 0, 1, 0])).collect();
        let refs: Vec<&PreparedSample> = s.iter().collect();
        let out = model.forward(&refs).unwrap();
        assert_eq!(out.probs.dims(), &[3, 4, 2]);
        assert_eq!(out.dep_weights.as_ref().unwrap().dims(), &[3, 4]);
        assert_eq!(out.projected.dims(), &[3, 4, 8]);
        assert_eq!(out.pta_weights.as_ref().unwrap()[0].dims(), &[3, task.aus[0].landmarks.len()]);
        let labels: Vec<Vec<u8>> = s.iter().map(|x| x.labels.clone()).collect();
        let loss = model.loss(&out, &labels).unwrap();
        assert!(loss.total.to_scalar::<f64>().unwrap().is_finite());
    }

    #[test]
    fn batching_matches_single_samples() {
        let task = default_task_spec("samm").unwrap();
        let model = Model::new(&toy_config(), &task).unwrap();
        let s: Vec<PreparedSample> = (0..3).map(|i| sample(i, &task, vec![0, 1, 1, 0])).collect();
        let all = model.forward(&s.iter().collect::<Vec<_>>()).unwrap().probs.to_vec3::<f64>().unwrap();
        for (i, smp) in s.iter().enumerate() {
            let one = model.forward(&[smp]).unwrap().probs.to_vec3::<f64>().unwrap();
            for (a, b) in one[0].iter().flatten().zip(all[i].iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_contrastive_variant_skips_the_text_encoder() {
        let task = default_task_spec("samm").unwrap();
        let mut c = toy_config();
        c.cl_variant = ClVariant::None;
        let model = Model::new(&c, &task).unwrap();
        let s = sample(0, &task, vec![1, 1, 0, 0]);
        let out = model.forward(&[&s]).unwrap();
        let loss = model.loss(&out, &[s.labels.clone()]).unwrap();
        assert_eq!(loss.contrastive, 0.0);
        assert_eq!(model.text.calls(), 0);
    }

    #[test]
    fn every_contrastive_variant_runs() {
        let task = default_task_spec("samm").unwrap();
        for v in [ClVariant::GlobalOrig, ClVariant::LocalOrig, ClVariant::Miauc] {
            let mut c = toy_config();
            c.cl_variant = v;
            let model = Model::new(&c, &task).unwrap();
            let s: Vec<PreparedSample> = (0..4).map(|i| sample(i, &task, vec![(i % 2) as u8, 1, 0, 0])).collect();
            let out = model.forward(&s.iter().collect::<Vec<_>>()).unwrap();
            let labels: Vec<Vec<u8>> = s.iter().map(|x| x.labels.clone()).collect();
            let loss = model.loss(&out, &labels).unwrap();
            assert!(loss.contrastive > 0.0, "{v:?}");
            assert!(model.text.calls() > 0);
        }
    }

    #[test]
    fn tensors_round_trip() {
        let task = default_task_spec("samm").unwrap();
        let a = Model::new(&toy_config(), &task).unwrap();
        let mut c = toy_config();
        c.seed = 9;
        let b = Model::new(&c, &task).unwrap();
        b.load_tensors(&a.named_tensors().unwrap()).unwrap();
        let s = sample(0, &task, vec![1, 0, 0, 1]);
        assert_eq!(
            a.forward(&[&s]).unwrap().probs.to_vec3::<f64>().unwrap(),
            b.forward(&[&s]).unwrap().probs.to_vec3::<f64>().unwrap()
        );
    }
}
