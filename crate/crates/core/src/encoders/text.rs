use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;

use crate::encoders::block::{mean_tokens, Block};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub out_dim: usize,
}

impl TextEncoderConfig {
    pub fn toy(width: usize, depth: usize) -> Self {
        TextEncoderConfig { vocab: 97, max_len: 64, width, depth, heads: 1, out_dim: width }
    }

    /// CLIP text-tower geometry with 512-wide embeddings.
    pub fn clip_b32() -> Self {
        TextEncoderConfig { vocab: 4096, max_len: 77, width: 512, depth: 12, heads: 8, out_dim: 512 }
    }
}

/// Characters hashed into an embedding table, learned positions,
/// transformer blocks, mean pooling and a linear output projection.
#[derive(Debug)]
pub struct CharTextEncoder {
    cfg: TextEncoderConfig,
    embed: Param,
    position: Param,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    proj: Linear,
    calls: AtomicUsize,
}

impl CharTextEncoder {
    pub fn new(init: &mut Init, cfg: TextEncoderConfig) -> Result<CharTextEncoder> {
        let embed = init.normal("text.embed", &[cfg.vocab, cfg.width], 1.0)?;
        let position = init.normal("text.position", &[cfg.max_len, cfg.width], 0.1)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(init, &format!("text.block{i}"), cfg.width, cfg.heads))
            .collect::<Result<_>>()?;
        let out_norm = LayerNorm::new(init, "text.out_norm", cfg.width)?;
        let proj = Linear::new(init, "text.proj", cfg.width, cfg.out_dim, false)?;
        let mut enc =
            CharTextEncoder { cfg, embed, position, blocks, out_norm, proj, calls: AtomicUsize::new(0) };
        enc.embed.trainable = false;
        enc.position.trainable = false;
        Ok(enc)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.chars()
            .take(self.cfg.max_len)
            .map(|c| {
                // FNV-1a over the UTF-8 bytes of the character.
                let mut buf = [0u8; 4];
                let hash = c.encode_utf8(&mut buf).bytes().fold(0x811c9dc5u32, |h, b| {
                    (h ^ b as u32).wrapping_mul(0x01000193)
                });
                hash % self.cfg.vocab as u32
            })
            .collect()
    }
}

impl TextEncoder for CharTextEncoder {
    fn dim(&self) -> usize {
        self.cfg.out_dim
    }

    fn encode(&self, text: &str) -> Result<Tensor> {
        if text.trim().is_empty() {
            return Err(Error::EmptyPrompt(format!("{text:?}")));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let ids = self.tokenize(text);
        let len = ids.len();
        let ids = Tensor::new(ids.as_slice(), &crate::nn::device())?;
        let x = self.embed.tensor().index_select(&ids, 0)?;
        let x = (x + self.position.tensor().narrow(0, 0, len)?)?;
        let mut x = x.unsqueeze(0)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let pooled = mean_tokens(&self.out_norm.forward(&x)?)?;
        Ok(self.proj.forward(&pooled)?.squeeze(0)?)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    fn set_trainable(&mut self, last_k: usize) -> Result<()> {
        let depth = self.blocks.len();
        if last_k > depth {
            return Err(Error::LayerCountExceeded { requested: last_k, available: depth });
        }
        self.embed.trainable = false;
        self.position.trainable = false;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let on = i >= depth - last_k;
            block.params_mut().into_iter().for_each(|p| p.trainable = on);
        }
        for p in self.out_norm.params_mut().into_iter().chain(self.proj.params_mut()) {
            p.trainable = last_k > 0;
        }
        Ok(())
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.embed, &self.position];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.out_norm.params());
        p.extend(self.proj.params());
        p
    }
}
