use candle_core::Tensor;

use crate::encoders::block::Block;
use crate::encoders::VisualEncoder;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEncoderConfig {
    pub input_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl PatchEncoderConfig {
    pub fn toy(input_size: usize, patch: usize, width: usize, depth: usize) -> Self {
        PatchEncoderConfig { input_size, patch, width, depth, heads: 1 }
    }

    /// ViT-B/32 geometry: 7x7 tokens of width 768 at 224 px.
    pub fn vit_b32() -> Self {
        PatchEncoderConfig { input_size: 224, patch: 32, width: 768, depth: 12, heads: 12 }
    }
}

/// Per-patch linear embedding followed by transformer blocks and an output
/// norm. There is no positional embedding, so with depth 0 the token grid
/// is translation-equivariant at patch granularity.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    cfg: PatchEncoderConfig,
    stem: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
}

impl PatchEncoder {
    pub fn new(init: &mut Init, cfg: PatchEncoderConfig) -> Result<PatchEncoder> {
        if cfg.patch == 0 || cfg.input_size % cfg.patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input size {} is not a multiple of patch {}",
                cfg.input_size, cfg.patch
            )));
        }
        let stem = Linear::new(init, "visual.stem", 3 * cfg.patch * cfg.patch, cfg.width, true)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(init, &format!("visual.block{i}"), cfg.width, cfg.heads))
            .collect::<Result<_>>()?;
        let out_norm = LayerNorm::new(init, "visual.out_norm", cfg.width)?;
        Ok(PatchEncoder { cfg, stem, blocks, out_norm })
    }

    pub fn config(&self) -> PatchEncoderConfig {
        self.cfg
    }

    /// (B, 3, S, S) images to (B, g*g, 3*p*p) flattened patches, row-major
    /// over the grid.
    fn patches(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, s, s2) = images.dims4()?;
        if c != 3 || s != self.cfg.input_size || s2 != self.cfg.input_size {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, 3, {n}, {n}) input, got {:?}",
                images.dims(),
                n = self.cfg.input_size
            )));
        }
        let p = self.cfg.patch;
        let g = s / p;
        Ok(images
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?)
    }
}

impl VisualEncoder for PatchEncoder {
    fn input_size(&self) -> usize {
        self.cfg.input_size
    }

    fn grid(&self) -> (usize, usize, usize) {
        let g = self.cfg.input_size / self.cfg.patch;
        (g, g, self.cfg.width)
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.forward(&self.patches(images)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.out_norm.forward(&x)
    }

    fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    fn set_trainable(&mut self, last_k: usize) -> Result<()> {
        let depth = self.blocks.len();
        if last_k > depth {
            return Err(Error::LayerCountExceeded { requested: last_k, available: depth });
        }
        for p in self.stem.params_mut() {
            p.trainable = false;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let on = i >= depth - last_k;
            block.params_mut().into_iter().for_each(|p| p.trainable = on);
        }
        for p in self.out_norm.params_mut() {
            p.trainable = last_k > 0;
        }
        Ok(())
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.out_norm.params());
        p
    }
}
