//! Visual and text encoder contracts.
//!
//! [`PatchEncoder`] and [`CharTextEncoder`] back both the toy configuration
//! used for desk-scale runs and the pretrained-adapter slot, which uses the
//! ViT-B/32 and CLIP text geometry and reads its weights from a tensor file.

mod block;
pub mod text;
pub mod visual;

use candle_core::Tensor;

pub use text::{CharTextEncoder, TextEncoderConfig};
pub use visual::{PatchEncoder, PatchEncoderConfig};

use crate::error::{Error, Result};
use crate::nn::{device, Param};
use crate::preprocess::FlowImage;
use crate::task::AuTaskSpec;

/// An h x w grid of d-dimensional patch tokens, stored as (h, w, d).
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(tokens: Tensor) -> Result<TokenGrid> {
        let (h, w, d) = tokens.dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("token grid needs h, w >= 1".into()));
        }
        Ok(TokenGrid { h, w, d, tokens })
    }
}

pub trait VisualEncoder: Send + Sync {
    fn input_size(&self) -> usize;
    /// (h, w, d) of the produced grid.
    fn grid(&self) -> (usize, usize, usize);
    /// (B, 3, S, S) images to (B, h*w, d) tokens.
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    fn layer_count(&self) -> usize;
    fn set_trainable(&mut self, last_k: usize) -> Result<()>;
    fn params(&self) -> Vec<&Param>;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    /// One prompt to a `dim()` vector.
    fn encode(&self, text: &str) -> Result<Tensor>;
    /// Number of `encode` calls so far.
    fn calls(&self) -> usize;
    fn layer_count(&self) -> usize;
    fn set_trainable(&mut self, last_k: usize) -> Result<()>;
    fn params(&self) -> Vec<&Param>;
}

pub fn flow_image_tensor(image: &FlowImage) -> Result<Tensor> {
    Ok(Tensor::from_vec(image.data.clone(), (3, image.size, image.size), &device())?)
}

pub fn encode_visual(encoder: &dyn VisualEncoder, image: &FlowImage) -> Result<TokenGrid> {
    if image.size != encoder.input_size() {
        return Err(Error::ShapeMismatch(format!(
            "flow image is {0}x{0}, encoder expects {1}x{1}",
            image.size,
            encoder.input_size()
        )));
    }
    let (h, w, d) = encoder.grid();
    let tokens = encoder.forward(&flow_image_tensor(image)?.unsqueeze(0)?)?;
    TokenGrid::new(tokens.reshape((h, w, d))?)
}

/// Text embeddings for every AU prompt pair and every emotion label text.
#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    /// (N, d_t)
    pub pos: Tensor,
    /// (N, d_t)
    pub neg: Tensor,
    /// (R, d_t); empty when no emotion texts were given.
    pub emotions: Option<Tensor>,
}

pub fn encode_texts(encoder: &dyn TextEncoder, texts: &[&str]) -> Result<Tensor> {
    let rows = texts.iter().map(|t| encoder.encode(t)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

pub fn encode_prompts(
    encoder: &dyn TextEncoder,
    spec: &AuTaskSpec,
    emotion_texts: &[&str],
) -> Result<PromptEmbeddings> {
    for au in &spec.aus {
        if au.positive.trim().is_empty() || au.negative.trim().is_empty() {
            return Err(Error::EmptyPrompt(format!("AU{}", au.id)));
        }
    }
    let pos: Vec<&str> = spec.aus.iter().map(|a| a.positive.as_str()).collect();
    let neg: Vec<&str> = spec.aus.iter().map(|a| a.negative.as_str()).collect();
    let emotions = if emotion_texts.is_empty() {
        None
    } else {
        Some(encode_texts(encoder, emotion_texts)?)
    };
    Ok(PromptEmbeddings { pos: encode_texts(encoder, &pos)?, neg: encode_texts(encoder, &neg)?, emotions })
}
