use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{softmax, Init, LayerNorm, Linear, Param};

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct Block {
    heads: usize,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize) -> Result<Block> {
        assert_eq!(width % heads, 0, "width divisible by heads");
        Ok(Block {
            heads,
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), width)?,
            q: Linear::new(init, &format!("{name}.attn.q"), width, width, true)?,
            k: Linear::new(init, &format!("{name}.attn.k"), width, width, true)?,
            v: Linear::new(init, &format!("{name}.attn.v"), width, width, true)?,
            o: Linear::new(init, &format!("{name}.attn.o"), width, width, true)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), width)?,
            fc1: Linear::new(init, &format!("{name}.mlp.0"), width, 2 * width, true)?,
            fc2: Linear::new(init, &format!("{name}.mlp.1"), 2 * width, width, true)?,
        })
    }

    /// `x`: (B, T, width).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, width) = x.dims3()?;
        let dh = width / self.heads;
        let h = self.ln1.forward(x)?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax(&logits, 3)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, width))?;
        let x = (x + self.o.forward(&mixed)?)?;
        let h = self.ln2.forward(&x)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu()?)?;
        Ok((x + h)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.ln1.params();
        for l in [&self.q, &self.k, &self.v, &self.o] {
            p.extend(l.params());
        }
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.ln1.params_mut();
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            p.extend(l.params_mut());
        }
        p.extend(self.ln2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }
}

/// Mean over the token axis of a (B, T, d) tensor.
pub fn mean_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus2)?)
}
