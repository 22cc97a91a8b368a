//! Small neural-network building blocks on top of candle tensors.
//!
//! Everything runs in f64 on the CPU so that analytic gradients can be
//! checked against finite differences.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Parameter groups receive separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Head,
}

/// A named learnable tensor. Frozen parameters are detached on every read,
/// so they never receive gradients.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    var: Var,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<Param> {
        Ok(Param { name: name.into(), group, trainable: true, var: Var::from_tensor(&value)? })
    }

    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    /// The underlying storage, used as the gradient lookup key.
    pub fn raw(&self) -> &Tensor {
        self.var.as_tensor()
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        self.var.set(value)?;
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.var.as_tensor().dims().to_vec()
    }
}

/// Deterministic parameter factory.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Init { rng, group }
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<Param> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Param::new(name, self.group, Tensor::from_vec(data, dims, &device())?)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<Param> {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Param::new(name, self.group, Tensor::from_vec(data, dims, &device())?)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Param> {
        Param::new(name, self.group, Tensor::full(value, dims, &device())?)
    }
}

/// Affine map `x W + b` over the last axis. `W` is stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = init.uniform(&format!("{name}.weight"), &[input, output], bound)?;
        let bias = if bias {
            Some(init.uniform(&format!("{name}.bias"), &[output], bound)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 1 {
            x.unsqueeze(0)?.matmul(&self.weight.tensor())?.squeeze(0)?
        } else {
            x.broadcast_matmul(&self.weight.tensor())?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.tensor())?,
            None => y,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Two linear layers with a rectifier between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(init, &format!("{name}.0"), input, hidden, true)?,
            out: Linear::new(init, &format!("{name}.1"), hidden, output, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[width], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma.tensor())?.broadcast_add(&self.beta.tensor())?)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rows scaled to unit L2 norm along the last axis.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn scalar(value: f64) -> Result<Tensor> {
    Ok(Tensor::new(value, &device())?)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), cols), &device())?)
}
