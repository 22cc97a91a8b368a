//! Global semantic dependency between AU features.
//!
//! Self-attention over the N AU features gives an N x N matrix `A`. A
//! shared linear map scores each row of `A`, and softmax(relu(scores))
//! becomes the dependency weights `W_d`. The global feature is
//! `F_G = W_d (F W^V)`. It is added to every AU feature before that AU's
//! classifier head. The GD loss pulls `W_d` toward the multi-hot label.
//!
//! All functions accept a leading batch axis: features are (..., N, d).

use candle_core::{Tensor, D};

use crate::config::Fusion;
use crate::error::{Error, Result};
use crate::nn::{softmax, Init, Linear, Mlp, Param};

#[derive(Debug, Clone)]
pub struct GdaParams {
    pub query: Param,
    pub key: Param,
    pub value: Param,
    pub dep_fc: Linear,
    pub heads: Vec<Mlp>,
}

impl GdaParams {
    pub fn new(init: &mut Init, n_aus: usize, width: usize, fusion: Fusion) -> Result<GdaParams> {
        let std = 1.0 / (width as f64).sqrt();
        let head_in = match fusion {
            Fusion::CatMlp => 2 * width,
            _ => width,
        };
        let hidden = (width / 2).max(1);
        Ok(GdaParams {
            query: init.normal("gsd.query", &[width, width], std)?,
            key: init.normal("gsd.key", &[width, width], std)?,
            value: init.normal("gsd.value", &[width, width], std)?,
            dep_fc: Linear::new(init, "gsd.dep_fc", n_aus, 1, true)?,
            heads: (0..n_aus)
                .map(|n| Mlp::new(init, &format!("gsd.head{n}"), head_in, hidden, 2))
                .collect::<Result<_>>()?,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.query, &self.key, &self.value];
        p.extend(self.dep_fc.params());
        p.extend(self.heads.iter().flat_map(|h| h.params()));
        p
    }
}

fn transpose_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(D::Minus1, D::Minus2)?.contiguous()?)
}

/// Row-softmax(Q K^T / sqrt(d)) with Q = F W^Q and K = F W^K.
pub fn gda_attention(params: &GdaParams, features: &Tensor) -> Result<Tensor> {
    let d = features.dim(D::Minus1)?;
    let q = features.broadcast_matmul(&params.query.tensor())?;
    let k = features.broadcast_matmul(&params.key.tensor())?;
    let logits = (q.matmul(&transpose_last(&k)?)? / (d as f64).sqrt())?;
    softmax(&logits, logits.rank() - 1)
}

/// softmax(relu(FC(row_i(A)))) over the N rows of A.
pub fn dependency_weights(params: &GdaParams, attention: &Tensor) -> Result<Tensor> {
    let scores = params.dep_fc.forward(attention)?.squeeze(D::Minus1)?.relu()?;
    softmax(&scores, scores.rank() - 1)
}

/// F_G = W_d (F W^V).
pub fn global_feature(params: &GdaParams, dep_weights: &Tensor, features: &Tensor) -> Result<Tensor> {
    let values = features.broadcast_matmul(&params.value.tensor())?;
    Ok(dep_weights.unsqueeze(D::Minus2)?.matmul(&values)?.squeeze(D::Minus2)?)
}

/// Per-AU head logits, (..., N, 2).
pub fn au_logits(params: &GdaParams, global: &Tensor, features: &Tensor, fusion: Fusion) -> Result<Tensor> {
    let au_axis = features.rank() - 2;
    let n = features.dim(au_axis)?;
    if params.heads.len() != n {
        return Err(Error::LengthMismatch(format!("{} heads for {n} AUs", params.heads.len())));
    }
    let logits = (0..n)
        .map(|i| {
            let own = features.narrow(au_axis, i, 1)?.squeeze(au_axis)?;
            let input = match fusion {
                Fusion::CatMlp => Tensor::cat(&[global, &own], D::Minus1)?,
                Fusion::Gda | Fusion::AddMlp => (global + &own)?,
            };
            params.heads[i].forward(&input)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&logits, au_axis)?)
}

/// P_n = softmax(head_n(fusion(F_G, F_n))), shape (..., N, 2).
pub fn au_probabilities(params: &GdaParams, global: &Tensor, features: &Tensor, fusion: Fusion) -> Result<Tensor> {
    let logits = au_logits(params, global, features, fusion)?;
    softmax(&logits, logits.rank() - 1)
}

/// (1/N) ||W_d - Y||^2, averaged over any leading batch axes.
pub fn gd_loss(dep_weights: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if dep_weights.dims() != labels.dims() {
        return Err(Error::LengthMismatch(format!(
            "dependency weights {:?} vs labels {:?}",
            dep_weights.dims(),
            labels.dims()
        )));
    }
    Ok((dep_weights - labels)?.sqr()?.mean_all()?)
}

/// Divides each multi-hot label row by its sum; all-zero rows stay zero.
pub fn normalize_labels(labels: &Tensor) -> Result<Tensor> {
    let sums = labels.sum_keepdim(D::Minus1)?;
    let safe = sums.clamp(1.0, f64::MAX)?;
    Ok(labels.broadcast_div(&safe)?)
}

#[derive(Debug, Clone)]
pub struct GsdOutput {
    /// (..., N, N); only for the GDA fusion.
    pub attention: Option<Tensor>,
    /// (..., N); only for the GDA fusion.
    pub dep_weights: Option<Tensor>,
    /// (..., d)
    pub global: Tensor,
    /// (..., N, 2)
    pub logits: Tensor,
    /// (..., N, 2)
    pub probs: Tensor,
    /// F_G + F_n, (..., N, d).
    pub enhanced: Tensor,
}

/// Runs the configured fusion. The ablations skip the attention stack and
/// use the mean AU feature as the global feature.
pub fn gsd_forward(params: &GdaParams, features: &Tensor, fusion: Fusion) -> Result<GsdOutput> {
    let au_axis = features.rank() - 2;
    let (attention, dep_weights, global) = match fusion {
        Fusion::Gda => {
            let a = gda_attention(params, features)?;
            let w = dependency_weights(params, &a)?;
            let g = global_feature(params, &w, features)?;
            (Some(a), Some(w), g)
        }
        Fusion::AddMlp | Fusion::CatMlp => (None, None, features.mean(au_axis)?),
    };
    let logits = au_logits(params, &global, features, fusion)?;
    let probs = softmax(&logits, logits.rank() - 1)?;
    let enhanced = features.broadcast_add(&global.unsqueeze(au_axis)?)?;
    Ok(GsdOutput { attention, dep_weights, global, logits, probs, enhanced })
}
