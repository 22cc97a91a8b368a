//! Local semantic independence: each AU's landmark token group is fused
//! into one AU feature, with no information crossing between AUs.
//!
//! Patch token attention scores every token of a group with a small MLP,
//! turns the scores into contribution weights with a softmax over the
//! group, and returns the weighted sum of the tokens. Max and mean pooling
//! are kept as baselines.

use candle_core::{Tensor, D};

use crate::config::{Pooling, ScorerSharing};
use crate::error::{Error, Result};
use crate::nn::{softmax, Init, Mlp, Param};

/// Token-contribution scorer: d -> d/2 -> 1 with a rectifier.
#[derive(Debug, Clone)]
pub struct PtaScorer {
    mlps: Vec<Mlp>,
}

impl PtaScorer {
    pub fn new(init: &mut Init, n_aus: usize, width: usize, sharing: ScorerSharing) -> Result<PtaScorer> {
        let hidden = (width / 2).max(1);
        let count = match sharing {
            ScorerSharing::PerAu => n_aus,
            ScorerSharing::Shared => 1,
        };
        let mlps = (0..count)
            .map(|i| Mlp::new(init, &format!("lsi.scorer{i}"), width, hidden, 1))
            .collect::<Result<_>>()?;
        Ok(PtaScorer { mlps })
    }

    pub fn from_mlps(mlps: Vec<Mlp>) -> PtaScorer {
        PtaScorer { mlps }
    }

    /// The scorer used for AU `n`.
    pub fn for_au(&self, n: usize) -> &Mlp {
        if self.mlps.len() == 1 {
            &self.mlps[0]
        } else {
            &self.mlps[n]
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.mlps.iter().flat_map(|m| m.params()).collect()
    }
}

fn check_group(group: &Tensor) -> Result<()> {
    let dims = group.dims();
    if dims.len() < 2 || dims[dims.len() - 2] == 0 {
        return Err(Error::EmptyGroup);
    }
    Ok(())
}

/// Raw scorer outputs, shape (..., N_L).
pub fn pta_scores(scorer: &Mlp, group: &Tensor) -> Result<Tensor> {
    check_group(group)?;
    Ok(scorer.forward(group)?.squeeze(D::Minus1)?)
}

/// Contribution weights over a (..., N_L, d) group: softmax of the scores.
pub fn pta_weights(scorer: &Mlp, group: &Tensor) -> Result<Tensor> {
    let scores = pta_scores(scorer, group)?;
    softmax(&scores, scores.rank() - 1)
}

/// Weighted sum of a group given its (..., N_L) weights.
pub fn weighted_sum(weights: &Tensor, group: &Tensor) -> Result<Tensor> {
    let token_axis = group.rank() - 2;
    Ok(group.broadcast_mul(&weights.unsqueeze(D::Minus1)?)?.sum(token_axis)?)
}

pub fn pta_fuse(scorer: &Mlp, group: &Tensor) -> Result<Tensor> {
    weighted_sum(&pta_weights(scorer, group)?, group)
}

pub fn pool_fuse(group: &Tensor, mode: Pooling) -> Result<Tensor> {
    check_group(group)?;
    let token_axis = group.rank() - 2;
    match mode {
        Pooling::Maxpool => Ok(group.max(token_axis)?),
        Pooling::Meanpool => Ok(group.mean(token_axis)?),
        Pooling::Pta => Err(Error::Config("pool_fuse does not implement PTA; use pta_fuse".into())),
    }
}

/// AU features stacked along the AU axis: (..., N, d), in task order.
#[derive(Debug, Clone)]
pub struct FusedAuFeatures {
    pub features: Tensor,
    /// Per AU, the (..., N_L) PTA weights. Absent for pooling baselines.
    pub weights: Option<Vec<Tensor>>,
}

/// Fuses each AU's group independently. `groups[n]` has shape (..., N_L, d).
pub fn lsi_forward(scorer: Option<&PtaScorer>, groups: &[Tensor], mode: Pooling) -> Result<FusedAuFeatures> {
    let mut fused = Vec::with_capacity(groups.len());
    let mut weights = Vec::with_capacity(groups.len());
    for (n, group) in groups.iter().enumerate() {
        match mode {
            Pooling::Pta => {
                let scorer = scorer.ok_or_else(|| Error::Config("PTA needs a scorer".into()))?;
                let w = pta_weights(scorer.for_au(n), group)?;
                fused.push(weighted_sum(&w, group)?);
                weights.push(w);
            }
            other => fused.push(pool_fuse(group, other)?),
        }
    }
    let axis = groups.first().map_or(0, |g| g.rank() - 2);
    Ok(FusedAuFeatures {
        features: Tensor::stack(&fused, axis)?,
        weights: (mode == Pooling::Pta).then_some(weights),
    })
}
