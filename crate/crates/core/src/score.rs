//! Channel importance scores: batch-norm scaling factors or filter L1 norms.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::net::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMethod {
    /// |gamma| of the batch-norm layer following each convolution.
    BnGamma,
    /// Sum of |w| over each filter.
    L1Norm,
}

impl ScoringMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoringMethod::BnGamma => "bn_gamma",
            ScoringMethod::L1Norm => "l1_norm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bn_gamma" => Some(ScoringMethod::BnGamma),
            "l1_norm" => Some(ScoringMethod::L1Norm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// Divide each layer's scores by the layer mean, making scores
    /// comparable across layers for a global threshold.
    PerLayerMean,
}

/// One non-negative score per prunable channel, per group. Non-prunable
/// groups carry empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScores {
    pub per_group: Vec<Vec<f64>>,
    pub method: ScoringMethod,
    pub normalization: Normalization,
}

impl ChannelScores {
    pub fn max_score(&self) -> f64 {
        let mut m = 0.0f64;
        for g in &self.per_group {
            for &s in g {
                if s > m {
                    m = s;
                }
            }
        }
        m
    }
}

/// Score channels by the absolute batch-norm scaling factor of the full-width
/// bank. Errors if a prunable convolution has no following batch norm.
pub fn score_bn_gamma<E: Element>(net: &Network<E>) -> Result<ChannelScores> {
    let bank = net.num_banks - 1;
    let mut per_group = vec![Vec::new(); net.index.groups.len()];
    for (gi, group) in net.index.groups.iter().enumerate() {
        if !group.prunable {
            continue;
        }
        let bn_site = group.bn.ok_or_else(|| Error::Unsupported {
            at: group.name.clone(),
            detail: String::from("bn_gamma scoring requires a batch norm after the convolution"),
        })?;
        let layer = net.layer(bn_site);
        let bn = match layer {
            Layer::Bn(bn) => bn,
            _ => {
                return Err(Error::Invalid(String::from(
                    "group bn site does not hold a batch norm",
                )))
            }
        };
        per_group[gi] = bn.banks[bank]
            .gamma
            .value
            .data()
            .iter()
            .map(|g| g.as_f64().abs())
            .collect();
    }
    Ok(ChannelScores {
        per_group,
        method: ScoringMethod::BnGamma,
        normalization: Normalization::None,
    })
}

/// Score channels by the L1 norm of each filter, optionally normalized
/// per layer so a single threshold compares across layers.
pub fn score_l1_norm<E: Element>(
    net: &Network<E>,
    normalization: Normalization,
) -> Result<ChannelScores> {
    let mut per_group = vec![Vec::new(); net.index.groups.len()];
    for (gi, group) in net.index.groups.iter().enumerate() {
        if !group.prunable {
            continue;
        }
        let layer = net.layer(group.producer);
        let conv = match layer {
            Layer::Conv(c) => c,
            _ => {
                return Err(Error::Invalid(String::from(
                    "group producer is not a convolution",
                )))
            }
        };
        let w = conv.weight.value.data();
        let per_filter = w.len() / conv.out_channels;
        let mut scores: Vec<f64> = (0..conv.out_channels)
            .map(|o| {
                w[o * per_filter..(o + 1) * per_filter]
                    .iter()
                    .map(|v| v.as_f64().abs())
                    .sum()
            })
            .collect();
        if normalization == Normalization::PerLayerMean {
            let mean: f64 = scores.iter().sum::<f64>() / scores.len() as f64;
            if mean > 0.0 {
                for s in &mut scores {
                    *s /= mean;
                }
            }
        }
        per_group[gi] = scores;
    }
    Ok(ChannelScores {
        per_group,
        method: ScoringMethod::L1Norm,
        normalization,
    })
}

/// Score with the given method.
pub fn score<E: Element>(net: &Network<E>, method: ScoringMethod) -> Result<ChannelScores> {
    match method {
        ScoringMethod::BnGamma => score_bn_gamma(net),
        ScoringMethod::L1Norm => score_l1_norm(net, Normalization::PerLayerMean),
    }
}
