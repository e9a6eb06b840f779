//! Parameter and FLOPs accounting.
//!
//! One unit is one multiply-accumulate; only convolution and classifier MACs
//! are counted (bias additions, batch norm, activations and pooling are
//! free). Under the zero-padding join policy, each residual join additionally
//! costs one add per element of the *full* pre-pruned join tensor, because
//! execution scatters both paths into a full-width zero buffer.
//!
//! Parameter counts cover convolution weights (+bias where declared), one
//! batch-norm bank (gamma and beta), and the classifier. Running statistics
//! and extra per-width banks are buffers, not parameters.

use crate::graph::{Feed, GraphIndex};
use crate::slim::PrunedArchitecture;

/// How residual joins are reconciled, for accounting purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JoinPolicy {
    /// Joins keep every channel (participating groups are not pruned).
    None,
    /// Both paths forced to one identical prefix selection.
    Uniform,
    /// Main path overwritten with the shortcut path's selection.
    PrioritizeShortcut,
    /// Both selections kept; missing channels are zero-filled at the join.
    #[default]
    Zpm,
}

impl JoinPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            JoinPolicy::None => "none",
            JoinPolicy::Uniform => "uniform",
            JoinPolicy::PrioritizeShortcut => "prioritize_shortcut",
            JoinPolicy::Zpm => "zpm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(JoinPolicy::None),
            "uniform" => Some(JoinPolicy::Uniform),
            "prioritize_shortcut" => Some(JoinPolicy::PrioritizeShortcut),
            "zpm" => Some(JoinPolicy::Zpm),
            _ => None,
        }
    }
}

/// Channel count reaching a consumer from `feed`, given per-group retained
/// counts. A join feeds the union of its paths' selections; counts alone
/// bound it by the larger path, which is exact for prefix selections (the
/// runtime case after sorting) and for every aligned policy.
fn feed_count(index: &GraphIndex, counts: &[usize], feed: Feed) -> usize {
    match feed {
        Feed::Input => index.input_channels,
        Feed::Group(g) => counts[g],
        Feed::Join(j) => {
            let join = &index.joins[j];
            let main = counts[join.main_group];
            let short = feed_count(index, counts, join.shortcut);
            main.max(short)
        }
    }
}

/// Multiply-accumulate count of one architecture (per input sample).
pub fn flops_count(index: &GraphIndex, arch: &PrunedArchitecture, policy: JoinPolicy) -> u64 {
    flops_from_counts(index, &arch.counts, policy)
}

pub fn flops_from_counts(index: &GraphIndex, counts: &[usize], policy: JoinPolicy) -> u64 {
    let mut total: u64 = 0;
    for conv in &index.convs {
        let out = counts[conv.group] as u64;
        let k2 = (conv.kernel * conv.kernel) as u64;
        let spatial = conv.out_spatial as u64;
        if conv.depthwise {
            total += k2 * out * spatial;
        } else {
            let inp = feed_count(index, counts, conv.in_feed) as u64;
            total += k2 * inp * out * spatial;
        }
    }
    for lin in &index.linears {
        let inp = feed_count(index, counts, lin.in_feed) as u64;
        total += inp * lin.spatial as u64 * lin.out_features as u64;
    }
    if policy == JoinPolicy::Zpm {
        for join in &index.joins {
            total += (join.size * join.spatial) as u64;
        }
    }
    total
}

/// Parameter count of one architecture.
pub fn param_count(index: &GraphIndex, arch: &PrunedArchitecture) -> u64 {
    params_from_counts(index, &arch.counts)
}

pub fn params_from_counts(index: &GraphIndex, counts: &[usize]) -> u64 {
    let mut total: u64 = 0;
    for conv in &index.convs {
        let out = counts[conv.group] as u64;
        let k2 = (conv.kernel * conv.kernel) as u64;
        if conv.depthwise {
            total += k2 * out;
        } else {
            let inp = feed_count(index, counts, conv.in_feed) as u64;
            total += k2 * inp * out;
            if conv.bias {
                total += out;
            }
        }
    }
    for bn in &index.bns {
        total += 2 * counts[bn.group] as u64;
    }
    for lin in &index.linears {
        let inp = feed_count(index, counts, lin.in_feed) as u64;
        // classifier keeps its bias
        total += inp * lin.spatial as u64 * lin.out_features as u64 + lin.out_features as u64;
    }
    total
}

/// FLOPs at a uniform width multiplier.
pub fn flops_at_width(index: &GraphIndex, width: f64, policy: JoinPolicy) -> u64 {
    flops_count(index, &PrunedArchitecture::uniform(index, width), policy)
}

/// Parameters at a uniform width multiplier.
pub fn params_at_width(index: &GraphIndex, width: f64) -> u64 {
    param_count(index, &PrunedArchitecture::uniform(index, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BlockSpec, LayerSpec, ModelSpec};
    use crate::layers::PoolKind;

    fn single_conv_spec() -> ModelSpec {
        ModelSpec {
            name: alloc::string::String::from("single"),
            input_channels: 16,
            input_size: 8,
            num_classes: 2,
            blocks: alloc::vec![
                BlockSpec::plain(alloc::vec![LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: true,
                    slimmable: true,
                }]),
                BlockSpec::plain(alloc::vec![
                    LayerSpec::Pool {
                        kind: PoolKind::GlobalAvg,
                        window: 0,
                        stride: 1,
                    },
                    LayerSpec::Linear { out_features: 2 },
                ]),
            ],
        }
    }

    #[test]
    fn conv_flops_formula() {
        // conv 3x3, 16 -> 32 channels, 8x8 output: 3*3*16*32*8*8
        let index = single_conv_spec().index().unwrap();
        let full = PrunedArchitecture::full(&index);
        let conv_macs = 3u64 * 3 * 16 * 32 * 8 * 8;
        let fc_macs = 32u64 * 2;
        assert_eq!(
            flops_count(&index, &full, JoinPolicy::None),
            conv_macs + fc_macs
        );
        assert_eq!(conv_macs, 294_912);
    }

    #[test]
    fn conv_param_formula() {
        // conv 16 -> 32, 3x3, with bias: 32*16*9 + 32 = 4640
        let index = single_conv_spec().index().unwrap();
        let full = PrunedArchitecture::full(&index);
        let conv_params = 32u64 * 16 * 9 + 32;
        assert_eq!(conv_params, 4640);
        let fc_params = 32u64 * 2 + 2;
        assert_eq!(param_count(&index, &full), conv_params + fc_params);
    }
}
