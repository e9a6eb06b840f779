//! Slimmable channel sorting.
//!
//! Sorting reorders the filters of each layer by pruning precedence and the
//! input channels of every consumer by the same permutation, so the network's
//! outputs do not change while every sub-network ends up using a contiguous
//! channel prefix. Residual joins keep a canonical packing of their shared
//! identity space; the per-path index maps needed by zero-padded joins are
//! derived from the stored permutations at plan time.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Feed, GroupKind};
use crate::layers::Layer;
use crate::net::Network;
use crate::profile::JoinPolicy;
use crate::score::ChannelScores;

/// Per-group permutation: entry `[new_position] = old_position`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPermutation {
    pub per_group: Vec<Vec<u32>>,
}

impl ChannelPermutation {
    pub fn new(per_group: Vec<Vec<u32>>) -> Self {
        ChannelPermutation { per_group }
    }

    pub fn identity_for<E: Element>(net: &Network<E>) -> Self {
        ChannelPermutation {
            per_group: net
                .index
                .groups
                .iter()
                .map(|g| (0..g.size as u32).collect())
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.per_group
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &v)| v as usize == i))
    }

    fn validate(&self, sizes: &[usize]) -> Result<()> {
        if self.per_group.len() != sizes.len() {
            return Err(Error::LengthMismatch {
                at: String::from("permutation groups"),
                expected: sizes.len(),
                got: self.per_group.len(),
            });
        }
        for (g, (perm, &size)) in self.per_group.iter().zip(sizes).enumerate() {
            if perm.len() != size {
                return Err(Error::LengthMismatch {
                    at: alloc::format!("permutation group {g}"),
                    expected: size,
                    got: perm.len(),
                });
            }
            let mut seen = vec![false; size];
            for &v in perm {
                if v as usize >= size || seen[v as usize] {
                    return Err(Error::Invalid(alloc::format!(
                        "group {g}: permutation is not a bijection"
                    )));
                }
                seen[v as usize] = true;
            }
        }
        Ok(())
    }
}

/// Sort channels by descending score; ties break by ascending original index.
pub fn scs_compute(scores: &ChannelScores) -> ChannelPermutation {
    let per_group = scores
        .per_group
        .iter()
        .map(|s| descending_stable(s))
        .collect();
    ChannelPermutation { per_group }
}

fn descending_stable(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    // stable sort: equal scores keep ascending index order
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    order
}

/// Reorder filters, batch-norm state (all banks) and consumer input channels
/// by per-group permutations. Outputs of the full network are unchanged up
/// to float reassociation. Empty permutation entries mean identity.
pub fn apply_permutation<E: Element>(
    net: &mut Network<E>,
    perm: &ChannelPermutation,
) -> Result<()> {
    let sizes: Vec<usize> = net.index.groups.iter().map(|g| g.size).collect();
    perm.validate(&sizes)?;
    let index = net.index.clone();
    for (gi, p) in perm.per_group.iter().enumerate() {
        if p.iter().enumerate().all(|(i, &v)| v as usize == i) {
            continue;
        }
        if index.groups[gi].kind == GroupKind::Linear {
            return Err(Error::Unsupported {
                at: index.groups[gi].name.clone(),
                detail: String::from("classifier outputs are never permuted"),
            });
        }
        // producer filters (and depthwise filters riding on the group)
        for conv in &index.convs {
            if conv.group != gi {
                continue;
            }
            let layer = net.layer_mut(conv.site);
            if let Layer::Conv(c) = layer {
                permute_rows(c.weight.value.data_mut(), p);
                permute_rows(c.weight.grad.data_mut(), p);
                if let Some(b) = &mut c.bias {
                    permute_rows(b.value.data_mut(), p);
                    permute_rows(b.grad.data_mut(), p);
                }
            }
        }
        // batch norm state, every bank
        for bn_site in &index.bns {
            if bn_site.group != gi {
                continue;
            }
            if let Layer::Bn(bn) = net.layer_mut(bn_site.site) {
                for bank in &mut bn.banks {
                    permute_rows(bank.gamma.value.data_mut(), p);
                    permute_rows(bank.gamma.grad.data_mut(), p);
                    permute_rows(bank.beta.value.data_mut(), p);
                    permute_rows(bank.beta.grad.data_mut(), p);
                    permute_slice(&mut bank.running_mean, p);
                    permute_slice(&mut bank.running_var, p);
                }
            }
        }
        // consumer input channels (standard convolutions only: depthwise
        // filters were reordered with the group above)
        for conv in &index.convs {
            if conv.depthwise || conv.in_feed != Feed::Group(gi) {
                continue;
            }
            if let Layer::Conv(c) = net.layer_mut(conv.site) {
                permute_cols(
                    c.weight.value.data_mut(),
                    c.out_channels,
                    c.in_channels,
                    c.kernel * c.kernel,
                    p,
                );
                permute_cols(
                    c.weight.grad.data_mut(),
                    c.out_channels,
                    c.in_channels,
                    c.kernel * c.kernel,
                    p,
                );
            }
        }
        for lin in &index.linears {
            if lin.in_feed != Feed::Group(gi) {
                continue;
            }
            if let Layer::Linear(l) = net.layer_mut(lin.site) {
                permute_cols(
                    l.weight.value.data_mut(),
                    l.out_features,
                    l.in_channels,
                    l.spatial,
                    p,
                );
                permute_cols(
                    l.weight.grad.data_mut(),
                    l.out_features,
                    l.in_channels,
                    l.spatial,
                    p,
                );
            }
        }
        // compose the storage -> identity map
        let old = net.sort_state[gi].clone();
        for (new_pos, &old_pos) in p.iter().enumerate() {
            net.sort_state[gi][new_pos] = old[old_pos as usize];
        }
    }
    Ok(())
}

/// Reorder a join's canonical output packing, rewriting the input channels
/// of every layer that consumes the join.
fn set_join_pack<E: Element>(net: &mut Network<E>, join: usize, new_pack: Vec<u32>) -> Result<()> {
    let size = net.index.joins[join].size;
    if new_pack.len() != size {
        return Err(Error::LengthMismatch {
            at: String::from("join pack"),
            expected: size,
            got: new_pack.len(),
        });
    }
    let old_pack = net.join_sort[join].pack.clone();
    let mut old_pos = vec![0u32; size];
    for (pos, &ident) in old_pack.iter().enumerate() {
        old_pos[ident as usize] = pos as u32;
    }
    // relative permutation: new consumer column j reads old column
    let rel: Vec<u32> = new_pack.iter().map(|&ident| old_pos[ident as usize]).collect();
    let index = net.index.clone();
    for conv in &index.convs {
        if conv.depthwise || conv.in_feed != Feed::Join(join) {
            continue;
        }
        if let Layer::Conv(c) = net.layer_mut(conv.site) {
            permute_cols(
                c.weight.value.data_mut(),
                c.out_channels,
                c.in_channels,
                c.kernel * c.kernel,
                &rel,
            );
            permute_cols(
                c.weight.grad.data_mut(),
                c.out_channels,
                c.in_channels,
                c.kernel * c.kernel,
                &rel,
            );
        }
    }
    for lin in &index.linears {
        if lin.in_feed != Feed::Join(join) {
            continue;
        }
        if let Layer::Linear(l) = net.layer_mut(lin.site) {
            permute_cols(
                l.weight.value.data_mut(),
                l.out_features,
                l.in_channels,
                l.spatial,
                &rel,
            );
            permute_cols(
                l.weight.grad.data_mut(),
                l.out_features,
                l.in_channels,
                l.spatial,
                &rel,
            );
        }
    }
    net.join_sort[join].pack = new_pack;
    Ok(())
}

/// `data` is `(rows, row_len)` row-major; reorder rows so that new row `i`
/// is old row `p[i]`. For flat per-channel vectors `row_len` divides out.
fn permute_rows<E: Copy>(data: &mut [E], p: &[u32]) {
    let rows = p.len();
    let row_len = data.len() / rows;
    let old = data.to_vec();
    for (new_r, &old_r) in p.iter().enumerate() {
        let dst = new_r * row_len;
        let src = old_r as usize * row_len;
        data[dst..dst + row_len].copy_from_slice(&old[src..src + row_len]);
    }
}

fn permute_slice<E: Copy>(data: &mut Vec<E>, p: &[u32]) {
    let old = data.clone();
    for (new_r, &old_r) in p.iter().enumerate() {
        data[new_r] = old[old_r as usize];
    }
}

/// Reorder column blocks: `data` is `(rows, cols * block)` row-major; new
/// column block `j` is old block `p[j]`.
fn permute_cols<E: Copy>(data: &mut [E], rows: usize, cols: usize, block: usize, p: &[u32]) {
    debug_assert_eq!(data.len(), rows * cols * block);
    let old = data.to_vec();
    for r in 0..rows {
        let row_base = r * cols * block;
        for (new_c, &old_c) in p.iter().enumerate() {
            let dst = row_base + new_c * block;
            let src = row_base + old_c as usize * block;
            data[dst..dst + block].copy_from_slice(&old[src..src + block]);
        }
    }
}

/// Sort the whole network by pruning precedence under a join policy, set
/// canonical join packings, and return the applied permutation.
///
/// Under aligned policies every group meeting at a join is sorted by the
/// join chain's anchor scores (the shortcut source), which keeps positional
/// adds valid. Under the zero-padding policy each group sorts by its own
/// scores and joins pack their identity space so that every embedded width's
/// union of selections is a contiguous prefix.
pub fn sort_network<E: Element>(
    net: &mut Network<E>,
    scores: &ChannelScores,
    policy: JoinPolicy,
) -> Result<ChannelPermutation> {
    if net.sort_state.iter().enumerate().any(|(_, s)| {
        s.iter().enumerate().any(|(i, &v)| v as usize != i)
    }) {
        return Err(Error::Unsupported {
            at: String::from("sort_network"),
            detail: String::from("network is already sorted"),
        });
    }
    if scores.per_group.len() != net.index.groups.len() {
        return Err(Error::LengthMismatch {
            at: String::from("scores"),
            expected: net.index.groups.len(),
            got: scores.per_group.len(),
        });
    }
    let index = net.index.clone();
    // per-group order by own scores
    let mut per_group: Vec<Vec<u32>> = scores
        .per_group
        .iter()
        .zip(&index.groups)
        .map(|(s, g)| {
            if s.is_empty() {
                (0..g.size as u32).collect()
            } else {
                descending_stable(s)
            }
        })
        .collect();

    if policy != JoinPolicy::Zpm {
        // aligned policies: each join chain shares its anchor's order
        for join in &index.joins {
            let anchor_order: Vec<u32> = match join.shortcut {
                Feed::Group(g) => per_group[g].clone(),
                // chained joins inherit the chain anchor transitively; the
                // upstream join already carries the anchor order
                Feed::Join(i) => {
                    let upstream_main = index.joins[i].main_group;
                    per_group[upstream_main].clone()
                }
                Feed::Input => (0..join.size as u32).collect(),
            };
            if policy == JoinPolicy::Uniform || policy == JoinPolicy::None {
                // positional prefixes: no sorting across the join
                per_group[join.main_group] = (0..join.size as u32).collect();
                if let Feed::Group(g) = join.shortcut {
                    per_group[g] = (0..join.size as u32).collect();
                }
            } else {
                per_group[join.main_group] = anchor_order.clone();
                if let Feed::Group(g) = join.shortcut {
                    per_group[g] = anchor_order;
                }
            }
        }
    }

    let perm = ChannelPermutation::new(per_group);
    apply_permutation(net, &perm)?;

    // canonical join packs: identities ordered by the first embedded width
    // whose union contains them, then by main-path precedence
    let archs: Vec<Vec<usize>> = if net.embedded.is_empty() {
        vec![index.groups.iter().map(|g| g.size).collect()]
    } else {
        net.embedded.iter().map(|a| a.counts.clone()).collect()
    };
    let mut union_prefix: Vec<Vec<usize>> = vec![Vec::new(); index.joins.len()];
    for (ji, join) in index.joins.iter().enumerate() {
        let size = join.size;
        let main_order = &net.sort_state[join.main_group];
        let mut first_width = vec![usize::MAX; size];
        let mut union_counts = Vec::with_capacity(archs.len());
        for (wi, counts) in archs.iter().enumerate() {
            let n_main = counts[join.main_group];
            for &ident in &main_order[..n_main] {
                let f = &mut first_width[ident as usize];
                if *f == usize::MAX {
                    *f = wi;
                }
            }
            let shortcut_idents: Vec<u32> = match join.shortcut {
                Feed::Group(g) => net.sort_state[g][..counts[g]].to_vec(),
                Feed::Join(i) => {
                    let u = union_prefix[i][wi];
                    net.join_sort[i].pack[..u].to_vec()
                }
                Feed::Input => (0..size as u32).collect(),
            };
            for &ident in &shortcut_idents {
                let f = &mut first_width[ident as usize];
                if *f == usize::MAX {
                    *f = wi;
                }
            }
            union_counts.push(first_width.iter().filter(|&&f| f <= wi).count());
        }
        // main-precedence rank for tie-breaking
        let mut main_rank = vec![u32::MAX; size];
        for (pos, &ident) in main_order.iter().enumerate() {
            main_rank[ident as usize] = pos as u32;
        }
        let mut pack: Vec<u32> = (0..size as u32).collect();
        pack.sort_by_key(|&c| {
            (
                first_width[c as usize],
                main_rank[c as usize],
                c,
            )
        });
        set_join_pack(net, ji, pack)?;
        net.join_sort[ji].union_counts = union_counts.clone();
        union_prefix[ji] = union_counts;
    }
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{Normalization, ScoringMethod};

    fn scores_of(v: Vec<Vec<f64>>) -> ChannelScores {
        ChannelScores {
            per_group: v,
            method: ScoringMethod::BnGamma,
            normalization: Normalization::None,
        }
    }

    #[test]
    fn descending_sort_with_stable_ties() {
        let s = scores_of(alloc::vec![alloc::vec![0.1, 0.9, 0.5]]);
        let p = scs_compute(&s);
        assert_eq!(p.per_group[0], alloc::vec![1, 2, 0]);

        let equal = scores_of(alloc::vec![alloc::vec![0.4, 0.4, 0.4]]);
        let p = scs_compute(&equal);
        assert_eq!(p.per_group[0], alloc::vec![0, 1, 2], "ties keep order");
    }

    #[test]
    fn prefix_has_top_scores() {
        use crate::rng::SeedStream;
        let mut rng = SeedStream::new(11);
        for _ in 0..20 {
            let n = 2 + rng.below(10);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let p = descending_stable(&scores);
            for m in 1..=n {
                // brute force: the m largest scores
                let mut sorted = scores.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let prefix_min = p[..m]
                    .iter()
                    .map(|&i| scores[i as usize])
                    .fold(f64::INFINITY, f64::min);
                assert!(prefix_min >= sorted[m - 1] - 1e-12);
            }
        }
    }
}
