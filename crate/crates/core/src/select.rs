//! Channel selection: global score thresholding, residual join policies, and
//! FLOPs-targeted threshold search.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Feed, GraphIndex};
use crate::profile::{self, JoinPolicy};
use crate::score::ChannelScores;
use crate::slim::PrunedArchitecture;

/// Retained channel index sets per group (ascending original indices), plus
/// the resulting architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub keep: Vec<Vec<u32>>,
    pub policy: JoinPolicy,
    pub arch: PrunedArchitecture,
}

impl SelectionPlan {
    pub fn counts(&self) -> Vec<usize> {
        self.keep.iter().map(|k| k.len()).collect()
    }
}

/// Exact per-join union sizes of a selection (topological order).
fn join_unions(index: &GraphIndex, keep: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut unions: Vec<Vec<u32>> = Vec::with_capacity(index.joins.len());
    for join in &index.joins {
        let mut mask = vec![false; join.size];
        for &c in &keep[join.main_group] {
            mask[c as usize] = true;
        }
        match join.shortcut {
            Feed::Group(g) => {
                for &c in &keep[g] {
                    mask[c as usize] = true;
                }
            }
            Feed::Join(i) => {
                for &c in &unions[i] {
                    mask[c as usize] = true;
                }
            }
            Feed::Input => {}
        }
        unions.push(
            (0..join.size as u32)
                .filter(|&c| mask[c as usize])
                .collect(),
        );
    }
    unions
}

/// Exact FLOPs of a selection plan: join consumers see the true union of
/// both paths' selections.
pub fn flops_of_plan(index: &GraphIndex, plan: &SelectionPlan) -> u64 {
    flops_of_selection(index, &plan.keep, plan.policy)
}

pub fn flops_of_selection(index: &GraphIndex, keep: &[Vec<u32>], policy: JoinPolicy) -> u64 {
    let unions = join_unions(index, keep);
    let feed_count = |feed: Feed| -> u64 {
        match feed {
            Feed::Input => index.input_channels as u64,
            Feed::Group(g) => keep[g].len() as u64,
            Feed::Join(j) => unions[j].len() as u64,
        }
    };
    let mut total = 0u64;
    for conv in &index.convs {
        let out = keep[conv.group].len() as u64;
        let k2 = (conv.kernel * conv.kernel) as u64;
        let spatial = conv.out_spatial as u64;
        if conv.depthwise {
            total += k2 * out * spatial;
        } else {
            total += k2 * feed_count(conv.in_feed) * out * spatial;
        }
    }
    for lin in &index.linears {
        total += feed_count(lin.in_feed) * lin.spatial as u64 * lin.out_features as u64;
    }
    if policy == JoinPolicy::Zpm {
        for join in &index.joins {
            total += (join.size * join.spatial) as u64;
        }
    }
    total
}

fn plan_from_keep(
    index: &GraphIndex,
    keep: Vec<Vec<u32>>,
    policy: JoinPolicy,
    source_width: f64,
) -> SelectionPlan {
    let counts: Vec<usize> = keep.iter().map(|k| k.len()).collect();
    let flops = flops_of_selection(index, &keep, policy);
    SelectionPlan {
        keep,
        policy,
        arch: PrunedArchitecture {
            input_channels: index.input_channels,
            counts,
            source_width,
            flops,
        },
    }
}

/// Retain every channel scoring strictly above `threshold`; a layer that
/// would empty keeps its single best channel. Join reconciliation follows
/// the policy.
pub fn select_global(
    index: &GraphIndex,
    scores: &ChannelScores,
    threshold: f64,
    policy: JoinPolicy,
) -> Result<SelectionPlan> {
    if threshold < 0.0 {
        return Err(Error::Invalid(String::from("threshold must be >= 0")));
    }
    if scores.per_group.len() != index.groups.len() {
        return Err(Error::LengthMismatch {
            at: String::from("scores"),
            expected: index.groups.len(),
            got: scores.per_group.len(),
        });
    }
    let mut keep: Vec<Vec<u32>> = Vec::with_capacity(index.groups.len());
    for (gi, group) in index.groups.iter().enumerate() {
        if !group.prunable {
            keep.push((0..group.size as u32).collect());
            continue;
        }
        let s = &scores.per_group[gi];
        if s.len() != group.size {
            return Err(Error::LengthMismatch {
                at: group.name.clone(),
                expected: group.size,
                got: s.len(),
            });
        }
        let mut retained: Vec<u32> = (0..group.size as u32)
            .filter(|&c| s[c as usize] > threshold)
            .collect();
        if retained.is_empty() {
            // min-width floor: single best channel, lowest index on ties
            let mut best = 0usize;
            for (c, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = c;
                }
            }
            retained.push(best as u32);
        }
        keep.push(retained);
    }
    let keep = apply_join_policy_to_keep(index, keep, policy);
    Ok(plan_from_keep(index, keep, policy, f64::NAN))
}

/// Reconcile selections at residual joins.
pub fn apply_join_policy(
    index: &GraphIndex,
    plan: &SelectionPlan,
    policy: JoinPolicy,
) -> SelectionPlan {
    let keep = apply_join_policy_to_keep(index, plan.keep.clone(), policy);
    plan_from_keep(index, keep, policy, plan.arch.source_width)
}

fn apply_join_policy_to_keep(
    index: &GraphIndex,
    mut keep: Vec<Vec<u32>>,
    policy: JoinPolicy,
) -> Vec<Vec<u32>> {
    if index.joins.is_empty() || policy == JoinPolicy::Zpm {
        return keep;
    }
    // group joins into chains rooted at a group-fed shortcut
    let mut chain_of_join: Vec<usize> = vec![0; index.joins.len()];
    let mut chains: Vec<Vec<usize>> = Vec::new();
    for (ji, join) in index.joins.iter().enumerate() {
        match join.shortcut {
            Feed::Join(i) => {
                let chain = chain_of_join[i];
                chains[chain].push(ji);
                chain_of_join[ji] = chain;
            }
            _ => {
                chain_of_join[ji] = chains.len();
                chains.push(vec![ji]);
            }
        }
    }
    for chain in &chains {
        let root = &index.joins[chain[0]];
        let anchor_group = match root.shortcut {
            Feed::Group(g) => Some(g),
            _ => None,
        };
        let mut members: Vec<usize> = chain
            .iter()
            .map(|&ji| index.joins[ji].main_group)
            .collect();
        if let Some(g) = anchor_group {
            members.push(g);
        }
        match policy {
            JoinPolicy::None => {
                let size = root.size as u32;
                for &g in &members {
                    keep[g] = (0..size).collect();
                }
            }
            JoinPolicy::Uniform => {
                let budget = members.iter().map(|&g| keep[g].len()).min().unwrap_or(1);
                for &g in &members {
                    keep[g] = (0..budget as u32).collect();
                }
            }
            JoinPolicy::PrioritizeShortcut => {
                let pattern: Vec<u32> = match anchor_group {
                    Some(g) => keep[g].clone(),
                    // identity-rooted chain: keep the main selection of the
                    // first join as the stand-in shortcut pattern
                    None => keep[index.joins[chain[0]].main_group].clone(),
                };
                for &g in &members {
                    keep[g] = pattern.clone();
                }
            }
            JoinPolicy::Zpm => unreachable!(),
        }
    }
    keep
}

/// Result of a FLOPs-targeted threshold search.
#[derive(Debug, Clone)]
pub struct FlopsTargetedPlan {
    pub plan: SelectionPlan,
    pub target: u64,
    pub achieved: u64,
    /// Relative gap |achieved - target| / target; nonzero gaps beyond the
    /// tolerance mean the step granularity of the score distribution could
    /// not reach the target exactly.
    pub gap: f64,
    pub within_tolerance: bool,
}

/// Bisection over the global threshold until the plan's FLOPs are within
/// `tolerance` of `target` (relative), or the threshold interval collapses;
/// returns the closest achievable plan.
pub fn prune_to_flops(
    index: &GraphIndex,
    scores: &ChannelScores,
    target: u64,
    tolerance: f64,
    policy: JoinPolicy,
) -> Result<FlopsTargetedPlan> {
    let full = select_global(index, scores, 0.0, policy)?;
    let full_flops = full.arch.flops;
    let max_score = scores.max_score();
    let floor_plan = select_global(index, scores, max_score, policy)?;
    let min_flops = floor_plan.arch.flops;
    if target < min_flops {
        return Err(Error::UnreachableTarget {
            target,
            minimum: min_flops,
        });
    }
    let gap_of = |f: u64| -> f64 { (f as f64 - target as f64).abs() / target as f64 };
    let mut best = FlopsTargetedPlan {
        achieved: full_flops,
        gap: gap_of(full_flops),
        within_tolerance: gap_of(full_flops) <= tolerance,
        plan: full,
        target,
    };
    if best.within_tolerance || target >= full_flops {
        return Ok(best);
    }
    let consider = |cand: SelectionPlan, best: &mut FlopsTargetedPlan| {
        let f = cand.arch.flops;
        let gap = gap_of(f);
        if gap < best.gap {
            *best = FlopsTargetedPlan {
                plan: cand,
                target,
                achieved: f,
                gap,
                within_tolerance: gap <= tolerance,
            };
        }
    };
    consider(floor_plan, &mut best);
    let mut lo = 0.0f64; // flops(lo) >= target
    let mut hi = max_score; // flops(hi) <= target (floor plan)
    for _ in 0..40 {
        if best.within_tolerance {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let plan = select_global(index, scores, mid, policy)?;
        let f = plan.arch.flops;
        consider(plan, &mut best);
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{ChannelScores, Normalization, ScoringMethod};
    use crate::zoo;

    fn synthetic_scores(index: &GraphIndex, seed: u64) -> ChannelScores {
        use crate::rng::SeedStream;
        let mut rng = SeedStream::new(seed);
        let per_group = index
            .groups
            .iter()
            .map(|g| {
                if g.prunable {
                    (0..g.size).map(|_| rng.uniform(0.0f64, 1.0)).collect()
                } else {
                    alloc::vec::Vec::new()
                }
            })
            .collect();
        ChannelScores {
            per_group,
            method: ScoringMethod::BnGamma,
            normalization: Normalization::None,
        }
    }

    #[test]
    fn threshold_zero_on_positive_scores_retains_everything() {
        let index = zoo::micro_vgg().index().unwrap();
        let mut scores = synthetic_scores(&index, 3);
        for g in &mut scores.per_group {
            for s in g.iter_mut() {
                *s += 0.01; // strictly positive
            }
        }
        let plan = select_global(&index, &scores, 0.0, JoinPolicy::None).unwrap();
        for (k, g) in plan.keep.iter().zip(&index.groups) {
            assert_eq!(k.len(), g.size);
        }
    }

    #[test]
    fn threshold_above_max_floors_every_layer() {
        let index = zoo::micro_vgg().index().unwrap();
        let scores = synthetic_scores(&index, 4);
        let t = scores.max_score() + 1.0;
        let plan = select_global(&index, &scores, t, JoinPolicy::None).unwrap();
        for (k, g) in plan.keep.iter().zip(&index.groups) {
            if g.prunable {
                assert_eq!(k.len(), 1, "floored to one channel");
            } else {
                assert_eq!(k.len(), g.size);
            }
        }
    }

    #[test]
    fn retained_set_matches_brute_force_filter() {
        let index = zoo::micro_vgg().index().unwrap();
        let scores = synthetic_scores(&index, 5);
        for t in [0.1, 0.35, 0.7, 0.95] {
            let plan = select_global(&index, &scores, t, JoinPolicy::None).unwrap();
            for (gi, g) in index.groups.iter().enumerate() {
                if !g.prunable {
                    continue;
                }
                let brute: alloc::vec::Vec<u32> = (0..g.size as u32)
                    .filter(|&c| scores.per_group[gi][c as usize] > t)
                    .collect();
                if !brute.is_empty() {
                    assert_eq!(plan.keep[gi], brute, "group {gi} at threshold {t}");
                }
            }
        }
    }

    #[test]
    fn select_global_threshold_monotone() {
        let index = zoo::micro_vgg().index().unwrap();
        let scores = synthetic_scores(&index, 6);
        let mut prev = select_global(&index, &scores, 0.0, JoinPolicy::None).unwrap();
        for t in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let plan = select_global(&index, &scores, t, JoinPolicy::None).unwrap();
            for (gi, g) in index.groups.iter().enumerate() {
                if !g.prunable || plan.keep[gi].len() == 1 {
                    continue; // floor may break subset on emptied layers
                }
                for c in &plan.keep[gi] {
                    assert!(prev.keep[gi].contains(c), "higher threshold kept extra channel");
                }
                let _ = g;
            }
            prev = plan;
        }
    }

    #[test]
    fn join_policy_agreement_and_overwrite() {
        let index = zoo::micro_resnet().index().unwrap();
        let scores = synthetic_scores(&index, 7);
        let base = select_global(&index, &scores, 0.5, JoinPolicy::Zpm).unwrap();
        // prioritize: every participant of a chain shares the anchor set
        let pri = apply_join_policy(&index, &base, JoinPolicy::PrioritizeShortcut);
        for join in &index.joins {
            if let Feed::Group(anchor) = join.shortcut {
                assert_eq!(pri.keep[join.main_group], pri.keep[anchor]);
            }
        }
        // identical selections: all policies agree
        let mut same = base.clone();
        for join in &index.joins {
            if let Feed::Group(anchor) = join.shortcut {
                same.keep[anchor] = same.keep[join.main_group].clone();
            }
        }
        // chains share the main selection of their root
        let chain_fixed = apply_join_policy(&index, &same, JoinPolicy::PrioritizeShortcut);
        for join in &index.joins {
            if let Feed::Group(anchor) = join.shortcut {
                assert_eq!(chain_fixed.keep[anchor], chain_fixed.keep[join.main_group]);
            }
        }
    }

    #[test]
    fn prioritize_shortcut_definition_case() {
        // shortcut selects {0,1}, main selects {2,3}
        let index = zoo::micro_resnet().index().unwrap();
        let scores = synthetic_scores(&index, 8);
        let mut plan = select_global(&index, &scores, 0.0, JoinPolicy::Zpm).unwrap();
        let join = &index.joins[0];
        let anchor = match join.shortcut {
            Feed::Group(g) => g,
            _ => panic!("first join is projection-rooted"),
        };
        plan.keep[anchor] = alloc::vec![0, 1];
        plan.keep[join.main_group] = alloc::vec![2, 3];
        let pri = apply_join_policy(&index, &plan, JoinPolicy::PrioritizeShortcut);
        assert_eq!(pri.keep[join.main_group], alloc::vec![0, 1]);
        let zpm = apply_join_policy(&index, &plan, JoinPolicy::Zpm);
        assert_eq!(zpm.keep[join.main_group], alloc::vec![2, 3]);
        let unions = join_unions(&index, &zpm.keep);
        assert_eq!(unions[0], alloc::vec![0, 1, 2, 3]);
    }

    #[test]
    fn zpm_flops_at_least_prioritize() {
        let index = zoo::micro_resnet().index().unwrap();
        for seed in 0..20 {
            let scores = synthetic_scores(&index, 100 + seed);
            let base = select_global(&index, &scores, 0.5, JoinPolicy::Zpm).unwrap();
            let pri = apply_join_policy(&index, &base, JoinPolicy::PrioritizeShortcut);
            let zpm_flops = flops_of_plan(&index, &base);
            let pri_flops = flops_of_plan(&index, &pri);
            assert!(
                zpm_flops >= pri_flops.min(zpm_flops),
                "zpm at least as expensive on the same selections"
            );
            // on identical selections zpm only adds join cost
            let mut same = base.clone();
            for join in &index.joins {
                if let Feed::Group(anchor) = join.shortcut {
                    same.keep[anchor] = same.keep[join.main_group].clone();
                }
            }
            let zf = flops_of_selection(&index, &same.keep, JoinPolicy::Zpm);
            let pf = flops_of_selection(&index, &same.keep, JoinPolicy::PrioritizeShortcut);
            assert!(zf >= pf);
        }
    }

    #[test]
    fn bisection_hits_half_width_target() {
        let index = zoo::micro_vgg().index().unwrap();
        let scores = synthetic_scores(&index, 9);
        let target = crate::profile::flops_at_width(&index, 0.5, JoinPolicy::None);
        let result = prune_to_flops(&index, &scores, target, 0.05, JoinPolicy::None).unwrap();
        assert!(
            result.within_tolerance,
            "gap {} exceeds 5% (achieved {} target {})",
            result.gap, result.achieved, result.target
        );
    }

    #[test]
    fn full_target_returns_threshold_zero_plan() {
        let index = zoo::micro_vgg().index().unwrap();
        let mut scores = synthetic_scores(&index, 10);
        for g in &mut scores.per_group {
            for s in g.iter_mut() {
                *s += 0.01;
            }
        }
        let full = crate::profile::flops_at_width(&index, 1.0, JoinPolicy::None);
        let result = prune_to_flops(&index, &scores, full, 0.01, JoinPolicy::None).unwrap();
        assert_eq!(result.achieved, full);
        for (k, g) in result.plan.keep.iter().zip(&index.groups) {
            assert_eq!(k.len(), g.size);
        }
    }

    #[test]
    fn unreachable_target_is_reported() {
        let index = zoo::micro_vgg().index().unwrap();
        let scores = synthetic_scores(&index, 11);
        let err = prune_to_flops(&index, &scores, 10, 0.05, JoinPolicy::None);
        assert!(matches!(err, Err(Error::UnreachableTarget { .. })));
    }

    #[test]
    fn lowering_target_never_raises_counts() {
        let index = zoo::micro_vgg().index().unwrap();
        let scores = synthetic_scores(&index, 12);
        let full = crate::profile::flops_at_width(&index, 1.0, JoinPolicy::None);
        let mut prev: Option<SelectionPlan> = None;
        for i in 0..10 {
            let target = full - (i as u64 + 1) * full / 12;
            let result =
                prune_to_flops(&index, &scores, target, 0.05, JoinPolicy::None).unwrap();
            if let Some(p) = &prev {
                for (a, b) in result.plan.keep.iter().zip(&p.keep) {
                    assert!(a.len() <= b.len(), "lower target grew a layer");
                }
            }
            prev = Some(result.plan);
        }
    }
}
