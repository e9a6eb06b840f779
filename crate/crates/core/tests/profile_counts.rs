//! Count regressions for the full-size zoo specs and the profiler's
//! width/architecture invariants.
//!
//! The exact expected values were frozen from an independent per-layer
//! enumeration (walking the reference layer configurations and summing
//! k*k*cin*cout*hout*wout per convolution, in*out for the classifier, and
//! weight+bn+bias parameters).

use slimprune_core::profile::{
    flops_at_width, flops_count, param_count, params_at_width, JoinPolicy,
};
use slimprune_core::slim::PrunedArchitecture;
use slimprune_core::zoo;

struct Expect {
    name: &'static str,
    width: f64,
    macs: u64,
    params: u64,
}

// frozen from the independent enumeration oracle
const EXPECTED: [Expect; 6] = [
    Expect {
        name: "resnet50",
        width: 1.0,
        macs: 4_089_184_256,
        params: 25_557_032,
    },
    Expect {
        name: "resnet50",
        width: 0.5,
        macs: 1_127_374_848,
        params: 6_927_528,
    },
    Expect {
        name: "resnet50",
        width: 0.75,
        macs: 2_364_223_488,
        params: 14_778_216,
    },
    Expect {
        name: "vggnet",
        width: 1.0,
        macs: 19_508_940_800,
        params: 20_542_888,
    },
    Expect {
        name: "mobilenet_v1",
        width: 1.0,
        macs: 568_740_352,
        params: 4_231_976,
    },
    Expect {
        name: "mobilenet_v2",
        width: 1.0,
        macs: 300_774_272,
        params: 3_504_872,
    },
];

#[test]
fn full_size_counts_match_frozen_oracle() {
    for e in &EXPECTED {
        let index = zoo::zoo(e.name).unwrap().index().unwrap();
        let macs = flops_at_width(&index, e.width, JoinPolicy::None);
        let params = params_at_width(&index, e.width);
        assert_eq!(
            macs, e.macs,
            "{} x{}: macs {} != {}",
            e.name, e.width, macs, e.macs
        );
        assert_eq!(
            params, e.params,
            "{} x{}: params {} != {}",
            e.name, e.width, params, e.params
        );
    }
}

#[test]
fn width_monotonicity() {
    for name in zoo::ZOO_NAMES {
        let index = zoo::zoo(name).unwrap().index().unwrap();
        let widths = [0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0];
        let mut prev_f = 0u64;
        let mut prev_p = 0u64;
        for w in widths {
            let f = flops_at_width(&index, w, JoinPolicy::None);
            let p = params_at_width(&index, w);
            assert!(f >= prev_f, "{name}: flops not monotone at width {w}");
            assert!(p >= prev_p, "{name}: params not monotone at width {w}");
            prev_f = f;
            prev_p = p;
        }
    }
}

#[test]
fn architecture_dominance() {
    // if A <= B elementwise then flops(A) <= flops(B) under policy none
    let index = zoo::zoo("micro_resnet").unwrap().index().unwrap();
    let b = PrunedArchitecture::uniform(&index, 0.8);
    let mut a = b.clone();
    for (i, c) in a.counts.iter_mut().enumerate() {
        if index.groups[i].prunable && *c > 1 && i % 2 == 0 {
            *c -= 1;
        }
    }
    assert!(a.dominated_by(&b));
    assert!(
        flops_count(&index, &a, JoinPolicy::None) <= flops_count(&index, &b, JoinPolicy::None)
    );
    assert!(param_count(&index, &a) <= param_count(&index, &b));
}

#[test]
fn width_equals_uniform_architecture() {
    for name in ["micro_vgg", "micro_resnet", "micro_mobilenet_v2"] {
        let index = zoo::zoo(name).unwrap().index().unwrap();
        for w in [0.25, 0.5, 0.75, 1.0] {
            let arch = PrunedArchitecture::uniform(&index, w);
            assert_eq!(
                flops_at_width(&index, w, JoinPolicy::Zpm),
                flops_count(&index, &arch, JoinPolicy::Zpm),
                "{name} at width {w}"
            );
            assert_eq!(params_at_width(&index, w), param_count(&index, &arch));
        }
    }
}

#[test]
fn zpm_adds_join_cost_over_full_channels() {
    let index = zoo::zoo("micro_resnet").unwrap().index().unwrap();
    let arch = PrunedArchitecture::uniform(&index, 0.5);
    let without = flops_count(&index, &arch, JoinPolicy::PrioritizeShortcut);
    let with = flops_count(&index, &arch, JoinPolicy::Zpm);
    let add_cost: u64 = index
        .joins
        .iter()
        .map(|j| (j.size * j.spatial) as u64)
        .sum();
    assert_eq!(with, without + add_cost);
    assert!(add_cost > 0);
}

#[test]
fn micro_models_within_laptop_budget() {
    // forward cost of the training workhorse stays small
    let index = zoo::zoo("micro_vgg").unwrap().index().unwrap();
    assert!(flops_at_width(&index, 1.0, JoinPolicy::None) < 5_000_000);
}
