//! Built-in model specifications.
//!
//! Full-size specs (`resnet50`, `vggnet`, `mobilenet_v1`, `mobilenet_v2`)
//! reproduce the reference parameter/FLOPs budgets at 224x224 and exist
//! mainly for the profiler. The `micro_*` variants are three-stage,
//! 32x32-input analogues (64 channels at most) that train in seconds and are
//! used by all end-to-end tests.
//!
//! Conventions carried by the specs:
//! * classifier layers are never width-scaled or pruned;
//! * the ResNet stem and the MobileNetV2 head keep their channel count at
//!   every width (the width multiplier applies to all other conv layers);
//! * depthwise layers track the channel group of the convolution feeding
//!   them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{BlockKind, BlockSpec, LayerSpec, ModelSpec, ShortcutSpec};
use crate::layers::{ActKind, PoolKind};

pub const ZOO_NAMES: [&str; 8] = [
    "micro_vgg",
    "micro_resnet",
    "micro_mobilenet_v1",
    "micro_mobilenet_v2",
    "resnet50",
    "vggnet",
    "mobilenet_v1",
    "mobilenet_v2",
];

/// Look up a model by name.
pub fn zoo(name: &str) -> Result<ModelSpec> {
    match name {
        "micro_vgg" => Ok(micro_vgg()),
        "micro_resnet" => Ok(micro_resnet()),
        "micro_mobilenet_v1" => Ok(micro_mobilenet_v1()),
        "micro_mobilenet_v2" => Ok(micro_mobilenet_v2()),
        "resnet50" => Ok(resnet50()),
        "vggnet" => Ok(vggnet()),
        "mobilenet_v1" => Ok(mobilenet_v1()),
        "mobilenet_v2" => Ok(mobilenet_v2()),
        other => Err(Error::UnknownModel(String::from(other))),
    }
}

impl ModelSpec {
    /// Retarget the classifier to a different class count.
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        for b in &mut self.blocks {
            for l in &mut b.layers {
                if let LayerSpec::Linear { out_features } = l {
                    *out_features = num_classes;
                }
            }
        }
        self
    }
}

fn bn() -> LayerSpec {
    LayerSpec::Bn
}

fn relu() -> LayerSpec {
    LayerSpec::Activation(ActKind::Relu)
}

fn relu6() -> LayerSpec {
    LayerSpec::Activation(ActKind::Relu6)
}

fn max_pool(window: usize, stride: usize) -> LayerSpec {
    LayerSpec::Pool {
        kind: PoolKind::Max,
        window,
        stride,
    }
}

fn global_avg() -> LayerSpec {
    LayerSpec::Pool {
        kind: PoolKind::GlobalAvg,
        window: 0,
        stride: 1,
    }
}

fn linear(classes: usize) -> LayerSpec {
    LayerSpec::Linear {
        out_features: classes,
    }
}

/// conv + bn + activation
fn cba(out: usize, kernel: usize, stride: usize, padding: usize, act: LayerSpec) -> Vec<LayerSpec> {
    vec![LayerSpec::conv(out, kernel, stride, padding), bn(), act]
}

// ---------------------------------------------------------------------------
// Micro models (32x32 inputs, trainable in CI)
// ---------------------------------------------------------------------------

/// Plain three-stage VGG-style net ending in a flattened 4x4 feature map, so
/// channel sorting must reorder classifier columns in spatial blocks.
pub fn micro_vgg() -> ModelSpec {
    let stage = |c: usize| {
        let mut layers = cba(c, 3, 1, 1, relu());
        layers.extend(cba(c, 3, 1, 1, relu()));
        layers.push(max_pool(2, 2));
        BlockSpec::plain(layers)
    };
    ModelSpec {
        name: String::from("micro_vgg"),
        input_channels: 3,
        input_size: 32,
        num_classes: 4,
        blocks: vec![
            stage(8),
            stage(16),
            stage(32),
            BlockSpec::plain(vec![linear(4)]),
        ],
    }
}

fn basic_block(out: usize, stride: usize, project: bool) -> BlockSpec {
    let layers = vec![
        LayerSpec::conv(out, 3, stride, 1),
        bn(),
        relu(),
        LayerSpec::conv(out, 3, 1, 1),
        bn(),
    ];
    let shortcut = if project {
        ShortcutSpec::Projection(vec![LayerSpec::conv(out, 1, stride, 0), bn()])
    } else {
        ShortcutSpec::Identity
    };
    BlockSpec {
        kind: BlockKind::ResidualBottleneck,
        layers,
        shortcut,
        post_join_act: Some(ActKind::Relu),
    }
}

/// Three-stage residual net with basic blocks; every stage opens with a
/// projection shortcut and continues with an identity shortcut, so joins
/// chain within a stage.
pub fn micro_resnet() -> ModelSpec {
    ModelSpec {
        name: String::from("micro_resnet"),
        input_channels: 3,
        input_size: 32,
        num_classes: 4,
        blocks: vec![
            BlockSpec::plain(vec![LayerSpec::conv_fixed(16, 3, 1, 1), bn(), relu()]),
            basic_block(16, 1, true),
            basic_block(16, 1, false),
            basic_block(32, 2, true),
            basic_block(32, 1, false),
            basic_block(64, 2, true),
            basic_block(64, 1, false),
            BlockSpec::plain(vec![global_avg(), linear(4)]),
        ],
    }
}

fn ds_block(out: usize, stride: usize) -> BlockSpec {
    BlockSpec {
        kind: BlockKind::DepthwiseSeparable,
        layers: vec![
            LayerSpec::dw(3, stride, 1),
            bn(),
            relu(),
            LayerSpec::conv(out, 1, 1, 0),
            bn(),
            relu(),
        ],
        shortcut: ShortcutSpec::None,
        post_join_act: None,
    }
}

pub fn micro_mobilenet_v1() -> ModelSpec {
    ModelSpec {
        name: String::from("micro_mobilenet_v1"),
        input_channels: 3,
        input_size: 32,
        num_classes: 4,
        blocks: vec![
            BlockSpec::plain(cba(8, 3, 1, 1, relu())),
            ds_block(16, 1),
            ds_block(32, 2),
            ds_block(32, 1),
            ds_block(64, 2),
            BlockSpec::plain(vec![global_avg(), linear(4)]),
        ],
    }
}

/// Inverted residual block. `expand == 0` skips the expansion convolution
/// (the depthwise layer runs on the block input group).
fn ir_block(expand: usize, out: usize, stride: usize, join: bool) -> BlockSpec {
    let mut layers = Vec::new();
    if expand > 0 {
        layers.extend(cba(expand, 1, 1, 0, relu6()));
    }
    layers.push(LayerSpec::dw(3, stride, 1));
    layers.push(bn());
    layers.push(relu6());
    layers.push(LayerSpec::conv(out, 1, 1, 0));
    layers.push(bn());
    BlockSpec {
        kind: if join {
            BlockKind::InvertedResidual
        } else {
            BlockKind::Plain
        },
        layers,
        shortcut: if join {
            ShortcutSpec::Identity
        } else {
            ShortcutSpec::None
        },
        post_join_act: None,
    }
}

pub fn micro_mobilenet_v2() -> ModelSpec {
    ModelSpec {
        name: String::from("micro_mobilenet_v2"),
        input_channels: 3,
        input_size: 32,
        num_classes: 4,
        blocks: vec![
            BlockSpec::plain(cba(8, 3, 1, 1, relu6())),
            ir_block(0, 8, 1, true),
            ir_block(32, 16, 2, false),
            ir_block(64, 16, 1, true),
            ir_block(64, 24, 2, false),
            ir_block(48, 24, 1, true),
            BlockSpec {
                kind: BlockKind::Plain,
                layers: vec![
                    LayerSpec::conv_fixed(64, 1, 1, 0),
                    bn(),
                    relu6(),
                    global_avg(),
                    linear(4),
                ],
                shortcut: ShortcutSpec::None,
                post_join_act: None,
            },
        ],
    }
}

// ---------------------------------------------------------------------------
// Full-size models (224x224, used for count regressions)
// ---------------------------------------------------------------------------

fn bottleneck(mid: usize, out: usize, stride: usize, project: bool) -> BlockSpec {
    let layers = vec![
        LayerSpec::conv(mid, 1, 1, 0),
        bn(),
        relu(),
        LayerSpec::conv(mid, 3, stride, 1),
        bn(),
        relu(),
        LayerSpec::conv(out, 1, 1, 0),
        bn(),
    ];
    let shortcut = if project {
        ShortcutSpec::Projection(vec![LayerSpec::conv(out, 1, stride, 0), bn()])
    } else {
        ShortcutSpec::Identity
    };
    BlockSpec {
        kind: BlockKind::ResidualBottleneck,
        layers,
        shortcut,
        post_join_act: Some(ActKind::Relu),
    }
}

pub fn resnet50() -> ModelSpec {
    let mut blocks = vec![BlockSpec::plain(vec![
        LayerSpec::conv_fixed(64, 7, 2, 3),
        bn(),
        relu(),
        max_pool(2, 2),
    ])];
    let stages: [(usize, usize, usize, usize); 4] = [
        (64, 256, 3, 1),
        (128, 512, 4, 2),
        (256, 1024, 6, 2),
        (512, 2048, 3, 2),
    ];
    for (mid, out, count, stride) in stages {
        for b in 0..count {
            blocks.push(bottleneck(
                mid,
                out,
                if b == 0 { stride } else { 1 },
                b == 0,
            ));
        }
    }
    blocks.push(BlockSpec::plain(vec![global_avg(), linear(1000)]));
    ModelSpec {
        name: String::from("resnet50"),
        input_channels: 3,
        input_size: 224,
        num_classes: 1000,
        blocks,
    }
}

/// VGG-19-style feature stack with batch norm, global average pooling, and a
/// single classifier layer.
pub fn vggnet() -> ModelSpec {
    let mut blocks = Vec::new();
    for (c, n) in [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)] {
        let mut layers = Vec::new();
        for _ in 0..n {
            layers.extend(cba(c, 3, 1, 1, relu()));
        }
        layers.push(max_pool(2, 2));
        blocks.push(BlockSpec::plain(layers));
    }
    blocks.push(BlockSpec::plain(vec![global_avg(), linear(1000)]));
    ModelSpec {
        name: String::from("vggnet"),
        input_channels: 3,
        input_size: 224,
        num_classes: 1000,
        blocks,
    }
}

pub fn mobilenet_v1() -> ModelSpec {
    let mut blocks = vec![BlockSpec::plain(cba(32, 3, 2, 1, relu()))];
    let cfg: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (out, stride) in cfg {
        blocks.push(ds_block(out, stride));
    }
    blocks.push(BlockSpec::plain(vec![global_avg(), linear(1000)]));
    ModelSpec {
        name: String::from("mobilenet_v1"),
        input_channels: 3,
        input_size: 224,
        num_classes: 1000,
        blocks,
    }
}

pub fn mobilenet_v2() -> ModelSpec {
    let mut blocks = vec![BlockSpec::plain(cba(32, 3, 2, 1, relu6()))];
    // (expansion factor, out channels, repeats, first stride)
    let cfg: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut in_ch = 32;
    for (t, c, n, s) in cfg {
        for b in 0..n {
            let stride = if b == 0 { s } else { 1 };
            let join = stride == 1 && in_ch == c;
            let expand = if t == 1 { 0 } else { in_ch * t };
            blocks.push(ir_block(expand, c, stride, join));
            in_ch = c;
        }
    }
    blocks.push(BlockSpec {
        kind: BlockKind::Plain,
        layers: vec![
            LayerSpec::conv_fixed(1280, 1, 1, 0),
            bn(),
            relu6(),
            global_avg(),
            linear(1000),
        ],
        shortcut: ShortcutSpec::None,
        post_join_act: None,
    });
    ModelSpec {
        name: String::from("mobilenet_v2"),
        input_channels: 3,
        input_size: 224,
        num_classes: 1000,
        blocks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(zoo("resnet51"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn all_zoo_specs_validate() {
        for name in ZOO_NAMES {
            let spec = zoo(name).unwrap();
            let index = spec.index().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!index.groups.is_empty(), "{name} has groups");
        }
    }

    #[test]
    fn micro_models_stay_desk_scale() {
        for name in &ZOO_NAMES[..4] {
            let spec = zoo(name).unwrap();
            assert!(spec.max_channels() <= 64, "{name} exceeds 64 channels");
            assert_eq!(spec.input_size, 32);
        }
    }

    #[test]
    fn residual_blocks_declare_exactly_one_join() {
        let spec = micro_resnet();
        let index = spec.index().unwrap();
        let residual_blocks = spec
            .blocks
            .iter()
            .filter(|b| b.kind.has_join())
            .count();
        assert_eq!(index.joins.len(), residual_blocks);
        assert_eq!(index.joins.len(), 6);
    }

    #[test]
    fn mobilenet_v2_joins_match_reference_layout() {
        let index = mobilenet_v2().index().unwrap();
        // repeats minus the first block of each stage: 1+2+3+2+2+0 joins
        assert_eq!(index.joins.len(), 10);
    }
}
