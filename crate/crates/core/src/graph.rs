//! Declarative model descriptions and the channel-group index.
//!
//! A [`ModelSpec`] is a list of blocks; a block is a main path of layers plus
//! an optional shortcut that joins the main path's output elementwise.
//! Channels are owned by *groups*: every channel-producing layer (standard
//! convolution or the classifier) owns one group, while depthwise
//! convolutions, batch norm, activations and pools carry their input group
//! through. Pruning selects channels per group; residual joins tie groups
//! together through a shared identity space.
//!
//! [`GraphIndex`] is the flattened view of a spec used by the profiler, the
//! builder, the slicer, and the sorter.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::layers::{ActKind, PoolKind};

/// One layer of a block path.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        /// Whether the width multiplier scales this layer's channel count.
        slimmable: bool,
    },
    /// Depthwise convolution: channel count follows the input group (a
    /// depthwise channel exists exactly when its input channel does).
    DepthwiseConv {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Bn,
    Activation(ActKind),
    Pool {
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    /// Classifier head: fixed output size, never pruned or width-scaled.
    Linear { out_features: usize },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            bias: false,
            slimmable: true,
        }
    }

    pub fn conv_fixed(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            bias: false,
            slimmable: false,
        }
    }

    pub fn dw(kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::DepthwiseConv {
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    ResidualBottleneck,
    InvertedResidual,
    DepthwiseSeparable,
}

impl BlockKind {
    pub fn has_join(&self) -> bool {
        matches!(
            self,
            BlockKind::ResidualBottleneck | BlockKind::InvertedResidual
        )
    }
}

/// Shortcut path of a residual block.
#[derive(Debug, Clone, PartialEq)]
pub enum ShortcutSpec {
    /// No shortcut; the block is a plain chain.
    None,
    /// Identity shortcut: the block input is added to the main path output.
    Identity,
    /// Projection shortcut (convolution + BN on the block input).
    Projection(Vec<LayerSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub layers: Vec<LayerSpec>,
    pub shortcut: ShortcutSpec,
    /// Activation applied after the join (ResNet style). `None` for linear
    /// bottleneck joins (MobileNetV2 style) and non-residual blocks.
    pub post_join_act: Option<ActKind>,
}

impl BlockSpec {
    pub fn plain(layers: Vec<LayerSpec>) -> Self {
        BlockSpec {
            kind: BlockKind::Plain,
            layers,
            shortcut: ShortcutSpec::None,
            post_join_act: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    /// Square input resolution.
    pub input_size: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

// ---------------------------------------------------------------------------
// Flattened graph index
// ---------------------------------------------------------------------------

/// Which path of a block a layer lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Main,
    Shortcut,
}

/// Stable address of a layer inside a spec or a materialized network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSite {
    pub block: usize,
    pub path: Path,
    pub index: usize,
}

/// Where a layer's input channels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feed {
    /// The network input (never sliced).
    Input,
    Group(usize),
    Join(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Conv,
    Linear,
}

/// A channel group: the output dimension of one channel-producing layer.
#[derive(Debug, Clone)]
pub struct GroupInfo {
    pub size: usize,
    pub slimmable: bool,
    /// Prunable groups can drop channels; the classifier output cannot, and
    /// neither can groups without scores (no following BN in gamma mode is
    /// reported by the scorer, not here).
    pub prunable: bool,
    pub kind: GroupKind,
    pub producer: LayerSite,
    /// BN layer directly normalizing this group at the producer, if any.
    pub bn: Option<LayerSite>,
    pub name: String,
}

/// A residual join: main-path output added to the shortcut feed in a shared
/// channel identity space.
#[derive(Debug, Clone)]
pub struct JoinNode {
    pub block: usize,
    pub main_group: usize,
    pub shortcut: Feed,
    pub size: usize,
    /// Spatial element count of the join tensor at full input resolution.
    pub spatial: usize,
}

/// Per-convolution profile data.
#[derive(Debug, Clone)]
pub struct ConvSite {
    pub site: LayerSite,
    /// Output group (for depthwise layers this is the input group).
    pub group: usize,
    pub in_feed: Feed,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub bias: bool,
    pub out_spatial: usize,
}

#[derive(Debug, Clone)]
pub struct LinearSite {
    pub site: LayerSite,
    pub group: usize,
    pub in_feed: Feed,
    pub spatial: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone)]
pub struct BnSite {
    pub site: LayerSite,
    pub group: usize,
}

/// Flattened, validated view of a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub input_channels: usize,
    pub groups: Vec<GroupInfo>,
    pub joins: Vec<JoinNode>,
    pub convs: Vec<ConvSite>,
    pub linears: Vec<LinearSite>,
    pub bns: Vec<BnSite>,
    /// Feed entering each block.
    pub block_inputs: Vec<Feed>,
    /// Feed produced by each block (main group or join output).
    pub block_outputs: Vec<Feed>,
    /// Feed entering the classifier (output of the last block).
    pub final_feed: Feed,
}

impl GraphIndex {
    pub fn feed_size(&self, feed: Feed) -> usize {
        match feed {
            Feed::Input => self.input_channels,
            Feed::Group(g) => self.groups[g].size,
            Feed::Join(j) => self.joins[j].size,
        }
    }

    /// Channel count of a group at a uniform width multiplier:
    /// `max(1, floor(w * size))` for slimmable groups, full size otherwise.
    pub fn group_count_at_width(&self, group: usize, width: f64) -> usize {
        let g = &self.groups[group];
        if g.slimmable {
            let n = (width * g.size as f64).floor() as usize;
            n.clamp(1, g.size)
        } else {
            g.size
        }
    }
}

struct Walker {
    index: GraphIndex,
    // spatial dims of every live feed are tracked by the walk
}

fn spatial_after(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> (usize, usize) {
    (
        (h + 2 * padding - kernel) / stride + 1,
        (w + 2 * padding - kernel) / stride + 1,
    )
}

impl ModelSpec {
    /// Validate the spec and build the flattened index.
    pub fn index(&self) -> Result<GraphIndex> {
        let mut w = Walker {
            index: GraphIndex {
                input_channels: self.input_channels,
                groups: Vec::new(),
                joins: Vec::new(),
                convs: Vec::new(),
                linears: Vec::new(),
                bns: Vec::new(),
                block_inputs: Vec::new(),
                block_outputs: Vec::new(),
                final_feed: Feed::Input,
            },
        };
        if self.input_channels == 0 || self.input_size == 0 || self.num_classes == 0 {
            return Err(Error::Invalid(format!(
                "model '{}' has empty input or class dimensions",
                self.name
            )));
        }
        let mut feed = Feed::Input;
        let mut dims = (self.input_size, self.input_size);
        for (bi, block) in self.blocks.iter().enumerate() {
            w.index.block_inputs.push(feed);
            let block_in = feed;
            let in_dims = dims;
            let (main_feed, main_dims) =
                w.walk_path(self, bi, Path::Main, &block.layers, block_in, in_dims)?;
            match &block.shortcut {
                ShortcutSpec::None => {
                    if block.kind.has_join() {
                        return Err(Error::Invalid(format!(
                            "block {bi} of '{}' is residual but has no shortcut",
                            self.name
                        )));
                    }
                    feed = main_feed;
                    dims = main_dims;
                }
                sc => {
                    if !block.kind.has_join() {
                        return Err(Error::Invalid(format!(
                            "block {bi} of '{}' declares a shortcut on a non-residual kind",
                            self.name
                        )));
                    }
                    let (short_feed, short_dims) = match sc {
                        ShortcutSpec::Identity => (block_in, in_dims),
                        ShortcutSpec::Projection(layers) => {
                            w.walk_path(self, bi, Path::Shortcut, layers, block_in, in_dims)?
                        }
                        ShortcutSpec::None => unreachable!(),
                    };
                    let main_group = match main_feed {
                        Feed::Group(g) => g,
                        _ => {
                            return Err(Error::Invalid(format!(
                                "block {bi} of '{}': main path must end in a channel-producing layer",
                                self.name
                            )))
                        }
                    };
                    let main_size = w.index.groups[main_group].size;
                    let short_size = w.index.feed_size(short_feed);
                    if main_size != short_size || main_dims != short_dims {
                        return Err(Error::Dimension {
                            at: format!("{}.block{}.join", self.name, bi),
                            detail: format!(
                                "main {}ch {}x{} vs shortcut {}ch {}x{}",
                                main_size,
                                main_dims.0,
                                main_dims.1,
                                short_size,
                                short_dims.0,
                                short_dims.1
                            ),
                        });
                    }
                    let join_id = w.index.joins.len();
                    w.index.joins.push(JoinNode {
                        block: bi,
                        main_group,
                        shortcut: short_feed,
                        size: main_size,
                        spatial: main_dims.0 * main_dims.1,
                    });
                    feed = Feed::Join(join_id);
                    dims = main_dims;
                }
            }
            w.index.block_outputs.push(feed);
        }
        w.index.final_feed = feed;
        // the walk must have produced a classifier
        if w.index.linears.is_empty() {
            return Err(Error::Invalid(format!(
                "model '{}' has no classifier layer",
                self.name
            )));
        }
        Ok(w.index)
    }

    /// Largest group size (used by desk-scale checks).
    pub fn max_channels(&self) -> usize {
        let mut m = 0;
        for b in &self.blocks {
            for l in b.layers.iter().chain(match &b.shortcut {
                ShortcutSpec::Projection(p) => p.iter(),
                _ => [].iter(),
            }) {
                if let LayerSpec::Conv { out_channels, .. } = l {
                    m = m.max(*out_channels);
                }
            }
        }
        m
    }
}

impl Walker {
    #[allow(clippy::too_many_arguments)]
    fn walk_path(
        &mut self,
        spec: &ModelSpec,
        block: usize,
        path: Path,
        layers: &[LayerSpec],
        mut feed: Feed,
        mut dims: (usize, usize),
    ) -> Result<(Feed, (usize, usize))> {
        let path_name = match path {
            Path::Main => "main",
            Path::Shortcut => "shortcut",
        };
        for (li, layer) in layers.iter().enumerate() {
            let site = LayerSite {
                block,
                path,
                index: li,
            };
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                    slimmable,
                } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::Invalid(format!(
                            "block {block} {path_name} layer {li}: channels, kernel and stride must be >= 1"
                        )));
                    }
                    let gid = self.index.groups.len();
                    // fixed-width layers are also exempt from pruning
                    self.index.groups.push(GroupInfo {
                        size: *out_channels,
                        slimmable: *slimmable,
                        prunable: *slimmable,
                        kind: GroupKind::Conv,
                        producer: site,
                        bn: None,
                        name: format!("b{block}.{path_name}.conv{li}"),
                    });
                    dims = spatial_after(dims.0, dims.1, *kernel, *stride, *padding);
                    self.index.convs.push(ConvSite {
                        site,
                        group: gid,
                        in_feed: feed,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        depthwise: false,
                        bias: *bias,
                        out_spatial: dims.0 * dims.1,
                    });
                    feed = Feed::Group(gid);
                }
                LayerSpec::DepthwiseConv {
                    kernel,
                    stride,
                    padding,
                } => {
                    let gid = match feed {
                        Feed::Group(g) => g,
                        _ => {
                            return Err(Error::Invalid(format!(
                                "block {block} {path_name} layer {li}: depthwise layer must follow a channel group"
                            )))
                        }
                    };
                    dims = spatial_after(dims.0, dims.1, *kernel, *stride, *padding);
                    self.index.convs.push(ConvSite {
                        site,
                        group: gid,
                        in_feed: feed,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        depthwise: true,
                        bias: false,
                        out_spatial: dims.0 * dims.1,
                    });
                }
                LayerSpec::Bn => {
                    let gid = match feed {
                        Feed::Group(g) => g,
                        _ => {
                            return Err(Error::Invalid(format!(
                                "block {block} {path_name} layer {li}: bn must follow a channel group"
                            )))
                        }
                    };
                    // the first BN after the producer scores the group
                    if self.index.groups[gid].bn.is_none() {
                        self.index.groups[gid].bn = Some(site);
                    }
                    self.index.bns.push(BnSite { site, group: gid });
                }
                LayerSpec::Activation(_) => {}
                LayerSpec::Pool {
                    kind,
                    window,
                    stride,
                } => match kind {
                    PoolKind::GlobalAvg => dims = (1, 1),
                    PoolKind::Max => {
                        if *window > dims.0 || *window > dims.1 {
                            return Err(Error::Dimension {
                                at: format!("{}.b{block}.{path_name}.pool{li}", spec.name),
                                detail: format!(
                                    "window {window} larger than input {}x{}",
                                    dims.0, dims.1
                                ),
                            });
                        }
                        dims = (
                            (dims.0 - window) / stride + 1,
                            (dims.1 - window) / stride + 1,
                        );
                    }
                },
                LayerSpec::Linear { out_features } => {
                    let gid = self.index.groups.len();
                    self.index.groups.push(GroupInfo {
                        size: *out_features,
                        slimmable: false,
                        prunable: false,
                        kind: GroupKind::Linear,
                        producer: site,
                        bn: None,
                        name: format!("b{block}.{path_name}.linear{li}"),
                    });
                    self.index.linears.push(LinearSite {
                        site,
                        group: gid,
                        in_feed: feed,
                        spatial: dims.0 * dims.1,
                        out_features: *out_features,
                    });
                    feed = Feed::Group(gid);
                    dims = (1, 1);
                }
            }
        }
        Ok((feed, dims))
    }
}
