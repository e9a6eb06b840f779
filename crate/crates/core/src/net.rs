//! Materialized networks and the sliced execution engine.
//!
//! A [`Network`] owns the parameters of the full-width model plus everything
//! needed to run any embedded sub-network: per-width batch-norm banks, the
//! composite channel permutation applied by sorting (`sort_state`), and the
//! canonical packing order of every residual join (`join_sort`).
//!
//! Execution is driven by a [`ViewPlan`]: per-layer channel selections plus
//! per-join reconciliation, resolved once per (architecture, bank). Prefix
//! plans slice contiguous channel blocks (the fast path after channel
//! sorting); gather plans execute the same selection through explicit index
//! maps, which reproduces the arithmetic bit-for-bit while paying the
//! scattered-memory cost of an unsorted network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{conv_layer, ConvLayer};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Feed, GraphIndex, LayerSite, ModelSpec, Path, ShortcutSpec};
use crate::join::{self, JoinMetadata};
use crate::layers::{
    activation_backward, activation_forward, pool_backward, pool_forward, ActKind, Layer,
    LinearLayer, ParamRole, ParamTensor, PoolSaved, Sel,
};
use crate::norm::{bn_layer, BnSaved};
use crate::rng::SeedStream;
use crate::slim::{PrunedArchitecture, WidthList};
use crate::tensor::{Shape, Tensor};

/// Per-join canonical output ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinSort {
    /// Packed output position -> identity channel (full length).
    pub pack: Vec<u32>,
    /// Union sizes per embedded width (advisory; plans recompute exactly).
    pub union_counts: Vec<usize>,
}

impl JoinSort {
    fn identity(size: usize) -> Self {
        JoinSort {
            pack: (0..size as u32).collect(),
            union_counts: Vec::new(),
        }
    }
}

/// What a layer slot is, resolved once against the graph index.
#[derive(Debug, Clone, Copy)]
enum SiteRef {
    Conv(usize),
    Bn(usize),
    Act(ActKind),
    Pool,
    Linear(usize),
}

#[derive(Debug, Clone)]
pub struct NetBlock<E> {
    pub main: Vec<Layer<E>>,
    pub shortcut: NetShortcut<E>,
    pub post_join_act: Option<ActKind>,
}

#[derive(Debug, Clone)]
pub enum NetShortcut<E> {
    None,
    Identity,
    Projection(Vec<Layer<E>>),
}

#[derive(Debug, Clone)]
pub struct Network<E> {
    pub spec: ModelSpec,
    pub index: GraphIndex,
    pub blocks: Vec<NetBlock<E>>,
    pub num_banks: usize,
    pub active_bank: usize,
    /// Per group: storage position -> original (build-time) channel identity.
    pub sort_state: Vec<Vec<u32>>,
    /// Per join: canonical packed ordering of the shared identity space.
    pub join_sort: Vec<JoinSort>,
    /// Embedded per-width architectures, aligned with `width_list`.
    pub embedded: Vec<PrunedArchitecture>,
    pub width_list: Option<WidthList>,
    exec_main: Vec<Vec<SiteRef>>,
    exec_shortcut: Vec<Vec<SiteRef>>,
}

/// Scale every slimmable convolution of a spec by a width multiplier,
/// producing a standalone smaller model.
pub fn spec_at_width(spec: &ModelSpec, width: f64) -> ModelSpec {
    use crate::graph::LayerSpec;
    let mut out = spec.clone();
    out.name = format!("{}_x{width}", spec.name);
    let scale = |c: usize| -> usize {
        let n = (width * c as f64) as usize;
        n.clamp(1, c)
    };
    for block in &mut out.blocks {
        let paths: [&mut Vec<LayerSpec>; 1] = [&mut block.layers];
        for path in paths {
            for l in path.iter_mut() {
                if let LayerSpec::Conv {
                    out_channels,
                    slimmable: true,
                    ..
                } = l
                {
                    *out_channels = scale(*out_channels);
                }
            }
        }
        if let ShortcutSpec::Projection(proj) = &mut block.shortcut {
            for l in proj.iter_mut() {
                if let LayerSpec::Conv {
                    out_channels,
                    slimmable: true,
                    ..
                } = l
                {
                    *out_channels = scale(*out_channels);
                }
            }
        }
    }
    out
}

impl<E: Element> Network<E> {
    /// Materialize a spec with a single BN bank. He-style fan-in init for
    /// convolutions and the classifier, gamma 1 / beta 0, deterministic
    /// under the seed.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::build_slimmable(spec, seed, 1)
    }

    /// Materialize with one private BN bank per width. All banks start
    /// identical.
    pub fn build_slimmable(spec: &ModelSpec, seed: u64, banks: usize) -> Result<Self> {
        if banks == 0 {
            return Err(Error::Invalid(String::from("need at least one BN bank")));
        }
        let index = spec.index()?;
        let mut rng = SeedStream::derive(seed, 0x6e65_7400);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut exec_main = Vec::new();
        let mut exec_shortcut = Vec::new();
        for (bi, bspec) in spec.blocks.iter().enumerate() {
            let (main, sites_main) =
                build_path(&index, bi, Path::Main, &bspec.layers, banks, &mut rng)?;
            let (shortcut, sites_short) = match &bspec.shortcut {
                ShortcutSpec::None => (NetShortcut::None, Vec::new()),
                ShortcutSpec::Identity => (NetShortcut::Identity, Vec::new()),
                ShortcutSpec::Projection(p) => {
                    let (layers, sites) =
                        build_path(&index, bi, Path::Shortcut, p, banks, &mut rng)?;
                    (NetShortcut::Projection(layers), sites)
                }
            };
            blocks.push(NetBlock {
                main,
                shortcut,
                post_join_act: bspec.post_join_act,
            });
            exec_main.push(sites_main);
            exec_shortcut.push(sites_short);
        }
        let sort_state = index
            .groups
            .iter()
            .map(|g| (0..g.size as u32).collect())
            .collect();
        let join_sort = index
            .joins
            .iter()
            .map(|j| JoinSort::identity(j.size))
            .collect();
        Ok(Network {
            spec: spec.clone(),
            index,
            blocks,
            num_banks: banks,
            active_bank: banks - 1,
            sort_state,
            join_sort,
            embedded: Vec::new(),
            width_list: None,
            exec_main,
            exec_shortcut,
        })
    }

    pub fn layer(&self, site: LayerSite) -> &Layer<E> {
        match site.path {
            Path::Main => &self.blocks[site.block].main[site.index],
            Path::Shortcut => match &self.blocks[site.block].shortcut {
                NetShortcut::Projection(p) => &p[site.index],
                _ => panic!("no shortcut layers in block {}", site.block),
            },
        }
    }

    pub fn layer_mut(&mut self, site: LayerSite) -> &mut Layer<E> {
        match site.path {
            Path::Main => &mut self.blocks[site.block].main[site.index],
            Path::Shortcut => match &mut self.blocks[site.block].shortcut {
                NetShortcut::Projection(p) => &mut p[site.index],
                _ => panic!("no shortcut layers in block {}", site.block),
            },
        }
    }

    /// Visit every parameter in a stable order (block, path, layer, role).
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut ParamTensor<E>)) {
        for block in &mut self.blocks {
            for layer in &mut block.main {
                layer.for_each_param(f);
            }
            if let NetShortcut::Projection(p) = &mut block.shortcut {
                for layer in p {
                    layer.for_each_param(f);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }

    /// Total parameter element count (all banks included).
    pub fn param_len(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.value.data().len());
        n
    }

    /// Flatten all parameter values (used by determinism checks and tests).
    pub fn param_snapshot(&mut self) -> Vec<E> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| out.extend_from_slice(p.value.data()));
        out
    }

    /// Select the active BN bank (one per width).
    pub fn switch_bank(&mut self, width_index: usize) -> Result<()> {
        if width_index >= self.num_banks {
            return Err(Error::IndexOutOfRange {
                at: String::from("switch_bank"),
                index: width_index,
                limit: self.num_banks,
            });
        }
        self.active_bank = width_index;
        Ok(())
    }

    /// Store per-width architectures as the network's sub-networks. Only the
    /// channel-count tables are kept; views resolve them at plan time.
    pub fn embed_architectures(
        &mut self,
        widths: WidthList,
        archs: Vec<PrunedArchitecture>,
    ) -> Result<()> {
        if archs.len() != widths.len() {
            return Err(Error::LengthMismatch {
                at: String::from("embed_architectures"),
                expected: widths.len(),
                got: archs.len(),
            });
        }
        for arch in &archs {
            arch.check(&self.index)?;
        }
        if self.num_banks != widths.len() {
            return Err(Error::Invalid(format!(
                "network has {} BN banks but width list has {} entries",
                self.num_banks,
                widths.len()
            )));
        }
        self.embedded = archs;
        self.width_list = Some(widths);
        Ok(())
    }

    pub fn embedded_arch(&self, width_index: usize) -> Result<&PrunedArchitecture> {
        self.embedded.get(width_index).ok_or(Error::IndexOutOfRange {
            at: String::from("embedded_arch"),
            index: width_index,
            limit: self.embedded.len(),
        })
    }

    /// Promote the network to a different element type (f64 gradient checks).
    pub fn cast<T: Element>(&self) -> Network<T> {
        let cast_layers = |layers: &Vec<Layer<E>>| -> Vec<Layer<T>> {
            layers.iter().map(cast_layer).collect()
        };
        Network {
            spec: self.spec.clone(),
            index: self.index.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| NetBlock {
                    main: cast_layers(&b.main),
                    shortcut: match &b.shortcut {
                        NetShortcut::None => NetShortcut::None,
                        NetShortcut::Identity => NetShortcut::Identity,
                        NetShortcut::Projection(p) => NetShortcut::Projection(cast_layers(p)),
                    },
                    post_join_act: b.post_join_act,
                })
                .collect(),
            num_banks: self.num_banks,
            active_bank: self.active_bank,
            sort_state: self.sort_state.clone(),
            join_sort: self.join_sort.clone(),
            embedded: self.embedded.clone(),
            width_list: self.width_list.clone(),
            exec_main: self.exec_main.clone(),
            exec_shortcut: self.exec_shortcut.clone(),
        }
    }
}

fn cast_param<E: Element, T: Element>(p: &ParamTensor<E>) -> ParamTensor<T> {
    ParamTensor {
        value: p.value.cast(),
        grad: p.grad.cast(),
        role: p.role,
    }
}

fn cast_layer<E: Element, T: Element>(layer: &Layer<E>) -> Layer<T> {
    match layer {
        Layer::Conv(c) => Layer::Conv(ConvLayer {
            weight: cast_param(&c.weight),
            bias: c.bias.as_ref().map(cast_param),
            stride: c.stride,
            padding: c.padding,
            depthwise: c.depthwise,
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            name: c.name.clone(),
        }),
        Layer::Bn(bn) => Layer::Bn(crate::norm::BnLayer {
            banks: bn
                .banks
                .iter()
                .map(|b| crate::norm::BnState {
                    gamma: cast_param(&b.gamma),
                    beta: cast_param(&b.beta),
                    running_mean: b.running_mean.iter().map(|v| T::from_f64(v.as_f64())).collect(),
                    running_var: b.running_var.iter().map(|v| T::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            channels: bn.channels,
            momentum: bn.momentum,
            epsilon: bn.epsilon,
            name: bn.name.clone(),
        }),
        Layer::Act(a) => Layer::Act(*a),
        Layer::Pool(p) => Layer::Pool(*p),
        Layer::Linear(l) => Layer::Linear(LinearLayer {
            weight: cast_param(&l.weight),
            bias: l.bias.as_ref().map(cast_param),
            in_channels: l.in_channels,
            spatial: l.spatial,
            out_features: l.out_features,
            name: l.name.clone(),
        }),
    }
}

fn build_path<E: Element>(
    index: &GraphIndex,
    block: usize,
    path: Path,
    layers: &[crate::graph::LayerSpec],
    banks: usize,
    rng: &mut SeedStream,
) -> Result<(Vec<Layer<E>>, Vec<SiteRef>)> {
    use crate::graph::LayerSpec;
    let mut out = Vec::with_capacity(layers.len());
    let mut sites = Vec::with_capacity(layers.len());
    for (li, l) in layers.iter().enumerate() {
        let site = LayerSite {
            block,
            path,
            index: li,
        };
        match l {
            LayerSpec::Conv { .. } | LayerSpec::DepthwiseConv { .. } => {
                let ci = index
                    .convs
                    .iter()
                    .position(|c| c.site == site)
                    .expect("conv site indexed");
                let c = &index.convs[ci];
                let (in_ch, out_ch) = if c.depthwise {
                    let g = index.groups[c.group].size;
                    (g, g)
                } else {
                    (index.feed_size(c.in_feed), index.groups[c.group].size)
                };
                let mut layer = conv_layer::<E>(
                    in_ch,
                    out_ch,
                    c.kernel,
                    c.stride,
                    c.padding,
                    c.depthwise,
                    c.bias,
                    index.groups[c.group].name.clone(),
                );
                let fan_in = if c.depthwise {
                    c.kernel * c.kernel
                } else {
                    in_ch * c.kernel * c.kernel
                };
                he_init(&mut layer.weight, fan_in, rng);
                out.push(Layer::Conv(layer));
                sites.push(SiteRef::Conv(ci));
            }
            LayerSpec::Bn => {
                let bi = index
                    .bns
                    .iter()
                    .position(|b| b.site == site)
                    .expect("bn site indexed");
                let group = index.bns[bi].group;
                let channels = index.groups[group].size;
                out.push(Layer::Bn(bn_layer::<E>(
                    channels,
                    banks,
                    format!("{}.bn", index.groups[group].name),
                )));
                sites.push(SiteRef::Bn(bi));
            }
            LayerSpec::Activation(a) => {
                out.push(Layer::Act(*a));
                sites.push(SiteRef::Act(*a));
            }
            LayerSpec::Pool { kind, window, stride } => {
                out.push(Layer::Pool(crate::layers::PoolLayer {
                    kind: *kind,
                    window: *window,
                    stride: *stride,
                }));
                sites.push(SiteRef::Pool);
            }
            LayerSpec::Linear { .. } => {
                let li_idx = index
                    .linears
                    .iter()
                    .position(|x| x.site == site)
                    .expect("linear site indexed");
                let lsite = &index.linears[li_idx];
                let in_channels = index.feed_size(lsite.in_feed);
                let in_features = in_channels * lsite.spatial;
                let mut weight = ParamTensor::new(
                    Tensor::zeros(Shape::new(lsite.out_features, in_features, 1, 1)),
                    ParamRole::LinearWeight,
                );
                he_init(&mut weight, in_features, rng);
                let bias = ParamTensor::new(
                    Tensor::zeros(Shape::new(lsite.out_features, 1, 1, 1)),
                    ParamRole::LinearBias,
                );
                out.push(Layer::Linear(LinearLayer {
                    weight,
                    bias: Some(bias),
                    in_channels,
                    spatial: lsite.spatial,
                    out_features: lsite.out_features,
                    name: format!("b{block}.linear"),
                }));
                sites.push(SiteRef::Linear(li_idx));
            }
        }
    }
    Ok((out, sites))
}

fn he_init<E: Element>(param: &mut ParamTensor<E>, fan_in: usize, rng: &mut SeedStream) {
    let std = E::from_f64((2.0 / fan_in as f64).sqrt());
    for v in param.value.data_mut() {
        *v = rng.normal::<E>() * std;
    }
}

// ---------------------------------------------------------------------------
// View plans
// ---------------------------------------------------------------------------

/// Owned channel selection.
#[derive(Debug, Clone, PartialEq)]
pub enum OwnedSel {
    Prefix(usize),
    Gather(Vec<u32>),
}

impl OwnedSel {
    pub fn as_sel(&self) -> Sel<'_> {
        match self {
            OwnedSel::Prefix(n) => Sel::Prefix(*n),
            OwnedSel::Gather(idx) => Sel::Gather(idx),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            OwnedSel::Prefix(n) => *n,
            OwnedSel::Gather(idx) => idx.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Collapse gathers that are in fact the contiguous prefix.
    fn normalized(self) -> Self {
        if let OwnedSel::Gather(idx) = &self {
            if idx.iter().enumerate().all(|(i, &v)| v as usize == i) {
                return OwnedSel::Prefix(idx.len());
            }
        }
        self
    }
}

/// How one residual join executes under a plan.
#[derive(Debug, Clone)]
pub enum JoinExec {
    /// Selections coincide positionally: elementwise add with
    /// zero-extension of the shorter path.
    Aligned { n_main: usize, n_short: usize },
    /// Scatter both paths into the canonical packed order.
    Packed(JoinMetadata),
    /// Gather mode: scatter into the full identity width; downstream layers
    /// gather from it.
    FullWidth {
        idx_main: Vec<u32>,
        /// `None` when the shortcut tensor is already full width (an
        /// upstream full-width join output).
        idx_short: Option<Vec<u32>>,
        size: usize,
    },
}

impl JoinExec {
    pub fn out_count(&self) -> usize {
        match self {
            JoinExec::Aligned { n_main, n_short } => (*n_main).max(*n_short),
            JoinExec::Packed(meta) => meta.out_count,
            JoinExec::FullWidth { size, .. } => *size,
        }
    }
}

/// Resolved execution recipe for one (architecture, bank) pair.
#[derive(Debug, Clone)]
pub struct ViewPlan {
    pub bank: usize,
    pub gather: bool,
    /// Per graph conv site: (out, in) selections.
    pub conv_sel: Vec<(OwnedSel, OwnedSel)>,
    /// Per graph bn site: bank-channel selection.
    pub bn_sel: Vec<OwnedSel>,
    /// Per graph linear site: input-channel selection.
    pub linear_in: Vec<OwnedSel>,
    pub joins: Vec<JoinExec>,
    /// Retained count per group (prefix lengths in storage order).
    pub group_counts: Vec<usize>,
}

impl<E: Element> Network<E> {
    /// Plan for the full-width network.
    pub fn plan_full(&self, bank: usize) -> Result<ViewPlan> {
        self.plan_for_arch(&PrunedArchitecture::full(&self.index), bank)
    }

    /// Plan for an embedded width.
    pub fn plan_for_width_index(&self, width_index: usize) -> Result<ViewPlan> {
        let arch = self.embedded_arch(width_index)?.clone();
        self.plan_for_arch(&arch, width_index)
    }

    /// Resolve a sliced (prefix) plan: each group contributes its first
    /// `count` storage channels, joins reconcile through the canonical pack.
    pub fn plan_for_arch(&self, arch: &PrunedArchitecture, bank: usize) -> Result<ViewPlan> {
        self.check_bank_index(bank)?;
        arch.check(&self.index)?;
        let counts = &arch.counts;
        let mut join_execs: Vec<JoinExec> = Vec::with_capacity(self.index.joins.len());
        for (ji, join) in self.index.joins.iter().enumerate() {
            let n_main = counts[join.main_group];
            let n_short = self.feed_len_sliced(join.shortcut, counts, &join_execs);
            let js = &self.join_sort[ji];
            // packed position of every identity channel
            let mut packpos = vec![0u32; js.pack.len()];
            for (pos, &ident) in js.pack.iter().enumerate() {
                packpos[ident as usize] = pos as u32;
            }
            let scatter_main: Vec<u32> = (0..n_main)
                .map(|p| packpos[self.sort_state[join.main_group][p] as usize])
                .collect();
            let short_ident: Vec<u32> = match join.shortcut {
                Feed::Group(g) => (0..n_short)
                    .map(|p| self.sort_state[g][p])
                    .collect(),
                Feed::Join(i) => (0..n_short)
                    .map(|p| self.join_sort[i].pack[p])
                    .collect(),
                Feed::Input => {
                    return Err(Error::Unsupported {
                        at: String::from("join"),
                        detail: String::from("shortcut directly from network input"),
                    })
                }
            };
            let scatter_short: Vec<u32> = short_ident
                .iter()
                .map(|&c| packpos[c as usize])
                .collect();
            let aligned = scatter_main.iter().enumerate().all(|(p, &q)| q as usize == p)
                && scatter_short.iter().enumerate().all(|(p, &q)| q as usize == p);
            if aligned {
                join_execs.push(JoinExec::Aligned { n_main, n_short });
            } else {
                let out_count = scatter_main
                    .iter()
                    .chain(scatter_short.iter())
                    .map(|&q| q as usize + 1)
                    .max()
                    .unwrap_or(0);
                let meta = join::build_packed_metadata(
                    join.size,
                    &(0..n_main)
                        .map(|p| self.sort_state[join.main_group][p])
                        .collect::<Vec<u32>>(),
                    &short_ident,
                    &js.pack,
                    out_count,
                );
                join_execs.push(JoinExec::Packed(meta));
            }
        }
        let conv_sel = self
            .index
            .convs
            .iter()
            .map(|c| {
                let n_out = counts[c.group];
                let in_sel = if c.depthwise {
                    OwnedSel::Prefix(n_out)
                } else {
                    OwnedSel::Prefix(self.feed_len_sliced(c.in_feed, counts, &join_execs))
                };
                (OwnedSel::Prefix(n_out), in_sel)
            })
            .collect();
        let bn_sel = self
            .index
            .bns
            .iter()
            .map(|b| OwnedSel::Prefix(counts[b.group]))
            .collect();
        let linear_in = self
            .index
            .linears
            .iter()
            .map(|l| OwnedSel::Prefix(self.feed_len_sliced(l.in_feed, counts, &join_execs)))
            .collect();
        Ok(ViewPlan {
            bank,
            gather: false,
            conv_sel,
            bn_sel,
            linear_in,
            joins: join_execs,
            group_counts: counts.clone(),
        })
    }

    /// Resolve a gather plan executing the same selection through index maps
    /// in pre-sort storage order. The plan must run on a network whose
    /// storage is the original identity order (`sort_state` identity); use
    /// [`Network::unsorted_twin`] to produce one.
    pub fn gather_plan(&self, arch: &PrunedArchitecture, bank: usize) -> Result<ViewPlan> {
        self.check_bank_index(bank)?;
        arch.check(&self.index)?;
        let counts = &arch.counts;
        let mut join_execs: Vec<JoinExec> = Vec::with_capacity(self.index.joins.len());
        for join in &self.index.joins {
            let n_main = counts[join.main_group];
            let idx_main: Vec<u32> = (0..n_main)
                .map(|p| self.sort_state[join.main_group][p])
                .collect();
            let idx_short = match join.shortcut {
                Feed::Group(g) => Some((0..counts[g]).map(|p| self.sort_state[g][p]).collect()),
                Feed::Join(_) => None,
                Feed::Input => {
                    return Err(Error::Unsupported {
                        at: String::from("join"),
                        detail: String::from("shortcut directly from network input"),
                    })
                }
            };
            join_execs.push(JoinExec::FullWidth {
                idx_main,
                idx_short,
                size: join.size,
            });
        }
        // sliced reference plan provides the consumption order of join unions
        let sliced = self.plan_for_arch(arch, bank)?;
        let gather_feed = |feed: Feed| -> OwnedSel {
            match feed {
                Feed::Input => OwnedSel::Prefix(self.index.input_channels),
                Feed::Group(g) => {
                    OwnedSel::Gather(self.sort_state[g][..counts[g]].to_vec()).normalized()
                }
                Feed::Join(j) => {
                    let u = sliced.joins[j].out_count();
                    OwnedSel::Gather(self.join_sort[j].pack[..u].to_vec()).normalized()
                }
            }
        };
        let conv_sel = self
            .index
            .convs
            .iter()
            .map(|c| {
                let out =
                    OwnedSel::Gather(self.sort_state[c.group][..counts[c.group]].to_vec())
                        .normalized();
                let in_sel = if c.depthwise {
                    out.clone()
                } else {
                    gather_feed(c.in_feed)
                };
                (out, in_sel)
            })
            .collect();
        let bn_sel = self
            .index
            .bns
            .iter()
            .map(|b| {
                OwnedSel::Gather(self.sort_state[b.group][..counts[b.group]].to_vec())
                    .normalized()
            })
            .collect();
        let linear_in = self
            .index
            .linears
            .iter()
            .map(|l| gather_feed(l.in_feed))
            .collect();
        Ok(ViewPlan {
            bank,
            gather: true,
            conv_sel,
            bn_sel,
            linear_in,
            joins: join_execs,
            group_counts: counts.clone(),
        })
    }

    /// Clone with sorting undone: parameters return to original identity
    /// order. Gather plans built from `self` execute on the twin.
    pub fn unsorted_twin(&self) -> Result<Network<E>> {
        let mut twin = self.clone();
        let inverse: Vec<Vec<u32>> = self
            .sort_state
            .iter()
            .map(|perm| {
                let mut inv = vec![0u32; perm.len()];
                for (pos, &ident) in perm.iter().enumerate() {
                    inv[ident as usize] = pos as u32;
                }
                inv
            })
            .collect();
        crate::sort::apply_permutation(&mut twin, &crate::sort::ChannelPermutation::new(inverse))?;
        Ok(twin)
    }

    fn check_bank_index(&self, bank: usize) -> Result<()> {
        if bank >= self.num_banks {
            return Err(Error::IndexOutOfRange {
                at: String::from("bn bank"),
                index: bank,
                limit: self.num_banks,
            });
        }
        Ok(())
    }

    fn feed_len_sliced(&self, feed: Feed, counts: &[usize], joins: &[JoinExec]) -> usize {
        match feed {
            Feed::Input => self.index.input_channels,
            Feed::Group(g) => counts[g],
            Feed::Join(j) => joins[j].out_count(),
        }
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Saved activations of one layer, consumed by backward in reverse order.
pub enum LayerTrace<E> {
    Conv { input: Tensor<E> },
    Bn(BnSaved<E>),
    Act { input: Tensor<E> },
    Pool(PoolSaved),
    Linear { input: Tensor<E> },
}

pub struct BlockTrace<E> {
    main: Vec<LayerTrace<E>>,
    shortcut: Vec<LayerTrace<E>>,
    post_act_input: Option<Tensor<E>>,
}

pub struct NetTrace<E> {
    blocks: Vec<BlockTrace<E>>,
}

impl<E: Element> Network<E> {
    /// Read-only inference forward. Multiple threads may run this
    /// concurrently over one frozen network.
    pub fn forward_eval(&self, input: &Tensor<E>, plan: &ViewPlan) -> Result<Tensor<E>> {
        let mut x = input.clone();
        for bi in 0..self.blocks.len() {
            let block = &self.blocks[bi];
            let block_in = x;
            let mut main = block_in.clone();
            for (li, layer) in block.main.iter().enumerate() {
                main = eval_layer(layer, &self.exec_main[bi][li], &main, plan)?;
            }
            x = match &block.shortcut {
                NetShortcut::None => main,
                short => {
                    let short_out = match short {
                        NetShortcut::Identity => block_in,
                        NetShortcut::Projection(layers) => {
                            let mut s = block_in;
                            for (li, layer) in layers.iter().enumerate() {
                                s = eval_layer(layer, &self.exec_shortcut[bi][li], &s, plan)?;
                            }
                            s
                        }
                        NetShortcut::None => unreachable!(),
                    };
                    let ji = self.join_id_for_block(bi)?;
                    let joined = run_join(&plan.joins[ji], &main, &short_out)?;
                    match block.post_join_act {
                        Some(a) => activation_forward(&joined, a),
                        None => joined,
                    }
                }
            };
        }
        Ok(x)
    }

    /// Training-mode forward: updates the active bank's running statistics
    /// and returns the trace for backward. Prefix plans only.
    pub fn forward_train(
        &mut self,
        input: &Tensor<E>,
        plan: &ViewPlan,
    ) -> Result<(Tensor<E>, NetTrace<E>)> {
        if plan.gather {
            return Err(Error::Unsupported {
                at: String::from("forward_train"),
                detail: String::from("training requires a sliced (prefix) plan"),
            });
        }
        let mut x = input.clone();
        let mut blocks_trace = Vec::with_capacity(self.blocks.len());
        for bi in 0..self.blocks.len() {
            let block_in = x;
            let mut main = block_in.clone();
            let mut main_trace = Vec::new();
            for li in 0..self.blocks[bi].main.len() {
                let site = self.exec_main[bi][li];
                let layer = &mut self.blocks[bi].main[li];
                let (out, trace) = train_layer(layer, &site, &main, plan)?;
                main = out;
                main_trace.push(trace);
            }
            let mut short_trace = Vec::new();
            let (out, post_act_input) = match &self.blocks[bi].shortcut {
                NetShortcut::None => (main, None),
                NetShortcut::Identity | NetShortcut::Projection(_) => {
                    let short_out = if matches!(self.blocks[bi].shortcut, NetShortcut::Identity) {
                        block_in.clone()
                    } else {
                        let mut s = block_in.clone();
                        let n = match &self.blocks[bi].shortcut {
                            NetShortcut::Projection(p) => p.len(),
                            _ => 0,
                        };
                        for li in 0..n {
                            let site = self.exec_shortcut[bi][li];
                            let layer = match &mut self.blocks[bi].shortcut {
                                NetShortcut::Projection(p) => &mut p[li],
                                _ => unreachable!(),
                            };
                            let (out, trace) = train_layer(layer, &site, &s, plan)?;
                            s = out;
                            short_trace.push(trace);
                        }
                        s
                    };
                    let ji = self.join_id_for_block(bi)?;
                    let joined = run_join(&plan.joins[ji], &main, &short_out)?;
                    match self.blocks[bi].post_join_act {
                        Some(a) => {
                            let act_out = activation_forward(&joined, a);
                            (act_out, Some(joined))
                        }
                        None => (joined, None),
                    }
                }
            };
            x = out;
            blocks_trace.push(BlockTrace {
                main: main_trace,
                shortcut: short_trace,
                post_act_input,
            });
        }
        Ok((
            x,
            NetTrace {
                blocks: blocks_trace,
            },
        ))
    }

    /// Reverse pass: accumulates parameter gradients for the active slice.
    pub fn backward(
        &mut self,
        plan: &ViewPlan,
        trace: NetTrace<E>,
        grad_logits: &Tensor<E>,
    ) -> Result<()> {
        let mut grad = grad_logits.clone();
        let mut blocks_trace = trace.blocks;
        for bi in (0..self.blocks.len()).rev() {
            let btrace = blocks_trace.pop().expect("trace per block");
            let has_join = !matches!(self.blocks[bi].shortcut, NetShortcut::None);
            let (mut grad_main, grad_short_opt) = if has_join {
                let g = match (self.blocks[bi].post_join_act, &btrace.post_act_input) {
                    (Some(a), Some(pre)) => activation_backward(pre, &grad, a),
                    _ => grad,
                };
                let ji = self.join_id_for_block(bi)?;
                let (gm, gs) = join_backward(&plan.joins[ji], &g)?;
                (gm, Some(gs))
            } else {
                (grad, None)
            };
            // main path backward
            let mut main_traces = btrace.main;
            for li in (0..self.blocks[bi].main.len()).rev() {
                let t = main_traces.pop().expect("trace per layer");
                let site = self.exec_main[bi][li];
                let layer = &mut self.blocks[bi].main[li];
                grad_main = backward_layer(layer, &site, t, &grad_main, plan)?;
            }
            // shortcut path backward
            let grad_block_in = match (&mut self.blocks[bi].shortcut, grad_short_opt) {
                (NetShortcut::None, _) => grad_main,
                (NetShortcut::Identity, Some(gs)) => {
                    let mut g = grad_main;
                    add_into(&mut g, &gs);
                    g
                }
                (NetShortcut::Projection(_), Some(gs)) => {
                    let mut g_short = gs;
                    let mut short_traces = btrace.shortcut;
                    let n = match &self.blocks[bi].shortcut {
                        NetShortcut::Projection(p) => p.len(),
                        _ => 0,
                    };
                    for li in (0..n).rev() {
                        let t = short_traces.pop().expect("trace per layer");
                        let site = self.exec_shortcut[bi][li];
                        let layer = match &mut self.blocks[bi].shortcut {
                            NetShortcut::Projection(p) => &mut p[li],
                            _ => unreachable!(),
                        };
                        g_short = backward_layer(layer, &site, t, &g_short, plan)?;
                    }
                    let mut g = grad_main;
                    add_into(&mut g, &g_short);
                    g
                }
                _ => unreachable!(),
            };
            grad = grad_block_in;
        }
        Ok(())
    }

    fn join_id_for_block(&self, block: usize) -> Result<usize> {
        self.index
            .joins
            .iter()
            .position(|j| j.block == block)
            .ok_or_else(|| Error::Invalid(format!("block {block} has no join")))
    }
}

fn add_into<E: Element>(dst: &mut Tensor<E>, src: &Tensor<E>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

fn eval_layer<E: Element>(
    layer: &Layer<E>,
    site: &SiteRef,
    x: &Tensor<E>,
    plan: &ViewPlan,
) -> Result<Tensor<E>> {
    match (layer, site) {
        (Layer::Conv(c), SiteRef::Conv(ci)) => {
            let (out_sel, in_sel) = &plan.conv_sel[*ci];
            c.forward(x, out_sel.as_sel(), in_sel.as_sel())
        }
        (Layer::Bn(bn), SiteRef::Bn(bi)) => bn.forward_eval(x, plan.bank, plan.bn_sel[*bi].as_sel()),
        (Layer::Act(a), _) => Ok(activation_forward(x, *a)),
        (Layer::Pool(p), _) => Ok(pool_forward(x, p)?.0),
        (Layer::Linear(l), SiteRef::Linear(li)) => l.forward(x, plan.linear_in[*li].as_sel()),
        _ => unreachable!("site map out of sync"),
    }
}

fn train_layer<E: Element>(
    layer: &mut Layer<E>,
    site: &SiteRef,
    x: &Tensor<E>,
    plan: &ViewPlan,
) -> Result<(Tensor<E>, LayerTrace<E>)> {
    match (layer, site) {
        (Layer::Conv(c), SiteRef::Conv(ci)) => {
            let (out_sel, in_sel) = &plan.conv_sel[*ci];
            let out = c.forward(x, out_sel.as_sel(), in_sel.as_sel())?;
            Ok((out, LayerTrace::Conv { input: x.clone() }))
        }
        (Layer::Bn(bn), SiteRef::Bn(bi)) => {
            let n = plan.bn_sel[*bi].len();
            let (out, saved) = bn.forward_train(x, plan.bank, n)?;
            Ok((out, LayerTrace::Bn(saved)))
        }
        (Layer::Act(a), _) => Ok((
            activation_forward(x, *a),
            LayerTrace::Act { input: x.clone() },
        )),
        (Layer::Pool(p), _) => {
            let (out, saved) = pool_forward(x, p)?;
            Ok((out, LayerTrace::Pool(saved)))
        }
        (Layer::Linear(l), SiteRef::Linear(li)) => {
            let out = l.forward(x, plan.linear_in[*li].as_sel())?;
            Ok((out, LayerTrace::Linear { input: x.clone() }))
        }
        _ => unreachable!("site map out of sync"),
    }
}

fn backward_layer<E: Element>(
    layer: &mut Layer<E>,
    site: &SiteRef,
    trace: LayerTrace<E>,
    grad_out: &Tensor<E>,
    plan: &ViewPlan,
) -> Result<Tensor<E>> {
    match (layer, site, trace) {
        (Layer::Conv(c), SiteRef::Conv(ci), LayerTrace::Conv { input }) => {
            let (out_sel, in_sel) = &plan.conv_sel[*ci];
            Ok(c.backward(&input, grad_out, out_sel.len(), in_sel.len()))
        }
        (Layer::Bn(bn), SiteRef::Bn(bi), LayerTrace::Bn(saved)) => {
            let n = plan.bn_sel[*bi].len();
            Ok(bn.backward(&saved, grad_out, plan.bank, n))
        }
        (Layer::Act(a), _, LayerTrace::Act { input }) => {
            Ok(activation_backward(&input, grad_out, *a))
        }
        (Layer::Pool(p), _, LayerTrace::Pool(saved)) => Ok(pool_backward(&saved, grad_out, p)),
        (Layer::Linear(l), SiteRef::Linear(li), LayerTrace::Linear { input }) => {
            Ok(l.backward(&input, grad_out, plan.linear_in[*li].len()))
        }
        _ => unreachable!("trace out of sync"),
    }
}

fn run_join<E: Element>(
    exec: &JoinExec,
    main: &Tensor<E>,
    short: &Tensor<E>,
) -> Result<Tensor<E>> {
    let ms = main.shape();
    let ss = short.shape();
    if ms.batch != ss.batch || ms.height != ss.height || ms.width != ss.width {
        return Err(Error::Dimension {
            at: String::from("join"),
            detail: format!(
                "main {}x{}x{} vs shortcut {}x{}x{}",
                ms.channels, ms.height, ms.width, ss.channels, ss.height, ss.width
            ),
        });
    }
    match exec {
        JoinExec::Aligned { n_main, n_short } => {
            debug_assert_eq!(ms.channels, *n_main);
            debug_assert_eq!(ss.channels, *n_short);
            let out_c = (*n_main).max(*n_short);
            let mut out = Tensor::zeros(Shape::new(ms.batch, out_c, ms.height, ms.width));
            scatter_add_channels(&mut out, main, None);
            scatter_add_channels(&mut out, short, None);
            Ok(out)
        }
        JoinExec::Packed(meta) => join::zpm_join(main, short, meta),
        JoinExec::FullWidth {
            idx_main,
            idx_short,
            size,
        } => {
            let mut out = Tensor::zeros(Shape::new(ms.batch, *size, ms.height, ms.width));
            scatter_add_channels(&mut out, main, Some(idx_main));
            match idx_short {
                Some(idx) => scatter_add_channels(&mut out, short, Some(idx)),
                None => {
                    debug_assert_eq!(ss.channels, *size);
                    add_into(&mut out, short);
                }
            }
            Ok(out)
        }
    }
}

/// Add `src`'s channels into `dst` at positions `map[c]` (or `c`).
pub(crate) fn scatter_add_channels<E: Element>(
    dst: &mut Tensor<E>,
    src: &Tensor<E>,
    map: Option<&[u32]>,
) {
    let ss = src.shape();
    let spatial = ss.spatial();
    for b in 0..ss.batch {
        for c in 0..ss.channels {
            let target = match map {
                Some(m) => m[c] as usize,
                None => c,
            };
            let src_base = src.offset(b, c, 0, 0);
            let dst_base = dst.offset(b, target, 0, 0);
            for i in 0..spatial {
                dst.data_mut()[dst_base + i] += src.data()[src_base + i];
            }
        }
    }
}

fn join_backward<E: Element>(
    exec: &JoinExec,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let gs = grad_out.shape();
    match exec {
        JoinExec::Aligned { n_main, n_short } => {
            let gm = gather_channels(grad_out, *n_main, None);
            let gsh = gather_channels(grad_out, *n_short, None);
            let _ = gs;
            Ok((gm, gsh))
        }
        JoinExec::Packed(meta) => {
            let gm = gather_channels(grad_out, meta.index_main.len(), Some(&meta.scatter_main));
            let gsh = gather_channels(
                grad_out,
                meta.index_shortcut.len(),
                Some(&meta.scatter_shortcut),
            );
            Ok((gm, gsh))
        }
        JoinExec::FullWidth { .. } => Err(Error::Unsupported {
            at: String::from("join backward"),
            detail: String::from("gather plans are inference-only"),
        }),
    }
}

/// Inverse of `scatter_add_channels`: pick `n` channels of `src` at positions
/// `map[c]` (or `c`).
fn gather_channels<E: Element>(src: &Tensor<E>, n: usize, map: Option<&[u32]>) -> Tensor<E> {
    let ss = src.shape();
    let mut out = Tensor::zeros(Shape::new(ss.batch, n, ss.height, ss.width));
    let spatial = ss.spatial();
    for b in 0..ss.batch {
        for c in 0..n {
            let from = match map {
                Some(m) => m[c] as usize,
                None => c,
            };
            let src_base = src.offset(b, from, 0, 0);
            let dst_base = out.offset(b, c, 0, 0);
            for i in 0..spatial {
                out.data_mut()[dst_base + i] = src.data()[src_base + i];
            }
        }
    }
    out
}

/// Read-only sub-network handle: a parent network plus a resolved plan.
pub struct SubNetworkView<'a, E> {
    pub net: &'a Network<E>,
    pub plan: ViewPlan,
}

impl<'a, E: Element> SubNetworkView<'a, E> {
    pub fn forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        self.net.forward_eval(input, &self.plan)
    }
}

/// Spec-level view constructor: slice `net` to `arch` using BN bank
/// `bn_bank`.
pub fn slice_view<'a, E: Element>(
    net: &'a Network<E>,
    arch: &PrunedArchitecture,
    bn_bank: usize,
) -> Result<SubNetworkView<'a, E>> {
    let plan = net.plan_for_arch(arch, bn_bank)?;
    Ok(SubNetworkView { net, plan })
}
