//! Decoding genomes into concrete CNN graphs and counting their cost.
//!
//! A [`NetGraph`] is a flat, topologically ordered list of primitive nodes.
//! Node `0` is the image input; the last node is a global average pool whose
//! output is the backbone feature vector. Layer spans record which node range
//! forms the stem, each normal/reduction layer, and the head.
//!
//! FLOPs are multiply-accumulates: one multiply-add counts once.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::Serialize;

use crate::genome::{
    Genome, GenomeError, MacroGenome, MicroGenome, MicroOp, NodeSpec, SpaceKind, MACRO_NODES,
    NODES_PER_CELL,
};

/// Channel count and spatial extent of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Static parameters of a convolution. No bias term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        let reach = self.dilation * (self.kernel - 1) + 1;
        let padded = extent + 2 * self.padding;
        (padded >= reach).then(|| (padded - reach) / self.stride + 1)
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.c_in / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.fan_in()
    }
}

pub(crate) fn pool_out_extent(extent: usize, stride: usize) -> usize {
    // 3x3 window, padding 1
    (extent + 2 - 3) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeOp {
    Input,
    Conv(ConvSpec),
    BatchNorm,
    Relu,
    MaxPool3x3 { stride: usize },
    AvgPool3x3 { stride: usize },
    /// Two stride-2 pointwise convolutions, the second offset by one pixel,
    /// each producing half of `c_out`; outputs are concatenated.
    FactorizedReduce { c_in: usize, c_out: usize },
    Add,
    Concat,
    Zero { stride: usize },
    GlobalAvgPool,
}

impl NodeOp {
    pub fn name(&self) -> &'static str {
        match self {
            NodeOp::Input => "input",
            NodeOp::Conv(_) => "conv",
            NodeOp::BatchNorm => "batch_norm",
            NodeOp::Relu => "relu",
            NodeOp::MaxPool3x3 { .. } => "max_pool_3x3",
            NodeOp::AvgPool3x3 { .. } => "avg_pool_3x3",
            NodeOp::FactorizedReduce { .. } => "factorized_reduce",
            NodeOp::Add => "add",
            NodeOp::Concat => "concat",
            NodeOp::Zero { .. } => "zero",
            NodeOp::GlobalAvgPool => "global_avg_pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Stem,
    Normal,
    Reduction,
    Head,
}

/// A contiguous node range forming one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpan {
    pub kind: LayerKind,
    pub nodes: core::ops::Range<usize>,
    pub output: usize,
}

/// Order of activation, convolution and normalization inside micro ops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpOrder {
    #[default]
    ReluConvBn,
    ConvBnRelu,
}

/// Network scale used when decoding.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub init_channels: usize,
    /// Number of stacked cells (micro only).
    pub layers: usize,
    pub resolution: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub op_order: OpOrder,
}

impl ScaleConfig {
    /// Search-time micro scale: 10 initial channels, 5 layers.
    pub fn micro_search() -> Self {
        ScaleConfig {
            init_channels: 10,
            layers: 5,
            resolution: 32,
            in_channels: 3,
            classes: 10,
            op_order: OpOrder::ReluConvBn,
        }
    }

    /// Search-time macro scale: 32 initial channels.
    pub fn macro_search() -> Self {
        ScaleConfig { init_channels: 32, layers: 3, ..Self::micro_search() }
    }

    /// Channels of macro phase `p`: doubled after each reduction.
    pub fn phase_channels(&self, phase: usize) -> usize {
        self.init_channels << phase
    }
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self::micro_search()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeError {
    Genome(GenomeError),
    /// Scale parameters that cannot produce a network.
    Scale(&'static str),
    /// The graph failed structural validation (decoder bug or odd resolution).
    Invalid(Vec<Violation>),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::Genome(e) => write!(f, "cannot decode genome: {e}"),
            DecodeError::Scale(msg) => write!(f, "bad scale: {msg}"),
            DecodeError::Invalid(v) => {
                write!(f, "decoded graph is invalid ({} violations", v.len())?;
                if let Some(first) = v.first() {
                    write!(f, ", first: {first}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl core::error::Error for DecodeError {}

impl From<GenomeError> for DecodeError {
    fn from(e: GenomeError) -> Self {
        DecodeError::Genome(e)
    }
}

/// Structural problem found by [`NetGraph::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Cycle { nodes: Vec<usize> },
    ForwardReference { node: usize, input: usize },
    MissingInput { node: usize, input: usize },
    Arity { node: usize, expected: &'static str, found: usize },
    ChannelMismatch { node: usize, detail: String },
    SpatialMismatch { node: usize, detail: String },
    BadOutput { node: usize },
    Layer { index: usize, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { nodes } => write!(f, "cycle through nodes {nodes:?}"),
            Violation::ForwardReference { node, input } => {
                write!(f, "node {node} reads later node {input}")
            }
            Violation::MissingInput { node, input } => {
                write!(f, "node {node} reads nonexistent node {input}")
            }
            Violation::Arity { node, expected, found } => {
                write!(f, "node {node} has {found} inputs, expected {expected}")
            }
            Violation::ChannelMismatch { node, detail } => write!(f, "node {node}: {detail}"),
            Violation::SpatialMismatch { node, detail } => write!(f, "node {node}: {detail}"),
            Violation::BadOutput { node } => write!(f, "output node {node} is not a global pool"),
            Violation::Layer { index, detail } => write!(f, "layer {index}: {detail}"),
        }
    }
}

/// Decoded network backbone plus the width of the linear head that follows it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetGraph {
    nodes: Vec<Node>,
    layers: Vec<LayerSpan>,
    output: usize,
    classes: usize,
}

impl NetGraph {
    /// Assembles a graph from raw parts. Call [`validate`](Self::validate)
    /// before running it.
    pub fn from_parts(nodes: Vec<Node>, layers: Vec<LayerSpan>, output: usize, classes: usize) -> Self {
        NetGraph { nodes, layers, output, classes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layers
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    /// Width of the pooled feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        self.nodes[self.output].shape.c
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// MACs of one node for a single sample.
    pub fn node_macs(&self, index: usize) -> u64 {
        let node = &self.nodes[index];
        let out = node.shape;
        let positions = (out.h * out.w) as u64;
        match node.op {
            NodeOp::Conv(spec) => spec.weight_len() as u64 * positions,
            NodeOp::FactorizedReduce { c_in, c_out } => 2 * (c_in * (c_out / 2)) as u64 * positions,
            _ => 0,
        }
    }

    /// MACs of the linear classifier over pooled features.
    pub fn head_macs(&self) -> u64 {
        (self.feature_dim() * self.classes) as u64
    }

    /// Total MACs of one forward pass for a single sample, classifier included.
    pub fn count_flops(&self) -> u64 {
        (0..self.nodes.len()).map(|i| self.node_macs(i)).sum::<u64>() + self.head_macs()
    }

    /// Number of learnable parameters, classifier included.
    pub fn count_params(&self) -> u64 {
        let backbone: usize = self
            .nodes
            .iter()
            .map(|n| match n.op {
                NodeOp::Conv(spec) => spec.weight_len(),
                NodeOp::FactorizedReduce { c_in, c_out } => c_in * c_out,
                NodeOp::BatchNorm => 2 * n.shape.c,
                _ => 0,
            })
            .sum();
        (backbone + self.feature_dim() * self.classes + self.classes) as u64
    }

    /// Node indices after which each node's output is no longer needed.
    pub(crate) fn last_uses(&self) -> Vec<usize> {
        let mut last = (0..self.nodes.len()).collect::<Vec<_>>();
        for (i, node) in self.nodes.iter().enumerate() {
            for &src in &node.inputs {
                last[src] = last[src].max(i);
            }
        }
        last[self.output] = usize::MAX;
        last
    }

    /// Checks acyclicity, input ordering, per-op shape arithmetic and the
    /// layer-level resolution and channel rules.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            for &src in &node.inputs {
                if src >= n {
                    v.push(Violation::MissingInput { node: i, input: src });
                } else if src >= i {
                    v.push(Violation::ForwardReference { node: i, input: src });
                }
            }
        }
        if let Some(cycle) = self.find_cycle() {
            v.push(Violation::Cycle { nodes: cycle });
        }
        if !v.is_empty() {
            return Err(v);
        }
        for i in 0..n {
            self.check_node(i, &mut v);
        }
        if self.output >= n || self.nodes[self.output].op != NodeOp::GlobalAvgPool {
            v.push(Violation::BadOutput { node: self.output });
        }
        self.check_layers(&mut v);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        // iterative three-colour DFS along input edges
        let n = self.nodes.len();
        let mut colour = vec![0u8; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if colour[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            colour[root] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let inputs = &self.nodes[node].inputs;
                if *next < inputs.len() {
                    let src = inputs[*next];
                    *next += 1;
                    if src >= n {
                        continue;
                    }
                    match colour[src] {
                        0 => {
                            colour[src] = 1;
                            parent[src] = node;
                            stack.push((src, 0));
                        }
                        1 => {
                            let mut cycle = vec![src];
                            let mut cur = node;
                            while cur != src && cur != usize::MAX {
                                cycle.push(cur);
                                cur = parent[cur];
                            }
                            cycle.reverse();
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    colour[node] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    fn check_node(&self, i: usize, v: &mut Vec<Violation>) {
        let node = &self.nodes[i];
        let shapes: Vec<Shape> = node.inputs.iter().map(|&s| self.nodes[s].shape).collect();
        let out = node.shape;
        let arity = |expected: &'static str, ok: bool, v: &mut Vec<Violation>| {
            if !ok {
                v.push(Violation::Arity { node: i, expected, found: shapes.len() });
            }
            ok
        };
        let spatial = |detail: String| Violation::SpatialMismatch { node: i, detail };
        let channel = |detail: String| Violation::ChannelMismatch { node: i, detail };
        match node.op {
            NodeOp::Input => {
                arity("0", shapes.is_empty(), v);
                if i != 0 {
                    v.push(spatial(String::from("input node must be node 0")));
                }
            }
            NodeOp::Conv(spec) => {
                if !arity("1", shapes.len() == 1, v) {
                    return;
                }
                let x = shapes[0];
                if spec.groups == 0 || spec.c_in % spec.groups != 0 || spec.c_out % spec.groups != 0 {
                    v.push(channel(alloc::format!("groups {} do not divide channels", spec.groups)));
                }
                if x.c != spec.c_in || out.c != spec.c_out {
                    v.push(channel(alloc::format!(
                        "conv {}->{} but shapes {}->{}",
                        spec.c_in, spec.c_out, x.c, out.c
                    )));
                }
                if spec.out_extent(x.h) != Some(out.h) || spec.out_extent(x.w) != Some(out.w) {
                    v.push(spatial(alloc::format!("conv output {}x{} inconsistent", out.h, out.w)));
                }
            }
            NodeOp::BatchNorm | NodeOp::Relu => {
                if arity("1", shapes.len() == 1, v) && shapes[0] != out {
                    v.push(spatial(String::from("elementwise op changes shape")));
                }
            }
            NodeOp::MaxPool3x3 { stride } | NodeOp::AvgPool3x3 { stride } => {
                if !arity("1", shapes.len() == 1, v) {
                    return;
                }
                let x = shapes[0];
                if x.c != out.c {
                    v.push(channel(String::from("pool changes channels")));
                }
                if pool_out_extent(x.h, stride) != out.h || pool_out_extent(x.w, stride) != out.w {
                    v.push(spatial(String::from("pool output extent inconsistent")));
                }
            }
            NodeOp::FactorizedReduce { c_in, c_out } => {
                if !arity("1", shapes.len() == 1, v) {
                    return;
                }
                let x = shapes[0];
                if x.c != c_in || out.c != c_out || c_out % 2 != 0 {
                    v.push(channel(alloc::format!("factorized reduce {c_in}->{c_out} on {}", x.c)));
                }
                if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) || out.h * 2 != x.h || out.w * 2 != x.w {
                    v.push(spatial(String::from("factorized reduce needs even input, halves it")));
                }
            }
            NodeOp::Add => {
                if arity(">=2", shapes.len() >= 2, v) && shapes.iter().any(|s| *s != out) {
                    v.push(spatial(String::from("add inputs differ in shape")));
                }
            }
            NodeOp::Concat => {
                if !arity(">=1", !shapes.is_empty(), v) {
                    return;
                }
                if shapes.iter().any(|s| s.h != out.h || s.w != out.w) {
                    v.push(spatial(String::from("concat inputs differ in resolution")));
                }
                let total: usize = shapes.iter().map(|s| s.c).sum();
                if total != out.c {
                    v.push(channel(alloc::format!("concat of {total} channels declared {}", out.c)));
                }
            }
            NodeOp::Zero { stride } => {
                if !arity("1", shapes.len() == 1, v) {
                    return;
                }
                let x = shapes[0];
                if x.c != out.c || x.h.div_ceil(stride) != out.h || x.w.div_ceil(stride) != out.w {
                    v.push(spatial(String::from("zero output shape inconsistent")));
                }
            }
            NodeOp::GlobalAvgPool => {
                if arity("1", shapes.len() == 1, v) && (shapes[0].c != out.c || out.h != 1 || out.w != 1) {
                    v.push(spatial(String::from("global pool must produce c x 1 x 1")));
                }
            }
        }
    }

    fn check_layers(&self, v: &mut Vec<Violation>) {
        let mut prev: Option<Shape> = None;
        for (index, layer) in self.layers.iter().enumerate() {
            if layer.output >= self.nodes.len() || !layer.nodes.contains(&layer.output) {
                v.push(Violation::Layer { index, detail: String::from("output outside span") });
                continue;
            }
            let out = self.nodes[layer.output].shape;
            if let Some(p) = prev {
                match layer.kind {
                    LayerKind::Reduction => {
                        if out.h * 2 != p.h || out.w * 2 != p.w || out.c != 2 * p.c {
                            v.push(Violation::Layer {
                                index,
                                detail: alloc::format!(
                                    "reduction {}x{}x{} -> {}x{}x{} must halve resolution and double channels",
                                    p.c, p.h, p.w, out.c, out.h, out.w
                                ),
                            });
                        }
                    }
                    LayerKind::Normal => {
                        if out.h != p.h || out.w != p.w {
                            v.push(Violation::Layer {
                                index,
                                detail: String::from("normal layer changes resolution"),
                            });
                        }
                    }
                    LayerKind::Stem | LayerKind::Head => {}
                }
            }
            prev = Some(out);
        }
    }
}

/// Incremental graph construction with shape inference.
pub(crate) struct Builder {
    nodes: Vec<Node>,
    layers: Vec<LayerSpan>,
    layer_start: usize,
    order: OpOrder,
}

impl Builder {
    pub(crate) fn new(input: Shape, order: OpOrder) -> Self {
        Builder {
            nodes: vec![Node { op: NodeOp::Input, inputs: Vec::new(), shape: input }],
            layers: Vec::new(),
            layer_start: 1,
            order,
        }
    }

    pub(crate) fn shape(&self, id: usize) -> Shape {
        self.nodes[id].shape
    }

    fn push(&mut self, op: NodeOp, inputs: Vec<usize>, shape: Shape) -> usize {
        self.nodes.push(Node { op, inputs, shape });
        self.nodes.len() - 1
    }

    pub(crate) fn conv(&mut self, x: usize, c_out: usize, kernel: usize, stride: usize, dilation: usize, groups: usize) -> usize {
        let s = self.shape(x);
        let spec = ConvSpec {
            c_in: s.c,
            c_out,
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        };
        let h = spec.out_extent(s.h).unwrap_or(0);
        let w = spec.out_extent(s.w).unwrap_or(0);
        self.push(NodeOp::Conv(spec), vec![x], Shape::new(c_out, h, w))
    }

    pub(crate) fn bn(&mut self, x: usize) -> usize {
        let s = self.shape(x);
        self.push(NodeOp::BatchNorm, vec![x], s)
    }

    pub(crate) fn relu(&mut self, x: usize) -> usize {
        let s = self.shape(x);
        self.push(NodeOp::Relu, vec![x], s)
    }

    fn pool(&mut self, x: usize, stride: usize, max: bool) -> usize {
        let s = self.shape(x);
        let shape = Shape::new(s.c, pool_out_extent(s.h, stride), pool_out_extent(s.w, stride));
        let op = if max { NodeOp::MaxPool3x3 { stride } } else { NodeOp::AvgPool3x3 { stride } };
        self.push(op, vec![x], shape)
    }

    fn factorized_reduce(&mut self, x: usize, c_out: usize) -> usize {
        let x = self.relu(x);
        let s = self.shape(x);
        let fr = self.push(
            NodeOp::FactorizedReduce { c_in: s.c, c_out },
            vec![x],
            Shape::new(c_out, s.h / 2, s.w / 2),
        );
        self.bn(fr)
    }

    fn zero(&mut self, x: usize, stride: usize) -> usize {
        let s = self.shape(x);
        self.push(NodeOp::Zero { stride }, vec![x], Shape::new(s.c, s.h.div_ceil(stride), s.w.div_ceil(stride)))
    }

    fn add(&mut self, inputs: Vec<usize>) -> usize {
        if inputs.len() == 1 {
            return inputs[0];
        }
        let s = self.shape(inputs[0]);
        self.push(NodeOp::Add, inputs, s)
    }

    fn concat(&mut self, inputs: Vec<usize>) -> usize {
        let first = self.shape(inputs[0]);
        let c = inputs.iter().map(|&i| self.shape(i).c).sum();
        self.push(NodeOp::Concat, inputs, Shape::new(c, first.h, first.w))
    }

    fn gap(&mut self, x: usize) -> usize {
        let s = self.shape(x);
        self.push(NodeOp::GlobalAvgPool, vec![x], Shape::new(s.c, 1, 1))
    }

    /// ReLU-Conv-BN (or Conv-BN-ReLU) around a sequence of convolutions.
    fn act_convs_bn(&mut self, x: usize, convs: &[(usize, usize, usize, usize, usize)]) -> usize {
        let mut cur = x;
        if self.order == OpOrder::ReluConvBn {
            cur = self.relu(cur);
        }
        for &(c_out, k, stride, dilation, groups) in convs {
            cur = self.conv(cur, c_out, k, stride, dilation, groups);
        }
        cur = self.bn(cur);
        if self.order == OpOrder::ConvBnRelu {
            cur = self.relu(cur);
        }
        cur
    }

    fn end_layer(&mut self, kind: LayerKind, output: usize) {
        let end = self.nodes.len();
        self.layers.push(LayerSpan { kind, nodes: self.layer_start..end, output });
        self.layer_start = end;
    }

    fn finish(self, output: usize, classes: usize) -> NetGraph {
        NetGraph { nodes: self.nodes, layers: self.layers, output, classes }
    }
}

/// Decodes a genome at the given scale and validates the result.
pub fn decode(genome: &Genome, scale: &ScaleConfig) -> Result<NetGraph, DecodeError> {
    if scale.init_channels == 0 || scale.resolution == 0 || scale.in_channels == 0 {
        return Err(DecodeError::Scale("channels and resolution must be positive"));
    }
    let net = match genome.kind() {
        SpaceKind::Micro => decode_micro(&genome.as_micro()?, scale)?,
        SpaceKind::Macro => decode_macro(&genome.as_macro()?, scale)?,
        SpaceKind::Vector => return Err(DecodeError::Genome(GenomeError::SpaceMismatch)),
    };
    net.validate().map_err(DecodeError::Invalid)?;
    Ok(net)
}

/// Layer indices holding reduction cells for an `n`-layer micro network.
pub fn reduction_layers(n: usize) -> [usize; 2] {
    [n / 3, 2 * n / 3]
}

const STEM_MULTIPLIER: usize = 3;

fn decode_micro(g: &MicroGenome, scale: &ScaleConfig) -> Result<NetGraph, DecodeError> {
    let n = scale.layers;
    if n < 3 {
        return Err(DecodeError::Scale("micro networks need at least 3 layers"));
    }
    let res = scale.resolution;
    if !res.is_multiple_of(4) {
        return Err(DecodeError::Scale("micro resolution must be divisible by 4"));
    }
    let mut b = Builder::new(Shape::new(scale.in_channels, res, res), scale.op_order);
    let stem_c = STEM_MULTIPLIER * scale.init_channels;
    let stem = b.conv(0, stem_c, 3, 1, 1, 1);
    let stem = b.bn(stem);
    b.end_layer(LayerKind::Stem, stem);

    let reductions = reduction_layers(n);
    let (mut s0, mut s1) = (stem, stem);
    let mut c = scale.init_channels;
    let mut reduction_prev = false;
    for layer in 0..n {
        let reduction = reductions.contains(&layer);
        if reduction {
            c *= 2;
        }
        let cell = if reduction { &g.reduction } else { &g.normal };
        let out = micro_cell(&mut b, cell, s0, s1, c, reduction, reduction_prev);
        b.end_layer(if reduction { LayerKind::Reduction } else { LayerKind::Normal }, out);
        s0 = s1;
        s1 = out;
        reduction_prev = reduction;
    }
    let out = b.gap(s1);
    b.end_layer(LayerKind::Head, out);
    Ok(b.finish(out, scale.classes))
}

fn micro_cell(
    b: &mut Builder,
    cell: &[NodeSpec; NODES_PER_CELL],
    s0: usize,
    s1: usize,
    c: usize,
    reduction: bool,
    reduction_prev: bool,
) -> usize {
    let p0 = if reduction_prev {
        b.factorized_reduce(s0, c)
    } else {
        b.act_convs_bn(s0, &[(c, 1, 1, 1, 1)])
    };
    let p1 = b.act_convs_bn(s1, &[(c, 1, 1, 1, 1)]);
    let mut states = vec![p0, p1];
    for node in cell {
        let mut terms = Vec::with_capacity(2);
        let mut zero_src = None;
        for (input, op) in [(node.input1, node.op1), (node.input2, node.op2)] {
            // only edges leaving the cell inputs are strided in a reduction cell
            let stride = if reduction && input < 2 { 2 } else { 1 };
            match micro_edge(b, states[input], op, stride, c) {
                Some(t) => terms.push(t),
                None => zero_src = Some((states[input], stride)),
            }
        }
        let out = if terms.is_empty() {
            let (src, stride) = zero_src.expect("two zero edges");
            b.zero(src, stride)
        } else {
            b.add(terms)
        };
        states.push(out);
    }
    b.concat(states[2..].to_vec())
}

/// Emits one edge operation; `None` for the zero op (dropped from the sum).
fn micro_edge(b: &mut Builder, x: usize, op: MicroOp, stride: usize, c: usize) -> Option<usize> {
    Some(match op {
        MicroOp::Identity if stride == 1 => x,
        MicroOp::Identity => b.factorized_reduce(x, c),
        MicroOp::SepConv3x3 | MicroOp::SepConv5x5 => {
            let k = if op == MicroOp::SepConv3x3 { 3 } else { 5 };
            let first = b.act_convs_bn(x, &[(c, k, stride, 1, c), (c, 1, 1, 1, 1)]);
            b.act_convs_bn(first, &[(c, k, 1, 1, c), (c, 1, 1, 1, 1)])
        }
        MicroOp::DilConv3x3 | MicroOp::DilConv5x5 => {
            let k = if op == MicroOp::DilConv3x3 { 3 } else { 5 };
            b.act_convs_bn(x, &[(c, k, stride, 2, c), (c, 1, 1, 1, 1)])
        }
        MicroOp::MaxPool3x3 => b.pool(x, stride, true),
        MicroOp::AvgPool3x3 => b.pool(x, stride, false),
        MicroOp::Zero => return None,
    })
}

fn decode_macro(g: &MacroGenome, scale: &ScaleConfig) -> Result<NetGraph, DecodeError> {
    let phases = g.phases.len();
    let res = scale.resolution;
    if phases > 1 && !res.is_multiple_of(1 << (phases - 1)) {
        return Err(DecodeError::Scale("macro resolution must halve cleanly at each reduction"));
    }
    let mut b = Builder::new(Shape::new(scale.in_channels, res, res), OpOrder::ConvBnRelu);
    let mut x = 0;
    for (p, adjacency) in g.phases.iter().enumerate() {
        let c = scale.phase_channels(p);
        if p > 0 {
            let r = b.factorized_reduce(x, c);
            b.end_layer(LayerKind::Reduction, r);
            x = r;
        }
        let out = macro_phase(&mut b, adjacency, x, c);
        b.end_layer(if p == 0 { LayerKind::Stem } else { LayerKind::Normal }, out);
        x = out;
    }
    let out = b.gap(x);
    b.end_layer(LayerKind::Head, out);
    Ok(b.finish(out, scale.classes))
}

fn conv_bn_relu(b: &mut Builder, x: usize, c: usize) -> usize {
    let y = b.conv(x, c, 3, 1, 1, 1);
    let y = b.bn(y);
    b.relu(y)
}

/// One macro phase: an input convolution, then the active nodes of the
/// adjacency (each a 3x3 conv-BN-ReLU on the sum of its predecessors), with
/// the phase output the sum of active nodes that have no successors. Nodes
/// without any edge are dropped; an all-zero phase keeps one default node.
fn macro_phase(b: &mut Builder, adj: &crate::genome::PhaseAdjacency, x: usize, c: usize) -> usize {
    let input = conv_bn_relu(b, x, c);
    if adj.is_empty() {
        return conv_bn_relu(b, input, c);
    }
    let k = MACRO_NODES;
    let has_pred = |j: usize| (0..j).any(|i| adj.edge(i, j));
    let has_succ = |i: usize| (i + 1..k).any(|j| adj.edge(i, j));
    let mut out_of = [usize::MAX; MACRO_NODES];
    let mut sinks = Vec::new();
    for j in 0..k {
        if !has_pred(j) && !has_succ(j) {
            continue;
        }
        let preds: Vec<usize> = (0..j).filter(|&i| adj.edge(i, j)).map(|i| out_of[i]).collect();
        let src = if preds.is_empty() { input } else { b.add(preds) };
        out_of[j] = conv_bn_relu(b, src, c);
        if !has_succ(j) {
            sinks.push(out_of[j]);
        }
    }
    b.add(sinks)
}
