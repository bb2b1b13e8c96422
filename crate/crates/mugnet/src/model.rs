//! The cluster-classification network: residual graph-convolution
//! backbone, weighted bidirectional multi-resolution fusion, and the
//! per-cluster segmentation head.
//!
//! A graph convolution combines a node's own features with the mean of
//! its neighbours' plus a mean edge-feature term:
//!
//!   out_i = h_i W_self + mean_{j in N(i)} (h_j W_nbr + e_ij W_edge) + bias
//!
//! Backbone blocks wrap it in batch-norm and relu with short-term
//! residuals between consecutive blocks and one long-term residual from
//! the first block into the last. Four tapped block outputs form the
//! resolution levels fused top-down and bottom-up with relu-clamped
//! scalar weights normalized by (sum + epsilon).

use std::sync::Arc;

use crate::embedding::{
    canonical_cluster_matrix, embed_graph, EmbeddingConfig, EmbeddingParams, EmbeddingVars,
};
use crate::error::{Error, Result};
use crate::graphio::GraphFile;
use crate::partition::{majority_labels, SuperpointGraph, EDGE_FEATURE_DIM};
use crate::rng::Rng;
use crate::tensor::{Adjacency, BnMode, RunningStats, Tape, Tensor, Var};

/// Denominator guard for weighted fusion.
pub const FUSION_EPS: f64 = 1e-4;
/// Number of resolution levels consumed by the fusion network.
pub const FUSION_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Backbone only; tapped features go straight to the head.
    None,
    /// Top-down pyramid without learned weights.
    Pyramid,
    /// Weighted top-down plus bottom-up passes with input skips.
    Bidirectional,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Pyramid => "pyramid",
            FusionMode::Bidirectional => "bidirectional",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "none" => Ok(FusionMode::None),
            "pyramid" => Ok(FusionMode::Pyramid),
            "bidirectional" => Ok(FusionMode::Bidirectional),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub embed: EmbeddingConfig,
    pub backbone_depth: usize,
    /// Feature width of every backbone block and fusion level.
    pub width: usize,
    /// 1-based backbone blocks exposed as resolution levels.
    pub taps: Vec<usize>,
    pub fusion: FusionMode,
    /// Number of bidirectional copies applied in sequence.
    pub stacks: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn desk_default(input_dim: usize, classes: usize) -> Self {
        ModelConfig {
            classes,
            embed: EmbeddingConfig::desk_default(input_dim),
            backbone_depth: 4,
            width: 64,
            taps: vec![1, 2, 3, 4],
            fusion: FusionMode::Bidirectional,
            stacks: 1,
            head_hidden: 64,
        }
    }

    /// Last `min(4, depth)` blocks.
    pub fn default_taps(depth: usize) -> Vec<usize> {
        let first = depth.saturating_sub(FUSION_LEVELS) + 1;
        (first..=depth).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.backbone_depth < 1 {
            return Err(Error::Config("backbone depth must be >= 1".into()));
        }
        if self.width == 0 || self.head_hidden == 0 {
            return Err(Error::Config("zero layer width".into()));
        }
        if self.taps.is_empty()
            || self.taps.windows(2).any(|w| w[0] >= w[1])
            || self.taps.iter().any(|&t| t < 1 || t > self.backbone_depth)
        {
            return Err(Error::Config(format!(
                "taps {:?} must be strictly increasing within [1, {}]",
                self.taps, self.backbone_depth
            )));
        }
        if self.fusion != FusionMode::None && self.taps.len() != FUSION_LEVELS {
            return Err(Error::Config(format!(
                "fusion needs exactly {FUSION_LEVELS} taps, got {}",
                self.taps.len()
            )));
        }
        if self.stacks < 1 {
            return Err(Error::Config("stacks must be >= 1".into()));
        }
        if self.stacks > 1 && self.fusion != FusionMode::Bidirectional {
            return Err(Error::Config(
                "stacking applies to bidirectional fusion only".into(),
            ));
        }
        Ok(())
    }

    pub fn head_input_dim(&self) -> usize {
        let fused = if self.fusion == FusionMode::None {
            0
        } else {
            FUSION_LEVELS * self.width
        };
        self.taps.len() * self.width + fused
    }

    pub fn to_text(&self) -> String {
        let taps: Vec<String> = self.taps.iter().map(|t| t.to_string()).collect();
        format!(
            "classes = {}\ninput_dim = {}\nbudgets = {},{},{}\nmlp_hidden = {}\nout_width = {}\n\
             backbone_depth = {}\nwidth = {}\ntaps = {}\nfusion = {}\nstacks = {}\nhead_hidden = {}\n",
            self.classes,
            self.embed.input_dim,
            self.embed.budgets[0],
            self.embed.budgets[1],
            self.embed.budgets[2],
            self.embed.mlp_hidden,
            self.embed.out_width,
            self.backbone_depth,
            self.width,
            taps.join(","),
            self.fusion.as_str(),
            self.stacks,
            self.head_hidden,
        )
    }

    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("missing model key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad integer for {k}")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad list for {k}")))
                })
                .collect()
        };
        let budgets = list("budgets")?;
        if budgets.len() != 3 {
            return Err(Error::Config("budgets needs three values".into()));
        }
        let cfg = ModelConfig {
            classes: num("classes")?,
            embed: EmbeddingConfig {
                input_dim: num("input_dim")?,
                budgets: [budgets[0], budgets[1], budgets[2]],
                mlp_hidden: num("mlp_hidden")?,
                out_width: num("out_width")?,
            },
            backbone_depth: num("backbone_depth")?,
            width: num("width")?,
            taps: list("taps")?,
            fusion: FusionMode::parse(get("fusion")?)?,
            stacks: num("stacks")?,
            head_hidden: num("head_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ----- parameters ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GraphConvParams {
    pub w_self: Tensor,
    pub w_nbr: Tensor,
    pub w_edge: Option<Tensor>,
    pub bias: Tensor,
}

impl GraphConvParams {
    fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        GraphConvParams {
            w_self: Tensor::xavier(input, output, rng),
            w_nbr: Tensor::xavier(input, output, rng),
            w_edge: Some(Tensor::xavier(EDGE_FEATURE_DIM, output, rng)),
            bias: Tensor::param(vec![0.0; output], &[output]).expect("bias"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub conv: GraphConvParams,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BlockParams {
    fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        BlockParams {
            conv: GraphConvParams::init(input, output, rng),
            gamma: Tensor::param(vec![1.0; output], &[output]).expect("gamma"),
            beta: Tensor::param(vec![0.0; output], &[output]).expect("beta"),
        }
    }
}

/// Scalar fusion weights of one bidirectional copy, one tensor per
/// incoming edge of each fusion node.
#[derive(Debug, Clone)]
pub struct BidirWeights {
    pub mid3: [Tensor; 2],
    pub mid2: [Tensor; 2],
    pub out1: [Tensor; 2],
    pub out2: [Tensor; 3],
    pub out3: [Tensor; 3],
    pub out4: [Tensor; 2],
}

fn weight_one() -> Tensor {
    Tensor::param(vec![1.0], &[1]).expect("scalar")
}

impl BidirWeights {
    fn init() -> Self {
        BidirWeights {
            mid3: [weight_one(), weight_one()],
            mid2: [weight_one(), weight_one()],
            out1: [weight_one(), weight_one()],
            out2: [weight_one(), weight_one(), weight_one()],
            out3: [weight_one(), weight_one(), weight_one()],
            out4: [weight_one(), weight_one()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BidirStackParams {
    /// Top-down convolutions for mid3, mid2.
    pub td: [GraphConvParams; 2],
    /// Bottom-up convolutions for out1..out4.
    pub bu: [GraphConvParams; 4],
    pub weights: BidirWeights,
}

#[derive(Debug, Clone)]
pub enum FusionParams {
    None,
    /// Level-order convolutions (index 0 is level 1).
    Pyramid(Vec<GraphConvParams>),
    Bidirectional(Vec<BidirStackParams>),
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Every learnable weight of the network plus batch-norm buffers.
#[derive(Debug, Clone)]
pub struct MuGNetParams {
    pub config: ModelConfig,
    pub embed: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub bn_stats: Vec<RunningStats>,
    pub fusion: FusionParams,
    pub head: HeadParams,
}

impl MuGNetParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let embed = EmbeddingParams::init(&config.embed, &mut rng);
        let mut blocks = Vec::with_capacity(config.backbone_depth);
        let mut bn_stats = Vec::with_capacity(config.backbone_depth);
        for i in 0..config.backbone_depth {
            let input = if i == 0 {
                config.embed.embed_dim()
            } else {
                config.width
            };
            blocks.push(BlockParams::init(input, config.width, &mut rng));
            bn_stats.push(RunningStats::new(config.width));
        }
        let fusion = match config.fusion {
            FusionMode::None => FusionParams::None,
            FusionMode::Pyramid => FusionParams::Pyramid(
                (0..FUSION_LEVELS)
                    .map(|_| GraphConvParams::init(config.width, config.width, &mut rng))
                    .collect(),
            ),
            FusionMode::Bidirectional => FusionParams::Bidirectional(
                (0..config.stacks)
                    .map(|_| BidirStackParams {
                        td: [
                            GraphConvParams::init(config.width, config.width, &mut rng),
                            GraphConvParams::init(config.width, config.width, &mut rng),
                        ],
                        bu: [
                            GraphConvParams::init(config.width, config.width, &mut rng),
                            GraphConvParams::init(config.width, config.width, &mut rng),
                            GraphConvParams::init(config.width, config.width, &mut rng),
                            GraphConvParams::init(config.width, config.width, &mut rng),
                        ],
                        weights: BidirWeights::init(),
                    })
                    .collect(),
            ),
        };
        let head = HeadParams {
            w1: Tensor::xavier(config.head_input_dim(), config.head_hidden, &mut rng),
            b1: Tensor::param(vec![0.0; config.head_hidden], &[config.head_hidden])?,
            w2: Tensor::xavier(config.head_hidden, config.classes, &mut rng),
            b2: Tensor::param(vec![0.0; config.classes], &[config.classes])?,
        };
        Ok(MuGNetParams {
            config: config.clone(),
            embed,
            blocks,
            bn_stats,
            fusion,
            head,
        })
    }

    /// Canonical (name, tensor) listing; the same traversal order backs
    /// binding, gradient readback, the optimizer, and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        visit(self, &mut |name, t| out.push((name, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        visit_mut(self, &mut |name, t| out.push((name, t)));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }

    /// Copies every learnable tensor onto a tape.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let embed = self.embed.bind(tape);
        let bind_conv = |tape: &mut Tape, c: &GraphConvParams| GraphConvVars {
            w_self: tape.leaf(&c.w_self),
            w_nbr: tape.leaf(&c.w_nbr),
            w_edge: c.w_edge.as_ref().map(|t| tape.leaf(t)),
            bias: tape.leaf(&c.bias),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                conv: bind_conv(tape, &b.conv),
                gamma: tape.leaf(&b.gamma),
                beta: tape.leaf(&b.beta),
            })
            .collect();
        let fusion = match &self.fusion {
            FusionParams::None => FusionVars::None,
            FusionParams::Pyramid(convs) => {
                FusionVars::Pyramid(convs.iter().map(|c| bind_conv(tape, c)).collect())
            }
            FusionParams::Bidirectional(stacks) => FusionVars::Bidirectional(
                stacks
                    .iter()
                    .map(|s| BidirStackVars {
                        td: [bind_conv(tape, &s.td[0]), bind_conv(tape, &s.td[1])],
                        bu: [
                            bind_conv(tape, &s.bu[0]),
                            bind_conv(tape, &s.bu[1]),
                            bind_conv(tape, &s.bu[2]),
                            bind_conv(tape, &s.bu[3]),
                        ],
                        weights: BidirWeightVars {
                            mid3: s.weights.mid3.each_ref().map(|t| tape.leaf(t)),
                            mid2: s.weights.mid2.each_ref().map(|t| tape.leaf(t)),
                            out1: s.weights.out1.each_ref().map(|t| tape.leaf(t)),
                            out2: s.weights.out2.each_ref().map(|t| tape.leaf(t)),
                            out3: s.weights.out3.each_ref().map(|t| tape.leaf(t)),
                            out4: s.weights.out4.each_ref().map(|t| tape.leaf(t)),
                        },
                    })
                    .collect(),
            ),
        };
        let head = HeadVars {
            w1: tape.leaf(&self.head.w1),
            b1: tape.leaf(&self.head.b1),
            w2: tape.leaf(&self.head.w2),
            b2: tape.leaf(&self.head.b2),
        };
        ModelVars {
            embed,
            blocks,
            fusion,
            head,
        }
    }

    /// Accumulates tape gradients back into the tensors' `grad` buffers.
    pub fn read_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        let flat = vars.flat();
        let mut idx = 0usize;
        for (_, t) in self.named_mut() {
            if !t.requires_grad {
                continue;
            }
            let g = tape.grad(flat[idx]);
            t.accumulate_grad(&g);
            idx += 1;
        }
        debug_assert_eq!(idx, flat.len());
    }
}

fn visit<'a>(p: &'a MuGNetParams, f: &mut dyn FnMut(String, &'a Tensor)) {
    for (i, m) in p.embed.mlps.iter().enumerate() {
        f(format!("embed.mlp{i}.w1"), &m.w1);
        f(format!("embed.mlp{i}.b1"), &m.b1);
        f(format!("embed.mlp{i}.w2"), &m.w2);
        f(format!("embed.mlp{i}.b2"), &m.b2);
    }
    f("embed.down1".into(), &p.embed.down1);
    f("embed.down2".into(), &p.embed.down2);
    for (i, b) in p.blocks.iter().enumerate() {
        visit_conv(&format!("backbone.{i}"), &b.conv, f);
        f(format!("backbone.{i}.gamma"), &b.gamma);
        f(format!("backbone.{i}.beta"), &b.beta);
    }
    match &p.fusion {
        FusionParams::None => {}
        FusionParams::Pyramid(convs) => {
            for (i, c) in convs.iter().enumerate() {
                visit_conv(&format!("fusion.pyr{i}"), c, f);
            }
        }
        FusionParams::Bidirectional(stacks) => {
            for (s, stack) in stacks.iter().enumerate() {
                for (i, c) in stack.td.iter().enumerate() {
                    visit_conv(&format!("fusion.s{s}.td{i}"), c, f);
                }
                for (i, c) in stack.bu.iter().enumerate() {
                    visit_conv(&format!("fusion.s{s}.bu{i}"), c, f);
                }
                let w = &stack.weights;
                let groups: [(&str, &[Tensor]); 6] = [
                    ("mid3", &w.mid3),
                    ("mid2", &w.mid2),
                    ("out1", &w.out1),
                    ("out2", &w.out2),
                    ("out3", &w.out3),
                    ("out4", &w.out4),
                ];
                for (name, tensors) in groups {
                    for (k, t) in tensors.iter().enumerate() {
                        f(format!("fusion.s{s}.w.{name}.{k}"), t);
                    }
                }
            }
        }
    }
    f("head.w1".into(), &p.head.w1);
    f("head.b1".into(), &p.head.b1);
    f("head.w2".into(), &p.head.w2);
    f("head.b2".into(), &p.head.b2);
    for (i, s) in p.bn_stats.iter().enumerate() {
        f(format!("backbone.{i}.running_mean"), &s.mean);
        f(format!("backbone.{i}.running_var"), &s.var);
    }
}

fn visit_conv<'a>(prefix: &str, c: &'a GraphConvParams, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{prefix}.w_self"), &c.w_self);
    f(format!("{prefix}.w_nbr"), &c.w_nbr);
    if let Some(we) = &c.w_edge {
        f(format!("{prefix}.w_edge"), we);
    }
    f(format!("{prefix}.bias"), &c.bias);
}

// The mutable twin of `visit`; kept in lockstep by the shared field order.
fn visit_mut<'a>(p: &'a mut MuGNetParams, f: &mut dyn FnMut(String, &'a mut Tensor)) {
    for (i, m) in p.embed.mlps.iter_mut().enumerate() {
        f(format!("embed.mlp{i}.w1"), &mut m.w1);
        f(format!("embed.mlp{i}.b1"), &mut m.b1);
        f(format!("embed.mlp{i}.w2"), &mut m.w2);
        f(format!("embed.mlp{i}.b2"), &mut m.b2);
    }
    f("embed.down1".into(), &mut p.embed.down1);
    f("embed.down2".into(), &mut p.embed.down2);
    for (i, b) in p.blocks.iter_mut().enumerate() {
        visit_conv_mut(&format!("backbone.{i}"), &mut b.conv, f);
        f(format!("backbone.{i}.gamma"), &mut b.gamma);
        f(format!("backbone.{i}.beta"), &mut b.beta);
    }
    match &mut p.fusion {
        FusionParams::None => {}
        FusionParams::Pyramid(convs) => {
            for (i, c) in convs.iter_mut().enumerate() {
                visit_conv_mut(&format!("fusion.pyr{i}"), c, f);
            }
        }
        FusionParams::Bidirectional(stacks) => {
            for (s, stack) in stacks.iter_mut().enumerate() {
                for (i, c) in stack.td.iter_mut().enumerate() {
                    visit_conv_mut(&format!("fusion.s{s}.td{i}"), c, f);
                }
                for (i, c) in stack.bu.iter_mut().enumerate() {
                    visit_conv_mut(&format!("fusion.s{s}.bu{i}"), c, f);
                }
                let w = &mut stack.weights;
                let groups: [(&str, &mut [Tensor]); 6] = [
                    ("mid3", &mut w.mid3),
                    ("mid2", &mut w.mid2),
                    ("out1", &mut w.out1),
                    ("out2", &mut w.out2),
                    ("out3", &mut w.out3),
                    ("out4", &mut w.out4),
                ];
                for (name, tensors) in groups {
                    for (k, t) in tensors.iter_mut().enumerate() {
                        f(format!("fusion.s{s}.w.{name}.{k}"), t);
                    }
                }
            }
        }
    }
    f("head.w1".into(), &mut p.head.w1);
    f("head.b1".into(), &mut p.head.b1);
    f("head.w2".into(), &mut p.head.w2);
    f("head.b2".into(), &mut p.head.b2);
    for (i, s) in p.bn_stats.iter_mut().enumerate() {
        f(format!("backbone.{i}.running_mean"), &mut s.mean);
        f(format!("backbone.{i}.running_var"), &mut s.var);
    }
}

fn visit_conv_mut<'a>(
    prefix: &str,
    c: &'a mut GraphConvParams,
    f: &mut dyn FnMut(String, &'a mut Tensor),
) {
    f(format!("{prefix}.w_self"), &mut c.w_self);
    f(format!("{prefix}.w_nbr"), &mut c.w_nbr);
    if let Some(we) = &mut c.w_edge {
        f(format!("{prefix}.w_edge"), we);
    }
    f(format!("{prefix}.bias"), &mut c.bias);
}

// ----- tape-side mirrors ----------------------------------------------------

pub struct GraphConvVars {
    pub w_self: Var,
    pub w_nbr: Var,
    pub w_edge: Option<Var>,
    pub bias: Var,
}

pub struct BlockVars {
    pub conv: GraphConvVars,
    pub gamma: Var,
    pub beta: Var,
}

pub struct BidirWeightVars {
    pub mid3: [Var; 2],
    pub mid2: [Var; 2],
    pub out1: [Var; 2],
    pub out2: [Var; 3],
    pub out3: [Var; 3],
    pub out4: [Var; 2],
}

pub struct BidirStackVars {
    pub td: [GraphConvVars; 2],
    pub bu: [GraphConvVars; 4],
    pub weights: BidirWeightVars,
}

pub enum FusionVars {
    None,
    Pyramid(Vec<GraphConvVars>),
    Bidirectional(Vec<BidirStackVars>),
}

pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct ModelVars {
    pub embed: EmbeddingVars,
    pub blocks: Vec<BlockVars>,
    pub fusion: FusionVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Vars in the learnable subset of the canonical `named` order.
    fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for m in &self.embed.mlps {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        out.push(self.embed.down1);
        out.push(self.embed.down2);
        let push_conv = |out: &mut Vec<Var>, c: &GraphConvVars| {
            out.push(c.w_self);
            out.push(c.w_nbr);
            if let Some(we) = c.w_edge {
                out.push(we);
            }
            out.push(c.bias);
        };
        for b in &self.blocks {
            push_conv(&mut out, &b.conv);
            out.push(b.gamma);
            out.push(b.beta);
        }
        match &self.fusion {
            FusionVars::None => {}
            FusionVars::Pyramid(convs) => {
                for c in convs {
                    push_conv(&mut out, c);
                }
            }
            FusionVars::Bidirectional(stacks) => {
                for s in stacks {
                    for c in &s.td {
                        push_conv(&mut out, c);
                    }
                    for c in &s.bu {
                        push_conv(&mut out, c);
                    }
                    let w = &s.weights;
                    for group in [
                        &w.mid3[..],
                        &w.mid2[..],
                        &w.out1[..],
                        &w.out2[..],
                        &w.out3[..],
                        &w.out4[..],
                    ] {
                        out.extend_from_slice(group);
                    }
                }
            }
        }
        out.extend([self.head.w1, self.head.b1, self.head.w2, self.head.b2]);
        out
    }
}

// ----- per-scene constants ---------------------------------------------------

/// Graph structure constants shared by every layer of one scene.
pub struct GraphContext {
    pub num_nodes: usize,
    pub adj: Arc<Adjacency>,
    /// Mean outgoing edge features per node, zeros for isolated nodes.
    pub edge_mean: Tensor,
}

impl GraphContext {
    pub fn new(graph: &SuperpointGraph) -> Self {
        let n = graph.num_nodes();
        let mut sums = vec![0.0; n * EDGE_FEATURE_DIM];
        let mut counts = vec![0usize; n];
        for e in &graph.edges {
            let row = e.feature_row();
            for d in 0..EDGE_FEATURE_DIM {
                sums[e.src * EDGE_FEATURE_DIM + d] += row[d];
            }
            counts[e.src] += 1;
        }
        for i in 0..n {
            if counts[i] > 0 {
                let inv = 1.0 / counts[i] as f64;
                for d in 0..EDGE_FEATURE_DIM {
                    sums[i * EDGE_FEATURE_DIM + d] *= inv;
                }
            }
        }
        GraphContext {
            num_nodes: n,
            adj: Arc::new(graph.adjacency()),
            edge_mean: Tensor::new(sums, &[n, EDGE_FEATURE_DIM]).expect("edge matrix"),
        }
    }
}

/// Everything one scene contributes to a forward pass.
pub struct SceneInputs {
    pub ctx: GraphContext,
    /// Canonical per-cluster point matrices (constants).
    pub cluster_matrices: Vec<Tensor>,
    pub cluster_sizes: Vec<usize>,
    pub cluster_labels: Option<Vec<usize>>,
    pub point_labels: Option<Vec<usize>>,
    /// Member point indices per cluster.
    pub members: Vec<Vec<usize>>,
    pub num_points: usize,
}

impl SceneInputs {
    pub fn prepare(gf: &GraphFile, embed_cfg: &EmbeddingConfig) -> Result<SceneInputs> {
        let dim = gf.point_feature_dim();
        if dim != embed_cfg.input_dim {
            return Err(Error::Contract(format!(
                "scene provides {dim}-wide point features, model expects {}",
                embed_cfg.input_dim
            )));
        }
        let mut matrices = Vec::with_capacity(gf.graph.num_nodes());
        for c in &gf.graph.clusters {
            let mut rows = Vec::with_capacity(c.members.len());
            for &m in &c.members {
                let mut row = Vec::with_capacity(dim);
                let p = gf.positions[m];
                row.extend_from_slice(&[
                    p[0] - c.centroid[0],
                    p[1] - c.centroid[1],
                    p[2] - c.centroid[2],
                ]);
                row.extend_from_slice(&gf.geo.row(m));
                if let Some(colors) = &gf.colors {
                    row.extend_from_slice(&colors[m]);
                }
                rows.push(row);
            }
            matrices.push(canonical_cluster_matrix(&rows, dim, embed_cfg.budgets[0])?);
        }
        let cluster_labels = match &gf.labels {
            Some(labels) => Some(majority_labels(&gf.graph, labels)?),
            None => None,
        };
        Ok(SceneInputs {
            ctx: GraphContext::new(&gf.graph),
            cluster_matrices: matrices,
            cluster_sizes: gf.graph.clusters.iter().map(|c| c.size()).collect(),
            cluster_labels,
            point_labels: gf.labels.clone(),
            members: gf
                .graph
                .clusters
                .iter()
                .map(|c| c.members.clone())
                .collect(),
            num_points: gf.graph.num_points,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.ctx.num_nodes
    }
}

// ----- forward passes --------------------------------------------------------

/// One graph convolution over prepared graph constants.
pub fn graph_conv(
    tape: &mut Tape,
    h: Var,
    ctx: &GraphContext,
    layer: &GraphConvVars,
) -> Result<Var> {
    let rows = tape.shape(h)[0];
    if rows != ctx.num_nodes {
        return Err(Error::Contract(format!(
            "{} feature rows for {} graph nodes",
            rows, ctx.num_nodes
        )));
    }
    let self_term = tape.matmul(h, layer.w_self)?;
    let msg = tape.matmul(h, layer.w_nbr)?;
    let nbr_term = tape.mean_neighbors(msg, &ctx.adj)?;
    let mut out = tape.add(self_term, nbr_term)?;
    if let Some(w_edge) = layer.w_edge {
        let edge_const = tape.leaf(&ctx.edge_mean);
        let edge_term = tape.matmul(edge_const, w_edge)?;
        out = tape.add(out, edge_term)?;
    }
    tape.add(out, layer.bias)
}

/// Residual backbone; returns the tapped level features and their
/// concatenation.
pub fn backbone_forward(
    tape: &mut Tape,
    h0: Var,
    ctx: &GraphContext,
    cfg: &ModelConfig,
    blocks: &[BlockVars],
    bn_stats: &mut [RunningStats],
    mode: BnMode,
) -> Result<(Vec<Var>, Var)> {
    let depth = blocks.len();
    if let Some(&bad) = cfg.taps.iter().find(|&&t| t < 1 || t > depth) {
        return Err(Error::Config(format!(
            "tap {bad} out of range for depth {depth}"
        )));
    }
    let mut outs: Vec<Var> = Vec::with_capacity(depth);
    let mut x = h0;
    for (i, (block, stats)) in blocks.iter().zip(bn_stats.iter_mut()).enumerate() {
        let conv = graph_conv(tape, x, ctx, &block.conv)?;
        let normed = tape.batch_norm(conv, block.gamma, block.beta, stats, mode)?;
        let mut out = tape.relu(normed);
        if i >= 1 {
            out = tape.add(out, outs[i - 1])?;
        }
        // Long-term residual: first block's output joins the final block
        // (only meaningful when it is not already the short-term source).
        if depth >= 3 && i == depth - 1 {
            out = tape.add(out, outs[0])?;
        }
        outs.push(out);
        x = out;
    }
    let tapped: Vec<Var> = cfg.taps.iter().map(|&t| outs[t - 1]).collect();
    let concat = tape.concat(&tapped, 1)?;
    Ok((tapped, concat))
}

/// Relu-clamped weighted mean: sum(relu(w_k) h_k) / (sum relu(w_k) + eps).
fn weighted_fusion(tape: &mut Tape, parts: &[(Var, Var)]) -> Result<Var> {
    debug_assert!(!parts.is_empty());
    let mut numer: Option<Var> = None;
    let mut denom: Option<Var> = None;
    for &(h, w) in parts {
        let wp = tape.relu(w);
        let term = tape.mul(h, wp)?;
        numer = Some(match numer {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        denom = Some(match denom {
            Some(acc) => tape.add(acc, wp)?,
            None => wp,
        });
    }
    let eps = tape.scalar(FUSION_EPS);
    let denom = tape.add(denom.unwrap(), eps)?;
    tape.div(numer.unwrap(), denom)
}

fn bidirectional_stack(
    tape: &mut Tape,
    ins: &[Var],
    ctx: &GraphContext,
    stack: &BidirStackVars,
) -> Result<Vec<Var>> {
    let (in1, in2, in3, in4) = (ins[0], ins[1], ins[2], ins[3]);
    let w = &stack.weights;

    // Top-down: level 4 passes through as-is, levels 3 and 2 get mids,
    // level 1 consumes the pass in its output node.
    let m3 = weighted_fusion(tape, &[(in3, w.mid3[0]), (in4, w.mid3[1])])?;
    let mid3 = graph_conv(tape, m3, ctx, &stack.td[0])?;
    let m2 = weighted_fusion(tape, &[(in2, w.mid2[0]), (mid3, w.mid2[1])])?;
    let mid2 = graph_conv(tape, m2, ctx, &stack.td[1])?;

    // Bottom-up with input skips.
    let o1 = weighted_fusion(tape, &[(in1, w.out1[0]), (mid2, w.out1[1])])?;
    let out1 = graph_conv(tape, o1, ctx, &stack.bu[0])?;
    let o2 = weighted_fusion(
        tape,
        &[(in2, w.out2[0]), (mid2, w.out2[1]), (out1, w.out2[2])],
    )?;
    let out2 = graph_conv(tape, o2, ctx, &stack.bu[1])?;
    let o3 = weighted_fusion(
        tape,
        &[(in3, w.out3[0]), (mid3, w.out3[1]), (out2, w.out3[2])],
    )?;
    let out3 = graph_conv(tape, o3, ctx, &stack.bu[2])?;
    let o4 = weighted_fusion(tape, &[(in4, w.out4[0]), (out3, w.out4[1])])?;
    let out4 = graph_conv(tape, o4, ctx, &stack.bu[3])?;

    Ok(vec![out1, out2, out3, out4])
}

/// Fuses the four tapped levels; `fusion` selects plain-pyramid or
/// weighted bidirectional behaviour (or passes through for `None`).
pub fn bidirectional_fuse(
    tape: &mut Tape,
    taps: &[Var],
    ctx: &GraphContext,
    fusion: &FusionVars,
) -> Result<Option<Vec<Var>>> {
    match fusion {
        FusionVars::None => Ok(None),
        FusionVars::Pyramid(convs) => {
            if taps.len() != FUSION_LEVELS || convs.len() != FUSION_LEVELS {
                return Err(Error::Contract(format!(
                    "pyramid fusion needs {FUSION_LEVELS} levels, got {}",
                    taps.len()
                )));
            }
            let shape = tape.shape(taps[0]).to_vec();
            for &t in taps {
                if tape.shape(t) != shape {
                    return Err(Error::Contract("fusion level shape mismatch".into()));
                }
            }
            // Top-down only: out4 = gc(in4), out_i = gc(in_i + out_{i+1}).
            let out4 = graph_conv(tape, taps[3], ctx, &convs[3])?;
            let s3 = tape.add(taps[2], out4)?;
            let out3 = graph_conv(tape, s3, ctx, &convs[2])?;
            let s2 = tape.add(taps[1], out3)?;
            let out2 = graph_conv(tape, s2, ctx, &convs[1])?;
            let s1 = tape.add(taps[0], out2)?;
            let out1 = graph_conv(tape, s1, ctx, &convs[0])?;
            Ok(Some(vec![out1, out2, out3, out4]))
        }
        FusionVars::Bidirectional(stacks) => {
            if taps.len() != FUSION_LEVELS {
                return Err(Error::Contract(format!(
                    "bidirectional fusion needs {FUSION_LEVELS} levels, got {}",
                    taps.len()
                )));
            }
            let shape = tape.shape(taps[0]).to_vec();
            for &t in taps {
                if tape.shape(t) != shape {
                    return Err(Error::Contract("fusion level shape mismatch".into()));
                }
            }
            let mut levels = taps.to_vec();
            for stack in stacks {
                levels = bidirectional_stack(tape, &levels, ctx, stack)?;
            }
            Ok(Some(levels))
        }
    }
}

/// Final per-cluster classifier over backbone and fusion features.
pub fn segment_head(
    tape: &mut Tape,
    backbone_concat: Var,
    fused: Option<&[Var]>,
    head: &HeadVars,
) -> Result<Var> {
    let mut parts = vec![backbone_concat];
    if let Some(f) = fused {
        parts.extend_from_slice(f);
    }
    let input = tape.concat(&parts, 1)?;
    let h = tape.matmul(input, head.w1)?;
    let h = tape.add(h, head.b1)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, head.w2)?;
    tape.add(logits, head.b2)
}

pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
    pub backbone_concat: Var,
    pub fused: Option<Vec<Var>>,
}

/// Full forward pass for one scene.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    bn_stats: &mut [RunningStats],
    scene: &SceneInputs,
    mode: BnMode,
) -> Result<ForwardOutput> {
    let h0 = embed_graph(tape, &scene.cluster_matrices, &cfg.embed, &vars.embed)?;
    let (taps, backbone_concat) =
        backbone_forward(tape, h0, &scene.ctx, cfg, &vars.blocks, bn_stats, mode)?;
    let fused = bidirectional_fuse(tape, &taps, &scene.ctx, &vars.fusion)?;
    let logits = segment_head(tape, backbone_concat, fused.as_deref(), &vars.head)?;
    Ok(ForwardOutput {
        logits,
        taps,
        backbone_concat,
        fused,
    })
}

/// Inference logits (row-major `num_nodes x classes`) with frozen
/// batch-norm statistics. Thread-safe over shared params.
pub fn infer_logits(params: &MuGNetParams, scene: &SceneInputs) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let out = forward(
        &mut tape,
        &params.config,
        &vars,
        &mut stats,
        scene,
        BnMode::Eval,
    )?;
    Ok(tape.value(out.logits).to_vec())
}

/// Broadcasts per-cluster argmax labels (ties to the lowest class) onto
/// member points.
pub fn predict_points(
    logits: &[f64],
    classes: usize,
    members: &[Vec<usize>],
    num_points: usize,
) -> Vec<usize> {
    debug_assert_eq!(logits.len(), classes * members.len());
    let mut labels = vec![0usize; num_points];
    for (row, m) in members.iter().enumerate() {
        let slice = &logits[row * classes..(row + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = c;
            }
        }
        for &p in m {
            labels[p] = best;
        }
    }
    labels
}

#[cfg(test)]
mod tests;
