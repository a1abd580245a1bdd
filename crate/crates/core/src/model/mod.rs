//! The toy hierarchical segmentation transformer: a graph of typed ops grouped
//! into encoder blocks, with the prunable-unit and consumer metadata the
//! pruner relies on.

mod forward;
mod format;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub use forward::{ActivationTrace, ForwardObserver, ForwardOutput};
pub use format::{load_model, model_from_bytes, model_to_bytes, save_model, FORMAT_VERSION, MAGIC};

pub const CLASS_NAMES: [&str; 6] = ["background", "road", "sidewalk", "crosswalk", "vehicle", "obstacle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Conv,
    Linear,
    LayerNorm,
    Attention,
    Activation,
    Add,
    Resize,
}

/// An op whose input axis must shrink when the producer loses output units.
///
/// `axis == 1` slices the consumer's weight along its input axis.
/// `axis == 0` slices every parameter of the consumer along axis 0 (layer
/// norms and depthwise convs); such a consumer forwards the removal to its
/// own consumers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Consumer {
    pub op: String,
    pub axis: usize,
}

impl Consumer {
    pub fn new(op: impl Into<String>, axis: usize) -> Self {
        Self { op: op.into(), axis }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpSpec {
    pub id: String,
    pub kind: OpKind,
    /// Weight then bias for conv/linear, gamma then beta for layer norm.
    pub params: Vec<Tensor>,
    pub prunable: bool,
    /// Ops sharing a tie name are pruned with one common removal set.
    pub tie: Option<String>,
    /// Removal counts are balanced across this many equal slices of the unit axis.
    pub prune_heads: usize,
    pub consumers: Vec<Consumer>,
    pub attrs: OpAttrs,
}

impl OpSpec {
    fn bare(id: impl Into<String>, kind: OpKind) -> Self {
        Self {
            id: id.into(),
            kind,
            params: Vec::new(),
            prunable: false,
            tie: None,
            prune_heads: 1,
            consumers: Vec::new(),
            attrs: OpAttrs::default(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Number of output units (filters / neurons / channels), if the op has parameters.
    pub fn units(&self) -> Option<usize> {
        self.params.first().map(|w| w.dim(0))
    }

    /// Parameters owned by a single output unit.
    pub fn params_per_unit(&self) -> usize {
        match self.units() {
            Some(u) => self.param_count() / u,
            None => 0,
        }
    }

    pub fn weight(&self) -> Result<&Tensor> {
        self.params
            .first()
            .ok_or_else(|| Error::Consistency(format!("{} has no weight", self.id)))
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.params.get(1)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Width of this op's input along a consumer axis.
    fn consumed_width(&self, axis: usize) -> Result<usize> {
        let w = self.weight()?;
        match axis {
            0 => Ok(w.dim(0)),
            1 if w.rank() >= 2 => Ok(w.dim(1) * self.attrs.groups.unwrap_or(1)),
            _ => Err(Error::Consistency(format!(
                "{} cannot consume on axis {axis}",
                self.id
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    /// 1-based block index.
    pub index: usize,
    pub ops: Vec<OpSpec>,
}

impl BlockSpec {
    pub fn param_count(&self) -> usize {
        self.ops.iter().map(OpSpec::param_count).sum()
    }

    /// Parameters held by ops that can lose output units.
    pub fn prunable_param_count(&self) -> usize {
        self.ops.iter().filter(|o| o.prunable).map(OpSpec::param_count).sum()
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.ops.iter().filter(|o| o.kind == kind).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub patch_kernels: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub num_classes: usize,
    pub init_std: f32,
    pub seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            in_channels: 3,
            channels: vec![16, 32, 64, 128],
            patch_kernels: vec![7, 3, 3, 3],
            patch_strides: vec![4, 2, 2, 2],
            sr_ratios: vec![8, 4, 2, 1],
            heads: vec![1, 1, 2, 4],
            mlp_ratio: 2,
            decoder_dim: 64,
            num_classes: CLASS_NAMES.len(),
            init_std: 0.06,
            seed: 0,
        }
    }
}

impl ArchitectureConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// A small variant for fast tests: 32x32 input, channels (4, 8, 12, 16).
    pub fn tiny(seed: u64) -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            channels: vec![4, 8, 12, 16],
            decoder_dim: 8,
            seed,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of every stage's output.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        self.patch_kernels
            .iter()
            .zip(&self.patch_strides)
            .map(|(&k, &s)| {
                h = (h + 2 * (k / 2) - k) / s + 1;
                w = (w + 2 * (k / 2) - k) / s + 1;
                (h, w)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (name, len) in [
            ("patch_kernels", self.patch_kernels.len()),
            ("patch_strides", self.patch_strides.len()),
            ("sr_ratios", self.sr_ratios.len()),
            ("heads", self.heads.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries, expected {n}")));
            }
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::Config(format!(
                "channel list {:?} must be strictly increasing and positive",
                self.channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(Error::Config("class ids must fit in a byte".into()));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.decoder_dim == 0 {
            return Err(Error::Config("in_channels, mlp_ratio and decoder_dim must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for b in 0..n {
            let (k, s) = (self.patch_kernels[b], self.patch_strides[b]);
            if k == 0 || s == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("stage {} patch kernel must be odd, stride positive", b + 1)));
            }
            if h + 2 * (k / 2) < k || w + 2 * (k / 2) < k {
                return Err(Error::Config(format!("stage {} input too small for kernel", b + 1)));
            }
            h = (h + 2 * (k / 2) - k) / s + 1;
            w = (w + 2 * (k / 2) - k) / s + 1;
            let r = self.sr_ratios[b];
            if r == 0 || h % r != 0 || w % r != 0 {
                return Err(Error::Config(format!(
                    "stage {} resolution {h}x{w} not divisible by reduction ratio {r}",
                    b + 1
                )));
            }
            let heads = self.heads[b];
            if heads == 0 || !self.channels[b].is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "stage {} width {} not divisible by {heads} heads",
                    b + 1,
                    self.channels[b]
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        if classes.len() != height * width {
            return Err(dim_err("mask length", height * width, classes.len()));
        }
        if let Some(&c) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Domain(format!("class id {c} not below {num_classes}")));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    /// Per-pixel argmax over the class axis of `[K,H,W]` logits; ties pick the lower id.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let [k, h, w] = logits.dims3("logits")?;
        let n = h * w;
        let d = logits.data();
        let classes = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + p] > d[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

/// A set of producer ops that lose the same output units together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub name: String,
    pub block: usize,
    pub members: Vec<String>,
    pub units: usize,
    pub heads: usize,
    /// Parameters removed from the members per removed unit.
    pub params_per_unit: usize,
    pub consumers: Vec<Consumer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub config: ArchitectureConfig,
    pub blocks: Vec<BlockSpec>,
    pub decoder: Vec<OpSpec>,
}

pub(crate) fn op_id(block: usize, name: &str) -> String {
    format!("b{block}.{name}")
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Init {
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        let (rng, normal) = (&mut self.rng, &self.normal);
        Tensor::from_fn(shape, |_| normal.sample(rng))
    }

    fn conv(&mut self, id: String, c_out: usize, c_in_per_group: usize, k: usize, stride: usize, padding: usize, groups: usize) -> OpSpec {
        let mut op = OpSpec::bare(id, OpKind::Conv);
        op.params = vec![self.weight(&[c_out, c_in_per_group, k, k]), Tensor::zeros(&[c_out])];
        op.attrs.stride = Some(stride);
        op.attrs.padding = Some(padding);
        op.attrs.groups = Some(groups);
        op
    }

    fn linear(&mut self, id: String, d_out: usize, d_in: usize) -> OpSpec {
        let mut op = OpSpec::bare(id, OpKind::Linear);
        op.params = vec![self.weight(&[d_out, d_in]), Tensor::zeros(&[d_out])];
        op
    }
}

fn layer_norm(id: String, d: usize) -> OpSpec {
    let mut op = OpSpec::bare(id, OpKind::LayerNorm);
    op.params = vec![Tensor::full(&[d], 1.0), Tensor::zeros(&[d])];
    op.attrs.eps = Some(1e-6);
    op
}

fn marker(id: String, kind: OpKind, function: &str) -> OpSpec {
    let mut op = OpSpec::bare(id, kind);
    op.attrs.function = Some(function.to_string());
    op
}

fn prunable(mut op: OpSpec, tie: Option<String>, heads: usize, consumers: Vec<Consumer>) -> OpSpec {
    op.prunable = true;
    op.tie = tie;
    op.prune_heads = heads;
    op.consumers = consumers;
    op
}

/// Builds the seeded toy transformer described by `config`.
pub fn build_toyformer(config: &ArchitectureConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        normal: Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?,
    };
    let n = config.stages();
    let mut blocks = Vec::with_capacity(n);
    for s in 0..n {
        let b = s + 1;
        let id = |name: &str| op_id(b, name);
        let c = config.channels[s];
        let c_in = if s == 0 { config.in_channels } else { config.channels[s - 1] };
        let (k, stride) = (config.patch_kernels[s], config.patch_strides[s]);
        let (r, heads) = (config.sr_ratios[s], config.heads[s]);
        let hidden = c * config.mlp_ratio;
        let has_sr = r > 1;

        let mut residual = vec![
            Consumer::new(id("pe_norm"), 0),
            Consumer::new(id("norm1"), 0),
            Consumer::new(id("q"), 1),
        ];
        if has_sr {
            residual.push(Consumer::new(id("sr"), 1));
        } else {
            residual.push(Consumer::new(id("k"), 1));
            residual.push(Consumer::new(id("v"), 1));
        }
        residual.extend([
            Consumer::new(id("norm2"), 0),
            Consumer::new(id("fc1"), 1),
            Consumer::new(id("norm_out"), 0),
        ]);
        if b < n {
            residual.push(Consumer::new(op_id(b + 1, "patch_embed"), 1));
        }
        residual.push(Consumer::new(format!("dec.c{b}"), 1));
        let res_tie = Some(id("res"));

        let mut ops = Vec::new();
        ops.push(prunable(
            init.conv(id("patch_embed"), c, c_in, k, stride, k / 2, 1),
            res_tie.clone(),
            1,
            residual.clone(),
        ));
        ops.push(layer_norm(id("pe_norm"), c));
        ops.push(layer_norm(id("norm1"), c));
        ops.push(prunable(init.linear(id("q"), c, c), Some(id("qk")), heads, vec![]));
        if has_sr {
            ops.push(prunable(
                init.conv(id("sr"), c, c, r, r, 0, 1),
                None,
                1,
                vec![Consumer::new(id("sr_norm"), 0), Consumer::new(id("k"), 1), Consumer::new(id("v"), 1)],
            ));
            ops.push(layer_norm(id("sr_norm"), c));
        }
        ops.push(prunable(init.linear(id("k"), c, c), Some(id("qk")), heads, vec![]));
        ops.push(prunable(init.linear(id("v"), c, c), None, heads, vec![Consumer::new(id("proj"), 1)]));
        let mut attn = marker(id("attn"), OpKind::Attention, "softmax(qk^T*scale)v");
        attn.attrs.heads = Some(heads);
        attn.attrs.scale = Some(1.0 / ((c / heads) as f32).sqrt());
        ops.push(attn);
        ops.push(prunable(init.linear(id("proj"), c, c), res_tie.clone(), 1, residual.clone()));
        ops.push(marker(id("add1"), OpKind::Add, "residual"));
        ops.push(layer_norm(id("norm2"), c));
        ops.push(prunable(
            init.linear(id("fc1"), hidden, c),
            None,
            1,
            vec![Consumer::new(id("dwconv"), 0)],
        ));
        let mut dw = init.conv(id("dwconv"), hidden, 1, 3, 1, 1, hidden);
        dw.consumers = vec![Consumer::new(id("fc2"), 1)];
        ops.push(dw);
        ops.push(marker(id("gelu"), OpKind::Activation, "gelu"));
        ops.push(prunable(init.linear(id("fc2"), c, hidden), res_tie.clone(), 1, residual));
        ops.push(marker(id("add2"), OpKind::Add, "residual"));
        ops.push(layer_norm(id("norm_out"), c));
        blocks.push(BlockSpec { index: b, ops });
    }

    let e = config.decoder_dim;
    let mut decoder = Vec::new();
    for (s, &c) in config.channels.iter().enumerate() {
        decoder.push(init.linear(format!("dec.c{}", s + 1), e, c));
    }
    decoder.push(marker("dec.resize".into(), OpKind::Resize, "bilinear to stage-1 resolution"));
    decoder.push(init.linear("dec.fuse".into(), e, e * n));
    decoder.push(marker("dec.relu".into(), OpKind::Activation, "relu"));
    decoder.push(init.linear("dec.cls".into(), config.num_classes, e));
    decoder.push(marker("dec.upsample".into(), OpKind::Resize, "bilinear to input resolution"));

    let model = ModelGraph {
        config: config.clone(),
        blocks,
        decoder,
    };
    model.check_consistency()?;
    Ok(model)
}

impl ModelGraph {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn ops(&self) -> impl Iterator<Item = &OpSpec> {
        self.blocks.iter().flat_map(|b| b.ops.iter()).chain(self.decoder.iter())
    }

    pub(crate) fn ops_mut(&mut self) -> impl Iterator<Item = &mut OpSpec> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.ops.iter_mut())
            .chain(self.decoder.iter_mut())
    }

    pub fn find_op(&self, id: &str) -> Option<&OpSpec> {
        self.ops().find(|o| o.id == id)
    }

    pub fn op(&self, id: &str) -> Result<&OpSpec> {
        self.find_op(id).ok_or_else(|| Error::UnknownOp(id.to_string()))
    }

    pub(crate) fn op_mut(&mut self, id: &str) -> Result<&mut OpSpec> {
        self.ops_mut()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::UnknownOp(id.to_string()))
    }

    /// Total parameter count `w` over encoder blocks and decoder.
    pub fn param_count(&self) -> usize {
        self.ops().map(OpSpec::param_count).sum()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder.iter().map(OpSpec::param_count).sum()
    }

    pub fn prunable_param_count(&self) -> usize {
        self.blocks.iter().map(BlockSpec::prunable_param_count).sum()
    }

    /// Prunable ops grouped by tie name, in block and op order.
    pub fn prune_groups(&self) -> Vec<PruneGroup> {
        let mut groups: Vec<PruneGroup> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for block in &self.blocks {
            for op in block.ops.iter().filter(|o| o.prunable) {
                let name = op.tie.clone().unwrap_or_else(|| op.id.clone());
                let units = op.units().unwrap_or(0);
                match index.get(&name) {
                    Some(&i) => {
                        let g = &mut groups[i];
                        g.members.push(op.id.clone());
                        g.params_per_unit += op.params_per_unit();
                        for c in &op.consumers {
                            if !g.consumers.contains(c) {
                                g.consumers.push(c.clone());
                            }
                        }
                    }
                    None => {
                        index.insert(name.clone(), groups.len());
                        groups.push(PruneGroup {
                            name,
                            block: block.index,
                            members: vec![op.id.clone()],
                            units,
                            heads: op.prune_heads.max(1),
                            params_per_unit: op.params_per_unit(),
                            consumers: op.consumers.clone(),
                        });
                    }
                }
            }
        }
        groups
    }

    /// Verifies that every producer/consumer width agrees, tie groups are
    /// uniform, consumer edges form a DAG, and the classifier emits K classes.
    pub fn check_consistency(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for op in self.ops() {
            if !seen.insert(op.id.as_str()) {
                return Err(Error::Consistency(format!("duplicate op id {}", op.id)));
            }
            let expected = match op.kind {
                OpKind::Conv | OpKind::Linear | OpKind::LayerNorm => 2,
                _ => 0,
            };
            if op.params.len() != expected {
                return Err(Error::Consistency(format!(
                    "{} has {} parameter tensors, expected {expected}",
                    op.id,
                    op.params.len()
                )));
            }
            if op.prunable && !matches!(op.kind, OpKind::Conv | OpKind::Linear) {
                return Err(Error::Consistency(format!("{} is prunable but not conv/linear", op.id)));
            }
            if let Some(units) = op.units() {
                for (i, p) in op.params.iter().enumerate().skip(1) {
                    if p.dim(0) != units {
                        return Err(Error::Consistency(format!(
                            "{} parameter {i} has {} entries, weight has {units} units",
                            op.id,
                            p.dim(0)
                        )));
                    }
                }
                if op.kind == OpKind::LayerNorm && op.params[0].rank() != 1 {
                    return Err(Error::Consistency(format!("{} gamma must be rank 1", op.id)));
                }
            }
            if let Some(g) = op.attrs.groups {
                let w = op.weight()?;
                if g == 0 || w.dim(0) % g != 0 {
                    return Err(Error::Consistency(format!("{} groups {g} do not divide outputs", op.id)));
                }
            }
            for c in &op.consumers {
                let target = self
                    .find_op(&c.op)
                    .ok_or_else(|| Error::Consistency(format!("{} feeds unknown op {}", op.id, c.op)))?;
                let units = op.units().unwrap_or(0);
                let width = target.consumed_width(c.axis)?;
                if width != units {
                    return Err(Error::Consistency(format!(
                        "{} axis {} has width {width} but producer {} has {units} units",
                        c.op, c.axis, op.id
                    )));
                }
            }
        }
        for g in self.prune_groups() {
            for m in &g.members {
                let u = self.op(m)?.units().unwrap_or(0);
                if u != g.units {
                    return Err(Error::Consistency(format!(
                        "tie group {} mixes {} and {u} units",
                        g.name, g.units
                    )));
                }
            }
            if g.units % g.heads != 0 {
                return Err(Error::Consistency(format!(
                    "group {} has {} units, not divisible by {} heads",
                    g.name, g.units, g.heads
                )));
            }
        }
        self.check_acyclic()?;
        let cls = self.op("dec.cls")?;
        if cls.units() != Some(self.config.num_classes) {
            return Err(Error::Consistency(format!(
                "classifier emits {:?} classes, expected {}",
                cls.units(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Removal propagates through axis-0 consumers only; those chains must be acyclic.
    fn check_acyclic(&self) -> Result<()> {
        let edges: BTreeMap<&str, Vec<&str>> = self
            .ops()
            .map(|o| {
                let next = o.consumers.iter().filter(|c| c.axis == 0).map(|c| c.op.as_str());
                (o.id.as_str(), next.collect())
            })
            .collect();
        // 1 = on stack, 2 = done
        let mut state: HashMap<&str, u8> = HashMap::new();
        fn visit<'a>(
            n: &'a str,
            edges: &BTreeMap<&'a str, Vec<&'a str>>,
            state: &mut HashMap<&'a str, u8>,
        ) -> Result<()> {
            match state.get(n) {
                Some(1) => return Err(Error::Consistency(format!("consumer cycle through {n}"))),
                Some(2) => return Ok(()),
                _ => {}
            }
            state.insert(n, 1);
            for &m in edges.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                visit(m, edges, state)?;
            }
            state.insert(n, 2);
            Ok(())
        }
        for &n in edges.keys() {
            visit(n, &edges, &mut state)?;
        }
        Ok(())
    }
}
