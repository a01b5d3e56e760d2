//! The densely connected super network: routing blocks grouped into stages,
//! and the constrained set of connections between them.
//!
//! Node numbering is shared by every other module: node `0` is the fixed
//! stem (input block), nodes `1..=N` are routing blocks and node `N + 1` is
//! the virtual ending block. A connection `(i, j)` exists iff `j - i <= M`
//! and the resolution ratio between the two nodes is 1 or 2. Only blocks of
//! the final stage connect to the ending block.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A candidate operation of a basic or shape-alignment layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OperationKind {
    /// MobileNetV2 inverted residual: pointwise expansion, depthwise `kernel`, pointwise projection.
    Mbconv { kernel: u32, expansion: u32 },
    Skip,
    /// Two 3x3 convolutions, plus a 1x1 projection when the shape changes.
    ResnetBasic,
    /// 1x1 reduce, 3x3, 1x1 expand; the output width is `expansion` times the inner width.
    ResnetBottleneck { expansion: u32 },
}

pub const MBCONV_KERNELS: [u32; 3] = [3, 5, 7];
pub const MBCONV_EXPANSIONS: [u32; 2] = [3, 6];
pub const BOTTLENECK_EXPANSION: u32 = 4;

impl OperationKind {
    pub fn mbconv(kernel: u32, expansion: u32) -> Result<Self> {
        let op = OperationKind::Mbconv { kernel, expansion };
        op.check()?;
        Ok(op)
    }

    pub fn bottleneck() -> Self {
        OperationKind::ResnetBottleneck {
            expansion: BOTTLENECK_EXPANSION,
        }
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            OperationKind::Mbconv { kernel, expansion } => {
                if !MBCONV_KERNELS.contains(&kernel) {
                    return Err(Error::InvalidOperation(format!(
                        "MBConv kernel {kernel} not in {MBCONV_KERNELS:?}"
                    )));
                }
                if !MBCONV_EXPANSIONS.contains(&expansion) {
                    return Err(Error::InvalidOperation(format!(
                        "MBConv expansion {expansion} not in {MBCONV_EXPANSIONS:?}"
                    )));
                }
                Ok(())
            }
            OperationKind::ResnetBottleneck { expansion } if expansion != BOTTLENECK_EXPANSION => {
                Err(Error::InvalidOperation(format!(
                    "bottleneck expansion must be {BOTTLENECK_EXPANSION}, got {expansion}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, OperationKind::Skip)
    }

    /// Token used in cost-table CSV files.
    pub fn token(&self) -> &'static str {
        match self {
            OperationKind::Mbconv { .. } => "mbconv",
            OperationKind::Skip => "skip",
            OperationKind::ResnetBasic => "resnet_basic",
            OperationKind::ResnetBottleneck { .. } => "resnet_bottleneck",
        }
    }

    pub fn kernel(&self) -> Option<u32> {
        match *self {
            OperationKind::Mbconv { kernel, .. } => Some(kernel),
            OperationKind::ResnetBasic | OperationKind::ResnetBottleneck { .. } => Some(3),
            OperationKind::Skip => None,
        }
    }

    pub fn expansion(&self) -> Option<u32> {
        match *self {
            OperationKind::Mbconv { expansion, .. } => Some(expansion),
            OperationKind::ResnetBottleneck { expansion } => Some(expansion),
            _ => None,
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperationKind::Mbconv { kernel, expansion } => write!(f, "mbconv_k{kernel}_e{expansion}"),
            OperationKind::Skip => f.write_str("skip"),
            OperationKind::ResnetBasic => f.write_str("resnet_basic"),
            OperationKind::ResnetBottleneck { expansion } => write!(f, "resnet_bottleneck_e{expansion}"),
        }
    }
}

/// A searchable layer: an ordered, duplicate-free set of candidate operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub candidates: Vec<OperationKind>,
    pub allow_skip: bool,
}

impl LayerSpec {
    pub fn new(candidates: Vec<OperationKind>, allow_skip: bool) -> Result<Self> {
        let layer = LayerSpec {
            candidates,
            allow_skip,
        };
        match layer.problems().into_iter().next() {
            Some(problem) => Err(Error::InvalidOperation(problem)),
            None => Ok(layer),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.candidates.is_empty() {
            out.push("layer has no candidate operations".to_string());
        }
        let mut seen = BTreeSet::new();
        for op in &self.candidates {
            if let Err(e) = op.check() {
                out.push(e.to_string());
            }
            if !seen.insert(*op) {
                out.push(format!("duplicate candidate {op}"));
            }
            if op.is_skip() && !self.allow_skip {
                out.push("skip connection in a layer that excludes it".to_string());
            }
        }
        out
    }
}

/// Which family of candidate operations the space searches over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateSet {
    #[serde(rename = "mbconv")]
    Mbconv,
    #[serde(rename = "resnet-basic")]
    ResnetBasic,
    #[serde(rename = "resnet-bottleneck")]
    ResnetBottleneck,
}

impl CandidateSet {
    fn searchable_ops(self) -> Vec<OperationKind> {
        match self {
            CandidateSet::Mbconv => MBCONV_KERNELS
                .iter()
                .flat_map(|&kernel| {
                    MBCONV_EXPANSIONS
                        .iter()
                        .map(move |&expansion| OperationKind::Mbconv { kernel, expansion })
                })
                .collect(),
            CandidateSet::ResnetBasic => vec![OperationKind::ResnetBasic],
            CandidateSet::ResnetBottleneck => vec![OperationKind::bottleneck()],
        }
    }

    /// Candidates of a basic layer: the searchable operations plus skip.
    pub fn basic_layer(self) -> LayerSpec {
        let mut candidates = self.searchable_ops();
        candidates.push(OperationKind::Skip);
        LayerSpec {
            candidates,
            allow_skip: true,
        }
    }

    /// Candidates of a shape-alignment branch (never skip).
    pub fn alignment_layer(self) -> LayerSpec {
        LayerSpec {
            candidates: self.searchable_ops(),
            allow_skip: false,
        }
    }

    pub fn default_head(self) -> HeadSpec {
        match self {
            CandidateSet::Mbconv => HeadSpec {
                conv_width: Some(1280),
                num_classes: 1000,
            },
            _ => HeadSpec {
                conv_width: None,
                num_classes: 1000,
            },
        }
    }
}

/// Fixed input convolution (node 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: u32,
    pub width: u32,
    pub stride: u32,
}

/// Classifier head applied after the last retained block: an optional 1x1
/// convolution, global average pooling and a fully connected layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub conv_width: Option<u32>,
    pub num_classes: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingBlockSpec {
    pub index: usize,
    pub width: u32,
    pub resolution: u32,
    pub num_basic_layers: usize,
    pub stage_id: usize,
}

/// Edge `from -> to`. Edges into the ending block carry no alignment layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub from: usize,
    pub to: usize,
    pub stride: u32,
    pub alignment: Option<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperNetworkSpec {
    pub input_resolution: u32,
    pub stem: StemSpec,
    pub head: HeadSpec,
    pub blocks: Vec<RoutingBlockSpec>,
    pub connections: Vec<ConnectionSpec>,
    pub max_connections: usize,
    pub basic_layer: LayerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub resolution: u32,
    pub widths: Vec<u32>,
    /// Overrides the space-wide layer count for blocks of this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_basic_layers: Option<usize>,
}

fn default_layers() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub input_resolution: u32,
    pub stem_width: u32,
    pub stages: Vec<StageConfig>,
    pub max_connections: usize,
    #[serde(default = "default_layers")]
    pub num_basic_layers: usize,
    pub candidate_set: CandidateSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
}

pub const STEM_KERNEL: u32 = 3;
pub const STEM_STRIDE: u32 = 2;

/// Identifies one searchable layer of the super network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerRef {
    Basic { block: usize, slot: usize },
    Align { from: usize, to: usize },
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerRef::Basic { block, slot } => write!(f, "block{block}/layer{slot}"),
            LayerRef::Align { from, to } => write!(f, "align/{from}->{to}"),
        }
    }
}

impl std::str::FromStr for LayerRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse {
            context: "layer key".into(),
            message: format!("malformed layer key {s:?}"),
        };
        if let Some(rest) = s.strip_prefix("align/") {
            let (from, to) = parse_edge_key(rest).ok_or_else(bad)?;
            return Ok(LayerRef::Align { from, to });
        }
        let rest = s.strip_prefix("block").ok_or_else(bad)?;
        let (block, slot) = rest.split_once("/layer").ok_or_else(bad)?;
        Ok(LayerRef::Basic {
            block: block.parse().map_err(|_| bad())?,
            slot: slot.parse().map_err(|_| bad())?,
        })
    }
}

pub(crate) fn parse_edge_key(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once("->")?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Index tables derived from a spec: the flat layer order used by
/// [`crate::params::ArchParams`] and adjacency lists.
///
/// Layers are ordered block by block; within a block the alignment branches
/// (ascending source) come before the basic layers.
#[derive(Clone, Debug)]
pub struct Layout {
    pub layers: Vec<LayerRef>,
    /// Alignment layer id of each connection, `None` for edges into the ending block.
    pub edge_layer: Vec<Option<usize>>,
    /// Basic layer ids of each node, indexed `0..=N+1` (stem and end are empty).
    pub node_layers: Vec<Vec<usize>>,
    pub outgoing: Vec<Vec<usize>>,
    pub incoming: Vec<Vec<usize>>,
}

impl Layout {
    pub fn layer_index(&self, layer: LayerRef) -> Option<usize> {
        self.layers.iter().position(|l| *l == layer)
    }
}

impl SuperNetworkSpec {
    /// Number of routing blocks `N`.
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Index of the virtual ending block, `N + 1`.
    pub fn end_node(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn stem_resolution(&self) -> u32 {
        self.input_resolution / self.stem.stride
    }

    pub fn block(&self, index: usize) -> &RoutingBlockSpec {
        &self.blocks[index - 1]
    }

    /// Output width of node `i` (stem or block). The ending block has none.
    pub fn node_width(&self, node: usize) -> Option<u32> {
        match node {
            0 => Some(self.stem.width),
            i if i <= self.n_blocks() => Some(self.block(i).width),
            _ => None,
        }
    }

    pub fn node_resolution(&self, node: usize) -> u32 {
        match node {
            0 => self.stem_resolution(),
            i if i <= self.n_blocks() => self.block(i).resolution,
            _ => self.blocks.last().map_or(self.stem_resolution(), |b| b.resolution),
        }
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.connections
            .iter()
            .position(|c| c.from == from && c.to == to)
    }

    /// Layer spec for a layer reference, if it exists in this space.
    pub fn layer_spec(&self, layer: LayerRef) -> Option<&LayerSpec> {
        match layer {
            LayerRef::Basic { block, slot } => {
                (block >= 1 && block <= self.n_blocks() && slot < self.block(block).num_basic_layers)
                    .then_some(&self.basic_layer)
            }
            LayerRef::Align { from, to } => self
                .edge_index(from, to)
                .and_then(|e| self.connections[e].alignment.as_ref()),
        }
    }

    pub fn layout(&self) -> Layout {
        let nodes = self.n_blocks() + 2;
        let mut outgoing = vec![Vec::new(); nodes];
        let mut incoming = vec![Vec::new(); nodes];
        for (e, c) in self.connections.iter().enumerate() {
            if c.from < nodes && c.to < nodes {
                outgoing[c.from].push(e);
                incoming[c.to].push(e);
            }
        }
        for list in outgoing.iter_mut() {
            list.sort_by_key(|&e| self.connections[e].to);
        }
        for list in incoming.iter_mut() {
            list.sort_by_key(|&e| self.connections[e].from);
        }

        let mut layers = Vec::new();
        let mut edge_layer = vec![None; self.connections.len()];
        let mut node_layers = vec![Vec::new(); nodes];
        for block in &self.blocks {
            for &e in &incoming[block.index] {
                let c = &self.connections[e];
                if c.alignment.is_some() {
                    edge_layer[e] = Some(layers.len());
                    layers.push(LayerRef::Align {
                        from: c.from,
                        to: c.to,
                    });
                }
            }
            for slot in 0..block.num_basic_layers {
                node_layers[block.index].push(layers.len());
                layers.push(LayerRef::Basic {
                    block: block.index,
                    slot,
                });
            }
        }
        Layout {
            layers,
            edge_layer,
            node_layers,
            outgoing,
            incoming,
        }
    }

    /// Canonical JSON (sorted keys, trailing newline).
    pub fn to_canonical_json(&self) -> Result<String> {
        crate::util::canonical_json(self)
    }

    pub fn content_hash(&self) -> Result<String> {
        crate::util::content_hash(self)
    }
}

/// All connections permitted by the constraints, as `(from, to, stride)`,
/// sorted by `(from, to)`.
fn permitted_connections(
    stem_resolution: u32,
    blocks: &[RoutingBlockSpec],
    max_connections: usize,
) -> Vec<(usize, usize, u32)> {
    let n = blocks.len();
    let res = |i: usize| {
        if i == 0 {
            stem_resolution
        } else {
            blocks[i - 1].resolution
        }
    };
    let last_stage = blocks.last().map(|b| b.stage_id);
    let mut out = Vec::new();
    for from in 0..=n {
        for to in from + 1..=n {
            if to - from > max_connections {
                break;
            }
            let (rf, rt) = (res(from), res(to));
            if rt > 0 && rf >= rt && rf % rt == 0 && rf / rt <= 2 {
                out.push((from, to, rf / rt));
            }
        }
        let is_final_stage = from >= 1 && Some(blocks[from - 1].stage_id) == last_stage;
        if is_final_stage && n + 1 - from <= max_connections {
            out.push((from, n + 1, 1));
        }
    }
    out
}

/// Builds and validates the super network described by `config`.
pub fn build_super_network(config: &SpaceConfig) -> Result<SuperNetworkSpec> {
    let bad = |msg: String| Err(Error::Config(msg));
    if config.max_connections < 1 {
        return bad(format!(
            "max_connections must be at least 1 (got {})",
            config.max_connections
        ));
    }
    if config.stages.is_empty() {
        return bad("at least one stage is required".into());
    }
    if config.stem_width == 0 {
        return bad("stem_width must be positive".into());
    }
    if config.input_resolution == 0 || !config.input_resolution.is_multiple_of(STEM_STRIDE) {
        return bad(format!(
            "input_resolution {} is not divisible by the stem stride {STEM_STRIDE}",
            config.input_resolution
        ));
    }
    let stem_resolution = config.input_resolution / STEM_STRIDE;

    let mut blocks = Vec::new();
    let mut prev_res = stem_resolution;
    let mut prev_width: Option<(usize, u32)> = None;
    for (stage_id, stage) in config.stages.iter().enumerate() {
        if stage.widths.is_empty() {
            return bad(format!("stage {stage_id} has no blocks"));
        }
        let res = stage.resolution;
        if !is_power_of_two_fraction(config.input_resolution, res) {
            return bad(format!(
                "stage {stage_id} resolution {res} is not a power-of-two fraction of {}",
                config.input_resolution
            ));
        }
        let limit = if stage_id == 0 { 1 } else { 2 };
        if res > prev_res || prev_res / res > 2 || (stage_id > 0 && prev_res / res < limit) {
            let what = if stage_id == 0 { "stem" } else { "previous stage" };
            return bad(format!(
                "stage {stage_id}: resolution {prev_res} -> {res} after {what}; consecutive stages must halve the resolution (jump at most 2x)"
            ));
        }
        let layers = stage.num_basic_layers.unwrap_or(config.num_basic_layers);
        if layers == 0 {
            return bad(format!("stage {stage_id}: num_basic_layers must be positive"));
        }
        for &width in &stage.widths {
            let index = blocks.len() + 1;
            if width == 0 {
                return bad(format!("block {index} has zero width"));
            }
            if let Some((pi, pw)) = prev_width {
                if width < pw {
                    return bad(format!(
                        "width schedule decreases from block {pi} ({pw}) to block {index} ({width})"
                    ));
                }
            }
            prev_width = Some((index, width));
            blocks.push(RoutingBlockSpec {
                index,
                width,
                resolution: res,
                num_basic_layers: layers,
                stage_id,
            });
        }
        prev_res = res;
    }

    let alignment = config.candidate_set.alignment_layer();
    let n = blocks.len();
    let connections = permitted_connections(stem_resolution, &blocks, config.max_connections)
        .into_iter()
        .map(|(from, to, stride)| ConnectionSpec {
            from,
            to,
            stride,
            alignment: (to <= n).then(|| alignment.clone()),
        })
        .collect();

    let spec = SuperNetworkSpec {
        input_resolution: config.input_resolution,
        stem: StemSpec {
            kernel: STEM_KERNEL,
            width: config.stem_width,
            stride: STEM_STRIDE,
        },
        head: config
            .head
            .unwrap_or_else(|| config.candidate_set.default_head()),
        blocks,
        connections,
        max_connections: config.max_connections,
        basic_layer: config.candidate_set.basic_layer(),
    };
    let report = validate(&spec);
    if !report.is_valid() {
        return Err(Error::Validation(report.violations));
    }
    Ok(spec)
}

fn is_power_of_two_fraction(input: u32, res: u32) -> bool {
    res > 0 && input.is_multiple_of(res) && (input / res).is_power_of_two()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Layer,
    BlockIndex,
    Width,
    Resolution,
    Stage,
    EdgeDirection,
    EdgeDistance,
    EdgeResolution,
    EdgeStride,
    EdgeAlignment,
    EndConnection,
    DuplicateEdge,
    MissingEdge,
    UnexpectedEdge,
    NoOutgoing,
    NoIncoming,
    MaxConnections,
    Stem,
    Architecture,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }
}

/// Checks every structural invariant of `spec` and reports each violation.
pub fn validate(spec: &SuperNetworkSpec) -> ValidationReport {
    use ViolationKind::*;

    let mut report = ValidationReport::default();
    let m = spec.max_connections;
    if m < 1 {
        report.push(MaxConnections, "max_connections must be at least 1".into());
    }
    if spec.stem.width == 0 || spec.stem.stride == 0 {
        report.push(Stem, "stem width and stride must be positive".into());
    } else if !spec.input_resolution.is_multiple_of(spec.stem.stride) {
        report.push(Stem, "input resolution not divisible by stem stride".into());
    }
    for p in spec.basic_layer.problems() {
        report.push(Layer, format!("basic layer: {p}"));
    }

    for (k, block) in spec.blocks.iter().enumerate() {
        if block.index != k + 1 {
            report.push(
                BlockIndex,
                format!("block at position {} has index {}", k + 1, block.index),
            );
        }
        if block.width == 0 {
            report.push(Width, format!("block {} has zero width", block.index));
        }
        if block.num_basic_layers == 0 {
            report.push(Layer, format!("block {} has no basic layers", block.index));
        }
        if !is_power_of_two_fraction(spec.input_resolution, block.resolution) {
            report.push(
                Resolution,
                format!(
                    "block {} resolution {} is not a power-of-two fraction of {}",
                    block.index, block.resolution, spec.input_resolution
                ),
            );
        }
    }
    for pair in spec.blocks.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.width < a.width {
            report.push(
                Width,
                format!(
                    "width decreases from block {} ({}) to block {} ({})",
                    a.index, a.width, b.index, b.width
                ),
            );
        }
        if b.stage_id < a.stage_id {
            report.push(
                Stage,
                format!("stage ids not contiguous at blocks {} and {}", a.index, b.index),
            );
        } else if b.stage_id == a.stage_id && b.resolution != a.resolution {
            report.push(
                Stage,
                format!(
                    "blocks {} and {} share stage {} but have resolutions {} and {}",
                    a.index, b.index, a.stage_id, a.resolution, b.resolution
                ),
            );
        } else if b.stage_id != a.stage_id && b.resolution >= a.resolution {
            report.push(
                Resolution,
                format!(
                    "resolution does not decrease between stages at blocks {} ({}) and {} ({})",
                    a.index, a.resolution, b.index, b.resolution
                ),
            );
        }
    }

    let n = spec.n_blocks();
    let end = n + 1;
    let last_stage = spec.blocks.last().map(|b| b.stage_id);
    let mut seen = BTreeSet::new();
    let mut flagged = BTreeSet::new();
    let mut out_count = vec![0usize; n + 2];
    let mut in_count = vec![0usize; n + 2];
    for c in &spec.connections {
        let id = format!("edge ({}, {})", c.from, c.to);
        if !seen.insert((c.from, c.to)) {
            report.push(DuplicateEdge, format!("{id} listed twice"));
            continue;
        }
        if c.to <= c.from || c.to > end {
            report.push(EdgeDirection, format!("{id} does not point forward to a known block"));
            flagged.insert((c.from, c.to));
            continue;
        }
        out_count[c.from] += 1;
        in_count[c.to] += 1;
        let mut bad = false;
        if c.to - c.from > m {
            report.push(
                EdgeDistance,
                format!("{id} spans {} blocks, exceeding M = {m}", c.to - c.from),
            );
            bad = true;
        }
        if c.to == end {
            if c.from == 0 || Some(spec.block(c.from).stage_id) != last_stage {
                report.push(
                    EndConnection,
                    format!("{id}: only final-stage blocks may connect to the ending block"),
                );
                bad = true;
            }
            if c.stride != 1 {
                report.push(EdgeStride, format!("{id}: edges into the ending block have stride 1"));
                bad = true;
            }
            if c.alignment.is_some() {
                report.push(
                    EdgeAlignment,
                    format!("{id}: the virtual ending block has no alignment layer"),
                );
                bad = true;
            }
        } else {
            let (rf, rt) = (spec.node_resolution(c.from), spec.node_resolution(c.to));
            if rt == 0 || rf < rt || rf % rt != 0 || rf / rt > 2 {
                report.push(
                    EdgeResolution,
                    format!("{id}: resolution ratio {rf}/{rt} outside {{1, 2}}"),
                );
                bad = true;
            } else if c.stride != rf / rt {
                report.push(
                    EdgeStride,
                    format!("{id}: stride {} but resolution ratio is {}", c.stride, rf / rt),
                );
                bad = true;
            }
            match &c.alignment {
                None => {
                    report.push(EdgeAlignment, format!("{id} has no alignment layer"));
                    bad = true;
                }
                Some(layer) => {
                    if layer.allow_skip {
                        report.push(EdgeAlignment, format!("{id}: alignment layer allows skip"));
                        bad = true;
                    }
                    for p in layer.problems() {
                        report.push(EdgeAlignment, format!("{id}: {p}"));
                        bad = true;
                    }
                }
            }
        }
        if bad {
            flagged.insert((c.from, c.to));
        }
    }

    let expected: BTreeSet<(usize, usize)> =
        permitted_connections(spec.stem_resolution(), &spec.blocks, m.max(1))
            .into_iter()
            .map(|(f, t, _)| (f, t))
            .collect();
    for &(f, t) in expected.difference(&seen) {
        report.push(
            MissingEdge,
            format!("edge ({f}, {t}) is permitted by the constraints but absent"),
        );
    }
    for &(f, t) in seen.difference(&expected) {
        if !flagged.contains(&(f, t)) {
            report.push(UnexpectedEdge, format!("edge ({f}, {t}) is not permitted"));
        }
    }
    for node in 0..=n {
        if out_count[node] == 0 {
            report.push(NoOutgoing, format!("block {node} has no outgoing connection"));
        }
    }
    for node in 1..=end {
        if in_count[node] == 0 {
            report.push(NoIncoming, format!("block {node} has no incoming connection"));
        }
    }
    report
}
