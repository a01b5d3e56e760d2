//! Cost accounting: analytic FLOPs and parameter counts, lookup tables,
//! expected per-layer cost, the chained expected-cost recursion with its
//! gradients, the local estimator, exact costs of derived architectures and
//! the cost-regularized loss.
//!
//! One multiply-accumulate counts as one FLOP. Normalization, activations,
//! pooling and residual additions are free.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::derive::DerivedArchitecture;
use crate::error::{Error, Result};
use crate::params::{edge_probs, ArchParams};
use crate::space::{HeadSpec, Layout, LayerRef, OperationKind, SuperNetworkSpec};
use crate::util::softmax_unchecked;

/// The operation a cost entry refers to: a searchable candidate or one of
/// the fixed layers (stem convolution, classifier).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostOp {
    Candidate(OperationKind),
    /// Plain dense `kernel x kernel` convolution.
    Conv { kernel: u32 },
    /// Fully connected layer (with bias).
    Linear,
}

/// An operation together with the tensor shape it is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "SignatureRecord", into = "SignatureRecord")]
pub struct OpSignature {
    pub op: CostOp,
    pub c_in: u32,
    pub c_out: u32,
    pub res_in: u32,
    pub stride: u32,
}

impl OpSignature {
    pub fn candidate(op: OperationKind, c_in: u32, c_out: u32, res_in: u32, stride: u32) -> Self {
        OpSignature {
            op: CostOp::Candidate(op),
            c_in,
            c_out,
            res_in,
            stride,
        }
    }

    pub fn conv(kernel: u32, c_in: u32, c_out: u32, res_in: u32, stride: u32) -> Self {
        OpSignature {
            op: CostOp::Conv { kernel },
            c_in,
            c_out,
            res_in,
            stride,
        }
    }

    pub fn linear(c_in: u32, c_out: u32) -> Self {
        OpSignature {
            op: CostOp::Linear,
            c_in,
            c_out,
            res_in: 1,
            stride: 1,
        }
    }

    pub fn res_out(&self) -> u32 {
        self.res_in / self.stride.max(1)
    }

    pub fn is_skip(&self) -> bool {
        matches!(self.op, CostOp::Candidate(OperationKind::Skip))
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidOperation(format!("{self}: {msg}")));
        if let CostOp::Candidate(op) = self.op {
            op.check()?;
        }
        if self.c_in == 0 || self.c_out == 0 {
            return bad("channels must be positive".into());
        }
        if !(1..=2).contains(&self.stride) {
            return bad("stride must be 1 or 2".into());
        }
        if self.res_in == 0 || !self.res_in.is_multiple_of(self.stride) {
            return bad("input resolution must be positive and divisible by the stride".into());
        }
        match self.op {
            CostOp::Conv { kernel: 0 } => bad("kernel must be positive".into()),
            CostOp::Candidate(OperationKind::ResnetBottleneck { expansion })
                if !self.c_out.is_multiple_of(expansion) =>
            {
                bad(format!("output width not divisible by expansion {expansion}"))
            }
            CostOp::Candidate(OperationKind::Skip) if self.c_in != self.c_out || self.stride != 1 => {
                bad("skip connection cannot change shape".into())
            }
            _ => Ok(()),
        }
    }

    fn record(&self) -> SignatureRecord {
        let (kind, kernel, expansion) = match self.op {
            CostOp::Candidate(op) => (op.token(), op.kernel(), op.expansion()),
            CostOp::Conv { kernel } => ("conv", Some(kernel), None),
            CostOp::Linear => ("linear", None, None),
        };
        SignatureRecord {
            kind: kind.to_string(),
            kernel,
            expansion,
            c_in: self.c_in,
            c_out: self.c_out,
            res_in: self.res_in,
            stride: self.stride,
        }
    }
}

impl fmt::Display for OpSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            CostOp::Candidate(op) => op.to_string(),
            CostOp::Conv { kernel } => format!("conv{kernel}x{kernel}"),
            CostOp::Linear => "linear".to_string(),
        };
        write!(
            f,
            "{op}(c_in={}, c_out={}, res_in={}, stride={})",
            self.c_in, self.c_out, self.res_in, self.stride
        )
    }
}

/// Flat record form used by both the CSV tables and JSON descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SignatureRecord {
    kind: String,
    kernel: Option<u32>,
    expansion: Option<u32>,
    c_in: u32,
    c_out: u32,
    res_in: u32,
    stride: u32,
}

impl TryFrom<SignatureRecord> for OpSignature {
    type Error = Error;

    fn try_from(r: SignatureRecord) -> Result<Self> {
        let need = |field: Option<u32>, name: &str| {
            field.ok_or_else(|| Error::Parse {
                context: "operation signature".into(),
                message: format!("kind {} requires {name}", r.kind),
            })
        };
        let op = match r.kind.as_str() {
            "mbconv" => CostOp::Candidate(OperationKind::mbconv(
                need(r.kernel, "kernel")?,
                need(r.expansion, "expansion")?,
            )?),
            "skip" => CostOp::Candidate(OperationKind::Skip),
            "resnet_basic" => CostOp::Candidate(OperationKind::ResnetBasic),
            "resnet_bottleneck" => {
                let op = OperationKind::ResnetBottleneck {
                    expansion: r.expansion.unwrap_or(crate::space::BOTTLENECK_EXPANSION),
                };
                op.check()?;
                CostOp::Candidate(op)
            }
            "conv" => CostOp::Conv {
                kernel: need(r.kernel, "kernel")?,
            },
            "linear" => CostOp::Linear,
            other => {
                return Err(Error::Parse {
                    context: "operation signature".into(),
                    message: format!("unknown kind {other:?}"),
                })
            }
        };
        let sig = OpSignature {
            op,
            c_in: r.c_in,
            c_out: r.c_out,
            res_in: r.res_in,
            stride: r.stride,
        };
        sig.check()?;
        Ok(sig)
    }
}

impl From<OpSignature> for SignatureRecord {
    fn from(sig: OpSignature) -> Self {
        sig.record()
    }
}

fn conv_macs(kernel: u64, c_in: u64, c_out: u64, res_out: u64) -> u64 {
    kernel * kernel * c_in * c_out * res_out * res_out
}

/// Multiply-accumulate count of one operation.
pub fn flops_of(sig: &OpSignature) -> Result<f64> {
    sig.check()?;
    let (ci, co) = (sig.c_in as u64, sig.c_out as u64);
    let (ri, ro) = (sig.res_in as u64, sig.res_out() as u64);
    let shape_change = ci != co || sig.stride != 1;
    let macs = match sig.op {
        CostOp::Conv { kernel } => conv_macs(kernel as u64, ci, co, ro),
        CostOp::Linear => ci * co,
        CostOp::Candidate(op) => match op {
            OperationKind::Skip => 0,
            OperationKind::Mbconv { kernel, expansion } => {
                let hidden = ci * expansion as u64;
                let expand = conv_macs(1, ci, hidden, ri);
                let depthwise = conv_macs(kernel as u64, 1, hidden, ro);
                let project = conv_macs(1, hidden, co, ro);
                expand + depthwise + project
            }
            OperationKind::ResnetBasic => {
                let mut m = conv_macs(3, ci, co, ro) + conv_macs(3, co, co, ro);
                if shape_change {
                    m += conv_macs(1, ci, co, ro);
                }
                m
            }
            OperationKind::ResnetBottleneck { expansion } => {
                let mid = co / expansion as u64;
                // Stride sits on the 3x3 convolution.
                let mut m = conv_macs(1, ci, mid, ri) + conv_macs(3, mid, mid, ro) + conv_macs(1, mid, co, ro);
                if shape_change {
                    m += conv_macs(1, ci, co, ro);
                }
                m
            }
        },
    };
    Ok(macs as f64)
}

/// Weight count of one operation. Convolution biases are omitted (they are
/// followed by normalization); the fully connected layer keeps its bias.
pub fn params_of(sig: &OpSignature) -> Result<u64> {
    sig.check()?;
    let (ci, co) = (sig.c_in as u64, sig.c_out as u64);
    let shape_change = ci != co || sig.stride != 1;
    let conv = |k: u64, a: u64, b: u64| k * k * a * b;
    Ok(match sig.op {
        CostOp::Conv { kernel } => conv(kernel as u64, ci, co),
        CostOp::Linear => ci * co + co,
        CostOp::Candidate(op) => match op {
            OperationKind::Skip => 0,
            OperationKind::Mbconv { kernel, expansion } => {
                let hidden = ci * expansion as u64;
                ci * hidden + (kernel as u64).pow(2) * hidden + hidden * co
            }
            OperationKind::ResnetBasic => {
                conv(3, ci, co) + conv(3, co, co) + if shape_change { ci * co } else { 0 }
            }
            OperationKind::ResnetBottleneck { expansion } => {
                let mid = co / expansion as u64;
                ci * mid + conv(3, mid, mid) + mid * co + if shape_change { ci * co } else { 0 }
            }
        },
    })
}

/// A plain list of operations, e.g. a hand-written reference network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub name: String,
    pub layers: Vec<OpSignature>,
}

impl NetworkDescription {
    pub fn flops(&self) -> Result<f64> {
        self.layers.iter().map(flops_of).sum()
    }

    pub fn params(&self) -> Result<u64> {
        self.layers.iter().map(params_of).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostUnit {
    Flops,
    Milliseconds,
}

impl CostUnit {
    fn column(self) -> &'static str {
        match self {
            CostUnit::Flops => "cost_flops",
            CostUnit::Milliseconds => "cost_ms",
        }
    }
}

/// Lookup table from operation signature to a non-negative cost.
///
/// Skip connections always cost zero and need no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub unit: CostUnit,
    entries: HashMap<OpSignature, f64>,
}

const CSV_COLUMNS: [&str; 7] = ["kind", "kernel", "expansion", "c_in", "c_out", "res_in", "stride"];

impl CostTable {
    pub fn new(unit: CostUnit) -> Self {
        CostTable {
            unit,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, sig: OpSignature, cost: f64) -> Result<()> {
        if !cost.is_finite() || cost < 0.0 {
            return Err(Error::InvalidOperation(format!("cost {cost} for {sig} is not a non-negative number")));
        }
        self.entries.insert(sig, cost);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sig: &OpSignature) -> Option<f64> {
        if sig.is_skip() {
            return Some(0.0);
        }
        self.entries.get(sig).copied()
    }

    /// Looks up every signature, reporting all missing ones together.
    pub fn lookup_all<'a>(&self, sigs: impl IntoIterator<Item = &'a OpSignature>) -> Result<Vec<f64>> {
        let mut missing = BTreeSet::new();
        let mut out = Vec::new();
        for sig in sigs {
            match self.get(sig) {
                Some(c) => out.push(c),
                None => {
                    missing.insert(*sig);
                    out.push(f64::NAN);
                }
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingCost(missing.into_iter().collect()))
        }
    }

    /// FLOPs table covering every signature that estimation over `spec` can query.
    pub fn analytic_flops(spec: &SuperNetworkSpec) -> Result<Self> {
        let mut table = CostTable::new(CostUnit::Flops);
        for sig in spec_signatures(spec) {
            if !sig.is_skip() {
                table.insert(sig, flops_of(&sig)?)?;
            }
        }
        Ok(table)
    }

    /// Analytic FLOPs for an explicit list of signatures.
    pub fn analytic_flops_for<'a>(sigs: impl IntoIterator<Item = &'a OpSignature>) -> Result<Self> {
        let mut table = CostTable::new(CostUnit::Flops);
        for sig in sigs {
            if !sig.is_skip() {
                table.insert(*sig, flops_of(sig)?)?;
            }
        }
        Ok(table)
    }

    /// Reads a CSV table. The last header column names the unit:
    /// `cost_ms` for latency, `cost_flops` for FLOPs.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let parse = |message: String| Error::Parse {
            context: "cost table".into(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| parse(e.to_string()))?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let unit = match cols.last() {
            Some(&"cost_ms") => CostUnit::Milliseconds,
            Some(&"cost_flops") => CostUnit::Flops,
            _ => return Err(parse(format!("unexpected header {cols:?}"))),
        };
        if cols.len() != 8 || cols[..7] != CSV_COLUMNS {
            return Err(parse(format!(
                "header must be {},{}; got {}",
                CSV_COLUMNS.join(","),
                unit.column(),
                cols.join(",")
            )));
        }
        let mut table = CostTable::new(unit);
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| parse(e.to_string()))?;
            let at = |msg: String| parse(format!("row {}: {msg}", line + 2));
            let opt = |i: usize| -> Result<Option<u32>> {
                let s = &row[i];
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| at(format!("bad {} {s:?}", CSV_COLUMNS[i])))
                }
            };
            let req = |i: usize| -> Result<u32> {
                opt(i)?.ok_or_else(|| at(format!("missing {}", CSV_COLUMNS[i])))
            };
            let record = SignatureRecord {
                kind: row[0].to_string(),
                kernel: opt(1)?,
                expansion: opt(2)?,
                c_in: req(3)?,
                c_out: req(4)?,
                res_in: req(5)?,
                stride: req(6)?,
            };
            let sig = OpSignature::try_from(record).map_err(|e| at(e.to_string()))?;
            let cost: f64 = row[7].parse().map_err(|_| at(format!("bad cost {:?}", &row[7])))?;
            table.insert(sig, cost).map_err(|e| at(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }

    /// Writes the table sorted by signature.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let err = |e: csv::Error| Error::Parse {
            context: "cost table".into(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
        header.push(self.unit.column());
        w.write_record(&header).map_err(err)?;
        let sorted: BTreeMap<&OpSignature, &f64> = self.entries.iter().collect();
        let num = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        for (sig, cost) in sorted {
            let r = sig.record();
            w.write_record([
                r.kind,
                num(r.kernel),
                num(r.expansion),
                r.c_in.to_string(),
                r.c_out.to_string(),
                r.res_in.to_string(),
                r.stride.to_string(),
                cost.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("cost table", e))?;
        Ok(())
    }
}

pub fn stem_signature(spec: &SuperNetworkSpec) -> OpSignature {
    OpSignature::conv(spec.stem.kernel, 3, spec.stem.width, spec.input_resolution, spec.stem.stride)
}

/// Classifier head applied to a `c_in`-channel feature map at `res`.
pub fn head_signatures(head: &HeadSpec, c_in: u32, res: u32) -> Vec<OpSignature> {
    let mut out = Vec::new();
    let mut features = c_in;
    if let Some(width) = head.conv_width {
        out.push(OpSignature::conv(1, c_in, width, res, 1));
        features = width;
    }
    out.push(OpSignature::linear(features, head.num_classes));
    out
}

/// Signature of each candidate of `layer`, in candidate order.
pub fn layer_signatures(spec: &SuperNetworkSpec, layer: LayerRef) -> Vec<OpSignature> {
    let Some(layer_spec) = spec.layer_spec(layer) else {
        return Vec::new();
    };
    let (c_in, c_out, res_in, stride) = match layer {
        LayerRef::Basic { block, .. } => {
            let b = spec.block(block);
            (b.width, b.width, b.resolution, 1)
        }
        LayerRef::Align { from, to } => {
            let stride = spec.node_resolution(from) / spec.node_resolution(to);
            (
                spec.node_width(from).unwrap_or(0),
                spec.node_width(to).unwrap_or(0),
                spec.node_resolution(from),
                stride,
            )
        }
    };
    layer_spec
        .candidates
        .iter()
        .map(|&op| OpSignature::candidate(op, c_in, c_out, res_in, stride))
        .collect()
}

/// Every signature that estimation over `spec` may look up.
pub fn spec_signatures(spec: &SuperNetworkSpec) -> BTreeSet<OpSignature> {
    let mut out = BTreeSet::new();
    out.insert(stem_signature(spec));
    for layer in spec.layout().layers {
        out.extend(layer_signatures(spec, layer));
    }
    let end = spec.end_node();
    for c in spec.connections.iter().filter(|c| c.to == end) {
        let width = spec.node_width(c.from).unwrap_or(0);
        out.extend(head_signatures(&spec.head, width, spec.node_resolution(c.from)));
    }
    out
}

/// Per-candidate values attached to a super network: costs (or any other
/// additive quantity) of every candidate of every layer, plus fixed
/// contributions at nodes (the stem) and on edges (the head on edges into
/// the ending block).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueModel {
    pub layer_values: Vec<Vec<f64>>,
    pub node_fixed: Vec<f64>,
    pub edge_fixed: Vec<f64>,
}

impl ValueModel {
    pub fn zeros(spec: &SuperNetworkSpec, layout: &Layout) -> Self {
        ValueModel {
            layer_values: layout
                .layers
                .iter()
                .map(|&l| vec![0.0; spec.layer_spec(l).map_or(0, |s| s.len())])
                .collect(),
            node_fixed: vec![0.0; spec.n_blocks() + 2],
            edge_fixed: vec![0.0; spec.connections.len()],
        }
    }

    /// Looks up every cost `spec` needs in `table`; all missing entries are reported at once.
    pub fn from_table(spec: &SuperNetworkSpec, layout: &Layout, table: &CostTable) -> Result<Self> {
        let mut model = Self::zeros(spec, layout);
        let mut missing = BTreeSet::new();
        let mut look = |sig: &OpSignature| match table.get(sig) {
            Some(c) => c,
            None => {
                missing.insert(*sig);
                0.0
            }
        };
        model.node_fixed[0] = look(&stem_signature(spec));
        for (row, &layer) in model.layer_values.iter_mut().zip(&layout.layers) {
            for (v, sig) in row.iter_mut().zip(layer_signatures(spec, layer)) {
                *v = look(&sig);
            }
        }
        let end = spec.end_node();
        for (e, c) in spec.connections.iter().enumerate() {
            if c.to == end {
                let width = spec.node_width(c.from).unwrap_or(0);
                model.edge_fixed[e] = head_signatures(&spec.head, width, spec.node_resolution(c.from))
                    .iter()
                    .map(&mut look)
                    .fold(0.0, |acc, c| acc + c);
            }
        }
        if missing.is_empty() {
            Ok(model)
        } else {
            Err(Error::MissingCost(missing.into_iter().collect()))
        }
    }
}

/// Expected basic cost of one layer: `sum_o w_o * cost_o`.
pub fn layer_cost(weights: &[f64], costs: &[f64]) -> Result<f64> {
    if weights.len() != costs.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            actual: costs.len(),
        });
    }
    Ok(weights.iter().zip(costs).map(|(w, c)| w * c).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEdge {
    pub from: usize,
    pub to: usize,
    pub prob: f64,
    pub align_cost: f64,
}

/// A DAG with per-node basic costs and per-edge (probability, alignment
/// cost) pairs. Nodes are topologically ordered by index; node 0 is the root
/// and nodes without outgoing edges are terminal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostGraph {
    pub node_cost: Vec<f64>,
    pub edges: Vec<CostEdge>,
}

pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

impl CostGraph {
    fn check(&self) -> Result<Vec<Vec<usize>>> {
        let n = self.node_cost.len();
        let mut out = vec![Vec::new(); n];
        let mut sums = vec![0.0; n];
        for (k, e) in self.edges.iter().enumerate() {
            if e.from >= e.to || e.to >= n {
                return Err(Error::InvalidOperation(format!(
                    "edge ({}, {}) is not a forward edge of a {n}-node graph",
                    e.from, e.to
                )));
            }
            out[e.from].push(k);
            sums[e.from] += e.prob;
        }
        for (i, s) in sums.iter().enumerate() {
            if !out[i].is_empty() && (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::NotNormalized { block: i, sum: *s });
            }
        }
        Ok(out)
    }

    /// Chained values `v_i = cost_i + sum_j p_ij * (align_ij + v_j)`, evaluated
    /// in reverse topological order.
    pub fn chained_values(&self) -> Result<Vec<f64>> {
        let out = self.check()?;
        let mut values = self.node_cost.clone();
        for i in (0..values.len()).rev() {
            let mut acc = 0.0;
            for &k in &out[i] {
                let e = &self.edges[k];
                acc += e.prob * (e.align_cost + values[e.to]);
            }
            values[i] += acc;
        }
        Ok(values)
    }

    /// Expected cost of the whole network, the chained value at the root.
    pub fn chained(&self) -> Result<f64> {
        Ok(self.chained_values()?.first().copied().unwrap_or(0.0))
    }

    /// Local estimate: every node's cost counted in full, plus
    /// probability-weighted alignment costs of its incoming edges.
    pub fn local(&self) -> Result<f64> {
        self.check()?;
        let nodes: f64 = self.node_cost.iter().sum();
        let edges: f64 = self.edges.iter().map(|e| e.prob * e.align_cost).sum();
        Ok(nodes + edges)
    }
}

/// Result of the chained recursion over a super network.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainedResult {
    pub total: f64,
    pub graph: CostGraph,
    /// Gradient of `total` w.r.t. every alpha and beta (zeros when not requested).
    pub grad: ArchParams,
}

/// Per-layer candidate subsets used to restrict the operation softmax
/// (dropping-path). `None` means every candidate is active.
pub type OpMask = [Vec<usize>];

fn layer_weights(alpha: &[f64], active: Option<&[usize]>) -> Vec<f64> {
    match active {
        None => softmax_unchecked(alpha),
        Some(idx) => {
            let sub: Vec<f64> = idx.iter().map(|&i| alpha[i]).collect();
            let mut w = vec![0.0; alpha.len()];
            for (&i, p) in idx.iter().zip(softmax_unchecked(&sub)) {
                w[i] = p;
            }
            w
        }
    }
}

/// Chained expectation of the additive quantity `model` under `params`,
/// optionally with reverse-mode gradients.
///
/// With a mask, each layer's operation weights are a softmax over its
/// active candidates only, and inactive candidates receive zero gradient.
pub fn chained_expectation(
    spec: &SuperNetworkSpec,
    layout: &Layout,
    params: &ArchParams,
    model: &ValueModel,
    mask: Option<&OpMask>,
    with_grad: bool,
) -> Result<ChainedResult> {
    params.check_bound(spec)?;
    let probs = edge_probs(spec, params)?;
    let nodes = spec.n_blocks() + 2;

    let weights: Vec<Vec<f64>> = params
        .alpha
        .iter()
        .enumerate()
        .map(|(l, a)| layer_weights(a, mask.map(|m| m[l].as_slice())))
        .collect();
    let expected: Vec<f64> = weights
        .iter()
        .zip(&model.layer_values)
        .map(|(w, c)| layer_cost(w, c))
        .collect::<Result<_>>()?;

    let mut node_cost = model.node_fixed.clone();
    for (i, layers) in layout.node_layers.iter().enumerate() {
        node_cost[i] += layers.iter().map(|&l| expected[l]).sum::<f64>();
    }
    let edges: Vec<CostEdge> = spec
        .connections
        .iter()
        .enumerate()
        .map(|(e, c)| CostEdge {
            from: c.from,
            to: c.to,
            prob: probs[e],
            align_cost: model.edge_fixed[e] + layout.edge_layer[e].map_or(0.0, |l| expected[l]),
        })
        .collect();
    let graph = CostGraph { node_cost, edges };
    let values = graph.chained_values()?;
    let total = values[0];

    let mut grad = params.zeros_like();
    if with_grad {
        // reach[i]: probability that a path from the root visits node i.
        let mut reach = vec![0.0; nodes];
        reach[0] = 1.0;
        for i in 0..nodes {
            for &e in &layout.outgoing[i] {
                reach[spec.connections[e].to] += reach[i] * probs[e];
            }
        }
        let mut layer_scale = vec![0.0; layout.layers.len()];
        for (i, layers) in layout.node_layers.iter().enumerate() {
            for &l in layers {
                layer_scale[l] = reach[i];
            }
        }
        for (i, out) in layout.outgoing.iter().enumerate() {
            if out.is_empty() {
                continue;
            }
            // d total / d p_e, then back through the per-node softmax.
            let g: Vec<f64> = out
                .iter()
                .map(|&e| reach[i] * (graph.edges[e].align_cost + values[graph.edges[e].to]))
                .collect();
            let mean: f64 = out.iter().zip(&g).map(|(&e, gi)| probs[e] * gi).sum();
            for (&e, gi) in out.iter().zip(&g) {
                grad.beta[e] = probs[e] * (gi - mean);
                if let Some(l) = layout.edge_layer[e] {
                    layer_scale[l] = reach[i] * probs[e];
                }
            }
        }
        for l in 0..layout.layers.len() {
            let (w, c, mean) = (&weights[l], &model.layer_values[l], expected[l]);
            for o in 0..w.len() {
                grad.alpha[l][o] = layer_scale[l] * w[o] * (c[o] - mean);
            }
        }
    }
    Ok(ChainedResult { total, graph, grad })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: usize,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCost {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Per-node basic costs and per-edge alignment costs behind a total.
///
/// For the exact estimator `total` is the plain sum of the components; for
/// the expected estimators the components are expectations and `total`
/// combines them with the path probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub estimator: String,
    pub unit: CostUnit,
    pub basic: Vec<NodeCost>,
    pub align: Vec<EdgeCost>,
    pub total: f64,
}

impl CostBreakdown {
    fn from_graph(estimator: &str, unit: CostUnit, graph: &CostGraph, total: f64) -> Self {
        CostBreakdown {
            estimator: estimator.to_string(),
            unit,
            basic: graph
                .node_cost
                .iter()
                .enumerate()
                .map(|(node, &cost)| NodeCost { node, cost })
                .collect(),
            align: graph
                .edges
                .iter()
                .map(|e| EdgeCost {
                    from: e.from,
                    to: e.to,
                    cost: e.align_cost,
                })
                .collect(),
            total,
        }
    }
}

/// Chained expected cost of the relaxed super network (stem and head included).
pub fn chained_cost(
    spec: &SuperNetworkSpec,
    params: &ArchParams,
    table: &CostTable,
) -> Result<(f64, CostBreakdown)> {
    let layout = spec.layout();
    let model = ValueModel::from_table(spec, &layout, table)?;
    let r = chained_expectation(spec, &layout, params, &model, None, false)?;
    let breakdown = CostBreakdown::from_graph("chained", table.unit, &r.graph, r.total);
    Ok((r.total, breakdown))
}

/// Gradient of [`chained_cost`] with respect to every alpha and beta.
pub fn cost_gradients(spec: &SuperNetworkSpec, params: &ArchParams, table: &CostTable) -> Result<ArchParams> {
    let layout = spec.layout();
    let model = ValueModel::from_table(spec, &layout, table)?;
    Ok(chained_expectation(spec, &layout, params, &model, None, true)?.grad)
}

/// Local estimate that ignores how path probabilities compound across blocks.
pub fn local_cost(spec: &SuperNetworkSpec, params: &ArchParams, table: &CostTable) -> Result<(f64, CostBreakdown)> {
    let layout = spec.layout();
    let model = ValueModel::from_table(spec, &layout, table)?;
    let r = chained_expectation(spec, &layout, params, &model, None, false)?;
    let total = r.graph.local()?;
    Ok((total, CostBreakdown::from_graph("local", table.unit, &r.graph, total)))
}

/// Operation signatures of a concrete architecture, grouped as in [`exact_breakdown`].
pub fn architecture_signatures(arch: &DerivedArchitecture) -> Vec<OpSignature> {
    let mut out = vec![arch.stem_signature()];
    for block in &arch.blocks {
        out.push(block.alignment_signature());
        out.extend(block.layer_signatures());
    }
    out.extend(arch.head_signatures());
    out
}

/// Exact cost of a derived architecture: a plain sum over its operations.
pub fn exact_breakdown(arch: &DerivedArchitecture, table: &CostTable) -> Result<CostBreakdown> {
    table.lookup_all(&architecture_signatures(arch))?;
    let cost = |sigs: &[OpSignature]| -> f64 { sigs.iter().fold(0.0, |acc, s| acc + table.get(s).unwrap_or(0.0)) };

    let mut basic = vec![NodeCost {
        node: 0,
        cost: cost(&[arch.stem_signature()]),
    }];
    let mut align = Vec::new();
    for block in &arch.blocks {
        align.push(EdgeCost {
            from: block.from,
            to: block.index,
            cost: cost(&[block.alignment_signature()]),
        });
        basic.push(NodeCost {
            node: block.index,
            cost: cost(&block.layer_signatures()),
        });
    }
    let last = arch.blocks.last().map_or(0, |b| b.index);
    align.push(EdgeCost {
        from: last,
        to: arch.ending_block,
        cost: cost(&arch.head_signatures()),
    });
    let total = basic.iter().map(|b| b.cost).sum::<f64>() + align.iter().map(|a| a.cost).sum::<f64>();
    Ok(CostBreakdown {
        estimator: "exact".into(),
        unit: table.unit,
        basic,
        align,
        total,
    })
}

pub fn exact_cost(arch: &DerivedArchitecture, table: &CostTable) -> Result<f64> {
    Ok(exact_breakdown(arch, table)?.total)
}

/// Analytic FLOPs of a derived architecture, no table needed.
pub fn architecture_flops(arch: &DerivedArchitecture) -> Result<f64> {
    architecture_signatures(arch).iter().map(flops_of).sum()
}

pub fn architecture_params(arch: &DerivedArchitecture) -> Result<u64> {
    architecture_signatures(arch).iter().map(params_of).sum()
}

/// `task_loss + lambda * log_tau(cost)`.
pub fn regularized_loss(task_loss: f64, cost: f64, lambda: f64, tau: f64) -> Result<f64> {
    if !(cost > 0.0) {
        return Err(Error::NonPositive("cost", cost));
    }
    if !(tau > 1.0) {
        return Err(Error::InvalidTau(tau));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative (got {lambda})")));
    }
    Ok(task_loss + lambda * cost.ln() / tau.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(node_cost: Vec<f64>, edges: &[(usize, usize, f64, f64)]) -> CostGraph {
        CostGraph {
            node_cost,
            edges: edges
                .iter()
                .map(|&(from, to, prob, align_cost)| CostEdge {
                    from,
                    to,
                    prob,
                    align_cost,
                })
                .collect(),
        }
    }

    /// Non-recursive reading of the chained formula: successor basic costs
    /// instead of successor chained values. Kept only to document how it
    /// differs from the recursion.
    fn literal_chained(g: &CostGraph) -> f64 {
        let root = 0;
        g.node_cost[root]
            + g.edges
                .iter()
                .filter(|e| e.from == root)
                .map(|e| e.prob * (e.align_cost + g.node_cost[e.to]))
                .sum::<f64>()
    }

    fn three_blocks() -> CostGraph {
        // Blocks 1, 2, 3 as nodes 0, 1, 2.
        graph(
            vec![1.0, 1.0, 1.0],
            &[(0, 1, 0.4, 1.0), (0, 2, 0.6, 1.0), (1, 2, 1.0, 1.0)],
        )
    }

    #[test]
    fn flops_unit_conv() {
        assert_eq!(flops_of(&OpSignature::conv(1, 1, 1, 1, 1)).unwrap(), 1.0);
    }

    #[test]
    fn flops_mbconv_by_sublayer() {
        let sig = OpSignature::candidate(OperationKind::mbconv(3, 6).unwrap(), 16, 24, 112, 1);
        // Expand 16 -> 96, depthwise 3x3 on 96, project 96 -> 24, all at 112x112.
        let expand = 16.0 * 96.0 * 12544.0;
        let depthwise = 9.0 * 96.0 * 12544.0;
        let project = 96.0 * 24.0 * 12544.0;
        assert_eq!(flops_of(&sig).unwrap(), expand + depthwise + project);
        assert_eq!(flops_of(&sig).unwrap(), 59_006_976.0);
    }

    #[test]
    fn flops_rejects_bad_signatures() {
        assert!(flops_of(&OpSignature::conv(3, 0, 8, 8, 1)).is_err());
        assert!(flops_of(&OpSignature::conv(3, 8, 8, 7, 2)).is_err());
        assert!(flops_of(&OpSignature::candidate(OperationKind::Skip, 8, 16, 8, 1)).is_err());
        assert!(flops_of(&OpSignature::candidate(OperationKind::bottleneck(), 8, 18, 8, 1)).is_err());
    }

    #[test]
    fn basic_block_projection_only_on_shape_change() {
        let same = OpSignature::candidate(OperationKind::ResnetBasic, 64, 64, 56, 1);
        assert_eq!(flops_of(&same).unwrap(), 2.0 * 9.0 * 64.0 * 64.0 * 56.0 * 56.0);
        let down = OpSignature::candidate(OperationKind::ResnetBasic, 64, 128, 56, 2);
        let expected = (9 * 64 * 128 + 9 * 128 * 128 + 64 * 128) as f64 * 28.0 * 28.0;
        assert_eq!(flops_of(&down).unwrap(), expected);
        assert_eq!(params_of(&down).unwrap(), 9 * 64 * 128 + 9 * 128 * 128 + 64 * 128);
    }

    #[test]
    fn layer_cost_examples() {
        assert_eq!(layer_cost(&[0.0, 1.0, 0.0], &[10.0, 20.0, 30.0]).unwrap(), 20.0);
        let third = 1.0 / 3.0;
        assert!((layer_cost(&[third; 3], &[10.0, 20.0, 30.0]).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(layer_cost(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn chained_recursion_examples() {
        let single = graph(vec![2.0, 3.0], &[(0, 1, 1.0, 5.0)]);
        assert_eq!(single.chained().unwrap(), 10.0);

        let g = three_blocks();
        let values = g.chained_values().unwrap();
        assert!((values[2] - 1.0).abs() < 1e-12);
        assert!((values[1] - 3.0).abs() < 1e-12);
        assert!((values[0] - 3.8).abs() < 1e-12);
        // The non-recursive reading drops the downstream alignment of block 2.
        assert!((literal_chained(&g) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn local_estimate_examples() {
        assert_eq!(graph(vec![7.0], &[]).local().unwrap(), 7.0);
        // Block 1: 1; block 2: 0.4*1 + 1; block 3: 0.6*1 + 1*1 + 1.
        assert!((three_blocks().local().unwrap() - 5.0).abs() < 1e-12);
        let chain = graph(vec![1.0, 2.0, 3.0], &[(0, 1, 1.0, 0.5), (1, 2, 1.0, 0.25)]);
        assert_eq!(chain.local().unwrap(), 6.75);
        assert_eq!(chain.chained().unwrap(), chain.local().unwrap());
    }

    #[test]
    fn unnormalized_probabilities_are_rejected() {
        let g = graph(vec![1.0, 1.0, 1.0], &[(0, 1, 0.5, 0.0), (0, 2, 0.4, 0.0), (1, 2, 1.0, 0.0)]);
        assert!(matches!(g.chained(), Err(Error::NotNormalized { block: 0, .. })));
        assert!(matches!(g.local(), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn regularized_loss_examples() {
        assert_eq!(regularized_loss(1.5, 123.0, 0.0, 10.0).unwrap(), 1.5);
        assert!((regularized_loss(1.5, 10.0, 0.3, 10.0).unwrap() - 1.8).abs() < 1e-12);
        assert!((regularized_loss(2.0, 1e8, 0.1, 10.0).unwrap() - 2.8).abs() < 1e-12);
        assert!(regularized_loss(1.0, 0.0, 0.1, 10.0).is_err());
        assert!(regularized_loss(1.0, 1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn table_csv_round_trip_and_skip() {
        let mut table = CostTable::new(CostUnit::Milliseconds);
        let mb = OpSignature::candidate(OperationKind::mbconv(5, 3).unwrap(), 16, 24, 56, 2);
        table.insert(mb, 0.125).unwrap();
        table.insert(OpSignature::conv(3, 3, 32, 224, 2), 0.5).unwrap();
        table.insert(OpSignature::linear(1280, 1000), 0.01).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,kernel,expansion,c_in,c_out,res_in,stride,cost_ms\n"));
        let back = CostTable::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, table);
        let skip = OpSignature::candidate(OperationKind::Skip, 8, 8, 8, 1);
        assert_eq!(back.get(&skip), Some(0.0));
        let missing = OpSignature::candidate(OperationKind::ResnetBasic, 8, 8, 8, 1);
        match back.lookup_all(&[mb, missing]) {
            Err(Error::MissingCost(list)) => assert_eq!(list, vec![missing]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_csv_rejects_bad_rows() {
        let bad_header = "kind,kernel,c_in,c_out,res_in,stride,cost_ms\n";
        assert!(CostTable::read_csv(bad_header.as_bytes()).is_err());
        let unknown = "kind,kernel,expansion,c_in,c_out,res_in,stride,cost_ms\nsepconv,3,,8,8,8,1,0.1\n";
        assert!(CostTable::read_csv(unknown.as_bytes()).is_err());
        let negative = "kind,kernel,expansion,c_in,c_out,res_in,stride,cost_ms\nconv,3,,8,8,8,1,-1\n";
        assert!(CostTable::read_csv(negative.as_bytes()).is_err());
    }
}
