//! Turning relaxation parameters into a concrete architecture: a Viterbi
//! pass over block transitions plus per-layer argmax, with skip layers
//! dropped.

use serde::{Deserialize, Serialize};

use crate::cost::{head_signatures, OpSignature};
use crate::error::{Error, Result};
use crate::params::{path_probs, ArchParams, PathDistribution};
use crate::space::{HeadSpec, LayerRef, OperationKind, StemSpec, SuperNetworkSpec, Violation, ViolationKind};

pub const ARCH_SCHEMA_VERSION: u32 = 1;

/// Largest block count [`brute_force_best_path`] will enumerate.
pub const BRUTE_FORCE_MAX_BLOCKS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedLayer {
    /// Basic-layer slot within the block; slots whose choice was skip are absent.
    pub slot: usize,
    #[serde(flatten)]
    pub op: OperationKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedBlock {
    pub index: usize,
    /// Predecessor on the derived path (0 is the stem).
    pub from: usize,
    pub width: u32,
    pub resolution: u32,
    pub in_width: u32,
    pub stride_in: u32,
    /// Operation of the alignment branch fed by `from`.
    pub alignment: OperationKind,
    pub layers: Vec<DerivedLayer>,
}

impl DerivedBlock {
    pub fn alignment_signature(&self) -> OpSignature {
        OpSignature::candidate(
            self.alignment,
            self.in_width,
            self.width,
            self.resolution * self.stride_in,
            self.stride_in,
        )
    }

    pub fn layer_signatures(&self) -> Vec<OpSignature> {
        self.layers
            .iter()
            .map(|l| OpSignature::candidate(l.op, self.width, self.width, self.resolution, 1))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub params_hash: String,
}

/// A linear chain of blocks with concrete operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedArchitecture {
    pub schema_version: u32,
    pub input_resolution: u32,
    pub stem: StemSpec,
    pub head: HeadSpec,
    pub blocks: Vec<DerivedBlock>,
    pub ending_block: usize,
    pub provenance: Provenance,
}

impl DerivedArchitecture {
    pub fn stem_signature(&self) -> OpSignature {
        OpSignature::conv(self.stem.kernel, 3, self.stem.width, self.input_resolution, self.stem.stride)
    }

    fn output_shape(&self) -> (u32, u32) {
        match self.blocks.last() {
            Some(b) => (b.width, b.resolution),
            None => (self.stem.width, self.input_resolution / self.stem.stride),
        }
    }

    pub fn head_signatures(&self) -> Vec<OpSignature> {
        let (width, res) = self.output_shape();
        head_signatures(&self.head, width, res)
    }

    pub fn block_indices(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.index).collect()
    }

    /// Number of weighted layers, counting each alignment branch as one.
    pub fn depth(&self) -> usize {
        self.blocks.iter().map(|b| 1 + b.layers.len()).sum()
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        crate::util::canonical_json(self)
    }
}

fn outgoing_mass_check(spec: &SuperNetworkSpec, dist: &PathDistribution) -> Result<()> {
    let end = spec.end_node();
    if dist.outgoing.len() < end + 1 {
        return Err(Error::Unbound(format!(
            "distribution covers {} nodes, super network has {}",
            dist.outgoing.len(),
            end + 1
        )));
    }
    for (node, out) in dist.outgoing.iter().enumerate().take(end) {
        let mass: f64 = out.iter().map(|(_, p)| p).sum();
        if !(mass > 0.0) {
            return Err(Error::ZeroMass(node));
        }
        if out.iter().any(|&(to, p)| to <= node || to > end || !(0.0..=1.0).contains(&p)) {
            return Err(Error::Unbound(format!("invalid transition out of block {node}")));
        }
    }
    Ok(())
}

fn backtrack(pred: &[usize], node: usize) -> Vec<usize> {
    let mut seq = vec![node];
    let mut cur = node;
    while cur != 0 {
        cur = pred[cur];
        seq.push(cur);
    }
    seq.reverse();
    seq
}

/// Most probable block sequence from the stem to the ending block, by
/// max-product dynamic programming in log space. Exact score ties go to the
/// lexicographically smallest block sequence. The stem and the ending block
/// are stripped from the result.
pub fn viterbi_derive(spec: &SuperNetworkSpec, dist: &PathDistribution) -> Result<Vec<usize>> {
    outgoing_mass_check(spec, dist)?;
    let end = spec.end_node();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); end + 1];
    for (from, out) in dist.outgoing.iter().enumerate().take(end) {
        for &(to, p) in out {
            incoming[to].push((from, p.ln()));
        }
    }

    let mut score = vec![f64::NEG_INFINITY; end + 1];
    let mut pred = vec![0usize; end + 1];
    score[0] = 0.0;
    for i in 1..=end {
        let mut best: Option<usize> = None;
        for &(j, log_p) in &incoming[i] {
            let s = score[j] + log_p;
            if s == f64::NEG_INFINITY {
                continue;
            }
            match best {
                None => best = Some(j),
                Some(b) => {
                    let sb = score[b] + incoming[i].iter().find(|(k, _)| *k == b).unwrap().1;
                    // Compare whole sequences ending in i: a bare predecessor path
                    // can be a prefix of the other and would sort first wrongly.
                    let extended = |k| {
                        let mut seq = backtrack(&pred, k);
                        seq.push(i);
                        seq
                    };
                    if s > sb || (s == sb && extended(j) < extended(b)) {
                        best = Some(j);
                    }
                }
            }
        }
        if let Some(b) = best {
            pred[i] = b;
            score[i] = score[b] + incoming[i].iter().find(|(k, _)| *k == b).unwrap().1;
        }
    }
    if score[end] == f64::NEG_INFINITY {
        return Err(Error::ZeroMass(end));
    }
    let path = backtrack(&pred, end);
    Ok(path[1..path.len() - 1].to_vec())
}

/// Exhaustive search over every stem-to-end path; same scoring and tie rule
/// as [`viterbi_derive`]. Exponential, so limited to small spaces.
pub fn brute_force_best_path(spec: &SuperNetworkSpec, dist: &PathDistribution) -> Result<Vec<usize>> {
    if spec.n_blocks() > BRUTE_FORCE_MAX_BLOCKS {
        return Err(Error::TooLarge(spec.n_blocks(), BRUTE_FORCE_MAX_BLOCKS));
    }
    outgoing_mass_check(spec, dist)?;
    let end = spec.end_node();

    struct Search<'a> {
        dist: &'a PathDistribution,
        end: usize,
        best: Option<(f64, Vec<usize>)>,
        stack: Vec<usize>,
    }
    impl Search<'_> {
        fn visit(&mut self, node: usize, score: f64) {
            if node == self.end {
                // Paths arrive in lexicographic order, so only a strictly better score replaces.
                if self.best.as_ref().map_or(score > f64::NEG_INFINITY, |(b, _)| score > *b) {
                    self.best = Some((score, self.stack.clone()));
                }
                return;
            }
            for &(to, p) in &self.dist.outgoing[node] {
                self.stack.push(to);
                self.visit(to, score + p.ln());
                self.stack.pop();
            }
        }
    }
    let mut search = Search {
        dist,
        end,
        best: None,
        stack: Vec::new(),
    };
    search.visit(0, 0.0);
    match search.best {
        Some((_, mut path)) => {
            path.pop();
            Ok(path)
        }
        None => Err(Error::ZeroMass(end)),
    }
}

/// Index of the largest alpha in every layer (layout order); ties go to the lowest index.
pub fn argmax_ops(spec: &SuperNetworkSpec, params: &ArchParams) -> Result<Vec<usize>> {
    params.check_bound(spec)?;
    Ok(params.alpha.iter().map(|row| argmax(row)).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Derives the final architecture from `params`.
pub fn derive(spec: &SuperNetworkSpec, params: &ArchParams) -> Result<DerivedArchitecture> {
    let mut arch = derive_unstamped(spec, params)?;
    arch.provenance = Provenance {
        spec_hash: spec.content_hash()?,
        params_hash: crate::util::content_hash(&params.to_snapshot(spec)?)?,
    };
    Ok(arch)
}

/// [`derive`] without computing provenance hashes (used in hot loops).
pub fn derive_unstamped(spec: &SuperNetworkSpec, params: &ArchParams) -> Result<DerivedArchitecture> {
    let dist = path_probs(spec, params)?;
    let path = viterbi_derive(spec, &dist)?;
    let choices = argmax_ops(spec, params)?;
    let layout = spec.layout();

    let mut blocks = Vec::with_capacity(path.len());
    let mut prev = 0usize;
    for &index in &path {
        let e = spec
            .edge_index(prev, index)
            .ok_or_else(|| Error::Unbound(format!("no connection {prev}->{index}")))?;
        let conn = &spec.connections[e];
        let align_layer = layout.edge_layer[e].expect("edges between real blocks carry an alignment layer");
        let alignment = conn.alignment.as_ref().expect("alignment layer").candidates[choices[align_layer]];
        let block = spec.block(index);
        let layers = layout.node_layers[index]
            .iter()
            .filter_map(|&l| {
                let LayerRef::Basic { slot, .. } = layout.layers[l] else {
                    return None;
                };
                let op = spec.basic_layer.candidates[choices[l]];
                (!op.is_skip()).then_some(DerivedLayer { slot, op })
            })
            .collect();
        blocks.push(DerivedBlock {
            index,
            from: prev,
            width: block.width,
            resolution: block.resolution,
            in_width: spec.node_width(prev).unwrap_or(0),
            stride_in: conn.stride,
            alignment,
            layers,
        });
        prev = index;
    }
    Ok(DerivedArchitecture {
        schema_version: ARCH_SCHEMA_VERSION,
        input_resolution: spec.input_resolution,
        stem: spec.stem,
        head: spec.head,
        blocks,
        ending_block: spec.end_node(),
        provenance: Provenance::default(),
    })
}

/// Checks that `arch` is a path through `spec` with valid operation choices.
pub fn validate_architecture(spec: &SuperNetworkSpec, arch: &DerivedArchitecture) -> Result<()> {
    let mut problems = Vec::new();
    let mut bad = |m: String| {
        problems.push(Violation {
            kind: ViolationKind::Architecture,
            message: m,
        })
    };
    if arch.input_resolution != spec.input_resolution || arch.stem != spec.stem || arch.head != spec.head {
        bad("stem, head or input resolution differ from the super network".into());
    }
    if arch.ending_block != spec.end_node() {
        bad(format!("ending block {} but super network ends at {}", arch.ending_block, spec.end_node()));
    }
    if arch.blocks.is_empty() {
        bad("architecture has no blocks".into());
    }
    let mut prev = 0usize;
    let mut prev_res = spec.stem_resolution();
    for b in &arch.blocks {
        let id = format!("block {}", b.index);
        if b.from != prev {
            bad(format!("{id}: declared predecessor {} but follows {prev}", b.from));
        }
        if b.index == 0 || b.index > spec.n_blocks() {
            bad(format!("{id} does not exist"));
            prev = b.index;
            continue;
        }
        let sb = spec.block(b.index);
        if (b.width, b.resolution) != (sb.width, sb.resolution) {
            bad(format!("{id}: shape differs from the super network"));
        }
        if b.resolution > prev_res {
            bad(format!("{id}: resolution increases"));
        }
        if Some(b.in_width) != spec.node_width(prev) {
            bad(format!("{id}: input width {} does not match block {prev}", b.in_width));
        }
        match spec.edge_index(prev, b.index) {
            None => bad(format!("{id}: blocks {prev} and {} are not connected", b.index)),
            Some(e) => {
                let c = &spec.connections[e];
                if c.stride != b.stride_in {
                    bad(format!("{id}: stride {} but connection stride is {}", b.stride_in, c.stride));
                }
                let allowed = c.alignment.as_ref().is_some_and(|l| l.candidates.contains(&b.alignment));
                if !allowed {
                    bad(format!("{id}: alignment op {} is not a candidate", b.alignment));
                }
            }
        }
        let mut last_slot = None;
        for l in &b.layers {
            if l.op.is_skip() || !spec.basic_layer.candidates.contains(&l.op) {
                bad(format!("{id}: layer op {} is not a retained candidate", l.op));
            }
            if l.slot >= sb.num_basic_layers || last_slot.is_some_and(|s| l.slot <= s) {
                bad(format!("{id}: layer slot {} out of order or range", l.slot));
            }
            last_slot = Some(l.slot);
        }
        prev = b.index;
        prev_res = b.resolution;
    }
    if !arch.blocks.is_empty() && spec.edge_index(prev, spec.end_node()).is_none() {
        bad(format!("block {prev} does not connect to the ending block"));
    }
    let final_res = arch.blocks.last().map_or(spec.stem_resolution(), |b| b.resolution);
    let total_stride: u32 = arch.stem.stride * arch.blocks.iter().map(|b| b.stride_in).product::<u32>();
    if final_res * total_stride != arch.input_resolution {
        bad(format!(
            "total stride {total_stride} does not map {} to {final_res}",
            arch.input_resolution
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_super_network, CandidateSet, SpaceConfig, StageConfig};

    fn chain_spec(n: usize) -> SuperNetworkSpec {
        build_super_network(&SpaceConfig {
            input_resolution: 64,
            stem_width: 8,
            stages: vec![StageConfig {
                resolution: 32,
                widths: vec![8; n],
                num_basic_layers: None,
            }],
            max_connections: 1,
            num_basic_layers: 2,
            candidate_set: CandidateSet::ResnetBasic,
            head: None,
        })
        .unwrap()
    }

    fn three_block_spec() -> SuperNetworkSpec {
        build_super_network(&SpaceConfig {
            input_resolution: 64,
            stem_width: 8,
            stages: vec![StageConfig {
                resolution: 32,
                widths: vec![8, 8, 8],
                num_basic_layers: None,
            }],
            max_connections: 2,
            num_basic_layers: 1,
            candidate_set: CandidateSet::ResnetBasic,
            head: None,
        })
        .unwrap()
    }

    fn dist(outgoing: Vec<Vec<(usize, f64)>>) -> PathDistribution {
        PathDistribution { outgoing }
    }

    #[test]
    fn chain_yields_full_chain() {
        let spec = chain_spec(5);
        let params = ArchParams::zeros(&spec);
        let d = path_probs(&spec, &params).unwrap();
        assert_eq!(viterbi_derive(&spec, &d).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(brute_force_best_path(&spec, &d).unwrap(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn three_block_example() {
        let spec = three_block_spec();
        // Stem only reaches blocks 1 and 2 (M = 2); force it into block 1.
        let d = dist(vec![
            vec![(1, 1.0), (2, 0.0)],
            vec![(2, 0.3), (3, 0.7)],
            vec![(3, 1.0)],
            vec![(4, 1.0)],
            vec![],
        ]);
        assert_eq!(viterbi_derive(&spec, &d).unwrap(), vec![1, 3]);
        assert_eq!(brute_force_best_path(&spec, &d).unwrap(), vec![1, 3]);
    }

    #[test]
    fn ties_prefer_lexicographically_smallest_sequence() {
        // 0->1->4 and 0->2->3->4 vs 0->1->3->4: build a tie where the
        // predecessor of the end node with the lower index is not lexicographically first.
        let spec = build_super_network(&SpaceConfig {
            input_resolution: 64,
            stem_width: 8,
            stages: vec![StageConfig {
                resolution: 32,
                widths: vec![8; 4],
                num_basic_layers: None,
            }],
            max_connections: 3,
            num_basic_layers: 1,
            candidate_set: CandidateSet::ResnetBasic,
            head: None,
        })
        .unwrap();
        // Paths (1,4) and (2,3,4) both have probability 0.5; everything else less.
        let d = dist(vec![
            vec![(1, 0.5), (2, 0.5), (3, 0.0)],
            vec![(2, 0.0), (3, 0.0), (4, 1.0)],
            vec![(3, 1.0), (4, 0.0)],
            vec![(4, 1.0), (5, 0.0)],
            vec![(5, 1.0)],
            vec![],
        ]);
        let v = viterbi_derive(&spec, &d).unwrap();
        assert_eq!(v, vec![1, 4]);
        assert_eq!(brute_force_best_path(&spec, &d).unwrap(), v);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let spec = three_block_spec();
        let d = dist(vec![
            vec![(1, 1.0), (2, 0.0)],
            vec![(2, 0.0), (3, 0.0)],
            vec![(3, 1.0)],
            vec![(4, 1.0)],
            vec![],
        ]);
        assert!(matches!(viterbi_derive(&spec, &d), Err(Error::ZeroMass(1))));
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, -2.0, 5.0]), 2);
    }

    #[test]
    fn zero_params_on_chain_pick_first_candidates() {
        let spec = chain_spec(3);
        let arch = derive(&spec, &ArchParams::zeros(&spec)).unwrap();
        assert_eq!(arch.block_indices(), vec![1, 2, 3]);
        for b in &arch.blocks {
            assert_eq!(b.alignment, OperationKind::ResnetBasic);
            assert_eq!(b.layers.len(), 2);
            assert!(b.layers.iter().all(|l| l.op == OperationKind::ResnetBasic));
        }
        validate_architecture(&spec, &arch).unwrap();
        assert_eq!(arch.provenance.spec_hash, spec.content_hash().unwrap());
    }

    #[test]
    fn skip_layers_are_removed() {
        let spec = chain_spec(2);
        let layout = spec.layout();
        let mut params = ArchParams::zeros(&spec);
        let l = layout.layer_index(LayerRef::Basic { block: 2, slot: 1 }).unwrap();
        params.alpha[l] = vec![0.0, 1.0];
        let arch = derive(&spec, &params).unwrap();
        assert_eq!(arch.blocks[1].layers.len(), 1);
        assert_eq!(arch.blocks[1].layers[0].slot, 0);
        validate_architecture(&spec, &arch).unwrap();
    }

    #[test]
    fn validation_catches_disconnected_blocks() {
        let spec = chain_spec(3);
        let mut arch = derive(&spec, &ArchParams::zeros(&spec)).unwrap();
        arch.blocks.remove(1);
        assert!(validate_architecture(&spec, &arch).is_err());
    }

    #[test]
    fn architecture_json_round_trip() {
        let spec = chain_spec(2);
        let arch = derive(&spec, &ArchParams::zeros(&spec)).unwrap();
        let json = arch.to_canonical_json().unwrap();
        assert!(json.contains("\"op\": \"resnet_basic\""));
        let back: DerivedArchitecture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, arch);
    }
}
