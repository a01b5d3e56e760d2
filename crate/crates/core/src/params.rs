//! Relaxation parameters: `alpha` per (layer, candidate) and `beta` per
//! connection, the softmaxes built on them, and dropping-path sampling.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{parse_edge_key, LayerRef, SuperNetworkSpec};
use crate::util::{log_sum_exp, softmax_unchecked};

/// Learnable architecture parameters bound to one [`SuperNetworkSpec`].
///
/// `alpha[l]` follows the layer order of [`SuperNetworkSpec::layout`];
/// `beta[e]` follows `spec.connections`. The same shape is reused for
/// gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

impl ArchParams {
    /// Uniform initialization: every parameter zero.
    pub fn zeros(spec: &SuperNetworkSpec) -> Self {
        let layout = spec.layout();
        let alpha = layout
            .layers
            .iter()
            .map(|&l| vec![0.0; layer_len(spec, l)])
            .collect();
        ArchParams {
            alpha,
            beta: vec![0.0; spec.connections.len()],
        }
    }

    /// I.i.d. normal parameters with the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(spec: &SuperNetworkSpec, rng: &mut R, std: f64) -> Self {
        let mut p = Self::zeros(spec);
        for row in p.alpha.iter_mut() {
            for a in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *a = std * z;
            }
        }
        for b in p.beta.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *b = std * z;
        }
        p
    }

    /// Checks that the shapes match `spec` and that every value is finite.
    pub fn check_bound(&self, spec: &SuperNetworkSpec) -> Result<()> {
        let layout = spec.layout();
        if self.alpha.len() != layout.layers.len() {
            return Err(Error::Unbound(format!(
                "{} alpha rows for {} layers",
                self.alpha.len(),
                layout.layers.len()
            )));
        }
        for (row, &layer) in self.alpha.iter().zip(&layout.layers) {
            let want = layer_len(spec, layer);
            if row.len() != want {
                return Err(Error::Unbound(format!(
                    "layer {layer} has {} alpha values for {want} candidates",
                    row.len()
                )));
            }
        }
        if self.beta.len() != spec.connections.len() {
            return Err(Error::Unbound(format!(
                "{} beta values for {} connections",
                self.beta.len(),
                spec.connections.len()
            )));
        }
        let finite = self.alpha.iter().flatten().chain(&self.beta).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("architecture parameters"));
        }
        Ok(())
    }

    /// Same-shape zero vector, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        ArchParams {
            alpha: self.alpha.iter().map(|r| vec![0.0; r.len()]).collect(),
            beta: vec![0.0; self.beta.len()],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ArchParams, scale: f64) {
        for (a, b) in self.alpha.iter_mut().zip(&other.alpha) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (x, y) in self.beta.iter_mut().zip(&other.beta) {
            *x += scale * y;
        }
    }

    pub fn to_snapshot(&self, spec: &SuperNetworkSpec) -> Result<ParamsSnapshot> {
        self.check_bound(spec)?;
        let layout = spec.layout();
        let alpha = layout
            .layers
            .iter()
            .zip(&self.alpha)
            .map(|(l, row)| (l.to_string(), row.clone()))
            .collect();
        let beta = spec
            .connections
            .iter()
            .zip(&self.beta)
            .map(|(c, &b)| (format!("{}->{}", c.from, c.to), b))
            .collect();
        Ok(ParamsSnapshot { alpha, beta })
    }

    pub fn from_snapshot(spec: &SuperNetworkSpec, snap: &ParamsSnapshot) -> Result<Self> {
        let layout = spec.layout();
        let mut params = Self::zeros(spec);
        let mut filled = vec![false; layout.layers.len()];
        for (key, values) in &snap.alpha {
            let layer: LayerRef = key.parse()?;
            let idx = layout
                .layer_index(layer)
                .ok_or_else(|| Error::Unbound(format!("unknown layer {key}")))?;
            if values.len() != params.alpha[idx].len() {
                return Err(Error::Unbound(format!(
                    "layer {key} has {} values for {} candidates",
                    values.len(),
                    params.alpha[idx].len()
                )));
            }
            params.alpha[idx] = values.clone();
            filled[idx] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Unbound(format!("no alpha for layer {}", layout.layers[i])));
        }
        let mut seen = vec![false; spec.connections.len()];
        for (key, &value) in &snap.beta {
            let (from, to) = parse_edge_key(key)
                .ok_or_else(|| Error::Unbound(format!("malformed edge key {key:?}")))?;
            let e = spec
                .edge_index(from, to)
                .ok_or_else(|| Error::Unbound(format!("unknown edge {key}")))?;
            params.beta[e] = value;
            seen[e] = true;
        }
        if let Some(e) = seen.iter().position(|s| !s) {
            let c = &spec.connections[e];
            return Err(Error::Unbound(format!("no beta for edge {}->{}", c.from, c.to)));
        }
        params.check_bound(spec)?;
        Ok(params)
    }
}

fn layer_len(spec: &SuperNetworkSpec, layer: LayerRef) -> usize {
    spec.layer_spec(layer).map_or(0, |l| l.len())
}

/// JSON form of [`ArchParams`], keyed by layer and edge names.
///
/// serde_json writes floats in shortest round-trip form, so export/import is lossless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    pub alpha: BTreeMap<String, Vec<f64>>,
    pub beta: BTreeMap<String, f64>,
}

/// Operation weights of one layer: softmax of its alpha values.
pub fn op_weights(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::EmptyInput);
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("alpha"));
    }
    Ok(softmax_unchecked(alpha))
}

/// Transition probabilities over every node's outgoing connections.
#[derive(Clone, Debug, PartialEq)]
pub struct PathDistribution {
    /// Indexed by node `0..=N+1`; each entry lists `(to, probability)` by ascending `to`.
    pub outgoing: Vec<Vec<(usize, f64)>>,
}

impl PathDistribution {
    pub fn prob(&self, from: usize, to: usize) -> Option<f64> {
        self.outgoing
            .get(from)?
            .iter()
            .find(|(t, _)| *t == to)
            .map(|(_, p)| *p)
    }

    /// Builds a distribution from raw per-edge probabilities aligned with `spec.connections`.
    pub fn from_edge_probs(spec: &SuperNetworkSpec, probs: &[f64]) -> Result<Self> {
        if probs.len() != spec.connections.len() {
            return Err(Error::LengthMismatch {
                expected: spec.connections.len(),
                actual: probs.len(),
            });
        }
        let layout = spec.layout();
        let outgoing = layout
            .outgoing
            .iter()
            .map(|edges| {
                edges
                    .iter()
                    .map(|&e| (spec.connections[e].to, probs[e]))
                    .collect()
            })
            .collect();
        Ok(PathDistribution { outgoing })
    }

    /// Per-edge probabilities aligned with `spec.connections`.
    pub fn edge_probs(&self, spec: &SuperNetworkSpec) -> Result<Vec<f64>> {
        spec.connections
            .iter()
            .map(|c| {
                self.prob(c.from, c.to)
                    .ok_or_else(|| Error::Unbound(format!("no probability for edge {}->{}", c.from, c.to)))
            })
            .collect()
    }
}

/// Per-edge path probabilities, aligned with `spec.connections`: a softmax
/// of beta over each source node's outgoing edges.
pub fn edge_probs(spec: &SuperNetworkSpec, params: &ArchParams) -> Result<Vec<f64>> {
    if params.beta.len() != spec.connections.len() {
        return Err(Error::Unbound(format!(
            "{} beta values for {} connections",
            params.beta.len(),
            spec.connections.len()
        )));
    }
    if params.beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("beta"));
    }
    let layout = spec.layout();
    let mut probs = vec![0.0; spec.connections.len()];
    for edges in &layout.outgoing {
        if edges.is_empty() {
            continue;
        }
        let betas: Vec<f64> = edges.iter().map(|&e| params.beta[e]).collect();
        for (&e, p) in edges.iter().zip(softmax_unchecked(&betas)) {
            probs[e] = p;
        }
    }
    Ok(probs)
}

/// Path distribution of `params`: per source block, a softmax over its outgoing beta.
pub fn path_probs(spec: &SuperNetworkSpec, params: &ArchParams) -> Result<PathDistribution> {
    let probs = edge_probs(spec, params)?;
    PathDistribution::from_edge_probs(spec, &probs)
}

/// Draws `count` distinct candidate indices from the categorical distribution
/// `weights`, sequentially and renormalizing after each draw.
pub fn sample_layer<R: Rng + ?Sized>(weights: &[f64], rng: &mut R, count: usize) -> Result<Vec<usize>> {
    if count > weights.len() {
        return Err(Error::SampleCount {
            count,
            available: weights.len(),
        });
    }
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            choice = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        // All remaining mass underflowed to zero: fall back to the first unpicked index.
        let i = choice.unwrap_or_else(|| (0..remaining.len()).find(|i| !picked.contains(i)).unwrap());
        picked.push(i);
        remaining[i] = 0.0;
    }
    Ok(picked)
}

/// Samples `count` operations in every layer according to its operation weights.
pub fn sample_ops<R: Rng + ?Sized>(
    params: &ArchParams,
    rng: &mut R,
    count: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(1..=2).contains(&count) {
        return Err(Error::SampleCount {
            count,
            available: 2,
        });
    }
    params
        .alpha
        .iter()
        .map(|row| sample_layer(&op_weights(row)?, rng, count))
        .collect()
}

/// Bias that, added to the updated sampled parameters, restores the sampled
/// subset's total exponential mass: `ln(sum exp(old) / sum exp(new))`.
pub fn rebalance_bias(old: &[f64], new: &[f64]) -> Result<f64> {
    if old.is_empty() || new.is_empty() {
        return Err(Error::EmptyInput);
    }
    if old.len() != new.len() {
        return Err(Error::LengthMismatch {
            expected: old.len(),
            actual: new.len(),
        });
    }
    if old.iter().chain(new).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("re-balancing input"));
    }
    Ok(log_sum_exp(old) - log_sum_exp(new))
}

/// Writes `updated` into the `sampled` entries of one layer's alpha row and
/// shifts them by the re-balancing bias, leaving the softmax weight of every
/// unsampled entry unchanged.
pub fn apply_sampled_update_layer(alpha: &[f64], sampled: &[usize], updated: &[f64]) -> Result<Vec<f64>> {
    if sampled.len() != updated.len() {
        return Err(Error::LengthMismatch {
            expected: sampled.len(),
            actual: updated.len(),
        });
    }
    if let Some(&index) = sampled.iter().find(|&&i| i >= alpha.len()) {
        return Err(Error::IndexOutOfRange {
            index,
            len: alpha.len(),
        });
    }
    let old: Vec<f64> = sampled.iter().map(|&i| alpha[i]).collect();
    let bias = rebalance_bias(&old, updated)?;
    let mut out = alpha.to_vec();
    for (&i, &v) in sampled.iter().zip(updated) {
        out[i] = v + bias;
    }
    Ok(out)
}

/// One layer's sampled update: candidate indices and their new raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledUpdate {
    pub layer: usize,
    pub sampled: Vec<usize>,
    pub values: Vec<f64>,
}

/// Applies [`apply_sampled_update_layer`] to each listed layer of `params`.
pub fn apply_sampled_update(params: &ArchParams, updates: &[SampledUpdate]) -> Result<ArchParams> {
    let mut out = params.clone();
    for u in updates {
        let row = out.alpha.get(u.layer).ok_or(Error::IndexOutOfRange {
            index: u.layer,
            len: params.alpha.len(),
        })?;
        out.alpha[u.layer] = apply_sampled_update_layer(row, &u.sampled, &u.values)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_super_network, CandidateSet, SpaceConfig, StageConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Softmax evaluated with f64 partial sums in a different order and
    /// without max-subtraction; fine for the small magnitudes used here.
    fn naive_softmax(xs: &[f64]) -> Vec<f64> {
        let exps: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let mut total = 0.0;
        for e in exps.iter().rev() {
            total += e;
        }
        exps.iter().map(|e| e / total).collect()
    }

    fn small_spec() -> SuperNetworkSpec {
        build_super_network(&SpaceConfig {
            input_resolution: 64,
            stem_width: 8,
            stages: vec![
                StageConfig {
                    resolution: 32,
                    widths: vec![8, 16],
                    num_basic_layers: None,
                },
                StageConfig {
                    resolution: 16,
                    widths: vec![16, 24],
                    num_basic_layers: None,
                },
            ],
            max_connections: 3,
            num_basic_layers: 2,
            candidate_set: CandidateSet::Mbconv,
            head: None,
        })
        .unwrap()
    }

    #[test]
    fn op_weights_examples() {
        let w = op_weights(&[0.0, 0.0, 0.0]).unwrap();
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = op_weights(&[2f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        // Frozen from an independent 50-digit evaluation (mpmath):
        // softmax(1, -1, 0.5)
        let w = op_weights(&[1.0, -1.0, 0.5]).unwrap();
        let expected = [0.5740969929676946, 0.07769557914857059, 0.3482074278837349];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(matches!(op_weights(&[]), Err(Error::EmptyInput)));
        assert!(matches!(op_weights(&[f64::NAN]), Err(Error::NonFinite(_))));
        let w = op_weights(&[1000.0, 0.0]).unwrap();
        assert!(w[0] == 1.0 && w[1] >= 0.0);
    }

    #[test]
    fn path_probs_examples() {
        let spec = small_spec();
        let mut params = ArchParams::zeros(&spec);
        let dist = path_probs(&spec, &params).unwrap();
        // Block 4 is the last block: a single edge to the ending block.
        assert_eq!(dist.outgoing[4], vec![(5, 1.0)]);
        // Stem reaches blocks 1, 2 (ratio 1) and 3 (ratio 2).
        assert_eq!(dist.outgoing[0].len(), 3);
        // Block 3 reaches block 4 and the ending block.
        assert_eq!(dist.outgoing[3], vec![(4, 0.5), (5, 0.5)]);

        let edges: Vec<usize> = (0..spec.connections.len())
            .filter(|&e| spec.connections[e].from == 0)
            .collect();
        for (&e, b) in edges.iter().zip([2.0, 1.0, 0.0]) {
            params.beta[e] = b;
        }
        let dist = path_probs(&spec, &params).unwrap();
        // Frozen from mpmath: softmax(2, 1, 0)
        let expected = [0.6652409557748219, 0.24472847105479764, 0.09003057317038046];
        for ((_, p), q) in dist.outgoing[0].iter().zip(expected) {
            assert!((p - q).abs() < 1e-15);
        }
        for out in &dist.outgoing[..=spec.n_blocks()] {
            let s: f64 = out.iter().map(|(_, p)| p).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn path_probs_rejects_unbound_params() {
        let spec = small_spec();
        let mut params = ArchParams::zeros(&spec);
        params.beta.pop();
        assert!(matches!(path_probs(&spec, &params), Err(Error::Unbound(_))));
    }

    #[test]
    fn sample_single_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_layer(&[1.0], &mut rng, 1).unwrap(), vec![0]);
        }
        assert!(matches!(sample_layer(&[1.0], &mut rng, 2), Err(Error::SampleCount { .. })));
    }

    #[test]
    fn sample_uniform_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = op_weights(&[0.0; 4]).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_layer(&w, &mut rng, 1).unwrap()[0]] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn sample_dominant_first_draw() {
        // P(first = 0) = e^10 / (e^10 + 2) = 0.99990921...
        let w = op_weights(&[10.0, 0.0, 0.0]).unwrap();
        assert!(w[0] >= 0.9999);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| {
                let s = sample_layer(&w, &mut rng, 2).unwrap();
                assert_ne!(s[0], s[1]);
                s[0] == 0
            })
            .count();
        assert!(hits as f64 / n as f64 > 0.999);
    }

    #[test]
    fn sample_ops_is_reproducible() {
        let spec = small_spec();
        let params = ArchParams::random_normal(&spec, &mut ChaCha8Rng::seed_from_u64(5), 1.0);
        let a = sample_ops(&params, &mut ChaCha8Rng::seed_from_u64(9), 2).unwrap();
        let b = sample_ops(&params, &mut ChaCha8Rng::seed_from_u64(9), 2).unwrap();
        assert_eq!(a, b);
        assert!(sample_ops(&params, &mut ChaCha8Rng::seed_from_u64(9), 3).is_err());
    }

    #[test]
    fn rebalance_bias_examples() {
        assert_eq!(rebalance_bias(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        let b = rebalance_bias(&[0.0], &[2f64.ln()]).unwrap();
        assert!((b + 2f64.ln()).abs() < 1e-15);
        // Frozen from mpmath: ln((e^1 + e^0.5) / (e^1.3 + e^0.2))
        let b = rebalance_bias(&[1.0, 0.5], &[1.3, 0.2]).unwrap();
        assert!((b - -0.11325834093532414).abs() < 1e-14, "{b}");
        assert!(matches!(rebalance_bias(&[], &[]), Err(Error::EmptyInput)));
        assert!(matches!(rebalance_bias(&[f64::INFINITY], &[0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampled_update_examples() {
        let alpha = [0.2, -0.4, 1.1];
        let same = apply_sampled_update_layer(&alpha, &[0, 1], &[0.2, -0.4]).unwrap();
        assert_eq!(same, alpha.to_vec());

        let before = naive_softmax(&alpha);
        let after = apply_sampled_update_layer(&alpha, &[0, 1], &[0.7, 0.1]).unwrap();
        assert!((naive_softmax(&after)[2] - before[2]).abs() < 1e-9);

        // Sampled mass grows by e^10 before re-balancing.
        let after = apply_sampled_update_layer(&alpha, &[0, 1], &[10.2, 9.6]).unwrap();
        assert!((naive_softmax(&after)[2] - before[2]).abs() < 1e-9);

        assert!(matches!(
            apply_sampled_update_layer(&alpha, &[3], &[0.0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip_is_lossless() {
        let spec = small_spec();
        let params = ArchParams::random_normal(&spec, &mut ChaCha8Rng::seed_from_u64(11), 3.0);
        let json = serde_json::to_string(&params.to_snapshot(&spec).unwrap()).unwrap();
        let snap: ParamsSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(ArchParams::from_snapshot(&spec, &snap).unwrap(), params);
    }

    proptest! {
        #[test]
        fn softmax_is_normalized_and_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let w = op_weights(&xs).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            for (a, b) in w.iter().zip(op_weights(&shifted).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] > xs[j] {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }

        #[test]
        fn sampled_update_preserves_unsampled_weights(
            alpha in prop::collection::vec(-5.0f64..5.0, 3..8),
            deltas in prop::collection::vec(-12.0f64..12.0, 2),
            pick in any::<prop::sample::Index>(),
        ) {
            let n = alpha.len();
            let first = pick.index(n);
            let sampled = vec![first, (first + 1) % n];
            let updated: Vec<f64> = sampled.iter().zip(&deltas).map(|(&i, d)| alpha[i] + d).collect();
            let after = apply_sampled_update_layer(&alpha, &sampled, &updated).unwrap();
            let (w0, w1) = (op_weights(&alpha).unwrap(), op_weights(&after).unwrap());
            for i in (0..n).filter(|i| !sampled.contains(i)) {
                prop_assert!((w0[i] - w1[i]).abs() < 1e-9);
                prop_assert_eq!(alpha[i], after[i]);
            }
        }
    }
}
