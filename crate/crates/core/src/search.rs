//! Two-stage alternating search over the relaxation parameters, and a
//! random-search baseline.
//!
//! Stage one only trains the evaluator's internal weights; the architecture
//! parameters stay at their initialization. Stage two alternates, every
//! epoch, a block of weight steps with a block of gradient-descent steps on
//! `task_loss + lambda * log_tau(chained_cost)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{chained_expectation, exact_cost, regularized_loss, CostTable, OpMask, ValueModel};
use crate::derive::{derive, derive_unstamped, DerivedArchitecture};
use crate::error::{Error, Result};
use crate::params::{
    apply_sampled_update, op_weights, sample_layer, sample_ops, ArchParams, ParamsSnapshot, SampledUpdate,
};
use crate::space::{LayerRef, Layout, SuperNetworkSpec};
use crate::util::content_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_alpha_beta: f64,
    pub lr_weights: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub drop_path: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            total_epochs: 60,
            warmup_epochs: 20,
            steps_per_epoch: 10,
            lr_alpha_beta: 0.5,
            lr_weights: 0.05,
            lambda: 0.1,
            tau: std::f64::consts::E,
            seed: 0,
            drop_path: false,
        }
    }
}

impl SearchConfig {
    /// `warmup_epochs == total_epochs` is accepted and runs the weight stage only.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return bad(format!(
                "need 0 < warmup_epochs <= total_epochs (got {} and {})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be positive".into());
        }
        if !(self.lr_alpha_beta > 0.0 && self.lr_alpha_beta.is_finite()) {
            return bad(format!("lr_alpha_beta must be positive (got {})", self.lr_alpha_beta));
        }
        if !(self.lr_weights > 0.0 && self.lr_weights.is_finite()) {
            return bad(format!("lr_weights must be positive (got {})", self.lr_weights));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative (got {})", self.lambda));
        }
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTau(self.tau));
        }
        Ok(())
    }
}

/// Stand-in for super-network training and the task loss.
///
/// `mask` restricts each layer to a sampled candidate subset (dropping-path);
/// `None` means the full relaxed distribution.
pub trait Evaluator {
    /// One update of the evaluator's internal weights; returns the training loss.
    fn train_step(
        &mut self,
        spec: &SuperNetworkSpec,
        params: &ArchParams,
        mask: Option<&OpMask>,
        lr: f64,
    ) -> Result<f64>;

    /// Task loss and its gradient with respect to every alpha and beta.
    fn loss_and_grad(
        &mut self,
        spec: &SuperNetworkSpec,
        params: &ArchParams,
        mask: Option<&OpMask>,
    ) -> Result<(f64, ArchParams)>;

    /// Quality of a concrete architecture; higher is better.
    fn score(&mut self, spec: &SuperNetworkSpec, arch: &DerivedArchitecture) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub seed: u64,
    /// Standard deviation of per-evaluation observation noise.
    pub noise: f64,
    /// When set, one op per layer is planted this far above the best other op.
    pub planted_gap: Option<f64>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            seed: 0,
            noise: 0.0,
            planted_gap: None,
        }
    }
}

/// Evaluator whose task loss is minus the chained expected quality of the
/// relaxed network. Every candidate has a latent quality drawn from N(0, 1);
/// what the search observes is `maturity * quality` plus noise, where
/// maturity grows from 0 towards 1 as the candidate gets trained.
#[derive(Clone, Debug)]
pub struct SyntheticEvaluator {
    layout: Layout,
    quality: Vec<Vec<f64>>,
    maturity: Vec<Vec<f64>>,
    dominant: Option<Vec<usize>>,
    noise: f64,
    rng: ChaCha8Rng,
}

impl SyntheticEvaluator {
    pub fn new(spec: &SuperNetworkSpec, seed: u64, noise: f64) -> Result<Self> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative (got {noise})")));
        }
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let quality: Vec<Vec<f64>> = layout
            .layers
            .iter()
            .map(|&l| {
                let n = spec.layer_spec(l).map_or(0, |s| s.len());
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        let maturity = quality.iter().map(|row| vec![0.0; row.len()]).collect();
        Ok(SyntheticEvaluator {
            layout,
            quality,
            maturity,
            dominant: None,
            noise,
            rng,
        })
    }

    /// Like [`SyntheticEvaluator::new`], then lifts a randomly chosen op in
    /// every layer to `gap` above the best of the others.
    pub fn planted(spec: &SuperNetworkSpec, seed: u64, gap: f64, noise: f64) -> Result<Self> {
        if !(gap > 0.0 && gap.is_finite()) {
            return Err(Error::Config(format!("planted gap must be positive (got {gap})")));
        }
        let mut ev = Self::new(spec, seed, noise)?;
        let mut dominant = Vec::with_capacity(ev.quality.len());
        for row in &mut ev.quality {
            let d = rand::Rng::random_range(&mut ev.rng, 0..row.len());
            let best_other = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != d)
                .map(|(_, &q)| q)
                .fold(f64::NEG_INFINITY, f64::max);
            row[d] = if best_other.is_finite() { best_other + gap } else { row[d] };
            dominant.push(d);
        }
        ev.dominant = Some(dominant);
        Ok(ev)
    }

    pub fn from_config(spec: &SuperNetworkSpec, config: &EvaluatorConfig) -> Result<Self> {
        match config.planted_gap {
            Some(gap) => Self::planted(spec, config.seed, gap, config.noise),
            None => Self::new(spec, config.seed, config.noise),
        }
    }

    pub fn quality(&self) -> &[Vec<f64>] {
        &self.quality
    }

    /// Planted dominant candidate per layer (layout order), if any.
    pub fn dominant(&self) -> Option<&[usize]> {
        self.dominant.as_deref()
    }

    pub fn maturity(&self) -> &[Vec<f64>] {
        &self.maturity
    }

    /// Sets every candidate's maturity to `level` (clamped to [0, 1]).
    pub fn set_maturity(&mut self, level: f64) {
        let level = level.clamp(0.0, 1.0);
        for row in &mut self.maturity {
            row.iter_mut().for_each(|m| *m = level);
        }
    }

    fn check_spec(&self, spec: &SuperNetworkSpec, params: &ArchParams) -> Result<()> {
        params.check_bound(spec)?;
        if params.alpha.len() != self.quality.len()
            || params.alpha.iter().zip(&self.quality).any(|(a, q)| a.len() != q.len())
        {
            return Err(Error::Unbound("evaluator was built for a different super network".into()));
        }
        Ok(())
    }

    fn model(&self, spec: &SuperNetworkSpec, values: Vec<Vec<f64>>) -> ValueModel {
        let mut model = ValueModel::zeros(spec, &self.layout);
        model.layer_values = values;
        model
    }

    /// Noise-free chained expected quality and its gradient.
    pub fn expected_quality(
        &self,
        spec: &SuperNetworkSpec,
        params: &ArchParams,
        mask: Option<&OpMask>,
    ) -> Result<(f64, ArchParams)> {
        self.check_spec(spec, params)?;
        let values = self.observed(0.0, None);
        let r = chained_expectation(spec, &self.layout, params, &self.model(spec, values), mask, true)?;
        Ok((r.total, r.grad))
    }

    fn observed(&self, noise: f64, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = self
            .quality
            .iter()
            .zip(&self.maturity)
            .map(|(q, m)| q.iter().zip(m).map(|(q, m)| q * m).collect())
            .collect();
        if let (Some(rng), true) = (rng, noise > 0.0) {
            let normal = Normal::new(0.0, noise).expect("positive noise");
            for v in values.iter_mut().flatten() {
                *v += normal.sample(rng);
            }
        }
        values
    }

    /// Candidate index chosen in every layer of `arch` (layout order);
    /// layers off the architecture's path are `None`.
    pub fn choices(&self, spec: &SuperNetworkSpec, arch: &DerivedArchitecture) -> Result<Vec<Option<usize>>> {
        let mut out = vec![None; self.layout.layers.len()];
        let skip = spec.basic_layer.candidates.iter().position(|c| c.is_skip());
        for b in &arch.blocks {
            let align = self
                .layout
                .layer_index(LayerRef::Align { from: b.from, to: b.index })
                .ok_or_else(|| Error::Unbound(format!("no alignment layer {}->{}", b.from, b.index)))?;
            let cands = &spec.layer_spec(LayerRef::Align { from: b.from, to: b.index }).unwrap().candidates;
            out[align] = Some(find(cands, b.alignment)?);
            for &l in &self.layout.node_layers[b.index] {
                let LayerRef::Basic { slot, .. } = self.layout.layers[l] else { continue };
                out[l] = match b.layers.iter().find(|x| x.slot == slot) {
                    Some(x) => Some(find(&spec.basic_layer.candidates, x.op)?),
                    None => Some(skip.ok_or_else(|| {
                        Error::InvalidOperation(format!("block {} drops slot {slot} but skip is not a candidate", b.index))
                    })?),
                };
            }
        }
        Ok(out)
    }
}

fn find(cands: &[crate::space::OperationKind], op: crate::space::OperationKind) -> Result<usize> {
    cands
        .iter()
        .position(|&c| c == op)
        .ok_or_else(|| Error::InvalidOperation(format!("{op} is not a candidate")))
}

impl Evaluator for SyntheticEvaluator {
    fn train_step(
        &mut self,
        spec: &SuperNetworkSpec,
        params: &ArchParams,
        mask: Option<&OpMask>,
        lr: f64,
    ) -> Result<f64> {
        self.check_spec(spec, params)?;
        let rate = lr.clamp(0.0, 1.0);
        for (l, row) in self.maturity.iter_mut().enumerate() {
            match mask {
                Some(m) => m[l].iter().for_each(|&o| row[o] += rate * (1.0 - row[o])),
                None => row.iter_mut().for_each(|v| *v += rate * (1.0 - *v)),
            }
        }
        let (loss, _) = self.loss_and_grad(spec, params, mask)?;
        Ok(loss)
    }

    fn loss_and_grad(
        &mut self,
        spec: &SuperNetworkSpec,
        params: &ArchParams,
        mask: Option<&OpMask>,
    ) -> Result<(f64, ArchParams)> {
        self.check_spec(spec, params)?;
        let values = {
            let noise = self.noise;
            let mut rng = self.rng.clone();
            let v = self.observed(noise, Some(&mut rng));
            self.rng = rng;
            v
        };
        let r = chained_expectation(spec, &self.layout, params, &self.model(spec, values), mask, true)?;
        let mut grad = r.grad;
        for v in grad.alpha.iter_mut().flatten().chain(grad.beta.iter_mut()) {
            *v = -*v;
        }
        Ok((-r.total, grad))
    }

    fn score(&mut self, spec: &SuperNetworkSpec, arch: &DerivedArchitecture) -> Result<f64> {
        let choices = self.choices(spec, arch)?;
        Ok(choices
            .iter()
            .enumerate()
            .filter_map(|(l, c)| c.map(|o| self.quality[l][o]))
            .sum())
    }
}

/// Regularized loss `task + lambda * log_tau(cost)` and its gradient, given
/// the task term and the chained cost with their gradients.
pub fn combine_gradients(
    task: (f64, &ArchParams),
    cost: (f64, &ArchParams),
    lambda: f64,
    tau: f64,
) -> Result<(f64, ArchParams)> {
    let loss = regularized_loss(task.0, cost.0, lambda, tau)?;
    let mut grad = task.1.clone();
    grad.add_scaled(cost.1, lambda / (cost.0 * tau.ln()));
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Search,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub task_loss: f64,
    pub cost: f64,
    pub regularized_loss: f64,
    /// Content hash of the parameter snapshot at the end of the epoch.
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTrace {
    pub records: Vec<EpochRecord>,
    pub final_params: ArchParams,
}

impl SearchTrace {
    /// One JSON object per epoch, newline terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::json("search trace", e))?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn snapshot_hash(spec: &SuperNetworkSpec, params: &ArchParams) -> Result<String> {
    let snap: ParamsSnapshot = params.to_snapshot(spec)?;
    content_hash(&snap)
}

/// Runs the two-stage search from uniform initialization.
pub fn search<E: Evaluator + ?Sized>(
    spec: &SuperNetworkSpec,
    config: &SearchConfig,
    evaluator: &mut E,
    table: &CostTable,
) -> Result<(ArchParams, SearchTrace)> {
    config.check()?;
    let layout = spec.layout();
    let cost_model = ValueModel::from_table(spec, &layout, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ArchParams::zeros(spec);
    let mut records = Vec::with_capacity(config.total_epochs);

    for epoch in 0..config.total_epochs {
        let stage = if epoch < config.warmup_epochs { Stage::Warmup } else { Stage::Search };
        for _ in 0..config.steps_per_epoch {
            let mask = if config.drop_path { Some(sample_ops(&params, &mut rng, 1)?) } else { None };
            let loss = evaluator.train_step(spec, &params, mask.as_deref(), config.lr_weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
        }
        if stage == Stage::Search {
            for _ in 0..config.steps_per_epoch {
                params = arch_step(spec, &layout, &cost_model, config, evaluator, &params, &mut rng, epoch)?;
            }
        }

        let (task_loss, _) = evaluator.loss_and_grad(spec, &params, None)?;
        if !task_loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        let cost = chained_expectation(spec, &layout, &params, &cost_model, None, false)?.total;
        records.push(EpochRecord {
            epoch,
            stage,
            task_loss,
            cost,
            regularized_loss: regularized_loss(task_loss, cost, config.lambda, config.tau)?,
            params_hash: snapshot_hash(spec, &params)?,
        });
        log::debug!("epoch {epoch}: task loss {task_loss:.6}, cost {cost:.6e}");
    }
    let trace = SearchTrace {
        records,
        final_params: params.clone(),
    };
    Ok((params, trace))
}

#[allow(clippy::too_many_arguments)]
fn arch_step<E: Evaluator + ?Sized>(
    spec: &SuperNetworkSpec,
    layout: &Layout,
    cost_model: &ValueModel,
    config: &SearchConfig,
    evaluator: &mut E,
    params: &ArchParams,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<ArchParams> {
    let mask = if config.drop_path {
        let m: Vec<Vec<usize>> = params
            .alpha
            .iter()
            .map(|row| sample_layer(&op_weights(row)?, rng, row.len().min(2)))
            .collect::<Result<_>>()?;
        Some(m)
    } else {
        None
    };
    let (task_loss, task_grad) = evaluator.loss_and_grad(spec, params, mask.as_deref())?;
    if !task_loss.is_finite() {
        return Err(Error::NonFiniteLoss(epoch));
    }
    let cost = chained_expectation(spec, layout, params, cost_model, None, true)?;
    let (_, grad) = combine_gradients((task_loss, &task_grad), (cost.total, &cost.grad), config.lambda, config.tau)?;
    let lr = config.lr_alpha_beta;

    match mask {
        None => {
            let mut next = params.clone();
            next.add_scaled(&grad, -lr);
            Ok(next)
        }
        Some(mask) => {
            let updates: Vec<SampledUpdate> = mask
                .into_iter()
                .enumerate()
                .map(|(layer, sampled)| SampledUpdate {
                    values: sampled.iter().map(|&o| params.alpha[layer][o] - lr * grad.alpha[layer][o]).collect(),
                    layer,
                    sampled,
                })
                .collect();
            let mut next = apply_sampled_update(params, &updates)?;
            for (b, g) in next.beta.iter_mut().zip(&grad.beta) {
                *b -= lr * g;
            }
            Ok(next)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchSample {
    pub exact_cost: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomSearchResult {
    pub best: DerivedArchitecture,
    pub best_score: f64,
    pub samples: Vec<RandomSearchSample>,
    pub attempts: usize,
}

/// Rejection-samples random relaxations until `n_samples` derived
/// architectures fall within `tolerance * cost_target` of the target cost,
/// then returns the one the evaluator scores highest.
#[allow(clippy::too_many_arguments)]
pub fn random_search<E: Evaluator + ?Sized>(
    spec: &SuperNetworkSpec,
    table: &CostTable,
    evaluator: &mut E,
    n_samples: usize,
    cost_target: f64,
    tolerance: f64,
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RandomSearchResult> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if !(cost_target > 0.0) {
        return Err(Error::NonPositive("cost_target", cost_target));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance must be non-negative (got {tolerance})")));
    }
    let mut accepted: Vec<(ArchParams, DerivedArchitecture, f64)> = Vec::new();
    let mut attempts = 0;
    while accepted.len() < n_samples {
        if attempts >= max_attempts {
            return Err(Error::AttemptCap {
                accepted: accepted.len(),
                wanted: n_samples,
                attempts,
                target: cost_target,
                tolerance,
            });
        }
        attempts += 1;
        let params = ArchParams::random_normal(spec, rng, 1.0);
        let arch = derive_unstamped(spec, &params)?;
        let cost = exact_cost(&arch, table)?;
        if (cost - cost_target).abs() <= tolerance * cost_target {
            accepted.push((params, arch, cost));
        }
    }
    let mut samples: Vec<RandomSearchSample> = Vec::with_capacity(accepted.len());
    let mut best = 0;
    for (i, (_, arch, cost)) in accepted.iter().enumerate() {
        let score = evaluator.score(spec, arch)?;
        if !score.is_finite() {
            return Err(Error::NonFinite("evaluator score"));
        }
        if i > 0 && score > samples[best].score {
            best = i;
        }
        samples.push(RandomSearchSample { exact_cost: *cost, score });
    }
    Ok(RandomSearchResult {
        best: derive(spec, &accepted[best].0)?,
        best_score: samples[best].score,
        samples,
        attempts,
    })
}
