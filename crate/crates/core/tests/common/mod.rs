#![allow(dead_code)]

use densespace::space::{build_super_network, CandidateSet, SpaceConfig, StageConfig};
use densespace::{ArchParams, SuperNetworkSpec};
use rand::Rng;

/// Random valid space on a 64x64 input with at most `max_blocks` blocks.
pub fn random_space<R: Rng>(rng: &mut R, max_blocks: usize, max_m: usize) -> SuperNetworkSpec {
    let n_stages = rng.random_range(1..=3);
    let mut res = if rng.random_bool(0.5) { 32 } else { 16 };
    let mut width = 8 * rng.random_range(1..=3u32);
    let mut stages = Vec::new();
    let mut total = 0;
    for _ in 0..n_stages {
        let room = max_blocks - total;
        if room == 0 {
            break;
        }
        let n = rng.random_range(1..=room.min(4));
        let widths = (0..n)
            .map(|_| {
                width += 8 * rng.random_range(0..=2u32);
                width
            })
            .collect();
        stages.push(StageConfig {
            resolution: res,
            widths,
            num_basic_layers: rng.random_bool(0.3).then(|| rng.random_range(1..=3)),
        });
        total += n;
        res /= 2;
    }
    let candidate_set = match rng.random_range(0..3) {
        0 => CandidateSet::Mbconv,
        1 => CandidateSet::ResnetBasic,
        _ => CandidateSet::ResnetBottleneck,
    };
    build_super_network(&SpaceConfig {
        input_resolution: 64,
        stem_width: 8,
        stages,
        max_connections: rng.random_range(1..=max_m),
        num_basic_layers: rng.random_range(1..=3),
        candidate_set,
        head: None,
    })
    .expect("generated config is valid")
}

/// Every alpha row and every block's outgoing betas made one-hot: the
/// chosen entry is 0, the rest -1000 (whose softmax weight underflows to 0).
pub fn random_one_hot<R: Rng>(spec: &SuperNetworkSpec, rng: &mut R) -> ArchParams {
    let mut p = ArchParams::zeros(spec);
    for row in &mut p.alpha {
        let k = rng.random_range(0..row.len());
        for (i, a) in row.iter_mut().enumerate() {
            *a = if i == k { 0.0 } else { -1000.0 };
        }
    }
    let layout = spec.layout();
    for out in &layout.outgoing {
        if out.is_empty() {
            continue;
        }
        let k = rng.random_range(0..out.len());
        for (i, &e) in out.iter().enumerate() {
            p.beta[e] = if i == k { 0.0 } else { -1000.0 };
        }
    }
    p
}

/// Relative error with a floor that keeps near-zero coordinates from
/// dominating: `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `grad` and central differences of `f`.
pub fn max_fd_error(params: &ArchParams, grad: &ArchParams, f: impl Fn(&ArchParams) -> f64, h: f64) -> f64 {
    let scale = f(params).abs();
    let floor = 1e-7 * scale.max(1e-3);
    let mut worst: f64 = 0.0;
    let probe = |p: &ArchParams, set: &dyn Fn(&mut ArchParams, f64)| {
        let mut a = p.clone();
        let mut b = p.clone();
        set(&mut a, h);
        set(&mut b, -h);
        (f(&a) - f(&b)) / (2.0 * h)
    };
    for l in 0..params.alpha.len() {
        for o in 0..params.alpha[l].len() {
            let fd = probe(params, &|p, d| p.alpha[l][o] += d);
            worst = worst.max(rel_err(fd, grad.alpha[l][o], floor));
        }
    }
    for e in 0..params.beta.len() {
        let fd = probe(params, &|p, d| p.beta[e] += d);
        worst = worst.max(rel_err(fd, grad.beta[e], floor));
    }
    worst
}
