//! Acceptance suite. Runs as a plain binary and prints one PASS/FAIL line
//! per criterion, with its runtime against the budget.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use densespace::cost::{chained_cost, cost_gradients, exact_cost};
use densespace::derive::{brute_force_best_path, derive, viterbi_derive};
use densespace::experiments::correlate;
use densespace::params::{apply_sampled_update, op_weights, path_probs, SampledUpdate};
use densespace::reference::{densenas_r1, densenas_r2, densenas_r3, mbv2_space, resnet18, resnet34, resnet50b};
use densespace::search::{search, SearchConfig, SyntheticEvaluator};
use densespace::{ArchParams, CostTable};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn within(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

fn flops_reproduction() -> Outcome {
    let mut notes = Vec::new();
    for (net, want) in [(resnet18(), 1.81e9), (resnet34(), 3.66e9), (resnet50b(), 4.09e9)] {
        let got = net.flops().map_err(|e| e.to_string())?;
        if !within(got, want, 0.02) {
            return Err(format!("{}: {got:.4e} vs {want:.2e}", net.name));
        }
        notes.push(format!("{} {got:.3e}", net.name));
    }
    Ok(notes.join(", "))
}

fn densenas_reproduction() -> Outcome {
    let mut notes = Vec::new();
    let expect = [
        ("R1", densenas_r1(), 1.61e9, 11.1e6),
        ("R2", densenas_r2(), 3.06e9, 19.5e6),
        ("R3", densenas_r3(), 3.41e9, 24.7e6),
    ];
    for (name, arch, flops, params) in expect {
        let arch = arch.map_err(|e| e.to_string())?;
        let table = CostTable::analytic_flops_for(&densespace::cost::architecture_signatures(&arch))
            .map_err(|e| e.to_string())?;
        let got_flops = exact_cost(&arch, &table).map_err(|e| e.to_string())?;
        let got_params = densespace::cost::architecture_params(&arch).map_err(|e| e.to_string())? as f64;
        if !within(got_flops, flops, 0.02) || !within(got_params, params, 0.02) {
            return Err(format!("{name}: {got_flops:.4e} FLOPs, {got_params:.4e} params"));
        }
        notes.push(format!("{name} {got_flops:.3e}/{:.2}M", got_params / 1e6));
    }
    Ok(notes.join(", "))
}

fn correlation_ordering() -> Outcome {
    let spec = mbv2_space().map_err(|e| e.to_string())?;
    let table = CostTable::analytic_flops(&spec).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for seed in [0, 1, 2] {
        let r = correlate(&spec, &table, 1500, seed, 4).map_err(|e| e.to_string())?;
        let note = format!("seed {seed}: {:.4} > {:.4}", r.rho_chained, r.rho_local);
        if r.rho_chained <= r.rho_local {
            return Err(note);
        }
        notes.push(note);
    }
    Ok(notes.join(", "))
}

fn viterbi_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000 {
        let spec = common::random_space(&mut rng, 12, 4);
        let mut params = ArchParams::random_normal(&spec, &mut rng, 1.5);
        if trial % 4 == 0 {
            params.beta.iter_mut().for_each(|b| *b = b.round());
        }
        let dist = path_probs(&spec, &params).map_err(|e| e.to_string())?;
        let v = viterbi_derive(&spec, &dist).map_err(|e| e.to_string())?;
        let b = brute_force_best_path(&spec, &dist).map_err(|e| e.to_string())?;
        if v != b {
            return Err(format!("trial {trial}: {v:?} vs {b:?}"));
        }
    }
    Ok("1000/1000 identical".into())
}

fn one_hot_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let spec = common::random_space(&mut rng, 12, 4);
        let table = CostTable::analytic_flops(&spec).map_err(|e| e.to_string())?;
        let params = common::random_one_hot(&spec, &mut rng);
        let (chained, _) = chained_cost(&spec, &params, &table).map_err(|e| e.to_string())?;
        let arch = derive(&spec, &params).map_err(|e| e.to_string())?;
        let exact = exact_cost(&arch, &table).map_err(|e| e.to_string())?;
        worst = worst.max(((chained - exact) / exact).abs());
    }
    if worst < 1e-6 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e}"))
    }
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut cost_worst, mut eval_worst): (f64, f64) = (0.0, 0.0);
    let n_spaces = 24;
    for seed in 0..n_spaces {
        let spec = common::random_space(&mut rng, 6, 3);
        let table = CostTable::analytic_flops(&spec).map_err(|e| e.to_string())?;
        let params = ArchParams::random_normal(&spec, &mut rng, 1.0);
        let grad = cost_gradients(&spec, &params, &table).map_err(|e| e.to_string())?;
        let f = |p: &ArchParams| chained_cost(&spec, p, &table).unwrap().0;
        cost_worst = cost_worst.max(common::max_fd_error(&params, &grad, f, 1e-5));

        let mut ev = SyntheticEvaluator::new(&spec, seed, 0.0).map_err(|e| e.to_string())?;
        ev.set_maturity(0.8);
        let (_, grad) = ev.expected_quality(&spec, &params, None).map_err(|e| e.to_string())?;
        let f = |p: &ArchParams| ev.expected_quality(&spec, p, None).unwrap().0;
        eval_worst = eval_worst.max(common::max_fd_error(&params, &grad, f, 1e-5));
    }
    let note = format!("{n_spaces} spaces, max relative error cost {cost_worst:.2e}, evaluator {eval_worst:.2e}");
    if cost_worst < 1e-4 && eval_worst < 1e-4 {
        Ok(note)
    } else {
        Err(note)
    }
}

fn drop_path_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let n = 2000;
    for _ in 0..n {
        let len = rng.random_range(2..=8);
        let alpha: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let k = rng.random_range(1..len);
        let sampled = sample(&mut rng, len, k).into_vec();
        let values = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let params = ArchParams {
            alpha: vec![alpha.clone()],
            beta: vec![],
        };
        let update = SampledUpdate {
            layer: 0,
            sampled: sampled.clone(),
            values,
        };
        let next = apply_sampled_update(&params, &[update]).map_err(|e| e.to_string())?;
        let before = op_weights(&alpha).map_err(|e| e.to_string())?;
        let after = op_weights(&next.alpha[0]).map_err(|e| e.to_string())?;
        for i in (0..len).filter(|i| !sampled.contains(i)) {
            worst = worst.max((before[i] - after[i]).abs());
        }
    }
    if worst < 1e-9 {
        Ok(format!("{n} triples, max drift {worst:.2e}"))
    } else {
        Err(format!("max drift {worst:.2e}"))
    }
}

fn search_behavior() -> Outcome {
    let spec = mbv2_space().map_err(|e| e.to_string())?;
    let table = CostTable::analytic_flops(&spec).map_err(|e| e.to_string())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for seed in 0..10u64 {
        let mut ev = SyntheticEvaluator::planted(&spec, 100 + seed, 3.0, 1.0).map_err(|e| e.to_string())?;
        let config = SearchConfig {
            lambda: 0.0,
            seed,
            drop_path: true,
            ..SearchConfig::default()
        };
        let (params, _) = search(&spec, &config, &mut ev, &table).map_err(|e| e.to_string())?;
        let arch = derive(&spec, &params).map_err(|e| e.to_string())?;
        let dominant = ev.dominant().expect("planted evaluator").to_vec();
        for (l, choice) in ev.choices(&spec, &arch).map_err(|e| e.to_string())?.iter().enumerate() {
            if let Some(c) = choice {
                total += 1;
                hit += usize::from(*c == dominant[l]);
            }
        }
    }
    let rate = hit as f64 / total as f64;
    if rate < 0.95 {
        return Err(format!("recovered {hit}/{total} layers"));
    }

    let (lo, hi) = (0.5, 2.0);
    let mut means = [0.0; 2];
    for seed in 0..10u64 {
        for (k, lambda) in [lo, hi].into_iter().enumerate() {
            let mut ev = SyntheticEvaluator::new(&spec, 200 + seed, 0.1).map_err(|e| e.to_string())?;
            let config = SearchConfig {
                lambda,
                seed,
                ..SearchConfig::default()
            };
            let (params, _) = search(&spec, &config, &mut ev, &table).map_err(|e| e.to_string())?;
            let arch = derive(&spec, &params).map_err(|e| e.to_string())?;
            means[k] += exact_cost(&arch, &table).map_err(|e| e.to_string())? / 10.0;
        }
    }
    let note = format!(
        "recovered {hit}/{total} layers; mean cost {:.3e} at lambda {lo}, {:.3e} at lambda {hi}",
        means[0], means[1]
    );
    if means[1] <= means[0] {
        Ok(note)
    } else {
        Err(note)
    }
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_densespace"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn run_pipeline(root: &Path) -> Result<(), String> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/mbv2_space.json");
    let p = |name: &str| root.join(name).display().to_string();
    cli(&["space", "build", "--config", config, "--out", &p("spec.json")])?;
    cli(&["table", "--spec", &p("spec.json"), "--out", &p("table.csv")])?;
    cli(&["search", "--spec", &p("spec.json"), "--config", config, "--table", &p("table.csv"), "--out", &p("search")])?;
    cli(&["derive", "--spec", &p("spec.json"), "--params", &p("search/params.json"), "--out", &p("derived.json")])?;
    cli(&["correlate", "--spec", &p("spec.json"), "--n-models", "200", "--out", &p("corr.csv")])?;
    let target = "3.0e8";
    cli(&["random-search", "--spec", &p("spec.json"), "--config", config, "--n", "5", "--target", target, "--tolerance", "0.2", "--out", &p("random")])?;
    cli(&["preset", "--name", "densenas-r1", "--out", &p("r1.json")])?;
    Ok(())
}

const PRIMARY_OUTPUTS: [&str; 9] = [
    "spec.json",
    "table.csv",
    "search/trace.jsonl",
    "search/params.json",
    "search/architecture.json",
    "derived.json",
    "corr.csv",
    "random/architecture.json",
    "r1.json",
];

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let mut compared = 0;
    for file in PRIMARY_OUTPUTS {
        let (pa, pb) = (a.path().join(file), b.path().join(file));
        let (x, y) = (std::fs::read(&pa).map_err(|e| e.to_string())?, std::fs::read(&pb).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("{file} differs between runs"));
        }
        compared += 1;
    }
    Ok(format!("{compared} output files byte-identical across two runs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("1 resnet flops", flops_reproduction, Duration::from_secs(1)),
        ("2 densenas-r flops/params", densenas_reproduction, Duration::from_secs(1)),
        ("3 chained vs local correlation", correlation_ordering, Duration::from_secs(120)),
        ("4 viterbi == brute force", viterbi_equivalence, Duration::from_secs(30)),
        ("5 one-hot chained == exact", one_hot_consistency, Duration::from_secs(10)),
        ("6 finite-difference gradients", gradient_checks, Duration::from_secs(60)),
        ("7 dropping-path preservation", drop_path_preservation, Duration::from_secs(5)),
        ("8 search recovery and lambda", search_behavior, Duration::from_secs(300)),
        ("9 determinism", determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(" / {budget:?}")
        };
        let (status, note) = match outcome {
            Ok(note) if elapsed <= budget => ("PASS", note),
            Ok(note) => ("FAIL", format!("{note}; over time budget")),
            Err(note) => ("FAIL", note),
        };
        failed += usize::from(status == "FAIL");
        println!("{status} [{name}] {note} ({:.2?}{budget_note})", elapsed);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
