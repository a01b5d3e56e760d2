//! Command-line surface of the `densespace` binary.
//!
//! Every command writes its primary outputs deterministically and appends an
//! [`ExperimentReport`] line to `reports.jsonl` next to them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost::{
    architecture_flops, architecture_params, architecture_signatures, chained_cost, exact_breakdown, local_cost,
    CostBreakdown, CostTable, NetworkDescription,
};
use crate::derive::{derive, validate_architecture, DerivedArchitecture};
use crate::error::{Error, Result};
use crate::experiments::{config_hash, correlate, report_path, ConfigDocument, ExperimentReport};
use crate::params::{ArchParams, ParamsSnapshot};
use crate::reference::{preset, Preset, PRESETS};
use crate::search::{random_search, search, EvaluatorConfig, SearchConfig, SyntheticEvaluator};
use crate::space::{build_super_network, SuperNetworkSpec};
use crate::util::{read_json, write_canonical_json, write_text};

#[derive(Debug, Parser)]
#[command(name = "densespace", version, about = "Densely connected architecture search spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Super network construction.
    #[command(subcommand)]
    Space(SpaceCommand),
    /// Run the two-stage search with the synthetic evaluator.
    Search(SearchArgs),
    /// Derive an architecture from a parameter snapshot.
    Derive(DeriveArgs),
    /// Correlate chained and local cost estimates with exact costs.
    Correlate(CorrelateArgs),
    /// Print a cost breakdown as JSON.
    Cost(CostArgs),
    /// Random-search baseline.
    RandomSearch(RandomSearchArgs),
    /// Write an analytic FLOPs table covering a super network.
    Table(TableArgs),
    /// Write a bundled reference network.
    Preset(PresetArgs),
}

#[derive(Debug, Subcommand)]
pub enum SpaceCommand {
    /// Build and validate a super network from a config document.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Config document with `search` / `evaluator` sections, or a bare search config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Cost table CSV; analytic FLOPs when omitted.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 1500)]
    pub n_models: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV of (chained, local, exact) rows.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostMode {
    Exact,
    Chained,
    Local,
    FlopsCount,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, value_enum)]
    pub mode: CostMode,
    /// Derived architecture or network description JSON.
    #[arg(long, conflicts_with_all = ["spec", "preset"])]
    pub arch: Option<PathBuf>,
    /// Bundled reference network instead of a file.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    #[arg(long, requires = "params")]
    pub spec: Option<PathBuf>,
    #[arg(long, requires = "spec")]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RandomSearchArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Config document whose `evaluator` section configures scoring.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub n: usize,
    /// Target exact cost, in table units.
    #[arg(long)]
    pub target: f64,
    /// Accepted relative deviation from the target.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_attempts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn dir_of(path: &Path) -> &Path {
    path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn load_spec(path: &Path) -> Result<SuperNetworkSpec> {
    let spec: SuperNetworkSpec = read_json(path)?;
    let report = crate::space::validate(&spec);
    if !report.is_valid() {
        return Err(Error::Validation(report.violations));
    }
    Ok(spec)
}

fn load_table(path: Option<&Path>, spec: Option<&SuperNetworkSpec>) -> Result<CostTable> {
    match (path, spec) {
        (Some(p), _) => CostTable::read_csv_path(p),
        (None, Some(spec)) => CostTable::analytic_flops(spec),
        (None, None) => Err(Error::Config("a cost table is required".into())),
    }
}

fn table_label(path: Option<&Path>) -> Value {
    path.map_or(Value::from("analytic-flops"), |p| Value::from(p.display().to_string()))
}

/// Search and evaluator settings from either a config document or a bare
/// search config.
fn load_search_settings(path: &Path) -> Result<(SearchConfig, EvaluatorConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(&context, e))?;
    let is_document = ["search", "evaluator", "stages"]
        .iter()
        .any(|k| value.get(k).is_some());
    if is_document {
        #[derive(Deserialize)]
        struct Sections {
            #[serde(default)]
            search: SearchConfig,
            #[serde(default)]
            evaluator: EvaluatorConfig,
        }
        let s: Sections = serde_json::from_str(&text).map_err(|e| Error::json(&context, e))?;
        Ok((s.search, s.evaluator))
    } else {
        let search = serde_json::from_str(&text).map_err(|e| Error::json(&context, e))?;
        Ok((search, EvaluatorConfig::default()))
    }
}

#[derive(Serialize)]
struct FlopsCount<'a> {
    name: &'a str,
    flops: f64,
    params: u64,
}

enum CostSubject {
    Network(NetworkDescription),
    Architecture(DerivedArchitecture),
}

fn load_subject(path: &Path) -> Result<CostSubject> {
    let value: Value = read_json(path)?;
    let context = path.display().to_string();
    if value.get("blocks").is_some() {
        serde_json::from_value(value)
            .map(CostSubject::Architecture)
            .map_err(|e| Error::json(&context, e))
    } else {
        serde_json::from_value(value)
            .map(CostSubject::Network)
            .map_err(|e| Error::json(&context, e))
    }
}

fn network_breakdown(net: &NetworkDescription, table: &CostTable) -> Result<CostBreakdown> {
    let costs = table.lookup_all(&net.layers)?;
    Ok(CostBreakdown {
        estimator: "exact".into(),
        unit: table.unit,
        basic: Vec::new(),
        align: Vec::new(),
        total: costs.iter().sum(),
    })
}

fn cost_json(args: &CostArgs) -> Result<String> {
    let subject = match (&args.arch, &args.preset) {
        (Some(p), _) => Some(load_subject(p)?),
        (None, Some(name)) => Some(match preset(name)? {
            Preset::Network(n) => CostSubject::Network(n),
            Preset::Architecture(a) => CostSubject::Architecture(a),
        }),
        (None, None) => None,
    };
    let out = match (args.mode, subject) {
        (CostMode::FlopsCount, Some(CostSubject::Network(n))) => serde_json::to_value(FlopsCount {
            name: &n.name,
            flops: n.flops()?,
            params: n.params()?,
        }),
        (CostMode::FlopsCount, Some(CostSubject::Architecture(a))) => serde_json::to_value(FlopsCount {
            name: "architecture",
            flops: architecture_flops(&a)?,
            params: architecture_params(&a)?,
        }),
        (CostMode::Exact, Some(CostSubject::Network(n))) => {
            let table = match &args.table {
                Some(p) => CostTable::read_csv_path(p)?,
                None => CostTable::analytic_flops_for(&n.layers)?,
            };
            serde_json::to_value(network_breakdown(&n, &table)?)
        }
        (CostMode::Exact, Some(CostSubject::Architecture(a))) => {
            let table = match &args.table {
                Some(p) => CostTable::read_csv_path(p)?,
                None => CostTable::analytic_flops_for(&architecture_signatures(&a))?,
            };
            serde_json::to_value(exact_breakdown(&a, &table)?)
        }
        (CostMode::Chained | CostMode::Local, Some(_)) => {
            return Err(Error::Config(
                "chained and local modes need --spec and --params, not a concrete architecture".into(),
            ))
        }
        (mode, None) => {
            let (Some(spec_path), Some(params_path)) = (&args.spec, &args.params) else {
                return Err(Error::Config("give --arch, --preset, or --spec with --params".into()));
            };
            let spec = load_spec(spec_path)?;
            let snap: ParamsSnapshot = read_json(params_path)?;
            let params = ArchParams::from_snapshot(&spec, &snap)?;
            let table = load_table(args.table.as_deref(), Some(&spec))?;
            match mode {
                CostMode::Chained => serde_json::to_value(chained_cost(&spec, &params, &table)?.1),
                CostMode::Local => serde_json::to_value(local_cost(&spec, &params, &table)?.1),
                CostMode::Exact => serde_json::to_value(exact_breakdown(&derive(&spec, &params)?, &table)?),
                CostMode::FlopsCount => {
                    let arch = derive(&spec, &params)?;
                    serde_json::to_value(FlopsCount {
                        name: "architecture",
                        flops: architecture_flops(&arch)?,
                        params: architecture_params(&arch)?,
                    })
                }
            }
        }
    }
    .map_err(|e| Error::json("cost output", e))?;
    crate::util::canonical_json(&out)
}

fn base_report(name: &str, inputs: BTreeMap<&str, Value>) -> ExperimentReport {
    inputs
        .into_iter()
        .fold(ExperimentReport::new(name), |r, (k, v)| r.input(k, v))
}

/// Runs one parsed command; the returned string is printed to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Space(SpaceCommand::Build { config, out }) => {
            let doc = ConfigDocument::load(config)?;
            let spec = build_super_network(&doc.space)?;
            write_canonical_json(out, &spec)?;
            let hash = spec.content_hash()?;
            base_report(
                "space-build",
                BTreeMap::from([
                    ("config_hash", config_hash(&doc.space)?.into()),
                    ("spec_hash", hash.clone().into()),
                ]),
            )
            .result("blocks", spec.n_blocks() as f64)
            .result("connections", spec.connections.len() as f64)
            .artifact(out)
            .append(&report_path(dir_of(out)))?;
            Ok(format!(
                "valid super network: {} blocks, {} connections, spec hash {hash}",
                spec.n_blocks(),
                spec.connections.len()
            ))
        }
        Command::Search(a) => {
            let spec = load_spec(&a.spec)?;
            let (mut config, ev_config) = load_search_settings(&a.config)?;
            config.seed = a.seed.unwrap_or(config.seed);
            config.lambda = a.lambda.unwrap_or(config.lambda);
            config.tau = a.tau.unwrap_or(config.tau);
            let table = load_table(a.table.as_deref(), Some(&spec))?;
            let mut evaluator = SyntheticEvaluator::from_config(&spec, &ev_config)?;
            let (params, trace) = search(&spec, &config, &mut evaluator, &table)?;
            let arch = derive(&spec, &params)?;

            let trace_path = a.out.join("trace.jsonl");
            let params_path = a.out.join("params.json");
            let arch_path = a.out.join("architecture.json");
            write_text(&trace_path, &trace.to_jsonl()?)?;
            write_canonical_json(&params_path, &params.to_snapshot(&spec)?)?;
            write_canonical_json(&arch_path, &arch)?;
            let last = trace.records.last();
            let exact = crate::cost::exact_cost(&arch, &table)?;
            let mut report = base_report(
                "search",
                BTreeMap::from([
                    ("spec_hash", spec.content_hash()?.into()),
                    ("search_config_hash", config_hash(&config)?.into()),
                    ("evaluator_config_hash", config_hash(&ev_config)?.into()),
                    ("seed", config.seed.into()),
                    ("evaluator_seed", ev_config.seed.into()),
                    ("table", table_label(a.table.as_deref())),
                ]),
            )
            .result("exact_cost", exact)
            .artifact(&trace_path)
            .artifact(&params_path)
            .artifact(&arch_path);
            if let Some(r) = last {
                report = report
                    .result("final_task_loss", r.task_loss)
                    .result("final_chained_cost", r.cost);
            }
            report.append(&report_path(&a.out))?;
            Ok(format!(
                "derived blocks {:?}, exact cost {exact}; outputs in {}",
                arch.block_indices(),
                a.out.display()
            ))
        }
        Command::Derive(a) => {
            let spec = load_spec(&a.spec)?;
            let snap: ParamsSnapshot = read_json(&a.params)?;
            let params = ArchParams::from_snapshot(&spec, &snap)?;
            let arch = derive(&spec, &params)?;
            validate_architecture(&spec, &arch)?;
            write_canonical_json(&a.out, &arch)?;
            base_report(
                "derive",
                BTreeMap::from([
                    ("spec_hash", arch.provenance.spec_hash.clone().into()),
                    ("params_hash", arch.provenance.params_hash.clone().into()),
                ]),
            )
            .result("blocks", arch.blocks.len() as f64)
            .artifact(&a.out)
            .append(&report_path(dir_of(&a.out)))?;
            Ok(format!("derived blocks {:?}", arch.block_indices()))
        }
        Command::Correlate(a) => {
            let spec = load_spec(&a.spec)?;
            let table = load_table(a.table.as_deref(), Some(&spec))?;
            let r = correlate(&spec, &table, a.n_models, a.seed, a.workers)?;
            write_text(&a.out, &r.to_csv()?)?;
            base_report(
                "correlate",
                BTreeMap::from([
                    ("spec_hash", spec.content_hash()?.into()),
                    ("seed", a.seed.into()),
                    ("n_models", a.n_models.into()),
                    ("table", table_label(a.table.as_deref())),
                ]),
            )
            .result("rho_chained", r.rho_chained)
            .result("rho_local", r.rho_local)
            .artifact(&a.out)
            .append(&report_path(dir_of(&a.out)))?;
            Ok(format!(
                "rho(chained, exact) = {:.6}\nrho(local, exact) = {:.6}",
                r.rho_chained, r.rho_local
            ))
        }
        Command::Cost(a) => cost_json(a).map(|s| s.trim_end().to_string()),
        Command::RandomSearch(a) => {
            let spec = load_spec(&a.spec)?;
            let ev_config = match &a.config {
                Some(p) => load_search_settings(p)?.1,
                None => EvaluatorConfig::default(),
            };
            let table = load_table(a.table.as_deref(), Some(&spec))?;
            let mut evaluator = SyntheticEvaluator::from_config(&spec, &ev_config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let r = random_search(
                &spec,
                &table,
                &mut evaluator,
                a.n,
                a.target,
                a.tolerance,
                a.max_attempts,
                &mut rng,
            )?;
            let arch_path = a.out.join("architecture.json");
            write_canonical_json(&arch_path, &r.best)?;
            base_report(
                "random-search",
                BTreeMap::from([
                    ("spec_hash", spec.content_hash()?.into()),
                    ("evaluator_config_hash", config_hash(&ev_config)?.into()),
                    ("seed", a.seed.into()),
                    ("target", a.target.into()),
                    ("tolerance", a.tolerance.into()),
                    ("table", table_label(a.table.as_deref())),
                ]),
            )
            .result("best_score", r.best_score)
            .result("attempts", r.attempts as f64)
            .artifact(&arch_path)
            .append(&report_path(&a.out))?;
            Ok(format!(
                "best of {} accepted samples ({} attempts): score {}, blocks {:?}",
                r.samples.len(),
                r.attempts,
                r.best_score,
                r.best.block_indices()
            ))
        }
        Command::Table(a) => {
            let spec = load_spec(&a.spec)?;
            let table = CostTable::analytic_flops(&spec)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            write_text(&a.out, &String::from_utf8(buf).expect("csv output is utf-8"))?;
            Ok(format!("{} entries written to {}", table.len(), a.out.display()))
        }
        Command::Preset(a) => {
            match preset(&a.name)? {
                Preset::Network(n) => write_canonical_json(&a.out, &n)?,
                Preset::Architecture(arch) => write_canonical_json(&a.out, &arch)?,
            }
            Ok(format!("{} written to {}", a.name, a.out.display()))
        }
    }
}
