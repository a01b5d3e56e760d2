//! Config documents, experiment reports and the estimator correlation study.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost::{chained_expectation, exact_cost, CostTable, ValueModel};
use crate::derive::derive_unstamped;
use crate::error::{Error, Result};
use crate::params::ArchParams;
use crate::search::{EvaluatorConfig, SearchConfig};
use crate::space::{SpaceConfig, SuperNetworkSpec};
use crate::util::{content_hash, pearson};

/// A space config with optional `search` and `evaluator` sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    #[serde(flatten)]
    pub space: SpaceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<EvaluatorConfig>,
}

impl ConfigDocument {
    /// Parses the space and the optional sections in separate passes so
    /// that error positions point at the offending field.
    pub fn parse(context: &str, text: &str) -> Result<Self> {
        let err = |e: serde_json::Error| Error::Parse {
            context: context.to_string(),
            message: e.to_string(),
        };
        let space: SpaceConfig = serde_json::from_str(text).map_err(err)?;
        let sections: Sections = serde_json::from_str(text).map_err(err)?;
        Ok(ConfigDocument {
            space,
            search: sections.search,
            evaluator: sections.evaluator,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }
}

#[derive(Deserialize)]
struct Sections {
    #[serde(default)]
    search: Option<SearchConfig>,
    #[serde(default)]
    evaluator: Option<EvaluatorConfig>,
}

/// One line of the append-only report log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// Config hashes, seeds and other inputs.
    pub inputs: BTreeMap<String, Value>,
    pub results: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn new(experiment: &str) -> Self {
        ExperimentReport {
            experiment: experiment.to_string(),
            ..Default::default()
        }
    }

    pub fn input(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.inputs.insert(key.to_string(), value.into());
        self
    }

    pub fn result(mut self, key: &str, value: f64) -> Self {
        self.results.insert(key.to_string(), value);
        self
    }

    pub fn artifact(mut self, path: &Path) -> Self {
        self.artifacts.push(path.display().to_string());
        self
    }

    /// Appends the report as one JSON line to `path`.
    pub fn append(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let line = serde_json::to_string(&serde_json::to_value(self).map_err(|e| Error::json("report", e))?)
            .map_err(|e| Error::json("report", e))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }
}

/// Report log next to the primary outputs of a command.
pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("reports.jsonl")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub index: usize,
    pub chained: f64,
    pub local: f64,
    pub exact: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationResult {
    pub rows: Vec<CorrelationRow>,
    pub rho_chained: f64,
    pub rho_local: f64,
}

impl CorrelationResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Parse {
                context: "correlation csv".into(),
                message: e.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse {
            context: "correlation csv".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Random relaxation for sample `index`: its own ChaCha stream of the
/// master seed, i.i.d. standard normal entries.
pub fn sample_params(spec: &SuperNetworkSpec, seed: u64, index: usize) -> ArchParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    ArchParams::random_normal(spec, &mut rng, 1.0)
}

/// Chained, local and exact cost of one relaxation.
pub fn estimate_all(
    spec: &SuperNetworkSpec,
    model: &ValueModel,
    table: &CostTable,
    params: &ArchParams,
) -> Result<(f64, f64, f64)> {
    let layout = spec.layout();
    let r = chained_expectation(spec, &layout, params, model, None, false)?;
    let local = r.graph.local()?;
    let exact = exact_cost(&derive_unstamped(spec, params)?, table)?;
    Ok((r.total, local, exact))
}

/// Compares the chained and local estimators against the exact cost of the
/// derived architecture over `n_models` random relaxations, evaluated on
/// `workers` threads. Rows are ordered by sample index.
pub fn correlate(
    spec: &SuperNetworkSpec,
    table: &CostTable,
    n_models: usize,
    seed: u64,
    workers: usize,
) -> Result<CorrelationResult> {
    correlate_params(spec, table, workers, (0..n_models).map(|i| sample_params(spec, seed, i)).collect())
}

/// [`correlate`] on explicitly given relaxations.
pub fn correlate_params(
    spec: &SuperNetworkSpec,
    table: &CostTable,
    workers: usize,
    samples: Vec<ArchParams>,
) -> Result<CorrelationResult> {
    if samples.len() < 2 {
        return Err(Error::Config(format!("need at least 2 models (got {})", samples.len())));
    }
    let model = ValueModel::from_table(spec, &spec.layout(), table)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows: Vec<CorrelationRow> = pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(index, params)| {
                let (chained, local, exact) = estimate_all(spec, &model, table, params)?;
                Ok(CorrelationRow {
                    index,
                    chained,
                    local,
                    exact,
                })
            })
            .collect::<Result<_>>()
    })?;
    let col = |f: fn(&CorrelationRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (chained, local, exact) = (col(|r| r.chained), col(|r| r.local), col(|r| r.exact));
    let rho = |xs: &[f64], name: &str| {
        pearson(xs, &exact).ok_or_else(|| Error::DegenerateVariance(format!("{name} or exact costs are constant")))
    };
    Ok(CorrelationResult {
        rho_chained: rho(&chained, "chained")?,
        rho_local: rho(&local, "local")?,
        rows,
    })
}

/// Hash identifying a config-like value in reports.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    content_hash(value)
}
