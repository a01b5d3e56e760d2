//! Python bindings. Configs and parameter snapshots cross the boundary as
//! JSON strings; spaces, parameters and architectures are opaque handles.

use densespace::cost::{self, architecture_flops, architecture_params, exact_cost};
use densespace::experiments::{correlate as run_correlate, ConfigDocument};
use densespace::params::ParamsSnapshot;
use densespace::reference::{self, Preset};
use densespace::search::{EvaluatorConfig, SyntheticEvaluator};
use densespace::util::canonical_json;
use densespace::{ArchParams, CostTable, DerivedArchitecture, Error, SearchConfig, SuperNetworkSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "SuperNetwork", frozen)]
struct PySpace {
    spec: SuperNetworkSpec,
    table: CostTable,
}

impl PySpace {
    fn table(&self, table_csv: Option<&str>) -> PyResult<CostTable> {
        match table_csv {
            Some(text) => CostTable::read_csv(text.as_bytes()).map_err(to_py),
            None => Ok(self.table.clone()),
        }
    }
}

#[pymethods]
impl PySpace {
    /// Builds a super network from a space config; `search` and `evaluator`
    /// sections are accepted and ignored.
    #[staticmethod]
    fn from_config(config_json: &str) -> PyResult<Self> {
        let doc = ConfigDocument::parse("config", config_json).map_err(to_py)?;
        let spec = densespace::build_super_network(&doc.space).map_err(to_py)?;
        Self::from_spec(spec)
    }

    #[staticmethod]
    fn from_json(spec_json: &str) -> PyResult<Self> {
        Self::from_spec(serde_json::from_str(spec_json).map_err(json_err)?)
    }

    /// One of the bundled spaces: `mbv2`, `resnet_basic` or `resnet_bottleneck`.
    #[staticmethod]
    fn reference(name: &str) -> PyResult<Self> {
        let spec = match name {
            "mbv2" => reference::mbv2_space(),
            "resnet_basic" => reference::resnet_basic_space(),
            "resnet_bottleneck" => reference::resnet_bottleneck_space(),
            other => return Err(PyValueError::new_err(format!("unknown space {other:?}"))),
        };
        Self::from_spec(spec.map_err(to_py)?)
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.spec.n_blocks()
    }

    #[getter]
    fn n_connections(&self) -> usize {
        self.spec.connections.len()
    }

    fn to_json(&self) -> PyResult<String> {
        self.spec.to_canonical_json().map_err(to_py)
    }

    fn content_hash(&self) -> PyResult<String> {
        self.spec.content_hash().map_err(to_py)
    }

    /// Analytic FLOPs table for every signature in the space, as CSV.
    fn flops_table_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.table.write_csv(&mut buf).map_err(to_py)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    fn zeros(&self) -> PyParams {
        PyParams {
            params: ArchParams::zeros(&self.spec),
        }
    }

    #[pyo3(signature = (seed, std = 1.0))]
    fn random_params(&self, seed: u64, std: f64) -> PyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyParams {
            params: ArchParams::random_normal(&self.spec, &mut rng, std),
        }
    }

    fn params_from_json(&self, snapshot_json: &str) -> PyResult<PyParams> {
        let snap: ParamsSnapshot = serde_json::from_str(snapshot_json).map_err(json_err)?;
        let params = ArchParams::from_snapshot(&self.spec, &snap).map_err(to_py)?;
        Ok(PyParams { params })
    }

    fn params_to_json(&self, params: &PyParams) -> PyResult<String> {
        let snap = params.params.to_snapshot(&self.spec).map_err(to_py)?;
        canonical_json(&snap).map_err(to_py)
    }

    #[pyo3(signature = (params, table_csv = None))]
    fn chained_cost(&self, params: &PyParams, table_csv: Option<&str>) -> PyResult<f64> {
        let table = self.table(table_csv)?;
        Ok(cost::chained_cost(&self.spec, &params.params, &table).map_err(to_py)?.0)
    }

    #[pyo3(signature = (params, table_csv = None))]
    fn local_cost(&self, params: &PyParams, table_csv: Option<&str>) -> PyResult<f64> {
        let table = self.table(table_csv)?;
        Ok(cost::local_cost(&self.spec, &params.params, &table).map_err(to_py)?.0)
    }

    /// Gradient of the chained cost, as a parameter snapshot in JSON.
    #[pyo3(signature = (params, table_csv = None))]
    fn cost_gradient_json(&self, params: &PyParams, table_csv: Option<&str>) -> PyResult<String> {
        let table = self.table(table_csv)?;
        let grad = cost::cost_gradients(&self.spec, &params.params, &table).map_err(to_py)?;
        self.params_to_json(&PyParams { params: grad })
    }

    fn derive(&self, params: &PyParams) -> PyResult<PyArchitecture> {
        let arch = densespace::derive(&self.spec, &params.params).map_err(to_py)?;
        Ok(PyArchitecture { arch })
    }

    #[pyo3(signature = (arch, table_csv = None))]
    fn exact_cost(&self, arch: &PyArchitecture, table_csv: Option<&str>) -> PyResult<f64> {
        let table = self.table(table_csv)?;
        exact_cost(&arch.arch, &table).map_err(to_py)
    }

    /// Pearson correlations `(chained, local)` against the exact cost.
    #[pyo3(signature = (n_models = 1500, seed = 0, workers = 4))]
    fn correlate(&self, py: Python<'_>, n_models: usize, seed: u64, workers: usize) -> PyResult<(f64, f64)> {
        let r = py
            .detach(|| run_correlate(&self.spec, &self.table, n_models, seed, workers))
            .map_err(to_py)?;
        Ok((r.rho_chained, r.rho_local))
    }

    /// Runs the search against the synthetic evaluator. Both configs are
    /// JSON objects; omitted fields take their defaults.
    #[pyo3(signature = (search_json = None, evaluator_json = None))]
    fn search(
        &self,
        py: Python<'_>,
        search_json: Option<&str>,
        evaluator_json: Option<&str>,
    ) -> PyResult<(PyParams, PyArchitecture)> {
        let config: SearchConfig = search_json
            .map(serde_json::from_str)
            .transpose()
            .map_err(json_err)?
            .unwrap_or_default();
        let ev_config: EvaluatorConfig = evaluator_json
            .map(serde_json::from_str)
            .transpose()
            .map_err(json_err)?
            .unwrap_or_default();
        let (params, arch) = py
            .detach(|| {
                let mut ev = SyntheticEvaluator::from_config(&self.spec, &ev_config)?;
                let (params, _) = densespace::search(&self.spec, &config, &mut ev, &self.table)?;
                let arch = densespace::derive(&self.spec, &params)?;
                Ok::<_, Error>((params, arch))
            })
            .map_err(to_py)?;
        Ok((PyParams { params }, PyArchitecture { arch }))
    }
}

impl PySpace {
    fn from_spec(spec: SuperNetworkSpec) -> PyResult<Self> {
        let table = CostTable::analytic_flops(&spec).map_err(to_py)?;
        Ok(PySpace { spec, table })
    }
}

#[pyclass(name = "Params", frozen)]
struct PyParams {
    params: ArchParams,
}

#[pymethods]
impl PyParams {
    #[getter]
    fn alpha(&self) -> Vec<Vec<f64>> {
        self.params.alpha.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.params.beta.clone()
    }
}

#[pyclass(name = "Architecture", frozen)]
struct PyArchitecture {
    arch: DerivedArchitecture,
}

#[pymethods]
impl PyArchitecture {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyArchitecture {
            arch: serde_json::from_str(text).map_err(json_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.arch.to_canonical_json().map_err(to_py)
    }

    #[getter]
    fn blocks(&self) -> Vec<usize> {
        self.arch.block_indices()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.arch.depth()
    }

    fn flops(&self) -> PyResult<f64> {
        architecture_flops(&self.arch).map_err(to_py)
    }

    fn params(&self) -> PyResult<u64> {
        architecture_params(&self.arch).map_err(to_py)
    }
}

/// FLOPs and parameter count of a named reference network.
#[pyfunction]
fn preset_counts(name: &str) -> PyResult<(f64, u64)> {
    match reference::preset(name).map_err(to_py)? {
        Preset::Network(net) => Ok((net.flops().map_err(to_py)?, net.params().map_err(to_py)?)),
        Preset::Architecture(arch) => Ok((
            architecture_flops(&arch).map_err(to_py)?,
            architecture_params(&arch).map_err(to_py)?,
        )),
    }
}

#[pymodule]
fn densespace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpace>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyArchitecture>()?;
    m.add_function(wrap_pyfunction!(preset_counts, m)?)?;
    m.add("PRESETS", reference::PRESETS.to_vec())?;
    Ok(())
}
