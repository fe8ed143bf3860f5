//! Python bindings: the disease structures, the forward/backward machinery,
//! the simulator/fit pipeline and the headline diagnostics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::conversion::IntoPyObjectExt;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chmm::config::RunConfig;
use chmm::data::{load_dataset, prepare_panels};
use chmm::design::ModelSpec;
use chmm::diagnostics;
use chmm::disease::DiseaseSpec as CoreSpec;
use chmm::hmm::{self, ObservationSymbol, TransitionMatrixSeq};
use chmm::priors::build_priors;
use chmm::sampler::{run_chains, substream};
use chmm::simulate::{write_truth, Simulator};

fn to_py_err(err: chmm::Error) -> PyErr {
    match &err {
        chmm::Error::Config(_)
        | chmm::Error::Schema(_)
        | chmm::Error::UnknownKind(_)
        | chmm::Error::DimensionMismatch { .. }
        | chmm::Error::Parse { .. } => PyValueError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn parse_obs(symbols: &[String]) -> PyResult<Vec<ObservationSymbol>> {
    symbols
        .iter()
        .map(|s| {
            ObservationSymbol::parse(s)
                .ok_or_else(|| PyValueError::new_err(format!("expected N/P/x, got `{s}`")))
        })
        .collect()
}

fn build_trans(spec: &CoreSpec, steps: Vec<Vec<Vec<f64>>>) -> PyResult<TransitionMatrixSeq> {
    let s = spec.n_states();
    let mut flat = Vec::with_capacity(steps.len() * s * s);
    for (t, step) in steps.iter().enumerate() {
        if step.len() != s || step.iter().any(|row| row.len() != s) {
            return Err(PyValueError::new_err(format!(
                "step {t} is not a {s}x{s} matrix"
            )));
        }
        for row in step {
            flat.extend_from_slice(row);
        }
    }
    TransitionMatrixSeq::new(s, flat).map_err(to_py_err)
}

/// A chain's state space, emission map and transition structure.
#[pyclass(name = "DiseaseSpec", frozen)]
struct PyDiseaseSpec {
    inner: CoreSpec,
}

#[pymethods]
impl PyDiseaseSpec {
    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().as_str().to_string()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn state_labels(&self) -> Vec<String> {
        self.inner.states().labels().to_vec()
    }

    /// Emission row for an observation symbol ("N", "P" or "x").
    fn emission_vector(&self, symbol: &str) -> PyResult<Vec<f64>> {
        let obs = ObservationSymbol::parse(symbol)
            .ok_or_else(|| PyValueError::new_err(format!("expected N/P/x, got `{symbol}`")))?;
        Ok(self.inner.emission(obs).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "DiseaseSpec(name='{}', kind='{}', n_states={})",
            self.inner.name(),
            self.inner.kind().as_str(),
            self.inner.n_states()
        )
    }
}

/// Built-in structure for one of bartonella, babesia, cowpox, anaplasma.
#[pyfunction]
fn builtin_spec(kind: &str) -> PyResult<PyDiseaseSpec> {
    Ok(PyDiseaseSpec {
        inner: CoreSpec::builtin_named(kind).map_err(to_py_err)?,
    })
}

/// Observed-data log-likelihood of one panel by the scaled forward
/// recursion. `trans` holds one row-stochastic matrix per step.
#[pyfunction]
fn forward_loglik(
    spec: &PyDiseaseSpec,
    obs: Vec<String>,
    trans: Vec<Vec<Vec<f64>>>,
    pi: Vec<f64>,
) -> PyResult<f64> {
    let obs = parse_obs(&obs)?;
    let trans = build_trans(&spec.inner, trans)?;
    hmm::forward(&spec.inner, &obs, &trans, &pi)
        .map(|f| f.log_likelihood)
        .map_err(to_py_err)
}

/// Exact likelihood by enumerating every hidden path (small panels only).
#[pyfunction]
fn brute_force_likelihood(
    spec: &PyDiseaseSpec,
    obs: Vec<String>,
    trans: Vec<Vec<Vec<f64>>>,
    pi: Vec<f64>,
) -> PyResult<f64> {
    let obs = parse_obs(&obs)?;
    let trans = build_trans(&spec.inner, trans)?;
    hmm::brute_force_likelihood(&spec.inner, &obs, &trans, &pi).map_err(to_py_err)
}

/// Draws of the hidden path given the observations (forward filtering,
/// backward sampling), as 1-based state indices.
#[pyfunction]
fn sample_hidden_paths(
    spec: &PyDiseaseSpec,
    obs: Vec<String>,
    trans: Vec<Vec<Vec<f64>>>,
    pi: Vec<f64>,
    draws: usize,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let obs = parse_obs(&obs)?;
    let trans = build_trans(&spec.inner, trans)?;
    let fwd = hmm::forward(&spec.inner, &obs, &trans, &pi).map_err(to_py_err)?;
    let mut rng = substream(seed, 0x9a, 0, 0);
    (0..draws)
        .map(|_| {
            hmm::backward_sample(&fwd, &trans, &mut rng)
                .map(|p| p.0.iter().map(|s| s + 1).collect())
                .map_err(to_py_err)
        })
        .collect()
}

/// Simulates a dataset from a TOML run configuration; returns the dataset
/// and ground-truth CSV paths.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, seed=None))]
fn simulate(config_path: PathBuf, out_dir: PathBuf, seed: Option<u64>) -> PyResult<(String, String)> {
    let (mut config, _) = RunConfig::load(&config_path).map_err(to_py_err)?;
    if let Some(seed) = seed {
        config.mcmc.seed = seed;
    }
    let model = config.model_spec().map_err(to_py_err)?;
    let (sim_config, beta, pi) = config.sim_inputs(&model).map_err(to_py_err)?;
    let output = Simulator::new(&model, &beta, &pi, &sim_config)
        .and_then(|s| s.run())
        .map_err(to_py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let dataset = out_dir.join("dataset.csv");
    let truth = out_dir.join("truth.csv");
    chmm::data::write_dataset(&output.dataset, &dataset).map_err(to_py_err)?;
    write_truth(&model, &output.truth, &truth).map_err(to_py_err)?;
    Ok((
        dataset.to_string_lossy().into_owned(),
        truth.to_string_lossy().into_owned(),
    ))
}

fn check_model_matches(model: &ModelSpec, diseases: &[String]) -> PyResult<()> {
    let expected: Vec<&str> = model.diseases().iter().map(|d| d.name()).collect();
    if diseases != expected {
        return Err(PyValueError::new_err(format!(
            "dataset diseases {diseases:?} do not match the model {expected:?}"
        )));
    }
    Ok(())
}

/// Runs the adaptive Metropolis-within-Gibbs sampler; returns the trace
/// file paths.
#[pyfunction]
#[pyo3(signature = (config_path, dataset_path, out_dir, chains=None, iterations=None, burn_in=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    config_path: PathBuf,
    dataset_path: PathBuf,
    out_dir: PathBuf,
    chains: Option<usize>,
    iterations: Option<u64>,
    burn_in: Option<u64>,
    seed: Option<u64>,
) -> PyResult<Vec<String>> {
    let (mut config, hash) = RunConfig::load(&config_path).map_err(to_py_err)?;
    if let Some(v) = chains {
        config.mcmc.chains = v;
    }
    if let Some(v) = iterations {
        config.mcmc.iterations = v;
    }
    if let Some(v) = burn_in {
        config.mcmc.burn_in = v;
    }
    if let Some(v) = seed {
        config.mcmc.seed = v;
    }
    config.validate().map_err(to_py_err)?;
    let model = config.model_spec().map_err(to_py_err)?;
    let (gaussians, dirichlets) =
        build_priors(&model, &config.prior_config().map_err(to_py_err)?).map_err(to_py_err)?;
    let dataset = load_dataset(&dataset_path).map_err(to_py_err)?;
    check_model_matches(&model, &dataset.diseases)?;
    let panels =
        prepare_panels(&dataset, config.panel_options().map_err(to_py_err)?).map_err(to_py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let controls = config.controls().map_err(to_py_err)?;
    let output = run_chains(
        &model,
        &panels,
        &gaussians,
        &dirichlets,
        &controls,
        Some(&out_dir),
        &hash,
    )
    .map_err(to_py_err)?;
    Ok(output
        .manifest
        .chains
        .iter()
        .filter_map(|c| c.file.as_ref())
        .map(|p| p.to_string_lossy().into_owned())
        .collect())
}

/// Gelman-Rubin potential scale reduction over whole chains; returns
/// (R, 97.5% quantile).
#[pyfunction]
fn gelman_rubin(chains: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let views: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
    let points = diagnostics::gelman_rubin(&views, 1).map_err(to_py_err)?;
    let last = points.last().expect("one grid point");
    Ok((last.r, last.q975))
}

/// Median, central 95% interval and positivity probability of one sample
/// column.
#[pyfunction]
fn summarize_samples(py: Python<'_>, values: Vec<f64>) -> PyResult<Py<PyAny>> {
    let names = vec!["x".to_string()];
    let rows: Vec<Vec<f64>> = values.into_iter().map(|v| vec![v]).collect();
    let summary = diagnostics::summarize(&names, &rows, 0, &[]).map_err(to_py_err)?;
    let s = &summary[0];
    let dict: BTreeMap<&str, f64> = [
        ("median", s.median),
        ("ci_low", s.q025),
        ("ci_high", s.q975),
        ("prob_positive", s.prob_positive),
    ]
    .into_iter()
    .collect();
    dict.into_py_any(py)
}

/// Hosmer-Lemeshow grouped chi-square test; returns (statistic, p_value).
#[pyfunction]
#[pyo3(signature = (p_hat, outcomes, groups=10))]
fn hosmer_lemeshow(p_hat: Vec<f64>, outcomes: Vec<bool>, groups: usize) -> PyResult<(f64, f64)> {
    let hl = diagnostics::hosmer_lemeshow(&p_hat, &outcomes, groups).map_err(to_py_err)?;
    Ok((hl.statistic, hl.p_value))
}

#[pymodule]
fn chmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDiseaseSpec>()?;
    m.add_function(wrap_pyfunction!(builtin_spec, m)?)?;
    m.add_function(wrap_pyfunction!(forward_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(sample_hidden_paths, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(gelman_rubin, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_samples, m)?)?;
    m.add_function(wrap_pyfunction!(hosmer_lemeshow, m)?)?;
    Ok(())
}
