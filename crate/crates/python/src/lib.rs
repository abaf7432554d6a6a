//! Python bindings. Structured results (metrics, traces, configs) cross the
//! boundary as JSON and come out as plain dicts and lists.

use std::path::PathBuf;

use editlab::cli::RunConfig;
use editlab::factworld::{self, filter_neighbors, make_edit_batch, EditBatch};
use editlab::iterate::run_iterative;
use editlab::recipe::{fact_recall, pretrain_on_world, PretrainConfig};
use editlab::toylm::{load_checkpoint, save_checkpoint};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: editlab::Error) -> PyErr {
    match e.exit_code() {
        2 | 3 if matches!(e, editlab::Error::Io { .. }) => PyIOError::new_err(e.to_string()),
        2 | 3 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config_from(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(t) => RunConfig::from_toml(t).map_err(err),
        None => Ok(RunConfig::default()),
    }
}

/// Synthetic fact world: vocabulary, relation schemas, facts and corpora.
#[pyclass(module = "editlab", frozen)]
struct World {
    inner: factworld::World,
}

#[pymethods]
impl World {
    /// Generates the world described by the `[world]` section of a TOML config
    /// (the reference world when omitted).
    #[staticmethod]
    #[pyo3(signature = (config_toml=None))]
    fn generate(config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config_toml)?;
        Ok(World {
            inner: factworld::generate_world(&cfg.world).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(World {
            inner: factworld::World::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn n_facts(&self) -> usize {
        self.inner.facts.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn probe_utterances(&self) -> Vec<Vec<usize>> {
        self.inner.probe_utterances.clone()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<usize>> {
        self.inner.vocab.encode(text).map_err(err)
    }

    fn decode(&self, tokens: Vec<usize>) -> String {
        self.inner.vocab.decode(&tokens)
    }

    /// The edit-template prompt of fact `i` as tokens, without the object.
    fn fact_prompt(&self, i: usize) -> PyResult<Vec<usize>> {
        let f = self
            .inner
            .facts
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("fact {i} out of range")))?;
        Ok(self.inner.render_fact(f, &self.inner.schema(f.relation).edit_template).tokens)
    }

    fn __repr__(&self) -> String {
        format!("World(facts={}, vocab={})", self.inner.facts.len(), self.inner.vocab.len())
    }
}

/// The toy transformer language model.
#[pyclass(module = "editlab", frozen)]
struct Model {
    inner: editlab::toylm::ToyLm,
}

#[pymethods]
impl Model {
    /// A freshly initialized model sized by the `[model]` section of the config.
    #[staticmethod]
    #[pyo3(signature = (world, config_toml=None))]
    fn new(world: &World, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config_toml)?;
        Ok(Model {
            inner: editlab::toylm::ToyLm::new(cfg.model.model_config(&world.inner)).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    /// Returns a pretrained copy and the training report.
    #[pyo3(signature = (world, config_toml=None))]
    fn pretrain<'py>(&self, py: Python<'py>, world: &World, config_toml: Option<&str>) -> PyResult<(Model, Bound<'py, PyAny>)> {
        let cfg: PretrainConfig = config_from(config_toml)?.pretrain;
        let mut m = self.inner.clone();
        let report = py
            .detach(|| pretrain_on_world(&mut m, &world.inner, &cfg))
            .map_err(err)?;
        Ok((Model { inner: m }, to_py(py, &report)?))
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Next-token distribution after `tokens`.
    fn next_token_probs(&self, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self.inner.next_token_probs(&tokens).map_err(err)?.as_slice().to_vec())
    }

    fn sequence_perplexity(&self, sequences: Vec<Vec<usize>>) -> PyResult<f64> {
        self.inner.sequence_perplexity(&sequences).map_err(err)
    }

    /// Fraction of facts whose edit prompt puts the object on top.
    fn fact_recall(&self, world: &World) -> PyResult<f64> {
        fact_recall(&self.inner, &world.inner).map_err(err)
    }
}

/// A batch of edit requests with its prefix pool.
#[pyclass(module = "editlab", frozen)]
struct Batch {
    inner: EditBatch,
}

#[pymethods]
impl Batch {
    #[staticmethod]
    #[pyo3(signature = (world, m, prefixes=5, seed=1))]
    fn sample(world: &World, m: usize, prefixes: usize, seed: u64) -> PyResult<Self> {
        let (inner, _) = make_edit_batch(&world.inner, m, prefixes, seed).map_err(err)?;
        Ok(Batch { inner })
    }

    /// Drops evaluation neighbors `model` does not recall.
    fn filter_neighbors(&self, model: &Model) -> PyResult<Batch> {
        let (inner, _) = filter_neighbors(&model.inner, &self.inner).map_err(err)?;
        Ok(Batch { inner })
    }

    fn to_jsonl(&self, world: &World) -> PyResult<String> {
        let mut buf = Vec::new();
        factworld::write_batch_jsonl(&mut buf, &self.inner.requests, &world.inner).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Efficacy, generalization, specificity, scores and collapse perplexity.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, world: &World, batch: &Batch) -> PyResult<Bound<'py, PyAny>> {
    let r = py
        .detach(|| editlab::evaluate::evaluate(&model.inner, &batch.inner.requests, &world.inner.probe_utterances))
        .map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
fn harmonic_score(eff: f64, gen: f64, spec: f64) -> PyResult<f64> {
    editlab::evaluate::harmonic_score(eff, gen, spec).map_err(err)
}

/// Iterative editing with the recipe from `config_toml` (reference when
/// omitted). Returns the selected weights and the per-iteration trace.
#[pyfunction]
#[pyo3(signature = (model, world, batch, config_toml=None))]
fn run_iterative_edit<'py>(
    py: Python<'py>,
    model: &Model,
    world: &World,
    batch: &Batch,
    config_toml: Option<&str>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = config_from(config_toml)?;
    cfg.validate().map_err(err)?;
    let it = cfg.iterate_config().map_err(err)?;
    let out = py
        .detach(|| run_iterative(&model.inner, &world.inner, &batch.inner, &it))
        .map_err(err)?;
    Ok((Model { inner: out.model }, to_py(py, &out.records)?))
}

/// The reference run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(err)
}

#[pymodule]
#[pyo3(name = "editlab")]
fn editlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<World>()?;
    m.add_class::<Model>()?;
    m.add_class::<Batch>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_score, m)?)?;
    m.add_function(wrap_pyfunction!(run_iterative_edit, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
