//! Python bindings. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::json;

use tmn::data::{build_splits, exec_program_symbolic, write_dataset, Sample, Scene, SplitSpec};
use tmn::harness::{evaluate_checkpoint, train, ExperimentConfig};
use tmn::library::{Strategy, SubTaskCatalog};
use tmn::model::{load_model, predict, save_model, Example, ModelKind, NetworkSpec, TmnModel};
use tmn::program::{self, Structure};
use tmn::tensor::Tape;
use tmn::transformer::{Dropout, ModelConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn catalog() -> SubTaskCatalog {
    SubTaskCatalog::clevr()
}

/// A parsed and validated program in post-order.
#[pyclass(name = "Program", from_py_object)]
#[derive(Clone)]
struct PyProgram {
    inner: program::Program,
}

#[pymethods]
impl PyProgram {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        let inner = program::parse_program(text, &catalog()).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __str__(&self) -> String {
        program::serialize(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Program({:?})", program::serialize(&self.inner))
    }

    fn ops(&self) -> Vec<String> {
        self.inner.ops().map(str::to_string).collect()
    }

    /// Type and root-kind findings, as dicts.
    fn violations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let v = program::validate(&self.inner, &catalog());
        to_py(py, &serde_json::to_value(v).map_err(value_err)?)
    }

    /// Execution steps for `"stack"` or `"tree"`.
    #[pyo3(signature = (structure = "stack"))]
    fn plan<'py>(&self, py: Python<'py>, structure: &str) -> PyResult<Bound<'py, PyAny>> {
        let s: Structure = structure.parse().map_err(value_err)?;
        let p = program::plan(&self.inner, s).map_err(value_err)?;
        let steps: Vec<_> = p
            .steps
            .iter()
            .map(|st| json!({"position": st.position, "thread": st.thread, "input": format!("{:?}", st.input).to_lowercase()}))
            .collect();
        to_py(py, &json!(steps))
    }

    /// Symbolic answer on a scene given as JSON text.
    fn execute(&self, scene_json: &str) -> PyResult<String> {
        let scene: Scene = serde_json::from_str(scene_json).map_err(value_err)?;
        exec_program_symbolic(&self.inner, &scene).map_err(value_err)
    }
}

/// A module network or baseline with f32 weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TmnModel<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind = "tmn", strategy = "individual", structure = "stack", d_model = 32, n_heads = 4, d_ff = 64, k_layers = 1, n_layers = 4, height = 5, width = 5, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        strategy: &str,
        structure: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        k_layers: usize,
        n_layers: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(value_err)?;
        let strategy: Strategy = strategy.parse().map_err(value_err)?;
        let structure: Structure = structure.parse().map_err(value_err)?;
        let cfg = ModelConfig {
            d_model,
            n_heads,
            d_ff,
            k_layers,
            n_layers_monolithic: n_layers,
            ..ModelConfig::default()
        };
        let mut spec = match kind {
            ModelKind::Tmn => NetworkSpec::tmn(cfg, strategy, structure),
            k => NetworkSpec::baseline(k, cfg),
        };
        spec.height = height;
        spec.width = width;
        let inner = TmnModel::new(spec, &catalog(), seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_model(&path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(value_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn num_modules(&self) -> usize {
        self.inner.net.num_modules()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_elements()
    }

    #[getter]
    fn answers(&self) -> Vec<String> {
        self.inner.net.answers.words().to_vec()
    }

    /// Logits, executed layer count and predicted answer for a sample given
    /// as one JSON line of a split file.
    fn forward<'py>(&self, py: Python<'py>, sample_json: &str) -> PyResult<Bound<'py, PyAny>> {
        let sample: Sample = serde_json::from_str(sample_json).map_err(value_err)?;
        let net = &self.inner.net;
        let ex = Example::from_sample(&sample, net).map_err(value_err)?;
        let mut tape = Tape::with_params(&self.inner.params);
        let trace = net.forward(&mut tape, &ex, &mut Dropout::off()).map_err(value_err)?;
        let logits = tape.data(trace.logits).to_vec();
        let answer = net.answers.word(predict(&logits)).unwrap_or_default();
        to_py(
            py,
            &json!({"logits": logits, "layers": trace.layers, "answer": answer, "label": sample.answer}),
        )
    }
}

/// Generates a dataset from split-spec text into `out`; returns the audit.
#[pyfunction]
fn generate_dataset<'py>(py: Python<'py>, spec_toml: &str, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let spec = SplitSpec::from_toml(spec_toml).map_err(value_err)?;
    let (splits, report) = build_splits(&spec).map_err(value_err)?;
    write_dataset(&out, &spec, &splits, &report, &catalog().hash()).map_err(value_err)?;
    to_py(py, &serde_json::to_value(&report).map_err(value_err)?)
}

/// Trains from a config file; returns best val and test accuracy.
#[pyfunction]
fn train_config<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_file(&config).map_err(value_err)?;
    let out = py
        .detach(|| train(&cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let m = &out.metrics;
    to_py(
        py,
        &json!({
            "best_epoch": m.best_epoch,
            "val_accuracy": m.val.accuracy(),
            "test_accuracy": m.test.as_ref().map(|t| t.accuracy()),
            "initial_loss": m.initial_loss,
            "checkpoint": out.checkpoint.map(|p| p.display().to_string()),
        }),
    )
}

/// Overall and per-family accuracy of a checkpoint on a split file.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, ckpt: PathBuf, split: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let m = py
        .detach(|| evaluate_checkpoint(&ckpt, &split))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(
        py,
        &json!({"accuracy": m.accuracy(), "correct": m.correct, "total": m.total, "per_family": m.family_accuracy()}),
    )
}

#[pymodule]
fn tmn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProgram>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
