//! Python bindings for `wgqa-core`.
//!
//! Matrices cross the boundary as lists of rows; checkpoint tensors as a
//! `(shape, flat_data)` pair in row-major order.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use wgqa_core::analysis::{head_divergence, one_sample_ttest, student_t_two_sided_p, TTest};
use wgqa_core::checkpoint::{convert, Checkpoint, CheckpointError};
use wgqa_core::trainer::{evaluate, train, AdamWConfig, ModelConfig, TaskKind, ToyModel, ToyTask, TrainConfig};
use wgqa_core::{
    attention_forward, fold_weights, grad_check, kv_cache_bytes, param_count_extra, AggregationWeights,
    AttentionBlock, AttentionConfig, InitScheme, SeededRng, Tensor, Variant, Weighting,
};

create_exception!(wgqa, WgqaCheckpointError, PyValueError, "Checkpoint could not be read, written or converted.");

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ckpt_err(e: CheckpointError) -> PyErr {
    let msg = format!("{}: {e}", e.code());
    match e {
        CheckpointError::Io(_) => PyOSError::new_err(msg),
        _ => WgqaCheckpointError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(value_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn ttest_dict<'py>(py: Python<'py>, t: &TTest) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t", t.t)?;
    d.set_item("p", t.p)?;
    d.set_item("df", t.df)?;
    d.set_item("mean", t.mean)?;
    d.set_item("std_dev", t.std_dev)?;
    Ok(d)
}

#[pyclass(name = "AttentionConfig", module = "wgqa", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyAttentionConfig {
    inner: AttentionConfig,
}

#[pymethods]
impl PyAttentionConfig {
    #[new]
    #[pyo3(signature = (d_model, n_heads, n_kv_groups=None, weighting="none", init="mean", causal=false, cross_attention=false))]
    fn new(
        d_model: usize,
        n_heads: usize,
        n_kv_groups: Option<usize>,
        weighting: &str,
        init: &str,
        causal: bool,
        cross_attention: bool,
    ) -> PyResult<Self> {
        let inner = AttentionConfig::new(d_model, n_heads, n_kv_groups.unwrap_or(n_heads), parse(weighting)?)
            .and_then(|c| c.with_causal(causal))
            .and_then(|c| c.with_cross(cross_attention))
            .map_err(value_err)?
            .with_init(parse(init)?);
        Ok(Self { inner })
    }

    /// Config for a named variant such as `"wgqa"` or `"colwmqa"`.
    #[staticmethod]
    #[pyo3(signature = (variant, d_model, n_heads, groups=None, init="mean", causal=false, cross_attention=false))]
    fn for_variant(
        variant: &str,
        d_model: usize,
        n_heads: usize,
        groups: Option<usize>,
        init: &str,
        causal: bool,
        cross_attention: bool,
    ) -> PyResult<Self> {
        let v: Variant = parse(variant)?;
        let g = v.resolve_groups(n_heads, groups).map_err(value_err)?;
        Self::new(d_model, n_heads, Some(g), v.weighting().as_str(), init, causal, cross_attention)
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads
    }

    #[getter]
    fn n_kv_groups(&self) -> usize {
        self.inner.n_kv_groups
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    #[getter]
    fn weighting(&self) -> &'static str {
        self.inner.weighting.as_str()
    }

    #[getter]
    fn init(&self) -> &'static str {
        self.inner.init.as_str()
    }

    #[getter]
    fn causal(&self) -> bool {
        self.inner.causal
    }

    #[getter]
    fn cross_attention(&self) -> bool {
        self.inner.cross_attention
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().as_str()
    }

    fn param_count_extra(&self, n_blocks: usize) -> u64 {
        param_count_extra(&self.inner, n_blocks)
    }

    #[pyo3(signature = (seq_len, n_layers, blocks_per_layer=1, bytes_per_elem=4))]
    fn kv_cache_bytes(&self, seq_len: u64, n_layers: u64, blocks_per_layer: u64, bytes_per_elem: u64) -> PyResult<u64> {
        kv_cache_bytes(&self.inner, seq_len, n_layers, blocks_per_layer, bytes_per_elem).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "AttentionConfig(d_model={}, n_heads={}, n_kv_groups={}, weighting='{}', init='{}', causal={}, cross_attention={})",
            c.d_model,
            c.n_heads,
            c.n_kv_groups,
            c.weighting,
            c.init,
            if c.causal { "True" } else { "False" },
            if c.cross_attention { "True" } else { "False" },
        )
    }
}

#[pyclass(name = "AttentionBlock", module = "wgqa")]
pub struct PyAttentionBlock {
    inner: AttentionBlock,
}

#[pymethods]
impl PyAttentionBlock {
    /// Random MHA projections converted into `config`'s variant.
    #[staticmethod]
    fn random(config: PyRef<'_, PyAttentionConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.inner;
        let mut rng = SeededRng::new(seed);
        let mha = AttentionBlock::random_mha(cfg, &mut rng).map_err(value_err)?;
        let inner = AttentionBlock::from_mha(&mha.projections, cfg, &mut rng).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn config(&self) -> PyAttentionConfig {
        PyAttentionConfig { inner: self.inner.config }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Projection matrices keyed by `wq`, `wk`, `wv`, `wo`.
    fn projections(&self) -> BTreeMap<&'static str, Vec<Vec<f64>>> {
        let p = &self.inner.projections;
        BTreeMap::from([("wq", rows(&p.w_q)), ("wk", rows(&p.w_k)), ("wv", rows(&p.w_v)), ("wo", rows(&p.w_o))])
    }

    /// `(agg_k, agg_v)` as flat row-major lists, or `None` for unweighted blocks.
    fn aggregation(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.agg.as_ref().map(|a| (a.k.data().to_vec(), a.v.data().to_vec()))
    }

    fn set_aggregation(&mut self, agg_k: Vec<f64>, agg_v: Vec<f64>) -> PyResult<()> {
        let shape = self
            .inner
            .config
            .agg_shape()
            .ok_or_else(|| PyValueError::new_err("block has no aggregation weights"))?;
        let agg = AggregationWeights {
            k: Tensor::new(shape.clone(), agg_k).map_err(value_err)?,
            v: Tensor::new(shape, agg_v).map_err(value_err)?,
        };
        let block = AttentionBlock::new(self.inner.config, self.inner.projections.clone(), Some(agg)).map_err(value_err)?;
        self.inner = block;
        Ok(())
    }

    /// Output for queries `x_q`; keys and values come from `x_kv` (default `x_q`).
    #[pyo3(signature = (x_q, x_kv=None))]
    fn forward(&self, x_q: Vec<Vec<f64>>, x_kv: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let x_q = matrix(x_q)?;
        let x_kv = match x_kv {
            Some(x) => matrix(x)?,
            None => x_q.clone(),
        };
        let (out, _) = attention_forward(&self.inner, &x_q, &x_kv).map_err(value_err)?;
        Ok(rows(&out))
    }

    /// Equivalent plain grouped block with the aggregation folded in.
    fn fold(&self) -> PyResult<Self> {
        Ok(Self { inner: fold_weights(&self.inner).map_err(value_err)? })
    }

    #[pyo3(signature = (seed, eps=1e-5, tol=1e-6))]
    fn grad_check<'py>(&self, py: Python<'py>, seed: u64, eps: f64, tol: f64) -> PyResult<Bound<'py, PyDict>> {
        let report = grad_check(&self.inner, seed, eps, tol).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("passed", report.passed())?;
        d.set_item("max_rel_error", report.max_rel_error())?;
        let entries: Vec<(String, usize, f64, bool)> = report
            .entries
            .iter()
            .map(|e| (e.param.clone(), e.elements, e.max_rel_error, e.passed))
            .collect();
        d.set_item("entries", entries)?;
        Ok(d)
    }
}

#[pyclass(name = "Checkpoint", module = "wgqa")]
pub struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new() -> Self {
        Self { inner: Checkpoint::new() }
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load_file(path).map_err(ckpt_err)? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save_file(path).map_err(ckpt_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::from_bytes(data).map_err(ckpt_err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.to_bytes().map_err(ckpt_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata.clone()
    }

    fn set_meta(&mut self, key: &str, value: &str) {
        self.inner.set_meta(key, value);
    }

    fn names(&self) -> Vec<String> {
        self.inner.tensors.keys().cloned().collect()
    }

    fn get(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.get(name).map_err(ckpt_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> PyResult<()> {
        self.inner.insert(name, Tensor::new(shape, data).map_err(value_err)?);
        Ok(())
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Converts every decoder attention block of an MHA checkpoint.
    #[pyo3(signature = (variant, groups=None, init="mean", seed=0))]
    fn convert(&self, variant: &str, groups: Option<usize>, init: &str, seed: u64) -> PyResult<Self> {
        let v: Variant = parse(variant)?;
        let source = self
            .inner
            .decoder_config()
            .map_err(ckpt_err)?
            .ok_or_else(|| WgqaCheckpointError::new_err("checkpoint has no geometry metadata"))?;
        let g = v.resolve_groups(source.n_heads, groups).map_err(value_err)?;
        let target = AttentionConfig::new(source.d_model, source.n_heads, g, v.weighting())
            .map_err(value_err)?
            .with_init(parse::<InitScheme>(init)?);
        Ok(Self { inner: convert(&self.inner, &target, seed).map_err(ckpt_err)? })
    }

    /// Per-group divergence of learned aggregation weights from mean pooling.
    fn head_divergence<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = head_divergence(&self.inner).map_err(value_err)?;
        let d = PyDict::new(py);
        let rows: Vec<(usize, &'static str, usize, &'static str, f64)> = report
            .rows
            .iter()
            .map(|r| (r.layer, r.block.as_str(), r.group, r.k_or_v.as_str(), r.mad))
            .collect();
        d.set_item("rows", rows)?;
        d.set_item("overall_mean", report.overall_mean)?;
        d.set_item("n", report.n)?;
        match &report.ttest {
            Ok(t) => d.set_item("ttest", ttest_dict(py, t)?)?,
            Err(reason) => d.set_item("ttest", reason.as_str())?,
        }
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.tensors.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.tensors.contains_key(name)
    }
}

fn load_model(ckpt: &PyCheckpoint) -> PyResult<ToyModel> {
    ToyModel::from_checkpoint(&ckpt.inner).map_err(value_err)
}

fn build_task(model: &ToyModel, task: &str, task_seed: u64, min_len: usize, max_len: Option<usize>) -> PyResult<ToyTask> {
    let kind: TaskKind = parse(task)?;
    let max_len = max_len.unwrap_or(model.config.max_len);
    ToyTask::new(kind, model.config.vocab_size, min_len, max_len, task_seed).map_err(value_err)
}

/// Fresh toy encoder-decoder with MHA everywhere.
#[pyfunction]
#[pyo3(signature = (seed, vocab_size=16, d_model=32, n_heads=4, n_layers=2, max_len=8))]
fn init_toy_model(
    seed: u64,
    vocab_size: usize,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    max_len: usize,
) -> PyResult<PyCheckpoint> {
    let config = ModelConfig {
        vocab_size,
        d_model,
        n_heads,
        n_layers,
        max_len,
    };
    let model = ToyModel::init_mha(config, seed).map_err(value_err)?;
    Ok(PyCheckpoint { inner: model.to_checkpoint() })
}

/// Trains the model stored in `checkpoint`; returns the trained checkpoint
/// and the per-step losses.
#[pyfunction]
#[pyo3(signature = (checkpoint, seed, task="copy", task_seed=0, min_len=1, max_len=None, epochs=3, steps_per_epoch=100, batch_size=16, lr=1e-3))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    py: Python<'_>,
    checkpoint: PyRef<'_, PyCheckpoint>,
    seed: u64,
    task: &str,
    task_seed: u64,
    min_len: usize,
    max_len: Option<usize>,
    epochs: usize,
    steps_per_epoch: usize,
    batch_size: usize,
    lr: f64,
) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let mut model = load_model(&checkpoint)?;
    let task = build_task(&model, task, task_seed, min_len, max_len)?;
    let cfg = TrainConfig {
        initial_lr: lr,
        epochs,
        steps_per_epoch,
        batch_size,
        seed,
        optimizer: AdamWConfig::default(),
    };
    let log = py.detach(|| train(&mut model, &task, &cfg)).map_err(value_err)?;
    let losses = log.steps.iter().map(|s| s.loss).collect();
    Ok((PyCheckpoint { inner: model.to_checkpoint() }, losses))
}

#[pyfunction]
#[pyo3(signature = (checkpoint, task="copy", task_seed=0, min_len=1, max_len=None, examples=200))]
fn evaluate_toy<'py>(
    py: Python<'py>,
    checkpoint: PyRef<'_, PyCheckpoint>,
    task: &str,
    task_seed: u64,
    min_len: usize,
    max_len: Option<usize>,
    examples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let model = load_model(&checkpoint)?;
    let task = build_task(&model, task, task_seed, min_len, max_len)?;
    let r = evaluate(&model, &task, examples).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("exact_match", r.exact_match)?;
    d.set_item("token_accuracy", r.token_accuracy)?;
    d.set_item("n_examples", r.n_examples)?;
    d.set_item("n_tokens", r.n_tokens)?;
    Ok(d)
}

#[pyfunction(name = "one_sample_ttest")]
#[pyo3(signature = (samples, mu0=0.0))]
fn py_one_sample_ttest<'py>(py: Python<'py>, samples: Vec<f64>, mu0: f64) -> PyResult<Bound<'py, PyDict>> {
    let t = one_sample_ttest(&samples, mu0).map_err(value_err)?;
    ttest_dict(py, &t)
}

/// Two-sided Student-t p-value.
#[pyfunction]
fn student_t_p(t: f64, df: f64) -> f64 {
    student_t_two_sided_p(t, df)
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.as_str()).collect()
}

#[pyfunction]
fn weightings() -> Vec<&'static str> {
    [Weighting::None, Weighting::Scalar, Weighting::Row, Weighting::Col].iter().map(|w| w.as_str()).collect()
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAttentionConfig>()?;
    m.add_class::<PyAttentionBlock>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add("CheckpointError", m.py().get_type::<WgqaCheckpointError>())?;
    m.add_function(wrap_pyfunction!(init_toy_model, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_toy, m)?)?;
    m.add_function(wrap_pyfunction!(py_one_sample_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_p, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(weightings, m)?)?;
    Ok(())
}

#[pymodule]
fn wgqa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
