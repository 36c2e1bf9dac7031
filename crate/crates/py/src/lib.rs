//! Python bindings: `import luq`.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use luq_core::calib::{CalibrationSet, Modality};
use luq_core::container::{synth_layer_stack, Container, SynthSpec};
use luq_core::entropy::{self, EntropyProfile, StabilityCurve};
use luq_core::eval::{self, Metric, WorkloadSpec};
use luq_core::quant::{self, Propagation, QuantConfig, QuantMethod};
use luq_core::select::{self, QuantPlan, Search, SelectionConfig};
use luq_core::LuqError;

fn err(e: LuqError) -> PyErr {
    match e {
        LuqError::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{s}`")))
}

fn to_json(v: &serde_json::Value) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Serialized name of a unit enum variant.
fn name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn from_json(s: &str) -> PyResult<serde_json::Value> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "LayerStack", module = "luq")]
pub struct PyLayerStack {
    inner: luq_core::net::LayerStack,
}

#[pymethods]
impl PyLayerStack {
    /// Synthetic stack; layers with rank below `hidden_dim` are token-local.
    #[staticmethod]
    #[pyo3(signature = (ranks, hidden_dim, seed = 0, vocab_size = 32))]
    fn synth(ranks: Vec<usize>, hidden_dim: usize, seed: u64, vocab_size: usize) -> PyResult<Self> {
        let spec = SynthSpec { vocab_size, ..SynthSpec::new(ranks, hidden_dim, seed) };
        Ok(Self { inner: synth_layer_stack(&spec).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = Container::read_from(path).map_err(err)?;
        Ok(Self { inner: luq_core::net::LayerStack::from_container(&c).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.to_container().and_then(|c| c.write_to(path)).map_err(err)
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    /// Per-layer format tags: fp32, rtn4, gptq4 or bin.
    fn tags(&self) -> Vec<String> {
        self.inner.tags().iter().map(name).collect()
    }

    /// Logits `[len(tokens), vocab]` for one token sequence, flattened.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<f32>> {
        let n = tokens.len();
        let x = self.inner.embed_tokens(&tokens).map_err(err)?;
        let h = self.inner.run_sequence(&x, n, &mut |_, _| {}).map_err(err)?;
        Ok(self.inner.logits(&h, n))
    }

    fn __repr__(&self) -> String {
        format!("LayerStack(num_layers={}, hidden_dim={})", self.inner.num_layers(), self.inner.hidden_dim())
    }
}

#[pyclass(name = "CalibrationSet", module = "luq")]
pub struct PyCalibrationSet {
    inner: CalibrationSet,
}

#[pymethods]
impl PyCalibrationSet {
    /// Text-only set from equal-length token sequences.
    #[staticmethod]
    #[pyo3(signature = (tokens, hidden_dim, seed = 0))]
    fn from_tokens(tokens: Vec<Vec<u32>>, hidden_dim: usize, seed: u64) -> PyResult<Self> {
        let seq_len = tokens.first().map_or(0, Vec::len);
        let inner = CalibrationSet {
            sequences: tokens.into_iter().map(luq_core::calib::Sequence::Text).collect(),
            seq_len,
            hidden_dim,
            alpha: 0.0,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = Container::read_from(path).map_err(err)?;
        Ok(Self { inner: CalibrationSet::from_container(&c).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.to_container().and_then(|c| c.write_to(path)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn num_text(&self) -> usize {
        self.inner.count(Modality::Text)
    }

    #[getter]
    fn num_multimodal(&self) -> usize {
        self.inner.count(Modality::Multimodal)
    }
}

#[pyclass(name = "EntropyProfile", module = "luq")]
pub struct PyEntropyProfile {
    inner: EntropyProfile,
}

#[pymethods]
impl PyEntropyProfile {
    #[new]
    #[pyo3(signature = (entropies, k = 100, seed = 0))]
    fn new(entropies: Vec<f64>, k: usize, seed: u64) -> Self {
        Self { inner: EntropyProfile::from_entropies(entropies, k, seed) }
    }

    /// Entropy per layer in nats, network order.
    #[getter]
    fn entropies(&self) -> Vec<f64> {
        self.inner.entropies.clone()
    }

    /// 0-based layer indices, lowest entropy first.
    #[getter]
    fn order(&self) -> Vec<usize> {
        self.inner.order.clone()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    /// entropy.json body (1-based `pi`).
    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner.to_report())
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: EntropyProfile::from_report(&from_json(s)?).map_err(err)? })
    }
}

#[pyclass(name = "QuantConfig", module = "luq")]
pub struct PyQuantConfig {
    inner: QuantConfig,
}

#[pymethods]
impl PyQuantConfig {
    #[new]
    #[pyo3(signature = (q_high = "gptq", high_bits = 4, q_low = "bin", low_nominal_bits = 1.08, block_size = 128, group_size = 128, damp = 0.01, salient_fraction = None, propagation = "sequential"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        q_high: &str,
        high_bits: u8,
        q_low: &str,
        low_nominal_bits: f64,
        block_size: usize,
        group_size: usize,
        damp: f64,
        salient_fraction: Option<f64>,
        propagation: &str,
    ) -> PyResult<Self> {
        let inner = QuantConfig {
            q_high: parse::<QuantMethod>("method", q_high)?,
            high_bits,
            q_low: parse::<QuantMethod>("method", q_low)?,
            low_nominal_bits,
            block_size,
            group_size,
            damp,
            salient_fraction,
            propagation: parse::<Propagation>("propagation", propagation)?,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "QuantPlan", module = "luq")]
pub struct PyQuantPlan {
    inner: QuantPlan,
}

#[pymethods]
impl PyQuantPlan {
    /// Ultra-low bits for the first `k` layers of `profile.order`.
    #[new]
    #[pyo3(signature = (profile, k, config = None))]
    fn new(profile: &PyEntropyProfile, k: usize, config: Option<&PyQuantConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Ok(Self { inner: QuantPlan::new(&profile.inner.order, k, &cfg).map_err(err)? })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn order(&self) -> Vec<usize> {
        self.inner.order.clone()
    }

    #[getter]
    fn avg_bits_nominal(&self) -> f64 {
        self.inner.avg_bits_nominal
    }

    /// Method per layer, network order.
    fn methods(&self) -> Vec<String> {
        self.inner.methods.iter().map(name).collect()
    }

    /// plan.json body.
    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner.to_json())
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: QuantPlan::from_json(&from_json(s)?).map_err(err)? })
    }
}

/// Stack, calibration set and evaluation split of the planted synthetic workload.
#[pyfunction]
#[pyo3(signature = (seed = 0, ranks = None, hidden_dim = None, seq_len = None, pool_seqs = None, calib_seqs = None, eval_seqs = None))]
fn synth_workload(
    seed: u64,
    ranks: Option<Vec<usize>>,
    hidden_dim: Option<usize>,
    seq_len: Option<usize>,
    pool_seqs: Option<usize>,
    calib_seqs: Option<usize>,
    eval_seqs: Option<usize>,
) -> PyResult<(PyLayerStack, PyCalibrationSet, PyCalibrationSet)> {
    let base = WorkloadSpec::planted();
    let spec = WorkloadSpec {
        ranks: ranks.unwrap_or(base.ranks.clone()),
        hidden_dim: hidden_dim.unwrap_or(base.hidden_dim),
        seq_len: seq_len.unwrap_or(base.seq_len),
        pool_seqs: pool_seqs.unwrap_or(base.pool_seqs),
        calib_seqs: calib_seqs.unwrap_or(base.calib_seqs),
        eval_seqs: eval_seqs.unwrap_or(base.eval_seqs),
        ..base
    };
    let w = eval::build_workload(&spec, seed).map_err(err)?;
    Ok((PyLayerStack { inner: w.stack }, PyCalibrationSet { inner: w.calib }, PyCalibrationSet { inner: w.eval }))
}

#[pyfunction]
#[pyo3(signature = (stack, calib, k = 100, seed = 0))]
fn entropy_profile(stack: &PyLayerStack, calib: &PyCalibrationSet, k: usize, seed: u64) -> PyResult<PyEntropyProfile> {
    let acts = stack.inner.capture_calibration(&calib.inner).map_err(err)?;
    Ok(PyEntropyProfile { inner: entropy::layer_entropy_profile(&acts, k, seed).map_err(err)? })
}

/// `(distances, selected_k, no_knee)` over the K grid.
#[pyfunction]
#[pyo3(signature = (stack, calib, grid, seed = 0, sensitivity = 1.0))]
fn rank_stability(
    stack: &PyLayerStack,
    calib: &PyCalibrationSet,
    grid: Vec<usize>,
    seed: u64,
    sensitivity: f64,
) -> PyResult<(Vec<f64>, usize, bool)> {
    let acts = stack.inner.capture_calibration(&calib.inner).map_err(err)?;
    let StabilityCurve { distances, selected_k, no_knee, .. } =
        entropy::rank_stability_curve(&acts, &grid, seed, sensitivity).map_err(err)?;
    Ok((distances, selected_k, no_knee))
}

#[pyfunction]
fn shannon_entropy(p: Vec<f64>) -> PyResult<f64> {
    entropy::shannon_entropy(&p).map_err(err)
}

#[pyfunction]
fn kendall_distance(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    entropy::kendall_distance(&a, &b).map_err(err)
}

#[pyfunction]
fn avg_bitwidth(bits: Vec<f64>) -> PyResult<f64> {
    quant::avg_bitwidth(&bits).map_err(err)
}

/// Largest k whose score stays at or above `tau`; returns the plan and
/// the `(k, score)` evaluations.
#[pyfunction]
#[pyo3(signature = (stack, profile, calib, eval, tau, metric = "token_accuracy", search = "greedy", config = None))]
#[allow(clippy::too_many_arguments)]
fn threshold_select(
    stack: &PyLayerStack,
    profile: &PyEntropyProfile,
    calib: &PyCalibrationSet,
    eval: &PyCalibrationSet,
    tau: f64,
    metric: &str,
    search: &str,
    config: Option<&PyQuantConfig>,
) -> PyResult<(PyQuantPlan, Vec<(usize, f64)>)> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let sel = SelectionConfig::threshold(tau, parse::<Metric>("metric", metric)?, parse::<Search>("search", search)?);
    let r = select::threshold_select(&stack.inner, &profile.inner, &calib.inner, &eval.inner, &cfg, &sel).map_err(err)?;
    Ok((PyQuantPlan { inner: r.plan }, r.evaluations))
}

/// Smallest k whose model fits `budget_bytes`; per-layer sizes come from `stack`.
#[pyfunction]
#[pyo3(signature = (stack, profile, budget_bytes, non_backbone_bytes = 0.0, config = None))]
fn budget_select(
    stack: &PyLayerStack,
    profile: &PyEntropyProfile,
    budget_bytes: f64,
    non_backbone_bytes: f64,
    config: Option<&PyQuantConfig>,
) -> PyResult<PyQuantPlan> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let params = vec![stack.inner.config.params_per_layer(); stack.inner.num_layers()];
    Ok(PyQuantPlan { inner: select::budget_select(&profile.inner, &params, budget_bytes, non_backbone_bytes, &cfg).map_err(err)? })
}

/// Quantized stack and its realized average bits.
#[pyfunction]
#[pyo3(signature = (stack, plan, calib, config = None))]
fn quantize(stack: &PyLayerStack, plan: &PyQuantPlan, calib: &PyCalibrationSet, config: Option<&PyQuantConfig>) -> PyResult<(PyLayerStack, f64)> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let q = select::quantize_plan(&stack.inner, &plan.inner, &calib.inner, &cfg).map_err(err)?;
    let bits = q.avg_bits();
    Ok((PyLayerStack { inner: q.stack }, bits))
}

/// Mean per-sequence score (higher is better).
#[pyfunction]
#[pyo3(signature = (stack, split, metric = "token_accuracy"))]
fn evaluate(stack: &PyLayerStack, split: &PyCalibrationSet, metric: &str) -> PyResult<f64> {
    Ok(eval::evaluate(&stack.inner, &split.inner, parse::<Metric>("metric", metric)?).map_err(err)?.score)
}

#[pyfunction]
fn perplexity(stack: &PyLayerStack, split: &PyCalibrationSet) -> PyResult<f64> {
    eval::perplexity(&stack.inner, &split.inner).map_err(err)
}

#[pymodule]
fn luq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyLayerStack>()?;
    m.add_class::<PyCalibrationSet>()?;
    m.add_class::<PyEntropyProfile>()?;
    m.add_class::<PyQuantConfig>()?;
    m.add_class::<PyQuantPlan>()?;
    m.add_function(wrap_pyfunction!(synth_workload, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_profile, m)?)?;
    m.add_function(wrap_pyfunction!(rank_stability, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_distance, m)?)?;
    m.add_function(wrap_pyfunction!(avg_bitwidth, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_select, m)?)?;
    m.add_function(wrap_pyfunction!(budget_select, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    Ok(())
}
