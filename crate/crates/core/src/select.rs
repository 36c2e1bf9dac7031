//! Entropy-ordered layer selection: threshold search over the number of
//! ultra-low-bit layers, and the memory-budget variant.

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::container::QuantTag;
use crate::entropy::EntropyProfile;
use crate::error::{LuqError, Result};
use crate::eval::{evaluate, Metric};
use crate::net::LayerStack;
use crate::quant::{avg_bitwidth, nominal_layer_bits, QuantConfig, QuantMethod, QuantizedStack, StackQuantizer};

pub use crate::entropy::entropy_order;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Threshold,
    Budget,
    FixedK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    #[default]
    Greedy,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: Mode,
    pub tau: Option<f64>,
    pub budget_bytes: Option<f64>,
    pub k: Option<usize>,
    pub metric: Metric,
    pub search: Search,
}

impl SelectionConfig {
    pub fn threshold(tau: f64, metric: Metric, search: Search) -> Self {
        Self { mode: Mode::Threshold, tau: Some(tau), budget_bytes: None, k: None, metric, search }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            Mode::Threshold => self.tau.is_some() && self.budget_bytes.is_none() && self.k.is_none(),
            Mode::Budget => self.budget_bytes.is_some() && self.tau.is_none() && self.k.is_none(),
            Mode::FixedK => self.k.is_some() && self.tau.is_none() && self.budget_bytes.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(LuqError::invalid(format!("mode {:?} needs exactly its own stopping criterion", self.mode)))
        }
    }
}

/// Two-tier assignment: layer `order[j]` is ultra-low iff `j < k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    /// 0-based layer indices, lowest entropy first.
    pub order: Vec<usize>,
    pub k: usize,
    pub methods: Vec<QuantMethod>,
    pub avg_bits_nominal: f64,
    pub mode: Mode,
    pub tau: Option<f64>,
    pub budget_bytes: Option<f64>,
    pub metric: Option<Metric>,
}

impl QuantPlan {
    pub fn new(order: &[usize], k: usize, config: &QuantConfig) -> Result<Self> {
        let l = order.len();
        if k > l {
            return Err(LuqError::invalid(format!("k = {k} exceeds {l} layers")));
        }
        let mut seen = vec![false; l];
        for &i in order {
            if i >= l || std::mem::replace(&mut seen[i], true) {
                return Err(LuqError::invalid("ordering is not a permutation of the layers"));
            }
        }
        let mut methods = vec![config.q_high; l];
        for &i in &order[..k] {
            methods[i] = config.q_low;
        }
        let avg = avg_bitwidth(&nominal_layer_bits(k, l, config.low_nominal(), config.high_nominal()))?;
        Ok(Self {
            order: order.to_vec(),
            k,
            methods,
            avg_bits_nominal: avg,
            mode: Mode::FixedK,
            tau: None,
            budget_bytes: None,
            metric: None,
        })
    }

    pub fn tags(&self) -> Vec<QuantTag> {
        self.methods.iter().map(|m| m.tag()).collect()
    }

    /// `plan.json` body; layer numbers in `pi` are 1-based.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "pi": self.order.iter().map(|i| i + 1).collect::<Vec<_>>(),
            "k": self.k,
            "tags": self.tags(),
            "methods": self.methods,
            "mode": self.mode,
            "avg_bits_nominal": self.avg_bits_nominal,
        });
        let m = v.as_object_mut().expect("object");
        if let Some(t) = self.tau {
            m.insert("tau".into(), serde_json::json!(t));
        }
        if let Some(b) = self.budget_bytes {
            m.insert("budget".into(), serde_json::json!(b));
        }
        if let Some(metric) = self.metric {
            m.insert("metric".into(), serde_json::json!(metric));
        }
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            pi: Vec<usize>,
            k: usize,
            methods: Vec<QuantMethod>,
            mode: Mode,
            avg_bits_nominal: f64,
            tau: Option<f64>,
            budget: Option<f64>,
            metric: Option<Metric>,
        }
        let r: Raw = serde_json::from_value(v.clone())?;
        if r.pi.contains(&0) {
            return Err(LuqError::invalid("plan layer numbers are 1-based"));
        }
        let order: Vec<usize> = r.pi.iter().map(|i| i - 1).collect();
        if r.methods.len() != order.len() {
            return Err(LuqError::invalid("plan tags and ordering differ in length"));
        }
        let plan = QuantPlan {
            order,
            k: r.k,
            methods: r.methods,
            avg_bits_nominal: r.avg_bits_nominal,
            mode: r.mode,
            tau: r.tau,
            budget_bytes: r.budget,
            metric: r.metric,
        };
        plan.check_structure()?;
        Ok(plan)
    }

    /// Exactly the first `k` layers of `order` share one method and the rest
    /// another.
    pub fn check_structure(&self) -> Result<()> {
        let l = self.order.len();
        if self.k > l || self.methods.len() != l {
            return Err(LuqError::invalid("plan k or tag count out of range"));
        }
        let low = self.order[..self.k].iter().map(|&i| self.methods[i]);
        let high = self.order[self.k..].iter().map(|&i| self.methods[i]);
        let uniform = |mut it: Box<dyn Iterator<Item = QuantMethod> + '_>| {
            let first = it.next();
            first.is_none_or(|f| it.all(|m| m == f))
        };
        if !uniform(Box::new(low)) || !uniform(Box::new(high)) {
            return Err(LuqError::invalid("plan tags do not split the ordering into two tiers"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub k_star: usize,
    /// `(k, performance)` in evaluation order.
    pub evaluations: Vec<(usize, f64)>,
    pub non_monotone_suspected: bool,
}

impl SearchOutcome {
    pub fn eval_count(&self) -> usize {
        self.evaluations.len()
    }
}

/// Scan `k = 1..=L`, stopping at the first `perf(k) < tau`.
pub fn greedy_search(num_layers: usize, tau: f64, mut perf: impl FnMut(usize) -> Result<f64>) -> Result<SearchOutcome> {
    let mut evaluations = Vec::new();
    let mut k_star = 0;
    for k in 1..=num_layers {
        let p = perf(k)?;
        evaluations.push((k, p));
        if p >= tau {
            k_star = k;
        } else {
            break;
        }
    }
    Ok(SearchOutcome { k_star, evaluations, non_monotone_suspected: false })
}

/// Bisection on `perf(k) >= tau` over `[0, L]`, with `0` presumed to pass
/// and `L + 1` presumed to fail. A `k* = 0` answer is confirmed by one
/// extra evaluation; a failing confirmation is flagged.
pub fn binary_search(num_layers: usize, tau: f64, mut perf: impl FnMut(usize) -> Result<f64>) -> Result<SearchOutcome> {
    let mut evaluations = Vec::new();
    let (mut lo, mut hi) = (0usize, num_layers + 1);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let p = perf(mid)?;
        evaluations.push((mid, p));
        if p >= tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut non_monotone_suspected = false;
    if !evaluations.iter().any(|&(k, _)| k == lo) {
        let p = perf(lo)?;
        evaluations.push((lo, p));
        non_monotone_suspected = p < tau;
    }
    Ok(SearchOutcome { k_star: lo, evaluations, non_monotone_suspected })
}

/// Total bytes with the first `k` layers of `order` at `low_bits`.
pub fn model_bytes(order: &[usize], params: &[usize], k: usize, low_bits: f64, high_bits: f64, non_backbone_bytes: f64) -> f64 {
    let body: f64 = order
        .iter()
        .enumerate()
        .map(|(j, &i)| params[i] as f64 * if j < k { low_bits } else { high_bits })
        .sum();
    non_backbone_bytes + body / 8.0
}

/// Smallest `k` whose model fits in `budget_bytes`.
pub fn budget_k(
    order: &[usize],
    params: &[usize],
    budget_bytes: f64,
    low_bits: f64,
    high_bits: f64,
    non_backbone_bytes: f64,
) -> Result<usize> {
    if budget_bytes.is_nan() || budget_bytes <= 0.0 {
        return Err(LuqError::invalid("budget must be positive"));
    }
    if params.len() != order.len() {
        return Err(LuqError::invalid("one parameter count per layer required"));
    }
    (0..=order.len())
        .find(|&k| model_bytes(order, params, k, low_bits, high_bits, non_backbone_bytes) <= budget_bytes)
        .ok_or_else(|| {
            let min = model_bytes(order, params, order.len(), low_bits, high_bits, non_backbone_bytes);
            LuqError::BudgetInfeasible(format!("{min:.0} bytes needed with every layer ultra-low, budget {budget_bytes:.0}"))
        })
}

pub fn budget_select(
    profile: &EntropyProfile,
    params: &[usize],
    budget_bytes: f64,
    non_backbone_bytes: f64,
    config: &QuantConfig,
) -> Result<QuantPlan> {
    let k = budget_k(&profile.order, params, budget_bytes, config.low_nominal(), config.high_nominal(), non_backbone_bytes)?;
    let mut plan = QuantPlan::new(&profile.order, k, config)?;
    plan.mode = Mode::Budget;
    plan.budget_bytes = Some(budget_bytes);
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub k_star: usize,
    pub evaluations: Vec<(usize, f64)>,
    pub eval_count: usize,
    pub non_monotone_suspected: bool,
    pub plan: QuantPlan,
}

/// Threshold selection on a real stack: each probe quantizes the plan for
/// `k` (reusing shared prefixes) and scores it on `eval`.
pub fn threshold_select(
    stack: &LayerStack,
    profile: &EntropyProfile,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    quant: &QuantConfig,
    select: &SelectionConfig,
) -> Result<SelectionResult> {
    select.validate()?;
    let tau = select.tau.ok_or_else(|| LuqError::invalid("threshold mode needs tau"))?;
    if eval.is_empty() {
        return Err(LuqError::Empty("evaluation split"));
    }
    if profile.num_layers() != stack.num_layers() {
        return Err(LuqError::invalid("entropy profile and stack differ in layer count"));
    }
    let mut quantizer = StackQuantizer::new(stack, calib, quant)?;
    let perf = |k: usize| -> Result<f64> {
        let plan = QuantPlan::new(&profile.order, k, quant)?;
        let q = quantizer.quantize(&plan.methods)?;
        Ok(evaluate(&q.stack, eval, select.metric)?.score)
    };
    let out = match select.search {
        Search::Greedy => greedy_search(stack.num_layers(), tau, perf)?,
        Search::Binary => binary_search(stack.num_layers(), tau, perf)?,
    };
    let mut plan = QuantPlan::new(&profile.order, out.k_star, quant)?;
    plan.mode = Mode::Threshold;
    plan.tau = Some(tau);
    plan.metric = Some(select.metric);
    Ok(SelectionResult {
        k_star: out.k_star,
        eval_count: out.eval_count(),
        evaluations: out.evaluations,
        non_monotone_suspected: out.non_monotone_suspected,
        plan,
    })
}

pub fn greedy_select(
    stack: &LayerStack,
    profile: &EntropyProfile,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    quant: &QuantConfig,
    tau: f64,
    metric: Metric,
) -> Result<SelectionResult> {
    threshold_select(stack, profile, calib, eval, quant, &SelectionConfig::threshold(tau, metric, Search::Greedy))
}

pub fn binary_search_select(
    stack: &LayerStack,
    profile: &EntropyProfile,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    quant: &QuantConfig,
    tau: f64,
    metric: Metric,
) -> Result<SelectionResult> {
    threshold_select(stack, profile, calib, eval, quant, &SelectionConfig::threshold(tau, metric, Search::Binary))
}

/// Quantize `stack` under `plan`, recording the plan in the output header.
pub fn quantize_plan(stack: &LayerStack, plan: &QuantPlan, calib: &CalibrationSet, quant: &QuantConfig) -> Result<QuantizedStack> {
    plan.check_structure()?;
    crate::quant::quantize_stack(stack, &plan.methods, calib, quant)
}
