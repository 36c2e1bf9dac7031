//! `luq` command-line front end.
//!
//! Every subcommand writes its artifact plus a `<stem>.run.json` next to it
//! holding the fully resolved configuration; `luq replay <run.json>` runs it
//! again.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use luq_core::calib::{build_mixed_calibration, CalibrationSet, Sequence};
use luq_core::container::{Container, QuantTag};
use luq_core::entropy::{layer_entropy_profile, rank_stability_curve, EntropyProfile, StabilityCurve};
use luq_core::eval::{
    build_workload, compare_calibration, compare_orderings, evaluate, tradeoff_csv, tradeoff_curve, CalibRecipe, Metric,
    TradeoffRow, WorkloadSpec,
};
use luq_core::net::LayerStack;
use luq_core::quant::{Propagation, QuantConfig, QuantMethod};
use luq_core::select::{budget_select, quantize_plan, threshold_select, Mode, QuantPlan, Search, SelectionConfig};
use luq_core::LuqError;

/// Default entropy K when neither `--k` nor `--stability` is given.
pub const DEFAULT_K: usize = 100;

#[derive(Parser, Debug)]
#[command(name = "luq", version, about = "Entropy-guided layerwise ultra-low-bit quantization planner")]
pub struct Cli {
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic stack with calibration pool, calibration and eval splits.
    Synth(SynthArgs),
    /// Build a mixed-modal calibration set from a pool container.
    Calib(CalibArgs),
    /// Per-layer activation entropy and the entropy ordering.
    Entropy(EntropyArgs),
    /// Rank-stability curve over a K grid and its knee.
    Stability(StabilityArgs),
    /// Choose k and write a quantization plan.
    Plan(PlanArgs),
    /// Quantize a model under a plan.
    Quantize(QuantizeArgs),
    /// Score a model on an evaluation split.
    Eval(EvalArgs),
    /// Bits/score trade-off over a list of k.
    Curve(CurveArgs),
    /// Entropy order against its reverse.
    AblateOrder(AblateOrderArgs),
    /// Effect of the multimodal calibration ratio on a fixed plan.
    AblateCalib(AblateCalibArgs),
    /// Re-run the configuration recorded in a run.json.
    #[serde(skip)]
    Replay(ReplayArgs),
}

fn serde_value<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Quantizer overrides shared by every command that quantizes.
#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantArgs {
    /// Backend for high-precision layers: rtn | gptq.
    #[arg(long, value_parser = serde_value::<QuantMethod>, default_value = "gptq")]
    pub q_high: QuantMethod,
    #[arg(long, default_value_t = 4)]
    pub high_bits: u8,
    /// Backend for ultra-low layers: bin | rtn | gptq.
    #[arg(long, value_parser = serde_value::<QuantMethod>, default_value = "bin")]
    pub q_low: QuantMethod,
    /// Nominal bits of an ultra-low layer, used for planning.
    #[arg(long, default_value_t = 1.08)]
    pub low_nominal_bits: f64,
    #[arg(long, default_value_t = 128)]
    pub block_size: usize,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub damp: f64,
    /// Salient column fraction of the binarizer (derived from the nominal bits if unset).
    #[arg(long)]
    pub salient_fraction: Option<f64>,
    /// Calibration inputs of later layers: sequential | independent.
    #[arg(long, value_parser = serde_value::<Propagation>, default_value = "sequential")]
    pub propagation: Propagation,
}

impl QuantArgs {
    pub fn config(&self) -> Result<QuantConfig> {
        let cfg = QuantConfig {
            q_high: self.q_high,
            high_bits: self.high_bits,
            q_low: self.q_low,
            low_nominal_bits: self.low_nominal_bits,
            block_size: self.block_size,
            group_size: self.group_size,
            damp: self.damp,
            salient_fraction: self.salient_fraction,
            propagation: self.propagation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Per-layer ranks; layers with rank below the hidden size are token-local.
    #[arg(long, value_delimiter = ',', default_value = "2,2,2,2,32,32,32,32")]
    pub ranks: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab_size: usize,
    /// Length of every generated sequence.
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    /// Text and multimodal sequences in the calibration pool, each.
    #[arg(long, default_value_t = 128)]
    pub pool_seqs: usize,
    #[arg(long, default_value_t = 64)]
    pub calib_seqs: usize,
    #[arg(long, default_value_t = 64)]
    pub eval_seqs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving model.luqc, pool.luqc, calib.luqc and eval.luqc.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibArgs {
    /// Calibration container whose text and multimodal sequences form the pool.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub n_seqs: usize,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    /// Fraction of multimodal sequences.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Number of clusters; defaults to the knee in `--stability`, else 100.
    #[arg(long)]
    pub k: Option<usize>,
    /// stability.json whose selected K is used when `--k` is absent.
    #[arg(long)]
    pub stability: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// `start:stop:step` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "10:200:10")]
    pub k_grid: String,
    #[arg(long, default_value_t = 1.0)]
    pub sensitivity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub entropy: PathBuf,
    /// Calibration set (threshold mode).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Evaluation split (threshold mode).
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// threshold | budget | fixed-k.
    #[arg(long, value_parser = serde_value::<Mode>, default_value = "threshold")]
    pub mode: Mode,
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub budget_bytes: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// greedy | binary.
    #[arg(long, value_parser = serde_value::<Search>, default_value = "greedy")]
    pub search: Search,
    /// token_accuracy | neg_perplexity.
    #[arg(long, value_parser = serde_value::<Metric>, default_value = "token_accuracy")]
    pub metric: Metric,
    /// Bytes outside the layer stack (budget mode); defaults to the f32
    /// embedding and head.
    #[arg(long)]
    pub non_backbone_bytes: Option<f64>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Full-precision or quantized model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// token_accuracy | neg_perplexity.
    #[arg(long, value_parser = serde_value::<Metric>, default_value = "token_accuracy")]
    pub metric: Metric,
    /// JSON report; a one-row CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub entropy: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// Explicit k values; overrides `--k-steps`.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Stride of the k sweep `0, s, 2s, ..., L`.
    #[arg(long, default_value_t = 1)]
    pub k_steps: usize,
    /// token_accuracy | neg_perplexity.
    #[arg(long, value_parser = serde_value::<Metric>, default_value = "token_accuracy")]
    pub metric: Metric,
    /// Recorded in every row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// CSV output; the rows are also written as JSON next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateOrderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub entropy: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// Largest k of both curves (default: all layers).
    #[arg(long)]
    pub max_k: Option<usize>,
    /// token_accuracy | neg_perplexity.
    #[arg(long, value_parser = serde_value::<Metric>, default_value = "token_accuracy")]
    pub metric: Metric,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateCalibArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 128)]
    pub n_seqs: usize,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// token_accuracy | neg_perplexity.
    #[arg(long, value_parser = serde_value::<Metric>, default_value = "token_accuracy")]
    pub metric: Metric,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub run_json: PathBuf,
}

/// Contents of a `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub luq_version: String,
    pub threads: Option<usize>,
    pub command: Command,
}

impl Command {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        match self {
            Command::Synth(a) => Some(&mut a.seed),
            Command::Calib(a) => Some(&mut a.seed),
            Command::Entropy(a) => Some(&mut a.seed),
            Command::Stability(a) => Some(&mut a.seed),
            Command::Curve(a) => Some(&mut a.seed),
            Command::AblateCalib(a) => Some(&mut a.seed),
            _ => None,
        }
    }

    /// Where the run record goes.
    fn run_json_path(&self) -> Option<PathBuf> {
        let out = match self {
            Command::Synth(a) => return Some(a.out_dir.join("synth.run.json")),
            Command::Calib(a) => &a.out,
            Command::Entropy(a) => &a.out,
            Command::Stability(a) => &a.out,
            Command::Plan(a) => &a.out,
            Command::Quantize(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Curve(a) => &a.out,
            Command::AblateOrder(a) => &a.out,
            Command::AblateCalib(a) => &a.out,
            Command::Replay(_) => return None,
        };
        Some(sibling(out, "run.json"))
    }
}

/// `dir/name.ext` -> `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// 2 for validation errors, 1 for failures while computing.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<LuqError>() {
        Some(e) if e.is_validation() => 2,
        Some(_) => 1,
        None => 1,
    }
}

/// Apply `LUQ_SEED` and the thread count, then execute.
pub fn run(cli: Cli) -> Result<()> {
    let mut command = cli.command;
    if let Ok(raw) = std::env::var("LUQ_SEED") {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| LuqError::InvalidArgument(format!("LUQ_SEED `{raw}` is not an unsigned integer")))?;
        if let Some(s) = command.seed_mut() {
            *s = seed;
        }
    }
    execute(RunRecord { luq_version: env!("CARGO_PKG_VERSION").to_string(), threads: cli.threads, command })
}

pub fn execute(record: RunRecord) -> Result<()> {
    if let Command::Replay(r) = &record.command {
        let replayed: RunRecord = read_json(&r.run_json)?;
        if matches!(replayed.command, Command::Replay(_)) {
            return Err(LuqError::InvalidArgument("a run record cannot replay another".into()).into());
        }
        return execute(replayed);
    }
    if let Some(n) = record.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    let mut record = record;
    let started = Instant::now();
    match &mut record.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Calib(a) => cmd_calib(a)?,
        Command::Entropy(a) => cmd_entropy(a)?,
        Command::Stability(a) => cmd_stability(a)?,
        Command::Plan(a) => cmd_plan(a)?,
        Command::Quantize(a) => cmd_quantize(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Curve(a) => cmd_curve(a)?,
        Command::AblateOrder(a) => cmd_ablate_order(a)?,
        Command::AblateCalib(a) => cmd_ablate_calib(a)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    if let Some(path) = record.command.run_json_path() {
        write_json(&path, &record)?;
    }
    log::info!("done in {:.2}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> LuqError {
    LuqError::Io { path: path.display().to_string(), source }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v = serde_json::from_str(&text).map_err(LuqError::from).with_context(|| format!("parsing {}", path.display()))?;
    Ok(v)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_container(path: &Path, c: &Container) -> Result<()> {
    write_text(path, "")?;
    c.write_to(path).with_context(|| format!("writing {}", path.display()))
}

fn load_stack(path: &Path) -> Result<LayerStack> {
    let c = Container::read_from(path)?;
    LayerStack::from_container(&c).with_context(|| format!("loading model {}", path.display()))
}

fn load_set(path: &Path) -> Result<CalibrationSet> {
    let c = Container::read_from(path)?;
    CalibrationSet::from_container(&c).with_context(|| format!("loading sequences {}", path.display()))
}

fn load_profile(path: &Path, stack: &LayerStack) -> Result<EntropyProfile> {
    let v: serde_json::Value = read_json(path)?;
    let p = EntropyProfile::from_report(&v).with_context(|| format!("reading {}", path.display()))?;
    if p.num_layers() != stack.num_layers() {
        return Err(LuqError::InvalidArgument(format!(
            "{} lists {} layers, the model has {}",
            path.display(),
            p.num_layers(),
            stack.num_layers()
        ))
        .into());
    }
    Ok(p)
}

fn load_plan(path: &Path) -> Result<QuantPlan> {
    let v: serde_json::Value = read_json(path)?;
    QuantPlan::from_json(&v).with_context(|| format!("reading {}", path.display()))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| LuqError::InvalidArgument(format!("{mode} mode needs {flag}")).into())
}

/// Parse `start:stop:step` (inclusive) or `a,b,c`.
pub fn parse_grid(s: &str) -> Result<Vec<usize>, LuqError> {
    let bad = || LuqError::InvalidArgument(format!("cannot parse K grid `{s}`"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    if s.contains(':') {
        let parts: Vec<usize> = s.split(':').map(num).collect::<Result<_, _>>()?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if step == 0 || start > stop {
            return Err(bad());
        }
        Ok((start..=stop).step_by(step).collect())
    } else {
        s.split(',').map(num).collect()
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = WorkloadSpec {
        ranks: a.ranks.clone(),
        hidden_dim: a.hidden_dim,
        vocab_size: a.vocab_size,
        seq_len: a.seq_len,
        pool_seqs: a.pool_seqs,
        calib_seqs: a.calib_seqs,
        eval_seqs: a.eval_seqs,
        alpha: a.alpha,
        ..WorkloadSpec::planted()
    };
    let w = build_workload(&spec, a.seed)?;
    let pool = CalibrationSet {
        sequences: w
            .text_pool
            .iter()
            .cloned()
            .map(Sequence::Text)
            .chain(w.mm_pool.iter().cloned().map(Sequence::Multimodal))
            .collect(),
        seq_len: spec.seq_len,
        hidden_dim: spec.hidden_dim,
        alpha: 0.5,
        seed: a.seed,
    };
    write_container(&a.out_dir.join("model.luqc"), &w.stack.to_container()?)?;
    write_container(&a.out_dir.join("pool.luqc"), &pool.to_container()?)?;
    write_container(&a.out_dir.join("calib.luqc"), &w.calib.to_container()?)?;
    write_container(&a.out_dir.join("eval.luqc"), &w.eval.to_container()?)?;
    log::info!("wrote synthetic workload to {}", a.out_dir.display());
    Ok(())
}

fn cmd_calib(a: &CalibArgs) -> Result<()> {
    let pool = load_set(&a.pool)?;
    let mut text = Vec::new();
    let mut mm = Vec::new();
    for s in pool.sequences {
        match s {
            Sequence::Text(t) => text.push(t),
            Sequence::Multimodal(m) => mm.push(m),
        }
    }
    let set = build_mixed_calibration(&text, &mm, pool.hidden_dim, a.n_seqs, a.seq_len, a.alpha, a.seed)?;
    write_container(&a.out, &set.to_container()?)
}

fn cmd_entropy(a: &mut EntropyArgs) -> Result<()> {
    let k = match (a.k, &a.stability) {
        (Some(k), _) => k,
        (None, Some(path)) => read_json::<StabilityCurve>(path)?.selected_k,
        (None, None) => DEFAULT_K,
    };
    a.k = Some(k);
    let stack = load_stack(&a.model)?;
    let calib = load_set(&a.calib)?;
    let acts = stack.capture_calibration(&calib)?;
    let profile = layer_entropy_profile(&acts, k, a.seed)?;
    log::info!("entropy order (1-based): {:?}", profile.order.iter().map(|i| i + 1).collect::<Vec<_>>());
    write_json(&a.out, &profile.to_report())
}

fn cmd_stability(a: &StabilityArgs) -> Result<()> {
    let grid = parse_grid(&a.k_grid)?;
    // Fail before the expensive capture.
    if grid.len() < 4 {
        return Err(LuqError::GridTooSmall(format!("{} grid values; knee selection needs at least 4", grid.len())).into());
    }
    let stack = load_stack(&a.model)?;
    let calib = load_set(&a.calib)?;
    let acts = stack.capture_calibration(&calib)?;
    let curve = rank_stability_curve(&acts, &grid, a.seed, a.sensitivity)?;
    if curve.no_knee {
        log::warn!("no knee in the stability curve; using K = {}", curve.selected_k);
    }
    write_json(&a.out, &curve)
}

fn cmd_plan(a: &mut PlanArgs) -> Result<()> {
    let quant = a.quant.config()?;
    let stack = load_stack(&a.model)?;
    let profile = load_profile(&a.entropy, &stack)?;
    if a.mode == Mode::Budget && a.non_backbone_bytes.is_none() {
        a.non_backbone_bytes = Some(stack.config.non_backbone_params() as f64 * 4.0);
    }
    let select = SelectionConfig {
        mode: a.mode,
        tau: a.tau,
        budget_bytes: a.budget_bytes,
        k: a.k,
        metric: a.metric,
        search: a.search,
    };
    select.validate()?;
    let plan = match a.mode {
        Mode::FixedK => QuantPlan::new(&profile.order, a.k.expect("validated"), &quant)?,
        Mode::Budget => {
            let params = vec![stack.config.params_per_layer(); stack.num_layers()];
            budget_select(&profile, &params, a.budget_bytes.expect("validated"), a.non_backbone_bytes.unwrap_or(0.0), &quant)?
        }
        Mode::Threshold => {
            let calib = load_set(require(&a.calib, "--calib", "threshold")?)?;
            let eval = load_set(require(&a.eval, "--eval", "threshold")?)?;
            let r = threshold_select(&stack, &profile, &calib, &eval, &quant, &select)?;
            log::info!("k* = {} after {} evaluations {:?}", r.k_star, r.eval_count, r.evaluations);
            if r.non_monotone_suspected {
                log::warn!("performance is not monotone in k; the chosen k may not be the largest feasible one");
            }
            r.plan
        }
    };
    log::info!("plan: k = {}, nominal average bits {:.4}", plan.k, plan.avg_bits_nominal);
    write_json(&a.out, &plan.to_json())
}

fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let quant = a.quant.config()?;
    let stack = load_stack(&a.model)?;
    let calib = load_set(&a.calib)?;
    let plan = load_plan(&a.plan)?;
    if plan.methods.len() != stack.num_layers() {
        return Err(LuqError::InvalidArgument(format!(
            "plan covers {} layers, the model has {}",
            plan.methods.len(),
            stack.num_layers()
        ))
        .into());
    }
    let q = quantize_plan(&stack, &plan, &calib, &quant)?;
    log::info!("realized average bits {:.4}", q.avg_bits());
    let mut extra = serde_json::Map::new();
    extra.insert("plan".into(), plan.to_json());
    write_container(&a.out, &q.to_container(extra)?)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let c = Container::read_from(&a.model)?;
    let stack = LayerStack::from_container(&c).with_context(|| format!("loading model {}", a.model.display()))?;
    let split = load_set(&a.eval)?;
    let mut report = evaluate(&stack, &split, a.metric)?;
    report.plan = c.config.get("plan").cloned();
    let avg_bits = match c.config.get("layer_bits") {
        Some(v) => {
            let bits: Vec<f64> = serde_json::from_value(v.clone()).map_err(LuqError::from)?;
            bits.iter().sum::<f64>() / bits.len().max(1) as f64
        }
        None if stack.tags().iter().all(|&t| t == QuantTag::Fp32) => 32.0,
        None => return Err(LuqError::Manifest("quantized model without layer_bits".into()).into()),
    };
    let k = report.plan.as_ref().and_then(|p| p.get("k")).and_then(|k| k.as_u64());
    log::info!("{} = {:.6} over {}", a.metric.id(), report.score, report.split);
    write_json(&a.out, &report)?;
    let csv = format!(
        "k,avg_bits,score,metric,seed\n{},{},{},{},{}\n",
        k.map(|k| k.to_string()).unwrap_or_default(),
        avg_bits,
        report.score,
        a.metric.id(),
        split.seed
    );
    write_text(&sibling(&a.out, "csv"), &csv)
}

fn cmd_curve(a: &mut CurveArgs) -> Result<()> {
    let quant = a.quant.config()?;
    let stack = load_stack(&a.model)?;
    let calib = load_set(&a.calib)?;
    let eval = load_set(&a.eval)?;
    let profile = load_profile(&a.entropy, &stack)?;
    if a.k_steps == 0 {
        return Err(LuqError::InvalidArgument("--k-steps must be >= 1".into()).into());
    }
    let l = stack.num_layers();
    let ks = a.ks.clone().unwrap_or_else(|| {
        let mut ks: Vec<usize> = (0..=l).step_by(a.k_steps).collect();
        if ks.last() != Some(&l) {
            ks.push(l);
        }
        ks
    });
    a.ks = Some(ks.clone());
    let rows: Vec<TradeoffRow> = tradeoff_curve(&stack, &profile, &calib, &eval, &ks, &quant, a.metric, a.seed)?;
    write_text(&a.out, &tradeoff_csv(&rows))?;
    write_json(&sibling(&a.out, "json"), &rows)
}

fn cmd_ablate_order(a: &mut AblateOrderArgs) -> Result<()> {
    let quant = a.quant.config()?;
    let stack = load_stack(&a.model)?;
    let calib = load_set(&a.calib)?;
    let eval = load_set(&a.eval)?;
    let profile = load_profile(&a.entropy, &stack)?;
    let steps = *a.max_k.get_or_insert(stack.num_layers());
    let cmp = compare_orderings(&stack, &profile, &calib, &eval, steps, &quant, a.metric)?;
    log::info!("AUC low-first {:.4}, high-first {:.4}", cmp.auc_low, cmp.auc_high);
    write_json(&a.out, &cmp)
}

#[derive(Serialize)]
struct CalibAblation {
    metric: Metric,
    recipe: CalibRecipe,
    plan_k: usize,
    rows: Vec<AlphaRow>,
}

#[derive(Serialize)]
struct AlphaRow {
    alpha: f64,
    score: f64,
}

fn cmd_ablate_calib(a: &AblateCalibArgs) -> Result<()> {
    let quant = a.quant.config()?;
    let stack = load_stack(&a.model)?;
    let pool = load_set(&a.pool)?;
    let eval = load_set(&a.eval)?;
    let plan = load_plan(&a.plan)?;
    let mut text = Vec::new();
    let mut mm = Vec::new();
    for s in pool.sequences {
        match s {
            Sequence::Text(t) => text.push(t),
            Sequence::Multimodal(m) => mm.push(m),
        }
    }
    let recipe = CalibRecipe { n_seqs: a.n_seqs, seq_len: a.seq_len, seed: a.seed };
    let scores = compare_calibration(&stack, &text, &mm, &a.alphas, &plan, &eval, recipe, &quant, a.metric)?;
    let rows = scores.into_iter().map(|(alpha, score)| AlphaRow { alpha, score }).collect();
    write_json(&a.out, &CalibAblation { metric: a.metric, recipe, plan_k: plan.k, rows })
}
