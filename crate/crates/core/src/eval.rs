//! Teacher-forced scoring and the ablation drivers.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{build_mixed_calibration, CalibrationSet, MmSequence, Modality, NO_TARGET};
use crate::container::{synth_layer_stack, SynthSpec};
use crate::entropy::EntropyProfile;
use crate::error::{LuqError, Result};
use crate::net::LayerStack;
use crate::quant::{QuantConfig, StackQuantizer};
use crate::select::QuantPlan;
use crate::tensor::{rng_for, Matrix};

/// Higher-is-better scalar metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    TokenAccuracy,
    /// Perplexity, negated.
    NegPerplexity,
}

impl Metric {
    pub fn id(self) -> &'static str {
        match self {
            Metric::TokenAccuracy => "token_accuracy",
            Metric::NegPerplexity => "neg_perplexity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SeqScore {
    pub scored: usize,
    pub correct: usize,
    /// Summed negative log-likelihood of the targets.
    pub nll: f64,
}

/// Score `logits` `[N, vocab]` against per-position targets.
/// The top-1 prediction breaks ties toward the lowest id.
pub fn score_logits(logits: &[f32], targets: &[u32], vocab: usize) -> Result<SeqScore> {
    if logits.len() != targets.len() * vocab {
        return Err(LuqError::shape("logits and targets differ in length"));
    }
    let mut s = SeqScore::default();
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t == NO_TARGET {
            continue;
        }
        let t = t as usize;
        if t >= vocab {
            return Err(LuqError::invalid(format!("target {t} outside vocabulary of {vocab}")));
        }
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        let m = row[best] as f64;
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        s.scored += 1;
        s.correct += (best == t) as usize;
        s.nll += lse - row[t] as f64;
    }
    if !s.nll.is_finite() {
        return Err(LuqError::invalid("non-finite negative log-likelihood"));
    }
    Ok(s)
}

/// Per-sequence scores of `stack` on `split`.
pub fn score_split(stack: &LayerStack, split: &CalibrationSet) -> Result<Vec<SeqScore>> {
    if split.is_empty() {
        return Err(LuqError::Empty("evaluation split"));
    }
    let v = stack.config.vocab_size;
    split
        .sequences
        .par_iter()
        .map(|s| {
            let n = s.len();
            let h = stack.run_sequence(&stack.embed_sequence(s)?, n, &mut |_, _| {})?;
            score_logits(&stack.logits(&h, n), &s.targets(), v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    /// Mean of `per_sequence`.
    pub score: f64,
    pub per_sequence: Vec<f64>,
    pub split: String,
    pub plan: Option<serde_json::Value>,
    /// Kept out of serialized reports so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

fn describe(split: &CalibrationSet) -> String {
    format!(
        "{} sequences x {} tokens ({} text, {} multimodal)",
        split.len(),
        split.seq_len,
        split.count(Modality::Text),
        split.count(Modality::Multimodal)
    )
}

pub fn evaluate(stack: &LayerStack, split: &CalibrationSet, metric: Metric) -> Result<EvalReport> {
    let start = Instant::now();
    let scores: Vec<SeqScore> = score_split(stack, split)?.into_iter().filter(|s| s.scored > 0).collect();
    if scores.is_empty() {
        return Err(LuqError::Empty("set of scored tokens"));
    }
    let per_sequence: Vec<f64> = scores
        .iter()
        .map(|s| match metric {
            Metric::TokenAccuracy => s.correct as f64 / s.scored as f64,
            Metric::NegPerplexity => -(s.nll / s.scored as f64).exp(),
        })
        .collect();
    let score = per_sequence.iter().sum::<f64>() / per_sequence.len() as f64;
    Ok(EvalReport {
        metric,
        score,
        per_sequence,
        split: describe(split),
        plan: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn token_accuracy(stack: &LayerStack, split: &CalibrationSet) -> Result<f64> {
    Ok(evaluate(stack, split, Metric::TokenAccuracy)?.score)
}

/// `exp` of the mean NLL over every scored token of the split.
pub fn perplexity(stack: &LayerStack, split: &CalibrationSet) -> Result<f64> {
    let scores = score_split(stack, split)?;
    let (n, nll) = scores.iter().fold((0usize, 0.0f64), |(n, l), s| (n + s.scored, l + s.nll));
    if n == 0 {
        return Err(LuqError::Empty("set of scored tokens"));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingComparison {
    pub ks: Vec<usize>,
    pub low_first: Vec<f64>,
    pub high_first: Vec<f64>,
    /// `low_first - high_first` per k.
    pub gap: Vec<f64>,
    pub auc_low: f64,
    pub auc_high: f64,
    pub auc_diff: f64,
}

/// Trapezoidal area under `ys` over `xs`.
pub fn auc(xs: &[usize], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) as f64 * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Score-vs-k curves for the entropy order and its reverse, `k = 0..=steps`.
pub fn compare_orderings(
    stack: &LayerStack,
    profile: &EntropyProfile,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    steps: usize,
    quant: &QuantConfig,
    metric: Metric,
) -> Result<OrderingComparison> {
    if steps > stack.num_layers() {
        return Err(LuqError::invalid(format!("{steps} steps for {} layers", stack.num_layers())));
    }
    let ks: Vec<usize> = (0..=steps).collect();
    let reversed: Vec<usize> = profile.order.iter().rev().copied().collect();
    let mut quantizer = StackQuantizer::new(stack, calib, quant)?;
    let mut curve = |order: &[usize]| -> Result<Vec<f64>> {
        ks.iter()
            .map(|&k| {
                let plan = QuantPlan::new(order, k, quant)?;
                let q = quantizer.quantize(&plan.methods)?;
                Ok(evaluate(&q.stack, eval, metric)?.score)
            })
            .collect()
    };
    let low_first = curve(&profile.order)?;
    let high_first = curve(&reversed)?;
    let gap = low_first.iter().zip(&high_first).map(|(a, b)| a - b).collect();
    let (auc_low, auc_high) = (auc(&ks, &low_first), auc(&ks, &high_first));
    Ok(OrderingComparison { ks, low_first, high_first, gap, auc_low, auc_high, auc_diff: auc_low - auc_high })
}

/// Calibration recipe shared by the α sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibRecipe {
    pub n_seqs: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Score of `plan` when quantized with calibration sets that differ only in α.
#[allow(clippy::too_many_arguments)]
pub fn compare_calibration(
    stack: &LayerStack,
    text_pool: &[Vec<u32>],
    mm_pool: &[MmSequence],
    alphas: &[f64],
    plan: &QuantPlan,
    eval: &CalibrationSet,
    recipe: CalibRecipe,
    quant: &QuantConfig,
    metric: Metric,
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let calib = build_mixed_calibration(
                text_pool,
                mm_pool,
                stack.hidden_dim(),
                recipe.n_seqs,
                recipe.seq_len,
                alpha,
                recipe.seed,
            )?;
            let q = crate::select::quantize_plan(stack, plan, &calib, quant)?;
            Ok((alpha, evaluate(&q.stack, eval, metric)?.score))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub k: usize,
    pub avg_bits: f64,
    pub score: f64,
    pub metric: Metric,
    pub seed: u64,
}

/// One row per `k`: realized average bits and score.
#[allow(clippy::too_many_arguments)]
pub fn tradeoff_curve(
    stack: &LayerStack,
    profile: &EntropyProfile,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    ks: &[usize],
    quant: &QuantConfig,
    metric: Metric,
    seed: u64,
) -> Result<Vec<TradeoffRow>> {
    let mut quantizer = StackQuantizer::new(stack, calib, quant)?;
    ks.iter()
        .map(|&k| {
            let plan = QuantPlan::new(&profile.order, k, quant)?;
            let q = quantizer.quantize(&plan.methods)?;
            Ok(TradeoffRow { k, avg_bits: q.avg_bits(), score: evaluate(&q.stack, eval, metric)?.score, metric, seed })
        })
        .collect()
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("k,avg_bits,score,metric,seed\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.k, r.avg_bits, r.score, r.metric.id(), r.seed));
    }
    out
}

/// Synthetic stack with text and multimodal pools whose continuations are
/// the stack's own greedy predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub ranks: Vec<usize>,
    pub hidden_dim: usize,
    pub seq_len: usize,
    /// Random tokens before the greedy continuation of a text sequence.
    pub text_prefix: usize,
    /// Gaussian "image" embeddings before a multimodal continuation.
    pub image_len: usize,
    /// Standard deviation of the image embeddings.
    pub image_scale: f32,
    /// Image embeddings vary only within a shared random subspace of this
    /// dimension (`0` or `>= hidden_dim` for isotropic noise).
    pub image_rank: usize,
    /// Norm, relative to `sqrt(hidden_dim)`, of a mean shared by all image
    /// embeddings.
    pub image_offset: f32,
    /// Align the image subspace and mean with randomly chosen coordinate
    /// channels instead of random directions.
    pub image_channels: bool,
    pub pool_seqs: usize,
    pub calib_seqs: usize,
    pub eval_seqs: usize,
    pub alpha: f64,
    pub vocab_size: usize,
    pub up_gain: f32,
    pub down_gain: f32,
}

impl WorkloadSpec {
    /// Eight layers, the first four token-local.
    pub fn planted() -> Self {
        Self {
            ranks: vec![2, 2, 2, 2, 32, 32, 32, 32],
            hidden_dim: 32,
            seq_len: 32,
            text_prefix: 4,
            image_len: 12,
            image_scale: 1.0,
            image_rank: 2,
            image_offset: 2.0,
            image_channels: true,
            pool_seqs: 128,
            calib_seqs: 64,
            eval_seqs: 64,
            alpha: 0.5,
            vocab_size: 32,
            up_gain: 0.25,
            down_gain: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub stack: LayerStack,
    pub text_pool: Vec<Vec<u32>>,
    pub mm_pool: Vec<MmSequence>,
    pub calib: CalibrationSet,
    pub eval: CalibrationSet,
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Extend `embeds` (`p` positions) greedily to `n` positions; returns the
/// embeddings and the greedy next token of every position from `p - 1` on.
fn continue_greedy(stack: &LayerStack, mut embeds: Vec<f32>, p: usize, n: usize) -> Result<(Vec<f32>, Vec<u32>)> {
    let mut next = Vec::with_capacity(n - p + 1);
    for len in p..=n {
        let h = stack.run_sequence(&embeds, len, &mut |_, _| {})?;
        let tok = argmax(&stack.logits(&h[(len - 1) * stack.hidden_dim()..], 1));
        next.push(tok);
        if len < n {
            embeds.extend_from_slice(stack.embed.row(tok as usize));
        }
    }
    Ok((embeds, next))
}

fn text_sequence(stack: &LayerStack, spec: &WorkloadSpec, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let v = stack.config.vocab_size as u32;
    let mut toks: Vec<u32> = (0..spec.text_prefix.max(1)).map(|_| rng.random_range(0..v)).collect();
    let (_, next) = continue_greedy(stack, stack.embed_tokens(&toks)?, toks.len(), spec.seq_len)?;
    toks.extend_from_slice(&next[..spec.seq_len - toks.len()]);
    Ok(toks)
}

/// Shared geometry of the synthetic image embeddings.
struct ImageModel {
    /// `[rank, d]` rows spanning the varying subspace.
    basis: Option<Matrix>,
    mean: Vec<f32>,
}

impl ImageModel {
    fn new(spec: &WorkloadSpec, seed: u64) -> Self {
        let d = spec.hidden_dim;
        let mut rng = rng_for(seed, 0x696d67);
        let m = spec.image_rank;
        let mut channels: Vec<usize> = (0..d).collect();
        channels.shuffle(&mut rng);
        channels.truncate(m.clamp(1, d));
        let basis = (m > 0 && m < d).then(|| {
            let data = if spec.image_channels {
                (0..m * d).map(|i| if channels[i / d] == i % d { (m as f32).sqrt() } else { 0.0 }).collect()
            } else {
                (0..m * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
            };
            Matrix { rows: m, cols: d, data }
        });
        let dir: Vec<f32> = if spec.image_channels {
            (0..d).map(|j| if channels.contains(&j) { if rng.random::<bool>() { 1.0 } else { -1.0 } } else { 0.0 }).collect()
        } else {
            (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
        };
        let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
        let mean = dir.iter().map(|v| v / norm * spec.image_offset * (d as f32).sqrt()).collect();
        Self { basis, mean }
    }

    fn sample(&self, spec: &WorkloadSpec, rng: &mut impl Rng) -> Vec<f32> {
        let d = self.mean.len();
        let noise: Vec<f32> = match &self.basis {
            None => (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
            Some(b) => {
                let z: Vec<f32> = (0..b.rows).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let norm = 1.0 / (b.rows as f32).sqrt();
                (0..d).map(|j| (0..b.rows).map(|r| z[r] * b.get(r, j)).sum::<f32>() * norm).collect()
            }
        };
        noise.iter().zip(&self.mean).map(|(x, m)| x * spec.image_scale + m).collect()
    }
}

fn mm_sequence(stack: &LayerStack, spec: &WorkloadSpec, images: &ImageModel, rng: &mut impl Rng) -> Result<MmSequence> {
    let (p, n) = (spec.image_len.max(1), spec.seq_len);
    let image: Vec<f32> = (0..p).flat_map(|_| images.sample(spec, rng)).collect();
    let (embeds, next) = continue_greedy(stack, image, p, n)?;
    let mut targets = vec![NO_TARGET; n];
    targets[p - 1..].copy_from_slice(&next);
    Ok(MmSequence { embeds, targets })
}

fn pools(
    stack: &LayerStack,
    spec: &WorkloadSpec,
    images: &ImageModel,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<Vec<u32>>, Vec<MmSequence>)> {
    let text = (0..count)
        .into_par_iter()
        .map(|i| text_sequence(stack, spec, &mut rng_for(seed, stream + 2 * i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mm = (0..count)
        .into_par_iter()
        .map(|i| mm_sequence(stack, spec, images, &mut rng_for(seed, stream + 2 * i as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok((text, mm))
}

/// Build the stack, calibration pools, a calibration set at `spec.alpha`
/// and a disjoint half-and-half evaluation split, all from `seed`.
pub fn build_workload(spec: &WorkloadSpec, seed: u64) -> Result<Workload> {
    if spec.seq_len <= spec.text_prefix.max(spec.image_len) {
        return Err(LuqError::invalid("seq_len must exceed the prefix lengths"));
    }
    let synth = SynthSpec {
        vocab_size: spec.vocab_size,
        up_gain: spec.up_gain,
        down_gain: spec.down_gain,
        ..SynthSpec::new(spec.ranks.clone(), spec.hidden_dim, seed)
    };
    let stack = synth_layer_stack(&synth)?;
    let images = ImageModel::new(spec, seed);
    let (text_pool, mm_pool) = pools(&stack, spec, &images, spec.pool_seqs, seed, 1 << 20)?;
    let (eval_text, eval_mm) = pools(&stack, spec, &images, spec.eval_seqs, seed, 1 << 40)?;
    let calib = build_mixed_calibration(
        &text_pool,
        &mm_pool,
        spec.hidden_dim,
        spec.calib_seqs,
        spec.seq_len,
        spec.alpha,
        seed,
    )?;
    let eval = build_mixed_calibration(
        &eval_text,
        &eval_mm,
        spec.hidden_dim,
        spec.eval_seqs,
        spec.seq_len,
        0.5,
        seed ^ 0xe7a1,
    )?;
    Ok(Workload { stack, text_pool, mm_pool, calib, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigged_logits_score_perfectly() {
        let targets = [2u32, 0, NO_TARGET, 1];
        let mut logits = vec![0.0f32; 4 * 3];
        for (t, &g) in targets.iter().enumerate() {
            if g != NO_TARGET {
                logits[t * 3 + g as usize] = 50.0;
            }
        }
        let s = score_logits(&logits, &targets, 3).unwrap();
        assert_eq!((s.scored, s.correct), (3, 3));
        assert!(s.nll < 1e-6);
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let s = score_logits(&[0.0; 16 * 5], &[1, 2, 3, 4, 5], 16).unwrap();
        assert!(((s.nll / 5.0).exp() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn trapezoid() {
        assert_eq!(auc(&[0, 1, 2], &[1.0, 0.5, 0.0]), 1.0);
    }

    #[test]
    fn csv_header() {
        let rows = [TradeoffRow { k: 0, avg_bits: 4.0, score: 0.5, metric: Metric::TokenAccuracy, seed: 1 }];
        assert_eq!(tradeoff_csv(&rows), "k,avg_bits,score,metric,seed\n0,4,0.5,token_accuracy,1\n");
    }

    #[test]
    fn workload_continuations_are_fp_greedy() {
        let mut spec = WorkloadSpec::planted();
        spec.ranks = vec![2, 32];
        spec.pool_seqs = 4;
        spec.calib_seqs = 4;
        spec.eval_seqs = 4;
        spec.seq_len = 16;
        let w = build_workload(&spec, 3).unwrap();
        // the full-precision stack predicts its own continuations
        let mm_only = CalibrationSet {
            sequences: w.eval.sequences.iter().filter(|s| s.modality() == Modality::Multimodal).cloned().collect(),
            ..w.eval.clone()
        };
        assert_eq!(token_accuracy(&w.stack, &mm_only).unwrap(), 1.0);
    }
}
