use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use luq_core::calib::{CalibrationSet, Sequence};
use luq_core::container::{synth_layer_stack, Container, SynthSpec};
use luq_core::entropy::{layer_entropy_profile, rank_stability_curve};
use luq_core::eval::{
    build_workload, compare_calibration, compare_orderings, evaluate, perplexity, score_split, token_accuracy,
    tradeoff_curve, CalibRecipe, Metric, WorkloadSpec,
};
use luq_core::net::LayerStack;
use luq_core::quant::{quantize_stack, QuantConfig, QuantMethod};
use luq_core::select::{binary_search_select, budget_select, greedy_select, QuantPlan};
use luq_core::tensor::Activations;
use luq_core::LuqError;

fn small_spec() -> WorkloadSpec {
    WorkloadSpec {
        ranks: vec![2, 2, 16, 16],
        hidden_dim: 16,
        seq_len: 16,
        text_prefix: 3,
        image_len: 6,
        pool_seqs: 8,
        calib_seqs: 8,
        eval_seqs: 8,
        ..WorkloadSpec::planted()
    }
}

fn text_set(tokens: Vec<Vec<u32>>, d: usize) -> CalibrationSet {
    let n = tokens[0].len();
    CalibrationSet { sequences: tokens.into_iter().map(Sequence::Text).collect(), seq_len: n, hidden_dim: d, alpha: 0.0, seed: 0 }
}

#[test]
fn planted_low_rank_layers_have_the_lowest_entropy() {
    for seed in [7u64, 8, 9] {
        let stack = synth_layer_stack(&SynthSpec::new(vec![2, 2, 2, 2, 32, 32, 32, 32], 32, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 32 * 32).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let acts = stack.capture_activations(&Activations::from_vec(16, 32, 32, data).unwrap()).unwrap();
        let p = layer_entropy_profile(&acts, 100, 0).unwrap();
        let mut first: Vec<usize> = p.order[..4].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3], "H = {:?}", p.entropies);
    }
}

#[test]
fn two_token_calibration_has_a_flat_stability_curve() {
    let tokens = (0..8).map(|s| (0..16).map(|t| ((s + t) % 2) as u32).collect()).collect();
    let set = text_set(tokens, 16);
    // Token-local layers map the two tokens to two vectors at every depth.
    let stack = synth_layer_stack(&SynthSpec::new(vec![2, 4, 8], 16, 1)).unwrap();
    let acts = stack.capture_calibration(&set).unwrap();
    let curve = rank_stability_curve(&acts, &[10, 20, 30, 40, 50], 3, 1.0).unwrap();
    assert!(curve.distances.iter().all(|&d| d == 0.0), "{:?}", curve.distances);
    assert!(curve.no_knee);
    assert_eq!(curve.selected_k, 50);
}

#[test]
fn quantized_models_round_trip_and_run_identically() {
    let w = build_workload(&small_spec(), 2).unwrap();
    let methods = [QuantMethod::Bin, QuantMethod::Gptq, QuantMethod::Rtn, QuantMethod::Bin];
    let q = quantize_stack(&w.stack, &methods, &w.calib, &QuantConfig::default()).unwrap();
    let bytes = q.to_container(Default::default()).unwrap().to_bytes();
    let back = LayerStack::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, q.stack);
    assert_eq!(back.tags(), methods.iter().map(|m| m.tag()).collect::<Vec<_>>());

    // Packed execution and its dense expansion agree exactly.
    let inputs = back.embed_set(&w.eval).unwrap();
    let (h_mixed, l_mixed) = back.forward(&inputs).unwrap();
    let (h_dense, l_dense) = back.to_dense().forward(&inputs).unwrap();
    assert_eq!(h_mixed, h_dense);
    assert_eq!(l_mixed, l_dense);
}

#[test]
fn report_scalar_is_the_sequence_mean() {
    let w = build_workload(&small_spec(), 3).unwrap();
    for metric in [Metric::TokenAccuracy, Metric::NegPerplexity] {
        let r = evaluate(&w.stack, &w.eval, metric).unwrap();
        let mean = r.per_sequence.iter().sum::<f64>() / r.per_sequence.len() as f64;
        assert!((r.score - mean).abs() <= 1e-12);
    }
    assert_eq!(evaluate(&w.stack, &w.eval, Metric::TokenAccuracy).unwrap().score, token_accuracy(&w.stack, &w.eval).unwrap());
}

#[test]
fn perplexity_matches_direct_log_softmax() {
    let w = build_workload(&small_spec(), 4).unwrap();
    let stack = &w.stack;
    let (mut nll, mut count) = (0.0f64, 0usize);
    for s in &w.eval.sequences {
        let n = s.len();
        let x = stack.embed_sequence(s).unwrap();
        let h = stack.run_sequence(&x, n, &mut |_, _| {}).unwrap();
        let logits = stack.logits(&h, n);
        let v = stack.config.vocab_size;
        for (t, &target) in s.targets().iter().enumerate() {
            if target == luq_core::calib::NO_TARGET {
                continue;
            }
            let row = &logits[t * v..(t + 1) * v];
            let z: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
            nll -= (row[target as usize] as f64).exp().ln() - z.ln();
            count += 1;
        }
    }
    let oracle = (nll / count as f64).exp();
    let got = perplexity(stack, &w.eval).unwrap();
    assert!((got - oracle).abs() / oracle < 1e-9, "{got} vs {oracle}");
}

#[test]
fn random_stack_scores_chance_on_random_targets() {
    let spec = SynthSpec { vocab_size: 16, ..SynthSpec::new(vec![16, 16], 16, 5) };
    let stack = synth_layer_stack(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens: Vec<Vec<u32>> = (0..80).map(|_| (0..32).map(|_| rng.random_range(0..16)).collect()).collect();
    let set = text_set(tokens, 16);
    let scored: usize = score_split(&stack, &set).unwrap().iter().map(|s| s.scored).sum();
    assert!(scored >= 2000);
    let acc = token_accuracy(&stack, &set).unwrap();
    assert!((acc - 1.0 / 16.0).abs() <= 0.05, "{acc}");
}

#[test]
fn empty_split_is_an_error() {
    let w = build_workload(&small_spec(), 6).unwrap();
    let empty = CalibrationSet { sequences: Vec::new(), ..w.eval.clone() };
    assert!(matches!(token_accuracy(&w.stack, &empty), Err(LuqError::Empty(_))));
    assert!(perplexity(&w.stack, &empty).is_err());
}

#[test]
fn ordering_curves_share_their_endpoints() {
    let w = build_workload(&small_spec(), 7).unwrap();
    let acts = w.stack.capture_calibration(&w.calib).unwrap();
    let profile = layer_entropy_profile(&acts, 20, 0).unwrap();
    let cmp = compare_orderings(&w.stack, &profile, &w.calib, &w.eval, 4, &QuantConfig::default(), Metric::TokenAccuracy).unwrap();
    assert_eq!(cmp.ks, vec![0, 1, 2, 3, 4]);
    assert_eq!(cmp.low_first[0], cmp.high_first[0]);
    assert_eq!(cmp.low_first[4], cmp.high_first[4]);
    assert!(compare_orderings(&w.stack, &profile, &w.calib, &w.eval, 5, &QuantConfig::default(), Metric::TokenAccuracy).is_err());
}

#[test]
fn repeated_alpha_gives_repeated_scores() {
    let w = build_workload(&small_spec(), 8).unwrap();
    let cfg = QuantConfig::default();
    let plan = QuantPlan::new(&[0, 1, 2, 3], 2, &cfg).unwrap();
    let recipe = CalibRecipe { n_seqs: 8, seq_len: 16, seed: 8 };
    let s = compare_calibration(&w.stack, &w.text_pool, &w.mm_pool, &[0.5, 0.5], &plan, &w.eval, recipe, &cfg, Metric::TokenAccuracy).unwrap();
    assert_eq!(s[0], s[1]);
}

#[test]
fn tradeoff_rows_follow_the_k_list() {
    let w = build_workload(&small_spec(), 9).unwrap();
    let acts = w.stack.capture_calibration(&w.calib).unwrap();
    let profile = layer_entropy_profile(&acts, 20, 0).unwrap();
    let cfg = QuantConfig::default();
    let rows = tradeoff_curve(&w.stack, &profile, &w.calib, &w.eval, &[0], &cfg, Metric::TokenAccuracy, 9).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].avg_bits, 4.0);
    let rows = tradeoff_curve(&w.stack, &profile, &w.calib, &w.eval, &[0, 1, 2, 3, 4], &cfg, Metric::TokenAccuracy, 9).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.windows(2).all(|r| r[1].avg_bits < r[0].avg_bits));
}

#[test]
fn threshold_extremes_and_search_agreement() {
    let w = build_workload(&small_spec(), 10).unwrap();
    let acts = w.stack.capture_calibration(&w.calib).unwrap();
    let profile = layer_entropy_profile(&acts, 20, 0).unwrap();
    let cfg = QuantConfig::default();
    let m = Metric::TokenAccuracy;
    let all = greedy_select(&w.stack, &profile, &w.calib, &w.eval, &cfg, f64::NEG_INFINITY, m).unwrap();
    assert_eq!(all.k_star, 4);
    let none = greedy_select(&w.stack, &profile, &w.calib, &w.eval, &cfg, 2.0, m).unwrap();
    assert_eq!(none.k_star, 0);
    assert_eq!(none.eval_count, 1);
    let b = binary_search_select(&w.stack, &profile, &w.calib, &w.eval, &cfg, f64::NEG_INFINITY, m).unwrap();
    assert_eq!(b.plan, all.plan.clone());
}

#[test]
fn budget_mode_reports_infeasible_budgets() {
    let stack = synth_layer_stack(&SynthSpec::new(vec![2, 2, 16, 16], 16, 0)).unwrap();
    let profile = luq_core::entropy::EntropyProfile::from_entropies(vec![1.0, 0.5, 3.0, 2.0], 100, 0);
    let params = vec![stack.config.params_per_layer(); 4];
    let cfg = QuantConfig::default();
    let full = params.iter().sum::<usize>() as f64 * 4.0 / 8.0;
    assert_eq!(budget_select(&profile, &params, full, 0.0, &cfg).unwrap().k, 0);
    let plan = budget_select(&profile, &params, full * 0.7, 0.0, &cfg).unwrap();
    assert!(plan.k > 0);
    assert_eq!(plan.methods[1], QuantMethod::Bin);
    let err = budget_select(&profile, &params, 1.0, 0.0, &cfg).unwrap_err();
    assert!(err.to_string().contains("budget infeasible"));
}
