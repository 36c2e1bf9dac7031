use proptest::prelude::*;

use luq_core::container::{Container, ContainerKind, DType};
use luq_core::entropy::{empirical_distribution, entropy_order, kendall_distance, shannon_entropy, EntropyProfile};
use luq_core::quant::pack::{pack_bits, pack_nibbles, unpack_bits, unpack_nibbles};
use luq_core::quant::{qmax, rtn_quantize, QuantConfig, QuantMethod, QuantizedTensor};
use luq_core::select::{binary_search, budget_k, greedy_search, model_bytes, QuantPlan};
use luq_core::tensor::Matrix;

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn sample_container() -> Container {
    let mut c = Container::new(ContainerKind::Model, serde_json::json!({"note": "fuzz"}));
    c.push_f32("a", &[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, -7.25]).unwrap();
    c.push_u32("b", &[4], &[0, 1, 2, u32::MAX]).unwrap();
    c.push("c", DType::Packed4, &[5], pack_nibbles(&[-8, 7, 0, 3, -1])).unwrap();
    c.push("d", DType::PackedBin, &[9], pack_bits(&[true, false, true, true, false, false, true, false, true])).unwrap();
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_containers_read_back_or_fail_cleanly(
        edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4),
        cut in proptest::option::of(any::<prop::sample::Index>()),
    ) {
        let mut bytes = sample_container().to_bytes();
        for (at, v) in &edits {
            let i = at.index(bytes.len());
            bytes[i] = *v;
        }
        if let Some(c) = cut {
            bytes.truncate(c.index(bytes.len()));
        }
        if let Ok(c) = Container::from_bytes(&bytes) {
            let again = Container::from_bytes(&c.to_bytes()).expect("re-serialized container must parse");
            prop_assert_eq!(&again, &c);
            prop_assert_eq!(again.to_bytes(), c.to_bytes());
        }
    }

    #[test]
    fn kendall_is_a_normalized_metric(
        (a, b, c) in (2usize..9).prop_flat_map(|n| (permutation(n), permutation(n), permutation(n)))
    ) {
        let d = |x: &[usize], y: &[usize]| kendall_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&d(&a, &b)));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        let rev: Vec<usize> = a.iter().rev().copied().collect();
        prop_assert_eq!(d(&a, &rev), 1.0);
    }

    #[test]
    fn entropy_bounds_and_permutation_invariance(
        assign in proptest::collection::vec(0u32..12, 1..300),
        perm in permutation(12),
    ) {
        let p = empirical_distribution(&assign, 12).unwrap();
        let h = shannon_entropy(&p).unwrap();
        prop_assert!(h >= 0.0 && h <= 12f64.ln() + 1e-12);
        let shuffled: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        prop_assert!((shannon_entropy(&shuffled).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn merging_clusters_never_raises_entropy(
        assign in proptest::collection::vec(0u32..10, 1..300),
        a in 0u32..10,
        b in 0u32..10,
    ) {
        let h = shannon_entropy(&empirical_distribution(&assign, 10).unwrap()).unwrap();
        let merged: Vec<u32> = assign.iter().map(|&x| if x == b { a } else { x }).collect();
        let hm = shannon_entropy(&empirical_distribution(&merged, 10).unwrap()).unwrap();
        prop_assert!(hm <= h + 1e-12);
    }

    #[test]
    fn positive_scaling_leaves_plans_unchanged(
        h in proptest::collection::vec(0.0f64..5.0, 1..40),
        scale in 1e-3f64..1e3,
        k_frac in 0.0f64..=1.0,
    ) {
        let scaled: Vec<f64> = h.iter().map(|x| x * scale).collect();
        prop_assert_eq!(entropy_order(&h), entropy_order(&scaled));
        let cfg = QuantConfig::default();
        let k = (k_frac * h.len() as f64).floor() as usize;
        let a = QuantPlan::new(&EntropyProfile::from_entropies(h, 100, 0).order, k, &cfg).unwrap();
        let b = QuantPlan::new(&EntropyProfile::from_entropies(scaled, 100, 0).order, k, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn order_is_a_stable_sort(h in proptest::collection::vec(0u8..6, 1..50)) {
        let hf: Vec<f64> = h.iter().map(|&x| x as f64).collect();
        let mut oracle: Vec<usize> = (0..h.len()).collect();
        // insertion sort keeps equal keys in index order
        for i in 1..oracle.len() {
            let mut j = i;
            while j > 0 && hf[oracle[j - 1]] > hf[oracle[j]] {
                oracle.swap(j - 1, j);
                j -= 1;
            }
        }
        prop_assert_eq!(entropy_order(&hf), oracle);
    }

    #[test]
    fn binary_search_matches_linear_scan(
        l in 1usize..=64,
        raw in proptest::collection::vec(0.0f64..1.0, 65),
        tau in -0.1f64..1.1,
    ) {
        let mut perf = raw[..=l].to_vec();
        perf.sort_by(|a, b| b.total_cmp(a));
        let greedy = greedy_search(l, tau, |k| Ok(perf[k])).unwrap();
        let binary = binary_search(l, tau, |k| Ok(perf[k])).unwrap();
        let linear = (1..=l).take_while(|&k| perf[k] >= tau).last().unwrap_or(0);
        prop_assert_eq!(greedy.k_star, linear);
        prop_assert_eq!(binary.k_star, linear);
        // Only a failing k = 0 contradicts the bisection premise here.
        prop_assert_eq!(binary.non_monotone_suspected, perf[0] < tau);
        prop_assert!(binary.eval_count() <= ((l + 1) as f64).log2().ceil() as usize + 1);
    }

    #[test]
    fn budget_choice_is_the_smallest_feasible_k(
        params in proptest::collection::vec(1usize..5000, 1..32),
        frac in 0.0f64..1.2,
    ) {
        let order: Vec<usize> = (0..params.len()).collect();
        let full = model_bytes(&order, &params, 0, 1.08, 4.0, 100.0);
        let floor = model_bytes(&order, &params, params.len(), 1.08, 4.0, 100.0);
        let budget = floor + frac * (full - floor);
        match budget_k(&order, &params, budget, 1.08, 4.0, 100.0) {
            Ok(k) => {
                prop_assert!(model_bytes(&order, &params, k, 1.08, 4.0, 100.0) <= budget);
                if k > 0 {
                    prop_assert!(model_bytes(&order, &params, k - 1, 1.08, 4.0, 100.0) > budget);
                }
            }
            Err(e) => prop_assert!(budget < floor, "{e}"),
        }
    }

    #[test]
    fn plan_tags_follow_the_order(order in (1usize..20).prop_flat_map(permutation), k_frac in 0.0f64..=1.0) {
        let cfg = QuantConfig::default();
        let k = (k_frac * order.len() as f64).floor() as usize;
        let plan = QuantPlan::new(&order, k, &cfg).unwrap();
        for (j, &i) in order.iter().enumerate() {
            let expected = if j < k { QuantMethod::Bin } else { QuantMethod::Gptq };
            prop_assert_eq!(plan.methods[i], expected);
        }
        prop_assert_eq!(QuantPlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    #[test]
    fn nominal_bits_fall_as_k_grows(l in 1usize..40) {
        let cfg = QuantConfig::default();
        let order: Vec<usize> = (0..l).collect();
        let bits: Vec<f64> = (0..=l).map(|k| QuantPlan::new(&order, k, &cfg).unwrap().avg_bits_nominal).collect();
        prop_assert!(bits.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(bits[0], 4.0);
    }

    #[test]
    fn rtn_codes_stay_on_grid(
        data in proptest::collection::vec(-10.0f32..10.0, 48),
        bits in 2u8..=4,
        group in prop::sample::select(vec![4usize, 6, 16, 128]),
    ) {
        let w = Matrix::from_vec(3, 16, data).unwrap();
        let q = rtn_quantize(&w, bits, group).unwrap();
        let deq = q.dequantize().unwrap();
        let ng = 16usize.div_ceil(group);
        for r in 0..3 {
            for c in 0..16 {
                let s = q.scales[r * ng + c / group] as f64;
                let err = (deq.get(r, c) as f64 - w.get(r, c) as f64).abs();
                prop_assert!(err <= s / 2.0 + 1e-5 * s.max(1.0), "err {} step {}", err, s);
                prop_assert!((deq.get(r, c) as f64).abs() <= qmax(bits) as f64 * s * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn packing_round_trips(
        codes in proptest::collection::vec(-8i8..=7, 0..100),
        flags in proptest::collection::vec(any::<bool>(), 0..100),
    ) {
        prop_assert_eq!(unpack_nibbles(&pack_nibbles(&codes), codes.len()), codes);
        prop_assert_eq!(unpack_bits(&pack_bits(&flags), flags.len()), flags);
    }

    #[test]
    fn quantized_tensors_round_trip_through_containers(
        data in proptest::collection::vec(-3.0f32..3.0, 64),
        method in prop::sample::select(vec![QuantMethod::Rtn, QuantMethod::Gptq, QuantMethod::Bin]),
    ) {
        let w = Matrix::from_vec(4, 16, data).unwrap();
        let cfg = QuantConfig { q_high: QuantMethod::Rtn, ..QuantConfig::default() };
        let mut h = luq_core::quant::HessianAccumulator::new(16);
        for i in 0..32 {
            let x: Vec<f32> = (0..16).map(|j| (((i * 7 + j * 3) % 11) as f32 - 5.0) / 3.0).collect();
            h.add(&x).unwrap();
        }
        let q = cfg.quantize(method, &w, &h).unwrap();
        let mut c = Container::new(ContainerKind::Quantized, serde_json::json!({}));
        q.write_records(&mut c, "w").unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let r = QuantizedTensor::read_records(&back, "w", method.tag(), cfg.params_for(method)).unwrap();
        prop_assert_eq!(&r, &q);
        prop_assert_eq!(r.dequantize().unwrap(), q.dequantize().unwrap());
    }
}
