//! Property tests for the core invariants.

use std::collections::BTreeMap;

use crate::client::{compute_example_weight, LocalUpdate, WeightScheme, WeightTables};
use crate::payload::{
    decode_update, encode_update, round_to_f16, serialized_size, unwrap, wrap, QuantStats,
};
use crate::{
    aggregate, apply_policy, deserialize, edit_distance, freeze, init_model, serialize, wer,
    AccTable, AggregationRule, ClientExample, FreqTable, ModelArch, PrecisionPolicy,
    TrainableSet, WordId,
};
use proptest::prelude::*;

/// Exhaustive edit distance used as the oracle for the DP implementation.
fn brute_edit_distance(a: &[WordId], b: &[WordId]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edit_distance(ra, rb) + usize::from(x != y);
            let del = brute_edit_distance(ra, b) + 1;
            let ins = brute_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Round-to-nearest-even onto the half grid, computed in f64 without any
/// half-precision library. `None` on overflow.
fn f16_oracle(x: f32) -> Option<f64> {
    let x = x as f64;
    if x == 0.0 {
        return Some(x);
    }
    let e = x.abs().log2().floor().max(-14.0) as i32;
    let ulp = 2f64.powi(e - 10);
    let r = (x / ulp).round_ties_even() * ulp;
    (r.abs() <= 65504.0).then_some(r)
}

fn arb_arch() -> impl Strategy<Value = ModelArch> {
    (2usize..12, 1usize..6, prop::collection::vec(1usize..8, 1..4))
        .prop_map(|(v, f, h)| ModelArch::new(v, f, h))
}

proptest! {
    #[test]
    fn f16_rounding_matches_oracle(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(x.is_finite());
        let mut stats = QuantStats::default();
        let got = round_to_f16(x, &mut stats) as f64;
        match f16_oracle(x) {
            Some(r) => {
                prop_assert_eq!(got, r);
                prop_assert_eq!(stats.overflow, 0);
            }
            None => {
                prop_assert_eq!(got.abs(), 65504.0);
                prop_assert_eq!(stats.overflow, 1);
            }
        }
    }

    #[test]
    fn payload_roundtrip_and_policy(arch in arb_arch(), seed in any::<u64>(), omc in any::<bool>(), k in 0usize..3) {
        let params = init_model(&arch, seed).unwrap();
        let set = [TrainableSet::Full, TrainableSet::DecoderOnly, TrainableSet::DecoderPlusTopK(1)][k];
        let frozen = freeze(&params, &set.resolve(&arch).unwrap()).unwrap();
        let policy = PrecisionPolicy { omc_enabled: omc };
        let (once, _) = apply_policy(&frozen, policy).unwrap();
        let (twice, _) = apply_policy(&once, policy).unwrap();
        prop_assert!(once.bit_eq(&twice));
        for v in &once.variables {
            if v.trainable || !omc || v.name.ends_with("bias") {
                prop_assert_eq!(v.precision, crate::Precision::F32);
            }
        }
        let bytes = serialize(&once).unwrap();
        prop_assert_eq!(bytes.len(), serialized_size(&once));
        prop_assert!(deserialize(&bytes).unwrap().bit_eq(&once));
        prop_assert_eq!(unwrap(&wrap(&bytes, true)).unwrap(), bytes.clone());
        prop_assert_eq!(unwrap(&wrap(&bytes, false)).unwrap(), bytes);
    }

    #[test]
    fn download_shrinks_by_two_bytes_per_frozen_matrix_element(arch in arb_arch(), seed in any::<u64>()) {
        let layers = arch.hidden_dims.len();
        for set in [TrainableSet::DecoderOnly, TrainableSet::DecoderPlusTopK(layers), TrainableSet::Full] {
            let frozen = freeze(&init_model(&arch, seed).unwrap(), &set.resolve(&arch).unwrap()).unwrap();
            let off = serialize(&apply_policy(&frozen, PrecisionPolicy { omc_enabled: false }).unwrap().0).unwrap();
            let on = serialize(&apply_policy(&frozen, PrecisionPolicy { omc_enabled: true }).unwrap().0).unwrap();
            let elems: usize = frozen.variables.iter()
                .filter(|v| !v.trainable && v.name.ends_with("matrix"))
                .map(|v| v.len()).sum();
            prop_assert_eq!(off.len() - on.len(), 2 * elems);
        }
    }

    #[test]
    fn download_weakly_grows_with_trainable_set(arch in arb_arch(), seed in any::<u64>()) {
        let params = init_model(&arch, seed).unwrap();
        let size = |set: TrainableSet| {
            let frozen = freeze(&params, &set.resolve(&arch).unwrap()).unwrap();
            serialize(&apply_policy(&frozen, PrecisionPolicy { omc_enabled: true }).unwrap().0).unwrap().len()
        };
        let mut last = size(TrainableSet::DecoderOnly);
        for k in 1..=arch.hidden_dims.len() {
            let s = size(TrainableSet::DecoderPlusTopK(k));
            prop_assert!(s >= last);
            last = s;
        }
        prop_assert_eq!(last, size(TrainableSet::Full));
    }

    #[test]
    fn update_roundtrip(arch in arb_arch(), seed in any::<u64>(), w in 0.0f64..100.0, n in 0u32..10) {
        let params = init_model(&arch, seed).unwrap();
        let grads: BTreeMap<String, Vec<f32>> = params.variables.iter()
            .map(|v| (v.name.clone(), v.data.iter().map(|x| x * 0.5).collect()))
            .collect();
        let bytes = encode_update(&grads, &params, w, n).unwrap();
        let d = decode_update(&bytes).unwrap();
        prop_assert_eq!(d.gradients, grads);
        prop_assert_eq!(d.weight, w);
        prop_assert_eq!(d.example_count, n);
    }

    #[test]
    fn edit_distance_properties(
        a in prop::collection::vec(0u32..4, 0..7),
        b in prop::collection::vec(0u32..4, 0..7),
        c in prop::collection::vec(0u32..4, 0..7),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, brute_edit_distance(&a, &b));
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert!(edit_distance(&a, &c) <= d + edit_distance(&b, &c));
        if !b.is_empty() {
            prop_assert_eq!(wer(&b, &b).unwrap(), 0.0);
            prop_assert!(wer(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn frequency_weights_scale_inversely(
        counts in prop::collection::vec(1u32..50, 8),
        fin in prop::collection::vec(0u32..8, 1..5),
        c in 0.1f64..20.0,
    ) {
        let incumbent: Vec<WordId> = fin.iter().map(|w| (w + 1) % 8).collect();
        let e = ClientExample::new(vec![vec![0.0]; fin.len()], fin.clone(), incumbent, fin).unwrap();
        let freq = FreqTable {
            counts: counts.iter().enumerate().map(|(w, &n)| (w as WordId, n as f64)).collect(),
            epsilon: 1.0,
            floor: 1.0,
        };
        let t = |f: FreqTable| WeightTables { freq: f, acc: AccTable::default(), count_tokens: false };
        let base = compute_example_weight(&e, WeightScheme::Frequency, Some(&t(freq.clone()))).unwrap().weight;
        let scaled = compute_example_weight(&e, WeightScheme::Frequency, Some(&t(freq.scaled(c)))).unwrap().weight;
        prop_assert!((scaled - base / c).abs() <= 1e-12 * base.max(1.0));
        prop_assert!(base > 0.0);
    }

    #[test]
    fn aggregation_is_order_free_and_wca_matches_simple_avg_for_equal_weights(
        seed in any::<u64>(),
        n in 1usize..5,
        w in 0.5f64..4.0,
    ) {
        let arch = ModelArch::new(5, 3, vec![4]);
        let updates: Vec<LocalUpdate> = (0..n).map(|i| {
            let p = init_model(&arch, seed.wrapping_add(i as u64)).unwrap();
            LocalUpdate {
                client_id: i,
                gradients: p.variables.iter().map(|v| (v.name.clone(), v.data.iter().map(|x| x * w as f32).collect())).collect(),
                weight: w,
                example_count: 2,
                weight_misses: 0,
            }
        }).collect();
        let wca = aggregate(&updates, AggregationRule::Wca).unwrap().unwrap();
        let avg = aggregate(&updates, AggregationRule::SimpleAvg).unwrap().unwrap();
        let mut rev = updates.clone();
        rev.reverse();
        prop_assert_eq!(aggregate(&rev, AggregationRule::Wca).unwrap().unwrap(), wca.clone());
        for (k, v) in &wca {
            for (a, b) in v.iter().zip(&avg[k]) {
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3));
            }
        }
    }
}

#[test]
fn all_zero_weights_skip_the_round() {
    let arch = ModelArch::new(4, 2, vec![3]);
    let p = init_model(&arch, 1).unwrap();
    let u = LocalUpdate {
        client_id: 0,
        gradients: p.variables.iter().map(|v| (v.name.clone(), vec![0.0; v.len()])).collect(),
        weight: 0.0,
        example_count: 2,
        weight_misses: 0,
    };
    assert!(aggregate(&[u], AggregationRule::Wca).unwrap().is_none());
}

#[test]
fn f16_oracle_spot_values() {
    assert_eq!(f16_oracle(1.0), Some(1.0));
    assert_eq!(f16_oracle(65504.0), Some(65504.0));
    assert_eq!(f16_oracle(1e-8), Some(0.0));
    assert_eq!(f16_oracle(70000.0), None);
    // 1 + 2^-11 is a tie between 1 and 1 + 2^-10; even wins.
    assert_eq!(f16_oracle(1.0 + 2f32.powi(-11)), Some(1.0));
}
