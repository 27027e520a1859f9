mod common;

use iffnet::io::{decode_tensor, encode_tensor};
use iffnet::kv::KvMap;
use iffnet::model::{BufferStore, Ctx, IffArchConfig, IffNet, ParamLayout, ParamStore, ParamVars};
use iffnet::sim::{gen_triple, oracle_mse, SimConfig};
use iffnet::tape::Tape;
use iffnet::tensor::{reshape_axis, reshape_axis_inv};
use iffnet::train::lr_schedule;
use iffnet::{AttentionAxis, Tensor};
use proptest::prelude::*;
use std::path::Path;

fn axis() -> impl Strategy<Value = AttentionAxis> {
    prop_oneof![
        Just(AttentionAxis::Temporal),
        Just(AttentionAxis::Frequency)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_round_trip_is_exact(n in 1usize..3, c in 1usize..6, t in 1usize..7, f in 1usize..7,
                                   ax in axis(), seed in any::<u64>()) {
        let x = common::random::<f32>(&[n, c, t, f], seed);
        let r = reshape_axis(&x, ax).unwrap();
        prop_assert_eq!(reshape_axis_inv(&r, ax, x.shape()).unwrap(), x);
    }

    #[test]
    fn ift_round_trip(shape in prop::collection::vec(1usize..5, 0..=4), seed in any::<u64>()) {
        let x = common::random::<f32>(&shape, seed);
        prop_assert_eq!(decode_tensor::<f32>(&encode_tensor(&x)).unwrap(), x);
    }

    #[test]
    fn constant_input_attention_doubles(c in 1usize..4, t in 1usize..6, f in 1usize..6,
                                        v in -5.0f64..5.0, ax in axis()) {
        let x0 = Tensor::full(&[1, c, t, f], v);
        let params = ParamVars::default();
        let buffers = BufferStore::empty();
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let mut ctx = Ctx::new(&mut tape, &params, &buffers, true);
        let y = ctx.separable_self_attention(x, ax).unwrap();
        for &o in tape.value(y).data() {
            prop_assert!((o - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_output_is_convex(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let model = IffNet::<f64>::init(IffArchConfig::sized(1, 2), seed).unwrap();
        let x_e = common::random::<f64>(&[4, 3], seed ^ 1).map(|v| v * scale);
        let x_n = common::random::<f64>(&[4, 3], seed ^ 2).map(|v| v * scale);
        let out = model.fuse(&x_e, &x_n).unwrap();
        for i in 0..out.fused.numel() {
            let (a, b, y) = (out.x_e_in.data()[i], out.x_n_in.data()[i], out.fused.data()[i]);
            prop_assert!(y >= a.min(b) && y <= a.max(b));
        }
    }

    #[test]
    fn param_count_is_additive(blocks in 1usize..4, filters in 1usize..9) {
        let cfg = IffArchConfig::sized(blocks, filters);
        let store = ParamStore::<f32>::init(&ParamLayout::new(&cfg), 0);
        let mut tops = vec!["enh".to_string(), "noisy".to_string(), "merge".to_string()];
        tops.extend((0..blocks).map(|i| format!("inter{i}")));
        let parts: usize = tops.iter().map(|p| store.count_prefix(p)).sum();
        prop_assert_eq!(parts, store.count());
    }

    #[test]
    fn mse_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let a = common::random::<f32>(&[3, 4], seed);
        let b = common::random::<f32>(&[3, 4], seed.wrapping_add(1));
        let ab = oracle_mse(&a, &b).unwrap();
        prop_assert_eq!(ab, oracle_mse(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(oracle_mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn simulator_is_pure(seed in any::<u64>(), snr in -5.0f64..20.0, frac in 0.0f64..1.0) {
        let cfg = SimConfig { seed, snr_db: snr, suppress_frac: frac, frames: 12, bins: 10, ..SimConfig::default() };
        let a = gen_triple(&cfg).unwrap();
        prop_assert_eq!(&a, &gen_triple(&cfg).unwrap());
        prop_assert!(a.clean.is_finite() && a.noisy.is_finite() && a.enhanced.is_finite());
    }

    #[test]
    fn schedule_rises_then_decays(warmup in 1usize..5000, peak in 1e-4f64..1e-1) {
        let at = |s| lr_schedule(s, peak, warmup).unwrap();
        prop_assert!((at(warmup) - peak).abs() <= 1e-15 * peak);
        prop_assert!((at(warmup + 1) - at(warmup)).abs() <= peak / warmup as f64 + 1e-15);
        prop_assert!(at(warmup + 1) <= at(warmup));
        if warmup > 1 {
            prop_assert!(at(warmup - 1) < at(warmup));
        }
        prop_assert!((at(4 * warmup) - peak / 2.0).abs() <= 1e-12 * peak);
    }

    #[test]
    fn kv_round_trip(pairs in prop::collection::btree_map("[a-z][a-z0-9_.]{0,8}", "[ -~]{0,12}", 0..6)) {
        let mut kv = KvMap::new();
        for (k, v) in &pairs {
            kv.set(k, v.trim());
        }
        let back = KvMap::parse(&kv.to_string(), Path::new("mem")).unwrap();
        for (k, v) in &pairs {
            prop_assert_eq!(back.get_str(k), Some(v.trim()));
        }
    }
}
