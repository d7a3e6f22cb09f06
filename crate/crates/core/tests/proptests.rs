use proptest::prelude::*;

use revdarts::harness::data::{BOS, EOS, PAD};
use revdarts::harness::{Batch, Example};
use revdarts::ops::{OpKind, Side};
use revdarts::reversible::oracle::random_op_stack;
use revdarts::reversible::{ForwardOptions, LayerContext};
use revdarts::search::{argmax_lowest, search_space_size, InverseSqrt, Pooling};
use revdarts::tensor::{ParamStore, RngStream, Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stack_inverse_recovers_input(
        depth in 1usize..4,
        n in 2usize..5,
        seed in any::<u64>(),
        pooling in prop_oneof![Just(Pooling::Max), Just(Pooling::Avg)],
    ) {
        let kinds = OpKind::candidates(Side::Decoder);
        let net = random_op_stack::<f64>(Side::Decoder, depth, n, 8, 8, &kinds, pooling, seed).unwrap();
        let mut rng = RngStream::substream(seed, 3);
        let x = Tensor::<f64>::randn(vec![2, 4, 8 * n], 1.0, &mut rng);
        let memory = Tensor::<f64>::randn(vec![2, 3, 8], 1.0, &mut rng);
        let ctx = LayerContext { memory: Some(&memory), ops: net.ops_context() };
        let mut h = x.clone();
        for (layer, log) in net.stack.layers().iter().zip(&net.logs) {
            h = layer.forward(&net.params, &h, &ctx, log).unwrap();
        }
        let state = net.stack.forward(&net.params, x.clone(), &ctx, net.logs.clone(), ForwardOptions::unguarded()).unwrap();
        prop_assert_eq!(state.output(), &h);
        for (layer, log) in net.stack.layers().iter().zip(&net.logs).rev() {
            h = layer.inverse(&net.params, &h, &ctx, log).unwrap();
        }
        prop_assert!(x.max_abs_diff(&h) <= 1e-10);
    }

    #[test]
    fn argmax_ignores_positive_affine_maps(
        v in prop::collection::vec(-5.0f64..5.0, 1..16),
        c in 0.01f64..50.0,
        b in -100.0f64..100.0,
    ) {
        let moved: Vec<f64> = v.iter().map(|x| c * x + b).collect();
        let i = argmax_lowest(&v);
        prop_assert_eq!(i, argmax_lowest(&moved));
        prop_assert!(v.iter().all(|&x| x <= v[i]));
        prop_assert!(v[..i].iter().all(|&x| x < v[i]));
    }

    #[test]
    fn space_size_is_the_mixed_product(
        a in 1u64..20, b in 1u64..20, m in 1u32..4, n in 1u32..4, s in 1u32..3,
    ) {
        let want = (a as u128).pow(s * m) * (b as u128).pow(s * n);
        prop_assert_eq!(search_space_size(a, b, m, n, s).to_string(), want.to_string());
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::no_grad(&store);
        let x = tape.leaf(Tensor::new(vec![3, 4], data).unwrap(), false).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn schedule_never_exceeds_peak(peak in 1e-5f64..1e-2, warmup in 1u64..500, step in 1u64..10_000) {
        let s = InverseSqrt { peak, warmup };
        let lr = s.lr(step);
        prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
    }

    #[test]
    fn batches_shift_targets_right(
        lens in prop::collection::vec((1usize..8, 1usize..8), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed);
        let examples: Vec<Example> = lens
            .iter()
            .map(|&(ls, lt)| {
                let src = (0..ls).map(|_| 4 + rng.below(10)).collect();
                let mut tgt: Vec<usize> = (0..lt).map(|_| 4 + rng.below(10)).collect();
                tgt.push(EOS);
                Example { src, tgt }
            })
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let b = Batch::from_examples(&refs);
        for (i, e) in examples.iter().enumerate() {
            let out = &b.tgt_out[i * b.tgt_len..(i + 1) * b.tgt_len];
            let inp = &b.tgt_in[i * b.tgt_len..(i + 1) * b.tgt_len];
            prop_assert_eq!(&out[..e.tgt.len()], e.tgt.as_slice());
            prop_assert!(out[e.tgt.len()..].iter().all(|&t| t == PAD));
            prop_assert_eq!(inp[0], BOS);
            prop_assert_eq!(&inp[1..e.tgt.len()], &e.tgt[..e.tgt.len() - 1]);
            let mask = &b.src_mask[i * b.src_len..(i + 1) * b.src_len];
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), e.src.len());
        }
        prop_assert_eq!(b.target_tokens(), examples.iter().map(|e| e.tgt.len()).sum::<usize>());
    }

    #[test]
    fn substreams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = RngStream::substream(seed, stream);
        let mut b = RngStream::substream(seed, stream);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        prop_assert_eq!(xs, ys);
    }
}
