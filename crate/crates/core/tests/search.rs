use revdarts::harness::{generate_dataset, DataSpec, ShardKind, ShardSizes, SyntheticDataset};
use revdarts::ops::OpKind;
use revdarts::search::{
    bilevel_step, checkpoint_dir, export_architecture, load_theta, run_search, save_theta, search_space_size,
    search_space_size_uniform, AlphaFile, ArchDims, Architecture, Dims, InverseSqrt, ModelOptions, Provenance,
    SearchConfig, Seq2Seq, Strategy, ARCH_VERSION,
};
use revdarts::tensor::{ParamGroup, RngStream, Tensor};
use revdarts::Error;

fn tiny_dims() -> Dims {
    Dims {
        vocab: 16,
        e: 8,
        d: 48,
        m: 2,
        n: 2,
        s: 1,
        blocks: 1,
        max_positions: 24,
    }
}

fn tiny_data(seed: u64) -> SyntheticDataset {
    let spec = DataSpec {
        vocab: 16,
        min_len: 2,
        max_len: 6,
        shards: ShardSizes {
            theta_train: 200,
            alpha_val: 100,
            retrain_train: 200,
            retrain_val: 50,
            test: 50,
        },
        ..Default::default()
    };
    generate_dataset(&spec, seed).unwrap()
}

fn tiny_arch_dims() -> ArchDims {
    let d = tiny_dims();
    ArchDims {
        d: d.d,
        e: d.e,
        m: d.m,
        n: d.n,
        s: d.s,
    }
}

fn bits(net: &Seq2Seq<f32>) -> Vec<Vec<u32>> {
    net.params
        .ids()
        .map(|id| net.params.value(id).data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn checkpoints_follow_the_interval() {
    let data = tiny_data(3);
    for (budget, interval) in [(7, 3), (6, 3), (4, 10), (0, 5)] {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Seq2Seq::<f32>::supernet(&tiny_dims(), &ModelOptions::default(), 3).unwrap();
        let cfg = SearchConfig {
            budget,
            checkpoint_interval: interval,
            batch_size: 4,
            ..Default::default()
        };
        let out = run_search(&mut net, &data, &cfg, 3, dir.path()).unwrap();
        assert_eq!(out.checkpoints.len() as u64, budget / interval + 1);
        for step in (0..=budget).step_by(interval as usize) {
            let c = checkpoint_dir(dir.path(), step);
            for f in ["theta.bin", "theta.json", "alpha.json"] {
                assert!(c.join(f).exists(), "{}", c.join(f).display());
            }
        }
        let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count() as u64, budget);
        assert!(dir.path().join("arch.json").exists());
    }
}

#[test]
fn non_finite_step_rolls_back() {
    let data = tiny_data(5);
    let mut net = Seq2Seq::<f32>::supernet(&tiny_dims(), &ModelOptions::default(), 5).unwrap();
    let id = net.alphas[0];
    net.params.value_mut(id).data_mut()[0] = f32::INFINITY;
    let before = bits(&net);
    let cfg = SearchConfig::default();
    let mut opt = cfg.optimizer::<f32>();
    let mut rng = RngStream::new(1);
    let train = data.sample_batch(ShardKind::ThetaTrain, 4, &mut rng);
    let val = data.sample_batch(ShardKind::AlphaVal, 4, &mut rng);
    let r = bilevel_step(&mut net, &train, &val, &mut opt, Strategy::Darts, None, &mut rng).unwrap();
    assert!(r.rejected);
    assert_eq!(opt.rejected_steps, 1);
    assert_eq!(opt.theta.steps(), 0);
    assert_eq!(bits(&net), before);
}

#[test]
fn finite_step_moves_weights_and_logits() {
    let data = tiny_data(6);
    let mut net = Seq2Seq::<f32>::supernet(&tiny_dims(), &ModelOptions::default(), 6).unwrap();
    let theta_before: Vec<Tensor<f32>> = net
        .group_ids(ParamGroup::Theta)
        .iter()
        .map(|&i| net.params.value(i).clone())
        .collect();
    let alpha_before: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    let cfg = SearchConfig::default();
    let mut opt = cfg.optimizer::<f32>();
    let mut rng = RngStream::new(2);
    let train = data.sample_batch(ShardKind::ThetaTrain, 4, &mut rng);
    let val = data.sample_batch(ShardKind::AlphaVal, 4, &mut rng);
    let r = bilevel_step(&mut net, &train, &val, &mut opt, Strategy::Darts, None, &mut rng).unwrap();
    assert!(!r.rejected && r.train_loss.is_finite() && r.val_loss.is_finite());
    let theta_after: Vec<Tensor<f32>> = net
        .group_ids(ParamGroup::Theta)
        .iter()
        .map(|&i| net.params.value(i).clone())
        .collect();
    assert_ne!(theta_before, theta_after);
    for (i, a) in alpha_before.iter().enumerate() {
        assert_ne!(a, &net.alpha_values(i), "slot {i} logits did not move");
    }
}

#[test]
fn theta_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let a = Seq2Seq::<f64>::supernet(&tiny_dims(), &ModelOptions::default(), 1).unwrap();
    let mut b = Seq2Seq::<f64>::supernet(&tiny_dims(), &ModelOptions::default(), 2).unwrap();
    save_theta(&a.params, dir.path()).unwrap();
    load_theta(&mut b.params, dir.path()).unwrap();
    for id in a.group_ids(ParamGroup::Theta) {
        assert_eq!(a.params.value(id), b.params.value(id));
    }
    // Logits are not part of the weight dump.
    assert_ne!(a.alpha_values(0), b.alpha_values(0));

    let mut wrong = Seq2Seq::<f32>::supernet(&tiny_dims(), &ModelOptions::default(), 2).unwrap();
    let err = load_theta(&mut wrong.params, dir.path()).unwrap_err();
    assert!(err.to_string().contains("dtype"), "{err}");
}

#[test]
fn architecture_json_round_trips() {
    let arch = Architecture::from_slot_choices(tiny_arch_dims(), &[8, 11, 9, 4], Provenance::default()).unwrap();
    assert_eq!(arch.encoder, vec![vec![OpKind::SelfAttention, OpKind::Zero]]);
    assert_eq!(
        arch.decoder.searched,
        vec![vec![OpKind::CrossAttention, OpKind::DynConv3]]
    );
    assert_eq!(arch.decoder.fixed_last_split, OpKind::CrossAttention);
    let text = arch.to_json();
    assert!(text.contains("\"self_attn\""));
    assert_eq!(Architecture::from_json(&text).unwrap(), arch);
}

#[test]
fn architecture_json_rejects_bad_input() {
    let arch = Architecture::from_slot_choices(tiny_arch_dims(), &[0, 0, 0, 0], Provenance::default()).unwrap();
    let good = arch.to_json();

    let unknown = good.replacen("std_conv_3", "std_conv_9", 1);
    assert!(matches!(Architecture::from_json(&unknown), Err(Error::UnknownTag(t)) if t == "std_conv_9"));

    let version = good.replace(&format!("\"version\": {ARCH_VERSION}"), "\"version\": 99");
    assert!(matches!(
        Architecture::from_json(&version),
        Err(Error::Version { found: 99, .. })
    ));

    let cross_in_encoder = good.replacen("std_conv_3", "cross_attn", 1);
    let err = Architecture::from_json(&cross_in_encoder).unwrap_err();
    assert!(err.to_string().contains("encoder"), "{err}");

    let mut short = arch.clone();
    short.encoder[0].pop();
    assert!(Architecture::from_json(&short.to_json()).is_err());

    let mut fixed = arch;
    fixed.decoder.fixed_last_split = OpKind::Glu;
    assert!(Architecture::from_json(&fixed.to_json()).is_err());
}

#[test]
fn export_reads_one_hot_logits() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Seq2Seq::<f32>::supernet(&tiny_dims(), &ModelOptions::default(), 4).unwrap();
    let picks = [3, 12, 9, 13];
    for (slot, &p) in picks.iter().enumerate() {
        let id = net.alphas[slot];
        let k = net.params.value(id).numel();
        let v: Vec<f64> = (0..k).map(|i| if i == p { 5.0 } else { -1.0 }).collect();
        *net.params.value_mut(id) = Tensor::from_f64(vec![k], &v).unwrap();
    }
    let file = AlphaFile::from_net(&net, 10, 4, Strategy::Darts);
    let path = dir.path().join("alpha.json");
    std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    let arch = export_architecture(&path, &dir.path().join("arch.json")).unwrap();
    let want = Architecture::from_slot_choices(tiny_arch_dims(), &picks, Provenance::default()).unwrap();
    assert_eq!(arch.encoder, want.encoder);
    assert_eq!(arch.decoder, want.decoder);
    assert_eq!(arch.provenance.steps, Some(10));
    assert_eq!(Architecture::read(&dir.path().join("arch.json")).unwrap(), arch);
}

#[test]
fn search_space_counts() {
    assert_eq!(search_space_size_uniform(13, 2, 3, 1).to_string(), "371293");
    assert_eq!(search_space_size(2, 3, 1, 1, 1).to_string(), "6");
    assert_eq!(
        search_space_size(13, 14, 2, 3, 1).to_string(),
        (13u64.pow(2) * 14u64.pow(3)).to_string()
    );
    // 13^40 no longer fits in a u128.
    assert_eq!(
        search_space_size_uniform(13, 2, 3, 8).to_string(),
        "361188648084531445929920877641340156544317601"
    );
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = InverseSqrt { peak: 1e-3, warmup: 40 };
    let rates: Vec<f64> = (1..=200).map(|t| s.lr(t)).collect();
    assert!(rates[..40].windows(2).all(|w| w[0] < w[1]));
    assert!(rates[39..].windows(2).all(|w| w[0] > w[1]));
    assert!((rates[39] - 1e-3).abs() < 1e-15);
    assert!((s.lr(160) - 5e-4).abs() < 1e-15);
}

#[test]
fn uniform_sampling_leaves_logits_alone() {
    let data = tiny_data(8);
    let dir = tempfile::tempdir().unwrap();
    let mut net = Seq2Seq::<f32>::supernet(&tiny_dims(), &ModelOptions::default(), 8).unwrap();
    let before = bits(&net);
    let alpha_before: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    let cfg = SearchConfig {
        budget: 5,
        batch_size: 4,
        strategy: Strategy::UniformSampling,
        candidate_pool: 3,
        ranking_batches: 1,
        ..Default::default()
    };
    run_search(&mut net, &data, &cfg, 8, dir.path()).unwrap();
    let alpha_after: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    assert_eq!(alpha_before, alpha_after);
    assert_ne!(before, bits(&net));
}
