use std::collections::HashSet;

use revdarts::harness::data::EOS;
use revdarts::harness::{
    evaluate, generate_dataset, greedy_decode, max_output_len, select_checkpoint, train_derived, DataSpec, ShardKind,
    ShardSizes, Task, TrainConfig,
};
use revdarts::search::{run_search, ArchDims, Architecture, Dims, ModelOptions, Provenance, SearchConfig, Seq2Seq};

fn small_spec() -> DataSpec {
    DataSpec {
        vocab: 16,
        min_len: 2,
        max_len: 6,
        shards: ShardSizes {
            theta_train: 300,
            alpha_val: 100,
            retrain_train: 300,
            retrain_val: 60,
            test: 60,
        },
        ..Default::default()
    }
}

fn small_dims() -> Dims {
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

fn small_arch() -> Architecture {
    // self_attn + glu in the encoder; self_attn + cross_attn in the decoder.
    let d = small_dims();
    let dims = ArchDims {
        d: d.d,
        e: d.e,
        m: d.m,
        n: d.n,
        s: d.s,
    };
    Architecture::from_slot_choices(dims, &[8, 9, 8, 9], Provenance::default()).unwrap()
}

#[test]
fn shards_are_disjoint_and_reproducible() {
    let a = generate_dataset(&small_spec(), 11).unwrap();
    let b = generate_dataset(&small_spec(), 11).unwrap();
    let c = generate_dataset(&small_spec(), 12).unwrap();
    let mut seen = HashSet::new();
    for kind in ShardKind::ALL {
        assert_eq!(a.shard(kind), b.shard(kind));
        for e in a.shard(kind) {
            assert!(seen.insert(e.src.clone()), "{:?} appears twice", e.src);
            assert!((2..=6).contains(&e.src.len()));
            assert_eq!(e.tgt.last(), Some(&EOS));
            assert_eq!(&e.tgt[..e.tgt.len() - 1], e.src.as_slice());
        }
    }
    assert_ne!(a.shard(ShardKind::Test), c.shard(ShardKind::Test));
}

#[test]
fn reverse_task_reverses() {
    let spec = DataSpec {
        task: Task::Reverse,
        ..small_spec()
    };
    let data = generate_dataset(&spec, 2).unwrap();
    for e in data.shard(ShardKind::Test) {
        let mut r = e.src.clone();
        r.reverse();
        r.push(EOS);
        assert_eq!(e.tgt, r);
    }
}

#[test]
fn oversized_shards_are_rejected() {
    let spec = DataSpec {
        vocab: 6,
        min_len: 1,
        max_len: 2,
        ..small_spec()
    };
    assert!(generate_dataset(&spec, 1).is_err());
}

#[test]
fn output_length_cap() {
    assert_eq!(max_output_len(0), 10);
    assert_eq!(max_output_len(5), 16);
    assert_eq!(max_output_len(24), 38);
}

#[test]
fn decoding_respects_the_length_cap() {
    let net = Seq2Seq::<f32>::derived(&small_arch(), &small_dims(), &ModelOptions::default(), 1).unwrap();
    let sources: Vec<&[usize]> = vec![&[4, 5, 6], &[7, 8]];
    let out = greedy_decode(&net, &sources).unwrap();
    assert_eq!(out.len(), 2);
    for (src, pred) in sources.iter().zip(&out) {
        assert!(pred.len() <= max_output_len(src.len()));
        assert!(!pred.contains(&EOS));
    }
}

#[test]
fn short_retraining_lowers_the_loss_and_evaluates() {
    let data = generate_dataset(&small_spec(), 4).unwrap();
    let cfg = TrainConfig {
        budget: 150,
        batch_size: 16,
        log_interval: 10,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("train.jsonl");
    let out = train_derived::<f32>(
        &small_arch(),
        &data,
        &small_dims(),
        &ModelOptions::default(),
        &cfg,
        4,
        Some(&metrics),
    )
    .unwrap();
    assert!(out.aborted_at.is_none());
    let first = out.metrics.first().unwrap().train_loss;
    let last = out.metrics.last().unwrap().train_loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert!(std::fs::read_to_string(&metrics).unwrap().lines().count() >= 2);

    let report = evaluate(&out.model, data.shard(ShardKind::Test), 16).unwrap();
    for v in [report.token_accuracy, report.sequence_accuracy] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(report.sequence_accuracy <= report.token_accuracy);
    assert!(report.mean_loss.is_finite() && report.mean_loss > 0.0);
}

#[test]
fn evaluation_rejects_an_empty_shard() {
    let net = Seq2Seq::<f32>::derived(&small_arch(), &small_dims(), &ModelOptions::default(), 1).unwrap();
    assert!(evaluate(&net, &[], 8).is_err());
}

#[test]
fn selection_scores_every_checkpoint() {
    let data = generate_dataset(&small_spec(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut net = Seq2Seq::<f32>::supernet(&small_dims(), &ModelOptions::default(), 9).unwrap();
    let search = SearchConfig {
        budget: 4,
        checkpoint_interval: 2,
        batch_size: 4,
        ..Default::default()
    };
    let out = run_search(&mut net, &data, &search, 9, dir.path()).unwrap();
    let tune = TrainConfig {
        budget: 5,
        batch_size: 8,
        eval_examples: 20,
        ..Default::default()
    };
    let scratch = dir.path().join("candidates");
    let sel = select_checkpoint::<f32>(
        &out.checkpoints,
        &data,
        &small_dims(),
        &ModelOptions::default(),
        &tune,
        9,
        &scratch,
    )
    .unwrap();
    assert_eq!(sel.scores.len(), 3);
    let best = sel.best().val_loss;
    assert!(best.is_finite());
    assert!(sel.scores.iter().all(|s| s.val_loss >= best));
    assert!(sel.scores[..sel.best].iter().all(|s| s.val_loss > best));
    assert!(scratch.join("arch_002.json").exists());
    assert!(select_checkpoint::<f32>(&[], &data, &small_dims(), &ModelOptions::default(), &tune, 9, &scratch).is_err());
}
