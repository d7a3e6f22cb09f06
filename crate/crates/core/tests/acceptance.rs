//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when all
//! criteria pass. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::rc::Rc;
use std::time::{Duration, Instant};

use revdarts::harness::{evaluate, generate_dataset, train_derived, DataSpec, ShardKind, TrainConfig};
use revdarts::ops::{OpContext, OpKind, Side};
use revdarts::profiler::{ledger, profile_memory, Backbone, MemProfileConfig};
use revdarts::reversible::oracle::{linear_example, random_op_stack, stack_gradient_check, SMOOTH_KINDS};
use revdarts::reversible::LayerContext;
use revdarts::search::node::{build_search_node, new_alpha};
use revdarts::search::{
    checkpoint_dir, run_search, sample_uniform_path, search_space_size, ArchDims, Architecture, Dims, Mode,
    ModelOptions, Pooling, Provenance, SearchConfig, Seq2Seq, Strategy,
};
use revdarts::tensor::{rel_err, ParamStore, RngStream, Scalar, Tape, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: revdarts::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 ------------------------------------------------------------------------

fn roundtrip_errors<T: Scalar>(n: usize, layers: usize, seed: u64) -> Result<f64, String> {
    let kinds = OpKind::candidates(Side::Decoder);
    let mut worst: f64 = 0.0;
    for i in 0..layers {
        let s = seed + 1000 * n as u64 + i as u64;
        let net = lib(random_op_stack::<T>(
            Side::Decoder,
            1,
            n,
            8,
            16,
            &kinds,
            Pooling::Max,
            s,
        ))?;
        let mut rng = RngStream::substream(s, 9);
        let x = Tensor::<T>::randn(vec![2, 6, 8 * n], 1.0, &mut rng);
        let memory = Tensor::<T>::randn(vec![2, 5, 16], 1.0, &mut rng);
        let ctx = LayerContext {
            memory: Some(&memory),
            ops: OpContext {
                dropout: 0.1,
                train: true,
                ..Default::default()
            },
        };
        let layer = &net.stack.layers()[0];
        let y = lib(layer.forward(&net.params, &x, &ctx, &net.logs[0]))?;
        let back = lib(layer.inverse(&net.params, &y, &ctx, &net.logs[0]))?;
        worst = worst.max(x.max_abs_diff(&back));
    }
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    for n in 2..=5 {
        let e64 = roundtrip_errors::<f64>(n, 20, 1)?;
        let e32 = roundtrip_errors::<f32>(n, 20, 2)?;
        ensure(e64 <= 1e-10, || {
            format!("n={n}: f64 reconstruction error {e64:e} > 1e-10")
        })?;
        ensure(e32 <= 1e-4, || {
            format!("n={n}: f32 reconstruction error {e32:e} > 1e-4")
        })?;
        report.push(format!("n={n} f64 {e64:.1e} f32 {e32:.1e}"));
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("{} in {:.1}s", report.join(", "), took.as_secs_f64()))
}

// 2 ------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let dx = lib(linear_example())?;
    ensure(dx.data() == [0.0, 1.0], || {
        format!("linear example dX = {:?}", dx.data())
    })?;
    let (mut oracle, mut fd): (f64, f64) = (0.0, 0.0);
    for depth in [1, 2, 4] {
        for n in [2, 3] {
            let c = lib(stack_gradient_check(
                depth,
                n,
                40 + depth as u64 * 3 + n as u64,
                1e-5,
                48,
            ))?;
            for r in c.results(1e-8, 1e-5) {
                ensure(r.passed, || format!("{}: {:e}", r.name, r.max_rel_err))?;
            }
            oracle = oracle.max(c.oracle_dx).max(c.oracle_params);
            fd = fd.max(c.fd_dx).max(c.fd_params);
        }
    }
    Ok(format!(
        "linear dX = (0, 1); max rel err vs stored activations {oracle:.1e}, vs finite differences {fd:.1e}"
    ))
}

// 3 ------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut lines = Vec::new();
    for (depth, n) in [(1, 2), (3, 3), (4, 5)] {
        let net = lib(random_op_stack::<f64>(
            Side::Encoder,
            depth,
            n,
            8,
            8,
            &SMOOTH_KINDS,
            Pooling::Max,
            7,
        ))?;
        let mut rng = RngStream::new(3);
        let x = Tensor::randn(vec![1, 5, 8 * n], 1.0, &mut rng);
        let w = Tensor::randn(vec![1, 5, 8 * n], 1.0, &mut rng);
        let rev = lib(net.reconstruction_grads(&x, &w, None))?;
        let oracle = lib(net.stored_activation_grads(&x, &w, None))?;
        let g = (depth * n) as u64;
        ensure(oracle.forward_evals == g && oracle.recompute_evals == 0, || {
            format!(
                "oracle made {} + {} evaluations",
                oracle.forward_evals, oracle.recompute_evals
            )
        })?;
        ensure(rev.forward_evals == g && rev.recompute_evals == g, || {
            format!(
                "reconstruction made {} + {} evaluations for {g} G functions",
                rev.forward_evals, rev.recompute_evals
            )
        })?;
        lines.push(format!(
            "{g} G: {}+{} vs {}",
            rev.forward_evals, rev.recompute_evals, oracle.forward_evals
        ));
    }

    // Whole supernet: one recompute per split of every encoder and decoder layer.
    let dims = Dims {
        blocks: 2,
        ..Dims::default()
    };
    let net = lib(Seq2Seq::<f32>::supernet(&dims, &ModelOptions::default(), 5))?;
    let data = lib(generate_dataset(&DataSpec::default(), 5))?;
    let mut rng = RngStream::new(2);
    let batch = data.sample_batch(ShardKind::ThetaTrain, 2, &mut rng);
    let logs = net.draw_logs(&mut rng);
    ledger::reset();
    let mut grads = revdarts::tensor::Gradients::new();
    lib(net.loss_reversible(&batch, logs, &Mode::train(), Some(&mut grads)))?;
    let snap = ledger::snapshot();
    let g = (dims.layers() * (dims.m + dims.n + 1)) as u64;
    ensure(snap.forward_evals == g && snap.recompute_forward_count == g, || {
        format!(
            "supernet: {} forward, {} recompute, expected {g} each",
            snap.forward_evals, snap.recompute_forward_count
        )
    })?;
    lines.push(format!("supernet {g} G: {g}+{g}"));
    Ok(lines.join(", "))
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let cfg = MemProfileConfig {
        d_values: vec![96],
        depths: vec![1, 2, 4, 8],
        ..Default::default()
    };
    let summary = lib(profile_memory::<f32>(&cfg, &ModelOptions::default(), 11))?;
    let rev: Vec<usize> = cfg
        .depths
        .iter()
        .map(|&l| summary.row(96, l, Backbone::Reversible).unwrap().retained_bytes)
        .collect();
    let std: Vec<usize> = cfg
        .depths
        .iter()
        .map(|&l| summary.row(96, l, Backbone::Standard).unwrap().retained_bytes)
        .collect();
    ensure(rev.iter().all(|&b| b == rev[0]), || {
        format!("reversible bytes vary with depth: {rev:?}")
    })?;
    ensure(std.windows(2).all(|w| w[0] < w[1]), || {
        format!("standard bytes not increasing: {std:?}")
    })?;
    let ratio = rev[2] as f64 / std[2] as f64;
    ensure(ratio <= 0.55, || format!("depth-4 ratio {ratio:.3} > 0.55"))?;
    Ok(format!(
        "reversible {} B at every depth; standard {std:?} B; depth-4 ratio {ratio:.4}",
        rev[0]
    ))
}

// 5 ------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    for side in [Side::Encoder, Side::Decoder] {
        let mut rng = RngStream::new(31);
        let mut store = ParamStore::<f64>::new();
        let alpha = new_alpha(&mut store, "alpha".into(), side, &mut rng);
        let node = lib(build_search_node(
            side,
            0,
            alpha,
            Pooling::Max,
            16,
            32,
            &mut store,
            "n",
            &mut rng,
        ))?;
        let h = Tensor::<f64>::randn(vec![2, 5, 16], 1.0, &mut rng);
        let memory = Tensor::<f64>::randn(vec![2, 4, 32], 1.0, &mut rng);
        let k = node.candidates().len();
        for pick in 0..k {
            let logits: Vec<f64> = (0..k).map(|i| if i == pick { 1e3 } else { 0.0 }).collect();
            *store.value_mut(alpha) = lib(Tensor::from_f64(vec![k], &logits))?;
            let mut tape = Tape::no_grad(&store);
            let hv = lib(tape.leaf(h.clone(), false))?;
            let mem = lib(tape.leaf(memory.clone(), false))?;
            let ctx = OpContext {
                memory: Some(mem),
                self_mask: Some(Rc::from(vec![
                    true, true, true, true, false, true, true, true, true, true,
                ])),
                memory_mask: Some(Rc::from(vec![true; 8])),
                ..Default::default()
            };
            let mixed = lib(node.mixed_forward(&mut tape, hv, &ctx, &mut RngStream::new(0)))?;
            let single = lib(node.ops[pick].apply(&mut tape, hv, &ctx, &mut RngStream::new(0)))?;
            let e = rel_err(tape.value(mixed), tape.value(single));
            ensure(e <= 1e-12, || {
                format!("{side:?} {}: rel err {e:e}", node.candidates()[pick])
            })?;
            worst = worst.max(e);
        }
    }

    let dims = ArchDims {
        d: 96,
        e: 32,
        m: 2,
        n: 3,
        s: 1,
    };
    let mut rng = RngStream::new(77);
    for trial in 0..200 {
        let alphas: Vec<Vec<f64>> = (0..5)
            .map(|slot| {
                let k = if slot < 2 { 13 } else { 14 };
                (0..k).map(|_| rng.normal()).collect()
            })
            .collect();
        let base = lib(Architecture::from_alphas(dims, &alphas, Provenance::default()))?;
        let c = 0.01 + 10.0 * rng.uniform();
        let shift = 20.0 * (rng.uniform() - 0.5);
        let moved: Vec<Vec<f64>> = alphas
            .iter()
            .map(|a| a.iter().map(|v| c * v + shift).collect())
            .collect();
        let other = lib(Architecture::from_alphas(dims, &moved, Provenance::default()))?;
        ensure(base == other, || {
            format!("trial {trial}: discretization changed under c={c}, shift={shift}")
        })?;
    }

    let mut tied: Vec<Vec<f64>> = vec![
        vec![0.0; 13],
        vec![0.0; 13],
        vec![0.0; 14],
        vec![0.0; 14],
        vec![0.0; 14],
    ];
    tied[1][4] = 1.0;
    tied[1][9] = 1.0;
    tied[3][12] = -1.0;
    let arch = lib(Architecture::from_alphas(dims, &tied, Provenance::default()))?;
    ensure(arch.encoder[0] == [OpKind::StdConv3, OpKind::DynConv3], || {
        format!("encoder ties: {:?}", arch.encoder)
    })?;
    ensure(
        arch.decoder.searched[0] == [OpKind::StdConv3, OpKind::StdConv3, OpKind::StdConv3],
        || format!("decoder ties: {:?}", arch.decoder.searched),
    )?;
    Ok(format!(
        "one-hot mixed vs single max rel err {worst:.1e}; 200 scale/shift trials stable; ties go to the lowest tag"
    ))
}

// 6 ------------------------------------------------------------------------

fn entropy(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = a.iter().map(|v| (v - m).exp()).sum();
    a.iter()
        .map(|v| (v - m).exp() / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn criterion_6() -> Outcome {
    let seed = 7;
    let dims = Dims::default();
    let opts = ModelOptions::default();
    ensure(
        dims.m == 2 && dims.n == 3 && dims.s == 1 && dims.blocks == 1 && dims.d == 96,
        || format!("unexpected desk dims {dims:?}"),
    )?;
    let data = lib(generate_dataset(&DataSpec::default(), seed))?;
    let cfg = SearchConfig {
        budget: 2000,
        checkpoint_interval: 1000,
        log_interval: 100,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut net = lib(Seq2Seq::<f32>::supernet(&dims, &opts, seed))?;
    let before: Vec<f64> = (0..net.alphas.len()).map(|i| entropy(&net.alpha_values(i))).collect();
    let start = Instant::now();
    let outcome = lib(run_search(&mut net, &data, &cfg, seed, dir.path()))?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(30 * 60), || format!("search took {took:?}"))?;
    let after: Vec<f64> = (0..net.alphas.len()).map(|i| entropy(&net.alpha_values(i))).collect();
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        ensure(a < b, || format!("node {i}: entropy {a} not below initial {b}"))?;
    }

    let tcfg = TrainConfig {
        budget: 5000,
        ..Default::default()
    };
    let trained = lib(train_derived::<f32>(
        &outcome.architecture,
        &data,
        &dims,
        &opts,
        &tcfg,
        seed,
        None,
    ))?;
    ensure(trained.aborted_at.is_none(), || {
        format!("retraining aborted at {:?}", trained.aborted_at)
    })?;
    let test = data.shard(ShardKind::Test);
    let test = &test[..test.len().min(500)];
    let report = lib(evaluate(&trained.model, test, 50))?;
    ensure(report.token_accuracy >= 0.99, || {
        format!("retrained token accuracy {:.4} < 0.99", report.token_accuracy)
    })?;
    let drop: Vec<String> = before
        .iter()
        .zip(&after)
        .map(|(b, a)| format!("{:.2e}", b - a))
        .collect();
    Ok(format!(
        "2000 steps in {:.0}s; retrained token accuracy {:.4} (sequence {:.4}); entropy drops [{}]",
        took.as_secs_f64(),
        report.token_accuracy,
        report.sequence_accuracy,
        drop.join(", ")
    ))
}

// 7 ------------------------------------------------------------------------

/// Schoolbook multiplication on little-endian decimal digits.
fn decimal_mul(a: &[u32], b: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + 3);
    let mut carry = 0u32;
    for &d in a {
        let v = d * b + carry;
        out.push(v % 10);
        carry = v / 10;
    }
    while carry > 0 {
        out.push(carry % 10);
        carry /= 10;
    }
    out
}

fn decimal_power_product(factors: &[(u32, u32)]) -> String {
    let mut digits = vec![1u32];
    for &(base, exp) in factors {
        for _ in 0..exp {
            digits = decimal_mul(&digits, base);
        }
    }
    digits.iter().rev().map(|d| char::from_digit(*d, 10).unwrap()).collect()
}

/// Figure quoted alongside the expression 13^4 · 14^6 in the acceptance list.
/// It is not that product, so it is reported rather than asserted.
const QUOTED_MIXED_COUNT: &str = "214919225344";

fn criterion_7() -> Outcome {
    let a = search_space_size(13, 13, 2, 3, 1).to_string();
    let b = search_space_size(13, 14, 2, 3, 2).to_string();
    let oracle_a = decimal_power_product(&[(13, 5)]);
    let oracle_b = decimal_power_product(&[(13, 4), (14, 6)]);
    ensure(a == "371293" && oracle_a == "371293", || {
        format!("13^5: library {a}, oracle {oracle_a}")
    })?;
    ensure(b == oracle_b, || format!("13^4 * 14^6: library {b}, oracle {oracle_b}"))?;
    let note = if b == QUOTED_MIXED_COUNT {
        String::new()
    } else {
        format!(" (the quoted {QUOTED_MIXED_COUNT} is not 13^4 * 14^6)")
    };
    Ok(format!("{a} and {b}, matching schoolbook decimal products{note}"))
}

// 8 ------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let seed = 19;
    let dims = Dims::default();
    let mut net = lib(Seq2Seq::<f32>::supernet(&dims, &ModelOptions::default(), seed))?;
    let slots = net.slot_candidates();
    let mut counts: Vec<Vec<u64>> = slots.iter().map(|c| vec![0; c.len()]).collect();
    let mut rng = RngStream::new(seed);
    let draws = 10_000;
    for _ in 0..draws {
        let path = sample_uniform_path(&net, &mut rng);
        for (slot, &i) in path.iter().enumerate() {
            counts[slot][i] += 1;
        }
    }
    let mut p_min: f64 = 1.0;
    for (slot, c) in counts.iter().enumerate() {
        let k = c.len() as f64;
        let expected = draws as f64 / k;
        let stat: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new(k - 1.0).map_err(|e| e.to_string())?;
        let p = 1.0 - dist.cdf(stat);
        ensure(p > 0.01, || format!("slot {slot}: chi-square {stat:.2}, p = {p:.4}"))?;
        p_min = p_min.min(p);
    }

    let before: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    let data = lib(generate_dataset(&DataSpec::default(), seed))?;
    let cfg = SearchConfig {
        budget: 40,
        checkpoint_interval: 20,
        log_interval: 10,
        strategy: Strategy::UniformSampling,
        candidate_pool: 6,
        ranking_batches: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = lib(run_search(&mut net, &data, &cfg, seed, dir.path()))?;
    let after: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    ensure(before == after, || "architecture logits changed during sampling".into())?;
    ensure(dir.path().join("arch.json").exists(), || "no arch.json written".into())?;
    ensure(outcome.metrics.iter().all(|m| m.train_loss.is_finite()), || {
        "non-finite loss".into()
    })?;
    Ok(format!(
        "min chi-square p = {p_min:.3} over {} nodes; 40 sampled-path steps, logits untouched",
        counts.len()
    ))
}

// 9 ------------------------------------------------------------------------

fn search_once(dir: &std::path::Path) -> Result<(), String> {
    let seed = 23;
    let data = lib(generate_dataset(&DataSpec::default(), seed))?;
    let mut net = lib(Seq2Seq::<f32>::supernet(
        &Dims::default(),
        &ModelOptions::default(),
        seed,
    ))?;
    let cfg = SearchConfig {
        budget: 24,
        checkpoint_interval: 8,
        ..Default::default()
    };
    lib(run_search(&mut net, &data, &cfg, seed, dir))?;
    Ok(())
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    search_once(a.path())?;
    search_once(b.path())?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let mut files = vec!["metrics.jsonl".to_string()];
    for step in [0, 8, 16, 24] {
        let rel = checkpoint_dir(std::path::Path::new(""), step).join("alpha.json");
        files.push(rel.to_string_lossy().into_owned());
    }
    for f in &files {
        let (x, y) = (read(a.path().join(f))?, read(b.path().join(f))?);
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("reversibility roundtrip", criterion_1),
        ("gradient equivalence", criterion_2),
        ("recompute accounting", criterion_3),
        ("memory claim", criterion_4),
        ("mixed op and discretization", criterion_5),
        ("search dynamics", criterion_6),
        ("search-space arithmetic", criterion_7),
        ("uniform-sampling baseline", criterion_8),
        ("determinism", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
