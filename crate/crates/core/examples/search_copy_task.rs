//! Bilevel search on the copy task followed by retraining the derived
//! architecture. `cargo run --release --example search_copy_task -- [steps] [retrain_steps]`
use std::time::Instant;

use revdarts::harness::{evaluate, generate_dataset, train_derived, DataSpec, ShardKind, TrainConfig};
use revdarts::search::{run_search, Dims, ModelOptions, SearchConfig, Seq2Seq};

fn main() -> revdarts::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("step count"));
    let steps = args.next().unwrap_or(200);
    let retrain = args.next().unwrap_or(500);
    let seed = 7;
    let dims = Dims::default();
    let opts = ModelOptions::default();
    let data = generate_dataset(&DataSpec::default(), seed)?;
    let out = std::env::temp_dir().join("revdarts_search_copy_task");

    let cfg = SearchConfig {
        budget: steps,
        checkpoint_interval: steps.max(1),
        log_interval: (steps / 10).max(1),
        ..Default::default()
    };
    let mut net = Seq2Seq::<f32>::supernet(&dims, &opts, seed)?;
    let entropy = |net: &Seq2Seq<f32>| -> Vec<f64> {
        (0..net.alphas.len())
            .map(|i| {
                let a = net.alpha_values(i);
                let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = a.iter().map(|x| (x - m).exp()).sum();
                -a.iter().map(|x| (x - m).exp() / z).map(|p| p * p.ln()).sum::<f64>()
            })
            .collect()
    };
    let before = entropy(&net);
    let t = Instant::now();
    let outcome = run_search(&mut net, &data, &cfg, seed, &out)?;
    println!("search: {steps} steps in {:.1}s", t.elapsed().as_secs_f64());
    for m in &outcome.metrics {
        println!("  step {:>5} train {:.4} val {:.4}", m.step, m.train_loss, m.val_loss);
    }
    println!(
        "alpha entropy before {before:.6?}\n              after  {:.6?}",
        entropy(&net)
    );
    println!("derived architecture:\n{}", outcome.architecture.to_json());

    let tcfg = TrainConfig {
        budget: retrain,
        log_interval: (retrain / 10).max(1),
        ..Default::default()
    };
    let t = Instant::now();
    let trained = train_derived::<f32>(&outcome.architecture, &data, &dims, &opts, &tcfg, seed, None)?;
    println!("retrain: {retrain} steps in {:.1}s", t.elapsed().as_secs_f64());
    for m in &trained.metrics {
        println!(
            "  step {:>5} loss {:.4} acc {:.4}",
            m.step, m.train_loss, m.token_accuracy
        );
    }
    let shard = &data.shard(ShardKind::Test)[..200];
    let report = evaluate(&trained.model, shard, 32)?;
    println!("test: {report:?}");
    Ok(())
}
