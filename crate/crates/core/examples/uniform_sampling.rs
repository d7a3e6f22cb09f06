//! The sampling baseline: one uniformly drawn path per step trains the
//! shared weights, and the best of a pool of paths is kept at the end.
use revdarts::harness::{generate_dataset, DataSpec};
use revdarts::search::{
    path_kinds, run_search, sample_uniform_path, Dims, ModelOptions, SearchConfig, Seq2Seq, Strategy,
};
use revdarts::tensor::RngStream;

fn main() -> revdarts::Result<()> {
    let seed = 4;
    let dims = Dims::default();
    let mut net = Seq2Seq::<f32>::supernet(&dims, &ModelOptions::default(), seed)?;
    let mut rng = RngStream::new(seed);
    for _ in 0..3 {
        let path = sample_uniform_path(&net, &mut rng);
        let tags: Vec<&str> = path_kinds(&net, &path).iter().map(|k| k.tag()).collect();
        println!("sampled path: {}", tags.join(" "));
    }

    let alpha_before: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    let data = generate_dataset(&DataSpec::default(), seed)?;
    let cfg = SearchConfig {
        budget: 30,
        checkpoint_interval: 30,
        log_interval: 10,
        strategy: Strategy::UniformSampling,
        candidate_pool: 8,
        ranking_batches: 2,
        ..Default::default()
    };
    let out = std::env::temp_dir().join("revdarts_uniform_sampling");
    let outcome = run_search(&mut net, &data, &cfg, seed, &out)?;
    for m in &outcome.metrics {
        println!("step {:>3} train {:.4} val {:.4}", m.step, m.train_loss, m.val_loss);
    }
    let unchanged = (0..net.alphas.len()).all(|i| net.alpha_values(i) == alpha_before[i]);
    println!("architecture logits untouched: {unchanged}");
    print!("{}", outcome.architecture.to_json());
    Ok(())
}
