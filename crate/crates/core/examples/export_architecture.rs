//! Discretize the logits stored in a checkpoint into `arch.json` and read
//! it back.
use revdarts::harness::{generate_dataset, DataSpec};
use revdarts::search::{export_architecture, run_search, Architecture, Dims, ModelOptions, SearchConfig, Seq2Seq};

fn main() -> revdarts::Result<()> {
    let seed = 8;
    let out = std::env::temp_dir().join("revdarts_export_architecture");
    let mut net = Seq2Seq::<f32>::supernet(&Dims::default(), &ModelOptions::default(), seed)?;
    let data = generate_dataset(&DataSpec::default(), seed)?;
    let cfg = SearchConfig {
        budget: 4,
        checkpoint_interval: 2,
        ..Default::default()
    };
    let outcome = run_search(&mut net, &data, &cfg, seed, &out)?;
    let last = outcome.checkpoints.last().expect("at least the initial checkpoint");
    println!("checkpoints: {}", outcome.checkpoints.len());
    let arch_path = out.join("exported_arch.json");
    let arch = export_architecture(last, &arch_path)?;
    let back = Architecture::read(&arch_path)?;
    println!("round trip identical: {}", back == arch);
    print!("{}", std::fs::read_to_string(&arch_path).expect("just written"));
    Ok(())
}
