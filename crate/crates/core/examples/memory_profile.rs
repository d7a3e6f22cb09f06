//! Retained activation bytes of the reversible and standard backbones over a
//! small width and depth sweep. Prints the CSV and the per-point ratios.
use revdarts::profiler::{profile_memory, MemProfileConfig};
use revdarts::search::ModelOptions;

fn main() -> revdarts::Result<()> {
    let cfg = MemProfileConfig {
        d_values: vec![64, 96],
        depths: vec![1, 2, 4, 8],
        ..Default::default()
    };
    let summary = profile_memory::<f32>(&cfg, &ModelOptions::default(), 3)?;
    print!("{}", summary.to_csv());
    for p in &summary.ratios {
        match p.ratio {
            Some(r) => println!("d={} depth={} reversible/standard = {r:.3}", p.d, p.depth),
            None => println!("d={} depth={} cap exceeded", p.d, p.depth),
        }
    }
    Ok(())
}
