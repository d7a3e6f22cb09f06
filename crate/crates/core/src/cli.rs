//! Command-line entry point shared by the `revdarts` binary and tests.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use serde_json::json;

use crate::config::{Mode, RunConfig};
use crate::harness::{evaluate, generate_dataset, select_checkpoint, train_derived, ShardKind, TrainConfig};
use crate::profiler::profile_memory;
use crate::reversible::oracle::{linear_example, stack_gradient_check};
use crate::search::{export_architecture, load_theta, run_search, save_theta, Architecture, Seq2Seq};
use crate::tensor::gradcheck::primitive_suite;
use crate::tensor::{CheckResult, DType, Scalar};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "revdarts",
    version,
    about = "Reversible DARTS search, retraining and profiling"
)]
pub struct Cli {
    #[arg(value_enum)]
    pub mode: Mode,
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "f32|f64")]
    pub dtype: Option<DType>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `search.budget=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

/// Resolves the effective configuration: file, then `--set`, then the
/// top-level flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.dtype {
        cfg.dtype = d;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    cfg.validate(cli.mode)?;
    Ok(cfg)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Runs one mode and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match resolve_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let out = cfg.paths.out.clone();
    let prepared = fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).and_then(|_| {
        let p = out.join("config.json");
        fs::write(&p, cfg.to_json()).map_err(|e| Error::io(&p, e))
    });
    if let Err(e) = prepared {
        eprintln!("error: {e}");
        return EXIT_FAILURE;
    }
    let result = match cfg.dtype {
        DType::F32 => dispatch::<f32>(cli.mode, &cfg, &out),
        DType::F64 => dispatch::<f64>(cli.mode, &cfg, &out),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            let report = json!({ "mode": cli.mode.as_str(), "error": e.to_string() });
            if let Err(w) = write_json(&out.join("error.json"), &report) {
                eprintln!("error: could not write error.json: {w}");
            }
            EXIT_FAILURE
        }
    }
}

/// `Ok(false)` means the mode ran but reported failing checks.
fn dispatch<T: Scalar>(mode: Mode, cfg: &RunConfig, out: &Path) -> Result<bool> {
    match mode {
        Mode::Search => search::<T>(cfg, out),
        Mode::Derive => derive::<T>(cfg, out),
        Mode::Train => train::<T>(cfg, out),
        Mode::Eval => eval::<T>(cfg, out),
        Mode::Gradcheck => gradcheck(cfg, out),
        Mode::Memprofile => {
            let summary = profile_memory::<T>(&cfg.memprofile, &cfg.model.options(), cfg.seed)?;
            summary.write(out)?;
            print!("{}", summary.to_csv());
            Ok(true)
        }
    }
}

fn print_arch(arch: &Architecture) {
    for (j, row) in arch.encoder.iter().enumerate() {
        let tags: Vec<&str> = row.iter().map(|k| k.tag()).collect();
        println!("encoder layer {j}: {}", tags.join(" "));
    }
    for (j, row) in arch.decoder.searched.iter().enumerate() {
        let tags: Vec<&str> = row.iter().map(|k| k.tag()).collect();
        println!(
            "decoder layer {j}: {} | {}",
            tags.join(" "),
            arch.decoder.fixed_last_split.tag()
        );
    }
    for l in arch.degenerate_layers() {
        println!("warning: {l} has only zero ops and acts as an identity");
    }
}

/// Step directories under `run/checkpoints`, in step order.
fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let root = run.join("checkpoints");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("alpha.json").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn derive<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let checkpoint = cfg.paths.checkpoint.as_ref().expect("validated");
    if !checkpoint.join("checkpoints").is_dir() {
        let arch = export_architecture(checkpoint, &out.join("arch.json"))?;
        print_arch(&arch);
        return Ok(true);
    }
    let candidates = run_checkpoints(checkpoint)?;
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    let tune = TrainConfig {
        budget: cfg.select.finetune_steps,
        eval_examples: cfg.select.eval_examples,
        ..cfg.train.clone()
    };
    let selection = select_checkpoint::<T>(
        &candidates,
        &data,
        &cfg.model.dims,
        &cfg.model.options(),
        &tune,
        cfg.seed,
        &out.join("candidates"),
    )?;
    for s in &selection.scores {
        println!("{}: val loss {:.4}", s.checkpoint.display(), s.val_loss);
    }
    write_json(&out.join("selection.json"), &selection)?;
    let best = selection.best();
    println!("selected {}", best.checkpoint.display());
    best.architecture.write(&out.join("arch.json"))?;
    print_arch(&best.architecture);
    Ok(true)
}

fn search<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    let mut net = Seq2Seq::<T>::supernet(&cfg.model.dims, &cfg.model.options(), cfg.seed)?;
    let outcome = run_search(&mut net, &data, &cfg.search, cfg.seed, out)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "search: {} steps, train loss {:.4}, val loss {:.4}, {} rejected",
            last.step, last.train_loss, last.val_loss, outcome.rejected_steps
        );
    }
    print_arch(&outcome.architecture);
    Ok(true)
}

fn train<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let arch = Architecture::read(cfg.paths.arch.as_ref().expect("validated"))?;
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    let trained = train_derived::<T>(
        &arch,
        &data,
        &cfg.model.dims,
        &cfg.model.options(),
        &cfg.train,
        cfg.seed,
        Some(&out.join("train_metrics.jsonl")),
    )?;
    save_theta(&trained.model.params, &out.join("model"))?;
    if let Some(step) = trained.aborted_at {
        return Err(Error::NonFinite(format!(
            "training loss at step {step}; the last finite weights were saved"
        )));
    }
    let shard = data.shard(ShardKind::RetrainVal);
    let shard = &shard[..cfg.train.eval_examples.min(shard.len())];
    let report = evaluate(&trained.model, shard, cfg.eval.batch_size)?;
    write_json(&out.join("train_eval.json"), &report)?;
    println!(
        "retrain_val: token accuracy {:.4}, sequence accuracy {:.4}, loss {:.4}",
        report.token_accuracy, report.sequence_accuracy, report.mean_loss
    );
    Ok(true)
}

fn eval<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let arch = Architecture::read(cfg.paths.arch.as_ref().expect("validated"))?;
    let mut net = Seq2Seq::<T>::derived(&arch, &cfg.model.dims, &cfg.model.options(), cfg.seed)?;
    load_theta(&mut net.params, cfg.paths.model.as_ref().expect("validated"))?;
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    let shard = data.shard(cfg.eval.shard);
    let shard = &shard[..cfg.eval.max_examples.unwrap_or(shard.len()).min(shard.len())];
    let report = evaluate(&net, shard, cfg.eval.batch_size)?;
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "{:?}: token accuracy {:.4}, sequence accuracy {:.4}, loss {:.4}",
        cfg.eval.shard, report.token_accuracy, report.sequence_accuracy, report.mean_loss
    );
    Ok(true)
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let g = &cfg.gradcheck;
    let dx = linear_example()?;
    let linear_ok = dx.data() == [0.0, 1.0];
    println!(
        "{} linear example: dX = ({}, {})",
        if linear_ok { "PASS" } else { "FAIL" },
        dx.data()[0],
        dx.data()[1]
    );
    let mut results: Vec<CheckResult> = primitive_suite(cfg.seed)?;
    for &depth in &g.depths {
        for &n in &g.splits {
            let c = stack_gradient_check(depth, n, cfg.seed ^ (depth as u64) << 8 ^ n as u64, g.h, g.param_probes)?;
            results.extend(c.results(g.oracle_tolerance, g.fd_tolerance));
        }
    }
    for r in &results {
        println!(
            "{} {} (rel err {:.2e}, tolerance {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tolerance
        );
    }
    let all = linear_ok && results.iter().all(|r| r.passed);
    let report = json!({
        "linear_example": { "dx": dx.to_f64_vec(), "passed": linear_ok },
        "checks": results,
        "passed": all,
    });
    write_json(&out.join("gradcheck.json"), &report)?;
    Ok(all)
}
