use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::arch::{discretize, ArchDims, Architecture, Provenance};
use super::node::Pooling;
use super::optim::{BilevelOptimizer, InverseSqrt};
use super::sampling::sample_uniform_path;
use super::supernet::{Mode, Seq2Seq};
use crate::harness::data::{Batch, ShardKind, SyntheticDataset};
use crate::profiler::ledger;
use crate::tensor::{DType, Gradients, ParamGroup, ParamStore, RngStream, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Darts,
    UniformSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub budget: u64,
    pub checkpoint_interval: u64,
    pub batch_size: usize,
    pub theta_peak_lr: f64,
    /// Warmup length as a fraction of `budget`.
    pub warmup_frac: f64,
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub strategy: Strategy,
    pub log_interval: u64,
    /// Paths ranked on validation data at the end of a sampling run.
    pub candidate_pool: usize,
    /// Batches used to score each candidate path.
    pub ranking_batches: usize,
    pub drift_guard: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            checkpoint_interval: 500,
            batch_size: 16,
            theta_peak_lr: 5e-4,
            warmup_frac: 0.04,
            alpha_lr: 3e-4,
            alpha_weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            strategy: Strategy::Darts,
            log_interval: 1,
            candidate_pool: 16,
            ranking_batches: 4,
            drift_guard: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 {
            return Err(Error::schema("search.checkpoint_interval", "must be positive"));
        }
        if self.log_interval == 0 {
            return Err(Error::schema("search.log_interval", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::schema("search.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::schema("search.warmup_frac", "must lie in [0, 1]"));
        }
        if self.strategy == Strategy::UniformSampling && self.candidate_pool == 0 {
            return Err(Error::schema(
                "search.candidate_pool",
                "must be positive for uniform sampling",
            ));
        }
        Ok(())
    }

    pub fn optimizer<T: Scalar>(&self) -> BilevelOptimizer<T> {
        let warmup = ((self.budget as f64 * self.warmup_frac).round() as u64).max(1);
        BilevelOptimizer::new(
            self.beta1,
            self.beta2,
            InverseSqrt {
                peak: self.theta_peak_lr,
                warmup,
            },
            self.alpha_lr,
            self.alpha_weight_decay,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub train_loss: f64,
    pub val_loss: f64,
    pub retained_bytes: usize,
    pub rejected: bool,
}

fn finite_grads<T: Scalar>(loss: f64, grads: &Gradients<T>) -> bool {
    loss.is_finite() && grads.is_finite()
}

/// One alternating update: θ on `train`, then α on `val` at the new θ.
/// A non-finite loss or gradient rolls both updates back.
pub fn bilevel_step<T: Scalar>(
    net: &mut Seq2Seq<T>,
    train: &Batch,
    val: &Batch,
    opt: &mut BilevelOptimizer<T>,
    strategy: Strategy,
    drift_guard: Option<f64>,
    rng: &mut RngStream,
) -> Result<StepResult> {
    let path: Option<Rc<[usize]>> = match strategy {
        Strategy::Darts => None,
        Strategy::UniformSampling => Some(sample_uniform_path(net, rng)),
    };
    let mode = Mode {
        train: true,
        path,
        drift_guard,
    };
    let saved_params = net.params.clone();
    let saved_opt = opt.clone();
    let reject =
        |net: &mut Seq2Seq<T>, opt: &mut BilevelOptimizer<T>, train_loss: f64, val_loss: f64| -> Result<StepResult> {
            net.params = saved_params.clone();
            let rejected = saved_opt.rejected_steps + 1;
            *opt = saved_opt.clone();
            opt.rejected_steps = rejected;
            Ok(StepResult {
                train_loss,
                val_loss,
                retained_bytes: 0,
                rejected: true,
            })
        };

    let logs = net.draw_logs(rng);
    let mut grads = Gradients::new();
    let train_report = match net.loss_reversible(train, logs, &mode, Some(&mut grads)) {
        Ok(r) if finite_grads(r.loss, &grads) => r,
        Ok(r) => return reject(net, opt, r.loss, f64::NAN),
        Err(Error::NonFinite(_)) => return reject(net, opt, f64::NAN, f64::NAN),
        Err(e) => return Err(e),
    };
    let lr = opt.schedule.lr(opt.theta.steps() + 1);
    opt.theta.step(&mut net.params, &grads, ParamGroup::Theta, lr);

    let logs = net.draw_logs(rng);
    let val_loss = match strategy {
        Strategy::Darts => {
            let mut grads = Gradients::new();
            match net.loss_reversible(val, logs, &mode, Some(&mut grads)) {
                Ok(r) if finite_grads(r.loss, &grads) => {
                    opt.alpha.step(&mut net.params, &grads, ParamGroup::Alpha, opt.alpha_lr);
                    r.loss
                }
                Ok(r) => return reject(net, opt, train_report.loss, r.loss),
                Err(Error::NonFinite(_)) => return reject(net, opt, train_report.loss, f64::NAN),
                Err(e) => return Err(e),
            }
        }
        Strategy::UniformSampling => {
            let r = net.loss_reversible(val, logs, &mode, None)?;
            if !r.loss.is_finite() {
                return reject(net, opt, train_report.loss, r.loss);
            }
            r.loss
        }
    };
    Ok(StepResult {
        train_loss: train_report.loss,
        val_loss,
        retained_bytes: train_report.retained_bytes,
        rejected: false,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub retained_bytes: usize,
    pub recompute_count: u64,
}

/// Contents of `alpha.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaFile {
    pub version: u64,
    pub dims: ArchDims,
    pub pooling: Pooling,
    pub step: u64,
    pub seed: u64,
    pub strategy: Strategy,
    /// `s × m × 13` logits.
    pub encoder: Vec<Vec<Vec<f64>>>,
    /// `s × n × 14` logits.
    pub decoder: Vec<Vec<Vec<f64>>>,
}

impl AlphaFile {
    pub fn from_net<T: Scalar>(net: &Seq2Seq<T>, step: u64, seed: u64, strategy: Strategy) -> Self {
        let d = &net.dims;
        let (s, m, n) = (d.s, d.m, d.n);
        let encoder = (0..s)
            .map(|j| (0..m).map(|k| net.alpha_values(j * m + k)).collect())
            .collect();
        let decoder = (0..s)
            .map(|j| (0..n).map(|k| net.alpha_values(s * m + j * n + k)).collect())
            .collect();
        Self {
            version: 1,
            dims: ArchDims {
                d: d.d,
                e: d.e,
                m,
                n,
                s,
            },
            pooling: net.pooling,
            step,
            seed,
            strategy,
            encoder,
            decoder,
        }
    }

    /// Logit vectors in slot order.
    pub fn slots(&self) -> Vec<Vec<f64>> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.decoder.iter().flatten())
            .cloned()
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(1) => {}
            Some(v) => return Err(Error::Version { found: v, expected: 1 }),
            None => return Err(Error::schema("version", "missing or not an integer")),
        }
        let file: AlphaFile = serde_json::from_value(raw).map_err(|e| Error::json(path, e))?;
        let ArchDims { s, m, n, .. } = file.dims;
        if file.encoder.len() != s || file.encoder.iter().any(|r| r.len() != m) {
            return Err(Error::schema("encoder", format!("expected {s} × {m} logit vectors")));
        }
        if file.decoder.len() != s || file.decoder.iter().any(|r| r.len() != n) {
            return Err(Error::schema("decoder", format!("expected {s} × {n} logit vectors")));
        }
        Ok(file)
    }
}

/// Sidecar describing `theta.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaIndex {
    pub version: u64,
    pub dtype: DType,
    pub tensors: Vec<ThetaEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat dump.
    pub offset: usize,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every θ tensor to `dir/theta.bin` with its `theta.json` sidecar.
pub fn save_theta<T: Scalar>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for id in store.ids_in(ParamGroup::Theta) {
        let v = store.value(id);
        for &x in v.data() {
            x.write_le(&mut bytes);
        }
        tensors.push(ThetaEntry {
            name: store.name(id).to_string(),
            shape: v.shape().to_vec(),
            offset,
        });
        offset += v.numel();
    }
    let bin = dir.join("theta.bin");
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    write_json(
        &dir.join("theta.json"),
        &ThetaIndex {
            version: 1,
            dtype: T::DTYPE,
            tensors,
        },
    )
}

/// Loads θ tensors saved by [`save_theta`] into matching entries of `store`.
pub fn load_theta<T: Scalar>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let idx_path = dir.join("theta.json");
    let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let index: ThetaIndex = serde_json::from_str(&text).map_err(|e| Error::json(&idx_path, e))?;
    if index.version != 1 {
        return Err(Error::Version {
            found: index.version,
            expected: 1,
        });
    }
    if index.dtype != T::DTYPE {
        return Err(Error::schema(
            "dtype",
            format!(
                "checkpoint holds {}, model uses {}",
                index.dtype.as_str(),
                T::DTYPE.as_str()
            ),
        ));
    }
    let bin_path = dir.join("theta.bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let width = T::DTYPE.size_of();
    let mut source = ParamStore::new();
    for entry in &index.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * width;
        let end = start + n * width;
        if end > bytes.len() {
            return Err(Error::schema(&entry.name, "extends past the end of theta.bin"));
        }
        let data = bytes[start..end].chunks_exact(width).map(T::read_le).collect();
        source.add(
            entry.name.clone(),
            ParamGroup::Theta,
            Tensor::new(entry.shape.clone(), data)?,
        );
    }
    store.load_group_from(&source, ParamGroup::Theta)
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

fn save_checkpoint<T: Scalar>(
    net: &Seq2Seq<T>,
    out: &Path,
    step: u64,
    seed: u64,
    strategy: Strategy,
) -> Result<PathBuf> {
    let dir = checkpoint_dir(out, step);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_theta(&net.params, &dir)?;
    write_json(&dir.join("alpha.json"), &AlphaFile::from_net(net, step, seed, strategy))?;
    Ok(dir)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<MetricsLine>,
    pub architecture: Architecture,
    pub rejected_steps: u64,
}

/// Alternates bilevel steps for `cfg.budget` steps, writing checkpoints,
/// `metrics.jsonl` and the final `arch.json` under `out`.
pub fn run_search<T: Scalar>(
    net: &mut Seq2Seq<T>,
    data: &SyntheticDataset,
    cfg: &SearchConfig,
    seed: u64,
    out: &Path,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if !net.is_supernet() {
        return Err(Error::Invalid("search needs a supernet".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ledger::reset();
    let base_recompute = ledger::snapshot().recompute_forward_count;
    let mut rng = RngStream::substream(seed, 0x5ea7c4);
    let mut opt = cfg.optimizer::<T>();
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut checkpoints = vec![save_checkpoint(net, out, 0, seed, cfg.strategy)?];
    let mut metrics = Vec::new();

    for step in 1..=cfg.budget {
        let train = data.sample_batch(ShardKind::ThetaTrain, cfg.batch_size, &mut rng);
        let val = data.sample_batch(ShardKind::AlphaVal, cfg.batch_size, &mut rng);
        let r = bilevel_step(net, &train, &val, &mut opt, cfg.strategy, cfg.drift_guard, &mut rng)?;
        if step % cfg.log_interval == 0 || step == cfg.budget {
            let line = MetricsLine {
                step,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                retained_bytes: r.retained_bytes,
                recompute_count: ledger::snapshot().recompute_forward_count - base_recompute,
            };
            let text = serde_json::to_string(&line).map_err(|e| Error::json(&metrics_path, e))?;
            writeln!(metrics_file, "{text}").map_err(|e| Error::io(&metrics_path, e))?;
            metrics.push(line);
        }
        if step % cfg.checkpoint_interval == 0 {
            checkpoints.push(save_checkpoint(net, out, step, seed, cfg.strategy)?);
        }
    }

    let provenance = Provenance {
        seed: Some(seed),
        steps: Some(cfg.budget),
        pooling: Some(net.pooling),
        strategy: Some(
            match cfg.strategy {
                Strategy::Darts => "darts",
                Strategy::UniformSampling => "uniform_sampling",
            }
            .into(),
        ),
        note: None,
    };
    let architecture = match cfg.strategy {
        Strategy::Darts => discretize(net, provenance)?,
        Strategy::UniformSampling => rank_sampled_paths(net, data, cfg, &mut rng, provenance)?,
    };
    architecture.write(&out.join("arch.json"))?;
    Ok(SearchOutcome {
        checkpoints,
        metrics,
        architecture,
        rejected_steps: opt.rejected_steps,
    })
}

/// Scores `cfg.candidate_pool` sampled paths by validation loss with the
/// shared weights and returns the best one as an architecture.
pub fn rank_sampled_paths<T: Scalar>(
    net: &Seq2Seq<T>,
    data: &SyntheticDataset,
    cfg: &SearchConfig,
    rng: &mut RngStream,
    provenance: Provenance,
) -> Result<Architecture> {
    let batches: Vec<Batch> = (0..cfg.ranking_batches.max(1))
        .map(|_| data.sample_batch(ShardKind::AlphaVal, cfg.batch_size, rng))
        .collect();
    let mut best: Option<(f64, Rc<[usize]>)> = None;
    for _ in 0..cfg.candidate_pool {
        let path = sample_uniform_path(net, rng);
        let mode = Mode {
            train: false,
            path: Some(path.clone()),
            drift_guard: None,
        };
        let mut total = 0.0;
        for b in &batches {
            total += net.loss_standard(b, &net.eval_logs(), &mode, None)?.loss;
        }
        if best.as_ref().is_none_or(|(l, _)| total < *l) {
            best = Some((total, path));
        }
    }
    let (_, path) = best.expect("candidate pool is non-empty");
    let d = &net.dims;
    Architecture::from_slot_choices(
        ArchDims {
            d: d.d,
            e: d.e,
            m: d.m,
            n: d.n,
            s: d.s,
        },
        &path,
        provenance,
    )
}

/// Discretizes the logits stored in a checkpoint and writes `out`.
pub fn export_architecture(checkpoint: &Path, out: &Path) -> Result<Architecture> {
    let alpha_path = if checkpoint.is_dir() {
        checkpoint.join("alpha.json")
    } else {
        checkpoint.to_path_buf()
    };
    let file = AlphaFile::read(&alpha_path)?;
    let provenance = Provenance {
        seed: Some(file.seed),
        steps: Some(file.step),
        pooling: Some(file.pooling),
        strategy: Some(
            match file.strategy {
                Strategy::Darts => "darts",
                Strategy::UniformSampling => "uniform_sampling",
            }
            .into(),
        ),
        note: None,
    };
    let arch = Architecture::from_alphas(file.dims, &file.slots(), provenance)?;
    arch.write(out)?;
    Ok(arch)
}
