use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::data::{Batch, Example, ShardKind, SyntheticDataset, BOS, EOS, PAD};
use crate::search::optim::{Adam, InverseSqrt};
use crate::search::{export_architecture, Architecture, Dims, Mode, ModelOptions, Seq2Seq};
use crate::tensor::{Gradients, ParamGroup, RngStream, Scalar, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub budget: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub log_interval: u64,
    /// Examples of the retraining validation shard scored at the end.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 5000,
            batch_size: 16,
            peak_lr: 2e-3,
            warmup_frac: 0.04,
            beta1: 0.9,
            beta2: 0.98,
            log_interval: 100,
            eval_examples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::schema("train.batch_size", "must be positive"));
        }
        if self.log_interval == 0 {
            return Err(Error::schema("train.log_interval", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::schema("train.warmup_frac", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetric {
    pub step: u64,
    pub train_loss: f64,
    /// Teacher-forced accuracy on the training batch.
    pub token_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    /// Unsmoothed per-token negative log-likelihood under teacher forcing.
    pub mean_loss: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Seq2Seq<T>,
    pub metrics: Vec<TrainMetric>,
    /// Set when a non-finite loss stopped training early; the model holds
    /// the last finite parameters.
    pub aborted_at: Option<u64>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of non-pad target positions where the logits' argmax is right.
pub fn teacher_forced_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let v = logits.last_dim();
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if argmax(&logits.data()[r * v..(r + 1) * v]) == t {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Retrains a discretized architecture from scratch with ordinary
/// backpropagation on the retraining shard.
pub fn train_derived<T: Scalar>(
    arch: &Architecture,
    data: &SyntheticDataset,
    dims: &Dims,
    opts: &ModelOptions,
    cfg: &TrainConfig,
    seed: u64,
    metrics_out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut model = Seq2Seq::<T>::derived(arch, dims, opts, seed)?;
    let mut rng = RngStream::substream(seed, 0x7ea1);
    let warmup = ((cfg.budget as f64 * cfg.warmup_frac).round() as u64).max(1);
    let schedule = InverseSqrt {
        peak: cfg.peak_lr,
        warmup,
    };
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, 0.0);
    let mut file = match metrics_out {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut aborted_at = None;
    for step in 1..=cfg.budget {
        let batch = data.sample_batch(ShardKind::RetrainTrain, cfg.batch_size, &mut rng);
        let logs = model.draw_logs(&mut rng);
        let mut grads = Gradients::new();
        let (loss, acc) = {
            let mut tape = Tape::with_params(&model.params);
            let logits = model.logits_taped(&mut tape, &batch, &logs, &Mode::train())?;
            let loss = tape.cross_entropy(logits, batch.tgt_out.clone(), Some(PAD), model.label_smoothing)?;
            let value = tape.value(loss).data()[0].as_f64();
            let acc = teacher_forced_accuracy(tape.value(logits), &batch.tgt_out);
            if value.is_finite() {
                tape.backward_from(loss, &Tensor::scalar(T::one()))?;
                tape.drain_param_grads(&mut grads)?;
            }
            (value, acc)
        };
        if !loss.is_finite() || !grads.is_finite() {
            aborted_at = Some(step);
            break;
        }
        adam.step(&mut model.params, &grads, ParamGroup::Theta, schedule.lr(step));
        if step % cfg.log_interval == 0 || step == cfg.budget {
            let m = TrainMetric {
                step,
                train_loss: loss,
                token_accuracy: acc,
            };
            if let (Some(f), Some(p)) = (&mut file, metrics_out) {
                let line = serde_json::to_string(&m).map_err(|e| Error::json(p, e))?;
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            metrics.push(m);
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        aborted_at,
    })
}

/// Maximum generated length for a source of `src_len` tokens.
pub fn max_output_len(src_len: usize) -> usize {
    (1.2 * src_len as f64 + 10.0).floor() as usize
}

/// Greedy decoding; each output stops before [`EOS`] or at
/// [`max_output_len`].
pub fn greedy_decode<T: Scalar>(net: &Seq2Seq<T>, sources: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let examples: Vec<Example> = sources
        .iter()
        .map(|s| Example {
            src: s.to_vec(),
            tgt: vec![EOS],
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let base = Batch::from_examples(&refs);
    let b = base.size;
    let limits: Vec<usize> = sources.iter().map(|s| max_output_len(s.len())).collect();
    let max_len = *limits.iter().max().unwrap();
    let logs = net.eval_logs();
    let mut ctx = crate::ops::OpContext {
        memory_mask: Some(base.src_mask.clone()),
        self_mask: Some(base.src_mask.clone()),
        dropout: 0.0,
        ..Default::default()
    };
    let memory = {
        let mut tape = Tape::no_grad(&net.params);
        let xs = net.embed.embed(&mut tape, base.src.clone(), b, base.src_len)?;
        let m = net.encoder.forward_taped(&mut tape, xs, &ctx, &logs.encoder)?;
        tape.value(m).clone()
    };
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    for t in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let len = t + 1;
        let mut ids = vec![PAD; b * len];
        for (i, out) in outputs.iter().enumerate() {
            ids[i * len] = BOS;
            for (j, &tok) in out.iter().enumerate().take(len - 1) {
                ids[i * len + j + 1] = tok;
            }
        }
        let mut tape = Tape::no_grad(&net.params);
        let mem = tape.leaf_ref(&memory, false)?;
        ctx.memory = Some(mem);
        let xt = net.embed.embed(&mut tape, Rc::from(ids), b, len)?;
        let y = net.decoder.forward_taped(&mut tape, xt, &ctx, &logs.decoder)?;
        let last = tape.slice(y, 1, len - 1, 1)?;
        let logits = net.embed.logits(&mut tape, last)?;
        let lv = tape.value(logits);
        let v = lv.last_dim();
        for i in 0..b {
            if done[i] {
                continue;
            }
            let tok = argmax(&lv.data()[i * v..(i + 1) * v]);
            if tok == EOS || outputs[i].len() >= limits[i] {
                done[i] = true;
            } else {
                outputs[i].push(tok);
                if outputs[i].len() >= limits[i] {
                    done[i] = true;
                }
            }
        }
        ctx.memory = None;
    }
    Ok(outputs)
}

/// Unsmoothed teacher-forced per-token NLL over `shard`.
pub fn teacher_forced_loss<T: Scalar>(net: &Seq2Seq<T>, shard: &[Example], batch_size: usize) -> Result<f64> {
    let logs = net.eval_logs();
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in shard.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs);
        let mut tape = Tape::no_grad(&net.params);
        let logits = net.logits_taped(&mut tape, &batch, &logs, &Mode::eval())?;
        let loss = tape.cross_entropy(logits, batch.tgt_out.clone(), Some(PAD), 0.0)?;
        let n = batch.target_tokens();
        sum += tape.value(loss).data()[0].as_f64() * n as f64;
        tokens += n;
    }
    Ok(sum / tokens.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub checkpoint: PathBuf,
    pub architecture: Architecture,
    /// Retraining-validation loss after the fine-tune; infinite if it diverged.
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: usize,
    pub scores: Vec<CheckpointScore>,
}

impl Selection {
    pub fn best(&self) -> &CheckpointScore {
        &self.scores[self.best]
    }
}

/// Discretizes every checkpoint, fine-tunes each derived network for
/// `cfg.budget` steps and keeps the one with the lowest loss on the first
/// `cfg.eval_examples` retraining-validation examples. Ties keep the earlier
/// checkpoint. Each candidate's `arch.json` is written into `scratch`.
pub fn select_checkpoint<T: Scalar>(
    checkpoints: &[PathBuf],
    data: &SyntheticDataset,
    dims: &Dims,
    opts: &ModelOptions,
    cfg: &TrainConfig,
    seed: u64,
    scratch: &Path,
) -> Result<Selection> {
    if checkpoints.is_empty() {
        return Err(Error::Invalid("no checkpoints to select from".into()));
    }
    fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let shard = data.shard(ShardKind::RetrainVal);
    let shard = &shard[..cfg.eval_examples.clamp(1, shard.len())];
    let mut scores = Vec::with_capacity(checkpoints.len());
    for (i, ckpt) in checkpoints.iter().enumerate() {
        let architecture = export_architecture(ckpt, &scratch.join(format!("arch_{i:03}.json")))?;
        let tuned = train_derived::<T>(&architecture, data, dims, opts, cfg, seed, None)?;
        let val_loss = match tuned.aborted_at {
            Some(_) => f64::INFINITY,
            None => teacher_forced_loss(&tuned.model, shard, cfg.batch_size)?,
        };
        scores.push(CheckpointScore {
            checkpoint: ckpt.clone(),
            architecture,
            val_loss,
        });
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.val_loss < scores[best].val_loss {
            best = i;
        }
    }
    Ok(Selection { best, scores })
}

/// Free-running exact-match metrics plus teacher-forced NLL over `shard`.
pub fn evaluate<T: Scalar>(net: &Seq2Seq<T>, shard: &[Example], batch_size: usize) -> Result<EvalReport> {
    if shard.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty shard".into()));
    }
    let bs = batch_size.max(1);
    let (mut tok_sum, mut seq_hits) = (0.0, 0usize);
    for chunk in shard.chunks(bs) {
        let sources: Vec<&[usize]> = chunk.iter().map(|e| e.src.as_slice()).collect();
        let preds = greedy_decode(net, &sources)?;
        for (e, p) in chunk.iter().zip(&preds) {
            let mut full = p.clone();
            full.push(EOS);
            let correct = e
                .tgt
                .iter()
                .enumerate()
                .filter(|&(i, &t)| full.get(i) == Some(&t))
                .count();
            tok_sum += correct as f64 / e.tgt.len() as f64;
            if full == e.tgt {
                seq_hits += 1;
            }
        }
    }
    let n = shard.len() as f64;
    Ok(EvalReport {
        token_accuracy: tok_sum / n,
        sequence_accuracy: seq_hits as f64 / n,
        mean_loss: teacher_forced_loss(net, shard, bs)?,
    })
}
