use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::node::{build_search_node, new_alpha, Pooling, SplitOp};
use crate::harness::data::{Batch, PAD};
use crate::harness::FactorizedEmbedding;
use crate::ops::{OpContext, OpInstance, OpKind, Side};
use crate::profiler::ledger;
use crate::reversible::{ForwardOptions, LayerContext, ReversibleLayer, ReversibleStack, RngLog};
use crate::tensor::{Gradients, ParamGroup, ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Network dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub vocab: usize,
    /// Embedding bottleneck width.
    pub e: usize,
    /// Model width.
    pub d: usize,
    /// Encoder splits.
    pub m: usize,
    /// Searched decoder splits; the decoder has `n + 1` splits in total.
    pub n: usize,
    /// Layers per searched block.
    pub s: usize,
    /// Repetitions of the block; layers at the same block offset share logits.
    pub blocks: usize,
    pub max_positions: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            vocab: 64,
            e: 32,
            d: 96,
            m: 2,
            n: 3,
            s: 1,
            blocks: 1,
            max_positions: 48,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("model.dims.{f}");
        if self.m < 2 {
            return Err(Error::schema(field("m"), "the encoder needs at least 2 splits"));
        }
        if self.n < 1 {
            return Err(Error::schema(field("n"), "the decoder needs at least 1 searched split"));
        }
        if self.s == 0 || self.blocks == 0 {
            return Err(Error::schema(field("s"), "depth must be positive"));
        }
        if !self.d.is_multiple_of(self.m) || !(self.d / self.m).is_multiple_of(8) {
            return Err(Error::schema(
                field("d"),
                format!(
                    "d = {} must split into {} groups whose width is a multiple of 8",
                    self.d, self.m
                ),
            ));
        }
        if !self.d.is_multiple_of(self.n + 1) || !(self.d / (self.n + 1)).is_multiple_of(8) {
            return Err(Error::schema(
                field("d"),
                format!(
                    "d = {} must split into {} decoder groups whose width is a multiple of 8",
                    self.d,
                    self.n + 1
                ),
            ));
        }
        if self.e >= self.d {
            return Err(Error::schema(
                field("e"),
                format!("e = {} must be below d = {}", self.e, self.d),
            ));
        }
        if self.vocab <= crate::harness::data::FIRST_SYMBOL {
            return Err(Error::schema(field("vocab"), "vocabulary too small"));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.s * self.blocks
    }

    /// Number of search-node slots, `s · (m + n)`.
    pub fn slots(&self) -> usize {
        self.s * (self.m + self.n)
    }

    pub fn enc_width(&self) -> usize {
        self.d / self.m
    }

    pub fn dec_width(&self) -> usize {
        self.d / (self.n + 1)
    }
}

/// Per-call switches for a loss evaluation.
#[derive(Clone, Debug, Default)]
pub struct Mode {
    pub train: bool,
    /// Sampled single path (one candidate index per slot).
    pub path: Option<Rc<[usize]>>,
    /// Drift threshold for reconstruction checks; needs shadow inputs.
    pub drift_guard: Option<f64>,
}

impl Mode {
    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// Seeds for every `G_k` of both stacks for one evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepLogs {
    pub encoder: Vec<RngLog>,
    pub decoder: Vec<RngLog>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Activation bytes held at the end of forward, above the call's baseline.
    pub retained_bytes: usize,
    pub tokens: usize,
}

/// Encoder/decoder network whose splits are either search nodes (a
/// supernet) or fixed ops (a derived architecture).
#[derive(Clone, Debug)]
pub struct Seq2Seq<T: Scalar> {
    pub params: ParamStore<T>,
    pub dims: Dims,
    pub pooling: Pooling,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub embed: FactorizedEmbedding,
    pub encoder: ReversibleStack<SplitOp>,
    pub decoder: ReversibleStack<SplitOp>,
    /// Logits per slot: `s × m` encoder then `s × n` decoder, row-major.
    /// Empty for derived networks.
    pub alphas: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct ModelOptions {
    pub pooling: Pooling,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            pooling: Pooling::Max,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

enum Choice<'a> {
    Search,
    Fixed(&'a Architecture),
}

impl<T: Scalar> Seq2Seq<T> {
    /// A supernet with full candidate sets at every searched split.
    pub fn supernet(dims: &Dims, opts: &ModelOptions, seed: u64) -> Result<Self> {
        Self::build(dims, opts, seed, Choice::Search)
    }

    /// The network `arch` describes, repeated `dims.blocks` times.
    pub fn derived(arch: &Architecture, dims: &Dims, opts: &ModelOptions, seed: u64) -> Result<Self> {
        arch.validate()?;
        let a = &arch.dims;
        if (a.d, a.e, a.m, a.n, a.s) != (dims.d, dims.e, dims.m, dims.n, dims.s) {
            return Err(Error::schema(
                "dims",
                format!(
                    "architecture dims (d={}, e={}, m={}, n={}, s={}) differ from the model's",
                    a.d, a.e, a.m, a.n, a.s
                ),
            ));
        }
        Self::build(dims, opts, seed, Choice::Fixed(arch))
    }

    fn build(dims: &Dims, opts: &ModelOptions, seed: u64, choice: Choice<'_>) -> Result<Self> {
        dims.validate()?;
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        let embed = FactorizedEmbedding::new(dims.vocab, dims.e, dims.d, dims.max_positions, &mut params, &mut rng)?;
        let (s, m, n) = (dims.s, dims.m, dims.n);
        let mut alphas = Vec::new();
        if let Choice::Search = choice {
            for j in 0..s {
                for k in 0..m {
                    alphas.push(new_alpha(
                        &mut params,
                        format!("alpha.enc.b{j}.g{k}"),
                        Side::Encoder,
                        &mut rng,
                    ));
                }
            }
            for j in 0..s {
                for k in 0..n {
                    alphas.push(new_alpha(
                        &mut params,
                        format!("alpha.dec.b{j}.g{k}"),
                        Side::Decoder,
                        &mut rng,
                    ));
                }
            }
        }
        let mut enc_layers = Vec::with_capacity(dims.layers());
        for i in 0..dims.layers() {
            let j = i % s;
            let mut splits = Vec::with_capacity(m);
            for k in 0..m {
                let prefix = format!("enc.l{i}.g{k}");
                let slot = j * m + k;
                let w = dims.enc_width();
                splits.push(match choice {
                    Choice::Search => SplitOp::Searched(build_search_node(
                        Side::Encoder,
                        slot,
                        alphas[slot],
                        opts.pooling,
                        w,
                        w,
                        &mut params,
                        &prefix,
                        &mut rng,
                    )?),
                    Choice::Fixed(arch) => SplitOp::Fixed {
                        op: OpInstance::build(arch.encoder[j][k], Side::Encoder, w, w, &mut params, &prefix, &mut rng)?,
                        pooling: opts.pooling,
                    },
                });
            }
            enc_layers.push(ReversibleLayer::new(splits)?);
        }
        let mut dec_layers = Vec::with_capacity(dims.layers());
        for i in 0..dims.layers() {
            let j = i % s;
            let w = dims.dec_width();
            let mut splits = Vec::with_capacity(n + 1);
            for k in 0..n {
                let prefix = format!("dec.l{i}.g{k}");
                let slot = s * m + j * n + k;
                splits.push(match choice {
                    Choice::Search => SplitOp::Searched(build_search_node(
                        Side::Decoder,
                        slot,
                        alphas[slot],
                        opts.pooling,
                        w,
                        dims.d,
                        &mut params,
                        &prefix,
                        &mut rng,
                    )?),
                    Choice::Fixed(arch) => SplitOp::Fixed {
                        op: OpInstance::build(
                            arch.decoder.searched[j][k],
                            Side::Decoder,
                            w,
                            dims.d,
                            &mut params,
                            &prefix,
                            &mut rng,
                        )?,
                        pooling: opts.pooling,
                    },
                });
            }
            let cross = OpInstance::build(
                OpKind::CrossAttention,
                Side::Decoder,
                w,
                dims.d,
                &mut params,
                &format!("dec.l{i}.g{n}"),
                &mut rng,
            )?;
            splits.push(SplitOp::Fixed {
                op: cross,
                pooling: opts.pooling,
            });
            dec_layers.push(ReversibleLayer::new(splits)?);
        }
        Ok(Self {
            params,
            dims: dims.clone(),
            pooling: opts.pooling,
            dropout: opts.dropout,
            label_smoothing: opts.label_smoothing,
            embed,
            encoder: ReversibleStack::new("encoder", enc_layers),
            decoder: ReversibleStack::new("decoder", dec_layers),
            alphas,
        })
    }

    pub fn is_supernet(&self) -> bool {
        !self.alphas.is_empty()
    }

    /// Candidate kinds of every slot, in slot order.
    pub fn slot_candidates(&self) -> Vec<Vec<OpKind>> {
        let (s, m, n) = (self.dims.s, self.dims.m, self.dims.n);
        (0..s * (m + n))
            .map(|slot| {
                let side = if slot < s * m { Side::Encoder } else { Side::Decoder };
                OpKind::candidates(side)
            })
            .collect()
    }

    pub fn alpha_values(&self, slot: usize) -> Vec<f64> {
        self.params.value(self.alphas[slot]).to_f64_vec()
    }

    pub fn draw_logs(&self, rng: &mut RngStream) -> StepLogs {
        StepLogs {
            encoder: self.encoder.draw_logs(rng),
            decoder: self.decoder.draw_logs(rng),
        }
    }

    fn op_context(&self, batch: &Batch, mode: &Mode) -> OpContext {
        OpContext {
            memory: None,
            memory_mask: Some(batch.src_mask.clone()),
            self_mask: Some(batch.src_mask.clone()),
            dropout: self.dropout,
            train: mode.train,
            path: mode.path.clone(),
        }
    }

    fn ignore(&self) -> Option<usize> {
        Some(PAD)
    }

    /// Loss and gradients through the reversible backbone: only stack inputs,
    /// final outputs and the output head are held between forward and
    /// backward. Gradients are added to `grads` when given.
    pub fn loss_reversible(
        &self,
        batch: &Batch,
        logs: StepLogs,
        mode: &Mode,
        grads: Option<&mut Gradients<T>>,
    ) -> Result<LossReport> {
        let base = ledger::retained_bytes();
        let ops = self.op_context(batch, mode);
        let (xs, xt) = {
            let mut tape = Tape::no_grad(&self.params);
            let a = self
                .embed
                .embed(&mut tape, batch.src.clone(), batch.size, batch.src_len)?;
            let b = self
                .embed
                .embed(&mut tape, batch.tgt_in.clone(), batch.size, batch.tgt_len)?;
            (tape.value(a).clone(), tape.value(b).clone())
        };
        let fwd = ForwardOptions {
            drift_guard: mode.drift_guard,
        };
        let enc_ctx = LayerContext::plain(ops.clone());
        let enc = self.encoder.forward(&self.params, xs, &enc_ctx, logs.encoder, fwd)?;
        let dec_ctx = LayerContext {
            memory: Some(enc.output()),
            ops,
        };
        let dec = self.decoder.forward(&self.params, xt, &dec_ctx, logs.decoder, fwd)?;

        let mut head = Tape::with_params(&self.params);
        let y = head.leaf_ref(dec.output(), grads.is_some())?;
        let logits = self.embed.logits(&mut head, y)?;
        let loss = head.cross_entropy(logits, batch.tgt_out.clone(), self.ignore(), self.label_smoothing)?;
        let loss_value = head.value(loss).data()[0].as_f64();
        let retained_bytes = ledger::retained_bytes().saturating_sub(base);
        let report = LossReport {
            loss: loss_value,
            retained_bytes,
            tokens: batch.target_tokens(),
        };
        let Some(grads) = grads else { return Ok(report) };
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        head.backward_from(loss, &Tensor::scalar(T::one()))?;
        head.drain_param_grads(grads)?;
        let dy = head
            .grad(y)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(dec.output().shape().to_vec()));
        drop(head);

        let mut d_memory = Tensor::zeros(enc.output().shape().to_vec());
        let dec_grad = self.decoder.backward(
            &self.params,
            &dec,
            &dy,
            &dec_ctx,
            grads,
            Some(&mut d_memory),
            mode.drift_guard,
        )?;
        drop(dec);
        let enc_grad = self
            .encoder
            .backward(&self.params, &enc, &d_memory, &enc_ctx, grads, None, mode.drift_guard)?;
        drop(enc);

        let mut tape = Tape::with_params(&self.params);
        let a = self
            .embed
            .embed(&mut tape, batch.src.clone(), batch.size, batch.src_len)?;
        let b = self
            .embed
            .embed(&mut tape, batch.tgt_in.clone(), batch.size, batch.tgt_len)?;
        tape.backward_from(a, &enc_grad.dx)?;
        tape.backward_from(b, &dec_grad.dx)?;
        tape.drain_param_grads(grads)?;
        Ok(report)
    }

    /// Output logits `[b, l_tgt, V]` computed on `tape` with every
    /// intermediate kept.
    pub fn logits_taped<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &Batch,
        logs: &StepLogs,
        mode: &Mode,
    ) -> Result<Var> {
        let mut ops = self.op_context(batch, mode);
        let xs = self.embed.embed(tape, batch.src.clone(), batch.size, batch.src_len)?;
        let memory = self.encoder.forward_taped(tape, xs, &ops, &logs.encoder)?;
        ops.memory = Some(memory);
        let xt = self
            .embed
            .embed(tape, batch.tgt_in.clone(), batch.size, batch.tgt_len)?;
        let y = self.decoder.forward_taped(tape, xt, &ops, &logs.decoder)?;
        self.embed.logits(tape, y)
    }

    /// Loss and gradients with ordinary stored-activation backpropagation.
    pub fn loss_standard(
        &self,
        batch: &Batch,
        logs: &StepLogs,
        mode: &Mode,
        grads: Option<&mut Gradients<T>>,
    ) -> Result<LossReport> {
        let base = ledger::retained_bytes();
        let mut tape = match grads {
            Some(_) => Tape::with_params(&self.params),
            None => Tape::no_grad(&self.params),
        };
        let logits = self.logits_taped(&mut tape, batch, logs, mode)?;
        let loss = tape.cross_entropy(logits, batch.tgt_out.clone(), self.ignore(), self.label_smoothing)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        let report = LossReport {
            loss: loss_value,
            retained_bytes: ledger::retained_bytes().saturating_sub(base),
            tokens: batch.target_tokens(),
        };
        if let Some(grads) = grads {
            if !loss_value.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            tape.backward_from(loss, &Tensor::scalar(T::one()))?;
            tape.drain_param_grads(grads)?;
        }
        Ok(report)
    }

    /// Deterministic seeds for evaluation passes (dropout is off, so the
    /// values are never consumed).
    pub fn eval_logs(&self) -> StepLogs {
        self.draw_logs(&mut RngStream::new(0))
    }

    /// Parameter ids of one group.
    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params.ids_in(group).collect()
    }
}
