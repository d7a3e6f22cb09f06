//! Reference computations for checking backward-with-reconstruction.

use serde::Serialize;

use super::{ForwardOptions, LayerContext, LinearSplit, ReversibleLayer, ReversibleStack, RngLog};
use crate::ops::{OpContext, OpInstance, OpKind, Side};
use crate::profiler::ledger;
use crate::search::{Pooling, SplitOp};
use crate::tensor::{rel_err, CheckResult, Gradients, ParamId, ParamStore, RngStream, Scalar, Tape, Tensor};
use crate::Result;

/// Ops whose outputs are smooth in their inputs and weights, so central
/// differences converge.
pub const SMOOTH_KINDS: [OpKind; 7] = [
    OpKind::StdConv3,
    OpKind::StdConv5,
    OpKind::DynConv3,
    OpKind::DynConv7,
    OpKind::SelfAttention,
    OpKind::Glu,
    OpKind::Identity,
];

/// Input gradient of the two-split linear layer `G_1(x_2) = 2·x_2`,
/// `G_2(y_1) = −y_1` under `L = Y_1 + Y_2`.
pub fn linear_example() -> Result<Tensor<f64>> {
    let layer = ReversibleLayer::new(vec![
        LinearSplit { coeffs: vec![2.0] },
        LinearSplit { coeffs: vec![-1.0] },
    ])?;
    let params = ParamStore::new();
    let ctx = LayerContext::plain(OpContext::default());
    let log = RngLog { seeds: vec![0, 0] };
    let x = Tensor::from_f64(vec![1, 1, 2], &[0.5, -1.5])?;
    let y = layer.forward(&params, &x, &ctx, &log)?;
    let dy = Tensor::from_f64(vec![1, 1, 2], &[1.0, 1.0])?;
    let mut grads = Gradients::new();
    Ok(layer.backward(&params, &y, &dy, &ctx, &log, &mut grads, None)?.dx)
}

/// A stack of layers whose splits are fixed ops drawn uniformly from `kinds`.
pub struct OpStack<T: Scalar> {
    pub params: ParamStore<T>,
    pub stack: ReversibleStack<SplitOp>,
    pub logs: Vec<RngLog>,
    /// Chosen kinds, one row per layer.
    pub kinds: Vec<Vec<OpKind>>,
    pub split_width: usize,
    pub memory_width: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn random_op_stack<T: Scalar>(
    side: Side,
    depth: usize,
    n: usize,
    split_width: usize,
    memory_width: usize,
    kinds: &[OpKind],
    pooling: Pooling,
    seed: u64,
) -> Result<OpStack<T>> {
    let mut rng = RngStream::new(seed);
    let mut params = ParamStore::new();
    let mut layers = Vec::with_capacity(depth);
    let mut chosen = Vec::with_capacity(depth);
    for i in 0..depth {
        let mut splits = Vec::with_capacity(n);
        let mut row = Vec::with_capacity(n);
        for k in 0..n {
            let kind = kinds[rng.below(kinds.len())];
            let op = OpInstance::build(
                kind,
                side,
                split_width,
                memory_width,
                &mut params,
                &format!("l{i}.g{k}"),
                &mut rng,
            )?;
            row.push(kind);
            splits.push(SplitOp::Fixed { op, pooling });
        }
        layers.push(ReversibleLayer::new(splits)?);
        chosen.push(row);
    }
    let stack = ReversibleStack::new("oracle", layers);
    let logs = stack.draw_logs(&mut rng);
    Ok(OpStack {
        params,
        stack,
        logs,
        kinds: chosen,
        split_width,
        memory_width,
    })
}

/// Gradients of `L = Σ w ⊙ stack(x)` with respect to `x` and every weight.
#[derive(Clone, Debug)]
pub struct StackGrads<T> {
    pub dx: Tensor<T>,
    pub params: Vec<(ParamId, Tensor<T>)>,
    /// G evaluations recorded by the ledger during the call.
    pub forward_evals: u64,
    pub recompute_evals: u64,
}

fn collect<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
    store
        .ids()
        .map(|id| {
            let g = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
            (id, g)
        })
        .collect()
}

fn eval_counts() -> (u64, u64) {
    let s = ledger::snapshot();
    (s.forward_evals, s.recompute_forward_count)
}

impl<T: Scalar> OpStack<T> {
    pub fn ops_context(&self) -> OpContext {
        OpContext::default()
    }

    /// Reversible forward followed by backward-with-reconstruction.
    pub fn reconstruction_grads(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        memory: Option<&Tensor<T>>,
    ) -> Result<StackGrads<T>> {
        let (f0, r0) = eval_counts();
        let ctx = LayerContext {
            memory,
            ops: self.ops_context(),
        };
        let state = self.stack.forward(
            &self.params,
            x.clone(),
            &ctx,
            self.logs.clone(),
            ForwardOptions::unguarded(),
        )?;
        let mut grads = Gradients::new();
        let lg = self
            .stack
            .backward(&self.params, &state, w, &ctx, &mut grads, None, None)?;
        let (f1, r1) = eval_counts();
        Ok(StackGrads {
            dx: lg.dx,
            params: collect(&self.params, &grads),
            forward_evals: f1 - f0,
            recompute_evals: r1 - r0,
        })
    }

    /// Ordinary backward through a tape holding every intermediate.
    pub fn stored_activation_grads(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        memory: Option<&Tensor<T>>,
    ) -> Result<StackGrads<T>> {
        let (f0, r0) = eval_counts();
        let mut tape = Tape::with_params(&self.params);
        let xv = tape.leaf(x.clone(), true)?;
        let mut ops = self.ops_context();
        if let Some(m) = memory {
            ops.memory = Some(tape.leaf(m.clone(), false)?);
        }
        let out = self.stack.forward_taped(&mut tape, xv, &ops, &self.logs)?;
        tape.backward_from(out, w)?;
        let dx = tape
            .grad(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let mut grads = Gradients::new();
        tape.drain_param_grads(&mut grads)?;
        let (f1, r1) = eval_counts();
        Ok(StackGrads {
            dx,
            params: collect(&self.params, &grads),
            forward_evals: f1 - f0,
            recompute_evals: r1 - r0,
        })
    }

    /// `Σ w ⊙ stack(x)` under `params`, through the reversible forward.
    pub fn objective(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        w: &Tensor<T>,
        memory: Option<&Tensor<T>>,
    ) -> Result<f64> {
        let ctx = LayerContext {
            memory,
            ops: self.ops_context(),
        };
        let state = self
            .stack
            .forward(params, x.clone(), &ctx, self.logs.clone(), ForwardOptions::unguarded())?;
        Ok(state
            .output()
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }
}

/// Max relative error across matching parameter gradients.
pub fn param_rel_err<T: Scalar>(a: &[(ParamId, Tensor<T>)], b: &[(ParamId, Tensor<T>)]) -> f64 {
    a.iter()
        .zip(b)
        .map(|((_, ga), (_, gb))| rel_err(ga, gb))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct StackCheck {
    pub depth: usize,
    pub n: usize,
    pub oracle_dx: f64,
    pub oracle_params: f64,
    pub fd_dx: f64,
    pub fd_params: f64,
}

impl StackCheck {
    pub fn results(&self, oracle_tol: f64, fd_tol: f64) -> Vec<CheckResult> {
        let tag = format!("stack depth={} n={}", self.depth, self.n);
        vec![
            CheckResult::new(format!("{tag} dX vs stored activations"), self.oracle_dx, oracle_tol),
            CheckResult::new(
                format!("{tag} dθ vs stored activations"),
                self.oracle_params,
                oracle_tol,
            ),
            CheckResult::new(format!("{tag} dX vs finite differences"), self.fd_dx, fd_tol),
            CheckResult::new(format!("{tag} dθ vs finite differences"), self.fd_params, fd_tol),
        ]
    }
}

/// Compares backward-with-reconstruction on a random smooth f64 stack with
/// the stored-activation oracle and with central differences (`h`), probing
/// `param_probes` random weight coordinates.
pub fn stack_gradient_check(depth: usize, n: usize, seed: u64, h: f64, param_probes: usize) -> Result<StackCheck> {
    let net = random_op_stack::<f64>(Side::Encoder, depth, n, 8, 8, &SMOOTH_KINDS, Pooling::Avg, seed)?;
    let mut rng = RngStream::substream(seed, 1);
    let shape = vec![1, 4, 8 * n];
    let x = Tensor::randn(shape.clone(), 1.0, &mut rng);
    let w = Tensor::randn(shape, 1.0, &mut rng);
    let rev = net.reconstruction_grads(&x, &w, None)?;
    let oracle = net.stored_activation_grads(&x, &w, None)?;

    let fd_x = crate::tensor::finite_diff_gradient(|p| net.objective(&net.params, p, &w, None), &x, h)?;

    let ids: Vec<ParamId> = net.params.ids().collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    if !ids.is_empty() {
        for _ in 0..param_probes {
            let id = ids[rng.below(ids.len())];
            let pos = rng.below(net.params.value(id).numel());
            let mut probe = net.params.clone();
            let orig = probe.value(id).data()[pos];
            probe.value_mut(id).data_mut()[pos] = orig + h;
            let up = net.objective(&probe, &x, &w, None)?;
            probe.value_mut(id).data_mut()[pos] = orig - h;
            let down = net.objective(&probe, &x, &w, None)?;
            numeric.push((up - down) / (2.0 * h));
            let g = &rev.params.iter().find(|(p, _)| *p == id).expect("every id collected").1;
            analytic.push(g.data()[pos]);
        }
    }
    let fd_params = if analytic.is_empty() {
        0.0
    } else {
        let a = Tensor::new(vec![analytic.len()], analytic)?;
        let b = Tensor::new(vec![numeric.len()], numeric)?;
        rel_err(&a, &b)
    };
    Ok(StackCheck {
        depth,
        n,
        oracle_dx: rel_err(&rev.dx, &oracle.dx),
        oracle_params: param_rel_err(&rev.params, &oracle.params),
        fd_dx: rel_err(&rev.dx, &fd_x),
        fd_params,
    })
}
