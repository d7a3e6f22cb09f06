use serde::{Deserialize, Serialize};

use crate::ops::{build_op_set, OpContext, OpInstance, OpKind, Side};
use crate::reversible::SplitFunction;
use crate::tensor::{ParamGroup, ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

pub const ALPHA_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
}

/// Elementwise max or mean across `parts`, all of the same shape.
pub fn pool_inputs<T: Scalar>(tape: &mut Tape<'_, T>, pooling: Pooling, parts: &[Var]) -> Result<Var> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::shape("pool_inputs", "no inputs to pool"))?;
    let shape = tape.shape(first).to_vec();
    for &p in &parts[1..] {
        if tape.shape(p) != shape.as_slice() {
            return Err(Error::shape("pool_inputs", format!("{:?} vs {shape:?}", tape.shape(p))));
        }
    }
    if parts.len() == 1 {
        return Ok(first);
    }
    let stacked = tape.concat(parts, 0)?;
    let mut s = vec![parts.len()];
    s.extend(&shape);
    let stacked = tape.reshape(stacked, &s)?;
    match pooling {
        Pooling::Max => tape.reduce_max(stacked, 0),
        Pooling::Avg => tape.reduce_mean(stacked, 0),
    }
}

/// Architecture logits over a candidate set, plus one op instance per
/// candidate. `slot` indexes the node in a sampled path.
#[derive(Clone, Debug)]
pub struct SearchNode {
    pub side: Side,
    pub slot: usize,
    pub alpha: ParamId,
    pub pooling: Pooling,
    pub ops: Vec<OpInstance>,
}

impl SearchNode {
    pub fn candidates(&self) -> Vec<OpKind> {
        self.ops.iter().map(|o| o.kind()).collect()
    }

    /// `Σ_o softmax(α)_o · o(H)`, or the sampled op alone when `ctx.path`
    /// selects one.
    pub fn mixed_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        ctx: &OpContext,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if let Some(path) = &ctx.path {
            let i = *path
                .get(self.slot)
                .ok_or_else(|| Error::Invalid(format!("sampled path has no entry for node {}", self.slot)))?;
            let op = self
                .ops
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sampled index {i} out of range for node {}", self.slot)))?;
            return op.apply(tape, h, ctx, rng);
        }
        let alpha = tape.param(self.alpha)?;
        let w = tape.softmax(alpha, 0)?;
        let mut outs = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            outs.push(op.apply(tape, h, ctx, rng)?);
        }
        tape.weighted_sum(w, &outs)
    }
}

/// The residual function of one split: pooling followed by a searched or
/// fixed operation.
#[derive(Clone, Debug)]
pub enum SplitOp {
    Searched(SearchNode),
    Fixed { op: OpInstance, pooling: Pooling },
}

impl SplitOp {
    pub fn node(&self) -> Option<&SearchNode> {
        match self {
            SplitOp::Searched(n) => Some(n),
            SplitOp::Fixed { .. } => None,
        }
    }

    pub fn theta_params(&self) -> Vec<ParamId> {
        match self {
            SplitOp::Searched(n) => n.ops.iter().flat_map(|o| o.params()).collect(),
            SplitOp::Fixed { op, .. } => op.params(),
        }
    }
}

impl<T: Scalar> SplitFunction<T> for SplitOp {
    fn eval(&self, tape: &mut Tape<'_, T>, inputs: &[Var], ctx: &OpContext, rng: &mut RngStream) -> Result<Var> {
        match self {
            SplitOp::Searched(node) => {
                let h = pool_inputs(tape, node.pooling, inputs)?;
                node.mixed_forward(tape, h, ctx, rng)
            }
            SplitOp::Fixed { op, pooling } => {
                let h = pool_inputs(tape, *pooling, inputs)?;
                op.apply(tape, h, ctx, rng)
            }
        }
    }
}

/// Registers a fresh logit vector for `side`.
pub fn new_alpha<T: Scalar>(store: &mut ParamStore<T>, name: String, side: Side, rng: &mut RngStream) -> ParamId {
    let k = OpKind::candidates(side).len();
    store.add(name, ParamGroup::Alpha, Tensor::randn(vec![k], ALPHA_INIT_STD, rng))
}

/// Builds a search node with a full candidate set sharing the logits `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn build_search_node<T: Scalar>(
    side: Side,
    slot: usize,
    alpha: ParamId,
    pooling: Pooling,
    width: usize,
    memory_width: usize,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut RngStream,
) -> Result<SearchNode> {
    let ops = build_op_set(side, width, memory_width, store, prefix, rng)?;
    Ok(SearchNode {
        side,
        slot,
        alpha,
        pooling,
        ops,
    })
}
