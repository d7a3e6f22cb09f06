use super::layer::{LayerContext, LayerGrad, ReversibleLayer, RngLog, SplitFunction};
use crate::ops::OpContext;
use crate::profiler::ledger::{self, Retained};
use crate::tensor::{Gradients, ParamStore, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Default reconstruction drift guard.
pub const DRIFT_THRESHOLD: f64 = 1e-3;

/// A sequence of reversible layers.
#[derive(Clone, Debug)]
pub struct ReversibleStack<G> {
    name: String,
    layers: Vec<ReversibleLayer<G>>,
}

/// What a reversible forward leaves behind for the backward pass.
#[derive(Debug)]
pub struct StackState<T: Scalar> {
    pub stored_input: Retained<T>,
    pub stored_output: Retained<T>,
    pub rng_logs: Vec<RngLog>,
    /// Uncharged copies of every layer input, kept only when the drift guard
    /// is enabled.
    shadow: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> StackState<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.stored_output
    }

    pub fn has_shadow(&self) -> bool {
        self.shadow.is_some()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Keep shadow inputs and check reconstruction against them.
    pub drift_guard: Option<f64>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            drift_guard: cfg!(debug_assertions).then_some(DRIFT_THRESHOLD),
        }
    }
}

impl ForwardOptions {
    pub fn unguarded() -> Self {
        Self { drift_guard: None }
    }
}

impl<G> ReversibleStack<G> {
    pub fn new(name: impl Into<String>, layers: Vec<ReversibleLayer<G>>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[ReversibleLayer<G>] {
        &self.layers
    }

    /// Draws one seed per `G_k` of every layer.
    pub fn draw_logs(&self, rng: &mut RngStream) -> Vec<RngLog> {
        self.layers.iter().map(|l| RngLog::draw(l.n(), rng)).collect()
    }

    /// Reversible forward. Only the input and the last output stay charged
    /// to the activation ledger.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: Tensor<T>,
        ctx: &LayerContext<'_, T>,
        rng_logs: Vec<RngLog>,
        opts: ForwardOptions,
    ) -> Result<StackState<T>>
    where
        G: SplitFunction<T>,
    {
        if rng_logs.len() != self.layers.len() {
            return Err(Error::MissingRngLog {
                expected: self.layers.len(),
                found: rng_logs.len(),
            });
        }
        let mut shadow = opts.drift_guard.map(|_| Vec::with_capacity(self.layers.len()));
        let stored_input = {
            let _s = ledger::scope(&format!("{}.input", self.name));
            Retained::new(x)?
        };
        let mut cur: Option<Tensor<T>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let _s = ledger::scope(&format!("{}.layer{i}", self.name));
            let input = cur.as_ref().unwrap_or(stored_input.tensor());
            if let Some(sh) = &mut shadow {
                sh.push(input.clone());
            }
            cur = Some(layer.forward(params, input, ctx, &rng_logs[i])?);
        }
        let out = cur.unwrap_or_else(|| stored_input.tensor().clone());
        let stored_output = {
            let _s = ledger::scope(&format!("{}.output", self.name));
            Retained::new(out)?
        };
        Ok(StackState {
            stored_input,
            stored_output,
            rng_logs,
            shadow,
        })
    }

    /// Applies backward-with-reconstruction top-down, returning the gradient
    /// with respect to the stack input and the reconstructed input.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        state: &StackState<T>,
        d_out: &Tensor<T>,
        ctx: &LayerContext<'_, T>,
        grads: &mut Gradients<T>,
        mut d_memory: Option<&mut Tensor<T>>,
        drift_guard: Option<f64>,
    ) -> Result<LayerGrad<T>>
    where
        G: SplitFunction<T>,
    {
        if d_out.shape() != state.stored_output.shape() {
            return Err(Error::shape(
                "stack_backward",
                format!("dOut {:?} vs output {:?}", d_out.shape(), state.stored_output.shape()),
            ));
        }
        let mut y = Retained::new(state.stored_output.tensor().clone())?;
        let mut dy = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let _s = ledger::scope(&format!("{}.backward", self.name));
            let lg = layer.backward(params, &y, &dy, ctx, &state.rng_logs[i], grads, d_memory.as_deref_mut())?;
            if let (Some(th), Some(sh)) = (drift_guard, &state.shadow) {
                let drift = lg.x.max_abs_diff(&sh[i]);
                if drift > th {
                    return Err(Error::Drift {
                        layer: i,
                        drift,
                        threshold: th,
                    });
                }
            }
            y = Retained::new(lg.x)?;
            dy = lg.dx;
        }
        Ok(LayerGrad {
            dx: dy,
            x: y.tensor().clone(),
        })
    }

    /// Stored-activation forward on a caller's tape.
    pub fn forward_taped<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        ctx: &OpContext,
        rng_logs: &[RngLog],
    ) -> Result<Var>
    where
        G: SplitFunction<T>,
    {
        if rng_logs.len() != self.layers.len() {
            return Err(Error::MissingRngLog {
                expected: self.layers.len(),
                found: rng_logs.len(),
            });
        }
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let _s = ledger::scope(&format!("{}.layer{i}", self.name));
            cur = layer.forward_taped(tape, cur, ctx, &rng_logs[i])?;
        }
        Ok(cur)
    }
}
