use crate::ops::OpContext;
use crate::profiler::ledger::{self, EvalPhase};
use crate::tensor::{Gradients, ParamStore, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// A residual function `G_k` of one split.
///
/// `inputs` holds `X_{k+1}, …, X_n` followed by `Y_1, …, Y_{k-1}`, each
/// `[b, l, d/n]`. The result must have the same shape as one split.
pub trait SplitFunction<T: Scalar> {
    fn eval(&self, tape: &mut Tape<'_, T>, inputs: &[Var], ctx: &OpContext, rng: &mut RngStream) -> Result<Var>;
}

/// `G(inputs) = Σ_i coeffs[i] · inputs[i]`, a parameter-free linear split.
#[derive(Clone, Debug)]
pub struct LinearSplit {
    pub coeffs: Vec<f64>,
}

impl<T: Scalar> SplitFunction<T> for LinearSplit {
    fn eval(&self, tape: &mut Tape<'_, T>, inputs: &[Var], _: &OpContext, _: &mut RngStream) -> Result<Var> {
        if inputs.len() != self.coeffs.len() {
            return Err(Error::shape(
                "linear_split",
                format!("{} coefficients for {} inputs", self.coeffs.len(), inputs.len()),
            ));
        }
        let mut acc = tape.scale(inputs[0], self.coeffs[0])?;
        for (&x, &c) in inputs.iter().zip(&self.coeffs).skip(1) {
            let t = tape.scale(x, c)?;
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    }
}

/// Seeds drawn for each `G_k` of one layer at forward time.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RngLog {
    pub seeds: Vec<u64>,
}

impl RngLog {
    pub fn draw(n: usize, rng: &mut RngStream) -> Self {
        Self {
            seeds: (0..n).map(|_| rng.next_u64()).collect(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.seeds.len() != n {
            return Err(Error::MissingRngLog {
                expected: n,
                found: self.seeds.len(),
            });
        }
        Ok(())
    }
}

/// Encoder memory and op settings for a reversible pass. The memory is
/// attached to every `G_k` tape as an external constant.
#[derive(Clone, Debug, Default)]
pub struct LayerContext<'m, T> {
    pub memory: Option<&'m Tensor<T>>,
    pub ops: OpContext,
}

impl<T> LayerContext<'_, T> {
    pub fn plain(ops: OpContext) -> Self {
        Self { memory: None, ops }
    }
}

/// Result of backpropagating through one layer.
#[derive(Debug)]
pub struct LayerGrad<T> {
    /// Gradient with respect to the layer input, `Concat(dX_1..dX_n)`.
    pub dx: Tensor<T>,
    /// The reconstructed layer input.
    pub x: Tensor<T>,
}

/// An `n`-split layer `Y_k = X_k + G_k(X_{i>k}, Y_{i<k})`.
#[derive(Clone, Debug)]
pub struct ReversibleLayer<G> {
    splits: Vec<G>,
}

fn split_count_ok<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<()> {
    if x.rank() != 3 || !x.shape()[2].is_multiple_of(n) {
        return Err(Error::shape(
            "reversible_layer",
            format!("input {:?} cannot be split into {n} channel groups", x.shape()),
        ));
    }
    Ok(())
}

impl<G> ReversibleLayer<G> {
    pub fn new(splits: Vec<G>) -> Result<Self> {
        if splits.len() < 2 {
            return Err(Error::Invalid(format!(
                "a reversible layer needs at least 2 splits, got {}",
                splits.len()
            )));
        }
        Ok(Self { splits })
    }

    pub fn n(&self) -> usize {
        self.splits.len()
    }

    pub fn splits(&self) -> &[G] {
        &self.splits
    }
}

impl<G> ReversibleLayer<G> {
    /// Evaluates `G_k` on a throwaway evaluation tape.
    #[allow(clippy::too_many_arguments)]
    fn eval_detached<T: Scalar>(
        &self,
        k: usize,
        params: &ParamStore<T>,
        later_x: &[&Tensor<T>],
        earlier_y: &[&Tensor<T>],
        ctx: &LayerContext<'_, T>,
        seed: u64,
        phase: EvalPhase,
    ) -> Result<Tensor<T>>
    where
        G: SplitFunction<T>,
    {
        let mut tape = Tape::no_grad(params);
        let mut inputs = Vec::with_capacity(later_x.len() + earlier_y.len());
        for &t in later_x.iter().chain(earlier_y) {
            inputs.push(tape.leaf_ref(t, false)?);
        }
        let mut ops = ctx.ops.clone();
        if let Some(m) = ctx.memory {
            ops.memory = Some(tape.leaf_ref(m, false)?);
        }
        let mut rng = RngStream::new(seed);
        let g = self.splits[k].eval(&mut tape, &inputs, &ops, &mut rng)?;
        ledger::record_eval(phase);
        let want = later_x.first().or(earlier_y.first()).map(|t| t.shape());
        if Some(tape.shape(g)) != want {
            return Err(Error::shape(
                "reversible_layer",
                format!(
                    "G_{} returned {:?}, expected {:?}",
                    k + 1,
                    tape.shape(g),
                    want.unwrap_or(&[])
                ),
            ));
        }
        Ok(tape.value(g).clone())
    }

    /// `Concat(Y_1..Y_n)` computed in order `k = 1..n`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        ctx: &LayerContext<'_, T>,
        log: &RngLog,
    ) -> Result<Tensor<T>>
    where
        G: SplitFunction<T>,
    {
        let n = self.n();
        split_count_ok(x, n)?;
        log.check(n)?;
        let xs = x.split(2, n)?;
        let mut ys: Vec<Tensor<T>> = Vec::with_capacity(n);
        for k in 0..n {
            let later: Vec<&Tensor<T>> = xs[k + 1..].iter().collect();
            let earlier: Vec<&Tensor<T>> = ys.iter().collect();
            let g = self.eval_detached(k, params, &later, &earlier, ctx, log.seeds[k], EvalPhase::Forward)?;
            ys.push(xs[k].add(&g)?);
        }
        Tensor::concat(&ys.iter().collect::<Vec<_>>(), 2)
    }

    /// Recovers `X` from `Y` in order `k = n..1`.
    pub fn inverse<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        y: &Tensor<T>,
        ctx: &LayerContext<'_, T>,
        log: &RngLog,
    ) -> Result<Tensor<T>>
    where
        G: SplitFunction<T>,
    {
        let n = self.n();
        split_count_ok(y, n)?;
        log.check(n)?;
        let ys = y.split(2, n)?;
        let mut xs: Vec<Option<Tensor<T>>> = vec![None; n];
        for k in (0..n).rev() {
            let later: Vec<&Tensor<T>> = xs[k + 1..].iter().map(|t| t.as_ref().unwrap()).collect();
            let earlier: Vec<&Tensor<T>> = ys[..k].iter().collect();
            let g = self.eval_detached(k, params, &later, &earlier, ctx, log.seeds[k], EvalPhase::Inverse)?;
            xs[k] = Some(ys[k].sub(&g)?);
        }
        let xs: Vec<Tensor<T>> = xs.into_iter().map(Option::unwrap).collect();
        Tensor::concat(&xs.iter().collect::<Vec<_>>(), 2)
    }

    /// Backpropagation with reconstruction through one layer.
    ///
    /// Parameter gradients are accumulated into `grads`; when `d_memory` is
    /// given, gradients reaching the encoder memory are added to it.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        ctx: &LayerContext<'_, T>,
        log: &RngLog,
        grads: &mut Gradients<T>,
        mut d_memory: Option<&mut Tensor<T>>,
    ) -> Result<LayerGrad<T>>
    where
        G: SplitFunction<T>,
    {
        let n = self.n();
        split_count_ok(y, n)?;
        log.check(n)?;
        if y.shape() != dy.shape() {
            return Err(Error::shape(
                "backward",
                format!("Y {:?} vs dY {:?}", y.shape(), dy.shape()),
            ));
        }
        let ys = y.split(2, n)?;
        // grad_k, seeded with dY_k and topped up by later splits' G backward
        let mut grad_y = dy.split(2, n)?;
        let mut grad_x: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut xs: Vec<Option<Tensor<T>>> = vec![None; n];

        for k in (0..n).rev() {
            if !grad_y[k].is_finite() {
                return Err(Error::NonFinite(format!("grad_{} of reversible layer", k + 1)));
            }
            let g_value;
            {
                let mut tape = Tape::with_params(params);
                let mut inputs = Vec::with_capacity(n - 1);
                for t in xs[k + 1..].iter() {
                    inputs.push(tape.leaf_ref(t.as_ref().unwrap(), true)?);
                }
                for t in ys[..k].iter() {
                    inputs.push(tape.leaf_ref(t, true)?);
                }
                let mut ops = ctx.ops.clone();
                let mem = match ctx.memory {
                    Some(m) => {
                        let v = tape.leaf_ref(m, d_memory.is_some())?;
                        ops.memory = Some(v);
                        Some(v)
                    }
                    None => None,
                };
                let mut rng = RngStream::new(log.seeds[k]);
                let g = self.splits[k].eval(&mut tape, &inputs, &ops, &mut rng)?;
                ledger::record_eval(EvalPhase::Recompute);
                if tape.shape(g) != ys[k].shape() {
                    return Err(Error::shape(
                        "reversible_layer",
                        format!("G_{} returned {:?}, expected {:?}", k + 1, tape.shape(g), ys[k].shape()),
                    ));
                }
                tape.backward_from(g, &grad_y[k])?;
                for (j, &v) in inputs.iter().enumerate() {
                    let Some(gr) = tape.grad(v) else { continue };
                    if j < n - 1 - k {
                        let idx = k + 1 + j;
                        match &mut grad_x[idx] {
                            Some(acc) => acc.add_assign(gr)?,
                            slot @ None => *slot = Some(gr.clone()),
                        }
                    } else {
                        let idx = j - (n - 1 - k);
                        grad_y[idx].add_assign(gr)?;
                    }
                }
                if let (Some(v), Some(dm)) = (mem, d_memory.as_deref_mut()) {
                    if let Some(gr) = tape.grad(v) {
                        dm.add_assign(gr)?;
                    }
                }
                tape.drain_param_grads(grads)?;
                g_value = tape.value(g).clone();
            }
            xs[k] = Some(ys[k].sub(&g_value)?);
        }

        let mut dxs = Vec::with_capacity(n);
        for k in 0..n {
            let mut d = grad_y[k].clone();
            if let Some(gx) = &grad_x[k] {
                d.add_assign(gx)?;
            }
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("dX_{} of reversible layer", k + 1)));
            }
            dxs.push(d);
        }
        let xs: Vec<Tensor<T>> = xs.into_iter().map(Option::unwrap).collect();
        Ok(LayerGrad {
            dx: Tensor::concat(&dxs.iter().collect::<Vec<_>>(), 2)?,
            x: Tensor::concat(&xs.iter().collect::<Vec<_>>(), 2)?,
        })
    }

    /// Forward on a caller's tape, keeping every intermediate. Used as the
    /// stored-activation backbone and as the gradient oracle.
    pub fn forward_taped<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, ctx: &OpContext, log: &RngLog) -> Result<Var>
    where
        G: SplitFunction<T>,
    {
        let n = self.n();
        log.check(n)?;
        let xs = tape.split(x, 2, n)?;
        let mut ys: Vec<Var> = Vec::with_capacity(n);
        for k in 0..n {
            let mut inputs: Vec<Var> = xs[k + 1..].to_vec();
            inputs.extend(&ys);
            let mut rng = RngStream::new(log.seeds[k]);
            let g = self.splits[k].eval(tape, &inputs, ctx, &mut rng)?;
            ledger::record_eval(EvalPhase::Forward);
            if tape.shape(g) != tape.shape(xs[k]) {
                return Err(Error::shape(
                    "reversible_layer",
                    format!(
                        "G_{} returned {:?}, expected {:?}",
                        k + 1,
                        tape.shape(g),
                        tape.shape(xs[k])
                    ),
                ));
            }
            ys.push(tape.add(xs[k], g)?);
        }
        tape.concat(&ys, 2)
    }
}
