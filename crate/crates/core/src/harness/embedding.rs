use std::rc::Rc;

use crate::ops::LN_EPS;
use crate::tensor::{ParamGroup, ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Vocabulary embedding factorized as `[V × e] · [e × d]`, plus learned
/// positions. The output projection is tied to the same two factors.
#[derive(Clone, Debug)]
pub struct FactorizedEmbedding {
    pub vocab: usize,
    pub e: usize,
    pub d: usize,
    pub max_positions: usize,
    pub vocab_to_e: ParamId,
    pub e_to_d: ParamId,
    pub positions: ParamId,
    pub out_gain: ParamId,
    pub out_bias: ParamId,
}

impl FactorizedEmbedding {
    pub fn new<T: Scalar>(
        vocab: usize,
        e: usize,
        d: usize,
        max_positions: usize,
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if e >= d {
            return Err(Error::Invalid(format!(
                "factorized embedding needs e < d, got e = {e}, d = {d}"
            )));
        }
        Ok(Self {
            vocab,
            e,
            d,
            max_positions,
            vocab_to_e: store.add(
                "embed.vocab_to_e",
                ParamGroup::Theta,
                Tensor::randn(vec![vocab, e], 1.0, rng),
            ),
            e_to_d: store.add(
                "embed.e_to_d",
                ParamGroup::Theta,
                Tensor::randn(vec![e, d], (1.0 / e as f64).sqrt(), rng),
            ),
            positions: store.add(
                "embed.positions",
                ParamGroup::Theta,
                Tensor::randn(vec![max_positions, d], 0.1, rng),
            ),
            out_gain: store.add("head.ln_gain", ParamGroup::Theta, Tensor::full(vec![d], T::one())),
            out_bias: store.add("head.ln_bias", ParamGroup::Theta, Tensor::zeros(vec![d])),
        })
    }

    pub fn param_count(&self) -> usize {
        self.vocab * self.e + self.e * self.d
    }

    /// `ids [b × l]` to `[b, l, d]`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: Rc<[usize]>, b: usize, l: usize) -> Result<Var> {
        if l > self.max_positions {
            return Err(Error::Invalid(format!(
                "sequence length {l} exceeds {} learned positions",
                self.max_positions
            )));
        }
        let table = tape.param(self.vocab_to_e)?;
        let x = tape.embedding(table, ids, &[b, l])?;
        let proj = tape.param(self.e_to_d)?;
        let x = tape.matmul(x, proj, false)?;
        let pos_ids: Rc<[usize]> = (0..b).flat_map(|_| 0..l).collect();
        let ptable = tape.param(self.positions)?;
        let p = tape.embedding(ptable, pos_ids, &[b, l])?;
        tape.add(x, p)
    }

    /// Tied output projection `LN(Y) · E2ᵀ · E1ᵀ / √d`, giving `[b, l, V]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        let g = tape.param(self.out_gain)?;
        let b = tape.param(self.out_bias)?;
        let h = tape.layer_norm(y, g, b, LN_EPS)?;
        let e2 = tape.param(self.e_to_d)?;
        let h = tape.matmul(h, e2, true)?;
        let e1 = tape.param(self.vocab_to_e)?;
        let h = tape.matmul(h, e1, true)?;
        tape.scale(h, 1.0 / (self.d as f64).sqrt())
    }
}
