use std::rc::Rc;

use super::{OpKind, Side};
use crate::tensor::{AttentionSpec, Padding, ParamGroup, ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

pub const ATTENTION_HEADS: usize = 8;
/// Weight-sharing groups of the dynamic convolution.
pub const DYN_CONV_GROUPS: usize = 8;
pub const LN_EPS: f64 = 1e-5;

/// Per-call inputs shared by every op in a layer.
#[derive(Clone, Debug, Default)]
pub struct OpContext {
    /// Encoder output `[b, l_src, d_mem]` on the current tape.
    pub memory: Option<Var>,
    /// `[b × l_src]`, true for real (non-pad) source positions.
    pub memory_mask: Option<Rc<[bool]>>,
    /// `[b × l]` key mask for encoder self-attention.
    pub self_mask: Option<Rc<[bool]>>,
    /// Dropout probability applied to `o(H)`; ignored unless `train`.
    pub dropout: f64,
    pub train: bool,
    /// Single active candidate per search-node slot, when sampling one path.
    pub path: Option<Rc<[usize]>>,
}

#[derive(Clone, Debug)]
enum Weights {
    None,
    StdConv {
        depthwise: ParamId,
        pointwise: ParamId,
        bias: ParamId,
    },
    DynConv {
        proj: ParamId,
        width: usize,
    },
    Attention {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
    },
    Glu {
        w: ParamId,
        b: ParamId,
    },
    Ffn {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

/// One candidate operation with its own weights.
#[derive(Clone, Debug)]
pub struct OpInstance {
    kind: OpKind,
    width: usize,
    padding: Padding,
    causal: bool,
    weights: Weights,
    norm: Option<(ParamId, ParamId)>,
}

fn dense<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> ParamId {
    let std = (1.0 / fan_in as f64).sqrt();
    store.add(name, ParamGroup::Theta, Tensor::randn(vec![fan_in, fan_out], std, rng))
}

fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: String, n: usize) -> ParamId {
    store.add(name, ParamGroup::Theta, Tensor::zeros(vec![n]))
}

fn check_width(width: usize) -> Result<()> {
    if width < ATTENTION_HEADS || !width.is_multiple_of(ATTENTION_HEADS) {
        return Err(Error::Invalid(format!(
            "op width {width} must be a positive multiple of {ATTENTION_HEADS}"
        )));
    }
    Ok(())
}

impl OpInstance {
    /// Creates `kind` at `width` channels, registering its weights under
    /// `prefix`. Cross-attention keys and values are projected from
    /// `memory_width` channels.
    pub fn build<T: Scalar>(
        kind: OpKind,
        side: Side,
        width: usize,
        memory_width: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_width(width)?;
        if !kind.legal_for(side) {
            return Err(Error::Invalid(format!("{kind} is not available in the {side:?}")));
        }
        let c = width;
        let p = |s: &str| format!("{prefix}.{}.{s}", kind.tag());
        let weights = match kind {
            OpKind::StdConv3 | OpKind::StdConv5 | OpKind::StdConv7 | OpKind::StdConv11 => {
                let w = kind.conv_width().unwrap();
                let std = (1.0 / w as f64).sqrt();
                Weights::StdConv {
                    depthwise: store.add(p("depthwise"), ParamGroup::Theta, Tensor::randn(vec![w, c], std, rng)),
                    pointwise: dense(store, p("pointwise"), c, c, rng),
                    bias: zeros(store, p("bias"), c),
                }
            }
            OpKind::DynConv3 | OpKind::DynConv7 | OpKind::DynConv11 | OpKind::DynConv15 => {
                let w = kind.conv_width().unwrap();
                Weights::DynConv {
                    proj: dense(store, p("kernel_proj"), c, DYN_CONV_GROUPS * w, rng),
                    width: w,
                }
            }
            OpKind::SelfAttention | OpKind::CrossAttention => {
                let kv_in = if kind == OpKind::CrossAttention {
                    memory_width
                } else {
                    c
                };
                Weights::Attention {
                    wq: dense(store, p("wq"), c, c, rng),
                    wk: dense(store, p("wk"), kv_in, c, rng),
                    wv: dense(store, p("wv"), kv_in, c, rng),
                    wo: dense(store, p("wo"), c, c, rng),
                }
            }
            OpKind::Glu => Weights::Glu {
                w: dense(store, p("w"), c, 2 * c, rng),
                b: zeros(store, p("b"), 2 * c),
            },
            OpKind::Ffn => Weights::Ffn {
                w1: dense(store, p("w1"), c, 4 * c, rng),
                b1: zeros(store, p("b1"), 4 * c),
                w2: dense(store, p("w2"), 4 * c, c, rng),
                b2: zeros(store, p("b2"), c),
            },
            OpKind::Zero | OpKind::Identity => Weights::None,
        };
        let norm = kind.is_wrapped().then(|| {
            (
                store.add(p("ln_gain"), ParamGroup::Theta, Tensor::full(vec![c], T::one())),
                zeros(store, p("ln_bias"), c),
            )
        });
        Ok(Self {
            kind,
            width,
            padding: match side {
                Side::Encoder => Padding::Symmetric,
                Side::Decoder => Padding::Causal,
            },
            causal: side == Side::Decoder,
            weights,
            norm,
        })
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Every parameter owned by this instance.
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = match &self.weights {
            Weights::None => vec![],
            Weights::StdConv {
                depthwise,
                pointwise,
                bias,
            } => vec![*depthwise, *pointwise, *bias],
            Weights::DynConv { proj, .. } => vec![*proj],
            Weights::Attention { wq, wk, wv, wo } => vec![*wq, *wk, *wv, *wo],
            Weights::Glu { w, b } => vec![*w, *b],
            Weights::Ffn { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
        };
        if let Some((g, b)) = self.norm {
            v.extend([g, b]);
        }
        v
    }

    /// Applies the op to `h [b, l, width]` on `tape`.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        ctx: &OpContext,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::shape(
                "apply_op",
                format!("{} expects [b, l, {}], got {shape:?}", self.kind, self.width),
            ));
        }
        let out = match self.kind {
            OpKind::Zero => return tape.constant(Tensor::zeros(shape)),
            OpKind::Identity => return Ok(h),
            _ => {
                let o = self.inner(tape, h, ctx)?;
                let o = if ctx.train && ctx.dropout > 0.0 {
                    tape.dropout(o, ctx.dropout, rng)?
                } else {
                    o
                };
                let r = tape.add(h, o)?;
                let (g, b) = self.norm.expect("wrapped ops carry a norm");
                let (g, b) = (tape.param(g)?, tape.param(b)?);
                tape.layer_norm(r, g, b, LN_EPS)?
            }
        };
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite(format!("output of {}", self.kind)));
        }
        Ok(out)
    }

    /// `o(H)` without the wrapper.
    fn inner<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var, ctx: &OpContext) -> Result<Var> {
        match &self.weights {
            Weights::StdConv {
                depthwise,
                pointwise,
                bias,
            } => {
                let dw = tape.param(*depthwise)?;
                let x = tape.conv1d(h, dw, self.padding)?;
                let pw = tape.param(*pointwise)?;
                let x = tape.matmul(x, pw, false)?;
                let b = tape.param(*bias)?;
                tape.add_bias(x, b)
            }
            Weights::DynConv { proj, width } => {
                let s = tape.shape(h).to_vec();
                let p = tape.param(*proj)?;
                let logits = tape.matmul(h, p, false)?;
                let logits = tape.reshape(logits, &[s[0], s[1], DYN_CONV_GROUPS, *width])?;
                let k = tape.softmax(logits, 3)?;
                tape.dyn_conv(h, k, self.padding)
            }
            Weights::Attention { wq, wk, wv, wo } => {
                let (src, spec) = if self.kind == OpKind::CrossAttention {
                    let m = ctx.memory.ok_or(Error::MissingMemory)?;
                    let spec = AttentionSpec {
                        heads: ATTENTION_HEADS,
                        causal: false,
                        key_mask: ctx.memory_mask.clone(),
                    };
                    (m, spec)
                } else {
                    let spec = AttentionSpec {
                        heads: ATTENTION_HEADS,
                        causal: self.causal,
                        key_mask: if self.causal { None } else { ctx.self_mask.clone() },
                    };
                    (h, spec)
                };
                let q = tape.param(*wq)?;
                let q = tape.matmul(h, q, false)?;
                let k = tape.param(*wk)?;
                let k = tape.matmul(src, k, false)?;
                let v = tape.param(*wv)?;
                let v = tape.matmul(src, v, false)?;
                let a = tape.attention(q, k, v, &spec)?;
                let o = tape.param(*wo)?;
                tape.matmul(a, o, false)
            }
            Weights::Glu { w, b } => {
                let w = tape.param(*w)?;
                let x = tape.matmul(h, w, false)?;
                let b = tape.param(*b)?;
                let x = tape.add_bias(x, b)?;
                let halves = tape.split(x, 2, 2)?;
                let gate = tape.sigmoid(halves[1])?;
                tape.mul(halves[0], gate)
            }
            Weights::Ffn { w1, b1, w2, b2 } => {
                let w1 = tape.param(*w1)?;
                let x = tape.matmul(h, w1, false)?;
                let b1 = tape.param(*b1)?;
                let x = tape.add_bias(x, b1)?;
                let x = tape.relu(x)?;
                let w2 = tape.param(*w2)?;
                let x = tape.matmul(x, w2, false)?;
                let b2 = tape.param(*b2)?;
                tape.add_bias(x, b2)
            }
            Weights::None => unreachable!("unwrapped ops have no inner path"),
        }
    }
}

/// Builds every candidate legal for `side`, in canonical order.
pub fn build_op_set<T: Scalar>(
    side: Side,
    width: usize,
    memory_width: usize,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut RngStream,
) -> Result<Vec<OpInstance>> {
    check_width(width)?;
    OpKind::candidates(side)
        .into_iter()
        .map(|k| OpInstance::build(k, side, width, memory_width, store, prefix, rng))
        .collect()
}
