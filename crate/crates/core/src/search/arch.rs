use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::node::Pooling;
use super::supernet::Seq2Seq;
use crate::ops::{OpKind, Side};
use crate::tensor::Scalar;
use crate::{Error, Result};

pub const ARCH_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDims {
    pub d: usize,
    pub e: usize,
    pub m: usize,
    pub n: usize,
    pub s: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderChoices {
    /// `s × n` grid.
    pub searched: Vec<Vec<OpKind>>,
    pub fixed_last_split: OpKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub pooling: Option<Pooling>,
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Discretized search result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub version: u64,
    pub dims: ArchDims,
    /// `s × m` grid.
    pub encoder: Vec<Vec<OpKind>>,
    pub decoder: DecoderChoices,
    #[serde(default)]
    pub provenance: Provenance,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_lowest(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate().skip(1) {
        if a > alpha[best] {
            best = i;
        }
    }
    best
}

impl Architecture {
    /// Builds from one chosen candidate index per slot (`s × m` encoder
    /// slots then `s × n` decoder slots).
    pub fn from_slot_choices(dims: ArchDims, choices: &[usize], provenance: Provenance) -> Result<Self> {
        let (s, m, n) = (dims.s, dims.m, dims.n);
        if choices.len() != s * (m + n) {
            return Err(Error::Invalid(format!(
                "{} choices for {} slots",
                choices.len(),
                s * (m + n)
            )));
        }
        let enc = OpKind::candidates(Side::Encoder);
        let dec = OpKind::candidates(Side::Decoder);
        let pick = |c: &[OpKind], i: usize| -> Result<OpKind> {
            c.get(i)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("candidate index {i} out of range")))
        };
        let encoder = (0..s)
            .map(|j| (0..m).map(|k| pick(&enc, choices[j * m + k])).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let searched = (0..s)
            .map(|j| (0..n).map(|k| pick(&dec, choices[s * m + j * n + k])).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Self {
            version: ARCH_VERSION,
            dims,
            encoder,
            decoder: DecoderChoices {
                searched,
                fixed_last_split: OpKind::CrossAttention,
            },
            provenance,
        })
    }

    /// Argmax of every slot's logits (`alphas` in slot order).
    pub fn from_alphas(dims: ArchDims, alphas: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let (s, m) = (dims.s, dims.m);
        for (slot, a) in alphas.iter().enumerate() {
            let side = if slot < s * m { Side::Encoder } else { Side::Decoder };
            let want = OpKind::candidates(side).len();
            if a.len() != want {
                return Err(Error::schema(
                    format!("alpha[{slot}]"),
                    format!("{} logits, expected {want}", a.len()),
                ));
            }
        }
        let choices: Vec<usize> = alphas.iter().map(|a| argmax_lowest(a)).collect();
        Self::from_slot_choices(dims, &choices, provenance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ARCH_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: ARCH_VERSION,
            });
        }
        let ArchDims { s, m, n, .. } = self.dims;
        let grid = |g: &Vec<Vec<OpKind>>, rows: usize, cols: usize, field: &str| -> Result<()> {
            if g.len() != rows || g.iter().any(|r| r.len() != cols) {
                return Err(Error::schema(field, format!("expected a {rows} × {cols} grid")));
            }
            Ok(())
        };
        grid(&self.encoder, s, m, "encoder")?;
        grid(&self.decoder.searched, s, n, "decoder.searched")?;
        if let Some(k) = self.encoder.iter().flatten().find(|k| !k.legal_for(Side::Encoder)) {
            return Err(Error::schema("encoder", format!("{k} is not available in the encoder")));
        }
        if self.decoder.fixed_last_split != OpKind::CrossAttention {
            return Err(Error::schema(
                "decoder.fixed_last_split",
                format!("must be cross_attn, got {}", self.decoder.fixed_last_split),
            ));
        }
        Ok(())
    }

    /// Layers in which every split is `zero`, so the layer is an identity.
    pub fn degenerate_layers(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, row) in self.encoder.iter().enumerate() {
            if row.iter().all(|&k| k == OpKind::Zero) {
                out.push(format!("encoder[{j}]"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("architecture serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::schema("arch.json", e.to_string()))?;
        match raw.get("version").and_then(Value::as_u64) {
            Some(ARCH_VERSION) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v,
                    expected: ARCH_VERSION,
                })
            }
            None => return Err(Error::schema("version", "missing or not an integer")),
        }
        let arch: Architecture = serde_json::from_value(raw).map_err(|e| {
            let msg = e.to_string();
            match msg.split('`').nth(1) {
                Some(tag) if msg.starts_with("unknown operation tag") => Error::UnknownTag(tag.to_string()),
                _ => Error::schema("arch.json", msg),
            }
        })?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Per-slot argmax of a supernet's logits.
pub fn discretize<T: Scalar>(net: &Seq2Seq<T>, provenance: Provenance) -> Result<Architecture> {
    if !net.is_supernet() {
        return Err(Error::Invalid("discretize needs a supernet".into()));
    }
    let alphas: Vec<Vec<f64>> = (0..net.alphas.len()).map(|i| net.alpha_values(i)).collect();
    let d = &net.dims;
    Architecture::from_alphas(
        ArchDims {
            d: d.d,
            e: d.e,
            m: d.m,
            n: d.n,
            s: d.s,
        },
        &alphas,
        provenance,
    )
}
