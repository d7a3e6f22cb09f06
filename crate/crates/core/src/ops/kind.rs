use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Which half of the seq2seq network an operation lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

/// A candidate operation. Declaration order is the canonical tag order used
/// for tie-breaking and for indexing architecture logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    StdConv3,
    StdConv5,
    StdConv7,
    StdConv11,
    DynConv3,
    DynConv7,
    DynConv11,
    DynConv15,
    SelfAttention,
    CrossAttention,
    Glu,
    Ffn,
    Zero,
    Identity,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::StdConv3,
        OpKind::StdConv5,
        OpKind::StdConv7,
        OpKind::StdConv11,
        OpKind::DynConv3,
        OpKind::DynConv7,
        OpKind::DynConv11,
        OpKind::DynConv15,
        OpKind::SelfAttention,
        OpKind::CrossAttention,
        OpKind::Glu,
        OpKind::Ffn,
        OpKind::Zero,
        OpKind::Identity,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::StdConv3 => "std_conv_3",
            OpKind::StdConv5 => "std_conv_5",
            OpKind::StdConv7 => "std_conv_7",
            OpKind::StdConv11 => "std_conv_11",
            OpKind::DynConv3 => "dyn_conv_3",
            OpKind::DynConv7 => "dyn_conv_7",
            OpKind::DynConv11 => "dyn_conv_11",
            OpKind::DynConv15 => "dyn_conv_15",
            OpKind::SelfAttention => "self_attn",
            OpKind::CrossAttention => "cross_attn",
            OpKind::Glu => "glu",
            OpKind::Ffn => "ffn",
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
        }
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Candidate set for one side, in canonical order.
    pub fn candidates(side: Side) -> Vec<OpKind> {
        Self::ALL.into_iter().filter(|k| k.legal_for(side)).collect()
    }

    pub fn legal_for(self, side: Side) -> bool {
        side == Side::Decoder || self != OpKind::CrossAttention
    }

    /// Whether the op is wrapped as `LayerNorm(H + dropout(o(H)))`.
    pub fn is_wrapped(self) -> bool {
        !matches!(self, OpKind::Zero | OpKind::Identity)
    }

    pub fn conv_width(self) -> Option<usize> {
        match self {
            OpKind::StdConv3 | OpKind::DynConv3 => Some(3),
            OpKind::StdConv5 => Some(5),
            OpKind::StdConv7 | OpKind::DynConv7 => Some(7),
            OpKind::StdConv11 | OpKind::DynConv11 => Some(11),
            OpKind::DynConv15 => Some(15),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::UnknownTag(s.to_string()))
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_counts() {
        assert_eq!(OpKind::candidates(Side::Encoder).len(), 13);
        assert_eq!(OpKind::candidates(Side::Decoder).len(), 14);
        assert!(!OpKind::candidates(Side::Encoder).contains(&OpKind::CrossAttention));
    }

    #[test]
    fn tags_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.tag().parse::<OpKind>().unwrap(), k);
            assert_eq!(OpKind::ALL[k.index()], k);
        }
        assert!(matches!("conv_9".parse::<OpKind>(), Err(Error::UnknownTag(t)) if t == "conv_9"));
    }
}
