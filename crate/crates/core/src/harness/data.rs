use std::collections::HashSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::RngStream;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id that can appear in generated content.
pub const FIRST_SYMBOL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
}

impl Task {
    /// Target content (without markers) for `src`.
    pub fn target(self, src: &[usize]) -> Vec<usize> {
        match self {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardSizes {
    pub theta_train: usize,
    pub alpha_val: usize,
    pub retrain_train: usize,
    pub retrain_val: usize,
    pub test: usize,
}

impl Default for ShardSizes {
    fn default() -> Self {
        Self {
            theta_train: 4000,
            alpha_val: 2000,
            retrain_train: 4000,
            retrain_val: 500,
            test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub task: Task,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub shards: ShardSizes,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            vocab: 64,
            min_len: 4,
            max_len: 24,
            shards: ShardSizes::default(),
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_SYMBOL {
            return Err(Error::schema(
                "data.vocab",
                format!("needs more than {FIRST_SYMBOL} entries (pad, bos, eos, unk are reserved)"),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::schema(
                "data.min_len",
                format!("length range [{}, {}] is empty", self.min_len, self.max_len),
            ));
        }
        Ok(())
    }
}

/// One source/target pair; `tgt` already ends with [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardKind {
    ThetaTrain,
    AlphaVal,
    RetrainTrain,
    RetrainVal,
    Test,
}

impl ShardKind {
    pub const ALL: [ShardKind; 5] = [
        ShardKind::ThetaTrain,
        ShardKind::AlphaVal,
        ShardKind::RetrainTrain,
        ShardKind::RetrainVal,
        ShardKind::Test,
    ];

    fn size(self, s: &ShardSizes) -> usize {
        match self {
            ShardKind::ThetaTrain => s.theta_train,
            ShardKind::AlphaVal => s.alpha_val,
            ShardKind::RetrainTrain => s.retrain_train,
            ShardKind::RetrainVal => s.retrain_val,
            ShardKind::Test => s.test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: DataSpec,
    shards: Vec<Vec<Example>>,
}

/// Generates every shard. Each shard draws from its own sub-stream of `seed`
/// and no source sequence appears in more than one shard.
pub fn generate_dataset(spec: &DataSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let symbols = spec.vocab - FIRST_SYMBOL;
    let space: f64 = (spec.min_len..=spec.max_len)
        .map(|l| (symbols as f64).powi(l as i32))
        .sum();
    let total: usize = ShardKind::ALL.iter().map(|k| k.size(&spec.shards)).sum();
    if (total as f64) > space / 2.0 {
        return Err(Error::schema(
            "data.shards",
            format!("{total} distinct sequences requested from a space of {space}"),
        ));
    }
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut shards = Vec::with_capacity(ShardKind::ALL.len());
    for (i, kind) in ShardKind::ALL.iter().enumerate() {
        let mut rng = RngStream::substream(seed, i as u64 + 1);
        let n = kind.size(&spec.shards);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let len = rng.range_inclusive(spec.min_len, spec.max_len);
            let src: Vec<usize> = (0..len).map(|_| FIRST_SYMBOL + rng.below(symbols)).collect();
            if !seen.insert(src.clone()) {
                continue;
            }
            let mut tgt = spec.task.target(&src);
            tgt.push(EOS);
            out.push(Example { src, tgt });
        }
        shards.push(out);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        shards,
    })
}

impl SyntheticDataset {
    pub fn shard(&self, kind: ShardKind) -> &[Example] {
        let i = ShardKind::ALL.iter().position(|&k| k == kind).unwrap();
        &self.shards[i]
    }

    /// Random batch of `size` examples (with replacement) from `kind`.
    pub fn sample_batch(&self, kind: ShardKind, size: usize, rng: &mut RngStream) -> Batch {
        let shard = self.shard(kind);
        let picked: Vec<&Example> = (0..size).map(|_| &shard[rng.below(shard.len())]).collect();
        Batch::from_examples(&picked)
    }
}

/// Padded integer matrices for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[size × src_len]`
    pub src: Rc<[usize]>,
    /// `[size × tgt_len]`, begins with [`BOS`].
    pub tgt_in: Rc<[usize]>,
    /// `[size × tgt_len]`, ends with [`EOS`] then [`PAD`].
    pub tgt_out: Rc<[usize]>,
    /// `[size × src_len]`, true at real source tokens.
    pub src_mask: Rc<[bool]>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.src.len()).max().unwrap_or(1).max(1);
        let tgt_len = examples.iter().map(|e| e.tgt.len()).max().unwrap_or(1).max(1);
        let mut src = vec![PAD; size * src_len];
        let mut mask = vec![false; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (b, e) in examples.iter().enumerate() {
            for (t, &tok) in e.src.iter().enumerate() {
                src[b * src_len + t] = tok;
                mask[b * src_len + t] = true;
            }
            for (t, &tok) in e.tgt.iter().enumerate() {
                tgt_out[b * tgt_len + t] = tok;
                tgt_in[b * tgt_len + t] = if t == 0 { BOS } else { e.tgt[t - 1] };
            }
        }
        Self {
            size,
            src_len,
            tgt_len,
            src: src.into(),
            tgt_in: tgt_in.into(),
            tgt_out: tgt_out.into(),
            src_mask: mask.into(),
        }
    }

    /// Target positions that count toward the loss.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tasks_define_targets() {
        assert_eq!(Task::Copy.target(&[5, 9, 3]), vec![5, 9, 3]);
        assert_eq!(Task::Reverse.target(&[5, 9, 3]), vec![3, 9, 5]);
    }

    #[test]
    fn batch_shifts_target_right() {
        let e = Example {
            src: vec![5, 6],
            tgt: vec![5, 6, EOS],
        };
        let f = Example {
            src: vec![7],
            tgt: vec![7, EOS],
        };
        let b = Batch::from_examples(&[&e, &f]);
        assert_eq!(&*b.tgt_in, &[BOS, 5, 6, BOS, 7, PAD]);
        assert_eq!(&*b.tgt_out, &[5, 6, EOS, 7, EOS, PAD]);
        assert_eq!(&*b.src_mask, &[true, true, true, false]);
        assert_eq!(b.target_tokens(), 5);
    }

    #[test]
    fn rejects_empty_length_range() {
        let spec = DataSpec {
            min_len: 5,
            max_len: 4,
            ..DataSpec::default()
        };
        assert!(generate_dataset(&spec, 0).is_err());
    }
}
