//! Retained-activation sweep over width, depth and backbone.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ledger;
use crate::harness::data::{Batch, Example, EOS, FIRST_SYMBOL};
use crate::search::{Dims, Mode, ModelOptions, Seq2Seq};
use crate::tensor::{Gradients, RngStream, Scalar};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "d,depth,backbone,retained_bytes,peak_bytes,recompute_count";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Reversible,
    Standard,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Reversible => "reversible",
            Backbone::Standard => "standard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemProfileConfig {
    pub d_values: Vec<usize>,
    pub depths: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub m: usize,
    pub n: usize,
    /// Byte cap applied to every sweep point.
    pub cap_bytes: Option<usize>,
}

impl Default for MemProfileConfig {
    fn default() -> Self {
        Self {
            d_values: vec![64, 96, 128],
            depths: vec![1, 2, 4, 8],
            batch_size: 4,
            seq_len: 12,
            vocab: 64,
            m: 2,
            n: 3,
            cap_bytes: None,
        }
    }
}

impl MemProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_values.is_empty() || self.depths.is_empty() {
            return Err(Error::schema("memprofile", "sweep needs at least one d and one depth"));
        }
        if self.depths.contains(&0) {
            return Err(Error::schema("memprofile.depths", "depth must be positive"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::schema(
                "memprofile.batch_size",
                "batch and sequence length must be positive",
            ));
        }
        for &d in &self.d_values {
            self.dims(d, 1).validate()?;
        }
        Ok(())
    }

    /// Model dimensions of one sweep point: a one-block-per-layer supernet.
    pub fn dims(&self, d: usize, depth: usize) -> Dims {
        Dims {
            vocab: self.vocab,
            e: (d / 2).min(32),
            d,
            m: self.m,
            n: self.n,
            s: 1,
            blocks: depth,
            max_positions: self.seq_len + 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub d: usize,
    pub depth: usize,
    pub backbone: Backbone,
    pub retained_bytes: usize,
    pub peak_bytes: usize,
    pub recompute_count: u64,
    pub cap_exceeded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub d: usize,
    pub depth: usize,
    /// Reversible over standard retained bytes; absent when either side hit
    /// the cap.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub rows: Vec<ProfileRow>,
    pub ratios: Vec<RatioPoint>,
}

impl ProfileSummary {
    pub fn row(&self, d: usize, depth: usize, backbone: Backbone) -> Option<&ProfileRow> {
        self.rows
            .iter()
            .find(|r| r.d == d && r.depth == depth && r.backbone == backbone)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.d,
                r.depth,
                r.backbone.as_str(),
                r.retained_bytes,
                r.peak_bytes,
                r.recompute_count
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `memprofile.csv` and `memprofile.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("memprofile.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("memprofile.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }
}

/// A fixed batch of random full-length sequences.
pub fn profile_batch(batch_size: usize, seq_len: usize, vocab: usize, seed: u64) -> Batch {
    let mut rng = RngStream::substream(seed, 0x3e3);
    let examples: Vec<Example> = (0..batch_size)
        .map(|_| {
            let src: Vec<usize> = (0..seq_len)
                .map(|_| FIRST_SYMBOL + rng.below(vocab - FIRST_SYMBOL))
                .collect();
            let mut tgt = src.clone();
            tgt.push(EOS);
            Example { src, tgt }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs)
}

/// Measures one training pass of `net` on `batch`: retained bytes at the end
/// of forward, peak over forward and backward, and recompute evaluations.
pub fn measure_point<T: Scalar>(net: &Seq2Seq<T>, batch: &Batch, backbone: Backbone, seed: u64) -> Result<ProfileRow> {
    ledger::reset();
    let mut rng = RngStream::substream(seed, 0x3e4);
    let logs = net.draw_logs(&mut rng);
    let mut grads = Gradients::new();
    let mode = Mode {
        drift_guard: None,
        ..Mode::train()
    };
    let report = match backbone {
        Backbone::Reversible => net.loss_reversible(batch, logs, &mode, Some(&mut grads)),
        Backbone::Standard => net.loss_standard(batch, &logs, &mode, Some(&mut grads)),
    };
    let snap = ledger::snapshot();
    let (retained_bytes, cap_exceeded) = match report {
        Ok(r) => (r.retained_bytes, false),
        Err(Error::CapExceeded { requested, .. }) => (requested, true),
        Err(e) => return Err(e),
    };
    Ok(ProfileRow {
        d: net.dims.d,
        depth: net.dims.blocks,
        backbone,
        retained_bytes,
        peak_bytes: snap.peak_bytes,
        recompute_count: snap.recompute_forward_count,
        cap_exceeded,
    })
}

/// Sweeps every `(d, depth)` point with both backbones, sequentially.
pub fn profile_memory<T: Scalar>(cfg: &MemProfileConfig, opts: &ModelOptions, seed: u64) -> Result<ProfileSummary> {
    cfg.validate()?;
    let batch = profile_batch(cfg.batch_size, cfg.seq_len, cfg.vocab, seed);
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for &d in &cfg.d_values {
        for &depth in &cfg.depths {
            let net = Seq2Seq::<T>::supernet(&cfg.dims(d, depth), opts, seed)?;
            let mut pair = Vec::with_capacity(2);
            for backbone in [Backbone::Reversible, Backbone::Standard] {
                ledger::set_cap(cfg.cap_bytes.map(|c| ledger::retained_bytes() + c));
                let row = measure_point(&net, &batch, backbone, seed);
                ledger::set_cap(None);
                pair.push(row?);
            }
            let ratio = match (&pair[0], &pair[1]) {
                (r, s) if !r.cap_exceeded && !s.cap_exceeded && s.retained_bytes > 0 => {
                    Some(r.retained_bytes as f64 / s.retained_bytes as f64)
                }
                _ => None,
            };
            ratios.push(RatioPoint { d, depth, ratio });
            rows.extend(pair);
        }
    }
    Ok(ProfileSummary { rows, ratios })
}
