//! JSON run configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::harness::{max_output_len, DataSpec, ShardKind, TrainConfig};
use crate::profiler::MemProfileConfig;
use crate::search::{Dims, ModelOptions, Pooling, SearchConfig};
use crate::tensor::DType;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Search,
    Derive,
    Train,
    Eval,
    Gradcheck,
    Memprofile,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Search => "search",
            Mode::Derive => "derive",
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Gradcheck => "gradcheck",
            Mode::Memprofile => "memprofile",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dims: Dims,
    pub pooling: Pooling,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let o = ModelOptions::default();
        Self {
            dims: Dims::default(),
            pooling: o.pooling,
            dropout: o.dropout,
            label_smoothing: o.label_smoothing,
        }
    }
}

impl ModelSection {
    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            pooling: self.pooling,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub shard: ShardKind,
    /// Evaluate only the first examples of the shard.
    pub max_examples: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            shard: ShardKind::Test,
            max_examples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub depths: Vec<usize>,
    pub splits: Vec<usize>,
    pub h: f64,
    pub param_probes: usize,
    pub oracle_tolerance: f64,
    pub fd_tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            depths: vec![1, 2, 4],
            splits: vec![2, 3],
            h: 1e-5,
            param_probes: 32,
            oracle_tolerance: 1e-8,
            fd_tolerance: 1e-5,
        }
    }
}

/// Checkpoint selection used when `derive` is pointed at a whole search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    /// Fine-tune steps per candidate; the rest of `train` applies.
    pub finetune_steps: u64,
    pub eval_examples: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            finetune_steps: 300,
            eval_examples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out: PathBuf,
    /// Read by `derive`: a checkpoint directory, its `alpha.json`, or a
    /// search output directory whose checkpoints are compared.
    pub checkpoint: Option<PathBuf>,
    /// `arch.json` read by `train` and `eval`.
    pub arch: Option<PathBuf>,
    /// Trained weights directory read by `eval`.
    pub model: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
            arch: None,
            model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub model: ModelSection,
    pub data: DataSpec,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub select: SelectSection,
    pub memprofile: MemProfileConfig,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dtype: DType::F32,
            model: ModelSection::default(),
            data: DataSpec::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            gradcheck: GradcheckSection::default(),
            select: SelectSection::default(),
            memprofile: MemProfileConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

fn from_value(v: Value, source: &str) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." || path.is_empty() {
            source.to_string()
        } else {
            path
        };
        Error::schema(field, e.into_inner().to_string())
    })
}

/// Parses `raw` as JSON, falling back to a plain string.
fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::schema("config", e.to_string()))?;
        from_value(v, "config")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Applies `key=value` overrides, where `key` is a dotted path to an
    /// existing field and `value` is JSON (bare words are taken as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::schema("--set", format!("`{set}` is not key=value")))?;
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| Error::schema(key, "no such configuration field"))?,
                    _ => return Err(Error::schema(key, "no such configuration field")),
                };
            }
            *slot = parse_override(raw);
        }
        from_value(root, "config")
    }

    /// Checks every section, plus the input paths `mode` reads.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        self.model.dims.validate()?;
        self.data.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        if self.data.vocab != self.model.dims.vocab {
            return Err(Error::schema(
                "data.vocab",
                format!(
                    "{} differs from model.dims.vocab = {}",
                    self.data.vocab, self.model.dims.vocab
                ),
            ));
        }
        let need = max_output_len(self.data.max_len) + 1;
        if self.model.dims.max_positions < need {
            return Err(Error::schema(
                "model.dims.max_positions",
                format!(
                    "sequences up to {} tokens need at least {need} positions",
                    self.data.max_len
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::schema("model.dropout", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.model.label_smoothing) {
            return Err(Error::schema("model.label_smoothing", "must lie in [0, 1)"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::schema("eval.batch_size", "must be positive"));
        }
        match mode {
            Mode::Derive => self.require_path("paths.checkpoint", &self.paths.checkpoint)?,
            Mode::Train => self.require_path("paths.arch", &self.paths.arch)?,
            Mode::Eval => {
                self.require_path("paths.arch", &self.paths.arch)?;
                self.require_path("paths.model", &self.paths.model)?;
            }
            Mode::Memprofile => self.memprofile.validate()?,
            Mode::Gradcheck => {
                let g = &self.gradcheck;
                if g.splits.iter().any(|&n| n < 2) || g.depths.contains(&0) || !(g.h.is_finite() && g.h > 0.0) {
                    return Err(Error::schema("gradcheck", "needs n ≥ 2, positive depths and h > 0"));
                }
            }
            Mode::Search => {}
        }
        Ok(())
    }

    fn require_path(&self, field: &str, p: &Option<PathBuf>) -> Result<()> {
        match p {
            None => Err(Error::schema(field, "required for this mode")),
            Some(p) if !p.exists() => Err(Error::schema(field, format!("{} does not exist", p.display()))),
            Some(_) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        c.validate(Mode::Search).unwrap();
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_json(r#"{"search": {"budgett": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("search"), "{err}");
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let c = RunConfig::default()
            .with_overrides(&["search.budget=7", "model.pooling=avg", "paths.out=/tmp/x"])
            .unwrap();
        assert_eq!(c.search.budget, 7);
        assert_eq!(c.model.pooling, Pooling::Avg);
        assert_eq!(c.paths.out, PathBuf::from("/tmp/x"));
        let err = RunConfig::default().with_overrides(&["search.nope=1"]).unwrap_err();
        assert!(err.to_string().contains("search.nope"));
    }

    #[test]
    fn bad_width_fails_validation() {
        let c = RunConfig::default().with_overrides(&["model.dims.d=100"]).unwrap();
        let err = c.validate(Mode::Search).unwrap_err();
        assert!(err.to_string().contains("model.dims.d"));
    }
}
