//! Run configuration: built-in defaults, a JSON file on top, then
//! `KEY=VAL` overrides on dotted paths.

use std::path::{Path, PathBuf};

use gatedkv::{LossConfig, ModelConfig, TrainSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

/// One optimization stage: schedule plus objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage {
    pub train: TrainSpec,
    pub loss: LossConfig,
}

/// Where text comes from. Paths win over the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    pub synthetic_len: usize,
    pub synthetic_seed: u64,
    pub held_out_len: usize,
    pub held_out_seed: u64,
    /// Cap on evaluated held-out windows.
    pub max_held_out_windows: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: None,
            held_out: None,
            synthetic_len: 60_000,
            synthetic_seed: 1,
            held_out_len: 8_000,
            held_out_seed: 99,
            max_held_out_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Sink tokens of the StreamingLLM baseline; the window takes the rest
    /// of the matched budget.
    pub sinks: usize,
    /// Retention fractions of the heavy-hitter perplexity trend.
    pub trend: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sinks: 4,
            trend: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Label written into report rows.
    pub name: String,
    /// Model initialization and random-policy seed.
    pub seed: u64,
    pub model: ModelConfig,
    /// Optional language-model stage run before `train`.
    pub pretrain: Option<Stage>,
    pub train: TrainSpec,
    pub loss: LossConfig,
    pub corpus: CorpusConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Field-level checks across sections.
    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        let stages = self.pretrain.iter().map(|s| ("pretrain.", &s.train, &s.loss));
        for (prefix, spec, loss) in stages.chain([("", &self.train, &self.loss)]) {
            spec.validate().map_err(|e| Failure::usage(format!("{prefix}train: {e}")))?;
            loss.validate(self.model.tau).map_err(|e| Failure::usage(format!("{prefix}loss: {e}")))?;
            if spec.seq_len > self.model.max_seq {
                return Err(Failure::usage(format!(
                    "{prefix}train.seq_len {} exceeds model.max_seq {}",
                    spec.seq_len, self.model.max_seq
                )));
            }
        }
        if self.pretrain.as_ref().is_some_and(|p| p.train.seq_len != self.train.seq_len) {
            return Err(Failure::usage("pretrain.train.seq_len must equal train.seq_len"));
        }
        for path in [&self.corpus.train, &self.corpus.held_out].into_iter().flatten() {
            if !path.is_file() {
                return Err(Failure::usage(format!("corpus file {} not found", path.display())));
            }
        }
        if self.bench.trend.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Failure::usage("bench.trend fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sets `path` (dot separated) in `root` to `value`, creating objects on
/// the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), Failure> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::usage(format!("bad override key `{path}`")));
    }
    for part in &parts[..parts.len() - 1] {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = cur
            .as_object_mut()
            .ok_or_else(|| Failure::usage(format!("override `{path}`: `{part}` is not a section")))?
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    if cur.is_null() {
        *cur = Value::Object(Default::default());
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Failure::usage(format!("override `{path}` does not name a field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `KEY=VAL`; `VAL` is JSON when it parses as JSON, a string otherwise.
pub fn parse_override(raw: &str) -> Result<(String, Value), Failure> {
    let (key, val) = raw
        .split_once('=')
        .ok_or_else(|| Failure::usage(format!("override `{raw}` is not KEY=VAL")))?;
    let value = serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Defaults, then `path`, then `overrides`, then `seed`.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        set_path(&mut root, &key, value)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Failure::usage(format!("config: {e}")))?;
    if cfg.name.is_empty() {
        cfg.name = path
            .and_then(|p| p.file_stem())
            .map_or_else(|| "default".to_string(), |s| s.to_string_lossy().into_owned());
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        if let Some(p) = cfg.pretrain.as_mut() {
            p.train.seed = seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
