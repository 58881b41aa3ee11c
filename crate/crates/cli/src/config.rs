//! Run configuration: a sectioned key-value config file merged with
//! command-line overrides. Unknown keys are rejected; every command
//! echoes the fully resolved configuration before running.
//!
//! File format — one `key = value` per line, `#` comments, three
//! sections:
//!
//! ```text
//! [model]
//! preset = micro
//! variant = dmb
//! branches = 2
//! [train]
//! steps = 500
//! [data]
//! task = copy
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dmb_core::corpus::ToyTask;
use dmb_core::model::{ModelConfig, Variant};
use dmb_core::train::TrainConfig;
use dmb_core::Real;

use crate::error::{CliError, Result};

pub fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "plain" => Ok(Variant::Plain),
        "dmb" => Ok(Variant::Dmb),
        "moe" => Ok(Variant::Moe),
        _ => Err(CliError::Usage(format!("unknown variant `{s}` (plain|dmb|moe)"))),
    }
}

fn preset(name: &str, variant: Variant, vocab_size: usize) -> Result<ModelConfig> {
    match name {
        "micro" => Ok(ModelConfig::micro(variant, vocab_size)),
        "tiny" => Ok(ModelConfig::tiny(variant)),
        "small" => Ok(ModelConfig::small(variant)),
        _ => Err(CliError::Usage(format!("unknown preset `{name}` (micro|tiny|small)"))),
    }
}

/// Where the training corpus comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Toy,
    Tsv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub task: ToyTask,
    /// Toy vocabulary size, reserved tokens included.
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub count: usize,
    pub seed: u64,
    /// Pairs held out from training for evaluation.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Toy,
            task: ToyTask::Copy,
            vocab_size: 30,
            len_min: 3,
            len_max: 12,
            count: 10_000,
            seed: 1,
            holdout: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// How many trailing checkpoints the final model averages.
    pub average_last: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: String::from("micro"),
            model: ModelConfig::micro(Variant::Plain, 30),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            average_last: 3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("[{section}] {key}: bad value `{value}`")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Usage(format!("[{section}] {key}: expected true|false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Parse a config file on top of the defaults. The `[model]` preset
    /// and variant are applied before individual field overrides so the
    /// line order inside a section does not matter.
    pub fn from_file_text(text: &str) -> Result<RunConfig> {
        let mut sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        let mut current = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !matches!(name, "model" | "train" | "data") {
                    return Err(CliError::Usage(format!(
                        "line {}: unknown section [{name}]",
                        no + 1
                    )));
                }
                current = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("line {}: expected `key = value`", no + 1)));
            };
            if current.is_empty() {
                return Err(CliError::Usage(format!(
                    "line {}: key before any [section]",
                    no + 1
                )));
            }
            sections
                .entry(current.clone())
                .or_default()
                .push((key.trim().to_string(), value.trim().to_string()));
        }

        let mut cfg = RunConfig::default();
        if let Some(model) = sections.get("model") {
            let find = |k: &str| model.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.clone());
            let variant = match find("variant") {
                Some(v) => parse_variant(&v)?,
                None => cfg.model.variant,
            };
            let vocab = match find("vocab_size") {
                Some(v) => parse_num("model", "vocab_size", &v)?,
                None => cfg.model.vocab_size,
            };
            if let Some(p) = find("preset") {
                cfg.model = preset(&p, variant, vocab)?;
                cfg.preset = p;
            } else {
                cfg.model.variant = variant;
            }
            cfg.model.vocab_size = vocab;
            for (key, value) in model {
                let m = &mut cfg.model;
                match key.as_str() {
                    "preset" | "variant" | "vocab_size" => {}
                    "d" => m.d = parse_num("model", key, value)?,
                    "d_f" => m.d_f = parse_num("model", key, value)?,
                    "heads" => m.heads = parse_num("model", key, value)?,
                    "enc_layers" => m.enc_layers = parse_num("model", key, value)?,
                    "dec_layers" => m.dec_layers = parse_num("model", key, value)?,
                    "branches" => m.branches = parse_num("model", key, value)?,
                    "top_k" => m.top_k = parse_num("model", key, value)?,
                    "alpha" => m.alpha = parse_num::<Real>("model", key, value)?,
                    "tie_embeddings" => m.tie_embeddings = parse_bool("model", key, value)?,
                    "dropout" => m.dropout = parse_num::<Real>("model", key, value)?,
                    "label_smoothing" => m.label_smoothing = parse_num::<Real>("model", key, value)?,
                    "max_len" => m.max_len = parse_num("model", key, value)?,
                    "branch_mha" => m.branch_mha = parse_bool("model", key, value)?,
                    "branch_ffn" => m.branch_ffn = parse_bool("model", key, value)?,
                    _ => return Err(CliError::Usage(format!("[model] unknown key `{key}`"))),
                }
            }
        }
        if let Some(train) = sections.get("train") {
            for (key, value) in train {
                let t = &mut cfg.train;
                match key.as_str() {
                    "steps" => t.steps = parse_num("train", key, value)?,
                    "tokens_per_batch" => t.tokens_per_batch = parse_num("train", key, value)?,
                    "warmup" => t.warmup = parse_num("train", key, value)?,
                    "lr_scale" => t.lr_scale = parse_num::<Real>("train", key, value)?,
                    "clip_norm" => t.clip_norm = parse_num::<Real>("train", key, value)?,
                    "checkpoint_every" => t.checkpoint_every = parse_num("train", key, value)?,
                    "seed" => t.seed = parse_num("train", key, value)?,
                    "average_last" => cfg.average_last = parse_num("train", key, value)?,
                    _ => return Err(CliError::Usage(format!("[train] unknown key `{key}`"))),
                }
            }
        }
        if let Some(data) = sections.get("data") {
            for (key, value) in data {
                let d = &mut cfg.data;
                match key.as_str() {
                    "source" => {
                        d.source = match value.as_str() {
                            "toy" => DataSource::Toy,
                            _ => {
                                return Err(CliError::Usage(format!(
                                    "[data] source: expected `toy` or use `path` for TSV, got `{value}`"
                                )))
                            }
                        }
                    }
                    "path" => d.source = DataSource::Tsv(value.clone()),
                    "task" => {
                        d.task = ToyTask::parse(value).ok_or_else(|| {
                            CliError::Usage(format!("[data] task: unknown task `{value}`"))
                        })?
                    }
                    "vocab_size" => d.vocab_size = parse_num("data", key, value)?,
                    "len_min" => d.len_min = parse_num("data", key, value)?,
                    "len_max" => d.len_max = parse_num("data", key, value)?,
                    "count" => d.count = parse_num("data", key, value)?,
                    "seed" => d.seed = parse_num("data", key, value)?,
                    "holdout" => d.holdout = parse_num("data", key, value)?,
                    _ => return Err(CliError::Usage(format!("[data] unknown key `{key}`"))),
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &str) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config `{path}`: {e}")))?;
        RunConfig::from_file_text(&text)
    }

    /// The fully resolved configuration in the config-file format.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "variant = {}", m.variant);
        let _ = writeln!(s, "d = {}", m.d);
        let _ = writeln!(s, "d_f = {}", m.d_f);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "enc_layers = {}", m.enc_layers);
        let _ = writeln!(s, "dec_layers = {}", m.dec_layers);
        let _ = writeln!(s, "branches = {}", m.branches);
        let _ = writeln!(s, "top_k = {}", m.top_k);
        let _ = writeln!(s, "alpha = {}", m.alpha);
        let _ = writeln!(s, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "tie_embeddings = {}", m.tie_embeddings);
        let _ = writeln!(s, "dropout = {}", m.dropout);
        let _ = writeln!(s, "label_smoothing = {}", m.label_smoothing);
        let _ = writeln!(s, "max_len = {}", m.max_len);
        let _ = writeln!(s, "branch_mha = {}", m.branch_mha);
        let _ = writeln!(s, "branch_ffn = {}", m.branch_ffn);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "tokens_per_batch = {}", t.tokens_per_batch);
        let _ = writeln!(s, "warmup = {}", t.warmup);
        let _ = writeln!(s, "lr_scale = {}", t.lr_scale);
        let _ = writeln!(s, "clip_norm = {}", t.clip_norm);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "average_last = {}", self.average_last);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "[data]");
        match &d.source {
            DataSource::Toy => {
                let _ = writeln!(s, "source = toy");
            }
            DataSource::Tsv(p) => {
                let _ = writeln!(s, "path = {p}");
            }
        }
        let _ = writeln!(s, "task = {}", d.task);
        let _ = writeln!(s, "vocab_size = {}", d.vocab_size);
        let _ = writeln!(s, "len_min = {}", d.len_min);
        let _ = writeln!(s, "len_max = {}", d.len_max);
        let _ = writeln!(s, "count = {}", d.count);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "holdout = {}", d.holdout);
        s
    }
}
