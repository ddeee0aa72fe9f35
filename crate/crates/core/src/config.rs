//! TOML experiment configuration.
//!
//! Parsing walks the document by hand so that every problem, including type
//! errors and unknown keys, is reported with its dotted key path. All issues
//! are collected before returning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::ViTConfig;
use crate::data::SyntheticSpec;
use crate::error::{ConfigIssue, LabError, Result};
use crate::promptpool::PromptMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Pool size `M`.
    pub size: usize,
    /// Prompts selected per image, `N`.
    pub select: usize,
    /// Prompt length `L_p` (prompt-tuning mode).
    pub prompt_len: usize,
    /// Expert prompt length `L_e` per expert layer (prefix mode).
    pub expert_len: usize,
    /// Shared general prompt length `L_g` per general layer (prefix mode, 0 disables).
    pub general_len: usize,
    pub expert_layers: Vec<usize>,
    pub general_layers: Vec<usize>,
    pub keys_frozen: bool,
}

impl PoolConfig {
    pub fn for_mode(mode: PromptMode) -> Self {
        match mode {
            PromptMode::PromptTuning => Self {
                size: 10,
                select: 5,
                prompt_len: 5,
                expert_len: 20,
                general_len: 6,
                expert_layers: vec![],
                general_layers: vec![],
                keys_frozen: false,
            },
            PromptMode::PrefixTuning => Self {
                size: 10,
                select: 1,
                prompt_len: 5,
                expert_len: 20,
                general_len: 6,
                expert_layers: vec![2, 3],
                general_layers: vec![0, 1],
                keys_frozen: false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_task: f64,
    pub lambda_class: f64,
    pub lambda_key: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_task: 0.3,
            lambda_class: 0.7,
            lambda_key: 0.5,
        }
    }
}

/// Pretext data and schedule for the backbone bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub num_classes: usize,
    pub first_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub noise_std: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Load this checkpoint stem (`<path>.json` + `<path>.tnsr`) instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Reuse or store bootstrapped backbones here, keyed by a hash of the settings.
    pub cache_dir: Option<PathBuf>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            first_class: 1000,
            train_per_class: 60,
            val_per_class: 20,
            noise_std: 0.15,
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 7,
            checkpoint: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Synthetic { seed: u64 },
    File { path: PathBuf, projection_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: PromptMode,
    pub seed: u64,
    pub tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lgcl_enabled: bool,
    pub pool: PoolConfig,
    pub backbone: ViTConfig,
    pub bootstrap: BootstrapConfig,
    pub loss: LossWeights,
    pub provider: ProviderConfig,
    pub dataset: DatasetConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// The synth-20/5 benchmark in the given mode with LGCL on.
    pub fn synth_default(mode: PromptMode) -> Self {
        Self {
            name: "synth-20x5".into(),
            mode,
            seed: 0,
            tasks: 5,
            epochs: 5,
            batch_size: default_batch(mode),
            learning_rate: 0.001,
            lgcl_enabled: true,
            pool: PoolConfig::for_mode(mode),
            backbone: ViTConfig::default(),
            bootstrap: BootstrapConfig::default(),
            loss: LossWeights::default(),
            provider: ProviderConfig::Synthetic { seed: 11 },
            dataset: DatasetConfig::Synthetic(SyntheticSpec::synth_20()),
            output: OutputConfig {
                dir: None,
                checkpoints: true,
            },
        }
    }

    /// Loss weights actually applied: the language terms are zero when LGCL is off.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if !self.lgcl_enabled {
            w.lambda_task = 0.0;
            w.lambda_class = 0.0;
        }
        w
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            LabError::Config(vec![ConfigIssue {
                path: "<document>".into(),
                message: e.message().to_owned(),
            }])
        })?;
        let mut r = Reader::default();
        let cfg = r.experiment(&table);
        if r.issues.is_empty() {
            cfg.validate()?;
            Ok(cfg)
        } else {
            let mut issues = r.issues;
            if let Err(LabError::Config(more)) = cfg.validate() {
                let fresh: Vec<ConfigIssue> = more.into_iter().filter(|m| !issues_cover(&issues, &m.path)).collect();
                issues.extend(fresh);
            }
            Err(LabError::Config(issues))
        }
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::file(path, e.to_string()))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ProviderConfig::File { path, .. } = &mut self.provider {
            fix(path);
        }
        if let DatasetConfig::Dir { path } = &mut self.dataset {
            fix(path);
        }
        if let Some(p) = &mut self.bootstrap.checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.bootstrap.cache_dir {
            fix(p);
        }
        if let Some(p) = &mut self.output.dir {
            fix(p);
        }
    }

    /// Semantic checks; all violations are returned together.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let mut bad = |path: &str, message: String| {
            issues.push(ConfigIssue {
                path: path.into(),
                message,
            })
        };
        let p = &self.pool;
        if p.size == 0 {
            bad("pool.M", "pool size must be at least 1".into());
        }
        if p.select == 0 || p.select > p.size {
            bad("pool.N", format!("N={} must satisfy 1 <= N <= M={}", p.select, p.size));
        }
        let layers = self.backbone.num_layers;
        match self.mode {
            PromptMode::PromptTuning => {
                if p.prompt_len == 0 {
                    bad("pool.L_p", "prompt length must be positive".into());
                }
            }
            PromptMode::PrefixTuning => {
                if p.expert_len == 0 || p.expert_len % 2 != 0 {
                    bad("pool.L_e", format!("L_e={} must be positive and even", p.expert_len));
                }
                if p.general_len % 2 != 0 {
                    bad("pool.L_g", format!("L_g={} must be even", p.general_len));
                }
                if p.expert_layers.is_empty() {
                    bad("pool.expert_layers", "at least one expert layer is required".into());
                }
                for (key, set) in [("pool.expert_layers", &p.expert_layers), ("pool.general_layers", &p.general_layers)] {
                    if let Some(l) = set.iter().find(|&&l| l >= layers) {
                        bad(key, format!("layer {l} out of range for {layers} layers"));
                    }
                    let mut sorted = set.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != set.len() {
                        bad(key, "duplicate layer index".into());
                    }
                }
                if p.general_len > 0 && p.general_layers.is_empty() {
                    bad("pool.general_layers", "L_g > 0 needs at least one general layer".into());
                }
                if let Some(l) = p.expert_layers.iter().find(|l| p.general_layers.contains(l)) {
                    bad("pool.general_layers", format!("layer {l} is both general and expert"));
                }
            }
        }
        if let Err(e) = self.backbone.validate() {
            bad("backbone", e.to_string());
        }
        if self.tasks == 0 {
            bad("tasks", "need at least one task".into());
        }
        if self.epochs == 0 {
            bad("epochs", "need at least one epoch".into());
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        let w = &self.loss;
        for (key, v) in [("loss.lambda_task", w.lambda_task), ("loss.lambda_class", w.lambda_class)] {
            if !(0.0..=1.0).contains(&v) {
                bad(key, format!("must lie in [0, 1], got {v}"));
            }
        }
        if !(w.lambda_key >= 0.0 && w.lambda_key.is_finite()) {
            bad("loss.lambda_key", format!("must be non-negative, got {}", w.lambda_key));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            for (key, v) in [
                ("dataset.num_classes", s.num_classes),
                ("dataset.train_per_class", s.train_per_class),
                ("dataset.test_per_class", s.test_per_class),
            ] {
                if v == 0 {
                    bad(key, "must be positive".into());
                }
            }
            if self.tasks > 0 && s.num_classes % self.tasks != 0 {
                bad("tasks", format!("{} classes do not split into {} equal tasks", s.num_classes, self.tasks));
            }
            if s.image_size != self.backbone.image_size {
                bad("dataset.image_size", format!("{} differs from backbone.image_size {}", s.image_size, self.backbone.image_size));
            }
            if s.channels != self.backbone.num_channels {
                bad("dataset.channels", format!("{} differs from backbone.num_channels {}", s.channels, self.backbone.num_channels));
            }
            if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
                bad("dataset.noise_std", "must be finite and non-negative".into());
            }
            let b = &self.bootstrap;
            if self.bootstrap.checkpoint.is_none() {
                let task_end = s.first_class + s.num_classes;
                let pre_end = b.first_class + b.num_classes;
                if b.first_class < task_end && s.first_class < pre_end {
                    bad("bootstrap.first_class", "pretext classes overlap the continual classes".into());
                }
            }
        }
        let b = &self.bootstrap;
        if b.checkpoint.is_none() {
            for (key, v) in [
                ("bootstrap.num_classes", b.num_classes),
                ("bootstrap.train_per_class", b.train_per_class),
                ("bootstrap.val_per_class", b.val_per_class),
                ("bootstrap.batch_size", b.batch_size),
            ] {
                if v == 0 {
                    bad(key, "must be positive".into());
                }
            }
            if !(b.learning_rate > 0.0 && b.learning_rate.is_finite()) {
                bad("bootstrap.learning_rate", "must be positive".into());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(issues))
        }
    }
}

fn default_batch(mode: PromptMode) -> usize {
    match mode {
        PromptMode::PrefixTuning => 24,
        PromptMode::PromptTuning => 16,
    }
}

fn issues_cover(issues: &[ConfigIssue], path: &str) -> bool {
    issues.iter().any(|i| i.path == path)
}

/// Typed accessors over a TOML table that record issues instead of failing.
#[derive(Default)]
struct Reader {
    issues: Vec<ConfigIssue>,
}

impl Reader {
    fn issue(&mut self, path: String, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path,
            message: message.into(),
        });
    }

    fn check_keys(&mut self, t: &Table, prefix: &str, known: &[&str]) {
        for k in t.keys() {
            if !known.contains(&k.as_str()) {
                self.issue(join(prefix, k), "unknown key");
            }
        }
    }

    fn section<'a>(&mut self, t: &'a Table, key: &str) -> Option<&'a Table> {
        match t.get(key) {
            None => None,
            Some(Value::Table(s)) => Some(s),
            Some(_) => {
                self.issue(key.into(), "expected a table");
                None
            }
        }
    }

    fn usize(&mut self, t: Option<&Table>, prefix: &str, key: &str, default: usize) -> usize {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as usize,
            Some(v) => {
                self.issue(join(prefix, key), format!("expected a non-negative integer, got {v}"));
                default
            }
        }
    }

    fn u64(&mut self, t: Option<&Table>, prefix: &str, key: &str, default: u64) -> u64 {
        self.usize(t, prefix, key, default as usize) as u64
    }

    fn f64(&mut self, t: Option<&Table>, prefix: &str, key: &str, default: f64) -> f64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(v) => {
                self.issue(join(prefix, key), format!("expected a number, got {v}"));
                default
            }
        }
    }

    fn bool(&mut self, t: Option<&Table>, prefix: &str, key: &str, default: bool) -> bool {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.issue(join(prefix, key), format!("expected true or false, got {v}"));
                default
            }
        }
    }

    fn string(&mut self, t: Option<&Table>, prefix: &str, key: &str) -> Option<String> {
        match t.and_then(|t| t.get(key)) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                self.issue(join(prefix, key), format!("expected a string, got {v}"));
                None
            }
        }
    }

    fn usize_list(&mut self, t: Option<&Table>, prefix: &str, key: &str, default: Vec<usize>) -> Vec<usize> {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for v in a {
                    match v {
                        Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                        other => {
                            self.issue(join(prefix, key), format!("expected non-negative integers, got {other}"));
                            return default;
                        }
                    }
                }
                out
            }
            Some(v) => {
                self.issue(join(prefix, key), format!("expected an array, got {v}"));
                default
            }
        }
    }

    fn experiment(&mut self, root: &Table) -> ExperimentConfig {
        self.check_keys(
            root,
            "",
            &[
                "name", "mode", "seed", "tasks", "epochs", "batch_size", "learning_rate", "lgcl_enabled", "pool",
                "backbone", "bootstrap", "loss", "provider", "dataset", "output",
            ],
        );
        let top = Some(root);
        let mode = match self.string(top, "", "mode").as_deref() {
            None | Some("prefix_tuning") => PromptMode::PrefixTuning,
            Some("prompt_tuning") => PromptMode::PromptTuning,
            Some(other) => {
                self.issue("mode".into(), format!("expected prompt_tuning or prefix_tuning, got {other:?}"));
                PromptMode::PrefixTuning
            }
        };
        let d = ExperimentConfig::synth_default(mode);
        let name = self.string(top, "", "name").unwrap_or(d.name);
        let seed = self.u64(top, "", "seed", d.seed);
        let tasks = self.usize(top, "", "tasks", d.tasks);
        let epochs = self.usize(top, "", "epochs", d.epochs);
        let batch_size = self.usize(top, "", "batch_size", d.batch_size);
        let learning_rate = self.f64(top, "", "learning_rate", d.learning_rate);
        let lgcl_enabled = self.bool(top, "", "lgcl_enabled", d.lgcl_enabled);

        let s = self.section(root, "pool");
        if let Some(s) = s {
            self.check_keys(
                s,
                "pool",
                &["M", "N", "L_p", "L_e", "L_g", "expert_layers", "general_layers", "keys_frozen"],
            );
        }
        let dp = d.pool;
        let pool = PoolConfig {
            size: self.usize(s, "pool", "M", dp.size),
            select: self.usize(s, "pool", "N", dp.select),
            prompt_len: self.usize(s, "pool", "L_p", dp.prompt_len),
            expert_len: self.usize(s, "pool", "L_e", dp.expert_len),
            general_len: self.usize(s, "pool", "L_g", dp.general_len),
            expert_layers: self.usize_list(s, "pool", "expert_layers", dp.expert_layers),
            general_layers: self.usize_list(s, "pool", "general_layers", dp.general_layers),
            keys_frozen: self.bool(s, "pool", "keys_frozen", dp.keys_frozen),
        };

        let s = self.section(root, "backbone");
        if let Some(s) = s {
            self.check_keys(
                s,
                "backbone",
                &["image_size", "patch_size", "embed_dim", "num_layers", "num_heads", "mlp_ratio", "num_channels"],
            );
        }
        let db = d.backbone;
        let backbone = ViTConfig {
            image_size: self.usize(s, "backbone", "image_size", db.image_size),
            patch_size: self.usize(s, "backbone", "patch_size", db.patch_size),
            embed_dim: self.usize(s, "backbone", "embed_dim", db.embed_dim),
            num_layers: self.usize(s, "backbone", "num_layers", db.num_layers),
            num_heads: self.usize(s, "backbone", "num_heads", db.num_heads),
            mlp_ratio: self.usize(s, "backbone", "mlp_ratio", db.mlp_ratio),
            num_channels: self.usize(s, "backbone", "num_channels", db.num_channels),
        };

        let s = self.section(root, "bootstrap");
        if let Some(s) = s {
            self.check_keys(
                s,
                "bootstrap",
                &[
                    "num_classes", "first_class", "train_per_class", "val_per_class", "noise_std", "epochs",
                    "batch_size", "learning_rate", "seed", "checkpoint", "cache_dir",
                ],
            );
        }
        let dbs = d.bootstrap;
        let bootstrap = BootstrapConfig {
            num_classes: self.usize(s, "bootstrap", "num_classes", dbs.num_classes),
            first_class: self.usize(s, "bootstrap", "first_class", dbs.first_class),
            train_per_class: self.usize(s, "bootstrap", "train_per_class", dbs.train_per_class),
            val_per_class: self.usize(s, "bootstrap", "val_per_class", dbs.val_per_class),
            noise_std: self.f64(s, "bootstrap", "noise_std", dbs.noise_std),
            epochs: self.usize(s, "bootstrap", "epochs", dbs.epochs),
            batch_size: self.usize(s, "bootstrap", "batch_size", dbs.batch_size),
            learning_rate: self.f64(s, "bootstrap", "learning_rate", dbs.learning_rate),
            seed: self.u64(s, "bootstrap", "seed", dbs.seed),
            checkpoint: self.string(s, "bootstrap", "checkpoint").map(PathBuf::from),
            cache_dir: self.string(s, "bootstrap", "cache_dir").map(PathBuf::from),
        };

        let s = self.section(root, "loss");
        if let Some(s) = s {
            self.check_keys(s, "loss", &["lambda_task", "lambda_class", "lambda_key"]);
        }
        let loss = LossWeights {
            lambda_task: self.f64(s, "loss", "lambda_task", d.loss.lambda_task),
            lambda_class: self.f64(s, "loss", "lambda_class", d.loss.lambda_class),
            lambda_key: self.f64(s, "loss", "lambda_key", d.loss.lambda_key),
        };

        let s = self.section(root, "provider");
        if let Some(s) = s {
            self.check_keys(s, "provider", &["kind", "seed", "path", "projection_seed"]);
        }
        let provider = match self.string(s, "provider", "kind").as_deref() {
            None | Some("synthetic") => ProviderConfig::Synthetic {
                seed: self.u64(s, "provider", "seed", 11),
            },
            Some("file") => {
                let path = self.string(s, "provider", "path");
                if path.is_none() {
                    self.issue("provider.path".into(), "required when kind = \"file\"");
                }
                ProviderConfig::File {
                    path: PathBuf::from(path.unwrap_or_default()),
                    projection_seed: self.u64(s, "provider", "projection_seed", 0),
                }
            }
            Some(other) => {
                self.issue("provider.kind".into(), format!("expected synthetic or file, got {other:?}"));
                ProviderConfig::Synthetic { seed: 11 }
            }
        };

        let s = self.section(root, "dataset");
        if let Some(s) = s {
            self.check_keys(
                s,
                "dataset",
                &[
                    "kind", "path", "num_classes", "first_class", "train_per_class", "test_per_class", "image_size",
                    "channels", "noise_std", "seed",
                ],
            );
        }
        let dataset = match self.string(s, "dataset", "kind").as_deref() {
            None | Some("synthetic") => {
                let ds = SyntheticSpec {
                    image_size: backbone.image_size,
                    channels: backbone.num_channels,
                    ..SyntheticSpec::synth_20()
                };
                DatasetConfig::Synthetic(SyntheticSpec {
                    num_classes: self.usize(s, "dataset", "num_classes", ds.num_classes),
                    first_class: self.usize(s, "dataset", "first_class", ds.first_class),
                    train_per_class: self.usize(s, "dataset", "train_per_class", ds.train_per_class),
                    test_per_class: self.usize(s, "dataset", "test_per_class", ds.test_per_class),
                    image_size: self.usize(s, "dataset", "image_size", ds.image_size),
                    channels: self.usize(s, "dataset", "channels", ds.channels),
                    noise_std: self.f64(s, "dataset", "noise_std", ds.noise_std),
                    seed: self.u64(s, "dataset", "seed", ds.seed),
                })
            }
            Some("dir") => {
                let path = self.string(s, "dataset", "path");
                if path.is_none() {
                    self.issue("dataset.path".into(), "required when kind = \"dir\"");
                }
                DatasetConfig::Dir {
                    path: PathBuf::from(path.unwrap_or_default()),
                }
            }
            Some(other) => {
                self.issue("dataset.kind".into(), format!("expected synthetic or dir, got {other:?}"));
                DatasetConfig::Synthetic(SyntheticSpec::synth_20())
            }
        };

        let s = self.section(root, "output");
        if let Some(s) = s {
            self.check_keys(s, "output", &["dir", "checkpoints"]);
        }
        let output = OutputConfig {
            dir: self.string(s, "output", "dir").map(PathBuf::from),
            checkpoints: self.bool(s, "output", "checkpoints", true),
        };

        ExperimentConfig {
            name,
            mode,
            seed,
            tasks,
            epochs,
            batch_size,
            learning_rate,
            lgcl_enabled,
            pool,
            backbone,
            bootstrap,
            loss,
            provider,
            dataset,
            output,
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_owned()
    } else {
        format!("{prefix}.{key}")
    }
}
