//! Experiment configuration: a TOML file with `[env]`, `[policy]`, `[train]`
//! and `[eval]` tables of flat `key = value` pairs, plus `section.key=value`
//! overrides from the command line.
//!
//! Defaults depend on `env.mode` and `policy.arch`, so those two keys are
//! read first and every other key is layered over the matching defaults.
//! Keys are applied one at a time so a bad key is reported at its own line.

use std::fmt;
use std::path::{Path, PathBuf};

use rlamr_agent::{Arch, PolicyConfig, TrainConfig};
use rlamr_core::solver::AdvectionConfig;
use rlamr_core::env::ObsConfig;
use rlamr_core::{EnvConfig, FunctionClass, Mode, RewardMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SECTIONS: [&str; 4] = ["env", "policy", "train", "eval"];

/// Where a configuration value came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: Option<usize> },
    Flag(String),
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line: Some(l) } => write!(f, "{}:{l}", path.display()),
            Origin::File { path, line: None } => write!(f, "{}", path.display()),
            Origin::Flag(s) => write!(f, "--set {s}"),
            Origin::Default => f.write_str("<defaults>"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{origin}: {key}: {message}")]
pub struct ConfigError {
    pub origin: Origin,
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(origin: Origin, key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { origin, key: key.into(), message: message.into() }
    }

    pub fn line(&self) -> Option<usize> {
        match self.origin {
            Origin::File { line, .. } => line,
            _ => None,
        }
    }
}

/// Flat environment keys; nested core settings are spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub mode: Mode,
    pub class: FunctionClass,
    pub base_nx: u32,
    pub base_ny: u32,
    pub d_max: u32,
    pub budget: usize,
    pub episode_len: usize,
    pub reward: RewardMode,
    pub multi_refine_per_solve: usize,
    pub mask_invalid: bool,
    pub order: usize,
    pub l_element: usize,
    pub l_context: usize,
    pub velocity_x: f64,
    pub velocity_y: f64,
    pub cfl: f64,
    pub rl_step_time: f64,
    pub steps2_rotation_fix: bool,
    pub scale_tiles: u32,
}

impl EnvSection {
    pub fn from_core(c: &EnvConfig) -> Self {
        Self {
            mode: c.mode,
            class: c.class,
            base_nx: c.base_nx,
            base_ny: c.base_ny,
            d_max: c.d_max,
            budget: c.budget,
            episode_len: c.episode_len,
            reward: c.reward,
            multi_refine_per_solve: c.multi_refine_per_solve,
            mask_invalid: c.mask_invalid,
            order: c.order,
            l_element: c.obs.l_element,
            l_context: c.obs.l_context,
            velocity_x: c.advection.c[0],
            velocity_y: c.advection.c[1],
            cfl: c.advection.cfl,
            rl_step_time: c.advection.rl_step_time,
            steps2_rotation_fix: c.steps2_rotation_fix,
            scale_tiles: c.scale_tiles,
        }
    }

    pub fn to_core(&self, gamma: f64) -> EnvConfig {
        EnvConfig {
            mode: self.mode,
            class: self.class,
            base_nx: self.base_nx,
            base_ny: self.base_ny,
            d_max: self.d_max,
            budget: self.budget,
            episode_len: self.episode_len,
            reward: self.reward,
            gamma,
            multi_refine_per_solve: self.multi_refine_per_solve,
            mask_invalid: self.mask_invalid,
            order: self.order,
            obs: ObsConfig { l_element: self.l_element, l_context: self.l_context },
            advection: AdvectionConfig {
                c: [self.velocity_x, self.velocity_y],
                cfl: self.cfl,
                rl_step_time: self.rl_step_time,
            },
            steps2_rotation_fix: self.steps2_rotation_fix,
            scale_tiles: self.scale_tiles,
        }
    }
}

/// Training-run keys that live in `[train]` next to the optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub episodes: usize,
    /// Write an intermediate checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
}

const RUN_KEYS: [&str; 2] = ["episodes", "checkpoint_every"];

/// Evaluation protocol plus optional changes to the test environment
/// (larger meshes or budgets, tiling, a different mode or class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub policy_seeds: usize,
    pub master_seed: u64,
    /// Take the most probable action; otherwise sample from the policy.
    pub greedy: bool,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<FunctionClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_nx: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_ny: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_tiles: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_refine_per_solve: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            policy_seeds: 4,
            master_seed: 0,
            greedy: true,
            workers: 1,
            mode: None,
            class: None,
            base_nx: None,
            base_ny: None,
            budget: None,
            episode_len: None,
            scale_tiles: None,
            multi_refine_per_solve: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub run: RunSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn defaults(mode: Mode, class: FunctionClass, arch: Arch) -> Self {
        let train = TrainConfig::for_mode(arch, mode);
        Self {
            env: EnvSection::from_core(&EnvConfig::default_for(mode, class)),
            policy: PolicyConfig::for_mode(arch, mode),
            train,
            run: RunSection { episodes: if mode == Mode::Static { 2000 } else { 1000 }, checkpoint_every: 0 },
            eval: EvalSection::default(),
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        self.env.to_core(self.train.gamma)
    }

    /// Test environment: the training environment with `[eval]` changes.
    pub fn eval_env_config(&self) -> EnvConfig {
        let mut env = self.env.clone();
        let e = &self.eval;
        if let Some(m) = e.mode {
            env.mode = m;
        }
        if let Some(c) = e.class {
            env.class = c;
        }
        if let Some(n) = e.base_nx {
            env.base_nx = n;
        }
        if let Some(n) = e.base_ny {
            env.base_ny = n;
        }
        if let Some(b) = e.budget {
            env.budget = b;
            if e.episode_len.is_none() {
                env.episode_len = b;
            }
        }
        if let Some(t) = e.episode_len {
            env.episode_len = t;
        }
        if let Some(t) = e.scale_tiles {
            env.scale_tiles = t;
        }
        if let Some(m) = e.multi_refine_per_solve {
            env.multi_refine_per_solve = m;
        }
        env.to_core(self.train.gamma)
    }

    /// Identity of trained artifacts: everything that shapes a training run
    /// except rollout parallelism and checkpoint cadence.
    pub fn train_hash(&self) -> String {
        let mut train = self.train.clone();
        train.workers = 1;
        let v = serde_json::json!({ "env": self.env, "policy": self.policy, "train": train, "episodes": self.run.episodes });
        short_hash(&v)
    }

    /// Identity of an evaluation: the training identity plus the protocol.
    pub fn eval_hash(&self) -> String {
        let mut eval = self.eval.clone();
        eval.workers = 1;
        short_hash(&serde_json::json!({ "train": self.train_hash(), "eval": eval }))
    }

    fn validate(&self) -> Result<(), (String, String)> {
        self.env_config().validate().map_err(|e| ("env".to_string(), e.to_string()))?;
        self.eval_env_config().validate().map_err(|e| ("eval".to_string(), e.to_string()))?;
        self.policy.validate().map_err(|e| ("policy".to_string(), e.to_string()))?;
        self.train.validate().map_err(|e| ("train".to_string(), e.to_string()))?;
        if self.eval.episodes == 0 || self.eval.policy_seeds == 0 || self.eval.workers == 0 {
            return Err(("eval".into(), "episodes, policy_seeds and workers must be positive".into()));
        }
        Ok(())
    }
}

fn short_hash(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One user-supplied key.
#[derive(Debug, Clone)]
struct Entry {
    section: String,
    key: String,
    value: toml::Value,
    origin: Origin,
}

/// A resolved configuration and its source description.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: Option<PathBuf>,
}

/// Read `path` (if any) and apply `overrides` of the form `section.key=value`.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let mut entries = Vec::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| ConfigError::new(Origin::File { path: p.to_path_buf(), line: None }, "", e.to_string()))?;
        entries.extend(parse_document(&text, p)?);
    }
    for o in overrides {
        entries.push(parse_override(o)?);
    }
    let config = resolve(&entries)?;
    Ok(LoadedConfig { config, source: path.map(Path::to_path_buf) })
}

/// Parse configuration text as if read from `path`.
pub fn parse_str(text: &str, path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut entries = parse_document(text, path)?;
    for o in overrides {
        entries.push(parse_override(o)?);
    }
    resolve(&entries)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn parse_document(text: &str, path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let file = |line| Origin::File { path: path.to_path_buf(), line };
    let table: toml::Table = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        ConfigError::new(file(line), "", e.message().trim().to_string())
    })?;
    let lines = KeyLines::scan(text);
    let mut out = Vec::new();
    for (section, body) in table {
        let sec_line = lines.section(&section);
        if !SECTIONS.contains(&section.as_str()) {
            return Err(ConfigError::new(file(sec_line), section, "unknown section (expected env, policy, train or eval)"));
        }
        let toml::Value::Table(body) = body else {
            return Err(ConfigError::new(file(lines.key("", &section)), section, "expected a [section] table"));
        };
        for (key, value) in body {
            let origin = file(lines.key(&section, &key));
            out.push(Entry { section: section.clone(), key, value, origin });
        }
    }
    // Apply in file order so the first bad line is the one reported.
    out.sort_by_key(|e| match e.origin {
        Origin::File { line, .. } => line.unwrap_or(usize::MAX),
        _ => usize::MAX,
    });
    Ok(out)
}

fn parse_override(s: &str) -> Result<Entry, ConfigError> {
    let origin = Origin::Flag(s.to_string());
    let (lhs, rhs) = s.split_once('=').ok_or_else(|| ConfigError::new(origin.clone(), s, "expected section.key=value"))?;
    let (section, key) = lhs
        .trim()
        .split_once('.')
        .ok_or_else(|| ConfigError::new(origin.clone(), lhs, "expected section.key=value"))?;
    if !SECTIONS.contains(&section) {
        return Err(ConfigError::new(origin, section, "unknown section (expected env, policy, train or eval)"));
    }
    let rhs = rhs.trim();
    // Bare words are strings; anything else must be a TOML value.
    let value = match toml::from_str::<toml::Table>(&format!("v = {rhs}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(rhs.to_string()),
    };
    Ok(Entry { section: section.to_string(), key: key.trim().to_string(), value, origin })
}

fn last_str<'a>(entries: &'a [Entry], section: &str, key: &str) -> Option<&'a Entry> {
    entries.iter().rev().find(|e| e.section == section && e.key == key)
}

fn pick<T: DeserializeOwned>(entries: &[Entry], section: &str, key: &str, default: T) -> Result<T, ConfigError> {
    match last_str(entries, section, key) {
        None => Ok(default),
        Some(e) => e.value.clone().try_into().map_err(|err: toml::de::Error| {
            ConfigError::new(e.origin.clone(), format!("{section}.{key}"), err.message().trim().to_string())
        }),
    }
}

fn resolve(entries: &[Entry]) -> Result<ExperimentConfig, ConfigError> {
    let mode = pick(entries, "env", "mode", Mode::Static)?;
    let class = pick(entries, "env", "class", if mode == Mode::Static { FunctionClass::Steps } else { FunctionClass::Bumps })?;
    let arch = pick(entries, "policy", "arch", Arch::Ipn)?;
    let defaults = ExperimentConfig::defaults(mode, class, arch);

    let mut env = Layered::new(&defaults.env);
    let mut policy = Layered::new(&defaults.policy);
    let mut train = Layered::new(&defaults.train);
    let mut run = Layered::new(&defaults.run);
    let mut eval = Layered::new(&defaults.eval);
    for e in entries {
        let res = match e.section.as_str() {
            "env" => env.apply(e),
            "policy" => policy.apply(e),
            "train" if RUN_KEYS.contains(&e.key.as_str()) => run.apply(e),
            "train" => train.apply(e),
            "eval" => eval.apply(e),
            _ => unreachable!("sections are checked on parse"),
        };
        res?;
    }
    let cfg = ExperimentConfig {
        env: env.current,
        policy: policy.current,
        train: train.current,
        run: run.current,
        eval: eval.current,
    };
    cfg.validate().map_err(|(section, message)| {
        // Blame the key the message names, else the section's last key.
        let named = |e: &&Entry| {
            message.split(|c: char| !(c.is_alphanumeric() || c == '_')).any(|w| w == e.key)
        };
        let culprit = entries.iter().rev().find(named).or_else(|| entries.iter().rev().find(|e| e.section == section));
        match culprit {
            Some(e) => ConfigError::new(e.origin.clone(), format!("{}.{}", e.section, e.key), message),
            None => ConfigError::new(Origin::Default, section, message),
        }
    })?;
    Ok(cfg)
}

/// A section's typed value with user keys layered on one at a time.
struct Layered<T> {
    table: toml::Table,
    current: T,
}

impl<T: Serialize + DeserializeOwned + Clone> Layered<T> {
    fn new(defaults: &T) -> Self {
        let table = toml::Table::try_from(defaults).expect("defaults serialize to a table");
        Self { table, current: defaults.clone() }
    }

    fn apply(&mut self, e: &Entry) -> Result<(), ConfigError> {
        let mut next = self.table.clone();
        next.insert(e.key.clone(), e.value.clone());
        let typed: T = toml::Value::Table(next.clone()).try_into().map_err(|err: toml::de::Error| {
            ConfigError::new(e.origin.clone(), format!("{}.{}", e.section, e.key), err.message().trim().to_string())
        })?;
        self.table = next;
        self.current = typed;
        Ok(())
    }
}

/// Line numbers of `[section]` headers and `key = ...` lines.
struct KeyLines {
    entries: Vec<(String, String, usize)>,
}

impl KeyLines {
    fn scan(text: &str) -> Self {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix('[') {
                if let Some(name) = rest.split(']').next() {
                    section = name.trim().to_string();
                    entries.push((section.clone(), String::new(), i + 1));
                }
            } else if let Some((k, _)) = line.split_once('=') {
                let k = k.trim().trim_matches('"');
                if !k.is_empty() && !k.starts_with('#') {
                    entries.push((section.clone(), k.to_string(), i + 1));
                }
            }
        }
        Self { entries }
    }

    fn key(&self, section: &str, key: &str) -> Option<usize> {
        self.entries.iter().rev().find(|(s, k, _)| s == section && k == key).map(|e| e.2)
    }

    fn section(&self, section: &str) -> Option<usize> {
        self.key(section, "")
    }
}

/// Render a resolved configuration back to TOML.
pub fn to_toml(cfg: &ExperimentConfig) -> String {
    let mut train = toml::Table::try_from(&cfg.train).expect("train serializes");
    train.extend(toml::Table::try_from(&cfg.run).expect("run serializes"));
    let mut doc = toml::Table::new();
    doc.insert("env".into(), toml::Value::Table(toml::Table::try_from(&cfg.env).expect("env serializes")));
    doc.insert("policy".into(), toml::Value::Table(toml::Table::try_from(&cfg.policy).expect("policy serializes")));
    doc.insert("train".into(), toml::Value::Table(train));
    doc.insert("eval".into(), toml::Value::Table(toml::Table::try_from(&cfg.eval).expect("eval serializes")));
    toml::to_string(&doc).expect("table renders")
}
