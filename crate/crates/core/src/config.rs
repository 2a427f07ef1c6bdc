//! Experiment configuration: TOML file, dotted flag overrides, validation.
//!
//! Resolution order is built-in defaults, then the file, then overrides.
//! Merging happens on the TOML tree so a partially specified section keeps
//! the experiment defaults for the keys it leaves out.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, Preset, UserType, NUM_COSTS};
use crate::pbarl::PbarlConfig;
use crate::pg::PgConfig;
use crate::pref::{PrefGenConfig, RewardTrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pretrained,
    Pbarl,
    Preft,
    Scratch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Pbarl => "pbarl",
            Method::Preft => "preft",
            Method::Scratch => "scratch",
        }
    }
}

/// A named weight preset or an explicit weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UserSpec {
    Named(UserType),
    Custom { name: String, omega: Vec<f64> },
}

impl UserSpec {
    pub fn name(&self) -> String {
        match self {
            UserSpec::Named(u) => u.name().to_string(),
            UserSpec::Custom { name, .. } => name.clone(),
        }
    }

    pub fn omega(&self) -> Vec<f64> {
        match self {
            UserSpec::Named(u) => u.weights().to_vec(),
            UserSpec::Custom { omega, .. } => omega.clone(),
        }
    }
}

/// Per-field overrides applied on top of each preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub near_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spill_velocity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub has_payload: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spawn_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spawn_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_extent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub return_offset: Option<f64>,
}

impl EnvOverrides {
    pub fn apply(&self, preset: Preset) -> Result<EnvConfig> {
        let mut c = EnvConfig::preset(preset);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            horizon,
            dt,
            action_bound,
            near_radius,
            force_threshold,
            success_radius,
            spill_velocity,
            payload_min,
            has_payload,
            spawn_min,
            spawn_max,
            target_extent,
            return_offset
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefStage {
    pub num_queries: usize,
    /// Pairs generated on separate spawns to measure reward-model accuracy.
    pub holdout_queries: usize,
    pub tie_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_len: Option<usize>,
}

impl Default for PrefStage {
    fn default() -> Self {
        let g = PrefGenConfig::default();
        Self {
            num_queries: g.num_queries,
            holdout_queries: 200,
            tie_threshold: g.tie_threshold,
            segment_len: g.segment_len,
        }
    }
}

impl PrefStage {
    pub fn gen_config(&self, num_queries: usize) -> PrefGenConfig {
        PrefGenConfig {
            num_queries,
            tie_threshold: self.tie_threshold,
            segment_len: self.segment_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionStage {
    /// Stochastic rollouts of the pre-trained policy.
    pub episodes: usize,
}

impl Default for TransitionStage {
    fn default() -> Self {
        Self { episodes: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalStage {
    pub episodes: usize,
    /// Base of the evaluation spawn set shared by every method.
    pub seed: u64,
    /// Deploy the wrapped policy with sampled actions and latents.
    pub pbarl_stochastic: bool,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 777,
            pbarl_stochastic: false,
        }
    }
}

/// Existing artifacts to use instead of running the producing stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preferences: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transitions: Option<PathBuf>,
}

impl ArtifactPaths {
    fn is_empty(&self) -> bool {
        self == &Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub id: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub presets: Vec<Preset>,
    pub users: Vec<UserSpec>,
    pub methods: Vec<Method>,
    /// Extra PbARL runs with these list sizes.
    pub ablation_n: Vec<usize>,
    pub env: EnvOverrides,
    pub pretrain: PgConfig,
    pub prefs: PrefStage,
    pub reward: RewardTrainConfig,
    pub transitions: TransitionStage,
    pub pbarl: PbarlConfig,
    /// Shared by PrefFT and learning from scratch.
    pub finetune: PgConfig,
    pub eval: EvalStage,
    #[serde(skip_serializing_if = "ArtifactPaths::is_empty")]
    pub artifacts: ArtifactPaths,
}

/// Pre-training budget used by experiments: a fixed number of environment
/// steps rather than stopping at the first evaluation above a target.
pub fn default_pretrain() -> PgConfig {
    let mut c = PgConfig {
        updates: 1_000_000,
        env_step_budget: Some(6_000_000),
        target_success: None,
        ..PgConfig::default()
    };
    c.adam.lr = 1e-4;
    c
}

pub fn default_finetune() -> PgConfig {
    PgConfig {
        updates: 1_000_000,
        env_step_budget: Some(20_000),
        ..PgConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "default".into(),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            presets: vec![Preset::Feeding],
            users: vec![UserSpec::Named(UserType::Cautious)],
            methods: vec![Method::Pretrained, Method::Pbarl, Method::Preft, Method::Scratch],
            ablation_n: Vec::new(),
            env: EnvOverrides::default(),
            pretrain: default_pretrain(),
            prefs: PrefStage::default(),
            reward: RewardTrainConfig::default(),
            transitions: TransitionStage::default(),
            pbarl: PbarlConfig::default(),
            finetune: default_finetune(),
            eval: EvalStage::default(),
            artifacts: ArtifactPaths::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Resolves defaults, file text and `key=value` overrides, then validates.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Table::try_from(Self::default()).map_err(|e| cfg_err(e.to_string()))?;
        if let Some(text) = file_text {
            let file: toml::Table = toml::from_str(text).map_err(|e| cfg_err(one_line(&e.to_string())))?;
            merge(&mut tree, file);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut tree, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| cfg_err(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(cfg_err(format!("id {:?} must be non-empty [A-Za-z0-9_-]", self.id)));
        }
        for (name, empty) in [
            ("seeds", self.seeds.is_empty()),
            ("presets", self.presets.is_empty()),
            ("users", self.users.is_empty()),
            ("methods", self.methods.is_empty()),
        ] {
            if empty {
                return Err(cfg_err(format!("{name} must not be empty")));
            }
        }
        for u in &self.users {
            let w = u.omega();
            if w.len() != NUM_COSTS || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(cfg_err(format!("user {}: omega needs {NUM_COSTS} non-negative weights", u.name())));
            }
        }
        for p in &self.presets {
            self.env.apply(*p)?;
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.pbarl.validate()?;
        for &n in &self.ablation_n {
            PbarlConfig { n, ..self.pbarl.clone() }.validate()?;
        }
        if self.prefs.num_queries < 1 || self.prefs.holdout_queries < 1 {
            return Err(cfg_err("prefs.num_queries and prefs.holdout_queries must be >= 1"));
        }
        if self.transitions.episodes < 1 {
            return Err(cfg_err("transitions.episodes must be >= 1"));
        }
        if self.eval.episodes < 1 {
            return Err(cfg_err("eval.episodes must be >= 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// First 12 hex digits of the SHA-256 of the config with `out_dir` cleared.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes to json");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    /// `<out_dir>/<id>-<hash>`
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.id, self.content_hash()))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
