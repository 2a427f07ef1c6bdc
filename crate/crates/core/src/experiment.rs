//! Run directories, pipeline stages and the Δ-annotated report.
//!
//! Layout under the run directory:
//!
//! ```text
//! config.resolved.toml  manifest.json  <id>-<hash>.{txt,csv,json}
//! <preset>/seed<k>/pretrained.ckpt, transitions.jsonl
//! <preset>/seed<k>/<user>/prefs.jsonl, prefs_holdout.jsonl, reward.ckpt,
//!                          pbarl.ckpt, pbarl_n<n>.ckpt, preft.ckpt, scratch.ckpt
//! ```
//!
//! Every stage is a pure function of the resolved config and the files it
//! reads, so any stage can be rerun on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method, UserSpec};
use crate::env::{EnvConfig, Preset};
use crate::eval::{evaluate, pbrl_scratch, preft_finetune, EvalLabels, EvalReport};
use crate::nn::Checkpoint;
use crate::pbarl::{train_pbarl, wrap_policy, PbarlConfig, PbarlOutcome};
use crate::pg::pretrain_reinforce;
use crate::policy::{collect_transitions, load_transitions, save_transitions, Actor, PolicySpec, TransitionTuple};
use crate::pref::{generate_pref_dataset, reward_model_accuracy, train_reward_model, PrefDataset, RewardModel};
use crate::{derive_seed, Error, Result};

/// Seed streams of the individual stages.
mod stream {
    pub const PRETRAIN: u64 = 1;
    pub const PREFS: u64 = 2;
    pub const HOLDOUT: u64 = 3;
    pub const REWARD: u64 = 4;
    pub const TRANSITIONS: u64 = 5;
    pub const PBARL: u64 = 6;
    pub const PREFT: u64 = 7;
    pub const SCRATCH: u64 = 8;
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const MANIFEST: &str = "manifest.json";

/// One `(preset, user, seed)` cell of an experiment.
#[derive(Debug, Clone)]
pub struct Cell {
    pub preset: Preset,
    pub user: UserSpec,
    pub seed: u64,
}

impl Cell {
    pub fn user_name(&self) -> String {
        self.user.name()
    }
}

/// File locations for one cell.
#[derive(Debug, Clone)]
pub struct CellPaths {
    pub pretrained: PathBuf,
    pub transitions: PathBuf,
    pub prefs: PathBuf,
    pub holdout: PathBuf,
    pub reward: PathBuf,
    pub reward_record: PathBuf,
    pub preft: PathBuf,
    pub scratch: PathBuf,
    user_dir: PathBuf,
}

impl CellPaths {
    pub fn pbarl(&self, n: Option<usize>) -> PathBuf {
        match n {
            None => self.user_dir.join("pbarl.ckpt"),
            Some(n) => self.user_dir.join(format!("pbarl_n{n}.ckpt")),
        }
    }

    /// Label file of the interactive service.
    pub fn labels(&self) -> PathBuf {
        self.user_dir.join("labels.jsonl")
    }

    pub fn pbarl_record(&self, n: Option<usize>) -> PathBuf {
        self.pbarl(n).with_extension("record.json")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    pub seed: u64,
    /// Input file (relative to the run dir when inside it) → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

/// An opened run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    manifest: Manifest,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(ck.save(path)?)
}

impl Run {
    /// Creates (or reopens) `cfg.run_dir()` and writes the resolved config.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            Manifest {
                id: cfg.id.clone(),
                config_hash: cfg.content_hash(),
                entries: Vec::new(),
            }
        };
        Ok(Self { cfg, dir, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &preset in &self.cfg.presets {
            for user in &self.cfg.users {
                for &seed in &self.cfg.seeds {
                    out.push(Cell {
                        preset,
                        user: user.clone(),
                        seed,
                    });
                }
            }
        }
        out
    }

    pub fn env(&self, preset: Preset) -> Result<EnvConfig> {
        self.cfg.env.apply(preset)
    }

    pub fn paths(&self, cell: &Cell) -> CellPaths {
        let seed_dir = self.dir.join(cell.preset.name()).join(format!("seed{}", cell.seed));
        let user_dir = seed_dir.join(cell.user_name());
        let a = &self.cfg.artifacts;
        CellPaths {
            pretrained: a.pretrained.clone().unwrap_or_else(|| seed_dir.join("pretrained.ckpt")),
            transitions: a.transitions.clone().unwrap_or_else(|| seed_dir.join("transitions.jsonl")),
            prefs: a.preferences.clone().unwrap_or_else(|| user_dir.join("prefs.jsonl")),
            holdout: user_dir.join("prefs_holdout.jsonl"),
            reward: a.reward_model.clone().unwrap_or_else(|| user_dir.join("reward.ckpt")),
            reward_record: user_dir.join("reward.record.json"),
            preft: user_dir.join("preft.ckpt"),
            scratch: user_dir.join("scratch.ckpt"),
            user_dir,
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).display().to_string()
    }

    fn record(&mut self, stage: &str, cell: &Cell, with_user: bool, inputs: &[&Path], outputs: &[&Path], started: Instant) -> Result<()> {
        let mut entry = ManifestEntry {
            stage: stage.to_string(),
            preset: cell.preset.name().to_string(),
            user: with_user.then(|| cell.user_name()),
            seed: cell.seed,
            seconds: started.elapsed().as_secs_f64(),
            ..Default::default()
        };
        for p in inputs {
            entry.inputs.insert(self.rel(p), file_hash(p)?);
        }
        for p in outputs {
            entry.outputs.insert(self.rel(p), file_hash(p)?);
        }
        self.manifest
            .entries
            .retain(|e| !(e.stage == entry.stage && e.preset == entry.preset && e.user == entry.user && e.seed == entry.seed));
        self.manifest.entries.push(entry);
        write_json(&self.dir.join(MANIFEST), &self.manifest)
    }

    // Stages. Each `run_*` recomputes and overwrites its outputs; each
    // `ensure_*` loads an existing output and only runs the stage if absent.
    // Paths given under `[artifacts]` are never generated.

    pub fn run_pretrain(&mut self, cell: &Cell) -> Result<PolicySpec> {
        let t = Instant::now();
        let env = self.env(cell.preset)?;
        let (policy, record) = pretrain_reinforce(&env, &self.cfg.pretrain, derive_seed(cell.seed, stream::PRETRAIN))?;
        let p = self.paths(cell);
        save_checkpoint(&p.pretrained, &policy.to_checkpoint())?;
        let rec_path = p.pretrained.with_extension("record.json");
        write_json(&rec_path, &record)?;
        self.record("pretrain", cell, false, &[], &[&p.pretrained, &rec_path], t)?;
        Ok(policy)
    }

    pub fn load_pretrained(&self, cell: &Cell) -> Result<PolicySpec> {
        PolicySpec::from_checkpoint(&load_checkpoint(&self.paths(cell).pretrained)?)
    }

    pub fn ensure_pretrained(&mut self, cell: &Cell) -> Result<PolicySpec> {
        if self.paths(cell).pretrained.exists() || self.cfg.artifacts.pretrained.is_some() {
            self.load_pretrained(cell)
        } else {
            self.run_pretrain(cell)
        }
    }

    /// Generates the training and held-out preference sets.
    pub fn run_gen_prefs(&mut self, cell: &Cell) -> Result<PrefDataset> {
        let t = Instant::now();
        let env = self.env(cell.preset)?;
        let policy = self.load_pretrained(cell)?;
        let p = self.paths(cell);
        let omega = cell.user.omega();
        let stage = &self.cfg.prefs;
        let train = generate_pref_dataset(
            &env,
            &policy,
            &omega,
            &stage.gen_config(stage.num_queries),
            derive_seed(cell.seed, stream::PREFS),
        )?;
        let holdout = generate_pref_dataset(
            &env,
            &policy,
            &omega,
            &stage.gen_config(stage.holdout_queries),
            derive_seed(cell.seed, stream::HOLDOUT),
        )?;
        write_file(&p.prefs, b"")?;
        train.save(&p.prefs)?;
        holdout.save(&p.holdout)?;
        self.record("gen-prefs", cell, true, &[&p.pretrained], &[&p.prefs, &p.holdout], t)?;
        Ok(train)
    }

    pub fn ensure_prefs(&mut self, cell: &Cell) -> Result<PrefDataset> {
        let p = self.paths(cell);
        if self.cfg.artifacts.preferences.is_some() || (p.prefs.exists() && p.holdout.exists()) {
            if !p.prefs.exists() {
                return Err(Error::MissingArtifact(p.prefs.display().to_string()));
            }
            PrefDataset::load(&p.prefs)
        } else {
            self.run_gen_prefs(cell)
        }
    }

    /// Trains R̂ and reports its held-out accuracy (when a held-out set exists).
    pub fn run_train_reward(&mut self, cell: &Cell) -> Result<(RewardModel, Option<f64>)> {
        let t = Instant::now();
        let p = self.paths(cell);
        let data = PrefDataset::load(&p.prefs)?;
        let (model, mut record) = train_reward_model(&data.pairs, &self.cfg.reward, derive_seed(cell.seed, stream::REWARD))?;
        let accuracy = if p.holdout.exists() {
            Some(reward_model_accuracy(&model, &PrefDataset::load(&p.holdout)?.pairs)?)
        } else {
            None
        };
        save_checkpoint(&p.reward, &model.to_checkpoint())?;
        let summary = RewardSummary {
            epoch_loss: std::mem::take(&mut record.epoch_loss),
            holdout_accuracy: accuracy,
        };
        write_json(&p.reward_record, &summary)?;
        let mut inputs: Vec<&Path> = vec![&p.prefs];
        if p.holdout.exists() {
            inputs.push(&p.holdout);
        }
        self.record("train-reward", cell, true, &inputs, &[&p.reward, &p.reward_record], t)?;
        Ok((model, accuracy))
    }

    pub fn load_reward(&self, cell: &Cell) -> Result<RewardModel> {
        RewardModel::from_checkpoint(&load_checkpoint(&self.paths(cell).reward)?)
    }

    pub fn ensure_reward(&mut self, cell: &Cell) -> Result<RewardModel> {
        if self.paths(cell).reward.exists() || self.cfg.artifacts.reward_model.is_some() {
            self.load_reward(cell)
        } else {
            self.ensure_prefs(cell)?;
            Ok(self.run_train_reward(cell)?.0)
        }
    }

    /// Held-out accuracy stored by the reward stage, if any.
    pub fn reward_accuracy(&self, cell: &Cell) -> Result<Option<f64>> {
        let path = self.paths(cell).reward_record;
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: RewardSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(s.holdout_accuracy)
    }

    pub fn run_collect_transitions(&mut self, cell: &Cell) -> Result<Vec<TransitionTuple>> {
        let t = Instant::now();
        let env = self.env(cell.preset)?;
        let policy = self.load_pretrained(cell)?;
        let p = self.paths(cell);
        let tuples = collect_transitions(&env, &policy, self.cfg.transitions.episodes, derive_seed(cell.seed, stream::TRANSITIONS))?;
        write_file(&p.transitions, b"")?;
        save_transitions(&p.transitions, &tuples)?;
        self.record("collect-transitions", cell, false, &[&p.pretrained], &[&p.transitions], t)?;
        Ok(tuples)
    }

    pub fn ensure_transitions(&mut self, cell: &Cell) -> Result<Vec<TransitionTuple>> {
        let path = self.paths(cell).transitions;
        if path.exists() || self.cfg.artifacts.transitions.is_some() {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            load_transitions(&path)
        } else {
            self.run_collect_transitions(cell)
        }
    }

    fn pbarl_config(&self, cell: &Cell, n: Option<usize>) -> PbarlConfig {
        let base = self.cfg.pbarl.for_preset(cell.preset);
        match n {
            Some(n) => PbarlConfig { n, ..base },
            None => base,
        }
    }

    /// Trains the encoder; `n` selects an ablation list size.
    pub fn run_train_pbarl(&mut self, cell: &Cell, n: Option<usize>) -> Result<PbarlOutcome> {
        let transitions = self.ensure_transitions(cell)?;
        let reward = self.load_reward(cell)?;
        let t = Instant::now();
        let p = self.paths(cell);
        let out = train_pbarl(&transitions, &reward, &self.pbarl_config(cell, n), derive_seed(cell.seed, stream::PBARL))?;
        let ck_path = p.pbarl(n);
        save_checkpoint(&ck_path, &out.to_checkpoint())?;
        write_json(&p.pbarl_record(n), &out.record)?;
        let stage = match n {
            Some(n) => format!("train-pbarl-n{n}"),
            None => "train-pbarl".to_string(),
        };
        self.record(&stage, cell, true, &[&p.transitions, &p.reward], &[&ck_path, &p.pbarl_record(n)], t)?;
        Ok(out)
    }

    pub fn load_pbarl(&self, cell: &Cell, n: Option<usize>) -> Result<PbarlOutcome> {
        PbarlOutcome::from_checkpoint(&load_checkpoint(&self.paths(cell).pbarl(n))?)
    }

    pub fn ensure_pbarl(&mut self, cell: &Cell, n: Option<usize>) -> Result<PbarlOutcome> {
        if self.paths(cell).pbarl(n).exists() {
            self.load_pbarl(cell, n)
        } else {
            self.run_train_pbarl(cell, n)
        }
    }

    pub fn run_finetune_preft(&mut self, cell: &Cell) -> Result<PolicySpec> {
        let pre = self.load_pretrained(cell)?;
        let reward = self.load_reward(cell)?;
        let t = Instant::now();
        let env = self.env(cell.preset)?;
        let p = self.paths(cell);
        let (policy, record) = preft_finetune(&pre, &reward, &env, &self.cfg.finetune, derive_seed(cell.seed, stream::PREFT))?;
        save_checkpoint(&p.preft, &policy.to_checkpoint())?;
        let rec = p.preft.with_extension("record.json");
        write_json(&rec, &record)?;
        self.record("finetune-preft", cell, true, &[&p.pretrained, &p.reward], &[&p.preft, &rec], t)?;
        Ok(policy)
    }

    pub fn run_train_scratch(&mut self, cell: &Cell) -> Result<PolicySpec> {
        let reward = self.load_reward(cell)?;
        let t = Instant::now();
        let env = self.env(cell.preset)?;
        let p = self.paths(cell);
        let (policy, record) = pbrl_scratch(&reward, &env, &self.cfg.finetune, derive_seed(cell.seed, stream::SCRATCH))?;
        save_checkpoint(&p.scratch, &policy.to_checkpoint())?;
        let rec = p.scratch.with_extension("record.json");
        write_json(&rec, &record)?;
        self.record("train-scratch", cell, true, &[&p.reward], &[&p.scratch, &rec], t)?;
        Ok(policy)
    }

    fn ensure_policy(&mut self, cell: &Cell, method: Method) -> Result<PolicySpec> {
        let path = match method {
            Method::Preft => self.paths(cell).preft,
            Method::Scratch => self.paths(cell).scratch,
            _ => return self.ensure_pretrained(cell),
        };
        if path.exists() {
            PolicySpec::from_checkpoint(&load_checkpoint(&path)?)
        } else if method == Method::Preft {
            self.run_finetune_preft(cell)
        } else {
            self.run_train_scratch(cell)
        }
    }

    /// Evaluates every configured method (and ablation) on one cell.
    /// With `train_missing` unset, absent artifacts are errors.
    pub fn evaluate_cell(&mut self, cell: &Cell, train_missing: bool) -> Result<Vec<(String, EvalReport)>> {
        let env = self.env(cell.preset)?;
        let omega = cell.user.omega();
        let user = cell.user_name();
        let pre = if train_missing { self.ensure_pretrained(cell)? } else { self.load_pretrained(cell)? };
        let reward = if train_missing { self.ensure_reward(cell)? } else { self.load_reward(cell)? };
        let ev = &self.cfg.eval;
        let (episodes, eval_seed) = (ev.episodes, ev.seed);
        let eval = |actor: &dyn Actor, method: &str| {
            evaluate(&env, actor, &omega, episodes, eval_seed, Some(&reward), EvalLabels { method, user: &user })
        };
        let mut out = vec![("pretrained".to_string(), eval(&pre, "pretrained")?)];
        let mut pbarl_runs: Vec<Option<usize>> = Vec::new();
        if self.cfg.methods.contains(&Method::Pbarl) {
            pbarl_runs.push(None);
        }
        pbarl_runs.extend(self.cfg.ablation_n.iter().map(|&n| Some(n)));
        for n in pbarl_runs {
            let outcome = if train_missing { self.ensure_pbarl(cell, n)? } else { self.load_pbarl(cell, n)? };
            let mut wrapped = wrap_policy(&pre, &outcome.cvae, env.action_bound);
            wrapped.stochastic = self.cfg.eval.pbarl_stochastic;
            let name = match n {
                Some(n) => format!("pbarl-n{n}"),
                None => "pbarl".to_string(),
            };
            let r = eval(&wrapped, &name)?;
            out.push((name, r));
        }
        for method in [Method::Preft, Method::Scratch] {
            if !self.cfg.methods.contains(&method) {
                continue;
            }
            let policy = if train_missing {
                self.ensure_policy(cell, method)?
            } else {
                let path = match method {
                    Method::Preft => self.paths(cell).preft,
                    _ => self.paths(cell).scratch,
                };
                PolicySpec::from_checkpoint(&load_checkpoint(&path)?)?
            };
            out.push((method.name().to_string(), eval(&policy, method.name())?));
        }
        Ok(out)
    }

    /// Evaluates every cell and writes the report files.
    pub fn report(&mut self, train_missing: bool) -> Result<ExperimentReport> {
        let mut per_seed = Vec::new();
        let mut accuracies = Vec::new();
        for cell in self.cells() {
            let results = self.evaluate_cell(&cell, train_missing)?;
            let base = results[0].1.clone();
            for (method, r) in &results {
                if method == "pretrained" && !self.cfg.methods.contains(&Method::Pretrained) {
                    continue;
                }
                per_seed.push(ReportRow::from_eval(method, r, &base, Some(cell.seed))?);
            }
            accuracies.push(RewardAccuracy {
                preset: cell.preset.name().to_string(),
                user: cell.user_name(),
                seed: cell.seed,
                holdout_accuracy: self.reward_accuracy(&cell)?,
            });
        }
        let report = ExperimentReport {
            id: self.cfg.id.clone(),
            config_hash: self.cfg.content_hash(),
            eval_seed: self.cfg.eval.seed,
            eval_episodes: self.cfg.eval.episodes,
            seeds: self.cfg.seeds.clone(),
            rows: aggregate(&per_seed),
            per_seed,
            reward_accuracy: accuracies,
        };
        let stem = self.dir.join(format!("{}-{}", report.id, report.config_hash));
        write_file(&stem.with_extension("txt"), report.to_table().as_bytes())?;
        write_file(&stem.with_extension("csv"), report.to_csv().as_bytes())?;
        write_json(&stem.with_extension("json"), &report)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub epoch_loss: Vec<f64>,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAccuracy {
    pub preset: String,
    pub user: String,
    pub seed: u64,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub preset: String,
    pub user: String,
    /// `None` for rows averaged over all seeds.
    pub seed: Option<u64>,
    pub success_rate: f64,
    pub delta_success: f64,
    pub pref_return: f64,
    pub delta_pref_return: f64,
    pub learned_return: Option<f64>,
    pub mean_speed: f64,
    pub mean_length: f64,
}

impl ReportRow {
    fn from_eval(method: &str, r: &EvalReport, base: &EvalReport, seed: Option<u64>) -> Result<Self> {
        let (ds, dr) = r.delta(base)?;
        Ok(Self {
            method: method.to_string(),
            preset: r.preset.clone(),
            user: r.user.clone(),
            seed,
            success_rate: r.success_rate,
            delta_success: ds,
            pref_return: r.mean_pref_return,
            delta_pref_return: dr,
            learned_return: r.mean_learned_return,
            mean_speed: r.mean_speed,
            mean_length: r.mean_length,
        })
    }
}

fn aggregate(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.preset.clone(), r.user.clone(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let k = g.len() as f64;
            let mean = |f: &dyn Fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / k;
            let learned = g.iter().map(|r| r.learned_return).collect::<Option<Vec<f64>>>();
            ReportRow {
                method: key.2.clone(),
                preset: key.0.clone(),
                user: key.1.clone(),
                seed: None,
                success_rate: mean(&|r| r.success_rate),
                delta_success: mean(&|r| r.delta_success),
                pref_return: mean(&|r| r.pref_return),
                delta_pref_return: mean(&|r| r.delta_pref_return),
                learned_return: learned.map(|v| v.iter().sum::<f64>() / k),
                mean_speed: mean(&|r| r.mean_speed),
                mean_length: mean(&|r| r.mean_length),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    pub config_hash: String,
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// Means over seeds, one row per `(preset, user, method)`.
    pub rows: Vec<ReportRow>,
    pub per_seed: Vec<ReportRow>,
    pub reward_accuracy: Vec<RewardAccuracy>,
}

fn signed(v: f64, digits: usize) -> String {
    if v == 0.0 {
        "--".to_string()
    } else {
        format!("{v:+.digits$}")
    }
}

impl ExperimentReport {
    pub fn row(&self, preset: &str, user: &str, method: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.preset == preset && r.user == user && r.method == method)
    }

    pub fn seed_row(&self, preset: &str, user: &str, method: &str, seed: u64) -> Option<&ReportRow> {
        self.per_seed
            .iter()
            .find(|r| r.preset == preset && r.user == user && r.method == method && r.seed == Some(seed))
    }

    /// Aligned text table of the seed-averaged rows.
    pub fn to_table(&self) -> String {
        let header = ["preset", "user", "method", "succ%", "Δsucc", "return", "Δreturn", "R̂ return", "speed", "length"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.preset.clone(),
                r.user.clone(),
                r.method.clone(),
                format!("{:.1}", 100.0 * r.success_rate),
                signed(100.0 * r.delta_success, 1),
                format!("{:.2}", r.pref_return),
                signed(r.delta_pref_return, 2),
                r.learned_return.map_or("-".into(), |v| format!("{v:.2}")),
                format!("{:.3}", r.mean_speed),
                format!("{:.1}", r.mean_length),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "experiment {} ({})  seeds {:?}  eval {} episodes from seed {}\n",
            self.id, self.config_hash, self.seeds, self.eval_episodes, self.eval_seed
        );
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    let pad = w - v.chars().count();
                    if c < 3 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for a in &self.reward_accuracy {
            if let Some(acc) = a.holdout_accuracy {
                let _ = writeln!(out, "reward model {}/{}/seed{}: held-out accuracy {:.3}", a.preset, a.user, a.seed, acc);
            }
        }
        out
    }

    /// Per-seed rows followed by the means (`seed` column `mean`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "preset,user,method,seed,success_rate,delta_success,pref_return,delta_pref_return,learned_return,mean_speed,mean_length\n",
        );
        for r in self.per_seed.iter().chain(&self.rows) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.preset,
                r.user,
                r.method,
                r.seed.map_or("mean".into(), |s| s.to_string()),
                r.success_rate,
                r.delta_success,
                r.pref_return,
                r.delta_pref_return,
                r.learned_return.map_or(String::new(), |v| v.to_string()),
                r.mean_speed,
                r.mean_length
            );
        }
        out
    }
}

/// Runs every missing stage for every cell, then evaluates and writes the report.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<(Run, ExperimentReport)> {
    cfg.validate()?;
    let mut run = Run::open(cfg)?;
    let report = run.report(true)?;
    Ok((run, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::UserType;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let text = r#"
            id = "tiny"
            seeds = [0]
            users = ["neutral"]
            methods = ["pbarl"]
            [pretrain]
            env_step_budget = 2000
            hidden = [8]
            [prefs]
            num_queries = 20
            holdout_queries = 10
            [reward]
            hidden = [8]
            epochs = 2
            [transitions]
            episodes = 3
            [pbarl]
            steps = 5
            hidden = 8
            [finetune]
            env_step_budget = 500
            hidden = [8]
            [eval]
            episodes = 4
        "#;
        let mut c = ExperimentConfig::resolve(Some(text), &[]).unwrap();
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn minimal_config_gives_one_row() {
        let tmp = tempfile::tempdir().unwrap();
        let (run, report) = run_experiment(tiny(tmp.path())).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].method, "pbarl");
        let stem = run.dir.join(format!("tiny-{}", report.config_hash));
        for ext in ["txt", "csv", "json"] {
            assert!(stem.with_extension(ext).exists(), "{ext}");
        }
        assert!(run.dir.join(RESOLVED_CONFIG).exists());
        let stages: Vec<&str> = run.manifest().entries.iter().map(|e| e.stage.as_str()).collect();
        for s in ["pretrain", "gen-prefs", "train-reward", "collect-transitions", "train-pbarl"] {
            assert!(stages.contains(&s), "{stages:?}");
        }
        let resolved = ExperimentConfig::from_file(&run.dir.join(RESOLVED_CONFIG), &[]).unwrap();
        assert_eq!(resolved.content_hash(), report.config_hash);
    }

    #[test]
    fn rerun_reproduces_the_report_and_deltas_are_exact() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny(a.path());
        cfg.methods = vec![Method::Pretrained, Method::Pbarl, Method::Preft, Method::Scratch];
        cfg.ablation_n = vec![1, 3];
        cfg.users = vec![UserSpec::Named(UserType::Cautious)];
        let (_, r1) = run_experiment(cfg.clone()).unwrap();
        let (_, r2) = run_experiment(ExperimentConfig { out_dir: b.path().into(), ..cfg.clone() }).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        // Reopening the same run dir reuses every artifact.
        let (_, r3) = run_experiment(cfg).unwrap();
        assert_eq!(r1, r3);
        let pre = r1.row("feeding", "cautious", "pretrained").unwrap();
        assert_eq!(pre.delta_success, 0.0);
        for r in &r1.rows {
            assert_eq!(r.delta_success, r.success_rate - pre.success_rate);
            assert_eq!(r.delta_pref_return, r.pref_return - pre.pref_return);
        }
        let methods: Vec<&str> = r1.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["pretrained", "pbarl", "pbarl-n1", "pbarl-n3", "preft", "scratch"]);
        assert!(r1.to_table().contains("pbarl-n3"));
        assert_eq!(r1.to_csv().lines().count(), 1 + 2 * 6);
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = Run::open(tiny(tmp.path())).unwrap();
        let cell = run.cells()[0].clone();
        assert!(run.run_gen_prefs(&cell).unwrap_err().is_missing_artifact());
        assert!(run.run_train_reward(&cell).unwrap_err().is_missing_artifact());
        assert!(run.report(false).unwrap_err().is_missing_artifact());
        let mut cfg = tiny(tmp.path());
        cfg.artifacts.pretrained = Some(tmp.path().join("nope.ckpt"));
        assert!(run_experiment(cfg).err().unwrap().is_missing_artifact());
    }
}
