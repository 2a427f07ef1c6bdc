//! HTTP label service behind the browser labeling client.
//!
//! Labels are appended to a preference dataset file as they arrive. Training
//! jobs run one at a time on a blocking thread, so label ingestion continues
//! while R̂ and the PbARL encoder are retrained.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use anyhow::Context;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pbarl::env::EnvConfig;
use pbarl::experiment::{load_checkpoint, save_checkpoint};
use pbarl::pbarl::{train_pbarl, wrap_policy, PbarlConfig, PbarlOutcome, WrappedPolicy};
use pbarl::policy::{collect_transitions, rollout, ActMode, Actor, PolicySpec, Trajectory, TransitionTuple};
use pbarl::pref::{
    is_valid_label, scripted_teacher_label, train_reward_model, LabelSource, PrefDataset, PrefHeader, PrefTrajectory,
    PreferencePair, RewardModel, RewardTrainConfig,
};
use pbarl::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::exit::Failure;

/// Everything the service needs, resolved from the experiment config.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub env: EnvConfig,
    pub pretrained: PolicySpec,
    pub user: String,
    /// Weights of the scripted robot user and of the returned preference readouts.
    pub omega: Vec<f64>,
    pub tie_threshold: f64,
    pub reward: RewardTrainConfig,
    pub pbarl: PbarlConfig,
    pub transition_episodes: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub robot_user: bool,
    pub min_labels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: usize,
    pub stages: Vec<String>,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct ServedPair {
    a: PrefTrajectory,
    b: PrefTrajectory,
}

struct Inner {
    next_pair: u64,
    rng: ChaCha8Rng,
    pairs: HashMap<String, ServedPair>,
    labels: Vec<PreferencePair>,
    index: HashMap<String, usize>,
    reward: Option<Arc<RewardModel>>,
    personalized: Option<Arc<WrappedPolicy>>,
    transitions: Option<Arc<Vec<TransitionTuple>>>,
    jobs: Vec<Job>,
}

pub struct Service {
    cfg: ServiceConfig,
    inner: Mutex<Inner>,
    train_lock: tokio::sync::Mutex<()>,
}

fn offending_line(path: &Path, line: usize) -> String {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| t.lines().nth(line.saturating_sub(1)).map(str::to_string))
        .unwrap_or_default()
}

fn pair_number(id: &str) -> Option<u64> {
    id.strip_prefix('p')?.parse().ok()
}

impl Service {
    /// Opens (or creates) the label file. A corrupt file is an error naming
    /// the offending line.
    pub fn open(cfg: ServiceConfig) -> anyhow::Result<Self> {
        let path = &cfg.dataset;
        let dataset = if path.exists() {
            match PrefDataset::load(path) {
                Ok(d) => d,
                Err(pbarl::Error::Format { line, message, .. }) => {
                    let text = offending_line(path, line);
                    return Err(Failure::new(
                        "invalid-input",
                        1,
                        format!("corrupt dataset {}:{line}: {message}; offending line: {text}", path.display()),
                    )
                    .into());
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            let d = PrefDataset {
                header: PrefHeader::new(cfg.env.preset, &cfg.omega, cfg.tie_threshold, cfg.seed),
                pairs: Vec::new(),
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
            }
            d.save(path)?;
            d
        };
        if dataset.header.preset != cfg.env.preset {
            return Err(Failure::new(
                "invalid-input",
                1,
                format!(
                    "dataset {} holds {} labels, service runs {}",
                    path.display(),
                    dataset.header.preset.name(),
                    cfg.env.preset.name()
                ),
            )
            .into());
        }
        let mut index = HashMap::new();
        let mut pairs = HashMap::new();
        let mut next_pair = 0;
        for (k, p) in dataset.pairs.iter().enumerate() {
            if let Some(id) = &p.pair_id {
                index.insert(id.clone(), k);
                pairs.insert(id.clone(), ServedPair { a: p.traj0.clone(), b: p.traj1.clone() });
                if let Some(n) = pair_number(id) {
                    next_pair = next_pair.max(n + 1);
                }
            }
        }
        let reward_path = artifact(path, "reward.ckpt");
        let reward = if reward_path.exists() {
            Some(Arc::new(RewardModel::from_checkpoint(&load_checkpoint(&reward_path)?)?))
        } else {
            None
        };
        let pbarl_path = artifact(path, "pbarl.ckpt");
        let personalized = if pbarl_path.exists() {
            let out = PbarlOutcome::from_checkpoint(&load_checkpoint(&pbarl_path)?)?;
            Some(Arc::new(wrap_policy(&cfg.pretrained, &out.cvae, cfg.env.action_bound)))
        } else {
            None
        };
        Ok(Self {
            inner: Mutex::new(Inner {
                next_pair,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0a1e)),
                pairs,
                labels: dataset.pairs,
                index,
                reward,
                personalized,
                transitions: None,
                jobs: Vec::new(),
            }),
            cfg,
            train_lock: tokio::sync::Mutex::new(()),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn label_count(&self) -> usize {
        self.lock().labels.len()
    }

    /// Two stochastic episodes in random order. Once a personalized policy
    /// exists, each side comes from either policy with equal odds.
    fn new_pair(&self) -> pbarl::Result<(String, Trajectory, Trajectory)> {
        let (id, seeds, sources) = {
            let mut inner = self.lock();
            let n = inner.next_pair;
            inner.next_pair += 1;
            let personalized = inner.personalized.clone();
            let mut pick = || match &personalized {
                Some(p) if inner.rng.random_bool(0.5) => Some(p.clone()),
                _ => None,
            };
            let sources = [pick(), pick()];
            let base = derive_seed(self.cfg.seed, 0x9a1);
            (format!("p{n}"), [derive_seed(base, 2 * n), derive_seed(base, 2 * n + 1)], sources)
        };
        let run = |seed: u64, src: &Option<Arc<WrappedPolicy>>| -> pbarl::Result<Trajectory> {
            let actor: &dyn Actor = match src {
                Some(p) => p.as_ref(),
                None => &self.cfg.pretrained,
            };
            rollout(&self.cfg.env, actor, seed, ActMode::Stochastic)
        };
        let a = run(seeds[0], &sources[0])?;
        let b = run(seeds[1], &sources[1])?;
        self.lock().pairs.insert(
            id.clone(),
            ServedPair {
                a: PrefTrajectory::from_trajectory(&a),
                b: PrefTrajectory::from_trajectory(&b),
            },
        );
        Ok((id, a, b))
    }

    /// Records `y` for a served pair. Returns the label count, or `None` for an unknown id.
    fn label(&self, pair_id: &str, y: f64, source: LabelSource) -> pbarl::Result<Option<usize>> {
        let mut inner = self.lock();
        let Some(served) = inner.pairs.get(pair_id) else {
            return Ok(None);
        };
        let pair = PreferencePair {
            traj0: served.a.clone(),
            traj1: served.b.clone(),
            y,
            source,
            pair_id: Some(pair_id.to_string()),
        };
        PrefDataset::append(&self.cfg.dataset, &pair)?;
        match inner.index.get(pair_id) {
            Some(&k) => inner.labels[k] = pair,
            None => {
                let k = inner.labels.len();
                inner.index.insert(pair_id.to_string(), k);
                inner.labels.push(pair);
            }
        }
        Ok(Some(inner.labels.len()))
    }

    fn robot_label(&self, count: usize) -> pbarl::Result<usize> {
        let mut total = self.label_count();
        for _ in 0..count {
            let (id, a, b) = self.new_pair()?;
            let y = scripted_teacher_label(
                &PrefTrajectory::from_trajectory(&a),
                &PrefTrajectory::from_trajectory(&b),
                &self.cfg.omega,
                self.cfg.tie_threshold,
            )?;
            total = self.label(&id, y, LabelSource::Scripted)?.expect("pair was just served");
        }
        Ok(total)
    }

    fn train(&self, job: usize, stages: &[String]) -> anyhow::Result<String> {
        let mut notes = Vec::new();
        let started = Instant::now();
        if stages.iter().any(|s| s == "reward") {
            let labels = self.lock().labels.clone();
            if labels.len() < self.cfg.min_labels.max(1) {
                anyhow::bail!("need at least {} labels, have {}", self.cfg.min_labels.max(1), labels.len());
            }
            let (model, _) = train_reward_model(&labels, &self.cfg.reward, derive_seed(self.cfg.seed, 0x7000 + job as u64))?;
            save_checkpoint(&artifact(&self.cfg.dataset, "reward.ckpt"), &model.to_checkpoint())?;
            self.lock().reward = Some(Arc::new(model));
            notes.push(format!("reward model trained on {} labels", labels.len()));
        }
        if stages.iter().any(|s| s == "pbarl") {
            let (reward, cached) = {
                let inner = self.lock();
                (inner.reward.clone(), inner.transitions.clone())
            };
            let reward = reward.ok_or_else(|| anyhow::anyhow!("no reward model yet; include the \"reward\" stage"))?;
            let transitions = match cached {
                Some(t) => t,
                None => {
                    let t = Arc::new(collect_transitions(
                        &self.cfg.env,
                        &self.cfg.pretrained,
                        self.cfg.transition_episodes,
                        derive_seed(self.cfg.seed, 5),
                    )?);
                    self.lock().transitions = Some(t.clone());
                    t
                }
            };
            let out = train_pbarl(&transitions, &reward, &self.cfg.pbarl.for_preset(self.cfg.env.preset), derive_seed(self.cfg.seed, 0x8000 + job as u64))?;
            save_checkpoint(&artifact(&self.cfg.dataset, "pbarl.ckpt"), &out.to_checkpoint())?;
            let wrapped = wrap_policy(&self.cfg.pretrained, &out.cvae, self.cfg.env.action_bound);
            self.lock().personalized = Some(Arc::new(wrapped));
            notes.push(format!("encoder trained for {} steps", out.record.steps));
        }
        Ok(format!("{} in {:.1} s", notes.join("; "), started.elapsed().as_secs_f64()))
    }

    fn set_job(&self, id: usize, state: JobState, message: Option<String>, error: Option<String>) {
        let mut inner = self.lock();
        let job = &mut inner.jobs[id];
        job.state = state;
        job.message = message;
        job.error = error;
    }
}

/// `<dataset stem>.<suffix>` next to the dataset file.
fn artifact(dataset: &Path, suffix: &str) -> PathBuf {
    let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset.with_file_name(format!("{stem}.{suffix}"))
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<pbarl::Error> for ApiError {
    fn from(e: pbarl::Error) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<Service>;

#[derive(Serialize)]
struct TrajView {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    success: bool,
}

impl From<&Trajectory> for TrajView {
    fn from(t: &Trajectory) -> Self {
        Self {
            states: t.states_with_final(),
            actions: t.steps.iter().map(|s| s.action.clone()).collect(),
            success: t.success,
        }
    }
}

async fn meta(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let env = &svc.cfg.env;
    Json(json!({
        "preset": env.preset.name(),
        "dt": env.dt,
        "horizon": env.horizon,
        "action_bound": env.action_bound,
        "target_extent": env.target_extent,
        "success_radius": env.success_radius,
        "state_layout": ["x", "y", "vx", "vy", "target_x", "target_y", "payload"],
        "user": svc.cfg.user,
        "robot_user": svc.cfg.robot_user,
        "min_labels": svc.cfg.min_labels,
    }))
}

async fn pair(State(svc): State<Shared>) -> ApiResult<serde_json::Value> {
    let (id, a, b) = svc.new_pair()?;
    Ok(Json(json!({
        "pair_id": id,
        "traj_a": TrajView::from(&a),
        "traj_b": TrajView::from(&b),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    pair_id: String,
    y: f64,
}

async fn label(State(svc): State<Shared>, Json(req): Json<LabelRequest>) -> ApiResult<serde_json::Value> {
    if !is_valid_label(req.y) {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("y must be 0, 0.5 or 1, got {}", req.y)));
    }
    match svc.label(&req.pair_id, req.y, LabelSource::HumanUi)? {
        Some(count) => Ok(Json(json!({ "pair_id": req.pair_id, "y": req.y, "count": count }))),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("unknown pair id {:?}", req.pair_id))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotRequest {
    count: usize,
}

async fn robot_label(State(svc): State<Shared>, Json(req): Json<RobotRequest>) -> ApiResult<serde_json::Value> {
    if !svc.cfg.robot_user {
        return Err(ApiError(StatusCode::FORBIDDEN, "robot user is disabled; start with --robot-user".into()));
    }
    let svc2 = svc.clone();
    let count = tokio::task::spawn_blocking(move || svc2.robot_label(req.count))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "labeled": req.count, "count": count })))
}

async fn stats(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let inner = svc.lock();
    let count_y = |y: f64| inner.labels.iter().filter(|p| p.y == y).count();
    let count = inner.labels.len();
    Json(json!({
        "count": count,
        "prefer_a": count_y(0.0),
        "prefer_b": count_y(1.0),
        "ties": count_y(0.5),
        "unlabeled_pairs": inner.pairs.keys().filter(|k| !inner.index.contains_key(*k)).count(),
        "min_labels": svc.cfg.min_labels,
        "ready": count >= svc.cfg.min_labels.max(1),
        "path": svc.cfg.dataset.display().to_string(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    stages: Vec<String>,
}

async fn train(State(svc): State<Shared>, Json(req): Json<TrainRequest>) -> Result<(StatusCode, Json<Job>), ApiError> {
    if req.stages.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "stages must not be empty".into()));
    }
    if let Some(s) = req.stages.iter().find(|s| *s != "reward" && *s != "pbarl") {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("unknown stage {s:?}; expected \"reward\" or \"pbarl\"")));
    }
    let job = {
        let mut inner = svc.lock();
        let job = Job {
            id: inner.jobs.len(),
            stages: req.stages,
            state: JobState::Queued,
            message: None,
            error: None,
        };
        inner.jobs.push(job.clone());
        job
    };
    let (svc2, id, stages) = (svc.clone(), job.id, job.stages.clone());
    tokio::spawn(async move {
        let _serial = svc2.train_lock.lock().await;
        svc2.set_job(id, JobState::Running, None, None);
        let svc3 = svc2.clone();
        match tokio::task::spawn_blocking(move || svc3.train(id, &stages)).await {
            Ok(Ok(msg)) => svc2.set_job(id, JobState::Done, Some(msg), None),
            Ok(Err(e)) => svc2.set_job(id, JobState::Failed, None, Some(format!("{e:#}"))),
            Err(e) => svc2.set_job(id, JobState::Failed, None, Some(e.to_string())),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn train_status(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let inner = svc.lock();
    Json(json!({
        "latest": inner.jobs.last(),
        "jobs": inner.jobs,
        "reward_ready": inner.reward.is_some(),
        "personalized_ready": inner.personalized.is_some(),
    }))
}

#[derive(Deserialize)]
struct RolloutQuery {
    policy: String,
    #[serde(default)]
    seed: u64,
}

async fn rollout_view(State(svc): State<Shared>, Query(q): Query<RolloutQuery>) -> ApiResult<serde_json::Value> {
    let (personalized, reward) = {
        let inner = svc.lock();
        (inner.personalized.clone(), inner.reward.clone())
    };
    let actor: &dyn Actor = match q.policy.as_str() {
        "pretrained" => &svc.cfg.pretrained,
        "personalized" => match &personalized {
            Some(p) => p.as_ref(),
            None => return Err(ApiError(StatusCode::CONFLICT, "no personalized policy yet; run the pbarl stage".into())),
        },
        other => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                format!("policy must be \"pretrained\" or \"personalized\", got {other:?}"),
            ))
        }
    };
    let env = &svc.cfg.env;
    let t = rollout(env, actor, q.seed, ActMode::Mean)?;
    let pref_return = t.pref_return(&svc.cfg.omega)? + env.return_offset * t.len() as f64;
    let learned = match &reward {
        Some(m) => Some(m.segment_return(&PrefTrajectory::from_trajectory(&t))?),
        None => None,
    };
    Ok(Json(json!({
        "policy": q.policy,
        "seed": q.seed,
        "trajectory": TrajView::from(&t),
        "length": t.len(),
        "mean_speed": t.mean_speed(),
        "pref_return": pref_return,
        "learned_return": learned,
    })))
}

pub fn router(svc: Shared, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/pair", get(pair))
        .route("/api/label", post(label))
        .route("/api/robot/label", post(robot_label))
        .route("/api/dataset/stats", get(stats))
        .route("/api/train", post(train))
        .route("/api/train/status", get(train_status))
        .route("/api/rollout", get(rollout_view))
        .with_state(svc);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr`; an occupied port is a `port-busy` failure.
pub async fn bind(addr: SocketAddr) -> anyhow::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            Failure::new("port-busy", 4, format!("port {} is already in use", addr.port())).into()
        } else {
            anyhow::Error::new(e).context(format!("binding {addr}"))
        }
    })
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> anyhow::Result<()> {
    axum::serve(listener, app).await.context("serving")
}
