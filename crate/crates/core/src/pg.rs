//! Episodic REINFORCE with a per-timestep mean baseline and entropy bonus.
//!
//! Used for pre-training on the task reward, for fine-tuning against a learned
//! reward, and for training against a learned reward from scratch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, ACTION_DIM, STATE_DIM};
use crate::nn::gaussian::{traced_entropy, traced_log_density};
use crate::nn::{AdamConfig, AdamState, Parameters, Tape, Tensor};
use crate::policy::{rollout, ActMode, GaussianMlpPolicy, PolicySpec, LOG_STD_MAX, LOG_STD_MIN};
use crate::pref::RewardModel;
use crate::{derive_seed, Error, Result};

/// Per-step reward optimized by the trainer.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    Task,
    Learned(&'a RewardModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgConfig {
    /// Hidden sizes for freshly initialized policies.
    pub hidden: Vec<usize>,
    /// Initial log-std written into the output bias of fresh policies.
    pub init_log_std: f64,
    /// Squash fresh policies' means into the env action bound.
    pub squash_mean: bool,
    pub episodes_per_update: usize,
    /// Maximum number of gradient updates.
    pub updates: usize,
    /// Optional cap on environment steps; whichever budget ends first stops training.
    pub env_step_budget: Option<usize>,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub adam: AdamConfig,
    /// Stop once the mean-mode success rate reaches this value.
    pub target_success: Option<f64>,
    pub eval_episodes: usize,
    pub eval_every: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_log_std: -0.5,
            squash_mean: true,
            episodes_per_update: 16,
            updates: 2000,
            env_step_budget: None,
            gamma: 0.99,
            entropy_coef: 1e-3,
            adam: AdamConfig::with_lr(1e-3),
            target_success: None,
            eval_episodes: 50,
            eval_every: 10,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_update < 1 {
            return Err(Error::InvalidConfig("episodes_per_update must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must lie in [0, 1]".into()));
        }
        if self.eval_every < 1 || self.eval_episodes < 1 {
            return Err(Error::InvalidConfig("eval_every and eval_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PgRecord {
    /// Mean undiscounted return of the optimized reward per update.
    pub mean_return: Vec<f64>,
    /// Fraction of successful sampled episodes per update.
    pub batch_success: Vec<f64>,
    /// `(update, success rate)` of periodic mean-mode evaluations.
    pub evals: Vec<(usize, f64)>,
    pub env_steps: usize,
    pub updates: usize,
    pub reached_target: bool,
}

/// Fresh Glorot-initialized Gaussian policy with the log-std bias set.
pub fn init_policy(env: &EnvConfig, cfg: &PgConfig, seed: u64) -> Result<GaussianMlpPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = cfg.squash_mean.then_some(env.action_bound);
    let mut p = GaussianMlpPolicy::new(&cfg.hidden, bound, &mut rng)?;
    let bias = p.net.layers_mut().last_mut().expect("at least one layer").bias.data_mut();
    for b in &mut bias[ACTION_DIM..] {
        *b = cfg.init_log_std;
    }
    Ok(p)
}

/// Mean-mode success rate over `episodes` spawns derived from `seed`.
pub fn success_rate(env: &EnvConfig, policy: &PolicySpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut wins = 0usize;
    for i in 0..episodes {
        if rollout(env, policy, derive_seed(seed, i as u64), ActMode::Mean)?.success {
            wins += 1;
        }
    }
    Ok(wins as f64 / episodes as f64)
}

struct Batch {
    obs: Vec<f64>,
    raw_actions: Vec<f64>,
    clamped: Vec<f64>,
    task_rewards: Vec<f64>,
    /// Row ranges per episode.
    episodes: Vec<std::ops::Range<usize>>,
    successes: usize,
}

/// Runs `count` stochastic episodes in lockstep so the policy network is
/// evaluated once per time step for the whole batch.
fn collect_batch(env: &EnvConfig, policy: &GaussianMlpPolicy, count: usize, seed: u64) -> Result<Batch> {
    let mut states: Vec<_> = (0..count).map(|i| env::reset(env, derive_seed(seed, i as u64))).collect();
    let mut rngs: Vec<_> = (0..count)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, i as u64), 1)))
        .collect();
    let mut per_ep: Vec<Vec<(Vec<f64>, [f64; 2], [f64; 2], f64)>> = vec![Vec::new(); count];
    let mut successes = 0;
    loop {
        let active: Vec<usize> = (0..count).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut flat = Vec::with_capacity(active.len() * STATE_DIM);
        for &i in &active {
            flat.extend(states[i].observation());
        }
        let out = policy.net.forward_batch(&Tensor::from_vec(active.len(), STATE_DIM, flat)?)?;
        for (row, &i) in active.iter().enumerate() {
            let o = out.row_slice(row);
            let mut raw = [0.0; ACTION_DIM];
            for d in 0..ACTION_DIM {
                let eta: f64 = StandardNormal.sample(&mut rngs[i]);
                raw[d] = policy.squash(o[d]) + o[ACTION_DIM + d].clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * eta;
            }
            let obs = states[i].observation();
            let step = env::step(env, &states[i], &raw)?;
            if step.success {
                successes += 1;
            }
            per_ep[i].push((obs, raw, env::clamp_action(env, &raw), step.task_reward));
            states[i] = step.state;
        }
    }
    let mut batch = Batch {
        obs: Vec::new(),
        raw_actions: Vec::new(),
        clamped: Vec::new(),
        task_rewards: Vec::new(),
        episodes: Vec::with_capacity(count),
        successes,
    };
    for ep in per_ep {
        let start = batch.task_rewards.len();
        for (obs, raw, clamped, r) in ep {
            batch.obs.extend(obs);
            batch.raw_actions.extend(raw);
            batch.clamped.extend(clamped);
            batch.task_rewards.push(r);
        }
        batch.episodes.push(start..batch.task_rewards.len());
    }
    Ok(batch)
}

fn step_rewards(batch: &Batch, reward: RewardSource<'_>) -> Result<Vec<f64>> {
    match reward {
        RewardSource::Task => Ok(batch.task_rewards.clone()),
        RewardSource::Learned(model) => {
            let n = batch.task_rewards.len();
            let mut x = Vec::with_capacity(n * (STATE_DIM + ACTION_DIM));
            for r in 0..n {
                x.extend_from_slice(&batch.obs[r * STATE_DIM..(r + 1) * STATE_DIM]);
                x.extend_from_slice(&batch.clamped[r * ACTION_DIM..(r + 1) * ACTION_DIM]);
            }
            model.predict_batch(&Tensor::from_vec(n, STATE_DIM + ACTION_DIM, x)?)
        }
    }
}

/// Normalized advantages: discounted reward-to-go minus the mean
/// reward-to-go of all episodes at the same time index.
pub fn advantages(rewards: &[f64], episodes: &[std::ops::Range<usize>], gamma: f64) -> Vec<f64> {
    let mut rtg = vec![0.0; rewards.len()];
    for ep in episodes {
        let mut acc = 0.0;
        for r in ep.clone().rev() {
            acc = rewards[r] + gamma * acc;
            rtg[r] = acc;
        }
    }
    let horizon = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    for ep in episodes {
        for (t, r) in ep.clone().enumerate() {
            sums[t] += rtg[r];
            counts[t] += 1;
        }
    }
    let mut adv = vec![0.0; rewards.len()];
    for ep in episodes {
        for (t, r) in ep.clone().enumerate() {
            adv[r] = rtg[r] - sums[t] / counts[t] as f64;
        }
    }
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 1e-8 {
        for a in &mut adv {
            *a = (*a - mean) / std;
        }
    }
    adv
}

/// Trains `policy` in place against `reward`.
pub fn train_policy_gradient(
    env: &EnvConfig,
    policy: &mut GaussianMlpPolicy,
    reward: RewardSource<'_>,
    cfg: &PgConfig,
    seed: u64,
) -> Result<PgRecord> {
    cfg.validate()?;
    let mut adam = AdamState::new(cfg.adam.clone(), &policy.net.tensors());
    let mut record = PgRecord::default();
    let eval_seed = derive_seed(seed, 0xE7A1);
    let check_target = |policy: &GaussianMlpPolicy, record: &mut PgRecord, update: usize| -> Result<bool> {
        let Some(target) = cfg.target_success else {
            return Ok(false);
        };
        let spec = PolicySpec::MlpGaussian(policy.clone());
        let rate = success_rate(env, &spec, cfg.eval_episodes, eval_seed)?;
        record.evals.push((update, rate));
        Ok(rate >= target)
    };
    if check_target(policy, &mut record, 0)? {
        record.reached_target = true;
        return Ok(record);
    }
    for update in 0..cfg.updates {
        if cfg.env_step_budget.is_some_and(|b| record.env_steps >= b) {
            break;
        }
        let batch = collect_batch(env, policy, cfg.episodes_per_update, derive_seed(seed, update as u64))?;
        let rewards = step_rewards(&batch, reward)?;
        let n = rewards.len();
        record.env_steps += n;
        record.mean_return.push(rewards.iter().sum::<f64>() / cfg.episodes_per_update as f64);
        record.batch_success.push(batch.successes as f64 / cfg.episodes_per_update as f64);
        let adv = advantages(&rewards, &batch.episodes, cfg.gamma);

        let tape = Tape::new();
        let net = policy.net.bind(&tape);
        let out = net.forward(tape.constant(Tensor::from_vec(n, STATE_DIM, batch.obs)?))?;
        let mut mean = out.slice_cols(0, ACTION_DIM)?;
        if let Some(b) = policy.mean_bound {
            mean = mean.scale(1.0 / b).tanh().scale(b);
        }
        let log_std = out.slice_cols(ACTION_DIM, 2 * ACTION_DIM)?.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let actions = tape.constant(Tensor::from_vec(n, ACTION_DIM, batch.raw_actions)?);
        let logp = traced_log_density(mean, log_std, actions)?;
        let weighted = logp.mul(tape.constant(Tensor::from_vec(n, 1, adv)?))?.mean();
        let loss = weighted
            .add(traced_entropy(log_std).mean().scale(cfg.entropy_coef))?
            .neg();
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("policy-gradient loss {value} at update {update}")));
        }
        let grads = net.grads(&tape.backward(loss)?)?;
        adam.step(policy.net.tensors_mut(), &grads)?;
        record.updates = update + 1;
        if (update + 1) % cfg.eval_every == 0 && check_target(policy, &mut record, update + 1)? {
            record.reached_target = true;
            break;
        }
    }
    Ok(record)
}

/// Pre-trains a fresh policy on the task reward until the target success
/// rate or the budget is reached.
pub fn pretrain_reinforce(env: &EnvConfig, cfg: &PgConfig, seed: u64) -> Result<(PolicySpec, PgRecord)> {
    let mut policy = init_policy(env, cfg, derive_seed(seed, 0x1417))?;
    let record = train_policy_gradient(env, &mut policy, RewardSource::Task, cfg, seed)?;
    Ok((PolicySpec::MlpGaussian(policy), record))
}
