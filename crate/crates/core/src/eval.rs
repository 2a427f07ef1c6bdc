//! Paired evaluation and the two baselines: fine-tuning the pre-trained
//! policy against the learned reward, and learning from scratch against it.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::pg::{init_policy, train_policy_gradient, PgConfig, PgRecord, RewardSource};
use crate::policy::{rollout, ActMode, Actor, PolicySpec};
use crate::pref::{PrefTrajectory, RewardModel};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub preset: String,
    pub user: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean of `Σ_t (pref_reward + c₀)` under the ground-truth weights.
    pub mean_pref_return: f64,
    /// Mean of `Σ_t R̂(s_t, a_t)` when a reward model was supplied.
    pub mean_learned_return: Option<f64>,
    pub mean_task_return: f64,
    pub mean_speed: f64,
    pub mean_length: f64,
    /// Base seed of the evaluation spawn set.
    pub seed: u64,
}

impl EvalReport {
    /// `(Δ success rate, Δ preference return)` against `baseline`.
    pub fn delta(&self, baseline: &EvalReport) -> Result<(f64, f64)> {
        if baseline.seed != self.seed || baseline.episodes != self.episodes {
            return Err(Error::InvalidConfig("reports were evaluated on different seed sets".into()));
        }
        Ok((
            self.success_rate - baseline.success_rate,
            self.mean_pref_return - baseline.mean_pref_return,
        ))
    }
}

/// Labels attached to a report.
#[derive(Debug, Clone, Copy)]
pub struct EvalLabels<'a> {
    pub method: &'a str,
    pub user: &'a str,
}

/// Mean-mode rollouts on the spawn set `{derive_seed(seed, i)}`.
pub fn evaluate(
    env: &EnvConfig,
    actor: &dyn Actor,
    omega: &[f64],
    episodes: usize,
    seed: u64,
    reward_model: Option<&RewardModel>,
    labels: EvalLabels<'_>,
) -> Result<EvalReport> {
    if episodes < 1 {
        return Err(Error::InvalidConfig("eval episodes must be >= 1".into()));
    }
    let mut successes = 0;
    let (mut pref, mut learned, mut task, mut speed, mut length) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..episodes {
        let t = rollout(env, actor, derive_seed(seed, i as u64), ActMode::Mean)?;
        if t.success {
            successes += 1;
        }
        pref += t.pref_return(omega)? + env.return_offset * t.len() as f64;
        if let Some(m) = reward_model {
            learned += m.segment_return(&PrefTrajectory::from_trajectory(&t))?;
        }
        task += t.task_return();
        speed += t.mean_speed();
        length += t.len() as f64;
    }
    let k = episodes as f64;
    Ok(EvalReport {
        method: labels.method.to_string(),
        preset: env.preset.name().to_string(),
        user: labels.user.to_string(),
        episodes,
        successes,
        success_rate: successes as f64 / k,
        mean_pref_return: pref / k,
        mean_learned_return: reward_model.map(|_| learned / k),
        mean_task_return: task / k,
        mean_speed: speed / k,
        mean_length: length / k,
        seed,
    })
}

/// Clones the pre-trained policy and fine-tunes the clone with `R̂` as the only reward.
pub fn preft_finetune(
    policy: &PolicySpec,
    reward: &RewardModel,
    env: &EnvConfig,
    cfg: &PgConfig,
    seed: u64,
) -> Result<(PolicySpec, PgRecord)> {
    let PolicySpec::MlpGaussian(p) = policy else {
        return Err(Error::InvalidConfig("fine-tuning needs a trainable mlp-gaussian policy".into()));
    };
    let mut clone = p.clone();
    let cfg = PgConfig { target_success: None, ..cfg.clone() };
    let record = train_policy_gradient(env, &mut clone, RewardSource::Learned(reward), &cfg, seed)?;
    Ok((PolicySpec::MlpGaussian(clone), record))
}

/// Fresh policy trained with `R̂` as the only reward.
pub fn pbrl_scratch(reward: &RewardModel, env: &EnvConfig, cfg: &PgConfig, seed: u64) -> Result<(PolicySpec, PgRecord)> {
    let mut policy = init_policy(env, cfg, derive_seed(seed, 0x5c7a))?;
    let cfg = PgConfig { target_success: None, ..cfg.clone() };
    let record = train_policy_gradient(env, &mut policy, RewardSource::Learned(reward), &cfg, seed)?;
    Ok((PolicySpec::MlpGaussian(policy), record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Preset, UserType};
    use crate::policy::ScriptedPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LABELS: EvalLabels<'static> = EvalLabels { method: "test", user: "cautious" };

    #[test]
    fn scripted_controller_succeeds_on_feeding() {
        let env = EnvConfig::preset(Preset::Feeding);
        let p = PolicySpec::Scripted(ScriptedPolicy::for_env(&env));
        let w = UserType::Cautious.weights();
        let r = evaluate(&env, &p, &w, 200, 0, None, LABELS).unwrap();
        assert!(r.success_rate >= 0.95, "{r:?}");
        assert_eq!(r.success_rate, r.successes as f64 / 200.0);
        assert_eq!(r, evaluate(&env, &p, &w, 200, 0, None, LABELS).unwrap());
        assert!(evaluate(&env, &p, &w, 0, 0, None, LABELS).is_err());
    }

    #[test]
    fn deltas_are_exact_differences_on_one_seed_set() {
        let env = EnvConfig::preset(Preset::Feeding);
        let w = UserType::Neutral.weights();
        let a = evaluate(&env, &PolicySpec::Scripted(ScriptedPolicy::for_env(&env)), &w, 20, 1, None, LABELS).unwrap();
        let slow = PolicySpec::Scripted(ScriptedPolicy { gain: 1.0, ..ScriptedPolicy::for_env(&env) });
        let b = evaluate(&env, &slow, &w, 20, 1, None, LABELS).unwrap();
        let (ds, dr) = b.delta(&a).unwrap();
        assert_eq!(ds, b.success_rate - a.success_rate);
        assert_eq!(dr, b.mean_pref_return - a.mean_pref_return);
        let c = evaluate(&env, &slow, &w, 20, 2, None, LABELS).unwrap();
        assert!(c.delta(&a).is_err());
    }

    #[test]
    fn baselines_respect_inputs() {
        let env = EnvConfig::preset(Preset::Feeding);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rm = RewardModel::new(&[8], &mut rng).unwrap();
        let cfg = PgConfig { hidden: vec![8], updates: 0, ..Default::default() };
        let pre = PolicySpec::MlpGaussian(init_policy(&env, &cfg, 1).unwrap());
        let hash = pre.content_hash();
        let (same, _) = preft_finetune(&pre, &rm, &env, &cfg, 0).unwrap();
        assert_eq!(same, pre);
        let cfg2 = PgConfig { updates: 2, episodes_per_update: 2, ..cfg.clone() };
        let (tuned, rec) = preft_finetune(&pre, &rm, &env, &cfg2, 0).unwrap();
        assert_eq!(rec.updates, 2);
        assert_ne!(tuned, pre);
        assert_eq!(pre.content_hash(), hash);
        let scripted = PolicySpec::Scripted(ScriptedPolicy::for_env(&env));
        assert!(preft_finetune(&scripted, &rm, &env, &cfg, 0).is_err());

        let (s0, _) = pbrl_scratch(&rm, &env, &cfg, 4).unwrap();
        assert!(evaluate(&env, &s0, &[1.0; 6], 50, 9, None, LABELS).unwrap().success_rate < 0.1);
        let (s1, _) = pbrl_scratch(&rm, &env, &cfg2, 4).unwrap();
        assert_eq!(s1, pbrl_scratch(&rm, &env, &cfg2, 4).unwrap().0);
    }
}
