//! Pre-trained policy providers, rollouts, transition datasets and ranked
//! action-list sampling.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, EnvState, PrefCostVector, ACTION_DIM, STATE_DIM};
use crate::nn::{Activation, Checkpoint, GaussianDist, MlpParams};
use crate::{derive_seed, Error, Result};

/// Bounds applied to the log-std head of Gaussian MLP policies.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Log-std reported by a noiseless scripted controller.
const SCRIPTED_NOISELESS_LOG_STD: f64 = -20.0;

const TRANSITIONS_FORMAT: &str = "pbarl-transitions";
const TRANSITIONS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Stochastic,
    Mean,
}

/// Anything that maps an observation to an action.
pub trait Actor {
    fn act(&self, obs: &[f64], mode: ActMode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Proportional-derivative reaching controller with optional Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub gain: f64,
    pub damping: f64,
    pub noise: f64,
    pub action_bound: f64,
}

impl ScriptedPolicy {
    pub fn for_env(env: &EnvConfig) -> Self {
        Self {
            gain: 2.0,
            damping: 2.5,
            noise: 0.0,
            action_bound: env.action_bound,
        }
    }
}

/// State-conditioned diagonal Gaussian whose MLP emits `mean ⊕ log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMlpPolicy {
    pub net: MlpParams,
    /// When set, the mean is `b·tanh(raw / b)` so it stays inside `[-b, b]`.
    pub mean_bound: Option<f64>,
}

impl GaussianMlpPolicy {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], mean_bound: Option<f64>, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![STATE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * ACTION_DIM);
        Self::from_net(MlpParams::new(&sizes, Activation::Tanh, rng)?, mean_bound)
    }

    pub fn from_net(net: MlpParams, mean_bound: Option<f64>) -> Result<Self> {
        if let Some(b) = mean_bound {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidConfig(format!("mean bound must be positive, got {b}")));
            }
        }
        if net.in_dim() != STATE_DIM || net.out_dim() != 2 * ACTION_DIM {
            return Err(Error::InvalidConfig(format!(
                "policy network must map {STATE_DIM} -> {}, got {} -> {}",
                2 * ACTION_DIM,
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(Self { net, mean_bound })
    }

    /// Maps a raw network output to the distribution mean.
    pub fn squash(&self, raw: f64) -> f64 {
        match self.mean_bound {
            Some(b) => b * (raw / b).tanh(),
            None => raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    MlpGaussian(GaussianMlpPolicy),
    Scripted(ScriptedPolicy),
}

impl PolicySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::MlpGaussian(_) => "mlp-gaussian",
            PolicySpec::Scripted(_) => "scripted-proportional",
        }
    }

    /// Action distribution at observation `obs`.
    pub fn dist(&self, obs: &[f64]) -> Result<GaussianDist> {
        if obs.len() != STATE_DIM {
            return Err(Error::InvalidConfig(format!(
                "observation must have {STATE_DIM} entries, got {}",
                obs.len()
            )));
        }
        match self {
            PolicySpec::MlpGaussian(p) => {
                let out = p.net.forward(obs)?;
                let log_std = out[ACTION_DIM..]
                    .iter()
                    .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
                    .collect();
                let mean = out[..ACTION_DIM].iter().map(|&v| p.squash(v)).collect();
                Ok(GaussianDist::new(mean, log_std)?)
            }
            PolicySpec::Scripted(p) => {
                let b = p.action_bound;
                let mean = (0..ACTION_DIM)
                    .map(|i| (p.gain * (obs[4 + i] - obs[i]) - p.damping * obs[2 + i]).clamp(-b, b))
                    .collect();
                let ls = if p.noise > 0.0 { p.noise.ln() } else { SCRIPTED_NOISELESS_LOG_STD };
                Ok(GaussianDist::new(mean, vec![ls; ACTION_DIM])?)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new().with_meta("policy.kind", self.kind());
        match self {
            PolicySpec::MlpGaussian(p) => {
                ck.put_mlp("policy", &p.net);
                if let Some(b) = p.mean_bound {
                    ck = ck.with_meta("policy.mean_bound", b.to_string());
                }
            }
            PolicySpec::Scripted(p) => {
                ck = ck
                    .with_meta("policy.gain", p.gain.to_string())
                    .with_meta("policy.damping", p.damping.to_string())
                    .with_meta("policy.noise", p.noise.to_string())
                    .with_meta("policy.action_bound", p.action_bound.to_string());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta("policy.kind")? {
            "mlp-gaussian" => {
                let bound = match ck.meta("policy.mean_bound") {
                    Ok(v) => Some(v.parse().map_err(|_| Error::InvalidConfig("bad number for policy.mean_bound".into()))?),
                    Err(_) => None,
                };
                Ok(PolicySpec::MlpGaussian(GaussianMlpPolicy::from_net(ck.get_mlp("policy")?, bound)?))
            }
            "scripted-proportional" => {
                let num = |key: &str| -> Result<f64> {
                    ck.meta(key)?
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad number for {key}")))
                };
                Ok(PolicySpec::Scripted(ScriptedPolicy {
                    gain: num("policy.gain")?,
                    damping: num("policy.damping")?,
                    noise: num("policy.noise")?,
                    action_bound: num("policy.action_bound")?,
                }))
            }
            other => Err(Error::InvalidConfig(format!("unknown policy kind {other:?}"))),
        }
    }

    pub fn content_hash(&self) -> String {
        self.to_checkpoint().content_hash()
    }
}

impl Actor for PolicySpec {
    fn act(&self, obs: &[f64], mode: ActMode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let dist = self.dist(obs)?;
        let noiseless = matches!(self, PolicySpec::Scripted(p) if p.noise <= 0.0);
        Ok(match mode {
            ActMode::Stochastic if !noiseless => dist.sample(rng),
            _ => dist.mean().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: Vec<f64>,
    /// Action after clamping to the env bounds.
    pub action: Vec<f64>,
    pub task_reward: f64,
    pub costs: PrefCostVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn task_return(&self) -> f64 {
        self.steps.iter().map(|s| s.task_reward).sum()
    }

    /// Sum of `pref_reward` over the steps (no offset).
    pub fn pref_return(&self, omega: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.steps {
            total += env::pref_reward(&s.costs, omega)?;
        }
        Ok(total)
    }

    /// Visited states including the terminal one.
    pub fn states_with_final(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.steps.iter().map(|s| s.state.clone()).collect();
        out.push(self.final_state.clone());
        out
    }

    pub fn mean_speed(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.costs.velocity()).sum::<f64>() / self.steps.len() as f64
    }
}

/// Runs one episode. The spawn comes from `seed`; action noise from a stream
/// derived from it.
pub fn rollout(env: &EnvConfig, actor: &dyn Actor, seed: u64, mode: ActMode) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut state = env::reset(env, seed);
    let mut steps = Vec::with_capacity(env.horizon);
    let mut success = false;
    while !state.done {
        let obs = state.observation();
        let raw = actor.act(&obs, mode, &mut rng)?;
        let out = env::step(env, &state, &raw)?;
        steps.push(StepRecord {
            state: obs,
            action: env::clamp_action(env, &raw).to_vec(),
            task_reward: out.task_reward,
            costs: out.costs,
        });
        success = out.success;
        state = out.state;
    }
    Ok(Trajectory {
        steps,
        final_state: state.observation(),
        success,
    })
}

/// Draws `n` i.i.d. actions and orders them by log density, most likely
/// first. Equal densities keep draw order.
pub fn sample_ranked_actions<R: Rng + ?Sized>(dist: &GaussianDist, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(Error::InvalidConfig("action list size must be >= 1".into()));
    }
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let a = dist.sample(rng);
        let lp = dist.log_density(&a)?;
        draws.push((lp, a));
    }
    draws.sort_by(|x, y| y.0.total_cmp(&x.0));
    Ok(draws.into_iter().map(|(_, a)| a).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub s: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Raw sampled action (before env clamping).
    pub action: Vec<f64>,
    pub s_next: Vec<f64>,
    pub episode: usize,
    pub step: usize,
}

impl TransitionTuple {
    pub fn dist(&self) -> Result<GaussianDist> {
        Ok(GaussianDist::new(self.mean.clone(), self.log_std.clone())?)
    }
}

/// Stochastic rollouts of `policy`, flattened into per-step tuples.
pub fn collect_transitions(env: &EnvConfig, policy: &PolicySpec, episodes: usize, seed: u64) -> Result<Vec<TransitionTuple>> {
    if episodes < 1 {
        return Err(Error::InvalidConfig("episodes must be >= 1".into()));
    }
    let mut out = Vec::new();
    for ep in 0..episodes {
        let ep_seed = derive_seed(seed, ep as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, 1));
        let mut state: EnvState = env::reset(env, ep_seed);
        while !state.done {
            let s = state.observation();
            let dist = policy.dist(&s)?;
            let action = policy.act(&s, ActMode::Stochastic, &mut rng)?;
            let next = env::step(env, &state, &action)?;
            out.push(TransitionTuple {
                s,
                mean: dist.mean().to_vec(),
                log_std: dist.log_std().to_vec(),
                action,
                s_next: next.state.observation(),
                episode: ep,
                step: state.step,
            });
            state = next.state;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionsHeader {
    format: String,
    version: u32,
    count: usize,
}

pub fn save_transitions(path: &Path, tuples: &[TransitionTuple]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = TransitionsHeader {
        format: TRANSITIONS_FORMAT.into(),
        version: TRANSITIONS_VERSION,
        count: tuples.len(),
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for t in tuples {
        writeln!(w, "{}", serde_json::to_string(t).expect("tuple serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_transitions(path: &Path) -> Result<Vec<TransitionTuple>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| fmt_err(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: TransitionsHeader = serde_json::from_str(&header_line).map_err(|e| fmt_err(1, e.to_string()))?;
    if header.format != TRANSITIONS_FORMAT || header.version != TRANSITIONS_VERSION {
        return Err(fmt_err(1, format!("unsupported header {}/{}", header.format, header.version)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TransitionTuple = serde_json::from_str(&line).map_err(|e| fmt_err(i + 2, e.to_string()))?;
        if t.s.len() != STATE_DIM || t.s_next.len() != STATE_DIM || t.action.len() != ACTION_DIM {
            return Err(fmt_err(i + 2, "wrong state or action dimension".into()));
        }
        out.push(t);
    }
    if out.len() != header.count {
        return Err(fmt_err(1, format!("header declares {} tuples, found {}", header.count, out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Preset;
    use crate::nn::Tensor;

    fn feeding() -> EnvConfig {
        EnvConfig::preset(Preset::Feeding)
    }

    fn scripted(env: &EnvConfig) -> PolicySpec {
        PolicySpec::Scripted(ScriptedPolicy::for_env(env))
    }

    fn obs(pos: [f64; 2], vel: [f64; 2], target: [f64; 2]) -> Vec<f64> {
        vec![pos[0], pos[1], vel[0], vel[1], target[0], target[1], 1.0]
    }

    #[test]
    fn scripted_mean_is_zero_at_setpoint() {
        let p = scripted(&feeding());
        let d = p.dist(&obs([0.3, 0.1], [0.0, 0.0], [0.3, 0.1])).unwrap();
        assert_eq!(d.mean(), &[0.0, 0.0]);
    }

    #[test]
    fn scripted_mean_is_proportional_then_clamped() {
        let p = PolicySpec::Scripted(ScriptedPolicy { gain: 1.0, damping: 0.0, noise: 0.0, action_bound: 3.0 });
        let d = p.dist(&obs([-1.0, 0.0], [0.0, 0.0], [0.0, 0.0])).unwrap();
        assert_eq!(d.mean(), &[1.0, 0.0]);
        let p = PolicySpec::Scripted(ScriptedPolicy { gain: 10.0, damping: 0.0, noise: 0.0, action_bound: 3.0 });
        let d = p.dist(&obs([-1.0, 0.0], [0.0, 0.0], [0.0, 0.0])).unwrap();
        assert_eq!(d.mean(), &[3.0, 0.0]);
    }

    #[test]
    fn zero_weight_mlp_policy_has_constant_mean() {
        let mut net = MlpParams::zeros(&[STATE_DIM, 4, 2 * ACTION_DIM], Activation::Tanh).unwrap();
        net.layers_mut()[1].bias = Tensor::row(&[0.5, -0.25, -1.0, -1.0]);
        let p = PolicySpec::MlpGaussian(GaussianMlpPolicy::from_net(net, None).unwrap());
        for s in [obs([0.0; 2], [0.0; 2], [0.0; 2]), obs([1.0, -2.0], [0.3, 0.1], [0.5, 0.5])] {
            let d = p.dist(&s).unwrap();
            assert_eq!(d.mean(), &[0.5, -0.25]);
            assert_eq!(d.log_std(), &[-1.0, -1.0]);
        }
        assert!(p.dist(&[0.0; 3]).is_err());
    }

    #[test]
    fn scripted_controller_reaches_every_feeding_spawn() {
        let env = feeding();
        let p = scripted(&env);
        for seed in 0..100 {
            let t = rollout(&env, &p, seed, ActMode::Mean).unwrap();
            assert!(t.success, "seed {seed} failed after {} steps", t.len());
        }
    }

    #[test]
    fn stochastic_rollout_is_seeded() {
        let env = feeding();
        let p = PolicySpec::MlpGaussian(GaussianMlpPolicy::new(&[8], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
        let a = rollout(&env, &p, 11, ActMode::Stochastic).unwrap();
        let b = rollout(&env, &p, 11, ActMode::Stochastic).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= env.horizon);
    }

    #[test]
    fn noiseless_scripted_rollouts_coincide_across_modes() {
        let env = feeding();
        let p = scripted(&env);
        assert_eq!(
            rollout(&env, &p, 4, ActMode::Stochastic).unwrap(),
            rollout(&env, &p, 4, ActMode::Mean).unwrap()
        );
    }

    /// Follows `inner` for `stop` steps, then brakes to a halt.
    struct StopAfter<'a> {
        inner: &'a PolicySpec,
        stop: usize,
        calls: std::cell::Cell<usize>,
    }

    impl Actor for StopAfter<'_> {
        fn act(&self, obs: &[f64], mode: ActMode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
            let n = self.calls.get();
            self.calls.set(n + 1);
            if n >= self.stop {
                return Ok(vec![-5.0 * obs[2], -5.0 * obs[3]]);
            }
            self.inner.act(obs, mode, rng)
        }
    }

    #[test]
    fn successful_rollout_beats_truncated_one() {
        let env = feeding();
        let p = scripted(&env);
        let full = rollout(&env, &p, 9, ActMode::Mean).unwrap();
        assert!(full.success);
        let halted = StopAfter { inner: &p, stop: 3, calls: Default::default() };
        let cut = rollout(&env, &halted, 9, ActMode::Mean).unwrap();
        assert!(!cut.success);
        assert!(full.task_return() > cut.task_return());
    }

    #[test]
    fn ranked_actions_are_sorted_and_seeded() {
        let d = GaussianDist::new(vec![0.5, -0.5], vec![0.0, -0.5]).unwrap();
        let list = sample_ranked_actions(&d, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(list.len(), 10);
        let lps: Vec<f64> = list.iter().map(|a| d.log_density(a).unwrap()).collect();
        assert!(lps.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(list, sample_ranked_actions(&d, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        assert_eq!(sample_ranked_actions(&d, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().len(), 1);
        assert!(sample_ranked_actions(&d, 0, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn ranked_actions_concentrate_at_tiny_std() {
        let d = GaussianDist::new(vec![1.0, 2.0], vec![-10.0, -10.0]).unwrap();
        let list = sample_ranked_actions(&d, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for a in &list {
            for b in &list {
                assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-3);
            }
        }
    }

    #[test]
    fn transitions_chain_through_env_and_round_trip() {
        let env = feeding();
        let p = PolicySpec::Scripted(ScriptedPolicy { noise: 0.3, ..ScriptedPolicy::for_env(&env) });
        let tuples = collect_transitions(&env, &p, 10, 5).unwrap();
        assert!(!tuples.is_empty() && tuples.len() <= 10 * env.horizon);
        for t in &tuples {
            let state = EnvState {
                pos: [t.s[0], t.s[1]],
                vel: [t.s[2], t.s[3]],
                target: [t.s[4], t.s[5]],
                payload: t.s[6],
                step: t.step,
                done: false,
            };
            assert_eq!(env::step(&env, &state, &t.action).unwrap().state.observation(), t.s_next);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_transitions(&path, &tuples).unwrap();
        let back = load_transitions(&path).unwrap();
        assert_eq!(back.len(), tuples.len());
        for (a, b) in back.iter().zip(&tuples) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.s), bits(&b.s));
            assert_eq!(bits(&a.action), bits(&b.action));
            assert_eq!(bits(&a.log_std), bits(&b.log_std));
            assert_eq!(bits(&a.s_next), bits(&b.s_next));
        }
        assert!(collect_transitions(&env, &p, 0, 5).is_err());
    }

    #[test]
    fn corrupt_transition_file_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"format\":\"pbarl-transitions\",\"version\":1,\"count\":1}\nnot json\n").unwrap();
        match load_transitions(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_transitions(&dir.path().join("missing")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_hash() {
        let env = feeding();
        for p in [
            scripted(&env),
            PolicySpec::MlpGaussian(GaussianMlpPolicy::new(&[6, 6], Some(3.0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()),
        ] {
            let back = PolicySpec::from_checkpoint(&p.to_checkpoint()).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.content_hash(), p.content_hash());
        }
    }
}
