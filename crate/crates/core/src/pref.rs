//! Scripted preference teachers, preference datasets, the Bradley-Terry
//! predictor and reward-model training.
//!
//! Label convention: `y = 1` means the second trajectory (`traj1`) is
//! preferred, `y = 0` the first, `y = 0.5` a tie.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, PrefCostVector, Preset, ACTION_DIM, NUM_COSTS, STATE_DIM};
use crate::nn::{sigmoid, Activation, AdamConfig, AdamState, Checkpoint, MlpParams, Parameters, Tape, Tensor, Var};
use crate::policy::{rollout, ActMode, Actor, Trajectory};
use crate::{derive_seed, Error, Result};

const PREFS_FORMAT: &str = "pbarl-prefs";
const PREFS_VERSION: u32 = 1;
/// Probability clamp applied before logarithms in the scalar CE loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// State-action sequence with per-step preference costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefTrajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub costs: Vec<PrefCostVector>,
}

impl PrefTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            states: t.steps.iter().map(|s| s.state.clone()).collect(),
            actions: t.steps.iter().map(|s| s.action.clone()).collect(),
            costs: t.steps.iter().map(|s| s.costs).collect(),
        }
    }

    /// Contiguous window `[start, start + len)`, truncated at the end.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.len());
        let start = start.min(end);
        Self {
            states: self.states[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            costs: self.costs[start..end].to_vec(),
        }
    }

    pub fn pref_return(&self, omega: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.costs {
            total += env::pref_reward(c, omega)?;
        }
        Ok(total)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.states.is_empty() {
            return Err("empty trajectory".into());
        }
        if self.actions.len() != self.states.len() || self.costs.len() != self.states.len() {
            return Err("states, actions and costs differ in length".into());
        }
        if self.states.iter().any(|s| s.len() != STATE_DIM) || self.actions.iter().any(|a| a.len() != ACTION_DIM) {
            return Err("wrong state or action dimension".into());
        }
        let finite = self
            .states
            .iter()
            .chain(&self.actions)
            .flatten()
            .chain(self.costs.iter().flat_map(|c| c.0.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    Scripted,
    HumanUi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub traj0: PrefTrajectory,
    pub traj1: PrefTrajectory,
    pub y: f64,
    pub source: LabelSource,
    /// Set by the label service; a later line with the same id replaces an earlier one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

pub fn is_valid_label(y: f64) -> bool {
    y == 0.0 || y == 0.5 || y == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefHeader {
    pub format: String,
    pub version: u32,
    pub preset: Preset,
    pub omega: Vec<f64>,
    pub tie_threshold: f64,
    pub seed: u64,
}

impl PrefHeader {
    pub fn new(preset: Preset, omega: &[f64], tie_threshold: f64, seed: u64) -> Self {
        Self {
            format: PREFS_FORMAT.into(),
            version: PREFS_VERSION,
            preset,
            omega: omega.to_vec(),
            tie_threshold,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefDataset {
    pub header: PrefHeader,
    pub pairs: Vec<PreferencePair>,
}

impl PrefDataset {
    pub fn tie_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.y == 0.5).count() as f64 / self.pairs.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", serde_json::to_string(&self.header).expect("header serializes")).map_err(io)?;
        for p in &self.pairs {
            writeln!(w, "{}", serde_json::to_string(p).expect("pair serializes")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Appends one pair to an existing dataset file.
    pub fn append(path: &Path, pair: &PreferencePair) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string(pair).expect("pair serializes")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let fmt_err = |line: usize, message: String| Error::Format {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = std::io::BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| fmt_err(1, "empty file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: PrefHeader = serde_json::from_str(&first).map_err(|e| fmt_err(1, e.to_string()))?;
        if header.format != PREFS_FORMAT || header.version != PREFS_VERSION {
            return Err(fmt_err(1, format!("unsupported header {}/{}", header.format, header.version)));
        }
        if header.omega.len() != NUM_COSTS {
            return Err(fmt_err(1, "omega must have 6 entries".into()));
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| fmt_err(i + 2, e.to_string()))?;
            if !is_valid_label(pair.y) {
                return Err(fmt_err(i + 2, format!("label {} not in {{0, 0.5, 1}}", pair.y)));
            }
            pair.traj0.validate().map_err(|m| fmt_err(i + 2, m))?;
            pair.traj1.validate().map_err(|m| fmt_err(i + 2, m))?;
            match pair.pair_id.as_ref().and_then(|id| pairs.iter().position(|p: &PreferencePair| p.pair_id.as_ref() == Some(id))) {
                Some(k) => pairs[k] = pair,
                None => pairs.push(pair),
            }
        }
        Ok(Self { header, pairs })
    }
}

/// Label from ground-truth weighted returns: tie below `tie_threshold`,
/// otherwise 1 when `traj1` has the higher return.
pub fn scripted_teacher_label(t0: &PrefTrajectory, t1: &PrefTrajectory, omega: &[f64], tie_threshold: f64) -> Result<f64> {
    if t0.costs.len() != t0.states.len() || t1.costs.len() != t1.states.len() {
        return Err(Error::InvalidConfig("trajectory is missing cost vectors".into()));
    }
    let g0 = t0.pref_return(omega)?;
    let g1 = t1.pref_return(omega)?;
    Ok(if (g0 - g1).abs() < tie_threshold {
        0.5
    } else if g1 > g0 {
        1.0
    } else {
        0.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefGenConfig {
    pub num_queries: usize,
    pub tie_threshold: f64,
    /// Compare random windows of this many steps instead of full episodes.
    pub segment_len: Option<usize>,
}

impl Default for PrefGenConfig {
    fn default() -> Self {
        Self {
            num_queries: 500,
            tie_threshold: 1.0,
            segment_len: None,
        }
    }
}

/// Rolls out `2 * num_queries` stochastic episodes, pairs consecutive ones
/// and labels each pair with the scripted teacher.
pub fn generate_pref_dataset(env: &EnvConfig, policy: &dyn Actor, omega: &[f64], cfg: &PrefGenConfig, seed: u64) -> Result<PrefDataset> {
    if cfg.num_queries < 1 {
        return Err(Error::InvalidConfig("num_queries must be >= 1".into()));
    }
    if !(cfg.tie_threshold >= 0.0) {
        return Err(Error::InvalidConfig("tie_threshold must be >= 0".into()));
    }
    if cfg.segment_len == Some(0) {
        return Err(Error::InvalidConfig("segment_len must be >= 1".into()));
    }
    env::pref_reward(&PrefCostVector::default(), omega)?;
    let mut window_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5e6));
    let mut pairs = Vec::with_capacity(cfg.num_queries);
    for q in 0..cfg.num_queries {
        let mut side = |k: u64| -> Result<PrefTrajectory> {
            let t = rollout(env, policy, derive_seed(seed, 2 * q as u64 + k), ActMode::Stochastic)?;
            let full = PrefTrajectory::from_trajectory(&t);
            Ok(match cfg.segment_len {
                Some(len) if full.len() > len => {
                    let start = window_rng.random_range(0..=full.len() - len);
                    full.window(start, len)
                }
                _ => full,
            })
        };
        let traj0 = side(0)?;
        let traj1 = side(1)?;
        let y = scripted_teacher_label(&traj0, &traj1, omega, cfg.tie_threshold)?;
        pairs.push(PreferencePair {
            traj0,
            traj1,
            y,
            source: LabelSource::Scripted,
            pair_id: None,
        });
    }
    Ok(PrefDataset {
        header: PrefHeader::new(env.preset, omega, cfg.tie_threshold, seed),
        pairs,
    })
}

/// Learned per-step preference reward `R̂(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: MlpParams,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![STATE_DIM + ACTION_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: MlpParams::new(&sizes, Activation::Tanh, rng)?,
        })
    }

    pub fn from_net(net: MlpParams) -> Result<Self> {
        if net.in_dim() != STATE_DIM + ACTION_DIM || net.out_dim() != 1 {
            return Err(Error::InvalidConfig("reward network must map (s, a) to a scalar".into()));
        }
        Ok(Self { net })
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(STATE_DIM + ACTION_DIM);
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        Ok(self.net.forward(&x)?[0])
    }

    /// Rewards for the rows of an `N x (state + action)` input.
    pub fn predict_batch(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(inputs)?.into_vec())
    }

    /// `Σ_t R̂(s_t, a_t)` over a trajectory.
    pub fn segment_return(&self, t: &PrefTrajectory) -> Result<f64> {
        if t.is_empty() {
            return Err(Error::InvalidConfig("empty trajectory".into()));
        }
        Ok(self.predict_batch(&sa_rows(&[t]))?.iter().sum())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new().with_meta("kind", "reward-model");
        ck.put_mlp("reward", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::from_net(ck.get_mlp("reward")?)
    }

    pub fn content_hash(&self) -> String {
        self.to_checkpoint().content_hash()
    }
}

/// Stacks `(s, a)` rows of several trajectories into one tensor.
pub fn sa_rows(trajs: &[&PrefTrajectory]) -> Tensor {
    let n: usize = trajs.iter().map(|t| t.len()).sum();
    let mut data = Vec::with_capacity(n * (STATE_DIM + ACTION_DIM));
    for t in trajs {
        for (s, a) in t.states.iter().zip(&t.actions) {
            data.extend_from_slice(s);
            data.extend_from_slice(a);
        }
    }
    Tensor::from_vec(n, STATE_DIM + ACTION_DIM, data).expect("row lengths validated")
}

/// `P[traj1 ≻ traj0] = σ(S1 − S0)`.
pub fn bt_probability(model: &RewardModel, t0: &PrefTrajectory, t1: &PrefTrajectory) -> Result<f64> {
    Ok(bt_from_returns(model.segment_return(t0)?, model.segment_return(t1)?))
}

pub fn bt_from_returns(s0: f64, s1: f64) -> f64 {
    sigmoid(s1 - s0)
}

/// Cross-entropy `−[y ln P + (1 − y) ln(1 − P)]` with `P` clamped away from 0 and 1.
pub fn pref_ce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean CE over rows given logits `d = S1 − S0` (`N x 1`) and labels.
/// Uses `−ln σ(d) = softplus(−d)` so no clamping is needed.
pub fn traced_pref_ce<'t>(d: Var<'t>, y: &[f64]) -> crate::nn::Result<Var<'t>> {
    let tape = d.tape();
    let y_col = tape.constant(Tensor::from_vec(y.len(), 1, y.to_vec())?);
    let one_minus = tape.constant(Tensor::from_vec(y.len(), 1, y.iter().map(|v| 1.0 - v).collect())?);
    Ok(d.neg()
        .softplus()
        .mul(y_col)?
        .add(d.softplus().mul(one_minus)?)?
        .mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig::with_lr(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTrainRecord {
    pub epoch_loss: Vec<f64>,
}

/// Minibatch Adam on the mean preference cross-entropy.
pub fn train_reward_model(pairs: &[PreferencePair], cfg: &RewardTrainConfig, seed: u64) -> Result<(RewardModel, RewardTrainRecord)> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("preference dataset is empty".into()));
    }
    if cfg.batch_size < 1 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RewardModel::new(&cfg.hidden, &mut rng)?;
    let mut adam = AdamState::new(cfg.adam.clone(), &model.net.tensors());
    let mut record = RewardTrainRecord::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let trajs: Vec<&PrefTrajectory> = batch
                .iter()
                .flat_map(|&i| [&pairs[i].traj0, &pairs[i].traj1])
                .collect();
            let lengths: Vec<usize> = trajs.iter().map(|t| t.len()).collect();
            let labels: Vec<f64> = batch.iter().map(|&i| pairs[i].y).collect();
            let tape = Tape::new();
            let net = model.net.bind(&tape);
            let sums = net.forward(tape.constant(sa_rows(&trajs)))?.segment_sum(&lengths)?;
            let firsts: Vec<usize> = (0..batch.len()).map(|k| 2 * k).collect();
            let seconds: Vec<usize> = (0..batch.len()).map(|k| 2 * k + 1).collect();
            let d = sums.gather_rows(&seconds)?.sub(sums.gather_rows(&firsts)?)?;
            let loss = traced_pref_ce(d, &labels)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("reward-model loss {value} at epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            let grads = net.grads(&tape.backward(loss)?)?;
            adam.step(model.net.tensors_mut(), &grads)?;
        }
        record.epoch_loss.push(total / pairs.len() as f64);
    }
    Ok((model, record))
}

/// Fraction of non-tie pairs where the predicted preference side matches `y`.
pub fn reward_model_accuracy(model: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    let mut correct = 0usize;
    let mut counted = 0usize;
    for p in pairs.iter().filter(|p| p.y != 0.5) {
        let prob = bt_probability(model, &p.traj0, &p.traj1)?;
        counted += 1;
        if (prob > 0.5 && p.y == 1.0) || (prob < 0.5 && p.y == 0.0) {
            correct += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidConfig("no non-tie pairs to score".into()));
    }
    Ok(correct as f64 / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::UserType;
    use crate::nn::{finite_diff_check, GradCheckConfig};

    fn traj(speeds: &[f64]) -> PrefTrajectory {
        PrefTrajectory {
            states: speeds.iter().map(|_| vec![0.0; STATE_DIM]).collect(),
            actions: speeds.iter().map(|_| vec![0.0; ACTION_DIM]).collect(),
            costs: speeds
                .iter()
                .map(|v| PrefCostVector([0.5, *v, 0.2, 0.0, 0.0, 0.0]))
                .collect(),
        }
    }

    #[test]
    fn teacher_examples() {
        let w = UserType::Cautious.weights();
        let a = traj(&[1.0, 1.0, 1.0]);
        assert_eq!(scripted_teacher_label(&a, &a, &w, 1.0).unwrap(), 0.5);
        let slow = traj(&[0.2, 0.2, 0.2]);
        assert_eq!(scripted_teacher_label(&a, &slow, &w, 1.0).unwrap(), 1.0);
        assert_eq!(scripted_teacher_label(&slow, &a, &w, 1.0).unwrap(), 0.0);
        // Return gap 2 * 0.8 * 3 = 4.8 falls under a threshold of 5.
        assert_eq!(scripted_teacher_label(&a, &slow, &w, 5.0).unwrap(), 0.5);
        let mut broken = a.clone();
        broken.costs.pop();
        assert!(scripted_teacher_label(&broken, &a, &w, 1.0).is_err());
    }

    #[test]
    fn bt_examples() {
        assert_eq!(bt_from_returns(2.0, 2.0), 0.5);
        let e = std::f64::consts::E;
        assert!((bt_from_returns(0.0, 1.0) - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(bt_from_returns(0.0, 1e6), 1.0);
        assert_eq!(bt_from_returns(1e6, 0.0), 0.0);
    }

    #[test]
    fn bt_shift_invariance_needs_equal_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = RewardModel::new(&[8], &mut rng).unwrap();
        let mut shifted = model.clone();
        shifted.net.layers_mut().last_mut().unwrap().bias.data_mut()[0] += 0.7;
        let t = |n: usize, x: f64| PrefTrajectory {
            states: (0..n).map(|i| vec![x + i as f64 * 0.1; STATE_DIM]).collect(),
            actions: (0..n).map(|_| vec![x, -x]).collect(),
            costs: vec![PrefCostVector::default(); n],
        };
        let (a, b) = (t(5, 0.1), t(5, -0.4));
        let p = bt_probability(&model, &a, &b).unwrap();
        assert!((p - bt_probability(&shifted, &a, &b).unwrap()).abs() < 1e-12);
        let c = t(8, -0.4);
        let p = bt_probability(&model, &a, &c).unwrap();
        assert!((p - bt_probability(&shifted, &a, &c).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn ce_examples() {
        assert!((pref_ce_loss(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(pref_ce_loss(1.0 - 1e-12, 1.0) < 1e-6);
        assert!(pref_ce_loss(1e-12, 0.0) < 1e-6);
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let l = pref_ce_loss(p, 1.0);
            assert!(l < prev);
            prev = l;
        }
        assert!(pref_ce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn traced_ce_matches_scalar_and_gradcheck() {
        let ds = [0.3, -1.2, 2.0];
        let ys = [1.0, 0.5, 0.0];
        let tape = Tape::new();
        let d = tape.constant(Tensor::from_vec(3, 1, ds.to_vec()).unwrap());
        let traced = traced_pref_ce(d, &ys).unwrap().item().unwrap();
        let scalar: f64 = ds.iter().zip(&ys).map(|(d, y)| pref_ce_loss(sigmoid(*d), *y)).sum::<f64>() / 3.0;
        assert!((traced - scalar).abs() < 1e-12);
        let report = finite_diff_check(
            &[Tensor::from_vec(3, 1, ds.to_vec()).unwrap()],
            |_, v| traced_pref_ce(v[0], &ys),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn synthetic_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
        // Oracle prefers smaller total action norm.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut side = |len: usize| {
            let scale = rng.random_range(0.2..2.0);
            let actions: Vec<Vec<f64>> = (0..len)
                .map(|_| vec![scale * rng.random_range(-1.0..1.0), scale * rng.random_range(-1.0..1.0)])
                .collect();
            let states = (0..len)
                .map(|_| (0..STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let costs = actions
                .iter()
                .map(|a| PrefCostVector([0.0, 0.0, a[0].hypot(a[1]), 0.0, 0.0, 0.0]))
                .collect();
            PrefTrajectory { states, actions, costs }
        };
        (0..n)
            .map(|_| {
                let traj0 = side(10);
                let traj1 = side(10);
                let y = scripted_teacher_label(&traj0, &traj1, &[1.0; 6], 0.0).unwrap();
                PreferencePair { traj0, traj1, y, source: LabelSource::Scripted, pair_id: None }
            })
            .collect()
    }

    #[test]
    fn learns_separable_synthetic_preferences() {
        let train = synthetic_pairs(300, 1);
        let test = synthetic_pairs(200, 2);
        let cfg = RewardTrainConfig { hidden: vec![32, 32], epochs: 150, ..Default::default() };
        let (model, record) = train_reward_model(&train, &cfg, 0).unwrap();
        assert!(record.epoch_loss.last().unwrap() < &record.epoch_loss[0]);
        let acc = reward_model_accuracy(&model, &test).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
        let (again, _) = train_reward_model(&train, &cfg, 0).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn ties_only_converge_to_half() {
        let t = traj(&[0.5, 0.4]);
        let other = PrefTrajectory {
            states: vec![vec![0.3; STATE_DIM]; 2],
            ..t.clone()
        };
        let pairs: Vec<_> = (0..16)
            .map(|_| PreferencePair { traj0: t.clone(), traj1: other.clone(), y: 0.5, source: LabelSource::Scripted, pair_id: None })
            .collect();
        let cfg = RewardTrainConfig { hidden: vec![8], epochs: 200, batch_size: 16, ..Default::default() };
        let (model, record) = train_reward_model(&pairs, &cfg, 3).unwrap();
        let p = bt_probability(&model, &t, &other).unwrap();
        assert!((p - 0.5).abs() < 0.02, "p = {p}");
        assert!((record.epoch_loss.last().unwrap() - std::f64::consts::LN_2).abs() < 1e-3);
    }

    #[test]
    fn accuracy_edge_cases() {
        let test = synthetic_pairs(400, 9);
        let mut accs = Vec::new();
        for seed in 0..5 {
            let m = RewardModel::new(&[16], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            accs.push(reward_model_accuracy(&m, &test).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "random-model accuracy {mean}");
        let ties = vec![PreferencePair { traj0: traj(&[1.0]), traj1: traj(&[1.0]), y: 0.5, source: LabelSource::Scripted, pair_id: None }];
        let m = RewardModel::new(&[4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(reward_model_accuracy(&m, &ties).is_err());
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let ds = PrefDataset {
            header: PrefHeader::new(Preset::Feeding, &UserType::Cautious.weights(), 1.0, 7),
            pairs: synthetic_pairs(3, 0),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        ds.save(&path).unwrap();
        assert_eq!(PrefDataset::load(&path).unwrap(), ds);
        PrefDataset::append(&path, &ds.pairs[0]).unwrap();
        assert_eq!(PrefDataset::load(&path).unwrap().pairs.len(), 4);

        let labelled = |y: f64| PreferencePair { y, pair_id: Some("p7".into()), ..ds.pairs[1].clone() };
        PrefDataset::append(&path, &labelled(0.0)).unwrap();
        PrefDataset::append(&path, &labelled(1.0)).unwrap();
        let back = PrefDataset::load(&path).unwrap();
        assert_eq!(back.pairs.len(), 5);
        assert_eq!(back.pairs[4].y, 1.0);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"y\":", "\"y\":0.25,\"_y\":");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match PrefDataset::load(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reward_checkpoint_round_trip() {
        let m = RewardModel::new(&[5, 5], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let back = RewardModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_traj() -> impl Strategy<Value = PrefTrajectory> {
            prop::collection::vec(prop::array::uniform6(0.0f64..3.0), 1..8).prop_map(|costs| PrefTrajectory {
                states: vec![vec![0.0; STATE_DIM]; costs.len()],
                actions: vec![vec![0.0; ACTION_DIM]; costs.len()],
                costs: costs.into_iter().map(PrefCostVector).collect(),
            })
        }

        proptest! {
            #[test]
            fn teacher_is_antisymmetric(a in arb_traj(), b in arb_traj(), tie in 0.0f64..2.0) {
                let w = UserType::Cautious.weights();
                let y = scripted_teacher_label(&a, &b, &w, tie).unwrap();
                let r = scripted_teacher_label(&b, &a, &w, tie).unwrap();
                prop_assert_eq!(y, 1.0 - r);
            }

            #[test]
            fn teacher_labels_invariant_to_omega_scale(a in arb_traj(), b in arb_traj(), c in 0.01f64..100.0) {
                for user in UserType::ALL {
                    let w = user.weights();
                    let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
                    prop_assert_eq!(
                        scripted_teacher_label(&a, &b, &w, 0.0).unwrap(),
                        scripted_teacher_label(&a, &b, &scaled, 0.0).unwrap()
                    );
                }
            }

            #[test]
            fn bt_is_complementary(s0 in -50.0f64..50.0, s1 in -50.0f64..50.0) {
                prop_assert!((bt_from_returns(s0, s1) + bt_from_returns(s1, s0) - 1.0).abs() < 1e-15);
            }

            #[test]
            fn ce_is_non_negative(p in 0.0f64..=1.0, y in prop::sample::select(vec![0.0, 0.5, 1.0])) {
                prop_assert!(pref_ce_loss(p, y) >= 0.0);
            }
        }
    }
}
