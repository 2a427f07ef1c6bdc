//! Latent action representation learned from ranked action lists.
//!
//! A state-conditioned VAE maps each action sampled from the frozen policy to
//! a latent code and back. Training combines a hinged reconstruction loss, an
//! InfoNCE loss that aligns the probability-ranked reconstructions with their
//! reward-ranked order, the VAE KL term and a residual latent transition loss.
//! At deployment the policy's mean action is passed through encoder and
//! decoder before execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, STATE_DIM};
use crate::nn::gaussian::traced_kl_standard_normal;
use crate::nn::{
    self, Activation, AdamConfig, AdamState, Checkpoint, GaussianDist, Gradients, MlpParams, Parameters, Tape, Tensor,
    Var,
};
use crate::policy::{sample_ranked_actions, ActMode, Actor, PolicySpec, TransitionTuple};
use crate::pref::RewardModel;
use crate::{derive_seed, Error, Result};

/// Bounds on the encoder's posterior log-std.
pub const LATENT_LOG_STD_MIN: f64 = -12.0;
pub const LATENT_LOG_STD_MAX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbarlConfig {
    /// Size of each ranked action list.
    pub n: usize,
    /// Hinge floor of the reconstruction term.
    pub epsilon: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub beta_rec: f64,
    pub beta_pref: f64,
    pub beta_kl: f64,
    pub beta_dyn: f64,
    /// `beta_pref` used on the scratching preset.
    pub beta_pref_scratching: f64,
    pub z_dim: usize,
    pub hidden: usize,
    /// Number of Adam steps.
    pub steps: usize,
    pub batch_size: usize,
    /// `adam.lr` is the initial rate.
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Draw each tuple's list once instead of on every step.
    pub fixed_lists: bool,
    /// Use plain squared error instead of the hinged reconstruction term.
    pub plain_recon: bool,
    /// Steps averaged into one training-record entry.
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the initial rate to zero at the last step.
    Linear,
}

impl LrSchedule {
    pub fn rate(self, initial: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => initial,
            LrSchedule::Linear => initial * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

impl Default for PbarlConfig {
    fn default() -> Self {
        Self {
            n: 10,
            epsilon: 1.0,
            tau: 0.5,
            beta_rec: 1.0,
            beta_pref: 1.5,
            beta_kl: 0.1,
            beta_dyn: 1.0,
            beta_pref_scratching: 1.0,
            z_dim: 8,
            hidden: 64,
            steps: 20_000,
            batch_size: 32,
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Linear,
            fixed_lists: false,
            plain_recon: false,
            log_every: 100,
        }
    }
}

impl PbarlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n < 1 {
            return bad("pbarl.n must be >= 1");
        }
        if !(self.tau > 0.0) {
            return bad("pbarl.tau must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("pbarl.epsilon must be > 0");
        }
        if [self.beta_rec, self.beta_pref, self.beta_kl, self.beta_dyn, self.beta_pref_scratching]
            .iter()
            .any(|b| !(b.is_finite() && *b >= 0.0))
        {
            return bad("pbarl betas must be finite and >= 0");
        }
        if self.z_dim < 1 || self.hidden < 1 || self.batch_size < 1 || self.log_every < 1 {
            return bad("pbarl z_dim, hidden, batch_size and log_every must be >= 1");
        }
        Ok(())
    }

    /// The configuration as applied to one preset.
    pub fn for_preset(&self, preset: crate::env::Preset) -> PbarlConfig {
        match preset {
            crate::env::Preset::Scratching => PbarlConfig { beta_pref: self.beta_pref_scratching, ..self.clone() },
            _ => self.clone(),
        }
    }

    pub fn betas(&self) -> LossWeights {
        LossWeights {
            rec: self.beta_rec,
            pref: self.beta_pref,
            kl: self.beta_kl,
            dyn_: self.beta_dyn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub pref: f64,
    pub kl: f64,
    #[serde(rename = "dyn")]
    pub dyn_: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub pref: f64,
    pub kl: f64,
    #[serde(rename = "dyn")]
    pub dyn_: f64,
}

/// `β_rec L_rec + β_pref L_pref + β_kl L_kl + β_dyn L_dyn`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if ![c.rec, c.pref, c.kl, c.dyn_].iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss component {c:?}")));
    }
    Ok(w.rec * c.rec + w.pref * c.pref + w.kl * c.kl + w.dyn_ * c.dyn_)
}

/// Encoder `s ⊕ a -> (mean, log_std)` and decoder `s ⊕ z -> ā`.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeParams {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub z_dim: usize,
}

impl CvaeParams {
    pub fn new<R: Rng + ?Sized>(z_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: MlpParams::new(&[STATE_DIM + ACTION_DIM, hidden, hidden, 2 * z_dim], Activation::Tanh, rng)?,
            decoder: MlpParams::new(&[STATE_DIM + z_dim, hidden, hidden, ACTION_DIM], Activation::Tanh, rng)?,
            z_dim,
        })
    }

    pub fn from_parts(encoder: MlpParams, decoder: MlpParams) -> Result<Self> {
        let z_dim = encoder.out_dim() / 2;
        if encoder.in_dim() != STATE_DIM + ACTION_DIM
            || encoder.out_dim() != 2 * z_dim
            || decoder.in_dim() != STATE_DIM + z_dim
            || decoder.out_dim() != ACTION_DIM
        {
            return Err(Error::InvalidConfig("encoder/decoder dimensions do not chain".into()));
        }
        Ok(Self { encoder, decoder, z_dim })
    }
}

/// Residual next-state model `s̄′ = s + f(ā₁)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTransition {
    pub net: MlpParams,
}

impl LatentTransition {
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: MlpParams::new(&[ACTION_DIM, hidden, hidden, STATE_DIM], Activation::Tanh, rng)?,
        })
    }
}

#[derive(Debug)]
pub enum LatentMode<'r> {
    Sample(&'r mut ChaCha8Rng),
    Mean,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidConfig(format!("{what} must have {want} entries, got {got}")));
    }
    Ok(())
}

/// Posterior `q(z | s, a)` and a latent code (reparameterized or the mean).
pub fn encode(cvae: &CvaeParams, s: &[f64], a: &[f64], mode: LatentMode<'_>) -> Result<(GaussianDist, Vec<f64>)> {
    check_len("state", s.len(), STATE_DIM)?;
    check_len("action", a.len(), ACTION_DIM)?;
    let out = cvae.encoder.forward(&concat(s, a))?;
    let z_dim = cvae.z_dim;
    let log_std: Vec<f64> = out[z_dim..]
        .iter()
        .map(|v| v.clamp(LATENT_LOG_STD_MIN, LATENT_LOG_STD_MAX))
        .collect();
    let post = GaussianDist::new(out[..z_dim].to_vec(), log_std)?;
    let z = match mode {
        LatentMode::Mean => post.mean().to_vec(),
        LatentMode::Sample(rng) => post
            .mean()
            .iter()
            .zip(post.log_std())
            .map(|(m, ls)| {
                let eta: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eta
            })
            .collect(),
    };
    Ok((post, z))
}

pub fn decode(cvae: &CvaeParams, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    check_len("state", s.len(), STATE_DIM)?;
    check_len("latent", z.len(), cvae.z_dim)?;
    Ok(cvae.decoder.forward(&concat(s, z))?)
}

/// Element-wise encode then decode, preserving order.
pub fn reconstruct_list(cvae: &CvaeParams, s: &[f64], list: &[Vec<f64>], mut mode: LatentMode<'_>) -> Result<Vec<Vec<f64>>> {
    if list.is_empty() {
        return Err(Error::InvalidConfig("action list is empty".into()));
    }
    list.iter()
        .map(|a| {
            let m = match &mut mode {
                LatentMode::Mean => LatentMode::Mean,
                LatentMode::Sample(rng) => LatentMode::Sample(rng),
            };
            let (_, z) = encode(cvae, s, a, m)?;
            decode(cvae, s, &z)
        })
        .collect()
}

/// Indices that sort `scores` descending; equal scores keep their order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    idx
}

/// Reorders `list` by `R̂(s, ā)` descending.
pub fn rerank_by_reward(model: &RewardModel, s: &[f64], list: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if list.is_empty() {
        return Err(Error::InvalidConfig("action list is empty".into()));
    }
    let scores = list
        .iter()
        .map(|a| model.predict(s, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_scores(&scores).into_iter().map(|i| list[i].clone()).collect())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `(1/n) Σ_i [d_i + max(0, ε − d_i)]` with `d_i = ‖a_i − ā_i‖²`.
pub fn recon_hinge_loss(a: &[Vec<f64>], abar: &[Vec<f64>], epsilon: f64) -> Result<f64> {
    if a.len() != abar.len() || a.is_empty() {
        return Err(Error::InvalidConfig("action lists must be non-empty and of equal length".into()));
    }
    Ok(a.iter()
        .zip(abar)
        .map(|(x, y)| {
            let d = sq_dist(x, y);
            d + (epsilon - d).max(0.0)
        })
        .sum::<f64>()
        / a.len() as f64)
}

/// InfoNCE over same-position positives and averaged other-position
/// negatives with similarity `−‖x − y‖²`. Zero for single-item lists.
pub fn infonce_pref_loss(ap: &[Vec<f64>], ar: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be > 0".into()));
    }
    if ap.len() != ar.len() || ap.is_empty() {
        return Err(Error::InvalidConfig("action lists must be non-empty and of equal length".into()));
    }
    let n = ap.len();
    if n == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let pos = -sq_dist(&ap[i], &ar[i]) / tau;
        let negs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| -sq_dist(&ap[i], &ar[j]) / tau).collect();
        let m = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + negs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - ((n - 1) as f64).ln() - pos;
    }
    Ok(total / n as f64)
}

pub fn latent_transition_predict(f: &LatentTransition, s: &[f64], a1: &[f64]) -> Result<Vec<f64>> {
    check_len("state", s.len(), STATE_DIM)?;
    check_len("action", a1.len(), ACTION_DIM)?;
    let delta = f.net.forward(a1)?;
    Ok(s.iter().zip(delta).map(|(x, d)| x + d).collect())
}

pub fn dynamic_loss(s_next: &[f64], predicted: &[f64]) -> Result<f64> {
    if s_next.len() != predicted.len() {
        return Err(Error::InvalidConfig("state dimensions differ".into()));
    }
    Ok(sq_dist(s_next, predicted))
}

/// Batched hinge reconstruction loss over `N x A` rows (mean over rows).
pub fn traced_recon_loss<'t>(a: Var<'t>, abar: Var<'t>, epsilon: f64, plain: bool) -> nn::Result<Var<'t>> {
    let sq = a.sub(abar)?.square().sum_cols();
    if plain {
        return Ok(sq.mean());
    }
    Ok(sq.add(sq.neg().add_scalar(epsilon).relu())?.mean())
}

/// Batched InfoNCE over `B` lists of length `n` stored as `B·n` rows.
pub fn traced_infonce<'t>(ap: Var<'t>, ar: Var<'t>, n: usize, tau: f64) -> nn::Result<Var<'t>> {
    let rows = ap.shape().0;
    if n < 2 {
        return Ok(ap.tape().constant(Tensor::scalar(0.0)));
    }
    if rows % n != 0 || ar.shape() != ap.shape() {
        return Err(nn::NnError::InvalidArgument(format!("{rows} rows do not split into lists of {n}")));
    }
    let mut anchor = Vec::with_capacity(rows * (n - 1));
    let mut other = Vec::with_capacity(rows * (n - 1));
    for b in 0..rows / n {
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                anchor.push(b * n + i);
                other.push(b * n + j);
            }
        }
    }
    let neg = ap
        .gather_rows(&anchor)?
        .sub(ar.gather_rows(&other)?)?
        .square()
        .sum_cols()
        .scale(-1.0 / tau);
    let lse = neg.segment_logsumexp(n - 1)?;
    let pos = ap.sub(ar)?.square().sum_cols().scale(-1.0 / tau);
    Ok(lse.sub(pos)?.add_scalar(-((n - 1) as f64).ln()).mean())
}

/// Mean over rows of `‖s′ − (s + f(ā₁))‖²`.
pub fn traced_dynamic_loss<'t>(s: Var<'t>, delta: Var<'t>, s_next: Var<'t>) -> nn::Result<Var<'t>> {
    Ok(s_next.sub(s.add(delta)?)?.square().sum_cols().mean())
}

/// Bound trainable parameters for one training step.
pub struct BoundPbarl<'t> {
    pub encoder: nn::BoundMlp<'t>,
    pub decoder: nn::BoundMlp<'t>,
    pub transition: nn::BoundMlp<'t>,
}

/// Tape-level inputs of one training step. Lists are stored as `B·n` rows
/// with the probability-ranked order inside each block.
pub struct StepInputs {
    pub n: usize,
    /// `B x S`
    pub states: Tensor,
    /// `B x S`
    pub next_states: Tensor,
    /// `B·n x A`
    pub actions: Tensor,
    /// `B·n x z` standard-normal draws for the reparameterization.
    pub noise: Tensor,
}

/// Outputs of the traced forward pass.
pub struct StepGraph<'t> {
    pub total: Var<'t>,
    pub rec: Var<'t>,
    pub pref: Var<'t>,
    pub kl: Var<'t>,
    pub dyn_: Var<'t>,
    pub reconstructed: Var<'t>,
}

/// Reward-ranking hook. Receives `B·n x (S + A)` rows of `s ⊕ ā` (values only)
/// and returns a per-row score; the returned order never carries gradient.
pub type Scorer<'a> = &'a dyn Fn(&Tensor) -> Result<Vec<f64>>;

fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * times);
    for r in 0..t.rows() {
        for _ in 0..times {
            data.extend_from_slice(t.row_slice(r));
        }
    }
    Tensor::from_vec(t.rows() * times, t.cols(), data).expect("shape preserved")
}

/// Builds the composite loss on `tape`.
pub fn build_step<'t>(
    tape: &'t Tape,
    params: &BoundPbarl<'t>,
    inputs: &StepInputs,
    cfg: &PbarlConfig,
    scorer: Scorer<'_>,
) -> Result<StepGraph<'t>> {
    let n = inputs.n;
    let b = inputs.states.rows();
    let z_dim = inputs.noise.cols();
    let s_rep = repeat_rows(&inputs.states, n);
    let s_rep_v = tape.constant(s_rep.clone());
    let a_v = tape.constant(inputs.actions.clone());
    let enc = params.encoder.forward(s_rep_v.concat_cols(a_v)?)?;
    let mu = enc.slice_cols(0, z_dim)?;
    let log_std = enc.slice_cols(z_dim, 2 * z_dim)?.clamp(LATENT_LOG_STD_MIN, LATENT_LOG_STD_MAX);
    let z = mu.add(log_std.exp().mul(tape.constant(inputs.noise.clone()))?)?;
    let abar = params.decoder.forward(s_rep_v.concat_cols(z)?)?;

    // Reward re-ranking on detached values.
    let scores = {
        let ab = abar.value();
        let mut x = Vec::with_capacity(b * n * (STATE_DIM + ACTION_DIM));
        for r in 0..b * n {
            x.extend_from_slice(s_rep.row_slice(r));
            x.extend_from_slice(ab.row_slice(r));
        }
        scorer(&Tensor::from_vec(b * n, STATE_DIM + ACTION_DIM, x)?)?
    };
    let mut perm = Vec::with_capacity(b * n);
    for blk in 0..b {
        perm.extend(rank_by_scores(&scores[blk * n..(blk + 1) * n]).into_iter().map(|i| blk * n + i));
    }
    let reranked = abar.gather_rows(&perm)?;

    let rec = traced_recon_loss(a_v, abar, cfg.epsilon, cfg.plain_recon)?;
    let pref = traced_infonce(abar, reranked, n, cfg.tau)?;
    let kl = traced_kl_standard_normal(mu, log_std)?.mean();
    let firsts: Vec<usize> = (0..b).map(|k| k * n).collect();
    let delta = params.transition.forward(abar.gather_rows(&firsts)?)?;
    let dyn_ = traced_dynamic_loss(
        tape.constant(inputs.states.clone()),
        delta,
        tape.constant(inputs.next_states.clone()),
    )?;
    let total = rec
        .scale(cfg.beta_rec)
        .add(pref.scale(cfg.beta_pref))?
        .add(kl.scale(cfg.beta_kl))?
        .add(dyn_.scale(cfg.beta_dyn))?;
    Ok(StepGraph {
        total,
        rec,
        pref,
        kl,
        dyn_,
        reconstructed: abar,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PbarlRecord {
    /// Component losses averaged over each `log_every` window.
    pub components: Vec<LossComponents>,
    pub total: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbarlOutcome {
    pub cvae: CvaeParams,
    pub transition: LatentTransition,
    pub record: PbarlRecord,
}

impl PbarlOutcome {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("kind", "pbarl")
            .with_meta("z_dim", self.cvae.z_dim.to_string());
        ck.put_mlp("encoder", &self.cvae.encoder);
        ck.put_mlp("decoder", &self.cvae.decoder);
        ck.put_mlp("transition", &self.transition.net);
        ck
    }

    /// Restores parameters; the training record is not stored in checkpoints.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            cvae: CvaeParams::from_parts(ck.get_mlp("encoder")?, ck.get_mlp("decoder")?)?,
            transition: LatentTransition { net: ck.get_mlp("transition")? },
            record: PbarlRecord::default(),
        })
    }
}

struct Trainables {
    cvae: CvaeParams,
    transition: LatentTransition,
}

impl Parameters for Trainables {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.cvae.encoder.tensors();
        v.extend(self.cvae.decoder.tensors());
        v.extend(self.transition.net.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.cvae.encoder.tensors_mut();
        v.extend(self.cvae.decoder.tensors_mut());
        v.extend(self.transition.net.tensors_mut());
        v
    }
}

fn all_grads(params: &BoundPbarl<'_>, grads: &Gradients) -> Result<Vec<Tensor>> {
    let mut g = params.encoder.grads(grads)?;
    g.extend(params.decoder.grads(grads)?);
    g.extend(params.transition.grads(grads)?);
    Ok(g)
}

/// Jointly trains the encoder, decoder and latent transition model. The
/// reward model is only read.
pub fn train_pbarl(transitions: &[TransitionTuple], reward: &RewardModel, cfg: &PbarlConfig, seed: u64) -> Result<PbarlOutcome> {
    let scorer = |x: &Tensor| reward.predict_batch(x);
    train_pbarl_with_scorer(transitions, &scorer, cfg, seed)
}

/// [`train_pbarl`] with an arbitrary ranking function.
pub fn train_pbarl_with_scorer(transitions: &[TransitionTuple], scorer: Scorer<'_>, cfg: &PbarlConfig, seed: u64) -> Result<PbarlOutcome> {
    cfg.validate()?;
    if transitions.is_empty() {
        return Err(Error::InvalidConfig("transition dataset is empty".into()));
    }
    let dists = transitions.iter().map(|t| t.dist()).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Trainables {
        cvae: CvaeParams::new(cfg.z_dim, cfg.hidden, &mut rng)?,
        transition: LatentTransition::new(cfg.hidden, &mut rng)?,
    };
    let mut adam = AdamState::new(cfg.adam.clone(), &params.tensors());
    let fixed: Option<Vec<Vec<Vec<f64>>>> = if cfg.fixed_lists {
        let mut list_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x715));
        Some(
            dists
                .iter()
                .map(|d| sample_ranked_actions(d, cfg.n, &mut list_rng))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut record = PbarlRecord::default();
    let mut window = (LossComponents::default(), 0.0, 0usize);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..transitions.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let bsz = batch.len();
        let mut states = Vec::with_capacity(bsz * STATE_DIM);
        let mut next = Vec::with_capacity(bsz * STATE_DIM);
        let mut actions = Vec::with_capacity(bsz * cfg.n * ACTION_DIM);
        for &i in &batch {
            states.extend_from_slice(&transitions[i].s);
            next.extend_from_slice(&transitions[i].s_next);
            match &fixed {
                Some(lists) => actions.extend(lists[i].iter().flatten()),
                None => actions.extend(sample_ranked_actions(&dists[i], cfg.n, &mut rng)?.into_iter().flatten()),
            }
        }
        let noise: Vec<f64> = (0..bsz * cfg.n * cfg.z_dim).map(|_| rng.sample(StandardNormal)).collect();
        let inputs = StepInputs {
            n: cfg.n,
            states: Tensor::from_vec(bsz, STATE_DIM, states)?,
            next_states: Tensor::from_vec(bsz, STATE_DIM, next)?,
            actions: Tensor::from_vec(bsz * cfg.n, ACTION_DIM, actions)?,
            noise: Tensor::from_vec(bsz * cfg.n, cfg.z_dim, noise)?,
        };
        let tape = Tape::new();
        let bound = BoundPbarl {
            encoder: params.cvae.encoder.bind(&tape),
            decoder: params.cvae.decoder.bind(&tape),
            transition: params.transition.net.bind(&tape),
        };
        let graph = build_step(&tape, &bound, &inputs, cfg, scorer)?;
        let comps = LossComponents {
            rec: graph.rec.item()?,
            pref: graph.pref.item()?,
            kl: graph.kl.item()?,
            dyn_: graph.dyn_.item()?,
        };
        let total = graph.total.item()?;
        if !total.is_finite() || total_loss(&comps, &cfg.betas()).is_err() {
            return Err(Error::Numerical(format!(
                "pbarl loss non-finite at step {step}: rec={} pref={} kl={} dyn={}",
                comps.rec, comps.pref, comps.kl, comps.dyn_
            )));
        }
        let grads = all_grads(&bound, &tape.backward(graph.total)?)?;
        adam.set_lr(cfg.lr_schedule.rate(cfg.adam.lr, step, cfg.steps));
        adam.step(params.tensors_mut(), &grads)?;

        window.0.rec += comps.rec;
        window.0.pref += comps.pref;
        window.0.kl += comps.kl;
        window.0.dyn_ += comps.dyn_;
        window.1 += total;
        window.2 += 1;
        if window.2 == cfg.log_every || step + 1 == cfg.steps {
            let k = window.2 as f64;
            record.components.push(LossComponents {
                rec: window.0.rec / k,
                pref: window.0.pref / k,
                kl: window.0.kl / k,
                dyn_: window.0.dyn_ / k,
            });
            record.total.push(window.1 / k);
            window = (LossComponents::default(), 0.0, 0);
        }
        record.steps = step + 1;
    }
    Ok(PbarlOutcome {
        cvae: params.cvae,
        transition: params.transition,
        record,
    })
}

/// Frozen policy followed by the learned encoder/decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedPolicy {
    pub policy: PolicySpec,
    pub cvae: CvaeParams,
    pub action_bound: f64,
    /// Sample the policy and the latent instead of using means.
    pub stochastic: bool,
}

pub fn wrap_policy(policy: &PolicySpec, cvae: &CvaeParams, action_bound: f64) -> WrappedPolicy {
    WrappedPolicy {
        policy: policy.clone(),
        cvae: cvae.clone(),
        action_bound,
        stochastic: false,
    }
}

impl Actor for WrappedPolicy {
    fn act(&self, obs: &[f64], mode: ActMode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let sample = self.stochastic || mode == ActMode::Stochastic;
        let dist = self.policy.dist(obs)?;
        let (a, latent) = if sample {
            (dist.sample(rng), LatentMode::Sample(rng))
        } else {
            (dist.mean().to_vec(), LatentMode::Mean)
        };
        let (_, z) = encode(&self.cvae, obs, &a, latent)?;
        let b = self.action_bound;
        Ok(decode(&self.cvae, obs, &z)?.into_iter().map(|v| v.clamp(-b, b)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn row(v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    #[test]
    fn scratching_uses_its_own_preference_weight() {
        use crate::env::Preset;
        let cfg = PbarlConfig::default();
        assert_eq!(cfg.for_preset(Preset::Feeding), cfg);
        assert_eq!(cfg.for_preset(Preset::Drinking).beta_pref, 1.5);
        let s = cfg.for_preset(Preset::Scratching);
        assert_eq!(s.beta_pref, 1.0);
        assert_eq!(PbarlConfig { beta_pref: 1.5, ..s }, cfg);
    }

    #[test]
    fn recon_hinge_examples() {
        let a = vec![row(&[0.3, -0.2]), row(&[1.0, 1.0])];
        assert!((recon_hinge_loss(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let l = recon_hinge_loss(&[row(&[0.0, 0.0])], &[row(&[2.0, 0.0])], 1.0).unwrap();
        assert_eq!(l, 4.0);
        assert!(recon_hinge_loss(&a, &a[..1], 1.0).is_err());
    }

    #[test]
    fn infonce_examples() {
        let same = vec![row(&[0.5, 0.5]); 4];
        assert_eq!(infonce_pref_loss(&same, &same, 0.5).unwrap(), 0.0);
        let ap = vec![row(&[0.0, 0.0]), row(&[1.0, 0.0])];
        assert!((infonce_pref_loss(&ap, &ap, 1.0).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(infonce_pref_loss(&ap[..1], &ap[..1], 1.0).unwrap(), 0.0);
        assert!(infonce_pref_loss(&ap, &ap, 0.0).is_err());
        assert!(infonce_pref_loss(&ap, &ap[..1], 1.0).is_err());
    }

    #[test]
    fn dynamic_and_total_examples() {
        let s_next = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(dynamic_loss(&s_next, &[0.0; 7]).unwrap(), 2.0);
        assert_eq!(dynamic_loss(&s_next, &s_next).unwrap(), 0.0);
        let c = LossComponents { rec: 1.0, pref: -1.0, kl: 0.5, dyn_: 2.0 };
        let w = PbarlConfig::default().betas();
        assert!((total_loss(&c, &w).unwrap() - 1.55).abs() < 1e-12);
        let zero = LossWeights { rec: 0.0, pref: 0.0, kl: 0.0, dyn_: 0.0 };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
        let doubled = LossComponents { kl: 1.0, ..c };
        assert!((total_loss(&doubled, &w).unwrap() - total_loss(&c, &w).unwrap() - 0.05).abs() < 1e-12);
        assert!(total_loss(&LossComponents { rec: f64::NAN, ..c }, &w).is_err());
    }

    #[test]
    fn zero_transition_is_residual_identity() {
        let f = LatentTransition {
            net: MlpParams::zeros(&[ACTION_DIM, 4, 4, STATE_DIM], Activation::Tanh).unwrap(),
        };
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(latent_transition_predict(&f, &s, &[1.0, -1.0]).unwrap(), s.to_vec());
    }

    fn small_cvae(seed: u64) -> CvaeParams {
        CvaeParams::new(3, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn encode_modes() {
        let cvae = small_cvae(0);
        let s = [0.1; STATE_DIM];
        let a = [0.5, -0.5];
        let (p1, z1) = encode(&cvae, &s, &a, LatentMode::Mean).unwrap();
        let (_, z2) = encode(&cvae, &s, &a, LatentMode::Mean).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1, p1.mean());

        let mut tight = cvae.clone();
        let last = tight.encoder.layers_mut().last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.rows(), last.weight.cols());
        last.bias = Tensor::row(&[0.3, -0.1, 0.7, -10.0, -10.0, -10.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, zs) = encode(&tight, &s, &a, LatentMode::Sample(&mut rng)).unwrap();
        let (_, zm) = encode(&tight, &s, &a, LatentMode::Mean).unwrap();
        for (x, y) in zs.iter().zip(&zm) {
            assert!((x - y).abs() < 1e-3);
        }
        assert!(encode(&cvae, &s[..3], &a, LatentMode::Mean).is_err());
    }

    #[test]
    fn decode_zero_weights_and_state_conditioning() {
        let mut cvae = small_cvae(2);
        let layers: Vec<Layer> = cvae
            .decoder
            .layers()
            .iter()
            .map(|l| Layer { weight: Tensor::zeros(l.weight.rows(), l.weight.cols()), bias: l.bias.clone() })
            .collect();
        let mut zeroed = cvae.clone();
        zeroed.decoder = MlpParams::from_layers(layers, Activation::Tanh).unwrap();
        let bias = zeroed.decoder.layers().last().unwrap().bias.data().to_vec();
        assert_eq!(decode(&zeroed, &[0.3; 7], &[1.0, 2.0, 3.0]).unwrap(), bias);
        assert_eq!(decode(&zeroed, &[-0.9; 7], &[0.0; 3]).unwrap(), bias);
        cvae.z_dim = 3;
        let x = decode(&cvae, &[0.3; 7], &[0.5; 3]).unwrap();
        let y = decode(&cvae, &[-0.3; 7], &[0.5; 3]).unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn reconstruct_list_is_elementwise() {
        let cvae = small_cvae(3);
        let s = [0.2; STATE_DIM];
        let list: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, -0.1 * i as f64]).collect();
        let out = reconstruct_list(&cvae, &s, &list, LatentMode::Mean).unwrap();
        assert_eq!(out.len(), list.len());
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| list[i].clone()).collect();
        let out_p = reconstruct_list(&cvae, &s, &permuted, LatentMode::Mean).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out_p[k], out[i]);
        }
        let single = reconstruct_list(&cvae, &s, &list[..1], LatentMode::Mean).unwrap();
        let (_, z) = encode(&cvae, &s, &list[0], LatentMode::Mean).unwrap();
        assert_eq!(single[0], decode(&cvae, &s, &z).unwrap());
        assert!(reconstruct_list(&cvae, &s, &[], LatentMode::Mean).is_err());
    }

    #[test]
    fn rank_by_scores_is_stable() {
        assert_eq!(rank_by_scores(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
        assert_eq!(rank_by_scores(&[0.1, 0.9, 0.5, 0.9]), vec![1, 3, 2, 0]);
    }

    #[test]
    fn traced_losses_match_scalar_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let b = 3;
        let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..b * n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect()
        };
        let ap = mk(&mut rng);
        let ar = mk(&mut rng);
        let tape = Tape::new();
        let to_var = |l: &[Vec<f64>]| tape.constant(Tensor::from_rows(l).unwrap());
        let traced_nce = traced_infonce(to_var(&ap), to_var(&ar), n, 0.5).unwrap().item().unwrap();
        let traced_rec = traced_recon_loss(to_var(&ap), to_var(&ar), 1.0, false).unwrap().item().unwrap();
        let mut nce = 0.0;
        let mut rec = 0.0;
        for k in 0..b {
            let r = k * n..(k + 1) * n;
            nce += infonce_pref_loss(&ap[r.clone()], &ar[r.clone()], 0.5).unwrap() / b as f64;
            rec += recon_hinge_loss(&ap[r.clone()], &ar[r], 1.0).unwrap() / b as f64;
        }
        assert!((traced_nce - nce).abs() < 1e-12);
        assert!((traced_rec - rec).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PbarlConfig::default().validate().is_ok());
        assert!(PbarlConfig { n: 0, ..Default::default() }.validate().is_err());
        assert!(PbarlConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(PbarlConfig { beta_kl: -1.0, ..Default::default() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_list(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, ACTION_DIM), n)
        }

        proptest! {
            #[test]
            fn hinge_item_equals_max(a in arb_list(1), abar in arb_list(1), eps in 0.01f64..3.0) {
                let l = recon_hinge_loss(&a, &abar, eps).unwrap();
                prop_assert!((l - sq_dist(&a[0], &abar[0]).max(eps)).abs() < 1e-12);
                prop_assert!(l >= eps - 1e-12);
            }

            #[test]
            fn infonce_joint_permutation_invariant(
                (ap, ar, perm) in (2usize..8).prop_flat_map(|n| (arb_list(n), arb_list(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle())),
                tau in 0.1f64..2.0,
            ) {
                let l = infonce_pref_loss(&ap, &ar, tau).unwrap();
                let pa: Vec<_> = perm.iter().map(|&i| ap[i].clone()).collect();
                let pr: Vec<_> = perm.iter().map(|&i| ar[i].clone()).collect();
                let lp = infonce_pref_loss(&pa, &pr, tau).unwrap();
                prop_assert!((l - lp).abs() < 1e-9 * (1.0 + l.abs()));
            }

            #[test]
            fn rerank_is_a_permutation(scores in prop::collection::vec(-5.0f64..5.0, 1..12)) {
                let mut idx = rank_by_scores(&scores);
                for w in idx.windows(2) {
                    prop_assert!(scores[w[0]] >= scores[w[1]]);
                }
                idx.sort();
                prop_assert_eq!(idx, (0..scores.len()).collect::<Vec<_>>());
            }

            #[test]
            fn dynamic_loss_non_negative(a in prop::collection::vec(-5.0f64..5.0, 7), b in prop::collection::vec(-5.0f64..5.0, 7)) {
                prop_assert!(dynamic_loss(&a, &b).unwrap() >= 0.0);
            }
        }
    }
}
