//! Finite-difference gradient suite over every training loss.
//!
//! Each loss is checked at a number of random points (fresh parameters and
//! inputs per point). Discrete choices inside a loss, namely the reward
//! re-ranking of the composite step, are held fixed at each point.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::env::{ACTION_DIM, STATE_DIM};
use crate::nn::gaussian::traced_kl_standard_normal;
use crate::nn::{self, finite_diff_check, Activation, BoundMlp, GradCheckConfig, MlpParams, Parameters, Tape, Tensor};
use crate::pbarl::{
    build_step, traced_dynamic_loss, traced_infonce, traced_recon_loss, BoundPbarl, CvaeParams, LatentTransition,
    PbarlConfig, StepInputs,
};
use crate::pref::traced_pref_ce;
use crate::{derive_seed, Result};

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub points: usize,
    pub failed_points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<LossCheck>,
    /// Largest gradient magnitude seen inside the hinge's flat region.
    pub flat_region_max_grad: f64,
    pub elapsed: Duration,
    pub passed: bool,
}

/// Loss names in suite order.
pub const LOSSES: [&str; 6] = ["pref_ce", "recon_hinge", "infonce", "dynamic", "kl", "composite"];

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

fn mlp_tensors(m: &MlpParams) -> Vec<Tensor> {
    m.tensors().into_iter().cloned().collect()
}

fn pref_ce_point(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<nn::GradCheckReport> {
    let net = MlpParams::new(&[STATE_DIM + ACTION_DIM, 6, 1], Activation::Tanh, rng)?;
    let pairs = rng.random_range(1..4);
    let mut lengths = Vec::new();
    for _ in 0..2 * pairs {
        lengths.push(rng.random_range(2..5));
    }
    let rows = uniform(rng, lengths.iter().sum(), STATE_DIM + ACTION_DIM, -1.5, 1.5);
    let labels: Vec<f64> = (0..pairs).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect();
    let firsts: Vec<usize> = (0..pairs).map(|k| 2 * k).collect();
    let seconds: Vec<usize> = (0..pairs).map(|k| 2 * k + 1).collect();
    Ok(finite_diff_check(
        &mlp_tensors(&net),
        |tape, v| {
            let sums = BoundMlp::from_vars(v, Activation::Tanh)?
                .forward(tape.constant(rows.clone()))?
                .segment_sum(&lengths)?;
            traced_pref_ce(sums.gather_rows(&seconds)?.sub(sums.gather_rows(&firsts)?)?, &labels)
        },
        cfg,
    )?)
}

/// Points where every item sits at least 0.1 away from the hinge kink.
fn recon_point(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, epsilon: f64) -> Result<nn::GradCheckReport> {
    let n = rng.random_range(1..6);
    let a = uniform(rng, n, ACTION_DIM, -3.0, 3.0);
    let mut abar = Vec::with_capacity(n * ACTION_DIM);
    for i in 0..n {
        let sq = if rng.random_bool(0.5) {
            rng.random_range(epsilon + 0.1..epsilon + 4.0)
        } else {
            rng.random_range(0.0..(epsilon - 0.1).max(0.0))
        };
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        abar.push(a.get(i, 0) + sq.sqrt() * angle.cos());
        abar.push(a.get(i, 1) + sq.sqrt() * angle.sin());
    }
    let abar = Tensor::from_vec(n, ACTION_DIM, abar)?;
    Ok(finite_diff_check(
        &[abar],
        |tape, v| traced_recon_loss(tape.constant(a.clone()), v[0], epsilon, false),
        cfg,
    )?)
}

fn infonce_point(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<nn::GradCheckReport> {
    let n = rng.random_range(2..7);
    let lists = rng.random_range(1..3);
    let tau = rng.random_range(0.2..2.0);
    let ap = randn(rng, lists * n, ACTION_DIM, 1.0);
    let ar = randn(rng, lists * n, ACTION_DIM, 1.0);
    Ok(finite_diff_check(&[ap, ar], |_, v| traced_infonce(v[0], v[1], n, tau), cfg)?)
}

fn dynamic_point(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<nn::GradCheckReport> {
    let net = MlpParams::new(&[ACTION_DIM, 6, 6, STATE_DIM], Activation::Tanh, rng)?;
    let b = rng.random_range(1..5);
    let abar = randn(rng, b, ACTION_DIM, 1.0);
    let s = randn(rng, b, STATE_DIM, 1.0);
    let s_next = randn(rng, b, STATE_DIM, 1.0);
    Ok(finite_diff_check(
        &mlp_tensors(&net),
        |tape, v| {
            let delta = BoundMlp::from_vars(v, Activation::Tanh)?.forward(tape.constant(abar.clone()))?;
            traced_dynamic_loss(tape.constant(s.clone()), delta, tape.constant(s_next.clone()))
        },
        cfg,
    )?)
}

fn kl_point(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<nn::GradCheckReport> {
    let rows = rng.random_range(1..5);
    let z = rng.random_range(1..5);
    let mu = randn(rng, rows, z, 1.0);
    let log_std = uniform(rng, rows, z, -2.0, 1.0);
    Ok(finite_diff_check(
        &[mu, log_std],
        |_, v| Ok(traced_kl_standard_normal(v[0], v[1])?.mean()),
        cfg,
    )?)
}

/// Full training objective on a 2-tuple micro-dataset with lists of three.
pub fn composite_point(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<nn::GradCheckReport> {
    let (b, n, z_dim, hidden) = (2, 3, 2, 6);
    let pcfg = PbarlConfig { n, z_dim, hidden, ..PbarlConfig::default() };
    let cvae = CvaeParams::new(z_dim, hidden, rng)?;
    let transition = LatentTransition::new(hidden, rng)?;
    let inputs = StepInputs {
        n,
        states: uniform(rng, b, STATE_DIM, -1.0, 1.0),
        next_states: uniform(rng, b, STATE_DIM, -1.0, 1.0),
        actions: randn(rng, b * n, ACTION_DIM, 1.5),
        noise: randn(rng, b * n, z_dim, 1.0),
    };
    let scores: Vec<f64> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scorer = |_: &Tensor| -> Result<Vec<f64>> { Ok(scores.clone()) };
    let enc = cvae.encoder.tensors().len();
    let dec = cvae.decoder.tensors().len();
    let mut params = mlp_tensors(&cvae.encoder);
    params.extend(mlp_tensors(&cvae.decoder));
    params.extend(mlp_tensors(&transition.net));
    let act = cvae.encoder.activation();
    Ok(finite_diff_check(
        &params,
        |tape, v| {
            let bound = BoundPbarl {
                encoder: BoundMlp::from_vars(&v[..enc], act)?,
                decoder: BoundMlp::from_vars(&v[enc..enc + dec], act)?,
                transition: BoundMlp::from_vars(&v[enc + dec..], act)?,
            };
            build_step(tape, &bound, &inputs, &pcfg, &scorer)
                .map(|g| g.total)
                .map_err(|e| nn::NnError::InvalidArgument(e.to_string()))
        },
        cfg,
    )?)
}

/// Largest analytic gradient of the hinge with every item inside the flat region.
fn flat_region_grad(rng: &mut ChaCha8Rng, epsilon: f64) -> Result<f64> {
    let n = rng.random_range(1..6);
    let a = uniform(rng, n, ACTION_DIM, -3.0, 3.0);
    let mut abar = a.clone();
    for v in abar.data_mut() {
        *v += rng.random_range(-0.5..0.5) * (epsilon / 2.0).sqrt();
    }
    let tape = Tape::new();
    let p = tape.param(abar);
    let loss = traced_recon_loss(tape.constant(a), p, epsilon, false)?;
    let g = tape.backward(loss)?.wrt(p)?;
    Ok(g.data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Runs `points` random checks per loss.
pub fn run_gradient_suite(points: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let epsilon = PbarlConfig::default().epsilon;
    let mut checks = Vec::new();
    for (k, name) in LOSSES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let (mut failed, mut max_rel): (usize, f64) = (0, 0.0);
        for p in 0..points {
            let cfg = GradCheckConfig { seed: derive_seed(seed, p as u64), ..GradCheckConfig::default() };
            let report = match *name {
                "pref_ce" => pref_ce_point(&mut rng, &cfg)?,
                "recon_hinge" => recon_point(&mut rng, &cfg, epsilon)?,
                "infonce" => infonce_point(&mut rng, &cfg)?,
                "dynamic" => dynamic_point(&mut rng, &cfg)?,
                "kl" => kl_point(&mut rng, &cfg)?,
                _ => composite_point(&mut rng, &cfg)?,
            };
            max_rel = max_rel.max(report.max_rel_error);
            if !report.passed {
                failed += 1;
            }
        }
        checks.push(LossCheck {
            name,
            points,
            failed_points: failed,
            max_rel_error: max_rel,
            passed: failed == 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xf1a7));
    let mut flat: f64 = 0.0;
    for _ in 0..points {
        flat = flat.max(flat_region_grad(&mut rng, epsilon)?);
    }
    let passed = checks.iter().all(|c| c.passed) && flat == 0.0;
    Ok(SuiteReport {
        checks,
        flat_region_max_grad: flat,
        elapsed: start.elapsed(),
        passed,
    })
}
