//! Central finite-difference verification of traced gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::Result;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates checked per call; above this a seeded random subset is used.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordFailure {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<CoordFailure>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward-pass gradient of `build` with central differences.
///
/// `build` receives the tape and one trainable var per entry of `params` and
/// must return a `1 x 1` loss. It is re-run on perturbed copies of the
/// parameters, so it has to be deterministic.
pub fn finite_diff_check<F>(params: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.wrt(*v)).collect::<Result<Vec<_>>>()?
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        build(&tape, &vars)?.item()
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut failures = Vec::new();
    for &(t, i) in &chosen {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + cfg.h;
        let plus = eval(&work)?;
        work[t].data_mut()[i] = orig - cfg.h;
        let minus = eval(&work)?;
        work[t].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic[t].data()[i];
        let rel = relative_error(a, numeric);
        max_rel_error = max_rel_error.max(rel);
        if !(rel < cfg.tol) {
            failures.push(CoordFailure {
                tensor: t,
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked: chosen.len(),
        passed: failures.is_empty(),
        failures,
    })
}
