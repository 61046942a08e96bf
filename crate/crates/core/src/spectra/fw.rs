use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SharpnessEstimate;
use crate::error::{Error, Result};
use crate::norms::NormSpec;
use crate::objectives::HvpOracle;
use crate::param::{gaussian_like, inner, ParamVector};
use crate::rng::RngState;

/// Redraws allowed per restart when the initial point has a zero Hessian image.
const MAX_REDRAWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FwConfig {
    /// Inner iterations per restart.
    pub iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FwConfig {
    fn default() -> Self {
        FwConfig {
            iters: 50,
            restarts: 5,
            seed: 0,
        }
    }
}

impl FwConfig {
    pub fn new(iters: usize, restarts: usize, seed: u64) -> Self {
        FwConfig { iters, restarts, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.restarts == 0 {
            return Err(Error::invalid("Frank-Wolfe needs at least one iteration and one restart"));
        }
        Ok(())
    }
}

/// Restarted Frank–Wolfe ascent of `u^T H u` over the unit ball.
///
/// Restart `r` draws its start from stream `r` of `cfg.seed`, so the set of
/// restarts for `M` is a prefix of the set for any larger `M`. The step size
/// `γ_k = 2/(2+k)` restarts at `k = 0` for every restart. Restarts run in
/// parallel; results are folded in restart order.
pub fn sharpness_fw(h: &dyn HvpOracle, spec: &NormSpec, cfg: &FwConfig) -> Result<SharpnessEstimate> {
    cfg.validate()?;
    spec.check(h.layout())?;
    let runs: Vec<(f64, ParamVector)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| fw_restart(h, spec, cfg.iters, RngState::with_stream(cfg.seed, r as u64)))
        .collect::<Result<_>>()?;
    fold(h, spec, runs)
}

fn fold(h: &dyn HvpOracle, spec: &NormSpec, runs: Vec<(f64, ParamVector)>) -> Result<SharpnessEstimate> {
    let per_restart: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mut best = 0;
    for (i, v) in per_restart.iter().enumerate() {
        if *v > per_restart[best] {
            best = i;
        }
    }
    let (value, direction) = runs.into_iter().nth(best).expect("at least one restart");
    let gap = fw_gap(&direction, h, spec)?;
    Ok(SharpnessEstimate {
        value,
        direction,
        fw_gap: gap,
        restarts_used: per_restart.len(),
        per_restart,
    })
}

fn initial_point(h: &dyn HvpOracle, spec: &NormSpec, rng: &mut RngState) -> Result<ParamVector> {
    for _ in 0..MAX_REDRAWS {
        let draw = gaussian_like(h.layout(), rng);
        let Ok(u) = spec.project_sphere(&draw) else { continue };
        if !h.apply(&u)?.is_zero() {
            return Ok(u);
        }
    }
    Err(Error::ZeroVector("Hessian image of every initial draw was zero"))
}

fn fw_restart(h: &dyn HvpOracle, spec: &NormSpec, iters: usize, mut rng: RngState) -> Result<(f64, ParamVector)> {
    let mut u = match initial_point(h, spec, &mut rng) {
        Ok(u) => u,
        // H annihilates every draw: the quadratic form is zero on the sphere.
        Err(Error::ZeroVector(_)) => {
            let u = spec.project_sphere(&gaussian_like(h.layout(), &mut rng))?;
            return Ok((0.0, u));
        }
        Err(e) => return Err(e),
    };
    for k in 0..iters {
        let hu = h.apply(&u)?;
        if hu.is_zero() {
            break;
        }
        let v = spec.dual_vector(&hu)?;
        let gamma = 2.0 / (2.0 + k as f64);
        let next: Vec<f64> = u
            .as_slice()
            .iter()
            .zip(v.as_slice())
            .map(|(a, b)| (1.0 - gamma) * a + gamma * b)
            .collect();
        u = u.with_data(next)?;
    }
    let u = spec.project_sphere(&u)?;
    let value = inner(&u, &h.apply(&u)?)?;
    Ok((value, u))
}

/// `max_{‖v‖≤1} ⟨v − u, 2Hu⟩ = 2(‖Hu‖* − u^T H u)`.
pub fn fw_gap(u: &ParamVector, h: &dyn HvpOracle, spec: &NormSpec) -> Result<f64> {
    let hu = h.apply(u)?;
    Ok(2.0 * (spec.dual_norm(&hu)? - inner(u, &hu)?))
}

/// Iterates `u ← Π(Hu)` with the geometry's sphere projection, returning the
/// best quadratic form seen within `iters` steps. Carries no convergence
/// guarantee outside the Euclidean case and may cycle; the cap always applies.
pub fn projected_power_iteration(h: &dyn HvpOracle, spec: &NormSpec, iters: usize, seed: u64) -> Result<SharpnessEstimate> {
    spec.check(h.layout())?;
    let mut rng = RngState::new(seed);
    let mut u = initial_point(h, spec, &mut rng)?;
    let mut best = (inner(&u, &h.apply(&u)?)?, u.clone());
    for _ in 0..iters {
        let hu = h.apply(&u)?;
        u = if hu.is_zero() {
            initial_point(h, spec, &mut rng)?
        } else {
            spec.project_sphere(&hu)?
        };
        let value = inner(&u, &h.apply(&u)?)?;
        if value > best.0 {
            best = (value, u.clone());
        }
    }
    fold(h, spec, vec![best])
}
