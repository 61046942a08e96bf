//! Steepest descent under a norm geometry.
//!
//! Unnormalized: `w' = w − η ‖g‖* (g)*`. Normalized: `w' = w − η (g)*`.
//! Each step records the dual gradient norm, the stability threshold and the
//! directional smoothness `D` along the chord it took, so the one-step
//! identity `ΔL = −η(1 − ηD/2)‖g‖*²` (normalized: `−η(‖g‖* − ηD/2)`) can be
//! checked after the fact.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixfns::{nuclear_norm, polar_factor, PolarMethod};
use crate::norms::{block_norms, span_matrix, tie_set, write_span, NormSpec, Preconditioner};
use crate::objectives::Objective;
use crate::param::{axpy, BlockLayout, ParamVector};
use crate::spectra::{sharpness_fw, smoothness_from_values, FwConfig};

/// Dual gradient norms at or below this leave the iterate in place.
pub const STATIONARY_TOL: f64 = 1e-14;

/// Losses above this (or non-finite iterates) mark a run as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    #[default]
    Unnormalized,
    Normalized,
}

/// RMSprop-style second-moment schedule for a diagonal preconditioner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerSpec {
    pub mode: StepMode,
    pub norm: NormSpec,
    pub eta: f64,
    pub ema: Option<EmaSchedule>,
}

impl OptimizerSpec {
    pub fn new(mode: StepMode, norm: NormSpec, eta: f64) -> Result<Self> {
        let spec = OptimizerSpec {
            mode,
            norm,
            eta,
            ema: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Replaces the metric every step by `diag(sqrt(ν) + ε)`; `norm` must be a
    /// diagonal preconditioned geometry (its initial matrix is not used).
    pub fn with_ema(mut self, beta2: f64, epsilon: f64) -> Result<Self> {
        self.ema = Some(EmaSchedule { beta2, epsilon });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.eta)));
        }
        if let Some(ema) = &self.ema {
            if !(0.0..1.0).contains(&ema.beta2) {
                return Err(Error::invalid(format!("beta2 must lie in [0, 1), got {}", ema.beta2)));
            }
            if !(ema.epsilon > 0.0) {
                return Err(Error::invalid(format!("epsilon must be positive, got {}", ema.epsilon)));
            }
            match &self.norm {
                NormSpec::Preconditioned(p) if p.is_diagonal() => {}
                _ => return Err(Error::invalid("EMA preconditioning requires a diagonal preconditioned norm")),
            }
        }
        Ok(())
    }

    /// `2/η`, or `2‖g‖*/η` in normalized mode.
    pub fn threshold(&self, dual_grad_norm: f64) -> f64 {
        threshold(self.mode, self.eta, dual_grad_norm)
    }
}

pub fn threshold(mode: StepMode, eta: f64, dual_grad_norm: f64) -> f64 {
    match mode {
        StepMode::Unnormalized => 2.0 / eta,
        StepMode::Normalized => 2.0 * dual_grad_norm / eta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessSample {
    pub value: f64,
    pub fw_gap: f64,
    pub restarts: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `‖g‖*` at the pre-step iterate.
    pub dual_grad_norm: f64,
    /// `d_t`, with `w_{t+1} = w_t − η d_t` (kept only when requested in runs).
    pub direction: Option<ParamVector>,
    pub dir_smoothness: Option<f64>,
    pub threshold: f64,
    pub stationary: bool,
    pub diverged: bool,
    /// The diagonal metric the step used (EMA-preconditioned runs).
    pub preconditioner: Option<Arc<Preconditioner>>,
    /// Generalized sharpness at the pre-step iterate, when measured.
    pub sharpness: Option<SharpnessSample>,
}

impl StepRecord {
    pub fn delta_loss(&self) -> f64 {
        self.loss_after - self.loss_before
    }
}

/// Right-hand side of the one-step descent identity.
pub fn identity_rhs(mode: StepMode, eta: f64, dual_grad_norm: f64, smoothness: f64) -> f64 {
    match mode {
        StepMode::Unnormalized => -eta * (1.0 - 0.5 * eta * smoothness) * dual_grad_norm * dual_grad_norm,
        StepMode::Normalized => -eta * (dual_grad_norm - 0.5 * eta * smoothness),
    }
}

/// `|ΔL − rhs|` relative to `max(|ΔL|, |⟨g, w' − w⟩|)`; `None` for steps that
/// did not move.
pub fn identity_residual(rec: &StepRecord, mode: StepMode, eta: f64) -> Option<f64> {
    let d = rec.dir_smoothness?;
    let dl = rec.delta_loss();
    let linear = match mode {
        StepMode::Unnormalized => eta * rec.dual_grad_norm * rec.dual_grad_norm,
        StepMode::Normalized => eta * rec.dual_grad_norm,
    };
    let rhs = identity_rhs(mode, eta, rec.dual_grad_norm, d);
    Some((dl - rhs).abs() / dl.abs().max(linear).max(f64::MIN_POSITIVE))
}

fn diverged_record(step: usize, loss: f64, thr: f64) -> StepRecord {
    StepRecord {
        step,
        loss_before: loss,
        loss_after: f64::NAN,
        dual_grad_norm: f64::NAN,
        direction: None,
        dir_smoothness: None,
        threshold: thr,
        stationary: false,
        diverged: true,
        preconditioner: None,
        sharpness: None,
    }
}

/// A step whose displacement is known but whose endpoint has not been evaluated.
struct Pending {
    next: ParamVector,
    record: StepRecord,
    /// Geometry used to measure the chord.
    norm: NormSpec,
}

fn pending(
    step: usize,
    w: &ParamVector,
    loss: f64,
    dual_grad_norm: f64,
    direction: Option<ParamVector>,
    eta: f64,
    thr: f64,
    norm: NormSpec,
) -> Result<Pending> {
    let (next, stationary) = match &direction {
        Some(d) => (axpy(-eta, d, w)?, false),
        None => (w.clone(), true),
    };
    Ok(Pending {
        next,
        record: StepRecord {
            step,
            loss_before: loss,
            loss_after: loss,
            dual_grad_norm,
            direction,
            dir_smoothness: None,
            threshold: thr,
            stationary,
            diverged: false,
            preconditioner: None,
            sharpness: None,
        },
        norm,
    })
}

/// Generic direction `d_t` for a geometry; `None` when stationary.
pub(crate) fn generic_direction(norm: &NormSpec, mode: StepMode, g: &ParamVector) -> Result<(f64, Option<ParamVector>)> {
    if g.is_zero() {
        return Ok((0.0, None));
    }
    let (dn, dv) = norm.dual_pair(g)?;
    if dn <= STATIONARY_TOL {
        return Ok((dn, None));
    }
    let d = match mode {
        StepMode::Unnormalized => dv.map(|x| dn * x),
        StepMode::Normalized => dv,
    };
    Ok((dn, Some(d)))
}

/// Evaluates the endpoint, fills loss, smoothness and divergence; returns the
/// new gradient when the endpoint is finite.
fn complete(
    obj: &dyn Objective,
    w: &ParamVector,
    g: &ParamVector,
    mut p: Pending,
) -> Result<(ParamVector, StepRecord, Option<ParamVector>)> {
    if p.record.stationary {
        return Ok((p.next, p.record, Some(g.clone())));
    }
    match obj.loss_grad(&p.next) {
        Ok((loss, g_next)) => {
            p.record.loss_after = loss;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                p.record.diverged = true;
            }
            if loss.is_finite() {
                p.record.dir_smoothness = Some(smoothness_from_values(p.record.loss_before, loss, g, w, &p.next, &p.norm)?);
            }
            let finite = g_next.is_finite();
            Ok((p.next, p.record, finite.then_some(g_next)))
        }
        Err(Error::Diverged) => {
            p.record.loss_after = f64::NAN;
            p.record.diverged = true;
            Ok((p.next, p.record, None))
        }
        Err(e) => Err(e),
    }
}

fn checked_loss_grad(obj: &dyn Objective, w: &ParamVector) -> Result<Option<(f64, ParamVector)>> {
    match obj.loss_grad(w) {
        Ok((l, g)) if l.is_finite() && g.is_finite() => Ok(Some((l, g))),
        Ok(_) | Err(Error::Diverged) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One step of the generic method for `spec` (EMA state is not tracked here;
/// use [`rmsprop_step`] or [`run`] for that).
pub fn step(obj: &dyn Objective, w: &ParamVector, spec: &OptimizerSpec) -> Result<(ParamVector, StepRecord)> {
    spec.validate()?;
    let Some((loss, g)) = checked_loss_grad(obj, w)? else {
        return Ok((w.clone(), diverged_record(0, f64::NAN, spec.threshold(f64::NAN))));
    };
    let (dn, dir) = generic_direction(&spec.norm, spec.mode, &g)?;
    let p = pending(0, w, loss, dn, dir, spec.eta, spec.threshold(dn), spec.norm.clone())?;
    let (next, rec, _) = complete(obj, w, &g, p)?;
    Ok((next, rec))
}

/// Block coordinate descent: every block whose gradient norm ties the
/// maximum (relative tolerance `1e-12`) moves by `−(η/|J|) g^ℓ`.
pub fn block_cd_step(
    obj: &dyn Objective,
    w: &ParamVector,
    partition: &BlockLayout,
    eta: f64,
) -> Result<(ParamVector, StepRecord)> {
    if partition.total_dim() != w.len() {
        return Err(Error::LayoutMismatch(format!(
            "partition covers {} entries, vector has {}",
            partition.total_dim(),
            w.len()
        )));
    }
    let norm = NormSpec::block_l12_with(partition.clone());
    let thr = threshold(StepMode::Unnormalized, eta, 0.0);
    let Some((loss, g)) = checked_loss_grad(obj, w)? else {
        return Ok((w.clone(), diverged_record(0, f64::NAN, thr)));
    };
    let norms = block_norms(partition, g.as_slice());
    let max = norms.iter().copied().fold(0.0, f64::max);
    let direction = if max <= STATIONARY_TOL {
        None
    } else {
        let ties = tie_set(&norms);
        let mut d = vec![0.0; w.len()];
        let share = 1.0 / ties.len() as f64;
        for &i in &ties {
            let range = partition.blocks()[i].range();
            for j in range {
                d[j] = share * g.as_slice()[j];
            }
        }
        Some(w.with_data(d)?)
    };
    let p = pending(0, w, loss, max, direction, eta, thr, norm)?;
    let (next, rec, _) = complete(obj, w, &g, p)?;
    Ok((next, rec))
}

/// `W^ℓ ← W^ℓ − η γ polar(G^ℓ)` with `γ = Σ_ℓ ‖G^ℓ‖_nuc`; blocks with
/// `‖G^ℓ‖_F ≤ 1e-14` are left unchanged.
pub fn spectral_step(
    obj: &dyn Objective,
    w: &ParamVector,
    blocks: &[(usize, usize)],
    eta: f64,
    method: &PolarMethod,
) -> Result<(ParamVector, StepRecord)> {
    let norm = NormSpec::SpectralMax {
        blocks: Some(blocks.to_vec()),
        polar: method.clone(),
    };
    norm.check(w.layout())?;
    let thr = threshold(StepMode::Unnormalized, eta, 0.0);
    let Some((loss, g)) = checked_loss_grad(obj, w)? else {
        return Ok((w.clone(), diverged_record(0, f64::NAN, thr)));
    };
    let mut polar = vec![0.0; w.len()];
    let mut gamma = 0.0;
    let mut moved = false;
    for span in norm.matrix_blocks(w.layout())? {
        let m = span_matrix(g.as_slice(), span);
        if m.norm() <= STATIONARY_TOL {
            continue;
        }
        gamma += nuclear_norm(&m)?;
        write_span(&mut polar, span, &polar_factor(&m, method)?);
        moved = true;
    }
    let direction = if moved {
        Some(w.with_data(polar.into_iter().map(|x| gamma * x).collect())?)
    } else {
        None
    };
    let p = pending(0, w, loss, gamma, direction, eta, thr, norm)?;
    let (next, rec, _) = complete(obj, w, &g, p)?;
    Ok((next, rec))
}

/// Exponential moving average of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsState {
    pub nu: ParamVector,
}

impl RmsState {
    pub fn zeros(layout: &Arc<BlockLayout>) -> Self {
        RmsState {
            nu: ParamVector::zeros(layout),
        }
    }

    /// `ν ← β₂ν + (1−β₂)g²`.
    pub fn update(&self, g: &ParamVector, beta2: f64) -> Result<RmsState> {
        g.check_layout(&self.nu)?;
        let nu = self
            .nu
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(n, gi)| beta2 * n + (1.0 - beta2) * gi * gi)
            .collect();
        Ok(RmsState { nu: g.with_data(nu)? })
    }

    /// `diag(sqrt(ν) + ε)`.
    pub fn preconditioner(&self, epsilon: f64) -> Result<Preconditioner> {
        Preconditioner::diagonal(self.nu.as_slice().iter().map(|n| n.sqrt() + epsilon).collect())
    }
}

/// Updates the second-moment state with the current gradient, then takes the
/// generic step in the geometry `‖·‖_P` with `P = diag(sqrt(ν) + ε)`.
pub fn rmsprop_step(
    obj: &dyn Objective,
    w: &ParamVector,
    state: &RmsState,
    beta2: f64,
    epsilon: f64,
    eta: f64,
    mode: StepMode,
) -> Result<(ParamVector, RmsState, StepRecord)> {
    let spec = OptimizerSpec::new(
        mode,
        NormSpec::preconditioned(Preconditioner::diagonal(vec![1.0; w.len()])?),
        eta,
    )?
    .with_ema(beta2, epsilon)?;
    let Some((loss, g)) = checked_loss_grad(obj, w)? else {
        return Ok((w.clone(), state.clone(), diverged_record(0, f64::NAN, f64::NAN)));
    };
    let (p, next_state) = ema_pending(0, w, loss, &g, state, &spec)?;
    let (next, rec, _) = complete(obj, w, &g, p)?;
    Ok((next, next_state, rec))
}

fn ema_pending(
    step: usize,
    w: &ParamVector,
    loss: f64,
    g: &ParamVector,
    state: &RmsState,
    spec: &OptimizerSpec,
) -> Result<(Pending, RmsState)> {
    let ema = spec.ema.expect("EMA schedule present");
    let next_state = state.update(g, ema.beta2)?;
    let pre = Arc::new(next_state.preconditioner(ema.epsilon)?);
    let norm = NormSpec::Preconditioned(Arc::clone(&pre));
    let (dn, dir) = generic_direction(&norm, spec.mode, g)?;
    let mut p = pending(step, w, loss, dn, dir, spec.eta, spec.threshold(dn), norm)?;
    p.record.preconditioner = Some(pre);
    Ok((p, next_state))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub steps: usize,
    /// Measure generalized sharpness every `cadence` steps (0 disables).
    pub sharpness_cadence: usize,
    pub fw: FwConfig,
    pub keep_directions: bool,
    /// Record wall-clock time of sharpness estimates (makes logs nondeterministic).
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            steps: 100,
            sharpness_cadence: 20,
            fw: FwConfig::default(),
            keep_directions: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub final_w: ParamVector,
    /// Loss at `final_w` (NaN after divergence).
    pub final_loss: f64,
    pub diverged: bool,
}

/// Deterministic full-batch training loop. Directional smoothness is recorded
/// every step; generalized sharpness in the step's own geometry at the
/// pre-step iterate every `sharpness_cadence` steps. Stops early on divergence
/// and keeps the partial trace.
pub fn run(obj: &dyn Objective, w0: &ParamVector, spec: &OptimizerSpec, opts: &RunOptions) -> Result<RunResult> {
    spec.validate()?;
    if opts.steps == 0 {
        return Err(Error::invalid("a run needs at least one step"));
    }
    if opts.sharpness_cadence > 0 {
        opts.fw.validate()?;
    }
    spec.norm.check(w0.layout())?;
    let mut records = Vec::with_capacity(opts.steps);
    let Some((mut loss, mut g)) = checked_loss_grad(obj, w0)? else {
        return Ok(RunResult {
            records: vec![diverged_record(0, f64::NAN, spec.threshold(f64::NAN))],
            final_w: w0.clone(),
            final_loss: f64::NAN,
            diverged: true,
        });
    };
    let mut w = w0.clone();
    let mut rms = spec.ema.map(|_| RmsState::zeros(w0.layout()));
    for t in 0..opts.steps {
        let p = match &rms {
            Some(state) => {
                let (p, next_state) = ema_pending(t, &w, loss, &g, state, spec)?;
                rms = Some(next_state);
                p
            }
            None => {
                let (dn, dir) = generic_direction(&spec.norm, spec.mode, &g)?;
                pending(t, &w, loss, dn, dir, spec.eta, spec.threshold(dn), spec.norm.clone())?
            }
        };
        let sharpness = if opts.sharpness_cadence > 0 && t % opts.sharpness_cadence == 0 {
            let start = Instant::now();
            let h = obj.hessian_at(&w)?;
            let fw = FwConfig {
                seed: opts.fw.seed.wrapping_add(t as u64),
                ..opts.fw
            };
            let est = sharpness_fw(h.as_ref(), &p.norm, &fw)?;
            Some(SharpnessSample {
                value: est.value,
                fw_gap: est.fw_gap,
                restarts: est.restarts_used,
                wall_ms: if opts.timing {
                    start.elapsed().as_secs_f64() * 1e3
                } else {
                    f64::NAN
                },
            })
        } else {
            None
        };
        let (next, mut rec, g_next) = complete(obj, &w, &g, p)?;
        rec.sharpness = sharpness;
        if !opts.keep_directions {
            rec.direction = None;
        }
        let diverged = rec.diverged;
        let loss_after = rec.loss_after;
        records.push(rec);
        w = next;
        match g_next {
            Some(gn) if !diverged => {
                loss = loss_after;
                g = gn;
            }
            _ => {
                return Ok(RunResult {
                    records,
                    final_w: w,
                    final_loss: loss_after,
                    diverged: true,
                })
            }
        }
    }
    Ok(RunResult {
        records,
        final_w: w,
        final_loss: loss,
        diverged: false,
    })
}
