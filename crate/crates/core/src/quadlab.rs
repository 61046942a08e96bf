//! Exact experiments on quadratics `L(w) = ½ w^T H w`: oracle constants per
//! geometry, the invariant-direction check, a trajectory simulator with
//! convergence/divergence classification, stability diagrams, threshold
//! bisection and the Taylor-switch experiment.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::{tie_set, NormSpec};
use crate::objectives::{make_taylor, DenseHessian, HvpOracle, Objective};
use crate::optimizers::{generic_direction, run, OptimizerSpec, RunOptions, StepMode};
use crate::param::{dot, gaussian_like, inner, ParamVector};
use crate::rng::RngState;
use crate::spectra::{sharpness_bruteforce_linf, sharpness_fw, FwConfig};

/// Largest dimension for which `ℓ∞` sharpness is enumerated.
pub const MAX_ORACLE_ENUM_DIM: usize = 14;
/// Relative loss below which a simulation counts as converged.
pub const CONVERGED_RATIO: f64 = 1e-16;
/// Relative loss above which a simulation counts as diverged.
pub const DIVERGED_RATIO: f64 = 1e12;
/// Residual accepted by [`verify_invariant_direction`].
pub const INVARIANT_TOL: f64 = 1e-6;

const APPROX_FW: FwConfig = FwConfig {
    iters: 300,
    restarts: 200,
    seed: 0,
};
const MU_RANDOM_STARTS: usize = 64;
const MU_POLISHED: usize = 4;
const MU_MAX_EVALS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    Approximate,
}

/// A quadratic with its geometry-dependent constants.
#[derive(Debug, Clone)]
pub struct QuadCase {
    pub hessian: DenseHessian,
    pub spec: NormSpec,
    /// `max_{‖d‖=1} d^T H d`.
    pub s: f64,
    /// `min_{‖d‖=1} d^T H d`.
    pub mu: f64,
    /// A unit maximizer of the quadratic form.
    pub dhat: ParamVector,
    pub s_provenance: Provenance,
    pub mu_provenance: Provenance,
}

impl QuadCase {
    pub fn matrix(&self) -> &DMatrix<f64> {
        self.hessian.matrix()
    }
}

/// Smoothness and strong-convexity constants of `½ w^T H w` in `spec`, with a
/// maximizing direction.
///
/// Exact paths: eigendecomposition (Euclidean, preconditioned), enumeration
/// for `ℓ∞` up to [`MAX_ORACLE_ENUM_DIM`], per-block eigenvalues for block
/// `ℓ1,2`. `μ` for `ℓ∞` is `1 / max_i (H⁻¹)_ii`, the reciprocal of the
/// largest `y^T H⁻¹ y` over the dual (`ℓ1`) ball. Everything else is
/// estimated (Frank–Wolfe for `S`, multistart pattern search for `μ`) and
/// flagged approximate.
pub fn oracle_constants(h: &DenseHessian, spec: &NormSpec) -> Result<QuadCase> {
    let layout = h.layout();
    spec.check(layout)?;
    let m = h.matrix();
    let eig = SymmetricEigen::new(m.clone());
    let (lmin, _) = extreme(&eig, false);
    if lmin <= 0.0 {
        return Err(Error::invalid(format!("quadratic oracle needs a positive definite H (λmin = {lmin:e})")));
    }
    let d = m.nrows();
    let case = |s, mu, dhat: Vec<f64>, sp, mp| -> Result<QuadCase> {
        Ok(QuadCase {
            hessian: h.clone(),
            spec: spec.clone(),
            s,
            mu,
            dhat: ParamVector::from_vec(layout, dhat)?,
            s_provenance: sp,
            mu_provenance: mp,
        })
    };
    match spec {
        NormSpec::Euclidean => {
            let (s, i) = extreme(&eig, true);
            case(s, lmin, canonical_sign(eig.eigenvectors.column(i).iter().copied().collect()), Provenance::Exact, Provenance::Exact)
        }
        NormSpec::Preconditioned(p) => {
            // Similar matrix P^{-1/2} H P^{-1/2}; maximizers map back through P^{-1/2}.
            let mut sim = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                let col = p.inv_sqrt_apply(&e);
                let hcol = m * nalgebra::DVector::from_column_slice(&col);
                sim.set_column(j, &nalgebra::DVector::from_column_slice(&p.inv_sqrt_apply(hcol.as_slice())));
            }
            let sim = (&sim + sim.transpose()) * 0.5;
            let se = SymmetricEigen::new(sim);
            let (s, i) = extreme(&se, true);
            let (mu, _) = extreme(&se, false);
            let v: Vec<f64> = se.eigenvectors.column(i).iter().copied().collect();
            case(s, mu, canonical_sign(p.inv_sqrt_apply(&v)), Provenance::Exact, Provenance::Exact)
        }
        NormSpec::Linf => {
            let inv = m.clone().cholesky().expect("positive definite").inverse();
            let mu = 1.0 / (0..d).map(|i| inv[(i, i)]).fold(f64::MIN, f64::max);
            if d <= MAX_ORACLE_ENUM_DIM {
                let (s, signs) = sharpness_bruteforce_linf(m)?;
                case(s, mu, signs, Provenance::Exact, Provenance::Exact)
            } else {
                let est = sharpness_fw(h, spec, &APPROX_FW)?;
                case(est.value, mu, est.direction.into_vec(), Provenance::Approximate, Provenance::Exact)
            }
        }
        NormSpec::BlockL12 { .. } => {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for r in spec.block_ranges(layout)? {
                let sub = m.view((r.start, r.start), (r.len(), r.len())).into_owned();
                let se = SymmetricEigen::new(sub);
                let (val, i) = extreme(&se, true);
                if best.as_ref().is_none_or(|b| val > b.0) {
                    let mut full = vec![0.0; d];
                    for (k, x) in se.eigenvectors.column(i).iter().enumerate() {
                        full[r.start + k] = *x;
                    }
                    best = Some((val, canonical_sign(full)));
                }
            }
            let (s, dhat) = best.expect("at least one block");
            let mu = approx_mu(h, spec)?;
            case(s, mu, dhat, Provenance::Exact, Provenance::Approximate)
        }
        NormSpec::SpectralMax { .. } | NormSpec::SpectralSum { .. } => {
            let est = sharpness_fw(h, spec, &APPROX_FW)?;
            let mu = approx_mu(h, spec)?;
            case(est.value, mu, est.direction.into_vec(), Provenance::Approximate, Provenance::Approximate)
        }
    }
}

/// Largest (or smallest) eigenvalue and its column index.
fn extreme(eig: &SymmetricEigen<f64, nalgebra::Dyn>, largest: bool) -> (f64, usize) {
    let mut best = 0;
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        let b = eig.eigenvalues[best];
        if (largest && v > b) || (!largest && v < b) {
            best = i;
        }
    }
    (eig.eigenvalues[best], best)
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let mut k = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// `min v^T H v / ‖v‖²` by coordinate pattern search from eigenvectors,
/// coordinate axes and Gaussian draws; the best few starts are polished.
fn approx_mu(h: &DenseHessian, spec: &NormSpec) -> Result<f64> {
    let m = h.matrix();
    let d = m.nrows();
    let layout = h.layout();
    let ratio = |x: &[f64]| -> Result<f64> {
        let v = ParamVector::from_vec(layout, x.to_vec())?;
        let n = spec.norm_value(&v)?;
        if n == 0.0 {
            return Ok(f64::INFINITY);
        }
        let hv = m * nalgebra::DVector::from_column_slice(x);
        Ok(dot(x, hv.as_slice()) / (n * n))
    };
    let eig = SymmetricEigen::new(m.clone());
    let mut starts: Vec<Vec<f64>> = (0..d).map(|i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        starts.push(e);
    }
    let mut rng = RngState::new(0x6d75);
    for _ in 0..MU_RANDOM_STARTS {
        starts.push(rng.normal_vec(d));
    }
    let mut scored: Vec<(f64, Vec<f64>)> = starts
        .into_iter()
        .map(|x| Ok((ratio(&x)?, unit_max(x))))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    for (f0, x0) in scored.into_iter().take(MU_POLISHED) {
        best = best.min(pattern_search(&ratio, x0, f0)?);
    }
    Ok(best)
}

fn unit_max(x: Vec<f64>) -> Vec<f64> {
    let n = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if n == 0.0 {
        x
    } else {
        x.into_iter().map(|v| v / n).collect()
    }
}

fn pattern_search(f: &dyn Fn(&[f64]) -> Result<f64>, mut x: Vec<f64>, mut fx: f64) -> Result<f64> {
    let mut step = 0.25;
    let mut evals = 0;
    while step > 1e-10 && evals < MU_MAX_EVALS {
        let mut improved = false;
        for i in 0..x.len() {
            for delta in [step, -step] {
                x[i] += delta;
                let fy = f(&x)?;
                evals += 1;
                if fy < fx {
                    fx = fy;
                    improved = true;
                    break;
                }
                x[i] -= delta;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(fx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    /// `‖(H d̂)* − d̂‖∞`.
    pub residual: f64,
    /// The maximizer is not unique (repeated top eigenvalue, zero entries of
    /// `H d̂` under `ℓ∞`, tied blocks, or a different dual vector that attains `S`).
    pub tie: bool,
    /// `|⟨H d̂, d̂⟩ − S| / S`.
    pub attainment: f64,
    /// `|‖H d̂‖* − S| / S`, zero at a first-order stationary maximizer.
    pub dual_gap: f64,
    pub passed: bool,
}

/// Checks that `d̂` is a fixed point of `d ↦ (Hd)*`. Under a tie the dual map
/// may return another maximizer; the check then falls back to attainment of
/// `S` by both `d̂` and `(H d̂)*`.
pub fn verify_invariant_direction(case: &QuadCase) -> Result<InvariantReport> {
    let h = &case.hessian;
    let spec = &case.spec;
    let hd = h.apply(&case.dhat)?;
    let (dn, v) = spec.dual_pair(&hd)?;
    let residual = v
        .as_slice()
        .iter()
        .zip(case.dhat.as_slice())
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let scale = case.s.abs().max(f64::MIN_POSITIVE);
    let attainment = (inner(&hd, &case.dhat)? - case.s).abs() / scale;
    let dual_gap = (dn - case.s).abs() / scale;
    let mut tie = structural_tie(case, &hd)?;
    let mut passed = residual <= INVARIANT_TOL && attainment <= 1e-9;
    if residual > INVARIANT_TOL {
        let q = inner(&v, &h.apply(&v)?)?;
        let equivalent = (q - case.s).abs() / scale <= 1e-9;
        tie |= equivalent;
        passed = equivalent && attainment <= 1e-9 && dual_gap <= 1e-9;
    }
    Ok(InvariantReport {
        residual,
        tie,
        attainment,
        dual_gap,
        passed,
    })
}

fn structural_tie(case: &QuadCase, hd: &ParamVector) -> Result<bool> {
    let rel = 1e-9;
    Ok(match &case.spec {
        NormSpec::Euclidean => {
            let mut ev: Vec<f64> = SymmetricEigen::new(case.matrix().clone()).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            ev.len() > 1 && ev[0] - ev[1] <= rel * ev[0].abs()
        }
        NormSpec::Linf => {
            let top = hd.max_abs();
            hd.as_slice().iter().any(|x| x.abs() <= 1e-12 * top)
        }
        NormSpec::BlockL12 { .. } => {
            let norms: Vec<f64> = case
                .spec
                .block_ranges(hd.layout())?
                .into_iter()
                .map(|r| dot(&hd.as_slice()[r.clone()], &hd.as_slice()[r]).sqrt())
                .collect();
            tie_set(&norms).len() > 1
        }
        _ => false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Converged,
    Diverged,
    Oscillating,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Converged => "converged",
            Outcome::Diverged => "diverged",
            Outcome::Oscillating => "oscillating",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub steps: usize,
    pub keep_iterates: bool,
    /// Direction along which increments are tested for sign alternation; the
    /// full inner product of consecutive increments is used when absent.
    pub probe: Option<ParamVector>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    /// `w_0, …, w_T` (only when requested).
    pub iterates: Vec<ParamVector>,
    /// `L(w_0), …, L(w_T)`.
    pub losses: Vec<f64>,
    pub outcome: Outcome,
    /// Steps taken before stopping.
    pub steps: usize,
    /// Fraction of consecutive increments whose projections alternate in sign.
    pub oscillation: f64,
}

/// Runs `w ← w − η ‖Hw‖* (Hw)*` for up to `steps` steps, keeping iterates.
pub fn simulate(h: &DenseHessian, spec: &NormSpec, eta: f64, w0: &ParamVector, steps: usize) -> Result<Simulation> {
    simulate_with(
        h,
        spec,
        eta,
        w0,
        &SimOptions {
            steps,
            keep_iterates: true,
            probe: None,
        },
    )
}

/// Unnormalized steepest descent on `½ w^T H w`. Stops as converged once the
/// loss falls below [`CONVERGED_RATIO`]`·L₀` (or the gradient vanishes), as
/// diverged once it exceeds [`DIVERGED_RATIO`]`·L₀` or turns non-finite, and
/// reports oscillating otherwise.
pub fn simulate_with(h: &DenseHessian, spec: &NormSpec, eta: f64, w0: &ParamVector, opts: &SimOptions) -> Result<Simulation> {
    if opts.steps == 0 {
        return Err(Error::invalid("simulation needs at least one step"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive and finite, got {eta}")));
    }
    spec.check(h.layout())?;
    let mut w = ParamVector::from_vec(h.layout(), w0.as_slice().to_vec())?;
    let mut g = h.apply(&w)?;
    let l0 = 0.5 * inner(&w, &g)?;
    let mut losses = vec![l0];
    let mut iterates = if opts.keep_iterates { vec![w.clone()] } else { Vec::new() };
    let mut prev_inc: Option<ParamVector> = None;
    let (mut flips, mut pairs) = (0usize, 0usize);
    let mut outcome = if l0 <= 0.0 { Outcome::Converged } else { Outcome::Oscillating };
    let mut taken = 0;
    while outcome == Outcome::Oscillating && taken < opts.steps {
        let (_, dir) = generic_direction(spec, StepMode::Unnormalized, &g)?;
        let Some(dir) = dir else {
            outcome = Outcome::Converged;
            break;
        };
        let inc = dir.scale(-eta);
        if let Some(prev) = &prev_inc {
            let turn = match &opts.probe {
                Some(p) => inner(&inc, p)? * inner(prev, p)?,
                None => inner(&inc, prev)?,
            };
            pairs += 1;
            flips += (turn < 0.0) as usize;
        }
        w = w.add(&inc)?;
        prev_inc = Some(inc);
        g = h.apply(&w)?;
        let loss = 0.5 * inner(&w, &g)?;
        taken += 1;
        losses.push(loss);
        if opts.keep_iterates {
            iterates.push(w.clone());
        }
        if !loss.is_finite() || loss > DIVERGED_RATIO * l0 {
            outcome = Outcome::Diverged;
        } else if loss < CONVERGED_RATIO * l0 {
            outcome = Outcome::Converged;
        }
    }
    Ok(Simulation {
        iterates,
        losses,
        outcome,
        steps: taken,
        oscillation: if pairs == 0 { f64::NAN } else { flips as f64 / pairs as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// `w_0 = d̂`.
    Dhat,
    /// `w_0` standard Gaussian.
    Random,
}

impl InitPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitPolicy::Dhat => "dhat",
            InitPolicy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagramRow {
    pub eta: f64,
    /// `η S / 2`; the invariant direction is stable below 1.
    pub eta_ratio: f64,
    pub init: InitPolicy,
    pub outcome: Outcome,
    pub steps: usize,
    /// `L_T / L_0`.
    pub final_loss_ratio: f64,
    pub oscillation: f64,
}

/// Classifies every `η` under both initialization policies. Random starts use
/// stream `i` of `seed` for grid point `i`. Cells run in parallel; rows come
/// back in grid order with the `d̂` row first.
pub fn stability_diagram(case: &QuadCase, etas: &[f64], steps: usize, seed: u64) -> Result<Vec<DiagramRow>> {
    let cells: Vec<(usize, InitPolicy)> = (0..etas.len())
        .flat_map(|i| [(i, InitPolicy::Dhat), (i, InitPolicy::Random)])
        .collect();
    cells
        .into_par_iter()
        .map(|(i, init)| {
            let eta = etas[i];
            let w0 = match init {
                InitPolicy::Dhat => case.dhat.clone(),
                InitPolicy::Random => gaussian_like(case.hessian.layout(), &mut RngState::with_stream(seed, i as u64)),
            };
            let sim = simulate_with(
                &case.hessian,
                &case.spec,
                eta,
                &w0,
                &SimOptions {
                    steps,
                    keep_iterates: false,
                    probe: Some(case.dhat.clone()),
                },
            )?;
            Ok(DiagramRow {
                eta,
                eta_ratio: eta * case.s / 2.0,
                init,
                outcome: sim.outcome,
                steps: sim.steps,
                final_loss_ratio: sim.losses[sim.losses.len() - 1] / sim.losses[0],
                oscillation: sim.oscillation,
            })
        })
        .collect()
}

/// Locates the smallest `η` at which the run from `w_0 = d̂` diverges within
/// `steps`, by bisection on `[lo, hi]` until the bracket is narrower than
/// `rel_tol·hi`. Returns the bracket midpoint.
pub fn bisect_threshold(case: &QuadCase, lo: f64, hi: f64, steps: usize, rel_tol: f64) -> Result<f64> {
    let diverges = |eta: f64| -> Result<bool> {
        let opts = SimOptions {
            steps,
            keep_iterates: false,
            probe: None,
        };
        Ok(simulate_with(&case.hessian, &case.spec, eta, &case.dhat, &opts)?.outcome == Outcome::Diverged)
    };
    if !(0.0 < lo && lo < hi) {
        return Err(Error::invalid(format!("bisection bracket must satisfy 0 < lo < hi, got [{lo}, {hi}]")));
    }
    if diverges(lo)? || !diverges(hi)? {
        return Err(Error::invalid(format!("bracket [{lo}, {hi}] does not straddle the stability threshold")));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > rel_tol * b {
        let mid = 0.5 * (a + b);
        if diverges(mid)? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone)]
pub struct SwitchCurves {
    /// Loss of the true run, starting with the value at the switch point.
    pub true_loss: Vec<f64>,
    /// Loss of the run on the frozen quadratic model; may end early on divergence.
    pub taylor_loss: Vec<f64>,
}

/// Continues optimization from `anchor` on the objective and on its
/// second-order Taylor model at `anchor`, with identical settings. The Taylor
/// run starts at `anchor + perturbation` when a perturbation is given.
pub fn taylor_switch(
    obj: &dyn Objective,
    anchor: &ParamVector,
    spec: &OptimizerSpec,
    steps: usize,
    perturbation: Option<&ParamVector>,
) -> Result<SwitchCurves> {
    let opts = RunOptions {
        steps,
        sharpness_cadence: 0,
        ..RunOptions::default()
    };
    let curve = |r: crate::optimizers::RunResult| -> Vec<f64> {
        let mut c = vec![r.records[0].loss_before];
        c.extend(r.records.iter().map(|rec| rec.loss_after));
        c
    };
    let taylor = make_taylor(obj, anchor)?;
    let start = match perturbation {
        Some(p) => anchor.add(p)?,
        None => anchor.clone(),
    };
    Ok(SwitchCurves {
        true_loss: curve(run(obj, anchor, spec, &opts)?),
        taylor_loss: curve(run(&taylor, &start, spec, &opts)?),
    })
}
