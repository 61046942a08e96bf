use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::config::{ExperimentConfig, ObjectiveConfig, OracleConfig, OracleGeometry, OutputFormat, QuadConfig};
use super::plot::{ema_smooth, render, Panel, Series};
use super::runlog::{rows_from_run, to_csv, to_jsonl, validate, EosStats, RunHeader, RunLogRow};
use crate::error::{Error, Result};
use crate::norms::{NormSpec, Preconditioner};
use crate::objectives::{DenseHessian, Objective};
use crate::optimizers::{run, step, OptimizerSpec, RmsState, RunOptions, RunResult, StepMode};
use crate::param::{BlockLayout, ParamVector};
use crate::quadlab::{bisect_threshold, oracle_constants, stability_diagram, taylor_switch, verify_invariant_direction, Provenance};
use crate::rng::RngState;
use crate::spectra::{directional_curvature, sharpness_bruteforce_linf, sharpness_fw, FwConfig, MAX_ENUM_DIM};

use super::config::BuiltObjective;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandStatus {
    Ok,
    /// A run hit the divergence guard.
    Diverged,
    /// Frank–Wolfe missed the oracle acceptance band.
    OracleFailed,
}

impl CommandStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            CommandStatus::Ok => 0,
            CommandStatus::Diverged => 3,
            CommandStatus::OracleFailed => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommandReport {
    pub status: CommandStatus,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable result lines.
    pub summary: Vec<String>,
}

impl CommandReport {
    fn new() -> Self {
        CommandReport {
            status: CommandStatus::Ok,
            artifacts: Vec::new(),
            summary: Vec::new(),
        }
    }

    fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }
}

/// A config with the directory its relative paths resolve against and the
/// directory artifacts go to.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub base: PathBuf,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: ExperimentConfig, base: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Context {
            config,
            base: base.into(),
            out: out.into(),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }
}

/// An objective, its starting point and a fully resolved optimizer.
pub struct Prepared {
    pub objective: BuiltObjective,
    pub w0: ParamVector,
    pub spec: OptimizerSpec,
    /// Generalized sharpness at `w0`, when it was needed to resolve `η`.
    pub s0: Option<f64>,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

/// Builds the objective and resolves `eta_scale` against the initial
/// sharpness in the first step's geometry.
pub fn prepare(cfg: &ExperimentConfig, base: &Path) -> Result<Prepared> {
    let (objective, w0) = cfg.objective.build(base)?;
    let o = &cfg.optimizer;
    let norm = o.norm.build(w0.len()).map_err(config_err)?;
    let mut spec = OptimizerSpec::new(o.mode, norm, o.eta.unwrap_or(1.0)).map_err(config_err)?;
    if let Some(ema) = o.ema {
        spec = spec.with_ema(ema.beta2, ema.epsilon).map_err(config_err)?;
    }
    spec.norm.check(w0.layout()).map_err(config_err)?;
    let mut s0 = None;
    if let Some(scale) = o.eta_scale {
        let obj = objective.as_objective();
        let g0 = obj.grad(&w0)?;
        let norm0 = match spec.ema {
            Some(ema) => NormSpec::preconditioned(
                RmsState::zeros(w0.layout())
                    .update(&g0, ema.beta2)?
                    .preconditioner(ema.epsilon)?,
            ),
            None => spec.norm.clone(),
        };
        let s = sharpness_fw(obj.hessian_at(&w0)?.as_ref(), &norm0, &cfg.measurement.fw())?.value;
        if !(s > 0.0) {
            return Err(Error::Config(format!("eta_scale needs positive initial sharpness, got {s}")));
        }
        spec.eta = match o.mode {
            StepMode::Unnormalized => scale / s,
            StepMode::Normalized => scale * norm0.dual_norm(&g0)? / s,
        };
        s0 = Some(s);
    }
    Ok(Prepared {
        objective,
        w0,
        spec,
        s0,
    })
}

pub fn run_options(cfg: &ExperimentConfig, steps: usize) -> RunOptions {
    RunOptions {
        steps,
        sharpness_cadence: cfg.measurement.cadence,
        fw: cfg.measurement.fw(),
        keep_directions: false,
        timing: false,
    }
}

fn header(spec: &OptimizerSpec) -> RunHeader {
    RunHeader {
        mode: spec.mode,
        eta: spec.eta,
        norm: spec.norm.name().to_string(),
    }
}

fn run_panels(rows: &[RunLogRow], spec: &OptimizerSpec, smoothing: f64) -> Vec<Panel> {
    let steps: Vec<&RunLogRow> = rows.iter().filter(|r| r.dual_grad_norm.is_some()).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let loss = ema_smooth(&rows.iter().map(|r| r.loss).collect::<Vec<_>>(), smoothing);
    let gn = ema_smooth(&steps.iter().map(|r| r.dual_grad_norm.unwrap_or(f64::NAN)).collect::<Vec<_>>(), smoothing);
    let unit = 2.0 / spec.eta;
    let end = xs.last().copied().unwrap_or(1.0);
    let thr = || Series::line("2/η", vec![(0.0, unit), (end, unit)]).dashed();
    let (dl, sl) = match spec.mode {
        StepMode::Unnormalized => ("D", "S"),
        StepMode::Normalized => ("D/‖g‖*", "S/‖g‖*"),
    };
    vec![
        Panel::new("loss", "step").log_y().with(Series::line("loss", xs.iter().copied().zip(loss).collect())),
        Panel::new("dual gradient norm", "step")
            .log_y()
            .with(Series::line("‖g‖*", steps.iter().map(|r| r.step as f64).zip(gn).collect())),
        Panel::new("directional smoothness", "step")
            .y_range(0.0, 3.0 * unit)
            .with(Series::line(
                dl,
                steps
                    .iter()
                    .filter_map(|r| r.normalized_dir_smoothness.map(|d| (r.step as f64, d)))
                    .collect(),
            ))
            .with(thr()),
        Panel::new("generalized sharpness", "step")
            .y_range(0.0, 3.0 * unit)
            .with(
                Series::line(
                    sl,
                    steps
                        .iter()
                        .filter_map(|r| r.normalized_sharpness.map(|s| (r.step as f64, s)))
                        .collect(),
                )
                .markers(),
            )
            .with(thr()),
    ]
}

/// Writes `run.csv`, `run.jsonl`, `run.svg` (as configured), the preconditioner
/// log of EMA runs and the config echo into `dir`.
fn write_run(report: &mut CommandReport, dir: &Path, cfg: &ExperimentConfig, spec: &OptimizerSpec, res: &RunResult) -> Result<Vec<RunLogRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = rows_from_run(res, spec.mode);
    let h = header(spec);
    let out = &cfg.output;
    if out.wants(OutputFormat::Csv) {
        report.write(dir.join("run.csv"), to_csv(&h, &rows))?;
    }
    if out.wants(OutputFormat::Jsonl) {
        report.write(dir.join("run.jsonl"), to_jsonl(&rows)?)?;
    }
    if out.wants(OutputFormat::Svg) {
        report.write(dir.join("run.svg"), render(&run_panels(&rows, spec, out.smoothing), 2))?;
    }
    if spec.ema.is_some() {
        let mut text = String::from("step,index,p\n");
        for rec in res.records.iter().filter(|r| r.sharpness.is_some()) {
            if let Some(p) = &rec.preconditioner {
                for (i, v) in p.to_dense().diagonal().iter().enumerate() {
                    let _ = writeln!(text, "{},{i},{v}", rec.step);
                }
            }
        }
        report.write(dir.join("preconditioner.csv"), text)?;
    }
    let echo = format!("# resolved eta = {}\n{}", spec.eta, cfg.to_toml()?);
    report.write(dir.join("config.toml"), echo)?;
    Ok(rows)
}

fn describe_stats(s: &EosStats) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    format!(
        "S/(2/η): initial {}, first ≥0.9 at step {}, final-quarter median {}; D in [0.8,1.2]·2/η for {:.1}% of final-quarter steps",
        f(s.initial_ratio),
        s.first_cross.map_or("-".to_string(), |t| t.to_string()),
        f(s.median_ratio),
        100.0 * s.occupancy
    )
}

/// Trains once and logs every step.
pub fn cmd_train(ctx: &Context) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let p = prepare(cfg, &ctx.base)?;
    let res = run(p.objective.as_objective(), &p.w0, &p.spec, &run_options(cfg, cfg.optimizer.steps))?;
    let mut report = CommandReport::new();
    let rows = write_run(&mut report, out, cfg, &p.spec, &res)?;
    let v = validate(&header(&p.spec), &rows);
    if !v.ok() {
        return Err(Error::Format(format!("run log failed validation: {}", v.mismatches.join("; "))));
    }
    report.line(format!(
        "{} steps, {} mode, norm {}, eta {}{}",
        res.records.len(),
        if p.spec.mode == StepMode::Normalized { "normalized" } else { "unnormalized" },
        p.spec.norm.name(),
        p.spec.eta,
        p.s0.map_or(String::new(), |s| format!(" (initial sharpness {s})"))
    ));
    report.line(format!("final loss {:e}", res.final_loss));
    if cfg.measurement.cadence > 0 {
        report.line(describe_stats(&EosStats::from_rows(&rows, p.spec.eta)));
    }
    if res.diverged {
        report.status = CommandStatus::Diverged;
        report.line(format!("diverged at step {}", res.records.len()));
    }
    Ok(report)
}

/// Stability diagram of a quadratic around `2/S`.
pub fn cmd_quad(ctx: &Context) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    if !matches!(cfg.objective, ObjectiveConfig::Quadratic { .. }) {
        return Err(Error::Config("quad needs a quadratic objective".into()));
    }
    let (obj, _) = cfg.objective.build(&ctx.base)?;
    let q = obj.quadratic().expect("checked above");
    let qc = cfg.quad.clone().unwrap_or_default();
    let norm = cfg.optimizer.norm.build(q.layout().total_dim()).map_err(config_err)?;
    let case = oracle_constants(&q.dense_hessian(), &norm)?;
    let etas: Vec<f64> = qc.eta_ratios.iter().map(|r| r * 2.0 / case.s).collect();
    let rows = stability_diagram(&case, &etas, qc.steps, qc.seed)?;
    let inv = verify_invariant_direction(&case)?;

    let mut report = CommandReport::new();
    let mut csv = format!(
        "# norm={} s={} mu={} s_provenance={:?} mu_provenance={:?}\neta,eta_ratio,init,outcome,steps,final_loss_ratio,oscillation\n",
        case.spec.name(),
        case.s,
        case.mu,
        case.s_provenance,
        case.mu_provenance
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.eta,
            r.eta_ratio,
            r.init.as_str(),
            r.outcome.as_str(),
            r.steps,
            r.final_loss_ratio,
            r.oscillation
        );
    }
    report.write(out.join("quad.csv"), csv)?;
    report.line(format!(
        "S = {} ({:?}), mu = {} ({:?}), 2/S = {}",
        case.s,
        case.s_provenance,
        case.mu,
        case.mu_provenance,
        2.0 / case.s
    ));
    report.line(format!(
        "invariant direction: residual {:.3e}, tie {}, attainment {:.3e}, passed {}",
        inv.residual, inv.tie, inv.attainment, inv.passed
    ));
    if qc.bisect && case.s_provenance == Provenance::Exact {
        let t = bisect_threshold(&case, 1.0 / case.s, 4.0 / case.s, qc.steps, 1e-6)?;
        report.line(format!(
            "bisected threshold {t} = (2/S)·{:.6}",
            t * case.s / 2.0
        ));
    }
    if cfg.output.wants(OutputFormat::Svg) {
        report.write(out.join("quad.svg"), render(&[quad_panel(&rows, &case.s, &case.mu, &qc)], 1))?;
    }
    Ok(report)
}

fn quad_panel(rows: &[crate::quadlab::DiagramRow], s: &f64, mu: &f64, _qc: &QuadConfig) -> Panel {
    let mut panel = Panel::new("L_T/L_0 against ηS/2", "ηS/2").log_y().vline(1.0).vline(s / mu);
    for init in [crate::quadlab::InitPolicy::Dhat, crate::quadlab::InitPolicy::Random] {
        let pts = rows
            .iter()
            .filter(|r| r.init == init)
            .map(|r| (r.eta_ratio, r.final_loss_ratio.max(1e-300)))
            .collect();
        panel = panel.with(Series::line(format!("w0 = {}", init.as_str()), pts).markers());
    }
    panel
}

/// One training run per step size and seed, each logged into its own
/// directory, plus a summary table.
pub fn cmd_sweep(ctx: &Context) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] table".into()))?;
    let seeds = if sweep.seeds.is_empty() {
        vec![match cfg.objective {
            ObjectiveConfig::Quadratic { init_seed, .. } | ObjectiveConfig::Mlp { init_seed, .. } => init_seed,
        }]
    } else {
        sweep.seeds.clone()
    };
    let mut cells = Vec::new();
    for &seed in &seeds {
        for &eta in &sweep.etas {
            cells.push((Some(eta), None, seed));
        }
        for &scale in &sweep.eta_scales {
            cells.push((None, Some(scale), seed));
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("sweep needs at least one of `etas`, `eta_scales`".into()));
    }
    let results: Vec<Result<(CommandReport, String)>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(eta, scale, seed))| {
            let mut c = cfg.clone();
            c.optimizer.eta = eta;
            c.optimizer.eta_scale = scale;
            match &mut c.objective {
                ObjectiveConfig::Quadratic { init_seed, .. } | ObjectiveConfig::Mlp { init_seed, .. } => *init_seed = seed,
            }
            let p = prepare(&c, &ctx.base)?;
            let res = run(p.objective.as_objective(), &p.w0, &p.spec, &run_options(&c, c.optimizer.steps))?;
            let mut rep = CommandReport::new();
            let rows = write_run(&mut rep, &out.join(format!("cell_{i:03}")), &c, &p.spec, &res)?;
            let s = EosStats::from_rows(&rows, p.spec.eta);
            let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            let line = format!(
                "{i},{},{},{seed},{},{},{},{},{},{}",
                f(scale),
                p.spec.eta,
                res.final_loss,
                res.diverged as u8,
                f(s.initial_ratio),
                s.first_cross.map_or(String::new(), |t| t.to_string()),
                f(s.median_ratio),
                s.occupancy
            );
            Ok((rep, line))
        })
        .collect();
    let mut report = CommandReport::new();
    let mut csv = String::from("cell,eta_scale,eta,seed,final_loss,diverged,initial_ratio,first_cross,median_ratio,occupancy\n");
    let mut diverged = 0;
    for r in results {
        let (rep, line) = r?;
        report.artifacts.extend(rep.artifacts);
        diverged += (line.split(',').nth(5) == Some("1")) as usize;
        csv.push_str(&line);
        csv.push('\n');
    }
    report.write(out.join("sweep.csv"), csv)?;
    report.line(format!("{} cells, {diverged} diverged", cells.len()));
    Ok(report)
}

fn reject_ema(spec: &OptimizerSpec, what: &str) -> Result<()> {
    if spec.ema.is_some() {
        return Err(Error::Config(format!("{what} does not support EMA preconditioning")));
    }
    Ok(())
}

/// Runs from `w` for `steps` steps without measurements.
fn advance(obj: &dyn Objective, w: &ParamVector, spec: &OptimizerSpec, steps: usize) -> Result<Option<ParamVector>> {
    if steps == 0 {
        return Ok(Some(w.clone()));
    }
    let opts = RunOptions {
        steps,
        sharpness_cadence: 0,
        ..RunOptions::default()
    };
    let res = run(obj, w, spec, &opts)?;
    Ok((!res.diverged).then_some(res.final_w))
}

/// Sharpness, threshold and maximizer at `w`, with the FW seed offset by `t`.
fn measure(obj: &dyn Objective, w: &ParamVector, spec: &OptimizerSpec, fw: &FwConfig, t: usize) -> Result<(f64, f64, ParamVector)> {
    let est = sharpness_fw(
        obj.hessian_at(w)?.as_ref(),
        &spec.norm,
        &FwConfig {
            seed: fw.seed.wrapping_add(t as u64),
            ..*fw
        },
    )?;
    let dn = spec.norm.dual_norm(&obj.grad(w)?)?;
    Ok((est.value, spec.threshold(dn), est.direction))
}

/// Continues training and its frozen quadratic model from each switch step.
pub fn cmd_taylor_switch(ctx: &Context) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let tc = cfg
        .taylor
        .clone()
        .ok_or_else(|| Error::Config("taylor-switch needs a [taylor] table".into()))?;
    let p = prepare(cfg, &ctx.base)?;
    reject_ema(&p.spec, "taylor-switch")?;
    let obj = p.objective.as_objective();
    let mut switches = tc.switch_steps.clone();
    switches.sort_unstable();
    switches.dedup();
    if switches.last().is_some_and(|&t| t > cfg.optimizer.steps) {
        return Err(Error::Config(format!(
            "switch step {} lies beyond the {}-step trajectory",
            switches[switches.len() - 1],
            cfg.optimizer.steps
        )));
    }
    let mut report = CommandReport::new();
    let mut summary = String::from("switch_step,sharpness_ratio,taylor_max_ratio,true_max_ratio,taylor_steps\n");
    let mut panels = Vec::new();
    let mut w = p.w0.clone();
    let mut at = 0;
    for &t0 in &switches {
        match advance(obj, &w, &p.spec, t0 - at)? {
            Some(next) => w = next,
            None => {
                report.status = CommandStatus::Diverged;
                report.line(format!("training diverged before step {t0}"));
                break;
            }
        }
        at = t0;
        let (s, thr, dhat) = measure(obj, &w, &p.spec, &cfg.measurement.fw(), t0)?;
        let pert = (tc.perturb > 0.0).then(|| dhat.scale(tc.perturb));
        let curves = taylor_switch(obj, &w, &p.spec, tc.horizon, pert.as_ref())?;
        let mut csv = String::from("j,step,true_loss,taylor_loss\n");
        for j in 0..curves.true_loss.len().max(curves.taylor_loss.len()) {
            let f = |c: &[f64]| c.get(j).map_or(String::new(), |v| v.to_string());
            let _ = writeln!(csv, "{j},{},{},{}", t0 + j, f(&curves.true_loss), f(&curves.taylor_loss));
        }
        report.write(out.join(format!("taylor_{t0}.csv")), csv)?;
        let growth = |c: &[f64]| c.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / c[0];
        let (tg, rg) = (growth(&curves.taylor_loss), growth(&curves.true_loss));
        let _ = writeln!(summary, "{t0},{},{tg},{rg},{}", s / thr, curves.taylor_loss.len() - 1);
        report.line(format!(
            "switch at {t0}: S/threshold {:.3}, Taylor loss peaks at {tg:.3e}× its start, true loss at {rg:.3e}×",
            s / thr
        ));
        let xs = |c: &[f64]| c.iter().enumerate().map(|(j, &v)| ((t0 + j) as f64, v)).collect::<Vec<_>>();
        panels.push(
            Panel::new(format!("switch at step {t0}"), "step")
                .log_y()
                .vline(t0 as f64)
                .with(Series::line("true loss", xs(&curves.true_loss)))
                .with(Series::line("Taylor model", xs(&curves.taylor_loss)).dashed()),
        );
    }
    report.write(out.join("taylor_summary.csv"), summary)?;
    if cfg.output.wants(OutputFormat::Svg) && !panels.is_empty() {
        report.write(out.join("taylor.svg"), render(&panels, 2))?;
    }
    Ok(report)
}

/// Freezes a sharpness maximizer at `t0` and follows its curvature for the
/// next `horizon` steps next to the per-step generalized sharpness.
pub fn cmd_track_direction(ctx: &Context) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let track = cfg
        .measurement
        .track
        .clone()
        .ok_or_else(|| Error::Config("track-direction needs measurement.track".into()))?;
    let p = prepare(cfg, &ctx.base)?;
    reject_ema(&p.spec, "track-direction")?;
    let obj = p.objective.as_objective();
    let fw = cfg.measurement.fw();
    let mut report = CommandReport::new();
    let Some(mut w) = advance(obj, &p.w0, &p.spec, track.t0)? else {
        report.status = CommandStatus::Diverged;
        report.line(format!("training diverged before step {}", track.t0));
        return Ok(report);
    };
    let (s0, thr0, dhat) = measure(obj, &w, &p.spec, &fw, track.t0)?;
    let dir_path = out.join("direction.bin");
    dhat.save(&dir_path)?;
    report.artifacts.push(dir_path.clone());
    report.artifacts.push(dir_path.with_extension("bin.layout"));
    let mut csv = format!("# t0={} sharpness={s0} threshold={thr0}\nj,step,curvature,running_mean,sharpness,threshold\n", track.t0);
    let (mut sum, mut curv, mut mean, mut sharp, mut thr) = (0.0, Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for j in 1..=track.horizon {
        let (next, rec) = step(obj, &w, &p.spec)?;
        if rec.diverged {
            report.status = CommandStatus::Diverged;
            report.line(format!("diverged at step {}", track.t0 + j));
            break;
        }
        w = next;
        let c = directional_curvature(obj, &w, &dhat)?;
        let (s, th, _) = measure(obj, &w, &p.spec, &fw, track.t0 + j)?;
        sum += c;
        let m = sum / j as f64;
        let _ = writeln!(csv, "{j},{},{c},{m},{s},{th}", track.t0 + j);
        let x = (track.t0 + j) as f64;
        curv.push((x, c));
        mean.push((x, m));
        sharp.push((x, s));
        thr.push((x, th));
    }
    report.write(out.join("track.csv"), csv)?;
    if let (Some(&(_, m)), Some(&(_, th))) = (mean.last(), thr.last()) {
        let (lo, hi) = sharp
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, s)| (a.min(s), b.max(s)));
        report.line(format!(
            "running mean of the frozen-direction curvature {m:.4} vs threshold {th:.4}; sharpness range [{lo:.4}, {hi:.4}]"
        ));
    }
    if cfg.output.wants(OutputFormat::Svg) {
        let panel = Panel::new(format!("curvature along the step-{} maximizer", track.t0), "step")
            .with(Series::line("d̂ᵀ∇²L d̂", curv))
            .with(Series::line("running mean", mean))
            .with(Series::line("sharpness", sharp).markers())
            .with(Series::line("threshold", thr).dashed());
        report.write(out.join("track.svg"), render(&[panel], 1))?;
    }
    Ok(report)
}

/// A random test matrix and its exact sharpness.
fn oracle_case(oc: &OracleConfig, seed: u64, index: u64) -> Result<(DenseHessian, NormSpec, f64)> {
    let d = oc.dim;
    let mut rng = RngState::with_stream(seed, index);
    match oc.geometry {
        OracleGeometry::Linf => {
            let mut h = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in i..d {
                    let v = rng.standard_normal();
                    h[(i, j)] = v;
                    h[(j, i)] = v;
                }
            }
            let (s, _) = sharpness_bruteforce_linf(&h)?;
            Ok((DenseHessian::flat(h)?, NormSpec::Linf, s))
        }
        OracleGeometry::BlockL12 => {
            let b = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
            let h = &b * b.transpose() / d as f64;
            let size = d / oc.blocks;
            let layout = BlockLayout::partition(&vec![size; oc.blocks])?;
            let s = (0..oc.blocks)
                .map(|l| {
                    let blk = h.view((l * size, l * size), (size, size)).into_owned();
                    SymmetricEigen::new(blk).eigenvalues.max()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((DenseHessian::flat(h)?, NormSpec::block_l12_with(layout), s))
        }
        OracleGeometry::Euclidean => {
            let b = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
            let h = &b * b.transpose() / d as f64;
            let s = SymmetricEigen::new(h.clone()).eigenvalues.max();
            Ok((DenseHessian::flat(h)?, NormSpec::Euclidean, s))
        }
    }
}

/// Acceptance band of the `(max M, max K)` cell: (relative tolerance,
/// required fraction of seeds within it).
fn oracle_band(g: OracleGeometry) -> (f64, f64) {
    match g {
        OracleGeometry::Linf => (0.02, 0.95),
        OracleGeometry::BlockL12 => (0.01, 1.0),
        OracleGeometry::Euclidean => (1e-6, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCell {
    pub restarts: usize,
    pub iters: usize,
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub within_band: usize,
    /// Seeds where the estimate exceeds the oracle by more than `1e-8` relative.
    pub above_oracle: usize,
}

/// `(seed, restarts, iters, estimate, oracle)` for one oracle-check run.
pub type OracleRow = (u64, usize, usize, f64, f64);

/// Frank–Wolfe against an exact oracle over a grid of restart counts and
/// iteration budgets. Restart sets are nested, so each `(seed, K)` pair runs
/// once with the largest `M`.
pub fn oracle_table(oc: &OracleConfig, seed: u64) -> Result<(Vec<OracleCell>, Vec<OracleRow>)> {
    if oc.dim == 0 || oc.seeds == 0 || oc.restarts.is_empty() || oc.iters.is_empty() {
        return Err(Error::Config("oracle needs dim, seeds, restarts and iters".into()));
    }
    if oc.geometry == OracleGeometry::Linf && oc.dim > MAX_ENUM_DIM {
        return Err(Error::Config(format!("no exact ℓ∞ oracle above dimension {MAX_ENUM_DIM}")));
    }
    if oc.geometry == OracleGeometry::BlockL12 && (oc.blocks == 0 || !oc.dim.is_multiple_of(oc.blocks)) {
        return Err(Error::Config("oracle.blocks must divide oracle.dim".into()));
    }
    let max_m = *oc.restarts.iter().max().expect("non-empty");
    let (tol, _) = oracle_band(oc.geometry);
    let per_seed: Vec<Vec<OracleRow>> = (0..oc.seeds)
        .into_par_iter()
        .map(|s| {
            let (h, norm, exact) = oracle_case(oc, seed, s)?;
            let mut rows = Vec::new();
            for &k in &oc.iters {
                let est = sharpness_fw(&h, &norm, &FwConfig::new(k, max_m, seed.wrapping_add(s)))?;
                for &m in &oc.restarts {
                    let v = est.per_restart[..m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    rows.push((s, m, k, v, exact));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<_> = per_seed.into_iter().flatten().collect();
    let mut cells = Vec::new();
    for &k in &oc.iters {
        for &m in &oc.restarts {
            let errs: Vec<(f64, bool)> = rows
                .iter()
                .filter(|r| r.1 == m && r.2 == k)
                .map(|&(_, _, _, v, exact)| {
                    let scale = exact.abs().max(f64::MIN_POSITIVE);
                    ((exact - v) / scale, v - exact > 1e-8 * scale)
                })
                .collect();
            let n = errs.len() as f64;
            cells.push(OracleCell {
                restarts: m,
                iters: k,
                mean_rel_err: errs.iter().map(|e| e.0.abs()).sum::<f64>() / n,
                max_rel_err: errs.iter().map(|e| e.0.abs()).fold(0.0, f64::max),
                within_band: errs.iter().filter(|e| e.0.abs() <= tol).count(),
                above_oracle: errs.iter().filter(|e| e.1).count(),
            });
        }
    }
    Ok((cells, rows))
}

/// Whether the largest-budget cell meets the band and one restart is worse on
/// average than the most restarts.
pub fn oracle_verdict(oc: &OracleConfig, cells: &[OracleCell]) -> (bool, String) {
    let (tol, frac) = oracle_band(oc.geometry);
    let max_m = oc.restarts.iter().copied().max().unwrap_or(0);
    let min_m = oc.restarts.iter().copied().min().unwrap_or(0);
    let max_k = oc.iters.iter().copied().max().unwrap_or(0);
    let cell = |m: usize| cells.iter().find(|c| c.restarts == m && c.iters == max_k);
    let (Some(best), Some(worst)) = (cell(max_m), cell(min_m)) else {
        return (false, "missing cells".into());
    };
    let need = (frac * oc.seeds as f64).ceil() as usize;
    let band = best.within_band >= need && best.above_oracle == 0;
    let sensitive = min_m == max_m || worst.mean_rel_err > best.mean_rel_err;
    (
        band && sensitive,
        format!(
            "M={max_m},K={max_k}: {}/{} within {tol}, {} above oracle; mean error M={min_m} {:.3e} vs M={max_m} {:.3e}",
            best.within_band, oc.seeds, best.above_oracle, worst.mean_rel_err, best.mean_rel_err
        ),
    )
}

/// Frank–Wolfe sensitivity table against an exact oracle.
pub fn cmd_oracle_check(ctx: &Context) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let oc = cfg.oracle.clone().unwrap_or_default();
    let (cells, rows) = oracle_table(&oc, cfg.measurement.fw_seed)?;
    let mut report = CommandReport::new();
    let mut table = String::from("restarts,iters,mean_rel_err,max_rel_err,within_band,above_oracle,seeds\n");
    for c in &cells {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            c.restarts, c.iters, c.mean_rel_err, c.max_rel_err, c.within_band, c.above_oracle, oc.seeds
        );
    }
    report.write(out.join("oracle.csv"), table)?;
    let mut detail = String::from("seed,restarts,iters,estimate,oracle\n");
    for (s, m, k, v, e) in &rows {
        let _ = writeln!(detail, "{s},{m},{k},{v},{e}");
    }
    report.write(out.join("oracle_seeds.csv"), detail)?;
    if cfg.output.wants(OutputFormat::Svg) {
        let mut panel = Panel::new("mean relative error against restarts", "restarts M").log_y();
        for &k in &oc.iters {
            let pts = cells
                .iter()
                .filter(|c| c.iters == k)
                .map(|c| (c.restarts as f64, c.mean_rel_err))
                .collect();
            panel = panel.with(Series::line(format!("K = {k}"), pts));
        }
        report.write(out.join("oracle.svg"), render(&[panel], 1))?;
    }
    let (pass, msg) = oracle_verdict(&oc, &cells);
    report.line(format!("{:?}: {msg}", oc.geometry));
    if !pass {
        report.status = CommandStatus::OracleFailed;
    }
    Ok(report)
}

pub fn preconditioner_from_log(text: &str, step: usize) -> Result<Option<Preconditioner>> {
    let mut diag = Vec::new();
    for line in text.lines().skip(1) {
        let mut f = line.split(',');
        let (Some(t), Some(_), Some(v)) = (f.next(), f.next(), f.next()) else {
            return Err(Error::Format(format!("bad preconditioner row `{line}`")));
        };
        if t.parse::<usize>().ok() == Some(step) {
            diag.push(v.parse().map_err(|_| Error::Format(format!("bad value `{v}`")))?);
        }
    }
    if diag.is_empty() {
        return Ok(None);
    }
    Preconditioner::diagonal(diag).map(Some)
}
