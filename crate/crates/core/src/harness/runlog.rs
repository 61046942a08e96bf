use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::{threshold, RunResult, StepMode};

pub const SCHEMA: &str = "eos-runlog/1";

pub const COLUMNS: [&str; 10] = [
    "step",
    "loss",
    "dual_grad_norm",
    "dir_smoothness",
    "sharpness",
    "fw_gap",
    "threshold",
    "normalized_dir_smoothness",
    "normalized_sharpness",
    "diverged",
];

/// Run-level constants written on the first line of a log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHeader {
    pub mode: StepMode,
    pub eta: f64,
    pub norm: String,
}

impl RunHeader {
    fn line(&self) -> String {
        format!("#schema={SCHEMA} mode={} eta={} norm={}", mode_str(self.mode), self.eta, self.norm)
    }

    fn parse(line: &str) -> Result<Self> {
        let mut schema = None;
        let mut mode = None;
        let mut eta = None;
        let mut norm = None;
        for kv in line.trim_start_matches('#').split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field `{kv}`")))?;
            match k {
                "schema" => schema = Some(v.to_string()),
                "mode" => {
                    mode = Some(match v {
                        "unnormalized" => StepMode::Unnormalized,
                        "normalized" => StepMode::Normalized,
                        _ => return Err(Error::Format(format!("unknown mode `{v}`"))),
                    })
                }
                "eta" => eta = Some(parse_f64(v)?),
                "norm" => norm = Some(v.to_string()),
                _ => return Err(Error::Format(format!("unknown header key `{k}`"))),
            }
        }
        if schema.as_deref() != Some(SCHEMA) {
            return Err(Error::Format(format!("expected schema {SCHEMA}, got {schema:?}")));
        }
        match (mode, eta, norm) {
            (Some(mode), Some(eta), Some(norm)) => Ok(RunHeader { mode, eta, norm }),
            _ => Err(Error::Format("header needs mode, eta and norm".into())),
        }
    }
}

fn mode_str(mode: StepMode) -> &'static str {
    match mode {
        StepMode::Unnormalized => "unnormalized",
        StepMode::Normalized => "normalized",
    }
}

/// One line of a run log: the state before step `step` and the step taken
/// from it. The last row carries only the final loss.
///
/// Normalized columns divide by `‖g‖*` in normalized mode and repeat the raw
/// value otherwise, so both compare against `2/η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub step: usize,
    pub loss: f64,
    pub dual_grad_norm: Option<f64>,
    pub dir_smoothness: Option<f64>,
    pub sharpness: Option<f64>,
    pub fw_gap: Option<f64>,
    pub threshold: Option<f64>,
    pub normalized_dir_smoothness: Option<f64>,
    pub normalized_sharpness: Option<f64>,
    pub diverged: bool,
}

fn normalize(mode: StepMode, value: Option<f64>, dual_grad_norm: f64) -> Option<f64> {
    value.map(|v| match mode {
        StepMode::Unnormalized => v,
        StepMode::Normalized => v / dual_grad_norm,
    })
}

/// Rows `0..=T` for a run of `T` recorded steps.
pub fn rows_from_run(result: &RunResult, mode: StepMode) -> Vec<RunLogRow> {
    let mut rows: Vec<RunLogRow> = result
        .records
        .iter()
        .map(|r| {
            let s = r.sharpness.as_ref();
            RunLogRow {
                step: r.step,
                loss: r.loss_before,
                dual_grad_norm: Some(r.dual_grad_norm),
                dir_smoothness: r.dir_smoothness,
                sharpness: s.map(|s| s.value),
                fw_gap: s.map(|s| s.fw_gap),
                threshold: Some(r.threshold),
                normalized_dir_smoothness: normalize(mode, r.dir_smoothness, r.dual_grad_norm),
                normalized_sharpness: normalize(mode, s.map(|s| s.value), r.dual_grad_norm),
                diverged: false,
            }
        })
        .collect();
    let last = result.records.last();
    rows.push(RunLogRow {
        step: last.map_or(0, |r| r.step + 1),
        loss: last.map_or(result.final_loss, |r| r.loss_after),
        dual_grad_norm: None,
        dir_smoothness: None,
        sharpness: None,
        fw_gap: None,
        threshold: None,
        normalized_dir_smoothness: None,
        normalized_sharpness: None,
        diverged: result.diverged,
    });
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// CSV text. Floats use the shortest representation that parses back to the
/// same value; absent values are empty fields.
pub fn to_csv(header: &RunHeader, rows: &[RunLogRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 2));
    out.push_str(&header.line());
    out.push('\n');
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.loss,
            opt(r.dual_grad_norm),
            opt(r.dir_smoothness),
            opt(r.sharpness),
            opt(r.fw_gap),
            opt(r.threshold),
            opt(r.normalized_dir_smoothness),
            opt(r.normalized_sharpness),
            r.diverged as u8
        );
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, header: &RunHeader, rows: &[RunLogRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(header, rows)).map_err(|e| Error::io(path, e))
}

/// One JSON object per row, `null` for absent values.
pub fn to_jsonl(rows: &[RunLogRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

pub fn parse_csv(text: &str) -> Result<(RunHeader, Vec<RunLogRow>)> {
    let mut lines = text.lines();
    let header = RunHeader::parse(lines.next().ok_or_else(|| Error::Format("empty run log".into()))?)?;
    if lines.next() != Some(COLUMNS.join(",").as_str()) {
        return Err(Error::Format("unexpected column line".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != COLUMNS.len() {
            return Err(Error::Format(format!("row {i}: expected {} fields, got {}", COLUMNS.len(), f.len())));
        }
        rows.push(RunLogRow {
            step: f[0].parse().map_err(|_| Error::Format(format!("row {i}: bad step `{}`", f[0])))?,
            loss: parse_f64(f[1])?,
            dual_grad_norm: parse_opt(f[2])?,
            dir_smoothness: parse_opt(f[3])?,
            sharpness: parse_opt(f[4])?,
            fw_gap: parse_opt(f[5])?,
            threshold: parse_opt(f[6])?,
            normalized_dir_smoothness: parse_opt(f[7])?,
            normalized_sharpness: parse_opt(f[8])?,
            diverged: match f[9] {
                "0" => false,
                "1" => true,
                other => return Err(Error::Format(format!("row {i}: bad flag `{other}`"))),
            },
        });
    }
    Ok((header, rows))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<(RunHeader, Vec<RunLogRow>)> {
    let path = path.as_ref();
    parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Whether `sign(ΔL) = sign(D − threshold)` holds for a step, treating loss
/// changes below `1e-12·(|L| + linear term)` as numerically zero. Steps with
/// `‖g‖* ≤ 1e-8` are exempt.
pub fn sign_consistent(mode: StepMode, eta: f64, loss: f64, delta_loss: f64, dual_grad_norm: f64, smoothness: f64, thr: f64) -> bool {
    if dual_grad_norm <= 1e-8 {
        return true;
    }
    let linear = match mode {
        StepMode::Unnormalized => eta * dual_grad_norm * dual_grad_norm,
        StepMode::Normalized => eta * dual_grad_norm,
    };
    if delta_loss.abs() <= 1e-12 * (loss.abs() + linear) {
        return true;
    }
    (delta_loss > 0.0) == (smoothness > thr)
}

#[derive(Debug, Clone, Default)]
pub struct Validation {
    pub rows: usize,
    pub sign_checks: usize,
    pub mismatches: Vec<String>,
}

impl Validation {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-derives the threshold and normalized columns from raw columns (exact
/// equality, since the log round-trips floats) and checks the sign rule on
/// every consecutive pair of rows.
pub fn validate(header: &RunHeader, rows: &[RunLogRow]) -> Validation {
    let mut v = Validation {
        rows: rows.len(),
        ..Validation::default()
    };
    let mut bad = |msg: String| v.mismatches.push(msg);
    for (i, r) in rows.iter().enumerate() {
        if r.step != i {
            bad(format!("row {i}: step {}", r.step));
        }
        let last = i + 1 == rows.len();
        if last {
            if r.dual_grad_norm.is_some() || r.threshold.is_some() {
                bad(format!("row {i}: final row carries step data"));
            }
            continue;
        }
        if r.diverged {
            bad(format!("row {i}: divergence flag before the final row"));
        }
        let Some(dn) = r.dual_grad_norm else {
            bad(format!("row {i}: missing dual_grad_norm"));
            continue;
        };
        let thr = threshold(header.mode, header.eta, dn);
        if r.threshold != Some(thr) {
            bad(format!("row {i}: threshold {:?}, expected {thr}", r.threshold));
        }
        if r.normalized_dir_smoothness != normalize(header.mode, r.dir_smoothness, dn) {
            bad(format!("row {i}: normalized_dir_smoothness mismatch"));
        }
        if r.normalized_sharpness != normalize(header.mode, r.sharpness, dn) {
            bad(format!("row {i}: normalized_sharpness mismatch"));
        }
        if r.sharpness.is_some() != r.fw_gap.is_some() {
            bad(format!("row {i}: sharpness and fw_gap must appear together"));
        }
        if let Some(d) = r.dir_smoothness {
            let next = &rows[i + 1];
            if next.loss.is_finite() && r.loss.is_finite() {
                if !sign_consistent(header.mode, header.eta, r.loss, next.loss - r.loss, dn, d, thr) {
                    bad(format!(
                        "row {i}: loss change {} disagrees with D − threshold = {}",
                        next.loss - r.loss,
                        d - thr
                    ));
                }
                v.sign_checks += 1;
            }
        }
    }
    v
}

/// Edge-of-stability summary of a logged run, in units of `2/η` (normalized
/// columns, so both modes are comparable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EosStats {
    /// First measured sharpness over `2/η`.
    pub initial_ratio: Option<f64>,
    /// First step whose measured sharpness reaches `0.9·(2/η)`.
    pub first_cross: Option<usize>,
    /// Median measured sharpness over the final quarter of steps.
    pub median_ratio: Option<f64>,
    /// Fraction of the final quarter of steps with directional smoothness in
    /// `[0.8, 1.2]·(2/η)`.
    pub occupancy: f64,
}

impl EosStats {
    pub fn from_rows(rows: &[RunLogRow], eta: f64) -> Self {
        let unit = 2.0 / eta;
        let steps: Vec<&RunLogRow> = rows.iter().filter(|r| r.dual_grad_norm.is_some()).collect();
        let sharp = |r: &&RunLogRow| r.normalized_sharpness.map(|s| (r.step, s / unit));
        let initial_ratio = steps.iter().find_map(sharp).map(|(_, s)| s);
        let first_cross = steps.iter().filter_map(sharp).find(|&(_, s)| s >= 0.9).map(|(t, _)| t);
        let tail = &steps[steps.len() - steps.len() / 4..];
        let mut ss: Vec<f64> = tail.iter().filter_map(sharp).map(|(_, s)| s).collect();
        ss.sort_by(f64::total_cmp);
        let median_ratio = (!ss.is_empty()).then(|| {
            let m = ss.len() / 2;
            if ss.len() % 2 == 1 {
                ss[m]
            } else {
                0.5 * (ss[m - 1] + ss[m])
            }
        });
        let inside = tail
            .iter()
            .filter(|r| r.normalized_dir_smoothness.is_some_and(|d| (0.8..=1.2).contains(&(d / unit))))
            .count();
        EosStats {
            initial_ratio,
            first_cross,
            median_ratio,
            occupancy: if tail.is_empty() { 0.0 } else { inside as f64 / tail.len() as f64 },
        }
    }
}
