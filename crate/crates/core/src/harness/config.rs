use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_cifar10_subset, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::matrixfns::PolarMethod;
use crate::norms::{NormSpec, Preconditioner};
use crate::objectives::{read_matrix, Activation, MlpObjective, Objective, QuadraticObjective};
use crate::optimizers::{EmaSchedule, StepMode};
use crate::param::{gaussian_like, BlockLayout, ParamVector};
use crate::rng::RngState;
use crate::spectra::FwConfig;

/// A complete experiment description. Every table rejects unknown keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad: Option<QuadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taylor: Option<TaylorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// `½ w^T H w` with `H` from exactly one of `diag`, `matrix`,
    /// `matrix_file` or `random`.
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diag: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        random: Option<RandomQuadratic>,
        /// Named blocks covering the parameter vector; one flat block when empty.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        blocks: Vec<BlockConfig>,
        /// Explicit starting point; Gaussian from `init_seed` otherwise.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<Vec<f64>>,
        #[serde(default)]
        init_seed: u64,
    },
    /// Fully connected network with MSE loss.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        dataset: DatasetConfig,
        #[serde(default)]
        init_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomQuadratic {
    pub dim: usize,
    /// Eigenvalues are spread uniformly over `[1, cond]`.
    pub cond: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: SyntheticKind,
        n: usize,
        p: usize,
        q: usize,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Cache {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub mode: StepMode,
    #[serde(default)]
    pub norm: NormConfig,
    /// Absolute step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Step size relative to the initial sharpness `S₀`: `η = scale/S₀`
    /// (times `‖g₀‖*` in normalized mode), so `S₀ = scale·(2/η)/2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_scale: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<EmaSchedule>,
}

fn default_steps() -> usize {
    100
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: StepMode::Unnormalized,
            norm: NormConfig::Euclidean,
            eta: None,
            eta_scale: None,
            steps: default_steps(),
            ema: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormConfig {
    #[default]
    Euclidean,
    Linf,
    /// Diagonal (`diagonal`) or dense (`matrix`) metric.
    Preconditioned {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diagonal: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
    },
    /// Blocks of the given sizes, or the parameter blocks when omitted.
    BlockL12 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        partition: Option<Vec<usize>>,
    },
    SpectralMax {
        #[serde(default)]
        polar: PolarMethod,
    },
    SpectralSum {
        #[serde(default)]
        polar: PolarMethod,
    },
}

impl NormConfig {
    /// The geometry for parameters of dimension `dim`. EMA runs start from the
    /// identity metric when no diagonal is given.
    pub fn build(&self, dim: usize) -> Result<NormSpec> {
        Ok(match self {
            NormConfig::Euclidean => NormSpec::Euclidean,
            NormConfig::Linf => NormSpec::Linf,
            NormConfig::Preconditioned { diagonal, matrix } => match (diagonal, matrix) {
                (Some(d), None) => NormSpec::preconditioned(Preconditioner::diagonal(d.clone())?),
                (None, Some(m)) => NormSpec::preconditioned(Preconditioner::dense(rows_to_matrix(m)?)?),
                (None, None) => NormSpec::preconditioned(Preconditioner::diagonal(vec![1.0; dim])?),
                (Some(_), Some(_)) => {
                    return Err(Error::Config("norm: give either `diagonal` or `matrix`, not both".into()))
                }
            },
            NormConfig::BlockL12 { partition: None } => NormSpec::block_l12(),
            NormConfig::BlockL12 { partition: Some(sizes) } => NormSpec::block_l12_with(BlockLayout::partition(sizes)?),
            NormConfig::SpectralMax { polar } => NormSpec::spectral_max().with_polar(polar.clone()),
            NormConfig::SpectralSum { polar } => NormSpec::spectral_sum().with_polar(polar.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementConfig {
    pub fw_iters: usize,
    pub fw_restarts: usize,
    pub fw_seed: u64,
    /// Sharpness every `cadence` steps; 0 disables.
    pub cadence: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub track: Option<TrackConfig>,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig {
            fw_iters: 50,
            fw_restarts: 5,
            fw_seed: 0,
            cadence: 20,
            track: None,
        }
    }
}

impl MeasurementConfig {
    pub fn fw(&self) -> FwConfig {
        FwConfig::new(self.fw_iters, self.fw_restarts, self.fw_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub t0: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    /// Exponential smoothing factor for plotted loss and gradient-norm curves
    /// (0 plots raw values). Logged columns are never smoothed.
    pub smoothing: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Jsonl, OutputFormat::Svg],
            smoothing: 0.1,
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadConfig {
    /// Grid of `η·S/2` values.
    pub eta_ratios: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    /// Also locate the threshold by bisection.
    pub bisect: bool,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            eta_ratios: vec![0.25, 0.5, 0.9, 0.99, 0.998, 1.002, 1.01, 1.1, 1.5, 2.0],
            steps: 20_000,
            seed: 0,
            bisect: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Absolute step sizes; combined with `eta_scales` when both are given.
    #[serde(default)]
    pub etas: Vec<f64>,
    #[serde(default)]
    pub eta_scales: Vec<f64>,
    /// Initialization seeds; the objective's seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaylorConfig {
    pub switch_steps: Vec<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Adds `perturb·d̂` to the Taylor run's start when positive.
    #[serde(default)]
    pub perturb: f64,
}

fn default_horizon() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleGeometry {
    Linf,
    BlockL12,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub geometry: OracleGeometry,
    pub dim: usize,
    /// Equal-size blocks for the block geometry.
    pub blocks: usize,
    pub seeds: u64,
    pub restarts: Vec<usize>,
    pub iters: Vec<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            geometry: OracleGeometry::Linf,
            dim: 12,
            blocks: 3,
            seeds: 100,
            restarts: vec![1, 5, 10, 50],
            iters: vec![50, 200],
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; syntax errors and unknown keys carry line and key context.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        match (o.eta, o.eta_scale) {
            (Some(_), Some(_)) => return Err(Error::Config("optimizer: set `eta` or `eta_scale`, not both".into())),
            (Some(e), None) | (None, Some(e)) if !(e > 0.0 && e.is_finite()) => {
                return Err(Error::Config(format!("optimizer: step size must be positive, got {e}")))
            }
            _ => {}
        }
        if o.steps == 0 {
            return Err(Error::Config("optimizer.steps must be positive".into()));
        }
        if self.measurement.cadence > 0 && (self.measurement.fw_iters == 0 || self.measurement.fw_restarts == 0) {
            return Err(Error::Config("measurement: Frank-Wolfe needs iterations and restarts".into()));
        }
        if !(0.0..=1.0).contains(&self.output.smoothing) {
            return Err(Error::Config("output.smoothing must lie in [0, 1]".into()));
        }
        if let ObjectiveConfig::Quadratic {
            diag,
            matrix,
            matrix_file,
            random,
            ..
        } = &self.objective
        {
            let sources = diag.is_some() as u8 + matrix.is_some() as u8 + matrix_file.is_some() as u8 + random.is_some() as u8;
            if sources != 1 {
                return Err(Error::Config(
                    "objective: a quadratic needs exactly one of `diag`, `matrix`, `matrix_file`, `random`".into(),
                ));
            }
        }
        Ok(())
    }

    /// Applies a command-line seed to initialization, Frank–Wolfe and quad runs.
    pub fn override_seed(&mut self, seed: u64) {
        match &mut self.objective {
            ObjectiveConfig::Quadratic { init_seed, .. } | ObjectiveConfig::Mlp { init_seed, .. } => *init_seed = seed,
        }
        self.measurement.fw_seed = seed;
        if let Some(q) = &mut self.quad {
            q.seed = seed;
        }
    }
}

/// An instantiated objective with its starting point.
pub enum BuiltObjective {
    Quadratic(QuadraticObjective),
    Mlp(MlpObjective),
}

impl BuiltObjective {
    pub fn as_objective(&self) -> &dyn Objective {
        match self {
            BuiltObjective::Quadratic(q) => q,
            BuiltObjective::Mlp(m) => m,
        }
    }

    pub fn quadratic(&self) -> Option<&QuadraticObjective> {
        match self {
            BuiltObjective::Quadratic(q) => Some(q),
            BuiltObjective::Mlp(_) => None,
        }
    }
}

impl ObjectiveConfig {
    /// Relative paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<(BuiltObjective, ParamVector)> {
        match self {
            ObjectiveConfig::Quadratic {
                diag,
                matrix,
                matrix_file,
                random,
                blocks,
                init,
                init_seed,
            } => {
                let h = if let Some(d) = diag {
                    DMatrix::from_diagonal(&DVector::from_column_slice(d))
                } else if let Some(m) = matrix {
                    rows_to_matrix(m)?
                } else if let Some(f) = matrix_file {
                    read_matrix(base.join(f))?
                } else if let Some(r) = random {
                    random_pd(r)?
                } else {
                    return Err(Error::Config("objective: quadratic has no Hessian source".into()));
                };
                let layout = if blocks.is_empty() {
                    BlockLayout::flat(h.nrows())?
                } else {
                    BlockLayout::new(blocks.iter().map(|b| (b.name.clone(), b.shape.clone())))?
                }
                .shared();
                let q = QuadraticObjective::with_layout(h, Arc::clone(&layout))?;
                let w0 = match init {
                    Some(v) => ParamVector::from_vec(&layout, v.clone())?,
                    None => gaussian_like(&layout, &mut RngState::new(*init_seed)),
                };
                Ok((BuiltObjective::Quadratic(q), w0))
            }
            ObjectiveConfig::Mlp {
                hidden,
                activation,
                dataset,
                init_seed,
            } => {
                let data = dataset.load(base)?;
                let mut dims = vec![data.num_features()];
                dims.extend(hidden);
                dims.push(data.num_targets());
                let (x, y, _) = data.into_parts();
                let mlp = MlpObjective::new(&dims, *activation, x, y)?;
                let w0 = mlp.init_params(&mut RngState::new(*init_seed));
                Ok((BuiltObjective::Mlp(mlp), w0))
            }
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic { generator, n, p, q, seed } => gen_synthetic(*generator, *n, *p, *q, *seed),
            DatasetConfig::Cifar10 { path, n_per_class, seed } => load_cifar10_subset(base.join(path), *n_per_class, *seed),
            DatasetConfig::Cache { path } => Dataset::load_cache(base.join(path)),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config("matrix rows must be non-empty and equally long".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// `Q diag(λ) Q^T` with `Q` from the QR factorization of a Gaussian matrix
/// and `λ` uniform on `[1, cond]` (endpoints included when `dim ≥ 2`).
pub fn random_pd(cfg: &RandomQuadratic) -> Result<DMatrix<f64>> {
    if cfg.dim == 0 || !(cfg.cond >= 1.0 && cfg.cond.is_finite()) {
        return Err(Error::Config(format!(
            "random quadratic needs dim >= 1 and cond >= 1, got {} and {}",
            cfg.dim, cfg.cond
        )));
    }
    let mut rng = RngState::new(cfg.seed);
    let a = DMatrix::from_fn(cfg.dim, cfg.dim, |_, _| rng.standard_normal());
    let q = a.qr().q();
    let mut ev: Vec<f64> = (0..cfg.dim).map(|_| rng.uniform_range(1.0, cfg.cond)).collect();
    if cfg.dim >= 2 {
        ev[0] = 1.0;
        ev[1] = cfg.cond;
    }
    let m = &q * DMatrix::from_diagonal(&DVector::from_vec(ev)) * q.transpose();
    Ok((&m + m.transpose()) * 0.5)
}
