//! Datasets: CIFAR-10 binary batches with class-balanced seeded subsets,
//! synthetic generators, and a binary cache format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Activation, MlpObjective};
use crate::rng::RngState;

/// Bytes per CIFAR-10 record: one label byte and a 32×32×3 channel-planar image.
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_CLASSES: usize = 10;
const CHANNEL_PIXELS: usize = 1024;
const CACHE_MAGIC: &[u8; 8] = b"EOSDATA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub normalization: String,
    pub seed: u64,
    /// Targets are one-hot class indicators.
    pub classification: bool,
}

/// An immutable `n × p` input matrix with `n × q` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>, meta: DatasetMeta) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 || targets.ncols() == 0 {
            return Err(Error::invalid("dataset needs at least one example, feature and target"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::invalid(format!(
                "inputs have {} rows, targets {}",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset entry"));
        }
        if meta.classification {
            for (i, row) in targets.row_iter().enumerate() {
                let ones = row.iter().filter(|&&x| x == 1.0).count();
                let zeros = row.iter().filter(|&&x| x == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(Error::Corrupt(format!("target row {i} is not one-hot")));
                }
            }
        }
        Ok(Dataset { inputs, targets, meta })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, DatasetMeta) {
        (self.inputs, self.targets, self.meta)
    }

    /// Class index per row for classification data.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.meta.classification.then(|| {
            self.targets
                .row_iter()
                .map(|r| r.iter().position(|&x| x == 1.0).expect("validated one-hot"))
                .collect()
        })
    }

    /// Writes magic, `n, p, q`, the metadata length and JSON, then inputs and
    /// targets row-major as little-endian `f64`.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::with_capacity(48 + meta.len() + 8 * (self.inputs.len() + self.targets.len()));
        buf.extend_from_slice(CACHE_MAGIC);
        for v in [self.len(), self.num_features(), self.num_targets(), meta.len()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&meta);
        for m in [&self.inputs, &self.targets] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    buf.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let header = 8 + 4 * 8;
        if bytes.len() < header || &bytes[..8] != CACHE_MAGIC {
            return Err(Error::Format(format!("{} is not a dataset cache", path.display())));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
        let (n, p, q, meta_len) = (word(0), word(1), word(2), word(3));
        let body = n
            .checked_mul(p + q)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(header + meta_len));
        if body != Some(bytes.len()) {
            return Err(Error::Format(format!("{}: size does not match header", path.display())));
        }
        let meta: DatasetMeta =
            serde_json::from_slice(&bytes[header..header + meta_len]).map_err(|e| Error::Format(e.to_string()))?;
        let floats: Vec<f64> = bytes[header + meta_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let inputs = DMatrix::from_row_slice(n, p, &floats[..n * p]);
        let targets = DMatrix::from_row_slice(n, q, &floats[n * p..]);
        Dataset::new(inputs, targets, meta)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// Channel-planar `[c][y][x]` bytes.
    pub pixels: Vec<u8>,
}

/// Splits a batch into records, checking the size and label range.
pub fn parse_cifar10_batch(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "batch size {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(k, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Corrupt(format!("record {k} has label {}", rec[0])));
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

pub fn read_cifar10_batch(path: impl AsRef<Path>) -> Result<Vec<CifarRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_batch(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Batch files under `path`: the file itself, or the `data_batch_*.bin`
/// files of a directory in name order (falling back to every `*.bin`).
pub fn cifar10_batch_files(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut bins: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    let train: Vec<PathBuf> = bins
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("data_batch_")))
        .cloned()
        .collect();
    let files = if train.is_empty() { bins } else { train };
    if files.is_empty() {
        return Err(Error::invalid(format!("no CIFAR-10 batch files under {}", path.display())));
    }
    Ok(files)
}

/// Class-balanced subset: after a seeded shuffle of all records, the first
/// `n_per_class` of each class are kept (in shuffled order). Pixels are
/// scaled to `[0, 1]` and standardized per channel over the subset; labels
/// become one-hot rows.
pub fn load_cifar10_subset(path: impl AsRef<Path>, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    let mut records = Vec::new();
    for file in cifar10_batch_files(&path)? {
        records.extend(read_cifar10_batch(&file)?);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    RngState::new(seed).shuffle(&mut order);
    let mut counts = [0usize; CIFAR_CLASSES];
    let mut chosen = Vec::with_capacity(n_per_class * CIFAR_CLASSES);
    for i in order {
        let c = records[i].label as usize;
        if counts[c] < n_per_class {
            counts[c] += 1;
            chosen.push(i);
        }
    }
    if let Some(c) = counts.iter().position(|&k| k < n_per_class) {
        return Err(Error::invalid(format!(
            "class {c} has only {} records, {n_per_class} requested",
            counts[c]
        )));
    }
    let n = chosen.len();
    let mut inputs = DMatrix::zeros(n, CIFAR_PIXELS);
    let mut targets = DMatrix::zeros(n, CIFAR_CLASSES);
    for (row, &i) in chosen.iter().enumerate() {
        for (j, &b) in records[i].pixels.iter().enumerate() {
            inputs[(row, j)] = b as f64 / 255.0;
        }
        targets[(row, records[i].label as usize)] = 1.0;
    }
    standardize_channels(&mut inputs)?;
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            source: format!("cifar10:{}", path.as_ref().display()),
            normalization: "scale_255_per_channel_standardize".into(),
            seed,
            classification: true,
        },
    )
}

/// Per-channel zero mean and unit (population) standard deviation.
fn standardize_channels(x: &mut DMatrix<f64>) -> Result<()> {
    let n = x.nrows() as f64 * CHANNEL_PIXELS as f64;
    for c in 0..3 {
        let cols = c * CHANNEL_PIXELS..(c + 1) * CHANNEL_PIXELS;
        let mean = cols.clone().map(|j| x.column(j).sum()).sum::<f64>() / n;
        let var = cols
            .clone()
            .map(|j| x.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        if var <= 0.0 {
            return Err(Error::invalid(format!("channel {c} is constant over the subset")));
        }
        let std = var.sqrt();
        for j in cols {
            x.column_mut(j).apply(|v| *v = (*v - mean) / std);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Targets from a frozen random Tanh MLP with one hidden layer.
    TeacherMlp { hidden: usize },
    /// `y = A x + noise · ε`.
    RandomRegression { noise: f64 },
    /// Two unit-variance Gaussian classes whose means are `separation` apart.
    TwoGaussians { separation: f64 },
}

/// Seeded synthetic data with `N(0, I)` inputs (class-shifted for
/// `TwoGaussians`, which requires `q = 2`).
pub fn gen_synthetic(kind: SyntheticKind, n: usize, p: usize, q: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || p == 0 || q == 0 {
        return Err(Error::invalid("synthetic data needs n, p, q >= 1"));
    }
    let mut rng = RngState::new(seed);
    let mut inputs = DMatrix::from_fn(n, p, |_, _| rng.standard_normal());
    let meta = |source: String, classification| DatasetMeta {
        source,
        normalization: "none".into(),
        seed,
        classification,
    };
    match kind {
        SyntheticKind::TeacherMlp { hidden } => {
            if hidden == 0 {
                return Err(Error::invalid("teacher needs a hidden layer"));
            }
            let teacher = MlpObjective::new(&[p, hidden, q], Activation::Tanh, inputs.clone(), DMatrix::zeros(n, q))?;
            let w = teacher.init_params(&mut rng);
            let targets = teacher.predict(&w)?;
            Dataset::new(inputs, targets, meta(format!("teacher_mlp:hidden={hidden}"), false))
        }
        SyntheticKind::RandomRegression { noise } => {
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Error::invalid(format!("noise must be finite and non-negative, got {noise}")));
            }
            let scale = 1.0 / (p as f64).sqrt();
            let a = DMatrix::from_fn(q, p, |_, _| scale * rng.standard_normal());
            let mut targets = &inputs * a.transpose();
            if noise > 0.0 {
                targets.apply(|y| *y += noise * rng.standard_normal());
            }
            Dataset::new(inputs, targets, meta(format!("random_regression:noise={noise}"), false))
        }
        SyntheticKind::TwoGaussians { separation } => {
            if q != 2 {
                return Err(Error::invalid(format!("two-Gaussian data has q = 2, got {q}")));
            }
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(Error::invalid(format!("separation must be finite and non-negative, got {separation}")));
            }
            let dir = rng.normal_vec(p);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut targets = DMatrix::zeros(n, 2);
            for i in 0..n {
                let class = i % 2;
                let sign = if class == 0 { -0.5 } else { 0.5 };
                for j in 0..p {
                    inputs[(i, j)] += sign * separation * dir[j] / norm;
                }
                targets[(i, class)] = 1.0;
            }
            Dataset::new(inputs, targets, meta(format!("two_gaussians:separation={separation}"), true))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::NormSpec;
    use crate::objectives::{Objective, QuadraticObjective};
    use crate::optimizers::{run, OptimizerSpec, RunOptions, StepMode};
    use crate::param::ParamVector;

    /// A batch whose pixel bytes encode their own position.
    pub(crate) fn synth_batch(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(labels.len() * CIFAR_RECORD_BYTES);
        for (k, &l) in labels.iter().enumerate() {
            bytes.push(l);
            for j in 0..CIFAR_PIXELS {
                bytes.push(((k * 7 + j * 13 + (j >> 10) * 31) % 256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn parse_positions() {
        let labels: Vec<u8> = (0..25).map(|k| (k % 10) as u8).collect();
        let bytes = synth_batch(&labels);
        let recs = parse_cifar10_batch(&bytes).unwrap();
        assert_eq!(recs.len(), bytes.len() / CIFAR_RECORD_BYTES);
        for (k, r) in recs.iter().enumerate() {
            assert_eq!(r.label, bytes[CIFAR_RECORD_BYTES * k]);
            for (c, y, x) in [(0, 0, 0), (1, 5, 7), (2, 31, 31)] {
                let off = CIFAR_RECORD_BYTES * k + 1 + 1024 * c + 32 * y + x;
                assert_eq!(r.pixels[1024 * c + 32 * y + x], bytes[off]);
            }
        }
    }

    #[test]
    fn parse_errors() {
        let mut bytes = synth_batch(&[1, 2]);
        bytes.pop();
        assert!(matches!(parse_cifar10_batch(&bytes), Err(Error::Format(_))));
        let mut bytes = synth_batch(&[1, 2]);
        bytes[CIFAR_RECORD_BYTES] = 10;
        assert!(matches!(parse_cifar10_batch(&bytes), Err(Error::Corrupt(_))));
        assert!(parse_cifar10_batch(&[]).is_err());
    }

    #[test]
    fn subset_is_balanced_standardized_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u8> = (0..120).map(|k| ((k * 3) % 10) as u8).collect();
        fs::write(dir.path().join("data_batch_1.bin"), synth_batch(&labels[..60])).unwrap();
        fs::write(dir.path().join("data_batch_2.bin"), synth_batch(&labels[60..])).unwrap();
        fs::write(dir.path().join("test_batch.bin"), synth_batch(&[0])).unwrap();
        let a = load_cifar10_subset(dir.path(), 5, 3).unwrap();
        assert_eq!(a.len(), 50);
        let mut counts = [0; 10];
        for l in a.labels().unwrap() {
            counts[l] += 1;
        }
        assert_eq!(counts, [5; 10]);
        for c in 0..3 {
            let vals: Vec<f64> = (c * 1024..(c + 1) * 1024).flat_map(|j| a.inputs().column(j).iter().copied().collect::<Vec<_>>()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
        }
        let b = load_cifar10_subset(dir.path(), 5, 3).unwrap();
        assert_eq!(a, b);
        let c = load_cifar10_subset(dir.path(), 5, 4).unwrap();
        assert_ne!(a.inputs(), c.inputs());
        assert!(load_cifar10_subset(dir.path(), 13, 3).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let d = gen_synthetic(SyntheticKind::TwoGaussians { separation: 3.0 }, 7, 3, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cache");
        d.save_cache(&path).unwrap();
        assert_eq!(Dataset::load_cache(&path).unwrap(), d);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, bytes).unwrap();
        assert!(Dataset::load_cache(&path).is_err());
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        for kind in [
            SyntheticKind::TeacherMlp { hidden: 4 },
            SyntheticKind::RandomRegression { noise: 0.1 },
            SyntheticKind::TwoGaussians { separation: 2.0 },
        ] {
            let a = gen_synthetic(kind, 11, 3, 2, 5).unwrap();
            assert_eq!((a.len(), a.num_features(), a.num_targets()), (11, 3, 2));
            assert_eq!(a, gen_synthetic(kind, 11, 3, 2, 5).unwrap());
            let one = gen_synthetic(kind, 1, 3, 2, 5).unwrap();
            assert_eq!(one.len(), 1);
        }
        assert!(gen_synthetic(SyntheticKind::TwoGaussians { separation: 1.0 }, 4, 3, 3, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::RandomRegression { noise: 0.0 }, 0, 3, 3, 0).is_err());
    }

    #[test]
    fn noiseless_regression_is_fit_by_gd() {
        // Linear least squares ½n⁻¹‖XW − Y‖² as a quadratic in vec(W).
        let (n, p, q) = (40, 5, 2);
        let d = gen_synthetic(SyntheticKind::RandomRegression { noise: 0.0 }, n, p, q, 2).unwrap();
        let x = d.inputs();
        let gram = x.transpose() * x / n as f64;
        let mut h = DMatrix::zeros(p * q, p * q);
        for k in 0..q {
            h.view_mut((k * p, k * p), (p, p)).copy_from(&gram);
        }
        let b = x.transpose() * d.targets() / n as f64;
        let c = d.targets().norm_squared() / (2.0 * n as f64);
        let quad = QuadraticObjective::new(h.clone()).unwrap();
        let bvec: Vec<f64> = (0..q).flat_map(|k| b.column(k).iter().copied().collect::<Vec<_>>()).collect();
        let loss = |w: &ParamVector| -> f64 {
            quad.loss(w).unwrap() - w.as_slice().iter().zip(&bvec).map(|(a, b)| a * b).sum::<f64>() + c
        };
        // GD on the shifted quadratic: gradient Hw − b.
        let eig = nalgebra::SymmetricEigen::new(h.clone());
        let eta = 1.0 / eig.eigenvalues.max();
        let mut w = ParamVector::zeros(quad.layout());
        for _ in 0..5000 {
            let g = quad.grad(&w).unwrap();
            let step: Vec<f64> = w.as_slice().iter().zip(g.as_slice()).zip(&bvec).map(|((w, g), b)| w - eta * (g - b)).collect();
            w = w.with_data(step).unwrap();
        }
        assert!(loss(&w) <= 1e-10, "{}", loss(&w));
    }

    #[test]
    fn separated_gaussians_are_learned() {
        let d = gen_synthetic(SyntheticKind::TwoGaussians { separation: 10.0 }, 200, 4, 2, 3).unwrap();
        let mlp = MlpObjective::new(&[4, 8, 2], Activation::Tanh, d.inputs().clone(), d.targets().clone()).unwrap();
        let w0 = mlp.init_params(&mut RngState::new(4));
        let spec = OptimizerSpec::new(StepMode::Unnormalized, NormSpec::Euclidean, 0.05).unwrap();
        let opts = RunOptions {
            steps: 300,
            sharpness_cadence: 0,
            ..RunOptions::default()
        };
        let res = run(&mlp, &w0, &spec, &opts).unwrap();
        let pred = mlp.predict(&res.final_w).unwrap();
        let labels = d.labels().unwrap();
        let errors = pred
            .row_iter()
            .zip(&labels)
            .filter(|(r, &l)| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 != l)
            .count();
        assert!(errors as f64 <= 0.01 * labels.len() as f64, "{errors}");
    }
}
