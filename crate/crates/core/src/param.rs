//! Block-structured parameter vectors.
//!
//! A [`ParamVector`] is a flat `f64` buffer paired with a shared [`BlockLayout`]
//! describing how the buffer splits into named, shaped blocks (one per weight
//! matrix or bias vector). Block and flat views index the same storage.
//!
//! Serialized form: the raw data as little-endian `f64`s, plus a plain-text
//! `key = value` sidecar (`<file>.layout`) describing the layout.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Block {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// The block viewed as a row-major matrix. Vectors are `n x 1`, scalars
    /// `1 x 1`, and higher-rank tensors fold trailing axes into columns.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (self.shape[0], 1),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

/// Ordered list of named blocks. Names are dot-paths such as `layer0.weight`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    blocks: Vec<Block>,
    total_dim: usize,
}

impl BlockLayout {
    pub fn new<S: Into<String>>(spec: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0;
        for (name, shape) in spec {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::invalid("block name must be non-empty"));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::invalid(format!("duplicate block name `{name}`")));
            }
            if shape.contains(&0) {
                return Err(Error::invalid(format!(
                    "block `{name}` has a zero-length axis in shape {shape:?}"
                )));
            }
            let len = shape.iter().product();
            blocks.push(Block {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        }
        if blocks.is_empty() {
            return Err(Error::invalid("layout must contain at least one block"));
        }
        Ok(BlockLayout {
            blocks,
            total_dim: offset,
        })
    }

    /// A single vector block named `w`.
    pub fn flat(dim: usize) -> Result<Self> {
        Self::new([("w", vec![dim])])
    }

    /// Consecutive vector blocks `b0, b1, ...` with the given sizes.
    pub fn partition(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.iter().enumerate().map(|(i, &n)| (format!("b{i}"), vec![n])))
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Plain-text descriptor written next to serialized vectors.
    pub fn to_descriptor(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = eos-paramvector");
        let _ = writeln!(out, "version = 1");
        let _ = writeln!(out, "total_dim = {}", self.total_dim);
        let _ = writeln!(out, "blocks = {}", self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let shape = if b.shape.is_empty() {
                "-".to_string()
            } else {
                b.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x")
            };
            let _ = writeln!(out, "block.{i} = {} {shape}", b.name);
        }
        out
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut total = None;
        let mut count = None;
        let mut entries: Vec<(usize, String, Vec<usize>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("layout line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Format(format!("layout line {}: {what}", lineno + 1));
            match key {
                "format" if value == "eos-paramvector" => {}
                "format" => return Err(bad("unknown format")),
                "version" if value == "1" => {}
                "version" => return Err(bad("unsupported version")),
                "total_dim" => total = Some(value.parse::<usize>().map_err(|_| bad("bad total_dim"))?),
                "blocks" => count = Some(value.parse::<usize>().map_err(|_| bad("bad block count"))?),
                k if k.starts_with("block.") => {
                    let idx = k["block.".len()..].parse::<usize>().map_err(|_| bad("bad block index"))?;
                    let (name, shape) = value.split_once(' ').ok_or_else(|| bad("expected `name shape`"))?;
                    let shape = match shape.trim() {
                        "-" => Vec::new(),
                        s => s
                            .split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad("bad shape"))?,
                    };
                    entries.push((idx, name.to_string(), shape));
                }
                _ => return Err(bad(&format!("unknown key `{key}`"))),
            }
        }
        entries.sort_by_key(|e| e.0);
        if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
            return Err(Error::Format("layout block indices are not contiguous".into()));
        }
        if count != Some(entries.len()) {
            return Err(Error::Format("layout block count does not match entries".into()));
        }
        let layout = BlockLayout::new(entries.into_iter().map(|(_, n, s)| (n, s)))?;
        if total != Some(layout.total_dim) {
            return Err(Error::Format("layout total_dim does not match blocks".into()));
        }
        Ok(layout)
    }
}

/// A point (or direction) in parameter space.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<BlockLayout>,
    data: Vec<f64>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        same_layout(&self.layout, &other.layout) && self.data == other.data
    }
}

fn same_layout(a: &Arc<BlockLayout>, b: &Arc<BlockLayout>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

impl ParamVector {
    pub fn zeros(layout: &Arc<BlockLayout>) -> Self {
        ParamVector {
            layout: Arc::clone(layout),
            data: vec![0.0; layout.total_dim],
        }
    }

    /// Wraps `data` with `layout`; this is the unflatten operation.
    pub fn from_vec(layout: &Arc<BlockLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_dim {
            return Err(Error::LayoutMismatch(format!(
                "data has {} entries, layout expects {}",
                data.len(),
                layout.total_dim
            )));
        }
        Ok(ParamVector {
            layout: Arc::clone(layout),
            data,
        })
    }

    /// Single-block vector, handy for quadratics and tests.
    pub fn from_slice(values: &[f64]) -> Self {
        let layout = BlockLayout::flat(values.len().max(1))
            .expect("flat layout of positive size")
            .shared();
        let mut data = values.to_vec();
        data.resize(layout.total_dim, 0.0);
        ParamVector { layout, data }
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copy of the flat storage.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn block(&self, index: usize) -> &[f64] {
        &self.data[self.layout.blocks[index].range()]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.blocks[index].range();
        &mut self.data[range]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.data[b.range()])
    }

    /// Same layout, new storage.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&self.layout, data)
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if same_layout(&self.layout, &other.layout) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} blocks / dim {} vs {} blocks / dim {}",
                self.layout.num_blocks(),
                self.layout.total_dim,
                other.layout.num_blocks(),
                other.layout.total_dim
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        self.map(|x| c * x)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        Ok(ParamVector {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        Ok(ParamVector {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Writes the raw little-endian data to `path` and the layout to `path.layout`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = layout_sidecar(path);
        std::fs::write(&sidecar, self.layout.to_descriptor()).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = layout_sidecar(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let layout = BlockLayout::from_descriptor(&text)?.shared();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != layout.total_dim * 8 {
            return Err(Error::Format(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                layout.total_dim * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ParamVector::from_vec(&layout, data)
    }
}

fn layout_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".layout");
    PathBuf::from(s)
}

/// Euclidean pairing `Σ a_i b_i`.
pub fn inner(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_layout(b)?;
    Ok(dot(&a.data, &b.data))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `y + alpha * x`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_layout(y)?;
    Ok(ParamVector {
        layout: Arc::clone(&y.layout),
        data: y.data.iter().zip(&x.data).map(|(yi, xi)| yi + alpha * xi).collect(),
    })
}

/// I.i.d. standard normal entries drawn from `rng`.
pub fn gaussian_like(layout: &Arc<BlockLayout>, rng: &mut RngState) -> ParamVector {
    let data = (0..layout.total_dim).map(|_| rng.standard_normal()).collect();
    ParamVector {
        layout: Arc::clone(layout),
        data,
    }
}
