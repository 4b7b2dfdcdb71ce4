//! Weighted undirected graphs with node features, observation masks, and
//! CSV / edge-list ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Tolerance for accepting a slightly asymmetric weight matrix. Accepted
/// matrices are symmetrized exactly.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("adjacency is asymmetric at ({i},{j}): {a} vs {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("negative weight {w} at ({i},{j})")]
    NegativeWeight { i: usize, j: usize, w: f64 },
    #[error("nonzero diagonal {w} at node {i}")]
    NonzeroDiagonal { i: usize, w: f64 },
    #[error("{path}: line {line} has {found} fields, expected {expected}")]
    Ragged {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("feature matrix has {found} rows, graph has {expected} nodes")]
    FeatureRows { expected: usize, found: usize },
    #[error("mask entry ({i},{j}) = {v} is not 0/1 or breaks symmetry")]
    BadMask { i: usize, j: usize, v: f64 },
    #[error("mask diagonal entry {0} must be 1")]
    MaskDiagonal(usize),
    #[error("mask is {mask}x{mask}, graph has {graph} nodes")]
    MaskSize { mask: usize, graph: usize },
    #[error("not a permutation of 0..{0}")]
    NotBijection(usize),
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Undirected weighted graph `G = (V, E, W)` with node features `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    weights: Tensor,
    features: Tensor,
}

impl Graph {
    /// Validates `weights` (square, symmetric, non-negative, zero diagonal)
    /// and the row count of `features`.
    pub fn new(weights: Tensor, features: Tensor) -> Result<Self> {
        let weights = validate_adjacency(weights)?;
        if features.rows() != weights.rows() || features.shape().len() != 2 {
            return Err(GraphError::FeatureRows {
                expected: weights.rows(),
                found: features.rows(),
            });
        }
        Ok(Self { weights, features })
    }

    /// Graph whose features are its connectivity profiles.
    pub fn from_adjacency(weights: Tensor) -> Result<Self> {
        let weights = validate_adjacency(weights)?;
        let features = connectivity_profile(&weights);
        Ok(Self { weights, features })
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Edges `(i, j, w)` with `i < j` and `w > 0`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.weights.get(i, j);
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| self.weights.row(i).iter().filter(|&&w| w > 0.0).count())
            .collect()
    }

    /// `1` where an edge exists, `0` elsewhere.
    pub fn binarized(&self) -> Tensor {
        self.weights.map(|w| if w > 0.0 { 1.0 } else { 0.0 })
    }
}

fn validate_adjacency(mut w: Tensor) -> Result<Tensor> {
    let (rows, cols) = (w.rows(), w.cols());
    if rows != cols || w.shape().len() != 2 {
        return Err(GraphError::NotSquare { rows, cols });
    }
    let n = rows;
    let mut worst: Option<(usize, usize, f64)> = None;
    for i in 0..n {
        let d = w.get(i, i);
        if d != 0.0 {
            return Err(GraphError::NonzeroDiagonal { i, w: d });
        }
        for j in i + 1..n {
            let (a, b) = (w.get(i, j), w.get(j, i));
            if a < 0.0 || b < 0.0 {
                let (ii, jj, ww) = if a < 0.0 { (i, j, a) } else { (j, i, b) };
                return Err(GraphError::NegativeWeight { i: ii, j: jj, w: ww });
            }
            let diff = (a - b).abs();
            if diff > SYMMETRY_TOL && worst.is_none_or(|(_, _, d)| diff > d) {
                worst = Some((i, j, diff));
            }
        }
    }
    if let Some((i, j, _)) = worst {
        return Err(GraphError::Asymmetric {
            i,
            j,
            a: w.get(i, j),
            b: w.get(j, i),
        });
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (w.get(i, j), w.get(j, i));
            if a != b {
                let avg = 0.5 * (a + b);
                w.set(i, j, avg);
                w.set(j, i, avg);
            }
        }
    }
    Ok(w)
}

/// Rows of `w` scaled to unit Euclidean norm; all-zero rows stay zero.
pub fn connectivity_profile(w: &Tensor) -> Tensor {
    let mut out = w.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// `W / max_i Σ_j W_ij`; a zero matrix is returned unchanged.
pub fn normalized_adjacency(w: &Tensor) -> Tensor {
    let bound = (0..w.rows())
        .map(|i| w.row(i).iter().sum::<f64>())
        .fold(0.0, f64::max);
    if bound > 0.0 {
        w.map(|v| v / bound)
    } else {
        w.clone()
    }
}

/// Same graph with `W` scaled so the largest row sum is 1 (spectral radius
/// at most 1). Features are untouched.
pub fn normalize_adjacency(g: &Graph) -> Graph {
    Graph {
        weights: normalized_adjacency(&g.weights),
        features: g.features.clone(),
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(GraphError::NotBijection(n));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(GraphError::NotBijection(n));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `P M Pᵀ` where node `i` moves to position `perm[i]`.
pub fn permute_square(m: &Tensor, perm: &[usize]) -> Tensor {
    let inv = invert_permutation(perm);
    Tensor::from_fn(m.rows(), m.cols(), |a, b| m.get(inv[a], inv[b]))
}

/// `P M`: row `i` moves to row `perm[i]`.
pub fn permute_rows(m: &Tensor, perm: &[usize]) -> Tensor {
    let inv = invert_permutation(perm);
    Tensor::from_fn(m.rows(), m.cols(), |a, b| m.get(inv[a], b))
}

/// Relabels nodes so that node `i` becomes node `perm[i]`.
pub fn permute(g: &Graph, perm: &[usize]) -> Result<Graph> {
    check_permutation(perm, g.n())?;
    Ok(Graph {
        weights: permute_square(&g.weights, perm),
        features: permute_rows(&g.features, perm),
    })
}

/// Symmetric 0/1 matrix; `1` marks an observed adjacency entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMask {
    mask: Tensor,
}

impl PartialMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        let (rows, cols) = (mask.rows(), mask.cols());
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            if mask.get(i, i) != 1.0 {
                return Err(GraphError::MaskDiagonal(i));
            }
            for j in 0..rows {
                let v = mask.get(i, j);
                if (v != 0.0 && v != 1.0) || v != mask.get(j, i) {
                    return Err(GraphError::BadMask { i, j, v });
                }
            }
        }
        Ok(Self { mask })
    }

    pub fn full(n: usize) -> Self {
        Self {
            mask: Tensor::filled(&[n, n], 1.0),
        }
    }

    /// Hides exactly `round(fraction · n(n−1)/2)` unordered off-diagonal pairs.
    pub fn random_hidden<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Self {
        let mut pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let hide = ((fraction.clamp(0.0, 1.0)) * pairs.len() as f64).round() as usize;
        pairs.shuffle(rng);
        let mut mask = Tensor::filled(&[n, n], 1.0);
        for &(i, j) in &pairs[..hide] {
            mask.set(i, j, 0.0);
            mask.set(j, i, 0.0);
        }
        Self { mask }
    }

    pub fn n(&self) -> usize {
        self.mask.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask.get(i, j) == 1.0
    }

    /// Unordered hidden pairs `(i, j)`, `i < j`.
    pub fn hidden_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !self.is_observed(i, j))
            .collect()
    }

    /// Observed off-diagonal entries as a 0/1 matrix with zero diagonal.
    pub fn observed_off_diagonal(&self) -> Tensor {
        Tensor::from_fn(self.n(), self.n(), |i, j| {
            if i != j && self.is_observed(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// A graph with unobserved adjacency entries zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialGraph {
    graph: Graph,
    mask: PartialMask,
}

impl PartialGraph {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mask(&self) -> &PartialMask {
        &self.mask
    }

    /// Connectivity profiles of the observed adjacency.
    pub fn observed_profiles(&self) -> Tensor {
        connectivity_profile(self.graph.weights())
    }
}

/// Zeroes every unobserved entry of `W`. Features are kept as given.
pub fn apply_mask(g: &Graph, m: &PartialMask) -> Result<PartialGraph> {
    if m.n() != g.n() {
        return Err(GraphError::MaskSize {
            mask: m.n(),
            graph: g.n(),
        });
    }
    let mut w = g.weights.clone();
    for (o, &keep) in w.data_mut().iter_mut().zip(m.mask.data()) {
        if keep == 0.0 {
            *o = 0.0;
        }
    }
    Ok(PartialGraph {
        graph: Graph {
            weights: w,
            features: g.features.clone(),
        },
        mask: m.clone(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| GraphError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("not a number: {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(GraphError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("non-finite value {s:?}"),
        });
    }
    Ok(v)
}

/// Parses a dense CSV matrix (rows of equal length).
pub fn parse_dense(path: &Path, text: &str) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| GraphError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(GraphError::Ragged {
                path: path.to_path_buf(),
                line,
                expected,
                found: record.len(),
            });
        }
        for field in record.iter() {
            data.push(parse_f64(path, line, field)?);
        }
        rows += 1;
    }
    Ok(Tensor::matrix(rows, width.unwrap_or(0), data)?)
}

const EDGELIST_TAG: &str = "# edgelist n=";

fn parse_edgelist(path: &Path, text: &str) -> Result<Tensor> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().expect("caller checked header");
    let n: usize = header[EDGELIST_TAG.len()..]
        .trim()
        .parse()
        .map_err(|_| GraphError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("bad edge-list header {header:?}"),
        })?;
    let mut w = Tensor::zeros(&[n, n]);
    let mut set = vec![false; n * n];
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 3 {
            return Err(GraphError::Ragged {
                path: path.to_path_buf(),
                line,
                expected: 3,
                found: parts.len(),
            });
        }
        let index = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v < n)
                .ok_or_else(|| GraphError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("node index {s:?} out of range 0..{n}"),
                })
        };
        let (i, j) = (index(parts[0])?, index(parts[1])?);
        let v = parse_f64(path, line, parts[2])?;
        if i == j {
            if v != 0.0 {
                return Err(GraphError::NonzeroDiagonal { i, w: v });
            }
            continue;
        }
        for (a, b) in [(i, j), (j, i)] {
            if set[a * n + b] && w.get(a, b) != v {
                return Err(GraphError::Asymmetric {
                    i: a.min(b),
                    j: a.max(b),
                    a: w.get(a, b),
                    b: v,
                });
            }
        }
        w.set(i, j, v);
        w.set(j, i, v);
        set[i * n + j] = true;
        set[j * n + i] = true;
    }
    Ok(w)
}

/// Reads a matrix from a dense CSV file or an `# edgelist n=N` file.
pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let text = read_text(path)?;
    if text.trim_start().starts_with(EDGELIST_TAG) {
        parse_edgelist(path, text.trim_start())
    } else {
        parse_dense(path, &text)
    }
}

/// Dense CSV with shortest round-trip decimal formatting.
pub fn format_dense(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    write_text(path, &format_dense(m))
}

/// Loads a graph; without a feature file the connectivity profiles are used.
pub fn load_graph(adjacency: &Path, features: Option<&Path>) -> Result<Graph> {
    let w = read_matrix(adjacency)?;
    match features {
        Some(p) => Graph::new(w, read_matrix(p)?),
        None => Graph::from_adjacency(w),
    }
}

pub fn save_graph(g: &Graph, adjacency: &Path, features: Option<&Path>) -> Result<()> {
    write_matrix(adjacency, g.weights())?;
    if let Some(p) = features {
        write_matrix(p, g.features())?;
    }
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<PartialMask> {
    PartialMask::new(read_matrix(path)?)
}

pub fn save_mask(m: &PartialMask, path: &Path) -> Result<()> {
    write_matrix(path, m.matrix())
}
