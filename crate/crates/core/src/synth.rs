//! Synthetic connectomes: hemispherically mirrored block models with
//! log-normal weights, plus labeled anomaly injection.
//!
//! Node `i` sits in hemisphere `i / (n/2)` and block `(i mod n/2) / (n/2b)`,
//! so each block spans both hemispheres and node `i + n/2` mirrors node `i`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{load_graph, save_graph, Graph, GraphError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid connectome spec: {0}")]
    Spec(String),
    #[error("invalid anomaly spec: {0}")]
    Anomaly(String),
    #[error("block {0} has no edges to perturb")]
    EmptyBlock(usize),
    #[error("dataset must contain at least one graph")]
    EmptyDataset,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectomeSpec {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Log-normal location of edge weights.
    pub weight_location: f64,
    /// Log-normal scale of edge weights.
    pub weight_scale: f64,
    /// Hemispheric mirror strength in `[0, 1]`.
    pub mirror: f64,
}

impl Default for ConnectomeSpec {
    fn default() -> Self {
        Self {
            nodes: 20,
            blocks: 2,
            p_in: 0.8,
            p_out: 0.05,
            weight_location: 0.0,
            weight_scale: 0.5,
            mirror: 0.5,
        }
    }
}

impl ConnectomeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.blocks == 0 || self.nodes == 0 || !self.nodes.is_multiple_of(2 * self.blocks) {
            return bad(format!(
                "nodes ({}) must be a positive multiple of 2*blocks ({})",
                self.nodes,
                2 * self.blocks
            ));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return bad(format!("need 0 <= p_out < p_in <= 1, got {} and {}", self.p_out, self.p_in));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite() && self.weight_location.is_finite()) {
            return bad("weight scale must be positive and finite".into());
        }
        if !(0.0..=1.0).contains(&self.mirror) {
            return bad(format!("mirror strength {} outside [0,1]", self.mirror));
        }
        Ok(())
    }

    pub fn block_of(&self, i: usize) -> usize {
        block_of(self.nodes, self.blocks, i)
    }
}

pub fn block_of(n: usize, blocks: usize, i: usize) -> usize {
    let half = n / 2;
    (i % half) / (half / blocks)
}

/// Nodes of block `k` in ascending order.
pub fn block_members(n: usize, blocks: usize, k: usize) -> Vec<usize> {
    (0..n).filter(|&i| block_of(n, blocks, i) == k).collect()
}

/// One graph from the block model. Right-hemisphere pairs copy their mirror
/// pair's presence with probability `mirror` and blend weights as
/// `mirror·w_left + (1 − mirror)·w_fresh`.
pub fn generate_connectome(spec: &ConnectomeSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let n = spec.nodes;
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LogNormal::new(spec.weight_location, spec.weight_scale)
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    let prob = |i: usize, j: usize| {
        if spec.block_of(i) == spec.block_of(j) {
            spec.p_in
        } else {
            spec.p_out
        }
    };
    let mut w = Tensor::zeros(&[n, n]);
    let put = |w: &mut Tensor, i: usize, j: usize, v: f64| {
        w.set(i, j, v);
        w.set(j, i, v);
    };
    for i in 0..n {
        for j in i + 1..n {
            let copy: f64 = rng.random();
            let edge: f64 = rng.random();
            let fresh = weights.sample(&mut rng);
            let right = i >= half;
            if !right {
                if edge < prob(i, j) {
                    put(&mut w, i, j, fresh);
                }
                continue;
            }
            let mirrored = w.get(i - half, j - half);
            let present = if copy < spec.mirror {
                mirrored > 0.0
            } else {
                edge < prob(i, j)
            };
            if present {
                let v = if mirrored > 0.0 {
                    spec.mirror * mirrored + (1.0 - spec.mirror) * fresh
                } else {
                    fresh
                };
                put(&mut w, i, j, v);
            }
        }
    }
    Ok(Graph::from_adjacency(w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    EdgeDeletion,
    WeightDampening,
    BlockRewire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Block count of the layout the graph was generated with.
    pub blocks: usize,
    pub block: usize,
    pub severity: f64,
    pub seed: u64,
}

/// A graph with ground-truth perturbation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGraph {
    pub graph: Graph,
    /// Perturbed pairs `(i, j)` with `i < j`, ascending.
    pub edge_labels: Vec<(usize, usize)>,
    pub node_labels: Vec<bool>,
}

impl LabeledGraph {
    pub fn clean(graph: Graph) -> Self {
        let n = graph.n();
        Self {
            graph,
            edge_labels: Vec::new(),
            node_labels: vec![false; n],
        }
    }

    fn from_pairs(graph: Graph, pairs: BTreeSet<(usize, usize)>) -> Self {
        let mut node_labels = vec![false; graph.n()];
        for &(i, j) in &pairs {
            node_labels[i] = true;
            node_labels[j] = true;
        }
        Self {
            graph,
            edge_labels: pairs.into_iter().collect(),
            node_labels,
        }
    }

    pub fn is_anomalous(&self) -> bool {
        !self.edge_labels.is_empty()
    }

    /// Symmetric 0/1 matrix of perturbed pairs.
    pub fn edge_label_matrix(&self) -> Tensor {
        let n = self.graph.n();
        let mut m = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edge_labels {
            m.set(i, j, 1.0);
            m.set(j, i, 1.0);
        }
        m
    }
}

/// Perturbs the target block's internal edges and records which pairs changed.
pub fn inject_anomaly(g: &Graph, a: &AnomalySpec) -> Result<LabeledGraph> {
    let n = g.n();
    if a.blocks == 0 || !n.is_multiple_of(2 * a.blocks) {
        return Err(SynthError::Anomaly(format!("{n} nodes cannot hold {} blocks", a.blocks)));
    }
    if a.block >= a.blocks {
        return Err(SynthError::Anomaly(format!("block {} out of range 0..{}", a.block, a.blocks)));
    }
    if !(a.severity > 0.0 && a.severity <= 1.0) {
        return Err(SynthError::Anomaly(format!("severity {} outside (0,1]", a.severity)));
    }
    let members = block_members(n, a.blocks, a.block);
    let mut present = Vec::new();
    let mut absent = Vec::new();
    for (x, &i) in members.iter().enumerate() {
        for &j in &members[x + 1..] {
            if g.weights().get(i, j) > 0.0 {
                present.push((i, j));
            } else {
                absent.push((i, j));
            }
        }
    }
    if present.is_empty() {
        return Err(SynthError::EmptyBlock(a.block));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut w = g.weights().clone();
    let set = |w: &mut Tensor, (i, j): (usize, usize), v: f64| {
        w.set(i, j, v);
        w.set(j, i, v);
    };
    let touched = (a.severity * present.len() as f64).ceil() as usize;
    let mut labels = BTreeSet::new();
    match a.kind {
        AnomalyKind::EdgeDeletion => {
            for k in index::sample(&mut rng, present.len(), touched) {
                set(&mut w, present[k], 0.0);
                labels.insert(present[k]);
            }
        }
        AnomalyKind::WeightDampening => {
            for &p in &present {
                let v = w.get(p.0, p.1) * (1.0 - a.severity);
                set(&mut w, p, v);
                labels.insert(p);
            }
        }
        AnomalyKind::BlockRewire => {
            let moved = touched.min(absent.len());
            let sources = index::sample(&mut rng, present.len(), moved).into_vec();
            let mut targets = absent.clone();
            targets.shuffle(&mut rng);
            for (s, t) in sources.into_iter().zip(targets) {
                let p = present[s];
                let v = w.get(p.0, p.1);
                set(&mut w, p, 0.0);
                set(&mut w, t, v);
                labels.insert(p);
                labels.insert(t);
            }
        }
    }
    Ok(LabeledGraph::from_pairs(Graph::from_adjacency(w)?, labels))
}

/// Anomaly template applied to the anomalous share of the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub connectome: ConnectomeSpec,
    pub train_count: usize,
    pub test_count: usize,
    pub anomaly_fraction: f64,
    pub anomaly_kind: AnomalyKind,
    pub severity: f64,
    /// Fixed target block; drawn per graph when absent.
    pub target_block: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            connectome: ConnectomeSpec::default(),
            train_count: 200,
            test_count: 20,
            anomaly_fraction: 0.5,
            anomaly_kind: AnomalyKind::WeightDampening,
            severity: 0.8,
            target_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub seed: u64,
    pub anomaly: Option<AnomalySpec>,
}

/// Everything needed to regenerate a dataset, plus the files written for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train_seeds: Vec<u64>,
    pub test: Vec<TestEntry>,
    #[serde(default)]
    pub files: Option<ManifestFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub train: Vec<String>,
    pub test: Vec<TestFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFiles {
    pub adjacency: String,
    pub edge_labels: String,
    pub node_labels: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Graph>,
    pub test: Vec<LabeledGraph>,
    pub manifest: Manifest,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Train graphs are clean; the first `round(fraction·test_count)` test
/// graphs carry one anomaly each. Train, test and anomaly seeds come from
/// disjoint streams of `seed`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.connectome.validate()?;
    if spec.train_count + spec.test_count == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&spec.anomaly_fraction) {
        return Err(SynthError::Anomaly(format!(
            "anomaly fraction {} outside [0,1]",
            spec.anomaly_fraction
        )));
    }
    if !(spec.severity > 0.0 && spec.severity <= 1.0) {
        return Err(SynthError::Anomaly(format!("severity {} outside (0,1]", spec.severity)));
    }
    let blocks = spec.connectome.blocks;
    if let Some(b) = spec.target_block {
        if b >= blocks {
            return Err(SynthError::Anomaly(format!("block {b} out of range 0..{blocks}")));
        }
    }
    let mut train_rng = stream(seed, 0);
    let mut test_rng = stream(seed, 1);
    let mut anomaly_rng = stream(seed, 2);
    let train_seeds = (0..spec.train_count).map(|_| train_rng.random()).collect();
    let anomalous = (spec.anomaly_fraction * spec.test_count as f64).round() as usize;
    let test = (0..spec.test_count)
        .map(|k| {
            let graph_seed = test_rng.random();
            let block = anomaly_rng.random_range(0..blocks);
            let anomaly_seed = anomaly_rng.random();
            TestEntry {
                seed: graph_seed,
                anomaly: (k < anomalous).then(|| AnomalySpec {
                    kind: spec.anomaly_kind,
                    blocks,
                    block: spec.target_block.unwrap_or(block),
                    severity: spec.severity,
                    seed: anomaly_seed,
                }),
            }
        })
        .collect();
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        train_seeds,
        test,
        files: None,
    };
    regenerate(&manifest)
}

/// Rebuilds a dataset from the seeds recorded in `manifest`.
pub fn regenerate(manifest: &Manifest) -> Result<Dataset> {
    use rayon::prelude::*;
    let spec = &manifest.spec.connectome;
    let train = manifest
        .train_seeds
        .par_iter()
        .map(|&s| generate_connectome(spec, s))
        .collect::<Result<Vec<_>>>()?;
    let test = manifest
        .test
        .par_iter()
        .map(|e| {
            let g = generate_connectome(spec, e.seed)?;
            match &e.anomaly {
                Some(a) => inject_anomaly(&g, a),
                None => Ok(LabeledGraph::clean(g)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        train,
        test,
        manifest: manifest.clone(),
    })
}

fn file_err(path: &Path, msg: impl ToString) -> SynthError {
    SynthError::File {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| file_err(path, e))
}

/// Writes graphs, labels and `manifest.json` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir.join("train")).map_err(|e| file_err(dir, e))?;
    fs::create_dir_all(dir.join("test")).map_err(|e| file_err(dir, e))?;
    let mut files = ManifestFiles {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (k, g) in dataset.train.iter().enumerate() {
        let rel = format!("train/graph_{k:04}.csv");
        save_graph(g, &dir.join(&rel), None)?;
        files.train.push(rel);
    }
    for (k, lg) in dataset.test.iter().enumerate() {
        let entry = TestFiles {
            adjacency: format!("test/graph_{k:04}.csv"),
            edge_labels: format!("test/graph_{k:04}_edges.csv"),
            node_labels: format!("test/graph_{k:04}_nodes.csv"),
        };
        save_graph(&lg.graph, &dir.join(&entry.adjacency), None)?;
        let mut edges = String::from("i,j\n");
        for (i, j) in &lg.edge_labels {
            edges.push_str(&format!("{i},{j}\n"));
        }
        write_text(&dir.join(&entry.edge_labels), &edges)?;
        let nodes: String = lg
            .node_labels
            .iter()
            .map(|&b| if b { "1\n" } else { "0\n" })
            .collect();
        write_text(&dir.join(&entry.node_labels), &nodes)?;
        files.test.push(entry);
    }
    let mut manifest = dataset.manifest.clone();
    manifest.files = Some(files);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| file_err(dir, e))?;
    write_text(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

fn read_edge_labels(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut out = Vec::new();
    for (line, raw) in text.lines().enumerate().skip(1) {
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Vec<usize> = raw
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| file_err(path, format!("line {}: {e}", line + 1)))?;
        match parsed[..] {
            [i, j] if i < j && j < n => out.push((i, j)),
            _ => return Err(file_err(path, format!("line {}: bad pair {raw:?}", line + 1))),
        }
    }
    Ok(out)
}

/// Loads the files listed in a written dataset's manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest = read_manifest(&manifest_path)?;
    let files = manifest
        .files
        .clone()
        .ok_or_else(|| file_err(&manifest_path, "manifest lists no files"))?;
    let train = files
        .train
        .iter()
        .map(|p| load_graph(&dir.join(p), None))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let test = files
        .test
        .iter()
        .map(|e| {
            let graph = load_graph(&dir.join(&e.adjacency), None)?;
            let pairs = read_edge_labels(&dir.join(&e.edge_labels), graph.n())?;
            Ok(LabeledGraph::from_pairs(graph, pairs.into_iter().collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, test, manifest })
}
