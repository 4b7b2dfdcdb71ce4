//! Residual-based anomaly scores and ranking metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{complete_graph, CompletionConfig, CompletionError};
use crate::graph::{apply_mask, Graph, GraphError, PartialMask};
use crate::model::{GraphAutoencoder, ReconstructedGraph};
use crate::synth::LabeledGraph;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("need at least two nodes, got {0}")]
    TooSmall(usize),
    #[error("graph has {graph} nodes, reconstruction has {reconstruction}")]
    SizeMismatch { graph: usize, reconstruction: usize },
    #[error("mask fraction {0} outside [0,1)")]
    MaskFraction(f64),
    #[error("malformed metrics CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// How input weights are compared to edge probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// `|1[W > 0] − Ĝ|`.
    Binary,
    /// `|W̃ − Ĝ|` with `W̃` the off-diagonal weights min-max scaled to `[0, 1]`.
    Scaled,
}

/// Min-max scaling of the off-diagonal weights; a constant matrix maps to
/// its edge indicator.
pub fn min_max_scaled(w: &Tensor) -> Tensor {
    let n = w.rows();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(w.get(i, j));
                hi = hi.max(w.get(i, j));
            }
        }
    }
    let range = hi - lo;
    Tensor::from_fn(n, n, |i, j| {
        let v = w.get(i, j);
        if i == j {
            0.0
        } else if range > 0.0 {
            (v - lo) / range
        } else if v > 0.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Symmetric residual matrix with zero diagonal, entries in `[0, 1]`.
pub fn edge_anomaly_scores(g: &Graph, ghat: &ReconstructedGraph, variant: ScoreVariant) -> Result<Tensor> {
    if g.n() != ghat.n() {
        return Err(EvalError::SizeMismatch {
            graph: g.n(),
            reconstruction: ghat.n(),
        });
    }
    let reference = match variant {
        ScoreVariant::Binary => g.binarized(),
        ScoreVariant::Scaled => min_max_scaled(g.weights()),
    };
    let p = ghat.probs();
    Ok(Tensor::from_fn(g.n(), g.n(), |i, j| {
        if i == j {
            0.0
        } else {
            (reference.get(i, j) - p.get(i, j)).abs()
        }
    }))
}

/// Mean incident off-diagonal edge score per node.
pub fn node_anomaly_scores(edge_scores: &Tensor) -> Result<Vec<f64>> {
    let n = edge_scores.rows();
    if n < 2 {
        return Err(EvalError::TooSmall(n));
    }
    Ok((0..n)
        .map(|i| {
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| edge_scores.get(i, j)).sum();
            s / (n - 1) as f64
        })
        .collect())
}

/// Probability that a positive outranks a negative, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let mean_rank = (k + 1 + end) as f64 / 2.0;
        rank_sum += mean_rank * order[k..end].iter().filter(|&&i| labels[i]).count() as f64;
        k = end;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

fn optional_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    match roc_auc(scores, labels) {
        Ok(a) => Ok(Some(a)),
        Err(EvalError::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub completion: CompletionConfig,
    pub score: ScoreVariant,
    /// Share of off-diagonal pairs hidden for the recovery metric; `0` skips it.
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            completion: CompletionConfig::default(),
            score: ScoreVariant::Scaled,
            mask_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Metrics of one test graph; `None` where labels are single-class.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMetrics {
    pub graph_id: String,
    pub edge_auc: Option<f64>,
    pub node_auc: Option<f64>,
    pub masked_auc: Option<f64>,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub edge_auc: Option<f64>,
    pub node_auc: Option<f64>,
    pub masked_auc: Option<f64>,
    pub mean_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<GraphMetrics>,
    pub mean: AggregateRow,
    pub std: AggregateRow,
    pub fingerprint: String,
}

/// Mean and population standard deviation of the defined values, summed in
/// sorted order so the result does not depend on row order.
fn moments(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let mut v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return (None, None);
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (Some(mean), Some((dev.iter().sum::<f64>() / k).sqrt()))
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<GraphMetrics>, fingerprint: String) -> Self {
        let (e, es) = moments(rows.iter().map(|r| r.edge_auc));
        let (n, ns) = moments(rows.iter().map(|r| r.node_auc));
        let (m, ms) = moments(rows.iter().map(|r| r.masked_auc));
        let (r, rs) = moments(rows.iter().map(|r| Some(r.mean_residual)));
        Self {
            rows,
            mean: AggregateRow {
                edge_auc: e,
                node_auc: n,
                masked_auc: m,
                mean_residual: r,
            },
            std: AggregateRow {
                edge_auc: es,
                node_auc: ns,
                masked_auc: ms,
                mean_residual: rs,
            },
            fingerprint,
        }
    }

    /// Header, one row per graph, then `mean` and `std` rows. Undefined
    /// values print as `NA`; an empty report is the header alone.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::from("graph_id,edge_auc,node_auc,masked_auc,mean_residual\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.graph_id,
                f(r.edge_auc),
                f(r.node_auc),
                f(r.masked_auc),
                r.mean_residual
            ));
        }
        if !self.rows.is_empty() {
            for (name, a) in [("mean", &self.mean), ("std", &self.std)] {
                out.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    f(a.edge_auc),
                    f(a.node_auc),
                    f(a.masked_auc),
                    f(a.mean_residual)
                ));
            }
        }
        out
    }

    /// Parses [`MetricsReport::to_csv`] output. Aggregate rows are returned
    /// as written, not recomputed.
    pub fn from_csv(text: &str) -> Result<(Vec<GraphMetrics>, Option<AggregateRow>, Option<AggregateRow>)> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let num = |s: &str, line: usize| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| EvalError::Csv {
                    line,
                    msg: e.to_string(),
                })
            }
        };
        let mut rows = Vec::new();
        let (mut mean, mut std) = (None, None);
        for (k, rec) in reader.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| EvalError::Csv {
                line,
                msg: e.to_string(),
            })?;
            if rec.len() != 5 {
                return Err(EvalError::Csv {
                    line,
                    msg: format!("expected 5 fields, found {}", rec.len()),
                });
            }
            let agg = AggregateRow {
                edge_auc: num(&rec[1], line)?,
                node_auc: num(&rec[2], line)?,
                masked_auc: num(&rec[3], line)?,
                mean_residual: num(&rec[4], line)?,
            };
            match &rec[0] {
                "mean" => mean = Some(agg),
                "std" => std = Some(agg),
                id => rows.push(GraphMetrics {
                    graph_id: id.to_string(),
                    edge_auc: agg.edge_auc,
                    node_auc: agg.node_auc,
                    masked_auc: agg.masked_auc,
                    mean_residual: agg.mean_residual.ok_or(EvalError::Csv {
                        line,
                        msg: "mean_residual is NA".into(),
                    })?,
                }),
            }
        }
        Ok((rows, mean, std))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed derived from a graph's weights, so per-graph randomness does not
/// depend on the graph's position in the test set.
fn graph_seed(base: u64, g: &Graph) -> u64 {
    let mut bytes = base.to_le_bytes().to_vec();
    for v in g.weights().data() {
        bytes.extend(v.to_bits().to_le_bytes());
    }
    fnv1a(&bytes)
}

fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Full-mask completion residuals scored against the labels, plus recovery
/// AUC on a randomly hidden share of pairs.
pub fn evaluate_graph(
    model: &GraphAutoencoder,
    lg: &LabeledGraph,
    graph_id: String,
    cfg: &EvalConfig,
) -> Result<GraphMetrics> {
    let g = &lg.graph;
    let n = g.n();
    let seed = graph_seed(cfg.seed, g);
    let completion = CompletionConfig {
        seed,
        ..cfg.completion.clone()
    };
    let full = apply_mask(g, &PartialMask::full(n))?;
    let best = complete_graph(&full, model, &completion)?.candidates.swap_remove(0);
    let scores = edge_anomaly_scores(g, &best.graph, cfg.score)?;
    let labels = lg.edge_label_matrix();
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (i, j) in upper_pairs(n) {
        s.push(scores.get(i, j));
        l.push(labels.get(i, j) > 0.0);
    }
    let edge_auc = optional_auc(&s, &l)?;
    let mean_residual = s.iter().sum::<f64>() / s.len() as f64;
    let node_auc = optional_auc(&node_anomaly_scores(&scores)?, &lg.node_labels)?;

    let masked_auc = if cfg.mask_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = PartialMask::random_hidden(n, cfg.mask_fraction, &mut rng);
        let pg = apply_mask(g, &mask)?;
        let best = complete_graph(&pg, model, &completion)?.candidates.swap_remove(0);
        masked_recovery_auc(g, &mask, best.graph.probs())?
    } else {
        None
    };
    Ok(GraphMetrics {
        graph_id,
        edge_auc,
        node_auc,
        masked_auc,
        mean_residual,
    })
}

/// AUC of `predicted` at the hidden pairs against the true edge indicator.
pub fn masked_recovery_auc(g: &Graph, mask: &PartialMask, predicted: &Tensor) -> Result<Option<f64>> {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (i, j) in mask.hidden_pairs() {
        s.push(predicted.get(i, j));
        l.push(g.weights().get(i, j) > 0.0);
    }
    optional_auc(&s, &l)
}

/// Evaluates every test graph in parallel; row `k` is labeled `k`.
pub fn evaluate_run(model: &GraphAutoencoder, test: &[LabeledGraph], cfg: &EvalConfig) -> Result<MetricsReport> {
    if !(0.0..1.0).contains(&cfg.mask_fraction) {
        return Err(EvalError::MaskFraction(cfg.mask_fraction));
    }
    let rows = test
        .par_iter()
        .enumerate()
        .map(|(k, lg)| evaluate_graph(model, lg, k.to_string(), cfg))
        .collect::<Result<Vec<_>>>()?;
    let json = serde_json::to_string(cfg).expect("config serializes");
    Ok(MetricsReport::from_rows(rows, format!("{:016x}", fnv1a(json.as_bytes()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass)));
        assert!(matches!(roc_auc(&[0.1], &[true, false]), Err(EvalError::LengthMismatch { .. })));
    }

    fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
        let (mut win, mut total) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    total += 1.0;
                    win += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        win / total
    }

    proptest! {
        #[test]
        fn auc_properties(raw in proptest::collection::vec((0u8..6, proptest::bool::ANY), 2..40)) {
            let s: Vec<f64> = raw.iter().map(|(v, _)| *v as f64 / 5.0).collect();
            let l: Vec<bool> = raw.iter().map(|(_, b)| *b).collect();
            prop_assume!(l.iter().any(|&b| b) && l.iter().any(|&b| !b));
            let a = roc_auc(&s, &l).unwrap();
            prop_assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((a + roc_auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
            prop_assert!((a - roc_auc(&mono, &l).unwrap()).abs() < 1e-12);
        }
    }

    fn triangle() -> Graph {
        let w = Tensor::from_rows(&[vec![0.0, 2.0, 0.0], vec![2.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        Graph::from_adjacency(w).unwrap()
    }

    #[test]
    fn edge_scores() {
        let g = triangle();
        let exact = ReconstructedGraph::from_probs(g.binarized());
        let s = edge_anomaly_scores(&g, &exact, ScoreVariant::Binary).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let scaled = ReconstructedGraph::from_probs(min_max_scaled(g.weights()));
        let s = edge_anomaly_scores(&g, &scaled, ScoreVariant::Scaled).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let half = ReconstructedGraph::from_probs(Tensor::filled(&[3, 3], 0.5));
        for v in [ScoreVariant::Binary, ScoreVariant::Scaled] {
            let s = edge_anomaly_scores(&g, &half, v).unwrap();
            assert!(s.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert_eq!(s, s.transpose());
        }
        assert_eq!(min_max_scaled(g.weights()).get(0, 1), 1.0);
        assert_eq!(min_max_scaled(g.weights()).get(1, 2), 0.5);
    }

    #[test]
    fn node_scores() {
        assert_eq!(node_anomaly_scores(&Tensor::zeros(&[4, 4])).unwrap(), vec![0.0; 4]);
        let mut e = Tensor::zeros(&[4, 4]);
        e.set(1, 3, 0.6);
        e.set(3, 1, 0.6);
        let s = node_anomaly_scores(&e).unwrap();
        assert_eq!(s.iter().map(|&v| v > 0.0).collect::<Vec<_>>(), vec![false, true, false, true]);
        let c = Tensor::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 0.3 });
        for v in node_anomaly_scores(&c).unwrap() {
            assert!((v - 0.3).abs() < 1e-15);
        }
        assert!(matches!(node_anomaly_scores(&Tensor::zeros(&[1, 1])), Err(EvalError::TooSmall(1))));
    }

    fn row(id: &str, e: Option<f64>, n: Option<f64>, r: f64) -> GraphMetrics {
        GraphMetrics {
            graph_id: id.into(),
            edge_auc: e,
            node_auc: n,
            masked_auc: None,
            mean_residual: r,
        }
    }

    #[test]
    fn report_csv_round_trip() {
        let rows = vec![
            row("0", Some(0.9), Some(0.8), 0.1),
            row("1", None, None, 0.3),
            row("2", Some(0.7), Some(1.0 / 3.0), 0.2),
        ];
        let rep = MetricsReport::from_rows(rows.clone(), "x".into());
        assert_eq!(rep.mean.edge_auc, Some(0.8));
        assert_eq!(rep.mean.masked_auc, None);
        let csv = rep.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("1,NA,NA,NA,"));
        let (back, mean, std) = MetricsReport::from_csv(&csv).unwrap();
        assert_eq!(back, rows);
        assert_eq!(mean.unwrap(), rep.mean);
        assert_eq!(std.unwrap(), rep.std);
        assert_eq!(MetricsReport::from_rows(back, "x".into()), rep);

        let mut shuffled = rows;
        shuffled.reverse();
        let other = MetricsReport::from_rows(shuffled, "x".into());
        assert_eq!((other.mean, other.std), (rep.mean.clone(), rep.std.clone()));

        let empty = MetricsReport::from_rows(Vec::new(), "x".into());
        assert_eq!(empty.to_csv(), "graph_id,edge_auc,node_auc,masked_auc,mean_residual\n");
    }
}
