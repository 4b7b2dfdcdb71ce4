//! Partial-graph completion by latent search.
//!
//! For a partially observed graph the search alternates between a soft node
//! correspondence `p` (Sinkhorn-projected), a Gaussian-RBF deformation `ζ`
//! of the observed node signatures, and gradient steps on the latent matrix
//! `z` against the observed entries plus the matching cost
//! `j(p, ζ) = Σ_ij p_ij ‖v̂_j − ζ(v_i)‖² + λ_ζ Σ_c ‖w_c‖²`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{connectivity_profile, PartialGraph};
use crate::model::{
    cross_entropy_from_logits, decoder_logits, DecoderVars, GraphAutoencoder, GraphVars, ModelError,
    PreparedGraph, ReconstructedGraph,
};
use crate::tensor::{AdamState, Tape, Tensor, TensorError, Var};

const COST_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("matrix entry ({i},{j}) = {v} is not strictly positive")]
    NonPositive { i: usize, j: usize, v: f64 },
    #[error("ridge weight must be positive, got {0}")]
    Ridge(f64),
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("signature shapes disagree: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("invalid completion config: {0}")]
    Config(String),
    #[error("non-finite objective in round {0}")]
    NonFinite(usize),
    #[error("every restart failed; last error: {0}")]
    AllRestartsFailed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CompletionError>;

/// Nonnegative square matrix with unit row and column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix(Tensor);

impl CorrespondenceMatrix {
    pub fn identity(n: usize) -> Self {
        Self(Tensor::identity(n))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub correspondence: CorrespondenceMatrix,
    pub iterations: usize,
    pub converged: bool,
}

fn marginal_error(m: &Tensor) -> f64 {
    let n = m.rows();
    let mut worst: f64 = 0.0;
    let mut cols = vec![0.0; m.cols()];
    for i in 0..n {
        let row = m.row(i);
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    cols.iter().fold(worst, |w, c| w.max((c - 1.0).abs()))
}

/// Alternating row/column normalization until every marginal is within
/// `tol` of one.
pub fn sinkhorn_project(m: &Tensor, max_iters: usize, tol: f64) -> Result<SinkhornResult> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows != cols {
        return Err(CompletionError::Shape(vec![rows, cols], vec![cols, rows]));
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = m.get(i, j);
            if !(v > 0.0 && v.is_finite()) {
                return Err(CompletionError::NonPositive { i, j, v });
            }
        }
    }
    let mut p = m.clone();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        for i in 0..rows {
            let s: f64 = p.row(i).iter().sum();
            p.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let mut col = vec![0.0; cols];
        for i in 0..rows {
            for (c, v) in col.iter_mut().zip(p.row(i)) {
                *c += v;
            }
        }
        for i in 0..rows {
            for (v, c) in p.row_mut(i).iter_mut().zip(&col) {
                *v /= c;
            }
        }
        if marginal_error(&p) < tol {
            return Ok(SinkhornResult {
                correspondence: CorrespondenceMatrix(p),
                iterations,
                converged: true,
            });
        }
    }
    Ok(SinkhornResult {
        correspondence: CorrespondenceMatrix(p),
        iterations,
        converged: false,
    })
}

/// `ζ(v) = v + Σ_c w_c · exp(−‖v − center_c‖² / 2σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfTransform {
    pub centers: Tensor,
    pub coefficients: Tensor,
    pub sigma: f64,
    pub ridge: f64,
}

impl RbfTransform {
    pub fn identity(centers: Tensor, sigma: f64, ridge: f64) -> Self {
        let coefficients = Tensor::zeros(&[centers.rows(), centers.cols()]);
        Self {
            centers,
            coefficients,
            sigma,
            ridge,
        }
    }

    /// Gaussian kernel between the rows of `v` and the centers.
    pub fn kernel(&self, v: &Tensor) -> Tensor {
        gaussian_kernel(v, &self.centers, self.sigma)
    }

    pub fn apply(&self, v: &Tensor) -> Tensor {
        let shift = self.kernel(v).matmul(&self.coefficients);
        Tensor::from_fn(v.rows(), v.cols(), |i, j| v.get(i, j) + shift.get(i, j))
    }

    /// `λ_ζ · Σ_c ‖w_c‖²`.
    pub fn penalty(&self) -> f64 {
        self.ridge * self.coefficients.data().iter().map(|w| w * w).sum::<f64>()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn gaussian_kernel(a: &Tensor, b: &Tensor, sigma: f64) -> Tensor {
    let denom = 2.0 * sigma * sigma;
    Tensor::from_fn(a.rows(), b.rows(), |i, j| (-squared_distance(a.row(i), b.row(j)) / denom).exp())
}

/// Median of the pairwise row distances; `1` when that median is zero.
pub fn median_bandwidth(v: &Tensor) -> f64 {
    let mut d = Vec::new();
    for i in 0..v.rows() {
        for j in i + 1..v.rows() {
            d.push(squared_distance(v.row(i), v.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    let m = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CompletionError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Exact minimizer of `Σ_ij p_ij ‖t_j − ζ(v_i)‖² + λ Σ_c ‖w_c‖²` with the
/// centers fixed at the source rows. With `R = diag(p·1)` the normal
/// equations are `(K R K + λI) W = K (pT − R V)`.
pub fn rbf_fit(
    source: &Tensor,
    target: &Tensor,
    p: &CorrespondenceMatrix,
    sigma: f64,
    ridge: f64,
) -> Result<RbfTransform> {
    check_same(source, target)?;
    if p.n() != source.rows() {
        return Err(CompletionError::Shape(vec![p.n(), p.n()], source.shape().to_vec()));
    }
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(CompletionError::Ridge(ridge));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CompletionError::Bandwidth(sigma));
    }
    let n = source.rows();
    let k = to_dmatrix(&gaussian_kernel(source, source, sigma));
    let pm = to_dmatrix(p.matrix());
    let r = DMatrix::from_diagonal(&pm.column_sum());
    let v = to_dmatrix(source);
    let t = to_dmatrix(target);
    let lhs = &k * &r * &k + DMatrix::identity(n, n) * ridge;
    let rhs = &k * (&pm * &t - &r * &v);
    let w = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => lhs
            .lu()
            .solve(&rhs)
            .ok_or(CompletionError::Ridge(ridge))?,
    };
    Ok(RbfTransform {
        centers: source.clone(),
        coefficients: from_dmatrix(&w),
        sigma,
        ridge,
    })
}

/// Squared-distance cost `C_ij = ‖a_i − b_j‖²`.
pub fn pairwise_cost(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), b.rows(), |i, j| squared_distance(a.row(i), b.row(j)))
}

/// `Σ_ij p_ij ‖target_j − ζ(source_i)‖² + ζ.penalty()`.
pub fn matching_objective(
    p: &CorrespondenceMatrix,
    zeta: &RbfTransform,
    source: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    check_same(source, target)?;
    let moved = zeta.apply(source);
    let cost = pairwise_cost(&moved, target);
    let data: f64 = p.matrix().data().iter().zip(cost.data()).map(|(a, b)| a * b).sum();
    Ok(data + zeta.penalty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub restarts: usize,
    pub candidates: usize,
    pub max_rounds: usize,
    pub tolerance: f64,
    pub latent_steps: usize,
    pub latent_lr: f64,
    /// Weight of the matching cost in the latent objective.
    pub matching_weight: f64,
    pub ridge: f64,
    /// Fixed RBF bandwidth; median heuristic when absent.
    pub bandwidth: Option<f64>,
    /// Sinkhorn temperature as a multiple of the mean cost.
    pub temperature_scale: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    /// Standard deviation of the latent perturbation for restarts after the first.
    pub init_jitter: f64,
    pub dedup_distance: f64,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            candidates: 2,
            max_rounds: 100,
            tolerance: 1e-5,
            latent_steps: 20,
            latent_lr: 0.02,
            matching_weight: 0.05,
            ridge: 0.1,
            bandwidth: None,
            temperature_scale: 0.1,
            sinkhorn_iters: 2000,
            sinkhorn_tol: 1e-9,
            init_jitter: 0.1,
            dedup_distance: 1e-3,
            seed: 0,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CompletionError::Config(m.to_string()));
        if self.restarts == 0 || self.candidates == 0 {
            return bad("restarts and candidates must be positive");
        }
        if self.candidates > self.restarts {
            return bad("candidates cannot exceed restarts");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive");
        }
        if !(self.latent_lr > 0.0) || !(self.matching_weight >= 0.0) || !(self.temperature_scale > 0.0) {
            return bad("latent_lr and temperature_scale must be positive, matching_weight non-negative");
        }
        if !(self.ridge > 0.0) {
            return bad("ridge must be positive");
        }
        if let Some(s) = self.bandwidth {
            if !(s > 0.0) {
                return bad("bandwidth must be positive");
            }
        }
        if !(self.init_jitter >= 0.0) {
            return bad("init_jitter must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCandidate {
    pub z: Tensor,
    pub objective: f64,
    pub restart: usize,
}

/// One alternation round: matching cost around the `ζ` fit, then the
/// latent objective after the `z` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub matching_before_fit: f64,
    pub matching_after_fit: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct AlternatingOutcome {
    pub candidate: LatentCandidate,
    pub correspondence: CorrespondenceMatrix,
    pub transform: RbfTransform,
    /// Masked reconstruction loss of the returned latent.
    pub masked_loss: f64,
    pub trace: Vec<RoundRecord>,
}

fn unit_rows(z: &mut Tensor) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.iter_mut().enumerate().for_each(|(k, v)| *v = if k == 0 { 1.0 } else { 0.0 });
        }
    }
}

/// Latent encoding of the zero-filled graph, using observed profiles as features.
pub fn initial_latent(pg: &PartialGraph, model: &GraphAutoencoder) -> Result<Tensor> {
    Ok(model.encode_inputs(pg.graph().weights(), &pg.observed_profiles())?.mean)
}

/// Latent objective recorded once and re-evaluated as `z`, `p` and `ζ` change.
struct LatentProblem {
    tape: Tape,
    z: Var,
    bce: Var,
    data: Var,
    loss: Var,
    probs: Var,
    moved: Var,
    weights: Var,
    col_sums: Var,
}

impl LatentProblem {
    fn build(model: &GraphAutoencoder, prepared: &PreparedGraph, z0: &Tensor, d: usize, eta: f64) -> Self {
        let n = prepared.n;
        let mut tape = Tape::new();
        let z = tape.leaf(z0.clone());
        let dv = DecoderVars::bind(&mut tape, &model.decoder);
        let gv = GraphVars::bind(&mut tape, prepared);
        let logits = decoder_logits(&mut tape, dv, z, model.latent_dim(), gv.ones_col, gv.ones_row);
        let bce = cross_entropy_from_logits(&mut tape, logits, &gv, prepared.observed_count);
        let sig = tape.logistic(logits);
        let probs = tape.hadamard(sig, gv.off_diagonal);
        let target = tape.row_normalize(probs);
        // Σ_ij p_ij ‖t_j − s_i‖² minus the z-independent Σ_i r_i‖s_i‖²
        let moved = tape.constant(Tensor::zeros(&[n, d]));
        let weights = tape.constant(Tensor::zeros(&[n, n]));
        let col_sums = tape.constant(Tensor::zeros(&[1, n]));
        let t2 = tape.hadamard(target, target);
        let ct = tape.matmul(col_sums, t2);
        let target_term = tape.sum(ct);
        let tt = tape.transpose(target);
        let cross = tape.matmul(moved, tt);
        let pc = tape.hadamard(weights, cross);
        let pcs = tape.sum(pc);
        let cross_term = tape.scale(pcs, -2.0);
        let data = tape.add(target_term, cross_term);
        let weighted = tape.scale(data, eta);
        let loss = tape.add(bce, weighted);
        Self {
            tape,
            z,
            bce,
            data,
            loss,
            probs,
            moved,
            weights,
            col_sums,
        }
    }

    fn set_matching(&mut self, p: &CorrespondenceMatrix, moved: &Tensor) -> Result<()> {
        let n = p.n();
        let cols = Tensor::from_fn(1, n, |_, j| (0..n).map(|i| p.matrix().get(i, j)).sum());
        self.tape.set_leaf(self.weights, p.matrix().clone())?;
        self.tape.set_leaf(self.moved, moved.clone())?;
        self.tape.set_leaf(self.col_sums, cols)?;
        Ok(())
    }

    fn probs_at(&mut self, z: &Tensor) -> Result<Tensor> {
        self.tape.set_leaf(self.z, z.clone())?;
        Ok(self.tape.evaluate(self.probs)?)
    }

    fn gradient(&mut self, z: &Tensor) -> Result<Tensor> {
        self.tape.set_leaf(self.z, z.clone())?;
        Ok(self.tape.gradient(self.loss, &[self.z])?.remove(0))
    }

    /// Masked cross-entropy and the z-dependent part of the matching cost.
    fn values(&mut self, z: &Tensor) -> Result<(f64, f64)> {
        self.tape.set_leaf(self.z, z.clone())?;
        let bce = self.tape.evaluate(self.bce)?.item();
        let data = self.tape.evaluate(self.data)?.item();
        Ok((bce, data))
    }
}

/// Alternating `(p, ζ)` / `z` minimization from `z0`.
pub fn alternating_minimize(
    pg: &PartialGraph,
    model: &GraphAutoencoder,
    cfg: &CompletionConfig,
    z0: &Tensor,
    restart: usize,
) -> Result<AlternatingOutcome> {
    let n = pg.graph().n();
    let prepared = PreparedGraph::new(pg.graph(), Some(pg.mask()))?;
    let source = pg.observed_profiles();
    let d = source.cols();
    let sigma = cfg.bandwidth.unwrap_or_else(|| median_bandwidth(&source));
    let mut z = z0.clone();
    unit_rows(&mut z);
    let mut zeta = RbfTransform::identity(source.clone(), sigma, cfg.ridge);
    let mut problem = LatentProblem::build(model, &prepared, &z, d, cfg.matching_weight);
    let mut trace = Vec::new();
    let mut best: Option<(f64, Tensor, CorrespondenceMatrix, RbfTransform)> = None;
    let mut previous: Option<f64> = None;

    for round in 0..cfg.max_rounds {
        let ghat = problem.probs_at(&z)?;
        let target = connectivity_profile(&ghat);
        let moved = zeta.apply(&source);
        let cost = pairwise_cost(&moved, &target);
        let tau = (cfg.temperature_scale * cost.data().iter().sum::<f64>() / (n * n) as f64).max(COST_FLOOR);
        let kernel = cost.map(|c| (-c / tau).exp() + COST_FLOOR);
        let p = sinkhorn_project(&kernel, cfg.sinkhorn_iters, cfg.sinkhorn_tol)?.correspondence;
        let before = matching_objective(&p, &zeta, &source, &target)?;
        zeta = rbf_fit(&source, &target, &p, sigma, cfg.ridge)?;
        let after = matching_objective(&p, &zeta, &source, &target)?;

        let moved = zeta.apply(&source);
        problem.set_matching(&p, &moved)?;
        let source_term: f64 = (0..n)
            .map(|i| {
                let r: f64 = p.matrix().row(i).iter().sum();
                r * moved.row(i).iter().map(|v| v * v).sum::<f64>()
            })
            .sum();
        let mut adam = AdamState::new(cfg.latent_lr);
        for _ in 0..cfg.latent_steps {
            let grad = problem.gradient(&z)?;
            adam.step(&mut [&mut z], &[grad])?;
            unit_rows(&mut z);
        }
        let (bce, data) = problem.values(&z)?;
        let objective = bce + cfg.matching_weight * (data + source_term + zeta.penalty());
        if !objective.is_finite() {
            return Err(CompletionError::NonFinite(round));
        }
        trace.push(RoundRecord {
            matching_before_fit: before,
            matching_after_fit: after,
            objective,
        });
        if best.as_ref().is_none_or(|b| objective < b.0) {
            best = Some((objective, z.clone(), p.clone(), zeta.clone()));
        }
        if let Some(prev) = previous {
            if (prev - objective).abs() / prev.abs().max(1e-12) < cfg.tolerance {
                break;
            }
        }
        previous = Some(objective);
    }
    let (objective, z, correspondence, transform) = best.expect("at least one round");
    let (masked_loss, _) = problem.values(&z)?;
    Ok(AlternatingOutcome {
        candidate: LatentCandidate {
            z,
            objective,
            restart,
        },
        correspondence,
        transform,
        masked_loss,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct CompletedCandidate {
    pub graph: ReconstructedGraph,
    pub latent: LatentCandidate,
    pub correspondence: CorrespondenceMatrix,
    pub transform: RbfTransform,
    pub objective: f64,
}

/// Candidates in ascending objective order.
#[derive(Debug, Clone)]
pub struct CompletionResult {
    pub candidates: Vec<CompletedCandidate>,
}

impl CompletionResult {
    pub fn best(&self) -> &CompletedCandidate {
        &self.candidates[0]
    }
}

/// Runs `cfg.restarts` searches (the encoded partial graph, then jittered
/// copies), drops near-duplicate completions and keeps the
/// `cfg.candidates` best.
pub fn complete_graph(pg: &PartialGraph, model: &GraphAutoencoder, cfg: &CompletionConfig) -> Result<CompletionResult> {
    cfg.validate()?;
    let base = initial_latent(pg, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.restarts).map(|_| rng.random()).collect();
    let outcomes: Vec<Result<AlternatingOutcome>> = seeds
        .par_iter()
        .enumerate()
        .map(|(restart, &seed)| {
            let mut z0 = base.clone();
            if restart > 0 && cfg.init_jitter > 0.0 {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                for v in z0.data_mut() {
                    *v += cfg.init_jitter * r.sample::<f64, _>(StandardNormal);
                }
            }
            alternating_minimize(pg, model, cfg, &z0, restart)
        })
        .collect();
    let mut ok = Vec::new();
    let mut last_error = None;
    for o in outcomes {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => last_error = Some(e.to_string()),
        }
    }
    if ok.is_empty() {
        return Err(CompletionError::AllRestartsFailed(last_error.unwrap_or_default()));
    }
    ok.sort_by(|a, b| {
        a.candidate
            .objective
            .total_cmp(&b.candidate.objective)
            .then(a.candidate.restart.cmp(&b.candidate.restart))
    });
    let mut candidates: Vec<CompletedCandidate> = Vec::new();
    for o in ok {
        let graph = model.decode(&o.candidate.z)?;
        let duplicate = candidates
            .iter()
            .any(|c| frobenius_distance(c.graph.probs(), graph.probs()) < cfg.dedup_distance);
        if duplicate {
            continue;
        }
        candidates.push(CompletedCandidate {
            graph,
            objective: o.candidate.objective,
            latent: o.candidate,
            correspondence: o.correspondence,
            transform: o.transform,
        });
        if candidates.len() == cfg.candidates {
            break;
        }
    }
    Ok(CompletionResult { candidates })
}

pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_mask, Graph, PartialMask};
    use crate::model::{reconstruction_loss, ReconstructionLoss};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn positive(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(n, n, |_, _| rng.random_range(0.01..5.0))
    }

    fn random(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sinkhorn_examples() {
        let one = sinkhorn_project(&Tensor::matrix(1, 1, vec![5.0]).unwrap(), 10, 1e-12).unwrap();
        assert_eq!(one.correspondence.matrix().data(), &[1.0]);

        // the limit keeps M11·M22/(M12·M21) = 2/3, so p11/(1 − p11) = √(2/3)
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = sinkhorn_project(&m, 10_000, 1e-14).unwrap();
        let p11 = 1.0 / (1.0 + (1.5f64).sqrt());
        let p = r.correspondence.matrix();
        assert!((p.get(0, 0) - p11).abs() < 1e-10);
        assert!((p.get(0, 1) - (1.0 - p11)).abs() < 1e-10);
        assert!((p.get(0, 0) - 0.44949).abs() < 1e-4);
        assert!((p.get(1, 0) - 0.55051).abs() < 1e-4);

        let ds = Tensor::from_rows(&[vec![0.25, 0.75], vec![0.75, 0.25]]).unwrap();
        let r = sinkhorn_project(&ds, 100, 1e-12).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.correspondence.matrix().max_abs_diff(&ds) < 1e-15);

        let mut bad = ds.clone();
        bad.set(0, 1, 0.0);
        assert!(matches!(
            sinkhorn_project(&bad, 10, 1e-9),
            Err(CompletionError::NonPositive { i: 0, j: 1, .. })
        ));
        let slow = sinkhorn_project(&positive(6, 1), 1, 1e-15).unwrap();
        assert!(!slow.converged);
    }

    #[test]
    fn identity_transform_is_exact() {
        let v = random(7, 3, 2);
        let z = RbfTransform::identity(random(5, 3, 3), 0.7, 0.1);
        assert_eq!(z.apply(&v), v);
        assert_eq!(z.penalty(), 0.0);
    }

    #[test]
    fn fit_with_nothing_to_deform() {
        let v = random(6, 3, 4);
        let p = CorrespondenceMatrix::identity(6);
        let z = rbf_fit(&v, &v, &p, 1.0, 0.1).unwrap();
        assert!(z.coefficients.data().iter().all(|w| w.abs() < 1e-12));
        let t = random(6, 3, 5);
        let heavy = rbf_fit(&v, &t, &p, 1.0, 1e12).unwrap();
        assert!(heavy.coefficients.data().iter().all(|w| w.abs() < 1e-9));
        assert!(matches!(rbf_fit(&v, &t, &p, 1.0, 0.0), Err(CompletionError::Ridge(_))));
    }

    #[test]
    fn fit_solves_normal_equations() {
        // the objective's gradient in the coefficients vanishes at the fit
        let (v, t) = (random(5, 3, 6), random(5, 3, 7));
        let p = sinkhorn_project(&positive(5, 8), 5000, 1e-12).unwrap().correspondence;
        let fit = rbf_fit(&v, &t, &p, 0.8, 0.05).unwrap();
        let base = matching_objective(&p, &fit, &v, &t).unwrap();
        for k in 0..15 {
            let mut bumped = fit.clone();
            bumped.coefficients.data_mut()[k] += 1e-4;
            let up = matching_objective(&p, &bumped, &v, &t).unwrap();
            bumped.coefficients.data_mut()[k] -= 2e-4;
            let down = matching_objective(&p, &bumped, &v, &t).unwrap();
            assert!(((up - down) / 2e-4).abs() < 1e-8);
            assert!(up >= base && down >= base);
        }
    }

    #[test]
    fn objective_examples() {
        let v = random(5, 4, 9);
        let perm = [2, 0, 4, 1, 3];
        let target = Tensor::from_fn(5, 4, |j, c| v.get(perm.iter().position(|&x| x == j).unwrap(), c));
        let p = CorrespondenceMatrix(Tensor::from_fn(5, 5, |i, j| if perm[i] == j { 1.0 } else { 0.0 }));
        let id = RbfTransform::identity(v.clone(), 1.0, 0.3);
        assert_eq!(matching_objective(&p, &id, &v, &target).unwrap(), 0.0);

        let (a, b) = (random(5, 4, 10), random(5, 4, 11));
        let q = sinkhorn_project(&positive(5, 12), 5000, 1e-12).unwrap().correspondence;
        let j1 = matching_objective(&q, &id, &a, &b).unwrap();
        let j2 = matching_objective(&q, &id, &a.map(|x| 2.0 * x), &b.map(|x| 2.0 * x)).unwrap();
        assert!((j2 - 4.0 * j1).abs() < 1e-12 * j2.abs().max(1.0));
    }

    #[test]
    fn bandwidth_heuristic() {
        let v = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(median_bandwidth(&v), 2.0);
        assert_eq!(median_bandwidth(&Tensor::zeros(&[3, 2])), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sinkhorn_marginals(seed in 0u64..10_000, n in 1usize..12) {
            let r = sinkhorn_project(&positive(n, seed), 5000, 1e-9).unwrap();
            prop_assert!(r.converged);
            prop_assert!(marginal_error(r.correspondence.matrix()) < 1e-9);
        }

        #[test]
        fn fit_never_worse_than_identity(seed in 0u64..10_000, ridge in 1e-3f64..10.0) {
            let (v, t) = (random(5, 3, seed), random(5, 3, seed + 1));
            let p = sinkhorn_project(&positive(5, seed + 2), 5000, 1e-12).unwrap().correspondence;
            let sigma = median_bandwidth(&v);
            let fit = rbf_fit(&v, &t, &p, sigma, ridge).unwrap();
            let zero = RbfTransform::identity(v.clone(), sigma, ridge);
            let j_fit = matching_objective(&p, &fit, &v, &t).unwrap();
            let j_zero = matching_objective(&p, &zero, &v, &t).unwrap();
            prop_assert!(j_fit <= j_zero + 1e-12);
            prop_assert!(j_fit >= 0.0);
        }
    }

    fn block_graph(seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                let p = if (i < 5) == (j < 5) { 0.9 } else { 0.05 };
                if rng.random::<f64>() < p {
                    w.set(i, j, 1.0);
                    w.set(j, i, 1.0);
                }
            }
        }
        Graph::from_adjacency(w).unwrap()
    }

    fn small_model() -> GraphAutoencoder {
        use crate::adversarial::{train, TrainConfig};
        let data: Vec<Graph> = (0..8).map(block_graph).collect();
        let cfg = TrainConfig {
            epochs: 40,
            latent_dim: 4,
            hidden_dim: 12,
            lambda2: 0.0,
            kappa: 0.0,
            generator_lr: 0.01,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&data, &cfg).unwrap().autoencoder
    }

    fn quick_cfg() -> CompletionConfig {
        CompletionConfig {
            restarts: 3,
            candidates: 2,
            max_rounds: 15,
            ..CompletionConfig::default()
        }
    }

    #[test]
    fn alternation_contracts() {
        let model = small_model();
        let g = block_graph(100);
        let pg = apply_mask(&g, &PartialMask::full(10)).unwrap();
        let z0 = initial_latent(&pg, &model).unwrap();
        let cfg = quick_cfg();
        let out = alternating_minimize(&pg, &model, &cfg, &z0, 0).unwrap();
        assert!(!out.trace.is_empty());
        let min = out.trace.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
        assert_eq!(out.candidate.objective, min);
        for r in &out.trace {
            assert!(r.objective.is_finite());
            assert!(r.matching_after_fit <= r.matching_before_fit + 1e-12);
        }
        for i in 0..10 {
            let norm: f64 = out.candidate.z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        // easy case: the search does not hurt plain reconstruction
        let plain = reconstruction_loss(&g, &model.reconstruct(&g).unwrap(), None, ReconstructionLoss::CrossEntropy)
            .unwrap();
        assert!(out.masked_loss <= 1.05 * plain, "{} vs {plain}", out.masked_loss);
        let again = alternating_minimize(&pg, &model, &cfg, &z0, 0).unwrap();
        assert_eq!(again.candidate, out.candidate);
    }

    #[test]
    fn search_contracts() {
        let model = small_model();
        let g = block_graph(101);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pg = apply_mask(&g, &PartialMask::random_hidden(10, 0.2, &mut rng)).unwrap();
        let res = complete_graph(&pg, &model, &quick_cfg()).unwrap();
        assert!(!res.candidates.is_empty() && res.candidates.len() <= 2);
        for w in res.candidates.windows(2) {
            assert!(w[0].objective <= w[1].objective);
        }

        let single = CompletionConfig {
            restarts: 1,
            candidates: 1,
            ..quick_cfg()
        };
        let res = complete_graph(&pg, &model, &single).unwrap();
        let z0 = initial_latent(&pg, &model).unwrap();
        let direct = alternating_minimize(&pg, &model, &single, &z0, 0).unwrap();
        assert_eq!(res.best().latent, direct.candidate);

        let clones = CompletionConfig {
            init_jitter: 0.0,
            ..quick_cfg()
        };
        assert_eq!(complete_graph(&pg, &model, &clones).unwrap().candidates.len(), 1);

        let bad = CompletionConfig {
            candidates: 4,
            ..quick_cfg()
        };
        assert!(matches!(complete_graph(&pg, &model, &bad), Err(CompletionError::Config(_))));
    }
}
