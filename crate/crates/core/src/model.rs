//! Graph autoencoder with hyperspherical per-node latents.
//!
//! The encoder stacks two polynomial adjacency filters
//! `H = h₀I + h₁A + h₂A²` (tanh between them) and projects each node's
//! output onto the unit sphere; those directions are the vMF means. The
//! decoder scores every node pair with a symmetric bilinear form,
//! `Ĝ_ij = σ(z_iᵀ B z_j + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{connectivity_profile, normalized_adjacency, Graph, GraphError, PartialMask};
use crate::tensor::{logistic, Tape, Tensor, TensorError, Var};
use crate::vmf::{kl_to_uniform, sample_pole, VmfError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vmf(#[from] VmfError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("mask leaves no observed off-diagonal entries")]
    EmptyMask,
    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which per-entry reconstruction penalty to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    /// Binary cross-entropy against the binarized adjacency.
    CrossEntropy,
    /// Squared error against the raw weights.
    Quadratic,
}

/// One polynomial filter: `V·h₀ + A·V·h₁ + A²·V·h₂ (+ 1·b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFilterLayer {
    pub taps: [Tensor; 3],
    pub bias: Option<Tensor>,
}

impl PolyFilterLayer {
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            taps: std::array::from_fn(|_| Tensor::zeros(&[d_in, d_out])),
            bias: bias.then(|| Tensor::zeros(&[1, d_out])),
        }
    }

    /// Glorot-uniform taps, zero bias.
    pub fn glorot<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let taps = std::array::from_fn(|_| {
            Tensor::from_fn(d_in, d_out, |_, _| rng.random_range(-limit..limit))
        });
        Self {
            taps,
            bias: bias.then(|| Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.taps[0].rows()
    }

    pub fn d_out(&self) -> usize {
        self.taps[0].cols()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.taps.iter_mut().collect();
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
        out
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.taps.iter().collect();
        if let Some(b) = self.bias.as_ref() {
            out.push(b);
        }
        out
    }
}

/// Tape handles for a [`PolyFilterLayer`].
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub taps: [Var; 3],
    pub bias: Option<Var>,
}

impl LayerVars {
    pub fn bind(tape: &mut Tape, layer: &PolyFilterLayer) -> Self {
        Self {
            taps: std::array::from_fn(|k| tape.leaf(layer.taps[k].clone())),
            bias: layer.bias.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.taps.to_vec();
        v.extend(self.bias);
        v
    }
}

/// Records the filter on the tape in Horner form,
/// `V h₀ + A(V h₁ + A(V h₂))`. `ones` is an `n×1` column of ones.
pub fn poly_filter(tape: &mut Tape, layer: &LayerVars, a: Var, v: Var, ones: Var) -> Var {
    let t2 = tape.matmul(v, layer.taps[2]);
    let p2 = tape.matmul(a, t2);
    let t1 = tape.matmul(v, layer.taps[1]);
    let inner = tape.add(t1, p2);
    let p1 = tape.matmul(a, inner);
    let t0 = tape.matmul(v, layer.taps[0]);
    let out = tape.add(t0, p1);
    match layer.bias {
        Some(b) => {
            let rows = tape.matmul(ones, b);
            tape.add(out, rows)
        }
        None => out,
    }
}

/// Applies a filter to concrete inputs.
pub fn poly_filter_forward(layer: &PolyFilterLayer, a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let lv = LayerVars::bind(&mut tape, layer);
    let av = tape.constant(a.clone());
    let vv = tape.constant(v.clone());
    let ones = tape.constant(Tensor::filled(&[v.rows(), 1], 1.0));
    let out = poly_filter(&mut tape, &lv, av, vv, ones);
    Ok(tape.evaluate(out)?)
}

/// Two stacked filters; the second outputs the latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: [PolyFilterLayer; 2],
}

impl EncoderParams {
    pub fn glorot<R: Rng + ?Sized>(d_in: usize, hidden: usize, latent: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                PolyFilterLayer::glorot(d_in, hidden, true, rng),
                PolyFilterLayer::glorot(hidden, latent, true, rng),
            ],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[1].d_out()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let [l0, l1] = &mut self.layers;
        let mut v = l0.params_mut();
        v.extend(l1.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(PolyFilterLayer::params).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: [LayerVars; 2],
}

impl EncoderVars {
    pub fn bind(tape: &mut Tape, enc: &EncoderParams) -> Self {
        Self {
            layers: [
                LayerVars::bind(tape, &enc.layers[0]),
                LayerVars::bind(tape, &enc.layers[1]),
            ],
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(LayerVars::vars).collect()
    }
}

/// Encoder forward pass; returns the unit-row mean directions `μ`.
pub fn encoder_forward(tape: &mut Tape, ev: &EncoderVars, a: Var, x: Var, ones: Var) -> Var {
    let h = poly_filter(tape, &ev.layers[0], a, x, ones);
    let h = tape.tanh(h);
    let m = poly_filter(tape, &ev.layers[1], a, h, ones);
    tape.row_normalize(m)
}

/// Symmetric bilinear edge decoder. The form is stored as its upper
/// triangle (row-major, diagonal included).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub form: Tensor,
    pub bias: Tensor,
}

impl DecoderParams {
    pub fn from_matrix(b: &Tensor, bias: f64) -> Self {
        let c = b.rows();
        let mut upper = Vec::with_capacity(c * (c + 1) / 2);
        for i in 0..c {
            for j in i..c {
                upper.push(b.get(i, j));
            }
        }
        Self {
            form: Tensor::matrix(1, upper.len(), upper).expect("finite form"),
            bias: Tensor::scalar(bias),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self::from_matrix(&Tensor::identity(c), 0.0)
    }

    pub fn latent_dim(&self) -> usize {
        // c(c+1)/2 = k
        let k = self.form.cols();
        (((8 * k + 1) as f64).sqrt() as usize - 1) / 2
    }

    pub fn form_matrix(&self) -> Tensor {
        let c = self.latent_dim();
        let mut out = Tensor::zeros(&[c, c]);
        let mut k = 0;
        for i in 0..c {
            for j in i..c {
                let v = self.form.data()[k];
                out.set(i, j, v);
                out.set(j, i, v);
                k += 1;
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.form, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.form, &self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub form: Var,
    pub bias: Var,
}

impl DecoderVars {
    pub fn bind(tape: &mut Tape, dec: &DecoderParams) -> Self {
        Self {
            form: tape.leaf(dec.form.clone()),
            bias: tape.leaf(dec.bias.clone()),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.form, self.bias]
    }
}

/// Pairwise logits `Z B Zᵀ + b`. `ones_col` is `n×1`, `ones_row` is `1×n`.
pub fn decoder_logits(
    tape: &mut Tape,
    dv: DecoderVars,
    z: Var,
    c: usize,
    ones_col: Var,
    ones_row: Var,
) -> Var {
    let b = tape.symmetric_from_upper(dv.form, c);
    let zb = tape.matmul(z, b);
    let zt = tape.transpose(z);
    let s = tape.matmul(zb, zt);
    let bc = tape.matmul(ones_col, dv.bias);
    let bm = tape.matmul(bc, ones_row);
    tape.add(s, bm)
}

/// Per-node vMF posterior: mean directions (rows) and a shared `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfPosterior {
    pub mean: Tensor,
    pub kappa: f64,
}

/// Symmetric matrix of edge probabilities with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedGraph {
    probs: Tensor,
}

impl ReconstructedGraph {
    /// Wraps a probability matrix, enforcing symmetry and a zero diagonal.
    pub fn from_probs(mut probs: Tensor) -> Self {
        let n = probs.rows();
        for i in 0..n {
            probs.set(i, i, 0.0);
            for j in i + 1..n {
                let v = probs.get(i, j);
                probs.set(j, i, v);
            }
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    /// Row-direction profiles used as node signatures.
    pub fn profiles(&self) -> Tensor {
        connectivity_profile(&self.probs)
    }
}

/// Loss components and their weights. `total` is always
/// `lr + lambda1·lp + lambda2·lgan`, evaluated in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lr: f64,
    pub lp: f64,
    pub lgan: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(lr: f64, lp: f64, lgan: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            lr,
            lp,
            lgan,
            lambda1,
            lambda2,
            total: lr + lambda1 * lp + lambda2 * lgan,
        }
    }
}

/// Constant tensors derived from one graph (and optional mask).
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub n: usize,
    pub adjacency: Tensor,
    pub features: Tensor,
    pub weights: Tensor,
    pub target: Tensor,
    pub observed: Tensor,
    pub observed_count: usize,
}

impl PreparedGraph {
    pub fn new(g: &Graph, mask: Option<&PartialMask>) -> Result<Self> {
        let n = g.n();
        let observed = match mask {
            Some(m) => {
                if m.n() != n {
                    return Err(ModelError::SizeMismatch {
                        expected: n,
                        found: m.n(),
                    });
                }
                m.observed_off_diagonal()
            }
            None => Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }),
        };
        let observed_count = observed.data().iter().filter(|&&v| v > 0.0).count();
        if observed_count == 0 {
            return Err(ModelError::EmptyMask);
        }
        Ok(Self {
            n,
            adjacency: normalized_adjacency(g.weights()),
            features: g.features().clone(),
            weights: g.weights().clone(),
            target: g.binarized(),
            observed,
            observed_count,
        })
    }
}

/// Handles for the constants of a [`PreparedGraph`] on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub adjacency: Var,
    pub features: Var,
    pub weights: Var,
    pub target: Var,
    pub observed: Var,
    pub off_diagonal: Var,
    pub ones_col: Var,
    pub ones_row: Var,
}

impl GraphVars {
    pub fn bind(tape: &mut Tape, p: &PreparedGraph) -> Self {
        let n = p.n;
        Self {
            adjacency: tape.constant(p.adjacency.clone()),
            features: tape.constant(p.features.clone()),
            weights: tape.constant(p.weights.clone()),
            target: tape.constant(p.target.clone()),
            observed: tape.constant(p.observed.clone()),
            off_diagonal: tape.constant(Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })),
            ones_col: tape.constant(Tensor::filled(&[n, 1], 1.0)),
            ones_row: tape.constant(Tensor::filled(&[1, n], 1.0)),
        }
    }
}

/// Masked mean of `softplus(ℓ) − yℓ`, i.e. binary cross-entropy from logits.
pub fn cross_entropy_from_logits(tape: &mut Tape, logits: Var, gv: &GraphVars, count: usize) -> Var {
    let sp = tape.softplus(logits);
    let yl = tape.hadamard(gv.target, logits);
    let per = tape.sub(sp, yl);
    let masked = tape.hadamard(per, gv.observed);
    let s = tape.sum(masked);
    tape.scale(s, 1.0 / count as f64)
}

/// Masked mean of `(Ĝ − W)²`.
pub fn quadratic_loss(tape: &mut Tape, probs: Var, gv: &GraphVars, count: usize) -> Var {
    let d = tape.sub(probs, gv.weights);
    let sq = tape.hadamard(d, d);
    let masked = tape.hadamard(sq, gv.observed);
    let s = tape.sum(masked);
    tape.scale(s, 1.0 / count as f64)
}

/// Encoder, decoder, and the fixed posterior concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAutoencoder {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub kappa: f64,
}

/// Handles for every autoencoder parameter on a tape.
#[derive(Debug, Clone)]
pub struct AutoencoderVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl AutoencoderVars {
    pub fn bind(tape: &mut Tape, m: &GraphAutoencoder) -> Self {
        Self {
            encoder: EncoderVars::bind(tape, &m.encoder),
            decoder: DecoderVars::bind(tape, &m.decoder),
        }
    }

    /// Same order as [`GraphAutoencoder::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }
}

/// Nodes of one recorded autoencoder pass.
#[derive(Debug, Clone, Copy)]
pub struct AutoencoderPass {
    pub mean: Var,
    pub latent: Var,
    pub logits: Var,
    pub probs: Var,
    pub lr: Var,
    pub lp: Var,
}

impl GraphAutoencoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, latent: usize, kappa: f64, rng: &mut R) -> Self {
        Self {
            encoder: EncoderParams::glorot(input_dim, hidden, latent, rng),
            decoder: DecoderParams::identity(latent),
            kappa,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    fn check_input(&self, g: &PreparedGraph) -> Result<()> {
        if g.features.cols() != self.encoder.input_dim() {
            return Err(ModelError::SizeMismatch {
                expected: self.encoder.input_dim(),
                found: g.features.cols(),
            });
        }
        Ok(())
    }

    /// Records encode → (optional reparameterized sample) → decode → losses.
    /// `noise` rows are pole samples from `vMF(e₀, κ)`.
    pub fn record(
        &self,
        tape: &mut Tape,
        vars: &AutoencoderVars,
        gv: &GraphVars,
        prepared: &PreparedGraph,
        noise: Option<&Tensor>,
        loss: ReconstructionLoss,
    ) -> Result<AutoencoderPass> {
        self.check_input(prepared)?;
        let c = self.latent_dim();
        let mean = encoder_forward(tape, &vars.encoder, gv.adjacency, gv.features, gv.ones_col);
        let latent = match noise {
            Some(w) => {
                let wv = tape.constant(w.clone());
                tape.householder(mean, wv)
            }
            None => mean,
        };
        let logits = decoder_logits(tape, vars.decoder, latent, c, gv.ones_col, gv.ones_row);
        let sig = tape.logistic(logits);
        let probs = tape.hadamard(sig, gv.off_diagonal);
        let lr = match loss {
            ReconstructionLoss::CrossEntropy => {
                cross_entropy_from_logits(tape, logits, gv, prepared.observed_count)
            }
            ReconstructionLoss::Quadratic => quadratic_loss(tape, probs, gv, prepared.observed_count),
        };
        let lp = tape.constant(Tensor::scalar(self.prior_loss(prepared.n)?));
        Ok(AutoencoderPass {
            mean,
            latent,
            logits,
            probs,
            lr,
            lp,
        })
    }

    /// `n · KL(vMF(·, κ) ‖ U(S^{c−1}))`; independent of every parameter.
    pub fn prior_loss(&self, n: usize) -> Result<f64> {
        Ok(n as f64 * kl_to_uniform(self.latent_dim(), self.kappa)?)
    }

    pub fn encode(&self, g: &Graph) -> Result<VmfPosterior> {
        self.encode_inputs(g.weights(), g.features())
    }

    /// Encodes from a raw weight matrix and features.
    pub fn encode_inputs(&self, weights: &Tensor, features: &Tensor) -> Result<VmfPosterior> {
        if features.cols() != self.encoder.input_dim() {
            return Err(ModelError::SizeMismatch {
                expected: self.encoder.input_dim(),
                found: features.cols(),
            });
        }
        let mut tape = Tape::new();
        let ev = EncoderVars::bind(&mut tape, &self.encoder);
        let a = tape.constant(normalized_adjacency(weights));
        let x = tape.constant(features.clone());
        let ones = tape.constant(Tensor::filled(&[weights.rows(), 1], 1.0));
        let mu = encoder_forward(&mut tape, &ev, a, x, ones);
        Ok(VmfPosterior {
            mean: tape.evaluate(mu)?,
            kappa: self.kappa,
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<ReconstructedGraph> {
        Ok(ReconstructedGraph::from_probs(decode_probs(&self.decoder, z)))
    }

    /// Decode of the posterior mean.
    pub fn reconstruct(&self, g: &Graph) -> Result<ReconstructedGraph> {
        self.decode(&self.encode(g)?.mean)
    }
}

/// `σ(z_iᵀ B z_j + b)` off the diagonal, `0` on it.
pub fn decode_probs(dec: &DecoderParams, z: &Tensor) -> Tensor {
    let b = dec.form_matrix();
    let s = z.matmul(&b).matmul(&z.transpose());
    let bias = dec.bias.item();
    let n = z.rows();
    Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { logistic(s.get(i, j) + bias) })
}

/// One pole sample per node, stacked as an `n×c` matrix.
pub fn sample_noise<R: Rng + ?Sized>(n: usize, c: usize, kappa: f64, rng: &mut R) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        data.extend(sample_pole(c, kappa, rng)?);
    }
    Ok(Tensor::matrix(n, c, data)?)
}

const PROB_CLAMP: f64 = 1e-12;

/// Masked mean reconstruction loss from probabilities.
pub fn reconstruction_loss(
    g: &Graph,
    ghat: &ReconstructedGraph,
    mask: Option<&PartialMask>,
    loss: ReconstructionLoss,
) -> Result<f64> {
    let n = g.n();
    if ghat.n() != n {
        return Err(ModelError::SizeMismatch {
            expected: n,
            found: ghat.n(),
        });
    }
    if let Some(m) = mask {
        if m.n() != n {
            return Err(ModelError::SizeMismatch {
                expected: n,
                found: m.n(),
            });
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j || mask.is_some_and(|m| !m.is_observed(i, j)) {
                continue;
            }
            let p = ghat.probs.get(i, j);
            let w = g.weights().get(i, j);
            total += match loss {
                ReconstructionLoss::CrossEntropy => {
                    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    if w > 0.0 {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                }
                ReconstructionLoss::Quadratic => (p - w) * (p - w),
            };
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Negative ELBO pieces for one graph: reconstruction from the decoded
/// posterior (sampled or mean) and `Lp = n·KL`. `Lgan` is zero.
pub fn elbo_loss<R: Rng + ?Sized>(
    g: &Graph,
    model: &GraphAutoencoder,
    sample_z: bool,
    loss: ReconstructionLoss,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let prepared = PreparedGraph::new(g, None)?;
    let mut tape = Tape::new();
    let vars = AutoencoderVars::bind(&mut tape, model);
    let gv = GraphVars::bind(&mut tape, &prepared);
    let noise = if sample_z {
        Some(sample_noise(g.n(), model.latent_dim(), model.kappa, rng)?)
    } else {
        None
    };
    let pass = model.record(&mut tape, &vars, &gv, &prepared, noise.as_ref(), loss)?;
    let lr = tape.evaluate(pass.lr)?.item();
    let lp = tape.evaluate(pass.lp)?.item();
    Ok(LossBreakdown::new(lr, lp, 0.0, 1.0, 0.0))
}

/// Gradient of the prior term with respect to every encoder parameter.
pub fn prior_gradient(g: &Graph, model: &GraphAutoencoder) -> Result<Vec<Tensor>> {
    let prepared = PreparedGraph::new(g, None)?;
    let mut tape = Tape::new();
    let vars = AutoencoderVars::bind(&mut tape, model);
    let gv = GraphVars::bind(&mut tape, &prepared);
    let pass = model.record(&mut tape, &vars, &gv, &prepared, None, ReconstructionLoss::CrossEntropy)?;
    Ok(tape.gradient(pass.lp, &vars.encoder.vars())?)
}
