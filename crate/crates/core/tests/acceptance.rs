//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture`. Failing
//! lines are reported without failing the test run unless
//! `ACCEPTANCE_STRICT=1` is set, in which case any failure exits nonzero.

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vmfgraph::adversarial::{discriminator_logit, train, DiscriminatorParams, DiscriminatorVars, TrainedModel};
use vmfgraph::checkpoint::Checkpoint;
use vmfgraph::completion::{complete_graph, sinkhorn_project};
use vmfgraph::config::RunConfig;
use vmfgraph::eval::{evaluate_run, roc_auc, EvalConfig, ScoreVariant};
use vmfgraph::graph::{apply_mask, permute, permute_rows, permute_square, Graph, PartialMask};
use vmfgraph::model::{AutoencoderVars, GraphAutoencoder, GraphVars, PreparedGraph, ReconstructionLoss};
use vmfgraph::synth::{generate_dataset, AnomalyKind, DatasetSpec};
use vmfgraph::tensor::{Tape, Tensor};
use vmfgraph::vmf::{bessel_ratio, kl_to_uniform, log_density, log_sphere_area, sample, VmfParams};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("[{}] {id:<28} {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                let v = rng.random_range(0.1..2.0);
                w.set(i, j, v);
                w.set(j, i, v);
            }
        }
    }
    Graph::from_adjacency(w).unwrap()
}

fn gradient_check(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 12;
    let g = random_graph(n, 0.35, &mut rng);
    let model = GraphAutoencoder::new(n, 16, 6, 20.0, &mut rng);
    let critic = DiscriminatorParams::glorot(n, 8, &mut rng);
    let prepared = PreparedGraph::new(&g, None).unwrap();

    let mut tape = Tape::new();
    let vars = AutoencoderVars::bind(&mut tape, &model);
    let gv = GraphVars::bind(&mut tape, &prepared);
    let pass = model
        .record(&mut tape, &vars, &gv, &prepared, None, ReconstructionLoss::CrossEntropy)
        .unwrap();
    let dv = DiscriminatorVars::bind(&mut tape, &critic);
    let fa = tape.max_row_sum_normalize(pass.probs);
    let fx = tape.row_normalize(pass.probs);
    let readout = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
    let logit = discriminator_logit(&mut tape, &dv, fa, fx, gv.ones_col, readout);
    let neg = tape.scale(logit, -1.0);
    let lgan = tape.softplus(neg);
    let weighted_gan = tape.scale(lgan, 0.1);
    let total = tape.add(pass.lr, pass.lp);
    let total = tape.add(total, weighted_gan);

    let mut worst: f64 = 0.0;
    for v in vars.vars() {
        worst = worst.max(tape.finite_difference_check(total, v, 1e-5).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "1 gradient check",
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} (< 1e-4), {secs:.2}s (< 10s)"),
    );
}

fn sampler_fidelity(r: &mut Report) {
    let (m, kappa, count) = (8, 10.0, 200_000);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mu: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let p = VmfParams::new(mu.clone(), kappa).unwrap();
    let mut acc = vec![0.0; m];
    for _ in 0..count {
        for (a, z) in acc.iter_mut().zip(sample(&p, &mut rng).unwrap()) {
            *a += z;
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a / count as f64).collect();
    let length = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let expected = bessel_ratio(m, kappa).unwrap();
    let rel = (length - expected).abs() / expected;
    let cos = mean.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>() / length;
    let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
    r.line(
        "2 vMF sampler",
        rel < 0.01 && angle < 0.5,
        format!("resultant {length:.5} vs {expected:.5} (rel {rel:.2e} < 1e-2), direction {angle:.3} deg (< 0.5)"),
    );

    let worst = [0.5f64, 1.0, 2.0, 10.0]
        .iter()
        .map(|&k| (bessel_ratio(3, k).unwrap() - (1.0 / k.tanh() - 1.0 / k)).abs())
        .fold(0.0f64, f64::max);
    r.line(
        "2 Bessel ratio closed form",
        worst < 1e-10,
        format!("max |A_3 - (coth k - 1/k)| {worst:.2e} (< 1e-10)"),
    );
}

fn kl_monte_carlo(r: &mut Report) {
    let (m, kappa, count) = (8, 10.0, 1_000_000);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mu = vec![0.0; m];
    mu[3] = 1.0;
    let p = VmfParams::new(mu, kappa).unwrap();
    let log_uniform = -log_sphere_area(m);
    let mut total = 0.0;
    for _ in 0..count {
        let z = sample(&p, &mut rng).unwrap();
        total += log_density(&z, &p).unwrap() - log_uniform;
    }
    let estimate = total / count as f64;
    let exact = kl_to_uniform(m, kappa).unwrap();
    let rel = (estimate - exact).abs() / exact;
    r.line(
        "3 KL Monte Carlo",
        rel < 0.005,
        format!("estimate {estimate:.5} vs {exact:.5} (rel {rel:.2e} < 5e-3)"),
    );
}

fn sinkhorn(r: &mut Report) {
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let res = sinkhorn_project(&m, 10_000, 1e-12).unwrap();
    // the limit keeps the cross ratio p00 p11 / (p01 p10) = 4/6
    let s = (4.0f64 / 6.0).sqrt();
    let a = s / (1.0 + s);
    let oracle = Tensor::from_rows(&[vec![a, 1.0 - a], vec![1.0 - a, a]]).unwrap();
    let err = res.correspondence.matrix().max_abs_diff(&oracle);
    r.line("4 Sinkhorn 2x2 oracle", err < 1e-4, format!("max deviation {err:.2e} (< 1e-4)"));

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_iters, mut worst_marginal, mut all_converged) = (0, 0.0f64, true);
    for _ in 0..20 {
        let m = Tensor::from_fn(20, 20, |_, _| rng.random_range(0.01..10.0));
        let res = sinkhorn_project(&m, 5000, 1e-9).unwrap();
        all_converged &= res.converged;
        worst_iters = worst_iters.max(res.iterations);
        let p = res.correspondence.matrix();
        for i in 0..20 {
            let row: f64 = (0..20).map(|j| p.get(i, j)).sum();
            let col: f64 = (0..20).map(|j| p.get(j, i)).sum();
            worst_marginal = worst_marginal.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
    }
    r.line(
        "4 Sinkhorn random 20x20",
        all_converged && worst_iters <= 5000 && worst_marginal <= 1e-9,
        format!("max iterations {worst_iters} (<= 5000), max marginal error {worst_marginal:.2e} (<= 1e-9)"),
    );
}

fn equivariance(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut enc_worst, mut full_worst) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(6..24);
        let g = random_graph(n, 0.3, &mut rng);
        let model = GraphAutoencoder::new(n, 12, 5, 15.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = permute(&g, &perm).unwrap();
        let base = model.encode(&g).unwrap().mean;
        let moved = model.encode(&pg).unwrap().mean;
        enc_worst = enc_worst.max(moved.max_abs_diff(&permute_rows(&base, &perm)));
        let recon = model.reconstruct(&g).unwrap();
        let recon_moved = model.reconstruct(&pg).unwrap();
        full_worst = full_worst.max(recon_moved.probs().max_abs_diff(&permute_square(recon.probs(), &perm)));
    }
    r.line(
        "5 permutation equivariance",
        enc_worst < 1e-9 && full_worst < 1e-9,
        format!("encoder {enc_worst:.2e}, encode-decode {full_worst:.2e} (< 1e-9, 50 pairs)"),
    );
}

fn edge_auc(model: &GraphAutoencoder, graphs: &[Graph]) -> f64 {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for g in graphs {
        let probs = model.reconstruct(g).unwrap();
        for i in 0..g.n() {
            for j in i + 1..g.n() {
                scores.push(probs.probs().get(i, j));
                labels.push(g.weights().get(i, j) > 0.0);
            }
        }
    }
    roc_auc(&scores, &labels).unwrap()
}

fn training(r: &mut Report, cfg: &RunConfig) -> TrainedModel {
    let data = generate_dataset(
        &DatasetSpec {
            anomaly_fraction: 0.0,
            ..cfg.dataset_spec()
        },
        cfg.data_seed,
    )
    .unwrap();
    let start = Instant::now();
    let trained = train(&data.train, &cfg.train_config()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let records = &trained.history.records;
    let (first, last) = (&records[0].loss, &records[records.len() - 1].loss);
    r.line(
        "6 training loss halves",
        last.total < 0.5 * first.total,
        format!(
            "total {:.4} -> {:.4} (needs < {:.4}); Lr {:.4} -> {:.4}, Lp {:.4} constant",
            first.total,
            last.total,
            0.5 * first.total,
            first.lr,
            last.lr,
            last.lp
        ),
    );
    let held_out: Vec<Graph> = data.test.iter().map(|t| t.graph.clone()).collect();
    let auc = edge_auc(&trained.autoencoder, &held_out);
    r.line(
        "6 held-out edge AUC",
        auc >= 0.9,
        format!("{auc:.4} (>= 0.9) on {} graphs", held_out.len()),
    );
    r.line(
        "6 training runtime",
        secs < 300.0,
        format!("{secs:.1}s for {} epochs on {} graphs (< 300s)", records.len(), data.train.len()),
    );
    trained
}

fn completion(r: &mut Report, cfg: &RunConfig, model: &GraphAutoencoder) {
    let start = Instant::now();
    let data = generate_dataset(
        &DatasetSpec {
            anomaly_fraction: 0.0,
            ..cfg.dataset_spec()
        },
        cfg.data_seed,
    )
    .unwrap();
    let n = cfg.nodes;
    let mut mean = Tensor::zeros(&[n, n]);
    for g in &data.train {
        for (m, w) in mean.data_mut().iter_mut().zip(g.weights().data()) {
            *m += w / data.train.len() as f64;
        }
    }
    let completion_cfg = cfg.completion_config();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut completed, mut baseline, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for entry in &data.test {
        let mask = PartialMask::random_hidden(n, 0.2, &mut rng);
        let pg = apply_mask(&entry.graph, &mask).unwrap();
        let result = complete_graph(&pg, model, &completion_cfg).unwrap();
        for (i, j) in mask.hidden_pairs() {
            completed.push(result.best().graph.probs().get(i, j));
            baseline.push(mean.get(i, j));
            labels.push(entry.graph.weights().get(i, j) > 0.0);
        }
    }
    let auc = roc_auc(&completed, &labels).unwrap();
    let base = roc_auc(&baseline, &labels).unwrap();
    r.line(
        "7 masked completion",
        auc >= base + 0.15,
        format!(
            "completion AUC {auc:.4} vs baseline {base:.4} + 0.15 = {:.4} ({} masked pairs, {:.1}s)",
            base + 0.15,
            labels.len(),
            start.elapsed().as_secs_f64()
        ),
    );
}

fn anomaly_detection(r: &mut Report, cfg: &RunConfig, model: &GraphAutoencoder) {
    let start = Instant::now();
    let spec = DatasetSpec {
        train_count: 0,
        test_count: 20,
        anomaly_fraction: 1.0,
        anomaly_kind: AnomalyKind::WeightDampening,
        severity: 0.8,
        ..cfg.dataset_spec()
    };
    let mut eval_cfg = EvalConfig {
        completion: cfg.completion_config(),
        score: ScoreVariant::Scaled,
        mask_fraction: 0.0,
        seed: 0,
    };
    eval_cfg.completion.restarts = 1;
    eval_cfg.completion.candidates = 1;
    eval_cfg.completion.max_rounds = 40;
    let mut per_seed = Vec::new();
    for seed in 0..20u64 {
        let data = generate_dataset(&spec, 1000 + seed).unwrap();
        eval_cfg.seed = seed;
        let report = evaluate_run(model, &data.test, &eval_cfg).unwrap();
        per_seed.push(report.mean.node_auc.unwrap());
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let min = per_seed.iter().cloned().fold(f64::INFINITY, f64::min);
    r.line(
        "8 anomaly node AUC",
        mean >= 0.8,
        format!(
            "mean {mean:.4} (>= 0.8), worst seed {min:.4}, 20 seeds x 20 graphs, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

fn zero_kl_gradient(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let g = random_graph(10, 0.4, &mut rng);
    let model = GraphAutoencoder::new(10, 8, 4, 12.0, &mut rng);
    let prepared = PreparedGraph::new(&g, None).unwrap();
    let mut tape = Tape::new();
    let vars = AutoencoderVars::bind(&mut tape, &model);
    let gv = GraphVars::bind(&mut tape, &prepared);
    let pass = model
        .record(&mut tape, &vars, &gv, &prepared, None, ReconstructionLoss::CrossEntropy)
        .unwrap();
    let grads = tape.gradient(pass.lp, &vars.encoder.vars()).unwrap();
    let nonzero = grads.iter().flat_map(|t| t.data()).filter(|v| **v != 0.0).count();
    let entries: usize = grads.iter().map(|t| t.len()).sum();
    r.line(
        "9 zero KL gradient",
        nonzero == 0,
        format!("{nonzero} nonzero of {entries} encoder gradient entries"),
    );
}

fn determinism(r: &mut Report, cfg: &RunConfig, trained: &TrainedModel) {
    let small = RunConfig {
        train_count: 12,
        test_count: 4,
        epochs: 6,
        ..cfg.clone()
    };
    let data = generate_dataset(&small.dataset_spec(), 5).unwrap();
    let a = train(&data.train, &small.train_config()).unwrap();
    let b = train(&data.train, &small.train_config()).unwrap();
    let history_same = a.history.records == b.history.records && a.autoencoder == b.autoencoder;

    let mut eval_cfg = small.eval_config();
    eval_cfg.completion.restarts = 2;
    eval_cfg.completion.candidates = 1;
    eval_cfg.completion.max_rounds = 10;
    let csv_a = evaluate_run(&a.autoencoder, &data.test, &eval_cfg).unwrap().to_csv();
    let csv_b = evaluate_run(&b.autoencoder, &data.test, &eval_cfg).unwrap().to_csv();
    r.line(
        "10 determinism",
        history_same && csv_a == csv_b,
        format!("history identical: {history_same}, metrics CSV identical: {}", csv_a == csv_b),
    );

    let text = Checkpoint::from_model(trained, cfg).to_json();
    let restored = Checkpoint::from_json(&text).unwrap().restore().unwrap().0;
    let probe = generate_dataset(&cfg.dataset_spec(), 77).unwrap();
    let same = probe
        .test
        .iter()
        .all(|t| restored.reconstruct(&t.graph).unwrap() == trained.autoencoder.reconstruct(&t.graph).unwrap());
    let text_again = Checkpoint::from_json(&text).unwrap().to_json();
    r.line(
        "10 checkpoint round trip",
        same && text == text_again,
        format!("reconstructions bit-identical: {same}, re-serialization identical: {}", text == text_again),
    );
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    gradient_check(&mut r);
    sampler_fidelity(&mut r);
    kl_monte_carlo(&mut r);
    sinkhorn(&mut r);
    equivariance(&mut r);
    zero_kl_gradient(&mut r);

    let cfg = RunConfig {
        data_seed: 1,
        ..RunConfig::default()
    };
    let trained = training(&mut r, &cfg);
    completion(&mut r, &cfg, &trained.autoencoder);
    anomaly_detection(&mut r, &cfg, &trained.autoencoder);
    determinism(&mut r, &cfg, &trained);

    println!("acceptance: {} failing line(s)", r.failures);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if r.failures == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
