//! `vmfgraph` command-line front end.
//!
//! Every key of [`RunConfig`] is also a `--key value` flag on each
//! subcommand, applied after `--config`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use thiserror::Error;

use vmfgraph::adversarial::{train, TrainError};
use vmfgraph::checkpoint::{Checkpoint, CheckpointError};
use vmfgraph::completion::{complete_graph, CompletionError};
use vmfgraph::config::{ConfigError, RunConfig};
use vmfgraph::eval::{edge_anomaly_scores, evaluate_run, node_anomaly_scores, EvalError};
use vmfgraph::graph::{apply_mask, load_graph, load_mask, write_matrix, Graph, GraphError, PartialMask};
use vmfgraph::model::{GraphAutoencoder, ModelError};
use vmfgraph::synth::{generate_dataset, read_dataset, write_dataset, SynthError};
use vmfgraph::tensor::TensorError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

fn tensor_error(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

fn model_error(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(t) if tensor_error(t))
}

fn completion_numerical(e: &CompletionError) -> bool {
    match e {
        CompletionError::NonFinite(_) | CompletionError::AllRestartsFailed(_) => true,
        CompletionError::Model(m) => model_error(m),
        CompletionError::Tensor(t) => tensor_error(t),
        _ => false,
    }
}

fn classify(numerical: bool, msg: String) -> CliError {
    if numerical {
        CliError::Numerical(msg)
    } else {
        CliError::Data(msg)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let numerical = match &e {
            TrainError::Diverged { .. } => true,
            TrainError::Model(m) => model_error(m),
            _ => false,
        };
        classify(numerical, e.to_string())
    }
}

impl From<CompletionError> for CliError {
    fn from(e: CompletionError) -> Self {
        classify(completion_numerical(&e), e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let numerical = matches!(&e, EvalError::Completion(c) if completion_numerical(c));
        classify(numerical, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        classify(model_error(&e), e.to_string())
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(ConfigError, CheckpointError, GraphError, SynthError, std::io::Error);

pub type Result<T> = std::result::Result<T, CliError>;

fn config_keys() -> Vec<String> {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    value.as_object().expect("config is an object").keys().cloned().collect()
}

fn subcommand(name: &'static str, about: &'static str, keys: &[String]) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("JSON run configuration"),
    );
    for key in keys {
        let mut arg = Arg::new(key.clone()).long(key.clone()).value_name("VALUE").hide(true);
        let kebab = key.replace('_', "-");
        if kebab != *key {
            arg = arg.alias(kebab);
        }
        cmd = cmd.arg(arg);
    }
    cmd.arg(
        Arg::new("out")
            .long("out")
            .value_name("DIR")
            .help("Output directory (same as --out_dir)"),
    )
    .arg(
        Arg::new("data")
            .long("data")
            .value_name("DIR")
            .help("Dataset directory (same as --data_dir)"),
    )
    .arg(
        Arg::new("model")
            .long("model")
            .value_name("PATH")
            .help("Checkpoint file (same as --model_path)"),
    )
}

fn graph_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("adjacency")
            .long("adjacency")
            .value_name("PATH")
            .required(true)
            .help("Adjacency CSV or edge list"),
    )
    .arg(
        Arg::new("features")
            .long("features")
            .value_name("PATH")
            .help("Node feature CSV"),
    )
}

pub fn command() -> Command {
    let keys = config_keys();
    Command::new("vmfgraph")
        .about("Hyperspherical graph autoencoder for connectome completion and anomaly scoring")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help("Every configuration key is also accepted as --<key> <value>.")
        .subcommand(subcommand("generate", "Write a synthetic connectome dataset", &keys))
        .subcommand(subcommand("train", "Train on a dataset's training split", &keys))
        .subcommand(graph_args(subcommand("complete", "Complete a partially observed graph", &keys)).arg(
            Arg::new("mask")
                .long("mask")
                .value_name("PATH")
                .help("0/1 mask CSV; all entries observed when absent"),
        ))
        .subcommand(graph_args(subcommand("score", "Edge and node anomaly scores for one graph", &keys)))
        .subcommand(subcommand("eval", "Evaluate a checkpoint on a dataset's test split", &keys))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    for key in config_keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    for (flag, key) in [("out", "out_dir"), ("data", "data_dir"), ("model", "model_path")] {
        if let Some(v) = m.get_one::<String>(flag) {
            cfg.set(key, &serde_json::Value::String(v.clone()).to_string())
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(value: &Option<String>, flag: &str) -> Result<PathBuf> {
    value
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = required(&cfg.out_dir, "out")?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_json())?;
    Ok(out)
}

fn load_model(cfg: &RunConfig) -> Result<GraphAutoencoder> {
    let path = required(&cfg.model_path, "model")?;
    Ok(Checkpoint::load(&path)?.restore()?.0)
}

fn cmd_generate(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    let data = generate_dataset(&cfg.dataset_spec(), cfg.data_seed)?;
    write_dataset(&data, &out)?;
    Ok(format!(
        "wrote {} training and {} test graphs to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    ))
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let data_dir = required(&cfg.data_dir, "data")?;
    let out = prepare_out(cfg)?;
    let data = read_dataset(&data_dir)?;
    let trained = train(&data.train, &cfg.train_config())?;
    Checkpoint::from_model(&trained, cfg).save(&out.join("model.json"))?;
    fs::write(out.join("training_curve.csv"), trained.history.to_csv())?;
    let last = trained.history.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} epochs (final total loss {last}); checkpoint at {}",
        trained.history.len(),
        out.join("model.json").display()
    ))
}

fn read_input_graph(m: &ArgMatches) -> Result<Graph> {
    let adj = m.get_one::<String>("adjacency").expect("required by clap");
    let features = m.get_one::<String>("features").map(PathBuf::from);
    Ok(load_graph(Path::new(adj), features.as_deref())?)
}

fn cmd_complete(cfg: &RunConfig, m: &ArgMatches) -> Result<String> {
    let model = load_model(cfg)?;
    let g = read_input_graph(m)?;
    let mask = match m.get_one::<String>("mask") {
        Some(p) => load_mask(Path::new(p))?,
        None => PartialMask::full(g.n()),
    };
    let out = prepare_out(cfg)?;
    let pg = apply_mask(&g, &mask)?;
    let result = complete_graph(&pg, &model, &cfg.completion_config())?;
    let mut summary = String::from("rank,restart,objective,file\n");
    for (k, c) in result.candidates.iter().enumerate() {
        let file = format!("candidate_{k}.csv");
        write_matrix(&out.join(&file), c.graph.probs())?;
        summary.push_str(&format!("{k},{},{},{file}\n", c.latent.restart, c.objective));
    }
    fs::write(out.join("candidates.csv"), summary)?;
    Ok(format!("wrote {} candidates to {}", result.candidates.len(), out.display()))
}

fn cmd_score(cfg: &RunConfig, m: &ArgMatches) -> Result<String> {
    let model = load_model(cfg)?;
    let g = read_input_graph(m)?;
    let out = prepare_out(cfg)?;
    let pg = apply_mask(&g, &PartialMask::full(g.n()))?;
    let result = complete_graph(&pg, &model, &cfg.completion_config())?;
    let edges = edge_anomaly_scores(&g, &result.best().graph, cfg.score)?;
    let nodes = node_anomaly_scores(&edges)?;
    write_matrix(&out.join("edge_scores.csv"), &edges)?;
    let text: String = nodes.iter().map(|v| format!("{v}\n")).collect();
    fs::write(out.join("node_scores.csv"), text)?;
    Ok(format!("wrote edge and node scores to {}", out.display()))
}

fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let model = load_model(cfg)?;
    let data_dir = required(&cfg.data_dir, "data")?;
    let out = prepare_out(cfg)?;
    let data = read_dataset(&data_dir)?;
    let report = evaluate_run(&model, &data.test, &cfg.eval_config())?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    let node = report.mean.node_auc.map_or("NA".to_string(), |v| format!("{v:.4}"));
    Ok(format!("evaluated {} graphs, mean node AUC {node}", report.rows.len()))
}

/// Parses `args` (program name first) and runs one subcommand.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command()
        .try_get_matches_from(args)
        .map_err(|e| CliError::Usage(e.render().to_string()))?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "generate" => cmd_generate(&cfg),
        "train" => cmd_train(&cfg),
        "complete" => cmd_complete(&cfg, sub),
        "score" => cmd_score(&cfg, sub),
        "eval" => cmd_eval(&cfg),
        other => Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
}

/// Runs the CLI and reports to stdout/stderr; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<T> = args.into_iter().collect();
    match command().try_get_matches_from(args.clone()) {
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
        Ok(_) => {}
    }
    match run(args) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            let line = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("error: {line}");
            e.exit_code()
        }
    }
}
