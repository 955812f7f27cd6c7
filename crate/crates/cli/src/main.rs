use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use whends::checks::{run_checks, CheckOptions};
use whends::eval::{
    auc_of, run_sweep, write_report, write_scores, Axis, DataSource, ReportFormat, SweepSpec,
};
use whends::graphstore::{
    build_snapshots, build_snapshots_with_features, label_test_snapshots, load_features,
    parse_edge_list, read_dataset, synth_nds_benchmark, write_dataset, GraphError,
    SnapshotSequence, SplitConfig, SynthConfig,
};
use whends::pipeline::{
    detect, load_bundle, save_bundle, train, PipelineError, TrainConfig, Variant,
};

/// Anomaly detection on dynamic graphs with whitened edge embeddings.
#[derive(Parser, Debug)]
#[command(name = "whends", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an edge list, cut it into snapshots and write a dataset directory.
    Ingest(IngestArgs),
    /// Write the two-community drift benchmark as a dataset directory.
    Synth(SynthArgs),
    /// Train all three stages and write a model directory.
    Train(TrainArgs),
    /// Score every test edge and write a CSV; prints the AUC when labels exist.
    Detect(DetectArgs),
    /// Run an experiment grid and write a report.
    Sweep(SweepArgs),
    /// Run the fast invariant suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    edges: PathBuf,
    /// Per-node features, one whitespace-separated row per node.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    snapshot_size: usize,
    #[arg(long, default_value_t = 0.5)]
    train_ratio: f64,
    /// Width of generated features when no file is given.
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    nodes: usize,
    #[arg(long, default_value_t = 20)]
    snapshots: usize,
    #[arg(long, default_value_t = 1000)]
    edges_per_snapshot: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Feature drift per snapshot.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    anomaly_ratio: f64,
    #[arg(long, default_value_t = 0.02)]
    leak: f64,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    train_ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Training configuration: a `key = value` file plus per-field flags, flags
/// taking precedence.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs_encoder: Option<usize>,
    #[arg(long)]
    epochs_nsem: Option<usize>,
    #[arg(long)]
    epochs_detector: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_nsem: Option<f64>,
    #[arg(long)]
    lr_detector: Option<f64>,
    #[arg(long)]
    neighbor_k: Option<usize>,
    /// GRU width; 0 means the embedding width.
    #[arg(long)]
    h_dim: Option<usize>,
    #[arg(long)]
    negative_ratio: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    bce_mean: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snapshot_size: Option<usize>,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    anomaly_ratio: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_nsem: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_gru: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_dataaug: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    simple_encoder: Option<bool>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        }
        let overrides: [(&str, Option<String>); 20] = [
            ("dim", self.dim.map(|v| v.to_string())),
            ("epochs_encoder", self.epochs_encoder.map(|v| v.to_string())),
            ("epochs_nsem", self.epochs_nsem.map(|v| v.to_string())),
            (
                "epochs_detector",
                self.epochs_detector.map(|v| v.to_string()),
            ),
            ("lr_encoder", self.lr_encoder.map(|v| v.to_string())),
            ("lr_nsem", self.lr_nsem.map(|v| v.to_string())),
            ("lr_detector", self.lr_detector.map(|v| v.to_string())),
            ("neighbor_k", self.neighbor_k.map(|v| v.to_string())),
            ("h_dim", self.h_dim.map(|v| v.to_string())),
            ("negative_ratio", self.negative_ratio.map(|v| v.to_string())),
            ("bce_mean", self.bce_mean.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("snapshot_size", self.snapshot_size.map(|v| v.to_string())),
            ("train_ratio", self.train_ratio.map(|v| v.to_string())),
            ("anomaly_ratio", self.anomaly_ratio.map(|v| v.to_string())),
            ("feature_dim", self.feature_dim.map(|v| v.to_string())),
            ("no_nsem", self.no_nsem.map(|v| v.to_string())),
            ("no_gru", self.no_gru.map(|v| v.to_string())),
            ("no_dataaug", self.no_dataaug.map(|v| v.to_string())),
            ("simple_encoder", self.simple_encoder.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v).map_err(Failure::from)?;
            }
        }
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `ingest` or `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Score CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Inject this fraction of anomalies into each unlabeled test snapshot first.
    #[arg(long)]
    inject: Option<f64>,
    /// Seed of the injection; defaults to the model's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    AnomalyRatio,
    ShiftSigma,
    EmbeddingDim,
    TrainRatio,
    Ablation,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::AnomalyRatio => Axis::AnomalyRatio,
            AxisArg::ShiftSigma => Axis::ShiftSigma,
            AxisArg::EmbeddingDim => Axis::EmbeddingDim,
            AxisArg::TrainRatio => Axis::TrainRatio,
            AxisArg::Ablation => Axis::Ablation,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Runs per value; seeds are `seed, seed+1, …`.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Variant run next to the full model at every point (repeatable).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Ingested dataset; the synthetic benchmark is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Drift applied off the `shift_sigma` axis.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 500)]
    nodes: usize,
    #[arg(long, default_value_t = 20)]
    snapshots: usize,
    #[arg(long, default_value_t = 1000)]
    edges_per_snapshot: usize,
    #[arg(long, default_value = "sweep")]
    experiment: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_inv_sqrt: bool,
}

/// An error with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Self { code: 2, message }
    }

    fn runtime(message: String) -> Self {
        Self { code: 1, message }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::SaturatedGraph { .. } => Self::runtime(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Io { .. } | PipelineError::Checkpoint(_) => {
                Self::usage(e.to_string())
            }
            PipelineError::Graph(g) => g.into(),
            _ => Self::runtime(e.to_string()),
        }
    }
}

fn summary(seq: &SnapshotSequence) -> String {
    format!(
        "nodes {} edges {} snapshots {} train {} feature_dim {}",
        seq.num_nodes,
        seq.total_edges(),
        seq.len(),
        seq.train_count,
        seq.dim
    )
}

fn read_data(dir: &Path) -> Result<SnapshotSequence, Failure> {
    read_dataset(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))
}

fn ingest(a: &IngestArgs) -> Result<(), Failure> {
    let file =
        File::open(&a.edges).map_err(|e| Failure::usage(format!("{}: {e}", a.edges.display())))?;
    let list = parse_edge_list(BufReader::new(file))
        .map_err(|e| Failure::usage(format!("{}: {e}", a.edges.display())))?;
    let split = SplitConfig {
        snapshot_size: a.snapshot_size,
        train_ratio: a.train_ratio,
        seed: a.seed,
        feature_dim: a.feature_dim,
    };
    split.validate()?;
    let seq = match &a.features {
        Some(path) => {
            let features = load_features(path, list.num_nodes)?;
            build_snapshots_with_features(&list.events, list.num_nodes, &split, features)?
        }
        None => build_snapshots(&list.events, list.num_nodes, &split)?,
    };
    if list.self_loops_dropped > 0 {
        info!("dropped {} self-loops", list.self_loops_dropped);
    }
    write_dataset(&seq, &a.out)?;
    println!("{}", summary(&seq));
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_nodes: a.nodes,
        n_snapshots: a.snapshots,
        edges_per_snapshot: a.edges_per_snapshot,
        dim: a.dim,
        drift_sigma: a.sigma,
        anomaly_ratio: a.anomaly_ratio,
        leak_max: a.leak,
        community_separation: a.separation.unwrap_or(defaults.community_separation),
        train_ratio: a.train_ratio,
        seed: a.seed,
    };
    let seq = synth_nds_benchmark(&cfg)?;
    write_dataset(&seq, &a.out)?;
    println!("{}", summary(&seq));
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    let seq = read_data(&a.data)?;
    let seq = match a.config.train_ratio {
        Some(r) => seq.with_train_ratio(r)?,
        None => seq,
    };
    let (bundle, log) = train(&seq, &cfg)?;
    save_bundle(&bundle, &a.out)?;
    let last = |v: &[f64]| v.last().map_or("-".to_string(), |x| format!("{x:.6}"));
    println!(
        "trained on {} snapshots; final losses: encoder {} nsem {} detector {}",
        seq.train_count,
        last(&log.encoder),
        last(&log.nsem),
        last(&log.detector)
    );
    Ok(())
}

fn detect_cmd(a: &DetectArgs) -> Result<(), Failure> {
    let bundle = load_bundle(&a.model)?;
    let mut seq = read_data(&a.data)?;
    if let Some(ratio) = a.inject {
        let seed = a.seed.unwrap_or(bundle.config.seed);
        seq = label_test_snapshots(&seq, ratio, seed)?;
    }
    let scored = detect(&seq, &bundle)?;
    write_scores(&scored, &a.out).map_err(|e| Failure::runtime(e.to_string()))?;
    if scored.iter().any(|s| s.label.is_some()) {
        let auc = auc_of(&scored).map_err(|e| Failure::runtime(e.to_string()))?;
        println!("auc {auc:.6}");
    }
    info!("{} edges scored", scored.len());
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<(), Failure> {
    let base = a.config.resolve()?;
    let mut variants = vec![Variant::Full];
    for name in &a.ablate {
        let v = Variant::parse(name.trim()).map_err(Failure::from)?;
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let data = match &a.data {
        Some(dir) => DataSource::Ingested(read_data(dir)?),
        None => DataSource::Synthetic(SynthConfig {
            n_nodes: a.nodes,
            n_snapshots: a.snapshots,
            edges_per_snapshot: a.edges_per_snapshot,
            dim: base.feature_dim,
            ..SynthConfig::default()
        }),
    };
    let spec = SweepSpec {
        experiment: a.experiment.clone(),
        axis: a.axis.into(),
        values: a.values.clone(),
        repeats: a.repeats,
        base,
        data,
        variants,
        shift_sigma: a.sigma,
    };
    let report = run_sweep(&spec, a.jobs).map_err(|e| Failure::usage(e.to_string()))?;
    let format = match a.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    write_report(&report, &a.out, format).map_err(|e| Failure::runtime(e.to_string()))?;
    for row in &report.rows {
        match (&row.auc, &row.error) {
            (Some(auc), _) => println!("{} seed {} auc {auc:.6}", row.setting, row.seed),
            (None, Some(e)) => println!("{} seed {} error {e}", row.setting, row.seed),
            (None, None) => {}
        }
    }
    if report.failed() > 0 {
        return Err(Failure::runtime(format!(
            "{} of {} points failed",
            report.failed(),
            report.rows.len()
        )));
    }
    Ok(())
}

fn check_cmd(a: &CheckArgs) -> Result<(), Failure> {
    let results = run_checks(CheckOptions {
        seed: a.seed,
        corrupt_inv_sqrt: a.corrupt_inv_sqrt,
    });
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::runtime(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Check(a) => check_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
