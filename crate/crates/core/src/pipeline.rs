//! Three-stage sequential training (encoder, then NSEM, then detector),
//! detection over the test snapshots, and model bundles on disk.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info};
use thiserror::Error;

use crate::autodiff::{
    read_checkpoint, write_checkpoint, Adam, AdamConfig, AutodiffError, CheckpointError,
    ParamStore, SparseRows,
};
use crate::detector::{Detector, DetectorConfig, ScoredEdge};
use crate::encoder::{edge_embed, Encoder, EncoderConfig, EncoderState, DEFAULT_NEIGHBOR_K};
use crate::graphstore::{
    augment_training, negative_sample, GraphError, Snapshot, SnapshotSequence, SplitConfig,
};
use crate::linalg::{Matrix, Vector};
use crate::nsem::{edge_stats, GaussianStats, Nsem, NsemConfig, NsemError, NsemState, Whitener};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nsem(#[from] NsemError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl From<crate::linalg::LinalgError> for PipelineError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        PipelineError::Nsem(NsemError::Linalg(e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs_encoder: usize,
    pub epochs_nsem: usize,
    pub epochs_detector: usize,
    pub lr_encoder: f64,
    pub lr_nsem: f64,
    pub lr_detector: f64,
    pub neighbor_k: usize,
    /// GRU hidden width; 0 means `dim`.
    pub h_dim: usize,
    /// Pseudo-anomalies per existing edge in detector training.
    pub negative_ratio: f64,
    pub bce_mean: bool,
    pub seed: u64,
    pub snapshot_size: usize,
    pub train_ratio: f64,
    /// Fraction of anomalous edges injected into each test snapshot.
    pub anomaly_ratio: f64,
    /// Width of initialized node features for ingested graphs.
    pub feature_dim: usize,
    pub no_nsem: bool,
    pub no_gru: bool,
    pub no_dataaug: bool,
    pub simple_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs_encoder: 100,
            epochs_nsem: 200,
            epochs_detector: 400,
            lr_encoder: 5e-4,
            lr_nsem: 1e-3,
            lr_detector: 1e-3,
            neighbor_k: DEFAULT_NEIGHBOR_K,
            h_dim: 0,
            negative_ratio: 1.0,
            bce_mean: false,
            seed: 1,
            snapshot_size: 1000,
            train_ratio: 0.5,
            anomaly_ratio: 0.1,
            feature_dim: 32,
            no_nsem: false,
            no_gru: false,
            no_dataaug: false,
            simple_encoder: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "epochs_encoder",
    "epochs_nsem",
    "epochs_detector",
    "lr_encoder",
    "lr_nsem",
    "lr_detector",
    "neighbor_k",
    "h_dim",
    "negative_ratio",
    "bce_mean",
    "seed",
    "snapshot_size",
    "train_ratio",
    "anomaly_ratio",
    "feature_dim",
    "no_nsem",
    "no_gru",
    "no_dataaug",
    "simple_encoder",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(PipelineError::Config(format!(
            "{key}: expected a boolean, got {other:?}"
        ))),
    }
}

impl TrainConfig {
    /// Sets one field by name; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dim" => self.dim = parse_num(key, value)?,
            "epochs_encoder" => self.epochs_encoder = parse_num(key, value)?,
            "epochs_nsem" => self.epochs_nsem = parse_num(key, value)?,
            "epochs_detector" => self.epochs_detector = parse_num(key, value)?,
            "lr_encoder" => self.lr_encoder = parse_num(key, value)?,
            "lr_nsem" => self.lr_nsem = parse_num(key, value)?,
            "lr_detector" => self.lr_detector = parse_num(key, value)?,
            "neighbor_k" => self.neighbor_k = parse_num(key, value)?,
            "h_dim" => self.h_dim = parse_num(key, value)?,
            "negative_ratio" => self.negative_ratio = parse_num(key, value)?,
            "bce_mean" => self.bce_mean = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "snapshot_size" => self.snapshot_size = parse_num(key, value)?,
            "train_ratio" => self.train_ratio = parse_num(key, value)?,
            "anomaly_ratio" => self.anomaly_ratio = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "no_nsem" => self.no_nsem = parse_bool(key, value)?,
            "no_gru" => self.no_gru = parse_bool(key, value)?,
            "no_dataaug" => self.no_dataaug = parse_bool(key, value)?,
            "simple_encoder" => self.simple_encoder = parse_bool(key, value)?,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dim" => self.dim.to_string(),
            "epochs_encoder" => self.epochs_encoder.to_string(),
            "epochs_nsem" => self.epochs_nsem.to_string(),
            "epochs_detector" => self.epochs_detector.to_string(),
            "lr_encoder" => self.lr_encoder.to_string(),
            "lr_nsem" => self.lr_nsem.to_string(),
            "lr_detector" => self.lr_detector.to_string(),
            "neighbor_k" => self.neighbor_k.to_string(),
            "h_dim" => self.h_dim.to_string(),
            "negative_ratio" => self.negative_ratio.to_string(),
            "bce_mean" => self.bce_mean.to_string(),
            "seed" => self.seed.to_string(),
            "snapshot_size" => self.snapshot_size.to_string(),
            "train_ratio" => self.train_ratio.to_string(),
            "anomaly_ratio" => self.anomaly_ratio.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "no_nsem" => self.no_nsem.to_string(),
            "no_gru" => self.no_gru.to_string(),
            "no_dataaug" => self.no_dataaug.to_string(),
            "simple_encoder" => self.simple_encoder.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        for (name, e) in [
            ("epochs_encoder", self.epochs_encoder),
            ("epochs_nsem", self.epochs_nsem),
            ("epochs_detector", self.epochs_detector),
        ] {
            if e == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_nsem", self.lr_nsem),
            ("lr_detector", self.lr_detector),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.neighbor_k == 0 {
            return bad("neighbor_k must be at least 1".into());
        }
        if !(self.negative_ratio > 0.0 && self.negative_ratio <= 1.0) {
            return bad(format!(
                "negative_ratio must lie in (0,1], got {}",
                self.negative_ratio
            ));
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio <= 0.5) {
            return bad(format!(
                "anomaly_ratio must lie in (0,0.5], got {}",
                self.anomaly_ratio
            ));
        }
        self.split().validate()?;
        Ok(())
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            snapshot_size: self.snapshot_size,
            train_ratio: self.train_ratio,
            seed: self.seed,
            feature_dim: self.feature_dim,
        }
    }

    pub fn gru_dim(&self) -> usize {
        if self.h_dim == 0 {
            self.dim
        } else {
            self.h_dim
        }
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig::with_lr(lr)
    }
}

/// Mean loss per epoch of each stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub encoder: Vec<f64>,
    pub nsem: Vec<f64>,
    pub detector: Vec<f64>,
}

fn check_train(train: &[Snapshot]) -> Result<()> {
    if train.is_empty() {
        return Err(PipelineError::Config("no training snapshots".into()));
    }
    Ok(())
}

fn encoder_config(cfg: &TrainConfig, input_dim: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim,
        dim: cfg.dim,
        neighbor_k: cfg.neighbor_k,
        simple: cfg.simple_encoder,
        seed: cfg.seed,
    }
}

fn operators(encoder: &Encoder, snaps: &[Snapshot]) -> Vec<Arc<SparseRows>> {
    snaps.iter().map(|s| encoder.operator(s)).collect()
}

/// Stage 1: reconstruction training. The recurrent state restarts at every
/// epoch and is carried through the training snapshots as a constant.
pub fn train_encoder(train: &[Snapshot], cfg: &TrainConfig) -> Result<(Encoder, Vec<f64>)> {
    check_train(train)?;
    let input_dim = train[0].features.cols();
    let mut encoder = Encoder::new(encoder_config(cfg, input_dim));
    let mut adam = Adam::new(&encoder.store, TrainConfig::adam(cfg.lr_encoder));
    let ops = operators(&encoder, train);
    let n = train[0].num_nodes();
    let mut history = Vec::with_capacity(cfg.epochs_encoder);
    for epoch in 0..cfg.epochs_encoder {
        let mut state = encoder.initial_state(n);
        let mut total = 0.0;
        for (t, snap) in train.iter().enumerate() {
            let prev = if t == 0 { &ops[0] } else { &ops[t - 1] };
            let (loss, next) = encoder.train_step(&mut adam, snap, &ops[t], prev, &state)?;
            total += loss;
            state = next;
        }
        let mean = total / train.len() as f64;
        if epoch % 20 == 0 || epoch + 1 == cfg.epochs_encoder {
            debug!("encoder epoch {epoch} loss {mean:.6}");
        }
        history.push(mean);
    }
    info!(
        "encoder trained: {} epochs, loss {:.4} -> {:.4}",
        cfg.epochs_encoder,
        history[0],
        history[history.len() - 1]
    );
    Ok((encoder, history))
}

/// Frozen-encoder view of the training prefix.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub ops: Vec<Arc<SparseRows>>,
    /// Encoder state entering each training snapshot.
    pub states_before: Vec<EncoderState>,
    /// Statistics of each snapshot's (all normal) edge embeddings.
    pub normal_stats: Vec<GaussianStats>,
}

impl TrainContext {
    pub fn new(encoder: &Encoder, train: &[Snapshot]) -> Result<Self> {
        check_train(train)?;
        let ops = operators(encoder, train);
        let mut state = encoder.initial_state(train[0].num_nodes());
        let mut states_before = Vec::with_capacity(train.len());
        let mut normal_stats = Vec::with_capacity(train.len());
        for (t, snap) in train.iter().enumerate() {
            let prev = if t == 0 { &ops[0] } else { &ops[t - 1] };
            states_before.push(state.clone());
            let (z, next) = encoder.step(&snap.features, &ops[t], prev, &state)?;
            state = next;
            normal_stats.push(edge_stats(&edge_embed(&z, &snap.edges))?);
        }
        Ok(Self {
            ops,
            states_before,
            normal_stats,
        })
    }

    /// Edge embeddings of a modified copy of training snapshot `t`, encoded in
    /// one step from the state the clean sequence reaches before `t`.
    pub fn embed(&self, encoder: &Encoder, t: usize, snap: &Snapshot) -> Result<Matrix> {
        let cur = encoder.operator(snap);
        let prev = if t == 0 {
            Arc::clone(&cur)
        } else {
            Arc::clone(&self.ops[t - 1])
        };
        let (z, _) = encoder.step(&snap.features, &cur, &prev, &self.states_before[t])?;
        Ok(edge_embed(&z, &snap.edges))
    }
}

fn nsem_config(cfg: &TrainConfig) -> NsemConfig {
    NsemConfig {
        dim: cfg.dim,
        h_dim: cfg.gru_dim(),
        use_gru: !cfg.no_gru,
        seed: cfg.seed,
    }
}

fn normal_stats_of(emb: &Matrix, snap: &Snapshot) -> Result<GaussianStats> {
    let normal = snap.normal_edge_indices();
    if normal.len() < 2 {
        return Err(NsemError::TooFewSamples(normal.len()).into());
    }
    Ok(edge_stats(&emb.select_rows(&normal))?)
}

/// Statistics of one augmented training snapshot under the frozen encoder:
/// all edges and label-0 edges.
fn snapshot_stats(
    encoder: &Encoder,
    ctx: &TrainContext,
    t: usize,
    snap: &Snapshot,
) -> Result<(GaussianStats, GaussianStats)> {
    let emb = ctx.embed(encoder, t, snap)?;
    Ok((edge_stats(&emb)?, normal_stats_of(&emb, snap)?))
}

/// Stage 2: statistics-loss training of the MLP and GRU on augmented training
/// snapshots. Returns the model, the hidden state after the whole training
/// prefix, and per-epoch mean losses.
pub fn train_nsem(
    train: &[Snapshot],
    encoder: &Encoder,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<(Nsem, NsemState, Vec<f64>)> {
    check_train(train)?;
    let mut nsem = Nsem::new(nsem_config(cfg));
    let mut adam = Adam::new(&nsem.store, TrainConfig::adam(cfg.lr_nsem));
    let k = train.len();
    let mut history = Vec::with_capacity(cfg.epochs_nsem);
    for epoch in 0..cfg.epochs_nsem {
        let mut total = 0.0;
        let mut prev: Option<(GaussianStats, NsemState)> = None;
        for (t, snap) in train.iter().enumerate() {
            let (all, truth) = if cfg.no_dataaug {
                (ctx.normal_stats[t].clone(), ctx.normal_stats[t].clone())
            } else {
                let seed = derive_seed(cfg.seed, "augment", (epoch * k + t) as u64);
                let (aug, _) = augment_training(snap, seed)?;
                snapshot_stats(encoder, ctx, t, &aug)?
            };
            let zero = nsem.initial_state();
            let history_arg = prev.as_ref().map(|(s, h)| (s, h));
            let (loss, used) = nsem.train_step(&mut adam, &all, &truth, history_arg, &zero)?;
            total += loss;
            prev = Some((truth, used));
        }
        let mean = total / k as f64;
        if epoch % 20 == 0 || epoch + 1 == cfg.epochs_nsem {
            debug!("nsem epoch {epoch} loss {mean:.6}");
        }
        history.push(mean);
    }
    let mut state = nsem.initial_state();
    for stats in &ctx.normal_stats {
        state = nsem.advance(stats, &state)?;
    }
    info!(
        "nsem trained: {} epochs, loss {:.4} -> {:.4}",
        cfg.epochs_nsem,
        history[0],
        history[history.len() - 1]
    );
    Ok((nsem, state, history))
}

fn detector_config(cfg: &TrainConfig) -> DetectorConfig {
    DetectorConfig {
        dim: cfg.dim,
        mean_loss: cfg.bce_mean,
        seed: cfg.seed,
    }
}

/// Detector inputs for one training snapshot: pseudo-anomalies (label 1) are
/// inserted into the graph next to the original edges (label 0), the result
/// is encoded, and embeddings are whitened with the statistics of the
/// original edges unless NSEM is disabled.
pub fn detector_batch(
    snap: &Snapshot,
    t: usize,
    encoder: &Encoder,
    ctx: &TrainContext,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Matrix, Vec<u8>)> {
    let labeled = negative_sample(snap, cfg.negative_ratio, seed)?;
    let mut g = Snapshot::new(
        snap.index,
        snap.num_nodes(),
        labeled.edges,
        Arc::clone(&snap.features),
    );
    g.labels = Some(labeled.labels);
    let emb = ctx.embed(encoder, t, &g)?;
    let z = if cfg.no_nsem {
        emb
    } else {
        Whitener::new(&normal_stats_of(&emb, &g)?.jittered())?.apply(&emb)?
    };
    Ok((z, g.labels.unwrap_or_default()))
}

/// Stage 3: cross-entropy training on negative-sampled training snapshots.
pub fn train_detector(
    train: &[Snapshot],
    encoder: &Encoder,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<(Detector, Vec<f64>)> {
    check_train(train)?;
    let mut detector = Detector::new(detector_config(cfg));
    let mut adam = Adam::new(&detector.store, TrainConfig::adam(cfg.lr_detector));
    let k = train.len();
    let mut history = Vec::with_capacity(cfg.epochs_detector);
    for epoch in 0..cfg.epochs_detector {
        let mut total = 0.0;
        for (t, snap) in train.iter().enumerate() {
            let seed = derive_seed(cfg.seed, "negatives", (epoch * k + t) as u64);
            let (z, labels) = detector_batch(snap, t, encoder, ctx, cfg, seed)?;
            total += detector.train_step(&mut adam, &z, &labels)?;
        }
        let mean = total / k as f64;
        if epoch % 50 == 0 || epoch + 1 == cfg.epochs_detector {
            debug!("detector epoch {epoch} loss {mean:.6}");
        }
        history.push(mean);
    }
    info!(
        "detector trained: {} epochs, loss {:.4} -> {:.4}",
        cfg.epochs_detector,
        history[0],
        history[history.len() - 1]
    );
    Ok((detector, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub nsem: Nsem,
    pub detector: Detector,
    /// NSEM hidden state after the training prefix.
    pub nsem_state: NsemState,
}

/// Runs all three stages on the training split of `seq`.
pub fn train(seq: &SnapshotSequence, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    let train = seq.train();
    let (encoder, enc_log) = train_encoder(train, cfg)?;
    let ctx = TrainContext::new(&encoder, train)?;
    let (nsem, nsem_state, nsem_log) = if cfg.no_nsem {
        let nsem = Nsem::new(nsem_config(cfg));
        let state = nsem.initial_state();
        (nsem, state, Vec::new())
    } else {
        train_nsem(train, &encoder, &ctx, cfg)?
    };
    let (detector, det_log) = train_detector(train, &encoder, &ctx, cfg)?;
    Ok((
        ModelBundle {
            config: cfg.clone(),
            encoder,
            nsem,
            detector,
            nsem_state,
        },
        TrainLog {
            encoder: enc_log,
            nsem: nsem_log,
            detector: det_log,
        },
    ))
}

/// Ablation variant: the full model or one component switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoNsem,
    NoGru,
    NoDataAug,
    SimpleEncoder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoNsem,
        Variant::NoGru,
        Variant::NoDataAug,
        Variant::SimpleEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNsem => "no_nsem",
            Variant::NoGru => "no_gru",
            Variant::NoDataAug => "no_dataaug",
            Variant::SimpleEncoder => "simple_encoder",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown variant {name:?}")))
    }

    /// `base` with this variant's flag set (and the other ablation flags cleared).
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            no_nsem: self == Variant::NoNsem,
            no_gru: self == Variant::NoGru,
            no_dataaug: self == Variant::NoDataAug,
            simple_encoder: self == Variant::SimpleEncoder,
            ..base.clone()
        }
    }
}

/// Trains several configurations that differ only in ablation flags, sharing
/// every stage whose inputs coincide. Each bundle is identical to what
/// [`train`] produces for its configuration.
pub fn train_shared(seq: &SnapshotSequence, configs: &[TrainConfig]) -> Result<Vec<ModelBundle>> {
    let train = seq.train();
    let mut encoders: Vec<(bool, Encoder, TrainContext)> = Vec::new();
    let mut detectors: Vec<(bool, bool, Detector)> = Vec::new();
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        cfg.validate()?;
        let e = match encoders
            .iter()
            .position(|(simple, _, _)| *simple == cfg.simple_encoder)
        {
            Some(i) => i,
            None => {
                let (encoder, _) = train_encoder(train, cfg)?;
                let ctx = TrainContext::new(&encoder, train)?;
                encoders.push((cfg.simple_encoder, encoder, ctx));
                encoders.len() - 1
            }
        };
        let (_, encoder, ctx) = &encoders[e];
        let (nsem, nsem_state) = if cfg.no_nsem {
            let nsem = Nsem::new(nsem_config(cfg));
            let state = nsem.initial_state();
            (nsem, state)
        } else {
            let (nsem, state, _) = train_nsem(train, encoder, ctx, cfg)?;
            (nsem, state)
        };
        let d = match detectors
            .iter()
            .position(|(simple, raw, _)| *simple == cfg.simple_encoder && *raw == cfg.no_nsem)
        {
            Some(i) => i,
            None => {
                let (det, _) = train_detector(train, encoder, ctx, cfg)?;
                detectors.push((cfg.simple_encoder, cfg.no_nsem, det));
                detectors.len() - 1
            }
        };
        out.push(ModelBundle {
            config: cfg.clone(),
            encoder: encoder.clone(),
            nsem,
            detector: detectors[d].2.clone(),
            nsem_state,
        });
    }
    Ok(out)
}

/// Scores every edge of the test snapshots in time order. The encoder state is
/// warmed up over the training prefix first.
pub fn detect(seq: &SnapshotSequence, bundle: &ModelBundle) -> Result<Vec<ScoredEdge>> {
    let encoder = &bundle.encoder;
    if seq.dim != encoder.config.input_dim {
        return Err(PipelineError::Config(format!(
            "data has feature width {}, model expects {}",
            seq.dim, encoder.config.input_dim
        )));
    }
    let mut state = encoder.initial_state(seq.num_nodes);
    let mut prev: Option<Arc<SparseRows>> = None;
    for snap in seq.train() {
        let cur = encoder.operator(snap);
        let p = prev.take().unwrap_or_else(|| Arc::clone(&cur));
        let (_, next) = encoder.step(&snap.features, &cur, &p, &state)?;
        state = next;
        prev = Some(cur);
    }
    let mut h_s = bundle.nsem_state.clone();
    let mut out = Vec::with_capacity(seq.test().iter().map(Snapshot::num_edges).sum());
    for snap in seq.test() {
        let cur = encoder.operator(snap);
        let p = prev.take().unwrap_or_else(|| Arc::clone(&cur));
        let (z, next) = encoder.step(&snap.features, &cur, &p, &state)?;
        state = next;
        prev = Some(cur);
        let emb = edge_embed(&z, &snap.edges);
        let scores = if bundle.config.no_nsem {
            bundle.detector.score_rows(&emb)?
        } else {
            let all = edge_stats(&emb)?;
            let pred = bundle.nsem.predict(&all, &h_s)?;
            let white = Whitener::new(&pred)?.apply(&emb)?;
            h_s = bundle.nsem.advance(&pred, &h_s)?;
            bundle.detector.score_rows(&white)?
        };
        for (k, (&(src, dst), score)) in snap.edges.iter().zip(scores).enumerate() {
            out.push(ScoredEdge {
                t: snap.index,
                src,
                dst,
                score,
                label: snap.labels.as_ref().map(|l| l[k]),
            });
        }
    }
    Ok(out)
}

const CONFIG_FILE: &str = "config.txt";
const BUNDLE_FILE: &str = "bundle.txt";
const WEIGHTS_DIR: &str = "weights";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, bundle.config.to_text()).map_err(io_err(&p))?;
    let p = dir.join(BUNDLE_FILE);
    let meta = format!(
        "input_dim {}\nstate_layers {}\n",
        bundle.encoder.config.input_dim,
        bundle.nsem_state.h.len()
    );
    fs::write(&p, meta).map_err(io_err(&p))?;

    let state_rows: Vec<(String, Matrix)> = bundle
        .nsem_state
        .h
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("state.h{i}"), v.to_row_matrix()))
        .collect();
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for store in [
        &bundle.encoder.store,
        &bundle.nsem.store,
        &bundle.detector.store,
    ] {
        tensors.extend(store.iter().map(|p| (p.name.clone(), &p.value)));
    }
    tensors.extend(state_rows.iter().map(|(n, m)| (n.clone(), m)));
    write_checkpoint(&dir.join(WEIGHTS_DIR), &tensors)?;
    Ok(())
}

fn corrupt(msg: String) -> PipelineError {
    PipelineError::Checkpoint(CheckpointError::CorruptCheckpoint(msg))
}

fn restore(store: &mut ParamStore, tensors: &mut HashMap<String, Matrix>) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        let value = tensors
            .remove(&name)
            .ok_or_else(|| corrupt(format!("tensor {name} missing from checkpoint")))?;
        if value.shape() != store.value(id).shape() {
            return Err(corrupt(format!(
                "tensor {name} has shape {:?}",
                value.shape()
            )));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let p = dir.join(CONFIG_FILE);
    let config = TrainConfig::parse(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
    let p = dir.join(BUNDLE_FILE);
    let meta = fs::read_to_string(&p).map_err(io_err(&p))?;
    let field = |key: &str| -> Result<usize> {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|v| v.trim().parse().ok()))
            .ok_or_else(|| corrupt(format!("{BUNDLE_FILE} lacks {key}")))
    };
    let input_dim = field("input_dim")?;
    let layers = field("state_layers")?;

    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    for (name, m) in read_checkpoint(&dir.join(WEIGHTS_DIR))? {
        tensors.insert(name, m);
    }
    let mut encoder = Encoder::new(encoder_config(&config, input_dim));
    let mut nsem = Nsem::new(nsem_config(&config));
    let mut detector = Detector::new(detector_config(&config));
    restore(&mut encoder.store, &mut tensors)?;
    restore(&mut nsem.store, &mut tensors)?;
    restore(&mut detector.store, &mut tensors)?;
    let mut h = Vec::with_capacity(layers);
    for i in 0..layers {
        let name = format!("state.h{i}");
        let m = tensors
            .remove(&name)
            .ok_or_else(|| corrupt(format!("tensor {name} missing from checkpoint")))?;
        if m.shape() != (1, config.gru_dim()) {
            return Err(corrupt(format!("tensor {name} has shape {:?}", m.shape())));
        }
        h.push(Vector::from(m.into_data()));
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(ModelBundle {
        config,
        encoder,
        nsem,
        detector,
        nsem_state: NsemState { h },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{synth_nds_benchmark, SynthConfig};

    fn tiny_seq() -> SnapshotSequence {
        synth_nds_benchmark(&SynthConfig {
            n_nodes: 40,
            n_snapshots: 6,
            edges_per_snapshot: 80,
            dim: 4,
            drift_sigma: 0.2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            dim: 4,
            epochs_encoder: 5,
            epochs_nsem: 5,
            epochs_detector: 5,
            feature_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.set("dim", "8").unwrap();
        cfg.set("no_gru", "true").unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(
            cfg.set("bogus", "1"),
            Err(PipelineError::Config(_))
        ));
        assert!(cfg.set("dim", "x").is_err());
        let parsed =
            TrainConfig::parse("# comment\nseed = 9  # trailing\n\nlr_nsem=0.01\n").unwrap();
        assert_eq!(parsed.seed, 9);
        assert_eq!(parsed.lr_nsem, 0.01);
        assert!(TrainConfig::parse("seed 9").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.epochs_detector = 0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            train_ratio: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr_nsem: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_encoder() {
        let seq = tiny_seq();
        let cfg = TrainConfig {
            epochs_encoder: 1,
            lr_encoder: 1e-300,
            ..tiny_cfg()
        };
        let (enc, _) = train_encoder(seq.train(), &cfg).unwrap();
        let fresh = Encoder::new(encoder_config(&cfg, 4));
        for (a, b) in enc.store.iter().zip(fresh.store.iter()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-200);
        }
    }

    #[test]
    fn stages_leave_encoder_untouched() {
        let seq = tiny_seq();
        let cfg = tiny_cfg();
        let (enc, _) = train_encoder(seq.train(), &cfg).unwrap();
        let before = enc.store.value_bytes();
        let ctx = TrainContext::new(&enc, seq.train()).unwrap();
        let _ = train_nsem(seq.train(), &enc, &ctx, &cfg).unwrap();
        let _ = train_detector(seq.train(), &enc, &ctx, &cfg).unwrap();
        assert_eq!(enc.store.value_bytes(), before);
    }

    #[test]
    fn detect_cardinality_and_bundle_round_trip() {
        let seq = tiny_seq();
        let (bundle, log) = train(&seq, &tiny_cfg()).unwrap();
        assert_eq!(log.encoder.len(), 5);
        let scores = detect(&seq, &bundle).unwrap();
        let expected: usize = seq.test().iter().map(Snapshot::num_edges).sum();
        assert_eq!(scores.len(), expected);
        assert!(scores
            .iter()
            .all(|s| s.score > 0.0 && s.score < 1.0 && s.label.is_some()));
        assert!(scores.windows(2).all(|w| w[0].t <= w[1].t));

        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded, bundle);
        assert_eq!(detect(&seq, &loaded).unwrap(), scores);

        let no_nsem = ModelBundle {
            config: TrainConfig {
                no_nsem: true,
                ..bundle.config.clone()
            },
            ..bundle.clone()
        };
        assert_ne!(detect(&seq, &no_nsem).unwrap(), scores);
    }

    #[test]
    fn truncated_weights_rejected() {
        let seq = tiny_seq();
        let (bundle, _) = train(&seq, &tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let bin = dir.path().join(WEIGHTS_DIR).join("tensors.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(PipelineError::Checkpoint(
                CheckpointError::CorruptCheckpoint(_)
            ))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let seq = tiny_seq();
        let (a, la) = train(&seq, &tiny_cfg()).unwrap();
        let (b, lb) = train(&seq, &tiny_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn shared_training_matches_independent_runs() {
        let seq = tiny_seq();
        let base = tiny_cfg();
        let configs: Vec<TrainConfig> = [Variant::Full, Variant::NoNsem, Variant::NoGru]
            .iter()
            .map(|v| v.apply(&base))
            .collect();
        let shared = train_shared(&seq, &configs).unwrap();
        for (cfg, bundle) in configs.iter().zip(&shared) {
            assert_eq!(&train(&seq, cfg).unwrap().0, bundle);
        }
        assert_eq!(Variant::parse("no_gru").unwrap(), Variant::NoGru);
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn ablation_flags_run() {
        let seq = tiny_seq();
        for flag in ["no_nsem", "no_gru", "no_dataaug", "simple_encoder"] {
            let mut cfg = tiny_cfg();
            cfg.set(flag, "true").unwrap();
            let (bundle, log) = train(&seq, &cfg).unwrap();
            assert_eq!(log.nsem.is_empty(), flag == "no_nsem");
            assert!(!detect(&seq, &bundle).unwrap().is_empty());
        }
    }
}
