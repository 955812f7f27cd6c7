//! AUC, experiment sweeps and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::ScoredEdge;
use crate::graphstore::{
    label_test_snapshots, nds_perturb, synth_nds_benchmark, SnapshotSequence, SynthConfig,
};
use crate::pipeline::{detect, train_shared, PipelineError, TrainConfig, Variant};
use crate::rng::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "experiment,setting,seed,auc,runtime_s";
pub const SCORES_HEADER: &str = "t,src,dst,score,label";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes: {positives} positive and {negatives} negative labels")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{0} scores for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the U statistic, kept integral.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] != 0).count() as u128;
        let neg = group.len() as u128 - pos;
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// Pooled AUC over every labeled scored edge.
pub fn auc_of(scored: &[ScoredEdge]) -> Result<f64> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = scored
        .iter()
        .filter_map(|s| s.label.map(|l| (s.score, l)))
        .unzip();
    auc_roc(&scores, &labels)
}

pub fn scores_csv(scored: &[ScoredEdge]) -> String {
    let mut out = String::with_capacity(scored.len() * 40);
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for s in scored {
        let label = s.label.map_or(String::new(), |l| l.to_string());
        writeln!(out, "{},{},{},{:.12},{}", s.t, s.src, s.dst, s.score, label).unwrap();
    }
    out
}

pub fn write_scores(scored: &[ScoredEdge], path: &Path) -> Result<()> {
    fs::write(path, scores_csv(scored)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    AnomalyRatio,
    ShiftSigma,
    EmbeddingDim,
    TrainRatio,
    Ablation,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::AnomalyRatio => "anomaly_ratio",
            Axis::ShiftSigma => "shift_sigma",
            Axis::EmbeddingDim => "embedding_dim",
            Axis::TrainRatio => "train_ratio",
            Axis::Ablation => "ablation",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [
            Axis::AnomalyRatio,
            Axis::ShiftSigma,
            Axis::EmbeddingDim,
            Axis::TrainRatio,
            Axis::Ablation,
        ]
        .into_iter()
        .find(|a| a.name() == name)
        .ok_or_else(|| EvalError::Spec(format!("unknown axis {name:?}")))
    }
}

/// Where each sweep point's data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Synthetic benchmark; drift, anomaly ratio and seed are set per point.
    Synthetic(SynthConfig),
    /// Unlabeled snapshots; test anomalies are injected per point.
    Ingested(SnapshotSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub experiment: String,
    pub axis: Axis,
    pub values: Vec<String>,
    pub repeats: usize,
    pub base: TrainConfig,
    pub data: DataSource,
    /// Variants run at every point (ignored on the ablation axis).
    pub variants: Vec<Variant>,
    /// Drift applied when the axis is not `shift_sigma`.
    pub shift_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub config: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let auc = r.auc.map_or("NaN".to_string(), |a| format!("{a:.8}"));
            writeln!(
                out,
                "{},{},{},{auc},{:.3}",
                self.experiment, r.setting, r.seed, r.runtime_s
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Mean AUC over the successful rows whose setting equals `setting`.
    pub fn mean_auc(&self, setting: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting)
            .filter_map(|r| r.auc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn write_report(report: &ExperimentReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json()?,
    };
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_f64(axis: Axis, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| EvalError::Spec(format!("{}: bad value {v:?}", axis.name())))
}

/// Settings (configuration and data) for one point of the sweep.
struct Point {
    value: String,
    seed: u64,
    configs: Vec<(String, TrainConfig)>,
    sigma: f64,
}

fn points(spec: &SweepSpec) -> Result<Vec<Point>> {
    if spec.values.is_empty() {
        return Err(EvalError::Spec("no values".into()));
    }
    if spec.repeats == 0 {
        return Err(EvalError::Spec("repeats must be at least 1".into()));
    }
    let variants = if spec.variants.is_empty() {
        vec![Variant::Full]
    } else {
        spec.variants.clone()
    };
    let mut out = Vec::new();
    for value in &spec.values {
        for r in 0..spec.repeats {
            let seed = spec.base.seed + r as u64;
            let mut base = TrainConfig {
                seed,
                ..spec.base.clone()
            };
            let mut sigma = spec.shift_sigma;
            let point_variants: Vec<Variant> = match spec.axis {
                Axis::AnomalyRatio => {
                    base.anomaly_ratio = parse_f64(spec.axis, value)?;
                    variants.clone()
                }
                Axis::ShiftSigma => {
                    sigma = parse_f64(spec.axis, value)?;
                    if sigma < 0.0 {
                        return Err(EvalError::Spec(format!("negative sigma {sigma}")));
                    }
                    variants.clone()
                }
                Axis::EmbeddingDim => {
                    base.dim = value.trim().parse().map_err(|_| {
                        EvalError::Spec(format!("embedding_dim: bad value {value:?}"))
                    })?;
                    variants.clone()
                }
                Axis::TrainRatio => {
                    base.train_ratio = parse_f64(spec.axis, value)?;
                    variants.clone()
                }
                Axis::Ablation => vec![Variant::parse(value.trim())?],
            };
            let multi = point_variants.len() > 1;
            let configs = point_variants
                .iter()
                .map(|v| {
                    let label = match (spec.axis, multi) {
                        (Axis::Ablation, _) => v.name().to_string(),
                        (_, true) => format!("{}={}/{}", spec.axis.name(), value.trim(), v.name()),
                        (_, false) => format!("{}={}", spec.axis.name(), value.trim()),
                    };
                    (label, v.apply(&base))
                })
                .collect();
            out.push(Point {
                value: value.trim().to_string(),
                seed,
                configs,
                sigma,
            });
        }
    }
    Ok(out)
}

fn point_data(spec: &SweepSpec, p: &Point) -> Result<SnapshotSequence> {
    let cfg = &p.configs[0].1;
    Ok(match &spec.data {
        DataSource::Synthetic(synth) => synth_nds_benchmark(&SynthConfig {
            drift_sigma: p.sigma,
            anomaly_ratio: cfg.anomaly_ratio,
            train_ratio: cfg.train_ratio,
            seed: p.seed,
            ..synth.clone()
        })
        .map_err(PipelineError::from)?,
        DataSource::Ingested(seq) => {
            let seq = seq
                .with_train_ratio(cfg.train_ratio)
                .map_err(PipelineError::from)?;
            let seq = if p.sigma > 0.0 {
                nds_perturb(&seq, p.sigma, derive_seed(p.seed, "sweep-drift", 0))
                    .map_err(PipelineError::from)?
            } else {
                seq
            };
            label_test_snapshots(&seq, cfg.anomaly_ratio, p.seed).map_err(PipelineError::from)?
        }
    })
}

fn run_point(spec: &SweepSpec, p: &Point) -> Vec<ReportRow> {
    let start = Instant::now();
    let result = (|| -> Result<Vec<(f64, f64)>> {
        let seq = point_data(spec, p)?;
        let configs: Vec<TrainConfig> = p.configs.iter().map(|(_, c)| c.clone()).collect();
        let bundles = train_shared(&seq, &configs)?;
        let shared = start.elapsed().as_secs_f64() / bundles.len() as f64;
        bundles
            .iter()
            .map(|b| {
                let t = Instant::now();
                let auc = auc_of(&detect(&seq, b)?)?;
                Ok((auc, shared + t.elapsed().as_secs_f64()))
            })
            .collect()
    })();
    match result {
        Ok(aucs) => p
            .configs
            .iter()
            .zip(aucs)
            .map(|((setting, _), (auc, runtime_s))| {
                info!("{setting} seed {}: auc {auc:.6}", p.seed);
                ReportRow {
                    setting: setting.clone(),
                    seed: p.seed,
                    auc: Some(auc),
                    runtime_s,
                    error: None,
                }
            })
            .collect(),
        Err(e) => {
            warn!("{} seed {} failed: {e}", p.value, p.seed);
            p.configs
                .iter()
                .map(|(setting, _)| ReportRow {
                    setting: setting.clone(),
                    seed: p.seed,
                    auc: None,
                    runtime_s: start.elapsed().as_secs_f64(),
                    error: Some(e.to_string()),
                })
                .collect()
        }
    }
}

/// Runs every (value, repeat) point, in parallel over `jobs` threads. Rows come
/// out in (value, seed, variant) order; failures are recorded as error rows.
pub fn run_sweep(spec: &SweepSpec, jobs: usize) -> Result<ExperimentReport> {
    let pts = points(spec)?;
    let rows: Vec<Vec<ReportRow>> = if jobs <= 1 {
        pts.iter().map(|p| run_point(spec, p)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| EvalError::Spec(e.to_string()))?;
        pool.install(|| pts.par_iter().map(|p| run_point(spec, p)).collect())
    };
    let mut config = spec.base.to_text();
    writeln!(config, "axis = {}", spec.axis.name()).unwrap();
    writeln!(config, "values = {}", spec.values.join(",")).unwrap();
    writeln!(config, "repeats = {}", spec.repeats).unwrap();
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        experiment: spec.experiment.clone(),
        config,
        rows: rows.into_iter().flatten().collect(),
    })
}
