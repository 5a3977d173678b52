//! The `openset-score` command line.
//!
//! Every command writes its primary output to `--out` (or stdout) and a
//! [`RunManifest`] next to it as `<out>.manifest.json`, or to `--manifest`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::embedding::{Gallery, ProbeSet};
use crate::error::{Error, Result};
use crate::gallery::{cluster_gallery, load_gallery, load_probes, write_gallery, ClusterConfig, ClusterCount};
use crate::metrics::{self, EvalProtocol, FnirRule};
use crate::scoring::{one_to_one_matrix, score_matrix, FusedRow, FusedScores, FusionMode, ScoreOptions};
use crate::similarity::SubjectScoring;
use crate::simulate::{self, FeatureSimConfig, FusionSite, ScoreSimConfig, SimBase, SweepParam};
use crate::theory::{self, ScoreStats};

#[derive(Parser, Debug)]
#[command(name = "openset-score", version, about = "Selective k-NN score fusion and open-set evaluation")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads: a positive count or `auto`.
    #[arg(long, global = true, env = "OPENSET_SCORE_THREADS")]
    threads: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Where to write the run manifest. Defaults to `<out>.manifest.json`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score probes against a gallery.
    Score(ScoreCmd),
    /// Open-set and verification metrics over repeated splits.
    Eval(EvalCmd),
    /// Predict whether k-NN fusion helps from score statistics.
    Predict(PredictCmd),
    /// Run one Monte Carlo experiment.
    Simulate(SimulateCmd),
    /// Run a Monte Carlo experiment over a parameter grid.
    Sweep(SweepCmd),
    /// Compress each gallery subject into k-means prototypes.
    Cluster(ClusterCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeName {
    Local,
    Naive,
    None,
    Max,
    Min,
    Mean,
    AddConst,
    DoubleMax,
    AvgTopk,
    OneToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScoringName {
    Center,
    RenormalizedCenter,
    MeanSample,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ScoringArgs {
    /// Fusion mode. `one-to-one` verifies each probe against each subject alone.
    #[arg(long, value_enum, default_value_t = ModeName::Local)]
    mode: ModeName,
    /// Neighbor rank for local, naive, avg-topk and one-to-one (default 1).
    #[arg(long)]
    k: Option<usize>,
    /// Constant for add-const (default 1).
    #[arg(long)]
    constant: Option<f64>,
    /// Prototypes per subject: a positive count or `inf`.
    #[arg(long)]
    clusters: Option<String>,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Use the smallest similarity when k exceeds the media count.
    #[arg(long)]
    clamp_k: bool,
    /// Take the k-th neighbor within each top subject instead of over all media.
    #[arg(long)]
    per_subject_knn: bool,
    #[arg(long, value_enum, default_value_t = ScoringName::Center)]
    subject_scoring: ScoringName,
}

impl ScoringArgs {
    fn mode(&self) -> Result<FusionMode> {
        let uses_k = matches!(
            self.mode,
            ModeName::Local | ModeName::Naive | ModeName::AvgTopk | ModeName::OneToOne
        );
        if self.k.is_some() && !uses_k {
            return Err(Error::InvalidConfig(format!("--k does not apply to mode {:?}", self.mode)));
        }
        if self.constant.is_some() && self.mode != ModeName::AddConst {
            return Err(Error::InvalidConfig("--constant only applies to add-const".into()));
        }
        if self.per_subject_knn && self.mode != ModeName::Local {
            return Err(Error::InvalidConfig("--per-subject-knn only applies to local".into()));
        }
        let k = self.k.unwrap_or(1);
        let mode = match self.mode {
            ModeName::Local | ModeName::OneToOne => FusionMode::LocalScore { k },
            ModeName::Naive => FusionMode::NaiveMean { k },
            ModeName::None => FusionMode::None,
            ModeName::Max => FusionMode::MaxPool,
            ModeName::Min => FusionMode::MinPool,
            ModeName::Mean => FusionMode::MeanPool,
            ModeName::AddConst => FusionMode::AddConst {
                c: self.constant.unwrap_or(1.0),
            },
            ModeName::DoubleMax => FusionMode::DoubleMax,
            ModeName::AvgTopk => FusionMode::AvgTopK { k },
        };
        mode.validate()?;
        Ok(mode)
    }

    fn options(&self) -> ScoreOptions {
        ScoreOptions {
            clamp_k: self.clamp_k,
            per_subject_knn: self.per_subject_knn,
            subject_scoring: match self.subject_scoring {
                ScoringName::Center => SubjectScoring::Center,
                ScoringName::RenormalizedCenter => SubjectScoring::RenormalizedCenter,
                ScoringName::MeanSample => SubjectScoring::MeanSample,
            },
        }
    }

    fn cluster_config(&self, seed: u64) -> Result<Option<ClusterConfig>> {
        let Some(c) = &self.clusters else {
            return Ok(None);
        };
        if self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("--max-iter must be positive and --tol non-negative".into()));
        }
        Ok(Some(ClusterConfig {
            clusters_per_subject: c.parse::<ClusterCount>()?,
            max_iterations: self.max_iter,
            convergence_tol: self.tol,
            seed,
        }))
    }

    /// Apply clustering, if requested, to the gallery.
    fn prepare(&self, gallery: Gallery, seed: u64) -> Result<Gallery> {
        match self.cluster_config(seed)? {
            Some(cfg) => Ok(cluster_gallery(&gallery, &cfg)?.into_gallery()),
            None => Ok(gallery),
        }
    }

    fn score(&self, probes: &ProbeSet, gallery: &Gallery) -> Result<FusedScores> {
        let mode = self.mode()?;
        if self.mode == ModeName::OneToOne {
            return one_to_one_matrix(probes, gallery, mode.k().unwrap_or(1), self.clamp_k);
        }
        score_matrix(probes, gallery, mode, &self.options())
    }
}

#[derive(Args, Debug, Serialize)]
struct ScoreCmd {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    probes: PathBuf,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Args, Debug, Serialize)]
struct ProtocolArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01, 0.05])]
    fpir: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01])]
    far: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 20])]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0.2)]
    nonmated_fraction: f64,
    /// Count a mated probe as missed only when its genuine score is below threshold.
    #[arg(long)]
    threshold_only: bool,
}

impl ProtocolArgs {
    fn protocol(&self, seed: u64) -> EvalProtocol {
        EvalProtocol {
            fpir_targets: self.fpir.clone(),
            far_targets: self.far.clone(),
            ranks: self.ranks.clone(),
            runs: self.runs,
            nonmated_fraction: self.nonmated_fraction,
            seed,
            fnir_rule: if self.threshold_only {
                FnirRule::ThresholdOnly
            } else {
                FnirRule::Standard
            },
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalCmd {
    #[arg(long, required_unless_present = "scores")]
    gallery: Option<PathBuf>,
    /// Probe file; supplies the truth labels.
    #[arg(long)]
    probes: PathBuf,
    /// Evaluate a score CSV written by `score` instead of scoring.
    #[arg(long, conflicts_with = "gallery")]
    scores: Option<PathBuf>,
    /// Evaluate the data as given, without removing subjects.
    #[arg(long)]
    no_split: bool,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Args, Debug, Serialize)]
struct PredictCmd {
    /// Score statistics as JSON (mu1 … sigma4, n1, n2, n3, m, r1, r2).
    #[arg(long, conflicts_with_all = ["gallery", "probes"])]
    stats: Option<PathBuf>,
    #[arg(long, requires = "probes", required_unless_present = "stats")]
    gallery: Option<PathBuf>,
    #[arg(long, requires = "gallery")]
    probes: Option<PathBuf>,
    /// Tolerated false positives; default ⌊fpir·N2⌋.
    #[arg(long)]
    r1: Option<u64>,
    /// Tolerated false accepts; default ⌊far·N3⌋.
    #[arg(long)]
    r2: Option<u64>,
    #[arg(long, default_value_t = 0.01)]
    fpir: f64,
    #[arg(long, default_value_t = 0.01)]
    far: f64,
    /// Accept score lists with zero spread.
    #[arg(long)]
    allow_zero_sigma: bool,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SimKind {
    Features,
    Scores,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SiteName {
    Theorem,
    Algorithm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RuleName {
    Standard,
    ThresholdOnly,
}

#[derive(Args, Debug, Serialize)]
struct SimArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0.01)]
    fpir: f64,
    #[arg(long, default_value_t = 0.01)]
    far: f64,
    /// Default: standard for features, threshold-only for scores.
    #[arg(long, value_enum)]
    fnir_rule: Option<RuleName>,
    #[arg(long, default_value_t = 50)]
    n_classes: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.2)]
    nonmated_fraction: f64,
    #[arg(long, default_value_t = 0.6)]
    mu1: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma1: f64,
    #[arg(long, default_value_t = 0.2)]
    mu2: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma2: f64,
    #[arg(long, default_value_t = 0.5)]
    mu3: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma3: f64,
    #[arg(long, default_value_t = 0.3)]
    mu4: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma4: f64,
    #[arg(long, default_value_t = 100)]
    n_mated: usize,
    #[arg(long, default_value_t = 500)]
    n_nonmated: usize,
    #[arg(long, default_value_t = 10)]
    n_subjects: usize,
    #[arg(long, value_enum, default_value_t = SiteName::Theorem)]
    site: SiteName,
}

impl SimArgs {
    fn base(&self, kind: SimKind, seed: u64) -> SimBase {
        let rule = |default| match self.fnir_rule {
            Some(RuleName::Standard) => FnirRule::Standard,
            Some(RuleName::ThresholdOnly) => FnirRule::ThresholdOnly,
            None => default,
        };
        match kind {
            SimKind::Features => SimBase::Features(FeatureSimConfig {
                n_classes: self.n_classes,
                samples_per_class: self.samples,
                sigma: self.sigma,
                nonmated_fraction: self.nonmated_fraction,
                k: self.k,
                trials: self.trials,
                seed,
                fpir_target: self.fpir,
                far_target: self.far,
                fnir_rule: rule(FnirRule::Standard),
            }),
            SimKind::Scores => SimBase::Scores(ScoreSimConfig {
                mu1: self.mu1,
                sigma1: self.sigma1,
                mu2: self.mu2,
                sigma2: self.sigma2,
                mu3: self.mu3,
                sigma3: self.sigma3,
                mu4: self.mu4,
                sigma4: self.sigma4,
                n_mated: self.n_mated,
                n_nonmated: self.n_nonmated,
                n_subjects: self.n_subjects,
                mode: match self.site {
                    SiteName::Theorem => FusionSite::TheoremFaithful,
                    SiteName::Algorithm => FusionSite::AlgorithmFaithful,
                },
                trials: self.trials,
                seed,
                fpir_target: self.fpir,
                far_target: self.far,
                fnir_rule: rule(FnirRule::ThresholdOnly),
            }),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateCmd {
    #[arg(long, value_enum, default_value_t = SimKind::Features)]
    kind: SimKind,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args, Debug, Serialize)]
struct SweepCmd {
    /// `k` or `sigma` (feature simulation), `mu3` (score simulation).
    #[arg(long)]
    param: String,
    /// `start:stop:step`, `start:stop` (step 1) or a comma-separated list.
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args, Debug, Serialize)]
struct ClusterCmd {
    #[arg(long)]
    gallery: PathBuf,
    /// Prototypes per subject: a positive count or `inf`.
    #[arg(long)]
    clusters: String,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

/// Everything needed to re-run a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of the primary output.
    pub output_sha256: String,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub duration_seconds: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Parse `start:stop:step`, `start:stop` or `a,b,c`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::InvalidGrid(format!("{m}: {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let (start, stop, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1.0),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(bad("expected start:stop[:step]")),
        };
        if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
            return Err(bad("range needs start <= stop and a positive step"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        if count > 1_000_000 {
            return Err(bad("too many grid points"));
        }
        Ok((0..count).map(|i| start + i as f64 * step).collect())
    } else {
        spec.split(',').map(num).collect()
    }
}

fn scores_csv(fused: &FusedScores) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut header = vec!["probe_id".to_owned()];
    header.extend(fused.subject_ids.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (id, row) in fused.probe_ids.iter().zip(&fused.rows) {
        let mut rec = vec![id.clone()];
        rec.extend(row.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[derive(Serialize)]
struct ScoresJson<'a> {
    probe_ids: &'a [String],
    subject_ids: &'a [String],
    scores: Vec<&'a [f64]>,
    increments: Vec<Option<f64>>,
    masks: Vec<&'a [bool]>,
}

/// Read a `probe_id,<subject>...` score matrix and align it with `probes`.
fn read_scores(path: &Path, probes: &ProbeSet) -> Result<(FusedScores, ProbeSet)> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path).map_err(|e| Error::Parse {
        line: 1,
        column: 1,
        message: e.to_string(),
    })?;
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        column: 1,
        message: e.to_string(),
    })?;
    if headers.get(0) != Some("probe_id") {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "first column must be probe_id".into(),
        });
    }
    let subject_ids: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let by_id: BTreeMap<&str, &crate::embedding::Probe> = probes.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut probe_ids = Vec::new();
    let mut rows = Vec::new();
    let mut ordered = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            column: 1,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = &record[0];
        let probe = by_id.get(id).ok_or_else(|| Error::Parse {
            line,
            column: 1,
            message: format!("probe {id:?} is not in the probe file"),
        })?;
        let values = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, v)| {
                v.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    column: j + 2,
                    message: format!("invalid number {v:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        crate::vector::check_finite(&values).map_err(|_| Error::Parse {
            line,
            column: 2,
            message: "non-finite score".into(),
        })?;
        probe_ids.push(id.to_owned());
        rows.push(FusedRow {
            mask: vec![false; values.len()],
            values,
            increment: None,
        });
        ordered.push((*probe).clone());
    }
    let base = rows.iter().map(|r| r.values.clone()).collect();
    Ok((
        FusedScores {
            probe_ids,
            subject_ids,
            base,
            rows,
        },
        ProbeSet::new(ordered)?,
    ))
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// `field,value` rows of a flattened JSON object.
fn flat_csv(value: &serde_json::Value) -> Vec<u8> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            serde_json::Value::Null => out.push((prefix.to_owned(), String::new())),
            serde_json::Value::String(s) => out.push((prefix.to_owned(), s.clone())),
            other => out.push((prefix.to_owned(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    walk("", value, &mut rows);
    let mut text = String::from("field,value\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    text.into_bytes()
}

struct Outcome {
    output: Vec<u8>,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    /// Printed to stderr after the output is written.
    note: Option<String>,
}

fn run_score(cmd: &ScoreCmd, seed: u64, format: Format) -> Result<Outcome> {
    cmd.scoring.mode()?;
    let gallery = cmd.scoring.prepare(load_gallery(&cmd.gallery)?, seed)?;
    let probes = load_probes(&cmd.probes)?;
    let fused = cmd.scoring.score(&probes, &gallery)?;
    let output = match format {
        Format::Csv => scores_csv(&fused)?,
        Format::Json => to_json(&ScoresJson {
            probe_ids: &fused.probe_ids,
            subject_ids: &fused.subject_ids,
            scores: fused.rows.iter().map(|r| r.values.as_slice()).collect(),
            increments: fused.rows.iter().map(|r| r.increment).collect(),
            masks: fused.rows.iter().map(|r| r.mask.as_slice()).collect(),
        })?,
    };
    Ok(Outcome {
        output,
        config: serde_json::to_value(cmd)?,
        inputs: vec![cmd.gallery.clone(), cmd.probes.clone()],
        note: None,
    })
}

fn run_eval(cmd: &EvalCmd, seed: u64, format: Format) -> Result<Outcome> {
    let protocol = cmd.protocol.protocol(seed);
    protocol.validate()?;
    let probes = load_probes(&cmd.probes)?;
    let mut inputs = vec![cmd.probes.clone()];
    let report = if let Some(scores) = &cmd.scores {
        inputs.push(scores.clone());
        let (fused, aligned) = read_scores(scores, &probes)?;
        metrics::report_once(&fused, &aligned, &protocol)?
    } else {
        let path = cmd.gallery.as_ref().expect("clap requires --gallery without --scores");
        inputs.insert(0, path.clone());
        cmd.scoring.mode()?;
        let gallery = cmd.scoring.prepare(load_gallery(path)?, seed)?;
        if cmd.no_split {
            probes.validate_against(&gallery)?;
            let fused = cmd.scoring.score(&probes, &gallery)?;
            metrics::report_once(&fused, &probes, &protocol)?
        } else {
            metrics::split_runs(&gallery, &probes, &protocol, |g, p| cmd.scoring.score(p, g))?
        }
    };
    let output = match format {
        Format::Json => to_json(&report)?,
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
    };
    Ok(Outcome {
        output,
        config: serde_json::to_value(cmd)?,
        inputs,
        note: None,
    })
}

#[derive(Serialize)]
struct Prediction {
    stats: ScoreStats,
    verdict: theory::TheoremVerdict,
}

fn tolerated(target: f64, n: u64) -> u64 {
    ((target * n as f64 + 1e-9).floor() as u64).max(1)
}

fn run_predict(cmd: &PredictCmd, seed: u64, format: Format) -> Result<Outcome> {
    let (mut stats, inputs) = if let Some(path) = &cmd.stats {
        let stats: ScoreStats = serde_json::from_slice(&std::fs::read(path)?)?;
        (stats, vec![path.clone()])
    } else {
        let (gallery_path, probe_path) = (cmd.gallery.as_ref().unwrap(), cmd.probes.as_ref().unwrap());
        cmd.scoring.mode()?;
        let gallery = cmd.scoring.prepare(load_gallery(gallery_path)?, seed)?;
        let probes = load_probes(probe_path)?;
        probes.validate_against(&gallery)?;
        let fused = cmd.scoring.score(&probes, &gallery)?;
        let part = metrics::partition_scores(&fused.baseline(), &probes)?;
        let r1 = tolerated(cmd.fpir, part.nonmated_maxima.len() as u64);
        let r2 = tolerated(cmd.far, part.imposter.len() as u64);
        let stats = theory::estimate_stats(&part, r1, r2, cmd.allow_zero_sigma)?;
        (stats, vec![gallery_path.clone(), probe_path.clone()])
    };
    if let Some(r1) = cmd.r1 {
        stats.r1 = r1;
    }
    if let Some(r2) = cmd.r2 {
        stats.r2 = r2;
    }
    let verdict = theory::predict(&stats)?;
    let prediction = Prediction { stats, verdict };
    let output = match format {
        Format::Json => to_json(&prediction)?,
        Format::Csv => flat_csv(&serde_json::to_value(&prediction)?),
    };
    Ok(Outcome {
        output,
        config: serde_json::to_value(cmd)?,
        inputs,
        note: None,
    })
}

fn sweep_output(result: &simulate::SweepResult, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => to_json(result),
        Format::Csv => {
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            Ok(buf)
        }
    }
}

fn run_simulate(cmd: &SimulateCmd, seed: u64, format: Format) -> Result<Outcome> {
    let base = cmd.sim.base(cmd.kind, seed);
    // A single run is the one-point sweep over the experiment's own parameter.
    let (param, value) = match &base {
        SimBase::Features(cfg) => (SweepParam::K, cfg.k as f64),
        SimBase::Scores(cfg) => (SweepParam::Mu3, cfg.mu3),
    };
    let result = simulate::sweep(param, &[value], &base)?;
    Ok(Outcome {
        output: sweep_output(&result, format)?,
        config: serde_json::json!({ "command": cmd, "resolved": base }),
        inputs: Vec::new(),
        note: None,
    })
}

fn run_sweep(cmd: &SweepCmd, seed: u64, format: Format) -> Result<Outcome> {
    let param: SweepParam = cmd.param.parse()?;
    let grid = parse_grid(&cmd.grid)?;
    let kind = match param {
        SweepParam::K | SweepParam::Sigma => SimKind::Features,
        SweepParam::Mu3 => SimKind::Scores,
    };
    let base = cmd.sim.base(kind, seed);
    let result = simulate::sweep(param, &grid, &base)?;
    let note = result
        .correlation
        .map(|c| format!("gap vs improvement: pearson r = {:.4}, slope = {:.6}", c.pearson_r, c.slope));
    Ok(Outcome {
        output: sweep_output(&result, format)?,
        config: serde_json::json!({ "command": cmd, "grid": grid, "resolved": base }),
        inputs: Vec::new(),
        note,
    })
}

#[derive(Serialize)]
struct ClusterJson<'a> {
    compression_ratio: f64,
    original_media: usize,
    compact_media: usize,
    provenance: &'a [crate::gallery::SubjectProvenance],
}

fn run_cluster(cmd: &ClusterCmd, seed: u64, format: Format) -> Result<Outcome> {
    let config = ClusterConfig {
        clusters_per_subject: cmd.clusters.parse()?,
        max_iterations: cmd.max_iter,
        convergence_tol: cmd.tol,
        seed,
    };
    if config.max_iterations == 0 || !(config.convergence_tol >= 0.0) {
        return Err(Error::InvalidConfig("--max-iter must be positive and --tol non-negative".into()));
    }
    let gallery = load_gallery(&cmd.gallery)?;
    let compact = cluster_gallery(&gallery, &config)?;
    let ratio = compact.compression_ratio();
    let output = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_gallery(compact.gallery(), &mut buf)?;
            buf
        }
        Format::Json => to_json(&ClusterJson {
            compression_ratio: ratio,
            original_media: compact.original_media(),
            compact_media: compact.gallery().total_media(),
            provenance: compact.provenance(),
        })?,
    };
    Ok(Outcome {
        output,
        config: serde_json::json!({ "command": cmd, "resolved": config }),
        inputs: vec![cmd.gallery.clone()],
        note: Some(format!(
            "compression ratio: {:.2}% ({} of {} media)",
            100.0 * ratio,
            compact.gallery().total_media(),
            compact.original_media()
        )),
    })
}

fn thread_count(spec: Option<&str>) -> Result<Option<usize>> {
    match spec.map(str::trim) {
        None | Some("") | Some("auto") => Ok(None),
        Some(n) => match n.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::InvalidConfig(format!(
                "threads must be a positive integer or 'auto', got {n:?}"
            ))),
            Ok(n) => Ok(Some(n)),
        },
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let threads = thread_count(cli.threads.as_deref())?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker threads: {e}")))?;
    let (name, outcome) = pool.install(|| -> Result<(&str, Outcome)> {
        Ok(match &cli.command {
            Command::Score(c) => ("score", run_score(c, cli.seed, cli.format)?),
            Command::Eval(c) => ("eval", run_eval(c, cli.seed, cli.format)?),
            Command::Predict(c) => ("predict", run_predict(c, cli.seed, cli.format)?),
            Command::Simulate(c) => ("simulate", run_simulate(c, cli.seed, cli.format)?),
            Command::Sweep(c) => ("sweep", run_sweep(c, cli.seed, cli.format)?),
            Command::Cluster(c) => ("cluster", run_cluster(c, cli.seed, cli.format)?),
        })
    })?;
    match &cli.out {
        Some(path) => std::fs::write(path, &outcome.output)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&outcome.output)?;
            stdout.flush()?;
        }
    }
    if let Some(note) = &outcome.note {
        eprintln!("{note}");
    }
    let manifest_path = cli.manifest.clone().or_else(|| {
        cli.out.as_ref().map(|p| {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        })
    });
    if let Some(path) = manifest_path {
        let inputs = outcome
            .inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), digest_file(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let manifest = RunManifest {
            command: name.to_owned(),
            config: serde_json::json!({
                "format": cli.format,
                "out": cli.out,
                "arguments": outcome.config,
            }),
            inputs,
            output_sha256: sha256_hex(&outcome.output),
            seed: cli.seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            threads: pool.current_num_threads(),
            duration_seconds: started.elapsed().as_secs_f64(),
        };
        std::fs::write(path, to_json(&manifest)?)?;
    }
    Ok(())
}

/// Run the command line and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("1:4").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let g = parse_grid("0.3:0.5:0.1").unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[2] - 0.5).abs() < 1e-15);
        assert_eq!(parse_grid("0.02, 0.03").unwrap(), vec![0.02, 0.03]);
        for bad in ["", "a:b", "1:0", "1:2:0", "1:2:3:4"] {
            assert!(matches!(parse_grid(bad), Err(Error::InvalidGrid(_))), "{bad}");
        }
    }

    #[test]
    fn threads() {
        assert_eq!(thread_count(None).unwrap(), None);
        assert_eq!(thread_count(Some("auto")).unwrap(), None);
        assert_eq!(thread_count(Some("3")).unwrap(), Some(3));
        assert!(thread_count(Some("0")).is_err());
    }

    #[test]
    fn k_only_with_knn_modes() {
        let cli = Cli::try_parse_from(["x", "score", "--gallery", "g", "--probes", "p", "--mode", "none", "--k", "2"]).unwrap();
        let Command::Score(cmd) = cli.command else { unreachable!() };
        assert!(matches!(cmd.scoring.mode(), Err(Error::InvalidConfig(_))));
        let cli = Cli::try_parse_from(["x", "score", "--gallery", "g", "--probes", "p", "--k", "3"]).unwrap();
        let Command::Score(cmd) = cli.command else { unreachable!() };
        assert_eq!(cmd.scoring.mode().unwrap(), FusionMode::LocalScore { k: 3 });
    }
}
