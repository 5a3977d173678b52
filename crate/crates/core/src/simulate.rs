//! Monte Carlo experiments: Gaussian score matrices, unit-circle feature
//! datasets, and parameter sweeps over them.
//!
//! Every trial draws from its own ChaCha8 stream derived from
//! `(seed, trial)`; Gaussian variates come from the ziggurat sampler in
//! `rand_distr::StandardNormal`. Trials run in parallel and are reduced in
//! trial order, so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, Gallery, Probe, ProbeSet, Truth};
use crate::error::{Error, Result};
use crate::metrics::{self, fnir_at_fpir, mean_ci, partition_scores, rank_of, tar_at_far, FnirRule};
use crate::rng;
use crate::scoring::{local_score, score_matrix, FusionMode, ScoreOptions};
use crate::theory::{self, ScoreStats};

/// Normal quantile for two-sided 99% intervals.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Where the k-NN increment lands in a simulated score matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionSite {
    /// On the genuine entry of mated rows and the largest entry of
    /// non-mated rows.
    #[default]
    TheoremFaithful,
    /// On every entry tied at the row maximum.
    AlgorithmFaithful,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSimConfig {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub mu3: f64,
    pub sigma3: f64,
    pub mu4: f64,
    pub sigma4: f64,
    pub n_mated: usize,
    pub n_nonmated: usize,
    pub n_subjects: usize,
    pub mode: FusionSite,
    pub trials: usize,
    pub seed: u64,
    pub fpir_target: f64,
    pub far_target: f64,
    pub fnir_rule: FnirRule,
}

impl Default for ScoreSimConfig {
    fn default() -> Self {
        Self {
            mu1: 0.6,
            sigma1: 0.1,
            mu2: 0.2,
            sigma2: 0.1,
            mu3: 0.5,
            sigma3: 0.1,
            mu4: 0.3,
            sigma4: 0.1,
            n_mated: 100,
            n_nonmated: 500,
            n_subjects: 10,
            mode: FusionSite::TheoremFaithful,
            trials: 1000,
            seed: 0,
            fpir_target: 0.01,
            far_target: 0.01,
            fnir_rule: FnirRule::ThresholdOnly,
        }
    }
}

fn check_target(name: &str, t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be in (0, 1), got {t}")))
    }
}

impl ScoreSimConfig {
    pub fn validate(&self) -> Result<()> {
        let params = [self.mu1, self.mu2, self.mu3, self.mu4];
        let sigmas = [self.sigma1, self.sigma2, self.sigma3, self.sigma4];
        if params.iter().chain(&sigmas).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("distribution parameters must be finite".into()));
        }
        if sigmas.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidConfig("standard deviations must be non-negative".into()));
        }
        if self.n_mated == 0 || self.n_nonmated == 0 || self.n_subjects < 2 || self.trials == 0 {
            return Err(Error::InvalidConfig(
                "need at least 1 mated probe, 1 non-mated probe, 2 subjects and 1 trial".into(),
            ));
        }
        check_target("fpir target", self.fpir_target)?;
        check_target("far target", self.far_target)
    }

    /// Population statistics the simulation draws from, with the tolerated
    /// counts implied by the targets.
    pub fn stats(&self) -> ScoreStats {
        let n2 = self.n_nonmated as u64;
        let n3 = (self.n_mated * (self.n_subjects - 1) + self.n_nonmated * self.n_subjects) as u64;
        ScoreStats {
            mu1: self.mu1,
            sigma1: self.sigma1,
            mu2: self.mu2,
            sigma2: self.sigma2,
            mu3: self.mu3,
            sigma3: self.sigma3,
            mu4: self.mu4,
            sigma4: self.sigma4,
            n1: self.n_mated as u64,
            n2,
            n3,
            m: self.n_subjects as u64,
            r1: ((self.fpir_target * n2 as f64 + 1e-9).floor() as u64).max(1),
            r2: ((self.far_target * n3 as f64 + 1e-9).floor() as u64).max(1),
        }
    }
}

/// Metrics of one trial with and without fusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub fnir_without: f64,
    pub fnir_with: f64,
    pub tar_without: f64,
    pub tar_with: f64,
    /// Fusion predictor gap (rhs − lhs) fitted to this trial's raw scores.
    pub gap: Option<f64>,
}

fn gauss(rng: &mut impl Rng, mu: f64, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mu + sigma * z
}

#[derive(Default)]
struct Lists {
    genuine: Vec<f64>,
    imposter: Vec<f64>,
    maxima: Vec<f64>,
    rank1: Vec<bool>,
}

impl Lists {
    fn mated(&mut self, row: &[f64], t: usize) {
        self.genuine.push(row[t]);
        self.imposter.extend(row.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, &v)| v));
        self.rank1.push(rank_of(row, t) == 1);
    }

    fn nonmated(&mut self, row: &[f64]) {
        self.imposter.extend_from_slice(row);
        self.maxima.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    fn metrics(&self, fpir: f64, far: f64, rule: FnirRule) -> Result<(f64, f64)> {
        let fnir = fnir_at_fpir(&self.genuine, &self.maxima, &self.rank1, fpir, rule)?.value;
        let tar = tar_at_far(&self.genuine, &self.imposter, far)?.value;
        Ok((fnir, tar))
    }
}

fn score_trial(config: &ScoreSimConfig, trial: usize) -> Result<TrialOutcome> {
    let mut rng = rng::stream(config.seed, &[trial as u64]);
    let (mut raw, mut fused) = (Lists::default(), Lists::default());
    let m = config.n_subjects;
    let mut row = vec![0.0; m];
    for p in 0..config.n_mated {
        let t = p % m;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == t {
                gauss(&mut rng, config.mu1, config.sigma1)
            } else {
                gauss(&mut rng, config.mu2, config.sigma2)
            };
        }
        let knn = gauss(&mut rng, config.mu3, config.sigma3);
        raw.mated(&row, t);
        match config.mode {
            FusionSite::TheoremFaithful => {
                row[t] += knn;
                fused.mated(&row, t);
            }
            FusionSite::AlgorithmFaithful => fused.mated(&local_score(&row, knn)?.values, t),
        }
    }
    for _ in 0..config.n_nonmated {
        for v in row.iter_mut() {
            *v = gauss(&mut rng, config.mu2, config.sigma2);
        }
        let knn = gauss(&mut rng, config.mu4, config.sigma4);
        raw.nonmated(&row);
        match config.mode {
            FusionSite::TheoremFaithful => {
                let top = (0..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                row[top] += knn;
                fused.nonmated(&row);
            }
            FusionSite::AlgorithmFaithful => fused.nonmated(&local_score(&row, knn)?.values),
        }
    }
    let (fnir_without, tar_without) = raw.metrics(config.fpir_target, config.far_target, config.fnir_rule)?;
    let (fnir_with, tar_with) = fused.metrics(config.fpir_target, config.far_target, config.fnir_rule)?;
    Ok(TrialOutcome {
        fnir_without,
        fnir_with,
        tar_without,
        tar_with,
        gap: None,
    })
}

/// Per-trial metrics of Gaussian score matrices. Mated probe `p` belongs to
/// subject `p mod n_subjects`.
pub fn simulate_score_matrices(config: &ScoreSimConfig) -> Result<Vec<TrialOutcome>> {
    config.validate()?;
    let gap = theory::open_set_condition(&config.stats()).ok().map(|c| c.gap);
    (0..config.trials)
        .into_par_iter()
        .map(|t| score_trial(config, t).map(|o| TrialOutcome { gap, ..o }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSimConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    pub nonmated_fraction: f64,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub fpir_target: f64,
    pub far_target: f64,
    pub fnir_rule: FnirRule,
}

impl Default for FeatureSimConfig {
    fn default() -> Self {
        Self {
            n_classes: 50,
            samples_per_class: 10,
            sigma: 0.05,
            nonmated_fraction: 0.2,
            k: 10,
            trials: 1000,
            seed: 0,
            fpir_target: 0.01,
            far_target: 0.01,
            fnir_rule: FnirRule::Standard,
        }
    }
}

impl FeatureSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.samples_per_class == 0 || self.trials == 0 {
            return Err(Error::InvalidConfig(
                "need at least 2 classes, 1 sample per class and 1 trial".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.nonmated_fraction) {
            return Err(Error::InvalidConfig(format!(
                "non-mated fraction must be in [0, 1), got {}",
                self.nonmated_fraction
            )));
        }
        let nonmated = self.num_nonmated();
        if nonmated == 0 || nonmated == self.n_classes {
            return Err(Error::InsufficientSubjects {
                subjects: self.n_classes,
                fraction: self.nonmated_fraction,
            });
        }
        if self.k == 0 {
            return Err(Error::ZeroK);
        }
        check_target("fpir target", self.fpir_target)?;
        check_target("far target", self.far_target)
    }

    pub fn num_nonmated(&self) -> usize {
        (self.nonmated_fraction * self.n_classes as f64 + 1e-9).floor() as usize
    }
}

/// Anchor of class `i` of `n` on the unit circle.
pub fn class_anchor(i: usize, n: usize) -> [f64; 2] {
    let angle = std::f64::consts::TAU * i as f64 / n as f64;
    [angle.cos(), angle.sin()]
}

/// Draw the gallery and probes of one trial. Non-mated classes contribute
/// probes only. Samples are normalized after the Gaussian perturbation.
pub fn generate_feature_dataset(config: &FeatureSimConfig, trial: usize) -> Result<(Gallery, ProbeSet)> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[trial as u64]);
    let n = config.n_classes;
    let mut nonmated = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, config.num_nonmated()) {
        nonmated[i] = true;
    }
    let mut media = Vec::new();
    let mut probes = Vec::new();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, anchor: [f64; 2]| {
        [gauss(rng, anchor[0], config.sigma), gauss(rng, anchor[1], config.sigma)]
    };
    for (i, &open) in nonmated.iter().enumerate() {
        let anchor = class_anchor(i, n);
        let subject = format!("c{i}");
        if !open {
            for j in 0..config.samples_per_class {
                media.push(Embedding::new(subject.clone(), format!("g{j}"), &draw(&mut rng, anchor))?);
            }
        }
        for j in 0..config.samples_per_class {
            let embedding = Embedding::new(subject.clone(), format!("p{j}"), &draw(&mut rng, anchor))?;
            probes.push(Probe {
                id: format!("{subject}/p{j}"),
                embedding,
                truth: if open { Truth::NonMated } else { Truth::Mated(subject.clone()) },
            });
        }
    }
    Ok((Gallery::from_embeddings(media)?, ProbeSet::new(probes)?))
}

fn feature_trial(config: &FeatureSimConfig, trial: usize) -> Result<TrialOutcome> {
    let (gallery, probes) = generate_feature_dataset(config, trial)?;
    let options = ScoreOptions {
        clamp_k: true,
        ..Default::default()
    };
    let fused = score_matrix(&probes, &gallery, FusionMode::LocalScore { k: config.k }, &options)?;
    let protocol = metrics::EvalProtocol {
        fpir_targets: vec![config.fpir_target],
        far_targets: vec![config.far_target],
        ranks: vec![1],
        runs: 1,
        nonmated_fraction: config.nonmated_fraction,
        seed: config.seed,
        fnir_rule: config.fnir_rule,
    };
    let baseline = fused.baseline();
    let with = metrics::evaluate(&fused, &probes, &protocol)?;
    let without = metrics::evaluate(&baseline, &probes, &protocol)?;
    let part = partition_scores(&baseline, &probes)?;
    let r1 = ((config.fpir_target * part.nonmated_maxima.len() as f64 + 1e-9).floor() as u64).max(1);
    let r2 = ((config.far_target * part.imposter.len() as f64 + 1e-9).floor() as u64).max(1);
    let gap = theory::estimate_stats(&part, r1, r2, true)
        .and_then(|s| theory::open_set_condition(&s))
        .ok()
        .map(|c| c.gap);
    Ok(TrialOutcome {
        fnir_without: without.fnir[0].value,
        fnir_with: with.fnir[0].value,
        tar_without: without.tar[0].value,
        tar_with: with.tar[0].value,
        gap,
    })
}

/// Per-trial metrics of unit-circle feature datasets scored by LocalScore(k).
pub fn simulate_features(config: &FeatureSimConfig) -> Result<Vec<TrialOutcome>> {
    config.validate()?;
    (0..config.trials)
        .into_par_iter()
        .map(|t| feature_trial(config, t))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    K,
    Sigma,
    Mu3,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::K => "k",
            SweepParam::Sigma => "sigma",
            SweepParam::Mu3 => "mu3",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepParam::K),
            "sigma" => Ok(SweepParam::Sigma),
            "mu3" => Ok(SweepParam::Mu3),
            other => Err(Error::InvalidConfig(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// The experiment a sweep varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimBase {
    Features(FeatureSimConfig),
    Scores(ScoreSimConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub trials: usize,
    pub fnir_mean: f64,
    pub fnir_ci99: f64,
    pub fnir_baseline: f64,
    pub fnir_baseline_ci99: f64,
    pub tar: f64,
    pub tar_baseline: f64,
    /// Mean over trials of the predictor gap, when every trial had one.
    pub gap: Option<f64>,
}

impl SweepPoint {
    /// Baseline FNIR minus fused FNIR; positive when fusion helps.
    pub fn improvement(&self) -> f64 {
        self.fnir_baseline - self.fnir_mean
    }

    fn from_trials(value: f64, trials: &[TrialOutcome]) -> Result<Self> {
        let col = |f: fn(&TrialOutcome) -> f64| trials.iter().map(f).collect::<Vec<_>>();
        let (fnir_mean, fnir_ci99) = mean_ci(&col(|t| t.fnir_with), Z99)?;
        let (fnir_baseline, fnir_baseline_ci99) = mean_ci(&col(|t| t.fnir_without), Z99)?;
        let gaps: Option<Vec<f64>> = trials.iter().map(|t| t.gap).collect();
        Ok(Self {
            value,
            trials: trials.len(),
            fnir_mean,
            fnir_ci99,
            fnir_baseline,
            fnir_baseline_ci99,
            tar: mean_ci(&col(|t| t.tar_with), Z99)?.0,
            tar_baseline: mean_ci(&col(|t| t.tar_without), Z99)?.0,
            gap: gaps.map(|g| mean_ci(&g, Z99).map(|m| m.0)).transpose()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    /// Gap versus improvement across points; absent when undefined.
    pub correlation: Option<Correlation>,
}

impl SweepResult {
    /// Rows of `param,value,fnir_mean,fnir_ci99,fnir_baseline,tar,tar_baseline,gap`.
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
        w.write_record(["param", "value", "fnir_mean", "fnir_ci99", "fnir_baseline", "tar", "tar_baseline", "gap"])
            .map_err(io)?;
        for p in &self.points {
            w.write_record([
                self.param.to_string(),
                p.value.to_string(),
                p.fnir_mean.to_string(),
                p.fnir_ci99.to_string(),
                p.fnir_baseline.to_string(),
                p.tar.to_string(),
                p.tar_baseline.to_string(),
                p.gap.map_or(String::new(), |g| g.to_string()),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validate_grid(param: SweepParam, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("grid is empty".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGrid("grid values must be finite".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("grid must be strictly increasing".into()));
    }
    if param == SweepParam::K && grid.iter().any(|&k| k < 1.0 || k.fract() != 0.0) {
        return Err(Error::InvalidGrid("k values must be positive integers".into()));
    }
    Ok(())
}

/// Run the experiment at every grid value. Point `i` uses the seed
/// `derive_seed(seed, [i])`, so points draw independent data.
pub fn sweep(param: SweepParam, grid: &[f64], base: &SimBase) -> Result<SweepResult> {
    validate_grid(param, grid)?;
    let points = grid
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let trials = match (param, base) {
                (SweepParam::K | SweepParam::Sigma, SimBase::Features(cfg)) => {
                    let mut cfg = FeatureSimConfig {
                        seed: rng::derive_seed(cfg.seed, &[i as u64]),
                        ..cfg.clone()
                    };
                    match param {
                        SweepParam::K => cfg.k = value as usize,
                        _ => cfg.sigma = value,
                    }
                    simulate_features(&cfg)?
                }
                (SweepParam::Mu3, SimBase::Scores(cfg)) => simulate_score_matrices(&ScoreSimConfig {
                    seed: rng::derive_seed(cfg.seed, &[i as u64]),
                    mu3: value,
                    ..cfg.clone()
                })?,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "parameter {param} cannot be swept on this simulation"
                    )))
                }
            };
            SweepPoint::from_trials(value, &trials)
        })
        .collect::<Result<Vec<_>>>()?;
    let correlation = gap_improvement_correlation(&points)
        .ok()
        .map(|(pearson_r, slope)| Correlation { pearson_r, slope });
    Ok(SweepResult {
        param,
        points,
        correlation,
    })
}

/// Pearson r and slope of FNIR improvement against the predictor gap.
pub fn gap_improvement_correlation(points: &[SweepPoint]) -> Result<(f64, f64)> {
    let (gaps, gains): (Vec<f64>, Vec<f64>) = points
        .iter()
        .map(|p| {
            p.gap
                .map(|g| (g, p.improvement()))
                .ok_or_else(|| Error::DegenerateSample(format!("no predictor gap at {}", p.value)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    metrics::pearson(&gaps, &gains)
}

/// Where the improvement changes sign along the sweep, by linear
/// interpolation between neighbouring points, and how many times it does.
pub fn improvement_crossings(points: &[SweepPoint]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for p in points {
        let d = p.improvement();
        if d == 0.0 {
            continue;
        }
        if let Some((x0, d0)) = prev {
            if (d0 < 0.0) != (d < 0.0) {
                out.push(x0 + (p.value - x0) * d0 / (d0 - d));
            }
        }
        prev = Some((p.value, d));
    }
    out
}
