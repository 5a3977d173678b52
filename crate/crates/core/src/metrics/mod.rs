//! Open-set identification and verification metrics.
//!
//! Thresholds are empirical order statistics. For a target rate `t` over `n`
//! scores, at most `⌊t·n⌋` of them may reach the threshold; ties at the cut
//! move the threshold up to the next distinct value so the realized rate never
//! exceeds the target. A probe is accepted when its score is `>=` the
//! threshold.

pub mod stats;

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use stats::{mean_ci, pearson, spearman_trend, welch_t_test};

use crate::embedding::{Gallery, ProbeSet, Truth};
use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::FusedScores;
use crate::theory::{estimate_stats, ScoreStats};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

/// Score lists feeding the metrics and the fusion predictor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScorePartition {
    /// Score at the true subject, one per mated probe.
    pub genuine: Vec<f64>,
    /// Every other entry of mated rows and every entry of non-mated rows.
    pub imposter: Vec<f64>,
    /// Row maximum of each non-mated probe.
    pub nonmated_maxima: Vec<f64>,
    pub mated_knn: Vec<f64>,
    pub nonmated_knn: Vec<f64>,
    /// Whether the true subject is ranked first, one per mated probe.
    pub rank1_correct: Vec<bool>,
    pub num_subjects: usize,
}

/// Column of each probe's true subject, `None` for non-mated probes.
fn truth_columns(fused: &FusedScores, probes: &ProbeSet) -> Result<Vec<Option<usize>>> {
    if fused.num_probes() != probes.len() {
        return Err(Error::InvalidConfig(format!(
            "score matrix has {} rows but there are {} probes",
            fused.num_probes(),
            probes.len()
        )));
    }
    let index: HashMap<&str, usize> = fused.subject_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    probes
        .iter()
        .map(|p| match &p.truth {
            Truth::NonMated => Ok(None),
            Truth::Mated(s) => index.get(s.as_str()).copied().map(Some).ok_or_else(|| Error::UnknownTruthSubject {
                probe_id: p.id.clone(),
                subject_id: s.clone(),
            }),
        })
        .collect()
}

/// 1-based rank of column `t`. Equal scores are ordered by column index.
pub fn rank_of(row: &[f64], t: usize) -> usize {
    let v = row[t];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < t))
        .count()
}

pub fn partition_scores(fused: &FusedScores, probes: &ProbeSet) -> Result<ScorePartition> {
    let truth = truth_columns(fused, probes)?;
    let mut part = ScorePartition {
        num_subjects: fused.num_subjects(),
        ..Default::default()
    };
    for (p, t) in truth.iter().enumerate() {
        let row = fused.values(p);
        let increment = fused.rows[p].increment;
        match *t {
            Some(t) => {
                part.genuine.push(row[t]);
                part.imposter.extend(row.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, &v)| v));
                part.rank1_correct.push(rank_of(row, t) == 1);
                part.mated_knn.extend(increment);
            }
            None => {
                part.imposter.extend_from_slice(row);
                if let Some(max) = row.iter().copied().reduce(f64::max) {
                    part.nonmated_maxima.push(max);
                }
                part.nonmated_knn.extend(increment);
            }
        }
    }
    Ok(part)
}

/// Which mated probes count as false negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FnirRule {
    /// Below threshold or not ranked first.
    #[default]
    Standard,
    /// Below threshold only.
    ThresholdOnly,
}

/// A metric value at a thresholded operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub value: f64,
    pub threshold: f64,
    /// Fraction of the negative scores at or above the threshold.
    pub achieved_rate: f64,
    /// The target allows no negative score through; the threshold sits just
    /// above the largest one.
    pub target_unachievable: bool,
}

/// Threshold admitting at most `⌊target·n⌋` of `negatives`.
pub fn threshold_at(negatives: &[f64], target: f64) -> Result<(f64, f64, bool)> {
    if negatives.is_empty() {
        return Err(Error::Empty("negative scores"));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidConfig(format!("target rate must be in (0, 1), got {target}")));
    }
    crate::vector::check_finite(negatives)?;
    let n = negatives.len();
    let allowed = (target * n as f64 + 1e-9).floor() as usize;
    let max = negatives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let above_all = max.next_up();
    if allowed == 0 {
        return Ok((above_all, 0.0, true));
    }
    let mut work = negatives.to_vec();
    let (_, &mut cut, _) = work.select_nth_unstable_by(allowed - 1, |a, b| b.total_cmp(a));
    let above = negatives.iter().filter(|&&v| v > cut).count();
    let at = negatives.iter().filter(|&&v| v == cut).count();
    if above + at <= allowed {
        return Ok((cut, (above + at) as f64 / n as f64, false));
    }
    // The tie group straddles the cut; step up to the next distinct value.
    let threshold = negatives
        .iter()
        .copied()
        .filter(|&v| v > cut)
        .fold(above_all, f64::min);
    Ok((threshold, above as f64 / n as f64, false))
}

pub fn fnir_at_fpir(
    genuine: &[f64],
    nonmated_maxima: &[f64],
    rank1_correct: &[bool],
    target: f64,
    rule: FnirRule,
) -> Result<OperatingPoint> {
    if genuine.is_empty() {
        return Err(Error::Empty("mated probes"));
    }
    if rule == FnirRule::Standard && rank1_correct.len() != genuine.len() {
        return Err(Error::DimensionMismatch {
            expected: genuine.len(),
            found: rank1_correct.len(),
        });
    }
    let (threshold, achieved_rate, target_unachievable) = threshold_at(nonmated_maxima, target)?;
    let misses = genuine
        .iter()
        .enumerate()
        .filter(|&(i, &g)| g < threshold || (rule == FnirRule::Standard && !rank1_correct[i]))
        .count();
    Ok(OperatingPoint {
        value: misses as f64 / genuine.len() as f64,
        threshold,
        achieved_rate,
        target_unachievable,
    })
}

pub fn tar_at_far(genuine: &[f64], imposter: &[f64], target: f64) -> Result<OperatingPoint> {
    if genuine.is_empty() {
        return Err(Error::Empty("genuine scores"));
    }
    let (threshold, achieved_rate, target_unachievable) = threshold_at(imposter, target)?;
    let accepted = genuine.iter().filter(|&&g| g >= threshold).count();
    Ok(OperatingPoint {
        value: accepted as f64 / genuine.len() as f64,
        threshold,
        achieved_rate,
        target_unachievable,
    })
}

/// Fraction of mated probes whose true subject ranks within each of `ranks`.
pub fn rank_accuracy(fused: &FusedScores, probes: &ProbeSet, ranks: &[usize]) -> Result<Vec<f64>> {
    let truth = truth_columns(fused, probes)?;
    let found: Vec<usize> = truth
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| rank_of(fused.values(p), t)))
        .collect();
    if found.is_empty() {
        return Err(Error::Empty("mated probes"));
    }
    Ok(ranks
        .iter()
        .map(|&r| found.iter().filter(|&&k| k <= r).count() as f64 / found.len() as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub fpir_targets: Vec<f64>,
    pub far_targets: Vec<f64>,
    pub ranks: Vec<usize>,
    pub runs: usize,
    pub nonmated_fraction: f64,
    pub seed: u64,
    pub fnir_rule: FnirRule,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            fpir_targets: vec![0.001, 0.01, 0.05],
            far_targets: vec![0.001, 0.01],
            ranks: vec![1, 20],
            runs: 50,
            nonmated_fraction: 0.2,
            seed: 0,
            fnir_rule: FnirRule::Standard,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        for &t in self.fpir_targets.iter().chain(&self.far_targets) {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidConfig(format!("target rates must be in (0, 1), got {t}")));
            }
        }
        if self.ranks.contains(&0) {
            return Err(Error::InvalidConfig("ranks start at 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.nonmated_fraction) {
            return Err(Error::InvalidConfig(format!(
                "non-mated fraction must be in [0, 1), got {}",
                self.nonmated_fraction
            )));
        }
        Ok(())
    }
}

/// Metrics of a single evaluation, in protocol target order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub fnir: Vec<OperatingPoint>,
    pub tar: Vec<OperatingPoint>,
    pub rank: Vec<f64>,
}

/// Evaluate one fused matrix. Verification uses the fused imposter scores.
pub fn evaluate(fused: &FusedScores, probes: &ProbeSet, protocol: &EvalProtocol) -> Result<RunMetrics> {
    let part = partition_scores(fused, probes)?;
    evaluate_partition(&part, protocol, || rank_accuracy(fused, probes, &protocol.ranks))
}

fn evaluate_partition(
    part: &ScorePartition,
    protocol: &EvalProtocol,
    rank: impl FnOnce() -> Result<Vec<f64>>,
) -> Result<RunMetrics> {
    let fnir = protocol
        .fpir_targets
        .iter()
        .map(|&t| fnir_at_fpir(&part.genuine, &part.nonmated_maxima, &part.rank1_correct, t, protocol.fnir_rule))
        .collect::<Result<_>>()?;
    let tar = protocol
        .far_targets
        .iter()
        .map(|&t| tar_at_far(&part.genuine, &part.imposter, t))
        .collect::<Result<_>>()?;
    Ok(RunMetrics {
        fnir,
        tar,
        rank: rank()?,
    })
}

/// One target of a [`MetricReport`], aggregated over runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricPoint {
    pub target: f64,
    pub mean: f64,
    pub ci95: f64,
    /// Mean threshold over runs; absent for rank accuracies.
    pub threshold: Option<f64>,
    /// True if any run could not reach the target.
    pub target_unachievable: bool,
    pub per_run: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub runs: usize,
    pub seed: u64,
    pub fnir_at_fpir: Vec<MetricPoint>,
    pub tar_at_far: Vec<MetricPoint>,
    pub rank_accuracy: Vec<MetricPoint>,
    /// Fitted on the unfused scores of the first run; absent when a score
    /// list is too small to fit.
    pub stats: Option<ScoreStats>,
}

fn aggregate_points(targets: &[f64], runs: &[&[OperatingPoint]]) -> Result<Vec<MetricPoint>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let values: Vec<f64> = runs.iter().map(|r| r[i].value).collect();
            let thresholds: Vec<f64> = runs.iter().map(|r| r[i].threshold).collect();
            let (mean, ci95) = mean_ci(&values, Z95)?;
            Ok(MetricPoint {
                target,
                mean,
                ci95,
                threshold: Some(mean_ci(&thresholds, Z95)?.0),
                target_unachievable: runs.iter().any(|r| r[i].target_unachievable),
                per_run: values,
            })
        })
        .collect()
}

impl MetricReport {
    /// Combine per-run metrics, given in run order.
    pub fn aggregate(protocol: &EvalProtocol, runs: &[RunMetrics], stats: Option<ScoreStats>) -> Result<Self> {
        let fnir: Vec<&[OperatingPoint]> = runs.iter().map(|r| r.fnir.as_slice()).collect();
        let tar: Vec<&[OperatingPoint]> = runs.iter().map(|r| r.tar.as_slice()).collect();
        let rank_accuracy = protocol
            .ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let values: Vec<f64> = runs.iter().map(|m| m.rank[i]).collect();
                let (mean, ci95) = mean_ci(&values, Z95)?;
                Ok(MetricPoint {
                    target: r as f64,
                    mean,
                    ci95,
                    threshold: None,
                    target_unachievable: false,
                    per_run: values,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            runs: runs.len(),
            seed: protocol.seed,
            fnir_at_fpir: aggregate_points(&protocol.fpir_targets, &fnir)?,
            tar_at_far: aggregate_points(&protocol.far_targets, &tar)?,
            rank_accuracy,
            stats,
        })
    }

    /// Rows of `metric,target,value,ci95,threshold`.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
        w.write_record(["metric", "target", "value", "ci95", "threshold"]).map_err(io)?;
        for (name, points) in [
            ("fnir@fpir", &self.fnir_at_fpir),
            ("tar@far", &self.tar_at_far),
            ("rank", &self.rank_accuracy),
        ] {
            for p in points {
                w.write_record([
                    name.to_owned(),
                    p.target.to_string(),
                    p.mean.to_string(),
                    p.ci95.to_string(),
                    p.threshold.map_or(String::new(), |t| t.to_string()),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Tolerated false-positive count for the fitted statistics.
fn tolerated(target: f64, n: usize) -> u64 {
    ((target * n as f64 + 1e-9).floor() as u64).max(1)
}

fn fit_stats(fused: &FusedScores, probes: &ProbeSet, protocol: &EvalProtocol) -> Option<ScoreStats> {
    let part = partition_scores(&fused.baseline(), probes).ok()?;
    let fpir = protocol.fpir_targets.first().copied().unwrap_or(0.01);
    let far = protocol.far_targets.first().copied().unwrap_or(0.01);
    let r1 = tolerated(fpir, part.nonmated_maxima.len());
    let r2 = tolerated(far, part.imposter.len());
    estimate_stats(&part, r1, r2, true).ok()
}

/// Report for a single evaluation of `fused`, without any split.
pub fn report_once(fused: &FusedScores, probes: &ProbeSet, protocol: &EvalProtocol) -> Result<MetricReport> {
    protocol.validate()?;
    let metrics = evaluate(fused, probes, protocol)?;
    MetricReport::aggregate(protocol, &[metrics], fit_stats(fused, probes, protocol))
}

/// Repeated open-set splits. Run `r` removes `⌊fraction·S⌋` of the `S`
/// subjects that have mated probes from the gallery, chosen with a sub-seed of
/// `(seed, r)`, and relabels their probes as non-mated before scoring.
pub fn split_runs<F>(gallery: &Gallery, probes: &ProbeSet, protocol: &EvalProtocol, scorer: F) -> Result<MetricReport>
where
    F: Fn(&Gallery, &ProbeSet) -> Result<FusedScores> + Sync,
{
    protocol.validate()?;
    probes.validate_against(gallery)?;
    let mut test_subjects: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for p in probes {
        if let Some(s) = p.truth.subject() {
            if seen.insert(s) {
                test_subjects.push(s);
            }
        }
    }
    // Canonical gallery order, independent of probe order.
    test_subjects.sort_by_key(|s| gallery.subject_index(s));
    let designated = (protocol.nonmated_fraction * test_subjects.len() as f64 + 1e-9).floor() as usize;
    let has_nonmated = probes.iter().any(|p| p.truth == Truth::NonMated);
    if designated == 0 && !has_nonmated {
        return Err(Error::InsufficientSubjects {
            subjects: test_subjects.len(),
            fraction: protocol.nonmated_fraction,
        });
    }

    let results = (0..protocol.runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(protocol.seed, &[r as u64]);
            let chosen: HashSet<&str> = rand::seq::index::sample(&mut rng, test_subjects.len(), designated)
                .into_iter()
                .map(|i| test_subjects[i])
                .collect();
            let run_gallery = if chosen.is_empty() {
                gallery.clone()
            } else {
                gallery.without_subjects(&chosen)?
            };
            let run_probes = probes.with_nonmated(&chosen);
            let fused = scorer(&run_gallery, &run_probes)?;
            let metrics = evaluate(&fused, &run_probes, protocol)?;
            let stats = if r == 0 {
                fit_stats(&fused, &run_probes, protocol)
            } else {
                None
            };
            Ok((metrics, stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = results[0].1;
    let runs: Vec<RunMetrics> = results.into_iter().map(|(m, _)| m).collect();
    MetricReport::aggregate(protocol, &runs, stats)
}
