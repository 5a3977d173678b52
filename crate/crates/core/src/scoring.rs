//! Score fusion.
//!
//! LocalScore takes the k-th largest probe-to-media similarity over the whole
//! gallery and adds it to every subject column that attains the row maximum.
//! All other columns pass through untouched, so the ordering of a row never
//! changes when the increment is non-negative.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, Gallery, ProbeSet};
use crate::error::{Error, Result};
use crate::similarity::{self, SubjectScoring};
use crate::vector::{self, check_finite};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FusionMode {
    LocalScore { k: usize },
    NaiveMean { k: usize },
    None,
    MaxPool,
    MinPool,
    MeanPool,
    AddConst { c: f64 },
    DoubleMax,
    AvgTopK { k: usize },
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::LocalScore { k: 1 }
    }
}

impl FusionMode {
    pub fn k(&self) -> Option<usize> {
        match *self {
            FusionMode::LocalScore { k } | FusionMode::NaiveMean { k } | FusionMode::AvgTopK { k } => Some(k),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == Some(0) {
            return Err(Error::ZeroK);
        }
        if let FusionMode::AddConst { c } = self {
            if !c.is_finite() {
                return Err(Error::InvalidConfig(format!("constant {c} is not finite")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::LocalScore { k } => write!(f, "local(k={k})"),
            FusionMode::NaiveMean { k } => write!(f, "naive-mean(k={k})"),
            FusionMode::None => f.write_str("none"),
            FusionMode::MaxPool => f.write_str("max"),
            FusionMode::MinPool => f.write_str("min"),
            FusionMode::MeanPool => f.write_str("mean"),
            FusionMode::AddConst { c } => write!(f, "add-const(c={c})"),
            FusionMode::DoubleMax => f.write_str("double-max"),
            FusionMode::AvgTopK { k } => write!(f, "avg-topk(k={k})"),
        }
    }
}

/// Pooling rule for the multi-sample baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Min,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Replace `KTooLarge` with the smallest available similarity.
    pub clamp_k: bool,
    /// Take the k-NN within the top subject's own media instead of globally.
    pub per_subject_knn: bool,
    pub subject_scoring: SubjectScoring,
}

/// The k-th largest value of `row`; `k = 1` is the maximum.
pub fn knn_score(row: &[f64], k: usize, clamp_k: bool) -> Result<f64> {
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if row.is_empty() {
        return Err(Error::Empty("media row"));
    }
    check_finite(row)?;
    let k = if k > row.len() {
        if !clamp_k {
            return Err(Error::KTooLarge {
                k,
                available: row.len(),
            });
        }
        row.len()
    } else {
        k
    };
    let mut work = row.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// Mean of the k largest values of `row`.
fn top_k_mean(row: &[f64], k: usize, clamp_k: bool) -> Result<f64> {
    knn_score(row, k, clamp_k)?;
    let k = k.min(row.len());
    let mut work = row.to_vec();
    work.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(work[..k].iter().sum::<f64>() / k as f64)
}

/// Fused row plus the columns that were modified.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRow {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// The k-NN (or other) increment computed for this probe, if any.
    pub increment: Option<f64>,
}

impl FusedRow {
    fn unchanged(values: Vec<f64>) -> Self {
        let mask = vec![false; values.len()];
        Self {
            values,
            mask,
            increment: None,
        }
    }
}

fn row_max(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::Empty("subject row"));
    }
    check_finite(row)?;
    Ok(row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Add `increment(j)` to every column equal to the row maximum.
fn add_to_max(row: &[f64], increment: impl Fn(usize, f64) -> f64) -> Result<FusedRow> {
    let max = row_max(row)?;
    let mut values = row.to_vec();
    let mut mask = vec![false; row.len()];
    let mut first = None;
    for (j, v) in values.iter_mut().enumerate() {
        // Exact equality, as in the reference pseudo-code.
        if *v == max {
            let inc = increment(j, *v);
            first.get_or_insert(inc);
            *v += inc;
            mask[j] = true;
        }
    }
    Ok(FusedRow {
        values,
        mask,
        increment: first,
    })
}

/// LocalScore: add `knn` to every column tied at the row maximum.
pub fn local_score(subject_row: &[f64], knn: f64) -> Result<FusedRow> {
    if !knn.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    add_to_max(subject_row, |_, _| knn)
}

/// Averages every column with `knn`. Kept as the baseline LocalScore replaces.
pub fn naive_mean_fusion(subject_row: &[f64], knn: f64) -> Result<FusedRow> {
    row_max(subject_row)?;
    Ok(FusedRow {
        values: subject_row.iter().map(|s| (s + knn) / 2.0).collect(),
        mask: vec![true; subject_row.len()],
        increment: Some(knn),
    })
}

/// Max/min/mean of each subject's media similarities.
pub fn pool_scores(media_row: &[f64], gallery: &Gallery, pool: Pool) -> Result<Vec<f64>> {
    if media_row.len() != gallery.total_media() {
        return Err(Error::DimensionMismatch {
            expected: gallery.total_media(),
            found: media_row.len(),
        });
    }
    if pool == Pool::Mean {
        return Ok(similarity::pool_mean(media_row, gallery));
    }
    Ok((0..gallery.num_subjects())
        .map(|s| {
            let it = media_row[gallery.media_range(s)].iter().copied();
            match pool {
                Pool::Max => it.fold(f64::NEG_INFINITY, f64::max),
                _ => it.fold(f64::INFINITY, f64::min),
            }
        })
        .collect())
}

/// The add-constant, doubling and top-k-average variants.
pub fn variant_fusion(subject_row: &[f64], media_row: &[f64], mode: FusionMode, clamp_k: bool) -> Result<FusedRow> {
    match mode {
        FusionMode::AddConst { c } => {
            mode.validate()?;
            add_to_max(subject_row, |_, _| c)
        }
        FusionMode::DoubleMax => add_to_max(subject_row, |_, v| v),
        FusionMode::AvgTopK { k } => {
            let mean = top_k_mean(media_row, k, clamp_k)?;
            add_to_max(subject_row, |_, _| mean)
        }
        other => Err(Error::InvalidConfig(format!("{other} is not a variant mode"))),
    }
}

/// Verification against one claimed subject: mean cosine plus the k-th
/// largest cosine among that subject's media. The argmax over a single
/// subject is the subject itself, so the increment always applies.
pub fn one_to_one_score(probe: &Embedding, subject_media: &[Embedding], k: usize, clamp_k: bool) -> Result<f64> {
    if subject_media.is_empty() {
        return Err(Error::Empty("subject media"));
    }
    let cosines = subject_media
        .iter()
        .map(|m| vector::cosine(probe.vector(), m.vector()))
        .collect::<Result<Vec<_>>>()?;
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    Ok(mean + knn_score(&cosines, k, clamp_k)?)
}

/// Every probe verified against every subject independently with
/// [`one_to_one_score`]. `base` holds the mean cosines.
pub fn one_to_one_matrix(probes: &ProbeSet, gallery: &Gallery, k: usize, clamp_k: bool) -> Result<FusedScores> {
    if k == 0 {
        return Err(Error::ZeroK);
    }
    let rows = probes
        .probes()
        .par_iter()
        .map(|p| {
            let mut base = Vec::with_capacity(gallery.num_subjects());
            let mut values = Vec::with_capacity(gallery.num_subjects());
            for s in gallery.subjects() {
                let score = one_to_one_score(&p.embedding, &s.media, k, clamp_k).map_err(|e| e.in_probe(&p.id))?;
                let mean = s
                    .media
                    .iter()
                    .map(|m| vector::dot(p.embedding.vector(), m.vector()).clamp(-1.0, 1.0))
                    .sum::<f64>()
                    / s.media.len() as f64;
                base.push(mean);
                values.push(score);
            }
            let mask = vec![true; values.len()];
            Ok((base, FusedRow { values, mask, increment: None }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (base, rows) = rows.into_iter().unzip();
    Ok(FusedScores {
        probe_ids: probes.iter().map(|p| p.id.clone()).collect(),
        subject_ids: gallery.subject_ids().map(str::to_owned).collect(),
        base,
        rows,
    })
}

/// Fuse one probe vector against `gallery`.
pub fn score_row(probe: &[f64], gallery: &Gallery, mode: FusionMode, options: &ScoreOptions) -> Result<(Vec<f64>, FusedRow)> {
    mode.validate()?;
    let needs_media = !matches!(mode, FusionMode::None | FusionMode::AddConst { .. } | FusionMode::DoubleMax);
    let media = if needs_media {
        similarity::media_scores(probe, gallery)?
    } else {
        Vec::new()
    };
    let base = match mode {
        FusionMode::MaxPool => pool_scores(&media, gallery, Pool::Max)?,
        FusionMode::MinPool => pool_scores(&media, gallery, Pool::Min)?,
        FusionMode::MeanPool => pool_scores(&media, gallery, Pool::Mean)?,
        _ => similarity::subject_scores(probe, gallery, options.subject_scoring)?,
    };
    let fused = match mode {
        FusionMode::None | FusionMode::MaxPool | FusionMode::MinPool | FusionMode::MeanPool => {
            check_finite(&base)?;
            FusedRow::unchanged(base.clone())
        }
        FusionMode::LocalScore { k } if options.per_subject_knn => {
            // Only subjects tied at the maximum receive an increment.
            let max = row_max(&base)?;
            let knns = (0..gallery.num_subjects())
                .map(|s| match base[s] == max {
                    true => knn_score(&media[gallery.media_range(s)], k, options.clamp_k),
                    false => Ok(0.0),
                })
                .collect::<Result<Vec<_>>>()?;
            add_to_max(&base, |j, _| knns[j])?
        }
        FusionMode::LocalScore { k } => local_score(&base, knn_score(&media, k, options.clamp_k)?)?,
        FusionMode::NaiveMean { k } => naive_mean_fusion(&base, knn_score(&media, k, options.clamp_k)?)?,
        variant => variant_fusion(&base, &media, variant, options.clamp_k)?,
    };
    Ok((base, fused))
}

/// Probes × subjects fused score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedScores {
    pub probe_ids: Vec<String>,
    pub subject_ids: Vec<String>,
    /// Pre-fusion per-subject rows.
    pub base: Vec<Vec<f64>>,
    pub rows: Vec<FusedRow>,
}

impl FusedScores {
    pub fn num_probes(&self) -> usize {
        self.rows.len()
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn values(&self, p: usize) -> &[f64] {
        &self.rows[p].values
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == id)
    }

    /// The pre-fusion matrix, keeping each row's recorded increment.
    pub fn baseline(&self) -> FusedScores {
        FusedScores {
            probe_ids: self.probe_ids.clone(),
            subject_ids: self.subject_ids.clone(),
            base: self.base.clone(),
            rows: self
                .base
                .iter()
                .zip(&self.rows)
                .map(|(b, r)| FusedRow {
                    values: b.clone(),
                    mask: vec![false; b.len()],
                    increment: r.increment,
                })
                .collect(),
        }
    }
}

/// Apply `mode` to every probe. Rows are independent and computed in parallel;
/// the output order is the probe order.
pub fn score_matrix(probes: &ProbeSet, gallery: &Gallery, mode: FusionMode, options: &ScoreOptions) -> Result<FusedScores> {
    mode.validate()?;
    let rows = probes
        .probes()
        .par_iter()
        .map(|p| score_row(p.embedding.vector(), gallery, mode, options).map_err(|e| e.in_probe(&p.id)))
        .collect::<Result<Vec<_>>>()?;
    let (base, rows) = rows.into_iter().unzip();
    Ok(FusedScores {
        probe_ids: probes.iter().map(|p| p.id.clone()).collect(),
        subject_ids: gallery.subject_ids().map(str::to_owned).collect(),
        base,
        rows,
    })
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pool::Max),
            "min" => Ok(Pool::Min),
            "mean" => Ok(Pool::Mean),
            _ => Err(Error::InvalidConfig(format!("unknown pooling {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Probe, Truth};
    use proptest::prelude::*;

    #[test]
    fn knn_examples() {
        let row = [0.2, 0.9, 0.5];
        assert_eq!(knn_score(&row, 1, false).unwrap(), 0.9);
        assert_eq!(knn_score(&row, 2, false).unwrap(), 0.5);
        assert_eq!(knn_score(&row, 3, false).unwrap(), 0.2);
        assert!(matches!(
            knn_score(&row, 4, false),
            Err(Error::KTooLarge { k: 4, available: 3 })
        ));
        assert_eq!(knn_score(&row, 4, true).unwrap(), 0.2);
        assert!(matches!(knn_score(&row, 0, false), Err(Error::ZeroK)));
    }

    #[test]
    fn local_score_examples() {
        let r = local_score(&[0.7, 0.3, 0.1], 0.95).unwrap();
        assert_eq!(r.values, vec![0.7 + 0.95, 0.3, 0.1]);
        assert_eq!(r.values[0], 1.65);
        assert_eq!(r.mask, vec![true, false, false]);

        let tie = local_score(&[0.5, 0.5], 0.2).unwrap();
        assert_eq!(tie.values, vec![0.7, 0.7]);
        assert_eq!(tie.mask, vec![true, true]);

        assert_eq!(local_score(&[0.4], 0.3).unwrap().values, vec![0.4 + 0.3]);
        assert!(local_score(&[f64::NAN], 0.3).is_err());
    }

    #[test]
    fn naive_mean_examples() {
        let genuine = naive_mean_fusion(&[0.70], 0.85).unwrap().values[0];
        let imposter = naive_mean_fusion(&[0.90], 0.65).unwrap().values[0];
        assert!((genuine - 0.775).abs() < 1e-15);
        assert!((imposter - 0.775).abs() < 1e-15);
        assert_eq!(naive_mean_fusion(&[0.37], 0.37).unwrap().values[0], 0.37);
    }

    fn two_media_gallery(a: f64, b: f64) -> (Gallery, Embedding) {
        // Probe along x; media at the given cosines.
        let m = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let g = Gallery::from_embeddings(vec![
            Embedding::new("s", "m0", &m(a)).unwrap(),
            Embedding::new("s", "m1", &m(b)).unwrap(),
            Embedding::new("t", "m0", &m(-0.5)).unwrap(),
        ])
        .unwrap();
        (g, Embedding::new("x", "p", &[1.0, 0.0]).unwrap())
    }

    #[test]
    fn pooling_examples() {
        let (g, p) = two_media_gallery(0.2, 0.8);
        let media = similarity::per_media_scores(&p, &g).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(pool_scores(&media, &g, Pool::Max).unwrap()[0], 0.8));
        assert!(close(pool_scores(&media, &g, Pool::Min).unwrap()[0], 0.2));
        assert!(close(pool_scores(&media, &g, Pool::Mean).unwrap()[0], 0.5));
        // Single-medium subject: all three agree.
        for pool in [Pool::Max, Pool::Min, Pool::Mean] {
            assert!(close(pool_scores(&media, &g, pool).unwrap()[1], -0.5));
        }
        let mean = pool_scores(&media, &g, Pool::Mean).unwrap();
        let eq2 = similarity::mean_sample_scores(&p, &g).unwrap();
        assert_eq!(mean, eq2);
    }

    #[test]
    fn variant_examples() {
        let add = variant_fusion(&[0.7, 0.3], &[], FusionMode::AddConst { c: 1.0 }, false).unwrap();
        assert_eq!(add.values, vec![1.7, 0.3]);
        let dbl = variant_fusion(&[0.7, 0.3], &[], FusionMode::DoubleMax, false).unwrap();
        assert_eq!(dbl.values, vec![1.4, 0.3]);
        let avg = variant_fusion(&[0.7, 0.3], &[0.9, 0.5, 0.2], FusionMode::AvgTopK { k: 2 }, false).unwrap();
        assert_eq!(avg.increment, Some(0.7));
        assert!((avg.values[0] - 1.4).abs() < 1e-15);
        assert!(matches!(
            variant_fusion(&[0.7], &[0.9], FusionMode::AvgTopK { k: 2 }, false),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn one_to_one_examples() {
        let p = Embedding::new("x", "p", &[0.6, 0.8]).unwrap();
        let same = [Embedding::new("s", "m", &[0.6, 0.8]).unwrap()];
        assert!((one_to_one_score(&p, &same, 1, false).unwrap() - 2.0).abs() < 1e-15);

        let probe = Embedding::new("x", "p", &[1.0, 0.0]).unwrap();
        let media = [
            Embedding::new("s", "a", &[0.6, 0.8]).unwrap(),
            Embedding::new("s", "b", &[0.8, 0.6]).unwrap(),
        ];
        assert!((one_to_one_score(&probe, &media, 1, false).unwrap() - 1.5).abs() < 1e-15);
        assert!((one_to_one_score(&probe, &media, 2, false).unwrap() - 1.3).abs() < 1e-15);
        assert!(matches!(
            one_to_one_score(&probe, &media, 3, false),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn one_to_one_matches_local_score_on_a_single_subject() {
        let g = Gallery::from_embeddings(vec![
            Embedding::new("a", "m0", &[0.6, 0.8]).unwrap(),
            Embedding::new("a", "m1", &[0.8, 0.6]).unwrap(),
            Embedding::new("a", "m2", &[-0.2, 1.0]).unwrap(),
            Embedding::new("b", "m0", &[0.0, -1.0]).unwrap(),
        ])
        .unwrap();
        let probes = probes_along(&[[1.0, 0.2], [-0.3, 0.9], [0.1, -1.0]]);
        for k in 1..=3 {
            let all = one_to_one_matrix(&probes, &g, k, true).unwrap();
            let only_a = g.restricted_to("a").unwrap();
            let local = score_matrix(&probes, &only_a, FusionMode::LocalScore { k }, &ScoreOptions::default()).unwrap();
            for p in 0..probes.len() {
                assert!((all.values(p)[0] - local.values(p)[0]).abs() < 1e-12);
                assert!((all.base[p][0] - local.base[p][0]).abs() < 1e-12);
            }
        }
    }

    fn probes_along(vs: &[[f64; 2]]) -> ProbeSet {
        ProbeSet::new(
            vs.iter()
                .enumerate()
                .map(|(i, v)| Probe {
                    id: format!("p{i}"),
                    embedding: Embedding::new("?", format!("p{i}"), v).unwrap(),
                    truth: Truth::NonMated,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn none_mode_is_identity_and_empty_probes_are_fine() {
        let (g, _) = two_media_gallery(0.2, 0.8);
        let probes = probes_along(&[[1.0, 0.0], [0.3, -0.7]]);
        let fused = score_matrix(&probes, &g, FusionMode::None, &ScoreOptions::default()).unwrap();
        for (p, probe) in probes.iter().enumerate() {
            let raw = similarity::per_subject_scores(&probe.embedding, &g).unwrap();
            assert_eq!(fused.values(p), raw.as_slice());
        }
        let empty = score_matrix(&ProbeSet::default(), &g, FusionMode::default(), &ScoreOptions::default()).unwrap();
        assert_eq!(empty.num_probes(), 0);
        assert_eq!(empty.num_subjects(), 2);
    }

    #[test]
    fn row_errors_carry_probe_id() {
        let (g, _) = two_media_gallery(0.2, 0.8);
        let probes = probes_along(&[[1.0, 0.0]]);
        let err = score_matrix(&probes, &g, FusionMode::LocalScore { k: 9 }, &ScoreOptions::default()).unwrap_err();
        assert!(matches!(&err, Error::Probe { probe_id, .. } if probe_id == "p0"));
        assert!(matches!(err.root(), Error::KTooLarge { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn single_medium_k1_increment_is_the_max() {
        let g = Gallery::from_embeddings(vec![
            Embedding::new("a", "m", &[1.0, 0.2]).unwrap(),
            Embedding::new("b", "m", &[0.1, 1.0]).unwrap(),
        ])
        .unwrap();
        let probes = probes_along(&[[1.0, 0.0], [0.0, 1.0]]);
        let fused = score_matrix(&probes, &g, FusionMode::LocalScore { k: 1 }, &ScoreOptions::default()).unwrap();
        for (p, row) in fused.rows.iter().enumerate() {
            let max = fused.base[p].iter().copied().fold(f64::MIN, f64::max);
            assert!((row.increment.unwrap() - max).abs() < 1e-15);
        }
    }

    #[test]
    fn per_subject_knn_uses_top_subject_media() {
        let g = Gallery::from_embeddings(vec![
            Embedding::new("a", "m0", &[1.0, 0.0]).unwrap(),
            Embedding::new("a", "m1", &[0.0, 1.0]).unwrap(),
            Embedding::new("b", "m0", &[0.0, -1.0]).unwrap(),
        ])
        .unwrap();
        let q = vector::normalize(&[1.0, 0.1]).unwrap();
        let options = ScoreOptions {
            per_subject_knn: true,
            ..Default::default()
        };
        let (_, row) = score_row(&q, &g, FusionMode::LocalScore { k: 2 }, &options).unwrap();
        // Second best within subject a is m1.
        assert!((row.increment.unwrap() - q[1]).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn only_max_columns_change(row in prop::collection::vec(-1.0f64..1.0, 1..12), knn in -1.0f64..1.0) {
            let fused = local_score(&row, knn).unwrap();
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            for j in 0..row.len() {
                prop_assert_eq!(fused.mask[j], row[j] == max);
                if !fused.mask[j] {
                    prop_assert_eq!(fused.values[j].to_bits(), row[j].to_bits());
                }
            }
        }

        #[test]
        fn k1_is_row_max(row in prop::collection::vec(-1.0f64..1.0, 1..30)) {
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(knn_score(&row, 1, false).unwrap(), max);
        }
    }
}
