//! Predicting whether selective k-NN fusion helps.
//!
//! Under a Gaussian model of the four score populations (genuine, imposter,
//! mated k-NN, non-mated k-NN), the fused open-set FNIR at the expected
//! threshold beats the raw FNIR exactly when
//!
//! ```text
//! (μ2 + μ4 + δ·√(σ2² + σ4²) − (μ1 + μ3)) / √(σ1² + σ3²)  <  (μ2 + δ·σ2 − μ1) / σ1
//! ```
//!
//! with `δ = −ln(−ln(1 − r1/N2))` the Gumbel quantile at the tolerated FPIR.
//! The verification condition has the same shape with δ replaced by
//! `Φ⁻¹((N3 − r2 − α)/(N3 − 2α + 1))`, `α = π/8`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ScorePartition;
use crate::normal;

/// Half-width of the band in which `lhs` and `rhs` are reported as tied.
pub const BOUNDARY_BAND: f64 = 1e-12;

/// Offset of the order-statistic plotting position in the FAR threshold.
pub const ALPHA: f64 = std::f64::consts::PI / 8.0;

/// Gaussian score-population parameters. `m` is carried along but enters
/// neither condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub mu3: f64,
    pub sigma3: f64,
    pub mu4: f64,
    pub sigma4: f64,
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    pub m: u64,
    pub r1: u64,
    pub r2: u64,
}

/// Both sides of one inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`; positive when fusion is predicted to help.
    pub gap: f64,
    pub improves: bool,
    pub at_boundary: bool,
}

impl Condition {
    fn new(lhs: f64, rhs: f64) -> Self {
        let gap = rhs - lhs;
        let at_boundary = gap.abs() <= BOUNDARY_BAND;
        Self {
            lhs,
            rhs,
            gap,
            improves: !at_boundary && lhs < rhs,
            at_boundary,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremVerdict {
    pub open_set: Condition,
    pub verification: Condition,
    pub delta: f64,
    pub verification_quantile: f64,
    pub expected_fnir_without: f64,
    pub expected_fnir_with: f64,
    pub open_set_threshold_without: f64,
    pub open_set_threshold_with: f64,
    pub verification_threshold_without: f64,
    pub verification_threshold_with: f64,
    pub mu3_star: f64,
}

/// `−ln(−ln(1 − r1/n2))`.
pub fn gumbel_delta(r1: u64, n2: u64) -> Result<f64> {
    if r1 == 0 || r1 >= n2 {
        return Err(Error::Domain(format!("gumbel delta needs 0 < r1 < N2, got r1={r1}, N2={n2}")));
    }
    let rate = r1 as f64 / n2 as f64;
    Ok(-(-(-rate).ln_1p()).ln())
}

/// `Φ⁻¹((n3 − r2 − α)/(n3 − 2α + 1))`.
pub fn verification_quantile(r2: u64, n3: u64) -> Result<f64> {
    if r2 == 0 || r2 >= n3 {
        return Err(Error::Domain(format!("verification quantile needs 0 < r2 < N3, got r2={r2}, N3={n3}")));
    }
    let (n3, r2) = (n3 as f64, r2 as f64);
    normal::quantile((n3 - r2 - ALPHA) / (n3 - 2.0 * ALPHA + 1.0))
}

fn fused_spread(stats: &ScoreStats) -> Result<(f64, f64)> {
    if stats.sigma1 <= 0.0 {
        return Err(Error::ZeroSigma("sigma1"));
    }
    let genuine = stats.sigma1.hypot(stats.sigma3);
    Ok((genuine, stats.sigma2.hypot(stats.sigma4)))
}

/// Shared shape of both conditions with critical value `z`.
fn sides(stats: &ScoreStats, z: f64) -> Result<(f64, f64)> {
    let (genuine, imposter) = fused_spread(stats)?;
    let lhs = (stats.mu2 + stats.mu4 + z * imposter - (stats.mu1 + stats.mu3)) / genuine;
    let rhs = (stats.mu2 + z * stats.sigma2 - stats.mu1) / stats.sigma1;
    Ok((lhs, rhs))
}

pub fn open_set_condition(stats: &ScoreStats) -> Result<Condition> {
    let (lhs, rhs) = sides(stats, gumbel_delta(stats.r1, stats.n2)?)?;
    Ok(Condition::new(lhs, rhs))
}

pub fn verification_condition(stats: &ScoreStats) -> Result<Condition> {
    let (lhs, rhs) = sides(stats, verification_quantile(stats.r2, stats.n3)?)?;
    Ok(Condition::new(lhs, rhs))
}

/// Probability that a genuine score falls below the expected open-set
/// threshold, with or without the k-NN increment.
pub fn expected_fnir(stats: &ScoreStats, with_fusion: bool) -> Result<f64> {
    let (lhs, rhs) = sides(stats, gumbel_delta(stats.r1, stats.n2)?)?;
    Ok(normal::cdf(if with_fusion { lhs } else { rhs }))
}

/// The mated k-NN mean at which the open-set condition holds with equality.
/// `stats.mu3` is ignored.
pub fn mu3_star(stats: &ScoreStats) -> Result<f64> {
    let delta = gumbel_delta(stats.r1, stats.n2)?;
    let (genuine, imposter) = fused_spread(stats)?;
    let rhs = (stats.mu2 + delta * stats.sigma2 - stats.mu1) / stats.sigma1;
    Ok(stats.mu2 + stats.mu4 + delta * imposter - stats.mu1 - genuine * rhs)
}

pub fn predict(stats: &ScoreStats) -> Result<TheoremVerdict> {
    let delta = gumbel_delta(stats.r1, stats.n2)?;
    let q = verification_quantile(stats.r2, stats.n3)?;
    let imposter = stats.sigma2.hypot(stats.sigma4);
    Ok(TheoremVerdict {
        open_set: open_set_condition(stats)?,
        verification: verification_condition(stats)?,
        delta,
        verification_quantile: q,
        expected_fnir_without: expected_fnir(stats, false)?,
        expected_fnir_with: expected_fnir(stats, true)?,
        open_set_threshold_without: stats.mu2 + delta * stats.sigma2,
        open_set_threshold_with: stats.mu2 + stats.mu4 + delta * imposter,
        verification_threshold_without: stats.mu2 + q * stats.sigma2,
        verification_threshold_with: stats.mu2 + stats.mu4 + q * imposter,
        mu3_star: mu3_star(stats)?,
    })
}

/// Sample mean and unbiased standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Fit [`ScoreStats`] to the score lists of a partitioned (unfused) matrix.
pub fn estimate_stats(partition: &ScorePartition, r1: u64, r2: u64, allow_zero_sigma: bool) -> Result<ScoreStats> {
    let fit = |name: &str, values: &[f64]| -> Result<(f64, f64)> {
        let (mean, std) = mean_std(values)
            .ok_or_else(|| Error::DegenerateSample(format!("{name} has {} values, need at least 2", values.len())))?;
        if std == 0.0 && !allow_zero_sigma {
            return Err(Error::DegenerateSample(format!("{name} has zero spread")));
        }
        Ok((mean, std))
    };
    let (mu1, sigma1) = fit("genuine scores", &partition.genuine)?;
    let (mu2, sigma2) = fit("imposter scores", &partition.imposter)?;
    let (mu3, sigma3) = fit("mated k-NN scores", &partition.mated_knn)?;
    let (mu4, sigma4) = fit("non-mated k-NN scores", &partition.nonmated_knn)?;
    Ok(ScoreStats {
        mu1,
        sigma1,
        mu2,
        sigma2,
        mu3,
        sigma3,
        mu4,
        sigma4,
        n1: partition.genuine.len() as u64,
        n2: partition.nonmated_maxima.len() as u64,
        n3: partition.imposter.len() as u64,
        m: partition.num_subjects as u64,
        r1,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScoreStats {
        ScoreStats {
            mu1: 0.6,
            sigma1: 0.1,
            mu2: 0.2,
            sigma2: 0.1,
            mu3: 0.5,
            sigma3: 0.1,
            mu4: 0.3,
            sigma4: 0.1,
            n1: 100,
            n2: 500,
            n3: 5900,
            m: 10,
            r1: 5,
            r2: 5,
        }
    }

    #[test]
    fn delta_examples() {
        // -ln(-ln 0.99), evaluated to 30 digits with mpmath.
        assert!((gumbel_delta(1, 100).unwrap() - 4.600_149_226_776_58).abs() < 1e-12);
        assert!(matches!(gumbel_delta(10, 10), Err(Error::Domain(_))));
        assert!(matches!(gumbel_delta(0, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn delta_is_zero_at_one_minus_inverse_e() {
        // r1/N2 = 1 - 1/e gives δ = 0; approximate the ratio with large counts.
        let n2 = 1_000_000_000u64;
        let r1 = ((1.0 - (-1.0f64).exp()) * n2 as f64).round() as u64;
        assert!(gumbel_delta(r1, n2).unwrap().abs() < 1e-8);
    }

    #[test]
    fn verification_quantile_example() {
        let q = verification_quantile(1_000, 1_000_000).unwrap();
        let arg = (1e6 - 1e3 - ALPHA) / (1e6 - 2.0 * ALPHA + 1.0);
        assert!((arg - 0.998_999_392).abs() < 1e-8);
        assert!((q - 3.0896).abs() < 5e-4);
        assert!(matches!(verification_quantile(10, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_shift_degeneracy() {
        let mut s = base();
        s.sigma3 = 0.0;
        s.sigma4 = 0.0;
        s.mu4 = 0.0;
        let rhs = open_set_condition(&s).unwrap().rhs;
        for mu3 in [-0.2, 0.1, 0.4] {
            s.mu3 = mu3;
            let c = open_set_condition(&s).unwrap();
            assert!((c.lhs - (rhs - mu3 / s.sigma1)).abs() < 1e-12);
            assert_eq!(c.improves, mu3 > 0.0);
        }
    }

    #[test]
    fn verification_constant_shift() {
        let mut s = base();
        s.sigma3 = 0.0;
        s.sigma4 = 0.0;
        for (mu3, mu4) in [(0.5, 0.3), (0.3, 0.5), (0.1, 0.0)] {
            s.mu3 = mu3;
            s.mu4 = mu4;
            assert_eq!(verification_condition(&s).unwrap().improves, mu3 > mu4);
        }
    }

    #[test]
    fn zero_sigma1_is_rejected() {
        let mut s = base();
        s.sigma1 = 0.0;
        assert!(matches!(open_set_condition(&s), Err(Error::ZeroSigma(_))));
        assert!(matches!(mu3_star(&s), Err(Error::ZeroSigma(_))));
    }

    #[test]
    fn expected_fnir_limits() {
        let mut s = base();
        let delta = gumbel_delta(s.r1, s.n2).unwrap();
        s.mu1 = s.mu2 + delta * s.sigma2;
        assert!((expected_fnir(&s, false).unwrap() - 0.5).abs() < 1e-15);
        s.mu1 = 1e6;
        assert!(expected_fnir(&s, false).unwrap() < 1e-300);
    }

    #[test]
    fn expected_fnir_matches_draws_at_the_expected_threshold() {
        use rand_distr::{Distribution, StandardNormal};
        let s = base();
        let v = predict(&s).unwrap();
        let mut rng = crate::rng::stream(23, &[]);
        let n = 10_000;
        let (mut miss_raw, mut miss_fused) = (0, 0);
        for _ in 0..n {
            let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let genuine = s.mu1 + s.sigma1 * z[0];
            let knn = s.mu3 + s.sigma3 * z[1];
            miss_raw += usize::from(genuine < v.open_set_threshold_without);
            miss_fused += usize::from(genuine + knn < v.open_set_threshold_with);
        }
        assert!((miss_raw as f64 / n as f64 - v.expected_fnir_without).abs() < 0.02);
        assert!((miss_fused as f64 / n as f64 - v.expected_fnir_with).abs() < 0.02);
    }

    #[test]
    fn mu3_star_is_mu4_without_spread() {
        let mut s = base();
        s.sigma3 = 0.0;
        s.sigma4 = 0.0;
        assert!((mu3_star(&s).unwrap() - s.mu4).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_flagged() {
        let mut s = base();
        s.mu3 = mu3_star(&s).unwrap();
        let v = predict(&s).unwrap();
        assert!(v.open_set.at_boundary);
        assert!(!v.open_set.improves);
        assert!(v.open_set.gap.abs() < 1e-12);
    }

    #[test]
    fn stats_estimation() {
        let part = |genuine: Vec<f64>| ScorePartition {
            genuine,
            imposter: vec![0.0, 0.2],
            nonmated_maxima: vec![0.1, 0.3],
            mated_knn: vec![0.5, 0.7],
            nonmated_knn: vec![0.1, 0.4],
            rank1_correct: vec![true, true],
            num_subjects: 3,
        };
        let s = estimate_stats(&part(vec![0.0, 1.0]), 1, 1, false).unwrap();
        assert_eq!(s.mu1, 0.5);
        assert!((s.sigma1 - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.n1, s.n2, s.n3, s.m), (2, 2, 2, 3));
        assert!(matches!(
            estimate_stats(&part(vec![0.5, 0.5]), 1, 1, false),
            Err(Error::DegenerateSample(_))
        ));
        let flat = estimate_stats(&part(vec![0.5, 0.5]), 1, 1, true).unwrap();
        assert_eq!((flat.mu1, flat.sigma1), (0.5, 0.0));
        assert!(matches!(
            estimate_stats(&part(vec![0.5]), 1, 1, true),
            Err(Error::DegenerateSample(_))
        ));
    }

    fn random_stats(rng: &mut impl rand::Rng) -> ScoreStats {
        let n2 = rng.random_range(50..5000);
        let n3 = rng.random_range(100..100_000);
        ScoreStats {
            mu1: rng.random_range(0.2..1.0),
            sigma1: rng.random_range(0.01..0.3),
            mu2: rng.random_range(-0.2..0.4),
            sigma2: rng.random_range(0.01..0.3),
            mu3: 0.0,
            sigma3: rng.random_range(0.0..0.3),
            mu4: rng.random_range(-0.2..0.6),
            sigma4: rng.random_range(0.0..0.3),
            n1: 100,
            n2,
            n3,
            m: 50,
            r1: rng.random_range(1..n2 / 2),
            r2: rng.random_range(1..n3 / 2),
        }
    }

    /// Root of rhs − lhs in μ₃ by bisection, evaluating the inequality directly.
    fn bisect_mu3(stats: &ScoreStats) -> f64 {
        let gap = |mu3: f64| {
            let s = ScoreStats { mu3, ..*stats };
            let c = open_set_condition(&s).unwrap();
            c.rhs - c.lhs
        };
        let (mut lo, mut hi) = (-100.0, 100.0);
        assert!(gap(lo) < 0.0 && gap(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gap(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn mu3_star_matches_bisection_root() {
        let mut rng = crate::rng::stream(17, &[]);
        for _ in 0..1000 {
            let s = random_stats(&mut rng);
            let star = mu3_star(&s).unwrap();
            assert!((star - bisect_mu3(&s)).abs() < 1e-10, "{s:?}");
            let c = open_set_condition(&ScoreStats { mu3: star, ..s }).unwrap();
            assert!((c.lhs - c.rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn lhs_decreases_in_mu3_and_rhs_is_constant() {
        let mut rng = crate::rng::stream(18, &[]);
        for _ in 0..200 {
            let s = random_stats(&mut rng);
            let star = mu3_star(&s).unwrap();
            let mut last: Option<Condition> = None;
            for i in -20..=20 {
                let c = open_set_condition(&ScoreStats {
                    mu3: star + i as f64 * 0.01,
                    ..s
                })
                .unwrap();
                if let Some(prev) = last {
                    assert!(c.lhs < prev.lhs);
                    assert_eq!(c.rhs, prev.rhs);
                }
                assert_eq!(c.improves, i > 0);
                last = Some(c);
            }
        }
    }

    #[test]
    fn estimates_recover_the_generating_mean() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::stream(19, &[]);
        let d = Normal::new(0.7, 0.1).unwrap();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| (0..n).map(|_| d.sample(rng)).collect::<Vec<_>>();
        let part = ScorePartition {
            genuine: draw(&mut rng, 100_000),
            imposter: draw(&mut rng, 10),
            nonmated_maxima: draw(&mut rng, 10),
            mated_knn: draw(&mut rng, 10),
            nonmated_knn: draw(&mut rng, 10),
            rank1_correct: vec![true; 100_000],
            num_subjects: 10,
        };
        let s = estimate_stats(&part, 1, 1, false).unwrap();
        assert!((s.mu1 - 0.7).abs() < 0.002);
        assert!((s.sigma1 - 0.1).abs() < 0.002);
    }

    #[test]
    fn stats_json_uses_fixed_names() {
        let v = serde_json::to_value(base()).unwrap();
        for key in ["mu1", "sigma4", "n1", "n2", "n3", "m", "r1", "r2"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
