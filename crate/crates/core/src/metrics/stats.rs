//! Summary statistics and significance tests over run-level results.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean and `z`·(sample std)/√n half-width. Values are summed in sorted
/// order so the result does not depend on how they were collected.
pub fn mean_ci(values: &[f64], z: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() == 1 {
        return Ok((mean, 0.0));
    }
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let std = (dev.iter().sum::<f64>() / (n - 1.0)).sqrt();
    Ok((mean, z * std / n.sqrt()))
}

fn moments(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test p-value, Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "welch test needs at least 2 points per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Err(Error::DegenerateSample("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Pearson correlation and least-squares slope of `y` on `x`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::DegenerateSample(format!("correlation needs at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("x"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance("y"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok((r, sxy / sxx))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Largest sample for which [`spearman_trend`] enumerates every permutation.
pub const MAX_EXACT_PERMUTATION: usize = 10;

/// Spearman's rho and its exact one-sided permutation p-value for an
/// increasing trend: the fraction of orderings of `y` with rho at least as
/// large as observed.
pub fn spearman_trend(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() > MAX_EXACT_PERMUTATION {
        return Err(Error::InvalidConfig(format!(
            "exact permutation test supports at most {MAX_EXACT_PERMUTATION} points, got {}",
            x.len()
        )));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let (rho, _) = pearson(&rx, &ry)?;
    let mut perm = ry.clone();
    let mut hits = 0u64;
    let mut total = 0u64;
    permute(&mut perm, 0, &mut |p| {
        total += 1;
        // Ties in x or y make some orderings score identically; a tiny slack
        // keeps the observed ordering counted.
        if pearson(&rx, p).map_or(false, |(r, _)| r >= rho - 1e-12) {
            hits += 1;
        }
    });
    Ok((rho, hits as f64 / total as f64))
}

fn permute(v: &mut [f64], start: usize, visit: &mut impl FnMut(&[f64])) {
    if start == v.len() {
        visit(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permute(v, start + 1, visit);
        v.swap(start, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn ci_of_one_run_is_zero() {
        assert_eq!(mean_ci(&[0.3], 1.96).unwrap(), (0.3, 0.0));
        assert_eq!(mean_ci(&[0.3; 5], 1.96).unwrap(), (0.3, 0.0));
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0], 1.96).unwrap();
        assert_eq!(m, 2.0);
        assert!((h - 1.96 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn welch_examples() {
        let a = [0.1, 0.4, 0.3, 0.9];
        assert!((welch_t_test(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lo: Vec<f64> = (0..50).map(|_| Normal::new(0.0, 0.1).unwrap().sample(&mut rng)).collect();
        let hi: Vec<f64> = (0..50).map(|_| Normal::new(100.0, 0.1).unwrap().sample(&mut rng)).collect();
        assert!(welch_t_test(&lo, &hi).unwrap() < 1e-6);
        assert!(matches!(welch_t_test(&[1.0], &a), Err(Error::DegenerateSample(_))));
        assert!(matches!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn welch_reference_value() {
        // scipy.stats.ttest_ind(a, b, equal_var=False): t = -2.37635, df = 6.97226.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let p = welch_t_test(&a, &b).unwrap();
        assert!((p - 0.049_284_338_206_730_49).abs() < 1e-10, "{p}");
    }

    #[test]
    fn welch_null_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = Normal::new(0.5, 0.2).unwrap();
        let mut ps: Vec<f64> = (0..1000)
            .map(|_| {
                let a: Vec<f64> = (0..20).map(|_| dist.sample(&mut rng)).collect();
                let b: Vec<f64> = (0..25).map(|_| dist.sample(&mut rng)).collect();
                welch_t_test(&a, &b).unwrap()
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let n = ps.len() as f64;
        let ks = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| (p - i as f64 / n).abs().max(((i + 1) as f64 / n - p).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let (r, slope) = pearson(&x, &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!((slope - 2.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::DegenerateVariance(_))));
        assert!(matches!(pearson(&x[..2], &x[..2]), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[0.3, 0.1, 0.3, 0.2]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_exact_p() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (rho, p) = spearman_trend(&x, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!((rho - 1.0).abs() < 1e-15);
        assert!((p - 1.0 / 120.0).abs() < 1e-15);
        // One adjacent swap: rho = 0.9, reached or beaten by 5 of 120 orderings.
        let (rho, p) = spearman_trend(&x, &[0.1, 0.3, 0.2, 0.4, 0.5]).unwrap();
        assert!((rho - 0.9).abs() < 1e-12);
        assert!((p - 5.0 / 120.0).abs() < 1e-15);
        let (_, p) = spearman_trend(&x, &[0.5, 0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(p, 1.0);
    }
}
