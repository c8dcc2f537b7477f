use super::special::{ln_chi2_sf, ln_f_sf};
use super::{mean, median, sample_variance, TestKind, TestResult};
use crate::error::{Error, Result};

fn check_groups(groups: &[&[f64]]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::domain("variance homogeneity needs >= 2 groups"));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::domain(format!("group {i} has {} values, need >= 2", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("group {i} contains non-finite values")));
        }
    }
    Ok(())
}

/// Bartlett's test for equal variances, χ²(k - 1). Assumes normal groups.
pub fn bartlett(groups: &[&[f64]]) -> Result<TestResult> {
    check_groups(groups)?;
    let k = groups.len() as f64;
    let mut pooled_num = 0.0;
    let mut ln_term = 0.0;
    let mut inv_df = 0.0;
    let mut total = 0.0;
    for (i, g) in groups.iter().enumerate() {
        let df = g.len() as f64 - 1.0;
        let v = sample_variance(g);
        if v <= 0.0 {
            return Err(Error::domain(format!("group {i} has zero variance")));
        }
        pooled_num += df * v;
        ln_term += df * v.ln();
        inv_df += 1.0 / df;
        total += df;
    }
    let pooled = pooled_num / total;
    let num = total * pooled.ln() - ln_term;
    let den = 1.0 + (inv_df - 1.0 / total) / (3.0 * (k - 1.0));
    let t = (num / den).max(0.0);
    Ok(TestResult::from_ln_p(TestKind::Bartlett, t, Some(k - 1.0), ln_chi2_sf(t, k - 1.0)))
}

/// Levene's test in the Brown-Forsythe form: one-way ANOVA on absolute
/// deviations from each group's median, F(k - 1, N - k).
pub fn levene(groups: &[&[f64]]) -> Result<TestResult> {
    check_groups(groups)?;
    let k = groups.len();
    let dev: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let med = median(g);
            g.iter().map(|v| (v - med).abs()).collect()
        })
        .collect();
    let n: usize = dev.iter().map(Vec::len).sum();
    let group_means: Vec<f64> = dev.iter().map(|d| mean(d)).collect();
    let grand = dev.iter().flatten().sum::<f64>() / n as f64;
    let between = if group_means.windows(2).all(|w| w[0] == w[1]) {
        0.0
    } else {
        dev.iter()
            .zip(&group_means)
            .map(|(d, m)| d.len() as f64 * (m - grand) * (m - grand))
            .sum::<f64>()
    };
    let within: f64 = dev
        .iter()
        .zip(&group_means)
        .map(|(d, m)| d.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .sum();
    let d1 = (k - 1) as f64;
    let d2 = (n - k) as f64;
    let result = if between == 0.0 {
        TestResult::from_ln_p(TestKind::Levene, 0.0, Some(d1), 0.0)
    } else if within == 0.0 {
        TestResult::from_ln_p(TestKind::Levene, f64::MAX, Some(d1), f64::NEG_INFINITY)
            .with_note("zero within-group spread")
    } else {
        let w = (d2 / d1) * between / within;
        TestResult::from_ln_p(TestKind::Levene, w, Some(d1), ln_f_sf(w, d1, d2))
    };
    Ok(result.with_note(format!("Brown-Forsythe (median-centred); df2 = {d2}")))
}

/// Bartlett and Levene on the same groups.
pub fn variance_homogeneity(groups: &[&[f64]]) -> Result<(TestResult, TestResult)> {
    Ok((bartlett(groups)?, levene(groups)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal(seed: u64, n: usize, sd: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn identical_groups() {
        let g = [1.0, 2.0, 4.0, 8.0, 9.5];
        let (b, l) = variance_homogeneity(&[&g, &g, &g]).unwrap();
        assert_eq!(l.statistic, 0.0);
        assert_eq!(l.p_value, 1.0);
        assert!(b.statistic.abs() < 1e-12);
    }

    #[test]
    fn very_different_variances() {
        let a = normal(1, 50, 1.0);
        let b = normal(2, 50, 10.0);
        let (bt, lv) = variance_homogeneity(&[&a, &b]).unwrap();
        assert!(bt.p_value < 0.001 && lv.p_value < 0.001, "{} {}", bt.p_value, lv.p_value);
    }

    #[test]
    fn equal_variances_mostly_accepted() {
        let accepted = (0..100)
            .filter(|&s| {
                let a = normal(100 + 2 * s, 40, 1.0);
                let b = normal(101 + 2 * s, 40, 1.0);
                let (bt, lv) = variance_homogeneity(&[&a, &b]).unwrap();
                bt.p_value > 0.05 && lv.p_value > 0.05
            })
            .count();
        assert!(accepted >= 90, "{accepted}");
    }

    #[test]
    fn bartlett_matches_direct_formula() {
        let a = [1.0, 3.0, 2.0, 5.0];
        let b = [2.0, 9.0, 4.0, 1.0, 7.0];
        let (va, vb) = (sample_variance(&a), sample_variance(&b));
        let sp = (3.0 * va + 4.0 * vb) / 7.0;
        let num = 7.0 * sp.ln() - 3.0 * va.ln() - 4.0 * vb.ln();
        let den = 1.0 + (1.0 / 3.0 + 1.0 / 4.0 - 1.0 / 7.0) / 3.0;
        let r = bartlett(&[&a, &b]).unwrap();
        assert!((r.statistic - num / den).abs() < 1e-12);
    }

    #[test]
    fn degenerate_groups_rejected() {
        assert!(levene(&[&[1.0], &[1.0, 2.0]]).is_err());
        assert!(bartlett(&[&[1.0, 1.0], &[1.0, 2.0]]).is_err());
        assert!(levene(&[&[1.0, 2.0]]).is_err());
    }
}
