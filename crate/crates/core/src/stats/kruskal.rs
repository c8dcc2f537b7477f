use super::special::ln_chi2_sf;
use super::{TestKind, TestResult};
use crate::error::{Error, Result};

/// Smallest group size for which the χ² approximation is applied.
pub const KW_MIN_GROUP: usize = 5;

/// 1-based ranks with ties sharing their mean rank, plus Σ (t³ - t) over
/// tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    (ranks, tie_term)
}

/// Kruskal-Wallis H test requiring at least [`KW_MIN_GROUP`] observations
/// per group.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<TestResult> {
    kruskal_wallis_with_min(groups, KW_MIN_GROUP)
}

/// Kruskal-Wallis H with midranks and the tie correction. When every value
/// ties, H is defined as 0.
pub fn kruskal_wallis_with_min(groups: &[&[f64]], min_group: usize) -> Result<TestResult> {
    if groups.len() < 2 {
        return Err(Error::domain("Kruskal-Wallis needs >= 2 groups"));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.is_empty()) {
        return Err(Error::domain(format!("group {i} is empty ({} values)", g.len())));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < min_group) {
        return Err(Error::domain(format!(
            "group {i} has {} values, fewer than the required {min_group}",
            g.len()
        )));
    }
    if groups.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::domain("Kruskal-Wallis values must be finite"));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let (ranks, tie_term) = midranks(&pooled);
    let df = (groups.len() - 1) as f64;
    let correction = 1.0 - tie_term / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(TestResult::from_ln_p(TestKind::KruskalWallis, 0.0, Some(df), 0.0)
            .with_note("all values tied; H defined as 0"));
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    Ok(TestResult::from_ln_p(TestKind::KruskalWallis, h, Some(df), ln_chi2_sf(h, df)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_groups_give_zero() {
        let g = [2.0; 6];
        let r = kruskal_wallis(&[&g, &g, &g]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn hand_ranked_example() {
        let r = kruskal_wallis_with_min(&[&[1., 2., 3.], &[4., 5., 6.], &[7., 8., 9.]], 1).unwrap();
        assert!((r.statistic - 7.2).abs() < 1e-9);
        assert_eq!(r.df, Some(2.0));
        assert!((r.p_value - (-3.6f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn guard_enforced_by_default() {
        assert!(kruskal_wallis(&[&[1., 2., 3.], &[4., 5., 6.]]).is_err());
        assert!(kruskal_wallis_with_min(&[&[1.], &[]], 0).is_err());
    }

    #[test]
    fn midranks_with_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, 6.0);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 5..12),
            b in proptest::collection::vec(-5.0f64..5.0, 5..12),
            c in proptest::collection::vec(-5.0f64..5.0, 5..12),
        ) {
            let h1 = kruskal_wallis(&[&a, &b, &c]).unwrap().statistic;
            let t = |v: &Vec<f64>| v.iter().map(|x| (x * 0.7).exp() + 3.0).collect::<Vec<_>>();
            let h2 = kruskal_wallis(&[&t(&a), &t(&b), &t(&c)]).unwrap().statistic;
            prop_assert!((h1 - h2).abs() < 1e-9);
        }
    }
}
