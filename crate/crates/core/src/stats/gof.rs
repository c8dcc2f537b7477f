use super::special::ln_chi2_sf;
use super::{TestKind, TestResult};
use crate::error::{Error, Result};
use crate::metrics::stable_sum;

/// Expected frequencies for a goodness-of-fit test.
#[derive(Debug, Clone, Copy)]
pub enum Expected<'a> {
    /// Equal probability for every category.
    Uniform,
    /// Expected counts or proportions; rescaled to the observed total.
    Counts(&'a [f64]),
}

/// Pearson χ² goodness-of-fit test, `Σ (O - E)² / E` with `categories - 1`
/// degrees of freedom.
pub fn chi_square_gof(observed: &[f64], expected: Expected<'_>) -> Result<TestResult> {
    let k = observed.len();
    if k < 2 {
        return Err(Error::domain("goodness of fit needs >= 2 categories"));
    }
    if observed.iter().any(|&o| o < 0.0 || !o.is_finite()) {
        return Err(Error::domain("observed counts must be finite and non-negative"));
    }
    let total: f64 = observed.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("observed counts sum to zero"));
    }
    let expected: Vec<f64> = match expected {
        Expected::Uniform => vec![total / k as f64; k],
        Expected::Counts(e) => {
            if e.len() != k {
                return Err(Error::domain(format!(
                    "{} expected counts for {k} categories",
                    e.len()
                )));
            }
            if e.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::domain("expected counts must be finite and positive"));
            }
            let esum: f64 = e.iter().sum();
            e.iter().map(|v| v * total / esum).collect()
        }
    };
    let mut terms: Vec<f64> = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .collect();
    let statistic = stable_sum(&mut terms);
    let df = (k - 1) as f64;
    let mut result =
        TestResult::from_ln_p(TestKind::ChiSquareGof, statistic, Some(df), ln_chi2_sf(statistic, df));
    if expected.iter().any(|&e| e < 5.0) {
        result = result.with_note("some expected counts below 5; χ² approximation may be poor");
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_fit() {
        let r = chi_square_gof(&[10.0, 10.0, 10.0], Expected::Uniform).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.df, Some(2.0));
    }

    #[test]
    fn sixty_forty() {
        let r = chi_square_gof(&[60.0, 40.0], Expected::Uniform).unwrap();
        assert!((r.statistic - 4.0).abs() < 1e-12);
        assert!((r.p_value - 0.045_50).abs() < 1e-4);
    }

    #[test]
    fn reference_split_statistic() {
        // 72.241% of 9463 effective crossings below 0.5.
        let r = chi_square_gof(&[6837.0, 2626.0], Expected::Uniform).unwrap();
        assert!((r.statistic - 1873.88).abs() < 0.01, "{}", r.statistic);
        assert_eq!(r.p_value, 0.0);
        assert!(r.ln_p.is_finite() && r.log10_p() < -400.0);
    }

    #[test]
    fn explicit_expected_and_permutation() {
        let a = chi_square_gof(&[30.0, 50.0, 20.0], Expected::Counts(&[0.3, 0.5, 0.2])).unwrap();
        assert!(a.statistic.abs() < 1e-12);
        let x = chi_square_gof(&[12.0, 30.0, 8.0], Expected::Uniform).unwrap();
        let y = chi_square_gof(&[8.0, 12.0, 30.0], Expected::Uniform).unwrap();
        assert_eq!(x.statistic, y.statistic);
    }

    #[test]
    fn small_expected_gets_note() {
        let r = chi_square_gof(&[3.0, 1.0], Expected::Uniform).unwrap();
        assert!(r.notes.contains("below 5"));
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(chi_square_gof(&[-1.0, 3.0], Expected::Uniform).is_err());
        assert!(chi_square_gof(&[3.0], Expected::Uniform).is_err());
    }
}
