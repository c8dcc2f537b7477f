use serde::{Deserialize, Serialize};

use super::special::ln_gamma;
use super::{TestKind, TestResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    Greater,
    Less,
}

/// Relative slack when comparing probabilities for the two-sided sum.
const MINLIKE_REL_ERR: f64 = 1.0 + 1e-7;

/// Probability masses for all outcomes 0..=n, either linear or as logs.
///
/// For moderate n the forward recurrence from `(1-p)^n` is exact whenever
/// the masses are dyadic (p = 1/2), which keeps symmetric cases bit-exact.
/// Otherwise masses are evaluated in log space through log-gamma.
enum PmfTable {
    Linear(Vec<f64>),
    Log(Vec<f64>),
}

fn pmf_table(n: u64, p: f64) -> PmfTable {
    let q = 1.0 - p;
    let ln_start = n as f64 * q.ln();
    if ln_start > -700.0 && n <= 10_000 {
        let mut out = Vec::with_capacity(n as usize + 1);
        let mut cur = q.powi(n as i32);
        let ratio = p / q;
        for k in 0..=n {
            out.push(cur);
            cur = cur * (n - k) as f64 / (k + 1) as f64 * ratio;
        }
        PmfTable::Linear(out)
    } else {
        let ln_n1 = ln_gamma(n as f64 + 1.0);
        PmfTable::Log(
            (0..=n)
                .map(|k| {
                    let kf = k as f64;
                    ln_n1 - ln_gamma(kf + 1.0) - ln_gamma((n - k) as f64 + 1.0)
                        + kf * p.ln()
                        + (n - k) as f64 * q.ln()
                })
                .collect(),
        )
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact binomial test of `k` successes in `n` trials against success
/// probability `p0`. The two-sided p-value sums every outcome no more
/// likely than the observed one ("minlike").
pub fn binomial_test(k: u64, n: u64, p0: f64, alternative: Alternative) -> Result<TestResult> {
    if k > n {
        return Err(Error::domain(format!("{k} successes in {n} trials")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::domain(format!("null probability {p0} outside (0, 1)")));
    }
    let k = k as usize;
    let note = match alternative {
        Alternative::TwoSided => "two-sided p by minlike convention",
        Alternative::Greater => "one-sided, alternative: greater",
        Alternative::Less => "one-sided, alternative: less",
    };
    let result = match pmf_table(n, p0) {
        PmfTable::Linear(pmf) => {
            let p = match alternative {
                Alternative::Greater => pmf[k..].iter().sum::<f64>(),
                Alternative::Less => pmf[..=k].iter().sum::<f64>(),
                Alternative::TwoSided => {
                    let cutoff = pmf[k] * MINLIKE_REL_ERR;
                    pmf.iter().filter(|&&v| v <= cutoff).sum::<f64>()
                }
            };
            TestResult::from_p(TestKind::Binomial, k as f64, None, p)
        }
        PmfTable::Log(ln_pmf) => {
            let ln_p = match alternative {
                Alternative::Greater => log_sum_exp(ln_pmf[k..].iter().copied()),
                Alternative::Less => log_sum_exp(ln_pmf[..=k].iter().copied()),
                Alternative::TwoSided => {
                    let cutoff = ln_pmf[k] + MINLIKE_REL_ERR.ln();
                    log_sum_exp(ln_pmf.iter().copied().filter(|&v| v <= cutoff))
                }
            };
            TestResult::from_ln_p(TestKind::Binomial, k as f64, None, ln_p)
        }
    };
    Ok(result.with_note(note))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: exact rational enumeration with integer binomials.
    fn enumerate_two_sided(k: u64, n: u64) -> f64 {
        let choose = |n: u64, r: u64| -> u128 {
            (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
        };
        let ck = choose(n, k);
        let num: u128 = (0..=n).map(|i| choose(n, i)).filter(|&c| c <= ck).sum();
        num as f64 / 2f64.powi(n as i32)
    }

    #[test]
    fn modal_outcome_is_one() {
        let r = binomial_test(5, 10, 0.5, Alternative::TwoSided).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn three_of_ten_exact() {
        let r = binomial_test(3, 10, 0.5, Alternative::TwoSided).unwrap();
        assert_eq!(r.p_value, 352.0 / 1024.0);
        assert_eq!(r.p_value, enumerate_two_sided(3, 10));
    }

    #[test]
    fn single_term_tail() {
        let r = binomial_test(10, 10, 0.5, Alternative::Greater).unwrap();
        assert_eq!(r.p_value, 1.0 / 1024.0);
        let r = binomial_test(0, 10, 0.5, Alternative::Less).unwrap();
        assert_eq!(r.p_value, 1.0 / 1024.0);
    }

    #[test]
    fn reflection_symmetry_exact() {
        for n in 1..=30 {
            for k in 0..=n {
                let a = binomial_test(k, n, 0.5, Alternative::TwoSided).unwrap().p_value;
                let b = binomial_test(n - k, n, 0.5, Alternative::TwoSided).unwrap().p_value;
                assert_eq!(a, b, "n={n} k={k}");
                assert_eq!(a, enumerate_two_sided(k, n), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn large_n_log_path() {
        let r = binomial_test(40_000, 100_000, 0.5, Alternative::TwoSided).unwrap();
        assert!(r.p_value >= 0.0 && r.p_value < 1e-100);
        assert!(r.ln_p.is_finite() && r.ln_p < -1000.0, "{}", r.ln_p);
        let r = binomial_test(50_000, 100_000, 0.5, Alternative::TwoSided).unwrap();
        assert!((r.p_value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_inputs() {
        assert!(binomial_test(11, 10, 0.5, Alternative::TwoSided).is_err());
        assert!(binomial_test(1, 10, 0.0, Alternative::TwoSided).is_err());
        assert!(binomial_test(1, 10, 1.0, Alternative::Less).is_err());
    }
}
