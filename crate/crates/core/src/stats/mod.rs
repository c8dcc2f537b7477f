//! Inferential battery: χ² goodness of fit, Kruskal-Wallis, exact binomial,
//! normality tests and variance homogeneity.
//!
//! Every test returns a [`TestResult`] carrying both `p_value` and its natural
//! log `ln_p`. The log is computed directly from the tail functions, so it
//! stays finite when `p_value` underflows to zero.

mod binomial;
mod gof;
mod kruskal;
mod normality;
pub mod special;
mod variance;

use serde::{Deserialize, Serialize};

pub use binomial::{binomial_test, Alternative};
pub use gof::{chi_square_gof, Expected};
pub use kruskal::{kruskal_wallis, kruskal_wallis_with_min, midranks, KW_MIN_GROUP};
pub use normality::{
    jarque_bera, kolmogorov_smirnov, lilliefors, normality_battery, shapiro_wilk, NormalityReport,
};
pub use variance::{bartlett, levene, variance_homogeneity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    ChiSquareGof,
    KruskalWallis,
    Binomial,
    ShapiroWilk,
    Lilliefors,
    KolmogorovSmirnov,
    JarqueBera,
    Bartlett,
    Levene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_value: f64,
    /// Natural log of the p-value.
    pub ln_p: f64,
    pub notes: String,
}

impl TestResult {
    pub(crate) fn from_ln_p(test: TestKind, statistic: f64, df: Option<f64>, ln_p: f64) -> Self {
        let ln_p = ln_p.min(0.0);
        Self {
            test,
            statistic,
            df,
            p_value: ln_p.exp().clamp(0.0, 1.0),
            ln_p,
            notes: String::new(),
        }
    }

    pub(crate) fn from_p(test: TestKind, statistic: f64, df: Option<f64>, p: f64) -> Self {
        let p = p.clamp(0.0, 1.0);
        Self {
            test,
            statistic,
            df,
            p_value: p,
            ln_p: p.ln(),
            notes: String::new(),
        }
    }

    pub(crate) fn with_note(mut self, note: impl AsRef<str>) -> Self {
        if !self.notes.is_empty() {
            self.notes.push_str("; ");
        }
        self.notes.push_str(note.as_ref());
        self
    }

    /// Base-10 log of the p-value, for reporting values like 6.78E-213.
    pub fn log10_p(&self) -> f64 {
        self.ln_p / std::f64::consts::LN_10
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Formats a p-value from its natural log in scientific notation, even
/// below the f64 range.
pub fn format_p(ln_p: f64) -> String {
    if ln_p.is_nan() {
        return "NaN".into();
    }
    let log10 = ln_p / std::f64::consts::LN_10;
    if log10 > -300.0 {
        return format!("{:.2E}", ln_p.exp());
    }
    let exp = log10.floor();
    let mantissa = 10f64.powf(log10 - exp);
    format!("{mantissa:.2}E{exp}")
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_p_small_and_tiny() {
        assert_eq!(format_p(0.045_5f64.ln()), "4.55E-2");
        assert_eq!(format_p(-1000.0 * std::f64::consts::LN_10), "1.00E-1000");
    }
}
