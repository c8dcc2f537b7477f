use serde::{Deserialize, Serialize};

use super::special::{kolmogorov_sf, ln_normal_sf, normal_cdf, normal_ppf};
use super::{mean, TestKind, TestResult};
use crate::error::{Error, Result};

/// Smallest sample for which Shapiro-Wilk is run by the battery.
pub const SHAPIRO_MIN: usize = 8;
/// Upper validity bound of the Royston approximation.
pub const SHAPIRO_MAX: usize = 5000;
/// Smallest sample for which Jarque-Bera is run by the battery.
pub const JARQUE_BERA_MIN: usize = 20;
/// Smallest sample for the Dallal-Wilkinson p-value.
pub const LILLIEFORS_MIN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTest {
    pub test: TestKind,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub tests: Vec<TestResult>,
    pub skipped: Vec<SkippedTest>,
    /// Sample skewness g1; `None` for constant or tiny samples.
    pub skewness: Option<f64>,
    /// Sample excess kurtosis g2; `None` for constant or tiny samples.
    pub excess_kurtosis: Option<f64>,
    /// (theoretical normal quantile, standardized sample value), ascending.
    pub qq_points: Vec<(f64, f64)>,
}

impl NormalityReport {
    pub fn get(&self, test: TestKind) -> Option<&TestResult> {
        self.tests.iter().find(|t| t.test == test)
    }
}

fn check_finite(sample: &[f64]) -> Result<()> {
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("sample contains non-finite values"));
    }
    Ok(())
}

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Central moments m2, m3, m4 (population normalisation).
fn central_moments(sample: &[f64]) -> (f64, f64, f64) {
    let mu = mean(sample);
    let n = sample.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in sample {
        let d = x - mu;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (m2 / n, m3 / n, m4 / n)
}

fn is_constant(sample: &[f64]) -> bool {
    sample.windows(2).all(|w| w[0] == w[1])
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Shapiro-Wilk W with the Royston (AS R94) coefficient and p-value
/// approximations. Valid for 3 ≤ n ≤ 5000.
pub fn shapiro_wilk(sample: &[f64]) -> Result<TestResult> {
    check_finite(sample)?;
    let n = sample.len();
    if !(3..=SHAPIRO_MAX).contains(&n) {
        return Err(Error::domain(format!("Shapiro-Wilk needs 3..=5000 values, got {n}")));
    }
    let x = sorted(sample);
    if x[0] == x[n - 1] {
        return Err(Error::domain("Shapiro-Wilk on a constant sample"));
    }
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    let an = n as f64;
    let half = n / 2;

    // Coefficients for the lower half, applied to (x[n-1-i] - x[i]).
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let m: Vec<f64> =
            (0..half).map(|i| -normal_ppf((i as f64 + 1.0 - 0.375) / (an + 0.25))).collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) + m[0] / ssumm2;
        let (first_scaled, fac) = if n > 5 {
            let a2 = m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first_scaled..half {
            a[i] = m[i] / fac;
        }
    }

    let mu = mean(&x);
    let ss: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum();
    let b: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (b * b / ss).clamp(0.0, 1.0);

    let ln_p = if n == 3 {
        let pw = (6.0 / std::f64::consts::PI)
            * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        pw.max(0.0).ln()
    } else {
        let w1 = 1.0 - w;
        let mut y = w1.ln();
        let (m, s) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], an);
            if y >= gamma {
                return Ok(TestResult::from_p(TestKind::ShapiroWilk, w, None, 1e-99));
            }
            y = -(gamma - y).ln();
            (
                poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an),
                poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp(),
            )
        } else {
            let xx = an.ln();
            (
                poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx),
                poly(&[-0.4803, -0.082676, 0.0030302], xx).exp(),
            )
        };
        ln_normal_sf((y - m) / s)
    };
    Ok(TestResult::from_ln_p(TestKind::ShapiroWilk, w, None, ln_p))
}

/// Largest distance between the empirical CDF of sorted `x` and `cdf`.
fn ks_distance(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            ((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// One-sample Kolmogorov-Smirnov test against a fully specified CDF, with
/// Stephens' finite-sample scaling `(√n + 0.12 + 0.11/√n)·D`.
pub fn kolmogorov_smirnov(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<TestResult> {
    check_finite(sample)?;
    if sample.is_empty() {
        return Err(Error::domain("Kolmogorov-Smirnov on an empty sample"));
    }
    let x = sorted(sample);
    let d = ks_distance(&x, cdf);
    let sn = (x.len() as f64).sqrt();
    let p = kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d);
    Ok(TestResult::from_p(TestKind::KolmogorovSmirnov, d, None, p))
}

/// Lilliefors test: KS distance against a normal with estimated mean and
/// standard deviation. p-value from the Dallal-Wilkinson approximation
/// (n ≥ 5), with Stephens' polynomial above p = 0.1.
pub fn lilliefors(sample: &[f64]) -> Result<TestResult> {
    check_finite(sample)?;
    let n = sample.len();
    if n < LILLIEFORS_MIN {
        return Err(Error::domain(format!("Lilliefors needs >= 5 values, got {n}")));
    }
    let x = sorted(sample);
    let mu = mean(&x);
    let sd = super::sample_variance(&x).sqrt();
    if sd == 0.0 {
        return Err(Error::domain("Lilliefors on a constant sample"));
    }
    let k = ks_distance(&x, |v| normal_cdf((v - mu) / sd));
    let nf = n as f64;
    let (kd, nd) = if n <= 100 { (k, nf) } else { (k * (nf / 100.0).powf(0.49), 100.0) };
    let ln_p = -7.01256 * kd * kd * (nd + 2.78019) + 2.99587 * kd * (nd + 2.78019).sqrt()
        - 0.122119
        + 0.974598 / nd.sqrt()
        + 1.67997 / nd;
    if ln_p <= 0.1f64.ln() {
        return Ok(TestResult::from_ln_p(TestKind::Lilliefors, k, None, ln_p));
    }
    let kk = (nf.sqrt() - 0.01 + 0.85 / nf.sqrt()) * k;
    let p = if kk <= 0.302 {
        1.0
    } else if kk <= 0.5 {
        poly(&[2.76773, -19.828315, 80.709644, -138.55152, 81.218052], kk)
    } else if kk <= 0.9 {
        poly(&[-4.901232, 40.662806, -97.490286, 94.029866, -32.355711], kk)
    } else if kk <= 1.31 {
        poly(&[6.198765, -19.739231, 23.480146, -12.270628, 2.403344], kk)
    } else {
        0.0
    };
    Ok(TestResult::from_p(TestKind::Lilliefors, k, None, p))
}

/// Jarque-Bera test, `n/6 · (S² + K²/4)` against χ²(2).
pub fn jarque_bera(sample: &[f64]) -> Result<TestResult> {
    check_finite(sample)?;
    let n = sample.len();
    if n < 2 {
        return Err(Error::domain("Jarque-Bera needs >= 2 values"));
    }
    let (m2, m3, m4) = central_moments(sample);
    if m2 == 0.0 {
        return Err(Error::domain("Jarque-Bera on a constant sample"));
    }
    let s = m3 / m2.powf(1.5);
    let k = m4 / (m2 * m2) - 3.0;
    let jb = n as f64 / 6.0 * (s * s + k * k / 4.0);
    // χ²(2) survival is exactly exp(-x/2).
    Ok(TestResult::from_ln_p(TestKind::JarqueBera, jb, Some(2.0), -jb / 2.0))
}

/// Runs every applicable normality test. Tests outside their size range,
/// or all tests on a constant sample, are listed in `skipped`. The KS test
/// here compares the standardized sample to N(0, 1), which is conservative
/// because the parameters are estimated; Lilliefors is the corrected form.
pub fn normality_battery(sample: &[f64]) -> Result<NormalityReport> {
    check_finite(sample)?;
    let n = sample.len();
    let all = [
        TestKind::ShapiroWilk,
        TestKind::Lilliefors,
        TestKind::KolmogorovSmirnov,
        TestKind::JarqueBera,
    ];
    let constant = n < 2 || is_constant(sample);
    if constant {
        let note = if n < 2 { "fewer than 2 values" } else { "constant sample" };
        return Ok(NormalityReport {
            tests: Vec::new(),
            skipped: all.iter().map(|&test| SkippedTest { test, note: note.into() }).collect(),
            skewness: None,
            excess_kurtosis: None,
            qq_points: Vec::new(),
        });
    }

    let mut tests = Vec::new();
    let mut skipped = Vec::new();
    let mut skip = |test, note: String| skipped.push(SkippedTest { test, note });

    if (SHAPIRO_MIN..=SHAPIRO_MAX).contains(&n) {
        tests.push(shapiro_wilk(sample)?);
    } else {
        skip(TestKind::ShapiroWilk, format!("n = {n} outside {SHAPIRO_MIN}..={SHAPIRO_MAX}"));
    }
    if n >= LILLIEFORS_MIN {
        tests.push(lilliefors(sample)?);
    } else {
        skip(TestKind::Lilliefors, format!("n = {n} below {LILLIEFORS_MIN}"));
    }
    let mu = mean(sample);
    let sd = super::sample_variance(sample).sqrt();
    let z: Vec<f64> = sample.iter().map(|v| (v - mu) / sd).collect();
    tests.push(
        kolmogorov_smirnov(&z, normal_cdf)?
            .with_note("standardized sample vs N(0,1); conservative with estimated parameters"),
    );
    if n >= JARQUE_BERA_MIN {
        tests.push(jarque_bera(sample)?);
    } else {
        skip(TestKind::JarqueBera, format!("n = {n} below {JARQUE_BERA_MIN}"));
    }

    let (m2, m3, m4) = central_moments(sample);
    let zs = sorted(&z);
    let nf = n as f64;
    let qq_points = zs
        .iter()
        .enumerate()
        .map(|(i, &v)| (normal_ppf((i as f64 + 1.0 - 0.375) / (nf + 0.25)), v))
        .collect();
    Ok(NormalityReport {
        tests,
        skipped,
        skewness: Some(m3 / m2.powf(1.5)),
        excess_kurtosis: Some(m4 / (m2 * m2) - 3.0),
        qq_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, StandardNormal, Uniform};

    fn normal_sample(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn constant_sample_skips_everything() {
        let r = normality_battery(&[3.0; 40]).unwrap();
        assert!(r.tests.is_empty());
        assert_eq!(r.skipped.len(), 4);
        assert!(r.skipped.iter().all(|s| s.note.contains("constant")));
    }

    #[test]
    fn size_gates() {
        let r = normality_battery(&normal_sample(1, 7)).unwrap();
        let skipped: Vec<_> = r.skipped.iter().map(|s| s.test).collect();
        assert_eq!(skipped, vec![TestKind::ShapiroWilk, TestKind::JarqueBera]);
        let r = normality_battery(&normal_sample(1, 12)).unwrap();
        assert!(r.get(TestKind::ShapiroWilk).is_some());
        assert!(r.get(TestKind::JarqueBera).is_none());
    }

    #[test]
    fn qq_points_sorted_and_symmetric() {
        let r = normality_battery(&normal_sample(3, 101)).unwrap();
        assert!(r.qq_points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert!(r.qq_points[50].0.abs() < 1e-12);
        assert!((r.qq_points[0].0 + r.qq_points[100].0).abs() < 1e-9);
    }

    #[test]
    fn shapiro_on_ideal_normal_scores() {
        let n = 50;
        let x: Vec<f64> =
            (1..=n).map(|i| normal_ppf((i as f64 - 0.375) / (n as f64 + 0.25))).collect();
        let r = shapiro_wilk(&x).unwrap();
        assert!(r.statistic > 0.99, "{}", r.statistic);
        assert!(r.p_value > 0.5);
    }

    #[test]
    fn shapiro_reference_values() {
        // Reference values from an independent AS R94 implementation (scipy).
        let x: Vec<f64> = (1..=10).map(|i| (i as f64).powf(1.5)).collect();
        let r = shapiro_wilk(&x).unwrap();
        assert!((r.statistic - 0.951_883_295_9).abs() < 1e-7);
        assert!((r.p_value - 0.690_811_746_6).abs() < 1e-6);
        let x: Vec<f64> = (1..=200).map(|i| (i * 7919 % 1009) as f64 / 1009.0).collect();
        let r = shapiro_wilk(&x).unwrap();
        assert!((r.statistic - 0.953_803_860_9).abs() < 1e-7);
        assert!((r.p_value / 4.468_573_194_3e-6 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn shapiro_coefficients_are_unit_norm_for_n3() {
        // W for an equally spaced triple is exactly 1 and p = 1.
        let r = shapiro_wilk(&[1.0, 2.0, 3.0]).unwrap();
        assert!((r.statistic - 1.0).abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn skewed_data_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..300).map(|_| Exp::new(1.0).unwrap().sample(&mut rng)).collect();
        let r = normality_battery(&x).unwrap();
        for kind in [TestKind::ShapiroWilk, TestKind::Lilliefors, TestKind::JarqueBera] {
            assert!(r.get(kind).unwrap().p_value < 1e-4, "{kind:?}");
        }
        assert!(r.skewness.unwrap() > 1.0);
    }

    #[test]
    fn uniform_n500_jarque_bera_rejects() {
        let u = Uniform::new(0.0, 1.0).unwrap();
        let rejected = (0..100)
            .filter(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..500).map(|_| u.sample(&mut rng)).collect();
                jarque_bera(&x).unwrap().p_value < 0.01
            })
            .count();
        assert!(rejected >= 95, "{rejected}");
    }

    #[test]
    fn normal_n500_each_test_near_nominal() {
        // Each test should reject at the 1% level about 1% of the time. With
        // four tests the family-wise rate is near 3%.
        let mut rejected = [0usize; 4];
        let mut all_pass = 0;
        for seed in 0..200 {
            let r = normality_battery(&normal_sample(1000 + seed, 500)).unwrap();
            assert_eq!(r.tests.len(), 4);
            for (count, t) in rejected.iter_mut().zip(&r.tests) {
                *count += usize::from(t.p_value <= 0.01);
            }
            all_pass += usize::from(r.tests.iter().all(|t| t.p_value > 0.01));
        }
        assert!(rejected.iter().all(|&c| c <= 6), "{rejected:?}");
        assert!(all_pass >= 188, "{all_pass}");
    }

    #[test]
    fn lilliefors_large_deviation_in_log_space() {
        let mut x: Vec<f64> = normal_sample(5, 2000);
        x.iter_mut().for_each(|v| *v = v.exp());
        let r = lilliefors(&x).unwrap();
        assert!(r.ln_p.is_finite() && r.ln_p < -50.0);
    }
}
