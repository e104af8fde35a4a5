//! Normality screens, two-sample location tests and robust OLS.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::numerics::{mean, midranks, sample_variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ShapiroWilk,
    Ks,
    MannWhitneyU,
    WelchT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    /// Zero for one-sample tests.
    pub n2: usize,
}

/// Screens at this level decide between the Welch and Mann-Whitney paths.
pub const NORMALITY_LEVEL: f64 = 0.05;
/// Largest sample handled by Shapiro-Wilk; larger samples use KS.
pub const SHAPIRO_WILK_MAX_N: usize = 5000;
/// Mann-Whitney p-values are exact when `n1 * n2` is at most this.
pub const MANN_WHITNEY_EXACT_MAX: usize = 20;

fn std_normal() -> Normal {
    Normal::standard()
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("sample contains non-finite values".into()));
    }
    Ok(())
}

/// Shapiro-Wilk W with Royston's coefficient and p-value approximations.
pub fn shapiro_wilk(sample: &[f64]) -> Result<TestResult> {
    let n = sample.len();
    if !(3..=SHAPIRO_WILK_MAX_N).contains(&n) {
        return Err(Error::Input(format!("Shapiro-Wilk needs 3..=5000 values, got {n}")));
    }
    check_finite(sample)?;
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= 0.0 {
        return Err(Error::Degenerate("constant sample".into()));
    }

    let nn2 = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let norm = std_normal();
        let m: Vec<f64> = (1..=nn2)
            .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
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
        for i in first..nn2 {
            a[i] = -m[i] / fac;
        }
    }

    let xm = mean(&x);
    let ssq: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let num: f64 = (0..nn2).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ssq).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::PI / 3.0;
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        let y = (1.0 - w).ln();
        let xx = an.ln();
        let (y, m, s) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], an);
            if y >= gamma {
                return Ok(TestResult {
                    method: TestMethod::ShapiroWilk,
                    statistic: w,
                    p_value: 0.0,
                    n1: n,
                    n2: 0,
                });
            }
            (
                -(gamma - y).ln(),
                poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an),
                poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp(),
            )
        } else {
            (
                y,
                poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx),
                poly(&[-0.4803, -0.082676, 0.0030302], xx).exp(),
            )
        };
        std_normal().sf((y - m) / s)
    };
    Ok(TestResult {
        method: TestMethod::ShapiroWilk,
        statistic: w,
        p_value: p.clamp(0.0, 1.0),
        n1: n,
        n2: 0,
    })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        // Jacobi theta form converges fast for small arguments.
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=10)
            .map(|k| (c * ((2 * k - 1) as f64).powi(2)).exp())
            .sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        2.0 * s
    };
    p.clamp(0.0, 1.0)
}

/// KS distance to a normal with the sample's mean and SD. The p-value uses
/// the asymptotic Kolmogorov law with Stephens' small-sample scaling; since
/// the parameters are estimated, this Lilliefors-style use is conservative.
pub fn ks_normality(sample: &[f64]) -> Result<TestResult> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::Input(format!("KS screen needs at least 8 values, got {n}")));
    }
    check_finite(sample)?;
    let mu = mean(sample);
    let sd = sample_variance(sample).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("constant sample".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let norm = std_normal();
    let nf = n as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let f = norm.cdf((v - mu) / sd);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let sqrt_n = nf.sqrt();
    let p = kolmogorov_sf((sqrt_n + 0.12 + 0.11 / sqrt_n) * d);
    Ok(TestResult {
        method: TestMethod::Ks,
        statistic: d,
        p_value: p,
        n1: n,
        n2: 0,
    })
}

/// Shapiro-Wilk inside its validity range, KS outside it.
pub fn normality_screen(sample: &[f64]) -> Result<TestResult> {
    if sample.len() <= SHAPIRO_WILK_MAX_N {
        shapiro_wilk(sample)
    } else {
        ks_normality(sample)
    }
}

fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Two-sided Mann-Whitney U test. `statistic` is U for `sample1`
/// (pairs where sample1 exceeds sample2, ties counting one half).
pub fn mann_whitney_u(sample1: &[f64], sample2: &[f64]) -> Result<TestResult> {
    let (n1, n2) = (sample1.len(), sample2.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Input("Mann-Whitney needs two non-empty samples".into()));
    }
    check_finite(sample1)?;
    check_finite(sample2)?;
    let pooled: Vec<f64> = sample1.iter().chain(sample2).copied().collect();
    let ranks = midranks(&pooled);
    let base = (n1 * (n1 + 1)) as f64 / 2.0;
    let u = ranks[..n1].iter().sum::<f64>() - base;
    let centre = (n1 * n2) as f64 / 2.0;
    let dev = (u - centre).abs();

    let p = if n1 * n2 <= MANN_WHITNEY_EXACT_MAX {
        let n = n1 + n2;
        let (mut hits, mut total) = (0u64, 0u64);
        for_each_subset(n, n1, &mut |idx| {
            let ui = idx.iter().map(|&i| ranks[i]).sum::<f64>() - base;
            total += 1;
            if (ui - centre).abs() >= dev - 1e-9 {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    } else {
        let n = (n1 + n2) as f64;
        let mut sorted = pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let mut ties = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            ties += t * t * t - t;
            i = j;
        }
        let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = (dev - 0.5).max(0.0) / var.sqrt();
            (2.0 * std_normal().sf(z)).min(1.0)
        }
    };
    Ok(TestResult {
        method: TestMethod::MannWhitneyU,
        statistic: u,
        p_value: p.clamp(0.0, 1.0),
        n1,
        n2,
    })
}

/// Welch's unequal-variance t test, two-sided.
pub fn welch_t(sample1: &[f64], sample2: &[f64]) -> Result<TestResult> {
    let (n1, n2) = (sample1.len(), sample2.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::Input("Welch t needs at least two values per sample".into()));
    }
    check_finite(sample1)?;
    check_finite(sample2)?;
    let (m1, m2) = (mean(sample1), mean(sample2));
    let (q1, q2) = (
        sample_variance(sample1) / n1 as f64,
        sample_variance(sample2) / n2 as f64,
    );
    let se2 = q1 + q2;
    let result = |statistic, p_value| TestResult {
        method: TestMethod::WelchT,
        statistic,
        p_value,
        n1,
        n2,
    };
    if se2 <= 0.0 {
        if m1 == m2 {
            return Ok(result(0.0, 1.0));
        }
        return Err(Error::Degenerate("both samples constant with different means".into()));
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (q1 * q1 / (n1 - 1) as f64 + q2 * q2 / (n2 - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(result(t, (2.0 * dist.sf(t.abs())).min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPath {
    WelchT,
    MannWhitneyU,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MispricingTest {
    /// `None` when the screen could not run (constant residuals); that case
    /// counts as non-normal.
    pub screen_unmasked: Option<TestResult>,
    pub screen_masked: Option<TestResult>,
    pub normality_rejected: bool,
    pub path: GroupPath,
    pub test: TestResult,
    pub level: f64,
}

/// Screen both residual groups for normality, then compare them with Welch's
/// t test if both pass and with Mann-Whitney U otherwise.
pub fn mispricing_test(unmasked: &[f64], masked: &[f64]) -> Result<MispricingTest> {
    if unmasked.is_empty() || masked.is_empty() {
        return Err(Error::Input("residual groups must be non-empty".into()));
    }
    let screen = |x: &[f64]| match normality_screen(x) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(Error::Input(_)) if x.len() < 3 => Ok(None),
        Err(e) => Err(e),
    };
    let su = screen(unmasked)?;
    let sm = screen(masked)?;
    let passes = |s: &Option<TestResult>| s.is_some_and(|r| r.p_value >= NORMALITY_LEVEL);
    let normality_rejected = !(passes(&su) && passes(&sm));
    let (path, test) = if normality_rejected || unmasked.len() < 2 || masked.len() < 2 {
        (GroupPath::MannWhitneyU, mann_whitney_u(unmasked, masked)?)
    } else {
        (GroupPath::WelchT, welch_t(unmasked, masked)?)
    };
    Ok(MispricingTest {
        screen_unmasked: su,
        screen_masked: sm,
        normality_rejected,
        path,
        test,
        level: NORMALITY_LEVEL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    /// HC1 heteroskedasticity-robust standard errors.
    pub robust_se: Vec<f64>,
    pub classical_se: Vec<f64>,
    pub t_stats: Vec<f64>,
    /// Two-sided, Student t with `n - p` degrees of freedom.
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub n: usize,
}

/// OLS of `y` on the rows of `x` (include a column of ones for an intercept).
pub fn ols_robust(y: &[f64], x: &[Vec<f64>]) -> Result<OlsFit> {
    let n = y.len();
    if x.len() != n || n == 0 {
        return Err(Error::Shape("design and response lengths differ".into()));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    if n <= p {
        return Err(Error::Input(format!("need more rows ({n}) than regressors ({p})")));
    }
    check_finite(y)?;
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    if xm.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("design contains non-finite values".into()));
    }
    let yv = DVector::from_column_slice(y);
    let qr = xm.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();

    let resid = &yv - &xm * &beta;
    let sse = resid.norm_squared();
    let dof = (n - p) as f64;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = xm.row(i).transpose();
        meat += (&xi * xi.transpose()) * resid[i].powi(2);
    }
    let hc1 = &xtx_inv * meat * &xtx_inv * (n as f64 / dof);
    let robust_se: Vec<f64> = (0..p).map(|i| hc1[(i, i)].max(0.0).sqrt()).collect();
    let sigma2 = sse / dof;
    let classical_se: Vec<f64> = (0..p).map(|i| (sigma2 * xtx_inv[(i, i)]).max(0.0).sqrt()).collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let t_stats: Vec<f64> = coefficients
        .iter()
        .zip(&robust_se)
        .map(|(b, se)| if *se > 0.0 { b / se } else if *b == 0.0 { 0.0 } else { b.signum() * f64::INFINITY })
        .collect();
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Numeric(e.to_string()))?;
    let p_values = t_stats
        .iter()
        .map(|t| (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
        .collect();
    let ym = mean(y);
    let sst: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
    let r_squared = if sst > 0.0 { (1.0 - sse / sst).clamp(0.0, 1.0) } else { 1.0 };
    Ok(OlsFit {
        coefficients,
        robust_se,
        classical_se,
        t_stats,
        p_values,
        r_squared,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn normal_quantiles(n: usize) -> Vec<f64> {
        let norm = Normal::standard();
        (1..=n).map(|i| norm.inverse_cdf((i as f64 - 0.5) / n as f64)).collect()
    }

    #[test]
    fn shapiro_wilk_examples() {
        let r = shapiro_wilk(&normal_quantiles(50)).unwrap();
        assert!(r.p_value > 0.9, "{r:?}");
        let mut rng = Rng::new(17);
        let u: Vec<f64> = (0..500).map(|_| rng.uniform()).collect();
        assert!(shapiro_wilk(&u).unwrap().p_value < 0.01);
        assert!(matches!(shapiro_wilk(&[2.0; 10]), Err(Error::Degenerate(_))));
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn shapiro_wilk_small_n_reference() {
        // Reference values from scipy.stats.shapiro.
        let r = shapiro_wilk(&[1.0, 2.0, 4.0]).unwrap();
        assert!((r.statistic - 0.9642857).abs() < 1e-6);
        assert!((r.p_value - 0.6368).abs() < 1e-4);
        let r = shapiro_wilk(&[2.0, 4.0, 5.0, 7.0, 20.0]).unwrap();
        assert!((r.statistic - 0.7844779).abs() < 1e-6, "{r:?}");
        assert!((r.p_value - 0.0601926).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn ks_examples() {
        let r = ks_normality(&normal_quantiles(2000)).unwrap();
        assert!(r.statistic < 0.01 && r.p_value > 0.99, "{r:?}");
        let mut rng = Rng::new(3);
        let mix: Vec<f64> = (0..1000)
            .map(|_| {
                let c = if rng.bernoulli(0.5) { -3.0 } else { 3.0 };
                rng.normal(c, 1.0)
            })
            .collect();
        assert!(ks_normality(&mix).unwrap().p_value < 0.01);
        assert!(ks_normality(&normal_quantiles(8)).is_ok());
        assert!(ks_normality(&normal_quantiles(7)).is_err());
        assert!(matches!(ks_normality(&[1.0; 9]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kolmogorov_branches_agree() {
        for l in [0.9, 1.1, 1.18, 1.3] {
            let c = -std::f64::consts::PI.powi(2) / (8.0 * l * l);
            let small: f64 = 1.0
                - (2.0 * std::f64::consts::PI).sqrt() / l
                    * (1..=10).map(|k| (c * ((2 * k - 1) as f64).powi(2)).exp()).sum::<f64>();
            let large: f64 = 2.0
                * (1..=100)
                    .map(|k| (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * l * l).exp())
                    .sum::<f64>();
            assert!((small - large).abs() < 1e-12);
        }
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn screens_agree_on_normal_draws() {
        let mut agree = 0;
        for seed in 0..100 {
            let mut rng = Rng::new(1000 + seed);
            let x: Vec<f64> = (0..200).map(|_| rng.standard_normal()).collect();
            let sw = shapiro_wilk(&x).unwrap().p_value < 0.05;
            let ks = ks_normality(&x).unwrap().p_value < 0.05;
            agree += (sw == ks) as usize;
        }
        assert!(agree >= 90, "agreement {agree}");
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.statistic, 4.5);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        let s = mann_whitney_u(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.statistic, 9.0);
        assert_eq!(s.p_value, r.p_value);
        let p = mann_whitney_u(&[3.0, 1.0, 2.0], &[6.0, 4.0, 5.0]).unwrap();
        assert_eq!(p, r);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn mann_whitney_normal_path() {
        // scipy.stats.mannwhitneyu(1..10, 6..15, method="asymptotic"): U = 12.5, p = 0.0050754.
        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        let b: Vec<f64> = (6..=15).map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.statistic, 12.5);
        assert!((r.p_value - 0.0050754).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn welch_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let r = welch_t(&x, &x).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let mut rng = Rng::new(8);
        let a: Vec<f64> = (0..10_000).map(|_| rng.normal(0.0, 1.0)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.normal(0.1, 1.0)).collect();
        let r = welch_t(&a, &b).unwrap();
        assert!(r.p_value < 0.01);
        let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        assert!((welch_t(&a2, &b2).unwrap().statistic - r.statistic).abs() < 1e-10);
        assert_eq!(welch_t(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p_value, 1.0);
    }

    #[test]
    fn welch_reference_value() {
        // scipy.stats.ttest_ind(equal_var=False): t = -1.8662779, df = 5.5732800, p = 0.1149902.
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 11.0]).unwrap();
        assert!((r.statistic + 1.8662779).abs() < 1e-6, "{r:?}");
        assert!((r.p_value - 0.1149902).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn mispricing_examples() {
        let mut rng = Rng::new(21);
        let u: Vec<f64> = (0..500).map(|_| rng.standard_normal()).collect();
        let shifted: Vec<f64> = u.iter().map(|v| v + 0.5).collect();
        let r = mispricing_test(&u, &shifted).unwrap();
        assert!(r.test.p_value < 1e-6);
        let same = mispricing_test(&u, &u).unwrap();
        assert!(same.test.p_value > 0.99);
        let constant = mispricing_test(&[0.0; 20], &[0.0; 20]).unwrap();
        assert_eq!(constant.path, GroupPath::MannWhitneyU);
        assert!(mispricing_test(&[], &u).is_err());
    }

    #[test]
    fn mispricing_calibration() {
        let mut rejections = 0;
        for seed in 0..200 {
            let mut rng = Rng::new(5000 + seed);
            let a: Vec<f64> = (0..100).map(|_| rng.standard_normal()).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.standard_normal()).collect();
            rejections += (mispricing_test(&a, &b).unwrap().test.p_value < 0.05) as usize;
        }
        let rate = rejections as f64 / 200.0;
        assert!((0.03..=0.07).contains(&rate), "rate {rate}");
    }

    #[test]
    fn ols_examples() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| 1.0 + 0.5 * i as f64).collect();
        let fit = ols_robust(&y, &x).unwrap();
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 0.5).abs() < 1e-12);

        let mut rng = Rng::new(4);
        let x: Vec<Vec<f64>> = (0..100).map(|_| vec![1.0, rng.uniform()]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 + 3.0 * r[1] + rng.normal(0.0, 0.01)).collect();
        let fit = ols_robust(&y, &x).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 0.01);
        assert!((fit.coefficients[1] - 3.0).abs() < 0.01);

        let x: Vec<Vec<f64>> = (0..500).map(|_| vec![1.0, rng.standard_normal()]).collect();
        let y: Vec<f64> = x.iter().map(|r| 1.0 + r[1] + rng.standard_normal()).collect();
        let fit = ols_robust(&y, &x).unwrap();
        for (r, c) in fit.robust_se.iter().zip(&fit.classical_se) {
            assert!((r / c - 1.0).abs() < 0.2);
        }

        let dup: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
        assert!(matches!(ols_robust(&[0.0; 10], &dup), Err(Error::Singular(_))));
        assert!(ols_robust(&[1.0, 2.0], &[vec![1.0, 0.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn hc1_hand_example() {
        // x = (0, 1, 2, 3), y = (0, 2, 1, 3): beta = (0.3, 0.8), residuals (-0.3, 0.9, -0.9, 0.3).
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64]).collect();
        let fit = ols_robust(&[0.0, 2.0, 1.0, 3.0], &x).unwrap();
        assert!((fit.coefficients[0] - 0.3).abs() < 1e-12);
        assert!((fit.coefficients[1] - 0.8).abs() < 1e-12);
        // (X'X)^-1 = [[0.7, -0.3], [-0.3, 0.2]]; meat = sum e_i^2 x_i x_i'.
        let e = [-0.3, 0.9, -0.9, 0.3];
        let mut meat = [[0.0; 2]; 2];
        for (i, ei) in e.iter().enumerate() {
            let xi = [1.0, i as f64];
            for a in 0..2 {
                for b in 0..2 {
                    meat[a][b] += ei * ei * xi[a] * xi[b];
                }
            }
        }
        let inv = [[0.7, -0.3], [-0.3, 0.2]];
        let mut v = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        v[a][b] += inv[a][c] * meat[c][d] * inv[d][b];
                    }
                }
            }
        }
        for j in 0..2 {
            let se = (v[j][j] * 4.0 / 2.0).sqrt();
            assert!((fit.robust_se[j] - se).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn p_values_in_unit_interval_and_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 2..30),
            b in proptest::collection::vec(-5.0f64..5.0, 2..30),
        ) {
            let ab = mann_whitney_u(&a, &b).unwrap();
            let ba = mann_whitney_u(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            prop_assert!((ab.statistic + ba.statistic - (a.len() * b.len()) as f64).abs() < 1e-9);
            if let (Ok(x), Ok(y)) = (welch_t(&a, &b), welch_t(&b, &a)) {
                prop_assert!((0.0..=1.0).contains(&x.p_value));
                prop_assert!((x.p_value - y.p_value).abs() < 1e-12);
            }
        }

        #[test]
        fn ols_matches_normal_equations(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let x: Vec<Vec<f64>> = (0..40).map(|_| vec![1.0, rng.standard_normal(), rng.standard_normal()]).collect();
            let y: Vec<f64> = (0..40).map(|_| rng.standard_normal()).collect();
            let fit = ols_robust(&y, &x).unwrap();
            let xm = DMatrix::from_fn(40, 3, |i, j| x[i][j]);
            let xtx = xm.transpose() * &xm;
            let xty = xm.transpose() * DVector::from_column_slice(&y);
            let beta = xtx.lu().solve(&xty).unwrap();
            for j in 0..3 {
                prop_assert!((fit.coefficients[j] - beta[j]).abs() <= 1e-10 * beta[j].abs().max(1.0));
            }
        }
    }
}
