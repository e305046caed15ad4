//! Descriptive statistics, least squares with classical and HC1 covariance,
//! and Welch's two-sample t-test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("need more observations ({n}) than parameters ({p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("empty sample")]
    Empty,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Median with the midpoint rule for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Sample variance (n − 1 denominator).
pub fn variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    Some(xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
}

pub fn std_dev(xs: &[f64]) -> Option<f64> {
    variance(xs).map(f64::sqrt)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = mean(a)?;
    let mb = mean(b)?;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Classical,
    #[default]
    Hc1,
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub df_resid: usize,
    pub covariance: CovarianceKind,
}

/// Ordinary least squares through a QR factorisation.
///
/// `x` is row-major with `p` columns; include an explicit column of ones for
/// an intercept.
pub fn ols(x: &[Vec<f64>], y: &[f64], covariance: CovarianceKind) -> Result<OlsFit, StatsError> {
    let n = y.len();
    if x.len() != n {
        return Err(StatsError::Dimension(format!("{} rows vs {} responses", x.len(), n)));
    }
    let p = x.first().map_or(0, Vec::len);
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(StatsError::Dimension("ragged design".into()));
    }
    if n <= p {
        return Err(StatsError::TooFewObservations { n, p });
    }
    if y.iter().chain(x.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);

    let qr = xm.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return Err(StatsError::RankDeficient);
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(StatsError::RankDeficient)?;
    let residuals = &yv - &xm * &beta;

    // (X'X)^-1 = R^-1 R^-T
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(StatsError::RankDeficient)?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let df_resid = n - p;

    let cov = match covariance {
        CovarianceKind::Classical => {
            let s2 = residuals.norm_squared() / df_resid as f64;
            xtx_inv * s2
        }
        CovarianceKind::Hc1 => {
            let mut meat = DMatrix::<f64>::zeros(p, p);
            for i in 0..n {
                let e2 = residuals[i] * residuals[i];
                if e2 == 0.0 {
                    continue;
                }
                for a in 0..p {
                    let xa = xm[(i, a)] * e2;
                    for b in 0..p {
                        meat[(a, b)] += xa * xm[(i, b)];
                    }
                }
            }
            let scale = n as f64 / df_resid as f64;
            &xtx_inv * meat * &xtx_inv * scale
        }
    };

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let std_errors: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let t_values: Vec<f64> = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(&b, &se)| t_ratio(b, se))
        .collect();
    let p_values = t_values
        .iter()
        .map(|&t| t_two_sided_p(t, df_resid as f64))
        .collect();
    Ok(OlsFit {
        coefficients,
        std_errors,
        t_values,
        p_values,
        residuals: residuals.iter().copied().collect(),
        df_resid,
        covariance,
    })
}

/// `estimate / se` with a zero standard error mapped to 0 or ±∞.
pub fn t_ratio(estimate: f64, se: f64) -> f64 {
    if se > 0.0 {
        estimate / se
    } else if estimate == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

impl WelchTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::Empty);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (ma, mb) = (mean(a).unwrap(), mean(b).unwrap());
    let (va, vb) = (variance(a).unwrap(), variance(b).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    let diff = ma - mb;
    let df = if se2 > 0.0 {
        se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    let t = t_ratio(diff, se2.sqrt());
    Ok(WelchTest {
        mean_a: ma,
        mean_b: mb,
        t,
        df,
        p_value: t_two_sided_p(t, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn pearson_edge_cases() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap();
        assert!(r > 0.99);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ols_matches_normal_equations() {
        // y = 1 + 2 x1 - 0.5 x2 + noise-free wiggle
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let f = i as f64;
                vec![1.0, f, (f * 0.7).sin()]
            })
            .collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, r)| 1.0 + 2.0 * r[1] - 0.5 * r[2] + 0.01 * ((i * 7 % 5) as f64 - 2.0))
            .collect();
        let fit = ols(&x, &y, CovarianceKind::Classical).unwrap();
        // normal equations by Gaussian elimination
        let p = 3;
        let mut a = vec![vec![0.0; p + 1]; p];
        for (row, &yi) in x.iter().zip(&y) {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += row[i] * row[j];
                }
                a[i][p] += row[i] * yi;
            }
        }
        for c in 0..p {
            for r in c + 1..p {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        let mut b = vec![0.0; p];
        for c in (0..p).rev() {
            b[c] = (a[c][p] - (c + 1..p).map(|k| a[c][k] * b[k]).sum::<f64>()) / a[c][c];
        }
        for (got, want) in fit.coefficients.iter().zip(&b) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn ols_rank_deficient() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(ols(&x, &y, CovarianceKind::Hc1).unwrap_err(), StatsError::RankDeficient);
    }

    #[test]
    fn hc1_matches_sandwich_for_simple_regression() {
        // Single regressor plus intercept: HC1 slope variance has closed form
        // n/(n-2) * Σ (x-x̄)² e² / (Σ (x-x̄)²)².
        let xs: Vec<f64> = (0..15).map(|i| i as f64 * 0.5).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| 3.0 + x + if i % 2 == 0 { 0.3 * x } else { -0.2 * x })
            .collect();
        let design: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
        let fit = ols(&design, &ys, CovarianceKind::Hc1).unwrap();
        let xbar = mean(&xs).unwrap();
        let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
        let meat: f64 = xs
            .iter()
            .zip(&fit.residuals)
            .map(|(x, e)| (x - xbar).powi(2) * e * e)
            .sum();
        let n = xs.len() as f64;
        let want = (n / (n - 2.0) * meat / (sxx * sxx)).sqrt();
        assert!((fit.std_errors[1] - want).abs() < 1e-12);
    }

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let w = welch_t_test(&a, &a).unwrap();
        assert_eq!(w.t, 0.0);
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn welch_closed_form() {
        let a = [1.2, 2.3, 2.9, 4.4, 5.0, 3.1];
        let b = [0.2, 0.4, 0.9, 1.1];
        let w = welch_t_test(&a, &b).unwrap();
        // independent recomputation
        let ma = a.iter().sum::<f64>() / 6.0;
        let mb = b.iter().sum::<f64>() / 4.0;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / 5.0;
        let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / 3.0;
        let t = (ma - mb) / (va / 6.0 + vb / 4.0).sqrt();
        let df = (va / 6.0 + vb / 4.0).powi(2)
            / ((va / 6.0).powi(2) / 5.0 + (vb / 4.0).powi(2) / 3.0);
        assert!((w.t - t).abs() < 1e-10);
        assert!((w.df - df).abs() < 1e-10);
        assert!(w.p_value > 0.0 && w.p_value < 0.05);
    }

    #[test]
    fn t_p_values_sane() {
        assert_eq!(t_two_sided_p(0.0, 10.0), 1.0);
        let p = t_two_sided_p(1.96, 1e6);
        assert!((p - 0.05).abs() < 1e-3);
    }
}
