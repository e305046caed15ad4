//! Synthetic control construction: donor selection, weight fitting and
//! counterfactual synthesis on log-scale series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{self, CovarianceKind, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("donor pool is empty")]
    EmptyPool,
    #[error("treated pre-period series is constant; correlation undefined")]
    ConstantTreated,
    #[error("pre-period has {t_pre} points, need at least {needed}")]
    TooShort { t_pre: usize, needed: usize },
    #[error("donor {index} has {got} pre-period points, expected {expected}")]
    Misaligned {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite input")]
    NonFinite,
    #[error("donor matrix is rank deficient; use simplex weights instead")]
    RankDeficient,
    #[error("{weights} weights for {donors} donors")]
    WeightMismatch { weights: usize, donors: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Non-negative weights summing to one.
    #[default]
    Simplex,
    /// Least squares without intercept.
    Unconstrained,
}

/// How the candidate pool is narrowed before ranking by correlation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DonorMatching {
    #[default]
    Industry,
    None,
    /// Candidates whose website EU-traffic share is within `tolerance` of the treated one.
    EuShare { tolerance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DonorSettings {
    pub k: usize,
    pub matching: DonorMatching,
    pub mode: WeightMode,
}

impl Default for DonorSettings {
    fn default() -> Self {
        Self {
            k: 5,
            matching: DonorMatching::Industry,
            mode: WeightMode::Simplex,
        }
    }
}

/// A unit offered for selection, with its log pre-period path.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub instance_id: &'a str,
    pub industry: &'a str,
    pub eu_share: f64,
    pub pre: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorMeta {
    pub instance_id: String,
    pub correlation: f64,
    pub industry_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorPool {
    pub treated_instance_id: String,
    pub donor_ids: Vec<String>,
    pub selection: Vec<DonorMeta>,
    /// The matching rule left fewer than two candidates and the global pool was used.
    pub fallback_global: bool,
}

/// Top-`k` controls by Pearson correlation of log pre-period paths, after
/// the matching filter. Ties go to the smaller instance id.
pub fn select_donors(
    treated: &Candidate<'_>,
    pool: &[Candidate<'_>],
    k: usize,
    matching: DonorMatching,
) -> Result<DonorPool, SynthError> {
    if pool.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    if treated.pre.len() < 2 || stats::variance(treated.pre).is_none_or(|v| v <= 0.0) {
        return Err(SynthError::ConstantTreated);
    }
    let eligible = |c: &Candidate<'_>| c.instance_id != treated.instance_id;
    let matches = |c: &Candidate<'_>| match matching {
        DonorMatching::Industry => c.industry == treated.industry,
        DonorMatching::None => true,
        DonorMatching::EuShare { tolerance } => (c.eu_share - treated.eu_share).abs() <= tolerance,
    };
    let restricted: Vec<&Candidate<'_>> = pool.iter().filter(|c| eligible(c) && matches(c)).collect();
    let (chosen, fallback_global) = if restricted.len() < 2 && matching != DonorMatching::None {
        (pool.iter().filter(|c| eligible(c)).collect::<Vec<_>>(), true)
    } else {
        (restricted, false)
    };

    let mut scored: Vec<(f64, &Candidate<'_>)> = chosen
        .into_iter()
        .filter_map(|c| {
            if c.pre.len() != treated.pre.len() {
                return None;
            }
            stats::pearson(treated.pre, c.pre).map(|r| (r, c))
        })
        .collect();
    if scored.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.instance_id.cmp(b.1.instance_id))
    });
    scored.truncate(k.max(1));

    let selection: Vec<DonorMeta> = scored
        .iter()
        .map(|(r, c)| DonorMeta {
            instance_id: c.instance_id.to_string(),
            correlation: *r,
            industry_match: c.industry == treated.industry,
        })
        .collect();
    Ok(DonorPool {
        treated_instance_id: treated.instance_id.to_string(),
        donor_ids: selection.iter().map(|m| m.instance_id.clone()).collect(),
        selection,
        fallback_global,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWeights {
    pub donor_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub mode: WeightMode,
    /// Mean squared pre-period gap on the log scale.
    pub pre_mse: f64,
}

/// Mean squared gap between `treated` and the weighted donor combination.
pub fn pre_mse(treated: &[f64], donors: &[&[f64]], weights: &[f64]) -> f64 {
    let t = treated.len();
    if t == 0 {
        return 0.0;
    }
    (0..t)
        .map(|i| {
            let fit: f64 = donors.iter().zip(weights).map(|(d, w)| w * d[i]).sum();
            (treated[i] - fit).powi(2)
        })
        .sum::<f64>()
        / t as f64
}

fn validate(treated: &[f64], donors: &[&[f64]], needed: usize) -> Result<(), SynthError> {
    if donors.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    let t_pre = treated.len();
    if t_pre < needed {
        return Err(SynthError::TooShort { t_pre, needed });
    }
    for (index, d) in donors.iter().enumerate() {
        if d.len() != t_pre {
            return Err(SynthError::Misaligned {
                index,
                got: d.len(),
                expected: t_pre,
            });
        }
    }
    if treated.iter().chain(donors.iter().copied().flatten()).any(|v| !v.is_finite()) {
        return Err(SynthError::NonFinite);
    }
    Ok(())
}

/// Fit donor weights minimising the pre-period mean squared error.
///
/// `donors[j]` is the log pre-period path of donor `j`, aligned with
/// `treated`. The returned `donor_ids` are the supplied ids.
pub fn fit_weights(
    treated: &[f64],
    donors: &[&[f64]],
    donor_ids: &[String],
    mode: WeightMode,
) -> Result<SynthWeights, SynthError> {
    if donor_ids.len() != donors.len() {
        return Err(SynthError::WeightMismatch {
            weights: donor_ids.len(),
            donors: donors.len(),
        });
    }
    let weights = match mode {
        WeightMode::Simplex => {
            validate(treated, donors, 2)?;
            simplex_least_squares(treated, donors)
        }
        WeightMode::Unconstrained => {
            validate(treated, donors, donors.len() + 1)?;
            let design: Vec<Vec<f64>> = (0..treated.len())
                .map(|i| donors.iter().map(|d| d[i]).collect())
                .collect();
            match stats::ols(&design, treated, CovarianceKind::Classical) {
                Ok(fit) => fit.coefficients,
                Err(StatsError::RankDeficient) => return Err(SynthError::RankDeficient),
                Err(StatsError::NonFinite) => return Err(SynthError::NonFinite),
                Err(_) => {
                    return Err(SynthError::TooShort {
                        t_pre: treated.len(),
                        needed: donors.len() + 1,
                    })
                }
            }
        }
    };
    Ok(SynthWeights {
        donor_ids: donor_ids.to_vec(),
        pre_mse: pre_mse(treated, donors, &weights),
        weights,
        mode,
    })
}

/// Pointwise weighted sum of donor log-series.
pub fn synthesize(weights: &SynthWeights, donors_full: &[&[f64]]) -> Result<Vec<f64>, SynthError> {
    if weights.weights.len() != donors_full.len() {
        return Err(SynthError::WeightMismatch {
            weights: weights.weights.len(),
            donors: donors_full.len(),
        });
    }
    let n = donors_full.first().map_or(0, |d| d.len());
    for (index, d) in donors_full.iter().enumerate() {
        if d.len() != n {
            return Err(SynthError::Misaligned {
                index,
                got: d.len(),
                expected: n,
            });
        }
    }
    Ok((0..n)
        .map(|t| {
            donors_full
                .iter()
                .zip(&weights.weights)
                .map(|(d, w)| w * d[t])
                .sum()
        })
        .collect())
}

/// min ‖y − Dw‖² subject to w ≥ 0 and Σw = 1, by a primal active-set method
/// started from the best single donor.
fn simplex_least_squares(y: &[f64], donors: &[&[f64]]) -> Vec<f64> {
    let k = donors.len();
    let t = y.len();
    let d = DMatrix::from_fn(t, k, |i, j| donors[j][i]);
    let yv = DVector::from_column_slice(y);
    let q = d.transpose() * &d;
    let c = d.transpose() * &yv;
    let objective = |w: &DVector<f64>| (&yv - &d * w).norm_squared();

    let best = (0..k)
        .map(|j| (objective(&unit(k, j)), j))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, j)| j)
        .expect("at least one donor");
    if k == 1 {
        return vec![1.0];
    }
    let mut w = unit(k, best);
    let mut free = vec![false; k];
    free[best] = true;

    let max_iter = 50 * k + 50;
    for _ in 0..max_iter {
        let idx: Vec<usize> = (0..k).filter(|&i| free[i]).collect();
        let v = solve_on_face(&d, &yv, &idx);
        let mut candidate = w.clone();
        for (pos, &i) in idx.iter().enumerate() {
            candidate[i] = v[pos];
        }
        let current = objective(&w);
        let improves = objective(&candidate) < current - 1e-12 * (1.0 + current);
        let step: Vec<f64> = idx.iter().map(|&i| candidate[i] - w[i]).collect();

        if improves && step.iter().any(|s| s.abs() > 0.0) {
            let mut alpha = 1.0;
            let mut blocking = None;
            for (pos, &i) in idx.iter().enumerate() {
                if step[pos] < 0.0 {
                    let ratio = -w[i] / step[pos];
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
            for (pos, &i) in idx.iter().enumerate() {
                w[i] += alpha * step[pos];
            }
            if let Some(b) = blocking {
                w[b] = 0.0;
                free[b] = false;
            }
            for i in 0..k {
                if free[i] && w[i] < 0.0 {
                    w[i] = 0.0;
                }
            }
            continue;
        }

        // Stationary on the current face: check multipliers of the bound constraints.
        let g = (&q * &w - &c) * 2.0;
        let mu = idx.iter().map(|&i| g[i]).sum::<f64>() / idx.len() as f64;
        let scale = 1.0 + g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let entering = (0..k)
            .filter(|&i| !free[i])
            .map(|i| (g[i] - mu, i))
            .filter(|(lambda, _)| *lambda < -1e-10 * scale)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match entering {
            Some((_, i)) => free[i] = true,
            None => break,
        }
    }

    let sum: f64 = w.iter().map(|x| x.max(0.0)).sum();
    w.iter().map(|x| x.max(0.0) / sum).collect()
}

fn unit(k: usize, j: usize) -> DVector<f64> {
    let mut v = DVector::zeros(k);
    v[j] = 1.0;
    v
}

/// Least squares over the affine face {w_F : Σ w_F = 1}, other weights zero.
fn solve_on_face(d: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> Vec<f64> {
    let m = idx.len();
    if m == 1 {
        return vec![1.0];
    }
    let t = d.nrows();
    let sub = DMatrix::from_fn(t, m, |i, j| d[(i, idx[j])]);
    let center = DVector::from_element(m, 1.0 / m as f64);
    let resid = y - &sub * &center;
    // basis of {z : Σ z = 0}: e_i − e_last
    let z = DMatrix::from_fn(m, m - 1, |i, j| {
        if i == j {
            1.0
        } else if i == m - 1 {
            -1.0
        } else {
            0.0
        }
    });
    let a = &sub * &z;
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |acc, s| acc.max(*s));
    let coef = svd
        .solve(&resid, max_sv * 1e-12)
        .unwrap_or_else(|_| DVector::zeros(m - 1));
    (center + z * coef).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..n).map(|i| f(i as f64)).collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn single_donor_forced_to_one() {
        let y = path(20, |t| 10.0 + (t * 0.3).sin());
        let d = path(20, |t| 9.0 + (t * 0.5).cos());
        let w = fit_weights(&y, &[&d], &ids(1), WeightMode::Simplex).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        assert!((w.pre_mse - pre_mse(&y, &[&d], &[1.0])).abs() < 1e-15);
    }

    #[test]
    fn exact_copy_dominates() {
        let y = path(46, |t| 10.0 + 0.2 * (t * 0.4).sin() + 0.01 * t);
        let a = y.clone();
        let b = path(46, |t| 9.5 + 0.3 * (t * 0.1).cos());
        let c = path(46, |t| 10.5 + 0.1 * (t * 0.9).sin());
        let w = fit_weights(&y, &[&b, &a, &c], &ids(3), WeightMode::Simplex).unwrap();
        assert!(w.weights[1] >= 0.999);
        assert!(w.pre_mse <= 1e-10);
    }

    #[test]
    fn half_half_mixture_matches_grid_search() {
        let a = path(40, |t| 10.0 + 0.3 * (t * 0.4).sin());
        let b = path(40, |t| 9.0 + 0.2 * (t * 0.15).cos() + 0.01 * t);
        let c = path(40, |t| 11.0 + 0.25 * (t * 0.8).sin());
        let y: Vec<f64> = a.iter().zip(&b).map(|(x, z)| 0.5 * x + 0.5 * z).collect();
        let donors = [a.as_slice(), b.as_slice(), c.as_slice()];
        let fit = fit_weights(&y, &donors, &ids(3), WeightMode::Simplex).unwrap();

        // oracle: exhaustive simplex grid with step 0.01
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let w = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                let m = pre_mse(&y, &donors, &w);
                if m < best.0 {
                    best = (m, w);
                }
            }
        }
        for (got, want) in fit.weights.iter().zip(best.1) {
            assert!((got - want).abs() <= 0.01, "{:?} vs {:?}", fit.weights, best.1);
        }
        assert!((fit.weights[0] - 0.5).abs() < 1e-8 && (fit.weights[1] - 0.5).abs() < 1e-8);
        assert!(fit.pre_mse <= best.0 + 1e-12);
    }

    #[test]
    fn unconstrained_rank_deficient() {
        let a = path(20, |t| 1.0 + t);
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let y = path(20, |t| 3.0 + 1.5 * t);
        assert_eq!(
            fit_weights(&y, &[&a, &b], &ids(2), WeightMode::Unconstrained).unwrap_err(),
            SynthError::RankDeficient
        );
        // simplex still works on the collinear pair
        let w = fit_weights(&y, &[&a, &b], &ids(2), WeightMode::Simplex).unwrap();
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_rejected() {
        let y = vec![1.0, f64::NAN, 2.0];
        let d = vec![1.0, 2.0, 3.0];
        assert_eq!(
            fit_weights(&y, &[&d], &ids(1), WeightMode::Simplex).unwrap_err(),
            SynthError::NonFinite
        );
    }

    #[test]
    fn synthesize_identity_and_average() {
        let a = path(10, |t| t);
        let b = path(10, |t| 2.0 * t + 1.0);
        let w = SynthWeights {
            donor_ids: ids(2),
            weights: vec![1.0, 0.0],
            mode: WeightMode::Simplex,
            pre_mse: 0.0,
        };
        assert_eq!(synthesize(&w, &[&a, &b]).unwrap(), a);
        let half = SynthWeights {
            weights: vec![0.5, 0.5],
            ..w.clone()
        };
        let s = synthesize(&half, &[&a, &b]).unwrap();
        for t in 0..10 {
            assert!((s[t] - 0.5 * (a[t] + b[t])).abs() < 1e-15);
        }
        assert!(matches!(
            synthesize(&w, &[&a]),
            Err(SynthError::WeightMismatch { .. })
        ));
    }

    #[test]
    fn identical_donors_any_weights() {
        let a = path(10, |t| 3.0 + t.sin());
        let w = SynthWeights {
            donor_ids: ids(3),
            weights: vec![0.2, 0.3, 0.5],
            mode: WeightMode::Simplex,
            pre_mse: 0.0,
        };
        let s = synthesize(&w, &[&a, &a, &a]).unwrap();
        for (x, y) in s.iter().zip(&a) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    fn candidate<'a>(id: &'a str, industry: &'a str, pre: &'a [f64]) -> Candidate<'a> {
        Candidate {
            instance_id: id,
            industry,
            eu_share: 0.0,
            pre,
        }
    }

    #[test]
    fn select_top_k_by_correlation_matches_exhaustive_sort() {
        let treated = path(30, |t| (t * 0.3).sin() + 0.05 * t);
        let paths: Vec<Vec<f64>> = (0..8)
            .map(|j| {
                let j = j as f64;
                path(30, move |t| (t * 0.3).sin() + 0.05 * t + 0.3 * j * (t * 1.7 + j).cos())
            })
            .collect();
        let names: Vec<String> = (0..8).map(|j| format!("c{j}")).collect();
        let pool: Vec<Candidate> = names
            .iter()
            .zip(&paths)
            .map(|(n, p)| candidate(n, "news", p))
            .collect();
        let t = candidate("t", "news", &treated);
        let got = select_donors(&t, &pool, 5, DonorMatching::Industry).unwrap();

        // oracle: all correlations, full sort
        let mut all: Vec<(f64, String)> = names
            .iter()
            .zip(&paths)
            .map(|(n, p)| (stats::pearson(&treated, p).unwrap(), n.clone()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<String> = all.into_iter().take(5).map(|(_, n)| n).collect();
        assert_eq!(got.donor_ids, want);
        assert!(!got.fallback_global);
    }

    #[test]
    fn select_exactly_k_and_fallback() {
        let treated = path(20, |t| t.sin());
        let paths: Vec<Vec<f64>> = (0..5).map(|j| path(20, move |t| (t + j as f64).cos())).collect();
        let names: Vec<String> = (0..5).map(|j| format!("c{j}")).collect();
        let pool: Vec<Candidate> = names
            .iter()
            .zip(&paths)
            .map(|(n, p)| candidate(n, "shop", p))
            .collect();
        let t = candidate("t", "shop", &treated);
        let got = select_donors(&t, &pool, 5, DonorMatching::Industry).unwrap();
        let mut sorted = got.donor_ids.clone();
        sorted.sort();
        assert_eq!(sorted, names);

        let lonely = candidate("t", "gambling", &treated);
        let got = select_donors(&lonely, &pool, 3, DonorMatching::Industry).unwrap();
        assert!(got.fallback_global);
        assert_eq!(got.donor_ids.len(), 3);
        assert!(got.selection.iter().all(|m| !m.industry_match));
    }

    #[test]
    fn select_errors() {
        let treated = vec![1.0; 10];
        let other = path(10, |t| t);
        let pool = [candidate("c", "x", &other)];
        assert_eq!(
            select_donors(&candidate("t", "x", &treated), &pool, 5, DonorMatching::Industry).unwrap_err(),
            SynthError::ConstantTreated
        );
        let varying = path(10, |t| t.sin());
        assert_eq!(
            select_donors(&candidate("t", "x", &varying), &[], 5, DonorMatching::Industry).unwrap_err(),
            SynthError::EmptyPool
        );
    }

    #[test]
    fn treated_never_its_own_donor_and_ties_by_id() {
        let treated = path(12, |t| t.sin());
        let same = treated.clone();
        let pool = [
            candidate("t", "x", &treated),
            candidate("b", "x", &same),
            candidate("a", "x", &same),
        ];
        let got = select_donors(&candidate("t", "x", &treated), &pool, 5, DonorMatching::None).unwrap();
        assert_eq!(got.donor_ids, vec!["a", "b"]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn simplex_invariants(
            seeds in proptest::collection::vec(-1.0f64..1.0, 4..8),
            shift in -5.0f64..5.0,
        ) {
            let k = seeds.len() - 1;
            let t_pre = 25;
            let y: Vec<f64> = (0..t_pre).map(|t| 10.0 + seeds[0] * (t as f64 * 0.37).sin() + 0.02 * t as f64).collect();
            let donors: Vec<Vec<f64>> = (0..k).map(|j| {
                (0..t_pre).map(|t| 10.0 + seeds[j + 1] + ((t as f64) * (0.2 + 0.1 * j as f64)).cos() * seeds[j + 1]).collect()
            }).collect();
            let refs: Vec<&[f64]> = donors.iter().map(Vec::as_slice).collect();
            let fit = fit_weights(&y, &refs, &ids(k), WeightMode::Simplex).unwrap();
            proptest::prop_assert!(fit.weights.iter().all(|&w| w >= 0.0));
            proptest::prop_assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            proptest::prop_assert!((fit.pre_mse - pre_mse(&y, &refs, &fit.weights)).abs() <= 1e-12);
            for j in 0..k {
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                proptest::prop_assert!(fit.pre_mse <= pre_mse(&y, &refs, &e) + 1e-12);
            }
            if let Ok(unc) = fit_weights(&y, &refs, &ids(k), WeightMode::Unconstrained) {
                proptest::prop_assert!(unc.pre_mse <= fit.pre_mse + 1e-12);
            }
            // determinism
            let again = fit_weights(&y, &refs, &ids(k), WeightMode::Simplex).unwrap();
            proptest::prop_assert_eq!(&again.weights, &fit.weights);
            // common level shift
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let shifted: Vec<Vec<f64>> = donors.iter().map(|d| d.iter().map(|v| v + shift).collect()).collect();
            let srefs: Vec<&[f64]> = shifted.iter().map(Vec::as_slice).collect();
            let sfit = fit_weights(&ys, &srefs, &ids(k), WeightMode::Simplex).unwrap();
            for (a, b) in sfit.weights.iter().zip(&fit.weights) {
                proptest::prop_assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", sfit.weights, fit.weights);
            }
        }
    }
}
