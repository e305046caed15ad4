//! Revenue impact of traffic changes for e-commerce and ad-financed websites.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RevenueError {
    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("expected a {expected} model")]
    WrongKind { expected: &'static str },
    #[error("delta {0} is not finite")]
    NonFiniteDelta(f64),
}

/// Whole cents, rounded half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cents(pub i64);

impl Cents {
    pub fn from_dollars(amount: f64) -> Self {
        Cents((amount * 100.0).round() as i64)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = (abs / 100).to_string();
        let mut grouped = String::new();
        for (i, ch) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i).is_multiple_of(3) {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        write!(f, "{sign}${grouped}.{:02}", abs % 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RevenueModel {
    Ecommerce {
        visits_per_year: f64,
        conversion_rate: f64,
        revenue_per_purchase: f64,
        years: f64,
    },
    #[serde(rename = "adbased")]
    AdBased {
        page_impressions_per_year: f64,
        ads_per_page: f64,
        /// Price per single ad impression (CPM / 1000).
        ad_price: f64,
        years: f64,
    },
}

impl RevenueModel {
    /// Reference e-commerce parameters: a large online shop.
    pub fn reference_ecommerce() -> Self {
        RevenueModel::Ecommerce {
            visits_per_year: 70_461_862.0,
            conversion_rate: 0.0191,
            revenue_per_purchase: 105.99,
            years: 1.5,
        }
    }

    /// Reference ad-financed parameters: a large news website.
    pub fn reference_adbased() -> Self {
        RevenueModel::AdBased {
            page_impressions_per_year: 358_859_344.0,
            ads_per_page: 7.6,
            ad_price: 0.0075,
            years: 1.5,
        }
    }

    pub fn validate(&self) -> Result<(), RevenueError> {
        let params: Vec<(&'static str, f64)> = match *self {
            RevenueModel::Ecommerce {
                visits_per_year,
                conversion_rate,
                revenue_per_purchase,
                years,
            } => vec![
                ("visits_per_year", visits_per_year),
                ("conversion_rate", conversion_rate),
                ("revenue_per_purchase", revenue_per_purchase),
                ("years", years),
            ],
            RevenueModel::AdBased {
                page_impressions_per_year,
                ads_per_page,
                ad_price,
                years,
            } => vec![
                ("page_impressions_per_year", page_impressions_per_year),
                ("ads_per_page", ads_per_page),
                ("ad_price", ad_price),
                ("years", years),
            ],
        };
        for (name, value) in params {
            if !(value > 0.0) || !value.is_finite() {
                return Err(RevenueError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    fn years(&self) -> f64 {
        match *self {
            RevenueModel::Ecommerce { years, .. } | RevenueModel::AdBased { years, .. } => years,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueImpact {
    /// Yearly revenue before the change.
    pub baseline_revenue: f64,
    /// Revenue change over the model's horizon.
    pub revenue_change: f64,
    pub baseline_cents: Cents,
    pub change_cents: Cents,
}

fn impact(baseline: f64, delta: f64, years: f64) -> Result<RevenueImpact, RevenueError> {
    if !delta.is_finite() {
        return Err(RevenueError::NonFiniteDelta(delta));
    }
    let change = delta * baseline * years;
    Ok(RevenueImpact {
        baseline_revenue: baseline,
        revenue_change: change,
        baseline_cents: Cents::from_dollars(baseline),
        change_cents: Cents::from_dollars(change),
    })
}

/// Baseline = visits × conversion rate × revenue per purchase; change =
/// delta × baseline × years.
pub fn ecommerce_impact(model: &RevenueModel, delta_total_visits: f64) -> Result<RevenueImpact, RevenueError> {
    model.validate()?;
    match *model {
        RevenueModel::Ecommerce {
            visits_per_year,
            conversion_rate,
            revenue_per_purchase,
            ..
        } => impact(
            visits_per_year * conversion_rate * revenue_per_purchase,
            delta_total_visits,
            model.years(),
        ),
        _ => Err(RevenueError::WrongKind { expected: "ecommerce" }),
    }
}

/// Baseline = page impressions × ads per page × price per ad; change =
/// delta × baseline × years.
pub fn ad_impact(model: &RevenueModel, delta_page_impressions: f64) -> Result<RevenueImpact, RevenueError> {
    model.validate()?;
    match *model {
        RevenueModel::AdBased {
            page_impressions_per_year,
            ads_per_page,
            ad_price,
            ..
        } => impact(
            page_impressions_per_year * ads_per_page * ad_price,
            delta_page_impressions,
            model.years(),
        ),
        _ => Err(RevenueError::WrongKind { expected: "adbased" }),
    }
}

/// Dispatch on the model kind.
pub fn revenue_impact(model: &RevenueModel, delta: f64) -> Result<RevenueImpact, RevenueError> {
    match model {
        RevenueModel::Ecommerce { .. } => ecommerce_impact(model, delta),
        RevenueModel::AdBased { .. } => ad_impact(model, delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn ad_baseline_to_the_cent() {
        let r = ad_impact(&RevenueModel::reference_adbased(), -0.0805).unwrap();
        assert_eq!(r.baseline_cents, Cents(2_045_498_261));
        assert_eq!(r.baseline_cents.to_string(), "$20,454,982.61");
        assert!(rel(r.revenue_change, -2_469_953.43) < 1e-4);
    }

    #[test]
    fn ecommerce_reference_values() {
        let r = ecommerce_impact(&RevenueModel::reference_ecommerce(), -0.0337).unwrap();
        assert!(rel(r.baseline_revenue, 142_643_623.54) < 1e-6);
        assert_eq!(r.baseline_cents, Cents(14_264_362_759));
        assert!(rel(r.revenue_change, -7_209_722.73) < 2e-4);
        let zero = ecommerce_impact(&RevenueModel::reference_ecommerce(), 0.0).unwrap();
        assert_eq!(zero.revenue_change, 0.0);
    }

    #[test]
    fn rejects_non_positive_and_wrong_kind() {
        let m = RevenueModel::AdBased {
            page_impressions_per_year: 1.0,
            ads_per_page: 0.0,
            ad_price: 1.0,
            years: 1.0,
        };
        assert_eq!(
            ad_impact(&m, 0.1).unwrap_err(),
            RevenueError::NonPositive {
                name: "ads_per_page",
                value: 0.0
            }
        );
        assert!(matches!(
            ecommerce_impact(&RevenueModel::reference_adbased(), 0.1),
            Err(RevenueError::WrongKind { .. })
        ));
    }

    #[test]
    fn cents_formatting() {
        assert_eq!(Cents(-123_456_789).to_string(), "-$1,234,567.89");
        assert_eq!(Cents(5).to_string(), "$0.05");
        assert_eq!(Cents::from_dollars(-0.005), Cents(-1));
    }

    #[test]
    fn model_serde_round_trip() {
        let m = RevenueModel::reference_adbased();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"kind\":\"adbased\""));
        assert_eq!(serde_json::from_str::<RevenueModel>(&s).unwrap(), m);
    }

    proptest::proptest! {
        #[test]
        fn change_linear_in_delta_and_years(delta in -0.9f64..0.9, years in 0.1f64..10.0) {
            let m = RevenueModel::Ecommerce {
                visits_per_year: 1e6, conversion_rate: 0.02, revenue_per_purchase: 50.0, years,
            };
            let m2 = RevenueModel::Ecommerce {
                visits_per_year: 1e6, conversion_rate: 0.02, revenue_per_purchase: 50.0, years: 2.0 * years,
            };
            let a = ecommerce_impact(&m, delta).unwrap().revenue_change;
            proptest::prop_assert_eq!(ecommerce_impact(&m, 2.0 * delta).unwrap().revenue_change, 2.0 * a);
            proptest::prop_assert_eq!(ecommerce_impact(&m2, delta).unwrap().revenue_change, 2.0 * a);
        }
    }
}
