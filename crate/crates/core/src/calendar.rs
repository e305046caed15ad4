//! Week/month calendar anchored on the observation start, and the five
//! expanding post-enforcement windows.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cadence, TimeSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalendarError {
    #[error("unknown window label `{0}` (expected 3m, 6m, 9m, 12m or 18m)")]
    UnknownWindow(String),
    #[error("enforcement date {enforcement} precedes week one {week_one}")]
    EnforcementBeforeStart {
        week_one: NaiveDate,
        enforcement: NaiveDate,
    },
    #[error("series ends at period {series_end} but the window needs period {needed}")]
    SeriesTooShort { series_end: i64, needed: i64 },
    #[error("monthly series must start on the first day of a month, got {0}")]
    MisalignedMonth(NaiveDate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WindowLabel {
    #[serde(rename = "3m")]
    M3,
    #[serde(rename = "6m")]
    M6,
    #[serde(rename = "9m")]
    M9,
    #[serde(rename = "12m")]
    M12,
    #[serde(rename = "18m")]
    M18,
}

impl WindowLabel {
    pub const ALL: [WindowLabel; 5] = [
        WindowLabel::M3,
        WindowLabel::M6,
        WindowLabel::M9,
        WindowLabel::M12,
        WindowLabel::M18,
    ];

    pub fn months(self) -> u32 {
        match self {
            WindowLabel::M3 => 3,
            WindowLabel::M6 => 6,
            WindowLabel::M9 => 9,
            WindowLabel::M12 => 12,
            WindowLabel::M18 => 18,
        }
    }

    /// Post-period length in weeks counted after the enforcement week
    /// (13 weeks per quarter).
    pub fn post_weeks_after_enforcement(self) -> i64 {
        i64::from(self.months()) * 13 / 3
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WindowLabel::M3 => "3m",
            WindowLabel::M6 => "6m",
            WindowLabel::M9 => "9m",
            WindowLabel::M12 => "12m",
            WindowLabel::M18 => "18m",
        }
    }

    /// Parse a comma separated list such as `3m,18m`.
    pub fn parse_list(s: &str) -> Result<Vec<WindowLabel>, CalendarError> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for WindowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WindowLabel {
    type Err = CalendarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WindowLabel::ALL
            .into_iter()
            .find(|w| w.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CalendarError::UnknownWindow(s.to_string()))
    }
}

/// Calendar month as `year * 12 + month0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MonthIndex(pub i32);

impl MonthIndex {
    pub fn of(date: NaiveDate) -> Self {
        MonthIndex(date.year() * 12 + date.month0() as i32)
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.0.div_euclid(12), self.0.rem_euclid(12) as u32 + 1, 1)
            .expect("valid month")
    }

    pub fn last_day(self) -> NaiveDate {
        MonthIndex(self.0 + 1).first_day() - Duration::days(1)
    }

    pub fn next(self) -> Self {
        MonthIndex(self.0 + 1)
    }
}

impl fmt::Display for MonthIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.first_day();
        write!(f, "{:04}-{:02}", d.year(), d.month())
    }
}

/// Observations within `days` of the enforcement date, on either side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionBand {
    pub days: u32,
}

/// Expanding analysis window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisWindow {
    pub label: WindowLabel,
    pub pre_first_week: i64,
    pub pre_last_week: i64,
    pub post_end_week: i64,
    pub enforcement_date: NaiveDate,
}

impl AnalysisWindow {
    pub fn post_first_week(&self) -> i64 {
        self.pre_last_week + 1
    }
}

/// Index sets of a series that fall in the pre and post periods of a window.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WindowSpan {
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
}

/// Week 1 starts on `week_one`; the week containing `enforcement` is the
/// first post-period week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calendar {
    pub week_one: NaiveDate,
    pub enforcement: NaiveDate,
}

impl Default for Calendar {
    fn default() -> Self {
        Self {
            week_one: NaiveDate::from_ymd_opt(2017, 7, 1).unwrap(),
            enforcement: NaiveDate::from_ymd_opt(2018, 5, 25).unwrap(),
        }
    }
}

/// Window bounds on the default calendar.
pub fn window_bounds(label: WindowLabel) -> AnalysisWindow {
    Calendar::default().window(label)
}

impl Calendar {
    pub fn new(week_one: NaiveDate, enforcement: NaiveDate) -> Result<Self, CalendarError> {
        if enforcement < week_one + Duration::days(7) {
            return Err(CalendarError::EnforcementBeforeStart {
                week_one,
                enforcement,
            });
        }
        Ok(Self {
            week_one,
            enforcement,
        })
    }

    /// 1-based week number containing `date` (may be ≤ 0 before the anchor).
    pub fn week_of(&self, date: NaiveDate) -> i64 {
        (date - self.week_one).num_days().div_euclid(7) + 1
    }

    pub fn week_start(&self, week: i64) -> NaiveDate {
        self.week_one + Duration::days(7 * (week - 1))
    }

    pub fn week_end(&self, week: i64) -> NaiveDate {
        self.week_start(week) + Duration::days(6)
    }

    pub fn enforcement_week(&self) -> i64 {
        self.week_of(self.enforcement)
    }

    pub fn window(&self, label: WindowLabel) -> AnalysisWindow {
        let enforcement_week = self.enforcement_week();
        AnalysisWindow {
            label,
            pre_first_week: 1,
            pre_last_week: enforcement_week - 1,
            post_end_week: enforcement_week + label.post_weeks_after_enforcement(),
            enforcement_date: self.enforcement,
        }
    }

    pub fn windows(&self, labels: &[WindowLabel]) -> Vec<AnalysisWindow> {
        labels.iter().map(|&l| self.window(l)).collect()
    }

    /// First full calendar month of the observation period.
    pub fn first_month(&self) -> MonthIndex {
        let m = MonthIndex::of(self.week_one);
        if self.week_one.day() == 1 {
            m
        } else {
            m.next()
        }
    }

    /// The month containing the enforcement date opens the monthly post-period.
    pub fn enforcement_month(&self) -> MonthIndex {
        MonthIndex::of(self.enforcement)
    }

    /// Last calendar month that ends inside the weekly window.
    pub fn last_month_in(&self, window: &AnalysisWindow) -> MonthIndex {
        let after = self.week_end(window.post_end_week) + Duration::days(1);
        MonthIndex(MonthIndex::of(after).0 - 1)
    }

    fn band_hits(&self, band: Option<&ExclusionBand>, first: NaiveDate, last: NaiveDate) -> bool {
        match band {
            None => false,
            Some(b) => {
                let lo = self.enforcement - Duration::days(i64::from(b.days));
                let hi = self.enforcement + Duration::days(i64::from(b.days));
                first <= hi && last >= lo
            }
        }
    }

    /// Whether a week overlaps the exclusion band.
    pub fn week_excluded(&self, week: i64, band: Option<&ExclusionBand>) -> bool {
        self.band_hits(band, self.week_start(week), self.week_end(week))
    }

    pub fn month_excluded(&self, month: MonthIndex, band: Option<&ExclusionBand>) -> bool {
        self.band_hits(band, month.first_day(), month.last_day())
    }

    /// Map a window onto the index positions of `series`.
    ///
    /// The series must reach the window end; the pre-period is whatever part
    /// of the fixed pre range it covers.
    pub fn span(
        &self,
        series: &TimeSeries,
        window: &AnalysisWindow,
        band: Option<&ExclusionBand>,
    ) -> Result<WindowSpan, CalendarError> {
        let n = series.values.len() as i64;
        let mut span = WindowSpan::default();
        match series.cadence {
            Cadence::Weekly => {
                let first = self.week_of(series.start);
                let last = first + n - 1;
                if last < window.post_end_week {
                    return Err(CalendarError::SeriesTooShort {
                        series_end: last,
                        needed: window.post_end_week,
                    });
                }
                for week in first.max(window.pre_first_week)..=window.post_end_week {
                    if self.week_excluded(week, band) {
                        continue;
                    }
                    let idx = (week - first) as usize;
                    if week <= window.pre_last_week {
                        span.pre.push(idx);
                    } else {
                        span.post.push(idx);
                    }
                }
            }
            Cadence::Monthly => {
                if series.start.day() != 1 {
                    return Err(CalendarError::MisalignedMonth(series.start));
                }
                let first = MonthIndex::of(series.start);
                let last = MonthIndex(first.0 + n as i32 - 1);
                let end = self.last_month_in(window);
                if last < end {
                    return Err(CalendarError::SeriesTooShort {
                        series_end: i64::from(last.0 - first.0),
                        needed: i64::from(end.0 - first.0),
                    });
                }
                let enforcement = self.enforcement_month();
                let mut m = first.max(self.first_month());
                while m <= end {
                    if !self.month_excluded(m, band) {
                        let idx = (m.0 - first.0) as usize;
                        if m < enforcement {
                            span.pre.push(idx);
                        } else {
                            span.post.push(idx);
                        }
                    }
                    m = m.next();
                }
            }
        }
        Ok(span)
    }

    /// Index positions of the pre-period (window independent).
    pub fn pre_indices(
        &self,
        series: &TimeSeries,
        band: Option<&ExclusionBand>,
    ) -> Vec<usize> {
        let n = series.values.len() as i64;
        match series.cadence {
            Cadence::Weekly => {
                let first = self.week_of(series.start);
                let pre_last = self.enforcement_week() - 1;
                (first.max(1)..=pre_last.min(first + n - 1))
                    .filter(|&w| !self.week_excluded(w, band))
                    .map(|w| (w - first) as usize)
                    .collect()
            }
            Cadence::Monthly => {
                let first = MonthIndex::of(series.start);
                let enforcement = self.enforcement_month();
                (0..n as i32)
                    .map(|i| MonthIndex(first.0 + i))
                    .filter(|&m| m >= self.first_month() && m < enforcement)
                    .filter(|&m| !self.month_excluded(m, band))
                    .map(|m| (m.0 - first.0) as usize)
                    .collect()
            }
        }
    }
}
