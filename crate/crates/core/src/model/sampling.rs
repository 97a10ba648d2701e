use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Window lengths of the three branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Most recent hours.
    pub closeness: usize,
    /// Same hour on previous days.
    pub period: usize,
    /// Same hour in previous weeks.
    pub trend: usize,
    pub bins_per_day: usize,
    pub days_per_week: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            closeness: 24,
            period: 7,
            trend: 2,
            bins_per_day: 24,
            days_per_week: 7,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("closeness", self.closeness),
            ("period", self.period),
            ("trend", self.trend),
            ("bins_per_day", self.bins_per_day),
            ("days_per_week", self.days_per_week),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("sampling.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn bins_per_week(&self) -> usize {
        self.bins_per_day * self.days_per_week
    }

    /// Earliest legal target index.
    pub fn max_lookback(&self) -> usize {
        (self.trend * self.bins_per_week())
            .max(self.period * self.bins_per_day)
            .max(self.closeness)
    }

    pub fn closeness_indices(&self, t: usize) -> Vec<usize> {
        (t - self.closeness..t).collect()
    }

    pub fn period_indices(&self, t: usize) -> Vec<usize> {
        (1..=self.period).rev().map(|d| t - d * self.bins_per_day).collect()
    }

    pub fn trend_indices(&self, t: usize) -> Vec<usize> {
        (1..=self.trend).rev().map(|w| t - w * self.bins_per_week()).collect()
    }
}

/// The three input windows, each in chronological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Trend,
    Period,
    Closeness,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Trend, BranchKind::Period, BranchKind::Closeness];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Trend => "trend",
            BranchKind::Period => "period",
            BranchKind::Closeness => "closeness",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub target: usize,
    pub closeness: Vec<usize>,
    pub period: Vec<usize>,
    pub trend: Vec<usize>,
}

impl TrainingSample {
    pub fn new(t: usize, cfg: &SamplingConfig) -> Self {
        TrainingSample {
            target: t,
            closeness: cfg.closeness_indices(t),
            period: cfg.period_indices(t),
            trend: cfg.trend_indices(t),
        }
    }

    pub fn frames(&self, branch: BranchKind) -> &[usize] {
        match branch {
            BranchKind::Trend => &self.trend,
            BranchKind::Period => &self.period,
            BranchKind::Closeness => &self.closeness,
        }
    }
}

/// One sample per target in `range` of a tensor with `bins` frames.
pub fn make_samples(bins: usize, cfg: &SamplingConfig, range: Range<usize>) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let first = cfg.max_lookback();
    if range.start < first {
        return Err(Error::Data(format!(
            "target {} lacks history; the first legal target is {first}",
            range.start
        )));
    }
    if range.end > bins {
        return Err(Error::Data(format!("target range ends at {} but the tensor has {bins} bins", range.end)));
    }
    Ok(range.map(|t| TrainingSample::new(t, cfg)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(c: usize, p: usize, q: usize) -> SamplingConfig {
        SamplingConfig {
            closeness: c,
            period: p,
            trend: q,
            ..Default::default()
        }
    }

    #[test]
    fn worked_indices() {
        let s = TrainingSample::new(400, &cfg(3, 2, 2));
        assert_eq!(s.closeness, vec![397, 398, 399]);
        assert_eq!(s.period, vec![352, 376]);
        assert_eq!(s.trend, vec![64, 232]);
    }

    #[test]
    fn lookback_error_names_first_target() {
        let err = make_samples(1000, &SamplingConfig::default(), 300..310).unwrap_err();
        assert!(err.to_string().contains("first legal target is 336"), "{err}");
        assert_eq!(make_samples(1000, &SamplingConfig::default(), 336..338).unwrap().len(), 2);
        assert!(make_samples(400, &SamplingConfig::default(), 336..401).is_err());
    }

    #[test]
    fn zero_window_rejected() {
        assert!(make_samples(1000, &cfg(0, 1, 1), 200..201).is_err());
    }

    proptest! {
        #[test]
        fn indices_follow_offsets(c in 1usize..30, p in 1usize..10, q in 1usize..4, extra in 0usize..500) {
            let cfg = cfg(c, p, q);
            let t = cfg.max_lookback() + extra;
            let s = &make_samples(t + 1, &cfg, t..t + 1).unwrap()[0];
            prop_assert_eq!(s.closeness.len(), c);
            for (k, &i) in s.closeness.iter().enumerate() {
                prop_assert_eq!(i, t - c + k);
            }
            for (k, &i) in s.period.iter().enumerate() {
                prop_assert_eq!(i, t - 24 * (p - k));
            }
            for (k, &i) in s.trend.iter().enumerate() {
                prop_assert_eq!(i, t - 168 * (q - k));
            }
        }
    }
}
