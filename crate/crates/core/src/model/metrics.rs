use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;

use crate::grid::DemandTensor;
use crate::{Error, Result};

/// Error metrics over a set of (prediction, actual) pairs in count units.
///
/// MAPE is a percentage over the pairs with a positive actual only;
/// `n_mape` says how many those were. Empty denominators give `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub n: u64,
    pub n_mape: u64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    n: u64,
    n_mape: u64,
    abs: f64,
    sq: f64,
    ape: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, actual: f64) {
        let e = pred - actual;
        self.n += 1;
        self.abs += e.abs();
        self.sq += e * e;
        if actual > 0.0 {
            self.n_mape += 1;
            self.ape += e.abs() / actual;
        }
    }

    pub fn finish(&self) -> Metrics {
        let mean = |sum: f64, n: u64| (n > 0).then(|| sum / n as f64);
        Metrics {
            n: self.n,
            n_mape: self.n_mape,
            mae: mean(self.abs, self.n),
            rmse: mean(self.sq, self.n).map(f64::sqrt),
            mape: mean(self.ape, self.n_mape).map(|v| 100.0 * v),
        }
    }
}

pub fn metrics(pred: &[f64], actual: &[f64]) -> Metrics {
    let mut acc = MetricAccumulator::default();
    for (&p, &a) in pred.iter().zip(actual) {
        acc.push(p, a);
    }
    acc.finish()
}

/// Quintile (0..5) of every value. Boundaries are the nearest-rank 20/40/60/80th
/// percentiles and a value equal to a boundary stays in the lower quintile.
pub fn usage_quintiles(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bounds: Vec<f64> = (1..5).map(|k| sorted[(k * n).div_ceil(5).max(1) - 1]).collect();
    values
        .iter()
        .map(|&v| bounds.iter().filter(|&&b| b < v).count())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub quintiles: [Metrics; 5],
    /// Bins starting at local hours 7, 8 and 9.
    pub morning: Metrics,
    /// Bins starting at local hours 17, 18 and 19.
    pub evening: Metrics,
    /// Quintile of each cell; `None` for inactive cells.
    pub cell_quintile: Vec<Option<usize>>,
}

pub const CSV_HEADER: &str = "experiment,metric,slice,value,n";

impl EvalReport {
    pub fn slices(&self) -> Vec<(String, Metrics)> {
        let mut out = vec![("overall".to_string(), self.overall)];
        for (q, m) in self.quintiles.iter().enumerate() {
            out.push((format!("quintile{}", q + 1), *m));
        }
        out.push(("morning".into(), self.morning));
        out.push(("evening".into(), self.evening));
        out
    }

    /// Rows `experiment,metric,slice,value,n`, with `NA` for absent values.
    pub fn to_csv(&self, experiment: &str) -> String {
        let mut s = String::new();
        for (slice, m) in self.slices() {
            for (name, v, n) in [("mae", m.mae, m.n), ("rmse", m.rmse, m.n), ("mape", m.mape, m.n_mape)] {
                let v = v.map_or_else(|| "NA".to_string(), |v| v.to_string());
                let _ = writeln!(s, "{experiment},{name},{slice},{v},{n}");
            }
        }
        s
    }

    pub fn to_table(&self, experiment: &str) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{experiment}\n{:<10} {:>10} {:>10} {:>10} {:>8} {:>8}\n", "slice", "MAE", "RMSE", "MAPE%", "n", "n_mape");
        for (slice, m) in self.slices() {
            let _ = writeln!(
                s,
                "{slice:<10} {:>10} {:>10} {:>10} {:>8} {:>8}",
                f(m.mae),
                f(m.rmse),
                f(m.mape),
                m.n,
                m.n_mape
            );
        }
        s
    }
}

/// Score unscaled predictions for the bins in `val` (row-major `bins x cells`)
/// against `demand`, over active cells only.
pub fn evaluate_predictions(pred: &[f64], demand: &DemandTensor, val: Range<usize>, active: &[bool]) -> Result<EvalReport> {
    let n = demand.cells();
    if active.len() != n {
        return Err(Error::shape("evaluate", &[active.len()], &[n]));
    }
    if pred.len() != val.len() * n || val.end > demand.bins() {
        return Err(Error::shape("evaluate", &[pred.len()], &[val.len(), n]));
    }
    let active_cells: Vec<usize> = (0..n).filter(|&c| active[c]).collect();
    let bins = demand.bins().max(1) as f64;
    let means: Vec<f64> = active_cells
        .iter()
        .map(|&c| (0..demand.bins()).map(|k| demand.frame(k)[c] as f64).sum::<f64>() / bins)
        .collect();
    let mut cell_quintile = vec![None; n];
    for (&c, q) in active_cells.iter().zip(usage_quintiles(&means)) {
        cell_quintile[c] = Some(q);
    }

    let mut overall = MetricAccumulator::default();
    let mut quint = [MetricAccumulator::default(); 5];
    let mut morning = MetricAccumulator::default();
    let mut evening = MetricAccumulator::default();
    for (row, k) in val.enumerate() {
        let hour = demand.grid.local_hour(k);
        let frame = demand.frame(k);
        for &c in &active_cells {
            let (p, a) = (pred[row * n + c], frame[c] as f64);
            overall.push(p, a);
            quint[cell_quintile[c].expect("active")].push(p, a);
            if (7..10).contains(&hour) {
                morning.push(p, a);
            }
            if (17..20).contains(&hour) {
                evening.push(p, a);
            }
        }
    }
    Ok(EvalReport {
        overall: overall.finish(),
        quintiles: quint.map(|q| q.finish()),
        morning: morning.finish(),
        evening: evening.finish(),
        cell_quintile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    #[test]
    fn hand_case() {
        let m = metrics(&[2.0, 2.0], &[1.0, 2.0]);
        assert_eq!(m.mae, Some(0.5));
        assert_eq!(m.rmse, Some(0.5f64.sqrt()));
        assert_eq!(m.mape, Some(50.0));
        assert_eq!((m.n, m.n_mape), (2, 2));
    }

    #[test]
    fn perfect_prediction() {
        let y = [0.0, 3.0, 7.0];
        let m = metrics(&y, &y);
        assert_eq!((m.mae, m.rmse, m.mape), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn zero_actuals_leave_mape_absent() {
        let m = metrics(&[1.0, 0.5], &[0.0, 0.0]);
        assert_eq!(m.mape, None);
        assert_eq!(m.n_mape, 0);
        assert_eq!(metrics(&[], &[]).mae, None);
    }

    #[test]
    fn ten_distinct_cells_two_per_quintile() {
        let v = [5.0, 1.0, 9.0, 3.0, 7.0, 0.5, 2.0, 8.0, 4.0, 6.0];
        let q = usage_quintiles(&v);
        for k in 0..5 {
            assert_eq!(q.iter().filter(|&&x| x == k).count(), 2);
        }
        assert_eq!(q[5], 0);
        assert_eq!(q[2], 4);
    }

    #[test]
    fn ties_stay_together_in_lower_quintile() {
        let q = usage_quintiles(&[1.0; 7]);
        assert!(q.iter().all(|&x| x == 0));
        let q = usage_quintiles(&[1.0, 1.0, 1.0, 2.0, 3.0]);
        assert_eq!(q, vec![0, 0, 0, 3, 4]);
    }

    #[test]
    fn report_slices_by_hour_and_activity() {
        let grid = GridSpec::synthetic(1, 2);
        let bins = 24;
        let values: Vec<u32> = (0..bins).flat_map(|k| [k as u32 + 1, 0]).collect();
        let d = DemandTensor::from_values(grid, bins, values).unwrap();
        let active = d.active_mask();
        assert_eq!(active, vec![true, false]);
        let pred: Vec<f64> = (0..bins).flat_map(|k| [k as f64 + 2.0, 100.0]).collect();
        let r = evaluate_predictions(&pred, &d, 0..bins, &active).unwrap();
        assert_eq!(r.overall.n, 24);
        assert_eq!(r.overall.mae, Some(1.0));
        assert_eq!(r.morning.n, 3);
        assert_eq!(r.evening.n, 3);
        assert_eq!(r.cell_quintile, vec![Some(0), None]);
        let csv = r.to_csv("x");
        assert_eq!(csv.lines().count(), 8 * 3);
        assert!(csv.contains("x,mae,overall,1,24"));
        assert!(csv.contains("x,mae,quintile2,NA,0"));
        assert!(r.to_table("x").contains("overall"));
    }

    proptest! {
        #[test]
        fn mae_below_rmse(pairs in proptest::collection::vec((0.0f64..50.0, 0u32..50), 1..200)) {
            let (p, a): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(p, a)| (p, a as f64)).unzip();
            let m = metrics(&p, &a);
            let (mae, rmse) = (m.mae.unwrap(), m.rmse.unwrap());
            prop_assert!(mae <= rmse + 1e-12);
            let sq: f64 = p.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum();
            prop_assert!((rmse * rmse * p.len() as f64 - sq).abs() <= 1e-9 * sq.max(1.0));
        }

        #[test]
        fn quintiles_partition(v in proptest::collection::vec(0.0f64..10.0, 1..100)) {
            let q = usage_quintiles(&v);
            prop_assert_eq!(q.len(), v.len());
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] <= v[j] {
                        prop_assert!(q[i] <= q[j]);
                    }
                }
            }
        }
    }
}
