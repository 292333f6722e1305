//! Masked forecast metrics and the last-value baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entries with `|y|` at or below this are excluded from every metric.
pub const MAGNITUDE_THRESHOLD: f64 = 5e-5;

/// Metrics over one group of entries; `None` when no entry qualifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape_pct: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, y: f64, yhat: f64) {
        let e = (y - yhat).abs();
        self.abs += e;
        self.sq += e * e;
        self.pct += e / y.abs();
        self.n += 1;
    }

    fn finish(self) -> Metrics {
        if self.n == 0 {
            return Metrics { mae: None, rmse: None, mape_pct: None, count: 0 };
        }
        let n = self.n as f64;
        Metrics {
            mae: Some(self.abs / n),
            rmse: Some((self.sq / n).sqrt()),
            mape_pct: Some(100.0 * self.pct / n),
            count: self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub channels: Vec<(String, Metrics)>,
    pub overall: Metrics,
}

/// Metrics over entries that are valid and have `|y| > 5e-5`. The last axis
/// is the channel axis.
pub fn masked_metrics(y: &Tensor, yhat: &Tensor, valid: &Tensor) -> Result<MetricReport> {
    if y.shape() != yhat.shape() || y.shape() != valid.shape() {
        return Err(Error::invalid(format!(
            "metric shapes differ: y {:?}, prediction {:?}, mask {:?}",
            y.shape(),
            yhat.shape(),
            valid.shape()
        )));
    }
    let c = y.shape().last().copied().unwrap_or(1).max(1);
    let mut per = vec![Acc::default(); c];
    let mut all = Acc::default();
    for (k, ((&yv, &pv), &m)) in y.data().iter().zip(yhat.data()).zip(valid.data()).enumerate() {
        if m != 0.0 && yv.abs() > MAGNITUDE_THRESHOLD {
            per[k % c].push(yv, pv);
            all.push(yv, pv);
        }
    }
    let names = |i: usize| if c == CHANNELS.len() { CHANNELS[i].to_string() } else { format!("ch{i}") };
    Ok(MetricReport {
        channels: per.into_iter().enumerate().map(|(i, a)| (names(i), a.finish())).collect(),
        overall: all.finish(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

impl MetricReport {
    fn rows(&self) -> impl Iterator<Item = (&str, &Metrics)> {
        self.channels
            .iter()
            .map(|(n, m)| (n.as_str(), m))
            .chain(std::iter::once(("all", &self.overall)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,mae,rmse,mape_pct,count\n");
        for (name, m) in self.rows() {
            let _ = writeln!(s, "{name},{},{},{},{}", cell(m.mae), cell(m.rmse), cell(m.mape_pct), m.count);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>12} {:>12} {:>12} {:>8}\n", "channel", "MAE", "RMSE", "MAPE%", "count");
        for (name, m) in self.rows() {
            let _ = writeln!(
                s,
                "{name:<8} {:>12} {:>12} {:>12} {:>8}",
                cell(m.mae),
                cell(m.rmse),
                cell(m.mape_pct),
                m.count
            );
        }
        s
    }
}

/// Repeats the last valid raw input of each station and channel over the
/// horizon, or `fallback[c]` when the window holds none.
///
/// `inputs` and `valid` are `(B × T × N × C)`; the result is `(B × tau × N × C)`.
pub fn lv_baseline(inputs: &Tensor, valid: &Tensor, horizon: usize, fallback: &[f64]) -> Result<Tensor> {
    let s = inputs.shape();
    if s.len() != 4 || valid.shape() != s || fallback.len() != s[3] {
        return Err(Error::invalid(format!(
            "baseline input {s:?}, mask {:?}, {} fallbacks",
            valid.shape(),
            fallback.len()
        )));
    }
    let (b, t, n, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(vec![b, horizon, n, c]);
    for bi in 0..b {
        for i in 0..n {
            for ch in 0..c {
                let last = (0..t)
                    .rev()
                    .find(|&ti| valid.at(&[bi, ti, i, ch]) != 0.0)
                    .map(|ti| inputs.at(&[bi, ti, i, ch]))
                    .unwrap_or(fallback[ch]);
                for h in 0..horizon {
                    let k = ((bi * horizon + h) * n + i) * c + ch;
                    out.data_mut()[k] = last;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn arithmetic_example() {
        let r = masked_metrics(&t(&[1.0, 2.0]), &t(&[2.0, 4.0]), &t(&[1.0, 1.0])).unwrap();
        assert_eq!(r.overall.mae, Some(1.5));
        assert!((r.overall.rmse.unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        // |1-2|/1 and |2-4|/2 are both 100%.
        assert_eq!(r.overall.mape_pct, Some(100.0));
    }

    #[test]
    fn threshold_excludes_tiny_targets() {
        let r = masked_metrics(&t(&[10.0, 1e-6]), &t(&[9.0, 5.0]), &t(&[1.0, 1.0])).unwrap();
        assert_eq!(r.overall.count, 1);
        assert_eq!(r.overall.mape_pct, Some(10.0));
        assert_eq!(r.overall.mae, Some(1.0));
    }

    #[test]
    fn all_masked_is_undefined() {
        let r = masked_metrics(&t(&[1.0, 2.0]), &t(&[f64::NAN, 4.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(r.overall, Metrics { mae: None, rmse: None, mape_pct: None, count: 0 });
        assert!(r.to_csv().contains("all,undefined,undefined,undefined,0"));
        assert!(!r.to_csv().contains("NaN"));
    }

    #[test]
    fn perfect_forecast_is_zero() {
        let y = t(&[3.0, -2.0, 7.5]);
        let r = masked_metrics(&y, &y, &t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!((r.overall.mae, r.overall.rmse, r.overall.mape_pct), (Some(0.0), Some(0.0), Some(0.0)));
    }

    proptest! {
        #[test]
        fn shrinking_error_never_raises_mae(
            pairs in proptest::collection::vec((1.0f64..100.0, -100.0f64..100.0), 1..20),
            frac in 0.0f64..1.0,
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let closer: Vec<f64> = y.iter().zip(&p).map(|(a, b)| b + frac * (a - b)).collect();
            let m = vec![1.0; y.len()];
            let r1 = masked_metrics(&t(&y), &t(&p), &t(&m)).unwrap();
            let r2 = masked_metrics(&t(&y), &t(&closer), &t(&m)).unwrap();
            prop_assert!(r2.overall.mae.unwrap() <= r1.overall.mae.unwrap() + 1e-12);
            // Order of samples does not matter.
            let mut idx: Vec<usize> = (0..y.len()).collect();
            idx.reverse();
            let yr: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let pr: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let r3 = masked_metrics(&t(&yr), &t(&pr), &t(&m)).unwrap();
            prop_assert!((r3.overall.mae.unwrap() - r1.overall.mae.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn last_value_rules() {
        // B=1, T=3, N=3, C=1: station 0 ends at 12, station 1 last step missing, station 2 empty.
        let x = Tensor::new(vec![1, 3, 3, 1], vec![1.0, 8.0, 0.0, 5.0, 8.0, 0.0, 12.0, 0.0, 0.0]).unwrap();
        let v = Tensor::new(vec![1, 3, 3, 1], vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let f = lv_baseline(&x, &v, 4, &[42.0]).unwrap();
        assert_eq!(f.shape(), &[1, 4, 3, 1]);
        for h in 0..4 {
            assert_eq!(f.at(&[0, h, 0, 0]), 12.0);
            assert_eq!(f.at(&[0, h, 1, 0]), 8.0);
            assert_eq!(f.at(&[0, h, 2, 0]), 42.0);
        }
    }
}
