use std::fmt::Write as _;
use std::path::Path;

use chrono::{Days, NaiveDate};

use crate::data::{center_inputs, format_date, SeriesFrame, CHANNELS, NUM_CHANNELS};
use crate::encoder::StationMeta;
use crate::error::{Error, Result};
use crate::eval::{lv_baseline, masked_metrics, MetricReport};
use crate::model::{identity_embeddings, predict, ModelInputs};
use crate::tensor::Tensor;

use super::pipeline::{Checkpoint, Deployment, SplitPlan};

/// Raw-unit forecasts for one issue time.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub timestamps: Vec<NaiveDate>,
    pub station_ids: Vec<String>,
    /// `(tau × N × C)`
    pub values: Tensor,
}

impl Forecast {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("timestamp,station_id,channel,value\n");
        let (n, c) = (self.station_ids.len(), NUM_CHANNELS);
        for (h, ts) in self.timestamps.iter().enumerate() {
            let date = format_date(*ts);
            for (i, id) in self.station_ids.iter().enumerate() {
                for (ch, name) in CHANNELS.iter().enumerate() {
                    let _ = writeln!(s, "{date},{id},{name},{}", self.values.data()[(h * n + i) * c + ch]);
                }
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Restricts to stations `range`.
    pub fn stations(&self, range: std::ops::Range<usize>) -> Result<Forecast> {
        let (tau, n, c) = (self.timestamps.len(), self.station_ids.len(), NUM_CHANNELS);
        let mut data = Vec::with_capacity(tau * range.len() * c);
        for h in 0..tau {
            data.extend_from_slice(&self.values.data()[(h * n + range.start) * c..(h * n + range.end) * c]);
        }
        Ok(Forecast {
            timestamps: self.timestamps.clone(),
            station_ids: self.station_ids[range.clone()].to_vec(),
            values: Tensor::new(vec![tau, range.len(), c], data)?,
        })
    }
}

/// Standardized inputs, raw inputs and validity for windows ending
/// (exclusive) at each of `ends`, columns in `ids` order.
fn window_inputs(ckpt: &Checkpoint, frame: &SeriesFrame, ids: &[String], ends: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let t = ckpt.config.window;
    let cols: Vec<Option<usize>> = ids.iter().map(|id| frame.station_ids.iter().position(|s| s == id)).collect();
    let scales: Vec<_> = ids.iter().map(|id| ckpt.meta.norm.for_station(id)).collect();
    let n = ids.len();
    let size = ends.len() * t * n * NUM_CHANNELS;
    let (mut x, mut raw, mut valid) = (Vec::with_capacity(size), Vec::with_capacity(size), Vec::with_capacity(size));
    for &end in ends {
        if end < t || end > frame.len() {
            return Err(Error::invalid(format!(
                "forecast needs {t} steps of history ending at step {end}; the series has {}",
                frame.len()
            )));
        }
        for step in end - t..end {
            for (i, col) in cols.iter().enumerate() {
                let (m, sd) = &scales[i];
                for c in 0..NUM_CHANNELS {
                    match col.and_then(|s| frame.get(step, s, c)) {
                        Some(v) => {
                            x.push((v - m[c]) / sd[c]);
                            raw.push(v);
                            valid.push(1.0);
                        }
                        None => {
                            x.push(0.0);
                            raw.push(0.0);
                            valid.push(0.0);
                        }
                    }
                }
            }
        }
    }
    let shape = vec![ends.len(), t, n, NUM_CHANNELS];
    Ok((Tensor::new(shape.clone(), x)?, Tensor::new(shape.clone(), raw)?, Tensor::new(shape, valid)?))
}

fn denormalize(ckpt: &Checkpoint, ids: &[String], y: &mut Tensor) {
    let scales: Vec<_> = ids.iter().map(|id| ckpt.meta.norm.for_station(id)).collect();
    let n = ids.len();
    for (k, v) in y.data_mut().iter_mut().enumerate() {
        let c = k % NUM_CHANNELS;
        let (m, sd) = &scales[(k / NUM_CHANNELS) % n];
        *v = *v * sd[c] + m[c];
    }
}

/// Raw forecasts `(B × tau × N × C)` for windows ending at `ends`.
pub fn forecast_batch(ckpt: &Checkpoint, dep: &Deployment, frame: &SeriesFrame, ends: &[usize]) -> Result<Tensor> {
    let (mut x, _, valid) = window_inputs(ckpt, frame, &dep.ids, ends)?;
    let shifts = if ckpt.config.center_windows { Some(center_inputs(&mut x, &valid)?) } else { None };
    let cfg = ckpt.config.model()?;
    let inputs = ModelInputs { x: &x, static_features: &dep.rows, grades: &dep.grades, graph: &dep.tensors };
    let mut y = predict(&ckpt.params, &cfg, inputs)?;
    if let Some(sh) = &shifts {
        let per = dep.ids.len() * NUM_CHANNELS;
        let tau = ckpt.config.horizon;
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v += sh.data()[(k / (tau * per)) * per + k % per];
        }
    }
    if !y.all_finite() {
        return Err(Error::Runtime("forecast contains non-finite values".into()));
    }
    denormalize(ckpt, &dep.ids, &mut y);
    Ok(y)
}

/// Index one past the last input step; the frame's end when `window_end` is absent.
pub fn window_end_index(frame: &SeriesFrame, window_end: Option<NaiveDate>) -> Result<usize> {
    match window_end {
        None => Ok(frame.len()),
        Some(d) => frame
            .timestamps
            .iter()
            .position(|t| *t == d)
            .map(|i| i + 1)
            .ok_or_else(|| Error::invalid(format!("window end {d} is not in the series"))),
    }
}

pub fn forecast(ckpt: &Checkpoint, dep: &Deployment, frame: &SeriesFrame, window_end: Option<NaiveDate>) -> Result<Forecast> {
    let end = window_end_index(frame, window_end)?;
    let y = forecast_batch(ckpt, dep, frame, &[end])?;
    let last = *frame
        .timestamps
        .get(end.wrapping_sub(1))
        .ok_or_else(|| Error::invalid("empty series"))?;
    let step = ckpt.config.step_days;
    let tau = ckpt.config.horizon;
    Ok(Forecast {
        timestamps: (1..=tau as u64).map(|h| last + Days::new(h * step)).collect(),
        station_ids: dep.ids.clone(),
        values: y.reshaped(vec![tau, dep.ids.len(), NUM_CHANNELS])?,
    })
}

/// Checks that `stations` names exactly the checkpoint's stations.
pub fn check_station_set(ckpt: &Checkpoint, stations: &[StationMeta]) -> Result<()> {
    let mut a = ckpt.ids();
    let mut b: Vec<String> = stations.iter().map(|s| s.id.clone()).collect();
    a.sort();
    b.sort();
    if a != b {
        return Err(Error::invalid("station list differs from the one the checkpoint was trained on"));
    }
    Ok(())
}

pub fn predict_base(ckpt: &Checkpoint, frame: &SeriesFrame, window_end: Option<NaiveDate>) -> Result<Forecast> {
    forecast(ckpt, &Deployment::base(ckpt)?, frame, window_end)
}

/// Zero-shot forecasts with receiver-only new stations.
#[derive(Debug, Clone)]
pub struct UnseenForecast {
    /// Forecasts of the original stations computed with the new nodes present.
    pub base: Forecast,
    pub new: Forecast,
    pub digest_before: String,
    pub digest_after: String,
}

pub fn predict_unseen(
    ckpt: &Checkpoint,
    frame: &SeriesFrame,
    new_stations: &[StationMeta],
    window_end: Option<NaiveDate>,
) -> Result<UnseenForecast> {
    let digest_before = ckpt.params.digest();
    let dep = Deployment::with_new_stations(ckpt, new_stations)?;
    let all = forecast(ckpt, &dep, frame, window_end)?;
    let digest_after = ckpt.params.digest();
    if digest_after != digest_before {
        return Err(Error::Runtime("parameters changed during zero-shot inference".into()));
    }
    Ok(UnseenForecast {
        base: all.stations(0..dep.num_base)?,
        new: all.stations(dep.num_base..dep.ids.len())?,
        digest_before,
        digest_after,
    })
}

/// Model and last-value metrics over windows ending at `ends`, restricted to
/// the station columns `range` of the deployment.
pub fn evaluate_windows(
    ckpt: &Checkpoint,
    dep: &Deployment,
    frame: &SeriesFrame,
    ends: &[usize],
    range: std::ops::Range<usize>,
) -> Result<(MetricReport, MetricReport)> {
    let tau = ckpt.config.horizon;
    let n = dep.ids.len();
    let cols: Vec<Option<usize>> = dep.ids.iter().map(|id| frame.station_ids.iter().position(|s| s == id)).collect();
    let (mut yhat, mut lv, mut y, mut valid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let batch = ckpt.config.batch_size;
    for chunk in ends.chunks(batch) {
        let pred = forecast_batch(ckpt, dep, frame, chunk)?;
        let (_, raw, in_valid) = window_inputs(ckpt, frame, &dep.ids, chunk)?;
        let base = lv_baseline(&raw, &in_valid, tau, &ckpt.meta.norm.mean)?;
        for (b, &end) in chunk.iter().enumerate() {
            if end + tau > frame.len() {
                return Err(Error::invalid("evaluation window runs past the series"));
            }
            for h in 0..tau {
                for i in range.clone() {
                    for c in 0..NUM_CHANNELS {
                        let k = ((b * tau + h) * n + i) * NUM_CHANNELS + c;
                        yhat.push(pred.data()[k]);
                        lv.push(base.data()[k]);
                        match cols[i].and_then(|s| frame.get(end + h, s, c)) {
                            Some(v) => {
                                y.push(v);
                                valid.push(1.0);
                            }
                            None => {
                                y.push(0.0);
                                valid.push(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = vec![y.len() / NUM_CHANNELS, NUM_CHANNELS];
    let y = Tensor::new(shape.clone(), y)?;
    let valid = Tensor::new(shape.clone(), valid)?;
    Ok((
        masked_metrics(&y, &Tensor::new(shape.clone(), yhat)?, &valid)?,
        masked_metrics(&y, &Tensor::new(shape, lv)?, &valid)?,
    ))
}

/// Input ends of the test-split windows of `frame`.
pub fn test_window_ends(ckpt: &Checkpoint, frame: &SeriesFrame) -> Result<Vec<usize>> {
    let cfg = &ckpt.config;
    let plan = SplitPlan::new(frame, cfg.split, cfg.window, cfg.horizon)?;
    let ends: Vec<usize> = plan.test().into_iter().map(|w| w + cfg.window).collect();
    if ends.is_empty() {
        return Err(Error::invalid("test split holds no complete forecast window"));
    }
    Ok(ends)
}

/// Test-split metrics of the model and the last-value baseline.
pub fn evaluate(ckpt: &Checkpoint, frame: &SeriesFrame) -> Result<(MetricReport, MetricReport)> {
    let dep = Deployment::base(ckpt)?;
    let ends = test_window_ends(ckpt, frame)?;
    evaluate_windows(ckpt, &dep, frame, &ends, 0..dep.ids.len())
}

/// CSV `station_id,e_0,...` of identity embeddings.
pub fn embeddings_csv(ckpt: &Checkpoint) -> Result<String> {
    let feats = ckpt.features()?;
    let e = identity_embeddings(&ckpt.params, &feats.rows, &feats.grades)?;
    let d = e.shape()[1];
    let mut s = String::from("station_id");
    for k in 0..d {
        let _ = write!(s, ",e_{k}");
    }
    s.push('\n');
    for (id, row) in feats.stations.iter().zip(e.data().chunks(d)) {
        s.push_str(&id.id);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}
