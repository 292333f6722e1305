//! Station and series CSV ingestion, chronological splits, normalization and
//! sliding windows.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::encoder::{StationMeta, NUM_GEO_FEATURES, NUM_GRADES};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::tensor::Tensor;

pub const CHANNELS: [&str; 6] = ["pm25", "pm10", "o3", "no2", "so2", "co"];
pub const NUM_CHANNELS: usize = CHANNELS.len();

pub const STATION_HEADER: [&str; 10] = [
    "station_id",
    "lat",
    "lon",
    "elevation",
    "climate_avg_wind",
    "climate_avg_wind_dir",
    "terrain_tpi",
    "terrain_roughness",
    "distance_to_coast_km",
    "grade",
];

const DATE_FMT: &str = "%Y-%m-%d";

fn load_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), row, message: message.into() }
}

fn column_map(path: &Path, headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim() == *w)
                .ok_or_else(|| load_err(path, 1, format!("missing column `{w}`")))
        })
        .collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads station metadata. Rows are numbered from 1 at the header.
pub fn load_stations(path: &Path) -> Result<Vec<StationMeta>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let cols = column_map(path, &headers, &STATION_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| load_err(path, row, e.to_string()))?;
        let field = |k: usize| rec.get(cols[k]).unwrap_or("").trim();
        let num = |k: usize| -> Result<f64> {
            let s = field(k);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| load_err(path, row, format!("`{}` is not a finite number: {s:?}", STATION_HEADER[k])))
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(load_err(path, row, "empty station_id"));
        }
        let point = GeoPoint { lat: num(1)?, lon: num(2)? };
        point.validate().map_err(|e| load_err(path, row, e.to_string()))?;
        let mut geo_feats = [0.0; NUM_GEO_FEATURES];
        for (k, v) in geo_feats.iter_mut().enumerate() {
            *v = num(3 + k)?;
        }
        let grade: usize = field(9)
            .parse()
            .ok()
            .filter(|g| *g < NUM_GRADES)
            .ok_or_else(|| load_err(path, row, format!("grade must be an integer in 0..={}, got {:?}", NUM_GRADES - 1, field(9))))?;
        if !seen.insert(id.clone()) {
            return Err(load_err(path, row, format!("duplicate station_id `{id}`")));
        }
        out.push(StationMeta { id, point, geo_feats, grade });
    }
    Ok(out)
}

pub fn write_stations(path: &Path, stations: &[StationMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STATION_HEADER)?;
    for s in stations {
        let mut rec = vec![s.id.clone(), s.point.lat.to_string(), s.point.lon.to_string()];
        rec.extend(s.geo_feats.iter().map(f64::to_string));
        rec.push(s.grade.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense `(time × station × channel)` observations with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub timestamps: Vec<NaiveDate>,
    pub station_ids: Vec<String>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SeriesFrame {
    /// All-missing frame.
    pub fn empty(timestamps: Vec<NaiveDate>, station_ids: Vec<String>) -> Self {
        let n = timestamps.len() * station_ids.len() * NUM_CHANNELS;
        SeriesFrame { timestamps, station_ids, values: vec![0.0; n], valid: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn index(&self, t: usize, station: usize, channel: usize) -> usize {
        (t * self.station_ids.len() + station) * NUM_CHANNELS + channel
    }

    pub fn get(&self, t: usize, station: usize, channel: usize) -> Option<f64> {
        let i = self.index(t, station, channel);
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, t: usize, station: usize, channel: usize, value: Option<f64>) {
        let i = self.index(t, station, channel);
        self.values[i] = value.unwrap_or(0.0);
        self.valid[i] = value.is_some();
    }

    /// Time steps `[start, start + len)`.
    pub fn slice_time(&self, start: usize, len: usize) -> SeriesFrame {
        let per = self.station_ids.len() * NUM_CHANNELS;
        SeriesFrame {
            timestamps: self.timestamps[start..start + len].to_vec(),
            station_ids: self.station_ids.clone(),
            values: self.values[start * per..(start + len) * per].to_vec(),
            valid: self.valid[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Subset of stations, in the given order.
    pub fn select_stations(&self, idx: &[usize]) -> SeriesFrame {
        let mut out = SeriesFrame::empty(self.timestamps.clone(), idx.iter().map(|&i| self.station_ids[i].clone()).collect());
        for t in 0..self.len() {
            for (new, &old) in idx.iter().enumerate() {
                for c in 0..NUM_CHANNELS {
                    out.set(t, new, c, self.get(t, old, c));
                }
            }
        }
        out
    }

    /// Mean of each station's valid values in `channel`.
    pub fn station_means(&self, channel: usize) -> Vec<Option<f64>> {
        (0..self.num_stations())
            .map(|s| {
                let (sum, n) = (0..self.len())
                    .filter_map(|t| self.get(t, s, channel))
                    .fold((0.0, 0usize), |(a, n), v| (a + v, n + 1));
                (n > 0).then(|| sum / n as f64)
            })
            .collect()
    }

    pub fn step_days(&self) -> u64 {
        if self.timestamps.len() < 2 {
            1
        } else {
            (self.timestamps[1] - self.timestamps[0]).num_days() as u64
        }
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, DATE_FMT)
        .ok()
        .or_else(|| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").ok().map(|d| d.date()))
}

/// Reads the long-format series CSV onto the full regular time grid spanned
/// by its timestamps. Station order follows `stations`.
pub fn load_series(path: &Path, stations: &[StationMeta]) -> Result<SeriesFrame> {
    let ids: Vec<String> = stations.iter().map(|s| s.id.clone()).collect();
    load_series_for(path, &ids, false, 1)
}

/// Like [`load_series`] but for an explicit id list and a grid step in days.
/// With `skip_unknown`, rows for other stations are ignored instead of
/// rejected.
pub fn load_series_for(path: &Path, ids: &[String], skip_unknown: bool, step_days: u64) -> Result<SeriesFrame> {
    if step_days == 0 {
        return Err(Error::invalid("step must be at least one day"));
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let mut wanted = vec!["timestamp", "station_id"];
    wanted.extend(CHANNELS);
    let cols = column_map(path, &headers, &wanted)?;
    let mut rows: Vec<(NaiveDate, usize, [Option<f64>; NUM_CHANNELS], usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| load_err(path, row, e.to_string()))?;
        let field = |k: usize| rec.get(cols[k]).unwrap_or("").trim();
        let date = parse_date(field(0)).ok_or_else(|| load_err(path, row, format!("bad timestamp {:?}", field(0))))?;
        let sid = field(1);
        let Some(&s) = index.get(sid) else {
            if skip_unknown {
                continue;
            }
            return Err(load_err(path, row, format!("unknown station_id `{sid}`")));
        };
        let mut vals = [None; NUM_CHANNELS];
        for (c, v) in vals.iter_mut().enumerate() {
            let f = field(2 + c);
            if !f.is_empty() {
                let x: f64 = f
                    .parse()
                    .ok()
                    .filter(|x: &f64| x.is_finite())
                    .ok_or_else(|| load_err(path, row, format!("`{}` is not a finite number: {f:?}", CHANNELS[c])))?;
                *v = Some(x);
            }
        }
        rows.push((date, s, vals, row));
    }
    let mut dates: Vec<NaiveDate> = rows.iter().map(|r| r.0).collect();
    dates.sort();
    dates.dedup();
    let timestamps = regular_grid(path, &dates, step_days as i64)?;
    let pos: HashMap<NaiveDate, usize> = timestamps.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut frame = SeriesFrame::empty(timestamps, ids.to_vec());
    let mut seen = HashSet::new();
    for (date, s, vals, row) in rows {
        let t = pos[&date];
        if !seen.insert((t, s)) {
            return Err(load_err(path, row, format!("duplicate row for {date} / `{}`", ids[s])));
        }
        for (c, v) in vals.iter().enumerate() {
            frame.set(t, s, c, *v);
        }
    }
    Ok(frame)
}

/// Regular grid from the first to the last of the sorted distinct dates.
fn regular_grid(path: &Path, dates: &[NaiveDate], step: i64) -> Result<Vec<NaiveDate>> {
    if dates.len() < 2 {
        return Ok(dates.to_vec());
    }
    let first = dates[0];
    for d in dates {
        if (*d - first).num_days() % step != 0 {
            return Err(load_err(path, 0, format!("timestamp {d} is off the {step}-day grid starting {first}")));
        }
    }
    let n = (*dates.last().expect("non-empty") - first).num_days() / step + 1;
    Ok((0..n).map(|i| first + Days::new((i * step) as u64)).collect())
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every (timestamp, station) row; missing values are blank.
pub fn write_series(path: &Path, frame: &SeriesFrame) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp", "station_id"];
    header.extend(CHANNELS);
    w.write_record(&header)?;
    for (t, date) in frame.timestamps.iter().enumerate() {
        let ds = date.format(DATE_FMT).to_string();
        for (s, id) in frame.station_ids.iter().enumerate() {
            let mut rec = vec![ds.clone(), id.clone()];
            rec.extend((0..NUM_CHANNELS).map(|c| fmt_value(frame.get(t, s, c))));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn format_date(d: NaiveDate) -> String {
    d.format(DATE_FMT).to_string()
}

/// Splits along time by `ratios` (floor per split, remainder to the last).
/// Every split must hold at least `min_len` steps.
pub fn chrono_split(frame: &SeriesFrame, ratios: [f64; 3], min_len: usize) -> Result<[SeriesFrame; 3]> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = frame.len();
    let a = (n as f64 * ratios[0]).floor() as usize;
    let b = (n as f64 * ratios[1]).floor() as usize;
    let c = n - a - b;
    for (name, len) in [("train", a), ("validation", b), ("test", c)] {
        if len < min_len {
            return Err(Error::invalid(format!(
                "{name} split has {len} steps; window plus horizon needs {min_len} ({n} steps total)"
            )));
        }
    }
    Ok([frame.slice_time(0, a), frame.slice_time(a, b), frame.slice_time(a + b, c)])
}

/// Per-channel standardization constants from a training frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
    /// Optional per-station override keyed by station id.
    #[serde(default)]
    pub per_station: Option<BTreeMap<String, ([f64; NUM_CHANNELS], [f64; NUM_CHANNELS])>>,
}

fn moments(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = vals.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt().max(1e-6)))
}

impl NormStats {
    /// Fits on `train`; stations or channels without data fall back to the
    /// global value (mean 0, std 1 when a channel is empty everywhere).
    pub fn fit(train: &SeriesFrame, per_station: bool) -> Self {
        let mut mean = [0.0; NUM_CHANNELS];
        let mut std = [1.0; NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            let vals = (0..train.len()).flat_map(|t| (0..train.num_stations()).filter_map(move |s| train.get(t, s, c)));
            if let Some((m, s)) = moments(vals) {
                mean[c] = m;
                std[c] = s;
            }
        }
        let per_station = per_station.then(|| {
            train
                .station_ids
                .iter()
                .enumerate()
                .map(|(s, id)| {
                    let mut m = mean;
                    let mut sd = std;
                    for c in 0..NUM_CHANNELS {
                        if let Some((a, b)) = moments((0..train.len()).filter_map(|t| train.get(t, s, c))) {
                            m[c] = a;
                            sd[c] = b;
                        }
                    }
                    (id.clone(), (m, sd))
                })
                .collect()
        });
        NormStats { mean, std, per_station }
    }

    pub fn for_station(&self, id: &str) -> ([f64; NUM_CHANNELS], [f64; NUM_CHANNELS]) {
        self.per_station
            .as_ref()
            .and_then(|m| m.get(id).copied())
            .unwrap_or((self.mean, self.std))
    }
}

/// Standardized copy of a frame with per-station constants resolved once.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    frame: &'a SeriesFrame,
    normalized: Vec<f64>,
    scale: Vec<([f64; NUM_CHANNELS], [f64; NUM_CHANNELS])>,
    pub window: usize,
    pub horizon: usize,
}

/// A stack of windows. Inputs are standardized and zero where missing;
/// targets are kept both raw and standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `(B × T × N × C)`
    pub inputs: Tensor,
    pub input_valid: Tensor,
    /// Inputs in raw units, zero where missing.
    pub inputs_raw: Tensor,
    /// `(B × tau × N × C)` raw units
    pub targets: Tensor,
    pub targets_norm: Tensor,
    pub target_valid: Tensor,
    /// Index of the first input step of each window.
    pub starts: Vec<usize>,
}

pub fn make_windows<'a>(frame: &'a SeriesFrame, window: usize, horizon: usize, stats: &NormStats) -> Result<Windows<'a>> {
    if window == 0 || horizon == 0 {
        return Err(Error::invalid("window and horizon must be positive"));
    }
    if frame.len() < window + horizon {
        return Err(Error::invalid(format!(
            "frame of {} steps is shorter than window {window} + horizon {horizon}",
            frame.len()
        )));
    }
    let scale: Vec<_> = frame.station_ids.iter().map(|id| stats.for_station(id)).collect();
    let mut normalized = vec![0.0; frame.values.len()];
    for t in 0..frame.len() {
        for (s, (m, sd)) in scale.iter().enumerate() {
            for c in 0..NUM_CHANNELS {
                let i = frame.index(t, s, c);
                if frame.valid[i] {
                    normalized[i] = (frame.values[i] - m[c]) / sd[c];
                }
            }
        }
    }
    Ok(Windows { frame, normalized, scale, window, horizon })
}

impl WindowBatch {
    /// Shifts each window's station-channel series by the mean of its valid
    /// standardized inputs, in place on inputs and standardized targets.
    /// Returns the shifts `(B × N × C)`; missing inputs stay zero.
    pub fn center(&mut self) -> Result<Tensor> {
        let shifts = center_inputs(&mut self.inputs, &self.input_valid)?;
        let s = self.targets_norm.shape().to_vec();
        let per = s[2] * s[3];
        for (k, v) in self.targets_norm.data_mut().iter_mut().enumerate() {
            *v -= shifts.data()[(k / (s[1] * per)) * per + k % per];
        }
        Ok(shifts)
    }
}

/// Centers standardized inputs `(B × T × N × C)` per window, station and
/// channel on the mean of their valid entries; returns the `(B × N × C)` shifts.
pub fn center_inputs(inputs: &mut Tensor, valid: &Tensor) -> Result<Tensor> {
    let s = inputs.shape().to_vec();
    if s.len() != 4 || valid.shape() != s.as_slice() {
        return Err(Error::invalid("center_inputs expects matching (B, T, N, C) tensors"));
    }
    let (b, t, per) = (s[0], s[1], s[2] * s[3]);
    let mut shifts = vec![0.0; b * per];
    for w in 0..b {
        for k in 0..per {
            let (mut sum, mut n) = (0.0, 0.0);
            for step in 0..t {
                let i = (w * t + step) * per + k;
                sum += inputs.data()[i] * valid.data()[i];
                n += valid.data()[i];
            }
            if n > 0.0 {
                shifts[w * per + k] = sum / n;
            }
        }
    }
    for (i, v) in inputs.data_mut().iter_mut().enumerate() {
        let w = i / (t * per);
        if valid.data()[i] > 0.0 {
            *v -= shifts[w * per + i % per];
        }
    }
    Tensor::new(vec![b, s[2], s[3]], shifts)
}

impl Windows<'_> {
    pub fn count(&self) -> usize {
        self.frame.len() - self.window - self.horizon + 1
    }

    pub fn frame(&self) -> &SeriesFrame {
        self.frame
    }

    /// Station-wise `(mean, std)` used for this frame.
    pub fn scale(&self) -> &[([f64; NUM_CHANNELS], [f64; NUM_CHANNELS])] {
        &self.scale
    }

    /// Standardized inputs for the window starting at step `start`, which
    /// may end at the last frame step (no target needed).
    pub fn input_at(&self, start: usize) -> Result<(Tensor, Tensor)> {
        if start + self.window > self.frame.len() {
            return Err(Error::invalid(format!(
                "window starting at {start} runs past the {} available steps",
                self.frame.len()
            )));
        }
        let per = self.frame.num_stations() * NUM_CHANNELS;
        let range = start * per..(start + self.window) * per;
        let shape = vec![1, self.window, self.frame.num_stations(), NUM_CHANNELS];
        let valid = self.frame.valid[range.clone()].iter().map(|&v| f64::from(u8::from(v))).collect();
        Ok((Tensor::new(shape.clone(), self.normalized[range].to_vec())?, Tensor::new(shape, valid)?))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<WindowBatch> {
        let n = self.frame.num_stations();
        let per = n * NUM_CHANNELS;
        let (t, h) = (self.window, self.horizon);
        let b = indices.len();
        let mut inputs = Vec::with_capacity(b * t * per);
        let mut input_valid = Vec::with_capacity(b * t * per);
        let mut inputs_raw = Vec::with_capacity(b * t * per);
        let mut targets = Vec::with_capacity(b * h * per);
        let mut targets_norm = Vec::with_capacity(b * h * per);
        let mut target_valid = Vec::with_capacity(b * h * per);
        for &w in indices {
            if w >= self.count() {
                return Err(Error::invalid(format!("window {w} out of {}", self.count())));
            }
            let inp = w * per..(w + t) * per;
            inputs.extend_from_slice(&self.normalized[inp.clone()]);
            inputs_raw.extend_from_slice(&self.frame.values[inp.clone()]);
            input_valid.extend(self.frame.valid[inp].iter().map(|&v| f64::from(u8::from(v))));
            let tgt = (w + t) * per..(w + t + h) * per;
            targets.extend_from_slice(&self.frame.values[tgt.clone()]);
            targets_norm.extend_from_slice(&self.normalized[tgt.clone()]);
            target_valid.extend(self.frame.valid[tgt].iter().map(|&v| f64::from(u8::from(v))));
        }
        let xs = vec![b, t, n, NUM_CHANNELS];
        let ys = vec![b, h, n, NUM_CHANNELS];
        Ok(WindowBatch {
            inputs: Tensor::new(xs.clone(), inputs)?,
            input_valid: Tensor::new(xs.clone(), input_valid)?,
            inputs_raw: Tensor::new(xs, inputs_raw)?,
            targets: Tensor::new(ys.clone(), targets)?,
            targets_norm: Tensor::new(ys.clone(), targets_norm)?,
            target_valid: Tensor::new(ys, target_valid)?,
            starts: indices.to_vec(),
        })
    }

    /// Maps a standardized `(B × tau × N × C)` forecast back to raw units.
    pub fn denormalize(&self, y: &Tensor) -> Tensor {
        let mut out = y.clone();
        let n = self.frame.num_stations();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = k % NUM_CHANNELS;
            let s = (k / NUM_CHANNELS) % n;
            let (m, sd) = &self.scale[s];
            *v = *v * sd[c] + m[c];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    const HEADER: &str = "station_id,lat,lon,elevation,climate_avg_wind,climate_avg_wind_dir,terrain_tpi,terrain_roughness,distance_to_coast_km,grade\n";

    #[test]
    fn stations_header_only_and_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", HEADER);
        assert!(load_stations(&p).unwrap().is_empty());
        let p = write(dir.path(), "s1.csv", &format!("{HEADER}A,45.5,-73.6,30,4.2,270,1.5,3.2,500,2\n"));
        let s = load_stations(&p).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, "A");
        assert_eq!(s[0].geo_feats, [30.0, 4.2, 270.0, 1.5, 3.2, 500.0]);
        assert_eq!(s[0].grade, 2);
    }

    #[test]
    fn station_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", &format!("{HEADER}A,45,0,0,0,0,0,0,0,1\nB,91,0,0,0,0,0,0,0,1\n"));
        match load_stations(&p) {
            Err(Error::Load { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "d.csv", &format!("{HEADER}A,45,0,0,0,0,0,0,0,1\nA,44,0,0,0,0,0,0,0,1\n"));
        assert!(matches!(load_stations(&p), Err(Error::Load { row: 3, .. })));
        let p = write(dir.path(), "m.csv", "station_id,lat,lon\nA,1,2\n");
        assert!(matches!(load_stations(&p), Err(Error::Load { row: 1, .. })));
        let p = write(dir.path(), "g.csv", &format!("{HEADER}A,45,0,0,0,0,0,0,0,6\n"));
        assert!(load_stations(&p).is_err());
    }

    fn meta(id: &str) -> StationMeta {
        StationMeta { id: id.into(), point: GeoPoint { lat: 0.0, lon: 0.0 }, geo_feats: [0.0; 6], grade: 0 }
    }

    #[test]
    fn series_single_station_pm25_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "x.csv",
            "timestamp,station_id,pm25,pm10,o3,no2,so2,co\n2024-01-01,A,1,,,,,\n2024-01-02,A,2,,,,,\n2024-01-03,A,3,,,,,\n",
        );
        let f = load_series(&p, &[meta("A")]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.values.len(), 3 * 6);
        for t in 0..3 {
            assert_eq!(f.get(t, 0, 0), Some(t as f64 + 1.0));
            assert!((1..6).all(|c| f.get(t, 0, c).is_none()));
        }
    }

    #[test]
    fn series_missing_day_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "x.csv",
            "timestamp,station_id,pm25,pm10,o3,no2,so2,co\n2024-01-01,A,1,1,1,1,1,1\n2024-01-03,A,3,3,3,3,3,3\n",
        );
        let f = load_series(&p, &[meta("A")]).unwrap();
        assert_eq!(f.len(), 3);
        assert!((0..6).all(|c| f.get(1, 0, c).is_none()));
        let p = write(dir.path(), "u.csv", "timestamp,station_id,pm25,pm10,o3,no2,so2,co\n2024-01-01,Z,1,1,1,1,1,1\n");
        assert!(matches!(load_series(&p, &[meta("A")]), Err(Error::Load { row: 2, .. })));
        let p = write(
            dir.path(),
            "d.csv",
            "timestamp,station_id,pm25,pm10,o3,no2,so2,co\n2024-01-01,A,1,1,1,1,1,1\n2024-01-01,A,1,1,1,1,1,1\n",
        );
        assert!(matches!(load_series(&p, &[meta("A")]), Err(Error::Load { row: 3, .. })));
    }

    fn random_frame(len: usize, n: usize, seed: u64) -> SeriesFrame {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let start = NaiveDate::from_ymd_opt(2023, 12, 30).unwrap();
        let ts = (0..len).map(|i| start + Days::new(i as u64)).collect();
        let mut f = SeriesFrame::empty(ts, (0..n).map(|i| format!("S{i}")).collect());
        for t in 0..len {
            for s in 0..n {
                for c in 0..NUM_CHANNELS {
                    let v = rng.random_bool(0.8).then(|| rng.random_range(-50.0..300.0) * 1.000_000_1);
                    f.set(t, s, c, v);
                }
            }
        }
        f
    }

    #[test]
    fn series_round_trip_is_exact() {
        let f = random_frame(9, 3, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_series(&p, &f).unwrap();
        let stations: Vec<StationMeta> = f.station_ids.iter().map(|s| meta(s)).collect();
        let g = load_series(&p, &stations).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn split_sizes() {
        let f = random_frame(100, 1, 2);
        let [a, b, c] = chrono_split(&f, [0.6, 0.2, 0.2], 10).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let f = random_frame(101, 1, 2);
        let [a, b, c] = chrono_split(&f, [0.6, 0.2, 0.2], 10).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 21));
        assert_eq!(b.timestamps[0], a.timestamps[59] + Days::new(1));
        let f = random_frame(10, 1, 2);
        assert!(chrono_split(&f, [0.6, 0.2, 0.2], 44).is_err());
    }

    #[test]
    fn window_counts_and_normalization() {
        let mut f = random_frame(60, 2, 3);
        for t in 0..60 {
            f.set(t, 0, 0, Some(7.0));
            for c in 0..NUM_CHANNELS {
                f.set(t, 1, c, None);
            }
        }
        let stats = NormStats::fit(&f, false);
        assert_eq!(stats.mean[0], 7.0);
        let w = make_windows(&f, 30, 14, &stats).unwrap();
        assert_eq!(w.count(), 17);
        let b = w.batch(&[0, 16]).unwrap();
        assert_eq!(b.inputs.shape(), &[2, 30, 2, 6]);
        for bi in 0..2 {
            for t in 0..30 {
                assert_eq!(b.inputs.at(&[bi, t, 0, 0]), 0.0);
                for c in 0..6 {
                    assert_eq!(b.inputs.at(&[bi, t, 1, c]), 0.0);
                    assert_eq!(b.input_valid.at(&[bi, t, 1, c]), 0.0);
                }
            }
            for t in 0..14 {
                assert!((0..6).all(|c| b.target_valid.at(&[bi, t, 1, c]) == 0.0));
                assert_eq!(b.targets.at(&[bi, t, 0, 0]), 7.0);
            }
        }
        assert!(w.batch(&[17]).is_err());
        let back = w.denormalize(&b.targets_norm);
        for (k, v) in back.data().iter().enumerate() {
            if b.target_valid.data()[k] == 1.0 {
                assert!((v - b.targets.data()[k]).abs() < 1e-9 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn held_out_values_never_reach_statistics() {
        let f = random_frame(100, 3, 4);
        let [train, _, _] = chrono_split(&f, [0.6, 0.2, 0.2], 10).unwrap();
        let before = NormStats::fit(&train, true);
        let means_before = train.station_means(0);
        let mut poisoned = f.clone();
        for t in 60..100 {
            for s in 0..3 {
                for c in 0..NUM_CHANNELS {
                    poisoned.set(t, s, c, Some(1e9));
                }
            }
        }
        let [train2, _, _] = chrono_split(&poisoned, [0.6, 0.2, 0.2], 10).unwrap();
        assert_eq!(NormStats::fit(&train2, true), before);
        assert_eq!(train2.station_means(0), means_before);
    }

    #[test]
    fn centering_removes_window_means_and_keeps_gaps() {
        let mut x = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 5.0, 3.0, 0.0, 5.0, 7.0]).unwrap();
        let valid = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let shifts = center_inputs(&mut x, &valid).unwrap();
        assert_eq!(shifts.data(), &[3.0, 6.0]);
        assert_eq!(x.data(), &[-2.0, -1.0, 0.0, 0.0, 2.0, 1.0]);
    }

}
