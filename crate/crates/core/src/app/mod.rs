//! Run configuration, training orchestration, checkpoints and inference,
//! plus file-level entry points used by the command line.

mod config;
mod infer;
mod pipeline;
mod train;

use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{FourierKind, RunConfig};
pub use infer::{
    check_station_set, embeddings_csv, evaluate, evaluate_windows, forecast, forecast_batch, predict_base, predict_unseen,
    test_window_ends, window_end_index, Forecast, UnseenForecast,
};
pub use pipeline::{
    build_features, embedding_keys, station_contexts, unseen_contexts, Checkpoint, CheckpointMeta, Deployment, SplitPlan,
    StationFeatures,
};
pub use train::{fit, train, train_with, validation_mae, EarlyStopping, EpochOutcome, EpochRecord, StopReason, TrainLog, TrainOutcome};

use crate::data::{load_series_for, load_stations, write_series, write_stations, SeriesFrame};
use crate::encoder::{StaticFeatureStats, StationMeta, NUM_GRADES};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::geo::GeoPoint;
use crate::model::{forward, init_params, masked_mae, ModelConfig, ModelInputs};
use crate::oracle::{simulate_rd, RdScenario};
use crate::tensor::{grad_check, GradCheckReport, Tensor};
use crate::topology::{GraphTensors, HybridGraph, TopologyConfig};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Stations plus their series in station order.
pub fn load_dataset(stations: &Path, series: &Path, step_days: u64) -> Result<(Vec<StationMeta>, SeriesFrame)> {
    let st = load_stations(stations)?;
    let ids: Vec<String> = st.iter().map(|s| s.id.clone()).collect();
    let frame = load_series_for(series, &ids, false, step_days)?;
    Ok((st, frame))
}

/// Trains and writes `config.json`, `train_log.json` and `checkpoint/` into
/// `out_dir`.
pub fn run_train(cfg: &RunConfig, stations: &Path, series: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (st, frame) = load_dataset(stations, series, cfg.step_days)?;
    ensure_dir(out_dir)?;
    cfg.save(&out_dir.join("config.json"))?;
    let out = train(cfg, &st, &frame)?;
    write_text(&out_dir.join("train_log.json"), &(serde_json::to_string_pretty(&out.log)? + "\n"))?;
    out.checkpoint.save(&out_dir.join("checkpoint"))?;
    Ok(out)
}

/// Loads the series for the checkpoint's stations.
fn checkpoint_frame(ckpt: &Checkpoint, stations: &Path, series: &Path) -> Result<SeriesFrame> {
    check_station_set(ckpt, &load_stations(stations)?)?;
    load_series_for(series, &ckpt.ids(), true, ckpt.config.step_days)
}

pub fn run_predict(checkpoint: &Path, stations: &Path, series: &Path, window_end: Option<NaiveDate>, out: &Path) -> Result<Forecast> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let frame = checkpoint_frame(&ckpt, stations, series)?;
    let f = predict_base(&ckpt, &frame, window_end)?;
    f.write_csv(out)?;
    Ok(f)
}

/// Forecasts for the stations in `new_stations`. Rows of `series` for those
/// stations, when present, serve as their input history.
pub fn run_predict_unseen(
    checkpoint: &Path,
    stations: &Path,
    series: &Path,
    new_stations: &Path,
    window_end: Option<NaiveDate>,
    out: &Path,
) -> Result<UnseenForecast> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_station_set(&ckpt, &load_stations(stations)?)?;
    let new = load_stations(new_stations)?;
    let mut ids = ckpt.ids();
    ids.extend(new.iter().map(|s| s.id.clone()));
    let frame = load_series_for(series, &ids, true, ckpt.config.step_days)?;
    let f = predict_unseen(&ckpt, &frame, &new, window_end)?;
    f.new.write_csv(out)?;
    Ok(f)
}

/// Writes `metrics.csv`, `metrics.txt` and `baseline_lv.csv` for the test split.
pub fn run_evaluate(checkpoint: &Path, stations: &Path, series: &Path, out_dir: &Path) -> Result<(MetricReport, MetricReport)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let frame = checkpoint_frame(&ckpt, stations, series)?;
    let (model, lv) = evaluate(&ckpt, &frame)?;
    ensure_dir(out_dir)?;
    model.write_csv(&out_dir.join("metrics.csv"))?;
    lv.write_csv(&out_dir.join("baseline_lv.csv"))?;
    write_text(
        &out_dir.join("metrics.txt"),
        &format!("model\n{}\nlast value\n{}", model.to_text(), lv.to_text()),
    )?;
    Ok((model, lv))
}

pub fn run_export_embeddings(checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    write_text(out, &embeddings_csv(&ckpt)?)
}

/// Static features of every station, contexts from the training split.
pub fn compute_features(cfg: &RunConfig, stations: &[StationMeta], frame: &SeriesFrame) -> Result<StationFeatures> {
    let plan = SplitPlan::new(frame, cfg.split, cfg.window, cfg.horizon)?;
    let train = frame.slice_time(0, plan.train_end);
    let contexts = station_contexts(stations, &train, cfg.k_geo)?;
    let stats = StaticFeatureStats::fit(stations, &contexts);
    build_features(cfg, stations, &contexts, &stats)
}

/// CSV `station_id,f_0,...` of static feature rows.
pub fn run_features(cfg: &RunConfig, stations: &Path, series: &Path, out: &Path) -> Result<StationFeatures> {
    let (st, frame) = load_dataset(stations, series, cfg.step_days)?;
    let feats = compute_features(cfg, &st, &frame)?;
    let f = feats.rows.shape()[1];
    let mut s = String::from("station_id");
    for k in 0..f {
        s.push_str(&format!(",f_{k}"));
    }
    s.push('\n');
    for (m, row) in feats.stations.iter().zip(feats.rows.data().chunks(f)) {
        s.push_str(&m.id);
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    write_text(out, &s)?;
    Ok(feats)
}

pub fn run_build_graph(cfg: &RunConfig, stations: &Path, series: &Path, out: &Path) -> Result<HybridGraph> {
    let (st, frame) = load_dataset(stations, series, cfg.step_days)?;
    let feats = compute_features(cfg, &st, &frame)?;
    let graph = HybridGraph::build(&feats.points(), &feats.keys, &cfg.model()?.topology)?;
    graph.write_csv(out, &feats.ids())?;
    Ok(graph)
}

/// Writes `stations.csv` and `series.csv` from the reaction-diffusion simulator.
pub fn run_synth(scenario: &RdScenario, out_dir: &Path) -> Result<()> {
    let out = simulate_rd(scenario)?;
    ensure_dir(out_dir)?;
    write_stations(&out_dir.join("stations.csv"), &out.stations)?;
    write_series(&out_dir.join("series.csv"), &out.frame)
}

/// Gradient check of the full masked-MAE loss on a 5-station model with
/// window 6, horizon 2 and width 8.
pub fn grad_check_toy(seed: u64) -> Result<GradCheckReport> {
    let n = 5;
    let cfg = ModelConfig {
        channels: 2,
        fourier: crate::encoder::FourierConfig { levels: 2, ..Default::default() },
        id_hidden: 6,
        id_dim: 8,
        grade_embed: 3,
        d_model: 8,
        heads: 2,
        edge_hidden: 5,
        head_hidden: 7,
        window: 6,
        horizon: 2,
        topology: TopologyConfig { k_geo: 2, k_sem: 1, k_max: 2.5, eta: 2.0, ..Default::default() },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&cfg, seed)?;
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let pts: Vec<GeoPoint> = (0..n)
        .map(|_| GeoPoint { lat: rng.random_range(40.0..41.0), lon: rng.random_range(10.0..11.0) })
        .collect();
    let f = cfg.static_dim();
    let feats: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let keys: Vec<Vec<f64>> = feats.chunks(f).map(<[f64]>::to_vec).collect();
    let graph = GraphTensors::new(&HybridGraph::build(&pts, &keys, &cfg.topology)?);
    let b = 2;
    let xn = b * cfg.window * n * cfg.channels;
    let yn = b * cfg.horizon * n * cfg.channels;
    let x = Tensor::new(vec![b, cfg.window, n, cfg.channels], (0..xn).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let y = Tensor::new(vec![b, cfg.horizon, n, cfg.channels], (0..yn).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let mask = Tensor::new(y.shape().to_vec(), (0..yn).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect())?;
    let feats = Tensor::new(vec![n, f], feats)?;
    let grades = Arc::new((0..n).map(|_| rng.random_range(0..NUM_GRADES)).collect::<Vec<_>>());
    let inputs = ModelInputs { x: &x, static_features: &feats, grades: &grades, graph: &graph };
    grad_check(
        &params,
        |g, p| {
            let out = forward(g, p, &cfg, inputs)?;
            masked_mae(g, out.y_hat, &y, &mask)
        },
        1e-6,
        8,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_gradients_match_finite_differences() {
        let r = grad_check_toy(3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.coords_checked > 50);
    }
}
