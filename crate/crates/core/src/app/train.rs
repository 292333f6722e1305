use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, NormStats, SeriesFrame, Windows};
use crate::encoder::{anchor_context, NeighborContext, StaticFeatureStats, StationMeta};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, masked_mae, predict, ModelConfig, ModelInputs};
use crate::tensor::{AdamState, Graph, ModelParams, Tensor};
use crate::topology::{GraphTensors, HybridGraph};

use super::config::RunConfig;
use super::pipeline::{build_features, embedding_keys, station_contexts, Checkpoint, CheckpointMeta, SplitPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stop_reason: StopReason,
}

/// Tracks the best validation score and the run of non-improving epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, stale: 0 }
    }

    /// Records one validation score. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let improved = val.is_finite() && self.best.is_none_or(|(_, b)| val < b);
        if improved {
            self.best = Some((epoch, val));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }
}

/// Result of one pass over the training windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    pub loss: f64,
    pub diverged: bool,
}

/// Generic epoch loop with early stopping. The best parameters seen are
/// restored into `params` on return; after a divergence with no improvement
/// yet, the parameters from before the failing epoch are restored.
pub fn fit<E, V>(params: &mut ModelParams, max_epochs: usize, patience: usize, mut epoch_fn: E, mut validate: V) -> Result<TrainLog>
where
    E: FnMut(&mut ModelParams, usize) -> Result<EpochOutcome>,
    V: FnMut(&ModelParams, usize) -> Result<f64>,
{
    let mut stopper = EarlyStopping::new(patience.max(1));
    let mut best_params: Option<ModelParams> = None;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..max_epochs {
        let before = best_params.is_none().then(|| params.clone());
        let out = epoch_fn(params, epoch)?;
        let val = if out.diverged { f64::NAN } else { validate(params, epoch)? };
        if out.diverged || !val.is_finite() {
            log::warn!("epoch {epoch}: training diverged (loss {}, validation {val})", out.loss);
            epochs.push(EpochRecord { epoch, train_loss: out.loss, val_mae: val, improved: false });
            if let Some(p) = before {
                *params = p;
            }
            stop_reason = StopReason::Diverged;
            break;
        }
        let (improved, stop) = stopper.observe(epoch, val);
        if improved {
            best_params = Some(params.clone());
        }
        log::info!("epoch {epoch}: train loss {:.6}, validation MAE {val:.6}{}", out.loss, if improved { " *" } else { "" });
        epochs.push(EpochRecord { epoch, train_loss: out.loss, val_mae: val, improved });
        if stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    if let Some(p) = best_params {
        *params = p;
    }
    let best = stopper.best();
    Ok(TrainLog { epochs, best_epoch: best.map(|b| b.0), best_val_mae: best.map(|b| b.1), stop_reason })
}

/// Static state shared by the epoch and validation passes.
struct Context<'a> {
    cfg: ModelConfig,
    windows: Windows<'a>,
    rows: Tensor,
    grades: Arc<Vec<usize>>,
    center: bool,
}

impl Context<'_> {
    fn inputs<'b>(&'b self, x: &'b Tensor, graph: &'b GraphTensors) -> ModelInputs<'b> {
        ModelInputs { x, static_features: &self.rows, grades: &self.grades, graph }
    }

    /// Masked MAE in standardized units over `idx`.
    fn score(&self, params: &ModelParams, graph: &GraphTensors, idx: &[usize], batch: usize) -> Result<f64> {
        let (mut err, mut count) = (0.0, 0.0);
        for chunk in idx.chunks(batch) {
            let mut b = self.windows.batch(chunk)?;
            if self.center {
                b.center()?;
            }
            let y = predict(params, &self.cfg, self.inputs(&b.inputs, graph))?;
            for ((p, t), m) in y.data().iter().zip(b.targets_norm.data()).zip(b.target_valid.data()) {
                err += m * (p - t).abs();
                count += m;
            }
        }
        Ok(err / f64::max(count, 1.0))
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains on `frame`, whose station order must follow `stations`.
pub fn train(cfg: &RunConfig, stations: &[StationMeta], frame: &SeriesFrame) -> Result<TrainOutcome> {
    train_with(cfg, stations, frame, None)
}

/// [`train`] with an optional stand-in for the validation pass.
pub fn train_with(
    cfg: &RunConfig,
    stations: &[StationMeta],
    frame: &SeriesFrame,
    mut validation_override: Option<&mut dyn FnMut(usize) -> f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model()?;
    let plan = SplitPlan::new(frame, cfg.split, cfg.window, cfg.horizon)?;
    let (train_idx, val_idx) = (plan.train(), plan.validation());
    if val_idx.is_empty() {
        return Err(Error::invalid("validation split holds no complete forecast window"));
    }
    let train_frame = frame.slice_time(0, plan.train_end);
    let norm = NormStats::fit(&train_frame, cfg.per_station_norm);
    let contexts = station_contexts(stations, &train_frame, cfg.k_geo)?;
    let feature_stats = StaticFeatureStats::fit(stations, &contexts);
    let feats = build_features(cfg, stations, &contexts, &feature_stats)?;
    let points = feats.points();
    let anchored = if cfg.station_dropout > 0.0 { Some(anchored_rows(cfg, stations, &contexts, &feature_stats)?) } else { None };
    let graph = HybridGraph::build(&points, &feats.keys, &model_cfg.topology)?;

    let ctx = Context {
        windows: make_windows(frame, cfg.window, cfg.horizon, &norm)?,
        rows: feats.rows.clone(),
        grades: feats.grades.clone(),
        cfg: model_cfg.clone(),
        center: cfg.center_windows,
    };
    let mut params = init_params(&model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&params, cfg.adam());
    // (first epoch using the graph, keys when rebuilt from embeddings, graph)
    let mut graphs: Vec<(usize, Option<Vec<Vec<f64>>>, GraphTensors)> = vec![(0, None, GraphTensors::new(&graph))];

    let log = {
        let graphs_ref = std::cell::RefCell::new(&mut graphs);
        let epoch_fn = |params: &mut ModelParams, epoch: usize| -> Result<EpochOutcome> {
            let every = cfg.refresh_semantic_every;
            if every > 0 && epoch > 0 && epoch % every == 0 {
                let keys = embedding_keys(params, &feats)?;
                let g = HybridGraph::build(&points, &keys, &model_cfg.topology)?;
                graphs_ref.borrow_mut().push((epoch, Some(keys), GraphTensors::new(&g)));
            }
            let gt = graphs_ref.borrow().last().expect("initial graph").2.clone();
            let mut order = train_idx.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
            let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64) ^ 0xd5a6_1f0b_94c3_2e77);
            let (mut total, mut seen) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let mut b = ctx.windows.batch(chunk)?;
                if ctx.center {
                    b.center()?;
                }
                let mut g = Graph::new();
                let bound = params.bind(&mut g, true);
                let mixed = anchored.as_ref().map(|a| mix_rows(&ctx.rows, a, cfg.station_dropout, &mut drop_rng)).transpose()?;
                let mut inputs = ctx.inputs(&b.inputs, &gt);
                if let Some(rows) = &mixed {
                    inputs.static_features = rows;
                }
                let out = forward(&mut g, &bound, &ctx.cfg, inputs)?;
                let loss = masked_mae(&mut g, out.y_hat, &b.targets_norm, &b.target_valid)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Ok(EpochOutcome { loss: value, diverged: true });
                }
                let grads = g.backward(loss)?;
                let flat: Vec<Option<Tensor>> = params
                    .names()
                    .map(|n| bound.get(n).map(|v| grads.get(v).cloned()))
                    .collect::<Result<_>>()?;
                if !adam.step(params, &flat)? {
                    return Ok(EpochOutcome { loss: f64::NAN, diverged: true });
                }
                total += value * chunk.len() as f64;
                seen += chunk.len();
            }
            Ok(EpochOutcome { loss: total / seen.max(1) as f64, diverged: false })
        };
        let validate = |params: &ModelParams, epoch: usize| -> Result<f64> {
            if let Some(f) = validation_override.as_mut() {
                return Ok(f(epoch));
            }
            let gt = graphs_ref.borrow().last().expect("initial graph").2.clone();
            ctx.score(params, &gt, &val_idx, cfg.batch_size)
        };
        fit(&mut params, cfg.max_epochs, cfg.patience, epoch_fn, validate)?
    };

    let best_epoch = log.best_epoch.unwrap_or(0);
    let semantic_keys = graphs
        .iter()
        .rev()
        .find(|(from, _, _)| *from <= best_epoch)
        .and_then(|(_, keys, _)| keys.clone());
    let meta = CheckpointMeta { stations: stations.to_vec(), contexts, feature_stats, norm, semantic_keys };
    Ok(TrainOutcome { checkpoint: Checkpoint { config: cfg.clone(), params, meta }, log })
}

/// Feature rows each station would receive if it were unseen: the context of
/// its nearest other station, self deviation zeroed.
fn anchored_rows(
    cfg: &RunConfig,
    stations: &[StationMeta],
    contexts: &[NeighborContext],
    stats: &StaticFeatureStats,
) -> Result<Tensor> {
    let mut borrowed = Vec::with_capacity(stations.len());
    for (i, s) in stations.iter().enumerate() {
        let others: Vec<_> = stations
            .iter()
            .zip(contexts)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (o, c))| (o.point, c.clone()))
            .collect();
        borrowed.push(if others.is_empty() { contexts[i].clone() } else { anchor_context(s.point, &others)?.1 });
    }
    Ok(build_features(cfg, stations, &borrowed, stats)?.rows)
}

/// Rows of `base` with each station swapped for its `anchored` row with probability `p`.
fn mix_rows(base: &Tensor, anchored: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let f = base.shape()[1];
    let mut data = base.data().to_vec();
    for (i, row) in data.chunks_mut(f).enumerate() {
        if rng.random_bool(p) {
            row.copy_from_slice(&anchored.data()[i * f..(i + 1) * f]);
        }
    }
    Tensor::new(base.shape().to_vec(), data)
}

/// Standardized masked MAE of `ckpt` over the validation windows of `frame`.
pub fn validation_mae(ckpt: &Checkpoint, frame: &SeriesFrame) -> Result<f64> {
    let cfg = &ckpt.config;
    let plan = SplitPlan::new(frame, cfg.split, cfg.window, cfg.horizon)?;
    let feats = ckpt.features()?;
    let graph = GraphTensors::new(&ckpt.graph(&feats)?);
    let ctx = Context {
        cfg: cfg.model()?,
        windows: make_windows(frame, cfg.window, cfg.horizon, &ckpt.meta.norm)?,
        rows: feats.rows,
        grades: feats.grades,
        center: cfg.center_windows,
    };
    ctx.score(&ckpt.params, &graph, &plan.validation(), cfg.batch_size)
}
