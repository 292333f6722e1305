use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{chrono_split, NormStats, SeriesFrame};
use crate::encoder::{
    anchor_context, neighbor_context, semantic_key, static_features, FourierEncoder, NeighborContext, StaticFeatureStats,
    StationMeta,
};
use crate::error::{Error, Result};
use crate::geo::{knn_geo, GeoPoint};
use crate::model::identity_embeddings;
use crate::tensor::{ModelParams, Tensor};
use crate::topology::{GraphTensors, HybridGraph};

use super::config::RunConfig;

/// Static inputs of a station set.
#[derive(Debug, Clone)]
pub struct StationFeatures {
    pub stations: Vec<StationMeta>,
    pub contexts: Vec<NeighborContext>,
    /// `(N × F)`
    pub rows: Tensor,
    pub keys: Vec<Vec<f64>>,
    pub grades: Arc<Vec<usize>>,
}

impl StationFeatures {
    pub fn ids(&self) -> Vec<String> {
        self.stations.iter().map(|s| s.id.clone()).collect()
    }

    pub fn points(&self) -> Vec<GeoPoint> {
        self.stations.iter().map(|s| s.point).collect()
    }
}

/// Neighborhood contexts from the first-channel means of `train`, whose
/// station order must follow `stations`.
pub fn station_contexts(stations: &[StationMeta], train: &SeriesFrame, k: usize) -> Result<Vec<NeighborContext>> {
    if train.station_ids.len() != stations.len() || train.station_ids.iter().zip(stations).any(|(a, s)| *a != s.id) {
        return Err(Error::invalid("series station order does not match the station list"));
    }
    if stations.len() < 2 {
        return Err(Error::invalid("at least two stations are required"));
    }
    let points: Vec<GeoPoint> = stations.iter().map(|s| s.point).collect();
    let neighbors = knn_geo(&points, k.clamp(1, stations.len() - 1))?;
    let means = train.station_means(0);
    let avail: Vec<f64> = means.iter().flatten().copied().collect();
    let (gm, gs) = if avail.is_empty() {
        (0.0, 1.0)
    } else {
        let m = avail.iter().sum::<f64>() / avail.len() as f64;
        let v = avail.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / avail.len() as f64;
        (m, v.sqrt())
    };
    Ok((0..stations.len())
        .map(|i| neighbor_context(i, stations, &means, &neighbors[i], gm, gs))
        .collect())
}

pub fn build_features(
    cfg: &RunConfig,
    stations: &[StationMeta],
    contexts: &[NeighborContext],
    stats: &StaticFeatureStats,
) -> Result<StationFeatures> {
    let encoder = FourierEncoder::new(cfg.fourier()?)?;
    let mut data = Vec::new();
    let mut keys = Vec::with_capacity(stations.len());
    for (s, c) in stations.iter().zip(contexts) {
        s.validate()?;
        let row = static_features(&encoder, s, c, stats);
        keys.push(semantic_key(&row, s.grade));
        data.extend(row);
    }
    let f = cfg.model()?.static_dim();
    Ok(StationFeatures {
        stations: stations.to_vec(),
        contexts: contexts.to_vec(),
        rows: Tensor::new(vec![stations.len(), f], data)?,
        keys,
        grades: Arc::new(stations.iter().map(|s| s.grade).collect()),
    })
}

/// Contexts borrowed from the nearest base station.
pub fn unseen_contexts(base: &StationFeatures, new: &[StationMeta]) -> Result<Vec<NeighborContext>> {
    let anchors: Vec<(GeoPoint, NeighborContext)> =
        base.stations.iter().map(|s| s.point).zip(base.contexts.iter().cloned()).collect();
    new.iter().map(|s| anchor_context(s.point, &anchors).map(|(_, c)| c)).collect()
}

/// Chronological split boundaries; window `w` targets steps `w+T .. w+T+tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
    pub window: usize,
    pub horizon: usize,
}

impl SplitPlan {
    pub fn new(frame: &SeriesFrame, ratios: [f64; 3], window: usize, horizon: usize) -> Result<Self> {
        let [train, val, _] = chrono_split(frame, ratios, horizon)?;
        let plan = SplitPlan { train_end: train.len(), val_end: train.len() + val.len(), len: frame.len(), window, horizon };
        if plan.train_end < window + horizon {
            return Err(Error::invalid(format!(
                "train split has {} steps; window plus horizon needs {}",
                plan.train_end,
                window + horizon
            )));
        }
        Ok(plan)
    }

    /// Windows whose targets fall inside `[lo, hi)`.
    fn targets_within(&self, lo: usize, hi: usize) -> Vec<usize> {
        let first = lo.saturating_sub(self.window);
        (first..self.len.saturating_sub(self.window + self.horizon - 1))
            .filter(|w| w + self.window >= lo && w + self.window + self.horizon <= hi)
            .collect()
    }

    pub fn train(&self) -> Vec<usize> {
        self.targets_within(0, self.train_end)
    }

    pub fn validation(&self) -> Vec<usize> {
        self.targets_within(self.train_end, self.val_end)
    }

    pub fn test(&self) -> Vec<usize> {
        self.targets_within(self.val_end, self.len)
    }
}

/// Everything persisted next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stations: Vec<StationMeta>,
    pub contexts: Vec<NeighborContext>,
    pub feature_stats: StaticFeatureStats,
    pub norm: NormStats,
    /// Present when semantic edges were rebuilt from identity embeddings.
    pub semantic_keys: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

fn checkpoint_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("checkpoint");
    if nested.join("manifest.json").exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, self.config.seed, &self.config.hash())?;
        self.config.save(&dir.join("config.json"))?;
        let meta = dir.join("meta.json");
        std::fs::write(&meta, serde_json::to_string(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    /// Loads from a checkpoint directory or a run directory holding one.
    pub fn load(dir: &Path) -> Result<Self> {
        let dir = checkpoint_dir(dir);
        let (params, manifest) = ModelParams::load(&dir)?;
        let config = RunConfig::load(&dir.join("config.json"))?;
        if manifest.config_hash != config.hash() {
            return Err(Error::invalid(format!("{}: config does not match the checkpoint manifest", dir.display())));
        }
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        Ok(Checkpoint { config, params, meta })
    }

    pub fn ids(&self) -> Vec<String> {
        self.meta.stations.iter().map(|s| s.id.clone()).collect()
    }

    pub fn features(&self) -> Result<StationFeatures> {
        build_features(&self.config, &self.meta.stations, &self.meta.contexts, &self.meta.feature_stats)
    }

    /// Semantic keys used for neighbor search, and the keys a station with
    /// these features would get in the same space.
    pub fn search_keys(&self, feats: &StationFeatures) -> Result<Vec<Vec<f64>>> {
        match &self.meta.semantic_keys {
            None => Ok(feats.keys.clone()),
            Some(_) => embedding_keys(&self.params, feats),
        }
    }

    pub fn graph(&self, feats: &StationFeatures) -> Result<HybridGraph> {
        let keys = match &self.meta.semantic_keys {
            Some(k) => k.clone(),
            None => feats.keys.clone(),
        };
        HybridGraph::build(&feats.points(), &keys, &self.config.model()?.topology)
    }
}

/// Identity embeddings as semantic keys.
pub fn embedding_keys(params: &ModelParams, feats: &StationFeatures) -> Result<Vec<Vec<f64>>> {
    let e = identity_embeddings(params, &feats.rows, &feats.grades)?;
    let d = e.shape()[1];
    Ok(e.data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// Graph over the base stations with receiver-only new nodes appended.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub ids: Vec<String>,
    pub rows: Tensor,
    pub grades: Arc<Vec<usize>>,
    pub graph: HybridGraph,
    pub tensors: GraphTensors,
    pub num_base: usize,
}

impl Deployment {
    pub fn base(ckpt: &Checkpoint) -> Result<Self> {
        let feats = ckpt.features()?;
        let graph = ckpt.graph(&feats)?;
        Ok(Deployment {
            ids: feats.ids(),
            num_base: feats.stations.len(),
            rows: feats.rows,
            grades: feats.grades,
            tensors: GraphTensors::new(&graph),
            graph,
        })
    }

    pub fn with_new_stations(ckpt: &Checkpoint, new: &[StationMeta]) -> Result<Self> {
        let base = ckpt.features()?;
        for s in new {
            if base.stations.iter().any(|b| b.id == s.id) {
                return Err(Error::invalid(format!("new station `{}` collides with an existing id", s.id)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = new.iter().find(|s| !seen.insert(s.id.as_str())) {
            return Err(Error::invalid(format!("duplicate new station `{}`", dup.id)));
        }
        let contexts = unseen_contexts(&base, new)?;
        let fresh = build_features(&ckpt.config, new, &contexts, &ckpt.meta.feature_stats)?;
        let base_graph = ckpt.graph(&base)?;
        let base_keys = match &ckpt.meta.semantic_keys {
            Some(k) => k.clone(),
            None => base.keys.clone(),
        };
        let new_keys = ckpt.search_keys(&fresh)?;
        let new_points = fresh.points();
        let graph = base_graph.attach_receivers(
            &base.points(),
            &base_keys,
            &new_points,
            &new_keys,
            &ckpt.config.model()?.topology,
        )?;
        let f = base.rows.shape()[1];
        let mut rows = base.rows.data().to_vec();
        rows.extend_from_slice(fresh.rows.data());
        let mut ids = base.ids();
        ids.extend(fresh.ids());
        let mut grades = base.grades.as_ref().clone();
        grades.extend(fresh.grades.iter());
        Ok(Deployment {
            num_base: base.stations.len(),
            rows: Tensor::new(vec![ids.len(), f], rows)?,
            ids,
            grades: Arc::new(grades),
            tensors: GraphTensors::new(&graph),
            graph,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn frame(len: usize) -> SeriesFrame {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let ts = (0..len).map(|i| start + chrono::Days::new(i as u64)).collect();
        SeriesFrame::empty(ts, vec!["a".into()])
    }

    #[test]
    fn split_windows_do_not_leak_targets() {
        let f = frame(100);
        let p = SplitPlan::new(&f, [0.7, 0.1, 0.2], 10, 3).unwrap();
        assert_eq!((p.train_end, p.val_end), (70, 80));
        let (tr, va, te) = (p.train(), p.validation(), p.test());
        assert_eq!(tr.first(), Some(&0));
        assert!(tr.iter().all(|w| w + 13 <= 70));
        assert_eq!(tr.len(), 70 - 13 + 1);
        assert!(va.iter().all(|w| w + 10 >= 70 && w + 13 <= 80));
        assert_eq!(va.len(), 8);
        assert!(te.iter().all(|w| w + 10 >= 80 && w + 13 <= 100));
        assert_eq!(te.len(), 18);
        assert!(SplitPlan::new(&frame(20), [0.7, 0.1, 0.2], 10, 3).is_err());
    }
}
