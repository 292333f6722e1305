use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NUM_CHANNELS;
use crate::encoder::{FourierConfig, FourierMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::propagation::{AggregationMode, FusionMode};
use crate::tensor::AdamConfig;
use crate::topology::{EdgeFeatureSource, NormMode, RankMode, TopologyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FourierKind {
    Geometric,
    Gaussian,
}

/// Every knob of a run. All fields are optional in the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fourier_dim: usize,
    pub fourier_kind: FourierKind,
    pub fourier_f0: f64,
    pub fourier_bandwidth: f64,
    pub id_hidden: usize,
    pub id_dim: usize,
    pub grade_embed: usize,
    pub d_model: usize,
    pub heads: usize,
    pub diffusion_steps: usize,
    pub lambda: f64,
    pub edge_hidden: usize,
    pub head_hidden: usize,
    pub k_geo: usize,
    pub k_sem: usize,
    pub k_max: f64,
    pub eta: f64,
    pub kappa_km: f64,
    pub eps: f64,
    pub window: usize,
    pub horizon: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub aggregation_mode: AggregationMode,
    pub rank_mode: RankMode,
    pub norm_mode: NormMode,
    pub edge_features: EdgeFeatureSource,
    /// Rebuild semantic edges from the learned identity embeddings every this
    /// many epochs; 0 keeps the initial topology.
    pub refresh_semantic_every: usize,
    /// Chronological train / validation / test fractions.
    pub split: [f64; 3],
    pub per_station_norm: bool,
    /// Per-batch probability of presenting a training station with the
    /// anchor-borrowed context an unseen station would receive. Useful when
    /// the model will forecast for stations added after training.
    pub station_dropout: f64,
    /// Center every input window on its own per-station, per-channel mean
    /// before the model and add the mean back to the forecast.
    pub center_windows: bool,
    pub step_days: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fourier_dim: 32,
            fourier_kind: FourierKind::Geometric,
            fourier_f0: 1.0,
            fourier_bandwidth: 1.0,
            id_hidden: 64,
            id_dim: 64,
            grade_embed: 16,
            d_model: 64,
            heads: 4,
            diffusion_steps: 2,
            lambda: 0.2,
            edge_hidden: 32,
            head_hidden: 128,
            k_geo: 10,
            k_sem: 5,
            k_max: 15.0,
            eta: 10.0,
            kappa_km: 100.0,
            eps: 1e-8,
            window: 30,
            horizon: 14,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 300,
            patience: 20,
            seed: 42,
            fusion_mode: FusionMode::Signed,
            aggregation_mode: AggregationMode::Signed,
            rank_mode: RankMode::Absolute,
            norm_mode: NormMode::Absolute,
            edge_features: EdgeFeatureSource::LastStep,
            refresh_semantic_every: 0,
            split: [0.7, 0.1, 0.2],
            per_station_norm: false,
            station_dropout: 0.0,
            center_windows: true,
            step_days: 1,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn fourier(&self) -> Result<FourierConfig> {
        let (per_level, mode) = match self.fourier_kind {
            FourierKind::Geometric => (4, FourierMode::DeterministicGeometric { f0: self.fourier_f0 }),
            FourierKind::Gaussian => (
                2,
                FourierMode::GaussianRandom { bandwidth: self.fourier_bandwidth, seed: self.seed },
            ),
        };
        if self.fourier_dim == 0 || self.fourier_dim % per_level != 0 {
            return Err(Error::invalid(format!(
                "fourier_dim {} must be a positive multiple of {per_level}",
                self.fourier_dim
            )));
        }
        Ok(FourierConfig { levels: self.fourier_dim / per_level, mode })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            channels: NUM_CHANNELS,
            fourier: self.fourier()?,
            id_hidden: self.id_hidden,
            id_dim: self.id_dim,
            grade_embed: self.grade_embed,
            d_model: self.d_model,
            heads: self.heads,
            diffusion_steps: self.diffusion_steps,
            lambda: self.lambda,
            edge_hidden: self.edge_hidden,
            head_hidden: self.head_hidden,
            window: self.window,
            horizon: self.horizon,
            topology: TopologyConfig {
                k_geo: self.k_geo,
                k_sem: self.k_sem,
                kappa_km: self.kappa_km,
                eta: self.eta,
                k_max: self.k_max,
                eps: self.eps,
                rank_mode: self.rank_mode,
                norm_mode: self.norm_mode,
                edge_features: self.edge_features,
            },
            fusion_mode: self.fusion_mode,
            aggregation_mode: self.aggregation_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        for (name, v) in [("batch_size", self.batch_size), ("max_epochs", self.max_epochs), ("workers", self.workers)] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.step_days == 0 {
            return Err(Error::invalid("step_days must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.station_dropout) {
            return Err(Error::invalid("station_dropout must lie in [0, 1)"));
        }
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split {:?} must be non-negative and sum to 1", self.split)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_json() {
        let d = RunConfig::default();
        d.validate().unwrap();
        assert_eq!(d.model().unwrap().static_dim(), 32 + 10 + 6);
        let c: RunConfig = serde_json::from_str(r#"{"d_model": 32, "id_dim": 32, "fusion_mode": "softmax"}"#).unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.patience, 20);
        assert_eq!(c.fusion_mode, FusionMode::Softmax);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = RunConfig { heads: 3, ..RunConfig::default() };
        assert!(bad.validate().unwrap_err().is_validation());
        let bad = RunConfig { id_dim: 32, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { fourier_dim: 30, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { split: [0.5, 0.5, 0.5], ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn round_trip_preserves_hash() {
        let c = RunConfig { lambda: 0.1 + 0.2, ..RunConfig::default() };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
