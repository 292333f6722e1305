//! Full forecasting network: parameter layout, initialization, forward pass
//! and the masked training loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_identity, FourierConfig, CONTEXT_DIM, NUM_GEO_FEATURES, NUM_GRADES};
use crate::error::{Error, Result};
use crate::propagation::{diffuse, forecast_head, fuse_and_gate, signed_aggregate, Aggregate, AggregationMode, FusionMode, GatedOutput};
use crate::tensor::{BoundParams, Graph, ModelParams, Tensor, Var};
use crate::topology::{edge_weights, EdgeFeatureSource, EdgeWeights, GraphTensors, TopologyConfig};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub fourier: FourierConfig,
    pub id_hidden: usize,
    pub id_dim: usize,
    pub grade_embed: usize,
    pub d_model: usize,
    pub heads: usize,
    pub diffusion_steps: usize,
    pub lambda: f64,
    pub edge_hidden: usize,
    pub head_hidden: usize,
    pub window: usize,
    pub horizon: usize,
    pub topology: TopologyConfig,
    pub fusion_mode: FusionMode,
    pub aggregation_mode: AggregationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 6,
            fourier: FourierConfig::default(),
            id_hidden: 64,
            id_dim: 64,
            grade_embed: 16,
            d_model: 64,
            heads: 4,
            diffusion_steps: 2,
            lambda: 0.2,
            edge_hidden: 32,
            head_hidden: 128,
            window: 30,
            horizon: 14,
            topology: TopologyConfig::default(),
            fusion_mode: FusionMode::Signed,
            aggregation_mode: AggregationMode::Signed,
        }
    }
}

impl ModelConfig {
    /// Width of the per-station static feature row.
    pub fn static_dim(&self) -> usize {
        self.fourier.output_dim() + CONTEXT_DIM + NUM_GEO_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("id_hidden", self.id_hidden),
            ("id_dim", self.id_dim),
            ("grade_embed", self.grade_embed),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("edge_hidden", self.edge_hidden),
            ("head_hidden", self.head_hidden),
            ("window", self.window),
            ("horizon", self.horizon),
            ("fourier.levels", self.fourier.levels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.id_dim != self.d_model {
            return Err(Error::invalid(format!("id_dim {} must equal d_model {}", self.id_dim, self.d_model)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1)", self.lambda)));
        }
        let t = &self.topology;
        if !(t.eta > 0.0 && t.k_max > 0.0 && t.kappa_km > 0.0 && t.eps > 0.0) {
            return Err(Error::invalid("eta, k_max, kappa and eps must be positive"));
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-a..a)).collect()).expect("shape matches count")
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, de) = (cfg.channels, cfg.d_model, cfg.edge_hidden);
    let dh = d / cfg.heads;
    let steps = cfg.diffusion_steps + 1;
    let f = cfg.static_dim();
    let mut p = ModelParams::new();
    p.insert("in.w", glorot(&mut rng, c, d, vec![c, d]))?;
    p.insert("in.b", Tensor::zeros(vec![d]))?;
    p.insert("id.grade", glorot(&mut rng, NUM_GRADES, cfg.grade_embed, vec![NUM_GRADES, cfg.grade_embed]))?;
    let id_in = f + cfg.grade_embed;
    p.insert("id.w1", glorot(&mut rng, id_in, cfg.id_hidden, vec![id_in, cfg.id_hidden]))?;
    p.insert("id.b1", Tensor::zeros(vec![cfg.id_hidden]))?;
    p.insert("id.w2", glorot(&mut rng, cfg.id_hidden, cfg.id_dim, vec![cfg.id_hidden, cfg.id_dim]))?;
    p.insert("id.b2", Tensor::zeros(vec![cfg.id_dim]))?;
    p.insert("edge.w_e", glorot(&mut rng, 2 * d, de, vec![2 * d, de]))?;
    p.insert("edge.a", glorot(&mut rng, de, 1, vec![de, 1]))?;
    p.insert("edge.w_g", glorot(&mut rng, 2 * d + 1, 1, vec![2 * d + 1, 1]))?;
    p.insert("edge.b_g", Tensor::zeros(vec![1]))?;
    p.insert("beta.w1", glorot(&mut rng, d, de, vec![d, de]))?;
    p.insert("beta.b1", Tensor::zeros(vec![de]))?;
    p.insert("beta.w2", glorot(&mut rng, de, 1, vec![de, 1]))?;
    p.insert("beta.b2", Tensor::full(vec![1], 2.0))?;
    p.insert("spec.wq", glorot(&mut rng, dh, dh, vec![cfg.heads, dh, dh]))?;
    p.insert("spec.wk", glorot(&mut rng, dh, dh, vec![cfg.heads, dh, dh]))?;
    p.insert("spec.bias", Tensor::full(vec![steps], 1.0))?;
    p.insert("fusion.w", Tensor::zeros(vec![steps]))?;
    p.insert("gate.w_z", glorot(&mut rng, 2 * d, d, vec![d, d]))?;
    p.insert("gate.w_e", glorot(&mut rng, 2 * d, d, vec![d, d]))?;
    p.insert("gate.b", Tensor::zeros(vec![d]))?;
    let flat = cfg.window * d;
    let out = cfg.horizon * c;
    p.insert("head.w1", glorot(&mut rng, flat, cfg.head_hidden, vec![flat, cfg.head_hidden]))?;
    p.insert("head.b1", Tensor::zeros(vec![cfg.head_hidden]))?;
    p.insert("head.w2", glorot(&mut rng, cfg.head_hidden, out, vec![cfg.head_hidden, out]))?;
    p.insert("head.b2", Tensor::zeros(vec![out]))?;
    Ok(p)
}

/// Everything the forward pass reads besides parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelInputs<'a> {
    /// `(B × T × N × C)`, standardized with missing entries set to zero.
    pub x: &'a Tensor,
    /// `(N × F)` static feature rows.
    pub static_features: &'a Tensor,
    pub grades: &'a Arc<Vec<usize>>,
    pub graph: &'a GraphTensors,
}

/// Tape handles for every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub e_id: Var,
    pub h0: Var,
    pub edges: EdgeWeights,
    pub stack: Vec<Var>,
    pub aggregate: Aggregate,
    pub gated: GatedOutput,
    /// `(B × tau × N × C)` in standardized units.
    pub y_hat: Var,
}

pub fn forward(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, inputs: ModelInputs<'_>) -> Result<Forward> {
    let xs = inputs.x.shape();
    let n = inputs.graph.num_nodes();
    if xs.len() != 4 || xs[1] != cfg.window || xs[2] != n || xs[3] != cfg.channels {
        return Err(Error::invalid(format!(
            "input {xs:?} does not match window {}, {n} stations, {} channels",
            cfg.window, cfg.channels
        )));
    }
    if inputs.static_features.shape() != [n, cfg.static_dim()] {
        return Err(Error::invalid(format!(
            "static features {:?}, expected [{n}, {}]",
            inputs.static_features.shape(),
            cfg.static_dim()
        )));
    }
    let (b, t, d) = (xs[0], xs[1], cfg.d_model);
    let feats = g.constant(inputs.static_features.clone());
    let e_id = encode_identity(g, p, feats, inputs.grades.clone())?;

    let x = g.constant(inputs.x.clone());
    let h0 = g.matmul(x, p.get("in.w")?)?;
    let h0 = g.add(h0, p.get("in.b")?)?;

    let h_edge = match cfg.topology.edge_features {
        EdgeFeatureSource::LastStep => {
            let last = g.slice(h0, 1, t - 1, 1)?;
            g.reshape(last, &[b, n, d])?
        }
        EdgeFeatureSource::WindowMean => g.mean(h0, 1, false)?,
    };
    let edges = edge_weights(g, p, h_edge, inputs.graph, &cfg.topology)?;
    let stack = diffuse(g, h0, edges.w_norm, &inputs.graph.csr, cfg.diffusion_steps, cfg.lambda)?;
    let aggregate = signed_aggregate(g, p, &stack, cfg.heads, cfg.aggregation_mode)?;
    let gated = fuse_and_gate(g, p, aggregate.z, &stack, e_id, cfg.fusion_mode)?;
    let y_hat = forecast_head(g, p, gated.z_hat, cfg.horizon, cfg.channels)?;
    Ok(Forward { e_id, h0, edges, stack, aggregate, gated, y_hat })
}

/// `sum(mask |y_hat - y|) / max(sum(mask), 1)`.
pub fn masked_mae(g: &mut Graph, y_hat: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.shape(y_hat) != target.shape() || target.shape() != mask.shape() {
        return Err(Error::invalid(format!(
            "loss shapes differ: prediction {:?}, target {:?}, mask {:?}",
            g.shape(y_hat),
            target.shape(),
            mask.shape()
        )));
    }
    let count: f64 = mask.data().iter().sum();
    let y = g.constant(target.clone());
    let m = g.constant(mask.clone());
    let diff = g.sub(y_hat, y)?;
    let err = g.abs(diff);
    let err = g.mul(err, m)?;
    let total = g.sum_all(err);
    Ok(g.scale(total, 1.0 / count.max(1.0)))
}

/// Forward pass without gradients; returns the standardized forecast.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, inputs: ModelInputs<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = forward(&mut g, &p, cfg, inputs)?;
    Ok(g.value(out.y_hat).clone())
}

/// Identity embeddings `(N × D)` for the given static rows.
pub fn identity_embeddings(params: &ModelParams, static_features: &Tensor, grades: &Arc<Vec<usize>>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(static_features.clone());
    let e = encode_identity(&mut g, &p, f, grades.clone())?;
    Ok(g.value(e).clone())
}
