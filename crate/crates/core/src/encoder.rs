//! Station identity encoding from observable attributes.
//!
//! The identity vector of a station is an MLP over its Fourier-mapped
//! coordinates, neighborhood pollution statistics, standardized static
//! attributes and a learned embedding of its pollution grade. Nothing in the
//! pipeline is indexed by station, so the same weights encode stations that
//! were not present during training.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_unchecked, GeoPoint, Neighbor};
use crate::tensor::{BoundParams, Graph, Tensor, Var};

/// Number of pollution grades.
pub const NUM_GRADES: usize = 6;
/// Static attributes per station, in file order.
pub const NUM_GEO_FEATURES: usize = 6;
/// Length of the neighborhood context vector.
pub const CONTEXT_DIM: usize = 4 + NUM_GRADES;

pub const GEO_FEATURE_NAMES: [&str; NUM_GEO_FEATURES] = [
    "elevation",
    "climate_avg_wind",
    "climate_avg_wind_dir",
    "terrain_tpi",
    "terrain_roughness",
    "distance_to_coast_km",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub id: String,
    pub point: GeoPoint,
    pub geo_feats: [f64; NUM_GEO_FEATURES],
    pub grade: usize,
}

impl StationMeta {
    pub fn validate(&self) -> Result<()> {
        self.point.validate()?;
        if self.geo_feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("station {}: non-finite static attribute", self.id)));
        }
        if self.grade >= NUM_GRADES {
            return Err(Error::invalid(format!(
                "station {}: grade {} outside 0..{}",
                self.id,
                self.grade,
                NUM_GRADES - 1
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fourier coordinate features

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FourierMode {
    /// Frequencies `f0 * 2^j`, j = 0..M-1, applied per coordinate.
    DeterministicGeometric { f0: f64 },
    /// M random 2-d frequencies drawn from N(0, bandwidth^2 I).
    GaussianRandom { bandwidth: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub levels: usize,
    #[serde(flatten)]
    pub mode: FourierMode,
}

impl Default for FourierConfig {
    fn default() -> Self {
        FourierConfig {
            levels: 8,
            mode: FourierMode::DeterministicGeometric { f0: 1.0 },
        }
    }
}

impl FourierConfig {
    pub fn output_dim(&self) -> usize {
        match self.mode {
            FourierMode::DeterministicGeometric { .. } => 4 * self.levels,
            FourierMode::GaussianRandom { .. } => 2 * self.levels,
        }
    }
}

/// Precomputed Fourier feature map.
#[derive(Debug, Clone)]
pub struct FourierEncoder {
    cfg: FourierConfig,
    /// Gaussian mode only: one 2-d frequency per level.
    freqs: Vec<[f64; 2]>,
}

impl FourierEncoder {
    pub fn new(cfg: FourierConfig) -> Result<Self> {
        if cfg.levels == 0 {
            return Err(Error::invalid("Fourier levels must be positive"));
        }
        let freqs = match cfg.mode {
            FourierMode::DeterministicGeometric { f0 } => {
                if !(f0 > 0.0) {
                    return Err(Error::invalid("Fourier base frequency must be positive"));
                }
                Vec::new()
            }
            FourierMode::GaussianRandom { bandwidth, seed } => {
                let normal = Normal::new(0.0, bandwidth)
                    .map_err(|e| Error::invalid(format!("Fourier bandwidth: {e}")))?;
                if !(bandwidth > 0.0) {
                    return Err(Error::invalid("Fourier bandwidth must be positive"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..cfg.levels)
                    .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
                    .collect()
            }
        };
        Ok(FourierEncoder { cfg, freqs })
    }

    pub fn config(&self) -> &FourierConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    /// Features of a geographic point, normalized to `(lat/90, lon/180)`.
    pub fn encode(&self, p: GeoPoint) -> Vec<f64> {
        self.encode_normalized([p.lat / 90.0, p.lon / 180.0])
    }

    /// Features of an already-normalized 2-d coordinate. Unit norm.
    pub fn encode_normalized(&self, v: [f64; 2]) -> Vec<f64> {
        let m = self.cfg.levels;
        match self.cfg.mode {
            FourierMode::DeterministicGeometric { f0 } => {
                let scale = 1.0 / ((2 * m) as f64).sqrt();
                let mut out = Vec::with_capacity(4 * m);
                for j in 0..m {
                    let w = 2.0 * PI * f0 * (1u64 << j.min(62)) as f64;
                    let (s0, c0) = (w * v[0]).sin_cos();
                    let (s1, c1) = (w * v[1]).sin_cos();
                    out.extend_from_slice(&[s0 * scale, s1 * scale, c0 * scale, c1 * scale]);
                }
                out
            }
            FourierMode::GaussianRandom { .. } => {
                let scale = 1.0 / (m as f64).sqrt();
                let mut out = vec![0.0; 2 * m];
                for (j, b) in self.freqs.iter().enumerate() {
                    let (s, c) = (2.0 * PI * (b[0] * v[0] + b[1] * v[1])).sin_cos();
                    out[j] = c * scale;
                    out[m + j] = s * scale;
                }
                out
            }
        }
    }
}

/// One-off convenience over [`FourierEncoder`].
pub fn fourier_map(p: GeoPoint, cfg: &FourierConfig) -> Result<Vec<f64>> {
    p.validate()?;
    Ok(FourierEncoder::new(*cfg)?.encode(p))
}

// ---------------------------------------------------------------------------
// Neighborhood context

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborContext {
    pub mu_nbr: f64,
    pub sigma_nbr: f64,
    /// Kilometers from the station to the pollution-weighted centroid.
    pub delta_c: f64,
    pub delta_self: f64,
    pub level_dist: [f64; NUM_GRADES],
    pub centroid: GeoPoint,
    /// Set when no neighbor had training data and global means were used.
    pub fallback: bool,
}

impl NeighborContext {
    pub fn features(&self) -> [f64; CONTEXT_DIM] {
        let mut f = [0.0; CONTEXT_DIM];
        f[0] = self.mu_nbr;
        f[1] = self.sigma_nbr;
        f[2] = self.delta_c;
        f[3] = self.delta_self;
        f[4..].copy_from_slice(&self.level_dist);
        f
    }

    /// Most frequent neighbor grade, lowest grade on ties.
    pub fn dominant_grade(&self) -> usize {
        let mut best = 0;
        for (g, &p) in self.level_dist.iter().enumerate() {
            if p > self.level_dist[best] {
                best = g;
            }
        }
        best
    }
}

fn wrap_lon_delta(d: f64) -> f64 {
    let mut d = d % 360.0;
    if d >= 180.0 {
        d -= 360.0;
    } else if d < -180.0 {
        d += 360.0;
    }
    d
}

/// Neighborhood statistics of station `i`.
///
/// `station_means[j]` is the training-split mean of station j's first channel
/// (`None` without valid data). `global_mean`/`global_std` summarize the
/// available station means and stand in when no neighbor has data.
pub fn neighbor_context(
    i: usize,
    stations: &[StationMeta],
    station_means: &[Option<f64>],
    neighbors: &[Neighbor],
    global_mean: f64,
    global_std: f64,
) -> NeighborContext {
    let me = stations[i].point;
    let mut level_dist = [0.0; NUM_GRADES];
    for n in neighbors {
        level_dist[stations[n.index].grade] += 1.0;
    }
    let total = neighbors.len().max(1) as f64;
    level_dist.iter_mut().for_each(|v| *v /= total);
    if neighbors.is_empty() {
        level_dist = [1.0 / NUM_GRADES as f64; NUM_GRADES];
    }

    let observed: Vec<(f64, GeoPoint)> = neighbors
        .iter()
        .filter_map(|n| station_means[n.index].map(|c| (c, stations[n.index].point)))
        .collect();
    let own = station_means[i];

    if observed.is_empty() {
        log::warn!(
            "station {}: no neighbor has training data; using global context",
            stations[i].id
        );
        return NeighborContext {
            mu_nbr: global_mean,
            sigma_nbr: global_std,
            delta_c: 0.0,
            delta_self: own.map_or(0.0, |c| c - global_mean),
            level_dist,
            centroid: me,
            fallback: true,
        };
    }

    let k = observed.len() as f64;
    let mu = observed.iter().map(|(c, _)| c).sum::<f64>() / k;
    let var = observed.iter().map(|(c, _)| (c - mu) * (c - mu)).sum::<f64>() / k;
    let weight_sum: f64 = observed.iter().map(|(c, _)| c).sum();
    let weighted = weight_sum > 0.0 && observed.iter().all(|(c, _)| *c >= 0.0);
    let (mut lat, mut dlon) = (0.0, 0.0);
    for (c, p) in &observed {
        let w = if weighted { c / weight_sum } else { 1.0 / k };
        lat += w * p.lat;
        dlon += w * wrap_lon_delta(p.lon - me.lon);
    }
    let centroid = GeoPoint {
        lat: lat.clamp(-90.0, 90.0),
        lon: wrap_lon_delta(me.lon + dlon),
    };
    NeighborContext {
        mu_nbr: mu,
        sigma_nbr: var.sqrt(),
        delta_c: haversine_unchecked(me, centroid),
        delta_self: own.map_or(0.0, |c| c - mu),
        level_dist,
        centroid,
        fallback: false,
    }
}

/// Context for a station without history, borrowed from the nearest anchor.
/// Returns the anchor index alongside the context.
pub fn anchor_context(p_new: GeoPoint, anchors: &[(GeoPoint, NeighborContext)]) -> Result<(usize, NeighborContext)> {
    p_new.validate()?;
    let mut best: Option<(f64, usize)> = None;
    for (j, (p, _)) in anchors.iter().enumerate() {
        let d = haversine_unchecked(p_new, *p);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    let (_, j) = best.ok_or_else(|| Error::invalid("anchor_context needs at least one anchor"))?;
    let src = &anchors[j].1;
    Ok((
        j,
        NeighborContext {
            delta_self: 0.0,
            delta_c: haversine_unchecked(p_new, src.centroid),
            ..src.clone()
        },
    ))
}

// ---------------------------------------------------------------------------
// Identity features and MLP

/// Standardization constants for the static inputs, fit on training stations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticFeatureStats {
    pub context_mean: [f64; 4],
    pub context_std: [f64; 4],
    pub geo_mean: [f64; NUM_GEO_FEATURES],
    pub geo_std: [f64; NUM_GEO_FEATURES],
}

fn mean_std<const K: usize>(rows: &[[f64; K]]) -> ([f64; K], [f64; K]) {
    let mut mean = [0.0; K];
    let mut std = [1.0; K];
    if rows.is_empty() {
        return (mean, std);
    }
    let n = rows.len() as f64;
    for k in 0..K {
        mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
        std[k] = var.sqrt().max(1e-6);
    }
    (mean, std)
}

impl StaticFeatureStats {
    pub fn fit(stations: &[StationMeta], contexts: &[NeighborContext]) -> Self {
        let ctx: Vec<[f64; 4]> = contexts
            .iter()
            .map(|c| [c.mu_nbr, c.sigma_nbr, c.delta_c, c.delta_self])
            .collect();
        let geo: Vec<[f64; NUM_GEO_FEATURES]> = stations.iter().map(|s| s.geo_feats).collect();
        let (context_mean, context_std) = mean_std(&ctx);
        let (geo_mean, geo_std) = mean_std(&geo);
        StaticFeatureStats {
            context_mean,
            context_std,
            geo_mean,
            geo_std,
        }
    }
}

/// Pre-MLP feature row: Fourier features, standardized context, standardized
/// static attributes. The grade enters separately through its embedding.
pub fn static_features(
    fourier: &FourierEncoder,
    meta: &StationMeta,
    ctx: &NeighborContext,
    stats: &StaticFeatureStats,
) -> Vec<f64> {
    let mut row = fourier.encode(meta.point);
    let cf = ctx.features();
    for k in 0..4 {
        row.push((cf[k] - stats.context_mean[k]) / stats.context_std[k]);
    }
    row.extend_from_slice(&cf[4..]);
    for k in 0..NUM_GEO_FEATURES {
        row.push((meta.geo_feats[k] - stats.geo_mean[k]) / stats.geo_std[k]);
    }
    row
}

/// Vector used for semantic neighbor search: the static features plus a
/// one-hot grade. Fixed at graph construction time.
pub fn semantic_key(static_row: &[f64], grade: usize) -> Vec<f64> {
    let mut key = static_row.to_vec();
    let mut one_hot = [0.0; NUM_GRADES];
    one_hot[grade] = 1.0;
    key.extend_from_slice(&one_hot);
    key
}

/// Runs the identity MLP: `W2 tanh(W1 [x ‖ psi(grade)] + b1) + b2`.
///
/// `features` is `(N × F)`; parameters `id.w1`, `id.b1`, `id.w2`, `id.b2` and
/// the grade table `id.grade` must be bound.
pub fn encode_identity(
    g: &mut Graph,
    p: &BoundParams,
    features: Var,
    grades: Arc<Vec<usize>>,
) -> Result<Var> {
    let table = p.get("id.grade")?;
    let w1 = p.get("id.w1")?;
    let fs = g.shape(features).to_vec();
    if fs.len() != 2 || fs[0] != grades.len() {
        return Err(Error::invalid(format!(
            "identity features {fs:?} for {} grades",
            grades.len()
        )));
    }
    let grade_dim = g.shape(table)[1];
    if fs[1] + grade_dim != g.shape(w1)[0] {
        return Err(Error::invalid(format!(
            "identity input width {} + {grade_dim} does not match id.w1 {:?}",
            fs[1],
            g.shape(w1)
        )));
    }
    if let Some(&bad) = grades.iter().find(|&&l| l >= NUM_GRADES) {
        return Err(Error::invalid(format!("grade {bad} out of range")));
    }
    let psi = g.gather(table, 0, grades)?;
    let x = g.concat(&[features, psi], 1)?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, p.get("id.b1")?)?;
    let h = g.tanh(h);
    let e = g.matmul(h, p.get("id.w2")?)?;
    g.add(e, p.get("id.b2")?)
}

/// Plain-f64 identity MLP on a full input vector (grade embedding already
/// concatenated); used by the stability checks.
pub fn identity_mlp_apply(w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, x: &[f64]) -> Vec<f64> {
    let (n_in, hidden) = (w1.shape()[0], w1.shape()[1]);
    let out_dim = w2.shape()[1];
    debug_assert_eq!(x.len(), n_in);
    let mut h = b1.data().to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for j in 0..hidden {
            h[j] += xk * w1.data()[k * hidden + j];
        }
    }
    h.iter_mut().for_each(|v| *v = v.tanh());
    let mut out = b2.data().to_vec();
    for (k, &hk) in h.iter().enumerate() {
        for j in 0..out_dim {
            out[j] += hk * w2.data()[k * out_dim + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EARTH_RADIUS_KM;
    use crate::tensor::ModelParams;
    use proptest::prelude::*;

    fn station(id: &str, lat: f64, lon: f64, grade: usize) -> StationMeta {
        StationMeta {
            id: id.into(),
            point: GeoPoint { lat, lon },
            geo_feats: [0.0; NUM_GEO_FEATURES],
            grade,
        }
    }

    fn nb(index: usize) -> Neighbor {
        Neighbor { index, km: 0.0 }
    }

    #[test]
    fn origin_maps_to_cosines() {
        for m in [1, 3, 8] {
            let cfg = FourierConfig { levels: m, ..Default::default() };
            let f = fourier_map(GeoPoint { lat: 0.0, lon: 0.0 }, &cfg).unwrap();
            assert_eq!(f.len(), 4 * m);
            let c = 1.0 / ((2 * m) as f64).sqrt();
            for j in 0..m {
                assert_eq!(f[4 * j], 0.0);
                assert_eq!(f[4 * j + 1], 0.0);
                assert!((f[4 * j + 2] - c).abs() < 1e-15);
                assert!((f[4 * j + 3] - c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_levels_rejected() {
        let cfg = FourierConfig { levels: 0, ..Default::default() };
        assert!(FourierEncoder::new(cfg).is_err());
    }

    #[test]
    fn gaussian_dims_and_kernel_symmetry() {
        let cfg = FourierConfig {
            levels: 64,
            mode: FourierMode::GaussianRandom { bandwidth: 1.0, seed: 5 },
        };
        let enc = FourierEncoder::new(cfg).unwrap();
        let x = enc.encode_normalized([0.1, -0.3]);
        let y = enc.encode_normalized([-0.2, 0.4]);
        assert_eq!(x.len(), 128);
        let xy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yx: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(xy, yx);
    }

    proptest! {
        #[test]
        fn fourier_features_have_unit_norm(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0, m in 1usize..12, gaussian in any::<bool>()) {
            let mode = if gaussian {
                FourierMode::GaussianRandom { bandwidth: 2.0, seed: 9 }
            } else {
                FourierMode::DeterministicGeometric { f0: 1.0 }
            };
            let f = fourier_map(GeoPoint { lat, lon }, &FourierConfig { levels: m, mode }).unwrap();
            let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_neighborhood() {
        let st = vec![station("a", 0.0, 0.0, 1), station("b", 0.0, 1.0, 2), station("c", 0.0, -1.0, 2)];
        let means = vec![Some(10.0), Some(10.0), Some(10.0)];
        let ctx = neighbor_context(0, &st, &means, &[nb(1), nb(2)], 0.0, 1.0);
        assert_eq!(ctx.mu_nbr, 10.0);
        assert_eq!(ctx.sigma_nbr, 0.0);
        assert_eq!(ctx.delta_self, 0.0);
        assert!(ctx.delta_c < 1e-9, "symmetric neighbors put the centroid on the station");
        assert_eq!(ctx.level_dist, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_centroid_offset() {
        let st = vec![station("a", 0.0, 0.0, 0), station("b", 0.0, -1.0, 1), station("c", 0.0, 1.0, 3)];
        let means = vec![Some(7.0), Some(5.0), Some(15.0)];
        let ctx = neighbor_context(0, &st, &means, &[nb(1), nb(2)], 0.0, 1.0);
        // Centroid at (5 * -1 + 15 * 1) / 20 = +0.5 degrees of longitude.
        assert!((ctx.centroid.lon - 0.5).abs() < 1e-12);
        let expected = 0.5 * std::f64::consts::PI * EARTH_RADIUS_KM / 180.0;
        assert!((ctx.delta_c - expected).abs() < 1e-9);
        assert!((ctx.delta_c - 55.6).abs() < 0.05);
        assert_eq!(ctx.mu_nbr, 10.0);
        assert_eq!(ctx.sigma_nbr, 5.0);
        assert_eq!(ctx.delta_self, -3.0);
        assert_eq!(ctx.level_dist, [0.0, 0.5, 0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn grade_changes_only_touch_level_dist() {
        let mut st = vec![station("a", 0.0, 0.0, 0), station("b", 0.0, -1.0, 1), station("c", 1.0, 1.0, 3)];
        let means = vec![Some(7.0), Some(5.0), Some(15.0)];
        let before = neighbor_context(0, &st, &means, &[nb(1), nb(2)], 0.0, 1.0);
        st[2].grade = 5;
        let after = neighbor_context(0, &st, &means, &[nb(1), nb(2)], 0.0, 1.0);
        assert_eq!(before.mu_nbr, after.mu_nbr);
        assert_eq!(before.sigma_nbr, after.sigma_nbr);
        assert_eq!(before.delta_c, after.delta_c);
        assert_ne!(before.level_dist, after.level_dist);
        assert!((after.level_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_neighbors_fall_back_to_global() {
        let st = vec![station("a", 0.0, 0.0, 0), station("b", 0.0, 1.0, 1)];
        let ctx = neighbor_context(0, &st, &[Some(3.0), None], &[nb(1)], 8.0, 2.0);
        assert!(ctx.fallback);
        assert_eq!(ctx.mu_nbr, 8.0);
        assert_eq!(ctx.delta_c, 0.0);
        assert_eq!(ctx.delta_self, -5.0);
    }

    fn ctx_with_mu(mu: f64, at: GeoPoint) -> NeighborContext {
        NeighborContext {
            mu_nbr: mu,
            sigma_nbr: 1.0,
            delta_c: 3.0,
            delta_self: 2.0,
            level_dist: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            centroid: at,
            fallback: false,
        }
    }

    #[test]
    fn anchor_rules() {
        let a = GeoPoint { lat: 0.0, lon: 0.0 };
        let b = GeoPoint { lat: 0.0, lon: 2.0 };
        let anchors = vec![(a, ctx_with_mu(5.0, a)), (b, ctx_with_mu(20.0, b))];
        let (j, c) = anchor_context(a, &anchors).unwrap();
        assert_eq!(j, 0);
        assert_eq!(c.mu_nbr, 5.0);
        assert_eq!(c.delta_self, 0.0);
        assert_eq!(c.delta_c, 0.0);
        // Equidistant: lower index wins.
        let (j, _) = anchor_context(GeoPoint { lat: 0.0, lon: 1.0 }, &anchors).unwrap();
        assert_eq!(j, 0);
        let (j, c) = anchor_context(GeoPoint { lat: 0.0, lon: 0.6 }, &anchors).unwrap();
        assert_eq!((j, c.mu_nbr), (0, 5.0));
        assert!(anchor_context(a, &[]).is_err());
    }

    fn identity_params(in_dim: usize, hidden: usize, out: usize, fill: impl Fn(usize) -> f64) -> ModelParams {
        let mut p = ModelParams::new();
        let mk = |shape: Vec<usize>, off: usize| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|i| fill(i + off)).collect()).unwrap()
        };
        p.insert("id.grade", mk(vec![NUM_GRADES, 2], 0)).unwrap();
        p.insert("id.w1", mk(vec![in_dim + 2, hidden], 100)).unwrap();
        p.insert("id.b1", mk(vec![hidden], 200)).unwrap();
        p.insert("id.w2", mk(vec![hidden, out], 300)).unwrap();
        p.insert("id.b2", mk(vec![out], 400)).unwrap();
        p
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let p = identity_params(3, 4, 5, |_| 0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let e = encode_identity(&mut g, &b, x, Arc::new(vec![0, 4])).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_identical_embeddings_and_width_check() {
        let p = identity_params(3, 4, 5, |i| ((i * 7919) % 13) as f64 * 0.1 - 0.6);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.1, 0.3, -0.2, 0.1]).unwrap());
        let e = encode_identity(&mut g, &b, x, Arc::new(vec![2, 2])).unwrap();
        let d = g.value(e).data();
        assert_eq!(&d[..5], &d[5..]);
        // Plain evaluation agrees with the tape.
        let mut full = vec![0.3, -0.2, 0.1];
        full.extend_from_slice(&p.get("id.grade").unwrap().data()[4..6]);
        let plain = identity_mlp_apply(
            p.get("id.w1").unwrap(),
            p.get("id.b1").unwrap(),
            p.get("id.w2").unwrap(),
            p.get("id.b2").unwrap(),
            &full,
        );
        for (a, b) in plain.iter().zip(&d[..5]) {
            assert!((a - b).abs() < 1e-14);
        }
        let wrong = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(encode_identity(&mut g, &b, wrong, Arc::new(vec![0, 0])).is_err());
    }
}
