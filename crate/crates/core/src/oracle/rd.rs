//! Graph reaction-diffusion simulator used to generate synthetic datasets
//! with known dynamics.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{SeriesFrame, NUM_CHANNELS};
use crate::encoder::{StationMeta, NUM_GRADES};
use crate::error::{Error, Result};
use crate::geo::{gaussian_static_weight, knn_geo, GeoPoint};

/// When a source emits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Always,
    /// On for `on` steps out of every `period`, shifted by `phase`.
    Periodic { period: usize, on: usize, phase: usize },
}

impl Schedule {
    pub fn active(&self, t: usize) -> bool {
        match *self {
            Schedule::Always => true,
            Schedule::Periodic { period, on, phase } => period > 0 && (t + phase) % period < on,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub node: usize,
    pub amplitude: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdScenario {
    pub n: usize,
    /// South-west corner and size of the station patch, degrees.
    pub lat0: f64,
    pub lon0: f64,
    pub span_deg: f64,
    pub k: usize,
    pub kappa_km: f64,
    pub diffusion: f64,
    pub decay: f64,
    pub dt: f64,
    /// Constant emission at every node.
    pub background: f64,
    /// Explicit sources; when empty, `random_sources` are drawn from the seed.
    pub sources: Vec<Source>,
    pub random_sources: usize,
    pub steps: usize,
    pub noise_std: f64,
    pub missing_prob: f64,
    /// Scale of channels 1..6 relative to the first, each lagged one step.
    pub channel_scales: [f64; NUM_CHANNELS - 1],
    /// Disables the Laplacian term (pure reaction).
    pub laplacian: bool,
    /// Initial concentration; `None` starts at `background / decay`.
    pub initial: Option<f64>,
    pub seed: u64,
    pub start: NaiveDate,
}

impl Default for RdScenario {
    fn default() -> Self {
        RdScenario {
            n: 20,
            lat0: 30.0,
            lon0: 110.0,
            span_deg: 2.0,
            k: 6,
            kappa_km: 100.0,
            diffusion: 0.03,
            decay: 0.05,
            dt: 1.0,
            background: 1.0,
            sources: Vec::new(),
            random_sources: 3,
            steps: 400,
            noise_std: 0.5,
            missing_prob: 0.02,
            channel_scales: [1.5, 0.8, 0.6, 0.3, 0.05],
            laplacian: true,
            initial: None,
            seed: 7,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
        }
    }
}

/// Symmetric weighted graph and its combinatorial Laplacian `D - A`.
#[derive(Debug, Clone, PartialEq)]
pub struct RdGraph {
    /// Row-sparse adjacency: `(neighbor, weight)` per node, ascending neighbor.
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl RdGraph {
    /// Geographic k-NN with Gaussian weights, symmetrized by taking the union.
    pub fn build(points: &[GeoPoint], k: usize, kappa_km: f64) -> Result<Self> {
        let n = points.len();
        let mut dense: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        if n > 1 && k > 0 {
            for (i, nbrs) in knn_geo(points, k.min(n - 1))?.into_iter().enumerate() {
                for nb in nbrs {
                    let w = gaussian_static_weight(nb.km, kappa_km)?;
                    dense[i].insert(nb.index, w);
                    dense[nb.index].insert(i, w);
                }
            }
        }
        Ok(RdGraph { adjacency: dense.into_iter().map(|m| m.into_iter().collect()).collect() })
    }

    pub fn max_row_sum(&self) -> f64 {
        self.adjacency
            .iter()
            .map(|r| r.iter().map(|(_, w)| w).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `(L c)_i = sum_j A_ij (c_i - c_j)`.
    pub fn laplacian_apply(&self, c: &[f64], out: &mut [f64]) {
        for (i, row) in self.adjacency.iter().enumerate() {
            out[i] = row.iter().map(|&(j, w)| w * (c[i] - c[j])).sum();
        }
    }
}

/// Concentrations over time plus what generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct RdOutput {
    pub stations: Vec<StationMeta>,
    pub frame: SeriesFrame,
    /// Noise-free first channel, `steps × N`.
    pub clean: Vec<Vec<f64>>,
    pub sources: Vec<Source>,
    pub graph: RdGraph,
}

/// Checks `dt (D * 2 max_row_sum + decay) < 1`.
pub fn check_stability(s: &RdScenario, graph: &RdGraph) -> Result<()> {
    let lap = if s.laplacian { s.diffusion * 2.0 * graph.max_row_sum() } else { 0.0 };
    let bound = s.dt * (lap + s.decay);
    if !(bound < 1.0) {
        return Err(Error::invalid(format!(
            "explicit Euler unstable: dt * (D * 2 * max_row_sum + decay) = {bound:.4} must be < 1"
        )));
    }
    Ok(())
}

/// One explicit Euler step `c + dt (-D L c + s - decay c)`, evaluated as
/// `(1 - dt decay) c + dt (s - D L c)`.
pub fn rd_step(graph: &RdGraph, c: &[f64], source: &[f64], s: &RdScenario, scratch: &mut [f64]) -> Vec<f64> {
    if s.laplacian {
        graph.laplacian_apply(c, scratch);
    } else {
        scratch.iter_mut().for_each(|v| *v = 0.0);
    }
    c.iter()
        .zip(scratch.iter())
        .zip(source)
        .map(|((&ci, &li), &si)| (1.0 - s.dt * s.decay) * ci + s.dt * (si - s.diffusion * li))
        .collect()
}

fn station_meta(rng: &mut ChaCha8Rng, points: &[GeoPoint], means: &[f64]) -> Vec<StationMeta> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut grade = vec![0; points.len()];
    for (rank, &i) in order.iter().enumerate() {
        grade[i] = (rank * NUM_GRADES / points.len().max(1)).min(NUM_GRADES - 1);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, &point)| StationMeta {
            id: format!("S{i:04}"),
            point,
            geo_feats: [
                rng.random_range(0.0..2000.0),
                rng.random_range(1.0..8.0),
                rng.random_range(0.0..360.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(0.0..50.0),
                rng.random_range(0.0..500.0),
            ],
            grade: grade[i],
        })
        .collect()
}

pub fn simulate_rd(s: &RdScenario) -> Result<RdOutput> {
    if s.n == 0 || s.steps == 0 {
        return Err(Error::invalid("scenario needs at least one station and one step"));
    }
    if !(s.dt > 0.0 && s.diffusion >= 0.0 && s.decay >= 0.0 && s.noise_std >= 0.0) {
        return Err(Error::invalid("dt must be positive; diffusion, decay and noise non-negative"));
    }
    if !(0.0..1.0).contains(&s.missing_prob) {
        return Err(Error::invalid("missing_prob must be in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let points: Vec<GeoPoint> = (0..s.n)
        .map(|_| GeoPoint {
            lat: s.lat0 + rng.random_range(0.0..s.span_deg),
            lon: s.lon0 + rng.random_range(0.0..s.span_deg),
        })
        .collect();
    for p in &points {
        p.validate()?;
    }
    let graph = RdGraph::build(&points, s.k, s.kappa_km)?;
    check_stability(s, &graph)?;

    let sources: Vec<Source> = if s.sources.is_empty() {
        (0..s.random_sources.min(s.n))
            .map(|_| {
                let period = rng.random_range(7..31);
                Source {
                    node: rng.random_range(0..s.n),
                    amplitude: rng.random_range(5.0..20.0),
                    schedule: Schedule::Periodic { period, on: period / 2, phase: rng.random_range(0..period) },
                }
            })
            .collect()
    } else {
        s.sources.clone()
    };
    if let Some(bad) = sources.iter().find(|src| src.node >= s.n) {
        return Err(Error::invalid(format!("source node {} out of range", bad.node)));
    }

    let init = s.initial.unwrap_or(if s.decay > 0.0 { s.background / s.decay } else { 0.0 });
    let mut c = vec![init; s.n];
    let mut clean = Vec::with_capacity(s.steps);
    let mut scratch = vec![0.0; s.n];
    let mut emit = vec![0.0; s.n];
    for t in 0..s.steps {
        clean.push(c.clone());
        emit.iter_mut().for_each(|v| *v = s.background);
        for src in &sources {
            if src.schedule.active(t) {
                emit[src.node] += src.amplitude;
            }
        }
        c = rd_step(&graph, &c, &emit, s, &mut scratch);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Runtime(format!("simulation diverged at step {t}")));
        }
    }

    let means: Vec<f64> = (0..s.n).map(|i| clean.iter().map(|r| r[i]).sum::<f64>() / s.steps as f64).collect();
    let stations = station_meta(&mut rng, &points, &means);
    let timestamps = (0..s.steps).map(|t| s.start + Days::new(t as u64)).collect();
    let mut frame = SeriesFrame::empty(timestamps, stations.iter().map(|m| m.id.clone()).collect());
    let noise = Normal::new(0.0, s.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    for t in 0..s.steps {
        for i in 0..s.n {
            for ch in 0..NUM_CHANNELS {
                let (base, scale) = if ch == 0 { (clean[t][i], 1.0) } else { (clean[t.saturating_sub(1)][i], s.channel_scales[ch - 1]) };
                let eps = if s.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let missing = s.missing_prob > 0.0 && rng.random_bool(s.missing_prob);
                frame.set(t, i, ch, (!missing).then_some(scale * (base + eps)));
            }
        }
    }
    Ok(RdOutput { stations, frame, clean, sources, graph })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(s: RdScenario) -> RdScenario {
        RdScenario { noise_std: 0.0, missing_prob: 0.0, ..s }
    }

    #[test]
    fn mass_is_conserved_without_reaction() {
        let s = quiet(RdScenario {
            background: 0.0,
            decay: 0.0,
            random_sources: 0,
            initial: Some(0.0),
            sources: Vec::new(),
            steps: 500,
            ..Default::default()
        });
        // Start from a spike so diffusion is active.
        let out = simulate_rd(&RdScenario { initial: Some(1.0), ..s.clone() }).unwrap();
        let mut c = out.clean[0].clone();
        c[0] += 50.0;
        let zero = vec![0.0; s.n];
        let mut scratch = vec![0.0; s.n];
        let mut mass = c.iter().sum::<f64>();
        for _ in 0..500 {
            c = rd_step(&out.graph, &c, &zero, &s, &mut scratch);
            let m = c.iter().sum::<f64>();
            assert!((m - mass).abs() < 1e-9);
            mass = m;
        }
        assert!(c[0] < 50.0);
    }

    #[test]
    fn pure_decay_without_laplacian() {
        let s = quiet(RdScenario { laplacian: false, background: 0.0, random_sources: 0, initial: Some(3.0), ..Default::default() });
        let out = simulate_rd(&s).unwrap();
        for t in 1..10 {
            for i in 0..s.n {
                assert_eq!(out.clean[t][i], (1.0 - s.decay * s.dt) * out.clean[t - 1][i]);
            }
        }
    }

    #[test]
    fn uniform_state_is_stationary() {
        let s = quiet(RdScenario { background: 0.0, decay: 0.0, random_sources: 0, initial: Some(4.0), ..Default::default() });
        let out = simulate_rd(&s).unwrap();
        assert!(out.clean.iter().flatten().all(|&v| v == 4.0));
    }

    #[test]
    fn constant_source_reaches_steady_state_when_isolated() {
        let s = quiet(RdScenario {
            laplacian: false,
            background: 0.0,
            decay: 0.1,
            initial: Some(0.0),
            sources: vec![Source { node: 2, amplitude: 3.0, schedule: Schedule::Always }],
            steps: 400,
            ..Default::default()
        });
        let out = simulate_rd(&s).unwrap();
        assert!((out.clean[399][2] - 30.0).abs() < 1e-6);
        assert_eq!(out.clean[399][0], 0.0);
    }

    #[test]
    fn instability_is_rejected() {
        let s = RdScenario { diffusion: 10.0, ..Default::default() };
        let err = simulate_rd(&s).unwrap_err();
        assert!(err.to_string().contains("max_row_sum"));
    }

    #[test]
    fn deterministic_under_seed() {
        let s = RdScenario { steps: 50, ..Default::default() };
        assert_eq!(simulate_rd(&s).unwrap(), simulate_rd(&s).unwrap());
        let other = simulate_rd(&RdScenario { seed: 8, ..s.clone() }).unwrap();
        assert_ne!(other.frame, simulate_rd(&s).unwrap().frame);
    }

    #[test]
    fn extra_channels_are_scaled_lags() {
        let s = quiet(RdScenario { steps: 20, ..Default::default() });
        let out = simulate_rd(&s).unwrap();
        for t in 1..20 {
            for ch in 1..NUM_CHANNELS {
                let want = s.channel_scales[ch - 1] * out.clean[t - 1][3];
                assert_eq!(out.frame.get(t, 3, ch), Some(want));
            }
            assert_eq!(out.frame.get(t, 3, 0), Some(out.clean[t][3]));
        }
    }
}
