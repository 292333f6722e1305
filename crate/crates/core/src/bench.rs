//! Forward-pass scaling benchmark over synthetic station sets.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::NUM_GRADES;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::model::{init_params, predict, ModelConfig, ModelInputs};
use crate::tensor::Tensor;
use crate::topology::{GraphTensors, HybridGraph, TopologyConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub edges: usize,
    pub build_ms: f64,
    pub forward_ms: f64,
    /// Peak resident set of the process so far, when the platform exposes it.
    pub peak_rss_kb: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repeats: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Candidate neighbors per node, split two thirds geographic.
    pub k: usize,
    pub window: usize,
    pub repeats: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl BenchConfig {
    /// Small model suitable for timing on a desk machine.
    pub fn new(sizes: Vec<usize>, k: usize, window: usize, repeats: usize, seed: u64) -> Self {
        let k_geo = (2 * k).div_ceil(3);
        let model = ModelConfig {
            d_model: 16,
            id_dim: 16,
            id_hidden: 16,
            heads: 2,
            edge_hidden: 8,
            head_hidden: 32,
            window,
            horizon: 2,
            topology: TopologyConfig { k_geo, k_sem: k - k_geo, k_max: k as f64, ..Default::default() },
            ..Default::default()
        };
        BenchConfig { sizes, k, window, repeats, seed, model }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::invalid(format!("slope needs at least 3 points, got {}", x.len().min(y.len()))));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("sizes must differ"));
    }
    Ok(sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// Synthetic graph and inputs for `n` stations.
pub struct BenchInstance {
    pub graph: GraphTensors,
    pub x: Tensor,
    pub feats: Tensor,
    pub grades: Arc<Vec<usize>>,
    pub build_ms: f64,
}

pub fn bench_instance(cfg: &BenchConfig, n: usize) -> Result<BenchInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
    let m = &cfg.model;
    let points: Vec<GeoPoint> = (0..n)
        .map(|_| GeoPoint { lat: rng.random_range(-60.0..60.0), lon: rng.random_range(-180.0..180.0) })
        .collect();
    let f = m.static_dim();
    let feats: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let keys: Vec<Vec<f64>> = feats.chunks(f).map(<[f64]>::to_vec).collect();
    let start = Instant::now();
    let graph = HybridGraph::build(&points, &keys, &m.topology)?;
    let build_ms = start.elapsed().as_secs_f64() * 1e3;
    let xn = m.window * n * m.channels;
    Ok(BenchInstance {
        graph: GraphTensors::new(&graph),
        x: Tensor::new(vec![1, m.window, n, m.channels], (0..xn).map(|_| rng.random_range(-2.0..2.0)).collect())?,
        feats: Tensor::new(vec![n, f], feats)?,
        grades: Arc::new((0..n).map(|_| rng.random_range(0..NUM_GRADES)).collect()),
        build_ms,
    })
}

/// Times the full forward pass for every size: one warm-up, then the median
/// of `repeats` runs.
pub fn run_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.len() < 3 {
        return Err(Error::invalid("scaling fit needs at least 3 station counts"));
    }
    if cfg.sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("station counts must be strictly increasing"));
    }
    if cfg.repeats < 5 {
        return Err(Error::invalid("at least 5 repeats are required"));
    }
    let params = init_params(&cfg.model, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for &n in &cfg.sizes {
        let inst = bench_instance(cfg, n)?;
        let inputs = ModelInputs { x: &inst.x, static_features: &inst.feats, grades: &inst.grades, graph: &inst.graph };
        predict(&params, &cfg.model, inputs)?;
        let times: Vec<f64> = (0..cfg.repeats)
            .map(|_| -> Result<f64> {
                let t0 = Instant::now();
                predict(&params, &cfg.model, inputs)?;
                Ok(t0.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Result<_>>()?;
        let row = BenchRow {
            n,
            k: cfg.k,
            edges: inst.graph.num_edges(),
            build_ms: inst.build_ms,
            forward_ms: median(times),
            peak_rss_kb: peak_rss_kb(),
        };
        log::info!("bench n={} edges={} forward={:.2} ms", row.n, row.edges, row.forward_ms);
        rows.push(row);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.forward_ms).collect();
    let slope = loglog_slope(&xs, &ys)?;
    Ok(BenchReport { rows, repeats: cfg.repeats, slope })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,k,edges,build_ms,forward_ms,peak_rss_kb\n");
        for r in &self.rows {
            let rss = r.peak_rss_kb.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.3},{:.3},{rss}", r.n, r.k, r.edges, r.build_ms, r.forward_ms);
        }
        s
    }

    /// Two columns, `ln N` and `ln ms`.
    pub fn to_loglog(&self) -> String {
        let mut s = format!("# slope {:.4}\n", self.slope);
        for r in &self.rows {
            let _ = writeln!(s, "{:.6} {:.6}", (r.n as f64).ln(), r.forward_ms.ln());
        }
        s
    }

    pub fn write(&self, csv_path: &Path, loglog_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        std::fs::write(loglog_path, self.to_loglog()).map_err(|e| Error::io(loglog_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_timings_fit_slope_one() {
        let x = [1024.0, 2048.0, 4096.0, 8192.0];
        let y: Vec<f64> = x.iter().map(|v| 0.37 * v).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.0).abs() < 1e-9);
        assert!(loglog_slope(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn refuses_too_few_sizes() {
        assert!(run_scaling(&BenchConfig::new(vec![32, 64], 3, 4, 5, 1)).is_err());
        assert!(run_scaling(&BenchConfig::new(vec![32, 64, 128], 3, 4, 4, 1)).is_err());
    }

    #[test]
    fn edge_count_is_n_times_k() {
        let cfg = BenchConfig::new(vec![40, 80, 160], 6, 3, 5, 2);
        let report = run_scaling(&cfg).unwrap();
        for r in &report.rows {
            assert_eq!(r.edges, r.n * 6);
        }
        assert!(report.to_csv().lines().count() == 4);
        assert_eq!(report.to_loglog().lines().count(), 4);
    }
}
