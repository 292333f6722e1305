//! Hybrid neighbor graph and input-conditioned edge weights.
//!
//! The edge *set* is built once (geographic k-NN plus semantic k-NN on fixed
//! station descriptors) and never changes. Edge *weights* are recomputed for
//! every input window: signed attention, a gate that mixes attention with the
//! distance kernel, a soft rank mask driven by a learned per-node threshold,
//! and absolute-sum normalization.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{gaussian_static_weight, haversine_unchecked, knn_geo, knn_query, GeoPoint};
use crate::tensor::{BoundParams, Csr, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Geo,
    Sem,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Geo => "geo",
            EdgeKind::Sem => "sem",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Neighbor whose state flows into the owning node.
    pub target: usize,
    pub kind: EdgeKind,
    pub w_static: f64,
    pub km: f64,
}

/// Which value orders edges for the rank mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    Absolute,
    Signed,
}

/// Denominator of the masked-weight normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `sum |w m| + eps`
    Absolute,
    /// `sum w m + eps`
    PlainSum,
}

/// Node state used to condition the edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeFeatureSource {
    LastStep,
    WindowMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub k_geo: usize,
    pub k_sem: usize,
    pub kappa_km: f64,
    pub eta: f64,
    pub k_max: f64,
    pub eps: f64,
    pub rank_mode: RankMode,
    pub norm_mode: NormMode,
    pub edge_features: EdgeFeatureSource,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            k_geo: 10,
            k_sem: 5,
            kappa_km: 100.0,
            eta: 10.0,
            k_max: 15.0,
            eps: 1e-8,
            rank_mode: RankMode::Absolute,
            norm_mode: NormMode::Absolute,
            edge_features: EdgeFeatureSource::LastStep,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridGraph {
    pub edges: Vec<Vec<Edge>>,
    pub k_geo: usize,
    pub k_sem: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Top-`k` candidates by smallest embedding distance, ties by index,
/// skipping `exclude`.
fn semantic_top_k(keys: &[Vec<f64>], query: &[f64], k: usize, exclude: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = keys
        .iter()
        .enumerate()
        .filter(|(j, _)| !exclude(*j))
        .map(|(j, key)| (sq_dist(query, key), j))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    scored.select_nth_unstable_by(k - 1, cmp);
    scored.truncate(k);
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, j)| j).collect()
}

impl HybridGraph {
    /// Geographic k-NN plus semantic k-NN over `semantic_keys`.
    pub fn build(points: &[GeoPoint], semantic_keys: &[Vec<f64>], cfg: &TopologyConfig) -> Result<Self> {
        let n = points.len();
        if semantic_keys.len() != n {
            return Err(Error::invalid(format!("{} semantic keys for {n} stations", semantic_keys.len())));
        }
        if n <= cfg.k_geo + cfg.k_sem {
            return Err(Error::invalid(format!(
                "{n} stations cannot supply {} geographic + {} semantic neighbors",
                cfg.k_geo, cfg.k_sem
            )));
        }
        let geo = if cfg.k_geo > 0 { knn_geo(points, cfg.k_geo)? } else { vec![Vec::new(); n] };
        let mut edges = Vec::with_capacity(n);
        for i in 0..n {
            let mut list: Vec<Edge> = Vec::with_capacity(cfg.k_geo + cfg.k_sem);
            for nb in &geo[i] {
                list.push(Edge {
                    target: nb.index,
                    kind: EdgeKind::Geo,
                    w_static: gaussian_static_weight(nb.km, cfg.kappa_km)?,
                    km: nb.km,
                });
            }
            let taken: Vec<usize> = geo[i].iter().map(|nb| nb.index).collect();
            for j in semantic_top_k(semantic_keys, &semantic_keys[i], cfg.k_sem, |j| j == i || taken.contains(&j)) {
                let km = haversine_unchecked(points[i], points[j]);
                list.push(Edge {
                    target: j,
                    kind: EdgeKind::Sem,
                    w_static: gaussian_static_weight(km, cfg.kappa_km)?,
                    km,
                });
            }
            edges.push(list);
        }
        Ok(HybridGraph { edges, k_geo: cfg.k_geo, k_sem: cfg.k_sem })
    }

    /// Adds nodes that receive messages from the existing nodes but send none.
    /// Existing neighbor lists are left untouched.
    pub fn attach_receivers(
        &self,
        base_points: &[GeoPoint],
        base_keys: &[Vec<f64>],
        new_points: &[GeoPoint],
        new_keys: &[Vec<f64>],
        cfg: &TopologyConfig,
    ) -> Result<Self> {
        let n = base_points.len();
        if n != self.edges.len() || base_keys.len() != n || new_keys.len() != new_points.len() {
            return Err(Error::invalid("attach_receivers: inconsistent base/new sizes"));
        }
        let mut out = self.clone();
        for (p, key) in new_points.iter().zip(new_keys) {
            let geo = if cfg.k_geo > 0 { knn_query(base_points, *p, cfg.k_geo.min(n))? } else { Vec::new() };
            let mut list: Vec<Edge> = geo
                .iter()
                .map(|nb| -> Result<Edge> {
                    Ok(Edge {
                        target: nb.index,
                        kind: EdgeKind::Geo,
                        w_static: gaussian_static_weight(nb.km, cfg.kappa_km)?,
                        km: nb.km,
                    })
                })
                .collect::<Result<_>>()?;
            let taken: Vec<usize> = geo.iter().map(|nb| nb.index).collect();
            for j in semantic_top_k(base_keys, key, cfg.k_sem, |j| taken.contains(&j)) {
                let km = haversine_unchecked(*p, base_points[j]);
                list.push(Edge {
                    target: j,
                    kind: EdgeKind::Sem,
                    w_static: gaussian_static_weight(km, cfg.kappa_km)?,
                    km,
                });
            }
            out.edges.push(list);
        }
        Ok(out)
    }

    pub fn num_nodes(&self) -> usize {
        self.edges.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn csr(&self) -> Csr {
        let lists: Vec<Vec<usize>> = self
            .edges
            .iter()
            .map(|l| l.iter().map(|e| e.target).collect())
            .collect();
        Csr::from_lists(&lists)
    }

    pub fn static_weights(&self) -> Vec<f64> {
        self.edges.iter().flatten().map(|e| e.w_static).collect()
    }

    /// Writes `src,dst,kind,km,w_static`, one row per edge; `src` owns the
    /// neighbor list and `dst` is the neighbor.
    pub fn write_csv(&self, path: &Path, ids: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "src,dst,kind,km,w_static").map_err(|e| Error::io(path, e))?;
        for (i, list) in self.edges.iter().enumerate() {
            for e in list {
                writeln!(w, "{},{},{},{},{}", ids[i], ids[e.target], e.kind.as_str(), e.km, e.w_static)
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Graph data laid out for the tape operators.
#[derive(Debug, Clone)]
pub struct GraphTensors {
    pub csr: Arc<Csr>,
    pub receivers: Arc<Vec<usize>>,
    pub neighbors: Arc<Vec<usize>>,
    pub w_static: Vec<f64>,
}

impl GraphTensors {
    pub fn new(graph: &HybridGraph) -> Self {
        let csr = graph.csr();
        GraphTensors {
            receivers: Arc::new(csr.receivers.clone()),
            neighbors: Arc::new(csr.neighbors.clone()),
            csr: Arc::new(csr),
            w_static: graph.static_weights(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.csr.num_nodes()
    }

    pub fn num_edges(&self) -> usize {
        self.csr.num_edges()
    }
}

/// Tape handles for every stage of the edge weighting. Edge tensors are
/// `(B × E × 1)`, node tensors `(B × N × 1)`.
#[derive(Debug, Clone)]
pub struct EdgeWeights {
    pub alpha: Var,
    pub gate: Var,
    pub w_dyn: Var,
    pub beta: Var,
    /// 1-based ranks, constant on the tape.
    pub ranks: Tensor,
    pub mask: Var,
    pub w_norm: Var,
}

/// Per-node 1-based ranks of the candidate edges by descending key, ties by
/// ascending neighbor index. `values` is `B * E` long.
pub fn compute_ranks(values: &[f64], csr: &Csr, batch: usize, mode: RankMode) -> Vec<f64> {
    let e = csr.num_edges();
    let mut ranks = vec![0.0; batch * e];
    let mut order: Vec<usize> = Vec::new();
    for b in 0..batch {
        for i in 0..csr.num_nodes() {
            let seg = csr.segment(i);
            order.clear();
            order.extend(seg.clone());
            let key = |ei: usize| match mode {
                RankMode::Absolute => values[b * e + ei].abs(),
                RankMode::Signed => values[b * e + ei],
            };
            order.sort_by(|&x, &y| key(y).total_cmp(&key(x)).then(csr.neighbors[x].cmp(&csr.neighbors[y])));
            for (r, &ei) in order.iter().enumerate() {
                ranks[b * e + ei] = (r + 1) as f64;
            }
        }
    }
    ranks
}

/// `alpha = tanh(a^T leaky_relu(W_e [h_i ‖ h_j]))` for every edge.
/// `h` is `(B × N × D)`.
pub fn dynamic_attention(g: &mut Graph, p: &BoundParams, h: Var, gt: &GraphTensors) -> Result<(Var, Var, Var)> {
    let hs = g.shape(h).to_vec();
    let w_e = p.get("edge.w_e")?;
    if hs.len() != 3 || hs[1] != gt.num_nodes() || g.shape(w_e)[0] != 2 * hs[2] {
        return Err(Error::invalid(format!(
            "edge features {hs:?} vs W_e {:?} and {} nodes",
            g.shape(w_e),
            gt.num_nodes()
        )));
    }
    let h_i = g.gather(h, 1, gt.receivers.clone())?;
    let h_j = g.gather(h, 1, gt.neighbors.clone())?;
    let pair = g.concat(&[h_i, h_j], 2)?;
    let proj = g.matmul(pair, w_e)?;
    let act = g.leaky_relu(proj, 0.1);
    let score = g.matmul(act, p.get("edge.a")?)?;
    Ok((g.tanh(score), pair, h_i))
}

/// Gate `g = sigmoid(w_g^T [h_i ‖ h_j ‖ w_static] + b_g)` and the fused weight
/// `w_dyn = g w_static + (1 - g) alpha`.
pub fn fuse_gate(g: &mut Graph, p: &BoundParams, pair: Var, alpha: Var, gt: &GraphTensors) -> Result<(Var, Var)> {
    let batch = g.shape(pair)[0];
    let two_d = g.shape(pair)[2];
    let w_g = p.get("edge.w_g")?;
    if g.shape(w_g) != [two_d + 1, 1] {
        return Err(Error::invalid(format!("edge.w_g {:?} for pair width {two_d}", g.shape(w_g))));
    }
    let e = gt.num_edges();
    let ws_data: Vec<f64> = (0..batch).flat_map(|_| gt.w_static.iter().copied()).collect();
    let ws = g.constant(Tensor::new(vec![batch, e, 1], ws_data)?);
    let w_pair = g.slice(w_g, 0, 0, two_d)?;
    let w_last = g.slice(w_g, 0, two_d, 1)?;
    let logits = g.matmul(pair, w_pair)?;
    let static_term = g.mul(ws, w_last)?;
    let logits = g.add(logits, static_term)?;
    let logits = g.add(logits, p.get("edge.b_g")?)?;
    let gate = g.sigmoid(logits);
    let diff = g.sub(ws, alpha)?;
    let mixed = g.mul(gate, diff)?;
    let w_dyn = g.add(alpha, mixed)?;
    Ok((gate, w_dyn))
}

/// Per-node threshold `beta = k_max sigmoid(MLP(h))`, shape `(B × N × 1)`.
pub fn prune_threshold(g: &mut Graph, p: &BoundParams, h: Var, k_max: f64) -> Result<Var> {
    let z = g.matmul(h, p.get("beta.w1")?)?;
    let z = g.add(z, p.get("beta.b1")?)?;
    let z = g.tanh(z);
    let z = g.matmul(z, p.get("beta.w2")?)?;
    let z = g.add(z, p.get("beta.b2")?)?;
    let s = g.sigmoid(z);
    Ok(g.scale(s, k_max))
}

/// Soft rank mask and normalization:
/// `m = sigmoid(-eta (r - beta))`, `w~ = w m / (sum_k |w m| + eps)`.
///
/// Returns `(ranks, mask, w_norm)`.
pub fn adaptive_prune(
    g: &mut Graph,
    w_dyn: Var,
    beta: Var,
    gt: &GraphTensors,
    cfg: &TopologyConfig,
) -> Result<(Tensor, Var, Var)> {
    let ws = g.shape(w_dyn).to_vec();
    let e = gt.num_edges();
    let n = gt.num_nodes();
    if ws.len() != 3 || ws[1] != e || ws[2] != 1 {
        return Err(Error::invalid(format!("w_dyn {ws:?} for {e} edges")));
    }
    let batch = ws[0];
    if g.shape(beta) != [batch, n, 1] {
        return Err(Error::invalid(format!("beta {:?} for batch {batch}, {n} nodes", g.shape(beta))));
    }
    let ranks = Tensor::new(
        vec![batch, e, 1],
        compute_ranks(g.value(w_dyn).data(), &gt.csr, batch, cfg.rank_mode),
    )?;
    let r = g.constant(ranks.clone());
    let beta_e = g.gather(beta, 1, gt.receivers.clone())?;
    let margin = g.sub(beta_e, r)?;
    let margin = g.scale(margin, cfg.eta);
    let mask = g.sigmoid(margin);
    let masked = g.mul(w_dyn, mask)?;
    let den_terms = match cfg.norm_mode {
        NormMode::Absolute => g.abs(masked),
        NormMode::PlainSum => masked,
    };
    let den = g.segment_sum(den_terms, 1, gt.receivers.clone(), n)?;
    let den = g.add_scalar(den, cfg.eps);
    let den_e = g.gather(den, 1, gt.receivers.clone())?;
    let w_norm = g.div(masked, den_e)?;
    Ok((ranks, mask, w_norm))
}

/// All edge-weight stages for node features `h` of shape `(B × N × D)`.
pub fn edge_weights(
    g: &mut Graph,
    p: &BoundParams,
    h: Var,
    gt: &GraphTensors,
    cfg: &TopologyConfig,
) -> Result<EdgeWeights> {
    let (alpha, pair, _) = dynamic_attention(g, p, h, gt)?;
    let (gate, w_dyn) = fuse_gate(g, p, pair, alpha, gt)?;
    let beta = prune_threshold(g, p, h, cfg.k_max)?;
    let (ranks, mask, w_norm) = adaptive_prune(g, w_dyn, beta, gt, cfg)?;
    Ok(EdgeWeights { alpha, gate, w_dyn, beta, ranks, mask, w_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ModelParams;
    use rand::{Rng, SeedableRng};

    fn pts(coords: &[(f64, f64)]) -> Vec<GeoPoint> {
        coords.iter().map(|&(lat, lon)| GeoPoint { lat, lon }).collect()
    }

    #[test]
    fn equal_embeddings_break_ties_by_index() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (0.0, 3.0)]);
        let keys = vec![vec![1.0, 1.0]; 3];
        let cfg = TopologyConfig { k_geo: 1, k_sem: 1, ..Default::default() };
        let g1 = HybridGraph::build(&p, &keys, &cfg).unwrap();
        let g2 = HybridGraph::build(&p, &keys, &cfg).unwrap();
        assert_eq!(g1, g2);
        // Node 0: geo neighbor 1, semantic picks lowest remaining index 2.
        assert_eq!(g1.edges[0][0].target, 1);
        assert_eq!(g1.edges[0][1].target, 2);
        assert_eq!(g1.edges[0][1].kind, EdgeKind::Sem);
        // Node 2: geo neighbor 1, semantic candidate 0.
        assert_eq!(g1.edges[2].iter().map(|e| e.target).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn coincident_stations_get_unit_weight() {
        let p = pts(&[(10.0, 10.0), (10.0, 10.0), (20.0, 20.0), (30.0, 30.0)]);
        let keys = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let cfg = TopologyConfig { k_geo: 1, k_sem: 1, ..Default::default() };
        let g = HybridGraph::build(&p, &keys, &cfg).unwrap();
        assert_eq!(g.edges[0][0].target, 1);
        assert_eq!(g.edges[0][0].km, 0.0);
        assert_eq!(g.edges[0][0].w_static, 1.0);
    }

    #[test]
    fn too_few_stations_rejected() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0)]);
        let keys = vec![vec![0.0]; 3];
        let cfg = TopologyConfig { k_geo: 2, k_sem: 1, ..Default::default() };
        assert!(HybridGraph::build(&p, &keys, &cfg).is_err());
    }

    #[test]
    fn semantic_edges_are_exact_top_k() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let n = 20;
        let p: Vec<GeoPoint> = (0..n)
            .map(|_| GeoPoint { lat: rng.random_range(-60.0..60.0), lon: rng.random_range(-170.0..170.0) })
            .collect();
        let keys: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let cfg = TopologyConfig { k_geo: 3, k_sem: 4, ..Default::default() };
        let g = HybridGraph::build(&p, &keys, &cfg).unwrap();
        for i in 0..n {
            let list = &g.edges[i];
            assert!(list.len() <= 7);
            let mut targets: Vec<usize> = list.iter().map(|e| e.target).collect();
            assert!(!targets.contains(&i));
            targets.sort();
            targets.dedup();
            assert_eq!(targets.len(), list.len(), "duplicate targets");
            let geo: Vec<usize> = list.iter().filter(|e| e.kind == EdgeKind::Geo).map(|e| e.target).collect();
            let sem: Vec<usize> = list.iter().filter(|e| e.kind == EdgeKind::Sem).map(|e| e.target).collect();
            // Brute-force oracle over all pairs.
            let dist = |j: usize| -> f64 { keys[i].iter().zip(&keys[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() };
            let worst_selected = sem.iter().map(|&j| dist(j)).fold(0.0, f64::max);
            for j in 0..n {
                if j != i && !geo.contains(&j) && !sem.contains(&j) {
                    assert!(worst_selected <= dist(j));
                }
            }
        }
    }

    #[test]
    fn ranks_are_permutations_with_index_ties() {
        let csr = Csr::from_lists(&[vec![3, 1, 2], vec![0]]);
        let values = [0.5, -0.9, 0.5, 0.2, 0.1, -0.3, 0.7, 0.0];
        let r = compute_ranks(&values, &csr, 2, RankMode::Absolute);
        // Batch 0: |.| = 0.5 (nbr 3), 0.9 (nbr 1), 0.5 (nbr 2) -> nbr1=1, nbr2=2, nbr3=3.
        assert_eq!(&r[..4], &[3.0, 1.0, 2.0, 1.0]);
        let s = compute_ranks(&values, &csr, 2, RankMode::Signed);
        assert_eq!(&s[..3], &[2.0, 3.0, 1.0]);
        assert_eq!(&r[4..], &[3.0, 2.0, 1.0, 1.0]);
    }

    /// Mask of a node's single edge (rank 1) for threshold `beta`.
    fn mask_for(beta: f64, eta: f64) -> f64 {
        let cfg = TopologyConfig { eta, ..Default::default() };
        let gt = GraphTensors {
            csr: Arc::new(Csr::from_lists(&[vec![1], vec![]])),
            receivers: Arc::new(vec![0]),
            neighbors: Arc::new(vec![1]),
            w_static: vec![1.0],
        };
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![1, 1, 1], vec![0.4]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2, 1], vec![beta, 1.0]).unwrap());
        let (_, m, _) = adaptive_prune(&mut g, w, b, &gt, &cfg).unwrap();
        g.value(m).item()
    }

    #[test]
    fn mask_values() {
        // Single edge has rank 1.
        assert_eq!(mask_for(1.0, 10.0), 0.5);
        assert!((mask_for(0.0, 10.0) - 4.5398e-5).abs() < 1e-8);
        assert!((mask_for(2.0, 10.0) - 0.9999546).abs() < 1e-7);
    }

    pub(crate) fn random_params(d: usize, d_edge: usize, seed: u64, scale: f64) -> ModelParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mut add = |name: &str, shape: Vec<usize>| {
            let n = shape.iter().product();
            p.insert(name, Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()).unwrap();
        };
        add("edge.w_e", vec![2 * d, d_edge]);
        add("edge.a", vec![d_edge, 1]);
        add("edge.w_g", vec![2 * d + 1, 1]);
        add("edge.b_g", vec![1]);
        add("beta.w1", vec![d, d_edge]);
        add("beta.b1", vec![d_edge]);
        add("beta.w2", vec![d_edge, 1]);
        add("beta.b2", vec![1]);
        p
    }

    #[test]
    fn attention_matches_hand_computation() {
        // D = 2, D' = 2, one edge 0 <- 1.
        let mut p = random_params(2, 2, 1, 1.0);
        let w_e = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, 0.6]; // (4 x 2)
        let a = vec![0.9, -1.1];
        *p.get_mut("edge.w_e").unwrap() = Tensor::new(vec![4, 2], w_e.clone()).unwrap();
        *p.get_mut("edge.a").unwrap() = Tensor::new(vec![2, 1], a.clone()).unwrap();
        let gt = GraphTensors::new(&HybridGraph {
            edges: vec![vec![Edge { target: 1, kind: EdgeKind::Geo, w_static: 0.5, km: 1.0 }], vec![]],
            k_geo: 1,
            k_sem: 0,
        });
        let h = [0.25, -1.5, 2.0, 0.75];
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let hv = g.constant(Tensor::new(vec![1, 2, 2], h.to_vec()).unwrap());
        let (alpha, _, _) = dynamic_attention(&mut g, &b, hv, &gt).unwrap();
        let x = [h[0], h[1], h[2], h[3]];
        let mut expected = 0.0;
        for col in 0..2 {
            let mut z = 0.0;
            for row in 0..4 {
                z += x[row] * w_e[row * 2 + col];
            }
            let z = if z > 0.0 { z } else { 0.1 * z };
            expected += a[col] * z;
        }
        let expected = expected.tanh();
        assert!((g.value(alpha).item() - expected).abs() < 1e-12);

        // a = 0 gives zero attention.
        *p.get_mut("edge.a").unwrap() = Tensor::zeros(vec![2, 1]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let hv = g.constant(Tensor::new(vec![1, 2, 2], h.to_vec()).unwrap());
        let (alpha, _, _) = dynamic_attention(&mut g, &b, hv, &gt).unwrap();
        assert_eq!(g.value(alpha).item(), 0.0);
    }

    #[test]
    fn zero_gate_params_average_static_and_attention() {
        let mut p = random_params(3, 4, 2, 0.5);
        *p.get_mut("edge.w_g").unwrap() = Tensor::zeros(vec![7, 1]);
        *p.get_mut("edge.b_g").unwrap() = Tensor::zeros(vec![1]);
        let graph = HybridGraph {
            edges: vec![
                vec![Edge { target: 1, kind: EdgeKind::Geo, w_static: 0.8, km: 10.0 }],
                vec![Edge { target: 0, kind: EdgeKind::Geo, w_static: 0.3, km: 10.0 }],
            ],
            k_geo: 1,
            k_sem: 0,
        };
        let gt = GraphTensors::new(&graph);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let h = g.constant(Tensor::new(vec![1, 2, 3], vec![0.1, 0.2, -0.3, 0.5, -0.6, 0.4]).unwrap());
        let ew = edge_weights(&mut g, &b, h, &gt, &TopologyConfig::default()).unwrap();
        for e in 0..2 {
            assert_eq!(g.value(ew.gate).data()[e], 0.5);
            let alpha = g.value(ew.alpha).data()[e];
            let expected = 0.5 * (gt.w_static[e] + alpha);
            assert!((g.value(ew.w_dyn).data()[e] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_weights_have_bounded_mass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 30;
        let p: Vec<GeoPoint> = (0..n)
            .map(|_| GeoPoint { lat: rng.random_range(-5.0..5.0), lon: rng.random_range(-5.0..5.0) })
            .collect();
        let keys: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let cfg = TopologyConfig { k_geo: 4, k_sem: 3, k_max: 7.0, ..Default::default() };
        let graph = HybridGraph::build(&p, &keys, &cfg).unwrap();
        let gt = GraphTensors::new(&graph);
        let params = random_params(5, 6, 9, 1.0);
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let h = g.constant(Tensor::new(vec![2, n, 5], (0..2 * n * 5).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        let ew = edge_weights(&mut g, &b, h, &gt, &cfg).unwrap();
        let w = g.value(ew.w_norm).data();
        for bi in 0..2 {
            for i in 0..n {
                let mass: f64 = gt.csr.segment(i).map(|e| w[bi * gt.num_edges() + e].abs()).sum();
                assert!(mass <= 1.0 + 1e-12);
            }
        }
        let alpha = g.value(ew.alpha).data();
        assert!(alpha.iter().all(|a| a.abs() < 1.0));
        let gate = g.value(ew.gate).data();
        assert!(gate.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn new_receivers_do_not_alter_existing_lists() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        let keys: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let cfg = TopologyConfig { k_geo: 2, k_sem: 1, ..Default::default() };
        let g = HybridGraph::build(&p, &keys, &cfg).unwrap();
        let ext = g
            .attach_receivers(&p, &keys, &pts(&[(0.5, 0.5)]), &[vec![4.2]], &cfg)
            .unwrap();
        assert_eq!(&ext.edges[..5], &g.edges[..]);
        assert_eq!(ext.edges[5].len(), 3);
        assert_eq!(ext.edges[5][2].target, 4);
        assert!(ext.edges.iter().flatten().all(|e| e.target < 5));
    }

    fn toy_graph(n: usize, k: usize) -> GraphTensors {
        let edges = (0..n)
            .map(|i| {
                (1..=k)
                    .map(|o| Edge { target: (i + o) % n, kind: EdgeKind::Geo, w_static: 1.0, km: 0.0 })
                    .collect()
            })
            .collect();
        GraphTensors::new(&HybridGraph { edges, k_geo: k, k_sem: 0 })
    }

    #[test]
    fn steep_mask_is_hard_top_k() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (n, k) = (8, 6);
        let gt = toy_graph(n, k);
        let e = gt.num_edges();
        let w: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = TopologyConfig { eta: 1e3, ..Default::default() };
        for keep in 1..k {
            let mut g = Graph::new();
            let wv = g.constant(Tensor::new(vec![1, e, 1], w.clone()).unwrap());
            let beta = g.constant(Tensor::full(vec![1, n, 1], keep as f64 + 0.5));
            let (_, mask, w_norm) = adaptive_prune(&mut g, wv, beta, &gt, &cfg).unwrap();
            let m = g.value(mask).data();
            for i in 0..n {
                let seg: Vec<usize> = gt.csr.segment(i).collect();
                let mut by_mag = seg.clone();
                by_mag.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()));
                let top: Vec<usize> = by_mag[..keep].to_vec();
                for &ei in &seg {
                    let want = if top.contains(&ei) { 1.0 } else { 0.0 };
                    assert!((m[ei] - want).abs() < 1e-4);
                    if want == 0.0 {
                        assert!(g.value(w_norm).data()[ei].abs() < 1e-4);
                    }
                }
            }
        }
    }

    /// Threshold gradients on a 5-node toy under plain-sum normalization.
    #[test]
    fn threshold_gradient_matches_closed_forms() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (n, k) = (5, 3);
        let gt = toy_graph(n, k);
        let e = gt.num_edges();
        let eta = 2.0;
        let cfg = TopologyConfig { eta, norm_mode: NormMode::PlainSum, ..Default::default() };
        let w: Vec<f64> = (0..e).map(|_| rng.random_range(0.1..1.0)).collect();
        let cot: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta0: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..3.0)).collect();

        // Returns (loss on w~, loss on u = w m, grad_beta(w~), grad_beta(u), w~, m).
        let run = |beta: &[f64]| {
            let mut g = Graph::new();
            let wv = g.constant(Tensor::new(vec![1, e, 1], w.clone()).unwrap());
            let b = g.param(Tensor::new(vec![1, n, 1], beta.to_vec()).unwrap());
            let c = g.constant(Tensor::new(vec![1, e, 1], cot.clone()).unwrap());
            let (_, mask, w_norm) = adaptive_prune(&mut g, wv, b, &gt, &cfg).unwrap();
            let lw = g.mul(w_norm, c).unwrap();
            let lw = g.sum_all(lw);
            let u = g.mul(wv, mask).unwrap();
            let lu = g.mul(u, c).unwrap();
            let lu = g.sum_all(lu);
            let gw = g.backward(lw).unwrap().get(b).unwrap().data().to_vec();
            let gu = g.backward(lu).unwrap().get(b).unwrap().data().to_vec();
            (
                g.value(lw).item(),
                g.value(lu).item(),
                gw,
                gu,
                g.value(w_norm).data().to_vec(),
                g.value(mask).data().to_vec(),
            )
        };
        let (_, _, grad_w, grad_u, wt, m) = run(&beta0);
        let h = 1e-6;
        for i in 0..n {
            let seg = gt.csr.segment(i);
            let u: Vec<f64> = seg.clone().map(|j| w[j] * m[j]).collect();
            // Pre-normalization form: sum_j dL/du_j u_j (1 - m_j) eta.
            let pre: f64 = seg.clone().zip(&u).map(|(j, uj)| cot[j] * uj * (1.0 - m[j]) * eta).sum();
            assert!((pre - grad_u[i]).abs() <= 1e-6 * grad_u[i].abs().max(1e-12), "{pre} vs {}", grad_u[i]);
            // Full form through the normalization.
            let s: f64 = seg.clone().map(|j| wt[j] * (1.0 - m[j]) * eta).sum();
            let full: f64 = seg.clone().map(|j| cot[j] * wt[j] * ((1.0 - m[j]) * eta - s)).sum();
            assert!((full - grad_w[i]).abs() <= 1e-6 * grad_w[i].abs().max(1e-12), "{full} vs {}", grad_w[i]);
            // Finite differences on beta.
            let mut bp = beta0.clone();
            bp[i] += h;
            let mut bm = beta0.clone();
            bm[i] -= h;
            let (lwp, lup, ..) = run(&bp);
            let (lwm, lum, ..) = run(&bm);
            let fd_w = (lwp - lwm) / (2.0 * h);
            let fd_u = (lup - lum) / (2.0 * h);
            assert!((fd_w - grad_w[i]).abs() <= 1e-6 * grad_w[i].abs().max(1.0));
            assert!((fd_u - grad_u[i]).abs() <= 1e-6 * grad_u[i].abs().max(1.0));
        }
    }
}
