//! Reference forward pass over dense `N × N` matrices with plain loops.
//!
//! It shares parameters and inputs with the sparse engine but none of its
//! code, so agreement between the two checks the sparse gather/scatter path.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInputs};
use crate::propagation::{AggregationMode, FusionMode};
use crate::tensor::{ModelParams, Tensor};
use crate::topology::{EdgeFeatureSource, NormMode, RankMode};

pub const MAX_DENSE_STATIONS: usize = 64;

fn param<'a>(p: &'a ModelParams, name: &str) -> Result<&'a Tensor> {
    p.get(name).ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
}

/// `x (len K) · W (K × M)`.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let m = w.shape()[1];
    let mut out = vec![0.0; m];
    for (k, &xk) in x.iter().enumerate() {
        let row = &w.data()[k * m..(k + 1) * m];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xk * wv;
        }
    }
    out
}

fn add(mut a: Vec<f64>, b: &[f64]) -> Vec<f64> {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    a
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// State indexed `[b][t][i][d]`.
type State = Vec<Vec<Vec<Vec<f64>>>>;

/// Dense edge matrix and the forecast for one set of inputs.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    /// `a_tilde[b][i][j]`, zero off the candidate set.
    pub a_tilde: Vec<Vec<Vec<f64>>>,
    /// `(B × tau × N × C)` standardized forecast.
    pub y_hat: Tensor,
}

pub fn dense_forward(params: &ModelParams, cfg: &ModelConfig, inputs: ModelInputs<'_>) -> Result<DenseOutput> {
    let xs = inputs.x.shape().to_vec();
    let n = inputs.graph.num_nodes();
    if n > MAX_DENSE_STATIONS {
        return Err(Error::invalid(format!("dense reference refuses {n} stations (limit {MAX_DENSE_STATIONS})")));
    }
    if xs.len() != 4 || xs[2] != n {
        return Err(Error::invalid(format!("input {xs:?} for {n} stations")));
    }
    let (bsz, tw, ch) = (xs[0], xs[1], xs[3]);
    let d = cfg.d_model;
    let topo = &cfg.topology;

    // Identity embeddings.
    let feats = inputs.static_features;
    let fdim = feats.shape()[1];
    let table = param(params, "id.grade")?;
    let ge = table.shape()[1];
    let e_id: Vec<Vec<f64>> = (0..n)
        .map(|i| -> Result<Vec<f64>> {
            let mut v = feats.data()[i * fdim..(i + 1) * fdim].to_vec();
            let g = inputs.grades[i];
            v.extend_from_slice(&table.data()[g * ge..(g + 1) * ge]);
            let h: Vec<f64> = add(vecmat(&v, param(params, "id.w1")?), param(params, "id.b1")?.data())
                .into_iter()
                .map(f64::tanh)
                .collect();
            Ok(add(vecmat(&h, param(params, "id.w2")?), param(params, "id.b2")?.data()))
        })
        .collect::<Result<_>>()?;

    // Input projection.
    let w_in = param(params, "in.w")?;
    let b_in = param(params, "in.b")?.data();
    let h0: State = (0..bsz)
        .map(|b| {
            (0..tw)
                .map(|t| {
                    (0..n)
                        .map(|i| {
                            let off = ((b * tw + t) * n + i) * ch;
                            add(vecmat(&inputs.x.data()[off..off + ch], w_in), b_in)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    // Candidate set and static weights as dense matrices.
    let csr = &inputs.graph.csr;
    let mut cand: Vec<Vec<Option<f64>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for e in csr.segment(i) {
            cand[i][csr.neighbors[e]] = Some(inputs.graph.w_static[e]);
        }
    }

    let w_e = param(params, "edge.w_e")?;
    let a = param(params, "edge.a")?.data();
    let w_g = param(params, "edge.w_g")?.data();
    let b_g = param(params, "edge.b_g")?.data()[0];
    let (bw1, bb1, bw2, bb2) = (
        param(params, "beta.w1")?,
        param(params, "beta.b1")?.data(),
        param(params, "beta.w2")?,
        param(params, "beta.b2")?.data()[0],
    );
    let mut a_tilde = vec![vec![vec![0.0; n]; n]; bsz];
    for b in 0..bsz {
        let hf: Vec<Vec<f64>> = (0..n)
            .map(|i| match topo.edge_features {
                EdgeFeatureSource::LastStep => h0[b][tw - 1][i].clone(),
                EdgeFeatureSource::WindowMean => (0..d).map(|k| (0..tw).map(|t| h0[b][t][i][k]).sum::<f64>() / tw as f64).collect(),
            })
            .collect();
        for i in 0..n {
            let hidden: Vec<f64> = add(vecmat(&hf[i], bw1), bb1).into_iter().map(f64::tanh).collect();
            let beta = topo.k_max * sigmoid(vecmat(&hidden, bw2)[0] + bb2);
            let mut w_dyn: Vec<(usize, f64)> = Vec::new();
            for j in 0..n {
                let Some(ws) = cand[i][j] else { continue };
                let pair: Vec<f64> = hf[i].iter().chain(&hf[j]).copied().collect();
                let score: f64 = vecmat(&pair, w_e)
                    .into_iter()
                    .zip(a)
                    .map(|(z, ak)| if z > 0.0 { z } else { 0.1 * z } * ak)
                    .sum();
                let alpha = score.tanh();
                let logit: f64 = pair.iter().zip(w_g).map(|(x, w)| x * w).sum::<f64>() + ws * w_g[2 * d] + b_g;
                let gate = sigmoid(logit);
                w_dyn.push((j, gate * ws + (1.0 - gate) * alpha));
            }
            let key = |w: f64| match topo.rank_mode {
                RankMode::Absolute => w.abs(),
                RankMode::Signed => w,
            };
            let mut order = w_dyn.clone();
            order.sort_by(|x, y| key(y.1).total_cmp(&key(x.1)).then(x.0.cmp(&y.0)));
            let mut masked = vec![0.0; n];
            for (r, &(j, w)) in order.iter().enumerate() {
                let m = sigmoid(topo.eta * (beta - (r + 1) as f64));
                masked[j] = w * m;
            }
            let den: f64 = match topo.norm_mode {
                NormMode::Absolute => masked.iter().map(|v| v.abs()).sum::<f64>(),
                NormMode::PlainSum => masked.iter().sum::<f64>(),
            } + topo.eps;
            for j in 0..n {
                a_tilde[b][i][j] = masked[j] / den;
            }
        }
    }

    // Diffusion with restart.
    let mut stack: Vec<State> = vec![h0.clone()];
    for _ in 0..cfg.diffusion_steps {
        let prev = stack.last().expect("non-empty");
        let next: State = (0..bsz)
            .map(|b| {
                (0..tw)
                    .map(|t| {
                        (0..n)
                            .map(|i| {
                                (0..d)
                                    .map(|k| {
                                        (0..n).map(|j| a_tilde[b][i][j] * prev[b][t][j][k]).sum::<f64>()
                                            + cfg.lambda * h0[b][t][i][k]
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        stack.push(next);
    }
    let steps = stack.len();

    // Signed aggregation per head.
    let heads = cfg.heads;
    let dh = d / heads;
    let wq = param(params, "spec.wq")?.data();
    let wk = param(params, "spec.wk")?.data();
    let bias = param(params, "spec.bias")?.data();
    let fusion_w = param(params, "fusion.w")?.data();
    let fmax = fusion_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fexp: Vec<f64> = fusion_w.iter().map(|w| (w - fmax).exp()).collect();
    let fsum: f64 = fexp.iter().sum();
    let project = |v: &[f64], w: &[f64], h: usize| -> Vec<f64> {
        (0..dh)
            .map(|c| (0..dh).map(|r| v[r] * w[(h * dh + r) * dh + c]).sum())
            .collect()
    };

    let (wz, we, gb) = (param(params, "gate.w_z")?, param(params, "gate.w_e")?, param(params, "gate.b")?.data());
    let (hw1, hb1, hw2, hb2) = (
        param(params, "head.w1")?,
        param(params, "head.b1")?.data(),
        param(params, "head.w2")?,
        param(params, "head.b2")?.data(),
    );
    let (tau, c_out) = (cfg.horizon, cfg.channels);
    let mut y = Tensor::zeros(vec![bsz, tau, n, c_out]);
    for b in 0..bsz {
        for i in 0..n {
            let e_gate = vecmat(&e_id[i], we);
            let mut flat = Vec::with_capacity(tw * d);
            for t in 0..tw {
                let mut z = vec![0.0; d];
                for h in 0..heads {
                    let part = |l: usize| &stack[l][b][t][i][h * dh..(h + 1) * dh];
                    let mut q = vec![0.0; dh];
                    for l in 0..steps {
                        for (qk, v) in q.iter_mut().zip(project(part(l), wq, h)) {
                            *qk += v;
                        }
                    }
                    q.iter_mut().for_each(|v| *v /= steps as f64);
                    let scores: Vec<f64> = (0..steps)
                        .map(|l| q.iter().zip(project(part(l), wk, h)).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let coeff: Vec<f64> = match cfg.aggregation_mode {
                        AggregationMode::Signed => scores.iter().zip(bias).map(|(s, b)| s.tanh() * b).collect(),
                        AggregationMode::PositiveOnly => {
                            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                            let tot: f64 = ex.iter().sum();
                            ex.into_iter().map(|v| v / tot).collect()
                        }
                    };
                    for l in 0..steps {
                        for k in 0..dh {
                            z[h * dh + k] += coeff[l] * part(l)[k];
                        }
                    }
                }
                let soft: Vec<f64> = (0..d)
                    .map(|k| (0..steps).map(|l| fexp[l] / fsum * stack[l][b][t][i][k]).sum())
                    .collect();
                let fused: Vec<f64> = match cfg.fusion_mode {
                    FusionMode::Signed => z,
                    FusionMode::Softmax => soft,
                    FusionMode::SumOfBoth => z.iter().zip(&soft).map(|(a, b)| a + b).collect(),
                };
                let logits = add(add(vecmat(&fused, wz), &e_gate), gb);
                for k in 0..d {
                    let g = sigmoid(logits[k]);
                    flat.push(g * fused[k] + (1.0 - g) * e_id[i][k]);
                }
            }
            let hidden: Vec<f64> = add(vecmat(&flat, hw1), hb1).into_iter().map(|v| v.max(0.0)).collect();
            let out = add(vecmat(&hidden, hw2), hb2);
            for h in 0..tau {
                for c in 0..c_out {
                    let k = ((b * tau + h) * n + i) * c_out + c;
                    y.data_mut()[k] = out[h * c_out + c];
                }
            }
        }
    }
    Ok(DenseOutput { a_tilde, y_hat: y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy;
    use crate::model::predict;
    use crate::propagation::FusionMode;

    #[test]
    fn matches_sparse_engine() {
        for seed in 0..4 {
            let t = toy(6, 2, seed);
            let sparse = predict(&t.params, &t.cfg, t.inputs()).unwrap();
            let dense = dense_forward(&t.params, &t.cfg, t.inputs()).unwrap();
            assert!(sparse.max_abs_diff(&dense.y_hat) < 1e-10);
        }
    }

    #[test]
    fn matches_in_every_mode() {
        let mut t = toy(7, 1, 11);
        t.params.get_mut("fusion.w").unwrap().data_mut().copy_from_slice(&[0.3, -0.2, 0.5]);
        for fusion in [FusionMode::Softmax, FusionMode::SumOfBoth] {
            for agg in [AggregationMode::Signed, AggregationMode::PositiveOnly] {
                for norm in [NormMode::Absolute, NormMode::PlainSum] {
                    for rank in [RankMode::Absolute, RankMode::Signed] {
                        for src in [EdgeFeatureSource::LastStep, EdgeFeatureSource::WindowMean] {
                            t.cfg.fusion_mode = fusion;
                            t.cfg.aggregation_mode = agg;
                            t.cfg.topology.norm_mode = norm;
                            t.cfg.topology.rank_mode = rank;
                            t.cfg.topology.edge_features = src;
                            let sparse = predict(&t.params, &t.cfg, t.inputs()).unwrap();
                            let dense = dense_forward(&t.params, &t.cfg, t.inputs()).unwrap();
                            assert!(sparse.max_abs_diff(&dense.y_hat) < 1e-10, "{fusion:?} {agg:?} {norm:?} {rank:?} {src:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn refuses_large_graphs() {
        let t = toy(5, 1, 0);
        let mut big = t.graph.clone();
        big.csr = std::sync::Arc::new(crate::tensor::Csr::from_lists(&vec![Vec::new(); 65]));
        let inputs = ModelInputs { graph: &big, ..t.inputs() };
        assert!(dense_forward(&t.params, &t.cfg, inputs).is_err());
    }
}
