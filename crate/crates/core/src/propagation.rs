//! Restart diffusion over the weighted neighbor graph, signed aggregation of
//! the diffusion states, identity gating and the forecast head.
//!
//! States are `(B × T × N × D)` tensors on a [`Graph`] tape.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Csr, Graph, Var};

/// How step coefficients are formed from the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// `c_l = tanh(score_l) b_l`
    Signed,
    /// `c = softmax(score)`; non-negative coefficients summing to one.
    PositiveOnly,
}

/// Which aggregate of the diffusion stack feeds the identity gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Signed,
    Softmax,
    SumOfBoth,
}

/// `H^(l) = propagate(H^(l-1), w~) + lambda H^(0)` for `l = 1..=steps`.
///
/// `w_norm` carries one weight per edge and batch element and is shared by
/// every time step.
pub fn diffuse(g: &mut Graph, h0: Var, w_norm: Var, csr: &Arc<Csr>, steps: usize, lambda: f64) -> Result<Vec<Var>> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(format!("restart weight {lambda} outside [0, 1)")));
    }
    let mut stack = Vec::with_capacity(steps + 1);
    stack.push(h0);
    let restart = g.scale(h0, lambda);
    for _ in 0..steps {
        let prev = *stack.last().expect("stack starts with H0");
        let spread = g.propagate(prev, w_norm, csr.clone())?;
        let next = if lambda == 0.0 { spread } else { g.add(spread, restart)? };
        stack.push(next);
    }
    Ok(stack)
}

/// Signed aggregate plus the per-head coefficients `coeffs[head][step]`,
/// each of shape `(B × T × N × 1)`.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub z: Var,
    pub coeffs: Vec<Vec<Var>>,
}

fn check_stack(g: &Graph, stack: &[Var]) -> Result<Vec<usize>> {
    let first = stack.first().ok_or_else(|| Error::invalid("empty diffusion stack"))?;
    let shape = g.shape(*first).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!("diffusion state must be rank 4, got {shape:?}")));
    }
    for v in stack {
        if g.shape(*v) != shape.as_slice() {
            return Err(Error::invalid("diffusion states differ in shape"));
        }
    }
    Ok(shape)
}

fn head_slice(g: &mut Graph, x: Var, heads: usize, h: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        Ok(x)
    } else {
        g.slice(x, 3, h * dh, dh)
    }
}

fn head_matrix(g: &mut Graph, w: Var, h: usize, dh: usize) -> Result<Var> {
    let s = g.slice(w, 0, h, 1)?;
    g.reshape(s, &[dh, dh])
}

/// Multi-head aggregation of the stack. Uses `spec.wq`, `spec.wk`
/// (`heads × dh × dh`) and `spec.bias` (`L + 1`).
pub fn signed_aggregate(
    g: &mut Graph,
    p: &BoundParams,
    stack: &[Var],
    heads: usize,
    mode: AggregationMode,
) -> Result<Aggregate> {
    let shape = check_stack(g, stack)?;
    let d = shape[3];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let steps = stack.len();
    let wq = p.get("spec.wq")?;
    let wk = p.get("spec.wk")?;
    let bias = p.get("spec.bias")?;
    if g.shape(wq) != [heads, dh, dh] || g.shape(wk) != [heads, dh, dh] {
        return Err(Error::invalid(format!(
            "spec.wq {:?} / spec.wk {:?} for {heads} heads of width {dh}",
            g.shape(wq),
            g.shape(wk)
        )));
    }
    if g.shape(bias) != [steps] {
        return Err(Error::invalid(format!("spec.bias {:?} for {steps} steps", g.shape(bias))));
    }
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut coeffs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq_h = head_matrix(g, wq, h, dh)?;
        let wk_h = head_matrix(g, wk, h, dh)?;
        let parts: Vec<Var> = stack.iter().map(|&s| head_slice(g, s, heads, h, dh)).collect::<Result<_>>()?;
        let mut q_sum = g.matmul(parts[0], wq_h)?;
        for &part in &parts[1..] {
            let q = g.matmul(part, wq_h)?;
            q_sum = g.add(q_sum, q)?;
        }
        let q = g.scale(q_sum, 1.0 / steps as f64);
        let mut scores = Vec::with_capacity(steps);
        for &part in &parts {
            let k = g.matmul(part, wk_h)?;
            let qk = g.mul(q, k)?;
            let s = g.sum(qk, 3, true)?;
            scores.push(g.scale(s, inv_sqrt));
        }
        let cs: Vec<Var> = match mode {
            AggregationMode::Signed => scores
                .iter()
                .enumerate()
                .map(|(l, &s)| {
                    let t = g.tanh(s);
                    let b = g.slice(bias, 0, l, 1)?;
                    g.mul(t, b)
                })
                .collect::<Result<_>>()?,
            AggregationMode::PositiveOnly => {
                let all = g.concat(&scores, 3)?;
                let sm = g.softmax(all, 3)?;
                (0..steps).map(|l| g.slice(sm, 3, l, 1)).collect::<Result<_>>()?
            }
        };
        outs.push(weighted_sum(g, &parts, &cs)?);
        coeffs.push(cs);
    }
    let z = if heads == 1 { outs[0] } else { g.concat(&outs, 3)? };
    Ok(Aggregate { z, coeffs })
}

fn weighted_sum(g: &mut Graph, parts: &[Var], coeffs: &[Var]) -> Result<Var> {
    let mut acc = g.mul(coeffs[0], parts[0])?;
    for (&c, &h) in coeffs.iter().zip(parts).skip(1) {
        let t = g.mul(c, h)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `z = sum_l c_l H^(l)` with fixed scalar coefficients.
pub fn aggregate_with_coefficients(g: &mut Graph, stack: &[Var], coeffs: &[f64]) -> Result<Var> {
    check_stack(g, stack)?;
    if coeffs.len() != stack.len() {
        return Err(Error::invalid(format!("{} coefficients for {} states", coeffs.len(), stack.len())));
    }
    let mut acc = g.scale(stack[0], coeffs[0]);
    for (&h, &c) in stack.iter().zip(coeffs).skip(1) {
        let t = g.scale(h, c);
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `sum_l softmax(w)_l H^(l)` with `fusion.w` of length `L + 1`.
pub fn softmax_fusion(g: &mut Graph, p: &BoundParams, stack: &[Var]) -> Result<Var> {
    check_stack(g, stack)?;
    let w = p.get("fusion.w")?;
    if g.shape(w) != [stack.len()] {
        return Err(Error::invalid(format!("fusion.w {:?} for {} states", g.shape(w), stack.len())));
    }
    let sm = g.softmax(w, 0)?;
    let cs: Vec<Var> = (0..stack.len()).map(|l| g.slice(sm, 0, l, 1)).collect::<Result<_>>()?;
    weighted_sum(g, stack, &cs)
}

#[derive(Debug, Clone, Copy)]
pub struct GatedOutput {
    pub fused: Var,
    pub gate: Var,
    pub z_hat: Var,
}

/// Picks the fused state for `mode` from the signed aggregate and the stack.
pub fn fuse(g: &mut Graph, p: &BoundParams, z_signed: Var, stack: &[Var], mode: FusionMode) -> Result<Var> {
    match mode {
        FusionMode::Signed => Ok(z_signed),
        FusionMode::Softmax => softmax_fusion(g, p, stack),
        FusionMode::SumOfBoth => {
            let s = softmax_fusion(g, p, stack)?;
            g.add(z_signed, s)
        }
    }
}

/// `g = sigmoid(z W_z + e W_e + b)`, `z^ = g z + (1 - g) e` with the identity
/// embedding `e_id` of shape `(N × D)` broadcast over batch and time.
pub fn identity_gate(g: &mut Graph, p: &BoundParams, z: Var, e_id: Var) -> Result<GatedOutput> {
    let zs = g.shape(z).to_vec();
    let es = g.shape(e_id).to_vec();
    if zs.len() != 4 || es.len() != 2 || es[0] != zs[2] || es[1] != zs[3] {
        return Err(Error::invalid(format!("identity embedding {es:?} does not match state {zs:?}")));
    }
    let a = g.matmul(z, p.get("gate.w_z")?)?;
    let b = g.matmul(e_id, p.get("gate.w_e")?)?;
    let logits = g.add(a, b)?;
    let logits = g.add(logits, p.get("gate.b")?)?;
    let gate = g.sigmoid(logits);
    let z_hat = gated_mix(g, gate, z, e_id)?;
    Ok(GatedOutput { fused: z, gate, z_hat })
}

/// `gate z + (1 - gate) e`.
pub fn gated_mix(g: &mut Graph, gate: Var, z: Var, e: Var) -> Result<Var> {
    let gz = g.mul(gate, z)?;
    let neg = g.scale(gate, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let ge = g.mul(one_minus, e)?;
    g.add(gz, ge)
}

/// Fusion followed by the identity gate.
pub fn fuse_and_gate(
    g: &mut Graph,
    p: &BoundParams,
    z_signed: Var,
    stack: &[Var],
    e_id: Var,
    mode: FusionMode,
) -> Result<GatedOutput> {
    let fused = fuse(g, p, z_signed, stack, mode)?;
    identity_gate(g, p, fused, e_id)
}

/// Per-station MLP over the flattened window: `(T·D) -> hidden -> (tau·C)`.
/// Input `(B × T × N × D)`, output `(B × tau × N × C)`.
pub fn forecast_head(g: &mut Graph, p: &BoundParams, z_hat: Var, horizon: usize, channels: usize) -> Result<Var> {
    let s = g.shape(z_hat).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(format!("head input must be rank 4, got {s:?}")));
    }
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    let w1 = p.get("head.w1")?;
    let w2 = p.get("head.w2")?;
    if g.shape(w1)[0] != t * d || g.shape(w2)[1] != horizon * channels {
        return Err(Error::invalid(format!(
            "head weights {:?}/{:?} for window {t}x{d} and output {horizon}x{channels}",
            g.shape(w1),
            g.shape(w2)
        )));
    }
    let x = g.permute(z_hat, &[0, 2, 1, 3])?;
    let x = g.reshape(x, &[b, n, t * d])?;
    let x = g.matmul(x, w1)?;
    let x = g.add(x, p.get("head.b1")?)?;
    let x = g.relu(x);
    let x = g.matmul(x, w2)?;
    let x = g.add(x, p.get("head.b2")?)?;
    let x = g.reshape(x, &[b, n, horizon, channels])?;
    g.permute(x, &[0, 2, 1, 3])
}
