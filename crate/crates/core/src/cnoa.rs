//! Chaotic neural oscillatory attention.
//!
//! Attention scores `S = ReLU(Q Kᵀ)` drive a Lee oscillator: an
//! excitatory/inhibitory pair iterated from rest,
//!
//! ```text
//! E ← ReLU(e1·E + e2·I + S − τe)
//! I ← ReLU(i1·E + i2·I − τi)
//! ```
//!
//! and the oscillator output `Osc = (E − I)·exp(−k·S²) + ReLU(S)` replaces the
//! raw scores inside the softmax. Each head's output is scaled by the
//! stabiliser `exp(−γ‖α − α_prev‖²)`, where `α_prev` is the attention of the
//! previous forward pass. Plain scaled dot-product attention is available as
//! the ablation comparator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var, EXP_CLAMP};
use crate::math;
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorParams {
    pub e1: f64,
    pub e2: f64,
    pub i1: f64,
    pub i2: f64,
    pub tau_e: f64,
    pub tau_i: f64,
    /// Decay-rate coefficient of `exp(−k·S²)`.
    pub k: f64,
    /// Internal oscillator iterations per forward pass.
    pub iterations: usize,
    /// Stabiliser strength.
    pub gamma: f64,
}

impl Default for OscillatorParams {
    fn default() -> Self {
        OscillatorParams { e1: 1.0, e2: -1.0, i1: 1.0, i2: 1.0, tau_e: 0.0, tau_i: 0.0, k: -500.0, iterations: 1, gamma: 1.0 }
    }
}

impl OscillatorParams {
    /// Symmetric coefficients with thresholds far above any attention score,
    /// so both neurons stay at rest (`E = I = 0`) and the oscillator output
    /// reduces to `ReLU(S)`. The stabiliser is switched off.
    pub fn quiescent() -> Self {
        OscillatorParams { e1: 0.5, e2: -0.5, i1: 0.5, i2: -0.5, tau_e: 1e6, tau_i: 1e6, k: 1.0, iterations: 1, gamma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, "oscillator iterations must be at least 1");
        let vals = [self.e1, self.e2, self.i1, self.i2, self.tau_e, self.tau_i, self.k, self.gamma];
        ensure!(vals.iter().all(|v| v.is_finite()), "oscillator parameters must be finite");
        ensure!(self.gamma >= 0.0, "gamma must be non-negative, got {}", self.gamma);
        Ok(())
    }
}

/// Runs the excitatory/inhibitory recurrence from `E = I = 0` for
/// `p.iterations` steps, elementwise over `scores`.
pub fn oscillator_iterate(scores: &Tensor, p: &OscillatorParams) -> Result<(Tensor, Tensor)> {
    if !scores.is_finite() {
        return Err(Error::Numeric { op: "oscillator" });
    }
    p.validate()?;
    let n = scores.len();
    let (mut e, mut i) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..p.iterations {
        for j in 0..n {
            let (ej, ij) = (e[j], i[j]);
            e[j] = f64::max(p.e1 * ej + p.e2 * ij + scores.data()[j] - p.tau_e, 0.0);
            i[j] = f64::max(p.i1 * ej + p.i2 * ij - p.tau_i, 0.0);
        }
    }
    let shape = scores.shape().to_vec();
    Ok((Tensor::from_parts(shape.clone(), e), Tensor::from_parts(shape, i)))
}

/// `(E − I)·exp(clamp(−k·S², ±50)) + ReLU(S)`, elementwise.
pub fn oscillator_output(e: &Tensor, i: &Tensor, scores: &Tensor, p: &OscillatorParams) -> Tensor {
    assert!(e.shape() == i.shape() && e.shape() == scores.shape(), "oscillator shape mismatch");
    let data = e
        .data()
        .iter()
        .zip(i.data())
        .zip(scores.data())
        .map(|((&e, &i), &s)| (e - i) * math::exp((-p.k * s * s).clamp(-EXP_CLAMP, EXP_CLAMP)) + f64::max(s, 0.0))
        .collect();
    Tensor::from_parts(scores.shape().to_vec(), data)
}

/// Differentiable oscillator transform of a score node.
pub fn oscillate(g: &mut Graph, scores: Var, p: &OscillatorParams) -> Var {
    // `None` stands for an all-zero state, which is where the recurrence starts.
    let (mut e, mut i): (Option<Var>, Option<Var>) = (None, None);
    for _ in 0..p.iterations {
        let mut e_in = scores;
        if let Some(ev) = e {
            let t = g.scale(ev, p.e1);
            e_in = g.add(e_in, t);
        }
        if let Some(iv) = i {
            let t = g.scale(iv, p.e2);
            e_in = g.add(e_in, t);
        }
        let e_in = g.shift(e_in, -p.tau_e);
        let e_next = g.relu(e_in);

        let i_next = match (e, i) {
            (None, None) => {
                let shape = g.value(scores).shape().to_vec();
                g.constant(Tensor::full(&shape, f64::max(-p.tau_i, 0.0)))
            }
            (Some(ev), None) => {
                let t = g.scale(ev, p.i1);
                let t = g.shift(t, -p.tau_i);
                g.relu(t)
            }
            (None, Some(iv)) => {
                let t = g.scale(iv, p.i2);
                let t = g.shift(t, -p.tau_i);
                g.relu(t)
            }
            (Some(ev), Some(iv)) => {
                let a = g.scale(ev, p.i1);
                let b = g.scale(iv, p.i2);
                let t = g.add(a, b);
                let t = g.shift(t, -p.tau_i);
                g.relu(t)
            }
        };
        e = Some(e_next);
        i = Some(i_next);
    }
    let (e, i) = (e.expect("at least one iteration"), i.expect("at least one iteration"));
    let diff = g.sub(e, i);
    let sq = g.square(scores);
    let arg = g.scale(sq, -p.k);
    let decay = g.exp(arg);
    let chaotic = g.mul(diff, decay);
    let stable = g.relu(scores);
    g.add(chaotic, stable)
}

/// Per-head query/key/value projections and the shared output projection.
///
/// Head `r` uses columns `r·d_R..(r+1)·d_R` of `W_Q`, `W_K`, `W_V` and rows
/// `r·d_R..(r+1)·d_R` of `W_O`, so summing per-head outputs through their
/// `W_O` blocks equals projecting the concatenated heads.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionProjections {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        heads: usize,
        head_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(heads > 0 && head_dim > 0, "attention `{name}` needs positive heads and head dim");
        let inner = heads * head_dim;
        let mut mat = |suffix: &str, rows: usize, cols: usize| {
            let bound = 1.0 / math::sqrt(rows as f64);
            reg.register(&format!("{name}.{suffix}"), Tensor::uniform(&[rows, cols], bound, rng))
        };
        Ok(AttentionProjections {
            wq: mat("wq", query_dim, inner)?,
            wk: mat("wk", key_dim, inner)?,
            wv: mat("wv", key_dim, inner)?,
            wo: mat("wo", inner, out_dim)?,
            heads,
            head_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Oscillator-modulated scores with the stabiliser.
    Cnoa,
    /// Plain scaled dot-product attention.
    Cross,
}

/// Attention weights and projected values of one instance, per head.
#[derive(Debug, Clone)]
pub struct HeadAttention {
    pub alphas: Vec<Var>,
    pub values: Vec<Var>,
}

/// Previous attention distributions, one stacked `[rows, keys]` matrix per
/// head. `None` is the uniform sentinel used before the first pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CnoaState {
    pub prev: Option<Vec<Tensor>>,
}

impl CnoaState {
    pub fn uniform() -> Self {
        CnoaState { prev: None }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    /// The stored weights if they match `heads × [rows, keys]`, else uniform.
    fn previous(&self, heads: usize, rows: usize, keys: usize) -> Vec<Tensor> {
        match &self.prev {
            Some(p) if p.len() == heads && p.iter().all(|t| t.shape() == [rows, keys]) => p.clone(),
            _ => (0..heads).map(|_| Tensor::full(&[rows, keys], 1.0 / keys as f64)).collect(),
        }
    }

    fn capture(g: &Graph, alphas: &[Var]) -> Self {
        CnoaState { prev: Some(alphas.iter().map(|&a| g.value(a).clone()).collect()) }
    }
}

fn check_lengths(g: &Graph, keys: Var, values: Var) -> Result<()> {
    let (nk, nv) = (g.value(keys).rows(), g.value(values).rows());
    ensure!(nk == nv, "keys have {nk} rows but values have {nv}");
    Ok(())
}

/// Computes per-head weights for one instance.
#[allow(clippy::too_many_arguments)]
pub fn head_attention(
    g: &mut Graph,
    reg: &ParamRegistry,
    proj: &AttentionProjections,
    kind: AttentionKind,
    osc: &OscillatorParams,
    query: Var,
    keys: Var,
    values: Var,
) -> Result<HeadAttention> {
    check_lengths(g, keys, values)?;
    let (wq, wk, wv) = (g.param(reg, proj.wq), g.param(reg, proj.wk), g.param(reg, proj.wv));
    let q = g.matmul(query, wq);
    let k = g.matmul(keys, wk);
    let v = g.matmul(values, wv);
    Ok(projected_attention(g, proj.heads, proj.head_dim, kind, osc, q, k, v))
}

/// Per-head weights from already projected `[n, R·d_R]` queries, keys and
/// values, for callers that project many instances in one product.
#[allow(clippy::too_many_arguments)]
pub fn projected_attention(
    g: &mut Graph,
    heads: usize,
    head_dim: usize,
    kind: AttentionKind,
    osc: &OscillatorParams,
    q: Var,
    k: Var,
    v: Var,
) -> HeadAttention {
    let scale = 1.0 / math::sqrt(head_dim as f64);
    let mut out = HeadAttention { alphas: Vec::with_capacity(heads), values: Vec::with_capacity(heads) };
    for r in 0..heads {
        let (lo, hi) = (r * head_dim, (r + 1) * head_dim);
        let qr = if heads == 1 { q } else { g.slice_cols(q, lo, hi) };
        let kr = if heads == 1 { k } else { g.slice_cols(k, lo, hi) };
        let vr = if heads == 1 { v } else { g.slice_cols(v, lo, hi) };
        let raw = g.matmul_t(qr, kr);
        let logits = match kind {
            AttentionKind::Cnoa => {
                let s = g.relu(raw);
                oscillate(g, s, osc)
            }
            AttentionKind::Cross => raw,
        };
        let logits = g.scale(logits, scale);
        out.alphas.push(g.softmax(logits));
        out.values.push(vr);
    }
    out
}

/// `[s_1·α_1 V_1 | … | s_R·α_R V_R]`, with `s_r = 1` when `stabilizers` is
/// `None`.
pub fn concat_heads(g: &mut Graph, heads: &HeadAttention, stabilizers: Option<&[Var]>) -> Var {
    let mut outs = Vec::with_capacity(heads.alphas.len());
    for r in 0..heads.alphas.len() {
        let mut h = g.matmul(heads.alphas[r], heads.values[r]);
        if let Some(s) = stabilizers {
            h = g.scale_by(h, s[r]);
        }
        outs.push(h);
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// `Σ_r s_r·(α_r V_r)·W_O[r]`, with `s_r = 1` when `stabilizers` is `None`.
pub fn combine_heads(
    g: &mut Graph,
    reg: &ParamRegistry,
    proj: &AttentionProjections,
    heads: &HeadAttention,
    stabilizers: Option<&[Var]>,
) -> Var {
    let cat = concat_heads(g, heads, stabilizers);
    let wo = g.param(reg, proj.wo);
    g.matmul(cat, wo)
}

/// Per-head stabilisers `exp(−γ·‖α_r − α_r^prev‖²_F)` for one instance.
/// `α_prev` enters as a constant. Returns the stabiliser nodes and the next
/// state holding the current (detached) weights.
pub fn stabilizers(g: &mut Graph, heads: &HeadAttention, state: &CnoaState, gamma: f64) -> (Vec<Var>, CnoaState) {
    let (rows, keys) = (g.value(heads.alphas[0]).rows(), g.value(heads.alphas[0]).cols());
    let prev = state.previous(heads.alphas.len(), rows, keys);
    let mut out = Vec::with_capacity(heads.alphas.len());
    for (&a, p) in heads.alphas.iter().zip(prev) {
        let p = g.constant(p);
        let d = g.sub(a, p);
        let sq = g.square(d);
        let s = g.sum(sq);
        let scaled = g.scale(s, -gamma);
        out.push(g.exp(scaled));
    }
    (out, CnoaState::capture(g, &heads.alphas))
}

/// Stabilisers for a stack of single-query instances: row `b` of each
/// `[B, keys]` weight matrix is its own instance, compared against row `b`
/// of the previous pass. Returns one `[B, 1]` column per head.
pub fn row_stabilizers(g: &mut Graph, alphas: &[Var], state: &CnoaState, gamma: f64) -> (Vec<Var>, CnoaState) {
    let (rows, keys) = (g.value(alphas[0]).rows(), g.value(alphas[0]).cols());
    let prev = state.previous(alphas.len(), rows, keys);
    let ones = g.constant(Tensor::full(&[keys, 1], 1.0));
    let mut out = Vec::with_capacity(alphas.len());
    for (&a, p) in alphas.iter().zip(prev) {
        let p = g.constant(p);
        let d = g.sub(a, p);
        let sq = g.square(d);
        let per_row = g.matmul(sq, ones);
        let scaled = g.scale(per_row, -gamma);
        out.push(g.exp(scaled));
    }
    (out, CnoaState::capture(g, alphas))
}

/// Multiplies row `b` of `x: [B, w]` by `s[b]` for `s: [B, 1]`.
pub fn scale_rows(g: &mut Graph, x: Var, s: Var) -> Var {
    let w = g.value(x).cols();
    let ones = g.constant(Tensor::full(&[1, w], 1.0));
    let spread = g.matmul(s, ones);
    g.mul(x, spread)
}

/// Output projection for stacked single-query instances, given per-head
/// weights `[B, keys]` and head outputs `α_r V_r` stacked to `[B, d_R]`.
/// With [`AttentionKind::Cnoa`] each row is scaled by its own stabiliser.
#[allow(clippy::too_many_arguments)]
pub fn stacked_output(
    g: &mut Graph,
    reg: &ParamRegistry,
    proj: &AttentionProjections,
    kind: AttentionKind,
    gamma: f64,
    alphas: &[Var],
    head_outputs: &[Var],
    state: &CnoaState,
) -> (Var, CnoaState) {
    let (outs, next) = match kind {
        AttentionKind::Cnoa => {
            let (stab, next) = row_stabilizers(g, alphas, state, gamma);
            let outs = head_outputs.iter().zip(stab).map(|(&h, s)| scale_rows(g, h, s)).collect();
            (outs, next)
        }
        AttentionKind::Cross => (head_outputs.to_vec(), state.clone()),
    };
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    let wo = g.param(reg, proj.wo);
    (g.matmul(cat, wo), next)
}

/// Oscillatory attention for a single instance.
#[allow(clippy::too_many_arguments)]
pub fn cnoa_attention(
    g: &mut Graph,
    reg: &ParamRegistry,
    proj: &AttentionProjections,
    osc: &OscillatorParams,
    query: Var,
    keys: Var,
    values: Var,
    state: &CnoaState,
) -> Result<(Var, CnoaState)> {
    let heads = head_attention(g, reg, proj, AttentionKind::Cnoa, osc, query, keys, values)?;
    let (stab, next) = stabilizers(g, &heads, state, osc.gamma);
    Ok((combine_heads(g, reg, proj, &heads, Some(&stab)), next))
}

/// Standard multi-head scaled dot-product attention for a single instance.
pub fn cross_attention(
    g: &mut Graph,
    reg: &ParamRegistry,
    proj: &AttentionProjections,
    query: Var,
    keys: Var,
    values: Var,
) -> Result<Var> {
    let osc = OscillatorParams::default();
    let heads = head_attention(g, reg, proj, AttentionKind::Cross, &osc, query, keys, values)?;
    Ok(combine_heads(g, reg, proj, &heads, None))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_params(iterations: usize) -> OscillatorParams {
        OscillatorParams { e1: 1.0, e2: -1.0, i1: 1.0, i2: 1.0, tau_e: 0.0, tau_i: 0.0, k: 1.0, iterations, gamma: 1.0 }
    }

    #[test]
    fn zero_input_is_a_fixed_point() {
        let s = Tensor::zeros(&[2, 3]);
        let p = OscillatorParams { e1: 0.7, e2: -3.0, i1: 2.0, i2: 0.4, tau_e: 0.0, tau_i: 0.0, k: 1.0, iterations: 5, gamma: 1.0 };
        let (e, i) = oscillator_iterate(&s, &p).unwrap();
        assert!(e.data().iter().chain(i.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn hand_stepped_recurrence() {
        let s = Tensor::scalar(1.0);
        let (e, i) = oscillator_iterate(&s, &example_params(1)).unwrap();
        assert_eq!((e.item(), i.item()), (1.0, 0.0));
        let (e, i) = oscillator_iterate(&s, &example_params(2)).unwrap();
        assert_eq!((e.item(), i.item()), (2.0, 1.0));
    }

    #[test]
    fn output_limits() {
        let p = example_params(1);
        let o = oscillator_output(&Tensor::scalar(1.0), &Tensor::scalar(0.0), &Tensor::scalar(1.0), &p);
        assert!((o.item() - (libm::exp(-1.0) + 1.0)).abs() < 1e-15);
        assert!((o.item() - 1.36788).abs() < 1e-5);

        let o = oscillator_output(&Tensor::scalar(3.0), &Tensor::scalar(-2.0), &Tensor::scalar(10.0), &p);
        assert!((o.item() - 10.0).abs() < 1e-12);

        let o = oscillator_output(&Tensor::scalar(0.75), &Tensor::scalar(0.25), &Tensor::scalar(0.0), &p);
        assert_eq!(o.item(), 0.5);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert_eq!(oscillator_iterate(&Tensor::scalar(f64::NAN), &example_params(1)).unwrap_err(), Error::Numeric { op: "oscillator" });
    }

    #[test]
    fn graph_oscillator_matches_plain_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for iterations in 1..5 {
            let p = OscillatorParams { e1: 1.0, e2: -1.0, i1: 0.5, i2: 1.0, tau_e: 0.1, tau_i: -0.2, k: 2.0, iterations, gamma: 1.0 };
            let s = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let s = Tensor::matrix(3, 4, s.data().iter().map(|v| v.abs()).collect());
            let (e, i) = oscillator_iterate(&s, &p).unwrap();
            let expected = oscillator_output(&e, &i, &s, &p);
            let mut g = Graph::new();
            let sv = g.constant(s);
            let o = oscillate(&mut g, sv, &p);
            assert!(g.value(o).max_abs_diff(&expected) < 1e-14);
        }
    }

    fn setup(heads: usize, head_dim: usize, qd: usize, kd: usize, seed: u64) -> (ParamRegistry, AttentionProjections, ChaCha8Rng) {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = AttentionProjections::register(&mut reg, "att", qd, kd, heads, head_dim, heads * head_dim, &mut rng).unwrap();
        (reg, proj, rng)
    }

    /// Direct loop evaluation of softmax(f(Q_r K_rᵀ) / sqrt(d_R)) for head `r`.
    fn oracle_weights(q: &Tensor, k: &Tensor, reg: &ParamRegistry, proj: &AttentionProjections, r: usize, relu: bool) -> Vec<Vec<f64>> {
        let (wq, wk) = (reg.value(proj.wq), reg.value(proj.wk));
        let dr = proj.head_dim;
        let project = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..dr).map(|c| x.iter().enumerate().map(|(i, xi)| xi * w.at(i, r * dr + c)).sum()).collect()
        };
        (0..q.rows())
            .map(|i| {
                let qi = project(q.row(i), wq);
                let scores: Vec<f64> = (0..k.rows())
                    .map(|j| {
                        let kj = project(k.row(j), wk);
                        let dot: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
                        let s = if relu { dot.max(0.0) } else { dot };
                        s / (dr as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                scores.iter().map(|s| (s - m).exp() / z).collect()
            })
            .collect()
    }

    #[test]
    fn silent_oscillator_reduces_to_relu_attention() {
        for seed in 0..50 {
            let (reg, proj, mut rng) = setup(2, 3, 5, 4, seed);
            let nq = 1 + (seed as usize % 3);
            let nk = 2 + (seed as usize % 5);
            let q = Tensor::uniform(&[nq, 5], 2.0, &mut rng);
            let k = Tensor::uniform(&[nk, 4], 2.0, &mut rng);
            let mut g = Graph::new();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let heads = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &OscillatorParams::quiescent(), qv, kv, kv).unwrap();
            for r in 0..2 {
                let expected = oracle_weights(&q, &k, &reg, &proj, r, true);
                let got = g.value(heads.alphas[r]);
                for i in 0..nq {
                    for j in 0..nk {
                        assert!((got.at(i, j) - expected[i][j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_attention_matches_brute_force() {
        let (reg, proj, mut rng) = setup(1, 2, 2, 2, 8);
        let q = Tensor::uniform(&[2, 2], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
        let heads = head_attention(&mut g, &reg, &proj, AttentionKind::Cross, &OscillatorParams::default(), qv, kv, kv).unwrap();
        let expected = oracle_weights(&q, &k, &reg, &proj, 0, false);
        let got = g.value(heads.alphas[0]);
        for i in 0..2 {
            for j in 0..3 {
                assert!((got.at(i, j) - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let (reg, proj, mut rng) = setup(2, 2, 3, 3, 1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(&[1, 3], 5.0, &mut rng));
        let k = g.constant(Tensor::uniform(&[1, 3], 5.0, &mut rng));
        for kind in [AttentionKind::Cross, AttentionKind::Cnoa] {
            let heads = head_attention(&mut g, &reg, &proj, kind, &OscillatorParams::default(), q, k, k).unwrap();
            for &a in &heads.alphas {
                assert_eq!(g.value(a).data(), &[1.0]);
            }
        }
    }

    #[test]
    fn identical_value_rows_pass_through() {
        let (mut reg, proj, mut rng) = setup(1, 3, 3, 3, 2);
        *reg.value_mut(proj.wv) = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        *reg.value_mut(proj.wo) = reg.value(proj.wv).clone();
        let v = [0.4, -1.0, 2.5];
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng));
        let k = g.constant(Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let vals = g.constant(Tensor::from_rows(&[v.to_vec(), v.to_vec(), v.to_vec(), v.to_vec()]));
        let out = cross_attention(&mut g, &reg, &proj, q, k, vals).unwrap();
        for (a, b) in g.value(out).data().iter().zip(v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let (reg, proj, mut rng) = setup(2, 2, 3, 3, 4);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng));
        let row = [0.3, -0.2, 0.9];
        let k = g.constant(Tensor::from_rows(&[row.to_vec(), row.to_vec(), row.to_vec(), row.to_vec(), row.to_vec()]));
        let heads = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &OscillatorParams::default(), q, k, k).unwrap();
        for &a in &heads.alphas {
            assert!(g.value(a).data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let (reg, proj, _) = setup(1, 2, 2, 2, 0);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let k = g.constant(Tensor::zeros(&[3, 2]));
        let v = g.constant(Tensor::zeros(&[2, 2]));
        assert!(cnoa_attention(&mut g, &reg, &proj, &OscillatorParams::default(), q, k, v, &CnoaState::uniform()).is_err());
        assert!(cross_attention(&mut g, &reg, &proj, q, k, v).is_err());
    }

    #[test]
    fn zero_gamma_ignores_state() {
        let (reg, proj, mut rng) = setup(2, 2, 4, 4, 6);
        let q = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let k = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let p = OscillatorParams { gamma: 0.0, k: 1.0, ..OscillatorParams::default() };
        let weird = CnoaState { prev: Some(vec![Tensor::full(&[1, 5], 0.0), Tensor::full(&[1, 5], 1.0)]) };
        let run = |state: &CnoaState| {
            let mut g = Graph::new();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let heads = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &p, qv, kv, kv).unwrap();
            let (stab, _) = stabilizers(&mut g, &heads, state, p.gamma);
            assert!(stab.iter().all(|&s| g.value(s).item() == 1.0));
            let out = combine_heads(&mut g, &reg, &proj, &heads, Some(&stab));
            g.value(out).clone()
        };
        assert_eq!(run(&CnoaState::uniform()), run(&weird));
    }

    #[test]
    fn stabilizer_is_one_iff_unchanged() {
        let (reg, proj, mut rng) = setup(2, 2, 4, 4, 7);
        let q = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let p = OscillatorParams { gamma: 2.0, k: 1.0, ..OscillatorParams::default() };
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q), g.constant(k));
        let (_, state) = cnoa_attention(&mut g, &reg, &proj, &p, qv, kv, kv, &CnoaState::uniform()).unwrap();
        let heads = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &p, qv, kv, kv).unwrap();
        let (stab, next) = stabilizers(&mut g, &heads, &state, p.gamma);
        assert!(stab.iter().all(|&s| g.value(s).item() == 1.0));
        assert_eq!(next, state);
        let (stab, _) = stabilizers(&mut g, &heads, &CnoaState::uniform(), p.gamma);
        for &s in &stab {
            let v = g.value(s).item();
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn row_stabilizers_match_single_instances() {
        let (reg, proj, mut rng) = setup(2, 2, 3, 3, 9);
        let p = OscillatorParams { gamma: 1.5, k: 1.0, ..OscillatorParams::default() };
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(&[3, 3], 1.0, &mut rng));
        let k = g.constant(Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let stacked = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &p, q, k, k).unwrap();
        let prev = CnoaState { prev: Some(vec![Tensor::uniform(&[3, 4], 1.0, &mut rng), Tensor::full(&[3, 4], 0.25)]) };
        let (cols, next) = row_stabilizers(&mut g, &stacked.alphas, &prev, p.gamma);
        assert_eq!(next.prev.as_ref().unwrap()[1], *g.value(stacked.alphas[1]));
        for b in 0..3 {
            let qb = g.slice_rows(q, b, b + 1);
            let single = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &p, qb, k, k).unwrap();
            let rows: Vec<Tensor> = prev.prev.as_ref().unwrap().iter().map(|t| Tensor::matrix(1, 4, t.row(b).to_vec())).collect();
            let (s, _) = stabilizers(&mut g, &single, &CnoaState { prev: Some(rows) }, p.gamma);
            for r in 0..2 {
                assert!((g.value(cols[r]).data()[b] - g.value(s[r]).item()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scale_rows_multiplies_each_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.constant(Tensor::matrix(2, 1, vec![0.5, -2.0]));
        let y = scale_rows(&mut g, x, s);
        assert_eq!(g.value(y).data(), &[0.5, 1.0, 1.5, -8.0, -10.0, -12.0]);
    }

    #[test]
    fn state_shape_change_falls_back_to_uniform() {
        let (reg, proj, mut rng) = setup(1, 2, 2, 2, 3);
        let p = OscillatorParams { gamma: 1.0, k: 1.0, ..OscillatorParams::default() };
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(&[1, 2], 1.0, &mut rng));
        let k = g.constant(Tensor::uniform(&[4, 2], 1.0, &mut rng));
        let mismatched = CnoaState { prev: Some(vec![Tensor::full(&[2, 4], 0.25)]) };
        let (a, _) = cnoa_attention(&mut g, &reg, &proj, &p, q, k, k, &mismatched).unwrap();
        let (b, _) = cnoa_attention(&mut g, &reg, &proj, &p, q, k, k, &CnoaState::uniform()).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn deterministic_output_and_state() {
        let (reg, proj, mut rng) = setup(2, 3, 6, 6, 5);
        let q = Tensor::uniform(&[1, 6], 1.0, &mut rng);
        let k = Tensor::uniform(&[7, 6], 1.0, &mut rng);
        let p = OscillatorParams::default();
        let run = || {
            let mut g = Graph::new();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let (o, s) = cnoa_attention(&mut g, &reg, &proj, &p, qv, kv, kv, &CnoaState::uniform()).unwrap();
            (g.value(o).clone(), s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut reg, proj, mut rng) = setup(2, 3, 5, 4, 12);
        let q = Tensor::uniform(&[2, 5], 1.0, &mut rng);
        let k = Tensor::uniform(&[6, 4], 1.0, &mut rng);
        let p = OscillatorParams { e1: 1.0, e2: -1.0, i1: 1.0, i2: 1.0, tau_e: 0.0, tau_i: 0.0, k: 0.5, iterations: 3, gamma: 0.7 };
        let state = CnoaState { prev: Some(vec![Tensor::full(&[2, 6], 1.0 / 6.0), Tensor::uniform(&[2, 6], 0.3, &mut rng)]) };
        let report = grad_check(&mut reg, 1e-5, |reg, g| {
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let (o, _) = cnoa_attention(g, reg, &proj, &p, qv, kv, kv, &state)?;
            let sq = g.square(o);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_are_distributions(
            e1 in -1.0f64..=1.0, e2 in -1.0f64..=1.0,
            i1 in -10.0f64..10.0, i2 in -10.0f64..10.0,
            tau_e in -10.0f64..10.0, tau_i in -10.0f64..10.0,
            k in -500.0f64..500.0, iterations in 1usize..6,
            seed in 0u64..10_000,
        ) {
            let (reg, proj, mut rng) = setup(2, 2, 3, 3, seed);
            let p = OscillatorParams { e1, e2, i1, i2, tau_e, tau_i, k, iterations, gamma: 1.0 };
            let mut g = Graph::new();
            let q = g.constant(Tensor::uniform(&[2, 3], 3.0, &mut rng));
            let kv = g.constant(Tensor::uniform(&[5, 3], 3.0, &mut rng));
            let heads = head_attention(&mut g, &reg, &proj, AttentionKind::Cnoa, &p, q, kv, kv).unwrap();
            for &a in &heads.alphas {
                let t = g.value(a);
                for r in 0..t.rows() {
                    prop_assert!(t.row(r).iter().all(|&w| w >= 0.0));
                    prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn high_affinity_gap_bound(
            c in 0.1f64..3.0, k in 0.1f64..5.0,
            scores in proptest::collection::vec(0.0f64..4.0, 1..12),
            e1 in -1.0f64..=1.0, e2 in -1.0f64..=1.0,
            i1 in -3.0f64..3.0, i2 in -3.0f64..3.0,
            iterations in 1usize..4,
        ) {
            let s: Vec<f64> = scores.iter().map(|v| v + c).collect();
            let s = Tensor::vector(s);
            let p = OscillatorParams { e1, e2, i1, i2, tau_e: 0.0, tau_i: 0.0, k, iterations, gamma: 1.0 };
            let (e, i) = oscillator_iterate(&s, &p).unwrap();
            let o = oscillator_output(&e, &i, &s, &p);
            let max_diff = e.data().iter().zip(i.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let bound = max_diff * libm::exp(-k * c * c);
            for (ov, sv) in o.data().iter().zip(s.data()) {
                prop_assert!((ov - sv.max(0.0)).abs() <= bound * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
