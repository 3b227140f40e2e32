//! The tri-pair interaction encoder.
//!
//! Three pairwise views of a window are produced for a whole batch at once:
//!
//! * user-location: an MLP over the user's topic mixture (`O_us`, `[B, d]`);
//! * time-user: attention from `[user ⊕ current slot]` over the smoothed
//!   time table (`O_ut`, `[B, d]`);
//! * location-time: a causal transformer over the context window
//!   (`O_st`, `[B·n, 2d]`, each row `[H ; X_proj]`).

use alloc::format;
use alloc::vec::Vec;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cnoa::{self, AttentionKind, AttentionProjections, CnoaState, OscillatorParams};
use crate::embeddings::{EmbeddingTable, SmoothedTimeEmbedding, TimeSmoothing};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;
use crate::topics::UserLocationHead;

/// Additive mask value for attention to future positions.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Feed-forward hidden width; `None` means `4·d`.
    pub ff_width: Option<usize>,
}

impl Default for SeqEncoderConfig {
    fn default() -> Self {
        SeqEncoderConfig { layers: 3, heads: 2, dropout: 0.1, ff_width: None }
    }
}

impl SeqEncoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        ensure!(self.layers > 0, "sequence encoder needs at least one layer");
        ensure!(self.heads > 0 && dim.is_multiple_of(self.heads), "model dim {dim} is not divisible by {} heads", self.heads);
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1), got {}", self.dropout);
        ensure!(self.ff_width != Some(0), "feed-forward width must be positive");
        Ok(())
    }

    pub fn ff_width(&self, dim: usize) -> usize {
        self.ff_width.unwrap_or(4 * dim)
    }
}

/// Fixed sinusoidal encoding: `sin(p / 10000^(2i/d))` on even columns,
/// `cos` of the same angle on odd ones.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for c in 0..dim {
            let pair = (c / 2) as f64 * 2.0;
            let angle = pos as f64 / math::powf(10_000.0, pair / dim as f64);
            data.push(if c % 2 == 0 { math::sin(angle) } else { math::cos(angle) });
        }
    }
    Tensor::matrix(len, dim, data)
}

/// `[len, len]` additive mask: 0 where key ≤ query, [`MASKED`] above.
pub fn causal_mask(len: usize) -> Tensor {
    let data = (0..len * len).map(|i| if i % len > i / len { MASKED } else { 0.0 }).collect();
    Tensor::matrix(len, len, data)
}

#[derive(Debug, Clone, Copy)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: SelfAttention,
    norm1: LayerNorm,
    ff: Mlp,
    norm2: LayerNorm,
}

/// Post-norm transformer encoder with a causal mask, run over several
/// equal-length sequences stacked as `[segments·len, d]`.
#[derive(Debug, Clone)]
pub struct CausalEncoder {
    layers: Vec<EncoderLayer>,
    heads: usize,
    dim: usize,
    dropout: f64,
}

impl CausalEncoder {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        dim: usize,
        cfg: &SeqEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.{l}");
            let attn = SelfAttention {
                q: Linear::register(reg, &format!("{p}.attn.q"), dim, dim, true, rng)?,
                k: Linear::register(reg, &format!("{p}.attn.k"), dim, dim, true, rng)?,
                v: Linear::register(reg, &format!("{p}.attn.v"), dim, dim, true, rng)?,
                o: Linear::register(reg, &format!("{p}.attn.o"), dim, dim, true, rng)?,
            };
            layers.push(EncoderLayer {
                attn,
                norm1: LayerNorm::register(reg, &format!("{p}.norm1"), dim)?,
                ff: Mlp::register(reg, &format!("{p}.ff"), dim, cfg.ff_width(dim), dim, rng)?,
                norm2: LayerNorm::register(reg, &format!("{p}.norm2"), dim)?,
            });
        }
        Ok(CausalEncoder { layers, heads: cfg.heads, dim, dropout: cfg.dropout })
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Encodes `x: [segments·len, d]`; positions only attend within their own
    /// segment and never to later positions. Dropout is applied only when an
    /// RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        reg: &ParamRegistry,
        x: Var,
        len: usize,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let rows = g.value(x).rows();
        ensure!(len > 0 && rows.is_multiple_of(len), "{rows} rows do not split into sequences of length {len}");
        ensure!(g.value(x).cols() == self.dim, "encoder expects width {}, got {}", self.dim, g.value(x).cols());
        let segments = rows / len;
        let mask = g.constant(causal_mask(len));
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / math::sqrt(head_dim as f64);

        let mut h = x;
        for layer in &self.layers {
            let q = layer.attn.q.forward(g, reg, h);
            let k = layer.attn.k.forward(g, reg, h);
            let v = layer.attn.v.forward(g, reg, h);
            let mut per_head = Vec::with_capacity(self.heads);
            for r in 0..self.heads {
                let (lo, hi) = (r * head_dim, (r + 1) * head_dim);
                let (qr, kr, vr) = if self.heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
                };
                let mut outs = Vec::with_capacity(segments);
                for s in 0..segments {
                    let (a, b) = (s * len, (s + 1) * len);
                    let (qs, ks, vs) = if segments == 1 {
                        (qr, kr, vr)
                    } else {
                        (g.slice_rows(qr, a, b), g.slice_rows(kr, a, b), g.slice_rows(vr, a, b))
                    };
                    let scores = g.matmul_t(qs, ks);
                    let scores = g.scale(scores, scale);
                    let scores = g.add(scores, mask);
                    let alpha = g.softmax(scores);
                    outs.push(g.matmul(alpha, vs));
                }
                per_head.push(if segments == 1 { outs[0] } else { g.concat_rows(&outs) });
            }
            let cat = if self.heads == 1 { per_head[0] } else { g.concat_cols(&per_head) };
            let mut attended = layer.attn.o.forward(g, reg, cat);
            if let Some(rng) = dropout.as_deref_mut() {
                attended = g.dropout(attended, self.dropout, rng);
            }
            let res = g.add(h, attended);
            h = layer.norm1.forward(g, reg, res);

            let mut ff = layer.ff.forward(g, reg, h);
            if let Some(rng) = dropout.as_deref_mut() {
                ff = g.dropout(ff, self.dropout, rng);
            }
            let res = g.add(h, ff);
            h = layer.norm2.forward(g, reg, res);
        }
        Ok(h)
    }
}

/// One window as seen by the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub user: usize,
    pub locations: &'a [usize],
    pub slots: &'a [usize],
    /// The user's topic mixture `C_u`.
    pub topic_mix: &'a Tensor,
}

/// Pair features for a batch of `B` windows of common context length `n`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[B, d]`
    pub o_us: Var,
    /// `[B, d]`
    pub o_ut: Var,
    /// `[B·n, 2d]`, window `b` in rows `b·n..(b+1)·n`.
    pub o_st: Var,
    /// The user embeddings `ẽ_u`, `[B, d]`.
    pub user: Var,
    pub batch: usize,
    pub context: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpiDims {
    pub users: usize,
    pub locations: usize,
    pub slots: usize,
    pub topics: usize,
    pub dim: usize,
    /// Attention heads of the time-user pair.
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct TpiEncoder {
    pub dims: TpiDims,
    pub users: EmbeddingTable,
    pub locations: EmbeddingTable,
    pub time: SmoothedTimeEmbedding,
    pub user_location: UserLocationHead,
    pub time_user: AttentionProjections,
    pub input: Linear,
    pub sequence: CausalEncoder,
    pub kind: AttentionKind,
    pub osc: OscillatorParams,
}

impl TpiEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        dims: TpiDims,
        sigma: f64,
        seq: &SeqEncoderConfig,
        kind: AttentionKind,
        osc: OscillatorParams,
        rng: &mut R,
    ) -> Result<Self> {
        let d = dims.dim;
        ensure!(dims.heads > 0 && d.is_multiple_of(dims.heads), "model dim {d} is not divisible by {} heads", dims.heads);
        ensure!(dims.topics > 0, "topic count must be positive");
        osc.validate()?;
        let smoothing = TimeSmoothing::new(dims.slots, sigma)?;
        Ok(TpiEncoder {
            dims,
            users: EmbeddingTable::register(reg, "user_embedding", dims.users, d, rng)?,
            locations: EmbeddingTable::register(reg, "location_embedding", dims.locations, d, rng)?,
            time: SmoothedTimeEmbedding::register(reg, "time_embedding", smoothing, d, rng)?,
            user_location: UserLocationHead::register(reg, "user_location", dims.topics, d, rng)?,
            time_user: AttentionProjections::register(reg, "time_user", 2 * d, d, dims.heads, d / dims.heads, d, rng)?,
            input: Linear::register(reg, "sequence_input", 2 * d, d, true, rng)?,
            sequence: CausalEncoder::register(reg, "sequence", d, seq, rng)?,
            kind,
            osc,
        })
    }

    /// Smoothing-kernel rows for `slots`, used to read the smoothed table by
    /// matrix product.
    fn kernel_rows(&self, slots: &[usize]) -> Result<Tensor> {
        let h = self.dims.slots;
        let mut data = Vec::with_capacity(slots.len() * h);
        for &s in slots {
            ensure!(s < h, "slot {s} out of range for {h} slots");
            data.extend_from_slice(self.time.smoothing.weights().row(s));
        }
        Ok(Tensor::matrix(slots.len(), h, data))
    }

    /// Encodes a batch. The time-user attention is stabilised against
    /// `state`; the returned state holds this batch's attention weights.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        reg: &ParamRegistry,
        batch: &[EncoderInput<'_>],
        state: &CnoaState,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(EncoderOutput, CnoaState)> {
        ensure!(!batch.is_empty(), "cannot encode an empty batch");
        let n = batch[0].locations.len();
        ensure!(n > 0, "context window must not be empty");
        let d = self.dims.dim;
        let mut users = Vec::with_capacity(batch.len());
        let mut locations = Vec::with_capacity(batch.len() * n);
        let mut slots = Vec::with_capacity(batch.len() * n);
        let mut last_slots = Vec::with_capacity(batch.len());
        let mut mixes = Vec::with_capacity(batch.len() * self.dims.topics);
        for w in batch {
            ensure!(w.locations.len() == n, "all windows in a batch need context length {n}");
            ensure!(w.slots.len() == n, "context has {} locations but {} slots", n, w.slots.len());
            ensure!(w.user < self.dims.users, "user {} out of range", w.user);
            ensure!(w.topic_mix.len() == self.dims.topics, "topic mixture has the wrong length");
            users.push(w.user);
            locations.extend_from_slice(w.locations);
            slots.extend_from_slice(w.slots);
            last_slots.push(w.slots[n - 1]);
            mixes.extend_from_slice(w.topic_mix.data());
        }

        let mix = Tensor::matrix(batch.len(), self.dims.topics, mixes);
        let o_us = self.user_location.forward(g, reg, &mix);

        let user = self.users.lookup_many(g, reg, &users)?;
        let base = g.param(reg, self.time.table);
        let smoothed = self.time.smoothed_table(g, reg);
        let current = g.constant(self.kernel_rows(&last_slots)?);
        let current = g.matmul(current, base);
        let query = g.concat_cols(&[user, current]);
        let heads = cnoa::head_attention(g, reg, &self.time_user, self.kind, &self.osc, query, smoothed, smoothed)?;
        let outs: Vec<Var> = heads.alphas.iter().zip(&heads.values).map(|(&a, &v)| g.matmul(a, v)).collect();
        let (o_ut, next) =
            cnoa::stacked_output(g, reg, &self.time_user, self.kind, self.osc.gamma, &heads.alphas, &outs, state);

        let loc = self.locations.lookup_many(g, reg, &locations)?;
        let slot_w = g.constant(self.kernel_rows(&slots)?);
        let slot = g.matmul(slot_w, base);
        let x = g.concat_cols(&[loc, slot]);
        let x_proj = self.input.forward(g, reg, x);
        let scaled = g.scale(x_proj, math::sqrt(d as f64));
        let pe = positional_encoding(n, d);
        let pe = Tensor::matrix(batch.len() * n, d, pe.data().repeat(batch.len()));
        let pe = g.constant(pe);
        let seq_in = g.add(scaled, pe);
        let h = self.sequence.forward(g, reg, seq_in, n, dropout)?;
        let o_st = g.concat_cols(&[h, x_proj]);

        Ok((EncoderOutput { o_us, o_ut, o_st, user, batch: batch.len(), context: n }, next))
    }

    /// Encodes a single window.
    pub fn encode(
        &self,
        g: &mut Graph,
        reg: &ParamRegistry,
        input: EncoderInput<'_>,
        state: &CnoaState,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(EncoderOutput, CnoaState)> {
        self.encode_batch(g, reg, &[input], state, dropout)
    }
}
