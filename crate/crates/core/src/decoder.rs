//! The cross-context attentive decoder, prediction heads and loss.
//!
//! Per window, a single query token attends over the ordered token list
//! `[ẽ_u; O_ut; O_st rows…]` (each projected to `d`). The attended vector is
//! concatenated with the pair features into `z ∈ R^{6d}`, and a fusion MLP
//! maps `z` to `ŷ`. Location logits come from `ŷ`, time logits from `O_ut`,
//! and an auxiliary location head reads `z` directly.

use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnoa::{self, AttentionKind, AttentionProjections, CnoaState, HeadAttention, OscillatorParams};
use crate::encoder::EncoderOutput;
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Mlp};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub loc: f64,
    pub time: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { loc: 1.0, time: 0.5, aux: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("loc", self.loc), ("time", self.time), ("aux", self.aux)] {
            ensure!(w.is_finite() && w >= 0.0, "loss weight `{name}` must be finite and non-negative, got {w}");
        }
        ensure!(self.loc > 0.0 || self.time > 0.0 || self.aux > 0.0, "at least one loss weight must be positive");
        Ok(())
    }
}

/// Which pair feature seeds the decoder query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    #[default]
    UserLocation,
    TimeUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub locations: usize,
    pub slots: usize,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dims: DecoderDims,
    pub query: Linear,
    pub user_token: Linear,
    pub time_token: Linear,
    pub sequence_token: Linear,
    pub attn: AttentionProjections,
    pub fusion: Mlp,
    pub location_head: Linear,
    pub time_head: Linear,
    pub aux_head: Linear,
    pub kind: AttentionKind,
    pub osc: OscillatorParams,
    pub query_source: QuerySource,
}

/// Decoder results for a batch of `B` windows.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// Fused representation `ŷ`, `[B, d]`.
    pub fused: Var,
    /// Pre-MLP concatenation `z`, `[B, 6d]`.
    pub context: Var,
    /// Attention output `A`, `[B, d]`.
    pub attended: Var,
}

impl Decoder {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        dims: DecoderDims,
        kind: AttentionKind,
        osc: OscillatorParams,
        query_source: QuerySource,
        rng: &mut R,
    ) -> Result<Self> {
        let d = dims.dim;
        ensure!(dims.heads > 0 && d.is_multiple_of(dims.heads), "model dim {d} is not divisible by {} heads", dims.heads);
        ensure!(dims.locations > 0 && dims.slots > 0, "decoder needs at least one location and slot");
        osc.validate()?;
        Ok(Decoder {
            dims,
            query: Linear::register(reg, "decoder.query", d, d, false, rng)?,
            user_token: Linear::register(reg, "decoder.user_token", d, d, false, rng)?,
            time_token: Linear::register(reg, "decoder.time_token", d, d, false, rng)?,
            sequence_token: Linear::register(reg, "decoder.sequence_token", 2 * d, d, false, rng)?,
            attn: AttentionProjections::register(reg, "decoder.attention", d, d, dims.heads, d / dims.heads, d, rng)?,
            fusion: Mlp::register(reg, "decoder.fusion", 6 * d, 4 * d, d, rng)?,
            location_head: Linear::register(reg, "head.location", d, dims.locations, true, rng)?,
            time_head: Linear::register(reg, "head.time", d, dims.slots, true, rng)?,
            aux_head: Linear::register(reg, "head.aux", 6 * d, dims.locations, true, rng)?,
            kind,
            osc,
            query_source,
        })
    }

    pub fn decode_batch(
        &self,
        g: &mut Graph,
        reg: &ParamRegistry,
        enc: &EncoderOutput,
        state: &CnoaState,
    ) -> Result<(DecoderOutput, CnoaState)> {
        let (b, n) = (enc.batch, enc.context);
        ensure!(b > 0 && n > 0, "decoder needs a non-empty batch and context");
        let source = match self.query_source {
            QuerySource::UserLocation => enc.o_us,
            QuerySource::TimeUser => enc.o_ut,
        };
        let query = self.query.forward(g, reg, source);
        let wq = g.param(reg, self.attn.wq);
        let query = g.matmul(query, wq);

        let user_tok = self.user_token.forward(g, reg, enc.user);
        let time_tok = self.time_token.forward(g, reg, enc.o_ut);
        let seq_tok = self.sequence_token.forward(g, reg, enc.o_st);
        let mut rows = Vec::with_capacity(3 * b);
        for i in 0..b {
            rows.push(g.slice_rows(user_tok, i, i + 1));
            rows.push(g.slice_rows(time_tok, i, i + 1));
            rows.push(g.slice_rows(seq_tok, i * n, (i + 1) * n));
        }
        let tokens = g.concat_rows(&rows);
        let (wk, wv) = (g.param(reg, self.attn.wk), g.param(reg, self.attn.wv));
        let keys = g.matmul(tokens, wk);
        let values = g.matmul(tokens, wv);

        let per = n + 2;
        let mut heads: Vec<HeadAttention> = Vec::with_capacity(b);
        for i in 0..b {
            let q = if b == 1 { query } else { g.slice_rows(query, i, i + 1) };
            let (k, v) = if b == 1 {
                (keys, values)
            } else {
                (g.slice_rows(keys, i * per, (i + 1) * per), g.slice_rows(values, i * per, (i + 1) * per))
            };
            heads.push(cnoa::projected_attention(g, self.attn.heads, self.attn.head_dim, self.kind, &self.osc, q, k, v));
        }
        let mut alphas = Vec::with_capacity(self.attn.heads);
        let mut outs = Vec::with_capacity(self.attn.heads);
        for r in 0..self.attn.heads {
            let a: Vec<Var> = heads.iter().map(|h| h.alphas[r]).collect();
            let o: Vec<Var> = heads.iter().map(|h| g.matmul(h.alphas[r], h.values[r])).collect();
            alphas.push(if b == 1 { a[0] } else { g.concat_rows(&a) });
            outs.push(if b == 1 { o[0] } else { g.concat_rows(&o) });
        }
        let (attended, next) =
            cnoa::stacked_output(g, reg, &self.attn, self.kind, self.osc.gamma, &alphas, &outs, state);

        let last: Vec<Var> = (0..b).map(|i| g.slice_rows(enc.o_st, (i + 1) * n - 1, (i + 1) * n)).collect();
        let st_last = if b == 1 { last[0] } else { g.concat_rows(&last) };
        let context = g.concat_cols(&[enc.o_us, st_last, enc.o_ut, enc.user, attended]);
        let fused = self.fusion.forward(g, reg, context);
        Ok((DecoderOutput { fused, context, attended }, next))
    }

    /// `[B, |L|]` location logits from `ŷ`.
    pub fn location_logits(&self, g: &mut Graph, reg: &ParamRegistry, fused: Var) -> Var {
        self.location_head.forward(g, reg, fused)
    }

    /// `[B, H]` time-slot logits from `O_ut`.
    pub fn time_logits(&self, g: &mut Graph, reg: &ParamRegistry, o_ut: Var) -> Var {
        self.time_head.forward(g, reg, o_ut)
    }

    /// `[B, |L|]` auxiliary location logits from `z`.
    pub fn aux_logits(&self, g: &mut Graph, reg: &ParamRegistry, context: Var) -> Var {
        self.aux_head.forward(g, reg, context)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits: [B, C]`.
pub fn batch_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let v = g.value(logits);
    let (rows, classes) = (v.rows(), v.cols());
    ensure!(rows == targets.len() && rows > 0, "{} targets for {rows} logit rows", targets.len());
    let mut onehot = Tensor::zeros(&[rows, classes]);
    for (r, &t) in targets.iter().enumerate() {
        ensure!(t < classes, "target {t} out of range for {classes} classes");
        onehot.data_mut()[r * classes + t] = 1.0;
    }
    let lp = g.log_softmax(logits);
    let mask = g.constant(onehot);
    let picked = g.mul(lp, mask);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// The three cross-entropy terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub loc: Var,
    pub time: Var,
    pub aux: Var,
}

/// `λ_loc·CE(loc) + λ_time·CE(time) + λ_aux·CE(aux)`, each a batch mean.
pub fn total_loss(
    g: &mut Graph,
    loc_logits: Var,
    time_logits: Var,
    aux_logits: Var,
    loc_targets: &[usize],
    slot_targets: &[usize],
    weights: &LossWeights,
) -> Result<LossTerms> {
    let loc = batch_cross_entropy(g, loc_logits, loc_targets)?;
    let time = batch_cross_entropy(g, time_logits, slot_targets)?;
    let aux = batch_cross_entropy(g, aux_logits, loc_targets)?;
    let a = g.scale(loc, weights.loc);
    let b = g.scale(time, weights.time);
    let c = g.scale(aux, weights.aux);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    Ok(LossTerms { total, loc, time, aux })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderInput, SeqEncoderConfig, TpiDims, TpiEncoder};
    use crate::gradcheck::grad_check;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
        x.iter().map(|v| (v - m).exp() / z).collect()
    }

    #[test]
    fn direct_softmax_values() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let expected = [0.09003, 0.24473, 0.66524];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let sm = g.softmax(x);
        for (a, b) in g.value(sm).data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_cross_entropy_closed_form() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 2418]));
        let ce = batch_cross_entropy(&mut g, logits, &[0, 17, 2417]).unwrap();
        assert!((g.value(ce).item() - libm::log(2418.0)).abs() < 1e-12);
        assert!((g.value(ce).item() - 7.791).abs() < 1e-3);
    }

    #[test]
    fn confident_predictions_have_near_zero_loss() {
        let mut g = Graph::new();
        let mut l = Tensor::zeros(&[2, 3]);
        l.data_mut()[1] = 60.0;
        l.data_mut()[5] = 60.0;
        let logits = g.constant(l);
        let terms = total_loss(&mut g, logits, logits, logits, &[1, 2], &[1, 2], &LossWeights::default()).unwrap();
        assert!(g.value(terms.total).item() < 1e-24);
    }

    #[test]
    fn target_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(batch_cross_entropy(&mut g, logits, &[3]).is_err());
        assert!(batch_cross_entropy(&mut g, logits, &[0, 1]).is_err());
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { loc: 0.0, time: 0.0, aux: 0.0 }.validate().is_err());
        assert!(LossWeights { loc: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { loc: f64::NAN, ..Default::default() }.validate().is_err());
    }

    struct Fixture {
        reg: ParamRegistry,
        enc: TpiEncoder,
        dec: Decoder,
    }

    fn fixture(kind: AttentionKind, osc: OscillatorParams, seed: u64) -> Fixture {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tdims = TpiDims { users: 3, locations: 12, slots: 24, topics: 3, dim: 8, heads: 2 };
        let seq = SeqEncoderConfig { layers: 1, heads: 2, dropout: 0.0, ff_width: Some(16) };
        let enc = TpiEncoder::register(&mut reg, tdims, 1.0, &seq, kind, osc, &mut rng).unwrap();
        let ddims = DecoderDims { locations: 12, slots: 24, dim: 8, heads: 2 };
        let dec = Decoder::register(&mut reg, ddims, kind, osc, QuerySource::UserLocation, &mut rng).unwrap();
        Fixture { reg, enc, dec }
    }

    fn run_batch(f: &Fixture, g: &mut Graph, reg: &ParamRegistry, windows: &[(usize, Vec<usize>, Vec<usize>)]) -> (EncoderOutput, DecoderOutput) {
        let mix = Tensor::vector(vec![0.2, 0.3, 0.5]);
        let inputs: Vec<EncoderInput> = windows
            .iter()
            .map(|(u, l, s)| EncoderInput { user: *u, locations: l, slots: s, topic_mix: &mix })
            .collect();
        let (enc, _) = f.enc.encode_batch(g, reg, &inputs, &CnoaState::uniform(), None).unwrap();
        let (dec, _) = f.dec.decode_batch(g, reg, &enc, &CnoaState::uniform()).unwrap();
        (enc, dec)
    }

    #[test]
    fn output_shapes() {
        let f = fixture(AttentionKind::Cnoa, OscillatorParams::default(), 1);
        for n in [1usize, 5] {
            let mut g = Graph::new();
            let w = vec![(0, vec![1; n], vec![3; n]), (2, vec![4; n], vec![5; n])];
            let (enc, dec) = run_batch(&f, &mut g, &f.reg, &w);
            assert_eq!(g.value(dec.fused).shape(), &[2, 8]);
            assert_eq!(g.value(dec.context).shape(), &[2, 48]);
            let l = f.dec.location_logits(&mut g, &f.reg, dec.fused);
            let t = f.dec.time_logits(&mut g, &f.reg, enc.o_ut);
            let a = f.dec.aux_logits(&mut g, &f.reg, dec.context);
            assert_eq!(g.value(l).shape(), &[2, 12]);
            assert_eq!(g.value(t).shape(), &[2, 24]);
            assert_eq!(g.value(a).shape(), &[2, 12]);
        }
    }

    #[test]
    fn batch_rows_match_single_windows_for_cross_attention() {
        let f = fixture(AttentionKind::Cross, OscillatorParams::default(), 2);
        let w = vec![(0, vec![1, 2, 3], vec![3, 4, 5]), (1, vec![7, 8, 9], vec![10, 11, 12])];
        let mut g = Graph::new();
        let (_, both) = run_batch(&f, &mut g, &f.reg, &w);
        for (i, win) in w.iter().enumerate() {
            let (_, one) = run_batch(&f, &mut g, &f.reg, core::slice::from_ref(win));
            for (a, b) in g.value(one.fused).data().iter().zip(g.value(both.fused).row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_distributions() {
        let mut f = fixture(AttentionKind::Cnoa, OscillatorParams::default(), 3);
        for lin in [f.dec.location_head, f.dec.time_head] {
            f.reg.value_mut(lin.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let (enc, dec) = run_batch(&f, &mut g, &f.reg, &[(1, vec![0, 1], vec![2, 3])]);
        let l = f.dec.location_logits(&mut g, &f.reg, dec.fused);
        let l = g.softmax(l);
        assert!(g.value(l).data().iter().all(|&p| (p - 1.0 / 12.0).abs() < 1e-15));
        let t = f.dec.time_logits(&mut g, &f.reg, enc.o_ut);
        let t = g.softmax(t);
        assert!(g.value(t).data().iter().all(|&p| (p - 1.0 / 24.0).abs() < 1e-15));
    }

    #[test]
    fn logit_shift_leaves_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[2, 7], 3.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.shift(a, 123.25);
        let (pa, pb) = (g.softmax(a), g.softmax(b));
        assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let f = fixture(AttentionKind::Cnoa, OscillatorParams::quiescent(), 5);
        let mut g = Graph::new();
        let token = g.constant(Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()));
        let query = g.constant(Tensor::matrix(1, 8, vec![0.5; 8]));
        let (out, _) =
            cnoa::cnoa_attention(&mut g, &f.reg, &f.dec.attn, &OscillatorParams::quiescent(), query, token, token, &CnoaState::uniform())
                .unwrap();
        let wv = g.param(&f.reg, f.dec.attn.wv);
        let v = g.matmul(token, wv);
        let wo = g.param(&f.reg, f.dec.attn.wo);
        let expected = g.matmul(v, wo);
        assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-15);
    }

    #[test]
    fn symmetric_heads_give_equal_losses() {
        let mut f = fixture(AttentionKind::Cnoa, OscillatorParams::default(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let w = Tensor::uniform(&[48, 12], 0.2, &mut rng);
        *f.reg.value_mut(f.dec.aux_head.weight) = w.clone();
        let mut g = Graph::new();
        let (enc, dec) = run_batch(&f, &mut g, &f.reg, &[(0, vec![2, 3], vec![4, 5])]);
        let twin = g.constant(w);
        let loc = g.matmul(dec.context, twin);
        let aux = f.dec.aux_logits(&mut g, &f.reg, dec.context);
        let t = f.dec.time_logits(&mut g, &f.reg, enc.o_ut);
        let a = total_loss(&mut g, loc, t, aux, &[5], &[6], &LossWeights { loc: 1.0, time: 0.0, aux: 0.0 }).unwrap();
        let b = total_loss(&mut g, loc, t, aux, &[5], &[6], &LossWeights { loc: 0.0, time: 0.0, aux: 1.0 }).unwrap();
        assert_eq!(g.value(a.total).item(), g.value(b.total).item());
    }

    #[test]
    fn inactive_terms_leave_heads_without_gradient() {
        let mut f = fixture(AttentionKind::Cnoa, OscillatorParams::default(), 7);
        let reg_snapshot = f.reg.clone();
        let mut g = Graph::new();
        let (enc, dec) = run_batch(&f, &mut g, &reg_snapshot, &[(0, vec![2, 3], vec![4, 5])]);
        let l = f.dec.location_logits(&mut g, &reg_snapshot, dec.fused);
        let t = f.dec.time_logits(&mut g, &reg_snapshot, enc.o_ut);
        let a = f.dec.aux_logits(&mut g, &reg_snapshot, dec.context);
        let terms = total_loss(&mut g, l, t, a, &[5], &[6], &LossWeights { loc: 0.0, time: 1.0, aux: 0.0 }).unwrap();
        f.reg.zero_grad();
        g.backward(terms.total, &mut f.reg).unwrap();
        for id in [f.dec.location_head.weight, f.dec.aux_head.weight, f.dec.fusion.hidden.weight] {
            assert!(f.reg.grad(id).unwrap().data().iter().all(|&v| v == 0.0));
        }
        assert!(f.reg.grad(f.dec.time_head.weight).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn descent_on_one_sample() {
        let mut f = fixture(AttentionKind::Cnoa, OscillatorParams { k: 1.0, ..Default::default() }, 8);
        let w = [(1, vec![2, 3, 4], vec![5, 6, 7])];
        let loss = |f: &Fixture, reg: &ParamRegistry, g: &mut Graph| {
            let (enc, dec) = run_batch(f, g, reg, &w);
            let l = f.dec.location_logits(g, reg, dec.fused);
            let t = f.dec.time_logits(g, reg, enc.o_ut);
            let a = f.dec.aux_logits(g, reg, dec.context);
            total_loss(g, l, t, a, &[9], &[8], &LossWeights::default()).unwrap().total
        };
        let mut g = Graph::new();
        let snapshot = f.reg.clone();
        let root = loss(&f, &snapshot, &mut g);
        let before = g.value(root).item();
        f.reg.zero_grad();
        g.backward(root, &mut f.reg).unwrap();
        let ids: Vec<_> = f.reg.ids().collect();
        for id in ids {
            let grad = f.reg.grad(id).unwrap().clone();
            f.reg.value_mut(id).data_mut().iter_mut().zip(grad.data()).for_each(|(p, d)| *p -= 1e-3 * d);
        }
        let mut g = Graph::new();
        let snapshot = f.reg.clone();
        let root = loss(&f, &snapshot, &mut g);
        let after = g.value(root).item();
        assert!(after < before && after >= 0.0);
    }

    #[test]
    fn decoder_gradients() {
        let mut f = fixture(AttentionKind::Cnoa, OscillatorParams { k: 1.0, gamma: 0.3, ..Default::default() }, 9);
        let enc = f.enc.clone();
        let dec = f.dec.clone();
        let holder = Fixture { reg: ParamRegistry::new(), enc, dec };
        let report = grad_check(&mut f.reg, 1e-5, |reg, g| {
            let (_, out) = run_batch(&holder, g, reg, &[(2, vec![0, 11], vec![23, 0]), (1, vec![4, 4], vec![9, 9])]);
            let sq = g.square(out.fused);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
