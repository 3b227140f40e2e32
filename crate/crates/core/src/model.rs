//! The assembled next-location model: encoder, decoder and heads over
//! batches of windows.

use alloc::vec::Vec;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cnoa::{AttentionKind, CnoaState, OscillatorParams};
use crate::data::{WindowSample, SLOTS};
use crate::decoder::{total_loss, Decoder, DecoderDims, DecoderOutput, LossTerms, LossWeights, QuerySource};
use crate::embeddings::DEFAULT_SIGMA;
use crate::encoder::{EncoderInput, EncoderOutput, SeqEncoderConfig, TpiDims, TpiEncoder};
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::metrics::rank_of;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;
use crate::topics::TopicModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    /// Heads of both oscillatory attention blocks.
    pub heads: usize,
    /// Width of the time-smoothing kernel, in slots.
    pub sigma: f64,
    pub sequence: SeqEncoderConfig,
    pub oscillator: OscillatorParams,
    pub attention: AttentionKind,
    pub query_source: QuerySource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            heads: 2,
            sigma: DEFAULT_SIGMA,
            sequence: SeqEncoderConfig::default(),
            oscillator: OscillatorParams::default(),
            attention: AttentionKind::Cnoa,
            query_source: QuerySource::UserLocation,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0, "dim must be positive");
        ensure!(self.heads > 0 && self.dim.is_multiple_of(self.heads), "dim {} is not divisible by heads {}", self.dim, self.heads);
        ensure!(self.sigma.is_finite() && self.sigma > 0.0, "sigma must be positive");
        self.sequence.validate(self.dim)?;
        self.oscillator.validate()
    }
}

/// Vocabulary sizes fixed by the data and topic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub users: usize,
    pub locations: usize,
    pub slots: usize,
    pub topics: usize,
}

impl ModelDims {
    pub fn new(users: usize, locations: usize, topics: usize) -> Self {
        ModelDims { users, locations, slots: SLOTS, topics }
    }
}

/// Previous attention of both oscillatory blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelState {
    pub time_user: CnoaState,
    pub decoder: CnoaState,
}

impl ModelState {
    pub fn reset(&mut self) {
        self.time_user.reset();
        self.decoder.reset();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
    /// `[B, |L|]`
    pub location_logits: Var,
    /// `[B, H]`
    pub time_logits: Var,
    /// `[B, |L|]`
    pub aux_logits: Var,
}

#[derive(Debug, Clone)]
pub struct CanoeModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub encoder: TpiEncoder,
    pub decoder: Decoder,
}

impl CanoeModel {
    /// Registers all parameters, drawing initial values from `rng`.
    pub fn build<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        config: &ModelConfig,
        dims: ModelDims,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(dims.users > 0 && dims.locations > 0 && dims.slots > 0, "model vocabularies must be non-empty");
        let tdims = TpiDims {
            users: dims.users,
            locations: dims.locations,
            slots: dims.slots,
            topics: dims.topics,
            dim: config.dim,
            heads: config.heads,
        };
        let encoder =
            TpiEncoder::register(reg, tdims, config.sigma, &config.sequence, config.attention, config.oscillator, rng)?;
        let ddims = DecoderDims { locations: dims.locations, slots: dims.slots, dim: config.dim, heads: config.heads };
        let decoder = Decoder::register(reg, ddims, config.attention, config.oscillator, config.query_source, rng)?;
        Ok(CanoeModel { config: *config, dims, encoder, decoder })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        reg: &ParamRegistry,
        topics: &TopicModel,
        batch: &[&WindowSample],
        state: &ModelState,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(ForwardOutput, ModelState)> {
        ensure!(!batch.is_empty(), "empty batch");
        ensure!(topics.topics == self.dims.topics, "topic model has {} topics, model expects {}", topics.topics, self.dims.topics);
        for s in batch {
            ensure!(s.target_location < self.dims.locations, "target location {} out of range", s.target_location);
            ensure!(s.context_locations.iter().all(|&l| l < self.dims.locations), "context location out of range");
        }
        let mixes: Vec<Tensor> =
            batch.iter().map(|s| topics.user_topic_distribution(s.user)).collect::<Result<_>>()?;
        let inputs: Vec<EncoderInput> = batch
            .iter()
            .zip(&mixes)
            .map(|(s, m)| EncoderInput {
                user: s.user,
                locations: &s.context_locations,
                slots: &s.context_slots,
                topic_mix: m,
            })
            .collect();
        let (encoder, time_user) = self.encoder.encode_batch(g, reg, &inputs, &state.time_user, dropout)?;
        let (decoder, dec_state) = self.decoder.decode_batch(g, reg, &encoder, &state.decoder)?;
        let location_logits = self.decoder.location_logits(g, reg, decoder.fused);
        let time_logits = self.decoder.time_logits(g, reg, encoder.o_ut);
        let aux_logits = self.decoder.aux_logits(g, reg, decoder.context);
        let out = ForwardOutput { encoder, decoder, location_logits, time_logits, aux_logits };
        Ok((out, ModelState { time_user, decoder: dec_state }))
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardOutput,
        batch: &[&WindowSample],
        weights: &LossWeights,
    ) -> Result<LossTerms> {
        let locs: Vec<usize> = batch.iter().map(|s| s.target_location).collect();
        let slots: Vec<usize> = batch.iter().map(|s| s.target_slot).collect();
        total_loss(g, out.location_logits, out.time_logits, out.aux_logits, &locs, &slots, weights)
    }

    /// Location distributions for `samples`, evaluated in order in batches
    /// of `batch_size` with the attention state reset first.
    pub fn predict(
        &self,
        reg: &ParamRegistry,
        topics: &TopicModel,
        samples: &[WindowSample],
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        ensure!(batch_size > 0, "batch size must be positive");
        let mut state = ModelState::default();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let (fwd, next) = self.forward(&mut g, reg, topics, &batch, &state, None)?;
            state = next;
            let probs = g.softmax(fwd.location_logits);
            g.check_finite()?;
            let p = g.value(probs);
            out.extend((0..p.rows()).map(|r| p.row(r).to_vec()));
        }
        Ok(out)
    }

    /// 1-indexed rank of each sample's target under [`CanoeModel::predict`].
    pub fn rank_samples(
        &self,
        reg: &ParamRegistry,
        topics: &TopicModel,
        samples: &[WindowSample],
        batch_size: usize,
    ) -> Result<Vec<usize>> {
        let probs = self.predict(reg, topics, samples, batch_size)?;
        Ok(probs.iter().zip(samples).map(|(p, s)| rank_of(p, s.target_location)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topics::{fit_lda, CoOccurrenceMatrix, LdaConfig};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ParamRegistry, CanoeModel, TopicModel, Vec<WindowSample>) {
        let cfg = ModelConfig {
            dim: 8,
            sequence: SeqEncoderConfig { layers: 1, heads: 2, dropout: 0.1, ff_width: None },
            ..Default::default()
        };
        let corpus = CoOccurrenceMatrix::from_rows(&[vec![3, 1, 0, 0, 0, 0], vec![0, 0, 2, 2, 1, 0], vec![0, 0, 0, 0, 1, 4]]);
        let topics = fit_lda(&corpus, &LdaConfig { topics: 2, iterations: 20, seed: 1, ..Default::default() }).unwrap();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CanoeModel::build(&mut reg, &cfg, ModelDims::new(3, 6, 2), &mut rng).unwrap();
        let samples = (0..5)
            .map(|i| WindowSample {
                user: i % 3,
                context_locations: vec![i % 6, (i + 1) % 6, (i + 2) % 6],
                context_slots: vec![i, i + 1, i + 2],
                target_location: (i + 3) % 6,
                target_slot: i + 3,
                target_index: 3,
            })
            .collect();
        (reg, model, topics, samples)
    }

    #[test]
    fn predictions_are_distributions() {
        let (reg, model, topics, samples) = toy();
        let probs = model.predict(&reg, &topics, &samples, 2).unwrap();
        assert_eq!(probs.len(), 5);
        for p in &probs {
            assert_eq!(p.len(), 6);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let ranks = model.rank_samples(&reg, &topics, &samples, 2).unwrap();
        assert!(ranks.iter().all(|&r| (1..=6).contains(&r)));
    }

    #[test]
    fn prediction_is_deterministic() {
        let (reg, model, topics, samples) = toy();
        assert_eq!(model.predict(&reg, &topics, &samples, 3).unwrap(), model.predict(&reg, &topics, &samples, 3).unwrap());
    }

    #[test]
    fn rejects_mismatched_topics_and_targets() {
        let (reg, model, topics, mut samples) = toy();
        samples[0].target_location = 6;
        assert!(model.predict(&reg, &topics, &samples, 2).is_err());
        let mut bad = topics.clone();
        bad.topics = 3;
        assert!(model.predict(&reg, &bad, &samples[1..], 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { dim: 9, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
