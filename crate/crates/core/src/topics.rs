//! User-location topic model (users as documents, locations as words) fitted
//! by collapsed Gibbs sampling, and the MLP head that turns a user's topic
//! mixture into the user-location pair feature `O_us`.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

/// Per-user visit counts over locations, `[users x locations]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrenceMatrix {
    users: usize,
    locations: usize,
    counts: Vec<u32>,
}

impl CoOccurrenceMatrix {
    pub fn new(users: usize, locations: usize) -> Self {
        CoOccurrenceMatrix { users, locations, counts: vec![0; users * locations] }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let locations = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(rows.len(), locations);
        for (u, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), locations, "ragged co-occurrence rows");
            m.counts[u * locations..(u + 1) * locations].copy_from_slice(row);
        }
        m
    }

    pub fn add(&mut self, user: usize, location: usize) {
        assert!(user < self.users && location < self.locations);
        self.counts[user * self.locations + location] += 1;
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn row(&self, user: usize) -> &[u32] {
        &self.counts[user * self.locations..(user + 1) * self.locations]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// One `(user, location)` token per counted visit, users then locations
    /// in ascending order.
    pub fn tokens(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total() as usize);
        for u in 0..self.users {
            for (l, &c) in self.row(u).iter().enumerate() {
                out.extend(core::iter::repeat_n((u, l), c as usize));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdaConfig {
    pub topics: usize,
    /// Symmetric document-topic prior; `None` means `50 / topics`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig { topics: 450, alpha: None, beta: 0.01, iterations: 500, seed: 0 }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics as f64)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.topics >= 2, "topics must be at least 2, got {}", self.topics);
        let alpha = self.alpha();
        ensure!(alpha.is_finite() && alpha > 0.0, "alpha must be positive");
        ensure!(self.beta.is_finite() && self.beta > 0.0, "beta must be positive");
        Ok(())
    }
}

/// Fitted user-topic (`θ`) and topic-location (`φ`) distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub topics: usize,
    pub users: usize,
    pub locations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Row-major `[users x topics]`.
    pub user_topic: Vec<f64>,
    /// Row-major `[topics x locations]`.
    pub topic_location: Vec<f64>,
}

impl TopicModel {
    pub fn theta(&self, user: usize) -> &[f64] {
        &self.user_topic[user * self.topics..(user + 1) * self.topics]
    }

    pub fn phi(&self, topic: usize) -> &[f64] {
        &self.topic_location[topic * self.locations..(topic + 1) * self.locations]
    }

    /// `C_u`: the user's topic mixture as a constant feature vector.
    pub fn user_topic_distribution(&self, user: usize) -> Result<Tensor> {
        ensure!(user < self.users, "unknown user {user} (model has {} users)", self.users);
        Ok(Tensor::vector(self.theta(user).to_vec()))
    }

    pub fn argmax_topic(&self, user: usize) -> usize {
        let row = self.theta(user);
        (0..self.topics).fold(0, |best, t| if row[t] > row[best] { t } else { best })
    }
}

pub fn fit_lda(v: &CoOccurrenceMatrix, cfg: &LdaConfig) -> Result<TopicModel> {
    fit_lda_tokens(v.users(), v.locations(), &v.tokens(), cfg)
}

/// Collapsed Gibbs sampling over an explicit token list. The sweep visits
/// tokens in the given order, so relabelling locations while keeping token
/// order yields the same user-topic estimates.
pub fn fit_lda_tokens(
    users: usize,
    locations: usize,
    tokens: &[(usize, usize)],
    cfg: &LdaConfig,
) -> Result<TopicModel> {
    cfg.validate()?;
    let t_count = cfg.topics;
    ensure!(!tokens.is_empty(), "topic model needs a non-empty corpus");
    ensure!(users > 0 && locations > 0, "empty user or location vocabulary");
    let alpha = cfg.alpha();
    let beta = cfg.beta;
    ensure!(
        tokens.iter().all(|&(u, l)| u < users && l < locations),
        "token outside the {users}x{locations} vocabulary"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut user_topic = vec![0u32; users * t_count];
    let mut topic_loc = vec![0u32; t_count * locations];
    let mut topic_total = vec![0u32; t_count];
    let mut z = Vec::with_capacity(tokens.len());

    for &(u, l) in tokens {
        let t = rng.gen_range(0..t_count);
        z.push(t);
        user_topic[u * t_count + t] += 1;
        topic_loc[t * locations + l] += 1;
        topic_total[t] += 1;
    }

    let loc_beta = locations as f64 * beta;
    let mut weights = vec![0.0; t_count];
    for _ in 0..cfg.iterations {
        for (i, &(u, l)) in tokens.iter().enumerate() {
            let old = z[i];
            user_topic[u * t_count + old] -= 1;
            topic_loc[old * locations + l] -= 1;
            topic_total[old] -= 1;

            let mut total = 0.0;
            for (t, w) in weights.iter_mut().enumerate() {
                *w = (user_topic[u * t_count + t] as f64 + alpha) * (topic_loc[t * locations + l] as f64 + beta)
                    / (topic_total[t] as f64 + loc_beta);
                total += *w;
            }
            let mut draw = rng.gen::<f64>() * total;
            let mut new = t_count - 1;
            for (t, &w) in weights.iter().enumerate() {
                if draw < w {
                    new = t;
                    break;
                }
                draw -= w;
            }

            z[i] = new;
            user_topic[u * t_count + new] += 1;
            topic_loc[new * locations + l] += 1;
            topic_total[new] += 1;
        }
    }

    let theta = smoothed_rows(&user_topic, t_count, alpha);
    let phi = smoothed_rows(&topic_loc, locations, beta);

    Ok(TopicModel {
        topics: t_count,
        users,
        locations,
        alpha,
        beta,
        iterations: cfg.iterations,
        seed: cfg.seed,
        user_topic: theta,
        topic_location: phi,
    })
}

/// `(count + prior) / (row total + cols * prior)` for every row of a
/// row-major count matrix.
fn smoothed_rows(counts: &[u32], cols: usize, prior: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(counts.len());
    for row in counts.chunks(cols) {
        let total: u64 = row.iter().map(|&c| c as u64).sum();
        let denom = total as f64 + cols as f64 * prior;
        out.extend(row.iter().map(|&c| (c as f64 + prior) / denom));
    }
    out
}

/// Two-layer MLP mapping a topic mixture `C_u` to `O_us`.
#[derive(Debug, Clone, Copy)]
pub struct UserLocationHead {
    pub mlp: Mlp,
}

impl UserLocationHead {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        topics: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(UserLocationHead { mlp: Mlp::register(reg, name, topics, dim, dim, rng)? })
    }

    /// `O_us = MLP(C_u)`; `C_u` enters as a constant.
    pub fn forward(&self, g: &mut Graph, reg: &ParamRegistry, topic_mix: &Tensor) -> Var {
        let c = g.constant(topic_mix.clone());
        self.mlp.forward(g, reg, c)
    }
}
