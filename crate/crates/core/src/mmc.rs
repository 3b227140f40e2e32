//! First-order mobility Markov chain baseline.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

type Row = BTreeMap<usize, u64>;

/// Transition counts per `(user, from)` state and pooled over users.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub locations: usize,
    pub per_user: BTreeMap<(usize, usize), Row>,
    pub global: BTreeMap<usize, Row>,
    /// Visit counts per location over all fitted sequences.
    pub popularity: Vec<u64>,
}

/// Counts every consecutive pair `l_i → l_{i+1}` of each user's sequence.
pub fn fit_mmc<'a>(locations: usize, sequences: impl IntoIterator<Item = (usize, &'a [usize])>) -> TransitionModel {
    let mut model = TransitionModel { locations, popularity: alloc::vec![0; locations], ..Default::default() };
    for (user, seq) in sequences {
        for &l in seq {
            if l < locations {
                model.popularity[l] += 1;
            }
        }
        for w in seq.windows(2) {
            *model.per_user.entry((user, w[0])).or_default().entry(w[1]).or_insert(0) += 1;
            *model.global.entry(w[0]).or_default().entry(w[1]).or_insert(0) += 1;
        }
    }
    model
}

fn row_probs(row: Option<&Row>, locations: usize) -> Option<Vec<f64>> {
    let row = row?;
    let total: u64 = row.values().sum();
    if total == 0 {
        return None;
    }
    let mut p = alloc::vec![0.0; locations];
    for (&l, &c) in row {
        if l < locations {
            p[l] = c as f64 / total as f64;
        }
    }
    Some(p)
}

impl TransitionModel {
    /// `P(to | from)` for the user, or `None` when the state was never seen.
    pub fn probability(&self, user: usize, from: usize, to: usize) -> Option<f64> {
        let row = self.per_user.get(&(user, from))?;
        let total: u64 = row.values().sum();
        Some(*row.get(&to).unwrap_or(&0) as f64 / total as f64)
    }

    fn popularity_probs(&self) -> Vec<f64> {
        let total: u64 = self.popularity.iter().sum();
        self.popularity.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    }

    /// Scores used for ranking: the user's row, else the global row, else
    /// popularity; with the global row (else popularity) as tie-breaker.
    pub fn scores(&self, user: usize, current: usize) -> (Vec<f64>, Vec<f64>) {
        let global = row_probs(self.global.get(&current), self.locations);
        let primary = row_probs(self.per_user.get(&(user, current)), self.locations)
            .or_else(|| global.clone())
            .unwrap_or_else(|| self.popularity_probs());
        let secondary = global.unwrap_or_else(|| self.popularity_probs());
        (primary, secondary)
    }

    /// Every location ordered by descending per-user probability, then global
    /// probability, then ascending id.
    pub fn rank_locations(&self, user: usize, current: usize) -> Vec<usize> {
        let (p, q) = self.scores(user, current);
        let mut order: Vec<usize> = (0..self.locations).collect();
        order.sort_by(|&a, &b| {
            p[b].partial_cmp(&p[a])
                .unwrap_or(Ordering::Equal)
                .then(q[b].partial_cmp(&q[a]).unwrap_or(Ordering::Equal))
                .then(a.cmp(&b))
        });
        order
    }

    /// 1-indexed position of `target` in [`TransitionModel::rank_locations`].
    pub fn rank_of(&self, user: usize, current: usize, target: usize) -> usize {
        self.rank_locations(user, current).iter().position(|&l| l == target).map_or(self.locations, |i| i + 1)
    }
}
