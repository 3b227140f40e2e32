//! Trajectory records, activity extraction, windowing, splits and the
//! synthetic returner/explorer generator.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Hour-of-day slots.
pub const SLOTS: usize = 24;
pub const SECONDS_PER_HOUR: i64 = 3600;
pub const SECONDS_PER_DAY: i64 = 86_400;
/// Minimum dwell for a run of check-ins to count as an activity.
pub const DEFAULT_THETA: i64 = 3600;
pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_MIN_RECORDS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckIn {
    pub user: u32,
    pub loc: u32,
    /// Seconds since an arbitrary epoch.
    pub t: i64,
}

/// `floor(t / 3600) mod 24`.
pub fn hour_slot(t: i64) -> usize {
    t.div_euclid(SECONDS_PER_HOUR).rem_euclid(SLOTS as i64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySequence {
    pub user: usize,
    pub locations: Vec<usize>,
    pub slots: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl ActivitySequence {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Collapses consecutive same-location check-ins of one user into runs and
/// keeps the runs whose dwell (last minus first timestamp) reaches `theta`.
/// A kept run is stamped with its first timestamp.
pub fn extract_activity_sequence(user: usize, checkins: &[CheckIn], theta: i64) -> Result<ActivitySequence> {
    ensure!(
        checkins.windows(2).all(|w| w[0].t <= w[1].t),
        "check-ins of user {user} are not sorted by time"
    );
    ensure!(
        checkins.iter().all(|c| c.user as usize == user),
        "check-ins passed for user {user} include other users"
    );
    let mut seq = ActivitySequence { user, locations: Vec::new(), slots: Vec::new(), timestamps: Vec::new() };
    let mut start = 0;
    while start < checkins.len() {
        let loc = checkins[start].loc;
        let mut end = start;
        while end + 1 < checkins.len() && checkins[end + 1].loc == loc {
            end += 1;
        }
        let (first, last) = (checkins[start].t, checkins[end].t);
        if last - first >= theta {
            seq.locations.push(loc as usize);
            seq.slots.push(hour_slot(first));
            seq.timestamps.push(first);
        }
        start = end + 1;
    }
    Ok(seq)
}

/// One prediction instance: a context of `window_len − 1` activities and the
/// activity that follows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub user: usize,
    pub context_locations: Vec<usize>,
    pub context_slots: Vec<usize>,
    pub target_location: usize,
    pub target_slot: usize,
    /// Position of the target in the user's activity sequence.
    pub target_index: usize,
}

/// Sliding windows of `window_len` consecutive activities, advancing by
/// `stride`.
pub fn make_windows(seq: &ActivitySequence, window_len: usize, stride: usize) -> Result<Vec<WindowSample>> {
    ensure!(window_len >= 2, "window length must be at least 2, got {window_len}");
    ensure!(stride >= 1, "stride must be at least 1");
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_len <= seq.len() {
        let target = start + window_len - 1;
        out.push(WindowSample {
            user: seq.user,
            context_locations: seq.locations[start..target].to_vec(),
            context_slots: seq.slots[start..target].to_vec(),
            target_location: seq.locations[target],
            target_slot: seq.slots[target],
            target_index: target,
        });
        start += stride;
    }
    Ok(out)
}

/// Chronological 7:1:2 split of one user's samples: `floor(0.7n)` train,
/// `floor(0.1n)` validation, the remainder test.
pub fn split_user<T>(mut samples: Vec<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = samples.len();
    let (train, val) = (n * 7 / 10, n / 10);
    let test = samples.split_off(train + val);
    let val = samples.split_off(train);
    (samples, val, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub theta: i64,
    pub window_len: usize,
    pub stride: usize,
    /// Users with fewer activity records are dropped.
    pub min_records: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { theta: DEFAULT_THETA, window_len: DEFAULT_WINDOW, stride: 1, min_records: DEFAULT_MIN_RECORDS }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.theta >= 0, "theta must be non-negative");
        ensure!(self.window_len >= 2, "window_len must be at least 2");
        ensure!(self.stride >= 1, "stride must be at least 1");
        Ok(())
    }
}

/// Activity sequences of the retained users and their window splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// One past the largest user id seen in the raw data.
    pub users: usize,
    /// One past the largest location id seen in the raw data.
    pub locations: usize,
    /// Retained users' sequences, sorted by user id.
    pub sequences: Vec<ActivitySequence>,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl Dataset {
    pub fn sequence(&self, user: usize) -> Option<&ActivitySequence> {
        self.sequences.binary_search_by_key(&user, |s| s.user).ok().map(|i| &self.sequences[i])
    }

    /// The locations strictly before a sample's target.
    pub fn prefix(&self, sample: &WindowSample) -> Option<&[usize]> {
        self.sequence(sample.user).map(|s| &s.locations[..sample.target_index])
    }

    /// Per user, the activity prefix covered by its training windows
    /// (up to and including the last training target).
    pub fn training_prefixes(&self) -> Vec<(usize, &[usize])> {
        let mut last: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &self.train {
            let e = last.entry(s.user).or_insert(0);
            *e = (*e).max(s.target_index);
        }
        last.into_iter()
            .filter_map(|(u, end)| self.sequence(u).map(|s| (u, &s.locations[..=end])))
            .collect()
    }
}

/// Groups check-ins by user, each group sorted by time (stable for ties).
pub fn group_by_user(checkins: &[CheckIn]) -> BTreeMap<u32, Vec<CheckIn>> {
    let mut groups: BTreeMap<u32, Vec<CheckIn>> = BTreeMap::new();
    for c in checkins {
        groups.entry(c.user).or_default().push(*c);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|c| c.t);
    }
    groups
}

/// Extraction, filtering, windowing and splitting for a raw check-in set.
pub fn preprocess(checkins: &[CheckIn], cfg: &PreprocessConfig) -> Result<Dataset> {
    cfg.validate()?;
    ensure!(!checkins.is_empty(), "no check-ins to preprocess");
    let users = checkins.iter().map(|c| c.user as usize).max().unwrap_or(0) + 1;
    let locations = checkins.iter().map(|c| c.loc as usize).max().unwrap_or(0) + 1;
    let mut ds = Dataset { users, locations, sequences: Vec::new(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (user, group) in group_by_user(checkins) {
        let seq = extract_activity_sequence(user as usize, &group, cfg.theta)?;
        if seq.len() < cfg.min_records {
            continue;
        }
        let (tr, va, te) = split_user(make_windows(&seq, cfg.window_len, cfg.stride)?);
        ds.train.extend(tr);
        ds.val.extend(va);
        ds.test.extend(te);
        ds.sequences.push(seq);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_locations: usize,
    pub days: usize,
    /// Probability that a scheduled activity happens at a random non-anchor
    /// location instead of its anchor.
    pub p_explore: f64,
    /// Anchors per user; the day is cut into this many equal hour blocks.
    pub returner_anchor_count: usize,
    /// Shortest generated dwell, in seconds.
    pub min_dwell: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 200,
            num_locations: 50,
            days: 30,
            p_explore: 0.0,
            returner_anchor_count: 4,
            min_dwell: DEFAULT_THETA,
            seed: 0,
        }
    }
}

/// Latest start offset within an activity's hour.
const START_JITTER: i64 = 600;

impl SyntheticConfig {
    fn block_hours(&self) -> i64 {
        (SLOTS / self.returner_anchor_count.max(1)) as i64
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_users > 0, "num_users must be positive");
        ensure!(self.days > 0, "days must be positive");
        ensure!(
            self.p_explore.is_finite() && (0.0..=1.0).contains(&self.p_explore),
            "p_explore must lie in [0, 1], got {}",
            self.p_explore
        );
        ensure!(
            (2..=SLOTS / 2).contains(&self.returner_anchor_count),
            "returner_anchor_count must lie in [2, {}], got {}",
            SLOTS / 2,
            self.returner_anchor_count
        );
        ensure!(
            self.num_locations > self.returner_anchor_count,
            "num_locations ({}) must exceed returner_anchor_count ({})",
            self.num_locations,
            self.returner_anchor_count
        );
        ensure!(
            self.min_dwell >= 0 && self.min_dwell < self.block_hours() * SECONDS_PER_HOUR - START_JITTER,
            "min_dwell must be non-negative and leave room inside a {}-hour block",
            self.block_hours()
        );
        Ok(())
    }
}

/// Generates check-ins for returners with a fixed hour-of-day schedule
/// over their anchors, each activity swapped for a random non-anchor
/// location with probability `p_explore`. Every visit is recorded as an
/// arrival and a departure check-in at least `min_dwell` seconds apart, and
/// consecutive visits never share a location when an alternative exists.
/// Output is sorted by `(user, t)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<CheckIn>> {
    cfg.validate()?;
    let a = cfg.returner_anchor_count;
    let block = cfg.block_hours();
    let max_dwell = block * SECONDS_PER_HOUR - START_JITTER - 1;
    let mut out = Vec::with_capacity(cfg.num_users * cfg.days * a * 2);
    let all: Vec<u32> = (0..cfg.num_locations as u32).collect();

    for user in 0..cfg.num_users {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(user as u64 + 1);
        let anchors: Vec<u32> = all.choose_multiple(&mut rng, a).copied().collect();
        let others: Vec<u32> = all.iter().copied().filter(|l| !anchors.contains(l)).collect();
        let offset = rng.gen_range(0..SLOTS as i64);
        let mut previous: Option<u32> = None;
        for day in 0..cfg.days as i64 {
            for (j, &anchor) in anchors.iter().enumerate() {
                let start = day * SECONDS_PER_DAY
                    + (offset + j as i64 * block) * SECONDS_PER_HOUR
                    + rng.gen_range(0..START_JITTER);
                let dwell = rng.gen_range(cfg.min_dwell..=max_dwell);
                let explore = cfg.p_explore > 0.0 && rng.gen_bool(cfg.p_explore);
                let loc = if explore {
                    let candidates: Vec<u32> = others.iter().copied().filter(|&l| Some(l) != previous).collect();
                    let pool = if candidates.is_empty() { &others } else { &candidates };
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    anchor
                };
                out.push(CheckIn { user: user as u32, loc, t: start });
                out.push(CheckIn { user: user as u32, loc, t: start + dwell });
                previous = Some(loc);
            }
        }
    }
    Ok(out)
}

/// Per-user anchors and their slots under a generator config, in schedule
/// order. Useful for checking the returner regime.
pub fn synthetic_schedule(cfg: &SyntheticConfig, user: usize) -> Result<Vec<(u32, usize)>> {
    cfg.validate()?;
    if user >= cfg.num_users {
        return Err(Error::contract("user out of range"));
    }
    let all: Vec<u32> = (0..cfg.num_locations as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(user as u64 + 1);
    let anchors: Vec<u32> = all.choose_multiple(&mut rng, cfg.returner_anchor_count).copied().collect();
    let offset = rng.gen_range(0..SLOTS as i64);
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(j, &l)| (l, ((offset + j as i64 * cfg.block_hours()) % SLOTS as i64) as usize))
        .collect())
}
