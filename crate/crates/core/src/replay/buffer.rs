use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sumtree::{MaxTree, SumTree};
use super::targets::{compute_targets, reanalyze_sample};
use super::{BufferConfig, GameSegment, ReplayError, Sample, TransitionBatch};
use crate::model::MuZeroModel;
use crate::search::SearchConfig;

pub const BUFFER_SCHEMA: &str = "zerodesk-buffer/1";

const PRIORITY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub pushed_segments: u64,
    pub pushed_transitions: u64,
    pub evicted_transitions: u64,
    pub sampled: u64,
    pub reanalyzed: u64,
    pub stale_priority_updates: u64,
}

/// Transition store with proportional prioritised sampling.
///
/// Every transition gets a global id; the last `capacity` ids are resident
/// and id `i` lives in slot `i % capacity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    schema: String,
    cfg: BufferConfig,
    /// `(first id, segment)` in push order.
    segments: VecDeque<(u64, GameSegment)>,
    /// `p^alpha` per slot.
    sum: SumTree,
    /// Raw `p` per slot.
    max: MaxTree,
    next_id: u64,
    stats: BufferStats,
}

impl ReplayBuffer {
    pub fn new(cfg: BufferConfig) -> Result<Self, ReplayError> {
        cfg.validate()?;
        Ok(Self {
            schema: BUFFER_SCHEMA.into(),
            sum: SumTree::new(cfg.capacity),
            max: MaxTree::new(cfg.capacity),
            cfg,
            segments: VecDeque::new(),
            next_id: 0,
            stats: BufferStats::default(),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &BufferStats {
        &self.stats
    }

    /// Resident transitions.
    pub fn len(&self) -> usize {
        (self.next_id - self.oldest_id()) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> impl Iterator<Item = &GameSegment> {
        self.segments.iter().map(|(_, s)| s)
    }

    fn oldest_id(&self) -> u64 {
        self.next_id.saturating_sub(self.cfg.capacity as u64)
    }

    pub fn contains(&self, id: u64) -> bool {
        id >= self.oldest_id() && id < self.next_id
    }

    fn slot(&self, id: u64) -> usize {
        (id % self.cfg.capacity as u64) as usize
    }

    /// Raw priority of a resident transition.
    pub fn priority(&self, id: u64) -> Option<f64> {
        self.contains(id).then(|| self.max.get(self.slot(id)))
    }

    pub fn push_segment(&mut self, segment: GameSegment) -> Result<(), ReplayError> {
        segment.validate()?;
        let p = if self.is_empty() { 1.0 } else { self.max.max() };
        let first = self.next_id;
        let before = self.len();
        for i in 0..segment.len() as u64 {
            let slot = self.slot(first + i);
            self.sum.set(slot, p.powf(self.cfg.per_alpha));
            self.max.set(slot, p);
        }
        self.next_id += segment.len() as u64;
        self.stats.pushed_segments += 1;
        self.stats.pushed_transitions += segment.len() as u64;
        self.stats.evicted_transitions += (before + segment.len() - self.len()) as u64;
        self.segments.push_back((first, segment));
        let oldest = self.oldest_id();
        while let Some((start, seg)) = self.segments.front() {
            if start + seg.len() as u64 <= oldest {
                self.segments.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }

    fn locate(&self, id: u64) -> (&GameSegment, usize) {
        let k = self.segments.partition_point(|(start, _)| *start <= id) - 1;
        let (start, seg) = &self.segments[k];
        (seg, (id - start) as usize)
    }

    /// Unreanalysed batch.
    pub fn sample_batch<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<TransitionBatch, ReplayError> {
        self.sample_batch_with(batch_size, None, rng)
    }

    /// Batch whose first `round(reanalyze_ratio * batch_size)` samples get
    /// targets refreshed by searching with `reanalyze`.
    pub fn sample_batch_with<R: Rng + ?Sized>(
        &mut self,
        batch_size: usize,
        reanalyze: Option<(&MuZeroModel, &SearchConfig)>,
        rng: &mut R,
    ) -> Result<TransitionBatch, ReplayError> {
        let have = self.len();
        if have < batch_size || batch_size == 0 {
            return Err(ReplayError::Underfilled { have, need: batch_size.max(1) });
        }
        let total = self.sum.total();
        let oldest = self.oldest_id();
        let n_reanalyze = match reanalyze {
            Some(_) => (self.cfg.reanalyze_fraction() * batch_size as f64).round() as usize,
            None => 0,
        };
        let mut drawn = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let slot = self.sum.find(rng.random::<f64>() * total);
            // The resident id occupying `slot`.
            let cap = self.cfg.capacity as u64;
            let base = oldest - oldest % cap + slot as u64;
            let id = if base < oldest { base + cap } else { base };
            let prob = self.sum.get(slot) / total;
            drawn.push((id, prob));
        }
        let weights: Vec<f64> = drawn
            .iter()
            .map(|(_, p)| (have as f64 * p).powf(-self.cfg.per_beta))
            .collect();
        let max_w = weights.iter().copied().fold(0.0, f64::max);
        let mut samples = Vec::with_capacity(batch_size);
        for (k, ((id, _), w)) in drawn.into_iter().zip(weights).enumerate() {
            let (seg, pos) = self.locate(id);
            let refreshed = match reanalyze {
                Some((model, search)) if k < n_reanalyze => {
                    Some(reanalyze_sample(seg, pos, &self.cfg, model, search, rng)?)
                }
                _ => None,
            };
            let mut sample = build_sample(seg, pos, &self.cfg, refreshed.as_ref());
            sample.id = id;
            sample.weight = w / max_w;
            samples.push(sample);
        }
        self.stats.sampled += batch_size as u64;
        self.stats.reanalyzed += n_reanalyze as u64;
        Ok(TransitionBatch { samples })
    }

    /// `p_i = |td_i| + 1e-6`; evicted ids are skipped and counted.
    pub fn update_priorities(&mut self, ids: &[u64], td_errors: &[f64]) {
        for (id, td) in ids.iter().zip(td_errors) {
            if !self.contains(*id) || !td.is_finite() {
                self.stats.stale_priority_updates += 1;
                continue;
            }
            let p = td.abs() + PRIORITY_EPS;
            let slot = self.slot(*id);
            self.sum.set(slot, p.powf(self.cfg.per_alpha));
            self.max.set(slot, p);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let text = serde_json::to_string(self).map_err(|e| ReplayError::Snapshot(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ReplayError::Snapshot(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReplayError::Snapshot(e.to_string()))?;
        let buf: Self = serde_json::from_str(&text).map_err(|e| ReplayError::Snapshot(e.to_string()))?;
        if buf.schema != BUFFER_SCHEMA {
            return Err(ReplayError::Snapshot(format!("unsupported schema {}", buf.schema)));
        }
        Ok(buf)
    }
}

fn build_sample(
    seg: &GameSegment,
    pos: usize,
    cfg: &BufferConfig,
    refreshed: Option<&super::RefreshedTargets>,
) -> Sample {
    let len = seg.len();
    let u = cfg.unroll_steps;
    let clamp = |i: usize| i.min(len - 1);
    Sample {
        id: 0,
        observation: seg.observations[pos].clone(),
        to_play: seg.to_play[pos],
        actions: (pos..pos + u).map(|i| seg.actions[clamp(i)].clone()).collect(),
        chance_outcomes: (pos..pos + u).map(|i| seg.chance_outcomes[clamp(i)]).collect(),
        next_observations: (pos + 1..=pos + u)
            .map(|i| (i <= len).then(|| seg.observations[i].clone()))
            .collect(),
        targets: compute_targets(seg, pos, cfg, refreshed),
        weight: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::action::Action;
    use crate::replay::PolicyTarget;

    fn segment(len: usize, tag: f64) -> GameSegment {
        GameSegment {
            observations: (0..=len).map(|i| vec![tag, i as f64]).collect(),
            actions: (0..len).map(Action::Discrete).collect(),
            rewards_ext: vec![0.0; len],
            rewards_int: vec![0.0; len],
            policy_targets: vec![PolicyTarget::Dense(vec![0.5, 0.5]); len],
            root_values: vec![0.0; len],
            to_play: vec![0; len + 1],
            legal: vec![Some(vec![true, true]); len],
            chance_outcomes: vec![None; len],
            terminal: true,
            final_value: 0.0,
            winner: None,
        }
    }

    fn buffer(capacity: usize, alpha: f64, beta: f64) -> ReplayBuffer {
        ReplayBuffer::new(BufferConfig {
            capacity,
            per_alpha: alpha,
            per_beta: beta,
            unroll_steps: 2,
            ..BufferConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn push_indexes_every_position() {
        let mut b = buffer(100, 0.6, 0.4);
        b.push_segment(segment(10, 0.0)).unwrap();
        assert_eq!(b.len(), 10);
        assert!((0..10).all(|id| b.priority(id) == Some(1.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = b.sample_batch(10, &mut rng).unwrap();
        assert!(batch.samples.iter().all(|s| s.observation[1] == (s.id as f64)));
        assert!(b.sample_batch(11, &mut rng).is_err());
        assert!(b.push_segment(GameSegment::default()).is_err());
    }

    #[test]
    fn new_transitions_take_the_max_priority() {
        let mut b = buffer(100, 1.0, 0.4);
        b.push_segment(segment(2, 0.0)).unwrap();
        b.update_priorities(&[0, 1], &[4.0, 0.5]);
        b.push_segment(segment(1, 1.0)).unwrap();
        assert!((b.priority(2).unwrap() - (4.0 + PRIORITY_EPS)).abs() < 1e-12);
    }

    #[test]
    fn eviction_keeps_capacity_exactly() {
        let mut b = buffer(25, 0.6, 0.4);
        for k in 0..10 {
            b.push_segment(segment(7, k as f64)).unwrap();
            assert!(b.len() <= 25);
        }
        assert_eq!(b.len(), 25);
        assert_eq!(b.stats().evicted_transitions, 70 - 25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let batch = b.sample_batch(8, &mut rng).unwrap();
            for s in &batch.samples {
                assert!(b.contains(s.id));
                let (first, seg) = (s.id / 7, s.id % 7);
                assert_eq!(s.observation, vec![first as f64, seg as f64]);
            }
        }
        assert!(b.segments().count() <= 5);
    }

    #[test]
    fn stale_updates_are_skipped_and_counted() {
        let mut b = buffer(5, 0.6, 0.4);
        b.push_segment(segment(5, 0.0)).unwrap();
        b.push_segment(segment(3, 1.0)).unwrap();
        b.update_priorities(&[0, 4, 7], &[1.0, 0.0, 2.0]);
        assert_eq!(b.stats().stale_priority_updates, 1);
        assert_eq!(b.priority(4), Some(PRIORITY_EPS));
        assert_eq!(b.priority(0), None);
    }

    #[test]
    fn zero_td_stays_sampleable() {
        let mut b = buffer(10, 0.6, 0.4);
        b.push_segment(segment(2, 0.0)).unwrap();
        b.update_priorities(&[0, 1], &[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<u64> = (0..200).flat_map(|_| b.sample_batch(1, &mut rng).unwrap().ids()).collect();
        assert!(ids.contains(&0) && ids.contains(&1));
    }

    fn frequencies(b: &mut ReplayBuffer, draws: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b.len();
        let mut counts = vec![0; n];
        for _ in 0..draws / n {
            for id in b.sample_batch(n, &mut rng).unwrap().ids() {
                counts[id as usize] += 1;
            }
        }
        counts
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let mut b = buffer(20, 0.0, 0.4);
        b.push_segment(segment(20, 0.0)).unwrap();
        let ids: Vec<u64> = (0..20).collect();
        let td: Vec<f64> = (0..20).map(|i| i as f64).collect();
        b.update_priorities(&ids, &td);
        let n = 100_000;
        let counts = frequencies(&mut b, n, 3);
        let (mean, sd) = (n as f64 / 20.0, (n as f64 * 0.05 * 0.95).sqrt());
        assert!(counts.iter().all(|c| (*c as f64 - mean).abs() <= 3.0 * sd), "{counts:?}");
    }

    #[test]
    fn proportional_one_to_three() {
        let mut b = buffer(2, 1.0, 0.4);
        b.push_segment(segment(2, 0.0)).unwrap();
        b.update_priorities(&[0, 1], &[1.0, 3.0]);
        let counts = frequencies(&mut b, 100_000, 4);
        let ratio = counts[1] as f64 / counts[0] as f64;
        assert!((ratio - 3.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn chi_square_matches_priorities_alpha() {
        let mut b = buffer(8, 0.6, 0.4);
        b.push_segment(segment(8, 0.0)).unwrap();
        let td = [0.1, 0.5, 1.0, 2.0, 3.0, 0.2, 4.0, 1.5];
        b.update_priorities(&(0..8).collect::<Vec<_>>(), &td);
        let n = 100_000;
        let counts = frequencies(&mut b, n, 5);
        let w: Vec<f64> = td.iter().map(|t| (t + PRIORITY_EPS).powf(0.6)).collect();
        let total: f64 = w.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(&w)
            .map(|(c, wi)| {
                let e = n as f64 * wi / total;
                (*c as f64 - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2={stat} p={p}");
    }

    #[test]
    fn weights_equal_priorities_beta_one() {
        let mut b = buffer(50, 0.6, 1.0);
        b.push_segment(segment(30, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = b.sample_batch(16, &mut rng).unwrap();
        assert!(batch.samples.iter().all(|s| s.weight == 1.0));
        b.update_priorities(&[0], &[50.0]);
        let batch = b.sample_batch(30, &mut rng).unwrap();
        assert!(batch.samples.iter().all(|s| s.weight > 0.0 && s.weight <= 1.0));
    }

    #[test]
    fn past_the_end_repeats_the_last_action() {
        let seg = segment(3, 0.0);
        let cfg = BufferConfig {
            unroll_steps: 4,
            ..BufferConfig::default()
        };
        let s = build_sample(&seg, 1, &cfg, None);
        assert_eq!(
            s.actions,
            vec![Action::Discrete(1), Action::Discrete(2), Action::Discrete(2), Action::Discrete(2)]
        );
        assert_eq!(s.next_observations.iter().filter(|o| o.is_some()).count(), 2);
        assert_eq!(s.targets.len(), 5);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut b = buffer(30, 0.6, 0.4);
        b.push_segment(segment(12, 0.0)).unwrap();
        b.update_priorities(&[3], &[2.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.json");
        b.save(&path).unwrap();
        assert_eq!(ReplayBuffer::load(&path).unwrap(), b);
        std::fs::write(&path, std::fs::read_to_string(&path).unwrap().replace(BUFFER_SCHEMA, "other/9")).unwrap();
        assert!(ReplayBuffer::load(&path).is_err());
    }
}
