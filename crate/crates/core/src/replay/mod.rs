//! Episode storage, proportional prioritised sampling, n-step target
//! assembly, reanalyse, and the collect/train throughput gate.

mod buffer;
mod sumtree;
mod targets;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::search::SearchError;

pub use buffer::{BufferStats, ReplayBuffer, BUFFER_SCHEMA};
pub use sumtree::SumTree;
pub use targets::{compute_targets, n_step_value, policy_target_from_search, reanalyze_sample, RefreshedTargets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("malformed segment: {0}")]
    MalformedSegment(String),
    #[error("buffer holds {have} transitions, batch needs {need}")]
    Underfilled { have: usize, need: usize },
    #[error("invalid buffer config: {0}")]
    InvalidConfig(String),
    #[error("reanalyse: {0}")]
    Reanalyze(#[from] SearchError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferConfig {
    /// Capacity in transitions.
    pub capacity: usize,
    pub per_alpha: f64,
    pub per_beta: f64,
    pub n_step: usize,
    pub unroll_steps: usize,
    pub discount: f64,
    /// Share of each batch reanalysed; unset means 0 for two-player games
    /// and 0.25 otherwise.
    pub reanalyze_ratio: Option<f64>,
    /// Trained samples per collected transition.
    pub replay_ratio: f64,
    /// Weight of the stored intrinsic reward in the training reward.
    pub intrinsic_weight: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            per_alpha: 0.6,
            per_beta: 0.4,
            n_step: 5,
            unroll_steps: 5,
            discount: 0.997,
            reanalyze_ratio: None,
            replay_ratio: 0.25,
            intrinsic_weight: 0.0,
        }
    }
}

impl BufferConfig {
    pub fn reanalyze_fraction(&self) -> f64 {
        self.reanalyze_ratio.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::InvalidConfig(m.into()));
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        if self.per_alpha < 0.0 || !(0.0..=1.0).contains(&self.per_beta) {
            return bad("per_alpha must be non-negative and per_beta in [0, 1]");
        }
        if self.n_step == 0 {
            return bad("n_step must be at least 1");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.reanalyze_fraction()) || self.replay_ratio < 0.0 || self.intrinsic_weight < 0.0 {
            return bad("ratios out of range");
        }
        Ok(())
    }
}

/// Search policy stored as a training target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTarget {
    /// Distribution over every joint discrete action.
    Dense(Vec<f64>),
    /// Distribution over a sampled subset of actions.
    Sampled { actions: Vec<Action>, probs: Vec<f64> },
}

impl PolicyTarget {
    pub fn uniform_over(legal: &[bool]) -> Self {
        let n = legal.iter().filter(|l| **l).count().max(1) as f64;
        PolicyTarget::Dense(legal.iter().map(|l| if *l { 1.0 / n } else { 0.0 }).collect())
    }

    pub fn total(&self) -> f64 {
        match self {
            PolicyTarget::Dense(p) => p.iter().sum(),
            PolicyTarget::Sampled { probs, .. } => probs.iter().sum(),
        }
    }
}

/// One episode (or the collected part of one).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GameSegment {
    /// `T + 1` observations, the last one after the final action.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    /// Reward to the player who moved at `t`.
    pub rewards_ext: Vec<f64>,
    /// Intrinsic reward in [0, 1]; zeros when exploration is off.
    pub rewards_int: Vec<f64>,
    pub policy_targets: Vec<PolicyTarget>,
    /// Search root value at `t`, from the perspective of `to_play[t]`.
    pub root_values: Vec<f64>,
    /// `T + 1` entries, the last for the final observation.
    pub to_play: Vec<usize>,
    /// Legal-action mask at `t`, `None` for continuous control.
    pub legal: Vec<Option<Vec<bool>>>,
    pub chance_outcomes: Vec<Option<usize>>,
    /// The episode reached a true terminal state (not a step limit).
    pub terminal: bool,
    /// Value estimate of the final observation when not terminal.
    pub final_value: f64,
    pub winner: Option<usize>,
}

impl GameSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let t = self.len();
        let bad = |m: String| Err(ReplayError::MalformedSegment(m));
        if t == 0 {
            return bad("empty segment".into());
        }
        let lens = [
            ("rewards_ext", self.rewards_ext.len()),
            ("rewards_int", self.rewards_int.len()),
            ("policy_targets", self.policy_targets.len()),
            ("root_values", self.root_values.len()),
            ("legal", self.legal.len()),
            ("chance_outcomes", self.chance_outcomes.len()),
        ];
        for (name, len) in lens {
            if len != t {
                return bad(format!("{name} has {len} entries, expected {t}"));
            }
        }
        if self.observations.len() != t + 1 || self.to_play.len() != t + 1 {
            return bad(format!("observations and to_play need {} entries", t + 1));
        }
        for (i, p) in self.policy_targets.iter().enumerate() {
            if (p.total() - 1.0).abs() > 1e-6 {
                return bad(format!("policy target {i} sums to {}", p.total()));
            }
        }
        let finite = self
            .rewards_ext
            .iter()
            .chain(&self.rewards_int)
            .chain(&self.root_values)
            .all(|x| x.is_finite());
        if !finite || !self.final_value.is_finite() {
            return bad("non-finite reward or value".into());
        }
        Ok(())
    }

    /// Training reward at `t`: external plus weighted intrinsic.
    pub fn reward(&self, t: usize, intrinsic_weight: f64) -> f64 {
        self.rewards_ext[t] + intrinsic_weight * self.rewards_int[t]
    }
}

/// Per unroll step targets.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTarget {
    pub value: f64,
    pub reward: f64,
    pub policy: PolicyTarget,
    /// False at absorbing steps past the end of the episode.
    pub policy_mask: bool,
    /// False where no value target is known (past a truncated end).
    pub value_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub observation: Vec<f64>,
    pub to_play: usize,
    /// Actions `a_t .. a_{t+U-1}`; past the end the last action repeats.
    pub actions: Vec<Action>,
    /// Chance outcome after each action, when known.
    pub chance_outcomes: Vec<Option<usize>>,
    /// Observations `o_{t+1} .. o_{t+U}`; `None` past the end.
    pub next_observations: Vec<Option<Vec<f64>>>,
    /// `U + 1` entries.
    pub targets: Vec<StepTarget>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionBatch {
    pub samples: Vec<Sample>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    Collect,
    Train,
}

/// Keeps trained samples at `replay_ratio` times collected transitions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputGate {
    pub replay_ratio: f64,
    pub collected: u64,
    pub trained: u64,
}

impl ThroughputGate {
    pub fn new(replay_ratio: f64) -> Self {
        Self {
            replay_ratio,
            collected: 0,
            trained: 0,
        }
    }

    pub fn decide(&self) -> GateDecision {
        throughput_gate(self.collected, self.trained, self.replay_ratio)
    }

    pub fn record_collected(&mut self, n: usize) {
        self.collected += n as u64;
    }

    pub fn record_trained(&mut self, n: usize) {
        self.trained += n as u64;
    }
}

/// `Train` while `trained < replay_ratio * collected`.
pub fn throughput_gate(collected: u64, trained: u64, replay_ratio: f64) -> GateDecision {
    if (trained as f64) < replay_ratio * collected as f64 {
        GateDecision::Train
    } else {
        GateDecision::Collect
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_rule() {
        assert_eq!(throughput_gate(100, 50, 1.0), GateDecision::Train);
        assert_eq!(throughput_gate(100, 100, 1.0), GateDecision::Collect);
        assert_eq!(throughput_gate(0, 0, 0.25), GateDecision::Collect);
        let mut g = ThroughputGate::new(0.25);
        g.record_collected(400);
        assert_eq!(g.decide(), GateDecision::Train);
        g.record_trained(100);
        assert_eq!(g.decide(), GateDecision::Collect);
    }

    #[test]
    fn uniform_policy_over_legal() {
        let p = PolicyTarget::uniform_over(&[true, false, true, true]);
        assert_eq!(p, PolicyTarget::Dense(vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]));
    }

    #[test]
    fn segment_validation() {
        let mut s = GameSegment {
            observations: vec![vec![0.0]; 3],
            actions: vec![Action::Discrete(0); 2],
            rewards_ext: vec![0.0, 1.0],
            rewards_int: vec![0.0; 2],
            policy_targets: vec![PolicyTarget::Dense(vec![0.5, 0.5]); 2],
            root_values: vec![0.0; 2],
            to_play: vec![0; 3],
            legal: vec![None; 2],
            chance_outcomes: vec![None; 2],
            terminal: true,
            final_value: 0.0,
            winner: None,
        };
        s.validate().unwrap();
        s.rewards_int.pop();
        assert!(s.validate().is_err());
    }
}
