//! Tree search: PUCT MCTS over a learned model or a perfect simulator, with
//! the Gumbel, Sampled and Stochastic variants.

mod gumbel;
mod mcts;
mod noise;
mod sampled;
mod tree;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionError, PolicyKind};
use crate::diffnet::DiffnetError;
use crate::envs::EnvError;
use crate::model::ModelError;

pub use gumbel::{completed_q, sequential_halving_schedule, sigma_transform};
pub use mcts::{run_search, Search};
pub use noise::{
    add_dirichlet_noise, chance_node_select, sample_action_from_visits, sample_categorical, sample_gumbel,
    visit_probabilities, ActionSelection,
};
pub use sampled::{expand_priors, gaussian_params, sample_root_actions};
pub use tree::{first_argmax, puct_scores, Edge, EdgeLabel, MinMaxStats, Node, NodeKind, Tree};
pub use world::{Evaluator, Expansion, LearnedWorld, SimulatorWorld, UniformEvaluator, World, WorldKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] DiffnetError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("no legal actions at the root")]
    NoLegalActions,
    #[error("node has not been expanded")]
    Unexpanded,
    #[error("operation does not apply to this node kind")]
    WrongNodeKind,
    #[error("chance node has no possible outcomes")]
    EmptyOutcomes,
    #[error("chance outcome {0} out of range")]
    InvalidOutcome(usize),
    #[error("policy parameters are not finite")]
    DegeneratePolicy,
    #[error("all visit counts are zero")]
    NoVisits,
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("simulation {index}: {source}")]
    Simulation { index: usize, source: Box<SearchError> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchVariant {
    #[default]
    Puct,
    Gumbel,
    Sampled,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelConfig {
    pub m_top: usize,
    pub c_visit: f64,
    pub c_scale: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            m_top: 16,
            c_visit: 50.0,
            c_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampledConfig {
    /// Actions sampled at every expanded node.
    pub k: usize,
}

impl Default for SampledConfig {
    fn default() -> Self {
        Self { k: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub num_simulations: usize,
    pub c1: f64,
    pub c2: f64,
    pub dirichlet_alpha: f64,
    pub noise_weight: f64,
    pub discount: f64,
    pub two_player: bool,
    pub variant: SearchVariant,
    pub gumbel: GumbelConfig,
    pub sampled: SampledConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_simulations: 50,
            c1: 1.25,
            c2: 19652.0,
            dirichlet_alpha: 0.3,
            noise_weight: 0.25,
            discount: 0.997,
            two_player: false,
            variant: SearchVariant::Puct,
            gumbel: GumbelConfig::default(),
            sampled: SampledConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.into()));
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_weight) {
            return bad("noise_weight must lie in [0, 1]");
        }
        if self.dirichlet_alpha <= 0.0 || self.c1 < 0.0 || self.c2 <= 0.0 {
            return bad("dirichlet_alpha and c2 must be positive, c1 non-negative");
        }
        if self.sampled.k == 0 {
            return bad("sampled.k must be at least 1");
        }
        if self.gumbel.m_top == 0 {
            return bad("gumbel.m_top must be at least 1");
        }
        Ok(())
    }
}

/// Outcome of one search from the root.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Root edges: legal actions, or the sampled subset.
    pub actions: Vec<Action>,
    pub priors: Vec<f64>,
    pub visit_counts: Vec<u32>,
    pub root_visit_distribution: Vec<f64>,
    /// Completed-Q policy for Gumbel, the visit distribution otherwise.
    pub improved_policy: Vec<f64>,
    /// Root `W / N`, from the perspective of the player to move.
    pub root_value: f64,
    /// Index into `actions`.
    pub selected: usize,
    pub simulations: usize,
}

impl SearchResult {
    pub fn selected_action(&self) -> &Action {
        &self.actions[self.selected]
    }

    /// Scatters a per-edge distribution over `n` discrete actions.
    pub fn dense(&self, values: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (a, v) in self.actions.iter().zip(values) {
            if let Some(i) = a.index() {
                out[i] += v;
            }
        }
        out
    }

    /// Training target: improved policy for Gumbel, visits otherwise.
    pub fn policy_target(&self, variant: SearchVariant) -> &[f64] {
        match variant {
            SearchVariant::Gumbel => &self.improved_policy,
            _ => &self.root_visit_distribution,
        }
    }
}

pub(crate) fn check_policy(policy: PolicyKind, variant: SearchVariant) -> Result<(), SearchError> {
    if matches!(policy, PolicyKind::Gaussian { .. }) && variant != SearchVariant::Sampled {
        return Err(SearchError::InvalidConfig("Gaussian policies need the sampled variant".into()));
    }
    Ok(())
}
