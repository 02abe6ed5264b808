//! Collect, arrange, learn and evaluate: run configuration, episode
//! collection, evaluation, the latent alignment probe, and the
//! multi-seed orchestration with checkpoints and CSV metrics.

mod collect;
mod probe;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::PolicyKind;
use crate::envs::{ActionSpace, EnvConfig, EnvError, EnvSpec};
use crate::explore::{ExplorationConfig, ExplorationStrategy, ExploreError};
use crate::model::{ModelConfig, ModelError, ModelShape, ValueHeadKind};
use crate::replay::{BufferConfig, ReplayError};
use crate::search::{SearchConfig, SearchError, SearchVariant, WorldKind};
use crate::trainer::{TrainError, TrainerConfig};

pub use collect::{collect_episode, evaluate, random_policy_returns, search_world, EvalReport, Snapshot};
pub use probe::{alignment_probe, probe_transitions, ProbeStats, ProbeTransition};
pub use run::{
    agent_move, aggregate_seeds, latest_checkpoint, orchestrate, orchestrate_seed, random_probe_set, read_csv, seed_dir,
    AggregateRow,
    Checkpoint, EvalRow, Manifest, RunOptions, RunState, RunSummary, TrainRow, CHECKPOINT_SCHEMA, MANIFEST_SCHEMA,
    STATE_SCHEMA,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("probe needs at least one transition")]
    EmptyProbe,
}

impl PipelineError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        PipelineError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Search through the real environment; policy and value losses only.
    #[serde(rename = "alphazero")]
    AlphaZero,
    #[serde(rename = "muzero")]
    MuZero,
    /// MuZero with the self-supervised consistency loss.
    #[serde(rename = "muzero_ssl")]
    MuZeroSsl,
    Sampled,
    Gumbel,
    Stochastic,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::AlphaZero,
        Algorithm::MuZero,
        Algorithm::MuZeroSsl,
        Algorithm::Sampled,
        Algorithm::Gumbel,
        Algorithm::Stochastic,
    ];

    fn forced_variant(self) -> Option<SearchVariant> {
        match self {
            Algorithm::Sampled => Some(SearchVariant::Sampled),
            Algorithm::Gumbel => Some(SearchVariant::Gumbel),
            Algorithm::Stochastic => Some(SearchVariant::Stochastic),
            _ => None,
        }
    }
}

/// Who the agent plays against during two-player evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOpponent {
    Random,
    /// Exact solver, random among optimal moves.
    Minimax,
    SelfPlay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    /// Defaults to the perfect simulator for AlphaZero, the learned model
    /// otherwise.
    pub world: Option<WorldKind>,
    /// Defaults to the environment's natural parameterisation.
    pub policy: Option<PolicyKind>,
    /// Shared by search and targets; 1 for two-player games, 0.997 otherwise
    /// when unset.
    pub discount: Option<f64>,
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub buffer: BufferConfig,
    pub trainer: TrainerConfig,
    /// Composed into `exploration` when that is unset.
    pub strategies: Vec<ExplorationStrategy>,
    pub exploration: Option<ExplorationConfig>,
    /// Env steps at which the temperature decay completes; the run length
    /// when unset.
    pub temperature_threshold: Option<u64>,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Simulations for evaluation search; collection's when unset.
    pub eval_simulations: Option<usize>,
    pub eval_opponent: EvalOpponent,
    /// Held-out transitions for the alignment probe.
    pub probe_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::tictactoe(),
            algorithm: Algorithm::AlphaZero,
            world: None,
            policy: None,
            discount: None,
            model: ModelConfig::default(),
            search: SearchConfig::default(),
            buffer: BufferConfig::default(),
            trainer: TrainerConfig::default(),
            strategies: Vec::new(),
            exploration: None,
            temperature_threshold: None,
            total_env_steps: 10_000,
            eval_every: 2000,
            eval_episodes: 20,
            eval_simulations: None,
            eval_opponent: EvalOpponent::Random,
            probe_size: 512,
            seeds: (0..5).collect(),
        }
    }
}

/// Every setting a seed's run needs, with defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub env: EnvConfig,
    pub spec: EnvSpec,
    pub algorithm: Algorithm,
    pub world: WorldKind,
    pub shape: ModelShape,
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub eval_search: SearchConfig,
    pub buffer: BufferConfig,
    pub trainer: TrainerConfig,
    pub exploration: ExplorationConfig,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_opponent: EvalOpponent,
    pub probe_size: usize,
}

fn policy_fits(policy: PolicyKind, space: ActionSpace) -> bool {
    match (policy, space) {
        (PolicyKind::Categorical { n }, ActionSpace::Discrete { n: m }) => n == m,
        (PolicyKind::Factored { dims, bins }, ActionSpace::Continuous { dim, .. }) => dims == dim && bins >= 1,
        (PolicyKind::Gaussian { dims }, ActionSpace::Continuous { dim, .. }) => dims == dim,
        _ => false,
    }
}

impl RunConfig {
    pub fn resolve(&self) -> Result<ResolvedRun, PipelineError> {
        let spec = self.env.build().map_err(|e| PipelineError::config("env", e.to_string()))?.spec().clone();
        let two_player = spec.two_player();

        let variant = match self.algorithm.forced_variant() {
            Some(v) => v,
            None if self.search.variant == SearchVariant::Stochastic => {
                return Err(PipelineError::config("search.variant", "stochastic search needs algorithm = \"stochastic\""));
            }
            None => self.search.variant,
        };
        let world = self.world.unwrap_or(match self.algorithm {
            Algorithm::AlphaZero => WorldKind::PerfectSimulator,
            _ => WorldKind::LearnedModel,
        });
        let learned = world == WorldKind::LearnedModel;

        let policy = self.policy.unwrap_or_else(|| spec.default_policy());
        if !policy_fits(policy, spec.action_space) {
            return Err(PipelineError::config("policy", format!("{policy:?} does not fit action space {:?}", spec.action_space)));
        }
        if matches!(policy, PolicyKind::Gaussian { .. }) && variant != SearchVariant::Sampled {
            return Err(PipelineError::config("policy", "a Gaussian policy needs the sampled search variant"));
        }
        if variant == SearchVariant::Stochastic {
            if spec.chance_dim.is_none() {
                return Err(PipelineError::config("env", format!("{} has no chance events for stochastic search", spec.name)));
            }
            if two_player {
                return Err(PipelineError::config("env", "stochastic search is limited to single-player environments"));
            }
        }

        let mut trainer = self.trainer.clone();
        if self.algorithm == Algorithm::MuZeroSsl && trainer.weights.consistency == 0.0 {
            trainer.weights.consistency = 2.0;
        }
        let discount = self.discount.unwrap_or(if two_player { 1.0 } else { 0.997 });
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(PipelineError::config("discount", "must lie in (0, 1]"));
        }

        let mut exploration = match &self.exploration {
            Some(e) => e.clone(),
            None => {
                let mut e = ExplorationConfig::compose(&self.strategies);
                e.temperature.threshold_steps = self.total_env_steps.max(1);
                e
            }
        };
        if let Some(t) = self.temperature_threshold {
            exploration.temperature.threshold_steps = t;
        }
        exploration.validate().map_err(|e| PipelineError::config("exploration", e.to_string()))?;
        trainer.weights.entropy = trainer.weights.entropy.max(exploration.entropy_weight);
        trainer.weights.validate().map_err(|e| PipelineError::config("trainer.weights", e))?;
        if trainer.batch_size == 0 || !(trainer.max_grad_norm > 0.0) {
            return Err(PipelineError::config("trainer", "batch_size and max_grad_norm must be positive"));
        }
        if trainer.optimizer.lr < 0.0 {
            return Err(PipelineError::config("trainer.optimizer.lr", "must be non-negative"));
        }

        let shape = ModelShape {
            obs_dim: spec.obs_dim,
            policy,
            value_head: if two_player {
                ValueHeadKind::TanhBounded
            } else {
                ValueHeadKind::Linear
            },
            dynamics: learned && variant != SearchVariant::Stochastic,
            projection: learned && trainer.weights.consistency > 0.0,
            chance_dim: if learned && variant == SearchVariant::Stochastic {
                spec.chance_dim
            } else {
                None
            },
        };
        if self.model.latent_dim == 0 || self.model.hidden == 0 || self.model.projection_dim == 0 {
            return Err(PipelineError::config("model", "widths must be positive"));
        }

        let mut search = self.search.clone();
        search.variant = variant;
        search.two_player = two_player;
        search.discount = discount;
        search.validate().map_err(|e| PipelineError::config("search", e.to_string()))?;
        if search.num_simulations == 0 {
            return Err(PipelineError::config("search.num_simulations", "must be at least 1"));
        }
        let mut eval_search = search.clone();
        if let Some(n) = self.eval_simulations {
            if n == 0 {
                return Err(PipelineError::config("eval_simulations", "must be at least 1"));
            }
            eval_search.num_simulations = n;
        }

        let mut buffer = self.buffer.clone();
        buffer.discount = discount;
        if self.algorithm == Algorithm::AlphaZero {
            buffer.n_step = spec.max_steps + 1;
        }
        buffer.intrinsic_weight = exploration.intrinsic_beta();
        if buffer.reanalyze_ratio.is_none() {
            buffer.reanalyze_ratio = Some(if two_player { 0.0 } else { 0.25 });
        }
        buffer.validate().map_err(|e| PipelineError::config("buffer", e.to_string()))?;

        if self.eval_every == 0 {
            return Err(PipelineError::config("eval_every", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(PipelineError::config("seeds", "need at least one seed"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(PipelineError::config("seeds", "seeds must be distinct"));
        }

        Ok(ResolvedRun {
            env: self.env.clone(),
            spec,
            algorithm: self.algorithm,
            world,
            shape,
            model: self.model.clone(),
            search,
            eval_search,
            buffer,
            trainer,
            exploration,
            total_env_steps: self.total_env_steps,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            eval_opponent: self.eval_opponent,
            probe_size: self.probe_size,
        })
    }
}
