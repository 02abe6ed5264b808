//! Built-in desk-scale environments behind one interface.
//!
//! All environments are deterministic given the reset seed; stochastic ones
//! keep their RNG inside the state so [`Environment::clone_state`] captures
//! the chance stream too.

mod game2048;
mod gridmaze;
mod kinrow;
mod minimax;
mod pendulum;

use std::any::Any;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, PolicyKind};

pub use game2048::{Game2048, Game2048Config};
pub use gridmaze::{GridMaze, GridMazeConfig};
pub use kinrow::{KInRow, KInRowConfig, Stone};
pub use minimax::{minimax_oracle, MinimaxSolver, OracleResult};
pub use pendulum::{PendulumLite, PendulumLiteConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("illegal action {0:?}")]
    IllegalAction(Action),
    #[error("episode is over")]
    Terminal,
    #[error("state token belongs to {found}, not {expected}")]
    WrongToken { expected: &'static str, found: &'static str },
    #[error("environment has no chance events")]
    NotStochastic,
    #[error("chance event pending; resolve it first")]
    ChancePending,
    #[error("no chance event pending")]
    NoChancePending,
    #[error("chance outcome {0} is impossible in this state")]
    ImpossibleOutcome(usize),
    #[error("state space too large for exhaustive search ({0} empty cells)")]
    StateSpaceTooLarge(usize),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize, bins_per_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub num_players: usize,
    pub max_steps: usize,
    pub chance_dim: Option<usize>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_steps < 1 {
            return Err(EnvError::InvalidConfig("max_steps must be at least 1".into()));
        }
        if let ActionSpace::Discrete { n } = self.action_space {
            if n < 2 {
                return Err(EnvError::InvalidConfig("discrete action count must be at least 2".into()));
            }
        }
        if !(1..=2).contains(&self.num_players) {
            return Err(EnvError::InvalidConfig("num_players must be 1 or 2".into()));
        }
        Ok(())
    }

    pub fn two_player(&self) -> bool {
        self.num_players == 2
    }

    /// Default policy parameterisation: categorical for discrete spaces,
    /// factored bins for continuous ones.
    pub fn default_policy(&self) -> PolicyKind {
        match self.action_space {
            ActionSpace::Discrete { n } => PolicyKind::Categorical { n },
            ActionSpace::Continuous { dim, bins_per_dim } => PolicyKind::Factored {
                dims: dim,
                bins: bins_per_dim,
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub winner: Option<usize>,
    pub chance_outcome: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Vec<f64>,
    /// Reward to the player who acted.
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LegalActions {
    Mask(Vec<bool>),
    Continuous { dim: usize },
}

impl LegalActions {
    pub fn mask(&self) -> Option<&[bool]> {
        match self {
            LegalActions::Mask(m) => Some(m),
            LegalActions::Continuous { .. } => None,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        match self {
            LegalActions::Mask(m) => m.iter().enumerate().filter(|(_, l)| **l).map(|(i, _)| i).collect(),
            LegalActions::Continuous { .. } => Vec::new(),
        }
    }
}

/// Opaque snapshot of an environment's full state, RNG included.
pub struct StateToken {
    kind: &'static str,
    state: Box<dyn Any + Send>,
}

impl StateToken {
    pub fn new<T: Any + Send>(kind: &'static str, state: T) -> Self {
        Self {
            kind,
            state: Box::new(state),
        }
    }

    pub fn get<T: Any>(&self, expected: &'static str) -> Result<&T, EnvError> {
        self.state.downcast_ref::<T>().ok_or(EnvError::WrongToken {
            expected,
            found: self.kind,
        })
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
    fn legal_actions(&self) -> Result<LegalActions, EnvError>;
    fn observation(&self) -> Vec<f64>;
    fn to_play(&self) -> usize;
    fn is_done(&self) -> bool;
    fn steps(&self) -> usize;
    fn clone_state(&self) -> StateToken;
    fn restore_state(&mut self, token: &StateToken) -> Result<(), EnvError>;
    fn boxed_clone(&self) -> Box<dyn Environment>;
    fn render(&self) -> String;

    fn as_kinrow(&self) -> Option<&KInRow> {
        None
    }

    /// Applies the deterministic part of a move, leaving a chance event
    /// pending. Returns the reward of the move.
    fn step_afterstate(&mut self, _action: &Action) -> Result<f64, EnvError> {
        Err(EnvError::NotStochastic)
    }

    /// Probability of each chance outcome for the pending event.
    fn chance_law(&self) -> Result<Vec<f64>, EnvError> {
        Err(EnvError::NotStochastic)
    }

    /// Resolves the pending event. The result carries the reward of the
    /// whole step, as `step` would report it.
    fn resolve_chance(&mut self, _outcome: usize) -> Result<StepResult, EnvError> {
        Err(EnvError::NotStochastic)
    }
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Environment selection: string id plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum EnvConfig {
    #[serde(rename = "kinrow")]
    KInRow(KInRowConfig),
    GridMaze(GridMazeConfig),
    #[serde(rename = "2048")]
    Game2048(Game2048Config),
    #[serde(rename = "pendulum")]
    PendulumLite(PendulumLiteConfig),
}

impl EnvConfig {
    pub fn tictactoe() -> Self {
        EnvConfig::KInRow(KInRowConfig::tictactoe())
    }

    /// Named presets accepted on the command line.
    pub fn from_shorthand(name: &str) -> Option<Self> {
        Some(match name {
            "kinrow3" | "tictactoe" => Self::tictactoe(),
            "gomoku6" => EnvConfig::KInRow(KInRowConfig {
                height: 6,
                width: 6,
                k: 4,
                gravity: false,
            }),
            "connect4" => EnvConfig::KInRow(KInRowConfig {
                height: 6,
                width: 7,
                k: 4,
                gravity: true,
            }),
            "gridmaze" => EnvConfig::GridMaze(GridMazeConfig::default()),
            "2048" => EnvConfig::Game2048(Game2048Config::default()),
            "pendulum" => EnvConfig::PendulumLite(PendulumLiteConfig::default()),
            _ => return None,
        })
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self {
            EnvConfig::KInRow(c) => Box::new(KInRow::new(c.clone())?),
            EnvConfig::GridMaze(c) => Box::new(GridMaze::new(c.clone())?),
            EnvConfig::Game2048(c) => Box::new(Game2048::new(c.clone())?),
            EnvConfig::PendulumLite(c) => Box::new(PendulumLite::new(c.clone())?),
        })
    }
}
