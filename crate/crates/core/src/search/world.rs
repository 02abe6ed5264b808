//! Where search gets its transitions from: a learned model or a cloned
//! environment used as a perfect simulator.

use serde::{Deserialize, Serialize};

use crate::action::{Action, PolicyKind};
use crate::envs::{Environment, LegalActions};
use crate::model::{one_hot, MuZeroModel};

use super::SearchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    LearnedModel,
    PerfectSimulator,
}

/// Result of expanding one node.
#[derive(Clone, Debug)]
pub struct Expansion<S> {
    pub state: S,
    /// Reward on the incoming edge, to the player who moved.
    pub reward: f64,
    /// Value from the perspective of `to_play`. `None` asks the search to
    /// keep descending (a chance node whose value the world cannot estimate).
    pub value: Option<f64>,
    pub to_play: usize,
    pub terminal: bool,
    /// Policy head output for decision nodes.
    pub logits: Vec<f64>,
    /// Legal-action mask for decision nodes; `None` means unrestricted.
    pub legal: Option<Vec<bool>>,
    /// Outcome distribution; `Some` marks a chance node.
    pub chance_probs: Option<Vec<f64>>,
}

pub trait World {
    type State: Clone;

    fn kind(&self) -> WorldKind;
    fn policy(&self) -> PolicyKind;
    fn root(&mut self) -> Result<Expansion<Self::State>, SearchError>;
    fn transition(&mut self, state: &Self::State, to_play: usize, action: &Action)
        -> Result<Expansion<Self::State>, SearchError>;
    /// Deterministic half of a stochastic step, producing a chance node.
    fn afterstate(&mut self, state: &Self::State, to_play: usize, action: &Action)
        -> Result<Expansion<Self::State>, SearchError>;
    fn chance_transition(&mut self, state: &Self::State, to_play: usize, outcome: usize)
        -> Result<Expansion<Self::State>, SearchError>;
}

/// Policy and value for an observation, used by the perfect simulator.
pub trait Evaluator {
    fn policy(&self) -> PolicyKind;
    fn evaluate(&self, obs: &[f64]) -> Result<(Vec<f64>, f64), SearchError>;
}

impl Evaluator for MuZeroModel {
    fn policy(&self) -> PolicyKind {
        self.shape().policy
    }

    fn evaluate(&self, obs: &[f64]) -> Result<(Vec<f64>, f64), SearchError> {
        let out = self.initial_inference(obs)?;
        Ok((out.policy_logits, out.value))
    }
}

/// Flat logits and zero value.
#[derive(Clone, Copy, Debug)]
pub struct UniformEvaluator {
    pub policy: PolicyKind,
}

impl Evaluator for UniformEvaluator {
    fn policy(&self) -> PolicyKind {
        self.policy
    }

    fn evaluate(&self, _obs: &[f64]) -> Result<(Vec<f64>, f64), SearchError> {
        Ok((vec![0.0; self.policy.logits_dim()], 0.0))
    }
}

fn next_player(to_play: usize, two_player: bool) -> usize {
    if two_player {
        1 - to_play
    } else {
        to_play
    }
}

/// Search inside the learned model. Legality is only known at the root.
pub struct LearnedWorld<'a> {
    pub model: &'a MuZeroModel,
    pub observation: Vec<f64>,
    pub legal: Option<Vec<bool>>,
    pub to_play: usize,
    pub two_player: bool,
}

impl World for LearnedWorld<'_> {
    type State = Vec<f64>;

    fn kind(&self) -> WorldKind {
        WorldKind::LearnedModel
    }

    fn policy(&self) -> PolicyKind {
        self.model.shape().policy
    }

    fn root(&mut self) -> Result<Expansion<Vec<f64>>, SearchError> {
        let out = self.model.initial_inference(&self.observation)?;
        Ok(Expansion {
            state: out.latent,
            reward: 0.0,
            value: Some(out.value),
            to_play: self.to_play,
            terminal: false,
            logits: out.policy_logits,
            legal: self.legal.clone(),
            chance_probs: None,
        })
    }

    fn transition(&mut self, state: &Vec<f64>, to_play: usize, action: &Action) -> Result<Expansion<Vec<f64>>, SearchError> {
        let out = self.model.recurrent_inference(state, action)?;
        Ok(Expansion {
            state: out.latent,
            reward: out.reward,
            value: Some(out.value),
            to_play: next_player(to_play, self.two_player),
            terminal: false,
            logits: out.policy_logits,
            legal: None,
            chance_probs: None,
        })
    }

    fn afterstate(&mut self, state: &Vec<f64>, to_play: usize, action: &Action) -> Result<Expansion<Vec<f64>>, SearchError> {
        let out = self.model.afterstate_inference(state, action)?;
        let probs = crate::diffnet::softmax(&out.chance_logits, 1.0)?;
        Ok(Expansion {
            state: out.afterstate,
            reward: 0.0,
            value: Some(out.value),
            to_play,
            terminal: false,
            logits: Vec::new(),
            legal: None,
            chance_probs: Some(probs),
        })
    }

    fn chance_transition(&mut self, state: &Vec<f64>, to_play: usize, outcome: usize) -> Result<Expansion<Vec<f64>>, SearchError> {
        let dim = self.model.shape().chance_dim.unwrap_or(0);
        if outcome >= dim {
            return Err(SearchError::InvalidOutcome(outcome));
        }
        let out = self.model.chance_recurrent_inference(state, &one_hot(outcome, dim))?;
        Ok(Expansion {
            state: out.latent,
            reward: out.reward,
            value: Some(out.value),
            to_play: next_player(to_play, self.two_player),
            terminal: false,
            logits: out.policy_logits,
            legal: None,
            chance_probs: None,
        })
    }
}

/// Search by stepping clones of the real environment.
pub struct SimulatorWorld<'a, E: Evaluator + ?Sized> {
    pub env: Box<dyn Environment>,
    pub evaluator: &'a E,
}

impl<'a, E: Evaluator + ?Sized> SimulatorWorld<'a, E> {
    pub fn new(env: &dyn Environment, evaluator: &'a E) -> Self {
        Self {
            env: env.boxed_clone(),
            evaluator,
        }
    }

    fn decision(&self, env: Box<dyn Environment>, reward: f64) -> Result<Expansion<Box<dyn Environment>>, SearchError> {
        let to_play = env.to_play();
        if env.is_done() {
            return Ok(Expansion {
                state: env,
                reward,
                value: Some(0.0),
                to_play,
                terminal: true,
                logits: Vec::new(),
                legal: None,
                chance_probs: None,
            });
        }
        let (logits, value) = self.evaluator.evaluate(&env.observation())?;
        let legal = match env.legal_actions()? {
            LegalActions::Mask(m) => Some(m),
            LegalActions::Continuous { .. } => None,
        };
        Ok(Expansion {
            state: env,
            reward,
            value: Some(value),
            to_play,
            terminal: false,
            logits,
            legal,
            chance_probs: None,
        })
    }
}

impl<E: Evaluator + ?Sized> World for SimulatorWorld<'_, E> {
    type State = Box<dyn Environment>;

    fn kind(&self) -> WorldKind {
        WorldKind::PerfectSimulator
    }

    fn policy(&self) -> PolicyKind {
        self.evaluator.policy()
    }

    fn root(&mut self) -> Result<Expansion<Self::State>, SearchError> {
        self.decision(self.env.boxed_clone(), 0.0)
    }

    fn transition(&mut self, state: &Self::State, _to_play: usize, action: &Action) -> Result<Expansion<Self::State>, SearchError> {
        let mut env = state.boxed_clone();
        let step = env.step(&self.policy().to_env_action(action)?)?;
        self.decision(env, step.reward)
    }

    fn afterstate(&mut self, state: &Self::State, to_play: usize, action: &Action) -> Result<Expansion<Self::State>, SearchError> {
        let mut env = state.boxed_clone();
        env.step_afterstate(&self.policy().to_env_action(action)?)?;
        let probs = env.chance_law()?;
        Ok(Expansion {
            state: env,
            reward: 0.0,
            value: None,
            to_play,
            terminal: false,
            logits: Vec::new(),
            legal: None,
            chance_probs: Some(probs),
        })
    }

    fn chance_transition(&mut self, state: &Self::State, _to_play: usize, outcome: usize) -> Result<Expansion<Self::State>, SearchError> {
        let mut env = state.boxed_clone();
        let step = env.resolve_chance(outcome)?;
        self.decision(env, step.reward)
    }
}
