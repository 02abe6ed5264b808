//! Actions and the agent-side policy parameterisations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Index into a discrete action set, or a joint bin index for factored
    /// continuous control.
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("action {action:?} cannot be encoded for policy {policy:?}")]
    Unencodable { action: Action, policy: PolicyKind },
}

/// How the prediction network parameterises the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    /// One logit per discrete action.
    Categorical { n: usize },
    /// Independent categorical over `bins` per continuous dimension.
    Factored { dims: usize, bins: usize },
    /// Diagonal Gaussian: means followed by log standard deviations.
    Gaussian { dims: usize },
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

impl PolicyKind {
    pub fn logits_dim(&self) -> usize {
        match *self {
            PolicyKind::Categorical { n } => n,
            PolicyKind::Factored { dims, bins } => dims * bins,
            PolicyKind::Gaussian { dims } => 2 * dims,
        }
    }

    /// Width of the action encoding appended to the latent in the dynamics input.
    pub fn encoding_dim(&self) -> usize {
        match *self {
            PolicyKind::Categorical { n } => n,
            PolicyKind::Factored { dims, .. } | PolicyKind::Gaussian { dims } => dims,
        }
    }

    /// Number of joint discrete actions, `None` for Gaussian policies.
    pub fn joint_actions(&self) -> Option<usize> {
        match *self {
            PolicyKind::Categorical { n } => Some(n),
            PolicyKind::Factored { dims, bins } => Some(bins.pow(dims as u32)),
            PolicyKind::Gaussian { .. } => None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, PolicyKind::Categorical { .. })
    }

    /// Per-dimension bin indices of a factored joint index; dimension 0 is
    /// the least significant digit.
    pub fn joint_to_bins(&self, joint: usize) -> Vec<usize> {
        match *self {
            PolicyKind::Factored { dims, bins } => {
                let mut rest = joint;
                (0..dims)
                    .map(|_| {
                        let b = rest % bins;
                        rest /= bins;
                        b
                    })
                    .collect()
            }
            _ => vec![joint],
        }
    }

    pub fn bins_to_joint(&self, per_dim: &[usize]) -> usize {
        match *self {
            PolicyKind::Factored { bins, .. } => per_dim.iter().rev().fold(0, |acc, b| acc * bins + b),
            _ => per_dim[0],
        }
    }

    /// The action the environment receives.
    pub fn to_env_action(&self, action: &Action) -> Result<Action, ActionError> {
        match (*self, action) {
            (PolicyKind::Categorical { n }, Action::Discrete(i)) if *i < n => Ok(action.clone()),
            (PolicyKind::Factored { dims, bins }, Action::Discrete(j)) if *j < bins.pow(dims as u32) => {
                Ok(Action::Continuous(
                    self.joint_to_bins(*j).iter().map(|b| bin_center(*b, bins)).collect(),
                ))
            }
            (PolicyKind::Gaussian { dims }, Action::Continuous(v)) if v.len() == dims => {
                Ok(Action::Continuous(v.iter().map(|x| x.clamp(-1.0, 1.0)).collect()))
            }
            _ => Err(self.unencodable(action)),
        }
    }

    /// One-hot for categorical actions, raw components for continuous ones.
    pub fn encode(&self, action: &Action) -> Result<Vec<f64>, ActionError> {
        match (*self, action) {
            (PolicyKind::Categorical { n }, Action::Discrete(i)) if *i < n => {
                let mut v = vec![0.0; n];
                v[*i] = 1.0;
                Ok(v)
            }
            (PolicyKind::Factored { .. }, Action::Discrete(_)) => match self.to_env_action(action)? {
                Action::Continuous(v) => Ok(v),
                Action::Discrete(_) => unreachable!(),
            },
            (PolicyKind::Factored { dims, .. }, Action::Continuous(v))
            | (PolicyKind::Gaussian { dims }, Action::Continuous(v))
                if v.len() == dims && v.iter().all(|x| x.is_finite()) =>
            {
                Ok(v.clone())
            }
            _ => Err(self.unencodable(action)),
        }
    }

    fn unencodable(&self, action: &Action) -> ActionError {
        ActionError::Unencodable {
            action: action.clone(),
            policy: *self,
        }
    }
}

/// Centre of bin `b` of `bins` evenly spaced points on [-1, 1].
pub fn bin_center(b: usize, bins: usize) -> f64 {
    if bins == 1 {
        0.0
    } else {
        -1.0 + 2.0 * b as f64 / (bins - 1) as f64
    }
}
