//! Torque-controlled pendulum with enough torque to lift itself.
//!
//! Angle 0 is upright. With action `a` in [-1, 1] the applied torque is
//! `u = MAX_TORQUE * a` and
//!
//! ```text
//! w' = clip(w + (3g/(2l) sin(th) + 3u/(m l^2)) dt, -MAX_SPEED, MAX_SPEED)
//! th' = th + w' dt
//! reward = -(norm(th)^2 + 0.1 w^2 + 0.001 u^2)
//! ```
//!
//! with g = 10, m = l = 1, dt = 0.05, MAX_SPEED = 8, MAX_TORQUE = 6.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvError, EnvSpec, Environment, LegalActions, StateToken, StepInfo, StepResult};
use crate::action::Action;

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumLiteConfig {
    /// Discretisation offered to factored policies.
    pub bins: usize,
    pub max_steps: usize,
}

impl Default for PendulumLiteConfig {
    fn default() -> Self {
        Self {
            bins: 11,
            max_steps: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PendulumLite {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    done: bool,
    steps: usize,
    max_steps: usize,
}

const KIND: &str = "pendulum";

pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl PendulumLite {
    pub fn new(cfg: PendulumLiteConfig) -> Result<Self, EnvError> {
        if cfg.bins < 2 {
            return Err(EnvError::InvalidConfig("pendulum needs at least 2 bins".into()));
        }
        let spec = EnvSpec {
            name: "pendulum_lite".into(),
            obs_dim: 3,
            action_space: ActionSpace::Continuous {
                dim: 1,
                bins_per_dim: cfg.bins,
            },
            num_players: 1,
            max_steps: cfg.max_steps,
            chance_dim: None,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            theta: PI,
            omega: 0.0,
            done: false,
            steps: 0,
            max_steps: cfg.max_steps,
        })
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.omega)
    }

    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = theta;
        self.omega = omega;
    }

    /// Kinetic plus potential energy relative to hanging at rest.
    pub fn energy(&self) -> f64 {
        0.5 * MASS * LENGTH * LENGTH / 3.0 * self.omega * self.omega
            + MASS * GRAVITY * LENGTH / 2.0 * (1.0 + self.theta.cos())
    }

    fn encode(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }
}

impl Environment for PendulumLite {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI..PI);
        self.omega = rng.random_range(-1.0..1.0);
        self.done = false;
        self.steps = 0;
        self.encode()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        let a = match action {
            Action::Continuous(v) if v.len() == 1 && v[0].is_finite() => v[0].clamp(-1.0, 1.0),
            _ => return Err(EnvError::IllegalAction(action.clone())),
        };
        let u = MAX_TORQUE * a;
        let th = angle_normalize(self.theta);
        let cost = th * th + 0.1 * self.omega * self.omega + 0.001 * u * u;
        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.omega = (self.omega + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta = angle_normalize(self.theta + self.omega * DT);
        self.steps += 1;
        self.done = self.steps >= self.max_steps;
        Ok(StepResult {
            obs: self.encode(),
            reward: -cost,
            done: self.done,
            info: StepInfo::default(),
        })
    }

    fn legal_actions(&self) -> Result<LegalActions, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        Ok(LegalActions::Continuous { dim: 1 })
    }

    fn observation(&self) -> Vec<f64> {
        self.encode()
    }

    fn to_play(&self) -> usize {
        0
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn clone_state(&self) -> StateToken {
        StateToken::new(KIND, self.clone())
    }

    fn restore_state(&mut self, token: &StateToken) -> Result<(), EnvError> {
        *self = token.get::<PendulumLite>(KIND)?.clone();
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn render(&self) -> String {
        format!("theta={:+.3} omega={:+.3}\n", self.theta, self.omega)
    }
}
