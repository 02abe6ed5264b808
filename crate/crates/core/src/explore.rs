//! Exploration strategies: visit-temperature schedules, epsilon-greedy
//! mixing, the policy-entropy bonus, and random network distillation (RND)
//! intrinsic rewards.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::diffnet::{
    entropy, squared_distance, Activation, DiffnetError, Mlp, MlpSpec, OptimizerConfig, OptimizerState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExploreError {
    #[error("no legal actions to mix over")]
    EmptyLegal,
    #[error("epsilon {0} outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("empty observation batch")]
    EmptyBatch,
    #[error("invalid exploration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] DiffnetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// 1, then 0.5 from half the threshold, then 0.25 from three quarters.
    Decay,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub threshold_steps: u64,
    pub mode: TemperatureMode,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            threshold_steps: 100_000,
            mode: TemperatureMode::Decay,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<(), ExploreError> {
        if self.threshold_steps == 0 {
            return Err(ExploreError::InvalidConfig("threshold_steps must be at least 1".into()));
        }
        if let TemperatureMode::Fixed(t) = self.mode {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ExploreError::InvalidConfig(format!("fixed temperature {t}")));
            }
        }
        Ok(())
    }
}

pub fn temperature_at(schedule: &TemperatureSchedule, train_step: u64) -> f64 {
    match schedule.mode {
        TemperatureMode::Fixed(t) => t,
        TemperatureMode::Decay => {
            let s = train_step as f64;
            let th = schedule.threshold_steps as f64;
            if s < 0.5 * th {
                1.0
            } else if s < 0.75 * th {
                0.5
            } else {
                0.25
            }
        }
    }
}

/// With probability `eps` a uniform legal action, else `search_action`.
pub fn eps_greedy_mix<R: Rng + ?Sized>(
    search_action: &Action,
    legal: &[Action],
    eps: f64,
    rng: &mut R,
) -> Result<Action, ExploreError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(ExploreError::InvalidEpsilon(eps));
    }
    if legal.is_empty() {
        return Err(ExploreError::EmptyLegal);
    }
    if eps > 0.0 && rng.random::<f64>() < eps {
        Ok(legal.choose(rng).expect("non-empty").clone())
    } else {
        Ok(search_action.clone())
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn policy_entropy(probs: &[f64]) -> f64 {
    entropy(probs)
}

/// `r_ext + beta * r_int`.
pub fn combine_reward(r_ext: f64, r_int: f64, beta: f64) -> f64 {
    r_ext + beta * r_int
}

/// Min-max normalised errors; all zeros when the errors are equal.
pub fn min_max_normalize(errors: &[f64]) -> Vec<f64> {
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; errors.len()];
    }
    errors.iter().map(|e| ((e - min) / (max - min)).clamp(0.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    pub output_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub beta: f64,
}

impl Default for RndConfig {
    fn default() -> Self {
        Self {
            output_dim: 32,
            hidden: 64,
            lr: 1e-3,
            beta: 1.0 / 300.0,
        }
    }
}

/// Fixed random target network and a trained predictor of its output, both
/// reading raw observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RndModule {
    target: Mlp,
    predictor: Mlp,
    pub beta: f64,
    optimizer: OptimizerState,
}

impl RndModule {
    /// `optimizer` supplies the kind; its learning rate is replaced by
    /// `cfg.lr`.
    pub fn new(obs_dim: usize, cfg: &RndConfig, optimizer: OptimizerConfig, seed: u64) -> Result<Self, ExploreError> {
        if cfg.output_dim == 0 || cfg.hidden == 0 || !(cfg.beta >= 0.0) {
            return Err(ExploreError::InvalidConfig("rnd dims must be positive and beta non-negative".into()));
        }
        let spec = MlpSpec::dense(&[obs_dim, cfg.hidden, cfg.output_dim], Activation::Relu, Activation::Identity)?;
        let target = Mlp::init(spec.clone(), seed.wrapping_mul(2).wrapping_add(0x5EED))?;
        let predictor = Mlp::init(spec, seed.wrapping_mul(2).wrapping_add(0x5EEE))?;
        let optimizer = OptimizerState::new(OptimizerConfig { lr: cfg.lr, ..optimizer }, predictor.params().len());
        Ok(Self {
            target,
            predictor,
            beta: cfg.beta,
            optimizer,
        })
    }

    /// Replaces the predictor with a copy of the target.
    pub fn with_predictor_as_target(mut self) -> Self {
        self.predictor = self.target.clone();
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.target.input_dim()
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    /// Hash of the target parameters' bit patterns.
    pub fn target_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in self.target.params().as_slice() {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// `||g_hat(obs) - g(obs)||^2`.
    pub fn error(&self, obs: &[f64]) -> Result<f64, ExploreError> {
        let g = self.target.predict(obs)?;
        let p = self.predictor.predict(obs)?;
        Ok(squared_distance(&p, &g)?)
    }

    /// Intrinsic rewards in `[0, 1]`, min-max normalised over the batch.
    pub fn intrinsic_batch(&self, observations: &[Vec<f64>]) -> Result<Vec<f64>, ExploreError> {
        if observations.is_empty() {
            return Err(ExploreError::EmptyBatch);
        }
        let errors = observations.iter().map(|o| self.error(o)).collect::<Result<Vec<_>, _>>()?;
        Ok(min_max_normalize(&errors))
    }

    /// One optimiser step on the mean error; returns the mean error before
    /// the step.
    pub fn train_step(&mut self, observations: &[Vec<f64>]) -> Result<f64, ExploreError> {
        if observations.is_empty() {
            return Err(ExploreError::EmptyBatch);
        }
        let n = observations.len() as f64;
        let mut grads = self.predictor.params().zeros_like();
        let mut loss = 0.0;
        for obs in observations {
            let g = self.target.predict(obs)?;
            let (p, cache) = self.predictor.forward(obs)?;
            loss += squared_distance(&p, &g)? / n;
            let out_grad: Vec<f64> = p.iter().zip(&g).map(|(a, b)| 2.0 * (a - b) / n).collect();
            self.predictor.backward_into(&cache, &out_grad, &mut grads)?;
        }
        self.optimizer
            .apply(&mut [self.predictor.params_mut().as_mut_slice()], &[grads.as_slice()])?;
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationStrategy {
    Naive,
    DoubleSim,
    FixedTemperature,
    EntropyReg,
    EpsGreedy,
    Intrinsic,
}

impl ExplorationStrategy {
    pub const ALL: [ExplorationStrategy; 6] = [
        ExplorationStrategy::Naive,
        ExplorationStrategy::DoubleSim,
        ExplorationStrategy::FixedTemperature,
        ExplorationStrategy::EntropyReg,
        ExplorationStrategy::EpsGreedy,
        ExplorationStrategy::Intrinsic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExplorationStrategy::Naive => "naive",
            ExplorationStrategy::DoubleSim => "double_sim",
            ExplorationStrategy::FixedTemperature => "fixed_temperature",
            ExplorationStrategy::EntropyReg => "entropy_reg",
            ExplorationStrategy::EpsGreedy => "eps_greedy",
            ExplorationStrategy::Intrinsic => "intrinsic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Composable exploration flags. The named strategies are presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub temperature: TemperatureSchedule,
    pub eps: f64,
    pub entropy_weight: f64,
    /// Multiplies the search budget during collection.
    pub simulation_multiplier: usize,
    pub intrinsic: Option<RndConfig>,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            temperature: TemperatureSchedule::default(),
            eps: 0.0,
            entropy_weight: 0.0,
            simulation_multiplier: 1,
            intrinsic: None,
        }
    }
}

impl ExplorationConfig {
    pub fn preset(strategy: ExplorationStrategy) -> Self {
        let base = Self::default();
        match strategy {
            ExplorationStrategy::Naive => base,
            ExplorationStrategy::DoubleSim => Self {
                simulation_multiplier: 2,
                ..base
            },
            ExplorationStrategy::FixedTemperature => Self {
                temperature: TemperatureSchedule {
                    mode: TemperatureMode::Fixed(1.0),
                    ..base.temperature
                },
                ..base
            },
            ExplorationStrategy::EntropyReg => Self {
                entropy_weight: 0.05,
                ..base
            },
            ExplorationStrategy::EpsGreedy => Self { eps: 0.25, ..base },
            ExplorationStrategy::Intrinsic => Self {
                intrinsic: Some(RndConfig::default()),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), ExploreError> {
        self.temperature.validate()?;
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(ExploreError::InvalidEpsilon(self.eps));
        }
        if !(self.entropy_weight >= 0.0) || self.simulation_multiplier == 0 {
            return Err(ExploreError::InvalidConfig(
                "entropy_weight must be non-negative and simulation_multiplier positive".into(),
            ));
        }
        Ok(())
    }

    /// Weight of stored intrinsic rewards in training rewards.
    /// Presets of several strategies laid over one another.
    pub fn compose(strategies: &[ExplorationStrategy]) -> Self {
        let base = Self::default();
        let mut out = base.clone();
        for s in strategies {
            let p = Self::preset(*s);
            if p.temperature != base.temperature {
                out.temperature = p.temperature;
            }
            out.eps = out.eps.max(p.eps);
            out.entropy_weight = out.entropy_weight.max(p.entropy_weight);
            out.simulation_multiplier = out.simulation_multiplier.max(p.simulation_multiplier);
            if p.intrinsic.is_some() {
                out.intrinsic = p.intrinsic;
            }
        }
        out
    }

    pub fn intrinsic_beta(&self) -> f64 {
        self.intrinsic.as_ref().map_or(0.0, |r| r.beta)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn compose_overlays_presets() {
        assert_eq!(ExplorationConfig::compose(&[]), ExplorationConfig::default());
        let c = ExplorationConfig::compose(&[ExplorationStrategy::DoubleSim, ExplorationStrategy::EpsGreedy]);
        assert_eq!(c.simulation_multiplier, 2);
        assert_eq!(c.eps, 0.25);
        assert!(c.intrinsic.is_none());
        for s in ExplorationStrategy::ALL {
            assert_eq!(ExplorationConfig::compose(&[s]), ExplorationConfig::preset(s));
        }
    }

    #[test]
    fn temperature_decay_points() {
        let s = TemperatureSchedule {
            threshold_steps: 100_000,
            mode: TemperatureMode::Decay,
        };
        assert_eq!(temperature_at(&s, 0), 1.0);
        assert_eq!(temperature_at(&s, 40_000), 1.0);
        assert_eq!(temperature_at(&s, 50_000), 0.5);
        assert_eq!(temperature_at(&s, 60_000), 0.5);
        assert_eq!(temperature_at(&s, 75_000), 0.25);
        assert_eq!(temperature_at(&s, 80_000), 0.25);
        let f = TemperatureSchedule {
            mode: TemperatureMode::Fixed(1.0),
            ..s
        };
        assert!([0, 60_000, 10_000_000].iter().all(|t| temperature_at(&f, *t) == 1.0));
        assert!(TemperatureSchedule { threshold_steps: 0, ..s }.validate().is_err());
    }

    proptest! {
        #[test]
        fn decay_is_non_increasing(th in 1u64..1_000_000, a in 0u64..2_000_000, b in 0u64..2_000_000) {
            let s = TemperatureSchedule { threshold_steps: th, mode: TemperatureMode::Decay };
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(temperature_at(&s, hi) <= temperature_at(&s, lo));
        }

        #[test]
        fn normalized_errors_are_bounded(errors in proptest::collection::vec(0.0f64..100.0, 1..50)) {
            let r = min_max_normalize(&errors);
            prop_assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(r.iter().sum::<f64>() <= errors.len() as f64);
        }
    }

    #[test]
    fn eps_greedy_cases() {
        let legal: Vec<Action> = (0..4).map(Action::Discrete).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let best = Action::Discrete(2);
        assert!((0..1000).all(|_| eps_greedy_mix(&best, &legal, 0.0, &mut rng).unwrap() == best));
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[eps_greedy_mix(&best, &legal, 1.0, &mut rng).unwrap().index().unwrap()] += 1;
        }
        assert!(counts.iter().all(|c| (*c as f64 / n as f64 - 0.25).abs() <= 0.02), "{counts:?}");
        assert_eq!(eps_greedy_mix(&best, &[], 0.5, &mut rng), Err(ExploreError::EmptyLegal));
        assert!(eps_greedy_mix(&best, &legal, 1.5, &mut rng).is_err());
        assert_eq!(ExplorationConfig::preset(ExplorationStrategy::EpsGreedy).eps, 0.25);
    }

    #[test]
    fn reward_combination() {
        assert!((combine_reward(1.0, 0.5, 1.0 / 300.0) - 1.001_666_666_666_666_7).abs() < 1e-15);
        assert_eq!(combine_reward(0.7, 0.9, 0.0), 0.7);
        let total: f64 = (0..300).map(|_| combine_reward(0.0, 1.0, 1.0 / 300.0)).sum();
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn entropy_cases() {
        assert!((policy_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(policy_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert_eq!(ExplorationConfig::default().entropy_weight, 0.0);
    }

    #[test]
    fn min_max_cases() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[3.0]), vec![0.0]);
        assert_eq!(min_max_normalize(&[1.0, 1.0]), vec![0.0, 0.0]);
    }

    fn rnd(seed: u64) -> RndModule {
        RndModule::new(4, &RndConfig::default(), OptimizerConfig::adam(3e-3), seed).unwrap()
    }

    #[test]
    fn copied_predictor_has_zero_error() {
        let m = rnd(0).with_predictor_as_target();
        assert_eq!(m.error(&[0.1, -0.2, 0.3, 0.9]).unwrap(), 0.0);
        assert!(rnd(0).error(&[0.1, -0.2, 0.3, 0.9]).unwrap() > 0.0);
        assert!(rnd(0).error(&[0.1]).is_err());
    }

    #[test]
    fn training_leaves_target_untouched_and_fits() {
        let mut m = rnd(1);
        let before = m.target_fingerprint();
        let target = m.target().clone();
        let obs = vec![vec![0.5, -0.3, 0.8, 0.1]];
        let e0 = m.error(&obs[0]).unwrap();
        for _ in 0..200 {
            assert!(m.train_step(&obs).unwrap() >= 0.0);
        }
        assert_eq!(m.target_fingerprint(), before);
        assert_eq!(m.target(), &target);
        assert!(m.error(&obs[0]).unwrap() <= 0.5 * e0);
    }

    #[test]
    fn fixed_batch_loss_strictly_decreases() {
        let mut m = rnd(2);
        let batch: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 8.0, 0.2, -0.4, (i % 3) as f64]).collect();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = m.train_step(&batch).unwrap();
            assert!(loss < prev, "{loss} >= {prev}");
            prev = loss;
        }
    }

    #[test]
    fn intrinsic_batch_bounds() {
        let m = rnd(3);
        let obs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0, 0.0, -1.0]).collect();
        let r = m.intrinsic_batch(&obs).unwrap();
        assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(r.contains(&0.0) && r.contains(&1.0));
        assert_eq!(m.intrinsic_batch(&obs[..1]).unwrap(), vec![0.0]);
        assert!(m.intrinsic_batch(&[]).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in ExplorationStrategy::ALL {
            assert_eq!(ExplorationStrategy::from_name(s.name()), Some(s));
            ExplorationConfig::preset(s).validate().unwrap();
        }
        assert_eq!(ExplorationConfig::preset(ExplorationStrategy::DoubleSim).simulation_multiplier, 2);
        assert_eq!(ExplorationConfig::preset(ExplorationStrategy::Naive), ExplorationConfig::default());
    }
}
