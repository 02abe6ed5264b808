use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EvalOpponent, PipelineError};
use crate::action::Action;
use crate::envs::{Environment, LegalActions, MinimaxSolver};
use crate::explore::{eps_greedy_mix, temperature_at, ExplorationConfig, RndModule};
use crate::model::MuZeroModel;
use crate::replay::{policy_target_from_search, GameSegment};
use crate::search::{
    run_search, sample_action_from_visits, ActionSelection, LearnedWorld, SearchConfig, SearchResult, SearchVariant,
    SimulatorWorld, WorldKind,
};

/// A model plus the world search plans in.
#[derive(Clone, Copy, Debug)]
pub struct Snapshot<'a> {
    pub model: &'a MuZeroModel,
    pub world: WorldKind,
}

/// Searches from the current state of `env`.
pub fn search_world<R: Rng + ?Sized>(
    env: &dyn Environment,
    snap: Snapshot<'_>,
    cfg: &SearchConfig,
    explore: bool,
    rng: &mut R,
) -> Result<SearchResult, PipelineError> {
    Ok(match snap.world {
        WorldKind::LearnedModel => {
            let mut world = LearnedWorld {
                model: snap.model,
                observation: env.observation(),
                legal: env.legal_actions()?.mask().map(<[bool]>::to_vec),
                to_play: env.to_play(),
                two_player: cfg.two_player,
            };
            run_search(&mut world, cfg, explore, rng)?
        }
        WorldKind::PerfectSimulator => {
            let mut world = SimulatorWorld::new(env, snap.model);
            run_search(&mut world, cfg, explore, rng)?
        }
    })
}

/// Policy-space actions eps-greedy may pick from; empty for Gaussian heads.
fn eps_candidates(snap: Snapshot<'_>, legal: &LegalActions) -> Vec<Action> {
    match (legal, snap.model.shape().policy.joint_actions()) {
        (LegalActions::Mask(_), _) => legal.indices().into_iter().map(Action::Discrete).collect(),
        (LegalActions::Continuous { .. }, Some(n)) => (0..n).map(Action::Discrete).collect(),
        (LegalActions::Continuous { .. }, None) => Vec::new(),
    }
}

/// Plays one episode with exploration on. `env_steps` is the run's step
/// count at the start of the episode and drives the temperature schedule.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    snap: Snapshot<'_>,
    search: &SearchConfig,
    exploration: &ExplorationConfig,
    rnd: Option<&RndModule>,
    env_steps: u64,
    reset_seed: u64,
    rng: &mut R,
) -> Result<GameSegment, PipelineError> {
    let policy = snap.model.shape().policy;
    let mut cfg = search.clone();
    cfg.num_simulations *= exploration.simulation_multiplier;
    let mut seg = GameSegment {
        observations: vec![env.reset(reset_seed)],
        to_play: vec![env.to_play()],
        terminal: true,
        ..GameSegment::default()
    };
    while !env.is_done() {
        let legal = env.legal_actions()?;
        let result = search_world(env, snap, &cfg, true, rng)?;
        let pick = match cfg.variant {
            SearchVariant::Gumbel => result.selected,
            // Epsilon-greedy mixes with the most visited action.
            _ if exploration.eps > 0.0 => sample_action_from_visits(&result.visit_counts, ActionSelection::Argmax, rng)?,
            _ => {
                let t = temperature_at(&exploration.temperature, env_steps + seg.len() as u64);
                sample_action_from_visits(&result.visit_counts, ActionSelection::Temperature(t), rng)?
            }
        };
        let mut action = result.actions[pick].clone();
        let candidates = eps_candidates(snap, &legal);
        if exploration.eps > 0.0 && !candidates.is_empty() {
            action = eps_greedy_mix(&action, &candidates, exploration.eps, rng)?;
        }
        let step = env.step(&policy.to_env_action(&action).map_err(crate::model::ModelError::from)?)?;
        seg.actions.push(action);
        seg.rewards_ext.push(step.reward);
        seg.policy_targets
            .push(policy_target_from_search(&result, cfg.variant, policy));
        seg.root_values.push(result.root_value);
        seg.legal.push(legal.mask().map(<[bool]>::to_vec));
        seg.chance_outcomes.push(step.info.chance_outcome);
        seg.observations.push(step.obs);
        seg.to_play.push(env.to_play());
        if step.done {
            seg.winner = step.info.winner;
        }
    }
    let spec = env.spec();
    if !spec.two_player() && env.steps() >= spec.max_steps {
        seg.terminal = false;
        let last = seg.observations.last().expect("reset observation");
        seg.final_value = snap.model.initial_inference(last)?.value;
    }
    seg.rewards_int = match rnd {
        Some(r) if !seg.is_empty() => r.intrinsic_batch(&seg.observations[1..])?,
        _ => vec![0.0; seg.len()],
    };
    seg.validate()?;
    Ok(seg)
}

/// Evaluation returns; win/draw/loss rates are filled for two-player games.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub wins: f64,
    pub draws: f64,
    pub losses: f64,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            returns,
            mean,
            std: var.sqrt(),
            ..Self::default()
        }
    }

    pub fn non_loss(&self) -> f64 {
        self.wins + self.draws
    }
}

fn random_move<R: Rng + ?Sized>(env: &dyn Environment, rng: &mut R) -> Result<Action, PipelineError> {
    Ok(match env.legal_actions()? {
        LegalActions::Mask(m) => {
            let idx: Vec<usize> = (0..m.len()).filter(|i| m[*i]).collect();
            Action::Discrete(*idx.choose(rng).expect("a live game has a legal move"))
        }
        LegalActions::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()),
    })
}

fn opponent_move<R: Rng + ?Sized>(
    env: &dyn Environment,
    opponent: EvalOpponent,
    solver: &mut MinimaxSolver,
    rng: &mut R,
) -> Result<Option<Action>, PipelineError> {
    if opponent == EvalOpponent::Minimax {
        if let Some(game) = env.as_kinrow() {
            if let Ok(res) = solver.solve(game) {
                return Ok(Some(Action::Discrete(*res.optimal_actions.choose(rng).expect("live game"))));
            }
        }
    }
    match opponent {
        EvalOpponent::SelfPlay => Ok(None),
        _ => random_move(env, rng).map(Some),
    }
}

/// Greedy play without noise or eps-greedy. In two-player games the agent
/// alternates seats and `opponent` plays the other one.
pub fn evaluate<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    snap: Snapshot<'_>,
    search: &SearchConfig,
    episodes: usize,
    opponent: EvalOpponent,
    rng: &mut R,
) -> Result<EvalReport, PipelineError> {
    let policy = snap.model.shape().policy;
    let two_player = env.spec().two_player();
    let mut solver = MinimaxSolver::default();
    let mut returns = Vec::with_capacity(episodes);
    let (mut wins, mut draws, mut losses) = (0usize, 0usize, 0usize);
    for ep in 0..episodes {
        env.reset(rng.random());
        let seat = ep % 2;
        let mut total = 0.0;
        let mut winner = None;
        while !env.is_done() {
            let mover = env.to_play();
            let scripted = if two_player && mover != seat {
                opponent_move(env, opponent, &mut solver, rng)?
            } else {
                None
            };
            let action = match scripted {
                Some(a) => a,
                None => {
                    let r = search_world(env, snap, search, false, rng)?;
                    policy
                        .to_env_action(r.selected_action())
                        .map_err(crate::model::ModelError::from)?
                }
            };
            let step = env.step(&action)?;
            if !two_player {
                total += step.reward;
            }
            if step.done {
                winner = step.info.winner;
            }
        }
        if two_player {
            total = match winner {
                Some(w) if w == seat => 1.0,
                Some(_) => -1.0,
                None => 0.0,
            };
            match winner {
                Some(w) if w == seat => wins += 1,
                Some(_) => losses += 1,
                None => draws += 1,
            }
        }
        returns.push(total);
    }
    let mut report = EvalReport::from_returns(returns);
    if two_player && episodes > 0 {
        let n = episodes as f64;
        report.wins = wins as f64 / n;
        report.draws = draws as f64 / n;
        report.losses = losses as f64 / n;
    }
    Ok(report)
}

/// External returns of a uniformly random policy.
pub fn random_policy_returns<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    episodes: usize,
    rng: &mut R,
) -> Result<EvalReport, PipelineError> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(rng.random());
        let mut total = 0.0;
        while !env.is_done() {
            let a = random_move(env, rng)?;
            total += env.step(&a)?.reward;
        }
        returns.push(total);
    }
    Ok(EvalReport::from_returns(returns))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::envs::{EnvConfig, GridMazeConfig};
    use crate::explore::{ExplorationStrategy, RndConfig};
    use crate::model::{ModelConfig, ModelShape, ValueHeadKind};

    fn model_for(env: &dyn Environment, dynamics: bool) -> MuZeroModel {
        let spec = env.spec();
        let shape = ModelShape {
            obs_dim: spec.obs_dim,
            policy: spec.default_policy(),
            value_head: if spec.two_player() {
                ValueHeadKind::TanhBounded
            } else {
                ValueHeadKind::Linear
            },
            dynamics,
            projection: false,
            chance_dim: None,
        };
        let cfg = ModelConfig {
            latent_dim: 8,
            hidden: 16,
            projection_dim: 4,
        };
        MuZeroModel::new(shape, cfg, 3).unwrap()
    }

    fn search(n: usize, two_player: bool) -> SearchConfig {
        SearchConfig {
            num_simulations: n,
            two_player,
            discount: 1.0,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn self_play_segment_is_consistent() {
        let mut env = EnvConfig::tictactoe().build().unwrap();
        let model = model_for(env.as_ref(), false);
        let snap = Snapshot {
            model: &model,
            world: WorldKind::PerfectSimulator,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let explore = ExplorationConfig::default();
        let seg = collect_episode(env.as_mut(), snap, &search(8, true), &explore, None, 0, 0, &mut rng).unwrap();
        assert!(seg.terminal);
        assert!(seg.len() >= 5 && seg.len() <= 9);
        assert!(seg.winner.is_none_or(|w| w < 2));
        for t in 0..seg.len() {
            assert_eq!(seg.to_play[t], t % 2);
            let a = seg.actions[t].index().unwrap();
            assert!(seg.legal[t].as_ref().unwrap()[a]);
        }
        if let Some(w) = seg.winner {
            assert_eq!(seg.to_play[seg.len() - 1], w);
            assert_eq!(*seg.rewards_ext.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn collection_is_deterministic_per_seed() {
        let mut env = EnvConfig::tictactoe().build().unwrap();
        let model = model_for(env.as_ref(), true);
        let snap = Snapshot {
            model: &model,
            world: WorldKind::LearnedModel,
        };
        let explore = ExplorationConfig::preset(ExplorationStrategy::EpsGreedy);
        let run = |env: &mut dyn Environment| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            collect_episode(env, snap, &search(6, true), &explore, None, 0, 4, &mut rng).unwrap()
        };
        assert_eq!(run(env.as_mut()), run(env.as_mut()));
    }

    #[test]
    fn gridmaze_truncates_at_limit_with_intrinsic_rewards() {
        let mut env = EnvConfig::GridMaze(GridMazeConfig {
            max_steps: 12,
            ..GridMazeConfig::default()
        })
        .build()
        .unwrap();
        let model = model_for(env.as_ref(), true);
        let snap = Snapshot {
            model: &model,
            world: WorldKind::LearnedModel,
        };
        let rnd = RndModule::new(
            env.spec().obs_dim,
            &RndConfig::default(),
            crate::diffnet::OptimizerConfig::adam(1e-3),
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = collect_episode(
            env.as_mut(),
            snap,
            &search(4, false),
            &ExplorationConfig::default(),
            Some(&rnd),
            0,
            0,
            &mut rng,
        )
        .unwrap();
        assert!(seg.len() <= 12);
        if seg.len() == 12 && seg.rewards_ext.iter().all(|r| *r == 0.0) {
            assert!(!seg.terminal);
            assert_eq!(seg.final_value, model.initial_inference(seg.observations.last().unwrap()).unwrap().value);
        }
        assert!(seg.rewards_int.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(seg.rewards_int.contains(&1.0));
    }

    #[test]
    fn evaluation_leaves_model_untouched_and_reports_rates() {
        let mut env = EnvConfig::tictactoe().build().unwrap();
        let model = model_for(env.as_ref(), false);
        let before = model.clone();
        let snap = Snapshot {
            model: &model,
            world: WorldKind::PerfectSimulator,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = evaluate(env.as_mut(), snap, &search(30, true), 10, EvalOpponent::Minimax, &mut rng).unwrap();
        assert_eq!(r.returns.len(), 10);
        assert!((r.wins + r.draws + r.losses - 1.0).abs() < 1e-12);
        assert_eq!(r.wins, 0.0, "nobody beats the solver");
        assert_eq!(model, before);
    }

    #[test]
    fn random_baseline_on_pendulum_is_negative() {
        let mut env = EnvConfig::from_shorthand("pendulum").unwrap().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_policy_returns(env.as_mut(), 5, &mut rng).unwrap();
        assert_eq!(r.returns.len(), 5);
        assert!(r.mean < 0.0);
    }

    #[test]
    fn population_std() {
        let r = EvalReport::from_returns(vec![1.0, 3.0]);
        assert_eq!((r.mean, r.std), (2.0, 1.0));
    }
}
