use rand::Rng;

use super::gumbel;
use super::noise::{add_dirichlet_noise, chance_node_select};
use super::sampled::expand_priors;
use super::tree::{first_argmax, Edge, EdgeLabel, Node, NodeKind, Tree};
use super::world::{Expansion, World};
use super::{check_policy, SearchConfig, SearchError, SearchResult, SearchVariant};

/// One search tree bound to a world and a config.
pub struct Search<'w, W: World> {
    pub(crate) world: &'w mut W,
    pub(crate) cfg: SearchConfig,
    pub(crate) explore: bool,
    pub(crate) tree: Tree<W::State>,
}

impl<'w, W: World> Search<'w, W> {
    /// `explore` turns on root noise (Dirichlet, or Gumbel draws).
    pub fn new(world: &'w mut W, cfg: &SearchConfig, explore: bool) -> Result<Self, SearchError> {
        cfg.validate()?;
        check_policy(world.policy(), cfg.variant)?;
        Ok(Self {
            tree: Tree::new(cfg.discount, cfg.two_player),
            world,
            cfg: cfg.clone(),
            explore,
        })
    }

    pub fn tree(&self) -> &Tree<W::State> {
        &self.tree
    }

    fn sample_k(&self) -> Option<usize> {
        (self.cfg.variant == SearchVariant::Sampled).then_some(self.cfg.sampled.k)
    }

    fn make_node<R: Rng + ?Sized>(
        &self,
        parent: Option<usize>,
        exp: Expansion<W::State>,
        rng: &mut R,
    ) -> Result<Node<W::State>, SearchError> {
        let (kind, edges) = match &exp.chance_probs {
            Some(probs) => {
                let edges: Vec<Edge> = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(i, p)| Edge {
                        label: EdgeLabel::Outcome(i),
                        prior: *p,
                        logit: p.ln(),
                        child: None,
                    })
                    .collect();
                if edges.is_empty() {
                    return Err(SearchError::EmptyOutcomes);
                }
                (NodeKind::Chance, edges)
            }
            None if exp.terminal => (NodeKind::Decision, Vec::new()),
            None => (
                NodeKind::Decision,
                expand_priors(self.world.policy(), &exp.logits, exp.legal.as_deref(), self.sample_k(), rng)?,
            ),
        };
        Ok(Node {
            parent,
            kind,
            visit_count: 0,
            value_sum: 0.0,
            reward: exp.reward,
            to_play: exp.to_play,
            terminal: exp.terminal,
            value_estimate: exp.value.unwrap_or(0.0),
            edges,
            state: Some(exp.state),
        })
    }

    /// Expands the root and records its own evaluation as the first visit.
    pub(crate) fn init_root<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), SearchError> {
        let exp = self.world.root()?;
        if exp.chance_probs.is_some() || exp.terminal {
            return Err(SearchError::NoLegalActions);
        }
        let value = exp.value.unwrap_or(0.0);
        let root = self.make_node(None, exp, rng)?;
        if root.edges.is_empty() {
            return Err(SearchError::NoLegalActions);
        }
        self.tree.nodes.clear();
        self.tree.push(root);
        if self.explore && self.cfg.variant != SearchVariant::Gumbel {
            let priors: Vec<f64> = self.tree.nodes[0].edges.iter().map(|e| e.prior).collect();
            let noisy = add_dirichlet_noise(&priors, self.cfg.dirichlet_alpha, self.cfg.noise_weight, rng)?;
            for (e, p) in self.tree.nodes[0].edges.iter_mut().zip(noisy) {
                e.prior = p;
            }
        }
        self.tree.backup(&[0], value);
        Ok(())
    }

    fn select(&self, node: usize) -> Result<usize, SearchError> {
        match self.cfg.variant {
            SearchVariant::Gumbel => Ok(gumbel::interior_select(&self.tree, node, &self.cfg.gumbel)),
            _ => self.tree.puct_select(node, self.cfg.c1, self.cfg.c2),
        }
    }

    /// One select-expand-backup pass. `forced` fixes the root edge.
    pub(crate) fn simulate<R: Rng + ?Sized>(&mut self, forced: Option<usize>, rng: &mut R) -> Result<(), SearchError> {
        let mut path = vec![0];
        let mut node = 0;
        let leaf_value = loop {
            let n = &self.tree.nodes[node];
            if n.terminal {
                break 0.0;
            }
            let edge = match n.kind {
                NodeKind::Decision => match forced {
                    Some(e) if node == 0 => e,
                    _ => self.select(node)?,
                },
                NodeKind::Chance => chance_node_select(n, rng)?,
            };
            if let Some(child) = n.edges[edge].child {
                node = child;
                path.push(child);
                continue;
            }
            let state = n.state.as_ref().ok_or(SearchError::Unexpanded)?;
            let exp = match (&n.edges[edge].label, n.kind) {
                (EdgeLabel::Action(a), NodeKind::Decision) => {
                    if self.cfg.variant == SearchVariant::Stochastic {
                        self.world.afterstate(state, n.to_play, a)?
                    } else {
                        self.world.transition(state, n.to_play, a)?
                    }
                }
                (EdgeLabel::Outcome(o), NodeKind::Chance) => self.world.chance_transition(state, n.to_play, *o)?,
                _ => return Err(SearchError::WrongNodeKind),
            };
            let value = exp.value;
            let child = self.make_node(Some(node), exp, rng)?;
            let id = self.tree.push(child);
            self.tree.nodes[node].edges[edge].child = Some(id);
            path.push(id);
            match value {
                Some(v) => break v,
                None => node = id,
            }
        };
        self.tree.backup(&path, leaf_value);
        Ok(())
    }

    pub(crate) fn simulate_indexed<R: Rng + ?Sized>(
        &mut self,
        index: usize,
        forced: Option<usize>,
        rng: &mut R,
    ) -> Result<(), SearchError> {
        self.simulate(forced, rng).map_err(|e| SearchError::Simulation {
            index,
            source: Box::new(e),
        })
    }

    pub(crate) fn result(&self, selected: usize, improved: Option<Vec<f64>>, simulations: usize) -> SearchResult {
        let root = self.tree.root();
        let visits = self.tree.edge_visits(0);
        let total: u32 = visits.iter().sum();
        let priors: Vec<f64> = root.edges.iter().map(|e| e.prior).collect();
        let dist = if total > 0 {
            visits.iter().map(|n| *n as f64 / total as f64).collect()
        } else {
            priors.clone()
        };
        SearchResult {
            actions: root
                .edges
                .iter()
                .map(|e| match &e.label {
                    EdgeLabel::Action(a) => a.clone(),
                    EdgeLabel::Outcome(_) => unreachable!("root is a decision node"),
                })
                .collect(),
            priors,
            visit_counts: visits,
            improved_policy: improved.unwrap_or_else(|| dist.clone()),
            root_visit_distribution: dist,
            root_value: root.mean_value().unwrap_or(0.0),
            selected,
            simulations,
        }
    }

    /// Runs the configured search and consumes the tree's root statistics.
    pub fn run<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SearchResult, SearchError> {
        self.init_root(rng)?;
        if self.cfg.variant == SearchVariant::Gumbel {
            return gumbel::gumbel_root_search(self, rng);
        }
        for i in 0..self.cfg.num_simulations {
            self.simulate_indexed(i, None, rng)?;
        }
        let visits: Vec<f64> = self.tree.edge_visits(0).iter().map(|n| *n as f64).collect();
        Ok(self.result(first_argmax(&visits), None, self.cfg.num_simulations))
    }
}

pub fn run_search<W: World, R: Rng + ?Sized>(
    world: &mut W,
    cfg: &SearchConfig,
    explore: bool,
    rng: &mut R,
) -> Result<SearchResult, SearchError> {
    Search::new(world, cfg, explore)?.run(rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::action::{Action, PolicyKind};
    use crate::envs::{EnvConfig, Environment, KInRow, KInRowConfig, Stone};
    use crate::model::{ModelConfig, ModelShape, MuZeroModel, ValueHeadKind};
    use crate::search::world::{LearnedWorld, SimulatorWorld, UniformEvaluator};

    fn ttt() -> Box<dyn Environment> {
        let mut env = EnvConfig::tictactoe().build().unwrap();
        env.reset(0);
        env
    }

    fn cfg(sims: usize) -> SearchConfig {
        SearchConfig {
            num_simulations: sims,
            discount: 1.0,
            two_player: true,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn visit_conservation_and_root_count() {
        let env = ttt();
        let eval = UniformEvaluator {
            policy: PolicyKind::Categorical { n: 9 },
        };
        let mut world = SimulatorWorld::new(env.as_ref(), &eval);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut search = Search::new(&mut world, &cfg(64), true).unwrap();
        let r = search.run(&mut rng).unwrap();
        assert_eq!(r.visit_counts.iter().sum::<u32>(), 64);
        assert_eq!(search.tree().root().visit_count, 65);
        assert!((r.root_visit_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_simulation_visits_one_child() {
        let board: Vec<Stone> = "XO.XO.OX."
            .chars()
            .map(|c| match c {
                'X' => Stone::Player(0),
                'O' => Stone::Player(1),
                _ => Stone::Empty,
            })
            .collect();
        let g = KInRow::from_board(KInRowConfig::tictactoe(), &board, 0).unwrap();
        let eval = UniformEvaluator {
            policy: PolicyKind::Categorical { n: 9 },
        };
        let mut world = SimulatorWorld::new(&g, &eval);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_search(&mut world, &cfg(1), false, &mut rng).unwrap();
        assert_eq!(r.actions.len(), 3);
        assert_eq!(r.visit_counts.iter().filter(|n| **n > 0).count(), 1);
        assert!(r.actions.iter().all(|a| matches!(a, Action::Discrete(2 | 5 | 8))));
    }

    #[test]
    fn deterministic_under_seed() {
        let env = ttt();
        let eval = UniformEvaluator {
            policy: PolicyKind::Categorical { n: 9 },
        };
        let run = || {
            let mut world = SimulatorWorld::new(env.as_ref(), &eval);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            run_search(&mut world, &cfg(40), true, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learned_world_search_runs() {
        let shape = ModelShape {
            obs_dim: 27,
            policy: PolicyKind::Categorical { n: 9 },
            value_head: ValueHeadKind::TanhBounded,
            dynamics: true,
            projection: false,
            chance_dim: None,
        };
        let model = MuZeroModel::new(
            shape,
            ModelConfig {
                latent_dim: 8,
                hidden: 16,
                projection_dim: 8,
            },
            1,
        )
        .unwrap();
        let env = ttt();
        let mut world = LearnedWorld {
            model: &model,
            observation: env.observation(),
            legal: env.legal_actions().unwrap().mask().map(<[bool]>::to_vec),
            to_play: 0,
            two_player: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = run_search(&mut world, &cfg(30), true, &mut rng).unwrap();
        assert_eq!(r.visit_counts.iter().sum::<u32>(), 30);
        assert!(r.root_value.abs() <= 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut search = Search::new(&mut world, &cfg(30), false).unwrap();
        search.run(&mut rng).unwrap();
        assert_eq!(search.tree().dump().lines().count(), search.tree().nodes.len() + 1);
    }

    #[test]
    fn gaussian_policy_needs_sampled_variant() {
        let mut env = EnvConfig::from_shorthand("pendulum").unwrap().build().unwrap();
        env.reset(0);
        let eval = UniformEvaluator {
            policy: PolicyKind::Gaussian { dims: 1 },
        };
        let mut world = SimulatorWorld::new(env.as_ref(), &eval);
        assert!(matches!(
            Search::new(&mut world, &SearchConfig::default(), false),
            Err(SearchError::InvalidConfig(_))
        ));
        let sampled = SearchConfig {
            variant: SearchVariant::Sampled,
            num_simulations: 10,
            ..SearchConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_search(&mut world, &sampled, true, &mut rng).unwrap();
        assert!(r.actions.len() <= 20);
        assert!(matches!(r.selected_action(), Action::Continuous(v) if v.len() == 1));
    }

    #[test]
    fn stochastic_simulator_search_on_2048() {
        let mut env = EnvConfig::from_shorthand("2048").unwrap().build().unwrap();
        env.reset(3);
        let eval = UniformEvaluator {
            policy: PolicyKind::Categorical { n: 4 },
        };
        let mut world = SimulatorWorld::new(env.as_ref(), &eval);
        let c = SearchConfig {
            variant: SearchVariant::Stochastic,
            num_simulations: 30,
            ..SearchConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut search = Search::new(&mut world, &c, false).unwrap();
        let r = search.run(&mut rng).unwrap();
        assert_eq!(r.visit_counts.iter().sum::<u32>(), 30);
        let chance_nodes = search.tree().nodes.iter().filter(|n| n.kind == NodeKind::Chance).count();
        assert!(chance_nodes > 0);
        let legal = env.legal_actions().unwrap();
        assert!(r.actions.iter().all(|a| legal.mask().unwrap()[a.index().unwrap()]));
    }
}
