//! 2048 with an explicit chance step.
//!
//! A move first produces a deterministic afterstate (slide and merge); a tile
//! then spawns on a uniformly chosen empty cell with a value drawn from the
//! tile law. The chance outcome index is `cell * num_chances + tile_choice`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvError, EnvSpec, Environment, LegalActions, StateToken, StepInfo, StepResult};
use crate::action::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Game2048Config {
    pub size: usize,
    /// 2 spawns tiles {2, 4}; 5 spawns {2, 4, 8, 16, 32}.
    pub num_chances: usize,
    /// Reward `log2(1 + merge score)` instead of the raw merge score.
    pub log_reward: bool,
    pub max_steps: usize,
}

impl Default for Game2048Config {
    fn default() -> Self {
        Self {
            size: 4,
            num_chances: 2,
            log_reward: false,
            max_steps: 1000,
        }
    }
}

/// Spawn probabilities per tile exponent (1 => 2, 2 => 4, ...).
pub fn tile_law(num_chances: usize) -> Option<&'static [f64]> {
    match num_chances {
        2 => Some(&[0.9, 0.1]),
        5 => Some(&[0.45, 0.25, 0.15, 0.1, 0.05]),
        _ => None,
    }
}

pub const MAX_EXPONENT: usize = 15;

#[derive(Clone, Debug)]
pub struct Game2048 {
    cfg: Game2048Config,
    spec: EnvSpec,
    law: &'static [f64],
    board: Vec<u8>,
    rng: ChaCha8Rng,
    pending_reward: Option<f64>,
    done: bool,
    steps: usize,
    score: f64,
}

const KIND: &str = "2048";

impl Game2048 {
    pub fn new(cfg: Game2048Config) -> Result<Self, EnvError> {
        let law = tile_law(cfg.num_chances)
            .ok_or_else(|| EnvError::InvalidConfig(format!("num_chances must be 2 or 5, got {}", cfg.num_chances)))?;
        if cfg.size < 2 || cfg.max_steps == 0 {
            return Err(EnvError::InvalidConfig(format!("bad 2048 config {cfg:?}")));
        }
        let cells = cfg.size * cfg.size;
        let spec = EnvSpec {
            name: format!("2048_{}x{}_c{}", cfg.size, cfg.size, cfg.num_chances),
            obs_dim: (MAX_EXPONENT + 1) * cells,
            action_space: ActionSpace::Discrete { n: 4 },
            num_players: 1,
            max_steps: cfg.max_steps,
            chance_dim: Some(cells * cfg.num_chances),
        };
        spec.validate()?;
        Ok(Self {
            law,
            board: vec![0; cells],
            rng: ChaCha8Rng::seed_from_u64(0),
            pending_reward: None,
            done: false,
            steps: 0,
            score: 0.0,
            cfg,
            spec,
        })
    }

    /// Tile exponents, row-major; 0 marks an empty cell.
    pub fn board(&self) -> &[u8] {
        &self.board
    }

    pub fn set_board(&mut self, board: &[u8]) -> Result<(), EnvError> {
        if board.len() != self.board.len() {
            return Err(EnvError::InvalidConfig("board size mismatch".into()));
        }
        self.board = board.to_vec();
        self.pending_reward = None;
        self.done = !(0..4).any(|a| self.slid(a).0 != self.board);
        Ok(())
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn num_chances(&self) -> usize {
        self.cfg.num_chances
    }

    fn line(&self, dir: usize, i: usize) -> Vec<usize> {
        let n = self.cfg.size;
        // Cells of line `i` ordered from the edge tiles slide towards.
        (0..n)
            .map(|j| match dir {
                0 => j * n + i,
                1 => i * n + (n - 1 - j),
                2 => (n - 1 - j) * n + i,
                _ => i * n + j,
            })
            .collect()
    }

    /// Board after sliding in `dir` plus the merge score.
    fn slid(&self, dir: usize) -> (Vec<u8>, f64) {
        let mut out = self.board.clone();
        let mut score = 0.0;
        for i in 0..self.cfg.size {
            let cells = self.line(dir, i);
            let tiles: Vec<u8> = cells.iter().map(|c| self.board[*c]).filter(|t| *t > 0).collect();
            let mut merged = Vec::with_capacity(tiles.len());
            let mut k = 0;
            while k < tiles.len() {
                if k + 1 < tiles.len() && tiles[k] == tiles[k + 1] {
                    let e = tiles[k] + 1;
                    score += f64::from(1u32 << e);
                    merged.push(e);
                    k += 2;
                } else {
                    merged.push(tiles[k]);
                    k += 1;
                }
            }
            for (j, c) in cells.iter().enumerate() {
                out[*c] = merged.get(j).copied().unwrap_or(0);
            }
        }
        (out, score)
    }

    fn empty_cells(&self) -> Vec<usize> {
        (0..self.board.len()).filter(|c| self.board[*c] == 0).collect()
    }

    fn sample_outcome(&mut self) -> usize {
        let law = self.law;
        let empties = self.empty_cells();
        let cell = empties[self.rng.random_range(0..empties.len())];
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut tile = law.len() - 1;
        for (i, p) in law.iter().enumerate() {
            acc += p;
            if u < acc {
                tile = i;
                break;
            }
        }
        cell * self.cfg.num_chances + tile
    }

    fn spawn(&mut self, outcome: usize) -> Result<(), EnvError> {
        let cell = outcome / self.cfg.num_chances;
        let tile = outcome % self.cfg.num_chances;
        if cell >= self.board.len() || self.board[cell] != 0 {
            return Err(EnvError::ImpossibleOutcome(outcome));
        }
        self.board[cell] = (tile + 1) as u8;
        Ok(())
    }

    fn encode(&self) -> Vec<f64> {
        let cells = self.board.len();
        let mut obs = vec![0.0; (MAX_EXPONENT + 1) * cells];
        for (i, e) in self.board.iter().enumerate() {
            obs[(*e as usize).min(MAX_EXPONENT) * cells + i] = 1.0;
        }
        obs
    }

    fn shape_reward(&self, score: f64) -> f64 {
        if self.cfg.log_reward {
            (1.0 + score).log2()
        } else {
            score
        }
    }
}

impl Environment for Game2048 {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.board.iter_mut().for_each(|c| *c = 0);
        self.pending_reward = None;
        self.done = false;
        self.steps = 0;
        self.score = 0.0;
        for _ in 0..2 {
            let o = self.sample_outcome();
            self.spawn(o).expect("empty cell");
        }
        self.encode()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        self.step_afterstate(action)?;
        let outcome = self.sample_outcome();
        self.resolve_chance(outcome)
    }

    fn step_afterstate(&mut self, action: &Action) -> Result<f64, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        if self.pending_reward.is_some() {
            return Err(EnvError::ChancePending);
        }
        let dir = match action.index() {
            Some(d) if d < 4 => d,
            _ => return Err(EnvError::IllegalAction(action.clone())),
        };
        let (board, score) = self.slid(dir);
        if board == self.board {
            return Err(EnvError::IllegalAction(action.clone()));
        }
        self.board = board;
        self.score += score;
        let reward = self.shape_reward(score);
        self.pending_reward = Some(reward);
        Ok(reward)
    }

    fn chance_law(&self) -> Result<Vec<f64>, EnvError> {
        if self.pending_reward.is_none() {
            return Err(EnvError::NoChancePending);
        }
        let empties = self.empty_cells();
        let mut probs = vec![0.0; self.spec.chance_dim.unwrap_or(0)];
        let share = 1.0 / empties.len() as f64;
        for cell in empties {
            for (t, p) in self.law.iter().enumerate() {
                probs[cell * self.cfg.num_chances + t] = share * p;
            }
        }
        Ok(probs)
    }

    fn resolve_chance(&mut self, outcome: usize) -> Result<StepResult, EnvError> {
        let reward = self.pending_reward.ok_or(EnvError::NoChancePending)?;
        self.spawn(outcome)?;
        self.pending_reward = None;
        self.steps += 1;
        let stuck = !(0..4).any(|a| self.slid(a).0 != self.board);
        self.done = stuck || self.steps >= self.cfg.max_steps;
        Ok(StepResult {
            obs: self.encode(),
            reward,
            done: self.done,
            info: StepInfo {
                winner: None,
                chance_outcome: Some(outcome),
            },
        })
    }

    fn legal_actions(&self) -> Result<LegalActions, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        if self.pending_reward.is_some() {
            return Err(EnvError::ChancePending);
        }
        Ok(LegalActions::Mask((0..4).map(|a| self.slid(a).0 != self.board).collect()))
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
        *self = token.get::<Game2048>(KIND)?.clone();
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for row in self.board.chunks(self.cfg.size) {
            let cells: Vec<String> = row
                .iter()
                .map(|e| if *e == 0 { ".".to_string() } else { (1u32 << e).to_string() })
                .map(|s| format!("{s:>5}"))
                .collect();
            out.push_str(&cells.join(""));
            out.push('\n');
        }
        out
    }
}
