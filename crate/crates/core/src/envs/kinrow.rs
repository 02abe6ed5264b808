use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvError, EnvSpec, Environment, LegalActions, StateToken, StepInfo, StepResult};
use crate::action::Action;

/// `k` in a row on an `height x width` board, optionally with gravity
/// (Connect-Four style, actions are columns).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KInRowConfig {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub gravity: bool,
}

impl KInRowConfig {
    pub fn tictactoe() -> Self {
        Self {
            height: 3,
            width: 3,
            k: 3,
            gravity: false,
        }
    }
}

impl Default for KInRowConfig {
    fn default() -> Self {
        Self::tictactoe()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stone {
    Empty,
    Player(u8),
}

#[derive(Clone, Debug)]
pub struct KInRow {
    cfg: KInRowConfig,
    spec: EnvSpec,
    board: Vec<Stone>,
    to_play: usize,
    done: bool,
    winner: Option<usize>,
    steps: usize,
}

const KIND: &str = "kinrow";

impl KInRow {
    pub fn new(cfg: KInRowConfig) -> Result<Self, EnvError> {
        if cfg.height == 0 || cfg.width == 0 || cfg.k == 0 || cfg.k > cfg.height.max(cfg.width) {
            return Err(EnvError::InvalidConfig(format!("bad k-in-row geometry {cfg:?}")));
        }
        let cells = cfg.height * cfg.width;
        let n = if cfg.gravity { cfg.width } else { cells };
        let spec = EnvSpec {
            name: format!("kinrow_{}x{}_k{}{}", cfg.height, cfg.width, cfg.k, if cfg.gravity { "_g" } else { "" }),
            obs_dim: 3 * cells,
            action_space: ActionSpace::Discrete { n },
            num_players: 2,
            max_steps: cells,
            chance_dim: None,
        };
        spec.validate()?;
        Ok(Self {
            cfg,
            spec,
            board: vec![Stone::Empty; cells],
            to_play: 0,
            done: false,
            winner: None,
            steps: 0,
        })
    }

    /// Position built from an explicit board. The winner and terminal flag
    /// are derived from the stones.
    pub fn from_board(cfg: KInRowConfig, board: &[Stone], to_play: usize) -> Result<Self, EnvError> {
        let mut game = Self::new(cfg)?;
        if board.len() != game.board.len() || to_play > 1 {
            return Err(EnvError::InvalidConfig("board does not match geometry".into()));
        }
        game.board = board.to_vec();
        game.to_play = to_play;
        game.steps = board.iter().filter(|s| **s != Stone::Empty).count();
        for (cell, stone) in board.iter().enumerate() {
            if let Stone::Player(p) = *stone {
                if game.completes_line(cell, p) {
                    game.winner = Some(p as usize);
                }
            }
        }
        game.done = game.winner.is_some() || game.steps == board.len();
        Ok(game)
    }

    pub fn config(&self) -> &KInRowConfig {
        &self.cfg
    }

    pub fn board(&self) -> &[Stone] {
        &self.board
    }

    pub fn winner(&self) -> Option<usize> {
        self.winner
    }

    /// Board cell a discrete action lands on, if legal.
    pub fn landing_cell(&self, action: usize) -> Option<usize> {
        if self.cfg.gravity {
            if action >= self.cfg.width {
                return None;
            }
            (0..self.cfg.height)
                .rev()
                .map(|row| row * self.cfg.width + action)
                .find(|&cell| self.board[cell] == Stone::Empty)
        } else if action < self.board.len() && self.board[action] == Stone::Empty {
            Some(action)
        } else {
            None
        }
    }

    fn completes_line(&self, cell: usize, player: u8) -> bool {
        let (h, w) = (self.cfg.height as isize, self.cfg.width as isize);
        let (r, c) = ((cell / self.cfg.width) as isize, (cell % self.cfg.width) as isize);
        let owned = |rr: isize, cc: isize| {
            rr >= 0 && rr < h && cc >= 0 && cc < w && self.board[(rr * w + cc) as usize] == Stone::Player(player)
        };
        [(0, 1), (1, 0), (1, 1), (1, -1)].iter().any(|&(dr, dc)| {
            let mut count = 1;
            for sign in [1, -1] {
                let mut step = 1;
                while owned(r + sign * dr * step, c + sign * dc * step) {
                    count += 1;
                    step += 1;
                }
            }
            count >= self.cfg.k
        })
    }

    pub(crate) fn encode(&self) -> Vec<f64> {
        let cells = self.board.len();
        let mut obs = vec![0.0; 3 * cells];
        for (i, s) in self.board.iter().enumerate() {
            let plane = match s {
                Stone::Empty => 0,
                Stone::Player(p) if *p as usize == self.to_play => 1,
                Stone::Player(_) => 2,
            };
            obs[plane * cells + i] = 1.0;
        }
        obs
    }
}

impl Environment for KInRow {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.board.iter_mut().for_each(|s| *s = Stone::Empty);
        self.to_play = 0;
        self.done = false;
        self.winner = None;
        self.steps = 0;
        self.encode()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        let cell = action
            .index()
            .and_then(|a| self.landing_cell(a))
            .ok_or_else(|| EnvError::IllegalAction(action.clone()))?;
        let mover = self.to_play;
        self.board[cell] = Stone::Player(mover as u8);
        self.steps += 1;
        let won = self.completes_line(cell, mover as u8);
        if won {
            self.winner = Some(mover);
        }
        self.done = won || self.steps == self.board.len();
        self.to_play = 1 - mover;
        Ok(StepResult {
            obs: self.encode(),
            reward: if won { 1.0 } else { 0.0 },
            done: self.done,
            info: StepInfo {
                winner: self.winner,
                chance_outcome: None,
            },
        })
    }

    fn legal_actions(&self) -> Result<LegalActions, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        let n = match self.spec.action_space {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { .. } => unreachable!(),
        };
        Ok(LegalActions::Mask((0..n).map(|a| self.landing_cell(a).is_some()).collect()))
    }

    fn observation(&self) -> Vec<f64> {
        self.encode()
    }

    fn to_play(&self) -> usize {
        self.to_play
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
        let state: &KInRow = token.get(KIND)?;
        *self = state.clone();
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for row in 0..self.cfg.height {
            for col in 0..self.cfg.width {
                let cell = row * self.cfg.width + col;
                let ch = match self.board[cell] {
                    Stone::Empty => '.',
                    Stone::Player(0) => 'X',
                    Stone::Player(_) => 'O',
                };
                out.push(ch);
                out.push(' ');
            }
            out.pop();
            out.push('\n');
        }
        out
    }

    fn as_kinrow(&self) -> Option<&KInRow> {
        Some(self)
    }
}
