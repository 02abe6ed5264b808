//! Sparse-reward key/door maze.
//!
//! A row of square rooms separated by one-cell walls. Each inner wall has an
//! opening on the middle row; the last one is a locked door. The key lies in
//! the first room and the goal in the far corner of the last room. Reward is
//! 1 on reaching the goal and 0 everywhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvError, EnvSpec, Environment, LegalActions, StateToken, StepInfo, StepResult};
use crate::action::Action;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridMazeConfig {
    pub rooms: usize,
    pub room_size: usize,
    pub max_steps: usize,
    /// Place the key and goal at seed-dependent cells of their rooms.
    pub randomize: bool,
}

impl Default for GridMazeConfig {
    fn default() -> Self {
        Self {
            rooms: 3,
            room_size: 3,
            max_steps: 300,
            randomize: false,
        }
    }
}

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const PICKUP: usize = 4;
pub const TOGGLE: usize = 5;
const NUM_ACTIONS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cell {
    Floor,
    Wall,
    Door,
}

#[derive(Clone, Debug)]
pub struct GridMaze {
    cfg: GridMazeConfig,
    spec: EnvSpec,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    start: usize,
    door: usize,
    agent: usize,
    key: usize,
    goal: usize,
    has_key: bool,
    door_open: bool,
    done: bool,
    steps: usize,
}

const KIND: &str = "gridmaze";

impl GridMaze {
    pub fn new(cfg: GridMazeConfig) -> Result<Self, EnvError> {
        if cfg.rooms < 2 || cfg.room_size < 2 || cfg.max_steps == 0 {
            return Err(EnvError::InvalidConfig(format!("bad maze geometry {cfg:?}")));
        }
        let height = cfg.room_size;
        let width = cfg.rooms * cfg.room_size + cfg.rooms - 1;
        let mid = height / 2;
        let mut cells = vec![Cell::Floor; width * height];
        let mut door = 0;
        for wall in 1..cfg.rooms {
            let col = wall * (cfg.room_size + 1) - 1;
            for row in 0..height {
                cells[row * width + col] = Cell::Wall;
            }
            let opening = mid * width + col;
            if wall == cfg.rooms - 1 {
                cells[opening] = Cell::Door;
                door = opening;
            } else {
                cells[opening] = Cell::Floor;
            }
        }
        let spec = EnvSpec {
            name: format!("gridmaze_{}x{}", cfg.rooms, cfg.room_size),
            obs_dim: 3 * width * height + 3,
            action_space: ActionSpace::Discrete { n: NUM_ACTIONS },
            num_players: 1,
            max_steps: cfg.max_steps,
            chance_dim: None,
        };
        spec.validate()?;
        let start = mid * width;
        let key = (height - 1) * width + cfg.room_size - 1;
        let goal = (height - 1) * width + width - 1;
        Ok(Self {
            cfg,
            spec,
            width,
            height,
            cells,
            start,
            door,
            agent: start,
            key,
            goal,
            has_key: false,
            door_open: false,
            done: false,
            steps: 0,
        })
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    pub fn door_open(&self) -> bool {
        self.door_open
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn key(&self) -> usize {
        self.key
    }

    fn neighbor(&self, cell: usize, action: usize) -> Option<usize> {
        let (r, c) = (cell / self.width, cell % self.width);
        match action {
            UP if r > 0 => Some(cell - self.width),
            DOWN if r + 1 < self.height => Some(cell + self.width),
            LEFT if c > 0 => Some(cell - 1),
            RIGHT if c + 1 < self.width => Some(cell + 1),
            _ => None,
        }
    }

    fn passable(&self, cell: usize) -> bool {
        match self.cells[cell] {
            Cell::Floor => true,
            Cell::Wall => false,
            Cell::Door => self.door_open,
        }
    }

    fn room_cells(&self, room: usize) -> Vec<usize> {
        let c0 = room * (self.cfg.room_size + 1);
        (0..self.height)
            .flat_map(|r| (c0..c0 + self.cfg.room_size).map(move |c| (r, c)))
            .map(|(r, c)| r * self.width + c)
            .collect()
    }

    fn encode(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut obs = vec![0.0; 3 * n + 3];
        obs[self.agent] = 1.0;
        if self.has_key {
            obs[2 * n] = 1.0;
        } else {
            obs[n + self.key] = 1.0;
        }
        obs[2 * n + 1 + usize::from(self.door_open)] = 1.0;
        obs[2 * n + 3 + self.goal] = 1.0;
        obs
    }
}

impl Environment for GridMaze {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.agent = self.start;
        self.has_key = false;
        self.door_open = false;
        self.done = false;
        self.steps = 0;
        if self.cfg.randomize {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first: Vec<usize> = self.room_cells(0).into_iter().filter(|c| *c != self.start).collect();
            let last = self.room_cells(self.cfg.rooms - 1);
            self.key = first[rng.random_range(0..first.len())];
            self.goal = last[rng.random_range(0..last.len())];
        }
        self.encode()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        let a = match action.index() {
            Some(a) if a < NUM_ACTIONS => a,
            _ => return Err(EnvError::IllegalAction(action.clone())),
        };
        match a {
            PICKUP => {
                if !self.has_key && self.agent == self.key {
                    self.has_key = true;
                }
            }
            TOGGLE => {
                if self.has_key && (0..4).any(|d| self.neighbor(self.agent, d) == Some(self.door)) {
                    self.door_open = true;
                }
            }
            dir => {
                if let Some(next) = self.neighbor(self.agent, dir) {
                    if self.passable(next) {
                        self.agent = next;
                    }
                }
            }
        }
        self.steps += 1;
        let reached = self.agent == self.goal;
        self.done = reached || self.steps >= self.cfg.max_steps;
        Ok(StepResult {
            obs: self.encode(),
            reward: if reached { 1.0 } else { 0.0 },
            done: self.done,
            info: StepInfo::default(),
        })
    }

    fn legal_actions(&self) -> Result<LegalActions, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        Ok(LegalActions::Mask(vec![true; NUM_ACTIONS]))
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
        *self = token.get::<GridMaze>(KIND)?.clone();
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = r * self.width + c;
                let ch = if cell == self.agent {
                    'A'
                } else if cell == self.goal {
                    'G'
                } else if cell == self.key && !self.has_key {
                    'K'
                } else {
                    match self.cells[cell] {
                        Cell::Floor => '.',
                        Cell::Wall => '#',
                        Cell::Door if self.door_open => '/',
                        Cell::Door => 'D',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}
