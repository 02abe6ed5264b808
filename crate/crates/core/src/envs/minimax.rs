use std::collections::HashMap;

use super::{EnvError, Environment, KInRow, Stone};
use crate::action::Action;

/// Exact game value for the player to move and every action achieving it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleResult {
    pub value: i8,
    pub optimal_actions: Vec<usize>,
}

/// Memoised negamax over k-in-a-row positions.
#[derive(Debug)]
pub struct MinimaxSolver {
    memo: HashMap<(Vec<u8>, u8), i8>,
    max_empty: usize,
}

impl Default for MinimaxSolver {
    fn default() -> Self {
        Self::new(12)
    }
}

fn key(game: &KInRow) -> (Vec<u8>, u8) {
    let cells = game
        .board()
        .iter()
        .map(|s| match s {
            Stone::Empty => 0,
            Stone::Player(p) => 1 + p,
        })
        .collect();
    (cells, game.to_play() as u8)
}

impl MinimaxSolver {
    /// `max_empty` bounds the number of empty cells a root position may have.
    pub fn new(max_empty: usize) -> Self {
        Self {
            memo: HashMap::new(),
            max_empty,
        }
    }

    pub fn solve(&mut self, game: &KInRow) -> Result<OracleResult, EnvError> {
        let empty = game.board().iter().filter(|s| **s == Stone::Empty).count();
        if empty > self.max_empty {
            return Err(EnvError::StateSpaceTooLarge(empty));
        }
        if game.is_done() {
            return Ok(OracleResult {
                value: terminal_value(game),
                optimal_actions: Vec::new(),
            });
        }
        let mut best = i8::MIN;
        let mut optimal = Vec::new();
        for action in game.legal_actions()?.indices() {
            let v = self.action_value(game, action);
            if v > best {
                best = v;
                optimal.clear();
            }
            if v == best {
                optimal.push(action);
            }
        }
        Ok(OracleResult {
            value: best,
            optimal_actions: optimal,
        })
    }

    /// Value of playing `action`, from the mover's perspective.
    fn action_value(&mut self, game: &KInRow, action: usize) -> i8 {
        let mut child = game.clone();
        let step = child.step(&Action::Discrete(action)).expect("legal action");
        if step.reward > 0.0 {
            1
        } else if step.done {
            0
        } else {
            -self.value(&child)
        }
    }

    fn value(&mut self, game: &KInRow) -> i8 {
        if game.is_done() {
            return terminal_value(game);
        }
        let k = key(game);
        if let Some(v) = self.memo.get(&k) {
            return *v;
        }
        let mut best = -1;
        for action in game.legal_actions().expect("non-terminal").indices() {
            best = best.max(self.action_value(game, action));
            if best == 1 {
                break;
            }
        }
        self.memo.insert(k, best);
        best
    }
}

fn terminal_value(game: &KInRow) -> i8 {
    match game.winner() {
        Some(w) if w == game.to_play() => 1,
        Some(_) => -1,
        None => 0,
    }
}

pub fn minimax_oracle(game: &KInRow) -> Result<OracleResult, EnvError> {
    MinimaxSolver::default().solve(game)
}
