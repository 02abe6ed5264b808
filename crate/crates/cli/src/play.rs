//! Terminal game against a checkpoint.

use std::io::{self, BufRead, Write};

use rand::Rng;
use zerodesk::action::Action;
use zerodesk::envs::Environment;
use zerodesk::pipeline::{agent_move, Checkpoint, PipelineError};

#[derive(Debug)]
pub enum PlayError {
    Io(io::Error),
    Pipeline(PipelineError),
}

impl From<io::Error> for PlayError {
    fn from(e: io::Error) -> Self {
        PlayError::Io(e)
    }
}

impl From<PipelineError> for PlayError {
    fn from(e: PipelineError) -> Self {
        PlayError::Pipeline(e)
    }
}

impl From<zerodesk::envs::EnvError> for PlayError {
    fn from(e: zerodesk::envs::EnvError) -> Self {
        PlayError::Pipeline(e.into())
    }
}

fn player_name(p: usize) -> &'static str {
    if p == 0 {
        "X"
    } else {
        "O"
    }
}

/// Plays one game reading human moves from `input`. Returns the winner, or
/// `None` for a draw or when input ends early.
pub fn play_session<R: BufRead, W: Write, G: Rng + ?Sized>(
    ckpt: &Checkpoint,
    env: &mut dyn Environment,
    human_seat: usize,
    reset_seed: u64,
    input: &mut R,
    out: &mut W,
    rng: &mut G,
) -> Result<Option<usize>, PlayError> {
    env.reset(reset_seed);
    writeln!(out, "you play {}; enter a move index", player_name(human_seat))?;
    let mut line = String::new();
    let mut winner = None;
    while !env.is_done() {
        write!(out, "{}", env.render())?;
        let mover = env.to_play();
        let action = if mover == human_seat {
            let legal = env.legal_actions()?.indices();
            loop {
                write!(out, "legal {legal:?}> ")?;
                out.flush()?;
                line.clear();
                if input.read_line(&mut line)? == 0 {
                    writeln!(out, "\nbye")?;
                    return Ok(None);
                }
                match line.trim().parse::<usize>() {
                    Ok(a) if legal.contains(&a) => break Action::Discrete(a),
                    _ => writeln!(out, "illegal move `{}`", line.trim())?,
                }
            }
        } else {
            let a = agent_move(ckpt, env, rng)?;
            writeln!(out, "agent plays {}", a.index().unwrap_or(0))?;
            a
        };
        winner = env.step(&action)?.info.winner;
    }
    write!(out, "{}", env.render())?;
    match winner {
        Some(w) if w == human_seat => writeln!(out, "{} wins: you win", player_name(w))?,
        Some(w) => writeln!(out, "{} wins: the agent wins", player_name(w))?,
        None => writeln!(out, "draw")?,
    }
    Ok(winner)
}
