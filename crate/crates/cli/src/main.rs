//! Command-line driver: train, evaluate, play, probe and export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod overrides;
mod play;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use zerodesk::envs::EnvConfig;
use zerodesk::pipeline::{
    alignment_probe, evaluate, latest_checkpoint, orchestrate, random_probe_set, read_csv, seed_dir, Algorithm,
    Checkpoint, EvalOpponent, EvalRow, Manifest, PipelineError, ProbeTransition, RunConfig, RunOptions,
};

#[derive(Parser)]
#[command(name = "zerodesk", version, about = "Tree-search reinforcement learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opponent {
    Random,
    Minimax,
    SelfPlay,
}

impl From<Opponent> for EvalOpponent {
    fn from(o: Opponent) -> Self {
        match o {
            Opponent::Random => EvalOpponent::Random,
            Opponent::Minimax => EvalOpponent::Minimax,
            Opponent::SelfPlay => EvalOpponent::SelfPlay,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a run config.
    Train {
        /// TOML run config; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Replaces the config's seed list; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
        /// Environment preset: kinrow3, gomoku6, connect4, gridmaze, 2048, pendulum.
        #[arg(long)]
        env: Option<String>,
        /// Override a config value, e.g. `search.num_simulations=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, env = "RUN_DIR", default_value = "runs/latest")]
        run_dir: PathBuf,
        /// Continue seeds from their saved state.
        #[arg(long)]
        resume: bool,
        /// Save state and stop after this many env steps per seed.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint (or the latest one in a seed directory).
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "random")]
        opponent: Opponent,
        /// Environment preset the checkpoint must match.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        simulations: Option<usize>,
        /// Per-episode CSV; defaults to `eval_<step>_seed<seed>.csv` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Play a two-player game against a checkpoint in the terminal.
    Play {
        checkpoint: PathBuf,
        /// 0 moves first.
        #[arg(long, default_value_t = 0)]
        human_seat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        env: Option<String>,
    },
    /// Latent alignment cosine of a checkpoint over a probe set.
    Probe {
        checkpoint: PathBuf,
        /// JSON array of transitions; random play is used when omitted.
        transitions: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        random: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One CSV row per evaluation point per seed.
    Export {
        #[arg(env = "RUN_DIR")]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default run config.
    Config {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        algorithm: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn from_pipeline(e: PipelineError) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

fn env_preset(name: &str) -> Result<EnvConfig, Failure> {
    EnvConfig::from_shorthand(name).ok_or_else(|| usage(format!("unknown environment `{name}`")))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {}", path.display(), e.to_string().trim())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let file = if path.is_dir() {
        latest_checkpoint(path).ok_or_else(|| usage(format!("{}: no checkpoint found", path.display())))?
    } else {
        path.to_path_buf()
    };
    Checkpoint::load(&file).map_err(|e| usage(e.to_string()))
}

fn check_env(ckpt: &Checkpoint, env: Option<&str>) -> Outcome {
    if let Some(name) = env {
        if env_preset(name)? != ckpt.env {
            return Err(usage(format!("checkpoint was trained on {:?}, not `{name}`", ckpt.env)));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    seeds: Vec<u64>,
    env: Option<String>,
    sets: &[String],
    run_dir: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(name) = env {
        cfg.env = env_preset(&name)?;
    }
    cfg = overrides::apply(&cfg, sets).map_err(Failure::Usage)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    cfg.resolve().map_err(Failure::from_pipeline)?;
    let opts = RunOptions {
        stop_after_env_steps: stop_after,
        resume,
    };
    match orchestrate(&cfg, run_dir, &opts) {
        Ok(summaries) => {
            for s in summaries {
                let last = s.evals.last();
                println!(
                    "seed {} env_steps {} train_steps {} return {:.4} status {}",
                    s.seed,
                    s.env_steps,
                    s.train_steps,
                    last.map_or(f64::NAN, |e| e.mean_return),
                    if s.completed { "completed" } else { "stopped" }
                );
            }
            println!("metrics in {}", run_dir.display());
            Ok(())
        }
        Err(e) if e.is_config() => Err(Failure::Usage(e.to_string())),
        Err(e) => Err(Failure::Runtime(format!(
            "{e}; see {}",
            run_dir.join("manifest.json").display()
        ))),
    }
}

#[derive(Serialize)]
struct EpisodeRow {
    episode: usize,
    seed: u64,
    env_steps: u64,
    episode_return: f64,
}

fn cmd_eval(
    checkpoint: &Path,
    episodes: usize,
    seed: u64,
    opponent: Opponent,
    env: Option<&str>,
    simulations: Option<usize>,
    out: Option<PathBuf>,
) -> Outcome {
    let ckpt = load_checkpoint(checkpoint)?;
    check_env(&ckpt, env)?;
    let mut search = ckpt.search.clone();
    if let Some(n) = simulations {
        if n == 0 {
            return Err(usage("--simulations must be at least 1"));
        }
        search.num_simulations = n;
    }
    let mut game = ckpt.env.build().map_err(|e| usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = evaluate(game.as_mut(), ckpt.snapshot(), &search, episodes, opponent.into(), &mut rng)
        .map_err(Failure::from_pipeline)?;
    let out = out.unwrap_or_else(|| {
        let dir = if checkpoint.is_dir() {
            checkpoint.to_path_buf()
        } else {
            checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        dir.join(format!("eval_{}_seed{seed}.csv", ckpt.env_steps))
    });
    let mut w = csv::Writer::from_path(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    for (i, r) in report.returns.iter().enumerate() {
        w.serialize(EpisodeRow {
            episode: i,
            seed,
            env_steps: ckpt.env_steps,
            episode_return: *r,
        })
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("mean_return {:.4} ± {:.4} over {} episodes", report.mean, report.std, episodes);
    if ckpt.model.shape().value_head == zerodesk::model::ValueHeadKind::TanhBounded {
        print!(" win {:.3} draw {:.3} loss {:.3}", report.wins, report.draws, report.losses);
    }
    println!();
    println!("episodes in {}", out.display());
    Ok(())
}

fn cmd_play(checkpoint: &Path, human_seat: usize, seed: u64, env: Option<&str>) -> Outcome {
    let ckpt = load_checkpoint(checkpoint)?;
    check_env(&ckpt, env)?;
    let mut game = ckpt.env.build().map_err(|e| usage(e.to_string()))?;
    if !game.spec().two_player() {
        return Err(usage("play needs a two-player environment"));
    }
    if human_seat > 1 {
        return Err(usage("--human-seat must be 0 or 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = io::stdout().lock();
    match play::play_session(&ckpt, game.as_mut(), human_seat, seed, &mut input, &mut out, &mut rng) {
        Ok(_) => Ok(()),
        Err(play::PlayError::Io(e)) => Err(Failure::Runtime(e.to_string())),
        Err(play::PlayError::Pipeline(e)) => Err(Failure::from_pipeline(e)),
    }
}

fn cmd_probe(checkpoint: &Path, transitions: Option<&Path>, random: usize, seed: u64) -> Outcome {
    let ckpt = load_checkpoint(checkpoint)?;
    let set: Vec<ProbeTransition> = match transitions {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => random_probe_set(&ckpt.env, ckpt.model.shape().policy, random, seed).map_err(Failure::from_pipeline)?,
    };
    if set.is_empty() {
        return Err(usage("probe set is empty"));
    }
    let s = alignment_probe(&ckpt.model, &set).map_err(|e| usage(e.to_string()))?;
    println!(
        "cosine mean {:.4} std {:.4} min {:.4} max {:.4} n {}",
        s.mean, s.std, s.min, s.max, s.count
    );
    Ok(())
}

/// Column order of `export`.
#[derive(Serialize)]
struct ExportRow {
    env_steps: u64,
    seed: u64,
    mean_return: f64,
    std_return: f64,
    cosine: Option<f64>,
    loss_total: Option<f64>,
    loss_policy: Option<f64>,
    loss_value: Option<f64>,
    loss_reward: Option<f64>,
    loss_consistency: Option<f64>,
    loss_entropy: Option<f64>,
    loss_chance: Option<f64>,
}

fn cmd_export(run_dir: &Path, out: Option<&Path>) -> Outcome {
    let manifest =
        Manifest::load(&run_dir.join("manifest.json")).map_err(|e| usage(format!("not a run directory: {e}")))?;
    let mut rows = Vec::new();
    for seed in &manifest.seeds {
        let path = seed_dir(run_dir, *seed).join("metrics.csv");
        if !path.exists() {
            continue;
        }
        let evals: Vec<EvalRow> = read_csv(&path).map_err(|e| usage(e.to_string()))?;
        rows.extend(evals.into_iter().map(|e| ExportRow {
            env_steps: e.env_steps,
            seed: e.seed,
            mean_return: e.mean_return,
            std_return: e.std_return,
            cosine: e.cosine,
            loss_total: e.loss_total,
            loss_policy: e.loss_policy,
            loss_value: e.loss_value,
            loss_reward: e.loss_reward,
            loss_consistency: e.loss_consistency,
            loss_entropy: e.loss_entropy,
            loss_chance: e.loss_chance,
        }));
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(())
}

fn cmd_config(env: Option<&str>, algorithm: Option<&str>) -> Outcome {
    let mut cfg = RunConfig::default();
    if let Some(name) = env {
        cfg.env = env_preset(name)?;
    }
    if let Some(a) = algorithm {
        cfg.algorithm = Algorithm::ALL
            .into_iter()
            .find(|x| toml::Value::try_from(x).ok().and_then(|v| v.as_str().map(|s| s == a)) == Some(true))
            .ok_or_else(|| usage(format!("unknown algorithm `{a}`")))?;
    }
    let text = toml::to_string(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train {
            config,
            seed,
            env,
            sets,
            run_dir,
            resume,
            stop_after,
        } => cmd_train(config.as_deref(), seed, env, &sets, &run_dir, resume, stop_after),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            opponent,
            env,
            simulations,
            out,
        } => cmd_eval(&checkpoint, episodes, seed, opponent, env.as_deref(), simulations, out),
        Command::Play {
            checkpoint,
            human_seat,
            seed,
            env,
        } => cmd_play(&checkpoint, human_seat, seed, env.as_deref()),
        Command::Probe {
            checkpoint,
            transitions,
            random,
            seed,
        } => cmd_probe(&checkpoint, transitions.as_deref(), random, seed),
        Command::Export { run_dir, out } => cmd_export(&run_dir, out.as_deref()),
        Command::Config { env, algorithm } => cmd_config(env.as_deref(), algorithm.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
