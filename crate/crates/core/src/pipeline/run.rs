use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::collect::{collect_episode, evaluate, search_world, EvalReport, Snapshot};
use super::probe::{alignment_probe, probe_transitions, ProbeTransition};
use super::{Algorithm, PipelineError, ResolvedRun, RunConfig};
use crate::action::{Action, PolicyKind};
use crate::envs::{EnvConfig, Environment, LegalActions};
use crate::explore::{temperature_at, RndModule};
use crate::model::{MuZeroModel, NetKind};
use crate::replay::{GameSegment, GateDecision, ReplayBuffer, ThroughputGate};
use crate::search::{SearchConfig, WorldKind};
use crate::trainer::{train_iteration, Learner, TrainMetrics};

pub const CHECKPOINT_SCHEMA: &str = "zerodesk-checkpoint/1";
pub const STATE_SCHEMA: &str = "zerodesk-run-state/1";
pub const MANIFEST_SCHEMA: &str = "zerodesk-manifest/1";

fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string(value).map_err(|e| PipelineError::io(path, e))?;
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::io(path, e))
}

fn check_schema(path: &Path, found: &str, expected: &str) -> Result<(), PipelineError> {
    if found == expected {
        Ok(())
    } else {
        Err(PipelineError::io(path, format!("schema {found}, expected {expected}")))
    }
}

/// A model with everything needed to play it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub version: String,
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    pub world: WorldKind,
    /// Evaluation search settings.
    pub search: SearchConfig,
    pub env_steps: u64,
    pub model: MuZeroModel,
}

impl Checkpoint {
    pub fn new(run: &ResolvedRun, env_steps: u64, model: MuZeroModel) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            version: version(),
            env: run.env.clone(),
            algorithm: run.algorithm,
            world: run.world,
            search: run.eval_search.clone(),
            env_steps,
            model,
        }
    }

    pub fn snapshot(&self) -> Snapshot<'_> {
        Snapshot {
            model: &self.model,
            world: self.world,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let c: Self = read_json(path)?;
        check_schema(path, &c.schema, CHECKPOINT_SCHEMA)?;
        Ok(c)
    }
}

/// Everything a seed's run needs to continue bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema: String,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    /// Index of the next scheduled evaluation point.
    pub next_eval: u64,
    pub model: MuZeroModel,
    pub learner: Learner,
    pub rnd: Option<RndModule>,
    pub buffer: ReplayBuffer,
    pub gate: ThroughputGate,
    pub rng: ChaCha8Rng,
    pub probe: Vec<ProbeTransition>,
    /// Learner iterations since the last evaluation point.
    pub since_eval: Vec<TrainRow>,
}

/// One evaluation point, as written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Scheduled evaluation step: a multiple of `eval_every`, or the run
    /// length for the final point.
    pub eval_point: u64,
    pub env_steps: u64,
    pub seed: u64,
    pub train_steps: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub win_rate: f64,
    pub draw_rate: f64,
    pub loss_rate: f64,
    pub cosine: Option<f64>,
    pub temperature: f64,
    pub loss_total: Option<f64>,
    pub loss_policy: Option<f64>,
    pub loss_value: Option<f64>,
    pub loss_reward: Option<f64>,
    pub loss_consistency: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub loss_chance: Option<f64>,
}

/// One learner iteration, as written to `train.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub train_step: u64,
    pub env_steps: u64,
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub consistency: f64,
    pub entropy: f64,
    pub chance: f64,
    pub grad_norm: f64,
    pub rnd_loss: Option<f64>,
}

impl TrainRow {
    fn new(m: &TrainMetrics, env_steps: u64) -> Self {
        Self {
            train_step: m.step,
            env_steps,
            total: m.loss.total,
            policy: m.loss.policy,
            value: m.loss.value,
            reward: m.loss.reward,
            consistency: m.loss.consistency,
            entropy: m.loss.entropy,
            chance: m.loss.chance,
            grad_norm: m.loss.grad_norm,
            rnd_loss: m.rnd_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: String,
    pub seeds: Vec<u64>,
    /// `running`, `stopped`, `completed` or `failed`.
    pub status: String,
    pub env_steps: Option<u64>,
    pub train_steps: Option<u64>,
    pub error: Option<String>,
}

impl Manifest {
    fn new(seeds: Vec<u64>, status: &str) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            version: version(),
            seeds,
            status: status.into(),
            env_steps: None,
            train_steps: None,
            error: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let m: Self = read_json(path)?;
        check_schema(path, &m.schema, MANIFEST_SCHEMA)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Save resumable state and stop once this many env steps are collected.
    pub stop_after_env_steps: Option<u64>,
    /// Continue from a saved `state.json` when one exists.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub env_steps: u64,
    pub train_steps: u64,
    pub completed: bool,
    pub evals: Vec<EvalRow>,
    pub gate: ThroughputGate,
}

fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    if rows.is_empty() {
        return Ok(());
    }
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::io(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| PipelineError::io(path, e))).collect()
}

/// Held-out transitions from uniformly random play, independent of the
/// training stream.
pub fn random_probe_set(
    env_cfg: &EnvConfig,
    policy: PolicyKind,
    size: usize,
    seed: u64,
) -> Result<Vec<ProbeTransition>, PipelineError> {
    if size == 0 {
        return Ok(Vec::new());
    }
    let mut env = env_cfg.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut segs = Vec::new();
    let mut count = 0;
    while count < size {
        let mut seg = GameSegment {
            observations: vec![env.reset(rng.random())],
            ..GameSegment::default()
        };
        while !env.is_done() {
            let (agent, env_action) = match (env.legal_actions()?, policy.joint_actions()) {
                (LegalActions::Mask(m), _) => {
                    let legal: Vec<usize> = (0..m.len()).filter(|i| m[*i]).collect();
                    let a = Action::Discrete(legal[rng.random_range(0..legal.len())]);
                    (a.clone(), a)
                }
                (LegalActions::Continuous { .. }, Some(n)) => {
                    let a = Action::Discrete(rng.random_range(0..n));
                    let e = policy.to_env_action(&a).map_err(crate::model::ModelError::from)?;
                    (a, e)
                }
                (LegalActions::Continuous { dim }, None) => {
                    let a = Action::Continuous((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect());
                    (a.clone(), a)
                }
            };
            let step = env.step(&env_action)?;
            seg.actions.push(agent);
            seg.chance_outcomes.push(step.info.chance_outcome);
            seg.observations.push(step.obs);
        }
        count += seg.len();
        segs.push(seg);
    }
    Ok(probe_transitions(&segs, size))
}

impl RunState {
    pub fn fresh(run: &ResolvedRun, seed: u64) -> Result<Self, PipelineError> {
        let model = MuZeroModel::new(run.shape.clone(), run.model.clone(), seed)?;
        let learner = Learner::new(&model, run.trainer.optimizer);
        let rnd = match &run.exploration.intrinsic {
            Some(c) => Some(RndModule::new(run.spec.obs_dim, c, run.trainer.optimizer, seed)?),
            None => None,
        };
        Ok(Self {
            schema: STATE_SCHEMA.into(),
            seed,
            env_steps: 0,
            episodes: 0,
            next_eval: 0,
            probe: random_probe_set(&run.env, run.shape.policy, run.probe_size, seed)?,
            model,
            learner,
            rnd,
            buffer: ReplayBuffer::new(run.buffer.clone())?,
            gate: ThroughputGate::new(run.buffer.replay_ratio),
            rng: ChaCha8Rng::seed_from_u64(seed),
            since_eval: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s: Self = read_json(path)?;
        check_schema(path, &s.schema, STATE_SCHEMA)?;
        Ok(s)
    }

    fn snapshot(&self, world: WorldKind) -> Snapshot<'_> {
        Snapshot {
            model: &self.model,
            world,
        }
    }
}

fn mean_of(rows: &[TrainRow], f: impl Fn(&TrainRow) -> f64) -> Option<f64> {
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().map(f).sum::<f64>() / rows.len() as f64)
    }
}

fn has_transition_model(model: &MuZeroModel) -> bool {
    model.has(NetKind::Dynamics) || model.has(NetKind::ChanceDynamics)
}

fn eval_point(run: &ResolvedRun, state: &RunState, point: u64, since: &[TrainRow]) -> Result<EvalRow, PipelineError> {
    let mut env = run.env.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed.wrapping_mul(0x1000_0000_01B3) ^ point);
    let report: EvalReport = evaluate(
        env.as_mut(),
        state.snapshot(run.world),
        &run.eval_search,
        run.eval_episodes,
        run.eval_opponent,
        &mut rng,
    )?;
    let cosine = if !state.probe.is_empty() && has_transition_model(&state.model) {
        Some(alignment_probe(&state.model, &state.probe)?.mean)
    } else {
        None
    };
    Ok(EvalRow {
        eval_point: point,
        env_steps: state.env_steps,
        seed: state.seed,
        train_steps: state.learner.step,
        mean_return: report.mean,
        std_return: report.std,
        win_rate: report.wins,
        draw_rate: report.draws,
        loss_rate: report.losses,
        cosine,
        temperature: temperature_at(&run.exploration.temperature, state.env_steps),
        loss_total: mean_of(since, |r| r.total),
        loss_policy: mean_of(since, |r| r.policy),
        loss_value: mean_of(since, |r| r.value),
        loss_reward: mean_of(since, |r| r.reward),
        loss_consistency: mean_of(since, |r| r.consistency),
        loss_entropy: mean_of(since, |r| r.entropy),
        loss_chance: mean_of(since, |r| r.chance),
    })
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), PipelineError> {
    write_json(&dir.join("manifest.json"), m)
}

/// Runs one seed in `dir`: gate-driven collect/train alternation with
/// evaluation and the alignment probe every `eval_every` env steps.
pub fn orchestrate_seed(run: &ResolvedRun, seed: u64, dir: &Path, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let state_path = dir.join("state.json");
    let mut manifest = Manifest::new(vec![seed], "running");
    write_manifest(dir, &manifest)?;
    let result = run_seed(run, seed, dir, &state_path, opts);
    match &result {
        Ok(s) => {
            manifest.status = if s.completed { "completed" } else { "stopped" }.into();
            manifest.env_steps = Some(s.env_steps);
            manifest.train_steps = Some(s.train_steps);
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    write_manifest(dir, &manifest)?;
    result
}

fn run_seed(run: &ResolvedRun, seed: u64, dir: &Path, state_path: &Path, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let metrics_path = dir.join("metrics.csv");
    let train_path = dir.join("train.csv");
    let mut state = if opts.resume && state_path.exists() {
        let s = RunState::load(state_path)?;
        if s.seed != seed {
            return Err(PipelineError::config("seeds", format!("state.json belongs to seed {}", s.seed)));
        }
        s
    } else {
        for p in [&metrics_path, &train_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| PipelineError::io(p, e))?;
            }
        }
        RunState::fresh(run, seed)?
    };
    let mut evals = Vec::new();
    let mut pending: Vec<TrainRow> = Vec::new();
    let total = run.total_env_steps;
    let warmup = run.trainer.warmup().max(run.trainer.batch_size);
    let reanalyze = match run.world {
        WorldKind::LearnedModel => Some(&run.search),
        WorldKind::PerfectSimulator => None,
    };
    let mut env = run.env.build()?;

    let completed = loop {
        if let Some(stop) = opts.stop_after_env_steps {
            if state.env_steps >= stop && state.env_steps < total {
                break false;
            }
        }
        let scheduled = state.next_eval * run.eval_every;
        let due = if state.env_steps >= total {
            Some(total)
        } else if state.env_steps >= scheduled {
            Some(scheduled)
        } else {
            None
        };
        if let Some(point) = due {
            let row = eval_point(run, &state, point, &state.since_eval)?;
            Checkpoint::new(run, state.env_steps, state.model.clone())
                .save(&dir.join(format!("checkpoint_{}.json", state.env_steps)))?;
            append_csv(&train_path, &pending)?;
            pending.clear();
            state.since_eval.clear();
            append_csv(&metrics_path, std::slice::from_ref(&row))?;
            evals.push(row);
            if state.env_steps >= total {
                break true;
            }
            state.next_eval = state.env_steps / run.eval_every + 1;
            continue;
        }
        if state.buffer.len() >= warmup && state.gate.decide() == GateDecision::Train {
            let metrics = train_iteration(
                &mut state.buffer,
                &mut state.model,
                &mut state.learner,
                state.rnd.as_mut(),
                &run.trainer,
                reanalyze,
                &mut state.rng,
            )?;
            state.gate.record_trained(metrics.batch_size);
            let row = TrainRow::new(&metrics, state.env_steps);
            state.since_eval.push(row.clone());
            pending.push(row);
        } else {
            let reset_seed = state.rng.random();
            let seg = collect_episode(
                env.as_mut(),
                Snapshot {
                    model: &state.model,
                    world: run.world,
                },
                &run.search,
                &run.exploration,
                state.rnd.as_ref(),
                state.env_steps,
                reset_seed,
                &mut state.rng,
            )?;
            let n = seg.len();
            state.buffer.push_segment(seg)?;
            state.gate.record_collected(n);
            state.env_steps += n as u64;
            state.episodes += 1;
        }
    };
    append_csv(&train_path, &pending)?;
    if !completed || opts.stop_after_env_steps.is_some() {
        state.save(state_path)?;
    }
    Ok(RunSummary {
        seed,
        dir: dir.to_path_buf(),
        env_steps: state.env_steps,
        train_steps: state.learner.step,
        completed,
        evals,
        gate: state.gate.clone(),
    })
}

/// Aggregate row over seeds for one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub eval_point: u64,
    pub seeds: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_cosine: Option<f64>,
    pub std_cosine: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per evaluation point mean and standard deviation across seeds, written
/// to `aggregate.csv`.
pub fn aggregate_seeds(run_dir: &Path, seeds: &[u64]) -> Result<Vec<AggregateRow>, PipelineError> {
    let mut by_point: BTreeMap<u64, Vec<EvalRow>> = BTreeMap::new();
    for s in seeds {
        let rows: Vec<EvalRow> = read_csv(&seed_dir(run_dir, *s).join("metrics.csv"))?;
        for r in rows {
            by_point.entry(r.eval_point).or_default().push(r);
        }
    }
    let out: Vec<AggregateRow> = by_point
        .into_iter()
        .map(|(point, rows)| {
            let returns: Vec<f64> = rows.iter().map(|r| r.mean_return).collect();
            let cos: Vec<f64> = rows.iter().filter_map(|r| r.cosine).collect();
            let (mean_return, std_return) = mean_std(&returns);
            let (mean_cosine, std_cosine) = if cos.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&cos);
                (Some(m), Some(s))
            };
            AggregateRow {
                eval_point: point,
                seeds: rows.len(),
                mean_return,
                std_return,
                mean_cosine,
                std_cosine,
            }
        })
        .collect();
    let path = run_dir.join("aggregate.csv");
    if path.exists() {
        fs::remove_file(&path).map_err(|e| PipelineError::io(&path, e))?;
    }
    append_csv(&path, &out)?;
    Ok(out)
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

/// Runs every seed of `cfg` under `run_dir`, then aggregates across seeds.
/// A failing seed ends the run with a failure manifest.
pub fn orchestrate(cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> Result<Vec<RunSummary>, PipelineError> {
    let run = cfg.resolve()?;
    fs::create_dir_all(run_dir).map_err(|e| PipelineError::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    let text = toml::to_string(cfg).map_err(|e| PipelineError::io(&cfg_path, e))?;
    fs::write(&cfg_path, text).map_err(|e| PipelineError::io(&cfg_path, e))?;
    let mut manifest = Manifest::new(cfg.seeds.clone(), "running");
    write_manifest(run_dir, &manifest)?;
    let mut out = Vec::new();
    for seed in &cfg.seeds {
        match orchestrate_seed(&run, *seed, &seed_dir(run_dir, *seed), opts) {
            Ok(s) => out.push(s),
            Err(e) => {
                manifest.status = "failed".into();
                manifest.error = Some(format!("seed {seed}: {e}"));
                write_manifest(run_dir, &manifest)?;
                return Err(e);
            }
        }
    }
    aggregate_seeds(run_dir, &cfg.seeds)?;
    manifest.status = if out.iter().all(|s| s.completed) { "completed" } else { "stopped" }.into();
    manifest.env_steps = Some(out.iter().map(|s| s.env_steps).sum());
    manifest.train_steps = Some(out.iter().map(|s| s.train_steps).sum());
    write_manifest(run_dir, &manifest)?;
    Ok(out)
}

/// Latest `checkpoint_<step>.json` in a seed directory.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step: u64 = name.strip_prefix("checkpoint_")?.strip_suffix(".json")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
}

/// Plays the checkpoint's search move from the current state.
pub fn agent_move<R: Rng + ?Sized>(ckpt: &Checkpoint, env: &dyn Environment, rng: &mut R) -> Result<Action, PipelineError> {
    let r = search_world(env, ckpt.snapshot(), &ckpt.search, false, rng)?;
    Ok(ckpt
        .model
        .shape()
        .policy
        .to_env_action(r.selected_action())
        .map_err(crate::model::ModelError::from)?)
}
