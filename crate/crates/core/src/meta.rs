//! Meta-training and meta-testing: replay memory, context splits,
//! exploration, the training loop and both test protocols.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::time::Instant;

use gssm_autodiff::checkpoint::Checkpoint;
use gssm_autodiff::{
    adam_step, clip_global_norm, optimizer_steps, AdamConfig, AdamState, Matrix, Tape,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dist::DiagGaussian;
use crate::dynamics::{
    elbo_loss, fit_normalization, one_step_mse, ElboReport, ModelDims, TaskBatch, WorldModel,
};
use crate::encoder::sample_latent;
use crate::envs::{
    acrobot, cartpole, episode_return, run_episode, sample_task, Action, EnvId, State, TaskSpec,
    Trajectory, Transition, ACTION_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::metrics::{
    CsvAppender, IterationLog, TestRow, TimingRow, EFFECTIVE_CONFIG, TIMING_LOG,
    TIMING_LOG_VERSION, TRAIN_LOG, TRAIN_LOG_VERSION,
};
use crate::policy::{
    bptt_update, cartpole_reward_with_width, collect_model_rollouts, ppo_update, BpttConfig,
    LearnedModel, Policy, PpoConfig, ValueFn,
};
use crate::rng::{Rng, SeedStream};

/// Model input width: state plus action.
pub const DIM_X: usize = STATE_DIM + ACTION_DIM;

/// Task ids of held-out evaluation tasks start here, far from the ids drawn
/// for training tasks.
const EVAL_TASK_BASE: u64 = 1 << 62;
const TEST_TASK_BASE: u64 = (1 << 62) + (1 << 61);

/// Raw model inputs and targets of a set of transitions.
pub fn transitions_xy(env: EnvId, ts: &[&Transition]) -> (Matrix, Matrix) {
    let x = Matrix::from_shape_fn((ts.len(), DIM_X), |(i, j)| ts[i].x()[j]);
    let y = Matrix::from_shape_fn((ts.len(), STATE_DIM), |(i, j)| ts[i].y(env)[j]);
    (x, y)
}

/// Real transitions per task, keeping the most recent episodes.
#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    tasks: BTreeMap<u64, TaskMemory>,
}

#[derive(Clone, Debug)]
struct TaskMemory {
    spec: TaskSpec,
    episodes: VecDeque<Trajectory>,
}

impl MemoryBuffer {
    /// A buffer keeping at most `capacity` episodes per task.
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            tasks: BTreeMap::new(),
        }
    }

    /// Store an episode under its task. Every transition must carry the
    /// episode's task id.
    pub fn push(&mut self, episode: Trajectory) -> Result<()> {
        let id = episode.task.seed;
        if let Some(t) = episode.transitions.iter().find(|t| t.task != id) {
            return Err(Error::Invalid(format!(
                "transition of task {} in an episode of task {id}",
                t.task
            )));
        }
        let mem = self.tasks.entry(id).or_insert_with(|| TaskMemory {
            spec: episode.task,
            episodes: VecDeque::new(),
        });
        if mem.spec != episode.task {
            return Err(Error::Invalid(format!(
                "task id {id} reused for a different task"
            )));
        }
        mem.episodes.push_back(episode);
        while mem.episodes.len() > self.capacity {
            mem.episodes.pop_front();
        }
        Ok(())
    }

    pub fn task_ids(&self) -> Vec<u64> {
        self.tasks.keys().copied().collect()
    }

    pub fn spec(&self, task: u64) -> Option<&TaskSpec> {
        self.tasks.get(&task).map(|m| &m.spec)
    }

    pub fn episodes(&self, task: u64) -> usize {
        self.tasks.get(&task).map_or(0, |m| m.episodes.len())
    }

    pub fn transitions(&self, task: u64) -> Vec<&Transition> {
        self.tasks
            .get(&task)
            .map(|m| {
                m.episodes
                    .iter()
                    .flat_map(|e| e.transitions.iter())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn task_len(&self, task: u64) -> usize {
        self.tasks
            .get(&task)
            .map_or(0, |m| m.episodes.iter().map(|e| e.transitions.len()).sum())
    }

    pub fn total(&self) -> usize {
        self.tasks.keys().map(|&t| self.task_len(t)).sum()
    }

    pub fn all_transitions(&self) -> Vec<&Transition> {
        self.tasks
            .values()
            .flat_map(|m| m.episodes.iter().flat_map(|e| e.transitions.iter()))
            .collect()
    }

    /// `n` distinct transitions of one task, drawn uniformly.
    pub fn sample_context(&self, task: u64, n: usize, rng: &mut Rng) -> Result<Vec<&Transition>> {
        let all = self.transitions(task);
        if all.len() < n {
            return Err(Error::Invalid(format!(
                "task {task} holds {} transitions, {n} requested",
                all.len()
            )));
        }
        let picked: Vec<&Transition> = all.choose_multiple(rng, n).copied().collect();
        assert!(picked.iter().all(|t| t.task == task), "context mixes tasks");
        Ok(picked)
    }
}

/// Disjoint random split of `n` items into context and target indices.
///
/// The context size is uniform in `[n_min, n_max]`, clipped so at least one
/// target remains.
pub fn split_context_target(
    n: usize,
    n_min: usize,
    n_max: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "splitting needs at least 2 transitions, got {n}"
        )));
    }
    let hi = n_max.clamp(1, n - 1);
    let lo = n_min.clamp(1, hi);
    let c = rng.random_range(lo..=hi);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let target = order.split_off(c);
    Ok((order, target))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationMode {
    UniformRandom,
    PolicyWithNoise,
}

/// Action source for real-environment data collection.
#[derive(Clone, Debug)]
pub enum Explorer<'a> {
    Uniform(EnvId),
    Policy {
        policy: &'a Policy,
        z: Vec<f64>,
        /// Gaussian force std on cart-pole; probability of a uniform torque
        /// on acrobot.
        noise: f64,
    },
}

/// Build `pi_e`. The policy-with-noise mode needs a policy and a latent.
pub fn exploration_policy<'a>(
    mode: ExplorationMode,
    env: EnvId,
    policy: Option<(&'a Policy, Vec<f64>)>,
    noise: f64,
) -> Result<Explorer<'a>> {
    match (mode, policy) {
        (ExplorationMode::UniformRandom, _) => Ok(Explorer::Uniform(env)),
        (ExplorationMode::PolicyWithNoise, Some((policy, z))) => {
            Ok(Explorer::Policy { policy, z, noise })
        }
        (ExplorationMode::PolicyWithNoise, None) => {
            Err(Error::Invalid("policy exploration needs a policy".into()))
        }
    }
}

impl Explorer<'_> {
    pub fn act(&self, state: &State, rng: &mut Rng) -> Result<Action> {
        match self {
            Explorer::Uniform(EnvId::Cartpole) => Ok(Action::Force(
                rng.random_range(-cartpole::MAX_FORCE..=cartpole::MAX_FORCE),
            )),
            Explorer::Uniform(EnvId::Acrobot) => {
                Ok(Action::Torque(rng.random_range(0..acrobot::TORQUES.len())))
            }
            Explorer::Policy { policy, z, noise } => {
                let (a, _) = policy.act(state, z, rng)?;
                if *noise <= 0.0 {
                    return Ok(a);
                }
                Ok(match a {
                    Action::Force(f) => {
                        let e: f64 = StandardNormal.sample(rng);
                        Action::Force(
                            (f + noise * e).clamp(-cartpole::MAX_FORCE, cartpole::MAX_FORCE),
                        )
                    }
                    Action::Torque(i) => {
                        if rng.random::<f64>() < *noise {
                            Action::Torque(rng.random_range(0..acrobot::TORQUES.len()))
                        } else {
                            Action::Torque(i)
                        }
                    }
                })
            }
        }
    }
}

/// World model, policy and (for acrobot) critic, with the config that built
/// them.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: RunConfig,
    pub world: WorldModel,
    pub policy: Policy,
    pub value: Option<ValueFn>,
}

impl Agent {
    pub fn new(cfg: &RunConfig, seeds: &SeedStream) -> Self {
        let m = &cfg.model;
        let dims = ModelDims {
            encoder: cfg.encoder,
            dim_x: DIM_X,
            dim_y: STATE_DIM,
            dim_lat: m.dim_lat,
            dim_latxy: m.dim_latxy,
            enc_layers: m.enc_layers,
            dim_h: m.dim_h,
            dec_layers: m.dec_layers,
            self_loop: m.self_loop,
        };
        let world = WorldModel::new(dims, &mut seeds.rng("init-world"));
        let p = &cfg.policy;
        let policy = Policy::new(
            cfg.env,
            cfg.policy_mode,
            m.dim_lat,
            p.hidden,
            p.layers,
            &mut seeds.rng("init-policy"),
        );
        let value = (cfg.env == EnvId::Acrobot).then(|| {
            ValueFn::new(
                cfg.policy_mode,
                m.dim_lat,
                p.hidden,
                p.layers,
                &mut seeds.rng("init-value"),
            )
        });
        Self {
            config: cfg.clone(),
            world,
            policy,
            value,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.world.save_into(&mut ck);
        ck.push_params("policy", &self.policy.params);
        if let Some(v) = &self.value {
            ck.push_params("value", &v.params);
        }
        ck.metadata.insert("config".into(), self.config.to_toml());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .metadata
            .get("config")
            .ok_or_else(|| Error::Invalid("checkpoint lacks its run config".into()))?;
        let cfg = RunConfig::from_toml(text)?;
        let mut agent = Agent::new(&cfg, &SeedStream::new(cfg.seed));
        agent.world.restore_from(ck)?;
        ck.restore_params("policy", &mut agent.policy.params)?;
        if let Some(v) = &mut agent.value {
            ck.restore_params("value", &mut v.params)?;
        }
        Ok(agent)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(stem)?)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(stem)?)
    }

    /// `q(z_c)` from raw transitions of one task.
    pub fn posterior(&self, context: &[&Transition]) -> Result<DiagGaussian> {
        let (x, y) = transitions_xy(self.config.env, context);
        self.world.prior_latent(&self.world.context(&x, &y)?)
    }
}

/// At least `n` transitions from uniform-random episodes, truncated to `n`.
pub fn collect_uniform(task: &TaskSpec, n: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
    let explorer = Explorer::Uniform(task.env);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let ep = run_episode(task, rng, |s, r| explorer.act(s, r))?;
        out.extend(ep.transitions);
    }
    out.truncate(n);
    Ok(out)
}

/// Returns and one-step error of a policy on one task after inference from
/// `context` exploration transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub task: TaskSpec,
    /// Horizon-normalized undiscounted return per episode.
    pub returns: Vec<f64>,
    pub one_step_mse: f64,
}

impl TaskEval {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    pub fn std_return(&self) -> f64 {
        let m = self.mean_return();
        let n = self.returns.len().max(1) as f64;
        (self.returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n).sqrt()
    }
}

/// Exploration data of one evaluation task: the context set and a disjoint
/// query set for the one-step error, both from uniform-random episodes.
pub struct EvalData {
    pub context: Vec<Transition>,
    pub query: Vec<Transition>,
}

impl EvalData {
    pub fn collect(task: &TaskSpec, n: usize, seeds: &SeedStream) -> Result<Self> {
        Ok(Self {
            context: collect_uniform(task, n, &mut seeds.rng("context"))?,
            query: collect_uniform(task, n, &mut seeds.rng("query"))?,
        })
    }
}

/// One-step predictive MSE on the query set with the first `n_context`
/// context transitions.
pub fn context_mse(
    world: &WorldModel,
    env: EnvId,
    data: &EvalData,
    n_context: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let ctx: Vec<&Transition> = data.context.iter().take(n_context).collect();
    let (cx, cy) = transitions_xy(env, &ctx);
    let q: Vec<&Transition> = data.query.iter().collect();
    let (qx, qy) = transitions_xy(env, &q);
    one_step_mse(world, &world.context(&cx, &cy)?, &qx, &qy, k, rng)
}

/// Run `policy` on the real task with one latent draw per episode.
pub fn run_policy(
    task: &TaskSpec,
    policy: &Policy,
    posterior: &DiagGaussian,
    episodes: usize,
    seeds: &SeedStream,
) -> Result<Vec<f64>> {
    let mut latent_rng = seeds.rng("latent");
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let z: Vec<f64> = sample_latent(posterior, &mut latent_rng, 1).row(0).to_vec();
        let mut rng = seeds.indexed("episode", ep as u64);
        let traj = run_episode(task, &mut rng, |s, r| Ok(policy.act(s, &z, r)?.0))?;
        returns.push(episode_return(&traj.rewards(), 1.0, Some(task.horizon())));
    }
    Ok(returns)
}

/// Zero-shot evaluation of the agent's policy on one task.
pub fn evaluate_task(
    agent: &Agent,
    task: &TaskSpec,
    episodes: usize,
    seeds: &SeedStream,
) -> Result<TaskEval> {
    let data = EvalData::collect(task, agent.config.test.context, seeds)?;
    let ctx: Vec<&Transition> = data.context.iter().collect();
    let posterior = agent.posterior(&ctx)?;
    let mse = context_mse(
        &agent.world,
        task.env,
        &data,
        data.context.len(),
        agent.config.model.k_eval,
        &mut seeds.rng("mse"),
    )?;
    let returns = run_policy(task, &agent.policy, &posterior, episodes, seeds)?;
    Ok(TaskEval {
        task: *task,
        returns,
        one_step_mse: mse,
    })
}

/// Held-out tasks used by the per-iteration offline evaluation.
pub fn eval_tasks(cfg: &RunConfig) -> Vec<TaskSpec> {
    held_out(cfg, "eval-task", EVAL_TASK_BASE, cfg.train.eval_tasks)
}

/// Unseen tasks used by the meta-test protocols.
pub fn test_tasks(cfg: &RunConfig, n: usize) -> Vec<TaskSpec> {
    held_out(cfg, "test-task", TEST_TASK_BASE, n)
}

fn held_out(cfg: &RunConfig, name: &str, base: u64, n: usize) -> Vec<TaskSpec> {
    // Held-out tasks depend only on the seed, so agents trained with
    // different encoders or policy modes meet the same tasks.
    let seeds = SeedStream::new(cfg.seed);
    (0..n)
        .map(|i| {
            let mut t = sample_task(cfg.env, &mut seeds.indexed(name, i as u64));
            t.seed = base + i as u64;
            t
        })
        .collect()
}

pub struct TrainOutcome {
    pub agent: Agent,
    pub log: Vec<IterationLog>,
    pub timing: Vec<TimingRow>,
}

pub fn run_id(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-{}-s{}",
        cfg.env, cfg.encoder, cfg.policy_mode, cfg.seed
    )
}

struct Optimizers {
    world: AdamState,
    policy: AdamState,
    value: Option<AdamState>,
}

/// Meta-training. When `out` is given, the effective config, the training
/// and timing logs and checkpoints are written there as the run proceeds.
pub fn meta_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seeds = SeedStream::new(cfg.seed);
    let mut agent = Agent::new(cfg, &seeds);
    let mut opt = Optimizers {
        world: AdamState::new(&agent.world.params),
        policy: AdamState::new(&agent.policy.params),
        value: agent.value.as_ref().map(|v| AdamState::new(&v.params)),
    };
    let held = eval_tasks(cfg);
    let mut task_rng = seeds.rng("tasks");
    let mut buffer = MemoryBuffer::new(cfg.train.buffer_episodes);
    let id = run_id(cfg);
    let mut writers = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(EFFECTIVE_CONFIG);
            fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
            Some((
                CsvAppender::create(&dir.join(TRAIN_LOG), "train_log", TRAIN_LOG_VERSION)?,
                CsvAppender::create(&dir.join(TIMING_LOG), "timing", TIMING_LOG_VERSION)?,
            ))
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut timing = Vec::with_capacity(cfg.iterations);
    let mut task = sample_task(cfg.env, &mut task_rng);
    for it in 0..cfg.iterations {
        if it > 0 && it % cfg.train.resample_every == 0 {
            task = sample_task(cfg.env, &mut task_rng);
        }
        let it_seeds = seeds.child("iteration", it as u64);
        let mut row = IterationLog {
            run_id: id.clone(),
            iteration: it,
            task_id: task.seed,
            m0: task.masses[0],
            m1: task.masses[1],
            env_steps: 0,
            explore_return: f64::NAN,
            avg_return_normalized: f64::NAN,
            elbo_loss: f64::NAN,
            nll: f64::NAN,
            kl: f64::NAN,
            policy_objective: f64::NAN,
            policy_loss: f64::NAN,
            value_loss: f64::NAN,
            entropy: f64::NAN,
            grad_norm: f64::NAN,
            policy_updates: 0,
            skipped_updates: 0,
            status: "ok".into(),
        };
        match train_iteration(
            &mut agent,
            &mut opt,
            &mut buffer,
            &task,
            it,
            &it_seeds,
            &mut row,
        ) {
            Ok(()) => {}
            Err(e @ (Error::Numeric(_) | Error::NonFinite { .. } | Error::Autodiff(_))) => {
                eprintln!("iteration {it}: aborted: {e}");
                row.status = format!("aborted: {e}");
            }
            Err(e) => return Err(e),
        }
        row.env_steps = buffer.total();
        row.avg_return_normalized = offline_eval(&agent, &held, &it_seeds)?;
        let wall = TimingRow {
            run_id: id.clone(),
            iteration: it,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if let Some((train_w, time_w)) = &mut writers {
            train_w.push(&row)?;
            time_w.push(&wall)?;
        }
        log.push(row);
        timing.push(wall);
        if let Some(dir) = out {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (it + 1) % every == 0 {
                agent.save(&dir.join("checkpoints").join(format!("iter_{:04}", it + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        agent.save(&dir.join("agent"))?;
    }
    Ok(TrainOutcome { agent, log, timing })
}

/// Mean normalized return over the held-out tasks; NaN when the policy
/// produces non-finite actions.
fn offline_eval(agent: &Agent, tasks: &[TaskSpec], seeds: &SeedStream) -> Result<f64> {
    let cfg = &agent.config;
    let mut total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let s = seeds.child("eval", i as u64);
        let data = EvalData::collect(task, cfg.test.context, &s)?;
        let ctx: Vec<&Transition> = data.context.iter().collect();
        let result = agent
            .posterior(&ctx)
            .and_then(|q| run_policy(task, &agent.policy, &q, cfg.train.eval_episodes, &s));
        match result {
            Ok(r) => total += r.iter().sum::<f64>() / r.len().max(1) as f64,
            Err(Error::Numeric(_) | Error::NonFinite { .. } | Error::Invalid(_)) => {
                return Ok(f64::NAN)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(total / tasks.len().max(1) as f64)
}

fn train_iteration(
    agent: &mut Agent,
    opt: &mut Optimizers,
    buffer: &mut MemoryBuffer,
    task: &TaskSpec,
    it: usize,
    seeds: &SeedStream,
    row: &mut IterationLog,
) -> Result<()> {
    let cfg = agent.config.clone();
    // Explore: uniform actions early and on a task with no data yet,
    // otherwise the current policy under a posterior sample.
    let mut rng = seeds.rng("explore");
    let have = buffer.task_len(task.seed);
    let episode = if it < cfg.train.random_iterations || have == 0 {
        run_episode(task, &mut rng, |s, r| Explorer::Uniform(task.env).act(s, r))?
    } else {
        let n = have.min(cfg.model.context_max);
        let ctx = buffer.sample_context(task.seed, n, &mut rng)?;
        let q = agent.posterior(&ctx)?;
        let z = sample_latent(&q, &mut rng, 1).row(0).to_vec();
        let explorer = exploration_policy(
            ExplorationMode::PolicyWithNoise,
            task.env,
            Some((&agent.policy, z)),
            cfg.policy.exploration_noise,
        )?;
        run_episode(task, &mut rng, |s, r| explorer.act(s, r))?
    };
    row.explore_return = episode_return(&episode.rewards(), 1.0, Some(task.horizon()));
    buffer.push(episode)?;

    let all = buffer.all_transitions();
    let (xs, ys) = transitions_xy(cfg.env, &all);
    agent.world.norm = fit_normalization(&xs, &ys)?;

    let report = world_updates(agent, &mut opt.world, buffer, &mut seeds.rng("elbo"))?;
    row.elbo_loss = report.loss;
    row.nll = report.nll;
    row.kl = report.kl;

    match cfg.env {
        EnvId::Cartpole => bptt_updates(agent, opt, buffer, &mut seeds.rng("policy"), row),
        EnvId::Acrobot => ppo_rounds(agent, opt, buffer, &mut seeds.rng("policy"), row),
    }
}

/// Task items for one ELBO update, in normalized units.
fn elbo_items(agent: &Agent, buffer: &MemoryBuffer, rng: &mut Rng) -> Result<Vec<TaskBatch>> {
    let m = &agent.config.model;
    let ids: Vec<u64> = buffer
        .task_ids()
        .into_iter()
        .filter(|&t| buffer.task_len(t) >= 2)
        .collect();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let mut items = Vec::with_capacity(m.tasks_per_update);
    for _ in 0..m.tasks_per_update {
        let id = ids[rng.random_range(0..ids.len())];
        let ts = buffer.transitions(id);
        let (ci, mut ti) = split_context_target(ts.len(), m.context_min, m.context_max, rng)?;
        ti.truncate(m.max_targets);
        let pick = |idx: &[usize]| -> Vec<&Transition> { idx.iter().map(|&i| ts[i]).collect() };
        let (cx, cy) = transitions_xy(agent.config.env, &pick(&ci));
        let (tx, ty) = transitions_xy(agent.config.env, &pick(&ti));
        let norm = &agent.world.norm;
        items.push(TaskBatch {
            task: id,
            context_x: norm.x.apply(&cx),
            context_y: norm.y.apply(&cy),
            target_x: norm.x.apply(&tx),
            target_y: norm.y.apply(&ty),
        });
    }
    Ok(items)
}

fn world_updates(
    agent: &mut Agent,
    opt: &mut AdamState,
    buffer: &MemoryBuffer,
    rng: &mut Rng,
) -> Result<ElboReport> {
    let m = agent.config.model.clone();
    let adam = AdamConfig {
        lr: m.lr,
        ..AdamConfig::default()
    };
    let mut mean = ElboReport::default();
    let mut done = 0;
    for _ in 0..m.updates {
        let items = elbo_items(agent, buffer, rng)?;
        let mut tape = Tape::new();
        let bound = agent.world.params.bind(&mut tape);
        let (loss, report) = elbo_loss(&mut tape, &agent.world, &bound, &items, m.k_train, rng)?;
        let Some(loss) = loss else { continue };
        let mut grads = bound.grads(&tape.backward(loss)?);
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite ELBO gradient".into()));
        }
        clip_global_norm(&mut grads, m.grad_clip);
        adam_step(&mut agent.world.params, &grads, opt, &adam);
        mean.loss += report.loss;
        mean.nll += report.nll;
        mean.kl += report.kl;
        mean.tasks += report.tasks;
        mean.skipped += report.skipped;
        done += 1;
    }
    if done > 0 {
        let k = done as f64;
        mean.loss /= k;
        mean.nll /= k;
        mean.kl /= k;
    } else {
        mean.loss = f64::NAN;
        mean.nll = f64::NAN;
        mean.kl = f64::NAN;
    }
    Ok(mean)
}

/// Start states and latents for policy search: each row picks a task from
/// the buffer, a state of that task and a posterior sample from a random
/// context of that task.
fn policy_batch(
    agent: &Agent,
    buffer: &MemoryBuffer,
    rows: usize,
    rng: &mut Rng,
) -> Result<(Vec<State>, Vec<Vec<f64>>)> {
    let m = &agent.config.model;
    let ids = buffer.task_ids();
    let groups = m.tasks_per_update.min(rows).max(1);
    let mut latents = Vec::with_capacity(groups);
    let mut pools = Vec::with_capacity(groups);
    for _ in 0..groups {
        let id = ids[rng.random_range(0..ids.len())];
        let len = buffer.task_len(id);
        let n = rng
            .random_range(m.context_min.min(len)..=m.context_max.min(len))
            .max(1);
        let ctx = buffer.sample_context(id, n, rng)?;
        let q = agent.posterior(&ctx)?;
        latents.push(sample_latent(&q, rng, 1).row(0).to_vec());
        pools.push(buffer.transitions(id));
    }
    let mut starts = Vec::with_capacity(rows);
    let mut zs = Vec::with_capacity(rows);
    for i in 0..rows {
        let g = i % groups;
        let pool = &pools[g];
        starts.push(pool[rng.random_range(0..pool.len())].state);
        zs.push(latents[g].clone());
    }
    Ok((starts, zs))
}

fn rows_matrix<const N: usize>(rows: &[[f64; N]]) -> Matrix {
    Matrix::from_shape_fn((rows.len(), N), |(i, j)| rows[i][j])
}

fn latent_matrix(rows: &[Vec<f64>]) -> Matrix {
    let d = rows.first().map_or(0, Vec::len);
    Matrix::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

fn bptt_config(cfg: &RunConfig) -> BpttConfig {
    BpttConfig {
        horizon: cfg.policy.horizon,
        gamma: cfg.policy.gamma,
        stochastic: true,
        clip: cfg.policy.grad_clip,
    }
}

fn bptt_updates(
    agent: &mut Agent,
    opt: &mut Optimizers,
    buffer: &MemoryBuffer,
    rng: &mut Rng,
    row: &mut IterationLog,
) -> Result<()> {
    let cfg = agent.config.clone();
    let adam = AdamConfig {
        lr: cfg.policy.lr,
        ..AdamConfig::default()
    };
    let bcfg = bptt_config(&cfg);
    let width = cfg.policy.train_reward_width;
    let reward = move |t: &mut Tape, s| cartpole_reward_with_width(t, s, width);
    let (mut objective, mut norm, mut n) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.policy.updates {
        let (starts, zs) = policy_batch(agent, buffer, cfg.policy.batch, rng)?;
        let model = LearnedModel::new(&agent.world, cfg.env);
        let r = bptt_update(
            &mut agent.policy,
            &mut opt.policy,
            &adam,
            &model,
            &rows_matrix(&starts),
            &latent_matrix(&zs),
            &bcfg,
            &reward,
            rng,
        )?;
        if r.skipped {
            row.skipped_updates += 1;
            continue;
        }
        objective += r.objective;
        norm += r.grad_norm;
        n += 1;
    }
    row.policy_updates = n;
    if n > 0 {
        row.policy_objective = objective / n as f64;
        row.policy_loss = -row.policy_objective;
        row.grad_norm = norm / n as f64;
    }
    Ok(())
}

fn ppo_config(cfg: &RunConfig) -> PpoConfig {
    let p = &cfg.policy;
    PpoConfig {
        clip: p.ppo.clip,
        epochs: p.ppo.epochs,
        minibatch: p.ppo.minibatch,
        entropy_coef: p.ppo.entropy_coef,
        value_coef: p.ppo.value_coef,
        lambda: p.ppo.lambda,
        gamma: p.gamma,
        rollout_len: p.horizon,
        rollouts: p.ppo.rollouts,
        max_grad_norm: p.grad_clip,
    }
}

fn ppo_rounds(
    agent: &mut Agent,
    opt: &mut Optimizers,
    buffer: &MemoryBuffer,
    rng: &mut Rng,
    row: &mut IterationLog,
) -> Result<()> {
    let cfg = agent.config.clone();
    let adam = AdamConfig {
        lr: cfg.policy.lr,
        ..AdamConfig::default()
    };
    let pcfg = ppo_config(&cfg);
    let mut sums = [0.0; 5];
    let mut rounds = 0usize;
    for _ in 0..cfg.policy.updates {
        let (starts, zs) = policy_batch(agent, buffer, pcfg.rollouts, rng)?;
        let model = LearnedModel::new(&agent.world, cfg.env);
        let value = agent.value.as_mut().expect("acrobot agents carry a critic");
        let batch =
            collect_model_rollouts(&model, &agent.policy, value, &starts, &zs, &pcfg, true, rng)?;
        let mean_reward = -(batch.len() as f64) / (pcfg.rollouts * pcfg.rollout_len) as f64;
        let opt_v = opt.value.as_mut().expect("critic optimizer");
        let r = ppo_update(
            &mut agent.policy,
            value,
            (&mut opt.policy, opt_v),
            &adam,
            &batch,
            &pcfg,
            rng,
        )?;
        row.skipped_updates += r.dropped;
        if r.updates == 0 {
            continue;
        }
        sums[0] += mean_reward;
        sums[1] += r.policy_loss;
        sums[2] += r.value_loss;
        sums[3] += r.entropy;
        sums[4] += r.grad_norm;
        rounds += 1;
    }
    row.policy_updates = rounds;
    if rounds > 0 {
        let k = rounds as f64;
        row.policy_objective = sums[0] / k;
        row.policy_loss = sums[1] / k;
        row.value_loss = sums[2] / k;
        row.entropy = sums[3] / k;
        row.grad_norm = sums[4] / k;
    }
    Ok(())
}

fn test_row(
    agent: &Agent,
    mode: &str,
    eval: &TaskEval,
    steps: usize,
    fallback: bool,
    secs: f64,
) -> TestRow {
    TestRow {
        run_id: run_id(&agent.config),
        mode: mode.into(),
        task_id: eval.task.seed,
        m0: eval.task.masses[0],
        m1: eval.task.masses[1],
        mean_return: eval.mean_return(),
        std_return: eval.std_return(),
        one_step_mse: eval.one_step_mse,
        adaptation_steps: steps,
        fallback,
        wall_clock_s: secs,
    }
}

fn task_seeds(agent: &Agent, task: &TaskSpec) -> SeedStream {
    SeedStream::new(agent.config.seed).child("test", task.seed)
}

/// Zero-gradient evaluation: infer `q(z_c)` from exploration data and run
/// the policy with a fresh latent sample per episode.
///
/// Panics if any optimizer step happens during the sweep.
pub fn meta_test_amortized(agent: &Agent, tasks: &[TaskSpec]) -> Result<Vec<TestRow>> {
    let before = optimizer_steps();
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let t0 = Instant::now();
        let eval = evaluate_task(
            agent,
            task,
            agent.config.test.episodes,
            &task_seeds(agent, task),
        )?;
        rows.push(test_row(
            agent,
            agent.config.policy_mode.as_str(),
            &eval,
            0,
            false,
            t0.elapsed().as_secs_f64(),
        ));
    }
    assert_eq!(
        optimizer_steps(),
        before,
        "amortized evaluation took optimizer steps"
    );
    Ok(rows)
}

/// Mean normalized return of `policy` inside the learned model from the
/// given starts, with the mean latent.
fn imagined_return(
    world: &WorldModel,
    env: EnvId,
    policy: &Policy,
    starts: &[State],
    z: &[f64],
    rng: &mut Rng,
) -> Result<f64> {
    let model = LearnedModel::new(world, env);
    let zm = latent_matrix(&vec![z.to_vec(); starts.len()]);
    let mut s = rows_matrix(starts);
    let horizon = env.horizon();
    let mut total = 0.0;
    let mut live = vec![true; starts.len()];
    for _ in 0..horizon {
        let out = policy.infer(&s, &zm)?;
        let a = match env {
            EnvId::Cartpole => out,
            EnvId::Acrobot => Matrix::from_shape_fn((starts.len(), 1), |(i, _)| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = acrobot::TORQUES.len() - 1;
                for (k, l) in out.row(i).iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                acrobot::TORQUES[pick]
            }),
        };
        s = model.next_values(&s, &a, &zm, None)?;
        for (i, alive) in live.iter_mut().enumerate() {
            let st: State = std::array::from_fn(|j| s[[i, j]]);
            match env {
                EnvId::Cartpole => {
                    total += cartpole::reward(&st, cartpole::CartPoleConsts::default().pole_length)
                }
                EnvId::Acrobot => {
                    if *alive {
                        total -= 1.0;
                        *alive = !acrobot::is_terminal(&st);
                    }
                }
            }
        }
    }
    Ok(total / (horizon * starts.len()) as f64)
}

/// Fine-tuning baseline: per task, `k` policy updates inside the learned
/// model conditioned on the task posterior, then evaluation of the tuned
/// copy. The agent is not modified. If the tuned policy's imagined return
/// falls by more than half of the original's magnitude, the original policy
/// is evaluated instead and the row is marked.
pub fn meta_test_finetune(agent: &Agent, tasks: &[TaskSpec], k: usize) -> Result<Vec<TestRow>> {
    let cfg = &agent.config;
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let t0 = Instant::now();
        let seeds = task_seeds(agent, task);
        let data = EvalData::collect(task, cfg.test.context, &seeds)?;
        let ctx: Vec<&Transition> = data.context.iter().collect();
        let q = agent.posterior(&ctx)?;
        let starts: Vec<State> = data.context.iter().map(|t| t.state).collect();
        let mut rng = seeds.rng("finetune");
        let mut policy = agent.policy.clone();
        let mut steps = 0;
        if k > 0 {
            let mut opt = AdamState::new(&policy.params);
            let adam = AdamConfig {
                lr: cfg.policy.lr,
                ..AdamConfig::default()
            };
            let model = LearnedModel::new(&agent.world, task.env);
            match task.env {
                EnvId::Cartpole => {
                    let bcfg = bptt_config(cfg);
                    let width = cfg.policy.train_reward_width;
                    let reward = move |t: &mut Tape, s| cartpole_reward_with_width(t, s, width);
                    for _ in 0..k {
                        let pick: Vec<State> = (0..cfg.policy.batch)
                            .map(|_| starts[rng.random_range(0..starts.len())])
                            .collect();
                        let z = sample_latent(&q, &mut rng, pick.len());
                        bptt_update(
                            &mut policy,
                            &mut opt,
                            &adam,
                            &model,
                            &rows_matrix(&pick),
                            &z,
                            &bcfg,
                            &reward,
                            &mut rng,
                        )?;
                        steps += 1;
                    }
                }
                EnvId::Acrobot => {
                    let pcfg = ppo_config(cfg);
                    let mut value = agent.value.clone().expect("acrobot agents carry a critic");
                    let mut opt_v = AdamState::new(&value.params);
                    for _ in 0..k {
                        let pick: Vec<State> = (0..pcfg.rollouts)
                            .map(|_| starts[rng.random_range(0..starts.len())])
                            .collect();
                        let zs: Vec<Vec<f64>> = (0..pick.len())
                            .map(|_| sample_latent(&q, &mut rng, 1).row(0).to_vec())
                            .collect();
                        let batch = collect_model_rollouts(
                            &model, &policy, &value, &pick, &zs, &pcfg, true, &mut rng,
                        )?;
                        ppo_update(
                            &mut policy,
                            &mut value,
                            (&mut opt, &mut opt_v),
                            &adam,
                            &batch,
                            &pcfg,
                            &mut rng,
                        )?;
                        steps += 1;
                    }
                }
            }
        }
        let mut fallback = false;
        if steps > 0 {
            let probe: Vec<State> = starts.iter().take(cfg.policy.batch).copied().collect();
            let before = imagined_return(
                &agent.world,
                task.env,
                &agent.policy,
                &probe,
                &q.mean,
                &mut seeds.rng("probe"),
            )?;
            let after = imagined_return(
                &agent.world,
                task.env,
                &policy,
                &probe,
                &q.mean,
                &mut seeds.rng("probe"),
            );
            let collapsed = match after {
                Ok(a) => a < before - 0.5 * before.abs(),
                Err(_) => true,
            };
            if collapsed {
                policy = agent.policy.clone();
                fallback = true;
            }
        }
        let mse = context_mse(
            &agent.world,
            task.env,
            &data,
            data.context.len(),
            cfg.model.k_eval,
            &mut seeds.rng("mse"),
        )?;
        let returns = run_policy(task, &policy, &q, cfg.test.episodes, &seeds)?;
        let eval = TaskEval {
            task: *task,
            returns,
            one_step_mse: mse,
        };
        rows.push(test_row(
            agent,
            "finetune",
            &eval,
            steps,
            fallback,
            t0.elapsed().as_secs_f64(),
        ));
    }
    Ok(rows)
}
