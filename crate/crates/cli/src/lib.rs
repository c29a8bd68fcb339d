//! `gssm` command line: train, test, ablation, latent-dimension sweep,
//! bound verification and a micro-scale smoke run.
//!
//! Failures print one line `error category=<name>: <message>` to stderr and
//! exit with 2 for configuration errors or 3 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gssm_core::bounds::{bound_sweep, sample_pair, theorem1_check, SweepSizes};
use gssm_core::config::{resolve, Overrides, RunConfig, OUT_DIR_VAR};
use gssm_core::encoder::EncoderKind;
use gssm_core::envs::EnvId;
use gssm_core::meta::{meta_test_amortized, meta_test_finetune, meta_train, test_tasks, Agent};
use gssm_core::metrics::{
    write_csv, BoundRow, TestRow, BOUND_REPORT, BOUND_REPORT_VERSION, TEST_RESULTS,
    TEST_RESULTS_VERSION,
};
use gssm_core::policy::PolicyMode;
use gssm_core::rng::SeedStream;
use gssm_core::{Error, Result};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gssm",
    version,
    about = "Model-based meta-RL with graph-structured surrogate models"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; missing keys take the environment's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub env: Option<EnvId>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Meta-training iterations.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub encoder: Option<EncoderKind>,
    #[arg(long, global = true)]
    pub policy_mode: Option<PolicyMode>,
    /// Output directory; falls back to the file, then GSSM_OUT_DIR.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint stem (without extension) for `test`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train and write the training log and checkpoints.
    Train,
    /// Evaluate a checkpoint on unseen tasks.
    Test {
        /// Fine-tuning steps for non-amortized policies.
        #[arg(long)]
        finetune_steps: Option<usize>,
    },
    /// Train and test amortized and non-amortized policies with a matched
    /// budget.
    Ablation,
    /// Train and test one agent per latent dimension.
    SweepLatentDim {
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
        dims: Vec<usize>,
    },
    /// Verify the performance-gap and regret bounds on random tabular MDPs.
    Bounds {
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 10_000)]
        policies: usize,
        #[arg(long, default_value_t = 500)]
        theorem_pairs: usize,
    },
    /// Run the whole pipeline at micro scale.
    Smoke,
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "error category={}: {}",
                e.category(),
                single_line(&e.to_string())
            );
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.category() == "config" {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Resolve the run config from the file, flags and environment.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(path) => Some(
            fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let overrides = Overrides {
        env: common.env,
        seed: common.seed,
        iterations: common.iters,
        encoder: common.encoder,
        policy_mode: common.policy_mode,
        out_dir: common.out.clone(),
    };
    let env_out = std::env::var(OUT_DIR_VAR).ok();
    resolve(text.as_deref(), &overrides, env_out.as_deref())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(&cli.common)?;
            train(&cfg, &cfg.out_dir).map(|_| ())
        }
        Command::Test { finetune_steps } => {
            let cfg = load_config(&cli.common)?;
            let stem = cli
                .common
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("agent"));
            let agent = Agent::load(&stem)?;
            let rows = test(
                &agent,
                finetune_steps.unwrap_or(agent.config.test.finetune_steps),
            )?;
            write_results(&cfg.out_dir, &rows)
        }
        Command::Ablation => {
            let cfg = load_config(&cli.common)?;
            let mut all = Vec::new();
            for mode in [PolicyMode::Amortized, PolicyMode::Ablation] {
                let mut c = cfg.clone();
                c.policy_mode = mode;
                let dir = cfg.out_dir.join(mode.as_str());
                let agent = train(&c, &dir)?;
                // Both arms are evaluated zero-shot so the comparison isolates
                // the latent input of the policy.
                let rows = meta_test_amortized(&agent, &test_tasks(&c, c.test.tasks))?;
                write_results(&dir, &rows)?;
                all.extend(rows);
            }
            write_results(&cfg.out_dir, &all)
        }
        Command::SweepLatentDim { dims } => {
            let cfg = load_config(&cli.common)?;
            let mut all = Vec::new();
            for &d in dims {
                let mut c = cfg.clone();
                c.model.dim_lat = d;
                c.validate()?;
                let dir = cfg.out_dir.join(format!("dim_lat_{d}"));
                let agent = train(&c, &dir)?;
                let rows = test(&agent, c.test.finetune_steps)?;
                write_results(&dir, &rows)?;
                all.extend(rows);
            }
            write_results(&cfg.out_dir, &all)
        }
        Command::Bounds {
            pairs,
            policies,
            theorem_pairs,
        } => {
            let cfg = load_config(&cli.common)?;
            bounds(&cfg.out_dir, cfg.seed, *pairs, *policies, *theorem_pairs)
        }
        Command::Smoke => {
            let cfg = load_config(&cli.common)?;
            smoke(&cfg)
        }
    }
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<Agent> {
    let outcome = meta_train(cfg, Some(dir))?;
    let last = outcome
        .log
        .last()
        .map_or(f64::NAN, |r| r.avg_return_normalized);
    println!(
        "trained {} iterations into {} (final held-out return {last:.4})",
        outcome.log.len(),
        dir.display()
    );
    Ok(outcome.agent)
}

/// Amortized agents are evaluated zero-shot; non-amortized agents are
/// fine-tuned for `k` steps per task.
fn test(agent: &Agent, k: usize) -> Result<Vec<TestRow>> {
    let tasks = test_tasks(&agent.config, agent.config.test.tasks);
    match agent.config.policy_mode {
        PolicyMode::Amortized => meta_test_amortized(agent, &tasks),
        PolicyMode::Ablation => meta_test_finetune(agent, &tasks, k),
    }
}

fn write_results(dir: &Path, rows: &[TestRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TEST_RESULTS);
    write_csv(&path, "test_results", TEST_RESULTS_VERSION, rows)?;
    let mean = rows.iter().map(|r| r.mean_return).sum::<f64>() / rows.len().max(1) as f64;
    println!(
        "wrote {} ({} tasks, mean return {mean:.4})",
        path.display(),
        rows.len()
    );
    Ok(())
}

fn bounds(
    dir: &Path,
    seed: u64,
    pairs: usize,
    policies: usize,
    theorem_pairs: usize,
) -> Result<()> {
    let seeds = SeedStream::new(seed);
    let sizes = SweepSizes::default();
    let reports = bound_sweep(pairs, policies, &sizes, &mut seeds.rng("bound-sweep"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<BoundRow> = reports.iter().map(BoundRow::from).collect();
    let path = dir.join(BOUND_REPORT);
    write_csv(&path, "bound_report", BOUND_REPORT_VERSION, &rows)?;
    let mut rng = seeds.rng("theorem-pairs");
    let sample: Vec<_> = (0..theorem_pairs)
        .map(|_| sample_pair(&sizes, &mut rng))
        .collect::<Result<_>>()?;
    let t = theorem1_check(&sample)?;
    let lemma_violations: usize = reports.iter().map(|r| r.violations).sum();
    println!(
        "wrote {} ({pairs} pairs x {policies} policies)",
        path.display()
    );
    println!("gap bound violations: {lemma_violations}");
    println!(
        "regret bound: {} per-pair violations over {} pairs; mean regret {:.6} vs averaged bound {:.6}",
        t.per_pair_violations, t.pairs, t.mean_regret, t.averaged_bound
    );
    if lemma_violations > 0 || t.per_pair_violations > 0 || t.averaged_violation {
        return Err(Error::Numeric("bound violated".into()));
    }
    Ok(())
}

/// Micro-scale config for the smoke run.
pub fn smoke_config(base: &RunConfig) -> RunConfig {
    let mut c = base.clone();
    c.iterations = 3;
    c.model.dim_lat = 4;
    c.model.dim_latxy = 8;
    c.model.enc_layers = 1;
    c.model.dim_h = 32;
    c.model.dec_layers = 2;
    c.model.updates = 2;
    c.model.tasks_per_update = 2;
    c.model.k_eval = 4;
    c.policy.hidden = 16;
    c.policy.layers = 1;
    c.policy.updates = 2;
    c.policy.batch = 4;
    c.policy.horizon = 10;
    c.policy.ppo.rollouts = 4;
    c.policy.ppo.epochs = 2;
    c.train.eval_tasks = 1;
    c.train.eval_episodes = 2;
    c.train.checkpoint_every = 2;
    c.test.tasks = 2;
    c.test.episodes = 2;
    c.test.context = 10;
    c.test.finetune_steps = 1;
    c
}

fn smoke(base: &RunConfig) -> Result<()> {
    let root = base.out_dir.join("smoke");
    for env in [EnvId::Cartpole, EnvId::Acrobot] {
        let mut cfg = smoke_config(&RunConfig::defaults(env));
        cfg.seed = base.seed;
        for mode in [PolicyMode::Amortized, PolicyMode::Ablation] {
            cfg.policy_mode = mode;
            let dir = root.join(format!("{env}-{mode}"));
            train(&cfg, &dir)?;
            let agent = Agent::load(&dir.join("agent"))?;
            let rows = test(&agent, cfg.test.finetune_steps)?;
            write_results(&dir, &rows)?;
        }
    }
    bounds(&root, base.seed, 5, 100, 20)
}
