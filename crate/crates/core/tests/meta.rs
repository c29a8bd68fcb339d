use gssm_autodiff::optimizer_steps;
use gssm_core::config::RunConfig;
use gssm_core::envs::run_episode;
use gssm_core::envs::{sample_task, Action, EnvId, TaskSpec};
use gssm_core::meta::{
    collect_uniform, evaluate_task, exploration_policy, meta_test_amortized, meta_test_finetune,
    meta_train, split_context_target, test_tasks, Agent, ExplorationMode, Explorer, MemoryBuffer,
};
use gssm_core::metrics::{read_csv, IterationLog, TRAIN_LOG, TRAIN_LOG_VERSION};
use gssm_core::policy::PolicyMode;
use gssm_core::rng::SeedStream;
use proptest::prelude::*;

fn tiny(env: EnvId, seed: u64) -> RunConfig {
    let mut c = RunConfig::defaults(env);
    c.seed = seed;
    c.iterations = 3;
    c.model.dim_lat = 3;
    c.model.dim_latxy = 6;
    c.model.enc_layers = 1;
    c.model.dim_h = 16;
    c.model.dec_layers = 2;
    c.model.updates = 2;
    c.model.tasks_per_update = 2;
    c.model.k_eval = 4;
    c.policy.hidden = 8;
    c.policy.layers = 1;
    c.policy.updates = 2;
    c.policy.batch = 4;
    c.policy.horizon = 5;
    c.policy.ppo.rollouts = 3;
    c.policy.ppo.epochs = 2;
    c.train.resample_every = 2;
    c.train.eval_tasks = 1;
    c.train.eval_episodes = 2;
    c.train.checkpoint_every = 0;
    c.test.tasks = 2;
    c.test.episodes = 3;
    c.test.context = 10;
    c
}

#[test]
fn two_transitions_split_into_one_and_one() {
    let mut rng = SeedStream::new(1).rng("split");
    for _ in 0..20 {
        let (c, t) = split_context_target(2, 5, 50, &mut rng).unwrap();
        assert_eq!((c.len(), t.len()), (1, 1));
        assert_ne!(c[0], t[0]);
    }
    assert!(split_context_target(1, 1, 5, &mut rng).is_err());
    assert!(split_context_target(0, 1, 5, &mut rng).is_err());
}

#[test]
fn context_sizes_are_uniform_over_the_range() {
    let mut rng = SeedStream::new(2).rng("split");
    let (lo, hi) = (5usize, 50usize);
    let draws = 10_000;
    let mut counts = vec![0usize; hi + 1];
    for _ in 0..draws {
        let (c, _) = split_context_target(200, lo, hi, &mut rng).unwrap();
        counts[c.len()] += 1;
    }
    let bins = (hi - lo + 1) as f64;
    let p = 1.0 / bins;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    assert!(counts[..lo].iter().all(|&c| c == 0));
    for (size, &c) in counts.iter().enumerate().skip(lo) {
        assert!(
            (c as f64 - expect).abs() <= 3.0 * sigma,
            "size {size}: {c} vs {expect:.1} ± {sigma:.1}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn splits_are_disjoint_and_cover_the_data(seed in any::<u64>(), n in 2usize..300, lo in 1usize..60, extra in 0usize..60) {
        let mut rng = SeedStream::new(seed).rng("split");
        let (c, t) = split_context_target(n, lo, lo + extra, &mut rng).unwrap();
        prop_assert!(!c.is_empty() && !t.is_empty());
        prop_assert!(c.len() <= (lo + extra).max(1));
        let mut all: Vec<usize> = c.iter().chain(&t).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

fn episode(task: &TaskSpec, seed: u64) -> gssm_core::envs::Trajectory {
    let mut rng = SeedStream::new(seed).rng("ep");
    run_episode(task, &mut rng, |s, r| Explorer::Uniform(task.env).act(s, r)).unwrap()
}

#[test]
fn buffer_keeps_recent_episodes_and_isolates_tasks() {
    let mut rng = SeedStream::new(3).rng("tasks");
    let a = sample_task(EnvId::Cartpole, &mut rng);
    let b = sample_task(EnvId::Cartpole, &mut rng);
    let mut buf = MemoryBuffer::new(20);
    for i in 0..25 {
        buf.push(episode(&a, i)).unwrap();
    }
    buf.push(episode(&b, 99)).unwrap();
    assert_eq!(buf.episodes(a.seed), 20);
    assert_eq!(buf.task_len(a.seed), 20 * 25);
    assert_eq!(buf.total(), 21 * 25);
    // the oldest five episodes were dropped
    let first = buf.transitions(a.seed)[0].state;
    assert_eq!(first, episode(&a, 5).transitions[0].state);
    let mut r = SeedStream::new(3).rng("ctx");
    for _ in 0..50 {
        let ctx = buf.sample_context(b.seed, 25, &mut r).unwrap();
        assert!(ctx.iter().all(|t| t.task == b.seed));
    }
    assert!(buf.sample_context(b.seed, 26, &mut r).is_err());

    let mut forged = episode(&a, 1);
    forged.transitions[3].task = b.seed;
    assert!(buf.push(forged).is_err());
}

#[test]
fn uniform_exploration_covers_the_action_ranges() {
    let mut rng = SeedStream::new(4).rng("explore");
    let cart =
        exploration_policy(ExplorationMode::UniformRandom, EnvId::Cartpole, None, 0.0).unwrap();
    let n = 20_000;
    let mut sum = 0.0;
    let mut lo_hi = (0.0f64, 0.0f64);
    for _ in 0..n {
        match cart.act(&[0.0; 4], &mut rng).unwrap() {
            Action::Force(f) => {
                assert!((-10.0..=10.0).contains(&f));
                sum += f;
                lo_hi = (lo_hi.0.min(f), lo_hi.1.max(f));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    // uniform on [-10, 10] has std 10/sqrt(3)
    assert!((sum / n as f64).abs() < 3.0 * 10.0 / 3f64.sqrt() / (n as f64).sqrt());
    assert!(lo_hi.0 < -9.9 && lo_hi.1 > 9.9);

    let acro =
        exploration_policy(ExplorationMode::UniformRandom, EnvId::Acrobot, None, 0.0).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..n {
        match acro.act(&[0.0; 4], &mut rng).unwrap() {
            Action::Torque(i) => counts[i] += 1,
            other => panic!("unexpected {other:?}"),
        }
    }
    let p = 1.0 / 3.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn policy_exploration_matches_act_and_adds_noise() {
    for env in [EnvId::Cartpole, EnvId::Acrobot] {
        let agent = Agent::new(&tiny(env, 5), &SeedStream::new(5));
        let z = vec![0.1, -0.2, 0.3];
        assert!(exploration_policy(ExplorationMode::PolicyWithNoise, env, None, 0.1).is_err());
        let quiet = exploration_policy(
            ExplorationMode::PolicyWithNoise,
            env,
            Some((&agent.policy, z.clone())),
            0.0,
        )
        .unwrap();
        let mut r1 = SeedStream::new(5).rng("a");
        let mut r2 = SeedStream::new(5).rng("a");
        for i in 0..30 {
            let s = [0.1 * i as f64, -0.3, 0.2, 0.05 * i as f64];
            let a = quiet.act(&s, &mut r1).unwrap();
            let (expect, _) = agent.policy.act(&s, &z, &mut r2).unwrap();
            assert_eq!(a, expect);
        }
        let noisy = exploration_policy(
            ExplorationMode::PolicyWithNoise,
            env,
            Some((&agent.policy, z.clone())),
            0.5,
        )
        .unwrap();
        let mut r = SeedStream::new(6).rng("b");
        let mut differs = 0;
        for i in 0..200 {
            let s = [0.01 * i as f64, 0.4, -0.2, 0.0];
            let a = noisy.act(&s, &mut r).unwrap();
            let (b, _) = agent
                .policy
                .act(&s, &z, &mut SeedStream::new(7).indexed("c", i))
                .unwrap();
            match (env, a) {
                (EnvId::Cartpole, Action::Force(f)) => assert!(f.abs() <= 10.0),
                (EnvId::Acrobot, Action::Torque(t)) => assert!(t < 3),
                other => panic!("unexpected {other:?}"),
            }
            differs += usize::from(a != b);
        }
        assert!(differs > 0);
    }
}

#[test]
fn training_logs_one_row_per_iteration_and_is_deterministic() {
    for env in [EnvId::Cartpole, EnvId::Acrobot] {
        let cfg = tiny(env, 7);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = meta_train(&cfg, Some(d1.path())).unwrap();
        let b = meta_train(&cfg, Some(d2.path())).unwrap();
        assert_eq!(a.log.len(), 3);
        let t1 = std::fs::read(d1.path().join(TRAIN_LOG)).unwrap();
        let t2 = std::fs::read(d2.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(t1, t2, "{env}");
        let rows: Vec<IterationLog> =
            read_csv(&d1.path().join(TRAIN_LOG), "train_log", TRAIN_LOG_VERSION).unwrap();
        // NaN marks metrics that do not apply, so compare the debug forms
        assert_eq!(format!("{rows:?}"), format!("{:?}", a.log));
        assert_eq!(format!("{:?}", b.log), format!("{:?}", a.log));
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.iteration, i);
            assert_eq!(r.status, "ok");
            assert!(r.elbo_loss.is_finite() && r.avg_return_normalized.is_finite());
            assert_eq!(
                r.policy_updates + r.skipped_updates.min(r.policy_updates),
                r.policy_updates
            );
        }
        // tasks resample every 2 iterations
        assert_eq!(rows[0].task_id, rows[1].task_id);
        assert_ne!(rows[1].task_id, rows[2].task_id);
        assert!(
            d1.path().join("agent.json").exists()
                && d1.path().join("effective_config.toml").exists()
        );
        let dumped = std::fs::read_to_string(d1.path().join("effective_config.toml")).unwrap();
        assert_eq!(RunConfig::from_toml(&dumped).unwrap(), cfg);
    }
}

#[test]
fn zero_policy_updates_leave_the_policy_unchanged() {
    let mut cfg = tiny(EnvId::Cartpole, 8);
    cfg.policy.updates = 0;
    let out = meta_train(&cfg, None).unwrap();
    let fresh = Agent::new(&cfg, &SeedStream::new(cfg.seed));
    assert_eq!(
        out.agent.policy.params.values(),
        fresh.policy.params.values()
    );
    assert_ne!(out.agent.world.params.values(), fresh.world.params.values());
    assert!(out
        .log
        .iter()
        .all(|r| r.elbo_loss.is_finite() && r.policy_updates == 0));
}

#[test]
fn a_fixed_task_is_never_resampled() {
    let mut cfg = tiny(EnvId::Cartpole, 9);
    cfg.iterations = 4;
    cfg.train.resample_every = 1000;
    let out = meta_train(&cfg, None).unwrap();
    assert!(out.log.iter().all(|r| r.task_id == out.log[0].task_id));
    assert_eq!(out.log[3].env_steps, 4 * 25);
}

#[test]
fn divergent_updates_abort_iterations_but_not_the_run() {
    let mut cfg = tiny(EnvId::Cartpole, 10);
    cfg.iterations = 4;
    cfg.model.lr = 1e300;
    let out = meta_train(&cfg, None).unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(
        out.log.iter().any(|r| r.status.starts_with("aborted")),
        "{:?}",
        out.log
    );
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = tiny(EnvId::Acrobot, 11);
    let out = meta_train(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("agent");
    out.agent.save(&stem).unwrap();
    let back = Agent::load(&stem).unwrap();
    assert_eq!(back.world.params.values(), out.agent.world.params.values());
    assert_eq!(
        back.policy.params.values(),
        out.agent.policy.params.values()
    );
    assert_eq!(back.world.norm, out.agent.world.norm);
    let task = test_tasks(&cfg, 1)[0];
    let seeds = SeedStream::new(3);
    let a = evaluate_task(&out.agent, &task, 3, &seeds).unwrap();
    let b = evaluate_task(&back, &task, 3, &seeds).unwrap();
    assert!((a.one_step_mse - b.one_step_mse).abs() <= 1e-12);
    assert_eq!(a.returns, b.returns);
    assert!(Agent::load(&dir.path().join("missing")).is_err());
}

#[test]
fn amortized_testing_takes_no_optimizer_steps() {
    let cfg = tiny(EnvId::Cartpole, 12);
    let out = meta_train(&cfg, None).unwrap();
    let tasks = test_tasks(&cfg, cfg.test.tasks);
    let before = optimizer_steps();
    let rows = meta_test_amortized(&out.agent, &tasks).unwrap();
    assert_eq!(optimizer_steps(), before);
    assert_eq!(rows.len(), 2);
    assert!(rows
        .iter()
        .all(|r| r.adaptation_steps == 0 && r.one_step_mse.is_finite()));
    assert!(rows.iter().all(|r| (-1.0..=0.0).contains(&r.mean_return)));
}

#[test]
fn finetuning_counts_steps_and_zero_steps_match_direct_evaluation() {
    for env in [EnvId::Cartpole, EnvId::Acrobot] {
        let mut cfg = tiny(env, 13);
        cfg.policy_mode = PolicyMode::Ablation;
        let out = meta_train(&cfg, None).unwrap();
        let tasks = test_tasks(&cfg, 2);
        let direct = meta_test_amortized(&out.agent, &tasks).unwrap();
        let k0 = meta_test_finetune(&out.agent, &tasks, 0).unwrap();
        for (a, b) in direct.iter().zip(&k0) {
            assert_eq!(a.mean_return, b.mean_return);
            assert_eq!(a.one_step_mse, b.one_step_mse);
            assert_eq!(b.adaptation_steps, 0);
        }
        let before = out.agent.policy.params.values().to_vec();
        let k3 = meta_test_finetune(&out.agent, &tasks, 3).unwrap();
        assert!(k3.iter().all(|r| r.adaptation_steps == 3));
        assert_eq!(out.agent.policy.params.values(), &before[..]);
    }
}

#[test]
fn uniform_collection_returns_exactly_the_budget() {
    let task = sample_task(EnvId::Acrobot, &mut SeedStream::new(14).rng("t"));
    let ts = collect_uniform(&task, 50, &mut SeedStream::new(14).rng("c")).unwrap();
    assert_eq!(ts.len(), 50);
    assert!(ts.iter().all(|t| t.task == task.seed));
}
