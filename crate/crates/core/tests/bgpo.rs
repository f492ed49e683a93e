use std::sync::OnceLock;

use bgpo_core::agent::{parameter_fingerprint, Transition};
use bgpo_core::bgpo::{train_seed, train_seeds, AblationMode, BgpoRun, ScheduleKind};
use bgpo_core::config::ExperimentConfig;
use bgpo_core::env::{generate_pool, DemoSettings, Task};
use bgpo_core::gwr::GwrNetwork;
use bgpo_core::metrics::write_metrics;
use bgpo_core::par::Execution;
use bgpo_core::pipeline::{pretrain, DemoBank, Encoders};
use bgpo_core::rng::seeded;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.demos = DemoSettings {
        per_task: 14,
        held_out_per_task: 4,
        ..DemoSettings::default()
    };
    cfg.vae.latent_width = 8;
    cfg.vae.hidden_width = 16;
    cfg.vae.epochs = 3;
    cfg.vae.batch_size = 32;
    cfg.lae.hidden_width = 6;
    cfg.lae.epochs = 3;
    cfg.lae.batch_size = 8;
    cfg.agent.hidden = 16;
    cfg.agent.batch_size = 32;
    cfg.agent.warmup = 64;
    cfg.bgpo.concurrent_episodes = 12;
    cfg
}

struct Fixture {
    encoders: Encoders,
    bank: DemoBank,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = tiny_config();
        let pool = generate_pool(&cfg.env, &cfg.demos, 3, Execution::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let encoders = pretrain(&cfg, &pool, dir.path(), Execution::Parallel, None).unwrap();
        let bank = DemoBank::build(&encoders, &pool, Execution::Parallel).unwrap();
        Fixture { encoders, bank }
    })
}

fn with_mode(mode: AblationMode) -> ExperimentConfig {
    let mut cfg = tiny_config();
    cfg.bgpo.mode = mode;
    cfg
}

/// Stored transitions grouped into episodes by their terminal flags.
fn episodes(run: &BgpoRun) -> Vec<Vec<Transition>> {
    let mut out = vec![Vec::new()];
    for t in run.buffer.iter() {
        let terminal = t.terminal;
        out.last_mut().unwrap().push(t);
        if terminal {
            out.push(Vec::new());
        }
    }
    out.pop();
    out
}

fn trajectory(ep: &[Transition]) -> Vec<Vec<f64>> {
    let mut g: Vec<Vec<f64>> = ep.iter().map(|t| t.z.clone()).collect();
    g.push(ep.last().unwrap().z_next.clone());
    g
}

#[test]
fn episode_stores_one_transition_per_step_and_rewards_the_end() {
    let f = fixture();
    let cfg = with_mode(AblationMode::Full);
    let mut run = BgpoRun::new(&f.encoders, &f.bank, &cfg, 11).unwrap();
    for (e, task) in Task::ALL.iter().cycle().take(6).enumerate() {
        let before = run.buffer.len();
        let stats = run.run_episode(e, *task).unwrap();
        assert_eq!(run.buffer.len() - before, stats.len);
        assert_eq!(stats.trajectory_latents, stats.len + 1);
        assert!(stats.intrinsic > 0.0 && stats.intrinsic <= 1.0);
    }
    for ep in episodes(&run) {
        let (last, body) = ep.split_last().unwrap();
        assert!(body.iter().all(|t| t.r == 0.0 && !t.terminal));
        let phi_g = f.encoders.behavior_of_latents(&trajectory(&ep)).unwrap();
        let r_int = bgpo_core::bgpo::intrinsic_reward(&last.b, &phi_g).unwrap();
        let r_ext = (last.r - cfg.bgpo.beta * r_int).round();
        assert!(r_ext == 0.0 || r_ext == 1.0);
        assert!((last.r - (r_ext + cfg.bgpo.beta * r_int)).abs() < 1e-12);
    }
}

#[test]
fn full_and_neither_differ_only_in_behavior_source_and_terminal_reward() {
    let f = fixture();
    let seed = 21;
    let mut runs = Vec::new();
    for mode in [AblationMode::Full, AblationMode::Neither] {
        let mut cfg = with_mode(mode);
        cfg.agent.warmup = 1_000_000;
        let mut run = BgpoRun::new(&f.encoders, &f.bank, &cfg, seed).unwrap();
        for e in 0..8 {
            run.train_episode(e).unwrap();
        }
        runs.push((cfg, run));
    }
    let full = episodes(&runs[0].1);
    let neither = episodes(&runs[1].1);
    assert_eq!(full.len(), neither.len());
    let mut replica: GwrNetwork = f.bank.new_gwr(&runs[0].0, seed).unwrap();
    let beta = runs[0].0.bgpo.beta;
    for (a, b) in full.iter().zip(&neither) {
        assert_eq!(a.len(), b.len());
        let phi_d = &b[0].b;
        let inferred = replica.step(phi_d).unwrap().0.b;
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            assert_eq!((&x.z, &x.a, &x.z_next, x.terminal), (&y.z, &y.a, &y.z_next, y.terminal));
            assert_eq!(x.b, inferred);
            assert_eq!(&y.b, phi_d);
            if k + 1 < a.len() {
                assert_eq!(x.r, y.r);
            } else {
                let phi_g = f.encoders.behavior_of_latents(&trajectory(a)).unwrap();
                let r_int = bgpo_core::bgpo::intrinsic_reward(&x.b, &phi_g).unwrap();
                assert!(y.r == 0.0 || y.r == 1.0);
                assert_eq!(x.r, y.r + beta * r_int);
            }
        }
    }
    assert_eq!(replica, runs[0].1.gwr);
}

#[test]
fn ablation_wiring() {
    let f = fixture();
    let mut gwr_only = BgpoRun::new(&f.encoders, &f.bank, &with_mode(AblationMode::GwrOnly), 5).unwrap();
    let mut rint_only = BgpoRun::new(&f.encoders, &f.bank, &with_mode(AblationMode::RintOnly), 5).unwrap();
    let nodes_before = rint_only.gwr.clone();
    for e in 0..6 {
        gwr_only.train_episode(e).unwrap();
        rint_only.train_episode(e).unwrap();
    }
    for t in gwr_only.buffer.iter() {
        assert!(t.r == 0.0 || t.r == 1.0);
        assert!(t.r == 0.0 || t.terminal);
    }
    let held: Vec<&Vec<f64>> = f.bank.held_out.iter().flatten().collect();
    for t in rint_only.buffer.iter() {
        assert!(held.contains(&&t.b), "b is not a demonstration latent");
    }
    assert_eq!(rint_only.gwr, nodes_before);
}

#[test]
fn evaluation_is_pure_and_seeded() {
    let f = fixture();
    let mut run = BgpoRun::new(&f.encoders, &f.bank, &with_mode(AblationMode::Full), 8).unwrap();
    for e in 0..4 {
        run.train_episode(e).unwrap();
    }
    let actor = parameter_fingerprint(&run.agent.actor);
    let critic = parameter_fingerprint(&run.agent.critic);
    let gwr = run.gwr.clone();
    let buffer = run.buffer.clone();
    let first = run.evaluate(30, &Task::ALL).unwrap();
    for _ in 0..3 {
        assert_eq!(run.evaluate(30, &Task::ALL).unwrap(), first);
    }
    assert_eq!(parameter_fingerprint(&run.agent.actor), actor);
    assert_eq!(parameter_fingerprint(&run.agent.critic), critic);
    assert_eq!(run.gwr, gwr);
    assert_eq!(run.buffer, buffer);
    assert!(run.evaluate(0, &[]).is_err());
}

#[test]
fn untrained_policy_rarely_grasps() {
    let f = fixture();
    let run = BgpoRun::new(&f.encoders, &f.bank, &with_mode(AblationMode::Full), 2).unwrap();
    let mut rng = seeded(99, 0);
    let wins = (0..100)
        .filter(|_| run.evaluate_task(Task::Grasp, &mut rng).unwrap().success)
        .count();
    assert!(wins < 10, "{wins}/100");
}

#[test]
fn continual_schedule_starts_with_the_first_task() {
    let f = fixture();
    let mut cfg = with_mode(AblationMode::Full);
    cfg.bgpo.schedule = ScheduleKind::Continual;
    cfg.bgpo.continual_episodes = 30;
    cfg.bgpo.milestones = vec![12, 20];
    let logs = train_seed(&f.encoders, &f.bank, &cfg, 4, None, |_| {}).unwrap();
    assert_eq!(logs.len(), 30);
    for l in &logs[..12] {
        assert_eq!((l.task, l.eval_task), (Task::Grasp, Task::Grasp));
    }
    for l in &logs[12..20] {
        assert!(l.task != Task::PushToWhite && l.eval_task != Task::PushToWhite);
    }
    assert!(logs.iter().all(|l| l.schedule == ScheduleKind::Continual && l.episode < 30));
}

#[test]
fn metrics_are_complete_and_reproducible() {
    let f = fixture();
    let cfg = with_mode(AblationMode::RintOnly);
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for k in 0..2 {
        let mut streamed = Vec::new();
        let logs = train_seed(&f.encoders, &f.bank, &cfg, 6, None, |l| streamed.push(l.clone())).unwrap();
        assert_eq!(logs, streamed);
        assert_eq!(logs.len(), cfg.bgpo.concurrent_episodes);
        assert!(logs.iter().enumerate().all(|(i, l)| l.episode == i && l.mode == AblationMode::RintOnly));
        let path = dir.path().join(format!("m{k}.csv"));
        write_metrics(&path, &logs).unwrap();
        texts.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    let par = train_seeds(&f.encoders, &f.bank, &cfg, &[6, 7], Execution::Parallel).unwrap();
    let seq = train_seeds(&f.encoders, &f.bank, &cfg, &[6, 7], Execution::Sequential).unwrap();
    assert_eq!(par, seq);
    assert_ne!(par[0], par[1]);
}
