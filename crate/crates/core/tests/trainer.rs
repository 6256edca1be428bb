use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2d_core::actions::{BRAKE, CRUISE};
use t2d_core::bev::BevConfig;
use t2d_core::geom::Vec2;
use t2d_core::replay::SharedReplay;
use t2d_core::reward::RewardConfig;
use t2d_core::scenario::{build_benchmark, BenchmarkConfig, BenchmarkRoute, RouteSpec, ScenarioKind};
use t2d_core::sim::DoneReason;
use t2d_core::trainer::{
    checkpoint_name, evaluate, load_agent, run_episode, schedule_train_ratio, train, Autopilot, DoNothing, DriveEnv,
    EnvPool, EnvSettings, FixedController, PoolConfig, RandomController, TrainConfig, DIAGNOSTIC, TRAIN_LOG,
};
use t2d_core::Error;

fn small_settings() -> EnvSettings {
    EnvSettings {
        bev: BevConfig {
            size: 32,
            meters_per_pixel: 1.6,
        },
        ..Default::default()
    }
}

fn routes(kinds: &[ScenarioKind], per_kind: usize) -> Vec<BenchmarkRoute> {
    let mut cfg = BenchmarkConfig {
        kinds: kinds.to_vec(),
        train_per_kind: per_kind,
        plain: 0,
        eval_per_kind: 0,
        seed: 3,
        ..Default::default()
    };
    cfg.shape.min_length = 100.0;
    cfg.shape.max_length = 140.0;
    build_benchmark(&cfg).unwrap().train
}

fn straight(len: f64) -> BenchmarkRoute {
    let n = (len / 5.0) as usize;
    BenchmarkRoute {
        route: RouteSpec {
            id: "straight".into(),
            waypoints: (0..=n).map(|i| Vec2::new(i as f64 * len / n as f64, 0.0)).collect(),
            lane_width: 3.5,
            layout: Default::default(),
            controls: Vec::new(),
            junctions: Vec::new(),
        },
        kind: None,
        scenarios: Vec::new(),
    }
}

#[test]
fn ratio_schedule_is_linear() {
    let cfg = TrainConfig {
        total_steps: 1000,
        ..Default::default()
    };
    assert_eq!(schedule_train_ratio(0, &cfg), 1.0);
    assert_eq!(schedule_train_ratio(1000, &cfg), 4.0);
    assert_eq!(schedule_train_ratio(500, &cfg), 2.5);
    assert_eq!(schedule_train_ratio(5000, &cfg), 4.0);
}

#[test]
fn config_validation_and_toml() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml(), "cfg").unwrap(), cfg);
    let bad = |f: fn(&mut TrainConfig)| {
        let mut c = TrainConfig::default();
        f(&mut c);
        matches!(c.validate(), Err(Error::Validation(_)))
    };
    assert!(bad(|c| c.warmup_fraction = 0.5));
    assert!(bad(|c| c.reset_fraction = 1.0));
    assert!(bad(|c| c.num_envs = 0));
    assert!(bad(|c| c.bev.size = 32));
    assert!(TrainConfig::from_toml("total-steps = 5\nbogus = 1\n", "cfg").is_err());
    let c = TrainConfig::from_toml("total-steps = 5\nnum-envs = 2\n", "cfg").unwrap();
    assert_eq!((c.total_steps, c.num_envs, c.reset_fraction), (5, 2, 0.5));
}

#[test]
fn pool_accounts_every_transition() {
    let replay = SharedReplay::new(100_000);
    let cfg = PoolConfig {
        num_envs: 4,
        seed: 1,
        settings: small_settings(),
        ..Default::default()
    };
    let mut pool = EnvPool::new(cfg, routes(&[ScenarioKind::LaneFollow], 3), replay.clone()).unwrap();
    let stats = pool
        .collect(1000, &mut RandomController(ChaCha8Rng::seed_from_u64(0)))
        .unwrap();
    assert_eq!(stats.transitions, 4000);
    assert!(stats.step_times.iter().all(|t| t.len() == 1000));
    let finished: usize = stats.episodes.iter().map(|e| e.steps).sum();
    assert!(finished <= 4000);
    // each stored episode holds its first frame plus one record per step
    assert_eq!(replay.len(), finished + stats.episodes.len());
}

#[test]
fn single_env_pool_matches_direct_run() {
    let replay = SharedReplay::new(100_000);
    let cfg = PoolConfig {
        num_envs: 1,
        seed: 9,
        settings: small_settings(),
        ..Default::default()
    };
    let rs = routes(&[ScenarioKind::HardBrake], 2);
    let mut pool = EnvPool::new(cfg, rs.clone(), replay.clone()).unwrap();
    let mut stats = pool.collect(300, &mut FixedController(BRAKE)).unwrap();
    while stats.episodes.is_empty() {
        stats = pool.collect(100, &mut FixedController(BRAKE)).unwrap();
    }
    let ep = &stats.episodes[0];
    let route = rs.iter().find(|r| r.route.id == ep.route_id).unwrap();
    let (mut env, first) = DriveEnv::new(route, ep.seed, &small_settings()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let batch = loop {
        let b = replay.sample(1, ep.steps + 1, &mut r).unwrap();
        if b.sources[0].episode == 0 && b.sources[0].valid == ep.steps + 1 {
            break b;
        }
    };
    let frame = 32 * 32;
    let obs_at = |t: usize| -> Vec<u8> {
        (0..batch.obs.len() / batch.rows())
            .map(|k| batch.obs.data()[t * batch.obs.len() / batch.rows() + k] as u8)
            .collect()
    };
    let hwc = |o: &t2d_core::bev::BevObservation| -> Vec<u8> {
        let mut v = vec![0u8; o.masks.len()];
        for c in 0..o.masks.len() / frame {
            for p in 0..frame {
                v[p * (o.masks.len() / frame) + c] = o.masks[c * frame + p];
            }
        }
        v
    };
    assert_eq!(obs_at(0), hwc(&first));
    for t in 1..=ep.steps {
        let s = env.step(BRAKE).unwrap();
        assert_eq!(obs_at(t), hwc(&s.obs), "frame {t}");
        assert_eq!(batch.reward[t], s.reward as f32);
        assert_eq!(batch.action[t], Some(BRAKE));
    }
    assert!(env.is_done());
    assert_eq!(env.log().done_reason, ep.done_reason);
}

#[test]
fn resetting_slot_does_not_stall_the_others() {
    let delay = Duration::from_millis(120);
    let cfg = PoolConfig {
        num_envs: 4,
        seed: 2,
        settings: small_settings(),
        truncate: vec![Some(10)],
        reset_delay: delay,
    };
    let mut pool = EnvPool::new(cfg, routes(&[ScenarioKind::LaneFollow], 2), SharedReplay::new(100_000)).unwrap();
    let stats = pool.collect(60, &mut FixedController(CRUISE)).unwrap();
    let truncated = stats.episodes.iter().filter(|e| e.slot == 0).count();
    assert_eq!(truncated, 6);
    for slot in 1..4 {
        let t = &stats.step_times[slot];
        let worst = t.windows(2).map(|w| w[1] - w[0]).max().unwrap();
        assert!(worst < delay / 2, "slot {slot} stalled for {worst:?}");
        assert!(*t.last().unwrap() + 3 * delay < *stats.step_times[0].last().unwrap());
    }
}

#[test]
fn scripted_policies_on_a_plain_route() {
    let settings = EnvSettings::default();
    assert!(evaluate(&[], 0, &settings, &mut DoNothing).unwrap().is_empty());
    let idle = run_episode(&straight(150.0), 0, &settings, &mut DoNothing).unwrap();
    assert_eq!(idle.done_reason, Some(DoneReason::Blocked));
    assert!(idle.completion < 0.01);
    let oracle = run_episode(&straight(150.0), 0, &settings, &mut Autopilot).unwrap();
    assert_eq!(oracle.completion, 1.0);
    assert!(oracle.infractions.is_empty(), "{:?}", oracle.infractions);
    assert_eq!(oracle.done_reason, Some(DoneReason::RouteComplete));
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&TrainConfig::quick(0, 1), dir.path(), None).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".t2d"))
        .collect();
    assert_eq!(files, vec![checkpoint_name(0)]);
    assert_eq!(out.checkpoints.len(), 1);
    let (agent, meta) = load_agent(&out.checkpoints[0]).unwrap();
    assert_eq!(meta.state.env_steps, 0);
    assert_eq!(meta.config, TrainConfig::quick(0, 1));
    assert_eq!(agent.wm.cfg, meta.config.world_model);
}

fn short_run() -> TrainConfig {
    TrainConfig {
        prefill: 64,
        log_interval: 100,
        checkpoint_interval: 320,
        ..TrainConfig::quick(640, 5)
    }
}

#[test]
fn short_run_follows_the_schedule() {
    let cfg = short_run();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, dir.path(), None).unwrap();
    assert_eq!(out.state.env_steps, 640);

    let rows = &out.log.rows;
    assert!(rows.windows(2).all(|w| w[0].env_steps < w[1].env_steps));
    assert_eq!(rows.last().unwrap().env_steps, 640);
    let csv = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(csv, out.log.to_csv());

    for e in &out.episodes {
        if e.env_steps <= cfg.warmup_steps() {
            assert!(cfg.warmup_kinds.contains(&e.summary.kind.unwrap()), "{:?}", e.summary);
        }
    }

    assert_eq!(out.state.planner_resets, 1);
    let reset = out.reset.unwrap();
    assert!(reset.env_steps >= cfg.reset_step() && reset.env_steps < cfg.reset_step() + 16);
    assert_eq!(reset.wm_before, reset.wm_after);
    assert_ne!(reset.actor_before, reset.actor_after);

    assert!(out.state.wm_updates > 0);
    let owed: f64 = out.ratio_trace.iter().map(|r| r.0).sum();
    let done: u64 = out.ratio_trace.iter().map(|r| r.1).sum();
    assert_eq!(done, out.state.planner_updates);
    assert!((owed - done as f64).abs() <= 1.0, "{owed} vs {done}");
    assert_eq!(out.checkpoints.len(), 3);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let cfg = TrainConfig {
        total_steps: 320,
        ..short_run()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, a.path(), None).unwrap();
    train(&cfg, b.path(), None).unwrap();
    for name in [TRAIN_LOG, t2d_core::trainer::EPISODE_LOG, &checkpoint_name(320)] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn resume_continues_the_step_accounting() {
    let cfg = short_run();
    let first = tempfile::tempdir().unwrap();
    let half = TrainConfig {
        total_steps: 320,
        ..cfg.clone()
    };
    train(&half, first.path(), None).unwrap();
    let second = tempfile::tempdir().unwrap();
    let out = train(&cfg, second.path(), Some(&first.path().join(checkpoint_name(320)))).unwrap();
    assert_eq!(out.state.env_steps, 640);
    assert!(out.log.rows.iter().all(|r| r.env_steps > 320));
    let bad = second.path().join("bad.t2d");
    std::fs::write(&bad, b"NOPE").unwrap();
    assert!(matches!(train(&cfg, second.path(), Some(&bad)), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_data_aborts_with_a_dump() {
    let cfg = TrainConfig {
        reward: RewardConfig {
            alpha_travel: 1e300,
            ..Default::default()
        },
        ..TrainConfig::quick(400, 2)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, dir.path(), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(DIAGNOSTIC)).unwrap()).unwrap();
    assert!(dump["checksums"]["world-model"].is_u64());
    assert!(dump["batch"]["sources"].as_array().is_some_and(|s| !s.is_empty()));
}
