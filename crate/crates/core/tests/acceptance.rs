//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N ... PASS|FAIL` line to the real stdout so the lines
//! survive output capture.
//!
//! The learning benchmark and the reset ablation need hours of CPU time and
//! are `#[ignore]`d:
//! `cargo test --release -p t2d-core --test acceptance -- --ignored --nocapture`.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use common::{random_batch, random_episode, rng};
use rand::Rng;
use t2d_core::gradsuite::{run_suite, SuiteConfig, TOLERANCE};
use t2d_core::metrics::{
    driving_score, infractions_per_km, overall_success_rate, weighted_driving_score, write_logs, EpisodeLog,
    PenaltyTable,
};
use t2d_core::nn::dist::{symexp, symlog};
use t2d_core::nn::{Adam, AdamConfig, BucketSpec, Gradients, ParamStore, Tape, Tensor};
use t2d_core::planner::lambda_returns;
use t2d_core::replay::{ReplayBuffer, SequenceBatch, SlotSource, TransitionRecord};
use t2d_core::scenario::{build_benchmark, BenchmarkConfig, ScenarioKind};
use t2d_core::sim::{InfractionEvent, InfractionKind};
use t2d_core::trainer::{
    evaluate, evaluate_checkpoint, train, Autopilot, DoNothing, DriveEnv, EnvSettings, EpisodePolicy, RandomPolicy,
    TrainConfig, TRAIN_LOG,
};
use t2d_core::world_model::{LossReport, WorldModel, WorldModelConfig};

/// Serializes the timed criteria so that wall-clock budgets are not shared
/// with other tests on a small machine.
static TIMED: Mutex<()> = Mutex::new(());

fn timed() -> MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, what: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:<3} {what:<34} {verdict}  {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = timed();
    let start = Instant::now();
    let r = run_suite(&SuiteConfig { seed: 0, corrupt: None }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = r.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let composite = ["world_model_loss", "critic_loss", "actor_loss"]
        .iter()
        .all(|n| r.checks.iter().any(|c| c.name == *n));
    let pass = r.passed() && worst < TOLERANCE && composite && secs < 300.0;
    report(
        "1",
        "gradient suite",
        pass,
        format!("{} checks, worst rel err {worst:.2e}, {secs:.1} s, failures {:?}", r.checks.len(), r.failures()),
    );
}

fn grad_mass(store: &ParamStore, grads: &[Option<Tensor<f32>>], prefix: &str) -> f64 {
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .map(|id| grads[id.index()].as_ref().map_or(0.0, |g| g.data().iter().map(|v| v.abs() as f64).sum()))
        .sum()
}

#[test]
fn criterion_2_free_bits_and_stop_gradient() {
    let mut store = ParamStore::new();
    let wm = WorldModel::new(WorldModelConfig::tiny(16), &mut store, &mut rng(0)).unwrap();
    let mut floor_ok = 0;
    let mut min_seen = f64::INFINITY;
    for seed in 0..100 {
        let batch = random_batch(16, 2, 3, 1000 + seed);
        let tape = Tape::new();
        let v = wm.loss(&tape, &store, &batch, &mut rng(seed)).unwrap();
        let r = LossReport::from_vars(&tape, &v);
        min_seen = min_seen.min(r.l_dyn).min(r.l_rep);
        floor_ok += (r.l_dyn >= 1.0 && r.l_rep >= 1.0) as usize;
    }

    // without the floor the clamp cannot mask a gradient path; single-step
    // sequences leave no recurrent route from the posterior into the prior
    let cfg = WorldModelConfig { free_bits: 0.0, ..WorldModelConfig::tiny(16) };
    let mut store = ParamStore::new();
    let wm = WorldModel::new(cfg, &mut store, &mut rng(1)).unwrap();
    let batch = random_batch(16, 3, 1, 4);
    let tape = Tape::new();
    let v = wm.loss(&tape, &store, &batch, &mut rng(0)).unwrap();
    let mut graph_ok = !tape.needs_grad(v.post_in_dyn)
        && !tape.needs_grad(v.prior_in_rep)
        && tape.needs_grad(v.post)
        && tape.needs_grad(v.prior);
    let g: Gradients<f32> = tape.backward(v.dyn_loss).unwrap();
    let g = g.for_store(&tape, &store);
    graph_ok &= grad_mass(&store, &g, "wm.post") == 0.0
        && grad_mass(&store, &g, "wm.enc") == 0.0
        && grad_mass(&store, &g, "wm.prior") > 0.0;
    let g: Gradients<f32> = tape.backward(v.rep).unwrap();
    let g = g.for_store(&tape, &store);
    graph_ok &= grad_mass(&store, &g, "wm.prior") == 0.0 && grad_mass(&store, &g, "wm.post") > 0.0;

    report(
        "2",
        "free bits and stop-gradient",
        floor_ok == 100 && graph_ok,
        format!("{floor_ok}/100 batches at or above the floor (min {min_seen}), graph placement ok: {graph_ok}"),
    );
}

/// Direct recursion `R_t = r_t + γ c_t ((1 − λ) v_t + λ R_{t+1})`.
fn lambda_oracle(r: &[f64], v: &[f64], c: &[f64], t: usize, gamma: f64, lambda: f64, boot: f64) -> f64 {
    if t == r.len() {
        return boot;
    }
    r[t] + gamma * c[t] * ((1.0 - lambda) * v[t] + lambda * lambda_oracle(r, v, c, t + 1, gamma, lambda, boot))
}

#[test]
fn criterion_3_lambda_return_oracle() {
    let rewards = [-1.0, 0.0, 2.5];
    let values = [-0.5, 0.0, 3.0];
    let conts = [0.0, 0.5, 1.0];
    let coeffs = [0.0, 0.5, 0.9, 1.0];
    let mut cases = 0u64;
    let mut mismatches = 0u64;
    for len in 0..=4usize {
        let combos = 3usize.pow(3 * len as u32);
        let (mut r, mut v, mut c) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for code in 0..combos {
            let mut k = code;
            for t in 0..len {
                r[t] = rewards[k % 3];
                v[t] = values[(k / 3) % 3];
                c[t] = conts[(k / 9) % 3];
                k /= 27;
            }
            for &boot in &values {
                for &gamma in &coeffs {
                    for &lambda in &coeffs {
                        let got = lambda_returns(&r, &v, &c, gamma, lambda, boot).unwrap();
                        cases += 1;
                        let same = (0..len).all(|t| {
                            got[t].to_bits() == lambda_oracle(&r, &v, &c, t, gamma, lambda, boot).to_bits()
                        });
                        mismatches += !same as u64;
                    }
                }
            }
        }
    }
    report("3", "lambda-return oracle", mismatches == 0, format!("{cases} sequences, {mismatches} mismatches"));
}

#[test]
fn criterion_4_twohot_and_symlog() {
    let spec = BucketSpec::uniform(WorldModelConfig::default().buckets, -20.0, 20.0);
    let (lo, hi) = (spec.centers()[0], *spec.centers().last().unwrap());
    let mut r = rng(4);
    let mut worst_twohot = 0.0f64;
    for _ in 0..10_000 {
        let v: f64 = r.gen_range(-25.0..25.0);
        let w = spec.twohot(v);
        let back: f64 = w.iter().zip(spec.centers()).map(|(w, c)| w * c).sum();
        worst_twohot = worst_twohot.max((back - v.clamp(lo, hi)).abs());
    }
    let mut worst_sym = 0.0f64;
    let grid = (0..=10_000).map(|i| -1e4 + 2.0 * i as f64).chain((0..10_000).map(|_| r.gen_range(-1e4..=1e4)));
    for x in grid.chain([0.0, 1e-9, -1e-9]) {
        let y = symexp(symlog(x));
        let rel = if x == 0.0 { y.abs() } else { ((y - x) / x).abs() };
        worst_sym = worst_sym.max(rel);
    }
    report(
        "4",
        "two-hot and symlog round trips",
        worst_twohot <= 1e-5 && worst_sym <= 1e-6,
        format!("two-hot max abs err {worst_twohot:.2e}, symexp(symlog) max rel err {worst_sym:.2e}"),
    );
}

#[test]
fn criterion_5_termination_priority_replay() {
    let mut r = rng(5);
    let mut buf = ReplayBuffer::new(10_000);
    let mut eps = Vec::new();
    for (len, term) in [(40, false), (25, true), (7, false), (60, false), (12, true)] {
        let ep = random_episode(16, len, term, &mut r);
        eps.push((buf.append(ep.clone()).unwrap(), ep));
    }
    let (draws, batch) = (10_000, 50);
    let (mut anchored, mut audited, mut straddles) = (0, 0usize, 0usize);
    for _ in 0..draws / batch {
        let s = buf.sample(batch, 16, &mut r).unwrap();
        for (i, src) in s.sources.iter().enumerate() {
            anchored += src.anchored as usize;
            let recs = &eps.iter().find(|(id, _)| *id == src.episode).unwrap().1;
            let pad = s.len - src.valid;
            let mut ok = src.start + src.valid <= recs.len();
            for t in 0..s.len {
                let row = t * s.batch + i;
                ok &= s.mask[row] == (t >= pad);
                if t >= pad && ok {
                    let rec = &recs[src.start + t - pad];
                    ok &= s.reward[row] == rec.reward
                        && s.action[row] == rec.action
                        && s.done[row] == rec.done
                        && s.reset[row] == (t == pad)
                        && s.meas.row(row)[..] == rec.measurements[..];
                    // a terminal frame may only close a sequence
                    ok &= !(rec.done && t + 1 < s.len);
                }
            }
            if src.anchored {
                ok &= recs.last().unwrap().done && src.start + src.valid == recs.len();
            }
            audited += 1;
            straddles += !ok as usize;
        }
    }
    let frac = anchored as f64 / draws as f64;
    report(
        "5",
        "termination-priority replay",
        (frac - 0.5).abs() <= 0.02 && straddles == 0,
        format!("anchored fraction {frac:.4} over {draws} draws, {audited} slots audited, {straddles} bad"),
    );
}

fn log(rc: f64, kinds: &[InfractionKind], length: f64, density: f64) -> EpisodeLog {
    EpisodeLog {
        route_id: "r".into(),
        scenario_kind: Some(ScenarioKind::HardBrake),
        completion: rc,
        infractions: kinds.iter().enumerate().map(|(i, &k)| InfractionEvent::new(k, i as u64)).collect(),
        route_length: length,
        scenario_density: density,
        done_reason: None,
        steps: 0,
        total_reward: 0.0,
    }
}

/// `exp(ln RC + Σ_i n_i ln p_i)` with `n_i` divided by the density when it
/// is positive.
fn wds_oracle(l: &EpisodeLog, t: &PenaltyTable) -> f64 {
    if l.completion == 0.0 {
        return 0.0;
    }
    let mut ln = l.completion.ln();
    for k in InfractionKind::ALL {
        let count = l.infractions.iter().filter(|e| e.kind == k).count() as f64;
        let n = if l.scenario_density == 0.0 { count } else { count / l.scenario_density };
        ln += n * t.get(k).ln();
    }
    ln.exp()
}

#[test]
fn criterion_6_metrics_oracle() {
    // 0.2 infractions per km at penalty 0.8 on 5 km and 10 km routes
    let mut t = PenaltyTable::default();
    t.set(InfractionKind::StopSign, 0.8).unwrap();
    let short = log(1.0, &[InfractionKind::StopSign], 5_000.0, 0.0);
    let long = log(1.0, &[InfractionKind::StopSign; 2], 10_000.0, 0.0);
    let rates_ok = [&short, &long].iter().all(|l| {
        let rate = infractions_per_km(std::slice::from_ref(*l)).unwrap()[&InfractionKind::StopSign];
        (rate - 0.2).abs() < 1e-12
    });
    let example_ok = driving_score(&short, &t) == 0.8 && driving_score(&long, &t) == 0.8 * 0.8 && rates_ok;

    let table = PenaltyTable::default();
    let mut r = rng(6);
    let mut bad = 0;
    for case in 0..50 {
        let n = r.gen_range(0..6);
        let kinds: Vec<_> = (0..n).map(|_| InfractionKind::ALL[r.gen_range(0..InfractionKind::ALL.len())]).collect();
        let density = if case % 5 == 0 { 0.0 } else { r.gen_range(1..4) as f64 };
        let l = log(r.gen_range(0.0..=1.0), &kinds, 300.0, density);
        let wds = weighted_driving_score(&l, &table).unwrap();
        let ok = (wds - wds_oracle(&l, &table)).abs() < 1e-12
            && (0.0..=l.completion).contains(&wds)
            && (density != 0.0 || (wds - driving_score(&l, &table)).abs() < 1e-12);
        bad += !ok as usize;
    }
    report(
        "6",
        "metrics oracle",
        example_ok && bad == 0,
        format!(
            "DS {} / {} on 5 km / 10 km, {bad}/50 randomized WDS cases off",
            driving_score(&short, &t),
            driving_score(&long, &t)
        ),
    );
}

/// Autopilot with a seeded share of random actions so that the dataset
/// covers more than one action per situation.
struct Jittered {
    autopilot: Autopilot,
    random: RandomPolicy,
    coin: rand_chacha::ChaCha8Rng,
}

impl EpisodePolicy for Jittered {
    fn act(
        &mut self,
        env: &DriveEnv,
        obs: &t2d_core::bev::BevObservation,
        prev: Option<usize>,
    ) -> t2d_core::Result<usize> {
        if self.coin.gen_bool(0.2) {
            self.random.act(env, obs, prev)
        } else {
            self.autopilot.act(env, obs, prev)
        }
    }
}

/// 200 transitions in 5 episodes of 40 steps from the scripted policy.
fn scripted_dataset(settings: &EnvSettings) -> SequenceBatch {
    let bench = build_benchmark(&BenchmarkConfig {
        kinds: vec![ScenarioKind::LaneFollow, ScenarioKind::HardBrake, ScenarioKind::VanillaTurn],
        train_per_kind: 2,
        plain: 0,
        eval_per_kind: 0,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let mut policy = Jittered {
        autopilot: Autopilot,
        random: RandomPolicy::new(1),
        coin: rng(2),
    };
    let mut episodes: Vec<Vec<TransitionRecord>> = Vec::new();
    for (i, route) in bench.train.iter().enumerate() {
        if episodes.len() == 5 {
            break;
        }
        let (mut env, mut obs) = DriveEnv::new(route, i as u64, settings).unwrap();
        let mut recs = vec![TransitionRecord::new(&obs, None, 0.0, false)];
        let mut prev = None;
        while recs.len() < 41 && !env.is_done() {
            let a = policy.act(&env, &obs, prev).unwrap();
            let step = env.step(a).unwrap();
            recs.push(TransitionRecord::new(&step.obs, Some(a), step.reward, env.is_done()));
            obs = step.obs;
            prev = Some(a);
        }
        if recs.len() == 41 {
            episodes.push(recs);
        }
    }
    assert_eq!(episodes.len(), 5, "not enough 40-step episodes");
    let slots: Vec<_> = episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let src = SlotSource { episode: i as u64, start: 0, valid: e.len(), anchored: false };
            (e.as_slice(), src)
        })
        .collect();
    SequenceBatch::from_slots(&slots, 41, settings.bev.size).unwrap()
}

#[test]
fn criterion_7_world_model_overfit() {
    let _guard = timed();
    let settings = TrainConfig::quick(0, 0).settings();
    let data = scripted_dataset(&settings);
    let transitions = data.action.iter().filter(|a| a.is_some()).count();
    let mut store = ParamStore::new();
    let wm = WorldModel::new(WorldModelConfig::tiny(settings.bev.size), &mut store, &mut rng(7)).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() }, &store);
    let budget = Duration::from_secs(600);
    let start = Instant::now();
    let mut step = 0u64;
    let eval = loop {
        let e = wm.one_step_eval(&store, &data).unwrap();
        let converged = e.pixel_accuracy >= 0.97 && e.reward_mae <= 0.05;
        if converged || start.elapsed() > budget {
            break e;
        }
        for _ in 0..25 {
            let tape = Tape::new();
            let v = wm.loss(&tape, &store, &data, &mut rng(step)).unwrap();
            let g = tape.backward(v.total).unwrap();
            let grads = g.for_store(&tape, &store);
            opt.step(&mut store, &grads);
            step += 1;
        }
    };
    let secs = start.elapsed().as_secs_f64();
    report(
        "7",
        "world-model overfit",
        transitions == 200 && eval.pixel_accuracy >= 0.97 && eval.reward_mae <= 0.05 && secs <= 600.0,
        format!(
            "{transitions} transitions, pixel accuracy {:.4}, reward MAE {:.4}, {step} updates in {secs:.0} s",
            eval.pixel_accuracy, eval.reward_mae
        ),
    );
}

fn benchmark_suite_config(kinds: Vec<ScenarioKind>, seed: u64) -> BenchmarkConfig {
    BenchmarkConfig {
        kinds,
        train_per_kind: 40,
        plain: 0,
        eval_per_kind: 10,
        seed,
        ..Default::default()
    }
}

fn learning_kinds() -> Vec<ScenarioKind> {
    vec![ScenarioKind::LaneFollow, ScenarioKind::VanillaTurn, ScenarioKind::HardBrake]
}

#[test]
fn criterion_8_sanity_floor() {
    let bench = build_benchmark(&benchmark_suite_config(learning_kinds(), 8)).unwrap();
    let settings = EnvSettings::default();
    let idle = overall_success_rate(&evaluate(&bench.eval, 8, &settings, &mut DoNothing).unwrap());
    let random = overall_success_rate(&evaluate(&bench.eval, 8, &settings, &mut RandomPolicy::new(8)).unwrap());
    report(
        "8a",
        "floor: do-nothing and random",
        bench.eval.len() == 30 && idle <= 0.05 && random <= 0.05,
        format!("{} held-out routes, do-nothing {idle:.3}, random {random:.3}", bench.eval.len()),
    );
    let _ = std::io::stdout().lock().write_all(
        b"criterion 8b  learning benchmark                 SKIP  long run, needs --ignored (see module docs)\n",
    );
}

fn full_config(kinds: Vec<ScenarioKind>, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.benchmark = benchmark_suite_config(kinds.clone(), seed);
    cfg.warmup_kinds.retain(|k| kinds.contains(k));
    if cfg.warmup_kinds.is_empty() {
        cfg.warmup_kinds = vec![kinds[0]];
    }
    cfg
}

fn final_success(cfg: &TrainConfig, out: &Path) -> f64 {
    let outcome = train(cfg, out, None).unwrap();
    let ckpt = outcome.checkpoints.last().unwrap();
    let routes = cfg.load_benchmark().unwrap().eval;
    overall_success_rate(&evaluate_checkpoint(ckpt, &routes, cfg.seed).unwrap())
}

#[test]
#[ignore = "hours of CPU time"]
fn criterion_8_learning_benchmark() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = full_config(learning_kinds(), 0);
    assert_eq!(cfg.bev.size, 64);
    let start = Instant::now();
    let success = final_success(&cfg, dir.path());
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    report(
        "8b",
        "learning benchmark",
        success >= 0.8 && hours <= 12.0,
        format!("success {success:.3} on 30 held-out routes after {} steps, {hours:.2} h", cfg.total_steps),
    );
}

#[test]
fn criterion_9_reset_ablation_placeholder() {
    let _ = std::io::stdout().lock().write_all(
        b"criterion 9   reset ablation                     SKIP  long run, needs --ignored (see module docs)\n",
    );
}

#[test]
#[ignore = "hours of CPU time"]
fn criterion_9_reset_ablation() {
    let kinds = vec![ScenarioKind::HardBrake, ScenarioKind::EnterActorFlow];
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let dir = tempfile::TempDir::new().unwrap();
        let mut with = full_config(kinds.clone(), seed);
        with.planner_reset = true;
        let without = TrainConfig { planner_reset: false, ..with.clone() };
        let a = final_success(&with, &dir.path().join("with"));
        let b = final_success(&without, &dir.path().join("without"));
        wins += (a >= b) as usize;
        detail.push(format!("seed {seed}: {a:.3} vs {b:.3}"));
    }
    report("9", "reset ablation", wins >= 2, format!("with-reset >= without in {wins}/3 ({})", detail.join(", ")));
}

#[test]
fn criterion_10_determinism() {
    let _guard = timed();
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = TrainConfig::quick(5_000, 10);
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("run{i}"));
            let outcome = train(&cfg, &out, None).unwrap();
            let csv = std::fs::read(out.join(TRAIN_LOG)).unwrap();
            (outcome, csv)
        })
        .collect();
    let logs_same = runs[0].0.log == runs[1].0.log && runs[0].1 == runs[1].1;
    let ckpt = runs[0].0.checkpoints.last().unwrap().clone();
    let routes = cfg.load_benchmark().unwrap().eval;
    let evals: Vec<String> = (0..2).map(|_| write_logs(&evaluate_checkpoint(&ckpt, &routes, 3).unwrap())).collect();
    let steps = runs[0].0.state.env_steps;
    report(
        "10",
        "determinism",
        logs_same && evals[0] == evals[1] && steps >= 5_000,
        format!(
            "{steps} env steps, {} log rows identical: {logs_same}, eval logs identical: {} ({} bytes)",
            runs[0].0.log.rows.len(),
            evals[0] == evals[1],
            evals[0].len()
        ),
    );
}
