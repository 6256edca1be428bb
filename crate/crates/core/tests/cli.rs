use std::path::Path;
use std::process::{Command, Output};

use t2d_core::metrics::{write_logs, EpisodeLog};
use t2d_core::scenario::{Benchmark, BenchmarkConfig, ScenarioKind};
use t2d_core::sim::{InfractionEvent, InfractionKind};
use t2d_core::trainer::{checkpoint_name, TrainConfig};
use tempfile::TempDir;

fn t2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2d"))
        .args(args)
        .env_remove("T2D_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn small_benchmark_toml() -> String {
    let cfg = BenchmarkConfig {
        kinds: vec![ScenarioKind::LaneFollow, ScenarioKind::HardBrake],
        train_per_kind: 2,
        plain: 1,
        eval_per_kind: 2,
        ..Default::default()
    };
    toml::to_string(&cfg).unwrap()
}

/// A config whose run stops right after the initial checkpoint.
fn initial_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = TrainConfig::quick(0, 3);
    let path = dir.join("train.toml");
    write(&path, &cfg.to_toml());
    let out = dir.join("run");
    let o = t2d(&["train", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join(checkpoint_name(0))
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&t2d(&["--help"])), 0);
    assert_eq!(code(&t2d(&["gen-routes", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&t2d(&["frobnicate"])), 1);
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&t2d(&["train", "--config", s(&missing), "--out", s(dir.path())])), 1);
    assert!(!dir.path().join("ckpt-000000000.t2d").exists());
}

#[test]
fn gen_routes_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("b.toml");
    write(&cfg, &small_benchmark_toml());
    let mut bytes = Vec::new();
    for i in 0..3 {
        let out = dir.path().join(format!("b{i}"));
        let o = t2d(&["gen-routes", "--config", s(&cfg), "--out", s(&out), "--seed", "11"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push(std::fs::read(out.join("benchmark.json")).unwrap());
    }
    assert!(bytes.windows(2).all(|w| w[0] == w[1]));
    let b = Benchmark::load(&dir.path().join("b0")).unwrap();
    assert_eq!((b.train.len(), b.eval.len()), (2 * 2 + 1, 2 * 2));
    assert_eq!(b.config.seed, 11);

    let other = dir.path().join("other");
    let o = Command::new(env!("CARGO_BIN_EXE_t2d"))
        .args(["gen-routes", "--config", s(&cfg), "--out", s(&other)])
        .env("T2D_SEED", "12")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(Benchmark::load(&other).unwrap().config.seed, 12);
    assert_ne!(std::fs::read(other.join("benchmark.json")).unwrap(), bytes[0]);
}

#[test]
fn zero_kind_config_gives_plain_routes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("b.toml");
    write(&cfg, "kinds = []\nplain = 3\n");
    assert_eq!(code(&t2d(&["gen-routes", "--config", s(&cfg), "--out", s(dir.path())])), 0);
    let b = Benchmark::load(dir.path()).unwrap();
    assert_eq!(b.train.len(), 3);
    assert!(b.eval.is_empty());
    assert!(b.train.iter().all(|r| r.kind.is_none() && r.scenarios.is_empty()));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("plain-file");
    write(&file, "");
    let cfg = dir.path().join("b.toml");
    write(&cfg, "kinds = []\nplain = 1\n");
    let o = t2d(&["gen-routes", "--config", s(&cfg), "--out", s(&file.join("sub"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_writes_one_line_per_route() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.toml");
    write(&empty, "kinds = []\nplain = 0\n");
    let bench = dir.path().join("empty");
    assert_eq!(code(&t2d(&["gen-routes", "--config", s(&empty), "--out", s(&bench)])), 0);
    let logs = dir.path().join("empty.jsonl");
    let o = t2d(&["eval", "--policy", "do-nothing", "--benchmark", s(&bench), "--out", s(&logs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&logs).unwrap(), "");

    let cfg = dir.path().join("b.toml");
    write(&cfg, &small_benchmark_toml());
    let bench = dir.path().join("bench");
    assert_eq!(code(&t2d(&["gen-routes", "--config", s(&cfg), "--out", s(&bench)])), 0);
    let mut runs = Vec::new();
    for i in 0..2 {
        let logs = dir.path().join(format!("auto{i}.jsonl"));
        let o = t2d(&["eval", "--policy", "autopilot", "--benchmark", s(&bench), "--out", s(&logs), "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(std::fs::read_to_string(&logs).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let parsed = t2d_core::metrics::parse_logs(&runs[0], "logs").unwrap();
    let b = Benchmark::load(&bench).unwrap();
    let ids: Vec<_> = parsed.iter().map(|l| l.route_id.clone()).collect();
    let want: Vec<_> = b.eval.iter().map(|r| r.route.id.clone()).collect();
    assert_eq!(ids, want);

    // logs from the eval split do not line up with the train split
    let summary = dir.path().join("summary.csv");
    let logs0 = dir.path().join("auto0.jsonl");
    let o = t2d(&["metrics", "--logs", s(&logs0), "--out", s(&summary), "--benchmark", s(&bench), "--split", "train"]);
    assert_eq!(code(&o), 1);
    let o = t2d(&["metrics", "--logs", s(&logs0), "--out", s(&summary), "--benchmark", s(&bench)]);
    assert_eq!(code(&o), 0);

    assert_eq!(code(&t2d(&["eval", "--benchmark", s(&bench), "--out", s(&logs)])), 1);
}

#[test]
fn autopilot_completes_a_plain_route() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("b.toml");
    write(&cfg, "kinds = [\"LaneFollow\"]\ntrain-per-kind = 0\neval-per-kind = 1\nplain = 0\n");
    assert_eq!(code(&t2d(&["gen-routes", "--config", s(&cfg), "--out", s(dir.path())])), 0);
    let logs = dir.path().join("logs.jsonl");
    let o = t2d(&["eval", "--policy", "autopilot", "--benchmark", s(dir.path()), "--out", s(&logs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = t2d_core::metrics::parse_logs(&std::fs::read_to_string(&logs).unwrap(), "logs").unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed[0].completion, 1.0);
    assert!(parsed[0].infractions.is_empty());
}

fn log(id: &str, rc: f64, kinds: &[InfractionKind], length: f64, density: f64) -> EpisodeLog {
    EpisodeLog {
        route_id: id.into(),
        scenario_kind: None,
        completion: rc,
        infractions: kinds.iter().enumerate().map(|(i, &k)| InfractionEvent::new(k, i as u64)).collect(),
        route_length: length,
        scenario_density: density,
        done_reason: None,
        steps: 0,
        total_reward: 0.0,
    }
}

#[test]
fn metrics_reproduces_hand_computation() {
    let dir = TempDir::new().unwrap();
    let logs = dir.path().join("logs.jsonl");
    let stop = InfractionKind::StopSign;
    write(
        &logs,
        &write_logs(&[
            log("a", 1.0, &[stop], 5000.0, 0.0),
            log("b", 1.0, &[stop, stop], 10_000.0, 0.0),
            log("c", 0.5, &[stop, stop], 1000.0, 2.0),
        ]),
    );
    let pen = dir.path().join("p.toml");
    write(&pen, "stop-sign = 0.8\n");
    let out = dir.path().join("summary.csv");
    let o = t2d(&["metrics", "--logs", s(&logs), "--penalties", s(&pen), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let col = |r: usize, c: usize| rows[r][c].parse::<f64>().unwrap();
    // DS = RC * 0.8^n, WDS divides the counts by the scenario density
    assert_eq!((col(0, 3), col(0, 4)), (0.8, 0.8));
    assert_eq!((col(1, 3), col(1, 4)), (0.64, 0.64));
    assert_eq!((col(2, 3), col(2, 4)), (0.32, 0.4));
    assert_eq!(rows[3][0], "mean");
    assert!((col(3, 2) - 2.5 / 3.0).abs() < 1e-6);
    assert!((col(3, 3) - (0.8 + 0.64 + 0.32) / 3.0).abs() < 1e-6);

    let perfect = dir.path().join("perfect.jsonl");
    write(&perfect, &write_logs(&[log("p", 1.0, &[], 500.0, 1.0)]));
    assert_eq!(code(&t2d(&["metrics", "--logs", s(&perfect), "--out", s(&out)])), 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("p,plain,1.000000,1.000000,1.000000"), "{csv}");

    let mut text = std::fs::read_to_string(&logs).unwrap();
    text.push_str("{not json\n");
    write(&logs, &text);
    let o = t2d(&["metrics", "--logs", s(&logs), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":4"));
}

#[test]
fn train_and_dream_from_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = initial_checkpoint(dir.path());
    let entries: Vec<_> = std::fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".t2d"))
        .collect();
    assert_eq!(entries, vec![checkpoint_name(0)]);

    let bench = dir.path().join("bench");
    let cfg = dir.path().join("b.toml");
    write(&cfg, &small_benchmark_toml());
    assert_eq!(code(&t2d(&["gen-routes", "--config", s(&cfg), "--out", s(&bench)])), 0);

    for n in [1usize, 3] {
        let out = dir.path().join(format!("dream{n}"));
        let o = t2d(&["dream", "--ckpt", s(&ckpt), "--route", s(&bench), "--frames", &n.to_string(), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let pgm = std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
            .count();
        assert_eq!(pgm, n * t2d_core::bev::NUM_CHANNELS);
    }
    let o = t2d(&["dream", "--ckpt", s(&ckpt), "--route", s(&bench), "--frames", "0", "--out", s(&dir.path().join("d0"))]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("d0").exists());

    let bad = dir.path().join("bad.t2d");
    write(&bad, "NOPE and then some bytes");
    let o = t2d(&["dream", "--ckpt", s(&bad), "--route", s(&bench), "--frames", "1", "--out", s(&dir.path().join("d1"))]);
    assert_eq!(code(&o), 1);
    let train_cfg = dir.path().join("train.toml");
    let o = t2d(&["train", "--config", s(&train_cfg), "--out", s(&dir.path().join("r2")), "--resume", s(&bad)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_reports_and_fails_when_corrupted() {
    let ok = t2d(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&ok), 0);
    let again = t2d(&["gradcheck", "--seed", "1"]);
    assert_eq!(ok.stdout, again.stdout);
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("matmul")));
    assert!(text.lines().all(|l| l.ends_with("PASS")));
    let bad = t2d(&["gradcheck", "--seed", "1", "--corrupt", "conv2d"]);
    assert_ne!(code(&bad), 0);
    let text = String::from_utf8(bad.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with("FAIL")).count(), 1);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let train = TrainConfig::load(&root.join("train.toml")).unwrap();
    assert_eq!(train.benchmark.eval_per_kind * train.benchmark.kinds.len(), 30);
    let bench: BenchmarkConfig = toml::from_str(&std::fs::read_to_string(root.join("benchmark.toml")).unwrap()).unwrap();
    assert_eq!(bench.kinds, train.benchmark.kinds);
    t2d_core::metrics::PenaltyTable::load(&root.join("penalties.toml")).unwrap();
}
