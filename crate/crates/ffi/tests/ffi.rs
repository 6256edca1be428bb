use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use t2d_core::scenario::Benchmark;
use t2d_ffi::*;

fn last_error() -> String {
    let p = t2d_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn benchmark(config: &str, seed: u64) -> *mut T2dBenchmark {
    let c = CString::new(config).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { t2d_benchmark_generate(c.as_ptr(), seed, &mut b) }, T2dStatus::Ok);
    b
}

const ONE_ROUTE: &str = "kinds = [\"HardBrake\"]\ntrain-per-kind = 2\nplain = 0\neval-per-kind = 1\n";

#[test]
fn benchmark_handles() {
    let b = benchmark(ONE_ROUTE, 3);
    let mut n = 0;
    unsafe {
        assert_eq!(t2d_benchmark_route_count(b, T2D_SPLIT_TRAIN, &mut n), T2dStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(t2d_benchmark_route_count(b, 7, &mut n), T2dStatus::OutOfRange);
        let mut id = ptr::null_mut();
        assert_eq!(t2d_benchmark_route_id(b, T2D_SPLIT_EVAL, 0, &mut id), T2dStatus::Ok);
        let got = CStr::from_ptr(id).to_str().unwrap().to_owned();
        t2d_string_free(id);
        assert_eq!(t2d_benchmark_route_id(b, T2D_SPLIT_EVAL, 1, &mut id), T2dStatus::OutOfRange);
        assert!(last_error().contains("route 1 of 1"));

        let dir = tempfile::TempDir::new().unwrap();
        let d = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(t2d_benchmark_save(b, d.as_ptr()), T2dStatus::Ok);
        let loaded = Benchmark::load(dir.path()).unwrap();
        assert_eq!(loaded.eval[0].route.id, got);
        let mut again = ptr::null_mut();
        assert_eq!(t2d_benchmark_load(d.as_ptr(), &mut again), T2dStatus::Ok);
        t2d_benchmark_free(again);
        t2d_benchmark_free(b);

        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        assert_eq!(t2d_benchmark_load(missing.as_ptr(), &mut again), T2dStatus::Io);
        let bad = CString::new("kinds = 3").unwrap();
        assert_eq!(t2d_benchmark_generate(bad.as_ptr(), 0, &mut again), T2dStatus::Parse);
        assert_eq!(t2d_benchmark_generate(ptr::null(), 0, ptr::null_mut()), T2dStatus::NullArgument);
        t2d_benchmark_free(ptr::null_mut());
    }
}

#[test]
fn errors_clear_on_success() {
    unsafe {
        let mut n = 0;
        assert_eq!(t2d_benchmark_route_count(ptr::null(), 0, &mut n), T2dStatus::NullArgument);
        assert!(last_error().contains("benchmark"));
        let b = benchmark(ONE_ROUTE, 1);
        assert_eq!(t2d_benchmark_route_count(b, 0, &mut n), T2dStatus::Ok);
        assert!(t2d_last_error().is_null());
        t2d_benchmark_free(b);
    }
    let v = unsafe { CStr::from_ptr(t2d_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn do_nothing_episode_through_handles() {
    let b = benchmark(ONE_ROUTE, 5);
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(t2d_env_new(b, T2D_SPLIT_EVAL, 0, 9, &mut env), T2dStatus::Ok);
        t2d_benchmark_free(b);
        let mut size = 0;
        assert_eq!(t2d_env_bev_size(env, &mut size), T2dStatus::Ok);
        let mut masks = vec![0u8; T2D_NUM_CHANNELS * size * size];
        let mut meas = [0f32; T2D_MEASUREMENT_LEN];
        assert_eq!(t2d_env_observe(env, masks.as_mut_ptr(), masks.len() - 1, ptr::null_mut(), 0), T2dStatus::BufferTooSmall);
        assert_eq!(
            t2d_env_observe(env, masks.as_mut_ptr(), masks.len(), meas.as_mut_ptr(), meas.len()),
            T2dStatus::Ok
        );
        assert!(masks.iter().all(|&m| m <= 1) && masks.iter().any(|&m| m == 1));
        assert_eq!(t2d_env_step(env, T2D_NUM_ACTIONS, ptr::null_mut(), ptr::null_mut()), T2dStatus::OutOfRange);

        let mut policy = ptr::null_mut();
        assert_eq!(t2d_policy_scripted(T2D_POLICY_DO_NOTHING, 0, &mut policy), T2dStatus::Ok);
        let (mut done, mut steps, mut sum) = (0, 0, 0.0);
        while done == 0 {
            let mut a = 0;
            assert_eq!(t2d_policy_act(policy, env, &mut a), T2dStatus::Ok);
            let mut r = 0.0;
            assert_eq!(t2d_env_step(env, a, &mut r, &mut done), T2dStatus::Ok);
            sum += r;
            steps += 1;
        }
        assert!(steps > 1);
        let mut total = 0.0;
        assert_eq!(t2d_env_total_reward(env, &mut total), T2dStatus::Ok);
        assert_eq!(total, sum);
        let mut c = 1.0;
        assert_eq!(t2d_env_completion(env, &mut c), T2dStatus::Ok);
        assert!(c < 0.01);
        let mut line = ptr::null_mut();
        assert_eq!(t2d_env_log(env, &mut line), T2dStatus::Ok);
        let mut csv = ptr::null_mut();
        let pen = CString::new("collision-vehicle = 0.5\n").unwrap();
        assert_eq!(t2d_metrics_summary(line, pen.as_ptr(), &mut csv), T2dStatus::Ok);
        assert!(CStr::from_ptr(csv).to_str().unwrap().starts_with("route-id,kind,rc,ds,wds"));
        let garbage = CString::new("{oops").unwrap();
        assert_eq!(t2d_metrics_summary(garbage.as_ptr(), ptr::null(), &mut csv), T2dStatus::Parse);
        t2d_string_free(line);
        t2d_policy_free(policy);
        t2d_env_free(env);
    }
}

#[test]
fn unknown_policy_and_bad_checkpoint() {
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(t2d_policy_scripted(42, 0, &mut p), T2dStatus::OutOfRange);
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("bad.t2d");
        std::fs::write(&path, b"XXXXnot a checkpoint").unwrap();
        let c = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(t2d_policy_load(c.as_ptr(), &mut p), T2dStatus::Checkpoint);
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// Directory holding the static library built alongside this test.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_parses_as_c_and_cpp() {
    let header = crate_dir().join("include/t2d.h");
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        let st = Command::new("gcc")
            .args(["-fsyntax-only", "-Wall", "-Werror", std, "-x", lang])
            .arg(&header)
            .status()
            .expect("gcc runs");
        assert!(st.success(), "{lang}");
    }
}

#[test]
fn c_program_drives_an_episode() {
    let lib = artifact_dir().join("libt2d_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::TempDir::new().unwrap();
    let exe = dir.path().join("smoke");
    let st = Command::new("gcc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("gcc runs");
    assert!(st.success());
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("completion 1.000"), "{stdout}");
}
