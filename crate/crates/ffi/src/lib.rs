//! C ABI over the driving simulator, benchmark generator, policies and
//! metrics.
//!
//! Every function returns a [`T2dStatus`]; on failure a message is kept per
//! thread and can be read with [`t2d_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Strings returned through
//! out-parameters are released with [`t2d_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use t2d_core::actions::{ActionId, NUM_ACTIONS};
use t2d_core::bev::{MEASUREMENT_LEN, NUM_CHANNELS};
use t2d_core::metrics::{parse_logs, summarize, summary_csv, PenaltyTable};
use t2d_core::scenario::{build_benchmark, Benchmark, BenchmarkConfig, BenchmarkRoute};
use t2d_core::trainer::{
    load_agent, AgentPolicy, Autopilot, DoNothing, DriveEnv, EnvSettings, EpisodePolicy, RandomPolicy,
};
use t2d_core::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum T2dStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    OutOfRange = 3,
    BufferTooSmall = 4,
    Usage = 10,
    Validation = 11,
    MalformedRoute = 12,
    Placement = 13,
    Parse = 14,
    Checkpoint = 15,
    UnknownInfraction = 16,
    Io = 20,
    NonFinite = 21,
    Unavailable = 22,
    Panic = 99,
}

pub const T2D_SPLIT_TRAIN: i32 = 0;
pub const T2D_SPLIT_EVAL: i32 = 1;

pub const T2D_POLICY_DO_NOTHING: i32 = 0;
pub const T2D_POLICY_RANDOM: i32 = 1;
pub const T2D_POLICY_AUTOPILOT: i32 = 2;

/// Number of discrete actions.
pub const T2D_NUM_ACTIONS: usize = 30;
/// Number of BEV channels per observation.
pub const T2D_NUM_CHANNELS: usize = 34;
/// Number of measurement values per observation.
pub const T2D_MEASUREMENT_LEN: usize = 20;

// the header needs literals
const _: () = assert!(T2D_NUM_ACTIONS == NUM_ACTIONS);
const _: () = assert!(T2D_NUM_CHANNELS == NUM_CHANNELS);
const _: () = assert!(T2D_MEASUREMENT_LEN == MEASUREMENT_LEN);

/// Training and evaluation routes.
pub struct T2dBenchmark(Benchmark);

/// One episode on one route.
pub struct T2dEnv {
    env: DriveEnv,
    reward: f64,
}

/// A driving policy; tracks the previous action of the episode it drives.
pub struct T2dPolicy {
    inner: Box<dyn EpisodePolicy>,
    prev: Option<ActionId>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(T2dStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MalformedRoute(_) => T2dStatus::MalformedRoute,
            Error::Placement { .. } => T2dStatus::Placement,
            Error::Usage(_) => T2dStatus::Usage,
            Error::Validation(_) => T2dStatus::Validation,
            Error::NonFinite(_) => T2dStatus::NonFinite,
            Error::Unavailable(_) => T2dStatus::Unavailable,
            Error::UnknownInfraction(_) => T2dStatus::UnknownInfraction,
            Error::Checkpoint(_) => T2dStatus::Checkpoint,
            Error::Parse { .. } => T2dStatus::Parse,
            Error::Io { .. } => T2dStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: T2dStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> T2dStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => T2dStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            T2dStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(T2dStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(T2dStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(T2dStatus::NullArgument, format!("{what} is null")))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(T2dStatus::NullArgument, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(T2dStatus::NullArgument, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(T2dStatus::NullArgument, "output handle is null"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

fn split_routes(b: &Benchmark, split: i32) -> Result<&[BenchmarkRoute], Failure> {
    match split {
        T2D_SPLIT_TRAIN => Ok(&b.train),
        T2D_SPLIT_EVAL => Ok(&b.eval),
        _ => Err(fail(T2dStatus::OutOfRange, format!("unknown split {split}"))),
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn t2d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn t2d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn t2d_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a benchmark from a TOML config (NULL for defaults).
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_benchmark_generate(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut T2dBenchmark,
) -> T2dStatus {
    guard(|| {
        let mut cfg = if config_toml.is_null() {
            BenchmarkConfig::default()
        } else {
            toml::from_str::<BenchmarkConfig>(text(config_toml, "config")?)
                .map_err(|e| fail(T2dStatus::Parse, format!("benchmark config: {e}")))?
        };
        cfg.seed = seed;
        put_handle(out, T2dBenchmark(build_benchmark(&cfg)?))
    })
}

/// Loads `benchmark.json` from a directory, or the file itself.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_benchmark_load(path: *const c_char, out: *mut *mut T2dBenchmark) -> T2dStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        put_handle(out, T2dBenchmark(Benchmark::load(&path)?))
    })
}

/// Writes `benchmark.json` into `dir`, creating it if needed.
///
/// # Safety
/// `bench` is a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn t2d_benchmark_save(bench: *const T2dBenchmark, dir: *const c_char) -> T2dStatus {
    guard(|| {
        let b = obj(bench, "benchmark")?;
        b.0.save(&PathBuf::from(text(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of routes in a split.
///
/// # Safety
/// `bench` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_benchmark_route_count(bench: *const T2dBenchmark, split: i32, out: *mut usize) -> T2dStatus {
    guard(|| {
        let n = split_routes(&obj(bench, "benchmark")?.0, split)?.len();
        put(out, n, "out")
    })
}

/// Copies a route id as a newly allocated string.
///
/// # Safety
/// `bench` is a live handle; `out` is writable. Free the result with
/// [`t2d_string_free`].
#[no_mangle]
pub unsafe extern "C" fn t2d_benchmark_route_id(
    bench: *const T2dBenchmark,
    split: i32,
    index: usize,
    out: *mut *mut c_char,
) -> T2dStatus {
    guard(|| {
        let routes = split_routes(&obj(bench, "benchmark")?.0, split)?;
        let r = routes
            .get(index)
            .ok_or_else(|| fail(T2dStatus::OutOfRange, format!("route {index} of {}", routes.len())))?;
        put(out, CString::new(r.route.id.clone()).expect("ids have no nul").into_raw(), "out")
    })
}

/// # Safety
/// `bench` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn t2d_benchmark_free(bench: *mut T2dBenchmark) {
    if !bench.is_null() {
        drop(Box::from_raw(bench));
    }
}

/// Starts an episode on route `index` of a split with default simulator
/// settings. The benchmark may be freed afterwards.
///
/// # Safety
/// `bench` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_new(
    bench: *const T2dBenchmark,
    split: i32,
    index: usize,
    seed: u64,
    out: *mut *mut T2dEnv,
) -> T2dStatus {
    guard(|| {
        let routes = split_routes(&obj(bench, "benchmark")?.0, split)?;
        let r = routes
            .get(index)
            .ok_or_else(|| fail(T2dStatus::OutOfRange, format!("route {index} of {}", routes.len())))?;
        let (env, _) = DriveEnv::new(r, seed, &EnvSettings::default())?;
        put_handle(out, T2dEnv { env, reward: 0.0 })
    })
}

/// Side length in pixels of the square BEV raster.
///
/// # Safety
/// `env` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_bev_size(env: *const T2dEnv, out: *mut usize) -> T2dStatus {
    guard(|| {
        let size = obj(env, "env")?.env.observe().size;
        put(out, size, "out")
    })
}

/// Copies the current observation: `T2D_NUM_CHANNELS * size * size` mask
/// bytes in channel-major order and `T2D_MEASUREMENT_LEN` measurements.
/// Either buffer may be NULL to skip it.
///
/// # Safety
/// Non-null buffers hold at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_observe(
    env: *const T2dEnv,
    masks: *mut u8,
    masks_len: usize,
    measurements: *mut f32,
    measurements_len: usize,
) -> T2dStatus {
    guard(|| {
        let obs = obj(env, "env")?.env.observe();
        if !masks.is_null() {
            if masks_len < obs.masks.len() {
                return Err(fail(T2dStatus::BufferTooSmall, format!("masks need {} bytes", obs.masks.len())));
            }
            std::ptr::copy_nonoverlapping(obs.masks.as_ptr(), masks, obs.masks.len());
        }
        if !measurements.is_null() {
            if measurements_len < MEASUREMENT_LEN {
                return Err(fail(T2dStatus::BufferTooSmall, format!("measurements need {MEASUREMENT_LEN} values")));
            }
            std::ptr::copy_nonoverlapping(obs.measurements.as_ptr(), measurements, MEASUREMENT_LEN);
        }
        Ok(())
    })
}

/// Applies one action. `reward` and `done` may be NULL.
///
/// # Safety
/// `env` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_step(env: *mut T2dEnv, action: usize, reward: *mut f64, done: *mut i32) -> T2dStatus {
    guard(|| {
        let e = obj_mut(env, "env")?;
        if action >= NUM_ACTIONS {
            return Err(fail(T2dStatus::OutOfRange, format!("action {action} >= {NUM_ACTIONS}")));
        }
        if e.env.is_done() {
            return Err(fail(T2dStatus::Usage, "episode already finished"));
        }
        let step = e.env.step(action)?;
        e.reward += step.reward;
        if !reward.is_null() {
            reward.write(step.reward);
        }
        if !done.is_null() {
            done.write(e.env.is_done() as i32);
        }
        Ok(())
    })
}

/// Route completion in `[0, 1]`.
///
/// # Safety
/// `env` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_completion(env: *const T2dEnv, out: *mut f64) -> T2dStatus {
    guard(|| put(out, obj(env, "env")?.env.log().completion, "out"))
}

/// Sum of rewards so far.
///
/// # Safety
/// `env` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_total_reward(env: *const T2dEnv, out: *mut f64) -> T2dStatus {
    guard(|| put(out, obj(env, "env")?.reward, "out"))
}

/// The episode log as one JSON line, as accepted by the metrics functions.
///
/// # Safety
/// `env` is a live handle; `out` is writable. Free the result with
/// [`t2d_string_free`].
#[no_mangle]
pub unsafe extern "C" fn t2d_env_log(env: *const T2dEnv, out: *mut *mut c_char) -> T2dStatus {
    guard(|| {
        let line = obj(env, "env")?.env.log().to_json_line();
        put(out, CString::new(line).expect("json has no nul").into_raw(), "out")
    })
}

/// # Safety
/// `env` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn t2d_env_free(env: *mut T2dEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// One of the scripted policies (`T2D_POLICY_*`).
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_policy_scripted(kind: i32, seed: u64, out: *mut *mut T2dPolicy) -> T2dStatus {
    guard(|| {
        let inner: Box<dyn EpisodePolicy> = match kind {
            T2D_POLICY_DO_NOTHING => Box::new(DoNothing),
            T2D_POLICY_RANDOM => Box::new(RandomPolicy::new(seed)),
            T2D_POLICY_AUTOPILOT => Box::new(Autopilot),
            _ => return Err(fail(T2dStatus::OutOfRange, format!("unknown policy {kind}"))),
        };
        put_handle(out, T2dPolicy { inner, prev: None })
    })
}

/// The greedy actor of a training checkpoint.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_policy_load(path: *const c_char, out: *mut *mut T2dPolicy) -> T2dStatus {
    guard(|| {
        let (agent, _) = load_agent(&PathBuf::from(text(path, "path")?))?;
        put_handle(
            out,
            T2dPolicy {
                inner: Box::new(AgentPolicy::new(agent)),
                prev: None,
            },
        )
    })
}

/// Chooses the next action for `env`. The policy restarts its episode state
/// whenever `env` has not stepped yet.
///
/// # Safety
/// `policy` and `env` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t2d_policy_act(policy: *mut T2dPolicy, env: *const T2dEnv, out: *mut usize) -> T2dStatus {
    guard(|| {
        let p = obj_mut(policy, "policy")?;
        let e = &obj(env, "env")?.env;
        if e.steps() == 0 {
            p.inner.begin();
            p.prev = None;
        }
        let a = p.inner.act(e, &e.observe(), p.prev)?;
        p.prev = Some(a);
        put(out, a, "out")
    })
}

/// # Safety
/// `policy` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn t2d_policy_free(policy: *mut T2dPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Summary table (CSV) of newline-separated JSON episode logs. `penalties`
/// is a TOML table of `kind = factor`, or NULL for defaults.
///
/// # Safety
/// String arguments are NULL-terminated; `out` is writable. Free the result
/// with [`t2d_string_free`].
#[no_mangle]
pub unsafe extern "C" fn t2d_metrics_summary(
    logs: *const c_char,
    penalties: *const c_char,
    out: *mut *mut c_char,
) -> T2dStatus {
    guard(|| {
        let table = if penalties.is_null() {
            PenaltyTable::default()
        } else {
            PenaltyTable::from_toml(text(penalties, "penalties")?, "penalties")?
        };
        let parsed = parse_logs(text(logs, "logs")?, "logs")?;
        let csv = summary_csv(&summarize(&parsed, &table)?);
        put(out, CString::new(csv).expect("csv has no nul").into_raw(), "out")
    })
}
