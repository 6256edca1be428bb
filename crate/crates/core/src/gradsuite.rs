//! Finite-difference checks of every differentiable primitive, the layers
//! built from them, and the world-model, critic and actor losses.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::NUM_ACTIONS;
use crate::bev::{BevObservation, MEASUREMENT_LEN, NUM_CHANNELS};
use crate::error::Result;
use crate::nn::conv::ConvGeom;
use crate::nn::dist::{categorical_kl, categorical_kl_f64, categorical_probs, entropy, sample_straight_through};
use crate::nn::gradcheck::{check_inputs, check_store, CheckConfig, CheckReport};
use crate::nn::layers::{ConvBlock, DeconvBlock, GruCell, Linear, Mlp, Norm};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::planner::{actor_loss, critic_loss, Planner, PlannerConfig};
use crate::replay::{SequenceBatch, SlotSource, TransitionRecord};
use crate::world_model::{WorldModel, WorldModelConfig};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Required distance between any row's KL and the free-bits floor.
const KL_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, Default)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Scales the analytic gradient of the named check by 1.5, so that the
    /// check must fail.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(TOLERANCE))
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed(TOLERANCE))
            .map(|c| c.name.as_str())
            .collect()
    }

    /// One `name max-rel-err PASS|FAIL` line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed(TOLERANCE) { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{:<28} {:.3e} {verdict}", c.name, c.max_rel_err);
        }
        s
    }
}

type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Var>;

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data)
}

/// Values bounded away from zero, so kinks at zero stay out of reach.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data)
}

/// `Σ_i w_i x_i` with fixed irregular weights, so every output element
/// contributes a distinct gradient.
fn wsum(t: &Tape<f64>, x: Var) -> Var {
    let shape = t.shape(x);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    t.sum(t.mul(x, t.constant(Tensor::from_f64(&shape, &w))))
}

fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let m = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);
    let bce_target = Rc::new(uniform(rng, &[3, 5], 0.0, 1.0));
    let bce_weight = Rc::new(uniform(rng, &[3, 5], 0.2, 1.0));
    vec![
        ("add", vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.add(v[0], v[1])))),
        ("sub", vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.sub(v[0], v[1])))),
        ("mul", vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.mul(v[0], v[1])))),
        ("add_row", vec![m(rng, &[3, 4]), m(rng, &[4])], Box::new(|t, v| wsum(t, t.add_row(v[0], v[1])))),
        ("mul_row", vec![m(rng, &[3, 4]), m(rng, &[4])], Box::new(|t, v| wsum(t, t.mul_row(v[0], v[1])))),
        ("mul_col", vec![m(rng, &[3, 4]), m(rng, &[3])], Box::new(|t, v| wsum(t, t.mul_col(v[0], v[1])))),
        ("scale", vec![m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.scale(v[0], -1.7)))),
        ("neg", vec![m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.neg(v[0])))),
        ("add_scalar", vec![m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.mul(t.add_scalar(v[0], 0.4), v[0])))),
        ("silu", vec![uniform(rng, &[3, 4], -3.0, 3.0)], Box::new(|t, v| wsum(t, t.silu(v[0])))),
        ("sigmoid", vec![uniform(rng, &[3, 4], -3.0, 3.0)], Box::new(|t, v| wsum(t, t.sigmoid(v[0])))),
        ("tanh", vec![uniform(rng, &[3, 4], -2.0, 2.0)], Box::new(|t, v| wsum(t, t.tanh(v[0])))),
        ("exp", vec![m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.exp(v[0])))),
        ("ln", vec![uniform(rng, &[3, 4], 0.5, 2.0)], Box::new(|t, v| wsum(t, t.ln(v[0])))),
        ("clamp_min", vec![off_zero(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.clamp_min(v[0], 0.0)))),
        ("matmul", vec![m(rng, &[3, 4]), m(rng, &[4, 5])], Box::new(|t, v| wsum(t, t.matmul(v[0], v[1])))),
        ("softmax", vec![uniform(rng, &[3, 8], -2.0, 2.0)], Box::new(|t, v| wsum(t, t.softmax(v[0], 4)))),
        ("log_softmax", vec![uniform(rng, &[3, 8], -2.0, 2.0)], Box::new(|t, v| wsum(t, t.log_softmax(v[0], 4)))),
        ("reshape", vec![m(rng, &[2, 6])], Box::new(|t, v| wsum(t, t.reshape(t.exp(v[0]), &[3, 4])))),
        ("sum", vec![m(rng, &[3, 4])], Box::new(|t, v| t.sum(t.mul(v[0], v[0])))),
        ("mean", vec![m(rng, &[3, 4])], Box::new(|t, v| t.mean(t.mul(v[0], v[0])))),
        ("sum_cols", vec![m(rng, &[3, 4])], Box::new(|t, v| wsum(t, t.sum_cols(t.exp(v[0]))))),
        (
            "concat_cols",
            vec![m(rng, &[3, 2]), m(rng, &[3, 3])],
            Box::new(|t, v| wsum(t, t.concat_cols(&[v[0], v[1]]))),
        ),
        ("slice_cols", vec![m(rng, &[3, 5])], Box::new(|t, v| wsum(t, t.slice_cols(v[0], 1, 3)))),
        (
            "concat_rows",
            vec![m(rng, &[2, 3]), m(rng, &[1, 3])],
            Box::new(|t, v| wsum(t, t.concat_rows(&[v[0], v[1]]))),
        ),
        ("slice_rows", vec![m(rng, &[4, 3])], Box::new(|t, v| wsum(t, t.slice_rows(v[0], 1, 2)))),
        ("layer_norm", vec![uniform(rng, &[3, 6], -2.0, 2.0)], Box::new(|t, v| wsum(t, t.layer_norm(v[0], 1e-5)))),
        (
            "conv2d",
            vec![m(rng, &[2, 6, 6, 3]), uniform(rng, &[48, 5], -0.3, 0.3)],
            Box::new(|t, v| wsum(t, t.conv2d(v[0], v[1], ConvGeom::DOWN2))),
        ),
        (
            "conv_transpose2d",
            vec![m(rng, &[2, 3, 3, 4]), uniform(rng, &[4, 32], -0.3, 0.3)],
            Box::new(|t, v| wsum(t, t.conv_transpose2d(v[0], v[1], 2, ConvGeom::DOWN2))),
        ),
        (
            "bce_with_logits",
            vec![uniform(rng, &[3, 5], -3.0, 3.0)],
            Box::new(move |t, v| wsum(t, t.bce_with_logits(v[0], bce_target.clone(), Some(bce_weight.clone())))),
        ),
        (
            "categorical_probs",
            vec![uniform(rng, &[3, 8], -2.0, 2.0)],
            Box::new(|t, v| wsum(t, categorical_probs(t, v[0], 4, 0.01))),
        ),
        (
            "categorical_kl",
            vec![uniform(rng, &[3, 8], -2.0, 2.0), uniform(rng, &[3, 8], -2.0, 2.0)],
            Box::new(|t, v| {
                let q = categorical_probs(t, v[0], 4, 0.01);
                let p = categorical_probs(t, v[1], 4, 0.01);
                wsum(t, categorical_kl(t, q, p))
            }),
        ),
        (
            "entropy",
            vec![uniform(rng, &[3, 8], -2.0, 2.0)],
            Box::new(|t, v| wsum(t, entropy(t, t.softmax(v[0], 8)))),
        ),
        (
            "straight_through_sample",
            vec![uniform(rng, &[3, 8], -2.0, 2.0)],
            Box::new(|t, v| {
                let p = t.softmax(v[0], 4);
                let mut r = ChaCha8Rng::seed_from_u64(17);
                wsum(t, sample_straight_through(t, p, 4, &mut r))
            }),
        ),
        (
            "detach",
            vec![m(rng, &[3, 4])],
            Box::new(|t, v| wsum(t, t.mul(t.detach(t.exp(v[0])), v[0]))),
        ),
    ]
}

fn layers(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ParamStore<f64>, Tensor<f64>, Box<dyn Fn(&Tape<f64>, &ParamStore<f64>, Var) -> Var>)> {
    let mut out: Vec<(&'static str, ParamStore<f64>, Tensor<f64>, Box<dyn Fn(&Tape<f64>, &ParamStore<f64>, Var) -> Var>)> =
        Vec::new();

    let mut s = ParamStore::new();
    let l = Linear::new(&mut s, "lin", 5, 4, rng);
    out.push(("linear", s.cast(), uniform(rng, &[3, 5], -1.0, 1.0), Box::new(move |t, s, x| wsum(t, l.forward(t, s, x)))));

    let mut s = ParamStore::new();
    let n = Norm::new(&mut s, "norm", 6, rng);
    for id in s.ids().collect::<Vec<_>>() {
        for v in s.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    out.push(("norm", s.cast(), uniform(rng, &[3, 6], -2.0, 2.0), Box::new(move |t, s, x| wsum(t, n.forward(t, s, x)))));

    let mut s = ParamStore::new();
    let mlp = Mlp::new(&mut s, "mlp", 5, 8, 2, 3, None, rng);
    out.push(("mlp", s.cast(), uniform(rng, &[3, 5], -1.0, 1.0), Box::new(move |t, s, x| wsum(t, mlp.forward(t, s, x)))));

    let mut s = ParamStore::new();
    let c = ConvBlock::new(&mut s, "conv", 3, 4, rng);
    out.push((
        "conv_block",
        s.cast(),
        uniform(rng, &[2, 8, 8, 3], -1.0, 1.0),
        Box::new(move |t, s, x| wsum(t, c.forward(t, s, x))),
    ));

    let mut s = ParamStore::new();
    let d = DeconvBlock::new(&mut s, "deconv", 4, 3, false, rng);
    out.push((
        "deconv_block",
        s.cast(),
        uniform(rng, &[2, 3, 3, 4], -1.0, 1.0),
        Box::new(move |t, s, x| wsum(t, d.forward(t, s, x))),
    ));

    let mut s = ParamStore::new();
    let d = DeconvBlock::new(&mut s, "deconv_out", 4, 2, true, rng);
    out.push((
        "deconv_block_last",
        s.cast(),
        uniform(rng, &[2, 3, 3, 4], -1.0, 1.0),
        Box::new(move |t, s, x| wsum(t, d.forward(t, s, x))),
    ));

    let mut s = ParamStore::new();
    let g = GruCell::new(&mut s, "gru", 4, 6, rng);
    let h0 = uniform(rng, &[3, 6], -1.0, 1.0);
    out.push((
        "gru_cell",
        s.cast(),
        uniform(rng, &[3, 4], -1.0, 1.0),
        Box::new(move |t, s, x| wsum(t, g.forward(t, s, t.constant(h0.clone()), x))),
    ));
    out
}

/// Random sequences at a 16 x 16 raster, the last slot ending in a
/// termination.
pub fn random_batch(batch: usize, len: usize, rng: &mut impl Rng) -> SequenceBatch {
    let size = 16;
    let episodes: Vec<Vec<TransitionRecord>> = (0..batch)
        .map(|i| {
            (0..len)
                .map(|t| {
                    let obs = BevObservation {
                        size,
                        masks: (0..NUM_CHANNELS * size * size).map(|_| rng.gen_bool(0.2) as u8).collect(),
                        measurements: std::array::from_fn::<f32, MEASUREMENT_LEN, _>(|_| rng.gen_range(-1.0..1.0)),
                    };
                    let action = (t > 0).then(|| rng.gen_range(0..NUM_ACTIONS));
                    let done = i + 1 == batch && t + 1 == len;
                    TransitionRecord::new(&obs, action, rng.gen_range(-1.0..1.0), done)
                })
                .collect()
        })
        .collect();
    let slots: Vec<_> = episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let src = SlotSource {
                episode: i as u64,
                start: 0,
                valid: len,
                anchored: false,
            };
            (e.as_slice(), src)
        })
        .collect();
    SequenceBatch::from_slots(&slots, len, size).expect("well-formed batch")
}

/// Smallest distance of a per-row KL from the free-bits floor.
fn kl_clearance(wm: &WorldModel, store: &ParamStore, batch: &SequenceBatch) -> f64 {
    let tape = Tape::new();
    let v = wm.loss(&tape, store, batch, &mut ChaCha8Rng::seed_from_u64(5)).expect("valid batch");
    let (post, prior) = (tape.value(v.post), tape.value(v.prior));
    let width = post.len() / batch.rows();
    let post: Vec<f64> = post.data().iter().map(|&x| x as f64).collect();
    let prior: Vec<f64> = prior.data().iter().map(|&x| x as f64).collect();
    post.chunks(width)
        .zip(prior.chunks(width))
        .map(|(q, p)| (categorical_kl_f64(q, p) - wm.cfg.free_bits).abs())
        .fold(f64::INFINITY, f64::min)
}

fn losses(rng: &mut ChaCha8Rng, with: &dyn Fn(&str, CheckConfig) -> CheckConfig) -> Result<Vec<CheckReport>> {
    let cfg = CheckConfig::default();
    let sparse = CheckConfig {
        coords_per_tensor: 3,
        ..cfg
    };
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let wm = WorldModel::new(WorldModelConfig::tiny(16), &mut store, rng)?;
    // the free-bits clamp has a kink at the floor; keep every row clear of
    // it so that both finite-difference probes stay on one branch
    let mut batch = random_batch(2, 3, rng);
    for _ in 0..50 {
        if kl_clearance(&wm, &store, &batch) > KL_MARGIN {
            break;
        }
        batch = random_batch(2, 3, rng);
    }
    let store64 = store.cast::<f64>();
    let build = |t: &Tape<f64>, s: &ParamStore<f64>| {
        wm.loss(t, s, &batch, &mut ChaCha8Rng::seed_from_u64(5)).expect("valid batch").total
    };
    out.push(check_store("world_model_loss", &store64, build, &with("world_model_loss", sparse), rng)?);

    let planner = Planner::new(PlannerConfig::tiny(), 12, rng)?;
    let feats = uniform(rng, &[6, 12], -1.0, 1.0);
    let weights = [1.0 / 6.0; 6];
    let mut critic = planner.critic_params.cast::<f64>();
    // a zero output layer would hide every hidden-layer gradient
    let head = critic.find("critic.out.w").expect("critic head");
    for v in critic.get_mut(head).data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let f = feats.clone();
    out.push(check_store(
        "critic_loss",
        &critic,
        |t, s| critic_loss(t, planner.critic_logits(t, s, t.constant(f.clone())), &planner.buckets, &targets, &weights),
        &with("critic_loss", cfg),
        rng,
    )?);

    let actor = planner.actor_params.cast::<f64>();
    let acts: Vec<usize> = (0..6).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
    let adv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    out.push(check_store(
        "actor_loss",
        &actor,
        |t, s| actor_loss(t, planner.policy(t, s, t.constant(feats.clone())), &acts, &adv, &weights, 3e-4),
        &with("actor_loss", cfg),
        rng,
    )?);
    Ok(out)
}

/// Runs every check at step 1e-3.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = CheckConfig::default();
    let with = |name: &str, c: CheckConfig| CheckConfig {
        corrupt_factor: if cfg.corrupt.as_deref() == Some(name) { 1.5 } else { 1.0 },
        ..c
    };
    let mut checks = Vec::new();
    for (name, inputs, build) in primitives(&mut rng) {
        checks.push(check_inputs(name, &inputs, build, &with(name, base), &mut rng)?);
    }
    for (name, store, x, f) in layers(&mut rng) {
        let build = |t: &Tape<f64>, s: &ParamStore<f64>| f(t, s, t.constant(x.clone()));
        checks.push(check_store(name, &store, build, &with(name, base), &mut rng)?);
    }
    checks.extend(losses(&mut rng, &with)?);
    Ok(SuiteReport { checks })
}

/// Names of every check, in report order.
pub fn check_names() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names: Vec<String> = primitives(&mut rng).into_iter().map(|p| p.0.to_string()).collect();
    names.extend(layers(&mut rng).into_iter().map(|l| l.0.to_string()));
    names.extend(["world_model_loss", "critic_loss", "actor_loss"].map(String::from));
    names
}
