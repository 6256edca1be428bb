mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use t2d_core::actions::NUM_ACTIONS;
use t2d_core::nn::dist::{entropy, symlog};
use t2d_core::nn::gradcheck::{check_inputs, check_store, CheckConfig};
use t2d_core::nn::{BucketSpec, ParamStore, Tape, Tensor};
use t2d_core::planner::{
    actor_loss, critic_loss, greedy, lambda_returns, percentile, ActMode, Planner, PlannerConfig, ReturnScale,
};
use t2d_core::world_model::{LatentBatch, WorldModel, WorldModelConfig};

const FEAT: usize = 12;

fn planner(seed: u64) -> Planner {
    Planner::new(PlannerConfig::tiny(), FEAT, &mut rng(seed)).unwrap()
}

fn feats(n: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::new(&[n, FEAT], (0..n * FEAT).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Sets the actor head to emit exactly `bias` regardless of the input.
fn pin_actor(p: &mut Planner, bias: &[f32]) {
    let w = p.actor_params.find("actor.out.w").unwrap();
    p.actor_params.get_mut(w).data_mut().fill(0.0);
    let b = p.actor_params.find("actor.out.b").unwrap();
    p.actor_params.get_mut(b).data_mut().copy_from_slice(bias);
}

#[test]
fn dominant_logit_wins_in_both_modes() {
    let mut p = planner(0);
    let mut bias = vec![0.0; NUM_ACTIONS];
    bias[17] = 1e6;
    pin_actor(&mut p, &bias);
    let f = feats(5, 1);
    assert_eq!(p.act(&f, ActMode::Greedy, &mut rng(0)), vec![17; 5]);
    assert_eq!(p.act(&f, ActMode::Sample, &mut rng(0)), vec![17; 5]);
}

#[test]
fn greedy_ties_break_low() {
    let mut p = planner(0);
    pin_actor(&mut p, &[0.0; NUM_ACTIONS]);
    assert_eq!(p.act(&feats(3, 2), ActMode::Greedy, &mut rng(0)), vec![0, 0, 0]);
    let t = Tensor::new(&[1, 4], vec![1.0f32, 3.0, 3.0, 2.0]);
    assert_eq!(greedy(&t), vec![1]);
}

#[test]
fn sampling_matches_softmax() {
    let mut p = planner(0);
    let bias: Vec<f32> = (0..NUM_ACTIONS).map(|i| (i % 5) as f32 * 0.4 - 0.8).collect();
    pin_actor(&mut p, &bias);
    let m = bias.iter().cloned().fold(f32::MIN, f32::max);
    let e: Vec<f64> = bias.iter().map(|&b| ((b - m) as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    let n = 100_000;
    let f = Tensor::new(&[n, FEAT], vec![0.0; n * FEAT]);
    let acts = p.act(&f, ActMode::Sample, &mut rng(3));
    let mut counts = vec![0usize; NUM_ACTIONS];
    for a in acts {
        counts[a] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let prob = e[i] / z;
        let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
        assert!((c as f64 - n as f64 * prob).abs() < 3.0 * sd + 1.0, "action {i}: {c} vs {}", n as f64 * prob);
    }
    // chi-square with 29 degrees of freedom; 0.1% critical value is 58.3
    let chi: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let want = n as f64 * e[i] / z;
            (c as f64 - want).powi(2) / want
        })
        .sum();
    assert!(chi < 58.3, "chi-square {chi}");
}

#[test]
fn lambda_return_examples() {
    let r = [1.0, -2.0, 0.5];
    let v = [3.0, 1.0, 4.0];
    let c = [1.0, 1.0, 1.0];
    assert_eq!(lambda_returns(&r, &v, &c, 0.0, 0.95, 9.0).unwrap(), r.to_vec());
    assert_eq!(lambda_returns(&[1.0, 1.0], &[5.0, 5.0], &[1.0, 1.0], 1.0, 1.0, 0.0).unwrap(), vec![2.0, 1.0]);
    assert_eq!(lambda_returns(&r, &v, &[0.0; 3], 0.9, 0.5, 9.0).unwrap(), r.to_vec());
    assert!(lambda_returns(&r, &v[..2], &c, 0.9, 0.5, 0.0).is_err());
}

#[test]
fn return_scale_examples() {
    let mut s = ReturnScale::new(0.99);
    s.update(&[3.0; 10]).unwrap();
    assert_eq!((s.s, s.denominator()), (0.0, 1.0));
    let batch: Vec<f64> = (0..=100).map(|v| v as f64).collect();
    let mut s = ReturnScale::new(0.99);
    s.update(&batch).unwrap();
    assert!((s.s - 0.01 * 90.0).abs() < 1e-12, "{}", s.s);
    assert!(s.update(&[]).is_err());

    // uniform draws on [0, 100]: range of the 5th..95th percentile near 90
    let mut r = rng(0);
    let mut v: Vec<f64> = (0..20_000).map(|_| r.gen_range(0.0..100.0)).collect();
    v.sort_by(f64::total_cmp);
    let range = percentile(&v, 0.95) - percentile(&v, 0.05);
    assert!((range - 90.0).abs() < 1.0, "{range}");
}

#[test]
fn critic_loss_floors() {
    let b = BucketSpec::uniform(63, -20.0, 20.0);
    let target = 3.7;
    let y = b.twohot(symlog(target));
    let logits: Vec<f64> = y.iter().map(|&p| p.max(1e-300).ln()).collect();
    let tape: Tape<f64> = Tape::new();
    let l = tape.constant(Tensor::from_f64(&[1, 63], &logits));
    let loss = tape.value(critic_loss(&tape, l, &b, &[target], &[1.0])).item();
    let h: f64 = -y.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    assert!((loss - h).abs() < 1e-9 && h <= 2f64.ln() + 1e-12, "{loss} vs {h}");

    // target on a center, prediction sharply peaked there
    let center = b.centers()[40];
    let mut peaked = vec![-50.0; 63];
    peaked[40] = 50.0;
    let l = tape.constant(Tensor::from_f64(&[1, 63], &peaked));
    let raw = center.signum() * center.abs().exp_m1();
    let loss = tape.value(critic_loss(&tape, l, &b, &[raw], &[1.0])).item();
    assert!(loss < 1e-9, "{loss}");
}

#[test]
fn critic_targets_carry_no_gradient() {
    let b = BucketSpec::uniform(63, -20.0, 20.0);
    let tape: Tape<f64> = Tape::new();
    let l = tape.leaf(Tensor::from_f64(&[2, 63], &[0.1; 126]), true);
    let loss = critic_loss(&tape, l, &b, &[1.0, -4.0], &[0.5, 0.5]);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(l).is_some());
    assert!(tape.needs_grad(loss));
}

#[test]
fn zero_advantage_pushes_towards_uniform() {
    let tape: Tape<f64> = Tape::new();
    let logits = tape.leaf(Tensor::from_f64(&[1, NUM_ACTIONS], &(0..30).map(|i| i as f64 * 0.1).collect::<Vec<_>>()), true);
    let probs = tape.softmax(logits, NUM_ACTIONS);
    let loss = actor_loss(&tape, probs, &[4], &[0.0], &[1.0], 1.0);
    let g = tape.backward(loss).unwrap();
    let g = g.wrt(logits).unwrap().data().to_vec();
    // descent lowers the largest logit and raises the smallest
    assert!(g[29] > 0.0 && g[0] < 0.0, "{g:?}");
}

#[test]
fn normalized_returns_are_scale_free() {
    let returns = [1.0, 5.0, -3.0, 12.0];
    let (mut a, mut b) = (ReturnScale::new(0.0), ReturnScale::new(0.0));
    a.update(&returns).unwrap();
    let scaled: Vec<f64> = returns.iter().map(|r| r * 4.0).collect();
    b.update(&scaled).unwrap();
    for (x, y) in returns.iter().zip(&scaled) {
        assert!((x / a.denominator() - y / b.denominator()).abs() < 1e-12);
    }
}

#[test]
fn losses_match_finite_differences() {
    let p = planner(4);
    let b = p.buckets.clone();
    let f = feats(6, 5).cast::<f64>();
    let critic = p.critic_params.cast::<f64>();
    // a zero head makes every hidden-layer gradient vanish; perturb it first
    let mut critic = critic;
    let id = critic.find("critic.out.w").unwrap();
    let mut r = rng(9);
    for v in critic.get_mut(id).data_mut() {
        *v = r.gen_range(-0.3..0.3);
    }
    let targets = [0.5, -2.0, 7.0, 0.0, 1.5, -0.3];
    let w = [1.0 / 6.0; 6];
    let cfg = CheckConfig::default();
    let rep = check_store(
        "critic",
        &critic,
        |t, s| critic_loss(t, p.critic_logits(t, s, t.constant(f.clone())), &b, &targets, &w),
        &cfg,
        &mut rng(0),
    )
    .unwrap();
    assert!(rep.passed(1e-3), "{rep:?}");

    let actor = p.actor_params.cast::<f64>();
    let acts = [0, 3, 29, 7, 7, 12];
    let adv = [0.4, -1.2, 0.9, 0.0, 2.0, -0.1];
    let rep = check_store(
        "actor",
        &actor,
        |t, s| actor_loss(t, p.policy(t, s, t.constant(f.clone())), &acts, &adv, &w, 0.01),
        &cfg,
        &mut rng(1),
    )
    .unwrap();
    assert!(rep.passed(1e-3), "{rep:?}");

    // two-action toy on raw logits
    let rep = check_inputs(
        "actor-two-action",
        &[Tensor::from_f64(&[3, 2], &[0.3, -0.2, 1.0, 0.5, -1.0, 2.0])],
        |t, v| {
            let probs = t.softmax(v[0], 2);
            let lp = t.ln(probs);
            let pick = t.constant(Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
            let logp = t.sum_cols(t.mul(lp, pick));
            let pg = t.mul_col(logp, t.constant(Tensor::from_f64(&[3], &[1.0, -0.5, 2.0])));
            let ent = t.scale(entropy(t, probs), 0.1);
            t.neg(t.sum(t.add(pg, ent)))
        },
        &cfg,
        &mut rng(2),
    )
    .unwrap();
    assert!(rep.passed(1e-3), "{rep:?}");
}

#[test]
fn reset_redraws_planner_only() {
    let mut wm_store = ParamStore::new();
    let wm = WorldModel::new(WorldModelConfig::tiny(16), &mut wm_store, &mut rng(0)).unwrap();
    let wm_sum = wm_store.checksum();
    let mut p = Planner::new(PlannerConfig::tiny(), wm.cfg.feat(), &mut rng(1)).unwrap();
    let before = p.actor_params.checksum();
    p.scale.s = 7.0;
    p.reset(&mut rng(2));
    assert_ne!(p.actor_params.checksum(), before);
    assert_eq!(p.scale.s, 0.0);
    assert_eq!(wm_store.checksum(), wm_sum);
    let mut q = Planner::new(PlannerConfig::tiny(), wm.cfg.feat(), &mut rng(1)).unwrap();
    q.reset(&mut rng(2));
    assert_eq!(q.actor_params.checksum(), p.actor_params.checksum());
    assert_eq!(q.critic_params.checksum(), p.critic_params.checksum());
}

#[test]
fn trains_on_imagined_rollouts() {
    let mut wm_store = ParamStore::new();
    let wm = WorldModel::new(WorldModelConfig::tiny(16), &mut wm_store, &mut rng(0)).unwrap();
    let mut p = Planner::new(PlannerConfig::tiny(), wm.cfg.feat(), &mut rng(1)).unwrap();
    let start = LatentBatch::zeros(&wm.cfg, 4);
    let mut r = rng(3);
    for _ in 0..3 {
        let snapshot = p.clone();
        let mut policy = |f: &Tensor<f32>, r: &mut rand_chacha::ChaCha8Rng| snapshot.act(f, ActMode::Sample, r);
        let im = wm.imagine(&wm_store, &start, 5, &mut policy, &mut r).unwrap();
        let stats = p.train_step(&im, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(stats.actor_loss.is_finite() && stats.critic_loss.is_finite());
        assert!(stats.entropy >= 0.0 && stats.entropy <= (NUM_ACTIONS as f64).ln() + 1e-6);
    }
}

proptest! {
    #[test]
    fn greedy_is_shift_invariant(logits in proptest::collection::vec(-5.0f64..5.0, NUM_ACTIONS), c in -100.0f64..100.0) {
        let a = Tensor::from_f64(&[1, NUM_ACTIONS], &logits);
        let b = Tensor::from_f64(&[1, NUM_ACTIONS], &logits.iter().map(|l| l + c).collect::<Vec<_>>());
        prop_assert_eq!(greedy::<f64>(&a), greedy::<f64>(&b));
    }

    #[test]
    fn policy_entropy_is_bounded(seed in 0u64..500) {
        let p = planner(seed);
        let tape: Tape<f32> = Tape::inference();
        let probs = p.policy(&tape, &p.actor_params, tape.constant(feats(4, seed)));
        for &h in tape.value(entropy(&tape, probs)).data() {
            prop_assert!(h >= 0.0 && h as f64 <= (NUM_ACTIONS as f64).ln() + 1e-5);
        }
    }
}
