//! Central finite-difference gradient checking on 64-bit tapes.
//!
//! Values frozen during the analytic pass (stop-gradients, discrete samples)
//! are replayed unchanged during every perturbed evaluation, so the numeric
//! derivative treats them as constants, as the analytic one does.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub eps: f64,
    /// Coordinates probed per tensor; tensors smaller than this are checked
    /// exhaustively.
    pub coords_per_tensor: usize,
    /// Multiplies every analytic gradient; `1.0` except in tests of the
    /// checker itself.
    pub corrupt_factor: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            coords_per_tensor: 8,
            corrupt_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)`.
    pub max_rel_err: f64,
    pub tensors: usize,
    pub coords: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Norms below this are treated as an exact zero gradient on both sides.
const ZERO_NORM: f64 = 1e-10;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < ZERO_NORM {
        0.0
    } else {
        diff / denom
    }
}

/// Checks `d loss / d inputs` where `build` maps leaf vars to a scalar loss.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&Tape<f64>, &[Var]) -> Var,
    cfg: &CheckConfig,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let eval = |tape: &Tape<f64>, values: &[Tensor<f64>], needs_grad: bool| {
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), needs_grad)).collect();
        let loss = build(tape, &vars);
        (loss, vars)
    };
    run(name, inputs.to_vec(), eval, cfg, rng)
}

/// Checks `d loss / d params` for every parameter of `store`.
pub fn check_store(
    name: &str,
    store: &ParamStore<f64>,
    build: impl Fn(&Tape<f64>, &ParamStore<f64>) -> Var,
    cfg: &CheckConfig,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let base: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
    let eval = |tape: &Tape<f64>, values: &[Tensor<f64>], _needs_grad: bool| {
        let mut s = store.clone();
        for (id, v) in s.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *s.get_mut(id) = v.clone();
        }
        let loss = build(tape, &s);
        let vars = s.ids().map(|id| tape.param(&s, id)).collect();
        (loss, vars)
    };
    run(name, base, eval, cfg, rng)
}

fn run(
    name: &str,
    base: Vec<Tensor<f64>>,
    eval: impl Fn(&Tape<f64>, &[Tensor<f64>], bool) -> (Var, Vec<Var>),
    cfg: &CheckConfig,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let tape = Tape::new();
    tape.record_frozen();
    let (loss, vars) = eval(&tape, &base, true);
    let frozen = tape.take_frozen();
    let grads = tape.backward(loss)?;

    let value_at = |values: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::inference();
        t.replay_frozen(frozen.clone());
        let (l, _) = eval(&t, values, false);
        t.check_finite(name)?;
        Ok(t.value(l).item())
    };

    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut tensors = 0;
    let mut values = base.clone();
    for (slot, var) in vars.iter().enumerate() {
        let len = base[slot].len();
        if len == 0 {
            continue;
        }
        let analytic = grads.wrt(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let picks: Vec<usize> = if len <= cfg.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, cfg.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        for &j in &picks {
            let x0 = base[slot].data()[j];
            values[slot].data_mut()[j] = x0 + cfg.eps;
            let up = value_at(&values)?;
            values[slot].data_mut()[j] = x0 - cfg.eps;
            let down = value_at(&values)?;
            values[slot].data_mut()[j] = x0;
            n.push((up - down) / (2.0 * cfg.eps));
            a.push(analytic[j] * cfg.corrupt_factor);
        }
        worst = worst.max(rel_err(&a, &n));
        coords += picks.len();
        tensors += 1;
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tensors,
        coords,
    })
}
