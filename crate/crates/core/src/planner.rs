//! Actor-critic trained on imagined latent rollouts: λ-returns, a two-hot
//! symlog critic and a return-normalized policy gradient with entropy bonus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionId, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::dist::{categorical_probs, entropy, sample_index, PROB_FLOOR};
use crate::nn::{Adam, AdamConfig, BucketSpec, Init, Mlp, ParamStore, Real, Tape, Tensor, Var};
use crate::world_model::Imagined;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub entropy: f64,
    pub horizon: usize,
    pub units: usize,
    pub layers: usize,
    pub unimix: f64,
    pub buckets: usize,
    pub return_decay: f64,
    pub optimizer: AdamConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.985,
            lambda: 0.95,
            entropy: 3e-4,
            horizon: 15,
            units: 192,
            layers: 3,
            unimix: 0.0,
            buckets: 63,
            return_decay: 0.99,
            optimizer: AdamConfig {
                lr: 3e-5,
                ..AdamConfig::default()
            },
        }
    }
}

impl PlannerConfig {
    pub fn tiny() -> Self {
        Self {
            units: 32,
            layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("return-decay", self.return_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Validation("imagination horizon must be at least 1".into()));
        }
        if self.units == 0 || self.buckets < 2 {
            return Err(Error::Validation("planner network sizes must be positive".into()));
        }
        if !(self.entropy.is_finite() && self.entropy >= 0.0) {
            return Err(Error::Validation("entropy weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActMode {
    Sample,
    /// Highest logit, lowest index on ties.
    Greedy,
}

/// `R_t = r_t + γ c_t ((1 − λ) v_t + λ R_{t+1})` backwards from
/// `R_len = bootstrap`, where `values[t]` is the value of the state reached
/// by step `t`.
pub fn lambda_returns(
    rewards: &[f64],
    values: &[f64],
    continues: &[f64],
    gamma: f64,
    lambda: f64,
    bootstrap: f64,
) -> Result<Vec<f64>> {
    if rewards.len() != values.len() || rewards.len() != continues.len() {
        return Err(Error::Usage(format!(
            "lambda returns need equal lengths, got {} rewards, {} values, {} continues",
            rewards.len(),
            values.len(),
            continues.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        next = rewards[t] + gamma * continues[t] * ((1.0 - lambda) * values[t] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Decaying mean of the 5th-to-95th percentile range of returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnScale {
    pub s: f64,
    pub decay: f64,
}

impl ReturnScale {
    pub fn new(decay: f64) -> Self {
        Self { s: 0.0, decay }
    }

    pub fn update(&mut self, returns: &[f64]) -> Result<()> {
        if returns.is_empty() {
            return Err(Error::Usage("return scale needs a nonempty batch".into()));
        }
        let mut v = returns.to_vec();
        v.sort_by(f64::total_cmp);
        let range = percentile(&v, 0.95) - percentile(&v, 0.05);
        self.s = self.decay * self.s + (1.0 - self.decay) * range;
        Ok(())
    }

    pub fn denominator(&self) -> f64 {
        self.s.max(1.0)
    }

    pub fn reset(&mut self) {
        self.s = 0.0;
    }
}

/// Cross-entropy of constant two-hot `symlog(target)` encodings against the
/// critic's bucket softmax, weighted per row: `Σ w_i CE_i`.
pub fn critic_loss<T: Real>(
    tape: &Tape<T>,
    logits: Var,
    buckets: &BucketSpec,
    targets: &[f64],
    weights: &[f64],
) -> Var {
    let n = targets.len();
    let y = tape.constant(buckets.targets::<T>(targets));
    let ce = tape.neg(tape.sum_cols(tape.mul(y, tape.log_softmax(logits, buckets.count()))));
    tape.sum(tape.mul_col(ce, tape.constant(Tensor::from_f64(&[n], weights))))
}

/// Negated objective `Σ w_i (adv_i ln π(a_i) + β H[π_i])`, with `adv` the
/// already normalized, constant advantages.
pub fn actor_loss<T: Real>(
    tape: &Tape<T>,
    probs: Var,
    actions: &[ActionId],
    advantages: &[f64],
    weights: &[f64],
    beta: f64,
) -> Var {
    let n = actions.len();
    let mut onehot = vec![0.0; n * NUM_ACTIONS];
    for (i, &a) in actions.iter().enumerate() {
        onehot[i * NUM_ACTIONS + a] = 1.0;
    }
    let lp = tape.ln(tape.clamp_min(probs, PROB_FLOOR));
    let logp = tape.sum_cols(tape.mul(lp, tape.constant(Tensor::from_f64(&[n, NUM_ACTIONS], &onehot))));
    let pg = tape.mul_col(logp, tape.constant(Tensor::from_f64(&[n], advantages)));
    let ent = tape.scale(entropy(tape, probs), beta);
    let obj = tape.mul_col(tape.add(pg, ent), tape.constant(Tensor::from_f64(&[n], weights)));
    tape.neg(tape.sum(obj))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PlannerStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub return_mean: f64,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub cfg: PlannerConfig,
    pub buckets: BucketSpec,
    pub feat: usize,
    actor: Mlp,
    critic: Mlp,
    pub actor_params: ParamStore,
    pub critic_params: ParamStore,
    actor_opt: Adam,
    critic_opt: Adam,
    pub scale: ReturnScale,
}

impl Planner {
    pub fn new(cfg: PlannerConfig, feat: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut actor_params = ParamStore::new();
        let mut critic_params = ParamStore::new();
        let actor = Mlp::new(&mut actor_params, "actor", feat, cfg.units, cfg.layers, NUM_ACTIONS, None, rng);
        let critic = Mlp::new(
            &mut critic_params,
            "critic",
            feat,
            cfg.units,
            cfg.layers,
            cfg.buckets,
            Some(Init::Zeros),
            rng,
        );
        Ok(Self {
            buckets: BucketSpec::uniform(cfg.buckets, -20.0, 20.0),
            feat,
            actor_opt: Adam::new(cfg.optimizer.clone(), &actor_params),
            critic_opt: Adam::new(cfg.optimizer.clone(), &critic_params),
            scale: ReturnScale::new(cfg.return_decay),
            cfg,
            actor,
            critic,
            actor_params,
            critic_params,
        })
    }

    pub fn actor_logits<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        self.actor.forward(tape, store, feat)
    }

    pub fn policy<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        categorical_probs(tape, self.actor_logits(tape, store, feat), NUM_ACTIONS, self.cfg.unimix)
    }

    pub fn critic_logits<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        self.critic.forward(tape, store, feat)
    }

    pub fn act(&self, feat: &Tensor<f32>, mode: ActMode, rng: &mut impl Rng) -> Vec<ActionId> {
        let tape = Tape::inference();
        let f = tape.constant(feat.clone());
        match mode {
            ActMode::Greedy => {
                let logits = tape.value(self.actor_logits(&tape, &self.actor_params, f));
                greedy(&logits)
            }
            ActMode::Sample => {
                let probs = tape.value(self.policy(&tape, &self.actor_params, f));
                probs.data().chunks(NUM_ACTIONS).map(|p| sample_index(p, rng)).collect()
            }
        }
    }

    /// Decoded critic values per row.
    pub fn values(&self, feat: &Tensor<f32>) -> Vec<f64> {
        let tape = Tape::inference();
        let logits = tape.value(self.critic_logits(&tape, &self.critic_params, tape.constant(feat.clone())));
        self.buckets.decode_logits(&logits)
    }

    /// Redraws every actor and critic parameter and clears the optimizers
    /// and the return scale.
    pub fn reset(&mut self, rng: &mut impl Rng) {
        self.actor_params.reinitialize(rng);
        self.critic_params.reinitialize(rng);
        self.actor_opt.reset();
        self.critic_opt.reset();
        self.scale.reset();
    }

    /// One actor and one critic update from an imagined rollout.
    /// `start_weights` down-weights rollouts from terminal start states.
    pub fn train_step(&mut self, im: &Imagined, start_weights: &[f64]) -> Result<PlannerStats> {
        let n = im.starts();
        let horizon = im.horizon();
        if start_weights.len() != n {
            return Err(Error::Usage("one start weight per imagined trajectory".into()));
        }
        let values: Vec<Vec<f64>> = im.states.iter().map(|s| self.values(s)).collect();
        let mut returns = vec![vec![0.0; horizon]; n];
        let mut weights = vec![vec![0.0; horizon]; n];
        for i in 0..n {
            let r: Vec<f64> = (0..horizon).map(|t| im.rewards[t][i] as f64).collect();
            let v: Vec<f64> = (0..horizon).map(|t| values[t + 1][i]).collect();
            let c: Vec<f64> = (0..horizon).map(|t| im.conts[t][i] as f64).collect();
            returns[i] = lambda_returns(&r, &v, &c, self.cfg.gamma, self.cfg.lambda, values[horizon][i])?;
            let mut w = start_weights[i];
            for t in 0..horizon {
                weights[i][t] = w;
                w *= c[t];
            }
        }
        let flat_returns: Vec<f64> = returns.iter().flatten().copied().collect();
        self.scale.update(&flat_returns)?;
        let denom = self.scale.denominator();

        // rows ordered time-major: t * n + i
        let rows = horizon * n;
        let total_w: f64 = weights.iter().flatten().sum::<f64>().max(1e-8);
        let mut targets = Vec::with_capacity(rows);
        let mut w = Vec::with_capacity(rows);
        let mut adv = Vec::with_capacity(rows);
        let mut acts = Vec::with_capacity(rows);
        for t in 0..horizon {
            for i in 0..n {
                targets.push(returns[i][t]);
                w.push(weights[i][t] / total_w);
                adv.push((returns[i][t] - values[t][i]) / denom);
                acts.push(im.actions[t][i]);
            }
        }
        let feats = Tensor::stack_rows(&im.states[..horizon]);

        let tape = Tape::new();
        let f = tape.constant(feats.clone());
        let logits = self.critic_logits(&tape, &self.critic_params, f);
        let closs = critic_loss(&tape, logits, &self.buckets, &targets, &w);
        let grads = tape.backward(closs)?.for_store(&tape, &self.critic_params);
        self.critic_opt.step(&mut self.critic_params, &grads);
        let critic_value = tape.value(closs).item() as f64;

        let tape = Tape::new();
        let f = tape.constant(feats);
        let probs = self.policy(&tape, &self.actor_params, f);
        let aloss = actor_loss(&tape, probs, &acts, &adv, &w, self.cfg.entropy);
        let ent = tape.value(entropy(&tape, probs));
        let grads = tape.backward(aloss)?.for_store(&tape, &self.actor_params);
        self.actor_opt.step(&mut self.actor_params, &grads);

        Ok(PlannerStats {
            actor_loss: tape.value(aloss).item() as f64,
            critic_loss: critic_value,
            entropy: ent.data().iter().map(|&e| e as f64).sum::<f64>() / rows as f64,
            return_mean: flat_returns.iter().sum::<f64>() / flat_returns.len() as f64,
            scale: self.scale.s,
        })
    }
}

/// Row-wise argmax with the lowest index winning ties.
pub fn greedy<T: Real>(logits: &Tensor<T>) -> Vec<ActionId> {
    logits
        .data()
        .chunks(logits.cols())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
