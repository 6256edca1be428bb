//! Recurrent state-space world model over BEV observations: encoder,
//! GRU sequence model, categorical posterior/prior, reward, termination and
//! observation heads, the three training losses and latent imagination.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionId, NUM_ACTIONS};
use crate::bev::{MEASUREMENT_LEN, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::dist::{categorical_kl, categorical_probs, sample_straight_through, symlog};
use crate::nn::{BucketSpec, ConvBlock, DeconvBlock, GruCell, Init, Linear, Mlp, Norm, ParamStore, Real, Tape, Tensor, Var};
use crate::replay::SequenceBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct WorldModelConfig {
    /// BEV raster side in pixels.
    pub size: usize,
    pub deter: usize,
    pub groups: usize,
    pub classes: usize,
    pub units: usize,
    pub layers: usize,
    /// Channel multiplier of the convolutional encoder and decoder.
    pub cnn_mult: usize,
    pub buckets: usize,
    pub unimix: f64,
    pub free_bits: f64,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    /// Reweights termination targets so both classes carry equal mass.
    pub balance_termination: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            size: 64,
            deter: 192,
            groups: 16,
            classes: 16,
            units: 192,
            layers: 3,
            cnn_mult: 24,
            buckets: 63,
            unimix: 0.01,
            free_bits: 1.0,
            beta_pred: 1.0,
            beta_dyn: 1.0,
            beta_rep: 0.1,
            balance_termination: true,
        }
    }
}

impl WorldModelConfig {
    /// Small sizes for tests and quick experiments.
    pub fn tiny(size: usize) -> Self {
        Self {
            size,
            deter: 32,
            groups: 4,
            classes: 4,
            units: 32,
            layers: 1,
            cnn_mult: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 16 != 0 || !(self.size / 4).is_power_of_two() {
            return Err(Error::Validation(format!(
                "world-model size {} must be 4 times a power of two and at least 16",
                self.size
            )));
        }
        for (name, v) in [
            ("deter", self.deter),
            ("groups", self.groups),
            ("classes", self.classes),
            ("units", self.units),
            ("cnn-mult", self.cnn_mult),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("world-model {name} must be positive")));
            }
        }
        if self.buckets < 2 {
            return Err(Error::Validation("need at least two reward buckets".into()));
        }
        if !(0.0..1.0).contains(&self.unimix) {
            return Err(Error::Validation(format!("unimix {} outside [0, 1)", self.unimix)));
        }
        for (name, v) in [
            ("free-bits", self.free_bits),
            ("beta-pred", self.beta_pred),
            ("beta-dyn", self.beta_dyn),
            ("beta-rep", self.beta_rep),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn stoch(&self) -> usize {
        self.groups * self.classes
    }

    /// Width of the feature vector `(h, z)` consumed by heads and planner.
    pub fn feat(&self) -> usize {
        self.deter + self.stoch()
    }

    /// Number of stride-2 stages between the raster and the 4x4 bottleneck.
    pub fn stages(&self) -> usize {
        (self.size / 4).trailing_zeros() as usize
    }

    fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages()).map(|i| self.cnn_mult << i).collect()
    }
}

/// Batch of model states `s = (h, z)` as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    /// `[n, deter]`.
    pub h: Tensor<f32>,
    /// `[n, groups * classes]`, one-hot per group.
    pub z: Tensor<f32>,
}

impl LatentBatch {
    pub fn zeros(cfg: &WorldModelConfig, n: usize) -> Self {
        Self {
            h: Tensor::zeros(&[n, cfg.deter]),
            z: Tensor::zeros(&[n, cfg.stoch()]),
        }
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation `(h, z)` per row.
    pub fn feat(&self) -> Tensor<f32> {
        concat_cols(&self.h, &self.z)
    }

    pub fn from_feat(feat: &Tensor<f32>, deter: usize) -> Self {
        let f = feat.cols();
        let mut h = Vec::with_capacity(feat.rows() * deter);
        let mut z = Vec::with_capacity(feat.rows() * (f - deter));
        for r in 0..feat.rows() {
            h.extend_from_slice(&feat.row(r)[..deter]);
            z.extend_from_slice(&feat.row(r)[deter..]);
        }
        Self {
            h: Tensor::new(&[feat.rows(), deter], h),
            z: Tensor::new(&[feat.rows(), f - deter], z),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            h: select_rows(&self.h, rows),
            z: select_rows(&self.z, rows),
        }
    }

    /// Replaces row `i` with row `j` of `other`.
    pub fn set_row(&mut self, i: usize, other: &LatentBatch, j: usize) {
        let d = self.h.cols();
        self.h.data_mut()[i * d..(i + 1) * d].copy_from_slice(other.h.row(j));
        let s = self.z.cols();
        self.z.data_mut()[i * s..(i + 1) * s].copy_from_slice(other.z.row(j));
    }
}

pub(crate) fn concat_cols(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Vec::with_capacity(a.rows() * (ca + cb));
    for r in 0..a.rows() {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Tensor::new(&[a.rows(), ca + cb], out)
}

pub(crate) fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let c = t.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), c], out)
}

/// How the categorical latent is drawn from its distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentDraw {
    Sample,
    /// Most likely class per group (lowest index on ties).
    Mode,
}

pub fn action_onehot<T: Real>(actions: &[Option<ActionId>]) -> Tensor<T> {
    let mut data = vec![T::zero(); actions.len() * NUM_ACTIONS];
    for (i, a) in actions.iter().enumerate() {
        if let Some(a) = a {
            data[i * NUM_ACTIONS + a] = T::one();
        }
    }
    Tensor::new(&[actions.len(), NUM_ACTIONS], data)
}

fn mode_onehot<T: Real>(probs: &Tensor<T>, classes: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); probs.len()];
    for (g, o) in probs.data().chunks(classes).zip(out.chunks_mut(classes)) {
        let mut best = 0;
        for (i, &p) in g.iter().enumerate() {
            if p > g[best] {
                best = i;
            }
        }
        o[best] = T::one();
    }
    Tensor::new(probs.shape(), out)
}

fn symlog_tensor<T: Real>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| T::of(symlog(v as f64))).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldModelConfig,
    pub buckets: BucketSpec,
    encoder: Vec<ConvBlock>,
    meas_enc: Mlp,
    posterior: Mlp,
    prior: Mlp,
    img_in: (Linear, Norm),
    gru: GruCell,
    reward: Mlp,
    termination: Mlp,
    dec_in: Linear,
    decoder: Vec<DeconvBlock>,
    meas_dec: Mlp,
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub pred: Var,
    pub dyn_loss: Var,
    pub rep: Var,
    pub recon: Var,
    pub meas: Var,
    pub reward: Var,
    pub term: Var,
    /// Posterior probabilities `[L*B, G*N]`, time-major.
    pub post: Var,
    pub prior: Var,
    /// The posterior as it enters the dynamics loss (stop-gradient).
    pub post_in_dyn: Var,
    /// The prior as it enters the representation loss (stop-gradient).
    pub prior_in_rep: Var,
    /// Posterior features `(h, z)`, time-major.
    pub feats: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub l_pred: f64,
    pub l_dyn: f64,
    pub l_rep: f64,
    pub total: f64,
    pub recon: f64,
    pub meas: f64,
    pub reward: f64,
    pub term: f64,
}

impl LossReport {
    pub fn from_vars<T: Real>(tape: &Tape<T>, v: &LossVars) -> Self {
        let s = |x: Var| tape.value(x).item().f64();
        Self {
            l_pred: s(v.pred),
            l_dyn: s(v.dyn_loss),
            l_rep: s(v.rep),
            total: s(v.total),
            recon: s(v.recon),
            meas: s(v.meas),
            reward: s(v.reward),
            term: s(v.term),
        }
    }
}

/// Latent rollout under the prior. Index `t` of `actions`, `rewards` and
/// `conts` describes the transition from `states[t]` to `states[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Imagined {
    /// `horizon + 1` feature tensors `[n, feat]`; `states[0]` is the start.
    pub states: Vec<Tensor<f32>>,
    pub actions: Vec<Vec<ActionId>>,
    pub rewards: Vec<Vec<f32>>,
    /// Predicted probability that the episode continues after the step.
    pub conts: Vec<Vec<f32>>,
}

impl Imagined {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn starts(&self) -> usize {
        self.states[0].rows()
    }
}

/// One-step prediction quality on observed sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OneStepEval {
    pub pixel_accuracy: f64,
    pub reward_mae: f64,
    pub frames: usize,
}

impl WorldModel {
    pub fn new(cfg: WorldModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.stage_channels();
        let mut encoder = Vec::new();
        let mut cin = NUM_CHANNELS;
        for (i, &c) in chans.iter().enumerate() {
            encoder.push(ConvBlock::new(store, &format!("wm.enc{i}"), cin, c, rng));
            cin = c;
        }
        let last = *chans.last().expect("at least one stage");
        let flat = 16 * last;
        let meas_enc = Mlp::new(store, "wm.meas_enc", MEASUREMENT_LEN, cfg.units, 1, cfg.units, None, rng);
        let embed = flat + cfg.units;
        let posterior = Mlp::new(store, "wm.post", cfg.deter + embed, cfg.units, 1, cfg.stoch(), None, rng);
        let prior = Mlp::new(store, "wm.prior", cfg.deter, cfg.units, 1, cfg.stoch(), None, rng);
        let img_in = (
            Linear::new(store, "wm.img_in", cfg.stoch() + NUM_ACTIONS, cfg.units, rng),
            Norm::new(store, "wm.img_in.n", cfg.units, rng),
        );
        let gru = GruCell::new(store, "wm.gru", cfg.units, cfg.deter, rng);
        let feat = cfg.feat();
        let reward = Mlp::new(store, "wm.reward", feat, cfg.units, cfg.layers, cfg.buckets, Some(Init::Zeros), rng);
        let termination = Mlp::new(store, "wm.term", feat, cfg.units, cfg.layers, 1, None, rng);
        let dec_in = Linear::new(store, "wm.dec_in", feat, flat, rng);
        let mut decoder = Vec::new();
        for i in (0..chans.len()).rev() {
            let (cin, last_block) = (chans[i], i == 0);
            let cout = if last_block { NUM_CHANNELS } else { chans[i - 1] };
            decoder.push(DeconvBlock::new(store, &format!("wm.dec{i}"), cin, cout, last_block, rng));
        }
        let meas_dec = Mlp::new(store, "wm.meas_dec", feat, cfg.units, cfg.layers, MEASUREMENT_LEN, None, rng);
        Ok(Self {
            buckets: BucketSpec::uniform(cfg.buckets, -20.0, 20.0),
            cfg,
            encoder,
            meas_enc,
            posterior,
            prior,
            img_in,
            gru,
            reward,
            termination,
            dec_in,
            decoder,
            meas_dec,
        })
    }

    /// Observation embedding: `obs [n, H, W, C]` and raw `meas [n, 20]`.
    pub fn embed<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, obs: Var, meas: Var) -> Var {
        let mut x = obs;
        for block in &self.encoder {
            x = block.forward(tape, store, x);
        }
        let s = tape.shape(x);
        let flat = tape.reshape(x, &[s[0], s[1] * s[2] * s[3]]);
        let m = self.meas_enc.forward(tape, store, meas);
        tape.concat_cols(&[flat, m])
    }

    pub fn posterior_logits<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, h: Var, embed: Var) -> Var {
        self.posterior.forward(tape, store, tape.concat_cols(&[h, embed]))
    }

    pub fn prior_logits<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, h: Var) -> Var {
        self.prior.forward(tape, store, h)
    }

    /// `h' = f(h, z, a)` with `a` one-hot `[n, 30]`.
    pub fn sequence_step<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, h: Var, z: Var, a: Var) -> Var {
        let (lin, norm) = &self.img_in;
        let x = tape.silu(norm.forward(tape, store, lin.forward(tape, store, tape.concat_cols(&[z, a]))));
        self.gru.forward(tape, store, h, x)
    }

    pub fn probs<T: Real>(&self, tape: &Tape<T>, logits: Var) -> Var {
        categorical_probs(tape, logits, self.cfg.classes, self.cfg.unimix)
    }

    /// Latent draw; `Sample` is straight-through.
    pub fn draw<T: Real>(&self, tape: &Tape<T>, probs: Var, how: LatentDraw, rng: &mut impl Rng) -> Var {
        match how {
            LatentDraw::Sample => sample_straight_through(tape, probs, self.cfg.classes, rng),
            LatentDraw::Mode => {
                let p = tape.value(probs);
                tape.constant(mode_onehot(&p, self.cfg.classes))
            }
        }
    }

    pub fn reward_logits<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        self.reward.forward(tape, store, feat)
    }

    /// Logit of the episode ending at this state.
    pub fn termination_logit<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        self.termination.forward(tape, store, feat)
    }

    /// BEV logits `[n, H, W, C]`.
    pub fn decode<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        let n = tape.shape(feat)[0];
        let last = self.cfg.cnn_mult << (self.cfg.stages() - 1);
        let x = self.dec_in.forward(tape, store, feat);
        let mut x = tape.reshape(x, &[n, 4, 4, last]);
        for block in &self.decoder {
            x = block.forward(tape, store, x);
        }
        x
    }

    /// Measurement prediction in symlog space.
    pub fn decode_measurements<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, feat: Var) -> Var {
        self.meas_dec.forward(tape, store, feat)
    }

    /// Decoded rewards and termination probabilities per row of `feat`.
    pub fn predict_heads(&self, store: &ParamStore, feat: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
        let tape = Tape::inference();
        let f = tape.constant(feat.clone());
        let rl = tape.value(self.reward_logits(&tape, store, f));
        let tl = tape.value(self.termination_logit(&tape, store, f));
        let rewards = self.buckets.decode_logits(&rl).into_iter().map(|v| v as f32).collect();
        let term = tl.data().iter().map(|&v| sigmoid(v as f64) as f32).collect();
        (rewards, term)
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.size != self.cfg.size {
            return Err(Error::Usage(format!(
                "batch raster size {} but the model expects {}",
                batch.size, self.cfg.size
            )));
        }
        batch.check_finite()?;
        if batch.valid_rows() == 0 {
            return Err(Error::Usage("batch has no valid steps".into()));
        }
        Ok(())
    }

    /// Builds the training loss on `tape`.
    pub fn loss<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        batch: &SequenceBatch,
        rng: &mut impl Rng,
    ) -> Result<LossVars> {
        self.check_batch(batch)?;
        let cfg = &self.cfg;
        let (b, l) = (batch.batch, batch.len);
        let rows = b * l;

        let obs = tape.constant(batch.obs.cast());
        let meas_sl = symlog_tensor::<T>(&batch.meas);
        let embed = self.embed(tape, store, obs, tape.constant(meas_sl.clone()));

        let mut h = tape.constant(Tensor::zeros(&[b, cfg.deter]));
        let mut z = tape.constant(Tensor::zeros(&[b, cfg.stoch()]));
        let (mut feats, mut posts, mut priors) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..l {
            let keep: Vec<T> = (0..b)
                .map(|i| if batch.reset[t * b + i] { T::zero() } else { T::one() })
                .collect();
            let keep = tape.constant(Tensor::new(&[b], keep));
            let a = tape.constant(action_onehot(&batch.action[t * b..(t + 1) * b]));
            let h_prev = tape.mul_col(h, keep);
            let z_prev = tape.mul_col(z, keep);
            let a = tape.mul_col(a, keep);
            h = self.sequence_step(tape, store, h_prev, z_prev, a);
            let e = tape.slice_rows(embed, t * b, b);
            let q = self.probs(tape, self.posterior_logits(tape, store, h, e));
            let p = self.probs(tape, self.prior_logits(tape, store, h));
            z = self.draw(tape, q, LatentDraw::Sample, rng);
            feats.push(tape.concat_cols(&[h, z]));
            posts.push(q);
            priors.push(p);
        }
        let feats = tape.concat_rows(&feats);
        let post = tape.concat_rows(&posts);
        let prior = tape.concat_rows(&priors);

        // per-row weights: masked mean over valid steps
        let valid = batch.valid_rows() as f64;
        let w: Vec<f64> = batch.mask.iter().map(|&m| if m { 1.0 / valid } else { 0.0 }).collect();
        let wv = tape.constant(Tensor::from_f64(&[rows], &w));

        let logits = self.decode(tape, store, feats);
        let hwc = cfg.size * cfg.size * NUM_CHANNELS;
        let logits = tape.reshape(logits, &[rows, hwc]);
        let target = Rc::new(batch.obs.cast::<T>().reshaped(&[rows, hwc]));
        let recon = tape.sum(tape.mul_col(tape.bce_with_logits(logits, target, None), wv));

        let mp = self.decode_measurements(tape, store, feats);
        let diff = tape.sub(mp, tape.constant(meas_sl));
        let meas = tape.sum(tape.mul_col(tape.sum_cols(tape.mul(diff, diff)), wv));

        let rl = self.reward_logits(tape, store, feats);
        let raw: Vec<f64> = batch.reward.iter().map(|&r| r as f64).collect();
        let targets = tape.constant(self.buckets.targets::<T>(&raw));
        let ce = tape.neg(tape.sum_cols(tape.mul(targets, tape.log_softmax(rl, cfg.buckets))));
        let reward = tape.sum(tape.mul_col(ce, wv));

        let tl = self.termination_logit(tape, store, feats);
        let done: Vec<f64> = batch.done.iter().map(|&d| d as u8 as f64).collect();
        let tw = termination_weights(&batch.done, &batch.mask, cfg.balance_termination);
        let bce = tape.bce_with_logits(tl, Rc::new(Tensor::from_f64(&[rows, 1], &done)), None);
        let term = tape.sum(tape.mul_col(bce, tape.constant(Tensor::from_f64(&[rows], &tw))));

        let pred = tape.add(tape.add(recon, meas), tape.add(reward, term));

        let post_in_dyn = tape.detach(post);
        let prior_in_rep = tape.detach(prior);
        let kl_dyn = tape.clamp_min(categorical_kl(tape, post_in_dyn, prior), cfg.free_bits);
        let kl_rep = tape.clamp_min(categorical_kl(tape, post, prior_in_rep), cfg.free_bits);
        let dyn_loss = tape.sum(tape.mul_col(kl_dyn, wv));
        let rep = tape.sum(tape.mul_col(kl_rep, wv));

        let total = tape.add(
            tape.add(tape.scale(pred, cfg.beta_pred), tape.scale(dyn_loss, cfg.beta_dyn)),
            tape.scale(rep, cfg.beta_rep),
        );
        Ok(LossVars {
            total,
            pred,
            dyn_loss,
            rep,
            recon,
            meas,
            reward,
            term,
            post,
            prior,
            post_in_dyn,
            prior_in_rep,
            feats,
        })
    }

    /// Filters a posterior pass into one latent state per observed frame.
    pub fn observe(
        &self,
        store: &ParamStore,
        state: &LatentBatch,
        obs: &Tensor<f32>,
        meas: &Tensor<f32>,
        prev_action: &[Option<ActionId>],
        reset: &[bool],
        how: LatentDraw,
        rng: &mut impl Rng,
    ) -> LatentBatch {
        let n = state.len();
        let tape = Tape::inference();
        let keep: Vec<f32> = reset.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect();
        let keep = tape.constant(Tensor::new(&[n], keep));
        let h = tape.mul_col(tape.constant(state.h.clone()), keep);
        let z = tape.mul_col(tape.constant(state.z.clone()), keep);
        let a = tape.mul_col(tape.constant(action_onehot(prev_action)), keep);
        let h = self.sequence_step(&tape, store, h, z, a);
        let e = self.embed(&tape, store, tape.constant(obs.clone()), tape.constant(symlog_tensor(meas)));
        let q = self.probs(&tape, self.posterior_logits(&tape, store, h, e));
        let z = self.draw(&tape, q, how, rng);
        LatentBatch {
            h: (*tape.value(h)).clone(),
            z: (*tape.value(z)).clone(),
        }
    }

    /// One prior transition: `s' = (f(h, z, a), draw from p(z' | h'))`.
    pub fn prior_step(
        &self,
        store: &ParamStore,
        state: &LatentBatch,
        actions: &[ActionId],
        how: LatentDraw,
        rng: &mut impl Rng,
    ) -> LatentBatch {
        let tape = Tape::inference();
        let acts: Vec<Option<ActionId>> = actions.iter().map(|&a| Some(a)).collect();
        let h = self.sequence_step(
            &tape,
            store,
            tape.constant(state.h.clone()),
            tape.constant(state.z.clone()),
            tape.constant(action_onehot(&acts)),
        );
        let p = self.probs(&tape, self.prior_logits(&tape, store, h));
        let z = self.draw(&tape, p, how, rng);
        LatentBatch {
            h: (*tape.value(h)).clone(),
            z: (*tape.value(z)).clone(),
        }
    }

    /// Rolls `horizon` steps forward from `start` using only the prior and
    /// `policy`, which maps a feature batch to one action per row.
    pub fn imagine<R: Rng>(
        &self,
        store: &ParamStore,
        start: &LatentBatch,
        horizon: usize,
        policy: &mut dyn FnMut(&Tensor<f32>, &mut R) -> Vec<ActionId>,
        rng: &mut R,
    ) -> Result<Imagined> {
        if horizon == 0 {
            return Err(Error::Usage("imagination horizon must be at least 1".into()));
        }
        let mut state = start.clone();
        let mut out = Imagined {
            states: vec![state.feat()],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            conts: Vec::with_capacity(horizon),
        };
        for _ in 0..horizon {
            let acts = policy(out.states.last().expect("start state"), rng);
            if acts.len() != state.len() || acts.iter().any(|&a| a >= NUM_ACTIONS) {
                return Err(Error::Usage("policy returned malformed actions".into()));
            }
            state = self.prior_step(store, &state, &acts, LatentDraw::Sample, rng);
            let feat = state.feat();
            let (r, term) = self.predict_heads(store, &feat);
            out.states.push(feat);
            out.actions.push(acts);
            out.rewards.push(r);
            out.conts.push(term.into_iter().map(|p| 1.0 - p).collect());
        }
        Ok(out)
    }

    /// Posterior features of every row of `batch` (time-major) from a
    /// filtering pass.
    pub fn filter(&self, store: &ParamStore, batch: &SequenceBatch, how: LatentDraw, rng: &mut impl Rng) -> Result<LatentBatch> {
        self.check_batch(batch)?;
        let (b, l) = (batch.batch, batch.len);
        let frame = batch.obs.len() / batch.rows();
        let mut state = LatentBatch::zeros(&self.cfg, b);
        let mut hs = Vec::with_capacity(l);
        let mut zs = Vec::with_capacity(l);
        for t in 0..l {
            let rows = t * b..(t + 1) * b;
            let obs = Tensor::new(
                &[b, batch.size, batch.size, NUM_CHANNELS],
                batch.obs.data()[rows.start * frame..rows.end * frame].to_vec(),
            );
            let meas = Tensor::new(
                &[b, MEASUREMENT_LEN],
                batch.meas.data()[rows.start * MEASUREMENT_LEN..rows.end * MEASUREMENT_LEN].to_vec(),
            );
            state = self.observe(store, &state, &obs, &meas, &batch.action[rows.clone()], &batch.reset[rows], how, rng);
            hs.push(state.h.clone());
            zs.push(state.z.clone());
        }
        Ok(LatentBatch {
            h: Tensor::stack_rows(&hs),
            z: Tensor::stack_rows(&zs),
        })
    }

    /// Predicts every non-reset valid frame from the previous posterior state
    /// and the action taken, with the prior mode; compares the decoded BEV
    /// (threshold 0.5) and reward against the recorded ones.
    pub fn one_step_eval(&self, store: &ParamStore, batch: &SequenceBatch) -> Result<OneStepEval> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let post = self.filter(store, batch, LatentDraw::Mode, &mut rng)?;
        let b = batch.batch;
        let mut prev = Vec::new();
        let mut cur = Vec::new();
        for t in 1..batch.len {
            for i in 0..b {
                let r = t * b + i;
                if batch.mask[r] && !batch.reset[r] {
                    prev.push(r - b);
                    cur.push(r);
                }
            }
        }
        if cur.is_empty() {
            return Err(Error::Usage("no predictable frames in batch".into()));
        }
        let actions: Vec<ActionId> = cur
            .iter()
            .map(|&r| batch.action[r].ok_or_else(|| Error::Validation("frame without an action".into())))
            .collect::<Result<_>>()?;
        let next = self.prior_step(store, &post.select(&prev), &actions, LatentDraw::Mode, &mut rng);
        let feat = next.feat();
        let tape = Tape::inference();
        let logits = tape.value(self.decode(&tape, store, tape.constant(feat.clone())));
        let (rewards, _) = self.predict_heads(store, &feat);
        let hwc = logits.len() / cur.len();
        let mut correct = 0usize;
        let mut mae = 0.0;
        for (k, &r) in cur.iter().enumerate() {
            let pred = &logits.data()[k * hwc..(k + 1) * hwc];
            let truth = &batch.obs.data()[r * hwc..(r + 1) * hwc];
            correct += pred.iter().zip(truth).filter(|(&p, &t)| (p > 0.0) == (t > 0.5)).count();
            mae += (rewards[k] as f64 - batch.reward[r] as f64).abs();
        }
        Ok(OneStepEval {
            pixel_accuracy: correct as f64 / (hwc * cur.len()) as f64,
            reward_mae: mae / cur.len() as f64,
            frames: cur.len(),
        })
    }

    /// Decoded BEV masks (probability above 0.5), channel-major per row.
    pub fn decode_masks(&self, store: &ParamStore, feat: &Tensor<f32>) -> Vec<Vec<u8>> {
        let tape = Tape::inference();
        let logits = tape.value(self.decode(&tape, store, tape.constant(feat.clone())));
        let n = self.cfg.size * self.cfg.size;
        logits
            .data()
            .chunks(n * NUM_CHANNELS)
            .map(|hwc| {
                let mut chw = vec![0u8; n * NUM_CHANNELS];
                for p in 0..n {
                    for c in 0..NUM_CHANNELS {
                        chw[c * n + p] = (hwc[p * NUM_CHANNELS + c] > 0.0) as u8;
                    }
                }
                chw
            })
            .collect()
    }
}

/// Per-row weights of the termination loss. With balancing, positive and
/// negative valid rows each carry half of the total mass when both occur.
pub fn termination_weights(done: &[bool], mask: &[bool], balance: bool) -> Vec<f64> {
    let n = mask.iter().filter(|m| **m).count() as f64;
    let pos = done.iter().zip(mask).filter(|(d, m)| **d && **m).count() as f64;
    let neg = n - pos;
    done.iter()
        .zip(mask)
        .map(|(&d, &m)| {
            if !m {
                0.0
            } else if balance && pos > 0.0 && neg > 0.0 {
                if d {
                    0.5 / pos
                } else {
                    0.5 / neg
                }
            } else {
                1.0 / n
            }
        })
        .collect()
}
