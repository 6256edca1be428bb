//! Categorical latents, symlog squashing and two-hot bucket encoding.

use rand::Rng;

use super::{Real, Tape, Tensor, Var};

/// Probability floor used inside logarithms of categorical distributions.
pub const PROB_FLOOR: f64 = 1e-8;

pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

pub fn symexp(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Bucket centers in symlog space, strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketSpec {
    centers: Vec<f64>,
}

impl BucketSpec {
    /// `count` equal-width centers spanning `[lo, hi]`.
    pub fn uniform(count: usize, lo: f64, hi: f64) -> Self {
        assert!(count >= 2, "need at least two buckets");
        assert!(hi > lo, "empty bucket range");
        let step = (hi - lo) / (count - 1) as f64;
        let centers = (0..count).map(|i| lo + step * i as f64).collect();
        Self { centers }
    }

    pub fn from_centers(centers: Vec<f64>) -> Option<Self> {
        let ok = centers.len() >= 2 && centers.windows(2).all(|w| w[0] < w[1]);
        ok.then_some(Self { centers })
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Weights over buckets with at most two nonzero entries whose weighted
    /// center equals `value` clamped into the bucket range.
    pub fn twohot(&self, value: f64) -> Vec<f64> {
        let c = &self.centers;
        let n = c.len();
        let mut w = vec![0.0; n];
        if value <= c[0] {
            w[0] = 1.0;
            return w;
        }
        if value >= c[n - 1] {
            w[n - 1] = 1.0;
            return w;
        }
        // first center strictly above value
        let hi = c.partition_point(|&x| x <= value);
        let lo = hi - 1;
        if c[lo] == value {
            w[lo] = 1.0;
            return w;
        }
        let t = (value - c[lo]) / (c[hi] - c[lo]);
        w[lo] = 1.0 - t;
        w[hi] = t;
        w
    }

    /// Expected center under `probs`, mapped back through symexp.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        symexp(self.expect(probs))
    }

    pub fn expect(&self, probs: &[f64]) -> f64 {
        probs.iter().zip(&self.centers).map(|(p, c)| p * c).sum()
    }

    /// Two-hot targets for a batch of raw values, encoded in symlog space.
    pub fn targets<T: Real>(&self, raw: &[f64]) -> Tensor<T> {
        let mut data = Vec::with_capacity(raw.len() * self.count());
        for &r in raw {
            data.extend(self.twohot(symlog(r)).into_iter().map(T::of));
        }
        Tensor::new(&[raw.len(), self.count()], data)
    }

    /// Per-row decoded values of bucket logits.
    pub fn decode_logits<T: Real>(&self, logits: &Tensor<T>) -> Vec<f64> {
        let n = self.count();
        logits
            .data()
            .chunks(n)
            .map(|row| self.decode(&softmax_f64(&row.iter().map(|v| v.f64()).collect::<Vec<_>>())))
            .collect()
    }
}

pub fn softmax_f64(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax probabilities over groups of `classes`, mixed with `unimix` of the
/// uniform distribution.
pub fn categorical_probs<T: Real>(tape: &Tape<T>, logits: Var, classes: usize, unimix: f64) -> Var {
    let p = tape.softmax(logits, classes);
    if unimix > 0.0 {
        let p = tape.scale(p, 1.0 - unimix);
        tape.add_scalar(p, unimix / classes as f64)
    } else {
        p
    }
}

/// `sum_groups q * (ln q - ln p)` per row for probability tensors `[n, g*k]`,
/// giving `[n, 1]`.
pub fn categorical_kl<T: Real>(tape: &Tape<T>, q: Var, p: Var) -> Var {
    let lq = tape.ln(tape.clamp_min(q, PROB_FLOOR));
    let lp = tape.ln(tape.clamp_min(p, PROB_FLOOR));
    tape.sum_cols(tape.mul(q, tape.sub(lq, lp)))
}

/// Reference KL on plain probability vectors, accumulated in f64.
pub fn categorical_kl_f64(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| qi * (qi.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln()))
        .sum()
}

/// One draw per group by inverse CDF; returns the one-hot tensor.
pub fn sample_onehot<T: Real>(probs: &Tensor<T>, classes: usize, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = vec![T::zero(); probs.len()];
    for (g, o) in probs.data().chunks(classes).zip(out.chunks_mut(classes)) {
        o[sample_index(g, rng)] = T::one();
    }
    Tensor::new(probs.shape(), out)
}

pub fn sample_index<T: Real>(probs: &[T], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = probs.iter().map(|p| p.f64()).sum();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.f64() / total;
        if u < acc {
            return i;
        }
    }
    // rounding left u beyond the last cumulative sum
    probs.iter().rposition(|p| p.f64() > 0.0).unwrap_or(probs.len() - 1)
}

/// Straight-through sample: the forward value is a one-hot draw from `probs`,
/// the backward pass sees the gradient of `probs`.
pub fn sample_straight_through<T: Real>(tape: &Tape<T>, probs: Var, classes: usize, rng: &mut impl Rng) -> Var {
    let pv = tape.value(probs);
    let onehot = tape.freeze_with(|| sample_onehot(&pv, classes, rng));
    let onehot = tape.constant(onehot);
    let soft = tape.sub(probs, tape.detach(probs));
    tape.add(onehot, soft)
}

/// Shannon entropy per row of a probability tensor: `[n, k] -> [n, 1]`.
pub fn entropy<T: Real>(tape: &Tape<T>, probs: Var) -> Var {
    let lp = tape.ln(tape.clamp_min(probs, PROB_FLOOR));
    tape.neg(tape.sum_cols(tape.mul(probs, lp)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symlog_fixed_points() {
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        assert!((symlog(-(std::f64::consts::E - 1.0)) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn twohot_on_center_midpoint_and_outside() {
        let b = BucketSpec::uniform(5, -2.0, 2.0);
        assert_eq!(b.twohot(1.0), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(b.twohot(0.5), vec![0.0, 0.0, 0.5, 0.5, 0.0]);
        assert_eq!(b.twohot(9.0), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.twohot(-9.0), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bucket_spec_rejects_non_monotone_centers() {
        assert!(BucketSpec::from_centers(vec![0.0, 0.0, 1.0]).is_none());
        assert!(BucketSpec::from_centers(vec![0.0]).is_none());
        assert!(BucketSpec::from_centers(vec![-1.0, 1.0]).is_some());
    }

    #[test]
    fn decode_of_peaked_zero_is_zero() {
        let b = BucketSpec::uniform(63, -20.0, 20.0);
        let mut logits = vec![-1e4f32; 63];
        logits[31] = 1e4;
        let v = b.decode_logits(&Tensor::new(&[1, 63], logits));
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn kl_closed_forms() {
        let n = 8;
        let uniform = vec![1.0 / n as f64; n];
        let mut onehot = vec![0.0; n];
        onehot[3] = 1.0;
        assert!((categorical_kl_f64(&onehot, &uniform) - (n as f64).ln()).abs() < 1e-12);
        assert_eq!(categorical_kl_f64(&uniform, &uniform), 0.0);
    }

    #[test]
    fn dominant_logit_samples_deterministically() {
        let tape: Tape<f32> = Tape::new();
        let mut logits = vec![0.0f32; 6];
        logits[4] = 1e6;
        let l = tape.constant(Tensor::new(&[1, 6], logits));
        let p = categorical_probs(&tape, l, 6, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let s = sample_straight_through(&tape, p, 6, &mut rng);
            assert_eq!(tape.value(s).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }
}
