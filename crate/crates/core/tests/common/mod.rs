#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2d_core::bev::{MEASUREMENT_LEN, NUM_CHANNELS};
use t2d_core::replay::{PackedMasks, SequenceBatch, SlotSource, TransitionRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sparse record: about `density` of the pixels set.
pub fn random_record(size: usize, rng: &mut impl Rng, action: Option<usize>, done: bool, density: f64) -> TransitionRecord {
    let masks: Vec<u8> = (0..NUM_CHANNELS * size * size).map(|_| rng.gen_bool(density) as u8).collect();
    let mut measurements = [0f32; MEASUREMENT_LEN];
    for m in &mut measurements {
        *m = rng.gen_range(-3.0..3.0);
    }
    TransitionRecord {
        masks: PackedMasks::pack(&masks, size),
        measurements,
        action,
        reward: rng.gen_range(-1.0..1.0),
        done,
    }
}

pub fn random_episode(size: usize, len: usize, terminated: bool, rng: &mut impl Rng) -> Vec<TransitionRecord> {
    (0..len)
        .map(|i| {
            let action = (i > 0).then(|| rng.gen_range(0..30));
            random_record(size, rng, action, terminated && i + 1 == len, 0.1)
        })
        .collect()
}

/// `batch` independent full-length episodes of `len` steps, the last one
/// terminated.
pub fn random_batch(size: usize, batch: usize, len: usize, seed: u64) -> SequenceBatch {
    let mut r = rng(seed);
    let eps: Vec<Vec<TransitionRecord>> =
        (0..batch).map(|i| random_episode(size, len, i + 1 == batch, &mut r)).collect();
    let slots: Vec<_> = eps
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (
                e.as_slice(),
                SlotSource {
                    episode: i as u64,
                    start: 0,
                    valid: len,
                    anchored: false,
                },
            )
        })
        .collect();
    SequenceBatch::from_slots(&slots, len, size).unwrap()
}
