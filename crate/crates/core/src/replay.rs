//! Episode replay with sequence sampling. Half of the sampled sequences (per
//! batch slot, by coin flip) end exactly at the final frame of a terminated
//! episode whenever one is stored.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::actions::ActionId;
use crate::bev::{BevObservation, MEASUREMENT_LEN, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// BEV masks packed eight pixels per byte, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedMasks {
    pub size: usize,
    pub bits: Vec<u8>,
}

impl PackedMasks {
    pub fn pack(masks: &[u8], size: usize) -> Self {
        let mut bits = vec![0u8; masks.len().div_ceil(8)];
        for (i, &m) in masks.iter().enumerate() {
            if m != 0 {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        Self { size, bits }
    }

    pub fn len(&self) -> usize {
        NUM_CHANNELS * self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.get(i) as u8).collect()
    }

    /// Writes the masks as NHWC `f32` values into `out` (`H * W * C`).
    pub fn write_hwc(&self, out: &mut [f32]) {
        let n = self.size * self.size;
        debug_assert_eq!(out.len(), n * NUM_CHANNELS);
        for c in 0..NUM_CHANNELS {
            for p in 0..n {
                out[p * NUM_CHANNELS + c] = if self.get(c * n + p) { 1.0 } else { 0.0 };
            }
        }
    }
}

/// One frame of an episode: the observation reached, the action that led to
/// it (`None` for the first frame), the reward collected on the way and
/// whether the episode ended there.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub masks: PackedMasks,
    pub measurements: [f32; MEASUREMENT_LEN],
    pub action: Option<ActionId>,
    pub reward: f32,
    pub done: bool,
}

impl TransitionRecord {
    pub fn new(obs: &BevObservation, action: Option<ActionId>, reward: f64, done: bool) -> Self {
        Self {
            masks: PackedMasks::pack(&obs.masks, obs.size),
            measurements: obs.measurements,
            action,
            reward: reward as f32,
            done,
        }
    }
}

#[derive(Clone, Debug)]
struct Episode {
    id: u64,
    records: Vec<TransitionRecord>,
}

impl Episode {
    fn terminated(&self) -> bool {
        self.records.last().is_some_and(|r| r.done)
    }
}

/// Where one batch slot came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotSource {
    pub episode: u64,
    /// Index of the first valid record inside the episode.
    pub start: usize,
    pub valid: usize,
    /// The slot ends at the final frame of a terminated episode by choice of
    /// the termination coin.
    pub anchored: bool,
}

/// `batch` sequences of `len` steps, laid out time-major: row `t * batch + i`
/// holds step `t` of slot `i`. Short sequences are padded at the front with
/// all-zero records whose `mask` is false.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub batch: usize,
    pub len: usize,
    pub size: usize,
    /// `[len * batch, size, size, C]` NHWC.
    pub obs: Tensor<f32>,
    /// `[len * batch, MEASUREMENT_LEN]`.
    pub meas: Tensor<f32>,
    pub action: Vec<Option<ActionId>>,
    pub reward: Vec<f32>,
    pub done: Vec<bool>,
    /// First valid step of each slot; the latent state restarts here.
    pub reset: Vec<bool>,
    pub mask: Vec<bool>,
    pub sources: Vec<SlotSource>,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Builds a batch from explicit per-slot record runs (each at most `len`
    /// long).
    pub fn from_slots(slots: &[(&[TransitionRecord], SlotSource)], len: usize, size: usize) -> Result<Self> {
        let batch = slots.len();
        let rows = batch * len;
        let frame = size * size * NUM_CHANNELS;
        let mut obs = vec![0f32; rows * frame];
        let mut meas = vec![0f32; rows * MEASUREMENT_LEN];
        let mut action = vec![None; rows];
        let mut reward = vec![0f32; rows];
        let mut done = vec![false; rows];
        let mut reset = vec![false; rows];
        let mut mask = vec![false; rows];
        for (i, (recs, _)) in slots.iter().enumerate() {
            if recs.len() > len || recs.is_empty() {
                return Err(Error::Usage(format!("slot {i} holds {} records for length {len}", recs.len())));
            }
            let pad = len - recs.len();
            for (k, r) in recs.iter().enumerate() {
                if r.masks.size != size {
                    return Err(Error::Validation(format!("record of size {} in a batch of size {size}", r.masks.size)));
                }
                let row = (pad + k) * batch + i;
                r.masks.write_hwc(&mut obs[row * frame..(row + 1) * frame]);
                meas[row * MEASUREMENT_LEN..(row + 1) * MEASUREMENT_LEN].copy_from_slice(&r.measurements);
                action[row] = r.action;
                reward[row] = r.reward;
                done[row] = r.done;
                reset[row] = k == 0;
                mask[row] = true;
            }
        }
        Ok(Self {
            batch,
            len,
            size,
            obs: Tensor::new(&[rows, size, size, NUM_CHANNELS], obs),
            meas: Tensor::new(&[rows, MEASUREMENT_LEN], meas),
            action,
            reward,
            done,
            reset,
            mask,
            sources: slots.iter().map(|(_, s)| *s).collect(),
        })
    }

    /// Names the first field holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        if !self.obs.all_finite() {
            return Err(Error::NonFinite("batch field obs".into()));
        }
        if !self.meas.all_finite() {
            return Err(Error::NonFinite("batch field meas".into()));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("batch field reward".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    steps: usize,
    next_id: u64,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 500_000;

    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            steps: 0,
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored steps.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_terminated(&self) -> usize {
        self.episodes.iter().filter(|e| e.terminated()).count()
    }

    /// Ids and lengths of live episodes, oldest first.
    pub fn episode_lengths(&self) -> Vec<(u64, usize)> {
        self.episodes.iter().map(|e| (e.id, e.records.len())).collect()
    }

    /// Stores an episode, evicting the oldest whole episodes when over
    /// capacity. Returns the episode id.
    pub fn append(&mut self, records: Vec<TransitionRecord>) -> Result<u64> {
        if records.is_empty() {
            return Err(Error::Validation("empty episode".into()));
        }
        if records[..records.len() - 1].iter().any(|r| r.done) {
            return Err(Error::Validation("done flag before the final record".into()));
        }
        if records.len() > self.capacity {
            return Err(Error::Validation(format!(
                "episode of {} steps exceeds replay capacity {}",
                records.len(),
                self.capacity
            )));
        }
        let size = records[0].masks.size;
        if records.iter().any(|r| r.masks.size != size) {
            return Err(Error::Validation("mixed raster sizes in one episode".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.steps += records.len();
        self.episodes.push_back(Episode { id, records });
        while self.steps > self.capacity {
            let old = self.episodes.pop_front().expect("over capacity implies an episode");
            self.steps -= old.records.len();
        }
        Ok(id)
    }

    fn starts(n: usize, len: usize) -> usize {
        if n >= len {
            n - len + 1
        } else {
            1
        }
    }

    /// Samples `batch` sequences of `len` steps.
    pub fn sample(&self, batch: usize, len: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        if self.episodes.is_empty() {
            return Err(Error::Unavailable("replay buffer is empty".into()));
        }
        if batch == 0 || len == 0 {
            return Err(Error::Usage("batch and sequence length must be positive".into()));
        }
        let terminated: Vec<usize> = (0..self.episodes.len()).filter(|&i| self.episodes[i].terminated()).collect();
        let mut cum = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for e in &self.episodes {
            total += Self::starts(e.records.len(), len);
            cum.push(total);
        }
        let mut slots = Vec::with_capacity(batch);
        for _ in 0..batch {
            let anchored = !terminated.is_empty() && rng.gen_bool(0.5);
            let (ei, start) = if anchored {
                let ei = terminated[rng.gen_range(0..terminated.len())];
                (ei, self.episodes[ei].records.len().saturating_sub(len))
            } else {
                let u = rng.gen_range(0..total);
                let ei = cum.partition_point(|&c| c <= u);
                let before = if ei == 0 { 0 } else { cum[ei - 1] };
                (ei, u - before)
            };
            let e = &self.episodes[ei];
            let end = (start + len).min(e.records.len());
            let src = SlotSource {
                episode: e.id,
                start,
                valid: end - start,
                anchored,
            };
            slots.push((&e.records[start..end], src));
        }
        let size = slots[0].0[0].masks.size;
        SequenceBatch::from_slots(&slots, len, size)
    }

    /// Writes all live episodes: magic `T2DR`, version, episode count, then
    /// length-prefixed little-endian records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(b"T2DR");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.episodes.len() as u64).to_le_bytes());
        for e in &self.episodes {
            out.extend_from_slice(&(e.records.len() as u64).to_le_bytes());
            for r in &e.records {
                let mut rec = Vec::new();
                rec.extend_from_slice(&r.action.map_or(-1i32, |a| a as i32).to_le_bytes());
                rec.extend_from_slice(&r.reward.to_le_bytes());
                rec.push(r.done as u8);
                for m in r.measurements {
                    rec.extend_from_slice(&m.to_le_bytes());
                }
                rec.extend_from_slice(&(r.masks.size as u32).to_le_bytes());
                rec.extend_from_slice(&r.masks.bits);
                out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
                out.extend_from_slice(&rec);
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, capacity: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let loc = path.display().to_string();
        let bad = |m: &str| Error::parse(&loc, m);
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != b"T2DR" {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != 1 {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = cur.u64().ok_or_else(|| bad("truncated header"))?;
        let mut buf = Self::new(capacity);
        for _ in 0..n {
            let len = cur.u64().ok_or_else(|| bad("truncated episode"))? as usize;
            let mut records = Vec::with_capacity(len);
            for _ in 0..len {
                let rec_len = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
                let rec = cur.take(rec_len).ok_or_else(|| bad("truncated record"))?;
                records.push(parse_record(rec).ok_or_else(|| bad("malformed record"))?);
            }
            buf.append(records)?;
        }
        Ok(buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f32(&mut self) -> Option<f32> {
        Some(f32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

fn parse_record(rec: &[u8]) -> Option<TransitionRecord> {
    let mut c = Cursor { bytes: rec, pos: 0 };
    let action = i32::from_le_bytes(c.take(4)?.try_into().ok()?);
    let reward = c.f32()?;
    let done = c.take(1)?[0] != 0;
    let mut measurements = [0f32; MEASUREMENT_LEN];
    for m in &mut measurements {
        *m = c.f32()?;
    }
    let size = c.u32()? as usize;
    let bits = c.take((NUM_CHANNELS * size * size).div_ceil(8))?.to_vec();
    (c.pos == rec.len()).then_some(TransitionRecord {
        masks: PackedMasks { size, bits },
        measurements,
        action: (action >= 0).then_some(action as usize),
        reward,
        done,
    })
}

/// Replay shared between collection threads and the trainer.
#[derive(Clone, Debug)]
pub struct SharedReplay(Arc<Mutex<ReplayBuffer>>);

impl SharedReplay {
    pub fn new(capacity: usize) -> Self {
        Self(Arc::new(Mutex::new(ReplayBuffer::new(capacity))))
    }

    pub fn append(&self, records: Vec<TransitionRecord>) -> Result<u64> {
        self.lock().append(records)
    }

    pub fn sample(&self, batch: usize, len: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        self.lock().sample(batch, len, rng)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    pub fn lock(&self) -> std::sync::MutexGuard<'_, ReplayBuffer> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(size: usize, tag: f32, done: bool) -> TransitionRecord {
        let mut masks = vec![0u8; NUM_CHANNELS * size * size];
        let n = masks.len();
        masks[(tag as usize) % n] = 1;
        let mut measurements = [0f32; MEASUREMENT_LEN];
        measurements[0] = tag;
        TransitionRecord {
            masks: PackedMasks::pack(&masks, size),
            measurements,
            action: Some(tag as usize % 30),
            reward: tag,
            done,
        }
    }

    fn episode(n: usize, terminated: bool) -> Vec<TransitionRecord> {
        (0..n).map(|i| record(16, i as f32, terminated && i + 1 == n)).collect()
    }

    #[test]
    fn pack_roundtrip() {
        let masks: Vec<u8> = (0..NUM_CHANNELS * 256).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        assert_eq!(PackedMasks::pack(&masks, 16).unpack(), masks);
    }

    #[test]
    fn append_evicts_whole_episodes() {
        let mut b = ReplayBuffer::new(15);
        b.append(episode(10, false)).unwrap();
        assert_eq!(b.len(), 10);
        b.append(episode(10, true)).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.num_episodes(), 1);
        assert_eq!(b.num_terminated(), 1);
        let mut bad = episode(5, false);
        bad[2].done = true;
        assert!(b.append(bad).is_err());
        assert!(b.append(Vec::new()).is_err());
    }

    #[test]
    fn empty_buffer_is_unavailable() {
        let b = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(2, 4, &mut rng), Err(Error::Unavailable(_))));
    }

    #[test]
    fn short_terminated_episode_is_front_padded() {
        let mut b = ReplayBuffer::new(100);
        b.append(episode(3, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = b.sample(1, 8, &mut rng).unwrap();
        assert_eq!(s.mask, vec![false, false, false, false, false, true, true, true]);
        assert_eq!(s.reset[5], true);
        assert!(s.done[7]);
        assert_eq!(s.reward[5..], [0.0, 1.0, 2.0]);
        assert!(s.action[..5].iter().all(|a| a.is_none()));
    }

    #[test]
    fn save_load_roundtrip() {
        let mut b = ReplayBuffer::new(100);
        b.append(episode(4, false)).unwrap();
        b.append(episode(6, true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("replay.bin");
        b.save(&p).unwrap();
        let c = ReplayBuffer::load(&p, 100).unwrap();
        assert_eq!(c.episode_lengths(), b.episode_lengths());
        for (x, y) in c.episodes.iter().zip(&b.episodes) {
            assert_eq!(x.records, y.records);
        }
        std::fs::write(&p, b"T2DX").unwrap();
        assert!(ReplayBuffer::load(&p, 100).is_err());
    }
}
