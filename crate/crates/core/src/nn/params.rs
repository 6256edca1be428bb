use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{Real, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is drawn when (re)initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, scaled.
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore<T = f32> {
    uid: u64,
    names: Vec<String>,
    inits: Vec<Init>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            names: self.names.clone(),
            inits: self.inits.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: next_uid(),
            names: Vec::new(),
            inits: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let t = draw(shape, init, rng);
        self.names.push(name.to_string());
        self.inits.push(init);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Redraws every parameter from its initializer.
    pub fn reinitialize(&mut self, rng: &mut impl Rng) {
        for (t, init) in self.tensors.iter_mut().zip(&self.inits) {
            *t = draw(t.shape(), *init, rng);
        }
    }

    /// Same parameters in another precision (fresh uid).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: next_uid(),
            names: self.names.clone(),
            inits: self.inits.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// FNV-1a over the raw bit patterns of every value, in parameter order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Overwrites a parameter by name; shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), String> {
        let id = self.find(name).ok_or_else(|| format!("no parameter named {name}"))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.tensors[id.0].shape()
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }
}

fn draw<T: Real>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Constant(c) => vec![T::of(c); n],
        Init::Xavier { fan_in, fan_out, gain } => {
            let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| T::of(rng.gen_range(-limit..=limit))).collect()
        }
    };
    Tensor::new(shape, data)
}
