use rand::Rng;

use super::conv::ConvGeom;
use super::params::{Init, ParamId, ParamStore};
use super::{Real, Tape, Var};

const LN_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self::with_init(
            store,
            name,
            inputs,
            outputs,
            Init::Xavier { fan_in: inputs, fan_out: outputs, gain: 1.0 },
            rng,
        )
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[inputs, outputs], init, rng);
        let b = store.add(&format!("{name}.b"), &[outputs], Init::Zeros, rng);
        Self { w, b, inputs, outputs }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = tape.matmul(x, tape.param(store, self.w));
        tape.add_row(y, tape.param(store, self.b))
    }
}

/// Layer normalization with learned gain and bias over the last axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Ones, rng),
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let n = tape.mul_row(n, tape.param(store, self.gain));
        tape.add_row(n, tape.param(store, self.bias))
    }
}

/// `layers` hidden blocks of dense -> norm -> SiLU, then a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<(Linear, Norm)>,
    pub head: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        units: usize,
        layers: usize,
        outputs: usize,
        head_init: Option<Init>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut hidden = Vec::with_capacity(layers);
        let mut width = inputs;
        for i in 0..layers {
            let lin = Linear::new(store, &format!("{name}.h{i}"), width, units, rng);
            let norm = Norm::new(store, &format!("{name}.n{i}"), units, rng);
            hidden.push((lin, norm));
            width = units;
        }
        let init = head_init.unwrap_or(Init::Xavier { fan_in: width, fan_out: outputs, gain: 1.0 });
        let head = Linear::with_init(store, &format!("{name}.out"), width, outputs, init, rng);
        Self { hidden, head }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for (lin, norm) in &self.hidden {
            h = tape.silu(norm.forward(tape, store, lin.forward(tape, store, h)));
        }
        self.head.forward(tape, store, h)
    }
}

/// Stride-2 4x4 convolution block: conv -> norm -> SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    w: ParamId,
    b: ParamId,
    norm: Option<Norm>,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let g = ConvGeom::DOWN2;
        let fan_in = g.patch_len(cin);
        let w = store.add(
            &format!("{name}.w"),
            &[fan_in, cout],
            Init::Xavier { fan_in, fan_out: g.patch_len(cout), gain: 1.0 },
            rng,
        );
        let b = store.add(&format!("{name}.b"), &[cout], Init::Zeros, rng);
        Self {
            w,
            b,
            norm: Some(Norm::new(store, &format!("{name}.n"), cout, rng)),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = tape.conv2d(x, tape.param(store, self.w), ConvGeom::DOWN2);
        let y = tape.add_row(y, tape.param(store, self.b));
        match &self.norm {
            Some(n) => tape.silu(n.forward(tape, store, y)),
            None => y,
        }
    }
}

/// Stride-2 4x4 transposed convolution block. The last block of a decoder
/// has no normalization or activation.
#[derive(Clone, Debug)]
pub struct DeconvBlock {
    w: ParamId,
    b: ParamId,
    cout: usize,
    norm: Option<Norm>,
}

impl DeconvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, last: bool, rng: &mut impl Rng) -> Self {
        let g = ConvGeom::DOWN2;
        let w = store.add(
            &format!("{name}.w"),
            &[cin, g.patch_len(cout)],
            Init::Xavier { fan_in: g.patch_len(cin) / 4, fan_out: g.patch_len(cout) / 4, gain: 1.0 },
            rng,
        );
        let b = store.add(&format!("{name}.b"), &[cout], Init::Zeros, rng);
        let norm = (!last).then(|| Norm::new(store, &format!("{name}.n"), cout, rng));
        Self { w, b, cout, norm }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = tape.conv_transpose2d(x, tape.param(store, self.w), self.cout, ConvGeom::DOWN2);
        let y = tape.add_row(y, tape.param(store, self.b));
        match &self.norm {
            Some(n) => tape.silu(n.forward(tape, store, y)),
            None => y,
        }
    }
}

/// Gated recurrent unit. With reset gate `r`, update gate `u` and candidate
/// `c = tanh(Wx + r * Uh)`, the new state is `h + u * (c - h)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = store.add(
            &format!("{name}.wx"),
            &[inputs, 3 * hidden],
            Init::Xavier { fan_in: inputs, fan_out: hidden, gain: 1.0 },
            rng,
        );
        let wh = store.add(
            &format!("{name}.wh"),
            &[hidden, 3 * hidden],
            Init::Xavier { fan_in: hidden, fan_out: hidden, gain: 1.0 },
            rng,
        );
        // update gate starts biased towards keeping the state
        let b = store.add(&format!("{name}.b"), &[3 * hidden], Init::Zeros, rng);
        let bias = store.get_mut(b).data_mut();
        for v in &mut bias[hidden..2 * hidden] {
            *v = -1.0;
        }
        Self { wx, wh, b, hidden }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, h: Var, x: Var) -> Var {
        let n = self.hidden;
        let gx = tape.add_row(tape.matmul(x, tape.param(store, self.wx)), tape.param(store, self.b));
        let gh = tape.matmul(h, tape.param(store, self.wh));
        let r = tape.sigmoid(tape.add(tape.slice_cols(gx, 0, n), tape.slice_cols(gh, 0, n)));
        let u = tape.sigmoid(tape.add(tape.slice_cols(gx, n, n), tape.slice_cols(gh, n, n)));
        let c = tape.tanh(tape.add(
            tape.slice_cols(gx, 2 * n, n),
            tape.mul(r, tape.slice_cols(gh, 2 * n, n)),
        ));
        tape.add(h, tape.mul(u, tape.sub(c, h)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gru_fixture() -> (ParamStore, GruCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        (store, cell)
    }

    #[test]
    fn gru_zero_weights_give_bias_determined_state() {
        let (mut store, cell) = gru_fixture();
        for id in [cell.wx, cell.wh] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let tape: Tape<f32> = Tape::inference();
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]));
        let out = tape.value(cell.forward(&tape, &store, h, x));
        // u = sigmoid(-1), c = tanh(0) = 0 -> h' = 0 regardless of input
        assert!(out.data().iter().all(|&v| v == 0.0));
        store.get_mut(cell.b).data_mut()[8..].fill(0.5);
        // parameter leaves are cached per tape, so use a fresh one
        let tape: Tape<f32> = Tape::inference();
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]));
        let out = tape.value(cell.forward(&tape, &store, h, x));
        let want = (1.0 / (1.0 + 1f32.exp())) * 0.5f32.tanh();
        assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn gru_closed_update_gate_keeps_state() {
        let (mut store, cell) = gru_fixture();
        store.get_mut(cell.b).data_mut()[4..8].fill(-1e4);
        let tape: Tape<f32> = Tape::inference();
        let h0 = Tensor::new(&[1, 4], vec![0.3, -0.7, 0.9, 0.0]);
        let h = tape.constant(h0.clone());
        let x = tape.constant(Tensor::new(&[1, 3], vec![0.2, 0.4, -1.0]));
        let out = tape.value(cell.forward(&tape, &store, h, x));
        assert_eq!(out.data(), h0.data());
    }

    #[test]
    fn gru_output_stays_bounded() {
        let (store, cell) = gru_fixture();
        let tape: Tape<f32> = Tape::inference();
        let mut h = tape.constant(Tensor::zeros(&[1, 4]));
        for i in 0..50 {
            let x = tape.constant(Tensor::new(&[1, 3], vec![100.0 * (i as f32).sin(), -50.0, 30.0]));
            h = cell.forward(&tape, &store, h, x);
            assert!(tape.value(h).data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
