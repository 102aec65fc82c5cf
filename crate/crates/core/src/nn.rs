//! Layers built on the tape: linear maps, embeddings, GRU cells and a small
//! perceptron. Each layer only holds [`ParamId`]s; values live in the owning
//! model's [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Default initialization half-width for every learnable tensor.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], scale, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[1, out_dim], scale, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul_t(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let table = store.add_uniform(format!("{name}.table"), &[vocab, dim], scale, rng);
        Self { table, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let t = tape.param(store, self.table);
        tape.gather(t, ids)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// The three gates are stacked row-wise in `w_ih` / `w_hh` in the order
/// (r, z, n).
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[3 * hidden, in_dim], scale, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[3 * hidden, hidden], scale, rng),
            b_ih: store.add_uniform(format!("{name}.b_ih"), &[1, 3 * hidden], scale, rng),
            b_hh: store.add_uniform(format!("{name}.b_hh"), &[1, 3 * hidden], scale, rng),
            in_dim,
            hidden,
        }
    }

    /// One step for a batch: `x: [b, in_dim]`, `h: [b, hidden]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (w_ih, w_hh) = (tape.param(store, self.w_ih), tape.param(store, self.w_hh));
        let (b_ih, b_hh) = (tape.param(store, self.b_ih), tape.param(store, self.b_hh));
        let gi = tape.matmul_t(x, w_ih);
        let gi = tape.add_row(gi, b_ih);
        let gh = tape.matmul_t(h, w_hh);
        let gh = tape.add_row(gh, b_hh);
        let gi_rz = tape.slice_cols(gi, 0, 2 * hd);
        let gh_rz = tape.slice_cols(gh, 0, 2 * hd);
        let rz = tape.add(gi_rz, gh_rz);
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, hd);
        let z = tape.slice_cols(rz, hd, hd);
        let gi_n = tape.slice_cols(gi, 2 * hd, hd);
        let gh_n = tape.slice_cols(gh, 2 * hd, hd);
        let rn = tape.mul(r, gh_n);
        let n = tape.add(gi_n, rn);
        let n = tape.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Unbatched step on plain vectors with shape validation.
    pub fn step(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim || h.len() != self.hidden {
            return Err(Error::Shape(format!(
                "gru_cell expects x[{}], h[{}]; got x[{}], h[{}]",
                self.in_dim,
                self.hidden,
                x.len(),
                h.len()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(1, x.len(), x.to_vec());
        let hv = tape.constant(1, h.len(), h.to_vec());
        let out = self.forward(&mut tape, store, xv, hv);
        Ok(tape.value(out).to_vec())
    }
}

/// Two-layer perceptron with a rectified-linear hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.l1"), in_dim, hidden, true, scale, rng),
            out: Linear::new(store, &format!("{name}.l2"), hidden, out_dim, true, scale, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(tape, store, x);
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}

/// Multiplies `x` by an inverted-dropout mask drawn from `rng`.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 - rate;
    let mask = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(r, c, mask);
    tape.mul(x, m)
}
