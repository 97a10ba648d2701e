//! Single-layer LSTM over flattened frames and the linear head mapping the
//! final hidden state back onto the grid.
//!
//! Batches are rows: `x_t` is `B x d_in`, every state is `B x d_h`.

use rand::Rng;

use crate::diff::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 128;

/// Gate weights and biases. Input matrices are `d_h x d_in`, recurrent ones
/// `d_h x d_h`.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_if: ParamId,
    pub w_hf: ParamId,
    pub w_ii: ParamId,
    pub w_hi: ParamId,
    pub w_ic: ParamId,
    pub w_hc: ParamId,
    pub w_io: ParamId,
    pub w_ho: ParamId,
    pub b_if: ParamId,
    pub b_hf: ParamId,
    pub b_ii: ParamId,
    pub b_hi: ParamId,
    pub b_ic: ParamId,
    pub b_hc: ParamId,
    pub b_io: ParamId,
    pub b_ho: ParamId,
}

impl LstmCellParams {
    pub fn new(params: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let bx = 1.0 / (d_in as f64).sqrt();
        let bh = 1.0 / (d_h as f64).sqrt();
        let mut w = |name: &str, cols: usize, bound: f64| params.add_uniform(format!("{prefix}.{name}"), vec![d_h, cols], bound, rng);
        let (w_if, w_hf) = (w("W_if", d_in, bx), w("W_hf", d_h, bh));
        let (w_ii, w_hi) = (w("W_ii", d_in, bx), w("W_hi", d_h, bh));
        let (w_ic, w_hc) = (w("W_ic", d_in, bx), w("W_hc", d_h, bh));
        let (w_io, w_ho) = (w("W_io", d_in, bx), w("W_ho", d_h, bh));
        let mut b = |name: &str, bound: f64| params.add_uniform(format!("{prefix}.{name}"), vec![d_h], bound, rng);
        let (b_if, b_hf) = (b("b_if", bx), b("b_hf", bh));
        let (b_ii, b_hi) = (b("b_ii", bx), b("b_hi", bh));
        let (b_ic, b_hc) = (b("b_ic", bx), b("b_hc", bh));
        let (b_io, b_ho) = (b("b_io", bx), b("b_ho", bh));
        LstmCellParams {
            d_in,
            d_h,
            w_if,
            w_hf,
            w_ii,
            w_hi,
            w_ic,
            w_hc,
            w_io,
            w_ho,
            b_if,
            b_hf,
            b_ii,
            b_hi,
            b_ic,
            b_hc,
            b_io,
            b_ho,
        }
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.w_if, self.w_hf, self.w_ii, self.w_hi, self.w_ic, self.w_hc, self.w_io, self.w_ho, self.b_if, self.b_hf, self.b_ii,
            self.b_hi, self.b_ic, self.b_hc, self.b_io, self.b_ho,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Gate activations of one step, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub state: LstmState,
    pub forget: Var,
    pub input: Var,
    pub output: Var,
    pub candidate: Var,
}

/// One step. `state = None` is the zero state; the recurrent matrices then
/// contribute nothing but their biases still do.
pub fn lstm_step(tape: &mut Tape, bound: &[Var], p: &LstmCellParams, x: Var, state: Option<LstmState>) -> Result<LstmStep> {
    match tape.shape(x) {
        [_, d] if *d == p.d_in => {}
        s => return Err(Error::shape("lstm_step", s, &[0, p.d_in])),
    }
    if let Some(s) = state {
        if tape.shape(s.h) != tape.shape(s.c) || tape.shape(s.h) != [tape.shape(x)[0], p.d_h] {
            return Err(Error::shape("lstm_step", tape.shape(s.h), &[tape.shape(x)[0], p.d_h]));
        }
    }
    let gate = |tape: &mut Tape, wx: ParamId, wh: ParamId, bx: ParamId, bh: ParamId| -> Result<Var> {
        let mut z = tape.matmul_t(x, bound[wx.0])?;
        if let Some(s) = state {
            let r = tape.matmul_t(s.h, bound[wh.0])?;
            z = tape.add(z, r)?;
        }
        z = tape.add_bias(z, bound[bx.0])?;
        tape.add_bias(z, bound[bh.0])
    };
    let zf = gate(tape, p.w_if, p.w_hf, p.b_if, p.b_hf)?;
    let zi = gate(tape, p.w_ii, p.w_hi, p.b_ii, p.b_hi)?;
    let zc = gate(tape, p.w_ic, p.w_hc, p.b_ic, p.b_hc)?;
    let zo = gate(tape, p.w_io, p.w_ho, p.b_io, p.b_ho)?;
    let forget = tape.sigmoid(zf);
    let input = tape.sigmoid(zi);
    let candidate = tape.tanh(zc);
    let output = tape.sigmoid(zo);
    let fresh = tape.mul(input, candidate)?;
    let c = match state {
        Some(s) => {
            let kept = tape.mul(forget, s.c)?;
            tape.add(kept, fresh)?
        }
        None => fresh,
    };
    let tc = tape.tanh(c);
    let h = tape.mul(output, tc)?;
    Ok(LstmStep {
        state: LstmState { h, c },
        forget,
        input,
        output,
        candidate,
    })
}

/// Linear projection of the final hidden state onto the `d_in` grid cells.
#[derive(Clone, Debug)]
pub struct Head {
    /// `cells x d_h`
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Head {
    pub fn new(params: &mut ParamStore, prefix: &str, cells: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        Head {
            weight: params.add_uniform(format!("{prefix}.weight"), vec![cells, d_h], bound, rng),
            bias: params.add_uniform(format!("{prefix}.bias"), vec![cells], bound, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], h: Var) -> Result<Var> {
        let y = tape.matmul_t(h, bound[self.weight.0])?;
        tape.add_bias(y, bound[self.bias.0])
    }
}

/// Run the cell over `frames` (each `B x d_in`) from the zero state and
/// project the last hidden state: the result is `B x cells`.
pub fn lstm_over_sequence(tape: &mut Tape, bound: &[Var], p: &LstmCellParams, head: &Head, frames: &[Var]) -> Result<Var> {
    if frames.is_empty() {
        return Err(Error::Config("LSTM needs at least one frame".into()));
    }
    let mut state = None;
    for &x in frames {
        state = Some(lstm_step(tape, bound, p, x, state)?.state);
    }
    head.forward(tape, bound, state.expect("non-empty").h)
}
