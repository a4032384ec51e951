//! Single-layer GRU on the tape.
//!
//! ```text
//! z = σ(W_z x + U_z h + b_z)
//! r = σ(W_r x + U_r h + b_r)
//! n = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::{Tensor, TensorError};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub input: usize,
    /// Output width; split in half per direction when bidirectional.
    pub output: usize,
    pub bidirectional: bool,
}

/// One direction: stacked input weights `3h × in` (z, r, n), recurrent
/// gate weights `2h × h` (z, r), candidate recurrent weights `h × h`, bias `1 × 3h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Direction {
    w: ParamId,
    u_zr: ParamId,
    u_n: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruParams {
    pub spec: GruSpec,
    hidden: usize,
    dirs: Vec<Direction>,
}

impl GruParams {
    /// Registers parameters `{prefix}.{fwd|bwd}.{w,u_zr,u_n,b}` with the
    /// uniform ±1/√fan_in initialisation and zero biases.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: GruSpec,
        rng: &mut R,
    ) -> Result<GruParams, TensorError> {
        if spec.input == 0 || spec.output == 0 || (spec.bidirectional && spec.output % 2 != 0) {
            return Err(TensorError::Invalid { op: "gru", message: "bidirectional output width must be even and non-zero" });
        }
        let h = if spec.bidirectional { spec.output / 2 } else { spec.output };
        let names: &[&str] = if spec.bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
        let mut dirs = Vec::new();
        for d in names {
            let name = |p: &str| -> String { format!("{prefix}.{d}.{p}") };
            let bi = 1.0 / math::sqrt(spec.input as f64);
            let bh = 1.0 / math::sqrt(h as f64);
            dirs.push(Direction {
                w: store.add(name("w"), Tensor::uniform(3 * h, spec.input, bi, rng))?,
                u_zr: store.add(name("u_zr"), Tensor::uniform(2 * h, h, bh, rng))?,
                u_n: store.add(name("u_n"), Tensor::uniform(h, h, bh, rng))?,
                b: store.add(name("b"), Tensor::zeros(1, 3 * h))?,
            });
        }
        Ok(GruParams { spec, hidden: h, dirs })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the sequence `x` (`T × in`) and returns the final state(s), `1 × output`.
    pub fn run(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TensorError> {
        let (t_len, width) = tape.shape(x);
        if t_len == 0 {
            return Err(TensorError::Invalid { op: "gru", message: "empty sequence" });
        }
        if width != self.spec.input {
            return Err(TensorError::ShapeMismatch { op: "gru", left: (t_len, width), right: (t_len, self.spec.input) });
        }
        let mut finals = Vec::with_capacity(self.dirs.len());
        for (k, d) in self.dirs.iter().enumerate() {
            let order: Vec<usize> = if k == 0 { (0..t_len).collect() } else { (0..t_len).rev().collect() };
            finals.push(self.run_direction(tape, x, d, &order)?);
        }
        if finals.len() == 1 {
            Ok(finals[0])
        } else {
            tape.concat_cols(&finals)
        }
    }

    fn run_direction(&self, tape: &mut Tape<'_>, x: Var, d: &Direction, order: &[usize]) -> Result<Var, TensorError> {
        let h = self.hidden;
        let w = tape.param(d.w);
        let u_zr = tape.param(d.u_zr);
        let u_n = tape.param(d.u_n);
        let b = tape.param(d.b);
        // Input contributions for every step at once: T × 3h.
        let xw = tape.matmul_nt(x, w)?;
        let xw = tape.add_row(xw, b)?;
        let mut state = tape.leaf(Tensor::zeros(1, h))?;
        for &t in order {
            let xt = tape.slice_rows(xw, t, 1)?;
            let x_zr = tape.slice_cols(xt, 0, 2 * h)?;
            let x_n = tape.slice_cols(xt, 2 * h, h)?;
            let h_zr = tape.matmul_nt(state, u_zr)?;
            let pre_zr = tape.add(x_zr, h_zr)?;
            let zr = tape.sigmoid(pre_zr)?;
            let z = tape.slice_cols(zr, 0, h)?;
            let r = tape.slice_cols(zr, h, h)?;
            let rh = tape.mul(r, state)?;
            let h_n = tape.matmul_nt(rh, u_n)?;
            let pre_n = tape.add(x_n, h_n)?;
            let n = tape.tanh(pre_n)?;
            let one_minus_z = tape.affine(z, -1.0, 1.0)?;
            let keep_new = tape.mul(one_minus_z, n)?;
            let keep_old = tape.mul(z, state)?;
            state = tape.add(keep_new, keep_old)?;
        }
        Ok(state)
    }
}
