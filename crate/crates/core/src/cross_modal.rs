//! Co-attention between encoded clips `V` (`T x D`) and words `Q`
//! (`M x D`), producing the query-guided clip features `F` (`T x D`).
//!
//! ```text
//! S = V (Q W_S)^T
//! A = S_r (Q W_S)          S_r: softmax over words, per clip
//! B = S_r S_c^T V          S_c: softmax over clips, per word
//! F = FFN([V; A; V*A; V*B])
//! ```

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore, Tag};

#[derive(Clone, Debug)]
pub struct CoAttention {
    pub w_s: ParamId,
    pub ffn: Mlp,
    /// Divide `S` by `sqrt(D)`.
    pub scaled: bool,
}

/// Every intermediate of one interaction, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct InteractionTrace {
    pub qw: Var,
    pub s: Var,
    pub s_r: Var,
    pub s_c: Var,
    pub a: Var,
    pub b: Var,
    pub f: Var,
}

impl CoAttention {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, d: usize, scaled: bool, rng: &mut impl Rng) -> Self {
        Self {
            w_s: store.add_glorot(format!("{name}.w_s"), tag, d, d, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), tag, 4 * d, d, d, rng),
            scaled,
        }
    }

    pub fn forward(&self, g: &mut Graph, v: Var, q: Var, q_mask: &[bool]) -> Result<InteractionTrace> {
        let w_s = g.param(self.w_s);
        let (qw, mut s) = similarity(g, v, q, w_s)?;
        if self.scaled {
            let d = g.value(v).cols as f64;
            s = g.scale(s, 1.0 / d.sqrt());
        }
        let (s_r, s_c, a, b) = coattend(g, s, v, qw, q_mask)?;
        let f = fuse(g, v, a, b, &self.ffn);
        Ok(InteractionTrace { qw, s, s_r, s_c, a, b, f })
    }
}

/// Returns `(Q W_S, V (Q W_S)^T)`.
pub fn similarity(g: &mut Graph, v: Var, q: Var, w_s: Var) -> Result<(Var, Var)> {
    let (vd, qd, wd) = (g.value(v).cols, g.value(q).cols, g.value(w_s).shape());
    if vd != qd || wd != (qd, qd) {
        return Err(Error::Shape(format!("similarity: V has {vd} dims, Q has {qd}, W_S is {wd:?}")));
    }
    let qw = g.matmul(q, w_s);
    let s = g.matmul_nt(v, qw);
    Ok((qw, s))
}

/// Returns `(S_r, S_c, A, B)`. Pad words get zero weight in `S_r` and zero
/// columns in `S_c`.
pub fn coattend(g: &mut Graph, s: Var, v: Var, qw: Var, q_mask: &[bool]) -> Result<(Var, Var, Var, Var)> {
    let (t, m) = g.value(s).shape();
    if q_mask.len() != m || g.value(v).rows != t || g.value(qw).rows != m {
        return Err(Error::Shape(format!("coattend: S is {t}x{m}, mask has {} entries", q_mask.len())));
    }
    if !q_mask.iter().any(|&k| k) {
        return Err(Error::AllMasked);
    }
    let s_r = g.softmax_rows(s, Some(q_mask));
    let s_c = g.softmax_cols(s, Some(q_mask));
    let a = g.matmul(s_r, qw);
    let sct_v = g.matmul_tn(s_c, v);
    let b = g.matmul(s_r, sct_v);
    Ok((s_r, s_c, a, b))
}

/// `FFN([V; A; V*A; V*B])`, row by row.
pub fn fuse(g: &mut Graph, v: Var, a: Var, b: Var, ffn: &Mlp) -> Var {
    let va = g.mul(v, a);
    let vb = g.mul(v, b);
    let cat = g.concat_cols(&[v, a, va, vb]);
    ffn.forward(g, cat)
}
