//! Proposal-free boundary head: one LSTM scores start clips, another end
//! clips. Each logit reads `[f_t; h_t]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logsumexp, Graph, Var};
use crate::nn::{Linear, Lstm};
use crate::params::{ParamStore, Tag};
use crate::tensor::{sigmoid, softplus, Mat};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadLoss {
    /// Per-clip sigmoid cross-entropy averaged over `2T` terms.
    #[default]
    Bce,
    /// Softmax over clips for the start and for the end, averaged.
    Softmax,
}

#[derive(Clone, Debug)]
pub struct BoundaryHead {
    pub lstm_start: Lstm,
    pub lstm_end: Lstm,
    pub out_start: Linear,
    pub out_end: Linear,
}

/// Start and end logits for every clip.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScores {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl BoundaryScores {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

impl BoundaryHead {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            lstm_start: Lstm::new(store, &format!("{name}.lstm_start"), tag, d, d, rng),
            lstm_end: Lstm::new(store, &format!("{name}.lstm_end"), tag, d, d, rng),
            out_start: Linear::new(store, &format!("{name}.out_start"), tag, 2 * d, 1, rng),
            out_end: Linear::new(store, &format!("{name}.out_end"), tag, 2 * d, 1, rng),
        }
    }

    /// `T x D` features to `(start, end)` logit columns, each `T x 1`.
    pub fn forward(&self, g: &mut Graph, f: Var) -> (Var, Var) {
        let hs = self.lstm_start.forward(g, f);
        let cat_s = g.concat_cols(&[f, hs]);
        let cs = self.out_start.forward(g, cat_s);
        let he = self.lstm_end.forward(g, f);
        let cat_e = g.concat_cols(&[f, he]);
        let ce = self.out_end.forward(g, cat_e);
        (cs, ce)
    }

    pub fn scores(&self, g: &mut Graph, f: Var) -> BoundaryScores {
        let (cs, ce) = self.forward(g, f);
        BoundaryScores { start: g.value(cs).data.clone(), end: g.value(ce).data.clone() }
    }
}

/// Per-clip targets: 1 at `idx`, decaying linearly to 0 over `radius`
/// neighbours on each side.
pub fn boundary_labels(len: usize, idx: usize, radius: usize) -> Mat {
    let mut m = Mat::zeros(len, 1);
    for t in 0..len {
        let d = t.abs_diff(idx);
        if d <= radius {
            m.data[t] = 1.0 - d as f64 / (radius + 1) as f64;
        }
    }
    m
}

/// Grounding loss on logit columns `cs`, `ce` for ground truth `(s, e)`.
pub fn tsg_loss(g: &mut Graph, cs: Var, ce: Var, gt: (usize, usize), kind: HeadLoss, smoothing: usize) -> Var {
    let t = g.value(cs).rows;
    match kind {
        HeadLoss::Bce => {
            let ls = g.bce_logits(cs, boundary_labels(t, gt.0, smoothing));
            let le = g.bce_logits(ce, boundary_labels(t, gt.1, smoothing));
            let sum = g.add(ls, le);
            g.scale(sum, 1.0 / (2 * t) as f64)
        }
        HeadLoss::Softmax => {
            let lse_s = g.logsumexp(cs);
            let ps = g.pick(cs, gt.0);
            let lse_e = g.logsumexp(ce);
            let pe = g.pick(ce, gt.1);
            let a = g.sub(lse_s, ps);
            let b = g.sub(lse_e, pe);
            let sum = g.add(a, b);
            g.scale(sum, 0.5)
        }
    }
}

/// Plain-value version of [`tsg_loss`] with no smoothing.
pub fn tsg_loss_value(scores: &BoundaryScores, gt: (usize, usize), kind: HeadLoss) -> f64 {
    let t = scores.len();
    match kind {
        HeadLoss::Bce => {
            let term = |c: f64, y: f64| softplus(c) - y * c;
            let mut s = 0.0;
            for i in 0..t {
                s += term(scores.start[i], (i == gt.0) as u8 as f64);
                s += term(scores.end[i], (i == gt.1) as u8 as f64);
            }
            s / (2 * t) as f64
        }
        HeadLoss::Softmax => {
            0.5 * (logsumexp(&scores.start) - scores.start[gt.0] + logsumexp(&scores.end) - scores.end[gt.1])
        }
    }
}

/// A decoded segment in clip indices with its summed boundary probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// The `n` best `(s, e)` pairs with `s <= e` (and `e - s < max_len` when
/// given) by `sigmoid(C_s[s]) + sigmoid(C_e[e])`. Ties go to the smaller
/// start, then the smaller end.
pub fn decode_top_n(scores: &BoundaryScores, n: usize, max_len: Option<usize>) -> Vec<Segment> {
    let t = scores.len();
    let ps: Vec<f64> = scores.start.iter().map(|&c| sigmoid(c)).collect();
    let pe: Vec<f64> = scores.end.iter().map(|&c| sigmoid(c)).collect();
    let mut cands = Vec::with_capacity(t * (t + 1) / 2);
    for s in 0..t {
        for e in s..t {
            if max_len.is_some_and(|m| e - s >= m) {
                break;
            }
            cands.push(Segment { start: s, end: e, score: ps[s] + pe[e] });
        }
    }
    let k = n.min(cands.len());
    let cmp = |a: &Segment, b: &Segment| {
        b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)).then(a.end.cmp(&b.end))
    };
    if k < cands.len() && k > 0 {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_by(cmp);
    cands.truncate(k);
    cands
}

/// Temporal IoU of two half-open intervals `[s, e)`.
pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of inclusive clip-index segments, i.e. intervals `[s, e + 1)`.
pub fn clip_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    iou((a.0 as f64, a.1 as f64 + 1.0), (b.0 as f64, b.1 as f64 + 1.0))
}
