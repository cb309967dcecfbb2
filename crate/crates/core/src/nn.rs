//! Parameterized building blocks shared by every model component.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore, Tag};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), tag, d_in, d_out, rng);
        let b = store.add_const(format!("{name}.b"), tag, 1, d_out, 0.0);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// `Linear -> ReLU -> Linear`, applied per row.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tag: Tag,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), tag, d_in, d_hidden, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), tag, d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, d: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), tag, 1, d, 1.0),
            beta: store.add_const(format!("{name}.beta"), tag, 1, d, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add_uniform(format!("{name}.w_ih"), tag, d_in, 4 * hidden, a, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), tag, hidden, 4 * hidden, a, rng);
        // forget-gate bias of 1
        let mut bias = crate::tensor::Mat::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.data[j] = 1.0;
        }
        let b = store.add(format!("{name}.b"), tag, bias);
        Self { w_ih, w_hh, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w_ih, w_hh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.b));
        g.lstm(x, w_ih, w_hh, b)
    }
}
