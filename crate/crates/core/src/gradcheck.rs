//! Central finite-difference audit of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::params::{ParamStore, Tag};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub tag: Tag,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub eps: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Fraction of the store's tensors that were checked.
    pub fn coverage(&self, store: &ParamStore) -> f64 {
        let checked = self.tensors.iter().filter(|t| t.checked > 0).count();
        checked as f64 / store.len().max(1) as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Adds `N(0, scale^2)` noise to every parameter so that a check does not
/// sit on a ReLU kink or a max-pooling tie left by zero-initialized biases.
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Perturbs every element of every tensor in `store` by `+-eps` and compares
/// `(f(θ+ε) - f(θ-ε)) / 2ε` with the reverse-mode gradient of `f`.
pub fn check_gradients<F>(store: &ParamStore, eps: f64, f: F) -> GradReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = f(&mut g);
        g.value(l).item()
    };

    let mut work = store.clone();
    let mut tensors = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let mut rep = TensorReport { name: p.name.clone(), tag: p.tag, checked: 0, max_rel_error: 0.0, max_abs_error: 0.0 };
        for k in 0..p.value.len() {
            let orig = p.value.data[k];
            work.value_mut(id).data[k] = orig + eps;
            let lp = eval(&work);
            work.value_mut(id).data[k] = orig - eps;
            let lm = eval(&work);
            work.value_mut(id).data[k] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |m| m.data[k]);
            rep.max_rel_error = rep.max_rel_error.max(relative_error(a, numeric));
            rep.max_abs_error = rep.max_abs_error.max((a - numeric).abs());
            rep.checked += 1;
        }
        tensors.push(rep);
    }
    GradReport { eps, tensors }
}
