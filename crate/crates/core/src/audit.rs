//! Finite-difference audit of the whole training objective at tiny sizes.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::autograd::Graph;
use crate::data::{generate_synthetic, SyntheticSpec, Vocab};
use crate::error::Result;
use crate::gradcheck::{check_gradients, jitter, GradReport};
use crate::model::{prepare, DTsg, LossToggles, ModelConfig, Negatives};
use crate::train::{total_loss_var, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct AuditConfig {
    /// Clips `T`.
    pub num_clips: usize,
    /// Model width `D`.
    pub d_model: usize,
    /// Query length `M`.
    pub max_query_len: usize,
    pub d_in: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { num_clips: 6, d_model: 16, max_query_len: 5, d_in: 8, eps: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub report: GradReport,
    pub tensors_total: usize,
    pub coverage: f64,
    pub elapsed: Duration,
}

/// Checks every tensor of the full model on one sample with both negatives,
/// every loss term enabled and `L_debias` not detached, so that the analytic
/// gradient is the true gradient of the objective.
pub fn gradient_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    let spec = SyntheticSpec {
        num_nouns: 5,
        num_verbs: 4,
        rare_pair_budget: 0,
        rare_test_fraction: 0.0,
        num_clips: cfg.num_clips,
        raw_clips: 2 * cfg.num_clips,
        feature_dim: cfg.d_in,
        train_size: 6,
        val_size: 2,
        test_size: 2,
        distractors: 1,
        event_min_len: 2,
        event_max_len: 3,
        seed: cfg.seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec)?;
    let vocab = Vocab::from_dataset(&corpus.train);
    let mcfg = ModelConfig {
        d_model: cfg.d_model,
        heads: 2,
        d_ff: cfg.d_model,
        word_dim: 4,
        max_query_len: cfg.max_query_len,
        d_hidden: 4,
        detach_debias_input: false,
        ..ModelConfig::default()
    };
    let mut model = DTsg::new(mcfg, vocab.clone(), cfg.d_in, cfg.seed)?;
    jitter(&mut model.store, 0.1, cfg.seed);
    let samples = prepare(&corpus.train, &vocab, cfg.max_query_len);
    let (s, other) = (&samples[0], &samples[1]);
    let neg = Negatives { video: Some(&other.clips), query: Some(&other.query) };
    let tcfg = TrainConfig { lambda1: 1.0, lambda2: 1.0, ..TrainConfig::default() };

    let t0 = Instant::now();
    let report = check_gradients(&model.store, cfg.eps, |g: &mut Graph| {
        let parts = model.forward_losses(g, s, neg, &LossToggles::all()).expect("audit forward");
        total_loss_var(g, &parts, &tcfg)
    });
    let coverage = report.coverage(&model.store);
    Ok(AuditReport { config: cfg.clone(), report, tensors_total: model.store.len(), coverage, elapsed: t0.elapsed() })
}
