//! Overall objective, Adam with linear learning-rate decay, and the seeded
//! training loop with early stopping on validation `R@1, IoU=0.5`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, EncodedQuery};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_all};
use crate::model::{prepare, DTsg, LossParts, LossToggles, Negatives, PreparedSample};
use crate::params::{Grads, ParamStore};
use crate::sampler::{sample_negatives, NegativeTable};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub toggles: LossToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            epochs: 100,
            batch_size: 8,
            lr: 4e-4,
            clip_norm: 1.0,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            toggles: LossToggles::all(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("lambda1 and lambda2 must be >= 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        Ok(())
    }

    /// `lr0 * (1 - epoch / epochs)`, floored at 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (self.lr * (1.0 - epoch as f64 / self.epochs as f64)).max(0.0)
    }
}

/// `L_TSG + sum L_bias + L_debias + λ1 L_contras + λ2 L_sample`. Fails on the
/// first non-finite term, naming it.
pub fn total_loss(parts: &LossParts<f64>, cfg: &TrainConfig) -> Result<f64> {
    for (name, v) in parts.named() {
        if let Some(v) = v.filter(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { part: name.into(), value: v });
        }
    }
    let plain: f64 = parts.tsg + parts.bias.iter().flatten().sum::<f64>() + parts.debias.unwrap_or(0.0);
    Ok(plain + cfg.lambda1 * parts.contras.unwrap_or(0.0) + cfg.lambda2 * parts.sample.unwrap_or(0.0))
}

pub fn total_loss_var(g: &mut Graph, parts: &LossParts<Var>, cfg: &TrainConfig) -> Var {
    let mut total = parts.tsg;
    for v in parts.bias.iter().flatten().chain(parts.debias.iter()) {
        total = g.add(total, *v);
    }
    for (v, w) in [(parts.contras, cfg.lambda1), (parts.sample, cfg.lambda2)] {
        if let Some(v) = v {
            let s = g.scale(v, w);
            total = g.add(total, s);
        }
    }
    total
}

/// Adam state aligned with a parameter store. Tensors that never received a
/// gradient keep no moments and are never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Option<Mat>>,
    pub v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let p = store.value_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of each enabled term over the epoch, keyed by term name.
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    pub val_r1_iou03: f64,
    pub val_r1_iou05: f64,
    pub val_r1_iou07: f64,
    pub steps: usize,
}

pub const LOG_TERMS: [&str; 7] = ["tsg", "bias1", "bias2", "bias3", "debias", "contras", "sample"];

/// CSV with one row per epoch.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,total");
    for t in LOG_TERMS {
        s.push_str(&format!(",{t}"));
    }
    s.push_str(",val_r1_iou0.3,val_r1_iou0.5,val_r1_iou0.7\n");
    for e in log {
        s.push_str(&format!("{},{:.6e},{:.6}", e.epoch, e.lr, e.total));
        for t in LOG_TERMS {
            match e.losses.get(t) {
                Some(v) => s.push_str(&format!(",{v:.6}")),
                None => s.push(','),
            }
        }
        s.push_str(&format!(",{:.4},{:.4},{:.4}\n", e.val_r1_iou03, e.val_r1_iou05, e.val_r1_iou07));
    }
    s
}

/// Everything needed to resume or export a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DTsg,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
}

/// Resolves sampled negative ids into tensors of the training set.
struct NegativePool<'a> {
    table: &'a NegativeTable,
    clips: BTreeMap<&'a str, &'a Mat>,
    queries: BTreeMap<&'a str, &'a EncodedQuery>,
}

impl<'a> NegativePool<'a> {
    fn new(table: &'a NegativeTable, samples: &'a [PreparedSample]) -> Self {
        let clips = samples.iter().map(|s| (s.video_id.as_str(), &*s.clips)).collect();
        let queries = samples.iter().map(|s| (s.id.as_str(), &s.query)).collect();
        Self { table, clips, queries }
    }

    fn draw(&self, id: &str, rng: &mut ChaCha8Rng) -> Negatives<'a> {
        let (v, q) = sample_negatives(self.table, id, rng);
        Negatives { video: v.and_then(|v| self.clips.get(v).copied()), query: q.and_then(|q| self.queries.get(q).copied()) }
    }
}

/// Loss values and the averaged, unclipped gradient of one batch.
pub struct BatchResult {
    pub parts: Vec<LossParts<f64>>,
    pub total: f64,
    pub grads: Grads,
}

/// Forward and backward over a batch; gradients are averaged over samples.
pub fn batch_gradients(
    model: &DTsg,
    batch: &[(&PreparedSample, Negatives)],
    cfg: &TrainConfig,
) -> Result<BatchResult> {
    let mut grads = Grads::zeros_like(&model.store);
    let mut parts = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (s, neg) in batch {
        let mut g = Graph::new(&model.store);
        let p = model.forward_losses(&mut g, s, *neg, &cfg.toggles)?;
        let values = p.map(|v| g.value(v).item());
        total += total_loss(&values, cfg)? * scale;
        let t = total_loss_var(&mut g, &p, cfg);
        let t = g.scale(t, scale);
        grads.merge(&g.backward(t));
        parts.push(values);
    }
    Ok(BatchResult { parts, total, grads })
}

/// One optimizer step; returns the gradient norm before clipping.
pub fn apply_step(model: &mut DTsg, opt: &mut Adam, mut grads: Grads, lr: f64, clip_norm: f64) -> Result<f64> {
    if grads.has_non_finite() {
        return Err(Error::NonFiniteLoss { part: "gradient".into(), value: f64::NAN });
    }
    let norm = grads.clip_global_norm(clip_norm);
    opt.apply(&mut model.store, &grads, lr);
    Ok(norm)
}

/// Validation `R@1` at IoU 0.3/0.5/0.7 from backbone predictions.
pub fn val_r1(model: &DTsg, val: &Dataset, samples: &[PreparedSample]) -> Result<[f64; 3]> {
    if samples.is_empty() {
        return Ok([0.0; 3]);
    }
    let preds = predict_all(model, samples, 1, model.config.decode_limit())?;
    let r = evaluate(&preds, &[("all", val)], &[(1, 0.3), (1, 0.5), (1, 0.7)], false)?;
    Ok([r.cells[0].recall, r.cells[1].recall, r.cells[2].recall])
}

pub fn train(model: DTsg, train_set: &Dataset, val_set: &Dataset, negatives: Option<&NegativeTable>, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(model, train_set, val_set, negatives, cfg, |_| Ok(()))
}

/// Trains and returns the state at the best validation epoch. `on_epoch` sees
/// the live state after every epoch, so callers can persist it before a
/// later epoch diverges.
pub fn train_with(
    model: DTsg,
    train_set: &Dataset,
    val_set: &Dataset,
    negatives: Option<&NegativeTable>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.toggles.sample && negatives.is_none() {
        return Err(Error::Config("L_sample is enabled but no negative table was given".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let max_len = model.config.max_query_len;
    let train_samples = prepare(train_set, &model.vocab, max_len);
    let val_samples = prepare(val_set, &model.vocab, max_len);
    let empty = NegativeTable::default();
    let pool = NegativePool::new(negatives.unwrap_or(&empty), &train_samples);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let optimizer = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut state = TrainState { model, optimizer, epoch: 0, steps: 0, best_epoch: 0, best_val: f64::NEG_INFINITY, log: Vec::new() };
    let mut best: Option<(ParamStore, Adam)> = None;
    let mut bad_epochs = 0;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_samples[i];
                    let neg = if cfg.toggles.sample { pool.draw(&s.id, &mut neg_rng) } else { Negatives::default() };
                    (s, neg)
                })
                .collect();
            let res = batch_gradients(&state.model, &batch, cfg)?;
            for p in &res.parts {
                for (name, v) in p.named() {
                    if let Some(v) = v {
                        *sums.entry(name.to_string()).or_default() += v;
                    }
                }
            }
            total_sum += res.total * chunk.len() as f64;
            apply_step(&mut state.model, &mut state.optimizer, res.grads, lr, cfg.clip_norm)?;
            steps += 1;
            state.steps += 1;
        }
        let n = train_samples.len() as f64;
        let val = val_r1(&state.model, val_set, &val_samples)?;
        let losses = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
        state.log.push(EpochLog {
            epoch,
            lr,
            losses,
            total: total_sum / n,
            val_r1_iou03: val[0],
            val_r1_iou05: val[1],
            val_r1_iou07: val[2],
            steps,
        });
        state.epoch = epoch + 1;
        log::info!("epoch {epoch} lr {lr:.3e} loss {:.4} val R@1,IoU=0.5 {:.2}", total_sum / n, val[1]);

        if val[1] > state.best_val || best.is_none() {
            state.best_val = val[1];
            state.best_epoch = epoch;
            best = Some((state.model.store.clone(), state.optimizer.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        on_epoch(&state)?;
        if cfg.patience > 0 && bad_epochs >= cfg.patience && !val_samples.is_empty() {
            log::info!("early stop after epoch {epoch}; best epoch {}", state.best_epoch);
            break;
        }
    }
    if let Some((store, opt)) = best.filter(|_| !val_samples.is_empty()) {
        state.model.store = store;
        state.optimizer = opt;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, Vocab};
    use crate::model::ModelConfig;
    use crate::params::Tag;
    use crate::sampler::mine_negatives;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_nouns: 5,
            num_verbs: 4,
            rare_pair_budget: 0,
            rare_test_fraction: 0.0,
            num_clips: 8,
            raw_clips: 16,
            feature_dim: 6,
            train_size: 24,
            val_size: 8,
            test_size: 4,
            event_min_len: 2,
            event_max_len: 4,
            ..SyntheticSpec::default()
        }
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig { d_model: 8, heads: 2, d_ff: 8, word_dim: 6, max_query_len: 3, d_hidden: 6, ..ModelConfig::default() }
    }

    #[test]
    fn objective_arithmetic() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(&LossParts::uniform(1.0), &cfg).unwrap(), 7.0);
        let zero = TrainConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(&LossParts::uniform(1.0), &zero).unwrap(), 5.0);
        let p = LossParts { tsg: 0.5, bias: [Some(0.5); 3], debias: Some(0.5), contras: Some(0.4), sample: Some(0.3) };
        let c = TrainConfig { lambda1: 2.0, lambda2: 1.0, ..cfg.clone() };
        assert!((total_loss(&p, &c).unwrap() - 3.6).abs() < 1e-12);
        let bad = LossParts { contras: Some(f64::NAN), ..p };
        match total_loss(&bad, &c) {
            Err(Error::NonFiniteLoss { part, .. }) => assert_eq!(part, "contras"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn graph_objective_matches_value_objective() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mk = |g: &mut Graph, v: f64| g.constant(Mat::scalar(v));
        let p = LossParts { tsg: mk(&mut g, 0.2), bias: [Some(mk(&mut g, 0.3)), None, Some(mk(&mut g, 0.1))], debias: None, contras: Some(mk(&mut g, 0.7)), sample: Some(mk(&mut g, 0.9)) };
        let cfg = TrainConfig { lambda1: 0.5, lambda2: 2.0, ..TrainConfig::default() };
        let t = total_loss_var(&mut g, &p, &cfg);
        let vals = p.map(|v| g.value(v).item());
        assert!((g.value(t).item() - total_loss(&vals, &cfg).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_is_linear() {
        let cfg = TrainConfig { lr: 4e-4, epochs: 30, ..TrainConfig::default() };
        for k in 0..=30 {
            assert!((cfg.lr_at(k) - 4e-4 * (1.0 - k as f64 / 30.0)).abs() < 1e-12);
        }
        assert_eq!(cfg.lr_at(40), 0.0);
    }

    #[test]
    fn clipping_rescales_to_unit_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tag::Backbone, Mat::zeros(1, 2));
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(id, &Mat::from_vec(1, 2, vec![6.0, 8.0]));
        let before = grads.clip_global_norm(1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
        let g = grads.get(id).unwrap();
        assert!((g.data[0] - 0.6).abs() < 1e-12 && (g.data[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn small_step_descends() {
        let c = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::from_dataset(&c.train);
        let samples = prepare(&c.train, &vocab, 3);
        let table = mine_negatives(&c.train);
        let pool = NegativePool::new(&table, &samples);
        let cfg = TrainConfig { lr: 1e-5, ..TrainConfig::default() };
        let mut descended = 0;
        for trial in 0..100u64 {
            let mut model = DTsg::new(model_cfg(), vocab.clone(), 6, trial).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let batch: Vec<_> = (0..4)
                .map(|_| {
                    let s = &samples[rng.gen_range(0..samples.len())];
                    (s, pool.draw(&s.id, &mut rng))
                })
                .collect();
            let before = batch_gradients(&model, &batch, &cfg).unwrap();
            let mut opt = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
            apply_step(&mut model, &mut opt, before.grads, cfg.lr, cfg.clip_norm).unwrap();
            let after = batch_gradients(&model, &batch, &cfg).unwrap();
            descended += (after.total < before.total) as usize;
        }
        assert!(descended >= 95, "{descended}/100");
    }

    #[test]
    fn same_seed_same_parameters_and_step_count() {
        let c = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::from_dataset(&c.train);
        let table = mine_negatives(&c.train);
        let cfg = TrainConfig { epochs: 2, batch_size: 5, patience: 0, ..TrainConfig::default() };
        let run = || {
            let m = DTsg::new(model_cfg(), vocab.clone(), 6, 3).unwrap();
            train(m, &c.train, &c.val, Some(&table), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.log, b.log);
        assert_eq!(a.steps, 2 * 24u64.div_ceil(5));
    }

    #[test]
    fn backbone_only_training_leaves_branch_at_init() {
        let c = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::from_dataset(&c.train);
        let init = DTsg::new(model_cfg(), vocab.clone(), 6, 4).unwrap();
        let cfg = TrainConfig { epochs: 1, toggles: LossToggles::backbone_only(), ..TrainConfig::default() };
        let out = train(init.clone(), &c.train, &c.val, None, &cfg).unwrap();
        for (id, p) in out.model.store.iter() {
            let changed = p.value != *init.store.value(id);
            assert_eq!(changed, p.tag == Tag::Backbone, "{}", p.name);
        }
    }

    #[test]
    fn sample_loss_requires_table() {
        let c = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::from_dataset(&c.train);
        let m = DTsg::new(model_cfg(), vocab, 6, 0).unwrap();
        assert!(matches!(train(m, &c.train, &c.val, None, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn log_has_one_row_per_epoch() {
        let c = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::from_dataset(&c.train);
        let table = mine_negatives(&c.train);
        let m = DTsg::new(model_cfg(), vocab, 6, 0).unwrap();
        let cfg = TrainConfig { epochs: 3, patience: 0, ..TrainConfig::default() };
        let out = train(m, &c.train, &c.val, Some(&table), &cfg).unwrap();
        let csv = log_csv(&out.log);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,lr,total,tsg,bias1"));
        assert!(out.log.iter().all(|e| e.losses.contains_key("contras")));
    }
}
