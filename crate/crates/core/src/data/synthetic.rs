//! Synthetic grounding corpora with a planted salience shortcut and a
//! controlled long tail of rare (noun, verb) pairs.
//!
//! Every video is a sequence of events on a noisy background. An event of
//! pair `(n, v)` renders as `noun_proto[n] + verb_proto[v]` plus Gaussian
//! noise. One event per video is *salient*: its features are multiplied by
//! `salience_boost`. In the training split the salient event is the target
//! with probability `train_correlation`; in the test split with probability
//! `test_correlation`. A model that learns "pick the loudest event" does well
//! in training and badly at test time.
//!
//! The noun and verb vocabularies are split into head words (sampled with a
//! Zipf law) and tail words. Each tail word belongs to exactly one rare pair,
//! and each rare pair appears between `rare_min_count` and `rare_max_count`
//! (< 10) times in the training split.

use std::sync::Arc;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{map_timestamps, Dataset, GroundingSample, PosTag, QueryAnnotation, RawVideo};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Generator parameters. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_nouns: usize,
    pub num_verbs: usize,
    pub zipf_exponent: f64,
    /// Number of designated rare pairs (one tail word each).
    pub rare_pair_budget: usize,
    pub rare_min_count: usize,
    pub rare_max_count: usize,
    /// Feature-norm multiplier of the salient event.
    pub salience_boost: f64,
    pub train_correlation: f64,
    pub test_correlation: f64,
    /// Clip count after downsampling.
    pub num_clips: usize,
    /// Raw clips per video; one raw clip is one second.
    pub raw_clips: usize,
    pub feature_dim: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Fraction of val/test samples drawn from the rare pairs.
    pub rare_test_fraction: f64,
    pub noise_std: f64,
    /// Norm of each noun/verb prototype.
    pub prototype_norm: f64,
    /// Non-target events per video.
    pub distractors: usize,
    /// Distractors share one word with the target; otherwise none.
    pub distractor_overlap: bool,
    pub event_min_len: usize,
    pub event_max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_nouns: 14,
            num_verbs: 12,
            zipf_exponent: 1.0,
            rare_pair_budget: 8,
            rare_min_count: 2,
            rare_max_count: 8,
            salience_boost: 2.0,
            train_correlation: 0.9,
            test_correlation: 0.1,
            num_clips: 32,
            raw_clips: 64,
            feature_dim: 64,
            train_size: 2000,
            val_size: 200,
            test_size: 400,
            rare_test_fraction: 0.3,
            noise_std: 0.15,
            prototype_norm: 1.5,
            distractors: 2,
            distractor_overlap: true,
            event_min_len: 6,
            event_max_len: 16,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    fn tail_nouns(&self) -> usize {
        self.rare_pair_budget.div_ceil(2)
    }

    fn tail_verbs(&self) -> usize {
        self.rare_pair_budget / 2
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_nouns == 0 || self.num_verbs == 0 {
            return cfg("need at least one noun and one verb".into());
        }
        for (name, v) in [("train_correlation", self.train_correlation), ("test_correlation", self.test_correlation)] {
            if !(0.0..=1.0).contains(&v) {
                return cfg(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.train_correlation == self.test_correlation {
            return cfg("train and test correlation must differ".into());
        }
        if !(0.0..=1.0).contains(&self.rare_test_fraction) {
            return cfg("rare_test_fraction must lie in [0, 1]".into());
        }
        if self.salience_boost < 0.0 || self.noise_std < 0.0 {
            return cfg("salience_boost and noise_std must be non-negative".into());
        }
        if self.distractors == 0 {
            return cfg("need at least one distractor event".into());
        }
        if self.event_min_len == 0 || self.event_min_len > self.event_max_len {
            return cfg("need 1 <= event_min_len <= event_max_len".into());
        }
        if (self.distractors + 1) * self.event_max_len > self.raw_clips {
            return cfg("events do not fit in raw_clips".into());
        }
        if self.num_clips == 0 || self.feature_dim == 0 {
            return cfg("num_clips and feature_dim must be positive".into());
        }
        if self.rare_min_count == 0 || self.rare_min_count > self.rare_max_count || self.rare_max_count >= 10 {
            return cfg("need 1 <= rare_min_count <= rare_max_count < 10".into());
        }
        if self.tail_nouns() >= self.num_nouns || self.tail_verbs() >= self.num_verbs {
            return Err(Error::Infeasible(format!(
                "{} rare pairs need {} tail nouns and {} tail verbs but only {} nouns / {} verbs exist (at least one head word each is required)",
                self.rare_pair_budget,
                self.tail_nouns(),
                self.tail_verbs(),
                self.num_nouns,
                self.num_verbs
            )));
        }
        if !self.distractor_overlap && (self.num_nouns - self.tail_nouns() < 2 || self.num_verbs - self.tail_verbs() < 2) {
            return Err(Error::Infeasible("disjoint distractors need at least two head nouns and two head verbs".into()));
        }
        if self.rare_pair_budget * self.rare_max_count > self.train_size {
            return Err(Error::Infeasible(format!(
                "{} rare pairs x up to {} occurrences exceed train_size {}",
                self.rare_pair_budget, self.rare_max_count, self.train_size
            )));
        }
        if self.rare_pair_budget == 0 && self.rare_test_fraction > 0.0 {
            return cfg("rare_test_fraction > 0 needs a rare pair budget".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub rare_pairs: Vec<(String, String)>,
}

type Pair = (usize, usize);

struct World<'a> {
    spec: &'a SyntheticSpec,
    noun_protos: Vec<Vec<f64>>,
    verb_protos: Vec<Vec<f64>>,
    noun_words: Vec<String>,
    verb_words: Vec<String>,
    head_nouns: usize,
    head_verbs: usize,
    noun_zipf: WeightedIndex<f64>,
    verb_zipf: WeightedIndex<f64>,
    rare_pairs: Vec<Pair>,
}

fn prototype(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * norm / n).collect()
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|k| (k as f64).powf(-s))).expect("non-empty zipf support")
}

impl<'a> World<'a> {
    fn new(spec: &'a SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let noun_protos = (0..spec.num_nouns).map(|_| prototype(rng, spec.feature_dim, spec.prototype_norm)).collect();
        let verb_protos = (0..spec.num_verbs).map(|_| prototype(rng, spec.feature_dim, spec.prototype_norm)).collect();
        let head_nouns = spec.num_nouns - spec.tail_nouns();
        let head_verbs = spec.num_verbs - spec.tail_verbs();
        let mut rare_pairs = Vec::with_capacity(spec.rare_pair_budget);
        for k in 0..spec.tail_nouns() {
            rare_pairs.push((head_nouns + k, rng.gen_range(0..head_verbs)));
        }
        for k in 0..spec.tail_verbs() {
            rare_pairs.push((rng.gen_range(0..head_nouns), head_verbs + k));
        }
        Self {
            spec,
            noun_protos,
            verb_protos,
            noun_words: (0..spec.num_nouns).map(|i| format!("noun{i:02}")).collect(),
            verb_words: (0..spec.num_verbs).map(|i| format!("verb{i:02}")).collect(),
            head_nouns,
            head_verbs,
            noun_zipf: zipf(head_nouns, spec.zipf_exponent),
            verb_zipf: zipf(head_verbs, spec.zipf_exponent),
            rare_pairs,
        }
    }

    fn common_pair(&self, rng: &mut ChaCha8Rng) -> Pair {
        (self.noun_zipf.sample(rng), self.verb_zipf.sample(rng))
    }

    /// A pair sharing exactly one word with `target` (or none, without
    /// overlap), drawn from head words.
    fn distractor_pair(&self, target: Pair, rng: &mut ChaCha8Rng) -> Pair {
        if !self.spec.distractor_overlap {
            loop {
                let p = self.common_pair(rng);
                if p.0 != target.0 && p.1 != target.1 {
                    return p;
                }
            }
        }
        loop {
            let p = if rng.gen_bool(0.5) {
                (target.0, self.verb_zipf.sample(rng))
            } else {
                (self.noun_zipf.sample(rng), target.1)
            };
            if p != target {
                return p;
            }
            if self.head_nouns == 1 && self.head_verbs == 1 {
                // nothing shares exactly one word; fall back to any head pair
                return (0, 0);
            }
        }
    }

    fn event_vec(&self, p: Pair) -> Vec<f64> {
        self.noun_protos[p.0].iter().zip(&self.verb_protos[p.1]).map(|(a, b)| a + b).collect()
    }

    fn render(&self, id: String, target: Pair, salient_on_target: bool, rng: &mut ChaCha8Rng) -> Result<GroundingSample> {
        let spec = self.spec;
        let n_events = spec.distractors + 1;
        let pairs: Vec<Pair> =
            std::iter::once(target).chain((0..spec.distractors).map(|_| self.distractor_pair(target, rng))).collect();
        let lens: Vec<usize> = (0..n_events).map(|_| rng.gen_range(spec.event_min_len..=spec.event_max_len)).collect();
        let free = spec.raw_clips - lens.iter().sum::<usize>();
        // n_events + 1 gaps summing to `free`
        let mut cuts: Vec<usize> = (0..n_events).map(|_| rng.gen_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut order: Vec<usize> = (0..n_events).collect();
        order.shuffle(rng);

        let mut starts = vec![0; n_events];
        let mut pos = 0;
        let mut prev_cut = 0;
        for (slot, &ev) in order.iter().enumerate() {
            pos += cuts[slot] - prev_cut;
            prev_cut = cuts[slot];
            starts[ev] = pos;
            pos += lens[ev];
        }

        let salient = if salient_on_target { 0 } else { 1 };
        let mut feats = Mat::zeros(spec.raw_clips, spec.feature_dim);
        for v in feats.data.iter_mut() {
            *v = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        for ev in 0..n_events {
            let base = self.event_vec(pairs[ev]);
            let gain = if ev == salient { spec.salience_boost } else { 1.0 };
            for t in starts[ev]..starts[ev] + lens[ev] {
                for (x, b) in feats.row_mut(t).iter_mut().zip(&base) {
                    *x = (*x + b) * gain;
                }
            }
        }
        // stored as f32 on disk; keep memory and disk identical
        for v in feats.data.iter_mut() {
            *v = f64::from(*v as f32);
        }

        let duration = spec.raw_clips as f64;
        let seg = (starts[0] as f64, (starts[0] + lens[0]) as f64);
        let video_id = id.clone();
        Ok(GroundingSample {
            id: format!("{id}#0"),
            video: Arc::new(RawVideo { id: video_id, duration, features: feats }),
            query: QueryAnnotation {
                tokens: vec![self.noun_words[target.0].clone(), self.verb_words[target.1].clone()],
                pos_tags: vec![PosTag::Noun, PosTag::Verb],
                segment_seconds: seg,
            },
            clip_segment: map_timestamps(seg, duration, spec.num_clips)?,
        })
    }

    fn split(&self, prefix: &str, targets: Vec<Pair>, correlation: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let samples = targets
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let on_target = rng.gen_bool(correlation);
                self.render(format!("{prefix}{i:05}"), p, on_target, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.spec.num_clips)
    }

    fn eval_targets(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Pair> {
        (0..n)
            .map(|_| {
                if !self.rare_pairs.is_empty() && rng.gen_bool(self.spec.rare_test_fraction) {
                    self.rare_pairs[rng.gen_range(0..self.rare_pairs.len())]
                } else {
                    self.common_pair(rng)
                }
            })
            .collect()
    }
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);

    let mut train_targets = Vec::with_capacity(spec.train_size);
    for &p in &world.rare_pairs {
        let k = rng.gen_range(spec.rare_min_count..=spec.rare_max_count);
        train_targets.extend(std::iter::repeat(p).take(k));
    }
    while train_targets.len() < spec.train_size {
        train_targets.push(world.common_pair(&mut rng));
    }
    train_targets.shuffle(&mut rng);

    let val_targets = world.eval_targets(spec.val_size, &mut rng);
    let test_targets = world.eval_targets(spec.test_size, &mut rng);

    let train = world.split("train_", train_targets, spec.train_correlation, &mut rng)?;
    let val = world.split("val_", val_targets, spec.train_correlation, &mut rng)?;
    let test = world.split("test_", test_targets, spec.test_correlation, &mut rng)?;

    Ok(SyntheticCorpus {
        train,
        val,
        test,
        rare_pairs: world
            .rare_pairs
            .iter()
            .map(|&(n, v)| (world.noun_words[n].clone(), world.verb_words[v].clone()))
            .collect(),
        nouns: world.noun_words,
        verbs: world.verb_words,
    })
}
