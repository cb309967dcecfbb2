//! The full training model: grounding backbone, debiasing branch and match
//! scorer in one parameter store, plus the backbone-only inference model.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cross_modal::CoAttention;
use crate::data::{Dataset, EncodedQuery, PosTag, Vocab};
use crate::debias::{
    debias, debiased_module_loss, feature_contrastive_loss, fuse_bias, identify_bias, BiasIdentifier, BranchDims,
    DebiasedModule, PosBiasModel, VideoBiasModel,
};
use crate::encoders::{EncoderConfig, QueryEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::head::{tsg_loss, BoundaryHead, BoundaryScores, HeadLoss};
use crate::params::{ParamStore, Tag};
use crate::sampler::{sample_loss, MatchScorer};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub positional: bool,
    pub word_dim: usize,
    /// Query length `M` after padding/truncation.
    pub max_query_len: usize,
    /// Hidden width of the gate, scorer and fusion MLPs.
    pub d_hidden: usize,
    /// Divide the co-attention similarity by `sqrt(D)`.
    pub scaled_similarity: bool,
    pub head_loss: HeadLoss,
    /// Label smoothing radius in clips; 0 gives one-hot targets.
    pub label_smoothing: usize,
    /// Longest decoded span in clips; 0 means unbounded.
    pub max_segment_len: usize,
    /// Stop `L_debias` gradients from reaching the backbone through `F`.
    pub detach_debias_input: bool,
    pub contrastive_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 4,
            d_ff: 1024,
            depth: 1,
            positional: true,
            word_dim: 300,
            max_query_len: 20,
            d_hidden: 256,
            scaled_similarity: false,
            head_loss: HeadLoss::Bce,
            label_smoothing: 0,
            max_segment_len: 0,
            detach_debias_input: true,
            contrastive_temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { d_model: self.d_model, heads: self.heads, d_ff: self.d_ff, depth: self.depth, positional: self.positional }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.max_query_len == 0 || self.word_dim == 0 || self.d_hidden == 0 {
            return Err(Error::Config("max_query_len, word_dim and d_hidden must be positive".into()));
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(Error::Config("contrastive_temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn decode_limit(&self) -> Option<usize> {
        (self.max_segment_len > 0).then_some(self.max_segment_len)
    }
}

/// Which terms of the overall objective are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub bias1: bool,
    pub bias2: bool,
    pub bias3: bool,
    pub debias: bool,
    pub contras: bool,
    pub sample: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub const fn all() -> Self {
        Self { bias1: true, bias2: true, bias3: true, debias: true, contras: true, sample: true }
    }

    pub const fn backbone_only() -> Self {
        Self { bias1: false, bias2: false, bias3: false, debias: false, contras: false, sample: false }
    }

    pub fn biased(&self) -> [bool; 3] {
        [self.bias1, self.bias2, self.bias3]
    }

    pub fn uses_branch(&self) -> bool {
        self.bias1 || self.bias2 || self.bias3 || self.debias || self.contras
    }

    /// Compact label such as `bias1+bias2+sample`, or `backbone`.
    pub fn label(&self) -> String {
        let names = [
            (self.bias1, "bias1"),
            (self.bias2, "bias2"),
            (self.bias3, "bias3"),
            (self.debias, "debias"),
            (self.contras, "contras"),
            (self.sample, "sample"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "backbone".into()
        } else if on.len() == names.len() {
            "all".into()
        } else {
            on.join("+")
        }
    }

    /// Parses `all`, `backbone`, or a `+`-separated list of term names.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" | "full" => return Ok(Self::all()),
            "backbone" | "none" => return Ok(Self::backbone_only()),
            _ => {}
        }
        let mut t = Self::backbone_only();
        for part in s.split('+').map(str::trim) {
            match part {
                "bias1" => t.bias1 = true,
                "bias2" => t.bias2 = true,
                "bias3" => t.bias3 = true,
                "debias" => t.debias = true,
                "contras" => t.contras = true,
                "sample" => t.sample = true,
                other => return Err(Error::Config(format!("unknown loss term {other:?} in toggle set {s:?}"))),
            }
        }
        Ok(t)
    }
}

/// One value per objective term; disabled terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts<T> {
    pub tsg: T,
    pub bias: [Option<T>; 3],
    pub debias: Option<T>,
    pub contras: Option<T>,
    pub sample: Option<T>,
}

impl<T: Copy> LossParts<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossParts<U> {
        LossParts {
            tsg: f(self.tsg),
            bias: [self.bias[0].map(&mut f), self.bias[1].map(&mut f), self.bias[2].map(&mut f)],
            debias: self.debias.map(&mut f),
            contras: self.contras.map(&mut f),
            sample: self.sample.map(&mut f),
        }
    }

    /// `(name, value)` for every term, `None` where disabled.
    pub fn named(&self) -> [(&'static str, Option<T>); 7] {
        [
            ("tsg", Some(self.tsg)),
            ("bias1", self.bias[0]),
            ("bias2", self.bias[1]),
            ("bias3", self.bias[2]),
            ("debias", self.debias),
            ("contras", self.contras),
            ("sample", self.sample),
        ]
    }
}

impl LossParts<f64> {
    /// Every term set to `v`.
    pub fn uniform(v: f64) -> Self {
        Self { tsg: v, bias: [Some(v); 3], debias: Some(v), contras: Some(v), sample: Some(v) }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub video: VideoEncoder,
    pub query: QueryEncoder,
    pub co: CoAttention,
    pub head: BoundaryHead,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let enc = cfg.encoder();
        let tag = Tag::Backbone;
        Self {
            video: VideoEncoder::new(store, "backbone.video", tag, d_in, &enc, rng),
            query: QueryEncoder::new(store, "backbone.query", tag, vocab_size, cfg.word_dim, &enc, rng),
            co: CoAttention::new(store, "backbone.co", tag, cfg.d_model, cfg.scaled_similarity, rng),
            head: BoundaryHead::new(store, "backbone.head", tag, cfg.d_model, rng),
        }
    }

    /// `F` for one (video, query) pair.
    pub fn features(&self, g: &mut Graph, clips: Var, query: &EncodedQuery) -> Result<Var> {
        let v = self.video.encode(g, clips)?;
        let q = self.query.encode(g, query)?;
        Ok(self.co.forward(g, v, q, &query.mask)?.f)
    }

    pub fn predict(&self, store: &ParamStore, clips: &Mat, query: &EncodedQuery) -> Result<BoundaryScores> {
        let mut g = Graph::new(store);
        let c = g.constant(clips.clone());
        let f = self.features(&mut g, c, query)?;
        Ok(self.head.scores(&mut g, f))
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub bias1: VideoBiasModel,
    pub bias2: PosBiasModel,
    pub bias3: PosBiasModel,
    pub bim: BiasIdentifier,
    pub debiased: DebiasedModule,
}

/// A sample with its queries already encoded.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub video_id: String,
    pub clips: Arc<Mat>,
    pub query: EncodedQuery,
    pub nouns: EncodedQuery,
    pub verbs: EncodedQuery,
    pub gt: (usize, usize),
}

pub fn prepare(ds: &Dataset, vocab: &Vocab, max_query_len: usize) -> Vec<PreparedSample> {
    ds.samples
        .iter()
        .map(|s| PreparedSample {
            id: s.id.clone(),
            video_id: s.video.id.clone(),
            clips: ds.clip_features(&s.video.id).clone(),
            query: vocab.encode_query(&s.query, max_query_len),
            nouns: vocab.encode_pos(&s.query, PosTag::Noun, max_query_len),
            verbs: vocab.encode_pos(&s.query, PosTag::Verb, max_query_len),
            gt: s.clip_segment,
        })
        .collect()
}

/// Contrastive partners for one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct Negatives<'a> {
    pub video: Option<&'a Mat>,
    pub query: Option<&'a EncodedQuery>,
}

/// Intermediate tensors of the debiasing branch for inspection.
#[derive(Clone, Debug)]
pub struct BiasBundle {
    pub f: Mat,
    pub f_bias: [Option<Mat>; 3],
    pub f_hat: [Option<Mat>; 3],
    pub m: Mat,
    pub f_tilde: Mat,
    pub f_debiased: Mat,
}

#[derive(Clone, Debug)]
pub struct DTsg {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub d_in: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub branch: Branch,
    pub scorer: MatchScorer,
}

impl DTsg {
    /// Builds every component from one seeded stream. The backbone is built
    /// first, so its initial values do not depend on the branch shapes.
    pub fn new(config: ModelConfig, vocab: Vocab, d_in: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, vocab.len(), d_in, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let enc = config.encoder();
        let dims = BranchDims {
            d_in,
            vocab_size: vocab.len(),
            word_dim: config.word_dim,
            d_hidden: config.d_hidden,
            encoder: &enc,
            scaled_similarity: config.scaled_similarity,
        };
        let branch = Branch {
            bias1: VideoBiasModel::new(&mut store, &dims, &mut rng),
            bias2: PosBiasModel::new(&mut store, Tag::Bias2, &dims, &mut rng),
            bias3: PosBiasModel::new(&mut store, Tag::Bias3, &dims, &mut rng),
            bim: BiasIdentifier::new(&mut store, config.d_model, config.d_hidden, &mut rng),
            debiased: DebiasedModule::new(&mut store, config.d_model, &mut rng),
        };
        let scorer = MatchScorer::new(&mut store, config.d_model, config.d_hidden, &mut rng);
        Ok(Self { config, vocab, d_in, store, backbone, branch, scorer })
    }

    /// Builds the graph of every enabled loss term for one sample.
    pub fn forward_losses(
        &self,
        g: &mut Graph,
        s: &PreparedSample,
        neg: Negatives,
        toggles: &LossToggles,
    ) -> Result<LossParts<Var>> {
        Ok(self.forward_inner(g, s, neg, toggles)?.0)
    }

    pub fn bias_bundle(&self, s: &PreparedSample) -> Result<BiasBundle> {
        let mut g = Graph::new(&self.store);
        let toggles = LossToggles { sample: false, ..LossToggles::all() };
        let (_, trace) = self.forward_inner(&mut g, s, Negatives::default(), &toggles)?;
        let t = trace.expect("branch enabled");
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(BiasBundle {
            f: g.value(t.f).clone(),
            f_bias: t.f_bias.map(get),
            f_hat: t.f_hat.map(get),
            m: g.value(t.m).clone(),
            f_tilde: g.value(t.f_tilde).clone(),
            f_debiased: g.value(t.f_debiased).clone(),
        })
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        s: &PreparedSample,
        neg: Negatives,
        toggles: &LossToggles,
    ) -> Result<(LossParts<Var>, Option<TraceVars>)> {
        let cfg = &self.config;
        let (kind, smooth) = (cfg.head_loss, cfg.label_smoothing);
        let bb = &self.backbone;
        let clips = g.constant((*s.clips).clone());
        let v = bb.video.encode(g, clips)?;
        let q = bb.query.encode(g, &s.query)?;
        let f = bb.co.forward(g, v, q, &s.query.mask)?.f;
        let (cs, ce) = bb.head.forward(g, f);
        let tsg = tsg_loss(g, cs, ce, s.gt, kind, smooth);

        let br = &self.branch;
        let mut f_bias: [Option<Var>; 3] = [None; 3];
        let mut bias: [Option<Var>; 3] = [None; 3];
        let heads = [&br.bias1.head, &br.bias2.head, &br.bias3.head];
        for i in 0..3 {
            if !toggles.biased()[i] {
                continue;
            }
            let fb = match i {
                0 => br.bias1.features(g, clips)?,
                1 => br.bias2.features(g, clips, &s.nouns)?,
                _ => br.bias3.features(g, clips, &s.verbs)?,
            };
            let (cs, ce) = heads[i].forward(g, fb);
            bias[i] = Some(tsg_loss(g, cs, ce, s.gt, kind, smooth));
            f_bias[i] = Some(fb);
        }

        let mut debias_loss = None;
        let mut contras = None;
        let mut trace = None;
        if toggles.debias || toggles.contras {
            let (t, d) = g.value(f).shape();
            let active = toggles.biased();
            let mut f_hat: [Option<Var>; 3] = [None; 3];
            let (m, f_tilde) = if active.iter().any(|&a| a) {
                let zero = g.constant(Mat::zeros(t, d));
                let mut hats = [zero; 3];
                for i in 0..3 {
                    if let Some(fb) = f_bias[i] {
                        let h = identify_bias(g, fb, &br.bim.gates[i]);
                        hats[i] = h;
                        f_hat[i] = Some(h);
                    }
                }
                fuse_bias(g, hats, &br.bim.fusion, active)
            } else {
                (g.constant(Mat::zeros(t, 3)), g.constant(Mat::zeros(t, d)))
            };
            let f_debiased = debias(g, f, f_tilde);
            if toggles.debias {
                let fd = if cfg.detach_debias_input {
                    let fdet = g.detach(f);
                    debias(g, fdet, f_tilde)
                } else {
                    f_debiased
                };
                debias_loss = Some(debiased_module_loss(g, fd, s.gt, &br.debiased, kind, smooth));
            }
            if toggles.contras {
                contras = Some(feature_contrastive_loss(g, f, f_debiased, f_tilde, cfg.contrastive_temperature));
            }
            trace = Some(TraceVars { f, f_bias, f_hat, m, f_tilde, f_debiased });
        }

        let mut sample = None;
        if toggles.sample && (neg.video.is_some() || neg.query.is_some()) {
            let f_neg_v = match neg.video {
                Some(nv) => {
                    let c = g.constant(nv.clone());
                    let vn = bb.video.encode(g, c)?;
                    Some(bb.co.forward(g, vn, q, &s.query.mask)?.f)
                }
                None => None,
            };
            let f_neg_q = match neg.query {
                Some(nq) => {
                    let qn = bb.query.encode(g, nq)?;
                    Some(bb.co.forward(g, v, qn, &nq.mask)?.f)
                }
                None => None,
            };
            sample = sample_loss(g, f, f_neg_v, f_neg_q, &self.scorer);
        }

        Ok((LossParts { tsg, bias, debias: debias_loss, contras, sample }, trace))
    }

    /// Backbone-only prediction; the branch and scorer are never read.
    pub fn predict(&self, s: &PreparedSample) -> Result<BoundaryScores> {
        self.backbone.predict(&self.store, &s.clips, &s.query)
    }

    pub fn inference(&self) -> Result<InferenceModel> {
        InferenceModel::from_store(self.config.clone(), self.vocab.clone(), self.d_in, &self.store.retain_tag(Tag::Backbone))
    }
}

#[derive(Clone, Copy, Debug)]
struct TraceVars {
    f: Var,
    f_bias: [Option<Var>; 3],
    f_hat: [Option<Var>; 3],
    m: Var,
    f_tilde: Var,
    f_debiased: Var,
}

/// The deployable model: backbone tensors only.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub d_in: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
}

impl InferenceModel {
    /// Binds backbone tensors (looked up by name) to a freshly built
    /// backbone. Every backbone tensor must be present in `tensors`.
    pub fn from_store(config: ModelConfig, vocab: Vocab, d_in: usize, tensors: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, vocab.len(), d_in, &mut ChaCha8Rng::seed_from_u64(0));
        let backbone_only = tensors.retain_tag(Tag::Backbone);
        if backbone_only.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} backbone tensors, model expects {}",
                backbone_only.len(),
                store.len()
            )));
        }
        store.load_from(&backbone_only)?;
        Ok(Self { config, vocab, d_in, store, backbone })
    }

    pub fn predict(&self, s: &PreparedSample) -> Result<BoundaryScores> {
        self.backbone.predict(&self.store, &s.clips, &s.query)
    }

    /// Names of tensors read by one forward pass.
    pub fn touched(&self, s: &PreparedSample) -> Result<Vec<String>> {
        let mut g = Graph::new(&self.store);
        let c = g.constant((*s.clips).clone());
        let f = self.backbone.features(&mut g, c, &s.query)?;
        self.backbone.head.forward(&mut g, f);
        Ok(g.touched().iter().map(|&id| self.store.get(id).name.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::gradcheck::{check_gradients, jitter};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig { d_model: 8, heads: 2, d_ff: 8, word_dim: 6, max_query_len: 4, d_hidden: 6, ..ModelConfig::default() }
    }

    fn tiny_corpus() -> (Dataset, Vocab) {
        let spec = SyntheticSpec {
            num_nouns: 5,
            num_verbs: 4,
            rare_pair_budget: 2,
            num_clips: 6,
            raw_clips: 12,
            feature_dim: 5,
            train_size: 30,
            val_size: 4,
            test_size: 4,
            event_min_len: 2,
            event_max_len: 3,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let v = Vocab::from_dataset(&c.train);
        (c.train, v)
    }

    #[test]
    fn toggle_labels_round_trip() {
        for s in ["all", "backbone", "sample", "bias1+bias2", "bias3+debias+contras"] {
            assert_eq!(LossToggles::parse(s).unwrap().label(), s);
        }
        assert!(LossToggles::parse("bias4").is_err());
    }

    #[test]
    fn parameter_groups_are_disjoint_and_tagged() {
        let (ds, vocab) = tiny_corpus();
        let m = DTsg::new(tiny_config(), vocab, ds.feature_dim(), 0).unwrap();
        let counts = m.store.counts_by_tag();
        for tag in Tag::ALL {
            assert!(counts.get(&tag).copied().unwrap_or(0) > 0, "{tag}");
        }
        for (_, p) in m.store.iter() {
            let prefix = p.name.split('.').next().unwrap();
            let want = match p.tag {
                Tag::Backbone => "backbone",
                Tag::Bias1 => "bias1",
                Tag::Bias2 => "bias2",
                Tag::Bias3 => "bias3",
                Tag::Bim => "bim",
                Tag::DebiasedModule => "debiased",
                Tag::Sampler => "sampler",
            };
            assert_eq!(prefix, want, "{}", p.name);
        }
    }

    #[test]
    fn backbone_init_ignores_branch_shapes() {
        let (ds, vocab) = tiny_corpus();
        let a = DTsg::new(tiny_config(), vocab.clone(), ds.feature_dim(), 5).unwrap();
        let b = DTsg::new(ModelConfig { d_hidden: 3, ..tiny_config() }, vocab, ds.feature_dim(), 5).unwrap();
        assert_eq!(a.store.retain_tag(Tag::Backbone), b.store.retain_tag(Tag::Backbone));
    }

    #[test]
    fn inference_model_matches_full_model_bitwise() {
        let (ds, vocab) = tiny_corpus();
        let m = DTsg::new(tiny_config(), vocab.clone(), ds.feature_dim(), 1).unwrap();
        let inf = m.inference().unwrap();
        assert!(inf.store.count(None) < m.store.count(None));
        for s in prepare(&ds, &vocab, 4).iter().take(10) {
            assert_eq!(m.predict(s).unwrap(), inf.predict(s).unwrap());
            let touched = inf.touched(s).unwrap();
            assert_eq!(touched.len(), inf.store.len());
        }
    }

    #[test]
    fn disabled_terms_are_absent() {
        let (ds, vocab) = tiny_corpus();
        let m = DTsg::new(tiny_config(), vocab.clone(), ds.feature_dim(), 2).unwrap();
        let s = &prepare(&ds, &vocab, 4)[0];
        let mut g = Graph::new(&m.store);
        let parts = m.forward_losses(&mut g, s, Negatives::default(), &LossToggles::backbone_only()).unwrap();
        assert!(parts.bias.iter().all(Option::is_none) && parts.debias.is_none() && parts.sample.is_none());
        assert!(g.touched().iter().all(|&id| m.store.get(id).tag == Tag::Backbone));
        // sample on but no negatives drawn
        let mut g = Graph::new(&m.store);
        let parts = m.forward_losses(&mut g, s, Negatives::default(), &LossToggles::all()).unwrap();
        assert!(parts.sample.is_none() && parts.contras.is_some());
    }

    #[test]
    fn bundle_satisfies_branch_identities() {
        let (ds, vocab) = tiny_corpus();
        let m = DTsg::new(tiny_config(), vocab.clone(), ds.feature_dim(), 3).unwrap();
        let s = &prepare(&ds, &vocab, 4)[3];
        let b = m.bias_bundle(s).unwrap();
        for r in 0..b.m.rows {
            assert!((b.m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for k in 0..b.f.len() {
            assert_eq!(b.f_debiased.data[k], b.f.data[k] - b.f_tilde.data[k]);
        }
        assert!(b.f_hat.iter().all(Option::is_some));
    }

    #[test]
    fn detached_debias_path_keeps_backbone_out_of_l_debias() {
        let (ds, vocab) = tiny_corpus();
        let m = DTsg::new(tiny_config(), vocab.clone(), ds.feature_dim(), 4).unwrap();
        let s = &prepare(&ds, &vocab, 4)[0];
        let only_debias = LossToggles { debias: true, bias1: true, ..LossToggles::backbone_only() };
        let grads_for = |detach: bool| {
            let mut m = m.clone();
            m.config.detach_debias_input = detach;
            let mut g = Graph::new(&m.store);
            let parts = m.forward_losses(&mut g, s, Negatives::default(), &only_debias).unwrap();
            let l = parts.debias.unwrap();
            g.backward(l)
        };
        let wq = m.store.id("backbone.query.embedding").unwrap();
        let detached = grads_for(true);
        assert!(detached.get(wq).map_or(true, |g| g.max_abs() == 0.0));
        let attached = grads_for(false);
        assert!(attached.get(wq).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn full_objective_gradients() {
        let spec = SyntheticSpec {
            num_nouns: 4,
            num_verbs: 3,
            rare_pair_budget: 0,
            rare_test_fraction: 0.0,
            num_clips: 4,
            raw_clips: 8,
            feature_dim: 3,
            train_size: 6,
            val_size: 2,
            test_size: 2,
            distractors: 1,
            event_min_len: 2,
            event_max_len: 3,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let vocab = Vocab::from_dataset(&c.train);
        let cfg = ModelConfig { d_model: 4, heads: 2, d_ff: 4, word_dim: 3, max_query_len: 3, d_hidden: 3, ..ModelConfig::default() };
        let m = DTsg::new(cfg, vocab.clone(), 3, 7).unwrap();
        let prepared = prepare(&c.train, &vocab, 3);
        let (s, other) = (&prepared[0], &prepared[1]);
        let neg = Negatives { video: Some(&other.clips), query: Some(&other.query) };
        let mut m = m;
        m.config.detach_debias_input = false;
        jitter(&mut m.store, 0.1, 1);
        let report = check_gradients(&m.store, 1e-5, |g| {
            let p = m.forward_losses(g, s, neg, &LossToggles::all()).unwrap();
            let mut total = p.tsg;
            for v in p.bias.into_iter().chain([p.debias, p.contras, p.sample]).flatten() {
                total = g.add(total, v);
            }
            total
        });
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
        assert_eq!(report.coverage(&m.store), 1.0);
    }
}
