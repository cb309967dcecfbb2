//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated
//! TypeScript types. The plain Rust functions underneath are what the native
//! tests exercise.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dtsg_core::autograd::Graph;
use dtsg_core::data::{generate_synthetic, SyntheticCorpus, SyntheticSpec, Vocab};
use dtsg_core::head::{clip_iou, decode_top_n, BoundaryScores, Segment};
use dtsg_core::model::{prepare, DTsg, LossToggles, ModelConfig, PreparedSample};
use dtsg_core::train::{train, TrainConfig};

fn json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("demo output serializes")
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
pub struct DecodedSegment {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    /// Clip IoU against the reference segment, when one was given.
    pub iou: Option<f64>,
}

/// Top-n segments for hand-edited boundary logits.
pub fn decode_segments(start: &[f64], end: &[f64], top_n: usize, max_len: usize, reference: Option<(usize, usize)>) -> Result<Vec<DecodedSegment>, String> {
    if start.len() != end.len() || start.is_empty() {
        return Err(format!("start and end need the same non-zero length, got {} and {}", start.len(), end.len()));
    }
    let scores = BoundaryScores { start: start.to_vec(), end: end.to_vec() };
    let limit = (max_len > 0).then_some(max_len);
    Ok(decode_top_n(&scores, top_n, limit)
        .into_iter()
        .map(|Segment { start, end, score }| DecodedSegment { start, end, score, iou: reference.map(|r| clip_iou((start, end), r)) })
        .collect())
}

/// JSON list of `{start, end, score, iou}`. A negative `ref_start` means no
/// reference segment.
#[wasm_bindgen]
pub fn decode(start: &[f64], end: &[f64], top_n: usize, max_len: usize, ref_start: i32, ref_end: i32) -> Result<String, JsError> {
    let reference = (ref_start >= 0 && ref_end >= ref_start).then_some((ref_start as usize, ref_end as usize));
    decode_segments(start, end, top_n, max_len, reference).map(|v| json(&v)).map_err(js_err)
}

fn demo_spec(seed: u64, salience_boost: f64, train_correlation: f64) -> SyntheticSpec {
    SyntheticSpec {
        num_nouns: 6,
        num_verbs: 5,
        rare_pair_budget: 2,
        rare_min_count: 2,
        rare_max_count: 5,
        salience_boost,
        train_correlation,
        test_correlation: if train_correlation == 0.1 { 0.2 } else { 0.1 },
        num_clips: 16,
        raw_clips: 32,
        feature_dim: 16,
        train_size: 160,
        val_size: 24,
        test_size: 24,
        rare_test_fraction: 0.25,
        distractors: 2,
        event_min_len: 3,
        event_max_len: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

#[derive(Serialize)]
pub struct VideoView {
    pub split: String,
    pub id: String,
    pub query: Vec<String>,
    /// Ground truth in clip indices, inclusive.
    pub target: (usize, usize),
    /// L2 norm of every downsampled clip feature.
    pub clip_norms: Vec<f64>,
    /// Whether the highest-norm clip lies inside the target.
    pub loudest_in_target: bool,
}

fn video_views(corpus: &SyntheticCorpus, per_split: usize) -> Vec<VideoView> {
    let mut out = Vec::new();
    for (split, ds) in [("train", &corpus.train), ("test", &corpus.test)] {
        for s in ds.samples.iter().take(per_split) {
            let clips = ds.clip_features(&s.video.id);
            let norms: Vec<f64> = (0..clips.rows).map(|t| clips.row(t).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let loudest = norms.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
            out.push(VideoView {
                split: split.into(),
                id: s.id.clone(),
                query: s.query.tokens.clone(),
                target: s.clip_segment,
                clip_norms: norms,
                loudest_in_target: (s.clip_segment.0..=s.clip_segment.1).contains(&loudest),
            });
        }
    }
    out
}

#[derive(Serialize)]
pub struct ShortcutSummary {
    pub videos: Vec<VideoView>,
    /// Fraction of samples whose loudest clip is inside the target.
    pub train_shortcut_rate: f64,
    pub test_shortcut_rate: f64,
}

pub fn shortcut_summary(seed: u64, salience_boost: f64, train_correlation: f64, per_split: usize) -> Result<ShortcutSummary, String> {
    let corpus = generate_synthetic(&demo_spec(seed, salience_boost, train_correlation)).map_err(|e| e.to_string())?;
    let all = video_views(&corpus, usize::MAX);
    let rate = |split: &str| {
        let v: Vec<&VideoView> = all.iter().filter(|v| v.split == split).collect();
        v.iter().filter(|v| v.loudest_in_target).count() as f64 / v.len().max(1) as f64
    };
    Ok(ShortcutSummary { train_shortcut_rate: rate("train"), test_shortcut_rate: rate("test"), videos: video_views(&corpus, per_split) })
}

/// Clip norms of a few train and test videos plus how often "pick the
/// loudest clip" lands in the target on each split.
#[wasm_bindgen]
pub fn synthetic_videos(seed: u64, salience_boost: f64, train_correlation: f64, per_split: usize) -> Result<String, JsError> {
    shortcut_summary(seed, salience_boost, train_correlation, per_split).map(|v| json(&v)).map_err(js_err)
}

#[derive(Serialize)]
pub struct Inspection {
    pub id: String,
    pub query: Vec<String>,
    pub target: (usize, usize),
    /// Row-softmax attention of every clip over the query words, `T x M`.
    pub attention: Vec<Vec<f64>>,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub top: Vec<DecodedSegment>,
}

/// A tiny backbone trained on a synthetic corpus, kept alive between calls.
#[wasm_bindgen]
pub struct GroundingDemo {
    model: DTsg,
    test: Vec<PreparedSample>,
    val_r1: f64,
}

impl GroundingDemo {
    pub fn train_native(seed: u64, salience_boost: f64, epochs: usize) -> Result<Self, String> {
        let corpus = generate_synthetic(&demo_spec(seed, salience_boost, 0.9)).map_err(|e| e.to_string())?;
        let vocab = Vocab::from_dataset(&corpus.train);
        let cfg = ModelConfig { d_model: 8, heads: 2, d_ff: 16, word_dim: 8, max_query_len: 2, d_hidden: 8, ..ModelConfig::default() };
        let model = DTsg::new(cfg, vocab.clone(), corpus.train.feature_dim(), seed).map_err(|e| e.to_string())?;
        let tcfg = TrainConfig { epochs, lr: 3e-3, seed, toggles: LossToggles::backbone_only(), patience: 0, ..TrainConfig::default() };
        let state = train(model, &corpus.train, &corpus.val, None, &tcfg).map_err(|e| e.to_string())?;
        let test = prepare(&corpus.test, &vocab, 2);
        Ok(Self { val_r1: state.best_val, model: state.model, test })
    }

    pub fn inspect_native(&self, index: usize) -> Result<Inspection, String> {
        let s = self.test.get(index).ok_or_else(|| format!("no test sample {index}"))?;
        let bb = &self.model.backbone;
        let mut g = Graph::new(&self.model.store);
        let c = g.constant((*s.clips).clone());
        let err = |e: dtsg_core::Error| e.to_string();
        let v = bb.video.encode(&mut g, c).map_err(err)?;
        let q = bb.query.encode(&mut g, &s.query).map_err(err)?;
        let trace = bb.co.forward(&mut g, v, q, &s.query.mask).map_err(err)?;
        let scores = bb.head.scores(&mut g, trace.f);
        let s_r = g.value(trace.s_r);
        let attention = (0..s_r.rows).map(|t| s_r.row(t).to_vec()).collect();
        let words = s.query.ids.iter().zip(&s.query.mask).filter(|(_, &m)| m).map(|(&id, _)| self.model.vocab.token(id).to_string()).collect();
        let top = decode_segments(&scores.start, &scores.end, 3, 0, Some(s.gt))?;
        Ok(Inspection { id: s.id.clone(), query: words, target: s.gt, attention, start_logits: scores.start, end_logits: scores.end, top })
    }
}

#[wasm_bindgen]
impl GroundingDemo {
    /// Generates a corpus and trains the backbone for `epochs` epochs.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, salience_boost: f64, epochs: usize) -> Result<GroundingDemo, JsError> {
        Self::train_native(seed, salience_boost, epochs).map_err(js_err)
    }

    #[wasm_bindgen(js_name = testCount)]
    pub fn test_count(&self) -> usize {
        self.test.len()
    }

    /// Best validation R@1, IoU=0.5 reached during training.
    #[wasm_bindgen(js_name = valRecall)]
    pub fn val_recall(&self) -> f64 {
        self.val_r1
    }

    pub fn inspect(&self, index: usize) -> Result<String, JsError> {
        self.inspect_native(index).map(|v| json(&v)).map_err(js_err)
    }
}
