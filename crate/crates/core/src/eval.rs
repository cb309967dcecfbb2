//! `R@n, IoU=m` metrics, split reports, prediction dumps and the inference
//! cost benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::{clip_iou, decode_top_n, BoundaryScores, Segment};
use crate::model::{DTsg, InferenceModel, PreparedSample};
use crate::params::{ParamStore, Tag};

/// The Table 1 grid: `R@{1,5}, IoU={0.3,0.5,0.7}`.
pub const DEFAULT_GRID: [(usize, f64); 6] = [(1, 0.3), (1, 0.5), (1, 0.7), (5, 0.3), (5, 0.5), (5, 0.7)];

/// Clip-index spans, best first.
pub type Spans = Vec<(usize, usize)>;

/// Whether the best of the first `n` spans clears `m`. Strict `>` unless
/// `inclusive`.
pub fn is_hit(pred: &[(usize, usize)], gt: (usize, usize), n: usize, m: f64, inclusive: bool) -> bool {
    let best = pred.iter().take(n).map(|&p| clip_iou(p, gt)).fold(f64::NEG_INFINITY, f64::max);
    if inclusive {
        best >= m
    } else {
        best > m
    }
}

pub fn count_hits(preds: &[Spans], gts: &[(usize, usize)], n: usize, m: f64, inclusive: bool) -> usize {
    preds.iter().zip(gts).filter(|(p, &g)| is_hit(p, g, n, m, inclusive)).count()
}

/// Percentage of samples hit; 0 for an empty set.
pub fn recall_at(preds: &[Spans], gts: &[(usize, usize)], n: usize, m: f64, inclusive: bool) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction list per ground truth");
    if gts.is_empty() {
        return 0.0;
    }
    100.0 * count_hits(preds, gts, n, m, inclusive) as f64 / gts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub split: String,
    pub n: usize,
    pub m: f64,
    pub recall: f64,
    pub count: usize,
    pub hits: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: Vec<MetricCell>,
}

impl MetricReport {
    pub fn get(&self, split: &str, n: usize, m: f64) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.split == split && c.n == n && (c.m - m).abs() < 1e-12)
    }

    pub fn recall(&self, split: &str, n: usize, m: f64) -> Option<f64> {
        self.get(split, n, m).map(|c| c.recall)
    }

    /// Columns `split,n,m,recall,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,n,m,recall,count\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{:.4},{}\n", c.split, c.n, c.m, c.recall, c.count));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Top-n spans per sample id.
pub type PredictionSet = BTreeMap<String, Vec<Segment>>;

fn spans(segs: &[Segment]) -> Spans {
    segs.iter().map(|s| (s.start, s.end)).collect()
}

/// Scores the grid on every named split. Prediction ids must match the ids
/// of the first split exactly; later splits must be subsets of it.
pub fn evaluate(
    preds: &PredictionSet,
    splits: &[(&str, &Dataset)],
    grid: &[(usize, f64)],
    inclusive: bool,
) -> Result<MetricReport> {
    if let Some((_, all)) = splits.first() {
        let want: BTreeSet<&str> = all.samples.iter().map(|s| s.id.as_str()).collect();
        let have: BTreeSet<&str> = preds.keys().map(String::as_str).collect();
        let bad: Vec<String> = want.symmetric_difference(&have).map(|s| s.to_string()).collect();
        if !bad.is_empty() {
            return Err(Error::IdMismatch(bad));
        }
    }
    let mut cells = Vec::new();
    for (name, ds) in splits {
        let mut p = Vec::with_capacity(ds.len());
        let mut gts = Vec::with_capacity(ds.len());
        let mut missing = Vec::new();
        for s in &ds.samples {
            match preds.get(&s.id) {
                Some(segs) => p.push(spans(segs)),
                None => missing.push(s.id.clone()),
            }
            gts.push(s.clip_segment);
        }
        if !missing.is_empty() {
            return Err(Error::IdMismatch(missing));
        }
        for &(n, m) in grid {
            let hits = count_hits(&p, &gts, n, m, inclusive);
            let recall = if gts.is_empty() { 0.0 } else { 100.0 * hits as f64 / gts.len() as f64 };
            cells.push(MetricCell { split: name.to_string(), n, m, recall, count: gts.len(), hits });
        }
    }
    Ok(MetricReport { cells })
}

/// Anything that maps a prepared sample to boundary scores.
pub trait Predictor {
    fn scores(&self, s: &PreparedSample) -> Result<BoundaryScores>;
    /// Parameter store the predictor reads from.
    fn params(&self) -> &ParamStore;
    /// Ids of tensors read by one prediction.
    fn touched(&self, s: &PreparedSample) -> Result<BTreeSet<crate::params::ParamId>>;
}

impl Predictor for DTsg {
    fn scores(&self, s: &PreparedSample) -> Result<BoundaryScores> {
        self.predict(s)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn touched(&self, s: &PreparedSample) -> Result<BTreeSet<crate::params::ParamId>> {
        let mut g = Graph::new(&self.store);
        let c = g.constant((*s.clips).clone());
        let f = self.backbone.features(&mut g, c, &s.query)?;
        self.backbone.head.forward(&mut g, f);
        Ok(g.touched().clone())
    }
}

impl Predictor for InferenceModel {
    fn scores(&self, s: &PreparedSample) -> Result<BoundaryScores> {
        self.predict(s)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn touched(&self, s: &PreparedSample) -> Result<BTreeSet<crate::params::ParamId>> {
        let mut g = Graph::new(&self.store);
        let c = g.constant((*s.clips).clone());
        let f = self.backbone.features(&mut g, c, &s.query)?;
        self.backbone.head.forward(&mut g, f);
        Ok(g.touched().clone())
    }
}

pub fn predict_all(model: &dyn Predictor, samples: &[PreparedSample], top_n: usize, max_len: Option<usize>) -> Result<PredictionSet> {
    samples
        .iter()
        .map(|s| Ok((s.id.clone(), decode_top_n(&model.scores(s)?, top_n, max_len))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    sample_id: String,
    /// `[start, end, score]`, best first.
    segments: Vec<(usize, usize, f64)>,
}

/// JSON lines `{"sample_id": str, "segments": [[start, end, score], ...]}`.
pub fn write_predictions(preds: &PredictionSet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (id, segs) in preds {
        let line = PredictionLine { sample_id: id.clone(), segments: segs.iter().map(|s| (s.start, s.end, s.score)).collect() };
        writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = PredictionSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if p.segments.is_empty() {
            return Err(Error::Format(format!("{}:{}: sample {} has no predictions", path.display(), i + 1, p.sample_id)));
        }
        let segs = p.segments.into_iter().map(|(start, end, score)| Segment { start, end, score }).collect();
        out.insert(p.sample_id, segs);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reps: usize,
    pub samples: usize,
    pub mean_ms_per_sample: f64,
    pub std_ms_per_sample: f64,
    /// Scalars read by one inference pass.
    pub touched_params: usize,
    /// Tags of the tensors read by one inference pass.
    pub touched_tags: BTreeSet<Tag>,
    pub params_by_tag: BTreeMap<Tag, usize>,
    pub total_params: usize,
}

/// Times `reps` passes over `samples` after `warmup` untimed passes.
pub fn benchmark_inference(model: &dyn Predictor, samples: &[PreparedSample], reps: usize, warmup: usize) -> Result<BenchReport> {
    let first = samples.first().ok_or_else(|| Error::Config("benchmark needs at least one sample".into()))?;
    let touched = model.touched(first)?;
    let store = model.params();
    let touched_params = touched.iter().map(|&id| store.value(id).len()).sum();
    let touched_tags = touched.iter().map(|&id| store.get(id).tag).collect();
    for _ in 0..warmup {
        for s in samples {
            model.scores(s)?;
        }
    }
    let mut per_sample = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        for s in samples {
            std::hint::black_box(model.scores(s)?);
        }
        per_sample.push(t0.elapsed().as_secs_f64() * 1e3 / samples.len() as f64);
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let var = per_sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / per_sample.len() as f64;
    Ok(BenchReport {
        reps: per_sample.len(),
        samples: samples.len(),
        mean_ms_per_sample: mean,
        std_ms_per_sample: var.sqrt(),
        touched_params,
        touched_tags,
        params_by_tag: store.counts_by_tag(),
        total_params: store.count(None),
    })
}
