//! Corpus schema and ingestion.
//!
//! A corpus on disk is a directory of per-video feature files plus one
//! JSON-lines annotation file. Feature files are `<video_id>.feat`:
//!
//! ```text
//! b"DTSG" | u32 T_raw | u32 D_in | T_raw * D_in f32, row-major, little-endian
//! ```

mod pos;
mod split;
mod synthetic;
mod vocab;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use pos::{PosTagger, RuleTagger};
pub use split::{split_rare_common, word_counts, WordCounts};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
pub use vocab::{EncodedQuery, Vocab, EMPTY_ID, PAD_ID, UNK_ID};

pub const FEATURE_MAGIC: &[u8; 4] = b"DTSG";
pub const FEATURE_EXT: &str = "feat";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "NOUN")]
    Noun,
    #[serde(rename = "VERB")]
    Verb,
    #[serde(rename = "OTHER")]
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub id: String,
    pub duration: f64,
    /// `T_raw x D_in`
    pub features: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryAnnotation {
    pub tokens: Vec<String>,
    pub pos_tags: Vec<PosTag>,
    pub segment_seconds: (f64, f64),
}

impl QueryAnnotation {
    /// Tokens carrying `tag`, in query order.
    pub fn tokens_with_tag(&self, tag: PosTag) -> Vec<&str> {
        self.tokens.iter().zip(&self.pos_tags).filter(|(_, &t)| t == tag).map(|(w, _)| w.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    /// `<video_id>#<k>` where `k` counts this video's annotations in file order.
    pub id: String,
    pub video: Arc<RawVideo>,
    pub query: QueryAnnotation,
    pub clip_segment: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    /// Clip count after downsampling.
    pub num_clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_clips: 200 }
    }
}

/// An immutable set of samples with their videos downsampled to
/// `num_clips` rows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<GroundingSample>,
    pub num_clips: usize,
    pub rejected_count: usize,
    clips: BTreeMap<String, Arc<Mat>>,
}

impl Dataset {
    /// Builds a dataset, sorting samples by id and downsampling each video
    /// once.
    pub fn new(mut samples: Vec<GroundingSample>, num_clips: usize) -> Result<Self> {
        samples.sort_by(|a, b| sample_order_key(&a.id).cmp(&sample_order_key(&b.id)));
        let mut clips = BTreeMap::new();
        for s in &samples {
            if !clips.contains_key(&s.video.id) {
                clips.insert(s.video.id.clone(), Arc::new(downsample_video(&s.video, num_clips)?));
            }
            let (a, b) = s.clip_segment;
            if a > b || b >= num_clips {
                return Err(Error::Format(format!("sample {} has clip segment {:?} outside [0, {num_clips})", s.id, s.clip_segment)));
            }
        }
        Ok(Self { samples, num_clips, rejected_count: 0, clips })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Downsampled `T x D_in` features for a video in this dataset.
    pub fn clip_features(&self, video_id: &str) -> &Arc<Mat> {
        &self.clips[video_id]
    }

    pub fn feature_dim(&self) -> usize {
        self.clips.values().next().map_or(0, |m| m.cols)
    }

    /// Subset by sample index, keeping order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<_> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let clips = samples.iter().map(|s| (s.video.id.clone(), self.clips[&s.video.id].clone())).collect();
        Dataset { samples, num_clips: self.num_clips, rejected_count: 0, clips }
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == sample_id)
    }
}

/// Sort key `(video id, annotation index)`.
fn sample_order_key(id: &str) -> (&str, usize) {
    match id.rsplit_once('#') {
        Some((v, k)) => (v, k.parse().unwrap_or(usize::MAX)),
        None => (id, 0),
    }
}

/// One line of the annotation file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub video_id: String,
    pub duration: f64,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<PosTag>>,
    pub start: f64,
    pub end: f64,
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("{}: bad magic {:?}", path.display(), magic)));
    }
    let t_raw = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let d_in = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    if t_raw == 0 || d_in == 0 {
        return Err(Error::Format(format!("{}: empty feature matrix {t_raw}x{d_in}", path.display())));
    }
    let mut buf = vec![0f32; t_raw * d_in];
    r.read_f32_into::<LittleEndian>(&mut buf).map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = buf.into_iter().map(f64::from).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("{}: non-finite feature value", path.display())));
    }
    Ok(Mat::from_vec(t_raw, d_in, data))
}

pub fn write_features(path: &Path, features: &Mat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(features.rows as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(features.cols as u32).map_err(io)?;
    for &v in &features.data {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a corpus. Annotations with `start >= end`, `end > duration` or
/// mismatched token/tag lengths are skipped and counted in
/// `rejected_count`. Missing POS tags are filled by `tagger`.
pub fn load_dataset(features_dir: &Path, annotations_file: &Path, config: DataConfig, tagger: &dyn PosTagger) -> Result<Dataset> {
    let file = File::open(annotations_file).map_err(|e| Error::io(annotations_file, e))?;
    let mut lines = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(annotations_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", annotations_file.display(), lineno + 1)))?;
        lines.push(ann);
    }

    let mut durations: BTreeMap<&str, f64> = BTreeMap::new();
    for ann in &lines {
        durations.entry(&ann.video_id).or_insert(ann.duration);
    }
    let ids: Vec<&str> = durations.keys().copied().collect();
    if let Some(missing) = ids.iter().find(|id| !features_dir.join(format!("{id}.{FEATURE_EXT}")).exists()) {
        return Err(Error::MissingFeatures(missing.to_string()));
    }
    let features = load_features_parallel(features_dir, &ids, num_workers())?;
    let videos: BTreeMap<String, Arc<RawVideo>> = ids
        .iter()
        .zip(features)
        .map(|(id, f)| (id.to_string(), Arc::new(RawVideo { id: id.to_string(), duration: durations[id], features: f })))
        .collect();

    let mut per_video: BTreeMap<String, usize> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut rejected = 0;
    for ann in lines {
        let k = per_video.entry(ann.video_id.clone()).or_insert(0);
        let id = format!("{}#{}", ann.video_id, k);
        *k += 1;
        let video = videos[&ann.video_id].clone();

        let pos_tags = match ann.pos {
            Some(p) => p,
            None => tagger.tag(&ann.tokens),
        };
        let valid = ann.duration > 0.0
            && ann.start >= 0.0
            && ann.start < ann.end
            && ann.end <= ann.duration
            && !ann.tokens.is_empty()
            && pos_tags.len() == ann.tokens.len();
        if !valid {
            log::warn!("rejecting annotation {id}: segment ({}, {}) duration {}", ann.start, ann.end, ann.duration);
            rejected += 1;
            continue;
        }
        let clip_segment = map_timestamps((ann.start, ann.end), ann.duration, config.num_clips)?;
        samples.push(GroundingSample {
            id,
            video,
            query: QueryAnnotation { tokens: ann.tokens, pos_tags, segment_seconds: (ann.start, ann.end) },
            clip_segment,
        });
    }
    let mut ds = Dataset::new(samples, config.num_clips)?;
    ds.rejected_count = rejected;
    Ok(ds)
}

/// Loader thread count from `DTSG_NUM_WORKERS`, defaulting to 1.
pub fn num_workers() -> usize {
    std::env::var("DTSG_NUM_WORKERS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Reads `<dir>/<id>.feat` for each id on up to `workers` threads. The
/// output order follows `ids` regardless of the thread count.
pub fn load_features_parallel(dir: &Path, ids: &[&str], workers: usize) -> Result<Vec<Mat>> {
    let read = |id: &&str| read_features(&dir.join(format!("{id}.{FEATURE_EXT}")));
    let workers = workers.clamp(1, ids.len().max(1));
    if workers == 1 {
        return ids.iter().map(read).collect();
    }
    let chunk = ids.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = ids.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(read).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(ids.len());
        for h in handles {
            out.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(out)
    })
}

/// Writes every distinct video's raw features and one annotation line per
/// sample, in dataset order.
pub fn write_dataset(dataset: &Dataset, features_dir: &Path, annotations_file: &Path) -> Result<()> {
    fs::create_dir_all(features_dir).map_err(|e| Error::io(features_dir, e))?;
    let mut written = std::collections::BTreeSet::new();
    let file = File::create(annotations_file).map_err(|e| Error::io(annotations_file, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        if written.insert(s.video.id.clone()) {
            write_features(&features_dir.join(format!("{}.{FEATURE_EXT}", s.video.id)), &s.video.features)?;
        }
        let line = AnnotationLine {
            video_id: s.video.id.clone(),
            duration: s.video.duration,
            tokens: s.query.tokens.clone(),
            pos: Some(s.query.pos_tags.clone()),
            start: s.query.segment_seconds.0,
            end: s.query.segment_seconds.1,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(annotations_file, e))?;
    }
    w.flush().map_err(|e| Error::io(annotations_file, e))
}

/// Resamples a `T_raw x D` feature sequence to exactly `num_clips` rows:
/// bucket means when shrinking, nearest-index repetition when growing.
pub fn downsample_video(raw: &RawVideo, num_clips: usize) -> Result<Mat> {
    resample_rows(&raw.features, num_clips)
}

pub fn resample_rows(x: &Mat, num_clips: usize) -> Result<Mat> {
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::Shape("empty video features".into()));
    }
    if num_clips == 0 {
        return Err(Error::Config("clip count must be >= 1".into()));
    }
    let (n, d) = x.shape();
    let mut out = Mat::zeros(num_clips, d);
    if n <= num_clips {
        for t in 0..num_clips {
            out.row_mut(t).copy_from_slice(x.row(t * n / num_clips));
        }
    } else {
        for t in 0..num_clips {
            let (lo, hi) = (t * n / num_clips, (t + 1) * n / num_clips);
            let orow = out.row_mut(t);
            for r in lo..hi {
                for (o, v) in orow.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            let k = (hi - lo) as f64;
            for o in orow.iter_mut() {
                *o /= k;
            }
        }
    }
    Ok(out)
}

/// Maps a second-valued segment onto clip indices. Clip `t` covers
/// `[t * duration / T, (t + 1) * duration / T)`.
pub fn map_timestamps(segment: (f64, f64), duration: f64, num_clips: usize) -> Result<(usize, usize)> {
    if !(duration > 0.0) {
        return Err(Error::Format(format!("non-positive duration {duration}")));
    }
    if num_clips == 0 {
        return Err(Error::Config("clip count must be >= 1".into()));
    }
    let (s, e) = segment;
    let t = num_clips as f64;
    let last = num_clips - 1;
    let s_idx = ((s * t / duration).floor().max(0.0) as usize).min(last);
    let e_idx = ((e * t / duration).ceil() as i64 - 1).clamp(0, last as i64) as usize;
    Ok((s_idx, e_idx.max(s_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn video(rows: Vec<Vec<f64>>) -> RawVideo {
        RawVideo { id: "v".into(), duration: 1.0, features: Mat::from_rows(&rows) }
    }

    /// Loop-based bucketing, written independently of `resample_rows`.
    fn bucket_oracle(x: &Mat, t_out: usize) -> Mat {
        let mut out = Mat::zeros(t_out, x.cols);
        for t in 0..t_out {
            let lo = (t as f64 * x.rows as f64 / t_out as f64).floor() as usize;
            let hi = ((t + 1) as f64 * x.rows as f64 / t_out as f64).floor() as usize;
            for c in 0..x.cols {
                let mut s = 0.0;
                for r in lo..hi {
                    s += x.get(r, c);
                }
                out.set(t, c, s / (hi - lo) as f64);
            }
        }
        out
    }

    #[test]
    fn downsample_bucket_means() {
        let v = video(vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 4.0], vec![7.0, 6.0]]);
        let out = downsample_video(&v, 2).unwrap();
        assert_eq!(out.data, vec![2.0, 1.0, 6.0, 5.0]);
    }

    #[test]
    fn downsample_identity_and_upsample() {
        let v = video(vec![vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(downsample_video(&v, 3).unwrap(), v.features);
        assert_eq!(downsample_video(&v, 6).unwrap().data, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn downsample_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Mat::from_vec(200, 5, (0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let raw = RawVideo { id: "r".into(), duration: 10.0, features: x.clone() };
        let got = downsample_video(&raw, 64).unwrap();
        let want = bucket_oracle(&x, 64);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_preserves_mean_when_divisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Mat::from_vec(96, 3, (0..288).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = resample_rows(&x, 32).unwrap();
        for c in 0..3 {
            let m_in: f64 = (0..96).map(|r| x.get(r, c)).sum::<f64>() / 96.0;
            let m_out: f64 = (0..32).map(|r| out.get(r, c)).sum::<f64>() / 32.0;
            assert!((m_in - m_out).abs() < 1e-5);
        }
    }

    #[test]
    fn parallel_loading_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = (0..7).map(|i| format!("v{i}")).collect();
        let mats: Vec<Mat> = (0..7).map(|i| Mat::from_rows(&(0..=i).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>())).collect();
        for (n, m) in names.iter().zip(&mats) {
            write_features(&dir.path().join(format!("{n}.{FEATURE_EXT}")), m).unwrap();
        }
        let ids: Vec<&str> = names.iter().map(String::as_str).collect();
        let serial = load_features_parallel(dir.path(), &ids, 1).unwrap();
        for w in [2, 3, 16] {
            assert_eq!(load_features_parallel(dir.path(), &ids, w).unwrap(), serial);
        }
        assert_eq!(serial[4].rows, 5);
    }

    #[test]
    fn downsample_empty_is_error() {
        let raw = RawVideo { id: "e".into(), duration: 1.0, features: Mat::zeros(0, 4) };
        assert!(downsample_video(&raw, 4).is_err());
    }

    #[test]
    fn timestamps_fixed_examples() {
        assert_eq!(map_timestamps((20.0, 50.0), 100.0, 10).unwrap(), (2, 4));
        for t in [1, 7, 64, 200] {
            assert_eq!(map_timestamps((0.0, 37.5), 37.5, t).unwrap(), (0, t - 1));
        }
        assert!(map_timestamps((0.0, 1.0), 0.0, 4).is_err());
    }

    /// Scan every clip interval and keep those overlapping `(s, e)` with
    /// positive length; first and last overlapping clips are the answer.
    fn overlap_oracle(s: f64, e: f64, dur: f64, t: usize) -> (usize, usize) {
        let w = dur / t as f64;
        let hits: Vec<usize> = (0..t)
            .filter(|&k| {
                let (lo, hi) = (k as f64 * w, (k + 1) as f64 * w);
                s.max(lo) < e.min(hi)
            })
            .collect();
        match (hits.first(), hits.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                let k = ((s / w) as usize).min(t - 1);
                (k, k)
            }
        }
    }

    #[test]
    fn timestamps_match_overlap_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let dur = rng.gen_range(5.0..200.0);
            let t = rng.gen_range(1..100);
            let a = rng.gen_range(0.0..dur);
            let b = rng.gen_range(0.0..dur);
            let (s, e) = if a < b { (a, b) } else { (b, a) };
            if e - s < 1e-9 {
                continue;
            }
            assert_eq!(map_timestamps((s, e), dur, t).unwrap(), overlap_oracle(s, e, dur, t), "s={s} e={e} dur={dur} t={t}");
        }
    }

    proptest::proptest! {
        #[test]
        fn mapped_indices_in_range(dur in 0.1f64..500.0, t in 1usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (s, e) = if a < b { (a * dur, b * dur) } else { (b * dur, a * dur) };
            proptest::prop_assume!(s < e);
            let (si, ei) = map_timestamps((s, e), dur, t).unwrap();
            proptest::prop_assert!(si <= ei && ei < t);
        }
    }
}
