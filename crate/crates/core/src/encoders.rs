//! Video and query encoders: input projection, sinusoidal positions, then
//! multi-head self-attention blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::EncodedQuery;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore, Tag};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 512, heads: 4, d_ff: 1024, depth: 1, positional: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Standard sine/cosine position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(len, d);
    for p in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * rate;
            m.set(p, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    m
}

/// One post-norm transformer block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
    pub heads: usize,
}

/// Per-head attention weight nodes from one block.
pub struct AttentionTrace {
    pub weights: Vec<Var>,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), tag, d, d, rng),
            wk: Linear::new(store, &format!("{name}.wk"), tag, d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), tag, d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), tag, d, d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), tag, d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), tag, d, cfg.d_ff, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), tag, d),
            heads: cfg.heads,
        }
    }

    /// Masked multi-head self-attention with residual + layer norm, then a
    /// feed-forward sublayer with its own residual + layer norm. `mask`
    /// marks valid key positions.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        self.forward_traced(g, x, mask).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<(Var, AttentionTrace)> {
        let (len, d) = g.value(x).shape();
        if mask.len() != len {
            return Err(Error::Shape(format!("mask length {} for sequence length {len}", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores, Some(mask));
            weights.push(p);
            outs.push(g.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attn = self.wo.forward(g, cat);
        let res = g.add(x, attn);
        let x1 = self.ln1.forward(g, res);
        let ff = self.ffn.forward(g, x1);
        let res2 = g.add(x1, ff);
        let y = self.ln2.forward(g, res2);
        Ok((y, AttentionTrace { weights }))
    }
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub d_in: usize,
    pub positional: bool,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, name: &str, tag: Tag, d_in: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), tag, d_in, cfg.d_model, rng),
            blocks: (0..cfg.depth).map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), tag, cfg, rng)).collect(),
            d_in,
            positional: cfg.positional,
        }
    }

    /// `T x D_in` clip features to `T x D`. Every clip is valid.
    pub fn encode(&self, g: &mut Graph, clips: Var) -> Result<Var> {
        let (t, d_in) = g.value(clips).shape();
        if d_in != self.d_in {
            return Err(Error::Shape(format!("video features have {d_in} dims, encoder expects {}", self.d_in)));
        }
        let mut x = self.proj.forward(g, clips);
        if self.positional {
            let d = g.value(x).cols;
            let pe = g.constant(sinusoidal_positions(t, d));
            x = g.add(x, pe);
        }
        let mask = vec![true; t];
        for b in &self.blocks {
            x = b.forward(g, x, &mask)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub embedding: ParamId,
    pub proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub positional: bool,
}

impl QueryEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tag: Tag,
        vocab_size: usize,
        word_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            embedding: store.add_uniform(format!("{name}.embedding"), tag, vocab_size, word_dim, 0.1, rng),
            proj: Linear::new(store, &format!("{name}.proj"), tag, word_dim, cfg.d_model, rng),
            blocks: (0..cfg.depth).map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), tag, cfg, rng)).collect(),
            positional: cfg.positional,
        }
    }

    /// Token ids to `M x D`; pad positions are masked out as attention keys.
    /// Ids beyond the table are read as `<unk>`.
    pub fn encode(&self, g: &mut Graph, q: &EncodedQuery) -> Result<Var> {
        let table = g.param(self.embedding);
        let vocab = g.value(table).rows;
        let ids: Vec<usize> = q.ids.iter().map(|&i| if i < vocab { i } else { crate::data::UNK_ID }).collect();
        let emb = g.gather(table, &ids);
        let mut x = self.proj.forward(g, emb);
        if self.positional {
            let (m, d) = g.value(x).shape();
            let pe = g.constant(sinusoidal_positions(m, d));
            x = g.add(x, pe);
        }
        for b in &self.blocks {
            x = b.forward(g, x, &q.mask)?;
        }
        Ok(x)
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    token: String,
    vec: Vec<f64>,
}

/// Overwrites rows of an embedding table from a JSON-lines file of
/// `{"token": str, "vec": [f64]}`. Returns how many rows were replaced.
pub fn load_pretrained_embeddings(
    store: &mut ParamStore,
    embedding: ParamId,
    vocab: &crate::data::Vocab,
    path: &std::path::Path,
) -> Result<usize> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let width = store.value(embedding).cols;
    let mut replaced = 0;
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EmbeddingLine = serde_json::from_str(&line).map_err(|err| Error::Format(format!("{}:{}: {err}", path.display(), n + 1)))?;
        if e.vec.len() != width {
            return Err(Error::Shape(format!("embedding for {:?} has {} dims, table has {width}", e.token, e.vec.len())));
        }
        let id = vocab.id(&e.token);
        if id == crate::data::UNK_ID && e.token != "<unk>" {
            continue;
        }
        store.value_mut(embedding).row_mut(id).copy_from_slice(&e.vec);
        replaced += 1;
    }
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Vocab;
    use crate::gradcheck::check_gradients;

    fn cfg() -> EncoderConfig {
        EncoderConfig { d_model: 8, heads: 2, d_ff: 12, depth: 1, positional: true }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", Tag::Backbone, &cfg(), &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(rand_mat(&mut rng, 1, 8));
        let (_, trace) = block.forward_traced(&mut g, x, &[true]).unwrap();
        for w in trace.weights {
            assert_eq!(g.value(w).data, vec![1.0]);
        }
    }

    #[test]
    fn attention_rows_normalized_and_pads_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", Tag::Backbone, &cfg(), &mut rng);
        let mask = [true, true, true, false, false];
        let mut g = Graph::new(&store);
        let x = g.constant(rand_mat(&mut rng, 5, 8));
        let (y, trace) = block.forward_traced(&mut g, x, &mask).unwrap();
        assert_eq!(g.value(y).shape(), (5, 8));
        for w in trace.weights {
            let p = g.value(w);
            for r in 0..5 {
                let s: f64 = p.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert_eq!(p.get(r, 3), 0.0);
                assert_eq!(p.get(r, 4), 0.0);
            }
        }
    }

    #[test]
    fn swapping_pad_rows_leaves_valid_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", Tag::Backbone, &cfg(), &mut rng);
        let mask = [true, true, false, false];
        let x = rand_mat(&mut rng, 4, 8);
        let mut swapped = x.clone();
        swapped.row_mut(2).copy_from_slice(x.row(3));
        swapped.row_mut(3).copy_from_slice(x.row(2));
        let run = |m: Mat| {
            let mut g = Graph::new(&store);
            let xv = g.constant(m);
            let y = block.forward(&mut g, xv, &mask).unwrap();
            g.value(y).slice_rows(0, 2)
        };
        assert_eq!(run(x), run(swapped));
    }

    #[test]
    fn all_masked_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", Tag::Backbone, &cfg(), &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros(2, 8));
        assert!(matches!(block.forward(&mut g, x, &[false, false]), Err(Error::AllMasked)));
    }

    #[test]
    fn video_encoder_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut store, "v", Tag::Backbone, 5, &cfg(), &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros(6, 5));
        let y = enc.encode(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), (6, 8));
        assert!(g.value(y).is_finite());
        let bad = g.constant(Mat::zeros(6, 4));
        assert!(matches!(enc.encode(&mut g, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn query_encoder_maps_out_of_range_ids_to_unk() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = QueryEncoder::new(&mut store, "q", Tag::Backbone, 6, 4, &cfg(), &mut rng);
        let q_far = EncodedQuery { ids: vec![3, 999, 0], mask: vec![true, true, false] };
        let q_unk = EncodedQuery { ids: vec![3, crate::data::UNK_ID, 0], mask: vec![true, true, false] };
        let run = |q: &EncodedQuery| {
            let mut g = Graph::new(&store);
            let y = enc.encode(&mut g, q).unwrap();
            g.value(y).clone()
        };
        let out = run(&q_far);
        assert_eq!(out.shape(), (3, 8));
        assert_eq!(out, run(&q_unk));
    }

    #[test]
    fn video_encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut store, "v", Tag::Backbone, 4, &cfg(), &mut rng);
        let x = rand_mat(&mut rng, 3, 4);
        let target = rand_mat(&mut rng, 3, 8);
        let report = check_gradients(&store, 1e-5, |g| {
            let xv = g.constant(x.clone());
            let y = enc.encode(g, xv).unwrap();
            let t = g.constant(target.clone());
            let p = g.mul(y, t);
            g.sum_all(p)
        });
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn query_encoder_gradients_through_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let vocab = Vocab::from_tokens(["a", "b", "c"]);
        let enc = QueryEncoder::new(&mut store, "q", Tag::Backbone, vocab.len(), 5, &cfg(), &mut rng);
        let q = vocab.encode(&["a", "c", "a"], 5);
        let target = rand_mat(&mut rng, 5, 8);
        let report = check_gradients(&store, 1e-5, |g| {
            let y = enc.encode(g, &q).unwrap();
            let t = g.constant(target.clone());
            let p = g.mul(y, t);
            g.sum_all(p)
        });
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
        assert!(report.tensors.iter().any(|t| t.name == "q.embedding" && t.checked > 0));
    }
}
