//! Training-only debiasing branch.
//!
//! Three biased models see impoverished inputs (video only, nouns only,
//! verbs only) and learn biased features `F_bias^i`. A gate per stream keeps
//! the harmful part, `F_hat^i = F_bias^i * sigmoid(MLP(F_bias^i))`, and a
//! per-clip softmax fuses the three into `F_tilde`. The debiased feature
//! `F - F_tilde` is supervised by its own head, and a contrastive term pulls
//! `F` toward it and away from `F_tilde`.
//!
//! Every tensor here is tagged non-backbone; nothing in this module runs at
//! inference.

use rand::Rng;

use crate::autograd::{Graph, Var, COSINE_EPS};
use crate::cross_modal::CoAttention;
use crate::data::EncodedQuery;
use crate::encoders::{EncoderConfig, QueryEncoder, VideoEncoder};
use crate::error::Result;
use crate::head::{tsg_loss, BoundaryHead, HeadLoss};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamStore, Tag};
use crate::tensor::Mat;

/// Shapes shared by every component of the branch.
#[derive(Clone, Debug)]
pub struct BranchDims<'a> {
    pub d_in: usize,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub d_hidden: usize,
    pub encoder: &'a EncoderConfig,
    pub scaled_similarity: bool,
}

/// Video-only biased model: no query path exists.
#[derive(Clone, Debug)]
pub struct VideoBiasModel {
    pub video: VideoEncoder,
    pub proj: Linear,
    pub head: BoundaryHead,
}

impl VideoBiasModel {
    pub fn new(store: &mut ParamStore, dims: &BranchDims, rng: &mut impl Rng) -> Self {
        let tag = Tag::Bias1;
        let d = dims.encoder.d_model;
        Self {
            video: VideoEncoder::new(store, "bias1.video", tag, dims.d_in, dims.encoder, rng),
            proj: Linear::new(store, "bias1.proj", tag, d, d, rng),
            head: BoundaryHead::new(store, "bias1.head", tag, d, rng),
        }
    }

    /// Returns `F_bias^1`.
    pub fn features(&self, g: &mut Graph, clips: Var) -> Result<Var> {
        let v = self.video.encode(g, clips)?;
        Ok(self.proj.forward(g, v))
    }
}

/// Biased model fed only the nouns (or only the verbs) of the query.
#[derive(Clone, Debug)]
pub struct PosBiasModel {
    pub video: VideoEncoder,
    pub query: QueryEncoder,
    pub co: CoAttention,
    pub head: BoundaryHead,
}

impl PosBiasModel {
    pub fn new(store: &mut ParamStore, tag: Tag, dims: &BranchDims, rng: &mut impl Rng) -> Self {
        let p = tag.as_str();
        let d = dims.encoder.d_model;
        Self {
            video: VideoEncoder::new(store, &format!("{p}.video"), tag, dims.d_in, dims.encoder, rng),
            query: QueryEncoder::new(store, &format!("{p}.query"), tag, dims.vocab_size, dims.word_dim, dims.encoder, rng),
            co: CoAttention::new(store, &format!("{p}.co"), tag, d, dims.scaled_similarity, rng),
            head: BoundaryHead::new(store, &format!("{p}.head"), tag, d, rng),
        }
    }

    /// Returns `F_bias^i` for the filtered query.
    pub fn features(&self, g: &mut Graph, clips: Var, pos_query: &EncodedQuery) -> Result<Var> {
        let v = self.video.encode(g, clips)?;
        let q = self.query.encode(g, pos_query)?;
        Ok(self.co.forward(g, v, q, &pos_query.mask)?.f)
    }
}

/// Gates and fusion of the bias identification step.
#[derive(Clone, Debug)]
pub struct BiasIdentifier {
    pub gates: [Mlp; 3],
    pub fusion: Linear,
}

impl BiasIdentifier {
    pub fn new(store: &mut ParamStore, d: usize, d_hidden: usize, rng: &mut impl Rng) -> Self {
        let gate = |store: &mut ParamStore, i: usize, rng: &mut _| Mlp::new(store, &format!("bim.gate{i}"), Tag::Bim, d, d_hidden, d, rng);
        Self {
            gates: [gate(store, 1, rng), gate(store, 2, rng), gate(store, 3, rng)],
            fusion: Linear::new(store, "bim.fusion", Tag::Bim, 3 * d, 3, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DebiasedModule {
    pub mlp: Linear,
    pub head: BoundaryHead,
}

impl DebiasedModule {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Linear::new(store, "debiased.mlp", Tag::DebiasedModule, d, d, rng),
            head: BoundaryHead::new(store, "debiased.head", Tag::DebiasedModule, d, rng),
        }
    }
}

/// `F_hat = F_bias * sigmoid(MLP(F_bias))`.
pub fn identify_bias(g: &mut Graph, f_bias: Var, gate: &Mlp) -> Var {
    let logits = gate.forward(g, f_bias);
    identify_bias_from_logits(g, f_bias, logits)
}

pub fn identify_bias_from_logits(g: &mut Graph, f_bias: Var, gate_logits: Var) -> Var {
    let s = g.sigmoid(gate_logits);
    g.mul(f_bias, s)
}

/// Per-clip convex combination of the gated streams. `active[i] == false`
/// removes stream `i` from the softmax. Returns `(m, F_tilde)` with `m` of
/// shape `T x 3`.
pub fn fuse_bias(g: &mut Graph, hats: [Var; 3], fusion: &Linear, active: [bool; 3]) -> (Var, Var) {
    let cat = g.concat_cols(&hats);
    let logits = fusion.forward(g, cat);
    fuse_bias_from_logits(g, hats, logits, active)
}

pub fn fuse_bias_from_logits(g: &mut Graph, hats: [Var; 3], logits: Var, active: [bool; 3]) -> (Var, Var) {
    let m = g.softmax_rows(logits, Some(&active));
    let d = g.value(hats[0]).cols;
    let ones = g.constant(Mat::filled(1, d, 1.0));
    let mut acc: Option<Var> = None;
    for (i, &h) in hats.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let col = g.slice_cols(m, i, 1);
        let wide = g.matmul(col, ones);
        let term = g.mul(wide, h);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    (m, acc.expect("at least one active bias stream"))
}

/// `F - F_tilde`.
pub fn debias(g: &mut Graph, f: Var, f_tilde: Var) -> Var {
    g.sub(f, f_tilde)
}

/// MLP + boundary head on `F_debiased`, supervised like the backbone.
pub fn debiased_module_loss(
    g: &mut Graph,
    f_debiased: Var,
    gt: (usize, usize),
    module: &DebiasedModule,
    kind: HeadLoss,
    smoothing: usize,
) -> Var {
    let h = module.mlp.forward(g, f_debiased);
    let h = g.relu(h);
    let (cs, ce) = module.head.forward(g, h);
    tsg_loss(g, cs, ce, gt, kind, smoothing)
}

/// Cosine similarity with `1e-8` added to the norm product; 0 when either
/// vector is zero.
pub fn cosine_score(f1: &[f64], f2: &[f64]) -> f64 {
    let dot: f64 = f1.iter().zip(f2).map(|(a, b)| a * b).sum();
    let n1 = f1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = f2.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (n1 * n2 + COSINE_EPS)
}

/// `-(1/T) sum_t log(e^{cos(f, f_deb)} / (e^{cos(f, f_deb)} + e^{cos(f, f_tilde)}))`,
/// with both scores divided by `temperature`.
pub fn feature_contrastive_loss(g: &mut Graph, f: Var, f_debiased: Var, f_tilde: Var, temperature: f64) -> Var {
    let pos = g.row_cosine(f, f_debiased);
    let neg = g.row_cosine(f, f_tilde);
    let diff = g.sub(neg, pos);
    let diff = g.scale(diff, 1.0 / temperature);
    let per_clip = g.softplus(diff);
    g.mean_all(per_clip)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Vocab;
    use crate::gradcheck::check_gradients;
    use crate::tensor::sigmoid;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig { d_model: 4, heads: 2, d_ff: 4, depth: 1, positional: true }
    }

    #[test]
    fn zero_gate_logits_halve_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let fm = rand_mat(&mut rng, 3, 4);
        let f = g.constant(fm.clone());
        let z = g.constant(Mat::zeros(3, 4));
        let h = identify_bias_from_logits(&mut g, f, z);
        assert_eq!(g.value(h), &fm.map(|v| 0.5 * v));
        let neg = g.constant(Mat::filled(3, 4, -1e9));
        let h = identify_bias_from_logits(&mut g, f, neg);
        assert!(g.value(h).max_abs() < 1e-300);
    }

    #[test]
    fn gate_matches_loop_oracle_and_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gate = Mlp::new(&mut store, "gate", Tag::Bim, 4, 3, 4, &mut rng);
        let fm = rand_mat(&mut rng, 5, 4);
        let mut g = Graph::new(&store);
        let f = g.constant(fm.clone());
        let logits = gate.forward(&mut g, f);
        let lv = g.value(logits).clone();
        let h = identify_bias(&mut g, f, &gate);
        for k in 0..fm.len() {
            let want = fm.data[k] * sigmoid(lv.data[k]);
            assert!((g.value(h).data[k] - want).abs() < 1e-10);
            if fm.data[k] != 0.0 {
                assert!(g.value(h).data[k].abs() < fm.data[k].abs());
            }
        }
    }

    #[test]
    fn uniform_fusion_is_mean_and_saturated_picks_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ms: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 4, 5)).collect();
        let hats = [g.constant(ms[0].clone()), g.constant(ms[1].clone()), g.constant(ms[2].clone())];
        let eq = g.constant(Mat::filled(4, 3, 0.25));
        let (m, ft) = fuse_bias_from_logits(&mut g, hats, eq, [true; 3]);
        for r in 0..4 {
            for i in 0..3 {
                assert!((g.value(m).get(r, i) - 1.0 / 3.0).abs() < 1e-12);
            }
            for c in 0..5 {
                let mean = (ms[0].get(r, c) + ms[1].get(r, c) + ms[2].get(r, c)) / 3.0;
                assert!((g.value(ft).get(r, c) - mean).abs() < 1e-12);
            }
        }
        let mut l = Mat::zeros(4, 3);
        for r in 0..4 {
            l.set(r, 1, 1e9);
        }
        let dom = g.constant(l);
        let (_, ft) = fuse_bias_from_logits(&mut g, hats, dom, [true; 3]);
        assert_eq!(g.value(ft), &ms[1]);
    }

    #[test]
    fn fusion_matches_loop_oracle_and_is_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ms: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 6, 4)).collect();
        let lm = rand_mat(&mut rng, 6, 3).map(|v| 3.0 * v);
        let hats = [g.constant(ms[0].clone()), g.constant(ms[1].clone()), g.constant(ms[2].clone())];
        let logits = g.constant(lm.clone());
        let (m, ft) = fuse_bias_from_logits(&mut g, hats, logits, [true; 3]);
        for r in 0..6 {
            let z: f64 = (0..3).map(|i| lm.get(r, i).exp()).sum();
            let w: Vec<f64> = (0..3).map(|i| lm.get(r, i).exp() / z).collect();
            assert!((g.value(m).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for c in 0..4 {
                let want: f64 = (0..3).map(|i| w[i] * ms[i].get(r, c)).sum();
                assert!((g.value(ft).get(r, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inactive_streams_get_no_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ms: Vec<Mat> = (0..3).map(|_| rand_mat(&mut rng, 2, 3)).collect();
        let hats = [g.constant(ms[0].clone()), g.constant(ms[1].clone()), g.constant(ms[2].clone())];
        let logits = g.constant(rand_mat(&mut rng, 2, 3));
        let (m, ft) = fuse_bias_from_logits(&mut g, hats, logits, [false, false, true]);
        assert_eq!(g.value(ft), &ms[2]);
        assert_eq!(g.value(m).get(0, 0), 0.0);
    }

    #[test]
    fn debias_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let fm = rand_mat(&mut rng, 3, 3);
        let tm = rand_mat(&mut rng, 3, 3);
        let f = g.constant(fm.clone());
        let zero = g.constant(Mat::zeros(3, 3));
        let d0 = debias(&mut g, f, zero);
        assert_eq!(g.value(d0), &fm);
        let d1 = debias(&mut g, f, f);
        assert!(g.value(d1).data.iter().all(|&v| v == 0.0));
        let t = g.constant(tm.clone());
        let d = debias(&mut g, f, t);
        // F - F_debiased recovers F_tilde
        let back = g.sub(f, d);
        for (a, b) in g.value(back).data.iter().zip(&tm.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_examples() {
        let f = [0.3, -1.2, 2.0];
        assert!((cosine_score(&f, &f) - 1.0).abs() < 1e-8);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        assert!((cosine_score(&f, &neg) + 1.0).abs() < 1e-8);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn contrastive_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // identical pos/neg partners -> ln 2
        let f = g.constant(Mat::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3]]));
        let p = g.constant(Mat::from_rows(&[vec![0.2, 0.1], vec![1.0, 1.0]]));
        let l = feature_contrastive_loss(&mut g, f, p, p, 1.0);
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-9);
        // cos = 1 vs cos = -1 -> log(1 + e^-2)
        let f = g.constant(Mat::from_rows(&[vec![1.0, 0.0]]));
        let same = g.constant(Mat::from_rows(&[vec![2.0, 0.0]]));
        let opp = g.constant(Mat::from_rows(&[vec![-3.0, 0.0]]));
        let l = feature_contrastive_loss(&mut g, f, same, opp, 1.0);
        assert!((g.value(l).item() - (1.0 + (-2f64).exp()).ln()).abs() < 1e-8);
    }

    #[test]
    fn contrastive_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (fm, dm, tm) = (rand_mat(&mut rng, 4, 5), rand_mat(&mut rng, 4, 5), rand_mat(&mut rng, 4, 5));
        let mut oracle = 0.0;
        for t in 0..4 {
            let a = cosine_score(fm.row(t), dm.row(t));
            let b = cosine_score(fm.row(t), tm.row(t));
            oracle -= (a.exp() / (a.exp() + b.exp())).ln();
        }
        oracle /= 4.0;
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (f, d, t) = (g.constant(fm), g.constant(dm), g.constant(tm));
        let l = feature_contrastive_loss(&mut g, f, d, t, 1.0);
        assert!((g.value(l).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn video_bias_model_ignores_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = enc_cfg();
        let dims = BranchDims { d_in: 3, vocab_size: 8, word_dim: 4, d_hidden: 4, encoder: &enc, scaled_similarity: false };
        let m1 = VideoBiasModel::new(&mut store, &dims, &mut rng);
        let clips = rand_mat(&mut rng, 5, 3);
        // the signature has no query argument; two calls on the same video agree
        let run = || {
            let mut g = Graph::new(&store);
            let c = g.constant(clips.clone());
            let f = m1.features(&mut g, c).unwrap();
            g.value(f).clone()
        };
        assert_eq!(run(), run());
        assert_eq!(run().shape(), (5, 4));
    }

    #[test]
    fn branch_gradients_video_and_pos_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = enc_cfg();
        let vocab = Vocab::from_tokens(["person", "holding", "vacuum"]);
        let dims = BranchDims { d_in: 3, vocab_size: vocab.len(), word_dim: 3, d_hidden: 3, encoder: &enc, scaled_similarity: false };
        let m1 = VideoBiasModel::new(&mut store, &dims, &mut rng);
        let m2 = PosBiasModel::new(&mut store, Tag::Bias2, &dims, &mut rng);
        let bim = BiasIdentifier::new(&mut store, 4, 3, &mut rng);
        let dm = DebiasedModule::new(&mut store, 4, &mut rng);
        let fid = store.add("f", Tag::Backbone, rand_mat(&mut rng, 4, 4));
        let clips = rand_mat(&mut rng, 4, 3);
        let nouns = vocab.encode(&["person", "vacuum"], 3);
        let report = check_gradients(&store, 1e-5, |g| {
            let c = g.constant(clips.clone());
            let f1 = m1.features(g, c).unwrap();
            let (cs1, ce1) = m1.head.forward(g, f1);
            let l1 = tsg_loss(g, cs1, ce1, (1, 2), HeadLoss::Bce, 0);
            let f2 = m2.features(g, c, &nouns).unwrap();
            let (cs2, ce2) = m2.head.forward(g, f2);
            let l2 = tsg_loss(g, cs2, ce2, (1, 2), HeadLoss::Bce, 0);
            let h1 = identify_bias(g, f1, &bim.gates[0]);
            let h2 = identify_bias(g, f2, &bim.gates[1]);
            let h3 = identify_bias(g, f2, &bim.gates[2]);
            let (_, ft) = fuse_bias(g, [h1, h2, h3], &bim.fusion, [true; 3]);
            let f = g.param(fid);
            let fd = debias(g, f, ft);
            let ld = debiased_module_loss(g, fd, (1, 2), &dm, HeadLoss::Bce, 0);
            let lc = feature_contrastive_loss(g, f, fd, ft, 1.0);
            let s = g.add(l1, l2);
            let s = g.add(s, ld);
            g.add(s, lc)
        });
        assert!(report.max_rel_error() < 1e-4, "worst {:?}", report.worst());
        assert_eq!(report.coverage(&store), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn contrastive_loss_within_cosine_bounds(
            a in proptest::collection::vec(-3.0f64..3.0, 12),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
            c in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let f = g.constant(Mat::from_vec(3, 4, a));
            let d = g.constant(Mat::from_vec(3, 4, b));
            let t = g.constant(Mat::from_vec(3, 4, c));
            let lv = feature_contrastive_loss(&mut g, f, d, t, 1.0);
            let l = g.value(lv).item();
            let lo = (1.0 + (-2f64).exp()).ln();
            let hi = (1.0 + 2f64.exp()).ln();
            proptest::prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12, "{}", l);
        }
    }
}
