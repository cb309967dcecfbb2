//! Offline mining of contrastive negatives and the sample-level loss.
//!
//! A negative differs from the positive query by exactly one noun or exactly
//! one verb (multiset substitution), with the other word class unchanged.
//! Training pairs the positive video with a negative query and the positive
//! query with a negative video, then asks a match scorer to rank the true
//! pair above both.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, PosTag, QueryAnnotation};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{ParamStore, Tag};

/// Noun and verb tokens of a query, in query order.
pub fn extract_pos_sets(query: &QueryAnnotation) -> (Vec<String>, Vec<String>) {
    let take = |tag| query.tokens_with_tag(tag).into_iter().map(String::from).collect();
    (take(PosTag::Noun), take(PosTag::Verb))
}

/// True when `b` is `a` with exactly one element replaced by a different one.
pub fn single_substitution(a: &[String], b: &[String]) -> bool {
    if a.len() != b.len() || a.is_empty() {
        return false;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for w in a {
        *counts.entry(w).or_default() += 1;
    }
    for w in b {
        *counts.entry(w).or_default() -= 1;
    }
    counts.values().filter(|&&c| c > 0).sum::<i64>() == 1
}

fn same_multiset(a: &[String], b: &[String]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

/// Rule (a) or (b): one noun swapped with verbs fixed, or one verb swapped
/// with nouns fixed.
pub fn is_contrastive_pair(q1: &(Vec<String>, Vec<String>), q2: &(Vec<String>, Vec<String>)) -> bool {
    let a = single_substitution(&q1.0, &q2.0) && same_multiset(&q1.1, &q2.1);
    let b = single_substitution(&q1.1, &q2.1) && same_multiset(&q1.0, &q2.0);
    a != b
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegEntry {
    pub neg_videos: Vec<String>,
    pub neg_queries: Vec<String>,
}

/// Per-sample negatives keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NegativeTable {
    pub entries: BTreeMap<String, NegEntry>,
}

impl NegativeTable {
    pub fn get(&self, sample_id: &str) -> Option<&NegEntry> {
        self.entries.get(sample_id)
    }

    /// Number of samples with at least one negative.
    pub fn covered(&self) -> usize {
        self.entries.values().filter(|e| !e.neg_queries.is_empty()).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

type PosKey = (Vec<String>, Vec<String>);

fn canonical_key(q: &QueryAnnotation) -> PosKey {
    let (mut n, mut v) = extract_pos_sets(q);
    n.sort_unstable();
    v.sort_unstable();
    (n, v)
}

/// Exhaustive mining over distinct `(nouns, verbs)` keys. Samples on the same
/// video are never negatives of each other.
pub fn mine_negatives(dataset: &Dataset) -> NegativeTable {
    let mut groups: BTreeMap<PosKey, Vec<(String, String)>> = BTreeMap::new();
    for s in &dataset.samples {
        groups.entry(canonical_key(&s.query)).or_default().push((s.id.clone(), s.video.id.clone()));
    }
    let keys: Vec<&PosKey> = groups.keys().collect();
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            if is_contrastive_pair(keys[i], keys[j]) {
                partners[i].push(j);
                partners[j].push(i);
            }
        }
    }

    let mut entries = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        for (sid, vid) in &groups[*key] {
            let mut videos = BTreeSet::new();
            let mut queries = BTreeSet::new();
            for &j in &partners[i] {
                for (osid, ovid) in &groups[keys[j]] {
                    if ovid != vid {
                        videos.insert(ovid.clone());
                        queries.insert(osid.clone());
                    }
                }
            }
            let entry = NegEntry { neg_videos: videos.into_iter().collect(), neg_queries: queries.into_iter().collect() };
            entries.insert(sid.clone(), entry);
        }
    }
    NegativeTable { entries }
}

/// Independent uniform draws of a negative video id and a negative query
/// (sample) id.
pub fn sample_negatives<'t>(table: &'t NegativeTable, sample_id: &str, rng: &mut impl Rng) -> (Option<&'t str>, Option<&'t str>) {
    let Some(e) = table.get(sample_id) else {
        return (None, None);
    };
    let mut pick = |xs: &'t [String]| (!xs.is_empty()).then(|| xs[rng.gen_range(0..xs.len())].as_str());
    let v = pick(&e.neg_videos);
    let q = pick(&e.neg_queries);
    (v, q)
}

/// Per-clip match logit, max-pooled over clips.
#[derive(Clone, Debug)]
pub struct MatchScorer {
    pub mlp: Mlp,
}

impl MatchScorer {
    pub fn new(store: &mut ParamStore, d: usize, d_hidden: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, "sampler.align", Tag::Sampler, d, d_hidden, 1, rng) }
    }

    pub fn score(&self, g: &mut Graph, f: Var) -> Var {
        let per_clip = self.mlp.forward(g, f);
        g.max_all(per_clip)
    }
}

/// `-log softmax(g_pos, g_negs...)[0]` over 1x1 score nodes. `None` when no
/// negative is present.
pub fn sample_loss_from_scores(g: &mut Graph, pos: Var, negs: &[Var]) -> Option<Var> {
    if negs.is_empty() {
        return None;
    }
    let mut all = vec![pos];
    all.extend_from_slice(negs);
    let cat = g.concat_rows(&all);
    let lse = g.logsumexp(cat);
    Some(g.sub(lse, pos))
}

pub fn sample_loss(g: &mut Graph, f_pos: Var, f_neg_v: Option<Var>, f_neg_q: Option<Var>, scorer: &MatchScorer) -> Option<Var> {
    let pos = scorer.score(g, f_pos);
    let negs: Vec<Var> = [f_neg_v, f_neg_q].into_iter().flatten().map(|f| scorer.score(g, f)).collect();
    sample_loss_from_scores(g, pos, &negs)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{GroundingSample, RawVideo};
    use crate::gradcheck::check_gradients;
    use crate::tensor::Mat;

    fn query(words: &[(&str, PosTag)]) -> QueryAnnotation {
        QueryAnnotation {
            tokens: words.iter().map(|(w, _)| w.to_string()).collect(),
            pos_tags: words.iter().map(|(_, t)| *t).collect(),
            segment_seconds: (0.0, 1.0),
        }
    }

    fn nv(noun: &str, verb: &str, noun2: &str) -> QueryAnnotation {
        use PosTag::*;
        query(&[(noun, Noun), (verb, Verb), (noun2, Noun)])
    }

    fn dataset(queries: Vec<(String, QueryAnnotation)>) -> Dataset {
        let samples = queries
            .into_iter()
            .map(|(vid, q)| {
                let video = Arc::new(RawVideo { id: vid.clone(), duration: 4.0, features: Mat::zeros(4, 2) });
                let k = 0;
                GroundingSample { id: format!("{vid}#{k}"), video, query: q, clip_segment: (0, 1) }
            })
            .collect();
        Dataset::new(samples, 4).unwrap()
    }

    #[test]
    fn pos_sets_follow_tags() {
        let (n, v) = extract_pos_sets(&nv("person", "holding", "vacuum"));
        assert_eq!(n, ["person", "vacuum"]);
        assert_eq!(v, ["holding"]);
        let (n, v) = extract_pos_sets(&query(&[]));
        assert!(n.is_empty() && v.is_empty());
    }

    #[test]
    fn pos_sets_match_filter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words = ["a", "b", "c", "d", "e"];
        let tags = [PosTag::Noun, PosTag::Verb, PosTag::Other];
        for _ in 0..20 {
            let len = rng.gen_range(0..6);
            let q = query(&(0..len).map(|_| (words[rng.gen_range(0..5)], tags[rng.gen_range(0..3)])).collect::<Vec<_>>());
            let mut on = Vec::new();
            let mut ov = Vec::new();
            for i in 0..q.tokens.len() {
                match q.pos_tags[i] {
                    PosTag::Noun => on.push(q.tokens[i].clone()),
                    PosTag::Verb => ov.push(q.tokens[i].clone()),
                    PosTag::Other => {}
                }
            }
            assert_eq!(extract_pos_sets(&q), (on, ov));
        }
    }

    #[test]
    fn figure_three_pairs_are_mutual_negatives() {
        let ds = dataset(vec![
            ("v1".into(), nv("person", "holding", "vacuum")),
            ("v2".into(), nv("person", "fixing", "vacuum")),
            ("v3".into(), nv("person", "holding", "book")),
            ("v4".into(), nv("dog", "fixing", "book")),
        ]);
        let t = mine_negatives(&ds);
        let q = |id: &str| t.get(id).unwrap().neg_queries.clone();
        assert_eq!(q("v1#0"), ["v2#0", "v3#0"]);
        assert_eq!(q("v2#0"), ["v1#0"]);
        assert_eq!(q("v3#0"), ["v1#0"]);
        assert!(q("v4#0").is_empty());
        assert_eq!(t.get("v1#0").unwrap().neg_videos, ["v2", "v3"]);
    }

    #[test]
    fn multiset_rules() {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert!(single_substitution(&s(&["a", "a"]), &s(&["a", "b"])));
        assert!(!single_substitution(&s(&["a", "a"]), &s(&["b", "b"])));
        assert!(!single_substitution(&s(&["a", "b"]), &s(&["b", "a"])));
        assert!(!single_substitution(&s(&["a"]), &s(&["a", "b"])));
        assert!(!single_substitution(&s(&[]), &s(&[])));
    }

    fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<(String, QueryAnnotation)> {
        let nouns = ["man", "cup", "door"];
        let verbs = ["open", "hold"];
        (0..n)
            .map(|i| {
                let nn = rng.gen_range(1..3);
                let mut w: Vec<(&str, PosTag)> = (0..nn).map(|_| (nouns[rng.gen_range(0..3)], PosTag::Noun)).collect();
                w.insert(rng.gen_range(0..=w.len()), (verbs[rng.gen_range(0..2)], PosTag::Verb));
                // the last four queries share one video
                (format!("vid{:02}", i.min(n - 4)), query(&w))
            })
            .collect()
    }

    #[test]
    fn mining_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut corpus = random_corpus(&mut rng, 30);
        // disambiguate sample ids for videos with several queries
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let samples: Vec<GroundingSample> = corpus
            .drain(..)
            .map(|(vid, q)| {
                let k = seen.entry(vid.clone()).or_default();
                let id = format!("{vid}#{k}");
                *k += 1;
                let video = Arc::new(RawVideo { id: vid, duration: 4.0, features: Mat::zeros(4, 2) });
                GroundingSample { id, video, query: q, clip_segment: (0, 1) }
            })
            .collect();
        let ds = Dataset::new(samples.clone(), 4).unwrap();
        let table = mine_negatives(&ds);

        for a in &samples {
            let mut want_q = Vec::new();
            let mut want_v = Vec::new();
            for b in &samples {
                if a.video.id == b.video.id {
                    continue;
                }
                let (an, av) = extract_pos_sets(&a.query);
                let (bn, bv) = extract_pos_sets(&b.query);
                let mut sa = an.clone();
                sa.sort();
                let mut sb = bn.clone();
                sb.sort();
                let noun_diff = sa.len() == sb.len() && {
                    let mut rest = sb.clone();
                    let mut miss = 0;
                    for w in &sa {
                        match rest.iter().position(|x| x == w) {
                            Some(p) => {
                                rest.remove(p);
                            }
                            None => miss += 1,
                        }
                    }
                    miss == 1
                };
                let verbs_same = {
                    let (mut x, mut y) = (av.clone(), bv.clone());
                    x.sort();
                    y.sort();
                    x == y
                };
                let nouns_same = sa == sb;
                let verb_diff = av.len() == 1 && bv.len() == 1 && av != bv;
                if (noun_diff && verbs_same) || (verb_diff && nouns_same) {
                    want_q.push(b.id.clone());
                    want_v.push(b.video.id.clone());
                }
            }
            want_q.sort();
            want_v.sort();
            want_v.dedup();
            let got = table.get(&a.id).unwrap();
            assert_eq!(got.neg_queries, want_q, "{}", a.id);
            assert_eq!(got.neg_videos, want_v, "{}", a.id);
        }
        assert!(table.covered() > 5);
    }

    #[test]
    fn mining_is_symmetric_and_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus: Vec<_> = random_corpus(&mut rng, 25).into_iter().enumerate().map(|(i, (_, q))| (format!("u{i:02}"), q)).collect();
        let t1 = mine_negatives(&dataset(corpus.clone()));
        let mut rev = corpus.clone();
        rev.reverse();
        let t2 = mine_negatives(&dataset(rev));
        assert_eq!(t1, t2);
        for (id, e) in &t1.entries {
            assert!(!e.neg_queries.contains(id));
            for other in &e.neg_queries {
                assert!(t1.get(other).unwrap().neg_queries.contains(id));
            }
        }
    }

    #[test]
    fn table_json_round_trip_and_shape() {
        let ds = dataset(vec![("v1".into(), nv("person", "holding", "vacuum")), ("v2".into(), nv("person", "fixing", "vacuum"))]);
        let t = mine_negatives(&ds);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("neg.json");
        t.save(&p).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(raw["v1#0"]["neg_videos"][0], "v2");
        assert_eq!(raw["v1#0"]["neg_queries"][0], "v2#0");
        assert_eq!(NegativeTable::load(&p).unwrap(), t);
    }

    #[test]
    fn draws_handle_empty_and_singleton_lists() {
        let mut t = NegativeTable::default();
        t.entries.insert("a".into(), NegEntry::default());
        t.entries.insert("b".into(), NegEntry { neg_videos: vec!["x".into()], neg_queries: vec!["x#0".into()] });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negatives(&t, "a", &mut rng), (None, None));
        assert_eq!(sample_negatives(&t, "missing", &mut rng), (None, None));
        for _ in 0..5 {
            assert_eq!(sample_negatives(&t, "b", &mut rng), (Some("x"), Some("x#0")));
        }
    }

    #[test]
    fn draws_are_uniform() {
        let names: Vec<String> = (0..4).map(|i| format!("v{i}")).collect();
        let mut t = NegativeTable::default();
        t.entries.insert("s".into(), NegEntry { neg_videos: names.clone(), neg_queries: vec![] });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(sample_negatives(&t, "s", &mut rng).0.unwrap().to_string()).or_insert(0usize) += 1;
        }
        let mean = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for name in &names {
            let c = counts[name] as f64;
            assert!((c - mean).abs() < 3.0 * sigma, "{name}: {c}");
        }
    }

    #[test]
    fn sample_loss_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Mat::scalar(0.7));
        let l3 = sample_loss_from_scores(&mut g, s, &[s, s]).unwrap();
        assert!((g.value(l3).item() - 3f64.ln()).abs() < 1e-9);
        let l2 = sample_loss_from_scores(&mut g, s, &[s]).unwrap();
        assert!((g.value(l2).item() - 2f64.ln()).abs() < 1e-9);
        assert!(sample_loss_from_scores(&mut g, s, &[]).is_none());
        let hi = g.constant(Mat::scalar(60.0));
        let lo = g.constant(Mat::scalar(-60.0));
        let l0 = sample_loss_from_scores(&mut g, hi, &[lo, lo]).unwrap();
        assert!(g.value(l0).item() < 1e-40);
    }

    #[test]
    fn lowering_a_negative_lowers_the_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.constant(Mat::scalar(0.3));
        let n1 = g.constant(Mat::scalar(0.5));
        let n2 = g.constant(Mat::scalar(-0.2));
        let n1b = g.constant(Mat::scalar(0.4));
        let a = sample_loss_from_scores(&mut g, p, &[n1, n2]).unwrap();
        let b = sample_loss_from_scores(&mut g, p, &[n1b, n2]).unwrap();
        assert!(g.value(b).item() < g.value(a).item());
        assert!(g.value(b).item() >= 0.0);
    }

    #[test]
    fn scorer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let scorer = MatchScorer::new(&mut store, 4, 3, &mut rng);
        let mk = |rng: &mut ChaCha8Rng| Mat::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let report = check_gradients(&store, 1e-5, |g| {
            let (a, b, c) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
            sample_loss(g, a, Some(b), Some(c), &scorer).unwrap()
        });
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
        assert_eq!(report.coverage(&store), 1.0);
    }
}
