use std::collections::BTreeMap;

use super::{Dataset, PosTag};

pub type WordCounts = BTreeMap<String, usize>;

/// Frequency of every NOUN and VERB token over a dataset's queries.
pub fn word_counts(train: &Dataset) -> WordCounts {
    let mut counts = WordCounts::new();
    for s in &train.samples {
        for (tok, tag) in s.query.tokens.iter().zip(&s.query.pos_tags) {
            if matches!(tag, PosTag::Noun | PosTag::Verb) {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// A sample is rare iff one of its NOUN/VERB tokens occurs fewer than
/// `threshold` times in `train_counts` (unseen words count as zero).
pub fn is_rare(tokens: &[String], tags: &[PosTag], train_counts: &WordCounts, threshold: usize) -> bool {
    tokens
        .iter()
        .zip(tags)
        .filter(|(_, t)| matches!(t, PosTag::Noun | PosTag::Verb))
        .any(|(w, _)| train_counts.get(w).copied().unwrap_or(0) < threshold)
}

pub fn split_rare_common(dataset: &Dataset, train_counts: &WordCounts, threshold: usize) -> (Dataset, Dataset) {
    let (rare, common): (Vec<usize>, Vec<usize>) = (0..dataset.len())
        .partition(|&i| is_rare(&dataset.samples[i].query.tokens, &dataset.samples[i].query.pos_tags, train_counts, threshold));
    (dataset.select(&rare), dataset.select(&common))
}
