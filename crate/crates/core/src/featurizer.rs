//! Character n-gram features: per-order vocabularies of the most frequent
//! n-grams and relative-frequency vectors over them.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::CsrMatrix;

/// One subject's full concatenated text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub user_id: String,
    pub text: String,
}

impl Document {
    pub fn new(user_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            user_id: user_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturizerConfig {
    /// n-gram orders, kept sorted and unique.
    pub orders: BTreeSet<usize>,
    /// n-grams retained per order.
    pub top_k: usize,
    pub lowercase: bool,
    pub collapse_whitespace: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            orders: (1..=5).collect(),
            top_k: 5000,
            lowercase: true,
            collapse_whitespace: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() || self.orders.contains(&0) {
            return Err(Error::InvalidValue {
                key: "orders".into(),
                msg: "must be a non-empty set of orders >= 1".into(),
            });
        }
        if self.top_k == 0 {
            return Err(Error::InvalidValue {
                key: "top_k".into(),
                msg: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Width of every feature vector: one block of `top_k` slots per order.
    pub fn dim(&self) -> usize {
        self.orders.len() * self.top_k
    }
}

/// Lowercases and collapses whitespace according to `cfg`, then trims.
pub fn normalize_text(raw: &str, cfg: &FeaturizerConfig) -> Result<String> {
    let lowered;
    let text = if cfg.lowercase {
        lowered = raw.to_lowercase();
        lowered.as_str()
    } else {
        raw
    };
    let out = if cfg.collapse_whitespace {
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        text.trim().to_string()
    };
    if out.is_empty() {
        return Err(Error::EmptyDocument { user: None });
    }
    Ok(out)
}

/// Counts every contiguous `order`-character window (stride 1).
pub fn count_ngrams(doc: &str, order: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if order == 0 {
        return counts;
    }
    let bounds: Vec<usize> = doc
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(doc.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    if n_chars < order {
        return counts;
    }
    for start in 0..=n_chars - order {
        *counts
            .entry(doc[bounds[start]..bounds[start + order]].to_string())
            .or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabEntry {
    pub ngram: String,
    pub count: u64,
    pub slot: usize,
}

/// Retained n-grams per order. Slots are dense: order block `b` (in sorted
/// order) occupies `[b * top_k, (b + 1) * top_k)`, and entry `i` of that
/// block sits at slot `b * top_k + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    cfg: FeaturizerConfig,
    blocks: Vec<(usize, Vec<VocabEntry>)>,
    index: HashMap<(usize, String), usize>,
}

impl Vocabulary {
    /// Assembles a vocabulary from explicit per-order entry lists (as loaded
    /// from disk). Entries are re-sorted and slots re-derived, so a file
    /// whose slots disagree with the ordering rule is rejected.
    pub fn from_entries(
        cfg: FeaturizerConfig,
        entries: Vec<(usize, String, u64, usize)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut per_order: HashMap<usize, Vec<(String, u64, usize)>> = HashMap::new();
        for (order, ngram, count, slot) in entries {
            if !cfg.orders.contains(&order) {
                return Err(Error::Invalid(format!(
                    "vocabulary entry of order {order} not in configured orders"
                )));
            }
            per_order
                .entry(order)
                .or_default()
                .push((ngram, count, slot));
        }
        let mut blocks = Vec::new();
        for (b, &order) in cfg.orders.iter().enumerate() {
            let mut list = per_order.remove(&order).unwrap_or_default();
            if list.len() > cfg.top_k {
                return Err(Error::Invalid(format!(
                    "order {order} has {} entries, more than top_k",
                    list.len()
                )));
            }
            list.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let mut block = Vec::with_capacity(list.len());
            for (i, (ngram, count, slot)) in list.into_iter().enumerate() {
                let expected = b * cfg.top_k + i;
                if slot != expected {
                    return Err(Error::Invalid(format!(
                        "n-gram {ngram:?} has slot {slot}, expected {expected}"
                    )));
                }
                block.push(VocabEntry { ngram, count, slot });
            }
            blocks.push((order, block));
        }
        Ok(Self::assemble(cfg, blocks))
    }

    fn assemble(cfg: FeaturizerConfig, blocks: Vec<(usize, Vec<VocabEntry>)>) -> Self {
        let index = blocks
            .iter()
            .flat_map(|(order, entries)| {
                entries
                    .iter()
                    .map(move |e| ((*order, e.ngram.clone()), e.slot))
            })
            .collect();
        Vocabulary { cfg, blocks, index }
    }

    pub fn config(&self) -> &FeaturizerConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    /// Entries of one order, sorted by (count desc, n-gram asc).
    pub fn entries(&self, order: usize) -> &[VocabEntry] {
        self.blocks
            .iter()
            .find(|(o, _)| *o == order)
            .map_or(&[][..], |(_, e)| e.as_slice())
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &[VocabEntry])> {
        self.blocks.iter().map(|(o, e)| (*o, e.as_slice()))
    }

    pub fn slot(&self, order: usize, ngram: &str) -> Option<usize> {
        self.index.get(&(order, ngram.to_string())).copied()
    }

    /// Label of every slot, `"<order>:<ngram>"`. Unused slots (orders with
    /// fewer than `top_k` distinct n-grams) are `"<order>#<index>"`.
    pub fn slot_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.dim());
        for (order, entries) in &self.blocks {
            for i in 0..self.cfg.top_k {
                match entries.get(i) {
                    Some(e) => labels.push(format!("{order}:{}", e.ngram)),
                    None => labels.push(format!("{order}#{i}")),
                }
            }
        }
        labels
    }
}

fn merge_counts(mut a: HashMap<String, u64>, b: HashMap<String, u64>) -> HashMap<String, u64> {
    if a.len() < b.len() {
        return merge_counts(b, a);
    }
    for (k, v) in b {
        *a.entry(k).or_insert(0) += v;
    }
    a
}

fn top_k(counts: HashMap<String, u64>, k: usize) -> Vec<(String, u64)> {
    let mut all: Vec<(String, u64)> = counts.into_iter().collect();
    all.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Builds the per-order top-`k` vocabulary from summed corpus counts.
///
/// Counting runs in parallel per document; the merge is a sum and the final
/// ordering is total, so the result does not depend on thread count or
/// document order.
pub fn build_vocabulary(corpus: &[Document], cfg: &FeaturizerConfig) -> Result<Vocabulary> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let normalized: Vec<String> = corpus
        .par_iter()
        .map(|d| {
            normalize_text(&d.text, cfg).map_err(|_| Error::EmptyDocument {
                user: Some(d.user_id.clone()),
            })
        })
        .collect::<Result<_>>()?;
    let mut blocks = Vec::with_capacity(cfg.orders.len());
    for (b, &order) in cfg.orders.iter().enumerate() {
        let counts = normalized
            .par_iter()
            .map(|text| {
                count_ngrams(text, order)
                    .into_iter()
                    .map(|(k, v)| (k, v as u64))
                    .collect::<HashMap<_, _>>()
            })
            .reduce(HashMap::new, merge_counts);
        let entries = top_k(counts, cfg.top_k)
            .into_iter()
            .enumerate()
            .map(|(i, (ngram, count))| VocabEntry {
                ngram,
                count,
                slot: b * cfg.top_k + i,
            })
            .collect();
        blocks.push((order, entries));
    }
    Ok(Vocabulary::assemble(cfg.clone(), blocks))
}

/// Relative n-gram frequencies of one document over the vocabulary's slots.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

/// Sparse relative-frequency representation of one already-normalized text:
/// (slot, value) pairs in increasing slot order.
fn featurize_normalized(text: &str, vocab: &Vocabulary) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let n_chars = text.chars().count();
    for (order, _) in vocab.blocks() {
        if n_chars < order {
            continue;
        }
        let total = (n_chars - order + 1) as f64;
        let mut hits: Vec<(usize, f64)> = count_ngrams(text, order)
            .into_iter()
            .filter_map(|(g, c)| vocab.slot(order, &g).map(|s| (s, c as f64 / total)))
            .collect();
        hits.sort_unstable_by_key(|&(s, _)| s);
        out.extend(hits);
    }
    out
}

/// Dense feature vector of one document. The denominator of each slot is
/// the number of n-grams of that order in the document, retained or not.
pub fn featurize(doc: &Document, vocab: &Vocabulary) -> Result<FeatureVector> {
    let text = normalize_text(&doc.text, vocab.config()).map_err(|_| Error::EmptyDocument {
        user: Some(doc.user_id.clone()),
    })?;
    let mut values = vec![0.0; vocab.dim()];
    for (slot, v) in featurize_normalized(&text, vocab) {
        values[slot] = v;
    }
    Ok(FeatureVector { values })
}

/// Featurizes a corpus straight into sparse rows, in corpus order.
pub fn featurize_corpus(docs: &[Document], vocab: &Vocabulary) -> Result<CsrMatrix> {
    let rows: Vec<Vec<(usize, f64)>> = docs
        .par_iter()
        .map(|d| {
            normalize_text(&d.text, vocab.config())
                .map(|t| featurize_normalized(&t, vocab))
                .map_err(|_| Error::EmptyDocument {
                    user: Some(d.user_id.clone()),
                })
        })
        .collect::<Result<_>>()?;
    let mut m = CsrMatrix::empty(vocab.dim());
    for row in rows {
        m.push_row(row)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_order(order: usize, top_k: usize) -> FeaturizerConfig {
        FeaturizerConfig {
            orders: [order].into_iter().collect(),
            top_k,
            ..FeaturizerConfig::default()
        }
    }

    #[test]
    fn normalize_examples() {
        let cfg = FeaturizerConfig::default();
        assert_eq!(normalize_text("Ab  C", &cfg).unwrap(), "ab c");
        assert_eq!(normalize_text("x", &cfg).unwrap(), "x");
        assert!(matches!(
            normalize_text("  \t\n ", &cfg),
            Err(Error::EmptyDocument { .. })
        ));
    }

    #[test]
    fn normalize_flags_off() {
        let cfg = FeaturizerConfig {
            lowercase: false,
            collapse_whitespace: false,
            ..FeaturizerConfig::default()
        };
        assert_eq!(normalize_text(" Ab  C\n", &cfg).unwrap(), "Ab  C");
    }

    #[test]
    fn count_examples() {
        let c = count_ngrams("abab", 2);
        assert_eq!(c.len(), 2);
        assert_eq!(c["ab"], 2);
        assert_eq!(c["ba"], 1);
        assert!(count_ngrams("a", 3).is_empty());
        let c = count_ngrams("abc", 1);
        assert_eq!((c["a"], c["b"], c["c"]), (1, 1, 1));
    }

    #[test]
    fn count_handles_multibyte() {
        let c = count_ngrams("héé", 2);
        assert_eq!(c["hé"], 1);
        assert_eq!(c["éé"], 1);
    }

    #[test]
    fn vocabulary_hand_count() {
        let corpus = [Document::new("u1", "abab"), Document::new("u2", "abba")];
        let v = build_vocabulary(&corpus, &cfg_order(2, 2)).unwrap();
        let e = v.entries(2);
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].ngram.as_str(), e[0].count, e[0].slot), ("ab", 3, 0));
        assert_eq!((e[1].ngram.as_str(), e[1].count, e[1].slot), ("ba", 2, 1));
        assert_eq!(v.slot(2, "bb"), None);
    }

    #[test]
    fn vocabulary_tie_keeps_lexicographically_smaller() {
        // every bigram occurs once; only two survive
        let corpus = [Document::new("u", "dcba")];
        let v = build_vocabulary(&corpus, &cfg_order(2, 2)).unwrap();
        let kept: Vec<&str> = v.entries(2).iter().map(|e| e.ngram.as_str()).collect();
        assert_eq!(kept, ["ba", "cb"]);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(matches!(
            build_vocabulary(&[], &FeaturizerConfig::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn featurize_hand_example() {
        let corpus = [Document::new("u", "abab")];
        let v = build_vocabulary(&corpus, &cfg_order(2, 2)).unwrap();
        let fv = featurize(&corpus[0], &v).unwrap();
        assert_eq!(fv.values, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn featurize_zero_for_short_or_unseen() {
        let cfg = FeaturizerConfig {
            orders: [1, 3].into_iter().collect(),
            top_k: 3,
            ..FeaturizerConfig::default()
        };
        let v = build_vocabulary(&[Document::new("a", "abcabc")], &cfg).unwrap();
        let fv = featurize(&Document::new("b", "zz"), &v).unwrap();
        assert!(fv.values.iter().all(|&x| x == 0.0));
        assert_eq!(fv.values.len(), 6);
    }

    #[test]
    fn slot_labels_cover_every_slot() {
        let cfg = FeaturizerConfig {
            orders: [1, 2].into_iter().collect(),
            top_k: 4,
            ..FeaturizerConfig::default()
        };
        let v = build_vocabulary(&[Document::new("a", "aab")], &cfg).unwrap();
        let labels = v.slot_labels();
        assert_eq!(labels.len(), 8);
        assert_eq!(labels[0], "1:a");
        assert_eq!(labels[2], "1#2");
        assert_eq!(labels[4], "2:aa");
    }

    #[test]
    fn from_entries_rejects_bad_slots() {
        let cfg = cfg_order(2, 2);
        let ok = Vocabulary::from_entries(
            cfg.clone(),
            vec![(2, "ab".into(), 3, 0), (2, "ba".into(), 2, 1)],
        );
        assert!(ok.is_ok());
        let bad = Vocabulary::from_entries(cfg, vec![(2, "ab".into(), 3, 1)]);
        assert!(bad.is_err());
    }
}
