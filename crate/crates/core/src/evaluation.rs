//! Downstream evaluation: classifier metrics and augmentation quality.
//!
//! Augmentation value is measured extrinsically — train a small reference
//! classifier on (possibly augmented) data and score it on a held-out test
//! split — and intrinsically, by how toxic the generated text itself is
//! under a lexicon oracle. Macro-F1 treats classes equally regardless of
//! support; hate-F1 restricts the macro average to the toxic classes.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::corpus::{Corpus, LabeledExample, TokenSequence, Vocabulary};
use crate::embedding::{EmbeddingBackend, EmbeddingVector};
use crate::mlp::Mlp;
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Confusion matrix and F1
// ---------------------------------------------------------------------------

/// Square confusion matrix indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Domain("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix { counts: vec![vec![0; num_classes]; num_classes] })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Domain("confusion matrix needs at least one class".into()));
        }
        let n = counts.len();
        if counts.iter().any(|row| row.len() != n) {
            return Err(Error::Domain("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes();
        if true_class >= n || predicted >= n {
            return Err(Error::Domain(format!(
                "class pair ({true_class}, {predicted}) outside {n} classes"
            )));
        }
        self.counts[true_class][predicted] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes()).map(|i| self.counts[i][i]).sum();
        correct as f64 / total as f64
    }
}

/// Per-class F1 scores. A class with zero precision-plus-recall denominator
/// (no true examples and no predictions, or no true positives at all) scores
/// exactly 0 rather than NaN.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    let n = cm.num_classes();
    (0..n)
        .map(|c| {
            let tp = cm.count(c, c) as f64;
            let predicted: f64 = (0..n).map(|t| cm.count(t, c) as f64).sum();
            let actual: f64 = (0..n).map(|p| cm.count(c, p) as f64).sum();
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = per_class_f1(cm);
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// Unweighted mean of per-class F1 over the given class subset (typically
/// the toxic classes).
pub fn hate_f1(cm: &ConfusionMatrix, class_ids: &[usize]) -> Result<f64> {
    if class_ids.is_empty() {
        return Err(Error::Domain("hate-F1 needs at least one class id".into()));
    }
    let mut seen = HashSet::new();
    for &c in class_ids {
        if c >= cm.num_classes() {
            return Err(Error::Domain(format!(
                "class id {c} outside {} classes",
                cm.num_classes()
            )));
        }
        if !seen.insert(c) {
            return Err(Error::Domain(format!("class id {c} listed twice")));
        }
    }
    let f1 = per_class_f1(cm);
    Ok(class_ids.iter().map(|&c| f1[c]).sum::<f64>() / class_ids.len() as f64)
}

// ---------------------------------------------------------------------------
// Toxicity scoring
// ---------------------------------------------------------------------------

/// Scores a sequence's toxicity in `[0, 1]`.
pub trait ToxicityOracle {
    fn score(&self, seq: &TokenSequence) -> f64;
}

/// Lexicon oracle: the fraction of tokens that belong to a toxic word list.
pub struct LexiconOracle {
    toxic_ids: HashSet<u32>,
}

impl LexiconOracle {
    pub fn new(toxic_ids: impl IntoIterator<Item = u32>) -> Self {
        LexiconOracle { toxic_ids: toxic_ids.into_iter().collect() }
    }

    /// Builds the lexicon from words, ignoring any word missing from the
    /// vocabulary.
    pub fn from_words<S: AsRef<str>>(vocab: &Vocabulary, words: &[S]) -> Self {
        let ids = words.iter().filter_map(|w| vocab.id_of(w.as_ref()));
        LexiconOracle::new(ids)
    }

    pub fn lexicon_size(&self) -> usize {
        self.toxic_ids.len()
    }
}

impl ToxicityOracle for LexiconOracle {
    fn score(&self, seq: &TokenSequence) -> f64 {
        let total = seq.ids().len();
        let toxic = seq.ids().iter().filter(|t| self.toxic_ids.contains(t)).count();
        toxic as f64 / total as f64
    }
}

/// Mean oracle score over a set of sequences.
pub fn avg_toxicity<'a, I>(seqs: I, oracle: &dyn ToxicityOracle) -> Result<f64>
where
    I: IntoIterator<Item = &'a TokenSequence>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for seq in seqs {
        let s = oracle.score(seq);
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("oracle score {s} outside [0, 1]")));
        }
        sum += s;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("average toxicity over an empty set".into()));
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Downstream reference classifier
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct DownstreamConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig { hidden: 32, epochs: 40, lr: 0.5, batch_size: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct DownstreamReport {
    pub confusion: ConfusionMatrix,
    pub macro_f1: f64,
    pub hate_f1: f64,
    pub accuracy: f64,
}

/// Trains a fresh reference classifier on the train corpus and scores it on
/// the test corpus. Heads cover the real classes (neutral plus toxic); the
/// run is fully determined by the seed.
pub fn train_downstream(
    train: &Corpus,
    test: &Corpus,
    backend: &Arc<dyn EmbeddingBackend>,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<DownstreamReport> {
    if train.examples().is_empty() {
        return Err(Error::Config("downstream training corpus is empty".into()));
    }
    if test.examples().is_empty() {
        return Err(Error::Config("downstream test corpus is empty".into()));
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("downstream hidden size and batch size must be positive".into()));
    }
    let k = train.labels().k();
    if test.labels().k() != k {
        return Err(Error::Config(format!(
            "test label space has {} toxic classes, train has {k}",
            test.labels().k()
        )));
    }
    let train_classes: HashSet<u32> = train.class_counts().keys().copied().collect();
    for class in test.class_counts().keys() {
        if !train_classes.contains(class) {
            return Err(Error::Config(format!(
                "test class {class} has no training examples"
            )));
        }
    }

    let embed_all = |c: &Corpus| -> Result<Vec<EmbeddingVector>> {
        c.examples().iter().map(|ex| backend.embed(&ex.seq)).collect()
    };
    let train_feats = embed_all(train)?;
    let test_feats = embed_all(test)?;

    let mut model = Mlp::new(backend.dim(), cfg.hidden, k + 1, seed)?;
    let mut rng = rng_from(seed, &[stream::DOWNSTREAM]);
    let mut order: Vec<usize> = (0..train.examples().len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (train_feats[i].values(), train.examples()[i].label as usize))
                .collect();
            model.train_step(&batch, cfg.lr)?;
        }
    }

    let mut confusion = ConfusionMatrix::new(k + 1)?;
    for (ex, feat) in test.examples().iter().zip(&test_feats) {
        let predicted = model.predict(feat.values())?;
        confusion.record(ex.label as usize, predicted)?;
    }
    let toxic_ids: Vec<usize> = train.labels().toxic_ids().map(|c| c as usize).collect();
    let report = DownstreamReport {
        macro_f1: macro_f1(&confusion),
        hate_f1: hate_f1(&confusion, &toxic_ids)?,
        accuracy: confusion.accuracy(),
        confusion,
    };
    Ok(report)
}

// ---------------------------------------------------------------------------
// Oversampling baseline
// ---------------------------------------------------------------------------

/// Fills a per-class augmentation budget by duplicating kept real examples,
/// drawn with replacement. The baseline that generated augmentation competes
/// against.
pub fn oversample_baseline(
    kept: &Corpus,
    budget: &BTreeMap<u32, usize>,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (&class, &n) in budget {
        if n == 0 {
            continue;
        }
        let pool = kept.class_indices(class);
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "cannot oversample class {class}: no kept examples"
            )));
        }
        let mut rng = rng_from(seed, &[stream::OVERSAMPLE, class as u64]);
        for _ in 0..n {
            let idx = pool[rand::Rng::random_range(&mut rng, 0..pool.len())];
            out.push(kept.examples()[idx].clone());
        }
    }
    Ok(out)
}
