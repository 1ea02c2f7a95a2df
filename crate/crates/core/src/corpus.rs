//! Datasets: labels, vocabulary, tokenized examples, and the operations that
//! produce training corpora (JSONL loading, stratified splits, low-resource
//! simulation, and a synthetic lexicon task for controlled experiments).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// Sequence-start marker fed to the generator before the first real token.
pub const BEGIN_TOKEN: u32 = 0;
/// Learned stop marker; sampling a sequence ends when the generator emits it.
pub const END_TOKEN: u32 = 1;
/// Padding id reserved for fixed-width batch layouts.
pub const PAD_TOKEN: u32 = 2;
/// Catch-all id for words outside a fixed vocabulary.
pub const UNK_TOKEN: u32 = 3;
/// Content token ids start here.
pub const RESERVED_TOKENS: u32 = 4;

/// Class id of the neutral (non-toxic) class. Toxic classes are `1..=k` and
/// the discriminator's fake head sits at `k + 1`.
pub const NEUTRAL_CLASS: u32 = 0;

// ---------------------------------------------------------------------------
// Labels

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Neutral,
    Toxic,
    Fake,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassLabel {
    pub id: u32,
    pub kind: LabelKind,
    pub name: String,
}

/// The full class space of a run: neutral at id 0, the `k` toxic classes at
/// ids `1..=k`, and a reserved fake class at id `k + 1` used only by the
/// discriminator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    /// Names indexed by class id; the last entry is the fake class.
    names: Vec<String>,
}

/// Reserved name for the discriminator's fake class.
pub const FAKE_LABEL_NAME: &str = "fake";

impl LabelSpace {
    pub fn new(neutral: &str, toxic: &[String]) -> Result<Self> {
        if toxic.is_empty() {
            return Err(Error::Config("label space needs at least one toxic class".into()));
        }
        let mut names = Vec::with_capacity(toxic.len() + 2);
        names.push(neutral.to_string());
        names.extend(toxic.iter().cloned());
        names.push(FAKE_LABEL_NAME.to_string());
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Schema("empty label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate label name {name:?}")));
            }
        }
        Ok(LabelSpace { names })
    }

    /// Number of toxic classes.
    pub fn k(&self) -> usize {
        self.names.len() - 2
    }

    /// Discriminator head count: neutral + toxic classes + fake.
    pub fn num_heads(&self) -> usize {
        self.names.len()
    }

    pub fn fake_id(&self) -> u32 {
        (self.names.len() - 1) as u32
    }

    pub fn kind_of(&self, id: u32) -> Result<LabelKind> {
        match id {
            NEUTRAL_CLASS => Ok(LabelKind::Neutral),
            _ if id == self.fake_id() => Ok(LabelKind::Fake),
            _ if (id as usize) < self.names.len() => Ok(LabelKind::Toxic),
            _ => Err(Error::State(format!("class id {id} outside label space"))),
        }
    }

    pub fn name_of(&self, id: u32) -> Result<&str> {
        self.names
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::State(format!("class id {id} outside label space")))
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn label(&self, id: u32) -> Result<ClassLabel> {
        Ok(ClassLabel { id, kind: self.kind_of(id)?, name: self.name_of(id)?.to_string() })
    }

    /// Ids of real classes: neutral plus all toxic classes.
    pub fn real_ids(&self) -> impl Iterator<Item = u32> {
        0..=(self.k() as u32)
    }

    pub fn toxic_ids(&self) -> impl Iterator<Item = u32> {
        1..=(self.k() as u32)
    }

    /// Rejects the fake id and anything outside the space; real examples may
    /// only carry neutral or toxic labels.
    pub fn validate_real(&self, id: u32) -> Result<()> {
        match self.kind_of(id)? {
            LabelKind::Fake => Err(Error::Schema(format!(
                "class id {id} is the reserved fake class and cannot label an example"
            ))),
            _ => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;
    fn try_from(names: Vec<String>) -> Result<Self> {
        if names.len() < 3 || names.last().map(String::as_str) != Some(FAKE_LABEL_NAME) {
            return Err(Error::Schema("label space must end with the fake class".into()));
        }
        let toxic: Vec<String> = names[1..names.len() - 1].to_vec();
        LabelSpace::new(&names[0], &toxic)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Vec<String> {
        space.names
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Bijective word/id mapping with fixed reserved ids below
/// [`RESERVED_TOKENS`]. Content ids follow first-appearance order, which makes
/// vocabulary construction deterministic for a given input.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit word list. Words must be unique,
    /// non-empty, and free of internal whitespace.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary { words: Vec::new(), index: HashMap::new() };
        for word in words {
            let word = word.into();
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid vocabulary word {word:?}")));
            }
            if vocab.index.contains_key(&word) {
                return Err(Error::Schema(format!("duplicate vocabulary word {word:?}")));
            }
            vocab.push(word);
        }
        Ok(vocab)
    }

    /// Builds a vocabulary from raw texts using the run tokenizer
    /// (lowercase, whitespace split), keeping first-appearance order.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Vocabulary { words: Vec::new(), index: HashMap::new() };
        for text in texts {
            for word in tokenize(text) {
                if !vocab.index.contains_key(&word) {
                    vocab.push(word);
                }
            }
        }
        vocab
    }

    fn push(&mut self, word: String) {
        let id = RESERVED_TOKENS + self.words.len() as u32;
        self.index.insert(word.clone(), id);
        self.words.push(word);
    }

    /// Total id count including the reserved ids.
    pub fn total_size(&self) -> usize {
        RESERVED_TOKENS as usize + self.words.len()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        match id {
            BEGIN_TOKEN => Ok("<begin>"),
            END_TOKEN => Ok("<end>"),
            PAD_TOKEN => Ok("<pad>"),
            UNK_TOKEN => Ok("<unk>"),
            _ => self
                .words
                .get((id - RESERVED_TOKENS) as usize)
                .map(String::as_str)
                .ok_or_else(|| Error::State(format!("token id {id} outside vocabulary"))),
        }
    }

    /// Token ids for a text; words outside the vocabulary map to
    /// [`UNK_TOKEN`]. May be empty for whitespace-only input.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|w| self.id_of(&w).unwrap_or(UNK_TOKEN)).collect()
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let words: Vec<&str> = seq.ids().iter().map(|&id| self.word(id)).collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    /// Ids of all content words, in id order.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> {
        RESERVED_TOKENS..(self.total_size() as u32)
    }

    /// Stable content hash; checkpoints embed it so that loading against a
    /// different vocabulary fails loudly.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for word in &self.words {
            hasher.update(word.as_bytes());
            hasher.update([0x1f]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocabulary::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Vec<String> {
        vocab.words
    }
}

/// Run tokenizer: lowercase, split on Unicode whitespace.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

// ---------------------------------------------------------------------------
// Examples

/// Non-empty list of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Schema("empty token sequence".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate_for(&self, vocab: &Vocabulary) -> Result<()> {
        for &id in &self.ids {
            if id as usize >= vocab.total_size() {
                return Err(Error::Schema(format!(
                    "token id {id} outside vocabulary of size {}",
                    vocab.total_size()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Generated,
    LlmNeutral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub seq: TokenSequence,
    pub label: u32,
    pub source: Source,
}

// ---------------------------------------------------------------------------
// Corpus

/// A labeled dataset bound to one vocabulary and one label space.
#[derive(Clone, Debug)]
pub struct Corpus {
    labels: Arc<LabelSpace>,
    vocab: Arc<Vocabulary>,
    examples: Vec<LabeledExample>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels && self.vocab == other.vocab && self.examples == other.examples
    }
}

impl Corpus {
    pub fn new(
        labels: Arc<LabelSpace>,
        vocab: Arc<Vocabulary>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            labels.validate_real(ex.label)?;
            ex.seq.validate_for(&vocab)?;
            class_index.entry(ex.label).or_default().push(i);
        }
        Ok(Corpus { labels, vocab, examples, class_index })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn labels(&self) -> &Arc<LabelSpace> {
        &self.labels
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    /// Indices of the examples carrying `class`, in corpus order; empty when
    /// the class is absent.
    pub fn class_indices(&self, class: u32) -> &[usize] {
        self.class_index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        self.class_index.iter().map(|(&c, idx)| (c, idx.len())).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Corpus> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::State(format!("subset index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(self.labels.clone(), self.vocab.clone(), examples)
    }

    /// A new corpus with `extra` appended; the extras must fit this corpus's
    /// vocabulary and label space.
    pub fn merged_with(&self, extra: &[LabeledExample]) -> Result<Corpus> {
        let mut examples = self.examples.clone();
        examples.extend_from_slice(extra);
        Corpus::new(self.labels.clone(), self.vocab.clone(), examples)
    }
}

// ---------------------------------------------------------------------------
// JSONL

/// Declared mapping from raw label strings to the class space. The order of
/// `toxic` fixes the class ids `1..=k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelMap {
    pub neutral: String,
    pub toxic: Vec<String>,
}

impl LabelMap {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(&self.neutral, &self.toxic)
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    label: String,
    #[serde(default)]
    source: Option<Source>,
}

/// Loads a JSONL corpus (`{"text": ..., "label": ...}` per line), building
/// the vocabulary from this file's texts. Blank lines and `#` comment lines
/// are skipped.
pub fn load_jsonl(path: &Path, map: &LabelMap) -> Result<Corpus> {
    let labels = Arc::new(map.label_space()?);
    let records = read_jsonl_records(path)?;
    let vocab =
        Arc::new(Vocabulary::from_texts(records.iter().map(|(_, r)| r.text.as_str())));
    corpus_from_records(path, records, labels, vocab)
}

/// Loads a JSONL corpus against an existing vocabulary; out-of-vocabulary
/// words map to the unknown token. Used for evaluation and augmentation files
/// that must share the training vocabulary.
pub fn load_jsonl_with(
    path: &Path,
    labels: Arc<LabelSpace>,
    vocab: Arc<Vocabulary>,
) -> Result<Corpus> {
    let records = read_jsonl_records(path)?;
    corpus_from_records(path, records, labels, vocab)
}

fn read_jsonl_records(path: &Path) -> Result<Vec<(usize, JsonlRecord)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        records.push((lineno + 1, record));
    }
    Ok(records)
}

fn corpus_from_records(
    path: &Path,
    records: Vec<(usize, JsonlRecord)>,
    labels: Arc<LabelSpace>,
    vocab: Arc<Vocabulary>,
) -> Result<Corpus> {
    let mut examples = Vec::with_capacity(records.len());
    for (lineno, record) in records {
        let label = labels.id_of(&record.label).ok_or_else(|| {
            Error::Schema(format!(
                "{}:{}: unknown label {:?}",
                path.display(),
                lineno,
                record.label
            ))
        })?;
        let ids = vocab.encode(&record.text);
        let seq = TokenSequence::new(ids).map_err(|_| {
            Error::Schema(format!("{}:{}: text has no tokens", path.display(), lineno))
        })?;
        examples.push(LabeledExample { seq, label, source: record.source.unwrap_or(Source::Real) });
    }
    Corpus::new(labels, vocab, examples)
}

/// Writes a corpus as JSONL. `header` lines, when given, are emitted first as
/// `#` comments (used for provenance metadata on generated files).
pub fn write_jsonl(path: &Path, corpus: &Corpus, header: Option<&str>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(header) = header {
        for line in header.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    for ex in corpus.examples() {
        let record = serde_json::json!({
            "text": corpus.vocab().decode(&ex.seq)?,
            "label": corpus.labels().name_of(ex.label)?,
            "source": ex.source,
        });
        writeln!(out, "{record}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits

/// Stratified train/val/test split. Per class, val and test counts are
/// floored and the remainder goes to train, so small classes keep their
/// training presence. A positive ratio that floors to zero examples for some
/// class is a configuration error; a zero ratio yields an empty split.
pub fn split_dataset(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (train_ratio, val_ratio, test_ratio) = ratios;
    for (name, r) in [("train", train_ratio), ("val", val_ratio), ("test", test_ratio)] {
        if !(0.0..=1.0).contains(&r) || !r.is_finite() {
            return Err(Error::Config(format!("split ratio {name} = {r} outside [0, 1]")));
        }
    }
    if ((train_ratio + val_ratio + test_ratio) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            train_ratio + val_ratio + test_ratio
        )));
    }
    if train_ratio == 0.0 {
        return Err(Error::Config("split ratio train = 0 leaves no training data".into()));
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (&class, indices) in &corpus.class_index {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng_from(seed, &[stream::SPLIT, class as u64]));
        let n = shuffled.len();
        let n_val = floor_share(n, val_ratio);
        let n_test = floor_share(n, test_ratio);
        let n_train = n - n_val - n_test;
        for (name, ratio, count) in
            [("train", train_ratio, n_train), ("val", val_ratio, n_val), ("test", test_ratio, n_test)]
        {
            if ratio > 0.0 && count == 0 {
                return Err(Error::Config(format!(
                    "class {} has {} example(s); {} split would be empty",
                    corpus.labels().name_of(class)?,
                    n,
                    name
                )));
            }
        }
        train_idx.extend_from_slice(&shuffled[..n_train]);
        val_idx.extend_from_slice(&shuffled[n_train..n_train + n_val]);
        test_idx.extend_from_slice(&shuffled[n_train + n_val..]);
    }
    Ok((corpus.subset(&train_idx)?, corpus.subset(&val_idx)?, corpus.subset(&test_idx)?))
}

/// floor(n * ratio) with a tolerance for ratios like 0.3 that sit just under
/// their decimal value in binary floating point.
fn floor_share(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Drops a seeded stratified share of each class, returning the kept corpus
/// and the per-class count of removed examples. The removed counts are the
/// augmentation budgets: methods compete on refilling exactly what was taken
/// away.
pub fn simulate_low_resource(
    train: &Corpus,
    keep_fraction: f64,
    seed: u64,
) -> Result<(Corpus, BTreeMap<u32, usize>)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction = {keep_fraction} outside (0, 1]")));
    }
    let mut kept_idx = Vec::new();
    let mut budget = BTreeMap::new();
    for (&class, indices) in &train.class_index {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng_from(seed, &[stream::LOW_RESOURCE, class as u64]));
        let n_keep = floor_share(shuffled.len(), keep_fraction);
        kept_idx.extend_from_slice(&shuffled[..n_keep]);
        budget.insert(class, shuffled.len() - n_keep);
    }
    kept_idx.sort_unstable();
    Ok((train.subset(&kept_idx)?, budget))
}

// ---------------------------------------------------------------------------
// Synthetic task

/// A controlled generation task over disjoint token lexicons: neutral text
/// draws only from the neutral lexicon, class-`i` text draws each token from
/// toxic lexicon `i` with probability `mix_rate` and from the neutral lexicon
/// otherwise. Lexicon membership gives an exact toxicity oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub k: usize,
    pub neutral_lexicon: Vec<u32>,
    pub toxic_lexicons: Vec<Vec<u32>>,
    pub mix_rate: f64,
    pub seq_len: (usize, usize),
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("synthetic task needs k >= 1".into()));
        }
        if self.toxic_lexicons.len() != self.k {
            return Err(Error::Config(format!(
                "expected {} toxic lexicons, got {}",
                self.k,
                self.toxic_lexicons.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_rate) {
            return Err(Error::Config(format!("mix_rate = {} outside [0, 1]", self.mix_rate)));
        }
        let (lo, hi) = self.seq_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("seq_len = ({lo}, {hi}) is not a valid range")));
        }
        let mut seen: HashSet<u32> = HashSet::new();
        for lexicon in std::iter::once(&self.neutral_lexicon).chain(&self.toxic_lexicons) {
            if lexicon.is_empty() {
                return Err(Error::Config("empty lexicon in synthetic task".into()));
            }
            for &id in lexicon {
                if !seen.insert(id) {
                    return Err(Error::Config(format!(
                        "token id {id} appears in two lexicons; lexicons must be disjoint"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Union of all toxic lexicons; the membership set behind the exact
    /// toxicity oracle.
    pub fn toxic_ids(&self) -> HashSet<u32> {
        self.toxic_lexicons.iter().flatten().copied().collect()
    }
}

/// A synthetic task spec bundled with the vocabulary and label space it was
/// built over.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub vocab: Arc<Vocabulary>,
    pub labels: Arc<LabelSpace>,
}

impl SyntheticTask {
    /// Builds the task vocabulary (`neu00 ...` plus `tox1_00 ...` per class)
    /// and assigns the lexicon id ranges.
    pub fn build(
        k: usize,
        neutral_words: usize,
        toxic_words_per_class: usize,
        mix_rate: f64,
        seq_len: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if neutral_words == 0 || toxic_words_per_class == 0 {
            return Err(Error::Config("synthetic lexicons need at least one word".into()));
        }
        let mut words = Vec::new();
        for j in 0..neutral_words {
            words.push(format!("neu{j:02}"));
        }
        for i in 1..=k {
            for j in 0..toxic_words_per_class {
                words.push(format!("tox{i}_{j:02}"));
            }
        }
        let vocab = Arc::new(Vocabulary::from_words(words)?);

        let base = RESERVED_TOKENS;
        let neutral_lexicon: Vec<u32> = (0..neutral_words as u32).map(|j| base + j).collect();
        let mut toxic_lexicons = Vec::with_capacity(k);
        for i in 0..k as u32 {
            let start = base + neutral_words as u32 + i * toxic_words_per_class as u32;
            toxic_lexicons.push((0..toxic_words_per_class as u32).map(|j| start + j).collect());
        }

        let toxic_names: Vec<String> = (1..=k).map(|i| format!("toxic{i}")).collect();
        let labels = Arc::new(LabelSpace::new("neutral", &toxic_names)?);

        let spec = SyntheticTaskSpec { k, neutral_lexicon, toxic_lexicons, mix_rate, seq_len, seed };
        spec.validate()?;
        Ok(SyntheticTask { spec, vocab, labels })
    }
}

/// Draws `n_per_class` examples for every real class of the task.
/// Deterministic for a given spec seed.
pub fn make_synthetic_corpus(task: &SyntheticTask, n_per_class: usize) -> Result<Corpus> {
    let spec = &task.spec;
    spec.validate()?;
    let (lo, hi) = spec.seq_len;
    let mut examples = Vec::with_capacity(n_per_class * (spec.k + 1));
    for class in 0..=(spec.k as u32) {
        let mut rng = rng_from(spec.seed, &[stream::SYNTHETIC, class as u64]);
        for _ in 0..n_per_class {
            let len = rng.random_range(lo..=hi);
            let mut ids = Vec::with_capacity(len);
            for _ in 0..len {
                let lexicon = if class == NEUTRAL_CLASS {
                    &spec.neutral_lexicon
                } else if rng.random::<f64>() < spec.mix_rate {
                    &spec.toxic_lexicons[(class - 1) as usize]
                } else {
                    &spec.neutral_lexicon
                };
                ids.push(*lexicon.choose(&mut rng).expect("lexicon validated non-empty"));
            }
            examples.push(LabeledExample {
                seq: TokenSequence::new(ids)?,
                label: class,
                source: Source::Real,
            });
        }
    }
    Corpus::new(task.labels.clone(), task.vocab.clone(), examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_label_space() -> Arc<LabelSpace> {
        Arc::new(LabelSpace::new("neutral", &["racism".into(), "sexism".into()]).unwrap())
    }

    #[test]
    fn reserved_ids_are_distinct_and_low() {
        let ids = [BEGIN_TOKEN, END_TOKEN, PAD_TOKEN, UNK_TOKEN];
        for (i, a) in ids.iter().enumerate() {
            assert!(*a < RESERVED_TOKENS);
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn label_space_layout() {
        let space = tiny_label_space();
        assert_eq!(space.k(), 2);
        assert_eq!(space.num_heads(), 4);
        assert_eq!(space.fake_id(), 3);
        assert_eq!(space.kind_of(0).unwrap(), LabelKind::Neutral);
        assert_eq!(space.kind_of(1).unwrap(), LabelKind::Toxic);
        assert_eq!(space.kind_of(3).unwrap(), LabelKind::Fake);
        assert!(space.kind_of(4).is_err());
        assert_eq!(space.id_of("sexism"), Some(2));
        assert!(space.validate_real(3).is_err());
    }

    #[test]
    fn vocabulary_is_bijective_and_order_stable() {
        let vocab = Vocabulary::from_texts(["You are WHAT you eat", "you bet"]);
        // First-appearance order after lowercasing.
        assert_eq!(vocab.id_of("you"), Some(RESERVED_TOKENS));
        assert_eq!(vocab.word_count(), 5);
        for id in vocab.content_ids() {
            let word = vocab.word(id).unwrap().to_string();
            assert_eq!(vocab.id_of(&word), Some(id));
        }
        assert_eq!(vocab.word(UNK_TOKEN).unwrap(), "<unk>");
        assert!(vocab.word(vocab.total_size() as u32).is_err());
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let vocab = Vocabulary::from_texts(["alpha beta"]);
        let ids = vocab.encode("beta GAMMA alpha");
        assert_eq!(ids[1], UNK_TOKEN);
        assert_eq!(ids.len(), 3);
        let seq = TokenSequence::new(ids).unwrap();
        assert_eq!(vocab.decode(&seq).unwrap(), "beta <unk> alpha");
    }

    #[test]
    fn empty_sequences_are_rejected() {
        assert!(matches!(TokenSequence::new(vec![]), Err(Error::Schema(_))));
    }

    #[test]
    fn vocabulary_hash_tracks_content() {
        let a = Vocabulary::from_texts(["one two"]);
        let b = Vocabulary::from_texts(["one two"]);
        let c = Vocabulary::from_texts(["two one"]);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    fn write_temp_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    fn demo_label_map() -> LabelMap {
        LabelMap { neutral: "neutral".into(), toxic: vec!["racism".into(), "sexism".into()] }
    }

    #[test]
    fn load_jsonl_roundtrip_and_determinism() {
        let file = write_temp_jsonl(&[
            r#"{"text": "calm words here", "label": "neutral"}"#,
            "# provenance comment",
            "",
            r#"{"text": "Bad Words", "label": "racism"}"#,
        ]);
        let map = demo_label_map();
        let a = load_jsonl(file.path(), &map).unwrap();
        let b = load_jsonl(file.path(), &map).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a.class_indices(1), &[1]);
        assert_eq!(a.examples()[1].source, Source::Real);
    }

    #[test]
    fn load_jsonl_reports_line_numbers() {
        let file = write_temp_jsonl(&[
            r#"{"text": "fine", "label": "neutral"}"#,
            r#"{"text": "missing the label field"}"#,
        ]);
        let err = load_jsonl(file.path(), &demo_label_map()).unwrap_err();
        match err {
            Error::Parse { location, message } => {
                assert!(location.ends_with(":2"), "location was {location}");
                assert!(message.contains("label"), "message was {message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_jsonl_rejects_unknown_labels_and_empty_text() {
        let file = write_temp_jsonl(&[r#"{"text": "x", "label": "mystery"}"#]);
        let err = load_jsonl(file.path(), &demo_label_map()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("mystery")), "{err}");

        let file = write_temp_jsonl(&[r#"{"text": "   ", "label": "neutral"}"#]);
        let err = load_jsonl(file.path(), &demo_label_map()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("no tokens")), "{err}");
    }

    #[test]
    fn write_then_load_preserves_examples() {
        let task = SyntheticTask::build(2, 5, 4, 0.5, (3, 6), 9).unwrap();
        let corpus = make_synthetic_corpus(&task, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        write_jsonl(&path, &corpus, Some("provenance line")).unwrap();
        let reloaded =
            load_jsonl_with(&path, corpus.labels().clone(), corpus.vocab().clone()).unwrap();
        assert_eq!(corpus, reloaded);
    }

    fn uniform_corpus(per_class: usize) -> Corpus {
        let task = SyntheticTask::build(2, 6, 4, 0.5, (3, 5), 21).unwrap();
        make_synthetic_corpus(&task, per_class).unwrap()
    }

    #[test]
    fn split_small_corpus_exactly() {
        let corpus = uniform_corpus(10);
        let (train, val, test) = split_dataset(&corpus, (0.8, 0.1, 0.1), 5).unwrap();
        for class in 0..=2 {
            assert_eq!(train.class_indices(class).len(), 8);
            assert_eq!(val.class_indices(class).len(), 1);
            assert_eq!(test.class_indices(class).len(), 1);
        }
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let corpus = uniform_corpus(100);
        let (train, val, test) = split_dataset(&corpus, (0.8, 0.1, 0.1), 5).unwrap();
        // Independent counting oracle: per class, floor(100 * 0.1) to val and
        // test, the 80 remaining to train.
        for class in 0..=2 {
            assert_eq!(train.class_indices(class).len(), 80);
            assert_eq!(val.class_indices(class).len(), 10);
            assert_eq!(test.class_indices(class).len(), 10);
        }
        let (train2, val2, test2) = split_dataset(&corpus, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_allows_empty_val_only_at_zero_ratio() {
        let corpus = uniform_corpus(10);
        let (train, val, _test) = split_dataset(&corpus, (0.9, 0.0, 0.1), 5).unwrap();
        assert!(val.is_empty());
        assert_eq!(train.len(), 27);

        // 5 per class: floor(5 * 0.1) = 0 for a positive ratio, so error.
        let small = uniform_corpus(5);
        let err = split_dataset(&small, (0.8, 0.1, 0.1), 5).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("empty")), "{err}");
    }

    #[test]
    fn split_validates_ratios() {
        let corpus = uniform_corpus(10);
        assert!(split_dataset(&corpus, (0.8, 0.1, 0.2), 5).is_err());
        assert!(split_dataset(&corpus, (0.0, 0.5, 0.5), 5).is_err());
    }

    #[test]
    fn low_resource_budgets_match_removed_counts() {
        let corpus = uniform_corpus(40);
        let (kept, budget) = simulate_low_resource(&corpus, 0.5, 3).unwrap();
        for class in 0..=2 {
            assert_eq!(kept.class_indices(class).len(), 20);
            assert_eq!(budget[&class], 20);
        }

        let corpus = uniform_corpus(8);
        let (kept, budget) = simulate_low_resource(&corpus, 0.25, 3).unwrap();
        for class in 0..=2 {
            assert_eq!(kept.class_indices(class).len(), 2);
            assert_eq!(budget[&class], 6);
        }
    }

    #[test]
    fn keep_everything_is_identity() {
        let corpus = uniform_corpus(7);
        let (kept, budget) = simulate_low_resource(&corpus, 1.0, 3).unwrap();
        assert_eq!(kept, corpus);
        assert!(budget.values().all(|&b| b == 0));
    }

    #[test]
    fn synthetic_lexicons_are_disjoint_and_neutral_is_clean() {
        let task = SyntheticTask::build(2, 20, 20, 0.6, (12, 20), 11).unwrap();
        task.spec.validate().unwrap();
        assert_eq!(task.vocab.word_count(), 60);
        let toxic = task.spec.toxic_ids();
        let corpus = make_synthetic_corpus(&task, 50).unwrap();
        for &i in corpus.class_indices(NEUTRAL_CLASS) {
            let ex = &corpus.examples()[i];
            assert!(ex.seq.ids().iter().all(|id| !toxic.contains(id)));
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let task = SyntheticTask::build(2, 6, 4, 0.5, (3, 6), 17).unwrap();
        let a = make_synthetic_corpus(&task, 25).unwrap();
        let b = make_synthetic_corpus(&task, 25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_mix_rate_holds_in_expectation() {
        let task = SyntheticTask::build(1, 10, 10, 0.5, (20, 20), 29).unwrap();
        let corpus = make_synthetic_corpus(&task, 1000).unwrap();
        let toxic = task.spec.toxic_ids();
        let mut toxic_tokens = 0usize;
        let mut total = 0usize;
        for &i in corpus.class_indices(1) {
            let ex = &corpus.examples()[i];
            toxic_tokens += ex.seq.ids().iter().filter(|id| toxic.contains(id)).count();
            total += ex.seq.len();
        }
        let frac = toxic_tokens as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.05, "toxic fraction {frac}");
    }

    proptest! {
        #[test]
        fn split_partitions_the_corpus(per_class in 10usize..40, seed in 0u64..1000) {
            let corpus = uniform_corpus(per_class);
            let (train, val, test) = split_dataset(&corpus, (0.8, 0.1, 0.1), seed).unwrap();
            prop_assert_eq!(train.len() + val.len() + test.len(), corpus.len());
            // Membership is preserved: per class, the multiset of split
            // examples equals the class slice of the source corpus.
            for class in 0..=2u32 {
                let mut got: Vec<&LabeledExample> = Vec::new();
                for part in [&train, &val, &test] {
                    got.extend(part.class_indices(class).iter().map(|&i| &part.examples()[i]));
                }
                let mut want: Vec<&LabeledExample> =
                    corpus.class_indices(class).iter().map(|&i| &corpus.examples()[i]).collect();
                let key = |e: &&LabeledExample| e.seq.ids().to_vec();
                got.sort_by_key(key);
                want.sort_by_key(key);
                prop_assert_eq!(got, want);
            }
        }
    }
}
