//! The neutral exemplar pool and its progressive refinement.
//!
//! Generators are steered *away* from toxicity's complement: their toxicity
//! reward is low when a sample still resembles the neutral pool. The pool
//! starts as the full neutral reference set and is re-selected every epoch as
//! the top-scoring slice under the discriminator's neutral head. The
//! retention rate `r` starts at a configured percentage of the candidate set
//! and halves after each refinement, so the pool anneals from broad coverage
//! down to a small, high-confidence core; once the target size is reached the
//! pool stays at that size but keeps being re-scored and re-selected, letting
//! membership rotate as the discriminator sharpens.
//!
//! The pool also feeds the neutral-text provider: a few-shot prompt is
//! assembled from sampled exemplars so refreshed neutral text matches the
//! register of the corpus.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledExample, Vocabulary, NEUTRAL_CLASS};
use crate::discriminator::DiscriminatorState;
use crate::embedding::{EmbeddingBackend, EmbeddingVector};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// Version tag of the few-shot prompt template bundled with the binary.
pub const PROMPT_TEMPLATE_VERSION: &str = "neutral_fewshot_v1";

const PROMPT_TEMPLATE: &str = include_str!("../templates/neutral_fewshot_v1.txt");

/// A rendered provider prompt, tagged with the template it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub template_version: String,
}

/// Neutral reference set plus the currently selected exemplar subset.
///
/// Candidates are immutable for the lifetime of a run; refinement only
/// changes which of them are selected. Embeddings are cached at construction
/// so per-epoch re-scoring is a pure classifier sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallastPool {
    candidates: Vec<LabeledExample>,
    embeddings: Vec<EmbeddingVector>,
    selected: Vec<usize>,
    r_percent: f64,
    target_size: usize,
    refinements: usize,
}

/// What one refinement pass did, for logging and invariant checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinementReport {
    pub kept: usize,
    pub dropped: usize,
    /// Lowest neutrality score among kept exemplars.
    pub min_kept_score: f64,
    /// Highest neutrality score among dropped candidates; `None` when
    /// nothing was dropped.
    pub max_dropped_score: Option<f64>,
}

impl BallastPool {
    /// Builds the initial pool: every candidate selected, retention rate at
    /// its starting value.
    pub fn new(
        candidates: Vec<LabeledExample>,
        backend: &Arc<dyn EmbeddingBackend>,
        r0_percent: f64,
        target_size: usize,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Config("ballast pool needs at least one neutral candidate".into()));
        }
        if !(r0_percent > 0.0 && r0_percent <= 100.0) {
            return Err(Error::Config(format!(
                "retention rate must be in (0, 100], got {r0_percent}"
            )));
        }
        if target_size == 0 {
            return Err(Error::Config("ballast target size must be at least 1".into()));
        }
        for ex in &candidates {
            if ex.label != NEUTRAL_CLASS {
                return Err(Error::Domain(format!(
                    "ballast candidate labeled {} is not neutral",
                    ex.label
                )));
            }
        }
        let embeddings: Vec<EmbeddingVector> =
            candidates.iter().map(|ex| backend.embed(&ex.seq)).collect::<Result<_>>()?;
        let selected = (0..candidates.len()).collect();
        Ok(BallastPool {
            candidates,
            embeddings,
            selected,
            r_percent: r0_percent,
            target_size,
            refinements: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.selected.len()
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn r_percent(&self) -> f64 {
        self.r_percent
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn refinements(&self) -> usize {
        self.refinements
    }

    /// The size the pool anneals toward: the target, unless the candidate
    /// set itself is smaller.
    pub fn floor_size(&self) -> usize {
        self.target_size.min(self.candidates.len())
    }

    pub fn selected_examples(&self) -> impl Iterator<Item = &LabeledExample> {
        self.selected.iter().map(|&i| &self.candidates[i])
    }

    pub fn selected_embeddings(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.selected.iter().map(|&i| &self.embeddings[i])
    }

    pub fn selected_indices(&self) -> &[usize] {
        &self.selected
    }

    /// Re-validates internal consistency after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != self.embeddings.len() {
            return Err(Error::Checkpoint(format!(
                "{} candidates but {} cached embeddings",
                self.candidates.len(),
                self.embeddings.len()
            )));
        }
        if self.selected.is_empty() {
            return Err(Error::Checkpoint("ballast selection is empty".into()));
        }
        for &i in &self.selected {
            if i >= self.candidates.len() {
                return Err(Error::Checkpoint(format!(
                    "selected index {i} outside {} candidates",
                    self.candidates.len()
                )));
            }
        }
        if !(self.r_percent > 0.0 && self.r_percent <= 100.0) {
            return Err(Error::Checkpoint(format!(
                "retention rate {} out of range",
                self.r_percent
            )));
        }
        Ok(())
    }
}

/// One refinement pass: re-score every candidate with the neutral head, keep
/// the top `ceil(r% of candidates)` (never below the target size, never above
/// the candidate count), then halve `r`.
///
/// Ties break by score descending, then candidate index ascending, so
/// refinement is deterministic for a fixed discriminator.
pub fn refine_pool(
    pool: &BallastPool,
    d: &DiscriminatorState,
) -> Result<(BallastPool, RefinementReport)> {
    let n = pool.candidates.len();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(n);
    for (i, emb) in pool.embeddings.iter().enumerate() {
        scored.push((i, d.neutrality_score_features(emb)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let raw = ((pool.r_percent / 100.0) * n as f64).ceil() as usize;
    let kept = raw.max(pool.floor_size()).min(n);

    let selected: Vec<usize> = scored[..kept].iter().map(|&(i, _)| i).collect();
    let min_kept_score = scored[kept - 1].1;
    let max_dropped_score = scored.get(kept).map(|&(_, s)| s);

    let refined = BallastPool {
        candidates: pool.candidates.clone(),
        embeddings: pool.embeddings.clone(),
        selected,
        r_percent: pool.r_percent / 2.0,
        target_size: pool.target_size,
        refinements: pool.refinements + 1,
    };
    let report = RefinementReport { kept, dropped: n - kept, min_kept_score, max_dropped_score };
    Ok((refined, report))
}

/// Renders the few-shot provider prompt from `k` exemplars sampled without
/// replacement from the current selection. The same seed always produces a
/// byte-identical prompt.
pub fn assemble_fewshot_prompt(
    pool: &BallastPool,
    vocab: &Vocabulary,
    k: usize,
    seed: u64,
) -> Result<PromptText> {
    if k == 0 {
        return Err(Error::Domain("few-shot prompt needs at least one exemplar".into()));
    }
    if k > pool.size() {
        return Err(Error::Domain(format!(
            "requested {k} exemplars from a pool of {}",
            pool.size()
        )));
    }
    let mut rng = rng_from(seed, &[stream::PROMPT]);
    let mut order: Vec<usize> = pool.selected.clone();
    // Partial Fisher-Yates: only the first k slots need to be decided.
    for t in 0..k {
        let j = t + rand::Rng::random_range(&mut rng, 0..order.len() - t);
        order.swap(t, j);
    }
    let mut examples = String::new();
    for &idx in order.iter().take(k) {
        let text = vocab.decode(&pool.candidates[idx].seq)?;
        examples.push_str("- ");
        examples.push_str(&text);
        examples.push('\n');
    }
    let text = PROMPT_TEMPLATE.replace("{examples}", examples.trim_end_matches('\n'));
    Ok(PromptText { text, template_version: PROMPT_TEMPLATE_VERSION.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Source, TokenSequence, RESERVED_TOKENS};
    use crate::discriminator::LlmNeutralTarget;
    use crate::embedding::HashedBagBackend;

    fn backend() -> Arc<dyn EmbeddingBackend> {
        Arc::new(HashedBagBackend::new(16, 5).unwrap())
    }

    fn neutral(ids: &[u32]) -> LabeledExample {
        LabeledExample {
            seq: TokenSequence::new(ids.to_vec()).unwrap(),
            label: NEUTRAL_CLASS,
            source: Source::Real,
        }
    }

    fn varied_candidates(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let a = RESERVED_TOKENS + (i % 37) as u32;
                let b = RESERVED_TOKENS + (i % 11) as u32;
                let c = RESERVED_TOKENS + (i % 5) as u32;
                neutral(&[a, b, c])
            })
            .collect()
    }

    fn disc() -> DiscriminatorState {
        let mut d =
            DiscriminatorState::new(2, 8, backend(), LlmNeutralTarget::default(), 9).unwrap();
        // Break the uniform init so scores differ across candidates.
        for i in 0..d.mlp().param_count() {
            let v = ((i * 13 % 17) as f64 - 8.0) / 30.0;
            d.mlp_mut().set_param(i, v);
        }
        d
    }

    #[test]
    fn halving_schedule_reaches_and_holds_the_target() {
        let pool = BallastPool::new(varied_candidates(100), &backend(), 50.0, 10).unwrap();
        assert_eq!(pool.size(), 100);
        let d = disc();
        let mut sizes = Vec::new();
        let mut current = pool;
        for _ in 0..5 {
            let (next, _) = refine_pool(&current, &d).unwrap();
            sizes.push(next.size());
            current = next;
        }
        // ceil of 50%, 25%, 12.5%, 6.25% (clamped), 3.125% (clamped) of 100.
        assert_eq!(sizes, vec![50, 25, 13, 10, 10]);
        assert_eq!(current.refinements(), 5);
        assert_eq!(current.candidate_count(), 100);
    }

    #[test]
    fn small_candidate_sets_clamp_to_the_candidate_count() {
        let pool = BallastPool::new(varied_candidates(6), &backend(), 100.0, 10).unwrap();
        let d = disc();
        let (next, report) = refine_pool(&pool, &d).unwrap();
        assert_eq!(next.size(), 6);
        assert_eq!(report.dropped, 0);
        assert_eq!(report.max_dropped_score, None);
    }

    #[test]
    fn every_kept_score_dominates_every_dropped_score() {
        let pool = BallastPool::new(varied_candidates(80), &backend(), 40.0, 5).unwrap();
        let d = disc();
        let (next, report) = refine_pool(&pool, &d).unwrap();
        assert_eq!(next.size(), 32);
        let max_dropped = report.max_dropped_score.unwrap();
        assert!(report.min_kept_score >= max_dropped);
        // Cross-check against direct scoring.
        let kept_min = next
            .selected_embeddings()
            .map(|e| d.neutrality_score_features(e).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((kept_min - report.min_kept_score).abs() < 1e-15);
    }

    #[test]
    fn equal_scores_break_ties_by_candidate_index() {
        // Identical sequences give identical scores, so selection must fall
        // back to index order.
        let cands: Vec<LabeledExample> = (0..10).map(|_| neutral(&[4, 5])).collect();
        let pool = BallastPool::new(cands, &backend(), 40.0, 2).unwrap();
        let d = disc();
        let (next, _) = refine_pool(&pool, &d).unwrap();
        assert_eq!(next.selected_indices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn refinement_never_grows_the_pool() {
        let pool = BallastPool::new(varied_candidates(60), &backend(), 90.0, 3).unwrap();
        let d = disc();
        let mut current = pool;
        let mut last = current.size();
        for _ in 0..8 {
            let (next, _) = refine_pool(&current, &d).unwrap();
            assert!(next.size() <= last);
            last = next.size();
            current = next;
        }
        assert_eq!(current.size(), 3);
    }

    #[test]
    fn prompt_is_deterministic_per_seed_and_versioned() {
        let vocab = Vocabulary::from_texts(["the cat sat", "a dog ran far"]);
        let cands: Vec<LabeledExample> = vec![
            neutral(&vocab.encode("the cat sat")),
            neutral(&vocab.encode("a dog ran")),
            neutral(&vocab.encode("dog sat far")),
            neutral(&vocab.encode("the dog sat")),
        ];
        let pool = BallastPool::new(cands, &backend(), 50.0, 2).unwrap();
        let p1 = assemble_fewshot_prompt(&pool, &vocab, 3, 42).unwrap();
        let p2 = assemble_fewshot_prompt(&pool, &vocab, 3, 42).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.template_version, PROMPT_TEMPLATE_VERSION);
        assert_eq!(p1.text.matches("- ").count(), 3);
        assert!(p1.text.contains("non-toxic"));

        let p3 = assemble_fewshot_prompt(&pool, &vocab, 3, 43).unwrap();
        // Different seed is allowed to pick a different exemplar set/order;
        // with 4 choose 3 orderings this should differ.
        assert!(p1 == p2 && (p1 != p3 || p1.text == p3.text));
    }

    #[test]
    fn prompt_rejects_oversized_requests() {
        let vocab = Vocabulary::from_texts(["one two"]);
        let pool =
            BallastPool::new(vec![neutral(&vocab.encode("one two"))], &backend(), 50.0, 1)
                .unwrap();
        assert!(matches!(
            assemble_fewshot_prompt(&pool, &vocab, 2, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            assemble_fewshot_prompt(&pool, &vocab, 0, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rejects_non_neutral_candidates_and_bad_rates() {
        let mut bad = varied_candidates(3);
        bad[1].label = 1;
        assert!(matches!(
            BallastPool::new(bad, &backend(), 50.0, 2),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            BallastPool::new(varied_candidates(3), &backend(), 0.0, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BallastPool::new(varied_candidates(3), &backend(), 101.0, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BallastPool::new(Vec::new(), &backend(), 50.0, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn serde_roundtrip_preserves_selection_state() {
        let pool = BallastPool::new(varied_candidates(12), &backend(), 50.0, 3).unwrap();
        let d = disc();
        let (pool, _) = refine_pool(&pool, &d).unwrap();
        let json = serde_json::to_string(&pool).unwrap();
        let back: BallastPool = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.selected_indices(), pool.selected_indices());
        assert_eq!(back.r_percent(), pool.r_percent());
        assert_eq!(back.refinements(), pool.refinements());
    }
}
