//! Multi-head discriminator shared by all generators.
//!
//! One feed-forward body over sentence embeddings ends in `k + 2` softmax
//! heads: head 0 scores neutrality, heads `1..=k` score the real toxic
//! classes, and head `k + 1` flags machine-generated text. Head 0 doubles as
//! the scoring function for ballast refinement, so as the discriminator
//! learns, the ballast pool it curates gets cleaner.
//!
//! Neutral texts obtained from the LLM provider are, literally read, still
//! machine text: by default they train the fake head. The alternative wiring
//! (treat them as neutral supervision) stays available behind a config
//! switch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledExample, TokenSequence, NEUTRAL_CLASS};
use crate::embedding::{EmbeddingBackend, EmbeddingVector};
use crate::mlp::Mlp;
use crate::{Error, Result};

/// Where provider-sourced neutral text is routed during discriminator
/// training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmNeutralTarget {
    /// Provider text is machine text: train the fake head on it.
    #[default]
    FakeHead,
    /// Provider text is neutral supervision: train the neutral head on it.
    NeutralHead,
}

/// A probability simplex over the `k + 2` heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    values: Vec<f64>,
}

impl ClassProbabilities {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_heads(&self) -> usize {
        self.values.len()
    }

    pub fn head(&self, id: u32) -> Result<f64> {
        self.values
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Domain(format!("head {id} outside {} heads", self.values.len())))
    }

    /// Head with the highest probability; ties resolve to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.values.iter().enumerate() {
            if p > self.values[best] {
                best = i;
            }
        }
        best as u32
    }
}

#[derive(Clone)]
pub struct DiscriminatorState {
    k: usize,
    llm_neutral_target: LlmNeutralTarget,
    backend: Arc<dyn EmbeddingBackend>,
    mlp: Mlp,
}

/// Serializable part of a discriminator; the embedding backend is rebuilt
/// from the run configuration on load. `head_layout` records what each head
/// means so a checkpoint cannot be silently loaded into a different class
/// space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorCheckpoint {
    pub k: usize,
    pub llm_neutral_target: LlmNeutralTarget,
    pub head_layout: Vec<String>,
    pub mlp: Mlp,
}

impl DiscriminatorState {
    pub fn new(
        k: usize,
        hidden: usize,
        backend: Arc<dyn EmbeddingBackend>,
        llm_neutral_target: LlmNeutralTarget,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("discriminator needs at least one toxic class".into()));
        }
        let mlp = Mlp::new(backend.dim(), hidden, k + 2, seed)?;
        Ok(DiscriminatorState { k, llm_neutral_target, backend, mlp })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_heads(&self) -> usize {
        self.k + 2
    }

    pub fn fake_head(&self) -> usize {
        self.k + 1
    }

    /// Training target for provider-sourced neutral text under the active
    /// wiring.
    pub fn llm_neutral_head(&self) -> usize {
        match self.llm_neutral_target {
            LlmNeutralTarget::FakeHead => self.fake_head(),
            LlmNeutralTarget::NeutralHead => NEUTRAL_CLASS as usize,
        }
    }

    /// Training target for a real example: its own class id.
    pub fn real_head(&self, label: u32) -> Result<usize> {
        if label as usize > self.k {
            return Err(Error::State(format!(
                "label {label} outside the {} real classes",
                self.k + 1
            )));
        }
        Ok(label as usize)
    }

    pub fn backend(&self) -> &Arc<dyn EmbeddingBackend> {
        &self.backend
    }

    pub fn classify(&self, seq: &TokenSequence) -> Result<ClassProbabilities> {
        self.classify_features(&self.backend.embed(seq)?)
    }

    pub fn classify_features(&self, features: &EmbeddingVector) -> Result<ClassProbabilities> {
        Ok(ClassProbabilities { values: self.mlp.probs(features.values())? })
    }

    /// Ballast scoring function: the neutral head's probability.
    pub fn neutrality_score(&self, seq: &TokenSequence) -> Result<f64> {
        self.classify(seq)?.head(NEUTRAL_CLASS)
    }

    pub fn neutrality_score_features(&self, features: &EmbeddingVector) -> Result<f64> {
        self.classify_features(features)?.head(NEUTRAL_CLASS)
    }

    /// Assembles one supervised batch: real examples train their own heads,
    /// generated sequences train the fake head, provider text trains the head
    /// chosen by the wiring switch.
    pub fn build_training_batch(
        &self,
        real: &[LabeledExample],
        fake_toxic: &[TokenSequence],
        llm_neutral: &[TokenSequence],
    ) -> Result<Vec<(TokenSequence, usize)>> {
        let mut batch = Vec::with_capacity(real.len() + fake_toxic.len() + llm_neutral.len());
        for ex in real {
            batch.push((ex.seq.clone(), self.real_head(ex.label)?));
        }
        for seq in fake_toxic {
            batch.push((seq.clone(), self.fake_head()));
        }
        for seq in llm_neutral {
            batch.push((seq.clone(), self.llm_neutral_head()));
        }
        Ok(batch)
    }

    /// One SGD step on a sequence-level batch; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &[(TokenSequence, usize)], lr: f64) -> Result<f64> {
        let features: Vec<EmbeddingVector> =
            batch.iter().map(|(seq, _)| self.backend.embed(seq)).collect::<Result<_>>()?;
        let feature_batch: Vec<(EmbeddingVector, usize)> = features
            .into_iter()
            .zip(batch.iter().map(|&(_, target)| target))
            .collect();
        self.train_step_features(&feature_batch, lr)
    }

    /// Feature-level batch step; the hot path when embeddings are cached.
    pub fn train_step_features(
        &mut self,
        batch: &[(EmbeddingVector, usize)],
        lr: f64,
    ) -> Result<f64> {
        for (_, target) in batch {
            if *target >= self.num_heads() {
                return Err(Error::Domain(format!(
                    "target head {target} outside {} heads",
                    self.num_heads()
                )));
            }
        }
        let refs: Vec<(&[f64], usize)> =
            batch.iter().map(|(f, t)| (f.values(), *t)).collect();
        self.mlp.train_step(&refs, lr)
    }

    /// Mean cross-entropy of a feature batch without updating parameters.
    pub fn loss_features(&self, batch: &[(EmbeddingVector, usize)]) -> Result<f64> {
        let refs: Vec<(&[f64], usize)> =
            batch.iter().map(|(f, t)| (f.values(), *t)).collect();
        let (loss, _) = self.mlp.loss_and_grads(&refs)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self, head_layout: Vec<String>) -> DiscriminatorCheckpoint {
        DiscriminatorCheckpoint {
            k: self.k,
            llm_neutral_target: self.llm_neutral_target,
            head_layout,
            mlp: self.mlp.clone(),
        }
    }

    pub fn from_checkpoint(
        ck: DiscriminatorCheckpoint,
        backend: Arc<dyn EmbeddingBackend>,
    ) -> Result<Self> {
        ck.mlp.validate_shapes()?;
        if ck.head_layout.len() != ck.k + 2 {
            return Err(Error::Checkpoint(format!(
                "head layout lists {} heads for k = {}",
                ck.head_layout.len(),
                ck.k
            )));
        }
        if ck.mlp.out_dim != ck.k + 2 {
            return Err(Error::Checkpoint(format!(
                "classifier has {} heads, layout expects {}",
                ck.mlp.out_dim,
                ck.k + 2
            )));
        }
        if ck.mlp.in_dim != backend.dim() {
            return Err(Error::Checkpoint(format!(
                "classifier input {} does not match embedding dim {}",
                ck.mlp.in_dim,
                backend.dim()
            )));
        }
        Ok(DiscriminatorState {
            k: ck.k,
            llm_neutral_target: ck.llm_neutral_target,
            backend,
            mlp: ck.mlp,
        })
    }

    /// Direct access for gradient diagnostics.
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }
}
