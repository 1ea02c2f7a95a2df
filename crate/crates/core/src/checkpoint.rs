//! Versioned run checkpoints.
//!
//! A checkpoint is a single JSON document holding everything needed to
//! resume training or to generate from a finished run: epoch counter, label
//! space, the full vocabulary (with a content hash so mismatched data fails
//! loudly), the embedding-backend description, every generator, the
//! discriminator, and the ballast pool when the run uses one.
//!
//! Checkpoint retention keeps the most recent files plus the best-validation
//! epoch, so long runs do not accumulate unbounded state on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ballast::BallastPool;
use crate::corpus::{LabelSpace, Vocabulary};
use crate::discriminator::DiscriminatorCheckpoint;
use crate::embedding::EmbeddingSpec;
use crate::generator::GeneratorState;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    /// Last completed training epoch (0 = right after pretraining).
    pub epoch: usize,
    pub labels: LabelSpace,
    pub vocab: Vocabulary,
    /// Content hash of `vocab`, verified on load.
    pub vocab_hash: String,
    pub embedding: EmbeddingSpec,
    /// One generator per toxic class, ordered by class id.
    pub generators: Vec<GeneratorState>,
    pub discriminator: DiscriminatorCheckpoint,
    pub ballast: Option<BallastPool>,
}

impl RunCheckpoint {
    /// Internal consistency checks shared by save and load.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not the supported version {CHECKPOINT_VERSION}",
                self.version
            )));
        }
        if self.vocab.hash() != self.vocab_hash {
            return Err(Error::Checkpoint(
                "vocabulary content does not match its recorded hash".into(),
            ));
        }
        let k = self.labels.k();
        if self.generators.len() != k {
            return Err(Error::Checkpoint(format!(
                "{} generators for {k} toxic classes",
                self.generators.len()
            )));
        }
        for (i, g) in self.generators.iter().enumerate() {
            g.validate_shapes()?;
            let expected = (i + 1) as u32;
            if g.class_id() != expected {
                return Err(Error::Checkpoint(format!(
                    "generator at position {i} claims class {}, expected {expected}",
                    g.class_id()
                )));
            }
            if g.vocab_total() != self.vocab.total_size() {
                return Err(Error::Checkpoint(format!(
                    "generator for class {expected} was trained over {} token ids, vocabulary has {}",
                    g.vocab_total(),
                    self.vocab.total_size()
                )));
            }
        }
        if self.discriminator.k != k {
            return Err(Error::Checkpoint(format!(
                "discriminator k = {} does not match label space k = {k}",
                self.discriminator.k
            )));
        }
        let expected_layout: Vec<String> = (0..self.labels.num_heads() as u32)
            .map(|id| self.labels.name_of(id).map(str::to_string))
            .collect::<Result<_>>()?;
        if self.discriminator.head_layout != expected_layout {
            return Err(Error::Checkpoint(format!(
                "discriminator head layout {:?} does not match label space {:?}",
                self.discriminator.head_layout, expected_layout
            )));
        }
        if self.embedding.dim() != self.discriminator.mlp.in_dim {
            return Err(Error::Checkpoint(format!(
                "embedding dimension {} does not match discriminator input {}",
                self.embedding.dim(),
                self.discriminator.mlp.in_dim
            )));
        }
        if let Some(pool) = &self.ballast {
            pool.validate()?;
        }
        Ok(())
    }

    /// Fails unless `other` is the same vocabulary the checkpoint was
    /// trained with. Resume paths call this with the freshly rebuilt corpus.
    pub fn verify_vocab(&self, other: &Vocabulary) -> Result<()> {
        if other.hash() != self.vocab_hash {
            return Err(Error::Checkpoint(
                "run vocabulary differs from the checkpointed vocabulary".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ck: &RunCheckpoint) -> Result<()> {
    ck.validate()?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string(ck)
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RunCheckpoint> {
    let text = fs::read_to_string(path)?;
    let ck: RunCheckpoint = serde_json::from_str(&text).map_err(|e| {
        Error::Checkpoint(format!("{}: not a readable checkpoint: {e}", path.display()))
    })?;
    ck.validate()?;
    Ok(ck)
}

/// Retention policy: keep the newest `keep_last` epoch files plus the best
/// epoch's file; everything else is deleted.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    keep_last: usize,
    saved: Vec<(usize, PathBuf)>,
}

impl CheckpointStore {
    pub fn new(dir: PathBuf, keep_last: usize) -> Result<Self> {
        if keep_last == 0 {
            return Err(Error::Config("checkpoint retention must keep at least one file".into()));
        }
        fs::create_dir_all(&dir)?;
        Ok(CheckpointStore { dir, keep_last, saved: Vec::new() })
    }

    pub fn path_for_epoch(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch_{epoch:04}.json"))
    }

    /// Saves a checkpoint and prunes old ones, always sparing `best_epoch`.
    pub fn save(&mut self, ck: &RunCheckpoint, best_epoch: Option<usize>) -> Result<PathBuf> {
        let path = self.path_for_epoch(ck.epoch);
        save_checkpoint(&path, ck)?;
        self.saved.retain(|(e, _)| *e != ck.epoch);
        self.saved.push((ck.epoch, path.clone()));
        self.saved.sort_by_key(|(e, _)| *e);
        self.prune(best_epoch)?;
        Ok(path)
    }

    fn prune(&mut self, best_epoch: Option<usize>) -> Result<()> {
        let total = self.saved.len();
        if total <= self.keep_last {
            return Ok(());
        }
        let newest: Vec<usize> =
            self.saved[total - self.keep_last..].iter().map(|(e, _)| *e).collect();
        let mut keep: Vec<bool> = self
            .saved
            .iter()
            .map(|(e, _)| newest.contains(e) || Some(*e) == best_epoch)
            .collect();
        // Never delete everything (defensive; newest is always non-empty).
        if !keep.iter().any(|&k| k) {
            *keep.last_mut().expect("non-empty") = true;
        }
        let mut retained = Vec::new();
        for ((epoch, path), keep) in self.saved.drain(..).zip(keep) {
            if keep {
                retained.push((epoch, path));
            } else if path.exists() {
                fs::remove_file(&path)?;
            }
        }
        self.saved = retained;
        Ok(())
    }

    pub fn saved_epochs(&self) -> Vec<usize> {
        self.saved.iter().map(|(e, _)| *e).collect()
    }
}
