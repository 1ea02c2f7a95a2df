//! End-to-end training orchestration.
//!
//! A run is: MLE-pretrain one generator per toxic class, pretrain the
//! discriminator on real text plus initial fakes (plus provider neutrals when
//! the neutral pool is enabled), then iterate adversarial epochs. Each epoch
//! takes exactly one policy-gradient step per generator — the direction
//! alternating by epoch parity in the full mode — then refreshes provider
//! neutrals, updates the discriminator on the combined batch, and (in full
//! mode) refines the neutral exemplar pool.
//!
//! Ablation modes:
//! * `no_ballast`   — no pool, no provider calls, authenticity rewards only;
//! * `no_toxicity_step` — pool and provider stay (the discriminator still
//!   sees provider neutrals) but every generator step uses authenticity
//!   rewards;
//! * `joint`        — every step blends both rewards with weight `lambda`.
//!
//! All randomness is derived functionally from `(seed, stream, epoch, class)`
//! so a resumed run reproduces the remainder of an uninterrupted run
//! bit-for-bit without persisting RNG state.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ballast::{assemble_fewshot_prompt, refine_pool, BallastPool};
use crate::checkpoint::{CheckpointStore, RunCheckpoint, CHECKPOINT_VERSION};
use crate::corpus::{Corpus, LabelKind, LabeledExample, Source, Vocabulary};
use crate::discriminator::{DiscriminatorState, LlmNeutralTarget};
use crate::embedding::{EmbeddingBackend, EmbeddingSpec, EmbeddingVector};
use crate::generator::{
    mle_pretrain, reinforce_update, GenerationSample, GeneratorConfig, GeneratorState,
};
use crate::objectives::{
    authenticity_loss_from_probs, authenticity_reward_from_probs, joint_loss, joint_reward,
    step_kind_for, toxicity_loss, toxicity_reward, ObjectiveMode, StepKind,
};
use crate::provider::NeutralProvider;
use crate::rng::{derive_seed, rng_from, stream};
use crate::{Error, Result};

/// Extra tag so the discriminator's init stream never collides with a
/// generator's (generators tag by class id).
const DISC_INIT_TAG: u64 = 1_000_003;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    NoBallast,
    NoToxicityStep,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConfig {
    /// Parameter initialization and MLE shuffling.
    pub model: u64,
    /// Generation sampling and discriminator subsampling.
    pub sample: u64,
    /// Prompt assembly and provider draws.
    pub provider: u64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Toxicity weight in joint mode; ignored elsewhere.
    pub lambda: f64,
    /// Adversarial epochs to run; 0 means pretraining only.
    pub max_epoch: usize,
    pub gen: GeneratorConfig,
    pub disc_hidden: usize,
    pub llm_neutral_target: LlmNeutralTarget,
    pub embedding: EmbeddingSpec,
    /// Generator MLE pretraining epochs (0 keeps the fresh initialization).
    pub mle_epochs: usize,
    pub mle_batch_size: usize,
    pub mle_lr: f64,
    /// Discriminator pretraining passes, one batch each (0 keeps fresh).
    pub d_pretrain_passes: usize,
    pub policy_lr: f64,
    pub disc_lr: f64,
    /// Samples drawn per generator per epoch.
    pub gen_batch: usize,
    /// Real examples per class in each discriminator batch.
    pub disc_real_per_class: usize,
    pub d_updates_per_epoch: usize,
    pub ballast_target: usize,
    pub ballast_r0: f64,
    /// Exemplars in each provider prompt (clamped to the pool size).
    pub fewshot_k: usize,
    /// Provider neutrals requested per refresh.
    pub provider_batch: usize,
    pub seeds: SeedConfig,
    /// When set, a checkpoint is written after pretraining and every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_keep_last: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        let positive: [(&str, usize); 6] = [
            ("disc_hidden", self.disc_hidden),
            ("mle_batch_size", self.mle_batch_size),
            ("gen_batch", self.gen_batch),
            ("disc_real_per_class", self.disc_real_per_class),
            ("d_updates_per_epoch", self.d_updates_per_epoch),
            ("checkpoint_keep_last", self.checkpoint_keep_last),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("mle_lr", self.mle_lr),
            ("policy_lr", self.policy_lr),
            ("disc_lr", self.disc_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.mode == TrainMode::Joint && !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "joint mode needs lambda in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.uses_ballast() {
            if self.ballast_target == 0 {
                return Err(Error::Config("ballast_target must be positive".into()));
            }
            if !(self.ballast_r0 > 0.0 && self.ballast_r0 <= 100.0) {
                return Err(Error::Config(format!(
                    "ballast_r0 must be in (0, 100], got {}",
                    self.ballast_r0
                )));
            }
            if self.fewshot_k == 0 {
                return Err(Error::Config("fewshot_k must be positive".into()));
            }
            if self.provider_batch == 0 {
                return Err(Error::Config("provider_batch must be positive".into()));
            }
        }
        Ok(())
    }

    /// Whether the neutral exemplar pool (and hence the provider) is active.
    pub fn uses_ballast(&self) -> bool {
        self.mode != TrainMode::NoBallast
    }

    /// Whether the pool is re-selected after each epoch.
    pub fn refines_ballast(&self) -> bool {
        self.mode == TrainMode::Full
    }

    pub fn objective_mode(&self) -> ObjectiveMode {
        match self.mode {
            TrainMode::Full => ObjectiveMode::Alternating,
            TrainMode::NoBallast | TrainMode::NoToxicityStep => ObjectiveMode::AuthenticityOnly,
            TrainMode::Joint => ObjectiveMode::Joint { lambda: self.lambda },
        }
    }
}

// ---------------------------------------------------------------------------
// Log
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub class: u32,
    pub step_kind: StepKind,
    pub g_loss: f64,
    pub d_loss: f64,
    pub grad_norm: f64,
    pub ballast_size: usize,
    pub reward_mean: f64,
    /// Wall time of the surrounding epoch; informational only and excluded
    /// from the CSV so logs stay comparable across machines and resumes.
    pub wall_ms: u128,
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,class,step_kind,g_loss,d_loss,grad_norm,ballast_size,reward_mean";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.class,
                r.step_kind,
                r.g_loss,
                r.d_loss,
                r.grad_norm,
                r.ballast_size,
                r.reward_mean
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn records_for_epoch(&self, epoch: usize) -> Vec<&TrainRecord> {
        self.records.iter().filter(|r| r.epoch == epoch).collect()
    }
}

/// Aggregate outcome of a `run` call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub provider_calls: usize,
    pub ballast_refinements: usize,
    /// Rewards that passed the bounded-reward check at the policy seam.
    pub rewards_checked: usize,
    /// Epoch whose checkpoint scored best on validation (ties go to the
    /// later epoch); `None` before any epoch completes.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainState {
    epoch: usize,
    generators: Vec<GeneratorState>,
    discriminator: DiscriminatorState,
    ballast: Option<BallastPool>,
}

pub struct Trainer {
    cfg: TrainConfig,
    train: Corpus,
    val: Option<Corpus>,
    backend: Arc<dyn EmbeddingBackend>,
    provider: Arc<dyn NeutralProvider>,
    real_features: Vec<EmbeddingVector>,
    val_features: Vec<EmbeddingVector>,
    state: Option<TrainState>,
    log: TrainLog,
    ballast_refinements: usize,
    rewards_checked: usize,
    /// (accuracy, epoch) of the best validation score so far.
    best: Option<(f64, usize)>,
    store: Option<CheckpointStore>,
}

/// Preserves the error variant while prefixing epoch/class context.
fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
        Error::State(m) => Error::State(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::Checkpoint(m) => Error::Checkpoint(format!("{ctx}: {m}")),
        other => other,
    }
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        train: Corpus,
        val: Option<Corpus>,
        provider: Arc<dyn NeutralProvider>,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = train.labels().k();
        if k == 0 {
            return Err(Error::Config("training needs at least one toxic class".into()));
        }
        for class in train.labels().toxic_ids() {
            if train.class_indices(class).is_empty() {
                return Err(Error::Config(format!(
                    "no training examples for toxic class {class} ({})",
                    train.labels().name_of(class)?
                )));
            }
        }
        let neutral_count = train.class_indices(crate::corpus::NEUTRAL_CLASS).len();
        if neutral_count == 0 {
            return Err(Error::Config("no neutral training examples".into()));
        }
        if cfg.uses_ballast() && neutral_count < cfg.ballast_target {
            log::warn!(
                "only {neutral_count} neutral examples for a ballast target of {}; \
                 the pool will saturate at {neutral_count}",
                cfg.ballast_target
            );
        }
        if let Some(v) = &val {
            if v.vocab().hash() != train.vocab().hash() {
                return Err(Error::Config(
                    "validation corpus uses a different vocabulary than training".into(),
                ));
            }
        }

        let backend = cfg.embedding.build(train.vocab())?;
        let real_features: Vec<EmbeddingVector> = train
            .examples()
            .iter()
            .map(|ex| backend.embed(&ex.seq))
            .collect::<Result<_>>()?;
        let val_features: Vec<EmbeddingVector> = match &val {
            Some(v) => v.examples().iter().map(|ex| backend.embed(&ex.seq)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let store = match &cfg.checkpoint_dir {
            Some(dir) => Some(CheckpointStore::new(dir.clone(), cfg.checkpoint_keep_last)?),
            None => None,
        };
        Ok(Trainer {
            cfg,
            train,
            val,
            backend,
            provider,
            real_features,
            val_features,
            state: None,
            log: TrainLog::default(),
            ballast_refinements: 0,
            rewards_checked: 0,
            best: None,
            store,
        })
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn generators(&self) -> &[GeneratorState] {
        self.state.as_ref().map(|s| s.generators.as_slice()).unwrap_or(&[])
    }

    pub fn discriminator(&self) -> Option<&DiscriminatorState> {
        self.state.as_ref().map(|s| &s.discriminator)
    }

    pub fn ballast(&self) -> Option<&BallastPool> {
        self.state.as_ref().and_then(|s| s.ballast.as_ref())
    }

    pub fn current_epoch(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.epoch)
    }

    pub fn backend(&self) -> &Arc<dyn EmbeddingBackend> {
        &self.backend
    }

    fn labels_layout(&self) -> Result<Vec<String>> {
        (0..self.train.labels().num_heads() as u32)
            .map(|id| self.train.labels().name_of(id).map(str::to_string))
            .collect()
    }

    /// Builds generators, pretrained per class, plus the discriminator and
    /// (when enabled) the initial ballast pool; runs the discriminator
    /// pretraining passes.
    pub fn pretrain(&mut self) -> Result<()> {
        if self.state.is_some() {
            return Err(Error::State("pretrain called twice on one trainer".into()));
        }
        let cfg = &self.cfg;
        let k = self.train.labels().k();
        let vocab = self.train.vocab().clone();

        let mut generators = Vec::with_capacity(k);
        for class in 1..=k as u32 {
            let mut g = GeneratorState::new(class, &vocab, &cfg.gen, cfg.seeds.model)?;
            if cfg.mle_epochs > 0 {
                let data: Vec<crate::corpus::TokenSequence> = self
                    .train
                    .class_indices(class)
                    .iter()
                    .map(|&i| self.train.examples()[i].seq.clone())
                    .collect();
                let mut rng = rng_from(cfg.seeds.model, &[stream::MLE, class as u64]);
                mle_pretrain(&mut g, &data, cfg.mle_epochs, cfg.mle_lr, cfg.mle_batch_size, &mut rng)
                    .map_err(|e| with_context(e, &format!("pretraining generator {class}")))?;
            }
            generators.push(g);
        }

        let mut discriminator = DiscriminatorState::new(
            k,
            cfg.disc_hidden,
            self.backend.clone(),
            cfg.llm_neutral_target,
            derive_seed(cfg.seeds.model, &[stream::MODEL_INIT, DISC_INIT_TAG]),
        )?;

        let ballast = if cfg.uses_ballast() {
            let candidates: Vec<LabeledExample> = self
                .train
                .class_indices(crate::corpus::NEUTRAL_CLASS)
                .iter()
                .map(|&i| self.train.examples()[i].clone())
                .collect();
            Some(BallastPool::new(candidates, &self.backend, cfg.ballast_r0, cfg.ballast_target)?)
        } else {
            None
        };

        // Initial fakes (epoch tag 0) and initial provider neutrals feed the
        // discriminator pretraining passes.
        if cfg.d_pretrain_passes > 0 {
            let mut fake_features: Vec<(EmbeddingVector, usize)> = Vec::new();
            for g in &generators {
                let mut rng =
                    rng_from(cfg.seeds.sample, &[stream::SAMPLE, 0, g.class_id() as u64]);
                for _ in 0..cfg.gen_batch {
                    let sample = g.sample(&mut rng)?;
                    fake_features
                        .push((self.backend.embed(&sample.seq)?, discriminator.fake_head()));
                }
            }
            let llm_features = match &ballast {
                Some(pool) => self.fetch_provider_features(pool, &discriminator, 0)?,
                None => Vec::new(),
            };
            for pass in 0..cfg.d_pretrain_passes {
                let mut batch = self.real_feature_batch(&discriminator, 0, pass as u64)?;
                batch.extend(fake_features.iter().cloned());
                batch.extend(llm_features.iter().cloned());
                discriminator
                    .train_step_features(&batch, cfg.disc_lr)
                    .map_err(|e| with_context(e, "discriminator pretraining"))?;
            }
        }

        self.state = Some(TrainState { epoch: 0, generators, discriminator, ballast });
        self.checkpoint_now()?;
        Ok(())
    }

    /// Provider refresh: assemble the few-shot prompt from the pool and draw
    /// a batch of neutral texts, returning their features with the wiring's
    /// training target attached.
    fn fetch_provider_features(
        &self,
        pool: &BallastPool,
        d: &DiscriminatorState,
        epoch: usize,
    ) -> Result<Vec<(EmbeddingVector, usize)>> {
        let k = self.cfg.fewshot_k.min(pool.size());
        let prompt_seed = derive_seed(self.cfg.seeds.provider, &[stream::PROMPT, epoch as u64]);
        let prompt = assemble_fewshot_prompt(pool, self.train.vocab(), k, prompt_seed)?;
        let draw_seed = derive_seed(self.cfg.seeds.provider, &[stream::PROVIDER, epoch as u64]);
        let neutrals = self.provider.provide_neutral(&prompt, self.cfg.provider_batch, draw_seed)?;
        let target = d.llm_neutral_head();
        neutrals
            .iter()
            .map(|ex| Ok((self.backend.embed(&ex.seq)?, target)))
            .collect()
    }

    /// Per-class stratified subsample of real examples as a feature batch.
    fn real_feature_batch(
        &self,
        d: &DiscriminatorState,
        epoch: usize,
        update: u64,
    ) -> Result<Vec<(EmbeddingVector, usize)>> {
        let mut batch = Vec::new();
        for class in self.train.labels().real_ids() {
            let indices = self.train.class_indices(class);
            if indices.is_empty() {
                continue;
            }
            let mut rng = rng_from(
                self.cfg.seeds.sample,
                &[stream::DISC_BATCH, epoch as u64, update, class as u64],
            );
            let take = self.cfg.disc_real_per_class.min(indices.len());
            let mut order: Vec<usize> = indices.to_vec();
            // Partial Fisher-Yates for a without-replacement subsample.
            for t in 0..take {
                let j = t + rand::Rng::random_range(&mut rng, 0..order.len() - t);
                order.swap(t, j);
            }
            let target = d.real_head(class)?;
            for &idx in order.iter().take(take) {
                batch.push((self.real_features[idx].clone(), target));
            }
        }
        Ok(batch)
    }

    /// One adversarial epoch: a policy step per generator, a provider
    /// refresh, discriminator updates, and (full mode) pool refinement.
    pub fn adversarial_epoch(&mut self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::Domain("adversarial epochs are numbered from 1".into()));
        }
        if self.state.is_none() {
            return Err(Error::State("adversarial_epoch before pretrain".into()));
        }
        let started = Instant::now();
        let kind = step_kind_for(t, self.cfg.objective_mode())?;
        let k = self.train.labels().k();

        struct ClassOutcome {
            class: u32,
            g_loss: f64,
            grad_norm: f64,
            reward_mean: f64,
            fake_features: Vec<EmbeddingVector>,
        }
        let mut outcomes: Vec<ClassOutcome> = Vec::with_capacity(k);

        // --- generator updates ------------------------------------------
        {
            let state = self.state.as_mut().expect("checked above");
            for g in &mut state.generators {
                let class = g.class_id();
                let ctx = format!("epoch {t}, class {class}");
                let mut rng =
                    rng_from(self.cfg.seeds.sample, &[stream::SAMPLE, t as u64, class as u64]);
                let samples: Vec<GenerationSample> = (0..self.cfg.gen_batch)
                    .map(|_| g.sample(&mut rng))
                    .collect::<Result<_>>()
                    .map_err(|e| with_context(e, &ctx))?;
                let features: Vec<EmbeddingVector> = samples
                    .iter()
                    .map(|s| self.backend.embed(&s.seq))
                    .collect::<Result<_>>()
                    .map_err(|e| with_context(e, &ctx))?;

                let mut losses = Vec::with_capacity(samples.len());
                let mut rewards = Vec::with_capacity(samples.len());
                for feat in &features {
                    let (loss, reward) = match kind {
                        StepKind::Toxicity => {
                            let pool = state.ballast.as_ref().ok_or_else(|| {
                                Error::State(format!("{ctx}: toxicity step without a ballast pool"))
                            })?;
                            let loss = toxicity_loss(feat, pool)
                                .map_err(|e| with_context(e, &ctx))?;
                            (loss, toxicity_reward(loss).map_err(|e| with_context(e, &ctx))?)
                        }
                        StepKind::Authenticity => {
                            let probs = state
                                .discriminator
                                .classify_features(feat)
                                .map_err(|e| with_context(e, &ctx))?;
                            let reward = authenticity_reward_from_probs(&probs, class)
                                .map_err(|e| with_context(e, &ctx))?;
                            (1.0 - reward, reward)
                        }
                        StepKind::Joint => {
                            let pool = state.ballast.as_ref().ok_or_else(|| {
                                Error::State(format!("{ctx}: joint step without a ballast pool"))
                            })?;
                            let tox_loss = toxicity_loss(feat, pool)
                                .map_err(|e| with_context(e, &ctx))?;
                            let tox_r =
                                toxicity_reward(tox_loss).map_err(|e| with_context(e, &ctx))?;
                            let probs = state
                                .discriminator
                                .classify_features(feat)
                                .map_err(|e| with_context(e, &ctx))?;
                            let auth_r = authenticity_reward_from_probs(&probs, class)
                                .map_err(|e| with_context(e, &ctx))?;
                            let auth_loss = authenticity_loss_from_probs(&probs, class)
                                .map_err(|e| with_context(e, &ctx))?;
                            (
                                joint_loss(tox_loss, auth_loss, self.cfg.lambda)
                                    .map_err(|e| with_context(e, &ctx))?,
                                joint_reward(tox_r, auth_r, self.cfg.lambda)
                                    .map_err(|e| with_context(e, &ctx))?,
                            )
                        }
                    };
                    // The bounded-reward seam: every reward entering the
                    // policy update must already be a valid probability-like
                    // scalar. Violations abort; nothing is clamped.
                    if !reward.is_finite() || !(0.0..=1.0).contains(&reward) {
                        return Err(Error::Domain(format!(
                            "{ctx}: reward {reward} escaped [0, 1] before the policy update"
                        )));
                    }
                    self.rewards_checked += 1;
                    losses.push(loss);
                    rewards.push(reward);
                }

                let g_loss = losses.iter().sum::<f64>() / losses.len() as f64;
                let reward_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
                let batch: Vec<(GenerationSample, f64)> =
                    samples.into_iter().zip(rewards).collect();
                let grad_norm = reinforce_update(g, &batch, self.cfg.policy_lr)
                    .map_err(|e| with_context(e, &ctx))?;

                outcomes.push(ClassOutcome {
                    class,
                    g_loss,
                    grad_norm,
                    reward_mean,
                    fake_features: features,
                });
            }
        }

        // --- provider refresh + discriminator updates ---------------------
        let llm_features = {
            let state = self.state.as_ref().expect("checked above");
            match &state.ballast {
                Some(pool) => self
                    .fetch_provider_features(pool, &state.discriminator, t)
                    .map_err(|e| with_context(e, &format!("epoch {t} provider refresh")))?,
                None => Vec::new(),
            }
        };
        let d_loss = {
            let mut real_batches = Vec::with_capacity(self.cfg.d_updates_per_epoch);
            {
                let state = self.state.as_ref().expect("checked above");
                for u in 0..self.cfg.d_updates_per_epoch {
                    real_batches.push(self.real_feature_batch(
                        &state.discriminator,
                        t,
                        u as u64,
                    )?);
                }
            }
            let state = self.state.as_mut().expect("checked above");
            let fake_head = state.discriminator.fake_head();
            let mut losses = Vec::with_capacity(real_batches.len());
            for mut batch in real_batches {
                for outcome in &outcomes {
                    batch.extend(
                        outcome.fake_features.iter().map(|f| (f.clone(), fake_head)),
                    );
                }
                batch.extend(llm_features.iter().cloned());
                losses.push(
                    state
                        .discriminator
                        .train_step_features(&batch, self.cfg.disc_lr)
                        .map_err(|e| with_context(e, &format!("epoch {t} discriminator update")))?,
                );
            }
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        // --- ballast refinement (full mode) -------------------------------
        if self.cfg.refines_ballast() {
            let state = self.state.as_mut().expect("checked above");
            let pool = state.ballast.as_ref().ok_or_else(|| {
                Error::State(format!("epoch {t}: refinement scheduled without a pool"))
            })?;
            let (refined, _) = refine_pool(pool, &state.discriminator)
                .map_err(|e| with_context(e, &format!("epoch {t} ballast refinement")))?;
            state.ballast = Some(refined);
            self.ballast_refinements += 1;
        }

        // --- validation + bookkeeping -------------------------------------
        let state = self.state.as_mut().expect("checked above");
        state.epoch = t;
        let ballast_size = state.ballast.as_ref().map(|p| p.size()).unwrap_or(0);
        let wall_ms = started.elapsed().as_millis();
        for outcome in &outcomes {
            self.log.records.push(TrainRecord {
                epoch: t,
                class: outcome.class,
                step_kind: kind,
                g_loss: outcome.g_loss,
                d_loss,
                grad_norm: outcome.grad_norm,
                ballast_size,
                reward_mean: outcome.reward_mean,
                wall_ms,
            });
        }

        let score = match &self.val {
            Some(v) => {
                let d = &self.state.as_ref().expect("checked above").discriminator;
                let mut correct = 0usize;
                for (ex, feat) in v.examples().iter().zip(&self.val_features) {
                    if d.classify_features(feat)?.argmax() == ex.label {
                        correct += 1;
                    }
                }
                correct as f64 / v.examples().len() as f64
            }
            // Without validation data the most recent epoch counts as best.
            None => f64::NEG_INFINITY,
        };
        // Ties go to the later epoch, so >= on the stored best.
        if self.best.map(|(s, _)| score >= s).unwrap_or(true) {
            self.best = Some((score, t));
        }
        self.checkpoint_now()?;
        Ok(())
    }

    /// Current state as a checkpoint document.
    pub fn checkpoint(&self) -> Result<RunCheckpoint> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("no state to checkpoint before pretrain".into()))?;
        Ok(RunCheckpoint {
            version: CHECKPOINT_VERSION,
            epoch: state.epoch,
            labels: (**self.train.labels()).clone(),
            vocab: (**self.train.vocab()).clone(),
            vocab_hash: self.train.vocab().hash(),
            embedding: self.cfg.embedding.clone(),
            generators: state.generators.clone(),
            discriminator: state.discriminator.to_checkpoint(self.labels_layout()?),
            ballast: state.ballast.clone(),
        })
    }

    fn checkpoint_now(&mut self) -> Result<()> {
        if self.store.is_none() {
            return Ok(());
        }
        let ck = self.checkpoint()?;
        let best_epoch = self.best.map(|(_, e)| e);
        self.store.as_mut().expect("checked above").save(&ck, best_epoch)?;
        Ok(())
    }

    /// Restores generators, discriminator, and ballast from a checkpoint so
    /// `run` continues from the recorded epoch.
    pub fn resume_from(&mut self, ck: RunCheckpoint) -> Result<()> {
        if self.state.is_some() {
            return Err(Error::State("resume_from on a trainer that already has state".into()));
        }
        ck.validate()?;
        ck.verify_vocab(self.train.vocab())?;
        if ck.labels != **self.train.labels() {
            return Err(Error::Checkpoint(
                "checkpoint label space differs from the training corpus".into(),
            ));
        }
        if ck.embedding != self.cfg.embedding {
            return Err(Error::Checkpoint(
                "checkpoint embedding backend differs from the run configuration".into(),
            ));
        }
        if ck.ballast.is_none() && self.cfg.uses_ballast() {
            return Err(Error::Checkpoint(
                "checkpoint has no ballast pool but the run mode needs one".into(),
            ));
        }
        let discriminator =
            DiscriminatorState::from_checkpoint(ck.discriminator, self.backend.clone())?;
        self.state = Some(TrainState {
            epoch: ck.epoch,
            generators: ck.generators,
            discriminator,
            ballast: ck.ballast,
        });
        Ok(())
    }

    /// Full run: pretraining (unless resumed) followed by the remaining
    /// adversarial epochs.
    pub fn run(&mut self) -> Result<RunSummary> {
        if self.state.is_none() {
            self.pretrain()?;
        }
        let start = self.state.as_ref().expect("pretrained above").epoch + 1;
        for t in start..=self.cfg.max_epoch {
            self.adversarial_epoch(t)?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            epochs_run: self.state.as_ref().map(|s| s.epoch).unwrap_or(0),
            provider_calls: self.provider.call_count(),
            ballast_refinements: self.ballast_refinements,
            rewards_checked: self.rewards_checked,
            best_epoch: self.best.map(|(_, e)| e),
            best_val_accuracy: self
                .best
                .and_then(|(s, _)| (self.val.is_some() && s.is_finite()).then_some(s)),
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation export
// ---------------------------------------------------------------------------

/// Draws `budget[class]` sequences from each class's generator and packages
/// them as a generated-source corpus over the same label space.
pub fn generate_augmentation(
    generators: &[GeneratorState],
    labels: &Arc<crate::corpus::LabelSpace>,
    vocab: &Arc<Vocabulary>,
    budget: &BTreeMap<u32, usize>,
    seed: u64,
) -> Result<Corpus> {
    let mut examples = Vec::new();
    for (&class, &n) in budget {
        if labels.kind_of(class)? != LabelKind::Toxic {
            return Err(Error::Config(format!(
                "augmentation budget for class {class} which is not a toxic class"
            )));
        }
        let g = generators
            .iter()
            .find(|g| g.class_id() == class)
            .ok_or_else(|| Error::Config(format!("no generator for class {class}")))?;
        let mut rng = rng_from(seed, &[stream::AUGMENT, class as u64]);
        for _ in 0..n {
            let sample = g.sample(&mut rng)?;
            examples.push(LabeledExample {
                seq: sample.seq,
                label: class,
                source: Source::Generated,
            });
        }
    }
    Corpus::new(labels.clone(), vocab.clone(), examples)
}
