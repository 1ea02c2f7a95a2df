//! Run configuration: one TOML file describing data, model, training,
//! ballast, provider, and evaluation settings.
//!
//! Every field has a default, so after deserialization the struct is fully
//! materialized; serializing it back yields the *effective* configuration
//! with all defaults spelled out, which is persisted next to the run's
//! artifacts and suffices on its own to reproduce the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_jsonl, make_synthetic_corpus, simulate_low_resource, split_dataset, Corpus, LabelMap,
    SyntheticTask,
};
use crate::discriminator::LlmNeutralTarget;
use crate::embedding::EmbeddingSpec;
use crate::evaluation::{DownstreamConfig, LexiconOracle};
use crate::generator::GeneratorConfig;
use crate::provider::{CorpusSamplerProvider, NeutralProvider, RemoteLlmProvider, RemoteProviderConfig};
use crate::trainer::{SeedConfig, TrainConfig, TrainMode};
use crate::{Error, Result};

/// Bearer token for remote provider/encoder endpoints.
pub const ENV_API_KEY: &str = "TOXIGAN_API_KEY";
/// Overrides the remote provider endpoint from the config file.
pub const ENV_ENDPOINT: &str = "TOXIGAN_ENDPOINT";

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_lambda() -> f64 {
    0.5
}
fn default_max_epoch() -> usize {
    10
}
fn default_keep_last() -> usize {
    3
}
fn default_mode() -> TrainMode {
    TrainMode::Full
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    /// Toxicity weight when `mode = "joint"`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Adversarial epochs; 0 stops after pretraining.
    #[serde(default = "default_max_epoch")]
    pub max_epoch: usize,
    #[serde(default = "default_keep_last")]
    pub checkpoint_keep_last: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            output_dir: default_output_dir(),
            mode: default_mode(),
            lambda: default_lambda(),
            max_epoch: default_max_epoch(),
            checkpoint_keep_last: default_keep_last(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_neutral_words")]
    pub neutral_words: usize,
    #[serde(default = "default_toxic_words")]
    pub toxic_words_per_class: usize,
    #[serde(default = "default_mix_rate")]
    pub mix_rate: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_seq_max_len")]
    pub max_len: usize,
    #[serde(default = "default_examples_per_class")]
    pub examples_per_class: usize,
    #[serde(default = "default_data_seed")]
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}
fn default_neutral_words() -> usize {
    30
}
fn default_toxic_words() -> usize {
    15
}
fn default_mix_rate() -> f64 {
    0.6
}
fn default_min_len() -> usize {
    4
}
fn default_seq_max_len() -> usize {
    9
}
fn default_examples_per_class() -> usize {
    500
}
fn default_data_seed() -> u64 {
    1234
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            classes: default_classes(),
            neutral_words: default_neutral_words(),
            toxic_words_per_class: default_toxic_words(),
            mix_rate: default_mix_rate(),
            min_len: default_min_len(),
            max_len: default_seq_max_len(),
            examples_per_class: default_examples_per_class(),
            seed: default_data_seed(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlSection {
    pub train: PathBuf,
    /// Raw label string that marks neutral text.
    pub neutral_label: String,
    /// Raw label strings for the toxic classes; order fixes class ids 1..=k.
    pub toxic_labels: Vec<String>,
}

fn default_val_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_split_seed() -> u64 {
    7
}
fn default_keep_fraction() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
    /// Fraction of the train split kept for low-resource simulation; the
    /// dropped counts become the per-class augmentation budgets. 1.0 keeps
    /// everything and leaves the budgets empty.
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub keep_seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            val_fraction: default_val_fraction(),
            test_fraction: default_test_fraction(),
            seed: default_split_seed(),
            keep_fraction: default_keep_fraction(),
            keep_seed: default_split_seed(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Controlled lexicon task; the quick-start default when no JSONL paths
    /// are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsonl: Option<JsonlSection>,
    #[serde(default)]
    pub split: SplitSection,
}

fn default_embed_dim() -> usize {
    16
}
fn default_hidden() -> usize {
    24
}
fn default_disc_hidden() -> usize {
    32
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Generation length cap; 0 sizes it automatically to the longest
    /// training sequence.
    #[serde(default)]
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub use_end_token: bool,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: default_embed_dim(),
            hidden: default_hidden(),
            max_len: 0,
            use_end_token: true,
            disc_hidden: default_disc_hidden(),
        }
    }
}

fn default_mle_epochs() -> usize {
    5
}
fn default_mle_batch() -> usize {
    32
}
fn default_mle_lr() -> f64 {
    0.3
}
fn default_d_pretrain() -> usize {
    3
}
fn default_policy_lr() -> f64 {
    0.05
}
fn default_disc_lr() -> f64 {
    0.3
}
fn default_gen_batch() -> usize {
    16
}
fn default_disc_real() -> usize {
    16
}
fn default_d_updates() -> usize {
    1
}

fn default_seeds() -> SeedConfig {
    SeedConfig { model: 1, sample: 2, provider: 3 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_mle_epochs")]
    pub mle_epochs: usize,
    #[serde(default = "default_mle_batch")]
    pub mle_batch_size: usize,
    #[serde(default = "default_mle_lr")]
    pub mle_lr: f64,
    #[serde(default = "default_d_pretrain")]
    pub d_pretrain_passes: usize,
    #[serde(default = "default_policy_lr")]
    pub policy_lr: f64,
    #[serde(default = "default_disc_lr")]
    pub disc_lr: f64,
    #[serde(default = "default_gen_batch")]
    pub gen_batch: usize,
    #[serde(default = "default_disc_real")]
    pub disc_real_per_class: usize,
    #[serde(default = "default_d_updates")]
    pub d_updates_per_epoch: usize,
    #[serde(default)]
    pub llm_neutral_target: LlmNeutralTarget,
    #[serde(default = "default_seeds")]
    pub seeds: SeedConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mle_epochs: default_mle_epochs(),
            mle_batch_size: default_mle_batch(),
            mle_lr: default_mle_lr(),
            d_pretrain_passes: default_d_pretrain(),
            policy_lr: default_policy_lr(),
            disc_lr: default_disc_lr(),
            gen_batch: default_gen_batch(),
            disc_real_per_class: default_disc_real(),
            d_updates_per_epoch: default_d_updates(),
            llm_neutral_target: LlmNeutralTarget::default(),
            seeds: default_seeds(),
        }
    }
}

fn default_ballast_target() -> usize {
    100
}
fn default_ballast_r0() -> f64 {
    50.0
}
fn default_fewshot_k() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallastSection {
    #[serde(default = "default_ballast_target")]
    pub target: usize,
    /// Initial retention percentage; halves after every refinement.
    #[serde(default = "default_ballast_r0")]
    pub r0: f64,
    #[serde(default = "default_fewshot_k")]
    pub fewshot_k: usize,
    /// Neutral texts requested from the provider per refresh; 0 follows
    /// the generator batch size.
    #[serde(default)]
    pub provider_batch: usize,
}

impl Default for BallastSection {
    fn default() -> Self {
        BallastSection {
            target: default_ballast_target(),
            r0: default_ballast_r0(),
            fewshot_k: default_fewshot_k(),
            provider_batch: 0,
        }
    }
}

/// Which neutral-text provider backs the ballast refresh.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSection {
    /// Samples neutral training texts with replacement — the offline,
    /// fully deterministic default.
    #[default]
    CorpusSampler,
    /// Chat-completions HTTP endpoint.
    Remote(RemoteProviderConfig),
}

fn default_eval_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_downstream_hidden() -> usize {
    32
}
fn default_downstream_epochs() -> usize {
    40
}
fn default_downstream_lr() -> f64 {
    0.5
}
fn default_downstream_batch() -> usize {
    64
}
fn default_samples_per_class() -> usize {
    200
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Downstream training seeds; results are reported per seed plus a mean
    /// row.
    #[serde(default = "default_eval_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_downstream_hidden")]
    pub downstream_hidden: usize,
    #[serde(default = "default_downstream_epochs")]
    pub downstream_epochs: usize,
    #[serde(default = "default_downstream_lr")]
    pub downstream_lr: f64,
    #[serde(default = "default_downstream_batch")]
    pub downstream_batch: usize,
    /// Samples drawn per class when scoring generated toxicity.
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    /// Words counted as toxic by the lexicon oracle; defaults to the
    /// synthetic task's toxic lexicons when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxic_lexicon: Option<Vec<String>>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            seeds: default_eval_seeds(),
            downstream_hidden: default_downstream_hidden(),
            downstream_epochs: default_downstream_epochs(),
            downstream_lr: default_downstream_lr(),
            downstream_batch: default_downstream_batch(),
            samples_per_class: default_samples_per_class(),
            toxic_lexicon: None,
        }
    }
}

impl EvaluateSection {
    pub fn downstream_config(&self) -> DownstreamConfig {
        DownstreamConfig {
            hidden: self.downstream_hidden,
            epochs: self.downstream_epochs,
            lr: self.downstream_lr,
            batch_size: self.downstream_batch,
        }
    }
}

fn default_embedding() -> EmbeddingSpec {
    EmbeddingSpec::HashedBag { dim: 64, seed: 99 }
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ballast: BallastSection,
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            data: DataSection::default(),
            embedding: default_embedding(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            ballast: BallastSection::default(),
            provider: ProviderSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML config file. Parse errors carry the file
    /// location and the offending field.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully materialized configuration, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.synthetic.is_some() && self.data.jsonl.is_some() {
            return Err(Error::Config(
                "data.synthetic and data.jsonl are mutually exclusive".into(),
            ));
        }
        if let Some(s) = &self.data.synthetic {
            if s.classes == 0 {
                return Err(Error::Config("data.synthetic.classes must be positive".into()));
            }
            if s.min_len == 0 || s.min_len > s.max_len {
                return Err(Error::Config(format!(
                    "data.synthetic length range ({}, {}) is invalid",
                    s.min_len, s.max_len
                )));
            }
            if s.examples_per_class == 0 {
                return Err(Error::Config(
                    "data.synthetic.examples_per_class must be positive".into(),
                ));
            }
        }
        if let Some(j) = &self.data.jsonl {
            if j.toxic_labels.is_empty() {
                return Err(Error::Config("data.jsonl.toxic_labels must not be empty".into()));
            }
        }
        let split = &self.data.split;
        for (name, v) in
            [("val_fraction", split.val_fraction), ("test_fraction", split.test_fraction)]
        {
            if !(0.0..1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Config(format!("data.split.{name} = {v} outside [0, 1)")));
            }
        }
        if split.val_fraction + split.test_fraction >= 1.0 {
            return Err(Error::Config(
                "data.split fractions leave no training data".into(),
            ));
        }
        if !(split.keep_fraction > 0.0 && split.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.split.keep_fraction = {} outside (0, 1]",
                split.keep_fraction
            )));
        }
        if self.evaluate.seeds.is_empty() {
            return Err(Error::Config("evaluate.seeds must not be empty".into()));
        }
        if self.evaluate.samples_per_class == 0 {
            return Err(Error::Config("evaluate.samples_per_class must be positive".into()));
        }
        // Full trainer-side validation happens when the TrainConfig is
        // assembled with the data-dependent max_len; here we check what is
        // independent of the data.
        if self.model.embed_dim == 0 || self.model.hidden == 0 || self.model.disc_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let ProviderSection::Remote(remote) = &self.provider {
            if remote.endpoint.is_empty() && std::env::var(ENV_ENDPOINT).is_err() {
                return Err(Error::Config(format!(
                    "provider.endpoint is empty and {ENV_ENDPOINT} is unset"
                )));
            }
        }
        Ok(())
    }

    /// Builds the dataset: load or synthesize, split, and (optionally)
    /// down-sample the train split for low-resource simulation.
    pub fn build_dataset(&self) -> Result<DatasetBundle> {
        let (full, task) = match (&self.data.synthetic, &self.data.jsonl) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data.synthetic and data.jsonl are mutually exclusive".into(),
                ))
            }
            (None, Some(j)) => {
                let map = LabelMap {
                    neutral: j.neutral_label.clone(),
                    toxic: j.toxic_labels.clone(),
                };
                (load_jsonl(&j.train, &map)?, None)
            }
            // Quick-start default: the synthetic task.
            (synthetic, None) => {
                let s = synthetic.clone().unwrap_or_default();
                let task = SyntheticTask::build(
                    s.classes,
                    s.neutral_words,
                    s.toxic_words_per_class,
                    s.mix_rate,
                    (s.min_len, s.max_len),
                    s.seed,
                )?;
                let corpus = make_synthetic_corpus(&task, s.examples_per_class)?;
                (corpus, Some(task))
            }
        };
        let split = &self.data.split;
        let train_fraction = 1.0 - split.val_fraction - split.test_fraction;
        let (train, val, test) = split_dataset(
            &full,
            (train_fraction, split.val_fraction, split.test_fraction),
            split.seed,
        )?;
        let (train, budget) = if split.keep_fraction < 1.0 {
            simulate_low_resource(&train, split.keep_fraction, split.keep_seed)?
        } else {
            (train, BTreeMap::new())
        };
        let val = (!val.examples().is_empty()).then_some(val);
        let test = (!test.examples().is_empty()).then_some(test);
        Ok(DatasetBundle { train, val, test, budget, task })
    }

    /// Trainer settings, with the generation length cap auto-sized to the
    /// training data when `model.max_len = 0`.
    pub fn train_config(&self, train: &Corpus) -> Result<TrainConfig> {
        let data_max = train.examples().iter().map(|ex| ex.seq.len()).max().unwrap_or(1);
        let max_len = if self.model.max_len == 0 { data_max } else { self.model.max_len };
        if max_len < data_max {
            return Err(Error::Config(format!(
                "model.max_len = {max_len} is shorter than the longest training sequence \
                 ({data_max}); generators could never reproduce the data"
            )));
        }
        let cfg = TrainConfig {
            mode: self.run.mode,
            lambda: self.run.lambda,
            max_epoch: self.run.max_epoch,
            gen: GeneratorConfig {
                embed_dim: self.model.embed_dim,
                hidden: self.model.hidden,
                max_len,
                use_end_token: self.model.use_end_token,
            },
            disc_hidden: self.model.disc_hidden,
            llm_neutral_target: self.train.llm_neutral_target,
            embedding: self.embedding.clone(),
            mle_epochs: self.train.mle_epochs,
            mle_batch_size: self.train.mle_batch_size,
            mle_lr: self.train.mle_lr,
            d_pretrain_passes: self.train.d_pretrain_passes,
            policy_lr: self.train.policy_lr,
            disc_lr: self.train.disc_lr,
            gen_batch: self.train.gen_batch,
            disc_real_per_class: self.train.disc_real_per_class,
            d_updates_per_epoch: self.train.d_updates_per_epoch,
            ballast_target: self.ballast.target,
            ballast_r0: self.ballast.r0,
            fewshot_k: self.ballast.fewshot_k,
            provider_batch: if self.ballast.provider_batch == 0 {
                self.train.gen_batch
            } else {
                self.ballast.provider_batch
            },
            seeds: self.train.seeds,
            checkpoint_dir: Some(self.run.output_dir.join("checkpoints")),
            checkpoint_keep_last: self.run.checkpoint_keep_last,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds the neutral-text provider. The corpus sampler draws from the
    /// training corpus's neutral class; the remote provider honors the
    /// endpoint-override and API-key environment variables.
    pub fn build_provider(&self, train: &Corpus) -> Result<Arc<dyn NeutralProvider>> {
        match &self.provider {
            ProviderSection::CorpusSampler => {
                let neutral: Vec<crate::corpus::TokenSequence> = train
                    .class_indices(crate::corpus::NEUTRAL_CLASS)
                    .iter()
                    .map(|&i| train.examples()[i].seq.clone())
                    .collect();
                Ok(Arc::new(CorpusSamplerProvider::new(neutral)?))
            }
            ProviderSection::Remote(remote) => {
                let mut cfg = remote.clone();
                if let Ok(endpoint) = std::env::var(ENV_ENDPOINT) {
                    cfg.endpoint = endpoint;
                }
                if cfg.api_key.is_none() {
                    cfg.api_key = std::env::var(ENV_API_KEY).ok();
                }
                Ok(Arc::new(RemoteLlmProvider::new(cfg, train.vocab().clone())?))
            }
        }
    }

    /// Lexicon oracle for toxicity scoring: the explicit word list when
    /// configured, otherwise the synthetic task's toxic lexicons.
    pub fn toxicity_oracle(
        &self,
        train: &Corpus,
        task: Option<&SyntheticTask>,
    ) -> Result<Option<LexiconOracle>> {
        if let Some(words) = &self.evaluate.toxic_lexicon {
            let oracle = LexiconOracle::from_words(train.vocab(), words);
            if oracle.lexicon_size() == 0 {
                return Err(Error::Config(
                    "evaluate.toxic_lexicon has no words from the vocabulary".into(),
                ));
            }
            return Ok(Some(oracle));
        }
        if let Some(task) = task {
            return Ok(Some(LexiconOracle::new(task.spec.toxic_ids())));
        }
        Ok(None)
    }
}

/// Materialized data for one run: the (possibly down-sampled) training
/// corpus, optional validation/test splits, the per-class augmentation
/// budgets from low-resource simulation, and the synthetic task when the
/// data was synthesized.
pub struct DatasetBundle {
    pub train: Corpus,
    pub val: Option<Corpus>,
    pub test: Option<Corpus>,
    pub budget: BTreeMap<u32, usize>,
    pub task: Option<SyntheticTask>,
}
