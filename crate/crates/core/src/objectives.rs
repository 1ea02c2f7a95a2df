//! Generator losses, policy rewards, and the alternation schedule.
//!
//! Each generator is pulled in two directions on an alternating cadence:
//! odd steps push samples *away* from the neutral exemplar pool (toxicity
//! direction), even steps push them toward fooling the discriminator's own
//! class head (authenticity direction). A joint mode blends both directions
//! with a mixing weight instead of alternating.
//!
//! Losses are what a step minimizes; rewards are the policy-gradient signal
//! derived from them, normalized into `[0, 1]` so the update magnitude stays
//! comparable across directions:
//!   toxicity:     loss = max cosine to the pool,  reward = (1 - loss) / 2
//!   authenticity: loss = 1 - D_i(x),              reward = D_i(x)

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ballast::BallastPool;
use crate::discriminator::{ClassProbabilities, DiscriminatorState};
use crate::embedding::{max_cosine_to_pool, EmbeddingVector};
use crate::{Error, Result};

/// Which direction a generator update takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Toxicity,
    Authenticity,
    Joint,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StepKind::Toxicity => "toxicity",
            StepKind::Authenticity => "authenticity",
            StepKind::Joint => "joint",
        };
        f.write_str(s)
    }
}

/// How step kinds are scheduled across training steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectiveMode {
    /// Odd steps take the toxicity direction, even steps the authenticity
    /// direction.
    Alternating,
    /// Every step takes the authenticity direction (used when the neutral
    /// pool is disabled or the toxicity direction is ablated).
    AuthenticityOnly,
    /// Every step blends both directions with weight `lambda` on toxicity.
    Joint { lambda: f64 },
}

/// Step kind for 1-based training step `t` under the given mode.
pub fn step_kind_for(t: usize, mode: ObjectiveMode) -> Result<StepKind> {
    if t == 0 {
        return Err(Error::Domain("training steps are numbered from 1".into()));
    }
    Ok(match mode {
        ObjectiveMode::Alternating => {
            if t % 2 == 1 {
                StepKind::Toxicity
            } else {
                StepKind::Authenticity
            }
        }
        ObjectiveMode::AuthenticityOnly => StepKind::Authenticity,
        ObjectiveMode::Joint { .. } => StepKind::Joint,
    })
}

/// Toxicity-direction loss: the sample's strongest cosine similarity to any
/// selected pool exemplar. In `[-1, 1]`; minimizing it pushes samples away
/// from neutral territory.
pub fn toxicity_loss(sample: &EmbeddingVector, pool: &BallastPool) -> Result<f64> {
    max_cosine_to_pool(sample, pool.selected_embeddings())
}

/// Maps a toxicity loss (a cosine in `[-1, 1]`) to a reward in `[0, 1]`.
pub fn toxicity_reward(loss: f64) -> Result<f64> {
    if !loss.is_finite() || !(-1.0..=1.0).contains(&loss) {
        return Err(Error::Domain(format!(
            "toxicity loss must be a cosine in [-1, 1], got {loss}"
        )));
    }
    Ok((1.0 - loss) / 2.0)
}

/// Authenticity-direction reward: the discriminator's probability that the
/// sample belongs to real class `class_id`.
pub fn authenticity_reward_from_probs(
    probs: &ClassProbabilities,
    class_id: u32,
) -> Result<f64> {
    if class_id as usize >= probs.num_heads() - 1 {
        return Err(Error::Domain(format!(
            "class {class_id} is not a real head among {} heads",
            probs.num_heads()
        )));
    }
    probs.head(class_id)
}

/// Authenticity-direction loss: `1 - D_i(x)`.
pub fn authenticity_loss_from_probs(probs: &ClassProbabilities, class_id: u32) -> Result<f64> {
    Ok(1.0 - authenticity_reward_from_probs(probs, class_id)?)
}

/// Convenience wrappers that classify a sequence first.
pub fn authenticity_loss(
    d: &DiscriminatorState,
    seq: &crate::corpus::TokenSequence,
    class_id: u32,
) -> Result<f64> {
    authenticity_loss_from_probs(&d.classify(seq)?, class_id)
}

pub fn authenticity_reward(
    d: &DiscriminatorState,
    seq: &crate::corpus::TokenSequence,
    class_id: u32,
) -> Result<f64> {
    authenticity_reward_from_probs(&d.classify(seq)?, class_id)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixing weight must be in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Joint loss: `lambda * toxicity + (1 - lambda) * authenticity`.
pub fn joint_loss(tox_loss: f64, auth_loss: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * tox_loss + (1.0 - lambda) * auth_loss)
}

/// Joint reward: the same blend applied to the per-direction rewards. When
/// both inputs are in `[0, 1]` the blend is too.
pub fn joint_reward(tox_reward: f64, auth_reward: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    for (name, r) in [("toxicity", tox_reward), ("authenticity", auth_reward)] {
        if !r.is_finite() || !(0.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("{name} reward {r} outside [0, 1]")));
        }
    }
    Ok(lambda * tox_reward + (1.0 - lambda) * auth_reward)
}
