//! Numerical diagnostics for the policy-gradient training signal.
//!
//! Three tools live here, all meant for small, fully checkable instances:
//!
//! * a variance decomposition of blended rewards, verifying
//!   `Var(aX + bY) = a^2 Var(X) + b^2 Var(Y) + 2ab Cov(X, Y)` holds for the
//!   recorded reward streams;
//! * an exact policy gradient computed by enumerating the generator's entire
//!   output space, the ground truth that sampled REINFORCE estimates and
//!   finite differences are checked against;
//! * convergence curves that split logged gradient-norm series by step
//!   direction.

use crate::corpus::TokenSequence;
use crate::generator::{GeneratorGrads, GeneratorState, NoiseVector};
use crate::objectives::StepKind;
use crate::trainer::TrainLog;
use crate::{Error, Result};

/// Hard ceiling on enumerable output spaces; larger instances are refused
/// rather than silently ground through.
pub const MAX_ENUMERABLE_SEQUENCES: usize = 10_000;

// ---------------------------------------------------------------------------
// Variance decomposition
// ---------------------------------------------------------------------------

/// Population moments of a blended reward `a*X + b*Y` computed two ways.
#[derive(Clone, Copy, Debug)]
pub struct VarianceReport {
    pub alpha: f64,
    pub beta: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub covariance: f64,
    /// `Var(aX + bY)` computed directly from the blended samples.
    pub direct: f64,
    /// `a^2 Var(X) + b^2 Var(Y) + 2ab Cov(X, Y)`.
    pub decomposed: f64,
}

impl VarianceReport {
    pub fn identity_gap(&self) -> f64 {
        (self.direct - self.decomposed).abs()
    }
}

fn population_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Decomposes the variance of the blend `alpha*x + beta*y` over paired
/// samples, using population (divide by n) moments throughout.
pub fn variance_decomposition(
    x: &[f64],
    y: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<VarianceReport> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::Domain(format!(
            "variance decomposition needs equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    for (name, series) in [("x", x), ("y", y)] {
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("series {name} contains a non-finite value")));
        }
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Domain("blend weights must be finite".into()));
    }
    let n = x.len() as f64;
    let mx = population_mean(x);
    let my = population_mean(y);
    let var_x = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let var_y = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let covariance = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;

    let blended: Vec<f64> = x.iter().zip(y).map(|(a, b)| alpha * a + beta * b).collect();
    let mb = population_mean(&blended);
    let direct = blended.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
    let decomposed = alpha * alpha * var_x + beta * beta * var_y + 2.0 * alpha * beta * covariance;

    Ok(VarianceReport { alpha, beta, var_x, var_y, covariance, direct, decomposed })
}

// ---------------------------------------------------------------------------
// Exact policy gradient by enumeration
// ---------------------------------------------------------------------------

/// Exact quantities for a generator whose output space fits under the
/// enumeration ceiling.
#[derive(Clone, Debug)]
pub struct ExactPolicyGradient {
    /// Flat gradient of the policy-gradient *loss* `-E[R]`; negate for the
    /// ascent direction on expected reward.
    pub loss_gradient: Vec<f64>,
    pub expected_reward: f64,
    pub sequence_count: usize,
}

/// Number of sequences the generator can emit, or an error if it exceeds the
/// enumeration ceiling.
pub fn enumerable_sequence_count(g: &GeneratorState) -> Result<usize> {
    let v = g.content_count();
    let max_len = g.max_len();
    let total: usize = if g.use_end_token() {
        let mut total = 0usize;
        let mut pow = 1usize;
        for _ in 0..max_len {
            pow = pow.checked_mul(v).unwrap_or(usize::MAX);
            total = total.checked_add(pow).unwrap_or(usize::MAX);
            if total > MAX_ENUMERABLE_SEQUENCES {
                break;
            }
        }
        total
    } else {
        let mut pow = 1usize;
        for _ in 0..max_len {
            pow = pow.checked_mul(v).unwrap_or(usize::MAX);
            if pow > MAX_ENUMERABLE_SEQUENCES {
                break;
            }
        }
        pow
    };
    if total > MAX_ENUMERABLE_SEQUENCES {
        return Err(Error::Domain(format!(
            "output space exceeds the enumeration ceiling of {MAX_ENUMERABLE_SEQUENCES} sequences"
        )));
    }
    Ok(total)
}

/// Every sequence the generator can emit, in lexicographic token order.
pub fn enumerate_output_space(g: &GeneratorState) -> Result<Vec<TokenSequence>> {
    enumerable_sequence_count(g)?;
    let tokens: Vec<u32> = (0..g.content_count()).map(|i| g.output_token(i)).collect();
    let max_len = g.max_len();
    let min_len = if g.use_end_token() { 1 } else { max_len };
    let mut out = Vec::new();
    let mut current: Vec<u32> = Vec::new();
    fn walk(
        tokens: &[u32],
        current: &mut Vec<u32>,
        min_len: usize,
        max_len: usize,
        out: &mut Vec<TokenSequence>,
    ) {
        if current.len() >= min_len {
            out.push(TokenSequence::new(current.clone()).expect("non-empty"));
        }
        if current.len() == max_len {
            return;
        }
        for &t in tokens {
            current.push(t);
            walk(tokens, current, min_len, max_len, out);
            current.pop();
        }
    }
    walk(&tokens, &mut current, min_len, max_len, &mut out);
    Ok(out)
}

/// Exact expected reward `E[R] = sum_x P(x) R(x)` over the full output space.
pub fn exact_expected_reward(
    g: &GeneratorState,
    z: &NoiseVector,
    reward: &dyn Fn(&TokenSequence) -> f64,
) -> Result<f64> {
    let space = enumerate_output_space(g)?;
    let mut expected = 0.0;
    for seq in &space {
        let logp = g.log_prob(z, seq)?;
        expected += logp.exp() * reward(seq);
    }
    Ok(expected)
}

/// Exact policy gradient `grad(-E[R]) = -sum_x P(x) R(x) grad(log P(x))`
/// computed by full enumeration. Instances beyond the ceiling are refused.
pub fn exact_pg_gradient(
    g: &GeneratorState,
    z: &NoiseVector,
    reward: &dyn Fn(&TokenSequence) -> f64,
) -> Result<ExactPolicyGradient> {
    let space = enumerate_output_space(g)?;
    let mut acc = GeneratorGrads::zeros_like(g);
    let mut expected = 0.0;
    let mut mass = 0.0;
    for seq in &space {
        let p = g.log_prob(z, seq)?.exp();
        let r = reward(seq);
        if !r.is_finite() {
            return Err(Error::Domain(format!("reward function returned {r}")));
        }
        expected += p * r;
        mass += p;
        g.accumulate_grad(z, seq, p * r, &mut acc)?;
    }
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::State(format!(
            "enumerated probability mass {mass} does not sum to 1"
        )));
    }
    let mut loss_gradient = acc.to_flat();
    for v in &mut loss_gradient {
        *v = -*v;
    }
    Ok(ExactPolicyGradient { loss_gradient, expected_reward: expected, sequence_count: space.len() })
}

// ---------------------------------------------------------------------------
// Convergence curves
// ---------------------------------------------------------------------------

/// One point of a per-direction convergence curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Mean squared gradient norm across classes at this epoch.
    pub grad_norm_sq: f64,
    /// Running minimum of `grad_norm_sq` up to this epoch (non-increasing).
    pub running_min: f64,
}

/// Gradient-norm trajectories split by step direction.
#[derive(Clone, Debug, Default)]
pub struct ConvergenceCurve {
    pub toxicity: Vec<CurvePoint>,
    pub authenticity: Vec<CurvePoint>,
    pub joint: Vec<CurvePoint>,
}

impl ConvergenceCurve {
    pub fn series(&self, kind: StepKind) -> &[CurvePoint] {
        match kind {
            StepKind::Toxicity => &self.toxicity,
            StepKind::Authenticity => &self.authenticity,
            StepKind::Joint => &self.joint,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("direction,epoch,grad_norm_sq,running_min\n");
        for (name, series) in [
            ("toxicity", &self.toxicity),
            ("authenticity", &self.authenticity),
            ("joint", &self.joint),
        ] {
            for p in series {
                out.push_str(&format!(
                    "{name},{},{},{}\n",
                    p.epoch, p.grad_norm_sq, p.running_min
                ));
            }
        }
        out
    }
}

/// Builds per-direction curves from a training log: epochs are grouped, the
/// squared gradient norms of all classes at an epoch are averaged, and a
/// running minimum tracks the best level reached so far.
pub fn convergence_curve(log: &TrainLog) -> ConvergenceCurve {
    let mut curve = ConvergenceCurve::default();
    for kind in [StepKind::Toxicity, StepKind::Authenticity, StepKind::Joint] {
        let mut epochs: Vec<usize> = log
            .records
            .iter()
            .filter(|r| r.step_kind == kind)
            .map(|r| r.epoch)
            .collect();
        epochs.sort_unstable();
        epochs.dedup();
        let mut running = f64::INFINITY;
        let series = match kind {
            StepKind::Toxicity => &mut curve.toxicity,
            StepKind::Authenticity => &mut curve.authenticity,
            StepKind::Joint => &mut curve.joint,
        };
        for epoch in epochs {
            let norms: Vec<f64> = log
                .records
                .iter()
                .filter(|r| r.step_kind == kind && r.epoch == epoch)
                .map(|r| r.grad_norm * r.grad_norm)
                .collect();
            let mean = population_mean(&norms);
            running = running.min(mean);
            series.push(CurvePoint { epoch, grad_norm_sq: mean, running_min: running });
        }
    }
    curve
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::rng::{rng_from, stream};
    use crate::trainer::TrainRecord;
    use rand::Rng;

    #[test]
    fn variance_identity_holds_over_random_series() {
        let mut rng = rng_from(3, &[stream::SAMPLE]);
        for case in 0..100 {
            let n = 2 + (case % 37);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha = rng.random_range(-2.0..2.0);
            let beta = rng.random_range(-2.0..2.0);
            let report = variance_decomposition(&x, &y, alpha, beta).unwrap();
            assert!(
                report.identity_gap() < 1e-9,
                "identity gap {} on case {case}",
                report.identity_gap()
            );
        }
    }

    #[test]
    fn variance_decomposition_checks_inputs() {
        assert!(variance_decomposition(&[], &[], 1.0, 1.0).is_err());
        // Variance over a single observation is degenerate: refused.
        assert!(variance_decomposition(&[1.0], &[2.0], 1.0, 1.0).is_err());
        assert!(variance_decomposition(&[1.0], &[1.0, 2.0], 1.0, 1.0).is_err());
        assert!(variance_decomposition(&[f64::NAN, 0.0], &[1.0, 2.0], 1.0, 1.0).is_err());
        assert!(variance_decomposition(&[1.0, 2.0], &[1.0, 2.0], f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn anti_correlated_rewards_cancel_in_an_even_blend() {
        // When the authenticity reward is an offset mirror of the toxicity
        // reward, an equal blend is constant, so its variance vanishes.
        let tox = vec![0.9, 0.2, 0.6, 0.4, 0.75];
        let auth: Vec<f64> = tox.iter().map(|r| 1.0 - r).collect();
        let report = variance_decomposition(&tox, &auth, 0.5, 0.5).unwrap();
        assert!(report.direct.abs() < 1e-15, "direct variance {}", report.direct);
        assert!(report.decomposed.abs() < 1e-12, "decomposed variance {}", report.decomposed);
        assert!(report.covariance < 0.0);
    }

    #[test]
    fn identical_rewards_keep_their_variance_under_an_even_blend() {
        // 0.5 X + 0.5 X = X, so both computations must recover Var(X).
        let tox = vec![0.9, 0.2, 0.6, 0.4, 0.75];
        let report = variance_decomposition(&tox, &tox, 0.5, 0.5).unwrap();
        assert!((report.direct - report.var_x).abs() < 1e-12);
        assert!((report.decomposed - report.var_x).abs() < 1e-12);
        assert!((report.covariance - report.var_x).abs() < 1e-12);
    }

    #[test]
    fn perfectly_correlated_series_have_full_covariance() {
        let x = vec![0.1, 0.5, 0.9, 0.3];
        let report = variance_decomposition(&x, &x, 1.0, -1.0).unwrap();
        // X - X is constant, so the direct variance is zero and the identity
        // forces Var + Var - 2Cov = 0.
        assert!(report.direct < 1e-15);
        assert!((report.covariance - report.var_x).abs() < 1e-12);
    }

    fn tiny_generator(use_end: bool) -> GeneratorState {
        let cfg = GeneratorConfig {
            embed_dim: 2,
            hidden: 3,
            max_len: 2,
            use_end_token: use_end,
        };
        let vocab = crate::corpus::Vocabulary::from_texts(["aa bb cc"]);
        let mut g = GeneratorState::new(1, &vocab, &cfg, 11).unwrap();
        // Randomize all parameters so gradients are non-trivial.
        let mut rng = rng_from(5, &[stream::MODEL_INIT, 99]);
        for i in 0..g.param_count() {
            g.set_param(i, rng.random_range(-0.4..0.4));
        }
        g
    }

    #[test]
    fn enumeration_counts_match_the_space_definition() {
        let g_end = tiny_generator(true);
        // 3 tokens, max_len 2, with end: 3 + 9 = 12 sequences.
        assert_eq!(enumerable_sequence_count(&g_end).unwrap(), 12);
        assert_eq!(enumerate_output_space(&g_end).unwrap().len(), 12);
        let g_fixed = tiny_generator(false);
        // Without the end token: exactly 3^2 = 9 sequences.
        assert_eq!(enumerable_sequence_count(&g_fixed).unwrap(), 9);
        assert_eq!(enumerate_output_space(&g_fixed).unwrap().len(), 9);
    }

    #[test]
    fn oversized_spaces_are_refused() {
        let cfg = GeneratorConfig { embed_dim: 2, hidden: 3, max_len: 10, use_end_token: false };
        let words: Vec<String> = (0..50).map(|i| format!("w{i:02}")).collect();
        let vocab = crate::corpus::Vocabulary::from_words(words).unwrap();
        let g = GeneratorState::new(1, &vocab, &cfg, 1).unwrap();
        assert!(matches!(enumerable_sequence_count(&g), Err(Error::Domain(_))));
        assert!(matches!(enumerate_output_space(&g), Err(Error::Domain(_))));
        assert!(matches!(
            exact_pg_gradient(&g, &NoiseVector::zero(3), &|_| 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn exact_gradient_matches_finite_differences_of_expected_reward() {
        let mut g = tiny_generator(false);
        let z = NoiseVector::zero(g.hidden());
        // A reward keyed on token identities, in [0, 1].
        let reward = |seq: &TokenSequence| -> f64 {
            let s: u32 = seq.ids().iter().sum();
            ((s % 7) as f64) / 7.0
        };
        let exact = exact_pg_gradient(&g, &z, &reward).unwrap();
        assert_eq!(exact.sequence_count, 9);
        assert!((0.0..=1.0).contains(&exact.expected_reward));

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..g.param_count() {
            let orig = g.get_param(i);
            g.set_param(i, orig + eps);
            let hi = exact_expected_reward(&g, &z, &reward).unwrap();
            g.set_param(i, orig - eps);
            let lo = exact_expected_reward(&g, &z, &reward).unwrap();
            g.set_param(i, orig);
            let fd = (hi - lo) / (2.0 * eps);
            // loss_gradient is the gradient of -E[R].
            let analytic = -exact.loss_gradient[i];
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((fd - analytic).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn constant_rewards_give_zero_exact_gradient() {
        let g = tiny_generator(true);
        let z = NoiseVector::zero(g.hidden());
        let exact = exact_pg_gradient(&g, &z, &|_| 1.0).unwrap();
        assert!((exact.expected_reward - 1.0).abs() < 1e-9);
        // sum_x P(x) grad log P(x) = grad sum_x P(x) = grad 1 = 0.
        let max_abs = exact.loss_gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs < 1e-9, "max |component| {max_abs}");
    }

    #[test]
    fn indicator_reward_isolates_one_sequence_score_term() {
        // With R = 1[x = x*], the exact loss gradient collapses to
        // -P(x*) grad log P(x*), and E[R] = P(x*).
        let g = tiny_generator(false);
        let z = NoiseVector::zero(g.hidden());
        let target = TokenSequence::new(vec![g.output_token(1), g.output_token(2)]).unwrap();
        let target_ids = target.ids().to_vec();
        let reward =
            move |seq: &TokenSequence| -> f64 { if seq.ids() == target_ids { 1.0 } else { 0.0 } };
        let exact = exact_pg_gradient(&g, &z, &reward).unwrap();

        let p_target = g.log_prob(&z, &target).unwrap().exp();
        assert!((exact.expected_reward - p_target).abs() < 1e-12);
        let mut score = GeneratorGrads::zeros_like(&g);
        g.accumulate_grad(&z, &target, 1.0, &mut score).unwrap();
        let score_flat = score.to_flat();
        for (i, &lg) in exact.loss_gradient.iter().enumerate() {
            assert!(
                (lg + p_target * score_flat[i]).abs() < 1e-12,
                "component {i}: {lg} vs {}",
                -p_target * score_flat[i]
            );
        }
    }

    fn record(epoch: usize, class: u32, kind: StepKind, grad_norm: f64) -> TrainRecord {
        TrainRecord {
            epoch,
            class,
            step_kind: kind,
            g_loss: 0.0,
            d_loss: 0.0,
            grad_norm,
            ballast_size: 0,
            reward_mean: 0.5,
            wall_ms: 0,
        }
    }

    #[test]
    fn curves_split_by_direction_with_non_increasing_minimum() {
        let log = TrainLog {
            records: vec![
                record(1, 1, StepKind::Toxicity, 2.0),
                record(1, 2, StepKind::Toxicity, 4.0),
                record(2, 1, StepKind::Authenticity, 3.0),
                record(2, 2, StepKind::Authenticity, 1.0),
                record(3, 1, StepKind::Toxicity, 1.0),
                record(3, 2, StepKind::Toxicity, 1.0),
                record(4, 1, StepKind::Authenticity, 5.0),
                record(4, 2, StepKind::Authenticity, 5.0),
            ],
        };
        let curve = convergence_curve(&log);
        assert_eq!(curve.toxicity.len(), 2);
        assert_eq!(curve.authenticity.len(), 2);
        assert!(curve.joint.is_empty());
        // Epoch 1 toxicity: mean of 4 and 16.
        assert!((curve.toxicity[0].grad_norm_sq - 10.0).abs() < 1e-12);
        assert!((curve.toxicity[1].grad_norm_sq - 1.0).abs() < 1e-12);
        assert_eq!(curve.toxicity[1].running_min, 1.0);
        // Authenticity running minimum never increases.
        assert!((curve.authenticity[0].grad_norm_sq - 5.0).abs() < 1e-12);
        assert_eq!(curve.authenticity[1].running_min, 5.0);
        let csv = curve.to_csv_string();
        assert!(csv.starts_with("direction,epoch,grad_norm_sq,running_min\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
