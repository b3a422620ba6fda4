//! Loss assembly: the per-action policy-gradient loss over top-k
//! trajectories, the sentence-level MWER baseline, and the combined
//! training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// RL loss weight (lambda).
    pub rl_weight: f64,
    pub rnnt_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rl_weight: 0.5,
            rnnt_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.rl_weight < 0.0 || self.rnnt_weight < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// One trajectory's differentiable per-action log-probs paired with its
/// detached per-action values. Values are plain f64 by construction, which
/// is the stop-gradient contract made structural.
pub struct TrajectoryTerms<B: Ops> {
    pub logprobs: Vec<B::V>,
    pub values: Vec<f64>,
}

/// L_RL = (1/N) sum_traj sum_actions -logP * V. The gradient is the negated
/// sample policy-gradient estimator.
pub fn edrl_loss<B: Ops>(b: &B, batch: &[TrajectoryTerms<B>]) -> Result<B::V> {
    if batch.is_empty() {
        return Err(Error::Contract("edrl_loss needs at least one trajectory".into()));
    }
    let mut total = b.constant(Tensor::scalar(0.0));
    for traj in batch {
        if traj.logprobs.len() != traj.values.len() {
            return Err(Error::Contract(format!(
                "trajectory has {} log-probs but {} values",
                traj.logprobs.len(),
                traj.values.len()
            )));
        }
        for (lp, &v) in traj.logprobs.iter().zip(&traj.values) {
            total = b.add(&total, &b.scale(lp, -v))?;
        }
    }
    Ok(b.scale(&total, 1.0 / batch.len() as f64))
}

/// Sentence-level baseline: softmax-renormalize hypothesis log-probs over the
/// top-k and weight each hypothesis by its word-error count relative to the
/// unweighted batch mean. Word errors are gradient-detached.
pub fn mwer_loss<B: Ops>(b: &B, hyp_logprobs: &[B::V], word_errors: &[f64]) -> Result<B::V> {
    if hyp_logprobs.len() < 2 {
        return Err(Error::Contract(format!(
            "mwer_loss needs k >= 2 hypotheses, got {}",
            hyp_logprobs.len()
        )));
    }
    if hyp_logprobs.len() != word_errors.len() {
        return Err(Error::Contract("hypothesis/error count mismatch".into()));
    }
    let stacked = b.stack(hyp_logprobs)?;
    let log_p = b.log_softmax(&stacked);
    let p = b.exp(&log_p);
    let mean = word_errors.iter().sum::<f64>() / word_errors.len() as f64;
    let centered: Vec<f64> = word_errors.iter().map(|w| w - mean).collect();
    let weights = b.constant(Tensor::from_vec(centered));
    Ok(b.sum(&b.mul(&p, &weights)?))
}

/// lambda * L_RL + rnnt_weight * L_RNNT.
pub fn total_loss<B: Ops>(
    b: &B,
    rl: &B::V,
    rnnt: &B::V,
    weights: &LossWeights,
) -> Result<B::V> {
    weights.validate()?;
    b.add(
        &b.scale(rl, weights.rl_weight),
        &b.scale(rnnt, weights.rnnt_weight),
    )
}
