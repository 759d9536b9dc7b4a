//! Training-free confidence baselines.
//!
//! Both measures are reported as confidence (higher = better); the raw
//! sampling-variance uncertainty is recoverable by negation.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingVector;
use crate::error::{Error, Result};
use crate::scoregen::cosine_similarity;

/// Settings for the sampling-variance baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VroConfig {
    /// Extra responses sampled per record.
    #[serde(default = "default_extra_samples")]
    pub extra_samples: usize,
    #[serde(default)]
    pub temperature: f64,
}

fn default_extra_samples() -> usize {
    3
}

impl Default for VroConfig {
    fn default() -> Self {
        VroConfig {
            extra_samples: default_extra_samples(),
            temperature: 0.7,
        }
    }
}

impl VroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extra_samples == 0 {
            return Err(Error::Config(
                "policy.vro_extra_samples must be >= 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "vro temperature {} must be a finite value >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Negated average negative log-likelihood over output tokens.
///
/// `0` means every token was certain; more negative means less confident.
pub fn ppl_confidence(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptyInput("token logprobs"));
    }
    for &lp in token_logprobs {
        if lp.is_nan() || lp > 0.0 {
            return Err(Error::InvalidInput(format!(
                "token logprob {lp} must be <= 0"
            )));
        }
    }
    Ok(token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64)
}

/// Mean cosine similarity between the original response embedding and K
/// extra sampled response embeddings, in [-1, 1].
///
/// Similarities are summed in sorted order so the result is exactly
/// invariant under any permutation of the extras.
pub fn vro_confidence(original: &EmbeddingVector, extras: &[EmbeddingVector]) -> Result<f64> {
    if extras.is_empty() {
        return Err(Error::EmptyInput("extra samples"));
    }
    let mut sims = Vec::with_capacity(extras.len());
    for extra in extras {
        sims.push(cosine_similarity(original, extra)?);
    }
    sims.sort_by(f64::total_cmp);
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}
