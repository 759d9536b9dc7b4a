//! Score recalibration: standardization, mixing-weight search, decile
//! discretization, and uniform class adjustment.
//!
//! The training path combines the 1-10 self-evaluation rating with the
//! discretized response-reference similarity as a weighted average, then
//! remaps the combined score to a uniform 1-10 class distribution and
//! shifts to 0-9 training labels. The mixing weight is picked on a small
//! labeled dev set by grid search over the correlation with gold scores;
//! both dev columns are Z-scored first so the weight is scale-free.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FailureEntry, RatingRecord, Record};
use crate::error::{Error, Result};
use crate::metrics::pearson;

/// Grid step for the mixing-weight search.
pub const DEFAULT_ALPHA_STEP: f64 = 0.1;

/// One dev-set row: both score channels plus the gold score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub self_eval: f64,
    pub cosine: f64,
    pub gold_score: f64,
}

impl Record for DevRecord {
    const KIND: &'static str = "dev";

    fn key(&self) -> Option<String> {
        None
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("self_eval", self.self_eval),
            ("cosine", self.cosine),
            ("gold_score", self.gold_score),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} = {v} is not finite"));
            }
        }
        Ok(())
    }
}

/// Result of the mixing-weight grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearchResult {
    pub alpha_star: f64,
    pub per_alpha_correlations: Vec<(f64, f64)>,
}

/// Standardize to mean 0 and unit variance: `(v - mean) / sd`.
///
/// `sd` is the population standard deviation (1/n normalization), so
/// `[1, 2, 3]` maps to `[-1.2247..., 0, 1.2247...]`.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "zscore needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("zscore input"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::InvalidInput(
            "zscore input is constant (zero variance)".into(),
        ));
    }
    Ok(values.iter().map(|&v| (v - mean) / sd).collect())
}

/// Grid-search the mixing weight on a dev set, default 0.1 step.
pub fn search_alpha(dev: &[DevRecord]) -> Result<AlphaSearchResult> {
    search_alpha_with_step(dev, DEFAULT_ALPHA_STEP)
}

/// Grid-search the mixing weight with a configurable step.
///
/// Both columns are Z-scored, then for each grid alpha the correlation of
/// `alpha * self_eval + (1 - alpha) * cosine` with the gold scores is
/// computed. Ties break toward the larger alpha.
pub fn search_alpha_with_step(dev: &[DevRecord], step: f64) -> Result<AlphaSearchResult> {
    if dev.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "alpha search needs at least 3 dev records, got {}",
            dev.len()
        )));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha step must be in (0, 1], got {step}"
        )));
    }
    let self_col: Vec<f64> = dev.iter().map(|r| r.self_eval).collect();
    let cos_col: Vec<f64> = dev.iter().map(|r| r.cosine).collect();
    let gold: Vec<f64> = dev.iter().map(|r| r.gold_score).collect();

    let z1 = zscore(&self_col)
        .map_err(|_| Error::InvalidInput("self_eval dev column is degenerate".into()))?;
    let z2 = zscore(&cos_col)
        .map_err(|_| Error::InvalidInput("cosine dev column is degenerate".into()))?;

    // The grid always spans both endpoints, whatever the step.
    let mut alphas = Vec::new();
    let mut k = 0u32;
    loop {
        let alpha = f64::from(k) * step;
        if alpha >= 1.0 - 1e-12 {
            break;
        }
        alphas.push(alpha);
        k += 1;
    }
    alphas.push(1.0);

    let mut grid = Vec::with_capacity(alphas.len());
    let mut best: Option<(f64, f64)> = None;
    for alpha in alphas {
        let mixed: Vec<f64> = z1
            .iter()
            .zip(z2.iter())
            .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        // A grid point can degenerate (e.g. the two channels cancel);
        // skip it rather than fail the whole search.
        let r = match pearson(&mixed, &gold) {
            Ok(r) => r,
            Err(_) => continue,
        };
        grid.push((alpha, r));
        best = match best {
            Some((_, best_r)) if r < best_r => best,
            _ => Some((alpha, r)),
        };
    }
    let (alpha_star, _) = best.ok_or_else(|| {
        Error::InvalidInput("every grid point was degenerate in alpha search".into())
    })?;
    Ok(AlphaSearchResult {
        alpha_star,
        per_alpha_correlations: grid,
    })
}

/// Weighted average `alpha * z1 + (1 - alpha) * z2`.
pub fn combine(z1: f64, z2: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha = {alpha} outside [0, 1]"
        )));
    }
    Ok(alpha * z1 + (1.0 - alpha) * z2)
}

/// How raw similarities are mapped onto the 1-10 scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    /// Equal-frequency decile binning over the batch (rank-based).
    #[default]
    EqualFrequency,
    /// Ten equal-width intervals over the [-1, 1] similarity domain.
    EqualWidth,
}

/// Discretize raw similarities in [-1, 1] onto classes 1..=10 by
/// equal-frequency decile binning over the batch.
///
/// Equal raw values always share a class (the class of the tie group's
/// lowest rank), so a larger raw value never maps to a smaller class.
pub fn discretize_cosine(raw: &[f64]) -> Result<Vec<u8>> {
    discretize_cosine_with_mode(raw, BinningMode::EqualFrequency)
}

pub fn discretize_cosine_with_mode(raw: &[f64], mode: BinningMode) -> Result<Vec<u8>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("similarity batch"));
    }
    for &v in raw {
        if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
            return Err(Error::InvalidInput(format!(
                "similarity value {v} outside [-1, 1]"
            )));
        }
    }
    match mode {
        BinningMode::EqualFrequency => {
            let n = raw.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| raw[i].total_cmp(&raw[j]).then(i.cmp(&j)));
            let mut classes = vec![0u8; n];
            let mut pos = 0;
            while pos < n {
                let mut end = pos + 1;
                while end < n && raw[order[end]] == raw[order[pos]] {
                    end += 1;
                }
                let class = rank_class(pos, n);
                for &idx in &order[pos..end] {
                    classes[idx] = class;
                }
                pos = end;
            }
            Ok(classes)
        }
        BinningMode::EqualWidth => Ok(raw
            .iter()
            .map(|&v| {
                let bin = ((v + 1.0) * 5.0).floor() as i64 + 1;
                bin.clamp(1, 10) as u8
            })
            .collect()),
    }
}

fn rank_class(rank: usize, n: usize) -> u8 {
    ((rank * 10 / n) + 1).min(10) as u8
}

/// Remap combined scores onto classes 1..=10 so the batch conforms to a
/// uniform class distribution.
///
/// Ranks break ties by original index, so class counts differ by at most
/// one even on heavily tied inputs, and the relative order of distinct
/// values is always preserved.
pub fn uniformize(combined: &[f64]) -> Result<Vec<u8>> {
    if combined.is_empty() {
        return Err(Error::EmptyInput("combined score batch"));
    }
    if combined.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("combined scores"));
    }
    let n = combined.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| combined[i].total_cmp(&combined[j]).then(i.cmp(&j)));
    let mut classes = vec![0u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        classes[idx] = rank_class(rank, n);
    }
    Ok(classes)
}

/// Shift classes 1..=10 down to the 0..=9 training-label range.
pub fn shift_labels(classes: &[u8]) -> Result<Vec<u8>> {
    classes
        .iter()
        .map(|&c| {
            if (1..=10).contains(&c) {
                Ok(c - 1)
            } else {
                Err(Error::InvalidInput(format!("class {c} outside 1..=10")))
            }
        })
        .collect()
}

/// Combine, uniformize, and shift a batch of rating records into training
/// labels. Records missing `self_eval` or `cosine_class` are excluded and
/// reported.
pub fn build_training_set(
    ratings: &Dataset<RatingRecord>,
    alpha_star: f64,
) -> Result<(Dataset<RatingRecord>, Vec<FailureEntry>)> {
    let mut eligible: Vec<RatingRecord> = Vec::new();
    let mut excluded = Vec::new();
    for r in ratings.iter() {
        match (r.self_eval, r.cosine_class) {
            (Some(_), Some(_)) => eligible.push(r.clone()),
            (se, cc) => {
                let reason = match (se, cc) {
                    (None, None) => "missing self_eval and cosine_class",
                    (None, _) => "missing self_eval",
                    _ => "missing cosine_class",
                };
                excluded.push(FailureEntry {
                    id: r.derived_id(),
                    stage: "build_training_set".into(),
                    reason: reason.into(),
                });
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::EmptyInput("training-eligible rating records"));
    }

    let mut combined = Vec::with_capacity(eligible.len());
    for r in &eligible {
        combined.push(combine(
            f64::from(r.self_eval.unwrap()),
            f64::from(r.cosine_class.unwrap()),
            alpha_star,
        )?);
    }
    let labels = shift_labels(&uniformize(&combined)?)?;

    let mut out = Dataset::new();
    for ((mut r, c), label) in eligible.into_iter().zip(combined).zip(labels) {
        r.combined = Some(c);
        r.final_class = Some(label);
        out.push(r)?;
    }
    Ok((out, excluded))
}
