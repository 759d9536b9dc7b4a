//! Correlation statistics and system-level ranking.
//!
//! `kendall_tau` is the tau-a variant: tie pairs in either vector count as
//! neither concordant nor discordant while the denominator stays at
//! C(n,2). System mean scores are effectively tie-free, where the variants
//! coincide; `kendall_tau_b` is available for tie-corrected use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selective::CurvePoint;

/// Product-moment correlation of two equal-length, non-constant vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "pearson needs at least 3 points, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pearson input"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput(
            "pearson input is constant (zero variance)".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall rank correlation, tau-a convention.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    let (concordant, discordant, _, _, total) = count_pairs(a, b)?;
    Ok((concordant as f64 - discordant as f64) / total as f64)
}

/// Kendall rank correlation with tie correction (tau-b).
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<f64> {
    let (concordant, discordant, ties_a, ties_b, total) = count_pairs(a, b)?;
    let denom = ((total - ties_a) as f64 * (total - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::InvalidInput(
            "kendall_tau_b input is constant (all pairs tied)".into(),
        ));
    }
    Ok((concordant as f64 - discordant as f64) / denom)
}

fn count_pairs(a: &[f64], b: &[f64]) -> Result<(u64, u64, u64, u64, u64)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "kendall needs at least 2 points, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall input"));
    }
    let n = a.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut ties_a = 0u64;
    let mut ties_b = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                ties_a += 1;
            }
            if db == 0.0 {
                ties_b += 1;
            }
            let s = da * db;
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    let total = (n * (n - 1) / 2) as u64;
    Ok((concordant, discordant, ties_a, ties_b, total))
}

/// Per-system mean scores, judge-side and optionally from an external
/// reference grader. Means must be computed over the identical
/// instruction subset for every system in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub model_id: String,
    pub mean_judge_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reference_grader_score: Option<f64>,
}

/// Systems sorted by judge score, with the judge-vs-grader rank agreement
/// when grader means are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRanking {
    pub ranking: Vec<SystemScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kendall_tau: Option<f64>,
}

/// Rank systems by descending mean judge score.
///
/// With `require_tau`, every system must carry a reference grader mean;
/// the rank correlation is then computed over the two mean-score vectors.
pub fn system_ranking(judged: &[SystemScore], require_tau: bool) -> Result<SystemRanking> {
    if judged.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "system ranking needs at least 2 systems, got {}",
            judged.len()
        )));
    }
    let all_graded = judged
        .iter()
        .all(|s| s.mean_reference_grader_score.is_some());
    if require_tau && !all_graded {
        return Err(Error::InvalidInput(
            "reference grader mean missing for at least one system".into(),
        ));
    }
    let tau = if all_graded {
        let judge: Vec<f64> = judged.iter().map(|s| s.mean_judge_score).collect();
        let grader: Vec<f64> = judged
            .iter()
            .map(|s| s.mean_reference_grader_score.unwrap())
            .collect();
        Some(kendall_tau(&judge, &grader)?)
    } else {
        None
    };

    let mut ranking = judged.to_vec();
    ranking.sort_by(|x, y| {
        y.mean_judge_score
            .total_cmp(&x.mean_judge_score)
            .then_with(|| x.model_id.cmp(&y.model_id))
    });
    Ok(SystemRanking {
        ranking,
        kendall_tau: tau,
    })
}

/// Correlation summary for one system (or the pooled set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub model_id: String,
    pub n: usize,
    pub pearson: Option<f64>,
    pub pearson_pct: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub kendall_tau_pct: Option<f64>,
}

impl CorrelationRow {
    pub fn compute(model_id: &str, judge: &[f64], gold: &[f64]) -> CorrelationRow {
        let p = pearson(judge, gold).ok();
        let k = kendall_tau(judge, gold).ok();
        CorrelationRow {
            model_id: model_id.to_string(),
            n: judge.len(),
            pearson: p,
            pearson_pct: p.map(|v| v * 100.0),
            kendall_tau: k,
            kendall_tau_pct: k.map(|v| v * 100.0),
        }
    }
}

/// Full evaluation output: correlations, system ranking, risk-coverage curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_model: Vec<CorrelationRow>,
    pub overall: CorrelationRow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<SystemRanking>,
    pub curve: Vec<CurvePoint>,
}
