//! Judge-driven decision policies: threshold-gated acceptance,
//! risk-coverage curves, two-stage selective refinement, and best-of-N
//! sampling.

use serde::{Deserialize, Serialize};

use crate::data::{derived_id, FailureEntry, Record};
use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, GatewayClient, LogprobMode};
use crate::judge::{featurize, predict_score, JudgeModel, PredictMode};

/// Accept-or-abstain threshold. A score equal to the threshold accepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePolicy {
    pub threshold: f64,
}

impl SelectivePolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "policy.threshold = {} must be finite",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Partition scored records into accepted (score >= threshold) and
/// abstained ids. The partition is exhaustive and disjoint.
pub fn apply_threshold(
    scored: &[(String, f64)],
    policy: &SelectivePolicy,
) -> Result<(Vec<String>, Vec<String>)> {
    policy.validate()?;
    let mut accepted = Vec::new();
    let mut abstained = Vec::new();
    for (id, score) in scored {
        if !score.is_finite() {
            return Err(Error::NonFinite("scores"));
        }
        if *score >= policy.threshold {
            accepted.push(id.clone());
        } else {
            abstained.push(id.clone());
        }
    }
    Ok((accepted, abstained))
}

/// One operating point of a risk-coverage sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub abstention_rate: f64,
    pub kept_count: usize,
    /// Mean quality of the kept records; absent when everything is
    /// abstained.
    pub mean_quality: Option<f64>,
}

/// Sweep the threshold over every achievable operating point for the
/// score multiset, from keep-everything to abstain-everything.
///
/// Each point abstains the records in the k lowest distinct score groups
/// and reports the mean quality of the rest; points come out ordered by
/// abstention rate.
pub fn risk_coverage_curve(scored: &[(f64, f64)]) -> Result<Vec<CurvePoint>> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("scored records"));
    }
    if scored.iter().any(|(s, q)| !s.is_finite() || !q.is_finite()) {
        return Err(Error::NonFinite("scored records"));
    }
    let n = scored.len();
    let mut by_score: Vec<(f64, f64)> = scored.to_vec();
    by_score.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Distinct-score group boundaries, ascending.
    let mut boundaries = vec![0usize];
    for i in 1..n {
        if by_score[i].0 != by_score[i - 1].0 {
            boundaries.push(i);
        }
    }
    boundaries.push(n);

    // Suffix sums of quality over the sorted order.
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + by_score[i].1;
    }

    let mut curve = Vec::with_capacity(boundaries.len());
    for &cut in &boundaries {
        let kept = n - cut;
        curve.push(CurvePoint {
            abstention_rate: cut as f64 / n as f64,
            kept_count: kept,
            mean_quality: if kept > 0 {
                Some(suffix[cut] / kept as f64)
            } else {
                None
            },
        });
    }
    Ok(curve)
}

/// Versioned prompt templates for the two refinement stages. Placeholders
/// `{instruction}`, `{response}`, `{score}`, and `{feedback}` are
/// substituted verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTemplates {
    pub version: String,
    pub feedback: String,
    pub refine: String,
}

pub const DEFAULT_FEEDBACK_TEMPLATE: &str = "You previously answered a question and your answer \
was rated {score} out of 9 by a quality judge.\n\n[Question]\n\n{instruction}\n\n[Your Answer]\n\n\
{response}\n\nProvide concise, actionable feedback describing how to improve the answer. Do not \
rewrite the answer itself.";

pub const DEFAULT_REFINE_TEMPLATE: &str = "Improve your previous answer to the question using \
the feedback.\n\n[Question]\n\n{instruction}\n\n[Previous Answer]\n\n{response}\n\n[Feedback]\n\n\
{feedback}\n\nReply with the improved answer only.";

impl Default for RefineTemplates {
    fn default() -> Self {
        RefineTemplates {
            version: "v1".into(),
            feedback: DEFAULT_FEEDBACK_TEMPLATE.into(),
            refine: DEFAULT_REFINE_TEMPLATE.into(),
        }
    }
}

impl RefineTemplates {
    pub fn validate(&self) -> Result<()> {
        for (name, template, slots) in [
            (
                "templates.feedback",
                &self.feedback,
                vec!["{instruction}", "{response}", "{score}"],
            ),
            (
                "templates.refine",
                &self.refine,
                vec!["{instruction}", "{response}", "{feedback}"],
            ),
        ] {
            for slot in slots {
                if !template.contains(slot) {
                    return Err(Error::Config(format!("{name} is missing the {slot} slot")));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of selective refinement for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub instruction_id: String,
    pub model_id: String,
    pub sample_index: u32,
    pub first_response: String,
    pub judge_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_response: Option<String>,
}

impl RefinementRecord {
    pub fn derived_id(&self) -> String {
        derived_id(&self.instruction_id, &self.model_id, self.sample_index)
    }

    pub fn was_refined(&self) -> bool {
        self.second_response.is_some()
    }
}

impl Record for RefinementRecord {
    const KIND: &'static str = "refinement";

    fn key(&self) -> Option<String> {
        Some(self.derived_id())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.feedback.is_some() != self.second_response.is_some() {
            return Err("feedback and second_response must be present together".into());
        }
        if !self.judge_score.is_finite() {
            return Err(format!("judge_score = {} is not finite", self.judge_score));
        }
        Ok(())
    }
}

/// Input to one refinement decision.
pub struct RefineInput<'a> {
    pub instruction_id: &'a str,
    pub model_id: &'a str,
    pub sample_index: u32,
    pub instruction: &'a str,
    pub first_response: &'a str,
    pub judge_score: f64,
}

/// Gate one response on the policy: at or above the threshold it passes
/// through untouched (zero gateway calls); below it, a feedback
/// generation call and then a revision call produce the second response.
/// A gateway failure at either stage keeps the first response and is
/// reported.
pub fn selective_refine(
    input: &RefineInput<'_>,
    policy: &SelectivePolicy,
    model: &GatewayClient,
    templates: &RefineTemplates,
) -> (RefinementRecord, Option<FailureEntry>) {
    let mut record = RefinementRecord {
        instruction_id: input.instruction_id.to_string(),
        model_id: input.model_id.to_string(),
        sample_index: input.sample_index,
        first_response: input.first_response.to_string(),
        judge_score: input.judge_score,
        feedback: None,
        second_response: None,
    };
    if input.judge_score >= policy.threshold {
        return (record, None);
    }

    let feedback_prompt = templates
        .feedback
        .replace("{instruction}", input.instruction)
        .replace("{response}", input.first_response)
        .replace("{score}", &format!("{:.2}", input.judge_score));
    let feedback =
        match model.chat_complete(&[ChatMessage::user(feedback_prompt)], LogprobMode::Omit) {
            Ok((text, _)) => text,
            Err(e) => {
                return (
                    record,
                    Some(FailureEntry {
                        id: derived_id(input.instruction_id, input.model_id, input.sample_index),
                        stage: "refine_feedback".into(),
                        reason: e.to_string(),
                    }),
                )
            }
        };

    let refine_prompt = templates
        .refine
        .replace("{instruction}", input.instruction)
        .replace("{response}", input.first_response)
        .replace("{feedback}", &feedback);
    match model.chat_complete(&[ChatMessage::user(refine_prompt)], LogprobMode::Omit) {
        Ok((second, _)) => {
            record.feedback = Some(feedback);
            record.second_response = Some(second);
            (record, None)
        }
        Err(e) => (
            record,
            Some(FailureEntry {
                id: derived_id(input.instruction_id, input.model_id, input.sample_index),
                stage: "refine_revision".into(),
                reason: e.to_string(),
            }),
        ),
    }
}

/// One judge-scored sample from a best-of-N pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_index: u32,
    pub response: String,
    pub score: f64,
}

/// Highest score wins; exact ties go to the lowest sample index.
pub(crate) fn select_best(samples: &[ScoredSample]) -> Option<&ScoredSample> {
    samples
        .iter()
        .reduce(|best, s| if s.score > best.score { s } else { best })
}

/// Sample `n` responses for an instruction, score each with the judge's
/// reference-free head, and return the best plus the full scored pool.
pub fn best_of_n(
    instruction: &str,
    generator: &GatewayClient,
    embedder: &GatewayClient,
    judge: &JudgeModel,
    n: usize,
) -> Result<(ScoredSample, Vec<ScoredSample>, Vec<FailureEntry>)> {
    if n == 0 {
        return Err(Error::InvalidInput("best-of-n needs n >= 1".into()));
    }
    if instruction.is_empty() {
        return Err(Error::EmptyInput("instruction"));
    }
    let x_emb = embedder.embed(instruction)?;
    let indices: Vec<u32> = (0..n as u32).collect();
    let outcomes = parallel_best_of_n(generator, instruction, &indices);

    let mut scored = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for (sample_index, outcome) in indices.iter().zip(outcomes) {
        let result = outcome.and_then(|response| {
            let y_emb = embedder.embed(&response)?;
            let features = featurize(&x_emb, &y_emb, None)?;
            let (score, _) = predict_score(judge, &features, PredictMode::Student)?;
            Ok(ScoredSample {
                sample_index: *sample_index,
                response,
                score,
            })
        });
        match result {
            Ok(sample) => scored.push(sample),
            Err(e) => failures.push(FailureEntry {
                id: format!("sample_{sample_index}"),
                stage: "best_of_n".into(),
                reason: e.to_string(),
            }),
        }
    }
    let best = select_best(&scored)
        .cloned()
        .ok_or_else(|| Error::InvalidInput("all best-of-n samples failed".into()))?;
    Ok((best, scored, failures))
}

fn parallel_best_of_n(
    generator: &GatewayClient,
    instruction: &str,
    indices: &[u32],
) -> Vec<Result<String>> {
    crate::gateway::parallel_map(
        indices,
        generator.config().request_parallelism,
        |_, &sample_index| {
            generator
                .chat_complete_salted(
                    &[ChatMessage::user(instruction.to_string())],
                    LogprobMode::Omit,
                    Some(u64::from(sample_index)),
                )
                .map(|(text, _)| text)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::EndpointConfig;
    use crate::judge::{init_judge, JudgeTrainConfig};
    use proptest::prelude::*;

    fn scored(scores: &[f64]) -> Vec<(String, f64)> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("r{i}"), s))
            .collect()
    }

    #[test]
    fn threshold_endpoints() {
        let records = scored(&[2.0, 5.0, 8.0]);
        let (acc, abs) = apply_threshold(&records, &SelectivePolicy { threshold: -10.0 }).unwrap();
        assert_eq!(acc.len(), 3);
        assert!(abs.is_empty());
        let (acc, abs) = apply_threshold(&records, &SelectivePolicy { threshold: 100.0 }).unwrap();
        assert!(acc.is_empty());
        assert_eq!(abs.len(), 3);
    }

    #[test]
    fn threshold_boundary_accepts() {
        let records = scored(&[2.0, 5.0, 8.0]);
        let (acc, abs) = apply_threshold(&records, &SelectivePolicy { threshold: 5.0 }).unwrap();
        assert_eq!(acc, vec!["r1".to_string(), "r2".to_string()]);
        assert_eq!(abs, vec!["r0".to_string()]);
    }

    #[test]
    fn curve_flat_when_quality_constant() {
        let data: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 3.5)).collect();
        let curve = risk_coverage_curve(&data).unwrap();
        for p in &curve {
            if let Some(q) = p.mean_quality {
                assert!((q - 3.5).abs() < 1e-12);
            }
        }
        assert_eq!(curve.last().unwrap().kept_count, 0);
    }

    #[test]
    fn curve_single_record_degenerates() {
        let curve = risk_coverage_curve(&[(4.0, 7.0)]).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0].abstention_rate, 0.0);
        assert_eq!(curve[0].mean_quality, Some(7.0));
        assert_eq!(curve[1].abstention_rate, 1.0);
        assert_eq!(curve[1].mean_quality, None);
        assert!(risk_coverage_curve(&[]).is_err());
    }

    #[test]
    fn curve_kept_mean_nondecreasing_when_score_orders_quality() {
        let data: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, (i * i) as f64)).collect();
        let curve = risk_coverage_curve(&data).unwrap();
        let means: Vec<f64> = curve.iter().filter_map(|p| p.mean_quality).collect();
        for w in means.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn curve_matches_exhaustive_threshold_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let data: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.random_range(0..8) as f64, rng.random_range(0.0..10.0)))
            .collect();
        let curve = risk_coverage_curve(&data).unwrap();

        // Oracle: apply the accept rule (score >= eta) for eta below the
        // minimum and just above every distinct score.
        let mut etas: Vec<f64> = data.iter().map(|&(s, _)| s + 0.5).collect();
        etas.push(f64::NEG_INFINITY);
        etas.sort_by(f64::total_cmp);
        etas.dedup();
        let mut expected: Vec<(f64, usize, Option<f64>)> = etas
            .iter()
            .map(|&eta| {
                let kept: Vec<f64> = data
                    .iter()
                    .filter(|&&(s, _)| s >= eta)
                    .map(|&(_, q)| q)
                    .collect();
                let rate = (data.len() - kept.len()) as f64 / data.len() as f64;
                let mean = if kept.is_empty() {
                    None
                } else {
                    Some(kept.iter().sum::<f64>() / kept.len() as f64)
                };
                (rate, kept.len(), mean)
            })
            .collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0));
        expected.dedup_by(|a, b| a.0 == b.0);

        assert_eq!(curve.len(), expected.len());
        for (point, (rate, kept, mean)) in curve.iter().zip(expected) {
            assert_eq!(point.abstention_rate, rate);
            assert_eq!(point.kept_count, kept);
            match (point.mean_quality, mean) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => panic!("mismatched point {other:?}"),
            }
        }
    }

    fn refine_input<'a>(score: f64, instruction: &'a str, response: &'a str) -> RefineInput<'a> {
        RefineInput {
            instruction_id: "i1",
            model_id: "m",
            sample_index: 0,
            instruction,
            first_response: response,
            judge_score: score,
        }
    }

    #[test]
    fn refine_passes_through_above_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let client =
            GatewayClient::new(EndpointConfig::mock("mock-gen", 0.7), Some(dir.path())).unwrap();
        let policy = SelectivePolicy { threshold: 4.0 };
        let input = refine_input(6.0, "Explain tides", "first answer");
        let (record, failure) =
            selective_refine(&input, &policy, &client, &RefineTemplates::default());
        assert!(failure.is_none());
        assert!(!record.was_refined());
        assert_eq!(record.first_response, "first answer");
        // Pass-through must not touch the gateway.
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn refine_below_threshold_runs_two_stages() {
        let dir = tempfile::tempdir().unwrap();
        let client =
            GatewayClient::new(EndpointConfig::mock("mock-gen", 0.7), Some(dir.path())).unwrap();
        let policy = SelectivePolicy { threshold: 4.0 };
        let input = refine_input(2.0, "Explain tides", "first answer");
        let (record, failure) =
            selective_refine(&input, &policy, &client, &RefineTemplates::default());
        assert!(failure.is_none());
        assert!(record.was_refined());
        assert!(record.feedback.is_some());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
        record.validate().unwrap();
    }

    #[test]
    fn refine_failure_keeps_first_response() {
        let client = GatewayClient::new(EndpointConfig::mock("mock-gen", 0.7), None).unwrap();
        let policy = SelectivePolicy { threshold: 4.0 };
        // The sentinel rides inside the instruction, so the feedback
        // stage fails.
        let input = refine_input(2.0, "MOCK_FAIL instruction", "first answer");
        let (record, failure) =
            selective_refine(&input, &policy, &client, &RefineTemplates::default());
        let failure = failure.unwrap();
        assert_eq!(failure.stage, "refine_feedback");
        assert!(!record.was_refined());
        assert_eq!(record.first_response, "first answer");
    }

    #[test]
    fn select_best_breaks_ties_by_lowest_index() {
        let samples = vec![
            ScoredSample {
                sample_index: 0,
                response: "a".into(),
                score: 3.1,
            },
            ScoredSample {
                sample_index: 1,
                response: "b".into(),
                score: 9.0,
            },
            ScoredSample {
                sample_index: 2,
                response: "c".into(),
                score: 9.0,
            },
        ];
        assert_eq!(select_best(&samples).unwrap().sample_index, 1);
        let argmax = vec![
            ScoredSample {
                sample_index: 0,
                response: "a".into(),
                score: 3.1,
            },
            ScoredSample {
                sample_index: 1,
                response: "b".into(),
                score: 9.0,
            },
            ScoredSample {
                sample_index: 2,
                response: "c".into(),
                score: 5.2,
            },
        ];
        assert_eq!(select_best(&argmax).unwrap().sample_index, 1);
    }

    #[test]
    fn best_of_n_identity_and_pool() {
        let generator = GatewayClient::new(EndpointConfig::mock("mock-gen", 0.8), None).unwrap();
        let embedder = GatewayClient::new(EndpointConfig::mock("mock-embed", 0.0), None).unwrap();
        let judge =
            init_judge(crate::gateway::MOCK_EMBED_DIM, &JudgeTrainConfig::default()).unwrap();
        let (best, pool, failures) =
            best_of_n("Explain tides.", &generator, &embedder, &judge, 1).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(best.sample_index, 0);
        assert!(failures.is_empty());

        let (best, pool, _) =
            best_of_n("Explain tides.", &generator, &embedder, &judge, 6).unwrap();
        assert_eq!(pool.len(), 6);
        let oracle = pool
            .iter()
            .map(|s| s.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.score, oracle);
        assert!(best_of_n("x", &generator, &embedder, &judge, 0).is_err());
    }

    proptest! {
        #[test]
        fn threshold_partition_properties(
            scores in proptest::collection::vec(-10.0f64..10.0, 0..60),
            eta1 in -12.0f64..12.0,
            delta in 0.0f64..5.0,
        ) {
            let records = scored(&scores);
            let policy1 = SelectivePolicy { threshold: eta1 };
            let policy2 = SelectivePolicy { threshold: eta1 + delta };
            let (acc1, abs1) = apply_threshold(&records, &policy1).unwrap();
            let (acc2, _) = apply_threshold(&records, &policy2).unwrap();
            prop_assert_eq!(acc1.len() + abs1.len(), records.len());
            let acc_set: std::collections::HashSet<_> = acc1.iter().collect();
            for id in &abs1 {
                prop_assert!(!acc_set.contains(id));
            }
            // Raising the threshold never grows the accepted set.
            prop_assert!(acc2.len() <= acc1.len());
            let acc1_set: std::collections::HashSet<_> = acc1.into_iter().collect();
            for id in acc2 {
                prop_assert!(acc1_set.contains(&id));
            }
        }

        #[test]
        fn curve_rates_are_sorted_and_achievable(
            scores in proptest::collection::vec(0.0f64..6.0, 1..50),
        ) {
            let data: Vec<(f64, f64)> = scores.iter().map(|&s| (s.floor(), s)).collect();
            let curve = risk_coverage_curve(&data).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].abstention_rate > w[0].abstention_rate);
            }
            prop_assert_eq!(curve[0].abstention_rate, 0.0);
            prop_assert_eq!(curve.last().unwrap().abstention_rate, 1.0);
            let n = data.len();
            for p in &curve {
                let count = (p.abstention_rate * n as f64).round() as usize;
                prop_assert_eq!(n - count, p.kept_count);
            }
        }
    }
}
