//! Quality-score generation: sample model responses, collect
//! reference-based self-evaluation ratings, and compute
//! response-reference cosine similarities.

use crate::data::{
    Dataset, EmbeddingVector, FailureEntry, InstructionRecord, RatingRecord, ResponseRecord,
};
use crate::error::{Error, Result};
use crate::gateway::{extract_rating, parallel_map, ChatMessage, GatewayClient, LogprobMode};

/// The sentence that pins the expected rating format; also the anchor the
/// prompt-invariant tests check for.
pub const RATING_FORMAT_SENTENCE: &str = "you must rate the response on a scale of 1 to 10 by \
strictly following this format: \"{\"rating\": your rating}\". For example, \"{\"rating\": 5}\".";

const PROMPT_PREFIX: &str = "Please act as an impartial judge and evaluate the quality of the \
response provided by an AI assistant to the user question displayed below. Your evaluation \
should consider factors such as the helpfulness, relevance, accuracy, depth, creativity, and \
level of detail of the response. You will be given a reference answer and the assistant's \
answer. Begin your evaluation by comparing the assistant's answer with the reference answer. \
Be as objective as possible. After providing your explanation, in the last new line, ";

const PROMPT_AFTER_QUESTION: &str = "\n\n[The Start of Reference Answer]\n\n";
const PROMPT_AFTER_REFERENCE: &str =
    "\n\n[The End of Reference Answer]\n\n[The Start of Assistant's Answer]\n\n";
const PROMPT_SUFFIX: &str = "\n\n[The End of Assistant's Answer]";

const REPROMPT_REMINDER: &str = "Reply with your rating strictly in the format {\"rating\": N} \
where N is an integer from 1 to 10.";

/// A fully rendered self-evaluation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfEvalPrompt {
    pub rendered: String,
}

/// Render the reference-based evaluation prompt: question, then reference
/// answer, then the assistant's answer, with the rating-format sentence.
pub fn build_self_eval_prompt(
    question: &str,
    answer: &str,
    reference: &str,
) -> Result<SelfEvalPrompt> {
    if question.is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    if answer.is_empty() {
        return Err(Error::EmptyInput("answer"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    let mut rendered = String::with_capacity(
        PROMPT_PREFIX.len()
            + RATING_FORMAT_SENTENCE.len()
            + question.len()
            + reference.len()
            + answer.len()
            + 96,
    );
    rendered.push_str(PROMPT_PREFIX);
    rendered.push_str(RATING_FORMAT_SENTENCE);
    rendered.push_str("\n\n[Question]\n\n");
    rendered.push_str(question);
    rendered.push_str(PROMPT_AFTER_QUESTION);
    rendered.push_str(reference);
    rendered.push_str(PROMPT_AFTER_REFERENCE);
    rendered.push_str(answer);
    rendered.push_str(PROMPT_SUFFIX);
    Ok(SelfEvalPrompt { rendered })
}

/// Sample `samples_per_instruction` responses per instruction, capturing
/// token logprobs when the backend provides them. Failed records are
/// reported, never silently dropped.
pub fn sample_responses(
    instructions: &Dataset<InstructionRecord>,
    client: &GatewayClient,
    samples_per_instruction: usize,
) -> Result<(Dataset<ResponseRecord>, Vec<FailureEntry>)> {
    if samples_per_instruction == 0 {
        return Err(Error::InvalidInput(
            "samples_per_instruction must be >= 1".into(),
        ));
    }
    let model_id = client.config().model_name.clone();
    let jobs: Vec<(&InstructionRecord, u32)> = instructions
        .iter()
        .flat_map(|inst| (0..samples_per_instruction as u32).map(move |k| (inst, k)))
        .collect();

    let outcomes = parallel_map(
        &jobs,
        client.config().request_parallelism,
        |_, &(inst, sample_index)| {
            let messages = [ChatMessage::user(inst.instruction.clone())];
            client
                .chat_complete_salted(
                    &messages,
                    LogprobMode::Prefer,
                    Some(u64::from(sample_index)),
                )
                .map(|(response, token_logprobs)| ResponseRecord {
                    instruction_id: inst.id.clone(),
                    model_id: model_id.clone(),
                    sample_index,
                    response,
                    token_logprobs,
                })
                .map_err(|e| (inst.id.clone(), e))
        },
    );

    let mut dataset = Dataset::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(record) => dataset.push(record)?,
            Err((id, e)) => failures.push(FailureEntry {
                id,
                stage: "sample_responses".into(),
                reason: e.to_string(),
            }),
        }
    }
    Ok((dataset, failures))
}

/// Ask the evaluator to rate (question, answer) against the reference.
///
/// On an unparseable reply the evaluator is re-prompted once with a
/// format reminder; `Ok(None)` marks the record unscored after that.
pub fn self_evaluate(
    evaluator: &GatewayClient,
    question: &str,
    answer: &str,
    reference: &str,
) -> Result<Option<u8>> {
    let prompt = build_self_eval_prompt(question, answer, reference)?;
    let messages = vec![ChatMessage::user(prompt.rendered)];
    let (reply, _) = evaluator.chat_complete(&messages, LogprobMode::Omit)?;
    match extract_rating(&reply) {
        Ok(rating) => Ok(Some(rating)),
        Err(Error::NoRating) | Err(Error::RatingOutOfRange { .. }) => {
            let mut retry = messages;
            retry.push(ChatMessage::assistant(reply));
            retry.push(ChatMessage::user(REPROMPT_REMINDER));
            let (reply, _) = evaluator.chat_complete(&retry, LogprobMode::Omit)?;
            match extract_rating(&reply) {
                Ok(rating) => Ok(Some(rating)),
                Err(Error::NoRating) | Err(Error::RatingOutOfRange { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        }
        Err(e) => Err(e),
    }
}

/// Cosine similarity of two embeddings, clamped against floating-point
/// overshoot.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embed the two answer texts and return their cosine similarity.
///
/// Only the answer texts are embedded, not the instruction.
pub fn cosine_score(embedder: &GatewayClient, answer: &str, reference: &str) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::EmptyInput("answer"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    let a = embedder.embed(answer)?;
    let b = embedder.embed(reference)?;
    cosine_similarity(&a, &b)
}

/// Run self-evaluation plus cosine scoring over a response dataset,
/// joining responses to their instructions by id.
pub fn rate_responses(
    instructions: &Dataset<InstructionRecord>,
    responses: &Dataset<ResponseRecord>,
    evaluator: &GatewayClient,
    embedder: &GatewayClient,
) -> Result<(Dataset<RatingRecord>, Vec<FailureEntry>)> {
    let by_id: std::collections::HashMap<&str, &InstructionRecord> = instructions
        .iter()
        .map(|inst| (inst.id.as_str(), inst))
        .collect();

    let parallelism = evaluator
        .config()
        .request_parallelism
        .min(embedder.config().request_parallelism)
        .max(1);

    struct RateOutcome {
        record: RatingRecord,
        failures: Vec<FailureEntry>,
    }

    let outcomes = parallel_map(responses.records(), parallelism, |_, response| {
        let id = response.derived_id();
        let mut record = RatingRecord {
            instruction_id: response.instruction_id.clone(),
            model_id: response.model_id.clone(),
            sample_index: response.sample_index,
            self_eval: None,
            cosine_raw: None,
            cosine_class: None,
            combined: None,
            final_class: None,
        };
        let mut failures = Vec::new();

        let inst = match by_id.get(response.instruction_id.as_str()) {
            Some(inst) => inst,
            None => {
                failures.push(FailureEntry {
                    id,
                    stage: "rate".into(),
                    reason: format!("unknown instruction_id {}", response.instruction_id),
                });
                return RateOutcome { record, failures };
            }
        };
        let reference = match &inst.reference {
            Some(r) if !r.is_empty() => r,
            _ => {
                failures.push(FailureEntry {
                    id,
                    stage: "rate".into(),
                    reason: "instruction has no reference answer".into(),
                });
                return RateOutcome { record, failures };
            }
        };

        match self_evaluate(evaluator, &inst.instruction, &response.response, reference) {
            Ok(Some(rating)) => record.self_eval = Some(rating),
            Ok(None) => failures.push(FailureEntry {
                id: id.clone(),
                stage: "self_evaluate".into(),
                reason: "no parseable rating after one re-prompt".into(),
            }),
            Err(e) => failures.push(FailureEntry {
                id: id.clone(),
                stage: "self_evaluate".into(),
                reason: e.to_string(),
            }),
        }
        match cosine_score(embedder, &response.response, reference) {
            Ok(value) => record.cosine_raw = Some(value),
            Err(e) => failures.push(FailureEntry {
                id,
                stage: "cosine_score".into(),
                reason: e.to_string(),
            }),
        }
        RateOutcome { record, failures }
    });

    let mut ratings = Dataset::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        ratings.push(outcome.record)?;
        failures.extend(outcome.failures);
    }
    Ok((ratings, failures))
}
