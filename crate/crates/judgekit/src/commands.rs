//! Pipeline commands behind the CLI: each one reads record files, runs
//! one stage, and writes its outputs plus the resolved config under the
//! run's output directory. With a warm cache a rerun of any command is
//! byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ppl_confidence, vro_confidence, VroConfig};
use crate::calibrate::{
    build_training_set, discretize_cosine_with_mode, search_alpha_with_step, AlphaSearchResult,
};
use crate::config::RunConfig;
use crate::data::{
    load_dataset, save_records, Dataset, FailureEntry, InstructionRecord, RatingRecord, Record,
    ResponseRecord, ScoreRecord,
};
use crate::error::{Error, Result};
use crate::gateway::{parallel_map, GatewayClient};
use crate::judge::{
    evaluate_mean_loss, featurize, init_judge, load_checkpoint, predict_score, save_checkpoint,
    train_judge, JudgeFeatures, PredictMode,
};
use crate::metrics::{system_ranking, CorrelationRow, EvalReport, SystemScore};
use crate::scoregen::{rate_responses, sample_responses};
use crate::selective::{
    apply_threshold, best_of_n, risk_coverage_curve, selective_refine, RefineInput,
    RefinementRecord, SelectivePolicy,
};

/// Salt namespace for extra samples drawn by the sampling-variance
/// baseline, disjoint from the 0..n salts of primary sampling.
const VRO_SALT_BASE: u64 = 1 << 32;

/// Execution context shared by all commands.
pub struct CommandCtx<'a> {
    pub config: &'a RunConfig,
    pub out_dir: &'a Path,
    pub dry_run: bool,
}

impl CommandCtx<'_> {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(self.out_dir).map_err(|source| Error::Io {
            path: self.out_dir.to_path_buf(),
            source,
        })?;
        self.config.save(&self.out_dir.join("resolved_config.json"))
    }

    fn client(&self, endpoint: &crate::gateway::EndpointConfig) -> Result<GatewayClient> {
        GatewayClient::new(endpoint.clone(), self.config.cache_root.as_deref())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn index_instructions(
    instructions: &Dataset<InstructionRecord>,
) -> HashMap<&str, &InstructionRecord> {
    instructions
        .iter()
        .map(|inst| (inst.id.as_str(), inst))
        .collect()
}

fn print_dry_run(chat_calls: usize, embed_calls: usize, note: &str) {
    println!("dry run: planned chat-completion calls: {chat_calls}");
    println!("dry run: planned embedding calls: {embed_calls}");
    if !note.is_empty() {
        println!("dry run: {note}");
    }
}

/// Sample responses for every instruction.
pub fn cmd_generate(ctx: &CommandCtx<'_>, instructions_path: &Path) -> Result<()> {
    let instructions: Dataset<InstructionRecord> = load_dataset(instructions_path)?;
    let planned = instructions.len() * ctx.config.samples_per_instruction;
    if ctx.dry_run {
        print_dry_run(planned, 0, "");
        return Ok(());
    }
    ctx.prepare()?;
    let client = ctx.client(&ctx.config.generator)?;
    let (responses, failures) =
        sample_responses(&instructions, &client, ctx.config.samples_per_instruction)?;
    save_records(responses.records(), &ctx.out("responses.jsonl"))?;
    save_records(&failures, &ctx.out("generate_failures.jsonl"))?;
    println!(
        "generated {} responses ({} failures) -> {}",
        responses.len(),
        failures.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

/// Self-evaluation ratings plus response-reference cosine similarities.
pub fn cmd_rate(
    ctx: &CommandCtx<'_>,
    instructions_path: &Path,
    responses_path: &Path,
) -> Result<()> {
    let instructions: Dataset<InstructionRecord> = load_dataset(instructions_path)?;
    let responses: Dataset<ResponseRecord> = load_dataset(responses_path)?;
    if ctx.dry_run {
        let by_id = index_instructions(&instructions);
        let joinable = responses
            .iter()
            .filter(|r| {
                by_id
                    .get(r.instruction_id.as_str())
                    .is_some_and(|inst| inst.reference.is_some())
            })
            .count();
        print_dry_run(
            joinable,
            2 * joinable,
            "plus up to one re-prompt per unparseable rating",
        );
        return Ok(());
    }
    ctx.prepare()?;
    let evaluator = ctx.client(&ctx.config.evaluator)?;
    let embedder = ctx.client(&ctx.config.embedder)?;
    let (ratings, failures) = rate_responses(&instructions, &responses, &evaluator, &embedder)?;
    save_records(ratings.records(), &ctx.out("ratings.jsonl"))?;
    save_records(&failures, &ctx.out("rate_failures.jsonl"))?;
    let scored = ratings.iter().filter(|r| r.self_eval.is_some()).count();
    println!(
        "rated {} responses ({} with self-eval, {} failures) -> {}",
        ratings.len(),
        scored,
        failures.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

/// Calibration report written next to the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub alpha_star: f64,
    pub alpha_grid: Vec<AlphaGridPoint>,
    /// Class counts of the combined score rounded onto 1..=10, before
    /// uniform adjustment.
    pub histogram_before: Vec<usize>,
    /// Class counts after uniform adjustment (classes 1..=10).
    pub histogram_after: Vec<usize>,
    pub records_in: usize,
    pub records_out: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaGridPoint {
    pub alpha: f64,
    pub pearson: f64,
}

/// Search the mixing weight on the dev set, then combine, uniformize,
/// and shift the rating batch into training labels.
pub fn cmd_calibrate(ctx: &CommandCtx<'_>, ratings_path: &Path, dev_path: &Path) -> Result<()> {
    let ratings: Dataset<RatingRecord> = load_dataset(ratings_path)?;
    let dev: Dataset<crate::calibrate::DevRecord> = load_dataset(dev_path)?;
    if ctx.dry_run {
        print_dry_run(0, 0, "calibration is a pure batch transform");
        return Ok(());
    }
    ctx.prepare()?;

    let search = search_alpha_with_step(dev.records(), ctx.config.calibration.alpha_step)?;

    // Fill cosine_class over the training-eligible batch.
    let mut eligible = Vec::new();
    let mut excluded = Vec::new();
    for r in ratings.iter() {
        if r.self_eval.is_some() && r.cosine_raw.is_some() {
            eligible.push(r.clone());
        } else {
            excluded.push(FailureEntry {
                id: r.derived_id(),
                stage: "calibrate".into(),
                reason: "missing self_eval or cosine_raw".into(),
            });
        }
    }
    if eligible.is_empty() {
        return Err(Error::EmptyInput("training-eligible rating records"));
    }
    let raw: Vec<f64> = eligible.iter().map(|r| r.cosine_raw.unwrap()).collect();
    let classes = discretize_cosine_with_mode(&raw, ctx.config.calibration.binning)?;
    for (r, class) in eligible.iter_mut().zip(classes) {
        r.cosine_class = Some(class);
    }

    let (training, build_excluded) =
        build_training_set(&Dataset::from_records(eligible)?, search.alpha_star)?;
    excluded.extend(build_excluded);

    let mut histogram_before = vec![0usize; 10];
    let mut histogram_after = vec![0usize; 10];
    for r in training.iter() {
        let rounded = (r.combined.unwrap().round() as i64).clamp(1, 10) as usize;
        histogram_before[rounded - 1] += 1;
        histogram_after[r.final_class.unwrap() as usize] += 1;
    }

    let report = CalibrationReport {
        alpha_star: search.alpha_star,
        alpha_grid: search
            .per_alpha_correlations
            .iter()
            .map(|&(alpha, pearson)| AlphaGridPoint { alpha, pearson })
            .collect(),
        histogram_before,
        histogram_after,
        records_in: ratings.len(),
        records_out: training.len(),
        excluded: excluded.len(),
    };

    save_records(training.records(), &ctx.out("training.jsonl"))?;
    save_records(&excluded, &ctx.out("calibrate_failures.jsonl"))?;
    write_json(&ctx.out("calibration_report.json"), &report)?;
    write_alpha_grid_tsv(&ctx.out("alpha_grid.tsv"), &search)?;
    println!(
        "alpha* = {:.1}; {} training records ({} excluded) -> {}",
        search.alpha_star,
        training.len(),
        excluded.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub records: usize,
    pub embed_dim: usize,
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
}

/// Embed the training triples and fit the judge.
pub fn cmd_train_judge(
    ctx: &CommandCtx<'_>,
    training_path: &Path,
    instructions_path: &Path,
    responses_path: &Path,
) -> Result<()> {
    let training: Dataset<RatingRecord> = load_dataset(training_path)?;
    let instructions: Dataset<InstructionRecord> = load_dataset(instructions_path)?;
    let responses: Dataset<ResponseRecord> = load_dataset(responses_path)?;
    if ctx.dry_run {
        print_dry_run(0, 3 * training.len(), "embeddings dedupe through the cache");
        return Ok(());
    }
    ctx.prepare()?;

    let by_id = index_instructions(&instructions);
    let by_response: HashMap<String, &ResponseRecord> =
        responses.iter().map(|r| (r.derived_id(), r)).collect();

    struct TrainRow<'a> {
        label: u8,
        instruction: &'a str,
        response: &'a str,
        reference: &'a str,
    }

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in training.iter() {
        let id = r.derived_id();
        let label = match r.final_class {
            Some(label) => label,
            None => {
                failures.push(FailureEntry {
                    id,
                    stage: "train_judge".into(),
                    reason: "missing final_class".into(),
                });
                continue;
            }
        };
        let response = match by_response.get(&id) {
            Some(resp) => resp,
            None => {
                failures.push(FailureEntry {
                    id,
                    stage: "train_judge".into(),
                    reason: "no matching response record".into(),
                });
                continue;
            }
        };
        let inst = match by_id.get(r.instruction_id.as_str()) {
            Some(inst) => inst,
            None => {
                failures.push(FailureEntry {
                    id,
                    stage: "train_judge".into(),
                    reason: "no matching instruction record".into(),
                });
                continue;
            }
        };
        let reference = match &inst.reference {
            Some(reference) if !reference.is_empty() => reference.as_str(),
            _ => {
                failures.push(FailureEntry {
                    id,
                    stage: "train_judge".into(),
                    reason: "instruction has no reference answer".into(),
                });
                continue;
            }
        };
        rows.push(TrainRow {
            label,
            instruction: &inst.instruction,
            response: &response.response,
            reference,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("joinable training records"));
    }

    let embedder = ctx.client(&ctx.config.embedder)?;
    let featurized: Vec<Result<(JudgeFeatures, u8)>> =
        parallel_map(&rows, ctx.config.embedder.request_parallelism, |_, row| {
            let x = embedder.embed(row.instruction)?;
            let yp = embedder.embed(row.response)?;
            let y = embedder.embed(row.reference)?;
            Ok((featurize(&x, &yp, Some(&y))?, row.label))
        });
    let mut data = Vec::with_capacity(featurized.len());
    for item in featurized {
        data.push(item?);
    }

    let embed_dim = data[0].0.student.len() / 3;
    let model = train_judge(&data, &ctx.config.judge)?;
    let init = init_judge(embed_dim, &ctx.config.judge)?;
    let summary = TrainSummary {
        records: data.len(),
        embed_dim,
        initial_mean_loss: evaluate_mean_loss(
            &init,
            &data,
            ctx.config.judge.beta,
            ctx.config.judge.gamma,
        )?,
        final_mean_loss: evaluate_mean_loss(
            &model,
            &data,
            ctx.config.judge.beta,
            ctx.config.judge.gamma,
        )?,
    };

    save_checkpoint(&model, &ctx.out("judge_checkpoint.json"))?;
    write_json(&ctx.out("train_summary.json"), &summary)?;
    save_records(&failures, &ctx.out("train_failures.jsonl"))?;
    println!(
        "trained judge on {} records (loss {:.4} -> {:.4}) -> {}",
        summary.records,
        summary.initial_mean_loss,
        summary.final_mean_loss,
        ctx.out_dir.display()
    );
    Ok(())
}

/// How `cmd_score` scores each response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScoreMode {
    /// Judge, reference-free head.
    Student,
    /// Judge, reference-based head (needs references).
    Teacher,
    /// Negated mean per-token negative log-likelihood.
    Ppl,
    /// Mean similarity to extra sampled responses.
    Vro,
}

impl ScoreMode {
    fn as_str(&self) -> &'static str {
        match self {
            ScoreMode::Student => "student",
            ScoreMode::Teacher => "teacher",
            ScoreMode::Ppl => "ppl",
            ScoreMode::Vro => "vro",
        }
    }
}

/// Score every response with the judge or a training-free baseline.
pub fn cmd_score(
    ctx: &CommandCtx<'_>,
    checkpoint: Option<&Path>,
    responses_path: &Path,
    instructions_path: &Path,
    mode: ScoreMode,
) -> Result<()> {
    let responses: Dataset<ResponseRecord> = load_dataset(responses_path)?;
    let instructions: Dataset<InstructionRecord> = load_dataset(instructions_path)?;
    let vro_config = VroConfig {
        extra_samples: ctx.config.policy.vro_extra_samples,
        temperature: ctx.config.generator.temperature,
    };
    if mode == ScoreMode::Vro {
        vro_config.validate()?;
    }
    let k = vro_config.extra_samples;
    if ctx.dry_run {
        let n = responses.len();
        match mode {
            ScoreMode::Student => print_dry_run(0, 2 * n, ""),
            ScoreMode::Teacher => print_dry_run(0, 3 * n, ""),
            ScoreMode::Ppl => print_dry_run(0, 0, "ppl reads stored logprobs"),
            ScoreMode::Vro => print_dry_run(k * n, (k + 1) * n, ""),
        }
        return Ok(());
    }
    ctx.prepare()?;

    let model = match mode {
        ScoreMode::Student | ScoreMode::Teacher => {
            let path = checkpoint.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "score --mode {} requires --checkpoint",
                    mode.as_str()
                ))
            })?;
            Some(load_checkpoint(path)?)
        }
        _ => None,
    };
    let by_id = index_instructions(&instructions);

    let embedder = ctx.client(&ctx.config.embedder)?;
    let generator = ctx.client(&ctx.config.generator)?;

    let outcomes: Vec<std::result::Result<ScoreRecord, FailureEntry>> = parallel_map(
        responses.records(),
        ctx.config.embedder.request_parallelism,
        |_, response| {
            let id = response.derived_id();
            let fail = |reason: String| FailureEntry {
                id: id.clone(),
                stage: format!("score_{}", mode.as_str()),
                reason,
            };
            let score = match mode {
                ScoreMode::Student | ScoreMode::Teacher => {
                    let model = model.as_ref().unwrap();
                    let inst = by_id
                        .get(response.instruction_id.as_str())
                        .ok_or_else(|| fail("unknown instruction_id".into()))?;
                    (|| -> Result<f64> {
                        let x = embedder.embed(&inst.instruction)?;
                        let yp = embedder.embed(&response.response)?;
                        let (features, predict_mode) = if mode == ScoreMode::Teacher {
                            let reference =
                                inst.reference.as_deref().ok_or(Error::MissingField {
                                    id: inst.id.clone(),
                                    field: "reference",
                                })?;
                            let y = embedder.embed(reference)?;
                            (featurize(&x, &yp, Some(&y))?, PredictMode::Teacher)
                        } else {
                            (featurize(&x, &yp, None)?, PredictMode::Student)
                        };
                        Ok(predict_score(model, &features, predict_mode)?.0)
                    })()
                    .map_err(|e| fail(e.to_string()))?
                }
                ScoreMode::Ppl => {
                    let lps = response
                        .token_logprobs
                        .as_ref()
                        .ok_or_else(|| fail("response has no token logprobs".into()))?;
                    ppl_confidence(lps).map_err(|e| fail(e.to_string()))?
                }
                ScoreMode::Vro => {
                    let inst = by_id
                        .get(response.instruction_id.as_str())
                        .ok_or_else(|| fail("unknown instruction_id".into()))?;
                    (|| -> Result<f64> {
                        let original = embedder.embed(&response.response)?;
                        let mut extras = Vec::with_capacity(k);
                        for extra_index in 0..k as u64 {
                            let (text, _) = generator.chat_complete_salted(
                                &[crate::gateway::ChatMessage::user(inst.instruction.clone())],
                                crate::gateway::LogprobMode::Omit,
                                Some(VRO_SALT_BASE + extra_index),
                            )?;
                            extras.push(embedder.embed(&text)?);
                        }
                        vro_confidence(&original, &extras)
                    })()
                    .map_err(|e| fail(e.to_string()))?
                }
            };
            Ok(ScoreRecord {
                id,
                instruction_id: response.instruction_id.clone(),
                model_id: response.model_id.clone(),
                sample_index: response.sample_index,
                mode: Some(mode.as_str().to_string()),
                score,
            })
        },
    );

    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(record) => scores.push(record),
            Err(failure) => failures.push(failure),
        }
    }
    save_records(&scores, &ctx.out("scores.jsonl"))?;
    save_records(&failures, &ctx.out("score_failures.jsonl"))?;
    println!(
        "scored {} responses in {} mode ({} failures) -> {}",
        scores.len(),
        mode.as_str(),
        failures.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

/// One accept-or-abstain decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: String,
    pub score: f64,
    pub accepted: bool,
}

impl Record for SelectionRecord {
    const KIND: &'static str = "selection";

    fn key(&self) -> Option<String> {
        Some(self.id.clone())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.score.is_finite() {
            return Err(format!("score = {} is not finite", self.score));
        }
        Ok(())
    }
}

/// Apply the accept threshold to a score file.
pub fn cmd_select(ctx: &CommandCtx<'_>, scores_path: &Path) -> Result<()> {
    let scores: Dataset<ScoreRecord> = load_dataset(scores_path)?;
    if ctx.dry_run {
        print_dry_run(0, 0, "selection is a pure policy");
        return Ok(());
    }
    ctx.prepare()?;
    let policy = SelectivePolicy {
        threshold: ctx.config.policy.threshold,
    };
    let scored: Vec<(String, f64)> = scores.iter().map(|r| (r.id.clone(), r.score)).collect();
    let (accepted, _) = apply_threshold(&scored, &policy)?;
    let accepted_set: BTreeSet<&String> = accepted.iter().collect();
    let records: Vec<SelectionRecord> = scored
        .iter()
        .map(|(id, score)| SelectionRecord {
            id: id.clone(),
            score: *score,
            accepted: accepted_set.contains(id),
        })
        .collect();
    save_records(&records, &ctx.out("selection.jsonl"))?;
    let rate = 1.0 - accepted.len() as f64 / scored.len().max(1) as f64;
    println!(
        "accepted {}/{} (abstention rate {:.3}) at threshold {} -> {}",
        accepted.len(),
        scored.len(),
        rate,
        policy.threshold,
        ctx.out_dir.display()
    );
    Ok(())
}

/// Refine every below-threshold response in two stages.
pub fn cmd_refine(
    ctx: &CommandCtx<'_>,
    scores_path: &Path,
    responses_path: &Path,
    instructions_path: &Path,
) -> Result<()> {
    let scores: Dataset<ScoreRecord> = load_dataset(scores_path)?;
    let responses: Dataset<ResponseRecord> = load_dataset(responses_path)?;
    let instructions: Dataset<InstructionRecord> = load_dataset(instructions_path)?;
    let threshold = ctx.config.policy.threshold;
    if ctx.dry_run {
        let below = scores.iter().filter(|s| s.score < threshold).count();
        print_dry_run(2 * below, 0, "two calls per below-threshold response");
        return Ok(());
    }
    ctx.prepare()?;

    let by_id = index_instructions(&instructions);
    let by_response: HashMap<String, &ResponseRecord> =
        responses.iter().map(|r| (r.derived_id(), r)).collect();
    let policy = SelectivePolicy { threshold };
    let model = ctx.client(&ctx.config.generator)?;
    let templates = &ctx.config.templates;

    struct RefineJob<'a> {
        score: &'a ScoreRecord,
        response: &'a ResponseRecord,
        instruction: &'a InstructionRecord,
    }

    let mut jobs = Vec::new();
    let mut failures: Vec<FailureEntry> = Vec::new();
    for score in scores.iter() {
        let response = match by_response.get(&score.id) {
            Some(r) => r,
            None => {
                failures.push(FailureEntry {
                    id: score.id.clone(),
                    stage: "refine".into(),
                    reason: "no matching response record".into(),
                });
                continue;
            }
        };
        let instruction = match by_id.get(score.instruction_id.as_str()) {
            Some(inst) => inst,
            None => {
                failures.push(FailureEntry {
                    id: score.id.clone(),
                    stage: "refine".into(),
                    reason: "no matching instruction record".into(),
                });
                continue;
            }
        };
        jobs.push(RefineJob {
            score,
            response,
            instruction,
        });
    }

    let outcomes = parallel_map(&jobs, ctx.config.generator.request_parallelism, |_, job| {
        let input = RefineInput {
            instruction_id: &job.response.instruction_id,
            model_id: &job.response.model_id,
            sample_index: job.response.sample_index,
            instruction: &job.instruction.instruction,
            first_response: &job.response.response,
            judge_score: job.score.score,
        };
        selective_refine(&input, &policy, &model, templates)
    });

    let mut records: Vec<RefinementRecord> = Vec::new();
    for (record, failure) in outcomes {
        records.push(record);
        failures.extend(failure);
    }
    save_records(&records, &ctx.out("refinements.jsonl"))?;
    save_records(&failures, &ctx.out("refine_failures.jsonl"))?;
    let refined = records.iter().filter(|r| r.was_refined()).count();
    println!(
        "refined {}/{} responses below threshold {} ({} failures) -> {}",
        refined,
        records.len(),
        threshold,
        failures.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

/// One scored member of a best-of-N pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfNSample {
    pub instruction_id: String,
    pub model_id: String,
    pub sample_index: u32,
    pub score: f64,
    pub selected: bool,
}

impl Record for BestOfNSample {
    const KIND: &'static str = "best_of_n_sample";

    fn key(&self) -> Option<String> {
        Some(crate::data::derived_id(
            &self.instruction_id,
            &self.model_id,
            self.sample_index,
        ))
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.score.is_finite() {
            return Err(format!("score = {} is not finite", self.score));
        }
        Ok(())
    }
}

/// Best-of-N sampling with the judge as the reward model.
pub fn cmd_best_of_n(
    ctx: &CommandCtx<'_>,
    instructions_path: &Path,
    checkpoint: &Path,
    n_override: Option<usize>,
) -> Result<()> {
    let instructions: Dataset<InstructionRecord> = load_dataset(instructions_path)?;
    let n = n_override.unwrap_or(ctx.config.policy.best_of_n);
    if n == 0 {
        return Err(Error::Config("policy.best_of_n must be >= 1".into()));
    }
    if ctx.dry_run {
        print_dry_run(n * instructions.len(), (n + 1) * instructions.len(), "");
        return Ok(());
    }
    ctx.prepare()?;

    let judge = load_checkpoint(checkpoint)?;
    let generator = ctx.client(&ctx.config.generator)?;
    let embedder = ctx.client(&ctx.config.embedder)?;
    let model_id = ctx.config.generator.model_name.clone();

    let mut best_records = Vec::new();
    let mut pool_records = Vec::new();
    let mut failures = Vec::new();
    for inst in instructions.iter() {
        match best_of_n(&inst.instruction, &generator, &embedder, &judge, n) {
            Ok((best, pool, sample_failures)) => {
                for f in sample_failures {
                    failures.push(FailureEntry {
                        id: format!("{}::{}", inst.id, f.id),
                        stage: f.stage,
                        reason: f.reason,
                    });
                }
                for sample in &pool {
                    pool_records.push(BestOfNSample {
                        instruction_id: inst.id.clone(),
                        model_id: model_id.clone(),
                        sample_index: sample.sample_index,
                        score: sample.score,
                        selected: sample.sample_index == best.sample_index,
                    });
                }
                best_records.push(ResponseRecord {
                    instruction_id: inst.id.clone(),
                    model_id: model_id.clone(),
                    sample_index: best.sample_index,
                    response: best.response,
                    token_logprobs: None,
                });
            }
            Err(e) => failures.push(FailureEntry {
                id: inst.id.clone(),
                stage: "best_of_n".into(),
                reason: e.to_string(),
            }),
        }
    }
    save_records(&best_records, &ctx.out("best_responses.jsonl"))?;
    save_records(&pool_records, &ctx.out("best_of_n_samples.jsonl"))?;
    save_records(&failures, &ctx.out("best_of_n_failures.jsonl"))?;
    println!(
        "selected best of {} samples for {} instructions ({} failures) -> {}",
        n,
        best_records.len(),
        failures.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

/// Correlations, system ranking, and the risk-coverage curve of a score
/// file against an external grader's scores.
pub fn cmd_evaluate(ctx: &CommandCtx<'_>, scores_path: &Path, gold_path: &Path) -> Result<()> {
    let scores: Dataset<ScoreRecord> = load_dataset(scores_path)?;
    let gold: Dataset<ScoreRecord> = load_dataset(gold_path)?;
    if ctx.dry_run {
        print_dry_run(0, 0, "evaluation is offline");
        return Ok(());
    }
    ctx.prepare()?;

    let gold_by_id: HashMap<&str, &ScoreRecord> = gold.iter().map(|r| (r.id.as_str(), r)).collect();

    struct Joined<'a> {
        judge: f64,
        gold: f64,
        model_id: &'a str,
        instruction_id: &'a str,
    }
    let joined: Vec<Joined> = scores
        .iter()
        .filter_map(|s| {
            gold_by_id.get(s.id.as_str()).map(|g| Joined {
                judge: s.score,
                gold: g.score,
                model_id: s.model_id.as_str(),
                instruction_id: s.instruction_id.as_str(),
            })
        })
        .collect();
    if joined.is_empty() {
        return Err(Error::EmptyInput(
            "records joinable between scores and gold",
        ));
    }

    // Per-model correlation rows in first-seen order.
    #[derive(Default)]
    struct ModelColumns<'a> {
        judge: Vec<f64>,
        gold: Vec<f64>,
        instruction_ids: BTreeSet<&'a str>,
    }
    let mut model_order: Vec<&str> = Vec::new();
    let mut by_model: BTreeMap<&str, ModelColumns> = BTreeMap::new();
    for row in &joined {
        if !by_model.contains_key(row.model_id) {
            model_order.push(row.model_id);
        }
        let entry = by_model.entry(row.model_id).or_default();
        entry.judge.push(row.judge);
        entry.gold.push(row.gold);
        entry.instruction_ids.insert(row.instruction_id);
    }
    let per_model: Vec<CorrelationRow> = model_order
        .iter()
        .map(|model_id| {
            let columns = &by_model[model_id];
            CorrelationRow::compute(model_id, &columns.judge, &columns.gold)
        })
        .collect();
    let overall = CorrelationRow::compute(
        "all",
        &joined.iter().map(|r| r.judge).collect::<Vec<_>>(),
        &joined.iter().map(|r| r.gold).collect::<Vec<_>>(),
    );

    // System ranking over means computed on the instruction subset
    // common to every model.
    let ranking = if by_model.len() >= 2 {
        let mut common: Option<BTreeSet<&str>> = None;
        for columns in by_model.values() {
            common = Some(match common {
                None => columns.instruction_ids.clone(),
                Some(prev) => prev
                    .intersection(&columns.instruction_ids)
                    .copied()
                    .collect(),
            });
        }
        let common = common.unwrap_or_default();
        if common.is_empty() {
            None
        } else {
            let systems: Vec<SystemScore> = model_order
                .iter()
                .map(|model_id| {
                    let rows: Vec<&Joined> = joined
                        .iter()
                        .filter(|r| r.model_id == *model_id && common.contains(r.instruction_id))
                        .collect();
                    let n = rows.len() as f64;
                    SystemScore {
                        model_id: model_id.to_string(),
                        mean_judge_score: rows.iter().map(|r| r.judge).sum::<f64>() / n,
                        mean_reference_grader_score: Some(
                            rows.iter().map(|r| r.gold).sum::<f64>() / n,
                        ),
                    }
                })
                .collect();
            Some(system_ranking(&systems, true)?)
        }
    } else {
        None
    };

    let curve = risk_coverage_curve(&joined.iter().map(|r| (r.judge, r.gold)).collect::<Vec<_>>())?;

    let report = EvalReport {
        per_model,
        overall,
        ranking,
        curve,
    };
    write_json(&ctx.out("eval_report.json"), &report)?;
    write_correlations_tsv(&ctx.out("correlations.tsv"), &report)?;
    if let Some(ranking) = &report.ranking {
        write_ranking_tsv(&ctx.out("ranking.tsv"), ranking)?;
    }
    write_curve_tsv(&ctx.out("curve.tsv"), &report.curve)?;
    println!(
        "evaluated {} joined records across {} models -> {}",
        joined.len(),
        by_model.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn open_report(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_alpha_grid_tsv(path: &Path, search: &AlphaSearchResult) -> Result<()> {
    let mut file = open_report(path)?;
    let mut body = String::from("alpha\tpearson\n");
    for &(alpha, r) in &search.per_alpha_correlations {
        body.push_str(&format!("{alpha:.2}\t{r:.6}\n"));
    }
    body.push_str(&format!("# alpha_star\t{:.2}\n", search.alpha_star));
    file.write_all(body.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) => format!("{v:.digits$}"),
        None => "NA".into(),
    }
}

fn write_correlations_tsv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut file = open_report(path)?;
    let mut body =
        String::from("model_id\tn\tpearson\tpearson_pct\tkendall_tau\tkendall_tau_pct\n");
    for row in report
        .per_model
        .iter()
        .chain(std::iter::once(&report.overall))
    {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.model_id,
            row.n,
            fmt_opt(row.pearson, 6),
            fmt_opt(row.pearson_pct, 2),
            fmt_opt(row.kendall_tau, 6),
            fmt_opt(row.kendall_tau_pct, 2),
        ));
    }
    file.write_all(body.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_ranking_tsv(path: &Path, ranking: &crate::metrics::SystemRanking) -> Result<()> {
    let mut file = open_report(path)?;
    let mut body = String::new();
    if let Some(tau) = ranking.kendall_tau {
        body.push_str(&format!("# kendall_tau\t{tau:.6}\t{:.2}\n", tau * 100.0));
    }
    body.push_str("rank\tmodel_id\tmean_judge_score\tmean_reference_grader_score\n");
    for (i, system) in ranking.ranking.iter().enumerate() {
        body.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\n",
            i + 1,
            system.model_id,
            system.mean_judge_score,
            fmt_opt(system.mean_reference_grader_score, 6),
        ));
    }
    file.write_all(body.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_curve_tsv(path: &Path, curve: &[crate::selective::CurvePoint]) -> Result<()> {
    let mut file = open_report(path)?;
    let mut body = String::from("abstention_rate\tkept_count\tmean_quality\n");
    for point in curve {
        body.push_str(&format!(
            "{:.6}\t{}\t{}\n",
            point.abstention_rate,
            point.kept_count,
            fmt_opt(point.mean_quality, 6),
        ));
    }
    file.write_all(body.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
