//! Trainable multi-class judge over embedding features.
//!
//! Two single-hidden-layer scorers share a training run: a teacher head
//! that sees reference-augmented features and a student head that sees
//! only the reference-free block. The per-example loss is
//!
//! ```text
//! loss = nll_teacher(label) + beta * nll_student(label)
//!        + gamma * KL(student || teacher)
//! ```
//!
//! where the KL term back-propagates only through the student logits; the
//! teacher is treated as a constant target there. Inference reports the
//! expected score `sum(c * p(c))` over the ten classes 0..=9.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingVector;
use crate::error::{Error, Result};

/// Number of score classes (0..=9).
pub const CLASS_COUNT: usize = 10;

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Feature layout per example.
///
/// The student block is `x (+) y' (+) x*y'` over embeddings of dimension
/// `d` (length `3d`); the teacher block appends `y (+) y'*y` (length
/// `5d`), so the student features are a prefix of the teacher features.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeFeatures {
    pub student: Vec<f64>,
    pub teacher: Option<Vec<f64>>,
}

/// Build judge features from instruction, response, and optional
/// reference embeddings.
pub fn featurize(
    x_emb: &EmbeddingVector,
    yprime_emb: &EmbeddingVector,
    y_emb: Option<&EmbeddingVector>,
) -> Result<JudgeFeatures> {
    x_emb.validate()?;
    yprime_emb.validate()?;
    let d = x_emb.dim;
    if yprime_emb.dim != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: yprime_emb.dim,
        });
    }
    let mut student = Vec::with_capacity(3 * d);
    student.extend_from_slice(&x_emb.values);
    student.extend_from_slice(&yprime_emb.values);
    student.extend(
        x_emb
            .values
            .iter()
            .zip(&yprime_emb.values)
            .map(|(a, b)| a * b),
    );

    let teacher = match y_emb {
        Some(y) => {
            y.validate()?;
            if y.dim != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: y.dim,
                });
            }
            let mut t = Vec::with_capacity(5 * d);
            t.extend_from_slice(&student);
            t.extend_from_slice(&y.values);
            t.extend(yprime_emb.values.iter().zip(&y.values).map(|(a, b)| a * b));
            Some(t)
        }
        None => None,
    };
    Ok(JudgeFeatures { student, teacher })
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeTrainConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    2.0
}
fn default_gamma() -> f64 {
    0.3
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    2
}
fn default_batch_size() -> usize {
    128
}
fn default_hidden_width() -> usize {
    32
}

impl Default for JudgeTrainConfig {
    fn default() -> Self {
        JudgeTrainConfig {
            beta: default_beta(),
            gamma: default_gamma(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            hidden_width: default_hidden_width(),
            seed: 0,
        }
    }
}

impl JudgeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "judge.beta = {} must be >= 0",
                self.beta
            )));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "judge.gamma = {} must be >= 0",
                self.gamma
            )));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "judge.learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("judge.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("judge.batch_size must be >= 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("judge.hidden_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// One-hidden-layer tanh scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DenseNet {
    fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound1 = 1.0 / (in_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        DenseNet {
            in_dim,
            hidden,
            out_dim,
            w1: (0..hidden * in_dim)
                .map(|_| rng.random_range(-bound1..bound1))
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..out_dim * hidden)
                .map(|_| rng.random_range(-bound2..bound2))
                .collect(),
            b2: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut hidden = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            let row = &self.w1[h * self.in_dim..(h + 1) * self.in_dim];
            let mut acc = self.b1[h];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            hidden[h] = acc.tanh();
        }
        let mut logits = vec![0.0; self.out_dim];
        for (o, logit) in logits.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let mut acc = self.b2[o];
            for (w, v) in row.iter().zip(&hidden) {
                acc += w * v;
            }
            *logit = acc;
        }
        (hidden, logits)
    }

    fn backward(&self, x: &[f64], hidden: &[f64], dlogits: &[f64], grads: &mut NetGrads) {
        let mut dhidden = vec![0.0; self.hidden];
        for (o, &g) in dlogits.iter().enumerate() {
            grads.b2[o] += g;
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let grow = &mut grads.w2[o * self.hidden..(o + 1) * self.hidden];
            for h in 0..self.hidden {
                grow[h] += g * hidden[h];
                dhidden[h] += g * row[h];
            }
        }
        for h in 0..self.hidden {
            let dpre = dhidden[h] * (1.0 - hidden[h] * hidden[h]);
            grads.b1[h] += dpre;
            let grow = &mut grads.w1[h * self.in_dim..(h + 1) * self.in_dim];
            for (g, v) in grow.iter_mut().zip(x) {
                *g += dpre * v;
            }
        }
    }

    fn apply_sgd(&mut self, grads: &NetGrads, lr: f64, scale: f64) {
        let step = lr * scale;
        for (w, g) in self.w1.iter_mut().zip(&grads.w1) {
            *w -= step * g;
        }
        for (w, g) in self.b1.iter_mut().zip(&grads.b1) {
            *w -= step * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.w2) {
            *w -= step * g;
        }
        for (w, g) in self.b2.iter_mut().zip(&grads.b2) {
            *w -= step * g;
        }
    }
}

struct NetGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl NetGrads {
    fn zeros(net: &DenseNet) -> Self {
        NetGrads {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }

    fn reset(&mut self) {
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2.fill(0.0);
    }
}

/// The trained judge: teacher and student heads plus the layout and
/// hyper-parameters needed to reproduce predictions exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeModel {
    pub version: u32,
    pub embed_dim: usize,
    pub class_count: usize,
    pub hidden_width: usize,
    pub seed: u64,
    pub beta: f64,
    pub gamma: f64,
    pub student: DenseNet,
    pub teacher: DenseNet,
}

impl JudgeModel {
    pub fn student_dim(&self) -> usize {
        3 * self.embed_dim
    }

    pub fn teacher_dim(&self) -> usize {
        5 * self.embed_dim
    }
}

/// Which head scores a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Reference-free estimation from (instruction, response) features.
    Student,
    /// Reference-based estimation; requires teacher features.
    Teacher,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&v| v.exp()).collect()
}

/// Per-example self-distillation loss with analytic gradients.
///
/// Returns `(loss, d_loss/d_teacher_logits, d_loss/d_student_logits)`.
/// The KL term contributes gradient only through the student logits.
pub fn sd_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    label: usize,
    beta: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if teacher_logits.len() != CLASS_COUNT {
        return Err(Error::DimensionMismatch {
            expected: CLASS_COUNT,
            got: teacher_logits.len(),
        });
    }
    if student_logits.len() != CLASS_COUNT {
        return Err(Error::DimensionMismatch {
            expected: CLASS_COUNT,
            got: student_logits.len(),
        });
    }
    if label >= CLASS_COUNT {
        return Err(Error::InvalidInput(format!(
            "label {label} outside 0..={}",
            CLASS_COUNT - 1
        )));
    }
    if teacher_logits
        .iter()
        .chain(student_logits.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("logits"));
    }

    let log_q = log_softmax(teacher_logits);
    let log_p = log_softmax(student_logits);
    let q: Vec<f64> = log_q.iter().map(|&v| v.exp()).collect();
    let p: Vec<f64> = log_p.iter().map(|&v| v.exp()).collect();

    let nll_teacher = -log_q[label];
    let nll_student = -log_p[label];
    // Zero-probability student classes contribute nothing to the KL sum.
    let kl: f64 = p
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, (&lp, &lq))| pi * (lp - lq))
        .sum();

    let loss = nll_teacher + beta * nll_student + gamma * kl;

    let mut teacher_grad = q.clone();
    teacher_grad[label] -= 1.0;

    let mut student_grad = vec![0.0; CLASS_COUNT];
    for i in 0..CLASS_COUNT {
        let nll_part = beta * (p[i] - if i == label { 1.0 } else { 0.0 });
        let kl_part = if p[i] > 0.0 {
            gamma * p[i] * (log_p[i] - log_q[i] - kl)
        } else {
            0.0
        };
        student_grad[i] = nll_part + kl_part;
    }

    Ok((loss, teacher_grad, student_grad))
}

/// Initialize an untrained judge for the given embedding dimension.
///
/// Useful as the zero-step reference point when checking that training
/// actually descends.
pub fn init_judge(embed_dim: usize, config: &JudgeTrainConfig) -> Result<JudgeModel> {
    config.validate()?;
    if embed_dim == 0 {
        return Err(Error::InvalidInput(
            "embedding dimension must be > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let teacher = DenseNet::init(5 * embed_dim, config.hidden_width, CLASS_COUNT, &mut rng);
    let student = DenseNet::init(3 * embed_dim, config.hidden_width, CLASS_COUNT, &mut rng);
    Ok(JudgeModel {
        version: CHECKPOINT_VERSION,
        embed_dim,
        class_count: CLASS_COUNT,
        hidden_width: config.hidden_width,
        seed: config.seed,
        beta: config.beta,
        gamma: config.gamma,
        student,
        teacher,
    })
}

fn check_training_data(data: &[(JudgeFeatures, u8)]) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let student_len = data[0].0.student.len();
    if student_len == 0 || !student_len.is_multiple_of(3) {
        return Err(Error::FeatureLayout(format!(
            "student feature length {student_len} is not 3 * embed_dim"
        )));
    }
    let embed_dim = student_len / 3;
    for (i, (f, label)) in data.iter().enumerate() {
        if f.student.len() != student_len {
            return Err(Error::FeatureLayout(format!(
                "record {i}: student feature length {} != {student_len}",
                f.student.len()
            )));
        }
        match &f.teacher {
            Some(t) if t.len() == 5 * embed_dim => {}
            Some(t) => {
                return Err(Error::FeatureLayout(format!(
                    "record {i}: teacher feature length {} != {}",
                    t.len(),
                    5 * embed_dim
                )))
            }
            None => {
                return Err(Error::FeatureLayout(format!(
                    "record {i}: training requires teacher features"
                )))
            }
        }
        if *label as usize >= CLASS_COUNT {
            return Err(Error::InvalidInput(format!(
                "record {i}: label {label} outside 0..=9"
            )));
        }
    }
    Ok(embed_dim)
}

/// Train teacher and student heads jointly by mini-batch gradient
/// descent on the self-distillation loss. Deterministic for a fixed seed.
pub fn train_judge(data: &[(JudgeFeatures, u8)], config: &JudgeTrainConfig) -> Result<JudgeModel> {
    let embed_dim = check_training_data(data)?;
    let mut model = init_judge(embed_dim, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut teacher_grads = NetGrads::zeros(&model.teacher);
    let mut student_grads = NetGrads::zeros(&model.student);

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for (batch_no, batch) in indices.chunks(config.batch_size).enumerate() {
            teacher_grads.reset();
            student_grads.reset();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (features, label) = &data[idx];
                let teacher_feat = features.teacher.as_ref().expect("checked above");
                let (t_hidden, t_logits) = model.teacher.forward(teacher_feat);
                let (s_hidden, s_logits) = model.student.forward(&features.student);
                let (loss, t_grad, s_grad) = match sd_loss(
                    &t_logits,
                    &s_logits,
                    *label as usize,
                    config.beta,
                    config.gamma,
                ) {
                    Ok(out) => out,
                    // Exploded parameters surface as non-finite logits.
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::TrainingDiverged {
                            epoch,
                            batch: batch_no,
                        })
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += loss;
                model
                    .teacher
                    .backward(teacher_feat, &t_hidden, &t_grad, &mut teacher_grads);
                model
                    .student
                    .backward(&features.student, &s_hidden, &s_grad, &mut student_grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_no,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            model
                .teacher
                .apply_sgd(&teacher_grads, config.learning_rate, scale);
            model
                .student
                .apply_sgd(&student_grads, config.learning_rate, scale);
        }
    }
    Ok(model)
}

/// Mean self-distillation loss of a model over a dataset, without
/// touching any parameters.
pub fn evaluate_mean_loss(
    model: &JudgeModel,
    data: &[(JudgeFeatures, u8)],
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut total = 0.0;
    for (features, label) in data {
        let teacher_feat = features
            .teacher
            .as_ref()
            .ok_or_else(|| Error::FeatureLayout("teacher features required".into()))?;
        let (_, t_logits) = model.teacher.forward(teacher_feat);
        let (_, s_logits) = model.student.forward(&features.student);
        let (loss, _, _) = sd_loss(&t_logits, &s_logits, *label as usize, beta, gamma)?;
        total += loss;
    }
    Ok(total / data.len() as f64)
}

/// Softmax distribution over the ten score classes.
pub fn class_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != CLASS_COUNT {
        return Err(Error::DimensionMismatch {
            expected: CLASS_COUNT,
            got: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(softmax(logits))
}

/// Expected score of a class distribution: `sum(c * p(c))` over 0..=9.
pub fn expected_score(distribution: &[f64]) -> f64 {
    distribution
        .iter()
        .enumerate()
        .map(|(c, &p)| c as f64 * p)
        .sum()
}

/// Index of the most probable class, lowest class on exact ties.
pub fn argmax_class(distribution: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in distribution.iter().enumerate() {
        if p > distribution[best] {
            best = i;
        }
    }
    best
}

/// Score features with the chosen head: softmax distribution over the
/// ten classes plus its expected score in [0, 9].
pub fn predict_score(
    model: &JudgeModel,
    features: &JudgeFeatures,
    mode: PredictMode,
) -> Result<(f64, Vec<f64>)> {
    let logits = match mode {
        PredictMode::Student => {
            if features.student.len() != model.student_dim() {
                return Err(Error::FeatureLayout(format!(
                    "student features have length {}, model expects {}",
                    features.student.len(),
                    model.student_dim()
                )));
            }
            model.student.forward(&features.student).1
        }
        PredictMode::Teacher => {
            let t = features.teacher.as_ref().ok_or_else(|| {
                Error::FeatureLayout("teacher mode requires reference features".into())
            })?;
            if t.len() != model.teacher_dim() {
                return Err(Error::FeatureLayout(format!(
                    "teacher features have length {}, model expects {}",
                    t.len(),
                    model.teacher_dim()
                )));
            }
            model.teacher.forward(t).1
        }
    };
    let dist = softmax(&logits);
    Ok((expected_score(&dist), dist))
}

/// Write a checkpoint; loading it reproduces predictions bit-exactly.
pub fn save_checkpoint(model: &JudgeModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(model)
        .map_err(|e| Error::InvalidInput(format!("checkpoint serialization: {e}")))?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<JudgeModel> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let model: JudgeModel = serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
        path: path.to_path_buf(),
        line: 1,
        message: format!("checkpoint: {e}"),
    })?;
    if model.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidInput(format!(
            "checkpoint version {} unsupported (expected {})",
            model.version, CHECKPOINT_VERSION
        )));
    }
    if model.class_count != CLASS_COUNT
        || model.student.in_dim != model.student_dim()
        || model.teacher.in_dim != model.teacher_dim()
    {
        return Err(Error::FeatureLayout(
            "checkpoint header inconsistent with parameter shapes".into(),
        ));
    }
    Ok(model)
}
