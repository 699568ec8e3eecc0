//! Multi-label ranking metrics: per-class ROC AUC (Mann-Whitney, ties at
//! half credit) and the mean AUC over a query set, plus the freeze-depth
//! sweep that re-runs adaptation at each frozen-stage count.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{adapt, HeadSpec, TrainConfig, TrainedModel};
use crate::encoder::{build_encoder, EncoderConfig, EncoderError, FreezePolicy};
use crate::taskgen::{FewShotTask, TaskItem};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate labels: {positives} positive / {negatives} negative")]
    Degenerate { positives: usize, negatives: usize },
    #[error("eval input: {0}")]
    Input(String),
    #[error("every class is degenerate on this query set")]
    AllDegenerate,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("adaptation failed during sweep: {0}")]
    Adapt(String),
    #[error("scoring failed: {0}")]
    Scoring(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ── ROC AUC ─────────────────────────────────────────────────────────

/// Probability that a uniformly random positive outranks a uniformly
/// random negative, ties counted half: the Mann-Whitney U statistic
/// normalized by `n_pos * n_neg`, computed by rank sums in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n = scores.len();
    if n == 0 || labels.len() != n {
        return Err(EvalError::Input(format!(
            "scores ({n}) and labels ({}) must be equal-length and non-empty",
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::Input("scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(EvalError::Input("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::Degenerate {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks for ties keep the half-credit convention exact.
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(ranks.iter())
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

// ── Reports ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAuc {
    pub class_id: usize,
    /// AUC, or `None` when the class was skipped.
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
}

/// Query-set evaluation: per-class AUC, their mean over non-skipped
/// classes, and the configuration snapshot the run was produced under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_auc: Vec<ClassAuc>,
    pub mauc: f64,
    pub skipped_classes: Vec<usize>,
    pub n_query: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Plain-text table rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("class  auc\n");
        for c in &self.per_class_auc {
            match c.auc {
                Some(a) => out.push_str(&format!("{:<6} {a:.4}\n", c.class_id)),
                None => out.push_str(&format!(
                    "{:<6} skipped ({})\n",
                    c.class_id,
                    c.skip_reason.as_deref().unwrap_or("degenerate")
                )),
            }
        }
        out.push_str(&format!("mAUC   {:.4}  (n_query={})\n", self.mauc, self.n_query));
        out
    }
}

/// Assembles an [`EvalReport`] from per-item class scores. Degenerate
/// classes (all-positive or all-negative in the query) are skipped and
/// listed; the mean runs over the remaining classes.
pub fn report_from_scores(
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    config: serde_json::Value,
) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(EvalError::Input(
            "need equal non-zero counts of score and label rows".into(),
        ));
    }
    let n_classes = scores[0].len();
    let mut per_class = Vec::with_capacity(n_classes);
    let mut skipped = Vec::new();
    let mut acc = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let class_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let class_labels: Vec<u8> = labels.iter().map(|row| row[c]).collect();
        match roc_auc(&class_scores, &class_labels) {
            Ok(auc) => {
                acc += auc;
                counted += 1;
                per_class.push(ClassAuc {
                    class_id: c,
                    auc: Some(auc),
                    skip_reason: None,
                });
            }
            Err(EvalError::Degenerate {
                positives,
                negatives,
            }) => {
                skipped.push(c);
                per_class.push(ClassAuc {
                    class_id: c,
                    auc: None,
                    skip_reason: Some(format!(
                        "degenerate: {positives} positive / {negatives} negative"
                    )),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(EvalError::AllDegenerate);
    }
    Ok(EvalReport {
        per_class_auc: per_class,
        mauc: acc / counted as f64,
        skipped_classes: skipped,
        n_query: scores.len(),
        config,
    })
}

// ── Model evaluation ────────────────────────────────────────────────

/// Center crop of one `[c,h,w]` image to `size` per side.
pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(EvalError::Input(format!(
            "expected a [c,h,w] image, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if size > h || size > w {
        return Err(EvalError::Input(format!(
            "crop {size} larger than image {h}x{w}"
        )));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                data.push(image.data()[ch * h * w + (oy + y) * w + (ox + x)]);
            }
        }
    }
    Ok(Tensor::new(vec![c, size, size], data)?)
}

/// Per-item class scores from a trained model over labeled items. Inputs
/// are center-cropped to the encoder size (no other augmentation at
/// evaluation time). Ranking happens on pre-sigmoid logits, which order
/// identically to the sigmoid likelihoods and cannot saturate.
pub fn score_items(model: &TrainedModel, items: &[TaskItem]) -> Result<Vec<Vec<f64>>> {
    if items.is_empty() {
        return Err(EvalError::Input("empty item set".into()));
    }
    let size = model.encoder.config().image_size;
    let channels = model.encoder.config().channels;
    let mut scores = Vec::with_capacity(items.len());
    const CHUNK: usize = 32;
    for chunk in items.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * channels * size * size);
        for item in chunk {
            let cropped = center_crop(&item.image, size)?;
            data.extend_from_slice(cropped.data());
        }
        let batch = Tensor::new(vec![chunk.len(), channels, size, size], data)?;
        let embeddings = model.encoder.forward(&batch)?;
        let d = model.encoder.config().output_dim;
        for row in 0..chunk.len() {
            let visual = &embeddings.data()[row * d..(row + 1) * d];
            let logits = model
                .head
                .logits_all_tokens(visual)
                .map_err(|e| EvalError::Scoring(e.to_string()))?;
            scores.push(logits);
        }
    }
    Ok(scores)
}

/// Full query-set evaluation of a trained model.
pub fn mean_auc(
    model: &TrainedModel,
    query: &[TaskItem],
    config: serde_json::Value,
) -> Result<EvalReport> {
    if query.is_empty() {
        return Err(EvalError::Input("empty query set".into()));
    }
    let scores = score_items(model, query)?;
    let labels: Vec<Vec<u8>> = query.iter().map(|i| i.labels.clone()).collect();
    report_from_scores(&scores, &labels, config)
}

// ── Freeze-depth sweep ──────────────────────────────────────────────

/// One freeze setting in a sweep: a frozen-stage count or the full
/// linear-probe configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeLevel {
    Stages(usize),
    Linear,
}

impl FreezeLevel {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "linear" {
            Ok(FreezeLevel::Linear)
        } else {
            s.parse::<usize>()
                .map(FreezeLevel::Stages)
                .map_err(|_| format!("invalid freeze level {s:?} (expected an integer or \"linear\")"))
        }
    }

    pub fn label(&self) -> String {
        match self {
            FreezeLevel::Stages(n) => n.to_string(),
            FreezeLevel::Linear => "linear".to_string(),
        }
    }

    pub fn policy(&self, num_stages: usize) -> FreezePolicy {
        match self {
            FreezeLevel::Stages(n) => FreezePolicy {
                frozen_stages: *n,
                freeze_patch_embed: *n >= 1,
            },
            FreezeLevel::Linear => FreezePolicy::linear_probe(num_stages),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: String,
    pub frozen_params: usize,
    pub trainable_params: usize,
    pub mauc: f64,
    pub wall_time_s: f64,
}

pub const SWEEP_CSV_HEADER: &str = "N,frozen_params,trainable_params,mAUC,wall_time_s";

/// Renders sweep rows as CSV under the fixed header. Wall time is the
/// only non-deterministic column; `sweep_csv_deterministic` masks it.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.3}\n",
            r.level, r.frozen_params, r.trainable_params, r.mauc, r.wall_time_s
        ));
    }
    out
}

/// CSV with the wall-time column zeroed, used for byte-identity checks.
pub fn sweep_csv_deterministic(rows: &[SweepRow]) -> String {
    let masked: Vec<SweepRow> = rows
        .iter()
        .map(|r| SweepRow {
            wall_time_s: 0.0,
            ..r.clone()
        })
        .collect();
    sweep_to_csv(&masked)
}

/// Runs one full adapt+eval per freeze level with identical seeds and a
/// fresh identically-initialized encoder each time.
pub fn sweep_freeze(
    task: &FewShotTask,
    encoder_config: &EncoderConfig,
    levels: &[FreezeLevel],
    head: &HeadSpec,
    train_cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    // Validate every level up front so no training starts on a bad list.
    for level in levels {
        if let FreezeLevel::Stages(n) = level {
            if *n > encoder_config.stages.len() {
                return Err(EvalError::Input(format!(
                    "freeze level {n} exceeds stage count {}",
                    encoder_config.stages.len()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(levels.len());
    for level in levels {
        let start = Instant::now();
        let mut encoder = build_encoder(encoder_config.clone())?;
        let report = encoder.apply_freeze(level.policy(encoder_config.stages.len()))?;
        let (model, _history) = adapt(task, encoder, head.clone(), train_cfg, false)
            .map_err(|e| EvalError::Adapt(e.to_string()))?;
        let eval = mean_auc(&model, &task.query, serde_json::Value::Null)?;
        rows.push(SweepRow {
            level: level.label(),
            frozen_params: report.frozen_params,
            trainable_params: report.trainable_params,
            mauc: eval.mauc,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
