//! The fine-tuning loop: augmentation, alignment-head scoring, BCE loss,
//! and AdamW updates restricted to trainable parameters, with per-epoch
//! bootstrap resampling of the semantic token subsets. Strictly
//! single-threaded and bitwise deterministic under the configured seed.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError};
use crate::eval;
use crate::rng;
use crate::semantic::{
    bootstrap_tokens, AlignmentHead, AlignmentHeadConfig, SemanticEmbeddingSet, SemanticError,
};
use crate::taskgen::FewShotTask;
use crate::tensor::{Tape, Tensor, TensorError};

const ADAM_EPS: f64 = 1e-8;
/// Parameter-store key for the alignment head's projection.
pub const HEAD_PROJ_KEY: &str = "align.proj.w";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("task: {0}")]
    Task(String),
    #[error("train config: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("evaluation during training failed: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ── Configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCropConfig {
    pub size: usize,
    pub padding: usize,
}

/// Augmentation chain, applied center crop -> random crop -> horizontal
/// flip. `None` disables a crop; `hflip_prob: 0` disables the flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub center_crop: Option<usize>,
    pub random_crop: Option<RandomCropConfig>,
    pub hflip_prob: f64,
}

impl AugmentConfig {
    /// Default training augmentation: shape-preserving random crop with a
    /// 2-pixel pad plus a coin-flip horizontal mirror.
    pub fn default_for(image_size: usize) -> Self {
        Self {
            center_crop: None,
            random_crop: Some(RandomCropConfig {
                size: image_size,
                padding: 2,
            }),
            hflip_prob: 0.5,
        }
    }

    pub fn disabled() -> Self {
        Self {
            center_crop: None,
            random_crop: None,
            hflip_prob: 0.0,
        }
    }

    /// Output side length for a given input, validating every step of the
    /// chain.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let mut size = input;
        if let Some(cc) = self.center_crop {
            if cc == 0 || cc > size {
                return Err(TrainError::Config(format!(
                    "center_crop {cc} invalid for input size {size}"
                )));
            }
            size = cc;
        }
        if let Some(rc) = self.random_crop {
            let padded = size + 2 * rc.padding;
            if rc.size == 0 || rc.size > padded {
                return Err(TrainError::Config(format!(
                    "random_crop {} larger than padded input {padded}",
                    rc.size
                )));
            }
            size = rc.size;
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(TrainError::Config(format!(
                "hflip_prob must be in [0,1], got {}",
                self.hflip_prob
            )));
        }
        Ok(size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn default_with(seed: u64, image_size: usize) -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            seed,
            augment: AugmentConfig::default_for(image_size),
        }
    }

    /// Boundary validation for externally supplied configs; the training
    /// loop itself tolerates degenerate values like `learning_rate = 0`.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("train.epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("train.{name} must be in [0,1), got {b}"));
            }
        }
        problems
    }
}

// ── Augmentation ────────────────────────────────────────────────────

/// Applies the augmentation chain to one `[c,h,w]` image, deterministic
/// under the provided rng.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(TrainError::Config(format!(
            "augment expects a [c,h,w] image, got {shape:?}"
        )));
    }
    cfg.output_size(shape[1])?;
    let mut current = image.clone();
    if let Some(cc) = cfg.center_crop {
        current = eval::center_crop(&current, cc).map_err(|e| TrainError::Config(e.to_string()))?;
    }
    if let Some(rc) = cfg.random_crop {
        current = random_crop(&current, rc.size, rc.padding, rng)?;
    }
    if cfg.hflip_prob > 0.0 && rng.gen::<f64>() < cfg.hflip_prob {
        current = hflip(&current)?;
    }
    Ok(current)
}

/// Zero-pads by `padding` on every side, then crops `size x size` at a
/// uniformly random offset.
pub fn random_crop(
    image: &Tensor,
    size: usize,
    padding: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if size > ph || size > pw {
        return Err(TrainError::Config(format!(
            "random_crop {size} larger than padded input {ph}x{pw}"
        )));
    }
    let oy = rng.gen_range(0..=(ph - size));
    let ox = rng.gen_range(0..=(pw - size));
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                let sy = (oy + y) as isize - padding as isize;
                let sx = (ox + x) as isize - padding as isize;
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    data.push(image.data()[ch * h * w + sy as usize * w + sx as usize]);
                } else {
                    data.push(0.0);
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, size, size], data)?)
}

/// Mirrors the last (x) axis.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data.push(image.data()[ch * h * w + y * w + (w - 1 - x)]);
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

// ── BCE loss ────────────────────────────────────────────────────────

/// Mean binary cross entropy of probabilities against 0/1 targets, as a
/// standalone scalar tensor (see `Tape::bce_loss` for the in-graph op).
pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.leaf(probs);
    let loss = tape.bce_loss(p, targets)?;
    Ok(tape.value(loss))
}

// ── AdamW ───────────────────────────────────────────────────────────

/// Per-parameter first/second moments plus the shared step counter.
/// Buffers exist only for parameters that have actually been updated.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_moments_for(&self, key: &str) -> bool {
        self.moments.contains_key(key)
    }
}

/// One AdamW step over every trainable parameter: bias-corrected adaptive
/// update followed by decoupled weight decay `p -= lr * wd * p`. Frozen
/// parameters are never touched; a NaN gradient aborts the step before any
/// parameter changes.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    // Validate first so a bad gradient cannot leave a half-applied step.
    for (key, t) in params.iter() {
        if !t.requires_grad() {
            continue;
        }
        let g = grads.get(key).ok_or_else(|| {
            TrainError::Config(format!("missing gradient for trainable parameter {key}"))
        })?;
        if g.len() != t.numel() {
            return Err(TrainError::Config(format!(
                "gradient length {} does not match parameter {key} ({})",
                g.len(),
                t.numel()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Numeric(format!(
                "non-finite gradient for {key}; aborting the step"
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);
    for (key, param) in params.iter_mut() {
        if !param.requires_grad() {
            continue;
        }
        let g = &grads[key];
        let (m, v) = state
            .moments
            .entry(key.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let data = param.data_mut();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            data[i] -= cfg.learning_rate * cfg.weight_decay * data[i];
        }
    }
    Ok(())
}

// ── Adaptation ──────────────────────────────────────────────────────

/// Head construction request: the semantic head needs embedding sets, the
/// one-hot baseline synthesizes orthonormal basis sets itself.
#[derive(Debug, Clone)]
pub enum HeadSpec {
    Semantic {
        sets: Vec<SemanticEmbeddingSet>,
        cfg: AlignmentHeadConfig,
    },
    OneHot {
        cfg: AlignmentHeadConfig,
    },
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub head: AlignmentHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_mauc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

/// Runs the adaptation loop on the support set: `epochs x ceil(|S|/batch)`
/// steps, bootstrap token resampling at every epoch boundary, BCE on the
/// alignment-head likelihoods, AdamW on trainable parameters only. The
/// freeze policy must already be applied to the encoder.
pub fn adapt(
    task: &FewShotTask,
    encoder: Encoder,
    head_spec: HeadSpec,
    train_cfg: &TrainConfig,
    record_query_mauc: bool,
) -> Result<(TrainedModel, TrainHistory)> {
    if task.support.is_empty() {
        return Err(TrainError::Task("support set is empty".into()));
    }
    if train_cfg.epochs == 0 || train_cfg.batch_size == 0 {
        return Err(TrainError::Config(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    let n_classes = task.n_classes();
    let image_size = task.spec.image_size;
    let out_size = train_cfg.augment.output_size(image_size)?;
    if out_size != encoder.config().image_size {
        return Err(TrainError::Config(format!(
            "augmentation output {out_size} does not match encoder input {}",
            encoder.config().image_size
        )));
    }

    let head_seed = rng::split_seed(train_cfg.seed, 0x4EAD);
    let head = match head_spec {
        HeadSpec::Semantic { sets, cfg } => {
            if sets.len() != n_classes {
                return Err(TrainError::Config(format!(
                    "semantic head has {} embedding sets but the task has {n_classes} classes",
                    sets.len()
                )));
            }
            AlignmentHead::semantic(sets, cfg, encoder.config().output_dim, head_seed)?
        }
        HeadSpec::OneHot { cfg } => {
            AlignmentHead::one_hot(n_classes, cfg, encoder.config().output_dim, head_seed)?
        }
    };

    let mut params: BTreeMap<String, Tensor> = encoder.params().clone();
    if let Some(p) = &head.projection {
        params.insert(HEAD_PROJ_KEY.to_string(), p.clone());
    }
    let mut encoder = encoder;
    let mut head = head;

    let mut rng = rng::seeded(rng::split_seed(train_cfg.seed, 0x5EED));
    let mut opt_state = OptimizerState::new();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(train_cfg.epochs),
        step_losses: Vec::new(),
    };
    let channels = encoder.config().channels;

    for epoch in 0..train_cfg.epochs {
        // Bootstrap once per class per epoch.
        let chosen: Vec<Vec<usize>> = head
            .sets
            .iter()
            .map(|set| bootstrap_tokens(set, head.cfg.m0, &mut rng))
            .collect::<std::result::Result<_, _>>()?;

        // Seeded shuffle of the support order.
        let mut order: Vec<usize> = (0..task.support.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch_idx in order.chunks(train_cfg.batch_size) {
            let mut image_data = Vec::with_capacity(batch_idx.len() * channels * out_size * out_size);
            let mut target_data = Vec::with_capacity(batch_idx.len() * n_classes);
            for &i in batch_idx {
                let item = &task.support[i];
                let img = augment(&item.image, &train_cfg.augment, &mut rng)?;
                image_data.extend_from_slice(img.data());
                target_data.extend(item.labels.iter().map(|&l| l as f64));
            }
            let images = Tensor::new(
                vec![batch_idx.len(), channels, out_size, out_size],
                image_data,
            )?;
            let targets = Tensor::new(vec![batch_idx.len(), n_classes], target_data)?;

            let mut tape = Tape::new();
            let ids: BTreeMap<String, crate::tensor::NodeId> = params
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect();
            let proj_id = ids.get(HEAD_PROJ_KEY).copied();
            let visual = encoder.forward_on_tape(&mut tape, &ids, &images)?;
            let probs = head.probs_on_tape(&mut tape, proj_id, visual, &chosen)?;
            let loss = tape.bce_loss(probs, &targets)?;
            let loss_value = tape.data(loss)[0];
            tape.backward(loss)?;

            let mut grads = BTreeMap::new();
            for (key, &id) in &ids {
                if params[key].requires_grad() {
                    let g = tape.grad(id).ok_or_else(|| {
                        TrainError::Numeric(format!("missing gradient for {key}"))
                    })?;
                    grads.insert(key.clone(), g.to_vec());
                }
            }
            adamw_step(&mut params, &grads, &mut opt_state, train_cfg)?;

            history.step_losses.push(loss_value);
            epoch_loss += loss_value;
            steps += 1;
        }

        let mean_loss = epoch_loss / steps as f64;
        let query_mauc = if record_query_mauc {
            sync_model(&mut encoder, &mut head, &params)?;
            let snapshot = TrainedModel {
                encoder: encoder.clone(),
                head: head.clone(),
            };
            let report = eval::mean_auc(&snapshot, &task.query, serde_json::Value::Null)
                .map_err(|e| TrainError::Eval(e.to_string()))?;
            Some(report.mauc)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            query_mauc,
        });
    }

    sync_model(&mut encoder, &mut head, &params)?;
    Ok((TrainedModel { encoder, head }, history))
}

/// Writes the working parameter map back into the encoder and head.
fn sync_model(
    encoder: &mut Encoder,
    head: &mut AlignmentHead,
    params: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut enc_params = params.clone();
    if let Some(proj) = enc_params.remove(HEAD_PROJ_KEY) {
        head.projection = Some(proj);
    }
    encoder.restore_params(enc_params)?;
    Ok(())
}
