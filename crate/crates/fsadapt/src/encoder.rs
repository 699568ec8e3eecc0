//! Tiny stage-structured vision transformer with a depth-based freeze
//! policy. Plain pre-norm blocks (attention + MLP) are grouped into named
//! stages; freezing marks the patch embedding and the shallowest N stages
//! as non-trainable while deeper stages and the output head keep training.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-5;
const POS_EMBED_SCALE: f64 = 0.02;
/// Residual branch outputs start small so an untrained encoder is close to
/// the identity on its token stream; without this, random blocks swamp the
/// patch signal and nothing downstream can separate classes.
const RESIDUAL_OUT_SCALE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("encoder input: expected shape {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub stages: Vec<StageConfig>,
    pub heads: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Validates divisibility and positivity constraints.
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(EncoderError::Config(
                "image_size, patch_size and channels must be positive".into(),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(EncoderError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.stages.is_empty() {
            return Err(EncoderError::Config("at least one stage required".into()));
        }
        if self.output_dim == 0 {
            return Err(EncoderError::Config("output_dim must be positive".into()));
        }
        if self.heads == 0 {
            return Err(EncoderError::Config("heads must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_blocks == 0 || s.width == 0 {
                return Err(EncoderError::Config(format!(
                    "stage {i}: num_blocks and width must be positive"
                )));
            }
            if s.width % self.heads != 0 {
                return Err(EncoderError::Config(format!(
                    "stage {i}: heads {} does not divide width {}",
                    self.heads, s.width
                )));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Depth-based partition of encoder parameters into frozen and trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePolicy {
    pub frozen_stages: usize,
    pub freeze_patch_embed: bool,
}

impl FreezePolicy {
    /// Freezes the shallowest `n` stages; the patch embedding is frozen
    /// whenever at least one stage is.
    pub fn stages(n: usize) -> Self {
        Self {
            frozen_stages: n,
            freeze_patch_embed: n >= 1,
        }
    }

    /// Freezes the whole feature extractor; only external heads train.
    pub fn linear_probe(num_stages: usize) -> Self {
        Self {
            frozen_stages: num_stages,
            freeze_patch_embed: true,
        }
    }

    pub fn none() -> Self {
        Self {
            frozen_stages: 0,
            freeze_patch_embed: false,
        }
    }
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            frozen_stages: 2,
            freeze_patch_embed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub frozen_params: usize,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamGroup {
    PatchEmbed,
    Stage(usize),
    Head,
}

fn param_group(key: &str) -> ParamGroup {
    if key.starts_with("patch.") {
        ParamGroup::PatchEmbed
    } else if let Some(rest) = key.strip_prefix("stage") {
        let idx: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("stage key carries its index");
        ParamGroup::Stage(idx)
    } else {
        ParamGroup::Head
    }
}

/// Stage-structured patch transformer. Parameters live in a name-keyed
/// store; `requires_grad` on each tensor is the frozen/trainable marker.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    policy: FreezePolicy,
    params: BTreeMap<String, Tensor>,
}

/// Builds an encoder with deterministic seeded initialization: scaled
/// uniform for projections, zeros for biases, ones for norm gains.
pub fn build_encoder(config: EncoderConfig) -> Result<Encoder> {
    config.validate()?;
    let mut rng = rng::seeded(rng::split_seed(config.seed, 0xE6C0DE));
    let mut params = BTreeMap::new();
    let proj = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Tensor {
        proj_init(rng, rows, cols, 1.0)
    };

    let w0 = config.stages[0].width;
    let np = config.num_patches();
    params.insert("patch.proj.w".into(), proj(&mut rng, config.patch_dim(), w0));
    params.insert("patch.proj.b".into(), Tensor::zeros(vec![w0]).expect("shape"));
    let pos: Vec<f64> = (0..np * w0)
        .map(|_| rng::uniform_symmetric(&mut rng, POS_EMBED_SCALE))
        .collect();
    params.insert(
        "patch.pos".into(),
        Tensor::new(vec![np, w0], pos).expect("shape"),
    );

    let mut prev_width = w0;
    for (s, stage) in config.stages.iter().enumerate() {
        let w = stage.width;
        if w != prev_width {
            params.insert(format!("stage{s}.proj_in.w"), proj(&mut rng, prev_width, w));
            params.insert(
                format!("stage{s}.proj_in.b"),
                Tensor::zeros(vec![w]).expect("shape"),
            );
        }
        for b in 0..stage.num_blocks {
            let p = format!("stage{s}.block{b}");
            params.insert(format!("{p}.norm1.g"), ones(w));
            params.insert(format!("{p}.norm1.b"), Tensor::zeros(vec![w]).expect("shape"));
            for role in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("{p}.attn.{role}"), proj(&mut rng, w, w));
            }
            for role in ["bq", "bk", "bv", "bo"] {
                params.insert(
                    format!("{p}.attn.{role}"),
                    Tensor::zeros(vec![w]).expect("shape"),
                );
            }
            params.insert(format!("{p}.norm2.g"), ones(w));
            params.insert(format!("{p}.norm2.b"), Tensor::zeros(vec![w]).expect("shape"));
            params.insert(format!("{p}.mlp.w1"), proj(&mut rng, w, MLP_RATIO * w));
            params.insert(
                format!("{p}.mlp.b1"),
                Tensor::zeros(vec![MLP_RATIO * w]).expect("shape"),
            );
            params.insert(format!("{p}.mlp.w2"), proj(&mut rng, MLP_RATIO * w, w));
            params.insert(format!("{p}.mlp.b2"), Tensor::zeros(vec![w]).expect("shape"));
        }
        prev_width = w;
    }

    params.insert("head.norm.g".into(), ones(prev_width));
    params.insert(
        "head.norm.b".into(),
        Tensor::zeros(vec![prev_width]).expect("shape"),
    );
    params.insert(
        "head.proj.w".into(),
        proj(&mut rng, prev_width, config.output_dim),
    );
    params.insert(
        "head.proj.b".into(),
        Tensor::zeros(vec![config.output_dim]).expect("shape"),
    );

    // All parameters start trainable; apply_freeze installs the partition.
    for t in params.values_mut() {
        t.set_requires_grad(true);
    }
    Ok(Encoder {
        config,
        policy: FreezePolicy::none(),
        params,
    })
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape")
}

/// Scaled-uniform projection init: U(-gain/sqrt(fan_in), gain/sqrt(fan_in)).
fn proj_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let scale = gain / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng::uniform_symmetric(rng, scale))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("valid init shape")
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn policy(&self) -> &FreezePolicy {
        &self.policy
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Replaces the parameter store wholesale; shapes must match the
    /// existing layout (used by checkpoint restore).
    pub fn restore_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &params {
            match self.params.get(k) {
                Some(cur) if cur.shape() == v.shape() => {}
                Some(cur) => {
                    return Err(EncoderError::Config(format!(
                        "parameter {k}: shape {:?} does not match expected {:?}",
                        v.shape(),
                        cur.shape()
                    )))
                }
                None => {
                    return Err(EncoderError::Config(format!("unknown parameter {k}")));
                }
            }
        }
        if params.len() != self.params.len() {
            return Err(EncoderError::Config(format!(
                "parameter count {} does not match expected {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.config.stages.len()
    }

    /// Total number of scalar parameters; a pure function of the config.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Installs the frozen/trainable partition. The patch embedding is
    /// frozen iff the policy says so, stages `0..frozen_stages` are frozen,
    /// and the output head freezes only when every stage is frozen (the
    /// linear-probe configuration, where external heads alone train).
    pub fn apply_freeze(&mut self, policy: FreezePolicy) -> Result<PartitionReport> {
        if policy.frozen_stages > self.num_stages() {
            return Err(EncoderError::Config(format!(
                "frozen_stages {} exceeds stage count {}",
                policy.frozen_stages,
                self.num_stages()
            )));
        }
        let all_frozen = policy.frozen_stages == self.num_stages();
        let mut frozen = 0usize;
        let mut trainable = 0usize;
        for (key, t) in self.params.iter_mut() {
            let freeze = match param_group(key) {
                ParamGroup::PatchEmbed => policy.freeze_patch_embed,
                ParamGroup::Stage(s) => s < policy.frozen_stages,
                ParamGroup::Head => all_frozen,
            };
            t.set_requires_grad(!freeze);
            if freeze {
                frozen += t.numel();
            } else {
                trainable += t.numel();
            }
        }
        self.policy = policy;
        Ok(PartitionReport {
            frozen_params: frozen,
            trainable_params: trainable,
        })
    }

    /// Extracts non-overlapping patches from one `[c,h,w]` image into a
    /// `[num_patches, c*p*p]` matrix (patch-row-major, channel-major within
    /// a patch).
    pub fn patchify(&self, image: &[f64]) -> Vec<f64> {
        let (c, hw, p) = (self.config.channels, self.config.image_size, self.config.patch_size);
        let per_side = hw / p;
        let mut out = Vec::with_capacity(self.config.num_patches() * self.config.patch_dim());
        for pr in 0..per_side {
            for pc in 0..per_side {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let y = pr * p + py;
                            let x = pc * p + px;
                            out.push(image[ch * hw * hw + y * hw + x]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Records every parameter as a tape leaf, keyed by name.
    pub fn leaf_params(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t)))
            .collect()
    }

    /// Forward pass on an existing tape with already-leafed parameters.
    /// Images enter as a `[b,c,h,w]` tensor; the result is `[b, output_dim]`.
    /// Each batch row is computed independently.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, NodeId>,
        images: &Tensor,
    ) -> Result<NodeId> {
        let expected = vec![
            self.config.channels,
            self.config.image_size,
            self.config.image_size,
        ];
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(EncoderError::InputShape {
                expected: vec![0, expected[0], expected[1], expected[2]],
                got: shape.to_vec(),
            });
        }
        let batch = shape[0];
        let image_len: usize = expected.iter().product();
        let np = self.config.num_patches();
        let pd = self.config.patch_dim();
        let mut rows = Vec::with_capacity(batch);
        for i in 0..batch {
            let image = &images.data()[i * image_len..(i + 1) * image_len];
            let patches = tape.constant(vec![np, pd], self.patchify(image))?;
            let emb = tape.matmul(patches, ids["patch.proj.w"])?;
            let emb = tape.add_bias(emb, ids["patch.proj.b"])?;
            let mut x = tape.add(emb, ids["patch.pos"])?;
            for (s, stage) in self.config.stages.iter().enumerate() {
                if let Some(&proj) = ids.get(&format!("stage{s}.proj_in.w")) {
                    x = tape.matmul(x, proj)?;
                    x = tape.add_bias(x, ids[&format!("stage{s}.proj_in.b")])?;
                }
                for b in 0..stage.num_blocks {
                    x = self.block(tape, ids, &format!("stage{s}.block{b}"), x, stage.width)?;
                }
            }
            let x = tape.layer_norm_lastdim(x, ids["head.norm.g"], ids["head.norm.b"], LN_EPS)?;
            // Mean pooling over tokens as a constant (1/np) row matmul.
            let pool = tape.constant(vec![1, np], vec![1.0 / np as f64; np])?;
            let pooled = tape.matmul(pool, x)?;
            let out = tape.matmul(pooled, ids["head.proj.w"])?;
            let out = tape.add_bias(out, ids["head.proj.b"])?;
            rows.push(out);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    fn block(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, NodeId>,
        prefix: &str,
        x: NodeId,
        width: usize,
    ) -> Result<NodeId> {
        let id = |role: &str| ids[&format!("{prefix}.{role}")];
        let n1 = tape.layer_norm_lastdim(x, id("norm1.g"), id("norm1.b"), LN_EPS)?;
        let q = tape.matmul(n1, id("attn.wq"))?;
        let q = tape.add_bias(q, id("attn.bq"))?;
        let k = tape.matmul(n1, id("attn.wk"))?;
        let k = tape.add_bias(k, id("attn.bk"))?;
        let v = tape.matmul(n1, id("attn.wv"))?;
        let v = tape.add_bias(v, id("attn.bv"))?;
        let dh = width / self.config.heads;
        let mut head_outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax_lastdim(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let o = tape.matmul(concat, id("attn.wo"))?;
        let o = tape.add_bias(o, id("attn.bo"))?;
        let x = tape.add(x, o)?;

        let n2 = tape.layer_norm_lastdim(x, id("norm2.g"), id("norm2.b"), LN_EPS)?;
        let h1 = tape.matmul(n2, id("mlp.w1"))?;
        let h1 = tape.add_bias(h1, id("mlp.b1"))?;
        let h1 = tape.gelu(h1)?;
        let h2 = tape.matmul(h1, id("mlp.w2"))?;
        let h2 = tape.add_bias(h2, id("mlp.b2"))?;
        Ok(tape.add(x, h2)?)
    }

    /// Standalone forward: a fresh tape, no gradient tracking.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (k, t) in &self.params {
            // Plain constants: evaluation does not need gradient bookkeeping.
            ids.insert(k.clone(), tape.constant(t.shape().to_vec(), t.data().to_vec())?);
        }
        let out = self.forward_on_tape(&mut tape, &ids, images)?;
        Ok(tape.value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_grad_rel_err};
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            stages: vec![
                StageConfig { num_blocks: 1, width: 4 },
                StageConfig { num_blocks: 1, width: 4 },
            ],
            heads: 2,
            output_dim: 4,
            seed: 7,
        }
    }

    fn rand_images(batch: usize, cfg: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = rng::seeded(seed);
        let n = batch * cfg.channels * cfg.image_size * cfg.image_size;
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(
            vec![batch, cfg.channels, cfg.image_size, cfg.image_size],
            data,
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = build_encoder(small_config()).unwrap();
        let b = build_encoder(small_config()).unwrap();
        for (k, t) in a.params() {
            assert!(t.bitwise_eq(&b.params()[k]), "param {k} differs across builds");
        }
        let mut cfg = small_config();
        cfg.seed = 8;
        let c = build_encoder(cfg).unwrap();
        let differs = a
            .params()
            .iter()
            .any(|(k, t)| !t.bitwise_eq(&c.params()[k]));
        assert!(differs, "different seeds produced identical parameters");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config();
        cfg.heads = 3; // does not divide width 4
        assert!(matches!(build_encoder(cfg), Err(EncoderError::Config(_))));

        let mut cfg = small_config();
        cfg.image_size = 10; // not divisible by patch 4
        assert!(matches!(build_encoder(cfg), Err(EncoderError::Config(_))));
    }

    #[test]
    fn forward_rows_are_independent() {
        let enc = build_encoder(small_config()).unwrap();
        let cfg = enc.config().clone();
        let one = rand_images(1, &cfg, 3);
        // Batch of 4 with the same image repeated at positions 0 and 2.
        let mut data = Vec::new();
        for _ in 0..2 {
            data.extend_from_slice(one.data());
            data.extend_from_slice(rand_images(1, &cfg, 5).data());
        }
        let batch = Tensor::new(
            vec![4, cfg.channels, cfg.image_size, cfg.image_size],
            data,
        )
        .unwrap();
        let out_batch = enc.forward(&batch).unwrap();
        let out_one = enc.forward(&one).unwrap();
        let d = cfg.output_dim;
        // identical inputs -> identical rows
        for j in 0..d {
            assert_eq!(
                out_batch.data()[j].to_bits(),
                out_batch.data()[2 * d + j].to_bits()
            );
            // batch of 1 equals the same image inside a larger batch
            assert_eq!(out_one.data()[j].to_bits(), out_batch.data()[j].to_bits());
        }
    }

    #[test]
    fn zero_image_embeds_finite() {
        let enc = build_encoder(small_config()).unwrap();
        let cfg = enc.config().clone();
        let zero = Tensor::zeros(vec![1, cfg.channels, cfg.image_size, cfg.image_size]).unwrap();
        let out = enc.forward(&zero).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let enc = build_encoder(small_config()).unwrap();
        let bad = Tensor::zeros(vec![1, 1, 4, 4]).unwrap();
        assert!(matches!(
            enc.forward(&bad),
            Err(EncoderError::InputShape { .. })
        ));
    }

    #[test]
    fn freeze_partition_boundaries() {
        let mut enc = build_encoder(small_config()).unwrap();
        let total = enc.num_params();

        let r0 = enc.apply_freeze(FreezePolicy::none()).unwrap();
        assert_eq!(r0.frozen_params, 0, "full fine-tuning freezes nothing");
        assert_eq!(r0.trainable_params, total);

        let rl = enc.apply_freeze(FreezePolicy::linear_probe(2)).unwrap();
        assert_eq!(rl.trainable_params, 0, "linear probe trains only external heads");
        assert_eq!(rl.frozen_params, total);

        // Paper-style configuration: patch embedding plus first 2 stages.
        let r2 = enc
            .apply_freeze(FreezePolicy {
                frozen_stages: 2,
                freeze_patch_embed: true,
            })
            .unwrap();
        assert_eq!(r2.frozen_params + r2.trainable_params, total);

        let err = enc.apply_freeze(FreezePolicy {
            frozen_stages: 3,
            freeze_patch_embed: true,
        });
        assert!(matches!(err, Err(EncoderError::Config(_))));
    }

    #[test]
    fn frozen_count_is_monotone_in_depth() {
        let mut enc = build_encoder(small_config()).unwrap();
        let mut prev = 0usize;
        for n in 0..=enc.num_stages() {
            let r = enc
                .apply_freeze(FreezePolicy {
                    frozen_stages: n,
                    freeze_patch_embed: true,
                })
                .unwrap();
            assert!(
                r.frozen_params >= prev,
                "frozen params decreased at N={n}: {} < {prev}",
                r.frozen_params
            );
            prev = r.frozen_params;
        }
    }

    /// Full-encoder gradient check against central differences.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let enc = build_encoder(small_config()).unwrap();
        let images = rand_images(2, enc.config(), 11);

        let pipeline = |params: &BTreeMap<String, Tensor>| -> Result<f64> {
            let mut probe = enc.clone();
            let mut tracked = params.clone();
            for t in tracked.values_mut() {
                t.set_requires_grad(true);
            }
            probe.restore_params(tracked)?;
            let mut tape = Tape::new();
            let ids = probe.leaf_params(&mut tape);
            let out = probe.forward_on_tape(&mut tape, &ids, &images)?;
            let s = tape.sigmoid(out)?;
            let loss = tape.mean(s)?;
            Ok(tape.data(loss)[0])
        };

        // Autodiff gradients.
        let mut tape = Tape::new();
        let ids = enc.leaf_params(&mut tape);
        let out = enc.forward_on_tape(&mut tape, &ids, &images).unwrap();
        let s = tape.sigmoid(out).unwrap();
        let loss = tape.mean(s).unwrap();
        tape.backward(loss).unwrap();
        let ad: BTreeMap<String, Vec<f64>> = ids
            .iter()
            .map(|(k, &id)| (k.clone(), tape.grad(id).unwrap().to_vec()))
            .collect();

        let fd = finite_diff_grad(pipeline, enc.params(), 1e-5).unwrap();
        let err = max_grad_rel_err(&ad, &fd, 1e-4);
        assert!(err <= 1e-4, "encoder max rel err {err}");
    }
}
