//! Deterministic generation of synthetic multi-label few-shot tasks.
//! Each class owns a spatial blob pattern on a grid cell; images are the
//! sum of the active class patterns plus Gaussian noise, so difficulty is
//! controlled analytically by pattern overlap and noise level. Includes
//! the paired semantic-embedding generator (well-separated context-style
//! sets vs near-collinear class-name-style sets) and the dataset file
//! format.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::semantic::{SemanticEmbeddingSet, SemanticError, SemanticSource};
use crate::tensor::{Tensor, TensorError};

pub const TASK_FORMAT_VERSION: &str = "fsadapt-task/1";
const MAGIC: &[u8; 8] = b"FSADTASK";
/// Image channels; the clinical-style analog is grayscale.
pub const CHANNELS: usize = 1;
/// L2 gain applied to every class pattern.
const PATTERN_GAIN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("task spec: {0}")]
    Config(String),
    #[error("task file format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("unsupported task file version {found:?} (expected {TASK_FORMAT_VERSION:?})")]
    UnsupportedVersion { found: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

pub type Result<T> = std::result::Result<T, TaskGenError>;

// ── Spec and task ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub k_shot: usize,
    pub query_size: usize,
    pub image_size: usize,
    pub noise_std: f64,
    /// 0 = disjoint class patterns, 1 = fully shared structure.
    pub pattern_overlap: f64,
    /// Activation probability for each extra (non-primary) class.
    pub multilabel_prob: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_classes == 0 {
            problems.push("n_classes must be at least 1".to_string());
        }
        if self.k_shot == 0 {
            problems.push("k_shot must be at least 1".to_string());
        }
        if self.query_size == 0 {
            problems.push("query_size must be at least 1".to_string());
        }
        if self.image_size == 0 {
            problems.push("image_size must be positive".to_string());
        }
        if self.n_classes > 0 && self.image_size > 0 {
            let grid = (self.n_classes as f64).sqrt().ceil() as usize;
            if grid > self.image_size {
                problems.push(format!(
                    "{} classes need a {grid}x{grid} cell grid, image_size {} is too small",
                    self.n_classes, self.image_size
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.pattern_overlap) {
            problems.push(format!(
                "pattern_overlap must be in [0,1], got {}",
                self.pattern_overlap
            ));
        }
        if !(0.0..=1.0).contains(&self.multilabel_prob) {
            problems.push(format!(
                "multilabel_prob must be in [0,1], got {}",
                self.multilabel_prob
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            problems.push(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TaskGenError::Config(problems.join("; ")))
        }
    }
}

/// Named presets with pinned difficulty knobs.
pub fn preset(name: &str, seed: u64) -> Option<TaskSpec> {
    match name {
        "easy" => Some(TaskSpec {
            n_classes: 5,
            k_shot: 5,
            query_size: 200,
            image_size: 32,
            noise_std: 0.1,
            pattern_overlap: 0.0,
            multilabel_prob: 0.1,
            seed,
        }),
        "hard" => Some(TaskSpec {
            n_classes: 8,
            k_shot: 5,
            query_size: 200,
            image_size: 32,
            noise_std: 1.0,
            pattern_overlap: 0.6,
            multilabel_prob: 0.3,
            seed,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskItem {
    /// Construction id; support and query ranges never overlap.
    pub id: u64,
    pub image: Tensor,
    pub labels: Vec<u8>,
}

/// N-way K-shot multi-label task: fixed support set, fixed query set, and
/// the generator spec snapshot they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub spec: TaskSpec,
    pub class_names: Vec<String>,
    pub support: Vec<TaskItem>,
    pub query: Vec<TaskItem>,
}

impl FewShotTask {
    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn summary(&self) -> String {
        format!(
            "N={} K={} query={}",
            self.spec.n_classes, self.spec.k_shot, self.spec.query_size
        )
    }
}

// ── Pattern construction ────────────────────────────────────────────

/// Per-class spatial patterns, recomputable from the spec alone. Classes
/// occupy disjoint grid cells; `pattern_overlap` mixes in a shared
/// centered blob before renormalization.
pub fn class_patterns(spec: &TaskSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let s = spec.image_size;
    let grid = (spec.n_classes as f64).sqrt().ceil() as usize;
    let cell = s / grid;
    if cell == 0 {
        return Err(TaskGenError::Config(format!(
            "image_size {s} cannot host a {grid}x{grid} grid"
        )));
    }
    let shared = {
        let mut blob = blob_at(s, (s as f64 - 1.0) / 2.0, (s as f64 - 1.0) / 2.0, s as f64 / 4.0, None);
        normalize(&mut blob);
        blob
    };
    let lam = spec.pattern_overlap;
    let mut patterns = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let (row, col) = (c / grid, c % grid);
        let cy = row as f64 * cell as f64 + (cell as f64 - 1.0) / 2.0;
        let cx = col as f64 * cell as f64 + (cell as f64 - 1.0) / 2.0;
        let bounds = (row * cell, (row + 1) * cell, col * cell, (col + 1) * cell);
        let mut blob = blob_at(s, cy, cx, cell as f64 / 4.0, Some(bounds));
        normalize(&mut blob);
        let mut p: Vec<f64> = blob
            .iter()
            .zip(shared.iter())
            .map(|(b, sh)| (1.0 - lam) * b + lam * sh)
            .collect();
        normalize(&mut p);
        for v in p.iter_mut() {
            *v *= PATTERN_GAIN;
        }
        patterns.push(p);
    }
    Ok(patterns)
}

/// Gaussian bump at (cy, cx), optionally truncated to a cell so supports
/// stay disjoint.
fn blob_at(
    s: usize,
    cy: f64,
    cx: f64,
    sigma: f64,
    bounds: Option<(usize, usize, usize, usize)>,
) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    let (y0, y1, x0, x1) = bounds.unwrap_or((0, s, 0, s));
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            out[y * s + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

// ── Generation ──────────────────────────────────────────────────────

/// Generates the task: support items are built class-by-class (K primary
/// items per class, so the K-shot guarantee holds by construction, with
/// extra labels sampled on top), query items draw a uniform primary class.
/// Fully deterministic under the spec seed.
pub fn generate_task(spec: &TaskSpec) -> Result<FewShotTask> {
    spec.validate()?;
    let patterns = class_patterns(spec)?;
    let mut rng = rng::seeded(rng::split_seed(spec.seed, 0x7A5C));
    let n = spec.n_classes;
    let mut next_id = 0u64;

    let mut make_item = |primary: usize, rng: &mut rand_chacha::ChaCha8Rng, id: u64| -> Result<TaskItem> {
        let mut labels = vec![0u8; n];
        labels[primary] = 1;
        for d in 0..n {
            if d != primary && rand::Rng::gen::<f64>(rng) < spec.multilabel_prob {
                labels[d] = 1;
            }
        }
        let px = spec.image_size * spec.image_size;
        let mut image = vec![0.0f64; px];
        for (c, active) in labels.iter().enumerate() {
            if *active == 1 {
                for (i, v) in patterns[c].iter().enumerate() {
                    image[i] += v;
                }
            }
        }
        for v in image.iter_mut() {
            *v += spec.noise_std * rng::standard_normal(rng);
        }
        Ok(TaskItem {
            id,
            image: Tensor::new(vec![CHANNELS, spec.image_size, spec.image_size], image)?,
            labels,
        })
    };

    let mut support = Vec::with_capacity(n * spec.k_shot);
    for c in 0..n {
        for _ in 0..spec.k_shot {
            let item = make_item(c, &mut rng, next_id)?;
            next_id += 1;
            support.push(item);
        }
    }
    let mut query = Vec::with_capacity(spec.query_size);
    for _ in 0..spec.query_size {
        let primary = rand::Rng::gen_range(&mut rng, 0..n);
        let item = make_item(primary, &mut rng, next_id)?;
        next_id += 1;
        query.push(item);
    }

    // The construction guarantees these; fail loudly if it ever regresses.
    for c in 0..n {
        let count = support.iter().filter(|i| i.labels[c] == 1).count();
        debug_assert!(count >= spec.k_shot, "class {c} has {count} < K positives");
    }

    Ok(FewShotTask {
        spec: *spec,
        class_names: (0..n).map(|c| format!("class_{c}")).collect(),
        support,
        query,
    })
}

/// Cosine of each query image against every class pattern; the brute-force
/// separability diagnostic for generated tasks.
pub fn nearest_pattern_scores(task: &FewShotTask) -> Result<Vec<Vec<f64>>> {
    let patterns = class_patterns(&task.spec)?;
    let mut rows = Vec::with_capacity(task.query.len());
    for item in &task.query {
        let img = item.image.data();
        let img_norm = img.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let row: Vec<f64> = patterns
            .iter()
            .map(|p| {
                let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = img.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                dot / (img_norm * pn)
            })
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

// ── Paired semantics ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSemanticsConfig {
    pub tokens_per_class: usize,
    /// Per-token perturbation around the projected pattern (context sets).
    pub jitter: f64,
    /// Per-class spread around the shared base vector (class-name sets).
    pub name_spread: f64,
}

impl Default for PairedSemanticsConfig {
    fn default() -> Self {
        Self {
            tokens_per_class: 8,
            jitter: 0.25,
            name_spread: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairedSemantics {
    pub context: Vec<SemanticEmbeddingSet>,
    pub class_name: Vec<SemanticEmbeddingSet>,
}

/// Builds two embedding families for the same classes: context-style sets
/// projected from the (well-separated) class patterns, and class-name-style
/// sets clustered around one shared direction. By construction the former
/// have low inter-class correlation and the latter high.
pub fn paired_semantics(spec: &TaskSpec, d_text: usize, seed: u64) -> Result<PairedSemantics> {
    paired_semantics_with(spec, d_text, seed, &PairedSemanticsConfig::default())
}

pub fn paired_semantics_with(
    spec: &TaskSpec,
    d_text: usize,
    seed: u64,
    cfg: &PairedSemanticsConfig,
) -> Result<PairedSemantics> {
    if d_text == 0 {
        return Err(TaskGenError::Config("d_text must be positive".into()));
    }
    if cfg.tokens_per_class == 0 {
        return Err(TaskGenError::Config("tokens_per_class must be at least 1".into()));
    }
    let patterns = class_patterns(spec)?;
    let px = spec.image_size * spec.image_size;
    let mut r = rng::seeded(rng::split_seed(seed, 0x5E3A));
    let projection: Vec<f64> = (0..px * d_text)
        .map(|_| rng::uniform_symmetric(&mut r, 1.0))
        .collect();

    let mut context = Vec::with_capacity(spec.n_classes);
    for (c, pattern) in patterns.iter().enumerate() {
        let mut base = vec![0.0f64; d_text];
        for (i, &pv) in pattern.iter().enumerate() {
            if pv == 0.0 {
                continue;
            }
            for (j, b) in base.iter_mut().enumerate() {
                *b += pv * projection[i * d_text + j];
            }
        }
        normalize(&mut base);
        let mut tokens = Vec::with_capacity(cfg.tokens_per_class);
        for _ in 0..cfg.tokens_per_class {
            let mut t: Vec<f64> = base
                .iter()
                .map(|&b| b + cfg.jitter * rng::standard_normal(&mut r))
                .collect();
            normalize(&mut t);
            tokens.push(t);
        }
        context.push(SemanticEmbeddingSet::new(c, tokens, SemanticSource::Context)?);
    }

    // Shared base direction; each class-name embedding barely departs it.
    let mut shared: Vec<f64> = (0..d_text).map(|_| rng::standard_normal(&mut r)).collect();
    normalize(&mut shared);
    let mut class_name = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        // Unit-length departure so name_spread is the actual angle scale.
        let mut delta: Vec<f64> = (0..d_text).map(|_| rng::standard_normal(&mut r)).collect();
        normalize(&mut delta);
        let mut t: Vec<f64> = shared
            .iter()
            .zip(delta.iter())
            .map(|(&b, &d)| b + cfg.name_spread * d)
            .collect();
        normalize(&mut t);
        class_name.push(SemanticEmbeddingSet::new(
            c,
            vec![t],
            SemanticSource::ClassName,
        )?);
    }
    Ok(PairedSemantics {
        context,
        class_name,
    })
}

// ── Dataset file I/O ────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFileHeader {
    version: String,
    spec: TaskSpec,
    class_names: Vec<String>,
    n_support: usize,
    n_query: usize,
    image_shape: [usize; 3],
}

/// Serializes a task: JSON manifest, then a little-endian f64 image blob
/// (support rows first), then a u8 label blob.
pub fn task_to_bytes(task: &FewShotTask) -> Result<Vec<u8>> {
    let header = TaskFileHeader {
        version: TASK_FORMAT_VERSION.to_string(),
        spec: task.spec,
        class_names: task.class_names.clone(),
        n_support: task.support.len(),
        n_query: task.query.len(),
        image_shape: [CHANNELS, task.spec.image_size, task.spec.image_size],
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| TaskGenError::Format {
            offset: 16,
            msg: e.to_string(),
        })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for item in task.support.iter().chain(task.query.iter()) {
        for v in item.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for item in task.support.iter().chain(task.query.iter()) {
        out.extend_from_slice(&item.labels);
    }
    Ok(out)
}

pub fn save_task(task: &FewShotTask, path: &Path) -> Result<()> {
    let bytes = task_to_bytes(task)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<FewShotTask> {
    let bytes = std::fs::read(path)?;
    task_from_bytes(&bytes)
}

pub fn task_from_bytes(bytes: &[u8]) -> Result<FewShotTask> {
    if bytes.len() < 16 {
        return Err(TaskGenError::Format {
            offset: bytes.len() as u64,
            msg: "file truncated before header length".into(),
        });
    }
    if &bytes[0..8] != MAGIC {
        return Err(TaskGenError::Format {
            offset: 0,
            msg: "bad magic; not a task file".into(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or(TaskGenError::Format {
        offset: 8,
        msg: "header length overflows".into(),
    })?;
    if bytes.len() < header_end {
        return Err(TaskGenError::Format {
            offset: bytes.len() as u64,
            msg: format!("file truncated inside header (need {header_end} bytes)"),
        });
    }
    let header: TaskFileHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| TaskGenError::Format {
            offset: 16,
            msg: format!("header parse failed: {e}"),
        })?;
    if header.version != TASK_FORMAT_VERSION {
        return Err(TaskGenError::UnsupportedVersion {
            found: header.version,
        });
    }
    let [c, h, w] = header.image_shape;
    let items = header.n_support + header.n_query;
    let image_len = c * h * w;
    let images_bytes = items * image_len * 8;
    let labels_bytes = items * header.spec.n_classes;
    let expected_total = header_end + images_bytes + labels_bytes;
    if bytes.len() != expected_total {
        return Err(TaskGenError::Format {
            offset: bytes.len().min(expected_total) as u64,
            msg: format!(
                "expected {expected_total} bytes total, found {}",
                bytes.len()
            ),
        });
    }
    let mut images = Vec::with_capacity(items);
    for i in 0..items {
        let start = header_end + i * image_len * 8;
        let data: Vec<f64> = bytes[start..start + image_len * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        images.push(Tensor::new(vec![c, h, w], data).map_err(|e| TaskGenError::Format {
            offset: start as u64,
            msg: format!("bad image data: {e}"),
        })?);
    }
    let labels_start = header_end + images_bytes;
    let mut all_items = Vec::with_capacity(items);
    for (i, image) in images.into_iter().enumerate() {
        let start = labels_start + i * header.spec.n_classes;
        let labels = bytes[start..start + header.spec.n_classes].to_vec();
        if labels.iter().any(|&l| l > 1) {
            return Err(TaskGenError::Format {
                offset: start as u64,
                msg: "labels must be 0 or 1".into(),
            });
        }
        all_items.push(TaskItem {
            id: i as u64,
            image,
            labels,
        });
    }
    let query = all_items.split_off(header.n_support);
    Ok(FewShotTask {
        spec: header.spec,
        class_names: header.class_names,
        support: all_items,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::report_from_scores;
    use crate::semantic::{correlation_matrix, mean_offdiag};
    use rand::Rng;

    fn easy(seed: u64) -> TaskSpec {
        preset("easy", seed).unwrap()
    }

    fn oracle_mauc(task: &FewShotTask) -> f64 {
        let scores = nearest_pattern_scores(task).unwrap();
        let labels: Vec<Vec<u8>> = task.query.iter().map(|i| i.labels.clone()).collect();
        report_from_scores(&scores, &labels, serde_json::Value::Null)
            .unwrap()
            .mauc
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&easy(1)).unwrap();
        let b = generate_task(&easy(1)).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&easy(2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_spec_gives_exact_patterns() {
        let spec = TaskSpec {
            noise_std: 0.0,
            multilabel_prob: 0.0,
            ..easy(3)
        };
        let task = generate_task(&spec).unwrap();
        let patterns = class_patterns(&spec).unwrap();
        for item in task.support.iter().chain(task.query.iter()) {
            let active: Vec<usize> = item
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == 1)
                .map(|(c, _)| c)
                .collect();
            assert_eq!(active.len(), 1, "single-label by construction");
            let expected = &patterns[active[0]];
            for (a, b) in item.image.data().iter().zip(expected.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn invariants_hold_over_many_seeded_specs() {
        let mut r = rng::seeded(1000);
        for trial in 0..100 {
            let spec = TaskSpec {
                n_classes: r.gen_range(2..5),
                k_shot: r.gen_range(1..4),
                query_size: r.gen_range(4..16),
                image_size: 16,
                noise_std: r.gen::<f64>(),
                pattern_overlap: r.gen::<f64>() * 0.8,
                multilabel_prob: r.gen::<f64>() * 0.5,
                seed: r.gen(),
            };
            let task = generate_task(&spec).unwrap();
            // Support/query id disjointness.
            let max_support = task.support.iter().map(|i| i.id).max().unwrap();
            let min_query = task.query.iter().map(|i| i.id).min().unwrap();
            assert!(max_support < min_query, "trial {trial}: ids overlap");
            // K-shot guarantee and non-empty labels.
            for c in 0..spec.n_classes {
                let count = task.support.iter().filter(|i| i.labels[c] == 1).count();
                assert!(count >= spec.k_shot, "trial {trial}: class {c} underfilled");
            }
            for item in task.support.iter().chain(task.query.iter()) {
                assert!(item.labels.iter().any(|&l| l == 1));
            }
        }
    }

    #[test]
    fn zero_overlap_patterns_are_orthogonal() {
        let patterns = class_patterns(&easy(1)).unwrap();
        for i in 0..patterns.len() {
            for j in (i + 1)..patterns.len() {
                let dot: f64 = patterns[i]
                    .iter()
                    .zip(patterns[j].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(dot.abs() <= 1e-9, "classes {i},{j} dot {dot}");
            }
        }
    }

    #[test]
    fn easy_preset_is_separable_by_nearest_pattern() {
        let task = generate_task(&easy(1)).unwrap();
        let mauc = oracle_mauc(&task);
        assert!(mauc > 0.95, "easy preset oracle mAUC {mauc}");
    }

    #[test]
    fn difficulty_is_monotone_in_noise() {
        for seed in 0..5 {
            let mut prev = f64::INFINITY;
            for noise in [0.1, 0.5, 1.0, 2.0] {
                let spec = TaskSpec {
                    noise_std: noise,
                    query_size: 120,
                    ..easy(seed)
                };
                let mauc = oracle_mauc(&generate_task(&spec).unwrap());
                assert!(
                    mauc <= prev + 0.02,
                    "seed {seed}: mAUC rose from {prev} to {mauc} at noise {noise}"
                );
                prev = mauc;
            }
        }
    }

    #[test]
    fn paired_semantics_separation() {
        let spec = easy(1);
        let pair = paired_semantics(&spec, 16, 7).unwrap();
        let name_corr = mean_offdiag(&correlation_matrix(&pair.class_name).unwrap()).unwrap();
        let ctx_corr = mean_offdiag(&correlation_matrix(&pair.context).unwrap()).unwrap();
        assert!(name_corr > 0.9, "class-name correlation {name_corr}");
        assert!(ctx_corr < 0.5, "context correlation {ctx_corr}");
        assert!(ctx_corr < name_corr);
    }

    #[test]
    fn paired_semantics_no_jitter_matches_projected_patterns() {
        let spec = easy(1);
        let cfg = PairedSemanticsConfig {
            tokens_per_class: 1,
            jitter: 0.0,
            ..Default::default()
        };
        let pair = paired_semantics_with(&spec, 12, 9, &cfg).unwrap();
        let corr = correlation_matrix(&pair.context).unwrap();

        // Recompute the projected-pattern cosine matrix directly.
        let patterns = class_patterns(&spec).unwrap();
        let px = spec.image_size * spec.image_size;
        let mut r = rng::seeded(rng::split_seed(9, 0x5E3A));
        let projection: Vec<f64> = (0..px * 12)
            .map(|_| rng::uniform_symmetric(&mut r, 1.0))
            .collect();
        let projected: Vec<Vec<f64>> = patterns
            .iter()
            .map(|p| {
                let mut v = vec![0.0; 12];
                for (i, &pv) in p.iter().enumerate() {
                    if pv == 0.0 {
                        continue;
                    }
                    for (j, vj) in v.iter_mut().enumerate() {
                        *vj += pv * projection[i * 12 + j];
                    }
                }
                v
            })
            .collect();
        for i in 0..spec.n_classes {
            for j in 0..spec.n_classes {
                let (na, nb) = (
                    projected[i].iter().map(|v| v * v).sum::<f64>().sqrt(),
                    projected[j].iter().map(|v| v * v).sum::<f64>().sqrt(),
                );
                let dot: f64 = projected[i]
                    .iter()
                    .zip(projected[j].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { dot / (na * nb) };
                assert!(
                    (corr[i][j] - expected).abs() < 1e-9,
                    "corr[{i}][{j}] {} vs {expected}",
                    corr[i][j]
                );
            }
        }
    }

    #[test]
    fn task_roundtrip_is_exact() {
        let task = generate_task(&TaskSpec {
            query_size: 6,
            k_shot: 2,
            n_classes: 3,
            ..easy(5)
        })
        .unwrap();
        let bytes = task_to_bytes(&task).unwrap();
        let loaded = task_from_bytes(&bytes).unwrap();
        assert_eq!(task, loaded);
        // Canonical bytes are stable.
        assert_eq!(bytes, task_to_bytes(&loaded).unwrap());
    }

    #[test]
    fn task_file_rejects_corruption() {
        let task = generate_task(&TaskSpec {
            query_size: 4,
            k_shot: 1,
            n_classes: 2,
            ..easy(6)
        })
        .unwrap();
        let bytes = task_to_bytes(&task).unwrap();

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            task_from_bytes(truncated),
            Err(TaskGenError::Format { .. })
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        match task_from_bytes(&bad_magic) {
            Err(TaskGenError::Format { offset: 0, .. }) => {}
            other => panic!("expected magic failure, got {other:?}"),
        }

        // Version bump must fail with the explicit unsupported-version error.
        let json_start = 16;
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[json_start..json_start + header_len].to_vec()).unwrap();
        let bumped = header.replace("fsadapt-task/1", "fsadapt-task/9");
        let mut rebuilt = Vec::new();
        rebuilt.extend_from_slice(&bytes[..8]);
        rebuilt.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        rebuilt.extend_from_slice(bumped.as_bytes());
        rebuilt.extend_from_slice(&bytes[json_start + header_len..]);
        assert!(matches!(
            task_from_bytes(&rebuilt),
            Err(TaskGenError::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let mut spec = easy(1);
        spec.query_size = 0;
        assert!(matches!(generate_task(&spec), Err(TaskGenError::Config(_))));
        let mut spec = easy(1);
        spec.pattern_overlap = 1.5;
        assert!(matches!(generate_task(&spec), Err(TaskGenError::Config(_))));
    }
}
