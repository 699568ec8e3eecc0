//! Semantic guidance: class labels become sets of mask-token embedding
//! vectors, and images are scored against them with a scaled-cosine
//! sigmoid likelihood. Includes the masked-context preprocessing, a
//! deterministic toy embedder standing in for an external masked language
//! model, embedding file I/O, and inter-class correlation diagnostics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{sigmoid_scalar, NodeId, Tape, Tensor, TensorError};

/// Literal marker standing where a class mention was removed.
pub const MASK_TOKEN: &str = "[MASK]";

/// Template baseline: a fixed sentence around the class name, no
/// generated context.
pub const SYMPTOM_TEMPLATE: &str = "The symptom of [CLASS] in chest x-ray image is [MASK].";

/// Fallback sentence appended when a description never mentions the class.
pub const FALLBACK_SENTENCE: &str = "This image shows [MASK].";

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("semantic input: {0}")]
    Input(String),
    #[error("embedding format error{}: {msg}", class_label(.class))]
    Format { class: Option<usize>, msg: String },
    #[error("numeric error for class {class}: {msg}")]
    Numeric { class: usize, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn class_label(class: &Option<usize>) -> String {
    match class {
        Some(c) => format!(" (class {c})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, SemanticError>;

// ── Contexts ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSource {
    Context,
    Template,
    ClassName,
}

impl SemanticSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            SemanticSource::Context => "context",
            SemanticSource::Template => "template",
            SemanticSource::ClassName => "class_name",
        }
    }
}

/// A class label plus its (possibly masked) descriptive text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassContext {
    pub class_id: usize,
    pub class_name: String,
    pub context_text: String,
    pub source: SemanticSource,
}

impl ClassContext {
    /// Validates the source/text invariants: masked sources carry at least
    /// one mask marker; the class-name source is the bare name.
    pub fn new(
        class_id: usize,
        class_name: String,
        context_text: String,
        source: SemanticSource,
    ) -> Result<Self> {
        match source {
            SemanticSource::Context | SemanticSource::Template => {
                if !context_text.contains(MASK_TOKEN) {
                    return Err(SemanticError::Input(format!(
                        "class {class_id}: {} text must contain at least one {MASK_TOKEN}",
                        source.as_str()
                    )));
                }
            }
            SemanticSource::ClassName => {
                if context_text != class_name || context_text.contains(MASK_TOKEN) {
                    return Err(SemanticError::Input(format!(
                        "class {class_id}: class_name source text must equal the bare name"
                    )));
                }
            }
        }
        Ok(Self {
            class_id,
            class_name,
            context_text,
            source,
        })
    }

    pub fn class_name_only(class_id: usize, class_name: &str) -> Result<Self> {
        Self::new(
            class_id,
            class_name.to_string(),
            class_name.to_string(),
            SemanticSource::ClassName,
        )
    }

    pub fn mask_count(&self) -> usize {
        self.context_text.matches(MASK_TOKEN).count()
    }
}

#[derive(Debug, Clone)]
pub struct MaskedContext {
    pub context: ClassContext,
    pub replacements: usize,
    pub fallback_applied: bool,
}

/// Replaces every case-insensitive whole-word occurrence of the class name
/// with the mask marker. When the name never occurs, a fallback mask
/// sentence is appended and flagged.
pub fn mask_class_mentions(
    class_id: usize,
    class_name: &str,
    raw_text: &str,
) -> Result<MaskedContext> {
    mask_with_source(class_id, class_name, raw_text, SemanticSource::Context)
}

/// The template baseline: the fixed sentence with the class name spliced
/// in and then masked out again, leaving the template's own mask plus the
/// masked name mention.
pub fn template_context(class_id: usize, class_name: &str) -> Result<MaskedContext> {
    let raw = SYMPTOM_TEMPLATE.replace("[CLASS]", class_name);
    mask_with_source(class_id, class_name, &raw, SemanticSource::Template)
}

fn mask_with_source(
    class_id: usize,
    class_name: &str,
    raw_text: &str,
    source: SemanticSource,
) -> Result<MaskedContext> {
    if class_name.is_empty() {
        return Err(SemanticError::Input("class_name must be non-empty".into()));
    }
    if raw_text.is_empty() {
        return Err(SemanticError::Input("raw_text must be non-empty".into()));
    }
    let text: Vec<char> = raw_text.chars().collect();
    let needle: Vec<char> = class_name.chars().collect();
    let mut out = String::new();
    let mut replacements = 0usize;
    let mut i = 0usize;
    while i < text.len() {
        if matches_at(&text, &needle, i) {
            out.push_str(MASK_TOKEN);
            replacements += 1;
            i += needle.len();
        } else {
            out.push(text[i]);
            i += 1;
        }
    }
    let mut fallback_applied = false;
    if replacements == 0 && !out.contains(MASK_TOKEN) {
        if !out.ends_with(char::is_whitespace) {
            out.push(' ');
        }
        out.push_str(FALLBACK_SENTENCE);
        fallback_applied = true;
    }
    let context = ClassContext::new(class_id, class_name.to_string(), out, source)?;
    Ok(MaskedContext {
        context,
        replacements,
        fallback_applied,
    })
}

/// Case-insensitive match at char position `i` with word boundaries on
/// both sides (alphanumeric runs delimit words).
fn matches_at(text: &[char], needle: &[char], i: usize) -> bool {
    if i + needle.len() > text.len() {
        return false;
    }
    for (k, nc) in needle.iter().enumerate() {
        let tc = text[i + k];
        if !tc.eq_ignore_ascii_case(nc) {
            return false;
        }
    }
    let before_ok = i == 0 || !text[i - 1].is_alphanumeric();
    let after = i + needle.len();
    let after_ok = after == text.len() || !text[after].is_alphanumeric();
    before_ok && after_ok
}

// ── Embedding sets ──────────────────────────────────────────────────

/// Per-class list of mask-token embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbeddingSet {
    pub class_id: usize,
    pub tokens: Vec<Vec<f64>>,
    pub source: SemanticSource,
}

impl SemanticEmbeddingSet {
    pub fn new(class_id: usize, tokens: Vec<Vec<f64>>, source: SemanticSource) -> Result<Self> {
        if tokens.is_empty() {
            return Err(SemanticError::Format {
                class: Some(class_id),
                msg: "embedding set must contain at least one token".into(),
            });
        }
        let dim = tokens[0].len();
        for (i, t) in tokens.iter().enumerate() {
            if t.len() != dim || dim == 0 {
                return Err(SemanticError::Format {
                    class: Some(class_id),
                    msg: format!("token {i} has dim {} but expected {dim}", t.len()),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(SemanticError::Format {
                    class: Some(class_id),
                    msg: format!("token {i} contains a non-finite value"),
                });
            }
            if t.iter().all(|&v| v == 0.0) {
                return Err(SemanticError::Format {
                    class: Some(class_id),
                    msg: format!("token {i} is the zero vector"),
                });
            }
        }
        Ok(Self {
            class_id,
            tokens,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Mean token vector, renormalized to unit length. Errors when the
    /// tokens cancel to zero.
    pub fn mean_unit_vector(&self) -> Result<Vec<f64>> {
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for t in &self.tokens {
            for (m, v) in mean.iter_mut().zip(t.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= self.tokens.len() as f64;
        }
        let norm = l2(&mean);
        if norm == 0.0 {
            return Err(SemanticError::Numeric {
                class: self.class_id,
                msg: "mean token vector is zero".into(),
            });
        }
        for m in mean.iter_mut() {
            *m /= norm;
        }
        Ok(mean)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

// ── Toy embedder ────────────────────────────────────────────────────

const EMBED_BUCKETS: usize = 512;
const EMBED_NGRAM: usize = 3;
/// Words of context taken on each side of a mask position.
pub const EMBED_WINDOW: usize = 6;

/// Deterministic stand-in for a masked language model: each mask position
/// is embedded from a bag of character n-grams over the surrounding word
/// window, projected by a seeded random matrix and unit-normalized.
pub fn toy_embed(ctx: &ClassContext, dim: usize, seed: u64) -> Result<SemanticEmbeddingSet> {
    if dim == 0 {
        return Err(SemanticError::Input("embedding dim must be positive".into()));
    }
    let words: Vec<&str> = ctx.context_text.split_whitespace().collect();
    let mask_positions: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.contains(MASK_TOKEN))
        .map(|(i, _)| i)
        .collect();

    let mut proj_rng = rng::seeded(rng::split_seed(seed, 0x70E));
    let projection: Vec<f64> = (0..EMBED_BUCKETS * dim)
        .map(|_| rng::uniform_symmetric(&mut proj_rng, 1.0))
        .collect();

    let embed_window = |center: Option<usize>| -> Vec<f64> {
        let mut counts = vec![0.0f64; EMBED_BUCKETS];
        counts[0] = 1.0; // constant feature so empty windows stay non-zero
        let (lo, hi) = match center {
            Some(c) => (c.saturating_sub(EMBED_WINDOW), (c + EMBED_WINDOW + 1).min(words.len())),
            None => (0, words.len()),
        };
        for word in words.iter().take(hi).skip(lo) {
            // Mask markers are placeholders, not context.
            if word.contains(MASK_TOKEN) {
                continue;
            }
            let clean: String = word
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            if clean.is_empty() {
                continue;
            }
            let padded = format!("#{clean}#");
            let chars: Vec<char> = padded.chars().collect();
            if chars.len() < EMBED_NGRAM {
                counts[bucket_of(&padded)] += 1.0;
                continue;
            }
            for win in chars.windows(EMBED_NGRAM) {
                let gram: String = win.iter().collect();
                counts[bucket_of(&gram)] += 1.0;
            }
        }
        let mut v = vec![0.0f64; dim];
        for (b, &count) in counts.iter().enumerate() {
            if count == 0.0 {
                continue;
            }
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += count * projection[b * dim + j];
            }
        }
        let norm = l2(&v);
        for vj in v.iter_mut() {
            *vj /= norm;
        }
        v
    };

    let tokens: Vec<Vec<f64>> = if mask_positions.is_empty() {
        // Class-name source: a single token over the whole (short) text.
        vec![embed_window(None)]
    } else {
        mask_positions.iter().map(|&p| embed_window(Some(p))).collect()
    };
    SemanticEmbeddingSet::new(ctx.class_id, tokens, ctx.source)
}

fn bucket_of(s: &str) -> usize {
    // FNV-1a, fixed for reproducibility across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % EMBED_BUCKETS as u64) as usize
}

// ── Embedding file I/O ──────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    dim: usize,
    classes: Vec<EmbeddingFileClass>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFileClass {
    id: usize,
    source: String,
    tokens: Vec<Vec<f64>>,
}

fn parse_source(s: &str, class: usize) -> Result<SemanticSource> {
    match s {
        "context" => Ok(SemanticSource::Context),
        "template" => Ok(SemanticSource::Template),
        "class_name" => Ok(SemanticSource::ClassName),
        other => Err(SemanticError::Format {
            class: Some(class),
            msg: format!("unknown source {other:?}"),
        }),
    }
}

/// Loads per-class embedding sets, validating dimension consistency,
/// unique class ids, and non-zero tokens. Classes are returned sorted by
/// id.
pub fn load_embeddings(path: &Path) -> Result<Vec<SemanticEmbeddingSet>> {
    let raw = std::fs::read_to_string(path)?;
    parse_embeddings(&raw)
}

pub fn parse_embeddings(raw: &str) -> Result<Vec<SemanticEmbeddingSet>> {
    let file: EmbeddingFile = serde_json::from_str(raw)?;
    if file.classes.is_empty() {
        return Err(SemanticError::Format {
            class: None,
            msg: "embedding file contains no classes".into(),
        });
    }
    let mut seen = BTreeMap::new();
    let mut sets = Vec::with_capacity(file.classes.len());
    for class in file.classes {
        if seen.insert(class.id, ()).is_some() {
            return Err(SemanticError::Format {
                class: Some(class.id),
                msg: "duplicate class id".into(),
            });
        }
        let source = parse_source(&class.source, class.id)?;
        for (i, t) in class.tokens.iter().enumerate() {
            if t.len() != file.dim {
                return Err(SemanticError::Format {
                    class: Some(class.id),
                    msg: format!(
                        "token {i} has dim {} but the file declares {}",
                        t.len(),
                        file.dim
                    ),
                });
            }
        }
        sets.push(SemanticEmbeddingSet::new(class.id, class.tokens, source)?);
    }
    sets.sort_by_key(|s| s.class_id);
    Ok(sets)
}

/// Serializes embedding sets in the canonical layout: fixed indentation
/// and every float printed with 17 significant digits, so that
/// `save(load(f)) == f` byte-for-byte for canonical files.
pub fn embeddings_to_string(sets: &[SemanticEmbeddingSet]) -> Result<String> {
    if sets.is_empty() {
        return Err(SemanticError::Contract(
            "cannot serialize an empty embedding list".into(),
        ));
    }
    let dim = sets[0].dim();
    for s in sets {
        if s.dim() != dim {
            return Err(SemanticError::Format {
                class: Some(s.class_id),
                msg: format!("dim {} differs from {}", s.dim(), dim),
            });
        }
    }
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"dim\": {dim},\n"));
    out.push_str("  \"classes\": [\n");
    for (ci, s) in sets.iter().enumerate() {
        out.push_str("    {\n");
        out.push_str(&format!("      \"id\": {},\n", s.class_id));
        out.push_str(&format!("      \"source\": \"{}\",\n", s.source.as_str()));
        out.push_str("      \"tokens\": [\n");
        for (ti, t) in s.tokens.iter().enumerate() {
            let vals: Vec<String> = t.iter().map(|v| format!("{v:.16e}")).collect();
            let comma = if ti + 1 < s.tokens.len() { "," } else { "" };
            out.push_str(&format!("        [{}]{comma}\n", vals.join(", ")));
        }
        out.push_str("      ]\n");
        let comma = if ci + 1 < sets.len() { "," } else { "" };
        out.push_str(&format!("    }}{comma}\n"));
    }
    out.push_str("  ]\n");
    out.push_str("}\n");
    Ok(out)
}

pub fn save_embeddings(path: &Path, sets: &[SemanticEmbeddingSet]) -> Result<()> {
    let body = embeddings_to_string(sets)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

// ── Context file I/O ────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextFile {
    #[allow(dead_code)]
    task: String,
    classes: Vec<ContextFileClass>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextFileClass {
    id: usize,
    name: String,
    source: String,
    text: String,
}

/// Loads class contexts (pre-masked text), enforcing the per-source
/// invariants.
pub fn load_contexts(path: &Path) -> Result<Vec<ClassContext>> {
    let raw = std::fs::read_to_string(path)?;
    let file: ContextFile = serde_json::from_str(&raw)?;
    if file.classes.is_empty() {
        return Err(SemanticError::Format {
            class: None,
            msg: "context file contains no classes".into(),
        });
    }
    let mut out = Vec::with_capacity(file.classes.len());
    for c in file.classes {
        let source = parse_source(&c.source, c.id)?;
        out.push(ClassContext::new(c.id, c.name, c.text, source)?);
    }
    out.sort_by_key(|c| c.class_id);
    Ok(out)
}

// ── Alignment head ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Identity when the visual and text dims match, trainable otherwise.
    Auto,
    Identity,
    Trainable,
}

/// Scoring configuration for the alignment head: scaling factor, number of
/// tokens sampled per training epoch, similarity and aggregation choices,
/// and how the visual-to-text projection is realized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentHeadConfig {
    pub tau: f64,
    pub m0: usize,
    pub similarity: Similarity,
    pub aggregate: Aggregate,
    pub projection: ProjectionMode,
}

impl Default for AlignmentHeadConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            m0: 4,
            similarity: Similarity::Cosine,
            aggregate: Aggregate::Sum,
            projection: ProjectionMode::Auto,
        }
    }
}

impl AlignmentHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SemanticError::Input(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.m0 == 0 {
            return Err(SemanticError::Input("m0 must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scaled-cosine likelihood of one class given a visual embedding:
/// `sigmoid(tau * Agg_i cos(proj(v), t_i))` over the chosen tokens.
pub fn class_likelihood(
    visual_emb: &[f64],
    set: &SemanticEmbeddingSet,
    chosen: &[usize],
    cfg: &AlignmentHeadConfig,
    projection: Option<&Tensor>,
) -> Result<f64> {
    Ok(sigmoid_scalar(class_logit(
        visual_emb, set, chosen, cfg, projection,
    )?))
}

/// Pre-sigmoid logit of [`class_likelihood`]; monotone-equivalent and the
/// quantity ranked during evaluation.
pub fn class_logit(
    visual_emb: &[f64],
    set: &SemanticEmbeddingSet,
    chosen: &[usize],
    cfg: &AlignmentHeadConfig,
    projection: Option<&Tensor>,
) -> Result<f64> {
    cfg.validate()?;
    if chosen.is_empty() {
        return Err(SemanticError::Contract(
            "chosen token subset must be non-empty".into(),
        ));
    }
    if visual_emb.iter().any(|v| !v.is_finite()) {
        return Err(SemanticError::Numeric {
            class: set.class_id,
            msg: "visual embedding contains non-finite values".into(),
        });
    }
    let projected = project(visual_emb, projection, set.class_id)?;
    if l2(&projected) == 0.0 {
        return Err(SemanticError::Numeric {
            class: set.class_id,
            msg: "zero-norm visual embedding after projection".into(),
        });
    }
    let mut acc = 0.0;
    for &i in chosen {
        let token = set.tokens.get(i).ok_or_else(|| {
            SemanticError::Contract(format!("chosen token index {i} out of range"))
        })?;
        acc += cosine(&projected, token);
    }
    if cfg.aggregate == Aggregate::Mean {
        acc /= chosen.len() as f64;
    }
    Ok(acc * cfg.tau)
}

fn project(v: &[f64], projection: Option<&Tensor>, class: usize) -> Result<Vec<f64>> {
    match projection {
        None => Ok(v.to_vec()),
        Some(p) => {
            let shape = p.shape();
            if shape.len() != 2 || shape[0] != v.len() {
                return Err(SemanticError::Numeric {
                    class,
                    msg: format!(
                        "projection shape {:?} incompatible with visual dim {}",
                        shape,
                        v.len()
                    ),
                });
            }
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                let vi = v[i];
                for j in 0..cols {
                    out[j] += vi * p.data()[i * cols + j];
                }
            }
            Ok(out)
        }
    }
}

/// Samples `min(m0, m)` distinct token indices uniformly without
/// replacement. Resampled once per class per epoch by the training loop,
/// which owns the rng.
pub fn bootstrap_tokens(
    set: &SemanticEmbeddingSet,
    m0: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if m0 == 0 {
        return Err(SemanticError::Contract("m0 must be at least 1".into()));
    }
    let m = set.len();
    if m == 0 {
        return Err(SemanticError::Contract(
            "cannot bootstrap from an empty token set".into(),
        ));
    }
    let k = m0.min(m);
    let mut indices: Vec<usize> = (0..m).collect();
    for i in 0..k {
        let j = rng.gen_range(i..m);
        indices.swap(i, j);
    }
    indices.truncate(k);
    Ok(indices)
}

/// Pairwise cosine similarities between per-class renormalized mean token
/// vectors. Symmetric with an exact unit diagonal.
pub fn correlation_matrix(sets: &[SemanticEmbeddingSet]) -> Result<Vec<Vec<f64>>> {
    if sets.len() < 2 {
        return Err(SemanticError::Contract(
            "correlation matrix needs at least 2 classes".into(),
        ));
    }
    let dim = sets[0].dim();
    for s in sets {
        if s.dim() != dim {
            return Err(SemanticError::Format {
                class: Some(s.class_id),
                msg: format!("dim {} differs from {}", s.dim(), dim),
            });
        }
    }
    let means: Vec<Vec<f64>> = sets
        .iter()
        .map(SemanticEmbeddingSet::mean_unit_vector)
        .collect::<Result<_>>()?;
    let n = sets.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in (i + 1)..n {
            let c = cosine(&means[i], &means[j]);
            matrix[i][j] = c;
            matrix[j][i] = c;
        }
    }
    Ok(matrix)
}

/// Arithmetic mean of the strictly off-diagonal entries.
pub fn mean_offdiag(matrix: &[Vec<f64>]) -> Result<f64> {
    let n = matrix.len();
    if n < 2 {
        return Err(SemanticError::Contract(
            "mean_offdiag needs a matrix of size at least 2x2".into(),
        ));
    }
    for row in matrix {
        if row.len() != n {
            return Err(SemanticError::Contract("matrix must be square".into()));
        }
    }
    let mut acc = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                acc += v;
            }
        }
    }
    Ok(acc / (n * n - n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Score against loaded mask-token embedding sets.
    Semantic,
    /// Score against the orthonormal basis: the one-hot baseline realized
    /// through the same alignment machinery.
    OneHot,
}

const PROJ_INIT_SCALE: f64 = 0.05;

/// Classification head aligning visual embeddings with per-class token
/// sets. The optional projection into the text space is the head's only
/// trainable parameter; token sets are held fixed.
#[derive(Debug, Clone)]
pub struct AlignmentHead {
    pub kind: HeadKind,
    pub cfg: AlignmentHeadConfig,
    pub sets: Vec<SemanticEmbeddingSet>,
    pub projection: Option<Tensor>,
}

impl AlignmentHead {
    /// Semantic head over loaded embedding sets. Class ids must be exactly
    /// `0..n_classes` after sorting.
    pub fn semantic(
        sets: Vec<SemanticEmbeddingSet>,
        cfg: AlignmentHeadConfig,
        visual_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if sets.is_empty() {
            return Err(SemanticError::Input(
                "semantic head requires at least one embedding set".into(),
            ));
        }
        let mut sets = sets;
        sets.sort_by_key(|s| s.class_id);
        for (i, s) in sets.iter().enumerate() {
            if s.class_id != i {
                return Err(SemanticError::Input(format!(
                    "embedding sets must cover class ids 0..{} exactly; found id {}",
                    sets.len(),
                    s.class_id
                )));
            }
        }
        let d_text = sets[0].dim();
        for s in &sets {
            if s.dim() != d_text {
                return Err(SemanticError::Format {
                    class: Some(s.class_id),
                    msg: format!("dim {} differs from {}", s.dim(), d_text),
                });
            }
        }
        let projection = init_projection(cfg.projection, visual_dim, d_text, seed)?;
        Ok(Self {
            kind: HeadKind::Semantic,
            cfg,
            sets,
            projection,
        })
    }

    /// One-hot baseline: single-token orthonormal basis sets in a text
    /// space of dimension `n_classes`.
    pub fn one_hot(
        n_classes: usize,
        cfg: AlignmentHeadConfig,
        visual_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(SemanticError::Input("one_hot head needs classes".into()));
        }
        let sets: Vec<SemanticEmbeddingSet> = (0..n_classes)
            .map(|c| {
                let mut basis = vec![0.0; n_classes];
                basis[c] = 1.0;
                SemanticEmbeddingSet::new(c, vec![basis], SemanticSource::ClassName)
            })
            .collect::<Result<_>>()?;
        let projection = init_projection(cfg.projection, visual_dim, n_classes, seed)?;
        Ok(Self {
            kind: HeadKind::OneHot,
            cfg,
            sets,
            projection,
        })
    }

    /// Rebuilds a head from checkpoint state.
    pub fn from_parts(
        kind: HeadKind,
        cfg: AlignmentHeadConfig,
        sets: Vec<SemanticEmbeddingSet>,
        projection: Option<Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        if sets.is_empty() {
            return Err(SemanticError::Input("head requires embedding sets".into()));
        }
        Ok(Self {
            kind,
            cfg,
            sets,
            projection,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.sets.len()
    }

    pub fn d_text(&self) -> usize {
        self.sets[0].dim()
    }

    /// Logits for one visual embedding over every class, using all tokens
    /// (the test-time rule).
    pub fn logits_all_tokens(&self, visual_row: &[f64]) -> Result<Vec<f64>> {
        self.sets
            .iter()
            .map(|set| {
                let all: Vec<usize> = (0..set.len()).collect();
                class_logit(visual_row, set, &all, &self.cfg, self.projection.as_ref())
            })
            .collect()
    }

    /// Likelihoods for one visual embedding over every class (all tokens).
    pub fn probs_all_tokens(&self, visual_row: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .logits_all_tokens(visual_row)?
            .into_iter()
            .map(sigmoid_scalar)
            .collect())
    }

    /// Records the head's trainable projection on the tape (if any).
    pub fn leaf_projection(&self, tape: &mut Tape) -> Option<NodeId> {
        self.projection.as_ref().map(|p| tape.leaf(p))
    }

    /// Tape-scored probabilities `[b, C]` from visual embeddings `[b, d]`
    /// against the chosen token subsets (one subset per class).
    pub fn probs_on_tape(
        &self,
        tape: &mut Tape,
        proj_id: Option<NodeId>,
        visual: NodeId,
        chosen: &[Vec<usize>],
    ) -> Result<NodeId> {
        let logits = self.logits_on_tape(tape, proj_id, visual, chosen)?;
        Ok(tape.sigmoid(logits)?)
    }

    /// Tape-scored logits `[b, C]`; see [`probs_on_tape`].
    ///
    /// [`probs_on_tape`]: AlignmentHead::probs_on_tape
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        proj_id: Option<NodeId>,
        visual: NodeId,
        chosen: &[Vec<usize>],
    ) -> Result<NodeId> {
        if chosen.len() != self.sets.len() {
            return Err(SemanticError::Contract(format!(
                "chosen subsets for {} classes, head has {}",
                chosen.len(),
                self.sets.len()
            )));
        }
        let projected = match proj_id {
            Some(p) => tape.matmul(visual, p)?,
            None => visual,
        };
        let vn = tape.normalize_rows(projected)?;
        let mut cols = Vec::with_capacity(self.sets.len());
        for (set, subset) in self.sets.iter().zip(chosen.iter()) {
            if subset.is_empty() {
                return Err(SemanticError::Contract(format!(
                    "class {}: chosen token subset must be non-empty",
                    set.class_id
                )));
            }
            // Unit-normalized chosen tokens laid out as [d_text, k] so the
            // matmul lands on [b, k] similarities directly.
            let k = subset.len();
            let d = set.dim();
            let mut tok = vec![0.0; d * k];
            for (col, &ti) in subset.iter().enumerate() {
                let t = set.tokens.get(ti).ok_or_else(|| {
                    SemanticError::Contract(format!(
                        "class {}: token index {ti} out of range",
                        set.class_id
                    ))
                })?;
                let norm = l2(t);
                for (row, &v) in t.iter().enumerate() {
                    tok[row * k + col] = v / norm;
                }
            }
            let tokens = tape.constant(vec![d, k], tok)?;
            let sims = tape.matmul(vn, tokens)?;
            let weight = match self.cfg.aggregate {
                Aggregate::Sum => 1.0,
                Aggregate::Mean => 1.0 / k as f64,
            };
            let agg = tape.constant(vec![k, 1], vec![weight; k])?;
            let col = tape.matmul(sims, agg)?;
            cols.push(tape.scale(col, self.cfg.tau)?);
        }
        Ok(tape.concat_cols(&cols)?)
    }
}

fn init_projection(
    mode: ProjectionMode,
    visual_dim: usize,
    d_text: usize,
    seed: u64,
) -> Result<Option<Tensor>> {
    match mode {
        ProjectionMode::Identity => {
            if visual_dim != d_text {
                return Err(SemanticError::Input(format!(
                    "identity projection requires visual dim {visual_dim} == text dim {d_text}"
                )));
            }
            Ok(None)
        }
        ProjectionMode::Auto if visual_dim == d_text => Ok(None),
        ProjectionMode::Auto | ProjectionMode::Trainable => {
            let mut rng = rng::seeded(rng::split_seed(seed, 0xA11C));
            let scale = PROJ_INIT_SCALE / (visual_dim as f64).sqrt();
            let data: Vec<f64> = (0..visual_dim * d_text)
                .map(|_| rng::uniform_symmetric(&mut rng, scale))
                .collect();
            let t = Tensor::new(vec![visual_dim, d_text], data)?.with_requires_grad(true);
            Ok(Some(t))
        }
    }
}
