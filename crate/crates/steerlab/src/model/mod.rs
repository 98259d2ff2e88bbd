//! Minimal decoder-only transformer runtime with hookable residual streams.
//!
//! Two block kinds share one hook path:
//!
//! - `full`: pre-norm (RMS) multi-head causal self-attention with rotary
//!   positions, then a pre-norm SiLU MLP. A final RMS norm sits before the
//!   unembedding.
//! - `linear`: `h <- h + M h` with a single `d_model x d_model` matrix and no
//!   normalization anywhere. Analytically tractable; used by the planted
//!   fixture.
//!
//! "Layer l" always means the residual stream at the output of block `l`,
//! 1-based. Interventions add `alpha * vector` there; captures read there,
//! after any intervention at the same layer. All arithmetic is f32 with f32
//! accumulation so identical inputs give bit-identical outputs.

mod forward;
mod generate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::rng::{fnv1a64, SplitMix64};
use crate::tensor::Tensor;
use crate::vocab::{VocabError, Vocabulary};

pub use forward::ForwardOutput;

pub const MODEL_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tensor {name}: expected shape {expected:?}, found {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected tensor {0:?} in container")]
    UnexpectedTensor(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("intervention vector has length {actual}, model d_model is {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error(
        "context overflow: prompt {prompt} + max_new_tokens {max_new} exceeds max_seq_len {max}"
    )]
    ContextOverflow {
        prompt: usize,
        max_new: usize,
        max: usize,
    },
}

/// Kind of each transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Full,
    Linear,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Full => write!(f, "full"),
            BlockKind::Linear => write!(f, "linear"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub block_kinds: Vec<BlockKind>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must be at least 2".into()));
        }
        if self.block_kinds.len() != self.n_layers {
            return Err(ModelError::Config(format!(
                "block_kinds has {} entries, n_layers is {}",
                self.block_kinds.len(),
                self.n_layers
            )));
        }
        if self.has_full_blocks() && !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn has_full_blocks(&self) -> bool {
        self.block_kinds.contains(&BlockKind::Full)
    }
}

/// Weights of one block, shapes validated at construction.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum BlockWeights {
    Full {
        attn_norm: Tensor,
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
        mlp_norm: Tensor,
        w_up: Tensor,
        w_down: Tensor,
    },
    Linear {
        m: Tensor,
    },
}

/// Which positions an intervention touches during generation.
///
/// `All` also edits every newly generated position at every decode step, so
/// the steering effect persists through generation. `PromptOnly` restricts
/// the edit to prompt positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScope {
    #[default]
    All,
    PromptOnly,
}

/// Additive residual-stream edit: `h <- h + alpha * vector` at the output of
/// `layer` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub alpha: f32,
    pub vector: Vec<f32>,
    #[serde(default)]
    pub positions: PositionScope,
}

impl InterventionSpec {
    pub fn new(layer: usize, alpha: f32, vector: Vec<f32>) -> Self {
        Self {
            layer,
            alpha,
            vector,
            positions: PositionScope::All,
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.layer == 0 || self.layer > config.n_layers {
            return Err(ModelError::InvalidIntervention(format!(
                "layer {} outside 1..={}",
                self.layer, config.n_layers
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(ModelError::InvalidIntervention(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.vector.len() != config.d_model {
            return Err(ModelError::DimensionMismatch {
                expected: config.d_model,
                actual: self.vector.len(),
            });
        }
        Ok(())
    }
}

/// Decoding strategy. Greedy ignores the seed; temperature sampling draws
/// from the documented SplitMix64 stream seeded with `params.seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum DecodeStrategy {
    Greedy,
    Temperature { temperature: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    #[serde(flatten)]
    pub strategy: DecodeStrategy,
    pub seed: u64,
    pub stop_ids: Option<Vec<u32>>,
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            strategy: DecodeStrategy::Greedy,
            seed: 0,
            stop_ids: None,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.max_new_tokens == 0 {
            return Err(ModelError::InvalidParams(
                "max_new_tokens must be positive".into(),
            ));
        }
        if let DecodeStrategy::Temperature { temperature } = self.strategy {
            if !temperature.is_finite() || temperature <= 0.0 {
                return Err(ModelError::InvalidParams(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
        }
        Ok(())
    }
}

/// One finished generation, with everything needed to rejudge it later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_ids: Vec<u32>,
    pub output_ids: Vec<u32>,
    pub output_text: String,
    pub intervention: Option<InterventionSpec>,
    pub params: GenerationParams,
}

/// A loaded model. Immutable after construction; shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embedding: Tensor,
    unembedding: Tensor,
    final_norm: Option<Tensor>,
    blocks: Vec<BlockWeights>,
    vocab: Vocabulary,
    id: String,
}

impl Model {
    /// Assemble a model from parts, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Tensor,
        unembedding: Tensor,
        final_norm: Option<Tensor>,
        blocks: Vec<BlockWeights>,
        vocab: Vocabulary,
        id: String,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        if vocab.len() != v {
            return Err(ModelError::Config(format!(
                "vocabulary has {} entries, config says vocab_size {v}",
                vocab.len()
            )));
        }
        check_shape("embedding", &embedding, &[v, d])?;
        check_shape("unembedding", &unembedding, &[v, d])?;
        match (&final_norm, config.has_full_blocks()) {
            (Some(t), true) => check_shape("final_norm", t, &[d])?,
            (None, true) => return Err(ContainerError::MissingTensor("final_norm".into()).into()),
            (Some(_), false) => {
                return Err(ModelError::UnexpectedTensor("final_norm".into()));
            }
            (None, false) => {}
        }
        if blocks.len() != config.n_layers {
            return Err(ModelError::Config(format!(
                "{} blocks provided, n_layers is {}",
                blocks.len(),
                config.n_layers
            )));
        }
        for (i, (block, kind)) in blocks.iter().zip(&config.block_kinds).enumerate() {
            match (block, kind) {
                (
                    BlockWeights::Full {
                        attn_norm,
                        wq,
                        wk,
                        wv,
                        wo,
                        mlp_norm,
                        w_up,
                        w_down,
                    },
                    BlockKind::Full,
                ) => {
                    check_shape(&format!("blocks.{i}.attn_norm"), attn_norm, &[d])?;
                    check_shape(&format!("blocks.{i}.wq"), wq, &[d, d])?;
                    check_shape(&format!("blocks.{i}.wk"), wk, &[d, d])?;
                    check_shape(&format!("blocks.{i}.wv"), wv, &[d, d])?;
                    check_shape(&format!("blocks.{i}.wo"), wo, &[d, d])?;
                    check_shape(&format!("blocks.{i}.mlp_norm"), mlp_norm, &[d])?;
                    check_shape(&format!("blocks.{i}.w_up"), w_up, &[config.d_ff, d])?;
                    check_shape(&format!("blocks.{i}.w_down"), w_down, &[d, config.d_ff])?;
                }
                (BlockWeights::Linear { m }, BlockKind::Linear) => {
                    check_shape(&format!("blocks.{i}.m"), m, &[d, d])?;
                }
                _ => {
                    return Err(ModelError::Config(format!(
                        "block {i} weights do not match declared kind {kind}"
                    )));
                }
            }
        }
        Ok(Self {
            config,
            embedding,
            unembedding,
            final_norm,
            blocks,
            vocab,
            id,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn unembedding(&self) -> &Tensor {
        &self.unembedding
    }

    pub fn block(&self, index: usize) -> &BlockWeights {
        &self.blocks[index]
    }

    /// Stable identifier used in bank metadata and report provenance.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Greedy longest-match tokenization against the model vocabulary.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.vocab.decode(ids)
    }

    /// Load a model container plus its sibling vocabulary file.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let container = Container::parse(&bytes)?;
        let config = config_from_metadata(&container)?;

        let vocab_file = container.require_meta("vocab_file")?.to_string();
        let vocab_path = match path.parent() {
            Some(parent) => parent.join(&vocab_file),
            None => Path::new(&vocab_file).to_path_buf(),
        };
        let vocab = Vocabulary::load(&vocab_path)?;

        let mut taken = std::collections::BTreeSet::new();
        let mut take = |name: &str| -> Result<Tensor, ModelError> {
            taken.insert(name.to_string());
            Ok(container.require(name)?.clone())
        };

        let embedding = take("embedding")?;
        let unembedding = take("unembedding")?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for (i, kind) in config.block_kinds.iter().enumerate() {
            let block = match kind {
                BlockKind::Full => BlockWeights::Full {
                    attn_norm: take(&format!("blocks.{i}.attn_norm"))?,
                    wq: take(&format!("blocks.{i}.wq"))?,
                    wk: take(&format!("blocks.{i}.wk"))?,
                    wv: take(&format!("blocks.{i}.wv"))?,
                    wo: take(&format!("blocks.{i}.wo"))?,
                    mlp_norm: take(&format!("blocks.{i}.mlp_norm"))?,
                    w_up: take(&format!("blocks.{i}.w_up"))?,
                    w_down: take(&format!("blocks.{i}.w_down"))?,
                },
                BlockKind::Linear => BlockWeights::Linear {
                    m: take(&format!("blocks.{i}.m"))?,
                },
            };
            blocks.push(block);
        }
        let final_norm = if config.has_full_blocks() {
            Some(take("final_norm")?)
        } else {
            None
        };
        for name in container.tensors.keys() {
            if !taken.contains(name) {
                return Err(ModelError::UnexpectedTensor(name.clone()));
            }
        }

        let id = format!("{:016x}", fnv1a64(&bytes));
        Self::from_parts(
            config,
            embedding,
            unembedding,
            final_norm,
            blocks,
            vocab,
            id,
        )
    }

    /// Write the model container and its vocabulary file (`<stem>.vocab`)
    /// next to each other.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        let vocab_file = format!("{stem}.vocab");

        let mut container = Container::new();
        container
            .tensors
            .insert("embedding".into(), self.embedding.clone());
        container
            .tensors
            .insert("unembedding".into(), self.unembedding.clone());
        if let Some(fnorm) = &self.final_norm {
            container.tensors.insert("final_norm".into(), fnorm.clone());
        }
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                BlockWeights::Full {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo,
                    mlp_norm,
                    w_up,
                    w_down,
                } => {
                    let pairs: [(&str, &Tensor); 8] = [
                        ("attn_norm", attn_norm),
                        ("wq", wq),
                        ("wk", wk),
                        ("wv", wv),
                        ("wo", wo),
                        ("mlp_norm", mlp_norm),
                        ("w_up", w_up),
                        ("w_down", w_down),
                    ];
                    for (suffix, tensor) in pairs {
                        container
                            .tensors
                            .insert(format!("blocks.{i}.{suffix}"), tensor.clone());
                    }
                }
                BlockWeights::Linear { m } => {
                    container.tensors.insert(format!("blocks.{i}.m"), m.clone());
                }
            }
        }

        let meta = &mut container.metadata;
        meta.insert("schema_version".into(), MODEL_SCHEMA_VERSION.into());
        meta.insert("n_layers".into(), self.config.n_layers.to_string());
        meta.insert("d_model".into(), self.config.d_model.to_string());
        meta.insert("n_heads".into(), self.config.n_heads.to_string());
        meta.insert("d_ff".into(), self.config.d_ff.to_string());
        meta.insert("vocab_size".into(), self.config.vocab_size.to_string());
        meta.insert("max_seq_len".into(), self.config.max_seq_len.to_string());
        let kinds: Vec<String> = self
            .config
            .block_kinds
            .iter()
            .map(|k| k.to_string())
            .collect();
        meta.insert("block_kinds".into(), kinds.join(","));
        meta.insert("vocab_file".into(), vocab_file.clone());

        container.write_to(path)?;
        let vocab_path = match path.parent() {
            Some(parent) => parent.join(&vocab_file),
            None => Path::new(&vocab_file).to_path_buf(),
        };
        self.vocab.save(&vocab_path)?;
        Ok(())
    }
}

fn check_shape(name: &str, tensor: &Tensor, expected: &[usize]) -> Result<(), ModelError> {
    if tensor.shape() != expected {
        return Err(ModelError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: tensor.shape().to_vec(),
        });
    }
    Ok(())
}

fn config_from_metadata(container: &Container) -> Result<ModelConfig, ModelError> {
    let parse_usize = |key: &str| -> Result<usize, ModelError> {
        let raw = container.require_meta(key)?;
        raw.parse()
            .map_err(|_| ModelError::Config(format!("metadata {key}={raw:?} is not an integer")))
    };
    let kinds_raw = container.require_meta("block_kinds")?;
    let mut block_kinds = Vec::new();
    for part in kinds_raw.split(',') {
        block_kinds.push(match part {
            "full" => BlockKind::Full,
            "linear" => BlockKind::Linear,
            other => {
                return Err(ModelError::Config(format!(
                    "unknown block kind {other:?} in metadata"
                )))
            }
        });
    }
    let config = ModelConfig {
        n_layers: parse_usize("n_layers")?,
        d_model: parse_usize("d_model")?,
        n_heads: parse_usize("n_heads")?,
        d_ff: parse_usize("d_ff")?,
        vocab_size: parse_usize("vocab_size")?,
        max_seq_len: parse_usize("max_seq_len")?,
        block_kinds,
    };
    config.validate()?;
    Ok(config)
}

/// Build a full-block model with seeded gaussian weights, scaled 1/sqrt(d).
/// Fixture for shape, determinism, and zero-alpha tests; the vocabulary is
/// the reserved entries plus `t3 t4 ...` single tokens.
pub fn random_full_model(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let mut rng = SplitMix64::new(seed);
    let mut gauss_tensor = |shape: Vec<usize>, scale: f64| {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| (rng.next_gaussian() * scale) as f32)
            .collect();
        Tensor::new(shape, data).expect("shape matches generated data")
    };

    let scale = 1.0 / (d as f64).sqrt();
    let embedding = gauss_tensor(vec![config.vocab_size, d], scale);
    let unembedding = gauss_tensor(vec![config.vocab_size, d], scale);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for kind in &config.block_kinds {
        blocks.push(match kind {
            BlockKind::Full => BlockWeights::Full {
                attn_norm: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                wq: gauss_tensor(vec![d, d], scale),
                wk: gauss_tensor(vec![d, d], scale),
                wv: gauss_tensor(vec![d, d], scale),
                wo: gauss_tensor(vec![d, d], scale),
                mlp_norm: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                w_up: gauss_tensor(vec![config.d_ff, d], scale),
                w_down: gauss_tensor(vec![d, config.d_ff], 1.0 / (config.d_ff as f64).sqrt()),
            },
            BlockKind::Linear => BlockWeights::Linear {
                m: gauss_tensor(vec![d, d], scale * 0.5),
            },
        });
    }
    let final_norm = config
        .has_full_blocks()
        .then(|| Tensor::new(vec![d], vec![1.0; d]).unwrap());

    let mut tokens = vec![
        "<bos>".to_string(),
        "<eos>".to_string(),
        "<unk>".to_string(),
    ];
    for i in crate::vocab::N_RESERVED..config.vocab_size {
        tokens.push(format!("t{i} "));
    }
    let vocab = Vocabulary::new(tokens)?;

    Model::from_parts(
        config.clone(),
        embedding,
        unembedding,
        final_norm,
        blocks,
        vocab,
        format!("random-full-{seed}"),
    )
}

/// Per-layer captures keyed by 1-based layer index; each tensor is
/// `(seq, d_model)`.
pub type Captures = BTreeMap<usize, Tensor>;
