//! Layer-wise difference-in-means direction estimation.
//!
//! A prompt's representation at layer `l` is the mean of the post-block
//! residual states of its final `K` tokens (all of them when the prompt is
//! shorter than `K`). The direction for layer `l` is the mean representation
//! over the positive prompt set minus the mean over the negative set, stored
//! raw unless unit-normalization is requested. Representations may be
//! computed concurrently; the reduction always sums in prompt order, so the
//! result is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::corpus::TaskSpec;
use crate::model::{Model, ModelError};
use crate::parallel::bounded_map;
use crate::tensor::{norm, Tensor};

pub const BANK_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
    #[error("empty prompt set: {side}")]
    EmptyPromptSet { side: &'static str },
    #[error("prompt produced no tokens")]
    EmptyPrompt,
    #[error("{} prompt(s) failed tokenization: {}", failures.len(), summarize(failures))]
    PromptFailures { failures: Vec<PromptFailure> },
    #[error("direction bank metadata: {0}")]
    Metadata(String),
    #[error("bank d_model {bank} does not match model d_model {model}")]
    DimensionMismatch { bank: usize, model: usize },
    #[error("bank layer {layer} outside model layers 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
}

#[derive(Debug, Clone)]
pub struct PromptFailure {
    /// "positive" or "negative"
    pub side: &'static str,
    /// Index within its prompt list.
    pub index: usize,
    pub message: String,
}

fn summarize(failures: &[PromptFailure]) -> String {
    failures
        .iter()
        .take(3)
        .map(|f| format!("{}[{}]: {}", f.side, f.index, f.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// K: how many final tokens to average.
    pub k_last_tokens: usize,
    /// Layers to estimate; `None` means all `1..=n_layers`.
    pub layers: Option<BTreeSet<usize>>,
    /// Unit-normalize each stored vector. Off by default: the method is
    /// defined on raw differences.
    pub normalize: bool,
    /// Concurrent prompt representations (reduction stays ordered).
    pub workers: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k_last_tokens: 4,
            layers: None,
            normalize: false,
            workers: 1,
        }
    }
}

/// Estimation provenance stored with every bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankMetadata {
    pub task: String,
    pub target_label: String,
    pub opposite_label: String,
    pub k_last_tokens: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub model_id: String,
    pub normalized: bool,
}

/// Per-layer direction vectors plus estimation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBank {
    pub d_model: usize,
    pub directions: BTreeMap<usize, Vec<f32>>,
    pub metadata: BankMetadata,
}

impl DirectionBank {
    pub fn vector(&self, layer: usize) -> Option<&[f32]> {
        self.directions.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.directions.keys().copied()
    }

    /// Check this bank can be applied to `model`.
    pub fn check_model(&self, model: &Model) -> Result<(), EstimateError> {
        if self.d_model != model.config().d_model {
            return Err(EstimateError::DimensionMismatch {
                bank: self.d_model,
                model: model.config().d_model,
            });
        }
        for &layer in self.directions.keys() {
            if layer == 0 || layer > model.config().n_layers {
                return Err(EstimateError::LayerOutOfRange {
                    layer,
                    n_layers: model.config().n_layers,
                });
            }
        }
        Ok(())
    }
}

/// Mean of the last `min(K, T)` post-block residual states at `layer`.
pub fn prompt_representation(
    model: &Model,
    prompt: &str,
    layer: usize,
    k: usize,
) -> Result<Vec<f32>, EstimateError> {
    if k == 0 {
        return Err(EstimateError::InvalidConfig("K must be at least 1".into()));
    }
    let ids = model.tokenize(prompt);
    if ids.is_empty() {
        return Err(EstimateError::EmptyPrompt);
    }
    let layers: BTreeSet<usize> = [layer].into();
    let captures = model.capture_prompt_activations(&ids, &layers)?;
    Ok(mean_of_last_k(&captures[&layer], k))
}

fn mean_of_last_k(states: &Tensor, k: usize) -> Vec<f32> {
    let seq = states.n_rows();
    let take = k.min(seq);
    let d = states.n_cols();
    let mut acc = vec![0.0f32; d];
    for t in seq - take..seq {
        for (a, v) in acc.iter_mut().zip(states.row(t)) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= take as f32;
    }
    acc
}

/// Estimate `v(l) = mu_plus(l) - mu_minus(l)` for every requested layer.
pub fn estimate_directions(
    model: &Model,
    task: &TaskSpec,
    positives: &[String],
    negatives: &[String],
    config: &EstimatorConfig,
) -> Result<DirectionBank, EstimateError> {
    if config.k_last_tokens == 0 {
        return Err(EstimateError::InvalidConfig("K must be at least 1".into()));
    }
    if positives.is_empty() {
        return Err(EstimateError::EmptyPromptSet { side: "positives" });
    }
    if negatives.is_empty() {
        return Err(EstimateError::EmptyPromptSet { side: "negatives" });
    }
    task.validate().map_err(EstimateError::InvalidConfig)?;

    let n_layers = model.config().n_layers;
    let layers: BTreeSet<usize> = match &config.layers {
        Some(set) => {
            for &layer in set {
                if layer == 0 || layer > n_layers {
                    return Err(EstimateError::LayerOutOfRange { layer, n_layers });
                }
            }
            set.clone()
        }
        None => (1..=n_layers).collect(),
    };
    if layers.is_empty() {
        return Err(EstimateError::InvalidConfig("layer set is empty".into()));
    }

    let mu_plus = group_mean(model, positives, "positive", &layers, config)?;
    let mu_minus = group_mean(model, negatives, "negative", &layers, config)?;

    let d = model.config().d_model;
    let mut directions = BTreeMap::new();
    for &layer in &layers {
        let mut v: Vec<f32> = mu_plus[&layer]
            .iter()
            .zip(&mu_minus[&layer])
            .map(|(p, m)| p - m)
            .collect();
        if config.normalize {
            let len = norm(&v);
            if len > 0.0 {
                for x in &mut v {
                    *x /= len;
                }
            }
        }
        debug_assert_eq!(v.len(), d);
        directions.insert(layer, v);
    }

    Ok(DirectionBank {
        d_model: d,
        directions,
        metadata: BankMetadata {
            task: task.name.clone(),
            target_label: task.target_label.clone(),
            opposite_label: task.opposite_label.clone(),
            k_last_tokens: config.k_last_tokens,
            n_positive: positives.len(),
            n_negative: negatives.len(),
            model_id: model.id().to_string(),
            normalized: config.normalize,
        },
    })
}

/// Per-layer group mean of prompt representations. One forward per prompt
/// captures every requested layer; sums run in prompt-index order.
fn group_mean(
    model: &Model,
    prompts: &[String],
    side: &'static str,
    layers: &BTreeSet<usize>,
    config: &EstimatorConfig,
) -> Result<BTreeMap<usize, Vec<f32>>, EstimateError> {
    type Reps = BTreeMap<usize, Vec<f32>>;
    let per_prompt: Vec<Result<Reps, String>> =
        bounded_map(prompts, config.workers, |_, prompt| {
            let ids = model.tokenize(prompt);
            if ids.is_empty() {
                return Err("tokenized to zero tokens".to_string());
            }
            let captures = model
                .capture_prompt_activations(&ids, layers)
                .map_err(|e| e.to_string())?;
            Ok(layers
                .iter()
                .map(|&l| (l, mean_of_last_k(&captures[&l], config.k_last_tokens)))
                .collect())
        });

    let failures: Vec<PromptFailure> = per_prompt
        .iter()
        .enumerate()
        .filter_map(|(index, r)| {
            r.as_ref().err().map(|message| PromptFailure {
                side,
                index,
                message: message.clone(),
            })
        })
        .collect();
    if !failures.is_empty() {
        return Err(EstimateError::PromptFailures { failures });
    }

    let d = model.config().d_model;
    let mut sums: BTreeMap<usize, Vec<f32>> =
        layers.iter().map(|&l| (l, vec![0.0f32; d])).collect();
    for reps in per_prompt.into_iter().map(Result::unwrap) {
        for (layer, rep) in reps {
            for (a, v) in sums.get_mut(&layer).unwrap().iter_mut().zip(&rep) {
                *a += v;
            }
        }
    }
    let count = prompts.len() as f32;
    for sum in sums.values_mut() {
        for a in sum.iter_mut() {
            *a /= count;
        }
    }
    Ok(sums)
}

/// Write a bank in the shared container format: tensors `layer_<l>/v`,
/// provenance in the header metadata map. Round-trips bit-exactly.
pub fn save_bank(bank: &DirectionBank, path: &Path) -> Result<(), EstimateError> {
    let mut container = Container::new();
    for (layer, v) in &bank.directions {
        container.tensors.insert(
            format!("layer_{layer}/v"),
            Tensor::new(vec![bank.d_model], v.clone()).expect("vector length is d_model"),
        );
    }
    let meta = &mut container.metadata;
    meta.insert("schema_version".into(), BANK_SCHEMA_VERSION.into());
    meta.insert("task".into(), bank.metadata.task.clone());
    meta.insert("target_label".into(), bank.metadata.target_label.clone());
    meta.insert(
        "opposite_label".into(),
        bank.metadata.opposite_label.clone(),
    );
    meta.insert(
        "k_last_tokens".into(),
        bank.metadata.k_last_tokens.to_string(),
    );
    meta.insert("n_positive".into(), bank.metadata.n_positive.to_string());
    meta.insert("n_negative".into(), bank.metadata.n_negative.to_string());
    meta.insert("model_id".into(), bank.metadata.model_id.clone());
    meta.insert("normalized".into(), bank.metadata.normalized.to_string());
    meta.insert("d_model".into(), bank.d_model.to_string());
    container.write_to(path)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<DirectionBank, EstimateError> {
    let container = Container::read_from(path)?;
    let meta = |key: &str| -> Result<String, EstimateError> {
        Ok(container.require_meta(key)?.to_string())
    };
    let meta_usize = |key: &str| -> Result<usize, EstimateError> {
        meta(key)?
            .parse()
            .map_err(|_| EstimateError::Metadata(format!("{key} is not an integer")))
    };

    let d_model = meta_usize("d_model")?;
    let mut directions = BTreeMap::new();
    for (name, tensor) in &container.tensors {
        let layer: usize = name
            .strip_prefix("layer_")
            .and_then(|rest| rest.strip_suffix("/v"))
            .and_then(|num| num.parse().ok())
            .ok_or_else(|| EstimateError::Metadata(format!("unrecognized tensor name {name:?}")))?;
        if tensor.shape() != [d_model] {
            return Err(EstimateError::DimensionMismatch {
                bank: tensor.data().len(),
                model: d_model,
            });
        }
        directions.insert(layer, tensor.data().to_vec());
    }

    Ok(DirectionBank {
        d_model,
        directions,
        metadata: BankMetadata {
            task: meta("task")?,
            target_label: meta("target_label")?,
            opposite_label: meta("opposite_label")?,
            k_last_tokens: meta_usize("k_last_tokens")?,
            n_positive: meta_usize("n_positive")?,
            n_negative: meta_usize("n_negative")?,
            model_id: meta("model_id")?,
            normalized: meta("normalized")? == "true",
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_full_model, BlockKind, ModelConfig};

    fn model() -> Model {
        let config = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 32,
            block_kinds: vec![BlockKind::Full; 3],
        };
        random_full_model(&config, 17).unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec {
            name: "demo".into(),
            target_label: "a".into(),
            opposite_label: "b".into(),
        }
    }

    fn prompts(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn k1_is_exactly_the_final_token_state() {
        let m = model();
        let prompt = "t3 t4 t5 ";
        let rep = prompt_representation(&m, prompt, 2, 1).unwrap();
        let ids = m.tokenize(prompt);
        let caps = m
            .capture_prompt_activations(&ids, &[2usize].into())
            .unwrap();
        let last = caps[&2].row(ids.len() - 1);
        assert_eq!(rep, last.to_vec());
    }

    #[test]
    fn k_larger_than_prompt_averages_everything() {
        let m = model();
        let prompt = "t3 t4 t5 ";
        let ids = m.tokenize(prompt);
        assert_eq!(ids.len(), 3);
        let rep_clamped = prompt_representation(&m, prompt, 1, 100).unwrap();
        let caps = m
            .capture_prompt_activations(&ids, &[1usize].into())
            .unwrap();
        let states = &caps[&1];
        let mut exact = vec![0.0f32; 8];
        for t in 0..3 {
            for (a, v) in exact.iter_mut().zip(states.row(t)) {
                *a += v;
            }
        }
        for a in &mut exact {
            *a /= 3.0;
        }
        assert_eq!(rep_clamped, exact);
    }

    #[test]
    fn empty_prompt_is_an_error() {
        let m = model();
        assert!(matches!(
            prompt_representation(&m, "", 1, 4),
            Err(EstimateError::EmptyPrompt)
        ));
    }

    #[test]
    fn identical_sets_give_zero_directions() {
        let m = model();
        let set = prompts(&["t3 t4 ", "t5 t6 t7 "]);
        let bank =
            estimate_directions(&m, &task(), &set, &set, &EstimatorConfig::default()).unwrap();
        for (layer, v) in &bank.directions {
            for x in v {
                assert!(x.abs() < 1e-6, "layer {layer} component {x}");
            }
        }
    }

    #[test]
    fn singletons_reduce_to_representation_difference() {
        let m = model();
        let bank = estimate_directions(
            &m,
            &task(),
            &prompts(&["t3 t4 t5 "]),
            &prompts(&["t6 t7 "]),
            &EstimatorConfig::default(),
        )
        .unwrap();
        for layer in 1..=3 {
            let plus = prompt_representation(&m, "t3 t4 t5 ", layer, 4).unwrap();
            let minus = prompt_representation(&m, "t6 t7 ", layer, 4).unwrap();
            let expected: Vec<f32> = plus.iter().zip(&minus).map(|(p, q)| p - q).collect();
            assert_eq!(bank.directions[&layer], expected);
        }
    }

    #[test]
    fn swapping_sets_negates_directions() {
        let m = model();
        let pos = prompts(&["t3 t4 ", "t5 t3 t4 ", "t8 "]);
        let neg = prompts(&["t6 t7 ", "t9 t6 "]);
        let config = EstimatorConfig::default();
        let ab = estimate_directions(&m, &task(), &pos, &neg, &config).unwrap();
        let ba = estimate_directions(&m, &task(), &neg, &pos, &config).unwrap();
        for layer in 1..=3 {
            for (x, y) in ab.directions[&layer].iter().zip(&ba.directions[&layer]) {
                assert!((x + y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permutation_and_duplication_leave_directions_unchanged() {
        let m = model();
        let pos = prompts(&["t3 t4 ", "t5 ", "t3 t5 t4 "]);
        let neg = prompts(&["t6 ", "t7 t6 "]);
        let config = EstimatorConfig::default();
        let base = estimate_directions(&m, &task(), &pos, &neg, &config).unwrap();

        let mut shuffled = pos.clone();
        shuffled.reverse();
        let perm = estimate_directions(&m, &task(), &shuffled, &neg, &config).unwrap();

        let mut doubled = pos.clone();
        doubled.extend(pos.iter().cloned());
        let dup = estimate_directions(&m, &task(), &doubled, &neg, &config).unwrap();

        for layer in 1..=3 {
            for ((a, b), c) in base.directions[&layer]
                .iter()
                .zip(&perm.directions[&layer])
                .zip(&dup.directions[&layer])
            {
                assert!((a - b).abs() < 1e-6);
                assert!((a - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let m = model();
        let some = prompts(&["t3 "]);
        assert!(matches!(
            estimate_directions(&m, &task(), &[], &some, &EstimatorConfig::default()),
            Err(EstimateError::EmptyPromptSet { side: "positives" })
        ));
        assert!(matches!(
            estimate_directions(&m, &task(), &some, &[], &EstimatorConfig::default()),
            Err(EstimateError::EmptyPromptSet { side: "negatives" })
        ));
    }

    #[test]
    fn tokenization_failures_are_reported_per_prompt() {
        let m = model();
        let pos = prompts(&["t3 ", "", "t4 ", ""]);
        let neg = prompts(&["t6 "]);
        match estimate_directions(&m, &task(), &pos, &neg, &EstimatorConfig::default()) {
            Err(EstimateError::PromptFailures { failures }) => {
                let indices: Vec<usize> = failures.iter().map(|f| f.index).collect();
                assert_eq!(indices, vec![1, 3]);
                assert!(failures.iter().all(|f| f.side == "positive"));
            }
            other => panic!("expected per-prompt failures, got {other:?}"),
        }
    }

    #[test]
    fn parallel_estimation_matches_sequential() {
        let m = model();
        let pos = prompts(&["t3 t4 ", "t5 ", "t3 t5 t4 ", "t8 t9 "]);
        let neg = prompts(&["t6 ", "t7 t6 ", "t9 "]);
        let seq =
            estimate_directions(&m, &task(), &pos, &neg, &EstimatorConfig::default()).unwrap();
        let par = estimate_directions(
            &m,
            &task(),
            &pos,
            &neg,
            &EstimatorConfig {
                workers: 4,
                ..EstimatorConfig::default()
            },
        )
        .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn bank_round_trip_is_bit_exact() {
        let m = model();
        let bank = estimate_directions(
            &m,
            &task(),
            &prompts(&["t3 t4 "]),
            &prompts(&["t6 "]),
            &EstimatorConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.bank");
        save_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(back.metadata, bank.metadata);
        assert_eq!(back.d_model, bank.d_model);
        for layer in 1..=3 {
            let a: Vec<u32> = bank.directions[&layer]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            let b: Vec<u32> = back.directions[&layer]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_target_label_names_the_field() {
        let m = model();
        let bank = estimate_directions(
            &m,
            &task(),
            &prompts(&["t3 "]),
            &prompts(&["t6 "]),
            &EstimatorConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.bank");
        save_bank(&bank, &path).unwrap();

        let mut container = Container::read_from(&path).unwrap();
        container.metadata.remove("target_label");
        container.write_to(&path).unwrap();

        let err = load_bank(&path).unwrap_err();
        assert!(err.to_string().contains("target_label"), "got: {err}");
    }

    #[test]
    fn bank_model_mismatch_is_caught_at_use_time() {
        let m = model();
        let bank = estimate_directions(
            &m,
            &task(),
            &prompts(&["t3 "]),
            &prompts(&["t6 "]),
            &EstimatorConfig::default(),
        )
        .unwrap();

        let narrow_config = ModelConfig {
            n_layers: 3,
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 12,
            max_seq_len: 32,
            block_kinds: vec![BlockKind::Full; 3],
        };
        let narrow = random_full_model(&narrow_config, 1).unwrap();
        assert!(matches!(
            bank.check_model(&narrow),
            Err(EstimateError::DimensionMismatch { bank: 8, model: 4 })
        ));

        let shallow_config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 32,
            block_kinds: vec![BlockKind::Full; 2],
        };
        let shallow = random_full_model(&shallow_config, 1).unwrap();
        assert!(matches!(
            bank.check_model(&shallow),
            Err(EstimateError::LayerOutOfRange { layer: 3, .. })
        ));
    }

    #[test]
    fn normalize_flag_produces_unit_vectors() {
        let m = model();
        let bank = estimate_directions(
            &m,
            &task(),
            &prompts(&["t3 t4 "]),
            &prompts(&["t6 t7 "]),
            &EstimatorConfig {
                normalize: true,
                ..EstimatorConfig::default()
            },
        )
        .unwrap();
        for v in bank.directions.values() {
            assert!((norm(v) - 1.0).abs() < 1e-5);
        }
        assert!(bank.metadata.normalized);
    }
}
