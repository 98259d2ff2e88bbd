//! Linear-block fixture with a known steering direction, effective layer,
//! and flip thresholds.
//!
//! Geometry: three orthonormal seeded directions live in the `d_model`
//! space: `u` (the steering/readout direction), `w` (a class tag carried by
//! class-token embeddings), and `r` (a constant bias direction present in
//! every embedding). Class-A embeddings carry `+g` along `w`, class-B `-g`,
//! fillers only small noise orthogonal to all three.
//!
//! Blocks (1-based layer `l`, null block at `p`):
//!
//! - `l < p`: zero matrix (identity update).
//! - `l = p`: `M = -u u^T + tau u w^T - (1-att) w w^T`. Annihilates any
//!   incoming `u` component (so injections below `p` along `u` die here),
//!   writes the class tag into `u` scaled by `tau`, and decays the tag.
//! - `l > p`: `M = -(1-att)(u u^T + w w^T)`. Scales `u` and `w` by `att`.
//!
//! The unembedding reads only `u` and `r`: class-A rows are
//! `c u + (-c beta + delta) r`, class-B rows `-c u + (c beta + delta) r`,
//! fillers tie-break offsets only, reserved tokens a large negative bias.
//! With final-state `u`-component `s`, class A wins exactly when `s > beta`,
//! so neutral prompts (`s = 0`) always decode class B and an intervention of
//! pure `u` at layer `l >= p` flips greedy output at
//! `alpha = beta / att^(N-l)`: the threshold beta at the last layer, growing
//! by `1/att` per layer below it, and infinite below the null block. The
//! tie-break offsets order class B above class A so exact threshold equality
//! never flips.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{self, Condition, CorpusError, PromptRecord, TaskSpec};
use crate::judge::{JudgeError, RuleModeSpec, RulesFile, RULES_SCHEMA_VERSION};
use crate::model::{BlockKind, BlockWeights, Model, ModelConfig, ModelError};
use crate::rng::SplitMix64;
use crate::tensor::{axpy, dot, norm, Tensor};
use crate::vocab::{Vocabulary, N_RESERVED};

#[derive(Debug, Error)]
pub enum PlantedError {
    #[error("invalid planted spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Construction parameters. Defaults give a 4-layer, width-8 model with the
/// null block at layer 2.
#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub d_model: usize,
    pub n_layers: usize,
    /// p: the block that annihilates `u` components.
    pub null_block: usize,
    /// u-scale applied by every block above the null block, in (0, 1).
    pub attenuation: f32,
    /// c: readout gain on the steering direction.
    pub class_margin: f32,
    /// beta: bias toward class B that an intervention must overcome.
    pub default_bias: f32,
    pub n_class_tokens: usize,
    pub n_filler_tokens: usize,
    /// g: class-tag magnitude in class-token embeddings.
    pub tag_gain: f32,
    /// tau: tag-to-u transfer gain at the null block. Sets the cosine between
    /// estimated directions and `u`: cos = tau / sqrt(tau^2 + att^2).
    pub transfer_gain: f32,
    /// Scale of the per-filler embedding noise (orthogonal to u, w, r).
    pub noise_scale: f32,
    pub max_seq_len: usize,
    /// Class-token suffix length of estimation prompts.
    pub class_suffix_len: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            d_model: 8,
            n_layers: 4,
            null_block: 2,
            attenuation: 0.5,
            class_margin: 4.0,
            default_bias: 1.0,
            n_class_tokens: 2,
            n_filler_tokens: 8,
            tag_gain: 1.0,
            transfer_gain: 1.25,
            noise_scale: 0.05,
            max_seq_len: 64,
            class_suffix_len: 4,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<(), PlantedError> {
        let fail = |msg: String| Err(PlantedError::InvalidSpec(msg));
        if self.null_block == 0 || self.null_block > self.n_layers {
            return fail(format!(
                "null_block {} outside 1..={}",
                self.null_block, self.n_layers
            ));
        }
        if !(self.attenuation > 0.0 && self.attenuation < 1.0) {
            return fail(format!("attenuation {} outside (0, 1)", self.attenuation));
        }
        if self.class_margin <= 0.0 || self.default_bias <= 0.0 {
            return fail("class_margin and default_bias must be positive".into());
        }
        if self.d_model < 4 {
            return fail("d_model must be at least 4 (u, w, r plus noise)".into());
        }
        if self.n_class_tokens == 0 || self.n_filler_tokens < 2 {
            return fail("need at least 1 class token per side and 2 fillers".into());
        }
        if self.tag_gain <= 0.0 || self.transfer_gain <= 0.0 {
            return fail("tag_gain and transfer_gain must be positive".into());
        }
        if self.class_suffix_len == 0 {
            return fail("class_suffix_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        N_RESERVED + 2 * self.n_class_tokens + self.n_filler_tokens
    }

    fn class_a_id(&self, i: usize) -> u32 {
        (N_RESERVED + i) as u32
    }

    fn class_b_id(&self, i: usize) -> u32 {
        (N_RESERVED + self.n_class_tokens + i) as u32
    }

    fn filler_id(&self, j: usize) -> u32 {
        (N_RESERVED + 2 * self.n_class_tokens + j) as u32
    }

    /// Words of the target class, as the judge sees them.
    pub fn class_a_words(&self) -> Vec<String> {
        (0..self.n_class_tokens).map(|i| format!("a{i}")).collect()
    }

    pub fn class_b_words(&self) -> Vec<String> {
        (0..self.n_class_tokens).map(|i| format!("b{i}")).collect()
    }
}

/// Ground truth computed in closed form from the construction.
#[derive(Debug, Clone)]
pub struct PlantedTruth {
    /// The planted unit steering direction.
    pub u: Vec<f32>,
    /// Layer whose intervention is cheapest to flip: always `n_layers`.
    pub best_layer: usize,
    /// Minimal alpha flipping greedy output when injecting `u` at each
    /// layer; `f32::INFINITY` below the null block.
    pub alpha_threshold: BTreeMap<usize, f32>,
}

impl PlantedTruth {
    pub fn threshold(&self, layer: usize) -> f32 {
        self.alpha_threshold
            .get(&layer)
            .copied()
            .unwrap_or(f32::INFINITY)
    }
}

/// Draw a unit vector orthogonal to `against`, from the seeded stream.
fn random_orthonormal(rng: &mut SplitMix64, d: usize, against: &[&[f32]]) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..d).map(|_| rng.next_gaussian() as f32).collect();
        for base in against {
            let proj = dot(&v, base);
            axpy(&mut v, -proj, base);
        }
        let len = norm(&v);
        if len > 1e-3 {
            for x in &mut v {
                *x /= len;
            }
            return v;
        }
    }
}

/// Rank-structured block matrix from outer products of the planted
/// directions: `M = sum_i coeff_i * (left_i right_i^T)`.
fn outer_sum(d: usize, terms: &[(f32, &[f32], &[f32])]) -> Tensor {
    let mut data = vec![0.0f32; d * d];
    for &(coeff, left, right) in terms {
        for (row, &l) in left.iter().enumerate() {
            for (col, &r) in right.iter().enumerate() {
                data[row * d + col] += coeff * l * r;
            }
        }
    }
    Tensor::new(vec![d, d], data).expect("square matrix")
}

/// Build the planted model and its closed-form truth.
pub fn build_planted_model(
    spec: &PlantedSpec,
    seed: u64,
) -> Result<(Model, PlantedTruth), PlantedError> {
    spec.validate()?;
    let d = spec.d_model;
    let mut rng = SplitMix64::new(seed);

    let u = random_orthonormal(&mut rng, d, &[]);
    let w = random_orthonormal(&mut rng, d, &[&u]);
    let r = random_orthonormal(&mut rng, d, &[&u, &w]);

    // Vocabulary: reserved, class A, class B, fillers. Tokens carry a
    // trailing space so decoded text splits back into judgeable words.
    let mut tokens = vec![
        "<bos>".to_string(),
        "<eos>".to_string(),
        "<unk>".to_string(),
    ];
    for i in 0..spec.n_class_tokens {
        tokens.push(format!("a{i} "));
    }
    for i in 0..spec.n_class_tokens {
        tokens.push(format!("b{i} "));
    }
    for j in 0..spec.n_filler_tokens {
        tokens.push(format!("f{j} "));
    }
    let vocab = Vocabulary::new(tokens).map_err(ModelError::Vocab)?;
    let vocab_size = spec.vocab_size();

    // Embeddings: every token gets the constant bias direction r; class
    // tokens add the +-g tag along w; fillers add small orthogonal noise.
    let mut embedding = vec![0.0f32; vocab_size * d];
    for id in 0..vocab_size {
        let row = &mut embedding[id * d..(id + 1) * d];
        row.copy_from_slice(&r);
    }
    for i in 0..spec.n_class_tokens {
        let row = spec.class_a_id(i) as usize;
        axpy(&mut embedding[row * d..(row + 1) * d], spec.tag_gain, &w);
        let row = spec.class_b_id(i) as usize;
        axpy(&mut embedding[row * d..(row + 1) * d], -spec.tag_gain, &w);
    }
    for j in 0..spec.n_filler_tokens {
        let noise = random_orthonormal(&mut rng, d, &[&u, &w, &r]);
        let row = spec.filler_id(j) as usize;
        axpy(
            &mut embedding[row * d..(row + 1) * d],
            spec.noise_scale,
            &noise,
        );
    }
    let embedding = Tensor::new(vec![vocab_size, d], embedding).expect("embedding shape");

    // Blocks.
    let att = spec.attenuation;
    let tau = spec.transfer_gain;
    let p = spec.null_block;
    let mut blocks = Vec::with_capacity(spec.n_layers);
    for layer in 1..=spec.n_layers {
        let m = if layer < p {
            Tensor::zeros(vec![d, d])
        } else if layer == p {
            outer_sum(d, &[(-1.0, &u, &u), (tau, &u, &w), (-(1.0 - att), &w, &w)])
        } else {
            outer_sum(d, &[(-(1.0 - att), &u, &u), (-(1.0 - att), &w, &w)])
        };
        blocks.push(BlockWeights::Linear { m });
    }

    // Unembedding: class rows read +-c along u with the -+c*beta bias on r;
    // tie-break offsets keep argmax unique everywhere and order class B
    // above class A so exact threshold equality does not flip.
    let c = spec.class_margin;
    let beta = spec.default_bias;
    let mut unembedding = vec![0.0f32; vocab_size * d];
    let mut add_row = |id: usize, u_coeff: f32, r_coeff: f32| {
        let row = &mut unembedding[id * d..(id + 1) * d];
        for k in 0..d {
            row[k] = u_coeff * u[k] + r_coeff * r[k];
        }
    };
    for id in 0..N_RESERVED {
        add_row(id, 0.0, -10.0);
    }
    for i in 0..spec.n_class_tokens {
        let delta_a = 1e-3 * (1.0 + 0.5 / (i as f32 + 1.0));
        add_row(spec.class_a_id(i) as usize, c, -c * beta + delta_a);
        let delta_b = 1e-3 * (2.0 + 0.5 / (i as f32 + 1.0));
        add_row(spec.class_b_id(i) as usize, -c, c * beta + delta_b);
    }
    for j in 0..spec.n_filler_tokens {
        let delta_f = -1e-3 * (1.0 + 0.1 * j as f32);
        add_row(spec.filler_id(j) as usize, 0.0, delta_f);
    }
    let unembedding = Tensor::new(vec![vocab_size, d], unembedding).expect("unembedding shape");

    let config = ModelConfig {
        n_layers: spec.n_layers,
        d_model: d,
        n_heads: 1,
        d_ff: 1,
        vocab_size,
        max_seq_len: spec.max_seq_len,
        block_kinds: vec![BlockKind::Linear; spec.n_layers],
    };
    let model = Model::from_parts(
        config,
        embedding,
        unembedding,
        None,
        blocks,
        vocab,
        format!("planted-{seed}"),
    )?;

    // Thresholds for injecting the unit vector u itself: alpha * att^(N-l)
    // must exceed beta at layers >= p; the null block erases u below p.
    let mut alpha_threshold = BTreeMap::new();
    for layer in 1..=spec.n_layers {
        let t = if layer < p {
            f32::INFINITY
        } else {
            beta / att.powi((spec.n_layers - layer) as i32)
        };
        alpha_threshold.insert(layer, t);
    }

    let truth = PlantedTruth {
        u,
        best_layer: spec.n_layers,
        alpha_threshold,
    };
    Ok((model, truth))
}

/// Matched prompt sets: positives end in class-A tokens, negatives in
/// class-B tokens, neutrals are filler-only. Deterministic under the seed.
#[derive(Debug, Clone)]
pub struct PlantedPrompts {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub neutrals: Vec<String>,
}

pub fn make_planted_prompts(
    spec: &PlantedSpec,
    n_per_set: usize,
    seed: u64,
) -> Result<PlantedPrompts, PlantedError> {
    spec.validate()?;
    if n_per_set == 0 {
        return Err(PlantedError::InvalidSpec(
            "n_per_set must be at least 1".into(),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let filler_run = |rng: &mut SplitMix64, len: usize| -> String {
        (0..len)
            .map(|_| format!("f{} ", rng.below(spec.n_filler_tokens as u64)))
            .collect()
    };

    let mut positives = Vec::with_capacity(n_per_set);
    let mut negatives = Vec::with_capacity(n_per_set);
    let mut neutrals = Vec::with_capacity(n_per_set);
    for _ in 0..n_per_set {
        let prefix_len = 2 + rng.below(4) as usize;
        let prefix = filler_run(&mut rng, prefix_len);
        let suffix: String = (0..spec.class_suffix_len)
            .map(|_| format!("a{} ", rng.below(spec.n_class_tokens as u64)))
            .collect();
        positives.push(format!("{prefix}{suffix}"));

        let prefix_len = 2 + rng.below(4) as usize;
        let prefix = filler_run(&mut rng, prefix_len);
        let suffix: String = (0..spec.class_suffix_len)
            .map(|_| format!("b{} ", rng.below(spec.n_class_tokens as u64)))
            .collect();
        negatives.push(format!("{prefix}{suffix}"));

        let len = 4 + rng.below(5) as usize;
        neutrals.push(filler_run(&mut rng, len));
    }
    Ok(PlantedPrompts {
        positives,
        negatives,
        neutrals,
    })
}

/// The planted task as the rest of the pipeline sees it.
pub fn planted_task() -> TaskSpec {
    TaskSpec {
        name: "planted-class".into(),
        target_label: "class-a".into(),
        opposite_label: "class-b".into(),
    }
}

/// Judge rules for the planted task: token-class mode over the class words.
pub fn planted_rules_file(spec: &PlantedSpec) -> RulesFile {
    RulesFile {
        schema_version: RULES_SCHEMA_VERSION,
        task: planted_task().name,
        mode: RuleModeSpec::TokenClass {
            target_tokens: spec.class_a_words(),
            opposite_tokens: spec.class_b_words(),
            min_token_class_fraction: 0.5,
        },
    }
}

/// Everything `write_fixture` puts on disk.
#[derive(Debug)]
pub struct PlantedFixture {
    pub model_path: PathBuf,
    pub prompts_path: PathBuf,
    pub rules_path: PathBuf,
    pub task: TaskSpec,
    pub truth: PlantedTruth,
}

/// Emit a complete fixture: model + vocabulary containers, a three-condition
/// prompt corpus with validation/test splits assigned, and a rules file. The
/// whole pipeline runs on these files with no special casing.
pub fn write_fixture(
    dir: &Path,
    spec: &PlantedSpec,
    seed: u64,
    n_per_condition: usize,
    validation_fraction: f64,
) -> Result<PlantedFixture, PlantedError> {
    let (model, truth) = build_planted_model(spec, seed)?;
    let prompts = make_planted_prompts(spec, n_per_condition, seed.wrapping_add(1))?;
    let task = planted_task();

    let model_path = dir.join("planted.model");
    model.save(&model_path)?;

    let mut records = Vec::new();
    let mut push_records = |texts: &[String], condition: Condition, tag: &str| {
        for (i, text) in texts.iter().enumerate() {
            records.push(PromptRecord {
                id: format!("{tag}-{i:03}"),
                task: task.name.clone(),
                condition,
                text: text.clone(),
                split: None,
            });
        }
    };
    push_records(&prompts.positives, Condition::Target, "target");
    push_records(&prompts.negatives, Condition::Opposite, "opposite");
    push_records(&prompts.neutrals, Condition::Neutral, "neutral");

    let records = corpus::dedup(records);
    let outcome = corpus::split(records, seed, validation_fraction)?;
    let prompts_path = dir.join("planted.prompts.jsonl");
    corpus::save_prompts(&outcome.records, &prompts_path)?;

    let rules_path = dir.join("planted.rules.json");
    let rules_json =
        serde_json::to_string_pretty(&planted_rules_file(spec)).expect("rules serialize");
    std::fs::write(&rules_path, rules_json).map_err(|source| {
        PlantedError::Corpus(CorpusError::Io {
            path: rules_path.display().to_string(),
            source,
        })
    })?;

    Ok(PlantedFixture {
        model_path,
        prompts_path,
        rules_path,
        task,
        truth,
    })
}
