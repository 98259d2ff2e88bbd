//! Forward pass: embedding, blocks, hooks, final norm, unembedding.
//!
//! Positions are processed one at a time through all blocks, appending to a
//! per-layer KV cache. Prefill and decode therefore share exactly one code
//! path, and an intervention behaves identically whether the position came
//! from the prompt or from decoding.

use std::collections::BTreeSet;

use crate::tensor::{axpy, dot, matvec, Tensor};

use super::{BlockWeights, Captures, InterventionSpec, Model, ModelError, PositionScope};

const RMS_EPS: f32 = 1e-6;
const ROPE_BASE: f32 = 10_000.0;

/// Logits for every processed position plus any requested residual captures.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(seq, vocab_size)`
    pub logits: Tensor,
    /// Post-block residual states, `(seq, d_model)` per requested layer,
    /// taken after any intervention at the same layer.
    pub captures: Captures,
}

/// Per-generation KV cache. Only full blocks hold state.
pub(super) struct KvCache {
    layers: Vec<Option<LayerKv>>,
    len: usize,
}

struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl KvCache {
    pub(super) fn new(model: &Model) -> Self {
        let layers = model
            .blocks
            .iter()
            .map(|b| match b {
                BlockWeights::Full { .. } => Some(LayerKv {
                    k: Vec::new(),
                    v: Vec::new(),
                }),
                BlockWeights::Linear { .. } => None,
            })
            .collect();
        Self { layers, len: 0 }
    }
}

fn rms_norm(x: &[f32], gain: &Tensor) -> Vec<f32> {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + RMS_EPS).sqrt();
    x.iter()
        .zip(gain.data())
        .map(|(v, g)| v * inv * g)
        .collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotary positions, half-split pairing `(i, i + head_dim/2)` within each head.
fn apply_rope(x: &mut [f32], pos: usize, n_heads: usize) {
    let head_dim = x.len() / n_heads;
    let half = head_dim / 2;
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f32 / head_dim as f32);
            let theta = pos as f32 * freq;
            let (sin, cos) = theta.sin_cos();
            let a = x[base + i];
            let b = x[base + i + half];
            x[base + i] = a * cos - b * sin;
            x[base + i + half] = a * sin + b * cos;
        }
    }
}

fn softmax_inplace(scores: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl Model {
    /// Causal forward pass over `ids`, optionally applying an intervention
    /// and capturing post-block residual streams for `capture_layers`.
    pub fn forward(
        &self,
        ids: &[u32],
        intervention: Option<&InterventionSpec>,
        capture_layers: Option<&BTreeSet<usize>>,
    ) -> Result<ForwardOutput, ModelError> {
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(iv) = intervention {
            iv.validate(&self.config)?;
        }
        if let Some(layers) = capture_layers {
            for &layer in layers {
                if layer == 0 || layer > self.config.n_layers {
                    return Err(ModelError::Config(format!(
                        "capture layer {layer} outside 1..={}",
                        self.config.n_layers
                    )));
                }
            }
        }

        let mut cache = KvCache::new(self);
        let mut capture_buf: Vec<(usize, Vec<f32>)> = capture_layers
            .map(|set| set.iter().map(|&l| (l, Vec::new())).collect())
            .unwrap_or_default();
        let logits = self.process(&mut cache, ids, intervention, ids.len(), &mut capture_buf)?;

        let mut captures = Captures::new();
        for (layer, rows) in capture_buf {
            captures.insert(
                layer,
                Tensor::new(vec![ids.len(), self.config.d_model], rows)
                    .expect("capture rows match seq length"),
            );
        }
        Ok(ForwardOutput {
            logits: Tensor::new(vec![ids.len(), self.config.vocab_size], logits)
                .expect("logit rows match seq length"),
            captures,
        })
    }

    /// Residual states of a prompt with no intervention; equals the
    /// `captures` field of [`Model::forward`] with `intervention = None`.
    pub fn capture_prompt_activations(
        &self,
        ids: &[u32],
        layers: &BTreeSet<usize>,
    ) -> Result<Captures, ModelError> {
        Ok(self.forward(ids, None, Some(layers))?.captures)
    }

    /// Run `ids` through the model starting at the cache's current position.
    /// Returns logits for the processed positions, row-major.
    ///
    /// `prompt_len` is the absolute length of the prompt; a `PromptOnly`
    /// intervention stops editing at that boundary while `All` also edits
    /// positions appended during decoding.
    pub(super) fn process(
        &self,
        cache: &mut KvCache,
        ids: &[u32],
        intervention: Option<&InterventionSpec>,
        prompt_len: usize,
        capture_buf: &mut [(usize, Vec<f32>)],
    ) -> Result<Vec<f32>, ModelError> {
        let d = self.config.d_model;
        let mut logits = Vec::with_capacity(ids.len() * self.config.vocab_size);

        for &id in ids {
            let pos = cache.len;
            if pos >= self.config.max_seq_len {
                return Err(ModelError::SequenceTooLong {
                    len: pos + 1,
                    max: self.config.max_seq_len,
                });
            }
            if (id as usize) >= self.config.vocab_size {
                return Err(ModelError::Config(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.config.vocab_size
                )));
            }

            let mut h = self.embedding.row(id as usize).to_vec();
            for (i, block) in self.blocks.iter().enumerate() {
                let layer = i + 1;
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
                        let kv = cache.layers[i].as_mut().expect("full block has kv slot");
                        let normed = rms_norm(&h, attn_norm);
                        let mut q = vec![0.0f32; d];
                        let mut k = vec![0.0f32; d];
                        let mut v = vec![0.0f32; d];
                        matvec(wq, &normed, &mut q);
                        matvec(wk, &normed, &mut k);
                        matvec(wv, &normed, &mut v);
                        apply_rope(&mut q, pos, self.config.n_heads);
                        apply_rope(&mut k, pos, self.config.n_heads);
                        kv.k.extend_from_slice(&k);
                        kv.v.extend_from_slice(&v);

                        let n_heads = self.config.n_heads;
                        let head_dim = d / n_heads;
                        let scale = 1.0 / (head_dim as f32).sqrt();
                        let n_pos = pos + 1;
                        let mut attn_out = vec![0.0f32; d];
                        let mut scores = vec![0.0f32; n_pos];
                        for head in 0..n_heads {
                            let span = head * head_dim..(head + 1) * head_dim;
                            let qh = &q[span.clone()];
                            for (t, s) in scores.iter_mut().enumerate() {
                                let kt = &kv.k[t * d..][span.clone()];
                                *s = dot(qh, kt) * scale;
                            }
                            softmax_inplace(&mut scores);
                            let out_h = &mut attn_out[span.clone()];
                            for (t, &p) in scores.iter().enumerate() {
                                let vt = &kv.v[t * d..][span.clone()];
                                axpy(out_h, p, vt);
                            }
                        }
                        let mut proj = vec![0.0f32; d];
                        matvec(wo, &attn_out, &mut proj);
                        axpy(&mut h, 1.0, &proj);

                        let normed = rms_norm(&h, mlp_norm);
                        let mut up = vec![0.0f32; self.config.d_ff];
                        matvec(w_up, &normed, &mut up);
                        for u in up.iter_mut() {
                            *u = silu(*u);
                        }
                        let mut down = vec![0.0f32; d];
                        matvec(w_down, &up, &mut down);
                        axpy(&mut h, 1.0, &down);
                    }
                    BlockWeights::Linear { m } => {
                        let mut update = vec![0.0f32; d];
                        matvec(m, &h, &mut update);
                        axpy(&mut h, 1.0, &update);
                    }
                }

                if let Some(iv) = intervention {
                    let in_scope = match iv.positions {
                        PositionScope::All => true,
                        PositionScope::PromptOnly => pos < prompt_len,
                    };
                    // alpha == 0 must be a bit-exact no-op, so skip the axpy.
                    if iv.layer == layer && in_scope && iv.alpha != 0.0 {
                        axpy(&mut h, iv.alpha, &iv.vector);
                    }
                }
                for (capture_layer, rows) in capture_buf.iter_mut() {
                    if *capture_layer == layer {
                        rows.extend_from_slice(&h);
                    }
                }
            }

            let readout = match &self.final_norm {
                Some(gain) => rms_norm(&h, gain),
                None => h,
            };
            let mut row = vec![0.0f32; self.config.vocab_size];
            matvec(&self.unembedding, &readout, &mut row);
            logits.extend_from_slice(&row);

            cache.len += 1;
        }
        Ok(logits)
    }
}
