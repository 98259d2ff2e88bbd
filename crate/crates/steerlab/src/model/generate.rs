//! Autoregressive decoding over the shared incremental forward path.

use crate::rng::SplitMix64;

use super::forward::KvCache;
use super::{
    DecodeStrategy, GenerationParams, GenerationRecord, InterventionSpec, Model, ModelError,
};

impl Model {
    /// Decode up to `max_new_tokens` continuations of `prompt_ids`.
    ///
    /// The intervention (if any) is applied during prefill and, under the
    /// default `All` scope, at every newly generated position of every decode
    /// step. Greedy decoding is deterministic; temperature decoding is
    /// reproducible from `params.seed`. A stop id ends generation without
    /// being appended to the output.
    pub fn generate(
        &self,
        prompt_ids: &[u32],
        params: &GenerationParams,
        intervention: Option<&InterventionSpec>,
    ) -> Result<GenerationRecord, ModelError> {
        params.validate()?;
        if prompt_ids.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if prompt_ids.len() + params.max_new_tokens > self.config.max_seq_len {
            return Err(ModelError::ContextOverflow {
                prompt: prompt_ids.len(),
                max_new: params.max_new_tokens,
                max: self.config.max_seq_len,
            });
        }
        if let Some(iv) = intervention {
            iv.validate(&self.config)?;
        }

        let mut rng = SplitMix64::new(params.seed);
        let mut cache = KvCache::new(self);
        let prompt_len = prompt_ids.len();
        let mut capture_buf = Vec::new();

        let prefill = self.process(
            &mut cache,
            prompt_ids,
            intervention,
            prompt_len,
            &mut capture_buf,
        )?;
        let vocab_size = self.config.vocab_size;
        let mut last_logits = prefill[(prompt_len - 1) * vocab_size..].to_vec();

        let mut output_ids = Vec::new();
        while output_ids.len() < params.max_new_tokens {
            let next = select_next(&last_logits, params.strategy, &mut rng);
            if params
                .stop_ids
                .as_ref()
                .is_some_and(|stops| stops.contains(&next))
            {
                break;
            }
            output_ids.push(next);
            if output_ids.len() == params.max_new_tokens {
                break;
            }
            last_logits = self.process(
                &mut cache,
                &[next],
                intervention,
                prompt_len,
                &mut capture_buf,
            )?;
        }

        Ok(GenerationRecord {
            prompt_ids: prompt_ids.to_vec(),
            output_ids: output_ids.clone(),
            output_text: self.detokenize(&output_ids),
            intervention: intervention.cloned(),
            params: params.clone(),
        })
    }
}

/// Pick the next token id. Greedy takes the argmax with ties broken toward
/// the lowest id. Temperature sampling walks the softmax CDF in f64 against
/// one SplitMix64 draw.
fn select_next(logits: &[f32], strategy: DecodeStrategy, rng: &mut SplitMix64) -> u32 {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut best = 0usize;
            let mut best_val = f32::NEG_INFINITY;
            for (i, &v) in logits.iter().enumerate() {
                if v > best_val {
                    best = i;
                    best_val = v;
                }
            }
            best as u32
        }
        DecodeStrategy::Temperature { temperature } => {
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let weights: Vec<f64> = logits
                .iter()
                .map(|&v| (f64::from(v - max) / f64::from(temperature)).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.next_f64() * total;
            for (i, w) in weights.iter().enumerate() {
                r -= w;
                if r <= 0.0 {
                    return i as u32;
                }
            }
            (logits.len() - 1) as u32
        }
    }
}
