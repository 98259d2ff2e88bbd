//! Cross-module runtime invariants: injection additivity on the linear
//! fixture, zero-alpha neutrality, and reproducibility.

use steerlab::model::{
    random_full_model, BlockKind, BlockWeights, DecodeStrategy, GenerationParams, InterventionSpec,
    Model, ModelConfig,
};
use steerlab::planted::{build_planted_model, PlantedSpec};
use steerlab::rng::SplitMix64;
use steerlab::tensor::dot;

/// Propagate `alpha * v` from the output of `layer` through the remaining
/// linear blocks: `alpha * (prod_{k>layer} (I + M_k)) v`.
#[allow(clippy::needless_range_loop)]
fn propagate_injection(model: &Model, layer: usize, alpha: f32, v: &[f32]) -> Vec<f32> {
    let d = model.config().d_model;
    let mut h: Vec<f32> = v.iter().map(|x| alpha * x).collect();
    for k in layer + 1..=model.config().n_layers {
        let m = match model.block(k - 1) {
            BlockWeights::Linear { m } => m,
            BlockWeights::Full { .. } => panic!("linear fixture expected"),
        };
        let mut update = vec![0.0f32; d];
        for row in 0..d {
            let mut acc = 0.0f32;
            for col in 0..d {
                acc += m.data()[row * d + col] * h[col];
            }
            update[row] = acc;
        }
        for (hv, uv) in h.iter_mut().zip(&update) {
            *hv += uv;
        }
    }
    h
}

#[test]
fn injection_is_additive_through_the_unembedding() {
    let spec = PlantedSpec::default();
    let (model, _) = build_planted_model(&spec, 99).unwrap();
    let ids = model.tokenize("f0 f5 a1 b0 f2 ");
    let mut rng = SplitMix64::new(5);

    let plain = model.forward(&ids, None, None).unwrap().logits;
    for layer in 1..=spec.n_layers {
        let v: Vec<f32> = (0..spec.d_model)
            .map(|_| rng.next_gaussian() as f32)
            .collect();
        let alpha = 0.5 + rng.next_f64() as f32 * 2.0;

        let iv = InterventionSpec::new(layer, alpha, v.clone());
        let steered = model.forward(&ids, Some(&iv), None).unwrap().logits;

        let extra = propagate_injection(&model, layer, alpha, &v);
        for t in 0..ids.len() {
            for tok in 0..model.config().vocab_size {
                let expected = plain.row(t)[tok] + dot(model.unembedding().row(tok), &extra);
                let got = steered.row(t)[tok];
                assert!(
                    (expected - got).abs() < 1e-5,
                    "layer {layer} pos {t} tok {tok}: expected {expected}, got {got}"
                );
            }
        }
    }
}

#[test]
fn zero_alpha_generation_matches_unsteered() {
    let config = ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_seq_len: 40,
        block_kinds: vec![BlockKind::Full; 3],
    };
    let model = random_full_model(&config, 31).unwrap();
    let params = GenerationParams::greedy(10);
    let vector: Vec<f32> = (0..8).map(|i| (i as f32).sin()).collect();

    let plain = model.generate(&[3, 4, 5], &params, None).unwrap();
    for layer in 1..=3 {
        let zero = InterventionSpec::new(layer, 0.0, vector.clone());
        let steered = model.generate(&[3, 4, 5], &params, Some(&zero)).unwrap();
        assert_eq!(plain.output_ids, steered.output_ids, "layer {layer}");
        assert_eq!(plain.output_text, steered.output_text);
    }
}

#[test]
fn temperature_decoding_reproduces_exactly_per_seed() {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 10,
        max_seq_len: 64,
        block_kinds: vec![BlockKind::Full; 2],
    };
    let model = random_full_model(&config, 8).unwrap();
    let mut params = GenerationParams::greedy(24);
    params.strategy = DecodeStrategy::Temperature { temperature: 0.9 };
    for seed in [1u64, 2, 3] {
        params.seed = seed;
        let a = model.generate(&[3, 4], &params, None).unwrap();
        let b = model.generate(&[3, 4], &params, None).unwrap();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn prompt_only_scope_stops_steering_new_tokens() {
    // On the planted fixture a strong intervention flips generation when it
    // covers new positions; restricted to the prompt, only the first decode
    // step sees the edit at the last prompt position, and the fed-back class
    // tokens keep it flipped. Distinguish the scopes on a model where the
    // injected direction decays: use alpha just above threshold so prompt
    // -only steering flips the first token, then check both scopes at least
    // produce the documented difference in intervention metadata.
    let spec = PlantedSpec::default();
    let (model, truth) = build_planted_model(&spec, 7).unwrap();
    let ids = model.tokenize("f0 f1 f2 f3 ");
    let params = GenerationParams::greedy(6);

    let mut all = InterventionSpec::new(
        spec.n_layers,
        2.0 * truth.threshold(spec.n_layers),
        truth.u.clone(),
    );
    let steered_all = model.generate(&ids, &params, Some(&all)).unwrap();
    assert!(steered_all.output_ids.iter().all(|&id| model
        .vocab()
        .token(id)
        .unwrap()
        .starts_with('a')));

    all.positions = steerlab::model::PositionScope::PromptOnly;
    let steered_prompt = model.generate(&ids, &params, Some(&all)).unwrap();
    // First token comes from a steered prompt state and flips; the fed-back
    // class-A token keeps its own (weaker) pull, which is below the flip
    // boundary, so decoding falls back to class B afterwards.
    assert!(model
        .vocab()
        .token(steered_prompt.output_ids[0])
        .unwrap()
        .starts_with('a'));
    assert!(steered_prompt.output_ids[1..].iter().all(|&id| model
        .vocab()
        .token(id)
        .unwrap()
        .starts_with('b')));
}
