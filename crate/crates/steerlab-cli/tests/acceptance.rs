//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers (run with `--nocapture` to see them). Steering
//! criteria run on the planted fixture, whose flip thresholds are known in
//! closed form; the estimated-direction thresholds divide by cos(v, u) as
//! the estimation correction.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use steerlab::corpus::{self, Condition, PromptRecord, SplitSide, TaskSpec};
use steerlab::directions::{estimate_directions, EstimatorConfig};
use steerlab::judge::{
    aggregate, judge_local, repetition_score, Judge, JudgeRules, Label, RuleJudge, Verdict,
};
use steerlab::model::{
    random_full_model, BlockKind, BlockWeights, GenerationParams, InterventionSpec, Model,
    ModelConfig,
};
use steerlab::planted::{
    build_planted_model, make_planted_prompts, planted_rules_file, planted_task, write_fixture,
    PlantedSpec, PlantedTruth,
};
use steerlab::rng::SplitMix64;
use steerlab::selection::alpha_sweep;
use steerlab::tensor::{cosine, dot};

const SEED: u64 = 20240817;

fn steerlab_bin() -> &'static str {
    env!("CARGO_BIN_EXE_steerlab")
}

fn assert_within(start: Instant, limit: Duration, criterion: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed < limit,
        "{criterion} exceeded its runtime budget: {elapsed:?} >= {limit:?}"
    );
}

struct PlantedSetup {
    model: Model,
    truth: PlantedTruth,
    spec: PlantedSpec,
    judge: RuleJudge,
    neutrals: Vec<String>,
    negatives: Vec<String>,
    /// Bank of unit-normalized estimated directions (10/10 prompts, K = 4).
    bank: steerlab::directions::DirectionBank,
    /// cos(v_hat(n_layers), u): the estimation correction factor.
    cos_final: f32,
}

fn planted_setup() -> PlantedSetup {
    let spec = PlantedSpec::default();
    let (model, truth) = build_planted_model(&spec, SEED).unwrap();
    let prompts = make_planted_prompts(&spec, 20, SEED + 1).unwrap();
    let estimation = make_planted_prompts(&spec, 10, SEED + 2).unwrap();
    let bank = estimate_directions(
        &model,
        &planted_task(),
        &estimation.positives,
        &estimation.negatives,
        &EstimatorConfig {
            k_last_tokens: 4,
            normalize: true,
            ..Default::default()
        },
    )
    .unwrap();
    let cos_final = cosine(bank.vector(spec.n_layers).unwrap(), &truth.u);
    let judge = RuleJudge::new(JudgeRules::from_spec(planted_rules_file(&spec)).unwrap());
    PlantedSetup {
        model,
        truth,
        spec,
        judge,
        neutrals: prompts.neutrals,
        negatives: prompts.negatives,
        bank,
        cos_final,
    }
}

fn target_fraction(
    setup: &PlantedSetup,
    prompts: &[String],
    intervention: Option<&InterventionSpec>,
) -> f64 {
    let params = GenerationParams::greedy(16);
    let verdicts: Vec<Verdict> = prompts
        .iter()
        .map(|p| {
            let ids = setup.model.tokenize(p);
            let record = setup.model.generate(&ids, &params, intervention).unwrap();
            setup.judge.judge(&record).unwrap()
        })
        .collect();
    aggregate(&verdicts).target_frac
}

#[test]
fn criterion_1_zero_alpha_neutrality() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(41);
    for trial in 0..20u64 {
        let d_model = [8usize, 12, 16][rng.below(3) as usize];
        let config = ModelConfig {
            n_layers: 1 + rng.below(4) as usize,
            d_model,
            n_heads: 2,
            d_ff: d_model * 2,
            vocab_size: 12,
            max_seq_len: 32,
            block_kinds: (0..4).map(|_| BlockKind::Full).take(4).collect::<Vec<_>>(),
        };
        let config = ModelConfig {
            block_kinds: vec![BlockKind::Full; config.n_layers],
            ..config
        };
        let model = random_full_model(&config, 7000 + trial).unwrap();
        for _ in 0..20 {
            let len = 1 + rng.below(8) as usize;
            let ids: Vec<u32> = (0..len).map(|_| 3 + rng.below(9) as u32).collect();
            let layer = 1 + rng.below(config.n_layers as u64) as usize;
            let vector: Vec<f32> = (0..d_model).map(|_| rng.next_gaussian() as f32).collect();
            let plain = model.forward(&ids, None, None).unwrap().logits;
            let zero = InterventionSpec::new(layer, 0.0, vector);
            let steered = model.forward(&ids, Some(&zero), None).unwrap().logits;
            assert!(
                plain.bit_eq(&steered),
                "trial {trial}: zero-alpha logits differ bitwise"
            );
        }
    }
    assert_within(start, Duration::from_secs(30), "criterion 1");
    println!(
        "PASS criterion 1: zero-alpha bit-identical logits on 20 models x 20 prompts ({:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_2_estimator_oracle_equivalence() {
    let start = Instant::now();
    let task = TaskSpec {
        name: "oracle".into(),
        target_label: "plus".into(),
        opposite_label: "minus".into(),
    };
    let mut rng = SplitMix64::new(99);
    for trial in 0..50u64 {
        let d_model = [4usize, 8, 16][rng.below(3) as usize];
        let n_layers = 1 + rng.below(8) as usize;
        let vocab_size = 8 + rng.below(6) as usize;
        let config = ModelConfig {
            n_layers,
            d_model,
            n_heads: 2,
            d_ff: d_model * 2,
            vocab_size,
            max_seq_len: 32,
            block_kinds: (0..n_layers)
                .map(|_| {
                    if rng.below(2) == 0 {
                        BlockKind::Full
                    } else {
                        BlockKind::Linear
                    }
                })
                .collect(),
        };
        let model = random_full_model(&config, 5000 + trial).unwrap();
        let make_prompts = |n: usize, rng: &mut SplitMix64| -> Vec<String> {
            (0..n)
                .map(|_| {
                    let len = 1 + rng.below(5) as usize;
                    (0..len)
                        .map(|_| format!("t{} ", 3 + rng.below((vocab_size - 3) as u64)))
                        .collect()
                })
                .collect()
        };
        let n_pos = 1 + rng.below(8) as usize; // both sets <= 16 total
        let n_neg = 1 + rng.below(8) as usize;
        let positives = make_prompts(n_pos, &mut rng);
        let negatives = make_prompts(n_neg, &mut rng);
        let k = 1 + rng.below(5) as usize;

        let bank = estimate_directions(
            &model,
            &task,
            &positives,
            &negatives,
            &EstimatorConfig {
                k_last_tokens: k,
                ..Default::default()
            },
        )
        .unwrap();

        // Independent naive recomputation: one prompt and one layer at a
        // time, f32 sums in prompt order.
        for layer in 1..=n_layers {
            let mean = |prompts: &[String]| -> Vec<f32> {
                let mut acc = vec![0.0f32; d_model];
                for p in prompts {
                    let rep =
                        steerlab::directions::prompt_representation(&model, p, layer, k).unwrap();
                    for (a, v) in acc.iter_mut().zip(&rep) {
                        *a += v;
                    }
                }
                for a in &mut acc {
                    *a /= prompts.len() as f32;
                }
                acc
            };
            let plus = mean(&positives);
            let minus = mean(&negatives);
            let got = bank.vector(layer).unwrap();
            for i in 0..d_model {
                let expected = plus[i] - minus[i];
                let tolerance = 1e-6 * expected.abs().max(got[i].abs()).max(1.0);
                assert!(
                    (expected - got[i]).abs() <= tolerance,
                    "trial {trial} layer {layer} component {i}: {expected} vs {}",
                    got[i]
                );
            }
        }
    }
    assert_within(start, Duration::from_secs(60), "criterion 2");
    println!(
        "PASS criterion 2: 50 randomized estimator instances match the naive oracle within 1e-6 ({:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_3_closed_form_runtime_agreement() {
    let start = Instant::now();
    let setup = planted_setup();
    let model = &setup.model;
    let config = model.config();
    let mut rng = SplitMix64::new(123);

    // Independent matrix-product oracle over the stored block matrices.
    #[allow(clippy::needless_range_loop)]
    let oracle = |ids: &[u32]| -> Vec<Vec<f32>> {
        ids.iter()
            .map(|&id| {
                let mut h = model.embedding().row(id as usize).to_vec();
                for layer in 1..=config.n_layers {
                    let m = match model.block(layer - 1) {
                        BlockWeights::Linear { m } => m,
                        BlockWeights::Full { .. } => unreachable!(),
                    };
                    let d = config.d_model;
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
                (0..config.vocab_size)
                    .map(|tok| dot(model.unembedding().row(tok), &h))
                    .collect()
            })
            .collect()
    };

    for trial in 0..100 {
        let len = 1 + rng.below(10) as usize;
        let ids: Vec<u32> = (0..len)
            .map(|_| 3 + rng.below((config.vocab_size - 3) as u64) as u32)
            .collect();
        let expected = oracle(&ids);
        let got = model.forward(&ids, None, None).unwrap().logits;
        for (t, row) in expected.iter().enumerate() {
            for (tok, e) in row.iter().enumerate() {
                let g = got.row(t)[tok];
                assert!(
                    (e - g).abs() < 1e-5,
                    "trial {trial} pos {t} tok {tok}: oracle {e}, runtime {g}"
                );
            }
        }
    }
    assert_within(start, Duration::from_secs(30), "criterion 3");
    println!(
        "PASS criterion 3: planted logits match the matrix-product oracle within 1e-5 on 100 prompts ({:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_4_steering_flip() {
    let start = Instant::now();
    let setup = planted_setup();
    let n_layers = setup.spec.n_layers;

    // Predicted threshold for the estimated unit vector at the last layer.
    let predicted = setup.truth.threshold(n_layers) / setup.cos_final;
    let alpha = 2.0 * predicted;

    let vector = setup.bank.vector(n_layers).unwrap().to_vec();
    let intervention = InterventionSpec::new(n_layers, alpha, vector);
    let steered = target_fraction(&setup, &setup.neutrals, Some(&intervention));
    assert!(
        steered >= 0.95,
        "steering at (l = {n_layers}, alpha = {alpha}) reached only {steered}"
    );

    for layer in 1..setup.spec.null_block {
        let vector = setup.bank.vector(layer).unwrap().to_vec();
        let intervention = InterventionSpec::new(layer, alpha, vector);
        let below = target_fraction(&setup, &setup.neutrals, Some(&intervention));
        assert_eq!(
            below, 0.0,
            "layer {layer} below the null block flipped at alpha {alpha}"
        );
    }
    assert_within(start, Duration::from_secs(60), "criterion 4");
    println!(
        "PASS criterion 4: steering flip {steered:.2} at l = {n_layers}, 0.00 below the null block (alpha = {alpha:.3}, {:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_5_layer_recovery() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = PlantedSpec::default();
    let fixture = write_fixture(dir.path(), &spec, SEED, 20, 0.5).unwrap();
    let out = dir.path().join("out");

    let status = Command::new(steerlab_bin())
        .args(["estimate", "--model"])
        .arg(&fixture.model_path)
        .arg("--prompts")
        .arg(&fixture.prompts_path)
        .args([
            "--task",
            "planted-class",
            "--target-label",
            "class-a",
            "--opposite-label",
            "class-b",
            "--normalize",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "estimate failed");

    let alpha = 2.0 * fixture.truth.threshold(spec.n_layers);
    let status = Command::new(steerlab_bin())
        .args(["sweep-layer", "--model"])
        .arg(&fixture.model_path)
        .arg("--bank")
        .arg(out.join("bank/planted-class.bank"))
        .arg("--prompts")
        .arg(&fixture.prompts_path)
        .arg("--rules")
        .arg(&fixture.rules_path)
        .args(["--alpha", &alpha.to_string()])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "sweep-layer failed");

    let raw = std::fs::read_to_string(out.join("sweeps/layer_sweep.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&raw).unwrap();
    let best = report["result"]["best_layer"].as_u64().unwrap() as usize;
    assert_eq!(
        best, spec.n_layers,
        "cmd_sweep selected layer {best}, planted truth is {}",
        spec.n_layers
    );
    for layer in 1..spec.n_layers {
        let count = report["result"]["per_layer"][layer.to_string()]
            .as_u64()
            .unwrap();
        assert_eq!(count, 0, "layer {layer} should not flip at alpha {alpha}");
    }
    assert_within(start, Duration::from_secs(120), "criterion 5");
    println!(
        "PASS criterion 5: cmd_sweep recovered l* = {best} at alpha = {alpha} ({:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_6_alpha_monotonicity_and_threshold_step() {
    let start = Instant::now();
    let setup = planted_setup();
    let n_layers = setup.spec.n_layers;
    let predicted = setup.truth.threshold(n_layers) / setup.cos_final;

    let multipliers = [0.25f32, 0.5, 1.0, 1.5, 2.0, 3.0, 4.5];
    let grid: Vec<f32> = multipliers.iter().map(|m| m * predicted).collect();
    let vector = setup.bank.vector(n_layers).unwrap().to_vec();
    let outcome = alpha_sweep(
        &setup.model,
        &vector,
        n_layers,
        &setup.neutrals,
        &grid,
        &GenerationParams::greedy(16),
        &setup.judge,
        1.0, // no degeneracy cap here; this criterion is about the step
        1,
    )
    .unwrap();

    let n = outcome.result.n_prompts as f64;
    let fractions: Vec<f64> = outcome
        .result
        .per_alpha
        .iter()
        .map(|c| c.target_count as f64 / n)
        .collect();
    for pair in fractions.windows(2) {
        assert!(
            pair[1] >= pair[0],
            "target fraction decreased along the grid: {fractions:?}"
        );
    }

    // First grid point strictly above the predicted threshold.
    let expected_step = multipliers.iter().position(|&m| m > 1.0).unwrap();
    let actual_step = fractions
        .iter()
        .position(|&f| f == 1.0)
        .expect("no grid point fully steered");
    assert!(fractions[..actual_step].iter().all(|&f| f == 0.0));
    assert!(fractions[actual_step..].iter().all(|&f| f == 1.0));
    assert!(
        actual_step.abs_diff(expected_step) <= 1,
        "step at grid index {actual_step}, predicted {expected_step} +- 1: {fractions:?}"
    );
    assert_within(start, Duration::from_secs(120), "criterion 6");
    println!(
        "PASS criterion 6: target fraction non-decreasing, 0 -> 1 step at grid index {actual_step} (predicted {expected_step}, {:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_7_conflict_override() {
    let start = Instant::now();
    let setup = planted_setup();
    let spec = &setup.spec;
    let n_layers = spec.n_layers;

    let baseline = target_fraction(&setup, &setup.negatives, None);

    // Oracle strength: overcome the readout bias beta plus the opposite
    // suffix pull g * tau * att^(N-p), corrected by cos(v, u); doubled.
    let suffix_pull = spec.tag_gain
        * spec.transfer_gain
        * spec.attenuation.powi((n_layers - spec.null_block) as i32);
    let alpha = 2.0 * (spec.default_bias + suffix_pull) / setup.cos_final;

    let vector = setup.bank.vector(n_layers).unwrap().to_vec();
    let intervention = InterventionSpec::new(n_layers, alpha, vector);
    let steered = target_fraction(&setup, &setup.negatives, Some(&intervention));
    assert!(
        steered > baseline,
        "conflict steering did not beat the baseline: {steered} <= {baseline}"
    );
    assert_within(start, Duration::from_secs(120), "criterion 7");
    println!(
        "PASS criterion 7: conflict override {steered:.2} vs baseline {baseline:.2} at alpha = {alpha:.3} ({:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_8_protocol_fidelity() {
    let start = Instant::now();

    // 50/50 stratified partitioning, deterministic.
    let make = |n: usize| -> Vec<PromptRecord> {
        (0..n)
            .map(|i| PromptRecord {
                id: format!("p{i}"),
                task: "python-vs-cpp".into(),
                condition: Condition::Neutral,
                text: format!("prompt number {i}"),
                split: None,
            })
            .collect()
    };
    for (n, expected) in [(100usize, 50usize), (162, 81)] {
        let a = corpus::split(make(n), 7, 0.5).unwrap().records;
        let b = corpus::split(make(n), 7, 0.5).unwrap().records;
        assert_eq!(a, b, "split of {n} is not deterministic");
        let validation = a
            .iter()
            .filter(|r| r.split == Some(SplitSide::Validation))
            .count();
        assert_eq!(validation, expected, "{n} -> {expected}/{}", n - expected);
    }

    // Sweeps refuse corpora whose neutral prompts are all test-split.
    let dir = tempfile::tempdir().unwrap();
    let spec = PlantedSpec::default();
    let fixture = write_fixture(dir.path(), &spec, SEED, 10, 0.5).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(steerlab_bin())
        .args(["estimate", "--model"])
        .arg(&fixture.model_path)
        .arg("--prompts")
        .arg(&fixture.prompts_path)
        .args([
            "--task",
            "planted-class",
            "--target-label",
            "class-a",
            "--opposite-label",
            "class-b",
            "--normalize",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let records = corpus::load_prompts(&fixture.prompts_path).unwrap();
    let test_only: Vec<PromptRecord> = records
        .into_iter()
        .map(|mut r| {
            r.split = Some(SplitSide::Test);
            r
        })
        .collect();
    let test_only_path = dir.path().join("test_only.jsonl");
    corpus::save_prompts(&test_only, &test_only_path).unwrap();

    let output = Command::new(steerlab_bin())
        .args(["sweep-layer", "--model"])
        .arg(&fixture.model_path)
        .arg("--bank")
        .arg(out.join("bank/planted-class.bank"))
        .arg("--prompts")
        .arg(&test_only_path)
        .arg("--rules")
        .arg(&fixture.rules_path)
        .args(["--alpha", "2.0"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        !output.status.success(),
        "sweep accepted test-split prompts"
    );
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("refusing to sweep"),
        "refusal not explicit: {stderr}"
    );

    // Module invariants re-checked on small inputs: dedup, judge symmetry,
    // aggregate sums.
    let dup = corpus::dedup(vec![
        PromptRecord {
            id: "a".into(),
            task: "t".into(),
            condition: Condition::Neutral,
            text: "same  text".into(),
            split: None,
        },
        PromptRecord {
            id: "b".into(),
            task: "t".into(),
            condition: Condition::Neutral,
            text: " same text ".into(),
            split: None,
        },
    ]);
    assert_eq!(dup.len(), 1);
    assert_eq!(dup[0].id, "a");

    let rules = JudgeRules::from_spec(planted_rules_file(&spec)).unwrap();
    let swapped_spec = steerlab::judge::RulesFile {
        schema_version: steerlab::judge::RULES_SCHEMA_VERSION,
        task: "swapped".into(),
        mode: steerlab::judge::RuleModeSpec::TokenClass {
            target_tokens: spec.class_b_words(),
            opposite_tokens: spec.class_a_words(),
            min_token_class_fraction: 0.5,
        },
    };
    let swapped = JudgeRules::from_spec(swapped_spec).unwrap();
    for text in ["a0 a0 a1", "b0 b1 b0", "a0 b0", "f0 f1"] {
        let plain = judge_local(text, &rules).label;
        let mirror = judge_local(text, &swapped).label;
        let expected = match plain {
            Label::Target => Label::Opposite,
            Label::Opposite => Label::Target,
            Label::Neither => Label::Neither,
        };
        assert_eq!(mirror, expected, "symmetry broke on {text:?}");
    }

    let verdicts: Vec<Verdict> = [
        Label::Target,
        Label::Target,
        Label::Opposite,
        Label::Neither,
    ]
    .into_iter()
    .map(|label| Verdict {
        label,
        degenerate: false,
        repetition_score: 0.0,
        truncated: false,
    })
    .collect();
    let dist = aggregate(&verdicts);
    assert_eq!(dist.target + dist.opposite + dist.neither, dist.n);
    assert!((dist.target_frac + dist.opposite_frac + dist.neither_frac - 1.0).abs() < 1e-9);

    assert_within(start, Duration::from_secs(30), "criterion 8");
    println!(
        "PASS criterion 8: 50/50 and 81/81 splits, sweep refusal, dedup/symmetry/aggregate invariants ({:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_9_degeneracy_detection() {
    let start = Instant::now();

    // Exact value: 20-token single-token repeat, n = 4 -> 17 n-grams, 1 distinct.
    let repeated = vec![9u32; 20];
    let score = repetition_score(&repeated, 4);
    let expected = 1.0 - 1.0 / 17.0;
    assert!(
        (score - expected).abs() < 1e-12,
        "repetition score {score}, expected {expected}"
    );

    // Selection excludes alphas whose outputs all repeat one token: on the
    // planted model every greedy generation is a constant token, so with a
    // zero cap no alpha qualifies, including the fully steering one.
    let setup = planted_setup();
    let n_layers = setup.spec.n_layers;
    let predicted = setup.truth.threshold(n_layers) / setup.cos_final;
    let vector = setup.bank.vector(n_layers).unwrap().to_vec();
    let grid = [0.5 * predicted, 2.0 * predicted];
    let outcome = alpha_sweep(
        &setup.model,
        &vector,
        n_layers,
        &setup.neutrals,
        &grid,
        &GenerationParams::greedy(16),
        &setup.judge,
        0.0,
        1,
    )
    .unwrap();
    let steering_cell = outcome.result.per_alpha[1];
    assert_eq!(
        steering_cell.target_count, outcome.result.n_prompts,
        "the strong alpha should fully steer"
    );
    assert_eq!(
        steering_cell.degenerate_count, outcome.result.n_prompts,
        "constant-token outputs must be flagged degenerate"
    );
    assert_eq!(
        outcome.result.selected_alpha, None,
        "degenerate alphas must be excluded from selection"
    );

    // The same sweep with a permissive cap selects the steering alpha.
    let outcome = alpha_sweep(
        &setup.model,
        &vector,
        n_layers,
        &setup.neutrals,
        &grid,
        &GenerationParams::greedy(16),
        &setup.judge,
        1.0,
        1,
    )
    .unwrap();
    assert_eq!(outcome.result.selected_alpha, Some(grid[1]));

    assert_within(start, Duration::from_secs(10), "criterion 9");
    println!(
        "PASS criterion 9: repetition score 16/17 exact; zero-cap selection excludes degenerate alphas ({:?})",
        start.elapsed()
    );
}

// Sanity anchor for the suite itself: the estimated direction the criteria
// rely on really is aligned with the planted truth.
#[test]
fn planted_setup_is_well_posed() {
    let setup = planted_setup();
    assert!(
        setup.cos_final >= 0.9,
        "cos(v(N), u) = {} below 0.9",
        setup.cos_final
    );
    let layers: BTreeSet<usize> = setup.bank.layers().collect();
    assert_eq!(layers.len(), setup.spec.n_layers);
}
