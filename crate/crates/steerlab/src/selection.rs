//! Intervention layer and strength selection on a validation split.
//!
//! The layer sweep generates once per (layer, prompt) with the bank's vector
//! for that layer, judges each output, and picks the layer with the most
//! target verdicts (`best_layer = argmax M_l`, ties broken toward the lowest
//! index). The alpha sweep scans a strength grid at a fixed layer and applies
//! a degeneracy cap to the selection. (layer, prompt) cells are independent,
//! so they fan out over the bounded worker pool; aggregation is keyed, so
//! results do not depend on scheduling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directions::{DirectionBank, EstimateError};
use crate::judge::{Judge, JudgeError, Label, Verdict};
use crate::model::{GenerationParams, InterventionSpec, Model, ModelError};
use crate::parallel::bounded_map;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bank(#[from] EstimateError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("empty validation prompt set")]
    EmptyValidationSet,
    #[error("prompt {index} tokenized to zero tokens")]
    EmptyPrompt { index: usize },
    #[error("alpha grid must be non-empty")]
    EmptyGrid,
    #[error("invalid alpha grid: {0}")]
    InvalidGrid(String),
}

/// Outcome of a layer sweep: target-verdict counts per layer and the argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub per_layer: BTreeMap<usize, usize>,
    pub best_layer: usize,
    pub alpha_used: f32,
    pub n_prompts: usize,
}

/// Verdict counts at one grid strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlphaCell {
    pub target_count: usize,
    pub opposite_count: usize,
    pub neither_count: usize,
    pub degenerate_count: usize,
}

/// Outcome of an alpha sweep; `per_alpha[i]` pairs with `grid[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepResult {
    pub grid: Vec<f32>,
    pub per_alpha: Vec<AlphaCell>,
    pub selected_alpha: Option<f32>,
    pub n_prompts: usize,
}

/// Alpha sweep summary plus the raw generations and verdicts behind it
/// (`generations[i][j]`: grid point `i`, prompt `j`), kept so judges can be
/// re-run without regenerating.
#[derive(Debug, Clone)]
pub struct AlphaSweepOutcome {
    pub result: AlphaSweepResult,
    pub generations: Vec<Vec<crate::model::GenerationRecord>>,
    pub verdicts: Vec<Vec<Verdict>>,
}

/// Argmax over layer counts, ties broken toward the lowest layer index.
pub fn best_layer_from_counts(per_layer: &BTreeMap<usize, usize>) -> usize {
    let mut best_layer = 0;
    let mut best_count = None;
    for (&layer, &count) in per_layer {
        if best_count.is_none_or(|c| count > c) {
            best_layer = layer;
            best_count = Some(count);
        }
    }
    best_layer
}

fn tokenize_all(model: &Model, prompts: &[String]) -> Result<Vec<Vec<u32>>, SweepError> {
    prompts
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let ids = model.tokenize(p);
            if ids.is_empty() {
                Err(SweepError::EmptyPrompt { index })
            } else {
                Ok(ids)
            }
        })
        .collect()
}

fn judge_cells(
    model: &Model,
    prompt_ids: &[Vec<u32>],
    intervention: &InterventionSpec,
    params: &GenerationParams,
    judge: &dyn Judge,
    workers: usize,
) -> Result<Vec<(crate::model::GenerationRecord, Verdict)>, SweepError> {
    bounded_map(prompt_ids, workers, |_, ids| {
        let record = model.generate(ids, params, Some(intervention))?;
        let verdict = judge.judge(&record)?;
        Ok::<_, SweepError>((record, verdict))
    })
    .into_iter()
    .collect()
}

/// Generate once per (layer, prompt) with `(layer, alpha, v(layer))`, judge,
/// and count target verdicts.
pub fn layer_sweep(
    model: &Model,
    bank: &DirectionBank,
    validation_prompts: &[String],
    alpha: f32,
    params: &GenerationParams,
    judge: &dyn Judge,
    workers: usize,
) -> Result<SweepResult, SweepError> {
    bank.check_model(model)?;
    if validation_prompts.is_empty() {
        return Err(SweepError::EmptyValidationSet);
    }
    let prompt_ids = tokenize_all(model, validation_prompts)?;

    let mut per_layer = BTreeMap::new();
    for layer in bank.layers() {
        let vector = bank.vector(layer).expect("layer key exists").to_vec();
        let intervention = InterventionSpec::new(layer, alpha, vector);
        let cells = judge_cells(model, &prompt_ids, &intervention, params, judge, workers)?;
        let hits = cells
            .iter()
            .filter(|(_, v)| v.label == Label::Target)
            .count();
        per_layer.insert(layer, hits);
    }

    Ok(SweepResult {
        best_layer: best_layer_from_counts(&per_layer),
        per_layer,
        alpha_used: alpha,
        n_prompts: validation_prompts.len(),
    })
}

/// Scan a strictly increasing alpha grid at a fixed layer. The selected
/// strength is the smallest alpha maximizing the target count among those
/// whose degenerate fraction stays within `degeneracy_threshold`; `None`
/// when no grid point qualifies.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    model: &Model,
    vector: &[f32],
    layer: usize,
    validation_prompts: &[String],
    grid: &[f32],
    params: &GenerationParams,
    judge: &dyn Judge,
    degeneracy_threshold: f64,
    workers: usize,
) -> Result<AlphaSweepOutcome, SweepError> {
    if grid.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    if grid.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(SweepError::InvalidGrid(
            "grid values must be finite and >= 0".into(),
        ));
    }
    for pair in grid.windows(2) {
        if pair[0] >= pair[1] {
            return Err(SweepError::InvalidGrid(format!(
                "grid must be strictly increasing, saw {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if validation_prompts.is_empty() {
        return Err(SweepError::EmptyValidationSet);
    }
    let prompt_ids = tokenize_all(model, validation_prompts)?;
    let n = validation_prompts.len();

    let mut per_alpha = Vec::with_capacity(grid.len());
    let mut generations = Vec::with_capacity(grid.len());
    let mut verdicts_by_alpha = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let intervention = InterventionSpec::new(layer, alpha, vector.to_vec());
        let cells = judge_cells(model, &prompt_ids, &intervention, params, judge, workers)?;
        let mut cell = AlphaCell::default();
        for (_, v) in &cells {
            match v.label {
                Label::Target => cell.target_count += 1,
                Label::Opposite => cell.opposite_count += 1,
                Label::Neither => cell.neither_count += 1,
            }
            if v.degenerate {
                cell.degenerate_count += 1;
            }
        }
        per_alpha.push(cell);
        let (records, verdicts): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
        generations.push(records);
        verdicts_by_alpha.push(verdicts);
    }

    let qualifying =
        |cell: &AlphaCell| cell.degenerate_count as f64 / n as f64 <= degeneracy_threshold;
    let best_target = per_alpha
        .iter()
        .filter(|c| qualifying(c))
        .map(|c| c.target_count)
        .max();
    let selected_alpha = best_target.and_then(|best| {
        grid.iter()
            .zip(&per_alpha)
            .find(|(_, c)| qualifying(c) && c.target_count == best)
            .map(|(&a, _)| a)
    });

    Ok(AlphaSweepOutcome {
        result: AlphaSweepResult {
            grid: grid.to_vec(),
            per_alpha,
            selected_alpha,
            n_prompts: n,
        },
        generations,
        verdicts: verdicts_by_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskSpec;
    use crate::directions::{estimate_directions, EstimatorConfig};
    use crate::judge::aggregate;
    use crate::model::{random_full_model, BlockKind, GenerationRecord, ModelConfig};

    /// Scripted judge: labels by a pure function of the record, so sweep
    /// mechanics can be tested without a real classifier.
    struct StubJudge<F: Fn(&GenerationRecord) -> Verdict + Sync>(F);

    impl<F: Fn(&GenerationRecord) -> Verdict + Sync> Judge for StubJudge<F> {
        fn judge(&self, record: &GenerationRecord) -> Result<Verdict, JudgeError> {
            Ok(self.0(record))
        }
    }

    fn verdict(label: Label, degenerate: bool) -> Verdict {
        Verdict {
            label,
            degenerate,
            repetition_score: 0.0,
            truncated: false,
        }
    }

    fn model() -> Model {
        let config = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 48,
            block_kinds: vec![BlockKind::Full; 3],
        };
        random_full_model(&config, 4).unwrap()
    }

    fn bank(model: &Model) -> DirectionBank {
        let task = TaskSpec {
            name: "demo".into(),
            target_label: "a".into(),
            opposite_label: "b".into(),
        };
        estimate_directions(
            model,
            &task,
            &["t3 t4 ".to_string(), "t5 ".to_string()],
            &["t6 ".to_string(), "t7 t8 ".to_string()],
            &EstimatorConfig::default(),
        )
        .unwrap()
    }

    fn prompts() -> Vec<String> {
        vec!["t3 t4 ".into(), "t5 t6 ".into(), "t7 ".into()]
    }

    #[test]
    fn all_target_judge_ties_break_to_layer_one() {
        let m = model();
        let b = bank(&m);
        let judge = StubJudge(|_| verdict(Label::Target, false));
        let result = layer_sweep(
            &m,
            &b,
            &prompts(),
            0.0,
            &GenerationParams::greedy(4),
            &judge,
            1,
        )
        .unwrap();
        assert!(result.per_layer.values().all(|&c| c == 3));
        assert_eq!(result.best_layer, 1);
    }

    #[test]
    fn zero_alpha_counts_equal_baseline() {
        // With alpha = 0 every layer generates the unsteered output, so all
        // M_l agree with the baseline target count under the same judge.
        let m = model();
        let b = bank(&m);
        let judge = StubJudge(|r: &GenerationRecord| {
            let label = if r.output_ids.first().is_some_and(|&id| id % 2 == 0) {
                Label::Target
            } else {
                Label::Opposite
            };
            verdict(label, false)
        });
        let params = GenerationParams::greedy(4);

        let baseline: usize = prompts()
            .iter()
            .map(|p| {
                let record = m.generate(&m.tokenize(p), &params, None).unwrap();
                usize::from(judge.judge(&record).unwrap().label == Label::Target)
            })
            .sum();

        let result = layer_sweep(&m, &b, &prompts(), 0.0, &params, &judge, 2).unwrap();
        for (&layer, &count) in &result.per_layer {
            assert_eq!(count, baseline, "layer {layer}");
        }
        assert_eq!(result.best_layer, 1);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties_and_scales() {
        let counts: BTreeMap<usize, usize> = [(1, 2), (2, 5), (3, 5), (4, 1)].into();
        assert_eq!(best_layer_from_counts(&counts), 2);
        let scaled: BTreeMap<usize, usize> = counts.iter().map(|(&l, &c)| (l, c * 7)).collect();
        assert_eq!(best_layer_from_counts(&scaled), 2);
    }

    #[test]
    fn sweep_is_reproducible() {
        let m = model();
        let b = bank(&m);
        let judge = StubJudge(|r: &GenerationRecord| {
            verdict(
                if r.output_ids.iter().sum::<u32>() % 3 == 0 {
                    Label::Target
                } else {
                    Label::Neither
                },
                false,
            )
        });
        let params = GenerationParams::greedy(6);
        let a = layer_sweep(&m, &b, &prompts(), 1.5, &params, &judge, 1).unwrap();
        let c = layer_sweep(&m, &b, &prompts(), 1.5, &params, &judge, 4).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn empty_validation_set_is_rejected() {
        let m = model();
        let b = bank(&m);
        let judge = StubJudge(|_| verdict(Label::Target, false));
        assert!(matches!(
            layer_sweep(&m, &b, &[], 1.0, &GenerationParams::greedy(2), &judge, 1),
            Err(SweepError::EmptyValidationSet)
        ));
    }

    #[test]
    fn alpha_grid_validation() {
        let m = model();
        let judge = StubJudge(|_| verdict(Label::Target, false));
        let v = vec![0.1f32; 8];
        let params = GenerationParams::greedy(2);
        let ps = prompts();
        assert!(matches!(
            alpha_sweep(&m, &v, 1, &ps, &[], &params, &judge, 0.1, 1),
            Err(SweepError::EmptyGrid)
        ));
        assert!(matches!(
            alpha_sweep(&m, &v, 1, &ps, &[1.0, 1.0], &params, &judge, 0.1, 1),
            Err(SweepError::InvalidGrid(_))
        ));
        assert!(matches!(
            alpha_sweep(&m, &v, 1, &ps, &[2.0, 1.0], &params, &judge, 0.1, 1),
            Err(SweepError::InvalidGrid(_))
        ));
    }

    #[test]
    fn zero_alpha_cell_matches_baseline_distribution() {
        let m = model();
        let judge = StubJudge(|r: &GenerationRecord| {
            let label = match r.output_ids.first().map_or(0, |&id| id % 3) {
                0 => Label::Target,
                1 => Label::Opposite,
                _ => Label::Neither,
            };
            verdict(label, false)
        });
        let params = GenerationParams::greedy(4);
        let ps = prompts();

        let baseline_verdicts: Vec<Verdict> = ps
            .iter()
            .map(|p| {
                let record = m.generate(&m.tokenize(p), &params, None).unwrap();
                judge.judge(&record).unwrap()
            })
            .collect();
        let baseline = aggregate(&baseline_verdicts);

        let v = vec![0.25f32; 8];
        let outcome = alpha_sweep(&m, &v, 2, &ps, &[0.0], &params, &judge, 1.0, 1).unwrap();
        let cell = outcome.result.per_alpha[0];
        assert_eq!(cell.target_count, baseline.target);
        assert_eq!(cell.opposite_count, baseline.opposite);
        assert_eq!(cell.neither_count, baseline.neither);
        assert_eq!(outcome.result.selected_alpha, Some(0.0));
        assert_eq!(outcome.generations.len(), 1);
        assert_eq!(outcome.generations[0].len(), ps.len());
    }

    #[test]
    fn degenerate_alphas_are_disqualified() {
        let m = model();
        // Everything judged target, but any alpha >= 1 marked degenerate.
        let judge = StubJudge(|r: &GenerationRecord| {
            let strong = r.intervention.as_ref().is_some_and(|iv| iv.alpha >= 1.0);
            verdict(Label::Target, strong)
        });
        let params = GenerationParams::greedy(4);
        let v = vec![0.3f32; 8];
        let result = alpha_sweep(
            &m,
            &v,
            1,
            &prompts(),
            &[0.5, 1.0, 2.0],
            &params,
            &judge,
            0.0,
            1,
        )
        .unwrap();
        // target counts are equal everywhere; only 0.5 passes the cap
        assert_eq!(result.result.selected_alpha, Some(0.5));

        let all_degenerate = StubJudge(|_| verdict(Label::Target, true));
        let result = alpha_sweep(
            &m,
            &v,
            1,
            &prompts(),
            &[0.5, 1.0],
            &params,
            &all_degenerate,
            0.0,
            1,
        )
        .unwrap();
        assert_eq!(result.result.selected_alpha, None);
    }

    #[test]
    fn alpha_sweep_is_reproducible() {
        let m = model();
        let judge = StubJudge(|r: &GenerationRecord| {
            verdict(
                if r.output_ids.iter().sum::<u32>() % 2 == 0 {
                    Label::Target
                } else {
                    Label::Neither
                },
                false,
            )
        });
        let params = GenerationParams::greedy(5);
        let v = vec![0.2f32; 8];
        let grid = [0.5f32, 1.5, 3.0];
        let a = alpha_sweep(&m, &v, 2, &prompts(), &grid, &params, &judge, 0.5, 1).unwrap();
        let b = alpha_sweep(&m, &v, 2, &prompts(), &grid, &params, &judge, 0.5, 3).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.generations, b.generations);
    }

    #[test]
    fn selection_prefers_smallest_alpha_at_max_target() {
        let m = model();
        // Map alpha to a target count profile: 0.5 -> low, 1.0 -> high,
        // 2.0 -> high. The smallest high alpha must win.
        let judge = StubJudge(|r: &GenerationRecord| {
            let alpha = r.intervention.as_ref().map_or(0.0, |iv| iv.alpha);
            let label = if alpha >= 1.0 || r.output_ids.first().is_some_and(|&i| i % 2 == 0) {
                Label::Target
            } else {
                Label::Neither
            };
            verdict(label, false)
        });
        let params = GenerationParams::greedy(4);
        let v = vec![0.0f32; 8]; // vector content irrelevant for the stub
        let result = alpha_sweep(
            &m,
            &v,
            1,
            &prompts(),
            &[0.5, 1.0, 2.0],
            &params,
            &judge,
            1.0,
            1,
        )
        .unwrap();
        assert_eq!(result.result.selected_alpha, Some(1.0));
    }
}
