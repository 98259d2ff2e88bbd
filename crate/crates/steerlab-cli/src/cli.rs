//! Argument surface of the `steerlab` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "steerlab", version, about = "Activation steering harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Estimate difference-in-means directions and write a direction bank.
    Estimate(EstimateArgs),
    /// Sweep intervention layers on the validation split and pick l*.
    SweepLayer(SweepLayerArgs),
    /// Sweep intervention strengths at a fixed layer.
    SweepAlpha(SweepAlphaArgs),
    /// Run a steering experiment and write a report with raw generations.
    Run(RunArgs),
    /// Turn run reports into summary tables and figure-data CSVs.
    Report(ReportArgs),
    /// Lint and summarize a prompt corpus.
    ValidateCorpus(ValidateCorpusArgs),
    /// Emit the planted fixture: model, prompts, and judge rules.
    MakePlanted(MakePlantedArgs),
}

#[derive(Args, Clone)]
pub struct EstimateArgs {
    /// Model container path.
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt corpus (JSONL). Positives are the task's target-condition
    /// records, negatives the opposite-condition records.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Task name to select records by.
    #[arg(long)]
    pub task: String,
    /// Human label of the steering target (bank metadata).
    #[arg(long)]
    pub target_label: String,
    /// Human label of the opposite concept (bank metadata).
    #[arg(long)]
    pub opposite_label: String,
    /// How many final tokens to average per prompt.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Layers to estimate, comma-separated; all layers when omitted.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Unit-normalize the stored vectors.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output directory; the bank lands in <out>/bank/.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct GenerationArgs {
    /// Maximum new tokens per generation.
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
    /// Sampling temperature; greedy decoding when omitted.
    #[arg(long)]
    pub temperature: Option<f32>,
    /// PRNG seed for temperature sampling and provenance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Token ids that end generation (repeatable).
    #[arg(long = "stop-id")]
    pub stop_ids: Vec<u32>,
}

#[derive(Args, Clone)]
pub struct JudgeArgs {
    /// Judge rules file (JSON).
    #[arg(long)]
    pub rules: PathBuf,
    /// Which judge labels the outputs.
    #[arg(long, value_enum, default_value_t = JudgeMode::Local)]
    pub judge: JudgeMode,
    /// n-gram size for the repetition score.
    #[arg(long, default_value_t = 4)]
    pub degeneracy_ngram: usize,
    /// Repetition score above which an output counts as degenerate.
    #[arg(long, default_value_t = 0.5)]
    pub degeneracy_score_threshold: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeMode {
    Local,
    /// HTTP binary judge; configure via STEERLAB_JUDGE_URL / _TOKEN.
    Remote,
}

#[derive(Args, Clone)]
pub struct SweepLayerArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Prompt corpus with split assignments; only neutral validation
    /// records are swept.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Intervention strength used at every layer.
    #[arg(long)]
    pub alpha: f32,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Concurrent (prompt, judge) cells. Defaults to 1 locally and to the
    /// remote judge's in-flight bound of 4 when --judge remote.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct SweepAlphaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    /// Layer whose bank vector is swept.
    #[arg(long)]
    pub layer: usize,
    /// Strictly increasing strength grid, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f32>,
    /// Maximum tolerated degenerate fraction for strength selection.
    #[arg(long, default_value_t = 0.1)]
    pub degeneracy_cap: f64,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Concurrent (prompt, judge) cells. Defaults to 1 locally and to the
    /// remote judge's in-flight bound of 4 when --judge remote.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunMode {
    /// Neutral prompts, no intervention.
    Baseline,
    /// Neutral prompts steered toward the target.
    Neutral,
    /// Opposite-condition prompts steered toward the target.
    Conflict,
    /// Delegate to the alpha sweep on the validation split.
    AlphaSweep,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Validation,
    Test,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub mode: RunMode,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    /// Intervention layer (neutral/conflict modes, and alpha-sweep).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Take the layer from a sweep-layer result file instead.
    #[arg(long, conflicts_with = "layer")]
    pub sweep: Option<PathBuf>,
    /// Intervention strength (neutral/conflict modes).
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Strength grid for alpha-sweep mode.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f32>>,
    #[arg(long, default_value_t = 0.1)]
    pub degeneracy_cap: f64,
    /// Which split to evaluate. Defaults to test; alpha-sweep always uses
    /// validation (it selects a hyperparameter).
    #[arg(long, value_enum)]
    pub split: Option<SplitChoice>,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Concurrent (prompt, judge) cells. Defaults to 1 locally and to the
    /// remote judge's in-flight bound of 4 when --judge remote.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct ReportArgs {
    /// Run report files (JSON), as produced by `steerlab run`.
    #[arg(required = false)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct ValidateCorpusArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    /// Judge rules for the neutral-cue lint (optional).
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct MakePlantedArgs {
    #[arg(long, default_value = "out/planted")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20240817)]
    pub seed: u64,
    /// Prompts per condition.
    #[arg(long, default_value_t = 20)]
    pub n_per_condition: usize,
    #[arg(long, default_value_t = 0.5)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub null_block: usize,
    #[arg(long, default_value_t = 0.5)]
    pub attenuation: f32,
}
