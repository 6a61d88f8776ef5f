//! Command-line front door: synthetic data generation, pipeline runs,
//! dump scoring, schedule printing, strategy comparison, cost tables, and
//! mask/heatmap exports.
//!
//! Every subcommand is deterministic given its flags and seed; report files
//! are plain CSV so runs can be diffed byte-for-byte.

use crate::formats::{
    export_heatmap, export_mask, read_dump, write_dump, DumpKind, FormatError, Manifest,
    TensorDump,
};
use crate::linalg::{rand_matrix, Rng};
use crate::model::{Modality, ModelConfig, ModelError, TokenSequence, ToyModel};
use crate::pipeline::{
    compare_strategies, flops_attention, flops_mlp, run_on_dumps, run_pipeline, PipelineError,
    RunOptions,
};
use crate::pruning::{
    build_schedule_with_decay, Decay, PartitionRule, PruneError, PruneSchedule, StageBoundary,
};
use crate::scoring::{ScoreError, Strategy};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug)]
pub enum CliError {
    Io { path: PathBuf, source: std::io::Error },
    Format(FormatError),
    Model(ModelError),
    Score(ScoreError),
    Prune(PruneError),
    Pipeline(PipelineError),
    /// The dump at the given path holds the wrong payload kind.
    WrongDumpKind { expected: &'static str, path: PathBuf },
    /// Dump width disagrees with the requested model hidden dim.
    GeometryMismatch { hidden: usize, dump_cols: usize },
    /// Stage count cannot be laid out over the decoder depth.
    BadStageCount { stages: usize, decoder_layers: usize },
}

impl CliError {
    /// Stable error-class tag printed alongside the message, named after
    /// the failing condition.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Io { .. } => "Io",
            Self::Format(e) => match e {
                FormatError::BadMagic { .. } => "BadMagic",
                FormatError::VersionMismatch { .. } => "VersionMismatch",
                FormatError::Truncated { .. } => "Truncated",
                FormatError::UnknownKind { .. } => "UnknownKind",
                FormatError::NonFinitePayload { .. } => "NonFinitePayload",
                FormatError::PayloadLength { .. } => "PayloadLength",
                FormatError::ManifestSyntax { .. } => "ManifestSyntax",
                FormatError::ManifestUnknownKey { .. } => "ManifestUnknownKey",
                FormatError::ManifestMissingField { .. } => "ManifestMissingField",
                FormatError::IndexOutOfBounds { .. } => "IndexOutOfBounds",
                FormatError::PositionOutsideGrid { .. } => "PositionOutsideGrid",
                FormatError::GridMismatch { .. } => "GridMismatch",
            },
            Self::Model(_) => "Model",
            Self::Score(e) => match e {
                ScoreError::EmptyVisualSet => "EmptyVisualSet",
                ScoreError::KeyOutOfRange { .. } => "KeyOutOfRange",
                ScoreError::QueryOutOfRange { .. } => "QueryOutOfRange",
                ScoreError::NoHeads => "NoHeads",
                ScoreError::LengthMismatch { .. } => "LengthMismatch",
                ScoreError::NonFiniteScore { .. } => "NonFiniteScore",
                ScoreError::NegativeScore { .. } => "NegativeScore",
                ScoreError::UnknownStrategy { .. } => "UnknownStrategy",
            },
            Self::Prune(e) => match e {
                PruneError::CountOutOfRange { .. } => "CountOutOfRange",
                PruneError::NoReferences => "NoReferences",
                PruneError::KeyRowsMismatch { .. } => "KeyRowsMismatch",
                PruneError::BudgetExceedsCount { .. } => "BudgetExceedsCount",
                PruneError::InvalidDomRatio { .. } => "InvalidDomRatio",
                PruneError::BudgetNotShrinking { .. } => "BudgetNotShrinking",
                PruneError::TooFewStages { .. } => "TooFewStages",
                PruneError::FirstStageNotEncoder => "FirstStageNotEncoder",
                PruneError::BoundariesNotIncreasing { .. } => "BoundariesNotIncreasing",
                PruneError::ZeroBudget => "ZeroBudget",
                PruneError::ScoresMisaligned { .. } => "ScoresMisaligned",
                PruneError::PlanOutOfRange { .. } => "PlanOutOfRange",
            },
            Self::Pipeline(e) => match e {
                PipelineError::Model(_) => "Model",
                PipelineError::Score(_) => "Score",
                PipelineError::Prune(_) => "Prune",
                PipelineError::InitialCountMismatch { .. } => "InitialCountMismatch",
                PipelineError::BoundaryBeyondModel { .. } => "BoundaryBeyondModel",
                PipelineError::ScheduleMissingEncoderStage => "ScheduleMissingEncoderStage",
                PipelineError::StrategyNotApplicable { .. } => "StrategyNotApplicable",
                PipelineError::NoInstructionTokens => "NoInstructionTokens",
                PipelineError::NoVisualTokens => "NoVisualTokens",
                PipelineError::NoEncoderTensors => "NoEncoderTensors",
                PipelineError::MissingManifestField { .. } => "MissingManifestField",
                PipelineError::ManifestOutOfBounds { .. } => "ManifestOutOfBounds",
            },
            Self::WrongDumpKind { .. } => "WrongDumpKind",
            Self::GeometryMismatch { .. } => "GeometryMismatch",
            Self::BadStageCount { .. } => "BadStageCount",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Format(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Score(e) => write!(f, "{e}"),
            Self::Prune(e) => write!(f, "{e}"),
            Self::Pipeline(e) => write!(f, "{e}"),
            Self::WrongDumpKind { expected, path } => {
                write!(f, "{}: expected a {expected} dump", path.display())
            }
            Self::GeometryMismatch { hidden, dump_cols } => {
                write!(f, "model hidden dim {hidden} does not match dump width {dump_cols}")
            }
            Self::BadStageCount { stages, decoder_layers } => {
                write!(f, "{stages} stages cannot be laid out over {decoder_layers} decoder layers")
            }
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! from_err {
    ($from:ty => $variant:ident) => {
        impl From<$from> for CliError {
            fn from(e: $from) -> Self {
                Self::$variant(e)
            }
        }
    };
}

from_err!(FormatError => Format);
from_err!(ModelError => Model);
from_err!(ScoreError => Score);
from_err!(PruneError => Prune);
from_err!(PipelineError => Pipeline);

#[derive(Parser, Debug)]
#[command(
    name = "vdrop",
    version,
    about = "Progressive visual-token pruning over a seeded toy transformer stack"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded token dump and matching manifest.
    Synth(SynthArgs),
    /// Run the staged pruning pipeline and write a run report.
    Run(RunArgs),
    /// Score a dumped attention tensor and select tokens for one budget.
    Score(ScoreArgs),
    /// Print the stage budgets for a retention schedule.
    Schedule(ScheduleArgs),
    /// Compare visual-only and text-guided scoring end to end.
    Compare(CompareArgs),
    /// Print the analytic attention-cost table.
    Flops(FlopsArgs),
    /// Export retention mask and score heatmap for a dumped tensor.
    Export(ExportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    ClsQuery,
    MeanVisualQuery,
    TextGuided,
}

impl From<StrategyArg> for Strategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::ClsQuery => Strategy::ClsQuery,
            StrategyArg::MeanVisualQuery => Strategy::MeanVisualQuery,
            StrategyArg::TextGuided => Strategy::TextGuided,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecayArg {
    Geometric,
    Linear,
}

impl From<DecayArg> for Decay {
    fn from(value: DecayArg) -> Self {
        match value {
            DecayArg::Geometric => Decay::Geometric,
            DecayArg::Linear => Decay::Linear,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    ByScore,
    Alternate,
}

impl From<PartitionArg> for PartitionRule {
    fn from(value: PartitionArg) -> Self {
        match value {
            PartitionArg::ByScore => PartitionRule::ByScore,
            PartitionArg::Alternate => PartitionRule::Alternate,
        }
    }
}

/// Toy model geometry, shared by the model-driven subcommands.
#[derive(Args, Debug, Clone)]
pub struct GeometryArgs {
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub encoder_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub decoder_layers: usize,
    /// Drop the encoder's aggregate token (scoring falls back to the mean
    /// visual query).
    #[arg(long)]
    pub no_cls: bool,
}

impl GeometryArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            has_cls: !self.no_cls,
            seed,
            positional: true,
            mlp: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory to write `<name>.vdmp` and `<name>.manifest` into.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "synth")]
    pub name: String,
    #[arg(long, env = "VDROP_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 576)]
    pub visual_count: usize,
    #[arg(long, default_value_t = 8)]
    pub instr_count: usize,
    #[arg(long, default_value_t = 1)]
    pub text_pre_count: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Token-matrix dump with `[TextPre*, Visual*, TextInstr*]` layout.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Decoder-side scoring strategy (defaults to the manifest's).
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Final visual-token budget; equal to the visual count for an identity
    /// run (defaults to the manifest's).
    #[arg(long = "final")]
    pub final_budget: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub dom_ratio: Option<f32>,
    #[arg(long, value_enum, default_value_t = DecayArg::Geometric)]
    pub decay: DecayArg,
    #[arg(long, value_enum, default_value_t = PartitionArg::ByScore)]
    pub partition: PartitionArg,
    #[arg(long, env = "VDROP_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Attention-tensor dump to score.
    #[arg(long)]
    pub attn: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scores CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Retention budget; defaults to the manifest's final budget, else the
    /// full visual count.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub dom_ratio: Option<f32>,
    /// Rescale exported scores to sum to one (selection is unaffected).
    #[arg(long)]
    pub renormalize: bool,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 576)]
    pub initial: usize,
    #[arg(long = "final", default_value_t = 192)]
    pub final_budget: usize,
    #[arg(long, default_value_t = 5)]
    pub stages: usize,
    #[arg(long, value_enum, default_value_t = DecayArg::Geometric)]
    pub decay: DecayArg,
    #[arg(long, default_value_t = 8)]
    pub decoder_layers: usize,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comparison CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "final")]
    pub final_budget: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub dom_ratio: Option<f32>,
    #[arg(long, value_enum, default_value_t = DecayArg::Geometric)]
    pub decay: DecayArg,
    #[arg(long, value_enum, default_value_t = PartitionArg::ByScore)]
    pub partition: PartitionArg,
    #[arg(long, env = "VDROP_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Include the MLP line item.
    #[arg(long)]
    pub mlp: bool,
    /// Also print the cost at a second sequence length plus the reduction.
    #[arg(long)]
    pub compare_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub attn: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prefix for `<prefix>.mask.csv`, `<prefix>.heat.pgm`,
    /// `<prefix>.heat.csv`.
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub dom_ratio: Option<f32>,
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
        }
    }
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Split `n` cells into the most square grid whose dimensions divide `n`.
fn factor_grid(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt() as usize;
    while rows > 1 && !n.is_multiple_of(rows) {
        rows -= 1;
    }
    (rows.max(1), n / rows.max(1))
}

/// Evenly spaced decoder boundaries after the encoder stage: `stages - 1`
/// layers ending at the final decoder layer.
fn default_boundaries(stages: usize, decoder_layers: usize) -> CliResult<Vec<StageBoundary>> {
    if stages < 3 || stages - 1 > decoder_layers {
        return Err(CliError::BadStageCount { stages, decoder_layers });
    }
    let mut out = vec![StageBoundary::EncoderOutput];
    for i in 1..stages {
        let layer = (i * decoder_layers) as f64 / (stages - 1) as f64;
        out.push(StageBoundary::DecoderLayer(layer.round() as usize));
    }
    Ok(out)
}

fn boundaries_from(manifest: &Manifest, stages: usize, decoder_layers: usize) -> CliResult<Vec<StageBoundary>> {
    if let Some(layers) = &manifest.boundaries {
        let mut out = vec![StageBoundary::EncoderOutput];
        out.extend(layers.iter().map(|&l| StageBoundary::DecoderLayer(l)));
        return Ok(out);
    }
    default_boundaries(stages, decoder_layers)
}

fn build_schedule_for(
    initial: usize,
    final_budget: usize,
    boundaries: &[StageBoundary],
    decay: Decay,
) -> CliResult<PruneSchedule> {
    if final_budget == initial {
        return Ok(PruneSchedule::identity(initial, boundaries)?);
    }
    Ok(build_schedule_with_decay(initial, final_budget, boundaries, decay)?)
}

/// Reconstruct the decoder-layout token sequence from a dump plus its
/// manifest. Rows named in `visual_indices` become visual tokens, earlier
/// rows system text, later rows instruction text.
fn sequence_from_dump(dump: &TensorDump, manifest: &Manifest, path: &Path) -> CliResult<TokenSequence> {
    if dump.kind != DumpKind::TokenMatrix {
        return Err(CliError::WrongDumpKind { expected: "token-matrix", path: path.to_path_buf() });
    }
    let matrix = dump.to_matrix();
    let rows = matrix.rows();
    for &i in &manifest.visual_indices {
        if i >= rows {
            return Err(CliError::Pipeline(PipelineError::ManifestOutOfBounds {
                field: "visual_indices",
                index: i,
                bound: rows,
            }));
        }
    }
    let visual: std::collections::BTreeSet<usize> = manifest.visual_indices.iter().copied().collect();
    let first_visual = visual.iter().next().copied().unwrap_or(rows);
    let modality: Vec<Modality> = (0..rows)
        .map(|i| {
            if visual.contains(&i) {
                Modality::Visual
            } else if i < first_visual {
                Modality::TextPre
            } else {
                Modality::TextInstr
            }
        })
        .collect();
    let grid = manifest.grid_shape.unwrap_or_else(|| factor_grid(visual.len()));
    Ok(TokenSequence::new(matrix, modality, (0..rows).collect(), Some(grid))?)
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let total = args.text_pre_count + args.visual_count + args.instr_count;
    let mut rng = Rng::new(args.seed);
    let embeddings = rand_matrix(&mut rng, total, args.hidden, 0.5);
    let dump = TensorDump::from_matrix(&embeddings);

    let first_visual = args.text_pre_count;
    let mut manifest =
        Manifest::new((first_visual..first_visual + args.visual_count).collect());
    if args.instr_count > 0 {
        manifest.instr_last_index = Some(total - 1);
    }
    manifest.grid_shape = Some(factor_grid(args.visual_count));
    manifest.initial = Some(args.visual_count);
    manifest.final_budget = Some((args.visual_count / 3).max(1));
    manifest.stages = Some(5);
    manifest.strategy = Some(Strategy::MeanVisualQuery);
    manifest.dom_ratio = Some(0.875);
    manifest.seed = Some(args.seed);

    let dump_path = args.out_dir.join(format!("{}.vdmp", args.name));
    let manifest_path = args.out_dir.join(format!("{}.manifest", args.name));
    write_file(&dump_path, &write_dump(&dump)?)?;
    write_file(&manifest_path, manifest.render().as_bytes())?;
    println!("wrote {}", dump_path.display());
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let dump = read_dump(&read_file(&args.tokens)?)?;
    let manifest = Manifest::parse(&read_text(&args.manifest)?)?;
    let inputs = sequence_from_dump(&dump, &manifest, &args.tokens)?;

    if dump.cols as usize != args.geometry.hidden {
        return Err(CliError::GeometryMismatch {
            hidden: args.geometry.hidden,
            dump_cols: dump.cols as usize,
        });
    }

    let seed = args.seed.or(manifest.seed).unwrap_or(42);
    let model = ToyModel::new(args.geometry.config(seed))?;

    let initial = inputs.visual_rows().len();
    let final_budget =
        args.final_budget.or(manifest.final_budget).unwrap_or_else(|| (initial / 3).max(1));
    let stages = args.stages.or(manifest.stages).unwrap_or(5);
    let boundaries = boundaries_from(&manifest, stages, args.geometry.decoder_layers)?;
    let schedule = build_schedule_for(initial, final_budget, &boundaries, args.decay.into())?;

    let strategy: Strategy = args
        .strategy
        .map(Strategy::from)
        .or(manifest.strategy)
        .unwrap_or(Strategy::MeanVisualQuery);
    let options = RunOptions {
        dom_ratio: args.dom_ratio.or(manifest.dom_ratio).unwrap_or(0.875),
        partition: args.partition.into(),
    };

    let run = run_pipeline(&model, &schedule, strategy, &inputs, &options)?;
    write_file(&args.out, run.report.to_csv().as_bytes())?;

    for (i, stage) in run.report.per_stage.iter().enumerate() {
        println!("stage {} [{}] retained {}", i + 1, stage.boundary, stage.retained.len());
    }
    println!("reduction_pct = {}", run.report.reduction_pct);
    println!("digest = {}", run.report.final_sequence_digest);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn dump_selection(
    attn_path: &Path,
    manifest_path: &Path,
    strategy: Option<StrategyArg>,
    budget: Option<usize>,
    dom_ratio: Option<f32>,
) -> CliResult<(Manifest, Strategy, usize, crate::pipeline::DumpSelection)> {
    let dump = read_dump(&read_file(attn_path)?)?;
    if dump.kind != DumpKind::AttentionTensor {
        return Err(CliError::WrongDumpKind {
            expected: "attention-tensor",
            path: attn_path.to_path_buf(),
        });
    }
    let manifest = Manifest::parse(&read_text(manifest_path)?)?;
    let tensor = dump.to_attention();
    let strategy: Strategy = strategy
        .map(Strategy::from)
        .or(manifest.strategy)
        .unwrap_or(Strategy::MeanVisualQuery);
    let budget = budget
        .or(manifest.final_budget)
        .unwrap_or(manifest.visual_indices.len())
        .min(manifest.visual_indices.len());
    let ratio = dom_ratio.or(manifest.dom_ratio).unwrap_or(0.875);
    let selection = run_on_dumps(&tensor, &manifest, strategy, budget, ratio)?;
    Ok((manifest, strategy, budget, selection))
}

fn cmd_score(args: &ScoreArgs) -> CliResult<()> {
    let (manifest, strategy, budget, mut selection) =
        dump_selection(&args.attn, &args.manifest, args.strategy, args.budget, args.dom_ratio)?;
    if args.renormalize {
        selection.scores.renormalize();
    }

    let retained: std::collections::BTreeSet<usize> = selection.retained.iter().copied().collect();
    let mut out = String::new();
    out.push_str(&format!("# strategy = {strategy}\n"));
    out.push_str(&format!("# budget = {budget}\n"));
    out.push_str("grid_index,seq_position,score,retained\n");
    for (g, (&pos, &score)) in manifest
        .visual_indices
        .iter()
        .zip(selection.scores.scores.iter())
        .enumerate()
    {
        out.push_str(&format!(
            "{g},{pos},{score},{}\n",
            u8::from(retained.contains(&g))
        ));
    }
    write_file(&args.out, out.as_bytes())?;
    println!("retained {} of {} tokens", selection.retained.len(), manifest.visual_indices.len());
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_schedule(args: &ScheduleArgs) -> CliResult<()> {
    let boundaries = default_boundaries(args.stages, args.decoder_layers)?;
    let schedule =
        build_schedule_for(args.initial, args.final_budget, &boundaries, args.decay.into())?;
    println!("stage,boundary,budget");
    for (i, stage) in schedule.stages.iter().enumerate() {
        println!("{},{},{}", i + 1, stage.boundary, stage.budget);
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let dump = read_dump(&read_file(&args.tokens)?)?;
    let manifest = Manifest::parse(&read_text(&args.manifest)?)?;
    let inputs = sequence_from_dump(&dump, &manifest, &args.tokens)?;
    if dump.cols as usize != args.geometry.hidden {
        return Err(CliError::GeometryMismatch {
            hidden: args.geometry.hidden,
            dump_cols: dump.cols as usize,
        });
    }

    let seed = args.seed.or(manifest.seed).unwrap_or(42);
    let model = ToyModel::new(args.geometry.config(seed))?;
    let initial = inputs.visual_rows().len();
    let final_budget =
        args.final_budget.or(manifest.final_budget).unwrap_or_else(|| (initial / 3).max(1));
    let stages = args.stages.or(manifest.stages).unwrap_or(5);
    let boundaries = boundaries_from(&manifest, stages, args.geometry.decoder_layers)?;
    let schedule = build_schedule_for(initial, final_budget, &boundaries, args.decay.into())?;
    let options = RunOptions {
        dom_ratio: args.dom_ratio.or(manifest.dom_ratio).unwrap_or(0.875),
        partition: args.partition.into(),
    };

    let report = compare_strategies(&model, &schedule, &inputs, &options)?;
    write_file(&args.out, report.to_csv().as_bytes())?;
    println!("final_iou = {}", report.final_iou);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> CliResult<()> {
    let header = if args.mlp {
        "seq_len,hidden,layers,attention_flops,mlp_flops"
    } else {
        "seq_len,hidden,layers,attention_flops"
    };
    println!("{header}");
    let row = |l: usize| {
        let attn = flops_attention(l, args.hidden, args.layers);
        if args.mlp {
            format!("{l},{},{},{attn},{}", args.hidden, args.layers, flops_mlp(l, args.hidden, args.layers))
        } else {
            format!("{l},{},{},{attn}", args.hidden, args.layers)
        }
    };
    println!("{}", row(args.seq_len));
    if let Some(other) = args.compare_len {
        println!("{}", row(other));
        let base = flops_attention(args.seq_len, args.hidden, args.layers);
        let reduced = flops_attention(other, args.hidden, args.layers);
        println!("# reduction_pct = {}", 1.0 - reduced / base);
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> CliResult<()> {
    let (manifest, _strategy, _budget, selection) =
        dump_selection(&args.attn, &args.manifest, args.strategy, args.budget, args.dom_ratio)?;
    let grid = manifest.grid_shape.unwrap_or_else(|| factor_grid(manifest.visual_indices.len()));

    let (mask_csv, indices) = export_mask(&selection.retained, grid)?;
    let heatmap = export_heatmap(&selection.scores, grid)?;

    let prefix = args.out_prefix.display();
    let mask_path = PathBuf::from(format!("{prefix}.mask.csv"));
    let pgm_path = PathBuf::from(format!("{prefix}.heat.pgm"));
    let csv_path = PathBuf::from(format!("{prefix}.heat.csv"));
    write_file(&mask_path, mask_csv.as_bytes())?;
    write_file(&pgm_path, &heatmap.pgm)?;
    write_file(&csv_path, heatmap.csv.as_bytes())?;

    let list: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
    println!("retained = {}", list.join(" "));
    println!("wrote {}", mask_path.display());
    println!("wrote {}", pgm_path.display());
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// Dispatch a parsed command line.
pub fn execute(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Run(args) => cmd_run(args),
        Command::Score(args) => cmd_score(args),
        Command::Schedule(args) => cmd_schedule(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Export(args) => cmd_export(args),
    }
}
