//! Stage-wise pruning pipeline over the toy encoder/decoder, the
//! strategy-comparison harness, dump-based scoring, and the analytic
//! attention-cost model.
//!
//! A run executes the encoder over the visual tokens, scores them at the
//! encoder output (aggregate-token query when one exists, otherwise mean
//! visual query), projects into the decoder layout, and applies the second
//! stage's budget at decoder entry. The decoder then runs segment by
//! segment: at each stage's final layer the current visual tokens are scored
//! with that layer's attention and pruned to the stage budget. Scores are
//! recomputed fresh at every stage; a stage whose budget is already met
//! passes through untouched.

use crate::formats::Manifest;
use crate::linalg::Matrix;
use crate::model::{AttentionTensor, Modality, ModelError, TokenSequence, ToyModel};
use crate::pruning::{
    prune_stage_detailed, select_dominant, partition_with_rule, PartitionRule, PruneError,
    PruneSchedule, StageBoundary,
};
use crate::scoring::{
    score_cls_query, score_mean_visual_query, score_text_guided, ImportanceVector, ScoreError,
    Strategy,
};
use std::fmt;

pub type PipelineResult<T> = Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    Model(ModelError),
    Score(ScoreError),
    Prune(PruneError),
    /// The schedule's initial count does not match the input's visual count.
    InitialCountMismatch { schedule: usize, actual: usize },
    /// A stage boundary points past the model's decoder depth.
    BoundaryBeyondModel { layer: usize, layers: usize },
    /// The schedule's first stage must end at the encoder output.
    ScheduleMissingEncoderStage,
    /// The aggregate-token strategy only applies to encoder-side scoring.
    StrategyNotApplicable { strategy: Strategy },
    NoInstructionTokens,
    NoVisualTokens,
    /// The model has no encoder layers to score at.
    NoEncoderTensors,
    /// A dump-based run needs a manifest field the manifest lacks.
    MissingManifestField { field: &'static str },
    /// Manifest indices fall outside the dump they were paired with.
    ManifestOutOfBounds { field: &'static str, index: usize, bound: usize },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "{e}"),
            Self::Score(e) => write!(f, "{e}"),
            Self::Prune(e) => write!(f, "{e}"),
            Self::InitialCountMismatch { schedule, actual } => {
                write!(f, "schedule built for {schedule} visual tokens, input has {actual}")
            }
            Self::BoundaryBeyondModel { layer, layers } => {
                write!(f, "stage boundary at decoder layer {layer}, model has {layers}")
            }
            Self::ScheduleMissingEncoderStage => {
                write!(f, "schedule must start with an encoder-output stage")
            }
            Self::StrategyNotApplicable { strategy } => {
                write!(f, "strategy `{strategy}` is not a decoder-side pipeline strategy")
            }
            Self::NoInstructionTokens => {
                write!(f, "sequence has no instruction tokens (required by text_guided)")
            }
            Self::NoVisualTokens => write!(f, "sequence has no visual tokens"),
            Self::NoEncoderTensors => write!(f, "model produced no encoder attention tensors"),
            Self::MissingManifestField { field } => {
                write!(f, "manifest lacks field `{field}` required by this strategy")
            }
            Self::ManifestOutOfBounds { field, index, bound } => {
                write!(f, "manifest field `{field}`: index {index} out of bounds ({bound})")
            }
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<ScoreError> for PipelineError {
    fn from(e: ScoreError) -> Self {
        Self::Score(e)
    }
}

impl From<PruneError> for PipelineError {
    fn from(e: PruneError) -> Self {
        Self::Prune(e)
    }
}

/// Attention-path cost of `layers` layers over a length-`seq_len` sequence:
/// `layers * (4*L*D^2 + 2*L^2*D)`: query/key/value/output projections plus
/// the score matrix and value mix. MLP cost is reported separately.
pub fn flops_attention(seq_len: usize, hidden: usize, layers: usize) -> f64 {
    let l = seq_len as f64;
    let d = hidden as f64;
    layers as f64 * (4.0 * l * d * d + 2.0 * l * l * d)
}

/// Cost of the standard 4x-expansion MLP: `layers * 8*L*D^2`. Reported as a
/// separate line item; the headline reduction tracks the attention path.
pub fn flops_mlp(seq_len: usize, hidden: usize, layers: usize) -> f64 {
    let l = seq_len as f64;
    let d = hidden as f64;
    layers as f64 * 8.0 * l * d * d
}

/// Intersection-over-union of two index sets (given as sorted-or-not
/// slices). Two empty sets count as identical.
pub fn retention_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    inter as f64 / union as f64
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Degenerate inputs
/// (fewer than two points, or zero rank variance) report 1 when the rank
/// vectors agree and 0 otherwise.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rank correlation needs paired samples");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return if ra == rb { 1.0 } else { 0.0 };
    }
    cov / (var_a * var_b).sqrt()
}

/// 64-bit FNV-1a over a sequence's modality tags, original positions, and
/// embedding bytes; stable across runs for identical content.
pub fn sequence_digest(seq: &TokenSequence) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    let eat = |hash: &mut u64, bytes: &[u8]| {
        for &b in bytes {
            *hash = (*hash ^ b as u64).wrapping_mul(PRIME);
        }
    };
    for row in 0..seq.len() {
        eat(&mut hash, &[seq.modality[row].tag()]);
        eat(&mut hash, &(seq.orig_pos[row] as u64).to_le_bytes());
        for v in seq.embeddings.row(row) {
            eat(&mut hash, &v.to_le_bytes());
        }
    }
    format!("{hash:016x}")
}

/// One stage's outcome in a run report.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub boundary: StageBoundary,
    pub budget: usize,
    /// Grid indices (positions within the original visual grid) retained
    /// after this stage, ascending.
    pub retained: Vec<usize>,
    pub strategy: Strategy,
}

/// Full record of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub per_stage: Vec<StageRecord>,
    pub flops_baseline: f64,
    pub flops_pruned: f64,
    pub flops_mlp_baseline: f64,
    pub flops_mlp_pruned: f64,
    /// Fraction of attention-path cost saved: `1 - pruned / baseline`.
    pub reduction_pct: f64,
    pub final_sequence_digest: String,
}

impl RunReport {
    /// Plain-text CSV rendering: `# key = value` header lines, then one row
    /// per stage with the retained grid indices space-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# flops_baseline = {}\n", self.flops_baseline));
        out.push_str(&format!("# flops_pruned = {}\n", self.flops_pruned));
        out.push_str(&format!("# flops_mlp_baseline = {}\n", self.flops_mlp_baseline));
        out.push_str(&format!("# flops_mlp_pruned = {}\n", self.flops_mlp_pruned));
        out.push_str(&format!("# reduction_pct = {}\n", self.reduction_pct));
        out.push_str(&format!("# final_sequence_digest = {}\n", self.final_sequence_digest));
        out.push_str("stage,boundary,budget,retained_count,strategy,retained_positions\n");
        for (i, stage) in self.per_stage.iter().enumerate() {
            let positions: Vec<String> = stage.retained.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                stage.boundary,
                stage.budget,
                stage.retained.len(),
                stage.strategy,
                positions.join(" ")
            ));
        }
        out
    }
}

/// Run outcome: the report plus the artifacts downstream consumers read.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: RunReport,
    pub final_sequence: TokenSequence,
    /// Per stage, `(grid index, score)` pairs computed at that stage's
    /// boundary over the tokens still present there.
    pub stage_scores: Vec<Vec<(usize, f32)>>,
}

/// Pruning knobs for a run.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Share of each stage budget kept as untouched dominant tokens; the
    /// remainder becomes merged contextual tokens.
    pub dom_ratio: f32,
    pub partition: PartitionRule,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { dom_ratio: 0.875, partition: PartitionRule::ByScore }
    }
}

fn decoder_layer_of(boundary: StageBoundary) -> Option<usize> {
    match boundary {
        StageBoundary::EncoderOutput => None,
        StageBoundary::DecoderLayer(l) => Some(l),
    }
}

/// Execute the staged pipeline.
///
/// `strategy` selects the decoder-side scorer (`mean_visual_query` or
/// `text_guided`); the encoder stage always scores visually, via the
/// aggregate token when the config has one.
pub fn run_pipeline(
    model: &ToyModel,
    schedule: &PruneSchedule,
    strategy: Strategy,
    inputs: &TokenSequence,
    options: &RunOptions,
) -> PipelineResult<PipelineRun> {
    if strategy == Strategy::ClsQuery {
        return Err(PipelineError::StrategyNotApplicable { strategy });
    }
    inputs.validate_decoder_layout()?;
    let cfg = model.config();

    let input_visual_rows = inputs.visual_rows();
    let n = input_visual_rows.len();
    if n == 0 {
        return Err(PipelineError::NoVisualTokens);
    }
    if strategy == Strategy::TextGuided && inputs.last_instr_row().is_none() {
        return Err(PipelineError::NoInstructionTokens);
    }
    if schedule.initial_count != n {
        return Err(PipelineError::InitialCountMismatch {
            schedule: schedule.initial_count,
            actual: n,
        });
    }
    match schedule.stages.first() {
        Some(stage) if stage.boundary == StageBoundary::EncoderOutput => {}
        _ => return Err(PipelineError::ScheduleMissingEncoderStage),
    }
    for stage in &schedule.stages[1..] {
        match decoder_layer_of(stage.boundary) {
            Some(l) if l <= cfg.decoder_layers => {}
            Some(l) => {
                return Err(PipelineError::BoundaryBeyondModel { layer: l, layers: cfg.decoder_layers })
            }
            None => return Err(PipelineError::ScheduleMissingEncoderStage),
        }
    }

    let pre_rows: Vec<usize> =
        (0..inputs.len()).filter(|&i| inputs.modality[i] == Modality::TextPre).collect();
    let instr_rows: Vec<usize> = (0..inputs.len())
        .filter(|&i| inputs.modality[i] == Modality::TextInstr)
        .collect();
    let pre_count = pre_rows.len();
    let m = instr_rows.len();

    // Stage 1: encoder over the visual block, scored at its output.
    let encoder_input = TokenSequence::visual_block(
        inputs.embeddings.gather_rows(&input_visual_rows),
        inputs.grid_shape,
    );
    let (enc_out, enc_tensors) = model.encoder_forward(&encoder_input)?;
    let enc_tensor = enc_tensors.last().ok_or(PipelineError::NoEncoderTensors)?;
    let enc_visual_rows = enc_out.visual_rows();
    let encoder_strategy =
        if cfg.has_cls { Strategy::ClsQuery } else { Strategy::MeanVisualQuery };
    let enc_scores = match encoder_strategy {
        Strategy::ClsQuery => score_cls_query(enc_tensor, &enc_visual_rows, 0)?,
        _ => score_mean_visual_query(enc_tensor, &enc_visual_rows)?,
    };
    let enc_keys = enc_tensor.concat_keys(&enc_visual_rows)?;

    let mut per_stage = Vec::with_capacity(schedule.stages.len());
    let mut stage_scores: Vec<Vec<(usize, f32)>> = Vec::with_capacity(schedule.stages.len());
    per_stage.push(StageRecord {
        boundary: StageBoundary::EncoderOutput,
        budget: schedule.stages[0].budget,
        retained: (0..n).collect(),
        strategy: encoder_strategy,
    });
    stage_scores.push((0..n).zip(enc_scores.scores.iter().copied()).collect());

    // Project into the decoder layout: canonical positions, all visual
    // tokens present, position terms added once here.
    let projected = model.project_to_decoder(&enc_out.embeddings.gather_rows(&enc_visual_rows))?;
    let total = pre_count + n + m;
    let mut embeddings = Matrix::zeros(total, cfg.hidden_dim);
    let mut modality = Vec::with_capacity(total);
    for (dst, &src) in pre_rows.iter().enumerate() {
        embeddings.row_mut(dst).copy_from_slice(inputs.embeddings.row(src));
        modality.push(Modality::TextPre);
    }
    for g in 0..n {
        embeddings.row_mut(pre_count + g).copy_from_slice(projected.row(g));
        modality.push(Modality::Visual);
    }
    for (t, &src) in instr_rows.iter().enumerate() {
        embeddings.row_mut(pre_count + n + t).copy_from_slice(inputs.embeddings.row(src));
        modality.push(Modality::TextInstr);
    }
    let mut current = TokenSequence::new(
        embeddings,
        modality,
        (0..total).collect(),
        inputs.grid_shape,
    )?;
    model.add_positional(&mut current);

    // The second stage's budget applies at decoder entry, selected by the
    // encoder-output scores and merged with the encoder's key vectors.
    let entry_budget = schedule.stages[1].budget;
    if current.visual_rows().len() > entry_budget {
        let entry_scores = ImportanceVector::new(
            enc_scores.scores.clone(),
            current.visual_rows(),
            encoder_strategy,
        )?;
        let outcome = prune_stage_detailed(
            &current,
            &entry_scores,
            entry_budget,
            &enc_keys,
            options.dom_ratio,
            options.partition,
        )?;
        current = outcome.sequence;
    }

    let grid_of = |seq: &TokenSequence, row: usize| seq.orig_pos[row] - pre_count;
    let mut dec_layer_lengths: Vec<usize> = Vec::with_capacity(cfg.decoder_layers);
    let mut prev_layer = 0usize;

    for (idx, stage) in schedule.stages.iter().enumerate().skip(1) {
        let layer = decoder_layer_of(stage.boundary).expect("validated above");
        for _ in prev_layer..layer {
            dec_layer_lengths.push(current.len());
        }
        let (next, tensors) = model.decoder_resume(&current, prev_layer, layer)?;
        current = next;
        prev_layer = layer;
        let boundary_tensor = tensors.last().expect("strictly increasing boundaries");

        let visual_rows = current.visual_rows();
        let scores = match strategy {
            Strategy::MeanVisualQuery => score_mean_visual_query(boundary_tensor, &visual_rows)?,
            Strategy::TextGuided => {
                let instr =
                    current.last_instr_row().ok_or(PipelineError::NoInstructionTokens)?;
                score_text_guided(boundary_tensor, &visual_rows, instr)?
            }
            Strategy::ClsQuery => unreachable!("rejected above"),
        };
        stage_scores.push(
            visual_rows
                .iter()
                .zip(scores.scores.iter())
                .map(|(&row, &s)| (grid_of(&current, row), s))
                .collect(),
        );

        if visual_rows.len() > stage.budget {
            let keys = boundary_tensor.concat_keys(&visual_rows)?;
            let outcome = prune_stage_detailed(
                &current,
                &scores,
                stage.budget,
                &keys,
                options.dom_ratio,
                options.partition,
            )?;
            current = outcome.sequence;
        }
        let retained: Vec<usize> =
            current.visual_rows().iter().map(|&row| grid_of(&current, row)).collect();
        per_stage.push(StageRecord {
            boundary: stage.boundary,
            budget: stage.budget,
            retained,
            strategy: if idx == 1 { encoder_strategy } else { strategy },
        });
    }

    if prev_layer < cfg.decoder_layers {
        for _ in prev_layer..cfg.decoder_layers {
            dec_layer_lengths.push(current.len());
        }
        let (next, _) = model.decoder_resume(&current, prev_layer, cfg.decoder_layers)?;
        current = next;
    }

    // Analytic cost accounting. The encoder always sees the full visual
    // block (plus the aggregate token); only decoder lengths shrink.
    let enc_len = n + usize::from(cfg.has_cls);
    let full_len = pre_count + n + m;
    let flops_baseline = flops_attention(enc_len, cfg.hidden_dim, cfg.encoder_layers)
        + flops_attention(full_len, cfg.hidden_dim, cfg.decoder_layers);
    let flops_pruned = flops_attention(enc_len, cfg.hidden_dim, cfg.encoder_layers)
        + dec_layer_lengths
            .iter()
            .map(|&l| flops_attention(l, cfg.hidden_dim, 1))
            .sum::<f64>();
    let flops_mlp_baseline = flops_mlp(enc_len, cfg.hidden_dim, cfg.encoder_layers)
        + flops_mlp(full_len, cfg.hidden_dim, cfg.decoder_layers);
    let flops_mlp_pruned = flops_mlp(enc_len, cfg.hidden_dim, cfg.encoder_layers)
        + dec_layer_lengths.iter().map(|&l| flops_mlp(l, cfg.hidden_dim, 1)).sum::<f64>();
    let reduction_pct = 1.0 - flops_pruned / flops_baseline;

    let report = RunReport {
        per_stage,
        flops_baseline,
        flops_pruned,
        flops_mlp_baseline,
        flops_mlp_pruned,
        reduction_pct,
        final_sequence_digest: sequence_digest(&current),
    };
    Ok(PipelineRun { report, final_sequence: current, stage_scores })
}

/// Per-stage agreement between the two scoring strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareStage {
    pub boundary: StageBoundary,
    pub iou: f64,
    pub rank_correlation: f64,
}

/// Outcome of the visual-only vs text-guided controlled comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub per_stage: Vec<CompareStage>,
    pub final_iou: f64,
}

impl CompareReport {
    pub fn per_stage_iou(&self) -> Vec<f64> {
        self.per_stage.iter().map(|s| s.iou).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# final_iou = {}\n", self.final_iou));
        out.push_str("stage,boundary,iou,rank_correlation\n");
        for (i, stage) in self.per_stage.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                stage.boundary,
                stage.iou,
                stage.rank_correlation
            ));
        }
        out
    }
}

/// Run the pipeline twice (visual-only vs text-guided scoring) under the
/// same model, schedule, and inputs, and report per-stage retention overlap
/// plus rank agreement of the two score vectors over the tokens both arms
/// still hold.
pub fn compare_strategies(
    model: &ToyModel,
    schedule: &PruneSchedule,
    inputs: &TokenSequence,
    options: &RunOptions,
) -> PipelineResult<CompareReport> {
    if inputs.last_instr_row().is_none() {
        return Err(PipelineError::NoInstructionTokens);
    }
    let visual_run = run_pipeline(model, schedule, Strategy::MeanVisualQuery, inputs, options)?;
    let text_run = run_pipeline(model, schedule, Strategy::TextGuided, inputs, options)?;

    let mut per_stage = Vec::with_capacity(schedule.stages.len());
    for (i, stage) in schedule.stages.iter().enumerate() {
        let a = &visual_run.report.per_stage[i].retained;
        let b = &text_run.report.per_stage[i].retained;
        let iou = retention_iou(a, b);

        let map_a: std::collections::BTreeMap<usize, f32> =
            visual_run.stage_scores[i].iter().copied().collect();
        let map_b: std::collections::BTreeMap<usize, f32> =
            text_run.stage_scores[i].iter().copied().collect();
        let common: Vec<usize> = map_a.keys().filter(|k| map_b.contains_key(k)).copied().collect();
        let xs: Vec<f64> = common.iter().map(|g| map_a[g] as f64).collect();
        let ys: Vec<f64> = common.iter().map(|g| map_b[g] as f64).collect();
        per_stage.push(CompareStage {
            boundary: stage.boundary,
            iou,
            rank_correlation: rank_correlation(&xs, &ys),
        });
    }
    let final_iou = per_stage.last().map_or(1.0, |s| s.iou);
    Ok(CompareReport { per_stage, final_iou })
}

/// Scores plus the retained visual-list indices for a single dumped
/// attention tensor.
#[derive(Debug, Clone)]
pub struct DumpSelection {
    /// Positions within the manifest's visual list (grid indices),
    /// ascending.
    pub retained: Vec<usize>,
    pub scores: ImportanceVector,
}

/// Score a dumped attention tensor and select one stage's worth of tokens,
/// exactly as the in-pipeline stage would.
pub fn run_on_dumps(
    tensor: &AttentionTensor,
    manifest: &Manifest,
    strategy: Strategy,
    budget: usize,
    dom_ratio: f32,
) -> PipelineResult<DumpSelection> {
    if let Err(e) = manifest.validate_bounds(tensor.queries(), tensor.keys()) {
        if let crate::formats::FormatError::IndexOutOfBounds { field, index, bound } = e {
            return Err(PipelineError::ManifestOutOfBounds { field, index, bound });
        }
        return Err(PipelineError::MissingManifestField { field: "visual_indices" });
    }
    if !(dom_ratio > 0.0 && dom_ratio <= 1.0) {
        return Err(PipelineError::Prune(PruneError::InvalidDomRatio { got: dom_ratio }));
    }
    let visual = &manifest.visual_indices;
    let scores = match strategy {
        Strategy::MeanVisualQuery => score_mean_visual_query(tensor, visual)?,
        Strategy::ClsQuery => {
            let cls = manifest
                .cls_index
                .ok_or(PipelineError::MissingManifestField { field: "cls_index" })?;
            score_cls_query(tensor, visual, cls)?
        }
        Strategy::TextGuided => {
            let instr = manifest
                .instr_last_index
                .ok_or(PipelineError::MissingManifestField { field: "instr_last_index" })?;
            score_text_guided(tensor, visual, instr)?
        }
    };

    let n = scores.len();
    if budget == 0 || budget > n {
        return Err(PipelineError::Prune(PruneError::CountOutOfRange {
            what: "budget",
            got: budget,
            min: 1,
            max: n,
        }));
    }
    let k_dom = ((dom_ratio as f64 * budget as f64).ceil() as usize).clamp(1, budget);
    let k_ctx = budget - k_dom;
    let dominant = select_dominant(&scores, k_dom)?;
    let mut retained = dominant.clone();
    if k_ctx > 0 {
        let in_dom: std::collections::BTreeSet<usize> = dominant.iter().copied().collect();
        let non_dominant: Vec<usize> = (0..n).filter(|i| !in_dom.contains(i)).collect();
        let (references, _candidates) =
            partition_with_rule(&scores, &non_dominant, k_ctx, PartitionRule::ByScore)?;
        retained.extend(references);
    }
    retained.sort_unstable();
    Ok(DumpSelection { retained, scores })
}
