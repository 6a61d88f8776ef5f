//! Dominant-token selection, candidate/reference merging, and stage-budget
//! scheduling.
//!
//! Selection is exact top-k: the retention threshold is realized as the k-th
//! largest score, so the budget is always met exactly and the minimum
//! selected score is never below the maximum rejected one. Ties break toward
//! the lower original index everywhere, which keeps outputs deterministic
//! and position-stable.
//!
//! Non-dominant tokens are split into reference and candidate sets; each
//! candidate is matched to its most similar reference by key dot-product and
//! fused into it by unweighted mean, so dropped content is merged rather
//! than discarded.

use crate::linalg::Matrix;
use crate::model::{Modality, TokenSequence};
use crate::scoring::ImportanceVector;
use std::fmt;

pub type PruneResult<T> = Result<T, PruneError>;

#[derive(Debug, Clone, PartialEq)]
pub enum PruneError {
    /// `k` (or `n_refs`, or a budget) is outside its valid range.
    CountOutOfRange { what: &'static str, got: usize, min: usize, max: usize },
    /// Candidates exist but there is no reference to merge them into.
    NoReferences,
    /// Key matrix does not cover the tokens being matched.
    KeyRowsMismatch { expected: usize, got: usize },
    /// A requested budget exceeds the current visual token count.
    BudgetExceedsCount { budget: usize, count: usize },
    /// The dominant-token share must lie in `(0, 1]`.
    InvalidDomRatio { got: f32 },
    /// Final budget must be strictly below the initial count.
    BudgetNotShrinking { initial: usize, final_budget: usize },
    /// A schedule needs the encoder stage plus at least two decoder stages.
    TooFewStages { got: usize },
    /// The first boundary must be the encoder output.
    FirstStageNotEncoder,
    /// Decoder boundaries must be strictly increasing (and follow the
    /// encoder stage).
    BoundariesNotIncreasing { at: usize },
    ZeroBudget,
    /// Scores do not line up with the sequence's visual tokens.
    ScoresMisaligned { expected: usize, got: usize },
    /// A merge plan index is outside the embedding rows it applies to.
    PlanOutOfRange { index: usize, rows: usize },
}

impl fmt::Display for PruneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CountOutOfRange { what, got, min, max } => {
                write!(f, "{what} = {got} outside valid range {min}..={max}")
            }
            Self::NoReferences => write!(f, "candidates present but reference set is empty"),
            Self::KeyRowsMismatch { expected, got } => {
                write!(f, "key matrix covers {got} tokens, expected {expected}")
            }
            Self::BudgetExceedsCount { budget, count } => {
                write!(f, "budget {budget} exceeds current visual count {count}")
            }
            Self::InvalidDomRatio { got } => {
                write!(f, "dominant ratio {got} outside (0, 1]")
            }
            Self::BudgetNotShrinking { initial, final_budget } => {
                write!(f, "final budget {final_budget} must be below initial count {initial}")
            }
            Self::TooFewStages { got } => {
                write!(f, "schedule needs at least 3 stages, got {got}")
            }
            Self::FirstStageNotEncoder => {
                write!(f, "first stage boundary must be the encoder output")
            }
            Self::BoundariesNotIncreasing { at } => {
                write!(f, "stage boundaries not strictly increasing at position {at}")
            }
            Self::ZeroBudget => write!(f, "budgets must be at least 1"),
            Self::ScoresMisaligned { expected, got } => {
                write!(f, "importance vector covers {got} tokens, sequence has {expected} visual")
            }
            Self::PlanOutOfRange { index, rows } => {
                write!(f, "merge plan index {index} out of range for {rows} rows")
            }
        }
    }
}

impl std::error::Error for PruneError {}

/// Where a pruning stage ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageBoundary {
    EncoderOutput,
    /// One-based decoder layer index.
    DecoderLayer(usize),
}

impl fmt::Display for StageBoundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EncoderOutput => write!(f, "encoder"),
            Self::DecoderLayer(l) => write!(f, "decoder:{l}"),
        }
    }
}

/// How intermediate budgets interpolate between the second stage and the
/// final budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decay {
    /// Constant per-stage retention ratio.
    #[default]
    Geometric,
    Linear,
}

/// How the non-dominant set splits into references and candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionRule {
    /// References are the highest-scored non-dominant tokens.
    #[default]
    ByScore,
    /// Alternate reference/candidate along the position-sorted list.
    Alternate,
}

/// One pruning stage: where it ends and how many visual tokens survive it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub boundary: StageBoundary,
    pub budget: usize,
}

/// Ordered stage boundaries with per-stage budgets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneSchedule {
    pub stages: Vec<Stage>,
    pub final_budget: usize,
    pub initial_count: usize,
}

impl PruneSchedule {
    /// Budgets in stage order.
    pub fn budgets(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.budget).collect()
    }

    /// Schedule that keeps every token at every stage. Useful as a control
    /// arm: the pipeline under it must reproduce the unpruned forward.
    pub fn identity(initial_count: usize, boundaries: &[StageBoundary]) -> PruneResult<Self> {
        validate_boundaries(boundaries)?;
        if initial_count == 0 {
            return Err(PruneError::ZeroBudget);
        }
        let stages =
            boundaries.iter().map(|&boundary| Stage { boundary, budget: initial_count }).collect();
        Ok(Self { stages, final_budget: initial_count, initial_count })
    }
}

fn validate_boundaries(boundaries: &[StageBoundary]) -> PruneResult<()> {
    if boundaries.len() < 3 {
        return Err(PruneError::TooFewStages { got: boundaries.len() });
    }
    if boundaries[0] != StageBoundary::EncoderOutput {
        return Err(PruneError::FirstStageNotEncoder);
    }
    let mut prev: Option<usize> = None;
    for (i, b) in boundaries.iter().enumerate().skip(1) {
        match b {
            StageBoundary::EncoderOutput => {
                return Err(PruneError::BoundariesNotIncreasing { at: i });
            }
            StageBoundary::DecoderLayer(l) => {
                if *l == 0 || prev.is_some_and(|p| *l <= p) {
                    return Err(PruneError::BoundariesNotIncreasing { at: i });
                }
                prev = Some(*l);
            }
        }
    }
    Ok(())
}

/// Build the stage budgets for a shrinking schedule.
///
/// The first stage retains everything. The second stage's budget is 1.5x the
/// final budget (clamped to the initial count); the remaining stages step
/// down with a constant retention ratio (or linearly, under
/// [`Decay::Linear`]), landing exactly on the final budget.
pub fn build_schedule(
    initial_count: usize,
    final_budget: usize,
    boundaries: &[StageBoundary],
) -> PruneResult<PruneSchedule> {
    build_schedule_with_decay(initial_count, final_budget, boundaries, Decay::Geometric)
}

pub fn build_schedule_with_decay(
    initial_count: usize,
    final_budget: usize,
    boundaries: &[StageBoundary],
    decay: Decay,
) -> PruneResult<PruneSchedule> {
    validate_boundaries(boundaries)?;
    if final_budget == 0 {
        return Err(PruneError::ZeroBudget);
    }
    if final_budget >= initial_count {
        return Err(PruneError::BudgetNotShrinking { initial: initial_count, final_budget });
    }

    let n = boundaries.len();
    let b2 = ((1.5 * final_budget as f64).ceil() as usize).min(initial_count);
    let mut budgets = Vec::with_capacity(n);
    budgets.push(initial_count);
    budgets.push(b2);
    let steps = (n - 2) as f64;
    for j in 2..n - 1 {
        let t = (j - 1) as f64;
        let raw = match decay {
            Decay::Geometric => {
                let ratio = (final_budget as f64 / b2 as f64).powf(1.0 / steps);
                b2 as f64 * ratio.powf(t)
            }
            Decay::Linear => b2 as f64 + (final_budget as f64 - b2 as f64) * t / steps,
        };
        let prev = budgets[j - 1];
        budgets.push((raw.ceil() as usize).min(prev).max(final_budget));
    }
    budgets.push(final_budget);

    let stages = boundaries
        .iter()
        .zip(&budgets)
        .map(|(&boundary, &budget)| Stage { boundary, budget })
        .collect();
    Ok(PruneSchedule { stages, final_budget, initial_count })
}

/// Candidate/reference partition of the current visual tokens plus the
/// candidate-to-reference assignments. All indices address positions in the
/// importance vector (equivalently, rows of the visual embedding block).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    pub dominant: Vec<usize>,
    pub references: Vec<usize>,
    pub candidates: Vec<usize>,
    /// `(candidate, reference)` pairs, sorted by candidate.
    pub assignment: Vec<(usize, usize)>,
}

impl MergePlan {
    /// Kept token indices (dominant plus references), ascending.
    pub fn retained(&self) -> Vec<usize> {
        let mut out: Vec<usize> =
            self.dominant.iter().chain(&self.references).copied().collect();
        out.sort_unstable();
        out
    }

    /// Cluster size for each reference: itself plus assigned candidates.
    pub fn cluster_sizes(&self) -> Vec<(usize, usize)> {
        self.references
            .iter()
            .map(|&r| (r, 1 + self.assignment.iter().filter(|(_, ar)| *ar == r).count()))
            .collect()
    }
}

/// Indices ordered by score descending, ties toward the lower index.
fn rank_by_score(scores: &[f32], pool: &[usize]) -> Vec<usize> {
    let mut ranked = pool.to_vec();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranked
}

/// Top-k selection. Returns exactly `k` indices into the score vector,
/// sorted by original position; every selected score is at least every
/// rejected score.
pub fn select_dominant(scores: &ImportanceVector, k: usize) -> PruneResult<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(PruneError::CountOutOfRange { what: "k", got: k, min: 1, max: n });
    }
    let pool: Vec<usize> = (0..n).collect();
    let mut selected: Vec<usize> = rank_by_score(&scores.scores, &pool)[..k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Split the non-dominant tokens into `n_refs` references and the remaining
/// candidates, both sorted by original position.
pub fn partition_non_dominant(
    scores: &ImportanceVector,
    non_dominant: &[usize],
    n_refs: usize,
) -> PruneResult<(Vec<usize>, Vec<usize>)> {
    partition_with_rule(scores, non_dominant, n_refs, PartitionRule::ByScore)
}

pub fn partition_with_rule(
    scores: &ImportanceVector,
    non_dominant: &[usize],
    n_refs: usize,
    rule: PartitionRule,
) -> PruneResult<(Vec<usize>, Vec<usize>)> {
    if n_refs == 0 || n_refs > non_dominant.len() {
        return Err(PruneError::CountOutOfRange {
            what: "n_refs",
            got: n_refs,
            min: 1,
            max: non_dominant.len(),
        });
    }
    let mut references: Vec<usize>;
    match rule {
        PartitionRule::ByScore => {
            references = rank_by_score(&scores.scores, non_dominant)[..n_refs].to_vec();
        }
        PartitionRule::Alternate => {
            let mut sorted = non_dominant.to_vec();
            sorted.sort_unstable();
            references = sorted.iter().copied().step_by(2).take(n_refs).collect();
            if references.len() < n_refs {
                let have: std::collections::BTreeSet<usize> = references.iter().copied().collect();
                references.extend(sorted.iter().copied().filter(|i| !have.contains(i)));
                references.truncate(n_refs);
            }
        }
    }
    references.sort_unstable();
    let is_ref: std::collections::BTreeSet<usize> = references.iter().copied().collect();
    let mut candidates: Vec<usize> =
        non_dominant.iter().copied().filter(|i| !is_ref.contains(i)).collect();
    candidates.sort_unstable();
    Ok((references, candidates))
}

/// Assign each candidate to the reference with the highest key dot-product;
/// ties go to the lower reference index.
pub fn match_candidates(
    references: &[usize],
    candidates: &[usize],
    keys: &Matrix,
) -> PruneResult<Vec<(usize, usize)>> {
    if references.is_empty() {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        return Err(PruneError::NoReferences);
    }
    for &i in references.iter().chain(candidates) {
        if i >= keys.rows() {
            return Err(PruneError::KeyRowsMismatch { expected: i + 1, got: keys.rows() });
        }
    }
    let mut assignment = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let c_key = keys.row(c);
        let mut best_ref = references[0];
        let mut best_dot = f32::NEG_INFINITY;
        for &r in references {
            let dot: f32 = c_key.iter().zip(keys.row(r)).map(|(a, b)| a * b).sum();
            if dot > best_dot {
                best_dot = dot;
                best_ref = r;
            }
        }
        assignment.push((c, best_ref));
    }
    Ok(assignment)
}

/// Merge candidates into their references by unweighted mean.
///
/// Returns the surviving token embeddings (dominant unchanged, each
/// reference replaced by the mean of itself and its assigned candidates)
/// ordered by original position, plus the surviving row indices.
pub fn fuse(plan: &MergePlan, embeddings: &Matrix) -> PruneResult<(Matrix, Vec<usize>)> {
    let (merged, kept, _) = fuse_weighted(plan, embeddings, None)?;
    Ok((merged, kept))
}

/// Size-aware variant of [`fuse`]: when `sizes` is given, each token is
/// weighted by its accumulated cluster size and the output carries the new
/// sizes, so repeated merging stays a true running mean.
pub fn fuse_weighted(
    plan: &MergePlan,
    embeddings: &Matrix,
    sizes: Option<&[f32]>,
) -> PruneResult<(Matrix, Vec<usize>, Vec<f32>)> {
    let rows = embeddings.rows();
    for &i in plan.dominant.iter().chain(&plan.references).chain(&plan.candidates) {
        if i >= rows {
            return Err(PruneError::PlanOutOfRange { index: i, rows });
        }
    }
    if let Some(s) = sizes {
        if s.len() != rows {
            return Err(PruneError::KeyRowsMismatch { expected: rows, got: s.len() });
        }
    }
    let weight_of = |i: usize| sizes.map_or(1.0, |s| s[i]);

    let kept = plan.retained();
    let mut merged = Matrix::zeros(kept.len(), embeddings.cols());
    let mut out_sizes = Vec::with_capacity(kept.len());
    let is_ref: std::collections::BTreeSet<usize> = plan.references.iter().copied().collect();

    for (dst, &idx) in kept.iter().enumerate() {
        if !is_ref.contains(&idx) {
            merged.row_mut(dst).copy_from_slice(embeddings.row(idx));
            out_sizes.push(weight_of(idx));
            continue;
        }
        let mut acc: Vec<f32> = embeddings.row(idx).iter().map(|&v| v * weight_of(idx)).collect();
        let mut total = weight_of(idx);
        for &(c, r) in &plan.assignment {
            if r == idx {
                for (a, &v) in acc.iter_mut().zip(embeddings.row(c)) {
                    *a += v * weight_of(c);
                }
                total += weight_of(c);
            }
        }
        for a in &mut acc {
            *a /= total;
        }
        merged.row_mut(dst).copy_from_slice(&acc);
        out_sizes.push(total);
    }
    Ok((merged, kept, out_sizes))
}

/// Outcome of one stage prune: the surviving sequence plus the plan that
/// produced it.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub sequence: TokenSequence,
    pub plan: MergePlan,
}

/// Reduce the sequence's visual tokens to exactly `budget`: the top
/// `ceil(dom_ratio * budget)` by score survive unchanged, the rest of the
/// budget is filled with merged contextual tokens. Non-visual tokens pass
/// through untouched and in order.
pub fn prune_stage(
    seq: &TokenSequence,
    scores: &ImportanceVector,
    budget: usize,
    keys: &Matrix,
    dom_ratio: f32,
) -> PruneResult<TokenSequence> {
    Ok(prune_stage_detailed(seq, scores, budget, keys, dom_ratio, PartitionRule::ByScore)?.sequence)
}

pub fn prune_stage_detailed(
    seq: &TokenSequence,
    scores: &ImportanceVector,
    budget: usize,
    keys: &Matrix,
    dom_ratio: f32,
    rule: PartitionRule,
) -> PruneResult<StageOutcome> {
    if !(dom_ratio > 0.0 && dom_ratio <= 1.0) {
        return Err(PruneError::InvalidDomRatio { got: dom_ratio });
    }
    let visual_rows = seq.visual_rows();
    let n = visual_rows.len();
    if scores.len() != n || scores.visual_indices != visual_rows {
        return Err(PruneError::ScoresMisaligned { expected: n, got: scores.len() });
    }
    if budget == 0 {
        return Err(PruneError::ZeroBudget);
    }
    if budget > n {
        return Err(PruneError::BudgetExceedsCount { budget, count: n });
    }
    if keys.rows() != n {
        return Err(PruneError::KeyRowsMismatch { expected: n, got: keys.rows() });
    }

    let k_dom = ((dom_ratio as f64 * budget as f64).ceil() as usize).clamp(1, budget);
    let k_ctx = budget - k_dom;

    let dominant = select_dominant(scores, k_dom)?;
    let in_dom: std::collections::BTreeSet<usize> = dominant.iter().copied().collect();
    let non_dominant: Vec<usize> = (0..n).filter(|i| !in_dom.contains(i)).collect();

    let (references, candidates, assignment) = if k_ctx == 0 {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        let (references, candidates) = partition_with_rule(scores, &non_dominant, k_ctx, rule)?;
        let assignment = match_candidates(&references, &candidates, keys)?;
        (references, candidates, assignment)
    };
    let plan = MergePlan { dominant, references, candidates, assignment };

    let visual_embeddings = seq.embeddings.gather_rows(&visual_rows);
    let (merged, kept, _) = fuse_weighted(&plan, &visual_embeddings, None)?;

    // Rebuild the sequence: copy non-visual rows as-is, keep surviving
    // visual rows (fused values for references), preserve original order.
    let mut fused_by_visual: std::collections::BTreeMap<usize, usize> = Default::default();
    for (out_row, &v) in kept.iter().enumerate() {
        fused_by_visual.insert(v, out_row);
    }

    let out_len = seq.len() - n + budget;
    let mut embeddings = Matrix::zeros(out_len, seq.hidden_dim());
    let mut modality = Vec::with_capacity(out_len);
    let mut orig_pos = Vec::with_capacity(out_len);
    let mut visual_rank = 0usize;
    let mut dst = 0usize;
    for row in 0..seq.len() {
        if seq.modality[row] == Modality::Visual {
            let rank = visual_rank;
            visual_rank += 1;
            match fused_by_visual.get(&rank) {
                Some(&out_row) => {
                    embeddings.row_mut(dst).copy_from_slice(merged.row(out_row));
                }
                None => continue,
            }
        } else {
            embeddings.row_mut(dst).copy_from_slice(seq.embeddings.row(row));
        }
        modality.push(seq.modality[row]);
        orig_pos.push(seq.orig_pos[row]);
        dst += 1;
    }
    debug_assert_eq!(dst, out_len);

    let sequence = TokenSequence {
        embeddings,
        modality,
        orig_pos,
        grid_shape: seq.grid_shape,
    };
    Ok(StageOutcome { sequence, plan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rand_matrix, Rng};
    use crate::scoring::Strategy;
    use proptest::prelude::*;

    fn iv(scores: Vec<f32>) -> ImportanceVector {
        let n = scores.len();
        ImportanceVector::new(scores, (0..n).collect(), Strategy::MeanVisualQuery).unwrap()
    }

    fn iv_at(scores: Vec<f32>, indices: Vec<usize>) -> ImportanceVector {
        ImportanceVector::new(scores, indices, Strategy::MeanVisualQuery).unwrap()
    }

    /// Full-sort reference for top-k selection.
    fn select_oracle(scores: &[f32], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut out = order[..k].to_vec();
        out.sort_unstable();
        out
    }

    #[test]
    fn select_hand_case() {
        let s = iv(vec![0.1, 0.4, 0.2, 0.3]);
        assert_eq!(select_dominant(&s, 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn select_tie_breaks_low_index() {
        let s = iv(vec![0.5, 0.5, 0.0]);
        assert_eq!(select_dominant(&s, 1).unwrap(), vec![0]);
    }

    #[test]
    fn select_full_is_identity() {
        let s = iv(vec![0.3, 0.1, 0.2]);
        assert_eq!(select_dominant(&s, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn select_rejects_bad_k() {
        let s = iv(vec![0.3, 0.1]);
        assert!(select_dominant(&s, 0).is_err());
        assert!(select_dominant(&s, 3).is_err());
    }

    #[test]
    fn select_threshold_semantics() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let n = 2 + rng.next_below(20);
            let scores: Vec<f32> = (0..n).map(|_| rng.next_unit()).collect();
            let k = 1 + rng.next_below(n);
            let sel = select_dominant(&iv(scores.clone()), k).unwrap();
            assert_eq!(sel, select_oracle(&scores, k));
            let chosen: std::collections::BTreeSet<usize> = sel.iter().copied().collect();
            let min_sel =
                sel.iter().map(|&i| scores[i]).fold(f32::INFINITY, f32::min);
            let max_rej = (0..n)
                .filter(|i| !chosen.contains(i))
                .map(|i| scores[i])
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(sel.len() == n || min_sel >= max_rej);
        }
    }

    #[test]
    fn partition_hand_case() {
        let s = iv(vec![0.4, 0.3, 0.2, 0.1]);
        let (refs, cands) = partition_non_dominant(&s, &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(refs, vec![0, 1]);
        assert_eq!(cands, vec![2, 3]);
    }

    #[test]
    fn partition_all_refs_leaves_no_candidates() {
        let s = iv(vec![0.4, 0.3, 0.2]);
        let (refs, cands) = partition_non_dominant(&s, &[0, 1, 2], 3).unwrap();
        assert_eq!(refs, vec![0, 1, 2]);
        assert!(cands.is_empty());
    }

    #[test]
    fn partition_ties_take_low_index() {
        let s = iv(vec![0.2, 0.2, 0.2, 0.2]);
        let (refs, _) = partition_non_dominant(&s, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(refs, vec![0]);
    }

    #[test]
    fn partition_rejects_bad_ref_count() {
        let s = iv(vec![0.2, 0.1]);
        assert!(partition_non_dominant(&s, &[0, 1], 0).is_err());
        assert!(partition_non_dominant(&s, &[0, 1], 3).is_err());
    }

    #[test]
    fn partition_alternate_takes_every_other() {
        let s = iv(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let (refs, cands) =
            partition_with_rule(&s, &[0, 1, 2, 3, 4], 3, PartitionRule::Alternate).unwrap();
        assert_eq!(refs, vec![0, 2, 4]);
        assert_eq!(cands, vec![1, 3]);
    }

    #[test]
    fn match_prefers_higher_dot() {
        let keys = Matrix::from_rows(&[&[0.9, 0.1], &[1.0, 0.0], &[0.0, 1.0]]);
        let assignment = match_candidates(&[1, 2], &[0], &keys).unwrap();
        assert_eq!(assignment, vec![(0, 1)]);
    }

    #[test]
    fn match_identical_key_selects_itself() {
        let keys = Matrix::from_rows(&[&[0.3, 0.7], &[0.3, 0.7], &[-0.5, 0.2]]);
        let assignment = match_candidates(&[1, 2], &[0], &keys).unwrap();
        assert_eq!(assignment, vec![(0, 1)]);
    }

    #[test]
    fn match_single_reference_takes_all() {
        let mut rng = Rng::new(9);
        let keys = rand_matrix(&mut rng, 5, 4, 1.0);
        let assignment = match_candidates(&[2], &[0, 1, 3, 4], &keys).unwrap();
        assert!(assignment.iter().all(|&(_, r)| r == 2));
    }

    #[test]
    fn match_rejects_empty_references() {
        let keys = Matrix::zeros(2, 2);
        assert_eq!(match_candidates(&[], &[0, 1], &keys).unwrap_err(), PruneError::NoReferences);
    }

    /// Exhaustive argmax reference for small instances.
    fn match_oracle(refs: &[usize], cands: &[usize], keys: &Matrix) -> Vec<(usize, usize)> {
        cands
            .iter()
            .map(|&c| {
                let mut best = (f32::NEG_INFINITY, usize::MAX);
                for &r in refs {
                    let dot: f32 =
                        keys.row(c).iter().zip(keys.row(r)).map(|(a, b)| a * b).sum();
                    if dot > best.0 || (dot == best.0 && r < best.1) {
                        best = (dot, r);
                    }
                }
                (c, best.1)
            })
            .collect()
    }

    #[test]
    fn match_equals_exhaustive_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let n = 2 + rng.next_below(11);
            let keys = rand_matrix(&mut rng, n, 6, 1.0);
            let n_refs = 1 + rng.next_below(n - 1);
            let refs: Vec<usize> = (0..n_refs).collect();
            let cands: Vec<usize> = (n_refs..n).collect();
            assert_eq!(
                match_candidates(&refs, &cands, &keys).unwrap(),
                match_oracle(&refs, &cands, &keys)
            );
        }
    }

    #[test]
    fn fuse_without_candidates_is_identity() {
        let emb = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let plan = MergePlan {
            dominant: vec![0],
            references: vec![1, 2],
            candidates: vec![],
            assignment: vec![],
        };
        let (merged, kept) = fuse(&plan, &emb).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(merged.data(), emb.data());
    }

    #[test]
    fn fuse_two_point_mean() {
        let emb = Matrix::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]);
        let plan = MergePlan {
            dominant: vec![],
            references: vec![0],
            candidates: vec![1],
            assignment: vec![(1, 0)],
        };
        let (merged, kept) = fuse(&plan, &emb).unwrap();
        assert_eq!(kept, vec![0]);
        assert_eq!(merged.data(), &[2.0, 2.0]);
    }

    #[test]
    fn fuse_weighted_is_a_running_mean() {
        // Merging {a, b} then {ab, c} with sizes equals the flat mean of all
        // three, which unweighted repeated fusion would not give.
        let emb = Matrix::from_rows(&[&[0.0, 0.0], &[6.0, 6.0], &[3.0, 0.0]]);
        let first = MergePlan {
            dominant: vec![2],
            references: vec![0],
            candidates: vec![1],
            assignment: vec![(1, 0)],
        };
        let (step1, kept1, sizes1) = fuse_weighted(&first, &emb, None).unwrap();
        assert_eq!(kept1, vec![0, 2]);
        assert_eq!(sizes1, vec![2.0, 1.0]);
        assert_eq!(step1.row(0), &[3.0, 3.0]);

        let second = MergePlan {
            dominant: vec![],
            references: vec![0],
            candidates: vec![1],
            assignment: vec![(1, 0)],
        };
        let (step2, _, sizes2) = fuse_weighted(&second, &step1, Some(&sizes1)).unwrap();
        assert_eq!(sizes2, vec![3.0]);
        assert_eq!(step2.row(0), &[3.0, 2.0]);
    }

    #[test]
    fn fuse_conserves_non_dominant_mass() {
        let mut rng = Rng::new(33);
        for _ in 0..100 {
            let n = 4 + rng.next_below(16);
            let emb = rand_matrix(&mut rng, n, 8, 1.0);
            let keys = rand_matrix(&mut rng, n, 8, 1.0);
            let n_dom = rng.next_below(n / 2);
            let pool: Vec<usize> = (0..n).collect();
            let dominant: Vec<usize> = pool[..n_dom].to_vec();
            let non_dominant: Vec<usize> = pool[n_dom..].to_vec();
            let n_refs = 1 + rng.next_below(non_dominant.len());
            let scores: Vec<f32> = (0..n).map(|_| rng.next_unit()).collect();
            let (references, candidates) =
                partition_non_dominant(&iv(scores), &non_dominant, n_refs).unwrap();
            let assignment = match_candidates(&references, &candidates, &keys).unwrap();
            let plan = MergePlan { dominant, references, candidates, assignment };
            let (merged, kept, _) = fuse_weighted(&plan, &emb, None).unwrap();

            let mut lhs = [0.0f64; 8];
            for (r, size) in plan.cluster_sizes() {
                let out_row = kept.iter().position(|&k| k == r).unwrap();
                for (acc, &v) in lhs.iter_mut().zip(merged.row(out_row)) {
                    *acc += size as f64 * v as f64;
                }
            }
            let mut rhs = vec![0.0f64; 8];
            for &i in &non_dominant {
                for (acc, &v) in rhs.iter_mut().zip(emb.row(i)) {
                    *acc += v as f64;
                }
            }
            for (a, b) in lhs.iter().zip(&rhs) {
                let tol = 1e-5 * b.abs().max(1.0);
                assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn schedule_reference_budgets() {
        let boundaries = [
            StageBoundary::EncoderOutput,
            StageBoundary::DecoderLayer(2),
            StageBoundary::DecoderLayer(4),
            StageBoundary::DecoderLayer(6),
            StageBoundary::DecoderLayer(8),
        ];
        let s = build_schedule(576, 192, &boundaries).unwrap();
        assert_eq!(s.budgets(), vec![576, 288, 252, 220, 192]);
        let s = build_schedule(576, 64, &boundaries).unwrap();
        assert_eq!(s.budgets(), vec![576, 96, 84, 74, 64]);
    }

    #[test]
    fn schedule_clamps_when_barely_shrinking() {
        let boundaries = [
            StageBoundary::EncoderOutput,
            StageBoundary::DecoderLayer(1),
            StageBoundary::DecoderLayer(2),
            StageBoundary::DecoderLayer(3),
        ];
        let s = build_schedule(100, 99, &boundaries).unwrap();
        let budgets = s.budgets();
        assert_eq!(budgets[0], 100);
        assert_eq!(*budgets.last().unwrap(), 99);
        for w in budgets.windows(2) {
            assert!(w[0] >= w[1]);
            assert!(w[1] <= 100);
        }
    }

    #[test]
    fn schedule_linear_decay_steps_evenly() {
        let boundaries = [
            StageBoundary::EncoderOutput,
            StageBoundary::DecoderLayer(2),
            StageBoundary::DecoderLayer(4),
            StageBoundary::DecoderLayer(6),
            StageBoundary::DecoderLayer(8),
        ];
        let s = build_schedule_with_decay(576, 192, &boundaries, Decay::Linear).unwrap();
        assert_eq!(s.budgets(), vec![576, 288, 256, 224, 192]);
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        let boundaries = [
            StageBoundary::EncoderOutput,
            StageBoundary::DecoderLayer(2),
            StageBoundary::DecoderLayer(4),
        ];
        assert!(matches!(
            build_schedule(100, 100, &boundaries),
            Err(PruneError::BudgetNotShrinking { .. })
        ));
        assert!(matches!(
            build_schedule(100, 50, &boundaries[..2]),
            Err(PruneError::TooFewStages { .. })
        ));
        let unordered = [
            StageBoundary::EncoderOutput,
            StageBoundary::DecoderLayer(4),
            StageBoundary::DecoderLayer(2),
        ];
        assert!(matches!(
            build_schedule(100, 50, &unordered),
            Err(PruneError::BoundariesNotIncreasing { .. })
        ));
        let no_encoder = [
            StageBoundary::DecoderLayer(1),
            StageBoundary::DecoderLayer(2),
            StageBoundary::DecoderLayer(3),
        ];
        assert!(matches!(
            build_schedule(100, 50, &no_encoder),
            Err(PruneError::FirstStageNotEncoder)
        ));
    }

    fn visual_seq(seed: u64, n: usize, d: usize) -> TokenSequence {
        let mut rng = Rng::new(seed);
        TokenSequence::visual_block(rand_matrix(&mut rng, n, d, 1.0), None)
    }

    #[test]
    fn prune_stage_pure_topk_when_ratio_is_one() {
        let seq = visual_seq(3, 10, 4);
        let scores = iv((0..10).map(|i| i as f32 / 10.0).collect());
        let keys = Matrix::zeros(10, 4);
        let out = prune_stage(&seq, &scores, 4, &keys, 1.0).unwrap();
        assert_eq!(out.visual_rows().len(), 4);
        assert_eq!(out.orig_pos, vec![6, 7, 8, 9]);
        for (i, &p) in out.orig_pos.iter().enumerate() {
            assert_eq!(out.embeddings.row(i), seq.embeddings.row(p));
        }
    }

    #[test]
    fn prune_stage_full_budget_is_identity() {
        let seq = visual_seq(5, 8, 4);
        let mut rng = Rng::new(6);
        let scores = iv((0..8).map(|_| rng.next_unit()).collect());
        let keys = rand_matrix(&mut rng, 8, 4, 1.0);
        let out = prune_stage(&seq, &scores, 8, &keys, 0.875).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn prune_stage_matches_compositional_oracle() {
        let mut rng = Rng::new(7);
        let seq = visual_seq(8, 24, 6);
        let scores = iv((0..24).map(|_| rng.next_unit()).collect());
        let keys = rand_matrix(&mut rng, 24, 6, 1.0);
        let outcome =
            prune_stage_detailed(&seq, &scores, 8, &keys, 0.875, PartitionRule::ByScore).unwrap();

        // Compose the three sub-operations by hand: 7 dominant + 1 reference.
        let dominant = select_dominant(&scores, 7).unwrap();
        let in_dom: std::collections::BTreeSet<usize> = dominant.iter().copied().collect();
        let non_dom: Vec<usize> = (0..24).filter(|i| !in_dom.contains(i)).collect();
        let (refs, cands) = partition_non_dominant(&scores, &non_dom, 1).unwrap();
        let assignment = match_candidates(&refs, &cands, &keys).unwrap();
        let plan = MergePlan { dominant, references: refs, candidates: cands, assignment };
        let (merged, kept) = fuse(&plan, &seq.embeddings).unwrap();

        assert_eq!(outcome.plan, plan);
        assert_eq!(outcome.sequence.orig_pos, kept);
        assert_eq!(outcome.sequence.embeddings.data(), merged.data());
        assert_eq!(outcome.sequence.visual_rows().len(), 8);
    }

    #[test]
    fn prune_stage_rejects_over_budget() {
        let seq = visual_seq(9, 4, 4);
        let scores = iv(vec![0.1, 0.2, 0.3, 0.4]);
        let keys = Matrix::zeros(4, 4);
        assert!(matches!(
            prune_stage(&seq, &scores, 5, &keys, 0.875),
            Err(PruneError::BudgetExceedsCount { .. })
        ));
    }

    #[test]
    fn prune_stage_keeps_non_visual_tokens() {
        let mut rng = Rng::new(10);
        let n = 2 + 6 + 2;
        let embeddings = rand_matrix(&mut rng, n, 4, 1.0);
        let mut modality = vec![Modality::TextPre; 2];
        modality.extend(std::iter::repeat_n(Modality::Visual, 6));
        modality.extend(std::iter::repeat_n(Modality::TextInstr, 2));
        let seq = TokenSequence::new(embeddings, modality, (0..n).collect(), None).unwrap();
        let scores = iv_at(
            (0..6).map(|_| rng.next_unit()).collect(),
            seq.visual_rows(),
        );
        let keys = rand_matrix(&mut rng, 6, 4, 1.0);
        let out = prune_stage(&seq, &scores, 3, &keys, 0.875).unwrap();
        assert_eq!(out.len(), 2 + 3 + 2);
        assert_eq!(out.modality[0], Modality::TextPre);
        assert_eq!(out.modality[1], Modality::TextPre);
        assert_eq!(out.modality[5], Modality::TextInstr);
        assert_eq!(out.embeddings.row(0), seq.embeddings.row(0));
        assert_eq!(out.embeddings.row(5 + 1), seq.embeddings.row(9));
        for w in out.orig_pos.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    proptest! {
        #[test]
        fn prop_select_matches_oracle(seed in 0u64..500, n in 1usize..40) {
            let mut rng = Rng::new(seed);
            let scores: Vec<f32> = (0..n).map(|_| rng.next_unit()).collect();
            let k = 1 + rng.next_below(n);
            prop_assert_eq!(select_dominant(&iv(scores.clone()), k).unwrap(), select_oracle(&scores, k));
        }

        #[test]
        fn prop_selection_scale_invariant(seed in 0u64..500, n in 2usize..24, scale in 0.01f32..100.0) {
            let mut rng = Rng::new(seed);
            let scores: Vec<f32> = (0..n).map(|_| rng.next_unit()).collect();
            let scaled: Vec<f32> = scores.iter().map(|s| s * scale).collect();
            let k = 1 + rng.next_below(n);
            prop_assert_eq!(
                select_dominant(&iv(scores.clone()), k).unwrap(),
                select_dominant(&iv(scaled.clone()), k).unwrap()
            );
            if n >= 2 {
                let pool: Vec<usize> = (0..n).collect();
                let n_refs = 1 + rng.next_below(n - 1);
                prop_assert_eq!(
                    partition_non_dominant(&iv(scores), &pool, n_refs).unwrap(),
                    partition_non_dominant(&iv(scaled), &pool, n_refs).unwrap()
                );
            }
        }

        #[test]
        fn prop_prune_stage_hits_budget_exactly(seed in 0u64..300) {
            let mut rng = Rng::new(seed);
            let n = 4 + rng.next_below(20);
            let seq = visual_seq(seed.wrapping_add(1), n, 6);
            let scores = iv((0..n).map(|_| rng.next_unit()).collect());
            let keys = rand_matrix(&mut rng, n, 6, 1.0);
            let budget = 1 + rng.next_below(n);
            let out = prune_stage(&seq, &scores, budget, &keys, 0.875).unwrap();
            prop_assert_eq!(out.visual_rows().len(), budget);
            for w in out.orig_pos.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
        }
    }
}
