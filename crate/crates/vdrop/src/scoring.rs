//! Importance scoring for visual tokens.
//!
//! Scores are read straight out of attention tensors. The visual-only
//! strategies measure how much attention each visual key receives from
//! visual queries (or from a dedicated aggregate token); the text-guided
//! baseline reads the final instruction token's attention row instead.
//!
//! Attention weights are averaged across heads first, then restricted to the
//! visual key columns of the full-sequence softmax. Restriction is not
//! re-normalized, so a score vector sums to at most one; an optional
//! re-normalization is available for ablations.

use crate::model::AttentionTensor;
use std::fmt;
use std::str::FromStr;

pub type ScoreResult<T> = Result<T, ScoreError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScoreError {
    EmptyVisualSet,
    /// A visual index points outside the tensor's key columns.
    KeyOutOfRange { index: usize, keys: usize },
    /// A query row (visual, aggregate, or instruction) is out of range.
    QueryOutOfRange { what: &'static str, index: usize, queries: usize },
    NoHeads,
    /// Scores and index list disagree in length.
    LengthMismatch { scores: usize, indices: usize },
    NonFiniteScore { index: usize },
    NegativeScore { index: usize },
    UnknownStrategy { name: String },
}

impl fmt::Display for ScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyVisualSet => write!(f, "visual index set is empty"),
            Self::KeyOutOfRange { index, keys } => {
                write!(f, "visual key index {index} out of range for {keys} keys")
            }
            Self::QueryOutOfRange { what, index, queries } => {
                write!(f, "{what} query row {index} out of range for {queries} queries")
            }
            Self::NoHeads => write!(f, "attention tensor has no heads"),
            Self::LengthMismatch { scores, indices } => {
                write!(f, "score/index length mismatch: {scores} scores, {indices} indices")
            }
            Self::NonFiniteScore { index } => write!(f, "non-finite score at index {index}"),
            Self::NegativeScore { index } => write!(f, "negative score at index {index}"),
            Self::UnknownStrategy { name } => write!(f, "unknown strategy `{name}`"),
        }
    }
}

impl std::error::Error for ScoreError {}

/// Which attention rows drive the importance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Aggregate-token query row (encoder context).
    ClsQuery,
    /// Mean over all visual query rows.
    MeanVisualQuery,
    /// Final instruction token's query row (text-guided baseline).
    TextGuided,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClsQuery => "cls_query",
            Self::MeanVisualQuery => "mean_visual_query",
            Self::TextGuided => "text_guided",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls_query" => Ok(Self::ClsQuery),
            "mean_visual_query" => Ok(Self::MeanVisualQuery),
            "text_guided" => Ok(Self::TextGuided),
            other => Err(ScoreError::UnknownStrategy { name: other.to_string() }),
        }
    }
}

/// Per-visual-token importance scores, aligned with `visual_indices`
/// (positions of the scored tokens within their sequence, ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f32>,
    pub visual_indices: Vec<usize>,
    pub strategy: Strategy,
}

impl ImportanceVector {
    pub fn new(
        scores: Vec<f32>,
        visual_indices: Vec<usize>,
        strategy: Strategy,
    ) -> ScoreResult<Self> {
        if scores.len() != visual_indices.len() {
            return Err(ScoreError::LengthMismatch {
                scores: scores.len(),
                indices: visual_indices.len(),
            });
        }
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(ScoreError::NonFiniteScore { index: i });
            }
            if s < 0.0 {
                return Err(ScoreError::NegativeScore { index: i });
            }
        }
        Ok(Self { scores, visual_indices, strategy })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Rescale scores to sum to one. Off by default everywhere; selection is
    /// rank-based and unaffected, so this only matters for exported values.
    pub fn renormalize(&mut self) {
        let sum: f32 = self.scores.iter().sum();
        if sum > 0.0 {
            for s in &mut self.scores {
                *s /= sum;
            }
        }
    }
}

fn check_visual_indices(attn: &AttentionTensor, visual_indices: &[usize]) -> ScoreResult<()> {
    if attn.heads == 0 || attn.weights.is_empty() {
        return Err(ScoreError::NoHeads);
    }
    if visual_indices.is_empty() {
        return Err(ScoreError::EmptyVisualSet);
    }
    let keys = attn.keys();
    for &i in visual_indices {
        if i >= keys {
            return Err(ScoreError::KeyOutOfRange { index: i, keys });
        }
    }
    Ok(())
}

fn restrict_row(row: &[f32], visual_indices: &[usize]) -> Vec<f32> {
    visual_indices.iter().map(|&j| row[j]).collect()
}

/// Mean, over all visual query rows, of the head-averaged attention paid to
/// each visual key column.
pub fn score_mean_visual_query(
    attn: &AttentionTensor,
    visual_indices: &[usize],
) -> ScoreResult<ImportanceVector> {
    check_visual_indices(attn, visual_indices)?;
    let queries = attn.queries();
    for &i in visual_indices {
        if i >= queries {
            return Err(ScoreError::QueryOutOfRange { what: "visual", index: i, queries });
        }
    }
    let mean = attn.head_mean();
    let mut scores = vec![0.0f32; visual_indices.len()];
    for &q in visual_indices {
        for (acc, &j) in scores.iter_mut().zip(visual_indices) {
            *acc += mean.get(q, j);
        }
    }
    let inv = 1.0 / visual_indices.len() as f32;
    for s in &mut scores {
        *s *= inv;
    }
    ImportanceVector::new(scores, visual_indices.to_vec(), Strategy::MeanVisualQuery)
}

/// Head-averaged attention from the aggregate token to each visual key.
pub fn score_cls_query(
    attn: &AttentionTensor,
    visual_indices: &[usize],
    cls_index: usize,
) -> ScoreResult<ImportanceVector> {
    check_visual_indices(attn, visual_indices)?;
    let queries = attn.queries();
    if cls_index >= queries {
        return Err(ScoreError::QueryOutOfRange { what: "cls", index: cls_index, queries });
    }
    let mean = attn.head_mean();
    let scores = restrict_row(mean.row(cls_index), visual_indices);
    ImportanceVector::new(scores, visual_indices.to_vec(), Strategy::ClsQuery)
}

/// Head-averaged attention from the final instruction token to each visual
/// key: the text-guided baseline.
pub fn score_text_guided(
    attn: &AttentionTensor,
    visual_indices: &[usize],
    instr_last_index: usize,
) -> ScoreResult<ImportanceVector> {
    check_visual_indices(attn, visual_indices)?;
    let queries = attn.queries();
    if instr_last_index >= queries {
        return Err(ScoreError::QueryOutOfRange {
            what: "instruction",
            index: instr_last_index,
            queries,
        });
    }
    let mean = attn.head_mean();
    let scores = restrict_row(mean.row(instr_last_index), visual_indices);
    ImportanceVector::new(scores, visual_indices.to_vec(), Strategy::TextGuided)
}

/// Dispatch on strategy; `cls_index`/`instr_last_index` are only consulted by
/// the strategies that need them.
pub fn score_with_strategy(
    attn: &AttentionTensor,
    visual_indices: &[usize],
    strategy: Strategy,
    cls_index: Option<usize>,
    instr_last_index: Option<usize>,
) -> ScoreResult<ImportanceVector> {
    match strategy {
        Strategy::MeanVisualQuery => score_mean_visual_query(attn, visual_indices),
        Strategy::ClsQuery => {
            let cls = cls_index.ok_or(ScoreError::QueryOutOfRange {
                what: "cls",
                index: usize::MAX,
                queries: attn.queries(),
            })?;
            score_cls_query(attn, visual_indices, cls)
        }
        Strategy::TextGuided => {
            let instr = instr_last_index.ok_or(ScoreError::QueryOutOfRange {
                what: "instruction",
                index: usize::MAX,
                queries: attn.queries(),
            })?;
            score_text_guided(attn, visual_indices, instr)
        }
    }
}
