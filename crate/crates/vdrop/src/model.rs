//! Toy attention stack: multi-head self-attention blocks, a small
//! bidirectional encoder with an optional aggregate token, and a causal
//! decoder over mixed visual/text sequences.
//!
//! Blocks are deliberately minimal: attention plus residual, then a two-layer
//! MLP plus residual, with no normalization. Every layer reports its full
//! per-head attention weights and key vectors so downstream scoring and
//! merging can read them. Sinusoidal position terms are indexed by each
//! token's original position and added once at model entry; pruned sequences
//! keep their original positional indices.

use crate::linalg::{matmul, rand_matrix, softmax_rows, LinalgError, Mask, Matrix, Rng};
use std::fmt;

pub type ModelResult<T> = Result<T, ModelError>;

/// Errors from sequence construction and forward passes.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Linalg(LinalgError),
    EmptySequence,
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    PositionsNotIncreasing { row: usize },
    /// Decoder input violates the `[TextPre*, Visual*, TextInstr*]` layout.
    MalformedLayout { row: usize, found: Modality },
    /// Encoder input contained a non-visual token.
    NotVisual { row: usize },
    HiddenNotDivisible { hidden: usize, heads: usize },
    HiddenMismatch { expected: usize, got: usize },
    BadLayerRange { from: usize, upto: usize, layers: usize },
    /// Key vectors were requested from a tensor that does not carry them
    /// (e.g. one loaded from a weights-only dump).
    KeysUnavailable,
    RowOutOfRange { what: &'static str, row: usize, rows: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linalg(e) => write!(f, "{e}"),
            Self::EmptySequence => write!(f, "token sequence is empty"),
            Self::LengthMismatch { what, expected, got } => {
                write!(f, "{what}: expected length {expected}, got {got}")
            }
            Self::PositionsNotIncreasing { row } => {
                write!(f, "orig_pos not strictly increasing at row {row}")
            }
            Self::MalformedLayout { row, found } => {
                write!(f, "decoder layout must be [TextPre*, Visual*, TextInstr*]; found {found} at row {row}")
            }
            Self::NotVisual { row } => {
                write!(f, "encoder input must be all visual tokens; row {row} is not")
            }
            Self::HiddenNotDivisible { hidden, heads } => {
                write!(f, "hidden dim {hidden} not divisible by {heads} heads")
            }
            Self::HiddenMismatch { expected, got } => {
                write!(f, "hidden dim mismatch: model has {expected}, sequence has {got}")
            }
            Self::BadLayerRange { from, upto, layers } => {
                write!(f, "layer range {from}..{upto} invalid for a {layers}-layer decoder")
            }
            Self::KeysUnavailable => write!(f, "attention tensor carries no key vectors"),
            Self::RowOutOfRange { what, row, rows } => {
                write!(f, "{what} row {row} out of range for {rows} rows")
            }
        }
    }
}

impl std::error::Error for ModelError {}

impl From<LinalgError> for ModelError {
    fn from(e: LinalgError) -> Self {
        Self::Linalg(e)
    }
}

/// What a token stands for in the mixed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// System-prompt text preceding the visual block.
    TextPre,
    /// Patch-level visual token.
    Visual,
    /// Instruction text following the visual block.
    TextInstr,
    /// Dedicated aggregate token prepended by the encoder.
    Cls,
}

impl Modality {
    /// Stable one-byte tag, used in digests.
    pub fn tag(self) -> u8 {
        match self {
            Self::TextPre => 0,
            Self::Visual => 1,
            Self::TextInstr => 2,
            Self::Cls => 3,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TextPre => write!(f, "text_pre"),
            Self::Visual => write!(f, "visual"),
            Self::TextInstr => write!(f, "text_instr"),
            Self::Cls => write!(f, "cls"),
        }
    }
}

/// Mixed visual/text token sequence with per-token bookkeeping.
///
/// `orig_pos` is each token's index in the unpruned sequence of its context;
/// it stays fixed through pruning (no re-packing) and drives the positional
/// terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
    pub orig_pos: Vec<usize>,
    pub grid_shape: Option<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(
        embeddings: Matrix,
        modality: Vec<Modality>,
        orig_pos: Vec<usize>,
        grid_shape: Option<(usize, usize)>,
    ) -> ModelResult<Self> {
        if modality.len() != embeddings.rows() {
            return Err(ModelError::LengthMismatch {
                what: "modality",
                expected: embeddings.rows(),
                got: modality.len(),
            });
        }
        if orig_pos.len() != embeddings.rows() {
            return Err(ModelError::LengthMismatch {
                what: "orig_pos",
                expected: embeddings.rows(),
                got: orig_pos.len(),
            });
        }
        for i in 1..orig_pos.len() {
            if orig_pos[i] <= orig_pos[i - 1] {
                return Err(ModelError::PositionsNotIncreasing { row: i });
            }
        }
        Ok(Self { embeddings, modality, orig_pos, grid_shape })
    }

    /// Visual-only sequence at positions `0..n`, the usual encoder input.
    pub fn visual_block(embeddings: Matrix, grid_shape: Option<(usize, usize)>) -> Self {
        let n = embeddings.rows();
        Self {
            embeddings,
            modality: vec![Modality::Visual; n],
            orig_pos: (0..n).collect(),
            grid_shape,
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden_dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Row indices of visual tokens, ascending.
    pub fn visual_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality[i] == Modality::Visual).collect()
    }

    /// Row index of the last instruction token, if any.
    pub fn last_instr_row(&self) -> Option<usize> {
        (0..self.len()).rev().find(|&i| self.modality[i] == Modality::TextInstr)
    }

    /// Checks the decoder's `[TextPre*, Visual*, TextInstr*]` layout.
    pub fn validate_decoder_layout(&self) -> ModelResult<()> {
        let mut phase = 0u8; // 0 = text_pre, 1 = visual, 2 = text_instr
        for (row, &m) in self.modality.iter().enumerate() {
            let required = match m {
                Modality::TextPre => 0,
                Modality::Visual => 1,
                Modality::TextInstr => 2,
                Modality::Cls => return Err(ModelError::MalformedLayout { row, found: m }),
            };
            if required < phase {
                return Err(ModelError::MalformedLayout { row, found: m });
            }
            phase = required;
        }
        Ok(())
    }
}

/// Per-head attention weights and key vectors captured from one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub heads: usize,
    /// One `queries x keys` matrix per head; rows sum to one.
    pub weights: Vec<Matrix>,
    /// One `keys x head_dim` matrix per head. Empty for tensors loaded from
    /// weights-only dumps.
    pub key_vectors: Vec<Matrix>,
}

impl AttentionTensor {
    /// Wrap per-head weight matrices without key vectors (dump ingestion).
    pub fn from_weights(weights: Vec<Matrix>) -> Self {
        Self { heads: weights.len(), weights, key_vectors: Vec::new() }
    }

    pub fn queries(&self) -> usize {
        self.weights.first().map_or(0, Matrix::rows)
    }

    pub fn keys(&self) -> usize {
        self.weights.first().map_or(0, Matrix::cols)
    }

    /// Element-wise mean of the per-head weight matrices.
    pub fn head_mean(&self) -> Matrix {
        let scale = 1.0 / self.heads as f32;
        let mut data = vec![0.0f32; self.queries() * self.keys()];
        for w in &self.weights {
            for (acc, &v) in data.iter_mut().zip(w.data()) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v *= scale;
        }
        Matrix::new(self.queries(), self.keys(), data).expect("consistent head shapes")
    }

    /// Per-token key vectors for the given key rows with heads concatenated,
    /// one row per requested token.
    pub fn concat_keys(&self, rows: &[usize]) -> ModelResult<Matrix> {
        if self.key_vectors.len() != self.heads || self.heads == 0 {
            return Err(ModelError::KeysUnavailable);
        }
        let head_dim = self.key_vectors[0].cols();
        let mut out = Matrix::zeros(rows.len(), self.heads * head_dim);
        for (dst, &src) in rows.iter().enumerate() {
            for (h, keys) in self.key_vectors.iter().enumerate() {
                if src >= keys.rows() {
                    return Err(ModelError::RowOutOfRange {
                        what: "key vector",
                        row: src,
                        rows: keys.rows(),
                    });
                }
                out.row_mut(dst)[h * head_dim..(h + 1) * head_dim].copy_from_slice(keys.row(src));
            }
        }
        Ok(out)
    }
}

/// Geometry and determinism knobs for the toy stack.
///
/// `positional` and `mlp` exist so tests can probe permutation and scaling
/// behaviour on stripped-down variants; both default to on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub has_cls: bool,
    pub seed: u64,
    pub positional: bool,
    pub mlp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 8,
            has_cls: true,
            seed: 42,
            positional: true,
            mlp: true,
        }
    }
}

/// Query/key/value/output projections for one attention sublayer.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

/// Two-layer MLP weights (hidden expands 4x, ReLU between).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn: AttnParams,
    pub mlp: MlpParams,
}

/// Sinusoidal position term for one position.
pub fn sinusoidal(pos: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dim];
    for (i, v) in out.iter_mut().enumerate() {
        let pair = (i / 2) as f32;
        let freq = 1.0 / 10_000f32.powf(2.0 * pair / dim as f32);
        let angle = pos as f32 * freq;
        *v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    out
}

/// One attention sublayer: project, per-head scaled dot-product attention
/// (scaled by `1/sqrt(head_dim)`), concatenate, output-project, residual.
///
/// Returns the updated sequence and the captured per-head weights and key
/// vectors.
pub fn attention_layer(
    seq: &TokenSequence,
    params: &AttnParams,
    heads: usize,
    causal: bool,
) -> ModelResult<(TokenSequence, AttentionTensor)> {
    if seq.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let hidden = seq.hidden_dim();
    if !hidden.is_multiple_of(heads) || heads == 0 {
        return Err(ModelError::HiddenNotDivisible { hidden, heads });
    }
    for (m, name) in [
        (&params.w_q, "w_q"),
        (&params.w_k, "w_k"),
        (&params.w_v, "w_v"),
        (&params.w_o, "w_o"),
    ] {
        if m.rows() != hidden || m.cols() != hidden {
            return Err(ModelError::Linalg(LinalgError::ShapeMismatch {
                op: name,
                left: (hidden, hidden),
                right: (m.rows(), m.cols()),
            }));
        }
    }

    let n = seq.len();
    let head_dim = hidden / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();

    let q = matmul(&seq.embeddings, &params.w_q)?;
    let k = matmul(&seq.embeddings, &params.w_k)?;
    let v = matmul(&seq.embeddings, &params.w_v)?;

    let mask = causal.then(|| Mask::causal(n));
    let mut concat = Matrix::zeros(n, hidden);
    let mut weights = Vec::with_capacity(heads);
    let mut key_vectors = Vec::with_capacity(heads);

    for h in 0..heads {
        let start = h * head_dim;
        let qh = q.slice_cols(start, head_dim);
        let kh = k.slice_cols(start, head_dim);
        let vh = v.slice_cols(start, head_dim);

        let mut scores = matmul(&qh, &kh.transpose())?;
        for val in 0..n {
            for col in 0..n {
                scores.set(val, col, scores.get(val, col) * scale);
            }
        }
        let w = softmax_rows(&scores, mask.as_ref())?;
        let out_h = matmul(&w, &vh)?;
        for i in 0..n {
            concat.row_mut(i)[start..start + head_dim].copy_from_slice(out_h.row(i));
        }
        weights.push(w);
        key_vectors.push(kh);
    }

    let projected = matmul(&concat, &params.w_o)?;
    let mut embeddings = seq.embeddings.clone();
    for i in 0..n {
        for (e, &p) in embeddings.row_mut(i).iter_mut().zip(projected.row(i)) {
            *e += p;
        }
    }

    let out = TokenSequence {
        embeddings,
        modality: seq.modality.clone(),
        orig_pos: seq.orig_pos.clone(),
        grid_shape: seq.grid_shape,
    };
    Ok((out, AttentionTensor { heads, weights, key_vectors }))
}

fn mlp_forward(seq: &mut TokenSequence, params: &MlpParams) -> ModelResult<()> {
    let mut up = matmul(&seq.embeddings, &params.w_up)?;
    for v in 0..up.rows() {
        for x in up.row_mut(v) {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    let down = matmul(&up, &params.w_down)?;
    for i in 0..seq.len() {
        for (e, &d) in seq.embeddings.row_mut(i).iter_mut().zip(down.row(i)) {
            *e += d;
        }
    }
    Ok(())
}

/// Seeded encoder/decoder pair plus the modality projector between them.
///
/// All weights are derived from `cfg.seed` at construction and immutable
/// afterwards; forward passes on distinct sequences may run concurrently.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ModelConfig,
    encoder: Vec<LayerParams>,
    decoder: Vec<LayerParams>,
    projector: Matrix,
    cls_embedding: Vec<f32>,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig) -> ModelResult<Self> {
        if cfg.heads == 0 || !cfg.hidden_dim.is_multiple_of(cfg.heads) {
            return Err(ModelError::HiddenNotDivisible {
                hidden: cfg.hidden_dim,
                heads: cfg.heads,
            });
        }
        let mut rng = Rng::new(cfg.seed);
        let d = cfg.hidden_dim;
        let mlp_dim = 4 * d;
        let attn_scale = 1.0 / (d as f32).sqrt();
        let up_scale = 1.0 / (d as f32).sqrt();
        let down_scale = 1.0 / (mlp_dim as f32).sqrt();

        let make_layer = |rng: &mut Rng| LayerParams {
            attn: AttnParams {
                w_q: rand_matrix(rng, d, d, attn_scale),
                w_k: rand_matrix(rng, d, d, attn_scale),
                w_v: rand_matrix(rng, d, d, attn_scale),
                w_o: rand_matrix(rng, d, d, attn_scale),
            },
            mlp: MlpParams {
                w_up: rand_matrix(rng, d, mlp_dim, up_scale),
                w_down: rand_matrix(rng, mlp_dim, d, down_scale),
            },
        };

        let encoder = (0..cfg.encoder_layers).map(|_| make_layer(&mut rng)).collect();
        let decoder = (0..cfg.decoder_layers).map(|_| make_layer(&mut rng)).collect();
        let projector = rand_matrix(&mut rng, d, d, attn_scale);
        let cls_embedding = (0..d).map(|_| rng.next_symmetric(0.5)).collect();

        Ok(Self { cfg, encoder, decoder, projector, cls_embedding })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Add sinusoidal position terms (indexed by `orig_pos`) in place.
    /// Callers apply this exactly once, at model entry. No-op when the
    /// config has positional terms disabled.
    pub fn add_positional(&self, seq: &mut TokenSequence) {
        if !self.cfg.positional {
            return;
        }
        let dim = seq.hidden_dim();
        for i in 0..seq.len() {
            let pe = sinusoidal(seq.orig_pos[i], dim);
            for (e, p) in seq.embeddings.row_mut(i).iter_mut().zip(pe) {
                *e += p;
            }
        }
    }

    /// Bidirectional encoder over an all-visual sequence.
    ///
    /// When the config has an aggregate token, it is prepended internally at
    /// position 0 (visual positions shift by one) and stays in the returned
    /// sequence as row 0. Position terms are added here, once.
    pub fn encoder_forward(
        &self,
        image_tokens: &TokenSequence,
    ) -> ModelResult<(TokenSequence, Vec<AttentionTensor>)> {
        if image_tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if image_tokens.hidden_dim() != self.cfg.hidden_dim {
            return Err(ModelError::HiddenMismatch {
                expected: self.cfg.hidden_dim,
                got: image_tokens.hidden_dim(),
            });
        }
        if let Some(row) = image_tokens.modality.iter().position(|&m| m != Modality::Visual) {
            return Err(ModelError::NotVisual { row });
        }

        let mut seq = if self.cfg.has_cls {
            let n = image_tokens.len();
            let d = self.cfg.hidden_dim;
            let mut embeddings = Matrix::zeros(n + 1, d);
            embeddings.row_mut(0).copy_from_slice(&self.cls_embedding);
            for i in 0..n {
                embeddings.row_mut(i + 1).copy_from_slice(image_tokens.embeddings.row(i));
            }
            let mut modality = vec![Modality::Cls];
            modality.extend(std::iter::repeat_n(Modality::Visual, n));
            let mut orig_pos = vec![0usize];
            orig_pos.extend(image_tokens.orig_pos.iter().map(|p| p + 1));
            TokenSequence { embeddings, modality, orig_pos, grid_shape: image_tokens.grid_shape }
        } else {
            image_tokens.clone()
        };

        self.add_positional(&mut seq);

        let mut tensors = Vec::with_capacity(self.cfg.encoder_layers);
        for layer in &self.encoder {
            let (next, tensor) = attention_layer(&seq, &layer.attn, self.cfg.heads, false)?;
            seq = next;
            if self.cfg.mlp {
                mlp_forward(&mut seq, &layer.mlp)?;
            }
            tensors.push(tensor);
        }
        Ok((seq, tensors))
    }

    /// Causal decoder over a `[TextPre*, Visual*, TextInstr*]` sequence,
    /// stopping after `upto_layer` layers when given.
    ///
    /// Position terms are *not* added here so that stop/resume execution
    /// composes; callers add them once at decoder entry via
    /// [`ToyModel::add_positional`].
    pub fn decoder_forward(
        &self,
        seq: &TokenSequence,
        upto_layer: Option<usize>,
    ) -> ModelResult<(TokenSequence, Vec<AttentionTensor>)> {
        let upto = upto_layer.unwrap_or(self.cfg.decoder_layers);
        self.decoder_resume(seq, 0, upto)
    }

    /// Run decoder layers `from..upto` (zero-based, half-open) on a sequence
    /// that already passed through the first `from` layers. Staged execution
    /// through this entry point is arithmetic-for-arithmetic identical to a
    /// monolithic run.
    pub fn decoder_resume(
        &self,
        seq: &TokenSequence,
        from: usize,
        upto: usize,
    ) -> ModelResult<(TokenSequence, Vec<AttentionTensor>)> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.hidden_dim() != self.cfg.hidden_dim {
            return Err(ModelError::HiddenMismatch {
                expected: self.cfg.hidden_dim,
                got: seq.hidden_dim(),
            });
        }
        seq.validate_decoder_layout()?;
        if from > upto || upto > self.cfg.decoder_layers {
            return Err(ModelError::BadLayerRange {
                from,
                upto,
                layers: self.cfg.decoder_layers,
            });
        }

        let mut current = seq.clone();
        let mut tensors = Vec::with_capacity(upto - from);
        for layer in &self.decoder[from..upto] {
            let (next, tensor) = attention_layer(&current, &layer.attn, self.cfg.heads, true)?;
            current = next;
            if self.cfg.mlp {
                mlp_forward(&mut current, &layer.mlp)?;
            }
            tensors.push(tensor);
        }
        Ok((current, tensors))
    }

    /// Map encoder-space embeddings into decoder space.
    pub fn project_to_decoder(&self, visual: &Matrix) -> ModelResult<Matrix> {
        Ok(matmul(visual, &self.projector)?)
    }
}
