//! Bit-exact file formats: binary tensor dumps, human-editable run
//! manifests, retention-mask CSVs, and grayscale heatmap exports.
//!
//! Dump layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VDMP"
//! 4       4     version (= 1)
//! 8       1     kind (0 = token matrix, 1 = attention tensor)
//! 9       4     heads (1 for token matrices)
//! 13      4     rows
//! 17      4     cols
//! 21      ...   f32 payload, head-major then row-major
//! ```
//!
//! Readers reject malformed input with a named error and never return
//! partial results.

use crate::linalg::Matrix;
use crate::model::AttentionTensor;
use crate::scoring::{ImportanceVector, Strategy};
use std::fmt;

pub const DUMP_MAGIC: [u8; 4] = *b"VDMP";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 21;

pub type FormatResult<T> = Result<T, FormatError>;

#[derive(Debug, Clone, PartialEq)]
pub enum FormatError {
    BadMagic { found: [u8; 4] },
    VersionMismatch { found: u32 },
    /// Input ended before the declared header or payload was complete.
    Truncated { expected: usize, got: usize },
    UnknownKind { byte: u8 },
    NonFinitePayload { index: usize },
    PayloadLength { expected: usize, got: usize },
    /// Manifest line that could not be parsed.
    ManifestSyntax { line: usize, message: String },
    ManifestUnknownKey { line: usize, key: String },
    ManifestMissingField { field: &'static str },
    /// An index declared by the manifest falls outside the dump it is
    /// paired with.
    IndexOutOfBounds { field: &'static str, index: usize, bound: usize },
    PositionOutsideGrid { position: usize, cells: usize },
    GridMismatch { cells: usize, tokens: usize },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic { found } => {
                write!(f, "bad magic {:02x?}, expected \"VDMP\"", found)
            }
            Self::VersionMismatch { found } => {
                write!(f, "unsupported dump version {found}, expected {DUMP_VERSION}")
            }
            Self::Truncated { expected, got } => {
                write!(f, "truncated dump: expected {expected} bytes, got {got}")
            }
            Self::UnknownKind { byte } => write!(f, "unknown dump kind byte {byte:#04x}"),
            Self::NonFinitePayload { index } => {
                write!(f, "non-finite payload value at index {index}")
            }
            Self::PayloadLength { expected, got } => {
                write!(f, "payload length mismatch: expected {expected} values, got {got}")
            }
            Self::ManifestSyntax { line, message } => {
                write!(f, "manifest line {line}: {message}")
            }
            Self::ManifestUnknownKey { line, key } => {
                write!(f, "manifest line {line}: unknown key `{key}`")
            }
            Self::ManifestMissingField { field } => {
                write!(f, "manifest is missing required field `{field}`")
            }
            Self::IndexOutOfBounds { field, index, bound } => {
                write!(f, "manifest field `{field}`: index {index} out of bounds ({bound})")
            }
            Self::PositionOutsideGrid { position, cells } => {
                write!(f, "position {position} outside grid of {cells} cells")
            }
            Self::GridMismatch { cells, tokens } => {
                write!(f, "grid has {cells} cells but there are {tokens} visual tokens")
            }
        }
    }
}

impl std::error::Error for FormatError {}

/// What a dump's payload holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    TokenMatrix,
    AttentionTensor,
}

impl DumpKind {
    fn byte(self) -> u8 {
        match self {
            Self::TokenMatrix => 0,
            Self::AttentionTensor => 1,
        }
    }

    fn from_byte(b: u8) -> FormatResult<Self> {
        match b {
            0 => Ok(Self::TokenMatrix),
            1 => Ok(Self::AttentionTensor),
            other => Err(FormatError::UnknownKind { byte: other }),
        }
    }
}

/// In-memory image of one dump file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub kind: DumpKind,
    pub heads: u32,
    pub rows: u32,
    pub cols: u32,
    /// Head-major, row-major values; length = heads * rows * cols.
    pub payload: Vec<f32>,
}

impl TensorDump {
    pub fn new(
        kind: DumpKind,
        heads: u32,
        rows: u32,
        cols: u32,
        payload: Vec<f32>,
    ) -> FormatResult<Self> {
        let expected = heads as usize * rows as usize * cols as usize;
        if payload.len() != expected {
            return Err(FormatError::PayloadLength { expected, got: payload.len() });
        }
        Ok(Self { kind, heads, rows, cols, payload })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            kind: DumpKind::TokenMatrix,
            heads: 1,
            rows: m.rows() as u32,
            cols: m.cols() as u32,
            payload: m.data().to_vec(),
        }
    }

    pub fn from_attention(t: &AttentionTensor) -> Self {
        let mut payload = Vec::with_capacity(t.heads * t.queries() * t.keys());
        for w in &t.weights {
            payload.extend_from_slice(w.data());
        }
        Self {
            kind: DumpKind::AttentionTensor,
            heads: t.heads as u32,
            rows: t.queries() as u32,
            cols: t.keys() as u32,
            payload,
        }
    }

    /// Token-matrix payload as a matrix. For attention dumps this returns
    /// the first head.
    pub fn to_matrix(&self) -> Matrix {
        let plane = self.rows as usize * self.cols as usize;
        Matrix::new(self.rows as usize, self.cols as usize, self.payload[..plane].to_vec())
            .expect("dump dims validated at construction")
    }

    /// Reassemble an attention tensor (weights only; no key vectors).
    pub fn to_attention(&self) -> AttentionTensor {
        let plane = self.rows as usize * self.cols as usize;
        let weights = (0..self.heads as usize)
            .map(|h| {
                Matrix::new(
                    self.rows as usize,
                    self.cols as usize,
                    self.payload[h * plane..(h + 1) * plane].to_vec(),
                )
                .expect("dump dims validated at construction")
            })
            .collect();
        AttentionTensor::from_weights(weights)
    }
}

/// Serialize a dump. Rejects non-finite payload values.
pub fn write_dump(dump: &TensorDump) -> FormatResult<Vec<u8>> {
    if let Some(index) = dump.payload.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinitePayload { index });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + dump.payload.len() * 4);
    out.extend_from_slice(&DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.push(dump.kind.byte());
    out.extend_from_slice(&dump.heads.to_le_bytes());
    out.extend_from_slice(&dump.rows.to_le_bytes());
    out.extend_from_slice(&dump.cols.to_le_bytes());
    for v in &dump.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse a dump, checking magic, version, kind, and exact payload length.
pub fn read_dump(bytes: &[u8]) -> FormatResult<TensorDump> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("fixed slice");
    if magic != DUMP_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("fixed slice"));
    if version != DUMP_VERSION {
        return Err(FormatError::VersionMismatch { found: version });
    }
    let kind = DumpKind::from_byte(bytes[8])?;
    let heads = u32::from_le_bytes(bytes[9..13].try_into().expect("fixed slice"));
    let rows = u32::from_le_bytes(bytes[13..17].try_into().expect("fixed slice"));
    let cols = u32::from_le_bytes(bytes[17..21].try_into().expect("fixed slice"));
    let count = heads as usize * rows as usize * cols as usize;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() != expected {
        return Err(FormatError::Truncated { expected, got: bytes.len() });
    }
    let payload = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("fixed chunk")))
        .collect();
    TensorDump::new(kind, heads, rows, cols, payload)
}

/// Human-editable run manifest: declares which dump columns are visual,
/// where the aggregate/instruction rows sit, and the default run knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub visual_indices: Vec<usize>,
    pub cls_index: Option<usize>,
    pub instr_last_index: Option<usize>,
    pub grid_shape: Option<(usize, usize)>,
    pub initial: Option<usize>,
    pub final_budget: Option<usize>,
    pub stages: Option<usize>,
    /// Explicit decoder-layer boundaries; the encoder stage is implicit.
    pub boundaries: Option<Vec<usize>>,
    pub strategy: Option<Strategy>,
    pub dom_ratio: Option<f32>,
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn new(visual_indices: Vec<usize>) -> Self {
        Self {
            visual_indices,
            cls_index: None,
            instr_last_index: None,
            grid_shape: None,
            initial: None,
            final_budget: None,
            stages: None,
            boundaries: None,
            strategy: None,
            dom_ratio: None,
            seed: None,
        }
    }

    /// Deterministic text rendering; `parse` inverts it.
    pub fn render(&self) -> String {
        let mut out = String::from("# vdrop manifest\n");
        out.push_str(&format!("visual_indices = {}\n", render_index_list(&self.visual_indices)));
        if let Some(v) = self.cls_index {
            out.push_str(&format!("cls_index = {v}\n"));
        }
        if let Some(v) = self.instr_last_index {
            out.push_str(&format!("instr_last_index = {v}\n"));
        }
        if let Some((r, c)) = self.grid_shape {
            out.push_str(&format!("grid_shape = {r},{c}\n"));
        }
        if let Some(v) = self.initial {
            out.push_str(&format!("initial = {v}\n"));
        }
        if let Some(v) = self.final_budget {
            out.push_str(&format!("final = {v}\n"));
        }
        if let Some(v) = self.stages {
            out.push_str(&format!("stages = {v}\n"));
        }
        if let Some(b) = &self.boundaries {
            let list: Vec<String> = b.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("boundaries = {}\n", list.join(",")));
        }
        if let Some(s) = self.strategy {
            out.push_str(&format!("strategy = {s}\n"));
        }
        if let Some(v) = self.dom_ratio {
            out.push_str(&format!("dom_ratio = {v}\n"));
        }
        if let Some(v) = self.seed {
            out.push_str(&format!("seed = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> FormatResult<Self> {
        let mut visual_indices: Option<Vec<usize>> = None;
        let mut manifest = Manifest::new(Vec::new());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = lineno + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(FormatError::ManifestSyntax {
                    line: lineno,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let syntax = |message: String| FormatError::ManifestSyntax { line: lineno, message };
            match key {
                "visual_indices" => {
                    visual_indices = Some(parse_index_list(value).map_err(syntax)?);
                }
                "cls_index" => {
                    manifest.cls_index = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid cls_index `{value}`"))
                    })?);
                }
                "instr_last_index" => {
                    manifest.instr_last_index = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid instr_last_index `{value}`"))
                    })?);
                }
                "grid_shape" => {
                    let (r, c) = value
                        .split_once(',')
                        .ok_or_else(|| syntax(format!("grid_shape needs `rows,cols`, got `{value}`")))?;
                    let rows = r.trim().parse().map_err(|_| {
                        syntax(format!("invalid grid rows `{r}`"))
                    })?;
                    let cols = c.trim().parse().map_err(|_| {
                        syntax(format!("invalid grid cols `{c}`"))
                    })?;
                    manifest.grid_shape = Some((rows, cols));
                }
                "initial" => {
                    manifest.initial = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid initial `{value}`"))
                    })?);
                }
                "final" => {
                    manifest.final_budget = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid final `{value}`"))
                    })?);
                }
                "stages" => {
                    manifest.stages = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid stages `{value}`"))
                    })?);
                }
                "boundaries" => {
                    let mut list = Vec::new();
                    for part in value.split(',') {
                        list.push(part.trim().parse().map_err(|_| {
                            syntax(format!("invalid boundary `{part}`"))
                        })?);
                    }
                    manifest.boundaries = Some(list);
                }
                "strategy" => {
                    manifest.strategy = Some(value.parse().map_err(|_| {
                        syntax(format!("unknown strategy `{value}`"))
                    })?);
                }
                "dom_ratio" => {
                    manifest.dom_ratio = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid dom_ratio `{value}`"))
                    })?);
                }
                "seed" => {
                    manifest.seed = Some(value.parse().map_err(|_| {
                        syntax(format!("invalid seed `{value}`"))
                    })?);
                }
                other => {
                    return Err(FormatError::ManifestUnknownKey {
                        line: lineno,
                        key: other.to_string(),
                    });
                }
            }
        }
        manifest.visual_indices =
            visual_indices.ok_or(FormatError::ManifestMissingField { field: "visual_indices" })?;
        Ok(manifest)
    }

    /// Check every declared index against the row/column bounds of the dump
    /// this manifest describes.
    pub fn validate_bounds(&self, rows: usize, cols: usize) -> FormatResult<()> {
        for &i in &self.visual_indices {
            if i >= cols {
                return Err(FormatError::IndexOutOfBounds {
                    field: "visual_indices",
                    index: i,
                    bound: cols,
                });
            }
        }
        if let Some(i) = self.cls_index {
            if i >= rows {
                return Err(FormatError::IndexOutOfBounds { field: "cls_index", index: i, bound: rows });
            }
        }
        if let Some(i) = self.instr_last_index {
            if i >= rows {
                return Err(FormatError::IndexOutOfBounds {
                    field: "instr_last_index",
                    index: i,
                    bound: rows,
                });
            }
        }
        Ok(())
    }
}

/// Compact index-list syntax: comma-separated atoms, each a single index or
/// a half-open range `a..b`.
pub fn parse_index_list(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((a, b)) = part.split_once("..") {
            let start: usize =
                a.trim().parse().map_err(|_| format!("invalid range start `{a}`"))?;
            let end: usize = b.trim().parse().map_err(|_| format!("invalid range end `{b}`"))?;
            if end < start {
                return Err(format!("range `{part}` runs backwards"));
            }
            out.extend(start..end);
        } else {
            out.push(part.parse().map_err(|_| format!("invalid index `{part}`"))?);
        }
    }
    Ok(out)
}

/// Inverse of [`parse_index_list`]: contiguous runs of three or more
/// compress to `a..b`.
pub fn render_index_list(indices: &[usize]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < indices.len() {
        let start = indices[i];
        let mut end = start;
        let mut j = i;
        while j + 1 < indices.len() && indices[j + 1] == end + 1 {
            j += 1;
            end = indices[j];
        }
        if end - start >= 2 {
            parts.push(format!("{start}..{}", end + 1));
        } else {
            for &v in &indices[i..=j] {
                parts.push(v.to_string());
            }
        }
        i = j + 1;
    }
    parts.join(",")
}

/// Render retained grid positions as a `1`/`0` CSV grid plus the sorted,
/// deduplicated retention list.
pub fn export_mask(
    retained: &[usize],
    grid_shape: (usize, usize),
) -> FormatResult<(String, Vec<usize>)> {
    let (rows, cols) = grid_shape;
    let cells = rows * cols;
    let mut kept = vec![false; cells];
    for &p in retained {
        if p >= cells {
            return Err(FormatError::PositionOutsideGrid { position: p, cells });
        }
        kept[p] = true;
    }
    let mut lines = Vec::with_capacity(rows);
    for r in 0..rows {
        let row: Vec<&str> = (0..cols).map(|c| if kept[r * cols + c] { "1" } else { "0" }).collect();
        lines.push(row.join(","));
    }
    let indices: Vec<usize> = (0..cells).filter(|&i| kept[i]).collect();
    Ok((lines.join("\n"), indices))
}

/// Grayscale heatmap export: binary graymap plus a CSV sidecar carrying the
/// raw score values exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub pgm: Vec<u8>,
    pub csv: String,
}

/// Min-max normalize scores to 0..=255 over the grid. A constant score
/// vector renders as mid-gray (128) by convention.
pub fn export_heatmap(
    scores: &ImportanceVector,
    grid_shape: (usize, usize),
) -> FormatResult<Heatmap> {
    let (rows, cols) = grid_shape;
    let cells = rows * cols;
    if cells != scores.len() {
        return Err(FormatError::GridMismatch { cells, tokens: scores.len() });
    }
    if let Some(index) = scores.scores.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinitePayload { index });
    }
    let min = scores.scores.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = scores.scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let pixels: Vec<u8> = if max > min {
        scores
            .scores
            .iter()
            .map(|&s| (((s - min) / (max - min)) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; cells]
    };

    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);

    let mut lines = Vec::with_capacity(rows);
    for r in 0..rows {
        let row: Vec<String> =
            (0..cols).map(|c| format!("{}", scores.scores[r * cols + c])).collect();
        lines.push(row.join(","));
    }
    Ok(Heatmap { pgm, csv: lines.join("\n") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rand_matrix, softmax_rows, Rng};
    use proptest::prelude::*;
    // proptest's prelude re-exports a `Strategy` trait; ours wins.
    use crate::scoring::Strategy;

    fn random_attention_dump(seed: u64, heads: u32, n: u32) -> TensorDump {
        let mut rng = Rng::new(seed);
        let mut payload = Vec::new();
        for _ in 0..heads {
            let w = softmax_rows(&rand_matrix(&mut rng, n as usize, n as usize, 2.0), None).unwrap();
            payload.extend_from_slice(w.data());
        }
        TensorDump::new(DumpKind::AttentionTensor, heads, n, n, payload).unwrap()
    }

    #[test]
    fn dump_round_trip_is_bitwise() {
        let dump = random_attention_dump(1, 4, 6);
        let bytes = write_dump(&dump).unwrap();
        let back = read_dump(&bytes).unwrap();
        assert_eq!(back, dump);
    }

    #[test]
    fn dump_header_golden_bytes() {
        let dump = TensorDump::from_matrix(&Matrix::zeros(2, 3));
        let bytes = write_dump(&dump).unwrap();
        assert_eq!(&bytes[0..8], b"VDMP\x01\x00\x00\x00");
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &3u32.to_le_bytes());
    }

    #[test]
    fn dump_truncation_is_named() {
        let dump = random_attention_dump(2, 1, 4);
        let mut bytes = write_dump(&dump).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(read_dump(&bytes), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn dump_bad_magic_is_named() {
        let dump = random_attention_dump(3, 1, 2);
        let mut bytes = write_dump(&dump).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_dump(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn dump_version_mismatch_is_named() {
        let dump = random_attention_dump(4, 1, 2);
        let mut bytes = write_dump(&dump).unwrap();
        bytes[4] = 9;
        assert_eq!(read_dump(&bytes).unwrap_err(), FormatError::VersionMismatch { found: 9 });
    }

    #[test]
    fn dump_unknown_kind_is_named() {
        let dump = random_attention_dump(5, 1, 2);
        let mut bytes = write_dump(&dump).unwrap();
        bytes[8] = 7;
        assert_eq!(read_dump(&bytes).unwrap_err(), FormatError::UnknownKind { byte: 7 });
    }

    #[test]
    fn dump_rejects_non_finite_payload() {
        let dump =
            TensorDump::new(DumpKind::TokenMatrix, 1, 1, 2, vec![1.0, f32::NAN]).unwrap();
        assert_eq!(
            write_dump(&dump).unwrap_err(),
            FormatError::NonFinitePayload { index: 1 }
        );
    }

    #[test]
    fn attention_dump_reassembles_heads() {
        let dump = random_attention_dump(6, 3, 5);
        let tensor = dump.to_attention();
        assert_eq!(tensor.heads, 3);
        assert_eq!(tensor.queries(), 5);
        let back = TensorDump::from_attention(&tensor);
        assert_eq!(back, dump);
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new((1..577).collect());
        m.cls_index = Some(0);
        m.instr_last_index = Some(584);
        m.grid_shape = Some((24, 24));
        m.initial = Some(576);
        m.final_budget = Some(192);
        m.stages = Some(5);
        m.boundaries = Some(vec![2, 4, 6, 8]);
        m.strategy = Some(Strategy::MeanVisualQuery);
        m.dom_ratio = Some(0.875);
        m.seed = Some(42);
        let text = m.render();
        assert_eq!(Manifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn manifest_requires_visual_indices() {
        assert_eq!(
            Manifest::parse("seed = 3\n").unwrap_err(),
            FormatError::ManifestMissingField { field: "visual_indices" }
        );
    }

    #[test]
    fn manifest_rejects_unknown_key() {
        let err = Manifest::parse("visual_indices = 0..4\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, FormatError::ManifestUnknownKey { .. }));
    }

    #[test]
    fn manifest_bounds_check_names_field() {
        let mut m = Manifest::new(vec![0, 1, 2]);
        m.cls_index = Some(10);
        let err = m.validate_bounds(4, 4).unwrap_err();
        assert_eq!(err, FormatError::IndexOutOfBounds { field: "cls_index", index: 10, bound: 4 });
    }

    #[test]
    fn index_list_syntax() {
        assert_eq!(parse_index_list("0,4..8,12").unwrap(), vec![0, 4, 5, 6, 7, 12]);
        assert_eq!(render_index_list(&[0, 4, 5, 6, 7, 12]), "0,4..8,12");
        assert_eq!(render_index_list(&[3, 5]), "3,5");
        assert!(parse_index_list("5..2").is_err());
    }

    #[test]
    fn mask_all_retained() {
        let (csv, indices) = export_mask(&[0, 1, 2, 3], (2, 2)).unwrap();
        assert_eq!(csv, "1,1\n1,1");
        assert_eq!(indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn mask_single_cell() {
        let (csv, indices) = export_mask(&[0], (2, 2)).unwrap();
        assert_eq!(csv, "1,0\n0,0");
        assert_eq!(indices, vec![0]);
    }

    #[test]
    fn mask_rejects_out_of_grid() {
        assert_eq!(
            export_mask(&[4], (2, 2)).unwrap_err(),
            FormatError::PositionOutsideGrid { position: 4, cells: 4 }
        );
    }

    fn iv(scores: Vec<f32>) -> ImportanceVector {
        let n = scores.len();
        ImportanceVector::new(scores, (0..n).collect(), Strategy::MeanVisualQuery).unwrap()
    }

    #[test]
    fn heatmap_normalization_endpoints() {
        let hm = export_heatmap(&iv(vec![0.0, 1.0]), (1, 2)).unwrap();
        assert_eq!(&hm.pgm[..9], b"P5\n2 1\n25");
        let pixels = &hm.pgm[hm.pgm.len() - 2..];
        assert_eq!(pixels, &[0u8, 255]);
    }

    #[test]
    fn heatmap_constant_scores_render_mid_gray() {
        let hm = export_heatmap(&iv(vec![0.25; 4]), (2, 2)).unwrap();
        let pixels = &hm.pgm[hm.pgm.len() - 4..];
        assert_eq!(pixels, &[128u8; 4]);
    }

    #[test]
    fn heatmap_csv_round_trips_exactly() {
        let scores = vec![0.1f32, 0.0025, 0.33333334, 0.5];
        let hm = export_heatmap(&iv(scores.clone()), (2, 2)).unwrap();
        let parsed: Vec<f32> = hm
            .csv
            .lines()
            .flat_map(|l| l.split(','))
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(parsed, scores);
    }

    #[test]
    fn heatmap_rejects_wrong_grid() {
        assert!(matches!(
            export_heatmap(&iv(vec![0.1; 5]), (2, 2)),
            Err(FormatError::GridMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn prop_dump_round_trip(seed in 0u64..200, heads in 1u32..4, n in 1u32..10) {
            let dump = random_attention_dump(seed, heads, n);
            let bytes = write_dump(&dump).unwrap();
            prop_assert_eq!(read_dump(&bytes).unwrap(), dump);
        }

        #[test]
        fn prop_mask_popcount_matches_retained(seed in 0u64..200, rows in 1usize..8, cols in 1usize..8) {
            let mut rng = Rng::new(seed);
            let cells = rows * cols;
            let retained: Vec<usize> = (0..cells).filter(|_| rng.next_unit() < 0.4).collect();
            let (csv, indices) = export_mask(&retained, (rows, cols)).unwrap();
            let ones = csv.chars().filter(|&c| c == '1').count();
            prop_assert_eq!(ones, retained.len());
            prop_assert_eq!(indices, retained);
        }

        #[test]
        fn prop_index_list_round_trip(raw in proptest::collection::btree_set(0usize..200, 0..40)) {
            let indices: Vec<usize> = raw.into_iter().collect();
            let rendered = render_index_list(&indices);
            prop_assert_eq!(parse_index_list(&rendered).unwrap(), indices);
        }
    }
}
