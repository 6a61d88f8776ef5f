//! Dense matrix primitives: row-major `f32` storage, matrix product, masked
//! row softmax, and a seeded uniform initializer.
//!
//! Everything here is pure: the same inputs (and generator state) produce the
//! same outputs. The generator is SplitMix64 with a fixed bit-to-float
//! mapping, so seeded runs reproduce bit-for-bit across platforms.

use std::fmt;

/// Result alias for this module.
pub type LinalgResult<T> = Result<T, LinalgError>;

/// Errors from matrix construction and kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinalgError {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// Data buffer length does not match `rows * cols`.
    DataLength { expected: usize, got: usize },
    /// A softmax row had every entry masked out.
    FullyMaskedRow { row: usize },
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Self::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected} values, got {got}")
            }
            Self::FullyMaskedRow { row } => write!(f, "softmax row {row} is fully masked"),
        }
    }
}

impl std::error::Error for LinalgError {}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Wrap a flat row-major buffer, checking its length.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> LinalgResult<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from explicit rows. Panics if the rows are ragged; intended for
    /// literals in construction and tests.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged row in Matrix::from_rows");
            data.extend_from_slice(row);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Copy a contiguous column span into a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut out = Matrix::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    /// Copy the given rows, in order, into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean participation mask with the same shape as the matrix it guards.
/// `true` means the entry takes part in the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> LinalgResult<Self> {
        if keep.len() != rows * cols {
            return Err(LinalgError::DataLength { expected: rows * cols, got: keep.len() });
        }
        Ok(Self { rows, cols, keep })
    }

    /// Lower-triangular mask: position `i` may attend to keys `j <= i`.
    pub fn causal(n: usize) -> Self {
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                keep[i * n + j] = true;
            }
        }
        Self { rows: n, cols: n, keep }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> LinalgResult<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "matmul",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut data = vec![0.0f32; a.rows * b.cols];
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (out, &bkj) in out_row.iter_mut().zip(b_row) {
                *out += aik * bkj;
            }
        }
    }
    Ok(Matrix { rows: a.rows, cols: b.cols, data })
}

/// Row-wise softmax with optional participation mask.
///
/// Masked entries are excluded from the max and the normalizing sum (never
/// fed through `exp`), and come out exactly `0.0`. Each row is stabilized by
/// subtracting its unmasked maximum. A row with no unmasked entry is an
/// error: it signals a malformed mask.
pub fn softmax_rows(m: &Matrix, mask: Option<&Mask>) -> LinalgResult<Matrix> {
    if let Some(mk) = mask {
        if mk.rows != m.rows || mk.cols != m.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "softmax_rows mask",
                left: (m.rows, m.cols),
                right: (mk.rows, mk.cols),
            });
        }
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let mut max = f32::NEG_INFINITY;
        let mut any = false;
        for (j, &x) in row.iter().enumerate() {
            if mask.is_none_or(|mk| mk.keeps(i, j)) {
                any = true;
                if x > max {
                    max = x;
                }
            }
        }
        if !any {
            return Err(LinalgError::FullyMaskedRow { row: i });
        }
        let out_row = out.row_mut(i);
        let mut sum = 0.0f32;
        for (j, &x) in row.iter().enumerate() {
            if mask.is_none_or(|mk| mk.keeps(i, j)) {
                let e = (x - max).exp();
                out_row[j] = e;
                sum += e;
            }
        }
        for (j, v) in out_row.iter_mut().enumerate() {
            if mask.is_none_or(|mk| mk.keeps(i, j)) {
                *v /= sum;
            }
        }
    }
    Ok(out)
}

/// SplitMix64 generator.
///
/// The algorithm is pinned (pure 64-bit integer arithmetic, 24-bit float
/// mapping) so a given seed yields the same draw sequence everywhere, which
/// keeps golden tests portable.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    /// The seed this generator was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution (exact in `f32`).
    pub fn next_unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn next_symmetric(&mut self, scale: f32) -> f32 {
        scale * (2.0 * self.next_unit() - 1.0)
    }

    /// Uniform integer in `[0, bound)`. Uses rejection-free modulo; the bias
    /// is negligible for the small bounds used here.
    pub fn next_below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }
}

/// Matrix with entries drawn uniformly from `[-scale, scale)`, advancing the
/// generator state row-major.
pub fn rand_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.next_symmetric(scale)).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    // proptest's prelude re-exports a `Rng` trait; ours wins.
    use super::Rng;

    /// Triple-loop reference product, kept independent of `matmul`.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f32;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn matmul_identity() {
        let eye = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = Matrix::from_rows(&[&[3.0, -1.5], &[2.0, 0.25]]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_oracle_on_random_instance() {
        let mut rng = Rng::new(11);
        let a = rand_matrix(&mut rng, 5, 7, 1.0);
        let b = rand_matrix(&mut rng, 7, 3, 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(max_abs_diff(&got, &want) <= 1e-6);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, LinalgError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_rows(&[&[0.0, 0.0, 0.0]]);
        let s = softmax_rows(&m, None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-7);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        let b = Matrix::from_rows(&[&[11.0, 12.0, 13.0]]);
        let sa = softmax_rows(&a, None).unwrap();
        let sb = softmax_rows(&b, None).unwrap();
        assert_eq!(sa.data(), sb.data());
    }

    #[test]
    fn softmax_forced_two_entry_row() {
        let m = Matrix::from_rows(&[&[0.0, std::f32::consts::LN_2]]);
        let s = softmax_rows(&m, None).unwrap();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() <= 1e-6);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let m = Matrix::from_rows(&[&[5.0, 1.0, -2.0], &[0.0, 3.0, 3.0]]);
        let mask = Mask::new(2, 3, vec![true, false, true, true, true, false]).unwrap();
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 2), 0.0);
        let r0: f32 = s.row(0).iter().sum();
        let r1: f32 = s.row(1).iter().sum();
        assert!((r0 - 1.0).abs() <= 1e-6);
        assert!((r1 - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let m = Matrix::zeros(2, 2);
        let mask = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert_eq!(
            softmax_rows(&m, Some(&mask)).unwrap_err(),
            LinalgError::FullyMaskedRow { row: 1 }
        );
    }

    #[test]
    fn softmax_stable_at_large_magnitudes() {
        let m = Matrix::from_rows(&[&[1.0e4, 9.999e3, -1.0e4]]);
        let s = softmax_rows(&m, None).unwrap();
        assert!(s.all_finite());
        let sum: f32 = s.row(0).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rng_same_seed_same_matrix() {
        let mut r1 = Rng::new(99);
        let mut r2 = Rng::new(99);
        let a = rand_matrix(&mut r1, 4, 4, 0.5);
        let b = rand_matrix(&mut r2, 4, 4, 0.5);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rng_scale_bounds_entries() {
        let mut rng = Rng::new(3);
        let m = rand_matrix(&mut rng, 8, 8, 0.1);
        assert!(m.data().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn rng_different_seeds_differ() {
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(2);
        let a = rand_matrix(&mut r1, 3, 3, 1.0);
        let b = rand_matrix(&mut r2, 3, 3, 1.0);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn rng_state_advances() {
        let mut rng = Rng::new(7);
        let a = rand_matrix(&mut rng, 2, 2, 1.0);
        let b = rand_matrix(&mut rng, 2, 2, 1.0);
        assert_ne!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn prop_matmul_matches_oracle(seed in 0u64..1000, n in 1usize..=32, k in 1usize..=32, m in 1usize..=32) {
            let mut rng = Rng::new(seed);
            let a = rand_matrix(&mut rng, n, k, 1.0);
            let b = rand_matrix(&mut rng, k, m, 1.0);
            let got = matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (x, y) in got.data().iter().zip(want.data()) {
                let tol = 1e-6f32.max(1e-6 * y.abs());
                prop_assert!((x - y).abs() <= tol);
            }
        }

        #[test]
        fn prop_softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-1.0e4f32..1.0e4, 1..12), 1..8)) {
            let cols = rows[0].len();
            let rect: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let refs: Vec<&[f32]> = rect.iter().map(|r| r.as_slice()).collect();
            let m = Matrix::from_rows(&refs);
            let s = softmax_rows(&m, None).unwrap();
            prop_assert!(s.all_finite());
            for i in 0..s.rows() {
                let sum: f32 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn prop_softmax_shift_invariant(row in proptest::collection::vec(-8.0f32..8.0, 2..10), shift in -8.0f32..8.0) {
            // Magnitudes kept small enough that `v + shift` rounds by at
            // most a few ulps; the output perturbation stays below 1e-5.
            let shifted: Vec<f32> = row.iter().map(|v| v + shift).collect();
            let a = Matrix::from_rows(&[&row]);
            let b = Matrix::from_rows(&[&shifted]);
            let sa = softmax_rows(&a, None).unwrap();
            let sb = softmax_rows(&b, None).unwrap();
            for (x, y) in sa.data().iter().zip(sb.data()) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }
    }
}
