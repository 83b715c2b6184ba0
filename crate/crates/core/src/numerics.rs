//! Dense linear algebra and statistics kernels shared by the analysis stages.
//!
//! Everything here is a pure function of its inputs. Randomized routines take
//! an explicit seed and draw from a ChaCha stream, so equal seeds reproduce
//! bit-identical output on every platform.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Square matrix whose storage is symmetric by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T: Real> {
    data: DMatrix<T>,
}

impl<T: Real> SymMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        Self {
            data: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    /// Builds the matrix from `f(i, j)` evaluated on the upper triangle only.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            for i in 0..=j {
                let v = f(i, j);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data }
    }

    /// Wraps a dense matrix that must already be exactly symmetric and finite.
    pub fn from_dense(m: DMatrix<T>) -> Result<Self> {
        check_square_finite(&m)?;
        for j in 0..m.ncols() {
            for i in 0..j {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::InvalidMatrix(format!(
                        "entry ({i},{j}) differs from its transpose"
                    )));
                }
            }
        }
        Ok(Self { data: m })
    }

    /// Replaces `m` by `(m + mᵀ)/2`, written once per pair so the result is exactly symmetric.
    pub fn symmetrize(mut m: DMatrix<T>) -> Result<Self> {
        check_square_finite(&m)?;
        let half = T::lit(0.5);
        for j in 0..m.ncols() {
            for i in 0..j {
                let v = (m[(i, j)] + m[(j, i)]) * half;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(Self { data: m })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[(i, j)]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[(i, j)] = v;
        self.data[(j, i)] = v;
    }

    pub fn as_dense(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_dense(self) -> DMatrix<T> {
        self.data
    }

    pub fn diagonal(&self) -> DVector<T> {
        self.data.diagonal()
    }

    pub fn trace(&self) -> T {
        pairwise_sum(self.data.diagonal().as_slice())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            data: &self.data * c,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeError(format!(
                "cannot add {0}x{0} and {1}x{1}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(Self {
            data: &self.data + &other.data,
        })
    }

    /// Largest absolute entry; handy for relative tolerances.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

fn check_square_finite<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidMatrix(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Eigen-pairs of a symmetric matrix, eigenvalues non-increasing,
/// `vectors.column(i)` paired with `values[i]`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition<T: Real> {
    pub values: DVector<T>,
    pub vectors: DMatrix<T>,
}

impl<T: Real> EigenDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.values[j];
        }
        &scaled * self.vectors.transpose()
    }

    /// The leading `n` eigenvectors as a `dim × n` matrix.
    pub fn leading_vectors(&self, n: usize) -> DMatrix<T> {
        self.vectors.columns(0, n.min(self.dim())).into_owned()
    }
}

/// Full symmetric eigendecomposition, eigenvalues sorted descending.
///
/// Ties keep the solver's order (stable sort). Each eigenvector is flipped so
/// that its largest-magnitude entry (first one on ties) is positive. The solve
/// runs in `f64` on a single thread regardless of `T`.
pub fn sym_eig<T: Real>(m: &SymMatrix<T>) -> Result<EigenDecomposition<T>> {
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("matrix has non-finite entries".into()));
    }
    let n = m.dim();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let evd = to_faer(m)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::InvalidMatrix(format!("eigensolver failed: {e:?}")))?;
    let raw_values = evd.S().column_vector();
    let raw_vectors = evd.U();
    let raw: Vec<f64> = (0..n).map(|k| raw_values[k]).collect();
    let order = descending_order(&raw);
    let values = DVector::from_iterator(n, order.iter().map(|&k| T::lit(raw[k])));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = raw_vectors.col(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = T::lit(sign * col[i]);
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Eigenvalues only, sorted descending. Much cheaper than [`sym_eig`] for large matrices.
pub fn sym_eigenvalues<T: Real>(m: &SymMatrix<T>) -> Result<DVector<T>> {
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("matrix has non-finite entries".into()));
    }
    if m.dim() == 0 {
        return Ok(DVector::zeros(0));
    }
    let raw = to_faer(m)
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::InvalidMatrix(format!("eigensolver failed: {e:?}")))?;
    let order = descending_order(&raw);
    Ok(DVector::from_iterator(
        raw.len(),
        order.iter().map(|&k| T::lit(raw[k])),
    ))
}

fn to_faer<T: Real>(m: &SymMatrix<T>) -> faer::Mat<f64> {
    let d = m.as_dense();
    faer::Mat::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)].as_f64())
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Mixes a base seed with stream identifiers (splitmix64 finalizer), so that
/// per-trial and per-pair generators are independent yet reproducible.
pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &s in streams {
        h = splitmix(h.wrapping_add(splitmix(s.wrapping_add(0xD1B5_4A32_D192_ED03))));
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows × cols` matrix of i.i.d. standard normals, filled column by column.
pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded back into Q.
pub fn random_orthogonal<T: Real>(dim: usize, seed: u64) -> Result<DMatrix<T>> {
    haar_frame(dim, dim, seed)
}

/// The first `k` columns of `random_orthogonal(dim, seed)`.
///
/// Column `j` of a Householder QR depends only on the first `j + 1` input
/// columns, and the Gaussian fill is column-major, so this equals the leading
/// block of the full draw (up to rounding) at `O(dim·k²)` cost.
pub fn haar_frame<T: Real>(dim: usize, k: usize, seed: u64) -> Result<DMatrix<T>> {
    if dim == 0 {
        return Err(Error::InvalidDimension("orthogonal matrix of dimension 0".into()));
    }
    if k == 0 || k > dim {
        return Err(Error::InvalidDimension(format!(
            "frame of {k} columns in dimension {dim}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let g = gaussian_matrix::<T>(dim, k, &mut rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        if r[(j, j)] < T::zero() {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    Ok(q)
}

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitResult<T: Real> {
    pub slope: T,
    pub intercept: T,
    pub r_squared: T,
    pub n_points: usize,
    /// Pairs dropped because one coordinate was not strictly positive (or not finite).
    pub dropped: usize,
}

/// Ordinary least squares on mean-centered logs; the intercept is that of the
/// uncentered fit `log y = slope·log x + intercept`.
pub fn ols_loglog<T: Real>(x: &[T], y: &[T]) -> Result<FitResult<T>> {
    if x.len() != y.len() {
        return Err(Error::ShapeError(format!(
            "x has {} points, y has {}",
            x.len(),
            y.len()
        )));
    }
    let (lx, ly): (Vec<T>, Vec<T>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > T::zero() && **b > T::zero() && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    let n = lx.len();
    let dropped = x.len() - n;
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} usable points after dropping {dropped} non-positive pairs"
        )));
    }
    let nf = T::count(n);
    let mx = pairwise_sum(&lx) / nf;
    let my = pairwise_sum(&ly) / nf;
    let dx: Vec<T> = lx.iter().map(|v| *v - mx).collect();
    let dy: Vec<T> = ly.iter().map(|v| *v - my).collect();
    let sxx = pairwise_sum(&dx.iter().map(|v| *v * *v).collect::<Vec<_>>());
    let syy = pairwise_sum(&dy.iter().map(|v| *v * *v).collect::<Vec<_>>());
    let sxy = pairwise_sum(&dx.iter().zip(&dy).map(|(a, b)| *a * *b).collect::<Vec<_>>());
    if sxx <= T::zero() {
        return Err(Error::InsufficientData(
            "all x values coincide; slope is undefined".into(),
        ));
    }
    let slope = sxy / sxx;
    let r_squared = if syy <= T::zero() {
        T::one()
    } else {
        (sxy * sxy / (sxx * syy)).min(T::one()).max(T::zero())
    };
    Ok(FitResult {
        slope,
        intercept: my - slope * mx,
        r_squared,
        n_points: n,
        dropped,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::ShapeError(format!(
            "x has {} points, y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("need at least two points".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = T::count(x.len());
    let mx = pairwise_sum(&rx) / n;
    let my = pairwise_sum(&ry) / n;
    let mut sxx = T::zero();
    let mut syy = T::zero();
    let mut sxy = T::zero();
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (*a - mx, *b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return Err(Error::Undefined(
            "rank correlation of a constant series".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).min(T::one()).max(-T::one()))
}

fn average_ranks<T: Real>(v: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie run i..=j shares the mean rank
        let avg = T::count(i + j + 2) / T::lit(2.0);
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pairwise (tree) summation: deterministic and O(log n) error growth.
pub fn pairwise_sum<T: Real>(v: &[T]) -> T {
    const LEAF: usize = 16;
    if v.len() <= LEAF {
        return v.iter().fold(T::zero(), |acc, x| acc + *x);
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Row-stacking vectorization: entry `(r, c)` of an `rows × cols` matrix lands at `r·cols + c`.
pub fn vec_rows<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let (rows, cols) = m.shape();
    DVector::from_fn(rows * cols, |k, _| m[(k / cols, k % cols)])
}

/// Inverse of [`vec_rows`].
pub fn unvec_rows<T: Real>(v: &[T], rows: usize, cols: usize) -> Result<DMatrix<T>> {
    if v.len() != rows * cols {
        return Err(Error::ShapeError(format!(
            "vector of length {} cannot be reshaped to {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

/// Dense `Σ_q M_q ⊗ (a_q a_qᵀ)` for `k × k` factors `M_q` (read through
/// `m(q, r, r')`) and activity rows `a_q` (rows of `acts`, `Q × n`).
///
/// Block `(r, r')` equals `Aᵀ diag(M_·[r, r']) A`, so the work is one small
/// gemm per block instead of `Q` rank-one updates of the full matrix. Blocks
/// are independent, which keeps the parallel version deterministic.
pub fn kron_sum<T: Real>(
    k: usize,
    acts: &DMatrix<T>,
    m: impl Fn(usize, usize, usize) -> T + Sync,
) -> Result<SymMatrix<T>> {
    use rayon::prelude::*;
    let n = acts.ncols();
    let dim = k * n;
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|r| (r..k).map(move |s| (r, s))).collect();
    let blocks: Vec<DMatrix<T>> = pairs
        .par_iter()
        .map(|&(r, s)| {
            let mut scaled = acts.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= m(i, r, s);
            }
            acts.tr_mul(&scaled)
        })
        .collect();
    let mut out = DMatrix::zeros(dim, dim);
    for (&(r, s), b) in pairs.iter().zip(&blocks) {
        out.view_mut((r * n, s * n), (n, n)).copy_from(b);
        if r != s {
            out.view_mut((s * n, r * n), (n, n)).copy_from(&b.transpose());
        }
    }
    SymMatrix::symmetrize(out)
}
