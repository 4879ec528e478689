//! Small dense complex kernels for the K ≤ 8 matrices used by the separator.
//!
//! [`CVec`] and [`CMat`] are fixed-capacity, `Copy` value types so the
//! per-frame hot path never touches the heap. Only the leading `dim`
//! entries (or `dim × dim` block) are meaningful.

use num_complex::Complex64;
use thiserror::Error;

/// Largest supported channel count.
pub const MAX_K: usize = 8;

/// Relative pivot threshold below which a matrix is treated as singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-13;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dimension {0} outside supported range 1..={MAX_K}")]
    UnsupportedDimension(usize),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("singular matrix: pivot {pivot:e} below tolerance relative to row norm {row_norm:e}")]
    Singular { pivot: f64, row_norm: f64 },
    #[error("negative rank-1 weight {0}")]
    NegativeWeight(f64),
    #[error("forgetting factor {0} outside [0, 1]")]
    InvalidBlend(f64),
}

/// Operation tallies used to check which kernels run on a code path.
///
/// Counters are thread-local so concurrently running tests do not see each
/// other's work.
pub mod counters {
    use std::cell::Cell;

    thread_local! {
        static SOLVES: Cell<u64> = const { Cell::new(0) };
        static INVERSIONS: Cell<u64> = const { Cell::new(0) };
        static CMACS: Cell<u64> = const { Cell::new(0) };
    }

    /// Snapshot of the counters on the current thread.
    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct Counts {
        pub solves: u64,
        pub inversions: u64,
        /// Complex multiply-accumulate operations.
        pub cmacs: u64,
    }

    impl std::ops::Sub for Counts {
        type Output = Counts;
        fn sub(self, rhs: Counts) -> Counts {
            Counts {
                solves: self.solves - rhs.solves,
                inversions: self.inversions - rhs.inversions,
                cmacs: self.cmacs - rhs.cmacs,
            }
        }
    }

    pub fn snapshot() -> Counts {
        Counts {
            solves: SOLVES.with(Cell::get),
            inversions: INVERSIONS.with(Cell::get),
            cmacs: CMACS.with(Cell::get),
        }
    }

    pub fn reset() {
        SOLVES.with(|c| c.set(0));
        INVERSIONS.with(|c| c.set(0));
        CMACS.with(|c| c.set(0));
    }

    #[inline]
    pub(crate) fn solve() {
        SOLVES.with(|c| c.set(c.get() + 1));
    }

    #[inline]
    pub(crate) fn inversion() {
        INVERSIONS.with(|c| c.set(c.get() + 1));
    }

    #[inline]
    pub(crate) fn cmacs(n: usize) {
        CMACS.with(|c| c.set(c.get() + n as u64));
    }
}

fn check_dim(dim: usize) -> Result<(), LinalgError> {
    if dim == 0 || dim > MAX_K {
        Err(LinalgError::UnsupportedDimension(dim))
    } else {
        Ok(())
    }
}

fn same_dim(expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

/// Complex column vector of length `dim ≤ MAX_K`.
#[derive(Clone, Copy, PartialEq)]
pub struct CVec {
    dim: usize,
    data: [Complex64; MAX_K],
}

impl CVec {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim <= MAX_K, "dimension {dim} exceeds MAX_K");
        CVec {
            dim,
            data: [ZERO; MAX_K],
        }
    }

    /// Canonical basis vector `e_k` (0-based `k`).
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[k] = ONE;
        v
    }

    pub fn from_slice(values: &[Complex64]) -> Result<Self, LinalgError> {
        check_dim(values.len())?;
        let mut v = Self::zeros(values.len());
        v.data[..values.len()].copy_from_slice(values);
        Ok(v)
    }

    pub fn from_real(values: &[f64]) -> Result<Self, LinalgError> {
        check_dim(values.len())?;
        let mut v = Self::zeros(values.len());
        for (d, &x) in v.data.iter_mut().zip(values) {
            *d = Complex64::new(x, 0.0);
        }
        Ok(v)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[Complex64] {
        &self.data[..self.dim]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data[..self.dim]
    }

    /// Squared Euclidean norm.
    pub fn norm_sqr(&self) -> f64 {
        self.as_slice().iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `a^H b`.
    pub fn dot(&self, other: &CVec) -> Complex64 {
        debug_assert_eq!(self.dim, other.dim);
        counters::cmacs(self.dim);
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .fold(ZERO, |acc, (a, b)| acc + a.conj() * b)
    }

    /// Euclidean distance `‖a − b‖`.
    pub fn distance(&self, other: &CVec) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, c: Complex64) -> CVec {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|z| *z *= c);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice()
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl std::ops::Index<usize> for CVec {
    type Output = Complex64;
    #[inline]
    fn index(&self, i: usize) -> &Complex64 {
        &self.as_slice()[i]
    }
}

impl std::ops::IndexMut<usize> for CVec {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut Complex64 {
        &mut self.as_mut_slice()[i]
    }
}

impl std::fmt::Debug for CVec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

/// Square complex matrix of side `dim ≤ MAX_K`, stored row-major with
/// stride `dim`.
#[derive(Clone, Copy, PartialEq)]
pub struct CMat {
    dim: usize,
    data: [Complex64; MAX_K * MAX_K],
}

impl CMat {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim <= MAX_K, "dimension {dim} exceeds MAX_K");
        CMat {
            dim,
            data: [ZERO; MAX_K * MAX_K],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = Complex64::new(c, 0.0);
        }
        m
    }

    pub fn diag(values: &[f64]) -> Result<Self, LinalgError> {
        check_dim(values.len())?;
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = Complex64::new(v, 0.0);
        }
        Ok(m)
    }

    /// Builds a matrix from row slices; every row must have `rows.len()` entries.
    pub fn from_rows<R: AsRef<[Complex64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        check_dim(dim)?;
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            same_dim(dim, row.len())?;
            for (j, &z) in row.iter().enumerate() {
                m[(i, j)] = z;
            }
        }
        Ok(m)
    }

    pub fn from_real_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        check_dim(dim)?;
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            same_dim(dim, row.len())?;
            for (j, &x) in row.iter().enumerate() {
                m[(i, j)] = Complex64::new(x, 0.0);
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[Complex64] {
        &self.data[..self.dim * self.dim]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data[..self.dim * self.dim]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Complex64] {
        let d = self.dim;
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn column(&self, j: usize) -> CVec {
        let mut v = CVec::zeros(self.dim);
        for i in 0..self.dim {
            v[i] = self[(i, j)];
        }
        v
    }

    /// Copies only the active block, which is cheaper than a full `Copy`
    /// for small `dim`.
    #[inline]
    pub fn copy_from(&mut self, other: &CMat) {
        self.dim = other.dim;
        self.as_mut_slice().copy_from_slice(other.as_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice()
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.as_slice()
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn adjoint(&self) -> CMat {
        let mut out = CMat::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    /// Whether `M == M^H` up to `tol × ‖M‖_F`.
    pub fn is_hermitian(&self, tol: f64) -> bool {
        let scale = self.frobenius_norm().max(f64::MIN_POSITIVE);
        (0..self.dim).all(|i| {
            (i..self.dim).all(|j| (self[(i, j)] - self[(j, i)].conj()).norm() <= tol * scale)
        })
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for (a, b) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a -= b;
        }
        out
    }

    pub fn scale(&self, c: Complex64) -> CMat {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|z| *z *= c);
        out
    }

    pub fn mul_vec(&self, x: &CVec) -> CVec {
        debug_assert_eq!(self.dim, x.dim());
        let d = self.dim;
        counters::cmacs(d * d);
        let mut out = CVec::zeros(d);
        for i in 0..d {
            out[i] = self
                .row(i)
                .iter()
                .zip(x.as_slice())
                .fold(ZERO, |acc, (a, b)| acc + a * b);
        }
        out
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        debug_assert_eq!(self.dim, other.dim);
        let d = self.dim;
        counters::cmacs(d * d * d);
        let mut out = CMat::zeros(d);
        for i in 0..d {
            for l in 0..d {
                let a = self[(i, l)];
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[l * d + j];
                }
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.dim && j < self.dim);
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.dim && j < self.dim);
        let d = self.dim;
        &mut self.data[i * d + j]
    }
}

impl std::fmt::Debug for CMat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut list = f.debug_list();
        for i in 0..self.dim {
            list.entry(&self.row(i));
        }
        list.finish()
    }
}

/// `a^H U b`. When `a` and `b` are the same vector and `U` is Hermitian the
/// imaginary part is pure rounding noise and is dropped.
pub fn quad_form(a: &CVec, u: &CMat, b: &CVec) -> Result<Complex64, LinalgError> {
    same_dim(u.dim(), a.dim())?;
    same_dim(u.dim(), b.dim())?;
    let val = quad_form_unchecked(a.as_slice(), u, b.as_slice());
    if a == b && val.im.abs() <= 1e-12 * val.norm() {
        Ok(Complex64::new(val.re, 0.0))
    } else {
        Ok(val)
    }
}

/// Real-valued `a^H U a` for Hermitian `U`.
pub fn hermitian_form(a: &CVec, u: &CMat) -> Result<f64, LinalgError> {
    same_dim(u.dim(), a.dim())?;
    Ok(quad_form_unchecked(a.as_slice(), u, a.as_slice()).re)
}

/// `a^H U b` over raw slices; `a` and `b` must have length `u.dim()`.
#[inline]
pub(crate) fn quad_form_unchecked(a: &[Complex64], u: &CMat, b: &[Complex64]) -> Complex64 {
    let d = u.dim();
    counters::cmacs(d * d + d);
    let mut acc = ZERO;
    for (i, ai) in a.iter().enumerate() {
        let ub = u
            .row(i)
            .iter()
            .zip(b)
            .fold(ZERO, |s, (uij, bj)| s + uij * bj);
        acc += ai.conj() * ub;
    }
    acc
}

/// LU factorization with partial pivoting of a `dim × dim` block.
#[derive(Clone, Copy)]
struct Lu {
    lu: CMat,
    perm: [usize; MAX_K],
    swaps: usize,
}

fn lu_factor(m: &CMat) -> Result<Lu, LinalgError> {
    let d = m.dim();
    let mut row_norm = [0.0f64; MAX_K];
    for (i, n) in row_norm.iter_mut().enumerate().take(d) {
        *n = m.row(i).iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    let mut lu = *m;
    let mut perm = [0usize; MAX_K];
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    let mut swaps = 0;
    let mut ops = 0;
    for c in 0..d {
        let (p, pmag) = (c..d)
            .map(|r| (r, lu[(r, c)].norm()))
            .fold(
                (c, -1.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        let rn = row_norm[perm[p]];
        if !(pmag >= SINGULAR_PIVOT_RTOL * rn) || pmag == 0.0 {
            return Err(LinalgError::Singular {
                pivot: pmag,
                row_norm: rn,
            });
        }
        if p != c {
            for j in 0..d {
                lu.data.swap(c * d + j, p * d + j);
            }
            perm.swap(c, p);
            swaps += 1;
        }
        let inv_pivot = lu[(c, c)].inv();
        for r in c + 1..d {
            let factor = lu[(r, c)] * inv_pivot;
            lu[(r, c)] = factor;
            for j in c + 1..d {
                let v = lu[(c, j)];
                lu[(r, j)] -= factor * v;
            }
            ops += d - c;
        }
    }
    counters::cmacs(ops);
    Ok(Lu { lu, perm, swaps })
}

fn lu_solve(f: &Lu, rhs: &CVec) -> CVec {
    let d = f.lu.dim();
    let mut x = CVec::zeros(d);
    for i in 0..d {
        x[i] = rhs[f.perm[i]];
    }
    for i in 0..d {
        let mut s = x[i];
        for j in 0..i {
            s -= f.lu[(i, j)] * x[j];
        }
        x[i] = s;
    }
    for i in (0..d).rev() {
        let mut s = x[i];
        for j in i + 1..d {
            s -= f.lu[(i, j)] * x[j];
        }
        x[i] = s / f.lu[(i, i)];
    }
    counters::cmacs(d * d);
    x
}

/// Solves `M z = e_k` (0-based `k`).
pub fn solve_unit(m: &CMat, k: usize) -> Result<CVec, LinalgError> {
    check_dim(m.dim())?;
    if k >= m.dim() {
        return Err(LinalgError::IndexOutOfRange {
            index: k,
            dim: m.dim(),
        });
    }
    counters::solve();
    let f = lu_factor(m)?;
    Ok(lu_solve(&f, &CVec::basis(m.dim(), k)))
}

pub fn inverse(m: &CMat) -> Result<CMat, LinalgError> {
    check_dim(m.dim())?;
    counters::inversion();
    let d = m.dim();
    let f = lu_factor(m)?;
    let mut out = CMat::zeros(d);
    for j in 0..d {
        let col = lu_solve(&f, &CVec::basis(d, j));
        for i in 0..d {
            out[(i, j)] = col[i];
        }
    }
    Ok(out)
}

/// `log |det M|`.
pub fn log_abs_det(m: &CMat) -> Result<f64, LinalgError> {
    check_dim(m.dim())?;
    let f = lu_factor(m)?;
    debug_assert!(f.swaps <= m.dim());
    Ok((0..m.dim()).map(|i| f.lu[(i, i)].norm().ln()).sum())
}

/// `α U + (1 − α) w x x^H`, re-symmetrized so the result is exactly
/// conjugate-symmetric with a real diagonal.
pub fn rank1_blend(u: &CMat, alpha: f64, weight: f64, x: &CVec) -> Result<CMat, LinalgError> {
    same_dim(u.dim(), x.dim())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LinalgError::InvalidBlend(alpha));
    }
    if !(weight >= 0.0) {
        return Err(LinalgError::NegativeWeight(weight));
    }
    let mut out = CMat::zeros(u.dim());
    rank1_blend_into(&mut out, u, alpha, weight, x.as_slice());
    Ok(out)
}

/// In-place form of [`rank1_blend`]; `out` may alias nothing in `u`. Inputs
/// are assumed validated.
#[inline]
pub(crate) fn rank1_blend_into(out: &mut CMat, u: &CMat, alpha: f64, weight: f64, x: &[Complex64]) {
    let d = u.dim();
    out.dim = d;
    let beta = (1.0 - alpha) * weight;
    counters::cmacs(d * (d + 1) / 2);
    for i in 0..d {
        let diag = alpha * u[(i, i)].re + beta * x[i].norm_sqr();
        out.data[i * d + i] = Complex64::new(diag, 0.0);
        for j in i + 1..d {
            let upper = u[(i, j)] * alpha + x[i] * x[j].conj() * beta;
            let lower = u[(j, i)] * alpha + x[j] * x[i].conj() * beta;
            let sym = (upper + lower.conj()) * 0.5;
            out.data[i * d + j] = sym;
            out.data[j * d + i] = sym.conj();
        }
    }
}
