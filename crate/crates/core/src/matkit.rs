//! Dense symmetric linear algebra used throughout the crate: eigendecompositions,
//! pseudo-inverses, PSD square roots, generalized Schur complements and range/kernel
//! tests. All rank decisions use a tolerance relative to the largest singular value.

use nalgebra::{DMatrix, DVector};

use crate::error::{dims, Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative threshold below which singular values/eigenvalues count as zero.
pub const RANK_TOL: f64 = 1e-9;
/// Relative slack allowed when declaring a matrix positive semidefinite.
pub const PSD_TOL: f64 = 1e-9;

/// A real symmetric matrix. Construction checks symmetry and then stores the exactly
/// symmetrized matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat(Mat);

impl SymMat {
    /// Accepts `m` if it is square, finite and symmetric up to `1e-9` relative.
    pub fn new(m: Mat) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                context: "SymMat::new",
                expected: "square".into(),
                got: dims(m.nrows(), m.ncols()),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SymMat::new"));
        }
        let asym = (&m - m.transpose()).norm();
        if asym > 1e-9 * m.norm().max(1.0) {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self::symmetrize(m))
    }

    /// Returns `(m + mᵀ)/2` without any checks.
    pub fn symmetrize(m: Mat) -> Self {
        let t = m.transpose();
        SymMat((m + t) * 0.5)
    }

    pub fn zeros(n: usize) -> Self {
        SymMat(Mat::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMat(Mat::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMat(Mat::from_diagonal(&Vector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat(&self.0 * s)
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        SymMat(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMat) -> SymMat {
        SymMat(&self.0 - &other.0)
    }

    /// `Gᵀ S G` for arbitrary `G`.
    pub fn congruence_t(&self, g: &Mat) -> SymMat {
        SymMat::symmetrize(g.transpose() * &self.0 * g)
    }

    /// `G S Gᵀ` for arbitrary `G`.
    pub fn congruence(&self, g: &Mat) -> SymMat {
        SymMat::symmetrize(g * &self.0 * g.transpose())
    }

    /// Principal submatrix on rows/cols `start..start+len`.
    pub fn principal(&self, start: usize, len: usize) -> SymMat {
        SymMat(self.0.view((start, start), (len, len)).into_owned())
    }

    pub fn fro_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn min_eig(&self) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        eigenvalues(self).iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eig(&self) -> f64 {
        if self.dim() == 0 {
            return f64::NEG_INFINITY;
        }
        eigenvalues(self).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// PSD test with slack `tol * max(1, |S|_F)`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eig() >= -tol * self.fro_norm().max(1.0)
    }
}

/// Eigenpairs sorted by ascending eigenvalue; `vectors` has unit-norm columns.
#[derive(Clone, Debug)]
pub struct EigDecomp {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl EigDecomp {
    pub fn reconstruct(&self) -> Mat {
        let d = Mat::from_diagonal(&Vector::from_column_slice(&self.values));
        &self.vectors * d * self.vectors.transpose()
    }

    /// Applies `f` to the spectrum and rebuilds a symmetric matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let v = f(self.values[j]);
            scaled.column_mut(j).scale_mut(v);
        }
        SymMat::symmetrize(scaled * self.vectors.transpose())
    }

    fn scale(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

fn eigenvalues(s: &SymMat) -> Vec<f64> {
    s.0.clone().symmetric_eigenvalues().iter().cloned().collect()
}

pub fn eig(s: &SymMat) -> EigDecomp {
    let n = s.dim();
    if n == 0 {
        return EigDecomp {
            values: vec![],
            vectors: Mat::zeros(0, 0),
        };
    }
    let e = s.0.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let values = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (j, &i) in idx.iter().enumerate() {
        vectors.set_column(j, &e.eigenvectors.column(i));
    }
    EigDecomp { values, vectors }
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn pinv(s: &SymMat, rank_tol: f64) -> SymMat {
    let e = eig(s);
    let thr = rank_tol * e.scale();
    e.map(|v| if v.abs() > thr { 1.0 / v } else { 0.0 })
}

/// Moore-Penrose pseudo-inverse of a rectangular matrix (via SVD).
pub fn pinv_rect(m: &Mat, rank_tol: f64) -> Mat {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Mat::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let thr = rank_tol * smax;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > thr && s > 0.0 {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Numerical rank relative to the largest singular value.
pub fn rank(m: &Mat, rank_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let thr = rank_tol * sv.max();
    sv.iter().filter(|&&s| s > thr && s > 0.0).count()
}

fn check_psd(e: &EigDecomp, context: &'static str) -> Result<()> {
    let lo = e.values.first().cloned().unwrap_or(0.0);
    if lo < -PSD_TOL * e.scale().max(1.0) {
        let _ = context;
        return Err(Error::NotPsd(lo));
    }
    Ok(())
}

/// Symmetric PSD square root; eigenvalues within tolerance of zero are clamped.
pub fn psd_sqrt(s: &SymMat) -> Result<SymMat> {
    let e = eig(s);
    check_psd(&e, "psd_sqrt")?;
    Ok(e.map(|v| v.max(0.0).sqrt()))
}

/// `(S⁺)^{1/2}` for PSD `S`.
pub fn psd_pinv_sqrt(s: &SymMat, rank_tol: f64) -> Result<SymMat> {
    let e = eig(s);
    check_psd(&e, "psd_pinv_sqrt")?;
    let thr = rank_tol * e.scale();
    Ok(e.map(|v| if v > thr { 1.0 / v.sqrt() } else { 0.0 }))
}

/// Generalized Schur complement `A - B D⁺ Bᵀ` of the trailing block starting at `split`.
pub fn schur_complement(s: &SymMat, split: usize) -> SymMat {
    let n = s.dim();
    let a = s.0.view((0, 0), (split, split));
    let b = s.0.view((0, split), (split, n - split));
    let d = SymMat(s.0.view((split, split), (n - split, n - split)).into_owned());
    let dp = pinv(&d, RANK_TOL);
    SymMat::symmetrize(a - b * dp.as_mat() * b.transpose())
}

/// Schur complement of the leading block: `D - Bᵀ A⁺ B` with `A` the first `split` rows/cols.
pub fn schur_complement_leading(s: &SymMat, split: usize) -> SymMat {
    let n = s.dim();
    let a = SymMat(s.0.view((0, 0), (split, split)).into_owned());
    let b = s.0.view((0, split), (split, n - split));
    let d = s.0.view((split, split), (n - split, n - split));
    let ap = pinv(&a, RANK_TOL);
    SymMat::symmetrize(d - b.transpose() * ap.as_mat() * b)
}

/// Orthonormal basis (columns) of `im M`.
pub fn range_basis(m: &Mat, rank_tol: f64) -> Mat {
    let (nr, nc) = m.shape();
    if nr == 0 || nc == 0 {
        return Mat::zeros(nr, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > rank_tol * smax && svd.singular_values[k] > 0.0)
        .collect();
    let mut out = Mat::zeros(nr, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        let mut col = u.column(k).into_owned();
        // Deterministic sign: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        out.set_column(j, &col);
    }
    out
}

/// Orthonormal basis of `ker S` for symmetric `S`.
pub fn kernel_basis(s: &SymMat, rank_tol: f64) -> Mat {
    let e = eig(s);
    let thr = rank_tol * e.scale();
    let keep: Vec<usize> = (0..e.values.len()).filter(|&k| e.values[k].abs() <= thr).collect();
    let mut out = Mat::zeros(s.dim(), keep.len());
    for (j, &k) in keep.iter().enumerate() {
        out.set_column(j, &e.vectors.column(k));
    }
    out
}

/// `ker S ⊆ ker B` where `B` has as many columns as `S` has rows.
pub fn kernel_contains(s: &SymMat, b: &Mat, tol: f64) -> bool {
    let k = kernel_basis(s, RANK_TOL);
    if k.ncols() == 0 {
        return true;
    }
    let scale = s.fro_norm().max(b.norm()).max(1.0);
    (b * k).norm() <= tol * scale
}

/// `im B ⊆ im C` tested via the orthogonal projector onto `im C`.
pub fn range_contains(c: &Mat, b: &Mat, tol: f64) -> bool {
    let proj = c * pinv_rect(c, RANK_TOL);
    let resid = b - &proj * b;
    resid.norm() <= tol * b.norm().max(1.0)
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Block-diagonal concatenation.
pub fn blockdiag(blocks: &[&Mat]) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), b.shape()).copy_from(*b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

/// Horizontal concatenation; all blocks must share the row count.
pub fn hstack(blocks: &[&Mat]) -> Mat {
    let r = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let mut j = 0;
    for b in blocks {
        assert_eq!(b.nrows(), r, "hstack row mismatch");
        out.view_mut((0, j), b.shape()).copy_from(*b);
        j += b.ncols();
    }
    out
}

/// Vertical concatenation; all blocks must share the column count.
pub fn vstack(blocks: &[&Mat]) -> Mat {
    let c = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(r, c);
    let mut i = 0;
    for b in blocks {
        assert_eq!(b.ncols(), c, "vstack column mismatch");
        out.view_mut((i, 0), b.shape()).copy_from(*b);
        i += b.nrows();
    }
    out
}

/// Assembles a symmetric matrix from its upper block triangle. `get(i, j)` for `i <= j`
/// returns the block or `None` for zero.
pub fn sym_blocks(sizes: &[usize], get: impl Fn(usize, usize) -> Option<Mat>) -> SymMat {
    let n: usize = sizes.iter().sum();
    let offs: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let mut out = Mat::zeros(n, n);
    for i in 0..sizes.len() {
        for j in i..sizes.len() {
            if let Some(b) = get(i, j) {
                assert_eq!(b.shape(), (sizes[i], sizes[j]), "block ({i},{j}) shape");
                out.view_mut((offs[i], offs[j]), b.shape()).copy_from(&b);
                if i != j {
                    out.view_mut((offs[j], offs[i]), (sizes[j], sizes[i]))
                        .copy_from(&b.transpose());
                }
            }
        }
    }
    SymMat::symmetrize(out)
}

/// Solves `X = A X Aᵀ + Q` for Schur-stable `A` through the Kronecker system.
pub fn dlyap(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let kron = a.kronecker(a);
    let lhs = Mat::identity(n * n, n * n) - kron;
    let rhs = Vector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&rhs).ok_or(Error::Singular)?;
    let x = Mat::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves `A X = B` for SPD `A`, falling back to LU.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone().lu().solve(b).ok_or(Error::Singular)
}

pub fn inverse(a: &Mat) -> Result<Mat> {
    a.clone().try_inverse().ok_or(Error::Singular)
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Row-major nested arrays to a matrix; an empty outer list gives `0 x 0`.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    let m = Mat::from_fn(nr, nc, |i, j| rows[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    Ok(m)
}

/// Serde adapters storing matrices as row-major nested arrays.
pub mod rows {
    use super::{from_rows, to_rows, Mat};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let v = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&v).map_err(D::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
            m.as_ref().map(to_rows).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Mat>, D::Error> {
            match Option::<Vec<Vec<f64>>>::deserialize(d)? {
                Some(v) => from_rows(&v).map(Some).map_err(D::Error::custom),
                None => Ok(None),
            }
        }
    }

    pub mod map {
        use super::*;
        use std::collections::BTreeMap;

        pub fn serialize<S: Serializer>(m: &BTreeMap<String, Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
            m.iter().map(|(k, v)| (k.clone(), to_rows(v))).collect::<BTreeMap<_, _>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, Mat>, D::Error> {
            BTreeMap::<String, Vec<Vec<f64>>>::deserialize(d)?
                .into_iter()
                .map(|(k, v)| from_rows(&v).map(|m| (k, m)).map_err(D::Error::custom))
                .collect()
        }
    }
}
