//! Solution sets of quadratic matrix inequalities
//! `Z(N) = { Z : [I; Z]ᵀ N [I; Z] ⪰ 0 }` with `N` partitioned as `q + r`.
//!
//! Covers membership tests, the matrix-ellipsoid class (`N22 ⪯ 0`, `ker N22 ⊆ ker N12`,
//! `N|N22 ⪰ 0`) and its center/radius form, explicit parametrization of members,
//! S-lemma certificates for inclusions `Z(N) ⊆ Z⁺(M)`, and images under `Z ↦ Z W`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dims, Error, Result};
use crate::lmi::{BlockLmi, Expr, Kind, LmiProblem, Mode};
use crate::matkit::{
    self, kernel_contains, pinv, psd_pinv_sqrt, psd_sqrt, schur_complement, spectral_norm, Mat, SymMat,
    PSD_TOL, RANK_TOL,
};

/// Default tolerance for membership tests, applied after normalizing by `|N|_F`.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// The set `Z_{q,r}(N)`; members are `r x q` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct QmiSet {
    n: SymMat,
    q: usize,
    r: usize,
}

impl QmiSet {
    pub fn new(n: SymMat, q: usize) -> Result<Self> {
        if q > n.dim() {
            return Err(Error::DimensionMismatch {
                context: "QmiSet::new",
                expected: format!("q <= {}", n.dim()),
                got: q.to_string(),
            });
        }
        let r = n.dim() - q;
        Ok(QmiSet { n, q, r })
    }

    pub fn matrix(&self) -> &SymMat {
        &self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n11(&self) -> SymMat {
        self.n.principal(0, self.q)
    }

    pub fn n12(&self) -> Mat {
        self.n.as_mat().view((0, self.q), (self.q, self.r)).into_owned()
    }

    pub fn n22(&self) -> SymMat {
        self.n.principal(self.q, self.r)
    }

    /// `[I; Z]ᵀ N [I; Z]`.
    pub fn quadratic(&self, z: &Mat) -> Result<SymMat> {
        if z.shape() != (self.r, self.q) {
            return Err(Error::DimensionMismatch {
                context: "QmiSet::quadratic",
                expected: dims(self.r, self.q),
                got: dims(z.nrows(), z.ncols()),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("QmiSet::quadratic"));
        }
        let stacked = matkit::vstack(&[&Mat::identity(self.q, self.q), z]);
        Ok(self.n.congruence_t(&stacked))
    }

    /// Membership; the test is `λmin / max(1, |N|_F) ≥ -tol` (non-strict) or `≥ tol` (strict).
    pub fn contains(&self, z: &Mat, strict: bool, tol: f64) -> Result<bool> {
        let f = self.quadratic(z)?;
        let scale = self.n.fro_norm().max(1.0);
        let lam = f.min_eig() / scale;
        Ok(if strict { lam >= tol } else { lam >= -tol })
    }

    /// Returns the center/radius form when `N` lies in the matrix-ellipsoid class.
    pub fn ellipsoid(&self, tol: f64) -> Option<EllipsoidForm> {
        let scale = self.n.fro_norm().max(1.0);
        let n22 = self.n22();
        if self.r > 0 && n22.max_eig() > tol * scale {
            return None;
        }
        if self.r > 0 && !kernel_contains(&n22, &self.n12(), tol.max(1e-9)) {
            return None;
        }
        let sc = schur_complement(&self.n, self.q);
        if self.q > 0 && sc.min_eig() < -tol * scale {
            return None;
        }
        let neg = n22.scale(-1.0);
        let q_mat = psd_sqrt(&sc).ok().or_else(|| {
            let e = matkit::eig(&sc);
            Some(e.map(|v| v.max(0.0).sqrt()))
        })?;
        let r_mat = psd_sqrt(&neg).ok().or_else(|| {
            let e = matkit::eig(&neg);
            Some(e.map(|v| v.max(0.0).sqrt()))
        })?;
        let n22p = pinv(&n22, RANK_TOL);
        let center = -(n22p.as_mat() * self.n12().transpose());
        let r_pinv = pinv(&r_mat, RANK_TOL);
        let free = Mat::identity(self.r, self.r) - r_pinv.as_mat() * r_mat.as_mat();
        Some(EllipsoidForm {
            q_mat,
            r_mat,
            center,
            r_pinv,
            free_proj: SymMat::symmetrize(free),
        })
    }

    pub fn is_ellipsoid(&self) -> bool {
        self.ellipsoid(PSD_TOL).is_some()
    }
}

/// `[I; Z]ᵀ N [I; Z] = Q² - (Z - Zc)ᵀ R² (Z - Zc)` for `N` in the ellipsoid class.
#[derive(Clone, Debug)]
pub struct EllipsoidForm {
    /// `(N|N22)^{1/2}`, `q x q`.
    pub q_mat: SymMat,
    /// `(-N22)^{1/2}`, `r x r`.
    pub r_mat: SymMat,
    /// `-N22⁺ N21`, `r x q`.
    pub center: Mat,
    pub r_pinv: SymMat,
    /// Projector onto `ker N22`, the unbounded directions.
    pub free_proj: SymMat,
}

impl EllipsoidForm {
    /// `Zc + R⁺ Ξ Q + P_ker H`; lies in the set whenever `|Ξ| ≤ 1`.
    pub fn member(&self, xi: &Mat, h: Option<&Mat>) -> Mat {
        let mut z = &self.center + self.r_pinv.as_mat() * xi * self.q_mat.as_mat();
        if let Some(h) = h {
            z += self.free_proj.as_mat() * h;
        }
        z
    }

    pub fn is_bounded(&self) -> bool {
        self.free_proj.fro_norm() < 1e-9
    }
}

/// `Δ̂ = -Φ12 Φ22⁺ + (Φ|Φ22)^{1/2} M1 (-Φ22)^{-1/2} + M2 (I - Φ22 Φ22⁺)` for
/// `M1 M1ᵀ ⪯ I`; the result (`q x r`) satisfies `Δ̂ᵀ ∈ Z(Φ)`.
pub fn explicit_param(set: &QmiSet, m1: &Mat, m2: &Mat) -> Result<Mat> {
    let (q, r) = (set.q, set.r);
    for (name, m) in [("M1", m1), ("M2", m2)] {
        if m.shape() != (q, r) {
            let _ = name;
            return Err(Error::DimensionMismatch {
                context: "explicit_param",
                expected: dims(q, r),
                got: dims(m.nrows(), m.ncols()),
            });
        }
    }
    let nrm = spectral_norm(m1);
    if nrm > 1.0 + 1e-12 {
        return Err(Error::NormBound(nrm));
    }
    set.ellipsoid(PSD_TOL).ok_or(Error::NotEllipsoid)?;
    let phi22 = set.n22();
    let p22 = pinv(&phi22, RANK_TOL);
    let sc = psd_sqrt(&schur_complement(&set.n, q))
        .unwrap_or_else(|_| matkit::eig(&schur_complement(&set.n, q)).map(|v| v.max(0.0).sqrt()));
    let neg_isqrt = psd_pinv_sqrt(&phi22.scale(-1.0), RANK_TOL)?;
    let proj = Mat::identity(r, r) - phi22.as_mat() * p22.as_mat();
    Ok(-(set.n12() * p22.as_mat()) + sc.as_mat() * m1 * neg_isqrt.as_mat() + m2 * proj)
}

/// Multipliers for `M - α N ⪰ diag(β I_q, 0)` with `α ≥ 0`, `β > 0`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SlemCertificate {
    pub alpha: f64,
    pub beta: f64,
}

fn check_pair(m: &SymMat, n: &SymMat) -> Result<()> {
    if m.dim() != n.dim() {
        return Err(Error::DimensionMismatch {
            context: "S-lemma",
            expected: m.dim().to_string(),
            got: n.dim().to_string(),
        });
    }
    Ok(())
}

/// Residual `M - α N - diag(β I_q, 0)`.
pub fn slem_residual(m: &SymMat, n: &SymMat, cert: &SlemCertificate, q: usize) -> SymMat {
    let mut d = vec![0.0; m.dim()];
    d[..q].iter_mut().for_each(|v| *v = cert.beta);
    m.sub(&n.scale(cert.alpha)).sub(&SymMat::from_diagonal(&d))
}

/// Validates a certificate: `α ≥ 0`, `β > 0` and the residual is PSD up to `tol`
/// (relative to `max(1, |M|_F)`).
pub fn slem_certificate_check(m: &SymMat, n: &SymMat, cert: &SlemCertificate, q: usize, tol: f64) -> bool {
    if m.dim() != n.dim() || cert.alpha < 0.0 || cert.beta <= 0.0 {
        return false;
    }
    let res = slem_residual(m, n, cert, q);
    res.min_eig() >= -tol * m.fro_norm().max(1.0)
}

/// Searches for a certificate of `Z(N) ⊆ Z⁺(M)` maximizing `β`. Returns `Ok(None)` when no
/// certificate exists.
pub fn find_slem_certificate(m: &SymMat, n: &SymMat, q: usize) -> Result<Option<SlemCertificate>> {
    check_pair(m, n)?;
    let dim = m.dim();
    let sm = m.fro_norm().max(1e-300);
    let sn = n.fro_norm().max(1e-300);
    let mh = m.scale(1.0 / sm);
    let nh = n.scale(1.0 / sn);

    let mut p = LmiProblem::new();
    let alpha = p.scalar();
    let beta = p.scalar();
    let mut d = Mat::zeros(dim, dim);
    for i in 0..q {
        d[(i, i)] = 1.0;
    }
    let lmi = Expr::constant(mh.as_mat().clone())
        .sub(Expr::scalar(alpha, nh.as_mat()))
        .sub(Expr::scalar(beta, &d));
    p.add(BlockLmi::single(lmi), Kind::NonStrict);
    p.add(BlockLmi::single(Expr::var(beta)), Kind::Strict);
    p.add(BlockLmi::single(Expr::var(alpha)), Kind::Bound);
    p.add(
        BlockLmi::single(Expr::constant(Mat::from_element(1, 1, 1e4)).sub(Expr::var(alpha))),
        Kind::Bound,
    );
    p.add(
        BlockLmi::single(Expr::constant(Mat::from_element(1, 1, 10.0)).sub(Expr::var(beta))),
        Kind::Bound,
    );
    let tol = 1e-7;
    let s1 = p.solve(Mode::Phase1 { t_max: 1.0 })?;
    let sol = if s1.margin > tol {
        s1
    } else if s1.margin < -tol {
        return Ok(None);
    } else {
        match p.solve(Mode::StrictOnly { t_max: 1.0 }) {
            Ok(s) if s.margin > tol => s,
            _ => return Ok(None),
        }
    };
    let cert = SlemCertificate {
        alpha: sol.scalar(alpha).max(0.0) * sm / sn,
        beta: sol.scalar(beta) * sm,
    };
    if slem_certificate_check(m, n, &cert, q, 1e-7) {
        Ok(Some(cert))
    } else {
        Ok(None)
    }
}

/// `Π_W = diag(Wᵀ, I) Π diag(W, I)` describing `{Z W : Z ∈ Z(Π)}` (`W` is `q x p`).
/// The flag reports whether the image is exact (`W` full column rank or `Π22` nonsingular);
/// otherwise `Z(Π_W)` is a superset.
pub fn image_transform(set: &QmiSet, w: &Mat) -> Result<(QmiSet, bool)> {
    if w.nrows() != set.q {
        return Err(Error::DimensionMismatch {
            context: "image_transform",
            expected: format!("{} rows", set.q),
            got: dims(w.nrows(), w.ncols()),
        });
    }
    let t = matkit::blockdiag(&[w, &Mat::identity(set.r, set.r)]);
    let pw = set.n.congruence_t(&t);
    let full_col = matkit::rank(w, RANK_TOL) == w.ncols();
    let n22_nonsing = set.r == 0 || matkit::rank(set.n22().as_mat(), RANK_TOL) == set.r;
    Ok((QmiSet::new(pw, w.ncols())?, full_col || n22_nonsing))
}

/// Least-squares preimage: for `Y ∈ Z(Π_W)` returns `Z ∈ Z(Π)` with `Z W = Y`, valid when
/// the image is exact and `Π` lies in the ellipsoid class.
pub fn image_preimage(set: &QmiSet, w: &Mat, y: &Mat) -> Result<Mat> {
    let form = set.ellipsoid(PSD_TOL).ok_or(Error::NotEllipsoid)?;
    let g = y - &form.center * w;
    let qw = form.q_mat.as_mat() * w;
    let qwp = matkit::pinv_rect(&qw, RANK_TOL);
    let wp = matkit::pinv_rect(w, RANK_TOL);
    let rr = form.r_pinv.as_mat() * form.r_mat.as_mat();
    Ok(&form.center + &rr * &g * qwp * form.q_mat.as_mat() + (Mat::identity(set.r, set.r) - rr) * g * wp)
}

/// Lossy multi-multiplier check `M - Σ αⱼ Nⱼ ⪰ 0` with `αⱼ ≥ 0`.
pub fn multi_slem_check(m: &SymMat, ns: &[SymMat], alphas: &[f64], tol: f64) -> bool {
    if ns.len() != alphas.len() || alphas.iter().any(|a| *a < 0.0) || ns.iter().any(|n| n.dim() != m.dim()) {
        return false;
    }
    let mut acc = m.clone();
    for (n, a) in ns.iter().zip(alphas) {
        acc = acc.sub(&n.scale(*a));
    }
    acc.min_eig() >= -tol * m.fro_norm().max(1.0)
}

/// Draws from the operator-norm unit ball: a Gaussian direction rescaled by its largest
/// singular value and a radius `u^{1/(rows·cols)}`. With `on_boundary` the radius is one.
pub fn sample_operator_ball<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R, on_boundary: bool) -> Mat {
    if rows == 0 || cols == 0 {
        return Mat::zeros(rows, cols);
    }
    let g = Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = spectral_norm(&g).max(1e-300);
    let radius = if on_boundary {
        1.0
    } else {
        rng.gen::<f64>().powf(1.0 / (rows * cols) as f64)
    };
    g * (radius / s)
}
