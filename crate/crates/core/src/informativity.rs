//! Consistency matrices and the synthesis LMIs: quadratic stabilization (plain and with the
//! image-of-`N22` reduction), H2 and H∞ state feedback, AR output feedback, and structured
//! perturbations (outer QMI approximation, joint co-design, two-step baseline).
//!
//! Every S-lemma constraint is posed in shifted coordinates: with `Zc` the least-squares
//! estimate `[A B]ᵀ` of the data, the constraint is congruence-transformed by
//! `[I 0; Zc I]`, which is exact and removes the cancellation between the large data terms
//! of `N`. Certificates are always re-checked in the original coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{shift_matrices, DataRecord, PerturbationModel};
use crate::error::{dims, Error, Result};
use crate::lmi::{BlockLmi, Expr, Kind, LmiProblem, LmiSolution, Mode, Var};
use crate::matkit::{self, inverse, range_basis, rows, Mat, SymMat, RANK_TOL};
use crate::qmi::QmiSet;

/// Margin threshold that separates a certificate from an infeasibility verdict.
pub const CERT_TOL: f64 = 1e-7;
/// Allowed relative violation of non-strict constraints on re-verification.
pub const RESIDUAL_TOL: f64 = 1e-7;
/// Margin applied to strict inequalities when optimizing.
pub const STRICT_MARGIN: f64 = 1e-6;
const BOX: f64 = 1e4;
const BOX_PERF: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    InformativeCertified,
    NotCertified,
    SolverError,
}

/// Outcome of a synthesis call. `p` holds `P` for stabilization problems and `Y` for the
/// performance problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub method: String,
    pub status: Status,
    /// The LMI is necessary as well as sufficient for this data model.
    pub necessary: bool,
    #[serde(rename = "K", with = "rows::option")]
    pub k: Option<Mat>,
    #[serde(rename = "P", with = "rows::option")]
    pub p: Option<Mat>,
    #[serde(rename = "L", with = "rows::option")]
    pub l: Option<Mat>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    #[serde(with = "rows::map")]
    pub aux: BTreeMap<String, Mat>,
    /// Relative minimum eigenvalues (or absolute residuals for equalities) of the
    /// defining constraints, re-evaluated in the original coordinates.
    pub residuals: BTreeMap<String, f64>,
    pub margin: Option<f64>,
    pub message: Option<String>,
    pub wall_time_ms: Option<u64>,
}

impl SynthesisResult {
    fn new(method: &str, necessary: bool) -> Self {
        SynthesisResult {
            method: method.to_string(),
            status: Status::NotCertified,
            necessary,
            k: None,
            p: None,
            l: None,
            alpha: None,
            beta: None,
            gamma: None,
            aux: BTreeMap::new(),
            residuals: BTreeMap::new(),
            margin: None,
            message: None,
            wall_time_ms: None,
        }
    }

    pub fn certified(&self) -> bool {
        self.status == Status::InformativeCertified
    }

    fn fail(mut self, status: Status, msg: impl Into<String>) -> Self {
        self.status = status;
        self.message = Some(msg.into());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `N = [E 𝐗] Φ̂ [E 𝐗]ᵀ` with its ellipsoid verdict and an orthonormal basis of `im N22`.
#[derive(Clone, Debug)]
pub struct ConsistencyMatrix {
    pub n_mat: QmiSet,
    pub in_pi: bool,
    pub n22_rank: usize,
    pub v_basis: Mat,
    /// Factor `G` and middle matrix `Φ` with `N = G Φ Gᵀ`.
    factor: (Mat, SymMat),
}

impl ConsistencyMatrix {
    fn from_factor(g: Mat, phi: SymMat, q: usize) -> Result<Self> {
        let n = phi.congruence(&g);
        let set = QmiSet::new(n, q)?;
        let in_pi = set.is_ellipsoid();
        let v = range_basis(set.n22().as_mat(), RANK_TOL);
        Ok(ConsistencyMatrix {
            n22_rank: v.ncols(),
            v_basis: v,
            in_pi,
            n_mat: set,
            factor: (g, phi),
        })
    }

    pub fn matrix(&self) -> &SymMat {
        self.n_mat.matrix()
    }

    /// Rows of `V` belonging to the state block (`V₊`).
    pub fn v_plus(&self, n: usize) -> Mat {
        self.v_basis.rows(0, n).into_owned()
    }

    /// Rows of `V` belonging to the input block (`V₋`).
    pub fn v_minus(&self, n: usize) -> Mat {
        let r = self.v_basis.nrows();
        self.v_basis.rows(n, r - n).into_owned()
    }
}

pub fn build_n(data: &DataRecord, model: &PerturbationModel) -> Result<ConsistencyMatrix> {
    match model {
        PerturbationModel::Single { e, phi_hat } => {
            model.validate(data.n_d(), data.t())?;
            let g = matkit::hstack(&[e, &data.stacked()]);
            ConsistencyMatrix::from_factor(g, phi_hat.matrix().clone(), data.q())
        }
        PerturbationModel::Structured { .. } => {
            Err(Error::Config("consistency matrix needs a single-QMI model".into()))
        }
    }
}

/// `N = [I 𝐗] Φ [I 𝐗]ᵀ` for an outer approximation `Φ` of a structured set.
pub fn build_n_from_phi(data: &DataRecord, phi: &SymMat) -> Result<ConsistencyMatrix> {
    let nd = data.n_d();
    if phi.dim() != nd + data.t() {
        return Err(Error::DimensionMismatch {
            context: "build_n_from_phi",
            expected: (nd + data.t()).to_string(),
            got: phi.dim().to_string(),
        });
    }
    let g = matkit::hstack(&[&Mat::identity(nd, nd), &data.stacked()]);
    ConsistencyMatrix::from_factor(g, phi.clone(), data.q())
}

/// `T = [I_q 0; Zc I_r]` with `Zc` the least-squares `[A B]ᵀ`.
fn shift_frame(data: &DataRecord) -> Mat {
    let (q, r) = (data.q(), data.nx() + data.m());
    let reg = matkit::vstack(&[&data.x, &data.u]);
    let ab = &data.x_plus * matkit::pinv_rect(&reg, RANK_TOL);
    let mut t = Mat::identity(q + r, q + r);
    t.view_mut((q, 0), (r, q)).copy_from(&ab.transpose());
    t
}

/// `Tᵀ (M - diag(N_term, 0)) T`-type constraint: `m` is given in original coordinates,
/// `n_term` already in shifted coordinates and occupies the leading `t.nrows()` rows.
fn slemma_block(m: &BlockLmi, t: &Mat, n_term: Expr) -> BlockLmi {
    let dim = m.dim();
    let k = t.nrows();
    let full = matkit::blockdiag(&[t, &Mat::identity(dim - k, dim - k)]);
    let mut sel = Mat::zeros(dim, k);
    sel.view_mut((0, 0), (k, k)).fill_with_identity();
    let e = m.to_expr().congruence_by(&full.transpose()).sub(n_term.congruence_by(&sel));
    BlockLmi::single(e)
}

/// Shifted and normalized `N`: returns `(N̂, s)` with `N' = s N̂`.
fn shifted_n(t: &Mat, factor: &(Mat, SymMat)) -> (Mat, f64) {
    let g = t.transpose() * &factor.0;
    let n = factor.1.congruence(&g);
    let s = n.fro_norm().max(1e-300);
    (n.as_mat() / s, s)
}

enum Verdict {
    Feasible(LmiSolution),
    Infeasible(f64),
    Error(String),
}

/// Margin-based feasibility decision; see [`crate::lmi`].
fn decide(p: &LmiProblem) -> Verdict {
    let first = p.solve(Mode::Phase1 { t_max: 1.0 });
    if let Ok(s) = &first {
        if s.margin > CERT_TOL {
            return Verdict::Feasible(s.clone());
        }
        if s.margin < -CERT_TOL {
            return Verdict::Infeasible(s.margin);
        }
    }
    match p.solve(Mode::StrictOnly { t_max: 1.0 }) {
        Ok(s) if s.margin > CERT_TOL => Verdict::Feasible(s),
        Ok(s) => Verdict::Infeasible(s.margin),
        Err(e) => match first {
            Ok(s) => Verdict::Infeasible(s.margin),
            Err(_) => Verdict::Error(e.to_string()),
        },
    }
}

/// `λ_min(F) / max(1, |F|_F)`.
pub fn rel_min_eig(f: &SymMat) -> f64 {
    if f.dim() == 0 {
        return f64::INFINITY;
    }
    f.min_eig() / f.fro_norm().max(1.0)
}

/// Applies the re-verification rule: non-strict residuals `≥ -RESIDUAL_TOL`, strict ones `> 0`.
fn finish(mut res: SynthesisResult, checks: &[(&str, f64, bool)], margin: f64) -> SynthesisResult {
    let mut ok = true;
    for &(name, v, strict) in checks {
        res.residuals.insert(name.to_string(), v);
        let pass = if strict { v > 0.0 } else { v >= -RESIDUAL_TOL };
        ok &= pass && v.is_finite();
    }
    res.margin = Some(margin);
    if ok {
        res.status = Status::InformativeCertified;
    } else {
        res.status = Status::NotCertified;
        res.message = Some("solver point failed re-verification".into());
    }
    res
}

fn verdict_to_solution(res: SynthesisResult, v: Verdict) -> std::result::Result<LmiSolution, SynthesisResult> {
    match v {
        Verdict::Feasible(s) => Ok(s),
        Verdict::Infeasible(m) => {
            let mut r = res;
            r.margin = Some(m);
            Err(r.fail(Status::NotCertified, format!("no certificate (margin {m:.3e})")))
        }
        Verdict::Error(e) => Err(res.fail(Status::SolverError, e)),
    }
}

fn require_state_data(data: &DataRecord, context: &'static str) -> Result<()> {
    if data.q() != data.nx() {
        return Err(Error::DimensionMismatch {
            context,
            expected: "state data with X₊ and X of equal height".into(),
            got: format!("{} and {}", data.q(), data.nx()),
        });
    }
    Ok(())
}

fn scalar_id(v: Var, n: usize) -> Expr {
    Expr::scalar(v, &Mat::identity(n, n))
}

fn trace_expr(v: Var, n: usize) -> Expr {
    let mut e = Expr::zeros(1, 1);
    for i in 0..n {
        let mut u = Mat::zeros(n, 1);
        u[(i, 0)] = 1.0;
        e = e.add(Expr::var(v).lmul(&u.transpose()).rmul(&u));
    }
    e
}

fn pad_n(n: &SymMat, dim: usize) -> Mat {
    let mut out = Mat::zeros(dim, dim);
    out.view_mut((0, 0), (n.dim(), n.dim())).copy_from(n.as_mat());
    out
}

// ---------------------------------------------------------------------------------------
// Numeric forms of the constraints, used for re-verification and cross-checks.

/// `M(P, L, β)` with blocks `(n, n, m, n)`.
pub fn m_qstab(p: &SymMat, l: &Mat, beta: f64) -> SymMat {
    let n = p.dim();
    let m = l.nrows();
    let pm = p.as_mat();
    matkit::sym_blocks(&[n, n, m, n], |i, j| match (i, j) {
        (0, 0) => Some(pm - Mat::identity(n, n) * beta),
        (1, 1) => Some(-pm),
        (1, 2) => Some(-l.transpose()),
        (2, 3) => Some(l.clone()),
        (3, 3) => Some(pm.clone()),
        _ => None,
    })
}

/// `M(P, L, β) - α diag(N, 0)`.
pub fn lmi_qstab(p: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat) -> SymMat {
    let m = m_qstab(p, l, beta);
    SymMat::symmetrize(m.as_mat() - pad_n(n, m.dim()) * alpha)
}

/// `[P L ᵀ]ᵀ P⁻¹ [P Lᵀ]` style product `W P⁻¹ Wᵀ` with `W = [X; L]`.
fn stacked_quad(x: &Mat, l: &Mat, mid_inv: &Mat) -> Mat {
    let w = matkit::vstack(&[x, l]);
    &w * mid_inv * w.transpose()
}

/// `diag(P, -[P; L] P⁻¹ [P; L]ᵀ) - α N - diag(β I, 0)`.
pub fn qstab_pre_schur(p: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat) -> Result<SymMat> {
    let k = p.dim();
    let pinv = inverse(p.as_mat())?;
    let quad = stacked_quad(p.as_mat(), l, &pinv);
    let m = matkit::blockdiag(&[&(p.as_mat() - Mat::identity(k, k) * beta), &(-quad)]);
    Ok(SymMat::symmetrize(m - n.as_mat() * alpha))
}

fn c_yl(y: &Mat, l: &Mat, c: &Mat, d: &Mat) -> Mat {
    c * y + d * l
}

/// Main H2 constraint with blocks `(n, n, m, n, p)`.
pub fn lmi_h2(y: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat, c: &Mat, d: &Mat) -> SymMat {
    perf_lmi(y, l, alpha, beta, n, c, d, 0.0, 1.0)
}

/// Main H∞ constraint: as [`lmi_h2`] with `Y - I - βI` and `γ² I_p`.
#[allow(clippy::too_many_arguments)]
pub fn lmi_hinf(y: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat, c: &Mat, d: &Mat, gamma: f64) -> SymMat {
    perf_lmi(y, l, alpha, beta, n, c, d, 1.0, gamma * gamma)
}

#[allow(clippy::too_many_arguments)]
fn perf_lmi(y: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat, c: &Mat, d: &Mat, shift: f64, g2: f64) -> SymMat {
    let k = y.dim();
    let m = l.nrows();
    let pp = c.nrows();
    let ym = y.as_mat();
    let cyl = c_yl(ym, l, c, d);
    let f = matkit::sym_blocks(&[k, k, m, k, pp], |i, j| match (i, j) {
        (0, 0) => Some(ym - Mat::identity(k, k) * (beta + shift)),
        (1, 3) => Some(ym.clone()),
        (2, 3) => Some(l.clone()),
        (3, 3) => Some(ym.clone()),
        (3, 4) => Some(cyl.transpose()),
        (4, 4) => Some(Mat::identity(pp, pp) * g2),
        _ => None,
    });
    SymMat::symmetrize(f.as_mat() - pad_n(n, f.dim()) * alpha)
}

/// `[Y C_YLᵀ; C_YL g2 I]`.
pub fn lmi_yl(y: &SymMat, l: &Mat, c: &Mat, d: &Mat, g2: f64) -> SymMat {
    let cyl = c_yl(y.as_mat(), l, c, d);
    let pp = c.nrows();
    matkit::sym_blocks(&[y.dim(), pp], |i, j| match (i, j) {
        (0, 0) => Some(y.as_mat().clone()),
        (0, 1) => Some(cyl.transpose()),
        (1, 1) => Some(Mat::identity(pp, pp) * g2),
        _ => None,
    })
}

/// `[Z I; I Y]`.
pub fn lmi_zy(z: &SymMat, y: &SymMat) -> SymMat {
    let k = y.dim();
    matkit::sym_blocks(&[k, k], |i, j| match (i, j) {
        (0, 0) => Some(z.as_mat().clone()),
        (0, 1) => Some(Mat::identity(k, k)),
        (1, 1) => Some(y.as_mat().clone()),
        _ => None,
    })
}

/// `diag(Y - shift I, -[Y; L](Y - C_YLᵀC_YL / g2)⁻¹[Y; L]ᵀ) - α N - diag(β I, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn perf_pre_schur(
    y: &SymMat,
    l: &Mat,
    alpha: f64,
    beta: f64,
    n: &SymMat,
    c: &Mat,
    d: &Mat,
    shift: f64,
    g2: f64,
) -> Result<SymMat> {
    let k = y.dim();
    let ym = y.as_mat();
    let cyl = c_yl(ym, l, c, d);
    let mid = ym - cyl.transpose() * &cyl / g2;
    let quad = stacked_quad(ym, l, &inverse(&mid)?);
    let m = matkit::blockdiag(&[&(ym - Mat::identity(k, k) * (shift + beta)), &(-quad)]);
    Ok(SymMat::symmetrize(m - n.as_mat() * alpha))
}

/// AR main constraint with blocks `(p, nx, m, nx - p, nx)`.
pub fn lmi_ar(p: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat, pdim: usize) -> SymMat {
    let nx = p.dim();
    let m = l.nrows();
    let (j1, j2) = shift_matrices(pdim, m, nx / (pdim + m));
    let pm = p.as_mat();
    let jpl = &j1 * pm + &j2 * l;
    let f = matkit::sym_blocks(&[pdim, nx, m, nx - pdim, nx], |i, j| match (i, j) {
        (0, 0) => Some(pm.view((0, 0), (pdim, pdim)) - Mat::identity(pdim, pdim) * beta),
        (0, 3) => Some(pm.view((0, pdim), (pdim, nx - pdim)).into_owned()),
        (1, 4) => Some(pm.clone()),
        (2, 4) => Some(l.clone()),
        (3, 3) => Some(pm.view((pdim, pdim), (nx - pdim, nx - pdim)).into_owned()),
        (3, 4) => Some(jpl.clone()),
        (4, 4) => Some(pm.clone()),
        _ => None,
    });
    SymMat::symmetrize(f.as_mat() - pad_n(n, f.dim()) * alpha)
}

/// `[P22 J_PL; J_PLᵀ P]`.
pub fn lmi_ar_z(p: &SymMat, l: &Mat, pdim: usize) -> SymMat {
    let nx = p.dim();
    let m = l.nrows();
    let (j1, j2) = shift_matrices(pdim, m, nx / (pdim + m));
    let pm = p.as_mat();
    let jpl = &j1 * pm + &j2 * l;
    matkit::sym_blocks(&[nx - pdim, nx], |i, j| match (i, j) {
        (0, 0) => Some(pm.view((pdim, pdim), (nx - pdim, nx - pdim)).into_owned()),
        (0, 1) => Some(jpl.clone()),
        (1, 1) => Some(pm.clone()),
        _ => None,
    })
}

/// `M_AR - α N - diag(β I, 0)` written with `L = K P`.
pub fn ar_pre_schur(p: &SymMat, l: &Mat, alpha: f64, beta: f64, n: &SymMat, pdim: usize) -> Result<SymMat> {
    let nx = p.dim();
    let m = l.nrows();
    let (j1, j2) = shift_matrices(pdim, m, nx / (pdim + m));
    let pm = p.as_mat();
    let pinv = inverse(pm)?;
    let jpl = &j1 * pm + &j2 * l;
    let w = matkit::vstack(&[pm, l]);
    let p22 = pm.view((pdim, pdim), (nx - pdim, nx - pdim)).into_owned();
    let z = &p22 - &jpl * &pinv * jpl.transpose();
    let zinv = inverse(&z)?;
    let p11 = pm.view((0, 0), (pdim, pdim)).into_owned();
    let p12 = pm.view((0, pdim), (pdim, nx - pdim)).into_owned();
    let base = matkit::blockdiag(&[&p11, &(-(&w * &pinv * w.transpose()))]);
    let h = matkit::vstack(&[&p12, &(-(&w * &pinv * jpl.transpose()))]);
    let mar = base - &h * zinv * h.transpose();
    let mut shift = Mat::zeros(mar.nrows(), mar.ncols());
    shift.view_mut((0, 0), (pdim, pdim)).fill_with_identity();
    Ok(SymMat::symmetrize(mar - n.as_mat() * alpha - shift * beta))
}

/// Left side of the reduced constraint: `[P̄ 0 0; 0 0 Ȳ; 0 Ȳᵀ P̄] - ᾱ diag(N̄, 0)`.
pub fn lmi_qstab_stable(pb: &SymMat, yb: &Mat, alpha: f64, nbar: &SymMat) -> SymMat {
    let n = pb.dim();
    let k = yb.nrows();
    let f = matkit::sym_blocks(&[n, k, n], |i, j| match (i, j) {
        (0, 0) => Some(pb.as_mat().clone()),
        (1, 2) => Some(yb.clone()),
        (2, 2) => Some(pb.as_mat().clone()),
        _ => None,
    });
    SymMat::symmetrize(f.as_mat() - pad_n(nbar, f.dim()) * alpha)
}

// ---------------------------------------------------------------------------------------
// Quadratic stabilization.

fn qstab_from_factor(
    data: &DataRecord,
    factor: &(Mat, SymMat),
    method: &str,
    necessary: bool,
) -> Result<SynthesisResult> {
    require_state_data(data, method_context(method))?;
    let (n, m) = (data.nx(), data.m());
    let t = shift_frame(data);
    let (nh, s) = shifted_n(&t, factor);
    let n_orig = factor.1.congruence(&factor.0);

    let mut prob = LmiProblem::new();
    let pv = prob.sym(n);
    let lv = prob.mat(m, n);
    let av = prob.scalar();
    let bv = prob.scalar();
    let mut mb = BlockLmi::new(&[n, n, m, n]);
    mb.set(0, 0, Expr::var(pv).sub(scalar_id(bv, n)));
    mb.set(1, 1, Expr::var(pv).scale(-1.0));
    mb.set(1, 2, Expr::var(lv).t().scale(-1.0));
    mb.set(2, 3, Expr::var(lv));
    mb.set(3, 3, Expr::var(pv));
    prob.add(slemma_block(&mb, &t, Expr::scalar(av, &nh)), Kind::NonStrict);
    prob.add(BlockLmi::single(Expr::var(pv)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(bv)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(av)), Kind::Bound);
    prob.add(BlockLmi::single(Expr::identity(n).sub(Expr::var(pv))), Kind::Bound);
    prob.set_box(BOX);

    let res = SynthesisResult::new(method, necessary);
    let sol = match verdict_to_solution(res.clone(), decide(&prob)) {
        Ok(s) => s,
        Err(r) => return Ok(r),
    };
    let p = sol.sym(pv);
    let l = sol.mat(lv);
    let alpha = sol.scalar(av).max(0.0) / s;
    let beta = sol.scalar(bv);
    let mut res = res;
    res.k = inverse(p.as_mat()).ok().map(|pi| &l * pi);
    res.alpha = Some(alpha);
    res.beta = Some(beta);
    let lmi = lmi_qstab(&p, &l, alpha, beta, &n_orig);
    let checks = [
        ("lmi_qstab", rel_min_eig(&lmi), false),
        ("P", p.min_eig(), true),
        ("beta", beta, true),
    ];
    res.p = Some(p.into_mat());
    res.l = Some(l);
    Ok(finish(res, &checks, sol.margin))
}

fn method_context(method: &str) -> &'static str {
    match method {
        "qstab" => "synth_qstab",
        _ => "synthesis",
    }
}

/// Quadratic stabilization through `M(P, L, β) - α diag(N, 0) ⪰ 0`.
pub fn synth_qstab(data: &DataRecord, model: &PerturbationModel) -> Result<SynthesisResult> {
    let cm = build_n(data, model)?;
    let necessary = model.exact_representation(data.q());
    qstab_from_factor(data, &cm.factor, "qstab", necessary)
}

/// Quadratic stabilization for a given `N = G Φ Gᵀ` (used by the two-step baseline).
pub fn synth_qstab_factor(data: &DataRecord, g: &Mat, phi: &SymMat, method: &str) -> Result<SynthesisResult> {
    if g.nrows() != data.n_d() || g.ncols() != phi.dim() {
        return Err(Error::DimensionMismatch {
            context: "synth_qstab_factor",
            expected: format!("G with {} rows and {} columns", data.n_d(), phi.dim()),
            got: dims(g.nrows(), g.ncols()),
        });
    }
    qstab_from_factor(data, &(g.clone(), phi.clone()), method, false)
}

/// Reduced formulation on `im N22` with the equality `P̄ = V₊ Ȳ`.
pub fn synth_qstab_stable(data: &DataRecord, model: &PerturbationModel) -> Result<SynthesisResult> {
    require_state_data(data, "synth_qstab_stable")?;
    let cm = build_n(data, model)?;
    if !cm.in_pi {
        return Err(Error::NotEllipsoid);
    }
    let n = data.nx();
    let k = cm.n22_rank;
    let v = cm.v_basis.clone();
    let vp = cm.v_plus(n);
    let vm = cm.v_minus(n);
    let d = matkit::blockdiag(&[&Mat::identity(n, n), &v]);
    let nbar = cm.matrix().congruence_t(&d);
    let s = nbar.fro_norm().max(1e-300);
    let nbh = nbar.as_mat() / s;

    let mut prob = LmiProblem::new();
    let pv = prob.sym(n);
    let yv = prob.mat(k, n);
    let av = prob.scalar();
    let mut b = BlockLmi::new(&[n + k, n]);
    let mut top = Expr::scalar(av, &nbh).scale(-1.0);
    let mut emb = Mat::zeros(n + k, n);
    emb.view_mut((0, 0), (n, n)).fill_with_identity();
    top = top.add(Expr::var(pv).congruence_by(&emb));
    b.set(0, 0, top);
    let mut emb_y = Mat::zeros(n + k, k);
    emb_y.view_mut((n, 0), (k, k)).fill_with_identity();
    b.set(0, 1, Expr::var(yv).lmul(&emb_y));
    b.set(1, 1, Expr::var(pv));
    prob.add(b, Kind::Strict);
    prob.equal(Expr::var(pv), Expr::var(yv).lmul(&vp));
    prob.add(BlockLmi::single(Expr::var(pv)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(av)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::identity(n).sub(Expr::var(pv))), Kind::Bound);
    prob.set_box(BOX);

    let necessary = model.exact_representation(data.q());
    let mut res = SynthesisResult::new("qstab-stable", necessary);
    let sol = match verdict_to_solution(res.clone(), decide(&prob)) {
        Ok(s) => s,
        Err(r) => return Ok(r),
    };
    let pb = sol.sym(pv);
    let yb = sol.mat(yv);
    let alpha = sol.scalar(av) / s;
    let l = &vm * &yb;
    let n_orig = cm.matrix();
    let beta = recover_beta(&pb, &l, alpha, n_orig);
    res.k = inverse(pb.as_mat()).ok().map(|pi| &l * pi);
    res.alpha = Some(alpha);
    res.beta = Some(beta);
    res.aux.insert("V".into(), v);
    res.aux.insert("Y_bar".into(), yb.clone());
    let reduced = lmi_qstab_stable(&pb, &yb, alpha, &nbar);
    let eq = (pb.as_mat() - &vp * &yb).amax();
    let full = lmi_qstab(&pb, &l, alpha, beta, n_orig);
    let checks = [
        ("lmi_reduced", rel_min_eig(&reduced), true),
        ("P", pb.min_eig(), true),
        ("alpha", alpha, true),
        ("equality", -eq, false),
        ("lmi_qstab", rel_min_eig(&full), false),
        ("beta", beta, true),
    ];
    res.p = Some(pb.into_mat());
    res.l = Some(l);
    Ok(finish(res, &checks, sol.margin))
}

/// Half of the largest `β` keeping `M(P, L, β) - α diag(N, 0)` numerically PSD.
fn recover_beta(p: &SymMat, l: &Mat, alpha: f64, n: &SymMat) -> f64 {
    let ok = |b: f64| rel_min_eig(&lmi_qstab(p, l, alpha, b, n)) >= -1e-10;
    let (mut lo, mut hi) = (0.0, p.max_eig().max(1e-12));
    if !ok(lo) {
        return 0.0;
    }
    if ok(hi) {
        return 0.5 * hi;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * lo
}

// ---------------------------------------------------------------------------------------
// H2 and H∞.

/// Known performance output `z = C x + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Performance {
    pub c: Mat,
    pub d: Mat,
}

impl Performance {
    pub fn new(c: Mat, d: Mat, n: usize, m: usize) -> Result<Self> {
        if c.ncols() != n || d.ncols() != m || c.nrows() != d.nrows() || c.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                context: "Performance",
                expected: format!("C p x {n}, D p x {m}, p >= 1"),
                got: format!("C {}, D {}", dims(c.nrows(), c.ncols()), dims(d.nrows(), d.ncols())),
            });
        }
        Ok(Performance { c, d })
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }
}

struct PerfVars {
    y: Var,
    l: Var,
    a: Var,
    b: Var,
}

/// Shared scaffolding of the H2 and H∞ constraints.
fn perf_problem(
    data: &DataRecord,
    factor: &(Mat, SymMat),
    perf: &Performance,
    shift: f64,
    g2: f64,
) -> (LmiProblem, PerfVars, f64) {
    let (n, m, pp) = (data.nx(), data.m(), perf.p());
    let t = shift_frame(data);
    let (nh, s) = shifted_n(&t, factor);
    let mut prob = LmiProblem::new();
    let y = prob.sym(n);
    let l = prob.mat(m, n);
    let a = prob.scalar();
    let b = prob.scalar();
    let cyl = || Expr::var(y).lmul(&perf.c).add(Expr::var(l).lmul(&perf.d));
    let mut mb = BlockLmi::new(&[n, n, m, n, pp]);
    let mut d00 = Expr::var(y).sub(scalar_id(b, n));
    if shift != 0.0 {
        d00 = d00.sub(Expr::constant(Mat::identity(n, n) * shift));
    }
    mb.set(0, 0, d00);
    mb.set(1, 3, Expr::var(y));
    mb.set(2, 3, Expr::var(l));
    mb.set(3, 3, Expr::var(y));
    mb.set(3, 4, cyl().t());
    mb.set(4, 4, Expr::constant(Mat::identity(pp, pp) * g2));
    prob.add(slemma_block(&mb, &t, Expr::scalar(a, &nh)), Kind::NonStrict);
    let mut yl = BlockLmi::new(&[n, pp]);
    yl.set(0, 0, Expr::var(y));
    yl.set(0, 1, cyl().t());
    yl.set(1, 1, Expr::constant(Mat::identity(pp, pp) * g2));
    prob.add(yl, Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(y)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(b)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(a)), Kind::Bound);
    prob.set_box(BOX_PERF);
    (prob, PerfVars { y, l, a, b }, s)
}

fn h2_impl(
    data: &DataRecord,
    model: &PerturbationModel,
    perf: &Performance,
    gamma: Option<f64>,
) -> Result<SynthesisResult> {
    require_state_data(data, "synth_h2")?;
    let cm = build_n(data, model)?;
    let (n, m) = (data.nx(), data.m());
    let perf = Performance::new(perf.c.clone(), perf.d.clone(), n, m)?;
    if let Some(g) = gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {g}")));
        }
    }
    let (mut prob, v, s) = perf_problem(data, &cm.factor, &perf, 0.0, 1.0);
    let z = prob.sym(n);
    let mut zy = BlockLmi::new(&[n, n]);
    zy.set(0, 0, Expr::var(z));
    zy.set(0, 1, Expr::identity(n));
    zy.set(1, 1, Expr::var(v.y));
    prob.add(zy, Kind::NonStrict);
    prob.add(BlockLmi::single(Expr::var(z)), Kind::Strict);
    if let Some(g) = gamma {
        let bound = Expr::constant(Mat::from_element(1, 1, g * g)).sub(trace_expr(z, n));
        prob.add(BlockLmi::single(bound), Kind::Strict);
    }
    let method = if gamma.is_some() { "h2" } else { "h2opt" };
    let necessary = model.exact_representation(data.q());
    let res = SynthesisResult::new(method, necessary);
    let mut sol = match verdict_to_solution(res.clone(), decide(&prob)) {
        Ok(s) => s,
        Err(r) => return Ok(r),
    };
    if gamma.is_none() {
        prob.minimize_trace(z, 1.0);
        if let Ok(opt) = prob.solve(Mode::Optimize { margin: STRICT_MARGIN }) {
            let ok = prob
                .constraints()
                .zip(prob.residuals(&opt.values))
                .all(|((_, kind), r)| match kind {
                    Kind::Strict => r > 0.0,
                    _ => r >= -RESIDUAL_TOL,
                });
            if ok {
                sol = opt;
            }
        }
    }
    let y = sol.sym(v.y);
    let l = sol.mat(v.l);
    let zm = sol.sym(z);
    let alpha = sol.scalar(v.a).max(0.0) / s;
    let beta = sol.scalar(v.b);
    let mut res = res;
    res.k = inverse(y.as_mat()).ok().map(|yi| &l * yi);
    res.alpha = Some(alpha);
    res.beta = Some(beta);
    let n_orig = cm.matrix();
    let main = lmi_h2(&y, &l, alpha, beta, n_orig, &perf.c, &perf.d);
    let yl = lmi_yl(&y, &l, &perf.c, &perf.d, 1.0);
    let zy = lmi_zy(&zm, &y);
    let tr_yinv = inverse(y.as_mat()).map(|yi| yi.trace()).unwrap_or(f64::INFINITY);
    let mut checks = vec![
        ("lmi_h2", rel_min_eig(&main), false),
        ("lmi_yl", rel_min_eig(&yl), true),
        ("lmi_zy", rel_min_eig(&zy), false),
        ("Y", y.min_eig(), true),
        ("beta", beta, true),
    ];
    if let Some(g) = gamma {
        checks.push(("trace_bound", g * g - tr_yinv, true));
    }
    res.gamma = Some(gamma.unwrap_or_else(|| tr_yinv.sqrt()));
    res.aux.insert("Z".into(), zm.into_mat());
    res.p = Some(y.into_mat());
    res.l = Some(l);
    Ok(finish(res, &checks, sol.margin))
}

/// H2 state feedback with prescribed performance level `γ`.
pub fn synth_h2(
    data: &DataRecord,
    model: &PerturbationModel,
    perf: &Performance,
    gamma: f64,
) -> Result<SynthesisResult> {
    h2_impl(data, model, perf, Some(gamma))
}

/// Minimizes `J = γ²` over the H2 constraints; reports `γ = (trace Y⁻¹)^{1/2}`.
pub fn synth_h2_optimal(data: &DataRecord, model: &PerturbationModel, perf: &Performance) -> Result<SynthesisResult> {
    h2_impl(data, model, perf, None)
}

/// H∞ state feedback with performance level `γ`.
pub fn synth_hinf(
    data: &DataRecord,
    model: &PerturbationModel,
    perf: &Performance,
    gamma: f64,
) -> Result<SynthesisResult> {
    require_state_data(data, "synth_hinf")?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let cm = build_n(data, model)?;
    let perf = Performance::new(perf.c.clone(), perf.d.clone(), data.nx(), data.m())?;
    let g2 = gamma * gamma;
    let (prob, v, s) = perf_problem(data, &cm.factor, &perf, 1.0, g2);
    let necessary = model.exact_representation(data.q());
    let res = SynthesisResult::new("hinf", necessary);
    let sol = match verdict_to_solution(res.clone(), decide(&prob)) {
        Ok(s) => s,
        Err(r) => return Ok(r),
    };
    let y = sol.sym(v.y);
    let l = sol.mat(v.l);
    let alpha = sol.scalar(v.a).max(0.0) / s;
    let beta = sol.scalar(v.b);
    let mut res = res;
    res.k = inverse(y.as_mat()).ok().map(|yi| &l * yi);
    res.alpha = Some(alpha);
    res.beta = Some(beta);
    res.gamma = Some(gamma);
    let main = lmi_hinf(&y, &l, alpha, beta, cm.matrix(), &perf.c, &perf.d, gamma);
    let yl = lmi_yl(&y, &l, &perf.c, &perf.d, g2);
    let checks = [
        ("lmi_hinf", rel_min_eig(&main), false),
        ("lmi_yl", rel_min_eig(&yl), true),
        ("Y", y.min_eig(), true),
        ("beta", beta, true),
    ];
    res.p = Some(y.into_mat());
    res.l = Some(l);
    Ok(finish(res, &checks, sol.margin))
}

// ---------------------------------------------------------------------------------------
// AR models.

/// Output dimension and order implied by lifted AR data with `p` outputs.
fn ar_dims(data: &DataRecord) -> Result<(usize, usize, usize)> {
    let (p, nx, m) = (data.q(), data.nx(), data.m());
    if p == 0 || nx % (p + m) != 0 || nx == 0 {
        return Err(Error::DimensionMismatch {
            context: "synth_ar",
            expected: format!("regressor height a multiple of p + m = {}", p + m),
            got: nx.to_string(),
        });
    }
    Ok((p, m, nx / (p + m)))
}

/// Quadratic stabilization of the lifted AR state by `u = K x`.
pub fn synth_ar(data: &DataRecord, model: &PerturbationModel) -> Result<SynthesisResult> {
    let (pd, m, order) = ar_dims(data)?;
    let cm = build_n(data, model)?;
    let nx = data.nx();
    let (j1, j2) = shift_matrices(pd, m, order);
    let t = shift_frame(data);
    let (nh, s) = shifted_n(&t, &cm.factor);

    let mut prob = LmiProblem::new();
    let pv = prob.sym(nx);
    let lv = prob.mat(m, nx);
    let av = prob.scalar();
    let bv = prob.scalar();
    let mut s1 = Mat::zeros(nx, pd);
    s1.view_mut((0, 0), (pd, pd)).fill_with_identity();
    let mut s2 = Mat::zeros(nx, nx - pd);
    s2.view_mut((pd, 0), (nx - pd, nx - pd)).fill_with_identity();
    let sub = |a: &Mat, b: &Mat| Expr::var(pv).lmul(&a.transpose()).rmul(b);
    let jpl = || Expr::var(pv).lmul(&j1).add(Expr::var(lv).lmul(&j2));
    let mut mb = BlockLmi::new(&[pd, nx, m, nx - pd, nx]);
    mb.set(0, 0, sub(&s1, &s1).sub(scalar_id(bv, pd)));
    mb.set(0, 3, sub(&s1, &s2));
    mb.set(1, 4, Expr::var(pv));
    mb.set(2, 4, Expr::var(lv));
    mb.set(3, 3, sub(&s2, &s2));
    mb.set(3, 4, jpl());
    mb.set(4, 4, Expr::var(pv));
    prob.add(slemma_block(&mb, &t, Expr::scalar(av, &nh)), Kind::NonStrict);
    let mut zb = BlockLmi::new(&[nx - pd, nx]);
    zb.set(0, 0, sub(&s2, &s2));
    zb.set(0, 1, jpl());
    zb.set(1, 1, Expr::var(pv));
    prob.add(zb, Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(pv)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(bv)), Kind::Strict);
    prob.add(BlockLmi::single(Expr::var(av)), Kind::Bound);
    prob.add(BlockLmi::single(Expr::identity(nx).sub(Expr::var(pv))), Kind::Bound);
    prob.set_box(BOX);

    let necessary = model.exact_representation(data.q());
    let res = SynthesisResult::new("ar", necessary);
    let sol = match verdict_to_solution(res.clone(), decide(&prob)) {
        Ok(s) => s,
        Err(r) => return Ok(r),
    };
    let p = sol.sym(pv);
    let l = sol.mat(lv);
    let alpha = sol.scalar(av).max(0.0) / s;
    let beta = sol.scalar(bv);
    let mut res = res;
    res.k = inverse(p.as_mat()).ok().map(|pi| &l * pi);
    res.alpha = Some(alpha);
    res.beta = Some(beta);
    let main = lmi_ar(&p, &l, alpha, beta, cm.matrix(), pd);
    let zc = lmi_ar_z(&p, &l, pd);
    let checks = [
        ("lmi_ar", rel_min_eig(&main), false),
        ("lmi_ar_z", rel_min_eig(&zc), true),
        ("P", p.min_eig(), true),
        ("beta", beta, true),
    ];
    res.p = Some(p.into_mat());
    res.l = Some(l);
    Ok(finish(res, &checks, sol.margin))
}

// ---------------------------------------------------------------------------------------
// Structured perturbations.

/// Constant data of the outer-approximation constraint:
/// `diag(I, U) Φ diag(I, U)ᵀ - Σ α_j Ψ_j ⪰ 0`.
#[derive(Clone, Debug)]
pub struct OuterPhiData {
    pub nd: usize,
    pub t: usize,
    /// `diag(I_nd, U)` with `U = Σ U_j F_j`.
    pub g: Mat,
    /// `Ψ_j = diag(E_j, U_j) Φ_j diag(E_j, U_j)ᵀ`.
    pub psi: Vec<Mat>,
}

impl OuterPhiData {
    pub fn new(model: &PerturbationModel) -> Result<Self> {
        let terms = match model {
            PerturbationModel::Structured { terms } => terms,
            PerturbationModel::Single { .. } => {
                return Err(Error::Config("outer approximation needs a structured model".into()))
            }
        };
        model.validate(terms[0].e.nrows(), terms[0].f.ncols())?;
        let nd = terms[0].e.nrows();
        let t = terms[0].f.ncols();
        let tsum: usize = terms.iter().map(|s| s.f.nrows()).sum();
        let mut u = Mat::zeros(tsum, t);
        let mut psi = Vec::with_capacity(terms.len());
        let mut off = 0;
        for term in terms {
            let tj = term.f.nrows();
            let mut uj = Mat::zeros(tsum, tj);
            uj.view_mut((off, 0), (tj, tj)).fill_with_identity();
            u += &uj * &term.f;
            let w = matkit::blockdiag(&[&term.e, &uj]);
            psi.push(term.phi.matrix().congruence(&w).into_mat());
            off += tj;
        }
        let g = matkit::blockdiag(&[&Mat::identity(nd, nd), &u]);
        Ok(OuterPhiData { nd, t, g, psi })
    }

    /// Left side of the outer-approximation constraint at `(Φ, α)`.
    pub fn lhs(&self, phi: &SymMat, alphas: &[f64]) -> SymMat {
        let mut out = phi.congruence(&self.g).into_mat();
        for (a, p) in alphas.iter().zip(&self.psi) {
            out -= p * *a;
        }
        SymMat::symmetrize(out)
    }
}

/// Outer-approximation constraint with its decision variables.
pub struct OuterPhiProblem {
    pub problem: LmiProblem,
    pub phi: Var,
    pub alphas: Vec<Var>,
    pub data: OuterPhiData,
}

/// Variables `Φ` (dimension `n_d + T`) and `α_j ≥ 0` with the outer-approximation LMI.
pub fn build_outer_phi_lmi(model: &PerturbationModel) -> Result<OuterPhiProblem> {
    let data = OuterPhiData::new(model)?;
    let mut problem = LmiProblem::new();
    let phi = problem.sym(data.nd + data.t);
    let alphas: Vec<Var> = (0..data.psi.len()).map(|_| problem.scalar()).collect();
    let mut e = Expr::congruence(&data.g, phi);
    for (a, p) in alphas.iter().zip(&data.psi) {
        e = e.sub(Expr::scalar(*a, p));
    }
    problem.add(BlockLmi::single(e), Kind::NonStrict);
    for a in &alphas {
        problem.add(BlockLmi::single(Expr::var(*a)), Kind::Bound);
    }
    Ok(OuterPhiProblem {
        problem,
        phi,
        alphas,
        data,
    })
}

fn stacked_identity_factor(data: &DataRecord) -> Mat {
    let nd = data.n_d();
    matkit::hstack(&[&Mat::identity(nd, nd), &data.stacked()])
}

/// Joint design of `Φ` and the controller with the S-lemma multiplier fixed to `alpha`.
/// `alpha = 1` is the convex reformulation; other values serve the rescaling checks.
pub fn codesign_with_alpha(data: &DataRecord, model: &PerturbationModel, alpha: f64) -> Result<SynthesisResult> {
    require_state_data(data, "synth_structured_codesign")?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("multiplier must be positive, got {alpha}")));
    }
    let op = build_outer_phi_lmi(model)?;
    if op.data.nd != data.n_d() || op.data.t != data.t() {
        return Err(Error::DimensionMismatch {
            context: "synth_structured_codesign",
            expected: dims(data.n_d(), data.t()),
            got: dims(op.data.nd, op.data.t),
        });
    }
    let (n, m) = (data.nx(), data.m());
    let t = shift_frame(data);
    let g_orig = stacked_identity_factor(data);
    let gs = t.transpose() * &g_orig;
    let OuterPhiProblem {
        mut problem,
        phi,
        alphas,
        data: od,
    } = op;
    let pv = problem.sym(n);
    let lv = problem.mat(m, n);
    let bv = problem.scalar();
    let mut mb = BlockLmi::new(&[n, n, m, n]);
    mb.set(0, 0, Expr::var(pv).sub(scalar_id(bv, n)));
    mb.set(1, 1, Expr::var(pv).scale(-1.0));
    mb.set(1, 2, Expr::var(lv).t().scale(-1.0));
    mb.set(2, 3, Expr::var(lv));
    mb.set(3, 3, Expr::var(pv));
    problem.add(slemma_block(&mb, &t, Expr::congruence(&gs, phi).scale(alpha)), Kind::NonStrict);
    problem.add(BlockLmi::single(Expr::var(pv)), Kind::Strict);
    problem.add(BlockLmi::single(Expr::var(bv)), Kind::Strict);
    problem.add(BlockLmi::single(Expr::identity(n).sub(Expr::var(pv))), Kind::Bound);
    problem.set_box(BOX);

    let res = SynthesisResult::new("structured-codesign", false);
    let sol = match verdict_to_solution(res.clone(), decide(&problem)) {
        Ok(s) => s,
        Err(r) => return Ok(r),
    };
    let phiv = sol.sym(phi);
    let al: Vec<f64> = alphas.iter().map(|a| sol.scalar(*a)).collect();
    let p = sol.sym(pv);
    let l = sol.mat(lv);
    let beta = sol.scalar(bv);
    let n_phi = phiv.congruence(&g_orig);
    let mut res = res;
    res.k = inverse(p.as_mat()).ok().map(|pi| &l * pi);
    res.alpha = Some(alpha);
    res.beta = Some(beta);
    let outer = od.lhs(&phiv, &al);
    let main = lmi_qstab(&p, &l, alpha, beta, &n_phi);
    let min_alpha = al.iter().copied().fold(f64::INFINITY, f64::min);
    let checks = [
        ("lmi_outer", rel_min_eig(&outer), false),
        ("alpha_j", min_alpha.min(0.0), false),
        ("lmi_qstab", rel_min_eig(&main), false),
        ("P", p.min_eig(), true),
        ("beta", beta, true),
    ];
    res.aux.insert("Phi".into(), phiv.into_mat());
    res.aux.insert("alpha_j".into(), Mat::from_column_slice(al.len(), 1, &al));
    res.p = Some(p.into_mat());
    res.l = Some(l);
    Ok(finish(res, &checks, sol.margin))
}

/// Joint (convex) design of the outer approximation and the controller.
pub fn synth_structured_codesign(data: &DataRecord, model: &PerturbationModel) -> Result<SynthesisResult> {
    codesign_with_alpha(data, model, 1.0)
}

/// Stage one of the two-step baseline: `Φ = diag(Φ11, -I_T)` with minimal `trace Φ11`
/// subject to the outer-approximation constraint (a trace surrogate for volume).
pub fn outer_phi_surrogate(model: &PerturbationModel) -> Result<(SymMat, Vec<f64>)> {
    let od = OuterPhiData::new(model)?;
    let (nd, t) = (od.nd, od.t);
    let g1 = od.g.columns(0, nd).into_owned();
    let g2 = od.g.columns(nd, t).into_owned();
    let mut prob = LmiProblem::new();
    let phi11 = prob.sym(nd);
    let alphas: Vec<Var> = (0..od.psi.len()).map(|_| prob.scalar()).collect();
    let mut e = Expr::congruence(&g1, phi11).sub(Expr::constant(&g2 * g2.transpose()));
    for (a, p) in alphas.iter().zip(&od.psi) {
        e = e.sub(Expr::scalar(*a, p));
    }
    prob.add(BlockLmi::single(e), Kind::NonStrict);
    for a in &alphas {
        prob.add(BlockLmi::single(Expr::var(*a)), Kind::Bound);
    }
    prob.minimize_trace(phi11, 1.0);
    prob.set_box(BOX);
    let sol = prob.solve(Mode::Optimize { margin: 0.0 })?;
    let p11 = sol.sym(phi11);
    let phi = SymMat::symmetrize(matkit::blockdiag(&[p11.as_mat(), &(-Mat::identity(t, t))]));
    Ok((phi, alphas.iter().map(|a| sol.scalar(*a)).collect()))
}

/// Two-step baseline: fixed surrogate `Φ_app`, then quadratic stabilization for it.
pub fn synth_structured_twostep(data: &DataRecord, model: &PerturbationModel) -> Result<SynthesisResult> {
    require_state_data(data, "synth_structured_twostep")?;
    let method = "structured-twostep-surrogate";
    let od = OuterPhiData::new(model)?;
    let (phi, al) = match outer_phi_surrogate(model) {
        Ok(v) => v,
        Err(e) => return Ok(SynthesisResult::new(method, false).fail(Status::SolverError, e.to_string())),
    };
    let outer = rel_min_eig(&od.lhs(&phi, &al));
    let mut res = synth_qstab_factor(data, &stacked_identity_factor(data), &phi, method)?;
    res.residuals.insert("lmi_outer".into(), outer);
    if res.certified() && outer < -RESIDUAL_TOL {
        res.status = Status::NotCertified;
        res.message = Some("surrogate outer approximation failed re-verification".into());
    }
    res.aux.insert("Phi_app".into(), phi.into_mat());
    res.aux.insert("alpha_j".into(), Mat::from_column_slice(al.len(), 1, &al));
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        perturb, random_clean_data, sample_perturbation, stream_rng, LinearSystem, StructuredTerm,
    };
    use crate::matkit::spectral_radius;

    fn scalar_sigma(eps: f64, seed: u64) -> (DataRecord, PerturbationModel) {
        let sys = LinearSystem::scalar_1d();
        let clean = random_clean_data(&sys, 20, &mut stream_rng(seed, 0));
        let model = PerturbationModel::measurement_noise(3, 20, eps);
        let delta = sample_perturbation(&model, seed, 1000, 10).unwrap();
        (perturb(&clean, &delta).unwrap(), model)
    }

    #[test]
    fn zero_data_consistency_matrix() {
        let data = DataRecord::new(Mat::zeros(1, 3), Mat::zeros(1, 3), Mat::zeros(1, 3)).unwrap();
        let model = PerturbationModel::leading_rows(3, 1, 3, 0.5);
        let cm = build_n(&data, &model).unwrap();
        let n = cm.matrix().as_mat();
        assert!((n[(0, 0)] - 0.75).abs() < 1e-15);
        assert_eq!(n.amax(), n[(0, 0)]);
        assert_eq!(cm.n22_rank, 0);
    }

    #[test]
    fn measurement_noise_n22_formula() {
        let (data, model) = scalar_sigma(0.3, 3);
        let cm = build_n(&data, &model).unwrap();
        let z = matkit::vstack(&[&data.x, &data.u]);
        let expect = Mat::identity(2, 2) * (0.09 * 20.0) - &z * z.transpose();
        assert!((cm.n_mat.n22().as_mat() - expect).amax() < 1e-12);
    }

    #[test]
    fn scalar_example_is_certified_and_stabilizes_truth() {
        let (data, model) = scalar_sigma(0.3, 1);
        let r = synth_qstab(&data, &model).unwrap();
        assert!(r.certified(), "{:?}", r.message);
        assert!(r.necessary);
        let k = r.k.unwrap();
        assert!((1.2 + 0.6 * k[(0, 0)]).abs() < 1.0);
    }

    #[test]
    fn exact_data_pendulum() {
        let sys = LinearSystem::pendulum();
        let clean = random_clean_data(&sys, 10, &mut stream_rng(4, 0));
        let model = PerturbationModel::measurement_noise(7, 10, 0.0);
        let r = synth_qstab(&clean, &model).unwrap();
        assert!(r.certified(), "{:?}", r.message);
        let k = r.k.unwrap();
        assert!(spectral_radius(&(&sys.a + &sys.b * k)) < 1.0);
    }

    #[test]
    fn huge_noise_is_not_certified() {
        let (data, model) = scalar_sigma(3.0, 2);
        let r = synth_qstab(&data, &model).unwrap();
        assert_eq!(r.status, Status::NotCertified);
    }

    #[test]
    fn pre_and_post_schur_forms_agree() {
        let (data, model) = scalar_sigma(0.3, 5);
        let cm = build_n(&data, &model).unwrap();
        let p = SymMat::from_diagonal(&[0.7]);
        let l = Mat::from_element(1, 1, -0.9);
        let post = lmi_qstab(&p, &l, 0.01, 0.1, cm.matrix());
        let pre = qstab_pre_schur(&p, &l, 0.01, 0.1, cm.matrix()).unwrap();
        let sc = matkit::schur_complement(&post, 3);
        assert!((sc.as_mat() - pre.as_mat()).amax() < 1e-12 * (1.0 + pre.fro_norm()));
    }

    #[test]
    fn identity_embedding_outer_approximation() {
        let phi1 = QmiSet::new(SymMat::from_diagonal(&[0.5, 0.5, -1.0, -1.0, -1.0]), 2).unwrap();
        let model = PerturbationModel::structured(vec![StructuredTerm {
            e: Mat::identity(2, 2),
            f: Mat::identity(3, 3),
            phi: phi1.clone(),
        }])
        .unwrap();
        let od = OuterPhiData::new(&model).unwrap();
        let lhs = od.lhs(phi1.matrix(), &[1.0]);
        assert!(lhs.fro_norm() < 1e-14);
    }
}
