//! Clean data generation, perturbation models, perturbed datasets, and membership and
//! sampling for the set of systems consistent with the data.
//!
//! Conventions: the stacked data matrix is `𝐗 = [X₊; -X; -U]` and a perturbation `Δ` of the
//! same shape enters additively, `𝐗 = 𝐗* + Δ`. For autoregressive data the same layout is
//! used with `X₊` replaced by the output record `Y` and `X` by the lifted regressor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::matkit::{self, from_rows, spectral_norm, to_rows, Mat, SymMat, Vector, RANK_TOL};
use crate::qmi::{self, explicit_param, QmiSet, MEMBERSHIP_TOL};

/// Reproducible generator: one 64-bit seed, independent streams per purpose.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `x₊ = A x + B u`, `z = C x + D u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Option<Mat>,
    pub d: Option<Mat>,
}

impl LinearSystem {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch {
                context: "LinearSystem",
                expected: format!("A n x n, B n x m with n = {}", a.nrows()),
                got: format!("A {}, B {}", dims(a.nrows(), a.ncols()), dims(b.nrows(), b.ncols())),
            });
        }
        Ok(LinearSystem { a, b, c: None, d: None })
    }

    pub fn with_output(mut self, c: Mat, d: Mat) -> Result<Self> {
        if c.ncols() != self.n() || d.ncols() != self.m() || c.nrows() != d.nrows() {
            return Err(Error::DimensionMismatch {
                context: "LinearSystem::with_output",
                expected: format!("C p x {}, D p x {}", self.n(), self.m()),
                got: format!("C {}, D {}", dims(c.nrows(), c.ncols()), dims(d.nrows(), d.ncols())),
            });
        }
        self.c = Some(c);
        self.d = Some(d);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `(A*, B*) = (1.2, 0.6)`.
    pub fn scalar_1d() -> Self {
        LinearSystem::new(Mat::from_element(1, 1, 1.2), Mat::from_element(1, 1, 0.6)).unwrap()
    }

    /// Linearized, discretized inverted pendulum with performance output `z = [x; u]`.
    pub fn pendulum() -> Self {
        let a = Mat::from_row_slice(
            3,
            3,
            &[0.9844, 0.046, 0.0347, 0.397, 1.0009, 0.0007, 0.0004, 0.0200, 1.0000],
        );
        let b = Mat::from_row_slice(3, 1, &[0.25, 0.0, 0.0]);
        let (c, d) = state_input_output(3, 1);
        LinearSystem::new(a, b).unwrap().with_output(c, d).unwrap()
    }

    /// Three-state, two-input system used with rank-deficient data.
    pub fn rank_deficient_example() -> Self {
        let a = Mat::from_row_slice(
            3,
            3,
            &[-0.143, -0.561, 1.559, 0.140, 0.989, -0.693, -0.891, -0.320, 1.354],
        );
        let b = Mat::from_row_slice(3, 2, &[2.769, 0.725, -1.350, -0.063, 3.035, 0.715]);
        LinearSystem::new(a, b).unwrap()
    }
}

/// `C = [I; 0]`, `D = [0; I]` so that `z = [x; u]`.
pub fn state_input_output(n: usize, m: usize) -> (Mat, Mat) {
    let mut c = Mat::zeros(n + m, n);
    let mut d = Mat::zeros(n + m, m);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    d.view_mut((n, 0), (m, m)).fill_with_identity();
    (c, d)
}

/// `y(t) = Σ_{l=1..L} A_l y(t-l) + Σ_{l=0..L} B_l u(t-l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArSystem {
    pub a_coeffs: Vec<Mat>,
    pub b_coeffs: Vec<Mat>,
}

impl ArSystem {
    pub fn new(a_coeffs: Vec<Mat>, b_coeffs: Vec<Mat>) -> Result<Self> {
        let l = a_coeffs.len();
        if l == 0 || b_coeffs.len() != l + 1 {
            return Err(Error::Config(format!(
                "AR model needs L >= 1 output and L + 1 input coefficients, got {} and {}",
                l,
                b_coeffs.len()
            )));
        }
        let p = a_coeffs[0].nrows();
        let m = b_coeffs[0].ncols();
        if a_coeffs.iter().any(|a| a.shape() != (p, p)) || b_coeffs.iter().any(|b| b.shape() != (p, m)) {
            return Err(Error::Config("inconsistent AR coefficient shapes".into()));
        }
        Ok(ArSystem { a_coeffs, b_coeffs })
    }

    pub fn order(&self) -> usize {
        self.a_coeffs.len()
    }

    pub fn p(&self) -> usize {
        self.a_coeffs[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.b_coeffs[0].ncols()
    }

    /// `([A₁ … A_L B₁ … B_L], B₀)`.
    pub fn regressor_form(&self) -> (Mat, Mat) {
        let mut blocks: Vec<&Mat> = self.a_coeffs.iter().collect();
        blocks.extend(self.b_coeffs[1..].iter());
        (matkit::hstack(&blocks), self.b_coeffs[0].clone())
    }

    /// Lifted state-space pair `(𝐀, 𝐁) = ([A; J₁], [B; J₂])`.
    pub fn lifted(&self) -> (Mat, Mat) {
        let (a, b) = self.regressor_form();
        let (j1, j2) = shift_matrices(self.p(), self.m(), self.order());
        (matkit::vstack(&[&a, &j1]), matkit::vstack(&[&b, &j2]))
    }
}

/// Shift structure `(J₁, J₂)` of the lifted AR state
/// `x = [y(t-1); …; y(t-L); u(t-1); …; u(t-L)]`.
pub fn shift_matrices(p: usize, m: usize, l: usize) -> (Mat, Mat) {
    let nx = (p + m) * l;
    let rows = nx - p;
    let mut j1 = Mat::zeros(rows, nx);
    let mut j2 = Mat::zeros(rows, m);
    let py = p * (l - 1);
    for i in 0..py {
        j1[(i, i)] = 1.0;
    }
    for i in 0..m {
        j2[(py + i, i)] = 1.0;
    }
    let mu = m * (l - 1);
    for i in 0..mu {
        j1[(py + m + i, p * l + i)] = 1.0;
    }
    (j1, j2)
}

/// Measured (or clean) data; `x_plus` is `X₊` for state data and `Y` for AR data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub x_plus: Mat,
    pub x: Mat,
    pub u: Mat,
}

impl DataRecord {
    pub fn new(x_plus: Mat, x: Mat, u: Mat) -> Result<Self> {
        let t = x.ncols();
        if t == 0 || x_plus.ncols() != t || u.ncols() != t {
            return Err(Error::DimensionMismatch {
                context: "DataRecord",
                expected: "common column count T >= 1".into(),
                got: format!("{}, {}, {}", x_plus.ncols(), x.ncols(), u.ncols()),
            });
        }
        if [&x_plus, &x, &u].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("DataRecord"));
        }
        Ok(DataRecord { x_plus, x, u })
    }

    pub fn q(&self) -> usize {
        self.x_plus.nrows()
    }

    pub fn nx(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn t(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_d(&self) -> usize {
        self.q() + self.nx() + self.m()
    }

    /// `𝐗 = [X₊; -X; -U]`.
    pub fn stacked(&self) -> Mat {
        matkit::vstack(&[&self.x_plus, &(-&self.x), &(-&self.u)])
    }

    pub fn from_stacked(s: &Mat, q: usize, nx: usize) -> Self {
        let m = s.nrows() - q - nx;
        DataRecord {
            x_plus: s.rows(0, q).into_owned(),
            x: -s.rows(q, nx).into_owned(),
            u: -s.rows(q + nx, m).into_owned(),
        }
    }
}

/// Clean trajectory from `x0` under the input sequence `u_seq` (`m x T`).
pub fn simulate(sys: &LinearSystem, x0: &Vector, u_seq: &Mat) -> Result<DataRecord> {
    if x0.len() != sys.n() || u_seq.nrows() != sys.m() {
        return Err(Error::DimensionMismatch {
            context: "simulate",
            expected: format!("x0 of length {}, u with {} rows", sys.n(), sys.m()),
            got: format!("{}, {}", x0.len(), u_seq.nrows()),
        });
    }
    let t = u_seq.ncols();
    let mut x = Mat::zeros(sys.n(), t);
    let mut xp = Mat::zeros(sys.n(), t);
    let mut state = x0.clone();
    for k in 0..t {
        x.set_column(k, &state);
        state = &sys.a * &state + &sys.b * u_seq.column(k);
        xp.set_column(k, &state);
    }
    DataRecord::new(xp, x, u_seq.clone())
}

/// Clean data with `X` and `U` drawn i.i.d. standard normal and `X₊ = A X + B U`.
pub fn random_clean_data<R: Rng + ?Sized>(sys: &LinearSystem, t: usize, rng: &mut R) -> DataRecord {
    let x = gaussian(sys.n(), t, rng);
    let u = gaussian(sys.m(), t, rng);
    let xp = &sys.a * &x + &sys.b * &u;
    DataRecord { x_plus: xp, x, u }
}

/// Clean AR data with i.i.d. standard normal regressors and inputs.
pub fn random_ar_data<R: Rng + ?Sized>(ar: &ArSystem, t: usize, rng: &mut R) -> DataRecord {
    let (a, b) = ar.regressor_form();
    let x = gaussian(a.ncols(), t, rng);
    let u = gaussian(ar.m(), t, rng);
    let y = &a * &x + &b * &u;
    DataRecord { x_plus: y, x, u }
}

/// One term `E_j Δ_j F_j` with `Δ_jᵀ ∈ Z(Φ_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredTerm {
    pub e: Mat,
    pub f: Mat,
    pub phi: QmiSet,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PerturbationModel {
    /// `Δ = E Δ̂` with `Δ̂ᵀ ∈ Z(Φ̂)`.
    Single { e: Mat, phi_hat: QmiSet },
    /// `Δ = Σ E_j Δ_j F_j`.
    Structured { terms: Vec<StructuredTerm> },
}

fn energy_bound(q: usize, t: usize, radius2: f64) -> QmiSet {
    let mut d = vec![radius2; q];
    d.extend(std::iter::repeat(-1.0).take(t));
    QmiSet::new(SymMat::from_diagonal(&d), q).unwrap()
}

impl PerturbationModel {
    pub fn single(e: Mat, phi_hat: QmiSet) -> Result<Self> {
        let model = PerturbationModel::Single { e, phi_hat };
        model.check_sets()?;
        Ok(model)
    }

    pub fn structured(terms: Vec<StructuredTerm>) -> Result<Self> {
        let model = PerturbationModel::Structured { terms };
        model.check_sets()?;
        Ok(model)
    }

    fn check_sets(&self) -> Result<()> {
        match self {
            PerturbationModel::Single { e, phi_hat } => {
                if e.ncols() != phi_hat.q() {
                    return Err(Error::DimensionMismatch {
                        context: "PerturbationModel::Single",
                        expected: format!("E with {} columns", phi_hat.q()),
                        got: dims(e.nrows(), e.ncols()),
                    });
                }
                phi_hat.ellipsoid(matkit::PSD_TOL).ok_or(Error::NotEllipsoid)?;
            }
            PerturbationModel::Structured { terms } => {
                if terms.is_empty() {
                    return Err(Error::Config("structured model without terms".into()));
                }
                let (nd, t) = (terms[0].e.nrows(), terms[0].f.ncols());
                for term in terms {
                    if term.e.nrows() != nd
                        || term.f.ncols() != t
                        || term.e.ncols() != term.phi.q()
                        || term.f.nrows() != term.phi.r()
                    {
                        return Err(Error::DimensionMismatch {
                            context: "StructuredTerm",
                            expected: format!("E {nd} x p_j, F T_j x {t}, Φ over (p_j, T_j)"),
                            got: format!(
                                "E {}, F {}, Φ ({}, {})",
                                dims(term.e.nrows(), term.e.ncols()),
                                dims(term.f.nrows(), term.f.ncols()),
                                term.phi.q(),
                                term.phi.r()
                            ),
                        });
                    }
                    term.phi.ellipsoid(matkit::PSD_TOL).ok_or(Error::NotEllipsoid)?;
                }
            }
        }
        Ok(())
    }

    /// Checks the model against a dataset's stacked dimension and length.
    pub fn validate(&self, n_d: usize, t: usize) -> Result<()> {
        self.check_sets()?;
        let (rows, cols) = match self {
            PerturbationModel::Single { e, phi_hat } => (e.nrows(), phi_hat.r()),
            PerturbationModel::Structured { terms } => (terms[0].e.nrows(), terms[0].f.ncols()),
        };
        if rows != n_d || cols != t {
            return Err(Error::DimensionMismatch {
                context: "PerturbationModel::validate",
                expected: dims(n_d, t),
                got: dims(rows, cols),
            });
        }
        Ok(())
    }

    /// Perturbation on all of `𝐗` with `ΔΔᵀ ⪯ ε² T I` (measurement noise on every signal).
    pub fn measurement_noise(n_d: usize, t: usize, eps: f64) -> Self {
        PerturbationModel::Single {
            e: Mat::identity(n_d, n_d),
            phi_hat: energy_bound(n_d, t, eps * eps * t as f64),
        }
    }

    /// Perturbation restricted to the first `k` rows of `𝐗` with `ΔΔᵀ ⪯ ε² T I`.
    pub fn leading_rows(n_d: usize, k: usize, t: usize, eps: f64) -> Self {
        let mut e = Mat::zeros(n_d, k);
        e.view_mut((0, 0), (k, k)).fill_with_identity();
        PerturbationModel::Single {
            e,
            phi_hat: energy_bound(k, t, eps * eps * t as f64),
        }
    }

    /// Process disturbance on `X₊` (bound `ε_d² T`) plus measurement noise on all
    /// signals (bound `ε_m² T`).
    pub fn superposition(n: usize, m: usize, t: usize, eps_d: f64, eps_m: f64) -> Self {
        let nd = 2 * n + m;
        let mut ed = Mat::zeros(nd, n);
        ed.view_mut((0, 0), (n, n)).fill_with_identity();
        PerturbationModel::Structured {
            terms: vec![
                StructuredTerm {
                    e: ed,
                    f: Mat::identity(t, t),
                    phi: energy_bound(n, t, eps_d * eps_d * t as f64),
                },
                StructuredTerm {
                    e: Mat::identity(nd, nd),
                    f: Mat::identity(t, t),
                    phi: energy_bound(nd, t, eps_m * eps_m * t as f64),
                },
            ],
        }
    }

    /// Hankel-structured noise: `Δ = Σ_l E_l Δ₀ F_l` with `Δ₀` (`p x (T+L-1)`) bounded by
    /// `ε² (T+L-1)`. Each lag carries its own copy of `Δ₀`, an outer description of the
    /// shared-sequence set.
    pub fn hankel(p: usize, lags: usize, t: usize, eps: f64) -> Self {
        let len = t + lags - 1;
        let terms = (0..lags)
            .map(|l| {
                let mut e = Mat::zeros(p * lags, p);
                e.view_mut((p * l, 0), (p, p)).fill_with_identity();
                let mut f = Mat::zeros(len, t);
                f.view_mut((l, 0), (t, t)).fill_with_identity();
                StructuredTerm {
                    e,
                    f,
                    phi: energy_bound(p, len, eps * eps * len as f64),
                }
            })
            .collect();
        PerturbationModel::Structured { terms }
    }

    /// `|δ(t)|² ≤ ε²` for every column.
    pub fn instantaneous(n_d: usize, t: usize, eps: f64) -> Self {
        let terms = (0..t)
            .map(|k| {
                let mut f = Mat::zeros(1, t);
                f[(0, k)] = 1.0;
                StructuredTerm {
                    e: Mat::identity(n_d, n_d),
                    f,
                    phi: energy_bound(n_d, 1, eps * eps),
                }
            })
            .collect();
        PerturbationModel::Structured { terms }
    }

    /// `|δ_ij| ≤ ε` for every entry; terms are ordered row-major over `(i, j)`.
    pub fn element_wise(n_d: usize, t: usize, eps: f64) -> Self {
        let mut terms = Vec::with_capacity(n_d * t);
        for i in 0..n_d {
            for j in 0..t {
                let mut e = Mat::zeros(n_d, 1);
                e[(i, 0)] = 1.0;
                let mut f = Mat::zeros(1, t);
                f[(0, j)] = 1.0;
                terms.push(StructuredTerm {
                    e,
                    f,
                    phi: energy_bound(1, 1, eps * eps),
                });
            }
        }
        PerturbationModel::Structured { terms }
    }

    /// True when `im E ⊇ im [I_q 0]ᵀ` or `Φ̂22 ≺ 0` (the consistent set is exactly QMI-representable).
    pub fn exact_representation(&self, q: usize) -> bool {
        match self {
            PerturbationModel::Single { e, phi_hat } => {
                let mut lead = Mat::zeros(e.nrows(), q);
                lead.view_mut((0, 0), (q, q)).fill_with_identity();
                let covers = matkit::range_contains(e, &lead, 1e-9);
                let n22 = phi_hat.n22();
                let phi22_neg = phi_hat.r() == 0 || n22.max_eig() < -RANK_TOL * n22.fro_norm();
                covers || phi22_neg
            }
            PerturbationModel::Structured { .. } => false,
        }
    }
}

/// Random-walk Metropolis settings for sampling perturbations.
#[derive(Clone, Copy, Debug)]
pub struct MetropolisOptions {
    pub burn_in: usize,
    pub thin: usize,
    /// Per-coordinate step relative to the unit `M₁` ball, further divided by `√cols`.
    pub step: f64,
}

impl Default for MetropolisOptions {
    fn default() -> Self {
        MetropolisOptions {
            burn_in: 1000,
            thin: 10,
            step: 0.1,
        }
    }
}

/// Random walk on `{M₁ : |M₁| ≤ 1}` with a uniform target, started at the center.
fn walk_m1<R: Rng + ?Sized>(q: usize, r: usize, steps: usize, step: f64, rng: &mut R) -> Mat {
    let mut m = Mat::zeros(q, r);
    if q == 0 || r == 0 {
        return m;
    }
    let s = step / (r as f64).sqrt();
    for _ in 0..steps {
        let prop = &m + gaussian(q, r, rng) * s;
        let gram = SymMat::symmetrize(&prop * prop.transpose());
        if gram.max_eig() <= 1.0 {
            m = prop;
        }
    }
    m
}

/// Draws `Δ̂` (`q x r`) with `Δ̂ᵀ ∈ Z(Φ)`; the `ker Φ22` component is set to zero.
pub fn sample_qmi_member<R: Rng + ?Sized>(phi: &QmiSet, opts: &MetropolisOptions, rng: &mut R) -> Result<Mat> {
    let m1 = walk_m1(phi.q(), phi.r(), opts.burn_in + opts.thin, opts.step, rng);
    let d = explicit_param(phi, &m1, &Mat::zeros(phi.q(), phi.r()))?;
    if !phi.contains(&d.transpose(), false, MEMBERSHIP_TOL)? {
        return Err(Error::Solver("sampled perturbation failed membership re-check".into()));
    }
    Ok(d)
}

/// One perturbation sample `Δ` (`n_d x T`) for `model`.
pub fn sample_perturbation(model: &PerturbationModel, seed: u64, burn_in: usize, thin: usize) -> Result<Mat> {
    let opts = MetropolisOptions {
        burn_in,
        thin,
        ..Default::default()
    };
    match model {
        PerturbationModel::Single { e, phi_hat } => {
            let mut rng = stream_rng(seed, 0);
            let dh = sample_qmi_member(phi_hat, &opts, &mut rng)?;
            Ok(e * dh)
        }
        PerturbationModel::Structured { terms } => {
            let mut acc = Mat::zeros(terms[0].e.nrows(), terms[0].f.ncols());
            for (j, term) in terms.iter().enumerate() {
                let mut rng = stream_rng(seed, j as u64);
                let dj = sample_qmi_member(&term.phi, &opts, &mut rng)?;
                acc += &term.e * dj * &term.f;
            }
            Ok(acc)
        }
    }
}

/// Measured data `𝐗 = 𝐗* + Δ`.
pub fn perturb(clean: &DataRecord, delta: &Mat) -> Result<DataRecord> {
    let s = clean.stacked();
    if delta.shape() != s.shape() {
        return Err(Error::DimensionMismatch {
            context: "perturb",
            expected: dims(s.nrows(), s.ncols()),
            got: dims(delta.nrows(), delta.ncols()),
        });
    }
    Ok(DataRecord::from_stacked(&(s + delta), clean.q(), clean.nx()))
}

/// Inverse of [`perturb`].
pub fn unperturb(measured: &DataRecord, delta: &Mat) -> Result<DataRecord> {
    perturb(measured, &(-delta))
}

/// Data together with the perturbation model that explains it.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSet {
    pub data: DataRecord,
    pub model: PerturbationModel,
}

impl SigmaSet {
    pub fn new(data: DataRecord, model: PerturbationModel) -> Result<Self> {
        model.validate(data.n_d(), data.t())?;
        Ok(SigmaSet { data, model })
    }

    /// `N = [E 𝐗] Φ̂ [E 𝐗]ᵀ` for a single-QMI model.
    pub fn consistency_matrix(&self) -> Result<SymMat> {
        match &self.model {
            PerturbationModel::Single { e, phi_hat } => {
                let ex = matkit::hstack(&[e, &self.data.stacked()]);
                Ok(phi_hat.matrix().congruence(&ex))
            }
            PerturbationModel::Structured { .. } => {
                Err(Error::Config("consistency matrix needs a single-QMI model".into()))
            }
        }
    }

    pub fn consistency_set(&self) -> Result<QmiSet> {
        QmiSet::new(self.consistency_matrix()?, self.data.q())
    }

    fn single(&self) -> Result<(&Mat, &QmiSet)> {
        match &self.model {
            PerturbationModel::Single { e, phi_hat } => Ok((e, phi_hat)),
            _ => Err(Error::Config("operation needs a single-QMI model".into())),
        }
    }

    /// `[I A B]`.
    fn selector(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        let q = self.data.q();
        if a.shape() != (q, self.data.nx()) || b.shape() != (q, self.data.m()) {
            return Err(Error::DimensionMismatch {
                context: "SigmaSet",
                expected: format!("A {}, B {}", dims(q, self.data.nx()), dims(q, self.data.m())),
                got: format!("A {}, B {}", dims(a.nrows(), a.ncols()), dims(b.nrows(), b.ncols())),
            });
        }
        Ok(matkit::hstack(&[&Mat::identity(q, q), a, b]))
    }

    /// `(A, B) ∈ Σ`: QMI membership of `[A B]ᵀ` plus the range condition on `ker Φ̂22`.
    pub fn contains(&self, a: &Mat, b: &Mat, tol: f64) -> Result<bool> {
        self.prepare()?.contains(self, a, b, tol)
    }

    fn prepare(&self) -> Result<Membership> {
        let (_, phi) = self.single()?;
        let p22 = phi.n22();
        let stacked = self.data.stacked();
        let kernel = matkit::kernel_basis(&p22, RANK_TOL);
        let dker = (kernel.ncols() > 0).then(|| &stacked * &kernel);
        Ok(Membership {
            set: self.consistency_set()?,
            dker,
            scale: 1.0 + stacked.norm(),
        })
    }

    /// Least-squares system for the data corrected by `Δ`.
    fn least_squares(&self, delta: &Mat) -> (Mat, Mat) {
        let corr = unperturb(&self.data, delta).expect("shape checked");
        let reg = matkit::vstack(&[&corr.x, &corr.u]);
        let ab = &corr.x_plus * matkit::pinv_rect(&reg, RANK_TOL);
        let nx = self.data.nx();
        (ab.columns(0, nx).into_owned(), ab.columns(nx, self.data.m()).into_owned())
    }

    /// Systems in the consistent set: the least-squares system at the perturbation
    /// center followed by random ellipsoid members (half on the boundary), all filtered
    /// through [`SigmaSet::contains`].
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<(Mat, Mat)>> {
        let (e, phi) = self.single()?;
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return Ok(out);
        }
        let center = phi.ellipsoid(matkit::PSD_TOL).ok_or(Error::NotEllipsoid)?.center;
        let delta_c = e * center.transpose();
        let (a0, b0) = self.least_squares(&delta_c);
        let prep = self.prepare()?;
        if prep.contains(self, &a0, &b0, 1e-7)? {
            out.push((a0, b0));
        }
        let set = &prep.set;
        let form = set.ellipsoid(matkit::PSD_TOL);
        let mut rng = stream_rng(seed, 1);
        let (q, nx) = (self.data.q(), self.data.nx());
        let mut attempts = 0;
        while out.len() < count && attempts < 50 * count + 100 {
            attempts += 1;
            let (a, b) = match &form {
                Some(f) => {
                    let xi = qmi::sample_operator_ball(set.r(), q, &mut rng, attempts % 2 == 0);
                    let scale = 1.0 + f.center.norm();
                    let h = gaussian(set.r(), q, &mut rng) * scale;
                    let z = f.member(&xi, Some(&h));
                    let zt = z.transpose();
                    (zt.columns(0, nx).into_owned(), zt.columns(nx, self.data.m()).into_owned())
                }
                None => {
                    let d = sample_perturbation(&self.model, rng.gen(), 200, 10)?;
                    self.least_squares(&d)
                }
            };
            if prep.contains(self, &a, &b, 1e-7)? {
                out.push((a, b));
            }
        }
        Ok(out)
    }
}

/// Membership data of `Σ` that does not depend on the candidate system.
struct Membership {
    set: QmiSet,
    /// `𝐗` restricted to `ker Φ̂22`, when that kernel is nontrivial.
    dker: Option<Mat>,
    scale: f64,
}

impl Membership {
    fn contains(&self, sigma: &SigmaSet, a: &Mat, b: &Mat, tol: f64) -> Result<bool> {
        let (e, _) = sigma.single()?;
        let s = sigma.selector(a, b)?;
        let z = matkit::hstack(&[a, b]).transpose();
        if !self.set.contains(&z, false, tol)? {
            return Ok(false);
        }
        let Some(dk) = &self.dker else {
            return Ok(true);
        };
        let g = &s * dk;
        if g.norm() <= 1e-12 * self.scale {
            return Ok(true);
        }
        Ok(matkit::range_contains(&(&s * e), &g, tol.max(1e-9)))
    }
}

pub fn sigma_contains(sigma: &SigmaSet, a: &Mat, b: &Mat, tol: f64) -> Result<bool> {
    sigma.contains(a, b, tol)
}

pub fn sample_sigma(sigma: &SigmaSet, count: usize, seed: u64) -> Result<Vec<(Mat, Mat)>> {
    sigma.sample(count, seed)
}

/// Serializable description of a perturbation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Measurement { eps: f64 },
    LeadingRows { rows: usize, eps: f64 },
    Superposition { eps_d: f64, eps_m: f64 },
    Hankel { p: usize, lags: usize, eps: f64 },
    Instantaneous { eps: f64 },
    ElementWise { eps: f64 },
    Single { e: Vec<Vec<f64>>, phi_hat: Vec<Vec<f64>> },
}

impl ModelSpec {
    /// Model for data with `q` successor rows, `nx` regressor rows, `m` inputs and length `t`.
    pub fn build(&self, q: usize, nx: usize, m: usize, t: usize) -> Result<PerturbationModel> {
        let nd = q + nx + m;
        let model = match self {
            ModelSpec::Measurement { eps } => PerturbationModel::measurement_noise(nd, t, *eps),
            ModelSpec::LeadingRows { rows, eps } => {
                if *rows > nd {
                    return Err(Error::Config(format!("leading_rows {rows} exceeds {nd}")));
                }
                PerturbationModel::leading_rows(nd, *rows, t, *eps)
            }
            ModelSpec::Superposition { eps_d, eps_m } => {
                if q != nx {
                    return Err(Error::Config("superposition needs state data".into()));
                }
                PerturbationModel::superposition(q, m, t, *eps_d, *eps_m)
            }
            ModelSpec::Hankel { p, lags, eps } => PerturbationModel::hankel(*p, *lags, t, *eps),
            ModelSpec::Instantaneous { eps } => PerturbationModel::instantaneous(nd, t, *eps),
            ModelSpec::ElementWise { eps } => PerturbationModel::element_wise(nd, t, *eps),
            ModelSpec::Single { e, phi_hat } => {
                let e = from_rows(e)?;
                let phi = from_rows(phi_hat)?;
                let q_hat = e.ncols();
                PerturbationModel::single(e, QmiSet::new(SymMat::new(phi)?, q_hat)?)?
            }
        };
        model.validate(nd, t)?;
        Ok(model)
    }
}

fn empty_rows(rows: usize, t: usize, m: &Mat) -> Vec<Vec<f64>> {
    if rows == 0 {
        Vec::new()
    } else {
        debug_assert_eq!(m.ncols(), t);
        to_rows(m)
    }
}

/// JSON dataset: measured matrices (row-major), model descriptor and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub q: usize,
    pub nx: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub x_plus: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub model: ModelSpec,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(data: &DataRecord, model: ModelSpec, seed: Option<u64>) -> Self {
        let t = data.t();
        Dataset {
            q: data.q(),
            nx: data.nx(),
            m: data.m(),
            t,
            x_plus: empty_rows(data.q(), t, &data.x_plus),
            x: empty_rows(data.nx(), t, &data.x),
            u: empty_rows(data.m(), t, &data.u),
            model,
            seed,
        }
    }

    fn block(&self, rows: &[Vec<f64>], nr: usize) -> Result<Mat> {
        if nr == 0 {
            return Ok(Mat::zeros(0, self.t));
        }
        let m = from_rows(rows)?;
        if m.shape() != (nr, self.t) {
            return Err(Error::DimensionMismatch {
                context: "Dataset",
                expected: dims(nr, self.t),
                got: dims(m.nrows(), m.ncols()),
            });
        }
        Ok(m)
    }

    pub fn record(&self) -> Result<DataRecord> {
        DataRecord::new(
            self.block(&self.x_plus, self.q)?,
            self.block(&self.x, self.nx)?,
            self.block(&self.u, self.m)?,
        )
    }

    pub fn sigma(&self) -> Result<SigmaSet> {
        let data = self.record()?;
        let model = self.model.build(self.q, self.nx, self.m, self.t)?;
        SigmaSet::new(data, model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Largest absolute entry of `Δ`, used to check element-wise bounds.
pub fn max_abs(m: &Mat) -> f64 {
    m.amax()
}

pub fn spectral(m: &Mat) -> f64 {
    spectral_norm(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_zero_system() {
        let sys = LinearSystem::new(Mat::zeros(2, 2), Mat::zeros(2, 1)).unwrap();
        let d = simulate(&sys, &Vector::from_vec(vec![1.0, 2.0]), &Mat::from_element(1, 4, 3.0)).unwrap();
        assert_eq!(d.x_plus, Mat::zeros(2, 4));
    }

    #[test]
    fn simulate_identity_holds_state() {
        let sys = LinearSystem::new(Mat::identity(2, 2), Mat::zeros(2, 1)).unwrap();
        let d = simulate(&sys, &Vector::from_vec(vec![1.0, 0.0]), &Mat::zeros(1, 3)).unwrap();
        for k in 0..3 {
            assert_eq!(d.x.column(k)[0], 1.0);
            assert_eq!(d.x.column(k)[1], 0.0);
        }
    }

    #[test]
    fn scalar_data_is_exact() {
        let sys = LinearSystem::scalar_1d();
        let d = random_clean_data(&sys, 20, &mut stream_rng(1, 0));
        let resid = &d.x_plus - (&d.x * 1.2 + &d.u * 0.6);
        assert_eq!(resid.amax(), 0.0);
    }

    #[test]
    fn perturbation_round_trip() {
        let sys = LinearSystem::scalar_1d();
        let d = random_clean_data(&sys, 5, &mut stream_rng(2, 0));
        let delta = gaussian(3, 5, &mut stream_rng(3, 0));
        let back = unperturb(&perturb(&d, &delta).unwrap(), &delta).unwrap();
        assert!((back.stacked() - d.stacked()).amax() < 1e-15);
        assert_eq!(perturb(&d, &Mat::zeros(3, 5)).unwrap(), d);
    }

    #[test]
    fn first_block_delta_touches_only_x_plus() {
        let sys = LinearSystem::scalar_1d();
        let d = random_clean_data(&sys, 4, &mut stream_rng(2, 0));
        let mut delta = Mat::zeros(3, 4);
        delta.row_mut(0).fill(0.5);
        let p = perturb(&d, &delta).unwrap();
        assert_eq!(p.x, d.x);
        assert_eq!(p.u, d.u);
        assert!(p.x_plus != d.x_plus);
    }

    #[test]
    fn element_wise_samples_respect_bound() {
        let model = PerturbationModel::element_wise(3, 10, 0.15);
        let d = sample_perturbation(&model, 9, 1000, 10).unwrap();
        assert!(d.amax() <= 0.15 + 1e-12);
        assert!(d.amax() > 0.0);
    }

    #[test]
    fn single_samples_are_members() {
        let model = PerturbationModel::measurement_noise(3, 20, 0.3);
        let d = sample_perturbation(&model, 4, 1000, 10).unwrap();
        assert!(spectral(&d).powi(2) <= 0.09 * 20.0 * (1.0 + 1e-9));
        assert!(spectral(&d) > 0.0);
    }

    #[test]
    fn zero_radius_gives_center() {
        let model = PerturbationModel::measurement_noise(3, 6, 0.0);
        let d = sample_perturbation(&model, 4, 100, 10).unwrap();
        assert_eq!(d.amax(), 0.0);
    }

    #[test]
    fn true_system_is_consistent() {
        let sys = LinearSystem::scalar_1d();
        let clean = random_clean_data(&sys, 20, &mut stream_rng(5, 0));
        let model = PerturbationModel::measurement_noise(3, 20, 0.3);
        let delta = sample_perturbation(&model, 6, 1000, 10).unwrap();
        let sigma = SigmaSet::new(perturb(&clean, &delta).unwrap(), model).unwrap();
        assert!(sigma.contains(&sys.a, &sys.b, 1e-9).unwrap());
        assert!(!sigma.contains(&Mat::from_element(1, 1, 50.0), &Mat::from_element(1, 1, -40.0), 1e-9).unwrap());
    }

    #[test]
    fn dataset_json_round_trip_is_exact() {
        let sys = LinearSystem::pendulum();
        let data = random_clean_data(&sys, 7, &mut stream_rng(11, 0));
        let ds = Dataset::new(&data, ModelSpec::ElementWise { eps: 1e-3 }, Some(11));
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.record().unwrap(), data);
        assert!(back.sigma().is_ok());
    }

    #[test]
    fn shift_structure_for_order_two() {
        let (j1, j2) = shift_matrices(1, 1, 2);
        // x = [y1, y2, u1, u2]; x+ rows after the first: [y1, u0, u1].
        assert_eq!(j1, Mat::from_row_slice(3, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        assert_eq!(j2, Mat::from_row_slice(3, 1, &[0.0, 1.0, 0.0]));
    }
}
