//! Sampling-based oracles that check certificates without going through the LMI path:
//! closed-loop spectral radius, Lyapunov residuals, H2 norms (Gramian and impulse energy),
//! H∞ norms (bilinear map to continuous time and Hamiltonian bisection), and a dense
//! grid test of QMI set inclusion for small instances.
//!
//! A report with zero violations means "no counterexample in `n_samples` samples".

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::datagen::{gaussian, shift_matrices, stream_rng, SigmaSet};
use crate::error::{dims, Error, Result};
use crate::informativity::Performance;
use crate::matkit::{self, dlyap, inverse, rows, spectral_norm, spectral_radius, Mat, SymMat, PSD_TOL};
use crate::qmi::{self, QmiSet};

/// Samples with spectral radius in `[1 - RHO_MARGIN, ∞)` count as violations.
pub const RHO_MARGIN: f64 = 1e-10;
/// Relative tolerance of the H∞ bisection.
pub const HINF_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "A", with = "rows")]
    pub a: Mat,
    #[serde(rename = "B", with = "rows")]
    pub b: Mat,
    /// Spectral radius, or the norm for performance checks.
    pub value: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n_samples: usize,
    pub violations: usize,
    /// Smallest slack over the samples: `1 - ρ` or `γ - norm`.
    pub worst_margin: f64,
    /// Smallest Lyapunov residual eigenvalue when a certificate `P` was supplied.
    pub lyapunov_min_eig: Option<f64>,
    pub detail: Vec<SampleRecord>,
}

impl VerificationReport {
    fn from_records(detail: Vec<SampleRecord>, margins: &[f64], lyap: Option<f64>) -> Self {
        VerificationReport {
            n_samples: detail.len(),
            violations: detail.iter().filter(|r| !r.pass).count(),
            worst_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
            lyapunov_min_eig: lyap,
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.n_samples > 0
    }

    pub fn summary(&self) -> String {
        if self.violations == 0 {
            format!("no counterexample in {} samples", self.n_samples)
        } else {
            format!("{} violations in {} samples", self.violations, self.n_samples)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Per-sample margins as CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,value,pass\n");
        for (i, r) in self.detail.iter().enumerate() {
            out += &format!("{i},{:e},{}\n", r.value, r.pass);
        }
        out
    }
}

fn closed_loop(a: &Mat, b: &Mat, k: &Mat) -> Result<Mat> {
    if b.ncols() != k.nrows() || k.ncols() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "closed_loop",
            expected: format!("K {}", dims(b.ncols(), a.ncols())),
            got: dims(k.nrows(), k.ncols()),
        });
    }
    Ok(a + b * k)
}

/// Stabilization check of `A + BK` on explicit systems; with `p` also the residual of
/// `P - (A+BK) P (A+BK)ᵀ ≻ 0`.
pub fn verify_systems(systems: &[(Mat, Mat)], k: &Mat, p: Option<&SymMat>) -> Result<VerificationReport> {
    let mut detail = Vec::with_capacity(systems.len());
    let mut margins = Vec::with_capacity(systems.len());
    let mut lyap = p.map(|_| f64::INFINITY);
    for (a, b) in systems {
        let acl = closed_loop(a, b, k)?;
        let rho = spectral_radius(&acl);
        let mut pass = rho < 1.0 - RHO_MARGIN;
        if let Some(p) = p {
            let res = SymMat::symmetrize(p.as_mat() - &acl * p.as_mat() * acl.transpose());
            let ev = res.min_eig();
            lyap = lyap.map(|l| l.min(ev));
            pass &= ev > 0.0;
        }
        margins.push(1.0 - rho);
        detail.push(SampleRecord {
            a: a.clone(),
            b: b.clone(),
            value: rho,
            pass,
        });
    }
    Ok(VerificationReport::from_records(detail, &margins, lyap))
}

/// Lifts AR systems `([A₁ … A_L B₁ … B_L], B₀)` to the state-space pair `([A; J₁], [B₀; J₂])`.
pub fn lift_ar(systems: &[(Mat, Mat)], p: usize, m: usize) -> Result<Vec<(Mat, Mat)>> {
    let mut out = Vec::with_capacity(systems.len());
    for (a, b) in systems {
        let nx = a.ncols();
        if a.nrows() != p || b.shape() != (p, m) || nx % (p + m) != 0 || nx == 0 {
            return Err(Error::DimensionMismatch {
                context: "lift_ar",
                expected: format!("A p x (p+m)L and B {}", dims(p, m)),
                got: format!("A {}, B {}", dims(a.nrows(), a.ncols()), dims(b.nrows(), b.ncols())),
            });
        }
        let (j1, j2) = shift_matrices(p, m, nx / (p + m));
        out.push((matkit::vstack(&[a, &j1]), matkit::vstack(&[b, &j2])));
    }
    Ok(out)
}

/// Samples `Σ` (see [`SigmaSet::sample`]) and checks `ρ(A + BK) < 1` on every member.
pub fn verify_stabilization(sigma: &SigmaSet, k: &Mat, n_samples: usize, seed: u64) -> Result<VerificationReport> {
    verify_stabilization_with(sigma, k, None, n_samples, seed)
}

pub fn verify_stabilization_with(
    sigma: &SigmaSet,
    k: &Mat,
    p: Option<&SymMat>,
    n_samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let systems = sigma.sample(n_samples, seed)?;
    verify_systems(&systems, k, p)
}

/// Members of `Z(N)` read as systems `[A B] = Zᵀ`: the center, then boundary and interior
/// points of the ellipsoid form. Unbounded directions are explored with Gaussian offsets
/// scaled by `1 + |center|`.
pub fn sample_consistency_systems(set: &QmiSet, nx: usize, count: usize, seed: u64) -> Result<Vec<(Mat, Mat)>> {
    let form = set.ellipsoid(PSD_TOL).ok_or(Error::NotEllipsoid)?;
    let (q, r) = (set.q(), set.r());
    if nx > r {
        return Err(Error::DimensionMismatch {
            context: "sample_consistency_systems",
            expected: format!("nx <= {r}"),
            got: nx.to_string(),
        });
    }
    let split = |z: &Mat| {
        let zt = z.transpose();
        (zt.columns(0, nx).into_owned(), zt.columns(nx, r - nx).into_owned())
    };
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    out.push(split(&form.center));
    let mut rng = stream_rng(seed, 2);
    let scale = 1.0 + form.center.norm();
    let mut attempts = 0;
    while out.len() < count && attempts < 50 * count + 100 {
        attempts += 1;
        let xi = qmi::sample_operator_ball(r, q, &mut rng, attempts % 2 == 0);
        let h = gaussian(r, q, &mut rng) * scale;
        let z = form.member(&xi, Some(&h));
        if set.contains(&z, false, 1e-9)? {
            out.push(split(&z));
        }
    }
    Ok(out)
}

/// `‖C (zI - A)⁻¹‖₂` for the disturbance channel `x⁺ = A x + w`, `z = C x`: the square root of
/// `trace(C W Cᵀ)` with `W = A W Aᵀ + I`.
pub fn h2_norm(a: &Mat, c: &Mat) -> Result<f64> {
    if spectral_radius(a) >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let w = dlyap(a, &Mat::identity(a.nrows(), a.nrows()))?;
    Ok((c * w * c.transpose()).trace().max(0.0).sqrt())
}

/// Same quantity from the impulse response energy `Σ_k |C A^k|_F²`, truncated once the
/// tail falls below `tol` relative to the sum.
pub fn h2_norm_impulse(a: &Mat, c: &Mat, tol: f64) -> f64 {
    if spectral_radius(a) >= 1.0 {
        return f64::INFINITY;
    }
    let mut term = c.clone();
    let mut sum = 0.0;
    for _ in 0..1_000_000 {
        let e = term.norm_squared();
        sum += e;
        if e <= tol * sum && sum > 0.0 {
            break;
        }
        if sum == 0.0 && term.amax() == 0.0 {
            break;
        }
        term = &term * a;
    }
    sum.sqrt()
}

/// Largest singular value of `C (e^{jω} I - A)⁻¹ B`.
pub fn freq_gain(a: &Mat, b: &Mat, c: &Mat, omega: f64) -> f64 {
    let n = a.nrows();
    let z = Complex::new(omega.cos(), omega.sin());
    let ac = a.map(|v| Complex::new(v, 0.0));
    let m = nalgebra::DMatrix::<Complex<f64>>::identity(n, n) * z - ac;
    let bc = b.map(|v| Complex::new(v, 0.0));
    let cc = c.map(|v| Complex::new(v, 0.0));
    match m.lu().solve(&bc) {
        Some(x) => {
            let g = cc * x;
            g.singular_values().iter().copied().fold(0.0, f64::max)
        }
        None => f64::INFINITY,
    }
}

/// Whether `‖C (zI - A)⁻¹ B‖∞ < γ` for Schur-stable `A`, via the bilinear transform
/// `z = (1 + s)/(1 - s)` and the imaginary-axis eigenvalue test on the Hamiltonian.
fn hinf_below(a: &Mat, b: &Mat, c: &Mat, gamma: f64) -> Result<bool> {
    let n = a.nrows();
    let i = Mat::identity(n, n);
    let api = inverse(&(a + &i))?;
    let s2 = std::f64::consts::SQRT_2;
    let ac = &api * (a - &i);
    let bc = &api * b * s2;
    let cc = c * &api * s2;
    let dc = -(c * &api * b);
    let r = Mat::identity(b.ncols(), b.ncols()) * (gamma * gamma) - dc.transpose() * &dc;
    if SymMat::symmetrize(r.clone()).min_eig() <= 0.0 {
        return Ok(false);
    }
    let ri = inverse(&r)?;
    let f = &ac + &bc * &ri * dc.transpose() * &cc;
    let g = &bc * &ri * bc.transpose();
    let h = cc.transpose() * (Mat::identity(c.nrows(), c.nrows()) + &dc * &ri * dc.transpose()) * &cc;
    let mut ham = Mat::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(&f);
    ham.view_mut((0, n), (n, n)).copy_from(&g);
    ham.view_mut((n, 0), (n, n)).copy_from(&(-h));
    ham.view_mut((n, n), (n, n)).copy_from(&(-f.transpose()));
    let scale = 1.0 + ham.amax();
    let eig = ham.complex_eigenvalues();
    Ok(eig.iter().all(|l| l.re.abs() > 1e-9 * scale))
}

/// H∞ norm of `(A, B, C, 0)` by bisection to relative tolerance [`HINF_TOL`];
/// infinite when `A` is not Schur stable.
pub fn hinf_norm(a: &Mat, b: &Mat, c: &Mat) -> Result<f64> {
    if spectral_radius(a) >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let mut lo = [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI]
        .iter()
        .map(|&w| freq_gain(a, b, c, w))
        .fold(0.0, f64::max);
    if lo == 0.0 && c.amax() == 0.0 {
        return Ok(0.0);
    }
    let mut hi = lo.max(1e-12) * 2.0;
    while !hinf_below(a, b, c, hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Ok(f64::INFINITY);
        }
    }
    while hi - lo > HINF_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if hinf_below(a, b, c, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    H2,
    Hinf,
}

/// Closed-loop performance norm of `x⁺ = (A+BK) x + w`, `z = (C + DK) x`.
pub fn closed_loop_norm(a: &Mat, b: &Mat, k: &Mat, perf: &Performance, kind: NormKind) -> Result<f64> {
    let acl = closed_loop(a, b, k)?;
    let ccl = &perf.c + &perf.d * k;
    match kind {
        NormKind::H2 => h2_norm(&acl, &ccl),
        NormKind::Hinf => hinf_norm(&acl, &Mat::identity(a.nrows(), a.nrows()), &ccl),
    }
}

/// Performance check on explicit systems: pass iff the closed loop is stable and its norm
/// is below `γ`.
pub fn verify_performance_systems(
    systems: &[(Mat, Mat)],
    k: &Mat,
    perf: &Performance,
    gamma: f64,
    kind: NormKind,
) -> Result<VerificationReport> {
    let mut detail = Vec::with_capacity(systems.len());
    let mut margins = Vec::with_capacity(systems.len());
    for (a, b) in systems {
        let rho = spectral_radius(&closed_loop(a, b, k)?);
        let norm = if rho < 1.0 - RHO_MARGIN {
            closed_loop_norm(a, b, k, perf, kind)?
        } else {
            f64::INFINITY
        };
        margins.push(gamma - norm);
        detail.push(SampleRecord {
            a: a.clone(),
            b: b.clone(),
            value: norm,
            pass: norm < gamma,
        });
    }
    Ok(VerificationReport::from_records(detail, &margins, None))
}

pub fn verify_performance(
    sigma: &SigmaSet,
    k: &Mat,
    perf: &Performance,
    gamma: f64,
    kind: NormKind,
    n_samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let systems = sigma.sample(n_samples, seed)?;
    verify_performance_systems(&systems, k, perf, gamma, kind)
}

/// Outcome of [`brute_inclusion_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InclusionCheck {
    pub included: bool,
    /// `Z(N)` is unbounded and only the part inside the declared box was explored.
    pub box_restricted: bool,
    /// Smallest `λmin([I; Z]ᵀ M [I; Z])` seen.
    pub worst: f64,
}

/// Box half-width for unbounded directions.
pub const INCLUSION_BOX: f64 = 10.0;

/// Dense test of `Z(N) ⊆ Z⁺(M)` for `q + r ≤ 4`: a lattice with `grid` points per
/// coordinate of the operator-norm ball in the ellipsoid parametrization, plus the radial
/// projection of every lattice point onto the boundary.
pub fn brute_inclusion_report(n: &SymMat, m: &SymMat, q: usize, grid: usize) -> Result<InclusionCheck> {
    if n.dim() != m.dim() || n.dim() > 4 || q == 0 || q > n.dim() {
        return Err(Error::DimensionMismatch {
            context: "brute_inclusion",
            expected: "N and M of equal size at most 4 with 0 < q".into(),
            got: format!("{} and {} with q = {q}", n.dim(), m.dim()),
        });
    }
    if grid < 2 {
        return Err(Error::Config("grid must have at least 2 points".into()));
    }
    let nset = QmiSet::new(n.clone(), q)?;
    let mset = QmiSet::new(m.clone(), q)?;
    let form = nset.ellipsoid(PSD_TOL).ok_or(Error::NotEllipsoid)?;
    let r = nset.r();
    let bounded = form.is_bounded();
    let k = r * q;
    let mut worst = f64::INFINITY;
    let mut eval = |z: &Mat| -> Result<()> {
        let v = mset.quadratic(z)?.min_eig();
        worst = worst.min(v);
        Ok(())
    };
    if k == 0 {
        eval(&Mat::zeros(0, q))?;
    }
    let coords = |idx: usize| -> Vec<f64> {
        let mut c = Vec::with_capacity(k);
        let mut rem = idx;
        for _ in 0..k {
            c.push(-1.0 + 2.0 * (rem % grid) as f64 / (grid - 1) as f64);
            rem /= grid;
        }
        c
    };
    let total = if k == 0 { 0 } else { grid.pow(k as u32) };
    let free_dirs = if bounded { Vec::new() } else { lattice_offsets(r, q, grid.min(5)) };
    for idx in 0..total {
        let xi = Mat::from_column_slice(r, q, &coords(idx));
        let s = spectral_norm(&xi);
        let mut pts = Vec::with_capacity(2);
        if s <= 1.0 {
            pts.push(xi.clone());
        }
        if s > 0.0 {
            pts.push(&xi / s);
        }
        for p in pts {
            if bounded {
                eval(&form.member(&p, None))?;
            } else {
                for h in &free_dirs {
                    eval(&form.member(&p, Some(&(h * INCLUSION_BOX))))?;
                }
            }
        }
    }
    Ok(InclusionCheck {
        included: worst > 0.0,
        box_restricted: !bounded,
        worst,
    })
}

fn lattice_offsets(r: usize, q: usize, g: usize) -> Vec<Mat> {
    let k = r * q;
    let total = g.pow(k as u32);
    (0..total)
        .map(|idx| {
            let mut rem = idx;
            Mat::from_fn(r, q, |_, _| {
                let v = -1.0 + 2.0 * (rem % g) as f64 / (g - 1).max(1) as f64;
                rem /= g;
                v
            })
        })
        .collect()
}

pub fn brute_inclusion(n: &SymMat, m: &SymMat, q: usize, grid: usize) -> Result<bool> {
    Ok(brute_inclusion_report(n, m, q, grid)?.included)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{perturb, random_clean_data, sample_perturbation, LinearSystem, PerturbationModel};
    use crate::informativity::synth_qstab;

    fn interval(lo: f64, hi: f64) -> SymMat {
        // z in [lo, hi]  <=>  -(z - lo)(z - hi) >= 0.
        SymMat::new(Mat::from_row_slice(2, 2, &[-lo * hi, 0.5 * (lo + hi), 0.5 * (lo + hi), -1.0])).unwrap()
    }

    #[test]
    fn lifted_ar_matches_preset_form() {
        use crate::datagen::ArSystem;
        let ar = ArSystem::new(
            vec![Mat::from_element(1, 1, 0.5), Mat::from_element(1, 1, -0.2)],
            vec![Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, 0.3), Mat::from_element(1, 1, 0.1)],
        )
        .unwrap();
        let (a, b) = ar.regressor_form();
        let lifted = lift_ar(&[(a, b)], 1, 1).unwrap();
        assert_eq!(lifted[0], ar.lifted());
    }

    #[test]
    fn nested_intervals() {
        assert!(brute_inclusion(&interval(-1.0, 1.0), &interval(-2.0, 2.0), 1, 11).unwrap());
        assert!(!brute_inclusion(&interval(-1.0, 1.0), &interval(-0.5, 2.0), 1, 11).unwrap());
        // Shared endpoint: not strictly inside.
        assert!(!brute_inclusion(&interval(-1.0, 1.0), &interval(-1.0, 2.0), 1, 11).unwrap());
    }

    #[test]
    fn h2_oracles_agree() {
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]);
        let c = Mat::from_row_slice(1, 2, &[1.0, -2.0]);
        let g = h2_norm(&a, &c).unwrap();
        let i = h2_norm_impulse(&a, &c, 1e-18);
        assert!((g - i).abs() < 1e-10 * g);
    }

    #[test]
    fn scalar_norms() {
        // 1/(z - a): H2² = 1/(1-a²), H∞ = 1/(1-|a|).
        let a = Mat::from_element(1, 1, 0.5);
        let one = Mat::from_element(1, 1, 1.0);
        assert!((h2_norm(&a, &one).unwrap() - (1.0f64 / 0.75).sqrt()).abs() < 1e-12);
        let h = hinf_norm(&a, &one, &one).unwrap();
        assert!((h - 2.0).abs() < 1e-5, "{h}");
        let h = hinf_norm(&(-a), &one, &one).unwrap();
        assert!((h - 2.0).abs() < 1e-5, "{h}");
    }

    #[test]
    fn hinf_dominates_sweep() {
        let a = Mat::from_row_slice(2, 2, &[0.6, 0.7, -0.7, 0.6]);
        let b = Mat::identity(2, 2);
        let c = Mat::from_row_slice(1, 2, &[1.0, 0.5]);
        let h = hinf_norm(&a, &b, &c).unwrap();
        let sweep = (0..=2000).map(|i| freq_gain(&a, &b, &c, std::f64::consts::PI * i as f64 / 2000.0)).fold(0.0, f64::max);
        assert!(h >= sweep * (1.0 - 1e-9));
        assert!(h <= sweep * 1.001);
    }

    #[test]
    fn zero_gain_on_unstable_sigma_fails_everywhere() {
        let sys = LinearSystem::scalar_1d();
        let clean = random_clean_data(&sys, 20, &mut stream_rng(1, 0));
        let model = PerturbationModel::measurement_noise(3, 20, 0.05);
        let d = sample_perturbation(&model, 1, 500, 5).unwrap();
        let data = perturb(&clean, &d).unwrap();
        let sigma = SigmaSet::new(data.clone(), model.clone()).unwrap();
        let rep = verify_stabilization(&sigma, &Mat::zeros(1, 1), 100, 3).unwrap();
        assert_eq!(rep.violations, rep.n_samples);
        let res = synth_qstab(&data, &model).unwrap();
        let k = res.k.unwrap();
        let p = SymMat::symmetrize(res.p.unwrap());
        let rep = verify_stabilization_with(&sigma, &k, Some(&p), 200, 3).unwrap();
        assert!(rep.passed(), "{}", rep.summary());
        assert!(rep.lyapunov_min_eig.unwrap() > 0.0);
    }
}
