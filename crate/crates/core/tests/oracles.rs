use proptest::prelude::*;

use qmi_core::datagen::{gaussian, stream_rng};
use qmi_core::informativity::{
    ar_pre_schur, lmi_ar, lmi_h2, lmi_hinf, lmi_qstab, perf_pre_schur, qstab_pre_schur,
};
use qmi_core::matkit::{pinv_rect, schur_complement, spectral_radius, Mat, SymMat, RANK_TOL};
use qmi_core::qmi::{find_slem_certificate, slem_certificate_check, QmiSet};
use qmi_core::verify::{brute_inclusion, freq_gain, h2_norm, h2_norm_impulse, hinf_norm};

fn spd(n: usize, seed: u64) -> SymMat {
    let g = gaussian(n, n, &mut stream_rng(seed, 7));
    SymMat::symmetrize(&g * g.transpose() + Mat::identity(n, n) * 0.5)
}

fn sym(n: usize, seed: u64) -> SymMat {
    SymMat::symmetrize(gaussian(n, n, &mut stream_rng(seed, 8)))
}

fn stable(n: usize, rho: f64, seed: u64) -> Mat {
    let a = gaussian(n, n, &mut stream_rng(seed, 9));
    let r = spectral_radius(&a).max(1e-3);
    a * (rho / r)
}

/// `N` with `[I; Z]ᵀ N [I; Z] = Q2 - (Z - Zc)ᵀ R2 (Z - Zc)`.
fn ellipsoid_n(q2: &SymMat, r2: &SymMat, zc: &Mat) -> SymMat {
    let r2m = r2.as_mat();
    let n11 = q2.as_mat() - zc.transpose() * r2m * zc;
    let n12 = zc.transpose() * r2m;
    qmi_core::matkit::sym_blocks(&[q2.dim(), r2.dim()], |i, j| match (i, j) {
        (0, 0) => Some(n11.clone()),
        (0, 1) => Some(n12.clone()),
        (1, 1) => Some(-r2m),
        _ => None,
    })
}

fn rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

#[test]
fn scalar_h2_norm_frozen() {
    let a = Mat::from_element(1, 1, 0.5);
    let c = Mat::from_element(1, 1, 1.0);
    assert!((h2_norm(&a, &c).unwrap() - 1.154_700_538_379_251_7).abs() < 1e-14);
    assert_eq!(h2_norm(&Mat::from_element(1, 1, 1.0), &c).unwrap(), f64::INFINITY);
}

#[test]
fn scalar_hinf_norm_frozen() {
    // 1 / (1 - 0.5) at ω = 0.
    let a = Mat::from_element(1, 1, 0.5);
    let one = Mat::from_element(1, 1, 1.0);
    let g = hinf_norm(&a, &one, &one).unwrap();
    assert!((g - 2.0).abs() < 2e-6, "{g}");
}

#[test]
fn nested_intervals() {
    // |z| ≤ 1 inside |z| < 2, not inside |z| < 0.5.
    let n = SymMat::from_diagonal(&[1.0, -1.0]);
    let wide = SymMat::from_diagonal(&[4.0, -1.0]);
    let narrow = SymMat::from_diagonal(&[0.25, -1.0]);
    let cert = find_slem_certificate(&wide, &n, 1).unwrap().expect("wide interval contains");
    assert!(slem_certificate_check(&wide, &n, &cert, 1, 1e-9));
    assert!(brute_inclusion(&n, &wide, 1, 201).unwrap());
    assert!(find_slem_certificate(&narrow, &n, 1).unwrap().is_none());
    assert!(!brute_inclusion(&n, &narrow, 1, 201).unwrap());
}

#[test]
fn positive_definite_m_needs_no_multiplier() {
    let n = SymMat::from_diagonal(&[1.0, -1.0]);
    let m = SymMat::from_diagonal(&[3.0, 0.0]);
    let cert = find_slem_certificate(&m, &n, 1).unwrap().unwrap();
    assert!(cert.beta > 0.0 && cert.beta < 3.0 + 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penrose_conditions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, rank in 1usize..6) {
        let mut rng = stream_rng(seed, 0);
        let k = rank.min(rows).min(cols);
        let a = gaussian(rows, k, &mut rng) * gaussian(k, cols, &mut rng);
        let ap = pinv_rect(&a, RANK_TOL);
        prop_assert!(rel(&(&a * &ap * &a), &a) < 1e-9);
        prop_assert!(rel(&(&ap * &a * &ap), &ap) < 1e-9);
        let aap = &a * &ap;
        let apa = &ap * &a;
        prop_assert!(rel(&aap.transpose(), &aap) < 1e-9);
        prop_assert!(rel(&apa.transpose(), &apa) < 1e-9);
    }

    #[test]
    fn ellipsoid_form_reconstructs(seed in any::<u64>(), q in 1usize..4, r in 1usize..4) {
        let q2 = spd(q, seed);
        let r2 = spd(r, seed ^ 1);
        let zc = gaussian(r, q, &mut stream_rng(seed, 2));
        let n = ellipsoid_n(&q2, &r2, &zc);
        let set = QmiSet::new(n, q).unwrap();
        let form = set.ellipsoid(1e-9).expect("ellipsoid class");
        prop_assert!(form.is_bounded());
        prop_assert!(rel(&form.center, &zc) < 1e-9);
        let qm = form.q_mat.as_mat();
        prop_assert!(rel(&(qm * qm), q2.as_mat()) < 1e-9);
        let z = gaussian(r, q, &mut stream_rng(seed, 3));
        let d = &z - &zc;
        let expect = q2.as_mat() - d.transpose() * r2.as_mat() * &d;
        let got = set.quadratic(&z).unwrap();
        prop_assert!(rel(got.as_mat(), &expect) < 1e-9);
    }

    #[test]
    fn qstab_schur_forms_agree(seed in any::<u64>(), n in 1usize..4, m in 1usize..3) {
        let p = spd(n, seed);
        let l = gaussian(m, n, &mut stream_rng(seed, 4));
        let nm = sym(2 * n + m, seed);
        let post = lmi_qstab(&p, &l, 0.3, 0.1, &nm);
        let pre = qstab_pre_schur(&p, &l, 0.3, 0.1, &nm).unwrap();
        let sc = schur_complement(&post, pre.dim());
        prop_assert!(rel(sc.as_mat(), pre.as_mat()) < 1e-7);
    }

    #[test]
    fn performance_schur_forms_agree(seed in any::<u64>(), n in 1usize..4, m in 1usize..3, hinf in any::<bool>()) {
        let y = spd(n, seed);
        let l = gaussian(m, n, &mut stream_rng(seed, 4)) * 0.3;
        let pp = n + m;
        let c = gaussian(pp, n, &mut stream_rng(seed, 5)) * 0.2;
        let d = gaussian(pp, m, &mut stream_rng(seed, 6)) * 0.2;
        let nm = sym(2 * n + m, seed);
        let (post, shift, g2) = if hinf {
            (lmi_hinf(&y, &l, 0.3, 0.1, &nm, &c, &d, 5.0), 1.0, 25.0)
        } else {
            (lmi_h2(&y, &l, 0.3, 0.1, &nm, &c, &d), 0.0, 1.0)
        };
        // The Schur step needs Y - C_YLᵀ C_YL / g2 ≻ 0.
        let cyl = &c * y.as_mat() + &d * &l;
        prop_assume!(SymMat::symmetrize(y.as_mat() - cyl.transpose() * &cyl / g2).min_eig() > 1e-3);
        let pre = perf_pre_schur(&y, &l, 0.3, 0.1, &nm, &c, &d, shift, g2).unwrap();
        let sc = schur_complement(&post, pre.dim());
        prop_assert!(rel(sc.as_mat(), pre.as_mat()) < 1e-7);
    }

    #[test]
    fn ar_schur_forms_agree(seed in any::<u64>(), pdim in 1usize..3, m in 1usize..3, order in 1usize..3) {
        let nx = (pdim + m) * order;
        let p = spd(nx, seed);
        let l = gaussian(m, nx, &mut stream_rng(seed, 4)) * 0.2;
        let nm = sym(pdim + nx + m, seed);
        let post = lmi_ar(&p, &l, 0.3, 0.1, &nm, pdim);
        let pre = match ar_pre_schur(&p, &l, 0.3, 0.1, &nm, pdim) {
            Ok(v) => v,
            Err(_) => return Ok(()),
        };
        let sc = schur_complement(&post, pre.dim());
        prop_assert!(rel(sc.as_mat(), pre.as_mat()) < 1e-7);
    }

    #[test]
    fn h2_oracles_agree(seed in any::<u64>(), n in 1usize..5, p in 1usize..3, rho in 0.05f64..0.95) {
        let a = stable(n, rho, seed);
        let c = gaussian(p, n, &mut stream_rng(seed, 10));
        let lyap = h2_norm(&a, &c).unwrap();
        let imp = h2_norm_impulse(&a, &c, 1e-16);
        prop_assert!((lyap - imp).abs() <= 1e-6 * lyap.max(1.0), "{} vs {}", lyap, imp);
    }

    #[test]
    fn hinf_dominates_sampled_gain(seed in any::<u64>(), n in 1usize..4, rho in 0.1f64..0.9) {
        let a = stable(n, rho, seed);
        let b = gaussian(n, 1, &mut stream_rng(seed, 11));
        let c = gaussian(1, n, &mut stream_rng(seed, 12));
        let g = hinf_norm(&a, &b, &c).unwrap();
        let sampled = (0..=400)
            .map(|i| freq_gain(&a, &b, &c, std::f64::consts::PI * i as f64 / 400.0))
            .fold(0.0, f64::max);
        prop_assert!(g >= sampled * (1.0 - 1e-5));
        prop_assert!(g <= sampled * 1.05 + 1e-9);
    }

    #[test]
    fn certificate_implies_inclusion(seed in any::<u64>(), r in 1usize..3, shrink in 0.2f64..3.0) {
        let q2 = SymMat::from_diagonal(&[1.0]);
        let r2 = spd(r, seed);
        let zc = gaussian(r, 1, &mut stream_rng(seed, 13));
        let n = ellipsoid_n(&q2, &r2, &zc);
        let m = ellipsoid_n(&SymMat::from_diagonal(&[shrink]), &r2, &zc);
        if let Some(cert) = find_slem_certificate(&m, &n, 1).unwrap() {
            prop_assert!(slem_certificate_check(&m, &n, &cert, 1, 1e-7));
            prop_assert!(brute_inclusion(&n, &m, 1, 41).unwrap());
        }
    }
}
