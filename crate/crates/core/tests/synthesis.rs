use proptest::prelude::*;

use qmi_core::datagen::{
    perturb, random_clean_data, sample_perturbation, stream_rng, LinearSystem, PerturbationModel, SigmaSet,
    StructuredTerm,
};
use qmi_core::informativity::{
    build_n, codesign_with_alpha, synth_qstab, synth_qstab_stable, synth_structured_codesign, Status,
};
use qmi_core::matkit::Mat;
use qmi_core::verify::verify_stabilization;

fn data_for(sys: &LinearSystem, model: &PerturbationModel, t: usize, seed: u64) -> qmi_core::datagen::DataRecord {
    let clean = random_clean_data(sys, t, &mut stream_rng(seed, 0));
    let delta = sample_perturbation(model, seed, 300, 10).unwrap();
    perturb(&clean, &delta).unwrap()
}

fn scalar(a: f64, b: f64) -> LinearSystem {
    LinearSystem::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b)).unwrap()
}

#[test]
fn scalar_example_certifies_and_verifies() {
    let sys = LinearSystem::scalar_1d();
    let model = PerturbationModel::measurement_noise(3, 20, 0.3);
    let data = data_for(&sys, &model, 20, 1);
    let res = synth_qstab(&data, &model).unwrap();
    assert_eq!(res.status, Status::InformativeCertified);
    let sigma = SigmaSet::new(data, model).unwrap();
    let rep = verify_stabilization(&sigma, res.k.as_ref().unwrap(), 500, 2).unwrap();
    assert_eq!(rep.violations, 0, "{}", rep.summary());
}

#[test]
fn single_term_codesign_matches_qstab() {
    let sys = scalar(1.2, 0.6);
    for (seed, eps) in [(1u64, 0.05), (2, 0.3), (3, 1.0)] {
        let single = PerturbationModel::measurement_noise(3, 10, eps);
        let data = data_for(&sys, &single, 10, seed);
        let PerturbationModel::Single { e, phi_hat } = &single else { unreachable!() };
        let structured = PerturbationModel::structured(vec![StructuredTerm {
            e: e.clone(),
            f: Mat::identity(10, 10),
            phi: phi_hat.clone(),
        }])
        .unwrap();
        let a = synth_qstab(&data, &single).unwrap();
        let b = synth_structured_codesign(&data, &structured).unwrap();
        assert_eq!(a.certified(), b.certified(), "eps {eps}: {:?} vs {:?}", a.message, b.message);
    }
}

#[test]
fn rescaled_multiplier_keeps_verdict() {
    let sys = scalar(0.9, 0.8);
    let model = PerturbationModel::element_wise(3, 6, 0.05);
    let data = data_for(&sys, &model, 6, 4);
    let one = codesign_with_alpha(&data, &model, 1.0).unwrap();
    let c = codesign_with_alpha(&data, &model, 7.5).unwrap();
    assert!(one.certified());
    assert_eq!(one.certified(), c.certified());
    for r in [&one, &c] {
        assert!(r.residuals.values().all(|v| *v >= -1e-7), "{:?}", r.residuals);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stable_reduction_agrees_with_full_lmi(seed in 0u64..1000, eps in 0.05f64..0.6) {
        let sys = scalar(1.2, 0.6);
        let model = PerturbationModel::measurement_noise(3, 15, eps);
        let data = data_for(&sys, &model, 15, seed);
        let full = synth_qstab(&data, &model).unwrap();
        let cm = build_n(&data, &model).unwrap();
        match synth_qstab_stable(&data, &model) {
            Ok(red) => {
                prop_assert!(cm.in_pi);
                prop_assert_eq!(full.certified(), red.certified());
            }
            Err(_) => prop_assert!(!cm.in_pi),
        }
    }

    #[test]
    fn certified_gain_stabilizes_the_true_system(seed in 0u64..1000, eps in 0.01f64..0.4) {
        let sys = scalar(1.2, 0.6);
        let model = PerturbationModel::measurement_noise(3, 20, eps);
        let data = data_for(&sys, &model, 20, seed);
        let res = synth_qstab(&data, &model).unwrap();
        if res.certified() {
            let k = res.k.unwrap()[(0, 0)];
            prop_assert!((1.2 + 0.6 * k).abs() < 1.0);
            prop_assert!(res.residuals.values().all(|v| *v >= -1e-7));
        }
    }
}
