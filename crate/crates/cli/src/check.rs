//! Independent re-check of a synthesis result: the defining constraint is rebuilt from the
//! data and the returned variables, and the controller is run against sampled systems.

use serde::Serialize;

use qmi_core::datagen::{DataRecord, PerturbationModel, SigmaSet};
use qmi_core::error::{Error, Result};
use qmi_core::informativity::{
    build_n, build_n_from_phi, lmi_ar, lmi_ar_z, lmi_h2, lmi_hinf, lmi_qstab, lmi_yl, rel_min_eig, OuterPhiData,
    Performance, SynthesisResult, RESIDUAL_TOL,
};
use qmi_core::matkit::{Mat, SymMat};
use qmi_core::verify::{
    lift_ar, sample_consistency_systems, verify_performance_systems, verify_systems, NormKind, VerificationReport,
};

#[derive(Clone, Debug, Serialize)]
pub struct CertificateCheck {
    /// Smallest relative eigenvalue over the non-strict constraints.
    pub residual: f64,
    /// Smallest eigenvalue over the strict constraints (`P`, `β`, coupling blocks).
    pub strict: f64,
    pub stabilization: VerificationReport,
    pub performance: Option<VerificationReport>,
}

impl CertificateCheck {
    pub fn residual_ok(&self) -> bool {
        self.residual >= -RESIDUAL_TOL && self.strict > 0.0
    }

    pub fn passed(&self) -> bool {
        self.residual_ok()
            && self.stabilization.passed()
            && self.performance.as_ref().is_none_or(|p| p.passed())
    }

    /// Compact form without per-sample detail.
    pub fn summary(&self) -> serde_json::Value {
        let rep = |r: &VerificationReport| {
            serde_json::json!({
                "n_samples": r.n_samples,
                "violations": r.violations,
                "worst_margin": r.worst_margin,
                "lyapunov_min_eig": r.lyapunov_min_eig,
                "summary": r.summary(),
            })
        };
        serde_json::json!({
            "residual": self.residual,
            "strict": self.strict,
            "residual_ok": self.residual_ok(),
            "stabilization": rep(&self.stabilization),
            "performance": self.performance.as_ref().map(rep),
            "passed": self.passed(),
        })
    }
}

/// The synthesis problem a result belongs to.
pub struct Instance<'a> {
    pub method: &'a str,
    pub data: &'a DataRecord,
    pub model: &'a PerturbationModel,
    pub perf: Option<&'a Performance>,
    /// The data-generating system (lifted for AR data), added to the sampled systems when known.
    pub truth: Option<(&'a Mat, &'a Mat)>,
}

fn need<'a>(v: &'a Option<Mat>, name: &str) -> Result<&'a Mat> {
    v.as_ref().ok_or_else(|| Error::Config(format!("result has no {name}")))
}

fn need_f(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("result has no {name}")))
}

pub fn check_certificate(inst: &Instance, res: &SynthesisResult, samples: usize, seed: u64) -> Result<CertificateCheck> {
    let k = need(&res.k, "K")?;
    let p = SymMat::symmetrize(need(&res.p, "P")?.clone());
    let l = need(&res.l, "L")?;
    let alpha = need_f(res.alpha, "alpha")?;
    let beta = need_f(res.beta, "beta")?;
    let mut strict = p.min_eig().min(beta);
    let perf = || inst.perf.ok_or_else(|| Error::Config("performance output missing".into()));
    let sigma = || SigmaSet::new(inst.data.clone(), inst.model.clone());

    let (residual, mut systems, perf_check) = match inst.method {
        "qstab" | "qstab-stable" => {
            let n = build_n(inst.data, inst.model)?;
            let f = lmi_qstab(&p, l, alpha, beta, n.matrix());
            (rel_min_eig(&f), sigma()?.sample(samples, seed)?, None)
        }
        "h2" | "h2opt" | "hinf" => {
            let pf = perf()?;
            let n = build_n(inst.data, inst.model)?;
            let gamma = need_f(res.gamma, "gamma")?;
            let (f, g2, kind) = if inst.method == "hinf" {
                (lmi_hinf(&p, l, alpha, beta, n.matrix(), &pf.c, &pf.d, gamma), gamma * gamma, NormKind::Hinf)
            } else {
                (lmi_h2(&p, l, alpha, beta, n.matrix(), &pf.c, &pf.d), 1.0, NormKind::H2)
            };
            strict = strict.min(rel_min_eig(&lmi_yl(&p, l, &pf.c, &pf.d, g2)));
            (rel_min_eig(&f), sigma()?.sample(samples, seed)?, Some((gamma, kind)))
        }
        "ar" => {
            let n = build_n(inst.data, inst.model)?;
            let pd = inst.data.q();
            let f = lmi_ar(&p, l, alpha, beta, n.matrix(), pd);
            strict = strict.min(rel_min_eig(&lmi_ar_z(&p, l, pd)));
            let sampled = sigma()?.sample(samples, seed)?;
            (rel_min_eig(&f), lift_ar(&sampled, pd, inst.data.m())?, None)
        }
        "structured-codesign" | "structured-twostep" => {
            let key = if inst.method == "structured-codesign" { "Phi" } else { "Phi_app" };
            let phi = SymMat::symmetrize(
                res.aux.get(key).cloned().ok_or_else(|| Error::Config(format!("result has no {key}")))?,
            );
            let cm = build_n_from_phi(inst.data, &phi)?;
            let f = lmi_qstab(&p, l, alpha, beta, cm.matrix());
            let mut residual = rel_min_eig(&f);
            if let Some(aj) = res.aux.get("alpha_j") {
                let od = OuterPhiData::new(inst.model)?;
                let min_aj = aj.iter().copied().fold(0.0, f64::min);
                residual = residual.min(rel_min_eig(&od.lhs(&phi, aj.as_slice()))).min(min_aj);
            }
            let systems = sample_consistency_systems(&cm.n_mat, inst.data.nx(), samples, seed)?;
            (residual, systems, None)
        }
        other => return Err(Error::Config(format!("unknown method '{other}'"))),
    };
    if let Some((a, b)) = inst.truth {
        systems.push((a.clone(), b.clone()));
    }
    let stabilization = verify_systems(&systems, k, Some(&p))?;
    let performance = match perf_check {
        Some((gamma, kind)) => Some(verify_performance_systems(&systems, k, perf()?, gamma, kind)?),
        None => None,
    };
    Ok(CertificateCheck {
        residual,
        strict,
        stabilization,
        performance,
    })
}
