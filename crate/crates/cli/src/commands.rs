//! The `synth` and `verify` commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qmi_core::datagen::{DataRecord, Dataset, PerturbationModel};
use qmi_core::error::{Error, Result};
use qmi_core::informativity::{
    synth_ar, synth_h2, synth_h2_optimal, synth_hinf, synth_qstab, synth_qstab_stable, synth_structured_codesign,
    synth_structured_twostep, Performance, Status, SynthesisResult,
};
use qmi_core::matkit::{from_rows, rows, Mat};

use crate::check::{check_certificate, Instance};
use crate::config::{
    generate, generate_ar, performance_matrices, DataSource, SynthConfig, VerifyConfig, METHODS, SCHEMA_VERSION,
};
use crate::output::Artifacts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemPair {
    #[serde(rename = "A", with = "rows")]
    pub a: Mat,
    #[serde(rename = "B", with = "rows")]
    pub b: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputPair {
    #[serde(rename = "C", with = "rows")]
    pub c: Mat,
    #[serde(rename = "D", with = "rows")]
    pub d: Mat,
}

/// File written by `synth` and read back by `verify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub schema_version: u32,
    pub command: String,
    pub method: String,
    pub seed: u64,
    pub dataset: Dataset,
    pub performance: Option<OutputPair>,
    pub result: SynthesisResult,
    /// Data-generating system, lifted for AR data.
    pub true_system: Option<SystemPair>,
}

fn code_of(status: Status) -> i32 {
    match status {
        Status::InformativeCertified => 0,
        Status::NotCertified => 2,
        Status::SolverError => 3,
    }
}

struct Resolved {
    data: DataRecord,
    model: PerturbationModel,
    dataset: Dataset,
    truth: Option<SystemPair>,
    default_perf: (Mat, Mat),
}

fn resolve(src: &DataSource, seed: u64) -> Result<Resolved> {
    match src {
        DataSource::Inline { dataset } => {
            let data = dataset.record()?;
            let model = dataset.model.build(dataset.q, dataset.nx, dataset.m, dataset.t)?;
            let default_perf = qmi_core::datagen::state_input_output(dataset.nx, dataset.m);
            Ok(Resolved {
                data,
                model,
                dataset: dataset.clone(),
                truth: None,
                default_perf,
            })
        }
        DataSource::Generated { system, t, perturbation } => {
            let sys = system.build()?;
            let model = perturbation.build(sys.n(), sys.n(), sys.m(), *t)?;
            let data = generate(&sys, &model, *t, seed)?;
            Ok(Resolved {
                dataset: Dataset::new(&data, perturbation.clone(), Some(seed)),
                data,
                model,
                truth: Some(SystemPair {
                    a: sys.a.clone(),
                    b: sys.b.clone(),
                }),
                default_perf: performance_matrices(&sys),
            })
        }
        DataSource::GeneratedAr { ar, t, perturbation } => {
            let ar = ar.build()?;
            let (areg, b0) = ar.regressor_form();
            let model = perturbation.build(ar.p(), areg.ncols(), ar.m(), *t)?;
            let data = generate_ar(&ar, &model, *t, seed)?;
            let (la, lb) = ar.lifted();
            Ok(Resolved {
                dataset: Dataset::new(&data, perturbation.clone(), Some(seed)),
                data,
                model,
                truth: Some(SystemPair { a: la, b: lb }),
                default_perf: (Mat::zeros(0, areg.ncols()), Mat::zeros(0, b0.ncols())),
            })
        }
    }
}

fn needs_perf(method: &str) -> bool {
    matches!(method, "h2" | "h2opt" | "hinf")
}

fn perf_of(out: &OutputPair, data: &DataRecord) -> Result<Performance> {
    Performance::new(out.c.clone(), out.d.clone(), data.nx(), data.m())
}

/// Runs one synthesis method on configured data.
pub fn synth(cfg: &SynthConfig, seed: u64) -> Result<Artifacts> {
    let method = cfg.method.as_str();
    if !METHODS.contains(&method) {
        return Err(Error::Config(format!("unknown method '{method}'; expected one of {}", METHODS.join(", "))));
    }
    let r = resolve(&cfg.data, seed)?;
    let performance = if needs_perf(method) {
        let (c, d) = match (&cfg.c, &cfg.d) {
            (Some(c), Some(d)) => (from_rows(c)?, from_rows(d)?),
            (None, None) => r.default_perf.clone(),
            _ => return Err(Error::Config("give both c and d or neither".into())),
        };
        Some(OutputPair { c, d })
    } else {
        None
    };
    let gamma = || cfg.gamma.ok_or_else(|| Error::Config(format!("method '{method}' needs gamma")));
    let (data, model) = (&r.data, &r.model);
    let result = match method {
        "qstab" => synth_qstab(data, model)?,
        "qstab-stable" => match synth_qstab_stable(data, model) {
            Err(Error::NotEllipsoid) => {
                return Err(Error::Config("qstab-stable needs an ellipsoidal consistency set".into()))
            }
            other => other?,
        },
        "h2" => synth_h2(data, model, &perf_of(performance.as_ref().unwrap(), data)?, gamma()?)?,
        "h2opt" => synth_h2_optimal(data, model, &perf_of(performance.as_ref().unwrap(), data)?)?,
        "hinf" => synth_hinf(data, model, &perf_of(performance.as_ref().unwrap(), data)?, gamma()?)?,
        "ar" => synth_ar(data, model)?,
        "structured-codesign" => synth_structured_codesign(data, model)?,
        "structured-twostep" => synth_structured_twostep(data, model)?,
        _ => unreachable!(),
    };
    let out = SynthOutput {
        schema_version: SCHEMA_VERSION,
        command: "synth".into(),
        method: method.into(),
        seed,
        dataset: r.dataset,
        performance,
        true_system: r.truth,
        result,
    };
    let mut art = Artifacts::new("synth");
    art.code = code_of(out.result.status);
    art.summary = serde_json::to_value(&out).map_err(|e| Error::Config(e.to_string()))?;
    Ok(art)
}

/// Re-checks a `synth` output: constraint residuals plus sampled closed loops.
pub fn verify(cfg: &VerifyConfig, base: &Path, seed: u64) -> Result<Artifacts> {
    let path = base.join(&cfg.result);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let out: SynthOutput = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    verify_output(&out, cfg.samples, seed)
}

pub fn verify_output(out: &SynthOutput, samples: usize, seed: u64) -> Result<Artifacts> {
    let ds = &out.dataset;
    let data = ds.record()?;
    let model = ds.model.build(ds.q, ds.nx, ds.m, ds.t)?;
    let perf = out.performance.as_ref().map(|p| perf_of(p, &data)).transpose()?;
    let mut art = Artifacts::new("verify");
    let mut summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "command": "verify",
        "method": out.method,
        "seed": seed,
        "status": out.result.status,
    });
    if !out.result.certified() {
        summary["check"] = serde_json::Value::Null;
        summary["passed"] = serde_json::json!(false);
        art.summary = summary;
        art.code = 2;
        return Ok(art);
    }
    let inst = Instance {
        method: &out.method,
        data: &data,
        model: &model,
        perf: perf.as_ref(),
        truth: out.true_system.as_ref().map(|s| (&s.a, &s.b)),
    };
    let check = check_certificate(&inst, &out.result, samples, seed)?;
    summary["check"] = check.summary();
    summary["passed"] = serde_json::json!(check.passed());
    art.code = if check.passed() { 0 } else { 2 };
    art.summary = summary;
    Ok(art)
}
