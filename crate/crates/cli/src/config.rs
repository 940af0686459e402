//! JSON configuration for the experiment and batch commands. Every field has a default, so
//! `{}` is a valid config for each experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qmi_core::datagen::{
    perturb, random_ar_data, random_clean_data, ArSystem, sample_perturbation, stream_rng, state_input_output, DataRecord, Dataset, LinearSystem, ModelSpec,
    PerturbationModel,
};
use qmi_core::error::{Error, Result};
use qmi_core::matkit::{from_rows, Mat};

/// Version tag written into every JSON and CSV artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Named preset or explicit matrices (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Preset {
        preset: String,
    },
    Matrices {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        c: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        d: Option<Vec<Vec<f64>>>,
    },
}

impl SystemSpec {
    pub fn preset(name: &str) -> Self {
        SystemSpec::Preset { preset: name.into() }
    }

    pub fn build(&self) -> Result<LinearSystem> {
        match self {
            SystemSpec::Preset { preset } => match preset.as_str() {
                "scalar-1d" => Ok(LinearSystem::scalar_1d()),
                "pendulum" => Ok(LinearSystem::pendulum()),
                "rank-deficient" => Ok(LinearSystem::rank_deficient_example()),
                other => Err(Error::Config(format!("unknown system preset '{other}'"))),
            },
            SystemSpec::Matrices { a, b, c, d } => {
                let sys = LinearSystem::new(from_rows(a)?, from_rows(b)?)?;
                match (c, d) {
                    (Some(c), Some(d)) => sys.with_output(from_rows(c)?, from_rows(d)?),
                    (None, None) => Ok(sys),
                    _ => Err(Error::Config("system needs both c and d or neither".into())),
                }
            }
        }
    }
}

/// Performance output: `z = C x + D u` for the H2 and H∞ commands. Defaults to the
/// system's own output, or `C = [I; 0]`, `D = [0; I]`.
pub fn performance_matrices(sys: &LinearSystem) -> (Mat, Mat) {
    match (&sys.c, &sys.d) {
        (Some(c), Some(d)) => (c.clone(), d.clone()),
        _ => state_input_output(sys.n(), sys.m()),
    }
}

/// Seed of dataset `idx` in a sweep.
pub fn derive_seed(seed: u64, idx: u64) -> u64 {
    seed ^ (idx.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Clean i.i.d. Gaussian data of `sys`, perturbed by a sample from `model`.
pub fn generate(sys: &LinearSystem, model: &PerturbationModel, t: usize, seed: u64) -> Result<DataRecord> {
    let clean = random_clean_data(sys, t, &mut stream_rng(seed, 0));
    let delta = sample_perturbation(model, seed, BURN_IN, THIN)?;
    perturb(&clean, &delta)
}

/// AR counterpart of [`generate`].
pub fn generate_ar(ar: &ArSystem, model: &PerturbationModel, t: usize, seed: u64) -> Result<DataRecord> {
    let clean = random_ar_data(ar, t, &mut stream_rng(seed, 0));
    let delta = sample_perturbation(model, seed, BURN_IN, THIN)?;
    perturb(&clean, &delta)
}

pub const BURN_IN: usize = 1000;
pub const THIN: usize = 10;

fn default_samples() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpAConfig {
    #[serde(default = "ExpAConfig::system")]
    pub system: SystemSpec,
    #[serde(rename = "T", default = "ExpAConfig::t")]
    pub t: usize,
    #[serde(default = "ExpAConfig::eps")]
    pub eps: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Points on the ellipse boundary and on each band edge.
    #[serde(default = "ExpAConfig::grid")]
    pub grid: usize,
}

impl Default for ExpAConfig {
    fn default() -> Self {
        parse("{}").expect("all fields have defaults")
    }
}

impl ExpAConfig {
    fn system() -> SystemSpec {
        SystemSpec::preset("scalar-1d")
    }
    fn t() -> usize {
        20
    }
    fn eps() -> f64 {
        0.3
    }
    fn grid() -> usize {
        200
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpBConfig {
    #[serde(default = "ExpBConfig::system")]
    pub system: SystemSpec,
    #[serde(rename = "T", default = "ExpBConfig::t")]
    pub t: usize,
    #[serde(default = "ExpBConfig::eps")]
    pub eps: f64,
    /// Zero the last input row of the data.
    #[serde(default = "ExpBConfig::zero_last_input")]
    pub zero_last_input: bool,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for ExpBConfig {
    fn default() -> Self {
        parse("{}").expect("all fields have defaults")
    }
}

impl ExpBConfig {
    fn system() -> SystemSpec {
        SystemSpec::preset("rank-deficient")
    }
    fn t() -> usize {
        4
    }
    fn eps() -> f64 {
        0.02
    }
    fn zero_last_input() -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpCConfig {
    #[serde(default = "ExpCConfig::system")]
    pub system: SystemSpec,
    #[serde(default = "ExpCConfig::eps")]
    pub eps: f64,
    #[serde(rename = "T_grid", default = "ExpCConfig::t_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "ExpCConfig::repeat")]
    pub repeat: usize,
    /// Σ samples for the closed-loop check of each certified run (0 disables).
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for ExpCConfig {
    fn default() -> Self {
        parse("{}").expect("all fields have defaults")
    }
}

impl ExpCConfig {
    fn system() -> SystemSpec {
        SystemSpec::preset("pendulum")
    }
    fn eps() -> f64 {
        1e-3
    }
    fn t_grid() -> Vec<usize> {
        vec![4, 10, 50, 200, 1000]
    }
    fn repeat() -> usize {
        10
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpDConfig {
    #[serde(default = "ExpDConfig::system")]
    pub system: SystemSpec,
    #[serde(rename = "T", default = "ExpDConfig::t")]
    pub t: usize,
    #[serde(default = "ExpDConfig::eps_grid")]
    pub eps_grid: Vec<f64>,
    #[serde(default = "ExpDConfig::datasets")]
    pub datasets: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for ExpDConfig {
    fn default() -> Self {
        parse("{}").expect("all fields have defaults")
    }
}

impl ExpDConfig {
    fn system() -> SystemSpec {
        SystemSpec::preset("pendulum")
    }
    fn t() -> usize {
        20
    }
    fn eps_grid() -> Vec<f64> {
        (0..9).map(|i| 2e-3 + 1e-3 * i as f64).collect()
    }
    fn datasets() -> usize {
        20
    }
}

/// Synthesis method names accepted by `synth`.
pub const METHODS: [&str; 8] = [
    "qstab",
    "qstab-stable",
    "h2",
    "h2opt",
    "hinf",
    "ar",
    "structured-codesign",
    "structured-twostep",
];

/// Where the data comes from: inline, or generated from a system and a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Inline {
        dataset: Dataset,
    },
    GeneratedAr {
        ar: ArSpec,
        #[serde(rename = "T")]
        t: usize,
        perturbation: ModelSpec,
    },
    Generated {
        system: SystemSpec,
        #[serde(rename = "T")]
        t: usize,
        perturbation: ModelSpec,
    },
}

/// AR coefficients, row-major: `a = [A₁ … A_L]`, `b = [B₀ … B_L]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArSpec {
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
}

impl ArSpec {
    pub fn build(&self) -> Result<ArSystem> {
        let conv = |v: &[Vec<Vec<f64>>]| v.iter().map(|m| from_rows(m)).collect::<Result<Vec<_>>>();
        ArSystem::new(conv(&self.a)?, conv(&self.b)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub method: String,
    #[serde(flatten)]
    pub data: DataSource,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Performance output; defaults per [`performance_matrices`].
    #[serde(default)]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub d: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Path to a `synth` output file, relative to the config file.
    pub result: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

pub fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    parse(&text)
}
