//! Run configuration: one TOML file drives simulation, fitting and the
//! sensitivity variants.
//!
//! ```toml
//! [model]
//! [[model.diseases]]
//! name = "dosh"
//! kind = "bartonella"
//! # covariates = ["lm", "sin", "cos", "sex", "weight", "site", "sex_sin", "sex_cos"]
//!
//! [priors]
//! regime = "vague"            # or "informed" with prior_file = "priors.csv"
//! dirichlet_alpha = 1.0
//!
//! [mcmc]
//! chains = 3
//! iterations = 350000
//! burn_in = 150000
//! thin = 10
//! seed = 1
//!
//! [data]
//! dataset = "dataset.csv"
//!
//! [sim]
//! voles = 200
//! window = 27
//! capture = "seasonal"
//! capture_prob = 0.75
//! exit_prob = 0.12
//!
//! [sim.pi]
//! dosh = [0.85, 0.05, 0.05, 0.05]
//!
//! [sim.beta.dosh]
//! b0_12 = -2.0
//! "contract.bab2" = -1.7
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::design::{default_columns, CovariateColumn, ModelSpec};
use crate::disease::{DiseaseKind, DiseaseSpec};
use crate::error::{Error, Result};
use crate::priors::{PriorConfig, PriorRegime};
use crate::sampler::{InitStrategy, McmcControls};
use crate::simulate::{CaptureSchedule, SimConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub priors: PriorSection,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sim: Option<SimSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub diseases: Vec<DiseaseSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseSection {
    pub name: String,
    pub kind: String,
    /// Covariate tokens; defaults to the per-kind standard set.
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "default_regime")]
    pub regime: String,
    pub prior_file: Option<PathBuf>,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
}

fn default_regime() -> String {
    "vague".into()
}

fn default_alpha() -> f64 {
    1.0
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            regime: default_regime(),
            prior_file: None,
            dirichlet_alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: u64,
    #[serde(default = "default_thin")]
    pub thin: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub pilot: bool,
    #[serde(default = "default_pilot_iterations")]
    pub pilot_iterations: u64,
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default)]
    pub threads: usize,
}

fn default_chains() -> usize {
    3
}
fn default_iterations() -> u64 {
    350_000
}
fn default_burn_in() -> u64 {
    150_000
}
fn default_thin() -> u64 {
    10
}
fn default_seed() -> u64 {
    1
}
fn default_pilot_iterations() -> u64 {
    2000
}
fn default_init() -> String {
    "prior".into()
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            chains: default_chains(),
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            seed: default_seed(),
            pilot: false,
            pilot_iterations: default_pilot_iterations(),
            init: default_init(),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub standardize_weight: bool,
    #[serde(default = "default_missing_weight")]
    pub missing_weight: String,
}

fn default_missing_weight() -> String {
    "dataset-mean".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub voles: usize,
    pub window: u32,
    #[serde(default = "default_capture")]
    pub capture: String,
    #[serde(default = "default_capture_prob")]
    pub capture_prob: f64,
    #[serde(default = "default_exit_prob")]
    pub exit_prob: f64,
    /// One shared probability, or per-disease via `ascertainment_failures`.
    #[serde(default)]
    pub ascertainment_failure: f64,
    pub ascertainment_failures: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub weight_missing_prob: f64,
    #[serde(default)]
    pub pi: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub beta: BTreeMap<String, BTreeMap<String, f64>>,
}

fn default_capture() -> String {
    "seasonal".into()
}
fn default_capture_prob() -> f64 {
    0.75
}
fn default_exit_prob() -> f64 {
    0.12
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, config_hash(&text)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.diseases.is_empty() {
            return Err(Error::Config("model needs at least one disease".into()));
        }
        self.controls()?.validate()?;
        if !matches!(self.priors.regime.as_str(), "vague" | "informed") {
            return Err(Error::Config(format!(
                "unknown prior regime `{}`",
                self.priors.regime
            )));
        }
        if self.priors.regime == "informed" && self.priors.prior_file.is_none() {
            return Err(Error::Config("informed regime requires prior_file".into()));
        }
        if self.priors.dirichlet_alpha <= 0.0 {
            return Err(Error::Config("dirichlet_alpha must be positive".into()));
        }
        Ok(())
    }

    /// Builds the disease registry and covariate choices.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut diseases = Vec::new();
        let mut columns: Vec<Vec<CovariateColumn>> = Vec::new();
        for section in &self.model.diseases {
            let kind = DiseaseKind::parse(&section.kind)?;
            diseases.push(DiseaseSpec::builtin(kind).with_name(section.name.clone()));
            columns.push(match &section.covariates {
                Some(tokens) => CovariateColumn::parse_list(tokens)?,
                None => default_columns(kind),
            });
        }
        ModelSpec::new(diseases, columns)
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        let regime = match self.priors.regime.as_str() {
            "vague" => PriorRegime::Vague,
            "informed" => PriorRegime::Informed {
                file: self
                    .priors
                    .prior_file
                    .clone()
                    .ok_or_else(|| Error::Config("informed regime requires prior_file".into()))?,
            },
            other => return Err(Error::Config(format!("unknown prior regime `{other}`"))),
        };
        Ok(PriorConfig {
            regime,
            dirichlet_alpha: self.priors.dirichlet_alpha,
        })
    }

    pub fn controls(&self) -> Result<McmcControls> {
        let init = match self.mcmc.init.as_str() {
            "prior" => InitStrategy::PriorDraw,
            "mean" => InitStrategy::Mean,
            other => return Err(Error::Config(format!("unknown init strategy `{other}`"))),
        };
        Ok(McmcControls {
            chains: self.mcmc.chains,
            iterations: self.mcmc.iterations,
            burn_in: self.mcmc.burn_in,
            thin: self.mcmc.thin,
            seed: self.mcmc.seed,
            pilot: self.mcmc.pilot,
            pilot_iterations: self.mcmc.pilot_iterations,
            init,
            threads: self.mcmc.threads,
        })
    }

    pub fn panel_options(&self) -> Result<crate::data::PanelOptions> {
        let missing_weight = match self.data.missing_weight.as_str() {
            "dataset-mean" => crate::data::MissingWeightPolicy::DatasetMean,
            "error" => crate::data::MissingWeightPolicy::Reject,
            other => {
                return Err(Error::Config(format!(
                    "unknown missing_weight policy `{other}`"
                )))
            }
        };
        Ok(crate::data::PanelOptions {
            missing_weight,
            standardize_weight: self.data.standardize_weight,
        })
    }

    /// Builds the simulation settings and true parameters; `[sim]` must be
    /// present.
    pub fn sim_inputs(&self, model: &ModelSpec) -> Result<(SimConfig, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let section = self
            .sim
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [sim] section".into()))?;
        let capture = match section.capture.as_str() {
            "seasonal" => CaptureSchedule::Seasonal {
                p: section.capture_prob,
            },
            "uniform" => CaptureSchedule::Uniform {
                p: section.capture_prob,
            },
            other => return Err(Error::Config(format!("unknown capture schedule `{other}`"))),
        };
        let ascertainment_failure = model
            .diseases()
            .iter()
            .map(|d| {
                section
                    .ascertainment_failures
                    .as_ref()
                    .and_then(|m| m.get(d.name()).copied())
                    .unwrap_or(section.ascertainment_failure)
            })
            .collect();
        let config = SimConfig {
            n_voles: section.voles,
            window: section.window,
            exit_prob: section.exit_prob,
            capture,
            ascertainment_failure,
            weight_missing_prob: section.weight_missing_prob,
            seed: self.mcmc.seed,
        };

        let mut beta = Vec::with_capacity(model.n_diseases());
        let mut pi = Vec::with_capacity(model.n_diseases());
        for (d, spec) in model.diseases().iter().enumerate() {
            let named = section.beta.get(spec.name()).cloned().unwrap_or_default();
            beta.push(model.layout(d).from_sparse(&named)?);
            let p = section.pi.get(spec.name()).cloned().unwrap_or_else(|| {
                vec![1.0 / spec.n_states() as f64; spec.n_states()]
            });
            if p.len() != spec.n_states() {
                return Err(Error::Config(format!(
                    "initial distribution for `{}` needs {} entries",
                    spec.name(),
                    spec.n_states()
                )));
            }
            pi.push(p);
        }
        Ok((config, beta, pi))
    }
}

/// SHA-256 of the configuration text; recorded in the run manifest.
pub fn config_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
