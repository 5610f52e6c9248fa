//! Run configuration: a TOML file with a `[run]` section, one `[[scenario]]`
//! table per scenario, and one `[[method]]` table per method. Unknown keys
//! anywhere in the file are schema errors, and the whole file is validated
//! before any computation starts.
//!
//! ```toml
//! [run]
//! repetitions = 10
//! master_seed = 42
//! budget = "paper"          # "paper" (3000 samples) or "half" (1500)
//!
//! [[scenario]]
//! outcome = "continuous"    # or "binary"
//! response = "sin"          # step | abs | linear | sin
//!
//! [[method]]
//! kind = "sagdiv-kernel"    # sagdiv-kernel | sagdiv-rawy | kiv | 2sls | naive-krr
//! bound = 10.0              # optional overrides
//! ```

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::benchmarks::{Method, MethodOverrides, MethodSpec, Outcome, Response, ScenarioSpec};
use crate::error::{Error, Result};

/// Named total-sample budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetPreset {
    Paper,
    Half,
}

impl BudgetPreset {
    pub fn total_samples(&self) -> usize {
        match self {
            BudgetPreset::Paper => 3000,
            BudgetPreset::Half => 1500,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    run: RunSection,
    #[serde(default, rename = "scenario")]
    scenarios: Vec<ScenarioSection>,
    #[serde(default, rename = "method")]
    methods: Vec<MethodSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    repetitions: usize,
    master_seed: u64,
    #[serde(default = "default_budget")]
    budget: BudgetPreset,
    threads: Option<usize>,
    /// Fraction of a user-supplied dataset turned into the instrument
    /// stream when fitting a descent method on CSV data (chronological
    /// split; the leading rows become estimator triples).
    stream_fraction: Option<f64>,
}

fn default_budget() -> BudgetPreset {
    BudgetPreset::Paper
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    outcome: Outcome,
    response: Response,
    test_size: Option<usize>,
    binary_scale: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSection {
    kind: String,
    bound: Option<f64>,
    warmup: Option<usize>,
    ratio_cap: Option<f64>,
    basis: Option<usize>,
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub repetitions: usize,
    pub master_seed: u64,
    pub budget: usize,
    pub threads: Option<usize>,
    pub stream_fraction: f64,
    pub scenarios: Vec<ScenarioSpec>,
    pub methods: Vec<MethodSpec>,
    /// SHA-256 of the raw config text, recorded as provenance.
    pub config_hash: String,
}

/// Parse and validate a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Schema(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parse and validate configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if file.run.repetitions == 0 {
        return Err(Error::Schema("run.repetitions must be at least 1".into()));
    }
    let stream_fraction = file.run.stream_fraction.unwrap_or(2.0 / 3.0);
    if !(0.0 < stream_fraction && stream_fraction < 1.0) {
        return Err(Error::Schema(format!(
            "run.stream_fraction must lie strictly between 0 and 1, got {stream_fraction}"
        )));
    }

    let budget = file.run.budget.total_samples();
    let mut scenarios = Vec::with_capacity(file.scenarios.len());
    for section in &file.scenarios {
        let mut spec = match section.outcome {
            Outcome::Continuous => ScenarioSpec::continuous(section.response, budget, 0),
            Outcome::Binary => ScenarioSpec::binary(section.response, budget, 0),
        };
        if let Some(t) = section.test_size {
            spec.n_test = t;
        }
        if let Some(b) = section.binary_scale {
            spec.binary_scale = b;
        }
        spec.validate()?;
        scenarios.push(spec);
    }

    let mut methods = Vec::with_capacity(file.methods.len());
    for section in &file.methods {
        let method = Method::parse(&section.kind)?;
        methods.push(MethodSpec {
            method,
            overrides: MethodOverrides {
                bound: section.bound,
                warmup: section.warmup,
                ratio_cap: section.ratio_cap,
                basis: section.basis,
            },
        });
    }

    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let config_hash = hex_string(&hasher.finalize());

    Ok(RunConfig {
        repetitions: file.run.repetitions,
        master_seed: file.run.master_seed,
        budget,
        threads: file.run.threads,
        stream_fraction,
        scenarios,
        methods,
        config_hash,
    })
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
