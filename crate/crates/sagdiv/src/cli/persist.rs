//! Versioned JSON persistence for fitted models.
//!
//! The document stores the method tag, the fitting seed, the config hash,
//! and every parameter needed to reproduce predictions exactly: serde_json
//! emits the shortest round-tripping decimal for each f64, so a saved model
//! predicts bit-for-bit like the in-memory one.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::baselines::{KivModel, NaiveKrrModel, TslsModel};
use crate::benchmarks::{FittedMethod, Method};
use crate::error::{Error, Result};
use crate::estimators::DensityRatioModel;
use crate::sagd::SagdModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersistedModel {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub params: ModelParams,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelParams {
    Sagd {
        anchors: Array2<f64>,
        gradients: Vec<f64>,
        rates: Vec<f64>,
        bound: f64,
        warmup: usize,
        ratio: DensityRatioModel,
        train_x: Array2<f64>,
        cached_average: Array1<f64>,
    },
    Kiv(KivModel),
    Tsls(TslsModel),
    Naive(NaiveKrrModel),
}

impl PersistedModel {
    pub fn from_fitted(fitted: &FittedMethod, method: Method, seed: u64, config_hash: &str) -> Self {
        let params = match fitted {
            FittedMethod::Sagd(m) => ModelParams::Sagd {
                anchors: m.anchors().to_owned(),
                gradients: m.gradients().to_vec(),
                rates: m.rates().to_vec(),
                bound: m.bound(),
                warmup: m.warmup(),
                ratio: m.ratio_model().clone(),
                train_x: m.train_x().to_owned(),
                cached_average: m.cached_average().to_owned(),
            },
            FittedMethod::Kiv(m) => ModelParams::Kiv(m.clone()),
            FittedMethod::Tsls(m) => ModelParams::Tsls(m.clone()),
            FittedMethod::Naive(m) => ModelParams::Naive(m.clone()),
        };
        Self { format_version: FORMAT_VERSION, method, seed, config_hash: config_hash.to_string(), params }
    }

    pub fn into_fitted(self) -> Result<FittedMethod> {
        match self.params {
            ModelParams::Sagd {
                anchors,
                gradients,
                rates,
                bound,
                warmup,
                ratio,
                train_x,
                cached_average,
            } => Ok(FittedMethod::Sagd(SagdModel::from_parts(
                anchors,
                gradients,
                rates,
                bound,
                warmup,
                ratio,
                train_x,
                cached_average,
            )?)),
            ModelParams::Kiv(m) => Ok(FittedMethod::Kiv(m)),
            ModelParams::Tsls(m) => Ok(FittedMethod::Tsls(m)),
            ModelParams::Naive(m) => Ok(FittedMethod::Naive(m)),
        }
    }
}

pub fn save_model(
    path: &Path,
    fitted: &FittedMethod,
    method: Method,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let doc = PersistedModel::from_fitted(fitted, method, seed, config_hash);
    let json =
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Persistence(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Provenance fields of a persisted model.
#[derive(Debug, Clone)]
pub struct ModelMeta {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
}

pub fn load_model(path: &Path) -> Result<(ModelMeta, FittedMethod)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Persistence(format!("cannot read model {}: {e}", path.display())))?;
    let doc: PersistedModel =
        serde_json::from_str(&text).map_err(|e| Error::Persistence(e.to_string()))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported model format version {}",
            doc.format_version
        )));
    }
    let meta = ModelMeta {
        format_version: doc.format_version,
        method: doc.method,
        seed: doc.seed,
        config_hash: doc.config_hash.clone(),
    };
    let fitted = doc.into_fitted()?;
    Ok((meta, fitted))
}

/// Input dimension a fitted model expects.
pub fn input_dim(fitted: &FittedMethod) -> usize {
    match fitted {
        FittedMethod::Sagd(m) => m.train_x().ncols(),
        FittedMethod::Kiv(m) => m.input_dim(),
        FittedMethod::Tsls(m) => m.slopes().len(),
        FittedMethod::Naive(m) => m.input_dim(),
    }
}
