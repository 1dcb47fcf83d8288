//! Method dispatch and the on-disk model format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::{
    isotonic_apply, isotonic_fit, variance_scaling_apply, variance_scaling_fit, IsotonicCalibrator, VarianceScaler,
};
use crate::dataset::CalibrationDataset;
use crate::dist::{GaussianPrediction, Prediction};
use crate::error::{Error, Result};
use crate::gp::{GpConfig, TrainingLog};
use crate::methods::{gp_fit, GpMethod, GpModel};

/// Bumped on any incompatible change to [`ModelFile`].
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Isotonic,
    VarScaling,
    GpBeta,
    GpNormal,
    GpNormalMv,
    GpCauchy,
    GpCovEst,
    GpCovRecal,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Isotonic,
        Method::VarScaling,
        Method::GpBeta,
        Method::GpNormal,
        Method::GpNormalMv,
        Method::GpCauchy,
        Method::GpCovEst,
        Method::GpCovRecal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Isotonic => "isotonic",
            Method::VarScaling => "var-scaling",
            Method::GpBeta => "gp-beta",
            Method::GpNormal => "gp-normal",
            Method::GpNormalMv => "gp-normal-mv",
            Method::GpCauchy => "gp-cauchy",
            Method::GpCovEst => "gp-cov-est",
            Method::GpCovRecal => "gp-cov-recal",
        }
    }

    pub fn gp_method(self) -> Option<GpMethod> {
        match self {
            Method::Isotonic | Method::VarScaling => None,
            Method::GpBeta => Some(GpMethod::Beta),
            Method::GpNormal => Some(GpMethod::Normal),
            Method::GpNormalMv => Some(GpMethod::NormalMv),
            Method::GpCauchy => Some(GpMethod::Cauchy),
            Method::GpCovEst => Some(GpMethod::CovarianceEstimation),
            Method::GpCovRecal => Some(GpMethod::CovarianceRecalibration),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Isotonic(IsotonicCalibrator),
    VarianceScaling(VarianceScaler),
    Gp(Box<GpModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<GpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_log: Option<TrainingLog>,
    pub payload: Payload,
}

impl ModelFile {
    /// Fits `method` on `dataset`. Only the GP methods read `config`; its
    /// seed becomes the model seed.
    pub fn fit(dataset: &CalibrationDataset, method: Method, config: &GpConfig) -> Result<Self> {
        dataset.ensure_nonempty()?;
        let (payload, gp_config, log) = match method.gp_method() {
            None if method == Method::Isotonic => (Payload::Isotonic(isotonic_fit(dataset)?), None, None),
            None => (Payload::VarianceScaling(variance_scaling_fit(dataset)?), None, None),
            Some(gm) => {
                let (model, log) = gp_fit(dataset, gm, config)?;
                (Payload::Gp(Box::new(model)), Some(config.clone()), Some(log))
            }
        };
        Ok(Self {
            format_version: FORMAT_VERSION,
            method,
            k: dataset.k(),
            seed: config.seed,
            config: gp_config,
            training_log: log,
            payload,
        })
    }

    /// Calibrates predictions in order. GP draws use the model seed.
    pub fn apply(&self, predictions: &[GaussianPrediction]) -> Result<Vec<Prediction>> {
        if let Some(p) = predictions.iter().find(|p| p.k() != self.k) {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: p.k(),
            });
        }
        match &self.payload {
            Payload::Isotonic(c) => predictions
                .iter()
                .map(|p| isotonic_apply(c, &Prediction::Gaussian(p.clone())).map(Prediction::from))
                .collect(),
            Payload::VarianceScaling(s) => predictions
                .iter()
                .map(|p| variance_scaling_apply(s, p).map(Prediction::from))
                .collect(),
            Payload::Gp(m) => m.apply_all(predictions, self.seed),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a model, rejecting other format versions before decoding the
    /// payload.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(FORMAT_VERSION)) {
            return Err(Error::Unsupported(format!(
                "model format version {version:?}, this build reads {FORMAT_VERSION}"
            )));
        }
        let model: Self = serde_json::from_value(value)?;
        let method_matches = match &model.payload {
            Payload::Isotonic(_) => model.method == Method::Isotonic,
            Payload::VarianceScaling(_) => model.method == Method::VarScaling,
            Payload::Gp(g) => model.method.gp_method() == Some(g.method) && g.k() == model.k,
        };
        if !method_matches {
            return Err(Error::InvalidParameter("model payload does not match its method tag".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig, SynthKind};

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("gp-foo".parse::<Method>().is_err());
    }

    #[test]
    fn baseline_models_round_trip_and_version_check() {
        let ds = generate(&SynthConfig::new(SynthKind::GaussianConstMiscal, 50, 1)).unwrap();
        for method in [Method::Isotonic, Method::VarScaling] {
            let m = ModelFile::fit(&ds, method, &GpConfig::default()).unwrap();
            let text = m.to_json().unwrap();
            assert_eq!(ModelFile::from_json(&text).unwrap(), m);
            let bumped = text.replace("\"format_version\": 1", "\"format_version\": 99");
            assert!(matches!(ModelFile::from_json(&bumped), Err(Error::Unsupported(_))));
        }
    }
}
