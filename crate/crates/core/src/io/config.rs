//! TOML run configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::io::tensor_file::read_tensor;
use crate::pipeline::{CalibrationSettings, Pipeline, TOY_SHAPE};
use crate::predictor::{
    gaussian_mixture_predictor, stochastic_oracle_predictor, time_only_predictor, GaussianMixtureDataModel,
    NoisePredictor,
};
use crate::sampler::DeflectionConfig;
use crate::schedule::ScheduleParams;
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    /// Without `means`, the built-in toy mixture is used.
    GaussianMixture {
        #[serde(default)]
        means: Vec<PathBuf>,
        #[serde(default)]
        sigma0_sq: Option<f64>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    TimeOnly {
        seed: u64,
    },
    StochasticOracle {
        seed: u64,
    },
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self::GaussianMixture {
            means: Vec::new(),
            sigma0_sq: None,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub key_store: PathBuf,
    pub calibration: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            key_store: "keys.paik".into(),
            calibration: "calibration.paim".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleParams,
    pub shape: Shape,
    pub predictor: PredictorSpec,
    pub deflection: DeflectionConfig,
    pub calibration: CalibrationSettings,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = ScheduleParams::default();
        Self {
            deflection: DeflectionConfig::standard(schedule.steps),
            schedule,
            shape: TOY_SHAPE,
            predictor: PredictorSpec::default(),
            calibration: CalibrationSettings::default(),
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Relative paths inside the config resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output.dir);
        if let PredictorSpec::GaussianMixture { means, .. } = &mut self.predictor {
            means.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.deflection.validate(self.schedule.steps)?;
        if self.shape.contains(&0) {
            return Err(Error::param(format!("latent shape {:?} has a zero dimension", self.shape)));
        }
        for a in &self.calibration.attacks {
            a.validate()?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(Fingerprint::new("run-config").bytes(&serde_json::to_vec(self)?).finish())
    }

    pub fn key_store_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.key_store)
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.calibration)
    }

    pub fn build_pipeline(&self) -> Result<Pipeline> {
        let schedule = self.schedule.build()?;
        let predictor: Arc<dyn NoisePredictor> = match &self.predictor {
            PredictorSpec::GaussianMixture {
                means,
                sigma0_sq,
                weights,
            } => {
                let model = if means.is_empty() {
                    let mut m = GaussianMixtureDataModel::toy(self.shape);
                    if let Some(s) = sigma0_sq {
                        m.sigma0_sq = *s;
                    }
                    if let Some(w) = weights {
                        m.weights = w.clone();
                    }
                    m.validate()?;
                    m
                } else {
                    let loaded = means.iter().map(|p| read_tensor(p)).collect::<Result<Vec<_>>>()?;
                    let w = weights.clone().unwrap_or_else(|| vec![1.0 / loaded.len() as f64; loaded.len()]);
                    GaussianMixtureDataModel::new(loaded, sigma0_sq.unwrap_or(0.05), w)?
                };
                if model.shape() != self.shape {
                    return Err(Error::Shape {
                        expected: self.shape,
                        actual: model.shape(),
                    });
                }
                Arc::new(gaussian_mixture_predictor(model, &schedule)?)
            }
            PredictorSpec::TimeOnly { seed } => Arc::new(time_only_predictor(*seed)),
            PredictorSpec::StochasticOracle { seed } => Arc::new(stochastic_oracle_predictor(*seed)),
        };
        Pipeline::new(schedule, predictor, self.deflection.clone(), self.shape)
    }
}
