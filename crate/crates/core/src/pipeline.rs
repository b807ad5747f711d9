//! End-to-end orchestration: calibration corpora, fitted models and verification.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{degrade, AttackSpec};
use crate::error::{Error, Result};
use crate::inversion::{compute_bias, InitializationBias};
use crate::keying::UserKey;
use crate::localize::{build_baseline, IntrinsicBiasBaseline};
use crate::predictor::{gaussian_mixture_predictor, GaussianMixtureDataModel, NoisePredictor};
use crate::sampler::{generate_plain, generate_watermarked, DeflectionConfig};
use crate::schedule::{DiffusionSchedule, ScheduleParams};
use crate::tensor::{LatentTensor, Shape};
use crate::verify::{
    calibrate_vanilla, fit_pca_gaussian, robust_verify, ModelPurpose, PcaFitOptions, PcaGaussianModel,
    RobustThresholds, VanillaThreshold, VerdictReport,
};

pub const TOY_SHAPE: Shape = [1, 16, 16];

/// Schedule, predictor, deflection and latent shape bundled together.
#[derive(Clone)]
pub struct Pipeline {
    pub schedule: DiffusionSchedule,
    pub predictor: Arc<dyn NoisePredictor>,
    pub deflection: DeflectionConfig,
    pub shape: Shape,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("schedule", &self.schedule.fingerprint())
            .field("predictor", &self.predictor.fingerprint())
            .field("deflection", &self.deflection)
            .field("shape", &self.shape)
            .finish()
    }
}

impl Pipeline {
    pub fn new(
        schedule: DiffusionSchedule,
        predictor: Arc<dyn NoisePredictor>,
        deflection: DeflectionConfig,
        shape: Shape,
    ) -> Result<Self> {
        deflection.validate(schedule.num_steps())?;
        Ok(Self {
            schedule,
            predictor,
            deflection,
            shape,
        })
    }

    /// Mixture predictor on the toy 16 × 16 model with the default schedule.
    pub fn toy() -> Result<Self> {
        Self::mixture(ScheduleParams::default(), GaussianMixtureDataModel::toy(TOY_SHAPE))
    }

    pub fn mixture(params: ScheduleParams, model: GaussianMixtureDataModel) -> Result<Self> {
        let schedule = params.build()?;
        let shape = model.shape();
        let pred = gaussian_mixture_predictor(model, &schedule)?;
        let cfg = DeflectionConfig::standard(schedule.num_steps());
        Self::new(schedule, Arc::new(pred), cfg, shape)
    }

    pub fn schedule_hash(&self) -> String {
        self.schedule.fingerprint()
    }

    pub fn predictor_hash(&self) -> String {
        self.predictor.fingerprint()
    }

    pub fn generate(&self, key: &UserKey, timestamp: u64) -> Result<LatentTensor> {
        Ok(generate_watermarked(key, timestamp, &self.deflection, &*self.predictor, &self.schedule)?.0)
    }

    pub fn generate_plain(&self, seed: u64) -> Result<LatentTensor> {
        generate_plain(seed, self.shape, &*self.predictor, &self.schedule)
    }

    pub fn bias(&self, image: &LatentTensor, key: &UserKey, timestamp: u64) -> Result<InitializationBias> {
        compute_bias(image, key, Some(timestamp), &self.deflection, &*self.predictor, &self.schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub alpha_vanilla: f64,
    pub thresholds: RobustThresholds,
    pub pca: PcaFitOptions,
    pub invalid_keys: usize,
    pub detection_samples: usize,
    /// Clean samples placed in the ownership pool.
    pub ownership_clean: usize,
    /// Degraded samples per attack setting in the ownership pool.
    pub ownership_per_attack: usize,
    /// Removal-style attacks included in the ownership pool.
    pub attacks: Vec<AttackSpec>,
    pub baseline_samples: usize,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            alpha_vanilla: 1e-3,
            thresholds: RobustThresholds::default(),
            pca: PcaFitOptions::default(),
            invalid_keys: 200,
            detection_samples: 400,
            ownership_clean: 100,
            ownership_per_attack: 40,
            attacks: AttackSpec::all_degradations(0),
            baseline_samples: 100,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationManifest {
    pub invalid_keys: usize,
    pub detection_samples: usize,
    pub ownership_samples: usize,
    pub attacks: Vec<AttackSpec>,
    pub baseline_samples: usize,
    pub seed: u64,
}

/// Everything verification and localization need, tied to one predictor
/// and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub schedule_hash: String,
    pub predictor_hash: String,
    pub deflection: DeflectionConfig,
    pub vanilla: VanillaThreshold,
    pub detection: PcaGaussianModel,
    pub ownership: PcaGaussianModel,
    pub thresholds: RobustThresholds,
    pub baseline: IntrinsicBiasBaseline,
    pub manifest: CalibrationManifest,
}

/// A synthetic calibration user: key derived from the seed, with a timestamp.
pub fn corpus_key(seed: u64, index: u64, shape: Shape) -> (UserKey, u64) {
    let key_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index);
    let key = UserKey::from_seed(format!("calibration-{index}"), shape, key_seed, 0);
    (key, 1_700_000_000 + index)
}

/// Watermarked images of fresh corpus users, with their keys and timestamps.
pub fn watermarked_corpus(p: &Pipeline, seed: u64, range: std::ops::Range<u64>) -> Result<Vec<(UserKey, u64, LatentTensor)>> {
    range
        .into_par_iter()
        .map(|i| {
            let (key, ts) = corpus_key(seed, i, p.shape);
            let img = p.generate(&key, ts)?;
            Ok((key, ts, img))
        })
        .collect()
}

pub fn calibrate(p: &Pipeline, c: &CalibrationSettings) -> Result<Calibration> {
    for a in &c.attacks {
        a.validate()?;
        if a.degradation().is_none() {
            return Err(Error::param(format!(
                "attack '{}' cannot be used in the ownership pool",
                a.kind_name()
            )));
        }
    }
    let seed = c.seed;
    log::info!("calibration: {} invalid-key runs", c.invalid_keys);
    let n_inv = c.invalid_keys as u64;
    let invalid_moments = watermarked_corpus(p, seed, 0..n_inv)?
        .into_par_iter()
        .map(|(_, ts, img)| {
            let (wrong, _) = corpus_key(seed ^ 0x5a5a, ts, p.shape);
            Ok(p.bias(&img, &wrong, ts)?.second_moment)
        })
        .collect::<Result<Vec<_>>>()?;
    let vanilla = calibrate_vanilla(&invalid_moments, c.alpha_vanilla)?;

    log::info!("calibration: {} clean watermarked samples", c.detection_samples);
    let clean = watermarked_corpus(p, seed, n_inv..n_inv + c.detection_samples as u64)?;
    let clean_bias = clean
        .par_iter()
        .map(|(k, ts, img)| Ok(p.bias(img, k, *ts)?.delta))
        .collect::<Result<Vec<_>>>()?;
    let detection = fit_pca_gaussian(&clean_bias, ModelPurpose::Detection, &c.pca)?;

    let mut pool: Vec<LatentTensor> = clean_bias.iter().take(c.ownership_clean).cloned().collect();
    let jobs: Vec<(usize, usize)> = (0..c.attacks.len())
        .flat_map(|a| (0..c.ownership_per_attack).map(move |j| (a, j)))
        .collect();
    let degraded = jobs
        .par_iter()
        .map(|&(a, j)| {
            let (kind, level) = c.attacks[a].degradation().expect("checked above");
            let idx = (c.ownership_clean + a * c.ownership_per_attack + j) % clean.len();
            let (k, ts, img) = &clean[idx];
            let noise_seed = seed ^ ((a as u64) << 32) ^ j as u64;
            Ok(p.bias(&degrade(img, kind, level, noise_seed)?, k, *ts)?.delta)
        })
        .collect::<Result<Vec<_>>>()?;
    pool.extend(degraded);
    pool.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    let ownership = fit_pca_gaussian(&pool, ModelPurpose::Ownership, &c.pca)?;

    log::info!("calibration: baseline from {} plain images", c.baseline_samples);
    let seeds: Vec<u64> = (0..c.baseline_samples as u64).map(|i| seed.wrapping_add(0xba5e_0000 + i)).collect();
    let baseline = build_baseline(&seeds, p.shape, &*p.predictor, &p.schedule)?;

    Ok(Calibration {
        schedule_hash: p.schedule_hash(),
        predictor_hash: p.predictor_hash(),
        deflection: p.deflection.clone(),
        vanilla,
        detection,
        ownership,
        thresholds: c.thresholds,
        baseline,
        manifest: CalibrationManifest {
            invalid_keys: c.invalid_keys,
            detection_samples: c.detection_samples,
            ownership_samples: pool.len(),
            attacks: c.attacks.clone(),
            baseline_samples: c.baseline_samples,
            seed,
        },
    })
}

impl Calibration {
    pub fn check_provenance(&self, schedule_hash: &str, predictor_hash: &str) -> Result<()> {
        if self.schedule_hash != schedule_hash {
            return Err(Error::Provenance(format!(
                "schedule hash {schedule_hash} does not match calibration {}",
                self.schedule_hash
            )));
        }
        if self.predictor_hash != predictor_hash {
            return Err(Error::Provenance(format!(
                "predictor hash {predictor_hash} does not match calibration {}",
                self.predictor_hash
            )));
        }
        Ok(())
    }

    pub fn check_pipeline(&self, p: &Pipeline) -> Result<()> {
        self.check_provenance(&p.schedule_hash(), &p.predictor_hash())
    }

    pub fn verify_bias(&self, bias: &InitializationBias) -> Result<VerdictReport> {
        robust_verify(bias, &self.vanilla, &self.detection, &self.ownership, &self.thresholds)
    }

    pub fn verify(&self, p: &Pipeline, image: &LatentTensor, key: &UserKey, timestamp: u64) -> Result<VerdictReport> {
        self.check_pipeline(p)?;
        self.verify_bias(&p.bias(image, key, timestamp)?)
    }
}
