//! DDIM sampling with key-conditioned deflection of the predicted x̂_0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keying::{initialize_noise, make_salt, UserKey};
use crate::predictor::NoisePredictor;
use crate::schedule::{DiffusionSchedule, StepCoefficients};
use crate::tensor::{LatentTensor, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeflectionConfig {
    pub gamma: f64,
    /// Step indices where the deflection applies, highest first.
    pub steps: Vec<usize>,
    pub m_min: f64,
}

impl DeflectionConfig {
    /// γ = 0.1 on the first five sampling steps (t = T..T−4), m_min = 0.5.
    pub fn standard(num_steps: usize) -> Self {
        Self::first_steps(num_steps, 5, 0.1)
    }

    pub fn first_steps(num_steps: usize, count: usize, gamma: f64) -> Self {
        let steps = (num_steps.saturating_sub(count) + 1..=num_steps).rev().collect();
        Self {
            gamma,
            steps,
            m_min: 0.5,
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::param("gamma must be finite and >= 0"));
        }
        if !(self.m_min > 0.0) {
            return Err(Error::param("m_min must be positive"));
        }
        if let Some(t) = self.steps.iter().find(|t| **t == 0 || **t > num_steps) {
            return Err(Error::StepIndex { t: *t, max: num_steps });
        }
        Ok(())
    }

    pub fn is_deflected(&self, t: usize) -> bool {
        self.steps.contains(&t)
    }

    /// M = max(γ·K + 1, m_min) elementwise.
    pub fn coefficient(&self, k: &LatentTensor) -> LatentTensor {
        let (g, lo) = (self.gamma, self.m_min);
        k.map(|v| (g * v + 1.0).max(lo))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// (t, x_t) from t = T down to t = 1.
    pub states: Vec<(usize, LatentTensor)>,
    pub image: LatentTensor,
}

/// One DDIM step with a given ε.
///
/// Evaluated through x̂_0 like [`deflected_update`], so that a unit
/// coefficient gives bit-identical results.
pub fn ddim_update(x: &LatentTensor, eps: &LatentTensor, c: &StepCoefficients) -> Result<LatentTensor> {
    let (sab, sab_prev, s1ab_prev) = (
        c.alpha_bar.sqrt(),
        c.alpha_bar_prev.sqrt(),
        c.sqrt_one_minus_alpha_bar_prev(),
    );
    x.zip_with(eps, |xv, e| {
        let x0 = (xv - c.sqrt_one_minus_alpha_bar * e) / sab;
        sab_prev * x0 + s1ab_prev * e
    })
}

/// One deflected step with a given ε: x_{t−1} = √ᾱ_{t−1}·M·x̂_0 + √(1−ᾱ_{t−1})·ε.
pub fn deflected_update(
    x: &LatentTensor,
    eps: &LatentTensor,
    m: &LatentTensor,
    c: &StepCoefficients,
) -> Result<LatentTensor> {
    eps.check_shape(x.shape())?;
    m.check_shape(x.shape())?;
    let (sab, sab_prev, s1ab_prev) = (
        c.alpha_bar.sqrt(),
        c.alpha_bar_prev.sqrt(),
        c.sqrt_one_minus_alpha_bar_prev(),
    );
    let data = x
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .zip(m.as_slice())
        .map(|((xv, e), mv)| {
            let x0 = (xv - c.sqrt_one_minus_alpha_bar * e) / sab;
            sab_prev * mv * x0 + s1ab_prev * e
        })
        .collect();
    LatentTensor::from_vec(x.shape(), data)
}

pub fn ddim_step(x_t: &LatentTensor, t: usize, pred: &dyn NoisePredictor, s: &DiffusionSchedule) -> Result<LatentTensor> {
    let c = s.coefficients_at(t)?;
    ddim_update(x_t, &pred.predict(x_t, t), &c)
}

/// Deflected step with coefficient tensor `m` (see [`DeflectionConfig::coefficient`]).
pub fn deflected_step(
    x_t: &LatentTensor,
    t: usize,
    m: &LatentTensor,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<LatentTensor> {
    let c = s.coefficients_at(t)?;
    deflected_update(x_t, &pred.predict(x_t, t), m, &c)
}

/// Run t = T..1 from `x_t`, deflecting with `m` on `cfg.steps` when given.
pub fn sample_trajectory(
    x_t: LatentTensor,
    m: Option<&LatentTensor>,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<Trajectory> {
    cfg.validate(s.num_steps())?;
    let mut x = x_t;
    let mut states = Vec::with_capacity(s.num_steps());
    for t in (1..=s.num_steps()).rev() {
        let next = match m {
            Some(m) if cfg.is_deflected(t) => deflected_step(&x, t, m, pred, s)?,
            _ => ddim_step(&x, t, pred, s)?,
        };
        states.push((t, std::mem::replace(&mut x, next)));
    }
    Ok(Trajectory { states, image: x })
}

pub fn sample(
    x_t: LatentTensor,
    m: Option<&LatentTensor>,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<LatentTensor> {
    cfg.validate(s.num_steps())?;
    let mut x = x_t;
    for t in (1..=s.num_steps()).rev() {
        x = match m {
            Some(m) if cfg.is_deflected(t) => deflected_step(&x, t, m, pred, s)?,
            _ => ddim_step(&x, t, pred, s)?,
        };
    }
    Ok(x)
}

/// Provenance of a watermarked image. Never contains key material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub user_id: String,
    pub timestamp: u64,
    pub deflection: DeflectionConfig,
}

pub fn generate_watermarked(
    key: &UserKey,
    timestamp: u64,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<(LatentTensor, GenerationMeta)> {
    let x_t = initialize_noise(key, &make_salt(timestamp, key.shape()))?;
    let m = cfg.coefficient(&key.k);
    let image = sample(x_t, Some(&m), cfg, pred, s)?;
    let meta = GenerationMeta {
        user_id: key.user_id().to_string(),
        timestamp,
        deflection: cfg.clone(),
    };
    Ok((image, meta))
}

/// Start noise for a plain (non-watermarked) image.
pub fn plain_start(seed: u64, shape: Shape) -> LatentTensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x706c_6169_6e00_0000);
    LatentTensor::standard_normal(shape, &mut rng)
}

pub fn generate_plain(seed: u64, shape: Shape, pred: &dyn NoisePredictor, s: &DiffusionSchedule) -> Result<LatentTensor> {
    let cfg = DeflectionConfig {
        gamma: 0.0,
        steps: Vec::new(),
        m_min: 0.5,
    };
    sample(plain_start(seed, shape), None, &cfg, pred, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{gaussian_mixture_predictor, time_only_predictor, GaussianMixtureDataModel};
    use crate::schedule::ScheduleParams;

    fn hand_case() -> StepCoefficients {
        DiffusionSchedule::from_alpha_bar(&[0.64, 0.36])
            .unwrap()
            .coefficients_at(2)
            .unwrap()
    }

    #[test]
    fn ddim_hand_arithmetic() {
        let c = hand_case();
        let x = ddim_update(&LatentTensor::scalar(1.0), &LatentTensor::scalar(0.5), &c).unwrap();
        assert!((x.as_slice()[0] - 1.1).abs() < 1e-12);
        let z = ddim_update(&LatentTensor::scalar(1.0), &LatentTensor::scalar(0.0), &c).unwrap();
        assert!((z.as_slice()[0] - 1.0 / 0.75).abs() < 1e-12);
        // expanded form of the same step
        let k = 0.6 - 0.8 / 0.75;
        assert!((x.as_slice()[0] - (1.0 / 0.75 + k * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn deflected_hand_arithmetic() {
        let c = hand_case();
        let x = deflected_update(
            &LatentTensor::scalar(1.0),
            &LatentTensor::scalar(0.5),
            &LatentTensor::scalar(1.1),
            &c,
        )
        .unwrap();
        assert!((x.as_slice()[0] - 1.18).abs() < 1e-12);
    }

    #[test]
    fn zero_key_or_gamma_reduces_to_ddim() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = time_only_predictor(1);
        let x = plain_start(4, [1, 8, 8]);
        let plain = ddim_step(&x, 50, &p, &s).unwrap();

        let cfg = DeflectionConfig::standard(50);
        let m = cfg.coefficient(&LatentTensor::zeros([1, 8, 8]));
        assert_eq!(deflected_step(&x, 50, &m, &p, &s).unwrap(), plain);

        let mut g0 = cfg.clone();
        g0.gamma = 0.0;
        let key = plain_start(9, [1, 8, 8]);
        assert_eq!(deflected_step(&x, 50, &g0.coefficient(&key), &p, &s).unwrap(), plain);
    }

    #[test]
    fn coefficient_clamps() {
        let cfg = DeflectionConfig::standard(50);
        let m = cfg.coefficient(&LatentTensor::from_vec([1, 1, 3], vec![-20.0, 0.0, 2.0]).unwrap());
        assert_eq!(m.as_slice(), &[0.5, 1.0, 1.2]);
    }

    #[test]
    fn standard_config_steps() {
        let cfg = DeflectionConfig::standard(50);
        assert_eq!(cfg.steps, vec![50, 49, 48, 47, 46]);
        assert!(cfg.validate(50).is_ok());
        assert!(cfg.validate(40).is_err());
    }

    #[test]
    fn trajectory_shape() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = time_only_predictor(1);
        let cfg = DeflectionConfig::standard(50);
        let tr = sample_trajectory(plain_start(1, [1, 4, 4]), None, &cfg, &p, &s).unwrap();
        assert_eq!(tr.states.len(), 50);
        assert_eq!(tr.states[0].0, 50);
        assert_eq!(tr.image, sample(plain_start(1, [1, 4, 4]), None, &cfg, &p, &s).unwrap());
    }

    #[test]
    fn watermarked_generation_properties() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = gaussian_mixture_predictor(GaussianMixtureDataModel::toy([1, 16, 16]), &s).unwrap();
        let key = UserKey::from_seed("u", [1, 16, 16], 7, 0);
        let cfg = DeflectionConfig::standard(50);
        let (a, meta) = generate_watermarked(&key, 100, &cfg, &p, &s).unwrap();
        let (b, _) = generate_watermarked(&key, 100, &cfg, &p, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(meta.timestamp, 100);
        let (c, _) = generate_watermarked(&key, 101, &cfg, &p, &s).unwrap();
        assert!(a.sub(&c).unwrap().norm() / a.norm() > 0.01);

        let mut g0 = cfg.clone();
        g0.gamma = 0.0;
        let (d, _) = generate_watermarked(&key, 100, &g0, &p, &s).unwrap();
        let mad = a.sub(&d).unwrap().as_slice().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
        assert!(mad > 0.0 && mad < 0.2, "{mad}");
    }

    #[test]
    fn plain_generation_is_finite_and_replayable() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = gaussian_mixture_predictor(GaussianMixtureDataModel::toy([1, 16, 16]), &s).unwrap();
        let a = generate_plain(3, [1, 16, 16], &p, &s).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.shape(), [1, 16, 16]);
        assert_eq!(a, generate_plain(3, [1, 16, 16], &p, &s).unwrap());
    }
}
