//! DDIM inversion with the inverse deflection, and the initialization bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keying::{initialize_noise, make_salt, UserKey};
use crate::predictor::NoisePredictor;
use crate::sampler::DeflectionConfig;
use crate::schedule::{DiffusionSchedule, StepCoefficients};
use crate::tensor::LatentTensor;

/// δ_T = x̂_T − F(K, S) with its per-element second moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitializationBias {
    pub delta: LatentTensor,
    pub second_moment: f64,
    pub key_id: String,
    pub timestamp: u64,
}

impl InitializationBias {
    pub fn new(delta: LatentTensor, key_id: impl Into<String>, timestamp: u64) -> Self {
        Self {
            second_moment: delta.mean_square(),
            delta,
            key_id: key_id.into(),
            timestamp,
        }
    }
}

/// x̂_t = √α_t·x̂_{t−1} + (√(1−ᾱ_t) − √(α_t−ᾱ_t))·ε.
pub fn inverse_ddim_update(x_prev: &LatentTensor, eps: &LatentTensor, c: &StepCoefficients) -> Result<LatentTensor> {
    let sa = c.alpha.sqrt();
    let k = c.sqrt_one_minus_alpha_bar - c.sqrt_alpha_minus_alpha_bar;
    x_prev.zip_with(eps, |x, e| sa * x + k * e)
}

/// x̂_t = √ᾱ_t·(x_{t−1} − √(1−ᾱ_{t−1})ε)/(√ᾱ_{t−1}·M) + √(1−ᾱ_t)·ε.
pub fn inverse_deflected_update(
    x_prev: &LatentTensor,
    eps: &LatentTensor,
    m: &LatentTensor,
    c: &StepCoefficients,
) -> Result<LatentTensor> {
    eps.check_shape(x_prev.shape())?;
    m.check_shape(x_prev.shape())?;
    let (sab, sab_prev, s1ab_prev) = (
        c.alpha_bar.sqrt(),
        c.alpha_bar_prev.sqrt(),
        c.sqrt_one_minus_alpha_bar_prev(),
    );
    let data = x_prev
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .zip(m.as_slice())
        .map(|((x, e), mv)| sab * (x - s1ab_prev * e) / (sab_prev * mv) + c.sqrt_one_minus_alpha_bar * e)
        .collect();
    LatentTensor::from_vec(x_prev.shape(), data)
}

/// Inverse step with ε evaluated at x̂_{t−1}.
pub fn inverse_ddim_step(
    x_prev: &LatentTensor,
    t: usize,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<LatentTensor> {
    let c = s.coefficients_at(t)?;
    inverse_ddim_update(x_prev, &pred.predict(x_prev, t), &c)
}

pub fn inverse_deflected_step(
    x_prev: &LatentTensor,
    t: usize,
    m: &LatentTensor,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<LatentTensor> {
    let c = s.coefficients_at(t)?;
    inverse_deflected_update(x_prev, &pred.predict(x_prev, t), m, &c)
}

/// Invert t = 1..T, undoing the deflection with `m` on `cfg.steps` when given.
pub fn invert(
    image: &LatentTensor,
    m: Option<&LatentTensor>,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<LatentTensor> {
    cfg.validate(s.num_steps())?;
    let mut x = image.clone();
    for t in 1..=s.num_steps() {
        x = match m {
            Some(m) if cfg.is_deflected(t) => inverse_deflected_step(&x, t, m, pred, s)?,
            _ => inverse_ddim_step(&x, t, pred, s)?,
        };
    }
    Ok(x)
}

/// Invert with the candidate key's deflection coefficient.
pub fn invert_image(
    image: &LatentTensor,
    key: &UserKey,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<LatentTensor> {
    image.check_shape(key.shape())?;
    invert(image, Some(&cfg.coefficient(&key.k)), cfg, pred, s)
}

/// Plain DDIM inversion without deflection.
pub fn invert_plain(image: &LatentTensor, pred: &dyn NoisePredictor, s: &DiffusionSchedule) -> Result<LatentTensor> {
    let cfg = DeflectionConfig {
        gamma: 0.0,
        steps: Vec::new(),
        m_min: 0.5,
    };
    invert(image, None, &cfg, pred, s)
}

/// `timestamp` comes from the image metadata; without it there is no salt to
/// rebuild the start point from.
pub fn compute_bias(
    image: &LatentTensor,
    key: &UserKey,
    timestamp: Option<u64>,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<InitializationBias> {
    let timestamp = timestamp.ok_or_else(|| Error::Provenance("image metadata has no timestamp".into()))?;
    let x_hat = invert_image(image, key, cfg, pred, s)?;
    let x_t = initialize_noise(key, &make_salt(timestamp, key.shape()))?;
    Ok(InitializationBias::new(x_hat.sub(&x_t)?, key.user_id(), timestamp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{
        gaussian_mixture_predictor, stochastic_oracle_predictor, time_only_predictor, GaussianMixtureDataModel,
    };
    use crate::sampler::{deflected_update, generate_plain, generate_watermarked, plain_start, sample};
    use crate::schedule::ScheduleParams;

    #[test]
    fn inverse_hand_arithmetic() {
        let c = DiffusionSchedule::from_alpha_bar(&[0.64, 0.36])
            .unwrap()
            .coefficients_at(2)
            .unwrap();
        let x = inverse_deflected_update(
            &LatentTensor::scalar(1.18),
            &LatentTensor::scalar(0.5),
            &LatentTensor::scalar(1.1),
            &c,
        )
        .unwrap();
        assert!((x.as_slice()[0] - 1.0).abs() < 1e-12);
        let z = inverse_ddim_update(&LatentTensor::scalar(2.0), &LatentTensor::scalar(0.0), &c).unwrap();
        assert!((z.as_slice()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn unit_coefficient_reduces_to_plain_inverse() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let x = plain_start(2, [1, 4, 4]);
        let eps = plain_start(3, [1, 4, 4]);
        for t in [1, 2, 30, 50] {
            let c = s.coefficients_at(t).unwrap();
            let a = inverse_ddim_update(&x, &eps, &c).unwrap();
            let b = inverse_deflected_update(&x, &eps, &LatentTensor::filled([1, 4, 4], 1.0), &c).unwrap();
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_only_round_trip_is_exact() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = time_only_predictor(5);
        let cfg = DeflectionConfig::standard(50);
        let key = UserKey::from_seed("u", [1, 16, 16], 1, 0);
        let (img, meta) = generate_watermarked(&key, 77, &cfg, &p, &s).unwrap();
        let b = compute_bias(&img, &key, Some(meta.timestamp), &cfg, &p, &s).unwrap();
        assert!(b.delta.max_abs() < 1e-9, "{}", b.delta.max_abs());
        assert!((b.second_moment - b.delta.mean_square()).abs() < 1e-12);
    }

    #[test]
    fn missing_timestamp_is_provenance_error() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = time_only_predictor(5);
        let key = UserKey::from_seed("u", [1, 4, 4], 1, 0);
        let img = LatentTensor::zeros([1, 4, 4]);
        let r = compute_bias(&img, &key, None, &DeflectionConfig::standard(50), &p, &s);
        assert!(matches!(r, Err(Error::Provenance(_))));
    }

    #[test]
    fn mixture_valid_key_far_below_invalid() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = gaussian_mixture_predictor(GaussianMixtureDataModel::toy([1, 16, 16]), &s).unwrap();
        let cfg = DeflectionConfig::standard(50);
        let key = UserKey::from_seed("u", [1, 16, 16], 11, 0);
        let other = UserKey::from_seed("v", [1, 16, 16], 12, 0);
        let (img, _) = generate_watermarked(&key, 5, &cfg, &p, &s).unwrap();
        let valid = compute_bias(&img, &key, Some(5), &cfg, &p, &s).unwrap().second_moment;
        let invalid = compute_bias(&img, &other, Some(5), &cfg, &p, &s).unwrap().second_moment;
        let plain = generate_plain(1, [1, 16, 16], &p, &s).unwrap();
        let nonwm = compute_bias(&plain, &key, Some(5), &cfg, &p, &s).unwrap().second_moment;
        assert!(valid > 0.0 && valid < 0.1, "{valid}");
        assert!(invalid > 1.0, "{invalid}");
        assert!(nonwm > 1.0, "{nonwm}");
    }

    #[test]
    fn wrong_deflection_steps_look_invalid() {
        let s = ScheduleParams::PIPELINE.build().unwrap();
        let p = gaussian_mixture_predictor(GaussianMixtureDataModel::toy([1, 16, 16]), &s).unwrap();
        let cfg = DeflectionConfig::standard(50);
        let key = UserKey::from_seed("u", [1, 16, 16], 11, 0);
        let (img, _) = generate_watermarked(&key, 5, &cfg, &p, &s).unwrap();
        let wrong = DeflectionConfig {
            steps: vec![5, 4, 3, 2, 1],
            ..cfg.clone()
        };
        let valid = compute_bias(&img, &key, Some(5), &cfg, &p, &s).unwrap().second_moment;
        let off = compute_bias(&img, &key, Some(5), &wrong, &p, &s).unwrap().second_moment;
        assert!(off > 20.0 * valid, "{off} vs {valid}");
    }

    /// E|δ_t^c|² accumulates: the Monte-Carlo mean is nondecreasing in t.
    #[test]
    fn oracle_bias_accumulates() {
        let s = ScheduleParams::THEORY.build().unwrap();
        let oracle = stochastic_oracle_predictor(3);
        let m = LatentTensor::filled([1, 1, 2000], 1.05);
        let cfg = DeflectionConfig {
            gamma: 0.1,
            steps: (1..=50).collect(),
            m_min: 0.5,
        };
        let mut last = 0.0;
        for t in [1usize, 5, 25, 50] {
            let sub = crate::schedule::DiffusionSchedule::from_betas(s.betas()[..t].to_vec()).unwrap();
            let x_t = plain_start(t as u64, [1, 1, 2000]);
            let img = sample(x_t.clone(), Some(&m), &cfg_for(&cfg, t), &oracle, &sub).unwrap();
            let back = invert(&img, Some(&m), &cfg_for(&cfg, t), &oracle, &sub).unwrap();
            let ms = back.sub(&x_t).unwrap().mean_square();
            assert!(ms >= last * 0.9, "t={t}: {ms} < {last}");
            last = ms;
        }
    }

    fn cfg_for(cfg: &DeflectionConfig, t: usize) -> DeflectionConfig {
        DeflectionConfig {
            steps: (1..=t).collect(),
            ..cfg.clone()
        }
    }

    proptest::proptest! {
        #[test]
        fn single_step_round_trip(x in -5.0f64..5.0, e in -3.0f64..3.0, m in 0.5f64..1.6, t in 1usize..=50) {
            let s = ScheduleParams::PIPELINE.build().unwrap();
            let c = s.coefficients_at(t).unwrap();
            let fwd = deflected_update(&LatentTensor::scalar(x), &LatentTensor::scalar(e), &LatentTensor::scalar(m), &c).unwrap();
            let back = inverse_deflected_update(&fwd, &LatentTensor::scalar(e), &LatentTensor::scalar(m), &c).unwrap();
            proptest::prop_assert!((back.as_slice()[0] - x).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }
}
