//! Noise predictors ε(x, t).
//!
//! Three backends stand in for a trained network:
//!
//! - [`TimeOnlyPredictor`]: a fixed pseudo-random tensor per step, ignoring x.
//!   Sampling followed by inversion is then exact.
//! - [`StochasticOracle`]: a fresh i.i.d. N(0, 1) draw on every call.
//! - [`GaussianMixturePredictor`]: the exact MMSE noise estimator for a
//!   Gaussian-mixture data distribution.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::imaging::gaussian_blur;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{LatentTensor, Shape};

pub trait NoisePredictor: Send + Sync {
    /// ε(x, t); the output has the shape of `x`.
    fn predict(&self, x: &LatentTensor, t: usize) -> LatentTensor;

    /// Whether identical inputs always give bit-identical outputs.
    fn is_deterministic(&self) -> bool;

    /// Content hash recorded in sidecars and calibration files.
    fn fingerprint(&self) -> String;
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct TimeOnlyPredictor {
    seed: u64,
}

pub fn time_only_predictor(seed: u64) -> TimeOnlyPredictor {
    TimeOnlyPredictor { seed }
}

impl NoisePredictor for TimeOnlyPredictor {
    fn predict(&self, x: &LatentTensor, t: usize) -> LatentTensor {
        LatentTensor::standard_normal(x.shape(), &mut stream_rng(self.seed, t as u64))
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        Fingerprint::new("time-only").u64(self.seed).finish()
    }
}

/// Each call consumes the next index of a counter and returns the draw for
/// that index. [`StochasticOracle::draw`] gives direct access to any index.
#[derive(Debug)]
pub struct StochasticOracle {
    seed: u64,
    calls: AtomicU64,
}

pub fn stochastic_oracle_predictor(seed: u64) -> StochasticOracle {
    StochasticOracle {
        seed,
        calls: AtomicU64::new(0),
    }
}

impl StochasticOracle {
    pub fn draw(&self, call_index: u64, shape: Shape) -> LatentTensor {
        LatentTensor::standard_normal(shape, &mut stream_rng(self.seed, call_index))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl NoisePredictor for StochasticOracle {
    fn predict(&self, x: &LatentTensor, _t: usize) -> LatentTensor {
        let idx = self.calls.fetch_add(1, Ordering::Relaxed);
        self.draw(idx, x.shape())
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn fingerprint(&self) -> String {
        Fingerprint::new("oracle").u64(self.seed).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureDataModel {
    pub means: Vec<LatentTensor>,
    pub sigma0_sq: f64,
    pub weights: Vec<f64>,
}

impl GaussianMixtureDataModel {
    pub fn new(means: Vec<LatentTensor>, sigma0_sq: f64, weights: Vec<f64>) -> Result<Self> {
        let m = Self {
            means,
            sigma0_sq,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .means
            .first()
            .ok_or_else(|| Error::param("mixture needs at least one component"))?;
        if self.weights.len() != self.means.len() {
            return Err(Error::param("one weight per component required"));
        }
        for m in &self.means {
            m.check_shape(first.shape())?;
        }
        if !(self.sigma0_sq > 0.0) {
            return Err(Error::param("sigma0^2 must be positive"));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::param("weights must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.means[0].shape()
    }

    /// Four quadrant block patterns, blurred with σ = 1.5, σ0² = 0.05, equal weights.
    pub fn toy(shape: Shape) -> Self {
        const LEVELS: [[f64; 4]; 4] = [
            [0.2, 0.8, 0.8, 0.2],
            [0.8, 0.2, 0.2, 0.8],
            [0.3, 0.3, 0.7, 0.7],
            [0.7, 0.7, 0.3, 0.3],
        ];
        let [c, h, w] = shape;
        let means = LEVELS
            .iter()
            .map(|q| {
                let mut m = LatentTensor::zeros(shape);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let quadrant = 2 * usize::from(y >= h / 2) + usize::from(x >= w / 2);
                            m.set(ch, y, x, q[quadrant]);
                        }
                    }
                }
                gaussian_blur(&m, 1.5, 6)
            })
            .collect();
        Self {
            means,
            sigma0_sq: 0.05,
            weights: vec![0.25; 4],
        }
    }

    fn fingerprint_into(&self, fp: &mut Fingerprint) {
        for m in &self.means {
            fp.f64s(m.as_slice());
        }
        fp.f64s(&[self.sigma0_sq]).f64s(&self.weights);
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixturePredictor {
    model: GaussianMixtureDataModel,
    schedule: DiffusionSchedule,
}

pub fn gaussian_mixture_predictor(
    model: GaussianMixtureDataModel,
    schedule: &DiffusionSchedule,
) -> Result<GaussianMixturePredictor> {
    model.validate()?;
    Ok(GaussianMixturePredictor {
        model,
        schedule: schedule.clone(),
    })
}

impl GaussianMixturePredictor {
    pub fn model(&self) -> &GaussianMixtureDataModel {
        &self.model
    }

    /// Marginal variance of x_t per element under one component.
    fn marginal_var(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        ab * self.model.sigma0_sq + 1.0 - ab
    }

    /// Posterior component probabilities at (x, t).
    pub fn responsibilities(&self, x: &LatentTensor, t: usize) -> Vec<f64> {
        let sqrt_ab = self.schedule.alpha_bar(t).sqrt();
        let var = self.marginal_var(t);
        let logp: Vec<f64> = self
            .model
            .means
            .iter()
            .zip(&self.model.weights)
            .map(|(mu, w)| {
                let sq: f64 = x
                    .as_slice()
                    .iter()
                    .zip(mu.as_slice())
                    .map(|(xv, m)| (xv - sqrt_ab * m).powi(2))
                    .sum();
                w.ln() - 0.5 * sq / var
            })
            .collect();
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= total);
        r
    }
}

impl NoisePredictor for GaussianMixturePredictor {
    fn predict(&self, x: &LatentTensor, t: usize) -> LatentTensor {
        let ab = self.schedule.alpha_bar(t);
        let sqrt_ab = ab.sqrt();
        let gain = (1.0 - ab).sqrt() / self.marginal_var(t);
        let r = self.responsibilities(x, t);
        let mut out = LatentTensor::zeros(x.shape());
        for (mu, rj) in self.model.means.iter().zip(&r) {
            for ((o, xv), m) in out.as_mut_slice().iter_mut().zip(x.as_slice()).zip(mu.as_slice()) {
                *o += rj * gain * (xv - sqrt_ab * m);
            }
        }
        out
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new("mixture");
        self.model.fingerprint_into(&mut fp);
        fp.bytes(self.schedule.fingerprint().as_bytes());
        fp.finish()
    }
}
