//! Noise schedule and per-step coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;

/// Parameters of a linear β schedule, as stored in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// Default for the image pipeline: 50 direct steps, β ∈ [1e-4, 0.1].
    ///
    /// With β_end = 0.02 the terminal ᾱ is ≈ 0.6, so x_T still carries most of
    /// the image and the inverted start point is far from N(0, 1). The wider
    /// range brings ᾱ_T down to ≈ 0.075.
    pub const PIPELINE: Self = Self {
        steps: 50,
        beta_start: 1e-4,
        beta_end: 0.1,
    };

    /// 50 direct steps, β ∈ [1e-4, 0.02]. Used by the scalar theory checks.
    pub const THEORY: Self = Self {
        steps: 50,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::PIPELINE
    }
}

/// Coefficients needed by one sampling or inversion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// √(1 − ᾱ_t)
    pub sqrt_one_minus_alpha_bar: f64,
    /// √(α_t − ᾱ_t), computed as √α_t·√(1 − ᾱ_{t−1}).
    pub sqrt_alpha_minus_alpha_bar: f64,
}

impl StepCoefficients {
    pub fn sqrt_one_minus_alpha_bar_prev(&self) -> f64 {
        (1.0 - self.alpha_bar_prev).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    num_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// Length T + 1; index 0 is the ᾱ_0 = 1 sentinel.
    alpha_bar: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(beta)
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            num_steps: beta.len(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Build from ᾱ_1..ᾱ_T directly; the sequence must be strictly decreasing in (0, 1).
    pub fn from_alpha_bar(alpha_bar: &[f64]) -> Result<Self> {
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(alpha_bar.len());
        for &ab in alpha_bar {
            if !(ab > 0.0 && ab < prev) {
                return Err(Error::param("alpha_bar must be strictly decreasing in (0, 1)"));
            }
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut s = Self::from_betas(beta)?;
        // keep the caller's values exactly rather than the re-accumulated products
        s.alpha_bar[1..].copy_from_slice(alpha_bar);
        Ok(s)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// ᾱ_0..ᾱ_T, including the sentinel.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            Err(Error::StepIndex {
                t,
                max: self.num_steps,
            })
        } else {
            Ok(())
        }
    }

    pub fn coefficients_at(&self, t: usize) -> Result<StepCoefficients> {
        self.check_step(t)?;
        let alpha_bar = self.alpha_bar[t];
        let alpha_bar_prev = self.alpha_bar[t - 1];
        let alpha = alpha_bar / alpha_bar_prev;
        Ok(StepCoefficients {
            alpha,
            alpha_bar,
            alpha_bar_prev,
            sqrt_one_minus_alpha_bar: (1.0 - alpha_bar).sqrt(),
            sqrt_alpha_minus_alpha_bar: alpha.sqrt() * (1.0 - alpha_bar_prev).sqrt(),
        })
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new("schedule");
        fp.f64s(&self.alpha_bar);
        fp.finish()
    }
}
