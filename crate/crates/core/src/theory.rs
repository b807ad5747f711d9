//! Closed-form bias recurrences and second moments for scalar latents.
//!
//! Scalar mode deflects every step with a scalar coefficient: M for the
//! generating key, N for a forged key, Q for a random key applied to a plain
//! image. With c_X,i = √(1−ᾱ_i) − √(α_i−ᾱ_i)/X, the inversion error after t
//! steps is
//!
//! ```text
//! δ^c_t = Σ_i √ᾱ_t/(√ᾱ_i M^{t−i}) · c_M,i (ε̂_i − ε_i)
//! δ^w_t = (M/N)^t x_t − x^w + Σ_i √ᾱ_t/(√ᾱ_i N^{t−i}) · (c_N,i ε̂_i − (M/N)^i c_M,i ε_i)
//! ```
//!
//! where ε_i = ε(x_i, i) on the generating pass and ε̂_i = ε(x̂_{i−1}, i) on
//! the inverting pass. δ^q is δ^w with M = 1 and N = Q; the intrinsic bias Δ
//! is δ^c with M = 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::inverse_deflected_update;
use crate::keying::{box_muller, clamp_salt};
use crate::predictor::{stochastic_oracle_predictor, NoisePredictor};
use crate::sampler::deflected_update;
use crate::schedule::{DiffusionSchedule, ScheduleParams};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Watermarked image, generating key (δ^c).
    Valid,
    /// Watermarked image, forged key (δ^w).
    Invalid,
    /// Plain image, no key (Δ).
    Intrinsic,
    /// Plain image, random key (δ^q).
    NonWatermarked,
}

/// ε values seen by one generate/invert pair, indexed by step − 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsRecord {
    pub eps: Vec<f64>,
    pub eps_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRun {
    pub image: f64,
    pub x_hat: f64,
    pub record: EpsRecord,
}

fn check_t(s: &DiffusionSchedule, t: usize, rec: Option<&EpsRecord>) -> Result<()> {
    s.check_step(t)?;
    if let Some(r) = rec {
        if r.eps.len() < t || r.eps_hat.len() < t {
            return Err(Error::param(format!("need {t} eps values per pass")));
        }
    }
    Ok(())
}

/// c_X,i = √(1−ᾱ_i) − √(α_i−ᾱ_i)/X.
pub fn inversion_gain(s: &DiffusionSchedule, i: usize, x: f64) -> f64 {
    let c = s.coefficients_at(i).expect("step in range");
    c.sqrt_one_minus_alpha_bar - c.sqrt_alpha_minus_alpha_bar / x
}

/// √ᾱ_t / (√ᾱ_i · X^{t−i})
fn carry(s: &DiffusionSchedule, t: usize, i: usize, x: f64) -> f64 {
    (s.alpha_bar(t) / s.alpha_bar(i)).sqrt() / x.powi((t - i) as i32)
}

pub fn closed_form_delta_c(m: f64, s: &DiffusionSchedule, t: usize, rec: &EpsRecord) -> Result<f64> {
    check_t(s, t, Some(rec))?;
    Ok((1..=t)
        .map(|i| carry(s, t, i, m) * inversion_gain(s, i, m) * (rec.eps_hat[i - 1] - rec.eps[i - 1]))
        .sum())
}

pub fn closed_form_delta_w(
    m: f64,
    n: f64,
    x_start: f64,
    x_ref: f64,
    s: &DiffusionSchedule,
    t: usize,
    rec: &EpsRecord,
) -> Result<f64> {
    check_t(s, t, Some(rec))?;
    let r = m / n;
    let sum: f64 = (1..=t)
        .map(|i| {
            let f = inversion_gain(s, i, n) * rec.eps_hat[i - 1]
                - r.powi(i as i32) * inversion_gain(s, i, m) * rec.eps[i - 1];
            carry(s, t, i, n) * f
        })
        .sum();
    Ok(r.powi(t as i32) * x_start - x_ref + sum)
}

pub fn closed_form_delta_q(
    q: f64,
    x_start: f64,
    x_ref: f64,
    s: &DiffusionSchedule,
    t: usize,
    rec: &EpsRecord,
) -> Result<f64> {
    closed_form_delta_w(1.0, q, x_start, x_ref, s, t, rec)
}

pub fn closed_form_intrinsic(s: &DiffusionSchedule, t: usize, rec: &EpsRecord) -> Result<f64> {
    closed_form_delta_c(1.0, s, t, rec)
}

/// Generate from `x_start` over steps t..1 with coefficient `m_fwd`, then
/// invert over 1..t with `n_inv`.
pub fn simulate_scalar(
    m_fwd: f64,
    n_inv: f64,
    x_start: f64,
    s: &DiffusionSchedule,
    t: usize,
    pred: &dyn NoisePredictor,
) -> Result<ScalarRun> {
    let image = generate_scalar(m_fwd, x_start, s, t, pred)?;
    let (x_hat, eps_hat) = invert_scalar(n_inv, image.0, s, t, pred)?;
    Ok(ScalarRun {
        image: image.0,
        x_hat,
        record: EpsRecord { eps: image.1, eps_hat },
    })
}

fn generate_scalar(
    m: f64,
    x_start: f64,
    s: &DiffusionSchedule,
    t: usize,
    pred: &dyn NoisePredictor,
) -> Result<(f64, Vec<f64>)> {
    check_t(s, t, None)?;
    let mv = LatentTensor::scalar(m);
    let mut x = LatentTensor::scalar(x_start);
    let mut eps = vec![0.0; t];
    for i in (1..=t).rev() {
        let e = pred.predict(&x, i);
        eps[i - 1] = e.as_slice()[0];
        x = deflected_update(&x, &e, &mv, &s.coefficients_at(i)?)?;
    }
    Ok((x.as_slice()[0], eps))
}

fn invert_scalar(n: f64, image: f64, s: &DiffusionSchedule, t: usize, pred: &dyn NoisePredictor) -> Result<(f64, Vec<f64>)> {
    check_t(s, t, None)?;
    let nv = LatentTensor::scalar(n);
    let mut x = LatentTensor::scalar(image);
    let mut eps_hat = vec![0.0; t];
    for i in 1..=t {
        let e = pred.predict(&x, i);
        eps_hat[i - 1] = e.as_slice()[0];
        x = inverse_deflected_update(&x, &e, &nv, &s.coefficients_at(i)?)?;
    }
    Ok((x.as_slice()[0], eps_hat))
}

/// E|δ^c_t|² under i.i.d. N(0, 1) predictions.
pub fn second_moment_c(m: f64, s: &DiffusionSchedule, t: usize) -> Result<f64> {
    check_t(s, t, None)?;
    Ok((1..=t)
        .map(|i| 2.0 * carry(s, t, i, m).powi(2) * inversion_gain(s, i, m).powi(2))
        .sum())
}

/// E|δ^w_t|² with x_t and x^w independent standard normals.
pub fn second_moment_w(m: f64, n: f64, s: &DiffusionSchedule, t: usize) -> Result<f64> {
    check_t(s, t, None)?;
    let r = m / n;
    let sum: f64 = (1..=t)
        .map(|i| {
            carry(s, t, i, n).powi(2)
                * (inversion_gain(s, i, n).powi(2) + r.powi(2 * i as i32) * inversion_gain(s, i, m).powi(2))
        })
        .sum();
    Ok(r.powi(2 * t as i32) + 1.0 + sum)
}

pub fn second_moment_q(q: f64, s: &DiffusionSchedule, t: usize) -> Result<f64> {
    second_moment_w(1.0, q, s, t)
}

pub fn second_moment_intrinsic(s: &DiffusionSchedule, t: usize) -> Result<f64> {
    second_moment_c(1.0, s, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub n: f64,
    pub second_moment_w: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub m: f64,
    pub t: usize,
    pub second_moment_c: f64,
    pub entries: Vec<GapEntry>,
    /// E|δ^w|² − E|δ^c|² at N = M.
    pub limit_gap: f64,
    pub q: f64,
    pub second_moment_q: f64,
    pub q_gap: f64,
    pub ordered: bool,
}

/// Evaluate the moment gaps over `n_grid` values of N spanning M ± `half_width`.
pub fn gap_report(m: f64, q: f64, s: &DiffusionSchedule, t: usize, n_grid: usize, half_width: f64) -> Result<GapReport> {
    if n_grid < 2 {
        return Err(Error::param("gap grid needs at least two points"));
    }
    let c = second_moment_c(m, s, t)?;
    let entries = (0..n_grid)
        .map(|j| {
            let n = m - half_width + 2.0 * half_width * j as f64 / (n_grid - 1) as f64;
            let w = second_moment_w(m, n, s, t)?;
            Ok(GapEntry {
                n,
                second_moment_w: w,
                gap: w - c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sq = second_moment_q(q, s, t)?;
    let ordered = entries.iter().all(|e| e.gap > 0.0) && sq > c;
    Ok(GapReport {
        m,
        t,
        second_moment_c: c,
        limit_gap: second_moment_w(m, m, s, t)? - c,
        entries,
        q,
        second_moment_q: sq,
        q_gap: sq - c,
        ordered,
    })
}

/// Ordering check over an `n_grid`-point grid N ∈ [M − 0.05, M + 0.05] with Q = M.
pub fn theorem_gap_check(m: f64, s: &DiffusionSchedule, t: usize, n_grid: usize) -> Result<GapReport> {
    let report = gap_report(m, m, s, t, n_grid, 0.05)?;
    if !report.ordered {
        let worst = report
            .entries
            .iter()
            .map(|e| e.gap)
            .fold(f64::INFINITY, f64::min);
        return Err(Error::Theory(format!(
            "moment ordering violated at M={m}, t={t}: min gap {worst:.4}, q gap {:.4}",
            report.q_gap
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartCoupling {
    /// x_t and x^w from independent salts.
    Independent,
    /// x_t and x^w share the salt S and differ only in the key.
    SharedSalt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentComparison {
    pub t: usize,
    pub trials: usize,
    pub coupling: StartCoupling,
    pub m: f64,
    pub n: f64,
    pub q: f64,
    pub mc_c: f64,
    pub formula_c: f64,
    pub mc_w: f64,
    pub formula_w: f64,
    pub mc_q: f64,
    pub formula_q: f64,
    /// Monte-Carlo E|δ^w|² − E|δ^c|² with N = M.
    pub mc_limit_gap: f64,
}

impl MomentComparison {
    pub fn rel_err_c(&self) -> f64 {
        rel(self.mc_c, self.formula_c)
    }
    pub fn rel_err_w(&self) -> f64 {
        rel(self.mc_w, self.formula_w)
    }
    pub fn rel_err_q(&self) -> f64 {
        rel(self.mc_q, self.formula_q)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn uniform_pair(seed: u64) -> [f64; 6] {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    std::array::from_fn(|_| rng.gen::<f64>())
}

fn start_point(k_u: f64, s_u: f64) -> f64 {
    let k = crate::stats::normal_quantile(k_u.clamp(1e-12, 1.0 - 1e-12)).unwrap_or(0.0);
    box_muller(&LatentTensor::scalar(k), &LatentTensor::scalar(clamp_salt(s_u)))
        .expect("scalar shapes")
        .as_slice()[0]
}

/// Monte-Carlo second moments under the stochastic oracle, one trial per
/// oracle seed so the result does not depend on thread scheduling.
pub fn monte_carlo_moments(
    m: f64,
    n: f64,
    q: f64,
    s: &DiffusionSchedule,
    t: usize,
    trials: usize,
    seed: u64,
    coupling: StartCoupling,
) -> Result<MomentComparison> {
    check_t(s, t, None)?;
    let per_trial: Vec<[f64; 4]> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let oracle = stochastic_oracle_predictor(trial_seed);
            let u = uniform_pair(trial_seed);
            let x_start = start_point(u[0], u[1]);
            let salt_w = match coupling {
                StartCoupling::Independent => u[3],
                StartCoupling::SharedSalt => u[1],
            };
            let x_w = start_point(u[2], salt_w);
            let (image, _) = generate_scalar(m, x_start, s, t, &oracle)?;
            let (hat_c, _) = invert_scalar(m, image, s, t, &oracle)?;
            let (hat_w, _) = invert_scalar(n, image, s, t, &oracle)?;
            let (hat_lim, _) = invert_scalar(m, image, s, t, &oracle)?;
            let plain_start = start_point(u[4], u[5]);
            let x_q = start_point(u[2], u[3]);
            let (plain, _) = generate_scalar(1.0, plain_start, s, t, &oracle)?;
            let (hat_q, _) = invert_scalar(q, plain, s, t, &oracle)?;
            // the limit case inverts with M but compares against the forged start point
            Ok([
                (hat_c - x_start).powi(2),
                (hat_w - x_w).powi(2),
                (hat_q - x_q).powi(2),
                (hat_lim - x_w).powi(2) - (hat_c - x_start).powi(2),
            ])
        })
        .collect::<Result<_>>()?;
    let mean = |j: usize| per_trial.iter().map(|v| v[j]).sum::<f64>() / trials as f64;
    Ok(MomentComparison {
        t,
        trials,
        coupling,
        m,
        n,
        q,
        mc_c: mean(0),
        formula_c: second_moment_c(m, s, t)?,
        mc_w: mean(1),
        formula_w: second_moment_w(m, n, s, t)?,
        mc_q: mean(2),
        formula_q: second_moment_q(q, s, t)?,
        mc_limit_gap: mean(3),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCheck {
    pub mode: BiasMode,
    pub t: usize,
    pub streams: usize,
    pub max_rel_err: f64,
}

/// Simulate `streams` oracle runs per mode and compare against the closed forms.
pub fn closed_form_checks(
    m: f64,
    n: f64,
    q: f64,
    s: &DiffusionSchedule,
    t: usize,
    streams: usize,
    seed: u64,
) -> Result<Vec<ClosedFormCheck>> {
    let modes = [BiasMode::Valid, BiasMode::Invalid, BiasMode::Intrinsic, BiasMode::NonWatermarked];
    let mut out = Vec::new();
    for (mi, mode) in modes.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..streams as u64 {
            let stream_seed = seed ^ ((mi as u64) << 56) ^ k.wrapping_mul(0xD6E8_FEB8_6659_FD93);
            let oracle = stochastic_oracle_predictor(stream_seed);
            let u = uniform_pair(stream_seed);
            let x_start = start_point(u[0], u[1]);
            let x_ref = start_point(u[2], u[3]);
            let (sim, cf) = match mode {
                BiasMode::Valid => {
                    let r = simulate_scalar(m, m, x_start, s, t, &oracle)?;
                    (r.x_hat - x_start, closed_form_delta_c(m, s, t, &r.record)?)
                }
                BiasMode::Invalid => {
                    let r = simulate_scalar(m, n, x_start, s, t, &oracle)?;
                    (r.x_hat - x_ref, closed_form_delta_w(m, n, x_start, x_ref, s, t, &r.record)?)
                }
                BiasMode::Intrinsic => {
                    let r = simulate_scalar(1.0, 1.0, x_start, s, t, &oracle)?;
                    (r.x_hat - x_start, closed_form_intrinsic(s, t, &r.record)?)
                }
                BiasMode::NonWatermarked => {
                    let r = simulate_scalar(1.0, q, x_start, s, t, &oracle)?;
                    (r.x_hat - x_ref, closed_form_delta_q(q, x_start, x_ref, s, t, &r.record)?)
                }
            };
            worst = worst.max(rel(sim, cf));
        }
        out.push(ClosedFormCheck {
            mode: *mode,
            t,
            streams,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySuiteConfig {
    pub schedule: ScheduleParams,
    pub m: f64,
    pub n: f64,
    pub q: f64,
    pub closed_form_steps: Vec<usize>,
    pub closed_form_streams: usize,
    pub moment_steps: Vec<usize>,
    pub mc_trials: usize,
    pub gap_m: f64,
    pub gap_grid: usize,
    pub seed: u64,
    pub closed_form_tol: f64,
    pub moment_rel_tol: f64,
    pub limit_gap_tol: f64,
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::THEORY,
            m: 1.08,
            n: 0.95,
            q: 1.08,
            closed_form_steps: vec![1, 2, 5, 50],
            closed_form_streams: 100,
            moment_steps: vec![1, 5, 25, 50],
            mc_trials: 20_000,
            gap_m: 1.0,
            gap_grid: 11,
            seed: 2024,
            closed_form_tol: 1e-9,
            moment_rel_tol: 0.05,
            limit_gap_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheorySuiteConfig,
    pub closed_form: Vec<ClosedFormCheck>,
    pub moments: Vec<MomentComparison>,
    /// Shared-salt variant; reported, not asserted.
    pub moments_shared_salt: Vec<MomentComparison>,
    pub gaps: Vec<GapReport>,
    pub closed_form_pass: bool,
    pub moments_pass: bool,
    pub ordering_pass: bool,
    pub passed: bool,
}

pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> Result<TheoryReport> {
    let s = cfg.schedule.build()?;
    let mut closed_form = Vec::new();
    for &t in &cfg.closed_form_steps {
        closed_form.extend(closed_form_checks(cfg.m, cfg.n, cfg.q, &s, t, cfg.closed_form_streams, cfg.seed)?);
    }
    let mut moments = Vec::new();
    let mut moments_shared_salt = Vec::new();
    for &t in &cfg.moment_steps {
        let seed = cfg.seed.wrapping_add(t as u64);
        moments.push(monte_carlo_moments(cfg.m, cfg.n, cfg.q, &s, t, cfg.mc_trials, seed, StartCoupling::Independent)?);
        moments_shared_salt.push(monte_carlo_moments(
            cfg.m,
            cfg.n,
            cfg.q,
            &s,
            t,
            cfg.mc_trials,
            seed,
            StartCoupling::SharedSalt,
        )?);
    }
    let gaps = cfg
        .moment_steps
        .iter()
        .map(|&t| gap_report(cfg.gap_m, cfg.gap_m, &s, t, cfg.gap_grid, 0.05))
        .collect::<Result<Vec<_>>>()?;
    let closed_form_pass = closed_form.iter().all(|c| c.max_rel_err < cfg.closed_form_tol);
    let moments_pass = moments.iter().all(|m| {
        m.rel_err_c() < cfg.moment_rel_tol
            && m.rel_err_w() < cfg.moment_rel_tol
            && m.rel_err_q() < cfg.moment_rel_tol
            && (m.mc_limit_gap - 2.0).abs() < cfg.limit_gap_tol
    });
    let ordering_pass = gaps.iter().all(|g| g.ordered && (g.limit_gap - 2.0).abs() < cfg.limit_gap_tol);
    Ok(TheoryReport {
        config: cfg.clone(),
        closed_form,
        moments,
        moments_shared_salt,
        gaps,
        closed_form_pass,
        moments_pass,
        ordering_pass,
        passed: closed_form_pass && moments_pass && ordering_pass,
    })
}
