//! Vanilla and robust verification.
//!
//! The vanilla stage is a one-sided test on the bias second moment. Samples
//! that pass are projected onto a PCA basis of benign biases and tested with
//! a Mahalanobis distance against two models: a detection model fitted on
//! clean valid-key biases, and an ownership model that also includes degraded
//! images.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::InitializationBias;
use crate::stats::{chi2_quantile, mean_std, normal_quantile};
use crate::tensor::{LatentTensor, Shape};

pub const MIN_VANILLA_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaThreshold {
    pub tau_vanilla: f64,
    pub alpha: f64,
    pub invalid_mean: f64,
    pub invalid_std: f64,
    /// Set when the invalid sample had zero spread and τ fell back to the mean.
    pub degenerate: bool,
    pub samples: usize,
}

/// τ = m + s·Φ⁻¹(α) from a Gaussian fit to invalid-key second moments.
pub fn calibrate_vanilla(invalid_moments: &[f64], alpha: f64) -> Result<VanillaThreshold> {
    if invalid_moments.len() < MIN_VANILLA_SAMPLES {
        return Err(Error::Calibration(format!(
            "need at least {MIN_VANILLA_SAMPLES} invalid-key samples, got {}",
            invalid_moments.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha {alpha} outside (0, 1)")));
    }
    let (m, s) = mean_std(invalid_moments);
    let degenerate = s == 0.0;
    if degenerate {
        log::warn!("invalid-key moments have zero spread; tau falls back to their mean");
    }
    let tau = m + s * normal_quantile(alpha)?;
    if !(tau > 0.0) {
        return Err(Error::Calibration(format!(
            "non-positive tau {tau:.4}: invalid-key moments overlap zero"
        )));
    }
    Ok(VanillaThreshold {
        tau_vanilla: tau,
        alpha,
        invalid_mean: m,
        invalid_std: s,
        degenerate,
        samples: invalid_moments.len(),
    })
}

/// Accept iff the second moment is strictly below τ.
pub fn vanilla_verify(bias: &InitializationBias, th: &VanillaThreshold) -> bool {
    bias.second_moment < th.tau_vanilla
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPurpose {
    Detection,
    Ownership,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaFitOptions {
    pub k: usize,
    /// Ridge added to Σ's diagonal, as a multiple of trace(Σ)/k.
    pub ridge_scale: f64,
    /// Fit the basis on the first half of the samples and the projected
    /// Gaussian on the second half.
    pub split: bool,
}

impl Default for PcaFitOptions {
    fn default() -> Self {
        Self {
            k: 2,
            ridge_scale: 1e-6,
            split: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaGaussianModel {
    pub purpose: ModelPurpose,
    pub shape: Shape,
    pub k: usize,
    pub data_mean: Vec<f64>,
    /// k rows of length d, orthonormal.
    pub basis: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub explained_variance_ratio: f64,
    pub proj_mean: Vec<f64>,
    /// Row-major k × k, ridge included.
    pub cov: Vec<f64>,
    pub cov_inv: Vec<f64>,
    pub ridge: f64,
    pub basis_samples: usize,
    pub moment_samples: usize,
}

pub fn fit_pca_gaussian(
    samples: &[LatentTensor],
    purpose: ModelPurpose,
    opts: &PcaFitOptions,
) -> Result<PcaGaussianModel> {
    let k = opts.k;
    if k == 0 {
        return Err(Error::param("PCA needs k >= 1"));
    }
    let need = if opts.split { 2 * (k + 10) } else { k + 10 };
    if samples.len() < need {
        return Err(Error::Calibration(format!(
            "need at least {need} samples for a k={k} fit, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].shape();
    for s in samples {
        s.check_shape(shape)?;
    }
    let d = samples[0].len();
    if k > d {
        return Err(Error::param(format!("k={k} exceeds dimension {d}")));
    }
    let (basis_set, moment_set) = if opts.split {
        samples.split_at(samples.len() / 2)
    } else {
        (samples, samples)
    };

    let n = basis_set.len();
    let mut data_mean = vec![0.0; d];
    for s in basis_set {
        for (m, v) in data_mean.iter_mut().zip(s.as_slice()) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| basis_set[i].as_slice()[j] - data_mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Calibration("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    if order.len() < k {
        return Err(Error::Calibration("fewer singular vectors than k".into()));
    }
    let basis: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&r| v_t.row(r).iter().copied().collect())
        .collect();
    let singular_values: Vec<f64> = order[..k].iter().map(|&r| svd.singular_values[r]).collect();
    let total_energy: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let explained_variance_ratio = if total_energy > 0.0 {
        singular_values.iter().map(|s| s * s).sum::<f64>() / total_energy
    } else {
        1.0
    };

    let mut model = PcaGaussianModel {
        purpose,
        shape,
        k,
        data_mean,
        basis,
        singular_values,
        explained_variance_ratio,
        proj_mean: vec![0.0; k],
        cov: vec![0.0; k * k],
        cov_inv: vec![0.0; k * k],
        ridge: 0.0,
        basis_samples: n,
        moment_samples: moment_set.len(),
    };
    let z: Vec<Vec<f64>> = moment_set.iter().map(|s| model.project_raw(s.as_slice())).collect();
    let m = z.len() as f64;
    let mut mean = vec![0.0; k];
    for zi in &z {
        for (a, v) in mean.iter_mut().zip(zi) {
            *a += v / m;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for zi in &z {
        let dz = DVector::from_iterator(k, zi.iter().zip(&mean).map(|(a, b)| a - b));
        cov += &dz * dz.transpose() / (m - 1.0);
    }
    let trace = cov.trace();
    let ridge = opts.ridge_scale * if trace > 0.0 { trace / k as f64 } else { 1.0 };
    for i in 0..k {
        cov[(i, i)] += ridge;
    }
    let inv = cov
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Calibration("projected covariance is singular".into()))?;
    model.proj_mean = mean;
    model.cov = cov.transpose().iter().copied().collect();
    model.cov_inv = inv.transpose().iter().copied().collect();
    model.ridge = ridge;
    Ok(model)
}

impl PcaGaussianModel {
    fn project_raw(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|row| row.iter().zip(x).zip(&self.data_mean).map(|((b, v), m)| b * (v - m)).sum())
            .collect()
    }

    /// Coordinates of `z` in the principal basis.
    pub fn project(&self, z: &LatentTensor) -> Result<Vec<f64>> {
        z.check_shape(self.shape)?;
        Ok(self.project_raw(z.as_slice()))
    }

    /// Map principal coordinates back to the data space.
    pub fn back_project(&self, coords: &[f64]) -> LatentTensor {
        let mut out = self.data_mean.clone();
        for (row, c) in self.basis.iter().zip(coords) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        LatentTensor::from_vec(self.shape, out).expect("model shape")
    }

    /// Largest |⟨b_i, b_j⟩ − δ_ij| over basis rows.
    pub fn gram_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

/// D² = (P z − μ)ᵀ Σ⁻¹ (P z − μ).
pub fn mahalanobis_sq(z: &LatentTensor, model: &PcaGaussianModel) -> Result<f64> {
    let p = model.project(z)?;
    let k = model.k;
    let d: Vec<f64> = p.iter().zip(&model.proj_mean).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            total += d[i] * model.cov_inv[i * k + j] * d[j];
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustThresholds {
    /// Significance of the attack-detection test.
    pub alpha_detect: f64,
    /// Significance of the ownership test.
    pub alpha_own: f64,
}

impl Default for RobustThresholds {
    fn default() -> Self {
        Self {
            alpha_detect: 0.05,
            alpha_own: 1e-3,
        }
    }
}

impl RobustThresholds {
    pub fn tau_detect(&self, k: usize) -> Result<f64> {
        chi2_quantile(k, 1.0 - self.alpha_detect)
    }

    pub fn tau_own(&self, k: usize) -> Result<f64> {
        chi2_quantile(k, 1.0 - self.alpha_own)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Benign,
    RemovalAttackedOwned,
    SpoofedRejected,
    InvalidOrNonwatermarked,
}

impl Classification {
    /// Decision table over (vanilla pass, detection D² over, ownership D² over).
    pub fn decide(vanilla_pass: bool, detect_over: bool, own_over: bool) -> Self {
        match (vanilla_pass, detect_over, own_over) {
            (false, _, _) => Self::InvalidOrNonwatermarked,
            (true, _, true) => Self::SpoofedRejected,
            (true, true, false) => Self::RemovalAttackedOwned,
            (true, false, false) => Self::Benign,
        }
    }

    pub fn owned(self) -> bool {
        matches!(self, Self::Benign | Self::RemovalAttackedOwned)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Benign => "benign",
            Self::RemovalAttackedOwned => "removal_attacked_owned",
            Self::SpoofedRejected => "spoofed_rejected",
            Self::InvalidOrNonwatermarked => "invalid_or_nonwatermarked",
        }
    }
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub user_id: String,
    pub timestamp: u64,
    pub vanilla_pass: bool,
    pub second_moment: f64,
    pub tau_vanilla: f64,
    /// Computed for every sample, also when the vanilla stage rejects.
    pub d2_detect: f64,
    pub d2_own: f64,
    /// χ²_k(1 − α) thresholds on D².
    pub tau_detect: f64,
    pub tau_own: f64,
    /// The same thresholds on the unsquared distance D.
    pub tau_detect_distance: f64,
    pub tau_own_distance: f64,
    pub classification: Classification,
    pub owned: bool,
}

pub fn robust_verify(
    bias: &InitializationBias,
    vanilla: &VanillaThreshold,
    detection: &PcaGaussianModel,
    ownership: &PcaGaussianModel,
    th: &RobustThresholds,
) -> Result<VerdictReport> {
    if detection.purpose != ModelPurpose::Detection || ownership.purpose != ModelPurpose::Ownership {
        return Err(Error::Uncalibrated("detection/ownership models swapped or mislabeled".into()));
    }
    let vanilla_pass = vanilla_verify(bias, vanilla);
    let d2_detect = mahalanobis_sq(&bias.delta, detection)?;
    let d2_own = mahalanobis_sq(&bias.delta, ownership)?;
    let tau_detect = th.tau_detect(detection.k)?;
    let tau_own = th.tau_own(ownership.k)?;
    let classification = Classification::decide(vanilla_pass, d2_detect > tau_detect, d2_own > tau_own);
    Ok(VerdictReport {
        user_id: bias.key_id.clone(),
        timestamp: bias.timestamp,
        vanilla_pass,
        second_moment: bias.second_moment,
        tau_vanilla: vanilla.tau_vanilla,
        d2_detect,
        d2_own,
        tau_detect,
        tau_own,
        tau_detect_distance: tau_detect.sqrt(),
        tau_own_distance: tau_own.sqrt(),
        classification,
        owned: classification.owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bias(v: f64) -> InitializationBias {
        InitializationBias::new(LatentTensor::filled([1, 1, 4], v.sqrt()), "u", 0)
    }

    #[test]
    fn vanilla_boundary_is_strict() {
        let moments: Vec<f64> = (0..100).map(|i| 2.0 + (i as f64 - 49.5) * 0.01).collect();
        let th = calibrate_vanilla(&moments, 1e-3).unwrap();
        let (m, s) = mean_std(&moments);
        assert!((th.tau_vanilla - (m + s * normal_quantile(1e-3).unwrap())).abs() < 1e-12);
        assert!(vanilla_verify(&bias(0.0), &th));
        let at = InitializationBias {
            second_moment: th.tau_vanilla,
            ..bias(0.0)
        };
        assert!(!vanilla_verify(&at, &th));
    }

    #[test]
    fn vanilla_needs_samples_and_handles_zero_spread() {
        assert!(matches!(calibrate_vanilla(&[2.0; 10], 0.01), Err(Error::Calibration(_))));
        let th = calibrate_vanilla(&[2.0; 60], 0.01).unwrap();
        assert!(th.degenerate);
        assert_eq!(th.tau_vanilla, 2.0);
    }

    /// Gaussian invalid moments: the holdout false-accept rate stays near α.
    #[test]
    fn vanilla_holdout_fpr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| 2.0 + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let th = calibrate_vanilla(&draw(200), 1e-3).unwrap();
        let holdout = draw(20_000);
        let fpr = holdout.iter().filter(|m| **m < th.tau_vanilla).count() as f64 / 20_000.0;
        assert!(fpr <= 4e-3, "{fpr}");
    }

    fn gaussian_cloud(n: usize, seed: u64, scales: &[f64]) -> Vec<LatentTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
                LatentTensor::from_vec([1, 1, scales.len()], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn basis_orthonormal_and_mean_has_zero_distance() {
        let cloud = gaussian_cloud(200, 1, &[3.0, 2.0, 0.5, 0.2, 0.1]);
        let m = fit_pca_gaussian(&cloud, ModelPurpose::Detection, &PcaFitOptions::default()).unwrap();
        assert!(m.gram_error() < 1e-8);
        let at_mean = m.back_project(&m.proj_mean);
        assert!(mahalanobis_sq(&at_mean, &m).unwrap() < 1e-20);
    }

    #[test]
    fn identity_metric_distance() {
        let mut m = fit_pca_gaussian(
            &gaussian_cloud(100, 2, &[3.0, 2.0, 0.1]),
            ModelPurpose::Detection,
            &PcaFitOptions::default(),
        )
        .unwrap();
        m.cov_inv = vec![1.0, 0.0, 0.0, 1.0];
        let mut coords = m.proj_mean.clone();
        coords[1] += 1.7;
        let z = m.back_project(&coords);
        assert!((mahalanobis_sq(&z, &m).unwrap() - 1.7 * 1.7).abs() < 1e-10);
    }

    #[test]
    fn collinear_samples_stay_invertible() {
        let line: Vec<LatentTensor> = (0..40)
            .map(|i| LatentTensor::from_vec([1, 1, 3], vec![i as f64, 2.0 * i as f64, -(i as f64)]).unwrap())
            .collect();
        let opts = PcaFitOptions {
            split: false,
            ..Default::default()
        };
        let m = fit_pca_gaussian(&line, ModelPurpose::Detection, &opts).unwrap();
        assert!(m.singular_values[1] < 1e-9 * m.singular_values[0]);
        assert!(m.cov_inv.iter().all(|v| v.is_finite()));
        assert!(m.ridge > 0.0);
    }

    #[test]
    fn reconstruction_energy_matches_explained_variance() {
        let cloud = gaussian_cloud(300, 3, &[3.0, 2.0, 1.0, 0.5]);
        let opts = PcaFitOptions {
            split: false,
            ..Default::default()
        };
        let m = fit_pca_gaussian(&cloud, ModelPurpose::Detection, &opts).unwrap();
        let mut total = 0.0;
        let mut lost = 0.0;
        for z in &cloud {
            let rec = m.back_project(&m.project(z).unwrap());
            let centered: Vec<f64> = z.as_slice().iter().zip(&m.data_mean).map(|(a, b)| a - b).collect();
            total += centered.iter().map(|v| v * v).sum::<f64>();
            lost += z.sub(&rec).unwrap().as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        assert!((lost / total - (1.0 - m.explained_variance_ratio)).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let cloud = gaussian_cloud(15, 1, &[1.0, 1.0, 1.0]);
        assert!(matches!(
            fit_pca_gaussian(&cloud, ModelPurpose::Detection, &PcaFitOptions::default()),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn gaussian_null_is_chi_square() {
        let cloud = gaussian_cloud(2000, 5, &[2.0, 1.0, 0.3, 0.3]);
        let m = fit_pca_gaussian(&cloud[..1000], ModelPurpose::Detection, &PcaFitOptions::default()).unwrap();
        let d2: Vec<f64> = cloud[1000..].iter().map(|z| mahalanobis_sq(z, &m).unwrap()).collect();
        let ks = crate::stats::ks_test(&d2, |x| crate::stats::chi2_cdf(2, x));
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn decision_table_is_total() {
        use Classification::*;
        let mut seen = std::collections::HashSet::new();
        for v in [false, true] {
            for d in [false, true] {
                for o in [false, true] {
                    seen.insert(Classification::decide(v, d, o));
                }
            }
        }
        assert_eq!(seen.len(), 4);
        assert_eq!(Classification::decide(true, false, false), Benign);
        assert_eq!(Classification::decide(true, true, false), RemovalAttackedOwned);
        assert_eq!(Classification::decide(true, false, true), SpoofedRejected);
        assert_eq!(Classification::decide(false, false, false), InvalidOrNonwatermarked);
        assert!(RemovalAttackedOwned.owned() && Benign.owned());
        assert!(!SpoofedRejected.owned() && !InvalidOrNonwatermarked.owned());
    }
}
