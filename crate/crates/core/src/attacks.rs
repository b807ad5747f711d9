//! Attack bench: degradations, spoofing, tampering and white-box adaptive attacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::gaussian_blur;
use crate::inversion::compute_bias;
use crate::keying::UserKey;
use crate::localize::TamperMask;
use crate::predictor::NoisePredictor;
use crate::sampler::{DeflectionConfig, GenerationMeta};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{mean_of, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    JpegLike,
    GaussianNoise,
    GaussianBlur,
    Brightness,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::JpegLike,
        DegradationKind::GaussianNoise,
        DegradationKind::GaussianBlur,
        DegradationKind::Brightness,
    ];

    /// Quality factor, σ on the 0–255 scale, kernel size, or additive shift.
    pub fn parameter(self, level: u8) -> Result<f64> {
        let table = match self {
            Self::JpegLike => [45.0, 35.0, 25.0],
            Self::GaussianNoise => [1.0, 10.0, 50.0],
            Self::GaussianBlur => [5.0, 7.0, 9.0],
            Self::Brightness => [-0.1, 0.1, 0.2],
        };
        match level {
            1..=3 => Ok(table[level as usize - 1]),
            _ => Err(Error::param(format!("degradation level {level} not in 1..=3"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::JpegLike => "jpeg_like",
            Self::GaussianNoise => "gaussian_noise",
            Self::GaussianBlur => "gaussian_blur",
            Self::Brightness => "brightness",
        }
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown degradation '{s}'")))
    }
}

/// `seed` only matters for noise.
pub fn degrade(image: &LatentTensor, kind: DegradationKind, level: u8, seed: u64) -> Result<LatentTensor> {
    let p = kind.parameter(level)?;
    Ok(match kind {
        DegradationKind::JpegLike => jpeg_like(image, p),
        DegradationKind::GaussianNoise => gaussian_noise(image, p, seed),
        DegradationKind::GaussianBlur => blur_kernel(image, p as usize),
        DegradationKind::Brightness => image.map(|v| (v + p).clamp(0.0, 1.0)),
    })
}

const LUMA_QUANT: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance table scaled to a quality factor with the usual IJG rule.
pub fn quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_QUANT.map(|v| ((v * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 2-D DCT of an 8 × 8 block, or its inverse.
fn dct_block(block: &[f64; 64], inverse: bool) -> [f64; 64] {
    let c = dct_matrix();
    let at = |u: usize, x: usize| if inverse { c[x][u] } else { c[u][x] };
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| at(u, y) * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| at(v, x) * tmp[u * 8 + x]).sum();
        }
    }
    out
}

/// Block DCT quantization on the 0–255 scale. Partial edge blocks are padded
/// by replication and cropped.
pub fn jpeg_with_table(image: &LatentTensor, table: &[f64; 64]) -> LatentTensor {
    let [ch, h, w] = image.shape();
    let mut out = image.clone();
    for c in 0..ch {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        block[i * 8 + j] = image.at(c, (by + i).min(h - 1), (bx + j).min(w - 1)) * 255.0 - 128.0;
                    }
                }
                let mut coef = dct_block(&block, false);
                for (v, q) in coef.iter_mut().zip(table) {
                    *v = (*v / q).round() * q;
                }
                let rec = dct_block(&coef, true);
                for i in 0..8.min(h - by) {
                    for j in 0..8.min(w - bx) {
                        out.set(c, by + i, bx + j, ((rec[i * 8 + j] + 128.0) / 255.0).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    out
}

pub fn jpeg_like(image: &LatentTensor, quality: f64) -> LatentTensor {
    jpeg_with_table(image, &quant_table(quality))
}

/// Additive Gaussian noise with σ given on the 0–255 scale.
pub fn gaussian_noise(image: &LatentTensor, sigma255: f64, seed: u64) -> LatentTensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + n * sigma255 / 255.0).clamp(0.0, 1.0);
    }
    out
}

/// Gaussian blur with the σ implied by an odd kernel size.
pub fn blur_kernel(image: &LatentTensor, k: usize) -> LatentTensor {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    gaussian_blur(image, sigma, (k - 1) / 2)
}

/// clip(target + strength · (mean(wm) − mean(plain))).
pub fn pattern_spoof(
    wm_pool: &[LatentTensor],
    plain_pool: &[LatentTensor],
    targets: &[LatentTensor],
    strength: f64,
) -> Result<Vec<LatentTensor>> {
    if wm_pool.is_empty() || plain_pool.is_empty() {
        return Err(Error::param("pattern extraction needs non-empty pools"));
    }
    let pattern = mean_of(wm_pool)?.sub(&mean_of(plain_pool)?)?;
    targets
        .iter()
        .map(|t| Ok(t.add(&pattern.scale(strength))?.clamp(0.0, 1.0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    /// Square of side round(√(ratio · h · w)) at the given corner.
    pub fn square_with_ratio(ratio: f64, h: usize, w: usize, y: usize, x: usize) -> Self {
        let side = (ratio * (h * w) as f64).sqrt().round() as usize;
        Self {
            y,
            x,
            height: side,
            width: side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "content", rename_all = "snake_case")]
pub enum PatchContent {
    Constant { value: f64 },
    Noise { sigma: f64, seed: u64 },
    CopyFrom { source: LatentTensor },
}

/// Replace a rectangle in every channel; returns the image and truth mask.
pub fn tamper_patch(image: &LatentTensor, rect: Rect, content: &PatchContent) -> Result<(LatentTensor, TamperMask)> {
    let [ch, h, w] = image.shape();
    if rect.y + rect.height > h || rect.x + rect.width > w {
        return Err(Error::param(format!("patch {rect:?} exceeds {h}×{w} image")));
    }
    if let PatchContent::CopyFrom { source } = content {
        source.check_shape(image.shape())?;
    }
    let mut rng = match content {
        PatchContent::Noise { seed, .. } => Some(ChaCha12Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut out = image.clone();
    let mut mask = TamperMask::empty(h, w);
    for y in rect.y..rect.y + rect.height {
        for x in rect.x..rect.x + rect.width {
            mask.data[y * w + x] = true;
            for c in 0..ch {
                let v = match content {
                    PatchContent::Constant { value } => *value,
                    PatchContent::Noise { sigma, .. } => {
                        let n: f64 = rng.as_mut().expect("noise rng").sample(StandardNormal);
                        (image.at(c, y, x) + sigma * n).clamp(0.0, 1.0)
                    }
                    PatchContent::CopyFrom { source } => source.at(c, y, x),
                };
                out.set(c, y, x, v);
            }
        }
    }
    Ok((out, mask))
}

/// Replace the timestamp by a different random value.
pub fn metadata_tamper(meta: &GenerationMeta, seed: u64) -> GenerationMeta {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut ts = meta.timestamp;
    while ts == meta.timestamp {
        ts = rng.gen_range(0..4_102_444_800u64);
    }
    GenerationMeta {
        timestamp: ts,
        ..meta.clone()
    }
}

/// Image shared across targets plus its metadata timestamp.
#[derive(Debug, Clone)]
pub struct AttackTarget {
    pub image: LatentTensor,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyExtractionParams {
    pub iters: usize,
    pub step_size: f64,
    pub reg_weight: f64,
    /// Finite-difference half-width.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for KeyExtractionParams {
    fn default() -> Self {
        Self {
            iters: 40,
            step_size: 1e-4,
            reg_weight: 0.01,
            fd_step: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KeyExtractionResult {
    pub candidate: UserKey,
    /// Mean bias second moment over targets, before the first and after each update.
    pub trace: Vec<f64>,
}

fn normality_penalty(k: &LatentTensor) -> f64 {
    let m = k.mean();
    let v = k.mean_square() - m * m;
    m * m + (v - 1.0).powi(2)
}

fn mean_moment(
    k: &LatentTensor,
    targets: &[AttackTarget],
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<f64> {
    let key = UserKey::from_tensor("candidate", k.clone(), 0)?;
    let mut total = 0.0;
    for t in targets {
        total += compute_bias(&t.image, &key, Some(t.timestamp), cfg, pred, s)?.second_moment;
    }
    Ok(total / targets.len() as f64)
}

/// Gradient descent on a candidate key to shrink the bias of images the
/// attacker does not own. Starts from `init` or a fresh normal draw.
pub fn key_extraction_attack(
    targets: &[AttackTarget],
    init: Option<&LatentTensor>,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
    p: &KeyExtractionParams,
) -> Result<KeyExtractionResult> {
    let first = targets.first().ok_or_else(|| Error::param("no attack targets"))?;
    let shape = first.image.shape();
    let mut k = match init {
        Some(k) => k.clone(),
        None => LatentTensor::standard_normal(shape, &mut ChaCha12Rng::seed_from_u64(p.seed)),
    };
    let loss = |k: &LatentTensor| -> Result<f64> {
        Ok(mean_moment(k, targets, cfg, pred, s)? + p.reg_weight * normality_penalty(k))
    };
    let mut trace = vec![mean_moment(&k, targets, cfg, pred, s)?];
    for _ in 0..p.iters {
        let grad = (0..k.len())
            .into_par_iter()
            .map(|i| {
                let mut plus = k.clone();
                plus.as_mut_slice()[i] += p.fd_step;
                let mut minus = k.clone();
                minus.as_mut_slice()[i] -= p.fd_step;
                Ok((loss(&plus)? - loss(&minus)?) / (2.0 * p.fd_step))
            })
            .collect::<Result<Vec<f64>>>()?;
        for (v, g) in k.as_mut_slice().iter_mut().zip(&grad) {
            *v -= p.step_size * g;
        }
        trace.push(mean_moment(&k, targets, cfg, pred, s)?);
    }
    Ok(KeyExtractionResult {
        candidate: UserKey::from_tensor("candidate", k, 0)?,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaDirection {
    /// Spoofing: pull a foreign image toward the benign watermarked cluster.
    ToBenign,
    /// Removal: push an owned image toward the non-watermarked cluster.
    ToNonwm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaAttackParams {
    pub eps_inf: f64,
    /// Weight of the image-space L2 term standing in for a perceptual loss.
    pub lambda_percep: f64,
    pub iters: usize,
    /// Signed-gradient step; defaults to eps_inf / 10.
    pub step_size: Option<f64>,
    pub fd_step: f64,
}

impl Default for PcaAttackParams {
    fn default() -> Self {
        Self {
            eps_inf: 0.09,
            lambda_percep: 0.2,
            iters: 50,
            step_size: None,
            fd_step: 1e-3,
        }
    }
}

/// Signed-gradient descent on MSE(δ(z), c) + λ·MSE(z, z₀) inside an ℓ∞ ball.
/// δ is computed with the attacker's own key, since the true key is unknown.
pub fn pca_space_attack(
    target: &AttackTarget,
    centroid: &LatentTensor,
    attacker_key: &UserKey,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
    p: &PcaAttackParams,
) -> Result<LatentTensor> {
    let z0 = &target.image;
    centroid.check_shape(z0.shape())?;
    if p.eps_inf <= 0.0 || p.iters == 0 {
        return Ok(z0.clone());
    }
    let step = p.step_size.unwrap_or(p.eps_inf / 10.0);
    let loss = |z: &LatentTensor| -> Result<f64> {
        let b = compute_bias(z, attacker_key, Some(target.timestamp), cfg, pred, s)?;
        let fit = b.delta.sub(centroid)?.mean_square();
        Ok(fit + p.lambda_percep * z.sub(z0)?.mean_square())
    };
    let mut z = z0.clone();
    for _ in 0..p.iters {
        let grad = (0..z.len())
            .into_par_iter()
            .map(|i| {
                let mut plus = z.clone();
                plus.as_mut_slice()[i] += p.fd_step;
                let mut minus = z.clone();
                minus.as_mut_slice()[i] -= p.fd_step;
                Ok(loss(&plus)? - loss(&minus)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        for ((v, g), o) in z.as_mut_slice().iter_mut().zip(&grad).zip(z0.as_slice()) {
            let dir = if *g == 0.0 { 0.0 } else { g.signum() };
            *v = (*v - step * dir).clamp(o - p.eps_inf, o + p.eps_inf).clamp(0.0, 1.0);
        }
    }
    Ok(z)
}

/// One entry of an attack manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    JpegLike { level: u8 },
    GaussianNoise { level: u8, seed: u64 },
    GaussianBlur { level: u8 },
    Brightness { level: u8 },
    PatternSpoof { strength: f64 },
    TamperPatch { ratio: f64, seed: u64 },
    MetadataTamper { seed: u64 },
    KeyExtraction { iters: usize, step_size: f64, reg_weight: f64, seed: u64 },
    PcaSpace { direction: PcaDirection, eps_inf: f64, lambda_percep: f64, iters: usize },
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        match self {
            Self::JpegLike { level }
            | Self::GaussianNoise { level, .. }
            | Self::GaussianBlur { level }
            | Self::Brightness { level } => {
                self.degradation().expect("degradation").0.parameter(*level)?;
            }
            Self::PatternSpoof { strength } if !(0.0..=1.0).contains(strength) => {
                return bad(format!("spoof strength {strength} outside [0, 1]"))
            }
            Self::TamperPatch { ratio, .. } if !(0.0..=1.0).contains(ratio) => {
                return bad(format!("tamper ratio {ratio} outside [0, 1]"))
            }
            Self::KeyExtraction { step_size, reg_weight, .. } if *step_size <= 0.0 || *reg_weight < 0.0 => {
                return bad("key extraction needs step_size > 0 and reg_weight >= 0".into())
            }
            Self::PcaSpace {
                eps_inf, lambda_percep, ..
            } if !(0.0..=1.0).contains(eps_inf) || *lambda_percep < 0.0 => {
                return bad("pca attack needs eps_inf in [0, 1] and lambda >= 0".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn degradation(&self) -> Option<(DegradationKind, u8)> {
        match *self {
            Self::JpegLike { level } => Some((DegradationKind::JpegLike, level)),
            Self::GaussianNoise { level, .. } => Some((DegradationKind::GaussianNoise, level)),
            Self::GaussianBlur { level } => Some((DegradationKind::GaussianBlur, level)),
            Self::Brightness { level } => Some((DegradationKind::Brightness, level)),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::JpegLike { .. } => "jpeg_like",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::Brightness { .. } => "brightness",
            Self::PatternSpoof { .. } => "pattern_spoof",
            Self::TamperPatch { .. } => "tamper_patch",
            Self::MetadataTamper { .. } => "metadata_tamper",
            Self::KeyExtraction { .. } => "key_extraction",
            Self::PcaSpace { .. } => "pca_space",
        }
    }

    pub fn level(&self) -> Option<u8> {
        self.degradation().map(|(_, l)| l)
    }

    /// The twelve (kind, level) degradation settings.
    pub fn all_degradations(seed: u64) -> Vec<AttackSpec> {
        let mut out = Vec::new();
        for kind in DegradationKind::ALL {
            for level in 1..=3 {
                out.push(match kind {
                    DegradationKind::JpegLike => Self::JpegLike { level },
                    DegradationKind::GaussianNoise => Self::GaussianNoise { level, seed },
                    DegradationKind::GaussianBlur => Self::GaussianBlur { level },
                    DegradationKind::Brightness => Self::Brightness { level },
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> LatentTensor {
        let data = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        LatentTensor::from_vec([1, h, w], data).unwrap()
    }

    #[test]
    fn brightness_level_one_on_gray() {
        let out = degrade(&LatentTensor::filled([1, 4, 4], 0.5), DegradationKind::Brightness, 1, 0).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(degrade(&out, DegradationKind::Brightness, 4, 0).is_err());
    }

    #[test]
    fn noise_level_one_rms() {
        let img = LatentTensor::filled([1, 64, 64], 0.5);
        let out = degrade(&img, DegradationKind::GaussianNoise, 1, 3).unwrap();
        let rms = out.sub(&img).unwrap().mean_square().sqrt();
        assert!((rms - 1.0 / 255.0).abs() < 2e-4, "{rms}");
    }

    #[test]
    fn quant_table_scaling() {
        assert_eq!(quant_table(50.0), LUMA_QUANT);
        assert!(quant_table(100.0).iter().all(|v| *v == 1.0));
        // q=25: scale 200, 16 → floor((3200+50)/100) = 32
        assert_eq!(quant_table(25.0)[0], 32.0);
        assert_eq!(quant_table(45.0)[1], ((11.0 * 5000.0 / 45.0 + 50.0) / 100.0f64).floor());
    }

    /// Direct double sum as an independent DCT oracle.
    #[test]
    fn dct_matches_direct_sum_and_inverts() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 13) % 17) as f64 - 8.0);
        let coef = dct_block(&block, false);
        let pi = std::f64::consts::PI;
        for u in 0..8 {
            for v in 0..8 {
                let cu = if u == 0 { (0.125f64).sqrt() } else { 0.5 };
                let cv = if v == 0 { (0.125f64).sqrt() } else { 0.5 };
                let mut s = 0.0;
                for x in 0..8 {
                    for y in 0..8 {
                        s += block[x * 8 + y]
                            * ((2 * x + 1) as f64 * u as f64 * pi / 16.0).cos()
                            * ((2 * y + 1) as f64 * v as f64 * pi / 16.0).cos();
                    }
                }
                assert!((coef[u * 8 + v] - cu * cv * s).abs() < 1e-12);
            }
        }
        let back = dct_block(&coef, true);
        assert!(block.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    /// Quality 100 still rounds coefficients to integers on the 0–255 scale,
    /// so the pixel error is bounded by Σ 0.5·|basis| ≤ 8/255, not float round-off.
    #[test]
    fn quality_100_error_bound() {
        let img = ramp(16, 16);
        let out = jpeg_like(&img, 100.0);
        let err = out.sub(&img).unwrap().max_abs();
        assert!(err <= 8.0 / 255.0, "{err}");
        assert!(err > 1e-9);
        let q25 = jpeg_like(&img, 25.0).sub(&img).unwrap().max_abs();
        assert!(q25 > err);
    }

    #[test]
    fn jpeg_handles_partial_blocks() {
        let img = ramp(10, 12);
        let out = jpeg_like(&img, 45.0);
        assert_eq!(out.shape(), [1, 10, 12]);
        let flat = jpeg_like(&LatentTensor::filled([1, 10, 12], 128.0 / 255.0), 25.0);
        assert!(flat.as_slice().iter().all(|v| (v - 128.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn blur_sigma_rule() {
        let mut img = LatentTensor::zeros([1, 11, 11]);
        img.set(0, 5, 5, 1.0);
        let out = blur_kernel(&img, 5);
        let sigma: f64 = 1.1;
        let g = |d: f64| (-d * d / (2.0 * sigma * sigma)).exp();
        let norm = g(0.0) + 2.0 * g(1.0) + 2.0 * g(2.0);
        assert!((out.at(0, 5, 5) - (g(0.0) / norm).powi(2)).abs() < 1e-14);
        assert!((out.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spoof_strength_zero_is_identity() {
        let a = vec![LatentTensor::filled([1, 2, 2], 0.8)];
        let b = vec![LatentTensor::filled([1, 2, 2], 0.2)];
        let t = vec![ramp(2, 2)];
        assert_eq!(pattern_spoof(&a, &b, &t, 0.0).unwrap(), t);
        let s = pattern_spoof(&a, &b, &t, 0.1).unwrap();
        assert!((s[0].at(0, 0, 1) - (t[0].at(0, 0, 1) + 0.06).min(1.0)).abs() < 1e-15);
        assert!(pattern_spoof(&[], &b, &t, 0.1).is_err());
    }

    #[test]
    fn patch_area_and_bounds() {
        let img = ramp(16, 16);
        let (out, m) = tamper_patch(&img, Rect { y: 4, x: 4, height: 8, width: 8 }, &PatchContent::Constant { value: 0.5 })
            .unwrap();
        assert_eq!(m.ratio(), 0.25);
        assert_eq!(out.at(0, 5, 5), 0.5);
        assert_eq!(out.at(0, 0, 0), img.at(0, 0, 0));
        let (same, m) =
            tamper_patch(&img, Rect { y: 0, x: 0, height: 0, width: 0 }, &PatchContent::Constant { value: 0.0 }).unwrap();
        assert_eq!((same, m.count()), (img.clone(), 0));
        assert!(tamper_patch(&img, Rect { y: 10, x: 0, height: 8, width: 1 }, &PatchContent::Constant { value: 0.0 })
            .is_err());
        assert_eq!(Rect::square_with_ratio(0.25, 16, 16, 0, 0).height, 8);
    }

    #[test]
    fn metadata_tamper_changes_timestamp_only() {
        let meta = GenerationMeta {
            user_id: "u".into(),
            timestamp: 17,
            deflection: DeflectionConfig::standard(50),
        };
        let t = metadata_tamper(&meta, 9);
        assert_ne!(t.timestamp, 17);
        assert_eq!((t.user_id.as_str(), &t.deflection), ("u", &meta.deflection));
    }

    #[test]
    fn spec_validation_and_serde() {
        assert_eq!(AttackSpec::all_degradations(0).len(), 12);
        assert!(AttackSpec::JpegLike { level: 0 }.validate().is_err());
        assert!(AttackSpec::PatternSpoof { strength: 2.0 }.validate().is_err());
        let spec = AttackSpec::PcaSpace {
            direction: PcaDirection::ToNonwm,
            eps_inf: 0.09,
            lambda_percep: 0.2,
            iters: 50,
        };
        spec.validate().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"pca_space\"") && json.contains("to_nonwm"));
        assert_eq!(serde_json::from_str::<AttackSpec>(&json).unwrap(), spec);
    }

    proptest! {
        #[test]
        fn degradations_keep_shape_and_range(
            vals in prop::collection::vec(0.0f64..=1.0, 64),
            kind in 0usize..4, level in 1u8..=3, seed in any::<u64>()
        ) {
            let img = LatentTensor::from_vec([1, 8, 8], vals).unwrap();
            let out = degrade(&img, DegradationKind::ALL[kind], level, seed).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
