//! Tamper localization from the spatial structure of the initialization bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{channel_magnitude, gaussian_blur};
use crate::inversion::{compute_bias, invert_plain};
use crate::keying::UserKey;
use crate::predictor::NoisePredictor;
use crate::sampler::{plain_start, sample, DeflectionConfig};
use crate::schedule::DiffusionSchedule;
use crate::stats::{mad, median};
use crate::tensor::{mean_of, LatentTensor, Shape};

pub const MIN_BASELINE_SAMPLES: usize = 10;

/// Consistency constant turning a MAD into a Gaussian σ estimate.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicBiasBaseline {
    pub mean: LatentTensor,
    pub n: usize,
    /// Median and MAD of |Δ_i − Δ̄| over all elements of all baseline samples.
    pub null_median: f64,
    pub null_mad: f64,
    pub schedule_hash: String,
    pub predictor_hash: String,
}

impl IntrinsicBiasBaseline {
    pub fn check_provenance(&self, pred: &dyn NoisePredictor, s: &DiffusionSchedule) -> Result<()> {
        if self.schedule_hash != s.fingerprint() || self.predictor_hash != pred.fingerprint() {
            return Err(Error::Provenance(
                "baseline was built for a different predictor or schedule".into(),
            ));
        }
        Ok(())
    }
}

/// Plain images generated from known starts; Δ_i = inversion − start.
pub fn build_baseline(
    seeds: &[u64],
    shape: Shape,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
) -> Result<IntrinsicBiasBaseline> {
    use rayon::prelude::*;
    if seeds.len() < MIN_BASELINE_SAMPLES {
        return Err(Error::Calibration(format!(
            "baseline needs at least {MIN_BASELINE_SAMPLES} samples, got {}",
            seeds.len()
        )));
    }
    let cfg = DeflectionConfig {
        gamma: 0.0,
        steps: Vec::new(),
        m_min: 0.5,
    };
    let deltas = seeds
        .par_iter()
        .map(|&seed| {
            let x_t = plain_start(seed, shape);
            let img = sample(x_t.clone(), None, &cfg, pred, s)?;
            invert_plain(&img, pred, s)?.sub(&x_t)
        })
        .collect::<Result<Vec<_>>>()?;
    baseline_from_deltas(&deltas, pred.fingerprint(), s.fingerprint())
}

pub fn baseline_from_deltas(
    deltas: &[LatentTensor],
    predictor_hash: String,
    schedule_hash: String,
) -> Result<IntrinsicBiasBaseline> {
    if deltas.is_empty() {
        return Err(Error::Calibration("empty baseline".into()));
    }
    let mean = mean_of(deltas)?;
    let mut resid = Vec::with_capacity(deltas.len() * mean.len());
    for d in deltas {
        resid.extend(d.as_slice().iter().zip(mean.as_slice()).map(|(a, b)| (a - b).abs()));
    }
    Ok(IntrinsicBiasBaseline {
        null_median: median(&resid),
        null_mad: mad(&resid),
        mean,
        n: deltas.len(),
        schedule_hash,
        predictor_hash,
    })
}

/// Ω̂ = δ(tampered) − Δ̄.
pub fn tamper_field(
    image: &LatentTensor,
    key: &UserKey,
    timestamp: u64,
    cfg: &DeflectionConfig,
    pred: &dyn NoisePredictor,
    s: &DiffusionSchedule,
    baseline: &IntrinsicBiasBaseline,
) -> Result<LatentTensor> {
    baseline.check_provenance(pred, s)?;
    let bias = compute_bias(image, key, Some(timestamp), cfg, pred, s)?;
    bias.delta.sub(&baseline.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    pub smooth_sigma: f64,
    pub smooth_radius: usize,
    /// Threshold = null median + c · 1.4826 · null MAD.
    pub c: f64,
    pub morph_radius: usize,
    pub min_area: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            smooth_sigma: 1.0,
            smooth_radius: 2,
            c: 3.0,
            morph_radius: 1,
            min_area: 4,
        }
    }
}

/// Binary h × w mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl TamperMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                expected: [1, self.height, self.width],
                actual: [1, other.height, other.width],
            });
        }
        Ok(())
    }

    /// Square-window dilation; out-of-bounds cells are ignored.
    pub fn dilate(&self, r: usize) -> Self {
        self.window(r, true)
    }

    /// Square-window erosion; out-of-bounds cells are ignored.
    pub fn erode(&self, r: usize) -> Self {
        self.window(r, false)
    }

    fn window(&self, r: usize, any: bool) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = Self::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let ys = y.saturating_sub(r)..=(y + r).min(h - 1);
                let mut hits = ys.flat_map(|yy| {
                    let xs = x.saturating_sub(r)..=(x + r).min(w - 1);
                    xs.map(move |xx| (yy, xx))
                });
                out.data[y * w + x] = if any {
                    hits.any(|(yy, xx)| self.get(yy, xx))
                } else {
                    hits.all(|(yy, xx)| self.get(yy, xx))
                };
            }
        }
        out
    }

    pub fn close(&self, r: usize) -> Self {
        self.dilate(r).erode(r)
    }

    pub fn open(&self, r: usize) -> Self {
        self.erode(r).dilate(r)
    }

    /// Clear 4-connected components with fewer than `min_area` pixels.
    pub fn drop_small_components(&self, min_area: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        let mut seen = vec![false; h * w];
        for start in 0..h * w {
            if !self.data[start] || seen[start] {
                continue;
            }
            let mut comp = vec![start];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut push = |j: usize| {
                    if self.data[j] && !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
            }
            if comp.len() < min_area {
                for i in comp {
                    out.data[i] = false;
                }
            }
        }
        out
    }
}

/// Threshold the smoothed channel magnitude of the field against the
/// baseline's null statistics, then clean up with morphology.
pub fn refine_mask(field: &LatentTensor, baseline: &IntrinsicBiasBaseline, p: &RefineParams) -> TamperMask {
    let [_, h, w] = field.shape();
    let mag = channel_magnitude(field);
    let smooth = if p.smooth_radius > 0 && p.smooth_sigma > 0.0 {
        gaussian_blur(&mag, p.smooth_sigma, p.smooth_radius)
    } else {
        mag
    };
    let thr = baseline.null_median + p.c * MAD_TO_SIGMA * baseline.null_mad;
    let raw = TamperMask {
        height: h,
        width: w,
        data: smooth.as_slice().iter().map(|v| *v > thr).collect(),
    };
    let m = if p.morph_radius > 0 {
        raw.close(p.morph_radius).open(p.morph_radius)
    } else {
        raw
    };
    m.drop_small_components(p.min_area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub f1: f64,
    pub iou: f64,
    pub auc: f64,
}

/// F1 and IoU of the mask; AUC of the unthresholded field magnitude.
/// Empty prediction and empty truth score 1.
pub fn score_mask(pred: &TamperMask, truth: &TamperMask, field: &LatentTensor) -> Result<MaskScores> {
    pred.check_same(truth)?;
    let [_, h, w] = field.shape();
    if (h, w) != (truth.height, truth.width) {
        return Err(Error::Shape {
            expected: [1, truth.height, truth.width],
            actual: [1, h, w],
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = (tp + fp + fn_) as f64;
    let (f1, iou) = if denom == 0.0 {
        (1.0, 1.0)
    } else {
        (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / denom)
    };
    let mag = channel_magnitude(field);
    Ok(MaskScores {
        f1,
        iou,
        auc: roc_auc(mag.as_slice(), &truth.data),
    })
}

/// Mann–Whitney AUC with midranks for ties; NaN if one class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| **l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Cosine similarity between two fields.
pub fn field_cosine(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    Ok(a.dot(b)? / (a.norm() * b.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::time_only_predictor;
    use crate::schedule::ScheduleParams;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> TamperMask {
        let mut m = TamperMask::empty(h, w);
        for (y, x) in on {
            m.data[y * w + x] = true;
        }
        m
    }

    fn flat_baseline(med: f64, mad: f64) -> IntrinsicBiasBaseline {
        IntrinsicBiasBaseline {
            mean: LatentTensor::zeros([1, 8, 8]),
            n: 10,
            null_median: med,
            null_mad: mad,
            schedule_hash: String::new(),
            predictor_hash: String::new(),
        }
    }

    #[test]
    fn zero_field_gives_empty_mask() {
        let m = refine_mask(&LatentTensor::zeros([1, 8, 8]), &flat_baseline(0.1, 0.05), &RefineParams::default());
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn square_is_recovered() {
        let mut f = LatentTensor::zeros([1, 16, 16]);
        for y in 4..12 {
            for x in 4..12 {
                f.set(0, y, x, 2.0);
            }
        }
        let truth = mask(16, 16, &(4..12).flat_map(|y| (4..12).map(move |x| (y, x))).collect::<Vec<_>>());
        let m = refine_mask(&f, &flat_baseline(0.1, 0.05), &RefineParams::default());
        let s = score_mask(&m, &truth, &f).unwrap();
        assert!(s.iou >= 0.5, "{s:?}");
        assert_eq!(s.auc, 1.0);
        assert!((truth.ratio() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn morphology_and_components() {
        let isolated = mask(6, 6, &[(2, 2)]);
        assert_eq!(isolated.open(1).count(), 0);
        assert_eq!(isolated.drop_small_components(2).count(), 0);
        assert_eq!(isolated.drop_small_components(1).count(), 1);
        let gap = mask(5, 5, &[(2, 1), (2, 3)]);
        assert!(gap.close(1).get(2, 2));
        // edge pixels survive erosion because out-of-bounds cells are ignored
        let corner = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(corner.erode(1).get(0, 0));
        let diag = mask(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(diag.drop_small_components(2).count(), 0);
    }

    #[test]
    fn score_identities() {
        let f = LatentTensor::zeros([1, 2, 2]);
        let a = mask(2, 2, &[(0, 0)]);
        let b = mask(2, 2, &[(1, 1)]);
        let s = score_mask(&a, &a, &f).unwrap();
        assert_eq!((s.f1, s.iou), (1.0, 1.0));
        let s = score_mask(&a, &b, &f).unwrap();
        assert_eq!((s.f1, s.iou), (0.0, 0.0));
        assert!(score_mask(&a, &mask(3, 2, &[]), &f).is_err());
    }

    #[test]
    fn auc_oracle() {
        // pairwise count: 3 pos × 2 neg, one tie
        let scores = [0.9, 0.5, 0.3, 0.5, 0.1];
        let labels = [true, true, true, false, false];
        // pairs (pos > neg): 0.9>0.5,0.9>0.1,0.5=0.5(½),0.5>0.1,0.3<0.5,0.3>0.1 → 4.5/6
        assert!((roc_auc(&scores, &labels) - 0.75).abs() < 1e-15);
        assert!(roc_auc(&scores, &[false; 5]).is_nan());
    }

    #[test]
    fn time_only_baseline_is_zero() {
        let s = ScheduleParams::default().build().unwrap();
        let pred = time_only_predictor(1);
        let seeds: Vec<u64> = (0..12).collect();
        let b = build_baseline(&seeds, [1, 4, 4], &pred, &s).unwrap();
        assert!(b.mean.max_abs() < 1e-9);
        assert!(build_baseline(&seeds[..5], [1, 4, 4], &pred, &s).is_err());
        let other = time_only_predictor(2);
        assert!(matches!(b.check_provenance(&other, &s), Err(Error::Provenance(_))));
    }

    proptest! {
        #[test]
        fn raising_c_never_grows_mask(vals in prop::collection::vec(0.0f64..2.0, 64), c in 0.0f64..5.0, dc in 0.0f64..3.0) {
            let f = LatentTensor::from_vec([1, 8, 8], vals).unwrap();
            let b = flat_baseline(0.3, 0.1);
            // without morphology the thresholded set is monotone in c
            let p = RefineParams { c, morph_radius: 0, min_area: 0, ..Default::default() };
            let lo = refine_mask(&f, &b, &p);
            let hi = refine_mask(&f, &b, &RefineParams { c: c + dc, ..p });
            prop_assert!(hi.data.iter().zip(&lo.data).all(|(h, l)| !h || *l));
        }
    }
}
