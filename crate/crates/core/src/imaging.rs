//! Small 2-D image helpers shared by the mixture model, attacks and localization.

use crate::tensor::LatentTensor;

/// Normalized 1-D Gaussian taps over `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution per channel with replicate ("nearest") borders.
pub fn separable_filter(img: &LatentTensor, kernel: &[f64]) -> LatentTensor {
    let [c, h, w] = img.shape();
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = LatentTensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * img.at(ch, y, clampi(x as isize + i as isize - r, w)))
                    .sum();
                tmp.set(ch, y, x, acc);
            }
        }
    }
    let mut out = LatentTensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp.at(ch, clampi(y as isize + i as isize - r, h), x))
                    .sum();
                out.set(ch, y, x, acc);
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &LatentTensor, sigma: f64, radius: usize) -> LatentTensor {
    separable_filter(img, &gaussian_kernel(sigma, radius))
}

/// L2 magnitude across channels, returned as a 1 × h × w tensor.
pub fn channel_magnitude(t: &LatentTensor) -> LatentTensor {
    let [c, h, w] = t.shape();
    let mut out = LatentTensor::zeros([1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..c).map(|ch| t.at(ch, y, x).powi(2)).sum();
            out.set(0, y, x, s.sqrt());
        }
    }
    out
}
