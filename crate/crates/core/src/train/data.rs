//! Datasets, the synthetic grating benchmark, normalization and augmentation.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::IMAGE_CHANNELS;
use crate::multipath::mix_seed;
use crate::tensor::{Result, Tensor, TensorError};

/// Indexed labelled images, each `H×W×3`.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `(height, width)`.
    fn image_size(&self) -> (usize, usize);
    fn sample(&self, index: usize) -> Result<(Tensor<f32>, usize)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Result<Vec<usize>> {
        (0..self.len()).map(|i| self.sample(i).map(|s| s.1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    images: Vec<Tensor<f32>>,
    labels: Vec<usize>,
    num_classes: usize,
    size: (usize, usize),
}

impl InMemoryDataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| TensorError::invalid("dataset", "no samples"))?
            .shape()
            .to_vec();
        if images.len() != labels.len() {
            return Err(TensorError::invalid("dataset", "image and label counts differ"));
        }
        if first.len() != 3 || first[2] != IMAGE_CHANNELS {
            return Err(TensorError::invalid("dataset", format!("images must be H×W×3, got {first:?}")));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != first.as_slice() {
                return Err(TensorError::invalid(
                    "dataset",
                    format!("sample {i} has shape {:?}, expected {first:?}", img.shape()),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(TensorError::invalid(
                "dataset",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            size: (first[0], first[1]),
        })
    }

    pub fn collect(ds: &dyn Dataset) -> Result<Self> {
        let mut images = Vec::with_capacity(ds.len());
        let mut labels = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let (img, l) = ds.sample(i)?;
            images.push(img);
            labels.push(l);
        }
        Self::new(images, labels, ds.num_classes())
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn image_size(&self) -> (usize, usize) {
        self.size
    }

    fn sample(&self, index: usize) -> Result<(Tensor<f32>, usize)> {
        Ok((self.images[index].clone(), self.labels[index]))
    }
}

/// Class-conditioned sinusoid gratings plus Gaussian pixel noise.
///
/// Class `c` owns the integer frequency bin nearest to radius `r` at angle
/// `πc/C`, with `r` alternating between the two radii. Each sample draws a
/// random phase; all channels carry the same grating and independent noise.
/// Sample `i` has label `i mod C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub amplitude: f64,
    pub radii: (f64, f64),
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, size: usize, seed: u64, noise_std: f64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            height: size,
            width: size,
            seed,
            noise_std,
            amplitude: 1.0,
            radii: (2.0, 4.0),
        }
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(ky, kx)` per class; fails if two classes share a bin (up to sign) or a
    /// bin reaches the Nyquist limit.
    pub fn class_bins(&self) -> Result<Vec<(i64, i64)>> {
        let c = self.num_classes;
        let bins: Vec<(i64, i64)> = (0..c)
            .map(|k| {
                let theta = PI * k as f64 / c as f64;
                let r = if k % 2 == 0 { self.radii.0 } else { self.radii.1 };
                ((r * theta.sin()).round() as i64, (r * theta.cos()).round() as i64)
            })
            .collect();
        for (i, &(y, x)) in bins.iter().enumerate() {
            if (y, x) == (0, 0) || 2 * y.unsigned_abs() as usize >= self.height || 2 * x.unsigned_abs() as usize >= self.width {
                return Err(TensorError::invalid("synthetic", format!("class {i} bin ({y}, {x}) is unusable")));
            }
            for &(y2, x2) in &bins[..i] {
                if (y, x) == (y2, x2) || (y, x) == (-y2, -x2) {
                    return Err(TensorError::invalid(
                        "synthetic",
                        format!("class {i} shares bin ({y}, {x}) with another class"),
                    ));
                }
            }
        }
        Ok(bins)
    }

    /// Deterministic in `(self, index)`.
    pub fn generate(&self, index: usize) -> Result<(Tensor<f32>, usize)> {
        if self.num_classes < 2 || index >= self.len() {
            return Err(TensorError::invalid("synthetic", format!("index {index} out of range")));
        }
        let label = index % self.num_classes;
        let (ky, kx) = self.class_bins()?[label];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, index as u64]));
        let phase = rng.gen_range(0.0..2.0 * PI);
        let noise = Normal::new(0.0, self.noise_std)
            .map_err(|e| TensorError::invalid("synthetic", e.to_string()))?;
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(h * w * IMAGE_CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let arg = 2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64) + phase;
                let v = self.amplitude * arg.cos();
                for _ in 0..IMAGE_CHANNELS {
                    let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push((v + n) as f32);
                }
            }
        }
        Ok((Tensor::new([h, w, IMAGE_CHANNELS], data)?, label))
    }

    /// The class whose frequency bin carries the most power, summed over channels.
    pub fn oracle_predict(&self, image: &Tensor<f32>) -> Result<usize> {
        let bins = self.class_bins()?;
        let (h, w) = (self.height, self.width);
        if image.shape() != [h, w, IMAGE_CHANNELS] {
            return Err(TensorError::invalid("oracle", format!("unexpected shape {:?}", image.shape())));
        }
        let px = image.data();
        let power: Vec<f64> = bins
            .iter()
            .map(|&(ky, kx)| {
                let mut total = 0.0;
                for ch in 0..IMAGE_CHANNELS {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let arg = -2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                            let v = px[(y * w + x) * IMAGE_CHANNELS + ch] as f64;
                            re += v * arg.cos();
                            im += v * arg.sin();
                        }
                    }
                    total += re * re + im * im;
                }
                total
            })
            .collect();
        Ok(super::metrics::argmax(&power))
    }
}

impl Dataset for SyntheticSpec {
    fn len(&self) -> usize {
        SyntheticSpec::len(self)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn sample(&self, index: usize) -> Result<(Tensor<f32>, usize)> {
        self.generate(index)
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl NormStats {
    pub fn compute(ds: &dyn Dataset) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for i in 0..ds.len() {
            let (img, _) = ds.sample(i)?;
            for px in img.data().chunks(IMAGE_CHANNELS) {
                for c in 0..IMAGE_CHANNELS {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += img.numel() / IMAGE_CHANNELS;
        }
        if count == 0 {
            return Err(TensorError::invalid("normalization", "empty dataset"));
        }
        let mut out = Self::default();
        for c in 0..IMAGE_CHANNELS {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let data = img
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % IMAGE_CHANNELS;
                ((v as f64 - self.mean[c]) / self.std[c]) as f32
            })
            .collect();
        Tensor::new(img.shape(), data).expect("same shape")
    }
}

/// Training-time augmentation. Off by default: flipping a grating changes its
/// orientation, which for the synthetic benchmark changes its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augment {
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_padding: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, img: &Tensor<f32>, seed: u64) -> Tensor<f32> {
        if self.is_identity() {
            return img.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let p = self.crop_padding as isize;
        let (oy, ox) = if p > 0 {
            (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        let fh = self.hflip && rng.gen_bool(0.5);
        let fv = self.vflip && rng.gen_bool(0.5);
        let src = img.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let sy = if fv { h - 1 - y } else { y } as isize + oy;
                let sx = if fh { w - 1 - x } else { x } as isize + ox;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let (d, s) = ((y * w + x) * IMAGE_CHANNELS, (sy as usize * w + sx as usize) * IMAGE_CHANNELS);
                out[d..d + IMAGE_CHANNELS].copy_from_slice(&src[s..s + IMAGE_CHANNELS]);
            }
        }
        Tensor::new(img.shape(), out).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_pure() {
        let s = SyntheticSpec::new(8, 4, 16, 3, 0.0);
        assert_eq!(s.generate(5).unwrap(), s.generate(5).unwrap());
        assert_eq!(s.generate(13).unwrap().1, 5);
    }

    #[test]
    fn noiseless_oracle_is_perfect() {
        let s = SyntheticSpec::new(8, 10, 16, 1, 0.0);
        for i in 0..s.len() {
            let (img, label) = s.generate(i).unwrap();
            assert_eq!(s.oracle_predict(&img).unwrap(), label);
        }
    }

    #[test]
    fn colliding_bins_are_rejected() {
        let mut s = SyntheticSpec::new(16, 1, 16, 0, 0.0);
        s.radii = (1.0, 1.0);
        assert!(s.class_bins().is_err());
        assert!(SyntheticSpec::new(8, 1, 16, 0, 0.0).class_bins().is_ok());
    }

    #[test]
    fn normalization_centres_channels() {
        let s = SyntheticSpec::new(4, 8, 8, 2, 0.5);
        let stats = NormStats::compute(&s).unwrap();
        let ds = InMemoryDataset::collect(&s).unwrap();
        let normed: Vec<Tensor<f32>> = (0..ds.len()).map(|i| stats.apply(&ds.sample(i).unwrap().0)).collect();
        let renormed = InMemoryDataset::new(normed, ds.labels().unwrap(), 4).unwrap();
        let again = NormStats::compute(&renormed).unwrap();
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-5);
            assert!((again.std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn augmentation_preserves_values_without_padding() {
        let (img, _) = SyntheticSpec::new(2, 1, 10, 0, 1.0).generate(0).unwrap();
        let aug = Augment {
            crop_padding: 0,
            hflip: true,
            vflip: true,
        };
        let out = aug.apply(&img, 11);
        let mut a: Vec<f32> = img.data().to_vec();
        let mut b: Vec<f32> = out.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        assert_eq!(Augment::default().apply(&img, 11), img);
    }
}
