//! Procedural 16×16 grayscale image classification task and its binary
//! container.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic    b"MSDS"
//! version  u32 = 1
//! height   u32
//! width    u32
//! channels u32
//! count    u64
//! samples  count * height * width * channels x f64, row-major per image
//! labels   count x u32
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"MSDS";
pub const VERSION: u32 = 1;

pub const CLASS_NAMES: [&str; 4] = ["horizontal_stripes", "vertical_stripes", "disk", "checkerboard"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    samples: Vec<f64>,
    labels: Vec<u32>,
}

/// Borrowed view of one image and its class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample<'a> {
    pub image: &'a [f64],
    pub label: usize,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let dim = height * width * channels;
        if dim == 0 || samples.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), dim],
                got: vec![samples.len()],
            });
        }
        if samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            samples,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn get(&self, i: usize) -> LabeledSample<'_> {
        let d = self.dim();
        LabeledSample {
            image: &self.samples[i * d..(i + 1) * d],
            label: self.labels[i] as usize,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = LabeledSample<'_>> {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Relabels every sample `l -> perm[l]`.
    pub fn permute_labels(&mut self, perm: &[usize]) -> Result<()> {
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Domain("label map is not a permutation".into()));
            }
        }
        for l in self.labels.iter_mut() {
            let i = *l as usize;
            if i >= perm.len() {
                return Err(Error::IndexOutOfRange { index: i, len: perm.len() });
            }
            *l = perm[i] as u32;
        }
        Ok(())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            samples: self.samples[..n * self.dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    pub fn map_images(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Dataset> {
        let samples: Vec<f64> = self.iter().flat_map(|s| f(s.image)).collect();
        Dataset::new(self.height, self.width, self.channels, samples, self.labels.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.samples.len() * 8 + self.labels.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        self.samples.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.labels.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("truncated dataset file".into());
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic; not a dataset file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(4) as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version} (expected {VERSION})")));
        }
        let (h, w, c) = (u32_at(8), u32_at(12), u32_at(16));
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let n_values = count.checked_mul(h * w * c).ok_or_else(truncated)?;
        let end_samples = n_values.checked_mul(8).and_then(|n| n.checked_add(28)).ok_or_else(truncated)?;
        if bytes.len() != end_samples + 4 * count {
            return Err(truncated());
        }
        let samples = bytes[28..end_samples]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = bytes[end_samples..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Dataset::new(h, w, c, samples, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub size: usize,
    pub noise_sigma: f64,
    pub max_shift: i64,
    /// Stripe width and checkerboard cell size, in pixels.
    pub period: usize,
    pub disk_radius: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 16,
            noise_sigma: 0.15,
            max_shift: 2,
            period: 3,
            disk_radius: 5.0,
            n_train: 4000,
            n_test: 1000,
        }
    }
}

/// Noise-free pattern of `class` translated by `(dx, dy)`.
pub fn render(cfg: &ToyConfig, class: usize, dx: i64, dy: i64) -> Vec<f64> {
    let n = cfg.size as i64;
    let p = cfg.period as i64;
    let c = (cfg.size as f64 - 1.0) / 2.0;
    let mut img = Vec::with_capacity(cfg.size * cfg.size);
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = (x - dx, y - dy);
            let on = match class {
                0 => sy.div_euclid(p) % 2 == 0,
                1 => sx.div_euclid(p) % 2 == 0,
                2 => {
                    let (fx, fy) = (sx as f64 - c, sy as f64 - c);
                    fx * fx + fy * fy <= cfg.disk_radius * cfg.disk_radius
                }
                _ => (sx.div_euclid(p) + sy.div_euclid(p)) % 2 == 0,
            };
            img.push(if on { 1.0 } else { 0.0 });
        }
    }
    img
}

/// One noisy, translated sample. Pixel noise is clipped to [0, 1].
pub fn toy_sample<R: Rng + ?Sized>(rng: &mut R, cfg: &ToyConfig) -> (Vec<f64>, usize) {
    let class = rng.random_range(0..NUM_CLASSES);
    let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("noise sigma");
    let img = render(cfg, class, dx, dy)
        .into_iter()
        .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    (img, class)
}

/// `n` samples; sample `i` draws from its own stream so any prefix is stable.
pub fn generate(seed: u64, cfg: &ToyConfig, first: usize, n: usize) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(n * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(n);
    for i in first..first + n {
        let (img, label) = toy_sample(&mut rng::stream(seed, rng::DATASET, i as u32), cfg);
        samples.extend(img);
        labels.push(label as u32);
    }
    Dataset::new(cfg.size, cfg.size, 1, samples, labels)
}

/// Disjoint train and test sets.
pub fn toy_split(seed: u64, cfg: &ToyConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        generate(seed, cfg, 0, cfg.n_train)?,
        generate(seed, cfg, cfg.n_train, cfg.n_test)?,
    ))
}

/// Per-feature affine standardization fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let n = data.len() as f64;
        let d = data.dim();
        let mut mean = vec![0.0; d];
        for s in data.iter() {
            mean.iter_mut().zip(s.image).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for s in data.iter() {
            for ((v, x), m) in var.iter_mut().zip(s.image).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, image: &[f64]) -> Vec<f64> {
        image
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_are_distinct() {
        let cfg = ToyConfig::default();
        let imgs: Vec<_> = (0..NUM_CLASSES).map(|c| render(&cfg, c, 0, 0)).collect();
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
        let h = &imgs[0];
        assert!(h[..16].iter().all(|&v| v == 1.0) && h[48..64].iter().all(|&v| v == 0.0));
        let v = &imgs[1];
        assert!((0..16).all(|r| v[r * 16] == 1.0 && v[r * 16 + 3] == 0.0));
        let disk = &imgs[2];
        assert_eq!(disk[0], 0.0);
        assert_eq!(disk[7 * 16 + 7], 1.0);
        let lit = disk.iter().filter(|&&p| p == 1.0).count() as f64;
        assert!((lit - std::f64::consts::PI * 25.0).abs() < 12.0, "{lit}");
    }

    #[test]
    fn translation_shifts_pattern() {
        let cfg = ToyConfig::default();
        let a = render(&cfg, 2, 0, 0);
        let b = render(&cfg, 2, 1, 2);
        for y in 2..16 {
            for x in 1..16 {
                assert_eq!(b[y * 16 + x], a[(y - 2) * 16 + x - 1]);
            }
        }
    }

    #[test]
    fn generation_is_reproducible_with_balanced_classes() {
        let cfg = ToyConfig::default();
        let a = generate(3, &cfg, 0, 2000).unwrap();
        assert_eq!(a, generate(3, &cfg, 0, 2000).unwrap());
        assert_eq!(a.take(10), generate(3, &cfg, 0, 10).unwrap());
        assert_ne!(a, generate(4, &cfg, 0, 2000).unwrap());
        for c in 0..NUM_CLASSES as u32 {
            let n = a.labels().iter().filter(|&&l| l == c).count();
            assert!((400..600).contains(&n), "class {c}: {n}");
        }
        assert_eq!(a.num_classes(), NUM_CLASSES);
        // Noise with clipping: pixels on a dark background average near
        // sigma / sqrt(2 pi).
        let corner: f64 = a.iter().filter(|s| s.label == 2).map(|s| s.image[0]).sum::<f64>()
            / a.iter().filter(|s| s.label == 2).count() as f64;
        assert!((corner - 0.15 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 0.01, "{corner}");
    }

    #[test]
    fn binary_round_trip_and_rejection() {
        let d = generate(5, &ToyConfig::default(), 0, 7).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), 28 + 7 * 256 * 8 + 7 * 4);
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        bad = bytes;
        bad[1] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels_and_bad_shapes() {
        assert!(Dataset::new(2, 2, 1, vec![0.0, 0.5, 1.5, 0.0], vec![0]).is_err());
        assert!(Dataset::new(2, 2, 1, vec![0.0; 3], vec![0]).is_err());
    }

    #[test]
    fn label_permutation() {
        let mut d = generate(6, &ToyConfig::default(), 0, 50).unwrap();
        let before: Vec<u32> = d.labels().to_vec();
        d.permute_labels(&[2, 3, 0, 1]).unwrap();
        for (a, b) in before.iter().zip(d.labels()) {
            assert_eq!(*b, [2, 3, 0, 1][*a as usize]);
        }
        assert!(d.permute_labels(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn standardizer_centers_features() {
        let d = generate(7, &ToyConfig::default(), 0, 500).unwrap();
        let s = Standardizer::fit(&d).unwrap();
        let z: Vec<Vec<f64>> = d.iter().map(|x| s.apply(x.image)).collect();
        for j in [0, 100, 255] {
            let m = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
            let v = z.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }
}
