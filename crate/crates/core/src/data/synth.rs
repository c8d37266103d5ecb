//! Blocky synthetic scenes in which some classes can only be told apart by
//! combining both modalities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::cube::{LabelMap, SceneCube};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub hsi_channels: usize,
    /// Band 0 is elevation; further bands are intensity-like rasters with a
    /// random level per class.
    pub lidar_channels: usize,
    pub noise_sigma: f64,
    /// Side of the square label regions.
    pub block_size: usize,
    /// Fraction of regions left unlabeled.
    pub unlabeled_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            height: 64,
            width: 64,
            hsi_channels: 16,
            lidar_channels: 2,
            noise_sigma: 0.05,
            block_size: 16,
            unlabeled_fraction: 0.0,
        }
    }
}

/// Accuracy of a nearest-class-mean classifier on the noiseless scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestMeanReport {
    pub hsi_only: f64,
    pub lidar_only: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cube: SceneCube,
    /// 0-based classes sharing one HSI signature.
    pub hsi_ambiguous: (usize, usize),
    /// 0-based classes sharing one LiDAR signature, when there are three or
    /// more classes.
    pub lidar_ambiguous: Option<(usize, usize)>,
    pub oracle: NearestMeanReport,
}

fn nearest_mean_accuracy(pixels: &[f64], labels: &[u32], channels: usize, n_classes: usize) -> f64 {
    let mut means = vec![0.0; n_classes * channels];
    let mut counts = vec![0usize; n_classes];
    for (px, &l) in pixels.chunks_exact(channels).zip(labels) {
        if l == 0 {
            continue;
        }
        let c = l as usize - 1;
        counts[c] += 1;
        for (m, v) in means[c * channels..(c + 1) * channels].iter_mut().zip(px) {
            *m += v;
        }
    }
    for c in 0..n_classes {
        let n = counts[c].max(1) as f64;
        means[c * channels..(c + 1) * channels].iter_mut().for_each(|m| *m /= n);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (px, &l) in pixels.chunks_exact(channels).zip(labels) {
        if l == 0 {
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for c in 0..n_classes {
            let d: f64 = means[c * channels..(c + 1) * channels]
                .iter()
                .zip(px)
                .map(|(m, v)| (m - v) * (m - v))
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        total += 1;
        if best.1 == l as usize - 1 {
            hit += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

fn paint(labels: &[u32], signatures: &[Vec<f64>], background: &[f64], channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(labels.len() * channels);
    for &l in labels {
        let sig = if l == 0 { background } else { &signatures[l as usize - 1] };
        out.extend_from_slice(sig);
    }
    out
}

/// Generates a scene of square label regions. Every class has its own HSI
/// signature and LiDAR level, except that classes 0 and 1 share an HSI
/// signature and the last two classes (for three or more) share a LiDAR
/// signature. Gaussian noise of `noise_sigma` is added to every value.
pub fn synth_scene<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthScene> {
    let positive = cfg.n_classes >= 2
        && cfg.height > 0
        && cfg.width > 0
        && cfg.hsi_channels > 0
        && cfg.lidar_channels > 0
        && cfg.block_size > 0;
    if !positive || !(cfg.noise_sigma >= 0.0) || !(0.0..1.0).contains(&cfg.unlabeled_fraction) {
        return Err(Error::Data(format!("invalid synthetic scene parameters {cfg:?}")));
    }
    let n = cfg.n_classes;
    let (bh, bw) = (cfg.height.div_ceil(cfg.block_size), cfg.width.div_ceil(cfg.block_size));
    let n_blocks = bh * bw;
    let unlabeled = libm::round(cfg.unlabeled_fraction * n_blocks as f64) as usize;
    if n_blocks - unlabeled < n {
        return Err(Error::Data(format!("{n_blocks} regions cannot hold {n} classes")));
    }
    let mut block_labels: Vec<u32> = (0..n_blocks - unlabeled).map(|i| (i % n) as u32 + 1).collect();
    block_labels.extend(core::iter::repeat_n(0, unlabeled));
    block_labels.shuffle(rng);

    let labels: Vec<u32> = (0..cfg.height * cfg.width)
        .map(|i| {
            let (r, c) = (i / cfg.width, i % cfg.width);
            block_labels[(r / cfg.block_size) * bw + c / cfg.block_size]
        })
        .collect();

    let mut hsi_sig: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..cfg.hsi_channels).map(|_| rng.gen_range(0.1..0.9)).collect())
        .collect();
    let mut levels: Vec<f64> = (0..n).map(|c| 0.2 + 0.7 * c as f64 / (n - 1) as f64).collect();
    levels.shuffle(rng);
    let mut lidar_sig: Vec<Vec<f64>> = levels
        .iter()
        .map(|&lvl| {
            let mut s = vec![lvl];
            s.extend((1..cfg.lidar_channels).map(|_| rng.gen_range(0.1..0.9)));
            s
        })
        .collect();
    hsi_sig[1] = hsi_sig[0].clone();
    let lidar_ambiguous = (n >= 3).then(|| (n - 2, n - 1));
    if let Some((a, b)) = lidar_ambiguous {
        lidar_sig[b] = lidar_sig[a].clone();
    }
    let hsi_bg: Vec<f64> = (0..cfg.hsi_channels).map(|_| rng.gen_range(0.1..0.9)).collect();
    let lidar_bg = vec![0.05; cfg.lidar_channels];

    let mut hsi = paint(&labels, &hsi_sig, &hsi_bg, cfg.hsi_channels);
    let mut lidar = paint(&labels, &lidar_sig, &lidar_bg, cfg.lidar_channels);

    let fused: Vec<f64> = hsi
        .chunks_exact(cfg.hsi_channels)
        .zip(lidar.chunks_exact(cfg.lidar_channels))
        .flat_map(|(h, l)| h.iter().chain(l).copied())
        .collect();
    let oracle = NearestMeanReport {
        hsi_only: nearest_mean_accuracy(&hsi, &labels, cfg.hsi_channels, n),
        lidar_only: nearest_mean_accuracy(&lidar, &labels, cfg.lidar_channels, n),
        fused: nearest_mean_accuracy(&fused, &labels, cfg.hsi_channels + cfg.lidar_channels, n),
    };
    if oracle.fused < 1.0 || oracle.hsi_only >= 1.0 {
        return Err(Error::Data(format!("generated scene fails its separability check: {oracle:?}")));
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Data(format!("{e}")))?;
        hsi.iter_mut().chain(lidar.iter_mut()).for_each(|v| *v += noise.sample(rng));
    }

    let cube = SceneCube::new(
        Tensor::new(&[cfg.height, cfg.width, cfg.hsi_channels], hsi)?,
        Tensor::new(&[cfg.height, cfg.width, cfg.lidar_channels], lidar)?,
        LabelMap::new(cfg.height, cfg.width, labels)?,
    )?;
    Ok(SynthScene {
        cube,
        hsi_ambiguous: (0, 1),
        lidar_ambiguous,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless() -> SynthScene {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            height: 24,
            width: 24,
            block_size: 6,
            ..SynthConfig::default()
        };
        synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn pixel(t: &Tensor, i: usize) -> &[f64] {
        let c = t.shape()[2];
        &t.data()[i * c..(i + 1) * c]
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let s = noiseless();
        let labels = &s.cube.labels().data;
        for class in 1..=4u32 {
            let first = labels.iter().position(|&l| l == class).unwrap();
            for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == class) {
                assert_eq!(pixel(s.cube.hsi(), i), pixel(s.cube.hsi(), first));
                assert_eq!(pixel(s.cube.lidar(), i), pixel(s.cube.lidar(), first));
            }
        }
    }

    #[test]
    fn ambiguous_pairs_share_one_modality_only() {
        let s = noiseless();
        let labels = &s.cube.labels().data;
        let at = |class: usize| labels.iter().position(|&l| l as usize == class + 1).unwrap();
        let (a, b) = s.hsi_ambiguous;
        assert_eq!(pixel(s.cube.hsi(), at(a)), pixel(s.cube.hsi(), at(b)));
        assert_ne!(pixel(s.cube.lidar(), at(a)), pixel(s.cube.lidar(), at(b)));
        let (a, b) = s.lidar_ambiguous.unwrap();
        assert_eq!(pixel(s.cube.lidar(), at(a)), pixel(s.cube.lidar(), at(b)));
        assert_ne!(pixel(s.cube.hsi(), at(a)), pixel(s.cube.hsi(), at(b)));
    }

    #[test]
    fn fusion_is_required_by_the_oracle() {
        let s = noiseless();
        assert_eq!(s.oracle.fused, 1.0);
        assert!(s.oracle.hsi_only < 1.0);
        assert!(s.oracle.lidar_only < 1.0);
    }

    #[test]
    fn unlabeled_regions_and_validation() {
        let cfg = SynthConfig {
            height: 48,
            width: 48,
            block_size: 12,
            unlabeled_fraction: 0.25,
            ..SynthConfig::default()
        };
        let s = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let unl = s.cube.labels().data.iter().filter(|&&l| l == 0).count();
        // 16 regions of 12×12, a quarter of them unlabeled
        assert_eq!(unl, 4 * 144);
        let bad = SynthConfig {
            n_classes: 40,
            ..SynthConfig::default()
        };
        assert!(synth_scene(&bad, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
