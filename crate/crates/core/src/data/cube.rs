use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel integer class map. `0` marks an unlabeled pixel; classes are
/// `1..=n` here and `0..n` everywhere else in the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                len: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    /// Largest class label present.
    pub fn n_classes(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

/// Co-registered HSI cube, LiDAR raster stack and ground-truth map.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCube {
    hsi: Tensor,
    lidar: Tensor,
    labels: LabelMap,
}

impl SceneCube {
    /// Checks that all three rasters share the same `H×W` grid.
    pub fn new(hsi: Tensor, lidar: Tensor, labels: LabelMap) -> Result<Self> {
        let (sh, sl) = (hsi.shape(), lidar.shape());
        let ok = sh.len() == 3
            && sl.len() == 3
            && sh[..2] == sl[..2]
            && sh[0] == labels.height
            && sh[1] == labels.width;
        if !ok {
            return Err(Error::Data(format!(
                "rasters are not co-registered: hsi {sh:?}, lidar {sl:?}, labels [{}, {}]",
                labels.height, labels.width
            )));
        }
        Ok(Self { hsi, lidar, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn hsi(&self) -> &Tensor {
        &self.hsi
    }

    pub fn lidar(&self) -> &Tensor {
        &self.lidar
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn hsi_channels(&self) -> usize {
        self.hsi.shape()[2]
    }

    pub fn lidar_channels(&self) -> usize {
        self.lidar.shape()[2]
    }

    pub fn n_classes(&self) -> usize {
        self.labels.n_classes()
    }

    /// Keeps only the first `n` LiDAR channels (e.g. elevation without
    /// intensity).
    pub fn with_lidar_channels(self, n: usize) -> Result<Self> {
        let c = self.lidar_channels();
        if n == 0 || n > c {
            return Err(Error::Data(format!("cannot keep {n} of {c} lidar channels")));
        }
        let data: Vec<f64> = self.lidar.data().chunks_exact(c).flat_map(|px| px[..n].iter().copied()).collect();
        let lidar = Tensor::new(&[self.height(), self.width(), n], data)?;
        Self::new(self.hsi, lidar, self.labels)
    }

    /// Replaces the LiDAR stack with a copy of the HSI cube, so that both
    /// streams of a model see hyperspectral data only.
    pub fn hsi_only(&self) -> Self {
        Self {
            hsi: self.hsi.clone(),
            lidar: self.hsi.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Which pixels the min-max statistics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope<'a> {
    FullScene,
    /// Statistics from these `(row, col)` pixels only; values outside the
    /// observed range are clamped into `[0, 1]`.
    Pixels(&'a [(usize, usize)]),
}

fn band_minmax(t: &Tensor, width: usize, scope: NormScope<'_>) -> Vec<(f64, f64)> {
    let c = t.shape()[2];
    let mut stats = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
    let mut visit = |px: &[f64]| {
        for (s, &v) in stats.iter_mut().zip(px) {
            s.0 = s.0.min(v);
            s.1 = s.1.max(v);
        }
    };
    match scope {
        NormScope::FullScene => t.data().chunks_exact(c).for_each(&mut visit),
        NormScope::Pixels(px) => {
            for &(r, q) in px {
                let i = (r * width + q) * c;
                visit(&t.data()[i..i + c]);
            }
        }
    }
    stats
}

fn rescale(t: &Tensor, stats: &[(f64, f64)]) -> Tensor {
    let c = stats.len();
    let mut out = t.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, &(lo, hi)) in px.iter_mut().zip(stats) {
            *v = if hi > lo { ((*v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out
}

/// Per-band min-max scaling of both rasters to `[0, 1]` over the whole
/// scene. Constant bands become all zeros.
pub fn normalize(cube: &SceneCube) -> SceneCube {
    normalize_with(cube, NormScope::FullScene)
}

pub fn normalize_with(cube: &SceneCube, scope: NormScope<'_>) -> SceneCube {
    let w = cube.width();
    let hsi = rescale(&cube.hsi, &band_minmax(&cube.hsi, w, scope));
    let lidar = rescale(&cube.lidar, &band_minmax(&cube.lidar, w, scope));
    SceneCube {
        hsi,
        lidar,
        labels: cube.labels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(hsi: &[f64], c: usize, h: usize, w: usize) -> SceneCube {
        SceneCube::new(
            Tensor::new(&[h, w, c], hsi.to_vec()).unwrap(),
            Tensor::full(&[h, w, 1], 3.0).unwrap(),
            LabelMap::new(h, w, vec![1; h * w]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn min_max_band_and_constant_band() {
        let c = cube(&[2.0, 4.0, 6.0], 1, 1, 3);
        let n = normalize(&c);
        assert_eq!(n.hsi().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(n.lidar().data(), &[0.0; 3]);
    }

    #[test]
    fn co_registration_error_names_all_shapes() {
        let err = SceneCube::new(
            Tensor::zeros(&[4, 5, 2]).unwrap(),
            Tensor::zeros(&[3, 5, 1]).unwrap(),
            LabelMap::new(4, 5, vec![0; 20]).unwrap(),
        )
        .unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[4, 5, 2]") && msg.contains("[3, 5, 1]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn pixel_scope_clamps() {
        let c = cube(&[0.0, 1.0, 2.0, 3.0], 1, 1, 4);
        let n = normalize_with(&c, NormScope::Pixels(&[(0, 1), (0, 2)]));
        assert_eq!(n.hsi().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn lidar_channel_selection() {
        let c = SceneCube::new(
            Tensor::zeros(&[1, 2, 1]).unwrap(),
            Tensor::new(&[1, 2, 2], [1.0, 2.0, 3.0, 4.0].to_vec()).unwrap(),
            LabelMap::new(1, 2, vec![1, 1]).unwrap(),
        )
        .unwrap();
        let e = c.clone().with_lidar_channels(1).unwrap();
        assert_eq!(e.lidar().data(), &[1.0, 3.0]);
        assert!(c.with_lidar_channels(3).is_err());
    }
}
