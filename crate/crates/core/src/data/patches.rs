use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::cube::SceneCube;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labeled pixel of the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub row: usize,
    pub col: usize,
    /// 0-based class index.
    pub label: usize,
}

/// Materialized patch pair centered on one labeled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub hsi: Tensor,
    pub lidar: Tensor,
    pub label: usize,
    pub row: usize,
    pub col: usize,
}

/// One entry per labeled pixel of a scene, each tagged train or test.
///
/// Patch tensors are cut from the scene on demand, so a dataset costs no
/// more memory than its scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    cube: SceneCube,
    patch_size: usize,
    items: Vec<PatchRef>,
    split: Vec<Split>,
    n_classes: usize,
}

/// Reflects an out-of-range index back into `0..len` without repeating the
/// edge sample (`-1 → 1`, `len → len − 2`).
fn mirror(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn cut(t: &Tensor, row: usize, col: usize, p: usize) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let half = (p / 2) as isize;
    let mut out = Vec::with_capacity(p * p * c);
    for dr in -half..=half {
        let r = mirror(row as isize + dr, h);
        for dc in -half..=half {
            let q = mirror(col as isize + dc, w);
            let i = (r * w + q) * c;
            out.extend_from_slice(&t.data()[i..i + c]);
        }
    }
    Tensor::new(&[p, p, c], out).expect("patch shape")
}

/// One patch of side `patch_size` per labeled pixel, in row-major pixel
/// order. Borders are mirror padded. Every entry starts out as test.
pub fn extract_patches(cube: &SceneCube, patch_size: usize) -> Result<PatchDataset> {
    if patch_size.is_multiple_of(2) {
        return Err(invalid("extract_patches", "patch size must be odd"));
    }
    let min_side = cube.height().min(cube.width());
    if patch_size >= 2 * min_side {
        return Err(invalid(
            "extract_patches",
            format!("patch size {patch_size} too large for a {}×{} scene", cube.height(), cube.width()),
        ));
    }
    let labels = cube.labels();
    let mut items = Vec::with_capacity(labels.labeled_count());
    for row in 0..cube.height() {
        for col in 0..cube.width() {
            let l = labels.get(row, col);
            if l != 0 {
                items.push(PatchRef {
                    row,
                    col,
                    label: l as usize - 1,
                });
            }
        }
    }
    Ok(PatchDataset {
        split: alloc::vec![Split::Test; items.len()],
        items,
        n_classes: cube.n_classes(),
        patch_size,
        cube: cube.clone(),
    })
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cube(&self) -> &SceneCube {
        &self.cube
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn items(&self) -> &[PatchRef] {
        &self.items
    }

    pub fn item(&self, i: usize) -> PatchRef {
        self.items[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn coords(&self, split: Split) -> Vec<(usize, usize)> {
        self.indices(split).into_iter().map(|i| (self.items[i].row, self.items[i].col)).collect()
    }

    pub fn patch(&self, i: usize) -> Patch {
        let r = self.items[i];
        Patch {
            hsi: cut(self.cube.hsi(), r.row, r.col, self.patch_size),
            lidar: cut(self.cube.lidar(), r.row, r.col, self.patch_size),
            label: r.label,
            row: r.row,
            col: r.col,
        }
    }

    /// HSI and LiDAR patches centered on any pixel of the scene, labeled or
    /// not.
    pub fn patch_at(&self, row: usize, col: usize) -> Result<(Tensor, Tensor)> {
        if row >= self.cube.height() || col >= self.cube.width() {
            return Err(invalid(
                "patch_at",
                format!("pixel ({row}, {col}) outside a {}×{} scene", self.cube.height(), self.cube.width()),
            ));
        }
        Ok((
            cut(self.cube.hsi(), row, col, self.patch_size),
            cut(self.cube.lidar(), row, col, self.patch_size),
        ))
    }

    /// Same entries and split over a different scene of the same grid, e.g.
    /// after normalization.
    pub fn with_cube(&self, cube: SceneCube) -> Result<Self> {
        if cube.labels() != self.cube.labels() {
            return Err(Error::Data("replacement scene has a different label map".into()));
        }
        Ok(Self { cube, ..self.clone() })
    }

    /// Training split given by explicit `(row, col)` coordinates; every
    /// other entry is test.
    pub fn split_fixed(mut self, train: &[(usize, usize)]) -> Result<Self> {
        let wanted: BTreeSet<(usize, usize)> = train.iter().copied().collect();
        if wanted.is_empty() {
            return Err(invalid("split_fixed", "empty training set"));
        }
        let mut found = 0;
        for (item, s) in self.items.iter().zip(self.split.iter_mut()) {
            *s = if wanted.contains(&(item.row, item.col)) {
                found += 1;
                Split::Train
            } else {
                Split::Test
            };
        }
        if found != wanted.len() {
            let missing = wanted
                .iter()
                .find(|rc| !self.items.iter().any(|it| (it.row, it.col) == **rc))
                .copied()
                .unwrap_or_default();
            return Err(Error::Data(format!(
                "training coordinate {missing:?} is not a labeled pixel"
            )));
        }
        Ok(self)
    }

    /// Draws `k` training entries per class uniformly without replacement;
    /// the rest is test.
    pub fn split_per_class<R: Rng + ?Sized>(mut self, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(invalid("split_per_class", "empty training set"));
        }
        self.split.iter_mut().for_each(|s| *s = Split::Test);
        for class in 0..self.n_classes {
            let mut members: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].label == class).collect();
            if members.len() < k {
                return Err(Error::Data(format!(
                    "class {} has {} labeled pixels, fewer than {k}",
                    class + 1,
                    members.len()
                )));
            }
            let (chosen, _) = members.partial_shuffle(rng, k);
            for &i in chosen.iter() {
                self.split[i] = Split::Train;
            }
        }
        Ok(self)
    }

    /// Keeps at most `n` test entries, chosen uniformly; the others are
    /// dropped from the dataset.
    pub fn limit_test<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Self {
        let mut test = self.indices(Split::Test);
        if test.len() <= n {
            return self;
        }
        let (keep, _) = test.partial_shuffle(rng, n);
        let keep: BTreeSet<usize> = keep.iter().copied().collect();
        let (mut items, mut split) = (Vec::new(), Vec::new());
        for (i, (&it, &s)) in self.items.iter().zip(&self.split).enumerate() {
            if s == Split::Train || keep.contains(&i) {
                items.push(it);
                split.push(s);
            }
        }
        Self { items, split, ..self }
    }

    /// Same entries with the LiDAR stream replaced by HSI data.
    pub fn hsi_only(&self) -> Self {
        Self {
            cube: self.cube.hsi_only(),
            ..self.clone()
        }
    }
}
