//! Classification maps as binary PPM (P6) images with a text legend.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hlfusion_core::data::PatchDataset;
use hlfusion_core::model::{argmax, FusionModel};

use crate::error::{Error, Result};

/// Colors for classes 1, 2, ... in order; classes beyond the table reuse it
/// cyclically. Unlabeled pixels are black.
pub const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
];

pub const UNLABELED: [u8; 3] = [0, 0, 0];

/// Color of a 0-based class.
pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// Per-pixel predictions, row-major; `None` where nothing was predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<Option<usize>>,
}

impl ClassMap {
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.classes[row * self.width + col]
    }
}

/// Predicts every labeled pixel of the dataset's scene, or every pixel when
/// `dense` is set.
pub fn predict_map(model: &FusionModel, data: &PatchDataset, dense: bool) -> Result<ClassMap> {
    let cube = data.cube();
    let (height, width) = (cube.height(), cube.width());
    let mut classes = vec![None; height * width];
    for row in 0..height {
        for col in 0..width {
            if !dense && cube.labels().get(row, col) == 0 {
                continue;
            }
            let (hsi, lidar) = data.patch_at(row, col)?;
            classes[row * width + col] = Some(argmax(&model.predict(&hsi, &lidar)?));
        }
    }
    Ok(ClassMap { height, width, classes })
}

pub fn encode_ppm(map: &ClassMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for c in &map.classes {
        out.extend_from_slice(&c.map_or(UNLABELED, class_color));
    }
    out
}

/// `class r g b` lines, class 0 standing for unlabeled pixels.
pub fn legend(n_classes: usize) -> String {
    let mut s = format!("0 {} {} {} unlabeled\n", UNLABELED[0], UNLABELED[1], UNLABELED[2]);
    for c in 0..n_classes {
        let [r, g, b] = class_color(c);
        let _ = writeln!(s, "{} {r} {g} {b}", c + 1);
    }
    s
}

/// Writes the map to `path` and its legend next to it with a `.legend.txt`
/// extension. Returns the legend path.
pub fn write_map(map: &ClassMap, n_classes: usize, path: &Path) -> Result<std::path::PathBuf> {
    fs::write(path, encode_ppm(map)).map_err(|e| Error::io(path, e))?;
    let legend_path = path.with_extension("legend.txt");
    fs::write(&legend_path, legend(n_classes)).map_err(|e| Error::io(&legend_path, e))?;
    Ok(legend_path)
}

/// Parses a P6 image written by [`encode_ppm`] into `(width, height, rgb)`.
pub fn decode_ppm(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let body = bytes.get(pos + 1..)?;
    (body.len() == 3 * w * h).then_some((w, h, body))
}
