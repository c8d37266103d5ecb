//! Raster stack files.
//!
//! Layout, little-endian throughout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `HLCUBE01` |
//! | 4     | `u32` height |
//! | 4     | `u32` width |
//! | 4     | `u32` channels |
//! | 1     | `u8` dtype: 0 = float64, 1 = int32 |
//! | …     | `height·width·channels` values, row-major (`row`, `col`, `channel`) |
//!
//! Label maps are stored with one channel and dtype int32.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use hlfusion_core::data::{LabelMap, SceneCube};
use hlfusion_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HLCUBE01";
const HEADER_LEN: usize = 8 + 4 * 3 + 1;

/// Decoded contents of one raster file.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Float(Tensor),
    Int {
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<i32>,
    },
}

impl Raster {
    pub fn shape(&self) -> [usize; 3] {
        match self {
            Raster::Float(t) => [t.shape()[0], t.shape()[1], t.shape()[2]],
            Raster::Int {
                height,
                width,
                channels,
                ..
            } => [*height, *width, *channels],
        }
    }
}

pub fn encode(raster: &Raster) -> Vec<u8> {
    let [h, w, c] = raster.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * c * 8);
    out.extend_from_slice(MAGIC);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match raster {
        Raster::Float(t) => {
            out.push(0);
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Raster::Int { data, .. } => {
            out.push(1);
            data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a raster file (bad magic or version)"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(path, format!("empty raster {h}×{w}×{c}")));
    }
    let n = h * w * c;
    let payload = &bytes[HEADER_LEN..];
    match bytes[HEADER_LEN - 1] {
        0 => {
            if payload.len() != n * 8 {
                return Err(Error::format(path, format!("expected {} payload bytes, found {}", n * 8, payload.len())));
            }
            let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Ok(Raster::Float(Tensor::new(&[h, w, c], data)?))
        }
        1 => {
            if payload.len() != n * 4 {
                return Err(Error::format(path, format!("expected {} payload bytes, found {}", n * 4, payload.len())));
            }
            let data = payload.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect();
            Ok(Raster::Int {
                height: h,
                width: w,
                channels: c,
                data,
            })
        }
        code => Err(Error::format(path, format!("unknown dtype code {code}"))),
    }
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, encode(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn labels_raster(labels: &LabelMap) -> Raster {
    Raster::Int {
        height: labels.height,
        width: labels.width,
        channels: 1,
        data: labels.data.iter().map(|&l| l as i32).collect(),
    }
}

fn float(r: Raster, path: &Path) -> Result<Tensor> {
    match r {
        Raster::Float(t) => Ok(t),
        Raster::Int { .. } => Err(Error::format(path, "expected a float64 raster")),
    }
}

/// Writes the three rasters of a scene.
pub fn save_cube(cube: &SceneCube, hsi: &Path, lidar: &Path, labels: &Path) -> Result<()> {
    write_raster(hsi, &Raster::Float(cube.hsi().clone()))?;
    write_raster(lidar, &Raster::Float(cube.lidar().clone()))?;
    write_raster(labels, &labels_raster(cube.labels()))
}

/// Reads and co-registration-checks a scene.
pub fn load_cube(hsi: &Path, lidar: &Path, labels: &Path) -> Result<SceneCube> {
    let (h, l, y) = (read_raster(hsi)?, read_raster(lidar)?, read_raster(labels)?);
    let (sh, sl, sy) = (h.shape(), l.shape(), y.shape());
    if sh[..2] != sl[..2] || sh[..2] != sy[..2] {
        return Err(Error::Data(format!(
            "rasters are not co-registered: hsi {} {sh:?}, lidar {} {sl:?}, labels {} {sy:?}",
            hsi.display(),
            lidar.display(),
            labels.display()
        )));
    }
    let label_data = match y {
        Raster::Int { channels: 1, data, .. } => data,
        _ => return Err(Error::format(labels, "labels must be a single-channel int32 raster")),
    };
    if let Some(bad) = label_data.iter().find(|&&v| v < 0) {
        return Err(Error::format(labels, format!("negative label {bad}")));
    }
    let label_map = LabelMap::new(sy[0], sy[1], label_data.into_iter().map(|v| v as u32).collect())?;
    Ok(SceneCube::new(float(h, hsi)?, float(l, lidar)?, label_map)?)
}

/// Parses a whitespace-separated dense text matrix (one raster row per
/// line; blank lines ignored) into `(height, width, values)`.
pub fn read_text_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let (mut height, mut width) = (0, None);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::format(path, format!("line {} has {} values, expected {w}", n + 1, row.len())));
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::format(path, "empty matrix"))?;
    Ok((height, width, values))
}

/// Stacks one text matrix per band into a float raster.
pub fn convert_bands(bands: &[&Path]) -> Result<Raster> {
    let mut mats = Vec::with_capacity(bands.len());
    for &b in bands {
        mats.push((b, read_text_matrix(b)?));
    }
    let (first, h, w) = match mats.first() {
        Some((p, (h, w, _))) => (*p, *h, *w),
        None => return Err(Error::Usage("no band files given".into())),
    };
    let c = mats.len();
    let mut data = vec![0.0; h * w * c];
    for (band, (path, (bh, bw, vals))) in mats.iter().enumerate() {
        if (*bh, *bw) != (h, w) {
            return Err(Error::Data(format!(
                "band {} is {bh}×{bw} but {} is {h}×{w}",
                path.display(),
                first.display()
            )));
        }
        for (i, v) in vals.iter().enumerate() {
            data[i * c + band] = *v;
        }
    }
    Ok(Raster::Float(Tensor::new(&[h, w, c], data)?))
}

/// Converts a text label matrix into an int32 label raster.
pub fn convert_labels(path: &Path) -> Result<Raster> {
    let (h, w, vals) = read_text_matrix(path)?;
    let data = vals
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && v <= i32::MAX as f64 {
                Ok(v as i32)
            } else {
                Err(Error::format(path, format!("label {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Raster::Int {
        height: h,
        width: w,
        channels: 1,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let r = Raster::Float(Tensor::new(&[1, 2, 1], vec![1.5, -2.0]).unwrap());
        let b = encode(&r);
        assert_eq!(&b[..8], b"HLCUBE01");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], 0);
        assert_eq!(&b[21..29], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 21 + 16);
        assert_eq!(decode(&b, Path::new("x")).unwrap(), r);
    }

    #[test]
    fn rejects_bad_magic_dtype_and_length() {
        let r = Raster::Int {
            height: 1,
            width: 1,
            channels: 1,
            data: vec![3],
        };
        let good = encode(&r);
        let mut bad = good.clone();
        bad[7] = b'2';
        assert!(decode(&bad, Path::new("x")).is_err());
        let mut bad = good.clone();
        bad[20] = 9;
        assert!(decode(&bad, Path::new("x")).is_err());
        assert!(decode(&good[..good.len() - 1], Path::new("x")).is_err());
    }
}
