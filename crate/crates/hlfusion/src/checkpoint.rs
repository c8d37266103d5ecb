//! Model checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "HLFMODEL"
//! version    u32      1
//! config     u32 byte length, then UTF-8 `key=value` lines (see `config_to_text`)
//! tensors    u32 count, then per tensor:
//!              u32 name length, UTF-8 name,
//!              u32 rank, rank × u32 dims,
//!              product(dims) × f64 values (row-major)
//! ```
//!
//! Tensors appear in the model's parameter order. Values are stored bit for
//! bit, so a save/load cycle reproduces the model exactly.

use std::fs;
use std::path::Path;

use hlfusion_core::model::{Activation, FusionModel, ModelConfig};
use hlfusion_core::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::manifest::{parse_pairs, Pairs};

pub const MAGIC: &[u8; 8] = b"HLFMODEL";
pub const VERSION: u32 = 1;

/// `key=value` text form of a model configuration.
pub fn config_to_text(c: &ModelConfig) -> String {
    format!(
        "n_stacks={}\nembed_dim={}\npatch_size={}\nhsi_channels={}\nlidar_channels={}\nn_classes={}\n\
         dropout_rate={:?}\nactivation={}\nln_eps={:?}\nseed={}\n",
        c.n_stacks,
        c.embed_dim,
        c.patch_size,
        c.hsi_channels,
        c.lidar_channels,
        c.n_classes,
        c.dropout_rate,
        c.activation.name(),
        c.ln_eps,
        c.seed
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut p: Pairs = parse_pairs(text)?;
    let activation = p.take_str("activation")?;
    let config = ModelConfig {
        n_stacks: p.take("n_stacks")?,
        embed_dim: p.take("embed_dim")?,
        patch_size: p.take("patch_size")?,
        hsi_channels: p.take("hsi_channels")?,
        lidar_channels: p.take("lidar_channels")?,
        n_classes: p.take("n_classes")?,
        dropout_rate: p.take("dropout_rate")?,
        activation: Activation::from_name(&activation)
            .ok_or_else(|| Error::Usage(format!("activation: unknown value {activation}")))?,
        ln_eps: p.take("ln_eps")?,
        seed: p.take("seed")?,
    };
    p.finish()?;
    Ok(config)
}

pub fn encode(model: &FusionModel) -> Vec<u8> {
    let mut out = Vec::new();
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_to_text(model.config());
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.params().len());
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<FusionModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let config = config_from_text(&r.string()?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(FusionModel::from_parts(config, params)?)
}

pub fn save(model: &FusionModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FusionModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
