//! Run manifests: a flat `key=value` text file that fully determines a
//! training run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hlfusion_core::model::{Activation, ModelConfig};
use hlfusion_core::train::TrainConfig;

use crate::error::{Error, Result};

/// Parsed `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; repeated keys are rejected.
#[derive(Debug, Default)]
pub struct Pairs {
    map: BTreeMap<String, String>,
}

pub fn parse_pairs(text: &str) -> Result<Pairs> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Usage(format!("{k}: given more than once")));
        }
    }
    Ok(Pairs { map })
}

impl Pairs {
    pub fn take_str(&mut self, key: &str) -> Result<String> {
        self.map.remove(key).ok_or_else(|| Error::Usage(format!("{key}: missing")))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take_str(key)?;
        v.parse()
            .map_err(|_| Error::Usage(format!("{key}: cannot parse {v:?}")))
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        if self.map.contains_key(key) {
            self.take(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Rejects any key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Usage(format!("{k}: unknown key"))),
            None => Ok(()),
        }
    }
}

/// How the training split is chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSpec {
    /// File of `row col` training coordinates (0-based), one per line.
    TrainIndex(PathBuf),
    /// `k` random training pixels per class.
    PerClass(usize),
}

/// Which pixels the per-band min-max statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Scene,
    Train,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::Scene => "scene",
            NormMode::Train => "train",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "scene" => Some(NormMode::Scene),
            "train" => Some(NormMode::Train),
            _ => None,
        }
    }
}

/// Everything needed to reproduce a training run.
///
/// `model.hsi_channels`, `model.lidar_channels` and `model.n_classes` may be
/// 0, meaning "take it from the data". `model.seed` and `train.seed` always
/// equal `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub hsi: PathBuf,
    pub lidar: PathBuf,
    pub labels: PathBuf,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub norm: NormMode,
    /// Keep only the first this many LiDAR bands.
    pub lidar_bands: Option<usize>,
    /// Feed HSI to both streams.
    pub hsi_only: bool,
}

impl RunManifest {
    pub fn new(hsi: PathBuf, lidar: PathBuf, labels: PathBuf, split: SplitSpec, out: PathBuf) -> Self {
        let mut m = Self {
            hsi,
            lidar,
            labels,
            split,
            model: ModelConfig {
                hsi_channels: 0,
                lidar_channels: 0,
                n_classes: 0,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            seed: 0,
            out,
            norm: NormMode::Scene,
            lidar_bands: None,
            hsi_only: false,
        };
        m.set_seed(0);
        m
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("hsi", &self.hsi.display());
        put("lidar", &self.lidar.display());
        put("labels", &self.labels.display());
        match &self.split {
            SplitSpec::TrainIndex(p) => put("train_idx", &p.display()),
            SplitSpec::PerClass(k) => put("per_class", k),
        }
        put("norm", &self.norm.name());
        if let Some(n) = self.lidar_bands {
            put("lidar_bands", &n);
        }
        put("hsi_only", &self.hsi_only);
        put("stacks", &m.n_stacks);
        put("embed", &m.embed_dim);
        put("patch", &m.patch_size);
        put("hsi_channels", &m.hsi_channels);
        put("lidar_channels", &m.lidar_channels);
        put("n_classes", &m.n_classes);
        put("dropout", &m.dropout_rate);
        put("activation", &m.activation.name());
        put("ln_eps", &m.ln_eps);
        put("lr", &t.learning_rate);
        put("epochs", &t.epochs);
        put("batch", &t.batch_size);
        put("adam_beta1", &t.adam_beta1);
        put("adam_beta2", &t.adam_beta2);
        put("adam_eps", &t.adam_eps);
        put("eval_every", &t.eval_every);
        put("seed", &self.seed);
        put("out", &self.out.display());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = parse_pairs(text)?;
        let split = match (p.take_opt::<PathBuf>("train_idx")?, p.take_opt::<usize>("per_class")?) {
            (Some(path), None) => SplitSpec::TrainIndex(path),
            (None, Some(k)) => SplitSpec::PerClass(k),
            _ => return Err(Error::Usage("train_idx/per_class: exactly one must be given".into())),
        };
        let mut m = Self::new(p.take("hsi")?, p.take("lidar")?, p.take("labels")?, split, p.take("out")?);
        if let Some(v) = p.take_opt::<String>("norm")? {
            m.norm = NormMode::from_name(&v).ok_or_else(|| Error::Usage(format!("norm: unknown value {v:?}")))?;
        }
        m.lidar_bands = p.take_opt("lidar_bands")?;
        m.hsi_only = p.take_opt("hsi_only")?.unwrap_or(false);
        let model = &mut m.model;
        let train = &mut m.train;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = p.take_opt($key)? {
                    $field = v;
                }
            };
        }
        set!("stacks", model.n_stacks);
        set!("embed", model.embed_dim);
        set!("patch", model.patch_size);
        set!("hsi_channels", model.hsi_channels);
        set!("lidar_channels", model.lidar_channels);
        set!("n_classes", model.n_classes);
        set!("dropout", model.dropout_rate);
        set!("ln_eps", model.ln_eps);
        set!("lr", train.learning_rate);
        set!("epochs", train.epochs);
        set!("batch", train.batch_size);
        set!("adam_beta1", train.adam_beta1);
        set!("adam_beta2", train.adam_beta2);
        set!("adam_eps", train.adam_eps);
        set!("eval_every", train.eval_every);
        if let Some(v) = p.take_opt::<String>("activation")? {
            model.activation =
                Activation::from_name(&v).ok_or_else(|| Error::Usage(format!("activation: unknown value {v:?}")))?;
        }
        let seed = p.take_opt("seed")?.unwrap_or(0);
        m.set_seed(seed);
        p.finish()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Reads `row col` pairs (0-based, whitespace or comma separated), one per
/// line.
pub fn read_train_index(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let parsed = match nums.as_slice() {
            [r, c] => r.parse().ok().zip(c.parse().ok()),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| Error::format(path, format!("line {}: expected `row col`", n + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunManifest {
        let mut m = RunManifest::new(
            "h.cube".into(),
            "l.cube".into(),
            "y.cube".into(),
            SplitSpec::PerClass(10),
            "run".into(),
        );
        m.model.n_stacks = 2;
        m.model.dropout_rate = 0.1;
        m.train.learning_rate = 1e-3;
        m.lidar_bands = Some(1);
        m.set_seed(42);
        m
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        let back = RunManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), m.to_text());
    }

    #[test]
    fn missing_split_and_unknown_keys_are_usage_errors() {
        let text = sample().to_text();
        let no_split = text.replace("per_class=10\n", "");
        assert!(matches!(RunManifest::from_text(&no_split), Err(Error::Usage(m)) if m.contains("per_class")));
        let extra = format!("{text}colour=red\n");
        assert!(matches!(RunManifest::from_text(&extra), Err(Error::Usage(m)) if m.contains("colour")));
        let bad = text.replace("lr=0.001", "lr=fast");
        assert!(matches!(RunManifest::from_text(&bad), Err(Error::Usage(m)) if m.starts_with("lr")));
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(parse_pairs("a=1\na=2\n").is_err());
        assert!(parse_pairs("# comment\n\na = 1\n").is_ok());
    }
}
