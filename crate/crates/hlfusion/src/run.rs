//! Command implementations shared by the binary and the tests.

use std::fs;
use std::path::Path;

use hlfusion_core::data::{extract_patches, normalize_with, NormScope, PatchDataset, Split};
use hlfusion_core::gradcheck::{check_model, random_batch, GradCheckConfig, GradCheckReport};
use hlfusion_core::model::{FusionModel, ModelConfig};
use hlfusion_core::tape::BackwardFault;
use hlfusion_core::train::{evaluate, train, EpochRecord, Metrics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::cube_file::load_cube;
use crate::error::{Error, Result};
use crate::history::HistoryWriter;
use crate::manifest::{read_train_index, RunManifest, SplitSpec};
use crate::report::{ablation_header, ablation_row, metrics_table};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const ABLATION_FILE: &str = "ablation.txt";

/// Loads, splits and normalizes the scene named by `m`. Without `split`
/// every labeled pixel is a test entry.
pub fn prepare_data(m: &RunManifest, split: bool) -> Result<PatchDataset> {
    let mut cube = load_cube(&m.hsi, &m.lidar, &m.labels)?;
    if let Some(n) = m.lidar_bands {
        cube = cube.with_lidar_channels(n)?;
    }
    let mut ds = extract_patches(&cube, m.model.patch_size)?;
    if split {
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        ds = match &m.split {
            SplitSpec::TrainIndex(path) => ds.split_fixed(&read_train_index(path)?)?,
            SplitSpec::PerClass(k) => ds.split_per_class(*k, &mut rng)?,
        };
    }
    let train_px = ds.coords(Split::Train);
    let scope = match m.norm {
        crate::manifest::NormMode::Train if !train_px.is_empty() => NormScope::Pixels(&train_px),
        _ => NormScope::FullScene,
    };
    let ds = ds.with_cube(normalize_with(ds.cube(), scope))?;
    Ok(if m.hsi_only { ds.hsi_only() } else { ds })
}

/// Fills the data-derived fields of `config` and checks the given ones.
pub fn resolve_config(config: &ModelConfig, data: &PatchDataset) -> Result<ModelConfig> {
    let cube = data.cube();
    let mut c = config.clone();
    for (name, want, have) in [
        ("HSI channels", &mut c.hsi_channels, cube.hsi_channels()),
        ("LiDAR channels", &mut c.lidar_channels, cube.lidar_channels()),
        ("classes", &mut c.n_classes, data.n_classes()),
    ] {
        if *want == 0 {
            *want = have;
        } else if *want != have {
            return Err(Error::Data(format!("model expects {want} {name}, data has {have}")));
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub history: Vec<EpochRecord>,
    /// Test split metrics, or training split metrics when there is no test
    /// split.
    pub metrics: Metrics,
}

/// Trains per manifest and writes the manifest, checkpoint, history and
/// metrics table into `m.out`.
pub fn train_run(m: &RunManifest, echo: bool) -> Result<TrainOutcome> {
    let data = prepare_data(m, true)?;
    let config = resolve_config(&m.model, &data)?;
    m.train.validate()?;
    fs::create_dir_all(&m.out).map_err(|e| Error::io(&m.out, e))?;
    let mut resolved = m.clone();
    resolved.model = config.clone();
    resolved.save(&m.out.join(MANIFEST_FILE))?;

    let mut model = FusionModel::new(config)?;
    let mut log = HistoryWriter::create(&m.out.join(HISTORY_FILE), echo)?;
    let history = train(&mut model, &data, &m.train, &mut log);
    log.finish()?;
    let history = history?;
    checkpoint::save(&model, &m.out.join(MODEL_FILE))?;

    let test = data.indices(Split::Test);
    let idx = if test.is_empty() { data.indices(Split::Train) } else { test };
    let metrics = evaluate(&model, &data, &idx)?;
    write_text(&m.out.join(METRICS_FILE), &metrics_table(&metrics))?;
    Ok(TrainOutcome { model, history, metrics })
}

/// Which entries an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

/// Checks that `model` was built for the channel layout of `data`.
pub fn check_compatible(model: &FusionModel, data: &PatchDataset) -> Result<()> {
    let c = model.config();
    let cube = data.cube();
    if c.hsi_channels != cube.hsi_channels() || c.lidar_channels != cube.lidar_channels() {
        return Err(Error::Data(format!(
            "model has {} HSI + {} LiDAR channels, data has {} HSI + {} LiDAR channels",
            c.hsi_channels,
            c.lidar_channels,
            cube.hsi_channels(),
            cube.lidar_channels()
        )));
    }
    if c.n_classes < data.n_classes() {
        return Err(Error::Data(format!(
            "model has {} classes, data has {}",
            c.n_classes,
            data.n_classes()
        )));
    }
    Ok(())
}

pub fn eval_run(model: &FusionModel, data: &PatchDataset, split: EvalSplit) -> Result<Metrics> {
    check_compatible(model, data)?;
    let idx: Vec<usize> = match split {
        EvalSplit::Train => data.indices(Split::Train),
        EvalSplit::Test => data.indices(Split::Test),
        EvalSplit::All => (0..data.len()).collect(),
    };
    Ok(evaluate(model, data, &idx)?)
}

/// Options of the gradient check command.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub model: ModelConfig,
    pub batch: usize,
    pub check: GradCheckConfig,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_stacks: 2,
                embed_dim: 4,
                patch_size: 5,
                hsi_channels: 6,
                lidar_channels: 1,
                n_classes: 3,
                dropout_rate: 0.5,
                seed: 0,
                ..ModelConfig::default()
            },
            batch: 2,
            check: GradCheckConfig::default(),
            fault: None,
        }
    }
}

/// Builds the configured model and a random batch from the model seed and
/// runs the finite-difference check.
pub fn gradcheck_run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = FusionModel::new(opts.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.model.seed);
    let batch = random_batch(&opts.model, opts.batch, &mut rng);
    Ok(check_model(&model, &batch, &opts.check, opts.fault)?)
}

pub fn gradcheck_text(report: &GradCheckReport) -> String {
    let mut s = String::new();
    for g in &report.groups {
        let verdict = if g.worst_rel_err < report.threshold { "ok" } else { "FAIL" };
        s += &format!("{:<32} {:>6} {:>12.3e} {verdict}\n", g.name, g.entries, g.worst_rel_err);
    }
    let overall = if report.passed() { "PASS" } else { "FAIL" };
    s += &format!("{overall} worst {:.3e} threshold {:.0e}\n", report.worst(), report.threshold);
    s
}

/// Hyperparameter swept by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Stacks,
    Embed,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Stacks => "stacks",
            Axis::Embed => "embed",
        }
    }

    fn apply(self, m: &mut RunManifest, value: usize) {
        match self {
            Axis::Stacks => m.model.n_stacks = value,
            Axis::Embed => m.model.embed_dim = value,
        }
    }
}

/// Retrains from scratch once per value, each run in its own subdirectory
/// of `base.out`. Rows of the result table are appended to
/// `base.out/ablation.txt` as runs finish, so a failing run leaves the
/// earlier rows in place.
pub fn ablate_run(base: &RunManifest, axis: Axis, values: &[usize], echo: bool) -> Result<Vec<(usize, f64)>> {
    if values.is_empty() {
        return Err(Error::Usage("values: none given".into()));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(Error::Usage(format!("values: {v} given more than once")));
        }
        let mut probe = base.clone();
        axis.apply(&mut probe, *v);
        let mut c = probe.model;
        // Channel counts may still be unresolved; only the swept field matters here.
        c.hsi_channels = c.hsi_channels.max(1);
        c.lidar_channels = c.lidar_channels.max(1);
        c.n_classes = c.n_classes.max(2);
        c.validate()?;
    }
    fs::create_dir_all(&base.out).map_err(|e| Error::io(&base.out, e))?;
    let table = base.out.join(ABLATION_FILE);
    write_text(&table, &format!("{}\n", ablation_header(axis.name())))?;
    let mut rows = Vec::new();
    for &v in values {
        let mut m = base.clone();
        axis.apply(&mut m, v);
        m.out = base.out.join(format!("{}-{v}", axis.name()));
        let outcome = train_run(&m, echo)?;
        let oa = outcome.metrics.overall_accuracy;
        append_text(&table, &format!("{}\n", ablation_row(v, oa)))?;
        rows.push((v, oa));
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Manifest and checkpoint of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(RunManifest, FusionModel)> {
    let m = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let model = checkpoint::load(&dir.join(MODEL_FILE))?;
    Ok((m, model))
}
