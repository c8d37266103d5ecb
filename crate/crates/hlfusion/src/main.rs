use std::path::{Path, PathBuf};
use std::process;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hlfusion::checkpoint;
use hlfusion::cube_file::{convert_bands, convert_labels, labels_raster, write_raster, Raster};
use hlfusion::error::{Error, ExitCode, Result};
use hlfusion::manifest::{NormMode, RunManifest, SplitSpec};
use hlfusion::map::{predict_map, write_map};
use hlfusion::report::{ablation_header, ablation_row, metrics_table};
use hlfusion::run::{
    ablate_run, eval_run, gradcheck_run, gradcheck_text, load_run, prepare_data, train_run, write_text, Axis,
    EvalSplit, GradCheckOptions,
};
use hlfusion_core::data::{synth_scene, SynthConfig};
use hlfusion_core::model::{Activation, FusionModel};
use hlfusion_core::tape::{BackwardFault, OpKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two-stream HSI + LiDAR patch classifier with stacked cross-modal
/// encoder/decoder blocks.
#[derive(Parser)]
#[command(name = "hlfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes manifest, checkpoint, history and metrics to --out.
    Train(TrainCmd),
    /// Per-class and overall accuracy of a trained model.
    Eval(EvalCmd),
    /// Check every parameter gradient against finite differences.
    Gradcheck(GradcheckCmd),
    /// Retrain once per value of one hyperparameter and tabulate OA.
    Ablate(AblateCmd),
    /// Write a classification map as a PPM image plus legend.
    Map(MapCmd),
    /// Convert whitespace-separated text matrices into a cube file.
    Convert(ConvertCmd),
    /// Generate a synthetic co-registered scene.
    Synth(SynthCmd),
}

#[derive(Args, Default, Clone)]
struct DataArgs {
    /// HSI cube file.
    #[arg(long)]
    hsi: Option<PathBuf>,
    /// LiDAR cube file.
    #[arg(long)]
    lidar: Option<PathBuf>,
    /// Label cube file (int32, 0 = unlabeled).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// File of `row col` training coordinates.
    #[arg(long, conflicts_with = "per_class")]
    train_idx: Option<PathBuf>,
    /// Draw this many training pixels per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Min-max statistics from the whole scene or the training pixels.
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Keep only the first N LiDAR bands.
    #[arg(long, value_name = "N")]
    lidar_bands: Option<usize>,
    /// Feed HSI to both streams.
    #[arg(long, visible_alias = "single-modality")]
    hsi_only: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Scene,
    Train,
}

#[derive(Args, Default, Clone)]
struct RunArgs {
    /// Start from this manifest; other flags override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Number of encoder/decoder stacks.
    #[arg(long)]
    stacks: Option<usize>,
    /// Embedding dimension (filters per block).
    #[arg(long)]
    embed: Option<usize>,
    /// Patch side (odd).
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Evaluate the test split every N epochs (0 = never).
    #[arg(long, value_name = "N")]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print each epoch to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalCmd {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "model")]
    run: Option<PathBuf>,
    /// Checkpoint file; needs the data flags.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Seed of a --per-class split.
    #[arg(long)]
    seed: Option<u64>,
    /// Entries to score; defaults to test, or all without a split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long)]
    stacks: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    hsi_channels: Option<usize>,
    #[arg(long)]
    lidar_channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Patches in the random batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long)]
    threshold: Option<f64>,
    /// Scale the backward rule of one operation by 1.5 (test fixture).
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Matmul,
    Softmax,
    LayerNorm,
    Conv,
    Dense,
    Relu,
    Pool,
}

impl FaultArg {
    fn fault(self) -> BackwardFault {
        let op = match self {
            FaultArg::Matmul => OpKind::Matmul,
            FaultArg::Softmax => OpKind::SoftmaxRows,
            FaultArg::LayerNorm => OpKind::LayerNorm,
            FaultArg::Conv => OpKind::Conv2dSame,
            FaultArg::Dense => OpKind::Dense,
            FaultArg::Relu => OpKind::Relu,
            FaultArg::Pool => OpKind::GlobalAvgPool,
        };
        BackwardFault {
            op,
            input: 0,
            factor: 1.5,
        }
    }
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values of the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Stacks,
    Embed,
}

#[derive(Args)]
struct MapCmd {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "model")]
    run: Option<PathBuf>,
    /// Checkpoint file; needs --hsi, --lidar and --labels.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Predict every pixel, not only labeled ones.
    #[arg(long)]
    dense: bool,
    /// Output image (.ppm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "input")]
struct ConvertInput {
    /// One text matrix per band, in band order.
    #[arg(long, num_args = 1.., group = "input")]
    bands: Vec<PathBuf>,
    /// Text matrix of integer labels.
    #[arg(long, group = "input")]
    labels_text: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertCmd {
    #[command(flatten)]
    input: ConvertInput,
    /// Output cube file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthCmd {
    /// Output directory; receives hsi.cube, lidar.cube and labels.cube.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    hsi_channels: usize,
    #[arg(long, default_value_t = 2)]
    lidar_channels: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Side of the square label regions.
    #[arg(long, default_value_t = 16)]
    block: usize,
    /// Fraction of regions left unlabeled.
    #[arg(long, default_value_t = 0.0)]
    unlabeled: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn split_spec(d: &DataArgs) -> Option<SplitSpec> {
    match (&d.train_idx, d.per_class) {
        (Some(p), _) => Some(SplitSpec::TrainIndex(p.clone())),
        (None, Some(k)) => Some(SplitSpec::PerClass(k)),
        (None, None) => None,
    }
}

fn apply_data(m: &mut RunManifest, d: &DataArgs) {
    if let Some(p) = &d.hsi {
        m.hsi = p.clone();
    }
    if let Some(p) = &d.lidar {
        m.lidar = p.clone();
    }
    if let Some(p) = &d.labels {
        m.labels = p.clone();
    }
    if let Some(s) = split_spec(d) {
        m.split = s;
    }
    if let Some(n) = d.norm {
        m.norm = match n {
            NormArg::Scene => NormMode::Scene,
            NormArg::Train => NormMode::Train,
        };
    }
    if d.lidar_bands.is_some() {
        m.lidar_bands = d.lidar_bands;
    }
    m.hsi_only |= d.hsi_only;
}

fn manifest_from(a: &RunArgs) -> Result<RunManifest> {
    let mut m = match &a.manifest {
        Some(path) => RunManifest::load(path)?,
        None => {
            let d = &a.data;
            let split = split_spec(d).ok_or_else(|| Error::Usage("--train-idx or --per-class is required".into()))?;
            RunManifest::new(
                required(&d.hsi, "hsi")?,
                required(&d.lidar, "lidar")?,
                required(&d.labels, "labels")?,
                split,
                required(&a.out, "out")?,
            )
        }
    };
    apply_data(&mut m, &a.data);
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.stacks, m.model.n_stacks);
    set!(a.embed, m.model.embed_dim);
    set!(a.patch, m.model.patch_size);
    set!(a.dropout, m.model.dropout_rate);
    set!(a.lr, m.train.learning_rate);
    set!(a.epochs, m.train.epochs);
    set!(a.batch, m.train.batch_size);
    set!(a.eval_every, m.train.eval_every);
    set!(a.out.clone(), m.out);
    if let Some(act) = a.activation {
        m.model.activation = match act {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        };
    }
    if let Some(s) = a.seed {
        m.set_seed(s);
    }
    Ok(m)
}

/// Model and manifest of an existing run, or a checkpoint plus data flags.
fn model_and_data(
    run: &Option<PathBuf>,
    model: &Option<PathBuf>,
    data: &DataArgs,
    seed: Option<u64>,
) -> Result<(FusionModel, RunManifest, bool)> {
    if let Some(dir) = run {
        let (mut m, model) = load_run(dir)?;
        apply_data(&mut m, data);
        if let Some(s) = seed {
            m.set_seed(s);
        }
        return Ok((model, m, true));
    }
    let path = model
        .as_ref()
        .ok_or_else(|| Error::Usage("--run or --model is required".into()))?;
    let model = checkpoint::load(path)?;
    let split = split_spec(data);
    let mut m = RunManifest::new(
        required(&data.hsi, "hsi")?,
        required(&data.lidar, "lidar")?,
        required(&data.labels, "labels")?,
        split.clone().unwrap_or(SplitSpec::PerClass(0)),
        PathBuf::new(),
    );
    apply_data(&mut m, data);
    m.model.patch_size = model.config().patch_size;
    m.set_seed(seed.unwrap_or(0));
    Ok((model, m, split.is_some()))
}

fn cmd_train(c: TrainCmd) -> Result<()> {
    let m = manifest_from(&c.run)?;
    let outcome = train_run(&m, c.run.verbose)?;
    print!("{}", metrics_table(&outcome.metrics));
    Ok(())
}

fn cmd_eval(c: EvalCmd) -> Result<()> {
    let (model, mut m, has_split) = model_and_data(&c.run, &c.model, &c.data, c.seed)?;
    m.model.patch_size = model.config().patch_size;
    let data = prepare_data(&m, has_split)?;
    let split = match (c.split, has_split) {
        (Some(SplitArg::Train), _) => EvalSplit::Train,
        (Some(SplitArg::Test), _) | (None, true) => EvalSplit::Test,
        (Some(SplitArg::All), _) | (None, false) => EvalSplit::All,
    };
    let metrics = eval_run(&model, &data, split)?;
    print!("{}", metrics_table(&metrics));
    Ok(())
}

fn cmd_gradcheck(c: GradcheckCmd) -> Result<bool> {
    let mut o = GradCheckOptions::default();
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(c.stacks, o.model.n_stacks);
    set!(c.embed, o.model.embed_dim);
    set!(c.patch, o.model.patch_size);
    set!(c.hsi_channels, o.model.hsi_channels);
    set!(c.lidar_channels, o.model.lidar_channels);
    set!(c.classes, o.model.n_classes);
    set!(c.dropout, o.model.dropout_rate);
    set!(c.batch, o.batch);
    set!(c.seed, o.model.seed);
    set!(c.step, o.check.step);
    set!(c.threshold, o.check.threshold);
    o.check.seed = o.model.seed;
    o.fault = c.inject_fault.map(FaultArg::fault);
    if o.batch == 0 {
        return Err(Error::Usage("--batch must be positive".into()));
    }
    let report = gradcheck_run(&o)?;
    print!("{}", gradcheck_text(&report));
    Ok(report.passed())
}

fn cmd_ablate(c: AblateCmd) -> Result<()> {
    let m = manifest_from(&c.run)?;
    let axis = match c.axis {
        AxisArg::Stacks => Axis::Stacks,
        AxisArg::Embed => Axis::Embed,
    };
    let rows = ablate_run(&m, axis, &c.values, c.run.verbose)?;
    println!("{}", ablation_header(axis.name()));
    for (v, oa) in rows {
        println!("{}", ablation_row(v, oa));
    }
    Ok(())
}

fn cmd_map(c: MapCmd) -> Result<()> {
    let (model, m, _) = model_and_data(&c.run, &c.model, &c.data, None)?;
    let data = prepare_data(&m, false)?;
    hlfusion::run::check_compatible(&model, &data)?;
    let map = predict_map(&model, &data, c.dense)?;
    let legend = write_map(&map, model.config().n_classes, &c.out)?;
    println!("{}", c.out.display());
    println!("{}", legend.display());
    Ok(())
}

fn cmd_convert(c: ConvertCmd) -> Result<()> {
    let raster = match &c.input.labels_text {
        Some(p) => convert_labels(p)?,
        None => {
            let bands: Vec<&Path> = c.input.bands.iter().map(PathBuf::as_path).collect();
            convert_bands(&bands)?
        }
    };
    write_raster(&c.out, &raster)?;
    let [h, w, ch] = raster.shape();
    println!("{} {h}x{w}x{ch}", c.out.display());
    Ok(())
}

fn cmd_synth(c: SynthCmd) -> Result<()> {
    let cfg = SynthConfig {
        n_classes: c.classes,
        height: c.height,
        width: c.width,
        hsi_channels: c.hsi_channels,
        lidar_channels: c.lidar_channels,
        noise_sigma: c.noise,
        block_size: c.block,
        unlabeled_fraction: c.unlabeled,
    };
    let scene = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(c.seed))?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::Io {
        path: c.out.clone(),
        source: e,
    })?;
    write_raster(&c.out.join("hsi.cube"), &Raster::Float(scene.cube.hsi().clone()))?;
    write_raster(&c.out.join("lidar.cube"), &Raster::Float(scene.cube.lidar().clone()))?;
    write_raster(&c.out.join("labels.cube"), &labels_raster(scene.cube.labels()))?;
    let o = scene.oracle;
    write_text(
        &c.out.join("oracle.txt"),
        &format!(
            "hsi_only={}\nlidar_only={}\nfused={}\n",
            o.hsi_only, o.lidar_only, o.fused
        ),
    )?;
    println!("{}", c.out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => cmd_train(c).map(|_| true),
        Command::Eval(c) => cmd_eval(c).map(|_| true),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Ablate(c) => cmd_ablate(c).map(|_| true),
        Command::Map(c) => cmd_map(c).map(|_| true),
        Command::Convert(c) => cmd_convert(c).map(|_| true),
        Command::Synth(c) => cmd_synth(c).map(|_| true),
    };
    let code = match result {
        Ok(true) => ExitCode::Success,
        Ok(false) => ExitCode::GradCheck,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    process::exit(code as i32);
}
