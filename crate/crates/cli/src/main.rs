//! `hdrtv` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hdrtv::agcm::{train_agcm, AgcmConfig, AgcmModel, PixelMapper};
use hdrtv::checks::{gradcheck_all, GRADCHECK_TOLERANCE};
use hdrtv::color::{ColorImage, ColorSpace, Domain, TransferFn};
use hdrtv::data_io::{load_manifest, load_pair, load_png, save_png, write_manifest, ImagePair, PairSample, Split};
use hdrtv::formation::{ldr2hdr_baseline, synthetic_pairs, SyntheticSpec, SyntheticTask};
use hdrtv::le::{joint_finetune, train_le, LeConfig, LeModel};
use hdrtv::lut::{
    apply_lut, bake_lut, bake_mapper, bench_apply, export_cube, export_manifold, import_cube, manifold_points, Lattice,
    Lut3d,
};
use hdrtv::metrics::{make_color_card, transition_report, MetricReport};
use hdrtv::nn::{load_checkpoint, save_checkpoint};
use hdrtv::train::{TrainConfig, TrainSummary};

mod error;

use error::Failure;

#[derive(Parser, Serialize)]
#[command(name = "hdrtv", version, about = "SDRTV-to-HDRTV up-conversion toolkit")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0, env = "HDRTV_SEED")]
    seed: u64,
    /// Worker threads for row-parallel image operations.
    #[arg(long, global = true, env = "HDRTV_THREADS")]
    threads: Option<usize>,
    /// Dataset manifest (`sdr hdr [train|val|test]` per line).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Directory for commands that write several files.
    #[arg(long, global = true, default_value = "out", env = "HDRTV_OUT_DIR")]
    out_dir: PathBuf,
    /// Snap 16-bit HDR inputs to this code grid (10 for HDR10 content).
    #[arg(long, global = true, default_value_t = 10)]
    grid: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Generate synthetic SDR/HDR pairs and a manifest.
    Synth(SynthArgs),
    /// Train the adaptive global color mapping network.
    TrainAgcm(TrainAgcmArgs),
    /// Train local enhancement on AGCM outputs.
    TrainLe(TrainLeArgs),
    /// Jointly fine-tune AGCM and LE end to end.
    Finetune(FinetuneArgs),
    /// Convert one SDR image.
    Infer(InferArgs),
    /// Bake a trained mapping into a 3D LUT (.cube).
    BakeLut(BakeLutArgs),
    /// Apply a .cube LUT to an SDR image.
    ApplyLut(ApplyLutArgs),
    /// PSNR, SSIM and ΔE_ITP between images.
    Eval(EvalArgs),
    /// Write the color card and its transition report.
    Colorcard(ColorcardArgs),
    /// Export a LUT manifold as a point cloud.
    Manifold(ManifoldArgs),
    /// Measure single-threaded LUT throughput.
    Bench(BenchArgs),
    /// Check analytic gradients of every op against central differences.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TaskArg {
    Identity,
    Global,
    Adaptive,
    Local,
}

impl From<TaskArg> for SyntheticTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Identity => SyntheticTask::Identity,
            TaskArg::Global => SyntheticTask::Global,
            TaskArg::Adaptive => SyntheticTask::Adaptive,
            TaskArg::Local => SyntheticTask::Local,
        }
    }
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "adaptive")]
    task: TaskArg,
    /// Training pairs.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Additional validation pairs.
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
}

#[derive(Args, Serialize, Clone)]
struct Schedule {
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 250)]
    val_every: usize,
    /// Stop once validation PSNR reaches this value (dB).
    #[arg(long)]
    target_psnr: Option<f64>,
}

impl Schedule {
    fn config(&self, seed: u64, log: PathBuf) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch: self.batch,
            patch: self.patch,
            lr: self.lr,
            val_every: self.val_every,
            seed,
            target_psnr: self.target_psnr,
            log_csv: Some(log),
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Serialize)]
struct TrainAgcmArgs {
    #[command(flatten)]
    schedule: Schedule,
    /// Train the base network alone (no condition branch).
    #[arg(long)]
    base_only: bool,
}

#[derive(Args, Serialize)]
struct TrainLeArgs {
    /// Trained AGCM checkpoint whose outputs feed LE.
    #[arg(long)]
    agcm: PathBuf,
    #[arg(long, default_value_t = 24)]
    channels: usize,
    #[command(flatten)]
    schedule: Schedule,
}

#[derive(Args, Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    agcm: PathBuf,
    #[arg(long)]
    le: PathBuf,
    #[command(flatten)]
    schedule: Schedule,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum Stage {
    #[value(name = "agcm")]
    #[serde(rename = "agcm")]
    Agcm,
    #[value(name = "agcm+le")]
    #[serde(rename = "agcm+le")]
    AgcmLe,
    /// Linearize, widen primaries and PQ-encode without learning.
    #[value(name = "baseline")]
    #[serde(rename = "baseline")]
    Baseline,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long, value_enum, default_value = "agcm")]
    stage: Stage,
    #[arg(long)]
    agcm: Option<PathBuf>,
    #[arg(long)]
    le: Option<PathBuf>,
    /// 8-bit SDR PNG.
    #[arg(long)]
    input: PathBuf,
    /// 16-bit HDR PNG.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LatticeArg {
    Encoded,
    DisplayLinear,
}

impl From<LatticeArg> for Lattice {
    fn from(l: LatticeArg) -> Self {
        match l {
            LatticeArg::Encoded => Lattice::Encoded,
            LatticeArg::DisplayLinear => Lattice::DisplayLinear,
        }
    }
}

#[derive(Args, Serialize)]
struct BakeLutArgs {
    #[arg(long)]
    agcm: PathBuf,
    /// SDR image that fixes the condition vector of a conditioned model.
    #[arg(long)]
    condition: Option<PathBuf>,
    /// Nodes per axis (17, 33 or 64).
    #[arg(long, default_value_t = 33)]
    size: usize,
    #[arg(long, value_enum, default_value = "encoded")]
    lattice: LatticeArg,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct ApplyLutArgs {
    #[arg(long)]
    lut: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Prediction and reference images; omit to evaluate the manifest rows.
    images: Vec<PathBuf>,
    /// Also write the rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ColorcardArgs {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Process the card with this LUT.
    #[arg(long, conflicts_with = "agcm")]
    lut: Option<PathBuf>,
    /// Process the card with this AGCM checkpoint (condition from the card).
    #[arg(long)]
    agcm: Option<PathBuf>,
    /// Refine the AGCM output with this LE checkpoint.
    #[arg(long, requires = "agcm")]
    le: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ManifoldArgs {
    #[arg(long, conflicts_with = "agcm")]
    lut: Option<PathBuf>,
    #[arg(long)]
    agcm: Option<PathBuf>,
    #[arg(long)]
    condition: Option<PathBuf>,
    #[arg(long, default_value_t = 17)]
    size: usize,
    #[arg(long, value_enum, default_value = "encoded")]
    lattice: LatticeArg,
    /// CSV point cloud.
    #[arg(long)]
    output: PathBuf,
    /// Optional PLY point cloud.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 33)]
    size: usize,
    #[arg(long, default_value_t = 3840)]
    width: usize,
    #[arg(long, default_value_t = 2160)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    version: &'static str,
    #[serde(flatten)]
    cli: &'a Cli,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::TrainAgcm(a) => train_agcm_cmd(cli, a),
        Command::TrainLe(a) => train_le_cmd(cli, a),
        Command::Finetune(a) => finetune_cmd(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::BakeLut(a) => bake(cli, a),
        Command::ApplyLut(a) => apply(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Colorcard(a) => colorcard(cli, a),
        Command::Manifold(a) => manifold(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Gradcheck => gradcheck(cli),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

/// Writes the resolved configuration into `dir`.
fn write_run_config(cli: &Cli, dir: &Path) -> Result<(), Failure> {
    write_run_config_to(cli, &dir.join("run_config.json"))
}

/// Writes the resolved configuration next to the file `output`.
fn write_run_config_beside(cli: &Cli, output: &Path) -> Result<(), Failure> {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    write_run_config_to(cli, &output.with_file_name(name))
}

fn write_run_config_to(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let rc = RunConfig {
        version: env!("CARGO_PKG_VERSION"),
        cli,
    };
    let text = serde_json::to_string_pretty(&rc).expect("run config serializes");
    std::fs::write(path, text + "\n").map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn load_any(path: &Path, grid: u32) -> Result<ColorImage, Failure> {
    match load_png(path, 8) {
        Ok(img) => Ok(img),
        Err(hdrtv::data_io::DataError::BitDepth { found: 16, .. }) => {
            let img = load_png(path, 16)?;
            Ok(hdrtv::data_io::regrid(&img, grid)?)
        }
        Err(e) => Err(e.into()),
    }
}

fn load_sdr(path: &Path) -> Result<ColorImage, Failure> {
    Ok(load_png(path, 8)?)
}

fn save_output(img: &ColorImage, path: &Path) -> Result<(), Failure> {
    ensure_parent(path)?;
    let sdr = img.space == ColorSpace::Rec709 && matches!(img.domain, Domain::Encoded(TransferFn::Gamma(_)));
    save_png(img, path, if sdr { 8 } else { 16 })?;
    Ok(())
}

fn load_agcm(path: &Path) -> Result<AgcmModel, Failure> {
    Ok(AgcmModel::from_checkpoint(load_checkpoint(path)?)?)
}

fn load_le(path: &Path) -> Result<LeModel, Failure> {
    Ok(LeModel::from_checkpoint(load_checkpoint(path)?)?)
}

/// Loads the manifest's train and validation pairs; without `val` rows the
/// training pairs double as validation.
fn load_dataset(cli: &Cli) -> Result<(Vec<ImagePair>, Vec<ImagePair>), Failure> {
    let path = cli
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::usage("this command needs --manifest"))?;
    let samples = load_manifest(path)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in &samples {
        let pair = load_pair(s, Some(cli.grid))?;
        match s.split {
            Split::Train => train.push(pair),
            Split::Val => val.push(pair),
            Split::Test => {}
        }
    }
    if train.is_empty() {
        return Err(Failure::input(format!("{}: no training pairs", path.display())));
    }
    if val.is_empty() {
        log::warn!("manifest has no val rows; validating on the training pairs");
        val = train.clone();
    }
    Ok((train, val))
}

fn report_summary(what: &str, s: &TrainSummary) {
    println!(
        "{what}: best val PSNR {:.3} dB at iteration {} ({} iterations run)",
        s.best_val_psnr, s.best_iteration, s.iterations_run
    );
    if let Some(it) = s.reached_target_at {
        println!("{what}: target reached at iteration {it}");
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let dir = &cli.out_dir;
    create_dir(&dir.join("sdr"))?;
    create_dir(&dir.join("hdr"))?;
    let spec = SyntheticSpec::new(a.task.into(), a.count + a.val, a.width, a.height, cli.seed);
    let pairs = synthetic_pairs(&spec)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let sdr = PathBuf::from("sdr").join(format!("{i:04}.png"));
        let hdr = PathBuf::from("hdr").join(format!("{i:04}.png"));
        save_png(&p.sdr, &dir.join(&sdr), 8)?;
        save_png(&p.hdr, &dir.join(&hdr), 16)?;
        rows.push(PairSample {
            sdr_path: sdr,
            hdr_path: hdr,
            split: if i < a.count { Split::Train } else { Split::Val },
        });
    }
    write_manifest(&dir.join("manifest.txt"), &rows)?;
    write_run_config(cli, dir)?;
    println!("wrote {} pairs to {}", pairs.len(), dir.display());
    Ok(())
}

fn train_agcm_cmd(cli: &Cli, a: &TrainAgcmArgs) -> Result<(), Failure> {
    let (train, val) = load_dataset(cli)?;
    create_dir(&cli.out_dir)?;
    let cfg = a.schedule.config(cli.seed, cli.out_dir.join("agcm_log.csv"));
    let mcfg = if a.base_only {
        AgcmConfig::base_only()
    } else {
        AgcmConfig::default()
    };
    let model = AgcmModel::new(mcfg, cli.seed)?;
    println!("AGCM: {} parameters", model.param_count());
    let (model, summary) = train_agcm(model, &train, &val, &cfg)?;
    save_checkpoint(&cli.out_dir.join("agcm.ckpt"), &model.to_checkpoint())?;
    write_run_config(cli, &cli.out_dir)?;
    report_summary("AGCM", &summary);
    Ok(())
}

fn agcm_outputs(model: &AgcmModel, pairs: &[ImagePair]) -> Result<Vec<(ColorImage, ColorImage)>, Failure> {
    pairs
        .iter()
        .map(|p| Ok((model.forward(&p.sdr, None)?, p.hdr.clone())))
        .collect()
}

fn train_le_cmd(cli: &Cli, a: &TrainLeArgs) -> Result<(), Failure> {
    let (train, val) = load_dataset(cli)?;
    let agcm = load_agcm(&a.agcm)?;
    create_dir(&cli.out_dir)?;
    let cfg = a.schedule.config(cli.seed, cli.out_dir.join("le_log.csv"));
    let le = LeModel::new(
        LeConfig {
            channels: a.channels,
            ..LeConfig::default()
        },
        cli.seed,
    )?;
    println!("LE: {} parameters", le.param_count());
    let (le, summary) = train_le(le, &agcm_outputs(&agcm, &train)?, &agcm_outputs(&agcm, &val)?, &cfg)?;
    save_checkpoint(&cli.out_dir.join("le.ckpt"), &le.to_checkpoint())?;
    write_run_config(cli, &cli.out_dir)?;
    report_summary("LE", &summary);
    Ok(())
}

fn finetune_cmd(cli: &Cli, a: &FinetuneArgs) -> Result<(), Failure> {
    let (train, val) = load_dataset(cli)?;
    let agcm = load_agcm(&a.agcm)?;
    let le = load_le(&a.le)?;
    create_dir(&cli.out_dir)?;
    let cfg = a.schedule.config(cli.seed, cli.out_dir.join("finetune_log.csv"));
    let (agcm, le, summary) = joint_finetune(agcm, le, &train, &val, &cfg)?;
    save_checkpoint(&cli.out_dir.join("agcm_ft.ckpt"), &agcm.to_checkpoint())?;
    save_checkpoint(&cli.out_dir.join("le_ft.ckpt"), &le.to_checkpoint())?;
    write_run_config(cli, &cli.out_dir)?;
    report_summary("finetune", &summary);
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<(), Failure> {
    let sdr = load_sdr(&a.input)?;
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.as_ref()
            .ok_or_else(|| Failure::usage(format!("--stage needs {flag}")))
            .cloned()
    };
    let out = match a.stage {
        Stage::Baseline => ldr2hdr_baseline(&sdr)?,
        Stage::Agcm => load_agcm(&need(&a.agcm, "--agcm")?)?.forward(&sdr, None)?,
        Stage::AgcmLe => {
            let agcm = load_agcm(&need(&a.agcm, "--agcm")?)?;
            let le = load_le(&need(&a.le, "--le")?)?;
            le.forward(&agcm.forward(&sdr, None)?)?
        }
    };
    save_output(&out, &a.output)?;
    write_run_config_beside(cli, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

/// Frozen per-pixel mapping of a checkpoint; conditioned models need an
/// image to fix the condition vector.
fn frozen_mapper(agcm: &AgcmModel, condition: Option<&Path>) -> Result<PixelMapper, Failure> {
    if !agcm.config.use_condition {
        return Ok(agcm.pixel_mapper(None)?);
    }
    let path = condition.ok_or_else(|| Failure::usage("a conditioned model needs --condition <sdr.png>"))?;
    let v = agcm.condition_vector(&load_sdr(path)?)?;
    Ok(agcm.pixel_mapper(Some(&v))?)
}

fn bake(cli: &Cli, a: &BakeLutArgs) -> Result<(), Failure> {
    let agcm = load_agcm(&a.agcm)?;
    let mapper = frozen_mapper(&agcm, a.condition.as_deref())?;
    let lut = bake_mapper(&mapper, a.size, a.lattice.into())?;
    ensure_parent(&a.output)?;
    export_cube(&lut, &a.output, Some("hdrtv AGCM"))?;
    write_run_config_beside(cli, &a.output)?;
    println!("wrote s{} LUT to {}", a.size, a.output.display());
    Ok(())
}

fn apply(cli: &Cli, a: &ApplyLutArgs) -> Result<(), Failure> {
    let lut = import_cube(&a.lut)?;
    let out = apply_lut(&load_sdr(&a.input)?, &lut)?;
    save_output(&out, &a.output)?;
    write_run_config_beside(cli, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<(), Failure> {
    let pairs: Vec<(PathBuf, PathBuf)> = match (a.images.len(), &cli.manifest) {
        (2, _) => vec![(a.images[0].clone(), a.images[1].clone())],
        (0, Some(m)) => load_manifest(m)?
            .into_iter()
            .map(|s| (s.sdr_path, s.hdr_path))
            .collect(),
        _ => return Err(Failure::usage("eval takes two images or --manifest")),
    };
    let mut report = MetricReport::default();
    for (p, r) in &pairs {
        let name = p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        report.evaluate(&name, &load_any(p, cli.grid)?, &load_any(r, cli.grid)?)?;
    }
    print!("{}", report.to_table());
    if let Some(csv) = &a.csv {
        ensure_parent(csv)?;
        std::fs::write(csv, report.to_csv()).map_err(|e| Failure::input(format!("{}: {e}", csv.display())))?;
        write_run_config_beside(cli, csv)?;
    }
    Ok(())
}

fn colorcard(cli: &Cli, a: &ColorcardArgs) -> Result<(), Failure> {
    let card = make_color_card(cli.seed, a.width, a.height);
    create_dir(&cli.out_dir)?;
    save_png(&card.image, &cli.out_dir.join("card.png"), 8)?;
    let out = if let Some(l) = &a.lut {
        apply_lut(&card.image, &import_cube(l)?)?
    } else if let Some(m) = &a.agcm {
        let agcm = load_agcm(m)?;
        let mid = agcm.forward(&card.image, None)?;
        match &a.le {
            Some(l) => load_le(l)?.forward(&mid)?,
            None => mid,
        }
    } else {
        card.image.clone()
    };
    save_output(&out, &cli.out_dir.join("card_out.png"))?;
    let report = transition_report(&out, &card)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(cli.out_dir.join("transition_report.json"), json + "\n")
        .map_err(|e| Failure::input(e.to_string()))?;
    write_run_config(cli, &cli.out_dir)?;
    println!(
        "max within-patch deviation {:.6e} ({} of {} patches nonzero), smoothness {:.6e}",
        report.max_patch_deviation,
        report.patches_with_deviation,
        report.patch_deviations.len(),
        report.smoothness
    );
    Ok(())
}

fn manifold(cli: &Cli, a: &ManifoldArgs) -> Result<(), Failure> {
    let lut: Lut3d = match (&a.lut, &a.agcm) {
        (Some(l), _) => import_cube(l)?,
        (None, Some(m)) => {
            let mapper = frozen_mapper(&load_agcm(m)?, a.condition.as_deref())?;
            bake_mapper(&mapper, a.size, a.lattice.into())?
        }
        (None, None) => bake_lut(a.size, a.lattice.into(), |c| c)?,
    };
    let points = manifold_points(&lut);
    ensure_parent(&a.output)?;
    export_manifold(&points, &a.output, a.ply.as_deref())?;
    write_run_config_beside(cli, &a.output)?;
    println!("wrote {} points to {}", points.len(), a.output.display());
    Ok(())
}

fn bench(_cli: &Cli, a: &BenchArgs) -> Result<(), Failure> {
    let lut = Lut3d::identity(a.size)?;
    let r = bench_apply(&lut, a.width, a.height, a.reps)?;
    println!(
        "s{} LUT on {}x{}: {:.3} s single-threaded, {:.1} Mpix/s",
        r.lut_size, r.width, r.height, r.seconds, r.mpix_per_s
    );
    Ok(())
}

fn gradcheck(cli: &Cli) -> Result<(), Failure> {
    let checks = gradcheck_all(cli.seed)?;
    println!("{:<18} {:>14} {:>8} {:>8}", "op", "max_rel_error", "checked", "skipped");
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<18} {:>14.3e} {:>8} {:>8}  {verdict}",
            c.name, c.max_rel_error, c.checked, c.skipped
        );
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(Failure::numeric(format!(
            "{failed} gradient checks exceed {GRADCHECK_TOLERANCE:e}"
        )));
    }
    println!("all {} checks within {GRADCHECK_TOLERANCE:e}", checks.len());
    Ok(())
}
