//! `a4unet` command-line tool: scan datasets, train, evaluate, predict, run
//! ablations and describe models.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use a4unet::candle::Device;
use a4unet::data::{
    make_folds, scan_subject, synth::write_synthetic_dataset, DatasetManifest, Layout, SliceCache, SliceSample, Split,
};
use a4unet::metrics::{evaluate_dataset, MetricConfig, MetricReport, Reduction};
use a4unet::train::{evaluate_runs, predict_subject, run_ablation_suite, Checkpoint, PredictOptions, Trainer};
use a4unet::{build_model, Error};
use clap::{Args, Parser, Subcommand};

use config::{DataArgs, ModelArgs, Resolved, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "a4unet", version, about = "Brain tumor segmentation with the A4-Unet architecture")]
struct Cli {
    /// Log verbosity (-v debug, -vv trace); `RUST_LOG` also applies.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Discover subjects, assign splits and write a manifest.
    Scan(ScanCmd),
    /// Train a model (one or several seeded runs).
    Train(TrainCmd),
    /// Evaluate one or more checkpoints on a split.
    Eval(EvalCmd),
    /// Segment a subject folder and write masks, overlays and a NIfTI label map.
    Predict(PredictCmd),
    /// Train and validate all eight DLKA/SSPP/CAM switch combinations.
    Ablate(AblateCmd),
    /// Print per-module parameter counts and stage shapes.
    Describe(DescribeCmd),
    /// Write a synthetic BraTS-style NIfTI tree.
    Synth(SynthCmd),
}

#[derive(Args, Debug)]
struct ScanCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest output path.
    #[arg(long, short, default_value = "manifest.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints and logs.
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on one cross-validation fold (0-based) instead of the manifest split.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Configuration file (TOML); when given, the checkpoint must match it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint files; several (one per run) give mean ± std across runs.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Split to evaluate.
    #[arg(long, default_value = "val")]
    split: Split,
    /// Percentile of the boundary distance (100 gives the Hausdorff distance).
    #[arg(long, default_value_t = 95.0)]
    percentile: f64,
    /// Per-case reduction: slice_mean or pooled.
    #[arg(long, default_value = "slice_mean", value_parser = parse_reduction)]
    reduction: Reduction,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Inference batch size.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct PredictCmd {
    /// Checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Subject folder with one NIfTI file per modality.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "predictions")]
    out_dir: PathBuf,
    /// Modality naming of the input folder.
    #[arg(long, default_value = "brats2020")]
    layout: Layout,
    /// Predict a single axial slice instead of the whole volume.
    #[arg(long)]
    slice: Option<usize>,
    /// Also write overlays (ground truth green, prediction red).
    #[arg(long)]
    overlay: bool,
    /// Inference batch size.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct AblateCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the per-configuration runs and the results table.
    #[arg(long, default_value = "runs/ablation")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct DescribeCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthCmd {
    /// Output root.
    #[arg(long, short)]
    out: PathBuf,
    /// Directory layout and modality naming.
    #[arg(long, default_value = "brats2020")]
    layout: Layout,
    /// Number of subjects.
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    /// Volume shape X,Y,Z (Z is the slice axis).
    #[arg(long, default_value = "64,64,16", value_parser = parse_shape)]
    shape: [usize; 3],
    /// Omit segmentation files.
    #[arg(long)]
    no_labels: bool,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if *x > 0 && *y > 0 && *z > 0 => Ok([*x, *y, *z]),
        _ => Err("expected three positive integers X,Y,Z".into()),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "slice_mean" => Ok(Reduction::SliceMean),
        "pooled" => Ok(Reduction::Pooled),
        _ => Err(format!("unknown reduction {s:?} (slice_mean, pooled)")),
    }
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Parameter(_) => 1,
            e if e.is_data_error() => 2,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_split(resolved: &Resolved, manifest: &DatasetManifest, split: Split) -> a4unet::Result<Vec<SliceSample>> {
    let records = manifest.split(split);
    let cache = resolved.data.cache_dir.as_ref().map(SliceCache::new).transpose()?;
    let mut out = Vec::new();
    for r in records {
        let samples = match &cache {
            Some(c) => c.load_or_build(r, &resolved.preprocess, manifest.label_policy)?,
            None => a4unet::data::preprocess_volume(r, &resolved.preprocess, manifest.label_policy)?,
        };
        out.extend(samples);
    }
    Ok(out)
}

fn require_labels(samples: &[SliceSample], split: Split) -> a4unet::Result<()> {
    match samples.iter().find(|s| s.mask.is_none()) {
        Some(s) => Err(Error::Data(format!(
            "{split} split contains subject {} without a segmentation file",
            s.subject_id
        ))),
        None => Ok(()),
    }
}

fn cmd_scan(c: ScanCmd) -> CmdResult {
    let resolved = Resolved::new(c.config.as_deref(), &c.data, None, None)?;
    let started = Instant::now();
    let manifest = resolved.manifest()?;
    manifest.save(&c.out)?;
    println!(
        "{} subjects, {} slices ({} train / {} val / {} test) in {:.2}s -> {}",
        manifest.records.len(),
        manifest.total_slices,
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test),
        started.elapsed().as_secs_f64(),
        c.out.display()
    );
    Ok(())
}

fn cmd_train(c: TrainCmd) -> CmdResult {
    let resolved = Resolved::new(c.config.as_deref(), &c.data, Some(&c.model), Some(&c.train))?;
    let dev = Device::Cpu;
    let dtype = resolved.dtype;
    if let Some(path) = &c.resume {
        let ckpt = Checkpoint::load(path)?;
        let manifest = resolved.manifest()?;
        let train = load_split(&resolved, &manifest, Split::Train)?;
        let val = load_split(&resolved, &manifest, Split::Val)?;
        require_labels(&train, Split::Train)?;
        let mut trainer = Trainer::resume(&ckpt, dtype, &dev)?.with_output_dir(&c.out_dir);
        let outcome = trainer.fit(&train, (!val.is_empty()).then_some(val.as_slice()))?;
        println!("resumed at epoch {}, trained {} more", ckpt.meta.epoch, outcome.log.len());
        return Ok(());
    }
    let mut manifest = resolved.manifest()?;
    if let Some(fold) = c.fold {
        let folds = make_folds(&manifest, resolved.data.split_seed, resolved.train.folds)?;
        manifest = folds
            .into_iter()
            .nth(fold)
            .ok_or_else(|| Error::Config(format!("fold {fold} out of range (folds = {})", resolved.train.folds)))?;
    }
    let train = load_split(&resolved, &manifest, Split::Train)?;
    let val = load_split(&resolved, &manifest, Split::Val)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()).into());
    }
    require_labels(&train, Split::Train)?;
    require_labels(&val, Split::Val)?;
    let runs = resolved.train.runs;
    for run in 0..runs {
        let mut tcfg = resolved.train.clone();
        tcfg.seed = resolved.train.seed + run as u64;
        let mut mcfg = resolved.model.clone();
        mcfg.seed = tcfg.seed;
        let dir = if runs > 1 { c.out_dir.join(format!("run{run}")) } else { c.out_dir.clone() };
        let mut trainer = Trainer::new(&mcfg, &tcfg, &resolved.preprocess, dtype, &dev)?.with_output_dir(&dir);
        let outcome = trainer.fit(&train, (!val.is_empty()).then_some(val.as_slice()))?;
        let last = outcome.log.last().expect("epochs >= 1");
        println!(
            "run {run}: {} epochs, final loss {:.5}, best val dice {}, checkpoints in {}",
            outcome.log.len(),
            last.train_loss,
            outcome.best_val_dice.map_or("-".into(), |d| format!("{d:.4}")),
            dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(c: EvalCmd) -> CmdResult {
    let explicit = c.config.is_some() || c.model.is_set();
    let resolved = Resolved::new(c.config.as_deref(), &c.data, Some(&c.model), None)?;
    let manifest = resolved.manifest()?;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut text = String::new();
    for path in &c.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        if explicit {
            ckpt.check_model_config(&resolved.model)?;
        }
        let model = ckpt.build_model(resolved.dtype, &Device::Cpu)?;
        let mut data = resolved.clone();
        data.preprocess = ckpt.meta.preprocess.clone();
        let samples = load_split(&data, &manifest, c.split)?;
        require_labels(&samples, c.split)?;
        let cfg = MetricConfig {
            max_label: (ckpt.meta.model.num_classes() - 1) as u8,
            percentile: c.percentile,
            reduction: c.reduction,
        };
        let report = evaluate_dataset(&model, &samples, &cfg, c.batch_size)?;
        text.push_str(&format!("# checkpoint {}\n", path.display()));
        text.push_str(&report.to_text());
        text.push('\n');
        reports.push(report);
    }
    if reports.len() > 1 {
        text.push_str(&evaluate_runs(&reports).to_text());
    }
    match &c.report {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_predict(c: PredictCmd) -> CmdResult {
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let model = ckpt.build_model(a4unet::candle::DType::F32, &Device::Cpu)?;
    let record = scan_subject(&c.input, &c.layout.modalities())?;
    let opts = PredictOptions {
        out_dir: c.out_dir.clone(),
        overlay: c.overlay,
        slice: c.slice,
        batch_size: c.batch_size,
        label_policy: Default::default(),
    };
    let out = predict_subject(&model, &record, &ckpt.meta.preprocess, &opts)?;
    println!(
        "{} mask(s), {} overlay(s){} in {}",
        out.masks.len(),
        out.overlays.len(),
        out.volume.as_ref().map_or(String::new(), |p| format!(", volume {}", p.display())),
        c.out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(c: AblateCmd) -> CmdResult {
    let resolved = Resolved::new(c.config.as_deref(), &c.data, Some(&c.model), Some(&c.train))?;
    let manifest = resolved.manifest()?;
    let train = load_split(&resolved, &manifest, Split::Train)?;
    let val = load_split(&resolved, &manifest, Split::Val)?;
    require_labels(&train, Split::Train)?;
    require_labels(&val, Split::Val)?;
    let table = run_ablation_suite(
        &train,
        &val,
        &resolved.model,
        &resolved.train,
        &resolved.preprocess,
        Some(&c.out_dir),
        resolved.dtype,
        &Device::Cpu,
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_describe(c: DescribeCmd) -> CmdResult {
    let resolved = Resolved::new(c.config.as_deref(), &DataArgs::default(), Some(&c.model), None)?;
    let model = build_model(&resolved.model, resolved.dtype, &Device::Cpu)?;
    let summary = model.describe();
    if c.json {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    } else {
        println!("{summary}");
    }
    Ok(())
}

fn cmd_synth(c: SynthCmd) -> CmdResult {
    write_synthetic_dataset(&c.out, c.layout, c.subjects, c.shape, !c.no_labels, c.seed)?;
    println!("{} {} subjects of shape {:?} -> {}", c.subjects, c.layout, c.shape, c.out.display());
    Ok(())
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .try_init();
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Scan(c) => cmd_scan(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Predict(c) => cmd_predict(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Describe(c) => cmd_describe(c),
        Command::Synth(c) => cmd_synth(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
