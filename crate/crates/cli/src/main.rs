use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hfm_core::config::{RunConfig, REFERENCE};
use hfm_core::eval::{aggregate, evaluate, MetricsReport};
use hfm_core::geometry::{normal_from_depth, CameraIntrinsics};
use hfm_core::io::{self, Checkpoint, CheckpointConfig, Manifest, ManifestEntry};
use hfm_core::network::{predict, FusionVariant};
use hfm_core::synth::{generate_sample, Sample};
use hfm_core::train::{train_until, Event, TrainData, TrainState};
use hfm_core::Error;

/// Hierarchical RGB-D fusion for surface normals: synthesis, training,
/// evaluation and prediction.
#[derive(Parser, Debug)]
#[command(name = "hfm", version)]
struct Cli {
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    help_config: bool,
    /// Seed for all randomness; overrides the configured seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint per epoch and `train.log`.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the depth baseline) on a dataset directory.
    Eval(EvalArgs),
    /// Predict normals and confidence for one RGB/depth pair.
    Predict(PredictArgs),
    /// Least-squares normals from a depth image.
    Depth2normal(Depth2NormalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// hierarchical | early | late
    #[arg(long)]
    variant: Option<FusionVariant>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train on a synthesized directory instead of generating samples.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Stop after this many epochs in total (for staged runs).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present_any = ["depth_baseline", "ground_truth"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate least-squares normals from the sensor depth instead.
    #[arg(long)]
    depth_baseline: bool,
    /// Score the ground truth against itself (sanity check of the pipeline).
    #[arg(long, conflicts_with = "depth_baseline")]
    ground_truth: bool,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    min_valid: usize,
    /// Compare against the training targets instead of the analytic normals.
    #[arg(long)]
    against_targets: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    /// 16-bit depth image in millimetres, 0 = hole.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    out_normal: PathBuf,
    #[arg(long)]
    out_confidence: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Depth2NormalArgs {
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires_all = ["fy", "cx", "cy"])]
    fx: Option<f64>,
    #[arg(long)]
    fy: Option<f64>,
    #[arg(long)]
    cx: Option<f64>,
    #[arg(long)]
    cy: Option<f64>,
    /// Horizontal field of view, used when no focal length is given.
    #[arg(long, default_value_t = 60.0)]
    hfov: f64,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    min_valid: usize,
    /// Also write the float-exact raster.
    #[arg(long)]
    raw: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        Error::Contract(_) | Error::Data(_) | Error::Io(_) | Error::Image(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.help_config {
        print!("{REFERENCE}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    match run(command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command, seed: Option<u64>) -> hfm_core::Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Depth2normal(a) => cmd_depth2normal(a),
    }
}

fn load_config(path: Option<&Path>) -> hfm_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_synth(a: SynthArgs, seed: Option<u64>) -> hfm_core::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let spec = cfg.dataset();
    let first = seed.unwrap_or(cfg.data.first_seed);
    fs::create_dir_all(&a.out)?;
    let mut manifest = Manifest { width: spec.scene.width, height: spec.scene.height, samples: Vec::with_capacity(a.count) };
    for k in 0..a.count as u64 {
        let s = generate_sample(&spec, first + k)?;
        io::write_sample(&a.out, &s)?;
        manifest.samples.push(ManifestEntry { seed: s.seed, intrinsics: s.intrinsics });
    }
    io::write_manifest(&a.out, &manifest)?;
    log::info!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn generate(cfg: &RunConfig, first: u64, count: usize) -> hfm_core::Result<Vec<Sample>> {
    let spec = cfg.dataset();
    (0..count as u64).map(|k| generate_sample(&spec, first + k)).collect()
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> hfm_core::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.network.variant = v;
    }
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;

    let mut state = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.config.network != cfg.network {
                return Err(Error::Config(format!("{} was trained with a different network configuration", path.display())));
            }
            log::info!("resuming from {} at epoch {}", path.display(), ck.state.epoch);
            ck.state
        }
        None => TrainState::fresh(&cfg.network, &cfg.schedule)?,
    };

    let samples = match &a.dataset {
        Some(dir) => io::read_dataset(dir)?,
        None => generate(&cfg, cfg.data.first_seed, cfg.data.train_samples)?,
    };
    let validation = generate(&cfg, cfg.data.validation_first_seed, cfg.data.validation_samples)?;
    let data = TrainData::new(samples)?;

    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut log = OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
    let ck_config = CheckpointConfig { network: cfg.network.clone(), schedule: cfg.schedule.clone() };
    let until = a.stop_after.unwrap_or(cfg.schedule.epochs);
    let records = train_until(&mut state, &cfg.network, &cfg.schedule, &cfg.loss.weights, &data, &validation, until, |event| {
        match event {
            Event::Step(r) => writeln!(log, "{}", r.log_line())?,
            Event::Epoch(r, st) => {
                writeln!(log, "{}", r.log_line())?;
                let ck = Checkpoint { config: ck_config.clone(), state: st.clone() };
                ck.write(&out.join(format!("epoch_{:03}.ckpt", r.epoch)))?;
                ck.write(&out.join("last.ckpt"))?;
            }
        }
        Ok(())
    })?;
    if let Some(m) = records.last().and_then(|r| r.validation.as_ref()) {
        let text = report_text(m, "validation, final scale vs analytic normals");
        fs::write(out.join("report.txt"), &text)?;
        print!("{text}");
    }
    Ok(())
}

fn report_text(m: &MetricsReport, what: &str) -> String {
    format!("# {what}\n{m}")
}

fn cmd_eval(a: EvalArgs) -> hfm_core::Result<()> {
    let manifest = io::read_manifest(&a.dataset)?;
    let model = match &a.checkpoint {
        Some(p) if !a.depth_baseline && !a.ground_truth => Some(Checkpoint::read(p)?),
        _ => None,
    };
    let mut reports = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let s = io::read_sample(&a.dataset, entry)?;
        let gt = if a.against_targets { &s.normals } else { &s.clean_normals };
        let pred = match &model {
            Some(ck) => predict(&ck.state.params, &ck.config.network, &s.rgb, &s.depth)?.0,
            None if a.ground_truth => gt.clone(),
            None => normal_from_depth(&s.depth, &s.intrinsics, a.window, a.min_valid)?,
        };
        reports.push(evaluate(&pred, gt)?);
    }
    if reports.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", a.dataset.display())));
    }
    let what = match (a.depth_baseline, a.ground_truth) {
        (true, _) => "depth baseline",
        (_, true) => "ground truth",
        _ => "network",
    };
    let text = report_text(&aggregate(&reports)?, what);
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> hfm_core::Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let rgb = io::read_rgb_png(&a.rgb)?;
    let depth = io::read_depth_png(&a.depth)?;
    let (normals, confidence) = predict(&ck.state.params, &ck.config.network, &rgb, &depth)?;
    io::write_normal_png(&a.out_normal, &normals)?;
    if let Some(path) = &a.out_confidence {
        match confidence {
            Some(c) => io::write_confidence_png(path, rgb.width, rgb.height, &c)?,
            None => log::warn!("this variant has no confidence map; {} not written", path.display()),
        }
    }
    Ok(())
}

fn cmd_depth2normal(a: Depth2NormalArgs) -> hfm_core::Result<()> {
    let depth = io::read_depth_png(&a.depth)?;
    let intr = match (a.fx, a.fy, a.cx, a.cy) {
        (Some(fx), Some(fy), Some(cx), Some(cy)) => CameraIntrinsics::new(fx, fy, cx, cy)?,
        _ => CameraIntrinsics::from_fov(depth.width(), depth.height(), a.hfov),
    };
    let normals = normal_from_depth(&depth, &intr, a.window, a.min_valid)?;
    io::write_normal_png(&a.out, &normals)?;
    if let Some(raw) = &a.raw {
        io::Raster::from_normals(&normals).write(raw)?;
    }
    Ok(())
}
