use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dalio_core::config::{ConfigError, PipelineConfig};
use dalio_core::eval::MapScore;
use dalio_core::io::{self, DataError, DatasetReader};
use dalio_core::pipeline::{run_frames, with_threads, FrameDiagnostics, FramePhase, PipelineError};
use dalio_core::report::{self, EvalReport, ReportError, RunReport};
use dalio_core::sim;

#[derive(Parser)]
#[command(name = "dalio", version, about = "Dynamic-aware lidar-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset from a preset or a scene file.
    RunSim(SimArgs),
    /// Run odometry over a dataset directory.
    RunOdom(OdomArgs),
    /// Score an estimated trajectory and labeled map against ground truth.
    RunEval(EvalArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Preset name or path to a scene TOML file.
    #[arg(required_unless_present = "list")]
    scene: Option<String>,
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence length, s.
    #[arg(long)]
    duration: Option<f64>,
    /// Drop every moving object from the scene.
    #[arg(long)]
    no_movers: bool,
    /// Disable lidar and IMU noise.
    #[arg(long)]
    noiseless: bool,
    /// Print the available presets and exit.
    #[arg(long, exclusive = true)]
    list: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Sequential,
    NoDynamic,
}

#[derive(Args)]
struct OdomArgs {
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pipeline configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override `section.key=value`; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `registration.mode`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Shorthand for `frontend.threads`.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory, TUM format.
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth trajectory, TUM format.
    #[arg(long)]
    truth: PathBuf,
    /// Labeled map written by run-odom; needs --dataset for truth labels.
    #[arg(long, requires = "dataset")]
    map: Option<PathBuf>,
    /// Dataset directory holding the per-point truth labels.
    #[arg(long, requires = "map")]
    dataset: Option<PathBuf>,
    /// Per-frame diagnostics written by run-odom.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Configuration used for association tolerance and warm-up.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Degenerate(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Degenerate(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Degenerate(m) => write!(f, "aborted: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data { .. } => Failure::Data(e.to_string()),
            PipelineError::Degenerate { .. } => Failure::Degenerate(e.to_string()),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, Failure> {
    let base = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn run_sim(args: SimArgs) -> Result<(), Failure> {
    if args.list {
        for name in sim::preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let scene = args.scene.expect("required by clap");
    let out = args.out.expect("required by clap");
    let mut cfg = if sim::preset_source(&scene).is_some() {
        sim::preset(&scene).map_err(Failure::Config)?
    } else {
        let text = fs::read_to_string(&scene).map_err(|e| {
            Failure::Config(format!("`{scene}` is neither a preset ({}) nor a readable file: {e}", sim::preset_names().join(", ")))
        })?;
        sim::SimConfig::from_toml(&text).map_err(|e| Failure::Config(format!("{scene}: {e}")))?
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    if args.no_movers {
        cfg = cfg.without_movers();
    }
    if args.noiseless {
        cfg = cfg.noiseless();
    }
    cfg.validate().map_err(Failure::Config)?;
    let dataset = sim::generate_sequence(&cfg).map_err(Failure::Config)?;
    create_dir(&out)?;
    io::write_dataset(&out, &dataset)?;
    println!("{} frames written to {}", dataset.frames.len(), out.display());
    Ok(())
}

fn buffered(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run_odom(args: OdomArgs) -> Result<(), Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(m) = args.mode {
        let name = match m {
            Mode::Full => "full",
            Mode::Sequential => "sequential",
            Mode::NoDynamic => "no-dynamic",
        };
        overrides.push(format!("registration.mode=\"{name}\""));
    }
    if let Some(t) = args.threads {
        overrides.push(format!("frontend.threads={t}"));
    }
    let config = load_config(args.config.as_deref(), &overrides)?;
    let reader = DatasetReader::open(&args.dataset)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.toml"), &config.to_toml())?;

    let map_path = args.out.join("map.txt");
    let diag_path = args.out.join("diagnostics.jsonl");
    let mut map = buffered(&map_path)?;
    let mut diag = buffered(&diag_path)?;
    let started = Instant::now();
    let frames = reader
        .frames()
        .enumerate()
        .map(|(i, f)| f.map_err(|e| PipelineError::Data { frame: i, msg: e.to_string() }));
    let result = with_threads(config.frontend.threads, || {
        run_frames(&config, &reader.info, &reader.imu, frames, |_, out| {
            let block = io::format_map_block(out.index, out.time, &out.world, &out.labels);
            map.write_all(block.as_bytes())
                .and_then(|_| diag.write_all(io::to_json_line(&out.diagnostics).as_bytes()))
                .map_err(|e| PipelineError::Data { frame: out.index, msg: format!("writing output: {e}") })
        })
    });
    map.flush().map_err(|e| Failure::Data(format!("{}: {e}", map_path.display())))?;
    diag.flush().map_err(|e| Failure::Data(format!("{}: {e}", diag_path.display())))?;
    let summary = result?;
    let wall = started.elapsed().as_secs_f64();
    io::write_tum(&args.out.join("trajectory.tum"), &summary.trajectory)?;

    let ate = if reader.ground_truth.is_empty() {
        None
    } else {
        report::evaluate_poses(summary.trajectory.clone(), reader.ground_truth.clone(), config.eval.max_dt).ok()
    };
    let scored = summary.score.static_total + summary.score.dynamic_total > 0;
    let doc = json!({
        "dataset": args.dataset.display().to_string(),
        "source": reader.info.source,
        "mode": config.registration.mode.as_str(),
        "frames": summary.diagnostics.len(),
        "degenerate_frames": summary.degenerate_frames(),
        "wall_time_s": wall,
        "ate_rmse": ate.as_ref().map(|a| a.rmse),
        "labels": scored.then_some(summary.score),
    });
    io::write_json(&args.out.join("summary.json"), &doc)?;
    print_odom(&summary.diagnostics, ate.map(|a| a.rmse), scored.then_some(&summary.score));
    Ok(())
}

fn print_odom(diags: &[FrameDiagnostics], ate: Option<f64>, score: Option<&MapScore>) {
    let degenerate = diags.iter().filter(|d| d.phase == FramePhase::Degenerate).count();
    println!("{} frames, {degenerate} degenerate", diags.len());
    if let Some(r) = ate {
        println!("ATE RMSE {r:.4} m");
    }
    if let Some(s) = score {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        println!("SA {} DA {} HA {}", pct(s.sa), pct(s.da), pct(s.ha));
    }
}

fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let estimate = io::read_tum(&args.estimate)?;
    let truth = io::read_tum(&args.truth)?;
    let mut rep = EvalReport {
        trajectory: Some(report::evaluate_poses(estimate, truth, config.eval.max_dt)?),
        ..EvalReport::default()
    };
    let diagnostics: Option<Vec<FrameDiagnostics>> = match &args.diagnostics {
        Some(p) => Some(io::read_json_lines(p)?),
        None => None,
    };
    if let (Some(map), Some(dir)) = (&args.map, &args.dataset) {
        let blocks = io::read_map(map)?;
        let reader = DatasetReader::open(dir)?;
        let phases: Option<Vec<FramePhase>> = diagnostics.as_ref().map(|d| d.iter().map(|x| x.phase).collect());
        // Without diagnostics the bootstrap frames cannot be told apart, so
        // they are skipped together with the warm-up.
        let warmup = if phases.is_some() {
            config.eval.warmup_frames
        } else {
            config.frontend.n_bootstrap + config.eval.warmup_frames
        };
        let mut read_err = None;
        let frames = reader.frames().map_while(|f| f.map_err(|e| read_err = Some(e)).ok());
        let scored = report::evaluate_map(&blocks, frames, phases.as_deref(), warmup);
        if let Some(e) = read_err {
            return Err(e.into());
        }
        rep.map = Some(scored?);
    }
    rep.run = diagnostics.map(RunReport::new);

    create_dir(&args.out)?;
    io::write_json(&args.out.join("metrics.json"), &rep)?;
    let tables = [
        ("ate.csv", rep.ate_csv()),
        ("labels.csv", rep.labels_csv()),
        ("frames.csv", rep.frames_csv()),
        ("timing.csv", rep.timing_csv()),
    ];
    for (name, table) in tables {
        if let Some(text) = table {
            write_text(&args.out.join(name), &text)?;
        }
    }
    if let Some(t) = &rep.trajectory {
        println!("ATE RMSE {:.4} m over {} poses", t.rmse, t.pairs);
    }
    if let Some(m) = &rep.map {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        println!(
            "SA {} DA {} HA {} over {} frames",
            pct(m.pooled.sa),
            pct(m.pooled.da),
            pct(m.pooled.ha),
            m.frames_scored
        );
    }
    if let Some(total) = rep.run.as_ref().and_then(|r| r.stage("total")) {
        println!("frame time mean {:.1} ms, p90 {:.1} ms, max {:.1} ms", total.mean, total.p90, total.max);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunSim(a) => run_sim(a),
        Command::RunOdom(a) => run_odom(a),
        Command::RunEval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dalio: {e}");
            ExitCode::from(e.code())
        }
    }
}
