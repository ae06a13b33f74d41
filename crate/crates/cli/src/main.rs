use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::Vector3;

use sdfloc::eval::{compute_ate, Alignment};
use sdfloc::pipeline::{perturbation_sweep, run_localization, summarize_sweep, sweep_csv, PipelineConfig};
use sdfloc::scene::load_scene;
use sdfloc::sdf_map::MapParams;
use sdfloc::trajectory::Trajectory;
use sdfloc::{PipelineError, SdfMap, SolverError};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Metric monocular localization against a prior SDF map.
#[derive(Parser)]
#[command(name = "sdfloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an SDF map from a scene description.
    BuildMap {
        /// Scene file; the built-in room when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Map file to write.
        #[arg(long)]
        output: PathBuf,
        /// Configuration supplying voxel size, truncation and bounds.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        voxel_size: Option<f64>,
    },
    /// Localize a simulated sequence and write its trajectory and report.
    Run {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Compare an estimated trajectory against ground truth.
    Evaluate {
        estimated: PathBuf,
        ground_truth: PathBuf,
        #[arg(long, default_value = "none")]
        align: Alignment,
        /// Per-frame error CSV to write.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Perturb the initial pose over a range of magnitudes and seeds.
    Sweep {
        #[command(flatten)]
        common: RunArgs,
        /// Perturbation axis as "x y z".
        #[arg(long, default_value = "1 0 0")]
        axis: String,
        /// Comma-separated `meters:degrees` pairs.
        #[arg(long, default_value = "0:0,0.1:5,0.25:10,0.5:10")]
        magnitudes: String,
        /// Number of seeds, counted up from the configured seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the SDF factors; 0 disables them.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Output directory for `run`, CSV file for `sweep`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    align: Option<Alignment>,
    /// Exit with status 3 when any frame or sweep cell fails to converge.
    #[arg(long)]
    strict: bool,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(lambda) = self.lambda {
            cfg.solver.lambda = lambda;
        }
        if let Some(align) = self.align {
            cfg.alignment = align;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_axis(s: &str) -> Result<Vector3<f64>, PipelineError> {
    let v: Vec<f64> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| PipelineError::Config(format!("axis: cannot parse '{s}'")))?;
    match v[..] {
        [x, y, z] => Ok(Vector3::new(x, y, z)),
        _ => Err(PipelineError::Config(format!("axis: expected three numbers, found '{s}'"))),
    }
}

fn parse_magnitudes(s: &str) -> Result<Vec<(f64, f64)>, PipelineError> {
    s.split(',')
        .map(|pair| {
            let (t, r) = pair.split_once(':').unwrap_or((pair, "0"));
            match (t.trim().parse(), r.trim().parse()) {
                (Ok(t), Ok(r)) => Ok((t, r)),
                _ => Err(PipelineError::Config(format!("magnitudes: cannot parse '{pair}'"))),
            }
        })
        .collect()
}

fn build_map(scene: Option<&Path>, output: &Path, config: Option<&Path>, voxel_size: Option<f64>) -> Result<u8, PipelineError> {
    let mut cfg = match config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(vs) = voxel_size {
        cfg.voxel_size = vs;
    }
    let primitives = match scene.or(cfg.scene.as_deref()) {
        Some(path) => load_scene(path)?,
        None => sdfloc::scene::standard_room(),
    };
    let params = MapParams::new(cfg.voxel_size).with_truncation(cfg.truncation);
    let map = SdfMap::build_from_analytic(&primitives, params, cfg.map_bounds)?;
    map.save(output)?;
    info!("wrote {} ({} blocks)", output.display(), map.block_count());
    Ok(0)
}

fn run(args: &RunArgs) -> Result<u8, PipelineError> {
    let mut cfg = args.config()?;
    if let Some(dir) = &args.output {
        cfg.output = Some(dir.clone());
    }
    let out = run_localization(&cfg)?;
    print!("{}", out.report.to_text());
    if args.strict && !out.report.not_converged.is_empty() {
        eprintln!("frames not converged: {:?}", out.report.not_converged);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn evaluate(estimated: &Path, ground_truth: &Path, align: Alignment, output: Option<&Path>) -> Result<u8, PipelineError> {
    let est = Trajectory::load(estimated)?;
    let gt = Trajectory::load(ground_truth)?;
    let ate = compute_ate(&est, &gt, align)?;
    println!("frames:                  {}", ate.frames.len());
    println!("alignment:               {align}");
    if align == Alignment::Similarity {
        println!("alignment scale:         {:.6}", ate.alignment.scale);
    }
    println!("ATE translation RMSE:    {:.6} m", ate.translation_rmse);
    println!("ATE rotation RMSE:       {:.6} deg", ate.rotation_rmse_deg);
    if let Some(path) = output {
        let mut csv = String::from("timestamp,translation_error_m,rotation_error_deg\n");
        for f in &ate.frames {
            writeln!(csv, "{:.9},{:.17e},{:.17e}", f.timestamp, f.translation, f.rotation_deg).unwrap();
        }
        std::fs::write(path, csv)?;
    }
    Ok(0)
}

fn sweep(args: &RunArgs, axis: &str, magnitudes: &str, seeds: u64) -> Result<u8, PipelineError> {
    let cfg = args.config()?;
    let axis = parse_axis(axis)?;
    let magnitudes = parse_magnitudes(magnitudes)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let entries = perturbation_sweep(&cfg, &axis, &magnitudes, &seeds)?;
    let csv = sweep_csv(&entries);
    match &args.output {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    let mut failed = false;
    for cell in summarize_sweep(&entries) {
        eprintln!(
            "{} m / {} deg: mean {:.4} m, std {:.4} m, max {:.4} m, {} of {} failed",
            cell.translation, cell.rotation_deg, cell.mean, cell.std, cell.max, cell.failures, cell.runs
        );
        failed |= cell.failures > 0;
    }
    failed |= entries.iter().any(|e| e.not_converged_frames > 0);
    Ok(if args.strict && failed { EXIT_NOT_CONVERGED } else { 0 })
}

fn exit_code(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Config(_) | PipelineError::Solver(SolverError::Config(_)) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildMap { scene, output, config, voxel_size } => {
            build_map(scene.as_deref(), output, config.as_deref(), *voxel_size)
        }
        Command::Run { common } => run(common),
        Command::Evaluate { estimated, ground_truth, align, output } => {
            evaluate(estimated, ground_truth, *align, output.as_deref())
        }
        Command::Sweep { common, axis, magnitudes, seeds } => sweep(common, axis, magnitudes, *seeds),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
