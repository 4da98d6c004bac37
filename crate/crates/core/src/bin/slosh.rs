//! Command-line surface: dataset generation, training, learned-model
//! simulation, evaluation, and CSV export.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use slosh::dataset::{self, DatasetSpec};
use slosh::io::{self, FrameData, FrameFile};
use slosh::metrics;
use slosh::network::{NetworkConfig, NetworkParams};
use slosh::stepper::{rollout, FrameSequence, RotationEvent};
use slosh::trainer::{train, TrainConfig};
use slosh::types::{default_config, SimConfig};
use slosh::Error;

#[derive(Parser)]
#[command(
    name = "slosh",
    about = "Learned Lagrangian fluid simulation for tank sloshing",
    version
)]
struct Cli {
    /// Override the seed of seeded subcommands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force bit-reproducible execution (implies a single worker thread).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth dataset from a tank specification.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Roll the learned model forward and write a frame file.
    Simulate(SimulateArgs),
    /// Compare a predicted frame file against ground truth.
    Eval(EvalArgs),
    /// Export a frame file as CSV for plotting.
    ExportCsv(ExportCsvArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML file with the simulation constants and one entry per tank.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; each tank writes into its own subdirectory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with simulation, network, and training sections.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (searched recursively for .frames files).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; the metrics log goes to "<out>.log".
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Procedural tank id (0-based index into the standard tank set).
    #[arg(long)]
    scene: usize,
    /// Number of frames to roll out.
    #[arg(long)]
    frames: usize,
    /// Optional TOML rotation schedule ([[events]] with frame/pitch/roll).
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Fill fraction of the tank's interior volume.
    #[arg(long, default_value_t = 0.5)]
    fill: f64,
    /// Output frame file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted frame file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth frame file.
    #[arg(long)]
    truth: PathBuf,
    /// Report output path (TOML).
    #[arg(long)]
    report: PathBuf,
    /// Wall-clock seconds spent producing each predicted frame, if known.
    #[arg(long, default_value_t = 0.0)]
    seconds_per_frame: f64,
}

#[derive(Args)]
struct ExportCsvArgs {
    /// Frame file to export.
    #[arg(long)]
    frames: PathBuf,
    /// Output directory for the CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Top-level generation spec: shared constants plus one dataset per tank.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSpec {
    sim: SimConfig,
    tanks: Vec<DatasetSpec>,
}

/// Top-level training configuration.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSpec {
    sim: SimConfig,
    network: NetworkConfig,
    train: TrainConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RotationSchedule {
    #[serde(default)]
    events: Vec<ScheduledRotation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduledRotation {
    frame: usize,
    pitch: f64,
    roll: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful terminations.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = if cli.deterministic {
        1
    } else {
        cli.threads.unwrap_or(1).max(1)
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        eprintln!("warning: thread pool already initialized: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> slosh::Result<()> {
    match cli.command {
        Command::Generate(args) => generate(&args, cli.seed),
        Command::Train(args) => train_cmd(&args, cli.seed),
        Command::Simulate(args) => simulate(&args),
        Command::Eval(args) => eval(&args),
        Command::ExportCsv(args) => export_csv(&args),
    }
}

fn generate(args: &GenerateArgs, seed: Option<u64>) -> slosh::Result<()> {
    let mut spec: GenerateSpec = io::load_toml(&args.spec)?;
    spec.sim.validate()?;
    if spec.tanks.is_empty() {
        return Err(Error::Config("spec lists no tanks".into()));
    }
    if let Some(s) = seed {
        for (i, tank) in spec.tanks.iter_mut().enumerate() {
            tank.seed = s.wrapping_add(i as u64);
        }
    }
    use rayon::prelude::*;
    let manifests: Vec<slosh::Result<(u32, usize)>> = spec
        .tanks
        .par_iter()
        .map(|tank| {
            let dir = args.out.join(format!("tank{}", tank.tank_id));
            let manifest = dataset::generate(tank, &spec.sim, &dir)?;
            let written = manifest.iterations.iter().filter(|i| !i.skipped).count();
            Ok((tank.tank_id, written))
        })
        .collect();
    for m in manifests {
        let (id, written) = m?;
        println!("tank {id}: {written} iterations written");
    }
    Ok(())
}

/// All .frames files under `dir`, two levels deep, in sorted order.
fn find_frame_files(dir: &Path) -> slosh::Result<Vec<PathBuf>> {
    fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() && depth > 0 {
                walk(&path, depth - 1, out)?;
            } else if path.extension().is_some_and(|e| e == "frames") {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, 2, &mut out).map_err(|e| Error::io(dir, e))?;
    out.sort();
    Ok(out)
}

fn train_cmd(args: &TrainArgs, seed: Option<u64>) -> slosh::Result<()> {
    let mut spec: TrainSpec = io::load_toml(&args.config)?;
    if let Some(s) = seed {
        spec.train.seed = s;
    }
    let files = find_frame_files(&args.data)?;
    if files.is_empty() {
        return Err(Error::RejectedInput(format!(
            "no .frames files under {}",
            args.data.display()
        )));
    }
    let mut data = Vec::with_capacity(files.len());
    for f in &files {
        data.push(FrameSequence::from_frame_file(&io::read_frames(f)?)?);
    }
    println!("training on {} sequences", data.len());
    let outcome = train(spec.network, &spec.train, &spec.sim, &data)?;
    if let Some(step) = outcome.halted_at {
        eprintln!("warning: non-finite loss at step {step}; keeping the last good checkpoint");
    }
    outcome.params.save_checkpoint(&args.out)?;

    let log_path = args.out.with_extension("ckpt.log");
    let mut log = String::new();
    for r in &outcome.records {
        log.push_str(&format!(
            "step = {}, loss = {:.6e}, lr = {:.6e}, warmup = {}, d_n = {:.6e}, max_density_error = {:.6e}\n",
            r.step, r.loss, r.learning_rate, r.warmup, r.d_n, r.max_density_error
        ));
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    f.write_all(log.as_bytes())
        .map_err(|e| Error::io(&log_path, e))?;
    println!(
        "checkpoint written to {} ({} log records)",
        args.out.display(),
        outcome.records.len()
    );
    Ok(())
}

fn simulate(args: &SimulateArgs) -> slosh::Result<()> {
    let params = NetworkParams::load_checkpoint(&args.ckpt)?;
    let config = default_config();
    let tanks = dataset::standard_tanks(config.particle_radius);
    let shape = tanks.get(args.scene).ok_or_else(|| {
        Error::RejectedInput(format!(
            "scene id {} out of range ({} standard tanks)",
            args.scene,
            tanks.len()
        ))
    })?;
    let schedule: RotationSchedule = match &args.schedule {
        Some(path) => io::load_toml(path)?,
        None => RotationSchedule::default(),
    };
    let events: Vec<RotationEvent> = schedule
        .events
        .iter()
        .map(|e| RotationEvent {
            frame: e.frame,
            pitch: e.pitch,
            roll: e.roll,
        })
        .collect();

    let scene = dataset::build_tank(shape, config.particle_radius)?;
    let filled = dataset::fill_tank(&scene, args.fill, &config)?;
    let mut fluid = slosh::types::ParticleSet::empty();
    for i in 0..filled.len() {
        if filled.kinds[i] == slosh::types::Kind::Fluid {
            fluid.positions.push(filled.positions[i]);
            fluid.velocities.push(filled.velocities[i]);
            fluid.kinds.push(filled.kinds[i]);
            fluid.normals.push(filled.normals[i]);
        }
    }
    // The learned model consumes the innermost wall layer only.
    let (bpos, bnorm) = dataset::boundary_of(&scene.boundary, &scene, config.particle_radius);
    let boundary = slosh::types::ParticleSet {
        velocities: vec![slosh::math::Vec3::ZERO; bpos.len()],
        kinds: vec![slosh::types::Kind::Boundary; bpos.len()],
        positions: bpos,
        normals: bnorm,
    };

    let seq = rollout(
        &params,
        &config,
        &fluid,
        &scene,
        &boundary,
        &events,
        args.frames,
    )?;
    let frames: Vec<FrameData> = seq
        .frames
        .iter()
        .map(|f| FrameData {
            positions: f.positions.clone(),
            velocities: f.velocities.clone(),
        })
        .collect();
    let (pitch, roll) = seq.rotations.first().copied().unwrap_or((0.0, 0.0));
    io::write_frames(
        &args.out,
        &FrameFile {
            dt: config.dt,
            pitch,
            roll,
            fill_fraction: args.fill,
            boundary_positions: seq.boundary.positions.clone(),
            boundary_normals: seq.boundary.normals.clone(),
            frames,
        },
    )?;
    println!(
        "{} frames ({} particles) written to {}",
        seq.len(),
        fluid.len(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> slosh::Result<()> {
    let pred = FrameSequence::from_frame_file(&io::read_frames(&args.pred)?)?;
    let truth = FrameSequence::from_frame_file(&io::read_frames(&args.truth)?)?;
    let config = default_config();
    let report = metrics::evaluate(&pred, &truth, &config, args.seconds_per_frame)?;
    io::save_toml(&args.report, &report)?;
    println!("{}", report.summary());
    println!("report written to {}", args.report.display());
    Ok(())
}

fn export_csv(args: &ExportCsvArgs) -> slosh::Result<()> {
    let file = io::read_frames(&args.frames)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("fluid.csv");
    io::export_csv(&path, &file.frames)?;
    println!(
        "{} frames exported to {}",
        file.frames.len(),
        path.display()
    );
    Ok(())
}
