use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentmimic::config::{RunConfig, Stage};
use latentmimic::eval::{export_latents, EvalReport, Evaluator, StyleTracking, DEFAULT_TRIALS};
use latentmimic::motion::{GaitStyle, MotionDataset, DEFAULT_FRAME_RATE};
use latentmimic::prior::LatentPrior;
use latentmimic::sim::{build_terrain, HeightField, TerrainKind, MAX_LEVEL, MIN_LEVEL};
use latentmimic::trainer::{file_hash, run_stage, PolicyCheckpoint, Reference, PRIOR_CHECKPOINT, STYLE_CHECKPOINT};
use latentmimic::{Error, Result};

#[derive(Parser)]
#[command(name = "latentmimic", version, about = "Latent motion imitation for a simulated quadruped")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH", required = true)]
    config: PathBuf,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Motion clip file; repeat for several styles.
    #[arg(long, value_name = "PATH")]
    dataset: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration; defaults are used when absent.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Policy checkpoint [default: <out>/style_policy.ckpt].
    #[arg(long, value_name = "PATH")]
    checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the latent prior on the configured clips.
    PretrainPrior(TrainArgs),
    /// Train the style policy on flat ground.
    TrainStyle(TrainArgs),
    /// Adapt the style policy to the terrain mix.
    TrainTerrain(TrainArgs),
    /// Tracking errors of one or more policies against their reference clips.
    EvalTracking {
        #[command(flatten)]
        eval: EvalArgs,
        /// Control steps per tracking episode.
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
    /// Success rate per terrain level and the max level per threshold.
    EvalSuccess {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        terrain: TerrainKind,
        /// Levels as `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "1..8")]
        levels: String,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Latent means of every window of the configured clips, as CSV.
    ExportLatents {
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Prior checkpoint [default: <out>/prior.ckpt].
        #[arg(long, value_name = "PATH")]
        prior: Option<PathBuf>,
        #[command(flatten)]
        common: Overrides,
    },
    /// Write a terrain tile as a height-grid CSV.
    GenTerrain {
        #[arg(long)]
        kind: TerrainKind,
        #[arg(long, default_value_t = MIN_LEVEL)]
        level: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file [default: terrain_<kind>_<level>.csv].
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if !o.dataset.is_empty() {
        cfg.datasets = o.dataset.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs, stage: Stage) -> Result<()> {
    let mut cfg = load_config(Some(&args.config), &args.common)?;
    cfg.stage = stage;
    let outcome = run_stage(&cfg, stage)?;
    println!("{} {}", outcome.checkpoint.display(), outcome.checkpoint_hash);
    Ok(())
}

/// Levels from `a..b`, `a..=b` (both inclusive) or `a,b,c`.
fn parse_levels(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::InvalidArgument(format!("cannot parse level list `{s}`"));
    let levels: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if levels.is_empty() || levels.iter().any(|l| !(MIN_LEVEL..=MAX_LEVEL).contains(l)) {
        return Err(Error::InvalidArgument(format!("levels must lie in {MIN_LEVEL}..={MAX_LEVEL}: `{s}`")));
    }
    Ok(levels)
}

fn checkpoints(args: &EvalArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let paths = if args.checkpoint.is_empty() {
        vec![cfg.out_dir.join(STYLE_CHECKPOINT)]
    } else {
        args.checkpoint.clone()
    };
    if let Some(p) = paths.iter().find(|p| !p.exists()) {
        return Err(Error::MissingPrerequisite {
            stage: "evaluation",
            missing: "policy",
            path: p.clone(),
        });
    }
    Ok(paths)
}

/// The configured clip for `style`, or a generated one for a known gait.
fn clip_for(cfg: &RunConfig, datasets: &[MotionDataset], style: &str) -> Result<MotionDataset> {
    if let Some(d) = datasets.iter().find(|d| d.style == style) {
        return Ok(d.clone());
    }
    let gait: GaitStyle = style.parse()?;
    MotionDataset::generate(gait, cfg.clip_seconds, DEFAULT_FRAME_RATE)
}

fn evaluator<'a>(cfg: &RunConfig, ckpt: &'a PolicyCheckpoint, datasets: &[MotionDataset]) -> Result<Evaluator<'a>> {
    let clip = clip_for(cfg, datasets, &ckpt.style)?;
    Ok(Evaluator::for_checkpoint(
        ckpt,
        cfg.env.clone(),
        Reference::new(std::sync::Arc::new(clip))?,
        cfg.trainer.rollout.clone(),
        cfg.seed,
    ))
}

fn eval_tracking(args: &EvalArgs, steps: usize) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.common)?;
    let datasets = cfg.load_datasets()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut tracking = Vec::new();
    let mut hashes = Vec::new();
    for path in checkpoints(args, &cfg)? {
        let ckpt = PolicyCheckpoint::load(&path)?;
        let errors = evaluator(&cfg, &ckpt, &datasets)?.tracking(steps)?;
        tracking.push(StyleTracking {
            style: ckpt.style.clone(),
            errors,
        });
        hashes.push(file_hash(&path)?);
    }
    let path = cfg.out_dir.join("tracking.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["style", "base_position", "joint_angle", "joint_velocity"])?;
    for t in &tracking {
        w.write_record([
            t.style.clone(),
            t.errors.base_position.to_string(),
            t.errors.joint_angle.to_string(),
            t.errors.joint_velocity.to_string(),
        ])?;
    }
    w.flush()?;
    write_report(&cfg, hashes.join(","), tracking, Vec::new(), "tracking_report.json")?;
    println!("{}", path.display());
    Ok(())
}

fn write_report(
    cfg: &RunConfig,
    checkpoint_hash: String,
    tracking: Vec<StyleTracking>,
    success: Vec<latentmimic::eval::SuccessTable>,
    name: &str,
) -> Result<()> {
    let report = EvalReport {
        seed: cfg.seed,
        checkpoint_hash,
        tracking,
        success,
    };
    std::fs::write(cfg.out_dir.join(name), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn eval_success(args: &EvalArgs, terrain: TerrainKind, levels: &str, trials: usize) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.common)?;
    let levels = parse_levels(levels)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("--trials must be at least 1".into()));
    }
    let datasets = cfg.load_datasets()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = checkpoints(args, &cfg)?.remove(0);
    let ckpt = PolicyCheckpoint::load(&path)?;
    let table = evaluator(&cfg, &ckpt, &datasets)?.success_table(terrain, &levels, trials)?;
    let out = cfg.out_dir.join(format!("success_{terrain}.csv"));
    table.write_csv(BufWriter::new(File::create(&out)?))?;
    table.write_thresholds_csv(BufWriter::new(File::create(cfg.out_dir.join(format!("success_{terrain}_thresholds.csv")))?))?;
    write_report(&cfg, file_hash(&path)?, Vec::new(), vec![table], &format!("success_{terrain}_report.json"))?;
    println!("{}", out.display());
    Ok(())
}

fn export(config: Option<&Path>, prior: Option<&Path>, o: &Overrides) -> Result<()> {
    let cfg = load_config(config, o)?;
    let prior_path = prior.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(PRIOR_CHECKPOINT));
    if !prior_path.exists() {
        return Err(Error::MissingPrerequisite {
            stage: "export",
            missing: "prior",
            path: prior_path,
        });
    }
    let prior = LatentPrior::load(&prior_path)?;
    let clips: Vec<(String, Vec<_>)> = cfg.load_datasets()?.into_iter().map(|d| (d.style, d.frames)).collect();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("latents.csv");
    let rows = export_latents(&prior, &clips, BufWriter::new(File::create(&out)?))?;
    println!("{} {rows}", out.display());
    Ok(())
}

fn gen_terrain(kind: TerrainKind, level: u32, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let field = if kind == TerrainKind::Flat {
        HeightField::flat()
    } else {
        build_terrain(kind, level, seed)?
    };
    let out = out.unwrap_or_else(|| PathBuf::from(format!("terrain_{kind}_{level}.csv")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    field.save_csv(&out)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    latentmimic::init_thread_pool()?;
    match cli.command {
        Command::PretrainPrior(a) => train(&a, Stage::Prior),
        Command::TrainStyle(a) => train(&a, Stage::Imitation),
        Command::TrainTerrain(a) => train(&a, Stage::Adaptation),
        Command::EvalTracking { eval, steps } => eval_tracking(&eval, steps),
        Command::EvalSuccess {
            eval,
            terrain,
            levels,
            trials,
        } => eval_success(&eval, terrain, &levels, trials),
        Command::ExportLatents { config, prior, common } => export(config.as_deref(), prior.as_deref(), &common),
        Command::GenTerrain { kind, level, seed, out } => gen_terrain(kind, level, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
