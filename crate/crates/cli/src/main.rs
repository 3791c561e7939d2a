use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fuselane_core::env::LaneEnv;
use fuselane_core::harness::{
    self, build_env, evaluate, median_rmse, new_trainer, normalizer_from_checkpoint, record_rollout, resume_trainer, run_ablation, train_run,
    write_metrics_csv, RunConfig, Variant,
};
use fuselane_core::perception::render_raster;
use fuselane_core::ppo::{gradcheck, Checkpoint};
use fuselane_core::reward::{total_reward, RewardParams};
use fuselane_core::semantics::{all_descriptors, caption_text};
use fuselane_core::sim::{TrackPoolDoc, TrackSpec};
use fuselane_core::{fusion, Error};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "fuselane", version, about = "Lane keeping with fused observations and PPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Track pool document used instead of the generated pool.
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes training_log.csv and checkpoint.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint; its stored configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the trial protocol; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides eval.n_trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train and evaluate branch-masked variants; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.map(|v| v.name().to_string()))]
        variants: Vec<String>,
    },
    /// Replay a policy (or the PID driver without a checkpoint) and dump rollout.jsonl.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Include rasters in every line.
        #[arg(long)]
        dump_full: bool,
    },
    /// Print reward terms over a grid of offsets, distances and speeds.
    RewardTable {
        #[command(flatten)]
        common: Common,
    },
    /// Write the raster seen at a given step of the PID driver as PGM.
    InspectRaster {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Output image; defaults to <out>/raster.pgm.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Print the caption of the scene at a given step, or every caption with --all.
    InspectCaption {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference check of the analytic gradient on a miniature network.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        batches: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Divergence(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::EmptyPool => Failure::Config(e.to_string()),
            Error::Divergence(_) => Failure::Divergence(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_tracks(c: &Common) -> std::result::Result<Option<Vec<TrackSpec>>, Failure> {
    let Some(p) = &c.tracks else { return Ok(None) };
    let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
    let doc = TrackPoolDoc::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
    Ok(Some(doc.tracks))
}

fn load_checkpoint(path: Option<&Path>) -> std::result::Result<Checkpoint, Failure> {
    let path = path.ok_or_else(|| Failure::Config("a checkpoint is required (--checkpoint <path>)".into()))?;
    if !path.exists() {
        return Err(Failure::Config(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::read(path)?)
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn train(common: &Common, resume: Option<&Path>) -> Outcome {
    let tracks = load_tracks(common)?;
    let (cfg, trainer) = match resume {
        Some(p) => {
            if common.config.is_some() || common.seed.is_some() {
                return Err(Failure::Config("--resume uses the configuration stored in the checkpoint".into()));
            }
            let (mut cfg, tr) = resume_trainer(load_checkpoint(Some(p))?, tracks)?;
            cfg.output_dir = match &common.out {
                Some(o) => o.clone(),
                None => p.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            (cfg, tr)
        }
        None => {
            let cfg = load_config(common)?;
            let tr = new_trainer(&cfg, tracks)?;
            (cfg, tr)
        }
    };
    let total = cfg.ppo_config().num_updates();
    let tr = train_run(&cfg, trainer, |tr, m, s| {
        eprintln!(
            "update {}/{} steps {} return {:.3} |dx| {:.3} m actor {:.4} critic {:.4} kl {:.4}",
            tr.updates, total, tr.steps, s.mean_return, s.mean_abs_dx_m, m.actor_loss, m.critic_loss, m.approx_kl
        );
        Ok(())
    })?;
    println!("trained {} updates, {} steps; outputs in {}", tr.updates, tr.steps, cfg.output_dir.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, trials: Option<usize>) -> Outcome {
    let mut cfg = load_config(common)?;
    let ck = load_checkpoint(checkpoint)?;
    if let Some(n) = trials {
        cfg.eval.n_trials = n;
    }
    cfg.validate()?;
    if ck.net_config() != cfg.net_config() {
        return Err(Failure::Config("checkpoint network does not match the configuration".into()));
    }
    let net = ck.net()?;
    let normalizer = normalizer_from_checkpoint(&ck)?;
    let (records, summary) = evaluate(&net, &cfg.env_config(), &cfg.eval, Some(&normalizer))?;
    let path = cfg.output_dir.join(harness::METRICS);
    let mut out = create(&path)?;
    write_metrics_csv(&mut out, &records, &summary)?;
    out.flush()?;
    println!(
        "trials {} pooled RMSE {:.4} m Std {:.4} m nRMSE {:.4}; per-trial mean RMSE {:.4} m; mean return {:.2}; failures {}",
        summary.n_trials, summary.pooled.rmse, summary.pooled.std, summary.pooled.nrmse, summary.trial_mean.rmse, summary.mean_return, summary.failures
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(common: &Common, seeds: &[u64], variants: &[String]) -> Outcome {
    let cfg = load_config(common)?;
    if common.tracks.is_some() {
        return Err(Failure::Config("ablate uses the generated track pool; --tracks is not supported".into()));
    }
    let variants = variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>, _>>()?;
    let rows = run_ablation(&cfg, &variants, seeds, |r| match &r.summary {
        Some(s) => eprintln!("{} seed {}: pooled RMSE {:.4} m, mean return {:.2}", r.variant.name(), r.seed, s.pooled.rmse, s.mean_return),
        None => eprintln!("{} seed {}: diverged", r.variant.name(), r.seed),
    })?;
    for v in variants {
        if let Some(m) = median_rmse(&rows, v) {
            println!("{:<20} median RMSE {:.4} m", v.name(), m);
        }
    }
    println!("wrote {}", cfg.output_dir.join(harness::ABLATION).display());
    Ok(())
}

fn rollout(common: &Common, checkpoint: Option<&Path>, steps: usize, full: bool) -> Outcome {
    let cfg = load_config(common)?;
    let mut env = build_env(&cfg, load_tracks(common)?)?;
    let transitions = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(Some(p))?;
            if ck.net_config() != cfg.net_config() {
                return Err(Failure::Config("checkpoint network does not match the configuration".into()));
            }
            env.state.normalizer = normalizer_from_checkpoint(&ck)?;
            let net = ck.net()?;
            record_rollout(&mut env, Some(&net.frozen()), steps)?
        }
        None => record_rollout(&mut env, None, steps)?,
    };
    let path = cfg.output_dir.join(harness::ROLLOUT);
    let mut out = create(&path)?;
    fusion::write_jsonl(&mut out, &transitions, full)?;
    out.flush()?;
    println!("wrote {} transitions to {}", transitions.len(), path.display());
    Ok(())
}

fn reward_table(common: &Common) -> Outcome {
    let p: RewardParams = load_config(common)?.reward;
    println!("dx_px,d_min_m,v_kmh,r_lane,r_lidar,r_speed,r_center,reward,terminated");
    for dx in [0.0, 10.0, 25.0, 50.0, 80.0, 120.0] {
        for d_min in [2.0, 2.8, 3.0, 4.0, 6.0, 8.0, 9.0, 10.0, 12.0] {
            for v in [0.0, 20.0, 40.0] {
                let b = total_reward(dx, d_min, v, 0, &p);
                println!("{dx},{d_min},{v},{},{},{},{},{},{}", b.r_lane, b.r_lidar, b.r_speed, b.r_center, b.reward, b.terminated);
            }
        }
    }
    Ok(())
}

/// Environment advanced `step` steps by the PID driver.
fn env_at_step(common: &Common, step: usize) -> std::result::Result<(RunConfig, LaneEnv), Failure> {
    let cfg = load_config(common)?;
    let mut env = build_env(&cfg, load_tracks(common)?)?;
    let mut obs = env.reset()?;
    for _ in 0..step {
        let a = fuselane_core::env::pid_driver_action(&obs);
        let st = env.step(a[0], a[1])?;
        if st.done() {
            return Err(Failure::Config(format!("episode ended before step {step}")));
        }
        obs = st.obs;
    }
    Ok((cfg, env))
}

fn inspect_raster(common: &Common, step: usize, image: Option<&Path>) -> Outcome {
    let (cfg, env) = env_at_step(common, step)?;
    let raster = render_raster(&env.state.vehicle, env.track(), &cfg.perception);
    let path = image.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("raster.pgm"));
    let mut out = create(&path)?;
    out.write_all(&raster.to_pgm())?;
    out.flush()?;
    let lit = raster.pixels.iter().filter(|&&v| v >= cfg.perception.binarize_threshold).count();
    println!(
        "{}x{} raster, {lit} marking pixels, offset {:.3} m; wrote {}",
        raster.width,
        raster.height,
        env.state.vehicle.lateral_offset,
        path.display()
    );
    Ok(())
}

fn inspect_caption(common: &Common, step: usize, all: bool) -> Outcome {
    if all {
        let mut seen = std::collections::BTreeSet::new();
        for d in all_descriptors() {
            if seen.insert(caption_text(&d)) {
                println!("{}", caption_text(&d));
            }
        }
        return Ok(());
    }
    let (_, env) = env_at_step(common, step)?;
    let scene = env.state.scene.ok_or_else(|| Failure::Other("no scene after reset".into()))?;
    println!("{}", serde_json::to_string(&scene).map_err(|e| Failure::Other(e.to_string()))?);
    println!("{}", caption_text(&scene));
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Train { common, resume } => train(common, resume.as_deref()),
        Command::Eval { common, checkpoint, trials } => eval(common, checkpoint.as_deref(), *trials),
        Command::Ablate { common, seeds, variants } => ablate(common, seeds, variants),
        Command::Rollout { common, checkpoint, steps, dump_full } => rollout(common, checkpoint.as_deref(), *steps, *dump_full),
        Command::RewardTable { common } => reward_table(common),
        Command::InspectRaster { common, step, image } => inspect_raster(common, *step, image.as_deref()),
        Command::InspectCaption { common, step, all } => inspect_caption(common, *step, *all),
        Command::Gradcheck { seed, batches, batch_size } => {
            let r = gradcheck(*seed, *batches, *batch_size, 1e-5)?;
            println!(
                "max relative error {:.3e} over {} parameters x {} batches (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
                r.max_rel_error, r.params, r.batches, r.worst_tensor, r.worst_index, r.worst_analytic, r.worst_numeric
            );
            if r.max_rel_error < 1e-4 {
                Ok(())
            } else {
                Err(Failure::Other("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Divergence(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DIVERGENCE)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
