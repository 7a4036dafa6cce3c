//! `tendon-leg` command-line driver: babble, train, run and task.
//!
//! Every command writes into a fresh `<out>/<name>/<timestamp>/` directory
//! holding the resolved config, a provenance manifest and its outputs.
//! Exit codes: 0 success, 1 config or input error, 2 simulation divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use tendon_leg::config::RunConfig;
use tendon_leg::controller::{self, EpisodeConfig, DT_CTRL};
use tendon_leg::experiments::tasks::{run_task, task_refinement, TASK_NAMES};
use tendon_leg::inverse_map::{self, InverseMap, SampleSet};
use tendon_leg::trajectories::generate_babbling;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "tendon-leg", version, about = "Tendon-driven leg simulator and experiment harness")]
struct Cli {
    /// Flat `key = value` config file, applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root output directory (default `runs`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll a random activation signal through the plant and record samples.
    Babble {
        /// Signal length in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Train an inverse map on a sample set.
    Train {
        /// Sample-set CSV written by `babble`.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an existing map instead of a fresh initialisation.
        #[arg(long, value_name = "FILE")]
        warm_start: Option<PathBuf>,
    },
    /// Track one trajectory and record the episode.
    Run {
        #[arg(long, value_name = "FILE")]
        map: PathBuf,
        /// open | closed
        #[arg(long)]
        mode: Option<String>,
        /// Proportional gain for both joints.
        #[arg(long)]
        kp: Option<f64>,
        /// Integral gain for both joints.
        #[arg(long)]
        ki: Option<f64>,
        /// Sensory delay in milliseconds.
        #[arg(long)]
        delay_ms: Option<f64>,
        /// cyclical | point-to-point | sinusoid
        #[arg(long)]
        trajectory: Option<String>,
        /// Cycle period in seconds.
        #[arg(long)]
        period: Option<f64>,
    },
    /// Run one experiment of the task suite.
    Task {
        /// One of: cyclical, point-to-point, period-sweep, gantry,
        /// posture-weight, refine, delay-sweep, gain-sweep.
        name: String,
        /// Pre-trained map; without it the map is babbled and trained first.
        #[arg(long, value_name = "FILE")]
        map: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Debug)]
struct Diverged(String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "simulation diverged: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

#[derive(Serialize)]
struct Provenance {
    command: String,
    config_hash: String,
    seed: u64,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A directory that did not exist before this call.
fn fresh_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let parent = root.join(name);
    std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    for n in 0.. {
        let dir = if n == 0 {
            parent.join(&stamp)
        } else {
            parent.join(format!("{stamp}-{n}"))
        };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

/// Write the resolved config and the provenance manifest into `dir`.
fn finish_dir(dir: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    let cfg_path = dir.join("config.cfg");
    std::fs::write(&cfg_path, cfg.render()).with_context(|| format!("writing {}", cfg_path.display()))?;
    let inputs = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let outputs = outputs
        .iter()
        .map(|name| Ok((name.to_string(), sha256_file(&dir.join(name))?)))
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance {
        command: command.to_string(),
        config_hash: cfg.content_hash(),
        seed: cfg.seed,
        inputs,
        outputs,
    };
    let p = dir.join("provenance.json");
    std::fs::write(&p, serde_json::to_string_pretty(&prov)?).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    push("out", cli.out.as_ref().map(|p| p.display().to_string()));
    match &cli.command {
        Command::Babble { duration } => push("babble_duration", duration.map(|d| d.to_string())),
        Command::Train { epochs, .. } => push("epochs", epochs.map(|e| e.to_string())),
        Command::Run {
            mode,
            kp,
            ki,
            delay_ms,
            trajectory,
            period,
            ..
        } => {
            push("mode", mode.clone());
            push("kp", kp.map(|v| v.to_string()));
            push("ki", ki.map(|v| v.to_string()));
            push("delay_ms", delay_ms.map(|v| v.to_string()));
            push("trajectory", trajectory.clone());
            push("period", period.map(|v| v.to_string()));
        }
        Command::Task { trials, .. } => push("trials", trials.map(|t| t.to_string())),
    }
    Ok(RunConfig::resolve(cli.config.as_deref(), &overrides)?)
}

fn babble_samples(cfg: &RunConfig) -> Result<SampleSet> {
    let sig = generate_babbling(cfg.babble_duration, DT_CTRL, cfg.seed)?;
    match controller::babble(&sig, &cfg.plant) {
        Err(e @ tendon_leg::Error::Diverged { .. }) => Err(Diverged(e.to_string()).into()),
        other => Ok(other?),
    }
}

fn cmd_babble(cfg: &RunConfig) -> Result<()> {
    let data = babble_samples(cfg)?;
    let dir = fresh_dir(&cfg.out, "babble")?;
    let path = dir.join("samples.csv");
    data.save_csv(&path)?;
    finish_dir(&dir, "babble", cfg, &[], &["samples.csv"])?;
    println!("{} samples -> {}", data.len(), path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data_path: &Path, warm: Option<&Path>) -> Result<()> {
    let data = SampleSet::load_csv(data_path)?;
    let map = match warm {
        Some(p) => {
            let m = InverseMap::load(p)?;
            if cfg.epochs == 0 {
                m
            } else {
                inverse_map::refine(&m, &data, cfg.seed, cfg.epochs)?
            }
        }
        None => inverse_map::train(&data, cfg.seed, cfg.epochs)?,
    };
    let dir = fresh_dir(&cfg.out, "train")?;
    let path = dir.join("map.txt");
    map.save(&path)?;
    let mut inputs = vec![data_path];
    inputs.extend(warm);
    finish_dir(&dir, "train", cfg, &inputs, &["map.txt"])?;
    println!("final loss {:.6} -> {}", map.meta.final_loss, path.display());
    Ok(())
}

fn cmd_run(cfg: &RunConfig, map_path: &Path) -> Result<()> {
    let map = InverseMap::load(map_path)?;
    let traj = cfg.trajectory()?;
    let ep = EpisodeConfig {
        mode: cfg.mode,
        gains: cfg.gains,
        delay_ticks: cfg.delay_ticks(),
        seed: cfg.seed,
        label: "run".into(),
    };
    let mut rec = controller::run_episode(&traj, &cfg.plant, &map, &ep)?;
    rec.map_hash = map.content_hash();
    rec.config_hash = cfg.content_hash();
    let dir = fresh_dir(&cfg.out, "run")?;
    rec.save(&dir, "episode")?;
    finish_dir(&dir, "run", cfg, &[map_path], &["episode.json", "episode.csv"])?;
    println!(
        "mode={} rmse={:.6} proximal={:.6} distal={:.6} -> {}",
        rec.mode.as_str(),
        rec.rmse.aggregate,
        rec.rmse.per_joint[0],
        rec.rmse.per_joint[1],
        dir.display()
    );
    if rec.failed {
        return Err(Diverged(rec.failure.unwrap_or_default()).into());
    }
    Ok(())
}

fn cmd_task(cfg: &RunConfig, name: &str, map_path: Option<&Path>) -> Result<()> {
    if !TASK_NAMES.contains(&name) {
        bail!("unknown task `{name}`; valid tasks: {}", TASK_NAMES.join(", "));
    }
    let dir = fresh_dir(&cfg.out, name)?;
    let mut outputs = vec![];
    let report = if name == "refine" {
        // Refinement babbles and trains its own maps per trajectory.
        task_refinement(&cfg.task_setup(""), &cfg.task_options().refine)?
    } else {
        let map = match map_path {
            Some(p) => InverseMap::load(p)?,
            None => {
                let data = babble_samples(cfg)?;
                let m = inverse_map::train(&data, cfg.seed, cfg.epochs)?;
                m.save(&dir.join("map.txt"))?;
                outputs.push("map.txt");
                m
            }
        };
        let setup = cfg.task_setup(&map.content_hash());
        run_task(name, &setup, &map, &cfg.task_options())?
    };
    report.save(&dir)?;
    outputs.extend(["report.json", "trials.csv", "summary.csv", "tests.csv"]);
    let inputs: Vec<&Path> = map_path.into_iter().collect();
    finish_dir(&dir, &format!("task {name}"), cfg, &inputs, &outputs)?;
    for c in &report.comparisons {
        match &c.test {
            Some(t) => println!("{:<28} p={:.3e} median diff={:+.5}", c.label, t.p_value, t.median_difference),
            None => println!("{:<28} (not enough pairs)", c.label),
        }
    }
    println!("report -> {}", dir.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Babble { .. } => cmd_babble(&cfg),
        Command::Train { data, warm_start, .. } => cmd_train(&cfg, data, warm_start.as_deref()),
        Command::Run { map, .. } => cmd_run(&cfg, map),
        Command::Task { name, map, .. } => cmd_task(&cfg, name, map.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let diverged = err.chain().any(|e| {
        e.is::<Diverged>() || matches!(e.downcast_ref::<tendon_leg::Error>(), Some(tendon_leg::Error::Diverged { .. }))
    });
    if diverged {
        EXIT_DIVERGED
    } else {
        EXIT_CONFIG
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
