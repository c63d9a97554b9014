//! Config-driven workflows: train a denoiser, sample inference chains,
//! evaluate samples, visualize schedules.
//!
//! Subcommands compose through files: `train` writes a checkpoint, `sample`
//! reads it and writes samples CSV, `eval` reads the samples back. Every run
//! writes the resolved config next to its artifacts. Exit codes: 0 success,
//! 1 config error, 2 runtime error.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DVector;

use config::{DenoiserKind, FormatKind, RunConfig, ScheduleKindConfig};
use sre_core::denoiser::Denoiser;
use sre_core::net::{checkpoint, train, DenoiserNet, NeuralDenoiser};
use sre_core::oracle::OracleDenoiser;
use sre_core::sampler::{
    initial_state, mix_seed, run_inference, InferencePolicy, NoiseStreams,
};
use sre_core::schedule::build_schedule;
use sre_core::state::ReasoningState;
use sre_core::task::{evaluate_samples, TaskDomain};

#[derive(Parser)]
#[command(name = "sre", about = "Generative reasoning over noisy variable sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the neural denoiser and write a checkpoint plus loss trace.
    Train(CommonArgs),
    /// Run inference chains and write samples (and optionally a trajectory).
    Sample(CommonArgs),
    /// Evaluate previously written samples against the task's ground truth.
    Eval(CommonArgs),
    /// Render the configured schedule as a grayscale heat map.
    VizSchedule(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides sampler.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.directory from the config.
    #[arg(long)]
    out: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::Train(a) | Command::Sample(a) | Command::Eval(a) | Command::VizSchedule(a) => a,
    };

    // config phase: exit 1 on any failure here
    let cfg = match load_config(args, &cli.command) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("config error: {err:#}");
            return ExitCode::from(1);
        }
    };

    // run phase: exit 2 on failure
    let result = match &cli.command {
        Command::Train(_) => run_train(&cfg),
        Command::Sample(_) => run_sample(&cfg),
        Command::Eval(_) => run_eval(&cfg),
        Command::VizSchedule(_) => run_viz_schedule(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &CommonArgs, command: &Command) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.directory = out.clone();
    }
    // referenced files must exist before any work starts
    match command {
        Command::Sample(_) | Command::Eval(_) if cfg.denoiser.kind == DenoiserKind::Neural => {
            let path = cfg
                .denoiser
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("denoiser.kind=\"neural\" requires denoiser.checkpoint"))?;
            if !Path::new(path).exists() {
                bail!("denoiser.checkpoint {path} does not exist");
            }
        }
        Command::Train(_) => {
            if cfg.train.is_none() {
                bail!("the train subcommand requires a [train] section");
            }
            if cfg.denoiser.kind != DenoiserKind::Neural {
                bail!("the train subcommand requires denoiser.kind=\"neural\"");
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn prepare_out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output.directory);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let resolved = toml::to_string_pretty(cfg).context("serialize resolved config")?;
    std::fs::write(dir.join("resolved_config.toml"), resolved)?;
    Ok(dir)
}

fn build_denoiser(
    cfg: &RunConfig,
    task: &TaskDomain,
    paradigm: &sre_core::paradigm::Paradigm,
) -> anyhow::Result<Box<dyn Denoiser>> {
    Ok(match cfg.denoiser.kind {
        DenoiserKind::Oracle => Box::new(OracleDenoiser::new(
            task.mixture.clone(),
            paradigm.clone(),
            task.dim,
        )?),
        DenoiserKind::Neural => {
            let path = cfg.denoiser.checkpoint.as_ref().expect("checked at load");
            let net = checkpoint::load(path)?;
            if net.config().dim != task.dim {
                bail!(
                    "checkpoint dim {} does not match task dim {}",
                    net.config().dim,
                    task.dim
                );
            }
            Box::new(NeuralDenoiser {
                net,
                positions: task.positions.clone(),
                paradigm: paradigm.clone(),
            })
        }
    })
}

fn clamp_entries(cfg: &RunConfig) -> Vec<(usize, DVector<f64>)> {
    cfg.task
        .conditioning
        .iter()
        .map(|e| (e.variable, DVector::from_vec(e.values.clone())))
        .collect()
}

fn conditioned_mask(cfg: &RunConfig, n: usize) -> Vec<bool> {
    let mut mask = vec![false; n];
    for e in &cfg.task.conditioning {
        mask[e.variable] = true;
    }
    mask
}

fn run_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let task = cfg.build_task()?;
    let paradigm = cfg.build_paradigm()?;
    let tsampler = cfg.build_tsampler()?;
    let net_cfg = cfg.build_net_config(&task)?;
    let train_cfg = cfg.build_train_config()?;
    let seed = cfg.sampler.seed;

    let mut net = DenoiserNet::new(net_cfg, seed)?;
    let trace = train::train(&mut net, &task, &tsampler, &paradigm, &train_cfg, seed)?;

    let ckpt_path = cfg
        .denoiser
        .checkpoint
        .clone()
        .unwrap_or_else(|| dir.join("checkpoint.srnn").to_string_lossy().into_owned());
    checkpoint::save(&net, &ckpt_path)?;

    if cfg.wants(FormatKind::Csv) {
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("loss_trace.csv"))?);
        writeln!(out, "step,loss")?;
        for (step, loss) in trace.iter().enumerate() {
            writeln!(out, "{step},{loss}")?;
        }
    }
    println!(
        "trained {} steps; checkpoint {}; final loss {:.6}",
        trace.len(),
        ckpt_path,
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn thread_count(chains: usize) -> usize {
    std::env::var("SRE_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .min(chains.max(1))
}

/// Runs `count` jobs on a bounded worker pool, preserving job order.
fn run_parallel<T: Send>(
    count: usize,
    threads: usize,
    job: impl Fn(usize) -> anyhow::Result<T> + Sync,
) -> anyhow::Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let mut gathered: Vec<(usize, anyhow::Result<T>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut acc = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break;
                        }
                        acc.push((i, job(i)));
                    }
                    acc
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    gathered.sort_by_key(|(i, _)| *i);
    gathered.into_iter().map(|(_, r)| r).collect()
}

fn run_sample(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let task = cfg.build_task()?;
    let paradigm = cfg.build_paradigm()?;
    let method = cfg.build_method();
    let denoiser = build_denoiser(cfg, &task, &paradigm)?;
    let mask = conditioned_mask(cfg, task.n);
    let clamps = clamp_entries(cfg);

    let policy = if cfg.schedule.kind == ScheduleKindConfig::AdaptiveCertainty {
        InferencePolicy::AdaptiveCertainty {
            select_k: cfg.schedule.k.unwrap_or(1),
            steps: cfg.schedule.steps,
            graph: task.graph.clone(),
        }
    } else {
        let spec = cfg.build_schedule_spec(task.n)?;
        InferencePolicy::Schedule(build_schedule(&spec, task.n, &mask, task.graph.as_ref())?)
    };

    let chains = cfg.sampler.chains;
    let master = cfg.sampler.seed;
    let record = cfg.sampler.record;
    let results = run_parallel(chains, thread_count(chains), |chain| {
        let seed = mix_seed(master, chain as u64);
        let noise = NoiseStreams::new(seed);
        let initial = initial_state(task.n, task.dim, &clamps, &noise)?;
        let out = run_inference(
            denoiser.as_ref(),
            &initial,
            &policy,
            &paradigm,
            &method,
            seed,
            record && chain == 0,
        )?;
        Ok(out)
    })?;

    if cfg.wants(FormatKind::Csv) {
        let path = dir.join("samples.csv");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let header: Vec<String> = (0..task.n)
            .flat_map(|i| (0..task.dim).map(move |j| format!("v{i}_{j}")))
            .collect();
        writeln!(out, "chain,{}", header.join(","))?;
        for (chain, result) in results.iter().enumerate() {
            let vals: Vec<String> = (0..task.n)
                .flat_map(|i| {
                    (0..task.dim).map(move |j| format!("{}", result.state.values()[(i, j)]))
                })
                .collect();
            writeln!(out, "{chain},{}", vals.join(","))?;
        }
        if record {
            if let Some(trajectory) = &results[0].trajectory {
                trajectory.write_csv(dir.join("trajectory.csv"))?;
            }
        }
        println!("wrote {} chains to {}", chains, path.display());
    }
    Ok(())
}

fn read_samples(
    path: &Path,
    task: &TaskDomain,
    mask: &[bool],
) -> anyhow::Result<Vec<ReasoningState>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read samples {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty samples file"))?;
    let expected_cols = 1 + task.n * task.dim;
    if header.split(',').count() != expected_cols {
        bail!(
            "samples header has {} columns, expected {expected_cols}",
            header.split(',').count()
        );
    }
    let mut states = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            bail!("samples row {} has {} columns", lineno + 2, fields.len());
        }
        let mut values = nalgebra::DMatrix::zeros(task.n, task.dim);
        for i in 0..task.n {
            for j in 0..task.dim {
                values[(i, j)] = fields[1 + i * task.dim + j]
                    .parse::<f64>()
                    .with_context(|| format!("bad value at row {}", lineno + 2))?;
            }
        }
        states.push(ReasoningState::new(
            values,
            DVector::zeros(task.n),
            mask.to_vec(),
        )?);
    }
    Ok(states)
}

fn run_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let task = cfg.build_task()?;
    let mask = conditioned_mask(cfg, task.n);
    let samples = read_samples(&dir.join("samples.csv"), &task, &mask)?;
    let metrics = evaluate_samples(&samples, &task, None)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if cfg.wants(FormatKind::Json) {
        std::fs::write(dir.join("metrics.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}

fn run_viz_schedule(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let task = cfg.build_task()?;
    let mask = conditioned_mask(cfg, task.n);
    let spec = cfg.build_schedule_spec(task.n)?;
    let schedule = build_schedule(&spec, task.n, &mask, task.graph.as_ref())?;
    if cfg.wants(FormatKind::Pgm) {
        schedule.write_pgm(dir.join("schedule.pgm"), 32)?;
    }
    if cfg.wants(FormatKind::Csv) {
        schedule.write_csv(dir.join("schedule.csv"))?;
    }
    println!(
        "schedule {} x {} written to {}",
        schedule.n(),
        schedule.steps() + 1,
        dir.display()
    );
    Ok(())
}
