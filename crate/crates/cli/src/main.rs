//! Command-line front end binding the pipeline into a reproducible tool.
//!
//! Exit codes: 0 success, 1 validation failure (bad config, bad input files),
//! 2 runtime failure (including a failed gradient check).

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cyclassoc::checkpoint::{load_checkpoint, save_checkpoint};
use cyclassoc::config::RunConfig;
use cyclassoc::diffmath::{run_gradcheck_suite_perturbed, DEFAULT_STEP, DEFAULT_TOLERANCE};
use cyclassoc::evalkit::{build_probe_pairs, build_probes, evaluate_probe, run_sweep, SweepRow};
use cyclassoc::gradcheck::check_composed_losses;
use cyclassoc::sim::{measure_symmetry, write_batch_bin, write_batch_csv, PairKind, Simulator};
use cyclassoc::trainer::{train, CsvSink};
use cyclassoc::Error;

#[derive(Parser)]
#[command(name = "cyclassoc", version, about = "Cycle-association embedding lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides out_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference validation of every differentiable operation and the
    /// composed losses; exits nonzero on any failure.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
        /// Negative-control fixture: perturbs the measured errors so the
        /// suite must fail.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Train a model; writes resolved config, checkpoint, and metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out probe; prints metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate one model per grid point; resumable CSV output.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Dump generated frame pairs and a symmetry summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of pairs to dump; 0 writes the summary only.
        #[arg(long, default_value_t = 0)]
        count: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> cyclassoc::Result<()> {
    match cli.command {
        Command::Gradcheck { seed, quiet, inject_bug } => cmd_gradcheck(seed, quiet, inject_bug),
        Command::Train { common } => cmd_train(common),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Simulate { common, count } => cmd_simulate(common, count),
    }
}

fn load(common: &Common) -> cyclassoc::Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::from_path(&common.config)?.with_seed(common.seed);
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run-out"));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn cmd_gradcheck(seed: Option<u64>, quiet: bool, inject_bug: bool) -> cyclassoc::Result<()> {
    let seed = seed.unwrap_or(42);
    let bug = if inject_bug { 1.0 } else { 0.0 };
    let mut failures = 0usize;
    let reports = run_gradcheck_suite_perturbed(seed, 20, DEFAULT_STEP, DEFAULT_TOLERANCE, bug);
    for r in &reports {
        if !r.passed() {
            failures += 1;
        }
        if !quiet || !r.passed() {
            println!(
                "{:<32} max_rel_err {:>12.3e}  {}",
                r.op,
                r.max_rel_err,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
    }
    for c in check_composed_losses(seed, 20, DEFAULT_STEP)? {
        let err = c.max_rel_err + bug;
        let pass = err < DEFAULT_TOLERANCE;
        if !pass {
            failures += 1;
        }
        if !quiet || !pass {
            println!(
                "{:<32} max_rel_err {:>12.3e}  {}",
                c.name,
                err,
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    if failures > 0 {
        return Err(Error::Checkpoint(format!("gradient check failed for {failures} entries")));
    }
    if !quiet {
        println!("all gradient checks passed at tolerance {DEFAULT_TOLERANCE:e}");
    }
    Ok(())
}

fn cmd_train(common: Common) -> cyclassoc::Result<()> {
    let (cfg, out) = load(&common)?;
    cfg.echo_to(&out)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.nan_dump_dir = Some(out.clone());
    let mut sink = CsvSink::create(&out.join("metrics.csv"))?;
    let started = std::time::Instant::now();
    let outcome = train(&train_cfg, &mut sink)?;
    save_checkpoint(&out.join("checkpoint.bin"), &outcome.encoder, &outcome.optimizer)?;
    if !common.quiet {
        let last = outcome.metrics.last();
        eprintln!(
            "trained {} epochs in {:.1}s (skipped {} degenerate batches); final rank1 {}",
            outcome.metrics.len(),
            started.elapsed().as_secs_f64(),
            outcome.skipped_degenerate,
            last.map_or(f64::NAN, |m| m.rank1_probe)
        );
        eprintln!("artifacts in {}", out.display());
    }
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: PathBuf) -> cyclassoc::Result<()> {
    let (cfg, out) = load(&common)?;
    let train_cfg = cfg.train_config();
    let (encoder, _optimizer) = load_checkpoint(&checkpoint)?;
    if encoder.input_dim() != train_cfg.stream.d_obs {
        return Err(Error::Config(format!(
            "checkpoint expects {}-dim observations but config stream.d_obs is {}",
            encoder.input_dim(),
            train_cfg.stream.d_obs
        )));
    }
    let probes = build_probes(
        &train_cfg.stream,
        train_cfg.probe_gallery_per_id,
        train_cfg.probe_repeats,
    )?;
    let pairs = build_probe_pairs(&train_cfg.stream, train_cfg.probe_pairs)?;
    let m = evaluate_probe(&encoder, &probes, &pairs, &train_cfg.loss)?;
    let json = serde_json::json!({
        "rank1": m.rank1,
        "rank5": m.rank5,
        "map": m.map,
        "cycle_acc": m.cycle_acc,
        "assoc_acc": m.assoc_acc,
    });
    let text = serde_json::to_string_pretty(&json).expect("metrics serialize");
    println!("{text}");
    std::fs::write(out.join("eval.json"), text)?;
    Ok(())
}

fn cmd_sweep(common: Common) -> cyclassoc::Result<()> {
    let (cfg, out) = load(&common)?;
    cfg.echo_to(&out)?;
    let csv_path = out.join("sweep.csv");
    let done: HashSet<String> = if csv_path.exists() {
        std::fs::read_to_string(&csv_path)?
            .lines()
            .skip(1)
            .filter_map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                (f.len() >= 9).then(|| format!("{},{},{},{},{}", f[0], f[1], f[2], f[3], f[8]))
            })
            .collect()
    } else {
        std::fs::write(&csv_path, format!("{}\n", SweepRow::CSV_HEADER))?;
        HashSet::new()
    };
    let mut file = std::fs::OpenOptions::new().append(true).open(&csv_path)?;
    let base = cfg.train_config();
    let quiet = common.quiet;
    let computed = run_sweep(
        &base,
        &cfg.sweep,
        |point| {
            let key = format!(
                "{},{},{},{},{}",
                point.tau_alpha, point.tau_beta, point.memory_capacity, point.top_k, point.seed
            );
            let skip = done.contains(&key);
            if skip && !quiet {
                eprintln!("skipping completed point {key}");
            }
            skip
        },
        |row| {
            writeln!(file, "{}", row.csv_line())?;
            file.flush()?;
            if !quiet {
                eprintln!("done: {}", row.csv_line());
            }
            Ok(())
        },
    )?;
    if !common.quiet {
        eprintln!("sweep: {computed} new points, output {}", csv_path.display());
    }
    Ok(())
}

fn cmd_simulate(common: Common, count: usize) -> cyclassoc::Result<()> {
    let (cfg, out) = load(&common)?;
    cfg.echo_to(&out)?;
    let stream = cfg.train_config().stream;
    let mut sim = Simulator::new(stream)?;
    let mut taus: Vec<(PairKind, f64)> = Vec::new();
    // With nothing to dump, the summary still reports tau statistics over a
    // fixed number of sampled pairs.
    let summarized = if count == 0 { 200 } else { count };
    let mut bin = if count > 0 {
        Some(std::fs::File::create(out.join("batches.bin"))?)
    } else {
        None
    };
    for i in 0..summarized {
        let pair = sim.sample_pair()?;
        taus.push((pair.kind(), measure_symmetry(&pair)));
        if i < count {
            let mut f = std::fs::File::create(out.join(format!("batch_{i:04}.csv")))?;
            write_batch_csv(&pair, &mut f)?;
            if let Some(b) = bin.as_mut() {
                write_batch_bin(&pair, b)?;
            }
        }
    }
    let stats = |kind: PairKind| {
        let vals: Vec<f64> = taus.iter().filter(|(k, _)| *k == kind).map(|(_, t)| *t).collect();
        if vals.is_empty() {
            (0usize, f64::NAN)
        } else {
            (vals.len(), vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let (n_intra, tau_alpha_mean) = stats(PairKind::Intra);
    let (n_inter, tau_beta_mean) = stats(PairKind::Inter);
    let json = serde_json::json!({
        "pairs_dumped": count,
        "pairs_summarized": summarized,
        "intra_pairs": n_intra,
        "inter_pairs": n_inter,
        "tau_alpha_mean": tau_alpha_mean,
        "tau_beta_mean": tau_beta_mean,
    });
    let text = serde_json::to_string_pretty(&json).expect("summary serialize");
    std::fs::write(out.join("summary.json"), &text)?;
    if !common.quiet {
        println!("{text}");
    }
    Ok(())
}

