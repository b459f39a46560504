//! Minimal programmatic training run; prints per-epoch metrics and the final
//! probe evaluation. Handy for eyeballing learning dynamics without the CLI.

use cyclassoc::evalkit::{build_probe_pairs, build_probes, evaluate_probe};
use cyclassoc::trainer::{train, EpochMetrics, MetricsSink, TrainConfig};

struct Stdout;

impl MetricsSink for Stdout {
    fn epoch(&mut self, m: &EpochMetrics) -> cyclassoc::Result<()> {
        println!("{}", m.csv_line());
        Ok(())
    }
}

fn main() -> cyclassoc::Result<()> {
    let mut cfg = TrainConfig::default();
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        let mut value = || args.next().expect("flag needs a value");
        match arg.as_str() {
            "--seed" => cfg.stream.seed = value().parse().unwrap(),
            "--epochs" => cfg.schedule.phases[0].epochs = value().parse().unwrap(),
            "--lr" => {
                cfg.schedule.phases[0].rule =
                    cyclassoc::optim::LrRule::Cosine { lr: value().parse().unwrap() };
            }
            "--batches" => cfg.batches_per_epoch = value().parse().unwrap(),
            "--pairs" => cfg.pairs_per_batch = value().parse().unwrap(),
            "--hidden" => {
                let width: usize = value().parse().unwrap();
                cfg.hidden = vec![width, width];
            }
            "--memory" => cfg.memory_capacity = value().parse().unwrap(),
            "--xbm-weight" => cfg.xbm_weight = value().parse().unwrap(),
            "--camera-strength" => cfg.stream.camera_strength = value().parse().unwrap(),
            "--noise" => cfg.stream.appearance_noise = value().parse().unwrap(),
            "--inter" => cfg.stream.inter_fraction = value().parse().unwrap(),
            "--tau-alpha" => cfg.stream.tau_alpha = value().parse().unwrap(),
            "--tau-beta" => cfg.stream.tau_beta = value().parse().unwrap(),
            "--tau-noise" => cfg.stream.tau_noise_std = value().parse().unwrap(),
            other => panic!("unknown flag {other}"),
        }
    }
    println!("{}", EpochMetrics::CSV_HEADER);
    let start = std::time::Instant::now();
    let outcome = train(&cfg, &mut Stdout)?;
    let probes = build_probes(&cfg.stream, cfg.probe_gallery_per_id, cfg.probe_repeats)?;
    let pairs = build_probe_pairs(&cfg.stream, cfg.probe_pairs)?;
    let m = evaluate_probe(&outcome.encoder, &probes, &pairs, &cfg.loss)?;
    println!(
        "final: rank1={} rank5={} map={} cycle_acc={} assoc_acc={} skipped={} elapsed={:.1}s",
        m.rank1,
        m.rank5,
        m.map,
        m.cycle_acc,
        m.assoc_acc,
        outcome.skipped_degenerate,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
