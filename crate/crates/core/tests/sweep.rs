//! The sweep driver against a plain train-plus-evaluate run.

use cyclassoc::evalkit::{
    build_probe_pairs, build_probes, evaluate_probe, run_sweep, SweepGrid,
};
use cyclassoc::optim::{LrRule, Phase, Schedule};
use cyclassoc::trainer::{train, NullSink, TrainConfig};

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.stream.seed = seed;
    cfg.batches_per_epoch = 5;
    cfg.probe_pairs = 4;
    cfg.schedule = Schedule::new(vec![Phase {
        epochs: 2,
        rule: LrRule::Cosine { lr: 1e-2 },
        inter_fraction: None,
    }])
    .unwrap();
    cfg
}

#[test]
fn single_point_grid_equals_a_plain_run() {
    let base = tiny_config(6);
    let mut rows = Vec::new();
    let computed = run_sweep(&base, &SweepGrid::default(), |_| false, |row| {
        rows.push(row.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(computed, 1);
    assert_eq!(rows.len(), 1);

    let outcome = train(&base, &mut NullSink).unwrap();
    let probes =
        build_probes(&base.stream, base.probe_gallery_per_id, base.probe_repeats).unwrap();
    let pairs = build_probe_pairs(&base.stream, base.probe_pairs).unwrap();
    let metrics = evaluate_probe(&outcome.encoder, &probes, &pairs, &base.loss).unwrap();

    assert_eq!(rows[0].rank1, metrics.rank1);
    assert_eq!(rows[0].map, metrics.map);
    assert_eq!(rows[0].cycle_acc, metrics.cycle_acc);
    assert_eq!(rows[0].assoc_acc, metrics.assoc_acc);
    assert_eq!(rows[0].seed, 6);
    assert_eq!(rows[0].tau_alpha, base.stream.tau_alpha);
    assert_eq!(rows[0].tau_beta, base.stream.tau_beta);
}

#[test]
fn skip_callback_short_circuits_completed_points() {
    let base = tiny_config(6);
    let grid = SweepGrid { seeds: vec![1, 2, 3], ..SweepGrid::default() };
    let mut emitted = Vec::new();
    let computed = run_sweep(&base, &grid, |p| p.seed == 2, |row| {
        emitted.push(row.seed);
        Ok(())
    })
    .unwrap();
    assert_eq!(computed, 2);
    assert_eq!(emitted, vec![1, 3]);
}
