//! Integration tests of the training loop: information flow, loss composition,
//! degenerate handling, determinism, and the non-finite abort path.

use cyclassoc::checkpoint::{load_checkpoint, save_checkpoint};
use cyclassoc::diffmath::{Graph, Matrix};
use cyclassoc::optim::{LrRule, Phase, Schedule};
use cyclassoc::sim::{FramePairBatch, PairKind, SamplingMode, Simulator};
use cyclassoc::trainer::{total_loss, train, NullSink, TrainConfig};

use cyclassoc::xbm::MemoryQueue;

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
fn zero_epochs_returns_initialized_model_without_steps() {
    let mut cfg = tiny_config(5);
    cfg.schedule = Schedule::new(vec![]).unwrap();
    let outcome = train(&cfg, &mut NullSink).unwrap();
    assert!(outcome.metrics.is_empty());
    assert_eq!(outcome.optimizer.step_count(), 0);
    let fresh = cyclassoc::encoder::Encoder::new(
        &cfg.layer_sizes(),
        cyclassoc::sim::derive_seed(cfg.stream.seed, 16),
    )
    .unwrap();
    assert_eq!(outcome.encoder.params()[0].data(), fresh.params()[0].data());
}

#[test]
fn same_seed_trains_bit_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for i in 0..2 {
        let outcome = train(&tiny_config(9), &mut NullSink).unwrap();
        let path = dir.path().join(format!("ckpt{i}.bin"));
        save_checkpoint(&path, &outcome.encoder, &outcome.optimizer).unwrap();
        paths.push(path);
    }
    assert_eq!(
        std::fs::read(&paths[0]).unwrap(),
        std::fs::read(&paths[1]).unwrap(),
        "identical seeds must reproduce identical weights and optimizer state"
    );
}

#[test]
fn loss_is_a_function_of_observations_and_video_ids_alone() {
    // Two batches identical except for their ground-truth labels must produce
    // the same loss: the training path cannot see the truth channel.
    let mut sim = Simulator::new(cyclassoc::sim::StreamConfig {
        seed: 31,
        ..Default::default()
    })
    .unwrap();
    let pair = sim.sample_intra_pair().unwrap();
    let (obs1, obs2) = pair.observations();
    let (vids1, vids2) = pair.video_ids();
    let scrambled = FramePairBatch::from_parts(
        obs1.clone(),
        obs2.clone(),
        vids1.to_vec(),
        vids2.to_vec(),
        vec![999; pair.len1()],
        vec![77; pair.len2()],
        PairKind::Intra,
    )
    .unwrap();

    let cfg = TrainConfig::default();
    let encoder = cyclassoc::encoder::Encoder::new(&cfg.layer_sizes(), 3).unwrap();
    let mut memory = MemoryQueue::new(64);
    let feats = Matrix::from_fn(cfg.embed_dim, 10, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0)
        .l2_normalized_columns(1e-12);
    memory.enqueue_batch(&feats, &(0..10u64).collect::<Vec<_>>()).unwrap();

    let eval = |batch: &FramePairBatch| {
        let mut g = Graph::new();
        let bound = encoder.bind(&mut g);
        let losses = total_loss(&mut g, &bound, batch.train_view(), &memory, &cfg).unwrap();
        g.scalar_value(losses.total)
    };
    assert_eq!(eval(&pair), eval(&scrambled));
}

#[test]
fn total_loss_reduces_to_association_loss_without_memory() {
    let mut sim = Simulator::new(cyclassoc::sim::StreamConfig {
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let pair = sim.sample_intra_pair().unwrap();
    let cfg_zero_weight =
        TrainConfig { xbm_weight: 0.0, ..TrainConfig::default() };
    let encoder = cyclassoc::encoder::Encoder::new(&cfg_zero_weight.layer_sizes(), 3).unwrap();

    let mut memory = MemoryQueue::new(64);
    let feats = Matrix::from_fn(cfg_zero_weight.embed_dim, 6, |i, j| {
        ((i + j) % 3) as f64 - 1.0
    })
    .l2_normalized_columns(1e-12);
    memory.enqueue_batch(&feats, &[1, 2, 3, 4, 5, 6]).unwrap();

    // Weight zero: total equals the association term exactly.
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g);
    let losses =
        total_loss(&mut g, &bound, pair.train_view(), &memory, &cfg_zero_weight).unwrap();
    assert_eq!(g.scalar_value(losses.total), g.scalar_value(losses.association));

    // Empty memory: the memory term is exactly zero.
    let empty = MemoryQueue::new(64);
    let cfg = TrainConfig::default();
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g);
    let losses = total_loss(&mut g, &bound, pair.train_view(), &empty, &cfg).unwrap();
    assert_eq!(g.scalar_value(losses.memory), 0.0);
    assert_eq!(g.scalar_value(losses.total), g.scalar_value(losses.association));
}

#[test]
fn perfect_embeddings_leave_only_the_memory_term() {
    // Orthonormal per-identity embeddings: the margin term is zero, so the
    // total reduces to the weighted repulsion of already-dissimilar negatives.
    let n = 4;
    let obs = Matrix::identity(n);
    let pair = FramePairBatch::from_parts(
        obs.clone(),
        obs,
        vec![1; n],
        vec![1; n],
        (0..n as u64).collect(),
        (0..n as u64).collect(),
        PairKind::Intra,
    )
    .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.stream.d_obs = n;
    cfg.hidden = vec![];
    cfg.embed_dim = n;
    let mut encoder = cyclassoc::encoder::Encoder::new(&[n, n], 0).unwrap();
    encoder.set_params(&[Matrix::identity(n), Matrix::zeros(n, 1)]).unwrap();

    let mut memory = MemoryQueue::new(16);
    // A single far-away negative under another video id.
    let neg = Matrix::from_fn(n, 1, |i, _| if i == 0 { -1.0 } else { 0.0 });
    memory.enqueue_batch(&neg, &[2]).unwrap();

    let mut g = Graph::new();
    let bound = encoder.bind(&mut g);
    let losses = total_loss(&mut g, &bound, pair.train_view(), &memory, &cfg).unwrap();
    assert_eq!(g.scalar_value(losses.association), 0.0);
    let memory_term = g.scalar_value(losses.memory);
    assert!(memory_term > 0.0, "softplus of any similarity is positive");
    assert!(
        (g.scalar_value(losses.total) - cfg.xbm_weight * memory_term).abs() < 1e-15,
        "total must be exactly the weighted memory term here"
    );
}

#[test]
fn degenerate_single_instance_batches_are_skipped_with_a_count() {
    let mut cfg = tiny_config(21);
    cfg.stream.sampling = SamplingMode::Tracklet;
    cfg.pairs_per_batch = 1; // one instance per side: no off-diagonal contrast
    let outcome = train(&cfg, &mut NullSink).unwrap();
    assert_eq!(outcome.skipped_degenerate, 10, "every batch is degenerate");
    assert_eq!(outcome.optimizer.step_count(), 0);
}

#[test]
fn tracklet_sampling_mode_trains() {
    let mut cfg = tiny_config(23);
    cfg.stream.sampling = SamplingMode::Tracklet;
    cfg.pairs_per_batch = 8;
    let outcome = train(&cfg, &mut NullSink).unwrap();
    assert_eq!(outcome.metrics.len(), 2);
    assert!(outcome.metrics.iter().all(|m| m.loss_asym.is_finite()));
    assert_eq!(outcome.skipped_degenerate, 0);
}

#[test]
fn metrics_are_finite_and_tau_means_track_targets() {
    let outcome = train(&tiny_config(29), &mut NullSink).unwrap();
    for m in &outcome.metrics {
        assert!(m.loss_asym.is_finite() && m.loss_xbm.is_finite());
        assert!(m.tau_alpha_mean.is_nan() || (0.0..=1.0).contains(&m.tau_alpha_mean));
    }
}

#[test]
fn non_finite_observations_abort_with_a_dump() {
    let dump_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(1);
    cfg.nan_dump_dir = Some(dump_dir.path().to_path_buf());
    let d = cfg.stream.d_obs;
    let mut obs = Matrix::zeros(d, 3);
    obs.set(0, 0, f64::NAN);
    let bad = FramePairBatch::from_parts(
        obs.clone(),
        obs,
        vec![1; 3],
        vec![1; 3],
        vec![0, 1, 2],
        vec![0, 1, 2],
        PairKind::Intra,
    )
    .unwrap();
    let mut encoder = cyclassoc::encoder::Encoder::new(&cfg.layer_sizes(), 3).unwrap();
    let mut optimizer =
        cyclassoc::optim::AdamW::for_params(cfg.optim, &encoder.params());
    let mut memory = MemoryQueue::new(0);
    let err = cyclassoc::trainer::train_step(&cfg, &mut encoder, &mut optimizer, &mut memory, &bad, 1e-2)
        .unwrap_err();
    assert!(
        matches!(err, cyclassoc::Error::NonFiniteLoss { .. }),
        "expected the non-finite abort, got {err}"
    );
    let dump = dump_dir.path().join("nan_batch.csv");
    assert!(dump.exists(), "offending batch must be dumped");
    let text = std::fs::read_to_string(dump).unwrap();
    assert!(text.contains("NaN"), "dump must preserve the offending values: {text}");
    assert_eq!(optimizer.step_count(), 0, "no update after an aborted step");
}

#[test]
fn checkpoint_of_trained_model_reproduces_probe_metrics() {
    let cfg = tiny_config(33);
    let outcome = train(&cfg, &mut NullSink).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&path, &outcome.encoder, &outcome.optimizer).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();

    let probes =
        cyclassoc::evalkit::build_probes(&cfg.stream, cfg.probe_gallery_per_id, cfg.probe_repeats)
            .unwrap();
    let pairs = cyclassoc::evalkit::build_probe_pairs(&cfg.stream, cfg.probe_pairs).unwrap();
    let before =
        cyclassoc::evalkit::evaluate_probe(&outcome.encoder, &probes, &pairs, &cfg.loss).unwrap();
    let after = cyclassoc::evalkit::evaluate_probe(&loaded, &probes, &pairs, &cfg.loss).unwrap();
    assert_eq!(before.rank1, after.rank1);
    assert_eq!(before.map, after.map);
    assert_eq!(
        before.rank1,
        outcome.metrics.last().unwrap().rank1_probe,
        "recorded metrics must match a fresh evaluation of the same weights"
    );
}

#[test]
fn per_phase_inter_fraction_override_controls_the_mix() {
    // Phase forcing inter_fraction = 0 never samples inter pairs, so the
    // tau_beta_mean column stays NaN.
    let mut cfg = tiny_config(41);
    cfg.schedule = Schedule::new(vec![Phase {
        epochs: 2,
        rule: LrRule::Cosine { lr: 1e-2 },
        inter_fraction: Some(0.0),
    }])
    .unwrap();
    let outcome = train(&cfg, &mut NullSink).unwrap();
    assert!(outcome.metrics.iter().all(|m| m.tau_beta_mean.is_nan()));
    assert!(outcome.metrics.iter().all(|m| !m.tau_alpha_mean.is_nan()));
}
