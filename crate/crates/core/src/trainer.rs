//! The training loop: minibatch assembly, loss composition, AdamW updates,
//! memory maintenance, per-epoch metrics, and NaN handling.

use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::{cycle_association_forward, LossConfig};
use crate::diffmath::{Graph, Matrix, NodeId};
use crate::encoder::{BoundEncoder, Encoder};
use crate::evalkit::{build_probe_pairs, build_probes, evaluate_probe};
use crate::optim::{AdamW, AdamWConfig, LrRule, Phase, Schedule};
use crate::sim::{
    build_minibatch, derive_seed, measure_symmetry, simulate_labeled_dataset, FramePairBatch,
    PairKind, SamplingMode, Simulator, StreamConfig, TrainView,
};
use crate::xbm::{xbm_loss, MemoryQueue};
use crate::{Error, Result};

/// Substream tags for the trainer's own randomness.
const STREAM_ENCODER: u64 = 16;
const STREAM_KINDS: u64 = 17;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stream: StreamConfig,
    pub loss: LossConfig,
    /// Cross-batch memory capacity; 0 disables the memory term.
    pub memory_capacity: usize,
    pub top_k: usize,
    /// Weight of the memory repulsion term in the total loss.
    pub xbm_weight: f64,
    /// Frame pairs merged into one minibatch.
    pub pairs_per_batch: usize,
    /// Per-side instance cap of a minibatch.
    pub cap_per_side: usize,
    pub batches_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub schedule: Schedule,
    pub optim: AdamWConfig,
    /// Global gradient max-norm; 0 disables clipping.
    pub grad_clip: f64,
    pub probe_gallery_per_id: usize,
    /// Independent probe repeats averaged into the rank metrics.
    pub probe_repeats: usize,
    pub probe_pairs: usize,
    /// Where to dump the offending batch if the loss goes non-finite.
    pub nan_dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stream: StreamConfig::default(),
            loss: LossConfig::default(),
            memory_capacity: 4096,
            top_k: 10,
            xbm_weight: 0.1,
            pairs_per_batch: 4,
            cap_per_side: 40,
            batches_per_epoch: 50,
            hidden: vec![64, 64],
            embed_dim: 16,
            schedule: Schedule {
                phases: vec![Phase {
                    epochs: 20,
                    rule: LrRule::Cosine { lr: 1e-2 },
                    inter_fraction: None,
                }],
            },
            optim: AdamWConfig::default(),
            grad_clip: 0.0,
            probe_gallery_per_id: 4,
            probe_repeats: 4,
            probe_pairs: 32,
            nan_dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.loss.validate()?;
        Schedule::new(self.schedule.phases.clone())?;
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("train.pairs_per_batch must be >= 1".into()));
        }
        if self.cap_per_side < 2 {
            return Err(Error::Config("train.cap_per_side must be >= 2".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("train.embed_dim must be >= 1".into()));
        }
        if self.xbm_weight < 0.0 {
            return Err(Error::Config("train.xbm_weight must be >= 0".into()));
        }
        if self.memory_capacity > 0 && self.top_k == 0 {
            return Err(Error::Config("train.top_k must be >= 1 when memory is enabled".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.stream.d_obs];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.embed_dim);
        sizes
    }
}

/// One metrics row per epoch; the CSV columns are part of the tool's contract.
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_asym: f64,
    pub loss_xbm: f64,
    pub cycle_acc: f64,
    pub rank1_probe: f64,
    pub tau_alpha_mean: f64,
    pub tau_beta_mean: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,loss_asym,loss_xbm,cycle_acc,rank1_probe,tau_alpha_mean,tau_beta_mean";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_asym,
            self.loss_xbm,
            self.cycle_acc,
            self.rank1_probe,
            self.tau_alpha_mean,
            self.tau_beta_mean
        )
    }
}

pub trait MetricsSink {
    fn epoch(&mut self, metrics: &EpochMetrics) -> Result<()>;
}

pub struct NullSink;

impl MetricsSink for NullSink {
    fn epoch(&mut self, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

/// Streams metric rows into a CSV file.
pub struct CsvSink {
    file: std::fs::File,
}

impl CsvSink {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", EpochMetrics::CSV_HEADER)?;
        Ok(CsvSink { file })
    }
}

impl MetricsSink for CsvSink {
    fn epoch(&mut self, metrics: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", metrics.csv_line())?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub encoder: Encoder,
    pub optimizer: AdamW,
    pub metrics: Vec<EpochMetrics>,
    pub skipped_degenerate: usize,
}

/// The total objective and its parts, on one graph.
pub struct LossBreakdown {
    pub total: NodeId,
    pub association: NodeId,
    pub memory: NodeId,
    /// Concatenated [x1 | x2] embeddings, aligned with vids1 ++ vids2.
    pub batch_node: NodeId,
    pub swapped: bool,
}

/// Association loss plus `xbm_weight` times the memory repulsion term.
/// With an empty memory or zero weight the total reduces to the association
/// loss exactly.
pub fn total_loss(
    graph: &mut Graph,
    bound: &BoundEncoder,
    view: TrainView<'_>,
    memory: &MemoryQueue,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let x1 = bound.encode(graph, view.obs1)?;
    let x2 = bound.encode(graph, view.obs2)?;
    let forward = cycle_association_forward(graph, x1, x2, &cfg.loss)?;
    let batch = graph.concat_cols(x1.node(), x2.node())?;
    let batch = crate::cycle::EmbeddingMatrix::from_node_unchecked(graph, batch);
    let mut vids: Vec<u64> = view.vids1.to_vec();
    vids.extend_from_slice(view.vids2);
    let memory_term = xbm_loss(graph, &batch, &vids, memory, cfg.top_k)?;
    let weighted = graph.scale(memory_term, cfg.xbm_weight);
    let total = graph.add(forward.loss, weighted)?;
    Ok(LossBreakdown {
        total,
        association: forward.loss,
        memory: memory_term,
        batch_node: batch.node(),
        swapped: forward.swapped,
    })
}

enum BatchSource {
    Video(Simulator),
    Tracklet(crate::sim::TrackletStore),
}

impl BatchSource {
    fn next_minibatch(
        &mut self,
        cfg: &TrainConfig,
        inter_fraction: f64,
        kind_rng: &mut ChaCha8Rng,
        taus: &mut Vec<(PairKind, f64)>,
    ) -> Result<FramePairBatch> {
        match self {
            BatchSource::Video(sim) => {
                let mut pairs = Vec::with_capacity(cfg.pairs_per_batch);
                for _ in 0..cfg.pairs_per_batch {
                    let kind = if kind_rng.random_range(0.0..1.0) < inter_fraction {
                        PairKind::Inter
                    } else {
                        PairKind::Intra
                    };
                    let pair = match kind {
                        PairKind::Inter => sim.sample_inter_pair()?,
                        _ => sim.sample_intra_pair()?,
                    };
                    taus.push((kind, measure_symmetry(&pair)));
                    pairs.push(pair);
                }
                build_minibatch(&pairs, cfg.cap_per_side)
            }
            BatchSource::Tracklet(store) => {
                let kind = if kind_rng.random_range(0.0..1.0) < inter_fraction {
                    PairKind::Inter
                } else {
                    PairKind::Intra
                };
                let batch = store.sample_batch(cfg.pairs_per_batch, kind)?;
                taus.push((kind, measure_symmetry(&batch)));
                Ok(batch)
            }
        }
    }
}

/// Runs the configured number of epochs and returns the trained model. Fully
/// deterministic for a fixed config: identical seeds give identical weights.
pub fn train(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut encoder = Encoder::new(&cfg.layer_sizes(), derive_seed(cfg.stream.seed, STREAM_ENCODER))?;
    let mut optimizer = AdamW::for_params(cfg.optim, &encoder.params());
    let mut memory = MemoryQueue::new(cfg.memory_capacity);
    let mut kind_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.stream.seed, STREAM_KINDS));
    let mut source = match cfg.stream.sampling {
        SamplingMode::Video => BatchSource::Video(Simulator::new(cfg.stream.clone())?),
        SamplingMode::Tracklet => {
            BatchSource::Tracklet(simulate_labeled_dataset(cfg.stream.clone(), 2)?)
        }
    };
    let probes = build_probes(&cfg.stream, cfg.probe_gallery_per_id, cfg.probe_repeats)?;
    let probe_pairs = build_probe_pairs(&cfg.stream, cfg.probe_pairs)?;

    let mut metrics = Vec::new();
    let mut skipped = 0usize;
    for epoch in 0..cfg.schedule.total_epochs() {
        let (phase, _) = cfg.schedule.phase_at(epoch)?;
        let inter_fraction = phase.inter_fraction.unwrap_or(cfg.stream.inter_fraction);
        let mut asym_sum = 0.0;
        let mut xbm_sum = 0.0;
        let mut steps = 0usize;
        let mut taus: Vec<(PairKind, f64)> = Vec::new();
        for batch_idx in 0..cfg.batches_per_epoch {
            let batch = source.next_minibatch(cfg, inter_fraction, &mut kind_rng, &mut taus)?;
            let lr = cfg.schedule.lr_at(epoch, batch_idx as f64 / cfg.batches_per_epoch as f64)?;
            match train_step(cfg, &mut encoder, &mut optimizer, &mut memory, &batch, lr) {
                Ok((asym, xbm)) => {
                    asym_sum += asym;
                    xbm_sum += xbm;
                    steps += 1;
                }
                Err(Error::Degenerate { .. }) => {
                    // Single-instance sides carry no off-diagonal contrast.
                    skipped += 1;
                }
                Err(Error::NonFiniteLoss { dump, .. }) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_idx, dump });
                }
                Err(e) => return Err(e),
            }
        }
        let probe_metrics = evaluate_probe(&encoder, &probes, &probe_pairs, &cfg.loss)?;
        let tau_mean = |kind: PairKind| {
            let vals: Vec<f64> =
                taus.iter().filter(|(k, _)| *k == kind).map(|(_, t)| *t).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let row = EpochMetrics {
            epoch,
            lr: cfg.schedule.lr_at(epoch, 0.0)?,
            loss_asym: asym_sum / steps.max(1) as f64,
            loss_xbm: xbm_sum / steps.max(1) as f64,
            cycle_acc: probe_metrics.cycle_acc,
            rank1_probe: probe_metrics.rank1,
            tau_alpha_mean: tau_mean(PairKind::Intra),
            tau_beta_mean: tau_mean(PairKind::Inter),
        };
        sink.epoch(&row)?;
        metrics.push(row);
    }
    Ok(TrainOutcome { encoder, optimizer, metrics, skipped_degenerate: skipped })
}

/// One optimizer step over an assembled minibatch: forward, backward, clip,
/// update, enqueue. Returns the association and memory loss values. A
/// non-finite loss aborts after dumping the offending batch.
pub fn train_step(
    cfg: &TrainConfig,
    encoder: &mut Encoder,
    optimizer: &mut AdamW,
    memory: &mut MemoryQueue,
    batch: &FramePairBatch,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut graph = Graph::new();
    let bound = encoder.bind(&mut graph);
    let view = batch.train_view();
    let losses = total_loss(&mut graph, &bound, view, memory, cfg)?;
    let total_value = graph.scalar_value(losses.total);
    if !total_value.is_finite() {
        let dump = dump_offending_batch(cfg, batch)?;
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, dump });
    }
    let asym_value = graph.scalar_value(losses.association);
    let xbm_value = graph.scalar_value(losses.memory);
    graph.backward(losses.total)?;

    let param_ids = bound.param_ids();
    let mut grads: Vec<Matrix> = param_ids.iter().map(|&id| graph.grad(id).clone()).collect();
    if cfg.grad_clip > 0.0 {
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let scale = cfg.grad_clip / norm;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    let grad_refs: Vec<&Matrix> = grads.iter().collect();
    let mut params = encoder.params_mut();
    optimizer.step(lr, &mut params, &grad_refs)?;

    // Enqueue after the loss so a sample never serves as its own negative.
    if cfg.memory_capacity > 0 {
        let features = graph.value(losses.batch_node).clone();
        let mut vids: Vec<u64> = view.vids1.to_vec();
        vids.extend_from_slice(view.vids2);
        memory.enqueue_batch(&features, &vids)?;
    }
    Ok((asym_value, xbm_value))
}

fn dump_offending_batch(cfg: &TrainConfig, batch: &FramePairBatch) -> Result<String> {
    let dir = cfg
        .nan_dump_dir
        .clone()
        .unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("nan_batch.csv");
    let mut file = std::fs::File::create(&path)?;
    crate::sim::write_batch_csv(batch, &mut file)?;
    Ok(path.display().to_string())
}
