//! Ground-truth-aware evaluation: Hungarian assignment, association and cycle
//! accuracy, CMC / mAP retrieval metrics, the probe protocol, and the sweep
//! driver used for symmetry and memory grids.

use crate::cycle::{cycle_matrix_values, LossConfig};
use crate::diffmath::Matrix;
use crate::sim::{Simulator, StreamConfig, STREAM_PROBE, STREAM_PROBE_PAIRS};
use crate::{Error, Result};

/// Minimum-cost one-to-one assignment of rows to columns.
///
/// Every row is assigned when rows <= cols; otherwise the unassignable surplus
/// rows come back as `None`. Deterministic under cost ties (lowest index wins
/// through scan order). O(n^3) shortest-augmenting-path formulation.
pub fn hungarian_assign(cost: &Matrix) -> Result<Vec<Option<usize>>> {
    if !cost.is_finite() {
        return Err(Error::Param {
            op: "hungarian_assign",
            detail: "cost matrix contains NaN or infinite entries".into(),
        });
    }
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Ok(vec![None; rows]);
    }
    if rows > cols {
        // Solve the transpose, then invert the column-side assignment.
        let t = hungarian_assign(&cost.transposed())?;
        let mut out = vec![None; rows];
        for (col, row) in t.into_iter().enumerate() {
            if let Some(r) = row {
                out[r] = Some(col);
            }
        }
        return Ok(out);
    }

    // Potentials over rows (u) and columns (v); way[j] is the augmenting-path
    // predecessor column. Columns are 1-based internally; column 0 is virtual.
    let n = rows;
    let m = cols;
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; m + 1];
    let mut assigned_row = vec![0usize; m + 1]; // 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if assigned_row[j] != 0 {
            out[assigned_row[j] - 1] = Some(j - 1);
        }
    }
    Ok(out)
}

/// Fraction of frame-1 instances whose Hungarian match (on negative cosine
/// affinity) carries the same identity, counted over rows whose identity
/// exists in frame 2 at all.
pub fn association_accuracy(
    x1: &Matrix,
    x2: &Matrix,
    truth1: &[u64],
    truth2: &[u64],
) -> Result<f64> {
    if x1.cols() != truth1.len() || x2.cols() != truth2.len() {
        return Err(Error::Shape {
            op: "association_accuracy",
            detail: "label counts must match embedding columns".into(),
        });
    }
    let s = x1.transposed().matmul(x2)?;
    let cost = s.map(|v| -v);
    let assignment = hungarian_assign(&cost)?;
    let present: std::collections::BTreeSet<u64> = truth2.iter().copied().collect();
    let mut matchable = 0usize;
    let mut correct = 0usize;
    for (i, assigned) in assignment.iter().enumerate() {
        if !present.contains(&truth1[i]) {
            continue;
        }
        matchable += 1;
        if let Some(j) = assigned {
            if truth2[*j] == truth1[i] {
                correct += 1;
            }
        }
    }
    if matchable == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / matchable as f64)
}

/// Self-return rate of the cycle: fraction of rows whose cycle-matrix argmax is
/// their own index. Needs no ground truth; ties break to the lowest index.
pub fn cycle_accuracy(x1: &Matrix, x2: &Matrix, cfg: &LossConfig) -> Result<f64> {
    let a_cycle = cycle_matrix_values(x1, x2, cfg)?;
    Ok(cycle_accuracy_of_matrix(&a_cycle))
}

pub fn cycle_accuracy_of_matrix(a_cycle: &Matrix) -> f64 {
    let n = a_cycle.rows();
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0usize;
        for j in 0..a_cycle.cols() {
            if a_cycle.get(i, j) > best {
                best = a_cycle.get(i, j);
                best_j = j;
            }
        }
        if best_j == i {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Per-query gallery rankings by descending similarity, with relevance flags
/// indexed by gallery position.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// `rankings[q]` is a permutation of gallery indices, best first.
    pub rankings: Vec<Vec<usize>>,
    /// `relevant[q][g]` says whether gallery item g matches query q.
    pub relevant: Vec<Vec<bool>>,
}

impl RankingResult {
    /// Ranks a gallery against queries by embedding dot product; relevance is
    /// identity equality. Similarity ties break to the lower gallery index.
    pub fn from_embeddings(
        query: &Matrix,
        query_ids: &[u64],
        gallery: &Matrix,
        gallery_ids: &[u64],
    ) -> Result<Self> {
        let sims = query.transposed().matmul(gallery)?;
        let mut rankings = Vec::with_capacity(query_ids.len());
        let mut relevant = Vec::with_capacity(query_ids.len());
        for (q, &qid) in query_ids.iter().enumerate() {
            let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
            order.sort_by(|&a, &b| sims.get(q, b).total_cmp(&sims.get(q, a)).then(a.cmp(&b)));
            rankings.push(order);
            relevant.push(gallery_ids.iter().map(|&g| g == qid).collect());
        }
        Ok(RankingResult { rankings, relevant })
    }

    /// Queries without a single relevant gallery item; excluded from metrics.
    pub fn excluded_queries(&self) -> usize {
        self.relevant.iter().filter(|flags| !flags.iter().any(|&r| r)).count()
    }

    fn scored_queries(&self) -> impl Iterator<Item = (&Vec<usize>, &Vec<bool>)> {
        self.rankings
            .iter()
            .zip(self.relevant.iter())
            .filter(|(_, flags)| flags.iter().any(|&r| r))
    }
}

/// Fraction of queries with a relevant item in the top r.
pub fn cmc_rank(result: &RankingResult, r: usize) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (order, flags) in result.scored_queries() {
        total += 1;
        if order.iter().take(r).any(|&g| flags[g]) {
            hits += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

/// Mean over queries of average precision.
pub fn mean_average_precision(result: &RankingResult) -> f64 {
    let mut total = 0usize;
    let mut sum = 0.0;
    for (order, flags) in result.scored_queries() {
        total += 1;
        let mut seen_relevant = 0usize;
        let mut ap = 0.0;
        for (rank, &g) in order.iter().enumerate() {
            if flags[g] {
                seen_relevant += 1;
                ap += seen_relevant as f64 / (rank + 1) as f64;
            }
        }
        sum += ap / seen_relevant as f64;
    }
    if total == 0 {
        return 0.0;
    }
    sum / total as f64
}

/// A retrieval probe: one query per identity from camera 0, `gallery_per_id`
/// observations per identity from the remaining cameras.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub query: Matrix,
    pub query_ids: Vec<u64>,
    pub gallery: Matrix,
    pub gallery_ids: Vec<u64>,
}

/// Builds the deterministic held-out probe for a stream config. Query and
/// gallery cameras are disjoint, so rank metrics exercise cross-camera
/// invariance. Falls back to camera 0 for the gallery when only one exists.
pub fn build_probe(cfg: &StreamConfig, gallery_per_id: usize) -> Result<ProbeSet> {
    Ok(build_probes(cfg, gallery_per_id, 1)?.pop().unwrap())
}

/// Independent repeats of the probe protocol from one held-out stream. Rank
/// metrics averaged across repeats resolve finer than one query step.
pub fn build_probes(
    cfg: &StreamConfig,
    gallery_per_id: usize,
    repeats: usize,
) -> Result<Vec<ProbeSet>> {
    let mut sim = Simulator::with_stream(cfg.clone(), STREAM_PROBE)?;
    let n_id = cfg.n_identities;
    let mut probes = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let mut query_cols = Vec::with_capacity(n_id);
        let mut query_ids = Vec::with_capacity(n_id);
        let mut gallery_cols = Vec::with_capacity(n_id * gallery_per_id);
        let mut gallery_ids = Vec::with_capacity(n_id * gallery_per_id);
        for id in 0..n_id {
            query_cols.push(sim.generate_observation(id, 0));
            query_ids.push(id as u64);
            for g in 0..gallery_per_id {
                let camera = if cfg.n_cameras > 1 { 1 + (g % (cfg.n_cameras - 1)) } else { 0 };
                gallery_cols.push(sim.generate_observation(id, camera));
                gallery_ids.push(id as u64);
            }
        }
        probes.push(ProbeSet {
            query: Matrix::from_columns(&query_cols)?,
            query_ids,
            gallery: Matrix::from_columns(&gallery_cols)?,
            gallery_ids,
        });
    }
    Ok(probes)
}

/// Held-out symmetric inter-camera pairs for cycle / association diagnostics.
pub fn build_probe_pairs(cfg: &StreamConfig, count: usize) -> Result<Vec<crate::sim::FramePairBatch>> {
    let mut probe_cfg = cfg.clone();
    probe_cfg.tau_alpha = 1.0;
    probe_cfg.tau_beta = 1.0;
    probe_cfg.tau_noise_std = 0.0;
    let mut sim = Simulator::with_stream(probe_cfg, STREAM_PROBE_PAIRS)?;
    (0..count)
        .map(|_| {
            if cfg.n_cameras > 1 {
                sim.sample_inter_pair()
            } else {
                sim.sample_intra_pair()
            }
        })
        .collect()
}

/// Probe metrics of an encoder, all computed on held-out observations.
#[derive(Debug, Clone, Copy)]
pub struct ProbeMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub cycle_acc: f64,
    pub assoc_acc: f64,
}

pub fn evaluate_probe(
    encoder: &crate::encoder::Encoder,
    probes: &[ProbeSet],
    pairs: &[crate::sim::FramePairBatch],
    loss_cfg: &LossConfig,
) -> Result<ProbeMetrics> {
    let mut rank1 = 0.0;
    let mut rank5 = 0.0;
    let mut map = 0.0;
    for probe in probes {
        let query = encoder.embed(&probe.query)?;
        let gallery = encoder.embed(&probe.gallery)?;
        let ranking = RankingResult::from_embeddings(
            &query,
            &probe.query_ids,
            &gallery,
            &probe.gallery_ids,
        )?;
        rank1 += cmc_rank(&ranking, 1);
        rank5 += cmc_rank(&ranking, 5);
        map += mean_average_precision(&ranking);
    }
    let probe_denom = probes.len().max(1) as f64;

    let mut cycle_sum = 0.0;
    let mut assoc_sum = 0.0;
    for pair in pairs {
        let (obs1, obs2) = pair.observations();
        let x1 = encoder.embed(obs1)?;
        let x2 = encoder.embed(obs2)?;
        cycle_sum += cycle_accuracy(&x1, &x2, loss_cfg)?;
        let (t1, t2) = pair.ground_truth();
        assoc_sum += association_accuracy(&x1, &x2, t1, t2)?;
    }
    let denom = pairs.len().max(1) as f64;
    Ok(ProbeMetrics {
        rank1: rank1 / probe_denom,
        rank5: rank5 / probe_denom,
        map: map / probe_denom,
        cycle_acc: cycle_sum / denom,
        assoc_acc: assoc_sum / denom,
    })
}

/// One grid point of a sweep, with its evaluated metrics.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub tau_alpha: f64,
    pub tau_beta: f64,
    pub memory_capacity: usize,
    pub top_k: usize,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub cycle_acc: f64,
    pub assoc_acc: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "tau_alpha_mean,tau_beta_mean,memory_capacity,top_k,rank1,map,cycle_acc,assoc_acc,seed";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.tau_alpha,
            self.tau_beta,
            self.memory_capacity,
            self.top_k,
            self.rank1,
            self.map,
            self.cycle_acc,
            self.assoc_acc,
            self.seed
        )
    }

    /// Key identifying a grid point for resumable sweeps.
    pub fn key(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.tau_alpha, self.tau_beta, self.memory_capacity, self.top_k, self.seed
        )
    }
}

/// Cartesian sweep grid. Empty axes fall back to the base config's value.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub tau_alpha: Vec<f64>,
    pub tau_beta: Vec<f64>,
    pub memory_capacity: Vec<usize>,
    pub top_k: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub tau_alpha: f64,
    pub tau_beta: f64,
    pub memory_capacity: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl SweepGrid {
    pub fn points(&self, base: &crate::trainer::TrainConfig) -> Vec<SweepPoint> {
        let tau_alpha =
            if self.tau_alpha.is_empty() { vec![base.stream.tau_alpha] } else { self.tau_alpha.clone() };
        let tau_beta =
            if self.tau_beta.is_empty() { vec![base.stream.tau_beta] } else { self.tau_beta.clone() };
        let memory = if self.memory_capacity.is_empty() {
            vec![base.memory_capacity]
        } else {
            self.memory_capacity.clone()
        };
        let top_k = if self.top_k.is_empty() { vec![base.top_k] } else { self.top_k.clone() };
        let seeds = if self.seeds.is_empty() { vec![base.stream.seed] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for &ta in &tau_alpha {
            for &tb in &tau_beta {
                for &m in &memory {
                    for &k in &top_k {
                        for &s in &seeds {
                            out.push(SweepPoint {
                                tau_alpha: ta,
                                tau_beta: tb,
                                memory_capacity: m,
                                top_k: k,
                                seed: s,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trains one model per grid point (identical seeds elsewhere) and evaluates it
/// on the held-out probe. `skip` lets a resumable caller drop completed points.
pub fn run_sweep(
    base: &crate::trainer::TrainConfig,
    grid: &SweepGrid,
    mut skip: impl FnMut(&SweepPoint) -> bool,
    mut emit: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<usize> {
    let mut computed = 0usize;
    for point in grid.points(base) {
        if skip(&point) {
            continue;
        }
        let mut cfg = base.clone();
        cfg.stream.tau_alpha = point.tau_alpha;
        cfg.stream.tau_beta = point.tau_beta;
        cfg.memory_capacity = point.memory_capacity;
        cfg.top_k = point.top_k;
        cfg.stream.seed = point.seed;
        let outcome = crate::trainer::train(&cfg, &mut crate::trainer::NullSink)?;
        let probes = build_probes(&cfg.stream, cfg.probe_gallery_per_id, cfg.probe_repeats)?;
        let pairs = build_probe_pairs(&cfg.stream, cfg.probe_pairs)?;
        let metrics = evaluate_probe(&outcome.encoder, &probes, &pairs, &cfg.loss)?;
        let row = SweepRow {
            tau_alpha: point.tau_alpha,
            tau_beta: point.tau_beta,
            memory_capacity: point.memory_capacity,
            top_k: point.top_k,
            seed: point.seed,
            rank1: metrics.rank1,
            map: metrics.map,
            cycle_acc: metrics.cycle_acc,
            assoc_acc: metrics.assoc_acc,
        };
        emit(&row)?;
        computed += 1;
    }
    Ok(computed)
}
