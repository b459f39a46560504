//! Cross-batch memory: a fixed-capacity FIFO of past embedding vectors tagged
//! with video IDs, top-k hard-negative mining against it, and the repulsion loss.

use std::collections::VecDeque;

use crate::cycle::EmbeddingMatrix;
use crate::diffmath::{Graph, Matrix, NodeId};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    /// Unit-length feature, detached from any graph.
    pub feature: Vec<f64>,
    pub video_id: u64,
}

/// FIFO of past features. `capacity == 0` disables the memory entirely.
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        MemoryQueue { capacity, entries: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Appends detached copies of the columns of `features` in batch order,
    /// evicting oldest entries first once capacity is exceeded.
    pub fn enqueue_batch(&mut self, features: &Matrix, video_ids: &[u64]) -> Result<()> {
        if features.cols() != video_ids.len() {
            return Err(Error::Shape {
                op: "enqueue_batch",
                detail: format!(
                    "{} feature columns but {} video ids",
                    features.cols(),
                    video_ids.len()
                ),
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for (j, &video_id) in video_ids.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(MemoryEntry { feature: features.column(j), video_id });
        }
        Ok(())
    }

    /// Indices (oldest-first positions) of the k entries with a different video
    /// ID most similar to `x` by dot product. Similarity ties break toward the
    /// older entry. Returns fewer than k when fewer negatives exist.
    pub fn top_k_indices(&self, x: &[f64], video_id: u64, k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.video_id != video_id)
            .map(|(idx, e)| {
                let sim: f64 = e.feature.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                (idx, sim)
            })
            .collect();
        // total_cmp keeps this panic-free and deterministic even if a diverged
        // model produces NaN similarities; the non-finite values still reach
        // the loss, where the trainer's abort handles them.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.into_iter().map(|(idx, _)| idx).collect()
    }

    /// The mined hard negatives themselves, most similar first.
    pub fn top_k_hard_negatives(&self, x: &[f64], video_id: u64, k: usize) -> Vec<&MemoryEntry> {
        self.top_k_indices(x, video_id, k).into_iter().map(|i| &self.entries[i]).collect()
    }

    /// All stored features as a d x len matrix, oldest first.
    pub fn feature_matrix(&self, dim: usize) -> Matrix {
        Matrix::from_fn(dim, self.entries.len(), |i, j| self.entries[j].feature[i])
    }
}

/// Mean softplus similarity between each batch feature and its top-k mined
/// negatives; the normalizer is the number of actually selected pairs, so the
/// scale does not depend on the memory length. Gradient flows to the batch
/// features only. Returns a constant 0 node when nothing is eligible.
pub fn xbm_loss(
    graph: &mut Graph,
    batch: &EmbeddingMatrix,
    batch_video_ids: &[u64],
    queue: &MemoryQueue,
    k: usize,
) -> Result<NodeId> {
    if batch.count() == 0 {
        return Err(Error::Degenerate { op: "xbm_loss", detail: "empty batch".into() });
    }
    if batch.count() != batch_video_ids.len() {
        return Err(Error::Shape {
            op: "xbm_loss",
            detail: format!(
                "{} batch columns but {} video ids",
                batch.count(),
                batch_video_ids.len()
            ),
        });
    }
    let batch_values = graph.value(batch.node()).clone();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, &vid) in batch_video_ids.iter().enumerate() {
        let x = batch_values.column(i);
        for idx in queue.top_k_indices(&x, vid, k) {
            pairs.push((i, idx));
        }
    }
    if pairs.is_empty() {
        return Ok(graph.leaf(Matrix::scalar(0.0)));
    }
    // Only the mined columns matter for the loss, so the graph carries a
    // compact matrix of those instead of the whole memory.
    let mut selected_cols: Vec<usize> = pairs.iter().map(|&(_, idx)| idx).collect();
    selected_cols.sort_unstable();
    selected_cols.dedup();
    let col_of: std::collections::HashMap<usize, usize> =
        selected_cols.iter().enumerate().map(|(compact, &queue_idx)| (queue_idx, compact)).collect();
    let entries: Vec<&MemoryEntry> = queue.iter().collect();
    let compact = Matrix::from_fn(batch.dim(), selected_cols.len(), |i, j| {
        entries[selected_cols[j]].feature[i]
    });
    let compact_pairs: Vec<(usize, usize)> =
        pairs.into_iter().map(|(i, idx)| (i, col_of[&idx])).collect();
    let memory = graph.leaf(compact);
    let batch_t = graph.transpose(batch.node());
    let sims = graph.matmul(batch_t, memory)?;
    let selected = graph.gather(sims, compact_pairs)?;
    let penalties = graph.softplus(selected);
    Ok(graph.mean(penalties))
}

/// Bytes needed to store a full memory of `capacity` x `dim` scalars.
pub fn memory_bytes(capacity: usize, dim: usize, bytes_per_scalar: usize) -> u64 {
    capacity as u64 * dim as u64 * bytes_per_scalar as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn queue_from(features: Vec<Vec<f64>>, vids: Vec<u64>, capacity: usize) -> MemoryQueue {
        let mut q = MemoryQueue::new(capacity);
        let m = Matrix::from_columns(&features).unwrap();
        q.enqueue_batch(&m, &vids).unwrap();
        q
    }

    #[test]
    fn fifo_eviction_keeps_newest() {
        let q = queue_from(
            vec![
                unit(vec![1.0, 0.0]),
                unit(vec![0.0, 1.0]),
                unit(vec![1.0, 1.0]),
                unit(vec![1.0, -1.0]),
            ],
            vec![10, 11, 12, 13],
            3,
        );
        assert_eq!(q.len(), 3);
        let vids: Vec<u64> = q.iter().map(|e| e.video_id).collect();
        assert_eq!(vids, vec![11, 12, 13]);
    }

    #[test]
    fn enqueue_smaller_than_capacity_keeps_all() {
        let q = queue_from(vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])], vec![1, 2], 8);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn batch_larger_than_capacity_keeps_tail() {
        let feats: Vec<Vec<f64>> = (0..6).map(|i| unit(vec![1.0, i as f64])).collect();
        let q = queue_from(feats, (0..6).collect(), 4);
        let vids: Vec<u64> = q.iter().map(|e| e.video_id).collect();
        assert_eq!(vids, vec![2, 3, 4, 5]);
    }

    #[test]
    fn enqueue_rejects_length_mismatch() {
        let mut q = MemoryQueue::new(4);
        let m = Matrix::zeros(2, 3);
        assert!(q.enqueue_batch(&m, &[1, 2]).is_err());
    }

    #[test]
    fn repeated_enqueue_is_bounded_by_capacity() {
        let mut q = MemoryQueue::new(10);
        for step in 0..7u64 {
            let m = Matrix::from_columns(&[unit(vec![1.0, step as f64]), unit(vec![0.5, 1.0])])
                .unwrap();
            q.enqueue_batch(&m, &[step, step]).unwrap();
            assert_eq!(q.len(), ((step as usize + 1) * 2).min(10));
        }
    }

    #[test]
    fn same_video_entries_are_never_negatives() {
        let q = queue_from(
            vec![unit(vec![1.0, 0.0]), unit(vec![0.9, 0.1])],
            vec![7, 7],
            8,
        );
        assert!(q.top_k_hard_negatives(&unit(vec![1.0, 0.0]), 7, 5).is_empty());
    }

    #[test]
    fn k_larger_than_eligible_returns_all_sorted() {
        let q = queue_from(
            vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0]), unit(vec![1.0, 1.0])],
            vec![1, 2, 3],
            8,
        );
        let negs = q.top_k_hard_negatives(&unit(vec![1.0, 0.0]), 99, 10);
        assert_eq!(negs.len(), 3);
        let x = unit(vec![1.0, 0.0]);
        let sims: Vec<f64> = negs
            .iter()
            .map(|e| e.feature.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        assert!(sims.windows(2).all(|w| w[0] >= w[1]), "not sorted: {sims:?}");
    }

    #[test]
    fn ties_prefer_older_entries() {
        let f = unit(vec![1.0, 0.0]);
        let q = queue_from(vec![f.clone(), f.clone(), f.clone()], vec![1, 2, 3], 8);
        let idx = q.top_k_indices(&f, 99, 2);
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn top_k_matches_brute_force_on_random_queues() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let n = 100;
            let d = 8;
            let mut feats = Vec::with_capacity(n);
            let mut vids = Vec::with_capacity(n);
            for _ in 0..n {
                feats.push(unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()));
                vids.push(rng.random_range(0..6u64));
            }
            let q = queue_from(feats.clone(), vids.clone(), n);
            let x = unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let own = rng.random_range(0..6u64);

            // Brute force: repeatedly select the best remaining eligible entry.
            let k = 10;
            let mut remaining: Vec<usize> =
                (0..n).filter(|&i| vids[i] != own).collect();
            let mut expect = Vec::new();
            for _ in 0..k.min(remaining.len()) {
                let best = *remaining
                    .iter()
                    .min_by(|&&a, &&b| {
                        let sa: f64 = feats[a].iter().zip(&x).map(|(p, q)| p * q).sum();
                        let sb: f64 = feats[b].iter().zip(&x).map(|(p, q)| p * q).sum();
                        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
                    })
                    .unwrap();
                expect.push(best);
                remaining.retain(|&i| i != best);
            }
            assert_eq!(q.top_k_indices(&x, own, k), expect, "trial {trial}");
        }
    }

    fn embedding_of(g: &mut Graph, cols: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let node = g.leaf(Matrix::from_columns(&cols).unwrap());
        EmbeddingMatrix::from_unit_node(g, node).unwrap()
    }

    #[test]
    fn loss_zero_without_eligible_negatives() {
        let mut g = Graph::new();
        let batch = embedding_of(&mut g, vec![unit(vec![1.0, 0.0])]);
        let q = queue_from(vec![unit(vec![0.0, 1.0])], vec![5], 8);
        let loss = xbm_loss(&mut g, &batch, &[5], &q, 10).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);

        let empty = MemoryQueue::new(8);
        let loss = xbm_loss(&mut g, &batch, &[5], &empty, 10).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn loss_orthogonal_negative_is_log_two() {
        let mut g = Graph::new();
        let batch = embedding_of(&mut g, vec![unit(vec![1.0, 0.0])]);
        let q = queue_from(vec![unit(vec![0.0, 1.0])], vec![2], 8);
        let loss = xbm_loss(&mut g, &batch, &[1], &q, 10).unwrap();
        assert!((g.scalar_value(loss) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_duplicate_person_pushes_apart() {
        // x . z = 1: loss is softplus(1) and the gradient at x points along z,
        // so a descent step reduces the similarity.
        let mut g = Graph::new();
        let z = unit(vec![0.6, 0.8]);
        let batch = embedding_of(&mut g, vec![z.clone()]);
        let q = queue_from(vec![z.clone()], vec![2], 8);
        let loss = xbm_loss(&mut g, &batch, &[1], &q, 10).unwrap();
        assert!((g.scalar_value(loss) - (1.0 + 1.0_f64.exp()).ln()).abs() < 1e-9);
        g.backward(loss).unwrap();
        let grad = g.grad(batch.node());
        let along: f64 = (0..2).map(|i| grad.get(i, 0) * z[i]).sum();
        assert!(along > 0.0, "gradient must increase similarity, descent reduces it");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::diffmath::check_builder;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let raw = Matrix::from_fn(d, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut feats = Vec::new();
        let mut vids = Vec::new();
        for i in 0..20 {
            feats.push(unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()));
            vids.push(i % 4);
        }
        let q = queue_from(feats, vids, 32);
        let err = check_builder(
            move |g, raw| {
                let batch = EmbeddingMatrix::normalized(g, raw)?;
                xbm_loss(g, &batch, &[0, 1, 2], &q, 5)
            },
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn loss_decreases_when_similarity_decreases() {
        // Softplus is increasing, so lowering any selected similarity lowers the loss.
        let mut g = Graph::new();
        let batch = embedding_of(&mut g, vec![unit(vec![1.0, 0.0])]);
        let near = queue_from(vec![unit(vec![0.9, 0.1])], vec![2], 8);
        let far = queue_from(vec![unit(vec![0.1, 0.9])], vec![2], 8);
        let loss_near = xbm_loss(&mut g, &batch, &[1], &near, 1).unwrap();
        let loss_far = xbm_loss(&mut g, &batch, &[1], &far, 1).unwrap();
        assert!(g.scalar_value(loss_near) > g.scalar_value(loss_far));
    }

    #[test]
    fn memory_arithmetic_matches_advertised_footprint() {
        // 65536 entries of 512 scalars at 4 bytes each is exactly 128 MiB.
        assert_eq!(memory_bytes(65536, 512, 4), 128 * 1024 * 1024);
    }

    #[test]
    fn capacity_zero_disables_memory() {
        let mut q = MemoryQueue::new(0);
        let m = Matrix::from_columns(&[unit(vec![1.0, 0.0])]).unwrap();
        q.enqueue_batch(&m, &[1]).unwrap();
        assert!(q.is_empty());
    }
}
