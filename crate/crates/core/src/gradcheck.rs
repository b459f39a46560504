//! End-to-end gradient validation: the association losses and the memory
//! repulsion term, composed through the encoder, against central finite
//! differences on every encoder parameter.
//!
//! Instances whose forward pass lands too close to a kink (hinge argument near
//! zero, near-tied maxima, near-tied top-k selection) are deterministically
//! re-seeded; finite differences straddling a kink say nothing about the
//! subgradient choice there.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cycle::{cycle_association_forward, EmbeddingMatrix, LossConfig, LossMode};
use crate::diffmath::{finite_diff_check, Graph, Matrix};
use crate::encoder::Encoder;
use crate::xbm::{xbm_loss, MemoryQueue};
use crate::Result;

#[derive(Debug, Clone)]
pub struct ComposedCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub instances: usize,
    pub reseeded: usize,
}

/// How far every kinked quantity must sit from its switch point, in units of
/// the finite-difference step.
const KINK_MARGIN_STEPS: f64 = 50.0;

struct Instance {
    encoder: Encoder,
    obs1: Matrix,
    obs2: Matrix,
    memory: MemoryQueue,
    vids: Vec<u64>,
}

fn make_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = rng.random_range(2..=8);
    let n2 = rng.random_range(2..=8);
    let d_obs = rng.random_range(4..=8);
    let hidden = rng.random_range(4..=6);
    let d = rng.random_range(3..=8usize).min(16);
    let encoder = Encoder::new(&[d_obs, hidden, d], seed ^ 0xABCD).unwrap();
    let obs1 = Matrix::from_fn(d_obs, n1, |_, _| rng.random_range(-1.0..1.0));
    let obs2 = Matrix::from_fn(d_obs, n2, |_, _| rng.random_range(-1.0..1.0));
    let mut memory = MemoryQueue::new(64);
    let m_len = rng.random_range(8..=20);
    let feats = Matrix::from_fn(d, m_len, |_, _| rng.random_range(-1.0..1.0))
        .l2_normalized_columns(1e-12);
    let mem_vids: Vec<u64> = (0..m_len as u64).map(|i| i % 5).collect();
    memory.enqueue_batch(&feats, &mem_vids).unwrap();
    let vids: Vec<u64> = (0..(n1 + n2) as u64).map(|i| i % 3 + 100).collect();
    Instance { encoder, obs1, obs2, memory, vids }
}

/// Smallest distance to a kink across the asymmetric-loss and top-k paths.
fn kink_margin(inst: &Instance, loss_cfg: &LossConfig, top_k: usize) -> f64 {
    let x1 = inst.encoder.embed(&inst.obs1).unwrap();
    let x2 = inst.encoder.embed(&inst.obs2).unwrap();
    let a_cycle = crate::cycle::cycle_matrix_values(&x1, &x2, loss_cfg).unwrap();
    let n = a_cycle.rows();
    let mut margin = f64::INFINITY;
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| a_cycle.get(i, j)).collect();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut col: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| a_cycle.get(k, i)).collect();
        col.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // Hinge arguments of the margin loss.
        margin = margin.min((row[0] - a_cycle.get(i, i) + loss_cfg.margin).abs());
        margin = margin.min((col[0] - a_cycle.get(i, i) + loss_cfg.margin).abs());
        // Argmax stability of the off-diagonal maxima.
        if row.len() > 1 {
            margin = margin.min(row[0] - row[1]);
            margin = margin.min(col[0] - col[1]);
        }
    }
    // Top-k selection stability in the memory term.
    let batch_cols: Vec<Vec<f64>> = (0..x1.cols())
        .map(|j| x1.column(j))
        .chain((0..x2.cols()).map(|j| x2.column(j)))
        .collect();
    for (i, x) in batch_cols.iter().enumerate() {
        let vid = inst.vids[i];
        let mut sims: Vec<f64> = inst
            .memory
            .iter()
            .filter(|e| e.video_id != vid)
            .map(|e| e.feature.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sims.len() > top_k {
            margin = margin.min(sims[top_k - 1] - sims[top_k]);
        }
    }
    margin
}

fn check_instance(
    inst: &Instance,
    mode: Option<LossMode>,
    top_k: usize,
    h: f64,
) -> Result<f64> {
    let loss_cfg = |mode: LossMode| LossConfig { mode, ..LossConfig::default() };
    let flat_params: Vec<Matrix> = inst.encoder.params().into_iter().cloned().collect();
    let mut worst = 0.0_f64;
    for target in 0..flat_params.len() {
        let eval = |replacement: &Matrix| -> Result<(f64, Option<Matrix>)> {
            let mut enc = inst.encoder.clone();
            let mut new_params = flat_params.clone();
            new_params[target] = replacement.clone();
            enc.set_params(&new_params)?;
            let mut g = Graph::new();
            let bound = enc.bind(&mut g);
            let x1 = bound.encode(&mut g, &inst.obs1)?;
            let x2 = bound.encode(&mut g, &inst.obs2)?;
            let loss = match mode {
                Some(m) => cycle_association_forward(&mut g, x1, x2, &loss_cfg(m))?.loss,
                None => {
                    let batch = g.concat_cols(x1.node(), x2.node())?;
                    let batch = EmbeddingMatrix::from_unit_node(&g, batch)?;
                    xbm_loss(&mut g, &batch, &inst.vids, &inst.memory, top_k)?
                }
            };
            let value = g.scalar_value(loss);
            let grad = {
                g.backward(loss)?;
                Some(g.grad(bound.param_ids()[target]).clone())
            };
            Ok((value, grad))
        };
        let (_, analytic) = eval(&flat_params[target])?;
        let analytic = analytic.unwrap();
        let err = finite_diff_check(
            |m| eval(m).expect("forward failed during finite differences").0,
            &flat_params[target],
            &analytic,
            h,
        );
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the symmetric loss, asymmetric loss, and memory term through the
/// encoder over `instances` random problem sizes (n1, n2 <= 8, d <= 16).
pub fn check_composed_losses(base_seed: u64, instances: usize, h: f64) -> Result<Vec<ComposedCheck>> {
    let top_k = 5;
    let cases: [(&'static str, Option<LossMode>); 3] = [
        ("loss_symmetric_through_encoder", Some(LossMode::Symmetric)),
        ("loss_asymmetric_through_encoder", Some(LossMode::Asymmetric)),
        ("xbm_loss_through_encoder", None),
    ];
    let mut out = Vec::new();
    for (name, mode) in cases {
        let mut worst = 0.0_f64;
        let mut reseeded = 0usize;
        for i in 0..instances {
            let mut seed = base_seed.wrapping_add(i as u64);
            let mut inst = make_instance(seed);
            let cfg = LossConfig::default();
            while kink_margin(&inst, &cfg, top_k) < KINK_MARGIN_STEPS * h {
                seed = seed.wrapping_add(10_000);
                inst = make_instance(seed);
                reseeded += 1;
            }
            worst = worst.max(check_instance(&inst, mode, top_k, h)?);
        }
        out.push(ComposedCheck { name, max_rel_err: worst, instances, reseeded });
    }
    Ok(out)
}
