//! The cycle-association pretext task: affinity, adaptive softmax temperature,
//! soft assignment, cycle matrix, and the symmetric / asymmetric losses.

use crate::diffmath::{Graph, Matrix, NodeId};
use crate::{Error, Result};

/// Column norms may drift this far from 1 before we call them non-unit.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Eps used when normalizing embedding columns.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Symmetric,
    Asymmetric,
}

/// Hyper-parameters of the association loss.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Margin m of the asymmetric loss, in (0, 1).
    pub margin: f64,
    /// Assumed positive/negative affinity gap epsilon, in (0, 1].
    pub epsilon: f64,
    /// Target post-softmax gap delta, in (0, 1).
    pub delta: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.5, epsilon: 0.5, delta: 0.5, mode: LossMode::Asymmetric }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::Param {
                op: "LossConfig",
                detail: format!("margin must lie in (0,1), got {}", self.margin),
            });
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Param {
                op: "LossConfig",
                detail: format!("epsilon must lie in (0,1], got {}", self.epsilon),
            });
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Param {
                op: "LossConfig",
                detail: format!("delta must lie in (0,1), got {}", self.delta),
            });
        }
        Ok(())
    }
}

/// A d x n matrix of unit-length embedding columns living on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingMatrix {
    node: NodeId,
    dim: usize,
    count: usize,
}

impl EmbeddingMatrix {
    /// Wraps a node whose columns are already unit length (within [`UNIT_NORM_TOL`]).
    pub fn from_unit_node(graph: &Graph, node: NodeId) -> Result<Self> {
        let value = graph.value(node);
        for j in 0..value.cols() {
            let norm = value.column_norm(j);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Param {
                    op: "EmbeddingMatrix",
                    detail: format!("column {j} has norm {norm}, expected 1"),
                });
            }
        }
        Ok(EmbeddingMatrix { node, dim: value.rows(), count: value.cols() })
    }

    /// Normalizes the node's columns and wraps the result.
    pub fn normalized(graph: &mut Graph, node: NodeId) -> Result<Self> {
        let normalized = graph.l2_normalize_columns(node, NORMALIZE_EPS)?;
        let (dim, count) = graph.shape(normalized);
        Ok(EmbeddingMatrix { node: normalized, dim, count })
    }

    /// Wraps a node already known to hold unit columns (e.g. a concatenation
    /// of normalized embeddings). Skips the norm validation so non-finite
    /// values can flow to the loss, where the trainer's abort path sees them.
    pub(crate) fn from_node_unchecked(graph: &Graph, node: NodeId) -> Self {
        let (dim, count) = graph.shape(node);
        EmbeddingMatrix { node, dim, count }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Row-stochastic soft assignment from one instance set to another.
#[derive(Debug, Clone, Copy)]
pub struct AssignmentMatrix {
    node: NodeId,
    rows: usize,
    cols: usize,
}

impl AssignmentMatrix {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Pairwise cosine affinity S = X1^T X2 (n1 x n2). Unit columns keep every
/// entry in [-1, 1].
pub fn affinity(graph: &mut Graph, x1: &EmbeddingMatrix, x2: &EmbeddingMatrix) -> Result<NodeId> {
    if x1.dim() != x2.dim() {
        return Err(Error::Shape {
            op: "affinity",
            detail: format!("embedding dims differ: {} vs {}", x1.dim(), x2.dim()),
        });
    }
    let x1t = graph.transpose(x1.node());
    graph.matmul(x1t, x2.node())
}

/// Softmax temperature that keeps the post-softmax positive/negative gap at
/// `delta` for a row of length `k`: T = (1/eps) * ln((delta*(K-1)+1)/(1-delta)).
pub fn adaptive_temperature(k: usize, eps: f64, delta: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::Param {
            op: "adaptive_temperature",
            detail: "K must be >= 1".into(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Param {
            op: "adaptive_temperature",
            detail: format!("eps must be > 0, got {eps}"),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Param {
            op: "adaptive_temperature",
            detail: format!("delta must lie in (0,1), got {delta}"),
        });
    }
    Ok(((delta * (k as f64 - 1.0) + 1.0) / (1.0 - delta)).ln() / eps)
}

/// Row-wise tempered softmax of the affinity matrix.
pub fn assign(graph: &mut Graph, affinity: NodeId, temperature: f64) -> Result<AssignmentMatrix> {
    let node = graph.row_softmax(affinity, temperature)?;
    let (rows, cols) = graph.shape(node);
    Ok(AssignmentMatrix { node, rows, cols })
}

/// Cycle matrix A_fwd * A_bwd (n1 x n1), itself row-stochastic.
pub fn cycle(graph: &mut Graph, fwd: &AssignmentMatrix, bwd: &AssignmentMatrix) -> Result<NodeId> {
    if fwd.cols() != bwd.rows() || fwd.rows() != bwd.cols() {
        return Err(Error::Shape {
            op: "cycle",
            detail: format!(
                "forward {}x{} and backward {}x{} are not a cycle pair",
                fwd.rows(),
                fwd.cols(),
                bwd.rows(),
                bwd.cols()
            ),
        });
    }
    graph.matmul(fwd.node(), bwd.node())
}

/// Mean l1 distance between the cycle matrix and the identity.
pub fn loss_symmetric(graph: &mut Graph, a_cycle: NodeId) -> Result<NodeId> {
    let diff = graph.sub_identity(a_cycle)?;
    let abs = graph.abs(diff);
    Ok(graph.mean(abs))
}

/// Margin loss: each diagonal entry must exceed its row and column off-diagonal
/// maxima by `margin`, hinged and averaged over rows plus columns.
pub fn loss_asymmetric(graph: &mut Graph, a_cycle: NodeId, margin: f64) -> Result<NodeId> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Param {
            op: "loss_asymmetric",
            detail: format!("margin must lie in (0,1), got {margin}"),
        });
    }
    let diag = graph.extract_diag(a_cycle)?;
    let row_max = graph.row_max_excluding_diag(a_cycle)?;
    let col_max = graph.col_max_excluding_diag(a_cycle)?;

    let row_gap = graph.sub(row_max, diag)?;
    let row_gap = graph.add_scalar(row_gap, margin);
    let row_hinge = graph.hinge(row_gap);
    let row_term = graph.mean(row_hinge);

    let col_gap = graph.sub(col_max, diag)?;
    let col_gap = graph.add_scalar(col_gap, margin);
    let col_hinge = graph.hinge(col_gap);
    let col_term = graph.mean(col_hinge);

    graph.add(row_term, col_term)
}

/// Orders a pair so the first member is the smaller set (never larger than the
/// second). Equal sizes stay put. The flag records whether a swap happened.
pub fn enforce_swap(
    x1: EmbeddingMatrix,
    x2: EmbeddingMatrix,
) -> (EmbeddingMatrix, EmbeddingMatrix, bool) {
    if x1.count() > x2.count() {
        (x2, x1, true)
    } else {
        (x1, x2, false)
    }
}

/// Everything the forward pass produces that callers may want to inspect.
#[derive(Debug, Clone, Copy)]
pub struct CycleForward {
    pub loss: NodeId,
    pub a_cycle: NodeId,
    pub swapped: bool,
    pub t_forward: f64,
    pub t_backward: f64,
}

/// Full pretext forward pass: swap rule, affinity, per-direction adaptive
/// temperatures (K = softmaxed row length, so n2 forward and n1 backward),
/// both assignments, cycle matrix, and the configured loss.
pub fn cycle_association_forward(
    graph: &mut Graph,
    x1: EmbeddingMatrix,
    x2: EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<CycleForward> {
    cfg.validate()?;
    let (x1, x2, swapped) = enforce_swap(x1, x2);
    if x1.count() == 0 {
        return Err(Error::Degenerate {
            op: "cycle_association_forward",
            detail: "empty instance set".into(),
        });
    }
    if matches!(cfg.mode, LossMode::Asymmetric) && x1.count() < 2 {
        return Err(Error::Degenerate {
            op: "cycle_association_forward",
            detail: format!(
                "asymmetric loss needs at least 2 instances per side, got {}",
                x1.count()
            ),
        });
    }
    let s = affinity(graph, &x1, &x2)?;
    let t_forward = adaptive_temperature(x2.count(), cfg.epsilon, cfg.delta)?;
    let t_backward = adaptive_temperature(x1.count(), cfg.epsilon, cfg.delta)?;
    let a_fwd = assign(graph, s, t_forward)?;
    let s_t = graph.transpose(s);
    let a_bwd = assign(graph, s_t, t_backward)?;
    let a_cycle = cycle(graph, &a_fwd, &a_bwd)?;
    let loss = match cfg.mode {
        LossMode::Symmetric => loss_symmetric(graph, a_cycle)?,
        LossMode::Asymmetric => loss_asymmetric(graph, a_cycle, cfg.margin)?,
    };
    Ok(CycleForward { loss, a_cycle, swapped, t_forward, t_backward })
}

/// Value-level cycle matrix for evaluation paths that need no gradients.
/// Uses the same swap rule and temperatures as the differentiable forward.
pub fn cycle_matrix_values(x1: &Matrix, x2: &Matrix, cfg: &LossConfig) -> Result<Matrix> {
    let (x1, x2) = if x1.cols() > x2.cols() { (x2, x1) } else { (x1, x2) };
    let s = x1.transposed().matmul(x2)?;
    let t_forward = adaptive_temperature(x2.cols().max(1), cfg.epsilon, cfg.delta)?;
    let t_backward = adaptive_temperature(x1.cols().max(1), cfg.epsilon, cfg.delta)?;
    let a_fwd = s.row_softmax(t_forward);
    let a_bwd = s.transposed().row_softmax(t_backward);
    a_fwd.matmul(&a_bwd)
}
