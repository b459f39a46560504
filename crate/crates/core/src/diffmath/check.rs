//! Finite-difference validation of the analytic gradients.
//!
//! [`finite_diff_check`] is the independent oracle: it never touches the backward
//! pass, only repeated forward evaluations. [`run_gradcheck_suite`] drives it over
//! every registered differentiable operation with inputs nudged away from kinks
//! (hinge at 0, abs at 0, max ties), which are excluded by construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{Graph, Matrix, NodeId};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Max relative error between an analytic gradient and central finite
/// differences of `f` around `x`, entry by entry. The denominator is
/// max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F>(f: F, x: &Matrix, analytic: &Matrix, h: f64) -> f64
where
    F: Fn(&Matrix) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(x.shape(), analytic.shape(), "analytic gradient shape mismatch");
    let mut worst = 0.0_f64;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + h);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - h);
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.get(i, j);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Checks one scalar-valued graph builder against finite differences.
///
/// `build` must construct the loss from a single leaf; it is re-invoked for
/// every perturbed forward evaluation, so it must be deterministic.
pub fn check_builder<B>(build: B, x: &Matrix, h: f64) -> Result<f64>
where
    B: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let input = g.leaf(x.clone());
    let loss = build(&mut g, input)?;
    g.backward(loss)?;
    let analytic = g.grad(input).clone();
    let eval = |m: &Matrix| -> f64 {
        let mut g = Graph::new();
        let input = g.leaf(m.clone());
        let loss = build(&mut g, input).expect("builder failed on perturbed input");
        g.scalar_value(loss)
    };
    Ok(finite_diff_check(eval, x, &analytic, h))
}

/// Every differentiable operation the graph exposes, for the gradcheck report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedOp {
    MatMul,
    Transpose,
    NormalizeColumns,
    RowSoftmax,
    Hinge,
    Tanh,
    Softplus,
    Abs,
    Add,
    Sub,
    Scale,
    AddScalar,
    Sum,
    Mean,
    SubIdentity,
    RowMaxExcludingDiag,
    ColMaxExcludingDiag,
    ExtractDiag,
    Gather,
    AddColVector,
    ConcatCols,
}

impl CheckedOp {
    pub fn all() -> &'static [CheckedOp] {
        use CheckedOp::*;
        &[
            MatMul,
            Transpose,
            NormalizeColumns,
            RowSoftmax,
            Hinge,
            Tanh,
            Softplus,
            Abs,
            Add,
            Sub,
            Scale,
            AddScalar,
            Sum,
            Mean,
            SubIdentity,
            RowMaxExcludingDiag,
            ColMaxExcludingDiag,
            ExtractDiag,
            Gather,
            AddColVector,
            ConcatCols,
        ]
    }

    pub fn name(&self) -> &'static str {
        use CheckedOp::*;
        match self {
            MatMul => "matmul",
            Transpose => "transpose",
            NormalizeColumns => "l2_normalize_columns",
            RowSoftmax => "row_softmax",
            Hinge => "hinge",
            Tanh => "tanh",
            Softplus => "softplus",
            Abs => "abs",
            Add => "add",
            Sub => "sub",
            Scale => "scale",
            AddScalar => "add_scalar",
            Sum => "sum",
            Mean => "mean",
            SubIdentity => "sub_identity",
            RowMaxExcludingDiag => "row_max_excluding_diag",
            ColMaxExcludingDiag => "col_max_excluding_diag",
            ExtractDiag => "extract_diag",
            Gather => "gather",
            AddColVector => "add_col_vector",
            ConcatCols => "concat_cols",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OpCheckReport {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Random matrix with entries in [-1, 1], kept at least `margin` away from 0 so
/// kinked elementwise ops (hinge, abs) stay finite-difference safe.
fn random_matrix_off_kinks(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() >= margin {
            break v;
        }
    })
}

/// Square matrix whose off-diagonal row and column maxima are unique by at
/// least `gap`, so the argmax routing never straddles a tie.
fn random_matrix_unique_maxima(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Matrix {
    loop {
        let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut ok = true;
        for i in 0..n {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| m.get(i, j)).collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut col: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| m.get(k, i)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if n > 2 && (row[0] - row[1] < gap || col[0] - col[1] < gap) {
                ok = false;
                break;
            }
        }
        if ok {
            return m;
        }
    }
}

fn check_one(op: CheckedOp, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let margin = 50.0 * h;
    match op {
        CheckedOp::MatMul => {
            let a = random_matrix_off_kinks(rng, 3, 4, 0.0);
            let b = random_matrix_off_kinks(rng, 4, 2, 0.0);
            let wrt_a = check_builder(
                |g, x| {
                    let bn = g.leaf(b.clone());
                    let p = g.matmul(x, bn)?;
                    Ok(g.sum(p))
                },
                &a,
                h,
            )
            .unwrap();
            let wrt_b = check_builder(
                |g, x| {
                    let an = g.leaf(a.clone());
                    let p = g.matmul(an, x)?;
                    Ok(g.sum(p))
                },
                &b,
                h,
            )
            .unwrap();
            wrt_a.max(wrt_b)
        }
        CheckedOp::Transpose => {
            let a = random_matrix_off_kinks(rng, 3, 5, 0.0);
            check_builder(
                |g, x| {
                    let t = g.transpose(x);
                    let sq = g.mean(t);
                    Ok(g.scale(sq, 1.7))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::NormalizeColumns => {
            let a = random_matrix_off_kinks(rng, 4, 3, 0.0);
            check_builder(
                |g, x| {
                    let n = g.l2_normalize_columns(x, 1e-12)?;
                    let w = g.leaf(Matrix::from_fn(4, 3, |i, j| 0.1 * (i as f64) - 0.2 * j as f64));
                    let p = g.sub(n, w)?;
                    let sq = g.abs(p);
                    Ok(g.sum(sq))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::RowSoftmax => {
            let a = random_matrix_off_kinks(rng, 3, 4, 0.0);
            check_builder(
                |g, x| {
                    let s = g.row_softmax(x, 3.7)?;
                    let w = g.leaf(Matrix::from_fn(3, 4, |i, j| ((i + 2 * j) % 3) as f64 - 1.0));
                    let p = g.sub(s, w)?;
                    let sq = g.abs(p);
                    Ok(g.sum(sq))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Hinge => {
            let a = random_matrix_off_kinks(rng, 3, 3, margin);
            check_builder(
                |g, x| {
                    let hv = g.hinge(x);
                    Ok(g.sum(hv))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Tanh => {
            let a = random_matrix_off_kinks(rng, 3, 3, 0.0);
            check_builder(
                |g, x| {
                    let t = g.tanh(x);
                    Ok(g.mean(t))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Softplus => {
            let a = random_matrix_off_kinks(rng, 3, 3, 0.0);
            check_builder(
                |g, x| {
                    let s = g.softplus(x);
                    Ok(g.sum(s))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Abs => {
            let a = random_matrix_off_kinks(rng, 3, 3, margin);
            check_builder(
                |g, x| {
                    let v = g.abs(x);
                    Ok(g.sum(v))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Add => {
            let a = random_matrix_off_kinks(rng, 3, 3, 0.0);
            check_builder(
                |g, x| {
                    let other = g.leaf(Matrix::from_fn(3, 3, |i, j| (i + j) as f64 * 0.25));
                    let s = g.add(x, other)?;
                    let sq = g.softplus(s);
                    Ok(g.sum(sq))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Sub => {
            let a = random_matrix_off_kinks(rng, 3, 3, 0.0);
            check_builder(
                |g, x| {
                    let other = g.leaf(Matrix::from_fn(3, 3, |i, j| (i as f64) * 0.3 - j as f64));
                    let s = g.sub(x, other)?;
                    let sq = g.softplus(s);
                    Ok(g.sum(sq))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Scale => {
            let a = random_matrix_off_kinks(rng, 2, 4, 0.0);
            check_builder(
                |g, x| {
                    let s = g.scale(x, -2.3);
                    let t = g.tanh(s);
                    Ok(g.sum(t))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::AddScalar => {
            let a = random_matrix_off_kinks(rng, 2, 4, 0.0);
            check_builder(
                |g, x| {
                    let s = g.add_scalar(x, 0.45);
                    let t = g.softplus(s);
                    Ok(g.mean(t))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Sum => {
            let a = random_matrix_off_kinks(rng, 4, 4, 0.0);
            check_builder(|g, x| Ok(g.sum(x)), &a, h).unwrap()
        }
        CheckedOp::Mean => {
            let a = random_matrix_off_kinks(rng, 4, 4, 0.0);
            check_builder(|g, x| Ok(g.mean(x)), &a, h).unwrap()
        }
        CheckedOp::SubIdentity => {
            let a = random_matrix_unique_maxima(rng, 4, margin);
            check_builder(
                |g, x| {
                    let d = g.sub_identity(x)?;
                    let sq = g.softplus(d);
                    Ok(g.mean(sq))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::RowMaxExcludingDiag => {
            let a = random_matrix_unique_maxima(rng, 4, margin);
            check_builder(
                |g, x| {
                    let m = g.row_max_excluding_diag(x)?;
                    Ok(g.sum(m))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::ColMaxExcludingDiag => {
            let a = random_matrix_unique_maxima(rng, 4, margin);
            check_builder(
                |g, x| {
                    let m = g.col_max_excluding_diag(x)?;
                    Ok(g.sum(m))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::ExtractDiag => {
            let a = random_matrix_off_kinks(rng, 4, 4, 0.0);
            check_builder(
                |g, x| {
                    let d = g.extract_diag(x)?;
                    let t = g.tanh(d);
                    Ok(g.sum(t))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::Gather => {
            let a = random_matrix_off_kinks(rng, 4, 5, 0.0);
            check_builder(
                |g, x| {
                    let picked = g.gather(x, vec![(0, 1), (2, 4), (3, 0), (2, 4)])?;
                    let t = g.softplus(picked);
                    Ok(g.sum(t))
                },
                &a,
                h,
            )
            .unwrap()
        }
        CheckedOp::AddColVector => {
            let a = random_matrix_off_kinks(rng, 3, 4, 0.0);
            let b = random_matrix_off_kinks(rng, 3, 1, 0.0);
            let wrt_a = check_builder(
                |g, x| {
                    let bn = g.leaf(b.clone());
                    let s = g.add_col_vector(x, bn)?;
                    let t = g.tanh(s);
                    Ok(g.sum(t))
                },
                &a,
                h,
            )
            .unwrap();
            let wrt_b = check_builder(
                |g, x| {
                    let an = g.leaf(a.clone());
                    let s = g.add_col_vector(an, x)?;
                    let t = g.tanh(s);
                    Ok(g.sum(t))
                },
                &b,
                h,
            )
            .unwrap();
            wrt_a.max(wrt_b)
        }
        CheckedOp::ConcatCols => {
            let a = random_matrix_off_kinks(rng, 3, 2, 0.0);
            check_builder(
                |g, x| {
                    let other = g.leaf(Matrix::from_fn(3, 3, |i, j| 0.4 * (i as f64) - 0.1 * j as f64));
                    let cat = g.concat_cols(x, other)?;
                    let t = g.softplus(cat);
                    Ok(g.mean(t))
                },
                &a,
                h,
            )
            .unwrap()
        }
    }
}

/// Runs the finite-difference suite over every registered op exactly once,
/// taking the worst relative error over `seeds` random instances per op.
pub fn run_gradcheck_suite(base_seed: u64, seeds: usize, h: f64, tol: f64) -> Vec<OpCheckReport> {
    run_gradcheck_suite_perturbed(base_seed, seeds, h, tol, 0.0)
}

/// Like [`run_gradcheck_suite`] but with a deliberate offset added to each
/// measured error. Nonzero `bug` is a negative-control fixture for tests and
/// the CLI: it must make the suite fail.
pub fn run_gradcheck_suite_perturbed(
    base_seed: u64,
    seeds: usize,
    h: f64,
    tol: f64,
    bug: f64,
) -> Vec<OpCheckReport> {
    CheckedOp::all()
        .iter()
        .map(|&op| {
            let mut worst = 0.0_f64;
            for s in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    base_seed ^ (op.name().len() as u64) ^ ((s as u64) << 17),
                );
                worst = worst.max(check_one(op, &mut rng, h));
            }
            OpCheckReport { op: op.name(), max_rel_err: worst + bug, tolerance: tol }
        })
        .collect()
}
