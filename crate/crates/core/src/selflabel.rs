//! Equipartition pseudo-labels by entropic optimal transport.
//!
//! Given predictions `P` (`N x B`, one softmax column per sample) the solver
//! finds `Q = diag(a) exp(P / ε) diag(b)` on the transportation polytope
//! `{Q >= 0 : Q 1_B = 1/N, Q^T 1_N = 1/B}` by alternately rescaling rows and
//! columns. That plan maximizes `tr(Q^T P) - ε Σ Q log Q` over the polytope.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::softmax_in_place;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            max_iters: 1000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfLabelProblem {
    predictions: Tensor,
    pub config: SinkhornConfig,
}

impl SelfLabelProblem {
    /// `predictions` is `N x B` with columns on the probability simplex.
    pub fn new(predictions: Tensor, config: SinkhornConfig) -> Result<Self> {
        let (n, b) = (predictions.rows(), predictions.cols());
        if n == 0 || b == 0 {
            return Err(Error::InvalidArgument("self-labeling needs N >= 1 and B >= 1".into()));
        }
        predictions.check_finite("sinkhorn input")?;
        if !(config.epsilon > 0.0) || !config.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", config.epsilon)));
        }
        if config.max_iters == 0 || !(config.tol > 0.0) {
            return Err(Error::InvalidArgument("max_iters and tol must be positive".into()));
        }
        for j in 0..b {
            let mut s = 0.0;
            for i in 0..n {
                let p = predictions.get(i, j);
                if p < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative prediction at ({i}, {j})")));
                }
                s += p;
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("column {j} sums to {s}, not 1")));
            }
        }
        Ok(Self { predictions, config })
    }

    /// Builds the problem from unlabeled-head logits `B x N` (one row per
    /// sample) by applying a row softmax and transposing.
    pub fn from_logits(logits: &Tensor, config: SinkhornConfig) -> Result<Self> {
        let mut probs = logits.clone();
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_slice_mut(r));
        }
        Self::new(probs.transpose(), config)
    }

    pub fn predictions(&self) -> &Tensor {
        &self.predictions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `N x B`.
    pub q: Tensor,
    pub iterations_used: usize,
    pub converged: bool,
    pub residual: f64,
}

pub fn solve_sinkhorn(problem: &SelfLabelProblem) -> Result<TransportPlan> {
    solve_inner(problem, None)
}

/// Same as [`solve_sinkhorn`] but also records the marginal residual after
/// every iteration.
pub fn solve_sinkhorn_traced(problem: &SelfLabelProblem) -> Result<(TransportPlan, Vec<f64>)> {
    let mut trace = Vec::new();
    let plan = solve_inner(problem, Some(&mut trace))?;
    Ok((plan, trace))
}

fn solve_inner(problem: &SelfLabelProblem, mut trace: Option<&mut Vec<f64>>) -> Result<TransportPlan> {
    let p = &problem.predictions;
    let cfg = problem.config;
    let (n, b) = (p.rows(), p.cols());
    // The global shift only rescales the kernel, which the scalings absorb.
    let top = p.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kernel = p.map(|v| libm::exp((v - top) / cfg.epsilon));
    let (row_target, col_target) = (1.0 / n as f64, 1.0 / b as f64);

    let mut a = vec![1.0; n];
    let mut bs = vec![1.0; b];
    // Row sums of `K diag(b)` and column sums of `diag(a) K`. The marginals
    // of the current plan are `a ∘ row` and `b ∘ col`, so the residual costs
    // nothing beyond the sums the next update needs anyway.
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; b];
    let mut residual = f64::INFINITY;
    let mut iterations_used = 0;
    let mut terms = Vec::with_capacity(n.max(b));
    row_sums(&kernel, &bs, &mut row, &mut terms);

    for it in 1..=cfg.max_iters {
        for (ai, &r) in a.iter_mut().zip(&row) {
            *ai = row_target / r;
        }
        for (j, (bj, cj)) in bs.iter_mut().zip(col.iter_mut()).enumerate() {
            terms.clear();
            terms.extend(a.iter().enumerate().map(|(i, ai)| ai * kernel.get(i, j)));
            *cj = ordered_sum(&terms);
            *bj = col_target / *cj;
        }
        if !a.iter().chain(&bs).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sinkhorn scaling overflowed; epsilon {} is too small for these predictions",
                cfg.epsilon
            )));
        }
        iterations_used = it;
        row_sums(&kernel, &bs, &mut row, &mut terms);
        let row_dev = a.iter().zip(&row).map(|(ai, r)| (ai * r - row_target).abs());
        let col_dev = bs.iter().zip(&col).map(|(bj, c)| (bj * c - col_target).abs());
        residual = row_dev.chain(col_dev).fold(0.0, f64::max);
        if let Some(t) = trace.as_deref_mut() {
            t.push(residual);
        }
        if residual < cfg.tol {
            break;
        }
    }

    let q = plan_from(&kernel, &a, &bs);
    Ok(TransportPlan {
        q,
        iterations_used,
        converged: residual < cfg.tol,
        residual,
    })
}

fn row_sums(kernel: &Tensor, b: &[f64], out: &mut [f64], terms: &mut Vec<f64>) {
    for (i, o) in out.iter_mut().enumerate() {
        terms.clear();
        terms.extend(kernel.row_slice(i).iter().zip(b).map(|(k, bj)| k * bj));
        *o = ordered_sum(terms);
    }
}

fn plan_from(kernel: &Tensor, a: &[f64], b: &[f64]) -> Tensor {
    let mut q = kernel.clone();
    for (i, &ai) in a.iter().enumerate() {
        for (v, &bj) in q.row_slice_mut(i).iter_mut().zip(b) {
            *v *= ai * bj;
        }
    }
    q
}

/// Largest deviation of any row sum from `1/N` or column sum from `1/B`.
pub fn marginal_residual(q: &Tensor) -> f64 {
    let (n, b) = (q.rows(), q.cols());
    let mut worst: f64 = 0.0;
    let mut terms = Vec::with_capacity(n.max(b));
    for i in 0..n {
        terms.clear();
        terms.extend_from_slice(q.row_slice(i));
        worst = worst.max((ordered_sum(&terms) - 1.0 / n as f64).abs());
    }
    for j in 0..b {
        terms.clear();
        terms.extend((0..n).map(|i| q.get(i, j)));
        worst = worst.max((ordered_sum(&terms) - 1.0 / b as f64).abs());
    }
    worst
}

/// Fixed-point grid: every term is scaled below `2^(2 * LIMB_BITS)` and
/// split into two integer limbs, each of which fits an `i64` with ample
/// headroom for accumulation.
const LIMB_BITS: i32 = 50;

/// Sum that does not depend on the order the terms arrive in. Every term is
/// truncated onto a fixed-point grid anchored at the largest magnitude and
/// accumulated exactly in integers. This makes the solver exactly
/// equivariant under row and column permutations of `P`.
fn ordered_sum(terms: &[f64]) -> f64 {
    debug_assert!(terms.len() < 1 << 12);
    let top = terms.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if top == 0.0 || !top.is_finite() {
        return terms.iter().sum();
    }
    let (_, exp) = libm::frexp(top);
    let shift = 2 * LIMB_BITS - exp;
    // Two factors so that neither overflows for extreme exponents.
    let (s1, s2) = (libm::ldexp(1.0, shift / 2), libm::ldexp(1.0, shift - shift / 2));
    let (limb, inv_limb) = (libm::ldexp(1.0, LIMB_BITS), libm::ldexp(1.0, -LIMB_BITS));
    let (mut hi, mut lo) = (0i64, 0i64);
    for &t in terms {
        // Each term maps to the grid on its own, so order cannot matter.
        let x = t * s1 * s2;
        let h = (x * inv_limb) as i64;
        hi += h;
        lo += (x - h as f64 * limb) as i64;
    }
    let total = ((hi as i128) << LIMB_BITS) + lo as i128;
    libm::ldexp(total as f64, -shift)
}

/// `tr(Q^T P) - ε Σ Q log Q`, with `0 log 0 = 0`.
pub fn entropic_objective(q: &Tensor, p: &Tensor, epsilon: f64) -> f64 {
    q.data()
        .iter()
        .zip(p.data())
        .map(|(&qi, &pi)| {
            let ent = if qi > 0.0 { qi * libm::log(qi) } else { 0.0 };
            qi * pi - epsilon * ent
        })
        .sum()
}

/// Per-sample class index: argmax down each column of `Q`, lowest index on
/// ties. An unconverged plan is rejected unless `allow_unconverged` is set.
pub fn harden_labels(plan: &TransportPlan, allow_unconverged: bool) -> Result<Vec<usize>> {
    if !plan.converged && !allow_unconverged {
        return Err(Error::InvalidArgument(format!(
            "transport plan did not converge (residual {:.3e} after {} iterations)",
            plan.residual, plan.iterations_used
        )));
    }
    let q = &plan.q;
    Ok((0..q.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..q.rows() {
                if q.get(i, j) > q.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Columns of `Q` rescaled to sum to one: `B x N` soft targets.
pub fn soft_targets(plan: &TransportPlan) -> Tensor {
    let mut t = plan.q.transpose();
    for r in 0..t.rows() {
        let row = t.row_slice_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}
