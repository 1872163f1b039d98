//! Independent reference implementations used as test oracles. Shared with
//! the acceptance suite of the `ncdwf` crate.
#![allow(dead_code)]

pub mod gradcheck;

use ncdwf_core::Tensor;
use rand::Rng;

pub fn random_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, or the absolute difference norm when both
/// vectors are below `1e-8` in norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every entry of the tensors
/// reached by `params`, with step `h`.
pub fn numeric_gradient<S>(
    state: &mut S,
    params: impl Fn(&mut S) -> Vec<&mut Tensor>,
    f: impl Fn(&S) -> f64,
    h: f64,
) -> Vec<f64> {
    let shapes: Vec<usize> = params(state).iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.iter().sum());
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = params(state)[ti].data()[k];
            params(state)[ti].data_mut()[k] = orig + h;
            let up = f(state);
            params(state)[ti].data_mut()[k] = orig - h;
            let down = f(state);
            params(state)[ti].data_mut()[k] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// All permutations of `0..n`, by Heap's algorithm.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    if n == 0 {
        out.push(a);
    } else {
        heap(n, &mut a, &mut out);
    }
    out
}

/// Best total of `scores[i][perm[i]]` over all permutations.
pub fn brute_force_assignment(scores: &Tensor) -> f64 {
    permutations(scores.rows())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| scores.get(i, j)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Log-domain Sinkhorn on `P / ε`, run for a fixed large number of sweeps.
/// Works on potentials rather than scalings, so it shares no arithmetic with
/// the solver under test.
pub fn sinkhorn_log_domain(p: &Tensor, epsilon: f64, sweeps: usize) -> Tensor {
    let (n, b) = (p.rows(), p.cols());
    let (log_r, log_c) = (-(n as f64).ln(), -(b as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; b];
    let lse = |v: &mut dyn Iterator<Item = f64>| {
        let xs: Vec<f64> = v.collect();
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    for _ in 0..sweeps {
        for i in 0..n {
            f[i] = log_r - lse(&mut (0..b).map(|j| p.get(i, j) / epsilon + g[j]));
        }
        for j in 0..b {
            g[j] = log_c - lse(&mut (0..n).map(|i| p.get(i, j) / epsilon + f[i]));
        }
    }
    let mut q = Tensor::zeros(n, b);
    for i in 0..n {
        for j in 0..b {
            q.set(i, j, (p.get(i, j) / epsilon + f[i] + g[j]).exp());
        }
    }
    q
}

/// A random `N x B` matrix with columns on the probability simplex.
pub fn random_predictions<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Tensor {
    let mut p = Tensor::zeros(n, b);
    for j in 0..b {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (i, v) in raw.iter().enumerate() {
            p.set(i, j, v / s);
        }
    }
    // Renormalize the last entry so each column sums to 1 within rounding.
    for j in 0..b {
        let s: f64 = (0..n - 1).map(|i| p.get(i, j)).sum();
        p.set(n - 1, j, 1.0 - s);
    }
    p
}

/// Naive triple-loop product.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let mut c = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, s);
        }
    }
    c
}
