//! Independent reference oracles: exhaustive prox minimization, central
//! finite differences, and an active-set nonnegative least squares solver.
//!
//! These are deliberately slow and simple. They generate ground truth for the
//! test suites and back the CLI `verify` command, so they must not share any
//! logic with the fast paths they audit.

use crate::tensor::{DiagPreconditioner, Tensor4, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("channel count {c} exceeds exhaustive-search bound {max}")]
    TooManyChannels { c: usize, max: usize },
    #[error("finite difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective returned a non-finite value at probe {index}")]
    NonFiniteObjective { index: usize },
    #[error("nnls: design matrix is empty or ill-shaped")]
    BadDesign,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Maximum channel count for exhaustive prox search (2^c patterns).
pub const MAX_BRUTE_FORCE_CHANNELS: usize = 12;

/// One-layer proximal-operator instance.
#[derive(Debug, Clone)]
pub struct ProxInstance {
    pub w_bar: Tensor4,
    pub b: DiagPreconditioner,
    pub s: f64,
    pub y: f64,
    pub alpha: f64,
    pub rho1: f64,
}

/// Result of exhaustive prox minimization: the minimizing tensor, its
/// objective value, and the keep pattern (true = channel kept).
#[derive(Debug, Clone)]
pub struct BruteForceProx {
    pub minimizer: Tensor4,
    pub objective: f64,
    pub keep: Vec<bool>,
}

fn positive_part(v: f64) -> f64 {
    v.max(0.0)
}

/// Prox objective evaluated from scratch: (1/2)||w - w_bar||_B^2 +
/// alpha * (rho1/2 * [phi(w) - s]_+^2 + y * (phi(w) - s)).
pub fn prox_objective(inst: &ProxInstance, w: &Tensor4) -> f64 {
    let mut quad = 0.0;
    for (idx, (&we, &wb)) in w.data().iter().zip(inst.w_bar.data()).enumerate() {
        let diff = we - wb;
        quad += inst.b.data()[idx] * diff * diff;
    }
    // phi: count input channels with nonzero Euclidean norm
    let mut phi = 0usize;
    for i in 0..w.in_channels() {
        let mut nsq = 0.0;
        for idx in w.channel_slice_indices(i) {
            nsq += w.data()[idx] * w.data()[idx];
        }
        if nsq > 0.0 {
            phi += 1;
        }
    }
    let gap = phi as f64 - inst.s;
    0.5 * quad + inst.alpha * (0.5 * inst.rho1 * positive_part(gap).powi(2) + inst.y * gap)
}

/// Exhaustively minimizes the prox objective over all 2^c keep/zero channel
/// patterns. The optimal kept slice always equals the input slice, so the
/// pattern space covers every candidate minimizer.
pub fn brute_force_prox(inst: &ProxInstance) -> Result<BruteForceProx, OracleError> {
    let c = inst.w_bar.in_channels();
    if c > MAX_BRUTE_FORCE_CHANNELS {
        return Err(OracleError::TooManyChannels {
            c,
            max: MAX_BRUTE_FORCE_CHANNELS,
        });
    }
    let mut best: Option<BruteForceProx> = None;
    for pattern in 0..(1u32 << c) {
        let mut w = inst.w_bar.clone();
        for i in 0..c {
            if pattern & (1 << i) == 0 {
                w = crate::tensor::zero_channel(&w, i)?;
            }
        }
        let objective = prox_objective(inst, &w);
        let better = match &best {
            None => true,
            Some(b) => objective < b.objective,
        };
        if better {
            best = Some(BruteForceProx {
                minimizer: w,
                objective,
                keep: (0..c).map(|i| pattern & (1 << i) != 0).collect(),
            });
        }
    }
    Ok(best.expect("at least one pattern"))
}

/// Central finite differences: component j is (f(x + h e_j) - f(x - h e_j)) / 2h.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, OracleError>
where
    F: Fn(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(OracleError::BadStep(h));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OracleError::NonFiniteObjective { index: j });
        }
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Nonnegative least squares by the Lawson-Hanson active-set method:
/// minimize ||X a - y||^2 subject to a >= 0.
///
/// `x` is row-major with `rows` rows and `cols` columns. Sized for small
/// coefficient counts; the passive-set solves use normal equations.
pub fn nnls(x: &[f64], rows: usize, cols: usize, y: &[f64]) -> Result<Vec<f64>, OracleError> {
    if rows == 0 || cols == 0 || x.len() != rows * cols || y.len() != rows {
        return Err(OracleError::BadDesign);
    }
    let col = |j: usize, i: usize| x[i * cols + j];

    let mut a = vec![0.0f64; cols];
    let mut passive = vec![false; cols];

    // gradient of 1/2||Xa - y||^2 is X^T(Xa - y); we track w = -grad
    let grad_neg = |a: &[f64]| -> Vec<f64> {
        let mut resid = vec![0.0; rows];
        for i in 0..rows {
            let mut pred = 0.0;
            for j in 0..cols {
                pred += col(j, i) * a[j];
            }
            resid[i] = y[i] - pred;
        }
        (0..cols)
            .map(|j| (0..rows).map(|i| col(j, i) * resid[i]).sum())
            .collect()
    };

    let scale: f64 = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale * rows as f64;

    for _outer in 0..(10 * cols.max(3)) {
        let w = grad_neg(&a);
        let candidate = (0..cols)
            .filter(|&j| !passive[j])
            .max_by(|&p, &q| w[p].partial_cmp(&w[q]).expect("finite"));
        let j_star = match candidate {
            Some(j) if w[j] > tol => j,
            _ => break,
        };
        passive[j_star] = true;

        loop {
            let z = solve_passive_ls(x, rows, cols, y, &passive);
            let all_positive = (0..cols).filter(|&j| passive[j]).all(|j| z[j] > 0.0);
            if all_positive {
                for j in 0..cols {
                    a[j] = if passive[j] { z[j] } else { 0.0 };
                }
                break;
            }
            // step toward z until the first passive coordinate hits zero
            let mut step = f64::INFINITY;
            for j in 0..cols {
                if passive[j] && z[j] <= 0.0 {
                    let denom = a[j] - z[j];
                    if denom > 0.0 {
                        step = step.min(a[j] / denom);
                    }
                }
            }
            if !step.is_finite() {
                step = 0.0;
            }
            for j in 0..cols {
                if passive[j] {
                    a[j] += step * (z[j] - a[j]);
                }
            }
            for j in 0..cols {
                if passive[j] && a[j] <= tol {
                    a[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    Ok(a)
}

/// Least squares restricted to the passive columns, solved by normal
/// equations with partial pivoting. Returns a full-length vector with zeros
/// on active (clamped) coordinates.
fn solve_passive_ls(x: &[f64], rows: usize, cols: usize, y: &[f64], passive: &[bool]) -> Vec<f64> {
    let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
    let p = idx.len();
    let mut z = vec![0.0; cols];
    if p == 0 {
        return z;
    }
    let col = |j: usize, i: usize| x[i * cols + j];

    // normal equations: G = Xp^T Xp, rhs = Xp^T y
    let mut g = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p];
    for (r, &jr) in idx.iter().enumerate() {
        for (cc, &jc) in idx.iter().enumerate() {
            g[r * p + cc] = (0..rows).map(|i| col(jr, i) * col(jc, i)).sum();
        }
        rhs[r] = (0..rows).map(|i| col(jr, i) * y[i]).sum();
    }

    // gaussian elimination with partial pivoting
    for k in 0..p {
        let mut pivot = k;
        for r in (k + 1)..p {
            if g[r * p + k].abs() > g[pivot * p + k].abs() {
                pivot = r;
            }
        }
        if g[pivot * p + k].abs() < 1e-300 {
            continue; // singular direction; leave coordinate at zero
        }
        if pivot != k {
            for cc in 0..p {
                g.swap(k * p + cc, pivot * p + cc);
            }
            rhs.swap(k, pivot);
        }
        for r in (k + 1)..p {
            let factor = g[r * p + k] / g[k * p + k];
            for cc in k..p {
                g[r * p + cc] -= factor * g[k * p + cc];
            }
            rhs[r] -= factor * rhs[k];
        }
    }
    let mut sol = vec![0.0f64; p];
    for k in (0..p).rev() {
        let mut acc = rhs[k];
        for cc in (k + 1)..p {
            acc -= g[k * p + cc] * sol[cc];
        }
        sol[k] = if g[k * p + k].abs() < 1e-300 {
            0.0
        } else {
            acc / g[k * p + k]
        };
    }
    for (r, &j) in idx.iter().enumerate() {
        z[j] = sol[r];
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::layer_sparsity;

    fn one_elem_layer(values: &[f64]) -> Tensor4 {
        // d=1, rh=rw=1: channel i holds a single weight, so a_i = value^2
        Tensor4::from_vec(1, values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn identity_when_constraint_slack() {
        let w = one_elem_layer(&[2.0, -1.0, 0.5]);
        let inst = ProxInstance {
            b: DiagPreconditioner::identity(1, 3, 1, 1),
            w_bar: w.clone(),
            s: 3.0,
            y: 0.0,
            alpha: 0.1,
            rho1: 1.0,
        };
        let out = brute_force_prox(&inst).unwrap();
        assert_eq!(out.minimizer, w);
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn keeps_two_of_three_at_documented_thresholds() {
        // a = (5.0, 0.3, 0.01), alpha=0.1, rho1=1, y=0, s=1
        let w = one_elem_layer(&[5.0f64.sqrt(), 0.3f64.sqrt(), 0.01f64.sqrt()]);
        let inst = ProxInstance {
            b: DiagPreconditioner::identity(1, 3, 1, 1),
            w_bar: w,
            s: 1.0,
            y: 0.0,
            alpha: 0.1,
            rho1: 1.0,
        };
        let out = brute_force_prox(&inst).unwrap();
        assert_eq!(out.keep, vec![true, true, false]);
        // hand arithmetic over the 8 patterns gives objective
        // 0.01/2 + 0.1 * (1/2 * (2-1)^2 + 0) = 0.055
        assert!((out.objective - 0.055).abs() < 1e-12);
    }

    #[test]
    fn vanishing_alpha_gives_identity() {
        let w = one_elem_layer(&[0.3, 0.001, 2.0]);
        let inst = ProxInstance {
            b: DiagPreconditioner::identity(1, 3, 1, 1),
            w_bar: w.clone(),
            s: 1.0,
            y: 5.0,
            alpha: 1e-18,
            rho1: 1.0,
        };
        let out = brute_force_prox(&inst).unwrap();
        assert_eq!(out.minimizer, w);
        assert_eq!(layer_sparsity(&out.minimizer, 0.0), 3);
    }

    #[test]
    fn rejects_large_instances() {
        let w = Tensor4::zeros(1, 13, 1, 1);
        let inst = ProxInstance {
            b: DiagPreconditioner::identity(1, 13, 1, 1),
            w_bar: w,
            s: 1.0,
            y: 0.0,
            alpha: 0.1,
            rho1: 1.0,
        };
        assert!(matches!(
            brute_force_prox(&inst),
            Err(OracleError::TooManyChannels { .. })
        ));
    }

    #[test]
    fn finite_diff_on_quadratic() {
        // f(x) = x^2 at x = 3: derivative 6, central differences exact
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_on_constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn nnls_recovers_exact_nonnegative_solution() {
        // y = X a with a = (1, 2, 0.5) >= 0 and well-conditioned X
        let rows = 12;
        let cols = 3;
        let truth = [1.0, 2.0, 0.5];
        let mut x = Vec::with_capacity(rows * cols);
        let mut y = Vec::with_capacity(rows);
        for i in 0..rows {
            let f = [1.0, (i as f64 + 1.0), ((i * i) as f64 % 7.0) + 0.5];
            y.push(f.iter().zip(truth.iter()).map(|(a, b)| a * b).sum());
            x.extend_from_slice(&f);
        }
        let a = nnls(&x, rows, cols, &y).unwrap();
        for (got, want) in a.iter().zip(truth.iter()) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn nnls_clamps_negative_component() {
        // unconstrained LS solution has a negative coordinate; NNLS clamps it
        // X columns: e1-like and e2-like; y points opposite to column 2
        let x = vec![
            1.0, 0.0, //
            0.0, 1.0, //
            1.0, 0.0,
        ];
        let y = vec![2.0, -3.0, 2.0];
        let a = nnls(&x, 3, 2, &y).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-12);
        assert_eq!(a[1], 0.0);
    }
}
