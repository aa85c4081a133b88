//! Nonnegative least squares in Gram form:
//! minimize `½ λᵀHλ − cᵀλ` subject to `λ ≥ 0`.
//!
//! Spectral projected gradient (Barzilai–Borwein step, nonmonotone line
//! search) drives the iterate; whenever the support looks settled the free
//! block is solved directly, which is what gets the projected gradient down to
//! round-off level on singular Gram matrices (duplicated points).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub const MAX_ITERATIONS: usize = 50_000;

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub projected_gradient_norm: f64,
    pub converged: bool,
}

fn objective(h: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) - c.dot(x)
}

/// Norm of the gradient projected onto the feasible cone at `x`.
pub fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>) -> f64 {
    x.iter()
        .zip(g.iter())
        .map(|(&xi, &gi)| if xi > 0.0 { gi * gi } else { gi.min(0.0).powi(2) })
        .sum::<f64>()
        .sqrt()
}

/// Solves `H_FF x_F = c_F` on the support `F` with a pseudo-inverse.
fn solve_free_block(h: &DMatrix<f64>, c: &DVector<f64>, free: &[usize]) -> Option<DVector<f64>> {
    let m = free.len();
    if m == 0 {
        return None;
    }
    let hff = DMatrix::from_fn(m, m, |a, b| h[(free[a], free[b])]);
    let cf = DVector::from_fn(m, |a, _| c[free[a]]);
    let eig = SymmetricEigen::new(hff);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if top == 0.0 {
        return None;
    }
    let cutoff = top * 1e-13 * m as f64;
    let qtc = eig.eigenvectors.transpose() * cf;
    let scaled = DVector::from_fn(m, |i, _| {
        let l = eig.eigenvalues[i];
        if l.abs() > cutoff {
            qtc[i] / l
        } else {
            0.0
        }
    });
    let xf = &eig.eigenvectors * scaled;
    let mut x = DVector::zeros(h.nrows());
    for (a, &i) in free.iter().enumerate() {
        x[i] = xf[a];
    }
    Some(x)
}

/// Minimizes `½ xᵀHx − cᵀx` over `x ≥ 0` until the projected gradient norm
/// drops to `tol` or the iteration cap is hit.
pub fn solve(h: &DMatrix<f64>, c: &DVector<f64>, tol: f64, max_iterations: usize) -> NnlsSolution {
    let m = c.len();
    let mut x = DVector::<f64>::zeros(m);
    let mut g = h * &x - c;
    let mut f = objective(h, c, &x);
    let diag_max = (0..m).map(|i| h[(i, i)]).fold(0.0f64, f64::max);
    let mut step = if diag_max > 0.0 { 1.0 / diag_max } else { 1.0 };
    const MEMORY: usize = 10;
    let mut history = vec![f; 1];
    let mut last_support: Vec<usize> = Vec::new();
    let mut stable = 0usize;

    let mut iterations = 0;
    while iterations < max_iterations {
        let pg = projected_gradient_norm(&x, &g);
        if pg <= tol {
            return NnlsSolution { x, iterations, projected_gradient_norm: pg, converged: true };
        }
        iterations += 1;

        let support: Vec<usize> = (0..m).filter(|&i| x[i] > 0.0).collect();
        if support == last_support {
            stable += 1;
        } else {
            stable = 0;
            last_support = support.clone();
        }
        if stable == 3 || iterations % 200 == 0 {
            if let Some(mut cand) = solve_free_block(h, c, &support) {
                if cand.iter().all(|&t| t >= 0.0) {
                    let gc = h * &cand - c;
                    let fc = objective(h, c, &cand);
                    if fc <= f + 1e-12 * f.abs().max(1.0) {
                        x = cand;
                        g = gc;
                        f = fc;
                        history.push(f);
                        continue;
                    }
                } else {
                    cand.apply(|t| *t = t.max(0.0));
                    let fc = objective(h, c, &cand);
                    if fc < f {
                        g = h * &cand - c;
                        x = cand;
                        f = fc;
                        history.push(f);
                        continue;
                    }
                }
            }
        }

        // Spectral step with a nonmonotone (GLL) acceptance test.
        let mut d = &x - step * &g;
        d.apply(|t| *t = t.max(0.0));
        d -= &x;
        let gd = g.dot(&d);
        let fmax = history.iter().rev().take(MEMORY).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut t = 1.0;
        let (mut xn, mut fnew);
        loop {
            xn = &x + t * &d;
            fnew = objective(h, c, &xn);
            if fnew <= fmax + 1e-4 * t * gd || t < 1e-12 {
                break;
            }
            t *= 0.5;
        }
        let gn = h * &xn - c;
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        step = if sy > 0.0 { (s.dot(&s) / sy).clamp(1e-30, 1e30) } else { 1e30f64.min(step * 10.0) };
        x = xn;
        g = gn;
        f = fnew;
        history.push(f);
        if history.len() > MEMORY * 4 {
            history.drain(..history.len() - MEMORY);
        }
    }
    let pg = projected_gradient_norm(&x, &g);
    NnlsSolution { x, iterations, projected_gradient_norm: pg, converged: pg <= tol }
}
