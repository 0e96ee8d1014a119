//! Primal reference solver for the regularised problem
//! `min_π Σ c_ij π_ij + (ε/2) Σ π_ij² / (μ_i ν_j)` over the transport polytope,
//! by accelerated projected gradient with an exact Euclidean projection onto
//! the polytope. Shares no code with the dual solver.

use nalgebra::{DMatrix, DVector};
use qotlab::DiscreteMeasure;

pub struct OraclePlan {
    pub plan: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub objective: f64,
}

/// Euclidean projection onto `{π ≥ 0, π1 = a, π'1 = b}` by a primal
/// active-set method; each face problem is an equality-constrained least
/// squares solved with an eigendecomposition pseudo-inverse.
pub fn project_polytope(z: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let (n, m) = (a.len(), b.len());
    let len = n * m;
    let rows = n + m;
    let cons = DMatrix::from_fn(rows, len, |r, k| {
        let (i, j) = (k / m, k % m);
        if (r < n && r == i) || (r >= n && r - n == j) {
            1.0
        } else {
            0.0
        }
    });
    let rhs = DVector::from_iterator(rows, a.iter().chain(b).copied());
    let zv = DVector::from_column_slice(z);
    let mut x = DVector::from_fn(len, |k, _| a[k / m] * b[k % m]);
    let mut fixed = vec![false; len];
    for _ in 0..10 * len + 100 {
        let mask = DMatrix::from_fn(rows, len, |r, k| if fixed[k] { 0.0 } else { cons[(r, k)] });
        // x_F = z_F − A_F'λ with A_F A_F' λ = A_F z_F − b
        let gram = &mask * mask.transpose();
        let target = &mask * &zv - &rhs;
        let eig = gram.symmetric_eigen();
        let cut = 1e-10 * eig.eigenvalues.amax();
        let coef = eig.eigenvectors.transpose() * &target;
        let scaled = DVector::from_fn(rows, |r, _| {
            let l = eig.eigenvalues[r];
            if l.abs() > cut {
                coef[r] / l
            } else {
                0.0
            }
        });
        let lambda = &eig.eigenvectors * scaled;
        let shift = cons.transpose() * &lambda;
        let candidate = DVector::from_fn(len, |k, _| if fixed[k] { 0.0 } else { z[k] - shift[k] });
        let step = &candidate - &x;
        if step.amax() < 1e-15 {
            let (worst, k) = (0..len)
                .filter(|&k| fixed[k])
                .map(|k| (shift[k] - z[k], k))
                .fold((0.0, usize::MAX), |best, cur| if cur.0 < best.0 { cur } else { best });
            if worst >= -1e-13 {
                break;
            }
            fixed[k] = false;
            continue;
        }
        let mut alpha = 1.0;
        let mut block = None;
        for k in 0..len {
            if !fixed[k] && step[k] < 0.0 {
                let s = -x[k] / step[k];
                if s < alpha {
                    alpha = s;
                    block = Some(k);
                }
            }
        }
        x += alpha * step;
        if let Some(k) = block {
            fixed[k] = true;
            x[k] = 0.0;
        }
    }
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn solve(mu: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64) -> OraclePlan {
    let (n, m) = (mu.len(), nu.len());
    let (a, b) = (mu.weights(), nu.weights());
    let c: Vec<f64> = (0..n)
        .flat_map(|i| {
            (0..m).map(move |j| {
                0.5 * mu
                    .atom(i)
                    .iter()
                    .zip(nu.atom(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
        })
        .collect();
    let inv: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| 1.0 / (a[i] * b[j]))).collect();
    let lip = eps * inv.iter().cloned().fold(0.0, f64::max);
    let objective = |p: &[f64]| -> f64 {
        p.iter()
            .zip(&c)
            .zip(&inv)
            .map(|((pi, ci), w)| ci * pi + 0.5 * eps * w * pi * pi)
            .sum()
    };
    let grad = |p: &[f64]| -> Vec<f64> {
        p.iter()
            .zip(&c)
            .zip(&inv)
            .map(|((pi, ci), w)| ci + eps * w * pi)
            .collect()
    };

    let mut x: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| a[i] * b[j])).collect();
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut fx = objective(&x);
    for _ in 0..20_000 {
        let g = grad(&y);
        let step: Vec<f64> = y.iter().zip(&g).map(|(v, gv)| v - gv / lip).collect();
        let next = project_polytope(&step, a, b);
        let fnext = objective(&next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let moved = next.iter().zip(&x).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        if fnext > fx {
            if t == 1.0 {
                // a plain projected-gradient step no longer descends
                break;
            }
            // adaptive restart
            y = x.clone();
            t = 1.0;
            continue;
        }
        y = next
            .iter()
            .zip(&x)
            .map(|(u, v)| u + (t - 1.0) / t_next * (u - v))
            .collect();
        x = next;
        fx = fnext;
        t = t_next;
        if moved < 1e-14 {
            break;
        }
    }
    OraclePlan {
        objective: objective(&x),
        plan: x,
        rows: n,
        cols: m,
    }
}
