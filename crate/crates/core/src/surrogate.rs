//! Max-affine surrogate built from a dual potential, its Moreau envelope and
//! conjugates, and the Minty reflection of the envelope's gradient.
//!
//! `ψ̃(x) = max_j [⟨x, y_j⟩ − b_j]` with `b_j = ½‖y_j‖² − g_j`. The envelope
//! `ψ = ψ̃ □ ‖·‖²/(2λ)` is evaluated through its dual
//! `ψ(x) = −min_{θ ∈ Δ} [½λ‖Yθ‖² + Σ θ_j (b_j − ⟨x, y_j⟩)]`, whose minimiser
//! gives `∇ψ(x) = Yθ*`. Adding `½‖·‖²` to `ψ` only changes `λ` to `λ + 1`,
//! which is how the resolvent in [`ConvexSurrogate::minty_reflect`] is solved.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, dot, norm_sq, solve_dense};
use crate::measures::DiscreteMeasure;
use crate::qot_solver::DualPotentials;

/// KKT tolerance of the simplex QP.
pub const KKT_TOL: f64 = 1e-10;
/// Pricing tolerance: a column enters only if it improves by more than this.
const ENTER_TOL: f64 = 1e-13;
/// Relative residual below which a point counts as affinely dependent.
const AFFINE_TOL: f64 = 1e-10;
/// Phase-one objective above which the conjugate LP is declared infeasible.
const LP_FEAS_TOL: f64 = 1e-10;
const LP_PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSurrogate {
    pub dim: usize,
    /// Row-major slopes `y_j`.
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub lambda: f64,
    pub delta_eps: f64,
}

/// Value and gradient of the envelope at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Output of the Minty reflection at `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    /// `x′` solving `x′ + ∇ψ(x′) = u`.
    pub x_prime: Vec<f64>,
    /// `∇ψ(x′)`.
    pub gradient: Vec<f64>,
    /// `F(u) = x′ − ∇ψ(x′)`.
    pub reflected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detachment {
    /// `ψ(x) + ψ*(y) − ⟨x, y⟩`.
    pub gap: f64,
    /// `¼‖x − y − F(x + y)‖²`.
    pub lower_bound: f64,
    /// `‖x − x′‖²` with `x′` the resolvent point of `x + y`.
    pub minty_distance_sq: f64,
}

struct QpSolution {
    point: Vec<f64>,
    value: f64,
}

pub fn build_surrogate(pot: &DualPotentials, nu: &DiscreteMeasure, delta_eps: f64) -> Result<ConvexSurrogate> {
    if !(delta_eps > 0.0) || !delta_eps.is_finite() {
        return Err(Error::Precondition(format!("δ(ε) must be positive, got {delta_eps}")));
    }
    if pot.g_values.len() != nu.len() {
        return Err(Error::DimensionMismatch {
            left: pot.g_values.len(),
            right: nu.len(),
        });
    }
    let intercepts = nu
        .atoms()
        .zip(&pot.g_values)
        .map(|(y, g)| 0.5 * norm_sq(y) - g)
        .collect();
    Ok(ConvexSurrogate {
        dim: nu.dim(),
        slopes: nu.coords().to_vec(),
        intercepts,
        lambda: 2.0 * delta_eps,
        delta_eps,
    })
}

impl ConvexSurrogate {
    pub fn from_pieces(dim: usize, slopes: Vec<f64>, intercepts: Vec<f64>, lambda: f64) -> Result<Self> {
        if dim == 0 || slopes.len() != dim * intercepts.len() || intercepts.is_empty() {
            return Err(Error::InvalidConfig("slopes and intercepts disagree in length".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("λ must be positive, got {lambda}")));
        }
        Ok(Self {
            dim,
            slopes,
            intercepts,
            lambda,
            delta_eps: lambda / 2.0,
        })
    }

    pub fn len(&self) -> usize {
        self.intercepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intercepts.is_empty()
    }

    pub fn slope(&self, j: usize) -> &[f64] {
        &self.slopes[j * self.dim..(j + 1) * self.dim]
    }

    /// `ψ̃(x)`.
    pub fn eval_max_affine(&self, x: &[f64]) -> f64 {
        (0..self.len())
            .map(|j| dot(x, self.slope(j)) - self.intercepts[j])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Envelope value and gradient.
    pub fn eval_psi(&self, x: &[f64]) -> Result<EnvelopeValue> {
        self.check_dim(x)?;
        let sol = self.simplex_qp(x, self.lambda)?;
        Ok(EnvelopeValue {
            value: -sol.value,
            gradient: sol.point,
        })
    }

    /// `ψ*(y)`; `f64::INFINITY` outside the convex hull of the slopes.
    pub fn eval_psi_star(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        Ok(match self.max_affine_conjugate(y) {
            Some(v) => v + 0.5 * self.lambda * norm_sq(y),
            None => f64::INFINITY,
        })
    }

    /// `ψ*` at every slope, in slope order.
    pub fn psi_star_at_slopes(&self) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|j| {
                let y = self.slope(j);
                let v = self.max_affine_conjugate(y).unwrap_or(self.intercepts[j]);
                v + 0.5 * self.lambda * norm_sq(y)
            })
            .collect()
    }

    /// Resolvent of `∇ψ` at `u`.
    pub fn minty_reflect(&self, u: &[f64]) -> Result<Reflection> {
        self.check_dim(u)?;
        let sol = self.simplex_qp(u, self.lambda + 1.0)?;
        let gradient = sol.point;
        let x_prime: Vec<f64> = u.iter().zip(&gradient).map(|(a, g)| a - g).collect();
        let reflected = x_prime.iter().zip(&gradient).map(|(a, g)| a - g).collect();
        Ok(Reflection {
            x_prime,
            gradient,
            reflected,
        })
    }

    /// Fenchel gap at `(x, y)` and its quadratic lower bound. `None` when `ψ*(y) = +∞`.
    pub fn quadratic_detachment(&self, x: &[f64], y: &[f64]) -> Result<Option<Detachment>> {
        let star = self.eval_psi_star(y)?;
        if star.is_infinite() {
            return Ok(None);
        }
        let psi = self.eval_psi(x)?.value;
        let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
        let r = self.minty_reflect(&u)?;
        let diff: Vec<f64> = x.iter().zip(y).zip(&r.reflected).map(|((a, b), f)| a - b - f).collect();
        Ok(Some(Detachment {
            gap: psi + star - dot(x, y),
            lower_bound: 0.25 * norm_sq(&diff),
            minty_distance_sq: dist_sq(x, &r.x_prime),
        }))
    }

    /// JSON `{"slopes": [[…], …], "intercepts": […], "lambda": λ}`.
    pub fn to_json(&self) -> String {
        let slopes: Vec<&[f64]> = (0..self.len()).map(|j| self.slope(j)).collect();
        serde_json::json!({
            "slopes": slopes,
            "intercepts": self.intercepts,
            "lambda": self.lambda,
        })
        .to_string()
    }

    /// Probe trace with columns `x0.., psi, grad0..`.
    pub fn write_probe_csv<W: Write>(&self, points: &[Vec<f64>], mut out: W) -> Result<()> {
        let d = self.dim;
        let head: Vec<String> = (0..d)
            .map(|k| format!("x{k}"))
            .chain(std::iter::once("psi".to_string()))
            .chain((0..d).map(|k| format!("grad{k}")))
            .collect();
        writeln!(out, "{}", head.join(","))?;
        for p in points {
            let e = self.eval_psi(p)?;
            let row: Vec<String> = p
                .iter()
                .chain(std::iter::once(&e.value))
                .chain(&e.gradient)
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: x.len(),
                right: self.dim,
            });
        }
        Ok(())
    }

    fn point_of(&self, active: &[usize], theta: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        for (&j, &t) in active.iter().zip(theta) {
            p.iter_mut().zip(self.slope(j)).for_each(|(a, y)| *a += t * y);
        }
        p
    }

    /// `min_{θ ∈ Δ} ½λ‖Yθ‖² + Σ θ_j (b_j − ⟨x, y_j⟩)` by a primal active-set
    /// method whose free set stays affinely independent.
    fn simplex_qp(&self, x: &[f64], lambda: f64) -> Result<QpSolution> {
        let m = self.len();
        let lin = |j: usize| self.intercepts[j] - dot(x, self.slope(j));
        let start = (0..m)
            .map(|j| (0.5 * lambda * norm_sq(self.slope(j)) + lin(j), j))
            .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
            .1;
        let mut active = vec![start];
        let mut theta = vec![1.0];
        let cap = 20 * (m + self.dim) + 100;
        let mut residual = f64::INFINITY;
        for _ in 0..cap {
            let p = self.point_of(&active, &theta);
            let v: Vec<f64> = p.iter().zip(x).map(|(a, b)| lambda * a - b).collect();
            let grad = |j: usize| self.intercepts[j] + dot(self.slope(j), &v);
            let level: f64 = active.iter().zip(&theta).map(|(&j, t)| t * grad(j)).sum();
            let spread = active.iter().map(|&j| (grad(j) - level).abs()).fold(0.0, f64::max);
            let (gmin, k) =
                (0..m)
                    .map(|j| (grad(j), j))
                    .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best });
            residual = (level - gmin).max(0.0).max(spread);
            if gmin >= level - ENTER_TOL || active.contains(&k) {
                if residual <= KKT_TOL {
                    let value =
                        0.5 * lambda * norm_sq(&p) + active.iter().zip(&theta).map(|(&j, t)| t * lin(j)).sum::<f64>();
                    return Ok(QpSolution { point: p, value });
                }
                break;
            }
            if let Some(w) = self.affine_dependence(&active, k) {
                // slide along the dependence: the quadratic part is unchanged
                let (mut t, mut block) = (f64::INFINITY, 0);
                for (pos, &wf) in w.iter().enumerate() {
                    if wf < 0.0 {
                        let s = theta[pos] / -wf;
                        if s < t {
                            t = s;
                            block = pos;
                        }
                    }
                }
                for (th, wf) in theta.iter_mut().zip(&w) {
                    *th = (*th + t * wf).max(0.0);
                }
                active.remove(block);
                theta.remove(block);
                active.push(k);
                theta.push(t);
            } else {
                active.push(k);
                theta.push(0.0);
            }
            self.reoptimise(&mut active, &mut theta, x, lambda)?;
        }
        Err(Error::Subproblem {
            what: "simplex QP",
            residual,
        })
    }

    /// Coefficients `w` over `active` with `Σ w_f y_f + y_k = 0`, `Σ w_f = −1`,
    /// or `None` if `y_k` is affinely independent of the active slopes.
    fn affine_dependence(&self, active: &[usize], k: usize) -> Option<Vec<f64>> {
        let d = self.dim;
        let base = self.slope(active[0]);
        let r = active.len() - 1;
        let target: Vec<f64> = self.slope(k).iter().zip(base).map(|(a, b)| a - b).collect();
        let scale = norm_sq(&target).sqrt().max(1.0);
        if r == 0 {
            return (norm_sq(&target).sqrt() <= AFFINE_TOL * scale).then(|| vec![-1.0]);
        }
        let cols: Vec<Vec<f64>> = active[1..]
            .iter()
            .map(|&j| self.slope(j).iter().zip(base).map(|(a, b)| a - b).collect())
            .collect();
        let mut gram = vec![0.0; r * r];
        let mut rhs = vec![0.0; r];
        for a in 0..r {
            for b in 0..r {
                gram[a * r + b] = dot(&cols[a], &cols[b]);
            }
            rhs[a] = dot(&cols[a], &target);
        }
        solve_dense(&mut gram, &mut rhs, r, 1e-14)?;
        let mut fit = vec![0.0; d];
        for (c, beta) in cols.iter().zip(&rhs) {
            fit.iter_mut().zip(c).for_each(|(f, v)| *f += beta * v);
        }
        if dist_sq(&fit, &target).sqrt() > AFFINE_TOL * scale {
            return None;
        }
        let mut w = Vec::with_capacity(active.len());
        w.push(-(1.0 - rhs.iter().sum::<f64>()));
        w.extend(rhs.iter().map(|b| -b));
        Some(w)
    }

    /// Minimises over the current face, dropping blocking coordinates until
    /// the face optimum is strictly feasible.
    fn reoptimise(&self, active: &mut Vec<usize>, theta: &mut Vec<f64>, x: &[f64], lambda: f64) -> Result<()> {
        loop {
            let n = active.len();
            let size = n + 1;
            let mut a = vec![0.0; size * size];
            let mut b = vec![0.0; size];
            for r in 0..n {
                let yr = self.slope(active[r]);
                for c in 0..n {
                    a[r * size + c] = lambda * dot(yr, self.slope(active[c]));
                }
                a[r * size + n] = 1.0;
                a[n * size + r] = 1.0;
                b[r] = -(self.intercepts[active[r]] - dot(x, yr));
            }
            b[n] = 1.0;
            if solve_dense(&mut a, &mut b, size, 1e-14).is_none() {
                return Err(Error::Subproblem {
                    what: "simplex QP face system",
                    residual: f64::NAN,
                });
            }
            let target = &b[..n];
            if target.iter().all(|&t| t > 0.0) {
                theta.copy_from_slice(target);
                return Ok(());
            }
            let (mut alpha, mut block) = (f64::INFINITY, 0);
            for pos in 0..n {
                if target[pos] <= 0.0 {
                    let s = theta[pos] / (theta[pos] - target[pos]);
                    if s < alpha {
                        alpha = s;
                        block = pos;
                    }
                }
            }
            for (th, t) in theta.iter_mut().zip(target) {
                *th += alpha * (t - *th);
            }
            active.remove(block);
            theta.remove(block);
            let total: f64 = theta.iter().sum();
            theta.iter_mut().for_each(|t| *t = t.max(0.0) / total);
        }
    }

    /// `ψ̃*(y) = min{Σ θ_j b_j : Yθ = y, θ ∈ Δ}` by a two-phase simplex with Bland's rule.
    fn max_affine_conjugate(&self, y: &[f64]) -> Option<f64> {
        let (d, m) = (self.dim, self.len());
        let rows = d + 1;
        let cols = m + rows;
        let mut tab = vec![0.0; rows * cols];
        let mut rhs = vec![0.0; rows];
        for j in 0..m {
            for (r, v) in self.slope(j).iter().enumerate() {
                tab[r * cols + j] = *v;
            }
            tab[d * cols + j] = 1.0;
        }
        rhs[..d].copy_from_slice(y);
        rhs[d] = 1.0;
        for r in 0..rows {
            if rhs[r] < 0.0 {
                rhs[r] = -rhs[r];
                for c in 0..m {
                    tab[r * cols + c] = -tab[r * cols + c];
                }
            }
            tab[r * cols + m + r] = 1.0;
        }
        let mut lp = Tableau {
            rows,
            cols,
            tab,
            rhs,
            basis: (m..m + rows).collect(),
        };
        let phase1: Vec<f64> = (0..cols).map(|c| if c >= m { 1.0 } else { 0.0 }).collect();
        lp.optimise(&phase1, cols);
        if lp.objective(&phase1) > LP_FEAS_TOL {
            return None;
        }
        for r in 0..rows {
            if lp.basis[r] >= m {
                if let Some(c) = (0..m).find(|&c| lp.tab[r * cols + c].abs() > 1e-9) {
                    lp.pivot(r, c);
                }
            }
        }
        let mut phase2 = self.intercepts.clone();
        phase2.extend(std::iter::repeat_n(0.0, rows));
        lp.optimise(&phase2, m);
        Some(lp.objective(&phase2))
    }
}

/// Dense tableau in canonical form with respect to `basis`.
struct Tableau {
    rows: usize,
    cols: usize,
    tab: Vec<f64>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn objective(&self, cost: &[f64]) -> f64 {
        self.basis.iter().zip(&self.rhs).map(|(&b, v)| cost[b] * v).sum()
    }

    /// Bland's rule over columns `< allowed`.
    fn optimise(&mut self, cost: &[f64], allowed: usize) {
        let cap = 10_000 + 50 * self.cols;
        for _ in 0..cap {
            let entering = (0..allowed).find(|&c| {
                let rc = cost[c]
                    - (0..self.rows)
                        .map(|r| cost[self.basis[r]] * self.tab[r * self.cols + c])
                        .sum::<f64>();
                rc < -LP_PIVOT_TOL
            });
            let Some(c) = entering else { return };
            let mut leave: Option<(f64, usize)> = None;
            for r in 0..self.rows {
                let a = self.tab[r * self.cols + c];
                if a > LP_PIVOT_TOL {
                    let ratio = self.rhs[r] / a;
                    let better = match leave {
                        None => true,
                        Some((best, br)) => ratio < best || (ratio == best && self.basis[r] < self.basis[br]),
                    };
                    if better {
                        leave = Some((ratio, r));
                    }
                }
            }
            let Some((_, r)) = leave else { return };
            self.pivot(r, c);
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let cols = self.cols;
        let p = self.tab[r * cols + c];
        for k in 0..cols {
            self.tab[r * cols + k] /= p;
        }
        self.rhs[r] /= p;
        for q in 0..self.rows {
            if q != r {
                let f = self.tab[q * cols + c];
                if f != 0.0 {
                    for k in 0..cols {
                        self.tab[q * cols + k] -= f * self.tab[r * cols + k];
                    }
                    self.rhs[q] -= f * self.rhs[r];
                    if self.rhs[q] < 0.0 && self.rhs[q] > -1e-15 {
                        self.rhs[q] = 0.0;
                    }
                }
            }
        }
        self.basis[r] = c;
    }
}

/// `ψ′(y) = max_i [⟨x_i, y⟩ − ψ(x_i)]` with `ψ` cached at the atoms of μ.
#[derive(Debug, Clone)]
pub struct RestrictedConjugate {
    points: Vec<Vec<f64>>,
    psi: Vec<f64>,
}

impl RestrictedConjugate {
    pub fn new(surrogate: &ConvexSurrogate, mu: &DiscreteMeasure) -> Result<Self> {
        let points = mu.atom_vecs();
        let psi = points
            .par_iter()
            .map(|x| surrogate.eval_psi(x).map(|e| e.value))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, psi })
    }

    /// `ψ` at the atoms of μ, in atom order.
    pub fn psi_values(&self) -> &[f64] {
        &self.psi
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.points
            .iter()
            .zip(&self.psi)
            .map(|(x, p)| dot(x, y) - p)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn eval_psi_prime(surrogate: &ConvexSurrogate, mu: &DiscreteMeasure, y: &[f64]) -> Result<f64> {
    Ok(RestrictedConjugate::new(surrogate, mu)?.eval(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_piece() -> ConvexSurrogate {
        ConvexSurrogate::from_pieces(1, vec![-0.5, 0.5], vec![0.0, 0.0], 0.2).unwrap()
    }

    #[test]
    fn single_piece_is_affine() {
        let s = ConvexSurrogate::from_pieces(2, vec![0.3, -0.4], vec![0.1], 0.5).unwrap();
        let e = s.eval_psi(&[0.2, 0.7]).unwrap();
        assert_eq!(e.gradient, vec![0.3, -0.4]);
        // envelope of an affine map is the map shifted by −λ‖a‖²/2
        assert!((e.value - (0.06 - 0.28 - 0.1 - 0.25 * 0.25)).abs() < 1e-15);
        let star = s.eval_psi_star(&[0.3, -0.4]).unwrap();
        assert!((star - (0.1 + 0.25 * 0.25)).abs() < 1e-15);
        assert!(s.eval_psi_star(&[0.0, 0.0]).unwrap().is_infinite());
    }

    #[test]
    fn linear_shift_reflection() {
        let s = ConvexSurrogate::from_pieces(2, vec![0.3, -0.4], vec![0.1], 0.5).unwrap();
        let r = s.minty_reflect(&[0.5, 0.5]).unwrap();
        assert!((r.x_prime[0] - 0.2).abs() < 1e-15 && (r.x_prime[1] - 0.9).abs() < 1e-15);
        assert!((r.reflected[0] + 0.1).abs() < 1e-15 && (r.reflected[1] - 1.3).abs() < 1e-15);
        let zero = ConvexSurrogate::from_pieces(1, vec![0.0], vec![0.0], 0.5).unwrap();
        assert_eq!(zero.minty_reflect(&[0.3]).unwrap().reflected, vec![0.3]);
    }

    #[test]
    fn v_shape_envelope() {
        let s = two_piece();
        // Huber-like: far from the kink the envelope is ψ̃ − λ/8
        let far = s.eval_psi(&[1.0]).unwrap();
        assert!((far.value - (0.5 - 0.2 * 0.125)).abs() < 1e-14);
        assert!((far.gradient[0] - 0.5).abs() < 1e-14);
        let mid = s.eval_psi(&[0.0]).unwrap();
        assert!(mid.gradient[0].abs() < 1e-14);
        assert!(mid.value.abs() < 1e-14);
        let inside = s.eval_psi(&[0.05]).unwrap();
        assert!((inside.gradient[0] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn conjugate_lp_on_hull() {
        let s = two_piece();
        let v = s.eval_psi_star(&[0.1]).unwrap();
        assert!((v - 0.1 * 0.01).abs() < 1e-15);
        assert!(s.eval_psi_star(&[0.6]).unwrap().is_infinite());
    }

    #[test]
    fn affine_dependence_in_plane() {
        // three collinear slopes force the dependent-entry branch
        let s = ConvexSurrogate::from_pieces(
            2,
            vec![-0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, -0.5],
            vec![0.0, 0.0, -0.01, 0.02, 0.02],
            0.3,
        )
        .unwrap();
        for x in [[0.0, 0.0], [0.02, 0.01], [-0.3, 0.2], [0.9, -0.1]] {
            let e = s.eval_psi(&x).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                let mut a = x;
                let mut b = x;
                a[k] += h;
                b[k] -= h;
                let fd = (s.eval_psi(&a).unwrap().value - s.eval_psi(&b).unwrap().value) / (2.0 * h);
                assert!((fd - e.gradient[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn export_formats() {
        let s = two_piece();
        assert_eq!(
            s.to_json(),
            r#"{"intercepts":[0.0,0.0],"lambda":0.2,"slopes":[[-0.5],[0.5]]}"#
        );
        let mut buf = Vec::new();
        s.write_probe_csv(&[vec![1.0]], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x0,psi,grad0\n1,"));
    }
}
