//! Dual solver for quadratically regularised transport.
//!
//! The potentials `(f, g)` satisfy, for every atom `y_j` of ν and `x_i` of μ,
//!
//! ```text
//! Σ_i μ_i [f_i + g_j − c(x_i, y_j)]_+ = ε
//! Σ_j ν_j [f_i + g_j − c(x_i, y_j)]_+ = ε
//! ```
//!
//! with `c(x, y) = ‖x − y‖²/2`. Holding one block fixed, each coordinate of the
//! other solves a monotone piecewise-linear scalar equation, which is inverted
//! exactly by sorting its breakpoints. Sweeps alternate `g` then `f` until both
//! residual vectors are below tolerance. The optimal plan then has density
//! `[f_i + g_j − c_ij]_+ / ε` with respect to `μ ⊗ ν`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cost;
use crate::measures::DiscreteMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub residual_tol: f64,
    pub support_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_sweeps: 10_000,
            residual_tol: 1e-10,
            support_tol: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "residual_tol must be positive, got {}",
                self.residual_tol
            )));
        }
        if !(self.support_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "support_tol must be nonnegative, got {}",
                self.support_tol
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidConfig("max_sweeps must be positive".into()));
        }
        Ok(())
    }
}

/// Convention fixing the additive shift `(f + s, g − s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `∫ f dμ = ∫ g dν`.
    MeanBalanced,
    /// Kantorovich potentials of the unregularised problem.
    Kantorovich,
}

impl Normalization {
    pub fn tag(self) -> &'static str {
        match self {
            Normalization::MeanBalanced => "mean_balanced",
            Normalization::Kantorovich => "kantorovich",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub f_values: Vec<f64>,
    pub g_values: Vec<f64>,
    pub epsilon: f64,
    pub normalization: Normalization,
    /// Sup-norm marginal residual at convergence.
    pub residual: f64,
    pub sweeps: usize,
}

impl DualPotentials {
    /// `∫ f dμ + ∫ g dν`.
    pub fn dual_value(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        mu.integrate(&self.f_values) + nu.integrate(&self.g_values)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            epsilon: f64,
            normalization: &'static str,
            f: &'a [f64],
            g: &'a [f64],
            residual: f64,
        }
        serde_json::to_string(&Out {
            epsilon: self.epsilon,
            normalization: self.normalization.tag(),
            f: &self.f_values,
            g: &self.g_values,
            residual: self.residual,
        })
        .expect("potentials serialise")
    }
}

/// Unique `t` with `Σ_i w_i (t − s_i)_+ = ε`.
pub fn solve_scalar_update(thresholds: &[f64], weights: &[f64], epsilon: f64) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold list"));
    }
    if thresholds.len() != weights.len() {
        return Err(Error::InvalidConfig(format!(
            "{} thresholds but {} weights",
            thresholds.len(),
            weights.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidConfig("weights must be positive".into()));
    }
    let mut pieces: Vec<(f64, f64)> = thresholds.iter().copied().zip(weights.iter().copied()).collect();
    Ok(invert_pieces(&mut pieces, epsilon))
}

/// Core inversion on `(threshold, weight)` pairs; reorders `pieces`.
///
/// Only thresholds below `s_min + ε / w_min_at_s_min` can be active, so the
/// pairs are filtered before sorting.
fn invert_pieces(pieces: &mut Vec<(f64, f64)>, epsilon: f64) -> f64 {
    let (s_min, w_at_min) = pieces.iter().copied().fold((f64::INFINITY, 0.0), |(s, w), (si, wi)| {
        if si < s {
            (si, wi)
        } else if si == s {
            (s, w + wi)
        } else {
            (s, w)
        }
    });
    let upper = s_min + epsilon / w_at_min;
    pieces.retain(|&(s, _)| s < upper);
    pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
    // work relative to s_min to limit cancellation
    let mut w_acc = 0.0;
    let mut ws_acc = 0.0;
    let n = pieces.len();
    for k in 0..n {
        let (s, w) = pieces[k];
        w_acc += w;
        ws_acc += w * (s - s_min);
        let t = (epsilon + ws_acc) / w_acc;
        if k + 1 == n || t <= pieces[k + 1].0 - s_min {
            return s_min + t;
        }
    }
    unreachable!("the smallest threshold is always retained")
}

/// Scratch state for repeated scalar inversions along one block.
struct Inverter {
    pieces: Vec<(f64, f64)>,
}

impl Inverter {
    fn new() -> Self {
        Self { pieces: Vec::new() }
    }

    fn solve(&mut self, point: &[f64], others: &DiscreteMeasure, other_potential: &[f64], epsilon: f64) -> f64 {
        self.pieces.clear();
        self.pieces.extend(
            others
                .atoms()
                .zip(other_potential)
                .zip(others.weights())
                .map(|((y, &g), &w)| (cost(point, y) - g, w)),
        );
        invert_pieces(&mut self.pieces, epsilon)
    }
}

/// Potential of one block given the other: each entry solves its marginal equation exactly.
fn half_sweep(
    targets: &DiscreteMeasure,
    others: &DiscreteMeasure,
    other_potential: &[f64],
    epsilon: f64,
    out: &mut [f64],
) {
    out.par_iter_mut()
        .enumerate()
        .with_min_len(16)
        .for_each_init(Inverter::new, |inv, (j, slot)| {
            *slot = inv.solve(targets.atom(j), others, other_potential, epsilon);
        });
}

/// Marginal residuals of the equations indexed by `targets`:
/// returns `(max |Σ w [·]_+ − ε|, max mass deviation)`, where the mass deviation
/// of atom `j` is `weight_j · |·| / ε`, the error of the matching coupling marginal.
fn block_residual(
    targets: &DiscreteMeasure,
    target_potential: &[f64],
    others: &DiscreteMeasure,
    other_potential: &[f64],
    epsilon: f64,
) -> (f64, f64) {
    (0..targets.len())
        .into_par_iter()
        .with_min_len(16)
        .map(|j| {
            let y = targets.atom(j);
            let gj = target_potential[j];
            let s: f64 = others
                .atoms()
                .zip(other_potential)
                .zip(others.weights())
                .map(|((x, &f), &w)| w * (f + gj - cost(x, y)).max(0.0))
                .sum();
            let r = (s - epsilon).abs();
            (r, targets.weight(j) * r / epsilon)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// Sup-norm residual of both marginal systems (equation and coupling-mass scales).
pub fn marginal_residual(pot: &DualPotentials, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let (a, b) = block_residual(nu, &pot.g_values, mu, &pot.f_values, pot.epsilon);
    let (c, d) = block_residual(mu, &pot.f_values, nu, &pot.g_values, pot.epsilon);
    a.max(b).max(c).max(d)
}

/// Solves the dual system for `(f_ε, g_ε)`.
pub fn solve(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &SolverConfig) -> Result<DualPotentials> {
    cfg.validate()?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            left: mu.dim(),
            right: nu.dim(),
        });
    }
    let eps = cfg.epsilon;
    let self_transport = mu.same_as(nu);
    let mut f = vec![0.0; mu.len()];
    let mut g = vec![0.0; nu.len()];
    let mut target = cfg.residual_tol / 2.0;
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    loop {
        while sweeps < cfg.max_sweeps {
            half_sweep(nu, mu, &f, eps, &mut g);
            half_sweep(mu, nu, &g, eps, &mut f);
            sweeps += 1;
            // the f block is exact after its half-sweep; only the g equations carry error
            let (r_eq, r_mass) = block_residual(nu, &g, mu, &f, eps);
            residual = r_eq.max(r_mass);
            if !residual.is_finite() {
                return Err(Error::NonConvergence { sweeps, residual });
            }
            if residual <= target {
                break;
            }
        }
        if residual > target {
            return Err(Error::NonConvergence { sweeps, residual });
        }
        let shift = (nu.integrate(&g) - mu.integrate(&f)) / 2.0;
        f.iter_mut().for_each(|v| *v += shift);
        g.iter_mut().for_each(|v| *v -= shift);
        if self_transport {
            for (a, b) in f.iter_mut().zip(g.iter_mut()) {
                let m = 0.5 * (*a + *b);
                *a = m;
                *b = m;
            }
        }
        let pot = DualPotentials {
            f_values: f.clone(),
            g_values: g.clone(),
            epsilon: eps,
            normalization: Normalization::MeanBalanced,
            residual: 0.0,
            sweeps,
        };
        let full = marginal_residual(&pot, mu, nu);
        if full <= cfg.residual_tol {
            return Ok(DualPotentials { residual: full, ..pot });
        }
        // post-processing pushed the residual up; tighten and continue
        target /= 4.0;
        if target < f64::EPSILON * eps {
            return Err(Error::NonConvergence { sweeps, residual: full });
        }
    }
}

/// `f_ε(x)` at an arbitrary point: the `t` solving `Σ_j ν_j [t + g_j − c(x, y_j)]_+ = ε`.
pub fn evaluate_f_at(x: &[f64], pot: &DualPotentials, nu: &DiscreteMeasure) -> Result<f64> {
    check_point(x, nu)?;
    let th: Vec<f64> = nu.atoms().zip(&pot.g_values).map(|(y, g)| cost(x, y) - g).collect();
    solve_scalar_update(&th, nu.weights(), pot.epsilon)
}

/// `g_ε(y)` at an arbitrary point, symmetric to [`evaluate_f_at`].
pub fn evaluate_g_at(y: &[f64], pot: &DualPotentials, mu: &DiscreteMeasure) -> Result<f64> {
    check_point(y, mu)?;
    let th: Vec<f64> = mu.atoms().zip(&pot.f_values).map(|(x, f)| cost(x, y) - f).collect();
    solve_scalar_update(&th, mu.weights(), pot.epsilon)
}

fn check_point(x: &[f64], m: &DiscreteMeasure) -> Result<()> {
    if x.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: m.dim(),
        });
    }
    Ok(())
}

/// One positive-mass cell of a coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub row: usize,
    pub col: usize,
    pub mass: f64,
    /// `dπ/d(μ⊗ν)`; absent for unregularised plans.
    pub density: Option<f64>,
}

/// Sparse transport plan between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub rows: usize,
    pub cols: usize,
    pub epsilon: Option<f64>,
    /// Entries sorted by `(row, col)`.
    pub entries: Vec<CouplingEntry>,
    /// Indices into `entries` forming the support.
    pub support: Vec<usize>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    /// Sup-norm deviation of the marginals from the prescribed weights.
    pub residual: f64,
}

impl Coupling {
    pub fn from_entries(
        entries: Vec<CouplingEntry>,
        support: Vec<usize>,
        mu: &DiscreteMeasure,
        nu: &DiscreteMeasure,
        epsilon: Option<f64>,
    ) -> Self {
        let mut row_sums = vec![0.0; mu.len()];
        let mut col_sums = vec![0.0; nu.len()];
        for e in &entries {
            row_sums[e.row] += e.mass;
            col_sums[e.col] += e.mass;
        }
        let residual = row_sums
            .iter()
            .zip(mu.weights())
            .chain(col_sums.iter().zip(nu.weights()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Self {
            rows: mu.len(),
            cols: nu.len(),
            epsilon,
            entries,
            support,
            row_sums,
            col_sums,
            residual,
        }
    }

    pub fn support_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.support.iter().map(|&k| (self.entries[k].row, self.entries[k].col))
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    /// Dense `rows × cols` mass matrix.
    pub fn dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.rows * self.cols];
        for e in &self.entries {
            m[e.row * self.cols + e.col] = e.mass;
        }
        m
    }

    /// `∫ c dπ`.
    pub fn transport_cost(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        self.entries
            .iter()
            .map(|e| e.mass * cost(mu.atom(e.row), nu.atom(e.col)))
            .sum()
    }

    /// Columns supported in `row`, in ascending order.
    pub fn row_support(&self, row: usize) -> Vec<usize> {
        let start = self.support.partition_point(|&k| self.entries[k].row < row);
        self.support[start..]
            .iter()
            .take_while(|&&k| self.entries[k].row == row)
            .map(|&k| self.entries[k].col)
            .collect()
    }

    /// JSON `{"epsilon": …, "entries": [[i, j, mass, density], …], "residual": r}`.
    pub fn to_json(&self) -> String {
        let entries: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| serde_json::json!([e.row, e.col, e.mass, e.density]))
            .collect();
        serde_json::json!({
            "epsilon": self.epsilon,
            "entries": entries,
            "residual": self.residual,
        })
        .to_string()
    }
}

/// Optimal plan from converged potentials.
pub fn assemble_coupling(
    pot: &DualPotentials,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cfg: &SolverConfig,
) -> Result<Coupling> {
    let eps = pot.epsilon;
    let rows: Vec<Vec<(usize, f64)>> = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let x = mu.atom(i);
            let fi = pot.f_values[i];
            nu.atoms()
                .zip(&pot.g_values)
                .enumerate()
                .filter_map(|(j, (y, &g))| {
                    let excess = fi + g - cost(x, y);
                    (excess > 0.0).then_some((j, excess))
                })
                .collect()
        })
        .collect();
    let mut entries = Vec::new();
    let mut support = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        for (j, excess) in row {
            if excess > cfg.support_tol {
                support.push(entries.len());
            }
            let density = excess / eps;
            entries.push(CouplingEntry {
                row: i,
                col: j,
                mass: mu.weight(i) * nu.weight(j) * density,
                density: Some(density),
            });
        }
    }
    let coupling = Coupling::from_entries(entries, support, mu, nu, Some(eps));
    if coupling.residual > 10.0 * cfg.residual_tol {
        return Err(Error::Inconsistent(format!(
            "coupling marginal residual {:e} exceeds 10x tolerance; potentials are stale",
            coupling.residual
        )));
    }
    Ok(coupling)
}

/// `sup_{i,j} [f_i + g_j − c(x_i, y_j)]` (ε times the largest density) and its argmax.
pub fn max_density(pot: &DualPotentials, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> (f64, (usize, usize)) {
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for (i, x) in mu.atoms().enumerate() {
        for (j, y) in nu.atoms().enumerate() {
            let v = pot.f_values[i] + pot.g_values[j] - cost(x, y);
            if v > best.0 {
                best = (v, (i, j));
            }
        }
    }
    best
}

/// Conditional barycenter `ȳ(x_i)` of the support columns of row `i`, weighted by ν.
pub fn row_barycenter(i: usize, coupling: &Coupling, nu: &DiscreteMeasure) -> Result<Vec<f64>> {
    let cols = coupling.row_support(i);
    if cols.is_empty() {
        return Err(Error::Inconsistent(format!("row {i} has empty support")));
    }
    let mut acc = vec![0.0; nu.dim()];
    let mut mass = 0.0;
    for j in cols {
        let w = nu.weight(j);
        mass += w;
        acc.iter_mut().zip(nu.atom(j)).for_each(|(a, y)| *a += w * y);
    }
    acc.iter_mut().for_each(|a| *a /= mass);
    Ok(acc)
}
