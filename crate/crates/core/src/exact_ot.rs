//! Unregularised optimal transport by the transportation network simplex.
//!
//! Costs are scaled to integers so reduced-cost signs are exact and pivots are
//! reproducible. Flows stay in floating point. The returned potentials are
//! cleaned by a double c-transform so `f⋆ ⊕ g⋆ ≤ c` holds to rounding.

use crate::error::{Error, Result};
use crate::linalg::cost;
use crate::measures::{DiscreteMeasure, MongeMapSpec};
use crate::qot_solver::{Coupling, CouplingEntry};

/// Largest number of atoms accepted per marginal.
pub const EXACT_ATOM_CAP: usize = 5000;
/// Cost quantum for the integer pivoting arithmetic.
pub const COST_RESOLUTION: f64 = 1e-12;
/// Flows below this are treated as zero when assembling the coupling.
const FLOW_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct ExactOTSolution {
    pub coupling: Coupling,
    /// `C(μ, ν)`.
    pub cost: f64,
    pub f_star: Vec<f64>,
    pub g_star: Vec<f64>,
    pub monge: Option<MongeMapSpec>,
}

impl ExactOTSolution {
    pub fn dual_value(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        mu.integrate(&self.f_star) + nu.integrate(&self.g_star)
    }

    /// Potential export, tagged `"kantorovich"`.
    pub fn potentials_json(&self) -> String {
        serde_json::json!({
            "normalization": "kantorovich",
            "f": self.f_star,
            "g": self.g_star,
        })
        .to_string()
    }
}

/// Spanning-tree basis over `n` sources followed by `m` sinks, rooted at node 0.
struct Tree {
    n: usize,
    m: usize,
    parent: Vec<usize>,
    /// Flow on the arc joining a node to its parent.
    flow: Vec<f64>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    potential: Vec<i64>,
}

const NONE: usize = usize::MAX;

impl Tree {
    fn arc_cost(&self, costs: &[i64], a: usize, b: usize) -> i64 {
        let (s, t) = if a < self.n { (a, b - self.n) } else { (b, a - self.n) };
        costs[s * self.m + t]
    }

    /// North-west corner basis: `n + m − 1` arcs forming a staircase path.
    fn north_west(mu: &DiscreteMeasure, nu: &DiscreteMeasure, costs: &[i64]) -> Self {
        let (n, m) = (mu.len(), nu.len());
        let total = n + m;
        let mut arcs = Vec::with_capacity(total - 1);
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (mu.weight(0), nu.weight(0));
        loop {
            let last_i = i == n - 1;
            let last_j = j == m - 1;
            let x = if last_i && last_j {
                ra.min(rb)
            } else if last_i {
                rb
            } else if last_j {
                ra
            } else {
                ra.min(rb)
            };
            let x = x.max(0.0);
            arcs.push((i, j, x));
            if last_i && last_j {
                break;
            }
            if !last_i && (last_j || ra <= rb) {
                rb -= x;
                i += 1;
                ra = mu.weight(i);
            } else {
                ra -= x;
                j += 1;
                rb = nu.weight(j);
            }
        }
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];
        for &(i, j, x) in &arcs {
            adj[i].push((n + j, x));
            adj[n + j].push((i, x));
        }
        let mut tree = Tree {
            n,
            m,
            parent: vec![NONE; total],
            flow: vec![0.0; total],
            depth: vec![0; total],
            children: vec![Vec::new(); total],
            potential: vec![0; total],
        };
        let mut stack = vec![0usize];
        let mut seen = vec![false; total];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, x) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    tree.parent[v] = u;
                    tree.flow[v] = x;
                    tree.depth[v] = tree.depth[u] + 1;
                    tree.potential[v] = tree.arc_cost(costs, u, v) - tree.potential[u];
                    tree.children[u].push(v);
                    stack.push(v);
                }
            }
        }
        tree
    }

    fn reduced_cost(&self, costs: &[i64], i: usize, j: usize) -> i64 {
        costs[i * self.m + j] - self.potential[i] - self.potential[self.n + j]
    }

    /// Pushes flow around the cycle closed by arc `(i, j)` and updates the basis.
    fn pivot(&mut self, costs: &[i64], i: usize, j: usize) {
        let (src, snk) = (i, self.n + j);
        // Tree arcs on the cycle, identified by their child node; every one
        // adjacent to an endpoint loses flow and signs alternate from there.
        let mut side_i = Vec::new();
        let mut side_j = Vec::new();
        let (mut a, mut b) = (src, snk);
        while a != b {
            if self.depth[a] >= self.depth[b] {
                side_i.push(a);
                a = self.parent[a];
            } else {
                side_j.push(b);
                b = self.parent[b];
            }
        }
        let theta = side_i
            .iter()
            .step_by(2)
            .chain(side_j.iter().step_by(2))
            .map(|&v| self.flow[v])
            .fold(f64::INFINITY, f64::min);
        // Leaving arc: last blocking arc met when walking the cycle from the apex
        // in the orientation of the entering arc.
        let leaving_j = side_j.iter().step_by(2).rev().find(|&&v| self.flow[v] == theta);
        let (leave, entering_in_subtree, other) = match leaving_j {
            Some(&v) => (v, snk, src),
            None => {
                let v = *side_i
                    .iter()
                    .step_by(2)
                    .find(|&&v| self.flow[v] == theta)
                    .expect("a blocking arc exists on the cycle");
                (v, src, snk)
            }
        };
        for (k, &v) in side_i.iter().enumerate() {
            self.flow[v] += if k % 2 == 0 { -theta } else { theta };
        }
        for (k, &v) in side_j.iter().enumerate() {
            self.flow[v] += if k % 2 == 0 { -theta } else { theta };
        }
        for &v in side_i.iter().step_by(2).chain(side_j.iter().step_by(2)) {
            if self.flow[v] < 0.0 {
                self.flow[v] = 0.0;
            }
        }

        // detach the leaving subtree and re-root it at the entering endpoint
        let old_parent = self.parent[leave];
        self.children[old_parent].retain(|&c| c != leave);
        let mut path = vec![entering_in_subtree];
        while *path.last().expect("non-empty") != leave {
            let v = *path.last().expect("non-empty");
            path.push(self.parent[v]);
        }
        for t in (0..path.len() - 1).rev() {
            let (child, up) = (path[t], path[t + 1]);
            self.children[up].retain(|&c| c != child);
            self.children[child].push(up);
            self.parent[up] = child;
            self.flow[up] = self.flow[child];
        }
        self.parent[entering_in_subtree] = other;
        self.flow[entering_in_subtree] = theta;
        self.children[other].push(entering_in_subtree);

        let mut stack = vec![entering_in_subtree];
        while let Some(u) = stack.pop() {
            let p = self.parent[u];
            self.depth[u] = self.depth[p] + 1;
            self.potential[u] = self.arc_cost(costs, p, u) - self.potential[p];
            stack.extend(self.children[u].iter().copied());
        }
    }
}

/// Optimal coupling and Kantorovich potentials for the quadratic cost.
pub fn solve_exact(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<ExactOTSolution> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            left: mu.dim(),
            right: nu.dim(),
        });
    }
    for m in [mu, nu] {
        if m.len() > EXACT_ATOM_CAP {
            return Err(Error::ExactCap {
                atoms: m.len(),
                cap: EXACT_ATOM_CAP,
            });
        }
    }
    let (n, m) = (mu.len(), nu.len());
    let real_costs: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| cost(mu.atom(i), nu.atom(j))))
        .collect();
    let costs: Vec<i64> = real_costs
        .iter()
        .map(|c| (c / COST_RESOLUTION).round() as i64)
        .collect();
    let mut tree = Tree::north_west(mu, nu, &costs);

    let arcs = n * m;
    let block = ((arcs as f64).sqrt().ceil() as usize).max(1);
    let max_pivots = 50 * arcs + 1000;
    let mut start = 0;
    let mut pivots = 0;
    loop {
        let mut best: Option<(i64, usize)> = None;
        let mut scanned = 0;
        let mut k = start;
        while scanned < arcs {
            let stop = (scanned + block).min(arcs);
            while scanned < stop {
                let rc = tree.reduced_cost(&costs, k / m, k % m);
                if rc < 0 && best.is_none_or(|(b, _)| rc < b) {
                    best = Some((rc, k));
                }
                scanned += 1;
                k += 1;
                if k == arcs {
                    k = 0;
                }
            }
            if best.is_some() {
                break;
            }
        }
        let Some((_, arc)) = best else { break };
        tree.pivot(&costs, arc / m, arc % m);
        start = k;
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Inconsistent(format!(
                "network simplex exceeded {max_pivots} pivots"
            )));
        }
    }

    let mut entries = Vec::new();
    for v in 1..n + m {
        let p = tree.parent[v];
        let x = tree.flow[v];
        if x > FLOW_FLOOR {
            let (s, t) = if v < n { (v, p - n) } else { (p, v - n) };
            entries.push(CouplingEntry {
                row: s,
                col: t,
                mass: x,
                density: None,
            });
        }
    }
    entries.sort_by_key(|e| (e.row, e.col));
    let support: Vec<usize> = (0..entries.len()).collect();
    let coupling = Coupling::from_entries(entries, support, mu, nu, None);
    if coupling.residual > 1e-10 {
        return Err(Error::Inconsistent(format!(
            "exact coupling marginal residual {:e}",
            coupling.residual
        )));
    }

    let mut f: Vec<f64> = (0..n).map(|i| tree.potential[i] as f64 * COST_RESOLUTION).collect();
    let mut g = vec![0.0; m];
    for (j, gj) in g.iter_mut().enumerate() {
        *gj = (0..n)
            .map(|i| real_costs[i * m + j] - f[i])
            .fold(f64::INFINITY, f64::min);
    }
    for (i, fi) in f.iter_mut().enumerate() {
        *fi = (0..m)
            .map(|j| real_costs[i * m + j] - g[j])
            .fold(f64::INFINITY, f64::min);
    }
    let cost_value = coupling.transport_cost(mu, nu);
    let mut sol = ExactOTSolution {
        coupling,
        cost: cost_value,
        f_star: f,
        g_star: g,
        monge: None,
    };
    sol.monge = monge_from_solution(&sol, mu, nu);
    Ok(sol)
}

/// Tabulated map `x_i ↦ y_{σ(i)}` when every row of the plan has one support column.
pub fn monge_from_solution(sol: &ExactOTSolution, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Option<MongeMapSpec> {
    let c = &sol.coupling;
    let mut target = vec![NONE; c.rows];
    for e in &c.entries {
        if target[e.row] != NONE {
            return None;
        }
        target[e.row] = e.col;
    }
    if target.contains(&NONE) {
        return None;
    }
    let images: Vec<Vec<f64>> = target.iter().map(|&j| nu.atom(j).to_vec()).collect();
    // Brenier potential φ = ½‖x‖² − f⋆ at the atoms
    let potential: Vec<f64> = mu
        .atoms()
        .zip(&sol.f_star)
        .map(|(x, f)| 0.5 * crate::linalg::norm_sq(x) - f)
        .collect();
    MongeMapSpec::tabulated(mu, images, Some(potential)).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{pushforward, uniform_ball_grid};

    #[test]
    fn two_point_monotone_matching() {
        let mu = DiscreteMeasure::new(&[vec![-1.0], vec![1.0]], &[0.5, 0.5]).unwrap();
        let nu = DiscreteMeasure::new(&[vec![-0.5], vec![0.5]], &[0.5, 0.5]).unwrap();
        let sol = solve_exact(&mu, &nu).unwrap();
        // monotone: 2·½·½·0.5² = 0.125; crossing: 2·½·½·1.5² = 1.125
        let monotone: f64 = 2.0 * 0.5 * 0.5 * 0.25;
        let crossing = 2.0 * 0.5 * 0.5 * 2.25;
        assert!((sol.cost - monotone.min(crossing)).abs() < 1e-15, "{}", sol.cost);
        assert_eq!(sol.coupling.support_len(), 2);
        assert!((sol.dual_value(&mu, &nu) - sol.cost).abs() < 1e-10);
        let monge = sol.monge.unwrap();
        assert_eq!(monge.image(0, &[-1.0]), vec![-0.5]);
    }

    #[test]
    fn self_transport_is_diagonal() {
        let mu = uniform_ball_grid(2, 0.25).unwrap();
        let sol = solve_exact(&mu, &mu).unwrap();
        assert!(sol.cost.abs() < 1e-15);
        for e in &sol.coupling.entries {
            assert_eq!(e.row, e.col);
        }
        for i in 0..mu.len() {
            assert!((sol.f_star[i] + sol.g_star[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn affine_support_on_graph() {
        let mu = uniform_ball_grid(1, 0.05).unwrap();
        let map = MongeMapSpec::scaling(1, 0.5).unwrap();
        let nu = pushforward(&mu, &map).unwrap();
        let sol = solve_exact(&mu, &nu).unwrap();
        for e in &sol.coupling.entries {
            let img = map.image(e.row, mu.atom(e.row));
            assert!((nu.atom(e.col)[0] - img[0]).abs() < 1e-12);
        }
        let tab = sol.monge.unwrap();
        for i in 0..mu.len() {
            assert!((tab.image(i, mu.atom(i))[0] - 0.5 * mu.atom(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_row_is_refused() {
        let mu = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let nu = DiscreteMeasure::new(&[vec![-0.5], vec![0.5]], &[0.5, 0.5]).unwrap();
        let sol = solve_exact(&mu, &nu).unwrap();
        assert!(sol.monge.is_none());
        assert!((sol.cost - 0.125).abs() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let big = uniform_ball_grid(2, 0.02).unwrap();
        assert!(big.len() > EXACT_ATOM_CAP);
        let one = DiscreteMeasure::dirac(&[0.0, 0.0]).unwrap();
        assert!(matches!(solve_exact(&big, &one), Err(Error::ExactCap { .. })));
    }
}
