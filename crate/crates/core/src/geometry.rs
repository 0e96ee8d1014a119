//! Spread functions and support-shape metrics.
//!
//! `ρ(r) = min_{x ∈ spt μ} μ(B(x, r))` with open balls, and the two spreads
//! `δ(ε) = inf{r > 0 : r ρ(r) > ε}` and `δ_ST(ε) = inf{r > 0 : r ρ(√r) > ε}`.
//! For a discrete measure `ρ` is a left-continuous step function that only
//! jumps just after pairwise atom distances, so both infima have a closed
//! form on each constancy interval.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::dist;
use crate::measures::DiscreteMeasure;

/// `ρ` as a step function.
///
/// `levels[k]` is the value of `ρ` on `(breaks[k-1], breaks[k]]`, with
/// `breaks[-1] = 0` and `breaks[m] = ∞`; the final level is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadProfile {
    pub breaks: Vec<f64>,
    pub levels: Vec<f64>,
    /// Free-form identity of the measure the profile came from.
    pub source: String,
}

/// Min-segment tree over per-atom ball masses.
struct MinTree {
    size: usize,
    data: Vec<f64>,
}

impl MinTree {
    fn new(values: &[f64]) -> Self {
        let size = values.len().next_power_of_two();
        let mut data = vec![f64::INFINITY; 2 * size];
        data[size..size + values.len()].copy_from_slice(values);
        for k in (1..size).rev() {
            data[k] = data[2 * k].min(data[2 * k + 1]);
        }
        Self { size, data }
    }

    fn add(&mut self, i: usize, v: f64) {
        let mut k = i + self.size;
        self.data[k] += v;
        while k > 1 {
            k /= 2;
            self.data[k] = self.data[2 * k].min(self.data[2 * k + 1]);
        }
    }

    fn min(&self) -> f64 {
        self.data[1]
    }
}

/// Builds `ρ` for `mu` by sweeping all pairwise distances in increasing order.
pub fn build_spread(mu: &DiscreteMeasure) -> SpreadProfile {
    build_spread_named(mu, "")
}

pub fn build_spread_named(mu: &DiscreteMeasure, source: &str) -> SpreadProfile {
    let n = mu.len();
    let mut events: Vec<(f64, u32, u32)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for k in (i + 1)..n {
            events.push((dist(mu.atom(i), mu.atom(k)), i as u32, k as u32));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tree = MinTree::new(mu.weights());
    let mut breaks = Vec::new();
    let mut levels = vec![tree.min()];
    let mut idx = 0;
    while idx < events.len() {
        let d = events[idx].0;
        while idx < events.len() && events[idx].0 == d {
            let (_, i, k) = events[idx];
            tree.add(i as usize, mu.weight(k as usize));
            tree.add(k as usize, mu.weight(i as usize));
            idx += 1;
        }
        breaks.push(d);
        levels.push(tree.min());
    }
    // every ball beyond the diameter holds the whole unit mass
    *levels.last_mut().expect("at least one level") = 1.0;
    SpreadProfile {
        breaks,
        levels,
        source: source.to_string(),
    }
}

impl SpreadProfile {
    /// `ρ(r)` for `r > 0`.
    pub fn rho(&self, r: f64) -> f64 {
        self.levels[self.breaks.partition_point(|&d| d < r)]
    }

    /// Constancy intervals `(lo, hi, level)`.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.levels.iter().enumerate().map(move |(k, &level)| {
            let lo = if k == 0 { 0.0 } else { self.breaks[k - 1] };
            let hi = self.breaks.get(k).copied().unwrap_or(f64::INFINITY);
            (lo, hi, level)
        })
    }

    /// `δ(ε) = inf{r > 0 : r ρ(r) > ε}`.
    pub fn delta(&self, epsilon: f64) -> f64 {
        for (lo, hi, level) in self.intervals() {
            let r = epsilon / level;
            if r < hi {
                return lo.max(r);
            }
        }
        unreachable!("last interval is unbounded")
    }

    /// `δ_ST(ε) = inf{r > 0 : r ρ(√r) > ε}`.
    pub fn delta_st(&self, epsilon: f64) -> f64 {
        for (lo, hi, level) in self.intervals() {
            let r = epsilon / level;
            if r < hi * hi {
                return (lo * lo).max(r);
            }
        }
        unreachable!("last interval is unbounded")
    }

    /// CSV with columns `r,rho`: one row per jump radius, `rho = ρ(r)` (left limit).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "r,rho")?;
        for (k, d) in self.breaks.iter().enumerate() {
            writeln!(out, "{d},{}", self.levels[k])?;
        }
        Ok(())
    }
}

pub fn delta(profile: &SpreadProfile, epsilon: f64) -> f64 {
    profile.delta(epsilon)
}

pub fn delta_st(profile: &SpreadProfile, epsilon: f64) -> f64 {
    profile.delta_st(epsilon)
}

/// `sup_{a ∈ A} inf_{b ∈ B} ‖a − b‖`.
pub fn asym_hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set"));
    }
    Ok(a.iter()
        .map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max))
}

/// Largest pairwise atom distance.
pub fn diameter(mu: &DiscreteMeasure) -> Result<f64> {
    if mu.len() < 2 {
        return Err(Error::Precondition("diameter needs at least two atoms".into()));
    }
    let mut best: f64 = 0.0;
    for i in 0..mu.len() {
        for k in (i + 1)..mu.len() {
            best = best.max(dist(mu.atom(i), mu.atom(k)));
        }
    }
    Ok(best)
}

/// Bottleneck radius: the smallest `r` at which the `r`-neighbourhood graph is connected.
pub fn connecting_radius(mu: &DiscreteMeasure) -> f64 {
    let n = mu.len();
    if n < 2 {
        return 0.0;
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut bottleneck: f64 = 0.0;
    for _ in 0..n {
        let u = (0..n)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]))
            .expect("unvisited vertex");
        in_tree[u] = true;
        bottleneck = bottleneck.max(best[u]);
        for v in 0..n {
            if !in_tree[v] {
                best[v] = best[v].min(dist(mu.atom(u), mu.atom(v)));
            }
        }
    }
    bottleneck
}

/// Largest graph-geodesic distance between atoms on the graph joining atoms at
/// distance at most `connect_radius`.
pub fn path_length_bound(mu: &DiscreteMeasure, connect_radius: f64) -> Result<f64> {
    let n = mu.len();
    let reach = connect_radius * (1.0 + 1e-12);
    let adj: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&k| k != i)
                .filter_map(|k| {
                    let d = dist(mu.atom(i), mu.atom(k));
                    (d <= reach).then_some((k, d))
                })
                .collect()
        })
        .collect();
    let mut longest: f64 = 0.0;
    for src in 0..n {
        let mut distance = vec![f64::INFINITY; n];
        distance[src] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((OrdF64(0.0), src)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > distance[u] {
                continue;
            }
            for &(v, w) in &adj[u] {
                let nd = d + w;
                if nd < distance[v] {
                    distance[v] = nd;
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        if distance.iter().any(|d| d.is_infinite()) {
            return Err(Error::Disconnected {
                radius: connect_radius,
                smallest: connecting_radius(mu),
            });
        }
        longest = longest.max(distance.iter().copied().fold(0.0, f64::max));
    }
    Ok(longest)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Boundary of the convex hull of the atoms, used as a proxy for `∂ spt μ`.
#[derive(Debug, Clone, PartialEq)]
pub enum HullBoundary {
    Interval {
        lo: f64,
        hi: f64,
    },
    /// Counter-clockwise polygon vertices.
    Polygon(Vec<[f64; 2]>),
}

impl HullBoundary {
    pub fn new(mu: &DiscreteMeasure) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::DegenerateHull("need at least two atoms".into()));
        }
        match mu.dim() {
            1 => {
                let (lo, hi) = mu.atoms().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), a| {
                    (l.min(a[0]), h.max(a[0]))
                });
                Ok(HullBoundary::Interval { lo, hi })
            }
            2 => {
                let mut pts: Vec<[f64; 2]> = mu.atoms().map(|a| [a[0], a[1]]).collect();
                pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
                let hull = monotone_chain(&pts);
                if hull.len() < 3 {
                    return Err(Error::DegenerateHull("atoms are collinear".into()));
                }
                Ok(HullBoundary::Polygon(hull))
            }
            d => Err(Error::DegenerateHull(format!(
                "hull boundary distance is implemented for d = 1, 2 (got {d})"
            ))),
        }
    }

    /// Distance from `x` to the hull boundary.
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            HullBoundary::Interval { lo, hi } => (x[0] - lo).abs().min((hi - x[0]).abs()),
            HullBoundary::Polygon(v) => (0..v.len())
                .map(|k| segment_distance(x, v[k], v[(k + 1) % v.len()]))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

pub fn boundary_distance(x: &[f64], mu: &DiscreteMeasure) -> Result<f64> {
    Ok(HullBoundary::new(mu)?.distance(x))
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn monotone_chain(sorted: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in sorted {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in sorted.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn segment_distance(x: &[f64], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x[0] - a[0]) * dx + (x[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (a[0] + t * dx, a[1] + t * dy);
    ((x[0] - px).powi(2) + (x[1] - py).powi(2)).sqrt()
}
