//! Discrete probability measures supported in the closed unit ball, lattice
//! generators and Monge-map specifications.

use std::collections::HashMap;
use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist, norm};

/// Slack allowed on the unit-ball constraint.
pub const BALL_SLACK: f64 = 1e-12;
/// Weight sums within this distance of one are renormalised; anything further is rejected.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;
/// Default cap on the number of lattice points produced by [`uniform_ball_grid`].
pub const DEFAULT_ATOM_CAP: usize = 200_000;

/// Finitely many weighted atoms in `R^d`, all inside the closed unit ball.
///
/// Coordinates are stored row-major (`atom i` occupies `coords[i*dim..(i+1)*dim]`).
/// Values are immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Validates and builds a measure from a list of points and weights.
    pub fn new(atoms: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        let first = atoms.first().ok_or(Error::Empty("atom list"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("atoms must have at least one coordinate".into()));
        }
        let mut coords = Vec::with_capacity(atoms.len() * dim);
        for (i, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has {} coordinates, expected {dim}",
                    a.len()
                )));
            }
            coords.extend_from_slice(a);
        }
        Self::from_flat(dim, coords, weights.to_vec())
    }

    /// Builds a measure from row-major coordinates.
    pub fn from_flat(dim: usize, coords: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::Empty("weight list"));
        }
        if coords.len() != weights.len() * dim {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates do not describe {} atoms in dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidMeasure(format!("non-finite coordinate {c}")));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidMeasure(format!("weight {i} is not positive: {w}")));
            }
        }
        for (i, a) in coords.chunks_exact(dim).enumerate() {
            let n = norm(a);
            if n > 1.0 + BALL_SLACK {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} {a:?} lies outside the closed unit ball (norm {n})"
                )));
            }
        }
        let mut seen = HashSet::with_capacity(weights.len());
        for (i, a) in coords.chunks_exact(dim).enumerate() {
            if !seen.insert(coordinate_bits(a)) {
                return Err(Error::InvalidMeasure(format!("duplicate atom {a:?} at index {i}")));
            }
        }
        let total: f64 = weights.iter().sum();
        let dev = (total - 1.0).abs();
        if dev > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        if dev > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { dim, coords, weights })
    }

    /// The Dirac mass at `point`.
    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(&[point.to_vec()], &[1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Atoms as owned vectors, in storage order.
    pub fn atom_vecs(&self) -> Vec<Vec<f64>> {
        self.atoms().map(<[f64]>::to_vec).collect()
    }

    /// Integral of a per-atom quantity.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Same atoms in the same order with bitwise-equal weights.
    pub fn same_as(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.weights.len() == other.weights.len()
            && self
                .coords
                .iter()
                .zip(&other.coords)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Smallest distance between two distinct atoms (infinite for a single atom).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for k in (i + 1)..self.len() {
                best = best.min(dist(self.atom(i), self.atom(k)));
            }
        }
        best
    }
}

fn coordinate_bits(a: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 describe the same point
    a.iter().map(|&c| if c == 0.0 { 0 } else { c.to_bits() }).collect()
}

/// JSON layout `{"dim": d, "atoms": [[...], ...], "weights": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureFile {
    pub dim: usize,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl From<&DiscreteMeasure> for MeasureFile {
    fn from(m: &DiscreteMeasure) -> Self {
        Self {
            dim: m.dim,
            atoms: m.atom_vecs(),
            weights: m.weights.clone(),
        }
    }
}

impl TryFrom<MeasureFile> for DiscreteMeasure {
    type Error = Error;

    fn try_from(f: MeasureFile) -> Result<Self> {
        if let Some(a) = f.atoms.iter().find(|a| a.len() != f.dim) {
            return Err(Error::InvalidMeasure(format!(
                "atom {a:?} does not have dimension {}",
                f.dim
            )));
        }
        DiscreteMeasure::new(&f.atoms, &f.weights)
    }
}

impl DiscreteMeasure {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MeasureFile::from(self)).expect("measure serialises")
    }
}

/// Equal-weight lattice `hZ^d ∩ B(0,1)`, centred at the origin.
pub fn uniform_ball_grid(d: usize, h: f64) -> Result<DiscreteMeasure> {
    uniform_ball_grid_with_cap(d, h, DEFAULT_ATOM_CAP)
}

pub fn uniform_ball_grid_with_cap(d: usize, h: f64, cap: usize) -> Result<DiscreteMeasure> {
    scaled_ball_grid(d, h, 1.0, cap)
}

/// Equal-weight lattice `hZ^d ∩ B(0, radius)`.
pub fn scaled_ball_grid(d: usize, h: f64, radius: f64, cap: usize) -> Result<DiscreteMeasure> {
    if !(1..=3).contains(&d) {
        return Err(Error::InvalidConfig(format!(
            "grid dimension must be 1, 2 or 3, got {d}"
        )));
    }
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "grid spacing must lie in (0, 1], got {h}"
        )));
    }
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "grid radius must lie in (0, 1], got {radius}"
        )));
    }
    let k_max = (radius / h + 1e-9).floor() as i64;
    let r2 = radius * radius + BALL_SLACK;
    let mut coords = Vec::new();
    let mut count = 0usize;
    let mut idx = vec![-k_max; d];
    'outer: loop {
        let p: Vec<f64> = idx.iter().map(|&k| k as f64 * h).collect();
        if p.iter().map(|c| c * c).sum::<f64>() <= r2 {
            count += 1;
            if count > cap {
                return Err(Error::AtomCap { dim: d, h, cap });
            }
            coords.extend_from_slice(&p);
        }
        // odometer increment, last axis fastest
        for axis in (0..d).rev() {
            if idx[axis] < k_max {
                idx[axis] += 1;
                continue 'outer;
            }
            idx[axis] = -k_max;
        }
        break;
    }
    let w = 1.0 / count as f64;
    DiscreteMeasure::from_flat(d, coords, vec![w; count])
}

/// How a Monge map acts on atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MongeMapKind {
    Identity,
    /// `x ↦ A x + b` with `A` symmetric positive semidefinite (row-major).
    Affine {
        matrix: Vec<f64>,
        shift: Vec<f64>,
    },
    /// Per-atom images of a fixed source measure, with optional potential values `φ(x_i)`.
    Tabulated {
        images: Vec<Vec<f64>>,
        potential: Option<Vec<f64>>,
    },
}

/// A gradient map `∇φ` of a convex potential together with its Lipschitz constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MongeMapSpec {
    pub dim: usize,
    pub kind: MongeMapKind,
    pub lipschitz: f64,
}

impl MongeMapSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            kind: MongeMapKind::Identity,
            lipschitz: 1.0,
        }
    }

    /// `x ↦ A x + b`; `A` must be symmetric positive semidefinite.
    pub fn affine(dim: usize, matrix: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim || shift.len() != dim {
            return Err(Error::InvalidMap(format!(
                "affine map needs a {dim}x{dim} matrix and a length-{dim} shift"
            )));
        }
        let a = DMatrix::from_row_slice(dim, dim, &matrix);
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidMap("affine matrix is not symmetric".into()));
        }
        let eig = a.symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min < -1e-12 * scale {
            return Err(Error::InvalidMap(format!(
                "affine matrix is not positive semidefinite (eigenvalue {min})"
            )));
        }
        Ok(Self {
            dim,
            kind: MongeMapKind::Affine { matrix, shift },
            lipschitz: eig.eigenvalues.max().max(0.0),
        })
    }

    /// `x ↦ a x` in dimension `dim`.
    pub fn scaling(dim: usize, a: f64) -> Result<Self> {
        let mut m = vec![0.0; dim * dim];
        (0..dim).for_each(|i| m[i * dim + i] = a);
        Self::affine(dim, m, vec![0.0; dim])
    }

    /// Per-atom images for `source`; the Lipschitz constant is the largest
    /// difference quotient over atom pairs.
    pub fn tabulated(source: &DiscreteMeasure, images: Vec<Vec<f64>>, potential: Option<Vec<f64>>) -> Result<Self> {
        if images.len() != source.len() {
            return Err(Error::InvalidMap(format!(
                "{} images for {} atoms",
                images.len(),
                source.len()
            )));
        }
        if images.iter().any(|y| y.len() != source.dim()) {
            return Err(Error::InvalidMap("image dimension mismatch".into()));
        }
        if potential.as_ref().is_some_and(|p| p.len() != source.len()) {
            return Err(Error::InvalidMap(
                "potential table length differs from atom count".into(),
            ));
        }
        let mut lip: f64 = 0.0;
        for i in 0..images.len() {
            for k in (i + 1)..images.len() {
                let dx = dist(source.atom(i), source.atom(k));
                lip = lip.max(dist(&images[i], &images[k]) / dx);
            }
        }
        Ok(Self {
            dim: source.dim(),
            kind: MongeMapKind::Tabulated { images, potential },
            lipschitz: lip,
        })
    }

    /// Image of atom `index` located at `x`.
    pub fn image(&self, index: usize, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            MongeMapKind::Identity => x.to_vec(),
            MongeMapKind::Affine { matrix, shift } => (0..self.dim)
                .map(|r| shift[r] + (0..self.dim).map(|c| matrix[r * self.dim + c] * x[c]).sum::<f64>())
                .collect(),
            MongeMapKind::Tabulated { images, .. } => images[index].clone(),
        }
    }

    /// `φ(x)` for atom `index` at `x`, when known.
    pub fn potential_at(&self, index: usize, x: &[f64]) -> Option<f64> {
        match &self.kind {
            MongeMapKind::Identity => Some(0.5 * x.iter().map(|c| c * c).sum::<f64>()),
            MongeMapKind::Affine { shift, .. } => {
                let ax = self.image(index, x);
                let quad: f64 = x
                    .iter()
                    .zip(&ax)
                    .zip(shift)
                    .map(|((xi, axi), bi)| xi * (axi - bi))
                    .sum();
                let lin: f64 = x.iter().zip(shift).map(|(a, b)| a * b).sum();
                Some(0.5 * quad + lin)
            }
            MongeMapKind::Tabulated { potential, .. } => potential.as_ref().map(|p| p[index]),
        }
    }
}

/// `(T)_# μ`; coincident images (after rounding to 12 decimals) are merged
/// with summed weights, keeping the first image's coordinates.
pub fn pushforward(mu: &DiscreteMeasure, map: &MongeMapSpec) -> Result<DiscreteMeasure> {
    if map.dim != mu.dim() {
        return Err(Error::DimensionMismatch {
            left: mu.dim(),
            right: map.dim,
        });
    }
    let mut slot: HashMap<Vec<i64>, usize> = HashMap::with_capacity(mu.len());
    let mut coords = Vec::with_capacity(mu.coords().len());
    let mut weights: Vec<f64> = Vec::with_capacity(mu.len());
    for (i, x) in mu.atoms().enumerate() {
        let y = map.image(i, x);
        let n = norm(&y);
        if n > 1.0 + BALL_SLACK {
            return Err(Error::ImageOutsideBall {
                index: i,
                image: y,
                norm: n,
            });
        }
        let key: Vec<i64> = y.iter().map(|c| (c * 1e12).round() as i64).collect();
        match slot.get(&key) {
            Some(&s) => weights[s] += mu.weight(i),
            None => {
                slot.insert(key, weights.len());
                coords.extend_from_slice(&y);
                weights.push(mu.weight(i));
            }
        }
    }
    // weights already sum to one; bypass renormalisation
    Ok(DiscreteMeasure {
        dim: mu.dim(),
        coords,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_and_pair() {
        let m = DiscreteMeasure::new(&[vec![0.0]], &[1.0]).unwrap();
        assert_eq!(m.len(), 1);
        let p = DiscreteMeasure::new(&[vec![-1.0], vec![1.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(p.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            DiscreteMeasure::new(&[vec![0.0], vec![0.0]], &[0.5, 0.5]),
            Err(Error::InvalidMeasure(m)) if m.contains("duplicate")
        ));
        assert!(DiscreteMeasure::new(&[vec![0.0], vec![-0.0]], &[0.5, 0.5]).is_err());
        assert!(DiscreteMeasure::new(&[vec![0.0], vec![0.5]], &[1.0, 0.0]).is_err());
        assert!(DiscreteMeasure::new(&[vec![1.5]], &[1.0]).is_err());
        assert!(DiscreteMeasure::new(&[vec![0.0], vec![0.5]], &[0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(&[], &[]).is_err());
        // within slack
        assert!(DiscreteMeasure::new(&[vec![1.0 + 1e-13]], &[1.0]).is_ok());
    }

    #[test]
    fn renormalises_small_deviation() {
        let m = DiscreteMeasure::new(&[vec![0.0], vec![0.5]], &[0.5, 0.5 + 5e-10]).unwrap();
        let s: f64 = m.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grids() {
        let g = uniform_ball_grid(1, 1.0).unwrap();
        assert_eq!(g.atom_vecs(), vec![vec![-1.0], vec![0.0], vec![1.0]]);
        assert!(g.weights().iter().all(|&w| w == 1.0 / 3.0));

        let g = uniform_ball_grid(1, 0.5).unwrap();
        assert_eq!(
            g.atom_vecs(),
            vec![vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]]
        );

        let g = uniform_ball_grid(2, 1.0).unwrap();
        let mut atoms = g.atom_vecs();
        atoms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(
            atoms,
            vec![
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0]
            ]
        );
        assert!(g.weights().iter().all(|&w| w == 0.2));

        assert_eq!(uniform_ball_grid(1, 0.02).unwrap().len(), 101);
        assert_eq!(uniform_ball_grid(1, 0.005).unwrap().len(), 401);
        assert_eq!(uniform_ball_grid(2, 0.2).unwrap().len(), 81);
        assert_eq!(uniform_ball_grid(2, 0.05).unwrap().len(), 1257);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(uniform_ball_grid(4, 0.5), Err(Error::InvalidConfig(_))));
        assert!(uniform_ball_grid(1, 0.0).is_err());
        assert!(uniform_ball_grid(1, 1.5).is_err());
        let err = uniform_ball_grid_with_cap(2, 0.01, 1000).unwrap_err();
        assert!(err.to_string().contains("1000"));
    }

    #[test]
    fn grid_min_distance_is_spacing() {
        for (d, h) in [(1, 0.1), (2, 0.2), (3, 0.5), (2, 0.25)] {
            let g = uniform_ball_grid(d, h).unwrap();
            assert!((g.min_pairwise_distance() - h).abs() <= 1e-12, "d={d} h={h}");
        }
    }

    #[test]
    fn pushforward_cases() {
        let mu = uniform_ball_grid(2, 0.5).unwrap();
        let nu = pushforward(&mu, &MongeMapSpec::identity(2)).unwrap();
        assert!(nu.same_as(&mu));

        let pair = DiscreteMeasure::new(&[vec![-1.0], vec![1.0]], &[0.5, 0.5]).unwrap();
        let half = pushforward(&pair, &MongeMapSpec::scaling(1, 0.5).unwrap()).unwrap();
        assert_eq!(half.atom_vecs(), vec![vec![-0.5], vec![0.5]]);
        assert_eq!(half.weights(), &[0.5, 0.5]);

        let collapse = MongeMapSpec::scaling(1, 0.0).unwrap();
        let point = pushforward(&pair, &collapse).unwrap();
        assert_eq!(point.len(), 1);
        assert_eq!(point.weights(), &[1.0]);

        let grow = MongeMapSpec::scaling(1, 2.0).unwrap();
        assert!(matches!(pushforward(&pair, &grow), Err(Error::ImageOutsideBall { .. })));
    }

    #[test]
    fn affine_validation() {
        assert!(MongeMapSpec::affine(2, vec![1.0, 0.5, 0.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(MongeMapSpec::affine(1, vec![-1.0], vec![0.0]).is_err());
        let m = MongeMapSpec::affine(2, vec![2.0, 1.0, 1.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert!((m.lipschitz - 3.0).abs() < 1e-12);
        assert_eq!(m.potential_at(0, &[1.0, 0.0]), Some(1.0));
        assert_eq!(MongeMapSpec::identity(3).lipschitz, 1.0);
    }

    #[test]
    fn json_accepts_integer_literals() {
        let m = DiscreteMeasure::from_json(r#"{"dim":1,"atoms":[[-1],[1]],"weights":[0.5,0.5]}"#).unwrap();
        assert_eq!(m.atom(0), &[-1.0]);
        let back = DiscreteMeasure::from_json(&m.to_json()).unwrap();
        assert!(back.same_as(&m));
        assert!(DiscreteMeasure::from_json(r#"{"dim":2,"atoms":[[0]],"weights":[1]}"#).is_err());
    }
}
