#![allow(dead_code)]

pub mod qp_oracle;

use qotlab::DiscreteMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform point in the ball of radius `r`, by rejection.
pub fn point_in_ball<R: Rng>(rng: &mut R, dim: usize, r: f64) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-r..=r)).collect();
        if p.iter().map(|v| v * v).sum::<f64>() <= r * r {
            return p;
        }
    }
}

/// Random measure with `n` atoms and weights bounded away from zero.
pub fn random_measure<R: Rng>(rng: &mut R, n: usize, dim: usize) -> DiscreteMeasure {
    let atoms: Vec<Vec<f64>> = (0..n).map(|_| point_in_ball(rng, dim, 1.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    DiscreteMeasure::new(&atoms, &weights).expect("valid random measure")
}

pub fn frobenius(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
