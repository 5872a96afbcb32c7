//! Seeded sampling helpers: low-discrepancy ball points for shooting starts
//! and per-task random streams that do not depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in base `base`.
pub fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += (index % b) as f64 * f;
        index /= b;
        f *= inv;
    }
    r
}

/// Halton point number `index` in `[0, 1)^dim` (dim ≤ 16).
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(
        dim <= PRIMES.len(),
        "Halton dimension limited to {}",
        PRIMES.len()
    );
    (0..dim)
        .map(|d| radical_inverse(index, PRIMES[d]))
        .collect()
}

/// First `count` Halton points of the cube `[-1, 1]^dim` that fall inside
/// the closed unit ball, in sequence order.
pub fn halton_ball(count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut index = 1u64;
    while out.len() < count {
        let q: Vec<f64> = halton(index, dim)
            .into_iter()
            .map(|u| 2.0 * u - 1.0)
            .collect();
        index += 1;
        if q.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            out.push(q);
        }
    }
    out
}

/// Independent generator for task `index` of a run seeded with `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniformly distributed unit vector.
pub fn random_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Uniform point in the Euclidean ball of given center and radius.
pub fn uniform_in_ball<R: Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let dim = center.len();
    let dir = random_direction(rng, dim);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    center.iter().zip(dir).map(|(c, d)| c + r * d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn ball_points_inside() {
        let pts = halton_ball(50, 3);
        assert_eq!(pts.len(), 50);
        assert!(pts
            .iter()
            .all(|p| p.iter().map(|v| v * v).sum::<f64>() <= 1.0));
    }

    #[test]
    fn task_streams_are_reproducible_and_distinct() {
        let a: f64 = task_rng(7, 3).random();
        let b: f64 = task_rng(7, 3).random();
        let c: f64 = task_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
