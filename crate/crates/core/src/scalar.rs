//! Scalar abstractions.
//!
//! Two families are used across the crate:
//!
//! * [`Coeff`] for the exact algebraic layer (structure constants, BCH
//!   products, polynomial frames). Implemented for `f32`, `f64` and
//!   [`Rational`](crate::Rational), so frames can be derived without roundoff.
//! * [`Real`] for everything numerical (integrators, shooting, divergences).
//!   Implemented for `f32` and `f64`.

use nalgebra as na;
use num_rational::Rational64;
use num_traits as nt;
use std::fmt::Debug;

/// Floating point scalar usable by the numerical layer.
pub trait Real:
    Copy
    + nt::FloatConst
    + nt::FromPrimitive
    + nt::ToPrimitive
    + na::RealField
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon of the type.
    fn eps() -> Self;
}

impl Real for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable")
}

/// Converts a scalar back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    nt::ToPrimitive::to_f64(&x).unwrap_or(f64::NAN)
}

/// Coefficient ring for the exact layer. Must be a field for rank computations.
pub trait Coeff:
    Clone + Debug + PartialEq + nt::Num + std::ops::Neg<Output = Self> + Send + Sync + 'static
{
    /// Whether the value should be treated as zero (exact for rationals).
    fn is_negligible(&self) -> bool;
    /// Magnitude used for pivot selection.
    fn magnitude(&self) -> f64;
    /// Lossy conversion into the numerical layer.
    fn to_real<T: Real>(&self) -> T;
    fn from_ratio(num: i64, den: i64) -> Self;
}

impl Coeff for f64 {
    fn is_negligible(&self) -> bool {
        self.abs() < 1e-12
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
    fn to_real<T: Real>(&self) -> T {
        lit(*self)
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
}

impl Coeff for f32 {
    fn is_negligible(&self) -> bool {
        self.abs() < 1e-6
    }
    fn magnitude(&self) -> f64 {
        self.abs() as f64
    }
    fn to_real<T: Real>(&self) -> T {
        lit(*self as f64)
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        num as f32 / den as f32
    }
}

impl Coeff for Rational64 {
    fn is_negligible(&self) -> bool {
        nt::Zero::is_zero(self)
    }
    fn magnitude(&self) -> f64 {
        (*self.numer() as f64 / *self.denom() as f64).abs()
    }
    fn to_real<T: Real>(&self) -> T {
        lit(*self.numer() as f64 / *self.denom() as f64)
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        Rational64::new(num, den)
    }
}

/// Rank of a dense matrix (rows of coefficient vectors) by Gaussian elimination.
pub fn rank<C: Coeff>(rows: &[Vec<C>]) -> usize {
    let mut a: Vec<Vec<C>> = rows.to_vec();
    let ncols = a.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for col in 0..ncols {
        let pivot = (rank..a.len())
            .filter(|&r| !a[r][col].is_negligible())
            .max_by(|&i, &j| a[i][col].magnitude().total_cmp(&a[j][col].magnitude()));
        let Some(pr) = pivot else { continue };
        a.swap(rank, pr);
        let piv = a[rank][col].clone();
        for r in 0..a.len() {
            if r == rank || a[r][col].is_negligible() {
                continue;
            }
            let factor = a[r][col].clone() / piv.clone();
            for c in col..ncols {
                let v = a[rank][c].clone() * factor.clone();
                a[r][c] = a[r][c].clone() - v;
            }
        }
        rank += 1;
        if rank == a.len() {
            break;
        }
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_exact_rational() {
        let r = |n| Rational64::from_integer(n);
        let rows = vec![
            vec![r(1), r(2), r(3)],
            vec![r(2), r(4), r(6)],
            vec![r(0), r(1), r(1)],
        ];
        assert_eq!(rank(&rows), 2);
    }

    #[test]
    fn rank_float_tolerant() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1e-15]];
        assert_eq!(rank(&rows), 1);
        assert_eq!(rank::<f64>(&[]), 0);
    }
}
