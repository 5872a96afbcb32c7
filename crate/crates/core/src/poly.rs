//! Sparse multivariate polynomials over a [`Coeff`] ring.

use crate::scalar::{Coeff, Real};
use std::collections::BTreeMap;
use std::fmt;

/// Multi-index of exponents, one entry per variable.
pub type Exponents = Vec<u32>;

#[derive(Clone, PartialEq)]
pub struct Polynomial<C> {
    nvars: usize,
    terms: BTreeMap<Exponents, C>,
}

impl<C: Coeff> Polynomial<C> {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: C) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The coordinate function `x_var`.
    pub fn var(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(e, C::one());
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Exponents, C)>) -> Self {
        let mut p = Self::zero(nvars);
        for (e, c) in terms {
            assert_eq!(e.len(), nvars, "exponent length mismatch");
            p.add_term(e, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, &C)> {
        self.terms.iter()
    }

    fn add_term(&mut self, e: Exponents, c: C) {
        if c.is_negligible() {
            return;
        }
        match self.terms.get_mut(&e) {
            Some(v) => {
                *v = v.clone() + c;
                if v.is_negligible() {
                    self.terms.remove(&e);
                }
            }
            None => {
                self.terms.insert(e, c);
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), -c.clone());
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Exponents = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca.clone() * cb.clone());
            }
        }
        out
    }

    pub fn scale(&self, c: &C) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, v) in &self.terms {
            out.add_term(e.clone(), v.clone() * c.clone());
        }
        out
    }

    /// Partial derivative with respect to `var`.
    pub fn derivative(&self, var: usize) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[var] == 0 {
                continue;
            }
            let mut k = C::zero();
            for _ in 0..e[var] {
                k = k + C::one();
            }
            let mut e2 = e.clone();
            e2[var] -= 1;
            out.add_term(e2, c.clone() * k);
        }
        out
    }

    /// Keeps only monomials in which every variable of `vars` has exponent zero,
    /// i.e. substitutes zero for those variables.
    pub fn set_zero(&self, vars: impl Fn(usize) -> bool) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            if e.iter().enumerate().all(|(i, &k)| k == 0 || !vars(i)) {
                out.add_term(e.clone(), c.clone());
            }
        }
        out
    }

    /// Restricts to the first `nvars` variables (all dropped exponents must be zero).
    pub fn truncate_vars(&self, nvars: usize) -> Self {
        let mut out = Self::zero(nvars);
        for (e, c) in &self.terms {
            debug_assert!(e[nvars..].iter().all(|&k| k == 0));
            out.add_term(e[..nvars].to_vec(), c.clone());
        }
        out
    }

    /// Set of weighted degrees `Σ α_j w_j` appearing in the polynomial.
    pub fn weighted_degrees(&self, weights: &[u32]) -> Vec<u32> {
        let mut d: Vec<u32> = self
            .terms
            .keys()
            .map(|e| e.iter().zip(weights).map(|(a, w)| a * w).sum())
            .collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn eval<T: Real>(&self, x: &[T]) -> T {
        self.compile::<T>().eval(x)
    }

    pub fn compile<T: Real>(&self) -> CompiledPoly<T> {
        CompiledPoly {
            terms: self
                .terms
                .iter()
                .map(|(e, c)| {
                    let factors = e
                        .iter()
                        .enumerate()
                        .filter(|(_, &k)| k > 0)
                        .map(|(v, &k)| (v, k as i32))
                        .collect();
                    (c.to_real::<T>(), factors)
                })
                .collect(),
        }
    }
}

impl<C: Coeff> Polynomial<C> {
    fn write_terms(
        &self,
        f: &mut fmt::Formatter<'_>,
        coeff: impl Fn(&C, &mut fmt::Formatter<'_>) -> fmt::Result,
    ) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            coeff(c, f)?;
            for (v, &k) in e.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "·x{}", v + 1)?,
                    _ => write!(f, "·x{}^{k}", v + 1)?,
                }
            }
        }
        Ok(())
    }
}

impl<C: Coeff> fmt::Debug for Polynomial<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_terms(f, |c, f| write!(f, "{c:?}"))
    }
}

impl<C: Coeff + fmt::Display> fmt::Display for Polynomial<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_terms(f, |c, f| write!(f, "{c}"))
    }
}

/// Polynomial flattened for fast numerical evaluation.
#[derive(Clone, Debug)]
pub struct CompiledPoly<T> {
    terms: Vec<(T, Vec<(usize, i32)>)>,
}

impl<T: Real> CompiledPoly<T> {
    #[inline]
    pub fn eval(&self, x: &[T]) -> T {
        let mut acc = T::zero();
        for (c, factors) in &self.terms {
            let mut m = *c;
            for &(v, k) in factors {
                m *= if k == 1 { x[v] } else { x[v].powi(k) };
            }
            acc += m;
        }
        acc
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rational;

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn product_and_derivative() {
        let x = Polynomial::<Rational>::var(2, 0);
        let y = Polynomial::<Rational>::var(2, 1);
        // (x + y/2) * x = x^2 + xy/2
        let p = x.add(&y.scale(&q(1, 2))).mul(&x);
        let dx = p.derivative(0); // 2x + y/2
        assert_eq!(dx.eval(&[1.0_f64, 2.0]), 3.0);
        assert_eq!(p.eval(&[2.0_f64, 4.0]), 8.0);
        assert_eq!(p.weighted_degrees(&[1, 2]), vec![2, 3]);
    }

    #[test]
    fn cancellation_removes_terms() {
        let x = Polynomial::<Rational>::var(1, 0);
        assert!(x.sub(&x).is_zero());
        assert!(Polynomial::<Rational>::constant(1, q(3, 1))
            .derivative(0)
            .is_zero());
    }

    #[test]
    fn set_zero_substitutes() {
        let x = Polynomial::<Rational>::var(2, 0);
        let y = Polynomial::<Rational>::var(2, 1);
        let p = x.add(&x.mul(&y));
        assert_eq!(p.set_zero(|v| v == 1), x);
    }
}
