//! Carnot groups in exponential coordinates.
//!
//! The group law comes from the Baker–Campbell–Hausdorff series, truncated at
//! order four (exact for step `s ≤ 4`); the left-invariant frame is its
//! linearization in the second argument. Everything symbolic is computed in
//! rational arithmetic and compiled to `T` afterwards.

use crate::algebra::{GroupSpec, StratifiedAlgebra};
use crate::error::{Error, Result};
use crate::frame::{Frame, PolyFrame};
use crate::poly::{CompiledPoly, Polynomial};
use crate::scalar::{lit, Real};
use crate::Rational;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exponential coordinates of a group element; the identity is `0`.
pub type GroupPoint<T> = DVector<T>;

const MAX_SYMBOLIC_STEP: u32 = 4;

#[derive(Clone, Debug)]
pub struct CarnotModel<T> {
    algebra: StratifiedAlgebra<Rational>,
    /// `left_frame[j][k]`: component `k` of the left-invariant extension of `e_j`.
    left_frame: Vec<Vec<Polynomial<Rational>>>,
    log_density: Option<Polynomial<Rational>>,
    horizontal: PolyFrame<T>,
    full: Vec<(usize, usize, CompiledPoly<T>)>,
    product: Vec<CompiledPoly<T>>,
}

fn bch_symbolic(alg: &StratifiedAlgebra<Rational>) -> Vec<Polynomial<Rational>> {
    let n = alg.dim();
    let nv = 2 * n;
    let a: Vec<_> = (0..n).map(|i| Polynomial::var(nv, i)).collect();
    let b: Vec<_> = (0..n).map(|i| Polynomial::var(nv, n + i)).collect();
    let add = |u: &[Polynomial<Rational>], v: &[Polynomial<Rational>], c: Rational| -> Vec<_> {
        u.iter()
            .zip(v)
            .map(|(x, y)| x.add(&y.scale(&c)))
            .collect::<Vec<_>>()
    };
    let q = Rational::new;
    let ab = alg.bracket_poly(&a, &b);
    let a_ab = alg.bracket_poly(&a, &ab);
    let b_ab = alg.bracket_poly(&b, &ab);
    let b_a_ab = alg.bracket_poly(&b, &a_ab);
    // a + b + [a,b]/2 + [a,[a,b]]/12 - [b,[a,b]]/12 - [b,[a,[a,b]]]/24
    let mut z = add(&a, &b, q(1, 1));
    z = add(&z, &ab, q(1, 2));
    z = add(&z, &a_ab, q(1, 12));
    z = add(&z, &b_ab, q(-1, 12));
    add(&z, &b_a_ab, q(-1, 24))
}

impl<T: Real> CarnotModel<T> {
    /// Builds the model from a validated stratified algebra.
    pub fn build(algebra: StratifiedAlgebra<Rational>) -> Result<Self> {
        Self::build_with_density(algebra, None)
    }

    /// As [`build`](Self::build) with Haar measure weighted by `e^V`.
    pub fn build_with_density(
        algebra: StratifiedAlgebra<Rational>,
        log_density: Option<Polynomial<Rational>>,
    ) -> Result<Self> {
        algebra.validate()?;
        if algebra.step() > MAX_SYMBOLIC_STEP {
            return Err(Error::InvalidAlgebra(format!(
                "step {} exceeds {MAX_SYMBOLIC_STEP}; supply an explicit frame instead",
                algebra.step()
            )));
        }
        let n = algebra.dim();
        if let Some(v) = &log_density {
            if v.nvars() != n {
                return Err(Error::InvalidInput("log-density arity mismatch".into()));
            }
        }
        let product = bch_symbolic(&algebra);
        // X_j(x) = d/db_j P(x, b) at b = 0
        let left_frame: Vec<Vec<Polynomial<Rational>>> = (0..n)
            .map(|j| {
                product
                    .iter()
                    .map(|pk| pk.derivative(n + j).set_zero(|v| v >= n).truncate_vars(n))
                    .collect()
            })
            .collect();
        let weights = algebra.weights();
        for (j, field) in left_frame.iter().enumerate() {
            for (k, comp) in field.iter().enumerate() {
                let degs = comp.weighted_degrees(weights);
                let expected = weights[k] as i64 - weights[j] as i64;
                if degs.iter().any(|&d| d as i64 != expected) {
                    return Err(Error::InvalidAlgebra(format!(
                        "frame component {k} of X{} is not homogeneous",
                        j + 1
                    )));
                }
            }
        }
        let m = algebra.rank();
        let horizontal = PolyFrame::new(&left_frame[..m], log_density.as_ref());
        let full = left_frame
            .iter()
            .enumerate()
            .flat_map(|(j, f)| {
                f.iter()
                    .enumerate()
                    .filter(|(_, c)| !c.is_zero())
                    .map(move |(k, c)| (j, k, c.compile()))
            })
            .collect();
        let product = product.iter().map(|p| p.compile()).collect();
        let model = Self {
            algebra,
            left_frame,
            log_density,
            horizontal,
            full,
            product,
        };
        let residual = model.homogeneity_residual(16, 0x5eed);
        if residual > 1e4 * crate::scalar::to_f64(T::eps()) {
            return Err(Error::InvalidAlgebra(format!(
                "frame homogeneity residual {residual:e}"
            )));
        }
        Ok(model)
    }

    pub fn from_spec(spec: &GroupSpec) -> Result<Self> {
        Self::build(spec.to_algebra()?)
    }

    /// Canonical models: `heisenberg(n)`, `abelian(n)`, `engel`,
    /// `h_type(complex,n)` and `h_type(quaternionic,n)`. Short forms such as
    /// `heisenberg1` and `abelian3` are accepted.
    pub fn builtin(name: &str) -> Result<Self> {
        Self::build(builtin_algebra(name)?)
    }

    pub fn algebra(&self) -> &StratifiedAlgebra<Rational> {
        &self.algebra
    }

    pub fn name(&self) -> &str {
        self.algebra.name()
    }

    pub fn dim(&self) -> usize {
        self.algebra.dim()
    }

    pub fn rank(&self) -> usize {
        self.algebra.rank()
    }

    pub fn weights(&self) -> &[u32] {
        self.algebra.weights()
    }

    pub fn step(&self) -> u32 {
        self.algebra.step()
    }

    pub fn has_density(&self) -> bool {
        self.log_density.is_some()
    }

    /// Symbolic left-invariant frame, one entry per basis vector.
    pub fn left_frame_symbolic(&self) -> &[Vec<Polynomial<Rational>>] {
        &self.left_frame
    }

    /// `δ_λ(x) = (λ^{d_1} x_1, …, λ^{d_n} x_n)`.
    pub fn dilate(&self, lambda: T, x: &GroupPoint<T>) -> Result<GroupPoint<T>> {
        if !(lambda > T::zero()) {
            return Err(Error::NonpositiveLambda(crate::scalar::to_f64(lambda)));
        }
        Ok(self.dilate_unchecked(lambda, x))
    }

    pub(crate) fn dilate_unchecked(&self, lambda: T, x: &GroupPoint<T>) -> GroupPoint<T> {
        DVector::from_iterator(
            self.dim(),
            x.iter()
                .zip(self.weights())
                .map(|(v, &w)| *v * lambda.powi(w as i32)),
        )
    }

    /// Covector rescaling matching `δ_λ`: `p'_i = λ^{2-d_i} p_i`, so that
    /// `δ_λ(γ_{0,p}(t)) = γ_{0,p'}(t)` for all `t`.
    pub fn dilate_covector(&self, lambda: T, p: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            p.iter()
                .zip(self.weights())
                .map(|(v, &w)| *v * lambda.powi(2 - w as i32)),
        )
    }

    /// Homogeneous quasi-norm `max_k |x_k|^{1/d_k}`.
    pub fn homogeneous_norm(&self, x: &GroupPoint<T>) -> T {
        x.iter()
            .zip(self.weights())
            .map(|(v, &w)| v.abs().powf(T::one() / lit::<T>(w as f64)))
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// Horizontal frame at `x` (`n×m`, column `i` is `X^i(x)`).
    pub fn frame_at(&self, x: &GroupPoint<T>) -> DMatrix<T> {
        Frame::frame(self, x)
    }

    /// Differential of left translation at the identity, `d(L_x)_0`; column
    /// `j` is the left-invariant field generated by `e_j` evaluated at `x`.
    pub fn left_translation_differential(&self, x: &GroupPoint<T>) -> DMatrix<T> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (j, k, p) in &self.full {
            out[(*k, *j)] = p.eval(x.as_slice());
        }
        out
    }

    /// Group law `a·b`.
    pub fn product(&self, a: &GroupPoint<T>, b: &GroupPoint<T>) -> GroupPoint<T> {
        let mut ab: Vec<T> = a.iter().copied().collect();
        ab.extend(b.iter().copied());
        DVector::from_iterator(self.dim(), self.product.iter().map(|p| p.eval(&ab)))
    }

    pub fn inverse(&self, a: &GroupPoint<T>) -> GroupPoint<T> {
        -a
    }

    /// Max over random samples of `‖X^i(δ_λ x) − λ^{-1} δ_λ(X^i(x))‖`.
    pub fn homogeneity_residual(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        let mut worst = 0.0_f64;
        for _ in 0..samples {
            let x =
                DVector::from_iterator(n, (0..n).map(|_| lit::<T>(rng.random_range(-2.0..2.0))));
            let lambda = lit::<T>(rng.random_range(0.25..4.0));
            let fx = self.frame_at(&x);
            let fdx = self.frame_at(&self.dilate_unchecked(lambda, &x));
            for i in 0..self.rank() {
                let rhs = self.dilate_unchecked(lambda, &fx.column(i).into_owned()) / lambda;
                let scale = T::one() + rhs.norm();
                let r = (fdx.column(i) - rhs).norm() / scale;
                worst = worst.max(crate::scalar::to_f64(r));
            }
        }
        worst
    }
}

impl<T: Real> Frame<T> for CarnotModel<T> {
    fn dim(&self) -> usize {
        self.algebra.dim()
    }
    fn rank(&self) -> usize {
        self.algebra.rank()
    }
    fn id(&self) -> String {
        self.algebra.name().to_string()
    }
    fn eval_into(&self, x: &[T], out: &mut DMatrix<T>) {
        self.horizontal.eval_into(x, out)
    }
    fn jacobians_into(&self, x: &[T], jac: &mut [DMatrix<T>]) {
        self.horizontal.jacobians_into(x, jac)
    }
    fn hessian_contract_into(&self, x: &[T], p: &[T], out: &mut [DMatrix<T>]) {
        self.horizontal.hessian_contract_into(x, p, out)
    }
    fn log_density_gradient(&self, x: &[T]) -> Option<DVector<T>> {
        self.horizontal.log_density_gradient(x)
    }
    fn carnot(&self) -> Option<&CarnotModel<T>> {
        Some(self)
    }
}

fn parse_call(name: &str) -> (String, Vec<String>) {
    let name = name.trim().to_ascii_lowercase();
    if let Some(open) = name.find('(') {
        let head = name[..open].trim().to_string();
        let args = name[open + 1..].trim_end_matches(')');
        let args = args
            .split(',')
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty());
        return (head, args.collect());
    }
    if let Some((head, arg)) = name.split_once(':') {
        let split = arg.find(|c: char| c.is_ascii_digit()).unwrap_or(arg.len());
        let mut args = vec![arg[..split].to_string()];
        if split < arg.len() {
            args.push(arg[split..].to_string());
        }
        args.retain(|a| !a.is_empty());
        return (head.to_string(), args);
    }
    let split = name
        .find(|c: char| c.is_ascii_digit())
        .unwrap_or(name.len());
    let args = if split < name.len() {
        vec![name[split..].to_string()]
    } else {
        vec![]
    };
    (name[..split].to_string(), args)
}

/// Structure constants of the builtin models.
pub fn builtin_algebra(name: &str) -> Result<StratifiedAlgebra<Rational>> {
    let unknown = || Error::UnknownModel(name.to_string());
    let (head, args) = parse_call(name);
    let arg_n = |idx: usize| -> Result<usize> {
        args.get(idx)
            .map(|a| a.parse::<usize>().map_err(|_| unknown()))
            .unwrap_or(Ok(1))
            .and_then(|n| if n == 0 { Err(unknown()) } else { Ok(n) })
    };
    let one = Rational::from_integer(1);
    match head.as_str() {
        "heisenberg" | "h" => heisenberg(arg_n(0)?),
        "abelian" | "r" => {
            let n = arg_n(0)?;
            StratifiedAlgebra::new(format!("abelian{n}"), n, vec![1; n], Vec::new())
        }
        "engel" => StratifiedAlgebra::new(
            "engel",
            2,
            vec![1, 1, 2, 3],
            [(0, 1, 2, one), (0, 2, 3, one)],
        ),
        "h_type" | "htype" => match args.first().map(String::as_str) {
            Some("complex") => heisenberg(arg_n(1)?),
            Some("quaternionic") => quaternionic(arg_n(1)?),
            _ => Err(unknown()),
        },
        _ => Err(unknown()),
    }
}

fn heisenberg(n: usize) -> Result<StratifiedAlgebra<Rational>> {
    let mut weights = vec![1; 2 * n];
    weights.push(2);
    let one = Rational::from_integer(1);
    let brackets = (0..n).map(|k| (2 * k, 2 * k + 1, 2 * n, one));
    StratifiedAlgebra::new(format!("heisenberg{n}"), 2 * n, weights, brackets)
}

/// Quaternionic H-type group of dimension `4n + 3`: `[u, v]_ℓ = ⟨J_ℓ u, v⟩`
/// with `J_1, J_2, J_3` left multiplication by `i, j, k`.
fn quaternionic(n: usize) -> Result<StratifiedAlgebra<Rational>> {
    // (J_ℓ)_{b a}: image of basis a (1,i,j,k) under left multiplication
    const MULT: [[(usize, i64); 4]; 3] = [
        [(1, 1), (0, -1), (3, 1), (2, -1)],
        [(2, 1), (3, -1), (0, -1), (1, 1)],
        [(3, 1), (2, 1), (1, -1), (0, -1)],
    ];
    let m = 4 * n;
    let mut weights = vec![1; m];
    weights.extend([2, 2, 2]);
    let mut brackets = Vec::new();
    for block in 0..n {
        for (l, table) in MULT.iter().enumerate() {
            for (a, &(b, sign)) in table.iter().enumerate() {
                if a < b {
                    brackets.push((
                        4 * block + a,
                        4 * block + b,
                        m + l,
                        Rational::from_integer(sign),
                    ));
                }
            }
        }
    }
    StratifiedAlgebra::new(format!("h_type_quaternionic{n}"), m, weights, brackets)
}
