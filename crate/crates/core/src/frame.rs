//! Horizontal frames `X^1..X^m` in a single chart of `ℝ^n`.
//!
//! Every numerical routine (geodesic flow, end-point map, distances) is
//! written against [`Frame`]. Polynomial frames coming from Carnot models
//! supply exact derivatives; user-supplied closures fall back to central
//! differences.

use crate::poly::{CompiledPoly, Polynomial};
use crate::scalar::{lit, Coeff, Real};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// A sub-Riemannian structure given by an orthonormal frame in one chart,
/// with a measure `e^V dx`.
pub trait Frame<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn rank(&self) -> usize;

    /// Short identifier used in reports and cache keys.
    fn id(&self) -> String;

    /// Writes `X^i(x)` into column `i` of the `n×m` matrix `out`.
    fn eval_into(&self, x: &[T], out: &mut DMatrix<T>);

    /// Writes `∂X^i_k/∂x_l` into `jac[i][(k, l)]`.
    fn jacobians_into(&self, x: &[T], jac: &mut [DMatrix<T>]);

    /// Writes `Σ_k p_k ∇²X^i_k(x)` into `out[i]`.
    fn hessian_contract_into(&self, x: &[T], p: &[T], out: &mut [DMatrix<T>]);

    /// Gradient of the log-density `V`, if the measure is not plain Lebesgue.
    fn log_density_gradient(&self, _x: &[T]) -> Option<DVector<T>> {
        None
    }

    /// `div^μ X^i` for the chart measure `e^V dx`.
    fn field_divergence(&self, i: usize, x: &[T]) -> T {
        let n = self.dim();
        let mut jac = vec![DMatrix::zeros(n, n); self.rank()];
        self.jacobians_into(x, &mut jac);
        let mut div = jac[i].trace();
        if let Some(g) = self.log_density_gradient(x) {
            let mut vals = DMatrix::zeros(n, self.rank());
            self.eval_into(x, &mut vals);
            div += vals.column(i).dot(&g);
        }
        div
    }

    fn frame(&self, x: &DVector<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.dim(), self.rank());
        self.eval_into(x.as_slice(), &mut out);
        out
    }

    /// The underlying Carnot model, when the frame is one; enables
    /// dilation-aware seeding and stencils.
    fn carnot(&self) -> Option<&crate::model::CarnotModel<T>> {
        None
    }

    fn jacobians(&self, x: &DVector<T>) -> Vec<DMatrix<T>> {
        let n = self.dim();
        let mut jac = vec![DMatrix::zeros(n, n); self.rank()];
        self.jacobians_into(x.as_slice(), &mut jac);
        jac
    }
}

impl<T: Real, F: Frame<T> + ?Sized> Frame<T> for Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn rank(&self) -> usize {
        (**self).rank()
    }
    fn id(&self) -> String {
        (**self).id()
    }
    fn eval_into(&self, x: &[T], out: &mut DMatrix<T>) {
        (**self).eval_into(x, out)
    }
    fn jacobians_into(&self, x: &[T], jac: &mut [DMatrix<T>]) {
        (**self).jacobians_into(x, jac)
    }
    fn hessian_contract_into(&self, x: &[T], p: &[T], out: &mut [DMatrix<T>]) {
        (**self).hessian_contract_into(x, p, out)
    }
    fn log_density_gradient(&self, x: &[T]) -> Option<DVector<T>> {
        (**self).log_density_gradient(x)
    }
    fn field_divergence(&self, i: usize, x: &[T]) -> T {
        (**self).field_divergence(i, x)
    }
    fn carnot(&self) -> Option<&crate::model::CarnotModel<T>> {
        (**self).carnot()
    }
}

/// Frame whose components are polynomials; all derivatives are exact.
#[derive(Clone, Debug)]
pub struct PolyFrame<T> {
    n: usize,
    m: usize,
    values: Vec<(usize, usize, CompiledPoly<T>)>,
    first: Vec<(usize, usize, usize, CompiledPoly<T>)>,
    second: Vec<(usize, usize, usize, usize, CompiledPoly<T>)>,
    log_density: Option<Vec<CompiledPoly<T>>>,
}

impl<T: Real> PolyFrame<T> {
    /// `fields[i][k]` is the `k`-th component of `X^i`; `log_density` is `V`.
    pub fn new<C: Coeff>(
        fields: &[Vec<Polynomial<C>>],
        log_density: Option<&Polynomial<C>>,
    ) -> Self {
        let m = fields.len();
        let n = fields.first().map_or(0, |f| f.len());
        let mut values = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (i, field) in fields.iter().enumerate() {
            for (k, comp) in field.iter().enumerate() {
                if comp.is_zero() {
                    continue;
                }
                values.push((i, k, comp.compile()));
                for l in 0..n {
                    let d = comp.derivative(l);
                    if d.is_zero() {
                        continue;
                    }
                    first.push((i, k, l, d.compile()));
                    for r in l..n {
                        let dd = d.derivative(r);
                        if !dd.is_zero() {
                            second.push((i, k, l, r, dd.compile()));
                        }
                    }
                }
            }
        }
        let log_density = log_density.map(|v| (0..n).map(|l| v.derivative(l).compile()).collect());
        Self {
            n,
            m,
            values,
            first,
            second,
            log_density,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.m
    }

    pub fn eval_into(&self, x: &[T], out: &mut DMatrix<T>) {
        out.fill(T::zero());
        for (i, k, p) in &self.values {
            out[(*k, *i)] = p.eval(x);
        }
    }

    pub fn jacobians_into(&self, x: &[T], jac: &mut [DMatrix<T>]) {
        for j in jac.iter_mut() {
            j.fill(T::zero());
        }
        for (i, k, l, p) in &self.first {
            jac[*i][(*k, *l)] = p.eval(x);
        }
    }

    pub fn hessian_contract_into(&self, x: &[T], p: &[T], out: &mut [DMatrix<T>]) {
        for o in out.iter_mut() {
            o.fill(T::zero());
        }
        for (i, k, l, r, poly) in &self.second {
            if p[*k] == T::zero() {
                continue;
            }
            let v = p[*k] * poly.eval(x);
            out[*i][(*l, *r)] += v;
            if l != r {
                out[*i][(*r, *l)] += v;
            }
        }
    }

    pub fn log_density_gradient(&self, x: &[T]) -> Option<DVector<T>> {
        self.log_density
            .as_ref()
            .map(|g| DVector::from_iterator(self.n, g.iter().map(|p| p.eval(x))))
    }
}

type FieldFn<T> = dyn Fn(&[T], &mut DMatrix<T>) + Send + Sync;

/// User-supplied frame given by a closure evaluated numerically in one chart.
/// Derivatives use central differences with step `1e-6·(1+|x|)`.
pub struct ChartFrame<T> {
    id: String,
    n: usize,
    m: usize,
    field: Box<FieldFn<T>>,
}

impl<T: Real> ChartFrame<T> {
    pub fn new(
        id: impl Into<String>,
        n: usize,
        m: usize,
        field: impl Fn(&[T], &mut DMatrix<T>) + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            n,
            m,
            field: Box::new(field),
        }
    }

    fn step(x: &[T], scale: f64) -> T {
        let norm = x.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
        lit::<T>(scale) * (T::one() + norm)
    }

    fn jac_fd(&self, x: &[T], jac: &mut [DMatrix<T>], scale: f64) {
        let h = Self::step(x, scale);
        let mut xp = x.to_vec();
        let mut plus = DMatrix::zeros(self.n, self.m);
        let mut minus = DMatrix::zeros(self.n, self.m);
        for l in 0..self.n {
            xp[l] = x[l] + h;
            (self.field)(&xp, &mut plus);
            xp[l] = x[l] - h;
            (self.field)(&xp, &mut minus);
            xp[l] = x[l];
            for i in 0..self.m {
                for k in 0..self.n {
                    jac[i][(k, l)] = (plus[(k, i)] - minus[(k, i)]) / (h + h);
                }
            }
        }
    }
}

impl<T: Real> Frame<T> for ChartFrame<T> {
    fn dim(&self) -> usize {
        self.n
    }
    fn rank(&self) -> usize {
        self.m
    }
    fn id(&self) -> String {
        self.id.clone()
    }
    fn eval_into(&self, x: &[T], out: &mut DMatrix<T>) {
        (self.field)(x, out)
    }
    fn jacobians_into(&self, x: &[T], jac: &mut [DMatrix<T>]) {
        self.jac_fd(x, jac, 1e-6)
    }
    fn hessian_contract_into(&self, x: &[T], p: &[T], out: &mut [DMatrix<T>]) {
        // column l of out[i] is ∂_l (J_i^T p)
        let h = Self::step(x, 1e-4);
        let mut xp = x.to_vec();
        let mut plus = vec![DMatrix::zeros(self.n, self.n); self.m];
        let mut minus = vec![DMatrix::zeros(self.n, self.n); self.m];
        let pv = DVector::from_column_slice(p);
        for l in 0..self.n {
            xp[l] = x[l] + h;
            self.jac_fd(&xp, &mut plus, 1e-6);
            xp[l] = x[l] - h;
            self.jac_fd(&xp, &mut minus, 1e-6);
            xp[l] = x[l];
            for i in 0..self.m {
                let col = (plus[i].tr_mul(&pv) - minus[i].tr_mul(&pv)) / (h + h);
                out[i].set_column(l, &col);
            }
        }
    }
}
