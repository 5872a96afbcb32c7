//! Normal extremals of `H(x, p) = ½ Σ_i ⟨p, X^i(x)⟩²`, the exponential map
//! and its differential with respect to the initial covector.

use crate::error::Result;
use crate::frame::Frame;
use crate::model::GroupPoint;
use crate::ode::{integrate, OdeOptions, OdeStats, Trajectory};
use crate::scalar::{lit, Real};
use nalgebra::{DMatrix, DVector};

/// Default relative/absolute tolerance of the geodesic integrator.
pub const DEFAULT_FLOW_TOL: f64 = 1e-11;

/// Cotangent vector `p` at `base`, in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Covector<T: Real> {
    pub base: GroupPoint<T>,
    pub p: DVector<T>,
}

impl<T: Real> Covector<T> {
    pub fn new(base: GroupPoint<T>, p: DVector<T>) -> Self {
        Self { base, p }
    }

    /// Dual norm for the Euclidean extension in exponential coordinates.
    pub fn dual_norm(&self) -> T {
        self.p.norm()
    }
}

pub fn hamiltonian<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x: &GroupPoint<T>,
    p: &DVector<T>,
) -> T {
    let fr = frame.frame(x);
    let h = fr.tr_mul(p);
    lit::<T>(0.5) * h.norm_squared()
}

/// Horizontal control `u_i = ⟨p, X^i(x)⟩` of the extremal through `(x, p)`.
pub fn controls<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x: &GroupPoint<T>,
    p: &DVector<T>,
) -> DVector<T> {
    frame.frame(x).tr_mul(p)
}

struct Workspace<T: Real> {
    n: usize,
    m: usize,
    vals: DMatrix<T>,
    jac: Vec<DMatrix<T>>,
    hess: Vec<DMatrix<T>>,
    h: Vec<T>,
    q: Vec<Vec<T>>,
    a: DMatrix<T>,
    mh: DMatrix<T>,
    dh: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            vals: DMatrix::zeros(n, m),
            jac: vec![DMatrix::zeros(n, n); m],
            hess: vec![DMatrix::zeros(n, n); m],
            h: vec![T::zero(); m],
            q: vec![vec![T::zero(); n]; m],
            a: DMatrix::zeros(n, n),
            mh: DMatrix::zeros(n, n),
            dh: vec![T::zero(); m],
        }
    }

    /// Hamilton's equations; with `variational`, also the linearization
    /// with respect to the initial covector (columns of `(δx, δp)` follow
    /// the base state, `2n` entries each).
    fn rhs<F: Frame<T> + ?Sized>(&mut self, frame: &F, y: &[T], dy: &mut [T], variational: bool) {
        let (n, m) = (self.n, self.m);
        let (x, p) = (&y[..n], &y[n..2 * n]);
        frame.eval_into(x, &mut self.vals);
        frame.jacobians_into(x, &mut self.jac);
        for i in 0..m {
            let mut hi = T::zero();
            for k in 0..n {
                hi += p[k] * self.vals[(k, i)];
            }
            self.h[i] = hi;
            let ji = &self.jac[i];
            for l in 0..n {
                let mut acc = T::zero();
                for k in 0..n {
                    acc += ji[(k, l)] * p[k];
                }
                self.q[i][l] = acc;
            }
        }
        for k in 0..n {
            let mut vx = T::zero();
            let mut vp = T::zero();
            for i in 0..m {
                vx += self.h[i] * self.vals[(k, i)];
                vp -= self.h[i] * self.q[i][k];
            }
            dy[k] = vx;
            dy[n + k] = vp;
        }
        if !variational {
            return;
        }
        frame.hessian_contract_into(x, p, &mut self.hess);
        // A = Σ h_i J_i and M = Σ h_i M_i carry every term with a factor h_i
        self.a.fill(T::zero());
        self.mh.fill(T::zero());
        for i in 0..m {
            let hi = self.h[i];
            if hi == T::zero() {
                continue;
            }
            for (a, j) in self.a.iter_mut().zip(self.jac[i].iter()) {
                *a += hi * *j;
            }
            for (a, h) in self.mh.iter_mut().zip(self.hess[i].iter()) {
                *a += hi * *h;
            }
        }
        let cols = (y.len() - 2 * n) / (2 * n);
        for j in 0..cols {
            let off = 2 * n + j * 2 * n;
            let (dx, dp) = (&y[off..off + n], &y[off + n..off + 2 * n]);
            // δh_i = X^i·δp + q_i·δx
            for i in 0..m {
                let mut dh = T::zero();
                for k in 0..n {
                    dh += self.vals[(k, i)] * dp[k] + self.q[i][k] * dx[k];
                }
                self.dh[i] = dh;
            }
            let (ox, op) = dy[off..off + 2 * n].split_at_mut(n);
            for k in 0..n {
                let mut vx = T::zero();
                let mut vp = T::zero();
                for i in 0..m {
                    vx += self.vals[(k, i)] * self.dh[i];
                    vp += self.q[i][k] * self.dh[i];
                }
                for l in 0..n {
                    vx += self.a[(k, l)] * dx[l];
                    vp += self.a[(l, k)] * dp[l] + self.mh[(k, l)] * dx[l];
                }
                ox[k] = vx;
                op[k] = -vp;
            }
        }
    }
}

/// Sampled normal extremal `(x(t), p(t))` on `[0, T]`.
#[derive(Clone, Debug)]
pub struct ExtremalArc<T: Real> {
    pub n: usize,
    pub traj: Trajectory<T>,
    /// `2H(x_0, p_0)`, the squared speed.
    pub energy: T,
    pub endpoint: GroupPoint<T>,
    pub end_covector: DVector<T>,
    /// Max of `|H(x(t_k), p(t_k)) − H(x_0, p_0)|` over the recorded grid.
    pub max_drift: T,
}

impl<T: Real> ExtremalArc<T> {
    pub fn times(&self) -> &[T] {
        &self.traj.times
    }

    pub fn state(&self, k: usize) -> (GroupPoint<T>, DVector<T>) {
        let s = &self.traj.states[k];
        (
            DVector::from_column_slice(&s[..self.n]),
            DVector::from_column_slice(&s[self.n..2 * self.n]),
        )
    }

    /// Cubic interpolation of `(γ(t), p(t))`.
    pub fn at(&self, t: T) -> (GroupPoint<T>, DVector<T>) {
        let s = self.traj.interpolate(t);
        (
            DVector::from_column_slice(&s[..self.n]),
            DVector::from_column_slice(&s[self.n..2 * self.n]),
        )
    }

    /// `|γ̇(t_k)|` on the recorded grid.
    pub fn speeds(&self) -> Vec<T> {
        self.traj
            .slopes
            .iter()
            .map(|s| DVector::from_column_slice(&s[..self.n]).norm())
            .collect()
    }

    pub fn stats(&self) -> &OdeStats {
        &self.traj.stats
    }
}

/// Integrates the normal extremal from `(x0, p0)` up to time `t_final`,
/// recording every step.
pub fn extremal_flow<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x0: &GroupPoint<T>,
    p0: &DVector<T>,
    t_final: T,
    tol: T,
) -> Result<ExtremalArc<T>> {
    flow(frame, x0, p0, t_final, tol, true)
}

fn flow<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x0: &GroupPoint<T>,
    p0: &DVector<T>,
    t_final: T,
    tol: T,
    record: bool,
) -> Result<ExtremalArc<T>> {
    let n = frame.dim();
    let mut ws = Workspace::new(n, frame.rank());
    let mut y0 = x0.as_slice().to_vec();
    y0.extend_from_slice(p0.as_slice());
    let mut opts = OdeOptions::with_tol(tol);
    opts.record = record;
    let traj = integrate(
        |_, y, dy| ws.rhs(frame, y, dy, false),
        T::zero(),
        &y0,
        t_final,
        &opts,
    )?;
    let h0 = hamiltonian(frame, x0, p0);
    let mut max_drift = T::zero();
    for s in &traj.states {
        let x = DVector::from_column_slice(&s[..n]);
        let p = DVector::from_column_slice(&s[n..2 * n]);
        max_drift = max_drift.max((hamiltonian(frame, &x, &p) - h0).abs());
    }
    let last = traj.final_state();
    let endpoint = DVector::from_column_slice(&last[..n]);
    let end_covector = DVector::from_column_slice(&last[n..2 * n]);
    Ok(ExtremalArc {
        n,
        energy: h0 + h0,
        endpoint,
        end_covector,
        max_drift,
        traj,
    })
}

/// `exp_x(p) = γ_{x,p}(1)`.
pub fn exp_map<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x: &GroupPoint<T>,
    p: &DVector<T>,
) -> Result<GroupPoint<T>> {
    Ok(flow(frame, x, p, T::one(), lit(DEFAULT_FLOW_TOL), false)?.endpoint)
}

/// Endpoint data and derivatives of the time-`T` extremal map `p ↦ (x(T), p(T))`.
#[derive(Clone, Debug)]
pub struct ExpJacobian<T: Real> {
    pub endpoint: GroupPoint<T>,
    pub end_covector: DVector<T>,
    /// `∂x(T)/∂p_0`
    pub dx_dp: DMatrix<T>,
    /// `∂p(T)/∂p_0`
    pub dp_dp: DMatrix<T>,
    pub sigma_min: T,
    pub sigma_max: T,
    pub evaluations: usize,
}

/// Differential of `exp_x` at `p` from the variational equations.
pub fn exp_jacobian<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x: &GroupPoint<T>,
    p: &DVector<T>,
    tol: T,
) -> Result<ExpJacobian<T>> {
    exp_jacobian_at(frame, x, p, T::one(), tol)
}

pub fn exp_jacobian_at<T: Real, F: Frame<T> + ?Sized>(
    frame: &F,
    x: &GroupPoint<T>,
    p: &DVector<T>,
    t_final: T,
    tol: T,
) -> Result<ExpJacobian<T>> {
    let n = frame.dim();
    let mut ws = Workspace::new(n, frame.rank());
    let mut y0 = vec![T::zero(); 2 * n + 2 * n * n];
    y0[..n].copy_from_slice(x.as_slice());
    y0[n..2 * n].copy_from_slice(p.as_slice());
    for j in 0..n {
        // δp_j(0) = e_j
        y0[2 * n + j * 2 * n + n + j] = T::one();
    }
    let mut opts = OdeOptions::with_tol(tol);
    // steps are chosen for the extremal; the linearization rides along
    opts.controlled = Some(2 * n);
    let traj = integrate(
        |_, y, dy| ws.rhs(frame, y, dy, true),
        T::zero(),
        &y0,
        t_final,
        &opts,
    )?;
    let yf = traj.final_state();
    let mut dx_dp = DMatrix::zeros(n, n);
    let mut dp_dp = DMatrix::zeros(n, n);
    for j in 0..n {
        let off = 2 * n + j * 2 * n;
        for k in 0..n {
            dx_dp[(k, j)] = yf[off + k];
            dp_dp[(k, j)] = yf[off + n + k];
        }
    }
    let sv = dx_dp.clone().singular_values();
    let sigma_max = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let sigma_min = sv.iter().copied().fold(sigma_max, |a, b| a.min(b));
    Ok(ExpJacobian {
        endpoint: DVector::from_column_slice(&yf[..n]),
        end_covector: DVector::from_column_slice(&yf[n..2 * n]),
        dx_dp,
        dp_dp,
        sigma_min,
        sigma_max,
        evaluations: traj.stats.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Model;
    use approx::assert_relative_eq;

    fn heis() -> Model {
        Model::builtin("heisenberg1").unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn hamiltonian_examples() {
        let h = heis();
        assert_relative_eq!(hamiltonian(&h, &v(&[0.0; 3]), &v(&[1.0, 2.0, 7.0])), 2.5);
        assert_relative_eq!(
            hamiltonian(&h, &v(&[0.0, 2.0, 0.0]), &v(&[0.0, 0.0, 1.0])),
            0.5
        );
        let a = Model::builtin("abelian3").unwrap();
        assert_relative_eq!(
            hamiltonian(&a, &v(&[4.0, 1.0, 2.0]), &v(&[1.0, 2.0, 2.0])),
            4.5
        );
    }

    #[test]
    fn straight_and_vertical_extremals() {
        let h = heis();
        let arc = extremal_flow(&h, &v(&[0.0; 3]), &v(&[1.0, 0.0, 0.0]), 1.0, 1e-10).unwrap();
        assert_relative_eq!(arc.endpoint, v(&[1.0, 0.0, 0.0]), epsilon = 1e-12);
        assert_relative_eq!(arc.end_covector, v(&[1.0, 0.0, 0.0]), epsilon = 1e-12);
        let (mid, _) = arc.at(0.37);
        assert_relative_eq!(mid, v(&[0.37, 0.0, 0.0]), epsilon = 1e-9);
        for c in [0.5, 3.0, -7.0] {
            let e = exp_map(&h, &v(&[0.0; 3]), &v(&[0.0, 0.0, c])).unwrap();
            assert_eq!(e, v(&[0.0; 3]));
        }
        let a = Model::builtin("abelian2").unwrap();
        assert_relative_eq!(
            exp_map(&a, &v(&[0.0, 0.0]), &v(&[0.3, -2.0])).unwrap(),
            v(&[0.3, -2.0])
        );
    }

    #[test]
    fn heisenberg_closed_form_circle() {
        // p = (1, 0, c): horizontal velocity rotates with angular speed c
        let h = heis();
        let c = 2.0;
        let e = exp_map(&h, &v(&[0.0; 3]), &v(&[1.0, 0.0, c])).unwrap();
        let x = c.sin() / c;
        let y = (1.0 - c.cos()) / c;
        let z = (c - c.sin()) / (2.0 * c * c);
        assert_relative_eq!(e, v(&[x, y, z]), epsilon = 1e-9);
    }

    #[test]
    fn vertical_covectors_are_critical() {
        let h = heis();
        let j = exp_jacobian(&h, &v(&[0.0; 3]), &v(&[0.0, 0.0, 2.0]), 1e-10).unwrap();
        assert!(j.sigma_min < 1e-8, "{}", j.sigma_min);
        let a = Model::builtin("abelian3").unwrap();
        let j = exp_jacobian(&a, &v(&[1.0, 2.0, 3.0]), &v(&[0.4, 0.1, -1.0]), 1e-10).unwrap();
        assert_relative_eq!(j.dx_dp, DMatrix::identity(3, 3), epsilon = 1e-12);
    }
}
