//! Pointed distance `d(x, ·)` by multistart shooting, smooth-point
//! classification, and the horizontal gradient of `f = d²/2` with its
//! divergence.
//!
//! Shooting solves `exp_x(p) = y` with Levenberg–Marquardt from
//! low-discrepancy seeds. On Carnot models the seeds are scaled with the
//! homogeneous norm of `x⁻¹y` and the covector weights `2 − d_k`, so the
//! whole solve commutes with dilations.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::hamiltonian::{exp_jacobian, ExpJacobian};
use crate::ode::{integrate, OdeOptions};
use crate::sampling::halton_ball;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const NEAR_MISS: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    Smooth,
    Conjugate,
    Multiple,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingOptions {
    /// Bound `A` on the dual norm of admissible covectors. `None` selects a
    /// default from the scale of the target.
    pub budget: Option<f64>,
    pub starts: usize,
    /// Chart-norm tolerance on `exp_x(p) − y`.
    pub tol: f64,
    pub flow_tol: f64,
    pub max_iter: usize,
    /// Covectors closer than `cluster_radius·(1 + |p|)` are merged.
    pub cluster_radius: f64,
    /// Relative gap under which two clusters count as equally short.
    pub value_rtol: f64,
    /// Criticality threshold relative to the largest singular value.
    pub sigma_rtol: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            budget: None,
            starts: 16,
            tol: 1e-9,
            flow_tol: 1e-10,
            max_iter: 60,
            cluster_radius: 1e-3,
            value_rtol: 1e-5,
            sigma_rtol: 1e-6,
        }
    }
}

impl ShootingOptions {
    /// Defaults with `16·4^{s−2}` starts for a step-`s` model; on Engel
    /// (`s = 3`) sixteen starts regularly settle on a longer extremal.
    pub fn for_model(model: &crate::Model) -> Self {
        let extra = model.step().saturating_sub(2).min(3);
        Self {
            starts: 16 << (2 * extra),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub base: Vec<f64>,
    pub target: Vec<f64>,
    pub value: f64,
    /// Representatives of the minimizing covector clusters at `base`, best first.
    pub covectors: Vec<Vec<f64>>,
    /// Covector `p(1)` at `target` along the best extremal.
    pub end_covector: Vec<f64>,
    pub residual: f64,
    pub classification: Classification,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_rtol: f64,
    /// Number of distinct converged clusters (minimizing or not).
    pub clusters: usize,
    pub converged_starts: usize,
    pub starts: usize,
    /// Covector budget of the multistart; `None` for warm-started solves.
    pub budget: Option<f64>,
}

impl DistanceResult {
    /// Best minimizing covector at the base point.
    pub fn covector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.covectors[0])
    }

    pub fn end_covector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.end_covector)
    }

    pub fn base(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.base)
    }

    pub fn target(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.target)
    }

    /// `f = d²/2`.
    pub fn f(&self) -> f64 {
        0.5 * self.value * self.value
    }

    pub fn is_smooth(&self) -> bool {
        self.classification == Classification::Smooth
    }
}

/// Classification from the number of minimizing clusters and criticality of
/// the best covector.
pub fn classify_smooth_point(result: &DistanceResult) -> Classification {
    if result.value == 0.0 || result.covectors.is_empty() {
        Classification::Unknown
    } else if result.covectors.len() >= 2 {
        Classification::Multiple
    } else if result.sigma_min <= result.sigma_rtol * result.sigma_max {
        Classification::Conjugate
    } else {
        Classification::Smooth
    }
}

const STAGNATION_WINDOW: usize = 12;

#[derive(Clone)]
struct Shot {
    p: DVector<f64>,
    jac: ExpJacobian<f64>,
    residual: f64,
}

impl Shot {
    fn value<F: Frame<f64> + ?Sized>(&self, frame: &F, x: &DVector<f64>) -> f64 {
        frame.frame(x).tr_mul(&self.p).norm()
    }
}

fn levenberg_marquardt<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    p0: DVector<f64>,
    opts: &ShootingOptions,
    known: &[Shot],
    start_tol: f64,
) -> Option<Shot> {
    let n = x.len();
    let scale = 1.0 + y.norm();
    // far from the target the flow only needs to be accurate relative to the
    // current residual
    let flow_tol = |res: f64| (1e-5 * res / scale).clamp(opts.flow_tol, 1e-7);
    let mut p = p0;
    let mut cur_tol = opts.flow_tol.max(start_tol);
    let mut cur = exp_jacobian(frame, x, &p, cur_tol).ok()?;
    let mut r = &cur.endpoint - y;
    let mut cost = r.norm_squared();
    let mut mu = -1.0;
    let mut nu = 2.0;
    // after reaching `tol`, keep taking steps while they still pay off
    let polish = (opts.tol * 1e-2).max(1e-15 * scale);
    let mut stalled = false;
    let mut iter = 0;
    let mut history = Vec::with_capacity(opts.max_iter);
    loop {
        while iter < opts.max_iter {
            iter += 1;
            let res = cost.sqrt();
            if res <= polish || (res <= opts.tol && stalled) {
                break;
            }
            // give up on starts that stagnate away from the target
            history.push(cost);
            if history.len() > STAGNATION_WINDOW
                && cost > 0.9 * history[history.len() - 1 - STAGNATION_WINDOW]
            {
                break;
            }
            // a start entering the basin of an earlier solution ends there
            if res <= 1e-3 * scale {
                if let Some(k) = known
                    .iter()
                    .find(|k| (&k.p - &p).norm() < 0.1 * opts.cluster_radius * (1.0 + p.norm()))
                {
                    return Some(k.clone());
                }
            }
            let j = &cur.dx_dp;
            let a = j.tr_mul(j);
            let g = j.tr_mul(&r);
            if mu < 0.0 {
                mu = 1e-3 * a.diagonal().max().max(1e-12);
            }
            let mut damped = a.clone();
            for k in 0..n {
                damped[(k, k)] += mu;
            }
            let Some(chol) = damped.cholesky() else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let predicted = step.dot(&(&step * mu - &g));
            let p_new = &p + &step;
            let tol_new = flow_tol(res).min(cur_tol);
            match exp_jacobian(frame, x, &p_new, tol_new) {
                Ok(next) => {
                    let r_new = &next.endpoint - y;
                    let cost_new = r_new.norm_squared();
                    stalled = res <= opts.tol && cost_new > 0.25 * cost;
                    if cost_new < cost {
                        let rho = (cost - cost_new) / predicted.max(1e-300);
                        mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                        nu = 2.0;
                        p = p_new;
                        cur = next;
                        cur_tol = tol_new;
                        r = r_new;
                        cost = cost_new;
                    } else if cur_tol > opts.flow_tol && res <= 1e3 * cur_tol * scale {
                        // the comparison may be drowned in integration error
                        cur_tol = (cur_tol * 1e-2).max(opts.flow_tol);
                        cur = exp_jacobian(frame, x, &p, cur_tol).ok()?;
                        r = &cur.endpoint - y;
                        cost = r.norm_squared();
                    } else {
                        mu *= nu;
                        nu *= 2.0;
                    }
                }
                Err(_) if res <= opts.tol => stalled = true,
                Err(_) => {
                    mu *= nu;
                    nu *= 2.0;
                }
            }
            if step.norm() <= 1e-15 * (1.0 + p.norm()) || mu > 1e30 {
                break;
            }
        }
        if cur_tol <= opts.flow_tol {
            break;
        }
        // the accepted iterate must be confirmed at full accuracy
        cur = exp_jacobian(frame, x, &p, opts.flow_tol).ok()?;
        cur_tol = opts.flow_tol;
        r = &cur.endpoint - y;
        cost = r.norm_squared();
        stalled = false;
        if cost.sqrt() <= opts.tol || iter >= opts.max_iter || mu > 1e30 {
            break;
        }
    }
    Some(Shot {
        p,
        jac: cur,
        residual: cost.sqrt(),
    })
}

/// Seeds for the multistart and the covector budget actually used.
fn shooting_seeds<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &ShootingOptions,
) -> (Vec<DVector<f64>>, f64) {
    let n = x.len();
    let halton = halton_ball(opts.starts.saturating_sub(1), n);
    if let Some(model) = frame.carnot() {
        let z = model.product(&model.inverse(x), y);
        let rho = model.homogeneous_norm(&z).max(1e-300);
        let scale: Vec<f64> = model
            .weights()
            .iter()
            .map(|&d| {
                if d == 1 {
                    2.0 * rho
                } else {
                    PI * 2f64.powi(d as i32 - 1) * rho.powi(2 - d as i32)
                }
            })
            .collect();
        let transport = model
            .left_translation_differential(x)
            .transpose()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::identity(n, n));
        let scale_norm = scale.iter().map(|s| s * s).sum::<f64>().sqrt();
        let budget = opts
            .budget
            .unwrap_or(2.0 * scale_norm * transport.clone().singular_values().max().max(1.0));
        let straight = DVector::from_iterator(
            n,
            z.iter()
                .zip(model.weights())
                .map(|(v, &d)| if d == 1 { *v } else { 0.0 }),
        );
        let mut seeds = vec![&transport * straight];
        for q in halton {
            let p0 = DVector::from_iterator(n, q.iter().zip(&scale).map(|(a, s)| a * s));
            seeds.push(&transport * p0);
        }
        (seeds, budget)
    } else {
        let delta = y - x;
        let budget = opts.budget.unwrap_or(2.0 * (delta.norm() + PI));
        let mut seeds = vec![delta];
        for q in halton {
            seeds.push(DVector::from_iterator(
                n,
                q.iter().map(|a| a * budget / 2.0),
            ));
        }
        (seeds, budget)
    }
}

fn zero_result(x: &DVector<f64>, opts: &ShootingOptions) -> DistanceResult {
    let n = x.len();
    DistanceResult {
        base: x.as_slice().to_vec(),
        target: x.as_slice().to_vec(),
        value: 0.0,
        covectors: vec![vec![0.0; n]],
        end_covector: vec![0.0; n],
        residual: 0.0,
        classification: Classification::Unknown,
        sigma_min: 0.0,
        sigma_max: 0.0,
        sigma_rtol: opts.sigma_rtol,
        clusters: 1,
        converged_starts: 0,
        starts: 0,
        budget: opts.budget,
    }
}

fn assemble<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    shots: Vec<Shot>,
    starts: usize,
    budget: Option<f64>,
    opts: &ShootingOptions,
) -> Result<DistanceResult> {
    let attempted = shots.len();
    let mut converged: Vec<(f64, Shot)> = shots
        .into_iter()
        .filter(|s| s.residual <= opts.tol)
        .map(|s| (s.value(frame, x), s))
        .collect();
    if converged.is_empty() {
        return Err(Error::NotReached {
            budget: budget.unwrap_or(f64::INFINITY),
        });
    }
    let converged_starts = converged.len();
    converged.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.residual.total_cmp(&b.1.residual))
    });
    let mut reps: Vec<(f64, Shot)> = Vec::new();
    for (value, shot) in converged {
        let radius = opts.cluster_radius * (1.0 + shot.p.norm());
        if reps.iter().all(|(_, r)| (&r.p - &shot.p).norm() >= radius) {
            reps.push((value, shot));
        }
    }
    let best_value = reps[0].0;
    let covectors: Vec<Vec<f64>> = reps
        .iter()
        .filter(|(v, _)| *v <= best_value * (1.0 + opts.value_rtol) + 1e-14)
        .map(|(_, s)| s.p.as_slice().to_vec())
        .collect();
    let best = &reps[0].1;
    let mut result = DistanceResult {
        base: x.as_slice().to_vec(),
        target: y.as_slice().to_vec(),
        value: best_value,
        covectors,
        end_covector: best.jac.end_covector.as_slice().to_vec(),
        residual: best.residual,
        classification: Classification::Unknown,
        sigma_min: best.jac.sigma_min,
        sigma_max: best.jac.sigma_max,
        sigma_rtol: opts.sigma_rtol,
        clusters: reps.len(),
        converged_starts,
        starts: starts.max(attempted),
        budget,
    };
    result.classification = classify_smooth_point(&result);
    Ok(result)
}

/// `d(x, y)` by multistart shooting.
pub fn distance<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &ShootingOptions,
) -> Result<DistanceResult> {
    if opts.starts == 0 || opts.tol <= 0.0 || opts.budget.is_some_and(|a| a <= 0.0) {
        return Err(Error::InvalidInput(
            "shooting needs starts ≥ 1, tol > 0, A > 0".into(),
        ));
    }
    if x == y {
        return Ok(zero_result(x, opts));
    }
    let (seeds, budget) = shooting_seeds(frame, x, y, opts);
    let starts = seeds.len();
    let mut shots = Vec::with_capacity(starts);
    let mut best_residual = f64::INFINITY;
    let mut known = Vec::new();
    for mut seed in seeds {
        let norm = seed.norm();
        if norm > budget {
            seed *= budget / norm;
        }
        if let Some(shot) = levenberg_marquardt(frame, x, y, seed, opts, &known, 1e-7) {
            if shot.p.norm() <= budget {
                best_residual = best_residual.min(shot.residual);
                if shot.residual <= opts.tol {
                    known.push(shot.clone());
                }
                shots.push(shot);
            }
        }
    }
    // a near miss is a precision failure; anything farther means the
    // budget does not cover a solution
    if best_residual > opts.tol && best_residual <= NEAR_MISS * opts.tol {
        return Err(Error::ShootingFailed {
            residual: best_residual,
            tol: opts.tol,
        });
    }
    if best_residual > opts.tol {
        return Err(Error::NotReached { budget });
    }
    assemble(frame, x, y, shots, starts, Some(budget), opts)
}

/// Single warm-started solve from `hint`. Multiplicity is not tested, so
/// the classification is `Smooth` or `Conjugate` only; callers use it for
/// points near a known smooth point.
pub fn refine<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    hint: &DVector<f64>,
    opts: &ShootingOptions,
) -> Result<DistanceResult> {
    if x == y {
        return Ok(zero_result(x, opts));
    }
    let shot = levenberg_marquardt(frame, x, y, hint.clone(), opts, &[], opts.flow_tol).ok_or(
        Error::NotReached {
            budget: f64::INFINITY,
        },
    )?;
    if shot.residual > opts.tol {
        return Err(Error::ShootingFailed {
            residual: shot.residual,
            tol: opts.tol,
        });
    }
    assemble(frame, x, y, vec![shot], 1, None, opts)
}

/// Distance data at `δ_λ(y)` obtained from a solved `y` (base point `0`):
/// the rescaled covector `λ^{2-d_k} p_k` is refined at the dilated target.
/// Multiplicity is dilation invariant and carried over.
pub fn dilate_result(
    model: &crate::Model,
    res: &DistanceResult,
    lambda: f64,
    opts: &ShootingOptions,
) -> Result<DistanceResult> {
    let y = model.dilate(lambda, &res.target())?;
    let hint = model.dilate_covector(lambda, &res.covector());
    let mut out = refine(model, &res.base(), &y, &hint, opts)?;
    if res.covectors.len() > 1 {
        out.covectors = res
            .covectors
            .iter()
            .map(|p| {
                model
                    .dilate_covector(lambda, &DVector::from_column_slice(p))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        out.classification = Classification::Multiple;
    }
    out.clusters = res.clusters;
    Ok(out)
}

pub use crate::cache::DistanceCache;

/// `d(x, y)`, served from `cache` when the same query was solved before.
pub fn distance_cached<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &ShootingOptions,
    cache: Option<&DistanceCache>,
) -> Result<DistanceResult> {
    if let Some(c) = cache {
        if let Some(hit) = c.get(&frame.id(), x.as_slice(), y.as_slice(), opts) {
            return Ok(hit);
        }
    }
    let res = distance(frame, x, y, opts)?;
    if let Some(c) = cache {
        c.insert(&frame.id(), opts, res.clone());
    }
    Ok(res)
}

/// `f^0(y) = d(0, y)²/2`.
pub fn f0<F: Frame<f64> + ?Sized>(
    frame: &F,
    y: &DVector<f64>,
    opts: &ShootingOptions,
    cache: Option<&DistanceCache>,
) -> Result<f64> {
    let zero = DVector::zeros(y.len());
    Ok(distance_cached(frame, &zero, y, opts, cache)?.f())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientSource {
    Covector,
    FiniteDifference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientSample {
    pub point: Vec<f64>,
    /// Chart components of `Σ_i (X^i f) X^i`.
    pub gradient: Vec<f64>,
    /// Frame components `X^i f`.
    pub components: Vec<f64>,
    /// Sub-Riemannian norm `(Σ_i (X^i f)²)^{1/2}`.
    pub norm: f64,
    pub source: GradientSource,
    /// Frame-direction central differences of `f`, when requested.
    pub finite_difference: Option<Vec<f64>>,
    /// `|∇_cov − ∇_fd| / |∇_cov|`.
    pub discrepancy: Option<f64>,
    pub fd_step: Option<f64>,
}

/// `Σ_i ⟨p(1), X^i(y)⟩ X^i(y)` from the end covector of a solved distance.
pub fn gradient_from<F: Frame<f64> + ?Sized>(frame: &F, res: &DistanceResult) -> DVector<f64> {
    let fr = frame.frame(&res.target());
    &fr * fr.tr_mul(&res.end_covector())
}

/// Homogeneous scale of `x⁻¹y` on Carnot models, 1 otherwise, together with
/// the per-coordinate weights used to shape stencils.
pub(crate) fn stencil_scales<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> (f64, Vec<f64>) {
    match frame.carnot() {
        Some(model) => {
            let rho = model
                .homogeneous_norm(&model.product(&model.inverse(x), y))
                .max(1e-12);
            (
                rho,
                model
                    .weights()
                    .iter()
                    .map(|&d| rho.powi(d as i32))
                    .collect(),
            )
        }
        None => (1.0, vec![1.0; x.len()]),
    }
}

/// Warm starts around a smooth point: neighbours are solved from the
/// linearized covector `p + (∂exp/∂p)⁻¹ (y' − y)` and must stay on the same
/// branch.
pub(crate) struct Neighborhood<'a> {
    center: &'a DistanceResult,
    p: DVector<f64>,
    inverse: Option<DMatrix<f64>>,
    /// Largest covector change, relative to `1 + |p|`, still on the branch.
    max_jump: f64,
}

impl<'a> Neighborhood<'a> {
    pub(crate) fn new<F: Frame<f64> + ?Sized>(
        frame: &F,
        center: &'a DistanceResult,
        opts: &ShootingOptions,
    ) -> Self {
        let p = center.covector();
        let inverse = exp_jacobian(frame, &center.base(), &p, opts.flow_tol)
            .ok()
            .and_then(|j| j.dx_dp.try_inverse());
        Self {
            center,
            p,
            inverse,
            max_jump: 0.05,
        }
    }

    pub(crate) fn with_max_jump(mut self, max_jump: f64) -> Self {
        self.max_jump = max_jump;
        self
    }

    pub(crate) fn solve<F: Frame<f64> + ?Sized>(
        &self,
        frame: &F,
        y: &DVector<f64>,
        opts: &ShootingOptions,
    ) -> Result<DistanceResult> {
        let hint = match &self.inverse {
            Some(inv) => &self.p + inv * (y - self.center.target()),
            None => self.p.clone(),
        };
        let res = refine(frame, &self.center.base(), y, &hint, opts)?;
        let jump = (res.covector() - &self.p).norm();
        if res.classification != Classification::Smooth
            || jump > self.max_jump * (1.0 + self.p.norm())
        {
            return Err(Error::NotSmoothPoint(format!(
                "stencil point {:?} is {:?} (covector jump {jump:.3e})",
                y.as_slice(),
                res.classification
            )));
        }
        Ok(res)
    }
}

/// Horizontal gradient of `f^x = d(x,·)²/2` at `y`. With `fd_step`, also
/// central differences of `f` along `±h·X^i(y)` scaled by the homogeneous
/// norm, and their relative discrepancy.
pub fn horizontal_gradient<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &ShootingOptions,
    fd_step: Option<f64>,
) -> Result<GradientSample> {
    let res = distance(frame, x, y, opts)?;
    if !res.is_smooth() {
        return Err(Error::NotSmoothPoint(format!(
            "{:?} is {:?}",
            y.as_slice(),
            res.classification
        )));
    }
    horizontal_gradient_from(frame, &res, opts, fd_step)
}

pub fn horizontal_gradient_from<F: Frame<f64> + ?Sized>(
    frame: &F,
    res: &DistanceResult,
    opts: &ShootingOptions,
    fd_step: Option<f64>,
) -> Result<GradientSample> {
    let grad = gradient_from(frame, res);
    let y = res.target();
    let components = frame.frame(&y).tr_mul(&res.end_covector());
    let mut sample = GradientSample {
        point: res.target.clone(),
        norm: components.norm(),
        components: components.as_slice().to_vec(),
        gradient: grad.as_slice().to_vec(),
        source: GradientSource::Covector,
        finite_difference: None,
        discrepancy: None,
        fd_step,
    };
    if let Some(h) = fd_step {
        let (rho, _) = stencil_scales(frame, &res.base(), &y);
        let step = h * rho;
        let fr = frame.frame(&y);
        let near = Neighborhood::new(frame, res, opts);
        let mut fd = DVector::zeros(y.len());
        for i in 0..frame.rank() {
            let dir = fr.column(i).into_owned();
            let fp = near.solve(frame, &(&y + &dir * step), opts)?.f();
            let fm = near.solve(frame, &(&y - &dir * step), opts)?.f();
            fd += dir * ((fp - fm) / (2.0 * step));
        }
        sample.discrepancy = Some((&fd - &grad).norm() / grad.norm().max(1e-300));
        sample.finite_difference = Some(fd.as_slice().to_vec());
    }
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceOptions {
    /// Stencil step relative to the homogeneous scale (`h·ρ^{d_k}` in
    /// coordinate `k` on Carnot models, `h` otherwise).
    pub step: f64,
    /// Requested accuracy; `UnstableDerivative` beyond ten times this.
    pub tol: f64,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        Self {
            step: 2e-3,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivergenceSample {
    pub point: Vec<f64>,
    pub divergence: f64,
    /// Estimates with steps `h` and `h/2` before extrapolation.
    pub coarse: f64,
    pub fine: f64,
    /// `|extrapolated − fine|`.
    pub richardson_difference: f64,
    pub step: f64,
    pub classification: Classification,
}

fn stencil_divergence<F: Frame<f64> + ?Sized>(
    frame: &F,
    near: &Neighborhood,
    steps: &[f64],
    opts: &ShootingOptions,
) -> Result<f64> {
    let y = near.center.target();
    let mut div = 0.0;
    for (k, &h) in steps.iter().enumerate() {
        let mut g = [0.0; 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut yk = y.clone();
            yk[k] += sign * h;
            let res = near.solve(frame, &yk, opts)?;
            g[slot] = gradient_from(frame, &res)[k];
        }
        div += (g[0] - g[1]) / (2.0 * h);
    }
    Ok(div)
}

fn density_term<F: Frame<f64> + ?Sized>(frame: &F, res: &DistanceResult) -> f64 {
    frame
        .log_density_gradient(&res.target)
        .map_or(0.0, |g| gradient_from(frame, res).dot(&g))
}

/// `div^μ(∇^h f^x)` at `y` by central differences of the covector gradient
/// field with Richardson extrapolation over `{h, h/2}`.
pub fn divergence<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &ShootingOptions,
    div_opts: &DivergenceOptions,
) -> Result<DivergenceSample> {
    let res = distance(frame, x, y, opts)?;
    divergence_from(frame, &res, opts, div_opts)
}

pub fn divergence_from<F: Frame<f64> + ?Sized>(
    frame: &F,
    res: &DistanceResult,
    opts: &ShootingOptions,
    div_opts: &DivergenceOptions,
) -> Result<DivergenceSample> {
    if !res.is_smooth() {
        return Err(Error::NotSmoothPoint(format!(
            "{:?} is {:?}",
            res.target, res.classification
        )));
    }
    let (_, scales) = stencil_scales(frame, &res.base(), &res.target());
    let steps: Vec<f64> = scales.iter().map(|s| div_opts.step * s).collect();
    let half: Vec<f64> = steps.iter().map(|s| s / 2.0).collect();
    let near = Neighborhood::new(frame, res, opts);
    let coarse = stencil_divergence(frame, &near, &steps, opts)?;
    let fine = stencil_divergence(frame, &near, &half, opts)?;
    let extrapolated = (4.0 * fine - coarse) / 3.0;
    let difference = (extrapolated - fine).abs();
    let limit = 10.0 * div_opts.tol * (1.0 + extrapolated.abs());
    if difference > limit {
        return Err(Error::UnstableDerivative { difference, limit });
    }
    Ok(DivergenceSample {
        point: res.target.clone(),
        divergence: extrapolated + density_term(frame, res),
        coarse,
        fine,
        richardson_difference: difference,
        step: div_opts.step,
        classification: res.classification,
    })
}

/// Exact divergence from the variational equations:
/// `Σ_i [ (Hess f X^i + J_iᵀ p) · X^i + ⟨p, X^i⟩ tr J_i ] + ∇^h f · ∇V`.
pub fn divergence_variational<F: Frame<f64> + ?Sized>(
    frame: &F,
    res: &DistanceResult,
    opts: &ShootingOptions,
) -> Result<f64> {
    if !res.is_smooth() {
        return Err(Error::NotSmoothPoint(format!(
            "{:?} is {:?}",
            res.target, res.classification
        )));
    }
    divergence_along(frame, &res.base(), &res.covector(), opts.flow_tol)
}

/// Divergence of `∇^h f^x` at `exp_x(p)`, assuming `p` is the minimizing
/// covector there (as for interior points of a minimizer).
pub(crate) fn divergence_along<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    p: &DVector<f64>,
    flow_tol: f64,
) -> Result<f64> {
    let jac = exp_jacobian(frame, x, p, flow_tol)?;
    let inv = jac
        .dx_dp
        .clone()
        .try_inverse()
        .ok_or(Error::NotSmoothPoint("critical covector".into()))?;
    // Hess f(y) = ∂p(1)/∂y
    let hess = &jac.dp_dp * inv;
    let y = &jac.endpoint;
    let p1 = &jac.end_covector;
    let fr = frame.frame(y);
    let jacs = frame.jacobians(y);
    let mut div = 0.0;
    for (i, ji) in jacs.iter().enumerate() {
        let xi = fr.column(i);
        let hi = xi.dot(p1);
        div += (&hess * xi + ji.tr_mul(p1)).dot(&xi) + hi * ji.trace();
    }
    if let Some(g) = frame.log_density_gradient(y.as_slice()) {
        div += (&fr * fr.tr_mul(p1)).dot(&g);
    }
    Ok(div)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivDecomposition {
    pub point: Vec<f64>,
    /// `Σ_i (X^i f) div^μ X^i`.
    pub first_order: f64,
    /// `Σ_i X^i(X^i f)`.
    pub second_order: f64,
    /// `X^i(X^i f)` for each field.
    pub per_field: Vec<f64>,
    /// Smallest `B` with `X^i(X^i f) ≤ B|∇^h f| + B` for all `i`.
    pub fitted_b: f64,
    pub gradient_norm: f64,
}

/// Splits the divergence into first- and second-order parts. `X^i(X^i f)` is
/// a Richardson-extrapolated central difference of `X^i f` along the flow of
/// `X^i`, over flow times `h·ρ` and `h·ρ/2`.
pub fn div_decomposition<F: Frame<f64> + ?Sized>(
    frame: &F,
    res: &DistanceResult,
    opts: &ShootingOptions,
    div_opts: &DivergenceOptions,
) -> Result<DivDecomposition> {
    if !res.is_smooth() {
        return Err(Error::NotSmoothPoint(format!(
            "{:?} is {:?}",
            res.target, res.classification
        )));
    }
    let y = res.target();
    let (rho, _) = stencil_scales(frame, &res.base(), &y);
    let fr = frame.frame(&y);
    let p1 = res.end_covector();
    let m = frame.rank();
    let near = Neighborhood::new(frame, res, opts);
    let mut first_order = 0.0;
    let mut per_field = Vec::with_capacity(m);
    for i in 0..m {
        first_order += fr.column(i).dot(&p1) * frame.field_divergence(i, y.as_slice());
        let derivative = |tau: f64| -> Result<f64> {
            let mut g = [0.0; 2];
            for (slot, t) in [tau, -tau].into_iter().enumerate() {
                let z = field_flow(frame, i, &y, t, opts.flow_tol)?;
                let r = near.solve(frame, &z, opts)?;
                g[slot] = frame.frame(&z).column(i).dot(&r.end_covector());
            }
            Ok((g[0] - g[1]) / (2.0 * tau))
        };
        let tau = div_opts.step * rho;
        let coarse = derivative(tau)?;
        let fine = derivative(tau / 2.0)?;
        per_field.push((4.0 * fine - coarse) / 3.0);
    }
    let gradient_norm = gradient_from(frame, res).norm();
    let fitted_b = per_field
        .iter()
        .fold(0.0f64, |b, v| b.max(v / (gradient_norm + 1.0)));
    Ok(DivDecomposition {
        point: res.target.clone(),
        first_order,
        second_order: per_field.iter().sum(),
        per_field,
        fitted_b,
        gradient_norm,
    })
}

/// Time-`t` flow of `X^i` from `y`.
pub fn field_flow<F: Frame<f64> + ?Sized>(
    frame: &F,
    i: usize,
    y: &DVector<f64>,
    t: f64,
    tol: f64,
) -> Result<DVector<f64>> {
    let n = y.len();
    let mut fr = DMatrix::zeros(n, frame.rank());
    let traj = integrate(
        |_, z: &[f64], dz: &mut [f64]| {
            frame.eval_into(z, &mut fr);
            dz.copy_from_slice(fr.column(i).as_slice());
        },
        0.0,
        y.as_slice(),
        t,
        &OdeOptions::with_tol(tol),
    )?;
    Ok(DVector::from_column_slice(traj.final_state()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Model;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn heisenberg_horizontal_point() {
        let h = Model::builtin("heisenberg1").unwrap();
        let res = distance(
            &h,
            &v(&[0.0; 3]),
            &v(&[1.0, 0.0, 0.0]),
            &ShootingOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(res.value, 1.0, epsilon = 1e-9);
        assert_relative_eq!(res.covector(), v(&[1.0, 0.0, 0.0]), epsilon = 1e-7);
        assert_eq!(res.classification, Classification::Smooth);
        let res = distance(
            &h,
            &v(&[0.0; 3]),
            &v(&[2.0, 0.0, 0.0]),
            &ShootingOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(res.f(), 2.0, epsilon = 1e-8);
    }

    #[test]
    fn heisenberg_vertical_point_is_multiple() {
        let h = Model::builtin("heisenberg1").unwrap();
        let res = distance(
            &h,
            &v(&[0.0; 3]),
            &v(&[0.0, 0.0, 1.0]),
            &ShootingOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(res.value, 2.0 * PI.sqrt(), epsilon = 1e-7);
        assert_eq!(res.classification, Classification::Multiple);
    }

    #[test]
    fn abelian_distance_and_divergence() {
        let a = Model::builtin("abelian3").unwrap();
        let opts = ShootingOptions::default();
        let y = v(&[0.3, -1.2, 0.5]);
        let res = distance(&a, &v(&[0.0; 3]), &y, &opts).unwrap();
        assert_relative_eq!(res.value, y.norm(), epsilon = 1e-10);
        assert!(res.is_smooth());
        let g = horizontal_gradient_from(&a, &res, &opts, Some(1e-4)).unwrap();
        assert_relative_eq!(v(&g.gradient), y, epsilon = 1e-9);
        assert!(g.discrepancy.unwrap() < 1e-6);
        let d = divergence_from(&a, &res, &opts, &DivergenceOptions::default()).unwrap();
        assert_relative_eq!(d.divergence, 3.0, epsilon = 1e-6);
        assert_relative_eq!(
            divergence_variational(&a, &res, &opts).unwrap(),
            3.0,
            epsilon = 1e-9
        );
        let dec = div_decomposition(&a, &res, &opts, &DivergenceOptions::default()).unwrap();
        assert!(dec.first_order.abs() < 1e-12);
        assert_relative_eq!(dec.second_order, 3.0, epsilon = 1e-6);
    }

    #[test]
    fn heisenberg_divergence_routes_agree() {
        let h = Model::builtin("heisenberg1").unwrap();
        let opts = ShootingOptions::default();
        let res = distance(&h, &v(&[0.0; 3]), &v(&[0.6, -0.4, 0.2]), &opts).unwrap();
        assert!(res.is_smooth());
        let fd = divergence_from(&h, &res, &opts, &DivergenceOptions::default()).unwrap();
        let exact = divergence_variational(&h, &res, &opts).unwrap();
        assert!(
            (fd.divergence - exact).abs() < 1e-5,
            "{} vs {}",
            fd.divergence,
            exact
        );
        assert!(exact < 5.0 && exact > 0.0);
        let dec = div_decomposition(&h, &res, &opts, &DivergenceOptions::default()).unwrap();
        assert!(dec.first_order.abs() < 1e-12);
        assert!((dec.second_order - exact).abs() < 1e-4);
        let g = horizontal_gradient_from(&h, &res, &opts, Some(1e-4)).unwrap();
        assert_relative_eq!(g.norm, res.value, epsilon = 1e-8);
        assert!(g.discrepancy.unwrap() < 1e-5);
    }

    #[test]
    fn gradient_requires_smooth_point() {
        let h = Model::builtin("heisenberg1").unwrap();
        let err = horizontal_gradient(
            &h,
            &v(&[0.0; 3]),
            &v(&[0.0, 0.0, 1.0]),
            &ShootingOptions::default(),
            None,
        );
        assert!(matches!(err, Err(Error::NotSmoothPoint(_))));
    }

    #[test]
    fn tiny_budget_is_reported() {
        let h = Model::builtin("heisenberg1").unwrap();
        let opts = ShootingOptions {
            budget: Some(0.1),
            ..Default::default()
        };
        let err = distance(&h, &v(&[0.0; 3]), &v(&[0.0, 0.0, 1.0]), &opts);
        assert!(matches!(err, Err(Error::NotReached { .. })), "{err:?}");
    }

    #[test]
    fn engel_needs_more_starts() {
        let e = Model::builtin("engel").unwrap();
        let opts = ShootingOptions::for_model(&e);
        assert_eq!(opts.starts, 64);
        assert_eq!(
            ShootingOptions::for_model(&Model::builtin("heisenberg2").unwrap()).starts,
            16
        );
        let zero = v(&[0.0; 4]);
        let y = v(&[
            0.22492163453299577,
            0.48216977618492296,
            0.42018691200944974,
            -0.46097002153654537,
        ]);
        let d = distance(&e, &zero, &y, &opts).unwrap().value;
        let d2 = distance(&e, &zero, &e.dilate(2.0, &y).unwrap(), &opts)
            .unwrap()
            .value;
        assert_relative_eq!(d2, 2.0 * d, max_relative = 1e-7);
    }
}
