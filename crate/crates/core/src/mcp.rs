//! Measure contraction checks: `s`-interpolation of sets, the gradient
//! contraction flow of `f^x`, Monte-Carlo comparison of `μ(A_s)` against the
//! `MCP(K, N)` bound, and estimates of `N` from divergences on the unit
//! sphere of a Carnot group.

use crate::distance::{
    distance, divergence_along, divergence_from, divergence_variational, gradient_from, refine,
    stencil_scales, Classification, DistanceResult, DivergenceOptions, Neighborhood,
    ShootingOptions,
};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::hamiltonian::exp_map;
use crate::ode::{integrate, OdeOptions};
use crate::sampling::{random_direction, task_rng, uniform_in_ball};
use crate::Model;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

/// Parameters `(K, N)` of the comparison function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonParams {
    pub k: f64,
    pub n: f64,
}

impl ComparisonParams {
    pub fn new(k: f64, n: f64) -> Result<Self> {
        if !(n > 1.0) || !k.is_finite() {
            return Err(Error::InvalidInput(format!(
                "need finite K and N > 1, got K={k}, N={n}"
            )));
        }
        Ok(Self { k, n })
    }

    pub fn flat(n: f64) -> Result<Self> {
        Self::new(0.0, n)
    }

    /// Distances must stay below this for `K > 0`.
    pub fn distance_limit(&self) -> f64 {
        if self.k > 0.0 {
            std::f64::consts::PI * ((self.n - 1.0) / self.k).sqrt()
        } else {
            f64::INFINITY
        }
    }
}

/// `s_K(t)`: `sin(√K t)/√K`, `t`, or `sinh(√−K t)/√−K`.
pub fn s_k(k: f64, t: f64) -> f64 {
    if k > 0.0 {
        let r = k.sqrt();
        (r * t).sin() / r
    } else if k < 0.0 {
        let r = (-k).sqrt();
        (r * t).sinh() / r
    } else {
        t
    }
}

/// `s·[s_K(s d/√(N−1)) / s_K(d/√(N−1))]^{N−1}`.
pub fn mcp_integrand(params: &ComparisonParams, d: f64, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidInput(format!("s = {s} outside [0, 1]")));
    }
    let limit = params.distance_limit();
    if params.k > 0.0 && d >= limit {
        return Err(Error::DomainViolation { d, limit });
    }
    if params.k == 0.0 || d == 0.0 {
        return Ok(s.powf(params.n));
    }
    let c = (params.n - 1.0).sqrt();
    Ok(s * (s_k(params.k, s * d / c) / s_k(params.k, d / c)).powf(params.n - 1.0))
}

/// Nodes and weights of the `count`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(count: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; count];
    let mut weights = vec![0.0; count];
    for i in 0..count {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (count as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..count {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = count as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (nodes, weights)
}

/// `V(b) − V(a)` for the log-density `V`, along the chart segment.
fn log_density_increment<F: Frame<f64> + ?Sized>(
    frame: &F,
    a: &DVector<f64>,
    b: &DVector<f64>,
) -> f64 {
    if frame.log_density_gradient(a.as_slice()).is_none() {
        return 0.0;
    }
    let (nodes, weights) = gauss_legendre(6);
    let step = b - a;
    nodes
        .iter()
        .zip(&weights)
        .map(|(z, w)| {
            let point = a + &step * (0.5 * (z + 1.0));
            let g = frame
                .log_density_gradient(point.as_slice())
                .expect("density present");
            0.5 * w * g.dot(&step)
        })
        .sum()
}

fn ball_volume(dim: usize, radius: f64) -> f64 {
    let mut v = if dim.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if dim.is_multiple_of(2) { 2 } else { 3 };
    while k <= dim {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v * radius.powi(dim as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Chart ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// Explicit points of a set with the given chart volume.
    Cloud { points: Vec<Vec<f64>>, volume: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rejection {
    pub point: Vec<f64>,
    pub reason: String,
}

/// Uniform Monte-Carlo sample of a region, restricted to smooth points of
/// the base point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSample {
    pub region: Region,
    pub points: Vec<DistanceResult>,
    /// `V(y) − V(y_0)` for each retained point, `y_0` the first draw.
    pub log_density: Vec<f64>,
    pub drawn: usize,
    pub rejected: Vec<Rejection>,
    pub chart_volume: f64,
    /// `μ(A)` relative to `e^{V(y_0)}`.
    pub measure: f64,
}

impl RegionSample {
    pub fn rejected_fraction(&self) -> f64 {
        self.rejected.len() as f64 / self.drawn.max(1) as f64
    }

    /// Draws `count` points (balls) or takes the cloud, solves `d(x, y)` at
    /// each and keeps the smooth ones.
    pub fn draw<F: Frame<f64> + Sync + ?Sized>(
        frame: &F,
        x: &DVector<f64>,
        region: &Region,
        count: usize,
        seed: u64,
        opts: &ShootingOptions,
    ) -> Result<Self> {
        let (candidates, chart_volume) = match region {
            Region::Ball { center, radius } => {
                if center.len() != frame.dim() || !(*radius > 0.0) {
                    return Err(Error::InvalidInput(
                        "ball needs a center of the model dimension and radius > 0".into(),
                    ));
                }
                let pts: Vec<Vec<f64>> = (0..count as u64)
                    .map(|i| uniform_in_ball(&mut task_rng(seed, i), center, *radius))
                    .collect();
                (pts, ball_volume(frame.dim(), *radius))
            }
            Region::Cloud { points, volume } => {
                if points.iter().any(|p| p.len() != frame.dim()) {
                    return Err(Error::InvalidInput("cloud point of wrong dimension".into()));
                }
                (points.clone(), *volume)
            }
        };
        if candidates.is_empty() {
            return Err(Error::InvalidInput("empty region sample".into()));
        }
        let solved: Vec<Result<DistanceResult>> = candidates
            .par_iter()
            .map(|y| distance(frame, x, &DVector::from_column_slice(y), opts))
            .collect();
        let origin = DVector::from_column_slice(&candidates[0]);
        let mut sample = RegionSample {
            region: region.clone(),
            points: Vec::new(),
            log_density: Vec::new(),
            drawn: candidates.len(),
            rejected: Vec::new(),
            chart_volume,
            measure: 0.0,
        };
        let mut weight_sum = 0.0;
        for (y, res) in candidates.iter().zip(solved) {
            let yv = DVector::from_column_slice(y);
            let v = log_density_increment(frame, &origin, &yv);
            weight_sum += v.exp();
            match res {
                Ok(r) if r.is_smooth() => {
                    sample.points.push(r);
                    sample.log_density.push(v);
                }
                Ok(r) => sample.rejected.push(Rejection {
                    point: y.clone(),
                    reason: format!("{:?}", r.classification),
                }),
                Err(e) => sample.rejected.push(Rejection {
                    point: y.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        sample.measure = chart_volume * weight_sum / candidates.len() as f64;
        Ok(sample)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Interpolation {
    pub s: f64,
    /// `γ_x(s, y)` for each retained point of the sample.
    pub points: Vec<Vec<f64>>,
    pub dropped: Vec<Rejection>,
    /// `|d(x, γ_x(s,y)) − s d(x,y)| / (s d(x,y))` when verified.
    pub distance_errors: Option<Vec<f64>>,
}

/// `A_s`: the time-`s` points of the minimizers from `x`. With `verify`,
/// `d(x, ·)` is recomputed at each image by multistart shooting.
pub fn interpolate<F: Frame<f64> + Sync + ?Sized>(
    frame: &F,
    sample: &RegionSample,
    s: f64,
    verify: Option<&ShootingOptions>,
) -> Result<Interpolation> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidInput(format!("s = {s} outside [0, 1]")));
    }
    let mapped: Vec<Result<(Vec<f64>, Option<f64>)>> = sample
        .points
        .par_iter()
        .map(|r| {
            let x = r.base();
            let z = exp_map(frame, &x, &(r.covector() * s))?;
            let err = match verify {
                Some(o) if s > 0.0 => {
                    let d = distance(frame, &x, &z, o)?.value;
                    Some((d - s * r.value).abs() / (s * r.value))
                }
                Some(_) => Some(0.0),
                None => None,
            };
            Ok((z.as_slice().to_vec(), err))
        })
        .collect();
    let mut out = Interpolation {
        s,
        points: Vec::new(),
        dropped: Vec::new(),
        distance_errors: verify.map(|_| Vec::new()),
    };
    for (r, m) in sample.points.iter().zip(mapped) {
        match m {
            Ok((z, e)) => {
                out.points.push(z);
                if let (Some(errs), Some(e)) = (out.distance_errors.as_mut(), e) {
                    errs.push(e);
                }
            }
            Err(e) => out.dropped.push(Rejection {
                point: r.target.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Trajectory of `ẏ = −∇^h f^x(y)` with the identities it must satisfy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowTrace {
    pub base: Vec<f64>,
    pub start: Vec<f64>,
    pub distance: f64,
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// Length travelled, `∫|∇^h f^x|`.
    pub theta: Vec<f64>,
    /// `d(x, φ_t(y))` by multistart shooting at each grid time.
    pub distances: Vec<f64>,
    /// `|d(x, φ_t(y)) − e^{−t}d| / d`.
    pub residuals: Vec<f64>,
    /// `|θ(t) − d(1 − e^{−t})| / d`.
    pub theta_residuals: Vec<f64>,
    /// `‖φ_t(y) − γ_x(e^{−t}, y)‖`.
    pub interpolation_gaps: Vec<f64>,
    pub max_residual: f64,
    pub max_theta_residual: f64,
    pub max_interpolation_gap: f64,
    pub ode_tol: f64,
}

/// Integrates the contraction flow from a smooth point, re-shooting the
/// gradient from warm starts at every stage.
pub fn contraction_flow<F: Frame<f64> + ?Sized>(
    frame: &F,
    start: &DistanceResult,
    t_grid: &[f64],
    opts: &ShootingOptions,
    ode_tol: f64,
) -> Result<FlowTrace> {
    if !start.is_smooth() {
        return Err(Error::NotSmoothPoint(format!(
            "{:?} is {:?}",
            start.target, start.classification
        )));
    }
    if t_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput(
            "flow times must be finite and ≥ 0".into(),
        ));
    }
    let n = frame.dim();
    let x = start.base();
    let t_end = t_grid.iter().fold(0.0f64, |a, b| a.max(*b));
    let hint = RefCell::new(start.covector());
    let failure = RefCell::new(None::<f64>);
    let mut y0 = start.target.clone();
    y0.push(0.0);
    let traj = integrate(
        |t, z: &[f64], dz: &mut [f64]| {
            let y = DVector::from_column_slice(&z[..n]);
            let solved = refine(frame, &x, &y, &hint.borrow(), opts);
            match solved {
                Ok(r) if r.is_smooth() => {
                    let g = gradient_from(frame, &r);
                    let fr = frame.frame(&y);
                    dz[..n].iter_mut().zip(g.iter()).for_each(|(d, g)| *d = -g);
                    dz[n] = fr.tr_mul(&r.end_covector()).norm();
                    *hint.borrow_mut() = r.covector();
                }
                _ => {
                    failure.borrow_mut().get_or_insert(t);
                    dz.fill(f64::NAN);
                }
            }
        },
        0.0,
        &y0,
        t_end,
        &OdeOptions::with_tol(ode_tol).recording(),
    );
    let traj = match (traj, *failure.borrow()) {
        (Ok(tr), None) => tr,
        (_, Some(t)) => return Err(Error::LeftSmoothLocus { t }),
        (Err(e), None) => return Err(e),
    };
    let d = start.value;
    let mut trace = FlowTrace {
        base: start.base.clone(),
        start: start.target.clone(),
        distance: d,
        times: t_grid.to_vec(),
        points: Vec::new(),
        theta: Vec::new(),
        distances: Vec::new(),
        residuals: Vec::new(),
        theta_residuals: Vec::new(),
        interpolation_gaps: Vec::new(),
        max_residual: 0.0,
        max_theta_residual: 0.0,
        max_interpolation_gap: 0.0,
        ode_tol,
    };
    for &t in t_grid {
        let state = traj.interpolate(t);
        let y = DVector::from_column_slice(&state[..n]);
        let decay = (-t).exp();
        let dt = distance(frame, &x, &y, opts)?.value;
        let geodesic = exp_map(frame, &x, &(start.covector() * decay))?;
        let residual = (dt - decay * d).abs() / d;
        let theta_residual = (state[n] - d * (1.0 - decay)).abs() / d;
        let gap = (&y - geodesic).norm();
        trace.max_residual = trace.max_residual.max(residual);
        trace.max_theta_residual = trace.max_theta_residual.max(theta_residual);
        trace.max_interpolation_gap = trace.max_interpolation_gap.max(gap);
        trace.points.push(state[..n].to_vec());
        trace.theta.push(state[n]);
        trace.distances.push(dt);
        trace.residuals.push(residual);
        trace.theta_residuals.push(theta_residual);
        trace.interpolation_gaps.push(gap);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McpOptions {
    pub shooting: ShootingOptions,
    /// Finite-difference step for `D_y γ_x(s, y)`, relative to the
    /// homogeneous scale.
    pub fd_step: f64,
    /// Gauss nodes per `s`-interval for `∫ div`.
    pub quadrature_nodes: usize,
    /// Largest tolerated relative gap between the two volume estimators.
    pub disagreement_limit: f64,
}

impl Default for McpOptions {
    fn default() -> Self {
        Self {
            shooting: ShootingOptions::default(),
            fd_step: 2e-3,
            quadrature_nodes: 6,
            disagreement_limit: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub drawn: usize,
    pub retained: usize,
    pub rejected_fraction: f64,
    pub measure: f64,
}

/// Comparison at one `(region, s)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McpRow {
    pub region: usize,
    pub s: f64,
    /// `μ(A_s) / ∫_A (integrand) dμ` by finite-difference Jacobians.
    pub ratio: f64,
    /// Same ratio from `exp(−∫ div)` along the minimizers.
    pub ratio_flow: f64,
    /// Monte-Carlo standard error of `ratio`.
    pub standard_error: f64,
    /// `|ratio − ratio_flow| / max(ratio, ratio_flow)`.
    pub estimator_gap: f64,
    pub retained: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Violation {
    pub region: usize,
    pub s: f64,
    pub ratio: f64,
    pub ratio_flow: f64,
    pub standard_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McpReport {
    pub model: String,
    pub base: Vec<f64>,
    pub params: ComparisonParams,
    pub s_grid: Vec<f64>,
    pub regions: Vec<RegionSummary>,
    pub rows: Vec<McpRow>,
    /// Rows where both estimators put `μ(A_s)` below the bound.
    pub violations: Vec<Violation>,
    pub max_estimator_gap: f64,
    pub dropped: Vec<Rejection>,
    pub options: McpOptions,
}

impl McpReport {
    /// `EstimatorDisagreement` if the two volume estimates differ by more
    /// than the configured limit anywhere.
    pub fn coherence(&self) -> Result<()> {
        if self.max_estimator_gap > self.options.disagreement_limit {
            return Err(Error::EstimatorDisagreement {
                gap: self.max_estimator_gap,
                limit: self.options.disagreement_limit,
            });
        }
        Ok(())
    }

    pub fn min_ratio(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.ratio.min(r.ratio_flow))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-point Jacobian factors of `y ↦ γ_x(s, y)` for every `s`: finite
/// differences and the divergence integral.
fn contraction_factors<F: Frame<f64> + ?Sized>(
    frame: &F,
    res: &DistanceResult,
    s_grid: &[f64],
    opts: &McpOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let x = res.base();
    let y = res.target();
    let p = res.covector();
    let n = frame.dim();
    let (_, scales) = stencil_scales(frame, &x, &y);
    let near = Neighborhood::new(frame, res, &opts.shooting);
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for (k, scale) in scales.iter().enumerate() {
        let h = opts.fd_step * scale;
        let mut yp = y.clone();
        yp[k] += h;
        let mut ym = y.clone();
        ym[k] -= h;
        plus.push(near.solve(frame, &yp, &opts.shooting)?.covector());
        minus.push(near.solve(frame, &ym, &opts.shooting)?.covector());
    }
    let mut det = Vec::with_capacity(s_grid.len());
    let mut density = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for k in 0..n {
            let h = opts.fd_step * scales[k];
            let zp = exp_map(frame, &x, &(&plus[k] * s))?;
            let zm = exp_map(frame, &x, &(&minus[k] * s))?;
            jac.set_column(k, &((zp - zm) / (2.0 * h)));
        }
        det.push(jac.determinant().abs());
        let z = exp_map(frame, &x, &(&p * s))?;
        density.push(log_density_increment(frame, &y, &z));
    }
    // ∫_0^{−ln s} div(γ(e^{−τ})) dτ, accumulated over decreasing s
    let (nodes, weights) = gauss_legendre(opts.quadrature_nodes);
    let mut order: Vec<usize> = (0..s_grid.len()).collect();
    order.sort_by(|&a, &b| s_grid[b].total_cmp(&s_grid[a]));
    let mut flow = vec![0.0; s_grid.len()];
    let (mut tau0, mut acc) = (0.0, 0.0);
    for idx in order {
        let tau1 = -s_grid[idx].ln();
        if tau1 > tau0 {
            let half = 0.5 * (tau1 - tau0);
            for (z, w) in nodes.iter().zip(&weights) {
                let tau = tau0 + half * (z + 1.0);
                acc += half
                    * w
                    * divergence_along(frame, &x, &(&p * (-tau).exp()), opts.shooting.flow_tol)?;
            }
            tau0 = tau1;
        }
        flow[idx] = (-acc).exp();
    }
    Ok((det, flow, density))
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Monte-Carlo comparison of `μ(A_s)` with `∫_A s[s_K(s d/√(N−1))/s_K(d/√(N−1))]^{N−1} dμ`
/// on every region sample and every `s`, with two independent estimates of
/// the Jacobian of `y ↦ γ_x(s, y)`.
pub fn mcp_check<F: Frame<f64> + Sync + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    samples: &[RegionSample],
    s_grid: &[f64],
    params: &ComparisonParams,
    opts: &McpOptions,
) -> Result<McpReport> {
    if s_grid.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
        return Err(Error::InvalidInput("s values must lie in (0, 1]".into()));
    }
    let mut report = McpReport {
        model: frame.id(),
        base: x.as_slice().to_vec(),
        params: *params,
        s_grid: s_grid.to_vec(),
        regions: Vec::new(),
        rows: Vec::new(),
        violations: Vec::new(),
        max_estimator_gap: 0.0,
        dropped: Vec::new(),
        options: opts.clone(),
    };
    for (ri, sample) in samples.iter().enumerate() {
        report.regions.push(RegionSummary {
            region: sample.region.clone(),
            drawn: sample.drawn,
            retained: sample.points.len(),
            rejected_fraction: sample.rejected_fraction(),
            measure: sample.measure,
        });
        let factors: Vec<_> = sample
            .points
            .par_iter()
            .map(|r| contraction_factors(frame, r, s_grid, opts))
            .collect();
        let mut kept = Vec::new();
        for ((r, v), f) in sample.points.iter().zip(&sample.log_density).zip(factors) {
            match f {
                Ok(f) => kept.push((r, *v, f)),
                Err(e) => report.dropped.push(Rejection {
                    point: r.target.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        let dropped = sample.points.len() - kept.len();
        if kept.is_empty() {
            continue;
        }
        for (si, &s) in s_grid.iter().enumerate() {
            let mut a = Vec::with_capacity(kept.len());
            let mut b = Vec::with_capacity(kept.len());
            let mut bound = Vec::with_capacity(kept.len());
            for (r, v, (det, flow, dv)) in &kept {
                let w = v.exp();
                a.push(det[si] * (v + dv[si]).exp());
                b.push(flow[si] * w);
                bound.push(mcp_integrand(params, r.value, s)? * w);
            }
            let (ma, se) = mean_and_se(&a);
            let (mb, _) = mean_and_se(&b);
            let (rhs, _) = mean_and_se(&bound);
            let ratio = ma / rhs;
            let ratio_flow = mb / rhs;
            let gap = (ratio - ratio_flow).abs()
                / ratio.abs().max(ratio_flow.abs()).max(f64::MIN_POSITIVE);
            report.max_estimator_gap = report.max_estimator_gap.max(gap);
            let row = McpRow {
                region: ri,
                s,
                ratio,
                ratio_flow,
                standard_error: se / rhs,
                estimator_gap: gap,
                retained: kept.len(),
                dropped,
            };
            if ratio < 1.0 && ratio_flow < 1.0 {
                report.violations.push(Violation {
                    region: ri,
                    s,
                    ratio,
                    ratio_flow,
                    standard_error: row.standard_error,
                });
            }
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Retained sphere samples to collect.
    pub samples: usize,
    pub seed: u64,
    /// Draws stop after `samples·max_draw_factor` attempts.
    pub max_draw_factor: usize,
    pub shooting: ShootingOptions,
    pub divergence: DivergenceOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            max_draw_factor: 10,
            shooting: ShootingOptions::default(),
            divergence: DivergenceOptions::default(),
        }
    }
}

/// Runs `draw(i)` for `i = 0, 1, …` in parallel batches and keeps the first
/// `count` successes in index order, stopping after `cap` attempts. Returns
/// the successes, the failures before the last kept index, and the number of
/// draws consumed.
pub fn collect_draws<T: Send>(
    count: usize,
    cap: usize,
    draw: impl Fn(u64) -> std::result::Result<T, String> + Sync,
) -> (Vec<T>, Vec<Excision>, usize) {
    let batch = (rayon::current_num_threads() * 4).max(8) as u64;
    let mut kept = Vec::with_capacity(count);
    let mut failed = Vec::new();
    let mut next = 0u64;
    while kept.len() < count && next < cap as u64 {
        let end = (next + batch).min(cap as u64);
        let drawn: Vec<_> = (next..end).into_par_iter().map(|i| (i, draw(i))).collect();
        next = end;
        for (i, d) in drawn {
            if kept.len() == count {
                next = next.min(i);
                break;
            }
            match d {
                Ok(v) => kept.push(v),
                Err(reason) => failed.push(Excision { index: i, reason }),
            }
        }
    }
    (kept, failed, next as usize)
}

/// Smooth targets `y = r·u` from `x`, `u` a uniform chart direction and
/// `r` uniform in `radii`, drawn until `count` are kept.
pub fn smooth_points<F: Frame<f64> + Sync + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    count: usize,
    radii: (f64, f64),
    seed: u64,
    opts: &ShootingOptions,
) -> (Vec<DistanceResult>, Vec<Excision>) {
    use rand::Rng;
    let (kept, failed, _) = collect_draws(count, count * 10 + 10, |i| {
        let mut rng = task_rng(seed, i);
        let u = DVector::from_vec(random_direction(&mut rng, frame.dim()));
        let y = x + u * rng.random_range(radii.0..=radii.1);
        match distance(frame, x, &y, opts) {
            Ok(r) if r.is_smooth() => Ok(r),
            Ok(r) => Err(format!("{:?}", r.classification)),
            Err(e) => Err(e.to_string()),
        }
    });
    (kept, failed)
}

/// Chart balls of radius `radius` centred at random points whose first-layer
/// part has norm at least `tube + radius`, so the balls avoid the tube
/// around the higher layers.
pub fn balls_off_axis(
    model: &Model,
    count: usize,
    radius: f64,
    tube: f64,
    seed: u64,
) -> Vec<Region> {
    use rand::Rng;
    let first = model.rank();
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        let mut rng = task_rng(seed, i);
        i += 1;
        let u = random_direction(&mut rng, model.dim());
        let r = rng.random_range(0.5..1.5);
        let center: Vec<f64> = u.iter().map(|a| a * r).collect();
        let horizontal = center[..first].iter().map(|a| a * a).sum::<f64>().sqrt();
        if horizontal >= tube + radius {
            out.push(Region::Ball { center, radius });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SphereSample {
    pub index: u64,
    pub point: Vec<f64>,
    /// Stencil divergence.
    pub divergence: f64,
    /// Divergence from the variational equations, when available.
    pub variational: Option<f64>,
    pub richardson_difference: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Excision {
    pub index: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NEstimate {
    pub model: String,
    pub n_hat: f64,
    pub argmax: Vec<f64>,
    pub argmax_index: u64,
    /// Divergence at the maximizer with half the stencil step.
    pub refined_max: f64,
    pub refinement_difference: f64,
    pub samples: Vec<SphereSample>,
    pub drawn: usize,
    pub excised: Vec<Excision>,
    pub excised_fraction: f64,
    /// `max |d(0, y) − 1|` over retained sphere points.
    pub sphere_residual: f64,
    /// `max |stencil − variational|` over retained points.
    pub max_method_gap: f64,
    pub options: EstimateOptions,
}

fn sphere_draw(
    model: &Model,
    index: u64,
    opts: &EstimateOptions,
) -> std::result::Result<(SphereSample, f64), String> {
    let n = model.dim();
    let mut rng = task_rng(opts.seed, index);
    let ray = DVector::from_vec(random_direction(&mut rng, n));
    let zero = DVector::zeros(n);
    let res = distance(model, &zero, &ray, &opts.shooting).map_err(|e| e.to_string())?;
    if res.classification == Classification::Multiple {
        return Err("Multiple".into());
    }
    let on_sphere = crate::distance::dilate_result(model, &res, 1.0 / res.value, &opts.shooting)
        .map_err(|e| e.to_string())?;
    if !on_sphere.is_smooth() {
        return Err(format!("{:?}", on_sphere.classification));
    }
    let div = divergence_from(model, &on_sphere, &opts.shooting, &opts.divergence)
        .map_err(|e| e.to_string())?;
    let variational = divergence_variational(model, &on_sphere, &opts.shooting).ok();
    Ok((
        SphereSample {
            index,
            point: on_sphere.target.clone(),
            divergence: div.divergence,
            variational,
            richardson_difference: div.richardson_difference,
        },
        (on_sphere.value - 1.0).abs(),
    ))
}

/// `N̂ = max div(∇^h f^0)` over sampled smooth points of the unit sphere.
/// Rays are uniform chart directions brought to the sphere by `δ_{1/d}`;
/// points that are not smooth or whose stencil is unstable are excised.
pub fn estimate_n(model: &Model, opts: &EstimateOptions) -> Result<NEstimate> {
    if opts.samples == 0 {
        return Err(Error::InvalidInput(
            "need at least one sphere sample".into(),
        ));
    }
    let cap = opts.samples * opts.max_draw_factor.max(1);
    let (draws, excised, drawn) = collect_draws(opts.samples, cap, |i| sphere_draw(model, i, opts));
    let sphere_residual = draws.iter().map(|d| d.1).fold(0.0, f64::max);
    let samples: Vec<SphereSample> = draws.into_iter().map(|d| d.0).collect();
    if samples.len() * 10 < drawn || samples.len() < opts.samples {
        return Err(Error::TooFewSamples {
            retained: samples.len(),
            drawn,
        });
    }
    let best = samples
        .iter()
        .max_by(|a, b| a.divergence.total_cmp(&b.divergence))
        .expect("nonempty")
        .clone();
    let zero = DVector::zeros(model.dim());
    let at_max = refine(
        model,
        &zero,
        &DVector::from_column_slice(&best.point),
        &distance(
            model,
            &zero,
            &DVector::from_column_slice(&best.point),
            &opts.shooting,
        )?
        .covector(),
        &opts.shooting,
    )?;
    let half = DivergenceOptions {
        step: opts.divergence.step / 2.0,
        ..opts.divergence.clone()
    };
    let refined_max = divergence_from(model, &at_max, &opts.shooting, &half)?.divergence;
    let max_method_gap = samples
        .iter()
        .filter_map(|s| s.variational.map(|v| (v - s.divergence).abs()))
        .fold(0.0, f64::max);
    Ok(NEstimate {
        model: model.name().to_string(),
        n_hat: best.divergence,
        argmax: best.point.clone(),
        argmax_index: best.index,
        refined_max,
        refinement_difference: (refined_max - best.divergence).abs(),
        excised_fraction: excised.len() as f64 / drawn as f64,
        drawn,
        samples,
        excised,
        sphere_residual,
        max_method_gap,
        options: opts.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceOptions {
    pub samples: usize,
    pub seed: u64,
    pub lambdas: Vec<f64>,
    /// Also compare stencil divergences.
    pub divergence: Option<DivergenceOptions>,
    pub shooting: ShootingOptions,
}

impl Default for InvarianceOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            lambdas: vec![0.5, 2.0],
            divergence: Some(DivergenceOptions::default()),
            shooting: ShootingOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariancePoint {
    pub point: Vec<f64>,
    pub lambda: f64,
    /// `|d(0, δ_λy) − λ d(0, y)| / (λ d(0, y))`.
    pub distance_deviation: f64,
    /// `|∇^h f^0(δ_λy) − δ_λ∇^h f^0(y)| / |δ_λ∇^h f^0(y)|`.
    pub gradient_deviation: f64,
    pub divergence_deviation: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub model: String,
    pub points: Vec<InvariancePoint>,
    pub skipped: Vec<Excision>,
    pub max_distance_deviation: f64,
    pub max_gradient_deviation: f64,
    pub max_divergence_deviation: Option<f64>,
    pub options: InvarianceOptions,
}

fn invariance_point(
    model: &Model,
    index: u64,
    opts: &InvarianceOptions,
) -> Result<Vec<InvariancePoint>> {
    use rand::Rng;
    let n = model.dim();
    let zero = DVector::zeros(n);
    let mut rng = task_rng(opts.seed, index);
    let dir = DVector::from_vec(random_direction(&mut rng, n));
    let y = dir * rng.random_range(0.5..1.5);
    let res = distance(model, &zero, &y, &opts.shooting)?;
    if !res.is_smooth() {
        return Err(Error::NotSmoothPoint(format!("{:?}", res.classification)));
    }
    let grad = gradient_from(model, &res);
    let div = match &opts.divergence {
        Some(d) => Some(divergence_from(model, &res, &opts.shooting, d)?.divergence),
        None => None,
    };
    let mut out = Vec::new();
    for &lambda in &opts.lambdas {
        let scaled = distance(model, &zero, &model.dilate(lambda, &y)?, &opts.shooting)?;
        if !scaled.is_smooth() {
            return Err(Error::NotSmoothPoint(format!(
                "dilate {lambda}: {:?}",
                scaled.classification
            )));
        }
        let expected = model.dilate(lambda, &grad)?;
        let divergence_deviation = match (&opts.divergence, div) {
            (Some(d), Some(v)) => {
                Some((divergence_from(model, &scaled, &opts.shooting, d)?.divergence - v).abs())
            }
            _ => None,
        };
        out.push(InvariancePoint {
            point: y.as_slice().to_vec(),
            lambda,
            distance_deviation: (scaled.value - lambda * res.value).abs() / (lambda * res.value),
            gradient_deviation: (gradient_from(model, &scaled) - &expected).norm()
                / expected.norm(),
            divergence_deviation,
        });
    }
    Ok(out)
}

/// Compares distances, gradients and divergences at `y` and `δ_λ(y)` for
/// independently shot random points.
pub fn dilation_invariance_check(
    model: &Model,
    opts: &InvarianceOptions,
) -> Result<InvarianceReport> {
    if opts.lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::NonpositiveLambda(
            opts.lambdas.iter().copied().fold(f64::INFINITY, f64::min),
        ));
    }
    let results: Vec<_> = (0..opts.samples as u64)
        .into_par_iter()
        .map(|i| (i, invariance_point(model, i, opts)))
        .collect();
    let mut report = InvarianceReport {
        model: model.name().to_string(),
        points: Vec::new(),
        skipped: Vec::new(),
        max_distance_deviation: 0.0,
        max_gradient_deviation: 0.0,
        max_divergence_deviation: opts.divergence.as_ref().map(|_| 0.0),
        options: opts.clone(),
    };
    for (i, r) in results {
        match r {
            Ok(pts) => {
                for p in pts {
                    report.max_distance_deviation =
                        report.max_distance_deviation.max(p.distance_deviation);
                    report.max_gradient_deviation =
                        report.max_gradient_deviation.max(p.gradient_deviation);
                    if let (Some(m), Some(d)) = (
                        report.max_divergence_deviation.as_mut(),
                        p.divergence_deviation,
                    ) {
                        *m = m.max(d);
                    }
                    report.points.push(p);
                }
            }
            Err(e) => report.skipped.push(Excision {
                index: i,
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub seed: u64,
    /// Ball centers to try, in order.
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
    pub points_per_region: usize,
    pub s_grid: Vec<f64>,
    pub mcp: McpOptions,
}

impl SearchOptions {
    /// Thin balls next to the vertical axis of `heisenberg(1)` at several
    /// heights and angles, then balls around horizontal points.
    pub fn heisenberg_axis(seed: u64) -> Self {
        let mut centers = Vec::new();
        for z in [0.5, -1.0, 2.0] {
            for (k, eps) in [0.15, 0.3].into_iter().enumerate() {
                let angle = 0.7 * (k as f64 + 1.0);
                centers.push(vec![eps * f64::cos(angle), eps * f64::sin(angle), z]);
            }
        }
        centers.push(vec![0.8, 0.3, 0.05]);
        centers.push(vec![-0.5, 0.9, -0.1]);
        Self {
            seed,
            centers,
            radius: 0.05,
            points_per_region: 8,
            s_grid: vec![0.5, 0.2, 0.1, 0.05],
            mcp: McpOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationSearch {
    pub found: bool,
    /// No violation found: this proves nothing about the bound.
    pub inconclusive: bool,
    pub first: Option<(Vec<f64>, Violation)>,
    pub reports: Vec<McpReport>,
}

/// Seeded search for a region and `s` with `μ(A_s) < s^N μ(A)`; stops at the
/// first ball where both estimators agree on a violation.
pub fn violation_search<F: Frame<f64> + Sync + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    params: &ComparisonParams,
    opts: &SearchOptions,
) -> Result<ViolationSearch> {
    let mut out = ViolationSearch {
        found: false,
        inconclusive: true,
        first: None,
        reports: Vec::new(),
    };
    for (i, center) in opts.centers.iter().enumerate() {
        let region = Region::Ball {
            center: center.clone(),
            radius: opts.radius,
        };
        let sample = RegionSample::draw(
            frame,
            x,
            &region,
            opts.points_per_region,
            opts.seed.wrapping_add(i as u64),
            &opts.mcp.shooting,
        )?;
        if sample.points.is_empty() {
            continue;
        }
        let report = mcp_check(frame, x, &[sample], &opts.s_grid, params, &opts.mcp)?;
        let hit = report
            .violations
            .iter()
            .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
            .cloned();
        out.reports.push(report);
        if let Some(v) = hit {
            out.found = true;
            out.inconclusive = false;
            out.first = Some((center.clone(), v));
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn integrand_examples() {
        let flat = ComparisonParams::flat(5.0).unwrap();
        assert_eq!(mcp_integrand(&flat, 1.3, 0.5).unwrap(), 0.03125);
        let hyp = ComparisonParams::new(-1.0, 2.0).unwrap();
        assert_relative_eq!(
            mcp_integrand(&hyp, 1.0, 0.5).unwrap(),
            0.5 * 0.5f64.sinh() / 1.0f64.sinh(),
            epsilon = 1e-15
        );
        let sph = ComparisonParams::new(1.0, 3.0).unwrap();
        assert_relative_eq!(mcp_integrand(&sph, 0.7, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            mcp_integrand(&sph, 5.0, 0.5),
            Err(Error::DomainViolation { .. })
        ));
        assert!(ComparisonParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn gauss_rule_integrates_polynomials() {
        let (z, w) = gauss_legendre(6);
        let integral: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(10)).sum();
        assert_relative_eq!(integral, 2.0 / 11.0, epsilon = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn ball_volumes() {
        assert_relative_eq!(ball_volume(2, 1.0), std::f64::consts::PI);
        assert_relative_eq!(ball_volume(3, 2.0), 4.0 / 3.0 * std::f64::consts::PI * 8.0);
        assert_relative_eq!(ball_volume(1, 0.5), 1.0);
    }

    #[test]
    fn abelian_interpolation_and_flow() {
        let a = Model::builtin("abelian2").unwrap();
        let opts = ShootingOptions::default();
        let x = v(&[0.1, -0.2]);
        let region = Region::Ball {
            center: vec![1.0, 0.5],
            radius: 0.2,
        };
        let sample = RegionSample::draw(&a, &x, &region, 6, 3, &opts).unwrap();
        assert_eq!(sample.points.len(), 6);
        let half = interpolate(&a, &sample, 0.5, Some(&opts)).unwrap();
        for (r, z) in sample.points.iter().zip(&half.points) {
            let expected = &x + (r.target() - &x) * 0.5;
            assert_relative_eq!(v(z), expected, epsilon = 1e-9);
        }
        assert!(half.distance_errors.unwrap().iter().all(|e| *e < 1e-8));
        let start = &sample.points[0];
        let trace = contraction_flow(
            &a,
            start,
            &[0.0, 0.5, std::f64::consts::LN_2, 2.0],
            &opts,
            1e-8,
        )
        .unwrap();
        assert!(trace.max_residual < 1e-6 && trace.max_theta_residual < 1e-6);
        let at_ln2 = v(&trace.points[2]);
        assert_relative_eq!(at_ln2, &x + (start.target() - &x) * 0.5, epsilon = 1e-6);
    }

    #[test]
    fn abelian_ratios_are_one() {
        let a = Model::builtin("abelian3").unwrap();
        let x = DVector::zeros(3);
        let opts = McpOptions::default();
        let region = Region::Ball {
            center: vec![0.5, 0.5, -0.3],
            radius: 0.2,
        };
        let sample = RegionSample::draw(&a, &x, &region, 5, 1, &opts.shooting).unwrap();
        let report = mcp_check(
            &a,
            &x,
            &[sample],
            &[0.25, 0.75],
            &ComparisonParams::flat(3.0).unwrap(),
            &opts,
        )
        .unwrap();
        for row in &report.rows {
            assert_relative_eq!(row.ratio, 1.0, epsilon = 1e-8);
            assert_relative_eq!(row.ratio_flow, 1.0, epsilon = 1e-8);
        }
        report.coherence().unwrap();
    }

    #[test]
    fn heisenberg_contraction_and_flow() {
        let h = Model::builtin("heisenberg1").unwrap();
        let x = DVector::zeros(3);
        let opts = McpOptions::default();
        let region = Region::Ball {
            center: vec![0.7, -0.4, 0.1],
            radius: 0.05,
        };
        let sample = RegionSample::draw(&h, &x, &region, 3, 2, &opts.shooting).unwrap();
        let report = mcp_check(
            &h,
            &x,
            std::slice::from_ref(&sample),
            &[0.5],
            &ComparisonParams::flat(5.0).unwrap(),
            &opts,
        )
        .unwrap();
        report.coherence().unwrap();
        assert!(report.rows[0].ratio >= 1.0 - 1e-6);
        assert!(report.rows[0].estimator_gap < 1e-4);
        let trace =
            contraction_flow(&h, &sample.points[0], &[0.3, 1.0], &opts.shooting, 1e-8).unwrap();
        assert!(trace.max_residual < 1e-4);
        assert!(trace.max_interpolation_gap < 1e-4);
    }

    #[test]
    fn abelian_sphere_estimate() {
        let a = Model::builtin("abelian2").unwrap();
        let opts = EstimateOptions {
            samples: 8,
            ..Default::default()
        };
        let est = estimate_n(&a, &opts).unwrap();
        assert_relative_eq!(est.n_hat, 2.0, epsilon = 1e-6);
        assert!(est.excised.is_empty());
        assert!(est.sphere_residual < 1e-8);
    }

    #[test]
    fn heisenberg_dilation_checks() {
        let h = Model::builtin("heisenberg1").unwrap();
        let opts = InvarianceOptions {
            samples: 2,
            ..Default::default()
        };
        let r = dilation_invariance_check(&h, &opts).unwrap();
        assert!(r.max_distance_deviation < 1e-6);
        assert!(r.max_gradient_deviation < 1e-5);
        assert!(r.max_divergence_deviation.unwrap() < 1e-3);
    }
}
