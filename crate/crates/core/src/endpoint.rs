//! Piecewise-constant controls, the end-point map `u ↦ γ_u(1)` and its
//! differential, singular controls, and support probes for near horizontal
//! semiconcavity of `d(x, ·)²`.

use crate::distance::{distance, DistanceResult, Neighborhood, ShootingOptions};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::hamiltonian::{extremal_flow, DEFAULT_FLOW_TOL};
use crate::ode::{integrate, OdeOptions};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Control constant on each of `K` equal subintervals of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    values: Vec<Vec<f64>>,
}

impl ControlPath {
    /// `values[k]` is the control on `[k/K, (k+1)/K)`.
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let m = values.first().map_or(0, |v| v.len());
        if m == 0 || values.iter().any(|v| v.len() != m) {
            return Err(Error::InvalidInput(
                "control pieces must be nonempty and of equal length".into(),
            ));
        }
        if values.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("control values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn constant(u: &[f64], pieces: usize) -> Self {
        Self {
            values: vec![u.to_vec(); pieces.max(1)],
        }
    }

    pub fn zero(rank: usize, pieces: usize) -> Self {
        Self::constant(&vec![0.0; rank], pieces)
    }

    /// Inverse of [`ControlPath::to_flat`].
    pub fn from_flat(flat: &DVector<f64>, rank: usize) -> Result<Self> {
        if rank == 0 || !flat.len().is_multiple_of(rank) {
            return Err(Error::InvalidInput(
                "flat control length is not a multiple of the rank".into(),
            ));
        }
        Self::new(flat.as_slice().chunks(rank).map(|c| c.to_vec()).collect())
    }

    pub fn pieces(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `‖u‖²_{L²} = (1/K) Σ_k |u_k|²`.
    pub fn l2_norm_squared(&self) -> f64 {
        let k = self.pieces() as f64;
        self.values.iter().flatten().map(|a| a * a).sum::<f64>() / k
    }

    /// Stacked values `(u_0, u_1, …, u_{K-1}) ∈ ℝ^{mK}`.
    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.pieces() * self.rank(),
            self.values.iter().flatten().copied(),
        )
    }

    /// Same function on a grid `factor` times finer.
    pub fn refined(&self, factor: usize) -> Self {
        let values = self
            .values
            .iter()
            .flat_map(|v| std::iter::repeat_n(v.clone(), factor.max(1)))
            .collect();
        Self { values }
    }

    /// `u + eps·v` with `v` given in flat form.
    pub fn perturbed(&self, v: &DVector<f64>, eps: f64) -> Self {
        Self::from_flat(&(self.to_flat() + v * eps), self.rank()).expect("matching shape")
    }
}

/// Sampled horizontal path of a control.
#[derive(Clone, Debug)]
pub struct ControlTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub endpoint: DVector<f64>,
}

/// Integrates `γ̇ = Σ u_i X^i(γ)` from `x` over `[0, 1]`, piece by piece.
pub fn trajectory<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    u: &ControlPath,
    tol: f64,
) -> Result<ControlTrajectory> {
    let n = frame.dim();
    let k = u.pieces();
    let mut fr = DMatrix::zeros(n, frame.rank());
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut state = x.as_slice().to_vec();
    let opts = OdeOptions::with_tol(tol).recording();
    for (piece, uk) in u.values().iter().enumerate() {
        if uk.iter().all(|a| *a == 0.0) {
            times.push((piece + 1) as f64 / k as f64);
            states.push(DVector::from_column_slice(&state));
            continue;
        }
        let t0 = piece as f64 / k as f64;
        let t1 = (piece + 1) as f64 / k as f64;
        let traj = integrate(
            |_, z: &[f64], dz: &mut [f64]| {
                frame.eval_into(z, &mut fr);
                for (r, d) in dz.iter_mut().enumerate() {
                    *d = (0..uk.len()).map(|i| fr[(r, i)] * uk[i]).sum();
                }
            },
            t0,
            &state,
            t1,
            &opts,
        )?;
        for (t, s) in traj.times.iter().zip(&traj.states).skip(1) {
            times.push(*t);
            states.push(DVector::from_column_slice(s));
        }
        state.copy_from_slice(traj.final_state());
    }
    Ok(ControlTrajectory {
        times,
        endpoint: DVector::from_column_slice(&state),
        states,
    })
}

pub fn endpoint<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    u: &ControlPath,
) -> Result<DVector<f64>> {
    Ok(trajectory(frame, x, u, DEFAULT_FLOW_TOL)?.endpoint)
}

/// Differential of the end-point map on piecewise-constant controls.
#[derive(Clone, Debug)]
pub struct EndpointDifferential {
    pub base: DVector<f64>,
    pub control: ControlPath,
    pub endpoint: DVector<f64>,
    /// `n×mK`; block `k` (columns `km..(k+1)m`) is `∂γ(1)/∂u_k`.
    pub d: DMatrix<f64>,
    /// Fundamental matrix `S(t_k)` of `Ṡ = A(t)S` at the piece boundaries.
    pub fundamental: Vec<DMatrix<f64>>,
    /// Singular values of `√K·D`, the map from `L²` controls.
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl EndpointDifferential {
    /// `D·v` for a flat control perturbation `v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.d * v
    }

    /// `t_k ↦ [S(1)S(t_{k+1})⁻¹ G_k]_{row, field}·K`, the transported frame
    /// component sampled once per piece.
    pub fn column_profile(&self, row: usize, field: usize) -> Vec<f64> {
        let m = self.control.rank();
        let k = self.control.pieces() as f64;
        (0..self.control.pieces())
            .map(|p| self.d[(row, p * m + field)] * k)
            .collect()
    }

    /// Minimal-norm solution of `D·v = b`; `RankDeficient` if `D` is not onto.
    pub fn min_norm_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if self.sigma_min <= 1e-10 * self.sigma_max {
            return Err(Error::RankDeficient {
                sigma_min: self.sigma_min,
            });
        }
        let gram = &self.d * self.d.transpose();
        let w = gram
            .cholesky()
            .ok_or(Error::RankDeficient {
                sigma_min: self.sigma_min,
            })?
            .solve(b);
        Ok(self.d.tr_mul(&w))
    }
}

/// Integrates, on each piece, the trajectory with the piece-local
/// fundamental matrix `P_k` and `G_k = ∂γ(t_{k+1})/∂u_k`; then
/// `D_k = P_{K-1}⋯P_{k+1} G_k`.
pub fn endpoint_differential<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    u: &ControlPath,
    tol: f64,
) -> Result<EndpointDifferential> {
    let (n, m) = (frame.dim(), frame.rank());
    if u.rank() != m {
        return Err(Error::InvalidInput(format!(
            "control rank {} does not match frame rank {m}",
            u.rank()
        )));
    }
    let kp = u.pieces();
    let mut fr = DMatrix::zeros(n, m);
    let mut jac = vec![DMatrix::zeros(n, n); m];
    let mut a = DMatrix::zeros(n, n);
    let dim = n + n * n + n * m;
    let mut opts = OdeOptions::with_tol(tol);
    opts.controlled = Some(n);
    let mut state = x.as_slice().to_vec();
    let mut steps = Vec::with_capacity(kp);
    let mut gains = Vec::with_capacity(kp);
    for (piece, uk) in u.values().iter().enumerate() {
        let mut y0 = vec![0.0; dim];
        y0[..n].copy_from_slice(&state);
        for j in 0..n {
            y0[n + j * n + j] = 1.0;
        }
        let t0 = piece as f64 / kp as f64;
        let t1 = (piece + 1) as f64 / kp as f64;
        let traj = integrate(
            |_, z: &[f64], dz: &mut [f64]| {
                let xz = &z[..n];
                frame.eval_into(xz, &mut fr);
                frame.jacobians_into(xz, &mut jac);
                a.fill(0.0);
                for (i, ji) in jac.iter().enumerate() {
                    if uk[i] != 0.0 {
                        a += ji * uk[i];
                    }
                }
                for r in 0..n {
                    dz[r] = (0..m).map(|i| fr[(r, i)] * uk[i]).sum();
                }
                // columns of S, then columns of G
                for c in 0..n + m {
                    let col = &z[n + c * n..n + (c + 1) * n];
                    for r in 0..n {
                        let mut acc = (0..n).map(|l| a[(r, l)] * col[l]).sum::<f64>();
                        if c >= n {
                            acc += fr[(r, c - n)];
                        }
                        dz[n + c * n + r] = acc;
                    }
                }
            },
            t0,
            &y0,
            t1,
            &opts,
        )?;
        let yf = traj.final_state();
        state.copy_from_slice(&yf[..n]);
        steps.push(DMatrix::from_column_slice(n, n, &yf[n..n + n * n]));
        gains.push(DMatrix::from_column_slice(n, m, &yf[n + n * n..]));
    }
    let mut d = DMatrix::zeros(n, m * kp);
    let mut tail = DMatrix::identity(n, n);
    for piece in (0..kp).rev() {
        d.view_mut((0, piece * m), (n, m))
            .copy_from(&(&tail * &gains[piece]));
        tail = &tail * &steps[piece];
    }
    let mut fundamental = vec![DMatrix::identity(n, n)];
    for step in &steps {
        let next = step * fundamental.last().expect("nonempty");
        fundamental.push(next);
    }
    let scaled = d.transpose() * (kp as f64).sqrt();
    let sv = scaled.singular_values();
    let sigma_max = sv.max();
    let sigma_min = if m * kp < n { 0.0 } else { sv.min() };
    Ok(EndpointDifferential {
        base: x.clone(),
        control: u.clone(),
        endpoint: DVector::from_column_slice(&state),
        d,
        fundamental,
        sigma_min,
        sigma_max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Regular,
    Singular,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub pieces: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingularReport {
    pub verdict: Verdict,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub tol: f64,
    /// One entry per grid, coarsest first.
    pub levels: Vec<RefinementLevel>,
    /// Whether every level gave the same verdict.
    pub stable: bool,
}

/// `Singular` iff `σ_min(D) ≤ tol·σ_max(D)`, checked on the given grid and
/// on successive doublings up to `max_pieces`; the finest level decides.
pub fn singular_test<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    u: &ControlPath,
    tol: f64,
    max_pieces: usize,
) -> Result<SingularReport> {
    let mut levels = Vec::new();
    let mut control = u.clone();
    loop {
        let diff = endpoint_differential(frame, x, &control, DEFAULT_FLOW_TOL)?;
        let verdict = if diff.sigma_min <= tol * diff.sigma_max {
            Verdict::Singular
        } else {
            Verdict::Regular
        };
        levels.push(RefinementLevel {
            pieces: control.pieces(),
            sigma_min: diff.sigma_min,
            sigma_max: diff.sigma_max,
            verdict,
        });
        if control.pieces() * 2 > max_pieces {
            break;
        }
        control = control.refined(2);
    }
    let last = levels.last().expect("at least one level").clone();
    Ok(SingularReport {
        verdict: last.verdict,
        sigma_min: last.sigma_min,
        sigma_max: last.sigma_max,
        tol,
        stable: levels.iter().all(|l| l.verdict == last.verdict),
        levels,
    })
}

/// Piecewise-constant control of the normal extremal from `(x, p)`, sampled
/// at piece midpoints: `u_i = ⟨p(t), X^i(γ(t))⟩`. Its `L²` energy equals
/// `2H(x, p)` up to the conservation error of the flow.
pub fn minimizing_control<F: Frame<f64> + ?Sized>(
    frame: &F,
    x: &DVector<f64>,
    p: &DVector<f64>,
    pieces: usize,
) -> Result<ControlPath> {
    let arc = extremal_flow(frame, x, p, 1.0, DEFAULT_FLOW_TOL)?;
    let pieces = pieces.max(1);
    let values = (0..pieces)
        .map(|k| {
            let t = (k as f64 + 0.5) / pieces as f64;
            let (xt, pt) = arc.at(t);
            frame.frame(&xt).tr_mul(&pt).as_slice().to_vec()
        })
        .collect();
    ControlPath::new(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportOptions {
    /// Probe radius `r` in `v ∈ ℝ^m`.
    pub radius: f64,
    /// Lattice points per half-axis; spacing is `radius / grid`.
    pub grid: usize,
    /// Allowed excess of `d(x, φ(v))² − ψ(v)`.
    pub slack: f64,
    pub pieces: usize,
    pub shooting: ShootingOptions,
}

impl Default for SupportOptions {
    fn default() -> Self {
        let shooting = ShootingOptions::default();
        Self {
            radius: 0.1,
            grid: 2,
            slack: 2.0 * shooting.tol,
            pieces: 128,
            shooting,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSample {
    pub v: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: f64,
    pub dist_sq: f64,
    /// `d(x, φ(v))² − ψ(v)`.
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportProbe {
    pub base: Vec<f64>,
    pub target: Vec<f64>,
    pub distance: f64,
    pub radius: f64,
    pub spacing: f64,
    pub samples: Vec<ProbeSample>,
    /// `‖v^i‖_{L²}` of the correction controls.
    pub correction_norms: Vec<f64>,
    /// `ψ(0) − d(x, y)²`, the discretization gap of the control.
    pub psi0_gap: f64,
    /// `max_i |∂_i φ(0) − X^i(y)|` by central differences on the lattice.
    pub tangent_error: f64,
    /// Diagonal of the lattice Hessian of the gap function at `0`.
    pub gap_hessian: Vec<f64>,
    pub c_phi: [f64; 3],
    pub c_psi: [f64; 3],
    /// Maximum of the `C²` proxies and of the correction norms.
    pub c_estimate: f64,
    pub max_gap: f64,
    pub violations: Vec<ProbeSample>,
}

fn lattice(m: usize, g: usize, radius: f64) -> Vec<Vec<i64>> {
    let g = g as i64;
    let mut out: Vec<Vec<i64>> = vec![vec![]];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|p| {
                (-g..=g).map(move |j| {
                    let mut q = p.clone();
                    q.push(j);
                    q
                })
            })
            .collect();
    }
    let h = radius / g as f64;
    out.retain(|p| {
        p.iter().map(|&j| (j as f64 * h).powi(2)).sum::<f64>() <= radius * radius * (1.0 + 1e-12)
    });
    out
}

/// Upper support pair `(φ, ψ)` at `y` built from a minimizing control `u`.
///
/// `u` is first corrected so that `E(u) = y` exactly on its grid; then
/// `v^i = D⁺X^i(y)` and `φ(v) = E(u + Σ v_i v^i)`, `ψ(v) = ‖u + Σ v_i v^i‖²`
/// are probed on a lattice in the ball of radius `r`.
pub fn support_functions<F: Frame<f64> + ?Sized>(
    frame: &F,
    target: &DistanceResult,
    u: &ControlPath,
    opts: &SupportOptions,
) -> Result<SupportProbe> {
    let x = target.base();
    let y = target.target();
    let m = frame.rank();
    let tol = DEFAULT_FLOW_TOL;
    let mut control = u.clone();
    let mut diff = endpoint_differential(frame, &x, &control, tol)?;
    for _ in 0..8 {
        let miss = &diff.endpoint - &y;
        if miss.norm() <= 1e-13 * (1.0 + y.norm()) {
            break;
        }
        let step = diff.min_norm_solve(&miss)?;
        control = control.perturbed(&step, -1.0);
        diff = endpoint_differential(frame, &x, &control, tol)?;
    }
    let base_flat = control.to_flat();
    let fr = frame.frame(&y);
    let corrections: Vec<DVector<f64>> = (0..m)
        .map(|i| diff.min_norm_solve(&fr.column(i).into_owned()))
        .collect::<Result<_>>()?;
    let kp = control.pieces() as f64;
    let correction_norms: Vec<f64> = corrections.iter().map(|c| c.norm() / kp.sqrt()).collect();

    let near = Neighborhood::new(frame, target, &opts.shooting).with_max_jump(f64::INFINITY);
    let spacing = opts.radius / opts.grid as f64;
    let points = lattice(m, opts.grid, opts.radius);
    let mut samples = Vec::with_capacity(points.len());
    let mut index = std::collections::HashMap::new();
    for idx in &points {
        let v: Vec<f64> = idx.iter().map(|&j| j as f64 * spacing).collect();
        let mut flat = base_flat.clone();
        for (vi, ci) in v.iter().zip(&corrections) {
            flat += ci * *vi;
        }
        let w = ControlPath::from_flat(&flat, m)?;
        let phi = trajectory(frame, &x, &w, tol)?.endpoint;
        let psi = w.l2_norm_squared();
        let dist_sq = if idx.iter().all(|&j| j == 0) {
            target.value * target.value
        } else {
            let r = near.solve(frame, &phi, &opts.shooting)?;
            r.value * r.value
        };
        index.insert(idx.clone(), samples.len());
        samples.push(ProbeSample {
            v,
            phi: phi.as_slice().to_vec(),
            psi,
            dist_sq,
            gap: dist_sq - psi,
        });
    }

    // lattice finite differences
    let at = |idx: &[i64]| index.get(idx).map(|&s| &samples[s]);
    let shift = |idx: &[i64], axis: usize, by: i64| {
        let mut q = idx.to_vec();
        q[axis] += by;
        q
    };
    let mut c_phi = [0.0f64; 3];
    let mut c_psi = [0.0f64; 3];
    for s in &samples {
        c_phi[0] = c_phi[0].max(DVector::from_column_slice(&s.phi).norm());
        c_psi[0] = c_psi[0].max(s.psi.abs());
    }
    let vecd = |s: &ProbeSample| DVector::from_column_slice(&s.phi);
    for idx in &points {
        let centre = at(idx).expect("lattice point");
        for i in 0..m {
            let (Some(pi), Some(mi)) = (at(&shift(idx, i, 1)), at(&shift(idx, i, -1))) else {
                continue;
            };
            c_phi[1] = c_phi[1].max(((vecd(pi) - vecd(mi)) / (2.0 * spacing)).norm());
            c_psi[1] = c_psi[1].max(((pi.psi - mi.psi) / (2.0 * spacing)).abs());
            let second = (vecd(pi) + vecd(mi) - vecd(centre) * 2.0) / (spacing * spacing);
            c_phi[2] = c_phi[2].max(second.norm());
            c_psi[2] =
                c_psi[2].max(((pi.psi + mi.psi - 2.0 * centre.psi) / (spacing * spacing)).abs());
            for j in i + 1..m {
                let corners = [
                    at(&shift(&shift(idx, i, 1), j, 1)),
                    at(&shift(&shift(idx, i, 1), j, -1)),
                    at(&shift(&shift(idx, i, -1), j, 1)),
                    at(&shift(&shift(idx, i, -1), j, -1)),
                ];
                if let [Some(pp), Some(pm), Some(mp), Some(mm)] = corners {
                    let h2 = 4.0 * spacing * spacing;
                    let mixed = (vecd(pp) - vecd(pm) - vecd(mp) + vecd(mm)) / h2;
                    c_phi[2] = c_phi[2].max(mixed.norm());
                    c_psi[2] = c_psi[2].max(((pp.psi - pm.psi - mp.psi + mm.psi) / h2).abs());
                }
            }
        }
    }
    let origin = vec![0i64; m];
    let zero = at(&origin).expect("origin is a lattice point");
    let mut tangent_error = 0.0f64;
    let mut gap_hessian = Vec::with_capacity(m);
    for i in 0..m {
        let (pi, mi) = (
            at(&shift(&origin, i, 1)).expect("axis"),
            at(&shift(&origin, i, -1)).expect("axis"),
        );
        let slope = (vecd(pi) - vecd(mi)) / (2.0 * spacing);
        tangent_error = tangent_error.max((slope - fr.column(i)).norm());
        gap_hessian.push((pi.gap + mi.gap - 2.0 * zero.gap) / (spacing * spacing));
    }
    let max_gap = samples
        .iter()
        .map(|s| s.gap)
        .fold(f64::NEG_INFINITY, f64::max);
    let violations: Vec<ProbeSample> = samples
        .iter()
        .filter(|s| s.gap > opts.slack)
        .cloned()
        .collect();
    let c_estimate = c_phi
        .iter()
        .chain(&c_psi)
        .chain(&correction_norms)
        .fold(0.0f64, |a, b| a.max(*b));
    Ok(SupportProbe {
        base: target.base.clone(),
        target: target.target.clone(),
        distance: target.value,
        radius: opts.radius,
        spacing,
        psi0_gap: zero.psi - target.value * target.value,
        samples,
        correction_norms,
        tangent_error,
        gap_hessian,
        c_phi,
        c_psi,
        c_estimate,
        max_gap,
        violations,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub point: Vec<f64>,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointSummary {
    pub point: Vec<f64>,
    pub distance: f64,
    pub c_estimate: f64,
    /// Largest second-difference proxy, `max(c_phi[2], c_psi[2])`.
    pub second_order: f64,
    pub max_gap: f64,
    pub max_correction_norm: f64,
    pub tangent_error: f64,
    pub psi0_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemiconcavityReport {
    pub c_estimate: f64,
    /// Maximum of the per-point second-difference proxies.
    pub second_order: f64,
    pub violations: Vec<(Vec<f64>, ProbeSample)>,
    pub per_point: Vec<PointSummary>,
    pub skipped: Vec<SkippedPoint>,
    pub options: SupportOptions,
}

/// Runs [`support_functions`] at every smooth target; other targets and
/// per-point failures are recorded in `skipped`.
pub fn semiconcavity_certificate<F: Frame<f64> + ?Sized>(
    frame: &F,
    targets: &[DistanceResult],
    opts: &SupportOptions,
) -> SemiconcavityReport {
    let mut report = SemiconcavityReport {
        c_estimate: 0.0,
        second_order: 0.0,
        violations: Vec::new(),
        per_point: Vec::new(),
        skipped: Vec::new(),
        options: opts.clone(),
    };
    for t in targets {
        if !t.is_smooth() {
            report.skipped.push(SkippedPoint {
                point: t.target.clone(),
                reason: format!("{:?}", t.classification),
            });
            continue;
        }
        let probe = minimizing_control(frame, &t.base(), &t.covector(), opts.pieces)
            .and_then(|u| support_functions(frame, t, &u, opts));
        match probe {
            Ok(p) => {
                let second_order = p.c_phi[2].max(p.c_psi[2]);
                report.c_estimate = report.c_estimate.max(p.c_estimate);
                report.second_order = report.second_order.max(second_order);
                for v in &p.violations {
                    report.violations.push((p.target.clone(), v.clone()));
                }
                report.per_point.push(PointSummary {
                    point: p.target.clone(),
                    distance: p.distance,
                    c_estimate: p.c_estimate,
                    second_order,
                    max_gap: p.max_gap,
                    max_correction_norm: p.correction_norms.iter().fold(0.0, |a, b| a.max(*b)),
                    tangent_error: p.tangent_error,
                    psi0_gap: p.psi0_gap,
                });
            }
            Err(e) => report.skipped.push(SkippedPoint {
                point: t.target.clone(),
                reason: e.to_string(),
            }),
        }
    }
    report
}

/// Targets in the annulus `r0 ≤ d(0, y) ≤ r1` of a Carnot model, with
/// first-layer norm at least `tube` (away from the vertical axis). Rays are
/// drawn from `seed`, shot once, and dilated to a uniform radius.
pub fn annulus_targets(
    model: &crate::Model,
    r0: f64,
    r1: f64,
    tube: f64,
    count: usize,
    seed: u64,
    opts: &ShootingOptions,
) -> Result<Vec<DistanceResult>> {
    use rand::Rng;
    if !(r0 > 0.0 && r1 >= r0) {
        return Err(Error::InvalidInput(format!(
            "annulus needs 0 < r0 ≤ r1, got {r0}, {r1}"
        )));
    }
    let n = model.dim();
    let zero = DVector::zeros(n);
    let mut out = Vec::with_capacity(count);
    let mut index = 0u64;
    while out.len() < count {
        if index > 100 * count as u64 + 100 {
            return Err(Error::TooFewSamples {
                retained: out.len(),
                drawn: index as usize,
            });
        }
        let mut rng = crate::sampling::task_rng(seed, index);
        index += 1;
        let ray = DVector::from_vec(crate::sampling::random_direction(&mut rng, n));
        let radius = rng.random_range(r0..=r1);
        let Ok(res) = distance(model, &zero, &ray, opts) else {
            continue;
        };
        let lambda = radius / res.value;
        let y = model.dilate(lambda, &ray)?;
        let horizontal = y
            .iter()
            .zip(model.weights())
            .filter(|(_, &d)| d == 1)
            .map(|(a, _)| a * a)
            .sum::<f64>();
        if horizontal.sqrt() < tube {
            continue;
        }
        if let Ok(scaled) = crate::distance::dilate_result(model, &res, lambda, opts) {
            out.push(scaled);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// `(∫h)² / (τ ∫h²)`.
    pub nu: f64,
    pub integral: f64,
    pub integral_sq: f64,
    /// `h(0) ≠ 0`, outside the setting where `ν < 1` is expected.
    pub nonzero_start: bool,
    /// `ν` at the Cauchy–Schwarz bound, i.e. `h` numerically constant.
    pub saturated: bool,
}

fn simpson(values: &[f64], tau: f64) -> f64 {
    let intervals = values.len() - 1;
    let h = tau / intervals as f64;
    let mut acc = values[0] + values[intervals];
    for (i, v) in values.iter().enumerate().take(intervals).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// Cauchy–Schwarz ratio of `h` sampled at `N+1` equispaced points of
/// `[0, τ]` (`N` even), by composite Simpson quadrature. Fails with
/// `DegenerateDenominator` when `∫h²` vanishes; see [`gap_ratio`].
pub fn cauchy_schwarz_gap(samples: &[f64], tau: f64) -> Result<GapEstimate> {
    if samples.len() < 3 || samples.len().is_multiple_of(2) || !(tau > 0.0) {
        return Err(Error::InvalidInput(
            "need an odd number (≥ 3) of samples and τ > 0".into(),
        ));
    }
    let integral = simpson(samples, tau);
    let squares: Vec<f64> = samples.iter().map(|h| h * h).collect();
    let integral_sq = simpson(&squares, tau);
    let scale = samples.iter().fold(0.0f64, |a, h| a.max(h.abs()));
    if integral_sq <= 1e-300 || integral_sq <= 1e-24 * scale * scale * tau {
        return Err(Error::DegenerateDenominator(integral_sq));
    }
    let nu = (integral * integral / (tau * integral_sq)).clamp(0.0, 1.0);
    Ok(GapEstimate {
        nu,
        integral,
        integral_sq,
        nonzero_start: samples[0].abs() > 1e-12 * scale.max(1e-300),
        saturated: nu >= 1.0 - 1e-12,
    })
}

/// `ν` for `h` on `[0, τ]` with `intervals` Simpson intervals; `h ≡ 0` gives
/// `0`, as the inequality then holds for every `ν`.
pub fn gap_ratio(h: impl Fn(f64) -> f64, tau: f64, intervals: usize) -> Result<f64> {
    let intervals = intervals.max(2) + intervals % 2;
    let samples: Vec<f64> = (0..=intervals)
        .map(|i| h(tau * i as f64 / intervals as f64))
        .collect();
    match cauchy_schwarz_gap(&samples, tau) {
        Ok(g) => Ok(g.nu),
        Err(Error::DegenerateDenominator(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
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
    fn trajectories_of_constant_controls() {
        let a = Model::builtin("abelian3").unwrap();
        let e = endpoint(
            &a,
            &v(&[1.0, 2.0, 3.0]),
            &ControlPath::constant(&[1.0, 0.0, 0.0], 4),
        )
        .unwrap();
        assert_relative_eq!(e, v(&[2.0, 2.0, 3.0]), epsilon = 1e-12);
        let h = Model::builtin("heisenberg1").unwrap();
        let e = endpoint(&h, &v(&[0.0; 3]), &ControlPath::constant(&[1.0, 0.0], 8)).unwrap();
        assert_relative_eq!(e, v(&[1.0, 0.0, 0.0]), epsilon = 1e-12);
        let x = v(&[0.3, -0.2, 0.9]);
        assert_eq!(endpoint(&h, &x, &ControlPath::zero(2, 5)).unwrap(), x);
    }

    #[test]
    fn l2_norm_and_flattening() {
        let u = ControlPath::new(vec![vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_relative_eq!(u.l2_norm_squared(), 2.5);
        assert_eq!(ControlPath::from_flat(&u.to_flat(), 2).unwrap(), u);
        assert_relative_eq!(u.refined(3).l2_norm_squared(), 2.5);
        assert!(ControlPath::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn abelian_differential_is_time_average() {
        let a = Model::builtin("abelian2").unwrap();
        let u = ControlPath::constant(&[0.5, -1.0], 4);
        let d = endpoint_differential(&a, &v(&[0.0, 0.0]), &u, 1e-12).unwrap();
        let w = v(&[1.0, 0.0, 2.0, 0.0, 3.0, 1.0, 4.0, 3.0]);
        assert_relative_eq!(d.apply(&w), v(&[2.5, 1.0]), epsilon = 1e-12);
    }

    #[test]
    fn heisenberg_differential_matches_finite_differences() {
        let h = Model::builtin("heisenberg1").unwrap();
        let u = ControlPath::new(vec![vec![1.0, 0.3], vec![-0.4, 0.8], vec![0.2, -1.1]]).unwrap();
        let x = v(&[0.1, 0.2, -0.3]);
        let d = endpoint_differential(&h, &x, &u, 1e-12).unwrap();
        let w = v(&[0.3, -0.2, 0.5, 0.1, -0.7, 0.4]);
        let eps = 1e-5;
        let fd = (endpoint(&h, &x, &u.perturbed(&w, eps)).unwrap()
            - endpoint(&h, &x, &u.perturbed(&w, -eps)).unwrap())
            / (2.0 * eps);
        let dv = d.apply(&w);
        assert!((&dv - &fd).norm() / dv.norm() < 1e-7);
        assert_relative_eq!(d.endpoint, endpoint(&h, &x, &u).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn singular_controls() {
        let h = Model::builtin("heisenberg1").unwrap();
        let zero = singular_test(&h, &v(&[0.0; 3]), &ControlPath::zero(2, 16), 1e-8, 32).unwrap();
        assert_eq!(zero.verdict, Verdict::Singular);
        let line = singular_test(
            &h,
            &v(&[0.0; 3]),
            &ControlPath::constant(&[1.0, 0.0], 16),
            1e-8,
            64,
        )
        .unwrap();
        assert_eq!(line.verdict, Verdict::Regular);
        assert!(line.stable);
        assert_eq!(line.levels.len(), 3);
        let e = Model::builtin("engel").unwrap();
        let abnormal = singular_test(
            &e,
            &v(&[0.0; 4]),
            &ControlPath::constant(&[0.0, 1.0], 16),
            1e-8,
            64,
        )
        .unwrap();
        assert_eq!(abnormal.verdict, Verdict::Singular);
        assert!(abnormal.stable);
    }

    #[test]
    fn straight_minimizing_control() {
        let h = Model::builtin("heisenberg1").unwrap();
        let u = minimizing_control(&h, &v(&[0.0; 3]), &v(&[1.0, 0.0, 0.0]), 8).unwrap();
        for uk in u.values() {
            assert_relative_eq!(uk[0], 1.0, epsilon = 1e-12);
            assert!(uk[1].abs() < 1e-12);
        }
        let a = Model::builtin("abelian2").unwrap();
        let u = minimizing_control(&a, &v(&[0.0, 0.0]), &v(&[0.3, -0.4]), 4).unwrap();
        assert_eq!(u, ControlPath::constant(&[0.3, -0.4], 4));
    }

    #[test]
    fn support_probe_at_horizontal_point() {
        let h = Model::builtin("heisenberg1").unwrap();
        let opts = SupportOptions::default();
        let target = distance(&h, &v(&[0.0; 3]), &v(&[1.0, 0.0, 0.0]), &opts.shooting).unwrap();
        let u = minimizing_control(&h, &target.base(), &target.covector(), opts.pieces).unwrap();
        let probe = support_functions(&h, &target, &u, &opts).unwrap();
        assert!(probe.max_gap <= 1e-4);
        assert!(probe.violations.is_empty());
        assert!(probe.tangent_error < 1e-3);
        assert!(probe.c_estimate.is_finite());
        let origin = probe
            .samples
            .iter()
            .find(|s| s.v.iter().all(|a| *a == 0.0))
            .unwrap();
        assert_relative_eq!(
            DVector::from_column_slice(&origin.phi),
            v(&[1.0, 0.0, 0.0]),
            epsilon = 1e-10
        );
    }

    #[test]
    fn abelian_support_gap_vanishes() {
        let a = Model::builtin("abelian2").unwrap();
        let opts = SupportOptions::default();
        let target = distance(&a, &v(&[0.0, 0.0]), &v(&[0.6, 0.8]), &opts.shooting).unwrap();
        let u = minimizing_control(&a, &target.base(), &target.covector(), 16).unwrap();
        let probe = support_functions(&a, &target, &u, &opts).unwrap();
        assert!(probe.samples.iter().all(|s| s.gap.abs() < 1e-9));
    }

    #[test]
    fn multiple_points_are_skipped() {
        let h = Model::builtin("heisenberg1").unwrap();
        let opts = SupportOptions::default();
        let vertical = distance(&h, &v(&[0.0; 3]), &v(&[0.0, 0.0, 1.0]), &opts.shooting).unwrap();
        let report = semiconcavity_certificate(&h, &[vertical], &opts);
        assert_eq!(report.skipped.len(), 1);
        assert!(report.per_point.is_empty());
    }

    #[test]
    fn cauchy_schwarz_examples() {
        assert_relative_eq!(gap_ratio(|t| t, 1.0, 100).unwrap(), 0.75, epsilon = 1e-12);
        assert_relative_eq!(
            gap_ratio(|t| t * t, 0.5, 1000).unwrap(),
            5.0 / 9.0,
            epsilon = 1e-10
        );
        assert_eq!(gap_ratio(|_| 0.0, 1.0, 10).unwrap(), 0.0);
        assert!(matches!(
            cauchy_schwarz_gap(&[0.0; 5], 1.0),
            Err(Error::DegenerateDenominator(_))
        ));
        let flat = cauchy_schwarz_gap(&[2.0; 5], 1.0).unwrap();
        assert!(flat.saturated && flat.nonzero_start);
    }
}
