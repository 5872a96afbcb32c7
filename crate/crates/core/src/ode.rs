//! Adaptive Dormand–Prince 5(4) integrator with PI step-size control and
//! cubic Hermite dense output.

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions<T> {
    pub rtol: T,
    pub atol: T,
    /// Smallest admissible step before reporting underflow.
    pub h_min: T,
    pub max_steps: usize,
    /// Keep every accepted step for dense output.
    pub record: bool,
    /// Only the leading components enter the error estimate (all if `None`).
    pub controlled: Option<usize>,
}

impl<T: Real> OdeOptions<T> {
    pub fn with_tol(tol: T) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            h_min: lit(1e-14),
            max_steps: 200_000,
            record: false,
            controlled: None,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integration result. When recording, `times`, `states` and `slopes` hold
/// every accepted step (including both endpoints); otherwise only endpoints.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub slopes: Vec<Vec<T>>,
    pub stats: OdeStats,
}

impl<T: Real> Trajectory<T> {
    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("nonempty trajectory")
    }

    /// Cubic Hermite interpolation at `t` (clamped to the integration span).
    pub fn interpolate(&self, t: T) -> Vec<T> {
        let times = &self.times;
        let last = times.len() - 1;
        if last == 0 {
            return self.states[0].clone();
        }
        let forward = times[last] >= times[0];
        let key = |s: T| if forward { s } else { -s };
        let tk = key(t);
        let idx = match times.iter().position(|&s| key(s) >= tk) {
            Some(0) => 1,
            Some(i) => i,
            None => last,
        };
        let (t0, t1) = (times[idx - 1], times[idx]);
        let h = t1 - t0;
        let s = ((t - t0) / h).max(T::zero()).min(T::one());
        let s2 = s * s;
        let s3 = s2 * s;
        let two = lit::<T>(2.0);
        let three = lit::<T>(3.0);
        let h00 = two * s3 - three * s2 + T::one();
        let h10 = s3 - two * s2 + s;
        let h01 = -two * s3 + three * s2;
        let h11 = s3 - s2;
        let (y0, y1) = (&self.states[idx - 1], &self.states[idx]);
        let (f0, f1) = (&self.slopes[idx - 1], &self.slopes[idx]);
        (0..y0.len())
            .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
            .collect()
    }
}

// Dormand–Prince coefficients
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<T, F>(
    mut f: F,
    t0: T,
    y0: &[T],
    t1: T,
    opts: &OdeOptions<T>,
) -> Result<Trajectory<T>>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]),
{
    let dim = y0.len();
    let ctl = opts.controlled.unwrap_or(dim).min(dim);
    let mut stats = OdeStats::default();
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<T>> = vec![vec![T::zero(); dim]; 7];
    f(t0, &y, &mut k[0]);
    stats.evaluations += 1;
    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![y.clone()],
        slopes: vec![k[0].clone()],
        stats: OdeStats::default(),
    };
    let span = t1 - t0;
    if span == T::zero() {
        traj.stats = stats;
        return Ok(traj);
    }
    let dir = span.signum();
    let a: Vec<Vec<T>> = A
        .iter()
        .map(|r| r.iter().map(|&v| lit(v)).collect())
        .collect();
    let c: Vec<T> = C.iter().map(|&v| lit(v)).collect();
    let e: Vec<T> = B5.iter().zip(B4).map(|(&p, q)| lit(p - q)).collect();

    let scale_of = |y: &[T], i: usize| opts.atol + opts.rtol * y[i].abs();
    // initial step (Hairer–Wanner heuristic)
    let mut h = {
        let d0 = rms(ctl, |i| y[i] / scale_of(&y, i));
        let d1 = rms(ctl, |i| k[0][i] / scale_of(&y, i));
        let h0 = if d0 < lit(1e-5) || d1 < lit(1e-5) {
            lit(1e-6)
        } else {
            lit::<T>(0.01) * d0 / d1
        };
        h0.min(span.abs())
    };
    let safety = lit::<T>(0.9);
    let alpha = lit::<T>(0.17);
    let beta = lit::<T>(0.04);
    let mut err_prev = lit::<T>(1e-4);
    let mut t = t0;
    let mut ytmp = vec![T::zero(); dim];
    let mut ynew = vec![T::zero(); dim];
    let mut last_rejected = false;

    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= T::zero() {
            break;
        }
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::StepSizeUnderflow { t: to_f64(t) });
        }
        let mut final_step = false;
        if h >= remaining {
            h = remaining;
            final_step = true;
        }
        let hs = h * dir;
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = T::zero();
                for j in 0..s {
                    if a[s][j] != T::zero() {
                        acc += a[s][j] * k[j][i];
                    }
                }
                ytmp[i] = y[i] + hs * acc;
            }
            f(t + c[s] * hs, &ytmp, &mut k[s]);
            stats.evaluations += 1;
        }
        // 5th-order solution equals the last stage input (FSAL)
        ynew.copy_from_slice(&ytmp);
        let err = rms(ctl, |i| {
            let mut acc = T::zero();
            for s in 0..7 {
                acc += e[s] * k[s][i];
            }
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            hs * acc / sc
        });
        if !err.is_finite() || ynew.iter().any(|v| !v.is_finite()) {
            if h <= opts.h_min {
                return Err(Error::Nonfinite { t: to_f64(t) });
            }
            h *= lit(0.25);
            stats.rejected += 1;
            last_rejected = true;
            continue;
        }
        if err <= T::one() {
            t = if final_step { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            k.swap(0, 6);
            stats.accepted += 1;
            if opts.record || final_step {
                traj.times.push(t);
                traj.states.push(y.clone());
                traj.slopes.push(k[0].clone());
            }
            let mut fac = if err == T::zero() {
                lit(5.0)
            } else {
                safety * err.powf(-alpha) * err_prev.powf(beta)
            };
            fac = fac.min(lit(5.0)).max(lit(0.2));
            if last_rejected {
                fac = fac.min(T::one());
            }
            err_prev = err.max(lit(1e-4));
            h *= fac;
            last_rejected = false;
        } else {
            let fac = (safety * err.powf(-alpha)).max(lit(0.2));
            h *= fac;
            stats.rejected += 1;
            last_rejected = true;
            if h < opts.h_min {
                return Err(Error::StepSizeUnderflow { t: to_f64(t) });
            }
        }
    }
    if !opts.record && traj.times.len() > 2 {
        let n = traj.times.len();
        traj.times.drain(1..n - 1);
        traj.states.drain(1..n - 1);
        traj.slopes.drain(1..n - 1);
    }
    traj.stats = stats;
    Ok(traj)
}

fn rms<T: Real>(dim: usize, f: impl Fn(usize) -> T) -> T {
    let mut s = T::zero();
    for i in 0..dim {
        let v = f(i);
        s += v * v;
    }
    (s / lit::<T>(dim.max(1) as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_accuracy_and_dense_output() {
        let opts = OdeOptions::with_tol(1e-10).recording();
        let traj = integrate(
            |_, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &[1.0, 0.0],
            3.0,
            &opts,
        )
        .unwrap();
        let yf = traj.final_state();
        assert!((yf[0] - 3.0f64.cos()).abs() < 1e-9);
        assert!((yf[1] + 3.0f64.sin()).abs() < 1e-9);
        for &t in &[0.1, 0.77, 1.5, 2.9] {
            let y = traj.interpolate(t);
            assert!((y[0] - f64::cos(t)).abs() < 1e-6, "t={t}");
        }
        assert!(traj.stats.accepted > 5);
    }

    #[test]
    fn backward_integration() {
        let opts = OdeOptions::with_tol(1e-10);
        let traj = integrate(
            |_, y: &[f64], dy: &mut [f64]| dy[0] = y[0],
            1.0,
            &[1.0],
            0.0,
            &opts,
        )
        .unwrap();
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(traj.times.len(), 2);
    }

    #[test]
    fn blow_up_is_reported() {
        let opts = OdeOptions::with_tol(1e-8);
        let res = integrate(
            |_, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0],
            0.0,
            &[1.0],
            2.0,
            &opts,
        );
        assert!(matches!(
            res,
            Err(Error::StepSizeUnderflow { .. }) | Err(Error::Nonfinite { .. })
        ));
    }

    #[test]
    fn zero_span_returns_initial_state() {
        let opts = OdeOptions::with_tol(1e-8);
        let traj = integrate(
            |_, _: &[f64], dy: &mut [f64]| dy[0] = 1.0,
            0.5,
            &[2.0],
            0.5,
            &opts,
        )
        .unwrap();
        assert_eq!(traj.final_state(), &[2.0]);
    }
}
