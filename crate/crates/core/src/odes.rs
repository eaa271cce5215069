//! Mean-field ODEs `dx̂/dt = Σ_f ν_f·r_f(x̂)`: integration, fixpoints and basins.
//!
//! The integrator is an explicit Dormand–Prince 5(4) pair with per-step error
//! control. States are never projected during integration; output points are
//! clipped to the simplex and the defect is recorded.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pctmc::{check_simplex, Pctmc};

/// `Σ_f ν_f·r_f(x̂)` written into `out`.
pub fn vector_field_into(p: &Pctmc, x: &[f64], out: &mut [f64]) -> Result<()> {
    out.iter_mut().for_each(|v| *v = 0.0);
    let inv_n = 1.0 / p.size() as f64;
    for (k, t) in p.transitions().iter().enumerate() {
        let flow = p.rate(k, x)? * inv_n;
        out[t.from] -= flow;
        out[t.to] += flow;
    }
    Ok(())
}

pub fn vector_field(p: &Pctmc, x: &[f64]) -> Result<Vec<f64>> {
    check_simplex(x, p.n_states())?;
    let mut out = vec![0.0; p.n_states()];
    vector_field_into(p, x, &mut out)?;
    Ok(out)
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Output stride in time units; `None` records every accepted step.
    pub sample_interval: Option<f64>,
    /// Stop once `‖dx̂/dt‖∞` drops below this value.
    pub settle: Option<f64>,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            sample_interval: None,
            settle: None,
            max_steps: 5_000_000,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if let Some(dt) = self.sample_interval {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::Config(format!(
                    "sample interval must be positive, got {dt}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub solver: &'static str,
    pub options: SolverOptions,
    pub model_hash: String,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Largest simplex defect removed by output clipping.
    pub max_clip_defect: f64,
    /// Set when the settle criterion ended the run before the horizon.
    pub settled_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.points.last().expect("trajectory has at least the initial point")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least the initial point")
    }

    /// Right-continuous lookup: the last recorded point at or before `t`.
    pub fn at(&self, t: f64) -> &[f64] {
        let k = self.times.partition_point(|&s| s <= t);
        &self.points[k.saturating_sub(1)]
    }
}

/// Clips negatives to zero and renormalizes; returns the defect removed.
fn clip_to_simplex(x: &[f64]) -> (Vec<f64>, f64) {
    let sum: f64 = x.iter().sum();
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let defect = (sum - 1.0).abs().max((-min).max(0.0));
    let mut out: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    (out, defect)
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
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
// Difference between the 5th- and 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
struct RunStats {
    accepted: usize,
    rejected: usize,
    stopped_at: Option<f64>,
}

/// Runs the solver from `x0` to `t_end`. With `targets`, steps are shortened
/// to land on each target and `sink` sees only those; without, `sink` sees
/// every accepted step. `sink` returns false to stop the run.
fn run<S>(
    p: &Pctmc,
    x0: &[f64],
    t_end: f64,
    targets: Option<&[f64]>,
    opts: &SolverOptions,
    mut sink: S,
) -> Result<RunStats>
where
    S: FnMut(f64, &[f64]) -> bool,
{
    let every_step = targets.is_none();
    let end_only = [t_end];
    let targets = targets.unwrap_or(&end_only);
    let n = x0.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut y = x0.to_vec();
    let mut y_stage = vec![0.0; n];
    let mut t = 0.0;
    vector_field_into(p, &y, &mut k[0])?;
    let mut stats = RunStats {
        accepted: 0,
        rejected: 0,
        stopped_at: None,
    };

    let mut next = 0usize;
    while next < targets.len() && targets[next] <= 0.0 {
        next += 1;
        if !sink(0.0, &y) {
            stats.stopped_at = Some(0.0);
            return Ok(stats);
        }
    }
    let f_norm = max_norm(&k[0]);
    if opts.settle.is_some_and(|s| f_norm < s) {
        stats.stopped_at = Some(0.0);
        return Ok(stats);
    }
    let mut h = if f_norm < 1e-12 {
        t_end.min(1.0)
    } else {
        (0.01 / f_norm).min(t_end)
    };
    let mut after_reject = false;
    while next < targets.len() {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::StepLimit {
                time: t,
                steps: opts.max_steps,
            });
        }
        let target = targets[next];
        if target <= t {
            next += 1;
            if !sink(t, &y) {
                stats.stopped_at = Some(t);
                return Ok(stats);
            }
            continue;
        }
        let remaining = target - t;
        let truncated = h >= remaining;
        let h_try = if truncated { remaining } else { h };
        if h_try < 1e-13 * t.abs().max(1.0) {
            return Err(Error::StepSizeUnderflow { time: t, step: h_try });
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h_try * A[s][j] * kj[i];
                }
                y_stage[i] = acc;
            }
            vector_field_into(p, &y_stage, &mut k[s])?;
        }
        // The last stage is evaluated at the 5th-order solution (FSAL).
        let mut err = 0.0;
        for i in 0..n {
            let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum::<f64>() * h_try;
            let scale = opts.atol + opts.rtol * y[i].abs().max(y_stage[i].abs());
            err += (e / scale).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() || y_stage.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("integrator state at t = {t}")));
        }
        if err > 1.0 {
            stats.rejected += 1;
            after_reject = true;
            h = h_try * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            continue;
        }
        stats.accepted += 1;
        t = if truncated { target } else { t + h_try };
        std::mem::swap(&mut y, &mut y_stage);
        k.swap(0, 6);
        let mut fac = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        if after_reject {
            fac = fac.min(1.0);
        }
        after_reject = false;
        let proposed = h_try * fac;
        h = if truncated { h.max(proposed) } else { proposed };
        if truncated {
            next += 1;
        }
        let emitted = truncated || every_step;
        if emitted && !sink(t, &y) {
            stats.stopped_at = Some(t);
            return Ok(stats);
        }
        if opts.settle.is_some_and(|s| max_norm(&k[0]) < s) {
            if !emitted {
                sink(t, &y);
            }
            stats.stopped_at = Some(t);
            return Ok(stats);
        }
    }
    Ok(stats)
}

fn solve(
    p: &Pctmc,
    x0: &[f64],
    horizon: f64,
    targets: Option<Vec<f64>>,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    check_simplex(x0, p.n_states()).map_err(|e| Error::InitialCondition(e.to_string()))?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Config(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let mut times = Vec::new();
    let mut points = Vec::new();
    let mut max_defect = 0.0f64;
    let mut record = |t: f64, x: &[f64]| {
        let (clipped, defect) = clip_to_simplex(x);
        max_defect = max_defect.max(defect);
        times.push(t);
        points.push(clipped);
        true
    };
    if targets.is_none() {
        record(0.0, x0);
    }
    let stats = run(p, x0, horizon, targets.as_deref(), opts, &mut record)?;
    if max_defect > 1e-12 {
        log::debug!("output clipping removed a simplex defect of {max_defect:e}");
    }
    Ok(Trajectory {
        times,
        points,
        meta: TrajectoryMeta {
            solver: "dormand-prince-5(4)",
            options: *opts,
            model_hash: p.fingerprint(),
            accepted_steps: stats.accepted,
            rejected_steps: stats.rejected,
            max_clip_defect: max_defect,
            settled_at: stats.stopped_at,
        },
    })
}

/// Integrates from `x0` over `[0, horizon]`. Output times follow
/// `opts.sample_interval`, or every accepted step when it is unset.
pub fn integrate(p: &Pctmc, x0: &[f64], horizon: f64, opts: &SolverOptions) -> Result<Trajectory> {
    match opts.sample_interval {
        Some(dt) => {
            let steps = (horizon / dt).ceil() as usize;
            let targets: Vec<f64> = (0..=steps).map(|k| (k as f64 * dt).min(horizon)).collect();
            let mut targets = targets;
            targets.dedup();
            solve(p, x0, horizon, Some(targets), opts)
        }
        None => solve(p, x0, horizon, None, opts),
    }
}

/// Integrates and reports the state at each of the increasing `times`.
pub fn integrate_at(p: &Pctmc, x0: &[f64], times: &[f64], opts: &SolverOptions) -> Result<Trajectory> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::Config("output times must be non-negative and increasing".into()));
    }
    let horizon = times.last().copied().unwrap_or(0.0);
    solve(p, x0, horizon, Some(times.to_vec()), opts)
}

/// Central-difference Jacobian `∂f_i/∂x_j` of the vector field (full coordinates).
pub fn jacobian_fd(p: &Pctmc, x: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let orig = xp[j];
        xp[j] = orig + step;
        vector_field_into(p, &xp, &mut fp)?;
        xp[j] = orig - step;
        vector_field_into(p, &xp, &mut fm)?;
        xp[j] = orig;
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Jacobian in the simplex tangent coordinates `y = x[..n-1]`,
/// `x[n-1] = 1 - Σy`, for the first `n-1` components of the field.
fn tangent_jacobian(p: &Pctmc, x: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let full = jacobian_fd(p, x, step)?;
    let m = n - 1;
    Ok(DMatrix::from_fn(m, m, |i, j| full[(i, j)] - full[(i, m)]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fixpoint {
    pub location: Vec<f64>,
    /// `‖f(x̂)‖∞` at `location`.
    pub residual: f64,
    /// `stable`, `unstable` or `marginal`, from the tangent Jacobian spectrum.
    pub classification: String,
    /// Largest real part of the tangent Jacobian eigenvalues.
    pub spectral_abscissa: f64,
}

impl Fixpoint {
    pub fn is_stable(&self) -> bool {
        self.classification == "stable"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixpointOptions {
    /// Length of the seeding integration.
    pub horizon: f64,
    /// Required residual `‖f‖∞`.
    pub tol: f64,
    pub max_newton: usize,
    pub fd_step: f64,
    /// Residual below which a sampled point is handed to Newton early.
    pub handoff: f64,
    /// An early Newton result is kept only if it is a stable fixpoint within
    /// this distance of the sampled point.
    pub handoff_radius: f64,
    pub solver: SolverOptions,
}

impl Default for FixpointOptions {
    fn default() -> Self {
        Self {
            horizon: 5000.0,
            tol: 1e-10,
            max_newton: 50,
            fd_step: 1e-7,
            handoff: 1e-5,
            handoff_radius: 1e-3,
            solver: SolverOptions {
                sample_interval: Some(10.0),
                settle: Some(1e-9),
                ..SolverOptions::default()
            },
        }
    }
}

const TAIL_POINTS: usize = 10;

fn residual(p: &Pctmc, x: &[f64]) -> Result<f64> {
    let mut f = vec![0.0; x.len()];
    vector_field_into(p, x, &mut f)?;
    Ok(max_norm(&f))
}

/// Damped Newton on the tangent coordinates. Returns the best point found.
fn newton(p: &Pctmc, start: &[f64], opts: &FixpointOptions) -> Result<(Vec<f64>, f64)> {
    let n = start.len();
    let m = n - 1;
    let mut x = start.to_vec();
    let mut f = vec![0.0; n];
    vector_field_into(p, &x, &mut f)?;
    let mut res = max_norm(&f);
    for _ in 0..opts.max_newton {
        if res < opts.tol {
            break;
        }
        let jac = tangent_jacobian(p, &x, opts.fd_step)?;
        let rhs = DVector::from_iterator(m, f[..m].iter().map(|v| -v));
        let Some(dy) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut trial = x.clone();
            let mut shift = 0.0;
            for i in 0..m {
                trial[i] += lambda * dy[i];
                shift += lambda * dy[i];
            }
            trial[m] -= shift;
            if trial.iter().all(|v| *v >= -1e-9) {
                let mut ft = vec![0.0; n];
                vector_field_into(p, &trial, &mut ft)?;
                let r = max_norm(&ft);
                if r < res {
                    x = trial;
                    f = ft;
                    res = r;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((x, res))
}

fn classify(p: &Pctmc, x: &[f64], fd_step: f64) -> Result<(String, f64)> {
    if x.len() < 2 {
        return Ok(("stable".into(), f64::NEG_INFINITY));
    }
    let jac = tangent_jacobian(p, x, fd_step)?;
    let abscissa = jac
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let tag = if abscissa < -1e-8 {
        "stable"
    } else if abscissa > 1e-8 {
        "unstable"
    } else {
        "marginal"
    };
    Ok((tag.into(), abscissa))
}

/// Integrates from `x0` until the trajectory settles near a stable fixpoint
/// (or reaches `opts.horizon`), then polishes the point by damped Newton.
pub fn find_fixpoint(p: &Pctmc, x0: &[f64], opts: &FixpointOptions) -> Result<Fixpoint> {
    opts.solver.validate()?;
    check_simplex(x0, p.n_states()).map_err(|e| Error::InitialCondition(e.to_string()))?;
    if !(opts.horizon.is_finite() && opts.horizon > 0.0) {
        return Err(Error::Config(format!(
            "horizon must be positive, got {}",
            opts.horizon
        )));
    }
    let dt = opts.solver.sample_interval.unwrap_or(opts.horizon / 500.0);
    let steps = (opts.horizon / dt).ceil() as usize;
    let mut targets: Vec<f64> = (0..=steps).map(|k| (k as f64 * dt).min(opts.horizon)).collect();
    targets.dedup();

    // Stiff models stall at a residual set by the step-size stability limit,
    // far above the settle threshold, so sampled points near a stable
    // fixpoint go to Newton directly.
    let mut tail: VecDeque<Vec<f64>> = VecDeque::with_capacity(TAIL_POINTS);
    let mut early: Option<Fixpoint> = None;
    let mut failure = None;
    let mut sink = |_t: f64, x: &[f64]| {
        let (x, _) = clip_to_simplex(x);
        if tail.len() == TAIL_POINTS {
            tail.pop_front();
        }
        tail.push_back(x.clone());
        let attempt = (|| -> Result<Option<Fixpoint>> {
            if residual(p, &x)? >= opts.handoff {
                return Ok(None);
            }
            let (y, res) = newton(p, &x, opts)?;
            if res >= opts.tol || linf(&x, &y) > opts.handoff_radius {
                return Ok(None);
            }
            let fp = polish(p, &y, opts)?;
            Ok(fp.is_stable().then_some(fp))
        })();
        match attempt {
            Ok(Some(fp)) => {
                early = Some(fp);
                false
            }
            Ok(None) => true,
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    };
    run(p, x0, opts.horizon, Some(&targets), &opts.solver, &mut sink)?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(fp) = early {
        return Ok(fp);
    }
    let seed = tail.back().cloned().unwrap_or_else(|| x0.to_vec());
    let (x, res) = newton(p, &seed, opts)?;
    if res >= opts.tol {
        return Err(Error::Unresolved {
            residual: res,
            tail: tail.into_iter().collect(),
        });
    }
    polish(p, &x, opts)
}

fn polish(p: &Pctmc, x: &[f64], opts: &FixpointOptions) -> Result<Fixpoint> {
    let (x, _) = clip_to_simplex(x);
    let res = residual(p, &x)?;
    let (classification, spectral_abscissa) = classify(p, &x, opts.fd_step)?;
    Ok(Fixpoint {
        location: x,
        residual: res,
        classification,
        spectral_abscissa,
    })
}

/// Fixpoints reached from several starts, merging those within `merge_radius`.
pub fn find_fixpoints(p: &Pctmc, starts: &[Vec<f64>], opts: &FixpointOptions, merge_radius: f64) -> Result<Vec<Fixpoint>> {
    let found: Vec<Fixpoint> = starts
        .par_iter()
        .map(|x0| find_fixpoint(p, x0, opts))
        .collect::<Result<_>>()?;
    let mut unique: Vec<Fixpoint> = Vec::new();
    for f in found {
        if !unique.iter().any(|u| linf(&u.location, &f.location) < merge_radius) {
            unique.push(f);
        }
    }
    Ok(unique)
}

/// One plotted axis: a state and the range of its occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AxisSpec {
    pub state: usize,
    pub lo: f64,
    pub hi: f64,
}

impl AxisSpec {
    pub fn unit(state: usize) -> Self {
        Self { state, lo: 0.0, hi: 1.0 }
    }

    fn value(&self, k: usize, resolution: usize) -> f64 {
        self.lo + (self.hi - self.lo) * k as f64 / (resolution - 1) as f64
    }
}

/// How occupancy not fixed by the two axes is distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Closure {
    /// All of it goes to this state.
    Remainder(usize),
    /// `samples` completions drawn uniformly from the remaining simplex face,
    /// with one random stream per cell.
    RandomCompletions { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub axes: (AxisSpec, AxisSpec),
    pub resolution: usize,
    pub closure: Closure,
}

impl GridSpec {
    fn validate(&self, n_states: usize) -> Result<()> {
        let (a, b) = self.axes;
        if self.resolution < 2 {
            return Err(Error::Config("grid resolution must be at least 2".into()));
        }
        if a.state >= n_states || b.state >= n_states || a.state == b.state {
            return Err(Error::Config("grid axes must be two distinct states".into()));
        }
        for ax in [a, b] {
            if !(0.0 <= ax.lo && ax.lo < ax.hi && ax.hi <= 1.0) {
                return Err(Error::Config(format!(
                    "axis range [{}, {}] must satisfy 0 <= lo < hi <= 1",
                    ax.lo, ax.hi
                )));
            }
        }
        match self.closure {
            Closure::Remainder(k) if k >= n_states || k == a.state || k == b.state => Err(
                Error::Config("closure state must differ from both axes".into()),
            ),
            Closure::RandomCompletions { samples: 0, .. } => {
                Err(Error::Config("random closure needs at least one sample".into()))
            }
            Closure::RandomCompletions { .. } if n_states < 3 => Err(Error::Config(
                "random closure needs a state outside the axes".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Feasible cells `(a, b, x_i, x_j)` in row-major order.
    fn cells(&self) -> Vec<(usize, usize, f64, f64)> {
        let (ai, aj) = self.axes;
        let mut out = Vec::new();
        for a in 0..self.resolution {
            for b in 0..self.resolution {
                let (xi, xj) = (ai.value(a, self.resolution), aj.value(b, self.resolution));
                if xi + xj <= 1.0 + 1e-12 {
                    out.push((a, b, xi, xj));
                }
            }
        }
        out
    }

    /// Full occupancy vectors for a cell under the closure rule.
    fn completions(&self, n_states: usize, cell_index: usize, xi: f64, xj: f64) -> Vec<Vec<f64>> {
        let (ai, aj) = self.axes;
        let rest = (1.0 - xi - xj).max(0.0);
        let base = |rest_split: &dyn Fn(&mut Vec<f64>)| {
            let mut x = vec![0.0; n_states];
            x[ai.state] = xi;
            x[aj.state] = xj;
            rest_split(&mut x);
            x
        };
        match self.closure {
            Closure::Remainder(k) => vec![base(&|x| x[k] = rest)],
            Closure::RandomCompletions { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(cell_index as u64);
                let others: Vec<usize> = (0..n_states)
                    .filter(|&s| s != ai.state && s != aj.state)
                    .collect();
                (0..samples)
                    .map(|_| {
                        let w: Vec<f64> = others.iter().map(|_| Exp1.sample(&mut rng)).collect();
                        let total: f64 = w.iter().sum();
                        base(&|x| {
                            for (s, wi) in others.iter().zip(&w) {
                                x[*s] = rest * wi / total;
                            }
                        })
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinCell {
    pub a: usize,
    pub b: usize,
    pub x_i: f64,
    pub x_j: f64,
    /// Majority fixpoint index, `None` if most completions were unresolved.
    pub label: Option<usize>,
    /// Fraction of completions reaching each fixpoint.
    pub fractions: Vec<f64>,
    pub unresolved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinGrid {
    pub spec: GridSpec,
    pub fixpoints: Vec<Fixpoint>,
    pub match_radius: f64,
    pub cells: Vec<BasinCell>,
}

impl BasinGrid {
    /// Cells per label: one entry per fixpoint, then unresolved.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.fixpoints.len() + 1];
        for c in &self.cells {
            match c.label {
                Some(k) => counts[k] += 1,
                None => counts[self.fixpoints.len()] += 1,
            }
        }
        counts
    }

    pub fn cell(&self, a: usize, b: usize) -> Option<&BasinCell> {
        self.cells.iter().find(|c| c.a == a && c.b == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BasinOptions {
    pub horizon: f64,
    /// L∞ radius for labelling an end point with a fixpoint.
    pub match_radius: f64,
    /// A run stops early once within this L∞ distance of a stable fixpoint.
    pub capture_radius: f64,
    pub solver: SolverOptions,
}

impl Default for BasinOptions {
    fn default() -> Self {
        Self {
            horizon: 5000.0,
            match_radius: 0.05,
            capture_radius: 1e-2,
            solver: SolverOptions {
                rtol: 1e-6,
                atol: 1e-9,
                ..SolverOptions::default()
            },
        }
    }
}

fn classify_end(p: &Pctmc, x0: &[f64], fixpoints: &[Fixpoint], opts: &BasinOptions) -> Result<Option<usize>> {
    let stable: Vec<&Fixpoint> = fixpoints.iter().filter(|f| f.is_stable()).collect();
    let mut end = x0.to_vec();
    // Check at a coarse stride so trajectories passing near a fixpoint can stop.
    let stride = (opts.horizon / 500.0).max(1e-3);
    let steps = (opts.horizon / stride).ceil() as usize;
    let targets: Vec<f64> = (1..=steps).map(|k| (k as f64 * stride).min(opts.horizon)).collect();
    let solver = SolverOptions {
        sample_interval: None,
        settle: None,
        ..opts.solver
    };
    run(p, x0, opts.horizon, Some(&targets), &solver, |_, y| {
        end.copy_from_slice(y);
        !stable
            .iter()
            .any(|f| linf(&f.location, y) < opts.capture_radius)
    })?;
    let best = fixpoints
        .iter()
        .enumerate()
        .map(|(k, f)| (k, linf(&f.location, &end)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    Ok(best.filter(|(_, d)| *d < opts.match_radius).map(|(k, _)| k))
}

/// Labels every feasible grid cell with the fixpoint its trajectory reaches.
pub fn basin_grid(p: &Pctmc, spec: &GridSpec, fixpoints: &[Fixpoint], opts: &BasinOptions) -> Result<BasinGrid> {
    spec.validate(p.n_states())?;
    if fixpoints.is_empty() {
        return Err(Error::Config("basin classification needs at least one fixpoint".into()));
    }
    let n = p.n_states();
    let cells = spec.cells();
    let labelled: Vec<BasinCell> = cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(a, b, xi, xj))| {
            let starts = spec.completions(n, idx, xi, xj);
            let mut hits = vec![0usize; fixpoints.len()];
            let mut unresolved = 0usize;
            for x0 in &starts {
                match classify_end(p, x0, fixpoints, opts)? {
                    Some(k) => hits[k] += 1,
                    None => unresolved += 1,
                }
            }
            let total = starts.len() as f64;
            let (best, best_hits) = hits
                .iter()
                .enumerate()
                .max_by_key(|(k, h)| (**h, std::cmp::Reverse(*k)))
                .map(|(k, h)| (k, *h))
                .expect("at least one fixpoint");
            let label = (best_hits > 0 && best_hits >= unresolved).then_some(best);
            Ok(BasinCell {
                a,
                b,
                x_i: xi,
                x_j: xj,
                label,
                fractions: hits.iter().map(|h| *h as f64 / total).collect(),
                unresolved: unresolved as f64 / total,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BasinGrid {
        spec: spec.clone(),
        fixpoints: fixpoints.to_vec(),
        match_radius: opts.match_radius,
        cells: labelled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSample {
    pub a: usize,
    pub b: usize,
    pub point: Vec<f64>,
    pub derivative: Vec<f64>,
}

/// Raw vector field at each feasible cell (one sample per completion).
pub fn export_vector_field_grid(p: &Pctmc, spec: &GridSpec) -> Result<Vec<FieldSample>> {
    spec.validate(p.n_states())?;
    let n = p.n_states();
    let mut out = Vec::new();
    for (idx, (a, b, xi, xj)) in spec.cells().into_iter().enumerate() {
        for x in spec.completions(n, idx, xi, xj) {
            let derivative = vector_field(p, &x)?;
            out.push(FieldSample {
                a,
                b,
                point: x,
                derivative,
            });
        }
    }
    Ok(out)
}
