//! Exact stochastic simulation of the population CTMC.
//!
//! The state is kept as integer counts; rates are evaluated at `counts/N`.
//! A transition is enabled only while its source state is occupied. Each
//! replication draws from its own ChaCha8 stream (master seed, stream =
//! replication index), so results do not depend on scheduling.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::capture::MemoizedCurve;
use crate::error::{Error, Result};
use crate::odes::{integrate_at, SolverOptions};
use crate::pctmc::{Pctmc, Transformation};

/// Converts an occupancy vector to counts; entries must be multiples of `1/N`.
pub fn lattice_counts(x: &[f64], size: usize) -> Result<Vec<u64>> {
    let n = size as f64;
    let mut counts = Vec::with_capacity(x.len());
    for &v in x {
        let c = v * n;
        if !(c.is_finite() && c > -1e-9 && (c - c.round()).abs() <= 1e-9 * n.max(1.0)) {
            return Err(Error::Domain(format!(
                "occupancy {v} is not a multiple of 1/{size}"
            )));
        }
        counts.push(c.round().max(0.0) as u64);
    }
    if counts.iter().sum::<u64>() != size as u64 {
        return Err(Error::Domain(format!(
            "counts {counts:?} do not add up to N = {size}"
        )));
    }
    Ok(counts)
}

/// Nearest lattice point by largest remainder: floors, then hands the
/// missing units to the largest fractional parts (ties to lower index).
pub fn round_to_lattice(x: &[f64], size: usize) -> Vec<u64> {
    let n = size as f64;
    let mut counts: Vec<u64> = x.iter().map(|v| (v.max(0.0) * n).floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..x.len()).collect();
    let frac = |k: usize| x[k].max(0.0) * n - counts[k] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let missing = (size as u64).saturating_sub(assigned);
    for &k in order.iter().cycle().take(missing as usize) {
        counts[k] += 1;
    }
    counts
}

/// One realization of the jump process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticTrajectory {
    pub size: usize,
    pub seed: u64,
    pub stream: u64,
    /// Jump times, starting with 0 for the initial state.
    pub times: Vec<f64>,
    /// Counts after each jump.
    pub counts: Vec<Vec<u64>>,
    /// Transition fired at each jump (`None` for the initial state).
    pub fired: Vec<Option<usize>>,
    /// True if the chain reached a state with no enabled transition.
    pub absorbed: bool,
}

impl StochasticTrajectory {
    pub fn occupancy(&self, k: usize) -> Vec<f64> {
        let n = self.size as f64;
        self.counts[k].iter().map(|&c| c as f64 / n).collect()
    }

    /// Index of the state occupied at time `t` (right-continuous).
    pub fn index_at(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn occupancy_at(&self, t: f64) -> Vec<f64> {
        self.occupancy(self.index_at(t))
    }
}

/// Replaces the capture curve by a memoized one when its arguments are
/// integer counts, as in the single-receiver compilation.
fn prepare(p: &Pctmc) -> Pctmc {
    if p.transformation() == Transformation::SingleReceiver {
        p.with_capture(Arc::new(MemoizedCurve::new(p.capture().clone())))
    } else {
        p.clone()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Core jump loop; `on_jump(t, counts, fired)` is called after every jump.
fn run_jumps<F>(p: &Pctmc, mut counts: Vec<u64>, horizon: f64, rng: &mut ChaCha8Rng, mut on_jump: F) -> Result<bool>
where
    F: FnMut(f64, &[u64], usize),
{
    let n = p.size() as f64;
    let m = p.transitions().len();
    let mut x = vec![0.0; counts.len()];
    let mut rates = vec![0.0; m];
    let mut t = 0.0;
    loop {
        for (xi, &c) in x.iter_mut().zip(&counts) {
            *xi = c as f64 / n;
        }
        let mut total = 0.0;
        for (k, tr) in p.transitions().iter().enumerate() {
            rates[k] = if counts[tr.from] == 0 {
                0.0
            } else {
                let r = p.rate(k, &x)?;
                if r < 0.0 {
                    return Err(Error::NonFinite(format!(
                        "negative rate {r} for '{}' at {x:?}",
                        tr.label
                    )));
                }
                r
            };
            total += rates[k];
        }
        if total <= 0.0 {
            return Ok(true);
        }
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / total;
        if t > horizon {
            return Ok(false);
        }
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = m;
        for (k, &r) in rates.iter().enumerate() {
            if r > 0.0 {
                chosen = k;
                if pick < r {
                    break;
                }
                pick -= r;
            }
        }
        let tr = &p.transitions()[chosen];
        counts[tr.from] -= 1;
        counts[tr.to] += 1;
        on_jump(t, &counts, chosen);
    }
}

/// Simulates one trajectory on `[0, horizon]` from the lattice point `x0`.
pub fn simulate(p: &Pctmc, x0: &[f64], horizon: f64, seed: u64) -> Result<StochasticTrajectory> {
    simulate_stream(p, x0, horizon, seed, 0)
}

/// As [`simulate`], drawing from stream `stream` of the master seed.
pub fn simulate_stream(p: &Pctmc, x0: &[f64], horizon: f64, seed: u64, stream: u64) -> Result<StochasticTrajectory> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be non-negative, got {horizon}")));
    }
    if x0.len() != p.n_states() {
        return Err(Error::Domain(format!(
            "initial occupancy has {} entries, expected {}",
            x0.len(),
            p.n_states()
        )));
    }
    let counts = lattice_counts(x0, p.size())?;
    let chain = prepare(p);
    let mut rng = rng_for(seed, stream);
    let mut times = vec![0.0];
    let mut states = vec![counts.clone()];
    let mut fired = vec![None];
    let absorbed = run_jumps(&chain, counts, horizon, &mut rng, |t, c, k| {
        times.push(t);
        states.push(c.to_vec());
        fired.push(Some(k));
    })?;
    Ok(StochasticTrajectory {
        size: p.size(),
        seed,
        stream,
        times,
        counts: states,
        fired,
        absorbed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceOptions {
    pub horizon: f64,
    pub replications: usize,
    pub seed: u64,
    /// Number of points of the uniform comparison grid on `[0, horizon]`.
    pub grid_points: usize,
    pub solver: SolverOptions,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            horizon: 200.0,
            replications: 20,
            seed: 0,
            grid_points: 1000,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub size: usize,
    /// `sup_t ‖M̂(t) - x̂(t)‖∞` per replication, in replication order.
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single replication).
    pub std: f64,
}

impl ConvergenceRow {
    /// Standard error of `mean`.
    pub fn standard_error(&self) -> f64 {
        self.std / (self.errors.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub options: ConvergenceOptions,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Mean error decreasing in `N`, tolerating one increase that stays
    /// within one standard error of the previous mean.
    pub fn decreasing_trend(&self) -> bool {
        let mut inversions = 0;
        for w in self.rows.windows(2) {
            if w[1].mean >= w[0].mean {
                inversions += 1;
                if w[1].mean - w[0].mean > w[0].standard_error() {
                    return false;
                }
            }
        }
        inversions <= 1
    }
}

fn grid(horizon: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| horizon * k as f64 / (points - 1) as f64)
        .collect()
}

/// Sup-norm distance between a jump process (sampled càdlàg on `times`) and
/// reference points on the same grid.
fn sup_error(p: &Pctmc, counts0: Vec<u64>, times: &[f64], reference: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = p.size() as f64;
    let mut worst = 0.0f64;
    let mut next = 0usize;
    let mut current = counts0.clone();
    let mut flush = |until: f64, counts: &[u64], next: &mut usize| {
        while *next < times.len() && times[*next] < until {
            for (c, r) in counts.iter().zip(&reference[*next]) {
                worst = worst.max((*c as f64 / n - r).abs());
            }
            *next += 1;
        }
    };
    run_jumps(p, counts0, times[times.len() - 1], rng, |t, c, _| {
        flush(t, &current, &mut next);
        current.copy_from_slice(c);
    })?;
    flush(f64::INFINITY, &current, &mut next);
    Ok(worst)
}

/// Runs `replications` simulations for each size and compares them with the
/// ODE solution started from the same lattice point.
pub fn convergence_study(
    build: &(dyn Fn(usize) -> Result<Pctmc> + Sync),
    sizes: &[usize],
    x0: &[f64],
    opts: &ConvergenceOptions,
) -> Result<ConvergenceReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("sizes must be non-empty and strictly increasing".into()));
    }
    if opts.replications == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    if opts.grid_points < 2 || opts.horizon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config("comparison grid needs a positive horizon and 2+ points".into()));
    }
    let times = grid(opts.horizon, opts.grid_points);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let chain = prepare(&build(size)?);
        let counts0 = round_to_lattice(x0, size);
        let start: Vec<f64> = counts0.iter().map(|&c| c as f64 / size as f64).collect();
        let reference = integrate_at(&chain, &start, &times, &opts.solver)?.points;
        let errors: Vec<f64> = (0..opts.replications)
            .into_par_iter()
            .map(|rep| {
                let mut rng = rng_for(opts.seed ^ (size as u64).rotate_left(32), rep as u64);
                sup_error(&chain, counts0.clone(), &times, &reference, &mut rng)
            })
            .collect::<Result<_>>()?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let std = if errors.len() > 1 {
            (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errors.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        log::info!("N = {size}: mean sup error {mean:.4} ± {std:.4}");
        rows.push(ConvergenceRow {
            size,
            errors,
            mean,
            std,
        });
    }
    Ok(ConvergenceReport {
        options: *opts,
        rows,
    })
}
