//! Interference-aware capture probability.
//!
//! `q(i)` is the probability that one of `i` simultaneous transmissions
//! captures the receiver: a signal from distance `r_t` survives one
//! interferer at distance `r` when its power exceeds the interferer's by the
//! threshold `z`, with received power falling off as `r^-β`. Averaging the
//! single-interferer survival `S(r_t)` over the spatial distribution `f`,
//!
//! ```text
//! q(i) = i · ∫ S(r_t)^(i-1) f(r_t) dr_t,   S(r_t) = ∫ f(r) / (1 + z r_t^β r^-β) dr
//! ```
//!
//! for `i >= 1`, and `q(i) = i` on `[0, 1)`. The exponent `i - 1` is real, so
//! the curve can be evaluated at the non-integer arguments produced by the
//! mean-field equations.
//!
//! Two spatial distributions are supported: nodes uniform on the unit disk
//! (`f(r) = 2r` on `[0, 1]`) and a log-normal distance with
//! `ln r ~ N(0, (σ_d/β)²)`. The log-normal integrals run in `u = ln r` and are
//! truncated to `|u| <= TAIL_SIGMAS · σ_d/β`, where the discarded mass is
//! below [`TAIL_MASS`]; the truncated density is renormalised.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{kronrod15_nodes, Quadrature};

/// Upper bound on the probability mass discarded by log-normal truncation.
pub const TAIL_MASS: f64 = 1e-10;

/// Truncation half-width in standard deviations of `ln r`;
/// `2·Φ(-6.5) ≈ 8.0e-11`.
pub const TAIL_SIGMAS: f64 = 6.5;

/// Absolute tolerance of the outer integral in `q(i)`.
pub const OUTER_TOL: f64 = 1e-9;

/// Absolute tolerance of each direct single-interferer survival integral.
pub const INNER_TOL: f64 = 1e-11;

/// Maximum interpolation error accepted for the memoised survival table.
pub const SURVIVAL_INTERP_TOL: f64 = 1e-6;

/// Spatial distribution of node distances from the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Spatial {
    Uniform,
    #[serde(rename = "lognormal")]
    LogNormal { sigma_d: f64 },
}

/// Radio channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    /// Pathloss exponent.
    pub beta: f64,
    /// Capture power-ratio threshold.
    pub z: f64,
    pub spatial: Spatial,
}

impl ChannelModel {
    pub fn new(beta: f64, z: f64, spatial: Spatial) -> Result<Self> {
        let channel = Self { beta, z, spatial };
        channel.validate()?;
        Ok(channel)
    }

    pub fn uniform(beta: f64, z: f64) -> Result<Self> {
        Self::new(beta, z, Spatial::Uniform)
    }

    pub fn lognormal(beta: f64, z: f64, sigma_d: f64) -> Result<Self> {
        Self::new(beta, z, Spatial::LogNormal { sigma_d })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Domain(format!(
                "pathloss exponent beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !(self.z.is_finite() && self.z > 0.0) {
            return Err(Error::Domain(format!(
                "capture threshold z must be positive and finite, got {}",
                self.z
            )));
        }
        if let Spatial::LogNormal { sigma_d } = self.spatial {
            if !(sigma_d.is_finite() && sigma_d > 0.0) {
                return Err(Error::Domain(format!(
                    "log-normal sigma_d must be positive and finite, got {sigma_d}"
                )));
            }
        }
        Ok(())
    }

    /// Standard deviation of `ln r` for the log-normal case.
    pub fn log_sigma(&self) -> Option<f64> {
        match self.spatial {
            Spatial::Uniform => None,
            Spatial::LogNormal { sigma_d } => Some(sigma_d / self.beta),
        }
    }

    /// Distance range over which the integrals are evaluated:
    /// `[0, 1]` for the uniform disk, `[1/r_max, r_max]` for log-normal.
    pub fn support(&self) -> (f64, f64) {
        match self.log_sigma() {
            None => (0.0, 1.0),
            Some(s) => {
                let r_max = (TAIL_SIGMAS * s).exp();
                (1.0 / r_max, r_max)
            }
        }
    }

    /// Whether the single-interferer survival has the arctan closed form.
    pub fn has_closed_form(&self) -> bool {
        self.spatial == Spatial::Uniform && self.beta == 4.0
    }

    fn log_half_width(&self) -> f64 {
        TAIL_SIGMAS * self.log_sigma().unwrap_or(0.0)
    }
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.spatial {
            Spatial::Uniform => write!(f, "uniform(beta={}, z={})", self.beta, self.z),
            Spatial::LogNormal { sigma_d } => write!(
                f,
                "lognormal(beta={}, z={}, sigma_d={sigma_d})",
                self.beta, self.z
            ),
        }
    }
}

fn gaussian(u: f64, s: f64) -> f64 {
    (-0.5 * (u / s).powi(2)).exp() / ((2.0 * PI).sqrt() * s)
}

/// Spatial density `f(r)`.
pub fn spatial_pdf(r: f64, channel: &ChannelModel) -> Result<f64> {
    channel.validate()?;
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::Domain(format!(
            "distance must be finite and non-negative, got {r}"
        )));
    }
    Ok(match channel.spatial {
        Spatial::Uniform => {
            if r <= 1.0 {
                2.0 * r
            } else {
                0.0
            }
        }
        Spatial::LogNormal { sigma_d } => {
            if r == 0.0 {
                0.0
            } else {
                let beta = channel.beta;
                let ln_r = r.ln();
                beta / ((2.0 * PI).sqrt() * r * sigma_d)
                    * (-(beta * beta) * ln_r * ln_r / (2.0 * sigma_d * sigma_d)).exp()
            }
        }
    })
}

fn closed_form_survival(r_t: f64, z: f64) -> f64 {
    if r_t == 0.0 {
        return 1.0;
    }
    let a = z.sqrt() * r_t * r_t;
    1.0 - a * (1.0 / a).atan()
}

/// Survival against one interferer for the uniform disk, by quadrature in `r`.
fn uniform_survival_quad(r_t: f64, channel: &ChannelModel) -> Result<f64> {
    if r_t == 0.0 {
        return Ok(1.0);
    }
    let beta = channel.beta;
    let threshold = channel.z * r_t.powf(beta);
    let integrand = |r: f64| {
        let rb = r.powf(beta);
        2.0 * r * rb / (rb + threshold)
    };
    let quad = Quadrature::with_abs_tol(INNER_TOL);
    let result = if r_t < 1.0 {
        quad.integrate_with_breaks(integrand, &[0.0, r_t, 1.0])?
    } else {
        quad.integrate(integrand, 0.0, 1.0)?
    };
    Ok(result.value.clamp(0.0, 1.0))
}

/// Survival against one interferer for the log-normal case, with the
/// transmitter at log-distance `u_t`.
fn lognormal_survival_quad(u_t: f64, channel: &ChannelModel, mass: f64) -> Result<f64> {
    let s = channel.log_sigma().expect("log-normal channel");
    let half = channel.log_half_width();
    let beta = channel.beta;
    let z = channel.z;
    let integrand = |u: f64| gaussian(u, s) / (1.0 + z * (beta * (u_t - u)).exp());
    let quad = Quadrature::with_abs_tol(INNER_TOL);
    let result = if u_t > -half && u_t < half {
        quad.integrate_with_breaks(integrand, &[-half, u_t, half])?
    } else {
        quad.integrate(integrand, -half, half)?
    };
    Ok((result.value / mass).clamp(0.0, 1.0))
}

fn truncated_gaussian_mass(channel: &ChannelModel) -> Result<f64> {
    let s = channel.log_sigma().expect("log-normal channel");
    let half = channel.log_half_width();
    Ok(Quadrature::with_abs_tol(1e-14)
        .integrate(|u| gaussian(u, s), -half, half)?
        .value)
}

/// Probability that a transmitter at distance `r_t` survives a single
/// interferer drawn from the spatial distribution.
///
/// Uses the arctan closed form for the uniform disk with `β = 4`, adaptive
/// quadrature otherwise.
pub fn inner_survival(r_t: f64, channel: &ChannelModel) -> Result<f64> {
    channel.validate()?;
    if !(r_t.is_finite() && r_t >= 0.0) {
        return Err(Error::Domain(format!(
            "transmitter distance must be finite and non-negative, got {r_t}"
        )));
    }
    if r_t == 0.0 {
        return Ok(1.0);
    }
    match channel.spatial {
        Spatial::Uniform if channel.has_closed_form() => Ok(closed_form_survival(r_t, channel.z)),
        Spatial::Uniform => uniform_survival_quad(r_t, channel),
        Spatial::LogNormal { .. } => {
            let mass = truncated_gaussian_mass(channel)?;
            lognormal_survival_quad(r_t.ln(), channel, mass)
        }
    }
}

/// A capture-probability curve `i ↦ q(i)`.
pub trait CaptureCurve: Send + Sync + fmt::Debug {
    fn q(&self, i: f64) -> Result<f64>;

    /// Short human-readable description, recorded in run metadata.
    fn describe(&self) -> String;
}

fn check_argument(i: f64) -> Result<()> {
    if !(i.is_finite() && i >= 0.0) {
        return Err(Error::Domain(format!(
            "capture argument must be finite and non-negative, got {i}"
        )));
    }
    Ok(())
}

/// Single-interferer survival sampled on a uniform grid over the outer
/// integration variable (`r_t` for the disk, `ln r_t` for log-normal),
/// read back by four-point Lagrange interpolation.
#[derive(Debug, Clone)]
struct SurvivalTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl SurvivalTable {
    fn build<F: Fn(f64) -> Result<f64>>(lo: f64, hi: f64, exact: F) -> Result<Self> {
        let mut cells = 256usize;
        loop {
            let step = (hi - lo) / cells as f64;
            let values = (0..=cells)
                .map(|k| exact(lo + k as f64 * step))
                .collect::<Result<Vec<_>>>()?;
            let table = Self { lo, step, values };
            let mut worst = 0.0f64;
            for k in 0..cells {
                let x = lo + (k as f64 + 0.5) * step;
                worst = worst.max((table.eval(x) - exact(x)?).abs());
            }
            if worst <= SURVIVAL_INTERP_TOL {
                return Ok(table);
            }
            if cells >= 1 << 14 {
                return Err(Error::Quadrature {
                    estimate: worst,
                    error: worst,
                    tolerance: SURVIVAL_INTERP_TOL,
                });
            }
            cells *= 2;
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let last = self.values.len() - 1;
        let pos = ((x - self.lo) / self.step).clamp(0.0, last as f64);
        let cell = (pos.floor() as usize).min(last - 1);
        let start = cell.saturating_sub(1).min(last.saturating_sub(3));
        let t = pos - start as f64;
        let y = &self.values[start..start + 4];
        // Lagrange basis on nodes 0, 1, 2, 3.
        let l0 = -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0;
        let l1 = t * (t - 2.0) * (t - 3.0) / 2.0;
        let l2 = -t * (t - 1.0) * (t - 3.0) / 2.0;
        let l3 = t * (t - 1.0) * (t - 2.0) / 6.0;
        (y[0] * l0 + y[1] * l1 + y[2] * l2 + y[3] * l3).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
enum Survival {
    ClosedForm { z: f64 },
    Tabulated(SurvivalTable),
}

/// Largest exponent `i - 1` covered by the fixed outer rule; beyond it `q`
/// falls back to adaptive quadrature.
pub const RULE_MAX_EXPONENT: f64 = 4096.0;

/// Relative accuracy the fixed outer rule is refined to, at every reference
/// exponent.
pub const RULE_REL_TOL: f64 = 1e-10;

/// Exponents `i - 1` the fixed outer rule is refined against.
fn reference_exponents() -> Vec<f64> {
    let mut e = vec![0.0, 0.25, 0.5];
    let mut x = 1.0;
    while x <= RULE_MAX_EXPONENT {
        e.push(x);
        x *= 2.0;
    }
    e
}

/// Fixed composite Kronrod rule for `∫ S(x)^e w(x) dx`, shared by all `e`.
///
/// Panels are bisected until each one meets the accuracy target for every
/// reference exponent. Evaluation is then a smooth function of `e` (a sum
/// of exponentials), which keeps the mean-field vector field free of the
/// jitter an argument-dependent subdivision would introduce.
#[derive(Debug, Clone)]
struct OuterRule {
    /// Node weights including the spatial density, sorted by `log_s` descending.
    weights: Vec<f64>,
    log_s: Vec<f64>,
    /// `tail[k] = Σ_{j >= k} weights[j]`.
    tail: Vec<f64>,
    panels: usize,
}

struct Panel {
    a: f64,
    b: f64,
    /// Survival at the 15 Kronrod nodes.
    survival: [f64; 15],
    /// Kronrod estimate per reference exponent.
    kronrod: Vec<f64>,
    /// `|K - G|` per reference exponent.
    error: Vec<f64>,
    /// `Σ |w f|` per reference exponent, for the noise floor.
    magnitude: Vec<f64>,
}

impl Panel {
    fn new(
        a: f64,
        b: f64,
        exponents: &[f64],
        density: &dyn Fn(f64) -> f64,
        survival: &dyn Fn(f64) -> Result<f64>,
    ) -> Result<Self> {
        let nodes = kronrod15_nodes(a, b);
        let mut s = [0.0; 15];
        for (slot, &(x, _, _)) in s.iter_mut().zip(&nodes) {
            *slot = survival(x)?;
        }
        let mut kronrod = Vec::with_capacity(exponents.len());
        let mut error = Vec::with_capacity(exponents.len());
        let mut magnitude = Vec::with_capacity(exponents.len());
        for &e in exponents {
            let (mut k, mut g, mut m) = (0.0, 0.0, 0.0);
            for (&(x, wk, wg), &sv) in nodes.iter().zip(&s) {
                let f = sv.powf(e) * density(x);
                k += wk * f;
                g += wg * f;
                m += (wk * f).abs();
            }
            kronrod.push(k);
            error.push((k - g).abs());
            magnitude.push(m);
        }
        Ok(Self {
            a,
            b,
            survival: s,
            kronrod,
            error,
            magnitude,
        })
    }
}

impl OuterRule {
    /// `noise` is the relative precision of `survival`; `S^e` cannot be
    /// resolved below roughly `(1 + e)·noise`.
    fn build(
        breaks: &[f64],
        density: &dyn Fn(f64) -> f64,
        survival: &dyn Fn(f64) -> Result<f64>,
        noise: f64,
    ) -> Result<Self> {
        let exponents = reference_exponents();
        let range = breaks[breaks.len() - 1] - breaks[0];
        let mut done: Vec<Panel> = Vec::new();
        let mut open: Vec<Panel> = breaks
            .windows(2)
            .map(|w| Panel::new(w[0], w[1], &exponents, density, survival))
            .collect::<Result<_>>()?;
        while !open.is_empty() {
            let totals: Vec<f64> = (0..exponents.len())
                .map(|j| done.iter().chain(&open).map(|p| p.kronrod[j]).sum())
                .collect();
            let mut next = Vec::new();
            for p in open {
                let share = (p.b - p.a) / range;
                let fine = share < 1e-9
                    || (0..exponents.len()).all(|j| {
                        let floor = 16.0 * (1.0 + exponents[j]) * noise * p.magnitude[j];
                        p.error[j] <= (RULE_REL_TOL * totals[j] * share).max(floor)
                    });
                if fine {
                    done.push(p);
                } else {
                    let mid = 0.5 * (p.a + p.b);
                    next.push(Panel::new(p.a, mid, &exponents, density, survival)?);
                    next.push(Panel::new(mid, p.b, &exponents, density, survival)?);
                }
            }
            open = next;
            if done.len() + open.len() > 100_000 {
                return Err(Error::Quadrature {
                    estimate: f64::NAN,
                    error: f64::NAN,
                    tolerance: RULE_REL_TOL,
                });
            }
        }
        let mut nodes = Vec::with_capacity(15 * done.len());
        for p in &done {
            for ((x, wk, _), sv) in kronrod15_nodes(p.a, p.b).into_iter().zip(p.survival) {
                nodes.push((sv.max(f64::MIN_POSITIVE).ln(), wk * density(x)));
            }
        }
        nodes.sort_by(|p, q| q.0.total_cmp(&p.0));
        let weights: Vec<f64> = nodes.iter().map(|n| n.1).collect();
        let log_s: Vec<f64> = nodes.iter().map(|n| n.0).collect();
        let mut tail = vec![0.0; weights.len() + 1];
        for k in (0..weights.len()).rev() {
            tail[k] = tail[k + 1] + weights[k];
        }
        Ok(Self {
            weights,
            log_s,
            tail,
            panels: done.len(),
        })
    }

    fn integral(&self, e: f64) -> f64 {
        if e == 0.0 {
            return self.tail[0];
        }
        let mut sum = 0.0;
        for k in 0..self.weights.len() {
            let factor = (e * self.log_s[k]).exp();
            sum += self.weights[k] * factor;
            // Later nodes have smaller survival, so `factor` bounds them.
            if self.tail[k + 1] * factor <= 1e-17 * sum {
                break;
            }
        }
        sum
    }
}

/// Direct evaluator of `q(i)` for one channel.
///
/// Construction builds a fixed outer quadrature rule with the survival
/// integral evaluated at each node; each `q` call is then a weighted sum of
/// `S^(i-1)`. Exponents above [`RULE_MAX_EXPONENT`] use adaptive quadrature
/// over a memoised survival table.
#[derive(Debug, Clone)]
pub struct CaptureModel {
    channel: ChannelModel,
    survival: Survival,
    rule: OuterRule,
    /// Outer integration range.
    range: (f64, f64),
    /// Mass of the outer weight over `range`.
    norm: f64,
}

impl CaptureModel {
    pub fn new(channel: ChannelModel) -> Result<Self> {
        channel.validate()?;
        match channel.spatial {
            Spatial::Uniform => {
                let survival = if channel.has_closed_form() {
                    Survival::ClosedForm { z: channel.z }
                } else {
                    Survival::Tabulated(SurvivalTable::build(0.0, 1.0, |r_t| {
                        uniform_survival_quad(r_t, &channel)
                    })?)
                };
                let breaks: Vec<f64> = (0..=16).map(|k| k as f64 / 16.0).collect();
                let rule = OuterRule::build(
                    &breaks,
                    &|r| 2.0 * r,
                    &|r| match &survival {
                        Survival::ClosedForm { z } => Ok(closed_form_survival(r, *z)),
                        Survival::Tabulated(_) => uniform_survival_quad(r, &channel),
                    },
                    if channel.has_closed_form() { 8.0 * f64::EPSILON } else { INNER_TOL },
                )?;
                Ok(Self {
                    channel,
                    norm: rule.integral(0.0),
                    survival,
                    rule,
                    range: (0.0, 1.0),
                })
            }
            Spatial::LogNormal { .. } => {
                let half = channel.log_half_width();
                let s = channel.log_sigma().expect("log-normal channel");
                let mass = truncated_gaussian_mass(&channel)?;
                let survival = Survival::Tabulated(SurvivalTable::build(-half, half, |u_t| {
                    lognormal_survival_quad(u_t, &channel, mass)
                })?);
                let breaks: Vec<f64> = (0..=16).map(|k| -half + 2.0 * half * k as f64 / 16.0).collect();
                let rule = OuterRule::build(
                    &breaks,
                    &|u| gaussian(u, s),
                    &|u| lognormal_survival_quad(u, &channel, mass),
                    INNER_TOL,
                )?;
                Ok(Self {
                    channel,
                    norm: rule.integral(0.0),
                    survival,
                    rule,
                    range: (-half, half),
                })
            }
        }
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    /// Number of nodes in the fixed outer rule.
    pub fn rule_nodes(&self) -> usize {
        self.rule.weights.len()
    }

    /// Number of panels in the fixed outer rule.
    pub fn rule_panels(&self) -> usize {
        self.rule.panels
    }

    /// `∫ S(x)^(i-1) w(x) dx` by adaptive quadrature over the survival table.
    fn outer_integral_adaptive(&self, i: f64) -> Result<f64> {
        let exponent = i - 1.0;
        let quad = Quadrature::with_abs_tol(OUTER_TOL);
        match self.channel.spatial {
            Spatial::Uniform => {
                let f = |r_t: f64| self.survival.eval(r_t).powf(exponent) * 2.0 * r_t;
                // Mass concentrates within O(1/sqrt(i)) of the receiver.
                let knee = (2.0 / i.max(1.0).sqrt()).min(0.5);
                Ok(quad.integrate_with_breaks(f, &[0.0, knee, 1.0])?.value)
            }
            Spatial::LogNormal { .. } => {
                let s = self.channel.log_sigma().expect("log-normal channel");
                let f = |u: f64| self.survival.eval(u).powf(exponent) * gaussian(u, s);
                let (lo, hi) = self.range;
                Ok(quad.integrate_with_breaks(f, &[lo, 0.0, hi])?.value)
            }
        }
    }
}

impl Survival {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Survival::ClosedForm { z } => closed_form_survival(x, *z),
            Survival::Tabulated(table) => table.eval(x),
        }
    }
}

impl CaptureCurve for CaptureModel {
    fn q(&self, i: f64) -> Result<f64> {
        check_argument(i)?;
        if i < 1.0 {
            return Ok(i);
        }
        let exponent = i - 1.0;
        let integral = if exponent <= RULE_MAX_EXPONENT {
            self.rule.integral(exponent)
        } else {
            self.outer_integral_adaptive(i)?
        };
        Ok((i * integral / self.norm).clamp(0.0, 1.0))
    }

    fn describe(&self) -> String {
        format!("direct q(i), {}", self.channel)
    }
}

/// Slow reference for `q(i)`: nested adaptive quadrature with the survival
/// integral evaluated directly at every outer point (no tables, no fixed rule).
pub fn q_reference(i: f64, channel: &ChannelModel, tol: f64) -> Result<f64> {
    channel.validate()?;
    check_argument(i)?;
    if i < 1.0 {
        return Ok(i);
    }
    let e = i - 1.0;
    let quad = Quadrature {
        abs_tol: tol,
        rel_tol: 0.0,
        max_intervals: 20000,
    };
    let (num, den) = match channel.spatial {
        Spatial::Uniform => {
            let mut failure = None;
            let num = quad.integrate_with_breaks(
                |r| match inner_survival(r, channel) {
                    Ok(s) => s.powf(e) * 2.0 * r,
                    Err(err) => {
                        failure.get_or_insert(err);
                        0.0
                    }
                },
                &[0.0, (2.0 / i.sqrt()).min(0.5), 1.0],
            )?;
            if let Some(err) = failure {
                return Err(err);
            }
            (num.value, 1.0)
        }
        Spatial::LogNormal { .. } => {
            let s = channel.log_sigma().expect("log-normal channel");
            let half = channel.log_half_width();
            let mass = truncated_gaussian_mass(channel)?;
            let mut failure = None;
            let num = quad.integrate_with_breaks(
                |u| match lognormal_survival_quad(u, channel, mass) {
                    Ok(sv) => sv.powf(e) * gaussian(u, s),
                    Err(err) => {
                        failure.get_or_insert(err);
                        0.0
                    }
                },
                &[-half, 0.0, half],
            )?;
            if let Some(err) = failure {
                return Err(err);
            }
            (num.value, mass)
        }
    };
    Ok((i * num / den).clamp(0.0, 1.0))
}

/// `q(i)` for a single argument. Builds a [`CaptureModel`]; reuse one when
/// evaluating many arguments.
pub fn capture_probability(i: f64, channel: &ChannelModel) -> Result<f64> {
    check_argument(i)?;
    if i < 1.0 {
        return Ok(i);
    }
    CaptureModel::new(*channel)?.q(i)
}

/// Tabulated `q(i)` on `[0, i_max]`.
///
/// Exact (`q(i) = i`) on `[0, 1]`; above 1 a monotone piecewise cubic
/// (Fritsch–Carlson) in `ln i` through values of the direct evaluator on a
/// grid uniform in `ln i`. The interpolant never leaves the range of its two
/// neighbouring samples, so it stays in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct QTable {
    channel: ChannelModel,
    grid: Vec<f64>,
    values: Vec<f64>,
    /// Knots `ln i` for the grid points at or above 1 (grid[1..]).
    knots: Vec<f64>,
    slopes: Vec<f64>,
}

pub const QTABLE_INTERPOLATION: &str = "linear on [0,1]; monotone cubic (PCHIP) in ln(i) above";

impl QTable {
    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn i_max(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }

    pub fn interpolation(&self) -> &'static str {
        QTABLE_INTERPOLATION
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 2 {
        let d = (y[1] - y[0]) / (x[1] - x[0]);
        return vec![d, d];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end_slope = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

impl CaptureCurve for QTable {
    fn q(&self, i: f64) -> Result<f64> {
        check_argument(i)?;
        if i < 1.0 {
            return Ok(i);
        }
        let i_max = self.i_max();
        if i > i_max {
            return Err(Error::Domain(format!(
                "capture argument {i} exceeds the tabulated range [0, {i_max}]"
            )));
        }
        let t = i.ln();
        let k = match self.knots.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(k) => return Ok(self.values[k + 1]),
            Err(k) => k.clamp(1, self.knots.len() - 1) - 1,
        };
        let h = self.knots[k + 1] - self.knots[k];
        let s = (t - self.knots[k]) / h;
        let (y0, y1) = (self.values[k + 1], self.values[k + 2]);
        let (m0, m1) = (self.slopes[k], self.slopes[k + 1]);
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let v = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
        Ok(v.clamp(y0.min(y1), y0.max(y1)))
    }

    fn describe(&self) -> String {
        format!(
            "tabulated q(i), {}, {} points on [0, {}], {}",
            self.channel,
            self.grid.len(),
            self.i_max(),
            QTABLE_INTERPOLATION
        )
    }
}

/// Tabulates `q` on `[0, i_max]` with `n_points` samples (the first at 0, the
/// rest geometrically spaced from 1 to `i_max`).
pub fn tabulate_q(channel: &ChannelModel, i_max: f64, n_points: usize) -> Result<QTable> {
    if !(i_max.is_finite() && i_max >= 1.0) {
        return Err(Error::Domain(format!("i_max must be >= 1, got {i_max}")));
    }
    if n_points < 16 {
        return Err(Error::Domain(format!(
            "n_points must be at least 16, got {n_points}"
        )));
    }
    let model = CaptureModel::new(*channel)?;
    let upper = n_points - 1;
    let mut grid = vec![0.0];
    if i_max == 1.0 {
        grid.push(1.0);
    } else {
        let span = i_max.ln();
        grid.extend((0..upper).map(|k| {
            if k + 1 == upper {
                i_max
            } else {
                (span * k as f64 / (upper - 1) as f64).exp()
            }
        }));
    }
    let values = grid
        .iter()
        .map(|&i| model.q(i))
        .collect::<Result<Vec<_>>>()?;
    let knots: Vec<f64> = grid[1..].iter().map(|i| i.ln()).collect();
    let slopes = if knots.len() >= 2 {
        pchip_slopes(&knots, &values[1..])
    } else {
        vec![0.0]
    };
    Ok(QTable {
        channel: *channel,
        grid,
        values,
        knots,
        slopes,
    })
}

/// Largest difference quotient `|q(x) - q(y)| / |x - y|` over all pairs of
/// `n_samples` equally spaced points in `[lo, hi]`.
pub fn lipschitz_probe(curve: &dyn CaptureCurve, lo: f64, hi: f64, n_samples: usize) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && lo < hi) {
        return Err(Error::Domain(format!(
            "probe domain must satisfy 1 <= lo < hi, got [{lo}, {hi}]"
        )));
    }
    if n_samples < 2 {
        return Err(Error::Domain("at least two samples are required".into()));
    }
    let xs: Vec<f64> = (0..n_samples)
        .map(|k| lo + (hi - lo) * k as f64 / (n_samples - 1) as f64)
        .collect();
    let qs = xs.iter().map(|&x| curve.q(x)).collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for a in 0..n_samples {
        for b in a + 1..n_samples {
            worst = worst.max((qs[a] - qs[b]).abs() / (xs[b] - xs[a]));
        }
    }
    Ok(worst)
}

/// Convenience wrapper of [`lipschitz_probe`] for the direct evaluator.
pub fn lipschitz_probe_channel(
    channel: &ChannelModel,
    lo: f64,
    hi: f64,
    n_samples: usize,
) -> Result<f64> {
    lipschitz_probe(&CaptureModel::new(*channel)?, lo, hi, n_samples)
}

/// Caches another curve's values by exact argument.
///
/// The stochastic simulator evaluates `q` at `count` or `d·count/N`, a small
/// set of recurring arguments.
#[derive(Debug)]
pub struct MemoizedCurve {
    inner: Arc<dyn CaptureCurve>,
    cache: Mutex<HashMap<u64, f64>>,
}

impl MemoizedCurve {
    pub fn new(inner: Arc<dyn CaptureCurve>) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl CaptureCurve for MemoizedCurve {
    fn q(&self, i: f64) -> Result<f64> {
        let key = i.to_bits();
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v);
        }
        let v = self.inner.q(i)?;
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform() -> ChannelModel {
        ChannelModel::uniform(4.0, 10.0).unwrap()
    }

    fn lognormal() -> ChannelModel {
        ChannelModel::lognormal(4.0, 10.0, 2.0).unwrap()
    }

    #[test]
    fn uniform_pdf_values() {
        assert_eq!(spatial_pdf(0.5, &uniform()).unwrap(), 1.0);
        assert_eq!(spatial_pdf(2.0, &uniform()).unwrap(), 0.0);
        assert_eq!(spatial_pdf(1.0, &uniform()).unwrap(), 2.0);
    }

    #[test]
    fn pdf_rejects_bad_input() {
        assert!(spatial_pdf(-0.1, &uniform()).is_err());
        assert!(spatial_pdf(f64::NAN, &lognormal()).is_err());
        let bad = ChannelModel {
            beta: 4.0,
            z: -1.0,
            spatial: Spatial::Uniform,
        };
        assert!(matches!(spatial_pdf(0.5, &bad), Err(Error::Domain(_))));
        assert!(ChannelModel::lognormal(4.0, 10.0, 0.0).is_err());
        assert!(ChannelModel::uniform(0.0, 10.0).is_err());
        assert!(ChannelModel::uniform(4.0, f64::INFINITY).is_err());
    }

    #[test]
    fn truncation_tail_is_below_budget() {
        // Mass outside ±6.5σ of a standard normal, by quadrature of the tail.
        let tail = Quadrature::with_abs_tol(1e-16)
            .integrate(|u| gaussian(u, 1.0), TAIL_SIGMAS, 40.0)
            .unwrap()
            .value;
        assert!(2.0 * tail < TAIL_MASS, "tail mass {}", 2.0 * tail);
        let (lo, hi) = lognormal().support();
        assert_abs_diff_eq!(lo * hi, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, (6.5f64 * 0.5).exp(), epsilon = 1e-12);
    }

    #[test]
    fn survival_limits() {
        for ch in [uniform(), lognormal()] {
            assert_eq!(inner_survival(0.0, &ch).unwrap(), 1.0);
            let tiny = inner_survival(1e-6, &ch).unwrap();
            assert!(tiny > 1.0 - 1e-6, "{ch}: {tiny}");
        }
        let at_edge = inner_survival(1.0, &uniform()).unwrap();
        assert!(at_edge > 0.0 && at_edge < 1.0);
        assert!(inner_survival(-1.0, &uniform()).is_err());
    }

    #[test]
    fn generic_uniform_survival_uses_quadrature() {
        // β = 4 through the general path matches the closed form.
        let ch = uniform();
        for k in 1..=10 {
            let r_t = k as f64 / 10.0;
            assert_abs_diff_eq!(
                uniform_survival_quad(r_t, &ch).unwrap(),
                closed_form_survival(r_t, ch.z),
                epsilon = 1e-10
            );
        }
        let ch3 = ChannelModel::uniform(3.0, 10.0).unwrap();
        let s = inner_survival(0.5, &ch3).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn small_arguments_are_identity() {
        let m = CaptureModel::new(lognormal()).unwrap();
        assert_eq!(m.q(0.0).unwrap(), 0.0);
        assert_eq!(m.q(0.25).unwrap(), 0.25);
        assert!(m.q(-0.5).is_err());
        assert!(m.q(f64::INFINITY).is_err());
    }

    #[test]
    fn unity_at_one() {
        for ch in [uniform(), lognormal()] {
            assert_eq!(capture_probability(1.0, &ch).unwrap(), 1.0);
        }
        let ch = ChannelModel::lognormal(3.0, 4.0, 1.0).unwrap();
        assert_abs_diff_eq!(capture_probability(1.0, &ch).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn qtable_hits_grid_points() {
        let table = tabulate_q(&uniform(), 10.0, 32).unwrap();
        assert_eq!(table.q(1.0).unwrap(), 1.0);
        assert_eq!(table.grid()[0], 0.0);
        assert_eq!(table.i_max(), 10.0);
        assert!(table.grid().windows(2).all(|w| w[0] < w[1]));
        assert!(table.q(10.5).is_err());
        assert_eq!(table.q(0.5).unwrap(), 0.5);
    }

    #[test]
    fn qtable_argument_checks() {
        assert!(tabulate_q(&uniform(), 0.5, 32).is_err());
        assert!(tabulate_q(&uniform(), 10.0, 8).is_err());
        let flat = tabulate_q(&uniform(), 1.0, 16).unwrap();
        assert_eq!(flat.grid(), &[0.0, 1.0]);
        assert_eq!(flat.q(1.0).unwrap(), 1.0);
    }

    #[test]
    fn lipschitz_probe_rejects_degenerate_domain() {
        let m = CaptureModel::new(uniform()).unwrap();
        assert!(lipschitz_probe(&m, 5.0, 5.0, 10).is_err());
        assert!(lipschitz_probe(&m, 0.5, 5.0, 10).is_err());
        assert!(lipschitz_probe(&m, 1.0, 5.0, 1).is_err());
    }

    #[test]
    fn memoized_curve_matches_inner() {
        let inner: Arc<dyn CaptureCurve> = Arc::new(CaptureModel::new(uniform()).unwrap());
        let memo = MemoizedCurve::new(inner.clone());
        for i in [0.5, 2.0, 3.0, 2.0] {
            assert_eq!(memo.q(i).unwrap(), inner.q(i).unwrap());
        }
    }

    #[test]
    fn channel_serde_shapes() {
        let ch: ChannelModel =
            serde_json::from_str(r#"{"beta": 4, "z": 10, "spatial": {"lognormal": {"sigma_d": 2}}}"#)
                .unwrap();
        assert_eq!(ch, lognormal());
        let ch: ChannelModel =
            serde_json::from_str(r#"{"beta": 4, "z": 10, "spatial": "uniform"}"#).unwrap();
        assert_eq!(ch, uniform());
        assert!(serde_json::from_str::<ChannelModel>(
            r#"{"beta": 4, "z": 10, "spatial": "uniform", "extra": 1}"#
        )
        .is_err());
        assert!(serde_json::from_str::<ChannelModel>(
            r#"{"beta": 4, "z": 10, "spatial": {"lognormal": {"sigma_d": 2, "mu": 0}}}"#
        )
        .is_err());
    }
}
