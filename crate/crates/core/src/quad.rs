//! Globally adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.
//!
//! The interval with the largest error estimate is bisected until the summed
//! estimate falls below `max(abs_tol, rel_tol * |result|)`. Infinite ranges
//! are handled by the callers, which truncate or transform them first.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Outcome of a converged integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Tolerances for [`Quadrature::integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 0.0,
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Segment {}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Nodes of the 15-point Kronrod rule on `[a, b]` with their weights
/// (scaled to the interval) and the embedded 7-point Gauss weights (zero at
/// Kronrod-only nodes).
pub(crate) fn kronrod15_nodes(a: f64, b: f64) -> [(f64, f64, f64); 15] {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = [(center, WGK[7] * half, WG[3] * half); 15];
    for j in 0..7 {
        let dx = half * XGK[j];
        let wg = if j % 2 == 1 { WG[j / 2] * half } else { 0.0 };
        out[2 * j] = (center - dx, WGK[j] * half, wg);
        out[2 * j + 1] = (center + dx, WGK[j] * half, wg);
    }
    out
}

fn kronrod15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        kronrod += w * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let value = kronrod * half;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "integrand on [{a}, {b}] produced a non-finite value"
        )));
    }
    Ok((value, ((kronrod - gauss) * half).abs()))
}

impl Quadrature {
    pub fn with_abs_tol(abs_tol: f64) -> Self {
        Self {
            abs_tol,
            ..Self::default()
        }
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<QuadResult> {
        self.integrate_with_breaks(f, &[a, b])
    }

    /// Integrates `f` over `[points[0], points[last]]`, starting from the
    /// subdivision given by `points` (strictly increasing).
    pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
        &self,
        mut f: F,
        points: &[f64],
    ) -> Result<QuadResult> {
        if points.len() < 2 || points.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            if points.len() == 2 && points[0] == points[1] {
                return Ok(QuadResult {
                    value: 0.0,
                    error: 0.0,
                    evaluations: 0,
                });
            }
            return Err(Error::Domain(format!(
                "quadrature breakpoints must be strictly increasing, got {points:?}"
            )));
        }
        let mut heap = BinaryHeap::with_capacity(64);
        let mut total = 0.0;
        let mut total_err = 0.0;
        for w in points.windows(2) {
            let (value, error) = kronrod15(&mut f, w[0], w[1])?;
            total += value;
            total_err += error;
            heap.push(Segment {
                a: w[0],
                b: w[1],
                value,
                error,
            });
        }
        let mut evaluations = 15 * heap.len();
        loop {
            let tolerance = self.abs_tol.max(self.rel_tol * total.abs());
            if total_err <= tolerance {
                break;
            }
            if heap.len() >= self.max_intervals {
                return Err(Error::Quadrature {
                    estimate: total,
                    error: total_err,
                    tolerance,
                });
            }
            let worst = heap.pop().expect("heap is never empty");
            let mid = 0.5 * (worst.a + worst.b);
            if !(worst.a < mid && mid < worst.b) {
                // Interval exhausted at machine precision.
                return Err(Error::Quadrature {
                    estimate: total,
                    error: total_err,
                    tolerance,
                });
            }
            let (v1, e1) = kronrod15(&mut f, worst.a, mid)?;
            let (v2, e2) = kronrod15(&mut f, mid, worst.b)?;
            evaluations += 30;
            total += v1 + v2 - worst.value;
            total_err += e1 + e2 - worst.error;
            heap.push(Segment {
                a: worst.a,
                b: mid,
                value: v1,
                error: e1,
            });
            heap.push(Segment {
                a: mid,
                b: worst.b,
                value: v2,
                error: e2,
            });
        }
        // Re-sum to shed the drift of the incremental updates.
        let value = heap.iter().map(|s| s.value).sum();
        let error = heap.iter().map(|s| s.error).sum();
        Ok(QuadResult {
            value,
            error,
            evaluations,
        })
    }
}
