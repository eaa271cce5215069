//! Compilation of a component into a normalized population CTMC.
//!
//! Every population transition moves one node (`1/N` of occupancy) from one
//! state to another, so its state-change vector is `(e_to - e_from)/N`. Rates
//! are expressed on the normalized state `x̂`.
//!
//! Two compilations are provided:
//!
//! * single receiver: a sending state with `n = N·x̂_i` transmitters
//!   delivers at rate `r_send·q(n)` and fails at rate `r_send·(n - q(n))`;
//! * local broadcast: `send(m)` fires at `N·r_send·x̂_i`, and a receiver in
//!   state `k` takes `receive(m)` at
//!   `N·r_send·(C_m/C_I)·q(d·C)·x̂_k`, where `C_m` is the occupancy able to
//!   send `m`, `C_I` the occupancy able to send anything interfering with `m`,
//!   `d = N·p` and `C` is `C_m` or `C_I` depending on [`QArgument`].
//!
//! Internal transitions fire at `N·r·x̂_from` in both cases. Self-loops do not
//! change the population and are dropped.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capture::{tabulate_q, CaptureCurve, CaptureModel};
use crate::error::{Error, Result};
use crate::model::{
    validate_broadcast_restriction, ActionKind, BroadcastConfig, Component, ModelBundle,
    ModelFamily, Rate,
};

/// Tolerance used when checking that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Argument of `q` in broadcast receive rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QArgument {
    /// `q(d·C({send(m)}))`: only senders of the received type.
    SenderCount,
    /// `q(d·C(I_m))`: every interfering sender.
    #[default]
    InterferenceTotal,
}

impl fmt::Display for QArgument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QArgument::SenderCount => "sender-count",
            QArgument::InterferenceTotal => "interference-total",
        })
    }
}

impl FromStr for QArgument {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sender-count" => Ok(QArgument::SenderCount),
            "interference-total" => Ok(QArgument::InterferenceTotal),
            other => Err(Error::Config(format!(
                "unknown q-argument convention '{other}' (expected sender-count or interference-total)"
            ))),
        }
    }
}

pub type RateClosure = Arc<dyn Fn(&[f64], usize, &dyn CaptureCurve) -> Result<f64> + Send + Sync>;

/// Rate function of a population transition, `r(x̂)` for system size `N`.
#[derive(Clone)]
pub enum RateLaw {
    /// `rate·N·x̂[state]`.
    Linear { state: usize, rate: f64 },
    /// `rate·q(N·x̂[state])`.
    Capture { state: usize, rate: f64 },
    /// `rate·(N·x̂[state] - q(N·x̂[state]))`.
    Failure { state: usize, rate: f64 },
    /// `N·rate·(C_senders/C_interferers)·q(neighborhood·C_arg)·x̂[state]`.
    Receive {
        state: usize,
        rate: f64,
        senders: Vec<usize>,
        interferers: Vec<usize>,
        argument: QArgument,
        neighborhood: f64,
    },
    /// Arbitrary rate, for experiments and negative controls.
    Custom {
        description: String,
        law: RateClosure,
    },
}

impl fmt::Debug for RateLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateLaw::Linear { state, rate } => write!(f, "Linear({state}, {rate})"),
            RateLaw::Capture { state, rate } => write!(f, "Capture({state}, {rate})"),
            RateLaw::Failure { state, rate } => write!(f, "Failure({state}, {rate})"),
            RateLaw::Receive {
                state,
                rate,
                senders,
                interferers,
                argument,
                neighborhood,
            } => write!(
                f,
                "Receive({state}, {rate}, {senders:?}/{interferers:?}, {argument}, d={neighborhood})"
            ),
            RateLaw::Custom { description, .. } => write!(f, "Custom({description})"),
        }
    }
}

/// How a rate law scales with `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateScaling {
    /// `r = N·g(x̂)` with `g` independent of `N`.
    Proportional,
    /// `q(N·x̂)` enters the rate; `r/N` is a function of `x̂` for each fixed `N` only.
    FixedSize,
    Unknown,
}

fn occupancy_sum(x: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&k| x[k]).sum()
}

/// `q` continued linearly below zero. Negative arguments only arise from
/// roundoff or finite-difference probes just outside the simplex.
fn q_continued(q: &dyn CaptureCurve, arg: f64) -> Result<f64> {
    if arg < 0.0 {
        Ok(arg)
    } else {
        q.q(arg)
    }
}

fn sum_label(states: &[String], idx: &[usize]) -> String {
    let terms: Vec<String> = idx.iter().map(|&k| format!("x_{}", states[k])).collect();
    if terms.len() == 1 {
        terms[0].clone()
    } else {
        format!("({})", terms.join(" + "))
    }
}

impl RateLaw {
    pub fn eval(&self, x: &[f64], size: usize, q: &dyn CaptureCurve) -> Result<f64> {
        let n = size as f64;
        match self {
            RateLaw::Linear { state, rate } => Ok(rate * n * x[*state]),
            RateLaw::Capture { state, rate } => Ok(rate * q_continued(q, n * x[*state])?),
            RateLaw::Failure { state, rate } => {
                let senders = n * x[*state];
                Ok(rate * (senders - q_continued(q, senders)?))
            }
            RateLaw::Receive {
                state,
                rate,
                senders,
                interferers,
                argument,
                neighborhood,
            } => {
                let c_send = occupancy_sum(x, senders);
                let c_int = occupancy_sum(x, interferers);
                // No senders, no receptions (also settles 0/0).
                if c_int <= 0.0 || c_send <= 0.0 {
                    return Ok(0.0);
                }
                let c_arg = match argument {
                    QArgument::SenderCount => c_send,
                    QArgument::InterferenceTotal => c_int,
                };
                let capture = q_continued(q, neighborhood * c_arg)?;
                Ok(n * rate * (c_send / c_int) * capture * x[*state])
            }
            RateLaw::Custom { law, .. } => law(x, size, q),
        }
    }

    pub fn scaling(&self) -> RateScaling {
        match self {
            RateLaw::Linear { .. } | RateLaw::Receive { .. } => RateScaling::Proportional,
            RateLaw::Capture { .. } | RateLaw::Failure { .. } => RateScaling::FixedSize,
            RateLaw::Custom { .. } => RateScaling::Unknown,
        }
    }

    /// Symbolic form of the rate `r(x̂)`.
    pub fn describe(&self, states: &[String]) -> String {
        match self {
            RateLaw::Linear { state, rate } => format!("{rate}*N*x_{}", states[*state]),
            RateLaw::Capture { state, rate } => format!("{rate}*q(N*x_{})", states[*state]),
            RateLaw::Failure { state, rate } => {
                let s = &states[*state];
                format!("{rate}*(N*x_{s} - q(N*x_{s}))")
            }
            RateLaw::Receive {
                state,
                rate,
                senders,
                interferers,
                argument,
                neighborhood,
            } => {
                let cs = sum_label(states, senders);
                let ci = sum_label(states, interferers);
                let arg = match argument {
                    QArgument::SenderCount => &cs,
                    QArgument::InterferenceTotal => &ci,
                };
                format!(
                    "N*{rate}*({cs}/{ci})*q({neighborhood}*{arg})*x_{}",
                    states[*state]
                )
            }
            RateLaw::Custom { description, .. } => description.clone(),
        }
    }

    /// Symbolic form of the ODE contribution `r(x̂)/N`.
    fn describe_flow(&self, states: &[String]) -> String {
        match self {
            RateLaw::Linear { state, rate } => format!("{rate}*x_{}", states[*state]),
            RateLaw::Capture { state, rate } => {
                format!("(1/N)*{rate}*q(N*x_{})", states[*state])
            }
            RateLaw::Failure { state, rate } => {
                let s = &states[*state];
                format!("{rate}*(x_{s} - (1/N)*q(N*x_{s}))")
            }
            RateLaw::Receive {
                state,
                rate,
                senders,
                interferers,
                argument,
                neighborhood,
            } => {
                let cs = sum_label(states, senders);
                let ci = sum_label(states, interferers);
                let arg = match argument {
                    QArgument::SenderCount => &cs,
                    QArgument::InterferenceTotal => &ci,
                };
                format!(
                    "{rate}*({cs}/{ci})*q({neighborhood}*{arg})*x_{}",
                    states[*state]
                )
            }
            RateLaw::Custom { description, .. } => format!("(1/N)*[{description}]"),
        }
    }
}

/// One population transition `x̂ → x̂ + (e_to - e_from)/N`.
#[derive(Debug, Clone)]
pub struct PctmcTransition {
    pub label: String,
    pub from: usize,
    pub to: usize,
    pub law: RateLaw,
}

impl PctmcTransition {
    /// Occupancy consumed, `e_from/N`.
    pub fn subtract(&self, n_states: usize, size: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_states];
        v[self.from] = 1.0 / size as f64;
        v
    }

    /// Occupancy produced, `e_to/N`.
    pub fn add(&self, n_states: usize, size: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_states];
        v[self.to] = 1.0 / size as f64;
        v
    }

    /// `ν = add - subtract`.
    pub fn change_vector(&self, n_states: usize, size: usize) -> Vec<f64> {
        self.add(n_states, size)
            .iter()
            .zip(self.subtract(n_states, size))
            .map(|(a, s)| a - s)
            .collect()
    }

    /// `N·ν`, rounded to integers.
    pub fn scaled_change(&self, n_states: usize, size: usize) -> Vec<i32> {
        self.change_vector(n_states, size)
            .iter()
            .map(|v| (v * size as f64).round() as i32)
            .collect()
    }
}

/// Which compilation produced a [`Pctmc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transformation {
    SingleReceiver,
    Broadcast { argument: QArgument },
    Custom,
}

/// A normalized population CTMC.
#[derive(Debug, Clone)]
pub struct Pctmc {
    states: Vec<String>,
    size: usize,
    transitions: Vec<PctmcTransition>,
    x0: Vec<f64>,
    capture: Arc<dyn CaptureCurve>,
    transformation: Transformation,
    dropped_self_loops: Vec<String>,
}

/// Checks that `x` has the right length and lies on the simplex.
pub fn check_simplex(x: &[f64], n_states: usize) -> Result<()> {
    if x.len() != n_states {
        return Err(Error::Domain(format!(
            "occupancy vector has {} entries, expected {n_states}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
        return Err(Error::Domain(format!(
            "occupancy vector has negative or non-finite entries: {x:?}"
        )));
    }
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!(
            "occupancy vector sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Machine-readable line of a generated system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ListingEntry {
    pub label: String,
    pub from: String,
    pub to: String,
    /// `N·ν`.
    pub change: Vec<i32>,
    pub rate: String,
}

impl Pctmc {
    pub fn new(
        states: Vec<String>,
        size: usize,
        transitions: Vec<PctmcTransition>,
        x0: Vec<f64>,
        capture: Arc<dyn CaptureCurve>,
    ) -> Result<Self> {
        Self::assemble(
            states,
            size,
            transitions,
            x0,
            capture,
            Transformation::Custom,
            Vec::new(),
        )
    }

    fn assemble(
        states: Vec<String>,
        size: usize,
        transitions: Vec<PctmcTransition>,
        x0: Vec<f64>,
        capture: Arc<dyn CaptureCurve>,
        transformation: Transformation,
        dropped_self_loops: Vec<String>,
    ) -> Result<Self> {
        if size < 1 {
            return Err(Error::Domain("system size N must be at least 1".into()));
        }
        let n = states.len();
        for t in &transitions {
            if t.from >= n || t.to >= n {
                return Err(Error::Structural(format!(
                    "transition '{}' refers to a state out of range",
                    t.label
                )));
            }
            if t.from == t.to {
                return Err(Error::Structural(format!(
                    "transition '{}' is a self-loop",
                    t.label
                )));
            }
        }
        check_simplex(&x0, n).map_err(|e| Error::InitialCondition(e.to_string()))?;
        Ok(Self {
            states,
            size,
            transitions,
            x0,
            capture,
            transformation,
            dropped_self_loops,
        })
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn transitions(&self) -> &[PctmcTransition] {
        &self.transitions
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn capture(&self) -> &Arc<dyn CaptureCurve> {
        &self.capture
    }

    pub fn transformation(&self) -> Transformation {
        self.transformation
    }

    /// Labels of component self-loops that were dropped.
    pub fn dropped_self_loops(&self) -> &[String] {
        &self.dropped_self_loops
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn rate(&self, k: usize, x: &[f64]) -> Result<f64> {
        let r = self.transitions[k]
            .law
            .eval(x, self.size, self.capture.as_ref())?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "rate of '{}' at {x:?}",
                self.transitions[k].label
            )));
        }
        Ok(r)
    }

    pub fn rates_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.rate(k, x)?;
        }
        Ok(())
    }

    /// Same chain with a different `q` evaluator.
    pub fn with_capture(&self, capture: Arc<dyn CaptureCurve>) -> Pctmc {
        Pctmc {
            capture,
            ..self.clone()
        }
    }

    pub fn with_initial(&self, x0: Vec<f64>) -> Result<Pctmc> {
        check_simplex(&x0, self.n_states()).map_err(|e| Error::InitialCondition(e.to_string()))?;
        Ok(Pctmc { x0, ..self.clone() })
    }

    /// Replaces the rate law of transition `k`.
    pub fn with_law(&self, k: usize, law: RateLaw) -> Pctmc {
        let mut out = self.clone();
        out.transitions[k].law = law;
        out
    }

    pub fn listing(&self) -> Vec<ListingEntry> {
        self.transitions
            .iter()
            .map(|t| ListingEntry {
                label: t.label.clone(),
                from: self.states[t.from].clone(),
                to: self.states[t.to].clone(),
                change: t.scaled_change(self.n_states(), self.size),
                rate: t.law.describe(&self.states),
            })
            .collect()
    }

    /// The mean-field system as text, one equation per state.
    pub fn ode_text(&self) -> String {
        let mut out = format!("# N = {}, q: {}\n", self.size, self.capture.describe());
        for (k, name) in self.states.iter().enumerate() {
            let mut terms = Vec::new();
            for t in &self.transitions {
                let flow = t.law.describe_flow(&self.states);
                if t.from == k {
                    terms.push(format!("- {flow}"));
                }
                if t.to == k {
                    terms.push(format!("+ {flow}"));
                }
            }
            let rhs = if terms.is_empty() {
                "0".to_string()
            } else {
                terms.join(" ")
            };
            out.push_str(&format!("d x_{name}/dt = {rhs}\n"));
        }
        out
    }

    /// SHA-256 over the listing, size and `q` description.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.listing()).expect("listing serializes"));
        hasher.update(self.size.to_le_bytes());
        hasher.update(self.capture.describe().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn unique_rate(component: &Component, pred: impl Fn(&ActionKind) -> bool, what: &str) -> Result<Option<f64>> {
    let mut rate: Option<f64> = None;
    for t in component.transitions().iter().filter(|t| pred(&t.action)) {
        let r = t.rate.value().ok_or_else(|| {
            Error::Model(format!("{what} transitions need a numeric rate"))
        })?;
        match rate {
            Some(existing) if existing != r => {
                return Err(Error::Model(format!(
                    "{what} transitions must share one rate, found {existing} and {r}"
                )))
            }
            _ => rate = Some(r),
        }
    }
    Ok(rate)
}

/// Single-receiver compilation of a capture/failure component.
pub fn transform_single_receiver(
    component: &Component,
    size: usize,
    capture: Arc<dyn CaptureCurve>,
    x0: &[f64],
) -> Result<Pctmc> {
    if component.family()? == ModelFamily::Broadcast {
        return Err(Error::Inapplicable(
            "single-receiver compilation needs capture/failure actions, not send/receive".into(),
        ));
    }
    for (state, name) in component.states().iter().enumerate() {
        let from_here = |kind: &ActionKind| -> Vec<f64> {
            component
                .transitions()
                .iter()
                .filter(|t| t.from == state && &t.action == kind)
                .filter_map(|t| t.rate.value())
                .collect()
        };
        let captures = from_here(&ActionKind::Capture);
        let failures = from_here(&ActionKind::Failure);
        match (captures.as_slice(), failures.as_slice()) {
            ([], []) => {}
            ([c], [f]) if c == f => {}
            ([c], [f]) => {
                return Err(Error::Model(format!(
                    "state '{}': capture rate {c} and failure rate {f} must be the same send rate",
                    name
                )))
            }
            _ => {
                return Err(Error::Model(format!(
                    "state '{}' needs exactly one capture and one failure transition (found {} and {})",
                    name,
                    captures.len(),
                    failures.len()
                )))
            }
        }
    }
    let mut transitions = Vec::new();
    let mut dropped = Vec::new();
    for t in component.transitions() {
        let label = t.action.label();
        if t.from == t.to {
            dropped.push(label);
            continue;
        }
        let rate = match t.rate {
            Rate::Fixed(r) => r,
            Rate::Passive => unreachable!("validated component"),
        };
        let law = match t.action {
            ActionKind::Capture => RateLaw::Capture {
                state: t.from,
                rate,
            },
            ActionKind::Failure => RateLaw::Failure {
                state: t.from,
                rate,
            },
            ActionKind::Internal { .. } => RateLaw::Linear {
                state: t.from,
                rate,
            },
            ActionKind::Send { .. } | ActionKind::Receive { .. } => {
                unreachable!("family checked above")
            }
        };
        transitions.push(PctmcTransition {
            label,
            from: t.from,
            to: t.to,
            law,
        });
    }
    Pctmc::assemble(
        component.states().to_vec(),
        size,
        transitions,
        x0.to_vec(),
        capture,
        Transformation::SingleReceiver,
        dropped,
    )
}

/// Local-broadcast compilation of a send/receive component.
pub fn transform_broadcast(
    component: &Component,
    config: &BroadcastConfig,
    size: usize,
    argument: QArgument,
    capture: Arc<dyn CaptureCurve>,
    x0: &[f64],
) -> Result<Pctmc> {
    if component.family()? == ModelFamily::SingleReceiver {
        return Err(Error::Inapplicable(
            "broadcast compilation needs send/receive actions, not capture/failure".into(),
        ));
    }
    config.validate()?;
    let diagnostics = validate_broadcast_restriction(component)?;
    if !diagnostics.is_empty() {
        let text: Vec<String> = diagnostics.iter().map(|d| d.to_string()).collect();
        return Err(Error::Model(text.join("; ")));
    }
    let neighborhood = config.neighborhood(size);
    let mut transitions = Vec::new();
    let mut dropped = Vec::new();
    for t in component.transitions() {
        let label = t.action.label();
        if t.from == t.to {
            dropped.push(label);
            continue;
        }
        let law = match &t.action {
            ActionKind::Send { .. } | ActionKind::Internal { .. } => RateLaw::Linear {
                state: t.from,
                rate: t.rate.value().expect("validated component"),
            },
            ActionKind::Receive { message } => {
                let is_send_of = |m: &str| {
                    let m = m.to_string();
                    move |a: &ActionKind| matches!(a, ActionKind::Send { message } if *message == m)
                };
                let senders = component.states_with(is_send_of(message));
                if senders.is_empty() {
                    return Err(Error::Model(format!(
                        "receive({message}) has no matching send({message}) transition"
                    )));
                }
                let rate = unique_rate(component, is_send_of(message), &format!("send({message})"))?
                    .expect("senders exist");
                let interfering = config.interferers_of(message);
                let interferers = component.states_with(|a| {
                    matches!(a, ActionKind::Send { message } if interfering.contains(message))
                });
                RateLaw::Receive {
                    state: t.from,
                    rate,
                    senders,
                    interferers,
                    argument,
                    neighborhood,
                }
            }
            ActionKind::Capture | ActionKind::Failure => unreachable!("family checked above"),
        };
        transitions.push(PctmcTransition {
            label,
            from: t.from,
            to: t.to,
            law,
        });
    }
    Pctmc::assemble(
        component.states().to_vec(),
        size,
        transitions,
        x0.to_vec(),
        capture,
        Transformation::Broadcast { argument },
        dropped,
    )
}

/// Where rate functions get `q` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaptureSource {
    /// Direct evaluation (default).
    #[default]
    Direct,
    /// Monotone-cubic table with this many points, covering every argument
    /// the compiled rates can produce.
    Table { n_points: usize },
}

/// Options for [`compile`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompileOptions {
    pub argument: QArgument,
    pub capture: CaptureSource,
    /// Overrides the model file's `N`.
    pub size: Option<usize>,
}

/// Compiles a parsed model with the transformation its actions call for.
pub fn compile(bundle: &ModelBundle, options: &CompileOptions) -> Result<Pctmc> {
    let size = options.size.unwrap_or(bundle.size);
    let family = bundle.component.family()?;
    let direct: Arc<dyn CaptureCurve> = Arc::new(CaptureModel::new(bundle.channel)?);
    let curve_for = |max_arg: f64| -> Result<Arc<dyn CaptureCurve>> {
        match options.capture {
            CaptureSource::Direct => Ok(direct.clone()),
            CaptureSource::Table { n_points } => Ok(Arc::new(tabulate_q(
                &bundle.channel,
                max_arg.max(1.0),
                n_points,
            )?)),
        }
    };
    match (family, &bundle.broadcast) {
        (ModelFamily::Broadcast, Some(config)) | (ModelFamily::InternalOnly, Some(config)) => {
            transform_broadcast(
                &bundle.component,
                config,
                size,
                options.argument,
                curve_for(config.neighborhood(size))?,
                &bundle.initial,
            )
        }
        (ModelFamily::Broadcast, None) => Err(Error::Model(
            "a send/receive model needs a broadcast section".into(),
        )),
        _ => transform_single_receiver(
            &bundle.component,
            size,
            curve_for(size as f64)?,
            &bundle.initial,
        ),
    }
}

/// Per-transition outcome of [`check_density_dependence`].
#[derive(Debug, Clone, Serialize)]
pub struct TransitionCheck {
    pub label: String,
    /// `N·ν` identical across all sizes.
    pub change_consistent: bool,
    /// Largest relative spread of `r/N` across sizes, over all probes.
    pub max_rel_deviation: f64,
    pub rate_consistent: bool,
    pub scaling: RateScaling,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub sizes: Vec<usize>,
    pub probes: usize,
    pub tolerance: f64,
    pub transitions: Vec<TransitionCheck>,
}

impl DensityReport {
    pub fn passes(&self) -> bool {
        self.transitions
            .iter()
            .all(|t| t.change_consistent && t.rate_consistent)
    }

    /// Transitions whose rates involve `q(N·x̂)`: their `r/N` is defined per
    /// fixed `N` and is expected to vary across sizes.
    pub fn fixed_size_transitions(&self) -> Vec<&str> {
        self.transitions
            .iter()
            .filter(|t| t.scaling == RateScaling::FixedSize)
            .map(|t| t.label.as_str())
            .collect()
    }
}

/// Relative tolerance on `r/N` across sizes.
pub const DENSITY_REL_TOL: f64 = 1e-9;

/// Checks the two density-dependence conditions empirically: `N·ν`
/// independent of `N`, and `r_N(x̂)/N` independent of `N` at every probe.
pub fn check_density_dependence(
    build: &dyn Fn(usize) -> Result<Pctmc>,
    sizes: &[usize],
    probes: &[Vec<f64>],
) -> Result<DensityReport> {
    if sizes.len() < 2 {
        return Err(Error::Config(
            "density-dependence needs at least two system sizes".into(),
        ));
    }
    let chains = sizes.iter().map(|&n| build(n)).collect::<Result<Vec<_>>>()?;
    let reference = &chains[0];
    for probe in probes {
        check_simplex(probe, reference.n_states())?;
    }
    for (chain, &n) in chains.iter().zip(sizes) {
        if chain.size() != n {
            return Err(Error::Structural(format!(
                "builder returned N = {} for requested N = {n}",
                chain.size()
            )));
        }
        let same = chain.n_states() == reference.n_states()
            && chain.transitions().len() == reference.transitions().len()
            && chain
                .transitions()
                .iter()
                .zip(reference.transitions())
                .all(|(a, b)| a.label == b.label && a.from == b.from && a.to == b.to);
        if !same {
            return Err(Error::Structural(format!(
                "transition set for N = {n} differs from N = {}",
                reference.size()
            )));
        }
    }
    let n_states = reference.n_states();
    let mut checks = Vec::with_capacity(reference.transitions().len());
    for (k, t) in reference.transitions().iter().enumerate() {
        let base_change = {
            let v = t.change_vector(n_states, reference.size());
            v.iter().map(|c| c * reference.size() as f64).collect::<Vec<_>>()
        };
        let change_consistent = chains.iter().all(|c| {
            let tr = &c.transitions()[k];
            tr.change_vector(n_states, c.size())
                .iter()
                .zip(&base_change)
                .all(|(v, b)| (v * c.size() as f64 - b).abs() < 1e-9)
        });
        let mut worst = 0.0f64;
        for probe in probes {
            let base = reference.rate(k, probe)? / reference.size() as f64;
            for c in &chains[1..] {
                let g = c.rate(k, probe)? / c.size() as f64;
                let scale = base.abs().max(g.abs());
                if scale > 0.0 {
                    worst = worst.max((g - base).abs() / scale);
                }
            }
        }
        checks.push(TransitionCheck {
            label: t.label.clone(),
            change_consistent,
            max_rel_deviation: worst,
            rate_consistent: worst <= DENSITY_REL_TOL,
            scaling: t.law.scaling(),
        });
    }
    Ok(DensityReport {
        sizes: sizes.to_vec(),
        probes: probes.len(),
        tolerance: DENSITY_REL_TOL,
        transitions: checks,
    })
}
