//! Per-node component transition systems and the JSON model file.
//!
//! State indices follow declaration order; occupancy vectors use the same
//! ordering everywhere in the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::capture::ChannelModel;
use crate::error::{Error, Result};

/// Tolerance on the sum of an initial occupancy.
pub const OCCUPANCY_SUM_TOL: f64 = 1e-12;

/// What a transition does, as far as the transformations are concerned.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ActionSpec", into = "ActionSpec")]
pub enum ActionKind {
    /// Successful send to the single receiver.
    Capture,
    /// Send lost to interference.
    Failure,
    Send { message: String },
    Receive { message: String },
    Internal { name: Option<String> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ActionTag {
    Capture,
    Failure,
    Send,
    Receive,
    Internal,
}

/// Wire form of [`ActionKind`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionSpec {
    kind: ActionTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

impl TryFrom<ActionSpec> for ActionKind {
    type Error = String;

    fn try_from(spec: ActionSpec) -> std::result::Result<Self, String> {
        let ActionSpec {
            kind,
            message,
            name,
        } = spec;
        match (kind, message, name) {
            (ActionTag::Send, Some(message), None) => Ok(ActionKind::Send { message }),
            (ActionTag::Receive, Some(message), None) => Ok(ActionKind::Receive { message }),
            (ActionTag::Send | ActionTag::Receive, None, _) => {
                Err("send/receive actions need a \"message\" type".into())
            }
            (ActionTag::Internal, None, name) => Ok(ActionKind::Internal { name }),
            (ActionTag::Capture, None, None) => Ok(ActionKind::Capture),
            (ActionTag::Failure, None, None) => Ok(ActionKind::Failure),
            (tag, _, _) => Err(format!(
                "action kind {tag:?} does not take the given message/name fields"
            )),
        }
    }
}

impl From<ActionKind> for ActionSpec {
    fn from(action: ActionKind) -> Self {
        let (kind, message, name) = match action {
            ActionKind::Capture => (ActionTag::Capture, None, None),
            ActionKind::Failure => (ActionTag::Failure, None, None),
            ActionKind::Send { message } => (ActionTag::Send, Some(message), None),
            ActionKind::Receive { message } => (ActionTag::Receive, Some(message), None),
            ActionKind::Internal { name } => (ActionTag::Internal, None, name),
        };
        ActionSpec {
            kind,
            message,
            name,
        }
    }
}

impl ActionKind {
    pub fn internal(name: &str) -> Self {
        ActionKind::Internal {
            name: Some(name.to_string()),
        }
    }

    pub fn send(message: &str) -> Self {
        ActionKind::Send {
            message: message.to_string(),
        }
    }

    pub fn receive(message: &str) -> Self {
        ActionKind::Receive {
            message: message.to_string(),
        }
    }

    /// Reporting label.
    pub fn label(&self) -> String {
        match self {
            ActionKind::Capture => "capture".into(),
            ActionKind::Failure => "failure".into(),
            ActionKind::Send { message } => format!("send({message})"),
            ActionKind::Receive { message } => format!("receive({message})"),
            ActionKind::Internal { name } => name.clone().unwrap_or_else(|| "internal".into()),
        }
    }

    pub fn message(&self) -> Option<&str> {
        match self {
            ActionKind::Send { message } | ActionKind::Receive { message } => Some(message),
            _ => None,
        }
    }
}

/// A transition rate: a positive constant, or passive (`⊥`, receive only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Fixed(f64),
    Passive,
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Fixed(r) => Some(*r),
            Rate::Passive => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub action: ActionKind,
    pub rate: Rate,
}

/// Which transformation a component is written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// Capture/failure sends to one receiver.
    SingleReceiver,
    /// Typed send/receive local broadcast.
    Broadcast,
    /// Internal transitions only; either transformation applies.
    InternalOnly,
}

/// A per-node labelled transition system.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    states: Vec<String>,
    transitions: Vec<Transition>,
}

impl Component {
    pub fn new(states: Vec<String>, transitions: Vec<Transition>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Model("a component needs at least one state".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &states {
            if !seen.insert(s.as_str()) {
                return Err(Error::Model(format!("duplicate state name '{s}'")));
            }
        }
        for (k, t) in transitions.iter().enumerate() {
            if t.from >= states.len() || t.to >= states.len() {
                return Err(Error::Model(format!(
                    "transition {k} refers to a state index out of range"
                )));
            }
            match (&t.action, t.rate) {
                (ActionKind::Receive { .. }, Rate::Passive) => {}
                (ActionKind::Receive { message }, Rate::Fixed(_)) => {
                    return Err(Error::Model(format!(
                        "transition {k} ({} -> {}): receive({message}) must have a null (passive) rate",
                        states[t.from], states[t.to]
                    )))
                }
                (action, Rate::Passive) => {
                    return Err(Error::Model(format!(
                        "transition {k} ({} -> {}): only receive transitions may be passive, got {}",
                        states[t.from],
                        states[t.to],
                        action.label()
                    )))
                }
                (_, Rate::Fixed(r)) if !(r.is_finite() && r > 0.0) => {
                    return Err(Error::Model(format!(
                        "transition {k}: rate must be positive and finite, got {r}"
                    )))
                }
                _ => {}
            }
        }
        let component = Self {
            states,
            transitions,
        };
        component.family()?;
        Ok(component)
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn family(&self) -> Result<ModelFamily> {
        let single = self
            .transitions
            .iter()
            .any(|t| matches!(t.action, ActionKind::Capture | ActionKind::Failure));
        let broadcast = self
            .transitions
            .iter()
            .any(|t| matches!(t.action, ActionKind::Send { .. } | ActionKind::Receive { .. }));
        match (single, broadcast) {
            (true, true) => Err(Error::Model(
                "a component may not mix capture/failure with send/receive actions".into(),
            )),
            (true, false) => Ok(ModelFamily::SingleReceiver),
            (false, true) => Ok(ModelFamily::Broadcast),
            (false, false) => Ok(ModelFamily::InternalOnly),
        }
    }

    /// Message types used by send or receive transitions.
    pub fn message_types(&self) -> BTreeSet<String> {
        self.transitions
            .iter()
            .filter_map(|t| t.action.message().map(str::to_string))
            .collect()
    }

    /// States with an outgoing transition whose action satisfies `pred`,
    /// ascending and without repeats.
    pub fn states_with<P: Fn(&ActionKind) -> bool>(&self, pred: P) -> Vec<usize> {
        self.transitions
            .iter()
            .filter(|t| pred(&t.action))
            .map(|t| t.from)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Local-broadcast parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastConfig {
    /// Fraction of the network within range of a sender, in `(0, 1]`.
    pub p: f64,
    /// `I_m`: message types whose sends interfere with type `m`; always contains `m`.
    pub interference: BTreeMap<String, BTreeSet<String>>,
}

impl BroadcastConfig {
    /// Expected neighbourhood size `d = N·p`.
    pub fn neighborhood(&self, size: usize) -> f64 {
        size as f64 * self.p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Model(format!(
                "broadcast neighbourhood fraction p must lie in (0, 1], got {}",
                self.p
            )));
        }
        for (m, set) in &self.interference {
            if !set.contains(m) {
                return Err(Error::Model(format!(
                    "interference set of '{m}' must contain '{m}' itself"
                )));
            }
        }
        Ok(())
    }

    /// `I_m`, defaulting to `{m}` when the file gives no entry.
    pub fn interferers_of(&self, message: &str) -> BTreeSet<String> {
        self.interference
            .get(message)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([message.to_string()]))
    }
}

/// A parsed and validated model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub component: Component,
    pub channel: ChannelModel,
    pub broadcast: Option<BroadcastConfig>,
    /// Initial occupancy in state order.
    pub initial: Vec<f64>,
    /// System size `N`.
    pub size: usize,
}

// On-disk schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionSpec {
    from: String,
    to: String,
    action: ActionKind,
    rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BroadcastSpec {
    p: f64,
    #[serde(default)]
    interference: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    states: Vec<String>,
    initial: BTreeMap<String, f64>,
    transitions: Vec<TransitionSpec>,
    channel: ChannelModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    broadcast: Option<BroadcastSpec>,
    #[serde(rename = "N")]
    size: u64,
}

fn map_json_error(e: serde_json::Error) -> Error {
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => Error::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
        Category::Data => Error::Model(e.to_string()),
    }
}

/// Parses and validates a JSON model file.
pub fn parse_model(text: &str) -> Result<ModelBundle> {
    let file: ModelFile = serde_json::from_str(text).map_err(map_json_error)?;
    let index_of = |name: &str, what: &str| {
        file.states
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Model(format!("{what} refers to undeclared state '{name}'")))
    };
    let mut transitions = Vec::with_capacity(file.transitions.len());
    for (k, spec) in file.transitions.iter().enumerate() {
        let what = format!("transition {k}");
        transitions.push(Transition {
            from: index_of(&spec.from, &what)?,
            to: index_of(&spec.to, &what)?,
            action: spec.action.clone(),
            rate: spec.rate.map_or(Rate::Passive, Rate::Fixed),
        });
    }
    let component = Component::new(file.states.clone(), transitions)?;
    file.channel
        .validate()
        .map_err(|e| Error::Model(format!("channel: {e}")))?;
    if file.size < 1 {
        return Err(Error::Model("system size N must be at least 1".into()));
    }
    let size = usize::try_from(file.size)
        .map_err(|_| Error::Model(format!("system size N = {} is too large", file.size)))?;

    let family = component.family()?;
    let broadcast = match (&file.broadcast, family) {
        (Some(_), ModelFamily::SingleReceiver) => {
            return Err(Error::Model(
                "a broadcast section is not allowed for a capture/failure model".into(),
            ))
        }
        (None, ModelFamily::Broadcast) => {
            return Err(Error::Model(
                "a send/receive model needs a broadcast section".into(),
            ))
        }
        (None, _) => None,
        (Some(spec), _) => {
            let known = component.message_types();
            let mut interference = BTreeMap::new();
            for (m, list) in &spec.interference {
                for other in std::iter::once(m).chain(list) {
                    if !known.contains(other) {
                        return Err(Error::Model(format!(
                            "interference entry names unknown message type '{other}'"
                        )));
                    }
                }
                interference.insert(m.clone(), list.iter().cloned().collect::<BTreeSet<_>>());
            }
            let config = BroadcastConfig {
                p: spec.p,
                interference,
            };
            config.validate()?;
            Some(config)
        }
    };
    let initial = initial_occupancy(&component, &file.initial)?;
    Ok(ModelBundle {
        component,
        channel: file.channel,
        broadcast,
        initial,
        size,
    })
}

impl ModelBundle {
    /// Serializes back to the model-file schema (pretty JSON).
    pub fn to_json(&self) -> String {
        let states = self.component.states().to_vec();
        let file = ModelFile {
            initial: self
                .initial
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0.0)
                .map(|(k, &x)| (states[k].clone(), x))
                .collect(),
            transitions: self
                .component
                .transitions()
                .iter()
                .map(|t| TransitionSpec {
                    from: states[t.from].clone(),
                    to: states[t.to].clone(),
                    action: t.action.clone(),
                    rate: t.rate.value(),
                })
                .collect(),
            channel: self.channel,
            broadcast: self.broadcast.as_ref().map(|b| BroadcastSpec {
                p: b.p,
                interference: b
                    .interference
                    .iter()
                    .map(|(m, set)| (m.clone(), set.iter().cloned().collect()))
                    .collect(),
            }),
            size: self.size as u64,
            states,
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }
}

/// A violation of the broadcast send/receive restriction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub state: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "state '{}' can both send and receive message type '{}'",
            self.state, self.message
        )
    }
}

/// Lists states that can both send and receive the same message type.
pub fn validate_broadcast_restriction(component: &Component) -> Result<Vec<Diagnostic>> {
    if component.family()? == ModelFamily::SingleReceiver {
        return Err(Error::Inapplicable(
            "the send/receive restriction applies to broadcast models only".into(),
        ));
    }
    let mut sends: BTreeSet<(usize, &str)> = BTreeSet::new();
    let mut receives: BTreeSet<(usize, &str)> = BTreeSet::new();
    for t in component.transitions() {
        match &t.action {
            ActionKind::Send { message } => {
                sends.insert((t.from, message));
            }
            ActionKind::Receive { message } => {
                receives.insert((t.from, message));
            }
            _ => {}
        }
    }
    Ok(sends
        .intersection(&receives)
        .map(|&(state, message)| Diagnostic {
            state: component.states()[state].clone(),
            message: message.to_string(),
        })
        .collect())
}

/// Builds an occupancy vector from `state → fraction`; unnamed states get 0.
pub fn initial_occupancy(
    component: &Component,
    assignments: &BTreeMap<String, f64>,
) -> Result<Vec<f64>> {
    let mut x = vec![0.0; component.n_states()];
    for (name, &fraction) in assignments {
        let k = component.state_index(name).ok_or_else(|| {
            Error::InitialCondition(format!("unknown state '{name}' in initial condition"))
        })?;
        if !(fraction.is_finite() && fraction >= 0.0) {
            return Err(Error::InitialCondition(format!(
                "fraction for '{name}' must be finite and non-negative, got {fraction}"
            )));
        }
        x[k] = fraction;
    }
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > OCCUPANCY_SUM_TOL {
        return Err(Error::InitialCondition(format!(
            "initial fractions sum to {sum}, expected 1"
        )));
    }
    Ok(x)
}
