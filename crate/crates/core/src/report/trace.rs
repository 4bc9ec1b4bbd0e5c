//! Append-only audit log of attacker actions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EnuPoint, GeoPoint};
use crate::world::UserId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    /// The attacker moved its own reported position.
    Probe { t_s: f64, target: UserId, at: GeoPoint },
    /// The attacker read a target's profile.
    ProfilePoll {
        t_s: f64,
        target: UserId,
        distance_m: Option<f64>,
    },
    /// A position fix computed from earlier probes, listed by trace index.
    LocalizeResult {
        t_s: f64,
        target: UserId,
        estimate: EnuPoint,
        residual: f64,
        probes: Vec<usize>,
    },
    IdentifyRound {
        t_s: f64,
        round: u32,
        pool_size: usize,
        pages_liked: usize,
    },
    Export { t_s: f64, artifact: String },
}

impl TraceEvent {
    pub fn t_s(&self) -> f64 {
        match self {
            Self::Probe { t_s, .. }
            | Self::ProfilePoll { t_s, .. }
            | Self::LocalizeResult { t_s, .. }
            | Self::IdentifyRound { t_s, .. }
            | Self::Export { t_s, .. } => *t_s,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Probe { .. } => "probe",
            Self::ProfilePoll { .. } => "profile_poll",
            Self::LocalizeResult { .. } => "localize_result",
            Self::IdentifyRound { .. } => "identify_round",
            Self::Export { .. } => "export",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("event at t={got} precedes last event at t={last}")]
    TimeTravel { last: f64, got: f64 },
    #[error("localize result references {0}, which is not an earlier probe")]
    DanglingProbe(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    events: Vec<TraceEvent>,
}

impl AttackTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time of the latest event, 0 for an empty trace.
    pub fn last_t(&self) -> f64 {
        self.events.last().map_or(0.0, TraceEvent::t_s)
    }

    /// Append an event and return its index.
    pub fn push(&mut self, event: TraceEvent) -> Result<usize, TraceError> {
        let last = self.last_t();
        if event.t_s() < last || event.t_s().is_nan() {
            return Err(TraceError::TimeTravel { last, got: event.t_s() });
        }
        if let TraceEvent::LocalizeResult { probes, .. } = &event {
            if let Some(&bad) = probes
                .iter()
                .find(|&&i| !matches!(self.events.get(i), Some(TraceEvent::Probe { .. })))
            {
                return Err(TraceError::DanglingProbe(bad));
            }
        }
        self.events.push(event);
        Ok(self.events.len() - 1)
    }

    /// Probe positions feeding the localize result at `index`.
    pub fn probes_of(&self, index: usize) -> Vec<GeoPoint> {
        match self.events.get(index) {
            Some(TraceEvent::LocalizeResult { probes, .. }) => probes
                .iter()
                .filter_map(|&i| match &self.events[i] {
                    TraceEvent::Probe { at, .. } => Some(*at),
                    _ => None,
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}
