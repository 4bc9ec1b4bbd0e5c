//! The adversary: probe placement, localization, tracking and stay points.
//!
//! Everything here goes through a [`ProximityApi`] client. The attacker sees
//! exactly what the service discloses: its own probe positions, the reported
//! (quantized) distances and the sim time stamped on each acknowledgement.

use std::f64::consts::TAU;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, EnuPoint, GeoError, GeoPoint};
use crate::mlat::{self, DistanceSample, MlatError, PositionEstimate, SolverConfig};
use crate::report::trace::{AttackTrace, TraceError, TraceEvent};
use crate::service::{ProximityApi, ServiceError};
use crate::world::UserId;

pub const DEFAULT_POI_RADIUS_M: f64 = 200.0;
pub const DEFAULT_POI_MIN_DWELL_S: f64 = 1800.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("service: {0}")]
    Service(#[from] ServiceError),
    #[error("solver: {0}")]
    Solver(#[from] MlatError),
    #[error("geometry: {0}")]
    Geo(#[from] GeoError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
    #[error("the service does not disclose distances under the active policy")]
    DistanceNotDisclosed,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeStrategy {
    /// `count` points equally spaced on a circle around the plan center.
    Ring { radius_m: f64 },
    /// A first ring around the plan center, then a second ring of the same
    /// radius around the intermediate estimate.
    Adaptive { radius_m: f64 },
    /// Explicit positions; `count` must equal their number.
    FixedPoints { points: Vec<GeoPoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub center: GeoPoint,
    pub count: usize,
    pub strategy: ProbeStrategy,
}

impl ProbePlan {
    pub fn ring(center: GeoPoint, count: usize, radius_m: f64) -> Self {
        Self {
            center,
            count,
            strategy: ProbeStrategy::Ring { radius_m },
        }
    }

    pub fn fixed(points: Vec<GeoPoint>) -> Option<Self> {
        Some(Self {
            center: *points.first()?,
            count: points.len(),
            strategy: ProbeStrategy::FixedPoints { points },
        })
    }

    /// Counts below three are accepted here; the solver reports them as underdetermined.
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.count == 0 {
            return Err(AttackError::InvalidPlan("count must be positive".into()));
        }
        match &self.strategy {
            ProbeStrategy::Ring { radius_m } | ProbeStrategy::Adaptive { radius_m } => {
                if !(radius_m.is_finite() && *radius_m > 0.0) {
                    return Err(AttackError::InvalidPlan(format!("ring radius {radius_m}")));
                }
                if *radius_m >= geo::MAX_PLANE_DISTANCE_M {
                    return Err(AttackError::InvalidPlan(format!("ring radius {radius_m} beyond local plane")));
                }
            }
            ProbeStrategy::FixedPoints { points } => {
                if points.len() != self.count {
                    return Err(AttackError::InvalidPlan(format!("{} points for count {}", points.len(), self.count)));
                }
            }
        }
        Ok(())
    }

    /// The same plan moved to a new center. Fixed points do not move.
    pub fn recentered(&self, center: GeoPoint) -> Self {
        match self.strategy {
            ProbeStrategy::FixedPoints { .. } => self.clone(),
            _ => Self {
                center,
                ..self.clone()
            },
        }
    }
}

/// Equally spaced points on a circle in the plane tangent at `center`.
pub fn ring_points(center: GeoPoint, count: usize, radius_m: f64) -> Result<Vec<GeoPoint>, GeoError> {
    (0..count)
        .map(|k| {
            let a = TAU * k as f64 / count as f64;
            geo::from_enu(&EnuPoint::new(radius_m * a.cos(), radius_m * a.sin(), center))
        })
        .collect()
}

/// A position fix together with the samples it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Fix {
    pub estimate: PositionEstimate,
    pub samples: Vec<DistanceSample>,
    pub t_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub center: EnuPoint,
    pub dwell_s: f64,
    pub start_t: f64,
    pub end_t: f64,
    pub fixes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub target_id: UserId,
    /// Frame all estimates are expressed in.
    pub reference: GeoPoint,
    pub estimates: Vec<(f64, PositionEstimate)>,
    /// Fixes that failed, with the reason.
    pub gaps: Vec<(f64, String)>,
    pub pois: Vec<Poi>,
}

impl TrackRecord {
    /// Write `t_s,est_x_m,est_y_m,residual_m`, one row per estimate.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), AttackError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "est_x_m", "est_y_m", "residual_m"])
            .map_err(|e| AttackError::Csv(e.to_string()))?;
        for (t, e) in &self.estimates {
            w.serialize((t, e.p_hat.x_m, e.p_hat.y_m, e.residual))
                .map_err(|e| AttackError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| AttackError::Csv(e.to_string()))
    }
}

/// An attacker session: a client, the attacker's belief about the distance
/// rounding step, and the audit trace of everything it does.
pub struct Attacker<C> {
    pub client: C,
    /// Rounding step the app is known to apply to displayed distances; 0 if exact.
    pub assumed_quantum_m: f64,
    pub trace: AttackTrace,
}

impl<C: ProximityApi> Attacker<C> {
    pub fn new(client: C, assumed_quantum_m: f64) -> Self {
        Self {
            client,
            assumed_quantum_m,
            trace: AttackTrace::new(),
        }
    }

    /// Move to `at` and read the target's distance.
    fn probe(&mut self, target: UserId, at: GeoPoint, reference: GeoPoint) -> Result<(usize, DistanceSample), AttackError> {
        let ack = self.client.update_location(at)?;
        let idx = self.trace.push(TraceEvent::Probe {
            t_s: ack.t_s,
            target,
            at,
        })?;
        let entry = self.client.profile(target)?;
        self.trace.push(TraceEvent::ProfilePoll {
            t_s: ack.t_s,
            target,
            distance_m: entry.distance_m,
        })?;
        let reported = entry.distance_m.ok_or(AttackError::DistanceNotDisclosed)?;
        let observer = geo::to_enu(at, reference)?;
        Ok((idx, DistanceSample::new(observer, reported, ack.t_s, self.assumed_quantum_m)?))
    }

    fn probe_all(&mut self, target: UserId, points: &[GeoPoint], reference: GeoPoint, idx: &mut Vec<usize>, samples: &mut Vec<DistanceSample>) -> Result<(), AttackError> {
        for &p in points {
            let (i, s) = self.probe(target, p, reference)?;
            idx.push(i);
            samples.push(s);
        }
        Ok(())
    }

    /// Estimate the target's current position. The estimate is expressed in
    /// the plane tangent at `plan.center`.
    pub fn localize(&mut self, target: UserId, plan: &ProbePlan, cfg: &SolverConfig) -> Result<Fix, AttackError> {
        plan.validate()?;
        cfg.validate()?;
        let reference = plan.center;
        let mut idx = Vec::with_capacity(plan.count);
        let mut samples = Vec::with_capacity(plan.count);
        match &plan.strategy {
            ProbeStrategy::Ring { radius_m } => {
                let pts = ring_points(reference, plan.count, *radius_m)?;
                self.probe_all(target, &pts, reference, &mut idx, &mut samples)?;
            }
            ProbeStrategy::FixedPoints { points } => {
                self.probe_all(target, points, reference, &mut idx, &mut samples)?;
            }
            ProbeStrategy::Adaptive { radius_m } => {
                let first = plan.count.div_ceil(2).max(3).min(plan.count);
                let pts = ring_points(reference, first, *radius_m)?;
                self.probe_all(target, &pts, reference, &mut idx, &mut samples)?;
                if plan.count > first {
                    let rough = mlat::multilaterate(&samples, cfg)?;
                    let pts = ring_points(geo::from_enu(&rough.p_hat)?, plan.count - first, *radius_m)?;
                    self.probe_all(target, &pts, reference, &mut idx, &mut samples)?;
                }
            }
        }
        let estimate = mlat::multilaterate(&samples, cfg)?;
        let t_s = self.trace.last_t();
        self.trace.push(TraceEvent::LocalizeResult {
            t_s,
            target,
            estimate: estimate.p_hat,
            residual: estimate.residual,
            probes: idx,
        })?;
        Ok(Fix { estimate, samples, t_s })
    }

    /// Localize every `interval_s` of sim time over `duration_s`, starting now.
    /// Each fix re-centers the plan on the previous estimate. Failed fixes are
    /// recorded as gaps; only a clock or policy failure aborts the track.
    pub fn track(&mut self, target: UserId, interval_s: f64, duration_s: f64, plan: &ProbePlan, cfg: &SolverConfig) -> Result<TrackRecord, AttackError> {
        if !(interval_s > 0.0 && interval_s.is_finite()) || !(duration_s >= 0.0 && duration_s.is_finite()) {
            return Err(AttackError::InvalidPlan(format!("interval {interval_s}, duration {duration_s}")));
        }
        plan.validate()?;
        let reference = plan.center;
        let start = self.trace.last_t();
        let fixes = (duration_s / interval_s).floor() as u64 + 1;
        let mut record = TrackRecord {
            target_id: target,
            reference,
            estimates: Vec::new(),
            gaps: Vec::new(),
            pois: Vec::new(),
        };
        let mut current = plan.clone();
        for k in 0..fixes {
            let t = start + k as f64 * interval_s;
            let now = self.client.wait_until(t)?;
            match self.localize(target, &current, cfg) {
                Ok(fix) => {
                    let g = geo::from_enu(&fix.estimate.p_hat)?;
                    let mut est = fix.estimate;
                    est.p_hat = geo::to_enu(g, reference)?;
                    record.estimates.push((now, est));
                    current = plan.recentered(g);
                }
                Err(AttackError::DistanceNotDisclosed) => return Err(AttackError::DistanceNotDisclosed),
                Err(e) => record.gaps.push((now, e.to_string())),
            }
        }
        Ok(record)
    }
}

/// Stay-point detection. The track is cut greedily into maximal windows whose
/// fixes each lie within `radius_m` of the window's running centroid when
/// added; every window spanning at least `min_dwell_s` becomes a POI at its
/// centroid.
pub fn extract_pois(track: &TrackRecord, radius_m: f64, min_dwell_s: f64) -> Vec<Poi> {
    stay_windows(&track.estimates, radius_m)
        .into_iter()
        .filter(|p| p.dwell_s >= min_dwell_s)
        .collect()
}

fn stay_windows(estimates: &[(f64, PositionEstimate)], radius_m: f64) -> Vec<Poi> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < estimates.len() {
        let first = estimates[i].1.p_hat;
        let (mut sx, mut sy, mut n) = (first.x_m, first.y_m, 1.0);
        let mut j = i + 1;
        while j < estimates.len() {
            let p = estimates[j].1.p_hat;
            let c = EnuPoint::new(sx / n, sy / n, first.reference);
            if c.distance_to(&p) > radius_m {
                break;
            }
            sx += p.x_m;
            sy += p.y_m;
            n += 1.0;
            j += 1;
        }
        let (start_t, end_t) = (estimates[i].0, estimates[j - 1].0);
        out.push(Poi {
            center: EnuPoint::new(sx / n, sy / n, first.reference),
            dwell_s: end_t - start_t,
            start_t,
            end_t,
            fixes: j - i,
        });
        i = j;
    }
    out
}
