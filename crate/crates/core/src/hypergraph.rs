//! User footprints as a hypergraph.
//!
//! Nodes are events a profile produced (a location report, a page like, an
//! app interaction). Each selector is a predicate over events and induces a
//! hyperedge holding every event that satisfies it. Edges that match nothing
//! yet are kept aside as pending so that the edge set never contains an empty
//! subset; they join it as soon as a matching event arrives.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoPoint};
use crate::world::{PageId, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectorId(pub u32);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("event {0:?} already ingested")]
    DuplicateEvent(EventId),
    #[error("selector {0:?} already defined")]
    DuplicateSelector(SelectorId),
    #[error("unknown selector {0:?}")]
    UnknownSelector(SelectorId),
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("export: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    LocationUpdate { at: GeoPoint },
    Like { page: PageId },
    /// Anything else an app records; opaque to every selector.
    AppInteraction { app: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventNode {
    pub event_id: EventId,
    pub identity: IdentityId,
    pub t_s: f64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// Location events within `radius_m` of `center` and inside `[t_from, t_to]`.
    WithinRadius {
        center: GeoPoint,
        radius_m: f64,
        t_from: f64,
        t_to: f64,
    },
    LikesPage { page: PageId },
    Identity { identity: IdentityId },
}

impl Predicate {
    pub fn validate(&self) -> Result<(), GraphError> {
        if let Self::WithinRadius {
            radius_m, t_from, t_to, ..
        } = self
        {
            if !(radius_m.is_finite() && *radius_m > 0.0) {
                return Err(GraphError::InvalidSelector(format!("radius {radius_m}")));
            }
            if !(t_from <= t_to) {
                return Err(GraphError::InvalidSelector(format!("window [{t_from}, {t_to}]")));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, e: &EventNode) -> bool {
        match (self, &e.payload) {
            (
                Self::WithinRadius {
                    center,
                    radius_m,
                    t_from,
                    t_to,
                },
                Payload::LocationUpdate { at },
            ) => *t_from <= e.t_s && e.t_s <= *t_to && geo::haversine_m(*center, *at) <= *radius_m,
            (Self::LikesPage { page }, Payload::Like { page: p }) => page == p,
            (Self::Identity { identity }, _) => *identity == e.identity,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub id: SelectorId,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    And,
    Or,
}

#[derive(Debug, Clone, Default)]
pub struct Hypergraph {
    events: Vec<EventNode>,
    index: HashMap<EventId, usize>,
    selectors: BTreeMap<SelectorId, (Selector, BTreeSet<EventId>)>,
}

impl Hypergraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Events in insertion order.
    pub fn events(&self) -> &[EventNode] {
        &self.events
    }

    pub fn event(&self, id: EventId) -> Option<&EventNode> {
        self.index.get(&id).map(|&i| &self.events[i])
    }

    /// Earliest event by timestamp, ties by insertion order.
    pub fn earliest(&self) -> Option<&EventNode> {
        self.events.iter().reduce(|a, b| if b.t_s < a.t_s { b } else { a })
    }

    pub fn ingest(&mut self, event: EventNode) -> Result<(), GraphError> {
        if self.index.contains_key(&event.event_id) {
            return Err(GraphError::DuplicateEvent(event.event_id));
        }
        if !event.t_s.is_finite() {
            return Err(GraphError::InvalidEvent(format!("timestamp {}", event.t_s)));
        }
        for (sel, members) in self.selectors.values_mut() {
            if sel.predicate.accepts(&event) {
                members.insert(event.event_id);
            }
        }
        self.index.insert(event.event_id, self.events.len());
        self.events.push(event);
        Ok(())
    }

    /// Define a selector and return the members of its edge (empty if pending).
    pub fn define_selector(&mut self, selector: Selector) -> Result<&BTreeSet<EventId>, GraphError> {
        if self.selectors.contains_key(&selector.id) {
            return Err(GraphError::DuplicateSelector(selector.id));
        }
        selector.predicate.validate()?;
        let members = self
            .events
            .iter()
            .filter(|e| selector.predicate.accepts(e))
            .map(|e| e.event_id)
            .collect();
        let id = selector.id;
        Ok(&self.selectors.entry(id).or_insert((selector, members)).1)
    }

    pub fn selector(&self, id: SelectorId) -> Option<&Selector> {
        self.selectors.get(&id).map(|(s, _)| s)
    }

    /// The edge set: selectors with at least one member.
    pub fn edges(&self) -> impl Iterator<Item = (SelectorId, &BTreeSet<EventId>)> {
        self.selectors.iter().filter(|(_, (_, m))| !m.is_empty()).map(|(id, (_, m))| (*id, m))
    }

    /// Selectors that match no event yet.
    pub fn pending(&self) -> impl Iterator<Item = SelectorId> + '_ {
        self.selectors.iter().filter(|(_, (_, m))| m.is_empty()).map(|(id, _)| *id)
    }

    /// Identities that produced at least one event of the edge.
    pub fn identities(&self, id: SelectorId) -> Result<BTreeSet<IdentityId>, GraphError> {
        let (_, members) = self.selectors.get(&id).ok_or(GraphError::UnknownSelector(id))?;
        Ok(members.iter().map(|e| self.events[self.index[e]].identity).collect())
    }

    /// Combine the identity sets of the named edges. No selectors yields the empty set.
    pub fn query(&self, ids: &[SelectorId], combine: Combine) -> Result<BTreeSet<IdentityId>, GraphError> {
        let mut sets = ids.iter().map(|&id| self.identities(id));
        let Some(first) = sets.next() else {
            return Ok(BTreeSet::new());
        };
        sets.try_fold(first?, |acc, s| {
            let s = s?;
            Ok(match combine {
                Combine::And => acc.intersection(&s).copied().collect(),
                Combine::Or => acc.union(&s).copied().collect(),
            })
        })
    }

    /// Check every structural invariant, including that each edge is exactly
    /// what re-evaluating its predicate over all events gives.
    pub fn check(&self) -> Result<(), String> {
        if self.index.len() != self.events.len() {
            return Err("event ids not unique".into());
        }
        for (id, (sel, members)) in &self.selectors {
            let rebuilt: BTreeSet<EventId> = self
                .events
                .iter()
                .filter(|e| sel.predicate.accepts(e))
                .map(|e| e.event_id)
                .collect();
            if &rebuilt != members {
                return Err(format!("edge {id:?} differs from its predicate"));
            }
        }
        if self.edges().any(|(_, m)| m.is_empty()) {
            return Err("empty edge in edge set".into());
        }
        Ok(())
    }

    /// One JSON object per line: events in insertion order, then edges, then pending selectors.
    pub fn export_jsonl<W: io::Write>(&self, mut out: W) -> Result<(), GraphError> {
        #[derive(Serialize)]
        #[serde(tag = "type", rename_all = "snake_case")]
        enum Line<'a> {
            Event(&'a EventNode),
            Edge {
                selector: &'a Selector,
                members: &'a BTreeSet<EventId>,
            },
            Pending { selector: &'a Selector },
        }
        let io_err = |e: io::Error| GraphError::Io(e.to_string());
        let mut write = |line: Line<'_>| -> Result<(), GraphError> {
            serde_json::to_writer(&mut out, &line).map_err(|e| GraphError::Io(e.to_string()))?;
            out.write_all(b"\n").map_err(io_err)
        };
        for e in &self.events {
            write(Line::Event(e))?;
        }
        for (sel, members) in self.selectors.values().filter(|(_, m)| !m.is_empty()) {
            write(Line::Edge { selector: sel, members })?;
        }
        for (sel, _) in self.selectors.values().filter(|(_, m)| m.is_empty()) {
            write(Line::Pending { selector: sel })?;
        }
        Ok(())
    }
}

/// Footprint events for a population: one location update per user at each
/// of `times` (clamped to the user's trajectory) and one like per liked page
/// at t = 0. Identities are user ids.
pub fn events_from_population(pop: &Population, times: &[f64]) -> Vec<EventNode> {
    let mut out = Vec::new();
    let mut next = 0u64;
    let mut push = |identity: u64, t_s: f64, payload: Payload| {
        out.push(EventNode {
            event_id: EventId(next),
            identity: IdentityId(identity),
            t_s,
            payload,
        });
        next += 1;
    };
    for u in pop.users() {
        let (start, end) = u.trajectory.span();
        for &t in times {
            let at = u.position_at(t.clamp(start, end)).expect("clamped into span");
            push(u.user_id.0, t, Payload::LocationUpdate { at });
        }
        for p in &u.likes {
            push(u.user_id.0, 0.0, Payload::Like { page: *p });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EnuPoint;
    use crate::world::{generate, BoundingBox, WorldConfig};
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> GeoPoint {
        geo::from_enu(&EnuPoint::new(x, y, BoundingBox::barcelona().center())).unwrap()
    }

    fn ev(id: u64, who: u64, t: f64, payload: Payload) -> EventNode {
        EventNode {
            event_id: EventId(id),
            identity: IdentityId(who),
            t_s: t,
            payload,
        }
    }

    fn radius(id: u32, r: f64) -> Selector {
        Selector {
            id: SelectorId(id),
            predicate: Predicate::WithinRadius {
                center: p(0.0, 0.0),
                radius_m: r,
                t_from: f64::NEG_INFINITY,
                t_to: f64::INFINITY,
            },
        }
    }

    fn likes(id: u32, page: u32) -> Selector {
        Selector {
            id: SelectorId(id),
            predicate: Predicate::LikesPage { page: PageId(page) },
        }
    }

    #[test]
    fn ingest_and_duplicates() {
        let mut g = Hypergraph::new();
        g.define_selector(likes(1, 7)).unwrap();
        g.ingest(ev(1, 10, 5.0, Payload::Like { page: PageId(3) })).unwrap();
        assert_eq!(g.events().len(), 1);
        assert_eq!(g.edges().count(), 0);
        g.ingest(ev(2, 10, 6.0, Payload::Like { page: PageId(7) })).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(SelectorId(1), &BTreeSet::from([EventId(2)]))]);
        let before = g.events().to_vec();
        assert_eq!(
            g.ingest(ev(2, 11, 9.0, Payload::Like { page: PageId(7) })),
            Err(GraphError::DuplicateEvent(EventId(2)))
        );
        assert_eq!(g.events(), &before[..]);
        g.check().unwrap();
        assert_eq!(g.define_selector(likes(1, 8)).unwrap_err(), GraphError::DuplicateSelector(SelectorId(1)));
    }

    #[test]
    fn pending_until_populated() {
        let mut g = Hypergraph::new();
        g.ingest(ev(1, 1, 0.0, Payload::LocationUpdate { at: p(0.0, 0.0) })).unwrap();
        assert!(g.define_selector(likes(4, 99)).unwrap().is_empty());
        assert_eq!(g.pending().collect::<Vec<_>>(), vec![SelectorId(4)]);
        assert_eq!(g.edges().count(), 0);
        g.ingest(ev(2, 1, 1.0, Payload::Like { page: PageId(99) })).unwrap();
        assert_eq!(g.pending().count(), 0);
        assert_eq!(g.edges().count(), 1);
        g.check().unwrap();
    }

    #[test]
    fn radius_selector_membership() {
        let mut g = Hypergraph::new();
        let pts = [(0.0, 0.0), (300.0, 300.0), (499.0, 0.0), (0.0, 501.0), (-400.0, -400.0)];
        for (i, &(x, y)) in pts.iter().enumerate() {
            g.ingest(ev(i as u64, i as u64, i as f64, Payload::LocationUpdate { at: p(x, y) })).unwrap();
        }
        g.ingest(ev(9, 9, 0.0, Payload::AppInteraction { app: "x".into(), detail: "y".into() })).unwrap();
        let m = g.define_selector(radius(1, 500.0)).unwrap().clone();
        assert_eq!(m, BTreeSet::from([EventId(0), EventId(1), EventId(2)]));
        let windowed = Selector {
            id: SelectorId(2),
            predicate: Predicate::WithinRadius {
                center: p(0.0, 0.0),
                radius_m: 500.0,
                t_from: 1.0,
                t_to: 2.0,
            },
        };
        assert_eq!(g.define_selector(windowed).unwrap(), &BTreeSet::from([EventId(1), EventId(2)]));
        let bad = Selector {
            id: SelectorId(3),
            predicate: Predicate::WithinRadius {
                center: p(0.0, 0.0),
                radius_m: 0.0,
                t_from: 0.0,
                t_to: 1.0,
            },
        };
        assert!(matches!(g.define_selector(bad), Err(GraphError::InvalidSelector(_))));
        let identity = Selector {
            id: SelectorId(4),
            predicate: Predicate::Identity { identity: IdentityId(9) },
        };
        assert_eq!(g.define_selector(identity).unwrap(), &BTreeSet::from([EventId(9)]));
        g.check().unwrap();
    }

    #[test]
    fn query_combinations() {
        let mut g = Hypergraph::new();
        g.ingest(ev(1, 1, 0.0, Payload::LocationUpdate { at: p(0.0, 0.0) })).unwrap();
        g.ingest(ev(2, 1, 0.0, Payload::Like { page: PageId(5) })).unwrap();
        g.ingest(ev(3, 2, 0.0, Payload::LocationUpdate { at: p(100.0, 0.0) })).unwrap();
        g.ingest(ev(4, 3, 0.0, Payload::Like { page: PageId(5) })).unwrap();
        g.ingest(ev(5, 3, 0.0, Payload::Like { page: PageId(6) })).unwrap();
        g.define_selector(radius(1, 500.0)).unwrap();
        g.define_selector(likes(2, 5)).unwrap();
        g.define_selector(likes(3, 6)).unwrap();
        let ids = |v: &[u64]| v.iter().map(|&i| IdentityId(i)).collect::<BTreeSet<_>>();
        assert_eq!(g.query(&[SelectorId(1), SelectorId(2)], Combine::And).unwrap(), ids(&[1]));
        assert_eq!(g.query(&[SelectorId(1), SelectorId(2)], Combine::Or).unwrap(), ids(&[1, 2, 3]));
        assert_eq!(g.query(&[SelectorId(2)], Combine::Or).unwrap(), ids(&[1, 3]));
        assert_eq!(g.query(&[SelectorId(1), SelectorId(3)], Combine::And).unwrap(), ids(&[]));
        assert_eq!(g.query(&[SelectorId(8)], Combine::Or), Err(GraphError::UnknownSelector(SelectorId(8))));
    }

    #[test]
    fn earliest_and_export() {
        let mut g = Hypergraph::new();
        assert!(g.earliest().is_none());
        g.ingest(ev(1, 1, 5.0, Payload::Like { page: PageId(1) })).unwrap();
        g.ingest(ev(2, 1, 2.0, Payload::Like { page: PageId(2) })).unwrap();
        g.ingest(ev(3, 2, 2.0, Payload::Like { page: PageId(1) })).unwrap();
        assert_eq!(g.earliest().unwrap().event_id, EventId(2));
        g.define_selector(likes(1, 1)).unwrap();
        g.define_selector(likes(2, 77)).unwrap();
        let mut buf = Vec::new();
        g.export_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0]["type"], "event");
        assert_eq!(lines[0]["payload"]["kind"], "like");
        assert_eq!(lines[3]["type"], "edge");
        assert_eq!(lines[3]["members"], serde_json::json!([1, 3]));
        assert_eq!(lines[4]["type"], "pending");
    }

    fn selector_strategy() -> impl Strategy<Value = Predicate> {
        prop_oneof![
            (-4000.0..4000.0f64, -4000.0..4000.0f64, 50.0..3000.0f64, 0.0..86_400.0f64, 0.0..86_400.0f64).prop_map(|(x, y, r, a, b)| {
                Predicate::WithinRadius {
                    center: p(x, y),
                    radius_m: r,
                    t_from: a.min(b),
                    t_to: a.max(b),
                }
            }),
            (1u32..40).prop_map(|page| Predicate::LikesPage { page: PageId(page) }),
            (0u64..60).prop_map(|i| Predicate::Identity { identity: IdentityId(i) }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn edges_rebuild_and_and_within_or(n in 1usize..60, seed in 0u64..500, preds in prop::collection::vec(selector_strategy(), 1..6), interleave in 0usize..200) {
            let pop = generate(&WorldConfig { n_users: n, catalog_size: 40, like_mean: 3.0, seed, trajectory: crate::world::TrajectoryTemplate::commuter_default(), ..Default::default() }).unwrap();
            let events = events_from_population(&pop, &[0.0, 21_600.0, 43_200.0, 64_800.0]);
            let split = interleave.min(events.len());
            let mut g = Hypergraph::new();
            for e in &events[..split] {
                g.ingest(e.clone()).unwrap();
            }
            for (i, pr) in preds.iter().enumerate() {
                g.define_selector(Selector { id: SelectorId(i as u32), predicate: pr.clone() }).unwrap();
                prop_assert!(g.check().is_ok());
            }
            for e in &events[split..] {
                g.ingest(e.clone()).unwrap();
            }
            prop_assert_eq!(g.check(), Ok(()));
            let ids: Vec<SelectorId> = (0..preds.len() as u32).map(SelectorId).collect();
            let and = g.query(&ids, Combine::And).unwrap();
            let or = g.query(&ids, Combine::Or).unwrap();
            prop_assert!(and.is_subset(&or));
        }
    }
}
