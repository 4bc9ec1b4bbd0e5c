//! Privacy-violation labels for attack traces.
//!
//! Four categories (collection, processing, dissemination, invasion), each
//! with its named activities. Each trace event kind maps to a fixed list of
//! activities. A target that was localized at least twice was tracked, and
//! those fixes also count as an intrusion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::trace::{AttackTrace, TraceEvent};
use crate::world::UserId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Collection,
    Processing,
    Dissemination,
    Invasion,
}

impl Category {
    pub const ALL: [Category; 4] = [Self::Collection, Self::Processing, Self::Dissemination, Self::Invasion];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Activity {
    Surveillance,
    InformationProbing,
    Interrogation,
    Aggregation,
    Identification,
    Insecurity,
    SecondaryUse,
    Exclusion,
    BreachOfConfidentiality,
    Disclosure,
    Exposure,
    IncreasedAccessibility,
    Appropriation,
    Distortion,
    Intrusion,
}

impl Activity {
    pub const ALL: [Activity; 15] = [
        Self::Surveillance,
        Self::InformationProbing,
        Self::Interrogation,
        Self::Aggregation,
        Self::Identification,
        Self::Insecurity,
        Self::SecondaryUse,
        Self::Exclusion,
        Self::BreachOfConfidentiality,
        Self::Disclosure,
        Self::Exposure,
        Self::IncreasedAccessibility,
        Self::Appropriation,
        Self::Distortion,
        Self::Intrusion,
    ];

    pub fn category(self) -> Category {
        use Activity::*;
        match self {
            Surveillance | InformationProbing | Interrogation => Category::Collection,
            Aggregation | Identification | Insecurity | SecondaryUse | Exclusion => Category::Processing,
            BreachOfConfidentiality | Disclosure | Exposure | IncreasedAccessibility | Appropriation | Distortion => Category::Dissemination,
            Intrusion => Category::Invasion,
        }
    }

    pub fn label(self) -> &'static str {
        use Activity::*;
        match self {
            Surveillance => "Surveillance",
            InformationProbing => "Information probing",
            Interrogation => "Interrogation",
            Aggregation => "Aggregation",
            Identification => "Identification",
            Insecurity => "Insecurity",
            SecondaryUse => "Secondary use",
            Exclusion => "Exclusion",
            BreachOfConfidentiality => "Breach of confidentiality",
            Disclosure => "Disclosure",
            Exposure => "Exposure",
            IncreasedAccessibility => "Increased accessibility",
            Appropriation => "Appropriation",
            Distortion => "Distortion",
            Intrusion => "Intrusion",
        }
    }
}

/// Which activities each event kind exercises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    /// Keyed by event kind (`probe`, `profile_poll`, ...). Every kind needs a non-empty list.
    pub by_kind: BTreeMap<String, Vec<Activity>>,
    /// Localizations of one target needed before they count as tracking.
    pub tracking_fixes: usize,
}

impl Default for Mapping {
    fn default() -> Self {
        use Activity::*;
        let by_kind = [
            ("probe", vec![Surveillance]),
            ("profile_poll", vec![Surveillance]),
            ("localize_result", vec![Identification, Aggregation]),
            ("identify_round", vec![Identification, Aggregation]),
            ("export", vec![IncreasedAccessibility]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            by_kind,
            tracking_fixes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// Labels per trace event, in trace order.
    pub labels: Vec<BTreeSet<Activity>>,
    /// Events carrying at least one label of the category.
    pub categories: BTreeMap<Category, usize>,
    pub activities: BTreeMap<Activity, usize>,
    /// Activities no event exercised.
    pub unexercised: Vec<Activity>,
}

impl ViolationReport {
    pub fn has(&self, c: Category) -> bool {
        self.categories.get(&c).copied().unwrap_or(0) > 0
    }
}

/// Label a trace. Event kinds missing from the mapping fall back to the default mapping.
pub fn classify(trace: &AttackTrace, mapping: &Mapping) -> ViolationReport {
    let fallback = Mapping::default();
    let mut fixes: BTreeMap<UserId, usize> = BTreeMap::new();
    for e in trace.events() {
        if let TraceEvent::LocalizeResult { target, .. } = e {
            *fixes.entry(*target).or_default() += 1;
        }
    }
    let labels: Vec<BTreeSet<Activity>> = trace
        .events()
        .iter()
        .map(|e| {
            let mut set: BTreeSet<Activity> = mapping
                .by_kind
                .get(e.kind())
                .filter(|v| !v.is_empty())
                .or_else(|| fallback.by_kind.get(e.kind()))
                .into_iter()
                .flatten()
                .copied()
                .collect();
            if let TraceEvent::LocalizeResult { target, .. } = e {
                if fixes[target] >= mapping.tracking_fixes.max(1) {
                    set.insert(Activity::Intrusion);
                }
            }
            set
        })
        .collect();
    let mut categories: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    let mut activities: BTreeMap<Activity, usize> = Activity::ALL.iter().map(|a| (*a, 0)).collect();
    for set in &labels {
        let cats: BTreeSet<Category> = set.iter().map(|a| a.category()).collect();
        for c in cats {
            *categories.get_mut(&c).unwrap() += 1;
        }
        for a in set {
            *activities.get_mut(a).unwrap() += 1;
        }
    }
    let unexercised = activities.iter().filter(|(_, n)| **n == 0).map(|(a, _)| *a).collect();
    ViolationReport {
        labels,
        categories,
        activities,
        unexercised,
    }
}
