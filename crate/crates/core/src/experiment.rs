//! Seeded Monte Carlo drivers shared by the scenario runner and the tests.
//!
//! Each trial builds its own small world, registers an attacker account and
//! runs the attack through the in-process client, so the same code paths
//! the service exposes are exercised end to end. Ground truth is read only
//! afterwards, to score the result.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacker::{self, AttackError, Attacker, Fix, Poi, ProbePlan, ProbeStrategy, TrackRecord};
use crate::geo::{self, EnuPoint, GeoPoint};
use crate::mlat::SolverConfig;
use crate::report::trace::AttackTrace;
use crate::service::{LocalClient, ProximityApi, Service, ServiceConfig, ServiceError};
use crate::socialgraph::{self, IdentificationResult, IdentifyConfig, SocialError, SocialGraph};
use crate::world::{self, DisclosurePolicy, Population, TrajectoryTemplate, UserId, World, WorldConfig, WorldError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Social(#[from] SocialError),
}

/// Largest distance between the attacker's starting point and the target.
pub const ATTACKER_OFFSET_M: f64 = 500.0;

const ATTACKER_BIRTHDATE: (i32, u32, u32) = (1960, 1, 1);

fn attacker_birthdate() -> NaiveDate {
    let (y, m, d) = ATTACKER_BIRTHDATE;
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

/// A uniformly random point within `radius_m` of `center`.
pub fn point_in_disk(center: GeoPoint, radius_m: f64, rng: &mut impl Rng) -> GeoPoint {
    let r = radius_m * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    geo::from_enu(&EnuPoint::new(r * a.cos(), r * a.sin(), center)).expect("small offset stays in plane")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeSpec {
    pub world: WorldConfig,
    pub plan: PlanShape,
    pub probes: usize,
    pub ring_radius_m: f64,
    pub solver: SolverConfig,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanShape {
    #[default]
    Ring,
    Adaptive,
}

impl LocalizeSpec {
    fn plan(&self, center: GeoPoint) -> ProbePlan {
        let strategy = match self.plan {
            PlanShape::Ring => ProbeStrategy::Ring {
                radius_m: self.ring_radius_m,
            },
            PlanShape::Adaptive => ProbeStrategy::Adaptive {
                radius_m: self.ring_radius_m,
            },
        };
        ProbePlan {
            center,
            count: self.probes,
            strategy,
        }
    }
}

impl Default for LocalizeSpec {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                n_users: 20,
                ..Default::default()
            },
            plan: PlanShape::Ring,
            probes: 16,
            ring_radius_m: 1000.0,
            solver: SolverConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeTrial {
    pub seed: u64,
    pub error_m: f64,
    pub fix: Fix,
    pub truth: GeoPoint,
    pub trace: AttackTrace,
}

impl LocalizeTrial {
    /// Ground truth in the frame of the fix.
    pub fn truth_enu(&self) -> EnuPoint {
        geo::to_enu(self.truth, self.fix.estimate.p_hat.reference).expect("truth near the probes")
    }
}

/// One localization of the first generated user at t = 0, the attacker
/// starting within [`ATTACKER_OFFSET_M`] of it and probing around its start.
/// The attacker assumes the policy's rounding step, which apps make visible.
pub fn localize_trial(spec: &LocalizeSpec, policy: &DisclosurePolicy, seed: u64) -> Result<LocalizeTrial, ExperimentError> {
    let pop = world::generate(&WorldConfig {
        seed,
        ..spec.world.clone()
    })?;
    let target = pop.users()[0].user_id;
    let truth = pop.users()[0].position_at(0.0)?;
    let mut svc = Service::new(World::new(pop, *policy, seed)?, spec.service);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77A_C4E5);
    let start = point_in_disk(truth, ATTACKER_OFFSET_M, &mut rng);
    let token = svc.register("Mallory", attacker_birthdate(), start, BTreeSet::new())?;
    let mut attacker = Attacker::new(LocalClient::login(&mut svc, &token)?, policy.distance_quantum_m);
    attacker.client.nearby(2.0 * ATTACKER_OFFSET_M)?;
    let solver = SolverConfig { seed, ..spec.solver };
    let fix = attacker.localize(target, &spec.plan(start), &solver)?;
    let error_m = geo::haversine_m(geo::from_enu(&fix.estimate.p_hat).map_err(AttackError::from)?, truth);
    Ok(LocalizeTrial {
        seed,
        error_m,
        fix,
        truth,
        trace: attacker.trace,
    })
}

/// Errors of `trials` localizations with seeds `base_seed..base_seed + trials`.
pub fn localize_errors(spec: &LocalizeSpec, policy: &DisclosurePolicy, base_seed: u64, trials: usize) -> Result<Vec<f64>, ExperimentError> {
    (0..trials as u64)
        .map(|k| localize_trial(spec, policy, base_seed + k).map(|t| t.error_m))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// The world's trajectory template decides how the target moves.
    pub localize: LocalizeSpec,
    pub interval_s: f64,
    pub duration_s: f64,
    pub poi_radius_m: f64,
    pub poi_min_dwell_s: f64,
}

impl Default for TrackSpec {
    fn default() -> Self {
        let base = LocalizeSpec::default();
        Self {
            localize: LocalizeSpec {
                world: WorldConfig {
                    trajectory: TrajectoryTemplate::commuter_default(),
                    ..base.world.clone()
                },
                ..base
            },
            interval_s: 3600.0,
            duration_s: 17.0 * 3600.0,
            poi_radius_m: attacker::DEFAULT_POI_RADIUS_M,
            poi_min_dwell_s: 2.0 * 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackTrial {
    pub seed: u64,
    pub track: TrackRecord,
    pub pois: Vec<Poi>,
    /// Distinct positions the target dwells at, in visiting order.
    pub stay_sites: Vec<GeoPoint>,
    pub trace: AttackTrace,
}

impl TrackTrial {
    /// Distance from each POI to the nearest true stay site.
    pub fn poi_errors_m(&self) -> Vec<f64> {
        self.pois
            .iter()
            .map(|p| {
                let at = geo::from_enu(&p.center).expect("estimate near the probes");
                self.stay_sites.iter().map(|s| geo::haversine_m(at, *s)).fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

/// Track one target over `duration_s` and extract its stay points.
pub fn track_trial(spec: &TrackSpec, policy: &DisclosurePolicy, seed: u64) -> Result<TrackTrial, ExperimentError> {
    let pop = world::generate(&WorldConfig {
        span_s: spec.localize.world.span_s.max(spec.duration_s),
        seed,
        ..spec.localize.world.clone()
    })?;
    let target = pop.users()[0].user_id;
    let wps = pop.users()[0].trajectory.waypoints();
    let mut stay_sites: Vec<GeoPoint> = Vec::new();
    for w in wps.windows(2) {
        if w[0].1 == w[1].1 && !stay_sites.contains(&w[0].1) {
            stay_sites.push(w[0].1);
        }
    }
    if stay_sites.is_empty() {
        stay_sites.push(wps[0].1);
    }
    let home = wps[0].1;
    let mut svc = Service::new(World::new(pop, *policy, seed)?, spec.localize.service);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_0001);
    let start = point_in_disk(home, ATTACKER_OFFSET_M, &mut rng);
    let token = svc.register("Mallory", attacker_birthdate(), start, BTreeSet::new())?;
    let mut attacker = Attacker::new(LocalClient::login(&mut svc, &token)?, policy.distance_quantum_m);
    attacker.client.nearby(2.0 * ATTACKER_OFFSET_M)?;
    let solver = SolverConfig { seed, ..spec.localize.solver };
    let plan = spec.localize.plan(start);
    let mut track = attacker.track(target, spec.interval_s, spec.duration_s, &plan, &solver)?;
    let pois = attacker::extract_pois(&track, spec.poi_radius_m, spec.poi_min_dwell_s);
    track.pois = pois.clone();
    Ok(TrackTrial {
        seed,
        track,
        pois,
        stay_sites,
        trace: attacker.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifySpec {
    pub world: WorldConfig,
    pub victims: usize,
    /// Number of most popular pages the attacker likes before starting.
    pub attacker_top_likes: usize,
    pub identify: IdentifyConfig,
    pub service: ServiceConfig,
}

impl Default for IdentifySpec {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                n_users: 10_000,
                like_mean: 6.0,
                ..Default::default()
            },
            victims: 100,
            attacker_top_likes: 10,
            identify: IdentifyConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyRun {
    pub victim: UserId,
    pub truth: world::SocialId,
    pub result: IdentificationResult,
}

impl IdentifyRun {
    pub fn identified(&self) -> bool {
        self.result.social_id == Some(self.truth)
    }
}

/// Run the identification attack against `spec.victims` victims drawn from
/// one population. The attacker's likes are reset before each victim.
pub fn identify_batch(spec: &IdentifySpec, policy: &DisclosurePolicy, seed: u64, trace: Option<&mut AttackTrace>) -> Result<Vec<IdentifyRun>, ExperimentError> {
    let pop = world::generate(&WorldConfig { seed, ..spec.world.clone() })?;
    identify_in(&pop, spec, policy, seed, trace)
}

/// [`identify_batch`] over an existing population.
pub fn identify_in(pop: &Population, spec: &IdentifySpec, policy: &DisclosurePolicy, seed: u64, mut trace: Option<&mut AttackTrace>) -> Result<Vec<IdentifyRun>, ExperimentError> {
    let graph = SocialGraph::new(pop);
    let victims: Vec<usize> = (0..spec.victims as u64).map(|k| victim_index(pop.len(), seed + k)).collect();
    let start_likes = pop.catalog().top(spec.attacker_top_likes);
    let mut svc = Service::new(World::new(pop.clone(), *policy, seed)?, spec.service);
    let here = pop.users()[0].position_at(0.0)?;
    let token = svc.register("Mallory", attacker_birthdate(), here, start_likes.clone())?;
    let mut client = LocalClient::login(&mut svc, &token)?;
    client.nearby(1e7)?;
    let cfg = IdentifyConfig {
        exclude: None,
        ..spec.identify.clone()
    };
    let mut runs = Vec::with_capacity(victims.len());
    for v in victims {
        let victim = &pop.users()[v];
        client.set_likes(start_likes.clone())?;
        let result = socialgraph::identify_via(&mut client, victim.user_id, &graph, &cfg, trace.as_deref_mut())?;
        runs.push(IdentifyRun {
            victim: victim.user_id,
            truth: victim.social_id,
            result,
        });
    }
    Ok(runs)
}

/// The victim picked by run seed `run_seed` in a population of `n`.
pub fn victim_index(n: usize, run_seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(run_seed ^ 0x1D_E471F7).random_range(0..n)
}

pub fn identification_rate(runs: &[IdentifyRun]) -> f64 {
    if runs.is_empty() {
        return 0.0;
    }
    runs.iter().filter(|r| r.identified()).count() as f64 / runs.len() as f64
}

/// Fraction of the population sharing at least one like with an attacker
/// who likes the `top` most popular pages.
pub fn overlap_fraction(cfg: &WorldConfig, top: usize) -> Result<f64, ExperimentError> {
    let pop = world::generate(cfg)?;
    Ok(pop.overlap_fraction(&pop.catalog().top(top), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::median;

    #[test]
    fn exact_trials_are_tight() {
        let spec = LocalizeSpec {
            probes: 4,
            ..Default::default()
        };
        for seed in 0..10 {
            let t = localize_trial(&spec, &DisclosurePolicy::tinder(), seed).unwrap();
            assert!(t.error_m < 0.5, "seed {seed}: {}", t.error_m);
            assert!(t.trace.len() >= 9);
        }
    }

    #[test]
    fn trials_are_deterministic() {
        let spec = LocalizeSpec::default();
        let a = localize_trial(&spec, &DisclosurePolicy::tinder(), 7).unwrap();
        let b = localize_trial(&spec, &DisclosurePolicy::tinder(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.truth_enu().distance_to(&a.fix.estimate.p_hat) - a.error_m < 1e-3);
    }

    #[test]
    fn quantized_median_is_small() {
        let policy = DisclosurePolicy {
            distance_quantum_m: 100.0,
            ..DisclosurePolicy::tinder()
        };
        let errs = localize_errors(&LocalizeSpec::default(), &policy, 1000, 30).unwrap();
        assert!(median(&errs) <= 50.0, "{}", median(&errs));
    }

    #[test]
    fn commuter_track_finds_home_and_work() {
        let policy = DisclosurePolicy {
            distance_quantum_m: 100.0,
            ..DisclosurePolicy::tinder()
        };
        let t = track_trial(&TrackSpec::default(), &policy, 3).unwrap();
        assert_eq!(t.stay_sites.len(), 2);
        assert_eq!(t.track.estimates.len(), 18);
        assert_eq!(t.pois.len(), 2);
        assert!(t.poi_errors_m().iter().all(|e| *e <= 200.0));
    }

    #[test]
    fn identification_batch_is_sound() {
        let spec = IdentifySpec {
            world: WorldConfig {
                n_users: 1500,
                like_mean: 6.0,
                ..Default::default()
            },
            victims: 20,
            ..Default::default()
        };
        let mut tr = AttackTrace::new();
        let runs = identify_batch(&spec, &DisclosurePolicy::tinder(), 4, Some(&mut tr)).unwrap();
        assert_eq!(runs.len(), 20);
        for r in &runs {
            assert!(r.result.final_pool.contains(&r.truth));
        }
        assert!(identification_rate(&runs) > 0.5);
        assert!(!tr.is_empty());
    }

    #[test]
    fn overlap_near_anchor() {
        let f = overlap_fraction(&WorldConfig::default(), 10).unwrap();
        assert!((0.05..0.45).contains(&f), "{f}");
    }
}
