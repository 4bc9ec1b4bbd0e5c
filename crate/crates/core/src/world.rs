//! Synthetic ground truth: users, their movements and page likes, and the
//! disclosure policy that decides which of those facts the service reveals.
//!
//! Everything here is reproducible from a [`WorldConfig`] and its seed.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use chrono::{Datelike, Days, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoError, GeoPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutsideSpan { t: f64, start: f64, end: f64 },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("invalid trajectory: {0}")]
    Trajectory(&'static str),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

macro_rules! id_type {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(UserId, u64, "u");
id_type!(SocialId, u64, "s");
id_type!(PageId, u32, "p");
id_type!(CategoryId, u16, "c");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub id: PageId,
    pub category: CategoryId,
    /// 1 is the most liked page.
    pub rank: u32,
}

/// Pages ordered by popularity; page `k` (1-based) has rank `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageCatalog {
    pages: Vec<Page>,
}

impl PageCatalog {
    pub fn generate(size: usize, categories: u16, rng: &mut impl Rng) -> Self {
        let pages = (1..=size as u32)
            .map(|rank| Page {
                id: PageId(rank),
                category: CategoryId(rng.random_range(0..categories.max(1))),
                rank,
            })
            .collect();
        Self { pages }
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn page(&self, id: PageId) -> Option<&Page> {
        (id.0 as usize).checked_sub(1).and_then(|i| self.pages.get(i))
    }

    pub fn category_of(&self, id: PageId) -> Option<CategoryId> {
        self.page(id).map(|p| p.category)
    }

    pub fn contains(&self, id: PageId) -> bool {
        self.page(id).is_some()
    }

    /// The `n` most liked pages.
    pub fn top(&self, n: usize) -> BTreeSet<PageId> {
        self.pages.iter().take(n).map(|p| p.id).collect()
    }
}

/// Time-stamped waypoints, linearly interpolated in the local plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    waypoints: Vec<(f64, GeoPoint)>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<(f64, GeoPoint)>) -> Result<Self, WorldError> {
        if waypoints.is_empty() {
            return Err(WorldError::Trajectory("no waypoints"));
        }
        if waypoints.iter().any(|(t, _)| !t.is_finite()) {
            return Err(WorldError::Trajectory("non-finite timestamp"));
        }
        if waypoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(WorldError::Trajectory("timestamps must be strictly increasing"));
        }
        Ok(Self { waypoints })
    }

    pub fn stationary(p: GeoPoint, start: f64, end: f64) -> Result<Self, WorldError> {
        if end > start {
            Self::new(vec![(start, p), (end, p)])
        } else {
            Self::new(vec![(start, p)])
        }
    }

    pub fn waypoints(&self) -> &[(f64, GeoPoint)] {
        &self.waypoints
    }

    pub fn span(&self) -> (f64, f64) {
        (self.waypoints[0].0, self.waypoints[self.waypoints.len() - 1].0)
    }

    pub fn position_at(&self, t: f64) -> Result<GeoPoint, WorldError> {
        let (start, end) = self.span();
        if !(start..=end).contains(&t) {
            return Err(WorldError::OutsideSpan { t, start, end });
        }
        let idx = self.waypoints.partition_point(|(wt, _)| *wt <= t);
        let (t0, p0) = self.waypoints[idx - 1];
        if t == t0 || idx == self.waypoints.len() {
            return Ok(p0);
        }
        let (t1, p1) = self.waypoints[idx];
        if p0 == p1 {
            return Ok(p0);
        }
        let frac = (t - t0) / (t1 - t0);
        let end = geo::to_enu(p1, p0)?;
        let mid = geo::EnuPoint::new(end.x_m * frac, end.y_m * frac, p0);
        Ok(geo::from_enu(&mid)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthdateMode {
    Exact,
    Fuzzy15d,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterestsMode {
    Pages,
    Categories,
    Hidden,
}

/// What the service reveals about other users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisclosurePolicy {
    pub share_distance: bool,
    /// 0 reports exact distances.
    pub distance_quantum_m: f64,
    pub share_first_name: bool,
    pub birthdate_mode: BirthdateMode,
    pub interests_mode: InterestsMode,
    pub share_social_id: bool,
}

impl DisclosurePolicy {
    /// First name, fuzzy birthdate, common pages and distance.
    pub fn tinder() -> Self {
        Self {
            share_distance: true,
            distance_quantum_m: 0.0,
            share_first_name: true,
            birthdate_mode: BirthdateMode::Fuzzy15d,
            interests_mode: InterestsMode::Pages,
            share_social_id: false,
        }
    }

    pub fn happn() -> Self {
        Self {
            birthdate_mode: BirthdateMode::Hidden,
            share_social_id: true,
            ..Self::tinder()
        }
    }

    pub fn lovoo() -> Self {
        Self {
            birthdate_mode: BirthdateMode::Hidden,
            ..Self::tinder()
        }
    }

    /// Distance is never shown, which rules out ranging.
    pub fn grindr() -> Self {
        Self {
            share_distance: false,
            share_first_name: false,
            birthdate_mode: BirthdateMode::Hidden,
            ..Self::tinder()
        }
    }

    pub fn badoo() -> Self {
        Self::lovoo()
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tinder" => Some(Self::tinder()),
            "happn" => Some(Self::happn()),
            "lovoo" => Some(Self::lovoo()),
            "grindr" => Some(Self::grindr()),
            "badoo" => Some(Self::badoo()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !self.distance_quantum_m.is_finite() || self.distance_quantum_m < 0.0 {
            return Err(WorldError::Config(format!(
                "distance quantum {} must be >= 0",
                self.distance_quantum_m
            )));
        }
        Ok(())
    }
}

impl Default for DisclosurePolicy {
    fn default() -> Self {
        Self::tinder()
    }
}

/// Ground truth for one simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub user_id: UserId,
    pub first_name: String,
    pub true_birthdate: NaiveDate,
    pub trajectory: Trajectory,
    pub likes: BTreeSet<PageId>,
    pub social_id: SocialId,
    /// Opaque profile-photo fingerprint, shared by the app and social profiles.
    pub photo_id: u64,
}

impl SimUser {
    /// The social-login token this user presents to the service.
    pub fn login_token(&self) -> String {
        format!("fb-{}", self.social_id.0)
    }

    pub fn position_at(&self, t: f64) -> Result<GeoPoint, WorldError> {
        self.trajectory.position_at(t)
    }
}

/// Where `user` is at sim time `t`.
pub fn position_at(user: &SimUser, t: f64) -> Result<GeoPoint, WorldError> {
    user.position_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn barcelona() -> Self {
        Self {
            lat_min: 41.35,
            lon_min: 2.10,
            lat_max: 41.45,
            lon_max: 2.23,
        }
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint::new((self.lat_min + self.lat_max) / 2.0, (self.lon_min + self.lon_max) / 2.0).expect("validated box")
    }

    pub fn sample(&self, rng: &mut impl Rng) -> GeoPoint {
        let lat = rng.random_range(self.lat_min..=self.lat_max);
        let lon = rng.random_range(self.lon_min..=self.lon_max);
        GeoPoint::new(lat, lon).expect("validated box")
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat_deg()) && (self.lon_min..=self.lon_max).contains(&p.lon_deg())
    }

    pub fn diagonal_m(&self) -> f64 {
        geo::haversine_m(
            GeoPoint::new(self.lat_min, self.lon_min).expect("validated box"),
            GeoPoint::new(self.lat_max, self.lon_max).expect("validated box"),
        )
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        GeoPoint::new(self.lat_min, self.lon_min)?;
        GeoPoint::new(self.lat_max, self.lon_max)?;
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(WorldError::Config("bounding box must have min < max".into()));
        }
        if self.diagonal_m() >= geo::MAX_PLANE_DISTANCE_M {
            return Err(WorldError::Config("bounding box diagonal must stay under 100 km".into()));
        }
        Ok(())
    }
}

/// How generated users move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryTemplate {
    Stationary,
    /// Home dwell, travel, work dwell, travel, repeated.
    Commuter { distance_m: f64, dwell_s: f64, travel_s: f64 },
    /// A step of `step_m` in a random direction every `interval_s`.
    RandomWalk { step_m: f64, interval_s: f64 },
}

impl TrajectoryTemplate {
    pub fn commuter_default() -> Self {
        Self::Commuter {
            distance_m: 5_000.0,
            dwell_s: 8.0 * 3600.0,
            travel_s: 3600.0,
        }
    }

    fn validate(&self) -> Result<(), WorldError> {
        let ok = match *self {
            Self::Stationary => true,
            Self::Commuter { distance_m, dwell_s, travel_s } => distance_m >= 0.0 && dwell_s > 0.0 && travel_s > 0.0,
            Self::RandomWalk { step_m, interval_s } => step_m >= 0.0 && interval_s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(WorldError::Config(format!("invalid trajectory template {self:?}")))
        }
    }

    /// Build a trajectory that covers at least `[0, span_s]`.
    pub fn build(&self, start: GeoPoint, span_s: f64, bbox: &BoundingBox, rng: &mut impl Rng) -> Result<Trajectory, WorldError> {
        match *self {
            Self::Stationary => Trajectory::stationary(start, 0.0, span_s),
            Self::Commuter { distance_m, dwell_s, travel_s } => {
                let bearing = rng.random_range(0.0..std::f64::consts::TAU);
                let work_enu = geo::EnuPoint::new(distance_m * bearing.sin(), distance_m * bearing.cos(), start);
                let work = geo::from_enu(&work_enu)?;
                let mut waypoints = vec![(0.0, start)];
                let mut t = 0.0;
                let mut at = start;
                let mut other = work;
                while t < span_s {
                    t += dwell_s;
                    waypoints.push((t, at));
                    t += travel_s;
                    std::mem::swap(&mut at, &mut other);
                    waypoints.push((t, at));
                }
                Trajectory::new(waypoints)
            }
            Self::RandomWalk { step_m, interval_s } => {
                let mut waypoints = vec![(0.0, start)];
                let mut t = 0.0;
                let mut here = start;
                while t < span_s {
                    t += interval_s;
                    let mut next = here;
                    for _ in 0..8 {
                        let bearing = rng.random_range(0.0..std::f64::consts::TAU);
                        let cand = geo::from_enu(&geo::EnuPoint::new(step_m * bearing.sin(), step_m * bearing.cos(), here))?;
                        if bbox.contains(cand) {
                            next = cand;
                            break;
                        }
                    }
                    here = next;
                    waypoints.push((t, here));
                }
                Trajectory::new(waypoints)
            }
        }
    }
}

/// Everything needed to generate a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_users: usize,
    pub catalog_size: usize,
    pub n_categories: u16,
    pub zipf_s: f64,
    /// Mean of the per-user like count (geometric on 0, 1, 2, ...).
    pub like_mean: f64,
    pub bbox: BoundingBox,
    pub span_s: f64,
    pub trajectory: TrajectoryTemplate,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 250,
            catalog_size: 1_000,
            n_categories: 20,
            zipf_s: 1.0,
            like_mean: 0.7,
            bbox: BoundingBox::barcelona(),
            span_s: 86_400.0,
            trajectory: TrajectoryTemplate::Stationary,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.n_users == 0 {
            return Err(WorldError::Config("n_users must be >= 1".into()));
        }
        if self.catalog_size == 0 {
            return Err(WorldError::Config("catalog_size must be >= 1".into()));
        }
        if !(self.zipf_s > 0.0) || !self.zipf_s.is_finite() {
            return Err(WorldError::Config("zipf_s must be > 0".into()));
        }
        if !(self.like_mean >= 0.0) || !self.like_mean.is_finite() {
            return Err(WorldError::Config("like_mean must be >= 0".into()));
        }
        if !(self.span_s > 0.0) || !self.span_s.is_finite() {
            return Err(WorldError::Config("span_s must be > 0".into()));
        }
        if self.n_categories == 0 {
            return Err(WorldError::Config("n_categories must be >= 1".into()));
        }
        self.bbox.validate()?;
        self.trajectory.validate()
    }
}

const FIRST_NAMES: [&str; 100] = [
    "Aaron", "Adria", "Aina", "Alba", "Alejandro", "Alex", "Alicia", "Ana", "Andrea", "Angel", "Anna", "Antonio", "Arnau",
    "Berta", "Blanca", "Bruno", "Carla", "Carlos", "Carmen", "Clara", "Cristina", "Daniel", "David", "Diana", "Diego",
    "Elena", "Emma", "Enric", "Eric", "Eva", "Fernando", "Francesc", "Gabriel", "Gerard", "Gloria", "Guillem", "Hector",
    "Helena", "Hugo", "Ines", "Irene", "Isabel", "Ivan", "Jaume", "Javier", "Joan", "Joel", "John", "Jordi", "Jorge",
    "Jose", "Josep", "Juan", "Julia", "Laia", "Laura", "Lucia", "Luis", "Manuel", "Marc", "Marina", "Mario", "Marta",
    "Martina", "Mateo", "Miguel", "Mireia", "Montse", "Nerea", "Nil", "Nuria", "Oriol", "Pablo", "Pau", "Paula", "Pedro",
    "Pere", "Pilar", "Pol", "Queralt", "Rafael", "Raquel", "Ricard", "Roberto", "Rosa", "Ruben", "Sara", "Sergi", "Silvia",
    "Sofia", "Teresa", "Tomas", "Valeria", "Victor", "Xavier", "Yolanda", "Zoe", "Lluis", "Noa", "Ona",
];

/// Users plus the page catalog they like from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    users: Vec<SimUser>,
    catalog: PageCatalog,
    #[serde(skip)]
    index: HashMap<UserId, usize>,
}

impl Population {
    pub fn new(users: Vec<SimUser>, catalog: PageCatalog) -> Result<Self, WorldError> {
        let mut pop = Self {
            users: Vec::with_capacity(users.len()),
            catalog,
            index: HashMap::new(),
        };
        for u in users {
            pop.add_user(u)?;
        }
        Ok(pop)
    }

    /// Add a user; ids must be unique and likes must come from the catalog.
    pub fn add_user(&mut self, user: SimUser) -> Result<(), WorldError> {
        if self.index.contains_key(&user.user_id) {
            return Err(WorldError::Config(format!("duplicate user id {}", user.user_id)));
        }
        if self.users.iter().any(|u| u.social_id == user.social_id) {
            return Err(WorldError::Config(format!("duplicate social id {}", user.social_id)));
        }
        if let Some(p) = user.likes.iter().find(|p| !self.catalog.contains(**p)) {
            return Err(WorldError::Config(format!("page {p} not in catalog")));
        }
        self.index.insert(user.user_id, self.users.len());
        self.users.push(user);
        Ok(())
    }

    pub fn users(&self) -> &[SimUser] {
        &self.users
    }

    pub fn catalog(&self) -> &PageCatalog {
        &self.catalog
    }

    pub fn user(&self, id: UserId) -> Result<&SimUser, WorldError> {
        self.index.get(&id).map(|&i| &self.users[i]).ok_or(WorldError::UnknownUser(id))
    }

    pub fn user_mut(&mut self, id: UserId) -> Result<&mut SimUser, WorldError> {
        match self.index.get(&id) {
            Some(&i) => Ok(&mut self.users[i]),
            None => Err(WorldError::UnknownUser(id)),
        }
    }

    pub fn by_social_id(&self, id: SocialId) -> Option<&SimUser> {
        self.users.iter().find(|u| u.social_id == id)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn next_user_id(&self) -> UserId {
        UserId(self.users.iter().map(|u| u.user_id.0).max().unwrap_or(0) + 1)
    }

    pub fn next_social_id(&self) -> SocialId {
        SocialId(self.users.iter().map(|u| u.social_id.0).max().unwrap_or(SOCIAL_ID_BASE) + 1)
    }

    /// Fraction of users (other than `exclude`) sharing at least one like with `likes`.
    pub fn overlap_fraction(&self, likes: &BTreeSet<PageId>, exclude: Option<UserId>) -> f64 {
        let others: Vec<&SimUser> = self.users.iter().filter(|u| Some(u.user_id) != exclude).collect();
        if others.is_empty() {
            return 0.0;
        }
        let sharing = others.iter().filter(|u| !u.likes.is_disjoint(likes)).count();
        sharing as f64 / others.len() as f64
    }

    fn reindex(&mut self) {
        self.index = self.users.iter().enumerate().map(|(i, u)| (u.user_id, i)).collect();
    }
}

const SOCIAL_ID_BASE: u64 = 100_000_000;

/// Build a population: uniform positions in the box, geometric like counts,
/// likes drawn without replacement from a Zipf rank distribution.
pub fn generate(cfg: &WorldConfig) -> Result<Population, WorldError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let catalog = PageCatalog::generate(cfg.catalog_size, cfg.n_categories, &mut rng);
    let zipf = Zipf::new(cfg.catalog_size as f64, cfg.zipf_s).map_err(|e| WorldError::Config(e.to_string()))?;
    let geometric = Geometric::new(1.0 / (1.0 + cfg.like_mean)).map_err(|e| WorldError::Config(e.to_string()))?;
    let max_likes = (cfg.catalog_size / 2).max(1);

    let birth_lo = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid");
    let birth_days = NaiveDate::from_ymd_opt(2000, 12, 31).expect("valid").signed_duration_since(birth_lo).num_days() as u64;

    let mut users = Vec::with_capacity(cfg.n_users);
    for i in 0..cfg.n_users {
        let first_name = FIRST_NAMES.choose(&mut rng).expect("non-empty").to_string();
        let true_birthdate = birth_lo + Days::new(rng.random_range(0..=birth_days));
        let home = cfg.bbox.sample(&mut rng);
        let trajectory = cfg.trajectory.build(home, cfg.span_s, &cfg.bbox, &mut rng)?;
        let count = (geometric.sample(&mut rng) as usize).min(max_likes);
        let mut likes = BTreeSet::new();
        while likes.len() < count {
            likes.insert(PageId(zipf.sample(&mut rng) as u32));
        }
        users.push(SimUser {
            user_id: UserId(i as u64 + 1),
            first_name,
            true_birthdate,
            trajectory,
            likes,
            // strided so ids stay unique without matching user ids
            social_id: SocialId(SOCIAL_ID_BASE + (i as u64 + 1) * 7 + rng.random_range(0..7)),
            photo_id: rng.random(),
        });
    }
    let mut pop = Population {
        users,
        catalog,
        index: HashMap::new(),
    };
    pop.reindex();
    Ok(pop)
}

/// Convenience wrapper with the default box, categories and like mean.
pub fn generate_population(n: usize, catalog_size: usize, zipf_s: f64, seed: u64) -> Result<Population, WorldError> {
    generate(&WorldConfig {
        n_users: n,
        catalog_size,
        zipf_s,
        seed,
        ..WorldConfig::default()
    })
}

/// Fixed per-user birthdate offset in `-7..=7` days.
pub fn fuzz_offset_days(user_id: UserId, seed: u64) -> i64 {
    let mixed = seed ^ user_id.0.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    ChaCha8Rng::seed_from_u64(mixed).random_range(-7..=7)
}

pub fn fuzz_birthdate(true_date: NaiveDate, user_id: UserId, seed: u64) -> NaiveDate {
    let offset = fuzz_offset_days(user_id, seed);
    if offset >= 0 {
        true_date + Days::new(offset as u64)
    } else {
        true_date - Days::new(offset.unsigned_abs())
    }
}

/// Years a birthdate could fall in, given a fuzzed date.
pub fn candidate_birth_years(fuzzy: NaiveDate) -> BTreeSet<i32> {
    [fuzzy - Days::new(7), fuzzy, fuzzy + Days::new(7)].iter().map(|d| d.year()).collect()
}

/// Floor to a multiple of `quantum_m`; 0 leaves the distance untouched.
pub fn quantize_distance(true_m: f64, quantum_m: f64) -> f64 {
    if quantum_m <= 0.0 {
        true_m
    } else {
        (true_m / quantum_m).floor() * quantum_m
    }
}

/// The simulated world: ground truth, the active policy and the clock.
#[derive(Debug, Clone)]
pub struct World {
    population: Population,
    policy: DisclosurePolicy,
    fuzz_seed: u64,
    now_s: f64,
}

impl World {
    pub fn new(population: Population, policy: DisclosurePolicy, fuzz_seed: u64) -> Result<Self, WorldError> {
        policy.validate()?;
        Ok(Self {
            population,
            policy,
            fuzz_seed,
            now_s: 0.0,
        })
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn population_mut(&mut self) -> &mut Population {
        &mut self.population
    }

    pub fn policy(&self) -> &DisclosurePolicy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: DisclosurePolicy) -> Result<(), WorldError> {
        policy.validate()?;
        self.policy = policy;
        Ok(())
    }

    pub fn now_s(&self) -> f64 {
        self.now_s
    }

    /// Move the clock forward; going backwards is ignored.
    pub fn advance_to(&mut self, t_s: f64) {
        if t_s > self.now_s {
            self.now_s = t_s;
        }
    }

    pub fn fuzzy_birthdate(&self, user: &SimUser) -> NaiveDate {
        fuzz_birthdate(user.true_birthdate, user.user_id, self.fuzz_seed)
    }

    pub fn true_position(&self, id: UserId) -> Result<GeoPoint, WorldError> {
        self.population.user(id)?.position_at(self.now_s)
    }

    pub fn set_likes(&mut self, id: UserId, likes: BTreeSet<PageId>) -> Result<(), WorldError> {
        if let Some(p) = likes.iter().find(|p| !self.population.catalog.contains(**p)) {
            return Err(WorldError::Config(format!("page {p} not in catalog")));
        }
        self.population.user_mut(id)?.likes = likes;
        Ok(())
    }

    pub fn like_page(&mut self, id: UserId, page: PageId) -> Result<(), WorldError> {
        if !self.population.catalog.contains(page) {
            return Err(WorldError::Config(format!("page {page} not in catalog")));
        }
        self.population.user_mut(id)?.likes.insert(page);
        Ok(())
    }

    /// Register an extra account (an attacker signs up like anyone else).
    pub fn register(&mut self, first_name: &str, birthdate: NaiveDate, position: GeoPoint, likes: BTreeSet<PageId>) -> Result<UserId, WorldError> {
        let (start, end) = self
            .population
            .users
            .iter()
            .map(|u| u.trajectory.span())
            .fold((0.0f64, self.now_s.max(1.0)), |(s, e), (a, b)| (s.min(a), e.max(b)));
        let user = SimUser {
            user_id: self.population.next_user_id(),
            first_name: first_name.to_string(),
            true_birthdate: birthdate,
            trajectory: Trajectory::stationary(position, start, end)?,
            likes,
            social_id: self.population.next_social_id(),
            photo_id: 0,
        };
        let id = user.user_id;
        self.population.add_user(user)?;
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn quantization() {
        assert_eq!(quantize_distance(347.0, 100.0), 300.0);
        assert_eq!(quantize_distance(123.456, 0.0), 123.456);
        assert_eq!(quantize_distance(99.99, 100.0), 0.0);
        assert_eq!(quantize_distance(100.0, 100.0), 100.0);
    }

    #[test]
    fn single_user_population() {
        for seed in 0..20 {
            let pop = generate_population(1, 1000, 1.0, seed).unwrap();
            assert_eq!(pop.len(), 1);
            assert!(pop.users()[0].likes.iter().all(|l| pop.catalog().contains(*l)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig {
            trajectory: TrajectoryTemplate::RandomWalk { step_m: 200.0, interval_s: 600.0 },
            seed: 77,
            ..WorldConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&WorldConfig { seed: 78, ..cfg.clone() }).unwrap();
        assert_ne!(generate(&cfg).unwrap(), other);
    }

    #[test]
    fn population_invariants() {
        let pop = generate(&WorldConfig {
            n_users: 2_000,
            like_mean: 5.0,
            seed: 3,
            ..WorldConfig::default()
        })
        .unwrap();
        let ids: BTreeSet<_> = pop.users().iter().map(|u| u.user_id).collect();
        let socials: BTreeSet<_> = pop.users().iter().map(|u| u.social_id).collect();
        assert_eq!(ids.len(), pop.len());
        assert_eq!(socials.len(), pop.len());
        for u in pop.users() {
            assert!(u.likes.iter().all(|l| pop.catalog().contains(*l)));
            assert!(BoundingBox::barcelona().contains(u.position_at(0.0).unwrap()));
        }
        let ranks: Vec<u32> = pop.catalog().pages().iter().map(|p| p.rank).collect();
        assert_eq!(ranks, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig { n_users: 0, ..Default::default() }.validate().is_err());
        assert!(WorldConfig { zipf_s: 0.0, ..Default::default() }.validate().is_err());
        let flipped = BoundingBox { lat_min: 41.5, ..BoundingBox::barcelona() };
        assert!(WorldConfig { bbox: flipped, ..Default::default() }.validate().is_err());
        let bad_policy = DisclosurePolicy { distance_quantum_m: -1.0, ..DisclosurePolicy::tinder() };
        assert!(bad_policy.validate().is_err());
    }

    #[test]
    fn like_ranks_follow_zipf() {
        let pop = generate(&WorldConfig {
            n_users: 100_000,
            like_mean: 2.0,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap();
        let mut freq = vec![0usize; 1000];
        for u in pop.users() {
            for l in &u.likes {
                freq[l.0 as usize - 1] += 1;
            }
        }
        let deciles: Vec<usize> = freq.chunks(100).map(|c| c.iter().sum()).collect();
        assert!(deciles.windows(2).all(|w| w[0] >= w[1]), "{deciles:?}");
        // the top ten pages on their own also stay ordered by rank within noise
        let top: Vec<usize> = freq[..10].to_vec();
        assert!(top.windows(2).all(|w| w[0] as f64 >= w[1] as f64 * 0.9), "{top:?}");
    }

    #[test]
    fn fuzz_is_stable_and_bounded() {
        let d = NaiveDate::from_ymd_opt(1985, 12, 28).unwrap();
        for id in 0..2_000 {
            let a = fuzz_birthdate(d, UserId(id), 5);
            assert_eq!(a, fuzz_birthdate(d, UserId(id), 5));
            assert!((a - d).num_days().abs() <= 7);
        }
    }

    #[test]
    fn fuzz_offsets_look_uniform() {
        let mut counts = [0u32; 15];
        let n = 10_000;
        for id in 0..n {
            counts[(fuzz_offset_days(UserId(id), 42) + 7) as usize] += 1;
        }
        let expected = n as f64 / 15.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 14 degrees of freedom, 1% level
        assert!(chi2 < 29.141, "chi2 = {chi2}, counts = {counts:?}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn candidate_years_cross_new_year() {
        let fuzzy = NaiveDate::from_ymd_opt(1990, 1, 3).unwrap();
        assert_eq!(candidate_birth_years(fuzzy), BTreeSet::from([1989, 1990]));
        let mid = NaiveDate::from_ymd_opt(1990, 6, 3).unwrap();
        assert_eq!(candidate_birth_years(mid), BTreeSet::from([1990]));
    }

    #[test]
    fn trajectory_interpolation() {
        let a = p(41.39, 2.17);
        let b = geo::from_enu(&geo::EnuPoint::new(1000.0, 0.0, a)).unwrap();
        let tr = Trajectory::new(vec![(0.0, a), (100.0, b)]).unwrap();
        assert_eq!(tr.position_at(0.0).unwrap(), a);
        assert_eq!(tr.position_at(100.0).unwrap(), b);
        let mid = tr.position_at(50.0).unwrap();
        assert!((geo::haversine_m(a, mid) - 500.0).abs() < 1.0);
        assert!((geo::haversine_m(b, mid) - 500.0).abs() < 1.0);
        assert!(matches!(tr.position_at(100.5), Err(WorldError::OutsideSpan { .. })));
        assert!(matches!(tr.position_at(-1.0), Err(WorldError::OutsideSpan { .. })));

        let still = Trajectory::stationary(a, 0.0, 1000.0).unwrap();
        for t in [0.0, 1.0, 333.3, 1000.0] {
            assert_eq!(still.position_at(t).unwrap(), a);
        }
        assert!(Trajectory::new(vec![(0.0, a), (0.0, b)]).is_err());
        assert!(Trajectory::new(vec![]).is_err());
    }

    #[test]
    fn commuter_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let home = p(41.39, 2.17);
        let tr = TrajectoryTemplate::commuter_default()
            .build(home, 86_400.0, &BoundingBox::barcelona(), &mut rng)
            .unwrap();
        let work = tr.position_at(9.0 * 3600.0).unwrap();
        assert!((geo::haversine_m(home, work) - 5_000.0).abs() < 1.0);
        assert_eq!(tr.position_at(4.0 * 3600.0).unwrap(), home);
        assert_eq!(tr.position_at(12.0 * 3600.0).unwrap(), work);
        assert_eq!(tr.position_at(18.0 * 3600.0).unwrap(), home);
        assert!(tr.span().1 >= 86_400.0);
    }

    #[test]
    fn register_attacker() {
        let pop = generate_population(10, 100, 1.0, 1).unwrap();
        let mut world = World::new(pop, DisclosurePolicy::tinder(), 1).unwrap();
        let id = world
            .register("Eve", NaiveDate::from_ymd_opt(1980, 1, 1).unwrap(), p(41.4, 2.15), BTreeSet::from([PageId(1)]))
            .unwrap();
        assert_eq!(id, UserId(11));
        assert!(world.like_page(id, PageId(5000)).is_err());
        world.like_page(id, PageId(7)).unwrap();
        assert_eq!(world.population().user(id).unwrap().likes, BTreeSet::from([PageId(1), PageId(7)]));
    }

    proptest! {
        #[test]
        fn interpolation_stays_on_segment(t in 0.0..3600.0f64, dx in -3000.0..3000.0f64, dy in -3000.0..3000.0f64) {
            let a = p(41.39, 2.17);
            let b = geo::from_enu(&geo::EnuPoint::new(dx, dy, a)).unwrap();
            let tr = Trajectory::new(vec![(0.0, a), (3600.0, b)]).unwrap();
            let q = tr.position_at(t).unwrap();
            let total = geo::haversine_m(a, b);
            prop_assert!((geo::haversine_m(a, q) + geo::haversine_m(q, b) - total).abs() < 0.01);
            prop_assert!((geo::haversine_m(a, q) - total * t / 3600.0).abs() < 0.01);
        }
    }
}
