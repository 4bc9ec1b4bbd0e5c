//! The simulated proximity app.
//!
//! The service owns the [`World`] and answers login, nearby, profile and
//! update-location requests, rendering every answer through the active
//! [`DisclosurePolicy`]. Requests can be made in-process through
//! [`LocalClient`] or over the newline-delimited JSON protocol in [`wire`],
//! served by [`server`].

pub mod server;
pub mod wire;

use std::collections::{BTreeSet, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoPoint};
use crate::world::{
    self, BirthdateMode, CategoryId, DisclosurePolicy, InterestsMode, PageId, SimUser, SocialId, UserId, World, WorldError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("authentication failed")]
    Auth,
    #[error("not found")]
    NotFound,
    #[error("location change rejected: moved {moved_m:.0} m, limit {limit_m:.0} m")]
    Rate { moved_m: f64, limit_m: f64 },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("transport: {0}")]
    Transport(String),
}

impl ServiceError {
    /// Error code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Auth => "auth",
            Self::NotFound => "not_found",
            Self::Rate { .. } => "rate",
            Self::BadRequest(_) | Self::Transport(_) => "bad_request",
        }
    }

    pub fn from_code(code: &str) -> Self {
        match code {
            "auth" => Self::Auth,
            "not_found" => Self::NotFound,
            "rate" => Self::Rate {
                moved_m: f64::NAN,
                limit_m: f64::NAN,
            },
            other => Self::BadRequest(other.to_string()),
        }
    }
}

impl From<WorldError> for ServiceError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::UnknownUser(_) => Self::NotFound,
            other => Self::BadRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

/// Interests two users have in common, as pages or as page categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonInterests {
    Pages(BTreeSet<PageId>),
    Categories(BTreeSet<CategoryId>),
}

/// A profile card as the requester sees it. Absent fields were withheld by policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearbyEntry {
    pub user_id: UserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuzzy_birthdate: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_likes: Option<CommonInterests>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub social_id: Option<SocialId>,
    pub photo_id: u64,
    pub last_active_t: f64,
}

/// Acknowledgement of a location update, stamped with the service clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub t_s: f64,
}

/// Limits on how far a user may move per update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// `None` means unlimited.
    pub teleport_limit_m: Option<f64>,
    /// Once this much time has passed since the last update, any jump is accepted.
    pub cooldown_s: Option<f64>,
}

#[derive(Debug, Clone)]
struct Session {
    user: UserId,
    discovered: BTreeSet<UserId>,
}

#[derive(Debug, Clone)]
pub struct Service {
    world: World,
    cfg: ServiceConfig,
    tokens: HashMap<String, UserId>,
    sessions: HashMap<SessionId, Session>,
    next_session: u64,
    /// Positions set through `update_location`, with the time they were set.
    reported: HashMap<UserId, (f64, GeoPoint)>,
}

impl Service {
    pub fn new(world: World, cfg: ServiceConfig) -> Self {
        let tokens = world.population().users().iter().map(|u| (u.login_token(), u.user_id)).collect();
        Self {
            world,
            cfg,
            tokens,
            sessions: HashMap::new(),
            next_session: 1,
            reported: HashMap::new(),
        }
    }

    /// Ground truth; for scenario control and evaluation, never for attacker logic.
    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn now_s(&self) -> f64 {
        self.world.now_s()
    }

    pub fn advance_to(&mut self, t_s: f64) {
        self.world.advance_to(t_s);
    }

    pub fn set_policy(&mut self, policy: DisclosurePolicy) -> Result<(), ServiceError> {
        Ok(self.world.set_policy(policy)?)
    }

    /// Sign up a new account and return its login token.
    pub fn register(&mut self, first_name: &str, birthdate: NaiveDate, position: GeoPoint, likes: BTreeSet<PageId>) -> Result<String, ServiceError> {
        let id = self.world.register(first_name, birthdate, position, likes)?;
        let token = self.world.population().user(id)?.login_token();
        self.tokens.insert(token.clone(), id);
        Ok(token)
    }

    pub fn login(&mut self, token: &str) -> Result<SessionId, ServiceError> {
        let user = *self.tokens.get(token).ok_or(ServiceError::Auth)?;
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id,
            Session {
                user,
                discovered: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn session_user(&self, session: SessionId) -> Result<UserId, ServiceError> {
        self.sessions.get(&session).map(|s| s.user).ok_or(ServiceError::Auth)
    }

    /// Where the service believes `user` is right now.
    pub fn visible_position(&self, user: UserId) -> Result<GeoPoint, ServiceError> {
        if let Some((_, p)) = self.reported.get(&user) {
            return Ok(*p);
        }
        let u = self.world.population().user(user)?;
        let (start, end) = u.trajectory.span();
        Ok(u.position_at(self.world.now_s().clamp(start, end))?)
    }

    fn last_active(&self, user: UserId) -> f64 {
        self.reported.get(&user).map_or(self.world.now_s(), |(t, _)| *t)
    }

    pub fn update_location(&mut self, session: SessionId, p: GeoPoint) -> Result<Ack, ServiceError> {
        let user = self.session_user(session)?;
        let now = self.world.now_s();
        if let Some(limit_m) = self.cfg.teleport_limit_m {
            let moved_m = geo::haversine_m(self.visible_position(user)?, p);
            let last_t = self.reported.get(&user).map_or(0.0, |(t, _)| *t);
            let cooled = self.cfg.cooldown_s.is_some_and(|c| now - last_t >= c);
            if moved_m > limit_m && !cooled {
                return Err(ServiceError::Rate { moved_m, limit_m });
            }
        }
        self.reported.insert(user, (now, p));
        Ok(Ack { t_s: now })
    }

    pub fn nearby(&mut self, session: SessionId, radius_m: f64) -> Result<Vec<NearbyEntry>, ServiceError> {
        if !(radius_m > 0.0) {
            return Err(ServiceError::BadRequest(format!("radius {radius_m} must be > 0")));
        }
        let me = self.session_user(session)?;
        let here = self.visible_position(me)?;
        let requester = self.world.population().user(me)?;
        let mut found = Vec::new();
        for target in self.world.population().users() {
            if target.user_id == me {
                continue;
            }
            let d = geo::haversine_m(here, self.visible_position(target.user_id)?);
            if d <= radius_m {
                found.push((world::quantize_distance(d, self.world.policy().distance_quantum_m), self.render(requester, target, d)));
            }
        }
        if self.world.policy().share_distance {
            found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.user_id.cmp(&b.1.user_id)));
        } else {
            found.sort_by_key(|(_, e)| e.user_id);
        }
        let entries: Vec<NearbyEntry> = found.into_iter().map(|(_, e)| e).collect();
        let s = self.sessions.get_mut(&session).ok_or(ServiceError::Auth)?;
        s.discovered.extend(entries.iter().map(|e| e.user_id));
        Ok(entries)
    }

    /// Poll a user this session has already discovered through `nearby`.
    pub fn profile(&self, session: SessionId, user: UserId) -> Result<NearbyEntry, ServiceError> {
        let s = self.sessions.get(&session).ok_or(ServiceError::Auth)?;
        if !s.discovered.contains(&user) {
            return Err(ServiceError::NotFound);
        }
        let requester = self.world.population().user(s.user)?;
        let target = self.world.population().user(user)?;
        let d = geo::haversine_m(self.visible_position(s.user)?, self.visible_position(user)?);
        Ok(self.render(requester, target, d))
    }

    /// Like a page on the session owner's linked social account.
    pub fn like_page(&mut self, session: SessionId, page: PageId) -> Result<(), ServiceError> {
        let user = self.session_user(session)?;
        Ok(self.world.like_page(user, page)?)
    }

    /// Replace the session owner's likes wholesale.
    pub fn set_likes(&mut self, session: SessionId, likes: BTreeSet<PageId>) -> Result<(), ServiceError> {
        let user = self.session_user(session)?;
        Ok(self.world.set_likes(user, likes)?)
    }

    pub fn own_likes(&self, session: SessionId) -> Result<BTreeSet<PageId>, ServiceError> {
        let user = self.session_user(session)?;
        Ok(self.world.population().user(user)?.likes.clone())
    }

    fn render(&self, requester: &SimUser, target: &SimUser, true_distance_m: f64) -> NearbyEntry {
        let policy = self.world.policy();
        let catalog = self.world.population().catalog();
        let shared = requester.likes.intersection(&target.likes);
        NearbyEntry {
            user_id: target.user_id,
            first_name: policy.share_first_name.then(|| target.first_name.clone()),
            distance_m: policy
                .share_distance
                .then(|| world::quantize_distance(true_distance_m, policy.distance_quantum_m)),
            fuzzy_birthdate: match policy.birthdate_mode {
                BirthdateMode::Exact => Some(target.true_birthdate),
                BirthdateMode::Fuzzy15d => Some(self.world.fuzzy_birthdate(target)),
                BirthdateMode::Hidden => None,
            },
            common_likes: match policy.interests_mode {
                InterestsMode::Pages => Some(CommonInterests::Pages(shared.copied().collect())),
                InterestsMode::Categories => Some(CommonInterests::Categories(
                    shared.filter_map(|p| catalog.category_of(*p)).collect(),
                )),
                InterestsMode::Hidden => None,
            },
            social_id: policy.share_social_id.then_some(target.social_id),
            photo_id: target.photo_id,
            last_active_t: self.last_active(target.user_id),
        }
    }
}

/// What an app client can do, in-process or over the wire.
pub trait ProximityApi {
    fn update_location(&mut self, p: GeoPoint) -> Result<Ack, ServiceError>;
    fn nearby(&mut self, radius_m: f64) -> Result<Vec<NearbyEntry>, ServiceError>;
    fn profile(&mut self, user: UserId) -> Result<NearbyEntry, ServiceError>;
    /// Let sim time pass until `t_s`. Only in-process clients control the clock.
    fn wait_until(&mut self, t_s: f64) -> Result<f64, ServiceError>;
}

/// A logged-in session against an in-process [`Service`].
pub struct LocalClient<'a> {
    service: &'a mut Service,
    session: SessionId,
}

impl<'a> LocalClient<'a> {
    pub fn login(service: &'a mut Service, token: &str) -> Result<Self, ServiceError> {
        let session = service.login(token)?;
        Ok(Self { service, session })
    }

    pub fn resume(service: &'a mut Service, session: SessionId) -> Result<Self, ServiceError> {
        service.session_user(session)?;
        Ok(Self { service, session })
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn like_page(&mut self, page: PageId) -> Result<(), ServiceError> {
        self.service.like_page(self.session, page)
    }

    pub fn set_likes(&mut self, likes: BTreeSet<PageId>) -> Result<(), ServiceError> {
        self.service.set_likes(self.session, likes)
    }

    pub fn own_likes(&self) -> Result<BTreeSet<PageId>, ServiceError> {
        self.service.own_likes(self.session)
    }
}

impl ProximityApi for LocalClient<'_> {
    fn update_location(&mut self, p: GeoPoint) -> Result<Ack, ServiceError> {
        self.service.update_location(self.session, p)
    }

    fn nearby(&mut self, radius_m: f64) -> Result<Vec<NearbyEntry>, ServiceError> {
        self.service.nearby(self.session, radius_m)
    }

    fn profile(&mut self, user: UserId) -> Result<NearbyEntry, ServiceError> {
        self.service.profile(self.session, user)
    }

    fn wait_until(&mut self, t_s: f64) -> Result<f64, ServiceError> {
        self.service.advance_to(t_s);
        Ok(self.service.now_s())
    }
}
