//! Social-platform search over the synthetic population and the iterative
//! identification attack built on it.
//!
//! A forward query returns the profiles matching a first name, a set of
//! candidate birth years and a set of liked pages. A reverse query returns
//! the pages liked by those profiles. [`identify`] alternates the two: it
//! likes pages the candidate pool is split on, re-reads the victim's
//! "interests in common" from the app, and narrows the pool with every page
//! that shows up there.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::trace::{AttackTrace, TraceEvent};
use crate::service::{CommonInterests, LocalClient, NearbyEntry, ProximityApi, ServiceError};
use crate::world::{self, PageId, Population, SocialId, UserId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SocialError {
    #[error("the victim's profile shows neither a name nor shared pages")]
    InsufficientSelectors,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("batch_size must be at least 1")]
    EmptyBatch,
    #[error("re-poll failed: {0}")]
    Repoll(#[from] ServiceError),
    #[error("csv: {0}")]
    Csv(String),
}

/// Unset fields match everything; an empty query is the whole population.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphQuery {
    pub name: Option<String>,
    /// Acceptable birth years; empty means any.
    pub birth_years: BTreeSet<i32>,
    pub liked_pages: BTreeSet<PageId>,
}

impl GraphQuery {
    pub fn matches(&self, name: &str, birth_year: i32, likes: &BTreeSet<PageId>) -> bool {
        self.name.as_ref().is_none_or(|n| n.to_lowercase() == name.to_lowercase())
            && (self.birth_years.is_empty() || self.birth_years.contains(&birth_year))
            && self.liked_pages.is_subset(likes)
    }
}

/// Search indexes over one population snapshot.
pub struct SocialGraph<'a> {
    pop: &'a Population,
    by_name: HashMap<String, Vec<usize>>,
    by_page: HashMap<PageId, Vec<usize>>,
    by_social: HashMap<SocialId, usize>,
}

impl<'a> SocialGraph<'a> {
    pub fn new(pop: &'a Population) -> Self {
        let mut by_name: HashMap<String, Vec<usize>> = HashMap::new();
        let mut by_page: HashMap<PageId, Vec<usize>> = HashMap::new();
        let mut by_social = HashMap::new();
        for (i, u) in pop.users().iter().enumerate() {
            by_name.entry(u.first_name.to_lowercase()).or_default().push(i);
            for p in &u.likes {
                by_page.entry(*p).or_default().push(i);
            }
            by_social.insert(u.social_id, i);
        }
        Self {
            pop,
            by_name,
            by_page,
            by_social,
        }
    }

    pub fn population(&self) -> &Population {
        self.pop
    }

    fn matching(&self, q: &GraphQuery) -> Vec<usize> {
        static EMPTY: Vec<usize> = Vec::new();
        let mut lists: Vec<&Vec<usize>> = Vec::new();
        if let Some(n) = &q.name {
            lists.push(self.by_name.get(&n.to_lowercase()).unwrap_or(&EMPTY));
        }
        for p in &q.liked_pages {
            lists.push(self.by_page.get(p).unwrap_or(&EMPTY));
        }
        let users = self.pop.users();
        let check = |&i: &usize| {
            let u = &users[i];
            q.matches(&u.first_name, chrono::Datelike::year(&u.true_birthdate), &u.likes)
        };
        match lists.into_iter().min_by_key(|l| l.len()) {
            Some(seed) => seed.iter().copied().filter(check).collect(),
            None => (0..users.len()).filter(check).collect(),
        }
    }

    pub fn forward_search(&self, q: &GraphQuery) -> BTreeSet<SocialId> {
        self.matching(q).into_iter().map(|i| self.pop.users()[i].social_id).collect()
    }

    pub fn reverse_search(&self, q: &GraphQuery) -> BTreeSet<PageId> {
        let users = self.pop.users();
        let mut out: BTreeSet<PageId> = self.matching(q).into_iter().flat_map(|i| users[i].likes.iter().copied()).collect();
        out.retain(|p| !q.liked_pages.contains(p));
        out
    }

    /// How many members of `pool` like each page they like, pages in `skip` excluded.
    fn page_counts(&self, pool: &BTreeSet<SocialId>, skip: &BTreeSet<PageId>) -> BTreeMap<PageId, usize> {
        let mut counts = BTreeMap::new();
        for s in pool {
            if let Some(&i) = self.by_social.get(s) {
                for p in &self.pop.users()[i].likes {
                    if !skip.contains(p) {
                        *counts.entry(*p).or_insert(0) += 1;
                    }
                }
            }
        }
        counts
    }

    fn photo_of(&self, s: SocialId) -> Option<u64> {
        self.by_social.get(&s).map(|&i| self.pop.users()[i].photo_id)
    }
}

pub fn forward_search(pop: &Population, q: &GraphQuery) -> BTreeSet<SocialId> {
    SocialGraph::new(pop).forward_search(q)
}

pub fn reverse_search(pop: &Population, q: &GraphQuery) -> BTreeSet<PageId> {
    SocialGraph::new(pop).reverse_search(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub max_rounds: u32,
    /// Pages liked per round.
    pub batch_size: usize,
    /// Break remaining ties by comparing profile photos.
    pub photo_tiebreak: bool,
    /// The attacker's own account, never a candidate.
    pub exclude: Option<SocialId>,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            batch_size: 10,
            photo_tiebreak: false,
            exclude: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Identified,
    Stalled,
    RoundLimit,
    /// Nobody matched; only possible when the profile lies.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub social_id: Option<SocialId>,
    /// Pool size after round 0 and after every refinement round.
    pub pool_sizes: Vec<usize>,
    pub rounds_used: u32,
    pub outcome: Outcome,
    pub final_pool: BTreeSet<SocialId>,
    pub pages_liked: BTreeSet<PageId>,
}

fn shared_pages(view: &NearbyEntry) -> BTreeSet<PageId> {
    match &view.common_likes {
        Some(CommonInterests::Pages(p)) => p.clone(),
        _ => BTreeSet::new(),
    }
}

/// Pick the pages whose likes split the pool most evenly, ties by page id.
/// Pages liked by the whole pool cannot split it and are never picked.
fn pick_batch(counts: &BTreeMap<PageId, usize>, pool: usize, batch: usize) -> Vec<PageId> {
    let mut ranked: Vec<(usize, PageId)> = counts
        .iter()
        .map(|(p, &k)| (k.min(pool.saturating_sub(k)), *p))
        .filter(|(score, _)| *score > 0)
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(batch).map(|(_, p)| p).collect()
}

/// Run the refinement loop against one victim.
///
/// `view` is the victim's profile as first seen; `already_liked` holds the
/// attacker's current likes. `repoll` must like the given pages on the
/// attacker's account and return the victim's profile read afterwards.
pub fn identify(
    view: &NearbyEntry,
    graph: &SocialGraph<'_>,
    cfg: &IdentifyConfig,
    already_liked: &BTreeSet<PageId>,
    mut repoll: impl FnMut(&[PageId]) -> Result<NearbyEntry, ServiceError>,
    mut trace: Option<&mut AttackTrace>,
) -> Result<IdentificationResult, SocialError> {
    if cfg.max_rounds == 0 {
        return Err(SocialError::NoRounds);
    }
    if cfg.batch_size == 0 {
        return Err(SocialError::EmptyBatch);
    }
    let pages_mode = matches!(view.common_likes, Some(CommonInterests::Pages(_)));
    if view.first_name.is_none() && !pages_mode {
        return Err(SocialError::InsufficientSelectors);
    }
    let mut q = GraphQuery {
        name: view.first_name.clone(),
        birth_years: view.fuzzy_birthdate.map(world::candidate_birth_years).unwrap_or_default(),
        liked_pages: shared_pages(view),
    };
    let search = |q: &GraphQuery| {
        let mut pool = graph.forward_search(q);
        if let Some(me) = cfg.exclude {
            pool.remove(&me);
        }
        pool
    };
    let log = |round: u32, pool: usize, liked: usize, trace: &mut Option<&mut AttackTrace>| {
        if let Some(tr) = trace.as_deref_mut() {
            let t_s = tr.last_t();
            tr.push(TraceEvent::IdentifyRound {
                t_s,
                round,
                pool_size: pool,
                pages_liked: liked,
            })
            .expect("appending at the last timestamp keeps the trace ordered");
        }
    };

    let mut liked = already_liked.clone();
    let mut pool = search(&q);
    let mut pool_sizes = vec![pool.len()];
    log(0, pool.len(), 0, &mut trace);
    let mut rounds = 0;
    let mut outcome = Outcome::RoundLimit;
    loop {
        if pool.len() <= 1 {
            outcome = if pool.is_empty() { Outcome::Empty } else { Outcome::Identified };
            break;
        }
        if !pages_mode {
            outcome = Outcome::Stalled;
            break;
        }
        if rounds == cfg.max_rounds {
            break;
        }
        let batch = pick_batch(&graph.page_counts(&pool, &liked), pool.len(), cfg.batch_size);
        if batch.is_empty() {
            outcome = Outcome::Stalled;
            break;
        }
        let fresh = repoll(&batch)?;
        liked.extend(batch.iter().copied());
        rounds += 1;
        q.liked_pages.extend(shared_pages(&fresh));
        pool = search(&q);
        pool_sizes.push(pool.len());
        log(rounds, pool.len(), batch.len(), &mut trace);
    }
    if cfg.photo_tiebreak && pool.len() > 1 {
        pool.retain(|s| graph.photo_of(*s) == Some(view.photo_id));
        if pool.len() == 1 {
            outcome = Outcome::Identified;
        }
    }
    Ok(IdentificationResult {
        social_id: (pool.len() == 1).then(|| *pool.first().unwrap()),
        pool_sizes,
        rounds_used: rounds,
        outcome,
        final_pool: pool,
        pages_liked: liked.difference(already_liked).copied().collect(),
    })
}

/// [`identify`] driven through an in-process session that has already
/// discovered `victim`.
pub fn identify_via(
    client: &mut LocalClient<'_>,
    victim: UserId,
    graph: &SocialGraph<'_>,
    cfg: &IdentifyConfig,
    trace: Option<&mut AttackTrace>,
) -> Result<IdentificationResult, SocialError> {
    let view = client.profile(victim)?;
    let liked = client.own_likes()?;
    identify(
        &view,
        graph,
        cfg,
        &liked,
        |batch| {
            for p in batch {
                client.like_page(*p)?;
            }
            client.profile(victim)
        },
        trace,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyRow {
    pub seed: u64,
    pub rounds_used: u32,
    pub final_pool: usize,
    pub identified: bool,
}

/// Write `seed,rounds_used,final_pool,identified`.
pub fn write_identify_csv<W: io::Write>(out: W, rows: &[IdentifyRow]) -> Result<(), SocialError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| SocialError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| SocialError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::service::{Service, ServiceConfig};
    use crate::world::{
        generate, DisclosurePolicy, InterestsMode, PageCatalog, SimUser, Trajectory, World, WorldConfig,
    };
    use chrono::{Datelike, NaiveDate};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pages(ids: &[u32]) -> BTreeSet<PageId> {
        ids.iter().map(|&i| PageId(i)).collect()
    }

    fn user(id: u64, name: &str, year: i32, likes: &[u32]) -> SimUser {
        let p = GeoPoint::new(41.4, 2.17).unwrap();
        SimUser {
            user_id: UserId(id),
            first_name: name.into(),
            true_birthdate: NaiveDate::from_ymd_opt(year, 6, 15).unwrap(),
            trajectory: Trajectory::stationary(p, 0.0, 86_400.0).unwrap(),
            likes: pages(likes),
            social_id: SocialId(100 + id),
            photo_id: 1000 + id,
        }
    }

    fn small() -> Population {
        let catalog = PageCatalog::generate(20, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let users = vec![
            user(1, "John", 1979, &[1, 2]),
            user(2, "John", 1980, &[1]),
            user(3, "Maria", 1979, &[1, 3]),
            user(4, "john", 1979, &[2, 4]),
            user(5, "Ana", 1990, &[]),
            user(6, "John", 1979, &[1, 5, 6]),
            user(7, "Luis", 1985, &[7]),
            user(8, "Maria", 1985, &[1, 2, 3]),
            user(9, "John", 1979, &[9]),
            user(10, "Ana", 1979, &[1, 10]),
        ];
        Population::new(users, catalog).unwrap()
    }

    fn brute_forward(pop: &Population, q: &GraphQuery) -> BTreeSet<SocialId> {
        pop.users()
            .iter()
            .filter(|u| q.matches(&u.first_name, u.true_birthdate.year(), &u.likes))
            .map(|u| u.social_id)
            .collect()
    }

    fn brute_reverse(pop: &Population, q: &GraphQuery) -> BTreeSet<PageId> {
        let mut out = BTreeSet::new();
        for u in pop.users() {
            if q.matches(&u.first_name, u.true_birthdate.year(), &u.likes) {
                out.extend(u.likes.difference(&q.liked_pages));
            }
        }
        out
    }

    #[test]
    fn forward_examples() {
        let pop = small();
        assert_eq!(forward_search(&pop, &GraphQuery::default()).len(), 10);
        let q = GraphQuery {
            name: Some("John".into()),
            liked_pages: pages(&[1]),
            ..Default::default()
        };
        assert_eq!(forward_search(&pop, &q), [101, 102, 106].map(SocialId).into());
        assert_eq!(forward_search(&pop, &q), brute_forward(&pop, &q));
        let nobody = GraphQuery {
            liked_pages: pages(&[19]),
            ..Default::default()
        };
        assert!(forward_search(&pop, &nobody).is_empty());
        let year = GraphQuery {
            name: Some("JOHN".into()),
            birth_years: [1979].into(),
            ..Default::default()
        };
        assert_eq!(forward_search(&pop, &year), [101, 104, 106, 109].map(SocialId).into());
    }

    #[test]
    fn reverse_examples() {
        let pop = small();
        let none = GraphQuery {
            liked_pages: pages(&[19]),
            ..Default::default()
        };
        assert!(reverse_search(&pop, &none).is_empty());
        let one = GraphQuery {
            name: Some("Luis".into()),
            ..Default::default()
        };
        assert_eq!(reverse_search(&pop, &one), pages(&[7]));
        let q = GraphQuery {
            liked_pages: pages(&[1]),
            ..Default::default()
        };
        assert_eq!(reverse_search(&pop, &q), pages(&[2, 3, 5, 6, 10]));
        assert_eq!(reverse_search(&pop, &q), brute_reverse(&pop, &q));
    }

    fn query_strategy() -> impl Strategy<Value = GraphQuery> {
        (
            prop::option::of(prop::sample::select(vec!["John", "Maria", "ana", "Zed", "Laura", "David"])),
            prop::collection::btree_set(1970..2001i32, 0..3),
            prop::collection::btree_set(1u32..60, 0..3),
        )
            .prop_map(|(n, y, p)| GraphQuery {
                name: n.map(str::to_string),
                birth_years: y,
                liked_pages: p.into_iter().map(PageId).collect(),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn searches_equal_brute_force(n in 1usize..200, seed in 0u64..1000, like_mean in 0.5..8.0f64, qs in prop::collection::vec(query_strategy(), 1..8)) {
            let pop = generate(&WorldConfig { n_users: n, catalog_size: 60, like_mean, seed, ..Default::default() }).unwrap();
            let g = SocialGraph::new(&pop);
            for q in &qs {
                prop_assert_eq!(g.forward_search(q), brute_forward(&pop, q));
                prop_assert_eq!(g.reverse_search(q), brute_reverse(&pop, q));
            }
        }
    }

    /// A service with `pop` plus a registered attacker who already discovered everyone.
    fn arena(pop: Population, policy: DisclosurePolicy, attacker_likes: BTreeSet<PageId>) -> (Service, String) {
        let mut svc = Service::new(World::new(pop, policy, 3).unwrap(), ServiceConfig::default());
        let tok = svc
            .register("Mallory", NaiveDate::from_ymd_opt(1960, 1, 1).unwrap(), GeoPoint::new(41.4, 2.17).unwrap(), attacker_likes)
            .unwrap();
        (svc, tok)
    }

    fn attack(svc: &mut Service, tok: &str, victim: UserId, snapshot: &Population, cfg: IdentifyConfig) -> Result<(IdentificationResult, AttackTrace), SocialError> {
        let me = svc.world().population().users().last().unwrap().social_id;
        let mut c = LocalClient::login(svc, tok).unwrap();
        c.nearby(1e7).unwrap();
        let g = SocialGraph::new(snapshot);
        let mut tr = AttackTrace::new();
        let cfg = IdentifyConfig { exclude: Some(me), ..cfg };
        identify_via(&mut c, victim, &g, &cfg, Some(&mut tr)).map(|r| (r, tr))
    }

    #[test]
    fn unique_like_identifies_at_once() {
        let pop = small();
        let snap = pop.clone();
        let (mut svc, tok) = arena(pop, DisclosurePolicy::tinder(), pages(&[9]));
        let (r, tr) = attack(&mut svc, &tok, UserId(9), &snap, IdentifyConfig::default()).unwrap();
        assert_eq!(r.pool_sizes, vec![1]);
        assert_eq!(r.rounds_used, 0);
        assert_eq!(r.social_id, Some(SocialId(109)));
        assert_eq!(tr.len(), 1);
    }

    #[test]
    fn twins_stall() {
        let catalog = PageCatalog::generate(20, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let mut a = user(1, "John", 1979, &[1, 2, 3]);
        let mut b = user(2, "John", 1979, &[1, 2, 3]);
        a.true_birthdate = NaiveDate::from_ymd_opt(1979, 6, 1).unwrap();
        b.true_birthdate = NaiveDate::from_ymd_opt(1979, 6, 2).unwrap();
        let pop = Population::new(vec![a, b, user(3, "Ana", 1979, &[4])], catalog).unwrap();
        let snap = pop.clone();
        let (mut svc, tok) = arena(pop, DisclosurePolicy::tinder(), BTreeSet::new());
        let (r, _) = attack(&mut svc, &tok, UserId(1), &snap, IdentifyConfig::default()).unwrap();
        assert_eq!(r.outcome, Outcome::Stalled);
        assert_eq!(*r.pool_sizes.last().unwrap(), 2);
        assert!(r.final_pool.contains(&SocialId(101)));

        let photo = IdentifyConfig {
            photo_tiebreak: true,
            ..Default::default()
        };
        let (mut svc, tok) = arena(snap.clone(), DisclosurePolicy::tinder(), BTreeSet::new());
        let (r, _) = attack(&mut svc, &tok, UserId(1), &snap, photo).unwrap();
        assert_eq!(r.social_id, Some(SocialId(101)));
    }

    #[test]
    fn needs_name_or_pages() {
        let pop = small();
        let snap = pop.clone();
        let policy = DisclosurePolicy {
            share_first_name: false,
            interests_mode: InterestsMode::Categories,
            ..DisclosurePolicy::tinder()
        };
        let (mut svc, tok) = arena(pop, policy, BTreeSet::new());
        assert_eq!(attack(&mut svc, &tok, UserId(1), &snap, IdentifyConfig::default()).unwrap_err(), SocialError::InsufficientSelectors);
        let view = NearbyEntry {
            user_id: UserId(1),
            first_name: Some("John".into()),
            distance_m: None,
            fuzzy_birthdate: None,
            common_likes: None,
            social_id: None,
            photo_id: 0,
            last_active_t: 0.0,
        };
        let g = SocialGraph::new(&snap);
        let bad = IdentifyConfig {
            max_rounds: 0,
            ..Default::default()
        };
        assert_eq!(identify(&view, &g, &bad, &BTreeSet::new(), |_| unreachable!(), None).unwrap_err(), SocialError::NoRounds);
    }

    #[test]
    fn refinement_finds_victim() {
        let pop = generate(&WorldConfig {
            n_users: 2000,
            like_mean: 6.0,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let snap = pop.clone();
        let top = snap.catalog().top(10);
        let (mut svc, tok) = arena(pop, DisclosurePolicy::tinder(), top);
        let mut identified = 0;
        for k in 0..40 {
            let victim = snap.users()[k * 37].clone();
            let (r, tr) = attack(&mut svc, &tok, victim.user_id, &snap, IdentifyConfig::default()).unwrap();
            assert!(r.pool_sizes.windows(2).all(|w| w[0] >= w[1]), "{:?}", r.pool_sizes);
            assert!(r.final_pool.contains(&victim.social_id));
            assert_eq!(r.pool_sizes.len(), r.rounds_used as usize + 1);
            assert_eq!(tr.len(), r.pool_sizes.len());
            identified += usize::from(r.social_id == Some(victim.social_id));
        }
        assert!(identified >= 20, "{identified}");
    }

    #[test]
    fn csv_rows() {
        let rows = vec![
            IdentifyRow {
                seed: 1,
                rounds_used: 2,
                final_pool: 1,
                identified: true,
            },
            IdentifyRow {
                seed: 2,
                rounds_used: 10,
                final_pool: 3,
                identified: false,
            },
        ];
        let mut buf = Vec::new();
        write_identify_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "seed,rounds_used,final_pool,identified\n1,2,1,true\n2,10,3,false\n");
    }
}
