//! Scenario files and the pipelines behind the command line.
//!
//! A scenario file is a flat list of `key = value` lines; `#` starts a
//! comment. `seed` is mandatory, everything else has a default. Overrides
//! given as `key=value` pairs use the same syntax and are applied after the
//! file. See [`KEYS`] for the accepted keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::attacker::DEFAULT_POI_MIN_DWELL_S;
use crate::experiment::{self, ExperimentError, IdentifySpec, LocalizeSpec, PlanShape, TrackSpec};
use crate::mlat::{self, Norm, SolverConfig};
use crate::report::taxonomy::{self, Mapping};
use crate::report::trace::{AttackTrace, TraceEvent};
use crate::report::{self, Artifacts, LocalizationMap, PoolRun, QuantumError, ReportError};
use crate::service::ServiceConfig;
use crate::socialgraph::{self, IdentifyConfig, IdentifyRow};
use crate::world::{BirthdateMode, BoundingBox, DisclosurePolicy, InterestsMode, TrajectoryTemplate, WorldConfig};

/// Environment variable that overrides the scenario's `out_dir`.
pub const OUT_DIR_ENV: &str = "PROXSIM_OUT_DIR";

/// Keys accepted by [`Scenario::set`], in manifest order.
pub const KEYS: &[&str] = &[
    "seed",
    "attack",
    "out_dir",
    "trials",
    "users",
    "catalog_size",
    "categories",
    "zipf_s",
    "like_mean",
    "trajectory",
    "commute_distance_m",
    "walk_step_m",
    "walk_interval_s",
    "bbox",
    "span_s",
    "policy",
    "share_distance",
    "quantum_m",
    "share_first_name",
    "birthdate_mode",
    "interests_mode",
    "share_social_id",
    "teleport_limit_m",
    "cooldown_s",
    "norm",
    "max_iterations",
    "step_init_m",
    "tol_m",
    "strategy",
    "probes",
    "ring_radius_m",
    "interval_s",
    "duration_s",
    "poi_radius_m",
    "poi_min_dwell_s",
    "victims",
    "attacker_top_likes",
    "batch_size",
    "max_rounds",
    "photo_tiebreak",
    "runtime_samples",
    "runtime_iterations",
    "clock_scale",
];

/// Keys `sweep` accepts.
pub const SWEEPABLE: &[&str] = &["quantum_m", "probes", "batch_size", "interests_mode"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
    Missing,
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub origin: Origin,
    pub field: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.origin {
            Origin::Line(n) => write!(f, "line {n}: `{}`: {}", self.field, self.msg),
            Origin::Override => write!(f, "override `{}`: {}", self.field, self.msg),
            Origin::Missing => write!(f, "missing required field `{}`", self.field),
            Origin::File => write!(f, "cannot read {}: {}", self.field, self.msg),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("attack: {0}")]
    Attack(#[from] ExperimentError),
    #[error("solver: {0}")]
    Solver(#[from] crate::mlat::MlatError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("{0}")]
    Io(String),
}

impl RunError {
    /// 2 for configuration problems, 3 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Localize,
    Track,
    Identify,
    Runtime,
    Overlap,
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub seed: u64,
    pub attack: AttackKind,
    pub out_dir: PathBuf,
    pub trials: usize,
    pub world: WorldConfig,
    pub policy: DisclosurePolicy,
    pub service: ServiceConfig,
    pub solver: SolverConfig,
    pub strategy: PlanShape,
    pub probes: usize,
    pub ring_radius_m: f64,
    pub interval_s: f64,
    pub duration_s: f64,
    pub poi_radius_m: f64,
    pub poi_min_dwell_s: f64,
    pub victims: usize,
    pub attacker_top_likes: usize,
    pub identify: IdentifyConfig,
    pub runtime_samples: Vec<usize>,
    pub runtime_iterations: Vec<u32>,
    /// Sim seconds per wall second while serving; 0 freezes the clock.
    pub clock_scale: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            attack: AttackKind::Localize,
            out_dir: PathBuf::from("out"),
            trials: 1,
            world: WorldConfig::default(),
            policy: DisclosurePolicy::tinder(),
            service: ServiceConfig::default(),
            solver: SolverConfig::default(),
            strategy: PlanShape::Ring,
            probes: 16,
            ring_radius_m: 1000.0,
            interval_s: 3600.0,
            duration_s: 17.0 * 3600.0,
            poi_radius_m: crate::attacker::DEFAULT_POI_RADIUS_M,
            poi_min_dwell_s: DEFAULT_POI_MIN_DWELL_S,
            victims: 100,
            attacker_top_likes: 10,
            identify: IdentifyConfig::default(),
            runtime_samples: vec![10, 100, 1000],
            runtime_iterations: vec![10, 100, 1000],
            clock_scale: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn positive(v: &str) -> Result<f64, String> {
    let x: f64 = parse(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v} must be a positive number"))
    }
}

fn non_negative(v: &str) -> Result<f64, String> {
    let x: f64 = parse(v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v} must be a non-negative number"))
    }
}

fn at_least<T: std::str::FromStr + PartialOrd + fmt::Display>(v: &str, min: T) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    let x: T = parse(v)?;
    if x >= min {
        Ok(x)
    } else {
        Err(format!("{v} must be at least {min}"))
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    let out: Vec<T> = v.split(',').map(|x| parse(x.trim())).collect::<Result<_, _>>()?;
    if out.is_empty() {
        Err("empty list".into())
    } else {
        Ok(out)
    }
}

fn optional_limit(v: &str) -> Result<Option<f64>, String> {
    match v {
        "none" | "inf" | "unlimited" => Ok(None),
        _ => positive(v).map(Some),
    }
}

fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options.iter().find(|(k, _)| *k == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(k, _)| *k).collect();
        format!("{v:?} is not one of {}", names.join(", "))
    })
}

/// Split a file into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError {
                origin: Origin::Line(i + 1),
                field: line.to_string(),
                msg: "expected `key = value`".into(),
            });
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(ConfigError {
                origin: Origin::Line(i + 1),
                field: k,
                msg: "set twice".into(),
            });
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

impl Scenario {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let w = &mut self.world;
        match key {
            "seed" => self.seed = parse(v)?,
            "attack" => {
                self.attack = choice(
                    v,
                    &[
                        ("localize", AttackKind::Localize),
                        ("track", AttackKind::Track),
                        ("identify", AttackKind::Identify),
                        ("runtime", AttackKind::Runtime),
                        ("overlap", AttackKind::Overlap),
                    ],
                )?
            }
            "out_dir" => {
                if v.is_empty() {
                    return Err("empty path".into());
                }
                self.out_dir = PathBuf::from(v)
            }
            "trials" => self.trials = at_least(v, 1usize)?,
            "users" => w.n_users = at_least(v, 1usize)?,
            "catalog_size" => w.catalog_size = at_least(v, 1usize)?,
            "categories" => w.n_categories = at_least(v, 1u16)?,
            "zipf_s" => w.zipf_s = positive(v)?,
            "like_mean" => w.like_mean = non_negative(v)?,
            "trajectory" => {
                w.trajectory = match v {
                    "stationary" => TrajectoryTemplate::Stationary,
                    "commuter" => TrajectoryTemplate::commuter_default(),
                    "random_walk" => TrajectoryTemplate::RandomWalk {
                        step_m: 200.0,
                        interval_s: 600.0,
                    },
                    _ => return Err(format!("{v:?} is not one of stationary, commuter, random_walk")),
                }
            }
            "commute_distance_m" => match &mut w.trajectory {
                TrajectoryTemplate::Commuter { distance_m, .. } => *distance_m = non_negative(v)?,
                _ => return Err("needs `trajectory = commuter` earlier in the file".into()),
            },
            "walk_step_m" | "walk_interval_s" => match &mut w.trajectory {
                TrajectoryTemplate::RandomWalk { step_m, interval_s } => {
                    if key == "walk_step_m" {
                        *step_m = non_negative(v)?
                    } else {
                        *interval_s = positive(v)?
                    }
                }
                _ => return Err("needs `trajectory = random_walk` earlier in the file".into()),
            },
            "bbox" => {
                let c: Vec<f64> = list(v)?;
                let [lat_min, lon_min, lat_max, lon_max] = c[..] else {
                    return Err("expected lat_min,lon_min,lat_max,lon_max".into());
                };
                w.bbox = BoundingBox {
                    lat_min,
                    lon_min,
                    lat_max,
                    lon_max,
                };
                w.bbox.validate().map_err(|e| e.to_string())?;
            }
            "span_s" => w.span_s = positive(v)?,
            "policy" => self.policy = DisclosurePolicy::preset(v).ok_or_else(|| format!("unknown preset {v:?}"))?,
            "share_distance" => self.policy.share_distance = parse(v)?,
            "quantum_m" => self.policy.distance_quantum_m = non_negative(v)?,
            "share_first_name" => self.policy.share_first_name = parse(v)?,
            "birthdate_mode" => {
                self.policy.birthdate_mode = choice(
                    v,
                    &[
                        ("exact", BirthdateMode::Exact),
                        ("fuzzy15d", BirthdateMode::Fuzzy15d),
                        ("hidden", BirthdateMode::Hidden),
                    ],
                )?
            }
            "interests_mode" => {
                self.policy.interests_mode = choice(
                    v,
                    &[
                        ("pages", InterestsMode::Pages),
                        ("categories", InterestsMode::Categories),
                        ("hidden", InterestsMode::Hidden),
                    ],
                )?
            }
            "share_social_id" => self.policy.share_social_id = parse(v)?,
            "teleport_limit_m" => self.service.teleport_limit_m = optional_limit(v)?,
            "cooldown_s" => self.service.cooldown_s = optional_limit(v)?,
            "norm" => self.solver.norm = choice(v, &[("l1", Norm::L1), ("l2", Norm::L2)])?,
            "max_iterations" => self.solver.max_iterations = at_least(v, 1u32)?,
            "step_init_m" => self.solver.step_init_m = positive(v)?,
            "tol_m" => self.solver.tol_m = positive(v)?,
            "strategy" => self.strategy = choice(v, &[("ring", PlanShape::Ring), ("adaptive", PlanShape::Adaptive)])?,
            "probes" => self.probes = at_least(v, 1usize)?,
            "ring_radius_m" => self.ring_radius_m = positive(v)?,
            "interval_s" => self.interval_s = positive(v)?,
            "duration_s" => self.duration_s = non_negative(v)?,
            "poi_radius_m" => self.poi_radius_m = positive(v)?,
            "poi_min_dwell_s" => self.poi_min_dwell_s = non_negative(v)?,
            "victims" => self.victims = at_least(v, 1usize)?,
            "attacker_top_likes" => self.attacker_top_likes = parse(v)?,
            "batch_size" => self.identify.batch_size = at_least(v, 1usize)?,
            "max_rounds" => self.identify.max_rounds = at_least(v, 1u32)?,
            "photo_tiebreak" => self.identify.photo_tiebreak = parse(v)?,
            "runtime_samples" => {
                self.runtime_samples = list(v)?;
                if self.runtime_samples.iter().any(|s| *s < 3) {
                    return Err("sample counts must be at least 3".into());
                }
            }
            "runtime_iterations" => {
                self.runtime_iterations = list(v)?;
                if self.runtime_iterations.contains(&0) {
                    return Err("iteration counts must be at least 1".into());
                }
            }
            "clock_scale" => self.clock_scale = non_negative(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parse a scenario file and apply `overrides` on top.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut s = Self::default();
        let mut has_seed = false;
        for (line, k, v) in parse_lines(text)? {
            has_seed |= k == "seed";
            s.set(&k, &v).map_err(|msg| ConfigError {
                origin: Origin::Line(line),
                field: k.clone(),
                msg,
            })?;
        }
        for (k, v) in overrides {
            has_seed |= k == "seed";
            s.set(k, v).map_err(|msg| ConfigError {
                origin: Origin::Override,
                field: k.clone(),
                msg,
            })?;
        }
        if !has_seed {
            return Err(ConfigError {
                origin: Origin::Missing,
                field: "seed".into(),
                msg: String::new(),
            });
        }
        s.world.seed = s.seed;
        s.solver.seed = s.seed;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            origin: Origin::File,
            field: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, overrides)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = |field: &str, msg: String| ConfigError {
            origin: Origin::Override,
            field: field.into(),
            msg,
        };
        self.world.validate().map_err(|e| err("world", e.to_string()))?;
        self.policy.validate().map_err(|e| err("policy", e.to_string()))?;
        if self.ring_radius_m >= crate::geo::MAX_PLANE_DISTANCE_M {
            return Err(err("ring_radius_m", "must stay under 100 km".into()));
        }
        Ok(())
    }

    /// Every resolved setting, as echoed into the manifest.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    fn localize_spec(&self) -> LocalizeSpec {
        LocalizeSpec {
            world: self.world.clone(),
            plan: self.strategy,
            probes: self.probes,
            ring_radius_m: self.ring_radius_m,
            solver: self.solver,
            service: self.service,
        }
    }
}

/// Parse `key=value` overrides.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(ConfigError {
            origin: Origin::Override,
            field: s.to_string(),
            msg: "expected key=value".into(),
        }),
    }
}

/// What a pipeline produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Scalar results keyed by metric name.
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: Artifacts,
    /// Extra CSV files (name, bytes) beyond the report artifacts.
    pub tables: Vec<(String, Vec<u8>)>,
    pub trace: AttackTrace,
}

fn csv_bytes<R: Serialize>(header: &[&str], rows: impl IntoIterator<Item = R>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Run the scenario's pipeline without touching the filesystem.
pub fn execute(s: &Scenario) -> Result<Outcome, RunError> {
    let mut out = Outcome::default();
    match s.attack {
        AttackKind::Localize => {
            let spec = s.localize_spec();
            let mut rows = Vec::new();
            let mut errors = Vec::new();
            for k in 0..s.trials as u64 {
                let t = experiment::localize_trial(&spec, &s.policy, s.seed + k)?;
                if k == 0 {
                    out.artifacts.localization = Some(LocalizationMap {
                        samples: t.fix.samples.clone(),
                        estimate: t.fix.estimate.p_hat,
                        truth: Some(t.truth_enu()),
                    });
                    out.trace = t.trace.clone();
                }
                rows.push((t.seed, t.error_m, t.fix.estimate.residual, t.fix.estimate.iterations_used));
                errors.push(t.error_m);
            }
            out.tables.push(("localize_trials.csv".into(), csv_bytes(&["seed", "error_m", "residual_m", "iterations_used"], rows)));
            let q = QuantumError::from_errors(s.policy.distance_quantum_m, &errors);
            out.metrics.insert("median_error_m".into(), q.median_error_m);
            out.metrics.insert("p90_error_m".into(), q.p90_error_m);
            out.metrics.insert("max_error_m".into(), errors.iter().copied().fold(0.0, f64::max));
            out.artifacts.error_vs_quantum = vec![q];
        }
        AttackKind::Track => {
            let spec = TrackSpec {
                localize: s.localize_spec(),
                interval_s: s.interval_s,
                duration_s: s.duration_s,
                poi_radius_m: s.poi_radius_m,
                poi_min_dwell_s: s.poi_min_dwell_s,
            };
            let mut rows = Vec::new();
            let mut success = 0usize;
            for k in 0..s.trials as u64 {
                let t = experiment::track_trial(&spec, &s.policy, s.seed + k)?;
                let errs = t.poi_errors_m();
                let ok = t.pois.len() == t.stay_sites.len() && errs.iter().all(|e| *e <= s.poi_radius_m);
                success += usize::from(ok);
                for (p, e) in t.pois.iter().zip(&errs) {
                    rows.push((t.seed, p.center.x_m, p.center.y_m, p.start_t, p.end_t, p.dwell_s, *e));
                }
                if k == 0 {
                    out.metrics.insert("pois".into(), t.pois.len() as f64);
                    out.metrics.insert("gaps".into(), t.track.gaps.len() as f64);
                    out.artifacts.track = Some(t.track.clone());
                    out.trace = t.trace.clone();
                }
            }
            out.tables.push((
                "pois.csv".into(),
                csv_bytes(&["seed", "x_m", "y_m", "start_t", "end_t", "dwell_s", "error_m"], rows),
            ));
            out.metrics.insert("poi_success_rate".into(), success as f64 / s.trials as f64);
        }
        AttackKind::Identify => {
            let spec = IdentifySpec {
                world: s.world.clone(),
                victims: s.victims,
                attacker_top_likes: s.attacker_top_likes,
                identify: s.identify.clone(),
                service: s.service,
            };
            let mut trace = AttackTrace::new();
            let runs = experiment::identify_batch(&spec, &s.policy, s.seed, Some(&mut trace))?;
            let rows: Vec<IdentifyRow> = runs
                .iter()
                .enumerate()
                .map(|(k, r)| IdentifyRow {
                    seed: s.seed + k as u64,
                    rounds_used: r.result.rounds_used,
                    final_pool: r.result.final_pool.len(),
                    identified: r.identified(),
                })
                .collect();
            let mut buf = Vec::new();
            socialgraph::write_identify_csv(&mut buf, &rows).map_err(|e| RunError::Io(e.to_string()))?;
            out.tables.push(("identify.csv".into(), buf));
            out.artifacts.pool_runs = runs
                .iter()
                .enumerate()
                .map(|(k, r)| PoolRun {
                    seed: s.seed + k as u64,
                    pool_sizes: r.result.pool_sizes.clone(),
                })
                .collect();
            let pools: Vec<f64> = runs.iter().map(|r| r.result.final_pool.len() as f64).collect();
            out.metrics.insert("identification_rate".into(), experiment::identification_rate(&runs));
            out.metrics.insert("median_final_pool".into(), report::median(&pools));
            out.metrics.insert(
                "mean_rounds".into(),
                runs.iter().map(|r| r.result.rounds_used as f64).sum::<f64>() / runs.len().max(1) as f64,
            );
            out.trace = trace;
        }
        AttackKind::Runtime => {
            let cells = mlat::runtime_profile(&s.runtime_samples, &s.runtime_iterations, &s.solver, 3, std::time::Duration::from_millis(20))?;
            out.artifacts.runtime = cells;
        }
        AttackKind::Overlap => {
            let mut rows = Vec::new();
            for k in 0..s.trials as u64 {
                let f = experiment::overlap_fraction(
                    &WorldConfig {
                        seed: s.seed + k,
                        ..s.world.clone()
                    },
                    s.attacker_top_likes,
                )?;
                rows.push((s.seed + k, f));
            }
            let fr: Vec<f64> = rows.iter().map(|r| r.1).collect();
            out.metrics.insert("median_overlap".into(), report::median(&fr));
            out.metrics.insert("min_overlap".into(), fr.iter().copied().fold(f64::INFINITY, f64::min));
            out.metrics.insert("max_overlap".into(), fr.iter().copied().fold(0.0, f64::max));
            out.tables.push(("overlap.csv".into(), csv_bytes(&["seed", "overlap_fraction"], rows)));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    scenario: serde_json::Value,
    metrics: &'a BTreeMap<String, f64>,
    files: Vec<String>,
}

fn io_err(path: &Path, e: impl fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// Run and write everything into `dir`. Returns the metrics.
pub fn run_into(s: &Scenario, dir: &Path) -> Result<BTreeMap<String, f64>, RunError> {
    let mut outcome = execute(s)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for (name, bytes) in &outcome.tables {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        files.push(name.clone());
    }
    if !outcome.trace.is_empty() {
        for name in files.iter().chain(["trace.jsonl".to_string()].iter()) {
            let t_s = outcome.trace.last_t();
            outcome
                .trace
                .push(TraceEvent::Export {
                    t_s,
                    artifact: name.clone(),
                })
                .expect("export appended at the last timestamp");
        }
        let mut lines = String::new();
        for e in outcome.trace.events() {
            lines += &serde_json::to_string(e).expect("event serializes");
            lines.push('\n');
        }
        let p = dir.join("trace.jsonl");
        fs::write(&p, lines).map_err(|e| io_err(&p, e))?;
        files.push("trace.jsonl".into());
        outcome.artifacts.violations = Some(taxonomy::classify(&outcome.trace, &Mapping::default()));
    }
    if !outcome.artifacts.is_empty() {
        for p in report::emit(&outcome.artifacts, dir)? {
            files.push(p.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    files.sort();
    let manifest = Manifest {
        scenario: s.resolved(),
        metrics: &outcome.metrics,
        files,
    };
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    Ok(outcome.metrics)
}

/// Output directory after applying `--out` and the environment override.
pub fn resolve_out_dir(s: &Scenario, cli_out: Option<&Path>, env: Option<&str>) -> PathBuf {
    match (cli_out, env) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(e)) if !e.is_empty() => PathBuf::from(e),
        _ => s.out_dir.clone(),
    }
}

/// Run the scenario once per value of `param`, each into `dir/<param>=<value>`,
/// and aggregate every run's metrics into `dir/sweep.csv`.
pub fn sweep(base: &Scenario, param: &str, values: &[String], dir: &Path, parallel: usize) -> Result<Vec<BTreeMap<String, f64>>, RunError> {
    if !SWEEPABLE.contains(&param) {
        return Err(ConfigError {
            origin: Origin::Override,
            field: param.into(),
            msg: format!("not sweepable; choose one of {}", SWEEPABLE.join(", ")),
        }
        .into());
    }
    if values.is_empty() {
        return Err(ConfigError {
            origin: Origin::Override,
            field: param.into(),
            msg: "no values".into(),
        }
        .into());
    }
    let scenarios: Vec<Scenario> = values
        .iter()
        .map(|v| {
            let mut s = base.clone();
            s.set(param, v).map_err(|msg| ConfigError {
                origin: Origin::Override,
                field: param.into(),
                msg,
            })?;
            s.validate()?;
            Ok(s)
        })
        .collect::<Result<_, ConfigError>>()?;
    let one = |(v, s): (&String, &Scenario)| run_into(s, &dir.join(format!("{param}={v}")));
    let results: Vec<BTreeMap<String, f64>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| RunError::Io(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            values.par_iter().zip(scenarios.par_iter()).map(one).collect::<Result<_, _>>()
        })?
    } else {
        values.iter().zip(scenarios.iter()).map(one).collect::<Result<_, _>>()?
    };
    let columns: BTreeSet<&String> = results.iter().flat_map(|m| m.keys()).collect();
    let mut header = vec!["param".to_string(), "value".to_string()];
    header.extend(columns.iter().map(|c| c.to_string()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(|e| RunError::Io(e.to_string()))?;
    for (v, m) in values.iter().zip(&results) {
        let mut row = vec![param.to_string(), v.clone()];
        row.extend(columns.iter().map(|c| m.get(*c).map_or(String::new(), |x| x.to_string())));
        w.write_record(&row).map_err(|e| RunError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Io(e.to_string()))?;
    let p = dir.join("sweep.csv");
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let s = Scenario::parse("seed = 5\nattack = track # comment\n\nquantum_m = 100\n", &[("probes".into(), "8".into())]).unwrap();
        assert_eq!(s.seed, 5);
        assert_eq!(s.world.seed, 5);
        assert_eq!(s.attack, AttackKind::Track);
        assert_eq!(s.policy.distance_quantum_m, 100.0);
        assert_eq!(s.probes, 8);
        let o = Scenario::parse("seed=1", &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(o.seed, 9);
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let e = Scenario::parse("attack = localize\n", &[]).unwrap_err();
        assert_eq!(e.origin, Origin::Missing);
        assert_eq!(e.field, "seed");
        assert!(e.to_string().contains("seed"));

        let e = Scenario::parse("seed = 1\n\nquantum_m = -3\n", &[]).unwrap_err();
        assert_eq!((e.origin.clone(), e.field.as_str()), (Origin::Line(3), "quantum_m"));
        assert!(e.to_string().starts_with("line 3: `quantum_m`"));

        let e = Scenario::parse("seed = 1\nbogus = 2\n", &[]).unwrap_err();
        assert_eq!(e.field, "bogus");
        let e = Scenario::parse("seed = 1\nseed = 2\n", &[]).unwrap_err();
        assert_eq!(e.msg, "set twice");
        let e = Scenario::parse("seed 1\n", &[]).unwrap_err();
        assert_eq!(e.origin, Origin::Line(1));
        let e = Scenario::parse("seed = 1\n", &[("interests_mode".into(), "emoji".into())]).unwrap_err();
        assert_eq!(e.origin, Origin::Override);
        let e = Scenario::parse("seed = 1\ncommute_distance_m = 100\n", &[]).unwrap_err();
        assert_eq!(e.field, "commute_distance_m");
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "attack" => "identify",
            "out_dir" => "x",
            "trajectory" => "random_walk",
            "commute_distance_m" => return None,
            "bbox" => "41.3,2.1,41.4,2.2",
            "policy" => "happn",
            "share_distance" | "share_first_name" | "share_social_id" | "photo_tiebreak" => "true",
            "birthdate_mode" => "exact",
            "interests_mode" => "categories",
            "norm" => "l2",
            "strategy" => "adaptive",
            "runtime_samples" => "10,20",
            "runtime_iterations" => "5,6",
            "teleport_limit_m" | "cooldown_s" => "none",
            _ => "3",
        }
        .into();
        let mut s = Scenario::default();
        for k in KEYS {
            if let Some(v) = sample(k) {
                let v: &str = v;
                s.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
            }
        }
        assert!(s.set("nope", "1").is_err());
    }

    #[test]
    fn out_dir_precedence() {
        let s = Scenario::parse("seed=1\nout_dir=cfg", &[]).unwrap();
        assert_eq!(resolve_out_dir(&s, None, None), PathBuf::from("cfg"));
        assert_eq!(resolve_out_dir(&s, None, Some("env")), PathBuf::from("env"));
        assert_eq!(resolve_out_dir(&s, Some(Path::new("cli")), Some("env")), PathBuf::from("cli"));
    }

    #[test]
    fn run_writes_manifest_and_is_repeatable() {
        let s = Scenario::parse("seed = 3\nattack = localize\ntrials = 3\nquantum_m = 100\nusers = 10\n", &[]).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_into(&s, a.path()).unwrap();
        run_into(&s, b.path()).unwrap();
        for f in ["manifest.json", "localize_trials.csv", "localization_map.csv", "error_vs_quantum.csv", "violations.csv", "trace.jsonl"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let m: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["scenario"]["seed"], 3);
        assert_eq!(m["scenario"]["policy"]["distance_quantum_m"], 100.0);
        assert!(m["files"].as_array().unwrap().iter().any(|f| f == "localization_map.svg"));
    }

    #[test]
    fn sweep_rejects_unknown_param() {
        let s = Scenario::parse("seed=1", &[]).unwrap();
        let d = tempfile::tempdir().unwrap();
        let e = sweep(&s, "users", &["1".into()], d.path(), 1).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn single_value_sweep_matches_plain_run() {
        let s = Scenario::parse("seed = 2\nattack = localize\ntrials = 2\nusers = 5\n", &[]).unwrap();
        let d = tempfile::tempdir().unwrap();
        let plain = run_into(&s, &d.path().join("plain")).unwrap();
        let swept = sweep(&s, "quantum_m", &["0".into()], &d.path().join("sw"), 1).unwrap();
        assert_eq!(swept, vec![plain]);
        for f in ["localize_trials.csv", "localization_map.csv", "manifest.json"] {
            assert_eq!(
                fs::read(d.path().join("plain").join(f)).unwrap(),
                fs::read(d.path().join("sw").join("quantum_m=0").join(f)).unwrap(),
                "{f}"
            );
        }
        let agg = fs::read_to_string(d.path().join("sw/sweep.csv")).unwrap();
        assert!(agg.starts_with("param,value,max_error_m,median_error_m,p90_error_m\nquantum_m,0,"));
    }
}
