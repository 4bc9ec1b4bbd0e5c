//! Metrics, violation labelling and artifact emission.
//!
//! [`emit`] writes one CSV and one 800×600 SVG per artifact present:
//!
//! | artifact | CSV columns | SVG element ids |
//! |---|---|---|
//! | `runtime_grid` | `samples,iterations,iterations_used,seconds_per_solve` | `series-iter-{iterations}`, `cell-{samples}-{iterations}` |
//! | `localization_map` | `observer_x_m,observer_y_m,reported_m,t_s,quantum_m`, plus `localization_points.csv` (`kind,x_m,y_m`) | `sample-{k}` (one circle per sample), `estimate`, `truth` |
//! | `pool_sizes` | `seed,round,pool_size` | `pool-run-{seed}`, `pool-median` |
//! | `error_vs_quantum` | `quantum_m,trials,median_error_m,p90_error_m` | `error-curve`, `quantum-{q}` |
//! | `violations` | `category,activity,events`, plus `violation_labels.csv` (`event,labels`) | `bar-{category}` |
//! | `track` | `t_s,est_x_m,est_y_m,residual_m` | none |
//!
//! Everything except the runtime seconds column is a pure function of the inputs.

pub mod svg;
pub mod taxonomy;
pub mod trace;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::attacker::TrackRecord;
use crate::geo::EnuPoint;
use crate::mlat::{self, DistanceSample, RuntimeCell};
use svg::{n, Doc, Frame};
use taxonomy::{Activity, Category, ViolationReport};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to emit")]
    Empty,
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// Median of the finite values; NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile of the finite values; NaN if there are none.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub samples: Vec<DistanceSample>,
    pub estimate: EnuPoint,
    pub truth: Option<EnuPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRun {
    pub seed: u64,
    pub pool_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantumError {
    pub quantum_m: f64,
    pub trials: usize,
    pub median_error_m: f64,
    pub p90_error_m: f64,
}

impl QuantumError {
    pub fn from_errors(quantum_m: f64, errors: &[f64]) -> Self {
        Self {
            quantum_m,
            trials: errors.len(),
            median_error_m: median(errors),
            p90_error_m: quantile(errors, 0.9),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub runtime: Vec<RuntimeCell>,
    pub localization: Option<LocalizationMap>,
    pub pool_runs: Vec<PoolRun>,
    pub error_vs_quantum: Vec<QuantumError>,
    pub violations: Option<ViolationReport>,
    pub track: Option<TrackRecord>,
}

impl Artifacts {
    pub fn is_empty(&self) -> bool {
        self.runtime.is_empty()
            && self.localization.is_none()
            && self.pool_runs.is_empty()
            && self.error_vs_quantum.is_empty()
            && self.violations.is_none()
            && self.track.is_none()
    }
}

struct Out<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Out<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), ReportError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| ReportError::Io {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        self.written.push(path);
        Ok(())
    }

    fn csv<R: Serialize>(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<(), ReportError> {
        let err = |e: csv::Error| ReportError::Io {
            path: self.dir.join(name),
            msg: e.to_string(),
        };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Io {
            path: self.dir.join(name),
            msg: e.to_string(),
        })?;
        self.write(name, &bytes)
    }
}

/// Write every present artifact into `out_dir`, creating it if needed.
/// Returns the written paths in write order.
pub fn emit(artifacts: &Artifacts, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if artifacts.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(|e| ReportError::Io {
        path: out_dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Out {
        dir: out_dir,
        written: Vec::new(),
    };
    if !artifacts.runtime.is_empty() {
        out.csv(
            "runtime_grid.csv",
            &["samples", "iterations", "iterations_used", "seconds_per_solve"],
            &artifacts.runtime,
        )?;
        out.write("runtime_grid.svg", runtime_svg(&artifacts.runtime).as_bytes())?;
    }
    if let Some(map) = &artifacts.localization {
        let mut buf = Vec::new();
        mlat::write_samples_csv(&mut buf, &map.samples).map_err(|e| ReportError::Io {
            path: out_dir.join("localization_map.csv"),
            msg: e.to_string(),
        })?;
        out.write("localization_map.csv", &buf)?;
        let mut pts = vec![("estimate", map.estimate.x_m, map.estimate.y_m)];
        if let Some(t) = map.truth {
            pts.push(("truth", t.x_m, t.y_m));
        }
        out.csv("localization_points.csv", &["kind", "x_m", "y_m"], pts)?;
        out.write("localization_map.svg", map_svg(map).as_bytes())?;
    }
    if !artifacts.pool_runs.is_empty() {
        let rows = artifacts
            .pool_runs
            .iter()
            .flat_map(|r| r.pool_sizes.iter().enumerate().map(move |(k, s)| (r.seed, k, *s)));
        out.csv("pool_sizes.csv", &["seed", "round", "pool_size"], rows)?;
        out.write("pool_sizes.svg", pool_svg(&artifacts.pool_runs).as_bytes())?;
    }
    if !artifacts.error_vs_quantum.is_empty() {
        let mut rows = artifacts.error_vs_quantum.clone();
        rows.sort_by(|a, b| a.quantum_m.total_cmp(&b.quantum_m));
        out.csv("error_vs_quantum.csv", &["quantum_m", "trials", "median_error_m", "p90_error_m"], &rows)?;
        out.write("error_vs_quantum.svg", quantum_svg(&rows).as_bytes())?;
    }
    if let Some(v) = &artifacts.violations {
        let rows = v.activities.iter().map(|(a, k)| (format!("{:?}", a.category()), a.label(), *k));
        out.csv("violations.csv", &["category", "activity", "events"], rows)?;
        let labels = v.labels.iter().enumerate().map(|(i, set)| {
            let names: Vec<&str> = set.iter().map(|a| a.label()).collect();
            (i, names.join(";"))
        });
        out.csv("violation_labels.csv", &["event", "labels"], labels)?;
        out.write("violations.svg", violations_svg(v).as_bytes())?;
    }
    if let Some(track) = &artifacts.track {
        let mut buf = Vec::new();
        track.write_csv(&mut buf).map_err(|e| ReportError::Io {
            path: out_dir.join("track.csv"),
            msg: e.to_string(),
        })?;
        out.write("track.csv", &buf)?;
    }
    Ok(out.written)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn runtime_svg(cells: &[RuntimeCell]) -> String {
    let pos = |v: f64| v.max(1e-9);
    let xs = cells.iter().map(|c| c.samples as f64);
    let ys = cells.iter().map(|c| pos(c.seconds_per_solve));
    let f = Frame {
        x: (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(0.0, f64::max)),
        y: (ys.clone().fold(f64::INFINITY, f64::min) / 2.0, ys.fold(0.0, f64::max) * 2.0),
        log_x: true,
        log_y: true,
        equal_aspect: false,
    };
    let f = if f.x.1 > f.x.0 { f } else { Frame { x: (f.x.0 / 2.0, f.x.1 * 2.0), ..f } };
    let mut d = Doc::new("runtime-grid", "Time per position estimate");
    d.axes(&f, "distance samples", "seconds per solve");
    let mut iters: Vec<u32> = cells.iter().map(|c| c.iterations).collect();
    iters.sort_unstable();
    iters.dedup();
    for (k, it) in iters.iter().enumerate() {
        let mut series: Vec<&RuntimeCell> = cells.iter().filter(|c| c.iterations == *it).collect();
        series.sort_by_key(|c| c.samples);
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = series.iter().map(|c| (c.samples as f64, pos(c.seconds_per_solve))).collect();
        d.polyline(&format!("series-iter-{it}"), &f, &pts, color);
        for c in series {
            d.marker(&format!("cell-{}-{}", c.samples, c.iterations), &f, c.samples as f64, pos(c.seconds_per_solve), color);
        }
    }
    d.finish()
}

fn map_svg(map: &LocalizationMap) -> String {
    let mut lo = (map.estimate.x_m, map.estimate.y_m);
    let mut hi = lo;
    let mut grow = |x: f64, y: f64| {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    };
    for s in &map.samples {
        grow(s.observer.x_m - s.reported_m, s.observer.y_m - s.reported_m);
        grow(s.observer.x_m + s.reported_m, s.observer.y_m + s.reported_m);
    }
    if let Some(t) = map.truth {
        grow(t.x_m, t.y_m);
    }
    let f = Frame {
        equal_aspect: true,
        ..Frame::linear((lo.0, hi.0), (lo.1, hi.1))
    };
    let mut d = Doc::new("localization-map", "Distance samples and position estimate");
    d.axes(&f, "east (m)", "north (m)");
    for (k, s) in map.samples.iter().enumerate() {
        let (cx, cy) = f.px(s.observer.x_m, s.observer.y_m);
        d.raw(&format!(
            r##"<circle id="sample-{k}" cx="{}" cy="{}" r="{}" fill="none" stroke="#1f77b4" stroke-opacity="0.6"/>"##,
            n(cx),
            n(cy),
            n(f.len(s.reported_m))
        ));
    }
    let cross = |id: &str, p: EnuPoint, color: &str| {
        let (x, y) = f.px(p.x_m, p.y_m);
        format!(
            r#"<path id="{id}" d="M{} {} L{} {} M{} {} L{} {}" stroke="{color}" stroke-width="2"/>"#,
            n(x - 6.0),
            n(y - 6.0),
            n(x + 6.0),
            n(y + 6.0),
            n(x - 6.0),
            n(y + 6.0),
            n(x + 6.0),
            n(y - 6.0)
        )
    };
    d.raw(&cross("estimate", map.estimate, "#d62728"));
    if let Some(t) = map.truth {
        d.raw(&cross("truth", t, "#2ca02c"));
    }
    d.finish()
}

fn pool_svg(runs: &[PoolRun]) -> String {
    let rounds = runs.iter().map(|r| r.pool_sizes.len()).max().unwrap_or(1);
    let top = runs.iter().flat_map(|r| r.pool_sizes.iter()).copied().max().unwrap_or(1) as f64;
    let f = Frame::linear((0.0, (rounds.max(2) - 1) as f64), (0.0, top));
    let mut d = Doc::new("pool-sizes", "Candidate pool size per round");
    d.axes(&f, "round", "candidates");
    for r in runs {
        let pts: Vec<(f64, f64)> = r.pool_sizes.iter().enumerate().map(|(k, s)| (k as f64, *s as f64)).collect();
        d.polyline(&format!("pool-run-{}", r.seed), &f, &pts, "#9e9e9e");
    }
    // A finished run keeps its final size for the remaining rounds.
    let med: Vec<(f64, f64)> = (0..rounds)
        .map(|k| {
            let at: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.pool_sizes.get(k).or(r.pool_sizes.last()).map(|s| *s as f64))
                .collect();
            (k as f64, median(&at))
        })
        .collect();
    d.polyline("pool-median", &f, &med, "#d62728");
    d.finish()
}

fn quantum_svg(rows: &[QuantumError]) -> String {
    let log_x = rows.iter().all(|r| r.quantum_m > 0.0) && rows.len() > 1;
    let qs = rows.iter().map(|r| r.quantum_m);
    let top = rows.iter().map(|r| r.p90_error_m.max(r.median_error_m)).filter(|v| v.is_finite()).fold(1.0, f64::max);
    let mut f = Frame::linear((qs.clone().fold(f64::INFINITY, f64::min), qs.fold(0.0, f64::max)), (0.0, top));
    f.log_x = log_x && f.x.0 > 0.0;
    let mut d = Doc::new("error-vs-quantum", "Localization error against distance rounding");
    d.axes(&f, "quantum (m)", "median error (m)");
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.quantum_m, r.median_error_m)).collect();
    d.polyline("error-curve", &f, &pts, "#1f77b4");
    for r in rows {
        d.marker(&format!("quantum-{}", r.quantum_m), &f, r.quantum_m, r.median_error_m, "#1f77b4");
    }
    d.finish()
}

fn violations_svg(v: &ViolationReport) -> String {
    let top = v.categories.values().copied().max().unwrap_or(0).max(1) as f64;
    let f = Frame::linear((0.0, 4.0), (0.0, top));
    let mut d = Doc::new("violations", "Trace events per violation category");
    d.axes(&f, "category", "events");
    for (k, c) in Category::ALL.iter().enumerate() {
        let count = v.categories.get(c).copied().unwrap_or(0) as f64;
        let (x0, y0) = f.px(k as f64 + 0.15, 0.0);
        let (x1, y1) = f.px(k as f64 + 0.85, count);
        let name = format!("{c:?}").to_lowercase();
        d.raw(&format!(
            r#"<rect id="bar-{name}" x="{}" y="{}" width="{}" height="{}" fill="{}"/><text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{c:?}</text>"#,
            n(x0),
            n(y1),
            n(x1 - x0),
            n(y0 - y1),
            PALETTE[k],
            n((x0 + x1) / 2.0),
            n(y0 + 32.0)
        ));
    }
    if !v.unexercised.is_empty() {
        let names: Vec<&str> = v.unexercised.iter().map(|a: &Activity| a.label()).collect();
        d.raw(&format!(
            r#"<text id="unexercised" x="400" y="56" text-anchor="middle" font-family="sans-serif" font-size="11">not exercised: {}</text>"#,
            svg::escape(&names.join(", "))
        ));
    }
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::report::trace::{AttackTrace, TraceEvent};
    use crate::world::UserId;

    fn sample_artifacts() -> Artifacts {
        let reference = GeoPoint::new(41.4, 2.17).unwrap();
        let samples = mlat::ring_instance(reference, (120.0, -40.0), 5, 800.0);
        let mut tr = AttackTrace::new();
        let p = tr
            .push(TraceEvent::Probe {
                t_s: 0.0,
                target: UserId(1),
                at: reference,
            })
            .unwrap();
        tr.push(TraceEvent::LocalizeResult {
            t_s: 0.0,
            target: UserId(1),
            estimate: EnuPoint::origin(reference),
            residual: 0.0,
            probes: vec![p],
        })
        .unwrap();
        Artifacts {
            runtime: vec![
                RuntimeCell {
                    samples: 10,
                    iterations: 10,
                    iterations_used: 10,
                    seconds_per_solve: 1e-6,
                },
                RuntimeCell {
                    samples: 100,
                    iterations: 10,
                    iterations_used: 10,
                    seconds_per_solve: 1e-5,
                },
            ],
            localization: Some(LocalizationMap {
                samples,
                estimate: EnuPoint::new(119.0, -41.0, reference),
                truth: Some(EnuPoint::new(120.0, -40.0, reference)),
            }),
            pool_runs: vec![
                PoolRun {
                    seed: 1,
                    pool_sizes: vec![9, 4, 1],
                },
                PoolRun {
                    seed: 2,
                    pool_sizes: vec![3, 3],
                },
            ],
            error_vs_quantum: vec![QuantumError::from_errors(100.0, &[3.0, 1.0, 2.0]), QuantumError::from_errors(10.0, &[0.5])],
            violations: Some(taxonomy::classify(&tr, &taxonomy::Mapping::default())),
            track: None,
        }
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(quantile(&[0.0, 10.0], 0.9), 9.0);
        assert_eq!(median(&[f64::NAN, 5.0]), 5.0);
    }

    #[test]
    fn emission_is_deterministic() {
        let a = sample_artifacts();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = emit(&a, d1.path()).unwrap();
        let f2 = emit(&a, d2.path()).unwrap();
        assert_eq!(f1.len(), f2.len());
        for (x, y) in f1.iter().zip(&f2) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?}");
        }
    }

    #[test]
    fn artifact_contents() {
        let a = sample_artifacts();
        let dir = tempfile::tempdir().unwrap();
        emit(&a, dir.path()).unwrap();
        let read = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap();
        let map = read("localization_map.svg");
        assert_eq!(map.matches("<circle ").count(), 5);
        assert!(map.contains(r#"id="sample-4""#) && map.contains(r#"id="truth""#) && map.contains(r#"id="estimate""#));
        let q = read("error_vs_quantum.csv");
        assert_eq!(q.lines().next(), Some("quantum_m,trials,median_error_m,p90_error_m"));
        let qs: Vec<f64> = q.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(qs, vec![10.0, 100.0]);
        assert!(read("pool_sizes.csv").starts_with("seed,round,pool_size\n1,0,9\n"));
        assert!(read("pool_sizes.svg").contains(r#"id="pool-median""#));
        assert!(read("runtime_grid.svg").contains(r#"id="cell-100-10""#));
        let v = read("violations.csv");
        assert_eq!(v.lines().count(), 16);
        assert!(v.contains("Collection,Surveillance,1"));
        assert!(read("violations.svg").contains(r#"id="bar-invasion""#));
        for f in ["runtime_grid.svg", "localization_map.svg", "pool_sizes.svg", "error_vs_quantum.svg", "violations.svg"] {
            assert!(read(f).contains(r#"width="800" height="600""#), "{f}");
        }
    }

    #[test]
    fn empty_and_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit(&Artifacts::default(), dir.path()), Err(ReportError::Empty)));
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(matches!(emit(&sample_artifacts(), &file.join("sub")), Err(ReportError::Io { .. })));
    }
}
