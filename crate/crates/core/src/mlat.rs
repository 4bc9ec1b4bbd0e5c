//! Range-only position estimation.
//!
//! A target's position is recovered from distances reported between it and a
//! set of known observer positions, by minimizing the mean absolute (L1) or
//! mean squared (L2) mismatch between the distance implied by a candidate point
//! and the reported one. The minimizer is a derivative-free compass search:
//! poll eight directions at the current step, move to the best strictly
//! improving point, otherwise halve the step. It handles the non-smooth L1
//! objective and floor-quantized readings with a single code path.

use std::io;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EnuPoint, GeoPoint};

/// Smallest accepted ratio between the two singular values of the centered
/// observer matrix.
pub const COLLINEARITY_TOLERANCE: f64 = 1e-6;

/// Jitter applied to the starting centroid, as a fraction of `step_init_m`.
const JITTER_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlatError {
    #[error("no distance samples")]
    Empty,
    #[error("underdetermined: {have} samples, at least 3 are needed")]
    Underdetermined { have: usize },
    #[error("observers are collinear; two mirror solutions exist")]
    DegenerateGeometry,
    #[error("samples do not share one local plane reference")]
    MixedReference,
    #[error("invalid solver config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

/// One observation: where the observer stood, the distance the service
/// reported, when, and the quantization step the reading was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub observer: EnuPoint,
    pub reported_m: f64,
    pub t_s: f64,
    /// 0 means the reading is exact.
    pub quantum_m: f64,
}

impl DistanceSample {
    pub fn new(observer: EnuPoint, reported_m: f64, t_s: f64, quantum_m: f64) -> Result<Self, MlatError> {
        if !reported_m.is_finite() || reported_m < 0.0 {
            return Err(MlatError::InvalidSample(format!("reported distance {reported_m}")));
        }
        if !quantum_m.is_finite() || quantum_m < 0.0 {
            return Err(MlatError::InvalidSample(format!("quantum {quantum_m}")));
        }
        if quantum_m > 0.0 {
            let steps = reported_m / quantum_m;
            if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
                return Err(MlatError::InvalidSample(format!(
                    "reported {reported_m} is not a multiple of quantum {quantum_m}"
                )));
            }
        }
        Ok(Self { observer, reported_m, t_s, quantum_m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub norm: Norm,
    pub max_iterations: u32,
    pub step_init_m: f64,
    pub tol_m: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            norm: Norm::L1,
            max_iterations: 2_000,
            step_init_m: 500.0,
            tol_m: 0.01,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), MlatError> {
        if self.max_iterations == 0 {
            return Err(MlatError::InvalidConfig("max_iterations must be >= 1"));
        }
        if !(self.tol_m > 0.0) || !self.tol_m.is_finite() {
            return Err(MlatError::InvalidConfig("tol_m must be > 0"));
        }
        if !(self.step_init_m > 0.0) || !self.step_init_m.is_finite() {
            return Err(MlatError::InvalidConfig("step_init_m must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub p_hat: EnuPoint,
    /// Objective value at `p_hat` (already normalized per sample).
    pub residual: f64,
    pub iterations_used: u32,
    pub samples_used: usize,
}

/// Mean absolute (L1) or mean squared (L2) range mismatch at `p`.
pub fn objective(p: &EnuPoint, samples: &[DistanceSample], norm: Norm) -> Result<f64, MlatError> {
    if samples.is_empty() {
        return Err(MlatError::Empty);
    }
    let field = Field::from_samples(samples, (0.0, 0.0));
    Ok(field.eval(p.x_m, p.y_m, norm))
}

/// Observers and readings flattened for the inner loop, relative to `origin`.
struct Field {
    xs: Vec<f64>,
    ys: Vec<f64>,
    reported: Vec<f64>,
}

impl Field {
    fn from_samples(samples: &[DistanceSample], origin: (f64, f64)) -> Self {
        Self {
            xs: samples.iter().map(|s| s.observer.x_m - origin.0).collect(),
            ys: samples.iter().map(|s| s.observer.y_m - origin.1).collect(),
            reported: samples.iter().map(|s| s.reported_m).collect(),
        }
    }

    fn eval(&self, x: f64, y: f64, norm: Norm) -> f64 {
        let n = self.xs.len() as f64;
        let it = self.xs.iter().zip(&self.ys).zip(&self.reported);
        let total: f64 = match norm {
            Norm::L1 => it
                .map(|((ox, oy), r)| {
                    let (dx, dy) = (x - ox, y - oy);
                    ((dx * dx + dy * dy).sqrt() - r).abs()
                })
                .sum(),
            Norm::L2 => it
                .map(|((ox, oy), r)| {
                    let (dx, dy) = (x - ox, y - oy);
                    let e = (dx * dx + dy * dy).sqrt() - r;
                    e * e
                })
                .sum(),
        };
        total / n
    }
}

/// Ratio of the smaller to the larger singular value of the centered observer
/// matrix; 0 for collinear (or coincident) observers.
pub fn geometry_conditioning(samples: &[DistanceSample]) -> f64 {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return 0.0;
    }
    let cx = samples.iter().map(|s| s.observer.x_m).sum::<f64>() / n;
    let cy = samples.iter().map(|s| s.observer.y_m).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for s in samples {
        let (dx, dy) = (s.observer.x_m - cx, s.observer.y_m - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let half_trace = (sxx + syy) / 2.0;
    let spread = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let big = half_trace + spread;
    if big <= 0.0 {
        return 0.0;
    }
    let small = ((sxx * syy - sxy * sxy) / big).max(0.0);
    (small / big).sqrt()
}

const DIRECTIONS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

fn check_samples(samples: &[DistanceSample]) -> Result<GeoPoint, MlatError> {
    let first = samples.first().ok_or(MlatError::Empty)?;
    if samples.len() < 3 {
        return Err(MlatError::Underdetermined { have: samples.len() });
    }
    let reference = first.observer.reference;
    if samples.iter().any(|s| s.observer.reference != reference) {
        return Err(MlatError::MixedReference);
    }
    if geometry_conditioning(samples) <= COLLINEARITY_TOLERANCE {
        return Err(MlatError::DegenerateGeometry);
    }
    Ok(reference)
}

/// Number of samples whose pairwise circle intersections seed the search.
const MAX_ANCHORS: usize = 8;

/// Pick the starting point: the jittered centroid or any pairwise circle
/// intersection among a spread of anchor samples, whichever scores lowest.
fn best_start(field: &Field, jittered: (f64, f64), norm: Norm) -> (f64, f64, f64) {
    let n = field.xs.len();
    let anchors: Vec<usize> = if n <= MAX_ANCHORS {
        (0..n).collect()
    } else {
        (0..MAX_ANCHORS).map(|k| k * n / MAX_ANCHORS).collect()
    };
    let mut best = (jittered.0, jittered.1, field.eval(jittered.0, jittered.1, norm));
    for (i, &a) in anchors.iter().enumerate() {
        for &b in &anchors[i + 1..] {
            let centers = ((field.xs[a], field.ys[a]), (field.xs[b], field.ys[b]));
            for (x, y) in circle_meets(centers.0, field.reported[a], centers.1, field.reported[b]) {
                let f = field.eval(x, y, norm);
                if f < best.2 || (f == best.2 && (x, y) < (best.0, best.1)) {
                    best = (x, y, f);
                }
            }
        }
    }
    best
}

/// Intersection points of two circles, or the midpoint of their closest
/// approach along the center line when they do not meet.
fn circle_meets(a: (f64, f64), ra: f64, b: (f64, f64), rb: f64) -> Vec<(f64, f64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let d = (dx * dx + dy * dy).sqrt();
    if d == 0.0 {
        return Vec::new();
    }
    let (ux, uy) = (dx / d, dy / d);
    let along_line = |t: f64| vec![(a.0 + t * ux, a.1 + t * uy)];
    if d > ra + rb {
        return along_line((ra + d - rb) / 2.0);
    }
    if ra > d + rb {
        return along_line((ra + d + rb) / 2.0);
    }
    if rb > d + ra {
        return along_line((d - rb - ra) / 2.0);
    }
    let along = (d * d + ra * ra - rb * rb) / (2.0 * d);
    let h = (ra * ra - along * along).max(0.0).sqrt();
    let (mx, my) = (a.0 + along * ux, a.1 + along * uy);
    vec![(mx - h * uy, my + h * ux), (mx + h * uy, my - h * ux)]
}

/// Estimate the target position from at least three non-collinear samples.
///
/// The search starts from the better of the observer centroid (plus a seeded
/// jitter) and the pairwise circle intersections of up to eight anchor
/// samples, and stops once the step falls below `tol_m` or `max_iterations`
/// polls were made.
/// Equal-objective candidates are broken by smallest x, then smallest y.
pub fn multilaterate(samples: &[DistanceSample], cfg: &SolverConfig) -> Result<PositionEstimate, MlatError> {
    cfg.validate()?;
    let reference = check_samples(samples)?;

    let n = samples.len() as f64;
    let cx = samples.iter().map(|s| s.observer.x_m).sum::<f64>() / n;
    let cy = samples.iter().map(|s| s.observer.y_m).sum::<f64>() / n;
    // Work relative to the centroid so the result does not depend on where the plane origin sits.
    let field = Field::from_samples(samples, (cx, cy));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = JITTER_FRACTION * cfg.step_init_m * rng.random::<f64>().sqrt();
    let jittered = (radius * angle.cos(), radius * angle.sin());
    let (mut x, mut y, mut f) = best_start(&field, jittered, cfg.norm);
    let mut step = cfg.step_init_m;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut best: Option<(f64, f64, f64)> = None;
        for (dx, dy) in DIRECTIONS {
            let (cx_, cy_) = (x + step * dx, y + step * dy);
            let fc = field.eval(cx_, cy_, cfg.norm);
            let better = match best {
                None => true,
                Some((bf, bx, by)) => fc < bf || (fc == bf && (cx_, cy_) < (bx, by)),
            };
            if better {
                best = Some((fc, cx_, cy_));
            }
        }
        let (bf, bx, by) = best.expect("eight directions polled");
        if bf < f {
            (x, y, f) = (bx, by, bf);
        } else {
            step *= 0.5;
            if step < cfg.tol_m {
                break;
            }
        }
    }

    Ok(PositionEstimate {
        p_hat: EnuPoint::new(x + cx, y + cy, reference),
        residual: f,
        iterations_used: iterations,
        samples_used: samples.len(),
    })
}

/// One cell of the runtime grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RuntimeCell {
    pub samples: usize,
    pub iterations: u32,
    pub iterations_used: u32,
    pub seconds_per_solve: f64,
}

/// Observers on a ring of `radius_m` around a target sitting at `target`, with
/// exact distances.
pub fn ring_instance(reference: GeoPoint, target: (f64, f64), count: usize, radius_m: f64) -> Vec<DistanceSample> {
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count as f64;
            let observer = EnuPoint::new(radius_m * a.cos(), radius_m * a.sin(), reference);
            let (dx, dy) = (observer.x_m - target.0, observer.y_m - target.1);
            DistanceSample {
                observer,
                reported_m: (dx * dx + dy * dy).sqrt(),
                t_s: 0.0,
                quantum_m: 0.0,
            }
        })
        .collect()
}

/// Time the solver over a grid of sample counts and iteration budgets.
///
/// Every solve runs with a vanishing tolerance so the full iteration budget
/// is spent. Each cell reports the fastest of `repeats` timed batches; a batch
/// repeats the solve until at least `min_batch` of wall time has elapsed. Run
/// single-threaded.
pub fn runtime_profile(
    sample_counts: &[usize],
    iteration_counts: &[u32],
    cfg: &SolverConfig,
    repeats: usize,
    min_batch: Duration,
) -> Result<Vec<RuntimeCell>, MlatError> {
    if sample_counts.contains(&0) || iteration_counts.contains(&0) {
        return Err(MlatError::InvalidConfig("counts must be positive"));
    }
    let reference = GeoPoint::new(0.0, 0.0).expect("valid");
    let mut cells = Vec::new();
    for &samples in sample_counts {
        let instance = ring_instance(reference, (137.0, -211.0), samples.max(3), 1_000.0);
        for &iterations in iteration_counts {
            let run_cfg = SolverConfig {
                max_iterations: iterations,
                tol_m: f64::MIN_POSITIVE,
                ..*cfg
            };
            let mut best = f64::INFINITY;
            let mut used = 0;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let mut calls = 0u32;
                while calls == 0 || start.elapsed() < min_batch {
                    let est = multilaterate(std::hint::black_box(&instance), &run_cfg)?;
                    used = est.iterations_used;
                    calls += 1;
                }
                best = best.min(start.elapsed().as_secs_f64() / calls as f64);
            }
            cells.push(RuntimeCell {
                samples,
                iterations,
                iterations_used: used,
                seconds_per_solve: best,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    observer_x_m: f64,
    observer_y_m: f64,
    reported_m: f64,
    t_s: f64,
    quantum_m: f64,
}

/// Write samples as CSV with header `observer_x_m,observer_y_m,reported_m,t_s,quantum_m`.
pub fn write_samples_csv<W: io::Write>(out: W, samples: &[DistanceSample]) -> Result<(), MlatError> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(SampleRow {
            observer_x_m: s.observer.x_m,
            observer_y_m: s.observer.y_m,
            reported_m: s.reported_m,
            t_s: s.t_s,
            quantum_m: s.quantum_m,
        })
        .map_err(|e| MlatError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| MlatError::Csv(e.to_string()))
}

/// Read samples written by [`write_samples_csv`]; observers are placed on the plane of `reference`.
pub fn read_samples_csv<R: io::Read>(input: R, reference: GeoPoint) -> Result<Vec<DistanceSample>, MlatError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| MlatError::Csv(e.to_string()))?;
    if headers != vec!["observer_x_m", "observer_y_m", "reported_m", "t_s", "quantum_m"] {
        return Err(MlatError::Csv(format!("unexpected header {headers:?}")));
    }
    r.deserialize::<SampleRow>()
        .map(|row| {
            let row = row.map_err(|e| MlatError::Csv(e.to_string()))?;
            DistanceSample::new(
                EnuPoint::new(row.observer_x_m, row.observer_y_m, reference),
                row.reported_m,
                row.t_s,
                row.quantum_m,
            )
        })
        .collect()
}
