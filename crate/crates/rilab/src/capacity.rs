//! Equilibrium-measure and capacity estimation, capacity-of-range statistics,
//! and calibration of the constants consumed by the good-box machinery.
//!
//! The estimator is plain Monte Carlo: for each inner-boundary site x of K,
//! launch walks and record the fraction that reach the escape region without
//! re-entering K. Escape is declared at l2 distance `rho * r_ref` from the
//! set, where the reference radius
//!
//!   r_ref = max(1, min(diam_l2(K) / 2, (a_d |K|)^(1/(d-2))))
//!
//! caps the escape distance by the set's capacity radius (capacity never
//! exceeds |K|); either branch keeps the residual return probability, hence
//! the one-sided bias, at most (1/rho)^(d-2) times a dimension constant. For
//! sparse sets like walk ranges this is what makes 1e5-point inputs
//! affordable: the sphere rule at rho * diam would cost (rho * diam)^2 steps
//! per escaping walk for no extra accuracy.
//!
//! Half-closed boxes get an exact symmetry reduction: the box group
//! (coordinate permutations and the reflections t <-> -1-t about the
//! continuous centre) acts transitively on site orbits and preserves both the
//! walk law and the escape region, so the equilibrium weight is constant on
//! each orbit and one representative per orbit suffices.

use crate::lattice::{LatticeBox, Point, MAX_DIM};
use crate::randomness::{compensated_sum, Stream, StreamKey};
use crate::util::{indexed_map, FxHashMap, FxHashSet};
use crate::walk::EscapePolicy;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CapacityError {
    #[error("capacity requires d >= 3 (walk is recurrent below)")]
    RecurrentDimension(usize),
    #[error("empty target set")]
    EmptySet,
    #[error("equilibrium table has zero total mass")]
    ZeroTotal,
    #[error("walks_per_site must be >= 1")]
    NoWalks,
}

/// Capacity value with Monte Carlo standard error. The escape-truncation
/// bias bound (1/rho)^(d-2) * value is folded into `std_error` in quadrature.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub value: f64,
    pub std_error: f64,
    pub escape_factor: f64,
    pub walks_per_site: u32,
}

/// Target set for the estimators.
#[derive(Clone, Debug)]
pub enum SetSpec {
    Box(LatticeBox),
    Points(Vec<Point>),
}

impl SetSpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            SetSpec::Box(b) => Some(b.dim()),
            SetSpec::Points(p) => p.first().map(|q| q.dim()),
        }
    }

    pub fn len(&self) -> u128 {
        match self {
            SetSpec::Box(b) => b.volume().unwrap_or(u128::MAX),
            SetSpec::Points(p) => p.len() as u128,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            SetSpec::Box(_) => false,
            SetSpec::Points(p) => p.is_empty(),
        }
    }
}

/// Coefficient of the Green's function asymptotic G(x) ~ a_d |x|^(2-d):
/// a_d = d Gamma(d/2 - 1) / (2 pi^(d/2)).
pub fn green_coefficient(d: usize) -> f64 {
    assert!(d >= 3);
    let half = d as f64 / 2.0;
    let gamma_half_minus_one = gamma_real(half - 1.0);
    d as f64 * gamma_half_minus_one / (2.0 * std::f64::consts::PI.powf(half))
}

/// Gamma at integer or half-integer arguments (all we need).
fn gamma_real(x: f64) -> f64 {
    let pi_sqrt = std::f64::consts::PI.sqrt();
    if (x - x.round()).abs() < 1e-9 {
        let n = x.round() as i64;
        assert!(n >= 1);
        let mut v = 1.0f64;
        for k in 2..n {
            v *= k as f64;
        }
        v
    } else {
        // half-integer: Gamma(1/2 + m) = (2m-1)!! / 2^m * sqrt(pi)
        let m = (x - 0.5).round() as i64;
        assert!((x - 0.5 - m as f64).abs() < 1e-9 && m >= 0);
        let mut v = pi_sqrt;
        for k in 0..m {
            v *= 0.5 + k as f64;
        }
        v
    }
}

/// Escape distance for a set with the given l2 diameter and cardinality.
fn escape_radius(d: usize, rho: f64, diam_l2: f64, cardinality: f64) -> f64 {
    let cap_radius = (green_coefficient(d) * cardinality).powf(1.0 / (d as f64 - 2.0));
    rho * (diam_l2 / 2.0).min(cap_radius).max(1.0)
}

// ---------------------------------------------------------------------------
// box orbits
// ---------------------------------------------------------------------------

/// One symmetry orbit of inner-boundary sites of a box. `folded` holds the
/// per-coordinate reflection classes q in 1..=r (sorted ascending, so the
/// last entry is r for boundary orbits); class q covers the two centered
/// values t = -q and t = q - 1.
#[derive(Clone, Debug)]
pub struct OrbitEntry {
    pub folded: Vec<u16>,
    pub weight: f64,
    pub orbit_size: f64,
}

fn orbit_size(folded: &[u16]) -> f64 {
    let d = folded.len();
    // multinomial d! / prod(mult!) times 2^d sign choices
    let mut size = 1.0f64;
    for k in 2..=d {
        size *= k as f64;
    }
    let mut run = 1usize;
    for i in 1..=folded.len() {
        if i < folded.len() && folded[i] == folded[i - 1] {
            run += 1;
        } else {
            for k in 2..=run {
                size /= k as f64;
            }
            run = 1;
        }
    }
    size * 2f64.powi(d as i32)
}

fn orbit_representative(bx: &LatticeBox, folded: &[u16]) -> Point {
    let mut p = bx.center;
    for (i, &q) in folded.iter().enumerate() {
        p = p.with_coord(i, bx.center.coord(i) + q as i32 - 1);
    }
    p
}

/// Enumerate (ascending-sorted) boundary orbits: multisets over 1..=r whose
/// largest entry is r.
fn boundary_orbits(d: usize, r: u16) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut cur = vec![0u16; d];
    fn rec(cur: &mut Vec<u16>, pos: usize, min: u16, r: u16, out: &mut Vec<Vec<u16>>) {
        if pos + 1 == cur.len() {
            cur[pos] = r; // force at least one extreme class
            out.push(cur.clone());
            return;
        }
        for v in min..=r {
            cur[pos] = v;
            rec(cur, pos + 1, v, r, out);
        }
    }
    rec(&mut cur, 0, 1, r, &mut out);
    out
}

/// Draw a uniform member of an orbit: shuffle the class multiset over the
/// coordinates, then pick one of the two reflection branches per coordinate.
fn sample_orbit_member(bx: &LatticeBox, folded: &[u16], stream: &mut Stream) -> Point {
    let d = folded.len();
    let mut classes: Vec<u16> = folded.to_vec();
    for i in (1..d).rev() {
        let j = stream.gen_range(0..=i as u32) as usize;
        classes.swap(i, j);
    }
    let mut p = bx.center;
    for (i, &q) in classes.iter().enumerate() {
        let t = if stream.gen::<bool>() {
            q as i32 - 1
        } else {
            -(q as i32)
        };
        p = p.with_coord(i, bx.center.coord(i) + t);
    }
    p
}

// ---------------------------------------------------------------------------
// escape walks
// ---------------------------------------------------------------------------

/// One escape walk from a box-boundary site: true if the walk reaches l2
/// distance >= r_esc from the box before re-entering it.
fn escape_walk_box(
    stream: &mut Stream,
    start: Point,
    bx: &LatticeBox,
    r_esc_sq: u64,
    max_steps: u64,
) -> bool {
    let d = start.dim();
    let mut pos = start;
    let mut t = 0u64;
    loop {
        let v = stream.gen_range(0..2 * d as u32);
        pos = pos.step((v >> 1) as usize, v & 1 == 0);
        t += 1;
        let dist_sq = bx.dist_l2_sq(&pos);
        if dist_sq == 0 {
            return false; // re-entered K
        }
        if dist_sq >= r_esc_sq {
            return true;
        }
        if t >= max_steps {
            return true; // transient tail; astronomically rare at desk scale
        }
    }
}

/// Membership and escape probes for a sparse point set: an exact hash probe
/// inside the bounding box, plus a coarse cell grid (cell side a power of
/// two at least r_esc) whose 1-dilated occupied cells certify that any point
/// in a non-blocked cell is at l-infinity distance > cell side from the set.
struct SparseProbe {
    set: FxHashSet<Point>,
    low: [i32; MAX_DIM],
    high: [i32; MAX_DIM],
    cell_shift: u32,
    blocked: FxHashSet<[i32; MAX_DIM]>,
    d: usize,
}

impl SparseProbe {
    fn new(points: &[Point], r_esc: f64) -> Self {
        let d = points[0].dim();
        let mut low = [i32::MAX; MAX_DIM];
        let mut high = [i32::MIN; MAX_DIM];
        for p in points {
            for i in 0..d {
                low[i] = low[i].min(p.coord(i));
                high[i] = high[i].max(p.coord(i));
            }
        }
        let mut cell_shift = 2u32;
        while (1i64 << cell_shift) < r_esc.ceil() as i64 {
            cell_shift += 1;
        }
        let mut blocked = FxHashSet::default();
        let mut occupied = FxHashSet::default();
        for p in points {
            let mut c = [0i32; MAX_DIM];
            for i in 0..d {
                c[i] = p.coord(i) >> cell_shift;
            }
            occupied.insert(c);
        }
        // dilate by one cell in l-infinity
        for c in &occupied {
            let mut delta = [0i32; MAX_DIM];
            dilate(&mut blocked, c, &mut delta, 0, d);
        }
        SparseProbe {
            set: points.iter().copied().collect(),
            low,
            high,
            cell_shift,
            blocked,
            d,
        }
    }

    #[inline]
    fn contains(&self, p: &Point) -> bool {
        for i in 0..self.d {
            let c = p.coord(i);
            if c < self.low[i] || c > self.high[i] {
                return false;
            }
        }
        self.set.contains(p)
    }

    #[inline]
    fn cell_of(&self, p: &Point) -> [i32; MAX_DIM] {
        let mut c = [0i32; MAX_DIM];
        for i in 0..self.d {
            c[i] = p.coord(i) >> self.cell_shift;
        }
        c
    }

    #[inline]
    fn escaped_cell(&self, cell: &[i32; MAX_DIM]) -> bool {
        !self.blocked.contains(cell)
    }
}

fn dilate(
    blocked: &mut FxHashSet<[i32; MAX_DIM]>,
    base: &[i32; MAX_DIM],
    delta: &mut [i32; MAX_DIM],
    axis: usize,
    d: usize,
) {
    if axis == d {
        let mut c = *base;
        for i in 0..d {
            c[i] += delta[i];
        }
        blocked.insert(c);
        return;
    }
    for dv in -1..=1 {
        delta[axis] = dv;
        dilate(blocked, base, delta, axis + 1, d);
    }
}

fn escape_walk_sparse(stream: &mut Stream, start: Point, probe: &SparseProbe, max_steps: u64) -> bool {
    let d = start.dim();
    let mut pos = start;
    let mut cell = probe.cell_of(&pos);
    let mut t = 0u64;
    loop {
        let v = stream.gen_range(0..2 * d as u32);
        let axis = (v >> 1) as usize;
        pos = pos.step(axis, v & 1 == 0);
        t += 1;
        if probe.contains(&pos) {
            return false;
        }
        let nc = pos.coord(axis) >> probe.cell_shift;
        if nc != cell[axis] {
            cell[axis] = nc;
            if probe.escaped_cell(&cell) {
                return true;
            }
        }
        if t >= max_steps {
            return true;
        }
    }
}

// ---------------------------------------------------------------------------
// equilibrium table
// ---------------------------------------------------------------------------

/// Estimated equilibrium measure of a finite set: inner-boundary sites with
/// nonnegative weights summing to the capacity estimate. Interior sites of K
/// carry weight zero (every neighbour stays in K, so they never escape
/// without re-entering) and are not stored.
#[derive(Clone, Debug)]
pub struct EquilibriumTable {
    repr: TableRepr,
    total: f64,
    variance: f64,
    d: usize,
    pub escape_factor: f64,
    pub walks_per_site: u32,
}

#[derive(Clone, Debug)]
enum TableRepr {
    PerSite {
        sites: Vec<Point>,
        weights: Vec<f64>,
        cumulative: Vec<f64>,
    },
    BoxOrbits {
        bx: LatticeBox,
        orbits: Vec<OrbitEntry>,
        cumulative: Vec<f64>, // weight * orbit_size, accumulated
    },
}

impl EquilibriumTable {
    /// Sum of all weights (the capacity estimate).
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// The box this table was built for, when it is an orbit table.
    pub fn base_box(&self) -> Option<LatticeBox> {
        match &self.repr {
            TableRepr::PerSite { .. } => None,
            TableRepr::BoxOrbits { bx, .. } => Some(*bx),
        }
    }

    /// Number of distinct sites represented (not orbit count).
    pub fn site_count(&self) -> f64 {
        match &self.repr {
            TableRepr::PerSite { sites, .. } => sites.len() as f64,
            TableRepr::BoxOrbits { orbits, .. } => {
                orbits.iter().map(|o| o.orbit_size).sum()
            }
        }
    }

    /// Iterate (site, weight) pairs. For box tables this expands orbits and
    /// is intended for small boxes (tests and diagnostics).
    pub fn iter_weights(&self) -> Vec<(Point, f64)> {
        match &self.repr {
            TableRepr::PerSite { sites, weights, .. } => {
                sites.iter().copied().zip(weights.iter().copied()).collect()
            }
            TableRepr::BoxOrbits { bx, orbits, .. } => {
                let d = bx.dim();
                let r = bx.half_width as i64;
                let mut out = Vec::new();
                for p in bx.boundary(crate::lattice::BoundarySide::Inner) {
                    let mut folded: Vec<u16> = (0..d)
                        .map(|i| {
                            let t = (p.coord(i) - bx.center.coord(i)) as i64;
                            let g = t.min(-1 - t);
                            debug_assert!((-r..=-1).contains(&g));
                            (-g) as u16
                        })
                        .collect();
                    folded.sort_unstable();
                    let w = orbits
                        .iter()
                        .find(|o| o.folded == folded)
                        .map(|o| o.weight)
                        .unwrap_or(0.0);
                    out.push((p, w));
                }
                out
            }
        }
    }

    /// Draw a starting site with probability weight / total.
    pub fn sample_start(&self, stream: &mut Stream) -> Result<Point, CapacityError> {
        if self.total <= 0.0 {
            return Err(CapacityError::ZeroTotal);
        }
        match &self.repr {
            TableRepr::PerSite {
                sites, cumulative, ..
            } => {
                let x = stream.gen::<f64>() * cumulative.last().unwrap();
                let i = match cumulative.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
                    Ok(i) => (i + 1).min(sites.len() - 1),
                    Err(i) => i.min(sites.len() - 1),
                };
                Ok(sites[i])
            }
            TableRepr::BoxOrbits {
                bx,
                orbits,
                cumulative,
            } => {
                let x = stream.gen::<f64>() * cumulative.last().unwrap();
                let i = match cumulative.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
                    Ok(i) => (i + 1).min(orbits.len() - 1),
                    Err(i) => i.min(orbits.len() - 1),
                };
                Ok(sample_orbit_member(bx, &orbits[i].folded, stream))
            }
        }
    }

    pub fn to_estimate(&self) -> CapacityEstimate {
        let bias = self.total * (1.0 / self.escape_factor).powi(self.d as i32 - 2);
        CapacityEstimate {
            value: self.total,
            std_error: (self.variance + bias * bias).sqrt(),
            escape_factor: self.escape_factor,
            walks_per_site: self.walks_per_site,
        }
    }
}

/// Estimate the equilibrium measure of `set`.
///
/// For each inner-boundary site, `walks_per_site` independent walks are run;
/// the weight is the escaping fraction. Sites are processed in a fixed
/// deterministic order with per-site derived streams, so the result does not
/// depend on `threads`.
pub fn estimate_equilibrium(
    set: &SetSpec,
    policy: &EscapePolicy,
    walks_per_site: u32,
    key: &StreamKey,
    threads: usize,
) -> Result<EquilibriumTable, CapacityError> {
    let d = set.dim().ok_or(CapacityError::EmptySet)?;
    if d < 3 {
        return Err(CapacityError::RecurrentDimension(d));
    }
    if set.is_empty() {
        return Err(CapacityError::EmptySet);
    }
    if walks_per_site == 0 {
        return Err(CapacityError::NoWalks);
    }
    let rho = policy.escape_factor;
    let w = walks_per_site;

    match set {
        SetSpec::Box(bx) => {
            let r = bx.half_width;
            let diam = (2.0 * r as f64 - 1.0) * (d as f64).sqrt();
            let card = bx.volume().map(|v| v as f64).unwrap_or(f64::MAX);
            let r_esc = escape_radius(d, rho, diam, card);
            let r_esc_sq = (r_esc * r_esc).ceil() as u64;
            let folded = boundary_orbits(d, r as u16);
            let max_steps = policy.max_steps;
            let results: Vec<(f64, f64)> = indexed_map(threads, folded.len(), |i| {
                let rep = orbit_representative(bx, &folded[i]);
                let mut s = key.child("eq-orbit", i as u64).stream();
                let mut esc = 0u32;
                for _ in 0..w {
                    if escape_walk_box(&mut s, rep, bx, r_esc_sq, max_steps) {
                        esc += 1;
                    }
                }
                let e = esc as f64 / w as f64;
                (e, e * (1.0 - e) / w as f64)
            });
            let orbits: Vec<OrbitEntry> = folded
                .into_iter()
                .zip(&results)
                .map(|(f, &(e, _))| {
                    let size = orbit_size(&f);
                    OrbitEntry {
                        folded: f,
                        weight: e,
                        orbit_size: size,
                    }
                })
                .collect();
            let total = compensated_sum(orbits.iter().map(|o| o.weight * o.orbit_size));
            let variance = compensated_sum(
                orbits
                    .iter()
                    .zip(&results)
                    .map(|(o, &(_, v))| o.orbit_size * o.orbit_size * v),
            );
            let mut cumulative = Vec::with_capacity(orbits.len());
            let mut acc = 0.0;
            for o in &orbits {
                acc += o.weight * o.orbit_size;
                cumulative.push(acc);
            }
            Ok(EquilibriumTable {
                repr: TableRepr::BoxOrbits {
                    bx: *bx,
                    orbits,
                    cumulative,
                },
                total,
                variance,
                d,
                escape_factor: rho,
                walks_per_site: w,
            })
        }
        SetSpec::Points(points) => {
            let all: FxHashSet<Point> = points.iter().copied().collect();
            let mut sites: Vec<Point> = all
                .iter()
                .filter(|p| p.neighbours().any(|q| !all.contains(&q)))
                .copied()
                .collect();
            sites.sort_unstable();
            if sites.is_empty() {
                // K has no boundary only if it is empty
                return Err(CapacityError::EmptySet);
            }
            let mut low = Point::origin(d);
            let mut high = Point::origin(d);
            for i in 0..d {
                let lo = points.iter().map(|p| p.coord(i)).min().unwrap();
                let hi = points.iter().map(|p| p.coord(i)).max().unwrap();
                low = low.with_coord(i, lo);
                high = high.with_coord(i, hi);
            }
            let diam = high.sub(&low).norm_l2();
            let r_esc = escape_radius(d, rho, diam.max(1.0), all.len() as f64);
            let probe = SparseProbe::new(points, r_esc);
            let max_steps = policy.max_steps;
            let results: Vec<(f64, f64)> = indexed_map(threads, sites.len(), |i| {
                let mut s = key.child("eq-site", i as u64).stream();
                let mut esc = 0u32;
                for _ in 0..w {
                    if escape_walk_sparse(&mut s, sites[i], &probe, max_steps) {
                        esc += 1;
                    }
                }
                let e = esc as f64 / w as f64;
                (e, e * (1.0 - e) / w as f64)
            });
            let weights: Vec<f64> = results.iter().map(|&(e, _)| e).collect();
            let total = compensated_sum(weights.iter().copied());
            let variance = compensated_sum(results.iter().map(|&(_, v)| v));
            let mut cumulative = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for &w in &weights {
                acc += w;
                cumulative.push(acc);
            }
            Ok(EquilibriumTable {
                repr: TableRepr::PerSite {
                    sites,
                    weights,
                    cumulative,
                },
                total,
                variance,
                d,
                escape_factor: rho,
                walks_per_site: w,
            })
        }
    }
}

/// Capacity estimate: the summed equilibrium table.
pub fn estimate_capacity(
    set: &SetSpec,
    policy: &EscapePolicy,
    walks_per_site: u32,
    key: &StreamKey,
    threads: usize,
) -> Result<CapacityEstimate, CapacityError> {
    Ok(estimate_equilibrium(set, policy, walks_per_site, key, threads)?.to_estimate())
}

/// Draw a start site from a normalized equilibrium table.
pub fn sample_equilibrium_start(
    table: &EquilibriumTable,
    stream: &mut Stream,
) -> Result<Point, CapacityError> {
    table.sample_start(stream)
}

/// One row of the capacity-of-range series.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RangeCapRow {
    pub n: u64,
    pub mean_normalized: f64,
    pub std_error: f64,
    pub reps: u32,
    /// Per-rep normalized values, in rep order (used for quantiles).
    pub values: Vec<f64>,
}

/// For each n in `n_grid`, simulate `reps` walks of n steps, estimate the
/// capacity of each range, and report mean cap(range_n) / n with its
/// standard error over reps.
pub fn range_capacity_series(
    key: &StreamKey,
    d: usize,
    n_grid: &[u64],
    reps: u32,
    policy: &EscapePolicy,
    walks_per_site: u32,
    threads: usize,
) -> Result<Vec<RangeCapRow>, CapacityError> {
    if d < 3 {
        return Err(CapacityError::RecurrentDimension(d));
    }
    let mut out = Vec::new();
    for (gi, &n) in n_grid.iter().enumerate() {
        if reps == 0 {
            continue;
        }
        let values: Vec<f64> = indexed_map(threads, reps as usize, |rep| {
            let rep_key = key.child("rcs-n", gi as u64).child("rep", rep as u64);
            let mut s = rep_key.child("walk", 0).stream();
            let (path, _) =
                crate::walk::simulate_until(&mut s, Point::origin(d), |_, _| false, n);
            let mut range: Vec<Point> = path.range_set().into_iter().collect();
            range.sort_unstable();
            let table = estimate_equilibrium(
                &SetSpec::Points(range),
                policy,
                walks_per_site,
                &rep_key.child("cap", 0),
                1,
            )
            .expect("range is nonempty");
            table.total() / n as f64
        });
        let mean = compensated_sum(values.iter().copied()) / reps as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (reps as f64 - 1.0).max(1.0);
        out.push(RangeCapRow {
            n,
            mean_normalized: mean,
            std_error: (var / reps as f64).sqrt(),
            reps,
            values,
        });
    }
    Ok(out)
}

/// Calibrated constants for the good-box machinery.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CapacityCalibration {
    /// Estimate of the capacity-of-range growth rate.
    pub gamma_hat: f64,
    /// Upper-quantile proxy (99.9% empirical quantile of cap(range_n)/n).
    pub gamma_plus_hat: f64,
    /// The working threshold rate, 0.5 * gamma_hat.
    pub good_gamma: f64,
    /// Smallest integer M with P(range(X[0, r^2]) in B(M r)) >= 0.995 over
    /// the calibration grid.
    pub good_m: f64,
}

/// Knobs for `calibrate`; defaults keep it in the tens of seconds on two
/// cores while leaving the invariant chain intact.
#[derive(Clone, Copy, Debug)]
pub struct CalibrateOptions {
    pub n_grid: [u64; 2],
    pub reps: u32,
    pub walks_per_site: u32,
    pub containment_radii: [u32; 3],
    pub containment_reps: u32,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            n_grid: [2_000, 8_000],
            reps: 24,
            walks_per_site: 1,
            containment_radii: [8, 16, 32],
            containment_reps: 400,
        }
    }
}

pub fn calibrate(
    d: usize,
    key: &StreamKey,
    opts: &CalibrateOptions,
    threads: usize,
) -> Result<CapacityCalibration, CapacityError> {
    let policy = EscapePolicy::default();
    let series = range_capacity_series(
        &key.child("cal-series", 0),
        d,
        &opts.n_grid,
        opts.reps,
        &policy,
        opts.walks_per_site,
        threads,
    )?;
    let last = series.last().expect("nonempty grid");
    let prev = &series[series.len().saturating_sub(2)];
    let gamma_hat = if (last.mean_normalized - prev.mean_normalized).abs()
        < 0.05 * last.mean_normalized
    {
        0.5 * (last.mean_normalized + prev.mean_normalized)
    } else {
        last.mean_normalized
    };
    let mut sorted = last.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let qi = ((0.999 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let mut gamma_plus_hat = sorted[qi];
    if gamma_plus_hat <= gamma_hat {
        gamma_plus_hat = gamma_hat * 1.01 + 1e-12;
    }

    // containment multiplier: max over the grid of the 99.5% quantile of
    // (l-infinity displacement of X[0, r^2]) / r, rounded up
    let mut good_m = 1.0f64;
    for (ri, &r) in opts.containment_radii.iter().enumerate() {
        let ratios: Vec<f64> = indexed_map(threads, opts.containment_reps as usize, |rep| {
            let mut s = key
                .child("cal-contain", ri as u64)
                .child("rep", rep as u64)
                .stream();
            let mut pos = Point::origin(d);
            let mut max_disp = 0u32;
            for _ in 0..(r as u64 * r as u64) {
                let v = s.gen_range(0..2 * d as u32);
                pos = pos.step((v >> 1) as usize, v & 1 == 0);
                max_disp = max_disp.max(pos.norm_linf());
            }
            max_disp as f64 / r as f64
        });
        let mut sorted = ratios;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let qi = ((0.995 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        good_m = good_m.max(sorted[qi].ceil());
    }

    Ok(CapacityCalibration {
        gamma_hat,
        gamma_plus_hat,
        good_gamma: 0.5 * gamma_hat,
        good_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greenref;

    fn key(n: u64) -> StreamKey {
        StreamKey::root(n)
    }

    #[test]
    fn empty_set_rejected() {
        let err = estimate_equilibrium(
            &SetSpec::Points(vec![]),
            &EscapePolicy::default(),
            16,
            &key(1),
            1,
        )
        .unwrap_err();
        assert_eq!(err, CapacityError::EmptySet);
    }

    #[test]
    fn low_dimension_rejected() {
        let err = estimate_capacity(
            &SetSpec::Points(vec![Point::origin(2)]),
            &EscapePolicy::default(),
            16,
            &key(1),
            1,
        )
        .unwrap_err();
        assert_eq!(err, CapacityError::RecurrentDimension(2));
    }

    #[test]
    fn green_coefficient_values() {
        // d = 3: 3 * Gamma(1/2) / (2 pi^1.5) = 3/(2 pi) = 0.4774...
        assert!((green_coefficient(3) - 3.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        // d = 5: 5 * Gamma(3/2) / (2 pi^2.5)
        let expected = 5.0 * (std::f64::consts::PI.sqrt() / 2.0)
            / (2.0 * std::f64::consts::PI.powf(2.5));
        assert!((green_coefficient(5) - expected).abs() < 1e-12);
    }

    #[test]
    fn singleton_escape_probability_matches_green_oracle() {
        let table = estimate_equilibrium(
            &SetSpec::Points(vec![Point::origin(5)]),
            &EscapePolicy::default(),
            200_000,
            &key(7),
            2,
        )
        .unwrap();
        let est = table.total();
        let sigma = table.to_estimate().std_error;
        let oracle = 1.0 / greenref::green_g00(5, 12);
        assert!(
            (est - oracle).abs() < 3.0 * sigma.max(1e-3),
            "est {est} oracle {oracle} sigma {sigma}"
        );
        assert!(est > 0.0 && est < 1.0);
    }

    #[test]
    fn unit_box_capacity_matches_dense_oracle() {
        let bx = LatticeBox::new(Point::origin(5), 1);
        let table = estimate_equilibrium(
            &SetSpec::Box(bx),
            &EscapePolicy::default(),
            20_000,
            &key(8),
            2,
        )
        .unwrap();
        let k: Vec<Point> = bx.iter_points().collect();
        let oracle: f64 = greenref::capacity_dense(&k, 6, 4000);
        let est = table.to_estimate();
        assert!(
            (est.value - oracle).abs() < 3.0 * est.std_error,
            "est {} oracle {oracle} sigma {}",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn box_orbit_table_consistent_with_per_site_path() {
        // same set, two estimator routes
        let bx = LatticeBox::new(Point::origin(5), 2);
        let pts: Vec<Point> = bx.iter_points().collect();
        let a = estimate_capacity(&SetSpec::Box(bx), &EscapePolicy::default(), 4000, &key(9), 2)
            .unwrap();
        let b = estimate_capacity(
            &SetSpec::Points(pts),
            &EscapePolicy::default(),
            4000,
            &key(10),
            2,
        )
        .unwrap();
        let tol = 3.0 * (a.std_error + b.std_error);
        assert!((a.value - b.value).abs() < tol, "{} vs {}", a.value, b.value);
    }

    #[test]
    fn weights_are_probabilities_and_normalize() {
        let bx = LatticeBox::new(Point::origin(5), 2);
        let table =
            estimate_equilibrium(&SetSpec::Box(bx), &EscapePolicy::default(), 500, &key(11), 2)
                .unwrap();
        let weights = table.iter_weights();
        let total: f64 = weights.iter().map(|(_, w)| *w).sum();
        assert!((total - table.total()).abs() < 1e-9 * total.max(1.0));
        for (_, w) in &weights {
            assert!(*w >= 0.0 && *w <= 1.0);
        }
        let normalized: f64 = weights.iter().map(|(_, w)| w / total).sum();
        assert!((normalized - 1.0).abs() < 1e-12);
    }

    #[test]
    fn escape_factor_consistency() {
        let bx = LatticeBox::new(Point::origin(5), 2);
        let a = estimate_capacity(
            &SetSpec::Box(bx),
            &EscapePolicy::new(4.0, 1_000_000_000),
            4000,
            &key(12),
            2,
        )
        .unwrap();
        let b = estimate_capacity(
            &SetSpec::Box(bx),
            &EscapePolicy::new(8.0, 1_000_000_000),
            4000,
            &key(13),
            2,
        )
        .unwrap();
        assert!(
            (a.value - b.value).abs() < 3.0 * (a.std_error + b.std_error),
            "rho=4: {} rho=8: {}",
            a.value,
            b.value
        );
    }

    #[test]
    fn capacity_monotone_and_subadditive_probe() {
        let policy = EscapePolicy::default();
        let mut s = key(14).child("gen", 0).stream();
        for rep in 0..4 {
            // random small K inside K'
            let mut pts: Vec<Point> = Vec::new();
            let mut cur = Point::origin(5);
            for _ in 0..12 {
                pts.push(cur);
                let v = s.gen_range(0..10u32);
                cur = cur.step((v >> 1) as usize, v & 1 == 0);
            }
            pts.sort_unstable();
            pts.dedup();
            let sub: Vec<Point> = pts.iter().step_by(2).copied().collect();
            let a = estimate_capacity(
                &SetSpec::Points(sub.clone()),
                &policy,
                4000,
                &key(15).child("rep", rep),
                2,
            )
            .unwrap();
            let b = estimate_capacity(
                &SetSpec::Points(pts.clone()),
                &policy,
                4000,
                &key(16).child("rep", rep),
                2,
            )
            .unwrap();
            assert!(
                a.value <= b.value + 3.0 * (a.std_error + b.std_error),
                "monotonicity: {} vs {}",
                a.value,
                b.value
            );
            // subadditivity: cap(K u K') <= cap K + cap K' + slack
            let other: Vec<Point> = pts.iter().map(|p| p.add(&Point::unit(5, 1, 9))).collect();
            let mut union = pts.clone();
            union.extend(other.iter().copied());
            union.sort_unstable();
            union.dedup();
            let c = estimate_capacity(
                &SetSpec::Points(other),
                &policy,
                4000,
                &key(17).child("rep", rep),
                2,
            )
            .unwrap();
            let u = estimate_capacity(
                &SetSpec::Points(union),
                &policy,
                4000,
                &key(18).child("rep", rep),
                2,
            )
            .unwrap();
            assert!(
                u.value <= b.value + c.value + 3.0 * (u.std_error + b.std_error + c.std_error),
                "subadditivity"
            );
        }
    }

    #[test]
    fn sample_start_distributions() {
        // single site
        let table = estimate_equilibrium(
            &SetSpec::Points(vec![Point::origin(5)]),
            &EscapePolicy::default(),
            64,
            &key(19),
            1,
        )
        .unwrap();
        let mut s = key(19).child("draw", 0).stream();
        for _ in 0..20 {
            assert_eq!(table.sample_start(&mut s).unwrap(), Point::origin(5));
        }

        // two equal-weight sites: hand-build a per-site table via the points
        // route on a symmetric pair
        let pair = vec![Point::origin(5), Point::unit(5, 0, 3)];
        let t2 = estimate_equilibrium(
            &SetSpec::Points(pair.clone()),
            &EscapePolicy::default(),
            20_000,
            &key(20),
            2,
        )
        .unwrap();
        let mut s2 = key(20).child("draw", 0).stream();
        let n = 100_000;
        let mut count0 = 0usize;
        for _ in 0..n {
            if t2.sample_start(&mut s2).unwrap() == pair[0] {
                count0 += 1;
            }
        }
        let f = count0 as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "f = {f}");
    }

    #[test]
    fn sample_start_weighted_3_to_1() {
        // weights proportional to (3, 1) via a handmade table
        let sites = vec![Point::origin(5), Point::unit(5, 0, 5)];
        let weights = vec![0.75, 0.25];
        let cumulative = vec![0.75, 1.0];
        let table = EquilibriumTable {
            repr: TableRepr::PerSite {
                sites: sites.clone(),
                weights,
                cumulative,
            },
            total: 1.0,
            variance: 0.0,
            d: 5,
            escape_factor: 4.0,
            walks_per_site: 1,
        };
        let mut s = key(21).child("draw", 0).stream();
        let n = 100_000;
        let mut count0 = 0usize;
        for _ in 0..n {
            if table.sample_start(&mut s).unwrap() == sites[0] {
                count0 += 1;
            }
        }
        let f = count0 as f64 / n as f64;
        let sigma = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((f - 0.75).abs() < 3.0 * sigma + 1e-3, "f = {f}");
    }

    #[test]
    fn zero_total_table_rejected() {
        let table = EquilibriumTable {
            repr: TableRepr::PerSite {
                sites: vec![Point::origin(5)],
                weights: vec![0.0],
                cumulative: vec![0.0],
            },
            total: 0.0,
            variance: 0.0,
            d: 5,
            escape_factor: 4.0,
            walks_per_site: 1,
        };
        let mut s = key(22).child("draw", 0).stream();
        assert_eq!(table.sample_start(&mut s).unwrap_err(), CapacityError::ZeroTotal);
    }

    #[test]
    fn range_series_empty_when_no_reps() {
        let rows = range_capacity_series(
            &key(23),
            5,
            &[100, 200],
            0,
            &EscapePolicy::default(),
            1,
            1,
        )
        .unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn range_n1_matches_pair_oracle() {
        // cap of range after 1 step = cap of an adjacent pair
        let rows = range_capacity_series(
            &key(24),
            5,
            &[1],
            64,
            &EscapePolicy::default(),
            4000,
            2,
        )
        .unwrap();
        let mean = rows[0].mean_normalized;
        let oracle =
            greenref::capacity_dense(&[Point::origin(5), Point::unit(5, 0, 1)], 6, 4000);
        assert!(
            (mean - oracle).abs() < 3.0 * rows[0].std_error + 0.01,
            "mean {mean} oracle {oracle}"
        );
    }

    #[test]
    fn calibration_chain_and_stability() {
        let opts = CalibrateOptions {
            n_grid: [1_000, 4_000],
            reps: 16,
            walks_per_site: 1,
            containment_radii: [8, 16, 32],
            containment_reps: 400,
        };
        let a = calibrate(5, &key(25), &opts, 2).unwrap();
        assert!(0.0 < a.good_gamma && a.good_gamma < a.gamma_hat && a.gamma_hat < a.gamma_plus_hat);
        assert!(a.good_m <= 10.0, "good_m = {}", a.good_m);
        let b = calibrate(5, &key(26), &opts, 2).unwrap();
        assert!(
            (a.gamma_hat - b.gamma_hat).abs() / a.gamma_hat < 0.05,
            "gamma {} vs {}",
            a.gamma_hat,
            b.gamma_hat
        );
    }
}
