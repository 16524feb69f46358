//! Simple-random-walk simulation, stopping times, last-exit truncation,
//! cut-time detection, and pairwise intersection counting.

use crate::lattice::{Edge, LatticeBox, Point};
use crate::randomness::Stream;
use crate::util::{FxHashMap, FxHashSet};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A finite nearest-neighbour path. Steps are stored one byte each (bits 0-6
/// axis, bit 7 sign, with 1 meaning a negative move); points are rebuilt on
/// demand. That keeps 1e8-step budgets affordable in d = 5.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WalkPath {
    pub start_index: i64,
    start: Point,
    steps: Vec<u8>,
}

/// Why a simulation stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Predicate,
    Cap,
}

#[inline]
pub fn encode_step(axis: usize, negative: bool) -> u8 {
    debug_assert!(axis < 0x80);
    axis as u8 | if negative { 0x80 } else { 0 }
}

#[inline]
pub fn decode_step(s: u8) -> (usize, bool) {
    ((s & 0x7f) as usize, s & 0x80 != 0)
}

impl WalkPath {
    pub fn new(start_index: i64, start: Point) -> Self {
        WalkPath {
            start_index,
            start,
            steps: Vec::new(),
        }
    }

    /// Build from an explicit point sequence (consecutive points adjacent).
    pub fn from_points(start_index: i64, points: &[Point]) -> Self {
        assert!(!points.is_empty());
        let mut w = WalkPath::new(start_index, points[0]);
        for k in 1..points.len() {
            let prev = points[k - 1];
            let next = points[k];
            assert_eq!(prev.dist_l1(&next), 1, "points must be nearest neighbours");
            let axis = (0..prev.dim())
                .find(|&i| prev.coord(i) != next.coord(i))
                .unwrap();
            w.push(axis, next.coord(axis) < prev.coord(axis));
        }
        w
    }

    #[inline]
    pub fn push(&mut self, axis: usize, negative: bool) {
        self.steps.push(encode_step(axis, negative));
    }

    pub fn dim(&self) -> usize {
        self.start.dim()
    }

    /// Number of steps (= length of the path in the time sense).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start(&self) -> Point {
        self.start
    }

    pub fn end_index(&self) -> i64 {
        self.start_index + self.steps.len() as i64
    }

    pub fn steps(&self) -> &[u8] {
        &self.steps
    }

    pub fn truncate(&mut self, keep_steps: usize) {
        self.steps.truncate(keep_steps);
    }

    /// Iterate the points w(start_index), ..., w(end_index) in time order.
    pub fn points(&self) -> PathPointIter<'_> {
        PathPointIter {
            path: self,
            cur: self.start,
            next_step: 0,
            done: false,
        }
    }

    /// The point at absolute time index `t` (costs O(t - start_index)).
    pub fn point_at(&self, t: i64) -> Option<Point> {
        let off = t.checked_sub(self.start_index)?;
        if off < 0 || off as usize > self.steps.len() {
            return None;
        }
        let mut p = self.start;
        for &s in &self.steps[..off as usize] {
            let (axis, neg) = decode_step(s);
            p = p.step(axis, !neg);
        }
        Some(p)
    }

    pub fn end(&self) -> Point {
        let mut p = self.start;
        for &s in &self.steps {
            let (axis, neg) = decode_step(s);
            p = p.step(axis, !neg);
        }
        p
    }

    /// Set of visited points.
    pub fn range_set(&self) -> FxHashSet<Point> {
        self.points().collect()
    }

    /// Set of traversed canonical edges.
    pub fn trace_set(&self) -> FxHashSet<Edge> {
        let mut out = FxHashSet::default();
        let mut prev: Option<Point> = None;
        for p in self.points() {
            if let Some(q) = prev {
                out.insert(Edge::new(q, p));
            }
            prev = Some(p);
        }
        out
    }

    pub fn to_points(&self) -> Vec<Point> {
        self.points().collect()
    }
}

pub struct PathPointIter<'a> {
    path: &'a WalkPath,
    cur: Point,
    next_step: usize,
    done: bool,
}

impl Iterator for PathPointIter<'_> {
    type Item = Point;
    fn next(&mut self) -> Option<Point> {
        if self.done {
            return None;
        }
        let out = self.cur;
        if self.next_step < self.path.steps.len() {
            let (axis, neg) = decode_step(self.path.steps[self.next_step]);
            self.cur = self.cur.step(axis, !neg);
            self.next_step += 1;
        } else {
            self.done = true;
        }
        Some(out)
    }
}

/// Escape policy: escape is declared at l2 distance `escape_factor * r_ref`
/// from the target set, where `r_ref` is a reference radius chosen so the
/// probability of ever returning after a declared escape is at most
/// `(1/escape_factor)^(d-2)` up to a dimension constant.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EscapePolicy {
    pub escape_factor: f64,
    pub max_steps: u64,
}

impl Default for EscapePolicy {
    fn default() -> Self {
        EscapePolicy {
            escape_factor: 4.0,
            max_steps: 1_000_000_000,
        }
    }
}

impl EscapePolicy {
    pub fn new(escape_factor: f64, max_steps: u64) -> Self {
        assert!(escape_factor >= 2.0, "escape factor must be >= 2");
        assert!(max_steps >= 1);
        EscapePolicy {
            escape_factor,
            max_steps,
        }
    }

    /// Stated one-sided bias bound for declaring escape at factor rho.
    pub fn bias_bound(&self, d: usize) -> f64 {
        (1.0 / self.escape_factor).powi(d as i32 - 2)
    }
}

#[inline]
fn sample_step(stream: &mut Stream, d: usize) -> (usize, bool) {
    let v = stream.gen_range(0..2 * d as u32);
    ((v >> 1) as usize, v & 1 == 1)
}

/// Simulate a simple random walk from `start` until `stop(point, time)` fires
/// or `cap` steps have been taken. The predicate is checked before each step
/// (so `stop = |_, t| t >= 0` yields a length-0 path).
pub fn simulate_until(
    stream: &mut Stream,
    start: Point,
    mut stop: impl FnMut(&Point, u64) -> bool,
    cap: u64,
) -> (WalkPath, StopReason) {
    assert!(cap >= 1);
    let d = start.dim();
    let mut path = WalkPath::new(0, start);
    let mut pos = start;
    let mut t: u64 = 0;
    loop {
        if stop(&pos, t) {
            return (path, StopReason::Predicate);
        }
        if t >= cap {
            return (path, StopReason::Cap);
        }
        let (axis, neg) = sample_step(stream, d);
        pos = pos.step(axis, !neg);
        path.push(axis, neg);
        t += 1;
    }
}

/// First entrance time (strict = false) or first hitting time (strict = true,
/// scanning from start_index + 1) of `K` along the path.
pub fn hitting_time(w: &WalkPath, k: &FxHashSet<Point>, strict: bool) -> Option<i64> {
    let mut t = w.start_index;
    for p in w.points() {
        if k.contains(&p) && (!strict || t > w.start_index) {
            return Some(t);
        }
        t += 1;
    }
    None
}

/// Result of a window-truncated trajectory simulation.
#[derive(Clone, Debug)]
pub struct TruncatedTrajectory {
    pub path: WalkPath,
    /// Set when the simulation hit the step cap before escaping; the clipped
    /// path is then possibly shorter than the true last-exit path.
    pub cap_truncated: bool,
}

/// Simulate from `start` (inside the window) until first exit from the
/// enlarged box `B(center, rho * r_window)`, then clip the path at its last
/// visit to the window. This is a downward-biased surrogate for the path up
/// to the true last-exit time; the bias of declaring escape at factor rho is
/// bounded by `policy.bias_bound(d)`.
pub fn truncated_trajectory(
    stream: &mut Stream,
    start: Point,
    window: &LatticeBox,
    policy: &EscapePolicy,
) -> TruncatedTrajectory {
    assert!(window.contains(&start), "start must lie in the window");
    let d = start.dim();
    let rho = policy.escape_factor.ceil() as u32;
    let mut path = WalkPath::new(0, start);
    let mut pos = start;
    let mut last_in_window: usize = 0; // step count at last window visit
    let mut t: u64 = 0;
    let mut cap_truncated = false;
    loop {
        if !window.contains_scaled(&pos, rho) {
            break;
        }
        if t >= policy.max_steps {
            cap_truncated = true;
            break;
        }
        let (axis, neg) = sample_step(stream, d);
        pos = pos.step(axis, !neg);
        path.push(axis, neg);
        t += 1;
        if window.contains(&pos) {
            last_in_window = t as usize;
        }
    }
    path.truncate(last_in_window);
    TruncatedTrajectory {
        path,
        cap_truncated,
    }
}

/// Cut-time flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutMode {
    /// All t0 with w[n, t0] and w[t0+1, m] disjoint as point sets.
    Local,
    /// The three-segment certification procedure; returns a certified subset
    /// of the local cut-times (a lower bound on the true global count).
    GlobalSurrogate,
}

/// Options for the global surrogate. `segment_len = None` uses the default
/// n / (3 * ceil(C log n)) with C = 2.
#[derive(Clone, Copy, Debug, Default)]
pub struct CutOptions {
    pub segment_len: Option<usize>,
}

/// Cut-times of a finite path.
///
/// Local mode runs in O(len): a time t0 is a cut iff no point has
/// first_visit <= t0 < last_visit, which a difference array over the
/// first/last visit intervals answers directly.
pub fn cut_times(w: &WalkPath, mode: CutMode) -> Vec<i64> {
    cut_times_with(w, mode, CutOptions::default())
}

pub fn cut_times_with(w: &WalkPath, mode: CutMode, opts: CutOptions) -> Vec<i64> {
    match mode {
        CutMode::Local => local_cuts_offsets(w, 0, w.len())
            .into_iter()
            .map(|t| t as i64 + w.start_index)
            .collect(),
        CutMode::GlobalSurrogate => {
            let n = w.len();
            if n < 3 {
                return Vec::new();
            }
            let seg = opts.segment_len.unwrap_or_else(|| {
                let m = (2.0 * (n as f64).ln()).ceil().max(1.0) as usize;
                (n / (3 * m)).max(1)
            });
            certified_cuts(w, seg)
                .into_iter()
                .map(|t| t as i64 + w.start_index)
                .collect()
        }
    }
}

/// Local cut offsets of the sub-path w[a..=b] (offsets from start, in steps):
/// all t in [a, b) such that w[a, t] and w[t+1, b] share no point.
fn local_cuts_offsets(w: &WalkPath, a: usize, b: usize) -> Vec<usize> {
    debug_assert!(a <= b && b <= w.len());
    if a == b {
        return Vec::new();
    }
    // first/last visit offset for each point of the sub-path
    let mut first_last: FxHashMap<Point, (usize, usize)> = FxHashMap::default();
    let mut t = 0usize;
    for p in w.points() {
        if t >= a && t <= b {
            first_last
                .entry(p)
                .and_modify(|fl| fl.1 = t)
                .or_insert((t, t));
        }
        t += 1;
    }
    // coverage[t] counts points with first <= t < last
    let mut diff = vec![0i64; b - a + 2];
    for &(f, l) in first_last.values() {
        if f < l {
            diff[f - a] += 1;
            diff[l - a] -= 1;
        }
    }
    let mut out = Vec::new();
    let mut cov = 0i64;
    for t in a..b {
        cov += diff[t - a];
        if cov == 0 {
            out.push(t);
        }
    }
    out
}

/// Three-segment certification: partition [0, n] into blocks l_i, m_i, r_i of
/// `seg` steps each; when both flanking segments contain a cut of the whole
/// interval, every local cut of the block found in the middle segment is a
/// cut of the whole interval. Returns those certified offsets.
fn certified_cuts(w: &WalkPath, seg: usize) -> Vec<usize> {
    let n = w.len();
    let block = 3 * seg;
    let m = n / block;
    if m == 0 {
        return Vec::new();
    }
    let full_cuts: FxHashSet<usize> = local_cuts_offsets(w, 0, n).into_iter().collect();
    let mut out = Vec::new();
    for i in 0..m {
        let a = i * block;
        let l_range = a..a + seg;
        let m_range = a + seg..a + 2 * seg;
        let r_range = a + 2 * seg..a + 3 * seg;
        let l_ok = l_range.clone().any(|t| full_cuts.contains(&t));
        let r_ok = r_range.clone().any(|t| full_cuts.contains(&t));
        if !(l_ok && r_ok) {
            continue;
        }
        for t in local_cuts_offsets(w, a, a + block) {
            if m_range.contains(&t) {
                debug_assert!(full_cuts.contains(&t));
                out.push(t);
            }
        }
    }
    out
}

/// Count of the candidate cut-times the surrogate examines (block-local cuts
/// lying in middle segments, certified or not). Used to report how much of
/// the candidate set the certification retains.
pub fn surrogate_candidate_count(w: &WalkPath, opts: CutOptions) -> usize {
    let n = w.len();
    if n < 3 {
        return 0;
    }
    let seg = opts.segment_len.unwrap_or_else(|| {
        let m = (2.0 * (n as f64).ln()).ceil().max(1.0) as usize;
        (n / (3 * m)).max(1)
    });
    let block = 3 * seg;
    let m = n / block;
    let mut count = 0;
    for i in 0..m {
        let a = i * block;
        let m_range = a + seg..a + 2 * seg;
        count += local_cuts_offsets(w, a, a + block)
            .into_iter()
            .filter(|t| m_range.contains(t))
            .count();
    }
    count
}

/// Count lattice points (optionally restricted to `region`) visited by at
/// least two distinct paths. Self-intersections do not count.
pub fn intersection_count(paths: &[WalkPath], region: Option<&LatticeBox>) -> usize {
    assert!(paths.len() >= 2, "need at least two paths");
    let mut seen: FxHashMap<Point, (u32, bool)> = FxHashMap::default(); // (first path id, multi)
    let mut count = 0usize;
    for (id, w) in paths.iter().enumerate() {
        for p in w.points() {
            if let Some(r) = region {
                if !r.contains(&p) {
                    continue;
                }
            }
            match seen.entry(p) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    let (first, multi) = *e.get();
                    if !multi && first != id as u32 {
                        e.insert((first, true));
                        count += 1;
                    }
                }
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert((id as u32, false));
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::derive_stream;

    fn straight_path(d: usize, n: usize) -> WalkPath {
        let pts: Vec<Point> = (0..=n as i32).map(|k| Point::unit(d, 0, k)).collect();
        WalkPath::from_points(0, &pts)
    }

    #[test]
    fn simulate_until_immediate_stop() {
        let mut s = derive_stream(1, "w", 0);
        let (path, reason) = simulate_until(&mut s, Point::origin(5), |_, t| t >= 0, 100);
        assert_eq!(path.len(), 0);
        assert_eq!(reason, StopReason::Predicate);
    }

    #[test]
    fn simulate_until_cap() {
        let mut s = derive_stream(1, "w", 1);
        let (path, reason) = simulate_until(&mut s, Point::origin(3), |_, _| false, 5);
        assert_eq!(path.len(), 5);
        assert_eq!(reason, StopReason::Cap);
    }

    #[test]
    fn exit_time_concentration_d5() {
        // P(n^2 / lambda <= exit time <= lambda n^2) >= 0.99 for lambda = 20
        let n = 10i64;
        let lambda = 20.0;
        let bx = LatticeBox::new(Point::origin(5), n as u32);
        let reps = 10_000;
        let mut ok = 0usize;
        for rep in 0..reps {
            let mut s = derive_stream(11, "exit", rep);
            let (path, reason) =
                simulate_until(&mut s, Point::origin(5), |p, _| !bx.contains(p), 1_000_000);
            assert_eq!(reason, StopReason::Predicate);
            let t = path.len() as f64;
            if t >= (n * n) as f64 / lambda && t <= lambda * (n * n) as f64 {
                ok += 1;
            }
        }
        let frac = ok as f64 / reps as f64;
        assert!(frac >= 0.99, "fraction in bracket = {frac}");
    }

    #[test]
    fn hitting_times() {
        let d = 5;
        let w = straight_path(d, 2);
        let mut k = FxHashSet::default();
        k.insert(Point::unit(d, 0, 2));
        assert_eq!(hitting_time(&w, &k, false), Some(2));

        // w = [0, e1, 0]; K = {0}; strict -> first return at 2
        let pts = vec![Point::origin(d), Point::unit(d, 0, 1), Point::origin(d)];
        let w2 = WalkPath::from_points(0, &pts);
        let mut k0 = FxHashSet::default();
        k0.insert(Point::origin(d));
        assert_eq!(hitting_time(&w2, &k0, true), Some(2));
        assert_eq!(hitting_time(&w2, &k0, false), Some(0));

        // never hit
        let mut far = FxHashSet::default();
        far.insert(Point::unit(d, 0, 100));
        assert_eq!(hitting_time(&w, &far, false), None);
    }

    #[test]
    fn truncated_trajectory_ends_in_window() {
        let window = LatticeBox::new(Point::origin(5), 8);
        let policy = EscapePolicy::new(4.0, 10_000_000);
        for rep in 0..20 {
            let mut s = derive_stream(13, "trunc", rep);
            let start = Point::origin(5);
            let out = truncated_trajectory(&mut s, start, &window, &policy);
            assert!(!out.cap_truncated);
            assert!(window.contains(&out.path.end()));
        }
    }

    #[test]
    fn truncated_length_tail_decays_in_multiplier() {
        // P(clipped length > T r^2) falls off sharply in the multiplier T,
        // uniformly over desk-scale radii. (The radius itself does not drive
        // decay: length / r^2 has a scaling limit.)
        let policy = EscapePolicy::new(4.0, 50_000_000);
        for r in [4u32, 8] {
            let window = LatticeBox::new(Point::origin(5), r);
            let reps = 1000u64;
            let mut lens = Vec::with_capacity(reps as usize);
            for rep in 0..reps {
                let mut s = derive_stream(17 + r as u64, "tail", rep);
                let out = truncated_trajectory(&mut s, Point::origin(5), &window, &policy);
                lens.push(out.path.len() as u64);
            }
            let frac = |t: u64| {
                lens.iter().filter(|&&l| l > t * (r as u64).pow(2)).count() as f64
                    / reps as f64
            };
            let (f5, f20, f80) = (frac(5), frac(20), frac(80));
            assert!(
                f5 > f20 && f20 > f80,
                "tail not decaying in multiplier: {f5} {f20} {f80} (r={r})"
            );
            assert!(f80 < 0.01, "P(len > 80 r^2) = {f80} at r = {r}");
        }
    }

    #[test]
    fn local_cuts_on_monotone_path() {
        let w = straight_path(5, 6);
        let cuts = cut_times(&w, CutMode::Local);
        assert_eq!(cuts, (0..6).collect::<Vec<i64>>());
    }

    #[test]
    fn local_cuts_on_backtrack() {
        let d = 5;
        let pts = vec![Point::origin(d), Point::unit(d, 0, 1), Point::origin(d)];
        let w = WalkPath::from_points(0, &pts);
        assert!(cut_times(&w, CutMode::Local).is_empty());
    }

    /// O(m^2) oracle: for each t0, materialize both sides and intersect.
    fn local_cut_oracle(w: &WalkPath) -> Vec<i64> {
        let pts = w.to_points();
        let mut out = Vec::new();
        for t0 in 0..pts.len() - 1 {
            let past: FxHashSet<Point> = pts[..=t0].iter().copied().collect();
            if pts[t0 + 1..].iter().all(|p| !past.contains(p)) {
                out.push(t0 as i64 + w.start_index);
            }
        }
        out
    }

    #[test]
    fn local_cuts_match_oracle_on_random_paths() {
        for rep in 0..40 {
            let mut s = derive_stream(23, "cut-oracle", rep);
            let d = if rep % 2 == 0 { 3 } else { 5 };
            let (w, _) = simulate_until(&mut s, Point::origin(d), |_, _| false, 400);
            assert_eq!(cut_times(&w, CutMode::Local), local_cut_oracle(&w));
        }
    }

    #[test]
    fn certified_cuts_are_true_cuts_and_cover_candidates() {
        let mut s = derive_stream(29, "cert", 0);
        let (w, _) = simulate_until(&mut s, Point::origin(5), |_, _| false, 30_000);
        let local: FxHashSet<i64> = cut_times(&w, CutMode::Local).into_iter().collect();
        let certified = cut_times(&w, CutMode::GlobalSurrogate);
        assert!(!certified.is_empty());
        for t in &certified {
            assert!(local.contains(t), "certified cut {t} is not a local cut");
        }
        // certification retains most of the candidate middle-segment cuts
        let candidates = surrogate_candidate_count(&w, CutOptions::default());
        let ratio = certified.len() as f64 / candidates as f64;
        assert!(ratio > 0.5 && ratio <= 1.0, "certified/candidates = {ratio}");
    }

    #[test]
    fn intersection_counts() {
        let d = 5;
        // paths in disjoint boxes
        let a = straight_path(d, 3);
        let mut far_pts = Vec::new();
        for k in 0..=3 {
            far_pts.push(Point::unit(d, 1, 100 + k));
        }
        let b = WalkPath::from_points(0, &far_pts);
        assert_eq!(intersection_count(&[a.clone(), b], None), 0);

        // [0, e1] and [e1, e1 + e2] share exactly e1
        let p = WalkPath::from_points(0, &[Point::origin(d), Point::unit(d, 0, 1)]);
        let q = WalkPath::from_points(
            0,
            &[Point::unit(d, 0, 1), Point::unit(d, 0, 1).step(1, true)],
        );
        assert_eq!(intersection_count(&[p, q], None), 1);
    }

    /// Brute-force oracle for the intersection count.
    fn intersection_oracle(paths: &[WalkPath], region: Option<&LatticeBox>) -> usize {
        let mut by_point: FxHashMap<Point, FxHashSet<usize>> = FxHashMap::default();
        for (id, w) in paths.iter().enumerate() {
            for p in w.points() {
                if region.map_or(true, |r| r.contains(&p)) {
                    by_point.entry(p).or_default().insert(id);
                }
            }
        }
        by_point.values().filter(|s| s.len() >= 2).count()
    }

    #[test]
    fn intersection_count_matches_oracle() {
        for rep in 0..20 {
            let mut s = derive_stream(31, "int-oracle", rep);
            let d = 3;
            let paths: Vec<WalkPath> = (0..4)
                .map(|j| {
                    let mut sj = derive_stream(31, "int-path", rep * 10 + j);
                    simulate_until(&mut sj, Point::origin(d), |_, _| false, 60).0
                })
                .collect();
            let region = if rep % 2 == 0 {
                Some(LatticeBox::new(Point::origin(d), 4))
            } else {
                None
            };
            assert_eq!(
                intersection_count(&paths, region.as_ref()),
                intersection_oracle(&paths, region.as_ref()),
            );
            let _ = s.gen::<u64>();
        }
    }

    #[test]
    fn four_walk_intersection_tail_d5() {
        // k = 4 walks of 1e4 steps from the origin: P(N_k > 200) is small
        let reps = 60;
        let mut exceed = 0usize;
        for rep in 0..reps {
            let paths: Vec<WalkPath> = (0..4)
                .map(|j| {
                    let mut s = derive_stream(37, "nk", rep * 4 + j);
                    simulate_until(&mut s, Point::origin(5), |_, _| false, 10_000).0
                })
                .collect();
            if intersection_count(&paths, None) > 200 {
                exceed += 1;
            }
        }
        assert!(
            (exceed as f64 / reps as f64) < 0.05,
            "exceed fraction {}",
            exceed as f64 / reps as f64
        );
    }

    #[test]
    fn range_trace_consistency() {
        for rep in 0..20 {
            let mut s = derive_stream(41, "rt", rep);
            let (w, _) = simulate_until(&mut s, Point::origin(4), |_, _| false, 300);
            let range = w.range_set();
            let trace = w.trace_set();
            // every trace edge has both endpoints in the range
            for e in &trace {
                assert!(range.contains(&e.a) && range.contains(&e.b));
            }
            // |trace| = steps - repeated traversals
            let mut seen = FxHashSet::default();
            let pts = w.to_points();
            let mut repeats = 0usize;
            for k in 1..pts.len() {
                if !seen.insert(Edge::new(pts[k - 1], pts[k])) {
                    repeats += 1;
                }
            }
            assert_eq!(trace.len(), w.len() - repeats);
        }
    }

    #[test]
    fn escape_bias_within_declared_bound() {
        // The policy's bias statement is about what the clipping loses inside
        // the window: with common random numbers, the mean count of distinct
        // window points kept at escape factor rho trails the rho = 8
        // reference by at most the declared bound (1/rho)^(d-2).
        // (Raw step counts are not comparable across rho: larger escape
        // regions keep whole outside-window excursions in the step tally.)
        let window = LatticeBox::new(Point::origin(5), 8);
        let reps = 3000u64;
        let mean_window_points = |rho: f64| -> f64 {
            let policy = EscapePolicy::new(rho, 50_000_000);
            let mut total = 0u64;
            for rep in 0..reps {
                let mut s = derive_stream(43, "bias", rep);
                let start = Point::new(&[-8, 0, 0, 0, 0]); // on the inner boundary
                let out = truncated_trajectory(&mut s, start, &window, &policy);
                let kept: FxHashSet<Point> =
                    out.path.points().filter(|p| window.contains(p)).collect();
                total += kept.len() as u64;
            }
            total as f64 / reps as f64
        };
        let reference = mean_window_points(8.0);
        for rho in [2.0f64, 4.0] {
            let m = mean_window_points(rho);
            let deficit = (reference - m) / reference;
            let bound = EscapePolicy::new(rho, 1).bias_bound(5);
            assert!(
                deficit >= -0.01 && deficit < bound + 0.01,
                "rho={rho}: deficit {deficit} vs bound {bound}"
            );
        }
    }
}
