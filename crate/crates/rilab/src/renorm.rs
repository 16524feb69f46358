//! Good-box machinery on the renormalized planar grid, the contour-following
//! exploration algorithm, and the multi-scale 0-good/k-good recursion.
//!
//! The exploration walks the *-connected grid of boxes B_z(R) with centres
//! on the horizontal axis row l0, trying to chain one certified walk per box
//! to the next box via range intersections. Failed targets are painted
//! black; the walk follows the boundary of the black region (counter
//! clockwise scan) and backtracks along its own arrows when boxed in. The
//! size of the black region above the axis controls the length of the
//! constructed path.

use crate::capacity::{estimate_capacity, CapacityCalibration, SetSpec};
use crate::interlacements::{window_table, InterlacementConfig, InterlacementError};
use crate::lattice::{LatticeBox, Point, StarGridVertex, STAR_DIRECTIONS};
use crate::randomness::{sample_poisson, StreamKey};
use crate::util::{FxHashMap, FxHashSet};
use crate::walk::{EscapePolicy, WalkPath};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RenormError {
    #[error("alpha must be > 1, got {0}")]
    BadAlpha(f64),
    #[error("scale ratio r0/l0 must be < 1/4, got {0}/{1}")]
    BadScaleRatio(u64, u64),
    #[error("theta must be positive, got {0}")]
    BadTheta(f64),
    #[error("scale overflow at level {0}")]
    ScaleOverflow(usize),
    #[error("field does not cover the requested box")]
    FieldTooSmall,
    #[error("good-walk tests need d >= 3, got {0}")]
    LowDimension(usize),
    #[error(transparent)]
    Interlacement(#[from] InterlacementError),
}

// ---------------------------------------------------------------------------
// good walks
// ---------------------------------------------------------------------------

/// Parameters of the good-box test at one intensity.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GoodBoxParams {
    pub alpha: f64,
    /// Box radius R = ceil(alpha / sqrt(u)), at least 2.
    pub r: u32,
    pub calibration: CapacityCalibration,
}

impl GoodBoxParams {
    pub fn new(alpha: f64, u: f64, calibration: CapacityCalibration) -> Result<Self, RenormError> {
        if !(alpha > 1.0) {
            return Err(RenormError::BadAlpha(alpha));
        }
        let r = ((alpha / u.sqrt()).ceil() as u32).max(2);
        Ok(GoodBoxParams {
            alpha,
            r,
            calibration,
        })
    }
}

/// Is `p` in the slab (all coordinates beyond the first two within [-R, R))?
#[inline]
fn in_slab(p: &Point, r: u32) -> bool {
    let ri = r as i32;
    (2..p.dim()).all(|i| {
        let c = p.coord(i);
        c >= -ri && c < ri
    })
}

/// Per-condition breakdown of the good-walk test.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GoodWalkOutcome {
    /// Never hits the slab outside its own box (within the simulated horizon).
    pub avoids_slab: bool,
    /// range of the first R^2 steps stays inside B_z(M R).
    pub contained: bool,
    /// cap(range of first R^2 steps) clears gamma R^2 (value + 3 sigma).
    pub capacity_ok: bool,
    /// The path was shorter than R^2 steps; containment and capacity were
    /// evaluated on the available prefix.
    pub truncated: bool,
}

impl GoodWalkOutcome {
    pub fn good(&self) -> bool {
        self.avoids_slab && self.contained && self.capacity_ok
    }
}

/// Walks per site for the capacity condition.
pub const GOOD_WALK_CAPACITY_WALKS: u32 = 64;

/// Test the good-walk conditions for a path based at grid vertex `z` (the
/// path must start inside B_z(R), re-based at its first entrance). The
/// never-hit condition is evaluated over the whole available path, a
/// one-sided surrogate for the infinite-horizon statement.
pub fn good_walk_test(
    path: &WalkPath,
    z: StarGridVertex,
    params: &GoodBoxParams,
    key: &StreamKey,
) -> Result<GoodWalkOutcome, RenormError> {
    let d = path.dim();
    if d < 3 {
        return Err(RenormError::LowDimension(d));
    }
    let r = params.r;
    let bx = z.cell(d, r);
    debug_assert!(bx.contains(&path.start()), "path must start in its box");
    let m = params.calibration.good_m.max(1.0) as u32;
    let r_sq = (r as usize) * (r as usize);

    let mut avoids_slab = true;
    let mut contained = true;
    let mut prefix: Vec<Point> = Vec::with_capacity(r_sq.min(path.len()) + 1);
    for (t, p) in path.points().enumerate() {
        if in_slab(&p, r) && !bx.contains(&p) {
            avoids_slab = false;
        }
        if t <= r_sq {
            if !bx.contains_scaled(&p, m) {
                contained = false;
            }
            prefix.push(p);
        }
    }
    let truncated = path.len() < r_sq;

    let capacity_ok = if contained || truncated {
        prefix.sort_unstable();
        prefix.dedup();
        let est = estimate_capacity(
            &SetSpec::Points(prefix),
            &EscapePolicy::default(),
            GOOD_WALK_CAPACITY_WALKS,
            key,
            1,
        )
        .expect("prefix is nonempty");
        let threshold = params.calibration.good_gamma * (r as f64) * (r as f64);
        est.value + 3.0 * est.std_error >= threshold
    } else {
        // containment already failed; skip the expensive estimate
        false
    };

    Ok(GoodWalkOutcome {
        avoids_slab,
        contained,
        capacity_ok,
        truncated,
    })
}

/// Extract the slice of `path` starting at its first entrance into `bx`.
pub fn rebase_at_entrance(path: &WalkPath, bx: &LatticeBox) -> Option<WalkPath> {
    let mut t = 0usize;
    for p in path.points() {
        if bx.contains(&p) {
            let pts: Vec<Point> = path.points().skip(t).collect();
            return Some(WalkPath::from_points(0, &pts));
        }
        t += 1;
    }
    None
}

/// True iff some trajectory of `cfg` entering B_z(R) passes the good-walk
/// test. The chosen witness is the lowest passing label.
pub fn good_vertex(
    z: StarGridVertex,
    cfg: &InterlacementConfig,
    params: &GoodBoxParams,
    key: &StreamKey,
) -> Result<Option<u32>, RenormError> {
    let bx = z.cell(cfg.d, params.r);
    for t in &cfg.trajectories {
        if let Some(rebased) = rebase_at_entrance(&t.path, &bx) {
            let outcome = good_walk_test(&rebased, z, params, &key.child("gw", t.label as u64))?;
            if outcome.good() {
                return Ok(Some(t.label));
            }
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// exploration
// ---------------------------------------------------------------------------

/// Box states on the renormalized grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxState {
    Live,
    Dead,
    Black,
}

/// Oracles driving the exploration; implementations must be deterministic
/// per (run seed, box / edge), memoizing whatever they sample lazily.
pub trait ExploreOracle {
    fn is_good(&mut self, v: StarGridVertex) -> bool;
    /// Does the target box contain a certified walk connecting to the chosen
    /// walk of the source box? Only called with a live source.
    fn connect(&mut self, from: StarGridVertex, to: StarGridVertex) -> bool;
}

/// Full state of one exploration run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplorationState {
    pub states: Vec<(StarGridVertex, BoxState)>,
    /// All drawn arrows in drawing order (including arrows into boxes that
    /// died later).
    pub arrows: Vec<(StarGridVertex, StarGridVertex)>,
    /// Edges where a connection attempt failed.
    pub failed_edges: Vec<(StarGridVertex, StarGridVertex)>,
    /// The arrow path from the final root to the terminal box, when the run
    /// terminated.
    pub output_path: Option<Vec<StarGridVertex>>,
    /// Black boxes on or above the axis row.
    pub black_above_l0: u64,
    pub transitions: u64,
    pub terminated: bool,
}

impl ExplorationState {
    pub fn arrow_count(&self) -> u64 {
        self.output_path
            .as_ref()
            .map(|p| p.len().saturating_sub(1) as u64)
            .unwrap_or(0)
    }
}

const MAX_ROOT_SCAN: i32 = 4096;

/// Run the exploration toward grid column `n`.
///
/// Direction scan: on the axis row the scan starts from +e1 inclusive; off
/// the axis it starts strictly counter-clockwise after the direction that
/// points back along the arrow into the current box (so the reverse
/// direction is scanned last, which is what makes the walk hug the black
/// region boundary). Backtracking declares the departed box dead; a box
/// with no admissible direction dies and triggers a restart left of
/// everything explored on the axis.
pub fn explore(
    oracle: &mut dyn ExploreOracle,
    n: u32,
    max_steps: u64,
) -> Result<ExplorationState, RenormError> {
    let mut states: FxHashMap<StarGridVertex, BoxState> = FxHashMap::default();
    let mut arrow_in: FxHashMap<StarGridVertex, usize> = FxHashMap::default(); // direction index of arrow into a box
    let mut parent: FxHashMap<StarGridVertex, StarGridVertex> = FxHashMap::default();
    let mut arrows: Vec<(StarGridVertex, StarGridVertex)> = Vec::new();
    let mut failed_edges: Vec<(StarGridVertex, StarGridVertex)> = Vec::new();
    let mut transitions: u64 = 0;

    let is_black = |states: &FxHashMap<StarGridVertex, BoxState>, v: &StarGridVertex| {
        v.j == -1 || states.get(v) == Some(&BoxState::Black)
    };

    // initialization: root at the largest column <= 0 that is good
    let mut current = match find_root(oracle, 0, &mut states) {
        Some(v) => v,
        None => {
            return Ok(ExplorationState {
                states: states.into_iter().collect(),
                arrows,
                failed_edges,
                output_path: None,
                black_above_l0: 0,
                transitions,
                terminated: false,
            })
        }
    };
    states.insert(current, BoxState::Live);

    let terminated = loop {
        if current.j == 0 && current.i >= n as i32 {
            break true;
        }
        if transitions >= max_steps {
            break false;
        }
        transitions += 1;

        // direction scan
        let start = if current.j == 0 {
            0 // from +e1, inclusive
        } else {
            let din = arrow_in[&current];
            (opposite(din) + 1) % 8
        };
        let mut chosen: Option<(usize, StarGridVertex)> = None;
        for k in 0..8 {
            let idx = (start + k) % 8;
            let nb = current.offset(STAR_DIRECTIONS[idx]);
            if is_black(&states, &nb) || states.get(&nb) == Some(&BoxState::Dead) {
                continue;
            }
            chosen = Some((idx, nb));
            break;
        }
        let Some((dir_idx, target)) = chosen else {
            // boxed in: die and restart
            states.insert(current, BoxState::Dead);
            match restart(oracle, &states) {
                Some(w0) => {
                    paint_restart_gap(&mut states, w0);
                    states.insert(w0, BoxState::Live);
                    arrow_in.remove(&w0);
                    parent.remove(&w0);
                    current = w0;
                    continue;
                }
                None => break false,
            }
        };

        if states.get(&target) == Some(&BoxState::Live) {
            // backtrack along the arrow path
            states.insert(current, BoxState::Dead);
            current = target;
            continue;
        }

        // unexplored: attempt the connection
        if oracle.connect(current, target) {
            arrows.push((current, target));
            arrow_in.insert(target, dir_idx);
            parent.insert(target, current);
            states.insert(target, BoxState::Live);
            current = target;
        } else {
            failed_edges.push((current, target));
            states.insert(target, BoxState::Black);
        }
    };

    let output_path = if terminated {
        let mut path = vec![current];
        let mut cur = current;
        while let Some(&p) = parent.get(&cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Some(path)
    } else {
        None
    };
    let black_above_l0 = states
        .iter()
        .filter(|(v, s)| **s == BoxState::Black && v.j >= 0)
        .count() as u64;

    Ok(ExplorationState {
        states: {
            let mut v: Vec<_> = states.into_iter().collect();
            v.sort_unstable_by_key(|(b, _)| (b.i, b.j));
            v
        },
        arrows,
        failed_edges,
        output_path,
        black_above_l0,
        transitions,
        terminated,
    })
}

fn opposite(dir_idx: usize) -> usize {
    (dir_idx + 4) % 8
}

/// Scan left from `from` for the first good axis box; boxes skipped on the
/// way (bad ones) are painted black.
fn find_root(
    oracle: &mut dyn ExploreOracle,
    from: i32,
    states: &mut FxHashMap<StarGridVertex, BoxState>,
) -> Option<StarGridVertex> {
    for i in (from - MAX_ROOT_SCAN..=from).rev() {
        let v = StarGridVertex::new(i, 0);
        if oracle.is_good(v) {
            return Some(v);
        }
        states.insert(v, BoxState::Black);
    }
    None
}

/// Restart: the rightmost good axis box strictly left of everything explored
/// on the axis.
fn restart(
    oracle: &mut dyn ExploreOracle,
    states: &FxHashMap<StarGridVertex, BoxState>,
) -> Option<StarGridVertex> {
    let leftmost_explored = states
        .iter()
        .filter(|(v, s)| v.j == 0 && matches!(s, BoxState::Live | BoxState::Dead))
        .map(|(v, _)| v.i)
        .min()?;
    for i in (leftmost_explored - MAX_ROOT_SCAN..leftmost_explored).rev() {
        let v = StarGridVertex::new(i, 0);
        match states.get(&v) {
            Some(BoxState::Black) => continue,
            Some(_) => continue,
            None => {
                if oracle.is_good(v) {
                    return Some(v);
                }
            }
        }
    }
    None
}

/// Paint black the axis gap strictly between the new root and the leftmost
/// explored box.
fn paint_restart_gap(states: &mut FxHashMap<StarGridVertex, BoxState>, w0: StarGridVertex) {
    let leftmost_explored = states
        .iter()
        .filter(|(v, s)| v.j == 0 && matches!(s, BoxState::Live | BoxState::Dead))
        .map(|(v, _)| v.i)
        .min()
        .unwrap_or(w0.i + 1);
    for i in w0.i + 1..leftmost_explored {
        let v = StarGridVertex::new(i, 0);
        states.entry(v).or_insert(BoxState::Black);
    }
}

/// Synthetic field: boxes are bad independently with probability `p_bad`;
/// connections between good boxes fail independently with `p_connect_fail`.
/// Everything is memoized and keyed, so repeated queries agree.
pub struct SyntheticOracle {
    seed: u64,
    p_bad: f64,
    p_connect_fail: f64,
    good_memo: FxHashMap<StarGridVertex, bool>,
    conn_memo: FxHashMap<(StarGridVertex, StarGridVertex), bool>,
}

impl SyntheticOracle {
    pub fn new(seed: u64, p_bad: f64, p_connect_fail: f64) -> Self {
        SyntheticOracle {
            seed,
            p_bad,
            p_connect_fail,
            good_memo: FxHashMap::default(),
            conn_memo: FxHashMap::default(),
        }
    }

    fn code(v: StarGridVertex) -> u64 {
        ((v.i as u32 as u64) << 32) | v.j as u32 as u64
    }
}

impl ExploreOracle for SyntheticOracle {
    fn is_good(&mut self, v: StarGridVertex) -> bool {
        let seed = self.seed;
        let p = self.p_bad;
        *self.good_memo.entry(v).or_insert_with(|| {
            let mut s = crate::randomness::derive_stream(seed, "syn-box", Self::code(v));
            s.gen::<f64>() >= p
        })
    }

    fn connect(&mut self, from: StarGridVertex, to: StarGridVertex) -> bool {
        if !self.is_good(to) {
            return false;
        }
        let seed = self.seed;
        let q = self.p_connect_fail;
        *self.conn_memo.entry((from, to)).or_insert_with(|| {
            if q == 0.0 {
                return true;
            }
            let code = Self::code(from) ^ Self::code(to).rotate_left(17);
            let mut s = crate::randomness::derive_stream(seed, "syn-conn", code);
            s.gen::<f64>() >= q
        })
    }
}

/// Scripted oracle over explicit sets (tests and the k-good field bridge).
pub struct TableOracle {
    pub bad: FxHashSet<StarGridVertex>,
    pub connect_ok: bool,
}

impl ExploreOracle for TableOracle {
    fn is_good(&mut self, v: StarGridVertex) -> bool {
        !self.bad.contains(&v)
    }
    fn connect(&mut self, _from: StarGridVertex, to: StarGridVertex) -> bool {
        self.connect_ok && !self.bad.contains(&to)
    }
}

// ---------------------------------------------------------------------------
// exploration on interlacements
// ---------------------------------------------------------------------------

/// Oracle backed by a single explicit configuration (small engineered
/// windows): goodness via certified trajectories entering each box, the
/// connection via a range intersection of R^2-step prefixes.
pub struct ConfigOracle<'a> {
    cfg: &'a InterlacementConfig,
    params: GoodBoxParams,
    key: StreamKey,
    chosen: FxHashMap<StarGridVertex, FxHashSet<Point>>,
    good_memo: FxHashMap<StarGridVertex, Option<u32>>,
}

impl<'a> ConfigOracle<'a> {
    pub fn new(cfg: &'a InterlacementConfig, params: GoodBoxParams, key: StreamKey) -> Self {
        ConfigOracle {
            cfg,
            params,
            key,
            chosen: FxHashMap::default(),
            good_memo: FxHashMap::default(),
        }
    }

    fn prefix_range(&self, path: &WalkPath) -> FxHashSet<Point> {
        let r_sq = (self.params.r as usize).pow(2);
        path.points().take(r_sq + 1).collect()
    }

    fn certify(&mut self, v: StarGridVertex) -> Option<u32> {
        if let Some(cached) = self.good_memo.get(&v) {
            return *cached;
        }
        let bx = v.cell(self.cfg.d, self.params.r);
        let mut witness = None;
        for t in &self.cfg.trajectories {
            if let Some(rebased) = rebase_at_entrance(&t.path, &bx) {
                let key = self.key.child("cfg-gw", t.label as u64);
                if let Ok(out) = good_walk_test(&rebased, v, &self.params, &key) {
                    if out.good() {
                        self.chosen.insert(v, self.prefix_range(&rebased));
                        witness = Some(t.label);
                        break;
                    }
                }
            }
        }
        self.good_memo.insert(v, witness);
        witness
    }
}

impl ExploreOracle for ConfigOracle<'_> {
    fn is_good(&mut self, v: StarGridVertex) -> bool {
        self.certify(v).is_some()
    }

    fn connect(&mut self, from: StarGridVertex, to: StarGridVertex) -> bool {
        if self.certify(to).is_none() {
            return false;
        }
        let (src, dst) = match (self.chosen.get(&from), self.chosen.get(&to)) {
            (Some(a), Some(b)) => (a, b),
            _ => return false,
        };
        let (small, large) = if src.len() <= dst.len() {
            (src, dst)
        } else {
            (dst, src)
        };
        small.iter().any(|p| large.contains(p))
    }
}

/// Lazily sampled per-box ensembles for the full-scale exploration: each box
/// carries its own local construction (Poisson count against the box
/// capacity, equilibrium entrance law, per-trajectory derived streams), and
/// the connection scans a box's trajectories for one whose R^2-step prefix
/// meets the source's chosen walk and then certifies it good. Scans are
/// capped to keep worst-case cost bounded; a cap hit counts as a failed
/// connection (one-sided, reported via `scan_capped`).
pub struct LazyBoxOracle {
    d: usize,
    u: f64,
    params: GoodBoxParams,
    policy: EscapePolicy,
    key: StreamKey,
    table: crate::capacity::EquilibriumTable,
    chosen: FxHashMap<StarGridVertex, FxHashSet<Point>>,
    good_memo: FxHashMap<StarGridVertex, bool>,
    counts: FxHashMap<StarGridVertex, u64>,
    pub scan_cap: u64,
    pub scan_capped: u64,
}

impl LazyBoxOracle {
    pub fn new(
        d: usize,
        u: f64,
        params: GoodBoxParams,
        policy: EscapePolicy,
        seed: u64,
        threads: usize,
    ) -> Result<Self, RenormError> {
        let key = StreamKey::root(seed);
        let canonical = LatticeBox::new(Point::origin(d), params.r);
        let table = window_table(d, &canonical, &policy, &key, threads)?;
        Ok(LazyBoxOracle {
            d,
            u,
            params,
            policy,
            key,
            table,
            chosen: FxHashMap::default(),
            good_memo: FxHashMap::default(),
            counts: FxHashMap::default(),
            scan_cap: 200_000,
            scan_capped: 0,
        })
    }

    fn code(v: StarGridVertex) -> u64 {
        ((v.i as u32 as u64) << 32) | v.j as u32 as u64
    }

    fn box_count(&mut self, v: StarGridVertex) -> u64 {
        let u = self.u;
        let mean = u * self.table.total();
        let key = &self.key;
        *self.counts.entry(v).or_insert_with(|| {
            let mut s = key.child("box-count", Self::code(v)).stream();
            sample_poisson(&mut s, mean).expect("nonnegative mean")
        })
    }

    /// Trajectory j of box v, simulated for `horizon` steps from its
    /// equilibrium entrance point. Deterministic in (seed, box, j).
    fn trajectory_prefix(&self, v: StarGridVertex, j: u64, horizon: usize) -> WalkPath {
        let mut s = self
            .key
            .child("box", Self::code(v))
            .child("traj", j)
            .stream();
        let mut start = self
            .table
            .sample_start(&mut s)
            .expect("table has positive mass");
        let offset = v.embed(self.d, self.params.r);
        start = start.add(&offset);
        let (path, _) =
            crate::walk::simulate_until(&mut s, start, |_, t| t >= horizon as u64, u64::MAX);
        path
    }

    /// Continue simulating trajectory j past the prefix to the escape
    /// horizon, checking the slab-avoidance condition on the fly.
    fn avoids_slab_to_horizon(&self, v: StarGridVertex, j: u64, bx: &LatticeBox) -> bool {
        let mut s = self
            .key
            .child("box", Self::code(v))
            .child("traj", j)
            .stream();
        let mut start = self
            .table
            .sample_start(&mut s)
            .expect("table has positive mass");
        let offset = v.embed(self.d, self.params.r);
        start = start.add(&offset);
        let rho = self.policy.escape_factor.ceil() as u32;
        let r = self.params.r;
        let mut pos = start;
        let mut steps: u64 = 0;
        loop {
            if in_slab(&pos, r) && !bx.contains(&pos) {
                return false;
            }
            if !bx.contains_scaled(&pos, rho) {
                return true;
            }
            if steps >= self.policy.max_steps {
                return true;
            }
            let vdir = s.gen_range(0..2 * self.d as u32);
            pos = pos.step((vdir >> 1) as usize, vdir & 1 == 0);
            steps += 1;
        }
    }

    fn certify_trajectory(
        &mut self,
        v: StarGridVertex,
        j: u64,
        prefix: &WalkPath,
    ) -> Option<FxHashSet<Point>> {
        let bx = v.cell(self.d, self.params.r);
        let r = self.params.r;
        let m = self.params.calibration.good_m.max(1.0) as u32;
        // containment of the prefix
        let mut pts: Vec<Point> = Vec::with_capacity(prefix.len() + 1);
        for p in prefix.points() {
            if !bx.contains_scaled(&p, m) {
                return None;
            }
            pts.push(p);
        }
        // slab avoidance to the escape horizon
        if !self.avoids_slab_to_horizon(v, j, &bx) {
            return None;
        }
        // capacity condition
        pts.sort_unstable();
        pts.dedup();
        let set: FxHashSet<Point> = pts.iter().copied().collect();
        let est = estimate_capacity(
            &SetSpec::Points(pts),
            &EscapePolicy::default(),
            GOOD_WALK_CAPACITY_WALKS,
            &self.key.child("box-cap", Self::code(v)).child("traj", j),
            1,
        )
        .expect("nonempty prefix");
        let threshold = self.params.calibration.good_gamma * (r as f64) * (r as f64);
        if est.value + 3.0 * est.std_error >= threshold {
            Some(set)
        } else {
            None
        }
    }
}

impl ExploreOracle for LazyBoxOracle {
    fn is_good(&mut self, v: StarGridVertex) -> bool {
        if let Some(&cached) = self.good_memo.get(&v) {
            return cached;
        }
        let n = self.box_count(v).min(self.scan_cap);
        let horizon = (self.params.r as usize).pow(2);
        let mut good = false;
        for j in 0..n {
            let prefix = self.trajectory_prefix(v, j, horizon);
            if let Some(set) = self.certify_trajectory(v, j, &prefix) {
                self.chosen.insert(v, set);
                good = true;
                break;
            }
        }
        self.good_memo.insert(v, good);
        good
    }

    fn connect(&mut self, from: StarGridVertex, to: StarGridVertex) -> bool {
        let src = match self.chosen.get(&from) {
            Some(s) => s.clone(),
            None => return false,
        };
        let n = self.box_count(to);
        let capped = n > self.scan_cap;
        let n = n.min(self.scan_cap);
        if capped {
            self.scan_capped += 1;
        }
        let horizon = (self.params.r as usize).pow(2);
        for j in 0..n {
            let prefix = self.trajectory_prefix(to, j, horizon);
            if !prefix.points().any(|p| src.contains(&p)) {
                continue;
            }
            if let Some(set) = self.certify_trajectory(to, j, &prefix) {
                self.chosen.insert(to, set);
                self.good_memo.insert(to, true);
                return true;
            }
        }
        false
    }
}

/// Outcome of an interlacement-backed exploration, with the implied
/// chemical-distance bound (arrow count times R^2).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterlacementExploration {
    pub state: ExplorationState,
    pub arrow_count: u64,
    pub bound_steps: u64,
}

/// Exploration over an explicit configuration.
pub fn explore_on_config(
    cfg: &InterlacementConfig,
    params: &GoodBoxParams,
    n: u32,
    max_steps: u64,
    seed: u64,
) -> Result<InterlacementExploration, RenormError> {
    let mut oracle = ConfigOracle::new(cfg, *params, StreamKey::root(seed));
    let state = explore(&mut oracle, n, max_steps)?;
    let arrows = state.arrow_count();
    Ok(InterlacementExploration {
        arrow_count: arrows,
        bound_steps: arrows * (params.r as u64).pow(2),
        state,
    })
}

/// Exploration with lazily sampled per-box interlacement ensembles.
pub fn explore_on_interlacements(
    d: usize,
    u: f64,
    params: &GoodBoxParams,
    policy: &EscapePolicy,
    n: u32,
    max_steps: u64,
    seed: u64,
    threads: usize,
) -> Result<InterlacementExploration, RenormError> {
    let mut oracle = LazyBoxOracle::new(d, u, *params, *policy, seed, threads)?;
    let state = explore(&mut oracle, n, max_steps)?;
    let arrows = state.arrow_count();
    Ok(InterlacementExploration {
        arrow_count: arrows,
        bound_steps: arrows * (params.r as u64).pow(2),
        state,
    })
}

// ---------------------------------------------------------------------------
// multi-scale recursion
// ---------------------------------------------------------------------------

/// Renormalization scales: l_k = l0 4^(k^theta), r_k = r0 2^(k^theta),
/// L_k = l_{k-1} L_{k-1}. Non-integer theta rounds the real-valued factors
/// to the nearest integer (exact for integer theta).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScaleSequence {
    pub theta: f64,
    pub l0_boxes: u64,
    pub r0_boxes: u64,
    /// Side of the base box in lattice units.
    pub base_length: u64,
}

impl ScaleSequence {
    pub fn new(theta: f64, l0: u64, r0: u64, base_length: u64) -> Result<Self, RenormError> {
        if !(theta > 0.0) {
            return Err(RenormError::BadTheta(theta));
        }
        if r0 == 0 || l0 == 0 || 4 * r0 >= l0 {
            return Err(RenormError::BadScaleRatio(r0, l0));
        }
        Ok(ScaleSequence {
            theta,
            l0_boxes: l0,
            r0_boxes: r0,
            base_length: base_length.max(1),
        })
    }

    /// l_k (box count per side at level k+1 over level k).
    pub fn l(&self, k: usize) -> u64 {
        if k == 0 {
            return self.l0_boxes;
        }
        let factor = 4f64.powf((k as f64).powf(self.theta));
        (self.l0_boxes as f64 * factor).round() as u64
    }

    pub fn r(&self, k: usize) -> u64 {
        if k == 0 {
            return self.r0_boxes;
        }
        let factor = 2f64.powf((k as f64).powf(self.theta));
        (self.r0_boxes as f64 * factor).round() as u64
    }

    /// L_k in lattice units, or None on overflow.
    pub fn level_length(&self, k: usize) -> Option<u128> {
        let mut v = self.base_length as u128;
        for i in 0..k {
            v = v.checked_mul(self.l(i) as u128)?;
        }
        Some(v)
    }

    /// L_k / L_0 in level-0 cells.
    pub fn level_cells(&self, k: usize) -> Option<u128> {
        let mut v = 1u128;
        for i in 0..k {
            v = v.checked_mul(self.l(i) as u128)?;
        }
        Some(v)
    }

    /// Lower bound on prod_{k >= 0} (1 - r_k / l_k) from the first `terms`
    /// factors and an analytic tail bound; the pair (bound, exceeds 1/2).
    pub fn volume_product_bound(&self, terms: usize) -> (f64, bool) {
        let mut prod = 1.0f64;
        for k in 0..terms {
            prod *= 1.0 - self.r(k) as f64 / self.l(k) as f64;
        }
        // tail: ratio at level k is (r0/l0) 2^(-k^theta); for k >= K,
        // k^theta >= k * min(1, K^(theta-1)), giving a geometric bound
        let base_ratio = self.r0_boxes as f64 / self.l0_boxes as f64;
        let kf = terms as f64;
        let beta = if self.theta >= 1.0 {
            1.0
        } else {
            kf.powf(self.theta - 1.0)
        };
        let q = 2f64.powf(-beta);
        let tail_sum = base_ratio * q.powf(kf) / (1.0 - q);
        let bound = prod * (1.0 - tail_sum).max(0.0);
        (bound, bound > 0.5)
    }
}

/// A 0-good indicator field over level-0 cells.
pub trait ZeroGoodField {
    fn dim(&self) -> usize;
    /// Is the level-0 cell with corner index `cell` (in L_0 units) 0-good?
    fn is_zero_good(&mut self, cell: &Point) -> bool;
    /// Does the field cover a box of `side` level-0 cells cornered at `corner`?
    fn covers(&self, corner: &Point, side: u64) -> bool;
}

/// Bernoulli field keyed by (seed, cell) with unlimited extent.
pub struct BernoulliField {
    pub d: usize,
    pub seed: u64,
    pub p_bad: f64,
    memo: FxHashMap<Point, bool>,
}

impl BernoulliField {
    pub fn new(d: usize, seed: u64, p_bad: f64) -> Self {
        BernoulliField {
            d,
            seed,
            p_bad,
            memo: FxHashMap::default(),
        }
    }
}

impl ZeroGoodField for BernoulliField {
    fn dim(&self) -> usize {
        self.d
    }
    fn is_zero_good(&mut self, cell: &Point) -> bool {
        let seed = self.seed;
        let p = self.p_bad;
        *self.memo.entry(*cell).or_insert_with(|| {
            let mut h = 0xcbf29ce484222325u64;
            for &c in cell.coords() {
                h = (h ^ c as u32 as u64).wrapping_mul(0x100000001b3);
            }
            let mut s = crate::randomness::derive_stream(seed, "cell", h);
            s.gen::<f64>() >= p
        })
    }
    fn covers(&self, _corner: &Point, _side: u64) -> bool {
        true
    }
}

/// Explicit field over a finite box of cells: everything is good except the
/// listed bad cells.
pub struct ExplicitField {
    pub d: usize,
    pub corner: Point,
    pub side: u64,
    pub bad: FxHashSet<Point>,
}

impl ZeroGoodField for ExplicitField {
    fn dim(&self) -> usize {
        self.d
    }
    fn is_zero_good(&mut self, cell: &Point) -> bool {
        !self.bad.contains(cell)
    }
    fn covers(&self, corner: &Point, side: u64) -> bool {
        (0..self.d).all(|i| {
            corner.coord(i) >= self.corner.coord(i)
                && corner.coord(i) as i64 + side as i64
                    <= self.corner.coord(i) as i64 + self.side as i64
        })
    }
}

/// Recursive k-good evaluation on the box of side L_k / L_0 cells cornered
/// at `corner` (in cell units, a multiple of L_{k-1}/L_0 spacing). A level-k
/// box is bad iff two (k-1)-bad sub-boxes sit at l-infinity distance more
/// than r_{k-1} L_{k-1}; that is equivalent to the l-infinity diameter of
/// the bad sub-corner set exceeding the threshold, so each level costs one
/// pass over its sub-boxes.
pub fn k_good_check(
    field: &mut dyn ZeroGoodField,
    scales: &ScaleSequence,
    k: usize,
    corner: &Point,
) -> Result<bool, RenormError> {
    let side = scales
        .level_cells(k)
        .ok_or(RenormError::ScaleOverflow(k))? as u64;
    if !field.covers(corner, side) {
        return Err(RenormError::FieldTooSmall);
    }
    Ok(k_good_inner(field, scales, k, corner))
}

fn k_good_inner(
    field: &mut dyn ZeroGoodField,
    scales: &ScaleSequence,
    k: usize,
    corner: &Point,
) -> bool {
    if k == 0 {
        return field.is_zero_good(corner);
    }
    let d = field.dim();
    let sub_cells = scales.level_cells(k - 1).expect("checked by caller") as i64;
    let l = scales.l(k - 1) as i64;
    let threshold = scales.r(k - 1) as i64 * sub_cells; // r_{k-1} L_{k-1} in cell units
    let mut bad_low = [i64::MAX; crate::lattice::MAX_DIM];
    let mut bad_high = [i64::MIN; crate::lattice::MAX_DIM];
    let mut any_bad = false;
    let mut idx = vec![0i64; d];
    loop {
        let mut sub = *corner;
        for i in 0..d {
            sub = sub.with_coord(i, corner.coord(i) + (idx[i] * sub_cells) as i32);
        }
        if !k_good_inner(field, scales, k - 1, &sub) {
            any_bad = true;
            for i in 0..d {
                bad_low[i] = bad_low[i].min(idx[i] * sub_cells);
                bad_high[i] = bad_high[i].max(idx[i] * sub_cells);
            }
        }
        // odometer over the l^d sub-boxes
        let mut axis = d;
        loop {
            if axis == 0 {
                if any_bad {
                    let diameter = (0..d).map(|i| bad_high[i] - bad_low[i]).max().unwrap_or(0);
                    return diameter <= threshold;
                }
                return true;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < l {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Guaranteed number of 0-good boxes any path between the two target
/// sub-boxes of a k-good (fattened) box must cross:
/// prod_{i=1..k} (l_{i-1} - r_{i-1}).
pub fn crossing_count_lower_bound(scales: &ScaleSequence, k: usize) -> u128 {
    let mut v: u128 = 1;
    for i in 0..k {
        v *= (scales.l(i) - scales.r(i)) as u128;
    }
    v
}

/// Exhaustive oracle for small instances: the minimum number of 0-good cell
/// entries over nearest-neighbour cell paths from `from` to `to` within the
/// covered region (0-1 Dijkstra on entry costs).
pub fn min_good_crossings_exhaustive(
    field: &mut dyn ZeroGoodField,
    corner: &Point,
    side: u64,
    from: &Point,
    to: &Point,
) -> Option<u64> {
    use std::collections::VecDeque;
    let d = field.dim();
    let inside = |p: &Point| {
        (0..d).all(|i| {
            p.coord(i) >= corner.coord(i) && (p.coord(i) as i64) < corner.coord(i) as i64 + side as i64
        })
    };
    if !inside(from) || !inside(to) {
        return None;
    }
    let cost_of = |field: &mut dyn ZeroGoodField, p: &Point| -> u64 {
        if field.is_zero_good(p) {
            1
        } else {
            0
        }
    };
    let mut dist: FxHashMap<Point, u64> = FxHashMap::default();
    let mut dq: VecDeque<Point> = VecDeque::new();
    dist.insert(*from, cost_of(field, from));
    dq.push_back(*from);
    // 0-1 BFS with a deque
    let mut best: Option<u64> = None;
    while let Some(p) = dq.pop_front() {
        let dp = dist[&p];
        if let Some(b) = best {
            if dp >= b {
                continue;
            }
        }
        if p == *to {
            best = Some(best.map_or(dp, |b: u64| b.min(dp)));
            continue;
        }
        for nb in p.neighbours() {
            if !inside(&nb) {
                continue;
            }
            let w = cost_of(field, &nb);
            let nd = dp + w;
            if nd < dist.get(&nb).copied().unwrap_or(u64::MAX) {
                dist.insert(nb, nd);
                if w == 0 {
                    dq.push_front(nb);
                } else {
                    dq.push_back(nb);
                }
            }
        }
    }
    best
}
