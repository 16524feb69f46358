//! Ring statistics at the scale L = u^(2 eps) / sqrt(u): cluster
//! decomposition of the trajectories meeting B(2L), the three indicator
//! events (trajectory count, per-trajectory capacity, pairwise intersection
//! counts), sub-annulus crossings, branching-tail comparison, and the
//! boundary-to-boundary distance trial.

use crate::capacity::{estimate_capacity, SetSpec};
use crate::chemdist::{boundary_distance, BoundaryDistance};
use crate::interlacements::{
    build_graph, sample_config_with_table, window_table, InterlacementConfig, InterlacementError,
};
use crate::lattice::{LatticeBox, Point};
use crate::randomness::StreamKey;
use crate::util::{indexed_map, FxHashMap};
use crate::walk::EscapePolicy;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

#[derive(Debug, thiserror::Error)]
pub enum AnnulusError {
    #[error("epsilon must lie in (0, 1/12), got {0}")]
    BadEpsilon(f64),
    #[error("intensity u must be finite and positive, got {0}")]
    BadIntensity(f64),
    #[error("offspring mean {0} is not subcritical (needs 4 u^(2 eps) < 1)")]
    Supercritical(f64),
    #[error("tail rate is undefined at lambda = 1")]
    DegenerateRate,
    #[error(transparent)]
    Interlacement(#[from] InterlacementError),
}

/// Geometry of the ring experiment. The ring B(2L) \ B(L) is partitioned
/// into concentric box annuli; rounding uses floors with the outermost
/// annulus absorbing the remainder, and every annulus splits into three
/// equal-width shells (inner, middle, outer).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RingSpec {
    pub u: f64,
    pub epsilon: f64,
    /// Integer radius L (at least 1).
    pub l: u32,
    pub inner: LatticeBox,
    pub outer: LatticeBox,
    pub annuli_count: u32,
    pub annulus_width: u32,
}

impl RingSpec {
    pub fn new(d: usize, u: f64, epsilon: f64) -> Result<RingSpec, AnnulusError> {
        if !(epsilon > 0.0 && epsilon < 1.0 / 12.0) {
            return Err(AnnulusError::BadEpsilon(epsilon));
        }
        if !u.is_finite() || u <= 0.0 {
            return Err(AnnulusError::BadIntensity(u));
        }
        let l_real = Self::l_real(u, epsilon);
        let l = (l_real.round() as u32).max(1);
        let count = (Self::annuli_count_real(u, epsilon).floor() as u32).clamp(1, l);
        let width = (l / count).max(1);
        Ok(RingSpec {
            u,
            epsilon,
            l,
            inner: LatticeBox::new(Point::origin(d), l),
            outer: LatticeBox::new(Point::origin(d), 2 * l),
            annuli_count: count,
            annulus_width: width,
        })
    }

    /// The real-valued scale u^(2 eps) / sqrt(u); thresholds use this rather
    /// than the rounded box radius.
    pub fn l_real(u: f64, epsilon: f64) -> f64 {
        u.powf(2.0 * epsilon - 0.5)
    }

    pub fn annuli_count_real(u: f64, epsilon: f64) -> f64 {
        u.powf(-2.0 * epsilon / 3.0)
    }

    /// Box radius of a point: the smallest s >= 1 with x in B_0(s).
    pub fn box_radius(&self, p: &Point) -> u32 {
        let mut s = 1i64;
        for i in 0..p.dim() {
            let t = p.coord(i) as i64 - self.inner.center.coord(i) as i64;
            s = s.max(-t).max(t + 1);
        }
        s as u32
    }

    /// Annulus index (0-based, outermost absorbs slack) for a point of the
    /// ring, or None outside the ring.
    pub fn annulus_of(&self, p: &Point) -> Option<u32> {
        let s = self.box_radius(p);
        if s <= self.l || s > 2 * self.l {
            return None;
        }
        let j = (s - self.l - 1) / self.annulus_width;
        Some(j.min(self.annuli_count - 1))
    }

    /// Radial bounds (a, b] of annulus j in box-radius units.
    pub fn annulus_bounds(&self, j: u32) -> (u32, u32) {
        let a = self.l + j * self.annulus_width;
        let b = if j + 1 == self.annuli_count {
            2 * self.l
        } else {
            self.l + (j + 1) * self.annulus_width
        };
        (a, b)
    }

    /// Radial bounds (a, b] of shell 0/1/2 (inner/middle/outer) of annulus j.
    /// Shells are thirds of the annulus; the outer shell absorbs slack.
    pub fn shell_bounds(&self, j: u32, shell: u32) -> (u32, u32) {
        let (a, b) = self.annulus_bounds(j);
        let w3 = ((b - a) / 3).max(1);
        match shell {
            0 => (a, (a + w3).min(b)),
            1 => ((a + w3).min(b), (a + 2 * w3).min(b)),
            _ => ((a + 2 * w3).min(b), b),
        }
    }
}

// ---------------------------------------------------------------------------
// clusters
// ---------------------------------------------------------------------------

/// Partition of trajectory labels into clusters (chains of pairwise range
/// intersections inside B(2L)), with the per-cluster count of multi-visited
/// points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterDecomposition {
    /// Clusters as sorted label lists, ordered by smallest member.
    pub clusters: Vec<Vec<u32>>,
    /// Per-cluster count of lattice points in B(2L) visited by at least two
    /// distinct member trajectories.
    pub intersection_counts: Vec<u64>,
}

impl ClusterDecomposition {
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.len()).collect()
    }

    pub fn max_size(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).max().unwrap_or(0)
    }

    pub fn max_intersections(&self) -> u64 {
        self.intersection_counts.iter().copied().max().unwrap_or(0)
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }
    fn find(&mut self, x: u32) -> u32 {
        let mut x = x;
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins, keeping roots deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Decompose a configuration into clusters over the ring window.
pub fn decompose_clusters(cfg: &InterlacementConfig, ring: &RingSpec) -> ClusterDecomposition {
    let n = cfg.trajectories.len();
    let mut uf = UnionFind::new(n);
    // point -> distinct visiting trajectory indices (within B(2L))
    let mut visitors: FxHashMap<Point, SmallVec<[u32; 2]>> = FxHashMap::default();
    for (idx, t) in cfg.trajectories.iter().enumerate() {
        for p in t.path.points() {
            if !ring.outer.contains(&p) {
                continue;
            }
            let set = visitors.entry(p).or_default();
            if !set.contains(&(idx as u32)) {
                set.push(idx as u32);
            }
        }
    }
    for set in visitors.values() {
        for k in 1..set.len() {
            uf.union(set[0], set[k]);
        }
    }
    let mut by_root: FxHashMap<u32, Vec<u32>> = FxHashMap::default();
    for i in 0..n as u32 {
        by_root.entry(uf.find(i)).or_default().push(i);
    }
    let mut cluster_indices: Vec<Vec<u32>> = by_root.into_values().collect();
    for c in cluster_indices.iter_mut() {
        c.sort_unstable();
    }
    cluster_indices.sort();

    let mut cluster_of_index: FxHashMap<u32, usize> = FxHashMap::default();
    for (ci, c) in cluster_indices.iter().enumerate() {
        for &i in c {
            cluster_of_index.insert(i, ci);
        }
    }
    let mut counts = vec![0u64; cluster_indices.len()];
    for set in visitors.values() {
        if set.len() >= 2 {
            counts[cluster_of_index[&set[0]]] += 1;
        }
    }
    let clusters = cluster_indices
        .into_iter()
        .map(|c| {
            let mut v: Vec<u32> = c
                .into_iter()
                .map(|i| cfg.trajectories[i as usize].label)
                .collect();
            v.sort_unstable();
            v
        })
        .collect();
    ClusterDecomposition {
        clusters,
        intersection_counts: counts,
    }
}

/// Pigeonhole check: for a cluster, is there an annulus index in which no
/// two member trajectories share a point? Guaranteed whenever the cluster's
/// intersection count is below the annulus count.
pub fn cluster_has_intersection_free_annulus(
    cfg: &InterlacementConfig,
    ring: &RingSpec,
    cluster: &[u32],
) -> bool {
    let members: Vec<&crate::interlacements::Trajectory> = cfg
        .trajectories
        .iter()
        .filter(|t| cluster.contains(&t.label))
        .collect();
    'annuli: for j in 0..ring.annuli_count {
        let mut seen: FxHashMap<Point, u32> = FxHashMap::default();
        for (mi, t) in members.iter().enumerate() {
            for p in t.path.points() {
                if ring.annulus_of(&p) != Some(j) {
                    continue;
                }
                match seen.get(&p) {
                    Some(&other) if other != mi as u32 => continue 'annuli,
                    _ => {
                        seen.insert(p, mi as u32);
                    }
                }
            }
        }
        return true;
    }
    false
}

// ---------------------------------------------------------------------------
// events
// ---------------------------------------------------------------------------

/// The three ring indicator events plus summary statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventStatistics {
    pub n_trajectories: u64,
    pub n_u_holds: bool,
    pub c_u_holds: bool,
    pub k_u_holds: bool,
    pub max_cluster: usize,
    pub max_intersections: u64,
    /// Largest per-trajectory lenient capacity (value - 3 sigma) of the
    /// range intersected with the ring window.
    pub max_trajectory_capacity: f64,
}

/// Walks per site for the per-trajectory capacity threshold test; only a
/// threshold comparison is consumed, so a small budget suffices.
pub const EVENT_CAPACITY_WALKS: u32 = 64;

/// Evaluate the indicator events as defined: trajectory count below
/// u^(1-eps) L^(d-2), every per-trajectory cap(range within B(2L)) below
/// u^(-2 eps) L^2, and max cluster intersection count below u^(-eps/2).
/// Thresholds use the real-valued L; capacity comparisons subtract 3 sigma
/// to avoid false event failures from estimator noise.
pub fn event_statistics(
    cfg: &InterlacementConfig,
    ring: &RingSpec,
    key: &StreamKey,
) -> EventStatistics {
    let d = cfg.d;
    let l_real = RingSpec::l_real(ring.u, ring.epsilon);
    let n = cfg.trajectories.len() as u64;
    let n_threshold = ring.u.powf(1.0 - ring.epsilon) * l_real.powi(d as i32 - 2);
    let n_u_holds = (n as f64) < n_threshold;

    let cap_threshold = ring.u.powf(-2.0 * ring.epsilon) * l_real * l_real;
    let mut c_u_holds = true;
    let mut max_cap = 0.0f64;
    for (i, t) in cfg.trajectories.iter().enumerate() {
        let mut pts: Vec<Point> = t
            .path
            .points()
            .filter(|p| ring.outer.contains(p))
            .collect();
        pts.sort_unstable();
        pts.dedup();
        if pts.is_empty() {
            continue;
        }
        let est = estimate_capacity(
            &SetSpec::Points(pts),
            &cfg.policy,
            EVENT_CAPACITY_WALKS,
            &key.child("traj-cap", i as u64),
            1,
        )
        .expect("nonempty in-window range");
        let lenient = est.value - 3.0 * est.std_error;
        max_cap = max_cap.max(lenient);
        if lenient >= cap_threshold {
            c_u_holds = false;
        }
    }

    let decomposition = decompose_clusters(cfg, ring);
    let k_threshold = ring.u.powf(-ring.epsilon / 2.0);
    let max_k = decomposition.max_intersections();
    EventStatistics {
        n_trajectories: n,
        n_u_holds,
        c_u_holds,
        k_u_holds: (max_k as f64) < k_threshold,
        max_cluster: decomposition.max_size(),
        max_intersections: max_k,
        max_trajectory_capacity: max_cap,
    }
}

// ---------------------------------------------------------------------------
// crossings
// ---------------------------------------------------------------------------

/// A sub-path with endpoints on the two boundary components of one shell of
/// one annulus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub label: u32,
    pub annulus: u32,
    /// 0 = inner shell, 1 = middle, 2 = outer.
    pub shell: u32,
    pub t_entry: u64,
    pub t_exit: u64,
    /// Whether the crossing runs inside-out (true) or outside-in.
    pub outward: bool,
}

impl Crossing {
    pub fn step_length(&self) -> u64 {
        self.t_exit - self.t_entry
    }
}

/// Extract all shell crossings of every trajectory. A crossing must enter
/// through one boundary of the shell and leave through the other; runs that
/// begin inside a shell (a trajectory starting on the window boundary) or
/// back out the side they came from do not count.
pub fn crossings(cfg: &InterlacementConfig, ring: &RingSpec) -> Vec<Crossing> {
    let mut out = Vec::new();
    for t in &cfg.trajectories {
        for j in 0..ring.annuli_count {
            for shell in 0..3u32 {
                let (a, b) = ring.shell_bounds(j, shell);
                if a >= b {
                    continue;
                }
                extract_crossings(t, ring, a, b, j, shell, &mut out);
            }
        }
    }
    out.sort_unstable_by_key(|c| (c.label, c.annulus, c.shell, c.t_entry));
    out
}

#[derive(PartialEq, Clone, Copy, Debug)]
enum Side {
    Below,
    Above,
}

fn extract_crossings(
    t: &crate::interlacements::Trajectory,
    ring: &RingSpec,
    a: u32,
    b: u32,
    annulus: u32,
    shell: u32,
    out: &mut Vec<Crossing>,
) {
    let mut last_outside: Option<Side> = None;
    let mut entry: Option<(u64, Side)> = None;
    let mut time = 0u64;
    for p in t.path.points() {
        let s = ring.box_radius(&p);
        if s > a && s <= b {
            if entry.is_none() {
                if let Some(side) = last_outside {
                    entry = Some((time, side));
                }
            }
        } else {
            let side = if s <= a { Side::Below } else { Side::Above };
            if let Some((t_in, from)) = entry.take() {
                if side != from {
                    out.push(Crossing {
                        label: t.label,
                        annulus,
                        shell,
                        t_entry: t_in,
                        t_exit: time,
                        outward: side == Side::Above,
                    });
                }
            }
            last_outside = Some(side);
        }
        time += 1;
    }
}

// ---------------------------------------------------------------------------
// branching tail
// ---------------------------------------------------------------------------

/// Result of the tail comparison against exp(-xi k) with
/// xi = lambda - 1 - log(lambda).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GwReport {
    pub lambda: f64,
    pub xi: f64,
    pub samples: usize,
    pub passed: bool,
    /// First k where the empirical tail exceeded the bound, with
    /// (empirical, bound).
    pub first_violation: Option<(u64, f64, f64)>,
}

/// Compare the empirical tail P(size > k) of cluster sizes against
/// exp(-xi k) + 3 * CI half-width for k = 1..k_max. Defined for any
/// positive rate lambda != 1 (xi > 0 there).
pub fn gw_tail_report(sizes: &[u64], lambda: f64) -> Result<GwReport, AnnulusError> {
    if !(lambda > 0.0) || (lambda - 1.0).abs() < 1e-12 {
        return Err(AnnulusError::DegenerateRate);
    }
    let xi = lambda - 1.0 - lambda.ln();
    let m = sizes.len().max(1) as f64;
    let k_max = sizes.iter().copied().max().unwrap_or(1).clamp(1, 64);
    let mut first_violation = None;
    for k in 1..=k_max {
        let p_hat = sizes.iter().filter(|&&s| s > k).count() as f64 / m;
        let ci = 3.0 * (p_hat * (1.0 - p_hat) / m).sqrt();
        let bound = (-xi * k as f64).exp() + ci;
        if p_hat > bound {
            first_violation = Some((k, p_hat, bound));
            break;
        }
    }
    Ok(GwReport {
        lambda,
        xi,
        samples: sizes.len(),
        passed: first_violation.is_none(),
        first_violation,
    })
}

/// The parameterized wrapper: offspring mean 4 u^(2 eps), enforced
/// subcritical as a precondition.
pub fn gw_domination_test(sizes: &[u64], u: f64, epsilon: f64) -> Result<GwReport, AnnulusError> {
    let lambda = 4.0 * u.powf(2.0 * epsilon);
    if lambda >= 1.0 {
        return Err(AnnulusError::Supercritical(lambda));
    }
    gw_tail_report(sizes, lambda)
}

// ---------------------------------------------------------------------------
// experiment driver
// ---------------------------------------------------------------------------

/// One repetition of the ring experiment, as emitted by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnulusRep {
    pub rep: u32,
    pub n: u64,
    pub n_u: bool,
    pub c_u: bool,
    pub k_u: bool,
    pub max_cluster: usize,
    pub max_k: u64,
    pub cluster_sizes: Vec<u64>,
    pub boundary_distance: Option<u64>,
    /// Whether the short-crossing event (distance <= c_lower * u^(2eps) L^2)
    /// occurred; unreachable counts as false.
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct AnnulusParams {
    pub d: usize,
    pub u: f64,
    pub epsilon: f64,
    pub c_lower: f64,
    pub policy: EscapePolicy,
    pub seed: u64,
    pub threads: usize,
}

/// Run `reps` independent ring experiments. The window equilibrium table is
/// shared across reps; each rep samples its own configuration, decomposes
/// clusters, evaluates events, and measures the boundary distance.
pub fn annulus_experiment(
    params: &AnnulusParams,
    reps: u32,
) -> Result<(RingSpec, Vec<AnnulusRep>), AnnulusError> {
    let ring = RingSpec::new(params.d, params.u, params.epsilon)?;
    let key = StreamKey::root(params.seed);
    let table = window_table(params.d, &ring.outer, &params.policy, &key, params.threads)?;
    let rows: Vec<AnnulusRep> = indexed_map(params.threads, reps as usize, |rep| {
        let rep_key = key.child("annulus-rep", rep as u64);
        let seed = {
            use rand::Rng;
            rep_key.child("cfg-seed", 0).stream().gen::<u64>()
        };
        let cfg = sample_config_with_table(
            params.d,
            params.u,
            ring.outer,
            &params.policy,
            seed,
            &table,
            1,
        )
        .expect("validated parameters");
        annulus_rep(&cfg, &ring, params, &rep_key, rep as u32)
    });
    Ok((ring, rows))
}

/// Evaluate one already-sampled configuration.
pub fn annulus_rep(
    cfg: &InterlacementConfig,
    ring: &RingSpec,
    params: &AnnulusParams,
    rep_key: &StreamKey,
    rep: u32,
) -> AnnulusRep {
    let stats = event_statistics(cfg, ring, rep_key);
    let decomposition = decompose_clusters(cfg, ring);
    let graph = build_graph(cfg, None).expect("ring windows fit the frame");
    let bd = if graph.is_empty() {
        BoundaryDistance::NoInnerVertex
    } else {
        boundary_distance(&graph, &ring.inner, &ring.outer)
    };
    let l_real = RingSpec::l_real(ring.u, ring.epsilon);
    let threshold = params.c_lower * ring.u.powf(2.0 * ring.epsilon) * l_real * l_real;
    let (dist, event) = match bd {
        BoundaryDistance::Distance(dv) => (Some(dv), (dv as f64) <= threshold),
        _ => (None, false),
    };
    AnnulusRep {
        rep,
        n: stats.n_trajectories,
        n_u: stats.n_u_holds,
        c_u: stats.c_u_holds,
        k_u: stats.k_u_holds,
        max_cluster: stats.max_cluster,
        max_k: stats.max_intersections,
        cluster_sizes: decomposition.sizes().iter().map(|&s| s as u64).collect(),
        boundary_distance: dist,
        event,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::WalkPath;

    fn ring_d5() -> RingSpec {
        RingSpec::new(5, 0.02, 0.05).unwrap()
    }

    fn straight(d: usize, axis: usize, from: i32, to: i32) -> WalkPath {
        let step = if to >= from { 1 } else { -1 };
        let mut pts = Vec::new();
        let mut k = from;
        loop {
            pts.push(Point::unit(d, axis, k));
            if k == to {
                break;
            }
            k += step;
        }
        WalkPath::from_points(0, &pts)
    }

    #[test]
    fn ring_spec_validation() {
        assert!(matches!(
            RingSpec::new(5, 0.02, 0.2),
            Err(AnnulusError::BadEpsilon(_))
        ));
        assert!(matches!(
            RingSpec::new(5, -0.1, 0.05),
            Err(AnnulusError::BadIntensity(_))
        ));
        let ring = ring_d5();
        assert_eq!(ring.l, 5); // 0.02^(-0.4) = 4.78 rounds to 5
        assert_eq!(ring.outer.half_width, 10);
        assert!(ring.annuli_count >= 1);
        // annuli tile the ring: every radius maps to exactly one annulus
        for s in ring.l + 1..=2 * ring.l {
            let p = Point::unit(5, 0, s as i32 - 1); // box radius = s
            assert_eq!(ring.box_radius(&p), s);
            assert!(ring.annulus_of(&p).is_some(), "s = {s}");
        }
        assert!(ring.annulus_of(&Point::origin(5)).is_none());
    }

    #[test]
    fn box_radius_matches_membership() {
        let ring = ring_d5();
        for k in 1..=12i32 {
            for p in [Point::unit(5, 1, k), Point::unit(5, 1, -k)] {
                let s = ring.box_radius(&p);
                assert!(LatticeBox::new(Point::origin(5), s).contains(&p));
                if s > 1 {
                    assert!(!LatticeBox::new(Point::origin(5), s - 1).contains(&p));
                }
            }
        }
    }

    #[test]
    fn disjoint_trajectories_are_singletons() {
        let ring = ring_d5();
        let cfg = InterlacementConfig::from_paths(
            5,
            ring.outer,
            vec![
                straight(5, 0, 6, 9),
                straight(5, 1, 6, 9),
                straight(5, 2, 6, 9),
            ],
        );
        let dec = decompose_clusters(&cfg, &ring);
        assert_eq!(dec.clusters.len(), 3);
        assert!(dec.clusters.iter().all(|c| c.len() == 1));
        assert!(dec.intersection_counts.iter().all(|&k| k == 0));
    }

    #[test]
    fn chained_trajectories_form_one_cluster() {
        let ring = ring_d5();
        // a and b share one point; b and c share another; a and c disjoint
        let a = straight(5, 0, 6, 8);
        let b_pts: Vec<Point> = (0..4)
            .map(|k| {
                let mut p = Point::unit(5, 0, 6);
                p = p.with_coord(1, k);
                p
            })
            .collect();
        let b = WalkPath::from_points(0, &b_pts);
        let c_start = *b_pts.last().unwrap();
        let c = WalkPath::from_points(0, &[c_start, c_start.step(2, true)]);
        let cfg = InterlacementConfig::from_paths(5, ring.outer, vec![a, b, c]);
        let dec = decompose_clusters(&cfg, &ring);
        assert_eq!(dec.clusters.len(), 1);
        assert_eq!(dec.clusters[0], vec![0, 1, 2]);
    }

    /// Transitive-closure oracle for the cluster partition.
    fn closure_oracle(cfg: &InterlacementConfig, ring: &RingSpec) -> Vec<Vec<u32>> {
        let n = cfg.trajectories.len();
        let ranges: Vec<crate::util::FxHashSet<Point>> = cfg
            .trajectories
            .iter()
            .map(|t| {
                t.path
                    .points()
                    .filter(|p| ring.outer.contains(p))
                    .collect()
            })
            .collect();
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                if ranges[i].iter().any(|p| ranges[j].contains(p)) {
                    adj[i][j] = true;
                    adj[j][i] = true;
                }
            }
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for i in 0..n {
            if seen[i] {
                continue;
            }
            let mut comp = vec![];
            let mut stack = vec![i];
            seen[i] = true;
            while let Some(v) = stack.pop() {
                comp.push(cfg.trajectories[v].label);
                for w in 0..n {
                    if adj[v][w] && !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out.sort();
        out
    }

    #[test]
    fn decomposition_matches_closure_oracle() {
        let ring = ring_d5();
        for seed in 0..30u64 {
            let mut paths = Vec::new();
            let n_paths = 2 + (seed % 5) as usize;
            for j in 0..n_paths {
                let mut s = crate::randomness::derive_stream(900 + seed, "cl", j as u64);
                use rand::Rng;
                let start = Point::new(&[
                    s.gen_range(-9..9),
                    s.gen_range(-9..9),
                    s.gen_range(-3..3),
                    0,
                    0,
                ]);
                let (w, _) = crate::walk::simulate_until(&mut s, start, |_, _| false, 60);
                paths.push(w);
            }
            let cfg = InterlacementConfig::from_paths(5, ring.outer, paths);
            let dec = decompose_clusters(&cfg, &ring);
            assert_eq!(dec.clusters, closure_oracle(&cfg, &ring), "seed {seed}");
            // partition property
            let total: usize = dec.clusters.iter().map(|c| c.len()).sum();
            assert_eq!(total, cfg.trajectories.len());
            // per-cluster intersection points sum to the global count
            let global = crate::walk::intersection_count(
                &cfg.trajectories
                    .iter()
                    .map(|t| t.path.clone())
                    .collect::<Vec<_>>(),
                Some(&ring.outer),
            );
            let summed: u64 = dec.intersection_counts.iter().sum();
            assert!(summed as usize <= global);
            assert_eq!(summed as usize, global);
        }
    }

    #[test]
    fn relabelling_stability() {
        let ring = ring_d5();
        let a = straight(5, 0, 6, 8);
        let b = straight(5, 1, 6, 8);
        let shared = WalkPath::from_points(0, &[Point::unit(5, 0, 6), Point::unit(5, 0, 7)]);
        let mut paths = vec![a, b, shared];
        let cfg = InterlacementConfig::from_paths(5, ring.outer, paths.clone());
        let dec1 = decompose_clusters(&cfg, &ring);
        paths.swap(0, 2);
        let cfg2 = InterlacementConfig::from_paths(5, ring.outer, paths);
        let dec2 = decompose_clusters(&cfg2, &ring);
        // same partition of point sets under relabelling
        let canon = |cfg: &InterlacementConfig, dec: &ClusterDecomposition| {
            let mut v: Vec<Vec<Point>> = dec
                .clusters
                .iter()
                .map(|c| {
                    let mut pts: Vec<Point> = cfg
                        .trajectories
                        .iter()
                        .filter(|t| c.contains(&t.label))
                        .flat_map(|t| t.path.to_points())
                        .collect();
                    pts.sort_unstable();
                    pts.dedup();
                    pts
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(canon(&cfg, &dec1), canon(&cfg2, &dec2));
    }

    #[test]
    fn empty_config_events_hold_vacuously() {
        let ring = ring_d5();
        let cfg = InterlacementConfig::from_paths(5, ring.outer, vec![]);
        let stats = event_statistics(&cfg, &ring, &StreamKey::root(1));
        assert!(stats.n_u_holds && stats.c_u_holds && stats.k_u_holds);
        assert_eq!(stats.max_cluster, 0);
    }

    #[test]
    fn radial_trajectory_crosses_every_shell_once() {
        let ring = ring_d5();
        let path = straight(5, 0, 0, 2 * ring.l as i32 + 2);
        let cfg = InterlacementConfig::from_paths(5, ring.outer, vec![path]);
        let all = crossings(&cfg, &ring);
        for j in 0..ring.annuli_count {
            for shell in 0..3 {
                let (a, b) = ring.shell_bounds(j, shell);
                if a >= b {
                    continue;
                }
                let hits: Vec<&Crossing> = all
                    .iter()
                    .filter(|c| c.annulus == j && c.shell == shell)
                    .collect();
                assert_eq!(hits.len(), 1, "annulus {j} shell {shell}");
                assert!(hits[0].outward);
                assert!(hits[0].step_length() >= (b - a) as u64);
            }
        }
    }

    #[test]
    fn backing_out_is_not_a_crossing() {
        let ring = ring_d5();
        let (a, b) = ring.shell_bounds(0, 1);
        if a >= b {
            return;
        }
        // enter the middle shell from below and back out the same side
        let to = a as i32; // box radius a+1, just inside the shell
        let mut pts: Vec<Point> = (0..=to).map(|k| Point::unit(5, 0, k)).collect();
        pts.extend((0..to).rev().map(|k| Point::unit(5, 0, k)));
        let path = WalkPath::from_points(0, &pts);
        let cfg = InterlacementConfig::from_paths(5, ring.outer, vec![path]);
        let all = crossings(&cfg, &ring);
        assert_eq!(
            all.iter()
                .filter(|c| c.annulus == 0 && c.shell == 1)
                .count(),
            0,
            "{all:?}"
        );
    }

    #[test]
    fn crossing_length_dominates_shell_width() {
        let ring = ring_d5();
        let table_key = StreamKey::root(77);
        let policy = EscapePolicy::new(4.0, 10_000_000);
        let table = window_table(5, &ring.outer, &policy, &table_key, 2).unwrap();
        for seed in 0..5 {
            let cfg =
                sample_config_with_table(5, 0.05, ring.outer, &policy, 3200 + seed, &table, 2)
                    .unwrap();
            for c in crossings(&cfg, &ring) {
                let (a, b) = ring.shell_bounds(c.annulus, c.shell);
                assert!(c.step_length() >= (b - a) as u64);
            }
        }
    }

    #[test]
    fn pigeonhole_on_disjoint_cluster() {
        let ring = ring_d5();
        let cfg = InterlacementConfig::from_paths(
            5,
            ring.outer,
            vec![straight(5, 0, 6, 9), straight(5, 1, 6, 9)],
        );
        let dec = decompose_clusters(&cfg, &ring);
        for c in &dec.clusters {
            assert!(dec.max_intersections() < ring.annuli_count as u64);
            assert!(cluster_has_intersection_free_annulus(&cfg, &ring, c));
        }
    }

    #[test]
    fn gw_singletons_pass() {
        let sizes = vec![1u64; 500];
        let report = gw_tail_report(&sizes, 0.5).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn gw_heavy_tail_fails_with_k() {
        let mut sizes = vec![1u64; 100];
        sizes.extend(vec![40u64; 100]);
        let report = gw_tail_report(&sizes, 0.5).unwrap();
        assert!(!report.passed);
        let (k, p, bound) = report.first_violation.unwrap();
        assert!(k >= 1 && p > bound);
    }

    #[test]
    fn gw_wrapper_enforces_subcriticality() {
        // 4 u^(2 eps) at u = 0.01, eps = 0.05 is about 2.52: supercritical
        let err = gw_domination_test(&[1, 1, 2], 0.01, 0.05).unwrap_err();
        assert!(matches!(err, AnnulusError::Supercritical(_)));
        // genuinely subcritical parameters pass through
        let report = gw_domination_test(&[1, 1, 2], 1e-13, 0.05).unwrap();
        assert!(report.lambda < 1.0);
        assert!(report.passed);
    }

    #[test]
    fn gw_rejects_degenerate_rate() {
        assert!(matches!(
            gw_tail_report(&[1, 2], 1.0),
            Err(AnnulusError::DegenerateRate)
        ));
    }

    #[test]
    fn trial_event_false_for_single_radial_trajectory() {
        // one straight radial trajectory: boundary distance = L, threshold
        // c_lower * u^(2eps) L^2 < L at these parameters, so no event
        let ring = ring_d5();
        let path = straight(5, 0, ring.l as i32, 2 * ring.l as i32 + 1);
        let cfg = InterlacementConfig::from_paths(5, ring.outer, vec![path]);
        let params = AnnulusParams {
            d: 5,
            u: ring.u,
            epsilon: ring.epsilon,
            c_lower: 0.1,
            policy: EscapePolicy::new(4.0, 10_000_000),
            seed: 1,
            threads: 1,
        };
        let rep = annulus_rep(&cfg, &ring, &params, &StreamKey::root(5), 0);
        assert_eq!(rep.boundary_distance, Some(ring.l as u64));
        assert!(!rep.event);
    }

    #[test]
    fn trial_event_false_when_ring_unhit() {
        let ring = ring_d5();
        let cfg = InterlacementConfig::from_paths(5, ring.outer, vec![]);
        let params = AnnulusParams {
            d: 5,
            u: ring.u,
            epsilon: ring.epsilon,
            c_lower: 0.1,
            policy: EscapePolicy::new(4.0, 10_000_000),
            seed: 1,
            threads: 1,
        };
        let rep = annulus_rep(&cfg, &ring, &params, &StreamKey::root(6), 0);
        assert_eq!(rep.boundary_distance, None);
        assert!(!rep.event);
    }
}
