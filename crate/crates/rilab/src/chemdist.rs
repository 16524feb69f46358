//! Chemical-distance queries on interlacement graphs: nearest-vertex
//! rounding, point-to-point BFS, boundary-to-boundary distance, and the
//! time-constant scaling experiment.

use crate::interlacements::{
    build_graph_lean, sample_config_with_table, window_table, InterlacementError,
    InterlacementGraph,
};
use crate::lattice::{BoundarySide, LatticeBox, Point};
use crate::randomness::{Stream, StreamKey};
use crate::util::{indexed_map, FxHashMap};
use crate::walk::EscapePolicy;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ChemDistError {
    #[error("graph has no vertices")]
    EmptyGraph,
    #[error(transparent)]
    Interlacement(#[from] InterlacementError),
}

/// Outcome of a distance query.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistanceResult {
    /// Graph distance, or None when the endpoints are not connected within
    /// the available graph.
    pub distance: Option<u64>,
    pub source_used: Point,
    pub target_used: Point,
    /// The BFS touched the clip boundary; reachability and distances beyond
    /// the window may differ, so a reported distance is only trustworthy as
    /// a within-window value.
    pub frontier_truncated: bool,
}

/// Why a boundary-to-boundary query failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryDistance {
    Distance(u64),
    NoInnerVertex,
    NoOuterVertex,
    Unreachable,
}

/// Nearest graph vertex to `x` in l1 distance; ties broken uniformly at
/// random from `stream`, which is the simplest rule whose law is invariant
/// under the lattice symmetries.
pub fn round_to_graph(
    x: &Point,
    g: &InterlacementGraph,
    stream: &mut Stream,
) -> Result<Point, ChemDistError> {
    if g.is_empty() {
        return Err(ChemDistError::EmptyGraph);
    }
    if g.has_vertex(x) {
        return Ok(*x);
    }
    // expand l1 shells; beyond a cap fall back to a full scan
    const SHELL_CAP: u64 = 16;
    for r in 1..=SHELL_CAP {
        let mut hits: Vec<Point> = Vec::new();
        enumerate_l1_sphere(x, r, &mut |p| {
            if g.has_vertex(&p) {
                hits.push(p);
            }
        });
        if !hits.is_empty() {
            hits.sort_unstable();
            let i = uniform_index(stream, hits.len());
            return Ok(hits[i]);
        }
    }
    let mut best = u64::MAX;
    let mut hits: Vec<Point> = Vec::new();
    for v in g.iter_vertices() {
        let dist = v.dist_l1(x);
        if dist < best {
            best = dist;
            hits.clear();
            hits.push(v);
        } else if dist == best {
            hits.push(v);
        }
    }
    let i = uniform_index(stream, hits.len());
    Ok(hits[i])
}

fn uniform_index(stream: &mut Stream, n: usize) -> usize {
    use rand::Rng;
    if n == 1 {
        0
    } else {
        stream.gen_range(0..n as u64) as usize
    }
}

/// Visit all points at exact l1 distance `r` from `x`.
fn enumerate_l1_sphere(x: &Point, r: u64, visit: &mut impl FnMut(Point)) {
    fn rec(p: Point, axis: usize, remaining: i64, visit: &mut impl FnMut(Point)) {
        let d = p.dim();
        if axis + 1 == d {
            if remaining == 0 {
                visit(p);
            } else {
                visit(p.with_coord(axis, p.coord(axis) + remaining as i32));
                visit(p.with_coord(axis, p.coord(axis) - remaining as i32));
            }
            return;
        }
        for off in -remaining..=remaining {
            rec(
                p.with_coord(axis, p.coord(axis) + off as i32),
                axis + 1,
                remaining - off.abs(),
                visit,
            );
        }
    }
    rec(*x, 0, r as i64, visit);
}

fn touches_clip_boundary(g: &InterlacementGraph, p: &Point) -> bool {
    match g.clip {
        None => false,
        Some(b) => {
            let r = b.half_width as i64;
            (0..b.dim()).any(|i| {
                let t = p.coord(i) as i64 - b.center.coord(i) as i64;
                t == -r || t == r - 1
            })
        }
    }
}

struct BfsSide {
    dist: FxHashMap<Point, u32>,
    frontier: Vec<Point>,
    radius: u32,
}

impl BfsSide {
    fn new(start: Point) -> Self {
        let mut dist = FxHashMap::default();
        dist.insert(start, 0);
        BfsSide {
            dist,
            frontier: vec![start],
            radius: 0,
        }
    }
}

/// Chemical distance between `x` and `y`: BFS over present edges between the
/// rounded representatives. Bidirectional level expansion; exact for unit
/// weights (the search stops only once no undiscovered path can be shorter
/// than the best meeting).
pub fn chemical_distance(
    g: &InterlacementGraph,
    x: &Point,
    y: &Point,
    stream: &mut Stream,
) -> Result<DistanceResult, ChemDistError> {
    let sx = round_to_graph(x, g, stream)?;
    let sy = round_to_graph(y, g, stream)?;
    Ok(distance_between_vertices(g, sx, sy))
}

/// BFS between two vertices already known to be in the graph.
pub fn distance_between_vertices(
    g: &InterlacementGraph,
    sx: Point,
    sy: Point,
) -> DistanceResult {
    let mut truncated = touches_clip_boundary(g, &sx) || touches_clip_boundary(g, &sy);
    if sx == sy {
        return DistanceResult {
            distance: Some(0),
            source_used: sx,
            target_used: sy,
            frontier_truncated: truncated,
        };
    }
    let mut a = BfsSide::new(sx);
    let mut b = BfsSide::new(sy);
    let mut best = u64::MAX;
    let mut nbrs: Vec<Point> = Vec::with_capacity(2 * g.dim());
    while !a.frontier.is_empty() && !b.frontier.is_empty() {
        if best <= (a.radius + b.radius) as u64 {
            break;
        }
        // expand the smaller frontier
        let (this, other) = if a.frontier.len() <= b.frontier.len() {
            (&mut a, &mut b)
        } else {
            (&mut b, &mut a)
        };
        let mut next = Vec::new();
        for v in std::mem::take(&mut this.frontier) {
            g.graph_neighbours(&v, &mut nbrs);
            for &nb in nbrs.iter() {
                if this.dist.contains_key(&nb) {
                    continue;
                }
                this.dist.insert(nb, this.radius + 1);
                if touches_clip_boundary(g, &nb) {
                    truncated = true;
                }
                if let Some(&od) = other.dist.get(&nb) {
                    let cand = (this.radius + 1 + od) as u64;
                    best = best.min(cand);
                }
                next.push(nb);
            }
        }
        this.frontier = next;
        this.radius += 1;
    }
    DistanceResult {
        distance: if best == u64::MAX { None } else { Some(best) },
        source_used: sx,
        target_used: sy,
        frontier_truncated: truncated,
    }
}

/// Unidirectional BFS with parent tracking; returns the vertex path.
/// Costlier than the bidirectional query, used where the path itself is
/// wanted (demos, diagnostics).
pub fn shortest_path_vertices(
    g: &InterlacementGraph,
    sx: Point,
    sy: Point,
) -> Option<Vec<Point>> {
    if sx == sy {
        return Some(vec![sx]);
    }
    let mut parent: FxHashMap<Point, Point> = FxHashMap::default();
    parent.insert(sx, sx);
    let mut frontier = vec![sx];
    let mut nbrs = Vec::with_capacity(2 * g.dim());
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for v in frontier {
            g.graph_neighbours(&v, &mut nbrs);
            for &nb in nbrs.iter() {
                if parent.contains_key(&nb) {
                    continue;
                }
                parent.insert(nb, v);
                if nb == sy {
                    let mut path = vec![sy];
                    let mut cur = sy;
                    while cur != sx {
                        cur = parent[&cur];
                        path.push(cur);
                    }
                    path.reverse();
                    return Some(path);
                }
                next.push(nb);
            }
        }
        frontier = next;
    }
    None
}

/// Multi-source BFS from every graph vertex on the outer vertex boundary of
/// `inner` to the first graph vertex on the outer vertex boundary of `outer`.
pub fn boundary_distance(
    g: &InterlacementGraph,
    inner: &LatticeBox,
    outer: &LatticeBox,
) -> BoundaryDistance {
    assert!(inner.half_width < outer.half_width);
    let sources: Vec<Point> = inner
        .boundary(BoundarySide::Outer)
        .into_iter()
        .filter(|p| g.has_vertex(p))
        .collect();
    if sources.is_empty() {
        return BoundaryDistance::NoInnerVertex;
    }
    let targets: Vec<Point> = outer
        .boundary(BoundarySide::Outer)
        .into_iter()
        .filter(|p| g.has_vertex(p))
        .collect();
    if targets.is_empty() {
        return BoundaryDistance::NoOuterVertex;
    }
    let target_set: crate::util::FxHashSet<Point> = targets.into_iter().collect();
    if sources.iter().any(|p| target_set.contains(p)) {
        return BoundaryDistance::Distance(0);
    }
    let mut dist: FxHashMap<Point, u32> = FxHashMap::default();
    let mut frontier = Vec::new();
    for s in sources {
        dist.insert(s, 0);
        frontier.push(s);
    }
    let mut level = 0u64;
    let mut nbrs = Vec::with_capacity(2 * g.dim());
    while !frontier.is_empty() {
        let mut next = Vec::new();
        level += 1;
        for v in frontier {
            g.graph_neighbours(&v, &mut nbrs);
            for &nb in nbrs.iter() {
                if dist.contains_key(&nb) {
                    continue;
                }
                if target_set.contains(&nb) {
                    return BoundaryDistance::Distance(level);
                }
                dist.insert(nb, level as u32);
                next.push(nb);
            }
        }
        frontier = next;
    }
    BoundaryDistance::Unreachable
}

// ---------------------------------------------------------------------------
// scaling experiment
// ---------------------------------------------------------------------------

/// One repetition of the endpoint-distance experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingRow {
    pub u: f64,
    pub n: u64,
    pub rep: u32,
    pub distance: Option<u64>,
    pub truncated: bool,
    pub unreachable: bool,
    pub source_used: Point,
    pub target_used: Point,
}

/// Aggregated row of the time-constant table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeConstRow {
    pub u: f64,
    pub n: u64,
    /// Mean of distance / (n * l_scale) over clean reps.
    pub mean_normalized: f64,
    pub std_error: f64,
    pub used_reps: u32,
    pub discarded: u32,
}

/// Parameters of the scaling experiment. `l_scale` is the endpoint spacing
/// unit L: the measured distance is d_u([0], [n L e1]) in a window of
/// half-width 2 n L centred between the endpoints. The default L = 2 keeps
/// the densest grid point (u = 0.05) around 5e7 window vertices, the memory
/// ceiling at desk scale.
#[derive(Clone, Debug)]
pub struct ScalingParams {
    pub d: usize,
    pub l_scale: u32,
    pub policy: EscapePolicy,
    pub seed: u64,
    pub threads: usize,
}

impl ScalingParams {
    pub fn new(d: usize, seed: u64) -> Self {
        ScalingParams {
            d,
            l_scale: 2,
            policy: EscapePolicy::default(),
            seed,
            threads: 1,
        }
    }
}

/// Run `reps` repetitions at every (u, n) of the grids. Failures are tallied
/// per row, never thrown. The equilibrium table for each window shape is
/// built once and shared across reps (translation covariance).
pub fn scaling_experiment(
    params: &ScalingParams,
    u_grid: &[f64],
    n_grid: &[u64],
    reps: u32,
) -> Result<Vec<ScalingRow>, ChemDistError> {
    let d = params.d;
    let key = StreamKey::root(params.seed);
    let mut tables: FxHashMap<u32, crate::capacity::EquilibriumTable> = FxHashMap::default();
    let mut rows = Vec::new();
    for (ui, &u) in u_grid.iter().enumerate() {
        for (ni, &n) in n_grid.iter().enumerate() {
            let sep = n * params.l_scale as u64;
            let half = (2 * sep).max(4) as u32;
            if !tables.contains_key(&half) {
                let canonical = LatticeBox::new(Point::origin(d), half);
                let t = window_table(d, &canonical, &params.policy, &key, params.threads)?;
                tables.insert(half, t);
            }
            let table = &tables[&half];
            let batch: Vec<ScalingRow> = indexed_map(params.threads, reps as usize, |rep| {
                let rep_seed_key = key
                    .child("scal-u", ui as u64)
                    .child("n", ni as u64)
                    .child("rep", rep as u64);
                run_scaling_rep(
                    d, u, n, sep, half, params, table, &rep_seed_key, rep as u32,
                )
            });
            rows.extend(batch);
        }
    }
    Ok(rows)
}

fn run_scaling_rep(
    d: usize,
    u: f64,
    n: u64,
    sep: u64,
    half: u32,
    params: &ScalingParams,
    table: &crate::capacity::EquilibriumTable,
    rep_key: &StreamKey,
    rep: u32,
) -> ScalingRow {
    let centre = Point::unit(d, 0, (sep / 2) as i32);
    let window = LatticeBox::new(centre, half);
    // derive a per-rep seed for the config sampler
    let seed = {
        use rand::Rng;
        rep_key.child("cfg-seed", 0).stream().gen::<u64>()
    };
    let cfg = sample_config_with_table(d, u, window, &params.policy, seed, table, 1)
        .expect("validated parameters");
    let g = build_graph_lean(&cfg, Some(window)).expect("window fits the frame");
    let from = Point::origin(d);
    let to = Point::unit(d, 0, sep as i32);
    let mut tie_stream = rep_key.child("tie", 0).stream();
    match chemical_distance(&g, &from, &to, &mut tie_stream) {
        Ok(res) => ScalingRow {
            u,
            n,
            rep,
            distance: res.distance,
            truncated: res.frontier_truncated,
            unreachable: res.distance.is_none(),
            source_used: res.source_used,
            target_used: res.target_used,
        },
        Err(_) => ScalingRow {
            u,
            n,
            rep,
            distance: None,
            truncated: false,
            unreachable: true,
            source_used: from,
            target_used: to,
        },
    }
}

/// Aggregate scaling rows into the normalized time-constant table, dropping
/// truncated and unreachable reps (their count is reported).
pub fn aggregate_time_constant(rows: &[ScalingRow], l_scale: u32) -> Vec<TimeConstRow> {
    let mut groups: Vec<(f64, u64)> = rows.iter().map(|r| (r.u, r.n)).collect();
    groups.sort_by(|a, b| a.partial_cmp(b).unwrap());
    groups.dedup();
    let mut out = Vec::new();
    for (u, n) in groups {
        let all: Vec<&ScalingRow> = rows
            .iter()
            .filter(|r| r.u == u && r.n == n)
            .collect();
        let clean: Vec<f64> = all
            .iter()
            .filter(|r| !r.truncated && !r.unreachable)
            .map(|r| r.distance.unwrap() as f64 / (n * l_scale as u64) as f64)
            .collect();
        let used = clean.len() as u32;
        let discarded = all.len() as u32 - used;
        if used == 0 {
            out.push(TimeConstRow {
                u,
                n,
                mean_normalized: f64::NAN,
                std_error: f64::NAN,
                used_reps: 0,
                discarded,
            });
            continue;
        }
        let mean = clean.iter().sum::<f64>() / used as f64;
        let var = clean.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (used as f64 - 1.0).max(1.0);
        out.push(TimeConstRow {
            u,
            n,
            mean_normalized: mean,
            std_error: (var / used as f64).sqrt(),
            used_reps: used,
            discarded,
        });
    }
    out
}

/// The per-operation convenience wrapper: one intensity, a grid of n.
pub fn time_constant_estimate(
    params: &ScalingParams,
    u: f64,
    n_grid: &[u64],
    reps: u32,
) -> Result<Vec<TimeConstRow>, ChemDistError> {
    let rows = scaling_experiment(params, &[u], n_grid, reps)?;
    Ok(aggregate_time_constant(&rows, params.l_scale))
}

/// Least-squares slope of log(mean) against log(u); the scaling exponent.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..points.len() {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    num / den
}
