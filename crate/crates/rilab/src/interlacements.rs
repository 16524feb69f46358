//! Local construction of random interlacements meeting a finite window, and
//! assembly of the traversed-edge graph.
//!
//! Sampling follows the local description of the process: the number of
//! trajectories meeting a window K is Poisson with mean u * cap(K); each
//! starts on the inner boundary of K with the normalized equilibrium measure
//! as entrance law and runs as a simple random walk, truncated by the escape
//! policy and clipped at its last window visit. Only the forward part from
//! first entrance is simulated: conditioned on never returning to K, the
//! backward half of a doubly-infinite trajectory contributes nothing inside
//! the window, so window-internal observables are exact, not approximated.
//!
//! Each trajectory carries a level mark, i.i.d. uniform on (0, u]: keeping
//! the trajectories with mark <= u' < u reproduces the lower-intensity
//! process on the same probability space, which makes the monotone coupling
//! (edge sets only ever grow with u) constructive and testable.

use crate::capacity::{
    estimate_equilibrium, CapacityError, CapacityEstimate, EquilibriumTable, SetSpec,
};
use crate::lattice::{Edge, LatticeBox, Point, MAX_DIM};
use crate::randomness::{sample_poisson, StreamKey};
use crate::util::{indexed_map, FxHashMap, FxHashSet};
use crate::walk::{truncated_trajectory, EscapePolicy, WalkPath};
use smallvec::SmallVec;

#[derive(Debug, thiserror::Error)]
pub enum InterlacementError {
    #[error("intensity u must be finite and >= 0, got {0}")]
    BadIntensity(f64),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error("snapshot format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph window too large to index (extent {0} per axis)")]
    WindowTooLarge(u64),
}

fn format_err<T>(offset: usize, reason: impl Into<String>) -> Result<T, InterlacementError> {
    Err(InterlacementError::Format {
        offset,
        reason: reason.into(),
    })
}

/// One labelled trajectory of the soup.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub label: u32,
    /// Level mark in (0, u]; the trajectory belongs to every intensity
    /// level u' >= mark.
    pub level_mark: f64,
    pub path: WalkPath,
    pub cap_truncated: bool,
}

/// A sampled interlacement configuration restricted to a window.
#[derive(Clone, Debug)]
pub struct InterlacementConfig {
    pub d: usize,
    pub u: f64,
    pub window: LatticeBox,
    pub seed: u64,
    pub policy: EscapePolicy,
    pub cap_estimate_used: CapacityEstimate,
    pub trajectories: Vec<Trajectory>,
}

/// Number of equilibrium walks per site used when building sampling tables,
/// scaled so the total walk budget stays near 2^20 regardless of window size.
pub fn default_table_walks(orbit_count: usize) -> u32 {
    ((1u64 << 20) / orbit_count.max(1) as u64).clamp(8, 4096) as u32
}

/// Sample a configuration at intensity `u` in `window`.
///
/// Fully determined by (seed, parameters): the capacity table, the Poisson
/// count and every trajectory use separate derived streams, so trajectory i
/// is identical across runs and thread counts.
pub fn sample_config(
    d: usize,
    u: f64,
    window: LatticeBox,
    policy: &EscapePolicy,
    seed: u64,
    threads: usize,
) -> Result<InterlacementConfig, InterlacementError> {
    if !u.is_finite() || u < 0.0 {
        return Err(InterlacementError::BadIntensity(u));
    }
    let key = StreamKey::root(seed);
    let table = window_table(d, &window, policy, &key, threads)?;
    sample_config_with_table(d, u, window, policy, seed, &table, threads)
}

/// Equilibrium table for a window (callers may cache and reuse across reps;
/// the table depends only on (d, half_width, policy, key) up to translation).
pub fn window_table(
    d: usize,
    window: &LatticeBox,
    policy: &EscapePolicy,
    key: &StreamKey,
    threads: usize,
) -> Result<EquilibriumTable, InterlacementError> {
    let r = window.half_width as usize;
    let orbit_count = binomial(r + d - 2, d - 1);
    let walks = default_table_walks(orbit_count);
    Ok(estimate_equilibrium(
        &SetSpec::Box(*window),
        policy,
        walks,
        &key.child("window-table", 0),
        threads,
    )?)
}

fn binomial(n: usize, k: usize) -> usize {
    let mut v = 1f64;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v.round() as usize
}

/// As [`sample_config`], with a caller-provided equilibrium table for the
/// window (must have been built for a box of the same half-width; the table
/// is used both for the Poisson mean and the entrance law).
pub fn sample_config_with_table(
    d: usize,
    u: f64,
    window: LatticeBox,
    policy: &EscapePolicy,
    seed: u64,
    table: &EquilibriumTable,
    threads: usize,
) -> Result<InterlacementConfig, InterlacementError> {
    if !u.is_finite() || u < 0.0 {
        return Err(InterlacementError::BadIntensity(u));
    }
    let key = StreamKey::root(seed);
    let cap = table.to_estimate();
    let mean = u * cap.value;
    let mut count_stream = key.child("traj-count", 0).stream();
    let n = sample_poisson(&mut count_stream, mean).expect("mean is nonneg");

    // equilibrium is translation covariant: a table built for a congruent
    // box at another centre is reused by shifting the sampled starts
    let offset = table.base_box().map(|b| {
        assert_eq!(b.half_width, window.half_width, "table built for another window shape");
        window.center.sub(&b.center)
    });

    let trajectories: Vec<Trajectory> = indexed_map(threads, n as usize, |i| {
        let tkey = key.child("traj", i as u64);
        let mut s = tkey.stream();
        let mut start = table
            .sample_start(&mut s)
            .expect("window table has positive mass");
        if let Some(off) = &offset {
            start = start.add(off);
        }
        let out = truncated_trajectory(&mut s, start, &window, policy);
        let level_mark = {
            use rand::Rng;
            let x: f64 = s.gen::<f64>();
            // uniform on (0, u]; flip so 0 is excluded
            u * (1.0 - x)
        };
        Trajectory {
            label: i as u32,
            level_mark,
            path: out.path,
            cap_truncated: out.cap_truncated,
        }
    });

    Ok(InterlacementConfig {
        d,
        u,
        window,
        seed,
        policy: *policy,
        cap_estimate_used: cap,
        trajectories,
    })
}

impl InterlacementConfig {
    /// The monotone coupling: keep trajectories with level mark <= u_prime.
    /// For u_prime <= u this is the lower-intensity process on the same
    /// probability space; labels are preserved.
    pub fn restrict_to_level(&self, u_prime: f64) -> InterlacementConfig {
        let mut cfg = self.clone();
        cfg.u = u_prime;
        cfg.trajectories.retain(|t| t.level_mark <= u_prime);
        cfg
    }

    pub fn paths(&self) -> Vec<&WalkPath> {
        self.trajectories.iter().map(|t| &t.path).collect()
    }

    /// Hand-build a configuration from explicit paths (tests, demos, and the
    /// engineered-config exploration variant).
    pub fn from_paths(d: usize, window: LatticeBox, paths: Vec<WalkPath>) -> InterlacementConfig {
        let trajectories = paths
            .into_iter()
            .enumerate()
            .map(|(i, path)| Trajectory {
                label: i as u32,
                level_mark: 0.5,
                path,
                cap_truncated: false,
            })
            .collect();
        InterlacementConfig {
            d,
            u: 1.0,
            window,
            seed: 0,
            policy: EscapePolicy::default(),
            cap_estimate_used: CapacityEstimate {
                value: 1.0,
                std_error: 0.0,
                escape_factor: 4.0,
                walks_per_site: 1,
            },
            trajectories,
        }
    }
}

// ---------------------------------------------------------------------------
// graph assembly
// ---------------------------------------------------------------------------

/// Packing frame: maps points of a bounded region to u64 keys (per-axis
/// offsets of `bits` bits each; edge keys add the axis in the top bits).
#[derive(Clone, Copy, Debug)]
struct Frame {
    low: [i32; MAX_DIM],
    bits: u32,
    d: usize,
}

impl Frame {
    fn build(d: usize, low: [i32; MAX_DIM], extent: u64) -> Result<Frame, InterlacementError> {
        let mut bits = 1;
        while (1u64 << bits) < extent + 2 {
            bits += 1;
        }
        if bits as usize * d + 4 > 64 {
            return Err(InterlacementError::WindowTooLarge(extent));
        }
        Ok(Frame { low, bits, d })
    }

    #[inline]
    fn pack(&self, p: &Point) -> Option<u64> {
        let mut key = 0u64;
        for i in 0..self.d {
            let off = (p.coord(i) - self.low[i]) as i64;
            if off < 0 || off >= (1i64 << self.bits) {
                return None;
            }
            key |= (off as u64) << (self.bits as u64 * i as u64);
        }
        Some(key)
    }

    #[inline]
    fn unpack(&self, key: u64) -> Point {
        let mask = (1u64 << self.bits) - 1;
        let mut p = Point::origin(self.d);
        for i in 0..self.d {
            let off = (key >> (self.bits as u64 * i as u64)) & mask;
            p = p.with_coord(i, self.low[i] + off as i32);
        }
        p
    }

    /// Edge key: packed smaller endpoint plus axis in the top bits.
    #[inline]
    fn pack_edge(&self, e: &Edge) -> Option<u64> {
        let base = self.pack(&e.a)?;
        Some(base | (e.axis() as u64) << 60)
    }
}

type LabelSet = SmallVec<[u32; 2]>;

/// The interlacement graph: union of trajectory ranges (vertices) and traces
/// (edges), optionally clipped to a box. Edge label sets record which
/// trajectories traversed each edge; lean mode drops them (the big scaling
/// windows need the savings).
pub struct InterlacementGraph {
    frame: Frame,
    pub clip: Option<LatticeBox>,
    vertices: Vec<u64>, // sorted packed points
    edges: Vec<u64>,    // sorted packed edge keys
    labels: Option<FxHashMap<u64, LabelSet>>,
}

impl InterlacementGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    #[inline]
    pub fn has_vertex(&self, p: &Point) -> bool {
        match self.frame.pack(p) {
            Some(k) => self.vertices.binary_search(&k).is_ok(),
            None => false,
        }
    }

    #[inline]
    pub fn has_edge(&self, e: &Edge) -> bool {
        match self.frame.pack_edge(e) {
            Some(k) => self.edges.binary_search(&k).is_ok(),
            None => false,
        }
    }

    pub fn edge_labels(&self, e: &Edge) -> Option<&[u32]> {
        let labels = self.labels.as_ref()?;
        let k = self.frame.pack_edge(e)?;
        labels.get(&k).map(|v| v.as_slice())
    }

    pub fn iter_vertices(&self) -> impl Iterator<Item = Point> + '_ {
        self.vertices.iter().map(move |&k| self.frame.unpack(k))
    }

    pub fn iter_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(move |&k| {
            let a = self.frame.unpack(k & ((1u64 << 60) - 1));
            let axis = (k >> 60) as usize;
            Edge::new(a, a.step(axis, true))
        })
    }

    /// Sorted packed edge keys; equality of edge sets is equality of these.
    pub fn edge_keys(&self) -> &[u64] {
        &self.edges
    }

    /// Neighbours of `p` along present edges, in a fixed axis order.
    pub fn graph_neighbours(&self, p: &Point, out: &mut Vec<Point>) {
        out.clear();
        for axis in 0..self.frame.d {
            for positive in [true, false] {
                let q = p.step(axis, positive);
                let e = Edge::new(*p, q);
                if self.has_edge(&e) {
                    out.push(q);
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.frame.d
    }
}

/// Assemble the graph from a configuration, optionally clipped to `clip`,
/// with per-edge label sets.
pub fn build_graph(
    cfg: &InterlacementConfig,
    clip: Option<LatticeBox>,
) -> Result<InterlacementGraph, InterlacementError> {
    build_graph_inner(cfg, clip, true)
}

/// Label-free graph (smaller; used by the scaling experiments).
pub fn build_graph_lean(
    cfg: &InterlacementConfig,
    clip: Option<LatticeBox>,
) -> Result<InterlacementGraph, InterlacementError> {
    build_graph_inner(cfg, clip, false)
}

fn build_graph_inner(
    cfg: &InterlacementConfig,
    clip: Option<LatticeBox>,
    with_labels: bool,
) -> Result<InterlacementGraph, InterlacementError> {
    let d = cfg.d;
    // frame covers the clip box if given, else the union of path bounding boxes
    let (low, extent) = match clip {
        Some(b) => {
            let mut low = [0i32; MAX_DIM];
            low[..d].copy_from_slice(&b.low().coords()[..d]);
            (low, 2 * b.half_width as u64)
        }
        None => {
            let mut low = [i32::MAX; MAX_DIM];
            let mut high = [i32::MIN; MAX_DIM];
            for t in &cfg.trajectories {
                for p in t.path.points() {
                    for i in 0..d {
                        low[i] = low[i].min(p.coord(i));
                        high[i] = high[i].max(p.coord(i));
                    }
                }
            }
            if cfg.trajectories.is_empty() {
                low = [0; MAX_DIM];
                high = [0; MAX_DIM];
            }
            let extent = (0..d)
                .map(|i| (high[i] - low[i]) as u64)
                .max()
                .unwrap_or(0);
            (low, extent)
        }
    };
    let frame = Frame::build(d, low, extent.max(1))?;

    let mut vertices: Vec<u64> = Vec::new();
    let mut edges: Vec<u64> = Vec::new();
    let mut labels: FxHashMap<u64, LabelSet> = FxHashMap::default();
    let inside = |p: &Point| clip.map_or(true, |b| b.contains(p));

    for t in &cfg.trajectories {
        let mut prev: Option<Point> = None;
        for p in t.path.points() {
            let p_in = inside(&p);
            if p_in {
                if let Some(k) = frame.pack(&p) {
                    vertices.push(k);
                }
            }
            if let Some(q) = prev {
                if p_in && inside(&q) {
                    let e = Edge::new(q, p);
                    if let Some(k) = frame.pack_edge(&e) {
                        edges.push(k);
                        if with_labels {
                            let set = labels.entry(k).or_default();
                            if !set.contains(&t.label) {
                                set.push(t.label);
                            }
                        }
                    }
                }
            }
            prev = Some(p);
        }
    }
    vertices.sort_unstable();
    vertices.dedup();
    edges.sort_unstable();
    edges.dedup();
    if with_labels {
        for set in labels.values_mut() {
            set.sort_unstable();
        }
    }

    Ok(InterlacementGraph {
        frame,
        clip,
        vertices,
        edges,
        labels: if with_labels { Some(labels) } else { None },
    })
}

// ---------------------------------------------------------------------------
// snapshot format
// ---------------------------------------------------------------------------
// magic "RILB", version u16 = 1, d u8, u f64, seed u64, window centre d*i32,
// window half-width u32, cap estimate f64, trajectory count u32; then per
// trajectory: label u32, level mark f64, start d*i32, step count u32, steps
// one byte each (bits 0-6 axis, bit 7 = negative direction). Little-endian.

const MAGIC: &[u8; 4] = b"RILB";
const VERSION: u16 = 1;

pub fn serialize_config(cfg: &InterlacementConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cfg.d as u8);
    out.extend_from_slice(&cfg.u.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    for i in 0..cfg.d {
        out.extend_from_slice(&cfg.window.center.coord(i).to_le_bytes());
    }
    out.extend_from_slice(&cfg.window.half_width.to_le_bytes());
    out.extend_from_slice(&cfg.cap_estimate_used.value.to_le_bytes());
    out.extend_from_slice(&(cfg.trajectories.len() as u32).to_le_bytes());
    for t in &cfg.trajectories {
        out.extend_from_slice(&t.label.to_le_bytes());
        out.extend_from_slice(&t.level_mark.to_le_bytes());
        for i in 0..cfg.d {
            out.extend_from_slice(&t.path.start().coord(i).to_le_bytes());
        }
        out.extend_from_slice(&(t.path.len() as u32).to_le_bytes());
        out.extend_from_slice(t.path.steps());
    }
    out
}

pub fn save_config(
    cfg: &InterlacementConfig,
    path: &std::path::Path,
) -> Result<(), InterlacementError> {
    std::fs::write(path, serialize_config(cfg))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], InterlacementError> {
        if self.pos + n > self.buf.len() {
            return format_err(self.pos, format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16, InterlacementError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, InterlacementError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn i32(&mut self, what: &str) -> Result<i32, InterlacementError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, InterlacementError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, InterlacementError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn deserialize_config(buf: &[u8]) -> Result<InterlacementConfig, InterlacementError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return format_err(0, "bad magic");
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return format_err(4, format!("unsupported version {version}"));
    }
    let d = r.take(1, "dimension")?[0] as usize;
    if d == 0 || d > MAX_DIM {
        return format_err(6, format!("dimension {d} out of range"));
    }
    let u = r.f64("intensity")?;
    let seed = r.u64("seed")?;
    let mut centre = Point::origin(d);
    for i in 0..d {
        centre = centre.with_coord(i, r.i32("window centre")?);
    }
    let half_width = r.u32("window half-width")?;
    if half_width == 0 {
        return format_err(r.pos - 4, "window half-width must be >= 1");
    }
    let cap_value = r.f64("capacity estimate")?;
    let count = r.u32("trajectory count")?;
    let mut trajectories = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let label = r.u32("trajectory label")?;
        let level_mark = r.f64("level mark")?;
        let mut start = Point::origin(d);
        for i in 0..d {
            start = start.with_coord(i, r.i32("trajectory start")?);
        }
        let steps = r.u32("step count")? as usize;
        let step_pos = r.pos;
        let bytes = r.take(steps, "steps")?;
        let mut path = WalkPath::new(0, start);
        for (j, &b) in bytes.iter().enumerate() {
            let (axis, neg) = crate::walk::decode_step(b);
            if axis >= d {
                return format_err(step_pos + j, format!("step axis {axis} out of range"));
            }
            path.push(axis, neg);
        }
        trajectories.push(Trajectory {
            label,
            level_mark,
            path,
            cap_truncated: false,
        });
    }
    if r.pos != buf.len() {
        return format_err(r.pos, "trailing bytes");
    }
    Ok(InterlacementConfig {
        d,
        u,
        window: LatticeBox::new(centre, half_width),
        seed,
        policy: EscapePolicy::default(),
        cap_estimate_used: CapacityEstimate {
            value: cap_value,
            std_error: 0.0,
            escape_factor: 0.0,
            walks_per_site: 0,
        },
        trajectories,
    })
}

pub fn load_config(path: &std::path::Path) -> Result<InterlacementConfig, InterlacementError> {
    let buf = std::fs::read(path)?;
    deserialize_config(&buf)
}
