//! Geometry of Z^d: points, norms, half-closed boxes, boundaries, and the
//! renormalized *-connected planar grid.
//!
//! Boxes are half-closed: `B_z(r) = z + [-r, r)^d`, so `|B_z(r)| = (2r)^d`
//! exactly and the reflection `t -> -1 - t` (about the continuous centre
//! `z - 1/2`) is a symmetry of the box in every coordinate.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Hard cap on the runtime dimension. Experiments use d = 5; d in {2,3,4}
/// is kept around for cheap debugging and low-dimensional tests.
pub const MAX_DIM: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("dimension {0} out of range 1..={MAX_DIM}")]
    BadDimension(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("box half-width must be >= 1, got {0}")]
    BadHalfWidth(i64),
}

/// A point of Z^d with runtime dimension d <= [`MAX_DIM`].
///
/// Coordinates are 32-bit: desk-scale windows never leave +-2e9, and the
/// narrow type halves the footprint of point-keyed maps in d = 5.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    d: u8,
    c: [i32; MAX_DIM],
}

impl Point {
    pub fn new(coords: &[i32]) -> Self {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_DIM,
            "dimension {} out of range",
            coords.len()
        );
        let mut c = [0i32; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Point {
            d: coords.len() as u8,
            c,
        }
    }

    /// Origin of Z^d.
    pub fn origin(d: usize) -> Self {
        assert!(d >= 1 && d <= MAX_DIM);
        Point {
            d: d as u8,
            c: [0; MAX_DIM],
        }
    }

    /// `k * e_axis` (scaled unit vector).
    pub fn unit(d: usize, axis: usize, k: i32) -> Self {
        let mut p = Point::origin(d);
        assert!(axis < d);
        p.c[axis] = k;
        p
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i32] {
        &self.c[..self.d as usize]
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> i32 {
        debug_assert!(axis < self.dim());
        self.c[axis]
    }

    #[inline]
    pub fn with_coord(mut self, axis: usize, v: i32) -> Self {
        debug_assert!(axis < self.dim());
        self.c[axis] = v;
        self
    }

    /// Nearest-neighbour step `self +- e_axis`.
    #[inline]
    pub fn step(mut self, axis: usize, positive: bool) -> Self {
        debug_assert!(axis < self.dim());
        if positive {
            self.c[axis] += 1;
        } else {
            self.c[axis] -= 1;
        }
        self
    }

    pub fn add(&self, other: &Point) -> Point {
        debug_assert_eq!(self.d, other.d);
        let mut p = *self;
        for i in 0..self.dim() {
            p.c[i] += other.c[i];
        }
        p
    }

    pub fn sub(&self, other: &Point) -> Point {
        debug_assert_eq!(self.d, other.d);
        let mut p = *self;
        for i in 0..self.dim() {
            p.c[i] -= other.c[i];
        }
        p
    }

    /// l^1 norm.
    pub fn norm_l1(&self) -> u64 {
        self.coords().iter().map(|&x| x.unsigned_abs() as u64).sum()
    }

    /// l^infinity norm.
    pub fn norm_linf(&self) -> u32 {
        self.coords().iter().map(|&x| x.unsigned_abs()).max().unwrap_or(0)
    }

    /// l^2 norm, as a float.
    pub fn norm_l2(&self) -> f64 {
        (self.norm_l2_sq() as f64).sqrt()
    }

    /// Squared l^2 norm (exact integer).
    pub fn norm_l2_sq(&self) -> u64 {
        self.coords()
            .iter()
            .map(|&x| (x as i64 * x as i64) as u64)
            .sum()
    }

    pub fn dist_l1(&self, other: &Point) -> u64 {
        debug_assert_eq!(self.d, other.d);
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs())
            .sum()
    }

    pub fn dist_linf(&self, other: &Point) -> u64 {
        debug_assert_eq!(self.d, other.d);
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    /// Iterate the 2d nearest neighbours in a fixed order
    /// (+e_0, -e_0, +e_1, -e_1, ...).
    pub fn neighbours(&self) -> impl Iterator<Item = Point> + '_ {
        let d = self.dim();
        (0..2 * d).map(move |k| self.step(k / 2, k % 2 == 0))
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.coords().iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
    }
}

impl Serialize for Point {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let v = Vec::<i32>::deserialize(de)?;
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(serde::de::Error::custom("point dimension out of range"));
        }
        Ok(Point::new(&v))
    }
}

/// Norm selector mirroring the three norms used throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    Linf,
}

pub fn norm(p: &Point, kind: NormKind) -> f64 {
    match kind {
        NormKind::L1 => p.norm_l1() as f64,
        NormKind::L2 => p.norm_l2(),
        NormKind::Linf => p.norm_linf() as f64,
    }
}

/// Half-closed box `B_z(r) = z + [-r, r)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeBox {
    pub center: Point,
    pub half_width: u32,
}

/// Which vertex boundary of a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundarySide {
    /// Points of the box with a neighbour outside.
    Inner,
    /// Points outside the box with a neighbour inside.
    Outer,
}

impl LatticeBox {
    pub fn new(center: Point, half_width: u32) -> Self {
        assert!(half_width >= 1, "box half-width must be >= 1");
        LatticeBox { center, half_width }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        debug_assert_eq!(self.dim(), p.dim());
        let r = self.half_width as i64;
        for i in 0..self.dim() {
            let t = p.c[i] as i64 - self.center.c[i] as i64;
            if t < -r || t >= r {
                return false;
            }
        }
        true
    }

    /// Low corner (inclusive) of the box.
    pub fn low(&self) -> Point {
        let mut p = self.center;
        for i in 0..self.dim() {
            p.c[i] -= self.half_width as i32;
        }
        p
    }

    /// High corner (exclusive).
    pub fn high(&self) -> Point {
        let mut p = self.center;
        for i in 0..self.dim() {
            p.c[i] += self.half_width as i32;
        }
        p
    }

    /// Exact cardinality `(2r)^d`, or `None` on overflow.
    pub fn volume(&self) -> Option<u128> {
        let side = 2u128 * self.half_width as u128;
        let mut v: u128 = 1;
        for _ in 0..self.dim() {
            v = v.checked_mul(side)?;
        }
        Some(v)
    }

    /// Squared l^2 distance from `p` to the solid box (0 when inside),
    /// measured to the nearest lattice point of the box.
    pub fn dist_l2_sq(&self, p: &Point) -> u64 {
        let r = self.half_width as i64;
        let mut s: u64 = 0;
        for i in 0..self.dim() {
            let t = p.c[i] as i64 - self.center.c[i] as i64;
            let excess = if t < -r {
                -r - t
            } else if t > r - 1 {
                t - (r - 1)
            } else {
                0
            };
            s += (excess * excess) as u64;
        }
        s
    }

    /// Is `p` contained in `B(center, factor * half_width)`? Cheap per-axis test.
    #[inline]
    pub fn contains_scaled(&self, p: &Point, factor: u32) -> bool {
        let r = (self.half_width as i64) * factor as i64;
        for i in 0..self.dim() {
            let t = p.c[i] as i64 - self.center.c[i] as i64;
            if t < -r || t >= r {
                return false;
            }
        }
        true
    }

    /// Enumerate every point of the box in lexicographic order.
    /// Intended for small boxes only (tests, boundaries of small windows).
    pub fn iter_points(&self) -> BoxPointIter {
        BoxPointIter {
            bx: *self,
            cur: self.low(),
            done: false,
        }
    }

    /// Vertex boundary of the box, enumerated deterministically
    /// (lexicographic order).
    ///
    /// Inner boundary points have some coordinate at an extreme of the range;
    /// outer boundary points have exactly one coordinate out of range by one.
    pub fn boundary(&self, side: BoundarySide) -> Vec<Point> {
        let mut out = Vec::new();
        let d = self.dim();
        let r = self.half_width as i64;
        match side {
            BoundarySide::Inner => {
                if 2 * r <= 2 {
                    // every point of a side-2 box touches the complement
                    return self.iter_points().collect();
                }
                // points with at least one coordinate at -r or r-1
                for p in self.iter_points() {
                    let mut on_face = false;
                    for i in 0..d {
                        let t = p.c[i] as i64 - self.center.c[i] as i64;
                        if t == -r || t == r - 1 {
                            on_face = true;
                            break;
                        }
                    }
                    if on_face {
                        out.push(p);
                    }
                }
            }
            BoundarySide::Outer => {
                // exactly one coordinate out of range, by exactly one
                for axis in 0..d {
                    for &side_val in &[-r - 1, r] {
                        for p in FacePointIter::new(self, axis) {
                            let mut q = p;
                            q.c[axis] = (self.center.c[axis] as i64 + side_val) as i32;
                            out.push(q);
                        }
                    }
                }
                out.sort_unstable();
            }
        }
        out
    }
}

/// Lexicographic iterator over the points of a box.
pub struct BoxPointIter {
    bx: LatticeBox,
    cur: Point,
    done: bool,
}

impl Iterator for BoxPointIter {
    type Item = Point;
    fn next(&mut self) -> Option<Point> {
        if self.done {
            return None;
        }
        let out = self.cur;
        // advance like an odometer, last axis fastest
        let d = self.bx.dim();
        let mut i = d;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.cur.c[i] += 1;
            let hi = self.bx.center.c[i] + self.bx.half_width as i32;
            if self.cur.c[i] < hi {
                break;
            }
            self.cur.c[i] = self.bx.center.c[i] - self.bx.half_width as i32;
        }
        Some(out)
    }
}

/// Iterates the points of a box with one axis pinned (used for outer faces).
struct FacePointIter {
    bx: LatticeBox,
    skip_axis: usize,
    cur: Point,
    done: bool,
}

impl FacePointIter {
    fn new(bx: &LatticeBox, skip_axis: usize) -> Self {
        FacePointIter {
            bx: *bx,
            skip_axis,
            cur: bx.low(),
            done: false,
        }
    }
}

impl Iterator for FacePointIter {
    type Item = Point;
    fn next(&mut self) -> Option<Point> {
        if self.done {
            return None;
        }
        let out = self.cur;
        let d = self.bx.dim();
        let mut i = d;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if i == self.skip_axis {
                if i == 0 {
                    self.done = true;
                    break;
                }
                continue;
            }
            self.cur.c[i] += 1;
            let hi = self.bx.center.c[i] + self.bx.half_width as i32;
            if self.cur.c[i] < hi {
                break;
            }
            self.cur.c[i] = self.bx.center.c[i] - self.bx.half_width as i32;
        }
        Some(out)
    }
}

/// Nearest-neighbour edge stored with the lexicographically smaller endpoint
/// first, so `Edge::new(a, b) == Edge::new(b, a)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub a: Point,
    pub b: Point,
}

impl Edge {
    pub fn new(a: Point, b: Point) -> Self {
        debug_assert_eq!(a.dist_l1(&b), 1, "edge endpoints must be adjacent");
        if a <= b {
            Edge { a, b }
        } else {
            Edge { a: b, b: a }
        }
    }

    /// The axis along which the edge runs.
    pub fn axis(&self) -> usize {
        for i in 0..self.a.dim() {
            if self.a.c[i] != self.b.c[i] {
                return i;
            }
        }
        unreachable!("degenerate edge")
    }
}

/// Vertex of the renormalized planar *-connected grid. Coordinates are in
/// grid units; the embedded lattice position is `(2R i, 2R j, 0, ..., 0)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct StarGridVertex {
    pub i: i32,
    pub j: i32,
}

/// The 8 *-directions in counter-clockwise order starting from +e1.
/// This exact order is a contract consumed by the exploration algorithm.
pub const STAR_DIRECTIONS: [(i32, i32); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

impl StarGridVertex {
    pub fn new(i: i32, j: i32) -> Self {
        StarGridVertex { i, j }
    }

    pub fn offset(&self, dir: (i32, i32)) -> StarGridVertex {
        StarGridVertex {
            i: self.i + dir.0,
            j: self.j + dir.1,
        }
    }

    /// The 8 *-adjacent vertices, counter-clockwise from +e1.
    pub fn star_neighbours(&self) -> [StarGridVertex; 8] {
        let mut out = [*self; 8];
        for (k, &d) in STAR_DIRECTIONS.iter().enumerate() {
            out[k] = self.offset(d);
        }
        out
    }

    /// Embed into Z^d as `(2R i, 2R j, 0, ..., 0)`.
    pub fn embed(&self, d: usize, scale_r: u32) -> Point {
        let mut p = Point::origin(d);
        p.c[0] = self.i * 2 * scale_r as i32;
        if d >= 2 {
            p.c[1] = self.j * 2 * scale_r as i32;
        }
        p
    }

    /// The box `B_z(R)` this grid vertex names.
    pub fn cell(&self, d: usize, scale_r: u32) -> LatticeBox {
        LatticeBox::new(self.embed(d, scale_r), scale_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_match_definitions() {
        let p = Point::new(&[0, 0, 0, 0, 0]);
        assert_eq!(p.norm_l1(), 0);
        let q = Point::new(&[1, -2, 0, 0, 0]);
        assert_eq!(q.norm_linf(), 2);
        let r = Point::new(&[3, 4, 0, 0, 0]);
        assert_eq!(r.norm_l2(), 5.0);
    }

    #[test]
    fn box_membership_is_half_closed() {
        let b = LatticeBox::new(Point::origin(2), 1);
        // B_0(1) in d=2 is exactly {-1,0}^2
        let pts: Vec<Point> = b.iter_points().collect();
        assert_eq!(pts.len(), 4);
        for p in &pts {
            for &c in p.coords() {
                assert!(c == -1 || c == 0);
            }
        }
        assert!(!b.contains(&Point::new(&[1, 0])));
        assert!(b.contains(&Point::new(&[-1, -1])));
    }

    #[test]
    fn inner_boundary_of_unit_box_is_everything() {
        let b = LatticeBox::new(Point::origin(2), 1);
        let inner = b.boundary(BoundarySide::Inner);
        assert_eq!(inner.len(), 4);
    }

    #[test]
    fn outer_boundary_of_segment() {
        // d=1, B_0(2) = {-2,-1,0,1}; outer boundary is {-3, 2}
        let b = LatticeBox::new(Point::origin(1), 2);
        let outer = b.boundary(BoundarySide::Outer);
        assert_eq!(outer, vec![Point::new(&[-3]), Point::new(&[2])]);
    }

    /// Brute-force oracle: scan a fattened box and classify by neighbour membership.
    fn boundary_oracle(b: &LatticeBox, side: BoundarySide) -> Vec<Point> {
        let fat = LatticeBox::new(b.center, b.half_width + 2);
        let mut out: Vec<Point> = fat
            .iter_points()
            .filter(|p| match side {
                BoundarySide::Inner => {
                    b.contains(p) && p.neighbours().any(|q| !b.contains(&q))
                }
                BoundarySide::Outer => {
                    !b.contains(p) && p.neighbours().any(|q| b.contains(&q))
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    #[test]
    fn outer_boundary_matches_bruteforce_d5() {
        let b = LatticeBox::new(Point::origin(5), 4);
        let outer = b.boundary(BoundarySide::Outer);
        assert_eq!(outer, boundary_oracle(&b, BoundarySide::Outer));
        // |outer| = 2d (2r)^(d-1)
        assert_eq!(outer.len() as u128, 2 * 5 * 8u128.pow(4));
    }

    #[test]
    fn boundaries_disjoint_and_adjacent() {
        for d in 1..=4usize {
            for r in 1..=3u32 {
                let b = LatticeBox::new(Point::origin(d), r);
                let inner = b.boundary(BoundarySide::Inner);
                let outer = b.boundary(BoundarySide::Outer);
                assert_eq!(inner, boundary_oracle(&b, BoundarySide::Inner));
                assert_eq!(outer, boundary_oracle(&b, BoundarySide::Outer));
                for p in &outer {
                    assert!(!b.contains(p));
                    assert!(p.neighbours().any(|q| b.contains(&q)));
                }
                let vol = b.volume().unwrap();
                assert_eq!(vol, (2 * r as u128).pow(d as u32));
                assert_eq!(b.iter_points().count() as u128, vol);
            }
        }
    }

    #[test]
    fn edge_is_canonical() {
        let a = Point::new(&[0, 0, 0]);
        let b = Point::new(&[0, 1, 0]);
        assert_eq!(Edge::new(a, b), Edge::new(b, a));
        assert_eq!(Edge::new(a, b).axis(), 1);
    }

    #[test]
    fn star_neighbours_pinned_order() {
        let v = StarGridVertex::new(0, 0);
        let nb = v.star_neighbours();
        let embedded: Vec<(i32, i32)> = nb
            .iter()
            .map(|w| {
                let p = w.embed(2, 1);
                (p.coord(0), p.coord(1))
            })
            .collect();
        assert_eq!(
            embedded,
            vec![
                (2, 0),
                (2, 2),
                (0, 2),
                (-2, 2),
                (-2, 0),
                (-2, -2),
                (0, -2),
                (2, -2)
            ]
        );
        // all distinct
        let mut dedup = embedded.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 8);
    }

    #[test]
    fn star_neighbours_commute_with_translation() {
        let v = StarGridVertex::new(3, -2);
        let w = StarGridVertex::new(-1, 7);
        for k in 0..8 {
            let a = v.star_neighbours()[k];
            let b = StarGridVertex::new(v.i + w.i, v.j + w.j).star_neighbours()[k];
            assert_eq!((a.i + w.i, a.j + w.j), (b.i, b.j));
        }
    }

    #[test]
    fn dist_to_box() {
        let b = LatticeBox::new(Point::origin(2), 2);
        // box covers [-2,1]^2; (3, 0) is 2 away from x1 = 1
        assert_eq!(b.dist_l2_sq(&Point::new(&[3, 0])), 4);
        assert_eq!(b.dist_l2_sq(&Point::new(&[1, 1])), 0);
        assert_eq!(b.dist_l2_sq(&Point::new(&[-3, 2])), 1 + 1);
    }
}
