//! Slow, independent reference solvers used to cross-check the Monte Carlo
//! capacity estimators. Everything here works by iterating the transition
//! kernel on a truncated box with absorbing boundary, never by simulation,
//! so agreement with the samplers is a genuine two-route check.

use crate::lattice::Point;
use crate::util::{FxHashMap, FxHashSet};

/// Green's function at the origin, G(0,0) = expected visits to 0, computed on
/// the box {-radius..radius}^d with absorbing boundary. The kernel commutes
/// with coordinate permutations and sign flips, so mass is tracked per orbit
/// (sorted vector of absolute coordinates); that collapses the state space
/// from (2r+1)^d to C(r+d, d) states and makes radius 16 in d = 5 cheap.
///
/// Truncation under-counts G by at most the chance of returning to 0 from
/// outside the box, about 0.11 / radius^3 in d = 5.
pub fn green_g00(d: usize, radius: u32) -> f64 {
    assert!(d >= 3, "transient dimensions only");
    let r = radius as i64;

    // enumerate orbit states: sorted multisets of absolute values in 0..=r
    let mut states: Vec<Vec<u16>> = Vec::new();
    let mut index: FxHashMap<Vec<u16>, usize> = FxHashMap::default();
    enumerate_multisets(d, r as u16, &mut |s| {
        index.insert(s.to_vec(), states.len());
        states.push(s.to_vec());
    });

    // transitions: from the representative with coordinates = state values
    let mut trans: Vec<Vec<(u32, f64)>> = Vec::with_capacity(states.len());
    let p_step = 1.0 / (2.0 * d as f64);
    for s in &states {
        let mut row: FxHashMap<u32, f64> = FxHashMap::default();
        for i in 0..d {
            for delta in [1i64, -1] {
                let v = s[i] as i64;
                let nv = (v + delta).abs();
                if nv > r {
                    continue; // absorbed
                }
                let mut ns = s.clone();
                ns[i] = nv as u16;
                ns.sort_unstable();
                let j = index[&ns] as u32;
                *row.entry(j).or_insert(0.0) += p_step;
            }
        }
        let mut row: Vec<(u32, f64)> = row.into_iter().collect();
        row.sort_unstable_by_key(|&(j, _)| j);
        trans.push(row);
    }

    let zero = index[&vec![0u16; d]];
    let mut mass = vec![0.0f64; states.len()];
    mass[zero] = 1.0;
    let mut g = 0.0f64;
    let mut next = vec![0.0f64; states.len()];
    loop {
        g += mass[zero];
        let total: f64 = mass.iter().sum();
        if total < 1e-14 {
            break;
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for (i, row) in trans.iter().enumerate() {
            let m = mass[i];
            if m == 0.0 {
                continue;
            }
            for &(j, p) in row {
                next[j as usize] += m * p;
            }
        }
        std::mem::swap(&mut mass, &mut next);
    }
    g
}

fn enumerate_multisets(d: usize, max: u16, visit: &mut impl FnMut(&[u16])) {
    let mut cur = vec![0u16; d];
    fn rec(cur: &mut Vec<u16>, pos: usize, min: u16, max: u16, visit: &mut impl FnMut(&[u16])) {
        if pos == cur.len() {
            visit(cur);
            return;
        }
        for v in min..=max {
            cur[pos] = v;
            rec(cur, pos + 1, v, max, visit);
        }
    }
    rec(&mut cur, 0, 0, max, visit);
}

/// Equilibrium measure of a small finite set by dense kernel iteration.
///
/// Solves h(y) = P_y(hit K before leaving the fattened bounding box) by
/// Jacobi sweeps with h = 1 frozen on K and h = 0 outside the domain, then
/// reads off e_K(x) = (1/2d) * sum over neighbours of (1 - h(nb)) for x in K.
/// Truncation overestimates e_K by at most the return probability from the
/// domain wall, so `margin` should be a few multiples of the set diameter.
pub fn equilibrium_dense(k: &[Point], margin: u32, max_sweeps: usize) -> FxHashMap<Point, f64> {
    assert!(!k.is_empty());
    let d = k[0].dim();
    assert!(d >= 3);
    let kset: FxHashSet<Point> = k.iter().copied().collect();

    // domain = bounding box of K fattened by margin
    let mut low = [i32::MAX; crate::lattice::MAX_DIM];
    let mut high = [i32::MIN; crate::lattice::MAX_DIM];
    for p in k {
        for i in 0..d {
            low[i] = low[i].min(p.coord(i));
            high[i] = high[i].max(p.coord(i));
        }
    }
    let mut size = [0usize; crate::lattice::MAX_DIM];
    let mut stride = [0usize; crate::lattice::MAX_DIM];
    let mut total = 1usize;
    for i in 0..d {
        low[i] -= margin as i32;
        high[i] += margin as i32;
        size[i] = (high[i] - low[i] + 1) as usize;
    }
    for i in (0..d).rev() {
        stride[i] = total;
        total *= size[i];
    }
    let to_idx = |p: &Point| -> Option<usize> {
        let mut idx = 0usize;
        for i in 0..d {
            let o = p.coord(i) - low[i];
            if o < 0 || o as usize >= size[i] {
                return None;
            }
            idx += o as usize * stride[i];
        }
        Some(idx)
    };

    let mut h = vec![0.0f64; total];
    let mut k_idx = Vec::new();
    for p in k {
        let idx = to_idx(p).expect("K inside domain");
        h[idx] = 1.0;
        k_idx.push(idx);
    }
    let k_idx_set: FxHashSet<usize> = k_idx.iter().copied().collect();

    let inv2d = 1.0 / (2.0 * d as f64);
    let mut next = h.clone();
    for _ in 0..max_sweeps {
        let mut max_delta = 0.0f64;
        for idx in 0..total {
            if k_idx_set.contains(&idx) {
                continue;
            }
            // reconstruct coordinates to guard the domain wall
            let mut rem = idx;
            let mut acc = 0.0f64;
            let mut coords = [0usize; crate::lattice::MAX_DIM];
            for i in 0..d {
                coords[i] = rem / stride[i];
                rem %= stride[i];
            }
            for i in 0..d {
                if coords[i] + 1 < size[i] {
                    acc += h[idx + stride[i]];
                }
                if coords[i] > 0 {
                    acc += h[idx - stride[i]];
                }
                // out-of-domain neighbours contribute 0
            }
            let v = acc * inv2d;
            max_delta = max_delta.max((v - h[idx]).abs());
            next[idx] = v;
        }
        std::mem::swap(&mut h, &mut next);
        if max_delta < 1e-13 {
            break;
        }
    }

    let mut out = FxHashMap::default();
    for p in k {
        let mut e = 0.0f64;
        for nb in p.neighbours() {
            if kset.contains(&nb) {
                continue;
            }
            let hn = to_idx(&nb).map(|i| h[i]).unwrap_or(0.0);
            e += (1.0 - hn) * inv2d;
        }
        out.insert(*p, e);
    }
    out
}

/// Capacity by the dense reference route: sum of the equilibrium weights.
pub fn capacity_dense(k: &[Point], margin: u32, max_sweeps: usize) -> f64 {
    equilibrium_dense(k, margin, max_sweeps).values().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g00_stabilizes_in_radius() {
        let g12 = green_g00(5, 10);
        let g16 = green_g00(5, 14);
        assert!(g16 >= g12);
        assert!((g16 - g12) / g16 < 2e-4, "g12={g12} g16={g16}");
        // escape probability of the d=5 walk is a bit under 0.87
        let esc = 1.0 / g16;
        assert!(esc > 0.8 && esc < 0.9, "esc = {esc}");
    }

    #[test]
    fn dense_equilibrium_of_origin_matches_green() {
        let k = vec![Point::origin(5)];
        let e = equilibrium_dense(&k, 8, 2000);
        let esc = e[&Point::origin(5)];
        let g = green_g00(5, 12);
        assert!(
            (esc - 1.0 / g).abs() < 2e-3,
            "dense {esc} vs 1/G {}",
            1.0 / g
        );
    }

    #[test]
    fn dense_capacity_symmetric_on_pair() {
        let k = vec![Point::origin(5), Point::unit(5, 0, 1)];
        let e = equilibrium_dense(&k, 7, 2000);
        let a = e[&Point::origin(5)];
        let b = e[&Point::unit(5, 0, 1)];
        assert!((a - b).abs() < 1e-9, "pair weights must be equal: {a} {b}");
        let cap = a + b;
        // strictly between cap({0}) and 2 cap({0})
        let single = 1.0 / green_g00(5, 12);
        assert!(cap > single && cap < 2.0 * single);
    }
}
