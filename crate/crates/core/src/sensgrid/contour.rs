//! Marching squares on the lattice with linear interpolation along cell
//! edges (where the bilinear interpolant is exactly linear).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::GridResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Tau,
    AbsT,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Tau => "tau",
            Field::AbsT => "abs_t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSet {
    pub level: f64,
    pub field: Field,
    /// 1-based cause index.
    pub cause: usize,
    /// `(ζᶻ, ζ_cause)` vertex sequences; closed curves repeat their first vertex.
    pub polylines: Vec<Vec<(f64, f64)>>,
    /// `(i, k)` of cells skipped because a corner is NaN.
    pub skipped_cells: Vec<(usize, usize)>,
}

impl ContourSet {
    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }
}

/// Field values on the 2-D lattice: `x` = ζᶻ axis, `y` = the one swept
/// outcome axis (cause `cause` when several are swept, in which case the
/// other causes must be fixed first with [`GridResult::fix_zeta`]).
/// `values[i][k]` is the value at `(x[i], y[k])`.
pub(crate) fn field_grid(grid: &GridResult, field: Field, cause: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let m = grid.n_causes();
    if cause == 0 || cause > m {
        return Err(Error::InvalidArgument(format!("cause {cause} out of range 1..={m}")));
    }
    let (xs, zs) = grid.axes();
    let swept: Vec<usize> = (0..m).filter(|&j| zs[j].len() > 1).collect();
    let axis = match swept.as_slice() {
        [] => cause - 1,
        [j] => *j,
        _ => {
            return Err(Error::InsufficientGrid(format!(
                "{} outcome axes are swept; fix all but one before contouring",
                swept.len()
            )))
        }
    };
    let ys = zs[axis].clone();
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InsufficientGrid(format!(
            "contours need at least 2 points on each axis, got {}x{}",
            xs.len(),
            ys.len()
        )));
    }
    if grid.points.len() != xs.len() * ys.len() {
        return Err(Error::InsufficientGrid("grid is not a full 2-D lattice".into()));
    }
    let mut values = vec![vec![f64::NAN; ys.len()]; xs.len()];
    for p in &grid.points {
        let i = xs.iter().position(|v| *v == p.zeta_z).expect("axis value");
        let k = ys.iter().position(|v| *v == p.zeta[axis]).expect("axis value");
        let j = cause - 1;
        values[i][k] = match field {
            Field::Tau => p.tau[j],
            Field::AbsT => p.t[j].abs(),
        };
    }
    Ok((xs, ys, values))
}

type Key = (u64, u64);

fn key(p: (f64, f64)) -> Key {
    // +0.0 so that -0.0 and 0.0 share a key
    ((p.0 + 0.0).to_bits(), (p.1 + 0.0).to_bits())
}

/// Point where the field crosses `level` on the edge from `a` to `b`, with
/// `a` the lower-index lattice node so shared edges give identical points.
fn edge_point(a: (f64, f64), b: (f64, f64), va: f64, vb: f64, level: f64) -> (f64, f64) {
    let t = (level - va) / (vb - va);
    if t <= 0.0 {
        return a;
    }
    if t >= 1.0 {
        return b;
    }
    (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
}

/// Level set of `field` for `cause` at `level`. Vertices are classified as
/// inside when `value >= level`; ambiguous (saddle) cells are resolved by the
/// average of the four corners. Cells with a NaN corner are skipped and
/// listed in the result.
pub fn extract_contours(grid: &GridResult, field: Field, cause: usize, level: f64) -> Result<ContourSet> {
    if !level.is_finite() {
        return Err(Error::InvalidArgument("contour level must be finite".into()));
    }
    let (xs, ys, v) = field_grid(grid, field, cause)?;
    let mut segments: Vec<((f64, f64), (f64, f64))> = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..xs.len() - 1 {
        for k in 0..ys.len() - 1 {
            let c = [v[i][k], v[i + 1][k], v[i + 1][k + 1], v[i][k + 1]];
            if c.iter().any(|x| x.is_nan()) {
                skipped.push((i, k));
                continue;
            }
            let p = [(xs[i], ys[k]), (xs[i + 1], ys[k]), (xs[i + 1], ys[k + 1]), (xs[i], ys[k + 1])];
            let inside = c.map(|x| x >= level);
            // edges: bottom 0-1, right 1-2, top 3-2, left 0-3 (lower node first)
            let edges = [(0, 1), (1, 2), (3, 2), (0, 3)];
            let cross: Vec<(usize, (f64, f64))> = edges
                .iter()
                .enumerate()
                .filter(|(_, &(a, b))| inside[a] != inside[b])
                .map(|(e, &(a, b))| (e, edge_point(p[a], p[b], c[a], c[b], level)))
                .collect();
            let pairs: Vec<(usize, usize)> = match cross.len() {
                0 => vec![],
                2 => vec![(0, 1)],
                4 => {
                    let center = c.iter().sum::<f64>() / 4.0;
                    if (center >= level) == inside[0] {
                        // corners 0 and 2 joined through the center: cut off 1 and 3
                        vec![(0, 1), (2, 3)]
                    } else {
                        vec![(3, 0), (1, 2)]
                    }
                }
                _ => unreachable!("a cell has 0, 2 or 4 crossing edges"),
            };
            for (a, b) in pairs {
                let (pa, pb) = (cross[a].1, cross[b].1);
                if key(pa) != key(pb) {
                    segments.push((pa, pb));
                }
            }
        }
    }
    Ok(ContourSet {
        level,
        field,
        cause,
        polylines: chain(&segments),
        skipped_cells: skipped,
    })
}

/// Joins segments sharing endpoints into polylines. Open chains start at an
/// endpoint used once; the rest are closed loops.
fn chain(segments: &[((f64, f64), (f64, f64))]) -> Vec<Vec<(f64, f64)>> {
    let mut ends: HashMap<Key, Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        ends.entry(key(*a)).or_default().push(s);
        ends.entry(key(*b)).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let walk = |start: usize, from_a: bool, used: &mut Vec<bool>| {
        let (a, b) = segments[start];
        let (first, mut cur) = if from_a { (a, b) } else { (b, a) };
        used[start] = true;
        let mut line = vec![first, cur];
        while let Some(&next) = ends[&key(cur)].iter().find(|&&s| !used[s]) {
            used[next] = true;
            let (na, nb) = segments[next];
            cur = if key(na) == key(cur) { nb } else { na };
            line.push(cur);
        }
        line
    };
    for s in 0..segments.len() {
        if used[s] {
            continue;
        }
        let (a, b) = segments[s];
        if ends[&key(a)].len() == 1 {
            lines.push(walk(s, true, &mut used));
        } else if ends[&key(b)].len() == 1 {
            lines.push(walk(s, false, &mut used));
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            let mut line = walk(s, true, &mut used);
            // a loop entered mid-way may leave a tail on the other side
            let (a, _) = segments[s];
            if let Some(&back) = ends[&key(a)].iter().find(|&&t| !used[t]) {
                let mut rest = walk(back, key(segments[back].0) == key(a), &mut used);
                rest.reverse();
                rest.pop();
                rest.extend(line);
                line = rest;
            }
            lines.push(line);
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensgrid::{GridPoint, GridResult, PointStatus};

    pub(crate) fn synthetic(xs: &[f64], ys: &[f64], f: impl Fn(f64, f64) -> f64) -> GridResult {
        let mut points = Vec::new();
        for &x in xs {
            for &y in ys {
                let v = f(x, y);
                points.push(GridPoint {
                    zeta_z: x,
                    zeta: vec![y],
                    tau: vec![v],
                    se: vec![1.0],
                    t: vec![v],
                    status: PointStatus::Ok,
                });
            }
        }
        GridResult {
            points,
            metadata: None,
        }
    }

    fn lin(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn anti_diagonal() {
        let ax = [-1.0, 0.0, 1.0];
        let g = synthetic(&ax, &ax, |x, y| x + y);
        let c = extract_contours(&g, Field::Tau, 1, 0.0).unwrap();
        assert_eq!(c.polylines.len(), 1);
        let line = &c.polylines[0];
        assert!(line.iter().all(|(x, y)| (x + y).abs() < 1e-15));
        let mut ends = [line[0], *line.last().unwrap()];
        ends.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(ends, [(-1.0, 1.0), (1.0, -1.0)]);
    }

    #[test]
    fn constant_field_is_empty() {
        let ax = [0.0, 1.0, 2.0];
        let g = synthetic(&ax, &ax, |_, _| 3.0);
        assert!(extract_contours(&g, Field::Tau, 1, 2.0).unwrap().is_empty());
        assert!(extract_contours(&g, Field::Tau, 1, 4.0).unwrap().is_empty());
    }

    /// Crossing of the straight-line interpolant on an edge, by bisection.
    fn edge_root(va: f64, vb: f64, level: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let g = |t: f64| va + t * (vb - va) - level;
        let s = g(lo).signum();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid).signum() == s && g(mid) != 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn bilinear(xs: &[f64], ys: &[f64], f: &dyn Fn(f64, f64) -> f64, x: f64, y: f64) -> f64 {
        let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1;
        let k = ys.partition_point(|&v| v <= y).clamp(1, ys.len() - 1) - 1;
        let (tx, ty) = ((x - xs[i]) / (xs[i + 1] - xs[i]), (y - ys[k]) / (ys[k + 1] - ys[k]));
        let (a, b, c, d) = (f(xs[i], ys[k]), f(xs[i + 1], ys[k]), f(xs[i], ys[k + 1]), f(xs[i + 1], ys[k + 1]));
        a * (1.0 - tx) * (1.0 - ty) + b * tx * (1.0 - ty) + c * (1.0 - tx) * ty + d * tx * ty
    }

    #[test]
    fn quadric_vertices_solve_the_edge_equation() {
        let xs = lin(-2.0, 2.0, 21);
        let ys = xs.clone();
        let f = |x: f64, y: f64| 0.6 * x * x + 0.9 * y * y - 0.4 * x * y;
        let g = synthetic(&xs, &ys, f);
        let c = extract_contours(&g, Field::Tau, 1, 1.0).unwrap();
        assert_eq!(c.polylines.len(), 1);
        let line = &c.polylines[0];
        assert_eq!(line.first(), line.last(), "ellipse should close");
        for &(x, y) in line {
            assert!((bilinear(&xs, &ys, &f, x, y) - 1.0).abs() < 1e-9);
            let on_x = xs.iter().position(|&v| v == x);
            let on_y = ys.iter().position(|&v| v == y);
            let (t_found, t_oracle) = match (on_x, on_y) {
                (Some(i), _) => {
                    let k = ys.partition_point(|&v| v <= y).min(ys.len() - 1).max(1) - 1;
                    let t = (y - ys[k]) / (ys[k + 1] - ys[k]);
                    (t, edge_root(f(xs[i], ys[k]), f(xs[i], ys[k + 1]), 1.0))
                }
                (None, Some(k)) => {
                    let i = xs.partition_point(|&v| v <= x).min(xs.len() - 1).max(1) - 1;
                    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                    (t, edge_root(f(xs[i], ys[k]), f(xs[i + 1], ys[k]), 1.0))
                }
                _ => panic!("vertex ({x}, {y}) is not on a lattice edge"),
            };
            assert!((t_found - t_oracle).abs() < 1e-9, "{t_found} vs {t_oracle}");
        }
    }

    #[test]
    fn open_curves_end_on_the_boundary() {
        let xs = lin(-1.0, 1.0, 9);
        let g = synthetic(&xs, &xs, |x, y| x * x - y);
        let c = extract_contours(&g, Field::Tau, 1, 0.0).unwrap();
        assert_eq!(c.polylines.len(), 1);
        for p in [c.polylines[0][0], *c.polylines[0].last().unwrap()] {
            assert!(p.0.abs() == 1.0 || p.1.abs() == 1.0, "{p:?}");
        }
    }

    #[test]
    fn saddle_uses_center_average() {
        let ax = [0.0, 1.0];
        // corners (0,0)=1 (1,0)=0 (1,1)=1 (0,1)=0
        let high_center = synthetic(&ax, &ax, |x, y| if x == y { 1.0 } else { 0.1 });
        let c = extract_contours(&high_center, Field::Tau, 1, 0.5).unwrap();
        assert_eq!(c.polylines.len(), 2);
        // center mean 0.55 >= 0.5: the high corners are joined, so each curve
        // isolates a low corner
        for line in &c.polylines {
            let mid = ((line[0].0 + line[1].0) / 2.0, (line[0].1 + line[1].1) / 2.0);
            assert!((mid.0 - mid.1).abs() > 0.1);
        }
        let low_center = synthetic(&ax, &ax, |x, y| if x == y { 0.9 } else { 0.0 });
        let c = extract_contours(&low_center, Field::Tau, 1, 0.5).unwrap();
        assert_eq!(c.polylines.len(), 2);
        // now the low corners are joined and each curve isolates a high corner
        for line in &c.polylines {
            let mid = ((line[0].0 + line[1].0) / 2.0, (line[0].1 + line[1].1) / 2.0);
            assert!((mid.0 - mid.1).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_cells_are_skipped_and_reported() {
        let ax = [0.0, 1.0, 2.0];
        let mut g = synthetic(&ax, &ax, |x, y| x + y);
        g.points[4].tau[0] = f64::NAN;
        let c = extract_contours(&g, Field::Tau, 1, 1.5).unwrap();
        assert_eq!(c.skipped_cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(c.is_empty());
    }

    #[test]
    fn too_small_grid() {
        let g = synthetic(&[0.0], &[0.0], |_, _| 1.0);
        assert!(matches!(
            extract_contours(&g, Field::Tau, 1, 1.0),
            Err(Error::InsufficientGrid(_))
        ));
    }

    #[test]
    fn level_through_a_vertex() {
        let ax = [-1.0, 0.0, 1.0];
        let g = synthetic(&ax, &ax, |x, y| x + y);
        let c = extract_contours(&g, Field::Tau, 1, 1.0).unwrap();
        assert_eq!(c.polylines.len(), 1);
        assert!(c.polylines[0].iter().all(|(x, y)| (x + y - 1.0).abs() < 1e-15));
    }
}
