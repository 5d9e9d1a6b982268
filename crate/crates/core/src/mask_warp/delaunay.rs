//! Delaunay triangulation for small anchor sets.
//!
//! A triangle belongs to the triangulation exactly when its circumcircle
//! contains no other point. Points are normalized into the unit box and
//! quantized onto a 2^20 grid so orientation and in-circumcircle tests
//! evaluate exactly in i128; cocircular ties are broken by symbolic
//! perturbation of the lifted coordinate in index order, which keeps the
//! result a consistent triangulation (no drops, no overlaps) even for exact
//! grids of anchors. Enumeration is O(n^4): fine for anchor counts in the
//! dozens, which is all the warp ever triangulates.

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Triangle as indices into the input point slice, sorted ascending.
pub type Triangle = [usize; 3];

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True when the three points are (nearly) collinear or coincident.
pub fn collinear(a: Point, b: Point, c: Point) -> bool {
    let d1 = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let d2 = ((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2)).sqrt();
    cross(a, b, c).abs() <= 1e-9 * (d1 * d2).max(1.0)
}

type IPoint = [i64; 2];

/// Quantization grid for exact predicates: unit box scaled to 2^20 steps.
const QUANT: f64 = (1u64 << 20) as f64;

/// `det [[ux uy 1], [vx vy 1], [wx wy 1]]`, exact.
fn orient_i(u: IPoint, v: IPoint, w: IPoint) -> i128 {
    let (abx, aby) = ((v[0] - u[0]) as i128, (v[1] - u[1]) as i128);
    let (acx, acy) = ((w[0] - u[0]) as i128, (w[1] - u[1]) as i128);
    abx * acy - aby * acx
}

/// Raw in-circumcircle determinant for rows (a, b, c, p); positive means `p`
/// inside when (a, b, c) is counterclockwise. Exact in i128 for |coords|
/// below 2^26.
fn incircle_det(a: IPoint, b: IPoint, c: IPoint, p: IPoint) -> i128 {
    let (ax, ay) = ((a[0] - p[0]) as i128, (a[1] - p[1]) as i128);
    let (bx, by) = ((b[0] - p[0]) as i128, (b[1] - p[1]) as i128);
    let (cx, cy) = ((c[0] - p[0]) as i128, (c[1] - p[1]) as i128);
    let da = ax * ax + ay * ay;
    let db = bx * bx + by * by;
    let dc = cx * cx + cy * cy;
    da * (bx * cy - cx * by) - db * (ax * cy - cx * ay) + dc * (ax * by - bx * ay)
}

/// Strict "p inside circumcircle of (a, b, c)" with cocircular ties broken by
/// an index-ordered symbolic perturbation of the lifted coordinates: the
/// lowest-indexed of the four points dominates via its cofactor, so every
/// tie resolves globally consistently.
fn in_circumcircle_sos(
    pts: &[IPoint],
    (ia, ib, ic): (usize, usize, usize),
    ip: usize,
) -> bool {
    let (ia, mut ib, mut ic) = (ia, ib, ic);
    let orient = orient_i(pts[ia], pts[ib], pts[ic]);
    debug_assert!(orient != 0, "degenerate triangle reached the incircle test");
    if orient < 0 {
        std::mem::swap(&mut ib, &mut ic);
    }
    let (a, b, c, p) = (pts[ia], pts[ib], pts[ic], pts[ip]);
    let det = incircle_det(a, b, c, p);
    if det != 0 {
        return det > 0;
    }
    // Cofactors of the lifted column, rows in (a, b, c, p) order.
    let cof = [
        (ia, orient_i(b, c, p)),
        (ib, -orient_i(a, c, p)),
        (ic, orient_i(a, b, p)),
        (ip, -orient_i(a, b, c)),
    ];
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by_key(|&k| cof[k].0);
    for k in order {
        if cof[k].1 != 0 {
            return cof[k].1 > 0;
        }
    }
    // All four collinear is impossible: (a, b, c) spans a proper triangle.
    unreachable!("no deciding cofactor in cocircular tie");
}

/// Triangulates `points`, returning index triples. Needs at least 3 points,
/// not all collinear.
pub fn triangulate(points: &[Point]) -> Result<Vec<Triangle>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateTriangulation(format!("need at least 3 points, got {n}")));
    }
    // Normalize into the unit box, then quantize. Delaunay is similarity-
    // invariant so indices transfer back to the original points unchanged.
    let min_x = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = points.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = points.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let span = (max_x - min_x).max(max_y - min_y).max(1e-12);
    let pts: Vec<IPoint> = points
        .iter()
        .map(|p| {
            [
                (((p[0] - min_x) / span) * QUANT).round() as i64,
                (((p[1] - min_y) / span) * QUANT).round() as i64,
            ]
        })
        .collect();

    let mut out: Vec<Triangle> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                if orient_i(pts[i], pts[j], pts[k]) == 0 {
                    continue;
                }
                let empty = (0..n)
                    .filter(|&l| l != i && l != j && l != k)
                    .all(|l| !in_circumcircle_sos(&pts, (i, j, k), l));
                if empty {
                    out.push([i, j, k]);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::DegenerateTriangulation("no triangles produced".into()));
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn three_points_one_triangle() {
        let pts = vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let tris = triangulate(&pts).unwrap();
        assert_eq!(tris, vec![[0, 1, 2]]);
    }

    #[test]
    fn square_gives_two_triangles() {
        let pts = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let tris = triangulate(&pts).unwrap();
        assert_eq!(tris.len(), 2, "got {tris:?}");
        // Every input point is used and the two triangles tile the square.
        let mut used = [false; 4];
        let mut area = 0.0;
        for t in &tris {
            for &v in t {
                used[v] = true;
            }
            area += (cross(pts[t[0]], pts[t[1]], pts[t[2]]) / 2.0).abs();
        }
        assert!(used.iter().all(|&u| u));
        assert!((area - 100.0).abs() < 1e-9);
    }

    #[test]
    fn grid_with_center_point_stays_consistent() {
        // 3x3 grid: many cocircular quadruples; symbolic perturbation must
        // still produce a proper tiling of the hull.
        let mut pts = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                pts.push([x as f64 * 10.0, y as f64 * 10.0]);
            }
        }
        let tris = triangulate(&pts).unwrap();
        let area: f64 =
            tris.iter().map(|t| (cross(pts[t[0]], pts[t[1]], pts[t[2]]) / 2.0).abs()).sum();
        assert!((area - 400.0).abs() < 1e-9, "area {area} from {tris:?}");
        assert_eq!(tris.len(), 8, "{tris:?}");
    }

    fn shoelace(pts: &[Point]) -> f64 {
        let n = pts.len();
        let mut a = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            a += pts[i][0] * pts[j][1] - pts[j][0] * pts[i][1];
        }
        a.abs() / 2.0
    }

    fn convex_hull_area(pts: &[Point]) -> f64 {
        // Andrew monotone chain.
        let mut sorted: Vec<Point> = pts.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let chain = |iter: &mut dyn Iterator<Item = Point>| {
            let mut half: Vec<Point> = Vec::new();
            for p in iter {
                while half.len() >= 2
                    && cross(half[half.len() - 2], half[half.len() - 1], p) <= 0.0
                {
                    half.pop();
                }
                half.push(p);
            }
            half
        };
        let mut lower = chain(&mut sorted.iter().copied());
        let mut upper = chain(&mut sorted.iter().rev().copied());
        lower.pop();
        upper.pop();
        lower.extend(upper);
        if lower.len() >= 3 {
            shoelace(&lower)
        } else {
            0.0
        }
    }

    #[test]
    fn triangulation_covers_hull_and_circumcircles_are_empty() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for case in 0..50 {
            let n = rng.random_range(4..=10);
            let pts: Vec<Point> = (0..n)
                .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
                .collect();
            // Skip exactly-degenerate draws; the production path perturbs them.
            let mut degenerate = false;
            for i in 0..n {
                for j in (i + 1)..n {
                    for k in (j + 1)..n {
                        if collinear(pts[i], pts[j], pts[k]) {
                            degenerate = true;
                        }
                    }
                }
            }
            if degenerate {
                continue;
            }
            let tris = triangulate(&pts).unwrap();

            // No point sits inside any circumcircle beyond quantization noise.
            for t in &tris {
                let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
                for (pi, &p) in pts.iter().enumerate() {
                    if t.contains(&pi) {
                        continue;
                    }
                    let det = {
                        let (ax, ay) = (a[0] - p[0], a[1] - p[1]);
                        let (bx, by) = (b[0] - p[0], b[1] - p[1]);
                        let (cx, cy) = (c[0] - p[0], c[1] - p[1]);
                        let da = ax * ax + ay * ay;
                        let db = bx * bx + by * by;
                        let dc = cx * cx + cy * cy;
                        (da * (bx * cy - cx * by) - db * (ax * cy - cx * ay)
                            + dc * (ax * by - bx * ay))
                            * cross(a, b, c).signum()
                    };
                    let scale = [a, b, c]
                        .iter()
                        .map(|q| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2))
                        .fold(1.0f64, f64::max);
                    assert!(
                        det <= 1e-3 * scale * scale.sqrt(),
                        "case {case}: point {pi} strictly inside circumcircle of {t:?}: det {det}"
                    );
                }
            }

            // Triangles tile the convex hull: areas sum to the hull area and
            // no two triangles overlap (checked via total area only, which
            // catches both drops and double-cover).
            let tri_area: f64 = tris
                .iter()
                .map(|t| shoelace(&[pts[t[0]], pts[t[1]], pts[t[2]]]))
                .sum();
            let hull_area = convex_hull_area(&pts);
            if hull_area > 0.0 {
                assert!(
                    (tri_area - hull_area).abs() < 1e-5 * hull_area.max(1.0),
                    "case {case}: triangulated {tri_area} vs hull {hull_area}"
                );
            }
        }
    }

    #[test]
    fn deterministic_output() {
        let pts = vec![[3.0, 1.0], [9.0, 4.0], [5.0, 8.0], [1.0, 6.0], [6.5, 2.5], [4.0, 4.5]];
        assert_eq!(triangulate(&pts).unwrap(), triangulate(&pts).unwrap());
    }
}
