//! Closed interfaces: polylines, signed distance, the extended normal `ξ`,
//! the extended curvature `H`, and curve-shortening flow.

use crate::fields::{Grid2D, ScalarField, VectorField2};
use crate::{Error, Result};
use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

/// `φ(x) = exp(1/(x²−1) + 1)` on `|x| < 1`, zero outside.
pub fn phi(x: f64) -> f64 {
    let x2 = x * x;
    if x2 >= 1.0 {
        0.0
    } else {
        (1.0 / (x2 - 1.0) + 1.0).exp()
    }
}

pub fn phi_prime(x: f64) -> f64 {
    let x2 = x * x;
    if x2 >= 1.0 {
        0.0
    } else {
        let q = x2 - 1.0;
        phi(x) * (-2.0 * x / (q * q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffProfile {
    pub delta0: f64,
}

impl CutoffProfile {
    pub fn new(delta0: f64) -> Result<CutoffProfile> {
        if delta0 > 0.0 && delta0.is_finite() {
            Ok(CutoffProfile { delta0 })
        } else {
            Err(Error::Config(format!("band half-width {delta0} must be positive")))
        }
    }

    /// `φ(d/δ₀)`.
    pub fn weight(&self, d: f64) -> f64 {
        phi(d / self.delta0)
    }

    /// Plateau `η₀`: one on `|d| ≤ δ₀`, the cutoff profile on the transition, zero beyond `2δ₀`.
    pub fn eta0(&self, d: f64) -> f64 {
        let a = d.abs();
        if a <= self.delta0 {
            1.0
        } else {
            phi((a - self.delta0) / self.delta0)
        }
    }
}

/// Counterclockwise closed polyline without a repeated endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedCurve {
    points: Vec<[f64; 2]>,
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}
fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}
fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

impl ClosedCurve {
    /// Builds a curve, reversing it if it runs clockwise.
    pub fn new(mut points: Vec<[f64; 2]>) -> Result<ClosedCurve> {
        if points.len() < 8 {
            return Err(Error::Invalid(format!("curve needs at least 8 points, got {}", points.len())));
        }
        if points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        let mut c = ClosedCurve { points };
        if c.signed_area() < 0.0 {
            c.points.reverse();
        }
        Ok(c)
    }

    pub fn circle(center: [f64; 2], r: f64, n: usize) -> Result<ClosedCurve> {
        ClosedCurve::ellipse(center, r, r, n)
    }

    pub fn ellipse(center: [f64; 2], a: f64, b: f64, n: usize) -> Result<ClosedCurve> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Invalid("ellipse axes must be positive".into()));
        }
        let pts = (0..n)
            .map(|k| {
                let s = TAU * k as f64 / n as f64;
                [center[0] + a * s.cos(), center[1] + b * s.sin()]
            })
            .collect();
        let c = ClosedCurve::new(pts)?;
        Ok(c.resampled(n))
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    fn at(&self, i: isize) -> [f64; 2] {
        let n = self.points.len() as isize;
        self.points[i.rem_euclid(n) as usize]
    }

    /// Shoelace area, positive for counterclockwise curves.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        0.5 * (0..n).map(|i| cross(self.points[i], self.points[(i + 1) % n])).sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn length(&self) -> f64 {
        let n = self.points.len();
        (0..n).map(|i| norm(sub(self.points[(i + 1) % n], self.points[i]))).sum()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len();
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..n {
            let p = self.points[i];
            let q = self.points[(i + 1) % n];
            let c = cross(p, q);
            cx += (p[0] + q[0]) * c;
            cy += (p[1] + q[1]) * c;
        }
        let a = 6.0 * self.signed_area();
        [cx / a, cy / a]
    }

    /// Ratio of the longest to the shortest edge.
    pub fn spacing_ratio(&self) -> f64 {
        let n = self.points.len();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let l = norm(sub(self.points[(i + 1) % n], self.points[i]));
            lo = lo.min(l);
            hi = hi.max(l);
        }
        hi / lo
    }

    /// No two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.points.len();
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[(i + 1) % n]);
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = (self.points[j], self.points[(j + 1) % n]);
                let d1 = cross(sub(b, a), sub(c, a));
                let d2 = cross(sub(b, a), sub(d, a));
                let d3 = cross(sub(d, c), sub(a, c));
                let d4 = cross(sub(d, c), sub(b, c));
                if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Signed Menger curvature at each vertex, positive where the curve turns left.
    pub fn vertex_curvature(&self) -> Vec<f64> {
        (0..self.points.len() as isize)
            .map(|i| {
                let (a, b, c) = (self.at(i - 1), self.at(i), self.at(i + 1));
                let area2 = cross(sub(b, a), sub(c, a));
                2.0 * area2 / (norm(sub(b, a)) * norm(sub(c, b)) * norm(sub(c, a)))
            })
            .collect()
    }

    /// Curvature vector `κn` by second differences in arc length.
    /// Unit inward normals at the vertices, from the centred chord `p_{i+1} − p_{i−1}`.
    pub fn vertex_normals(&self) -> Vec<[f64; 2]> {
        (0..self.points.len() as isize)
            .map(|i| {
                let t = sub(self.at(i + 1), self.at(i - 1));
                let l = norm(t);
                [-t[1] / l, t[0] / l]
            })
            .collect()
    }

    pub fn curvature_vectors(&self) -> Vec<[f64; 2]> {
        (0..self.points.len() as isize)
            .map(|i| {
                let (a, b, c) = (self.at(i - 1), self.at(i), self.at(i + 1));
                let (l1, l2) = (norm(sub(b, a)), norm(sub(c, b)));
                let k = 2.0 / (l1 + l2);
                [
                    k * ((c[0] - b[0]) / l2 - (b[0] - a[0]) / l1),
                    k * ((c[1] - b[1]) / l2 - (b[1] - a[1]) / l1),
                ]
            })
            .collect()
    }

    /// `n` points equally spaced in (chord) arc length along the periodic Catmull-Rom spline
    /// through the current points, starting at the first point.
    pub fn resampled(&self, n: usize) -> ClosedCurve {
        let m = self.points.len();
        let mut cum = Vec::with_capacity(m + 1);
        cum.push(0.0);
        for i in 0..m {
            let l = norm(sub(self.points[(i + 1) % m], self.points[i]));
            cum.push(cum[i] + l);
        }
        let total = cum[m];
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let s = total * k as f64 / n as f64;
            while seg + 1 < m && cum[seg + 1] <= s {
                seg += 1;
            }
            let t = (s - cum[seg]) / (cum[seg + 1] - cum[seg]);
            let i = seg as isize;
            let (p0, p1, p2, p3) = (self.at(i - 1), self.at(i), self.at(i + 1), self.at(i + 2));
            let t2 = t * t;
            let t3 = t2 * t;
            let w0 = -0.5 * t3 + t2 - 0.5 * t;
            let w1 = 1.5 * t3 - 2.5 * t2 + 1.0;
            let w2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
            let w3 = 0.5 * t3 - 0.5 * t2;
            out.push([
                w0 * p0[0] + w1 * p1[0] + w2 * p2[0] + w3 * p3[0],
                w0 * p0[1] + w1 * p1[1] + w2 * p2[1] + w3 * p3[1],
            ]);
        }
        ClosedCurve { points: out }
    }

    /// Reads `(x, y)` rows; a header row is allowed.
    pub fn read_csv(r: impl Read) -> Result<ClosedCurve> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
        let mut pts = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Invalid(format!("curve row {k} has {} columns", rec.len())));
            }
            match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
                (Ok(x), Ok(y)) => pts.push([x, y]),
                _ if k == 0 => continue,
                _ => return Err(Error::Invalid(format!("curve row {k} is not numeric"))),
            }
        }
        let c = ClosedCurve::new(pts)?;
        if !c.is_simple() {
            return Err(Error::Invalid("curve is self-intersecting".into()));
        }
        Ok(c)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x", "y"])?;
        for p in &self.points {
            wtr.write_record([format!("{:e}", p[0]), format!("{:e}", p[1])])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Radius of a circle under curve-shortening flow.
pub fn circle_exact(r0: f64, t: f64) -> Result<f64> {
    let r2 = r0 * r0 - 2.0 * t;
    if r2 <= 0.0 {
        Err(Error::Extinction { t: 0.5 * r0 * r0 })
    } else {
        Ok(r2.sqrt())
    }
}

/// One explicit curve-shortening step followed by arc-length resampling.
/// Extinction is reported with `t` measured from the start of the step.
pub fn evolve_csf(curve: &ClosedCurve, dt: f64) -> Result<ClosedCurve> {
    if dt == 0.0 {
        return Ok(curve.clone());
    }
    let n = curve.len();
    let min_edge = (0..n)
        .map(|i| norm(sub(curve.points[(i + 1) % n], curve.points[i])))
        .fold(f64::INFINITY, f64::min);
    if !(dt > 0.0) || dt > 0.25 * min_edge * min_edge {
        return Err(Error::Invalid(format!(
            "curve step {dt:e} exceeds the stability limit {:e}",
            0.25 * min_edge * min_edge
        )));
    }
    // The enclosed area shrinks at rate 2π.
    if curve.area() <= TAU * dt {
        return Err(Error::Extinction { t: curve.area() / TAU });
    }
    let kn = curve.curvature_vectors();
    let moved: Vec<[f64; 2]> = curve
        .points
        .iter()
        .zip(&kn)
        .map(|(p, v)| [p[0] + dt * v[0], p[1] + dt * v[1]])
        .collect();
    let next = ClosedCurve { points: moved };
    if next.signed_area() <= 0.0 {
        return Err(Error::Extinction { t: dt });
    }
    Ok(next.resampled(n))
}

/// Evolves by curve-shortening flow for time `t` in steps no larger than `dt_max`.
/// Steps shrink with the edges as the curve contracts; once the enclosed area
/// drops below what one `dt_max` step would remove the curve is declared extinct.
pub fn evolve_csf_for(curve: &ClosedCurve, t: f64, dt_max: f64) -> Result<ClosedCurve> {
    if !(dt_max > 0.0) {
        return Err(Error::Invalid(format!("curve step bound {dt_max:e} must be positive")));
    }
    let mut c = curve.clone();
    let mut elapsed = 0.0;
    while elapsed < t {
        if c.area() <= TAU * dt_max {
            return Err(Error::Extinction { t: elapsed + c.area() / TAU });
        }
        let n = c.len();
        let min_edge = (0..n)
            .map(|i| norm(sub(c.points[(i + 1) % n], c.points[i])))
            .fold(f64::INFINITY, f64::min);
        let remaining = t - elapsed;
        let mut dt = dt_max.min(0.2 * min_edge * min_edge);
        // no sliver step at the end
        if dt >= remaining || remaining - dt < 1e-3 * dt {
            dt = remaining;
        }
        c = evolve_csf(&c, dt).map_err(|e| match e {
            Error::Extinction { t: s } => Error::Extinction { t: elapsed + s },
            other => other,
        })?;
        elapsed = if dt == remaining { t } else { elapsed + dt };
    }
    Ok(c)
}

/// Nearest point on the interface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: u32,
    pub t: f32,
}

#[derive(Debug, Clone)]
pub struct SignedDistanceGrid {
    pub d: ScalarField,
    pub grad: VectorField2,
    /// Nearest-point data per node; empty for planar interfaces.
    pub projection: Vec<Projection>,
}

fn segment_distance2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let l2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if l2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / l2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1], t)
}

/// Segments bucketed on a uniform cell grid covering the curve.
struct Buckets {
    origin: [f64; 2],
    cell: f64,
    cx: usize,
    cy: usize,
    cells: Vec<Vec<u32>>,
}

impl Buckets {
    fn new(curve: &ClosedCurve) -> Buckets {
        let pts = &curve.points;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let cell = (span / 24.0).max(1e-12);
        let cx = ((hi[0] - lo[0]) / cell).floor() as usize + 1;
        let cy = ((hi[1] - lo[1]) / cell).floor() as usize + 1;
        let mut cells = vec![Vec::new(); cx * cy];
        let n = pts.len();
        for s in 0..n {
            let (a, b) = (pts[s], pts[(s + 1) % n]);
            let i0 = ((a[0].min(b[0]) - lo[0]) / cell).floor() as usize;
            let i1 = (((a[0].max(b[0]) - lo[0]) / cell).floor() as usize).min(cx - 1);
            let j0 = ((a[1].min(b[1]) - lo[1]) / cell).floor() as usize;
            let j1 = (((a[1].max(b[1]) - lo[1]) / cell).floor() as usize).min(cy - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    cells[j * cx + i].push(s as u32);
                }
            }
        }
        Buckets { origin: lo, cell, cx, cy, cells }
    }

    /// Exact nearest segment. Rings of cells around the point's (clamped) cell are
    /// searched until no unvisited cell can hold anything closer.
    fn nearest(&self, pts: &[[f64; 2]], p: [f64; 2], hint: Option<u32>) -> (f64, Projection) {
        let n = pts.len();
        let mut best = f64::INFINITY;
        let mut proj = Projection { segment: 0, t: 0.0 };
        let visit = |s: u32, best: &mut f64, proj: &mut Projection| {
            let (d2, t) = segment_distance2(p, pts[s as usize], pts[(s as usize + 1) % n]);
            if d2 < *best {
                *best = d2;
                *proj = Projection { segment: s, t: t as f32 };
            }
        };
        if let Some(s) = hint {
            visit(s, &mut best, &mut proj);
        }
        // Projection onto the bucket rectangle: |p − q|² ≥ |p − p'|² + |p' − q|² for q inside.
        let x_hi = self.origin[0] + self.cx as f64 * self.cell;
        let y_hi = self.origin[1] + self.cy as f64 * self.cell;
        let pc = [p[0].clamp(self.origin[0], x_hi), p[1].clamp(self.origin[1], y_hi)];
        let off2 = (p[0] - pc[0]).powi(2) + (p[1] - pc[1]).powi(2);
        let (cx, cy) = (self.cx as i64, self.cy as i64);
        let ci = (((pc[0] - self.origin[0]) / self.cell).floor() as i64).clamp(0, cx - 1);
        let cj = (((pc[1] - self.origin[1]) / self.cell).floor() as i64).clamp(0, cy - 1);
        let last = ci.max(cx - 1 - ci).max(cj).max(cy - 1 - cj);
        for k in 0..=last {
            for j in (cj - k).max(0)..=(cj + k).min(cy - 1) {
                let row = j as usize * self.cx;
                if j == cj - k || j == cj + k {
                    for i in (ci - k).max(0)..=(ci + k).min(cx - 1) {
                        for &s in &self.cells[row + i as usize] {
                            visit(s, &mut best, &mut proj);
                        }
                    }
                } else {
                    if ci - k >= 0 {
                        for &s in &self.cells[row + (ci - k) as usize] {
                            visit(s, &mut best, &mut proj);
                        }
                    }
                    if k > 0 && ci + k < cx {
                        for &s in &self.cells[row + (ci + k) as usize] {
                            visit(s, &mut best, &mut proj);
                        }
                    }
                }
            }
            let x0 = self.origin[0] + (ci - k) as f64 * self.cell;
            let x1 = self.origin[0] + (ci + k + 1) as f64 * self.cell;
            let y0 = self.origin[1] + (cj - k) as f64 * self.cell;
            let y1 = self.origin[1] + (cj + k + 1) as f64 * self.cell;
            let inner = (pc[0] - x0).min(x1 - pc[0]).min(pc[1] - y0).min(y1 - pc[1]).max(0.0);
            if best <= off2 + inner * inner {
                break;
            }
        }
        (best.sqrt(), proj)
    }
}

/// Minimum distance from the curve to the non-periodic sides of the grid.
fn boundary_margin(curve: &ClosedCurve, grid: &Grid2D) -> f64 {
    let [x0, y0] = grid.origin();
    let [lx, ly] = grid.extent();
    let mut m = f64::INFINITY;
    for p in curve.points() {
        if !grid.periodic_x() {
            m = m.min(p[0] - x0).min(x0 + lx - p[0]);
        }
        if !grid.periodic_y() {
            m = m.min(p[1] - y0).min(y0 + ly - p[1]);
        }
    }
    m
}

/// Exact signed distance to a closed polyline: positive inside.
pub fn signed_distance(curve: &ClosedCurve, grid: &Grid2D, delta0: f64) -> Result<SignedDistanceGrid> {
    let margin = boundary_margin(curve, grid);
    if margin < 4.0 * delta0 * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "curve comes within {margin:.4} of the boundary; needs at least 4δ₀ = {:.4}",
            4.0 * delta0
        )));
    }
    let pts = curve.points();
    let n = pts.len();
    let buckets = Buckets::new(curve);
    let mut d = ScalarField::zeros(*grid);
    let mut projection = vec![Projection { segment: 0, t: 0.0 }; grid.len()];
    let mut crossings = Vec::new();
    for j in 0..grid.ny() {
        let y = grid.y(j);
        crossings.clear();
        for s in 0..n {
            let (a, b) = (pts[s], pts[(s + 1) % n]);
            if (a[1] <= y && y < b[1]) || (b[1] <= y && y < a[1]) {
                crossings.push(a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
            }
        }
        crossings.sort_by(|p, q| p.total_cmp(q));
        let mut hint = None;
        let mut left = 0;
        for i in 0..grid.nx() {
            let x = grid.x(i);
            while left < crossings.len() && crossings[left] < x {
                left += 1;
            }
            let inside = left % 2 == 1;
            let (dist, proj) = buckets.nearest(pts, [x, y], hint);
            hint = Some(proj.segment);
            let k = grid.index(i, j);
            d.data[k] = if inside { dist } else { -dist };
            projection[k] = proj;
        }
    }
    // ∇d of the smooth curve is the normal at the nearest point, on either side; the
    // stencil gradient of the polygon distance picks up the vertex fans instead.
    let normals = curve.vertex_normals();
    let mut grad = VectorField2::zeros(*grid);
    for k in 0..grid.len() {
        let p = projection[k];
        let s = p.segment as usize;
        let t = p.t as f64;
        let (a, b) = (normals[s], normals[(s + 1) % n]);
        let v = unit((1.0 - t) * a[0] + t * b[0], (1.0 - t) * a[1] + t * b[1]);
        grad.x[k] = v[0];
        grad.y[k] = v[1];
    }
    Ok(SignedDistanceGrid { d, grad, projection })
}

/// Signed distance of the vertical line `x = x_front`, positive for `x > x_front`.
pub fn planar_distance(grid: &Grid2D, x_front: f64) -> SignedDistanceGrid {
    let mut d = ScalarField::zeros(*grid);
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            d.data[grid.index(i, j)] = grid.x(i) - x_front;
        }
    }
    let grad = VectorField2 { grid: *grid, x: vec![1.0; grid.len()], y: vec![0.0; grid.len()] };
    SignedDistanceGrid { d, grad, projection: Vec::new() }
}

#[derive(Debug, Clone)]
pub struct ExtendedFields {
    pub xi: VectorField2,
    pub kappa: ScalarField,
    pub h: VectorField2,
    pub eta0: ScalarField,
    /// Normal velocity `V = κ` at the curve samples.
    pub velocity: Vec<f64>,
    pub cutoff: CutoffProfile,
}

fn check_resolution(grid: &Grid2D, cutoff: &CutoffProfile) -> Result<()> {
    if cutoff.delta0 / grid.h() < 4.0 * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "band half-width {} resolved by {:.2} < 4 cells",
            cutoff.delta0,
            cutoff.delta0 / grid.h()
        )));
    }
    Ok(())
}

/// `ξ = φ(d/δ₀)∇d`, `κ = −Δd(P(x))η₀`, `H = κ∇d`. The Laplacian of the distance at the
/// projection equals minus the curve curvature there.
pub fn extend_fields(sdf: &SignedDistanceGrid, curve: &ClosedCurve, cutoff: CutoffProfile) -> Result<ExtendedFields> {
    let grid = sdf.d.grid;
    check_resolution(&grid, &cutoff)?;
    if sdf.projection.len() != grid.len() {
        return Err(Error::Invalid("signed distance lacks projection data".into()));
    }
    let kc = curve.vertex_curvature();
    let n = kc.len();
    let mut out = empty_fields(grid, cutoff);
    for k in 0..grid.len() {
        let d = sdf.d.data[k];
        let w = cutoff.weight(d);
        let eta = cutoff.eta0(d);
        out.eta0.data[k] = eta;
        let n_k = unit(sdf.grad.x[k], sdf.grad.y[k]);
        out.xi.x[k] = w * n_k[0];
        out.xi.y[k] = w * n_k[1];
        if eta > 0.0 {
            let p = sdf.projection[k];
            let s = p.segment as usize;
            let t = p.t as f64;
            let kap = ((1.0 - t) * kc[s] + t * kc[(s + 1) % n]) * eta;
            out.kappa.data[k] = kap;
            out.h.x[k] = kap * n_k[0];
            out.h.y[k] = kap * n_k[1];
        }
    }
    out.velocity = kc;
    Ok(out)
}

/// Extended fields of a straight interface (zero curvature).
pub fn extend_planar(sdf: &SignedDistanceGrid, cutoff: CutoffProfile) -> Result<ExtendedFields> {
    let grid = sdf.d.grid;
    check_resolution(&grid, &cutoff)?;
    let mut out = empty_fields(grid, cutoff);
    for k in 0..grid.len() {
        let d = sdf.d.data[k];
        let w = cutoff.weight(d);
        out.eta0.data[k] = cutoff.eta0(d);
        let n_k = unit(sdf.grad.x[k], sdf.grad.y[k]);
        out.xi.x[k] = w * n_k[0];
        out.xi.y[k] = w * n_k[1];
    }
    Ok(out)
}

/// The discrete `∇d` is only unit length up to `O(h²)`; renormalising keeps `|ξ| ≤ 1`.
fn unit(gx: f64, gy: f64) -> [f64; 2] {
    let r = gx.hypot(gy);
    if r > 1e-12 {
        [gx / r, gy / r]
    } else {
        [0.0, 0.0]
    }
}

fn empty_fields(grid: Grid2D, cutoff: CutoffProfile) -> ExtendedFields {
    ExtendedFields {
        xi: VectorField2::zeros(grid),
        kappa: ScalarField::zeros(grid),
        h: VectorField2::zeros(grid),
        eta0: ScalarField::zeros(grid),
        velocity: Vec::new(),
        cutoff,
    }
}

/// The reference interface at one instant.
#[derive(Debug, Clone)]
pub struct InterfaceGeometry {
    pub t: f64,
    pub curve: Option<ClosedCurve>,
    pub sdf: SignedDistanceGrid,
    pub ext: ExtendedFields,
    /// `H¹` measure of the interface inside the domain.
    pub length: f64,
    /// Centre and radius when the interface is an exact circle.
    pub circle: Option<([f64; 2], f64)>,
}

impl InterfaceGeometry {
    pub fn from_curve(curve: ClosedCurve, grid: &Grid2D, cutoff: CutoffProfile, t: f64) -> Result<InterfaceGeometry> {
        let sdf = signed_distance(&curve, grid, cutoff.delta0)?;
        let ext = extend_fields(&sdf, &curve, cutoff)?;
        let length = curve.length();
        Ok(InterfaceGeometry { t, curve: Some(curve), sdf, ext, length, circle: None })
    }

    /// Circle of radius `√(r0² − 2t)`, sampled finely enough for the grid.
    pub fn shrinking_circle(center: [f64; 2], r0: f64, t: f64, grid: &Grid2D, cutoff: CutoffProfile) -> Result<InterfaceGeometry> {
        let r = circle_exact(r0, t)?;
        let n = ((TAU * r / (0.5 * grid.h())).ceil() as usize).max(256);
        let curve = ClosedCurve::circle(center, r, n)?;
        let mut sdf = signed_distance(&curve, grid, cutoff.delta0)?;
        // the polygon still supplies the projections; distance and normal come from the circle
        // itself, so radial data built on them carries no polygon sag
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let k = grid.index(i, j);
                let (dx, dy) = (grid.x(i) - center[0], grid.y(j) - center[1]);
                let rho = dx.hypot(dy);
                sdf.d.data[k] = r - rho;
                let (gx, gy) = if rho > 0.0 { (-dx / rho, -dy / rho) } else { (0.0, 0.0) };
                sdf.grad.x[k] = gx;
                sdf.grad.y[k] = gy;
            }
        }
        let ext = extend_fields(&sdf, &curve, cutoff)?;
        Ok(InterfaceGeometry { t, curve: Some(curve), sdf, ext, length: TAU * r, circle: Some((center, r)) })
    }

    pub fn planar(grid: &Grid2D, x_front: f64, cutoff: CutoffProfile, t: f64) -> Result<InterfaceGeometry> {
        let sdf = planar_distance(grid, x_front);
        let ext = extend_planar(&sdf, cutoff)?;
        Ok(InterfaceGeometry { t, curve: None, sdf, ext, length: grid.extent()[1], circle: None })
    }

    pub fn inside(&self, k: usize) -> bool {
        self.sdf.d.data[k] > 0.0
    }
}

/// Area of a disc of radius `r`; convenience for tests and reports.
pub fn disc_area(r: f64) -> f64 {
    PI * r * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{divergence, gradient};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> Grid2D {
        Grid2D::unit_square(n).unwrap()
    }

    #[test]
    fn cutoff_shape() {
        for k in 0..=10_000 {
            let x = -0.5 + k as f64 / 10_000.0;
            let p = phi(x);
            assert!(1.0 - 4.0 * x * x <= p + 1e-15 && p <= 1.0 - 0.5 * x * x + 1e-15, "x = {x}");
            assert_eq!(p, phi(-x));
        }
        for k in 0..1000 {
            let x = k as f64 / 1000.0;
            assert!(phi(x + 1e-3) <= phi(x));
        }
        assert_eq!(phi(1.0), 0.0);
        assert_abs_diff_eq!(phi(0.5), (1.0f64 - 4.0 / 3.0).exp(), epsilon = 1e-15);
        let h = 1e-6;
        for x in [-0.7, -0.2, 0.1, 0.5, 0.9] {
            assert_abs_diff_eq!(phi_prime(x), (phi(x + h) - phi(x - h)) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn circle_distance_values() {
        let g = unit_grid(100);
        let c = ClosedCurve::circle([0.5, 0.5], 0.3, 2048).unwrap();
        let sdf = signed_distance(&c, &g, 0.05).unwrap();
        let sag = 0.3 * (1.0 - (PI / 2048.0).cos());
        assert_abs_diff_eq!(sdf.d.at(50, 50), 0.3, epsilon = sag + 1e-12);
        assert_abs_diff_eq!(sdf.d.at(80, 50), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sdf.d.at(90, 50), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn distance_matches_brute_force() {
        let g = unit_grid(64);
        let c = ClosedCurve::ellipse([0.47, 0.52], 0.28, 0.17, 300).unwrap();
        let sdf = signed_distance(&c, &g, 0.04).unwrap();
        let pts = c.points();
        for k in (0..g.len()).step_by(7) {
            let p = [g.x(k % g.nx()), g.y(k / g.nx())];
            let brute = (0..pts.len())
                .map(|s| segment_distance2(p, pts[s], pts[(s + 1) % pts.len()]).0)
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            assert_abs_diff_eq!(sdf.d.data[k].abs(), brute, epsilon = 1e-13);
        }
    }

    #[test]
    fn rejects_margin_and_coarse_band() {
        let g = unit_grid(100);
        let c = ClosedCurve::circle([0.5, 0.5], 0.3, 512).unwrap();
        assert!(matches!(signed_distance(&c, &g, 0.1), Err(Error::Config(_))));
        let sdf = signed_distance(&c, &g, 0.03).unwrap();
        assert!(matches!(extend_fields(&sdf, &c, CutoffProfile::new(0.03).unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn distance_and_normal_match_circle() {
        let delta0 = 0.05;
        let (r0, m) = (0.3, 4096);
        let g = unit_grid(200);
        let c = ClosedCurve::circle([0.5, 0.5], r0, m).unwrap();
        let sdf = signed_distance(&c, &g, delta0).unwrap();
        // chords sag inside the circle by r(1 − cos(π/m))
        let sag = r0 * (1.0 - (PI / m as f64).cos());
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let k = g.index(i, j);
                let (dx, dy) = (g.x(i) - 0.5, g.y(j) - 0.5);
                let r = dx.hypot(dy);
                if (r0 - r).abs() < 4.0 * delta0 {
                    assert!((sdf.d.data[k] - (r0 - r)).abs() <= sag * 1.001 + 1e-15);
                    // the foot of the perpendicular on a chord sits up to |d|·π/m off the radial line
                    let tol = 2.0 * ((r0 - r).abs() + 1e-3) * (PI / m as f64) / r0;
                    assert_abs_diff_eq!(sdf.grad.x[k], -dx / r, epsilon = tol);
                    assert_abs_diff_eq!(sdf.grad.y[k], -dy / r, epsilon = tol);
                }
            }
        }
    }

    #[test]
    fn stencil_gradient_is_unit_in_band() {
        // the discrete |∇d| converges to one at second order away from the curve's vertex fans
        let delta0 = 0.05;
        let mut worst = Vec::new();
        for n in [100, 200] {
            let g = unit_grid(n);
            let c = ClosedCurve::circle([0.5, 0.5], 0.3, 1 << 14).unwrap();
            let sdf = signed_distance(&c, &g, delta0).unwrap();
            let stencil = gradient(&sdf.d);
            let mut w: f64 = 0.0;
            for k in 0..g.len() {
                let d = sdf.d.data[k].abs();
                if g.is_active(k % g.nx(), k / g.nx()) && d > 2.0 * g.h() && d < 4.0 * delta0 {
                    w = w.max((stencil.x[k].hypot(stencil.y[k]) - 1.0).abs());
                }
            }
            worst.push(w);
        }
        assert!(worst[0] < 5e-3 && worst[1] < 0.35 * worst[0], "{worst:?}");
    }

    #[test]
    fn extended_fields_on_circle() {
        let g = unit_grid(200);
        let cutoff = CutoffProfile::new(0.05).unwrap();
        let geo = InterfaceGeometry::shrinking_circle([0.5, 0.5], 0.3, 0.0, &g, cutoff).unwrap();
        let ext = &geo.ext;
        for k in 0..g.len() {
            let d = geo.sdf.d.data[k];
            let xi = ext.xi.x[k].hypot(ext.xi.y[k]);
            assert!(xi <= 1.0 + 1e-12);
            if d.abs() < 0.05 {
                assert_abs_diff_eq!(ext.kappa.data[k], 1.0 / 0.3, epsilon = 1e-6);
            } else {
                assert_eq!(xi, 0.0);
            }
            if d.abs() >= 0.1 {
                assert_eq!(ext.kappa.data[k], 0.0);
                assert_eq!(ext.h.x[k], 0.0);
                assert_eq!(ext.h.y[k], 0.0);
            }
        }
        // node at d = δ₀/2 along the x axis: (0.5 + 0.3 − 0.025, 0.5)
        let k = g.index(155, 100);
        // the sampled circle sags inside the true one by about r(π/n)²/2
        assert_abs_diff_eq!(geo.sdf.d.data[k], 0.025, epsilon = 1e-5);
        let xi = ext.xi.x[k].hypot(ext.xi.y[k]);
        assert_abs_diff_eq!(xi, phi(geo.sdf.d.data[k] / 0.05), epsilon = 1e-12);
        assert_abs_diff_eq!(xi, (-1.0f64 / 3.0).exp(), epsilon = 1e-4);
    }

    /// Largest deviation of the discrete `∇·ξ + H·ξ` from its closed form
    /// `φ'(d/δ₀)/δ₀ + φ(d/δ₀)(κ − 1/r)` in the band, and the largest `|∇·ξ + H·ξ| / |d|`.
    fn divergence_defects(n: usize) -> (f64, f64) {
        let g = unit_grid(n);
        let delta0 = 0.05;
        let cutoff = CutoffProfile::new(delta0).unwrap();
        let geo = InterfaceGeometry::shrinking_circle([0.5, 0.5], 0.3, 0.0, &g, cutoff).unwrap();
        let div = divergence(&geo.ext.xi);
        let (mut defect, mut slope): (f64, f64) = (0.0, 0.0);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let k = g.index(i, j);
                let d = geo.sdf.d.data[k];
                if d.abs() < delta0 {
                    let r = div.data[k] + geo.ext.h.x[k] * geo.ext.xi.x[k] + geo.ext.h.y[k] * geo.ext.xi.y[k];
                    let rad = (g.x(i) - 0.5).hypot(g.y(j) - 0.5);
                    let x = d / delta0;
                    let exact = phi_prime(x) / delta0 + phi(x) * (1.0 / 0.3 - 1.0 / rad);
                    defect = defect.max((r - exact).abs());
                    if d.abs() > 2.0 * g.h() {
                        slope = slope.max(r.abs() / d.abs());
                    }
                }
            }
        }
        (defect, slope)
    }

    #[test]
    fn divergence_identity_on_circle() {
        // φ'(x) = O(x) and κ − 1/r = O(d), so the identity holds up to C|d| plus truncation
        let (defect_a, slope_a) = divergence_defects(400);
        let (defect_b, slope_b) = divergence_defects(800);
        assert!(defect_b < 0.35 * defect_a, "{defect_a} {defect_b}");
        // |φ'(x)/x| = 2φ/(1 − x²)² peaks at 8/e, which bounds the slope by 3/δ₀² plus the curvature term
        let bound = 3.0 / (0.05 * 0.05) + 20.0;
        assert!(slope_a < bound && slope_b < bound, "{slope_a} {slope_b}");
    }

    fn transport_defect(n: usize) -> f64 {
        let g = unit_grid(n);
        let cutoff = CutoffProfile::new(0.05).unwrap();
        let dt = 1e-6;
        let a = InterfaceGeometry::shrinking_circle([0.5, 0.5], 0.3, 0.0, &g, cutoff).unwrap();
        let b = InterfaceGeometry::shrinking_circle([0.5, 0.5], 0.3, dt, &g, cutoff).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..g.len() {
            if a.sdf.d.data[k].abs() < 0.05 {
                let dtd = (b.sdf.d.data[k] - a.sdf.d.data[k]) / dt;
                let hg = a.ext.h.x[k] * a.sdf.grad.x[k] + a.ext.h.y[k] * a.sdf.grad.y[k];
                worst = worst.max((dtd + hg).abs());
            }
        }
        worst
    }

    #[test]
    fn transport_identity_on_circle() {
        // ∂t d + H·∇d = 0 in the band, up to the polygonal approximation of the circle
        let a = transport_defect(100);
        let b = transport_defect(200);
        assert!(a < 1e-3 && b < 1e-3, "{a} {b}");
    }

    #[test]
    fn circle_exact_values() {
        assert_eq!(circle_exact(0.3, 0.0).unwrap(), 0.3);
        assert_abs_diff_eq!(circle_exact(0.3, 0.02).unwrap(), 0.05f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(circle_exact(0.3, 0.045), Err(Error::Extinction { .. })));
    }

    #[test]
    fn csf_circle_radius() {
        let c = ClosedCurve::circle([0.5, 0.5], 0.3, 256).unwrap();
        let out = evolve_csf_for(&c, 0.02, 2e-6).unwrap();
        let r = (out.area() / PI).sqrt();
        assert_abs_diff_eq!(r, 0.05f64.sqrt(), epsilon = 2e-4);
    }

    #[test]
    fn csf_ellipse_area_rate() {
        let c = ClosedCurve::ellipse([0.5, 0.5], 0.3, 0.2, 256).unwrap();
        let t = 0.005;
        let out = evolve_csf_for(&c, t, 1e-6).unwrap();
        let rate = (c.area() - out.area()) / t;
        assert_abs_diff_eq!(rate, TAU, epsilon = 0.01 * TAU);
        assert!(out.spacing_ratio() < 2.0);
        assert!(out.is_simple());
    }

    #[test]
    fn csf_extinction() {
        let c = ClosedCurve::circle([0.5, 0.5], 0.05, 64).unwrap();
        assert!(matches!(evolve_csf_for(&c, 0.01, 1e-6), Err(Error::Extinction { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let c = ClosedCurve::ellipse([0.5, 0.5], 0.3, 0.2, 64).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = ClosedCurve::read_csv(&buf[..]).unwrap();
        for (p, q) in c.points().iter().zip(back.points()) {
            assert_abs_diff_eq!(p[0], q[0], epsilon = 1e-15);
            assert_abs_diff_eq!(p[1], q[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn clockwise_input_is_reoriented() {
        let mut pts: Vec<[f64; 2]> = ClosedCurve::circle([0.5, 0.5], 0.2, 32).unwrap().points().to_vec();
        pts.reverse();
        let c = ClosedCurve::new(pts).unwrap();
        assert!(c.signed_area() > 0.0);
        assert!(c.vertex_curvature().iter().all(|k| *k > 0.0));
    }

    proptest! {
        #[test]
        fn csf_zero_step_is_identity(a in 0.1f64..0.3, b in 0.1f64..0.3) {
            let c = ClosedCurve::ellipse([0.5, 0.5], a, b, 64).unwrap();
            prop_assert_eq!(evolve_csf(&c, 0.0).unwrap(), c);
        }

        #[test]
        fn sign_convention(px in 0.0f64..1.0, py in 0.0f64..1.0) {
            let g = unit_grid(32);
            let c = ClosedCurve::circle([0.5, 0.5], 0.2, 512).unwrap();
            let sdf = signed_distance(&c, &g, 0.05).unwrap();
            let i = (px * 32.0).round() as usize;
            let j = (py * 32.0).round() as usize;
            let r = (g.x(i) - 0.5).hypot(g.y(j) - 0.5);
            let d = sdf.d.at(i, j);
            prop_assume!((r - 0.2).abs() > 1e-3);
            prop_assert_eq!(d > 0.0, r < 0.2);
        }
    }
}
