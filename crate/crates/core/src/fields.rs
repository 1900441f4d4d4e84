//! Uniform node grids, nodal fields and the discrete differential operators.
//!
//! First derivatives use the isotropic nine-point central stencil
//!
//! ```text
//! ∂x s ≈ [4(s_E − s_W) + (s_NE − s_NW) + (s_SE − s_SW)] / 12h
//! ```
//!
//! and the Laplacian the matching nine-point stencil. Both are second-order with
//! leading errors that are rotation invariant, which keeps curved fronts from
//! feeling the grid axes. The divergence and gradient form an adjoint pair on
//! the active nodes (`⟨Gq, v⟩ = −⟨q, Dv⟩` when `q` vanishes on inactive
//! nodes), so `grad_div = G∘D` is symmetric negative semidefinite.
//!
//! Stencil sums are grouped in mirror-symmetric pairs so that reflected or
//! rotated inputs produce bit-identical mirrored outputs.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Boundary nodes are held at zero.
    ZeroDirichlet,
    /// The axis wraps; the last node row/column neighbours the first.
    Periodic,
    /// Boundary nodes keep whatever value the field was created with.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sides {
    pub west: Boundary,
    pub east: Boundary,
    pub south: Boundary,
    pub north: Boundary,
}

impl Sides {
    pub fn all(b: Boundary) -> Sides {
        Sides { west: b, east: b, south: b, north: b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    h: f64,
    origin: [f64; 2],
    sides: Sides,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, h: f64, origin: [f64; 2], sides: Sides) -> Result<Grid2D> {
        if nx < 16 || ny < 16 {
            return Err(Error::Config(format!("grid {nx}x{ny} is below the 16x16 minimum")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("grid spacing {h} must be positive")));
        }
        let px = (sides.west == Boundary::Periodic) as u8 + (sides.east == Boundary::Periodic) as u8;
        let py = (sides.south == Boundary::Periodic) as u8 + (sides.north == Boundary::Periodic) as u8;
        if px == 1 || py == 1 {
            return Err(Error::Config("periodic sides must come in opposite pairs".into()));
        }
        Ok(Grid2D { nx, ny, h, origin, sides })
    }

    /// `[0, 1]²` with `n` cells per axis and zero-Dirichlet sides.
    pub fn unit_square(n: usize) -> Result<Grid2D> {
        Grid2D::new(n + 1, n + 1, 1.0 / n as f64, [0.0, 0.0], Sides::all(Boundary::ZeroDirichlet))
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }
    pub fn sides(&self) -> Sides {
        self.sides
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.h
    }
    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.h
    }
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    pub fn periodic_x(&self) -> bool {
        self.sides.west == Boundary::Periodic
    }
    pub fn periodic_y(&self) -> bool {
        self.sides.south == Boundary::Periodic
    }

    /// Physical extent along each axis.
    pub fn extent(&self) -> [f64; 2] {
        let lx = if self.periodic_x() { self.nx } else { self.nx - 1 } as f64 * self.h;
        let ly = if self.periodic_y() { self.ny } else { self.ny - 1 } as f64 * self.h;
        [lx, ly]
    }

    /// Columns whose nodes are updated (not pinned by a Dirichlet or fixed side).
    pub fn active_i(&self) -> std::ops::Range<usize> {
        let lo = (self.sides.west != Boundary::Periodic) as usize;
        let hi = self.nx - (self.sides.east != Boundary::Periodic) as usize;
        lo..hi
    }
    pub fn active_j(&self) -> std::ops::Range<usize> {
        let lo = (self.sides.south != Boundary::Periodic) as usize;
        let hi = self.ny - (self.sides.north != Boundary::Periodic) as usize;
        lo..hi
    }
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active_i().contains(&i) && self.active_j().contains(&j)
    }

    /// Trapezoid weight of a node (without the `h²` factor).
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let wx = if !self.periodic_x() && (i == 0 || i == self.nx - 1) { 0.5 } else { 1.0 };
        let wy = if !self.periodic_y() && (j == 0 || j == self.ny - 1) { 0.5 } else { 1.0 };
        wx * wy
    }

    pub(crate) fn neighbours(&self) -> Neighbours {
        let wrap = |k: usize, n: usize, periodic: bool, up: bool| -> usize {
            match (up, periodic) {
                (true, _) if k + 1 < n => k + 1,
                (true, true) => 0,
                (true, false) => k,
                (false, _) if k > 0 => k - 1,
                (false, true) => n - 1,
                (false, false) => k,
            }
        };
        let px = self.periodic_x();
        let py = self.periodic_y();
        Neighbours {
            xm: (0..self.nx).map(|i| wrap(i, self.nx, px, false)).collect(),
            xp: (0..self.nx).map(|i| wrap(i, self.nx, px, true)).collect(),
            ym: (0..self.ny).map(|j| wrap(j, self.ny, py, false) * self.nx).collect(),
            yp: (0..self.ny).map(|j| wrap(j, self.ny, py, true) * self.nx).collect(),
        }
    }

    fn check(&self, other: &Grid2D) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Neighbour column indices and neighbour row offsets, wrapped where periodic.
#[derive(Debug, Clone)]
pub(crate) struct Neighbours {
    pub xm: Vec<usize>,
    pub xp: Vec<usize>,
    pub ym: Vec<usize>,
    pub yp: Vec<usize>,
}

/// Indices of the eight neighbours of one node.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub c: usize,
    pub e: usize,
    pub w: usize,
    pub n: usize,
    pub s: usize,
    pub ne: usize,
    pub nw: usize,
    pub se: usize,
    pub sw: usize,
}

impl Stencil {
    #[inline(always)]
    pub fn dx(&self, a: &[f64]) -> f64 {
        4.0 * (a[self.e] - a[self.w]) + ((a[self.ne] - a[self.nw]) + (a[self.se] - a[self.sw]))
    }
    #[inline(always)]
    pub fn dy(&self, a: &[f64]) -> f64 {
        4.0 * (a[self.n] - a[self.s]) + ((a[self.ne] - a[self.se]) + (a[self.nw] - a[self.sw]))
    }
    #[inline(always)]
    pub fn lap(&self, a: &[f64]) -> f64 {
        4.0 * ((a[self.e] + a[self.w]) + (a[self.n] + a[self.s]))
            + ((a[self.ne] + a[self.sw]) + (a[self.nw] + a[self.se]))
            - 20.0 * a[self.c]
    }
}

/// Visits every active node with its stencil.
#[inline(always)]
pub(crate) fn for_each_active(grid: &Grid2D, nb: &Neighbours, mut f: impl FnMut(Stencil)) {
    let nx = grid.nx;
    for j in grid.active_j() {
        let row = j * nx;
        let (rm, rp) = (nb.ym[j], nb.yp[j]);
        for i in grid.active_i() {
            let (im, ip) = (nb.xm[i], nb.xp[i]);
            f(Stencil {
                c: row + i,
                e: row + ip,
                w: row + im,
                n: rp + i,
                s: rm + i,
                ne: rp + ip,
                nw: rp + im,
                se: rm + ip,
                sw: rm + im,
            });
        }
    }
}

/// Sum with a fixed pairwise tree over blocks of 64.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        let mut acc = 0.0;
        for &x in v {
            acc += x;
        }
        acc
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// `Σ w_n f(n) h²` with trapezoid weights, reduced row by row and then across rows.
pub fn integrate_with(grid: &Grid2D, f: impl Fn(usize) -> f64) -> f64 {
    let mut rows = Vec::with_capacity(grid.ny);
    let mut buf = vec![0.0; grid.nx];
    for j in 0..grid.ny {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = grid.weight(i, j) * f(grid.index(i, j));
        }
        rows.push(pairwise_sum(&buf));
    }
    pairwise_sum(&rows) * grid.h * grid.h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2D,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2 {
    pub grid: Grid2D,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid2D) -> ScalarField {
        ScalarField { grid, data: vec![0.0; grid.len()] }
    }

    /// Samples `f(x, y)`; zero-Dirichlet sides are then set to zero.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                data.push(f(grid.x(i), grid.y(j)));
            }
        }
        let mut s = ScalarField { grid, data };
        s.enforce_boundary();
        s
    }

    pub fn enforce_boundary(&mut self) {
        let g = self.grid;
        for_each_boundary(&g, |n| self.data[n] = 0.0);
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.index(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &b| a.max(b.abs()))
    }
}

impl VectorField2 {
    pub fn zeros(grid: Grid2D) -> VectorField2 {
        VectorField2 { grid, x: vec![0.0; grid.len()], y: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> [f64; 2]) -> VectorField2 {
        let mut v = VectorField2::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let [a, b] = f(grid.x(i), grid.y(j));
                let n = grid.index(i, j);
                v.x[n] = a;
                v.y[n] = b;
            }
        }
        v.enforce_boundary();
        v
    }

    pub fn enforce_boundary(&mut self) {
        let g = self.grid;
        for_each_boundary(&g, |n| {
            self.x[n] = 0.0;
            self.y[n] = 0.0;
        });
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        let n = self.grid.index(i, j);
        [self.x[n], self.y[n]]
    }

    pub fn norm(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            data: self.x.iter().zip(&self.y).map(|(a, b)| a.hypot(*b)).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.x.iter().zip(&self.y).fold(0.0, |m, (a, b)| m.max((a * a + b * b).sqrt()))
    }

    /// `(∫ |u − v|²)^{1/2}`.
    pub fn l2_distance(&self, other: &VectorField2) -> Result<f64> {
        self.grid.check(&other.grid)?;
        Ok(integrate_with(&self.grid, |n| {
            let a = self.x[n] - other.x[n];
            let b = self.y[n] - other.y[n];
            a * a + b * b
        })
        .sqrt())
    }

    pub fn l2_norm(&self) -> f64 {
        integrate_with(&self.grid, |n| self.x[n] * self.x[n] + self.y[n] * self.y[n]).sqrt()
    }
}

/// Calls `f` on every node of a zero-Dirichlet side.
fn for_each_boundary(g: &Grid2D, mut f: impl FnMut(usize)) {
    let zd = Boundary::ZeroDirichlet;
    for j in 0..g.ny {
        if g.sides.west == zd {
            f(g.index(0, j));
        }
        if g.sides.east == zd {
            f(g.index(g.nx - 1, j));
        }
    }
    for i in 0..g.nx {
        if g.sides.south == zd {
            f(g.index(i, 0));
        }
        if g.sides.north == zd {
            f(g.index(i, g.ny - 1));
        }
    }
}

pub fn gradient(s: &ScalarField) -> VectorField2 {
    let g = s.grid;
    let nb = g.neighbours();
    let k = 1.0 / (12.0 * g.h);
    let mut out = VectorField2::zeros(g);
    for_each_active(&g, &nb, |st| {
        out.x[st.c] = st.dx(&s.data) * k;
        out.y[st.c] = st.dy(&s.data) * k;
    });
    out
}

/// `(−∂₂s, ∂₁s)`; divergence-free by construction.
pub fn perp_gradient(s: &ScalarField) -> VectorField2 {
    let gr = gradient(s);
    VectorField2 { grid: gr.grid, x: gr.y.iter().map(|v| -v).collect(), y: gr.x }
}

pub fn divergence(v: &VectorField2) -> ScalarField {
    let g = v.grid;
    let nb = g.neighbours();
    let k = 1.0 / (12.0 * g.h);
    let mut out = ScalarField::zeros(g);
    for_each_active(&g, &nb, |st| {
        out.data[st.c] = (st.dx(&v.x) + st.dy(&v.y)) * k;
    });
    out
}

/// `rot v = −∂₂v₁ + ∂₁v₂`.
pub fn rot(v: &VectorField2) -> ScalarField {
    let g = v.grid;
    let nb = g.neighbours();
    let k = 1.0 / (12.0 * g.h);
    let mut out = ScalarField::zeros(g);
    for_each_active(&g, &nb, |st| {
        out.data[st.c] = (st.dx(&v.y) - st.dy(&v.x)) * k;
    });
    out
}

pub fn laplacian_scalar(s: &ScalarField) -> ScalarField {
    let g = s.grid;
    let nb = g.neighbours();
    let k = 1.0 / (6.0 * g.h * g.h);
    let mut out = ScalarField::zeros(g);
    for_each_active(&g, &nb, |st| out.data[st.c] = st.lap(&s.data) * k);
    out
}

pub fn laplacian(v: &VectorField2) -> VectorField2 {
    let g = v.grid;
    let nb = g.neighbours();
    let k = 1.0 / (6.0 * g.h * g.h);
    let mut out = VectorField2::zeros(g);
    for_each_active(&g, &nb, |st| {
        out.x[st.c] = st.lap(&v.x) * k;
        out.y[st.c] = st.lap(&v.y) * k;
    });
    out
}

pub fn grad_div(v: &VectorField2) -> VectorField2 {
    gradient(&divergence(v))
}

/// Trapezoid-weighted `∫ s`.
pub fn integrate(s: &ScalarField) -> f64 {
    integrate_with(&s.grid, |n| s.data[n])
}

/// `∫ a·b`.
pub fn inner(a: &VectorField2, b: &VectorField2) -> Result<f64> {
    a.grid.check(&b.grid)?;
    Ok(integrate_with(&a.grid, |n| a.x[n] * b.x[n] + a.y[n] * b.y[n]))
}

pub fn inner_scalar(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.grid.check(&b.grid)?;
    Ok(integrate_with(&a.grid, |n| a.data[n] * b.data[n]))
}

/// Discrete Dirichlet energy `½∫|∇s|²` paired with the nine-point Laplacian:
/// two thirds from axis edges and one third from diagonal edges.
pub fn dirichlet_energy(s: &ScalarField) -> f64 {
    let g = s.grid;
    let nb = g.neighbours();
    let a = &s.data;
    let mut rows = Vec::with_capacity(g.ny);
    let mut buf = Vec::with_capacity(g.nx);
    let jmax = if g.periodic_y() { g.ny } else { g.ny - 1 };
    let imax = if g.periodic_x() { g.nx } else { g.nx - 1 };
    for j in 0..g.ny {
        buf.clear();
        let row = j * g.nx;
        let up = nb.yp[j];
        for i in 0..g.nx {
            let c = a[row + i];
            let ip = nb.xp[i];
            let im = nb.xm[i];
            let mut e = 0.0;
            if i < imax {
                let d = a[row + ip] - c;
                // edges along a pinned side lie half outside the domain
                let w = if !g.periodic_y() && (j == 0 || j == g.ny - 1) { 0.5 } else { 1.0 };
                e += w * (2.0 / 3.0) * d * d;
            }
            if j < jmax {
                let d = a[up + i] - c;
                let w = if !g.periodic_x() && (i == 0 || i == g.nx - 1) { 0.5 } else { 1.0 };
                e += w * (2.0 / 3.0) * d * d;
                if i < imax {
                    let d = a[up + ip] - c;
                    e += (1.0 / 6.0) * d * d;
                }
                if g.periodic_x() || i > 0 {
                    let d = a[up + im] - c;
                    e += (1.0 / 6.0) * d * d;
                }
            }
            buf.push(e);
        }
        rows.push(pairwise_sum(&buf));
    }
    0.5 * pairwise_sum(&rows)
}

pub mod snapshot {
    //! Plain-text field snapshots.
    //!
    //! ```text
    //! # glflow-field v1
    //! # nx=<usize> ny=<usize> h=<f64> x0=<f64> y0=<f64> components=<1|2> t=<f64>
    //! <row j = 0 of component 0, comma separated>
    //! ...
    //! <row j = ny-1 of the last component>
    //! ```
    //!
    //! Rows run along x, components follow one another. Boundary tags are not
    //! stored; readers supply them.

    use super::*;

    pub const MAGIC: &str = "# glflow-field v1";

    #[derive(Debug, Clone, PartialEq)]
    pub struct Header {
        pub nx: usize,
        pub ny: usize,
        pub h: f64,
        pub origin: [f64; 2],
        pub components: usize,
        pub t: f64,
    }

    pub fn write(mut w: impl Write, grid: &Grid2D, t: f64, comps: &[&[f64]]) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(
            w,
            "# nx={} ny={} h={:e} x0={:e} y0={:e} components={} t={:e}",
            grid.nx,
            grid.ny,
            grid.h,
            grid.origin[0],
            grid.origin[1],
            comps.len(),
            t
        )?;
        for c in comps {
            for j in 0..grid.ny {
                let row = &c[j * grid.nx..(j + 1) * grid.nx];
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        Ok(())
    }

    pub fn write_vector(w: impl Write, u: &VectorField2, t: f64) -> Result<()> {
        write(w, &u.grid, t, &[&u.x, &u.y])
    }

    pub fn write_scalar(w: impl Write, s: &ScalarField, t: f64) -> Result<()> {
        write(w, &s.grid, t, &[&s.data])
    }

    /// Reads a snapshot; returns the header and the component arrays.
    pub fn read(r: impl BufRead) -> Result<(Header, Vec<Vec<f64>>)> {
        let mut lines = r.lines();
        let bad = |m: &str| Error::Invalid(format!("snapshot: {m}"));
        if lines.next().transpose()?.as_deref() != Some(MAGIC) {
            return Err(bad("missing magic line"));
        }
        let meta = lines.next().transpose()?.ok_or_else(|| bad("missing header"))?;
        let meta = meta.strip_prefix("# ").ok_or_else(|| bad("malformed header"))?;
        let mut nx = None;
        let mut ny = None;
        let mut h = None;
        let mut x0 = None;
        let mut y0 = None;
        let mut comps = None;
        let mut t = None;
        for kv in meta.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed header entry"))?;
            let num = || v.parse::<f64>().map_err(|_| bad(&format!("bad value for {k}")));
            let int = || v.parse::<usize>().map_err(|_| bad(&format!("bad value for {k}")));
            match k {
                "nx" => nx = Some(int()?),
                "ny" => ny = Some(int()?),
                "h" => h = Some(num()?),
                "x0" => x0 = Some(num()?),
                "y0" => y0 = Some(num()?),
                "components" => comps = Some(int()?),
                "t" => t = Some(num()?),
                _ => return Err(bad(&format!("unknown header key {k}"))),
            }
        }
        let miss = |k| bad(&format!("header lacks {k}"));
        let header = Header {
            nx: nx.ok_or_else(|| miss("nx"))?,
            ny: ny.ok_or_else(|| miss("ny"))?,
            h: h.ok_or_else(|| miss("h"))?,
            origin: [x0.ok_or_else(|| miss("x0"))?, y0.ok_or_else(|| miss("y0"))?],
            components: comps.ok_or_else(|| miss("components"))?,
            t: t.ok_or_else(|| miss("t"))?,
        };
        let mut data = vec![Vec::with_capacity(header.nx * header.ny); header.components];
        for c in data.iter_mut() {
            for _ in 0..header.ny {
                let line = lines.next().transpose()?.ok_or_else(|| bad("truncated"))?;
                let before = c.len();
                for v in line.split(',') {
                    c.push(v.trim().parse::<f64>().map_err(|_| bad("bad number"))?);
                }
                if c.len() - before != header.nx {
                    return Err(bad("row length differs from nx"));
                }
            }
        }
        Ok((header, data))
    }
}
