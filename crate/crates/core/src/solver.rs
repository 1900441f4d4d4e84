//! Time stepping for `∂t u − μ∇div u = Δu − ε⁻²∂F(u)` with pinned boundary nodes.
//!
//! The discrete energy
//!
//! ```text
//! A_ε(u) = ε·Q(u) + Σ_active h²[(ε/2)μ(Du)² + F(u)/ε] + Σ_pinned w h² F(u)/ε
//! ```
//!
//! (with `Q` the nine-point Dirichlet energy) has the semi-discrete flow as its
//! exact gradient flow, so small explicit steps dissipate it.

use crate::fields::{for_each_active, integrate_with, pairwise_sum, Grid2D, Neighbours, VectorField2};
use crate::potential::BulkPotential;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ExplicitRk2,
    StabilizedImex,
}

#[derive(Debug, Clone)]
pub struct SolverParams {
    pub eps: f64,
    pub mu: f64,
    pub scheme: Scheme,
    /// Overrides the automatic step.
    pub dt: Option<f64>,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub max_halvings: usize,
    /// `c` in the reaction bound `c·ε²/S` of the explicit step.
    pub reaction_cfl: f64,
}

impl SolverParams {
    pub fn new(eps: f64, mu: f64, scheme: Scheme) -> SolverParams {
        SolverParams { eps, mu, scheme, dt: None, cg_tol: 1e-10, cg_max_iter: 10_000, max_halvings: 20, reaction_cfl: 1.0 }
    }
}

/// Largest explicit step allowed: `min(h²/(4(1+μ)), c·ε²/S)`.
pub fn explicit_dt_limit(h: f64, eps: f64, mu: f64, stabilization: f64, c: f64) -> f64 {
    (h * h / (4.0 * (1.0 + mu))).min(c * eps * eps / stabilization)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnergyLedger {
    /// `(t, A_ε)` after every accepted step, starting with the initial state.
    pub values: Vec<(f64, f64)>,
    /// `Σ ε∫|Δu/Δt|² Δt`.
    pub dissipation: f64,
    /// Accepted steps whose energy rose by more than `10⁻⁸·A_ε(u⁰)`.
    pub violations: usize,
    /// Explicit steps thrown away and retried with half the step.
    pub rejections: usize,
    pub steps: usize,
}

impl EnergyLedger {
    pub fn initial(&self) -> f64 {
        self.values.first().map_or(0.0, |v| v.1)
    }
    pub fn last(&self) -> f64 {
        self.values.last().map_or(0.0, |v| v.1)
    }
    /// Largest single-step increase recorded.
    pub fn max_increase(&self) -> f64 {
        self.values.windows(2).map(|w| w[1].1 - w[0].1).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub u: VectorField2,
    pub t: f64,
    pub eps: f64,
    pub mu: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub stabilization: f64,
}

/// `A_ε(u)`.
pub fn energy(u: &VectorField2, p: &BulkPotential, eps: f64, mu: f64) -> f64 {
    let g = u.grid;
    let mut div = vec![0.0; g.len()];
    energy_pass(&g, &g.neighbours(), u, p, eps, mu, &mut div)
}

// Row kernels. `b`, `r`, `a` are the rows below, at and above the node; `i`, `im`, `ip`
// are the column and its west and east neighbours.

#[inline(always)]
fn lap9(b: &[f64], r: &[f64], a: &[f64], i: usize, im: usize, ip: usize) -> f64 {
    4.0 * ((r[ip] + r[im]) + (a[i] + b[i])) + ((a[ip] + b[im]) + (a[im] + b[ip])) - 20.0 * r[i]
}

#[inline(always)]
fn dx9(b: &[f64], r: &[f64], a: &[f64], im: usize, ip: usize) -> f64 {
    4.0 * (r[ip] - r[im]) + ((a[ip] - a[im]) + (b[ip] - b[im]))
}

#[inline(always)]
fn dy9(b: &[f64], a: &[f64], i: usize, im: usize, ip: usize) -> f64 {
    4.0 * (a[i] - b[i]) + ((a[ip] - b[ip]) + (a[im] - b[im]))
}

/// The nine shifted views of three rows over columns `lo..lo + m` (`lo ≥ 1`, `lo + m < nx`).
struct Win<'a> {
    c: &'a [f64],
    e: &'a [f64],
    w: &'a [f64],
    n: &'a [f64],
    s: &'a [f64],
    ne: &'a [f64],
    nw: &'a [f64],
    se: &'a [f64],
    sw: &'a [f64],
}

impl<'a> Win<'a> {
    #[inline(always)]
    fn new(b: &'a [f64], r: &'a [f64], a: &'a [f64], lo: usize, m: usize) -> Win<'a> {
        Win {
            c: &r[lo..lo + m],
            e: &r[lo + 1..lo + 1 + m],
            w: &r[lo - 1..lo - 1 + m],
            n: &a[lo..lo + m],
            s: &b[lo..lo + m],
            ne: &a[lo + 1..lo + 1 + m],
            nw: &a[lo - 1..lo - 1 + m],
            se: &b[lo + 1..lo + 1 + m],
            sw: &b[lo - 1..lo - 1 + m],
        }
    }
    #[inline(always)]
    fn lap(&self, k: usize) -> f64 {
        4.0 * ((at(self.e, k) + at(self.w, k)) + (at(self.n, k) + at(self.s, k))) + ((at(self.ne, k) + at(self.sw, k)) + (at(self.nw, k) + at(self.se, k)))
            - 20.0 * at(self.c, k)
    }
    #[inline(always)]
    fn dx(&self, k: usize) -> f64 {
        4.0 * (at(self.e, k) - at(self.w, k)) + ((at(self.ne, k) - at(self.nw, k)) + (at(self.se, k) - at(self.sw, k)))
    }
    #[inline(always)]
    fn dy(&self, k: usize) -> f64 {
        4.0 * (at(self.n, k) - at(self.s, k)) + ((at(self.ne, k) - at(self.se, k)) + (at(self.nw, k) - at(self.sw, k)))
    }
}

/// Unchecked read for the window loops. Every view in a `Win` has the same length `m`
/// by construction and the loops only visit `k < m`, so the check is redundant; keeping
/// it doubles the cost of a time step.
#[inline(always)]
fn at(s: &[f64], k: usize) -> f64 {
    debug_assert!(k < s.len());
    // SAFETY: callers pass k < m = s.len(), see above
    unsafe { *s.get_unchecked(k) }
}

#[inline(always)]
fn rows<'a>(v: &'a [f64], nx: usize, rm: usize, r: usize, rp: usize) -> (&'a [f64], &'a [f64], &'a [f64]) {
    (&v[rm..rm + nx], &v[r..r + nx], &v[rp..rp + nx])
}

/// Interior columns of an active row, and whether the two edge columns are active too.
fn column_split(g: &Grid2D) -> (usize, usize, bool) {
    let nx = g.nx();
    let ai = g.active_i();
    (ai.start.max(1), ai.end.min(nx - 1), ai.start == 0)
}

/// Nine-point divergence on active nodes.
fn div_pass(g: &Grid2D, nb: &Neighbours, ux: &[f64], uy: &[f64], out: &mut [f64]) {
    let nx = g.nx();
    let kd = 1.0 / (12.0 * g.h());
    let (lo, hi, edges) = column_split(g);
    let m = hi - lo;
    for j in g.active_j() {
        let (rm, r, rp) = (nb.ym[j], j * nx, nb.yp[j]);
        let (xb, xr, xa) = rows(ux, nx, rm, r, rp);
        let (yb, yr, ya) = rows(uy, nx, rm, r, rp);
        let o = &mut out[r..r + nx];
        if edges {
            for i in [0, nx - 1] {
                let (im, ip) = (nb.xm[i], nb.xp[i]);
                o[i] = (dx9(xb, xr, xa, im, ip) + dy9(yb, ya, i, im, ip)) * kd;
            }
        }
        let (wx, wy) = (Win::new(xb, xr, xa, lo, m), Win::new(yb, yr, ya, lo, m));
        let o = &mut o[lo..lo + m];
        for k in 0..m {
            o[k] = (wx.dx(k) + wy.dy(k)) * kd;
        }
    }
}

/// `Σ_{k<m} f(k)` with four interleaved accumulators.
#[inline(always)]
fn lanes_sum(m: usize, mut f: impl FnMut(usize) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let full = m / 4 * 4;
    let mut k = 0;
    while k < full {
        acc[0] += f(k);
        acc[1] += f(k + 1);
        acc[2] += f(k + 2);
        acc[3] += f(k + 3);
        k += 4;
    }
    let mut tail = 0.0;
    for k in full..m {
        tail += f(k);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Constants shared by the right-hand side kernels.
#[derive(Clone, Copy)]
struct Coeffs {
    kd: f64,
    kl: f64,
    ke: f64,
    mu: f64,
}

/// Evaluates `Δu + μ∇div u − ε⁻²∂F(u)` one active row at a time and hands each row to
/// `f(row offset, ax, ay)`; the row buffers are valid on the active columns.
fn rhs_pass(
    g: &Grid2D,
    nb: &Neighbours,
    pot: &BulkPotential,
    c: Coeffs,
    ux: &[f64],
    uy: &[f64],
    div: &[f64],
    f: impl FnMut(usize, &[f64], &[f64]),
) {
    match (pot.csh_scale(), c.mu != 0.0) {
        (Some(s), true) => rhs_rows::<_, true>(g, nb, ratio_csh(s), c, ux, uy, div, f),
        (Some(s), false) => rhs_rows::<_, false>(g, nb, ratio_csh(s), c, ux, uy, div, f),
        (None, true) => rhs_rows::<_, true>(g, nb, |s2: f64| pot.density_and_ratio(s2).1, c, ux, uy, div, f),
        (None, false) => rhs_rows::<_, false>(g, nb, |s2: f64| pot.density_and_ratio(s2).1, c, ux, uy, div, f),
    }
}

/// Same arithmetic as the general path, with the family dispatch hoisted.
fn ratio_csh(scale: f64) -> impl Fn(f64) -> f64 + Copy {
    let k = scale * scale;
    move |s2: f64| {
        let q = 1.0 - s2;
        k * q * (1.0 - 3.0 * s2)
    }
}

fn density_csh(scale: f64) -> impl Fn(f64) -> f64 + Copy {
    let k = scale * scale;
    move |s2: f64| {
        let q = 1.0 - s2;
        0.5 * k * s2 * q * q
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn rhs_rows<R: Fn(f64) -> f64, const MU: bool>(
    g: &Grid2D,
    nb: &Neighbours,
    ratio: R,
    c: Coeffs,
    ux: &[f64],
    uy: &[f64],
    div: &[f64],
    mut f: impl FnMut(usize, &[f64], &[f64]),
) {
    let nx = g.nx();
    let (lo, hi, edges) = column_split(g);
    let m = hi - lo;
    let mut ax = vec![0.0; nx];
    let mut ay = vec![0.0; nx];
    for j in g.active_j() {
        let (rm, r, rp) = (nb.ym[j], j * nx, nb.yp[j]);
        let (xb, xr, xa) = rows(ux, nx, rm, r, rp);
        let (yb, yr, ya) = rows(uy, nx, rm, r, rp);
        let (db, dr, da) = rows(div, nx, rm, r, rp);
        if edges {
            for i in [0, nx - 1] {
                let (im, ip) = (nb.xm[i], nb.xp[i]);
                let (vx, vy) = (xr[i], yr[i]);
                let rt = ratio(vx * vx + vy * vy);
                let mut a = lap9(xb, xr, xa, i, im, ip) * c.kl - rt * vx * c.ke;
                let mut b = lap9(yb, yr, ya, i, im, ip) * c.kl - rt * vy * c.ke;
                if MU {
                    a += c.mu * dx9(db, dr, da, im, ip) * c.kd;
                    b += c.mu * dy9(db, da, i, im, ip) * c.kd;
                }
                ax[i] = a;
                ay[i] = b;
            }
        }
        let (wx, wy) = (Win::new(xb, xr, xa, lo, m), Win::new(yb, yr, ya, lo, m));
        let wd = Win::new(db, dr, da, lo, m);
        let (ox, oy) = (&mut ax[lo..lo + m], &mut ay[lo..lo + m]);
        for k in 0..m {
            let (vx, vy) = (at(wx.c, k), at(wy.c, k));
            let rt = ratio(vx * vx + vy * vy);
            let mut a = wx.lap(k) * c.kl - rt * vx * c.ke;
            let mut b = wy.lap(k) * c.kl - rt * vy * c.ke;
            if MU {
                a += c.mu * wd.dx(k) * c.kd;
                b += c.mu * wd.dy(k) * c.kd;
            }
            ox[k] = a;
            oy[k] = b;
        }
        f(r, &ax, &ay);
    }
}

/// `A_ε(u)`, leaving the divergence of `u` on active nodes in `div` when `μ ≠ 0`.
fn energy_pass(g: &Grid2D, nb: &Neighbours, u: &VectorField2, p: &BulkPotential, eps: f64, mu: f64, div: &mut [f64]) -> f64 {
    match p.csh_scale() {
        Some(s) => energy_rows(g, nb, u, density_csh(s), eps, mu, div),
        None => energy_rows(g, nb, u, |s2: f64| p.density(s2), eps, mu, div),
    }
}

#[inline(always)]
fn energy_rows<D: Fn(f64) -> f64>(g: &Grid2D, nb: &Neighbours, u: &VectorField2, density: D, eps: f64, mu: f64, div: &mut [f64]) -> f64 {
    let (nx, ny) = (g.nx(), g.ny());
    let (px, py) = (g.periodic_x(), g.periodic_y());
    let jmax = if py { ny } else { ny - 1 };
    let imax = if px { nx } else { nx - 1 };
    let kd = 1.0 / (12.0 * g.h());
    let aj = g.active_j();
    let ai = g.active_i();
    let (ux, uy) = (&u.x, &u.y);
    let m = nx - 2;
    let mut q_rows = Vec::with_capacity(ny);
    let mut b_rows = Vec::with_capacity(ny);
    for j in 0..ny {
        let (rm, r, rp) = (nb.ym[j], j * nx, nb.yp[j]);
        let (xb, xr, xa) = rows(ux, nx, rm, r, rp);
        let (yb, yr, ya) = rows(uy, nx, rm, r, rp);
        let row_active = aj.contains(&j);
        let wy = if !py && (j == 0 || j == ny - 1) { 0.5 } else { 1.0 };
        let up = j < jmax;
        let d = &mut div[r..r + nx];
        let (mut q, mut bulk) = (0.0, 0.0);

        // the two edge columns, with the boundary cases spelled out
        let we = if px { 1.0 } else { 0.5 };
        for i in [0, nx - 1] {
            let (im, ip) = (nb.xm[i], nb.xp[i]);
            let (cx, cy) = (xr[i], yr[i]);
            if i < imax {
                let (dx, dy) = (xr[ip] - cx, yr[ip] - cy);
                q += wy * (2.0 / 3.0) * (dx * dx + dy * dy);
            }
            if up {
                let (dx, dy) = (xa[i] - cx, ya[i] - cy);
                q += we * (2.0 / 3.0) * (dx * dx + dy * dy);
                if i < imax {
                    let (dx, dy) = (xa[ip] - cx, ya[ip] - cy);
                    q += (1.0 / 6.0) * (dx * dx + dy * dy);
                }
                if px || i > 0 {
                    let (dx, dy) = (xa[im] - cx, ya[im] - cy);
                    q += (1.0 / 6.0) * (dx * dx + dy * dy);
                }
            }
            let mut e = we * wy * density(cx * cx + cy * cy) / eps;
            if mu != 0.0 && row_active && ai.contains(&i) {
                let v = (dx9(xb, xr, xa, im, ip) + dy9(yb, ya, i, im, ip)) * kd;
                d[i] = v;
                e += 0.5 * eps * mu * v * v;
            }
            bulk += e;
        }

        // interior columns: every forward edge present with unit weight
        let (wx, wv) = (Win::new(xb, xr, xa, 1, m), Win::new(yb, yr, ya, 1, m));
        let qe = lanes_sum(m, |k| {
            let (ex, ey) = (at(wx.e, k) - at(wx.c, k), at(wv.e, k) - at(wv.c, k));
            ex * ex + ey * ey
        });
        let fb = lanes_sum(m, |k| density(at(wx.c, k) * at(wx.c, k) + at(wv.c, k) * at(wv.c, k)));
        if up {
            let qn = lanes_sum(m, |k| {
                let (ax, ay) = (at(wx.n, k) - at(wx.c, k), at(wv.n, k) - at(wv.c, k));
                ax * ax + ay * ay
            });
            let qd = lanes_sum(m, |k| {
                let (cx, cy) = (at(wx.c, k), at(wv.c, k));
                let (ax, ay) = (at(wx.ne, k) - cx, at(wv.ne, k) - cy);
                let (bx, by) = (at(wx.nw, k) - cx, at(wv.nw, k) - cy);
                (ax * ax + ay * ay) + (bx * bx + by * by)
            });
            q += (2.0 / 3.0) * qn + (1.0 / 6.0) * qd;
        }
        q += wy * (2.0 / 3.0) * qe;
        bulk += wy * fb / eps;
        if mu != 0.0 && row_active {
            let dd = &mut d[1..1 + m];
            let sd = lanes_sum(m, |k| {
                let v = (wx.dx(k) + wv.dy(k)) * kd;
                dd[k] = v;
                v * v
            });
            bulk += 0.5 * eps * mu * sd;
        }
        q_rows.push(q);
        b_rows.push(bulk);
    }
    let h2 = g.h() * g.h();
    h2 * pairwise_sum(&b_rows) + eps * 0.5 * pairwise_sum(&q_rows)
}

pub struct Solver<'p> {
    pub state: SolverState,
    pub ledger: EnergyLedger,
    potential: &'p BulkPotential,
    params: SolverParams,
    nb: Neighbours,
    /// Divergence of the current state, valid when `div_valid`.
    div_u: Vec<f64>,
    div_valid: bool,
    div_t: Vec<f64>,
    k1: [Vec<f64>; 2],
    /// Stage and candidate fields; their pinned values always equal those of the state.
    tmp: VectorField2,
    next: VectorField2,
    energy_now: f64,
}

impl<'p> Solver<'p> {
    pub fn new(u: VectorField2, potential: &'p BulkPotential, params: SolverParams) -> Result<Solver<'p>> {
        if !(params.reaction_cfl > 0.0) {
            return Err(Error::Config(format!("reaction step factor {} must be positive", params.reaction_cfl)));
        }
        if !(params.eps > 0.0) || !(params.mu >= 0.0) {
            return Err(Error::Config(format!("need ε > 0 and μ ≥ 0, got ε = {}, μ = {}", params.eps, params.mu)));
        }
        if u.x.iter().chain(&u.y).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("initial field has non-finite values".into()));
        }
        let g = u.grid;
        let s = potential.stabilization();
        let limit = explicit_dt_limit(g.h(), params.eps, params.mu, s, params.reaction_cfl);
        let dt = params.dt.unwrap_or(limit);
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step {dt} must be positive")));
        }
        if params.scheme == Scheme::ExplicitRk2 && dt > limit * (1.0 + 1e-12) {
            return Err(Error::Config(format!("explicit step {dt:e} exceeds the stability bound {limit:e}")));
        }
        let n = g.len();
        let nb = g.neighbours();
        let mut div_u = vec![0.0; n];
        let e0 = energy_pass(&g, &nb, &u, potential, params.eps, params.mu, &mut div_u);
        let (tmp, next) = (u.clone(), u.clone());
        let state = SolverState {
            u,
            t: 0.0,
            eps: params.eps,
            mu: params.mu,
            dt,
            scheme: params.scheme,
            stabilization: s,
        };
        let ledger = EnergyLedger { values: vec![(0.0, e0)], ..Default::default() };
        Ok(Solver {
            state,
            ledger,
            potential,
            params,
            nb,
            div_u,
            div_valid: true,
            div_t: vec![0.0; n],
            k1: [vec![0.0; n], vec![0.0; n]],
            tmp,
            next,
            energy_now: e0,
        })
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.state.t = t;
        self.ledger.values[0].0 = t;
        self
    }

    pub fn grid(&self) -> Grid2D {
        self.state.u.grid
    }

    pub fn energy(&self) -> f64 {
        self.energy_now
    }

    pub fn potential(&self) -> &BulkPotential {
        self.potential
    }

    fn coeffs(&self) -> Coeffs {
        let h = self.grid().h();
        let eps = self.state.eps;
        Coeffs { kd: 1.0 / (12.0 * h), kl: 1.0 / (6.0 * h * h), ke: 1.0 / (eps * eps), mu: self.state.mu }
    }

    /// One step of the configured scheme with the current `dt`.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.state.dt;
        self.step_with(dt)
    }

    fn step_with(&mut self, dt: f64) -> Result<()> {
        match self.state.scheme {
            Scheme::ExplicitRk2 => self.explicit_step(dt),
            Scheme::StabilizedImex => self.imex_step(dt),
        }
    }

    fn explicit_step(&mut self, dt_req: f64) -> Result<()> {
        let tol = 1e-8 * self.ledger.initial();
        let g = self.grid();
        let c = self.coeffs();
        let (pot, eps, mu) = (self.potential, self.state.eps, self.state.mu);
        let nb = &self.nb;
        let u = &self.state.u;
        let ai = g.active_i();
        if mu != 0.0 && !self.div_valid {
            div_pass(&g, nb, &u.x, &u.y, &mut self.div_u);
        }
        let mut dt = dt_req;
        {
            let [k1x, k1y] = &mut self.k1;
            let t = &mut self.tmp;
            rhs_pass(&g, nb, pot, c, &u.x, &u.y, &self.div_u, |r, ax, ay| {
                let s = r + ai.start..r + ai.end;
                let (ax, ay) = (&ax[ai.clone()], &ay[ai.clone()]);
                let (k1x, k1y) = (&mut k1x[s.clone()], &mut k1y[s.clone()]);
                let (tx, ty) = (&mut t.x[s.clone()], &mut t.y[s.clone()]);
                let (ux, uy) = (&u.x[s.clone()], &u.y[s]);
                for k in 0..ax.len() {
                    k1x[k] = ax[k];
                    k1y[k] = ay[k];
                    tx[k] = ux[k] + dt * ax[k];
                    ty[k] = uy[k] + dt * ay[k];
                }
            });
        }
        for halving in 0..=self.params.max_halvings {
            if halving > 0 {
                let [k1x, k1y] = &self.k1;
                let t = &mut self.tmp;
                for j in g.active_j() {
                    for i in ai.clone() {
                        let n = j * g.nx() + i;
                        t.x[n] = u.x[n] + dt * k1x[n];
                        t.y[n] = u.y[n] + dt * k1y[n];
                    }
                }
            }
            if mu != 0.0 {
                div_pass(&g, nb, &self.tmp.x, &self.tmp.y, &mut self.div_t);
            }
            let mut moved = Vec::with_capacity(g.ny());
            {
                let [k1x, k1y] = &self.k1;
                let (nx, ny) = (&mut self.next.x, &mut self.next.y);
                let t = &self.tmp;
                rhs_pass(&g, nb, pot, c, &t.x, &t.y, &self.div_t, |r, ax, ay| {
                    let s = r + ai.start..r + ai.end;
                    let (ax, ay) = (&ax[ai.clone()], &ay[ai.clone()]);
                    let (k1x, k1y) = (&k1x[s.clone()], &k1y[s.clone()]);
                    let (nx, ny) = (&mut nx[s.clone()], &mut ny[s.clone()]);
                    let (ux, uy) = (&u.x[s.clone()], &u.y[s]);
                    let mut acc = 0.0;
                    for k in 0..ax.len() {
                        let a = ux[k] + 0.5 * dt * (k1x[k] + ax[k]);
                        let b = uy[k] + 0.5 * dt * (k1y[k] + ay[k]);
                        nx[k] = a;
                        ny[k] = b;
                        let (da, db) = (a - ux[k], b - uy[k]);
                        acc += da * da + db * db;
                    }
                    moved.push(acc);
                });
            }
            // the stage divergence is no longer needed; reuse it for the candidate
            let e = energy_pass(&g, nb, &self.next, pot, eps, mu, &mut self.div_t);
            if e <= self.energy_now + tol && e.is_finite() {
                let diff = pairwise_sum(&moved) * g.h() * g.h();
                std::mem::swap(&mut self.div_u, &mut self.div_t);
                self.div_valid = true;
                self.accept(dt, e, diff);
                if halving > 0 {
                    self.state.dt = dt;
                }
                return Ok(());
            }
            self.ledger.rejections += 1;
            dt *= 0.5;
        }
        Err(Error::StepAborted { t: self.state.t, halvings: self.params.max_halvings })
    }

    /// Moves the candidate into the state; `diff = ∫|u_new − u|²`.
    fn accept(&mut self, dt: f64, e: f64, diff: f64) {
        self.ledger.dissipation += self.state.eps * diff / dt;
        std::mem::swap(&mut self.next, &mut self.state.u);
        self.state.t += dt;
        if e > self.energy_now + 1e-8 * self.ledger.initial() {
            self.ledger.violations += 1;
        }
        self.energy_now = e;
        self.ledger.values.push((self.state.t, e));
        self.ledger.steps += 1;
    }

    /// `(I − dt(Δ + μ∇div) + dt·S/ε²) v` on active nodes for `v` vanishing on pinned nodes.
    fn imex_apply(&self, v: &VectorField2, out: &mut VectorField2, dt: f64, div: &mut [f64]) {
        let g = v.grid;
        let h = g.h();
        let kd = 1.0 / (12.0 * h);
        let kl = 1.0 / (6.0 * h * h);
        let shift = 1.0 + dt * self.state.stabilization / (self.state.eps * self.state.eps);
        let mu = self.state.mu;
        if mu != 0.0 {
            for_each_active(&g, &self.nb, |st| div[st.c] = (st.dx(&v.x) + st.dy(&v.y)) * kd);
        }
        let div = &*div;
        for_each_active(&g, &self.nb, |st| {
            let mut lx = st.lap(&v.x) * kl;
            let mut ly = st.lap(&v.y) * kl;
            if mu != 0.0 {
                lx += mu * st.dx(div) * kd;
                ly += mu * st.dy(div) * kd;
            }
            out.x[st.c] = shift * v.x[st.c] - dt * lx;
            out.y[st.c] = shift * v.y[st.c] - dt * ly;
        });
    }

    fn imex_step(&mut self, dt: f64) -> Result<()> {
        let g = self.grid();
        let len = g.len();
        let eps2 = self.state.eps * self.state.eps;
        let s = self.state.stabilization;
        let u = &self.state.u;
        let pinned: Vec<bool> = (0..len).map(|n| !g.is_active(n % g.nx(), n / g.nx())).collect();

        // right-hand side on active nodes, with pinned values moved across
        let mut b = VectorField2::zeros(g);
        for n in 0..len {
            if !pinned[n] {
                let (_, ratio) = self.potential.density_and_ratio(u.x[n] * u.x[n] + u.y[n] * u.y[n]);
                b.x[n] = u.x[n] + dt * (s / eps2 - ratio / eps2) * u.x[n];
                b.y[n] = u.y[n] + dt * (s / eps2 - ratio / eps2) * u.y[n];
            }
        }
        let mut bnd = VectorField2::zeros(g);
        for n in 0..len {
            if pinned[n] {
                bnd.x[n] = u.x[n];
                bnd.y[n] = u.y[n];
            }
        }
        let mut div = vec![0.0; len];
        let mut ab = VectorField2::zeros(g);
        // A applied to the pinned part; the identity and shift terms vanish on active nodes
        self.imex_apply(&bnd, &mut ab, dt, &mut div);
        for n in 0..len {
            if !pinned[n] {
                b.x[n] -= ab.x[n];
                b.y[n] -= ab.y[n];
            }
        }

        let dot = |a: &VectorField2, c: &VectorField2| -> f64 {
            let mut acc = Vec::with_capacity(len);
            for n in 0..len {
                acc.push(a.x[n] * c.x[n] + a.y[n] * c.y[n]);
            }
            crate::fields::pairwise_sum(&acc)
        };
        let mut x = VectorField2::zeros(g);
        for n in 0..len {
            if !pinned[n] {
                x.x[n] = u.x[n];
                x.y[n] = u.y[n];
            }
        }
        let mut ax = VectorField2::zeros(g);
        self.imex_apply(&x, &mut ax, dt, &mut div);
        let mut r = VectorField2::zeros(g);
        for n in 0..len {
            r.x[n] = b.x[n] - ax.x[n];
            r.y[n] = b.y[n] - ax.y[n];
        }
        let bnorm = dot(&b, &b).sqrt().max(1e-300);
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let mut ap = VectorField2::zeros(g);
        let mut iters = 0;
        while rr.sqrt() > self.params.cg_tol * bnorm {
            if iters >= self.params.cg_max_iter {
                return Err(Error::CgDiverged { iterations: iters, residual: rr.sqrt() / bnorm });
            }
            self.imex_apply(&p, &mut ap, dt, &mut div);
            let alpha = rr / dot(&p, &ap);
            for n in 0..len {
                x.x[n] += alpha * p.x[n];
                x.y[n] += alpha * p.y[n];
                r.x[n] -= alpha * ap.x[n];
                r.y[n] -= alpha * ap.y[n];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            for n in 0..len {
                p.x[n] = r.x[n] + beta * p.x[n];
                p.y[n] = r.y[n] + beta * p.y[n];
            }
            rr = rr_new;
            iters += 1;
        }
        for n in 0..len {
            if pinned[n] {
                x.x[n] = u.x[n];
                x.y[n] = u.y[n];
            }
        }
        let e = energy(&x, self.potential, self.state.eps, self.state.mu);
        let diff = integrate_with(&g, |n| {
            let a = x.x[n] - self.state.u.x[n];
            let b = x.y[n] - self.state.u.y[n];
            a * a + b * b
        });
        self.next = x;
        self.div_valid = false;
        self.accept(dt, e, diff);
        Ok(())
    }

    /// Steps to `t_end`, calling `frame` at the start, at every multiple of `stride` and at the end.
    pub fn run(
        &mut self,
        t_end: f64,
        stride: f64,
        mut frame: impl FnMut(usize, &SolverState) -> Result<()>,
    ) -> Result<RunSummary> {
        if !(t_end > self.state.t) {
            return Err(Error::Config(format!("end time {t_end} must exceed the current time {}", self.state.t)));
        }
        if !(stride > 0.0) {
            return Err(Error::Config("snapshot stride must be positive".into()));
        }
        let t0 = self.state.t;
        let mut index = 0;
        frame(index, &self.state).map_err(|e| Error::Frame { frame: index, source: Box::new(e) })?;
        let n_frames = ((t_end - t0) / stride - 1e-9).ceil() as usize;
        for k in 1..=n_frames {
            let target = (t0 + k as f64 * stride).min(t_end);
            self.advance_to(target)?;
            index += 1;
            frame(index, &self.state).map_err(|e| Error::Frame { frame: index, source: Box::new(e) })?;
        }
        Ok(RunSummary {
            t: self.state.t,
            steps: self.ledger.steps,
            energy_initial: self.ledger.initial(),
            energy_final: self.energy_now,
            violations: self.ledger.violations,
            rejections: self.ledger.rejections,
            frames: index + 1,
        })
    }

    /// Steps until `t` is reached exactly, shortening the final step.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        while self.state.t < t {
            let remaining = t - self.state.t;
            if remaining <= self.state.dt * (1.0 + 1e-9) {
                let keep = self.state.dt;
                self.step_with(remaining)?;
                self.state.t = t;
                if let Some(last) = self.ledger.values.last_mut() {
                    last.0 = t;
                }
                // a rejected short step already lowered dt; otherwise keep the nominal one
                self.state.dt = self.state.dt.min(keep);
                if self.state.dt == remaining {
                    self.state.dt = keep;
                }
            } else {
                self.step()?;
            }
        }
        Ok(())
    }

    /// Runs `n` steps of the current `dt`.
    pub fn steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub t: f64,
    pub steps: usize,
    pub energy_initial: f64,
    pub energy_final: f64,
    pub violations: usize,
    pub rejections: usize,
    pub frames: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Boundary, Sides};
    use crate::potential::{traveling_wave, Pinning};
    use approx::assert_abs_diff_eq;

    fn vortex(g: Grid2D, eps: f64, r0: f64) -> VectorField2 {
        let p = BulkPotential::csh(true);
        let w = traveling_wave(&p, 8.0, 2001, Pinning::HalfMass).unwrap();
        VectorField2::from_fn(g, |x, y| {
            let (dx, dy) = (x - 0.5, y - 0.5);
            let r = dx.hypot(dy);
            if r == 0.0 {
                return [0.0, 0.0];
            }
            let s = w.eval((r0 - r) / eps) * (r / eps).tanh();
            [-s * dy / r, s * dx / r]
        })
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(32).unwrap();
        let mut s = Solver::new(VectorField2::zeros(g), &p, SolverParams::new(0.1, 0.1, Scheme::ExplicitRk2)).unwrap();
        assert_eq!(s.energy(), 0.0);
        s.run(1.0, 0.25, |_, st| {
            assert!(st.u.x.iter().chain(&st.u.y).all(|v| *v == 0.0));
            Ok(())
        })
        .unwrap();
        assert!(s.ledger.values.iter().all(|v| v.1 == 0.0));
    }

    #[test]
    fn planar_front_energy_is_mass_per_length() {
        let p = BulkPotential::csh(true);
        let eps: f64 = 0.05;
        let w = traveling_wave(&p, 8.0, 4001, Pinning::HalfMass).unwrap();
        let h = eps / 4.0;
        let n = (1.0 / h).round() as usize;
        let sides = Sides {
            west: Boundary::Fixed,
            east: Boundary::Fixed,
            south: Boundary::Periodic,
            north: Boundary::Periodic,
        };
        let g = Grid2D::new(n + 1, 16, h, [-0.5, 0.0], sides).unwrap();
        let u = VectorField2::from_fn(g, |x, _| [0.0, w.eval(x / eps)]);
        let a = energy(&u, &p, eps, 0.3);
        let ly = g.extent()[1];
        assert!((a - ly).abs() <= 0.02 * ly, "A = {a}, m·L = {ly}");
    }

    #[test]
    fn divergence_term_vanishes_for_tangential_field() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(128).unwrap();
        let u = vortex(g, 0.04, 0.3);
        let a1 = energy(&u, &p, 0.04, 0.1);
        let a2 = energy(&u, &p, 0.04, 0.2);
        // the nine-point divergence of s(r)τ is O(h⁴) rather than exactly zero
        assert!((a1 - a2).abs() <= 1e-6 * a1, "{a1} {a2}");
    }

    #[test]
    fn explicit_dissipates_and_mu_zero_matches_isotropic() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(64).unwrap();
        let u = vortex(g, 0.08, 0.3);
        let mut a = Solver::new(u.clone(), &p, SolverParams::new(0.08, 0.0, Scheme::ExplicitRk2)).unwrap();
        a.steps(200).unwrap();
        assert_eq!(a.ledger.violations, 0);
        assert_eq!(a.ledger.rejections, 0);
        assert!(a.ledger.max_increase() <= 1e-8 * a.ledger.initial());
        assert!(a.ledger.last() < a.ledger.initial());
    }

    #[test]
    fn reflection_symmetry_is_preserved() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(64).unwrap();
        // off-centre vortex, symmetric under y ↦ 1 − y with u₂ ↦ −u₂ flipped: use u = (u₁, u₂) with u₁ even, u₂ odd
        let u = VectorField2::from_fn(g, |x, y| {
            let r = (x - 0.45).hypot(y - 0.5);
            let s = 0.5 * (1.0 + ((0.3 - r) / 0.05).tanh());
            [s * (1.0 + 0.3 * (x * 7.0).sin()), s * (y - 0.5) * 3.0]
        });
        let mut s = Solver::new(u, &p, SolverParams::new(0.08, 0.2, Scheme::ExplicitRk2)).unwrap();
        s.steps(1000).unwrap();
        let u = &s.state.u;
        let mut worst: f64 = 0.0;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let a = u.at(i, j);
                let b = u.at(i, g.ny() - 1 - j);
                worst = worst.max((a[0] - b[0]).abs()).max((a[1] + b[1]).abs());
            }
        }
        assert!(worst <= 1e-12, "{worst:e}");
    }

    #[test]
    fn rotation_equivariance() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(64).unwrap();
        let f = |x: f64, y: f64| -> [f64; 2] {
            let r = (x - 0.52).hypot(y - 0.47);
            let s = 0.5 * (1.0 + ((0.25 - r) / 0.05).tanh());
            [s * (x - 0.3), s * (y * y - 0.2)]
        };
        let u = VectorField2::from_fn(g, f);
        // rotate by 90° about the square's centre: (x, y) ↦ (1 − y, x), vectors (a, b) ↦ (−b, a)
        let n = g.nx() - 1;
        let mut v = VectorField2::zeros(g);
        for j in 0..=n {
            for i in 0..=n {
                let [a, b] = u.at(i, j);
                let k = g.index(n - j, i);
                v.x[k] = -b;
                v.y[k] = a;
            }
        }
        let params = SolverParams::new(0.08, 0.15, Scheme::ExplicitRk2);
        let mut su = Solver::new(u, &p, params.clone()).unwrap();
        let mut sv = Solver::new(v, &p, params).unwrap();
        su.steps(100).unwrap();
        sv.steps(100).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..=n {
            for i in 0..=n {
                let [a, b] = su.state.u.at(i, j);
                let [c, d] = sv.state.u.at(n - j, i);
                worst = worst.max((c + b).abs()).max((d - a).abs());
            }
        }
        assert!(worst <= 1e-13, "{worst:e}");
    }

    #[test]
    fn mu_zero_is_bitwise_isotropic() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(48).unwrap();
        let u = vortex(g, 0.08, 0.3);
        let mut a = Solver::new(u.clone(), &p, SolverParams::new(0.08, 0.0, Scheme::ExplicitRk2)).unwrap();
        a.steps(50).unwrap();
        // hand-rolled isotropic Heun step as the reference
        let mut r = u;
        let dt = a.state.dt;
        let h = g.h();
        let lap = |v: &[f64], i: usize, j: usize| {
            let at = |ii: usize, jj: usize| v[g.index(ii, jj)];
            (4.0 * ((at(i + 1, j) + at(i - 1, j)) + (at(i, j + 1) + at(i, j - 1)))
                + ((at(i + 1, j + 1) + at(i - 1, j - 1)) + (at(i - 1, j + 1) + at(i + 1, j - 1)))
                - 20.0 * at(i, j))
                * (1.0 / (6.0 * h * h))
        };
        let ke = 1.0 / (0.08 * 0.08);
        let rhs = |v: &VectorField2| {
            let mut k = VectorField2::zeros(g);
            for j in 1..g.ny() - 1 {
                for i in 1..g.nx() - 1 {
                    let n = g.index(i, j);
                    let (_, ratio) = p.density_and_ratio(v.x[n] * v.x[n] + v.y[n] * v.y[n]);
                    k.x[n] = lap(&v.x, i, j) - ratio * v.x[n] * ke;
                    k.y[n] = lap(&v.y, i, j) - ratio * v.y[n] * ke;
                }
            }
            k
        };
        for _ in 0..50 {
            let k1 = rhs(&r);
            let mut t = r.clone();
            for n in 0..g.len() {
                t.x[n] = r.x[n] + dt * k1.x[n];
                t.y[n] = r.y[n] + dt * k1.y[n];
            }
            let k2 = rhs(&t);
            for n in 0..g.len() {
                r.x[n] += 0.5 * dt * (k1.x[n] + k2.x[n]);
                r.y[n] += 0.5 * dt * (k1.y[n] + k2.y[n]);
            }
        }
        for n in 0..g.len() {
            assert_eq!(a.state.u.x[n].to_bits(), r.x[n].to_bits());
            assert_eq!(a.state.u.y[n].to_bits(), r.y[n].to_bits());
        }
    }

    #[test]
    fn imex_matches_explicit() {
        let p = BulkPotential::csh(true);
        let eps = 0.04;
        let g = Grid2D::unit_square(100).unwrap();
        let u = vortex(g, eps, 0.3);
        let t_end = 2e-4;
        let mut ex = Solver::new(u.clone(), &p, SolverParams::new(eps, 0.1, Scheme::ExplicitRk2)).unwrap();
        ex.advance_to(t_end).unwrap();
        let mut params = SolverParams::new(eps, 0.1, Scheme::StabilizedImex);
        params.dt = Some(5e-8);
        let mut im = Solver::new(u, &p, params).unwrap();
        im.advance_to(t_end).unwrap();
        let diff = ex.state.u.l2_distance(&im.state.u).unwrap();
        assert!(diff <= 1e-3, "{diff:e}");
        assert_abs_diff_eq!(ex.state.t, im.state.t, epsilon = 1e-15);
    }

    #[test]
    fn imex_dissipates_at_large_steps() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(64).unwrap();
        let u = vortex(g, 0.08, 0.3);
        let mut params = SolverParams::new(0.08, 0.1, Scheme::StabilizedImex);
        params.dt = Some(1e-4);
        let mut s = Solver::new(u, &p, params).unwrap();
        s.steps(20).unwrap();
        assert_eq!(s.ledger.violations, 0);
    }

    #[test]
    fn rejects_oversized_explicit_step() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(32).unwrap();
        let mut params = SolverParams::new(0.1, 0.0, Scheme::ExplicitRk2);
        params.dt = Some(1.0);
        assert!(matches!(Solver::new(VectorField2::zeros(g), &p, params), Err(Error::Config(_))));
    }
}
