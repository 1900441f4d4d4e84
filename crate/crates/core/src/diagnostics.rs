//! Per-frame measurements of a diffuse interface against its reference curve.
//!
//! `ψ = d_F(|u|)` is differenced directly for level sets, coarea masses and the anchoring
//! band. The modulated energy instead uses the chain-rule gradient
//! `∇ψ = g(|u|) ûᵀ∇u` built from the same nodal Jacobian as the Dirichlet term, so that
//! the completed-square bounds hold node by node and survive quadrature.

use crate::fields::{divergence, gradient, integrate_with, rot, ScalarField, VectorField2};
use crate::geometry::{phi, InterfaceGeometry};
use crate::potential::BulkPotential;
use crate::solver::energy;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::TAU;

/// `ψ = d_F(|u|)` at every node.
pub fn psi_field(u: &VectorField2, p: &BulkPotential) -> ScalarField {
    let mut s = ScalarField::zeros(u.grid);
    for k in 0..u.x.len() {
        s.data[k] = p.d_f(u.x[k].hypot(u.y[k]));
    }
    s
}

/// `∇ψ` by differencing the ψ field.
pub fn psi_gradient(psi: &ScalarField) -> VectorField2 {
    gradient(psi)
}

/// Nodal Jacobian: `jac[i]` holds `∇u_i`.
pub fn jacobian(u: &VectorField2) -> [VectorField2; 2] {
    let g = u.grid;
    [
        gradient(&ScalarField { grid: g, data: u.x.clone() }),
        gradient(&ScalarField { grid: g, data: u.y.clone() }),
    ]
}

/// Pointwise quantities at one node.
#[derive(Debug, Clone, Copy, Default)]
pub struct NodeTerms {
    pub modulus: f64,
    /// `û`, zero where `u = 0`.
    pub unit: [f64; 2],
    /// `|∇u|²`.
    pub grad2: f64,
    /// `ûᵀ∇u`, so that `|Π∇u| = |w|`.
    pub w: [f64; 2],
    /// `|∇u − Π∇u|²`.
    pub perp2: f64,
    pub div: f64,
    /// `g(|u|) = |∂d_F(u)|`.
    pub g: f64,
    pub density: f64,
}

impl NodeTerms {
    pub fn at(u: [f64; 2], j0: [f64; 2], j1: [f64; 2], p: &BulkPotential) -> NodeTerms {
        let s = u[0].hypot(u[1]);
        let unit = if s > 0.0 { [u[0] / s, u[1] / s] } else { [0.0, 0.0] };
        let w = [unit[0] * j0[0] + unit[1] * j1[0], unit[0] * j0[1] + unit[1] * j1[1]];
        // ∇u − û ⊗ w, row by row
        let r0 = [j0[0] - unit[0] * w[0], j0[1] - unit[0] * w[1]];
        let r1 = [j1[0] - unit[1] * w[0], j1[1] - unit[1] * w[1]];
        NodeTerms {
            modulus: s,
            unit,
            grad2: j0[0] * j0[0] + j0[1] * j0[1] + j1[0] * j1[0] + j1[1] * j1[1],
            w,
            perp2: r0[0] * r0[0] + r0[1] * r0[1] + r1[0] * r1[0] + r1[1] * r1[1],
            div: j0[0] + j1[1],
            g: p.g(s),
            density: p.density(s * s),
        }
    }

    pub fn proj_norm(&self) -> f64 {
        self.w[0].hypot(self.w[1])
    }

    /// Chain-rule `∇ψ = g ûᵀ∇u`.
    pub fn grad_psi(&self) -> [f64; 2] {
        [self.g * self.w[0], self.g * self.w[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulatedEnergyFrame {
    pub t: f64,
    pub modulated_energy: f64,
    /// The coercivity quantities, in order:
    /// `∫(ε/2)|∇u|² + F/ε − |∇ψ|`,
    /// `ε∫μ(div u)² + |∇u − Π∇u|²`,
    /// `∫(√ε|Π∇u| − |∂d_F|/√ε)²`,
    /// `∫(e + |∇ψ|)(1 − ξ·n_ε)` and `∫(e + |∇ψ|)min(d², 1)` with `e = (ε/2)|∇u|² + F/ε`.
    pub gaps: [f64; 5],
    /// `A_ε(u)` as dissipated by the solver.
    pub energy: f64,
    pub grad_psi_l1: f64,
    pub l4_norm: f64,
    pub sup_norm: f64,
}

pub fn modulated_energy(u: &VectorField2, geometry: &InterfaceGeometry, p: &BulkPotential, eps: f64, mu: f64) -> ModulatedEnergyFrame {
    let g = u.grid;
    let [j0, j1] = jacobian(u);
    let xi = &geometry.ext.xi;
    let d = &geometry.sdf.d.data;
    let n = g.len();
    let mut parts = vec![[0.0; 6]; n];
    for k in 0..n {
        let t = NodeTerms::at([u.x[k], u.y[k]], [j0.x[k], j0.y[k]], [j1.x[k], j1.y[k]], p);
        let gp = t.grad_psi();
        let gpn = t.g * t.proj_norm();
        let xi_gp = xi.x[k] * gp[0] + xi.y[k] * gp[1];
        let xi_n = if gpn > 0.0 { xi_gp / gpn } else { 0.0 };
        let e = 0.5 * eps * t.grad2 + t.density / eps;
        let pn = t.proj_norm();
        let c = eps.sqrt() * pn - t.g / eps.sqrt();
        parts[k] = [
            0.5 * eps * mu * t.div * t.div + e - xi_gp,
            e - gpn,
            eps * (mu * t.div * t.div + t.perp2),
            c * c,
            (e + gpn) * (1.0 - xi_n),
            (e + gpn) * (d[k] * d[k]).min(1.0),
        ];
    }
    let integral = |m: usize| integrate_with(&g, |k| parts[k][m]);
    let psi = psi_field(u, p);
    let gpsi = psi_gradient(&psi);
    ModulatedEnergyFrame {
        t: geometry.t,
        modulated_energy: integral(0),
        gaps: [integral(1), integral(2), integral(3), integral(4), integral(5)],
        energy: energy(u, p, eps, mu),
        grad_psi_l1: integrate_with(&g, |k| gpsi.x[k].hypot(gpsi.y[k])),
        l4_norm: integrate_with(&g, |k| {
            let s2 = u.x[k] * u.x[k] + u.y[k] * u.y[k];
            s2 * s2
        })
        .powf(0.25),
        sup_norm: u.max_norm(),
    }
}

/// Which coercivity bounds hold on a frame, with quadrature tolerance `10⁻⁸·max(1, A_ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoercivityCheck {
    pub a_nonnegative: bool,
    pub a_bound: bool,
    pub b_bound: bool,
    pub c_bound: bool,
    /// `(d) ≤ 4E`, from `1 − ξ·n_ε ≤ 2` applied to both parts of the weight.
    pub d_bound: bool,
}

impl CoercivityCheck {
    pub fn of(frame: &ModulatedEnergyFrame) -> CoercivityCheck {
        let tol = 1e-8 * frame.energy.max(1.0);
        let e = frame.modulated_energy;
        let [a, b, c, d, _] = frame.gaps;
        CoercivityCheck {
            a_nonnegative: a >= -tol,
            a_bound: a <= e + tol,
            b_bound: b <= 2.0 * e + tol,
            c_bound: c <= 2.0 * e + tol,
            d_bound: d <= 4.0 * e + tol,
        }
    }

    /// The bounds with universal constants: `(a) ≥ 0`, `(a) ≤ E`, `(b) ≤ 2E`, `(c) ≤ 2E`.
    pub fn core_holds(&self) -> bool {
        self.a_nonnegative && self.a_bound && self.b_bound && self.c_bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseError {
    /// `∫|ψ − m·1_{d>0}|`.
    pub bulk: f64,
    /// `∫_{|d|<δ₀} |ψ − m·1_{d>0}| |d|`.
    pub weighted: f64,
}

pub fn phase_error(u: &VectorField2, geometry: &InterfaceGeometry, p: &BulkPotential) -> PhaseError {
    let g = u.grid;
    let psi = psi_field(u, p);
    let d = &geometry.sdf.d.data;
    let d0 = geometry.ext.cutoff.delta0;
    let m = p.m();
    let err = |k: usize| (psi.data[k] - if d[k] > 0.0 { m } else { 0.0 }).abs();
    PhaseError {
        bulk: integrate_with(&g, err),
        weighted: integrate_with(&g, |k| if d[k].abs() < d0 { err(k) * d[k].abs() } else { 0.0 }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

impl Polyline {
    pub fn length(&self) -> f64 {
        let n = self.points.len();
        let mut l: f64 = self.points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum();
        if self.closed && n > 1 {
            l += (self.points[0][0] - self.points[n - 1][0]).hypot(self.points[0][1] - self.points[n - 1][1]);
        }
        l
    }

    /// Shoelace area; zero for open polylines.
    pub fn signed_area(&self) -> f64 {
        if !self.closed {
            return 0.0;
        }
        let n = self.points.len();
        let mut a = 0.0;
        for i in 0..n {
            let (p, q) = (self.points[i], self.points[(i + 1) % n]);
            a += p[0] * q[1] - q[0] * p[1];
        }
        0.5 * a
    }
}

/// Level set `{s = level}` by marching squares, chained into polylines. Saddle cells are
/// resolved with the cell average.
pub fn contours(s: &ScalarField, level: f64) -> Vec<Polyline> {
    let g = s.grid;
    let (nx, ny) = (g.nx(), g.ny());
    let v = |i: usize, j: usize| s.data[g.index(i, j)];
    // edge keys: 2·node for the edge to the east, 2·node + 1 for the edge to the north
    let point_on = |key: usize| -> [f64; 2] {
        let node = key / 2;
        let (i, j) = (node % nx, node / nx);
        let (i2, j2) = if key % 2 == 0 { (i + 1, j) } else { (i, j + 1) };
        let (a, b) = (v(i, j), v(i2, j2));
        let t = (level - a) / (b - a);
        let (x0, y0) = (g.x(i), g.y(j));
        let (x1, y1) = (g.x(i2), g.y(j2));
        [x0 + t * (x1 - x0), y0 + t * (y1 - y0)]
    };
    let mut segments: Vec<[usize; 2]> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            let above = c.map(|x| x > level);
            // edges counterclockwise: south, east, north, west
            let keys = [2 * g.index(i, j), 2 * g.index(i + 1, j) + 1, 2 * g.index(i, j + 1), 2 * g.index(i, j) + 1];
            let crossed: Vec<usize> = (0..4).filter(|&e| above[e] != above[(e + 1) % 4]).collect();
            match crossed.len() {
                2 => segments.push([keys[crossed[0]], keys[crossed[1]]]),
                4 => {
                    let centre = 0.25 * (c[0] + c[1] + c[2] + c[3]) > level;
                    if centre == above[0] {
                        // corners 1 and 3 are cut off
                        segments.push([keys[0], keys[1]]);
                        segments.push([keys[2], keys[3]]);
                    } else {
                        segments.push([keys[3], keys[0]]);
                        segments.push([keys[1], keys[2]]);
                    }
                }
                _ => {}
            }
        }
    }
    let mut by_key: HashMap<usize, Vec<usize>> = HashMap::new();
    for (n, seg) in segments.iter().enumerate() {
        by_key.entry(seg[0]).or_default().push(n);
        by_key.entry(seg[1]).or_default().push(n);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    let next_from = |key: usize, used: &[bool]| -> Option<usize> { by_key.get(&key)?.iter().copied().find(|&n| !used[n]) };
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut chain = vec![segments[start][0], segments[start][1]];
        // walk forward, then backward from the start
        for forward in [true, false] {
            loop {
                let end = if forward { *chain.last().unwrap() } else { chain[0] };
                let Some(n) = next_from(end, &used) else { break };
                used[n] = true;
                let other = if segments[n][0] == end { segments[n][1] } else { segments[n][0] };
                if forward {
                    chain.push(other);
                } else {
                    chain.insert(0, other);
                }
            }
        }
        let closed = chain.len() > 2 && chain[0] == *chain.last().unwrap();
        if closed {
            chain.pop();
        }
        out.push(Polyline { points: chain.into_iter().map(point_on).collect(), closed });
    }
    out
}

/// Thresholds `b = m/2`, `q = 2m` and the band `{b < ψ < q}`.
#[derive(Debug, Clone)]
pub struct LevelBand {
    pub b: f64,
    pub q: f64,
    pub delta: f64,
    pub mask: Vec<bool>,
    pub contours_b: Vec<Polyline>,
    pub contours_q: Vec<Polyline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSetLengths {
    pub length_b: f64,
    pub length_q: f64,
    /// Length of the longest `b`-contour.
    pub outer_length_b: f64,
    /// `√(|area|/π)` of the longest closed `b`-contour.
    pub radius_b: f64,
    pub reference_length: f64,
    pub relative_error: f64,
}

pub fn level_set_report(psi: &ScalarField, p: &BulkPotential, delta: f64, reference_length: f64) -> Result<(LevelBand, LevelSetLengths)> {
    let m = p.m();
    if !(delta > 0.0 && delta < m / 8.0) {
        return Err(Error::Config(format!("threshold window {delta} must lie in (0, m/8)")));
    }
    let (b, q) = (0.5 * m, 2.0 * m);
    let contours_b = contours(psi, b);
    if contours_b.is_empty() {
        return Err(Error::NoCrossing(format!("ψ never crosses b = {b}")));
    }
    let contours_q = contours(psi, q);
    let length_b: f64 = contours_b.iter().map(Polyline::length).sum();
    // an empty f64 sum is −0.0
    let length_q = contours_q.iter().fold(0.0, |a, c| a + c.length());
    let outer = contours_b.iter().max_by(|a, c| a.length().total_cmp(&c.length())).unwrap();
    let lengths = LevelSetLengths {
        length_b,
        length_q,
        outer_length_b: outer.length(),
        radius_b: (outer.signed_area().abs() / std::f64::consts::PI).sqrt(),
        reference_length,
        relative_error: (length_b - reference_length).abs() / reference_length,
    };
    let mask = psi.data.iter().map(|&v| b < v && v < q).collect();
    Ok((LevelBand { b, q, delta, mask, contours_b, contours_q }, lengths))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchoringFrame {
    /// `∫_band |∇ψ|`.
    pub theta_k: f64,
    /// `∫_band (û·n_ε)² |∇ψ|`.
    pub mu_k: f64,
    pub mu_over_eps: f64,
}

pub fn anchoring_defect(u: &VectorField2, psi: &ScalarField, band: &LevelBand, eps: f64) -> AnchoringFrame {
    let g = u.grid;
    let gp = psi_gradient(psi);
    let mut dens = vec![(0.0, 0.0); g.len()];
    for (k, d) in dens.iter_mut().enumerate() {
        if !band.mask[k] {
            continue;
        }
        let a = gp.x[k].hypot(gp.y[k]);
        let s = u.x[k].hypot(u.y[k]);
        if a == 0.0 || s == 0.0 {
            *d = (a, 0.0);
            continue;
        }
        let c = (u.x[k] * gp.x[k] + u.y[k] * gp.y[k]) / (s * a);
        *d = (a, c * c * a);
    }
    let theta_k = integrate_with(&g, |k| dens[k].0);
    let mu_k = integrate_with(&g, |k| dens[k].1);
    AnchoringFrame { theta_k, mu_k, mu_over_eps: mu_k / eps }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryBounds {
    /// `∫η₁|∇u(I − n⊗n)|²`, `η₁ = 1` on `|d| ≤ 3δ₀`, zero beyond `4δ₀`.
    pub tangential: f64,
    /// `∫|u|²|∇û|²`.
    pub director_gradient: f64,
    /// `∫|û·∇|u||²`.
    pub amplitude_along: f64,
    /// `∫|∇u|² + F/ε²` over `{d > δ₀}` and `{d < −δ₀}`.
    pub bulk_plus: f64,
    pub bulk_minus: f64,
    pub e_over_eps: f64,
}

pub fn auxiliary_bounds(u: &VectorField2, geometry: &InterfaceGeometry, p: &BulkPotential, eps: f64, modulated: f64) -> AuxiliaryBounds {
    let g = u.grid;
    let [j0, j1] = jacobian(u);
    let d0 = geometry.ext.cutoff.delta0;
    let d = &geometry.sdf.d.data;
    let nrm = &geometry.sdf.grad;
    let mut parts = vec![[0.0; 5]; g.len()];
    for (k, part) in parts.iter_mut().enumerate() {
        let t = NodeTerms::at([u.x[k], u.y[k]], [j0.x[k], j0.y[k]], [j1.x[k], j1.y[k]], p);
        let a = d[k].abs();
        let eta1 = if a <= 3.0 * d0 { 1.0 } else { phi((a - 3.0 * d0) / d0) };
        let tau = [-nrm.y[k], nrm.x[k]];
        let jt = [j0.x[k] * tau[0] + j0.y[k] * tau[1], j1.x[k] * tau[0] + j1.y[k] * tau[1]];
        let along = t.unit[0] * t.w[0] + t.unit[1] * t.w[1];
        let bulk = t.grad2 + t.density / (eps * eps);
        *part = [
            eta1 * (jt[0] * jt[0] + jt[1] * jt[1]),
            t.perp2,
            along * along,
            if d[k] > d0 { bulk } else { 0.0 },
            if d[k] < -d0 { bulk } else { 0.0 },
        ];
    }
    let integral = |m: usize| integrate_with(&g, |k| parts[k][m]);
    AuxiliaryBounds {
        tangential: integral(0),
        director_gradient: integral(1),
        amplitude_along: integral(2),
        bulk_plus: integral(3),
        bulk_minus: integral(4),
        e_over_eps: modulated / eps,
    }
}

/// `φ(x) = (1 − |x − c|²/ρ²)³` on the disc of radius `ρ`; `C²` across its rim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Bump {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let q = 1.0 - ((x - self.center[0]).powi(2) + (y - self.center[1]).powi(2)) / (self.radius * self.radius);
        if q > 0.0 {
            q * q * q
        } else {
            0.0
        }
    }

    pub fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let r2 = self.radius * self.radius;
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let q = 1.0 - (dx * dx + dy * dy) / r2;
        if q > 0.0 {
            let f = -6.0 * q * q / r2;
            [f * dx, f * dy]
        } else {
            [0.0, 0.0]
        }
    }
}

/// `radii.len() × per_radius` bumps centred `offset` away from `center` at seeded angles.
pub fn bump_family(center: [f64; 2], offset: f64, radii: &[f64], per_radius: usize, seed: u64) -> Vec<Bump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Vec<f64> = (0..per_radius).map(|_| rng.gen::<f64>() * TAU).collect();
    let mut out = Vec::with_capacity(radii.len() * per_radius);
    for &radius in radii {
        for a in &angles {
            out.push(Bump { center: [center[0] + offset * a.cos(), center[1] + offset * a.sin()], radius });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfResidual {
    pub bump: Bump,
    /// Support inside `{d > 3ε}`.
    pub admissible: bool,
    /// `∫(∂t u ∧ u)φ`, `μ∫(div u)·rot(φu)`, `∫∇φ·(∇u ∧ u)`.
    pub terms: [f64; 3],
    pub raw: f64,
    /// `|raw|` over the largest `∫|integrand|` of the three terms.
    pub normalized: f64,
}

/// Weak-form residual of the Oseen-Frank flow, with `u` at the midpoint of the two frames
/// and `∂t u` their difference quotient.
pub fn of_residual(
    u_prev: &VectorField2,
    u_next: &VectorField2,
    dt: f64,
    mu: f64,
    bumps: &[Bump],
    geometry: &InterfaceGeometry,
    eps: f64,
) -> Result<Vec<OfResidual>> {
    let g = u_next.grid;
    if u_prev.grid != g {
        return Err(Error::GridMismatch);
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("frame spacing {dt} must be positive")));
    }
    let n = g.len();
    let mid = VectorField2 {
        grid: g,
        x: (0..n).map(|k| 0.5 * (u_prev.x[k] + u_next.x[k])).collect(),
        y: (0..n).map(|k| 0.5 * (u_prev.y[k] + u_next.y[k])).collect(),
    };
    let [j0, j1] = jacobian(&mid);
    let div = divergence(&mid);
    let d = &geometry.sdf.d.data;
    let mut out = Vec::with_capacity(bumps.len());
    for bump in bumps {
        let phi_at = |k: usize| bump.value(g.x(k % g.nx()), g.y(k / g.nx()));
        let admissible = (0..n).all(|k| phi_at(k) == 0.0 || d[k] > 3.0 * eps);
        let phi_u = VectorField2 {
            grid: g,
            x: (0..n).map(|k| phi_at(k) * mid.x[k]).collect(),
            y: (0..n).map(|k| phi_at(k) * mid.y[k]).collect(),
        };
        let rot_phi_u = rot(&phi_u);
        let mut dens = vec![[0.0; 3]; n];
        for (k, t) in dens.iter_mut().enumerate() {
            let ph = phi_at(k);
            let (ux, uy) = (mid.x[k], mid.y[k]);
            let (tx, ty) = ((u_next.x[k] - u_prev.x[k]) / dt, (u_next.y[k] - u_prev.y[k]) / dt);
            let gphi = bump.gradient(g.x(k % g.nx()), g.y(k / g.nx()));
            // ∂_k u ∧ u with a ∧ b = a₁b₂ − a₂b₁
            let w0 = j0.x[k] * uy - j1.x[k] * ux;
            let w1 = j0.y[k] * uy - j1.y[k] * ux;
            *t = [(tx * uy - ty * ux) * ph, mu * div.data[k] * rot_phi_u.data[k], gphi[0] * w0 + gphi[1] * w1];
        }
        let terms = [0, 1, 2].map(|m| integrate_with(&g, |k| dens[k][m]));
        let scale = [0, 1, 2].map(|m| integrate_with(&g, |k| dens[k][m].abs())).into_iter().fold(0.0, f64::max);
        let raw = terms[0] + terms[1] + terms[2];
        out.push(OfResidual { bump: *bump, admissible, terms, raw, normalized: if scale > 0.0 { raw.abs() / scale } else { 0.0 } });
    }
    if !out.iter().any(|r| r.admissible) {
        return Err(Error::EmptyBulk(format!("no test function fits inside {{d > 3ε}} at ε = {eps}")));
    }
    Ok(out)
}

/// `ρ = |u|` and the phase, unwrapped along rows where `ρ > 1/2` and NaN elsewhere.
pub fn polar_extract(u: &VectorField2) -> (ScalarField, ScalarField) {
    let g = u.grid;
    let mut rho = ScalarField::zeros(g);
    let mut phase = ScalarField::zeros(g);
    for j in 0..g.ny() {
        let mut last: Option<f64> = None;
        for i in 0..g.nx() {
            let k = g.index(i, j);
            let r = u.x[k].hypot(u.y[k]);
            rho.data[k] = r;
            if r <= 0.5 {
                phase.data[k] = f64::NAN;
                continue;
            }
            let mut a = u.y[k].atan2(u.x[k]);
            if let Some(prev) = last {
                a += TAU * ((prev - a) / TAU).round();
            }
            phase.data[k] = a;
            last = Some(a);
        }
    }
    (rho, phase)
}

/// One row of the per-frame CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: f64,
    pub modulated_energy: f64,
    pub e_over_eps: f64,
    pub gap_a: f64,
    pub gap_b: f64,
    pub gap_c: f64,
    pub gap_d: f64,
    pub gap_e: f64,
    pub energy: f64,
    pub phase_l1: f64,
    pub phase_weighted: f64,
    pub length_b: f64,
    pub length_q: f64,
    pub radius_b: f64,
    pub theta_k: f64,
    pub mu_k: f64,
    /// Largest normalized weak residual over the admissible bumps; NaN when not evaluated.
    pub of_residual: f64,
    pub l4_norm: f64,
    pub grad_psi_l1: f64,
    pub sup_norm: f64,
    pub tangential: f64,
    pub coercivity_ok: bool,
}

/// Everything measured on one frame.
#[derive(Debug, Clone)]
pub struct FrameDiagnostics {
    pub energy: ModulatedEnergyFrame,
    pub coercivity: CoercivityCheck,
    pub phase: PhaseError,
    pub levels: Option<LevelSetLengths>,
    pub anchoring: Option<AnchoringFrame>,
    pub auxiliary: AuxiliaryBounds,
}

impl FrameDiagnostics {
    pub fn measure(u: &VectorField2, geometry: &InterfaceGeometry, p: &BulkPotential, eps: f64, mu: f64) -> FrameDiagnostics {
        let energy = modulated_energy(u, geometry, p, eps, mu);
        let psi = psi_field(u, p);
        let (levels, anchoring) = match level_set_report(&psi, p, p.m() / 16.0, geometry.length) {
            Ok((band, lengths)) => (Some(lengths), Some(anchoring_defect(u, &psi, &band, eps))),
            Err(_) => (None, None),
        };
        FrameDiagnostics {
            coercivity: CoercivityCheck::of(&energy),
            phase: phase_error(u, geometry, p),
            auxiliary: auxiliary_bounds(u, geometry, p, eps, energy.modulated_energy),
            energy,
            levels,
            anchoring,
        }
    }

    pub fn record(&self, eps: f64, of_residual: Option<f64>) -> FrameRecord {
        let e = &self.energy;
        let nan = f64::NAN;
        FrameRecord {
            t: e.t,
            modulated_energy: e.modulated_energy,
            e_over_eps: e.modulated_energy / eps,
            gap_a: e.gaps[0],
            gap_b: e.gaps[1],
            gap_c: e.gaps[2],
            gap_d: e.gaps[3],
            gap_e: e.gaps[4],
            energy: e.energy,
            phase_l1: self.phase.bulk,
            phase_weighted: self.phase.weighted,
            length_b: self.levels.map_or(nan, |l| l.length_b),
            length_q: self.levels.map_or(nan, |l| l.length_q),
            radius_b: self.levels.map_or(nan, |l| l.radius_b),
            theta_k: self.anchoring.map_or(nan, |a| a.theta_k),
            mu_k: self.anchoring.map_or(nan, |a| a.mu_k),
            of_residual: of_residual.unwrap_or(nan),
            l4_norm: e.l4_norm,
            grad_psi_l1: e.grad_psi_l1,
            sup_norm: e.sup_norm,
            tangential: self.auxiliary.tangential,
            coercivity_ok: self.coercivity.core_holds(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid2D;
    use crate::geometry::CutoffProfile;
    use crate::initdata::{make_well_prepared, DirectorFamily};
    use crate::potential::{traveling_wave, Pinning, TravelingWaveProfile};
    use approx::assert_abs_diff_eq;

    fn circle(n: usize) -> (Grid2D, InterfaceGeometry) {
        let g = Grid2D::unit_square(n).unwrap();
        let geom = InterfaceGeometry::shrinking_circle([0.5, 0.5], 0.3, 0.0, &g, CutoffProfile::new(0.05).unwrap()).unwrap();
        (g, geom)
    }

    fn profile(p: &BulkPotential) -> TravelingWaveProfile {
        traveling_wave(p, TravelingWaveProfile::default_half_width(p, 1e-12), 4001, Pinning::HalfMass).unwrap()
    }

    #[test]
    fn psi_of_constants() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(16).unwrap();
        assert!(psi_field(&VectorField2::zeros(g), &p).data.iter().all(|v| *v == 0.0));
        let one = VectorField2::from_fn(g, |x, _| [(x * 3.0).cos(), (x * 3.0).sin()]);
        let psi = psi_field(&one, &p);
        for j in 1..g.ny() - 1 {
            for i in 1..g.nx() - 1 {
                assert_abs_diff_eq!(psi.data[g.index(i, j)], p.m(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_has_zero_modulated_energy() {
        let p = BulkPotential::csh(true);
        let (g, geom) = circle(128);
        let f = modulated_energy(&VectorField2::zeros(g), &geom, &p, 0.04, 0.1);
        assert_eq!(f.modulated_energy, 0.0);
        assert_eq!(f.gaps, [0.0; 5]);
    }

    #[test]
    fn coarea_mass_of_planar_front() {
        let p = BulkPotential::csh(true);
        let eps = 0.05;
        let w = profile(&p);
        let h = eps / 4.0;
        let n = (1.0_f64 / h).round() as usize;
        let g = Grid2D::unit_square(n).unwrap();
        let u = VectorField2::from_fn(g, |x, _| [0.0, w.eval((x - 0.5) / eps)]);
        let gp = psi_gradient(&psi_field(&u, &p));
        // rows clear of the pinned top and bottom sides
        let mut total = 0.0;
        for j in 3..g.ny() - 3 {
            // stay clear of the jump to the pinned side at x = 1
            for i in 0..g.nx() - 3 {
                let k = g.index(i, j);
                total += gp.x[k].hypot(gp.y[k]) * g.h();
            }
        }
        let per_row = total / (g.ny() - 6) as f64;
        assert!((per_row - p.m()).abs() <= 0.02 * p.m(), "{per_row}");
    }

    #[test]
    fn pythagoras_and_chain_rule() {
        let p = BulkPotential::csh(true);
        let mut errs = Vec::new();
        for n in [64, 128] {
            let g = Grid2D::unit_square(n).unwrap();
            let u = VectorField2::from_fn(g, |x, y| {
                let a = 0.6 + 0.3 * (3.0 * x).sin() * (2.0 * y).cos();
                let t = 2.0 * x - y;
                [a * t.cos(), a * t.sin()]
            });
            let [j0, j1] = jacobian(&u);
            let gp = psi_gradient(&psi_field(&u, &p));
            let mut worst: f64 = 0.0;
            for j in 4..n - 3 {
                for i in 4..n - 3 {
                    let k = g.index(i, j);
                    let t = NodeTerms::at([u.x[k], u.y[k]], [j0.x[k], j0.y[k]], [j1.x[k], j1.y[k]], &p);
                    let pn = t.proj_norm();
                    assert!((t.perp2 + pn * pn - t.grad2).abs() <= 1e-12 * (1.0 + t.grad2));
                    if t.g > 1e-6 {
                        // |∇ψ| against |Π∇u||∂d_F|, and the projection identity
                        worst = worst.max((gp.x[k].hypot(gp.y[k]) - pn * t.g).abs());
                        let s = gp.x[k].hypot(gp.y[k]) / (t.g * t.g);
                        let (nx, ny) = (gp.x[k] / gp.x[k].hypot(gp.y[k]), gp.y[k] / gp.x[k].hypot(gp.y[k]));
                        let proj = [t.unit[0] * t.w[0], t.unit[0] * t.w[1], t.unit[1] * t.w[0], t.unit[1] * t.w[1]];
                        let guess = [s * t.g * t.unit[0] * nx, s * t.g * t.unit[0] * ny, s * t.g * t.unit[1] * nx, s * t.g * t.unit[1] * ny];
                        for (a, b) in proj.iter().zip(guess) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
            errs.push(worst);
        }
        assert!(errs[1] < 0.3 * errs[0], "{errs:?}");
        assert!(errs[1] < 1e-2, "{errs:?}");
    }

    #[test]
    fn coercivity_on_vortex_and_control() {
        let p = BulkPotential::csh(true);
        let (_, geom) = circle(128);
        let w = profile(&p);
        for fam in [DirectorFamily::Vortex, DirectorFamily::Constant { angle: 0.4 }] {
            let u = make_well_prepared(&fam, &geom, &w, 0.04).unwrap();
            let f = modulated_energy(&u, &geom, &p, 0.04, 0.2);
            let c = CoercivityCheck::of(&f);
            assert!(c.core_holds() && c.d_bound, "{fam:?}: {f:?}");
            assert!(f.gaps.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn phase_error_of_indicator() {
        let p = BulkPotential::csh(true);
        let (g, geom) = circle(400);
        // a unit field on the disc of radius 0.32 disagrees on the annulus 0.3 < r < 0.32
        let u = VectorField2::from_fn(g, |x, y| if (x - 0.5).hypot(y - 0.5) < 0.32 { [1.0, 0.0] } else { [0.0, 0.0] });
        let e = phase_error(&u, &geom, &p);
        let w = 0.02;
        let bulk = p.m() * std::f64::consts::PI * (0.32f64.powi(2) - 0.09);
        let weighted = p.m() * TAU * (0.3 * w * w / 2.0 + w * w * w / 3.0);
        assert!((e.bulk - bulk).abs() < 0.03 * bulk, "{} vs {bulk}", e.bulk);
        assert!((e.weighted - weighted).abs() < 0.05 * weighted, "{} vs {weighted}", e.weighted);
    }

    #[test]
    fn contour_of_smoothed_disc() {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(200).unwrap();
        let s = ScalarField::from_fn(g, |x, y| {
            let r = (x - 0.5).hypot(y - 0.45);
            p.m() * 0.5 * (1.0 + ((0.25 - r) / 0.01).tanh())
        });
        let (band, l) = level_set_report(&s, &p, p.m() / 16.0, TAU * 0.25).unwrap();
        assert_eq!(band.contours_b.len(), 1);
        assert!(band.contours_b[0].closed);
        assert!(l.relative_error < 0.05);
        assert_abs_diff_eq!(l.radius_b, 0.25, epsilon = 1e-3);
        assert_eq!(l.length_q, 0.0);
        assert!(level_set_report(&ScalarField::zeros(g), &p, 0.01, 1.0).is_err());
    }

    #[test]
    fn saddle_cells_give_two_segments() {
        let g = Grid2D::unit_square(16).unwrap();
        let mut s = ScalarField::zeros(g);
        // two diagonal peaks sharing one saddle cell, split by its average
        s.data[g.index(8, 8)] = 1.0;
        s.data[g.index(9, 9)] = 1.0;
        let c = contours(&s, 0.5);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|l| l.closed && l.points.len() == 4));
        assert_abs_diff_eq!(c.iter().map(Polyline::length).sum::<f64>(), 4.0 * 2f64.sqrt() * g.h(), epsilon = 1e-12);
    }

    #[test]
    fn anchoring_of_vortex_and_control() {
        let p = BulkPotential::csh(true);
        let (_, geom) = circle(160);
        let w = profile(&p);
        let eps = 0.04;
        let mut ratios = Vec::new();
        for fam in [DirectorFamily::Vortex, DirectorFamily::Constant { angle: 0.0 }] {
            let u = make_well_prepared(&fam, &geom, &w, eps).unwrap();
            let psi = psi_field(&u, &p);
            let (band, _) = level_set_report(&psi, &p, p.m() / 16.0, geom.length).unwrap();
            let a = anchoring_defect(&u, &psi, &band, eps);
            assert!(a.mu_k >= 0.0 && a.mu_k <= a.theta_k);
            ratios.push(a.mu_k / a.theta_k);
        }
        // the stencil only sees the radial profile up to O((h/ε)⁴) in angle
        assert!(ratios[0] < 1e-4, "{ratios:?}");
        assert!(ratios[1] > 0.2, "{ratios:?}");
    }

    #[test]
    fn auxiliary_functionals() {
        let p = BulkPotential::csh(true);
        let (g, geom) = circle(160);
        let w = profile(&p);
        let eps = 0.04;
        let zero = auxiliary_bounds(&VectorField2::zeros(g), &geom, &p, eps, 0.5);
        assert_eq!([zero.tangential, zero.director_gradient, zero.amplitude_along, zero.bulk_plus, zero.bulk_minus], [0.0; 5]);
        assert_eq!(zero.e_over_eps, 0.5 / eps);

        let vortex = make_well_prepared(&DirectorFamily::Vortex, &geom, &w, eps).unwrap();
        let control = make_well_prepared(&DirectorFamily::Constant { angle: 0.0 }, &geom, &w, eps).unwrap();
        let v = auxiliary_bounds(&vortex, &geom, &p, eps, 0.0);
        let c = auxiliary_bounds(&control, &geom, &p, eps, 0.0);
        // s e₁ has a rank-one Jacobian along e₁
        assert!(c.director_gradient < 1e-10 * c.amplitude_along, "{c:?}");
        assert!(v.director_gradient > 1.0, "{v:?}");
        // the vortex director is orthogonal to ∇|u|
        assert!(v.amplitude_along < 1e-3 * c.amplitude_along, "{v:?} {c:?}");
        assert!(v.tangential > 0.0 && c.tangential > 0.0);
    }

    #[test]
    fn static_director_has_zero_residual() {
        let (g, geom) = circle(128);
        let u = VectorField2::from_fn(g, |_, _| [1.0, 0.0]);
        let bumps = bump_family([0.5, 0.5], 0.06, &[0.02, 0.03, 0.04], 4, 7);
        assert_eq!(bumps.len(), 12);
        let r = of_residual(&u, &u, 1e-3, 0.1, &bumps, &geom, 0.02).unwrap();
        for x in r {
            assert!(x.admissible);
            assert_eq!(x.raw, 0.0);
        }
        assert!(matches!(of_residual(&u, &u, 1e-3, 0.1, &bumps, &geom, 0.2), Err(Error::EmptyBulk(_))));
    }

    #[test]
    fn bump_gradient_matches_difference() {
        let b = Bump { center: [0.4, 0.6], radius: 0.05 };
        let (x, y, e) = (0.42, 0.61, 1e-6);
        let gr = b.gradient(x, y);
        assert_abs_diff_eq!(gr[0], (b.value(x + e, y) - b.value(x - e, y)) / (2.0 * e), epsilon = 1e-5);
        assert_abs_diff_eq!(gr[1], (b.value(x, y + e) - b.value(x, y - e)) / (2.0 * e), epsilon = 1e-5);
    }

    #[test]
    fn polar_of_constant_and_vortex() {
        let g = Grid2D::unit_square(40).unwrap();
        let a = std::f64::consts::FRAC_PI_4;
        let u = VectorField2::from_fn(g, |_, _| [0.8 * a.cos(), 0.8 * a.sin()]);
        let (rho, ph) = polar_extract(&u);
        for j in 1..g.ny() - 1 {
            for i in 1..g.nx() - 1 {
                let k = g.index(i, j);
                assert!((rho.data[k] - 0.8).abs() < 1e-15);
                assert!((ph.data[k] - a).abs() < 1e-15);
            }
        }
        assert!(ph.data[0].is_nan());
        // winding of τ around the centre along a square loop of nodes
        let v = VectorField2::from_fn(g, |x, y| {
            let (dx, dy) = (x - 0.5, y - 0.5);
            let r = dx.hypot(dy);
            if r == 0.0 {
                [0.0, 0.0]
            } else {
                [-dy / r, dx / r]
            }
        });
        let mut loop_nodes = Vec::new();
        for i in 10..30 {
            loop_nodes.push((i, 10));
        }
        for j in 10..30 {
            loop_nodes.push((30, j));
        }
        for i in (11..=30).rev() {
            loop_nodes.push((i, 30));
        }
        for j in (11..=30).rev() {
            loop_nodes.push((10, j));
        }
        let mut wind = 0.0;
        for w in 0..loop_nodes.len() {
            let (a, b) = (loop_nodes[w], loop_nodes[(w + 1) % loop_nodes.len()]);
            let pa = v.at(a.0, a.1);
            let pb = v.at(b.0, b.1);
            let mut d = pb[1].atan2(pb[0]) - pa[1].atan2(pa[0]);
            d -= TAU * (d / TAU).round();
            wind += d;
        }
        assert_abs_diff_eq!(wind, TAU, epsilon = 1e-12);
    }
}
