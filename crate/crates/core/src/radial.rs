//! One-dimensional reduction for rotationally equivariant tangential fields
//! `u = f(r)τ`, used as a reference for the planar solver.
//!
//! Such fields are divergence free, so the anisotropic term drops and the
//! amplitude obeys
//!
//! ```text
//! ∂t f = ∂rr f + ∂r f / r − f / r² − ε⁻² f'(f)
//! ```
//!
//! The diffusion part is written in flux form, `(r_{i+½}(f_{i+1} − f_i) −
//! r_{i−½}(f_i − f_{i−1})) / (r_i dr²)`, which makes the semi-discrete equation the
//! exact gradient flow of the weighted energy returned by [`RadialState::energy`].
//! The origin is handled by the odd extension `f(−r) = −f(r)`, which pins `f(0) = 0`.

use crate::fields::{Grid2D, VectorField2};
use crate::potential::BulkPotential;
use crate::{Error, Result};
use std::f64::consts::TAU;

#[derive(Debug, Clone)]
pub struct RadialState {
    /// Samples at `r_i = i·dr`, `i = 0..=n`.
    pub f: Vec<f64>,
    pub dr: f64,
    pub t: f64,
    pub eps: f64,
    /// Value held at `r = R`.
    pub outer: f64,
}

impl RadialState {
    /// Samples `f0` on `[0, r_max]` with spacing close to `dr`.
    pub fn new(f0: impl Fn(f64) -> f64, r_max: f64, dr: f64, eps: f64, outer: f64) -> Result<RadialState> {
        if !(r_max > 0.0 && dr > 0.0 && dr < r_max && eps > 0.0) {
            return Err(Error::Config(format!("bad radial grid: R = {r_max}, dr = {dr}, ε = {eps}")));
        }
        let n = (r_max / dr).round() as usize;
        let dr = r_max / n as f64;
        let mut f: Vec<f64> = (0..=n).map(|i| f0(i as f64 * dr)).collect();
        f[0] = 0.0;
        f[n] = outer;
        Ok(RadialState { f, dr, t: 0.0, eps, outer })
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.dr
    }

    pub fn r_max(&self) -> f64 {
        (self.f.len() - 1) as f64 * self.dr
    }

    /// Largest stable explicit step: `min(dr²/4, ε²/S)`.
    pub fn dt_limit(&self, p: &BulkPotential) -> f64 {
        (0.25 * self.dr * self.dr).min(self.eps * self.eps / p.stabilization())
    }

    fn rhs(&self, f: &[f64], p: &BulkPotential, out: &mut [f64]) {
        let n = f.len() - 1;
        let dr = self.dr;
        let ke = 1.0 / (self.eps * self.eps);
        out[0] = 0.0;
        out[n] = 0.0;
        for i in 1..n {
            let r = i as f64 * dr;
            let (rm, rp) = (r - 0.5 * dr, r + 0.5 * dr);
            let flux = rp * (f[i + 1] - f[i]) - rm * (f[i] - f[i - 1]);
            let (_, ratio) = p.density_and_ratio(f[i] * f[i]);
            out[i] = flux / (r * dr * dr) - f[i] / (r * r) - ke * ratio * f[i];
        }
    }

    /// One Heun step of size `dt`.
    pub fn step(&mut self, p: &BulkPotential, dt: f64) {
        let n = self.f.len();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        self.rhs(&self.f, p, &mut k1);
        let mid: Vec<f64> = self.f.iter().zip(&k1).map(|(a, k)| a + dt * k).collect();
        self.rhs(&mid, p, &mut k2);
        for i in 1..n - 1 {
            self.f[i] += 0.5 * dt * (k1[i] + k2[i]);
        }
        self.t += dt;
    }

    /// Steps to `t` with equal steps no larger than the stability limit.
    pub fn advance_to(&mut self, p: &BulkPotential, t: f64) {
        if t <= self.t {
            return;
        }
        let span = t - self.t;
        let steps = (span / self.dt_limit(p)).ceil() as usize;
        let dt = span / steps as f64;
        for _ in 0..steps {
            self.step(p, dt);
        }
        self.t = t;
    }

    /// `2π[ε Σ r_{i+½}(Δf)²/(2dr) + Σ r_i dr (ε f²/(2r²) + F(f)/ε)]`.
    pub fn energy(&self, p: &BulkPotential) -> f64 {
        let n = self.f.len() - 1;
        let (dr, eps) = (self.dr, self.eps);
        let mut acc = 0.0;
        for i in 0..n {
            let d = self.f[i + 1] - self.f[i];
            acc += eps * (i as f64 + 0.5) * dr * d * d / (2.0 * dr);
        }
        for i in 1..n {
            let r = i as f64 * dr;
            let f = self.f[i];
            acc += r * dr * (eps * f * f / (2.0 * r * r) + p.density(f * f) / eps);
        }
        TAU * acc
    }

    /// Radius where `d_F(|f|)` drops through `m/2` going outward, by linear interpolation.
    /// The rise through the same level at the vortex core is not counted.
    pub fn midlevel_radius(&self, p: &BulkPotential) -> Result<f64> {
        let level = 0.5 * p.m();
        let psi: Vec<f64> = self.f.iter().map(|v| p.d_f(v.abs())).collect();
        let mut found = Vec::new();
        for i in 0..psi.len() - 1 {
            if psi[i] >= level && psi[i + 1] < level {
                let s = (psi[i] - level) / (psi[i] - psi[i + 1]);
                found.push((i as f64 + s) * self.dr);
            }
        }
        match found.len() {
            1 => Ok(found[0]),
            0 => Err(Error::NoCrossing(format!("no outward midlevel crossing at t = {}", self.t))),
            k => Err(Error::MultipleCrossings(format!("{k} outward midlevel crossings at t = {}", self.t))),
        }
    }

    /// Amplitude at radius `r` by four-point cubic interpolation; `outer` beyond `R`.
    pub fn eval(&self, r: f64) -> f64 {
        let n = self.f.len() - 1;
        if r >= self.r_max() {
            return self.outer;
        }
        let x = r / self.dr;
        let i = (x.floor() as usize).min(n - 1);
        let t = x - i as f64;
        // odd extension below the origin
        let at = |k: isize| -> f64 {
            if k < 0 {
                -self.f[(-k) as usize]
            } else if k as usize > n {
                self.outer
            } else {
                self.f[k as usize]
            }
        };
        let i = i as isize;
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        // Lagrange weights on nodes −1, 0, 1, 2
        let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3
    }

    /// The equivariant field `f(|x − c|)τ` on a planar grid, with boundary nodes honoured.
    pub fn to_grid(&self, grid: Grid2D, center: [f64; 2]) -> VectorField2 {
        VectorField2::from_fn(grid, |x, y| {
            let (dx, dy) = (x - center[0], y - center[1]);
            let r = dx.hypot(dy);
            if r == 0.0 {
                return [0.0, 0.0];
            }
            let a = self.eval(r);
            [-a * dy / r, a * dx / r]
        })
    }
}
