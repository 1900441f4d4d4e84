//! Browser bindings for the `glflow` demo page in `www/`.

use glflow::diagnostics::FrameDiagnostics;
use glflow::fields::{Grid2D, VectorField2};
use glflow::geometry::{circle_exact, CutoffProfile, InterfaceGeometry};
use glflow::harness::{fit_rate, read_pairs};
use glflow::initdata::{make_well_prepared, DirectorFamily};
use glflow::potential::{traveling_wave, BulkPotential, Pinning, TravelingWaveProfile};
use glflow::solver::{Scheme, Solver, SolverParams};
use wasm_bindgen::prelude::*;

const CENTER: [f64; 2] = [0.5, 0.5];
const RADIUS: f64 = 0.3;
const DELTA0: f64 = 0.05;
const REACTION_CFL: f64 = 4.0;

fn profile(p: &BulkPotential) -> glflow::Result<TravelingWaveProfile> {
    traveling_wave(p, TravelingWaveProfile::default_half_width(p, 1e-12), 4001, Pinning::HalfMass)
}

/// Traveling wave of the CSH potential, interleaved as `[z0, θ0, z1, θ1, ...]`.
#[wasm_bindgen]
pub fn wave_profile(normalized: bool, samples: usize) -> Result<Vec<f64>, String> {
    let p = BulkPotential::csh(normalized);
    let w = profile(&p).map_err(|e| e.to_string())?;
    let n = samples.max(2);
    let z_max = w.z_max();
    let mut out = Vec::with_capacity(2 * n);
    for k in 0..n {
        let z = -z_max + 2.0 * z_max * k as f64 / (n - 1) as f64;
        out.push(z);
        out.push(w.eval(z));
    }
    Ok(out)
}

/// Least-squares fit of `value ≈ C·eps^p` to CSV text with an `eps,value` header.
/// Returns `[p, C, residual]`.
#[wasm_bindgen]
pub fn fit_rate_csv(text: &str) -> Result<Vec<f64>, String> {
    let pairs = read_pairs(text.as_bytes()).map_err(|e| e.to_string())?;
    let fit = fit_rate(&pairs).map_err(|e| e.to_string())?;
    Ok(vec![fit.exponent, fit.constant, fit.residual])
}

/// A shrinking circle of radius 0.3 on the unit square.
#[wasm_bindgen]
pub struct CircleDemo {
    u: VectorField2,
    t: f64,
    eps: f64,
    mu: f64,
    potential: BulkPotential,
    cutoff: CutoffProfile,
    steps: usize,
    violations: usize,
}

#[wasm_bindgen]
impl CircleDemo {
    /// `director` is `"vortex"` or `"constant"`.
    #[wasm_bindgen(constructor)]
    pub fn new(cells: usize, eps: f64, mu: f64, director: &str) -> Result<CircleDemo, String> {
        let family = match director {
            "vortex" => DirectorFamily::Vortex,
            "constant" => DirectorFamily::Constant { angle: 0.0 },
            other => return Err(format!("unknown director '{other}'")),
        };
        let grid = Grid2D::unit_square(cells).map_err(|e| e.to_string())?;
        if grid.h() > DELTA0 / 4.0 {
            return Err(format!("{cells} cells is too coarse; need at least {}", (4.0 / DELTA0).ceil()));
        }
        let potential = BulkPotential::csh(true);
        let cutoff = CutoffProfile::new(DELTA0).map_err(|e| e.to_string())?;
        let geom = InterfaceGeometry::shrinking_circle(CENTER, RADIUS, 0.0, &grid, cutoff).map_err(|e| e.to_string())?;
        let w = profile(&potential).map_err(|e| e.to_string())?;
        let u = make_well_prepared(&family, &geom, &w, eps).map_err(|e| e.to_string())?;
        Ok(CircleDemo { u, t: 0.0, eps, mu, potential, cutoff, steps: 0, violations: 0 })
    }

    /// Advances the flow by `dt_total`.
    pub fn advance(&mut self, dt_total: f64) -> Result<(), String> {
        let mut params = SolverParams::new(self.eps, self.mu, Scheme::ExplicitRk2);
        params.reaction_cfl = REACTION_CFL;
        let mut solver = Solver::new(self.u.clone(), &self.potential, params).map_err(|e| e.to_string())?.with_time(self.t);
        solver.advance_to(self.t + dt_total).map_err(|e| e.to_string())?;
        self.steps += solver.ledger.steps;
        self.violations += solver.ledger.violations;
        self.t = solver.state.t;
        self.u = solver.state.u;
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Nodes per side.
    pub fn side(&self) -> usize {
        self.u.grid.nx()
    }

    /// `|u|` row by row, `y` increasing.
    pub fn modulus(&self) -> Vec<f64> {
        self.u.norm().data
    }

    /// `[t, A_ε, E_ε, radius of the m/2 contour, exact radius, L¹ phase error, steps, energy increases]`.
    pub fn stats(&self) -> Result<Vec<f64>, String> {
        let grid = self.u.grid;
        let geom = InterfaceGeometry::shrinking_circle(CENTER, RADIUS, self.t, &grid, self.cutoff).map_err(|e| e.to_string())?;
        let d = FrameDiagnostics::measure(&self.u, &geom, &self.potential, self.eps, self.mu);
        let r = d.record(self.eps, None);
        let exact = circle_exact(RADIUS, self.t).map_err(|e| e.to_string())?;
        Ok(vec![self.t, r.energy, r.modulated_energy, r.radius_b, exact, r.phase_l1, self.steps as f64, self.violations as f64])
    }
}
