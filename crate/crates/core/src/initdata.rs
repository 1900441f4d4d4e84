//! Well-prepared initial data: a traveling-wave amplitude across the initial interface
//! multiplied by a unit director field.
//!
//! ```text
//! s_ε = η₀ θ(d/ε) + (1 − η₀) 1_{d>0},      u_ε⁰ = s_ε u_in
//! ```

use crate::diagnostics::{modulated_energy, phase_error};
use crate::fields::{ScalarField, VectorField2};
use crate::geometry::{InterfaceGeometry, SignedDistanceGrid};
use crate::potential::{BulkPotential, TravelingWaveProfile};
use crate::solver::energy;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Profile values this close to a well are replaced by the well itself.
pub const SNAP: f64 = 1e-8;

/// A point defect of the phase `Σ degree·arg(x − position)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defect {
    pub position: [f64; 2],
    pub degree: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectorFamily {
    /// Unit tangent `(−(y − c₂), x − c₁)/|x − c|` about the centre of a circular interface.
    Vortex,
    /// `(cos a, sin a)`; not tangential, kept as a control.
    Constant { angle: f64 },
    /// `e^{iφ}` with `φ = offset + Σ degree·arg(x − position)`.
    CustomPhase { defects: Vec<Defect>, offset: f64 },
}

/// A unit director per node, zero where it is undefined (at defect cores).
#[derive(Debug, Clone)]
pub struct PhaseField {
    pub director: VectorField2,
    pub defined: Vec<bool>,
    pub defects: Vec<Defect>,
}

/// Centre of a circular interface; `None` if the curve vertices are not equidistant from
/// their centroid.
pub fn circle_center(geometry: &InterfaceGeometry) -> Option<[f64; 2]> {
    if let Some((c, _)) = geometry.circle {
        return Some(c);
    }
    let curve = geometry.curve.as_ref()?;
    let c = curve.centroid();
    let radii: Vec<f64> = curve.points().iter().map(|p| (p[0] - c[0]).hypot(p[1] - c[1])).collect();
    let lo = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = radii.iter().cloned().fold(0.0, f64::max);
    if hi > 0.0 && (hi - lo) <= 1e-9 * hi {
        Some(c)
    } else {
        None
    }
}

impl PhaseField {
    pub fn build(family: &DirectorFamily, geometry: &InterfaceGeometry) -> Result<PhaseField> {
        let grid = geometry.sdf.d.grid;
        let mut director = VectorField2::zeros(grid);
        let mut defined = vec![true; grid.len()];
        let defects = match family {
            DirectorFamily::Vortex => {
                let c = circle_center(geometry)
                    .ok_or_else(|| Error::Config("the vortex director needs a circular interface".into()))?;
                vec![Defect { position: c, degree: 1 }]
            }
            DirectorFamily::Constant { .. } => Vec::new(),
            DirectorFamily::CustomPhase { defects, .. } => defects.clone(),
        };
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let k = grid.index(i, j);
                let (x, y) = (grid.x(i), grid.y(j));
                let v = match family {
                    DirectorFamily::Vortex => {
                        let c = defects[0].position;
                        let (dx, dy) = (x - c[0], y - c[1]);
                        let r = dx.hypot(dy);
                        if r > 0.0 {
                            Some([-dy / r, dx / r])
                        } else {
                            None
                        }
                    }
                    DirectorFamily::Constant { angle } => Some([angle.cos(), angle.sin()]),
                    DirectorFamily::CustomPhase { defects, offset } => {
                        let mut phase = *offset;
                        let mut hit = false;
                        for d in defects {
                            let (dx, dy) = (x - d.position[0], y - d.position[1]);
                            if dx == 0.0 && dy == 0.0 {
                                hit = true;
                            }
                            phase += d.degree as f64 * dy.atan2(dx);
                        }
                        if hit {
                            None
                        } else {
                            Some([phase.cos(), phase.sin()])
                        }
                    }
                };
                match v {
                    Some([a, b]) => {
                        director.x[k] = a;
                        director.y[k] = b;
                    }
                    None => defined[k] = false,
                }
            }
        }
        Ok(PhaseField { director, defined, defects })
    }
}

/// `η₀θ(d/ε) + (1 − η₀)1_{d>0}` at one point, `e` being the value of `η₀` there.
pub fn amplitude(d: f64, e: f64, profile: &TravelingWaveProfile, eps: f64) -> f64 {
    let step = if d > 0.0 { 1.0 } else { 0.0 };
    if e == 0.0 {
        step
    } else if e == 1.0 {
        profile.eval_snapped(d / eps, SNAP)
    } else {
        e * profile.eval_snapped(d / eps, SNAP) + (1.0 - e) * step
    }
}

/// `s_ε = η₀θ(d/ε) + (1 − η₀)1_{d>0}` with `η₀` the plateau cutoff of `geometry`.
pub fn transition_amplitude(sdf: &SignedDistanceGrid, profile: &TravelingWaveProfile, eta0: impl Fn(f64) -> f64, eps: f64) -> ScalarField {
    let mut s = ScalarField::zeros(sdf.d.grid);
    for (out, &d) in s.data.iter_mut().zip(&sdf.d.data) {
        *out = amplitude(d, eta0(d), profile, eps);
    }
    s
}

/// `u_ε⁰ = s_ε u_in`, zero on pinned boundary nodes and at defect cores.
pub fn make_well_prepared(
    family: &DirectorFamily,
    geometry: &InterfaceGeometry,
    profile: &TravelingWaveProfile,
    eps: f64,
) -> Result<VectorField2> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("ε = {eps} must be positive")));
    }
    let phase = PhaseField::build(family, geometry)?;
    let cutoff = geometry.ext.cutoff;
    let s = transition_amplitude(&geometry.sdf, profile, |d| cutoff.eta0(d), eps);
    let mut u = phase.director;
    for k in 0..u.x.len() {
        u.x[k] *= s.data[k];
        u.y[k] *= s.data[k];
    }
    u.enforce_boundary();
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellPreparedness {
    pub modulated_energy: f64,
    pub per_eps: f64,
    pub per_eps_log: f64,
    /// `∫_{|d|<δ₀} |ψ − m·1_{d>0}| |d|`.
    pub weighted_error: f64,
    pub energy: f64,
    pub max_norm: f64,
}

pub fn well_preparedness_report(
    u0: &VectorField2,
    geometry: &InterfaceGeometry,
    p: &BulkPotential,
    eps: f64,
    mu: f64,
) -> WellPreparedness {
    let frame = modulated_energy(u0, geometry, p, eps, mu);
    let e = frame.modulated_energy;
    WellPreparedness {
        modulated_energy: e,
        per_eps: e / eps,
        per_eps_log: e / (eps * (1.0 / eps).ln()),
        weighted_error: phase_error(u0, geometry, p).weighted,
        energy: energy(u0, p, eps, mu),
        max_norm: u0.max_norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{divergence, Grid2D};
    use crate::geometry::{ClosedCurve, CutoffProfile};
    use crate::potential::{traveling_wave, Pinning};

    fn setup(n: usize) -> (InterfaceGeometry, TravelingWaveProfile, BulkPotential) {
        let p = BulkPotential::csh(true);
        let g = Grid2D::unit_square(n).unwrap();
        let geom = InterfaceGeometry::shrinking_circle([0.5, 0.5], 0.3, 0.0, &g, CutoffProfile::new(0.05).unwrap()).unwrap();
        let w = traveling_wave(&p, TravelingWaveProfile::default_half_width(&p, 1e-12), 4001, Pinning::HalfMass).unwrap();
        (geom, w, p)
    }

    #[test]
    fn amplitude_regions() {
        let (geom, w, _) = setup(128);
        let eps = 0.04;
        let c = geom.ext.cutoff;
        let s = transition_amplitude(&geom.sdf, &w, |d| c.eta0(d), eps);
        for (k, &d) in geom.sdf.d.data.iter().enumerate() {
            if d > 2.0 * c.delta0 {
                assert_eq!(s.data[k], 1.0);
            } else if d < -2.0 * c.delta0 {
                assert_eq!(s.data[k], 0.0);
            } else if d.abs() <= c.delta0 {
                assert_eq!(s.data[k], w.eval_snapped(d / eps, SNAP));
            }
        }
        let on = geom.sdf.d.data.iter().position(|d| d.abs() < 1e-15);
        if let Some(k) = on {
            assert_eq!(s.data[k], w.theta0());
        }
        assert_eq!(w.eval_snapped(0.0, SNAP), w.theta0());
    }

    #[test]
    fn vortex_is_tangential_and_divergence_free() {
        let (geom, w, p) = setup(128);
        let eps = 0.04;
        let u = make_well_prepared(&DirectorFamily::Vortex, &geom, &w, eps).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..u.x.len() {
            worst = worst.max((u.x[k] * geom.sdf.grad.x[k] + u.y[k] * geom.sdf.grad.y[k]).abs());
        }
        assert!(worst <= 1e-15, "{worst:e}");
        // across the front the nine-point divergence of s(r)τ is small next to |∇u| ~ 1/ε
        let div = divergence(&u);
        let band = geom.sdf.d.data.iter().zip(&div.data).filter(|(d, _)| d.abs() <= 0.05);
        let worst_div = band.map(|(_, v)| v.abs()).fold(0.0, f64::max);
        assert!(worst_div <= 1e-2 / eps, "{worst_div}");
        assert!(u.max_norm() <= 1.0 + 1e-12);
        // ψ of the data stays in [0, m]
        for k in 0..u.x.len() {
            let psi = p.d_f(u.x[k].hypot(u.y[k]));
            assert!((0.0..=p.m() + 1e-12).contains(&psi));
        }
    }

    #[test]
    fn vortex_amplitude_equals_profile_in_band() {
        let (geom, w, _) = setup(128);
        let eps = 0.04;
        let u = make_well_prepared(&DirectorFamily::Vortex, &geom, &w, eps).unwrap();
        let d0 = geom.ext.cutoff.delta0;
        for (k, &d) in geom.sdf.d.data.iter().enumerate() {
            if d.abs() <= d0 {
                let a = u.x[k].hypot(u.y[k]);
                assert!((a - w.eval_snapped(d / eps, SNAP)).abs() <= 1e-15);
            }
            if d < -2.0 * d0 {
                assert_eq!((u.x[k], u.y[k]), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn vortex_rejects_ellipse() {
        let (_, w, _) = setup(128);
        let g = Grid2D::unit_square(128).unwrap();
        let curve = ClosedCurve::ellipse([0.5, 0.5], 0.3, 0.2, 400).unwrap();
        let geom = InterfaceGeometry::from_curve(curve, &g, CutoffProfile::new(0.05).unwrap(), 0.0).unwrap();
        assert!(matches!(make_well_prepared(&DirectorFamily::Vortex, &geom, &w, 0.04), Err(Error::Config(_))));
        assert!(make_well_prepared(&DirectorFamily::Constant { angle: 0.3 }, &geom, &w, 0.04).is_ok());
    }

    #[test]
    fn custom_phase_is_unit_with_zero_at_core() {
        let (geom, _, _) = setup(128);
        let fam = DirectorFamily::CustomPhase {
            defects: vec![Defect { position: [0.5, 0.5], degree: 1 }, Defect { position: [0.3, 0.7], degree: -1 }],
            offset: 0.2,
        };
        let ph = PhaseField::build(&fam, &geom).unwrap();
        let g = geom.sdf.d.grid;
        assert!(!ph.defined[g.index(64, 64)]);
        for k in 0..g.len() {
            let n = ph.director.x[k].hypot(ph.director.y[k]);
            if ph.defined[k] {
                assert!((n - 1.0).abs() < 1e-14);
            } else {
                assert_eq!(n, 0.0);
            }
        }
    }

    #[test]
    fn report_scalings() {
        let mut vortex = Vec::new();
        let mut control = Vec::new();
        for (n, eps) in [(160, 0.04), (320, 0.02)] {
            let (geom, w, p) = setup(n);
            let u = make_well_prepared(&DirectorFamily::Vortex, &geom, &w, eps).unwrap();
            let r = well_preparedness_report(&u, &geom, &p, eps, 1.0);
            assert!(r.max_norm <= 1.0 + 1e-12);
            assert!(r.modulated_energy >= 0.0);
            assert_eq!(r.modulated_energy, modulated_energy(&u, &geom, &p, eps, 1.0).modulated_energy);
            vortex.push(r.modulated_energy);
            let c = make_well_prepared(&DirectorFamily::Constant { angle: 0.0 }, &geom, &w, eps).unwrap();
            control.push(well_preparedness_report(&c, &geom, &p, eps, 1.0).modulated_energy);
        }
        // the vortex pays only its core, O(ε log 1/ε); the control pays the divergence
        // penalty across the front, which does not shrink with ε
        assert!(vortex[1] < 0.7 * vortex[0], "{vortex:?}");
        assert!(control[1] > 0.8 * control[0], "{control:?}");
    }
}
