//! Experiment configuration, ε-sweeps, rate fits and output files.
//!
//! A run is described by a TOML file with the sections `[experiment]`, `[geometry]`,
//! `[potential]`, `[run]`, `[initial]` and `[residual]`; unknown keys are rejected. Each
//! experiment writes one CSV of frame records per ε and a JSON summary holding the fitted
//! exponents, the pass/fail checks and the runtimes.
//!
//! | id | experiment |
//! |----|------------|
//! | E0 | traveling wave against its closed form |
//! | E1 | planar front drift |
//! | E2 | circle radius and level-set lengths |
//! | E3 | modulated energy sweep with a constant-director control |
//! | E4 | L¹ phase error rate |
//! | E5 | anchoring defect |
//! | E6 | weak Oseen-Frank residual |
//! | E7 | 2D vortex against the radial solver |
//!
//! E2 to E5 run the same circle sweep and differ only in what they check.

use crate::diagnostics::{bump_family, of_residual, FrameDiagnostics, FrameRecord};
use crate::fields::{Boundary, Grid2D, Sides, VectorField2};
use crate::geometry::{circle_exact, evolve_csf_for, ClosedCurve, CutoffProfile, InterfaceGeometry};
use crate::initdata::{amplitude, make_well_prepared, DirectorFamily};
use crate::potential::{traveling_wave, BulkPotential, Pinning, TravelingWaveProfile};
use crate::radial::RadialState;
use crate::solver::{Scheme, Solver, SolverParams};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    E0,
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
}

impl ExperimentId {
    pub fn describe(self) -> &'static str {
        match self {
            ExperimentId::E0 => "traveling wave",
            ExperimentId::E1 => "planar front",
            ExperimentId::E2 => "circle radius",
            ExperimentId::E3 => "modulated energy sweep",
            ExperimentId::E4 => "L1 phase error sweep",
            ExperimentId::E5 => "anchoring sweep",
            ExperimentId::E6 => "Oseen-Frank residual",
            ExperimentId::E7 => "radial cross-check",
        }
    }

    fn is_circle_sweep(self) -> bool {
        matches!(self, ExperimentId::E2 | ExperimentId::E3 | ExperimentId::E4 | ExperimentId::E5)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: ExperimentId,
    /// Relative paths are taken from the directory of the config file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub write_csv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Curve,
    Planar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(default = "default_shape")]
    pub shape: Shape,
    #[serde(default = "default_center")]
    pub center: [f64; 2],
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// CSV of counterclockwise vertices, for `shape = "curve"`.
    #[serde(default)]
    pub curve_file: Option<PathBuf>,
    /// Vertical line `x = front` for `shape = "planar"`; the domain centre when absent.
    #[serde(default)]
    pub front: Option<f64>,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default)]
    pub domain_origin: [f64; 2],
    #[serde(default = "one")]
    pub domain_size: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            shape: default_shape(),
            center: default_center(),
            radius: default_radius(),
            curve_file: None,
            front: None,
            delta0: default_delta0(),
            domain_origin: [0.0, 0.0],
            domain_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialFamily {
    Csh,
    QuadraticWell,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    #[serde(default = "default_family")]
    pub family: PotentialFamily,
    /// Scale the CSH potential so that `m = 1`.
    #[serde(default = "yes")]
    pub normalized: bool,
}

impl Default for PotentialSection {
    fn default() -> Self {
        PotentialSection { family: default_family(), normalized: true }
    }
}

impl PotentialSection {
    pub fn build(&self) -> BulkPotential {
        match self.family {
            PotentialFamily::Csh => BulkPotential::csh(self.normalized),
            PotentialFamily::QuadraticWell => BulkPotential::quadratic_well(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Strictly decreasing.
    pub eps: Vec<f64>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Second anisotropy for E7, whose field is compared with the main run.
    #[serde(default)]
    pub mu_compare: Option<f64>,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub t_end: f64,
    pub stride: f64,
    /// `h = ε / cells_per_eps`.
    #[serde(default = "default_cells")]
    pub cells_per_eps: f64,
    /// Reaction part of the explicit step bound, `c·ε²/S`.
    #[serde(default = "default_cfl")]
    pub reaction_cfl: f64,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSection {
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_per_radius")]
    pub per_radius: usize,
    /// Distance of the bump centres from the vortex centre.
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Steps between the two frames differenced for `∂t u`.
    #[serde(default = "default_gap")]
    pub gap_steps: usize,
}

impl Default for ResidualSection {
    fn default() -> Self {
        ResidualSection {
            radii: default_radii(),
            per_radius: default_per_radius(),
            offset: default_offset(),
            seed: default_seed(),
            gap_steps: default_gap(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_shape() -> Shape {
    Shape::Circle
}
fn default_center() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_radius() -> f64 {
    0.3
}
fn default_delta0() -> f64 {
    0.05
}
fn default_family() -> PotentialFamily {
    PotentialFamily::Csh
}
fn default_mu() -> f64 {
    0.1
}
fn default_scheme() -> Scheme {
    Scheme::ExplicitRk2
}
fn default_cells() -> f64 {
    4.0
}
fn default_cfl() -> f64 {
    4.0
}
fn default_radii() -> Vec<f64> {
    vec![0.02, 0.03, 0.04]
}
fn default_per_radius() -> usize {
    4
}
fn default_offset() -> f64 {
    0.06
}
fn default_seed() -> u64 {
    7
}
fn default_gap() -> usize {
    10
}
fn default_initial() -> DirectorFamily {
    DirectorFamily::Vortex
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub potential: PotentialSection,
    pub run: RunSection,
    #[serde(default = "default_initial")]
    pub initial: DirectorFamily,
    #[serde(default)]
    pub residual: ResidualSection,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        if cfg.experiment.output_dir.is_relative() {
            cfg.experiment.output_dir = base.join(&cfg.experiment.output_dir);
        }
        if let Some(f) = &cfg.geometry.curve_file {
            if f.is_relative() {
                cfg.geometry.curve_file = Some(base.join(f));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        ExperimentConfig::from_toml_str(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = &self.run;
        let id = self.experiment.id;
        if id != ExperimentId::E0 {
            if r.eps.is_empty() {
                return bad("the ε list is empty".into());
            }
            if r.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return bad(format!("ε values must be positive, got {:?}", r.eps));
            }
            if r.eps.windows(2).any(|w| w[1] >= w[0]) {
                return bad(format!("the ε list must be strictly decreasing, got {:?}", r.eps));
            }
        }
        if (id.is_circle_sweep() || id == ExperimentId::E6) && r.eps.len() < 3 {
            return bad(format!("{id:?} fits rates and needs at least 3 values of ε"));
        }
        if !(r.mu >= 0.0) || r.mu_compare.is_some_and(|m| !(m >= 0.0)) {
            return bad("μ must be nonnegative".into());
        }
        if !(r.t_end > 0.0) || !(r.stride > 0.0) {
            return bad("t_end and stride must be positive".into());
        }
        if !(r.cells_per_eps >= 2.0) {
            return bad(format!("cells_per_eps = {} must be at least 2", r.cells_per_eps));
        }
        if !(r.reaction_cfl > 0.0) || r.dt.is_some_and(|d| !(d > 0.0)) {
            return bad("reaction_cfl and dt must be positive".into());
        }
        let g = &self.geometry;
        if !(g.delta0 > 0.0) || !(g.domain_size > 0.0) {
            return bad("delta0 and domain_size must be positive".into());
        }
        // E0 needs no geometry and E1 always runs on a planar front
        let shaped = !matches!(id, ExperimentId::E0 | ExperimentId::E1);
        match g.shape {
            _ if !shaped => {}
            Shape::Circle => {
                if !(g.radius > 0.0) {
                    return bad(format!("circle radius {} must be positive", g.radius));
                }
                circle_exact(g.radius, r.t_end)
                    .map_err(|_| Error::Config(format!("the circle of radius {} is extinct before t = {}", g.radius, r.t_end)))?;
            }
            Shape::Curve => match &g.curve_file {
                None => return bad("shape = \"curve\" needs curve_file".into()),
                Some(f) if !f.is_file() => return bad(format!("curve file {} not found", f.display())),
                Some(_) => {}
            },
            Shape::Planar => {}
        }
        let needs_circle = id.is_circle_sweep() || matches!(id, ExperimentId::E6 | ExperimentId::E7);
        if needs_circle && g.shape != Shape::Circle {
            return bad(format!("{id:?} runs on a circle"));
        }
        if matches!(id, ExperimentId::E6 | ExperimentId::E7) && self.initial != DirectorFamily::Vortex {
            return bad(format!("{id:?} needs vortex initial data"));
        }
        if id == ExperimentId::E7 && r.mu_compare.is_none() {
            return bad("E7 needs run.mu_compare".into());
        }
        let q = &self.residual;
        if q.radii.is_empty() || q.radii.iter().any(|v| !(*v > 0.0)) || q.per_radius == 0 || q.gap_steps == 0 {
            return bad("residual radii must be positive, with per_radius and gap_steps at least 1".into());
        }
        Ok(())
    }
}

/// Least-squares line through `(log ε, log value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFit {
    pub pairs: Vec<(f64, f64)>,
    pub exponent: f64,
    pub constant: f64,
    /// Root mean square of the log residuals.
    pub residual: f64,
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(Error::Invalid(format!("a rate fit needs at least 3 pairs, got {}", pairs.len())));
    }
    if let Some(p) = pairs.iter().find(|(e, v)| !(*e > 0.0 && *v > 0.0 && e.is_finite() && v.is_finite())) {
        return Err(Error::Invalid(format!("rate fits need positive finite pairs, got {p:?}")));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Invalid("rate fit needs at least two distinct ε".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    Ok(RateFit { pairs: pairs.to_vec(), exponent: slope, constant: icpt.exp(), residual: (ss / n).sqrt() })
}

/// Reads `(ε, value)` pairs from a two-column CSV with a header row.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    read_pairs(std::fs::File::open(path)?)
}

/// `(eps, value)` rows below a header line.
pub fn read_pairs(r: impl std::io::Read) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let (e, v): (f64, f64) = row?;
        out.push((e, v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Absent when the measurement could not be made.
    pub value: Option<f64>,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Check {
        Check { name: name.into(), passed: value <= threshold, value: finite(value), threshold, detail: detail.into() }
    }

    fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Check {
        Check { name: name.into(), passed: value >= threshold, value: finite(value), threshold, detail: detail.into() }
    }

    fn failed(name: &str, threshold: f64, detail: impl Into<String>) -> Check {
        Check { name: name.into(), passed: false, value: None, threshold, detail: detail.into() }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// One ε of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub eps: f64,
    pub mu: f64,
    pub h: f64,
    pub cells: usize,
    pub dt: f64,
    pub steps: usize,
    pub energy_violations: usize,
    pub rejections: usize,
    pub coercivity_violations: usize,
    pub frames: usize,
    pub runtime_seconds: f64,
    pub csv: Option<PathBuf>,
    /// Finite scalar results; non-finite ones are dropped.
    pub metrics: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn put(&mut self, name: &str, v: f64) {
        if v.is_finite() {
            self.metrics.insert(name.into(), v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub description: String,
    pub runs: Vec<RunRecord>,
    pub rates: BTreeMap<String, RateFit>,
    pub checks: Vec<Check>,
    pub runtime_seconds: f64,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Summary> {
        let s: Summary = serde_json::from_str(&fs::read_to_string(path)?)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::Invalid(format!("summary schema {} is not {SCHEMA_VERSION}", s.schema_version)));
        }
        Ok(s)
    }
}

/// Runs the configured experiment and writes its CSV files and `<id>_summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let start = Instant::now();
    if cfg.experiment.write_csv {
        fs::create_dir_all(&cfg.experiment.output_dir)?;
    }
    let id = cfg.experiment.id;
    let (runs, rates, checks) = match id {
        ExperimentId::E0 => wave_experiment(cfg)?,
        ExperimentId::E1 => planar_experiment(cfg)?,
        ExperimentId::E6 => residual_experiment(cfg)?,
        ExperimentId::E7 => oracle_experiment(cfg)?,
        _ => {
            let sweep = circle_sweep(cfg)?;
            let (rates, checks) = sweep.evaluate(id, cfg);
            (sweep.runs, rates, checks)
        }
    };
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        experiment: id,
        description: id.describe().into(),
        runs,
        rates,
        checks,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    if cfg.experiment.write_csv {
        summary.write(&cfg.experiment.output_dir.join(format!("{id:?}_summary.json")))?;
    }
    Ok(summary)
}

type Outcome = (Vec<RunRecord>, BTreeMap<String, RateFit>, Vec<Check>);

fn profile_for(p: &BulkPotential) -> Result<TravelingWaveProfile> {
    traveling_wave(p, TravelingWaveProfile::default_half_width(p, 1e-12), 8001, Pinning::HalfMass)
}

fn wave_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let start = Instant::now();
    let p = cfg.potential.build();
    let closed_form = matches!(cfg.potential.family, PotentialFamily::Csh) && cfg.potential.normalized;
    // the closed form (1 + e^{−8z})^{−1/2} is pinned at θ(0) = 1/√2
    let pin = if closed_form { Pinning::Amplitude(0.5f64.sqrt()) } else { Pinning::HalfMass };
    let w = traveling_wave(&p, 8.0, 16001, pin)?;
    let mut rows = Vec::new();
    let (mut err, mut equi): (f64, f64) = (0.0, 0.0);
    for k in 0..=4000 {
        let z = -2.0 + 4.0 * k as f64 / 4000.0;
        let theta = w.eval(z);
        let slope = w.derivative(z);
        let exact = if closed_form { (1.0 + (-8.0 * z).exp()).powf(-0.5) } else { f64::NAN };
        if closed_form {
            err = err.max((theta - exact).abs());
        }
        let gap = slope * slope - 2.0 * p.f(theta);
        equi = equi.max(gap.abs());
        rows.push((z, theta, exact, slope, gap));
    }
    let seconds = start.elapsed().as_secs_f64();
    let mut csv = None;
    if cfg.experiment.write_csv {
        let path = cfg.experiment.output_dir.join("E0_wave.csv");
        let mut wtr = csv::Writer::from_path(&path)?;
        wtr.write_record(["z", "theta", "closed_form", "theta_prime", "equipartition_gap"])?;
        for r in &rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        csv = Some(path);
    }
    let mut run = RunRecord {
        eps: f64::NAN,
        mu: f64::NAN,
        h: 16.0 / 16000.0,
        cells: 16000,
        dt: 0.0,
        steps: 0,
        energy_violations: 0,
        rejections: 0,
        coercivity_violations: 0,
        frames: 0,
        runtime_seconds: seconds,
        csv,
        metrics: BTreeMap::new(),
    };
    run.put("max_error", if closed_form { err } else { f64::NAN });
    run.put("equipartition", equi);
    let mut checks = Vec::new();
    if closed_form {
        checks.push(Check::at_most("wave_closed_form", err, 1e-6, "max |θ − (1+e^{−8z})^{−1/2}| on [−2, 2]"));
    }
    checks.push(Check::at_most("equipartition", equi, 1e-8, "max |θ'² − 2f(θ)| on [−2, 2]"));
    checks.push(Check::at_most("wave_runtime", seconds, 1.0, "seconds"));
    // JSON has no NaN
    run.eps = 0.0;
    run.mu = 0.0;
    Ok((vec![run], BTreeMap::new(), checks))
}

fn square_grid(cfg: &ExperimentConfig, eps: f64) -> Result<Grid2D> {
    let g = &cfg.geometry;
    let mut n = (g.domain_size * cfg.run.cells_per_eps / eps).round() as usize;
    // even, so that the centre of a centred domain is a node
    n += n % 2;
    Grid2D::new(n + 1, n + 1, g.domain_size / n as f64, g.domain_origin, Sides::all(Boundary::ZeroDirichlet))
}

fn solver_params(cfg: &ExperimentConfig, eps: f64, mu: f64) -> SolverParams {
    let mut sp = SolverParams::new(eps, mu, cfg.run.scheme);
    sp.reaction_cfl = cfg.run.reaction_cfl;
    sp.dt = cfg.run.dt;
    sp
}

/// The reference interface over time.
enum Track {
    Circle { center: [f64; 2], r0: f64 },
    Curve { curve: ClosedCurve, t: f64 },
    Planar { front: f64 },
}

impl Track {
    fn new(cfg: &ExperimentConfig) -> Result<Track> {
        let g = &cfg.geometry;
        Ok(match g.shape {
            Shape::Circle => Track::Circle { center: g.center, r0: g.radius },
            Shape::Curve => {
                let path = g.curve_file.as_ref().ok_or_else(|| Error::Config("curve_file missing".into()))?;
                Track::Curve { curve: ClosedCurve::read_csv(fs::File::open(path)?)?, t: 0.0 }
            }
            Shape::Planar => Track::Planar { front: g.front.unwrap_or(g.domain_origin[0] + 0.5 * g.domain_size) },
        })
    }

    fn at(&mut self, t: f64, grid: &Grid2D, cutoff: CutoffProfile) -> Result<InterfaceGeometry> {
        match self {
            Track::Circle { center, r0 } => InterfaceGeometry::shrinking_circle(*center, *r0, t, grid, cutoff),
            Track::Curve { curve, t: t_curve } => {
                if t > *t_curve {
                    *curve = evolve_csf_for(curve, t - *t_curve, 1e-4)?;
                    *t_curve = t;
                }
                InterfaceGeometry::from_curve(curve.clone(), grid, cutoff, t)
            }
            Track::Planar { front } => InterfaceGeometry::planar(grid, *front, cutoff, t),
        }
    }
}

/// Result of one solver run with a frame record at every stride.
struct Evolution {
    record: RunRecord,
    frames: Vec<FrameRecord>,
    last: FrameDiagnostics,
    final_state: VectorField2,
}

/// Runs `u0` to `t_end`, measuring every frame against `track`.
#[allow(clippy::too_many_arguments)]
fn evolve<'p>(
    cfg: &ExperimentConfig,
    tag: &str,
    p: &'p BulkPotential,
    u0: VectorField2,
    eps: f64,
    mu: f64,
    track: &mut Track,
    cutoff: CutoffProfile,
) -> Result<(Evolution, Solver<'p>)> {
    let start = Instant::now();
    let grid = u0.grid;
    let mut solver = Solver::new(u0, p, solver_params(cfg, eps, mu))?;
    let mut frames = Vec::new();
    let mut last = None;
    let summary = solver.run(cfg.run.t_end, cfg.run.stride, |_, state| {
        let geom = track.at(state.t, &grid, cutoff)?;
        let d = FrameDiagnostics::measure(&state.u, &geom, p, eps, mu);
        frames.push(d.record(eps, None));
        last = Some(d);
        Ok(())
    })?;
    let csv = if cfg.experiment.write_csv {
        let path = cfg.experiment.output_dir.join(format!("{tag}_eps{eps}.csv"));
        write_frames(&path, &frames)?;
        Some(path)
    } else {
        None
    };
    let record = RunRecord {
        eps,
        mu,
        h: grid.h(),
        cells: grid.nx() - 1,
        dt: solver.state.dt,
        steps: summary.steps,
        energy_violations: summary.violations,
        rejections: summary.rejections,
        coercivity_violations: frames.iter().filter(|f| !f.coercivity_ok).count(),
        frames: frames.len(),
        runtime_seconds: start.elapsed().as_secs_f64(),
        csv,
        metrics: BTreeMap::new(),
    };
    let final_state = solver.state.u.clone();
    Ok((Evolution { record, frames, last: last.expect("run records at least one frame"), final_state }, solver))
}

pub fn write_frames(path: &Path, frames: &[FrameRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for f in frames {
        wtr.serialize(f)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn global_checks(runs: &[RunRecord]) -> Vec<Check> {
    let energy: usize = runs.iter().map(|r| r.energy_violations).sum();
    let coercive: usize = runs.iter().map(|r| r.coercivity_violations).sum();
    vec![
        Check::at_most("energy_dissipation", energy as f64, 0.0, "accepted steps with A_ε increasing by more than 1e-8·A_ε(u⁰)"),
        Check::at_most("coercivity", coercive as f64, 0.0, "frames violating a coercivity bound"),
    ]
}

fn planar_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = cfg.potential.build();
    let w = profile_for(&p)?;
    let g = &cfg.geometry;
    let mut runs = Vec::new();
    for &eps in &cfg.run.eps {
        let h = eps / cfg.run.cells_per_eps;
        let n = (g.domain_size / h).round() as usize;
        let h = g.domain_size / n as f64;
        let sides = Sides { west: Boundary::Fixed, east: Boundary::Fixed, south: Boundary::Periodic, north: Boundary::Periodic };
        let grid = Grid2D::new(n + 1, 16, h, g.domain_origin, sides)?;
        let front = g.front.unwrap_or(g.domain_origin[0] + 0.5 * g.domain_size);
        let u0 = VectorField2::from_fn(grid, |x, _| [0.0, w.eval((x - front) / eps)]);
        let mut track = Track::Planar { front };
        let cutoff = CutoffProfile::new(g.delta0)?;
        let (mut ev, _) = evolve(cfg, "E1", &p, u0.clone(), eps, cfg.run.mu, &mut track, cutoff)?;
        let drift = (0..grid.len())
            .map(|k| (ev.final_state.x[k] - u0.x[k]).hypot(ev.final_state.y[k] - u0.y[k]))
            .fold(0.0, f64::max);
        ev.record.put("drift_linf", drift);
        runs.push(ev.record);
    }
    let mut checks: Vec<Check> = runs
        .iter()
        .map(|r| Check::at_most("planar_drift", r.metric("drift_linf").unwrap_or(f64::NAN), 5e-3, format!("L∞ drift at ε = {}", r.eps)))
        .collect();
    checks.extend(global_checks(&runs));
    checks.push(Check::at_most("planar_runtime", runs.iter().map(|r| r.runtime_seconds).sum(), 30.0, "seconds"));
    Ok((runs, BTreeMap::new(), checks))
}

/// Per-ε results of the shared circle sweep.
pub struct CircleSweep {
    pub runs: Vec<RunRecord>,
    pub frames: Vec<Vec<FrameRecord>>,
    pub runtime_seconds: f64,
}

/// Runs the configured initial data on the circle for every ε.
pub fn circle_sweep(cfg: &ExperimentConfig) -> Result<CircleSweep> {
    let start = Instant::now();
    let p = cfg.potential.build();
    let w = profile_for(&p)?;
    let cutoff = CutoffProfile::new(cfg.geometry.delta0)?;
    let mut runs = Vec::new();
    let mut all = Vec::new();
    for &eps in &cfg.run.eps {
        let grid = square_grid(cfg, eps)?;
        let mut track = Track::new(cfg)?;
        let geom0 = track.at(0.0, &grid, cutoff)?;
        let u0 = make_well_prepared(&cfg.initial, &geom0, &w, eps)?;
        // the constant-director control, measured on its initial frame
        let control = make_well_prepared(&DirectorFamily::Constant { angle: 0.0 }, &geom0, &w, eps)?;
        let control = FrameDiagnostics::measure(&control, &geom0, &p, eps, cfg.run.mu);
        let tag = format!("{:?}", cfg.experiment.id);
        let (mut ev, _) = evolve(cfg, &tag, &p, u0, eps, cfg.run.mu, &mut track, cutoff)?;
        let t = cfg.run.t_end;
        let first = ev.frames[0];
        let last = *ev.frames.last().unwrap();
        let r_exact = circle_exact(cfg.geometry.radius, t)?;
        let sup_e = ev.frames.iter().map(|f| f.modulated_energy).fold(f64::NEG_INFINITY, f64::max);
        let rec = &mut ev.record;
        rec.put("radius", last.radius_b);
        rec.put("radius_exact", r_exact);
        rec.put("radius_error", (last.radius_b - r_exact).abs());
        rec.put("sup_modulated_energy", sup_e);
        rec.put("sup_e_over_eps_log", sup_e / (eps * (1.0 / eps).ln()));
        rec.put("control_e_over_eps", control.energy.modulated_energy / eps);
        rec.put("phase_l1", last.phase_l1);
        rec.put("phase_weighted", last.phase_weighted);
        rec.put("length_b", last.length_b);
        rec.put("length_q", last.length_q);
        rec.put("length_reference", ev.last.levels.map_or(f64::NAN, |l| l.reference_length));
        rec.put("theta_k", last.theta_k);
        rec.put("mu_k", last.mu_k);
        rec.put("initial_theta_k", first.theta_k);
        rec.put("initial_mu_k", first.mu_k);
        rec.put("tangential_over_e", ev.last.auxiliary.tangential / ev.last.auxiliary.e_over_eps);
        runs.push(ev.record);
        all.push(ev.frames);
    }
    Ok(CircleSweep { runs, frames: all, runtime_seconds: start.elapsed().as_secs_f64() })
}

impl CircleSweep {
    fn pairs(&self, metric: &str) -> Vec<(f64, f64)> {
        self.runs.iter().map(|r| (r.eps, r.metric(metric).unwrap_or(f64::NAN))).collect()
    }

    fn rate_check(&self, rates: &mut BTreeMap<String, RateFit>, metric: &str, name: &str, min_exponent: f64) -> Check {
        match fit_rate(&self.pairs(metric)) {
            Ok(fit) => {
                let c = Check::at_least(name, fit.exponent, min_exponent, format!("fitted exponent of {metric} in ε"));
                rates.insert(metric.into(), fit);
                c
            }
            Err(e) => Check::failed(name, min_exponent, format!("{metric}: {e}")),
        }
    }

    /// The checks belonging to experiment `id`, plus the dissipation and coercivity properties.
    pub fn evaluate(&self, id: ExperimentId, cfg: &ExperimentConfig) -> (BTreeMap<String, RateFit>, Vec<Check>) {
        let mut rates = BTreeMap::new();
        let mut checks = Vec::new();
        match id {
            ExperimentId::E2 => {
                checks.push(self.rate_check(&mut rates, "radius_error", "radius_rate", 0.8));
                let r = self.runs.last().unwrap();
                let (lb, lq) = (r.metric("length_b").unwrap_or(f64::NAN), r.metric("length_q").unwrap_or(f64::NAN));
                let reference = r.metric("length_reference").unwrap_or(f64::NAN);
                checks.push(Check::at_most(
                    "level_length_b",
                    (lb - reference).abs() / reference,
                    0.1,
                    format!("relative error of the m/2 contour length at ε = {}", r.eps),
                ));
                checks.push(Check::at_most("level_length_q", lq / lb, 0.01, format!("2m contour length over m/2 contour length at ε = {}", r.eps)));
                checks.push(Check::at_most("sweep_runtime", self.runtime_seconds, 600.0, "seconds"));
            }
            ExperimentId::E3 => {
                let v: Vec<f64> = self.pairs("sup_e_over_eps_log").into_iter().map(|p| p.1).collect();
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                checks.push(Check::at_most("modulated_energy_spread", hi / lo, 2.0, "max/min of sup_t E_ε/(ε log 1/ε) over the sweep"));
                // E/ε ~ 1/ε is a fitted exponent of −1
                match fit_rate(&self.pairs("control_e_over_eps")) {
                    Ok(fit) => {
                        checks.push(Check::at_most("control_divergence", fit.exponent, -0.8, "fitted exponent of the control's E_ε/ε"));
                        rates.insert("control_e_over_eps".into(), fit);
                    }
                    Err(e) => checks.push(Check::failed("control_divergence", -0.8, e.to_string())),
                }
                if let Ok(fit) = fit_rate(&self.pairs("sup_modulated_energy")) {
                    rates.insert("sup_modulated_energy".into(), fit);
                }
            }
            ExperimentId::E4 => {
                checks.push(self.rate_check(&mut rates, "phase_l1", "phase_l1_rate", 1.0 / 3.0));
                if let Ok(fit) = fit_rate(&self.pairs("phase_weighted")) {
                    rates.insert("phase_weighted".into(), fit);
                }
            }
            ExperimentId::E5 => {
                checks.push(self.rate_check(&mut rates, "mu_k", "anchoring_rate", 1.0));
                let worst = self
                    .runs
                    .iter()
                    .map(|r| r.metric("initial_mu_k").unwrap_or(f64::NAN) / r.metric("initial_theta_k").unwrap_or(f64::NAN))
                    .fold(f64::NEG_INFINITY, f64::max);
                checks.push(Check::at_most("anchoring_initial", worst, 1e-10, "largest μ_k/θ_k on the initial frames"));
            }
            _ => {}
        }
        let _ = cfg;
        checks.extend(global_checks(&self.runs));
        (rates, checks)
    }
}

fn residual_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let start = Instant::now();
    let p = cfg.potential.build();
    let w = profile_for(&p)?;
    let cutoff = CutoffProfile::new(cfg.geometry.delta0)?;
    let q = &cfg.residual;
    let bumps = bump_family(cfg.geometry.center, q.offset, &q.radii, q.per_radius, q.seed);
    let mut runs = Vec::new();
    for &eps in &cfg.run.eps {
        let grid = square_grid(cfg, eps)?;
        let mut track = Track::new(cfg)?;
        let geom0 = track.at(0.0, &grid, cutoff)?;
        let u0 = make_well_prepared(&cfg.initial, &geom0, &w, eps)?;
        let (mut ev, mut solver) = evolve(cfg, "E6", &p, u0, eps, cfg.run.mu, &mut track, cutoff)?;
        let t0 = solver.state.t;
        solver.steps(q.gap_steps)?;
        let t1 = solver.state.t;
        let u1 = solver.state.u.clone();
        let tm = 0.5 * (t0 + t1);
        let geom = track.at(tm, &grid, cutoff)?;
        let res = of_residual(&ev.final_state, &u1, t1 - t0, cfg.run.mu, &bumps, &geom, eps)
            .map_err(|e| Error::Frame { frame: ev.frames.len(), source: Box::new(e) })?;
        let ok: Vec<f64> = res.iter().filter(|r| r.admissible).map(|r| r.normalized).collect();
        let worst = ok.iter().cloned().fold(0.0, f64::max);
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        // the residual frame is appended to the CSV
        let mid = VectorField2 {
            grid,
            x: (0..grid.len()).map(|k| 0.5 * (ev.final_state.x[k] + u1.x[k])).collect(),
            y: (0..grid.len()).map(|k| 0.5 * (ev.final_state.y[k] + u1.y[k])).collect(),
        };
        let d = FrameDiagnostics::measure(&mid, &geom, &p, eps, cfg.run.mu);
        ev.frames.push(d.record(eps, Some(worst)));
        if let Some(path) = &ev.record.csv {
            write_frames(path, &ev.frames)?;
        }
        let rec = &mut ev.record;
        rec.frames = ev.frames.len();
        rec.coercivity_violations = ev.frames.iter().filter(|f| !f.coercivity_ok).count();
        rec.steps = solver.ledger.steps;
        rec.energy_violations = solver.ledger.violations;
        rec.rejections = solver.ledger.rejections;
        rec.put("of_residual", worst);
        rec.put("of_residual_mean", mean);
        rec.put("admissible_bumps", ok.len() as f64);
        rec.put("residual_dt", t1 - t0);
        runs.push(ev.record);
    }
    let mut rates = BTreeMap::new();
    let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (r.eps, r.metric("of_residual").unwrap_or(f64::NAN))).collect();
    let mut checks = vec![match fit_rate(&pairs) {
        Ok(fit) => {
            let c = Check { passed: fit.exponent > 0.0, ..Check::at_least("of_residual_rate", fit.exponent, 0.0, "fitted exponent of the normalized residual in ε") };
            rates.insert("of_residual".into(), fit);
            c
        }
        Err(e) => Check::failed("of_residual_rate", 0.0, e.to_string()),
    }];
    checks.push(Check::at_most("residual_runtime", start.elapsed().as_secs_f64(), 600.0, "seconds"));
    checks.extend(global_checks(&runs));
    Ok((runs, rates, checks))
}

/// Vortex amplitude `s(r)` built exactly as the 2D data, for the radial solver.
fn radial_initial(cfg: &ExperimentConfig, w: &TravelingWaveProfile, eps: f64, dr: f64) -> Result<RadialState> {
    let cutoff = CutoffProfile::new(cfg.geometry.delta0)?;
    let r0 = cfg.geometry.radius;
    let r_max = 0.75 * cfg.geometry.domain_size * std::f64::consts::SQRT_2 + 0.05;
    RadialState::new(|r| amplitude(r0 - r, cutoff.eta0(r0 - r), w, eps), r_max, dr, eps, 0.0)
}

fn oracle_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = cfg.potential.build();
    let w = profile_for(&p)?;
    let cutoff = CutoffProfile::new(cfg.geometry.delta0)?;
    let mu2 = cfg.run.mu_compare.expect("validated");
    let mut runs = Vec::new();
    let mut checks = Vec::new();
    let start = Instant::now();
    for &eps in &cfg.run.eps {
        let grid = square_grid(cfg, eps)?;
        let mut track = Track::new(cfg)?;
        let geom0 = track.at(0.0, &grid, cutoff)?;
        let u0 = make_well_prepared(&DirectorFamily::Vortex, &geom0, &w, eps)?;
        let (mut a, _) = evolve(cfg, "E7", &p, u0.clone(), eps, cfg.run.mu, &mut track, cutoff)?;
        let (b, _) = evolve(cfg, &format!("E7_mu{mu2}"), &p, u0, eps, mu2, &mut track, cutoff)?;
        let mut radial = radial_initial(cfg, &w, eps, grid.h() / 4.0)?;
        radial.advance_to(&p, cfg.run.t_end);
        let mut oracle = radial.to_grid(grid, cfg.geometry.center);
        oracle.enforce_boundary();
        let rel = a.final_state.l2_distance(&oracle)? / oracle.l2_norm();
        let rel_b = b.final_state.l2_distance(&oracle)? / oracle.l2_norm();
        let between = a.final_state.l2_distance(&b.final_state)?;
        let rec = &mut a.record;
        rec.put("oracle_relative_l2", rel);
        rec.put("oracle_relative_l2_compare", rel_b);
        rec.put("mu_difference_l2", between);
        rec.put("radial_radius", radial.midlevel_radius(&p).unwrap_or(f64::NAN));
        rec.put("radius_exact", circle_exact(cfg.geometry.radius, cfg.run.t_end)?);
        checks.push(Check::at_most("oracle_relative_l2", rel, 1e-3, format!("‖u − u_radial‖/‖u_radial‖ at ε = {eps}, μ = {}", cfg.run.mu)));
        checks.push(Check::at_most("mu_independence", between, 5e-3, format!("‖u_μ={} − u_μ={mu2}‖ at ε = {eps}", cfg.run.mu)));
        runs.push(a.record);
        runs.push(b.record);
    }
    checks.push(Check::at_most("oracle_runtime", start.elapsed().as_secs_f64(), 180.0, "seconds"));
    checks.extend(global_checks(&runs));
    Ok((runs, BTreeMap::new(), checks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base(id: &str, extra: &str) -> String {
        format!("[experiment]\nid = \"{id}\"\nwrite_csv = false\n\n[run]\neps = [0.08, 0.06, 0.05]\nt_end = 0.002\nstride = 0.001\n{extra}")
    }

    #[test]
    fn exact_power_laws() {
        for a in [1.0, 1.0 / 3.0] {
            let pairs: Vec<(f64, f64)> = [0.08, 0.04, 0.02, 0.01].iter().map(|&e: &f64| (e, 3.0 * e.powf(a))).collect();
            let f = fit_rate(&pairs).unwrap();
            assert_abs_diff_eq!(f.exponent, a, epsilon = 1e-12);
            assert_abs_diff_eq!(f.constant, 3.0, epsilon = 1e-11);
            assert!(f.residual < 1e-12);
        }
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps: Vec<f64> = (0..8).map(|k| 0.1 * 0.7f64.powi(k)).collect();
        for _ in 0..20 {
            let pairs: Vec<(f64, f64)> = eps.iter().map(|&e| (e, e.powf(0.5) * (1.0 + rng.gen_range(-0.05..0.05)))).collect();
            assert!((fit_rate(&pairs).unwrap().exponent - 0.5).abs() < 0.1);
        }
    }

    #[test]
    fn rate_fit_rejections() {
        assert!(fit_rate(&[(0.1, 1.0), (0.05, 0.5)]).is_err());
        assert!(fit_rate(&[(0.1, 1.0), (0.05, 0.0), (0.02, 0.1)]).is_err());
        assert!(fit_rate(&[(0.1, 1.0), (0.1, 0.5), (0.1, 0.1)]).is_err());
    }

    #[test]
    fn config_defaults_and_rejections() {
        let cfg = ExperimentConfig::from_toml_str(&base("E2", ""), Path::new("/tmp")).unwrap();
        assert_eq!(cfg.run.cells_per_eps, 4.0);
        assert_eq!(cfg.geometry.shape, Shape::Circle);
        assert_eq!(cfg.initial, DirectorFamily::Vortex);
        assert_eq!(cfg.experiment.output_dir, Path::new("/tmp/out"));
        let empty = base("E2", "").replace("[0.08, 0.06, 0.05]", "[]");
        assert!(matches!(ExperimentConfig::from_toml_str(&empty, Path::new(".")), Err(Error::Config(_))));
        let rising = base("E2", "").replace("[0.08, 0.06, 0.05]", "[0.05, 0.06, 0.08]");
        assert!(matches!(ExperimentConfig::from_toml_str(&rising, Path::new(".")), Err(Error::Config(_))));
        let unknown = base("E2", "colour = 3\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&unknown, Path::new(".")), Err(Error::Toml(_))));
        let no_file = base("E2", "\n[geometry]\nshape = \"curve\"\ncurve_file = \"missing.csv\"\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&no_file, Path::new(".")), Err(Error::Config(_))));
        let control = base("E2", "\n[initial]\nfamily = \"constant\"\nangle = 0.5\n");
        let cfg = ExperimentConfig::from_toml_str(&control, Path::new(".")).unwrap();
        assert_eq!(cfg.initial, DirectorFamily::Constant { angle: 0.5 });
        assert!(ExperimentConfig::from_toml_str(&base("E7", ""), Path::new(".")).is_err());
    }

    #[test]
    fn summary_round_trip_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let text = base("E0", "").replace("write_csv = false", &format!("output_dir = {:?}", dir.path().to_str().unwrap()));
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new(".")).unwrap();
        let s = run_experiment(&cfg).unwrap();
        assert!(s.passed(), "{:?}", s.checks);
        let path = dir.path().join("E0_summary.json");
        assert_eq!(Summary::read(&path).unwrap(), s);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        fs::write(&path, v.to_string()).unwrap();
        assert!(Summary::read(&path).is_err());
        assert!(dir.path().join("E0_wave.csv").is_file());
    }

    #[test]
    fn short_circle_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        // δ₀ = 0.05 needs four cells across, so this coarse sweep refines beyond ε/4
        let text = base("E2", "cells_per_eps = 8\n")
            .replace("[0.08, 0.06, 0.05]", "[0.05, 0.045, 0.04]")
            .replace("write_csv = false", &format!("output_dir = {:?}", dir.path().to_str().unwrap()));
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new(".")).unwrap();
        let a = circle_sweep(&cfg).unwrap();
        let first = fs::read(dir.path().join("E2_eps0.05.csv")).unwrap();
        let b = circle_sweep(&cfg).unwrap();
        assert_eq!(first, fs::read(dir.path().join("E2_eps0.05.csv")).unwrap());
        // NaN columns rule out a direct comparison
        assert_eq!(format!("{:?}", a.frames), format!("{:?}", b.frames));
        assert_eq!(a.frames[0].len(), 3);
        let (_, checks) = a.evaluate(ExperimentId::E2, &cfg);
        for name in ["energy_dissipation", "coercivity"] {
            assert!(checks.iter().any(|c| c.name == name && c.passed), "{checks:?}");
        }
        let back = read_frames(&dir.path().join("E2_eps0.05.csv")).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].t, 0.0);
    }
}
