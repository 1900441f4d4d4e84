//! Double-equal-well potentials `F(u) = f(|u|) = g(|u|)²/2`, the calibration
//! antiderivative `d_F(s) = ∫₀ˢ g` and the one-dimensional traveling wave.

use crate::{Error, Result};

const TABLE_LEN: usize = 4096;
const TABLE_END: f64 = 3.0;

/// Eight-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

pub(crate) fn gauss_legendre(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut acc = 0.0;
    for k in 0..8 {
        acc += GL_WEIGHTS[k] * f(c + r * GL_NODES[k]);
    }
    acc * r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// `g(s) = scale · s|s² − 1|`
    ChernSimonsHiggs { scale: f64 },
    /// Quadratic wells at 0 and 1 joined by a concave quadratic bridge on (1/4, 3/4).
    QuadraticWell,
    /// `g(s) = s`: a deliberately broken potential without an upper well.
    MissingUpperWell,
}

impl Family {
    fn f(self, s: f64) -> f64 {
        match self {
            Family::ChernSimonsHiggs { scale } => {
                let q = 1.0 - s * s;
                0.5 * scale * scale * s * s * q * q
            }
            Family::QuadraticWell => {
                if s <= 0.25 {
                    s * s
                } else if s >= 0.75 {
                    (s - 1.0) * (s - 1.0)
                } else {
                    1.0 / 16.0 + (s - 0.25) * (0.75 - s)
                }
            }
            Family::MissingUpperWell => 0.5 * s * s,
        }
    }

    fn df(self, s: f64) -> f64 {
        match self {
            Family::ChernSimonsHiggs { scale } => {
                let s2 = s * s;
                scale * scale * s * (1.0 - s2) * (1.0 - 3.0 * s2)
            }
            Family::QuadraticWell => {
                if s <= 0.25 {
                    2.0 * s
                } else if s >= 0.75 {
                    2.0 * (s - 1.0)
                } else {
                    1.0 - 2.0 * s
                }
            }
            Family::MissingUpperWell => s,
        }
    }

    fn d2f(self, s: f64) -> f64 {
        match self {
            Family::ChernSimonsHiggs { scale } => {
                let s2 = s * s;
                0.5 * scale * scale * (2.0 - 24.0 * s2 + 30.0 * s2 * s2)
            }
            Family::QuadraticWell => {
                if s < 0.25 || s > 0.75 {
                    2.0
                } else {
                    -2.0
                }
            }
            Family::MissingUpperWell => 1.0,
        }
    }

    fn g(self, s: f64) -> f64 {
        match self {
            Family::ChernSimonsHiggs { scale } => scale * s * (s * s - 1.0).abs(),
            Family::QuadraticWell => (2.0 * self.f(s)).sqrt(),
            Family::MissingUpperWell => s,
        }
    }

    /// Antiderivative of `g` valid for `s ≥ 3`, up to a constant.
    fn tail_primitive(self, s: f64) -> f64 {
        match self {
            Family::ChernSimonsHiggs { scale } => {
                let q = s * s - 1.0;
                0.25 * scale * q * q
            }
            Family::QuadraticWell => (s - 1.0) * (s - 1.0) / std::f64::consts::SQRT_2,
            Family::MissingUpperWell => 0.5 * s * s,
        }
    }

    /// Points where `g` is not smooth; quadrature panels are split there.
    fn breakpoints(self) -> &'static [f64] {
        match self {
            Family::ChernSimonsHiggs { .. } => &[1.0],
            Family::QuadraticWell => &[0.25, 0.75, 1.0],
            Family::MissingUpperWell => &[],
        }
    }
}

/// Cubic Hermite table of `d_F` on `[0, TABLE_END]` with slopes `g`.
#[derive(Debug, Clone)]
struct Table {
    ds: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Table {
    fn build(family: Family) -> Table {
        let ds = TABLE_END / (TABLE_LEN - 1) as f64;
        let mut values = vec![0.0; TABLE_LEN];
        let mut slopes: Vec<f64> = (0..TABLE_LEN).map(|i| family.g(i as f64 * ds)).collect();
        for i in 1..TABLE_LEN {
            let a = (i - 1) as f64 * ds;
            let b = i as f64 * ds;
            values[i] = values[i - 1] + integrate_split(family, a, b);
        }
        // Fritsch-Carlson limiter keeps the interpolant monotone.
        for i in 0..TABLE_LEN - 1 {
            let delta = (values[i + 1] - values[i]) / ds;
            if delta <= 0.0 {
                slopes[i] = 0.0;
                slopes[i + 1] = 0.0;
                continue;
            }
            let a = slopes[i] / delta;
            let b = slopes[i + 1] / delta;
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                slopes[i] = t * a * delta;
                slopes[i + 1] = t * b * delta;
            }
        }
        Table { ds, values, slopes }
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let x = s / self.ds;
        let i = (x.floor() as usize).min(TABLE_LEN - 2);
        (i, x - i as f64)
    }

    fn eval(&self, s: f64) -> f64 {
        let (i, t) = self.locate(s);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * self.ds, self.slopes[i + 1] * self.ds);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1
    }

    fn derivative(&self, s: f64) -> f64 {
        let (i, t) = self.locate(s);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * self.ds, self.slopes[i + 1] * self.ds);
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / self.ds
    }
}

fn integrate_split(family: Family, a: f64, b: f64) -> f64 {
    let mut cuts = vec![a];
    cuts.extend(family.breakpoints().iter().copied().filter(|&p| p > a && p < b));
    cuts.push(b);
    cuts.windows(2)
        .map(|w| gauss_legendre(w[0], w[1], |s| family.g(s)))
        .sum()
}

/// A potential together with its derived quantities.
#[derive(Debug, Clone)]
pub struct BulkPotential {
    family: Family,
    name: &'static str,
    normalized: bool,
    m: f64,
    c0: f64,
    s0: f64,
    stabilization: f64,
    table: Table,
}

impl BulkPotential {
    fn from_family(family: Family, name: &'static str, normalized: bool) -> BulkPotential {
        let table = Table::build(family);
        let m = (0..64)
            .map(|k| integrate_split(family, k as f64 / 64.0, (k + 1) as f64 / 64.0))
            .sum();
        let c0 = growth_constant(family);
        let s0 = interior_critical_point(family).unwrap_or(f64::NAN);
        let stabilization = (0..=15_000)
            .map(|k| family.d2f(k as f64 * 1e-4).abs())
            .fold(0.0, f64::max);
        BulkPotential { family, name, normalized, m, c0, s0, stabilization, table }
    }

    /// Chern-Simons-Higgs potential. The normalized variant scales `g` by 4 so that `m = 1`.
    pub fn csh(normalized: bool) -> BulkPotential {
        let scale = if normalized { 4.0 } else { 1.0 };
        BulkPotential::from_family(Family::ChernSimonsHiggs { scale }, "csh", normalized)
    }

    /// Quadratic wells with a `C^{1,1}` bridge; `m` is not normalized.
    pub fn quadratic_well() -> BulkPotential {
        BulkPotential::from_family(Family::QuadraticWell, "quadratic_well", false)
    }

    /// `g(s) = s`, for exercising the validator.
    pub fn missing_upper_well() -> BulkPotential {
        BulkPotential::from_family(Family::MissingUpperWell, "missing_upper_well", false)
    }

    pub fn family(&self) -> Family {
        self.family
    }
    pub fn name(&self) -> &'static str {
        self.name
    }
    pub fn normalized(&self) -> bool {
        self.normalized
    }
    /// `m = ∫₀¹ g`.
    pub fn m(&self) -> f64 {
        self.m
    }
    pub fn c0(&self) -> f64 {
        self.c0
    }
    /// Interior critical point of `f` in (0, 1); NaN if there is none.
    pub fn s0(&self) -> f64 {
        self.s0
    }
    /// `max |f''|` on `[0, 1.5]`.
    pub fn stabilization(&self) -> f64 {
        self.stabilization
    }
    /// Value approached by `ψ` in the bulk phase.
    pub fn psi_target(&self) -> f64 {
        self.m
    }

    pub fn f(&self, s: f64) -> f64 {
        self.family.f(s)
    }
    pub fn df(&self, s: f64) -> f64 {
        self.family.df(s)
    }
    pub fn d2f(&self, s: f64) -> f64 {
        self.family.d2f(s)
    }
    pub fn g(&self, s: f64) -> f64 {
        self.family.g(s)
    }

    /// `F(u)` and `f'(|u|)/|u|` from `|u|²`, so that `∂F(u) = ratio · u`.
    /// The ratio stays finite at `u = 0`, which gives `∂F(0) = 0`.
    #[inline]
    pub fn density_and_ratio(&self, s2: f64) -> (f64, f64) {
        match self.family {
            Family::ChernSimonsHiggs { scale } => {
                let k = scale * scale;
                let q = 1.0 - s2;
                (0.5 * k * s2 * q * q, k * q * (1.0 - 3.0 * s2))
            }
            Family::QuadraticWell => {
                let s = s2.sqrt();
                if s <= 0.25 {
                    (s2, 2.0)
                } else if s >= 0.75 {
                    ((s - 1.0) * (s - 1.0), 2.0 * (s - 1.0) / s)
                } else {
                    (1.0 / 16.0 + (s - 0.25) * (0.75 - s), (1.0 - 2.0 * s) / s)
                }
            }
            Family::MissingUpperWell => (0.5 * s2, 1.0),
        }
    }

    /// The CSH scale, for kernels that dispatch on the family once per sweep.
    pub(crate) fn csh_scale(&self) -> Option<f64> {
        match self.family {
            Family::ChernSimonsHiggs { scale } => Some(scale),
            _ => None,
        }
    }

    /// `F(u) = f(|u|)` from `|u|²`.
    #[inline]
    pub fn density(&self, s2: f64) -> f64 {
        self.density_and_ratio(s2).0
    }

    /// `d_F(s) = ∫₀ˢ g`, monotone cubic interpolation on `[0, 3]` and the exact tail beyond.
    pub fn d_f(&self, s: f64) -> f64 {
        debug_assert!(s >= 0.0);
        if s <= TABLE_END {
            self.table.eval(s.max(0.0))
        } else {
            self.table.values[TABLE_LEN - 1] + self.family.tail_primitive(s)
                - self.family.tail_primitive(TABLE_END)
        }
    }

    /// Derivative of the interpolated `d_F`; approximates `g`.
    pub fn d_f_derivative(&self, s: f64) -> f64 {
        if s <= TABLE_END {
            self.table.derivative(s.max(0.0))
        } else {
            self.family.g(s)
        }
    }

    /// Checks the structural assumptions clause by clause.
    pub fn validate(&self) -> ValidationReport {
        validate_assumptions(self)
    }
}

fn growth_constant(family: Family) -> f64 {
    (0..=2000)
        .map(|k| {
            let s = 2.0 + 2.0 * k as f64 / 2000.0;
            (family.f(s) / (2.0 * s * s)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn interior_critical_point(family: Family) -> Option<f64> {
    let n = 10_000;
    let mut found = None;
    // sign of the last nonzero sample, so exact zeros on the grid are stepped over
    let mut prev = family.df(1.0 / n as f64);
    let mut prev_s = 1.0 / n as f64;
    for k in 2..n {
        let s = k as f64 / n as f64;
        let cur = family.df(s);
        if cur == 0.0 {
            continue;
        }
        if prev.signum() != cur.signum() && prev != 0.0 {
            if found.is_some() {
                return None;
            }
            let (mut a, mut b) = (prev_s, s);
            for _ in 0..100 {
                let c = 0.5 * (a + b);
                if family.df(c).signum() == family.df(a).signum() {
                    a = c;
                } else {
                    b = c;
                }
            }
            found = Some(0.5 * (a + b));
        }
        prev = cur;
        prev_s = s;
    }
    found
}

#[derive(Debug, Clone)]
pub struct Clause {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub clauses: Vec<Clause>,
    pub c0: f64,
    pub s0: Option<f64>,
    /// The growth bound `f(s) ≥ 2c₀²s²` for `s ≥ 1` cannot hold when `f(1) = 0`.
    pub literal_growth_satisfiable: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Clause> {
        self.clauses.iter().filter(|c| !c.passed).collect()
    }
}

fn lipschitz_estimate(family: Family, n: usize) -> f64 {
    let ds = 2.5 / n as f64;
    (0..n)
        .map(|k| ((family.g((k + 1) as f64 * ds) - family.g(k as f64 * ds)) / ds).abs())
        .fold(0.0, f64::max)
}

pub fn validate_assumptions(p: &BulkPotential) -> ValidationReport {
    let fam = p.family;
    let mut clauses = Vec::new();
    let mut push = |name, passed, detail: String| clauses.push(Clause { name, passed, detail });

    let n = 25_000;
    let min_g = (0..=n).map(|k| fam.g(2.5 * k as f64 / n as f64)).fold(f64::INFINITY, f64::min);
    push("g nonnegative", min_g >= 0.0, format!("min g on [0, 2.5] = {min_g:e}"));

    let coarse = lipschitz_estimate(fam, n);
    let fine = lipschitz_estimate(fam, 4 * n);
    push(
        "g Lipschitz",
        coarse.is_finite() && fine <= 1.5 * coarse + 1e-9,
        format!("difference quotients {coarse:.6} -> {fine:.6} under refinement"),
    );

    let (g0, g1) = (fam.g(0.0), fam.g(1.0));
    push("g(0) = 0", g0.abs() <= 1e-12, format!("g(0) = {g0:e}"));
    push("g(1) = 0", g1.abs() <= 1e-12, format!("g(1) = {g1:e}"));

    let f_min = (1..=n)
        .map(|k| 2.5 * k as f64 / n as f64)
        .filter(|s| (s - 1.0).abs() > 1e-9)
        .map(|s| fam.f(s))
        .fold(f64::INFINITY, f64::min);
    push("f positive off the wells", f_min > 0.0, format!("min f on (0, 2.5] \\ {{1}} = {f_min:e}"));

    let s0 = interior_critical_point(fam);
    push(
        "f' changes sign once in (0, 1)",
        s0.is_some(),
        match s0 {
            Some(s) => format!("s0 = {s:.12}"),
            None => "no unique interior sign change".into(),
        },
    );

    let (d0, d1) = (fam.df(0.0), fam.df(1.0));
    push("f'(0) = f'(1) = 0", d0.abs() <= 1e-12 && d1.abs() <= 1e-12, format!("f'(0) = {d0:e}, f'(1) = {d1:e}"));
    let (c0_, c1_) = (fam.d2f(0.0), fam.d2f(1.0));
    push("f''(0), f''(1) > 0", c0_ > 0.0 && c1_ > 0.0, format!("f''(0) = {c0_}, f''(1) = {c1_}"));

    let c0 = p.c0;
    push("growth for s >= 2", c0 > 0.0 && c0.is_finite(), format!("c0 = {c0:.6}"));

    ValidationReport {
        clauses,
        c0,
        s0,
        literal_growth_satisfiable: fam.f(1.0) > 0.0,
    }
}

/// How the translation invariance of the traveling wave is removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pinning {
    /// `d_F(θ(0)) = m/2`: the midlevel of `ψ` sits at `z = 0`.
    HalfMass,
    /// `θ(0)` given directly.
    Amplitude(f64),
}

/// Heteroclinic profile `θ' = g(θ)`, `θ(−∞) = 0`, `θ(+∞) = 1`, sampled uniformly on `[−Z, Z]`
/// with exponential tails outside.
#[derive(Debug, Clone)]
pub struct TravelingWaveProfile {
    z_max: f64,
    dz: f64,
    theta: Vec<f64>,
    slope: Vec<f64>,
    rate_low: f64,
    rate_high: f64,
    theta0: f64,
}

fn pinning_value(p: &BulkPotential, pin: Pinning) -> Result<f64> {
    match pin {
        Pinning::Amplitude(v) if v > 0.0 && v < 1.0 => Ok(v),
        Pinning::Amplitude(v) => Err(Error::Invalid(format!("pinning amplitude {v} outside (0, 1)"))),
        Pinning::HalfMass => {
            let target = 0.5 * p.m();
            let (mut a, mut b) = (0.0, 1.0);
            for _ in 0..200 {
                let c = 0.5 * (a + b);
                if p.d_f(c) < target {
                    a = c;
                } else {
                    b = c;
                }
            }
            Ok(0.5 * (a + b))
        }
    }
}

/// Integrates the traveling wave with `n` samples on `[−Z, Z]`.
pub fn traveling_wave(p: &BulkPotential, z_max: f64, n: usize, pin: Pinning) -> Result<TravelingWaveProfile> {
    if n < 3 || !(z_max > 0.0) {
        return Err(Error::Invalid("traveling wave needs n >= 3 and Z > 0".into()));
    }
    let gmin = (1..1000).map(|k| p.g(k as f64 / 1000.0)).fold(f64::INFINITY, f64::min);
    if !(gmin > 0.0) {
        return Err(Error::Disconnected(format!("g vanishes inside (0, 1): min g = {gmin:e}")));
    }
    if p.g(1.0).abs() > 1e-12 || p.g(0.0).abs() > 1e-12 {
        return Err(Error::Disconnected("g does not vanish at both wells".into()));
    }
    let theta0 = pinning_value(p, pin)?;
    let rate_low = p.d2f(0.0).sqrt();
    let rate_high = p.d2f(1.0).sqrt();
    let dz = 2.0 * z_max / (n - 1) as f64;
    let max_rate = rate_low.max(rate_high);
    let sub = ((dz * max_rate / 0.01).ceil() as usize).max(1);

    let g = |t: f64| p.g(t.clamp(0.0, 1.0));
    let rk4 = |mut t: f64, h: f64, steps: usize| {
        let k = h / steps as f64;
        for _ in 0..steps {
            let a = g(t);
            let b = g(t + 0.5 * k * a);
            let c = g(t + 0.5 * k * b);
            let d = g(t + k * c);
            t += k / 6.0 * (a + 2.0 * b + 2.0 * c + d);
        }
        t
    };

    let mut theta = vec![0.0; n];
    // First sample at or right of z = 0.
    let first = ((z_max / dz).ceil() as usize).min(n - 1);
    let z_first = -z_max + first as f64 * dz;
    let mut cur = rk4(theta0, z_first, sub);
    theta[first] = cur;
    for slot in theta.iter_mut().skip(first + 1) {
        cur = rk4(cur, dz, sub);
        *slot = cur;
    }
    if first > 0 {
        let z_prev = z_first - dz;
        cur = rk4(theta0, z_prev, sub);
        theta[first - 1] = cur;
        for k in (0..first - 1).rev() {
            cur = rk4(cur, -dz, sub);
            theta[k] = cur;
        }
    }
    let slope = theta.iter().map(|&t| g(t)).collect();
    Ok(TravelingWaveProfile { z_max, dz, theta, slope, rate_low, rate_high, theta0 })
}

impl TravelingWaveProfile {
    pub fn z_max(&self) -> f64 {
        self.z_max
    }
    pub fn theta0(&self) -> f64 {
        self.theta0
    }
    /// Sample positions and values.
    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.theta
            .iter()
            .enumerate()
            .map(|(k, &t)| (-self.z_max + k as f64 * self.dz, t))
    }

    pub fn eval(&self, z: f64) -> f64 {
        let n = self.theta.len();
        if z <= -self.z_max {
            return self.theta[0] * (self.rate_low * (z + self.z_max)).exp();
        }
        if z >= self.z_max {
            return 1.0 - (1.0 - self.theta[n - 1]) * (-self.rate_high * (z - self.z_max)).exp();
        }
        let x = (z + self.z_max) / self.dz;
        let i = (x.floor() as usize).min(n - 2);
        let t = x - i as f64;
        let (y0, y1) = (self.theta[i], self.theta[i + 1]);
        let (m0, m1) = (self.slope[i] * self.dz, self.slope[i + 1] * self.dz);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1
    }

    /// `θ'(z)` from the same Hermite interpolant as [`eval`](Self::eval).
    pub fn derivative(&self, z: f64) -> f64 {
        let n = self.theta.len();
        if z <= -self.z_max {
            return self.rate_low * self.eval(z);
        }
        if z >= self.z_max {
            return self.rate_high * (1.0 - self.eval(z));
        }
        let x = (z + self.z_max) / self.dz;
        let i = (x.floor() as usize).min(n - 2);
        let t = x - i as f64;
        let (y0, y1) = (self.theta[i], self.theta[i + 1]);
        let (m0, m1) = (self.slope[i] * self.dz, self.slope[i + 1] * self.dz);
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * (y0 - y1) + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (3.0 * t2 - 2.0 * t) * m1) / self.dz
    }

    /// Profile with values within `cut` of a well snapped onto it.
    pub fn eval_snapped(&self, z: f64, cut: f64) -> f64 {
        let v = self.eval(z);
        if v < cut {
            0.0
        } else if v > 1.0 - cut {
            1.0
        } else {
            v
        }
    }

    /// Half-width beyond which the profile is within `tol` of its wells.
    pub fn default_half_width(p: &BulkPotential, tol: f64) -> f64 {
        let rate = p.d2f(0.0).sqrt().min(p.d2f(1.0).sqrt());
        -(tol.ln()) / rate + 1.0
    }
}
