//! Homogeneous equilibria `f_e(v)` and asymptotic perturbations
//! `g_∞(x, v) = ε Σ_n c_n p_n(v) e^{inx}`, evaluated on complex velocities.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numerics::{integrate_line, Contour};
use crate::{Error, Result, C64};

fn sqrt_pi() -> f64 {
    PI.sqrt()
}

/// Partial-fraction data `Σ_j r_j/(v − p_j) + conj(r_j)/(v − conj p_j)`,
/// real on the real axis. Poles are given in the upper half plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalData {
    pub poles: Vec<C64>,
    pub residues: Vec<C64>,
}

impl RationalData {
    fn check(&self) -> Result<()> {
        if self.poles.is_empty() || self.poles.len() != self.residues.len() {
            return Err(Error::InvalidSpec(
                "rational data needs matching, nonempty pole and residue lists".into(),
            ));
        }
        if self.poles.iter().any(|p| p.im <= 0.0) {
            return Err(Error::InvalidSpec(
                "rational poles must lie strictly in the upper half plane".into(),
            ));
        }
        let leading: f64 = self.residues.iter().map(|r| 2.0 * r.re).sum();
        if leading.abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "rational data decays only like 1/v (Σ 2 Re r = {leading:.3e})"
            )));
        }
        Ok(())
    }

    fn eval(&self, v: C64) -> C64 {
        self.poles
            .iter()
            .zip(&self.residues)
            .map(|(p, r)| r / (v - p) + r.conj() / (v - p.conj()))
            .sum()
    }

    fn deriv(&self, v: C64) -> C64 {
        self.poles
            .iter()
            .zip(&self.residues)
            .map(|(p, r)| -r / ((v - p) * (v - p)) - r.conj() / ((v - p.conj()) * (v - p.conj())))
            .sum()
    }

    /// `∫ e^{−iξw} (...) dw` by residues.
    fn transform(&self, xi: f64) -> C64 {
        let i = C64::new(0.0, 1.0);
        self.poles
            .iter()
            .zip(&self.residues)
            .map(|(p, r)| {
                if xi > 0.0 {
                    -2.0 * PI * i * r.conj() * (-i * xi * p.conj()).exp()
                } else if xi < 0.0 {
                    2.0 * PI * i * r * (-i * xi * p).exp()
                } else {
                    i * PI * (r - r.conj())
                }
            })
            .sum()
    }

    fn width(&self) -> f64 {
        self.poles.iter().map(|p| p.im).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// `e^{−v²}/√π`
    Maxwellian,
    /// `(mass/π)/(1+v²)`; `mass = 1` is the normalized density.
    Lorentzian {
        mass: f64,
    },
    /// `(4a^{5/2}/(3√π)) v⁴ e^{−a v²}`
    QuarticGaussian {
        a: f64,
    },
    Rational(RationalData),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Maxwellian => "maxwellian",
            Family::Lorentzian { .. } => "lorentzian",
            Family::QuarticGaussian { .. } => "quartic-gaussian",
            Family::Rational(_) => "user-tabulated-rational",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EquilibriumDoc {
    family: String,
    #[serde(default)]
    params: serde_json::Map<String, serde_json::Value>,
    #[serde(rename = "A", default = "default_strip")]
    strip: f64,
    /// Defaults by family: 3 for the gaussian tails, 1.5 for the algebraic ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    bound: Option<f64>,
}

fn default_strip() -> f64 {
    0.5
}

fn default_alpha() -> f64 {
    3.0
}

/// Equilibrium with its strip data `(A, B, α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EquilibriumDoc", into = "EquilibriumDoc")]
pub struct EquilibriumSpec {
    pub family: Family,
    pub strip: f64,
    pub alpha: f64,
    pub bound: Option<f64>,
}

fn param(map: &serde_json::Map<String, serde_json::Value>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::InvalidSpec(format!("parameter `{key}` must be a number"))),
    }
}

impl TryFrom<EquilibriumDoc> for EquilibriumSpec {
    type Error = Error;

    fn try_from(doc: EquilibriumDoc) -> Result<Self> {
        let family = match doc.family.as_str() {
            "maxwellian" => Family::Maxwellian,
            "lorentzian" => Family::Lorentzian {
                mass: param(&doc.params, "mass", 1.0)?,
            },
            "quartic-gaussian" => Family::QuarticGaussian {
                a: param(&doc.params, "a", 1.0)?,
            },
            "user-tabulated-rational" | "rational" => {
                let data: RationalData = serde_json::from_value(serde_json::Value::Object(doc.params.clone()))?;
                Family::Rational(data)
            }
            other => return Err(Error::InvalidSpec(format!("unknown family `{other}`"))),
        };
        let alpha = doc.alpha.unwrap_or(match family {
            Family::Maxwellian | Family::QuarticGaussian { .. } => default_alpha(),
            Family::Lorentzian { .. } | Family::Rational(_) => 1.5,
        });
        Self::new(family, doc.strip, alpha).map(|mut s| {
            s.bound = doc.bound;
            s
        })
    }
}

impl From<EquilibriumSpec> for EquilibriumDoc {
    fn from(spec: EquilibriumSpec) -> Self {
        let mut params = serde_json::Map::new();
        match &spec.family {
            Family::Maxwellian => {}
            Family::Lorentzian { mass } => {
                params.insert("mass".into(), (*mass).into());
            }
            Family::QuarticGaussian { a } => {
                params.insert("a".into(), (*a).into());
            }
            Family::Rational(data) => {
                if let Ok(serde_json::Value::Object(m)) = serde_json::to_value(data) {
                    params = m;
                }
            }
        }
        EquilibriumDoc {
            family: spec.family.name().into(),
            params,
            strip: spec.strip,
            alpha: Some(spec.alpha),
            bound: spec.bound,
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0) {
        return Err(Error::InvalidSpec(format!("decay exponent α = {alpha} must exceed 1")));
    }
    if alpha == 2.0 {
        return Err(Error::InvalidSpec(
            "decay exponent α = 2 is excluded (logarithmic terms)".into(),
        ));
    }
    Ok(())
}

impl EquilibriumSpec {
    pub fn new(family: Family, strip: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(strip > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "strip half-width A = {strip} must be positive"
            )));
        }
        match &family {
            Family::Lorentzian { mass } if !(*mass > 0.0) => {
                return Err(Error::InvalidSpec("lorentzian mass must be positive".into()))
            }
            Family::QuarticGaussian { a } if !(*a > 0.0) => {
                return Err(Error::InvalidSpec("quartic-gaussian a must be positive".into()))
            }
            Family::Rational(data) => data.check()?,
            _ => {}
        }
        let spec = Self {
            family,
            strip,
            alpha,
            bound: None,
        };
        if strip >= spec.analytic_width() {
            return Err(Error::InvalidSpec(format!(
                "strip A = {strip} reaches a singularity at distance {}",
                spec.analytic_width()
            )));
        }
        Ok(spec)
    }

    pub fn maxwellian() -> Self {
        Self::new(Family::Maxwellian, 0.5, 3.0).expect("valid built-in")
    }

    /// Normalized lorentzian with `A = 0.5`, `α = 1.5`.
    pub fn lorentzian() -> Self {
        Self::new(Family::Lorentzian { mass: 1.0 }, 0.5, 1.5).expect("valid built-in")
    }

    pub fn lorentzian_with_mass(mass: f64) -> Result<Self> {
        Self::new(Family::Lorentzian { mass }, 0.5, 1.5)
    }

    pub fn quartic_gaussian(a: f64) -> Result<Self> {
        Self::new(Family::QuarticGaussian { a }, 0.5, 3.0)
    }

    /// Distance from the real axis to the nearest singularity of `f_e`.
    pub fn analytic_width(&self) -> f64 {
        match &self.family {
            Family::Maxwellian | Family::QuarticGaussian { .. } => f64::INFINITY,
            Family::Lorentzian { .. } => 1.0,
            Family::Rational(d) => d.width(),
        }
    }

    /// Expected `∫ f_e dv`: 1, or the declared lorentzian mass.
    pub fn mass(&self) -> f64 {
        match &self.family {
            Family::Lorentzian { mass } => *mass,
            Family::Rational(d) => d.transform(0.0).re,
            _ => 1.0,
        }
    }

    /// Poles of `f_e'` in the lower half plane with their orders.
    pub fn lower_poles(&self) -> Vec<(C64, u32)> {
        match &self.family {
            Family::Lorentzian { .. } => vec![(C64::new(0.0, -1.0), 2)],
            Family::Rational(d) => d.poles.iter().map(|p| (p.conj(), 2)).collect(),
            _ => vec![],
        }
    }

    /// `f_e(v)` without the strip check.
    pub fn fe(&self, v: C64) -> C64 {
        match &self.family {
            Family::Maxwellian => (-v * v).exp() / sqrt_pi(),
            Family::Lorentzian { mass } => (mass / PI) / (1.0 + v * v),
            Family::QuarticGaussian { a } => {
                let c = 4.0 * a.powf(2.5) / (3.0 * sqrt_pi());
                let v2 = v * v;
                c * v2 * v2 * (-a * v2).exp()
            }
            Family::Rational(d) => d.eval(v),
        }
    }

    /// `f_e'(v)` without the strip check.
    pub fn fe_deriv(&self, v: C64) -> C64 {
        match &self.family {
            Family::Maxwellian => -2.0 * v * (-v * v).exp() / sqrt_pi(),
            Family::Lorentzian { mass } => {
                let d = 1.0 + v * v;
                -2.0 * (mass / PI) * v / (d * d)
            }
            Family::QuarticGaussian { a } => {
                let c = 4.0 * a.powf(2.5) / (3.0 * sqrt_pi());
                let v2 = v * v;
                c * v2 * v * (4.0 - 2.0 * a * v2) * (-a * v2).exp()
            }
            Family::Rational(d) => d.deriv(v),
        }
    }

    fn check_strip(&self, v: C64) -> Result<()> {
        if v.im.abs() > self.strip {
            return Err(Error::StripViolation {
                im: v.im.abs(),
                limit: self.strip,
            });
        }
        Ok(())
    }

    pub fn eval_fe(&self, v: C64) -> Result<C64> {
        self.check_strip(v)?;
        Ok(self.fe(v))
    }

    pub fn eval_fe_deriv(&self, v: C64) -> Result<C64> {
        self.check_strip(v)?;
        Ok(self.fe_deriv(v))
    }

    /// `∫ f_e(v) e^{−iξv} dv` in closed form (test oracle).
    pub fn transform_exact(&self, xi: f64) -> C64 {
        match &self.family {
            Family::Maxwellian => C64::from((-xi * xi / 4.0).exp()),
            Family::Lorentzian { mass } => C64::from(mass * (-xi.abs()).exp()),
            Family::QuarticGaussian { a } => {
                // ∫ v⁴ e^{−av²−iξv} = √(π/a) e^{−ξ²/4a} (3/(4a²) − 3ξ²/(4a³) + ξ⁴/(16a⁴))
                let c = 4.0 * a.powf(2.5) / (3.0 * sqrt_pi());
                let poly = 3.0 / (4.0 * a * a) - 3.0 * xi * xi / (4.0 * a.powi(3)) + xi.powi(4) / (16.0 * a.powi(4));
                C64::from(c * (PI / a).sqrt() * (-xi * xi / (4.0 * a)).exp() * poly)
            }
            Family::Rational(d) => d.transform(xi),
        }
    }

    /// Velocity cutoff with neglected tail mass below `tol`: the smaller of
    /// `(B/((α−1)tol))^{1/(α−1)}` and the family's own tail.
    pub fn velocity_cutoff(&self, tol: f64) -> f64 {
        let b = self.bound.unwrap_or(1.0).max(1e-300);
        let algebraic = (b / ((self.alpha - 1.0) * tol)).powf(1.0 / (self.alpha - 1.0));
        let own = match &self.family {
            Family::Maxwellian => (-(tol.ln())).sqrt() + 1.0,
            Family::QuarticGaussian { a } => ((-(tol.ln()) + 10.0) / a).sqrt() + 1.0,
            Family::Lorentzian { mass } => mass / (PI * tol),
            Family::Rational(_) => f64::INFINITY,
        };
        algebraic.min(own)
    }
}

/// Result of scanning a strip for the hypotheses on `f_e` or `g_∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub subject: String,
    pub strip: f64,
    pub alpha: f64,
    /// Largest `(1+|v|^α)|f|` found on the strip grid.
    pub bound_found: f64,
    pub bound_declared: Option<f64>,
    pub bound_ok: bool,
    pub normalization: Option<f64>,
    pub normalization_ok: bool,
    pub positivity_ok: bool,
    pub zero_mean_ok: bool,
    pub velocity_cutoff: f64,
    pub strip_points: usize,
    pub passed: bool,
    pub notes: Vec<String>,
}

/// Strip sampling resolution: `re_points × im_points` on
/// `[−half_length, half_length] × [−A, A]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripGrid {
    pub re_points: usize,
    pub im_points: usize,
    pub half_length: f64,
}

impl Default for StripGrid {
    fn default() -> Self {
        Self {
            re_points: 400,
            im_points: 25,
            half_length: 40.0,
        }
    }
}

fn scan_strip(strip: f64, alpha: f64, grid: &StripGrid, f: impl Fn(C64) -> C64) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..grid.re_points {
        let x = -grid.half_length + 2.0 * grid.half_length * a as f64 / (grid.re_points - 1) as f64;
        for b in 0..grid.im_points {
            let y = -strip + 2.0 * strip * b as f64 / (grid.im_points - 1).max(1) as f64;
            let v = C64::new(x, y);
            worst = worst.max((1.0 + v.norm().powf(alpha)) * f(v).norm());
        }
    }
    worst
}

impl EquilibriumSpec {
    pub fn validate_assumptions(&self, grid: &StripGrid) -> Result<ValidationReport> {
        check_alpha(self.alpha)?;
        let bound_found = scan_strip(self.strip, self.alpha, grid, |v| self.fe(v));
        let normalization = integrate_line(|v| self.fe(v), &Contour::real_line(), 1e-12)?.re;
        let normalization_ok = (normalization - self.mass()).abs() < 1e-8;
        let positivity_ok = (0..2001).all(|k| {
            let v = -grid.half_length + grid.half_length * k as f64 / 1000.0;
            let f = self.fe(C64::from(v));
            f.re >= -1e-15 && f.im.abs() < 1e-12
        });
        let bound_ok = self.bound.map_or(true, |b| bound_found <= b * (1.0 + 1e-12));
        let mut notes = vec![format!(
            "strip A = {} is a configuration choice; the analytic width of this family is {}",
            self.strip,
            self.analytic_width()
        )];
        if self.mass() != 1.0 {
            notes.push(format!("density is not normalized to 1; declared mass {}", self.mass()));
        }
        let velocity_cutoff = self.velocity_cutoff(1e-12);
        Ok(ValidationReport {
            subject: self.family.name().into(),
            strip: self.strip,
            alpha: self.alpha,
            bound_found,
            bound_declared: self.bound,
            bound_ok,
            normalization: Some(normalization),
            normalization_ok,
            positivity_ok,
            zero_mean_ok: true,
            velocity_cutoff,
            strip_points: grid.re_points * grid.im_points,
            passed: bound_ok && normalization_ok && positivity_ok,
            notes,
        })
    }
}

/// Velocity profile of one perturbation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `e^{−v²}/√π`
    Gaussian,
    /// `1/(1+v²)`
    Lorentzian,
    Rational(RationalData),
}

impl Profile {
    pub fn eval(&self, v: C64) -> C64 {
        match self {
            Profile::Gaussian => (-v * v).exp() / sqrt_pi(),
            Profile::Lorentzian => 1.0 / (1.0 + v * v),
            Profile::Rational(d) => d.eval(v),
        }
    }

    pub fn deriv(&self, v: C64) -> C64 {
        match self {
            Profile::Gaussian => -2.0 * v * (-v * v).exp() / sqrt_pi(),
            Profile::Lorentzian => {
                let d = 1.0 + v * v;
                -2.0 * v / (d * d)
            }
            Profile::Rational(d) => d.deriv(v),
        }
    }

    /// `∫ p(w) e^{−iξw} dw` in closed form.
    pub fn transform(&self, xi: f64) -> C64 {
        match self {
            Profile::Gaussian => C64::from((-xi * xi / 4.0).exp()),
            Profile::Lorentzian => C64::from(PI * (-xi.abs()).exp()),
            Profile::Rational(d) => d.transform(xi),
        }
    }

    pub fn analytic_width(&self) -> f64 {
        match self {
            Profile::Gaussian => f64::INFINITY,
            Profile::Lorentzian => 1.0,
            Profile::Rational(d) => d.width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Modes ±n with coefficients c/2 and conj(c)/2: `Re(c e^{inx})`.
    #[default]
    Cos,
    /// Modes ±n with c/(2i) and its conjugate: `Re(c e^{inx}/i)`.
    Sin,
    /// Mode n alone with coefficient c.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEntry {
    pub n: i64,
    pub profile: Profile,
    #[serde(default = "unit")]
    pub coeff: C64,
    #[serde(default)]
    pub pairing: Pairing,
}

fn unit() -> C64 {
    C64::new(1.0, 0.0)
}

/// One expanded Fourier mode `coeff · p(v) e^{inx}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub n: i64,
    pub coeff: C64,
    pub profile: Profile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PerturbationDoc {
    #[serde(rename = "A", default = "default_strip")]
    strip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    eps: f64,
    #[serde(default)]
    modes: Vec<ModeEntry>,
}

/// `g_∞(x, v) = ε Σ coeff · p(v) e^{inx}` over the expanded modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PerturbationDoc", into = "PerturbationDoc")]
pub struct PerturbationSpec {
    pub eps: f64,
    pub strip: f64,
    pub alpha: f64,
    pub entries: Vec<ModeEntry>,
    modes: Vec<Mode>,
}

impl TryFrom<PerturbationDoc> for PerturbationSpec {
    type Error = Error;

    fn try_from(doc: PerturbationDoc) -> Result<Self> {
        let algebraic = doc.modes.iter().any(|m| !matches!(m.profile, Profile::Gaussian));
        let alpha = doc.alpha.unwrap_or(if algebraic { 1.5 } else { default_alpha() });
        Self::new(doc.eps, doc.strip, alpha, doc.modes)
    }
}

impl From<PerturbationSpec> for PerturbationDoc {
    fn from(spec: PerturbationSpec) -> Self {
        PerturbationDoc {
            strip: spec.strip,
            alpha: Some(spec.alpha),
            eps: spec.eps,
            modes: spec.entries,
        }
    }
}

impl PerturbationSpec {
    pub fn new(eps: f64, strip: f64, alpha: f64, entries: Vec<ModeEntry>) -> Result<Self> {
        check_alpha(alpha)?;
        if !(strip > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "strip half-width A = {strip} must be positive"
            )));
        }
        let mut modes: Vec<Mode> = Vec::new();
        for e in &entries {
            if e.n == 0 {
                return Err(Error::InvalidSpec(
                    "perturbation mode n = 0 would give a nonzero x-mean".into(),
                ));
            }
            if let Profile::Rational(d) = &e.profile {
                d.check()?;
            }
            if strip > e.profile.analytic_width() {
                return Err(Error::InvalidSpec(format!(
                    "strip A = {strip} exceeds the analytic width {} of a mode profile",
                    e.profile.analytic_width()
                )));
            }
            let mut push = |n: i64, coeff: C64| {
                if let Some(m) = modes.iter_mut().find(|m| m.n == n && m.profile == e.profile) {
                    m.coeff += coeff;
                } else {
                    modes.push(Mode {
                        n,
                        coeff,
                        profile: e.profile.clone(),
                    });
                }
            };
            match e.pairing {
                Pairing::Cos => {
                    push(e.n, 0.5 * e.coeff);
                    push(-e.n, 0.5 * e.coeff.conj());
                }
                Pairing::Sin => {
                    let c = e.coeff / C64::new(0.0, 2.0);
                    push(e.n, c);
                    push(-e.n, c.conj());
                }
                Pairing::None => push(e.n, e.coeff),
            }
        }
        Ok(Self {
            eps,
            strip,
            alpha,
            entries,
            modes,
        })
    }

    /// `ε cos(nx) p(v)`.
    pub fn cosine(eps: f64, n: i64, profile: Profile, strip: f64, alpha: f64) -> Result<Self> {
        Self::new(
            eps,
            strip,
            alpha,
            vec![ModeEntry {
                n,
                profile,
                coeff: unit(),
                pairing: Pairing::Cos,
            }],
        )
    }

    /// `ε cos x e^{−v²}/√π` with `A = 0.5`, `α = 3`.
    pub fn gaussian_cosine(eps: f64) -> Self {
        Self::cosine(eps, 1, Profile::Gaussian, 0.5, 3.0).expect("valid built-in")
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.5, 3.0, vec![]).expect("valid built-in")
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn max_wavenumber(&self) -> i64 {
        self.modes.iter().map(|m| m.n.abs()).max().unwrap_or(0)
    }

    /// Same shape with a different amplitude.
    pub fn with_eps(&self, eps: f64) -> Self {
        let mut out = self.clone();
        out.eps = eps;
        out
    }

    /// `ε Σ coeff · p(v)` for wavenumber `n`.
    pub fn mode_profile(&self, n: i64, v: C64) -> C64 {
        self.modes
            .iter()
            .filter(|m| m.n == n)
            .map(|m| m.coeff * m.profile.eval(v))
            .sum::<C64>()
            * self.eps
    }

    /// `ε Σ coeff · p̂(ξ)` for wavenumber `n`.
    pub fn mode_transform(&self, n: i64, xi: f64) -> C64 {
        self.modes
            .iter()
            .filter(|m| m.n == n)
            .map(|m| m.coeff * m.profile.transform(xi))
            .sum::<C64>()
            * self.eps
    }

    pub fn wavenumbers(&self) -> Vec<i64> {
        let mut ns: Vec<i64> = self.modes.iter().map(|m| m.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    /// Smallest analytic width over the mode profiles.
    pub fn analytic_width(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| m.profile.analytic_width())
            .fold(f64::INFINITY, f64::min)
    }

    fn check_strip(&self, v: C64) -> Result<()> {
        if v.im.abs() > self.strip {
            return Err(Error::StripViolation {
                im: v.im.abs(),
                limit: self.strip,
            });
        }
        Ok(())
    }

    /// `g_∞(x, v)` without the strip check.
    pub fn g(&self, x: f64, v: C64) -> C64 {
        self.modes
            .iter()
            .map(|m| m.coeff * m.profile.eval(v) * C64::from_polar(1.0, m.n as f64 * x))
            .sum::<C64>()
            * self.eps
    }

    pub fn g_dz(&self, x: f64, v: C64) -> C64 {
        self.modes
            .iter()
            .map(|m| m.coeff * m.profile.eval(v) * C64::new(0.0, m.n as f64) * C64::from_polar(1.0, m.n as f64 * x))
            .sum::<C64>()
            * self.eps
    }

    pub fn g_dv(&self, x: f64, v: C64) -> C64 {
        self.modes
            .iter()
            .map(|m| m.coeff * m.profile.deriv(v) * C64::from_polar(1.0, m.n as f64 * x))
            .sum::<C64>()
            * self.eps
    }

    pub fn eval_g(&self, x: f64, v: C64) -> Result<C64> {
        self.check_strip(v)?;
        Ok(self.g(x, v))
    }

    pub fn eval_g_dz(&self, x: f64, v: C64) -> Result<C64> {
        self.check_strip(v)?;
        Ok(self.g_dz(x, v))
    }

    pub fn eval_g_dv(&self, x: f64, v: C64) -> Result<C64> {
        self.check_strip(v)?;
        Ok(self.g_dv(x, v))
    }

    pub fn validate_assumptions(&self, grid: &StripGrid) -> Result<ValidationReport> {
        check_alpha(self.alpha)?;
        let mut bound_found = 0.0f64;
        for m in &self.modes {
            let b = scan_strip(self.strip, self.alpha, grid, |v| m.profile.eval(v));
            bound_found = bound_found.max(b);
        }
        let zero_mean_ok = self.modes.iter().all(|m| m.n != 0);
        let conjugate_ok = self.modes.iter().all(|m| {
            let partner: C64 = self
                .modes
                .iter()
                .filter(|p| p.n == -m.n && p.profile == m.profile)
                .map(|p| p.coeff)
                .sum();
            (partner - m.coeff.conj()).norm() < 1e-14
        });
        let mut notes = vec![format!("strip A = {} is a configuration choice", self.strip)];
        if !conjugate_ok {
            notes.push("modes ±n are not conjugate: g is complex-valued".into());
        }
        Ok(ValidationReport {
            subject: "perturbation".into(),
            strip: self.strip,
            alpha: self.alpha,
            bound_found,
            bound_declared: Some(1.0),
            bound_ok: bound_found <= 1.0,
            normalization: None,
            normalization_ok: true,
            positivity_ok: true,
            zero_mean_ok,
            velocity_cutoff: (1.0 / ((self.alpha - 1.0) * 1e-12)).powf(1.0 / (self.alpha - 1.0)),
            strip_points: grid.re_points * grid.im_points,
            passed: bound_found <= 1.0 && zero_mean_ok,
            notes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn maxwellian_values() {
        let m = EquilibriumSpec::maxwellian();
        assert!((m.eval_fe(C64::from(0.0)).unwrap().re - 0.5641895835).abs() < 1e-10);
        let v = m.eval_fe(C64::new(0.0, 0.5)).unwrap();
        assert!((v.re - 0.25f64.exp() / PI.sqrt()).abs() < 1e-14 && v.im.abs() < 1e-15);
        assert!((v.re - 0.7244).abs() < 1e-4);
        assert_eq!(m.eval_fe_deriv(C64::from(0.0)).unwrap(), C64::new(0.0, 0.0) * 1.0);
    }

    #[test]
    fn lorentzian_values() {
        let unnormalized = EquilibriumSpec::lorentzian_with_mass(PI).unwrap();
        assert!((unnormalized.eval_fe(C64::from(0.0)).unwrap().re - 1.0).abs() < 1e-15);
        let normalized = EquilibriumSpec::lorentzian();
        assert!((normalized.eval_fe(C64::from(0.0)).unwrap().re - 1.0 / PI).abs() < 1e-15);
        let d = unnormalized.eval_fe_deriv(C64::from(1.0)).unwrap();
        assert!((d.re + 0.5).abs() < 1e-15);
    }

    #[test]
    fn quartic_derivative_at_origin() {
        let q = EquilibriumSpec::quartic_gaussian(1.0).unwrap();
        assert_eq!(q.eval_fe_deriv(C64::from(0.0)).unwrap().norm(), 0.0);
    }

    #[test]
    fn strip_violation() {
        let m = EquilibriumSpec::maxwellian();
        assert!(matches!(
            m.eval_fe(C64::new(0.0, 0.6)),
            Err(Error::StripViolation { .. })
        ));
    }

    #[test]
    fn alpha_rules() {
        assert!(EquilibriumSpec::new(Family::Maxwellian, 0.5, 2.0).is_err());
        assert!(EquilibriumSpec::new(Family::Maxwellian, 0.5, 1.0).is_err());
        assert!(EquilibriumSpec::new(Family::Maxwellian, 0.5, 0.5).is_err());
        assert!(PerturbationSpec::cosine(1e-3, 1, Profile::Gaussian, 0.5, 2.0).is_err());
    }

    #[test]
    fn normalization_of_builtins() {
        for spec in [
            EquilibriumSpec::maxwellian(),
            EquilibriumSpec::lorentzian(),
            EquilibriumSpec::quartic_gaussian(0.5).unwrap(),
            EquilibriumSpec::quartic_gaussian(4.0).unwrap(),
        ] {
            let v = integrate_line(|v| spec.fe(v), &Contour::real_line(), 1e-12).unwrap();
            assert!((v.re - 1.0).abs() < 1e-8, "{}: {}", spec.family.name(), v.re);
        }
    }

    #[test]
    fn validation_reports() {
        let grid = StripGrid::default();
        let r = EquilibriumSpec::maxwellian().validate_assumptions(&grid).unwrap();
        assert!(r.passed);
        // grid-scan oracle at 10⁴ points computed independently
        let mut oracle = 0.0f64;
        for a in 0..400 {
            let x = -40.0 + 80.0 * a as f64 / 399.0;
            for b in 0..25 {
                let y = -0.5 + b as f64 / 24.0;
                let v = C64::new(x, y);
                let f = (-(x * x - y * y)).exp() / PI.sqrt();
                oracle = oracle.max((1.0 + v.norm().powi(3)) * f);
            }
        }
        assert!((r.bound_found - oracle).abs() < 1e-12 * oracle);
        let mut l = EquilibriumSpec::lorentzian();
        l.alpha = 1.5;
        assert!(l.validate_assumptions(&grid).unwrap().passed);
    }

    #[test]
    fn rational_reproduces_lorentzian() {
        let data = RationalData {
            poles: vec![C64::new(0.0, 1.0)],
            residues: vec![C64::new(0.0, -1.0 / (2.0 * PI))],
        };
        let r = EquilibriumSpec::new(Family::Rational(data), 0.5, 1.5).unwrap();
        let l = EquilibriumSpec::lorentzian();
        for &v in &[C64::new(0.3, 0.2), C64::new(-2.0, -0.4)] {
            assert!((r.fe(v) - l.fe(v)).norm() < 1e-15);
            assert!((r.fe_deriv(v) - l.fe_deriv(v)).norm() < 1e-15);
        }
        for &xi in &[-2.0, 0.0, 0.7] {
            assert!((r.transform_exact(xi) - l.transform_exact(xi)).norm() < 1e-14);
        }
        assert_eq!(r.lower_poles(), vec![(C64::new(0.0, -1.0), 2)]);
    }

    #[test]
    fn perturbation_examples() {
        let eps = 1e-3;
        let g = PerturbationSpec::gaussian_cosine(eps);
        let v = g.eval_g(0.0, C64::from(0.0)).unwrap();
        assert!((v.re - eps / PI.sqrt()).abs() < 1e-18 && v.im.abs() < 1e-18);
        assert!(g.eval_g_dz(0.0, C64::from(0.0)).unwrap().norm() < 1e-18);
        let d = g.eval_g_dv(0.0, C64::from(1.0)).unwrap();
        assert!((d.re - eps * (-2.0 * (-1.0f64).exp() / PI.sqrt())).abs() < 1e-18);
        assert!(PerturbationSpec::new(
            eps,
            0.5,
            3.0,
            vec![ModeEntry {
                n: 0,
                profile: Profile::Gaussian,
                coeff: unit(),
                pairing: Pairing::None,
            }]
        )
        .is_err());
    }

    #[test]
    fn json_roundtrip() {
        let text = r#"{"family": "quartic-gaussian", "params": {"a": 2.0}, "A": 0.5, "alpha": 3}"#;
        let spec: EquilibriumSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.family, Family::QuarticGaussian { a: 2.0 });
        let back: EquilibriumSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let pert: PerturbationSpec =
            serde_json::from_str(r#"{"A": 0.5, "alpha": 3, "eps": 0.001, "modes": [{"n": 1, "profile": "gaussian"}]}"#)
                .unwrap();
        assert_eq!(pert, PerturbationSpec::gaussian_cosine(1e-3));
        assert!(serde_json::from_str::<EquilibriumSpec>(r#"{"family": "maxwellian", "alpha": 2}"#).is_err());
    }

    #[test]
    fn profile_transforms_match_quadrature() {
        let rational = Profile::Rational(RationalData {
            poles: vec![C64::new(1.0, 0.8), C64::new(-0.5, 1.5)],
            residues: vec![C64::new(0.3, -0.2), C64::new(-0.3, 0.1)],
        });
        for p in [Profile::Gaussian, Profile::Lorentzian, rational] {
            for &xi in &[-3.0, -0.4, 0.0, 1.3, 6.0] {
                let q = crate::numerics::fourier_line(|w| p.eval(w), xi, &Contour::real_line(), 1e-12).unwrap();
                assert!(
                    (q - p.transform(xi)).norm() < 1e-9,
                    "{p:?} ξ={xi}: {q} vs {}",
                    p.transform(xi)
                );
            }
        }
    }

    proptest! {
        #[test]
        fn derivative_matches_finite_differences(x in -6.0f64..6.0, y in -0.5f64..0.5, fam in 0usize..4) {
            let spec = match fam {
                0 => EquilibriumSpec::maxwellian(),
                1 => EquilibriumSpec::lorentzian(),
                2 => EquilibriumSpec::quartic_gaussian(1.7).unwrap(),
                _ => EquilibriumSpec::new(Family::Rational(RationalData {
                    poles: vec![C64::new(0.4, 0.9)],
                    residues: vec![C64::new(0.0, -0.15)],
                }), 0.5, 1.5).unwrap(),
            };
            let v = C64::new(x, y);
            let h = 1e-3;
            let f = |d: f64| spec.fe(v + d);
            let fd = (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
            let exact = spec.fe_deriv(v);
            prop_assert!((fd - exact).norm() <= 1e-6 * exact.norm().max(1e-3));
        }

        #[test]
        fn paired_modes_are_real(x in -10.0f64..10.0, v in -8.0f64..8.0, c_re in -1.0f64..1.0, c_im in -1.0f64..1.0) {
            let g = PerturbationSpec::new(0.01, 0.5, 3.0, vec![
                ModeEntry { n: 1, profile: Profile::Gaussian, coeff: C64::new(c_re, c_im), pairing: Pairing::Cos },
                ModeEntry { n: 3, profile: Profile::Lorentzian, coeff: C64::new(c_im, c_re), pairing: Pairing::Sin },
            ]).unwrap();
            prop_assert!(g.g(x, C64::from(v)).im.abs() < 1e-12);
            prop_assert!(g.g_dz(x, C64::from(v)).im.abs() < 1e-12);
            prop_assert!(g.g_dv(x, C64::from(v)).im.abs() < 1e-12);
        }
    }
}
