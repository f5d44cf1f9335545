//! Kernel `K`, the Landau function `Φ(η;n)`, the shifted-contour functions
//! `ψ±`, and the zero search behind the stability verdict.
//!
//! Everything is built on the dispersion integral
//! `D(η) = ∫ f_e'(w)/(w−η) dw`, continued analytically from `Im η > 0`, so that
//! `Φ(η;n) = D(η) − n²` and a single evaluation of `D` serves every mode.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibria::{EquilibriumSpec, Family};
use crate::numerics::{fourier_line, integrate_line_anchored, Contour};
use crate::{Error, Result, C64};

/// Absolute tolerance of the velocity quadratures.
pub const QUAD_TOL: f64 = 1e-12;

const I: C64 = C64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn of(n: i64) -> Self {
        if n >= 0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Contour depths available for continuation below the real axis.
#[derive(Debug, Clone, Copy)]
struct Depths {
    /// Default offset, half the configured strip.
    delta: f64,
    /// Deepest line contour used before switching to the residue form.
    deepest: f64,
    /// Minimum distance kept between `η` and the contour.
    gap: f64,
    width: f64,
}

fn depths(spec: &EquilibriumSpec) -> Depths {
    let width = spec.analytic_width();
    if width.is_finite() {
        Depths {
            delta: 0.5 * spec.strip,
            deepest: 0.9 * width,
            gap: (0.4 * width).min(0.5),
            width,
        }
    } else {
        // entire families: deeper lines cost e^{c²} in cancellation
        Depths {
            delta: 0.5 * spec.strip,
            deepest: 3.0,
            gap: 0.5,
            width,
        }
    }
}

/// Real part around which the velocity density is concentrated.
fn bulk_center(spec: &EquilibriumSpec) -> f64 {
    match &spec.family {
        Family::Rational(d) => d.poles.iter().map(|p| p.re).sum::<f64>() / d.poles.len() as f64,
        _ => 0.0,
    }
}

/// `K(ξ) = ∫ e^{−iξv} f_e'(v) dv`, on a contour moved by `−sign(ξ)·c` so the
/// exponential decays.
pub fn kernel_k(spec: &EquilibriumSpec, xi: f64) -> Result<C64> {
    let d = depths(spec);
    let depth = if d.width.is_finite() {
        0.5 * d.width
    } else {
        (0.5 * xi.abs()).clamp(d.delta, 3.0)
    };
    let contour = Contour::shifted(-xi.signum() * depth).with_focus(bulk_center(spec));
    fourier_line(|w| spec.fe_deriv(w), xi, &contour, QUAD_TOL)
}

fn check_lower_poles(spec: &EquilibriumSpec, eta: C64) -> Result<()> {
    for (p, _) in spec.lower_poles() {
        let distance = (eta - p).norm();
        if distance < 1e-6 {
            return Err(Error::PoleOnContour { distance });
        }
    }
    Ok(())
}

fn line_integral(spec: &EquilibriumSpec, eta: C64, depth: f64) -> Result<C64> {
    let distance = (eta.im + depth).abs();
    if distance < 1e-6 {
        return Err(Error::PoleOnContour { distance });
    }
    let contour = Contour::shifted(-depth).with_focus(eta.re);
    integrate_line_anchored(|w| spec.fe_deriv(w) / (w - eta), &contour, bulk_center(spec), QUAD_TOL)
}

/// `D(η) = ∫ f_e'(w)/(w−η) dw`, continued from the upper half plane.
///
/// Below the axis the contour `ℝ − ic` is lowered under `η`; when that would
/// leave the analyticity strip, the residue `2πi f_e'(η)` is added to an
/// integral over a contour above `η` instead.
pub fn dispersion_integral(spec: &EquilibriumSpec, eta: C64) -> Result<C64> {
    let d = depths(spec);
    let needed = -eta.im + d.gap;
    if needed <= d.delta {
        line_integral(spec, eta, d.delta)
    } else if needed <= d.deepest {
        line_integral(spec, eta, needed)
    } else {
        check_lower_poles(spec, eta)?;
        let limit = if d.width.is_finite() { 0.5 * d.width } else { d.deepest };
        let depth = (-eta.im - d.gap).clamp(0.0, limit);
        let value = line_integral(spec, eta, depth)? + 2.0 * PI * I * spec.fe_deriv(eta);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::PoleOnContour { distance: 0.0 })
        }
    }
}

/// `Φ(η;n) = D(η) − n²`, analytic for `Im η > 0` and continued below.
pub fn landau_phi(spec: &EquilibriumSpec, eta: C64, n: i64) -> Result<C64> {
    check_mode(n)?;
    Ok(dispersion_integral(spec, eta)? - (n * n) as f64)
}

/// The real-line integral `∫_ℝ f_e'(w)/(w−η) dw − n²` on either side of the
/// axis. It agrees with [`landau_phi`] for `Im η > 0` and satisfies
/// `Φ(η̄) = conj Φ(η)`; below the axis it is not the continuation.
pub fn landau_phi_sectional(spec: &EquilibriumSpec, eta: C64, n: i64) -> Result<C64> {
    check_mode(n)?;
    if eta.im.abs() < 1e-6 {
        return Err(Error::PoleOnContour { distance: eta.im.abs() });
    }
    let d = if eta.im > 0.0 {
        dispersion_integral(spec, eta)?
    } else {
        dispersion_integral(spec, eta.conj())?.conj()
    };
    Ok(d - (n * n) as f64)
}

fn check_mode(n: i64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSpec("mode n = 0 has no dispersion relation".into()));
    }
    Ok(())
}

/// `Q_n(z) = −(i/n) Φ(iz/n; n)`.
pub fn landau_q(spec: &EquilibriumSpec, z: C64, n: i64) -> Result<C64> {
    check_mode(n)?;
    let nf = n as f64;
    Ok(-I / nf * landau_phi(spec, I * z / nf, n)?)
}

/// `Q_n(z) = i(n + (1/n)∫ f_e(v)/(z/n + iv)² dv)` by real-line quadrature.
/// Matches [`landau_q`] when `Re(z/n) > 0`.
pub fn landau_q_direct(spec: &EquilibriumSpec, z: C64, n: i64) -> Result<C64> {
    check_mode(n)?;
    let nf = n as f64;
    let zn = z / nf;
    // the integrand has a double pole at v = i z/n
    let pole = I * zn;
    if pole.im.abs() < 1e-6 {
        return Err(Error::PoleOnContour {
            distance: pole.im.abs(),
        });
    }
    let contour = Contour::real_line().with_focus(pole.re);
    let integral = integrate_line_anchored(
        |v| {
            let d = zn + I * v;
            spec.fe(v) / (d * d)
        },
        &contour,
        bulk_center(spec),
        QUAD_TOL,
    )?;
    Ok(I * (nf + integral / nf))
}

/// `ψ±(η) = ∫_{ℝ±iδ} f_e'(w)/(η ± w) dw` by direct quadrature.
pub fn psi_pm(spec: &EquilibriumSpec, eta: C64, sign: Sign, delta: f64) -> Result<C64> {
    if !(delta > 0.0 && delta < spec.analytic_width()) {
        return Err(Error::InvalidSpec(format!(
            "contour offset δ = {delta} must lie in (0, {})",
            spec.analytic_width()
        )));
    }
    let distance = eta.im + delta;
    if distance < 1e-6 {
        return Err(Error::PoleOnContour {
            distance: distance.abs(),
        });
    }
    let (offset, focus, s) = match sign {
        Sign::Plus => (delta, -eta.re, 1.0),
        Sign::Minus => (-delta, eta.re, -1.0),
    };
    let contour = Contour::shifted(offset).with_focus(focus);
    integrate_line_anchored(
        |w| spec.fe_deriv(w) / (eta + s * w),
        &contour,
        bulk_center(spec),
        QUAD_TOL,
    )
}

/// `ψ±(η)` through the continued dispersion integral:
/// `ψ₋(η) = −D(η)` and `ψ₊(η) = conj D(−η̄)`.
pub fn psi_continued(spec: &EquilibriumSpec, eta: C64, sign: Sign) -> Result<C64> {
    match sign {
        Sign::Minus => Ok(-dispersion_integral(spec, eta)?),
        Sign::Plus => Ok(dispersion_integral(spec, -eta.conj())?.conj()),
    }
}

/// `1 − ψ_{sign n}(η)/(|n|n)`, the denominator of the Green coefficients.
pub fn margin_function(spec: &EquilibriumSpec, eta: C64, n: i64) -> Result<C64> {
    check_mode(n)?;
    let nn = (n.abs() * n) as f64;
    Ok(1.0 - psi_continued(spec, eta, Sign::of(n))? / nn)
}

/// Rectangle of the η-plane and the modes to test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub modes: Vec<i64>,
}

impl SearchRegion {
    pub fn new(re: [f64; 2], im: [f64; 2], modes: Vec<i64>) -> Result<Self> {
        let region = Self {
            re_min: re[0],
            re_max: re[1],
            im_min: im[0],
            im_max: im[1],
            modes,
        };
        region.validate()?;
        Ok(region)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.re_min < self.re_max && self.im_min < self.im_max) {
            return Err(Error::InvalidSpec("search rectangle is empty".into()));
        }
        if !(self.im_max > 0.0) {
            return Err(Error::InvalidSpec("search rectangle must reach Im η > 0".into()));
        }
        if self.modes.is_empty() || self.modes.contains(&0) {
            return Err(Error::InvalidSpec("mode list must be nonempty and exclude 0".into()));
        }
        Ok(())
    }

    /// `±1, …, ±n_modes`.
    pub fn symmetric_modes(n_modes: i64) -> Vec<i64> {
        (1..=n_modes).flat_map(|n| [n, -n]).collect()
    }

    /// Rectangle over `0 ≤ Im η ≤ H` that leaves no room for zeros outside:
    /// above `H` we have `|D| ≤ ∫|f_e'|/Im η < 1`, and beyond `|Re η| = R`
    /// the tail `|D| ~ mass/|η|²` is small.
    pub fn upper_half_plane(spec: &EquilibriumSpec, n_modes: i64) -> Result<Self> {
        let cutoff = spec.velocity_cutoff(1e-6);
        let span = cutoff.min(1e3);
        let samples = 40_001;
        let total_variation: f64 = (0..samples - 1)
            .map(|k| {
                let x0 = -span + 2.0 * span * k as f64 / (samples - 1) as f64;
                let x1 = -span + 2.0 * span * (k + 1) as f64 / (samples - 1) as f64;
                (spec.fe(C64::from(x1)) - spec.fe(C64::from(x0))).norm()
            })
            .sum();
        let height = 1.0 + 2.0 * total_variation;
        let half = (1.5 * cutoff).clamp(6.0, 12.0) + bulk_center(spec).abs();
        Self::new(
            [bulk_center(spec) - half, bulk_center(spec) + half],
            [0.0, height],
            Self::symmetric_modes(n_modes),
        )
    }
}

/// Slowest linear damping rate `min_n |n|·(−Im η)` over the zeros of
/// `Φ(·;n)`, `n = 1..=n_modes`, located in `−depth ≤ Im η < 0`. A mode with no
/// zero in that band contributes `|n|·depth`.
pub fn landau_rate(spec: &EquilibriumSpec, n_modes: i64, depth: f64) -> Result<f64> {
    let upper = SearchRegion::upper_half_plane(spec, n_modes)?;
    let region = SearchRegion::new([upper.re_min, upper.re_max], [-depth, 0.5], (1..=n_modes).collect())?;
    let report = find_roots(spec, &region)?;
    let mut rate = f64::INFINITY;
    for mode in &report.modes {
        let n = mode.n.abs() as f64;
        let slowest = mode.roots.iter().map(|r| r.eta.im).fold(-depth, f64::max);
        if slowest >= 0.0 {
            return Err(Error::NotStable(format!(
                "mode {} has a zero at Im η = {slowest}",
                mode.n
            )));
        }
        rate = rate.min(-n * slowest);
    }
    Ok(rate)
}

/// Tuning of the zero search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RootOptions {
    /// Step of the tested lower-half-plane depths.
    pub nu_step: f64,
    /// Deepest tested depth.
    pub nu_max: f64,
    pub theta_re_points: usize,
    pub theta_im_points: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Cells below this size are handed to Newton.
    pub min_cell: f64,
    /// Initial spacing of the boundary samples.
    pub boundary_spacing: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            nu_step: 0.05,
            nu_max: 1.0,
            theta_re_points: 121,
            theta_im_points: 31,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            min_cell: 0.05,
            boundary_spacing: 0.1,
        }
    }
}

/// A located zero of `Φ(·;n)`, serialized as `[re, im, residual]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Root {
    pub eta: C64,
    pub residual: f64,
}

impl From<[f64; 3]> for Root {
    fn from(v: [f64; 3]) -> Self {
        Root {
            eta: C64::new(v[0], v[1]),
            residual: v[2],
        }
    }
}

impl From<Root> for [f64; 3] {
    fn from(r: Root) -> Self {
        [r.eta.re, r.eta.im, r.residual]
    }
}

impl Root {
    /// The matching zero `z = −inη` of `Q_n`.
    pub fn q_zero(&self, n: i64) -> C64 {
        -I * n as f64 * self.eta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub n: i64,
    /// Zeros enclosed by the search rectangle (pole-cleared winding number).
    pub winding: i64,
    /// Zeros with `Im η ≥ 0`.
    pub winding_upper: i64,
    /// Poles of the continued `Φ` inside the rectangle, counted with order.
    pub poles_enclosed: u32,
    pub roots: Vec<Root>,
    /// `min |1 − ψ/(|n|n)|` over the grid on `Im η ≥ −ν₀`.
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub family: String,
    pub region: SearchRegion,
    /// The rectangle actually used after boundary nudges.
    pub used_region: [f64; 4],
    pub delta: f64,
    pub modes: Vec<ModeReport>,
    /// Minimum of the per-mode margins over the tested modes and region.
    pub theta: f64,
    pub nu0: f64,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

impl DispersionReport {
    pub fn mode(&self, n: i64) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.n == n)
    }

    /// Largest `Im η` over the located roots.
    pub fn dominant_root(&self, n: i64) -> Option<Root> {
        self.mode(n)?
            .roots
            .iter()
            .copied()
            .max_by(|a, b| a.eta.im.total_cmp(&b.eta.im))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    re: [f64; 2],
    im: [f64; 2],
}

impl Rect {
    fn size(&self) -> f64 {
        (self.re[1] - self.re[0]).max(self.im[1] - self.im[0])
    }

    fn contains(&self, z: C64, slack: f64) -> bool {
        z.re >= self.re[0] - slack
            && z.re <= self.re[1] + slack
            && z.im >= self.im[0] - slack
            && z.im <= self.im[1] + slack
    }

    fn corners(&self) -> [C64; 4] {
        [
            C64::new(self.re[0], self.im[0]),
            C64::new(self.re[1], self.im[0]),
            C64::new(self.re[1], self.im[1]),
            C64::new(self.re[0], self.im[1]),
        ]
    }

    fn grown(&self, by: f64) -> Rect {
        Rect {
            re: [self.re[0] - by, self.re[1] + by],
            im: [self.im[0] - by, self.im[1] + by],
        }
    }
}

#[derive(Debug)]
enum Winding {
    Counts(Vec<i64>),
    Ambiguous,
}

/// Memoized `D(η)` with the zero-counting machinery.
struct Searcher<'a> {
    spec: &'a EquilibriumSpec,
    poles: Vec<(C64, u32)>,
    options: RootOptions,
    cache: RefCell<HashMap<(u64, u64), Option<C64>>>,
}

const MAX_EDGE_DEPTH: usize = 22;

impl<'a> Searcher<'a> {
    fn new(spec: &'a EquilibriumSpec, options: RootOptions) -> Self {
        Self {
            spec,
            poles: spec.lower_poles(),
            options,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn d(&self, eta: C64) -> Option<C64> {
        let key = (eta.re.to_bits(), eta.im.to_bits());
        if let Some(v) = self.cache.borrow().get(&key) {
            return *v;
        }
        let v = dispersion_integral(self.spec, eta).ok().filter(|v| v.is_finite());
        self.cache.borrow_mut().insert(key, v);
        v
    }

    /// `Π (η − p)^k` over the lower poles, which clears the poles of `Φ`.
    fn clearing(&self, eta: C64) -> C64 {
        self.poles.iter().map(|(p, k)| (eta - p).powu(*k)).product()
    }

    /// Argument increments of `(D − n²)·Π(η − p)^k` from `a` to `b`, one per
    /// entry of `nsq`.
    fn edge(&self, a: C64, b: C64, da: C64, db: C64, nsq: &[f64], depth: usize) -> Option<Vec<f64>> {
        let ratio = self.clearing(b) / self.clearing(a);
        let increments: Vec<f64> = nsq.iter().map(|&s| ((db - s) / (da - s) * ratio).arg()).collect();
        let smooth = increments.iter().all(|x| x.abs() <= PI / 4.0);
        if smooth {
            return Some(increments);
        }
        if depth >= MAX_EDGE_DEPTH {
            return None;
        }
        let m = 0.5 * (a + b);
        let dm = self.d(m)?;
        let mut left = self.edge(a, m, da, dm, nsq, depth + 1)?;
        let right = self.edge(m, b, dm, db, nsq, depth + 1)?;
        for (l, r) in left.iter_mut().zip(right) {
            *l += r;
        }
        Some(left)
    }

    /// Zero counts of `D − n²` inside `rect`, one per entry of `nsq`.
    fn count(&self, rect: &Rect, nsq: &[f64]) -> Winding {
        let corners = rect.corners();
        let mut total = vec![0.0; nsq.len()];
        for k in 0..4 {
            let (a, b) = (corners[k], corners[(k + 1) % 4]);
            let pieces = (((b - a).norm() / self.options.boundary_spacing).ceil() as usize).max(4);
            let mut prev = a;
            let Some(mut dprev) = self.d(a) else {
                return Winding::Ambiguous;
            };
            for j in 1..=pieces {
                let next = if j == pieces {
                    b
                } else {
                    a + (b - a) * (j as f64 / pieces as f64)
                };
                let Some(dnext) = self.d(next) else {
                    return Winding::Ambiguous;
                };
                let Some(inc) = self.edge(prev, next, dprev, dnext, nsq, 0) else {
                    return Winding::Ambiguous;
                };
                for (t, x) in total.iter_mut().zip(inc) {
                    *t += x;
                }
                prev = next;
                dprev = dnext;
            }
        }
        let mut counts = Vec::with_capacity(nsq.len());
        for t in total {
            let w = t / (2.0 * PI);
            let r = w.round();
            if (w - r).abs() > 0.1 {
                return Winding::Ambiguous;
            }
            counts.push(r as i64);
        }
        Winding::Counts(counts)
    }

    /// [`Self::count`] with the edges pushed outward until unambiguous.
    fn count_nudged(&self, rect: &Rect, nsq: &[f64]) -> Result<(Rect, Vec<i64>)> {
        for k in 0..8 {
            let trial = rect.grown(2.37e-3 * k as f64);
            if let Winding::Counts(c) = self.count(&trial, nsq) {
                return Ok((trial, c));
            }
        }
        Err(Error::WindingAmbiguity(format!(
            "boundary of [{}, {}]×[{}, {}] stays too close to a zero or pole",
            rect.re[0], rect.re[1], rect.im[0], rect.im[1]
        )))
    }

    fn newton(&self, start: C64, nsq: f64) -> Option<Root> {
        let mut eta = start;
        let mut best: Option<Root> = None;
        for _ in 0..self.options.newton_max_iter {
            let phi = dispersion_integral(self.spec, eta).ok()? - nsq;
            let residual = phi.norm();
            if best.map_or(true, |b| residual < b.residual) {
                best = Some(Root { eta, residual });
            }
            if residual < self.options.newton_tol {
                break;
            }
            let h = 1e-5 * eta.norm().max(1.0);
            let fp = dispersion_integral(self.spec, eta + h).ok()?;
            let fm = dispersion_integral(self.spec, eta - h).ok()?;
            let deriv = (fp - fm) / (2.0 * h);
            if deriv.norm() == 0.0 {
                break;
            }
            let step = phi / deriv;
            let step = if step.norm() > 1.0 { step / step.norm() } else { step };
            eta -= step;
            if step.norm() < 1e-14 * eta.norm().max(1.0) {
                break;
            }
        }
        best.filter(|r| r.residual < 1e-8)
    }

    /// Roots of `D − nsq` inside `rect`, which is known to hold `zeros` of them.
    fn locate(&self, rect: &Rect, nsq: f64, zeros: i64, depth: usize, found: &mut Vec<Root>) -> Result<()> {
        if zeros <= 0 {
            return Ok(());
        }
        let center = C64::new(0.5 * (rect.re[0] + rect.re[1]), 0.5 * (rect.im[0] + rect.im[1]));
        if (zeros == 1 && rect.size() < 0.5) || rect.size() < self.options.min_cell || depth > 18 {
            if let Some(root) = self.newton(center, nsq) {
                if rect.contains(root.eta, 0.1 * rect.size() + 1e-6) {
                    push_unique(found, root);
                    if zeros == 1 || rect.size() < self.options.min_cell || depth > 18 {
                        return Ok(());
                    }
                }
            }
            if rect.size() < self.options.min_cell * 0.01 || depth > 18 {
                return Err(Error::NonConvergence {
                    what: "Newton refinement of a counted zero",
                    estimate: rect.size(),
                    tol: self.options.min_cell,
                });
            }
        }
        for (fx, fy) in [(0.5123, 0.4871), (0.4637, 0.5419), (0.5581, 0.4327), (0.4219, 0.5733)] {
            let xm = rect.re[0] + fx * (rect.re[1] - rect.re[0]);
            let ym = rect.im[0] + fy * (rect.im[1] - rect.im[0]);
            let cells = [
                Rect {
                    re: [rect.re[0], xm],
                    im: [rect.im[0], ym],
                },
                Rect {
                    re: [xm, rect.re[1]],
                    im: [rect.im[0], ym],
                },
                Rect {
                    re: [xm, rect.re[1]],
                    im: [ym, rect.im[1]],
                },
                Rect {
                    re: [rect.re[0], xm],
                    im: [ym, rect.im[1]],
                },
            ];
            let mut counts = Vec::with_capacity(4);
            for c in &cells {
                match self.count(c, &[nsq]) {
                    Winding::Counts(v) => counts.push(v[0]),
                    Winding::Ambiguous => break,
                }
            }
            if counts.len() == 4 && counts.iter().sum::<i64>() == zeros {
                for (c, z) in cells.iter().zip(counts) {
                    self.locate(c, nsq, z, depth + 1, found)?;
                }
                return Ok(());
            }
        }
        Err(Error::WindingAmbiguity(
            "no consistent subdivision of a cell with zeros".into(),
        ))
    }
}

fn push_unique(found: &mut Vec<Root>, root: Root) {
    if !found.iter().any(|r| (r.eta - root.eta).norm() < 1e-7) {
        found.push(root);
    }
}

/// Zero search with default options.
pub fn find_roots(spec: &EquilibriumSpec, region: &SearchRegion) -> Result<DispersionReport> {
    find_roots_with(spec, region, &RootOptions::default())
}

/// Winding numbers, Newton-confirmed zeros, `ν₀` and `θ` for every mode of
/// `region`. Modes `n` and `−n` share `Φ`, so the work is done once per `n²`.
pub fn find_roots_with(
    spec: &EquilibriumSpec,
    region: &SearchRegion,
    options: &RootOptions,
) -> Result<DispersionReport> {
    region.validate()?;
    let searcher = Searcher::new(spec, *options);
    let mut squares: Vec<i64> = region.modes.iter().map(|n| n * n).collect();
    squares.sort_unstable();
    squares.dedup();
    let nsq: Vec<f64> = squares.iter().map(|&s| s as f64).collect();

    let rect = Rect {
        re: [region.re_min, region.re_max],
        im: [region.im_min, region.im_max],
    };
    let (used, counts) = searcher.count_nudged(&rect, &nsq)?;
    let upper = Rect {
        re: used.re,
        im: [used.im[0].max(0.0), used.im[1]],
    };
    let upper_counts = if upper == used {
        counts.clone()
    } else {
        searcher.count_nudged(&upper, &nsq)?.1
    };

    // zeros in the band below the axis fix ν₀
    let band = Rect {
        re: used.re,
        im: [-options.nu_max, 0.0],
    };
    let (band_used, band_counts) = searcher.count_nudged(&band, &nsq)?;

    let mut roots_by_square = Vec::with_capacity(nsq.len());
    let mut band_roots_all: Vec<Root> = Vec::new();
    for (k, &s) in nsq.iter().enumerate() {
        let mut found = Vec::new();
        searcher.locate(&used, s, counts[k], 0, &mut found)?;
        found.sort_by(|a, b| a.eta.re.total_cmp(&b.eta.re));
        let mut band_found = Vec::new();
        searcher.locate(&band_used, s, band_counts[k], 0, &mut band_found)?;
        band_roots_all.extend(band_found);
        roots_by_square.push(found);
    }

    let mut notes = Vec::new();
    let deepest_free = band_roots_all.iter().map(|r| -r.eta.im).fold(f64::INFINITY, f64::min);
    let steps = (options.nu_max / options.nu_step + 1e-9).floor() as usize;
    let mut nu0 = 0.0;
    for k in 1..=steps {
        let nu = k as f64 * options.nu_step;
        if nu < deepest_free {
            nu0 = nu;
        }
    }
    if band_roots_all.len() as i64 != band_counts.iter().sum::<i64>() {
        notes.push("band below the axis: located zeros differ from the winding count".into());
    }

    // θ over the grid on [re] × [−ν₀, im_max]
    let theta_im_min = -nu0;
    let grid: Vec<C64> = (0..options.theta_re_points)
        .flat_map(|a| {
            (0..options.theta_im_points).map(move |b| {
                let x = used.re[0] + (used.re[1] - used.re[0]) * a as f64 / (options.theta_re_points - 1) as f64;
                let y = theta_im_min + (used.im[1] - theta_im_min) * b as f64 / (options.theta_im_points - 1) as f64;
                C64::new(x, y)
            })
        })
        .collect();
    let symmetric = (used.re[0] + used.re[1]).abs() < 1e-12;
    let eval_grid = |pts: &[C64]| -> Vec<Option<C64>> {
        pts.par_iter()
            .map(|&eta| dispersion_integral(spec, eta).ok().filter(|v| v.is_finite()))
            .collect()
    };
    let values_minus = eval_grid(&grid);
    let values_plus = if symmetric {
        values_minus.clone()
    } else {
        let reflected: Vec<C64> = grid.iter().map(|e| -e.conj()).collect();
        eval_grid(&reflected)
    };

    let mut modes = Vec::with_capacity(region.modes.len());
    for &n in &region.modes {
        let k = squares.iter().position(|&s| s == n * n).expect("listed square");
        let s = nsq[k];
        let values = if n > 0 { &values_plus } else { &values_minus };
        let theta = if upper_counts[k] > 0 {
            0.0
        } else {
            values
                .iter()
                .flatten()
                .map(|d| (d - s).norm() / s)
                .fold(f64::INFINITY, f64::min)
        };
        let poles_enclosed = spec
            .lower_poles()
            .iter()
            .filter(|(p, _)| used.contains(*p, 0.0))
            .map(|(_, o)| *o)
            .sum();
        let roots = roots_by_square[k].clone();
        if roots.len() as i64 != counts[k] {
            notes.push(format!(
                "mode {n}: {} zeros located, winding number {}",
                roots.len(),
                counts[k]
            ));
        }
        modes.push(ModeReport {
            n,
            winding: counts[k],
            winding_upper: upper_counts[k],
            poles_enclosed,
            roots,
            theta,
        });
    }
    let theta = modes.iter().map(|m| m.theta).fold(f64::INFINITY, f64::min);
    let any_upper = modes.iter().any(|m| m.winding_upper > 0);
    let verdict = if any_upper {
        Verdict::Unstable
    } else if theta > 0.0 && theta.is_finite() && nu0 > 0.0 {
        Verdict::Stable
    } else {
        Verdict::Inconclusive
    };
    notes.push(format!(
        "theta is the minimum over modes {:?} and the sampled region, not a bound uniform in n",
        region.modes
    ));
    notes.push(format!(
        "strip A = {} is a configuration choice; continuation uses contours down to depth {}",
        spec.strip,
        depths(spec).deepest
    ));
    Ok(DispersionReport {
        family: spec.family.name().into(),
        region: region.clone(),
        used_region: [used.re[0], used.re[1], used.im[0], used.im[1]],
        delta: depths(spec).delta,
        modes,
        theta,
        nu0,
        verdict,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unnormalized_lorentzian() -> EquilibriumSpec {
        EquilibriumSpec::lorentzian_with_mass(PI).unwrap()
    }

    #[test]
    fn kernel_small_frequencies() {
        let m = EquilibriumSpec::maxwellian();
        let l = EquilibriumSpec::lorentzian();
        for &xi in &[-0.1, -0.05, -0.01, -1e-4, 1e-4, 0.01, 0.05, 0.1, 0.15] {
            let k = kernel_k(&m, xi).unwrap();
            let exact = C64::new(0.0, xi * (-xi * xi / 4.0).exp());
            assert!((k - exact).norm() < 1e-10, "maxwellian {xi}: {k}");
            let k = kernel_k(&l, xi).unwrap();
            let exact = C64::new(0.0, xi * (-xi.abs()).exp());
            assert!((k - exact).norm() < 1e-10, "lorentzian {xi}: {k}");
        }
    }

    #[test]
    fn kernel_closed_forms() {
        let m = EquilibriumSpec::maxwellian();
        assert!(kernel_k(&m, 0.0).unwrap().norm() < 1e-10);
        let k2 = kernel_k(&m, 2.0).unwrap();
        assert!((k2 - C64::new(0.0, 0.7357588823)).norm() < 1e-9);
        let l = unnormalized_lorentzian();
        let k1 = kernel_k(&l, 1.0).unwrap();
        assert!((k1 - I * PI * (-1.0f64).exp()).norm() < 1e-9, "{k1}");
        for &xi in &[-4.0, -0.5, 0.5, 1.0, 2.0, 4.0] {
            let exact = I * xi * m.transform_exact(xi);
            assert!((kernel_k(&m, xi).unwrap() - exact).norm() < 1e-9);
        }
    }

    #[test]
    fn lorentzian_phi_closed_form() {
        let l = unnormalized_lorentzian();
        let v = landau_phi(&l, I, 1).unwrap();
        assert!((v - C64::from(-PI / 4.0 - 1.0)).norm() < 1e-10, "{v}");
        // continuation, including below the strip edge through the residue form
        for &eta in &[
            C64::new(0.3, 0.1),
            C64::new(-2.0, -0.3),
            C64::new(1.5, -0.8),
            C64::new(0.2, -1.4),
            C64::new(3.0, -2.5),
        ] {
            let exact = PI / ((eta + I) * (eta + I)) - 4.0;
            let got = landau_phi(&l, eta, 2).unwrap();
            assert!((got - exact).norm() < 1e-10, "{eta}: {got} vs {exact}");
        }
    }

    #[test]
    fn phi_tail() {
        for spec in [EquilibriumSpec::maxwellian(), EquilibriumSpec::lorentzian()] {
            let v = landau_phi(&spec, C64::new(1e3, 1e3), 1).unwrap();
            assert!((v + 1.0).norm() < 1e-2);
        }
    }

    #[test]
    fn maxwellian_root_matches_reference() {
        // plasma dispersion root for k = 1, computed with scipy's wofz
        let m = EquilibriumSpec::maxwellian();
        let eta = C64::new(1.682_890, -0.402_085);
        assert!(landau_phi(&m, eta, 1).unwrap().norm() < 2e-5);
    }

    #[test]
    fn sectional_reflection() {
        let m = EquilibriumSpec::maxwellian();
        for &eta in &[C64::new(0.7, 0.4), C64::new(-1.3, 2.0), C64::new(0.0, 0.05)] {
            let up = landau_phi_sectional(&m, eta, 1).unwrap();
            let down = landau_phi_sectional(&m, eta.conj(), 1).unwrap();
            assert!((down - up.conj()).norm() < 1e-11);
            // the continuation is symmetric under η ↦ −η̄ instead
            let cont = landau_phi(&m, -eta.conj(), 1).unwrap();
            assert!((cont - landau_phi(&m, eta, 1).unwrap().conj()).norm() < 1e-11);
        }
    }

    #[test]
    fn q_mapping_and_direct_formula() {
        let m = EquilibriumSpec::maxwellian();
        let via_map = landau_q(&m, C64::from(1.0), 1).unwrap();
        let direct = landau_q_direct(&m, C64::from(1.0), 1).unwrap();
        let expected = -I * landau_phi(&m, I, 1).unwrap();
        assert!((via_map - expected).norm() < 1e-12);
        assert!((direct - expected).norm() < 1e-10, "{direct} vs {expected}");
        let l = unnormalized_lorentzian();
        let sp = PI.sqrt();
        for z in [C64::new(-1.0, sp), C64::new(-1.0, -sp)] {
            assert!(landau_q(&l, z, 1).unwrap().norm() < 1e-8);
        }
        for z in [C64::new(1.0, sp), C64::new(1.0, -sp)] {
            assert!(landau_q(&l, z, -1).unwrap().norm() < 1e-8);
        }
    }

    #[test]
    fn psi_identity_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = EquilibriumSpec::maxwellian();
        for _ in 0..50 {
            let eta = C64::new(rng.gen_range(-4.0..4.0), rng.gen_range(0.05..3.0));
            for n in [-3i64, -1, 1, 2] {
                let lhs = 1.0 - psi_pm(&m, eta, Sign::of(n), 0.25).unwrap() / (n.abs() * n) as f64;
                let sectional = landau_phi_sectional(&m, -Sign::of(n).value() * eta, n).unwrap();
                assert!((lhs + sectional / (n * n) as f64).norm() < 1e-10);
                assert!((lhs - margin_function(&m, eta, n).unwrap()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn psi_contour_independence() {
        let l = EquilibriumSpec::lorentzian();
        let eta = C64::new(2.0, 0.1);
        for sign in [Sign::Plus, Sign::Minus] {
            let a = psi_pm(&l, eta, sign, 0.25).unwrap();
            let b = psi_pm(&l, eta, sign, 0.4).unwrap();
            assert!((a - b).norm() < 1e-10);
            assert!((a - psi_continued(&l, eta, sign).unwrap()).norm() < 1e-10);
        }
    }

    #[test]
    fn psi_line_integral_vanishes() {
        // truncated at |η| = R the integral is −2·mass/R + O(R⁻³)
        let m = EquilibriumSpec::maxwellian();
        let r = 1e3;
        for sign in [Sign::Plus, Sign::Minus] {
            let f = |x: f64| psi_continued(&m, C64::from(x), sign).unwrap();
            let mut total = C64::new(0.0, 0.0);
            let edges = [-r, -50.0, -8.0, 8.0, 50.0, r];
            for w in edges.windows(2) {
                let re = crate::numerics::integrate_interval(|x| f(x).re, w[0], w[1], 1e-11).unwrap();
                let im = crate::numerics::integrate_interval(|x| f(x).im, w[0], w[1], 1e-11).unwrap();
                total += C64::new(re, im);
            }
            let tail = 2.0 * sign.value() / r;
            assert!((total + tail).norm() < 1e-6, "{sign:?}: {total}");
        }
    }

    #[test]
    fn lorentzian_search() {
        let l = unnormalized_lorentzian();
        let upper = SearchRegion::new([-4.0, 4.0], [-0.5, 3.0], vec![1, -1]).unwrap();
        let report = find_roots(&l, &upper).unwrap();
        assert_eq!(report.verdict, Verdict::Stable);
        assert!(report.modes.iter().all(|m| m.winding == 0));
        let deep = SearchRegion::new([-4.0, 4.0], [-1.5, 3.0], vec![1, -1]).unwrap();
        let report = find_roots(&l, &deep).unwrap();
        let sp = PI.sqrt();
        for m in &report.modes {
            assert_eq!(m.winding, 2);
            assert_eq!(m.poles_enclosed, 2);
            assert_eq!(m.roots.len(), 2);
            for (root, x) in m.roots.iter().zip([-sp, sp]) {
                assert!((root.eta - C64::new(x, -1.0)).norm() < 1e-6, "{:?}", root);
            }
        }
        assert!((report.nu0 - 0.95).abs() < 1e-12);
    }

    #[test]
    fn maxwellian_damping_rate() {
        let m = EquilibriumSpec::maxwellian();
        let rate = landau_rate(&m, 2, 1.0).unwrap();
        assert!(rate > 0.4 && rate < 0.45, "{rate}");
        let l = EquilibriumSpec::lorentzian();
        assert!((landau_rate(&l, 1, 1.5).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn maxwellian_low_modes_stable() {
        let m = EquilibriumSpec::maxwellian();
        let region = SearchRegion::upper_half_plane(&m, 2).unwrap();
        let report = find_roots(&m, &region).unwrap();
        assert_eq!(report.verdict, Verdict::Stable);
        assert!(report.theta > 0.0);
        assert!((report.nu0 - 0.4).abs() < 1e-12, "{}", report.nu0);
        let json = serde_json::to_string(&report).unwrap();
        let back: DispersionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.verdict, report.verdict);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn continuation_is_reflection_symmetric(x in -5.0f64..5.0, y in -1.2f64..2.0) {
            let m = EquilibriumSpec::maxwellian();
            let eta = C64::new(x, y);
            let a = landau_phi(&m, eta, 1).unwrap();
            let b = landau_phi(&m, -eta.conj(), 1).unwrap();
            prop_assert!((a - b.conj()).norm() < 1e-10);
        }

        #[test]
        fn tail_decays(x in 20.0f64..200.0, y in -0.1f64..0.5) {
            let m = EquilibriumSpec::maxwellian();
            let eta = C64::new(x, y);
            let v = landau_phi(&m, eta, 2).unwrap() + 4.0;
            prop_assert!(v.norm() <= 2.0 / eta.norm_sqr());
        }
    }
}
