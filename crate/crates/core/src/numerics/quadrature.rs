//! Double-exponential rules on horizontal lines of the complex plane.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Horizontal integration line `Im w = offset`.
///
/// Nodes cluster double-exponentially at `focus`, which should sit at the
/// real part of the nearest singularity of the integrand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub offset: f64,
    pub focus: f64,
    /// Nodes with `|Re w - focus|` beyond this are dropped.
    pub half_length: f64,
    /// Node count of the coarsest level on each half line.
    pub node_count: usize,
}

impl Contour {
    pub fn real_line() -> Self {
        Self::shifted(0.0)
    }

    /// `ℝ + i·offset`; negative offsets move below the axis.
    pub fn shifted(offset: f64) -> Self {
        Self {
            offset,
            focus: 0.0,
            half_length: f64::INFINITY,
            node_count: 16,
        }
    }

    pub fn with_focus(mut self, focus: f64) -> Self {
        self.focus = focus;
        self
    }
}

const T_MAX: f64 = 5.0;
const MAX_LEVEL: usize = 9;

/// ∫ f(w) dw along the contour, with `w = x + i·offset` and `dw = dx`.
///
/// `tol` is absolute for results of size up to one and relative beyond.
///
/// Each half line `x ≷ focus` is mapped by `x = focus ± exp(π/2·sinh t)` and
/// summed with the trapezoid rule; the step is halved until two successive
/// levels agree to `tol`.
pub fn integrate_line<F>(f: F, contour: &Contour, tol: f64) -> Result<C64>
where
    F: Fn(C64) -> C64,
{
    let node_count = contour.node_count.max(16);
    let mut h = 2.0 * T_MAX / node_count as f64;
    let eval = |t: f64| -> C64 {
        let s = FRAC_PI_2 * t.sinh();
        let r = s.exp();
        if !r.is_finite() || r > contour.half_length {
            return C64::new(0.0, 0.0);
        }
        let weight = FRAC_PI_2 * t.cosh() * r;
        if weight == 0.0 {
            return C64::new(0.0, 0.0);
        }
        let right = C64::new(contour.focus + r, contour.offset);
        let left = C64::new(contour.focus - r, contour.offset);
        (f(right) + f(left)) * weight
    };
    let steps = (T_MAX / h).ceil() as i64;
    let mut sum = C64::new(0.0, 0.0);
    for k in -steps..=steps {
        sum += eval(k as f64 * h);
    }
    let mut value = sum * h;
    let mut estimate = f64::INFINITY;
    for _ in 0..MAX_LEVEL {
        let steps = (T_MAX / h).ceil() as i64;
        let mut extra = C64::new(0.0, 0.0);
        for k in -steps..steps {
            extra += eval((k as f64 + 0.5) * h);
        }
        sum += extra;
        h *= 0.5;
        let refined = sum * h;
        estimate = (refined - value).norm();
        value = refined;
        if !value.is_finite() {
            break;
        }
        if estimate <= tol * value.norm().max(1.0) {
            return Ok(value);
        }
    }
    Err(Error::NonConvergence {
        what: "line quadrature",
        estimate,
        tol,
    })
}

/// Trapezoid sums of `eval` on `[−t_max, t_max]` with step halving until two
/// levels agree to `tol`.
fn de_levels(eval: impl Fn(f64) -> C64, t_max: f64, h0: f64, tol: f64, what: &'static str) -> Result<C64> {
    let mut h = h0;
    let steps = (t_max / h).ceil() as i64;
    let mut sum: C64 = (-steps..=steps).map(|k| eval(k as f64 * h)).sum();
    let mut value = sum * h;
    let mut estimate = f64::INFINITY;
    for _ in 0..MAX_LEVEL {
        let steps = (t_max / h).ceil() as i64;
        let extra: C64 = (-steps..steps).map(|k| eval((k as f64 + 0.5) * h)).sum();
        sum += extra;
        h *= 0.5;
        let refined = sum * h;
        estimate = (refined - value).norm();
        value = refined;
        if !value.is_finite() {
            break;
        }
        if estimate <= tol * value.norm().max(1.0) {
            return Ok(value);
        }
    }
    Err(Error::NonConvergence { what, estimate, tol })
}

/// Like [`integrate_line`], but nodes also cluster at `anchor`.
///
/// Used when the integrand has two features far apart, e.g. a pole at the
/// focus and the bulk of a velocity density at the anchor. The line is split
/// into two half lines and the segment between focus and anchor, which gets
/// the tanh-sinh rule.
pub fn integrate_line_anchored<F>(f: F, contour: &Contour, anchor: f64, tol: f64) -> Result<C64>
where
    F: Fn(C64) -> C64,
{
    if (anchor - contour.focus).abs() < 1.0 {
        return integrate_line(f, contour, tol);
    }
    let (lo, hi) = if anchor < contour.focus {
        (anchor, contour.focus)
    } else {
        (contour.focus, anchor)
    };
    let c = contour.offset;
    let h0 = 2.0 * T_MAX / contour.node_count.max(16) as f64;
    let tails = |t: f64| -> C64 {
        let r = (FRAC_PI_2 * t.sinh()).exp();
        if !r.is_finite() {
            return C64::new(0.0, 0.0);
        }
        let weight = FRAC_PI_2 * t.cosh() * r;
        if weight == 0.0 {
            return C64::new(0.0, 0.0);
        }
        (f(C64::new(hi + r, c)) + f(C64::new(lo - r, c))) * weight
    };
    let outer = de_levels(tails, T_MAX, h0, tol / 3.0, "line quadrature")?;
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let inner = |t: f64| -> C64 {
        let s = FRAC_PI_2 * t.sinh();
        let u = s.tanh();
        let weight = FRAC_PI_2 * t.cosh() / s.cosh().powi(2);
        if weight < 1e-300 || u.abs() >= 1.0 {
            return C64::new(0.0, 0.0);
        }
        f(C64::new(mid + half * u, c)) * weight * half
    };
    let between = de_levels(inner, 3.5, 0.25, tol / 3.0, "line quadrature")?;
    Ok(outer + between)
}

/// ∫_a^b f(x) dx on a finite real interval by the tanh-sinh rule.
pub fn integrate_interval<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let t_max: f64 = 3.2;
    let eval = |t: f64| -> f64 {
        let s = FRAC_PI_2 * t.sinh();
        let u = s.tanh();
        let weight = FRAC_PI_2 * t.cosh() / s.cosh().powi(2);
        if weight < 1e-300 || u.abs() >= 1.0 {
            return 0.0;
        }
        f(mid + half * u) * weight
    };
    let mut h = 0.25;
    let steps = (t_max / h).ceil() as i64;
    let mut sum: f64 = (-steps..=steps).map(|k| eval(k as f64 * h)).sum();
    let mut value = sum * h * half;
    for _ in 0..MAX_LEVEL {
        let steps = (t_max / h).ceil() as i64;
        let extra: f64 = (-steps..steps).map(|k| eval((k as f64 + 0.5) * h)).sum();
        sum += extra;
        h *= 0.5;
        let refined = sum * h * half;
        let estimate = (refined - value).abs();
        value = refined;
        if estimate <= tol * value.abs().max(1.0) {
            return Ok(value);
        }
    }
    Err(Error::NonConvergence {
        what: "interval quadrature",
        estimate: f64::NAN,
        tol,
    })
}

#[derive(Clone, Copy)]
enum Wave {
    Cos,
    Sin,
}

/// Ooura–Mori transformation `φ(t) = t / (1 - exp(-u(t)))` and its derivative.
fn om_phi(t: f64, alpha: f64, beta: f64) -> (f64, f64) {
    if t == 0.0 {
        let a = 2.0 + alpha + beta;
        let b = 0.5 * (beta - alpha);
        return (1.0 / a, -(b - 0.5 * a * a) / (a * a));
    }
    let u = 2.0 * t - alpha * (-t).exp_m1() + beta * t.exp_m1();
    let du = 2.0 + alpha * (-t).exp() + beta * t.exp();
    let d = -(-u).exp_m1();
    let e = (-u).exp();
    if !d.is_finite() || d.abs() > 1e300 {
        return (0.0, 0.0);
    }
    let phi = t / d;
    let dphi = (d - t * du * e) / (d * d);
    (phi, if dphi.is_finite() { dphi } else { 0.0 })
}

/// ∫_0^∞ f(x)·wave(ωx) dx at one step size.
fn om_sum<F>(f: &F, omega: f64, wave: Wave, h: f64) -> C64
where
    F: Fn(f64) -> C64,
{
    let m = PI / h;
    let beta = 0.25;
    let alpha = beta / (1.0 + m * (1.0 + m).ln() / (4.0 * PI)).sqrt();
    let term = |k: i64| -> C64 {
        let t = match wave {
            Wave::Sin => k as f64 * h,
            Wave::Cos => (k as f64 - 0.5) * h,
        };
        let (phi, dphi) = om_phi(t, alpha, beta);
        if dphi == 0.0 || phi <= 0.0 {
            return C64::new(0.0, 0.0);
        }
        let arg = m * phi;
        let trig = match wave {
            Wave::Sin => arg.sin(),
            Wave::Cos => arg.cos(),
        };
        let value = f(arg / omega);
        if value == C64::new(0.0, 0.0) {
            return value;
        }
        value * (trig * dphi)
    };
    let k_cap = (14.0 / h).ceil() as i64;
    let k_min = (2.0 / h).ceil() as i64;
    let node = |k: i64| {
        let t = match wave {
            Wave::Sin => k as f64 * h,
            Wave::Cos => (k as f64 - 0.5) * h,
        };
        m * om_phi(t, alpha, beta).0 / omega
    };
    let mut sum = term(0);
    for direction in [1i64, -1] {
        let mut quiet = 0;
        let mut k = direction;
        while k.abs() <= k_cap {
            let v = term(k);
            sum += v;
            if v.norm() <= 1e-18 * sum.norm().max(1e-300) {
                quiet += 1;
            } else {
                quiet = 0;
            }
            // on the negative side the nodes approach 0 only slowly when ω is
            // small, so the bulk of f may still lie ahead
            let passed = direction > 0 || node(k) < 1e-3;
            if quiet >= 4 && k.abs() >= k_min && passed {
                break;
            }
            k += direction;
        }
    }
    sum * (PI / omega)
}

fn om_integral<F>(f: &F, omega: f64, wave: Wave, tol: f64) -> Result<C64>
where
    F: Fn(f64) -> C64,
{
    let mut h = 0.2;
    let mut value = om_sum(f, omega, wave, h);
    let mut estimate = f64::INFINITY;
    for _ in 0..6 {
        h *= 0.5;
        let refined = om_sum(f, omega, wave, h);
        estimate = (refined - value).norm();
        value = refined;
        if estimate <= tol * value.norm().max(1.0) {
            return Ok(value);
        }
    }
    Err(Error::NonConvergence {
        what: "oscillatory quadrature",
        estimate,
        tol,
    })
}

/// ∫_ℝ f(w) e^{-iξw} dw along `contour`, including the factor `e^{ξ·offset}`
/// that the shift produces.
///
/// Large `|ξ|` uses the Ooura–Mori double-exponential Fourier rule on the
/// even and odd parts of the integrand; tiny `|ξ|` falls back to
/// [`integrate_line`].
pub fn fourier_line<F>(f: F, xi: f64, contour: &Contour, tol: f64) -> Result<C64>
where
    F: Fn(C64) -> C64,
{
    let scale = (xi * contour.offset).exp();
    if xi.abs() < 1e-6 {
        let g = |w: C64| f(w) * (C64::new(0.0, -xi) * w).exp();
        return integrate_line(g, contour, tol);
    }
    let omega = xi.abs();
    let c = contour.offset;
    let even = |x: f64| f(C64::new(x, c)) + f(C64::new(-x, c));
    let odd = |x: f64| f(C64::new(x, c)) - f(C64::new(-x, c));
    let tol_part = 0.5 * tol / scale.max(1e-300);
    let cos_part = om_integral(&even, omega, Wave::Cos, tol_part)?;
    let sin_part = om_integral(&odd, omega, Wave::Sin, tol_part)?;
    let value = cos_part - C64::new(0.0, xi.signum()) * sin_part;
    Ok(value * scale)
}
