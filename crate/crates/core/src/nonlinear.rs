//! Fixed point of the full field equation: backward characteristics, the
//! sources `ψ`, `L`, `R̃`, the operator `T` and the physical reconstruction.
//!
//! Characteristic endpoints are stored as displacements in physical
//! coordinates, `A(t;x,v) = Z_∞ − (x − vt)` and `B(t;x,v) = V_∞ − v`, on an
//! `x × v` grid, and swept backward from the horizon. Over one step free
//! streaming is an exact spectral shift in `x`; the push of the field along
//! the step is integrated per Fourier mode with cubic Filon weights in time
//! and the maps are corrected to first order in that push.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dispersion::landau_rate;
use crate::equilibria::{EquilibriumSpec, PerturbationSpec, Profile};
use crate::freestream::{freestream_field, h_freestream};
use crate::green_function::{
    memory_term, residual_n10a, resolvable_modes, solve_modes, GreenConfig, GreenTable, ResidualReport, VelocityKernel,
};
use crate::numerics::{
    fit_decay, gregory_weight, project_modes, write_json, DecayFit, ModalField, SpaceTimeField, TimeGrid,
};
use crate::{Error, Result, C64};

const I: C64 = C64::new(0.0, 1.0);
/// Relative size below which velocity tails and profile transforms are dropped.
const TAIL: f64 = 1e-16;
const MAX_VELOCITY: f64 = 60.0;
/// Time-node offsets of the cubic stencils: start, interior, end.
const STENCILS: [[f64; 4]; 3] = [[0.0, 1.0, 2.0, 3.0], [-1.0, 0.0, 1.0, 2.0], [-2.0, -1.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlinearConfig {
    /// Weight of the norm; defaults to `min(0.9γ_L, 0.9γ_H)` with `γ_L` the
    /// linear damping rate and `γ_H` the fitted free-streaming rate.
    pub gamma: Option<f64>,
    /// Defaults to `40/γ`.
    pub t_max: Option<f64>,
    pub step: f64,
    pub z_points: usize,
    /// Half-width of the velocity grid; defaults to the tail cutoff of `f_e`
    /// and the mode profiles, capped at 60.
    pub w_max: Option<f64>,
    /// Defaults to `min(0.05, 2π/(mT + 40))`, `m` the top wavenumber of `g_∞`.
    pub w_step: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    /// Largest relative per-slice mean of `h` accepted before re-centring.
    pub mean_tolerance: f64,
    /// Below this time `L` is summed in its form before integration by parts.
    pub t_floor: f64,
    /// Modes searched for the linear damping rate.
    pub rate_modes: i64,
    /// Table settings; `step` and `horizon` are set by the run.
    pub green: GreenConfig,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            t_max: None,
            step: 0.05,
            z_points: 32,
            w_max: None,
            w_step: None,
            max_iter: 12,
            tol: 1e-6,
            mean_tolerance: 1e-8,
            t_floor: 1e-2,
            rate_modes: 4,
            green: GreenConfig::default(),
        }
    }
}

impl NonlinearConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{name} = {v} must be positive")))
            }
        };
        positive("step", self.step)?;
        positive("tol", self.tol)?;
        positive("mean_tolerance", self.mean_tolerance)?;
        positive("t_floor", self.t_floor)?;
        for (name, v) in [
            ("gamma", self.gamma),
            ("t_max", self.t_max),
            ("w_max", self.w_max),
            ("w_step", self.w_step),
        ] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        if self.z_points < 8 {
            return Err(Error::InvalidSpec(format!("z_points = {} is below 8", self.z_points)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidSpec("max_iter must be at least 1".into()));
        }
        if self.rate_modes < 1 {
            return Err(Error::InvalidSpec("rate_modes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters actually used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub gamma: f64,
    pub gamma_linear: f64,
    /// Fitted decay rate of `sup |H|`; infinite for `g_∞ ≡ 0`.
    pub gamma_free: f64,
    pub t_max: f64,
    pub step: f64,
    pub z_points: usize,
    pub n_modes: i64,
    pub w_max: f64,
    pub w_step: f64,
    pub w_points: usize,
}

/// Everything fixed across iterations: grids, the Green table and `ψ`.
#[derive(Debug, Clone)]
pub struct NonlinearProblem {
    pub spec: EquilibriumSpec,
    pub g: PerturbationSpec,
    pub config: NonlinearConfig,
    pub resolved: Resolved,
    pub grid: TimeGrid,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Trapezoid weights of the velocity grid.
    weights: Vec<f64>,
    /// `f_e` on the velocity grid.
    fe0: Vec<f64>,
    pub table: Arc<GreenTable>,
    kernel: Arc<VelocityKernel>,
    /// `H` and `H_z`.
    pub psi: SpaceTimeField,
    filon: Arc<FilonWeights>,
    /// Beyond this `|ξ|` the profile transforms are dropped.
    xi_cutoff: f64,
}

fn profile_cutoff(profile: &Profile) -> f64 {
    match profile {
        Profile::Gaussian => (-(TAIL.ln())).sqrt() + 1.0,
        _ => MAX_VELOCITY,
    }
}

fn transform_cutoff(g: &PerturbationSpec) -> f64 {
    g.modes()
        .iter()
        .map(|m| match m.profile {
            Profile::Gaussian => 2.0 * (-(TAIL.ln())).sqrt(),
            Profile::Lorentzian => (PI / TAIL).ln(),
            Profile::Rational(_) => {
                let top = m.profile.transform(0.0).norm().max(1e-300);
                let mut xi = 1.0;
                while xi < 1e4 && (0..8).any(|k| m.profile.transform(xi * (1.0 + k as f64 / 8.0)).norm() > TAIL * top) {
                    xi *= 2.0;
                }
                xi
            }
        })
        .fold(0.0, f64::max)
}

/// Fitted decay rate of `sup_z |H|` on `[0, 40]`.
fn free_rate(g: &PerturbationSpec, z_points: usize) -> Result<f64> {
    if g.eps == 0.0 || g.modes().is_empty() {
        return Ok(f64::INFINITY);
    }
    let grid = TimeGrid::spanning(0.0, 40.0, 0.1)?;
    let h = freestream_field(g, z_points, &grid)?;
    Ok(fit_decay(&grid.times(), &h.sup_value(), [0.0, 40.0])?.rate)
}

impl NonlinearProblem {
    pub fn new(spec: &EquilibriumSpec, g: &PerturbationSpec, config: &NonlinearConfig) -> Result<Self> {
        config.validate()?;
        let gamma_linear = landau_rate(spec, config.rate_modes, 1.0)?;
        let gamma_free = free_rate(g, config.z_points)?;
        let gamma = config.gamma.unwrap_or((0.9 * gamma_linear).min(0.9 * gamma_free));
        let t_max = config.t_max.unwrap_or(40.0 / gamma);
        let grid = TimeGrid::spanning(0.0, t_max, config.step)?;
        if grid.len < 4 {
            return Err(Error::InvalidSpec("the time grid needs at least four nodes".into()));
        }
        let green = GreenConfig {
            step: grid.step,
            horizon: grid.t_end(),
            ..config.green
        };
        let table = GreenTable::build(spec, &green)?;
        Self::with_table(spec, g, config, Arc::new(table), gamma, gamma_linear, gamma_free)
    }

    fn with_table(
        spec: &EquilibriumSpec,
        g: &PerturbationSpec,
        config: &NonlinearConfig,
        table: Arc<GreenTable>,
        gamma: f64,
        gamma_linear: f64,
        gamma_free: f64,
    ) -> Result<Self> {
        let grid = TimeGrid::new(0.0, table.grid.step, table.origin + 1)?;
        let t_max = grid.t_end();
        let n_modes = resolvable_modes(config.z_points).min(table.n_max());
        let top = g.max_wavenumber().max(1) as f64;
        let w_max = config.w_max.unwrap_or_else(|| {
            g.modes()
                .iter()
                .map(|m| profile_cutoff(&m.profile))
                .fold(spec.velocity_cutoff(TAIL), f64::max)
                .min(MAX_VELOCITY)
        });
        let w_target = config.w_step.unwrap_or((2.0 * PI / (top * t_max + 40.0)).min(0.05));
        let half = (w_max / w_target).ceil() as usize;
        let w_step = w_max / half as f64;
        let v: Vec<f64> = (0..=2 * half).map(|k| -w_max + k as f64 * w_step).collect();
        let mut weights = vec![w_step; v.len()];
        weights[0] *= 0.5;
        weights[2 * half] *= 0.5;
        let fe0 = v.iter().map(|&w| spec.fe(C64::from(w)).re).collect();
        let kernel = VelocityKernel::new(spec, grid.step, n_modes as usize * grid.len)?;
        let psi = freestream_field(g, config.z_points, &grid)?;
        let filon = FilonWeights::new(n_modes, &v, grid.step);
        Ok(Self {
            spec: spec.clone(),
            g: g.clone(),
            config: *config,
            resolved: Resolved {
                gamma,
                gamma_linear,
                gamma_free,
                t_max,
                step: grid.step,
                z_points: config.z_points,
                n_modes,
                w_max,
                w_step,
                w_points: v.len(),
            },
            grid,
            x: psi.z.clone(),
            v,
            weights,
            fe0,
            table,
            kernel: Arc::new(kernel),
            psi,
            filon: Arc::new(filon),
            xi_cutoff: transform_cutoff(g),
        })
    }

    /// Same grids and table with `g_∞` rescaled to amplitude `eps`.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        let r = self.resolved;
        let config = NonlinearConfig {
            w_max: Some(r.w_max),
            w_step: Some(r.w_step),
            ..self.config
        };
        Self::with_table(
            &self.spec,
            &self.g.with_eps(eps),
            &config,
            self.table.clone(),
            r.gamma,
            r.gamma_linear,
            r.gamma_free,
        )
    }

    pub fn zero_iterate(&self) -> FieldIterate {
        FieldIterate::from_modes(
            ModalField::zeros(self.grid, self.resolved.n_modes),
            &self.x,
            self.resolved.gamma,
            0,
        )
    }

    fn check_iterate(&self, e: &FieldIterate) -> Result<()> {
        if e.modes.grid != self.grid || e.field.z != self.x {
            return Err(Error::InvalidSpec("iterate grids differ from the problem grids".into()));
        }
        Ok(())
    }
}

/// An iterate `E` with `E_z`, its modes and weighted norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldIterate {
    /// `E` in `value`, `E_z` in `dvalue`.
    pub field: SpaceTimeField,
    pub modes: ModalField,
    pub gamma: f64,
    pub iteration: usize,
    pub norm: f64,
}

impl FieldIterate {
    pub fn from_modes(modes: ModalField, z: &[f64], gamma: f64, iteration: usize) -> Self {
        let field = modes.to_field(z);
        let norm = weighted_norm(&field, gamma);
        Self {
            field,
            modes,
            gamma,
            iteration,
            norm,
        }
    }

    /// `‖self − other‖` on the sampled grid.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut diff = self.field.clone();
        for (a, b) in diff.value.iter_mut().zip(&other.field.value) {
            *a -= b;
        }
        for (a, b) in diff.dvalue.iter_mut().zip(&other.field.dvalue) {
            *a -= b;
        }
        weighted_norm(&diff, self.gamma)
    }

    /// Fit of `sup_z(|E| + |E_z|)` over [`fit_window`].
    pub fn decay_fit(&self) -> Option<DecayFit> {
        let sup = self.field.sup_combined();
        let times = self.field.grid.times();
        fit_decay(&times, &sup, fit_window(&times, &sup)).ok()
    }
}

/// From the first node to the last one where `sup` is still above `1e-8` of
/// its maximum, so that fits of different quantities see the same span.
pub fn fit_window(times: &[f64], sup: &[f64]) -> [f64; 2] {
    let top = sup.iter().fold(0.0f64, |m, v| m.max(*v));
    let last = sup.iter().rposition(|v| *v >= 1e-8 * top).unwrap_or(0);
    [times[0], times[last]]
}

/// `sup_t e^{γt} sup_z (|E| + |E_z|)`.
pub fn weighted_norm(field: &SpaceTimeField, gamma: f64) -> f64 {
    field
        .grid
        .times()
        .iter()
        .zip(field.sup_combined())
        .map(|(t, s)| s * (gamma * t).exp())
        .fold(0.0, f64::max)
}

/// `∫_0^1 τ^p e^{iθτ} dτ` for `p = 0..=4`.
fn moments(theta: f64) -> [C64; 5] {
    let mut mu = [C64::new(0.0, 0.0); 5];
    if theta.abs() < 1.0 {
        let x = I * theta;
        for (p, m) in mu.iter_mut().enumerate() {
            let mut term = C64::new(1.0, 0.0);
            let mut sum = C64::new(0.0, 0.0);
            for k in 0..30 {
                sum += term / (p + k + 1) as f64;
                term *= x / (k + 1) as f64;
            }
            *m = sum;
        }
    } else {
        let e = C64::from_polar(1.0, theta);
        let x = I * theta;
        mu[0] = (e - 1.0) / x;
        for p in 1..5 {
            mu[p] = (e - p as f64 * mu[p - 1]) / x;
        }
    }
    mu
}

/// Monomial coefficients of the Lagrange basis on `nodes`.
fn lagrange_coefficients(nodes: &[f64; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for r in 0..4 {
        let mut poly = vec![1.0];
        let mut denom = 1.0;
        for s in (0..4).filter(|&s| s != r) {
            let mut next = vec![0.0; poly.len() + 1];
            for (p, c) in poly.iter().enumerate() {
                next[p + 1] += c;
                next[p] -= c * nodes[s];
            }
            poly = next;
            denom *= nodes[r] - nodes[s];
        }
        for p in 0..4 {
            out[r][p] = poly[p] / denom;
        }
    }
    out
}

/// `∫_0^Δ ℓ_r(u) e^{iqvu} du` and `∫_0^Δ (Δ−u) ℓ_r(u) e^{iqvu} du` per stencil,
/// mode and velocity.
#[derive(Debug, Clone)]
struct FilonWeights {
    n_modes: i64,
    points: usize,
    first: Vec<[C64; 4]>,
    second: Vec<[C64; 4]>,
}

impl FilonWeights {
    fn new(n_modes: i64, v: &[f64], step: f64) -> Self {
        let q_count = (2 * n_modes + 1) as usize;
        let size = 3 * q_count * v.len();
        let mut first = vec![[C64::new(0.0, 0.0); 4]; size];
        let mut second = vec![[C64::new(0.0, 0.0); 4]; size];
        for (kind, nodes) in STENCILS.iter().enumerate() {
            let coeffs = lagrange_coefficients(nodes);
            for q in -n_modes..=n_modes {
                for (k, &w) in v.iter().enumerate() {
                    let mu = moments(q as f64 * w * step);
                    let at = (kind * q_count + (q + n_modes) as usize) * v.len() + k;
                    for r in 0..4 {
                        let mut a = C64::new(0.0, 0.0);
                        let mut b = C64::new(0.0, 0.0);
                        for p in 0..4 {
                            a += coeffs[r][p] * mu[p];
                            b += coeffs[r][p] * (mu[p] - mu[p + 1]);
                        }
                        first[at][r] = a * step;
                        second[at][r] = b * step * step;
                    }
                }
            }
        }
        Self {
            n_modes,
            points: v.len(),
            first,
            second,
        }
    }

    fn index(&self, kind: usize, q: i64, k: usize) -> usize {
        (kind * (2 * self.n_modes + 1) as usize + (q + self.n_modes) as usize) * self.points + k
    }
}

/// Stencil kind and its four time nodes for the step `[t_i, t_{i+1}]`.
fn stencil(i: usize, len: usize) -> (usize, [usize; 4]) {
    if i == 0 {
        (0, [0, 1, 2, 3])
    } else if i + 2 < len {
        (1, [i - 1, i, i + 1, i + 2])
    } else {
        (2, [i - 2, i - 1, i, i + 1])
    }
}

/// Displacement maps `A`, `B` at one time, row-major in `v` then `x`.
#[derive(Debug, Clone, PartialEq)]
struct Maps {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// One row after the free-streaming shift, with the field pushes.
struct ShiftedRow {
    a: Vec<f64>,
    ax: Vec<f64>,
    b: Vec<f64>,
    bx: Vec<f64>,
    nu: Vec<f64>,
    xi: Vec<f64>,
}

struct Transforms {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Transforms {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// Fourth-order `∂_v` of `rows[k][j]` at interior rows, lower order at the edges.
fn dv(rows: &[ShiftedRow], pick: impl Fn(&ShiftedRow) -> &[f64], k: usize, j: usize, h: f64) -> f64 {
    let n = rows.len();
    let f = |m: usize| pick(&rows[m])[j];
    if k >= 2 && k + 2 < n {
        (-f(k + 2) + 8.0 * f(k + 1) - 8.0 * f(k - 1) + f(k - 2)) / (12.0 * h)
    } else if k >= 1 && k + 1 < n {
        (f(k + 1) - f(k - 1)) / (2.0 * h)
    } else if k == 0 {
        (f(1) - f(0)) / h
    } else {
        (f(k) - f(k - 1)) / h
    }
}

impl NonlinearProblem {
    /// Free-streaming shift of row `k` over one step plus the field pushes.
    fn shift_row(&self, fft: &Transforms, maps: &Maps, k: usize, kind: usize, nodes: &[[C64; 4]]) -> ShiftedRow {
        let nz = self.x.len();
        let nm = self.resolved.n_modes;
        let dt = self.grid.step;
        let shift = self.v[k] * dt;
        let row = k * nz;
        let mut packed: Vec<C64> = (0..nz).map(|j| C64::new(maps.a[row + j], maps.b[row + j])).collect();
        fft.forward.process(&mut packed);
        let mut moved = packed.clone();
        let mut slope = packed;
        for idx in 0..nz {
            let c = moved[idx] / nz as f64;
            if 2 * idx == nz {
                let q = idx as f64;
                moved[idx] = c * (q * shift).cos();
                slope[idx] = C64::new(0.0, 0.0);
            } else {
                let q = if 2 * idx < nz {
                    idx as f64
                } else {
                    idx as f64 - nz as f64
                };
                let phase = C64::from_polar(1.0, q * shift);
                moved[idx] = c * phase;
                slope[idx] = c * phase * I * q;
            }
        }
        let mut push = vec![C64::new(0.0, 0.0); nz];
        for q in -nm..=nm {
            let at = self.filon.index(kind, q, k);
            let (w1, w2) = (&self.filon.first[at], &self.filon.second[at]);
            let ev = &nodes[(q + nm) as usize];
            let mut nu = C64::new(0.0, 0.0);
            let mut xi = C64::new(0.0, 0.0);
            for r in 0..4 {
                nu += w1[r] * ev[r];
                xi += w2[r] * ev[r];
            }
            push[q.rem_euclid(nz as i64) as usize] = nu + I * xi;
        }
        fft.inverse.process(&mut moved);
        fft.inverse.process(&mut slope);
        fft.inverse.process(&mut push);
        ShiftedRow {
            a: moved.iter().map(|c| c.re).collect(),
            b: moved.iter().map(|c| c.im).collect(),
            ax: slope.iter().map(|c| c.re).collect(),
            bx: slope.iter().map(|c| c.im).collect(),
            nu: push.iter().map(|c| c.re).collect(),
            xi: push.iter().map(|c| c.im).collect(),
        }
    }

    /// Sweeps the maps from `A = B = 0` at the horizon back to `t = 0`,
    /// calling `visit(i, maps)` at every node, last node first.
    fn sweep(&self, e: &ModalField, mut visit: impl FnMut(usize, &Maps) -> Result<()>) -> Result<()> {
        let nz = self.x.len();
        let nv = self.v.len();
        let nm = self.resolved.n_modes;
        let len = self.grid.len;
        let dt = self.grid.step;
        let hw = self.resolved.w_step;
        let mut maps = Maps {
            a: vec![0.0; nz * nv],
            b: vec![0.0; nz * nv],
        };
        visit(len - 1, &maps)?;
        let fft = Transforms::new(nz);
        for i in (0..len - 1).rev() {
            let t_next = self.grid.at(i + 1);
            let (kind, idx) = stencil(i, len);
            let nodes: Vec<[C64; 4]> = (-nm..=nm)
                .map(|q| {
                    let m = e.mode(q);
                    [m[idx[0]], m[idx[1]], m[idx[2]], m[idx[3]]]
                })
                .collect();
            let rows: Vec<ShiftedRow> = (0..nv)
                .into_par_iter()
                .map(|k| self.shift_row(&fft, &maps, k, kind, &nodes))
                .collect();
            let updated: Vec<(Vec<f64>, Vec<f64>)> = (0..nv)
                .into_par_iter()
                .map(|k| {
                    let r = &rows[k];
                    let mut a = vec![0.0; nz];
                    let mut b = vec![0.0; nz];
                    for j in 0..nz {
                        let av = dv(&rows, |s| &s.a, k, j, hw) - dt * r.ax[j];
                        let bv = dv(&rows, |s| &s.b, k, j, hw) - dt * r.bx[j];
                        a[j] = r.a[j] + r.ax[j] * r.xi[j] + av * r.nu[j] + r.xi[j] - r.nu[j] * t_next;
                        b[j] = r.b[j] + r.bx[j] * r.xi[j] + bv * r.nu[j] + r.nu[j];
                    }
                    (a, b)
                })
                .collect();
            for (k, (a, b)) in updated.into_iter().enumerate() {
                maps.a[k * nz..(k + 1) * nz].copy_from_slice(&a);
                maps.b[k * nz..(k + 1) * nz].copy_from_slice(&b);
            }
            let deviation = maps.b.iter().fold(0.0f64, |m, b| m.max(b.abs()));
            if deviation > 1.0 || !deviation.is_finite() {
                return Err(Error::BlowUp { deviation });
            }
            visit(i, &maps)?;
        }
        Ok(())
    }

    /// Density pieces at node `i`: the nonlinear shift
    /// `∫[f_e(V_∞) − f_e(w)] + ∫[g_∞(Z_∞,V_∞) − g_∞(x−wt,w)]` and the full
    /// `∫ f dw − 1`.
    fn density(&self, i: usize, maps: &Maps) -> (Vec<f64>, Vec<f64>) {
        let nz = self.x.len();
        let t = self.grid.at(i);
        let normalization: f64 = self.weights.iter().zip(&self.fe0).map(|(w, f)| w * f).sum::<f64>() - 1.0;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..self.v.len())
            .into_par_iter()
            .map(|k| {
                let v = self.v[k];
                let w = self.weights[k];
                let mut shift = vec![0.0; nz];
                let mut full = vec![0.0; nz];
                for j in 0..nz {
                    let a = maps.a[k * nz + j];
                    let b = maps.b[k * nz + j];
                    let base = self.x[j] - v * t;
                    let fe = self.spec.fe(C64::from(v + b)).re - self.fe0[k];
                    let moved = self.g.g(base + a, C64::from(v + b)).re;
                    let rest = self.g.g(base, C64::from(v)).re;
                    shift[j] = w * (fe + moved - rest);
                    full[j] = w * (fe + moved);
                }
                (shift, full)
            })
            .collect();
        let mut shift = vec![0.0; nz];
        let mut full = vec![normalization; nz];
        for (s, f) in rows {
            for j in 0..nz {
                shift[j] += s[j];
                full[j] += f[j];
            }
        }
        (shift, full)
    }

    /// Modes of `L` at node `i`, indices `−N..=N`.
    fn l_modes_at(&self, e: &ModalField, i: usize) -> Vec<C64> {
        let nm = self.resolved.n_modes;
        let len = self.grid.len;
        let dt = self.grid.step;
        let t = self.grid.at(i);
        let points = len - i;
        let mut out = vec![C64::new(0.0, 0.0); (2 * nm + 1) as usize];
        for m in self.g.wavenumbers() {
            let mt = m as f64 * t;
            for k in (-nm..=nm).filter(|&k| k != 0 && (m + k).abs() <= nm) {
                // ξ = mt − k(s−t) inside the transform cutoff
                let ends = [(mt - self.xi_cutoff) / k as f64, (mt + self.xi_cutoff) / k as f64];
                let (lo, hi) = (ends[0].min(ends[1]), ends[0].max(ends[1]));
                if hi < 0.0 {
                    continue;
                }
                let first = i + (lo / dt).ceil().max(0.0) as usize;
                let last = (i as f64 + (hi / dt).floor()).min((len - 1) as f64) as usize;
                let ek = e.mode(k);
                if first > last {
                    continue;
                }
                let mut sum = C64::new(0.0, 0.0);
                for j in first..=last {
                    let s = self.grid.at(j);
                    let xi = mt - k as f64 * (s - t);
                    let transform = self.g.mode_transform(m, xi);
                    let factor = if t >= self.config.t_floor {
                        (t - s) * (s / t) * I * k as f64 + (1.0 - s / t) * I * xi
                    } else {
                        -I * (m as f64) * s + I * xi
                    };
                    sum += gregory_weight(j - i, points) * factor * transform * ek[j];
                }
                out[(m + k + nm) as usize] += sum * dt;
            }
        }
        out
    }

    fn l_modes(&self, e: &ModalField) -> ModalField {
        let rows: Vec<Vec<C64>> = (0..self.grid.len)
            .into_par_iter()
            .map(|i| self.l_modes_at(e, i))
            .collect();
        let mut out = ModalField::zeros(self.grid, self.resolved.n_modes);
        for (i, row) in rows.iter().enumerate() {
            for (p, c) in out.wavenumbers().zip(row) {
                out.mode_mut(p)[i] = *c;
            }
        }
        out
    }

    fn node(&self, t: f64) -> Result<usize> {
        let i = self.grid.nearest(t);
        if (self.grid.at(i) - t).abs() > 1e-9 * self.grid.step {
            return Err(Error::InvalidSpec(format!("t = {t} is not a node of the time grid")));
        }
        Ok(i)
    }
}

/// `ψ(z,t) = ∫ g_∞(z−wt, w) dw`.
pub fn source_psi(g: &PerturbationSpec, z: f64, t: f64) -> Result<f64> {
    h_freestream(g, z, t)
}

fn synthesize(modes: &[C64], nmax: i64, z: f64) -> f64 {
    (-nmax..=nmax)
        .zip(modes)
        .map(|(n, c)| (c * C64::from_polar(1.0, n as f64 * z)).re)
        .sum()
}

/// `L(z,t)` at a node `t` of the problem grid, with `E` taken as zero beyond
/// the horizon.
pub fn source_l(problem: &NonlinearProblem, e: &FieldIterate, z: f64, t: f64) -> Result<f64> {
    problem.check_iterate(e)?;
    let i = problem.node(t)?;
    Ok(synthesize(
        &problem.l_modes_at(&e.modes, i),
        problem.resolved.n_modes,
        z,
    ))
}

/// `R̃(z,t)` at a node `t` covered by `endpoints`, interpolated
/// trigonometrically from the x-grid.
pub fn source_rtilde(
    problem: &NonlinearProblem,
    e: &FieldIterate,
    endpoints: &CharEndpoints,
    z: f64,
    t: f64,
) -> Result<f64> {
    problem.check_iterate(e)?;
    let i = problem.node(t)?;
    let slot = endpoints
        .indices
        .iter()
        .position(|&k| k == i)
        .ok_or_else(|| Error::InvalidSpec(format!("no characteristic endpoints stored at t = {t}")))?;
    let maps = endpoints.maps(slot, &problem.x, &problem.v);
    let (shift, _) = problem.density(i, &maps);
    let nm = problem.resolved.n_modes;
    let l = problem.l_modes_at(&e.modes, i);
    let memory = memory_term(&problem.kernel, &e.modes);
    let samples: Vec<C64> = shift.iter().map(|&s| C64::from(s)).collect();
    let projected = project_modes(&samples, nm);
    let mut value: f64 = projected
        .iter()
        .map(|(n, c)| (c * C64::from_polar(1.0, *n as f64 * z)).re)
        .sum();
    value -= synthesize(&l, nm, z);
    for n in memory.wavenumbers() {
        value -= (memory.mode(n)[i] * C64::from_polar(1.0, n as f64 * z)).re;
    }
    Ok(value)
}

/// `Z_∞(t; x−vt, v)` and `V_∞(t; x−vt, v)` at stored nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharEndpoints {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-major in `v` then `x`, one vector per stored node.
    pub z_inf: Vec<Vec<f64>>,
    pub v_inf: Vec<Vec<f64>>,
    pub horizon: f64,
    /// Bound on the displacement a field decaying at `γ` past the horizon
    /// would add.
    pub tail_estimate: f64,
}

impl CharEndpoints {
    fn maps(&self, slot: usize, x: &[f64], v: &[f64]) -> Maps {
        let nz = x.len();
        let t = self.times[slot];
        let mut a = vec![0.0; self.z_inf[slot].len()];
        let mut b = a.clone();
        for (k, &w) in v.iter().enumerate() {
            for (j, &xj) in x.iter().enumerate() {
                let at = k * nz + j;
                a[at] = self.z_inf[slot][at] - (xj - w * t);
                b[at] = self.v_inf[slot][at] - w;
            }
        }
        Maps { a, b }
    }
}

fn tail_bound(e: &FieldIterate, horizon: f64) -> f64 {
    let last = e.field.grid.len - 1;
    let end = e.field.slice(last).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if end == 0.0 {
        return 0.0;
    }
    end * (horizon / e.gamma + 1.0 / (e.gamma * e.gamma))
}

/// Endpoints at the nodes `indices` from one backward sweep.
pub fn char_endpoints(problem: &NonlinearProblem, e: &FieldIterate, indices: &[usize]) -> Result<CharEndpoints> {
    problem.check_iterate(e)?;
    let nz = problem.x.len();
    let mut wanted: Vec<usize> = indices.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if let Some(&i) = wanted.last() {
        if i >= problem.grid.len {
            return Err(Error::InvalidSpec(format!("node {i} is past the horizon")));
        }
    }
    let mut stored = Vec::new();
    problem.sweep(&e.modes, |i, maps| {
        if wanted.binary_search(&i).is_ok() {
            let t = problem.grid.at(i);
            let mut z = maps.a.clone();
            let mut v = maps.b.clone();
            for (k, &w) in problem.v.iter().enumerate() {
                for (j, &x) in problem.x.iter().enumerate() {
                    z[k * nz + j] += x - w * t;
                    v[k * nz + j] += w;
                }
            }
            stored.push((i, z, v));
        }
        Ok(())
    })?;
    stored.reverse();
    Ok(CharEndpoints {
        indices: stored.iter().map(|s| s.0).collect(),
        times: stored.iter().map(|s| problem.grid.at(s.0)).collect(),
        x: problem.x.clone(),
        v: problem.v.clone(),
        z_inf: stored.iter().map(|s| s.1.clone()).collect(),
        v_inf: stored.into_iter().map(|s| s.2).collect(),
        horizon: problem.grid.t_end(),
        tail_estimate: tail_bound(e, problem.grid.t_end()),
    })
}

/// One characteristic endpoint with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharPoint {
    pub z_inf: f64,
    pub v_inf: f64,
    /// Accumulated step-doubling estimate plus the tail bound.
    pub error_estimate: f64,
    pub tail_estimate: f64,
}

/// `E(x, s)`: cubic Lagrange in time on the modes, exact in `x`.
fn field_at(e: &ModalField, x: f64, s: f64) -> f64 {
    let grid = e.grid;
    let len = grid.len;
    let pos = ((s - grid.t0) / grid.step).clamp(0.0, (len - 1) as f64);
    let i = (pos.floor() as usize).min(len - 2);
    let (_, idx) = stencil(i, len);
    let tau = pos - i as f64;
    let offsets: Vec<f64> = idx.iter().map(|&j| j as f64 - i as f64).collect();
    let mut weights = [0.0; 4];
    for r in 0..4 {
        weights[r] = (0..4)
            .filter(|&q| q != r)
            .map(|q| (tau - offsets[q]) / (offsets[r] - offsets[q]))
            .product();
    }
    let base = C64::from_polar(1.0, x);
    let mut phase = C64::from_polar(1.0, -(e.nmax as f64) * x);
    let mut total = C64::new(0.0, 0.0);
    for n in e.wavenumbers() {
        let m = e.mode(n);
        let value: C64 = (0..4).map(|r| weights[r] * m[idx[r]]).sum();
        total += value * phase;
        phase *= base;
    }
    total.re
}

/// Integrates `Z' = −sE(Z+Vs, s)`, `V' = E(Z+Vs, s)` from `(z, v)` at `s = t`
/// to the horizon by adaptive RK4 with step doubling; `E` is zero beyond.
pub fn integrate_characteristics(e: &FieldIterate, t: f64, z: f64, v: f64, tol: f64) -> Result<CharPoint> {
    let horizon = e.field.grid.t_end();
    if !(t >= e.field.grid.t0 && t <= horizon) {
        return Err(Error::InvalidSpec(format!("start time {t} is outside the field grid")));
    }
    let tail = tail_bound(e, horizon);
    if tail > tol {
        return Err(Error::Horizon(format!(
            "characteristic tail {tail:.3e} exceeds {tol:.3e}"
        )));
    }
    let rhs = |s: f64, y: [f64; 2]| {
        let f = field_at(&e.modes, y[0] + y[1] * s, s);
        [-s * f, f]
    };
    let rk4 = |s: f64, y: [f64; 2], h: f64| {
        let add = |y: [f64; 2], k: [f64; 2], c: f64| [y[0] + c * k[0], y[1] + c * k[1]];
        let k1 = rhs(s, y);
        let k2 = rhs(s + 0.5 * h, add(y, k1, 0.5 * h));
        let k3 = rhs(s + 0.5 * h, add(y, k2, 0.5 * h));
        let k4 = rhs(s + h, add(y, k3, h));
        [
            y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    };
    let span = horizon - t;
    let mut y = [z, v];
    let mut s = t;
    let mut h = (e.field.grid.step).min(0.5 / (1.0 + v.abs() * e.modes.nmax as f64));
    let mut error = 0.0;
    while s < horizon {
        h = h.min(horizon - s);
        let full = rk4(s, y, h);
        let half = rk4(s + 0.5 * h, rk4(s, y, 0.5 * h), 0.5 * h);
        let err = ((half[0] - full[0]).abs() + (half[1] - full[1]).abs()) / 15.0;
        // never ask for less than roundoff on the current state
        let allowed = (tol * h / span.max(1.0)).max(1e-15 * (1.0 + y[0].abs() + y[1].abs()));
        if err <= allowed || h < 1e-10 {
            s = if horizon - s <= h { horizon } else { s + h };
            y = half;
            error += err;
            let deviation = (y[1] - v).abs();
            if deviation > 1.0 || !deviation.is_finite() {
                return Err(Error::BlowUp { deviation });
            }
        }
        let factor = if err == 0.0 {
            4.0
        } else {
            (0.9 * (allowed / err).powf(0.2)).clamp(0.2, 4.0)
        };
        h *= factor;
    }
    Ok(CharPoint {
        z_inf: y[0],
        v_inf: y[1],
        error_estimate: error + tail,
        tail_estimate: tail,
    })
}

/// The sampled pieces of `h = ψ + L + R̃` (value channels only, except `ψ`).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerms {
    pub psi: SpaceTimeField,
    pub l: SpaceTimeField,
    pub rtilde: SpaceTimeField,
    pub total: SpaceTimeField,
    /// Largest per-slice mean of `total` relative to `sup |total|`.
    pub relative_mean: f64,
}

fn relative_mean(field: &SpaceTimeField) -> f64 {
    let nz = field.z.len() as f64;
    let sup = field.value.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sup == 0.0 {
        return 0.0;
    }
    (0..field.grid.len)
        .map(|i| (field.slice(i).iter().sum::<f64>() / nz).abs())
        .fold(0.0, f64::max)
        / sup
}

/// `ψ`, `L`, `R̃ = ρ_nl − ∫∫f_e'E − L` and their sum for the iterate `e`.
pub fn assemble_sources(problem: &NonlinearProblem, e: &FieldIterate) -> Result<SourceTerms> {
    problem.check_iterate(e)?;
    let nz = problem.x.len();
    let l = problem.l_modes(&e.modes).to_field(&problem.x);
    let memory = memory_term(&problem.kernel, &e.modes).to_field(&problem.x);
    let mut rtilde = SpaceTimeField::zeros(problem.x.clone(), problem.grid);
    problem.sweep(&e.modes, |i, maps| {
        let (shift, _) = problem.density(i, maps);
        for j in 0..nz {
            let at = i * nz + j;
            rtilde.value[at] = shift[j] - memory.value[at] - l.value[at];
        }
        Ok(())
    })?;
    let mut total = SpaceTimeField::zeros(problem.x.clone(), problem.grid);
    for at in 0..total.value.len() {
        total.value[at] = problem.psi.value[at] + l.value[at] + rtilde.value[at];
    }
    let relative_mean = relative_mean(&total);
    Ok(SourceTerms {
        psi: problem.psi.clone(),
        l,
        rtilde,
        total,
        relative_mean,
    })
}

/// `T(E)`: the Green solve of `h = ψ + L + R̃`, with the per-slice mean of `h`
/// removed when it is within the configured tolerance.
pub fn apply_t(problem: &NonlinearProblem, e: &FieldIterate) -> Result<(FieldIterate, SourceTerms)> {
    let sources = assemble_sources(problem, e)?;
    if sources.relative_mean > problem.config.mean_tolerance {
        return Err(Error::MeanViolation {
            value: sources.relative_mean,
        });
    }
    let mut modes = ModalField::from_field(&sources.total, problem.resolved.n_modes);
    modes.mode_mut(0).iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
    let solved = solve_modes(&problem.table, &modes)?;
    let next = FieldIterate::from_modes(solved, &problem.x, problem.resolved.gamma, e.iteration + 1);
    Ok((next, sources))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub norm: f64,
    pub update: f64,
    pub relative_update: f64,
    /// `‖ΔE_{k+1}‖/‖ΔE_k‖`.
    pub ratio: Option<f64>,
    pub source_mean: f64,
}

/// Outcome of [`solve_fixed_point`].
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointRun {
    #[serde(skip)]
    pub iterate: FieldIterate,
    /// `h` evaluated at the final iterate.
    #[serde(skip)]
    pub sources: SourceTerms,
    pub resolved: Resolved,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub max_ratio: Option<f64>,
    pub ball_radius: f64,
    pub final_norm: f64,
    pub residual: Option<ResidualReport>,
    pub field_fit: Option<DecayFit>,
    pub warnings: Vec<String>,
}

/// Iterates `E ← T(E)` from `E = 0` until `‖E_{k+1} − E_k‖ < tol·‖E_{k+1}‖`.
pub fn solve_fixed_point(problem: &NonlinearProblem) -> Result<FixedPointRun> {
    let config = &problem.config;
    let mut e = problem.zero_iterate();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut radius = f64::INFINITY;
    let mut outside = 0;
    let mut converged = false;
    for k in 1..=config.max_iter {
        let (next, sources) = apply_t(problem, &e)?;
        let update = next.distance(&e);
        let relative_update = if next.norm > 0.0 { update / next.norm } else { 0.0 };
        if k == 1 {
            radius = 2.0 * next.norm;
        }
        let ratio = history.last().and_then(|h| (h.update > 0.0).then(|| update / h.update));
        if let Some(r) = ratio {
            if r > 0.9 {
                warnings.push(format!("iteration {k}: contraction ratio {r:.3} exceeds 0.9"));
            }
        }
        if next.norm > radius {
            outside += 1;
            if outside >= 2 {
                return Err(Error::Divergence(format!(
                    "norm {:.3e} left the ball of radius {radius:.3e} twice in a row",
                    next.norm
                )));
            }
        } else {
            outside = 0;
        }
        history.push(IterationRecord {
            iteration: k,
            norm: next.norm,
            update,
            relative_update,
            ratio,
            source_mean: sources.relative_mean,
        });
        e = next;
        if relative_update < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("no convergence in {} iterations", config.max_iter));
    }
    let sources = assemble_sources(problem, &e)?;
    let tol = 1e-4 * problem.g.eps.abs();
    let residual = match residual_n10a(&problem.spec, &e.field, &sources.total, tol) {
        Ok(r) => Some(r),
        Err(err) => {
            warnings.push(format!("residual check failed: {err}"));
            None
        }
    };
    let max_ratio = history.iter().filter_map(|h| h.ratio).reduce(f64::max);
    Ok(FixedPointRun {
        field_fit: e.decay_fit(),
        final_norm: e.norm,
        iterate: e,
        sources,
        resolved: problem.resolved,
        history,
        converged,
        max_ratio,
        ball_radius: radius,
        residual,
        warnings,
    })
}

/// `f` on the `x × v` grid at one node, row-major in `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSnapshot {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub f: Vec<f64>,
}

impl DistributionSnapshot {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "v", "f"])?;
        let nz = self.x.len();
        for (k, v) in self.v.iter().enumerate() {
            for (j, x) in self.x.iter().enumerate() {
                w.write_record([x.to_string(), v.to_string(), self.f[k * nz + j].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhysicalState {
    /// `ρ = ∫ f dv − 1` in `value`, `E_x` of the iterate in `dvalue`.
    #[serde(skip)]
    pub rho: SpaceTimeField,
    #[serde(skip)]
    pub snapshots: Vec<DistributionSnapshot>,
    /// `sup |ρ − E_x|`.
    pub gauss_defect: f64,
    pub rho_fit: Option<DecayFit>,
    pub field_fit: Option<DecayFit>,
}

/// `f(x,v,t) = f_e(V_∞) + g_∞(Z_∞, V_∞)` along backward characteristics,
/// `ρ` on the whole grid and `f` at the nodes nearest `snapshot_times`.
pub fn reconstruct_physical(
    problem: &NonlinearProblem,
    e: &FieldIterate,
    snapshot_times: &[f64],
) -> Result<PhysicalState> {
    problem.check_iterate(e)?;
    let nz = problem.x.len();
    let wanted: Vec<usize> = snapshot_times.iter().map(|&t| problem.grid.nearest(t)).collect();
    let mut rho = SpaceTimeField::zeros(problem.x.clone(), problem.grid);
    rho.dvalue = e.field.dvalue.clone();
    let mut snapshots = Vec::new();
    problem.sweep(&e.modes, |i, maps| {
        let (_, full) = problem.density(i, maps);
        rho.value[i * nz..(i + 1) * nz].copy_from_slice(&full);
        if wanted.contains(&i) {
            let t = problem.grid.at(i);
            let mut f = vec![0.0; maps.a.len()];
            for (k, &v) in problem.v.iter().enumerate() {
                for (j, &x) in problem.x.iter().enumerate() {
                    let at = k * nz + j;
                    let vel = C64::from(v + maps.b[at]);
                    f[at] = problem.spec.fe(vel).re + problem.g.g(x - v * t + maps.a[at], vel).re;
                }
            }
            snapshots.push(DistributionSnapshot {
                t,
                x: problem.x.clone(),
                v: problem.v.clone(),
                f,
            });
        }
        Ok(())
    })?;
    snapshots.reverse();
    let gauss_defect = rho
        .value
        .iter()
        .zip(&rho.dvalue)
        .fold(0.0f64, |m, (r, ex)| m.max((r - ex).abs()));
    let times = problem.grid.times();
    let window = fit_window(&times, &e.field.sup_value());
    Ok(PhysicalState {
        gauss_defect,
        rho_fit: fit_decay(&times, &rho.sup_value(), window).ok(),
        field_fit: fit_decay(&times, &e.field.sup_value(), window).ok(),
        rho,
        snapshots,
    })
}

/// Writes `e.csv`, `h.csv` and `convergence.json`.
pub fn write_run(run: &FixedPointRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.iterate.field.write_csv(&dir.join("e.csv"))?;
    run.sources.total.write_csv(&dir.join("h.csv"))?;
    write_json(&dir.join("convergence.json"), run)
}

/// Writes `rho.csv` (ρ and `E_x`), `physical.json` and one `f_<t>.csv` per snapshot.
pub fn write_physical(state: &PhysicalState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    state.rho.write_csv(&dir.join("rho.csv"))?;
    for s in &state.snapshots {
        s.write_csv(&dir.join(format!("f_{:.3}.csv", s.t)))?;
    }
    write_json(&dir.join("physical.json"), state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green_function::solve_field;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    const EPS: f64 = 1e-3;

    fn small() -> &'static NonlinearProblem {
        static PROBLEM: OnceLock<NonlinearProblem> = OnceLock::new();
        PROBLEM.get_or_init(|| {
            let config = NonlinearConfig {
                gamma: Some(0.36),
                t_max: Some(20.0),
                step: 0.05,
                z_points: 16,
                green: GreenConfig {
                    z_points: 16,
                    ..GreenConfig::default()
                },
                ..NonlinearConfig::default()
            };
            NonlinearProblem::new(
                &EquilibriumSpec::maxwellian(),
                &PerturbationSpec::gaussian_cosine(EPS),
                &config,
            )
            .unwrap()
        })
    }

    /// `T(0)`, the linear response to `ψ`.
    fn first() -> &'static FieldIterate {
        static FIRST: OnceLock<FieldIterate> = OnceLock::new();
        FIRST.get_or_init(|| apply_t(small(), &small().zero_iterate()).unwrap().0)
    }

    fn scaled(e: &FieldIterate, s: f64) -> FieldIterate {
        let mut modes = e.modes.clone();
        modes.scale(s);
        FieldIterate::from_modes(modes, &e.field.z, e.gamma, 0)
    }

    fn sup(v: &[f64]) -> f64 {
        v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `ε e^{−γs} cos z` on the problem grids.
    fn cosine_field(problem: &NonlinearProblem, amplitude: f64, rate: f64) -> FieldIterate {
        let mut modes = ModalField::zeros(problem.grid, problem.resolved.n_modes);
        for n in [1, -1] {
            *modes.mode_mut(n) = problem
                .grid
                .times()
                .iter()
                .map(|t| C64::from(0.5 * amplitude * (-rate * t).exp()))
                .collect();
        }
        FieldIterate::from_modes(modes, &problem.x, problem.resolved.gamma, 0)
    }

    #[test]
    fn moments_agree_across_the_switch() {
        for theta in [0.999999, 1.0, -1.0, 0.3, 7.5] {
            let mu = moments(theta);
            for p in 0..5 {
                let n = 20000;
                let direct: C64 = (0..n)
                    .map(|k| {
                        let tau = (k as f64 + 0.5) / n as f64;
                        tau.powi(p as i32) * C64::from_polar(1.0, theta * tau)
                    })
                    .sum::<C64>()
                    / n as f64;
                assert!((mu[p] - direct).norm() < 1e-8, "θ {theta} p {p}");
            }
        }
    }

    #[test]
    fn lagrange_basis_reproduces_cubics() {
        for nodes in STENCILS {
            let c = lagrange_coefficients(&nodes);
            let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
            for p in 0..4 {
                let combined: f64 = (0..4).map(|r| c[r][p] * f(nodes[r])).sum();
                assert!((combined - [1.0, -2.0, 0.0, 0.5][p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_field_is_exact() {
        let problem = small();
        let zero = problem.zero_iterate();
        let sources = assemble_sources(problem, &zero).unwrap();
        assert!(sources.l.value.iter().all(|v| *v == 0.0));
        assert!(sources.rtilde.value.iter().all(|v| *v == 0.0));
        assert_eq!(sources.total.value, problem.psi.value);

        let ends = char_endpoints(problem, &zero, &[0, 50]).unwrap();
        let nz = problem.x.len();
        for (slot, &t) in ends.times.iter().enumerate() {
            for (k, &v) in problem.v.iter().enumerate() {
                for (j, &x) in problem.x.iter().enumerate() {
                    assert_eq!(ends.z_inf[slot][k * nz + j], 0.0 + (x - v * t));
                    assert_eq!(ends.v_inf[slot][k * nz + j], v);
                }
            }
        }
        let p = integrate_characteristics(&zero, 3.0, 1.2, -0.7, 1e-10).unwrap();
        assert_eq!((p.z_inf, p.v_inf), (1.2, -0.7));
        let p = integrate_characteristics(first(), problem.grid.t_end(), 0.4, 2.0, 1e-10).unwrap();
        assert_eq!((p.z_inf, p.v_inf), (0.4, 2.0));
    }

    #[test]
    fn t_of_zero_is_the_linear_solve() {
        let problem = small();
        let linear = solve_field(&problem.table, &problem.psi, None).unwrap();
        let e = first();
        assert_eq!(e.field.value, linear.field.value);
        assert_eq!(e.field.dvalue, linear.field.dvalue);
        assert_eq!(e.iteration, 1);
    }

    #[test]
    fn sweep_matches_adaptive_characteristics() {
        let problem = small();
        let e = first();
        let nodes = [0usize, 7, 30];
        let ends = char_endpoints(problem, e, &nodes).unwrap();
        let nz = problem.x.len();
        let mut moved = 0.0f64;
        for (slot, &i) in ends.indices.iter().enumerate() {
            let t = problem.grid.at(i);
            for k in [3usize, 60, 120, 140, 200] {
                for j in [0usize, 5, 11] {
                    let (x, v) = (problem.x[j], problem.v[k]);
                    let p = integrate_characteristics(e, t, x - v * t, v, 1e-12).unwrap();
                    let at = k * nz + j;
                    moved = moved.max((p.v_inf - v).abs());
                    assert!((p.z_inf - ends.z_inf[slot][at]).abs() < 1e-9, "Z at t {t} v {v}");
                    assert!((p.v_inf - ends.v_inf[slot][at]).abs() < 1e-9, "V at t {t} v {v}");
                }
            }
        }
        assert!(moved > 1e-5);
    }

    #[test]
    fn velocity_shift_is_the_field_integral_to_first_order() {
        let problem = small();
        let (amplitude, rate) = (1e-3, 1.5);
        let e = cosine_field(problem, amplitude, rate);
        let horizon = problem.grid.t_end();
        for (t, z, v) in [(0.0, 0.3, 0.0), (1.0, 2.0, 0.7), (2.5, 5.0, -1.3)] {
            // ∫_t^T ε e^{−γs} cos(z + vs) ds
            let c = C64::new(-rate, v);
            let integral = (amplitude * C64::from_polar(1.0, z) * ((c * horizon).exp() - (c * t).exp()) / c).re;
            let p = integrate_characteristics(&e, t, z, v, 1e-12).unwrap();
            assert!(
                (p.v_inf - v - integral).abs() < 10.0 * amplitude * amplitude,
                "{t} {z} {v}"
            );
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let e = scaled(first(), 2e3);
        assert!(matches!(apply_t(small(), &e), Err(Error::BlowUp { .. })));
        let blown = small()
            .x
            .iter()
            .filter(|&&z| {
                matches!(
                    integrate_characteristics(&e, 0.0, z, 0.0, 1e-6),
                    Err(Error::BlowUp { .. })
                )
            })
            .count();
        assert!(blown > 0);
    }

    #[test]
    fn l_vanishes_without_perturbation_and_obeys_its_bound() {
        let problem = small();
        let e = first();
        let bare = problem.with_eps(0.0).unwrap();
        let sources = assemble_sources(&bare, e).unwrap();
        assert!(sources.l.value.iter().all(|v| *v == 0.0));

        let sources = assemble_sources(problem, e).unwrap();
        let nz = problem.x.len();
        let worst = (0..problem.grid.len)
            .map(|i| sup(&sources.l.value[i * nz..(i + 1) * nz]) * (e.gamma * problem.grid.at(i)).exp())
            .fold(0.0, f64::max);
        let constant = worst / (EPS * e.norm);
        assert!(constant > 0.0 && constant < 10.0, "C = {constant}");
    }

    #[test]
    fn pointwise_sources_match_the_assembled_fields() {
        let problem = small();
        let e = first();
        let sources = assemble_sources(problem, e).unwrap();
        let nz = problem.x.len();
        let ends = char_endpoints(problem, e, &[0, 12]).unwrap();
        for i in [0usize, 12] {
            let t = problem.grid.at(i);
            for j in [0usize, 3, 9] {
                let z = problem.x[j];
                let l = source_l(problem, e, z, t).unwrap();
                assert!((l - sources.l.value[i * nz + j]).abs() < 1e-15);
                let r = source_rtilde(problem, e, &ends, z, t).unwrap();
                assert!((r - sources.rtilde.value[i * nz + j]).abs() < 1e-14, "{r}");
                let psi = source_psi(&problem.g, z, t).unwrap();
                assert!((psi - EPS * z.cos() * (-t * t / 4.0).exp()).abs() < 1e-14);
            }
        }
        assert!(source_l(problem, e, 0.0, 0.025).is_err());
    }

    #[test]
    fn l_forms_agree_near_the_floor() {
        let problem = small();
        let mut lowered = problem.clone();
        lowered.config.t_floor = 1e-9;
        for i in [1usize, 3] {
            let a = problem.l_modes_at(&first().modes, i);
            let b = lowered.l_modes_at(&first().modes, i);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn rtilde_is_quadratic() {
        let problem = small();
        let e = first();
        let full = assemble_sources(problem, e).unwrap();
        let half = assemble_sources(problem, &scaled(e, 0.5)).unwrap();
        let ratio = sup(&full.rtilde.value) / sup(&half.rtilde.value);
        assert!((ratio - 4.0).abs() < 1.0, "ratio {ratio}");

        let nz = problem.x.len();
        let worst = (0..problem.grid.len)
            .map(|i| {
                let t = problem.grid.at(i);
                sup(&full.rtilde.value[i * nz..(i + 1) * nz]) * (2.0 * e.gamma * t).exp() / (t + 1.0).powi(2)
            })
            .fold(0.0, f64::max);
        assert!(worst / (e.norm * e.norm) < 10.0);
    }

    #[test]
    fn mean_violations_are_errors() {
        let mut strict = small().clone();
        strict.config.mean_tolerance = 1e-30;
        assert!(matches!(apply_t(&strict, first()), Err(Error::MeanViolation { .. })));
    }

    #[test]
    fn fixed_point_converges_and_reconstructs() {
        let problem = small();
        let run = solve_fixed_point(problem).unwrap();
        assert!(run.converged);
        assert!(run.history.len() <= 6);
        assert!(run.max_ratio.unwrap() < 0.1);
        let residual = run.residual.as_ref().unwrap();
        assert!(residual.max_residual < 1e-4 * EPS, "{}", residual.max_residual);
        let physical = reconstruct_physical(problem, &run.iterate, &[0.0, 2.0]).unwrap();
        assert!(physical.gauss_defect < 1e-4 * EPS);
        assert_eq!(physical.snapshots.len(), 2);
        let (a, b) = (physical.rho_fit.unwrap().rate, physical.field_fit.unwrap().rate);
        assert!((a - b).abs() < 0.1 * b);

        let dir = tempfile::tempdir().unwrap();
        write_run(&run, dir.path()).unwrap();
        write_physical(&physical, dir.path()).unwrap();
        for f in [
            "e.csv",
            "h.csv",
            "convergence.json",
            "rho.csv",
            "physical.json",
            "f_0.000.csv",
            "f_2.000.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn equilibrium_alone_reconstructs_to_itself() {
        let problem = small().with_eps(0.0).unwrap();
        let zero = problem.zero_iterate();
        let physical = reconstruct_physical(&problem, &zero, &[1.0]).unwrap();
        assert!(sup(&physical.rho.value) < 1e-14);
        let snap = &physical.snapshots[0];
        let nz = snap.x.len();
        for (k, &v) in snap.v.iter().enumerate() {
            assert_eq!(snap.f[k * nz], problem.spec.fe(C64::from(v)).re);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let bad = [
            NonlinearConfig {
                step: 0.0,
                ..NonlinearConfig::default()
            },
            NonlinearConfig {
                z_points: 4,
                ..NonlinearConfig::default()
            },
            NonlinearConfig {
                gamma: Some(-1.0),
                ..NonlinearConfig::default()
            },
            NonlinearConfig {
                max_iter: 0,
                ..NonlinearConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    fn random_field(values: &[f64]) -> SpaceTimeField {
        let grid = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let mut f = SpaceTimeField::zeros(vec![0.0, 1.0, 2.0], grid);
        f.value.copy_from_slice(&values[..12]);
        f.dvalue.copy_from_slice(&values[12..]);
        f
    }

    proptest! {
        #[test]
        fn weighted_norm_is_a_norm(
            a in proptest::collection::vec(-1.0f64..1.0, 24),
            b in proptest::collection::vec(-1.0f64..1.0, 24),
            s in -3.0f64..3.0,
        ) {
            let (fa, fb) = (random_field(&a), random_field(&b));
            let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let na = weighted_norm(&fa, 0.4);
            let nb = weighted_norm(&fb, 0.4);
            prop_assert!((weighted_norm(&random_field(&scaled), 0.4) - s.abs() * na).abs() <= 1e-12 * (1.0 + na));
            prop_assert!(weighted_norm(&random_field(&sum), 0.4) <= na + nb + 1e-12);
            prop_assert!(na >= 0.0);
        }
    }
}
