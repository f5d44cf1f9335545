//! Fundamental solution of the field equation linearized at `t = ∞`.
//!
//! The per-mode coefficients are
//! `c_n(t) = ∫ e^{i|n|ηt} ψ(η)/(1 − ψ(η)/(|n|n)) dη` with `ψ = ψ_{sign n}`.
//! For `t ≤ 0` they are split as `c_n = −2πi K(nt) + Ω_n(t)`; the first part
//! is a velocity transform and `Ω_n` has an `O(η⁻⁴)` integrand, summed by the
//! trapezoid rule on a line below the axis. For `t > 0` the full integrand is
//! summed on a line above the axis, which should return zero.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispersion::{dispersion_integral, find_roots, kernel_k, SearchRegion, Verdict};
use crate::equilibria::EquilibriumSpec;
use crate::numerics::{
    fit_decay, gregory_weight, gregory_weights, integrate_interval, periodic_grid, write_json, DecayFit, ModalField,
    SpaceTimeField, TimeGrid,
};
use crate::{Error, Result, C64};

const I: C64 = C64::new(0.0, 1.0);
const NEGLIGIBLE: f64 = 1e-18;
/// Highest mode checked by the argument principle; above it the margin is
/// bounded directly from `max |D|` on the sampled band.
const SEARCHED_MODES: i64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreenConfig {
    pub n_max: i64,
    /// Half-length `H` of the sampled η-lines.
    pub eta_cutoff: f64,
    pub eta_step: f64,
    /// The table covers `t ∈ [−horizon, positive_span]`.
    pub horizon: f64,
    pub positive_span: f64,
    pub step: f64,
    pub z_points: usize,
    /// Bound on the estimated series truncation error of `Q_z`.
    pub tolerance: f64,
    /// Smallest admissible `|1 − ψ/(|n|n)|` on the sampled lines.
    pub margin_floor: f64,
}

impl Default for GreenConfig {
    fn default() -> Self {
        Self {
            n_max: 16,
            eta_cutoff: 200.0,
            eta_step: 0.05,
            horizon: 30.0,
            positive_span: 1.0,
            step: 0.02,
            z_points: 64,
            tolerance: 1e-3,
            margin_floor: 1e-3,
        }
    }
}

impl GreenConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_max >= 1
            && self.eta_cutoff > 10.0
            && self.eta_step > 0.0
            && self.eta_step < 1.0
            && self.horizon > 0.0
            && self.positive_span >= 0.0
            && self.step > 0.0
            && self.z_points >= 8
            && self.tolerance > 0.0
            && self.margin_floor > 0.0;
        if !ok {
            return Err(Error::InvalidSpec(format!("bad green table configuration {self:?}")));
        }
        Ok(())
    }
}

/// Samples of `D(x + i·im)` on a symmetric grid `x_k = −H + k·h`.
struct LineSamples {
    im: f64,
    x: Vec<f64>,
    d: Vec<C64>,
}

impl LineSamples {
    fn new(spec: &EquilibriumSpec, im: f64, cutoff: f64, step: f64) -> Result<Self> {
        let half = (cutoff / step).round() as i64;
        let x: Vec<f64> = (-half..=half).map(|k| k as f64 * step).collect();
        let d = x
            .par_iter()
            .map(|&xk| dispersion_integral(spec, C64::new(xk, im)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { im, x, d })
    }

    fn eta(&self, k: usize) -> C64 {
        C64::new(self.x[k], self.im)
    }

    /// `ψ₋(η_k) = −D(η_k)`; `ψ₊(η_k) = conj D(−η̄_k)` and `−η̄_k` is the mirror node.
    fn psi(&self, k: usize, n: i64) -> C64 {
        if n > 0 {
            self.d[self.d.len() - 1 - k].conj()
        } else {
            -self.d[k]
        }
    }

    fn max_abs(&self) -> f64 {
        self.d.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}

/// Trapezoid sums of `e^{i|n|ηt} F(η)` along one line, for `t = ±j·Δt`.
struct CoefficientLine {
    samples: LineSamples,
    /// Reference pole: `m²/(η − p)⁴` has the same decay as the integrand
    /// and integrates to zero along the line for the sign of `t` used.
    pole: C64,
}

impl CoefficientLine {
    /// Trapezoid weights `h·(ψ²/(s(1−ψ/s)) − m²/(s(η−p)⁴))`, `s = |n|n`.
    fn weights(&self, n: i64, mass: f64, floor: f64) -> Result<Vec<C64>> {
        let s = (n.abs() * n) as f64;
        let h = self.samples.x[1] - self.samples.x[0];
        (0..self.samples.x.len())
            .map(|k| {
                let psi = self.samples.psi(k, n);
                let denom = 1.0 - psi / s;
                if denom.norm() < floor {
                    return Err(Error::Margin {
                        value: denom.norm(),
                        threshold: floor,
                    });
                }
                let eta = self.samples.eta(k);
                let reference = mass * mass / (s * (eta - self.pole).powi(4));
                Ok(h * (psi * psi / (s * denom) - reference))
            })
            .collect()
    }

    /// `Σ_k w_k e^{i|n|η_k t_j}` for `t_j = direction·j·Δt`, `j = 0..count`.
    fn sweep(&self, weights: &[C64], n: i64, dt: f64, direction: f64, count: usize) -> Vec<C64> {
        let a = n.abs() as f64;
        let steps: Vec<C64> = (0..weights.len())
            .map(|k| (I * a * self.samples.eta(k) * dt * direction).exp())
            .collect();
        let scale: f64 = weights.iter().map(|w| w.norm()).sum();
        let decay = (-a * self.samples.im.abs() * dt).exp();
        let mut current = weights.to_vec();
        let mut out = Vec::with_capacity(count);
        let mut envelope = scale;
        for _ in 0..count {
            if envelope < NEGLIGIBLE {
                out.push(C64::new(0.0, 0.0));
                continue;
            }
            out.push(current.iter().sum());
            for (c, s) in current.iter_mut().zip(&steps) {
                *c *= s;
            }
            envelope *= decay;
        }
        out
    }
}

/// Smallest `ξ*` past which `|ξ f̂_e(ξ)| < 10⁻¹⁶` on a sampled scan.
fn transform_cutoff(spec: &EquilibriumSpec) -> f64 {
    let mut last = 1.0;
    let mut xi = 0.0;
    while xi < 1e4 {
        if xi * spec.transform_exact(xi).norm() >= 1e-16 {
            last = xi;
        }
        if xi > 2.0 * last + 20.0 {
            break;
        }
        xi += 0.25;
    }
    last + 1.0
}

/// The sampled fundamental solution.
#[derive(Debug, Clone, Serialize)]
pub struct GreenTable {
    pub spec: EquilibriumSpec,
    pub config: GreenConfig,
    pub nu0: f64,
    /// Depth of the lower η-line.
    pub line_depth: f64,
    /// Height of the upper η-line.
    pub line_height: f64,
    pub grid: TimeGrid,
    /// Index of `t = 0` in `grid`.
    pub origin: usize,
    pub z: Vec<f64>,
    /// `c_n` and `Ω_n` on `grid`, `n = −N..N` (row `n + N`, row `N` unused).
    #[serde(skip)]
    pub coefficients: Vec<Vec<C64>>,
    #[serde(skip)]
    pub omegas: Vec<Vec<C64>>,
    /// `K(mΔt)` for the closed part of the series.
    #[serde(skip)]
    kernel: VelocityKernel,
    /// `Q` in `value` and `Q_z` in `dvalue`.
    #[serde(skip)]
    pub field: SpaceTimeField,
    /// Estimated truncation error of the `Ω_n` series at `N`.
    pub tail_estimate: f64,
    /// `sup |Q_z|` over the `t > 0` slices.
    pub causality_defect: f64,
    /// Fitted `a` in `|Q_z| ≤ C e^{a t}`, `t ≤ −1`.
    pub far_past: Option<DecayFit>,
}

/// Builds the table after checking stability of `spec`.
pub fn build_qz(spec: &EquilibriumSpec, config: &GreenConfig) -> Result<GreenTable> {
    GreenTable::build(spec, config)
}

impl GreenTable {
    pub fn build(spec: &EquilibriumSpec, config: &GreenConfig) -> Result<Self> {
        config.validate()?;
        let sampler = CoefficientSampler::new(spec, config)?;
        let back = (config.horizon / config.step).round() as usize;
        let ahead = (config.positive_span / config.step).round() as usize;
        let grid = TimeGrid::new(-(back as f64) * config.step, config.step, back + ahead + 1)?;
        let kernel = VelocityKernel::new(spec, config.step, usize::MAX)?;
        let n_max = config.n_max;
        let rows: Vec<(i64, Vec<C64>, Vec<C64>)> = (-n_max..=n_max)
            .into_par_iter()
            .map(|n| {
                if n == 0 {
                    let zero = vec![C64::new(0.0, 0.0); grid.len];
                    return Ok((n, zero.clone(), zero));
                }
                let lower = sampler.omega_lower(n, config.step, back + 1)?;
                let upper = sampler.upper(n, config.step, ahead + 1)?;
                let mut c = vec![C64::new(0.0, 0.0); grid.len];
                let mut omega = vec![C64::new(0.0, 0.0); grid.len];
                for j in 0..=back {
                    let i = back - j;
                    omega[i] = lower[j];
                    c[i] = -2.0 * PI * I * kernel.at(-n * j as i64) + lower[j];
                }
                for j in 1..=ahead {
                    omega[back + j] = upper[j];
                    c[back + j] = upper[j];
                }
                Ok((n, c, omega))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut coefficients = vec![vec![]; (2 * n_max + 1) as usize];
        let mut omegas = vec![vec![]; (2 * n_max + 1) as usize];
        for (n, c, o) in rows {
            coefficients[(n + n_max) as usize] = c;
            omegas[(n + n_max) as usize] = o;
        }
        let mut table = Self {
            spec: spec.clone(),
            config: *config,
            nu0: sampler.nu0,
            line_depth: -sampler.lower.samples.im,
            line_height: sampler.upper.samples.im,
            grid,
            origin: back,
            z: periodic_grid(config.z_points),
            coefficients,
            omegas,
            kernel,
            field: SpaceTimeField::zeros(vec![], grid),
            tail_estimate: 0.0,
            causality_defect: 0.0,
            far_past: None,
        };
        table.tail_estimate = table.omega_tail();
        if table.tail_estimate > config.tolerance {
            return Err(Error::NonConvergence {
                what: "Q_z mode series",
                estimate: table.tail_estimate,
                tol: config.tolerance,
            });
        }
        table.field = table.sample(&table.z.clone());
        table.causality_defect = (table.origin + 1..grid.len)
            .map(|i| table.field.dslice(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max);
        table.far_past = table.fit_far_past().ok();
        Ok(table)
    }

    pub fn n_max(&self) -> i64 {
        self.config.n_max
    }

    fn row(&self, n: i64) -> usize {
        (n + self.config.n_max) as usize
    }

    /// `c_n(t_i)`.
    pub fn coefficient(&self, n: i64, i: usize) -> C64 {
        self.coefficients[self.row(n)][i]
    }

    /// `Ω_n(t_i)`; for `t > 0` the full coefficient.
    pub fn omega(&self, n: i64, i: usize) -> C64 {
        self.omegas[self.row(n)][i]
    }

    /// `c_n(−j·Δt)`, zero past the horizon.
    pub fn coefficient_back(&self, n: i64, j: usize) -> C64 {
        if j > self.origin {
            C64::new(0.0, 0.0)
        } else {
            self.coefficients[self.row(n)][self.origin - j]
        }
    }

    fn omega_tail(&self) -> f64 {
        let n = self.config.n_max;
        let c = [n, -n]
            .iter()
            .flat_map(|&m| self.omegas[self.row(m)][..=self.origin].iter())
            .fold(0.0f64, |a, v| a.max(v.norm()))
            * (n * n) as f64;
        c / (4.0 * PI * PI * (n * n) as f64)
    }

    /// `(Q, Q_z, Q_zz)` at `z` on slice `i`.
    pub fn evaluate(&self, i: usize, z: f64) -> (f64, f64, f64) {
        let j = self.origin as i64 - i as i64;
        let mut q = 0.0;
        let mut qz = 0.0;
        let mut qzz = 0.0;
        if j > 0 {
            // Closed part: −(i/2π) Σ_{n≠0} e^{inz} K(nt)/n, summed in conjugate pairs.
            let base = C64::from_polar(1.0, z);
            let mut power = base;
            let mut n = 1i64;
            while ((n * j) as usize) < self.kernel.values.len() {
                let term = power * self.kernel.at(-n * j);
                let nf = n as f64;
                q -= term.re / (PI * nf * nf);
                qz += term.im / (PI * nf);
                qzz += term.re / PI;
                power *= base;
                n += 1;
            }
        }
        let norm = 1.0 / (4.0 * PI * PI);
        for n in (-self.config.n_max..=self.config.n_max).filter(|&n| n != 0) {
            let nf = n as f64;
            let e = C64::from_polar(1.0, nf * z);
            let w = self.omega(n, i) * e * norm;
            q += (w / (I * nf * nf)).re;
            qz += (w / nf).re;
            qzz += (w * I).re;
        }
        (q, qz, qzz)
    }

    fn sample(&self, z: &[f64]) -> SpaceTimeField {
        let mut field = SpaceTimeField::zeros(z.to_vec(), self.grid);
        let nz = z.len();
        let rows: Vec<Vec<(f64, f64)>> = (0..self.grid.len)
            .into_par_iter()
            .map(|i| {
                z.iter()
                    .map(|&zj| {
                        let (q, qz, _) = self.evaluate(i, zj);
                        (q, qz)
                    })
                    .collect()
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            for (j, (q, qz)) in row.into_iter().enumerate() {
                field.value[i * nz + j] = q;
                field.dvalue[i * nz + j] = qz;
            }
        }
        field
    }

    /// `(1/2π) ∫₀^{2π} Q_z(z, t_i) dz` by adaptive quadrature.
    pub fn slice_mean(&self, i: usize) -> Result<f64> {
        let pieces = 16;
        let mut total = 0.0;
        for k in 0..pieces {
            let a = 2.0 * PI * k as f64 / pieces as f64;
            let b = 2.0 * PI * (k + 1) as f64 / pieces as f64;
            total += integrate_interval(|z| self.evaluate(i, z).1, a, b, 1e-13)?;
        }
        Ok(total / (2.0 * PI))
    }

    fn fit_far_past(&self) -> Result<DecayFit> {
        let mut times = Vec::new();
        let mut sup = Vec::new();
        for i in 0..=self.origin {
            let t = self.grid.at(i);
            if t <= -1.0 {
                times.push(-t);
                sup.push(self.field.dslice(i).iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
        }
        fit_decay(&times, &sup, [1.0, self.config.horizon])
    }

    /// Writes `green.json` (header), `q.csv` and `qz.csv` (rows `t`, columns `z`).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("green.json"), self)?;
        for (name, data) in [("q.csv", &self.field.value), ("qz.csv", &self.field.dvalue)] {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            let mut header = vec!["t".to_string()];
            header.extend(self.z.iter().map(|z| format!("{z:.17e}")));
            w.write_record(&header)?;
            let nz = self.z.len();
            for i in 0..self.grid.len {
                let mut rec = vec![format!("{:.17e}", self.grid.at(i))];
                rec.extend(data[i * nz..(i + 1) * nz].iter().map(|v| format!("{v:.17e}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Lines and stability data shared by all coefficients of one equilibrium.
struct CoefficientSampler {
    nu0: f64,
    mass: f64,
    floor: f64,
    lower: CoefficientLine,
    upper: CoefficientLine,
}

impl CoefficientSampler {
    fn new(spec: &EquilibriumSpec, config: &GreenConfig) -> Result<Self> {
        let searched = config.n_max.min(SEARCHED_MODES);
        let report = find_roots(spec, &SearchRegion::upper_half_plane(spec, searched)?)?;
        if report.verdict != Verdict::Stable {
            return Err(Error::NotStable(format!(
                "dispersion verdict {:?} (θ = {:.3e}, ν₀ = {:.3})",
                report.verdict, report.theta, report.nu0
            )));
        }
        let nu0 = report.nu0;
        // The trapezoid error is set by the distance down to the nearest zero.
        let depth = 0.15 * nu0;
        let height = 1.0;
        let lower = LineSamples::new(spec, -depth, config.eta_cutoff, config.eta_step)?;
        let upper = LineSamples::new(spec, height, config.eta_cutoff, config.eta_step)?;
        if config.n_max > searched {
            // Above the searched modes zeros need |D| ≥ n², excluded by the maximum modulus.
            let bound = lower.max_abs().max(upper.max_abs());
            let n = (searched + 1) as f64;
            if n * n <= 2.0 * bound {
                return Err(Error::Margin {
                    value: n * n - bound,
                    threshold: bound,
                });
            }
        }
        Ok(Self {
            nu0,
            mass: spec.mass(),
            floor: config.margin_floor,
            lower: CoefficientLine {
                samples: lower,
                pole: C64::new(0.0, 1.0 - depth),
            },
            upper: CoefficientLine {
                samples: upper,
                pole: C64::new(0.0, height - 1.0),
            },
        })
    }

    /// `Ω_n(−jΔt)`, `j = 0..count`.
    fn omega_lower(&self, n: i64, dt: f64, count: usize) -> Result<Vec<C64>> {
        let w = self.lower.weights(n, self.mass, self.floor)?;
        Ok(self.lower.sweep(&w, n, dt, -1.0, count))
    }

    /// `c_n(jΔt)`, `j = 0..count`, from the line above the axis. There
    /// `ψ/(1−ψ/s) = ψ + ψ²/(s(1−ψ/s))` and the `ψ` part integrates to zero
    /// in closed form, so only the `Ω`-type part is summed.
    fn upper(&self, n: i64, dt: f64, count: usize) -> Result<Vec<C64>> {
        let w = self.upper.weights(n, self.mass, self.floor)?;
        Ok(self.upper.sweep(&w, n, dt, 1.0, count))
    }
}

/// `c_n(t)` for a single mode and time.
pub fn mode_coefficient(spec: &EquilibriumSpec, n: i64, t: f64) -> Result<C64> {
    if n == 0 {
        return Err(Error::InvalidSpec("c_n is defined for n ≠ 0".into()));
    }
    let config = GreenConfig {
        n_max: n.abs(),
        ..GreenConfig::default()
    };
    let sampler = CoefficientSampler::new(spec, &config)?;
    if t > 0.0 {
        return Ok(sampler.upper(n, t, 2)?[1]);
    }
    let omega = if t == 0.0 {
        sampler.omega_lower(n, 1.0, 1)?[0]
    } else {
        sampler.omega_lower(n, -t, 2)?[1]
    };
    Ok(-2.0 * PI * I * kernel_k(spec, n as f64 * t)? + omega)
}

/// `Ω_n(t) = c_n(t) + 2πi K(nt)` for `t ≤ 0`.
pub fn omega_n(spec: &EquilibriumSpec, n: i64, t: f64) -> Result<C64> {
    if t > 0.0 {
        return Err(Error::InvalidSpec("Ω_n is split off for t ≤ 0 only".into()));
    }
    Ok(mode_coefficient(spec, n, t)? + 2.0 * PI * I * kernel_k(spec, n as f64 * t)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimilarReport {
    /// `(t, sup|R|, sup|R_z|)` over `|z| ≤ π`.
    pub slices: Vec<(f64, f64, f64)>,
    pub sup: f64,
    /// Ratio of the residual near `t = 0⁻` to the one at `t = −1`.
    pub growth: f64,
    pub bounded: bool,
}

/// Residual of the self-similar core, `R = Q_z + f_e(z/t)`, on the slices
/// with `−1 ≤ t < 0`.
pub fn selfsimilar_residual(table: &GreenTable) -> SelfSimilarReport {
    let zs: Vec<f64> = (0..=256).map(|k| -PI + 2.0 * PI * k as f64 / 256.0).collect();
    let slices: Vec<(f64, f64, f64)> = (0..table.origin)
        .filter(|&i| table.grid.at(i) >= -1.0 - 1e-12)
        .map(|i| {
            let t = table.grid.at(i);
            let (mut r, mut rz) = (0.0f64, 0.0f64);
            for &z in &zs {
                let (_, qz, qzz) = table.evaluate(i, z);
                let v = C64::new(z / t, 0.0);
                r = r.max((qz + table.spec.fe(v).re).abs());
                rz = rz.max((qzz + table.spec.fe_deriv(v).re / t).abs());
            }
            (t, r, rz)
        })
        .collect();
    let sup = slices.iter().fold(0.0f64, |m, s| m.max(s.1 + s.2));
    let first = slices.first().map_or(0.0, |s| s.1 + s.2);
    let last = slices.last().map_or(0.0, |s| s.1 + s.2);
    let growth = if first > 0.0 { last / first } else { 0.0 };
    SelfSimilarReport {
        slices,
        sup,
        growth,
        bounded: growth < 4.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenSolve {
    /// `E` in `value`, `E_z` in `dvalue`.
    #[serde(skip)]
    pub field: SpaceTimeField,
    #[serde(skip)]
    pub modes: Option<ModalField>,
    pub source_fit: Option<DecayFit>,
    pub field_fit: Option<DecayFit>,
    /// `sup_t e^{γt}(|E|+|E_z|) / sup_t e^{γt}|h|`.
    pub constant: Option<f64>,
    pub warnings: Vec<String>,
}

/// Largest per-slice mean of `h`, relative to `sup |h|`.
fn relative_mean(h: &ModalField) -> f64 {
    let sup = h
        .modes
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |a, v| a.max(v.norm()));
    if sup == 0.0 {
        return 0.0;
    }
    h.mode(0).iter().fold(0.0f64, |a, v| a.max(v.norm())) / sup
}

/// Largest mode resolved on `points` z-samples.
pub fn resolvable_modes(points: usize) -> i64 {
    (points as i64 - 1) / 2
}

/// Mode-space solve: `(E_z)_n = h_n + (2πn)⁻¹ ∫_t^∞ c_n(t−s) h_n(s) ds`,
/// `E_n = (E_z)_n/(in)`. Returns the modes of `E`.
pub fn solve_modes(table: &GreenTable, h: &ModalField) -> Result<ModalField> {
    if (h.grid.step - table.grid.step).abs() > 1e-12 * table.grid.step {
        return Err(Error::InvalidSpec(format!(
            "source step {} differs from the table step {}",
            h.grid.step, table.grid.step
        )));
    }
    if h.nmax > table.n_max() {
        let beyond = h
            .wavenumbers()
            .filter(|n| n.abs() > table.n_max())
            .flat_map(|n| h.mode(n).iter())
            .fold(0.0f64, |a, v| a.max(v.norm()));
        if beyond > 0.0 {
            return Err(Error::InvalidSpec(format!(
                "source carries modes above the table cutoff {}",
                table.n_max()
            )));
        }
    }
    let mean = relative_mean(h);
    if mean > 1e-8 {
        return Err(Error::MeanViolation { value: mean });
    }
    let len = h.grid.len;
    let dt = h.grid.step;
    let nmax = h.nmax.min(table.n_max());
    let solved: Vec<(i64, Vec<C64>)> = (1..=nmax)
        .flat_map(|n| [n, -n])
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|n| {
            let src = h.mode(n);
            let kernel: Vec<C64> = (0..len).map(|j| table.coefficient_back(n, j)).collect();
            let factor = 1.0 / (2.0 * PI * n as f64);
            let out = (0..len)
                .map(|i| {
                    let w = gregory_weights(len - i);
                    let conv: C64 = (i..len).map(|j| w[j - i] * kernel[j - i] * src[j]).sum();
                    let ez = src[i] + factor * dt * conv;
                    ez / (I * n as f64)
                })
                .collect();
            (n, out)
        })
        .collect();
    let mut e = ModalField::zeros(h.grid, h.nmax);
    for (n, v) in solved {
        *e.mode_mut(n) = v;
    }
    Ok(e)
}

/// Solves the field equation for a sampled source; see [`solve_modes`].
pub fn solve_field(table: &GreenTable, h: &SpaceTimeField, gamma: Option<f64>) -> Result<GreenSolve> {
    let nmax = resolvable_modes(h.z.len()).min(table.n_max());
    let modes = ModalField::from_field(h, nmax);
    let e = solve_modes(table, &modes)?;
    let field = e.to_field(&h.z);
    let mut warnings = Vec::new();
    let times = h.grid.times();
    let window = [h.grid.t0, h.grid.t_end()];
    let source_sup = h.sup_value();
    let source_fit = fit_decay(&times, &source_sup, window).ok();
    let field_fit = fit_decay(&times, &field.sup_combined(), window).ok();
    let mut constant = None;
    if let Some(g) = gamma {
        if let Some(f) = source_fit {
            if f.rate < g {
                warnings.push(format!("source decays at {:.4}, below γ = {g}", f.rate));
            }
        }
        if let Some(a) = table.far_past.map(|f| f.rate) {
            if g >= a {
                warnings.push(format!("γ = {g} is not below the far-past rate a = {a:.4}"));
            }
        }
        let weighted = |s: &[f64]| {
            times
                .iter()
                .zip(s)
                .map(|(t, v)| v * (g * (t - h.grid.t0)).exp())
                .fold(0.0f64, f64::max)
        };
        let b = weighted(&source_sup);
        if b > 0.0 {
            constant = Some(weighted(&field.sup_combined()) / b);
        }
    }
    Ok(GreenSolve {
        field,
        modes: Some(e),
        source_fit,
        field_fit,
        constant,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_residual: f64,
    /// Bound on the neglected `s > T` part of the memory integral.
    pub tail_estimate: f64,
    /// `sup_z |residual|` per time node.
    pub per_time: Vec<f64>,
}

/// `K(mΔt)` for `|m| ≤ count`, computed once per grid.
#[derive(Debug, Clone, Default)]
pub struct VelocityKernel {
    values: Vec<C64>,
}

impl VelocityKernel {
    pub fn new(spec: &EquilibriumSpec, step: f64, count: usize) -> Result<Self> {
        let needed = ((transform_cutoff(spec) / step).ceil() as usize + 1).min(count.saturating_add(1));
        let values = (0..needed)
            .into_par_iter()
            .map(|m| kernel_k(spec, m as f64 * step))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { values })
    }

    pub fn at(&self, m: i64) -> C64 {
        let k = m.unsigned_abs() as usize;
        match self.values.get(k) {
            None => C64::new(0.0, 0.0),
            Some(v) if m >= 0 => *v,
            Some(v) => v.conj(),
        }
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}

/// `∫_t^T ds ∫ f_e'(w) E(z−wt+ws, s) dw` per mode: `∫_t^T K(n(t−s)) E_n(s) ds`
/// with Gregory weights on the grid of `e`. `kernel` must use the same step.
pub fn memory_term(kernel: &VelocityKernel, e: &ModalField) -> ModalField {
    let len = e.grid.len;
    let dt = e.grid.step;
    let reach = kernel.values.len();
    let rows: Vec<(i64, Vec<C64>)> = e
        .wavenumbers()
        .filter(|&n| n != 0)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|n| {
            let en = e.mode(n);
            // K(n·mΔt) vanishes past the tabulated range
            let span = (reach - 1) / n.unsigned_abs() as usize;
            let out = (0..len)
                .map(|i| {
                    let points = len - i;
                    let last = (i + span).min(len - 1);
                    let conv: C64 = (i..=last)
                        .map(|j| gregory_weight(j - i, points) * kernel.at(-n * (j - i) as i64) * en[j])
                        .sum();
                    conv * dt
                })
                .collect();
            (n, out)
        })
        .collect();
    let mut out = ModalField::zeros(e.grid, e.nmax);
    for (n, v) in rows {
        *out.mode_mut(n) = v;
    }
    out
}

/// Residual of `E_z(z,t) − ∫_t^∞ds∫f_e'(w)E(z−wt+ws,s)dw − h(z,t)`.
///
/// Per mode the double integral is `∫_t^T K(n(t−s)) E_n(s) ds`; `E_n` and
/// `(E_z)_n` are projected from the two channels independently.
pub fn residual_n10a(
    spec: &EquilibriumSpec,
    e: &SpaceTimeField,
    h: &SpaceTimeField,
    tol: f64,
) -> Result<ResidualReport> {
    if e.grid != h.grid || e.z != h.z {
        return Err(Error::InvalidSpec("field and source grids differ".into()));
    }
    let nmax = resolvable_modes(e.z.len());
    let grid = e.grid;
    let len = grid.len;
    let kernel = VelocityKernel::new(spec, grid.step, nmax as usize * len)?;
    let e_modes = ModalField::from_field(e, nmax);
    let mut ez_field = e.clone();
    ez_field.value = e.dvalue.clone();
    let ez_modes = ModalField::from_field(&ez_field, nmax);
    let h_modes = ModalField::from_field(h, nmax);

    let last = len - 1;
    let end_value = e_modes.modes.iter().fold(0.0f64, |m, v| m.max(v[last].norm()));
    let times = grid.times();
    let decay = fit_decay(
        &times,
        &e.sup_value(),
        [grid.t0 + 0.5 * (grid.t_end() - grid.t0), grid.t_end()],
    )
    .map(|f| f.rate)
    .unwrap_or(0.0);
    let tail_estimate = if end_value == 0.0 {
        0.0
    } else if decay > 0.0 {
        kernel.sup() * end_value / decay
    } else {
        f64::INFINITY
    };
    if tail_estimate > 0.5 * tol {
        return Err(Error::Horizon(format!(
            "memory tail {tail_estimate:.3e} exceeds half the tolerance {tol:.3e}"
        )));
    }

    let memory = memory_term(&kernel, &e_modes);
    let mut residual = ModalField::zeros(grid, nmax);
    for n in e_modes.wavenumbers().filter(|&n| n != 0) {
        let row: Vec<C64> = (0..len)
            .map(|i| ez_modes.mode(n)[i] - memory.mode(n)[i] - h_modes.mode(n)[i])
            .collect();
        *residual.mode_mut(n) = row;
    }
    let field = residual.to_field(&e.z);
    let per_time = field.sup_value();
    let max_residual = per_time.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok(ResidualReport {
        max_residual,
        tail_estimate,
        per_time,
    })
}

/// Writes the resolved Green solve (`e.csv` and `solve.json`).
pub fn write_solve(solve: &GreenSolve, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    solve.field.write_csv(&dir.join("e.csv"))?;
    write_json(&dir.join("solve.json"), solve)
}
