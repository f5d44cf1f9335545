//! The classical linearized problem: per-mode sources `G_n`, Volterra
//! evolution of the field coefficients `b_n`, fundamental solutions `B_n`, and
//! field reconstruction with decay fits.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispersion::kernel_k;
use crate::equilibria::{EquilibriumSpec, PerturbationSpec};
use crate::freestream::{default_depth, mode_density};
use crate::numerics::{
    fit_decay, fourier_synthesize, periodic_grid, volterra_resolvent, volterra_solve, write_json, DecayFit, ModeSeries,
    SpaceTimeField, TimeGrid,
};
use crate::{Error, Result, C64};

fn check_mode(n: i64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSpec("mode n = 0 carries no field (b₀ ≡ 0)".into()));
    }
    Ok(())
}

/// `G_n(t) = ∫ g_n(v) e^{−invt} dv`, with the velocity contour lowered by
/// `sign(nt)·A/2` so the oscillation becomes decay.
pub fn source_g_n(g0: &PerturbationSpec, n: i64, t: f64) -> Result<C64> {
    check_mode(n)?;
    mode_density(g0, n, t, default_depth(g0))
}

/// `K(nτ)` sampled on the nodes of `grid` (which must start at 0).
pub fn mode_kernel(spec: &EquilibriumSpec, n: i64, grid: &TimeGrid) -> Result<Vec<C64>> {
    (0..grid.len)
        .into_par_iter()
        .map(|j| kernel_k(spec, n as f64 * j as f64 * grid.step))
        .collect()
}

fn check_origin(grid: &TimeGrid) -> Result<()> {
    if grid.t0 != 0.0 {
        return Err(Error::InvalidSpec("the evolution grid must start at t = 0".into()));
    }
    Ok(())
}

/// Solves `in·b_n + ∫₀^t b_n(s) K(n(t−s)) ds = G_n(t)`.
pub fn evolve_mode(spec: &EquilibriumSpec, g0: &PerturbationSpec, n: i64, grid: &TimeGrid) -> Result<ModeSeries> {
    check_mode(n)?;
    check_origin(grid)?;
    let kernel = mode_kernel(spec, n, grid)?;
    evolve_with_kernel(&kernel, g0, n, grid)
}

fn evolve_with_kernel(kernel: &[C64], g0: &PerturbationSpec, n: i64, grid: &TimeGrid) -> Result<ModeSeries> {
    let values = grid
        .times()
        .par_iter()
        .map(|&t| source_g_n(g0, n, t))
        .collect::<Result<Vec<_>>>()?;
    let source = ModeSeries { grid: *grid, values };
    volterra_solve(kernel, &source, C64::new(0.0, n as f64))
}

/// Discrete fundamental solution `B_n(t; 0)`; `B_n(t; t₀) = B_n(t − t₀; 0)`
/// and vanishes for `t < t₀`.
pub fn fundamental_b_n(spec: &EquilibriumSpec, n: i64, grid: &TimeGrid) -> Result<ModeSeries> {
    check_mode(n)?;
    check_origin(grid)?;
    let kernel = mode_kernel(spec, n, grid)?;
    volterra_resolvent(&kernel, grid, C64::new(0.0, n as f64))
}

/// Samples `B_n(t; t₀)` on `grid` from the `t₀ = 0` resolvent.
pub fn shifted_fundamental(resolvent: &ModeSeries, t0: f64) -> ModeSeries {
    let grid = resolvent.grid;
    let shift = ((t0 - grid.t0) / grid.step).round() as i64;
    let values = (0..grid.len as i64)
        .map(|i| {
            let k = i - shift;
            if k < 0 {
                C64::new(0.0, 0.0)
            } else {
                resolvent.values[k as usize]
            }
        })
        .collect();
    ModeSeries { grid, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    /// Horizon; defaults to `30/γ_target`.
    pub t_end: Option<f64>,
    pub step: f64,
    pub z_points: usize,
    /// Fit window as fractions of the horizon.
    pub fit_window: [f64; 2],
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            t_end: None,
            step: 0.05,
            z_points: 64,
            fit_window: [0.3, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub n: i64,
    pub fit: Option<DecayFit>,
    pub growing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRun {
    pub spec: EquilibriumSpec,
    pub g0: PerturbationSpec,
    pub modes: Vec<i64>,
    pub grid: TimeGrid,
    #[serde(skip)]
    pub series: Vec<ModeSeries>,
    #[serde(skip)]
    pub field: Option<SpaceTimeField>,
    pub fits: Vec<ModeFit>,
    pub field_fit: Option<DecayFit>,
    pub growth_detected: bool,
    pub conjugate_residue: f64,
    pub config: LinearConfig,
}

impl LinearRun {
    pub fn series_of(&self, n: i64) -> Option<&ModeSeries> {
        self.modes.iter().position(|&m| m == n).map(|k| &self.series[k])
    }

    pub fn fit_of(&self, n: i64) -> Option<&DecayFit> {
        self.fits.iter().find(|f| f.n == n).and_then(|f| f.fit.as_ref())
    }

    fn window(&self) -> [f64; 2] {
        let t = self.grid.t_end();
        [self.config.fit_window[0] * t, self.config.fit_window[1] * t]
    }

    /// Writes `b_<n>.csv` per mode, `field.csv` and `fits.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (n, s) in self.modes.iter().zip(&self.series) {
            s.write_csv(&dir.join(format!("b_{n}.csv")))?;
        }
        if let Some(field) = &self.field {
            field.write_csv(&dir.join("field.csv"))?;
        }
        write_json(&dir.join("fits.json"), self)
    }
}

/// Evolves every mode of `g0` (both signs), reconstructs `E` and fits decay.
/// `gamma_target` sets the default horizon `30/γ`.
pub fn run_linear(
    spec: &EquilibriumSpec,
    g0: &PerturbationSpec,
    config: &LinearConfig,
    gamma_target: Option<f64>,
) -> Result<LinearRun> {
    let t_end = config
        .t_end
        .unwrap_or_else(|| 30.0 / gamma_target.filter(|g| *g > 0.0).unwrap_or(0.4));
    let grid = TimeGrid::spanning(0.0, t_end, config.step)?;
    let mut modes: Vec<i64> = g0.wavenumbers();
    for n in modes.clone() {
        if !modes.contains(&-n) {
            modes.push(-n);
        }
    }
    modes.sort_unstable();
    let series = modes
        .par_iter()
        .map(|&n| evolve_mode(spec, g0, n, &grid))
        .collect::<Result<Vec<_>>>()?;
    let mut run = LinearRun {
        spec: spec.clone(),
        g0: g0.clone(),
        modes,
        grid,
        series,
        field: None,
        fits: vec![],
        field_fit: None,
        growth_detected: false,
        conjugate_residue: 0.0,
        config: *config,
    };
    let window = run.window();
    let times = grid.times();
    run.fits = run
        .modes
        .iter()
        .zip(&run.series)
        .map(|(&n, s)| {
            let fit = fit_decay(&times, &s.magnitudes(), window).ok();
            ModeFit {
                n,
                growing: fit.map_or(false, |f| f.rate < 0.0),
                fit,
            }
        })
        .collect();
    run.growth_detected = run.fits.iter().any(|f| f.growing);
    run.conjugate_residue = run
        .modes
        .iter()
        .filter(|&&n| n > 0)
        .filter_map(|&n| Some((run.series_of(n)?, run.series_of(-n)?)))
        .flat_map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y.conj()).norm()))
        .fold(0.0, f64::max);
    let (field, fit) = reconstruct_field(&run)?;
    run.field = Some(field);
    run.field_fit = fit;
    Ok(run)
}

/// `E(x,t) = Σ b_n(t) e^{inx}` with `E_x`, and the decay fit of `sup_x|E|`.
pub fn reconstruct_field(run: &LinearRun) -> Result<(SpaceTimeField, Option<DecayFit>)> {
    let z = periodic_grid(run.config.z_points);
    let mut field = SpaceTimeField::zeros(z.clone(), run.grid);
    let nz = z.len();
    let mut residue = 0.0f64;
    for i in 0..run.grid.len {
        let coeffs: BTreeMap<i64, C64> = run
            .modes
            .iter()
            .zip(&run.series)
            .map(|(&n, s)| (n, s.values[i]))
            .collect();
        let (value, deriv) = fourier_synthesize(&coeffs, &z);
        for j in 0..nz {
            residue = residue.max(value[j].im.abs()).max(deriv[j].im.abs());
            field.value[i * nz + j] = value[j].re;
            field.dvalue[i * nz + j] = deriv[j].re;
        }
    }
    let scale = field.sup_value().into_iter().fold(0.0f64, f64::max);
    if residue > 1e-10 * scale.max(1e-300) && scale > 0.0 {
        return Err(Error::InvalidSpec(format!(
            "modes are not conjugate-symmetric: imaginary residue {residue:.3e}"
        )));
    }
    let t = run.grid.t_end();
    let window = [run.config.fit_window[0] * t, run.config.fit_window[1] * t];
    let fit = fit_decay(&run.grid.times(), &field.sup_value(), window).ok();
    Ok((field, fit))
}
