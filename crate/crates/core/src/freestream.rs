//! Free-streaming density `H(z,t) = ∫ g_∞(z−wt, w) dw` and its decay check.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibria::PerturbationSpec;
use crate::numerics::{
    fit_decay, fourier_line, periodic_grid, write_json, Contour, DecayFit, SpaceTimeField, TimeGrid,
};
use crate::{Error, Result, C64};

const TOL: f64 = 1e-13;

/// `ε Σ c·∫ p(w) e^{−inwt} dw` over the entries of wavenumber `n`, on the
/// velocity line lowered by `sign(nt)·depth`.
pub fn mode_density(g: &PerturbationSpec, n: i64, t: f64, depth: f64) -> Result<C64> {
    if depth > g.strip || depth < 0.0 {
        return Err(Error::StripViolation {
            im: depth,
            limit: g.strip,
        });
    }
    let modes: Vec<_> = g.modes().iter().filter(|m| m.n == n).collect();
    if modes.is_empty() || g.eps == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let xi = n as f64 * t;
    let contour = Contour::shifted(-xi.signum() * depth);
    let shape = fourier_line(
        |w| modes.iter().map(|m| m.coeff * m.profile.eval(w)).sum(),
        xi,
        &contour,
        TOL,
    )?;
    Ok(shape * g.eps)
}

/// Default contour depth: half the strip.
pub fn default_depth(g: &PerturbationSpec) -> f64 {
    0.5 * g.strip
}

/// `H(z,t)` with the default contour depth.
pub fn h_freestream(g: &PerturbationSpec, z: f64, t: f64) -> Result<f64> {
    h_freestream_with_depth(g, z, t, default_depth(g))
}

pub fn h_freestream_with_depth(g: &PerturbationSpec, z: f64, t: f64, depth: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidSpec(format!("free streaming needs t ≥ 0, got {t}")));
    }
    let mut total = C64::new(0.0, 0.0);
    for n in g.wavenumbers() {
        total += mode_density(g, n, t, depth)? * C64::from_polar(1.0, n as f64 * z);
    }
    Ok(total.re)
}

/// `H` and `H_z` on a periodic z-grid × `grid`.
pub fn freestream_field(g: &PerturbationSpec, z_points: usize, grid: &TimeGrid) -> Result<SpaceTimeField> {
    let z = periodic_grid(z_points);
    let ns = g.wavenumbers();
    let depth = default_depth(g);
    let coeffs = grid
        .times()
        .par_iter()
        .map(|&t| {
            ns.iter()
                .map(|&n| mode_density(g, n, t, depth))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut field = SpaceTimeField::zeros(z.clone(), *grid);
    let nz = z.len();
    for (i, row) in coeffs.iter().enumerate() {
        for (j, &zj) in z.iter().enumerate() {
            let mut v = C64::new(0.0, 0.0);
            let mut d = C64::new(0.0, 0.0);
            for (&n, &c) in ns.iter().zip(row) {
                let term = c * C64::from_polar(1.0, n as f64 * zj);
                v += term;
                d += term * C64::new(0.0, n as f64);
            }
            field.value[i * nz + j] = v.re;
            field.dvalue[i * nz + j] = d.re;
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub gamma: f64,
    pub passed: bool,
    pub fit: Option<DecayFit>,
    /// Constant of the envelope `sup_z|H| ≤ C ε e^{−γt}` on the grid.
    pub constant: f64,
    pub notes: Vec<String>,
}

impl DecayReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Samples `sup_z|H(·,t)|`, fits its decay and checks it against `γ`.
pub fn check_decay_bound(g: &PerturbationSpec, gamma: f64, z_points: usize, grid: &TimeGrid) -> Result<DecayReport> {
    if !(gamma < g.strip) {
        return Err(Error::InvalidSpec(format!(
            "target rate γ = {gamma} must stay below the strip A = {}",
            g.strip
        )));
    }
    let field = freestream_field(g, z_points, grid)?;
    let sup = field.sup_value();
    let times = grid.times();
    if sup.iter().all(|v| *v == 0.0) {
        return Ok(DecayReport {
            gamma,
            passed: true,
            fit: None,
            constant: 0.0,
            notes: vec!["H vanishes identically".into()],
        });
    }
    let fit = fit_decay(&times, &sup, [grid.t0, grid.t_end()])?;
    let eps = g.eps.abs().max(1e-300);
    let constant = times
        .iter()
        .zip(&sup)
        .map(|(t, s)| s * (gamma * t).exp() / eps)
        .fold(0.0f64, f64::max);
    let bound = fit.amplitude * fit.residual.exp();
    let envelope_ok = times
        .iter()
        .zip(&sup)
        .filter(|(_, s)| **s > 1e-30)
        .all(|(t, s)| *s <= bound * (-gamma * t).exp() * (1.0 + 1e-9) || *t < fit.window[0]);
    let mut notes = Vec::new();
    if !envelope_ok {
        notes.push("fitted envelope is exceeded on the grid".into());
    }
    Ok(DecayReport {
        gamma,
        passed: fit.rate >= gamma && envelope_ok,
        fit: Some(fit),
        constant,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibria::{ModeEntry, Pairing, Profile};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn gaussian_closed_form() {
        let eps = 1e-3;
        let g = PerturbationSpec::gaussian_cosine(eps);
        let v = h_freestream(&g, 0.0, 2.0).unwrap();
        assert!((v - eps * (-1.0f64).exp()).abs() < 1e-15);
        for &z in &[0.0, 1.0, 2.5, 4.0] {
            assert!((h_freestream(&g, z, 0.0).unwrap() - eps * z.cos()).abs() < 1e-15);
        }
        assert_eq!(h_freestream(&PerturbationSpec::zero(), 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn lorentzian_rate() {
        let eps = 1e-3;
        let g = PerturbationSpec::cosine(eps, 1, Profile::Lorentzian, 1.0, 1.5).unwrap();
        for &t in &[0.0, 0.5, 3.0, 10.0] {
            let v = h_freestream(&g, 0.3, t).unwrap();
            assert!((v - eps * 0.3f64.cos() * PI * (-t).exp()).abs() < 1e-14);
        }
        let grid = TimeGrid::spanning(0.0, 15.0, 0.1).unwrap();
        let report = check_decay_bound(&g, 0.9, 16, &grid).unwrap();
        assert!(report.passed);
        assert!((report.fit.unwrap().rate - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_beats_any_rate() {
        let g = PerturbationSpec::cosine(1e-3, 1, Profile::Gaussian, 2.0, 3.0).unwrap();
        let grid = TimeGrid::spanning(0.0, 12.0, 0.1).unwrap();
        let report = check_decay_bound(&g, 1.0, 16, &grid).unwrap();
        assert!(report.passed);
        let zero = check_decay_bound(&PerturbationSpec::zero(), 0.3, 8, &grid).unwrap();
        assert!(zero.passed && zero.constant == 0.0);
    }

    #[test]
    fn strip_violation() {
        let g = PerturbationSpec::gaussian_cosine(1e-3);
        assert!(h_freestream_with_depth(&g, 0.0, 1.0, 0.6).is_err());
    }

    fn two_mode(eps: f64) -> PerturbationSpec {
        PerturbationSpec::new(
            eps,
            0.5,
            3.0,
            vec![
                ModeEntry {
                    n: 1,
                    profile: Profile::Gaussian,
                    coeff: C64::new(1.0, 0.5),
                    pairing: Pairing::Cos,
                },
                ModeEntry {
                    n: 3,
                    profile: Profile::Lorentzian,
                    coeff: C64::new(0.2, 0.0),
                    pairing: Pairing::Sin,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_mean_slices() {
        let grid = TimeGrid::new(0.0, 0.5, 12).unwrap();
        let f = freestream_field(&two_mode(1e-2), 32, &grid).unwrap();
        for i in 0..grid.len {
            let mean: f64 = f.slice(i).iter().sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-16);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shift_invariance_and_decoupling(z in 0.0f64..6.3, t in 0.0f64..8.0, d in 0.05f64..0.5) {
            let g = two_mode(1e-2);
            let a = h_freestream_with_depth(&g, z, t, d).unwrap();
            let b = h_freestream(&g, z, t).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            let parts: f64 = g.entries.iter().map(|e| {
                let single = PerturbationSpec::new(g.eps, g.strip, g.alpha, vec![e.clone()]).unwrap();
                h_freestream(&single, z, t).unwrap()
            }).sum();
            prop_assert!((parts - b).abs() < 1e-15);
        }
    }
}
