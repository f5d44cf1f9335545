//! Time grids, mode series, periodic fields and their Fourier plumbing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub step: f64,
    pub len: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, step: f64, len: usize) -> Result<Self> {
        if !(step > 0.0) || len == 0 {
            return Err(Error::InvalidSpec(format!(
                "time grid needs a positive step and at least one node (step {step}, len {len})"
            )));
        }
        Ok(Self { t0, step, len })
    }

    /// Grid on `[t0, t_end]` with the step rounded so `t_end` is a node.
    pub fn spanning(t0: f64, t_end: f64, approx_step: f64) -> Result<Self> {
        let intervals = ((t_end - t0) / approx_step).round().max(1.0) as usize;
        Self::new(t0, (t_end - t0) / intervals as f64, intervals + 1)
    }

    pub fn at(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.step
    }

    pub fn t_end(&self) -> f64 {
        self.at(self.len - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.at(i)).collect()
    }

    /// Same spacing, twice as fine.
    pub fn refined(&self) -> Self {
        Self {
            t0: self.t0,
            step: 0.5 * self.step,
            len: 2 * self.len - 1,
        }
    }

    pub fn nearest(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.step).round();
        k.clamp(0.0, (self.len - 1) as f64) as usize
    }
}

/// Complex samples of one Fourier mode on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSeries {
    pub grid: TimeGrid,
    pub values: Vec<C64>,
}

impl ModeSeries {
    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![C64::new(0.0, 0.0); grid.len],
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> C64) -> Self {
        Self {
            grid,
            values: grid.times().into_iter().map(f).collect(),
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "re", "im"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record(&[
                format!("{:.17e}", self.grid.at(i)),
                format!("{:.17e}", v.re),
                format!("{:.17e}", v.im),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform periodic grid `z_j = 2πj/N`.
pub fn periodic_grid(points: usize) -> Vec<f64> {
    (0..points).map(|j| 2.0 * PI * j as f64 / points as f64).collect()
}

/// Evaluates `Σ c_n e^{inz}` and its z-derivative on `z`.
pub fn fourier_synthesize(coeffs: &BTreeMap<i64, C64>, z: &[f64]) -> (Vec<C64>, Vec<C64>) {
    let mut value = vec![C64::new(0.0, 0.0); z.len()];
    let mut deriv = vec![C64::new(0.0, 0.0); z.len()];
    for (&n, &c) in coeffs {
        for (j, &zj) in z.iter().enumerate() {
            let term = c * C64::from_polar(1.0, n as f64 * zj);
            value[j] += term;
            deriv[j] += term * C64::new(0.0, n as f64);
        }
    }
    (value, deriv)
}

/// Trapezoidal projection of samples on [`periodic_grid`] onto modes `|n| ≤ nmax`.
pub fn project_modes(samples: &[C64], nmax: i64) -> BTreeMap<i64, C64> {
    let points = samples.len();
    let z = periodic_grid(points);
    (-nmax..=nmax)
        .map(|n| {
            let c: C64 = samples
                .iter()
                .zip(&z)
                .map(|(s, &zj)| s * C64::from_polar(1.0, -(n as f64) * zj))
                .sum();
            (n, c / points as f64)
        })
        .collect()
}

/// A real periodic field sampled on a z-grid × t-grid, with its z-derivative.
///
/// Storage is row-major in time: `value[i * z.len() + j]` is the sample at
/// `(z_j, t_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub z: Vec<f64>,
    pub grid: TimeGrid,
    pub value: Vec<f64>,
    pub dvalue: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(z: Vec<f64>, grid: TimeGrid) -> Self {
        let n = z.len() * grid.len;
        Self {
            z,
            grid,
            value: vec![0.0; n],
            dvalue: vec![0.0; n],
        }
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.value[i * self.z.len() + j]
    }

    pub fn dvalue_at(&self, i: usize, j: usize) -> f64 {
        self.dvalue[i * self.z.len() + j]
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let nz = self.z.len();
        &self.value[i * nz..(i + 1) * nz]
    }

    pub fn dslice(&self, i: usize) -> &[f64] {
        let nz = self.z.len();
        &self.dvalue[i * nz..(i + 1) * nz]
    }

    /// `sup_z |value|` per time node.
    pub fn sup_value(&self) -> Vec<f64> {
        (0..self.grid.len)
            .map(|i| self.slice(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }

    /// `sup_z (|value| + |dvalue|)` per time node.
    pub fn sup_combined(&self) -> Vec<f64> {
        (0..self.grid.len)
            .map(|i| {
                self.slice(i)
                    .iter()
                    .zip(self.dslice(i))
                    .fold(0.0f64, |m, (v, d)| m.max(v.abs() + d.abs()))
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "z", "value", "dvalue"])?;
        for i in 0..self.grid.len {
            for (j, zj) in self.z.iter().enumerate() {
                w.write_record(&[
                    format!("{:.17e}", self.grid.at(i)),
                    format!("{:.17e}", zj),
                    format!("{:.17e}", self.value_at(i, j)),
                    format!("{:.17e}", self.dvalue_at(i, j)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fourier modes `|n| ≤ nmax` of a periodic field, each sampled on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalField {
    pub grid: TimeGrid,
    pub nmax: i64,
    /// `modes[(n + nmax) as usize][i]`
    pub modes: Vec<Vec<C64>>,
}

impl ModalField {
    pub fn zeros(grid: TimeGrid, nmax: i64) -> Self {
        Self {
            grid,
            nmax,
            modes: vec![vec![C64::new(0.0, 0.0); grid.len]; (2 * nmax + 1) as usize],
        }
    }

    pub fn mode(&self, n: i64) -> &[C64] {
        &self.modes[(n + self.nmax) as usize]
    }

    pub fn mode_mut(&mut self, n: i64) -> &mut Vec<C64> {
        &mut self.modes[(n + self.nmax) as usize]
    }

    pub fn wavenumbers(&self) -> std::ops::RangeInclusive<i64> {
        -self.nmax..=self.nmax
    }

    /// Projection of a sampled field; the z-grid must be [`periodic_grid`].
    pub fn from_field(field: &SpaceTimeField, nmax: i64) -> Self {
        let mut out = Self::zeros(field.grid, nmax);
        for i in 0..field.grid.len {
            let samples: Vec<C64> = field.slice(i).iter().map(|&v| C64::from(v)).collect();
            for (n, c) in project_modes(&samples, nmax) {
                out.mode_mut(n)[i] = c;
            }
        }
        out
    }

    /// Synthesis on `z`; returns the field and its z-derivative.
    pub fn to_field(&self, z: &[f64]) -> SpaceTimeField {
        let mut field = SpaceTimeField::zeros(z.to_vec(), self.grid);
        let nz = z.len();
        for i in 0..self.grid.len {
            let coeffs: BTreeMap<i64, C64> = self.wavenumbers().map(|n| (n, self.mode(n)[i])).collect();
            let (v, d) = fourier_synthesize(&coeffs, z);
            for j in 0..nz {
                field.value[i * nz + j] = v[j].re;
                field.dvalue[i * nz + j] = d[j].re;
            }
        }
        field
    }

    /// Largest imaginary part produced by synthesis, a reality check.
    pub fn imaginary_residue(&self, z: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.grid.len {
            let coeffs: BTreeMap<i64, C64> = self.wavenumbers().map(|n| (n, self.mode(n)[i])).collect();
            let (v, _) = fourier_synthesize(&coeffs, z);
            worst = v.iter().fold(worst, |m, x| m.max(x.im.abs()));
        }
        worst
    }

    /// Mode-wise z-derivative.
    pub fn derivative(&self) -> Self {
        let mut out = self.clone();
        for n in self.wavenumbers() {
            let factor = C64::new(0.0, n as f64);
            for v in out.mode_mut(n).iter_mut() {
                *v *= factor;
            }
        }
        out
    }

    /// Mean-zero primitive in z: mode n is divided by `in`, mode 0 dropped.
    pub fn primitive(&self) -> Self {
        let mut out = self.clone();
        for n in self.wavenumbers() {
            if n == 0 {
                out.mode_mut(0).iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                continue;
            }
            let factor = C64::new(0.0, -1.0 / n as f64);
            for v in out.mode_mut(n).iter_mut() {
                *v *= factor;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.modes.iter_mut() {
            for v in m.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &Self) {
        for n in self.wavenumbers() {
            if n.abs() > other.nmax {
                continue;
            }
            let src = other.mode(n).to_vec();
            for (v, o) in self.mode_mut(n).iter_mut().zip(src) {
                *v += o;
            }
        }
    }

    /// Evaluates `Σ_n c_n(t_i) e^{inx}` at one node.
    pub fn eval(&self, i: usize, x: f64) -> C64 {
        let base = C64::from_polar(1.0, x);
        let mut power = C64::from_polar(1.0, -(self.nmax as f64) * x);
        let mut acc = C64::new(0.0, 0.0);
        for m in &self.modes {
            acc += m[i] * power;
            power *= base;
        }
        acc
    }
}

/// Trapezoid weights with third-order Gregory end corrections for `points`
/// nodes at unit spacing (multiply by the step). Exact for cubics.
pub fn gregory_weights(points: usize) -> Vec<f64> {
    (0..points).map(|k| gregory_weight(k, points)).collect()
}

/// Entry `index` of [`gregory_weights`]`(points)` without building the vector.
pub fn gregory_weight(index: usize, points: usize) -> f64 {
    match points {
        0 | 1 => 0.0,
        2 => 0.5,
        3 => [1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0][index],
        4 => [3.0 / 8.0, 9.0 / 8.0, 9.0 / 8.0, 3.0 / 8.0][index],
        5 => [14.0 / 45.0, 64.0 / 45.0, 24.0 / 45.0, 64.0 / 45.0, 14.0 / 45.0][index],
        _ => {
            const ENDS: [f64; 3] = [3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0];
            let from_end = index.min(points - 1 - index);
            ENDS.get(from_end).copied().unwrap_or(1.0)
        }
    }
}

/// Writes pretty JSON to `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_from_pair() {
        let z = periodic_grid(16);
        let coeffs = BTreeMap::from([(1, C64::new(0.5, 0.0)), (-1, C64::new(0.5, 0.0))]);
        let (v, d) = fourier_synthesize(&coeffs, &z);
        for (j, zj) in z.iter().enumerate() {
            assert!((v[j].re - zj.cos()).abs() < 1e-14);
            assert!((d[j].re + zj.sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_is_zero() {
        let z = periodic_grid(8);
        let (v, d) = fourier_synthesize(&BTreeMap::new(), &z);
        assert!(v.iter().chain(&d).all(|x| *x == C64::new(0.0, 0.0)));
    }

    #[test]
    fn sine_two() {
        let z = periodic_grid(32);
        let coeffs = BTreeMap::from([(2, C64::new(0.0, -0.5)), (-2, C64::new(0.0, 0.5))]);
        let (v, _) = fourier_synthesize(&coeffs, &z);
        for (j, zj) in z.iter().enumerate() {
            assert!((v[j].re - (2.0 * zj).sin()).abs() < 1e-14);
            assert!(v[j].im.abs() < 1e-14);
        }
    }

    #[test]
    fn gregory_is_exact_for_cubics() {
        for points in 2..12 {
            let w = gregory_weights(points);
            let h = 0.3;
            let b = (points - 1) as f64 * h;
            let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x + 0.25 * x * x * x;
            let exact = b - b * b + b.powi(3) / 6.0 + b.powi(4) / 16.0;
            let approx: f64 = w.iter().enumerate().map(|(k, wk)| wk * f(k as f64 * h)).sum::<f64>() * h;
            if points >= 4 {
                assert!((approx - exact).abs() < 1e-12, "points {points}");
            }
        }
    }

    #[test]
    fn modal_roundtrip() {
        let grid = TimeGrid::new(0.0, 0.1, 3).unwrap();
        let mut m = ModalField::zeros(grid, 3);
        m.mode_mut(1)[1] = C64::new(0.2, 0.3);
        m.mode_mut(-1)[1] = C64::new(0.2, -0.3);
        m.mode_mut(3)[2] = C64::new(-0.1, 0.05);
        m.mode_mut(-3)[2] = C64::new(-0.1, -0.05);
        let z = periodic_grid(8);
        let back = ModalField::from_field(&m.to_field(&z), 3);
        for n in -3..=3 {
            for i in 0..3 {
                assert!((back.mode(n)[i] - m.mode(n)[i]).norm() < 1e-14);
            }
        }
        assert!((m.eval(1, 0.7) - (C64::new(0.4, 0.0) * 0.7f64.cos() - 0.6 * 0.7f64.sin())).norm() < 1e-14);
    }
}
