//! Second-kind Volterra convolution equations
//! `λ·b(t) + ∫₀^t b(s) k(t−s) ds = G(t)` on a uniform grid.

use super::series::{ModeSeries, TimeGrid};
use crate::{Error, Result, C64};

/// Kernel samples `k(j·h)`, `j = 0..len`.
pub fn sample_kernel(grid: &TimeGrid, k: impl Fn(f64) -> C64) -> Vec<C64> {
    (0..grid.len).map(|j| k(j as f64 * grid.step)).collect()
}

fn diagonal(lambda: C64, h: f64, k0: C64) -> Result<C64> {
    let d = lambda + 0.5 * h * k0;
    if d.norm() < 1e-300 || lambda.norm() < 1e-300 {
        return Err(Error::SingularStep);
    }
    Ok(d)
}

/// Product-trapezoid marching. `kernel` must hold at least `source.grid.len`
/// samples on the same step.
pub fn volterra_solve(kernel: &[C64], source: &ModeSeries, lambda: C64) -> Result<ModeSeries> {
    let grid = source.grid;
    let h = grid.step;
    let n = grid.len;
    assert!(kernel.len() >= n, "kernel shorter than the grid");
    let diag = diagonal(lambda, h, kernel[0])?;
    let g = &source.values;
    let mut b = vec![C64::new(0.0, 0.0); n];
    b[0] = g[0] / lambda;
    for i in 1..n {
        let mut acc = 0.5 * kernel[i] * b[0];
        for j in 1..i {
            acc += kernel[i - j] * b[j];
        }
        b[i] = (g[i] - h * acc) / diag;
    }
    Ok(ModeSeries { grid, values: b })
}

/// Discrete fundamental solution: the marching response to a `1/h` spike at
/// node 1, shifted back to start at node 0.
pub fn volterra_resolvent(kernel: &[C64], grid: &TimeGrid, lambda: C64) -> Result<ModeSeries> {
    let extended = TimeGrid::new(grid.t0 - grid.step, grid.step, grid.len + 1)?;
    let mut spike = ModeSeries::zeros(extended);
    spike.values[1] = C64::new(1.0 / grid.step, 0.0);
    let mut k = kernel.to_vec();
    if k.len() < extended.len {
        k.push(*kernel.last().unwrap_or(&C64::new(0.0, 0.0)));
    }
    let response = volterra_solve(&k, &spike, lambda)?;
    Ok(ModeSeries {
        grid: *grid,
        values: response.values[1..].to_vec(),
    })
}

/// `b_i = h[½B_i G_0 + Σ_{m=1}^{i} B_{i−m} G_m]`, `b_0 = G_0/λ`: the
/// resolvent form of [`volterra_solve`], second-order consistent.
pub fn resolvent_convolve(resolvent: &ModeSeries, source: &ModeSeries, lambda: C64) -> ModeSeries {
    let h = source.grid.step;
    let bb = &resolvent.values;
    let g = &source.values;
    let mut out = vec![C64::new(0.0, 0.0); g.len()];
    out[0] = g[0] / lambda;
    for i in 1..g.len() {
        let mut acc = 0.5 * bb[i] * g[0];
        for m in 1..=i {
            acc += bb[i - m] * g[m];
        }
        out[i] = h * acc;
    }
    ModeSeries {
        grid: source.grid,
        values: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: f64, t_end: f64) -> TimeGrid {
        TimeGrid::spanning(0.0, t_end, h).unwrap()
    }

    #[test]
    fn homogeneous_is_zero() {
        let g = grid(0.1, 5.0);
        let k = sample_kernel(&g, |t| C64::new(t.cos(), 0.3));
        let b = volterra_solve(&k, &ModeSeries::zeros(g), C64::new(0.0, 1.0)).unwrap();
        assert!(b.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn memoryless() {
        let g = grid(0.1, 5.0);
        let k = vec![C64::new(0.0, 0.0); g.len];
        let src = ModeSeries::from_fn(g, |t| C64::new(t.sin(), t));
        let b = volterra_solve(&k, &src, C64::new(0.0, 1.0)).unwrap();
        for (bi, gi) in b.values.iter().zip(&src.values) {
            assert!((bi - gi / C64::new(0.0, 1.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn unit_kernel_gives_exponential() {
        let g = grid(0.01, 5.0);
        let k = vec![C64::new(1.0, 0.0); g.len];
        let src = ModeSeries::from_fn(g, |_| C64::new(1.0, 0.0));
        let b = volterra_solve(&k, &src, C64::new(1.0, 0.0)).unwrap();
        for (i, v) in b.values.iter().enumerate() {
            assert!((v.re - (-g.at(i)).exp()).abs() < 1e-5);
        }
    }

    #[test]
    fn singular_step_detected() {
        let g = grid(0.5, 2.0);
        let k = vec![C64::new(-4.0, 0.0); g.len];
        let src = ModeSeries::from_fn(g, |_| C64::new(1.0, 0.0));
        assert!(matches!(
            volterra_solve(&k, &src, C64::new(1.0, 0.0)),
            Err(Error::SingularStep)
        ));
    }

    #[test]
    fn memoryless_resolvent_is_delta() {
        let g = grid(0.1, 2.0);
        let k = vec![C64::new(0.0, 0.0); g.len];
        let lambda = C64::new(0.0, 1.0);
        let r = volterra_resolvent(&k, &g, lambda).unwrap();
        assert!((r.values[0] - 1.0 / (lambda * g.step)).norm() < 1e-12);
        assert!(r.values[1..].iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn unit_kernel_resolvent_smooth_part() {
        // 1/(1 + 1/z) = 1 - 1/(z+1): delta minus e^{-t}
        let g = grid(0.01, 4.0);
        let k = vec![C64::new(1.0, 0.0); g.len + 1];
        let r = volterra_resolvent(&k, &g, C64::new(1.0, 0.0)).unwrap();
        for i in (10..g.len).step_by(37) {
            assert!((r.values[i].re + (-g.at(i)).exp()).abs() < 2e-4, "{}", r.values[i]);
        }
    }

    #[test]
    fn shift_property_is_exact() {
        let g = grid(0.05, 3.0);
        let k = sample_kernel(&g, |t| C64::new((-t).exp(), 0.5 * t));
        let lambda = C64::new(0.3, 1.0);
        let r = volterra_resolvent(&k, &g, lambda).unwrap();
        let m = 7;
        let mut spike = ModeSeries::zeros(g);
        spike.values[m] = C64::new(1.0 / g.step, 0.0);
        let b = volterra_solve(&k, &spike, lambda).unwrap();
        for i in 0..g.len {
            let expected = if i < m { C64::new(0.0, 0.0) } else { r.values[i - m] };
            assert_eq!(b.values[i], expected);
        }
    }

    #[test]
    fn resolvent_identity() {
        for &h in &[0.04, 0.02] {
            let g = grid(h, 4.0);
            let k = sample_kernel(&g, |t| C64::new(t.cos(), 0.2 * t));
            let lambda = C64::new(0.0, 1.0);
            let src = ModeSeries::from_fn(g, |t| C64::new(1.0 + t, (2.0 * t).sin()));
            let direct = volterra_solve(&k, &src, lambda).unwrap();
            let r = volterra_resolvent(&k, &g, lambda).unwrap();
            let conv = resolvent_convolve(&r, &src, lambda);
            let scale = direct.values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
            let err = direct
                .values
                .iter()
                .zip(&conv.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
            assert!(err / scale < 10.0 * h * h, "h={h}: {}", err / scale);
        }
    }
}
