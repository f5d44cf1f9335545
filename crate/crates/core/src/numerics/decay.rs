//! Exponential decay fits `|s(t)| ≈ C e^{−γt}` on upper envelopes.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    pub rate: f64,
    /// Largest deviation of the fitted points from the line, in log units.
    pub residual: f64,
    pub window: [f64; 2],
    pub points_used: usize,
}

const FLOOR: f64 = 1e-30;
/// Samples below this fraction of the window maximum are treated as roundoff.
const RELATIVE_FLOOR: f64 = 1e-12;

/// Least-squares fit of `log|s|` on `[t_a, t_b]`, ignoring samples at roundoff
/// level relative to the window maximum.
///
/// If the magnitudes oscillate (at least three interior peaks and two
/// troughs) only the local maxima are fitted; otherwise every sample is.
pub fn fit_decay(times: &[f64], magnitudes: &[f64], window: [f64; 2]) -> Result<DecayFit> {
    let samples: Vec<(f64, f64)> = times
        .iter()
        .zip(magnitudes)
        .filter(|(t, _)| **t >= window[0] && **t <= window[1])
        .map(|(t, m)| (*t, m.abs()))
        .collect();
    let top = samples.iter().fold(0.0f64, |a, (_, m)| a.max(*m));
    let floor = FLOOR.max(RELATIVE_FLOOR * top);
    let usable = samples.iter().filter(|(_, m)| *m > floor).count();
    if usable < 8 {
        return Err(Error::WindowTooShort { samples: usable });
    }
    let mut peaks = Vec::new();
    let mut troughs = 0;
    for k in 1..samples.len() - 1 {
        let (prev, cur, next) = (samples[k - 1].1, samples[k].1, samples[k + 1].1);
        if cur >= prev && cur > next && cur > floor {
            peaks.push(samples[k]);
        }
        if cur <= prev && cur < next {
            troughs += 1;
        }
    }
    let points: Vec<(f64, f64)> = if peaks.len() >= 3 && troughs >= 2 {
        peaks
    } else {
        samples.into_iter().filter(|(_, m)| *m > floor).collect()
    };
    let n = points.len() as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for &(t, m) in &points {
        let y = m.ln();
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let denom = n * stt - st * st;
    let slope = if denom.abs() > 0.0 {
        (n * sty - st * sy) / denom
    } else {
        0.0
    };
    let intercept = (sy - slope * st) / n;
    let residual = points
        .iter()
        .map(|&(t, m)| (m.ln() - intercept - slope * t).abs())
        .fold(0.0, f64::max);
    Ok(DecayFit {
        amplitude: intercept.exp(),
        rate: -slope,
        residual,
        window,
        points_used: points.len(),
    })
}
