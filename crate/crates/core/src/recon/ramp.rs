//! Ramp filtering of radial detector lines.

use std::f64::consts::PI;

use ndarray::Axis;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::sinogram::Sinogram;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampWindow {
    RamLak,
    Hann,
}

impl RampWindow {
    pub fn as_str(self) -> &'static str {
        match self {
            RampWindow::RamLak => "ramlak",
            RampWindow::Hann => "hann",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ramlak" | "ram-lak" => Some(RampWindow::RamLak),
            "hann" => Some(RampWindow::Hann),
            _ => None,
        }
    }
}

/// Bandlimited spatial ramp `h[n]` for sample spacing `tau`:
/// `1/(4τ²)` at 0, `-1/(n²π²τ²)` at odd `n`, 0 at even `n`.
pub fn spatial_ramp(n: i64, tau: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * tau * tau)
    } else if n % 2 == 0 {
        0.0
    } else {
        let nf = n as f64;
        -1.0 / (nf * nf * PI * PI * tau * tau)
    }
}

/// FFT length used for a line of `n` samples.
pub fn padded_len(n: usize) -> usize {
    (4 * n).next_power_of_two()
}

/// Frequency response applied to each padded line: the spectrum of
/// `τ h[n]` with the DC bin set to zero, optionally Hann-apodized.
pub fn ramp_response(n: usize, tau: f64, window: RampWindow) -> Vec<f64> {
    let m = padded_len(n);
    let mut buf: Vec<Complex<f64>> = (0..m)
        .map(|i| {
            let k = if i <= m / 2 { i as i64 } else { i as i64 - m as i64 };
            Complex::new(tau * spatial_ramp(k, tau), 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    buf.iter()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                return 0.0;
            }
            let f = i.min(m - i) as f64 / m as f64; // cycles per sample, <= 0.5
            let w = match window {
                RampWindow::RamLak => 1.0,
                RampWindow::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            c.re * w
        })
        .collect()
}

/// Impulse response of the filter, `taps[n - 1 + k]` holding offset `k`
/// for `k` in `-(n-1)..=(n-1)`.
pub fn ramp_kernel(n: usize, tau: f64, window: RampWindow) -> Vec<f64> {
    let m = padded_len(n);
    let resp = ramp_response(n, tau, window);
    let mut buf: Vec<Complex<f64>> = resp.iter().map(|&r| Complex::new(r, 0.0)).collect();
    FftPlanner::new().plan_fft_inverse(m).process(&mut buf);
    let scale = 1.0 / m as f64;
    (-(n as i64 - 1)..=(n as i64 - 1))
        .map(|k| buf[k.rem_euclid(m as i64) as usize].re * scale)
        .collect()
}

/// Reusable line filter: edge-replicating padding, multiply by the ramp
/// response, inverse transform.
pub struct LineFilter {
    n: usize,
    m: usize,
    response: Vec<f64>,
    fwd: std::sync::Arc<dyn Fft<f64>>,
    inv: std::sync::Arc<dyn Fft<f64>>,
}

impl LineFilter {
    pub fn new(n: usize, tau: f64, window: RampWindow) -> Self {
        let m = padded_len(n);
        let mut planner = FftPlanner::new();
        LineFilter {
            n,
            m,
            response: ramp_response(n, tau, window),
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        }
    }

    pub fn apply(&self, line: &mut [f64], scratch: &mut Vec<Complex<f64>>) {
        debug_assert_eq!(line.len(), self.n);
        let (n, m) = (self.n, self.m);
        scratch.clear();
        scratch.extend(line.iter().map(|&v| Complex::new(v, 0.0)));
        // Pad right half with the last sample and the wrapped left half with the first.
        let first = line[0];
        let last = line[n - 1];
        let tail = m - n;
        scratch.extend((0..tail).map(|i| Complex::new(if i < tail / 2 { last } else { first }, 0.0)));
        self.fwd.process(scratch);
        for (c, &r) in scratch.iter_mut().zip(self.response.iter()) {
            *c *= r;
        }
        self.inv.process(scratch);
        let scale = 1.0 / m as f64;
        for (v, c) in line.iter_mut().zip(scratch.iter()) {
            *v = c.re * scale;
        }
    }
}

/// Filters every `(view, row)` radial line of a cone-parallel sinogram.
pub fn ramp_filter(sino: &Sinogram, window: RampWindow) -> Result<Sinogram> {
    let grid = sino.parallel_grid("ramp_filter")?;
    if grid.n_s < 4 {
        return Err(Error::config(format!(
            "ramp filter needs at least 4 radial samples, got {}",
            grid.n_s
        )));
    }
    let filter = LineFilter::new(grid.n_s, grid.s_spacing, window);
    let mut out = sino.clone();
    out.data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each_init(Vec::new, |scratch, mut plane| {
            let mut line = vec![0.0; grid.n_s];
            for mut row in plane.axis_iter_mut(Axis(0)) {
                for (d, s) in line.iter_mut().zip(row.iter()) {
                    *d = *s;
                }
                filter.apply(&mut line, scratch);
                for (d, s) in row.iter_mut().zip(line.iter()) {
                    *d = *s;
                }
            }
        });
    Ok(out)
}
