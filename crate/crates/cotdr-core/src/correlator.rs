//! Echo delay recovery: cross-correlation, peak detection, and sub-sample
//! peak fitting.
//!
//! The received record is cross-correlated against the transmitted waveform;
//! echo round-trip times appear as peaks in the lag domain with a resolution
//! of one sample. A raised-cosine main lobe is then least-squares fitted to
//! each peak to interpolate the center to a small fraction of a sample.
//!
//! The reference is mean-removed before correlating, which makes the trace
//! immune to the on/off-keying DC pedestal of the record: any constant
//! offset correlates to zero against a zero-mean reference. The record
//! itself is used raw so that true silence stays exactly silent instead of
//! turning into a pedestal with edge artifacts.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::SampledWaveform;

/// How the correlation sum is evaluated. Both produce the same trace; the
/// direct form is the independent reference for the FFT path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMethod {
    Direct,
    Fft,
}

/// Correlation magnitude over a uniform grid of lags (receiver-clock units).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTrace {
    lag_start: f64,
    lag_step: f64,
    values: Vec<f64>,
}

impl CorrelationTrace {
    pub fn new(lag_start: f64, lag_step: f64, values: Vec<f64>) -> Self {
        Self {
            lag_start,
            lag_step,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lag_step(&self) -> f64 {
        self.lag_step
    }

    pub fn lag_start(&self) -> f64 {
        self.lag_start
    }

    pub fn lag_at(&self, index: usize) -> f64 {
        self.lag_start + index as f64 * self.lag_step
    }

    pub fn lags(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|i| self.lag_at(i))
    }

    /// Index of the lag closest to `lag`, clamped to the trace extent.
    pub fn index_of_lag(&self, lag: f64) -> usize {
        let i = ((lag - self.lag_start) / self.lag_step).round();
        i.clamp(0.0, (self.values.len().saturating_sub(1)) as f64) as usize
    }
}

/// A local maximum that cleared the detection threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCandidate {
    pub index: usize,
    pub value: f64,
}

/// A fitted echo delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    /// Fitted peak center, seconds in receiver-clock units.
    pub delay: f64,
    /// Fitted peak amplitude.
    pub amplitude: f64,
    /// Fitted main-lobe half width, seconds.
    pub width: f64,
    /// RMS residual of the fit over its window.
    pub fit_residual: f64,
    /// One-sigma center uncertainty from the fit covariance, seconds.
    pub uncertainty: f64,
}

/// Floor for the reported center uncertainty; noiseless fits would otherwise
/// report zero, and downstream error budgets treat the value as strictly
/// positive.
const UNCERTAINTY_FLOOR_S: f64 = 1e-16;

/// Cross-correlate `received` against `reference` over every overlapping lag.
///
/// The trace value at lag `l` is `sum_t received(t) * reference(t - l)` with
/// the reference mean-removed. Lags are labeled in the waveforms' common
/// time base, so a received record that is a delayed copy of the reference
/// peaks at the delay itself regardless of window placement.
pub fn cross_correlate(
    received: &SampledWaveform,
    reference: &SampledWaveform,
    method: CorrelationMethod,
) -> Result<CorrelationTrace> {
    let rel = (received.sample_rate - reference.sample_rate).abs()
        / reference.sample_rate.max(f64::MIN_POSITIVE);
    if rel > 1e-12 {
        return Err(Error::RateMismatch {
            received: received.sample_rate,
            reference: reference.sample_rate,
        });
    }
    if received.samples.is_empty() || reference.samples.is_empty() {
        return Err(Error::Waveform(
            "cannot correlate an empty waveform".into(),
        ));
    }

    let r = received.samples.clone();
    let s = mean_removed(&reference.samples);
    let n = r.len();
    let m = s.len();
    let step = 1.0 / reference.sample_rate;
    // Output index k corresponds to lag (k - (m-1)) samples.
    let lag_start = (received.start_time - reference.start_time) - (m as f64 - 1.0) * step;

    let values = match method {
        CorrelationMethod::Direct => correlate_direct(&r, &s),
        CorrelationMethod::Fft => correlate_fft(&r, &s),
    };
    debug_assert_eq!(values.len(), n + m - 1);

    Ok(CorrelationTrace::new(lag_start, step, values))
}

fn mean_removed(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Brute-force correlation; the reference implementation the FFT path is
/// checked against.
fn correlate_direct(r: &[f64], s: &[f64]) -> Vec<f64> {
    let n = r.len() as isize;
    let m = s.len() as isize;
    let mut out = vec![0.0; (n + m - 1) as usize];
    for (idx, slot) in out.iter_mut().enumerate() {
        let k = idx as isize - (m - 1); // lag in samples
        let j_lo = k.max(0);
        let j_hi = (n - 1).min(m - 1 + k);
        let mut acc = 0.0;
        let mut j = j_lo;
        while j <= j_hi {
            acc += r[j as usize] * s[(j - k) as usize];
            j += 1;
        }
        *slot = acc;
    }
    out
}

/// FFT correlation as linear convolution of the record with the reversed
/// reference, evaluated block-wise (overlap-save) so long records do not
/// need a single huge transform.
fn correlate_fft(r: &[f64], s: &[f64]) -> Vec<f64> {
    let n = r.len();
    let m = s.len();
    let out_len = n + m - 1;

    let fft_len = (2 * m.next_power_of_two()).max(8192).next_power_of_two();
    let fft_len = fft_len.min(out_len.next_power_of_two());
    // Kernel must fit in the transform with at least one output point.
    let fft_len = fft_len.max(m.next_power_of_two() * 2);
    let chunk = fft_len - (m - 1);

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    // Spectrum of the reversed reference, computed once.
    let mut kernel: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); fft_len];
    for (i, &v) in s.iter().rev().enumerate() {
        kernel[i] = Complex::new(v, 0.0);
    }
    fwd.process(&mut kernel);

    let mut out = vec![0.0; out_len];
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); fft_len];
    let scale = 1.0 / fft_len as f64;

    let mut t0 = 0usize;
    while t0 < out_len {
        // Input segment covering output range [t0, t0 + chunk):
        // r_padded[t0 - (m-1) .. t0 + chunk).
        for (i, slot) in buf.iter_mut().enumerate() {
            let t = t0 as isize - (m as isize - 1) + i as isize;
            let v = if t >= 0 && (t as usize) < n {
                r[t as usize]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(kernel.iter()) {
            *b *= *k;
        }
        inv.process(&mut buf);
        let take = chunk.min(out_len - t0);
        for i in 0..take {
            out[t0 + i] = buf[m - 1 + i].re * scale;
        }
        t0 += chunk;
    }
    out
}

/// Find local maxima that rise above `threshold_factor` times the robust
/// noise floor of the trace (its median absolute deviation), keeping only
/// peaks at least `min_separation` samples apart. Ties between adjacent
/// equal maxima keep the earlier lag. An empty result is a valid outcome.
pub fn detect_peaks(
    trace: &CorrelationTrace,
    threshold_factor: f64,
    min_separation: usize,
) -> Vec<PeakCandidate> {
    assert!(threshold_factor > 0.0, "threshold_factor must be positive");
    let v = trace.values();
    if v.len() < 3 {
        return Vec::new();
    }

    let med = median(v);
    let mad = median_abs_dev(v, med);
    let global_max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    // The second term only suppresses floating-point residue on noiseless
    // traces; it sits far below any physical sidelobe or echo.
    let threshold = med + (threshold_factor * mad).max(1e-9 * (global_max - med).max(0.0));

    let mut candidates: Vec<PeakCandidate> = Vec::new();
    for i in 1..v.len() - 1 {
        if v[i] > v[i - 1] && v[i] >= v[i + 1] && v[i] > threshold {
            candidates.push(PeakCandidate {
                index: i,
                value: v[i],
            });
        }
    }

    // Strongest-first pruning enforces the separation without discarding a
    // tall peak in favor of a nearby shoulder.
    candidates.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    let mut kept: Vec<PeakCandidate> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|k| k.index.abs_diff(c.index) >= min_separation.max(1))
        {
            kept.push(c);
        }
    }
    kept.sort_by_key(|c| c.index);
    kept
}

fn median(v: &[f64]) -> f64 {
    let mut copy = v.to_vec();
    let mid = copy.len() / 2;
    let (_, m, _) = copy.select_nth_unstable_by(mid, |a, b| {
        a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
    });
    *m
}

fn median_abs_dev(v: &[f64], med: f64) -> f64 {
    let dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    median(&dev)
}

/// Least-squares fit of a raised-cosine main lobe to the trace around a peak
/// candidate, returning the sub-sample center.
///
/// Model: `A * 0.5 * (1 + cos(pi * (x - c) / W))` for `|x - c| <= W`, zero
/// outside; free parameters amplitude `A`, center `c`, half-width `W`.
/// Initialization is parabolic interpolation through the three samples around
/// the candidate; refinement is damped (Levenberg-style) least squares with a
/// bounded iteration count. Non-convergence is reported as an error, never as
/// a silently wrong estimate.
pub fn fit_peak(
    trace: &CorrelationTrace,
    candidate: usize,
    window_halfwidth: usize,
) -> Result<DelayEstimate> {
    if window_halfwidth < 2 {
        return Err(Error::Fit(format!(
            "window_halfwidth = {window_halfwidth}, need at least 2"
        )));
    }
    if candidate < window_halfwidth || candidate + window_halfwidth >= trace.len() {
        return Err(Error::Fit(format!(
            "fit window [{}..{}] not fully inside trace of length {}",
            candidate as isize - window_halfwidth as isize,
            candidate + window_halfwidth,
            trace.len()
        )));
    }

    let hw = window_halfwidth as isize;
    let y: Vec<f64> = (-hw..=hw)
        .map(|dx| trace.values()[(candidate as isize + dx) as usize])
        .collect();
    let x: Vec<f64> = (-hw..=hw).map(|dx| dx as f64).collect();
    let n = y.len();

    // Parabolic interpolation through the three center samples.
    let (ym, y0, yp) = (y[n / 2 - 1], y[n / 2], y[n / 2 + 1]);
    let denom = ym - 2.0 * y0 + yp;
    let mut c = if denom < 0.0 {
        (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let mut a = y0 - 0.25 * (ym - yp) * c;
    if !(a > 0.0) {
        return Err(Error::Fit("candidate is not a positive peak".into()));
    }
    // Half-width seed from the half-maximum crossings.
    let mut w = {
        let half = a / 2.0;
        let mut left = hw as f64;
        for dx in 1..=hw {
            if y[(n / 2) as usize - dx as usize] < half {
                left = dx as f64;
                break;
            }
        }
        let mut right = hw as f64;
        for dx in 1..=hw {
            if y[(n / 2) as usize + dx as usize] < half {
                right = dx as f64;
                break;
            }
        }
        (left + right).clamp(2.0, 2.0 * hw as f64 + 4.0)
    };

    let model = |a: f64, c: f64, w: f64, xi: f64| -> (f64, [f64; 3]) {
        let u = (xi - c) / w;
        if u.abs() >= 1.0 {
            return (0.0, [0.0, 0.0, 0.0]);
        }
        let (sin_u, cos_u) = (std::f64::consts::PI * u).sin_cos();
        let h = 0.5 * (1.0 + cos_u);
        let dh = -0.5 * std::f64::consts::PI * sin_u;
        (a * h, [h, a * dh * (-1.0 / w), a * dh * (-u / w)])
    };

    let cost_of = |a: f64, c: f64, w: f64| -> f64 {
        x.iter()
            .zip(&y)
            .map(|(&xi, &yi)| {
                let (m, _) = model(a, c, w, xi);
                let e = yi - m;
                e * e
            })
            .sum()
    };

    let mut lambda = 1e-3;
    let mut cost = cost_of(a, c, w);
    let mut converged = false;
    for _ in 0..100 {
        // Build normal equations.
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jte = [0.0f64; 3];
        for (&xi, &yi) in x.iter().zip(&y) {
            let (m, j) = model(a, c, w, xi);
            let e = yi - m;
            for p in 0..3 {
                jte[p] += j[p] * e;
                for q in 0..3 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut step = None;
        for _ in 0..12 {
            let mut lhs = jtj;
            for (p, row) in lhs.iter_mut().enumerate() {
                row[p] += lambda * jtj[p][p].max(1e-30);
            }
            if let Some(delta) = solve3(&lhs, &jte) {
                let (na, nc, nw) = (a + delta[0], c + delta[1], w + delta[2]);
                let valid = na > 0.0
                    && nw > 0.5
                    && nw < 8.0 * hw as f64
                    && nc.abs() < hw as f64 + 1.0;
                if valid {
                    let new_cost = cost_of(na, nc, nw);
                    if new_cost <= cost {
                        step = Some((na, nc, nw, new_cost, delta[1].abs()));
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        match step {
            Some((na, nc, nw, new_cost, dc)) => {
                a = na;
                c = nc;
                w = nw;
                let improved = cost - new_cost;
                cost = new_cost;
                lambda = (lambda * 0.3).max(1e-12);
                if dc < 1e-8 && improved <= 1e-12 * cost.max(1e-300) {
                    converged = true;
                    break;
                }
            }
            None => {
                // No damped step reduces the cost any further: stationary.
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::Fit(
            "damped least squares did not converge within the iteration bound".into(),
        ));
    }

    // Covariance of the center from the final Jacobian.
    let mut jtj = [[0.0f64; 3]; 3];
    let mut rss = 0.0;
    for (&xi, &yi) in x.iter().zip(&y) {
        let (m, j) = model(a, c, w, xi);
        let e = yi - m;
        rss += e * e;
        for p in 0..3 {
            for q in 0..3 {
                jtj[p][q] += j[p] * j[q];
            }
        }
    }
    let dof = (n as f64 - 3.0).max(1.0);
    let sigma2 = rss / dof;
    let var_c = invert3_diag(&jtj).map(|d| d[1] * sigma2).unwrap_or(0.0);
    let uncertainty = (var_c.max(0.0).sqrt() * trace.lag_step()).max(UNCERTAINTY_FLOOR_S);

    Ok(DelayEstimate {
        delay: trace.lag_at(candidate) + c * trace.lag_step(),
        amplitude: a,
        width: w * trace.lag_step(),
        fit_residual: (rss / n as f64).sqrt(),
        uncertainty,
    })
}

/// Sample the fitted lobe for plot overlays, at `upsample` points per trace
/// sample across the fit window.
pub fn fitted_curve(
    estimate: &DelayEstimate,
    trace: &CorrelationTrace,
    candidate: usize,
    window_halfwidth: usize,
    upsample: usize,
) -> Vec<(f64, f64)> {
    let step = trace.lag_step() / upsample as f64;
    let start = trace.lag_at(candidate) - window_halfwidth as f64 * trace.lag_step();
    let count = 2 * window_halfwidth * upsample + 1;
    (0..count)
        .map(|i| {
            let lag = start + i as f64 * step;
            let u = (lag - estimate.delay) / estimate.width;
            let v = if u.abs() < 1.0 {
                estimate.amplitude * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            } else {
                0.0
            };
            (lag, v)
        })
        .collect()
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Diagonal of the inverse of a symmetric positive-definite 3x3 matrix.
fn invert3_diag(a: &[[f64; 3]; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1];
    let c11 = a[0][0] * a[2][2] - a[0][2] * a[2][0];
    let c22 = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    Some([c00 / det, c11 / det, c22 / det])
}

/// Write a trace as two-column CSV `lag_ps,value`. When both the lag origin
/// and the lag step are whole picoseconds the lag column is emitted as exact
/// integers.
pub fn trace_to_csv<W: std::io::Write>(trace: &CorrelationTrace, out: &mut W) -> Result<()> {
    writeln!(out, "lag_ps,value")?;
    let start_ps = trace.lag_start() * 1e12;
    let step_ps = trace.lag_step() * 1e12;
    let integral =
        (start_ps - start_ps.round()).abs() < 1e-6 && (step_ps - step_ps.round()).abs() < 1e-6;
    if integral {
        let start = start_ps.round() as i128;
        let step = step_ps.round() as i128;
        for (i, v) in trace.values().iter().enumerate() {
            writeln!(out, "{},{}", start + i as i128 * step, v)?;
        }
    } else {
        for (lag, v) in trace.lags().zip(trace.values()) {
            writeln!(out, "{},{}", lag * 1e12, v)?;
        }
    }
    Ok(())
}
