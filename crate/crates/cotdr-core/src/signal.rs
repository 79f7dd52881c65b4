//! Probe burst generation and pulse shaping.
//!
//! The probe is a seeded pseudo-random on/off bit burst at a high bit rate
//! (10 Gbit/s by default, 100 ps per bit). For transmission it is rendered
//! as an oversampled intensity waveform with raised-cosine bit transitions,
//! which gives the correlation peak the smooth, fit-friendly main lobe the
//! delay estimator assumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Minimum burst length. Shorter bursts leave too little correlation gain
/// to separate echo peaks from the noise floor.
pub const MIN_PROBE_BITS: usize = 64;

/// A seeded pseudo-random probe bit burst.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSequence {
    bits: Vec<bool>,
    bit_rate: f64,
    seed: u64,
}

impl ProbeSequence {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bit_rate(&self) -> f64 {
        self.bit_rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn length_bits(&self) -> usize {
        self.bits.len()
    }

    /// Duration of a single bit in seconds.
    pub fn bit_duration(&self) -> f64 {
        1.0 / self.bit_rate
    }

    /// Duration of the whole burst in seconds.
    pub fn burst_duration(&self) -> f64 {
        self.bits.len() as f64 / self.bit_rate
    }
}

/// An amplitude waveform on a uniform sample grid.
///
/// Sample `i` covers the interval `[start_time + i*T, start_time + (i+1)*T)`
/// and holds the amplitude at the interval midpoint. The midpoint convention
/// keeps the degenerate one-sample-per-bit rendering exactly rectangular and
/// drops out of correlation lags, which only depend on differences between
/// like-sampled waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledWaveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    /// Seconds relative to burst launch (window start for gated records).
    pub start_time: f64,
}

impl SampledWaveform {
    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| s * s).sum()
    }

    /// Linear interpolation of the waveform at time `t` (same time origin as
    /// `start_time`). Zero outside the sampled extent.
    pub fn value_at(&self, t: f64) -> f64 {
        let x = (t - self.start_time) * self.sample_rate - 0.5;
        if x <= -1.0 || x >= self.samples.len() as f64 {
            return 0.0;
        }
        let j = x.floor();
        let frac = x - j;
        let j = j as isize;
        let left = if j < 0 { 0.0 } else { self.samples[j as usize] };
        let right = if j + 1 >= self.samples.len() as isize {
            0.0
        } else {
            self.samples[(j + 1) as usize]
        };
        left * (1.0 - frac) + right * frac
    }
}

/// Generate the probe bit burst. Deterministic in `seed`.
pub fn generate_probe(seed: u64, length_bits: usize, bit_rate: f64) -> Result<ProbeSequence> {
    if length_bits < MIN_PROBE_BITS {
        return Err(Error::Probe(format!(
            "length_bits = {length_bits}, need at least {MIN_PROBE_BITS} for usable correlation gain"
        )));
    }
    if !(bit_rate > 0.0) || !bit_rate.is_finite() {
        return Err(Error::Probe(format!("bit_rate = {bit_rate}, must be positive and finite")));
    }

    // A degenerate all-equal draw has no autocorrelation peak; redraw from a
    // derived stream so the result stays a pure function of the seed.
    for attempt in 0u64.. {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let bits: Vec<bool> = (0..length_bits).map(|_| rng.random()).collect();
        let ones = bits.iter().filter(|&&b| b).count();
        if ones > 0 && ones < length_bits {
            return Ok(ProbeSequence {
                bits,
                bit_rate,
                seed,
            });
        }
    }
    unreachable!("bounded redraw loop");
}

/// Render the bit burst as an oversampled on/off waveform with raised-cosine
/// transitions of width `rolloff` bit durations centered on bit boundaries.
///
/// `oversampling = 1, rolloff = 0` degenerates to rectangular NRZ with one
/// sample per bit. Amplitudes stay in `[0, 1]`.
pub fn shape_waveform(
    probe: &ProbeSequence,
    oversampling: u32,
    rolloff: f64,
) -> Result<SampledWaveform> {
    if oversampling < 1 {
        return Err(Error::Waveform(format!(
            "oversampling = {oversampling}, must be >= 1"
        )));
    }
    if !(0.0..=1.0).contains(&rolloff) || !rolloff.is_finite() {
        return Err(Error::Waveform(format!(
            "rolloff = {rolloff}, must lie in [0, 1]"
        )));
    }

    let n_bits = probe.length_bits();
    let sample_rate = probe.bit_rate * oversampling as f64;
    let n_samples = n_bits * oversampling as usize;
    let bit_at = |k: isize| -> f64 {
        if k < 0 || k as usize >= n_bits {
            0.0
        } else if probe.bits[k as usize] {
            1.0
        } else {
            0.0
        }
    };

    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        // Midpoint of the sample interval, in units of the bit duration.
        let t_bits = (i as f64 + 0.5) / oversampling as f64;
        let nearest_boundary = t_bits.round();
        let x = t_bits - nearest_boundary;
        let value = if rolloff > 0.0 && x.abs() < rolloff / 2.0 {
            let before = bit_at(nearest_boundary as isize - 1);
            let after = bit_at(nearest_boundary as isize);
            let blend = 0.5 * (1.0 + (std::f64::consts::PI * x / rolloff).sin());
            before + (after - before) * blend
        } else {
            bit_at(t_bits.floor() as isize)
        };
        samples.push(value);
    }

    Ok(SampledWaveform {
        samples,
        sample_rate,
        start_time: 0.0,
    })
}
