//! Transmitter and receiver DSP.
//!
//! All waveforms are treated as one period of a periodic signal: shaping,
//! matched filtering, dispersion and frequency shifts are applied with
//! length-`N` FFTs. Pulse shaping and matched filtering use the analytic
//! root-raised-cosine frequency response sampled on the FFT grid, so the
//! cascade of the two is an exact Nyquist pulse on the symbol grid. The
//! time-domain taps of [`RrcFilter`] document the truncated design and back
//! the ISI self test.
//!
//! Gain convention: [`modulate`] scales by `√sps`, so a unit-energy
//! constellation produces a waveform with unit mean power, and
//! [`matched_filter_downsample`] divides by `√sps`, making the
//! back-to-back chain the identity on symbols.

use std::f64::consts::PI;

use num_complex::Complex;
use rustfft::FftDirection;

use crate::error::invalid;
use crate::{fft_plan, Error, Real, Result};

/// Two equal-length complex sample streams (X and Y polarization).
#[derive(Debug, Clone, PartialEq)]
pub struct DualPolWaveform<T> {
    pub x: Vec<Complex<T>>,
    pub y: Vec<Complex<T>>,
    /// Samples per second.
    pub sample_rate: f64,
}

impl<T: Real> DualPolWaveform<T> {
    pub fn new(x: Vec<Complex<T>>, y: Vec<Complex<T>>, sample_rate: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("polarization lengths differ: {} vs {}", x.len(), y.len())));
        }
        if !(sample_rate > 0.0) {
            return invalid(format!("sample rate must be positive, got {sample_rate}"));
        }
        Ok(Self { x, y, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: f64) -> Self {
        Self { x: vec![Complex::default(); len], y: vec![Complex::default(); len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Σ (|x|² + |y|²) over all samples.
    pub fn energy(&self) -> f64 {
        self.x.iter().chain(&self.y).map(|c| c.norm_sqr().f64()).sum()
    }

    /// Mean of |x|² + |y|² per sample.
    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn scaled(mut self, s: T) -> Self {
        self.x.iter_mut().chain(self.y.iter_mut()).for_each(|c| *c = *c * s);
        self
    }

    /// Applies `f` to both polarizations.
    pub(crate) fn for_each_pol(&mut self, mut f: impl FnMut(&mut Vec<Complex<T>>)) {
        f(&mut self.x);
        f(&mut self.y);
    }
}

/// Signed FFT bin index (numpy `fftfreq` ordering times `n`).
#[inline]
pub fn signed_bin(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Angular frequency of bin `k` for an `n`-point FFT at `sample_rate`.
#[inline]
pub fn omega(k: usize, n: usize, sample_rate: f64) -> f64 {
    2.0 * PI * signed_bin(k, n) * sample_rate / n as f64
}

/// Multiplies the spectrum of `data` by `response(k)` (unnormalized forward
/// FFT, multiply, inverse FFT, divide by `n`).
pub(crate) fn filter_in_place<T: Real>(data: &mut [Complex<T>], mut response: impl FnMut(usize) -> Complex<T>) {
    let n = data.len();
    if n == 0 {
        return;
    }
    fft_plan::<T>(n, FftDirection::Forward).process(data);
    let inv_n = T::of(1.0 / n as f64);
    for (k, v) in data.iter_mut().enumerate() {
        *v = *v * response(k) * inv_n;
    }
    fft_plan::<T>(n, FftDirection::Inverse).process(data);
}

/// Root-raised-cosine filter.
#[derive(Debug, Clone, PartialEq)]
pub struct RrcFilter {
    /// Unit-energy, even-symmetric taps, `span_symbols * sps + 1` of them.
    pub taps: Vec<f64>,
    pub rolloff: f64,
    pub sps: usize,
    pub span_symbols: usize,
}

/// Closed-form RRC impulse response at `t` (in symbol periods), unnormalized.
pub fn rrc_impulse(t: f64, beta: f64) -> f64 {
    if t.abs() < 1e-12 {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    let x = 4.0 * beta * t;
    if (x.abs() - 1.0).abs() < 1e-9 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    ((PI * t * (1.0 - beta)).sin() + x * (PI * t * (1.0 + beta)).cos()) / (PI * t * (1.0 - x * x))
}

/// Square root of the raised-cosine spectrum at frequency `nu` (in units of
/// the symbol rate), peak value 1.
pub fn rrc_response(nu: f64, beta: f64) -> f64 {
    let f = nu.abs();
    let lo = 0.5 * (1.0 - beta);
    let hi = 0.5 * (1.0 + beta);
    if f <= lo {
        1.0
    } else if f < hi {
        (PI / (2.0 * beta) * (f - lo)).cos()
    } else {
        0.0
    }
}

/// Designs a unit-energy RRC filter sampled at `sps` points per symbol.
pub fn design_rrc(rolloff: f64, sps: usize, span_symbols: usize) -> Result<RrcFilter> {
    if !(rolloff > 0.0 && rolloff <= 1.0) {
        return invalid(format!("RRC roll-off must be in (0, 1], got {rolloff}"));
    }
    if sps < 2 {
        return invalid(format!("samples per symbol must be >= 2, got {sps}"));
    }
    if span_symbols < 4 {
        return invalid(format!("RRC span must be >= 4 symbols, got {span_symbols}"));
    }
    let n = span_symbols * sps + 1;
    let mid = (n - 1) / 2;
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            // symmetric about mid by construction
            let t = (i as f64 - mid as f64) / sps as f64;
            rrc_impulse(t.abs(), rolloff)
        })
        .collect();
    let norm = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|v| *v /= norm);
    Ok(RrcFilter { taps, rolloff, sps, span_symbols })
}

impl RrcFilter {
    /// Spectrum of the shaping pulse on an `n`-point grid, `√sps · H(ν)`,
    /// so that the periodic pulse has unit energy.
    pub fn spectrum(&self, n: usize) -> Vec<f64> {
        let scale = (self.sps as f64).sqrt();
        (0..n)
            .map(|k| scale * rrc_response(signed_bin(k, n) * self.sps as f64 / n as f64, self.rolloff))
            .collect()
    }

    /// Samples at symbol instants of the time-domain cascade `taps ∗ taps`,
    /// peak first. Used for the ISI self test.
    pub fn cascade_at_symbols(&self) -> Vec<f64> {
        let n = self.taps.len();
        let mid = n - 1;
        let mut out = Vec::new();
        let mut lag = 0;
        while lag <= mid {
            let v: f64 = (lag..n).map(|i| self.taps[i] * self.taps[i - lag]).sum();
            out.push(v);
            lag += self.sps;
        }
        out
    }

    /// Worst off-peak ISI of the truncated cascade relative to its peak, in dB.
    pub fn isi_db(&self) -> f64 {
        let c = self.cascade_at_symbols();
        let worst = c[1..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        20.0 * (worst / c[0]).log10()
    }

    /// Checks the filter invariants (odd length, unit energy, even symmetry).
    pub fn validate(&self) -> Result<()> {
        let n = self.taps.len();
        if n % 2 == 0 {
            return Err(Error::Invariant(format!("RRC tap count must be odd, got {n}")));
        }
        let e: f64 = self.taps.iter().map(|v| v * v).sum();
        if (e - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("RRC taps must have unit energy, got {e}")));
        }
        for k in 0..n / 2 {
            if (self.taps[k] - self.taps[n - 1 - k]).abs() > 1e-12 {
                return Err(Error::Invariant(format!("RRC taps not symmetric at {k}")));
            }
        }
        Ok(())
    }
}

/// Zero-stuffs `symbols` by `sps`, shapes them with the RRC pulse and returns
/// the periodic waveform. X carries `(r_X, i_X)`, Y carries `(r_Y, i_Y)`.
pub fn modulate<T: Real>(symbols: &[[T; 4]], filter: &RrcFilter, symbol_rate: f64) -> Result<DualPolWaveform<T>> {
    if symbols.is_empty() {
        return invalid("cannot modulate an empty symbol sequence");
    }
    let sps = filter.sps;
    let n = symbols.len() * sps;
    let mut w = DualPolWaveform::zeros(n, symbol_rate * sps as f64);
    for (k, s) in symbols.iter().enumerate() {
        w.x[k * sps] = Complex::new(s[0], s[1]);
        w.y[k * sps] = Complex::new(s[2], s[3]);
    }
    apply_pulse(&mut w, filter, (sps as f64).sqrt());
    Ok(w)
}

/// Filters both polarizations with `gain · √sps · H`.
pub(crate) fn apply_pulse<T: Real>(w: &mut DualPolWaveform<T>, filter: &RrcFilter, gain: f64) {
    let spec: Vec<Complex<T>> = filter.spectrum(w.len()).iter().map(|v| Complex::new(T::of(v * gain), T::zero())).collect();
    w.for_each_pol(|pol| filter_in_place(pol, |k| spec[k]));
}

/// Matched filter followed by sampling at the symbol instants `k·sps`.
pub fn matched_filter_downsample<T: Real>(
    w: &DualPolWaveform<T>,
    filter: &RrcFilter,
    n_symbols: usize,
) -> Result<Vec<[T; 4]>> {
    let sps = filter.sps;
    if w.len() < n_symbols * sps || n_symbols == 0 {
        return invalid(format!(
            "waveform of {} samples is too short for {n_symbols} symbols at {sps} samples/symbol",
            w.len()
        ));
    }
    let mut f = w.clone();
    apply_pulse(&mut f, filter, 1.0 / (sps as f64).sqrt());
    Ok((0..n_symbols)
        .map(|k| {
            let (x, y) = (f.x[k * sps], f.y[k * sps]);
            [x.re, x.im, y.re, y.im]
        })
        .collect())
}

/// Scales `w` so that its mean total power (both polarizations) is
/// `10^((dbm - 30)/10)` W.
pub fn set_launch_power<T: Real>(w: DualPolWaveform<T>, power_dbm: f64) -> Result<DualPolWaveform<T>> {
    let p = w.mean_power();
    if !(p > 0.0) || !p.is_finite() {
        return invalid(format!("cannot set launch power of a waveform with mean power {p}"));
    }
    let target = dbm_to_watt(power_dbm);
    Ok(w.scaled(T::of((target / p).sqrt())))
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watt_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Phase `φ(ω)` such that linear propagation over `length` multiplies bin
/// `ω` by `exp(jφ)`. With the `exp(+jωt)` synthesis convention of the
/// inverse FFT, `∂A/∂z = -j(β₂/2)∂²A/∂t²` becomes `exp(+j(β₂/2)ω²z)`.
#[inline]
pub fn dispersion_phase(omega: f64, beta2: f64, length: f64) -> f64 {
    0.5 * beta2 * omega * omega * length
}

/// Linear (dispersion-only) propagation over `length` metres.
pub fn apply_dispersion<T: Real>(mut w: DualPolWaveform<T>, beta2: f64, length: f64) -> DualPolWaveform<T> {
    if length == 0.0 || beta2 == 0.0 {
        return w;
    }
    let n = w.len();
    let fs = w.sample_rate;
    let h: Vec<Complex<T>> = (0..n)
        .map(|k| {
            let (s, c) = dispersion_phase(omega(k, n, fs), beta2, length).sin_cos();
            Complex::new(T::of(c), T::of(s))
        })
        .collect();
    w.for_each_pol(|pol| filter_in_place(pol, |k| h[k]));
    w
}

/// Chromatic dispersion compensation: the exact inverse of
/// [`apply_dispersion`] over the same length.
pub fn cd_compensate<T: Real>(w: DualPolWaveform<T>, beta2: f64, length: f64) -> DualPolWaveform<T> {
    apply_dispersion(w, beta2, -length)
}

/// Multiplies sample `n` by `exp(j2π Δf n / f_s)`.
pub fn frequency_shift<T: Real>(mut w: DualPolWaveform<T>, delta_f: f64) -> DualPolWaveform<T> {
    if delta_f == 0.0 {
        return w;
    }
    let step = delta_f / w.sample_rate;
    let rot: Vec<Complex<T>> = (0..w.len())
        .map(|n| {
            // reduce before multiplying by 2π to keep the phase accurate
            let cycles = (step * n as f64).fract();
            let (s, c) = (2.0 * PI * cycles).sin_cos();
            Complex::new(T::of(c), T::of(s))
        })
        .collect();
    w.for_each_pol(|pol| pol.iter_mut().zip(&rot).for_each(|(v, r)| *v = *v * r));
    w
}

/// Guard length in symbols for edge-discarding evaluation: filter span plus
/// the dispersion memory `⌈2π|β₂|L B²⌉`.
pub fn guard_symbols(filter: &RrcFilter, beta2: f64, length: f64, symbol_rate: f64) -> usize {
    let memory = (2.0 * PI * beta2.abs() * length * symbol_rate * symbol_rate).ceil() as usize;
    filter.span_symbols + memory
}

/// Converts a symbol slice between precisions.
pub fn cast_symbols<A: Real, B: Real>(s: &[[A; 4]]) -> Vec<[B; 4]> {
    s.iter().map(|p| p.map(|v| B::of(v.f64()))).collect()
}
