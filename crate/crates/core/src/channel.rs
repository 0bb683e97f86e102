//! Nonlinear fiber propagation.
//!
//! The field is the loss-normalized amplitude of the Manakov equation
//!
//! ```text
//! ∂A/∂z = -j(β₂/2) ∂²A/∂t² + j(8/9) γ e^{-αz} ‖A‖² A
//! ```
//!
//! so attenuation only enters through the `e^{-αz}` weight on the Kerr term
//! and each EDFA restores unit gain on the signal while adding ASE. Spans are
//! integrated with the symmetric split-step scheme (half dispersion step,
//! full nonlinear step, half dispersion step). The nonlinear sub-step is
//! solved exactly: `‖A‖²` is invariant under it, so over `[z, z+h]` the
//! phase is `(8/9) γ ‖A‖² e^{-αz} (1 - e^{-αh})/α`.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{dispersion_phase, filter_in_place, frequency_shift, omega, DualPolWaveform};
use crate::error::invalid;
use crate::{Error, Real, Result};

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
const KERR_FACTOR: f64 = 8.0 / 9.0;

/// Physical parameters of a multi-span link, all in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberLink {
    /// Group-velocity dispersion, s²/m.
    pub beta2: f64,
    /// Kerr coefficient, 1/(W·m).
    pub gamma: f64,
    /// Power attenuation, 1/m.
    pub alpha: f64,
    /// Span length, m.
    pub span_length: f64,
    pub n_spans: usize,
    /// EDFA noise figure in dB; `-inf` disables ASE.
    pub nf_db: f64,
    pub steps_per_span: usize,
    /// Carrier wavelength used for the photon energy, m.
    pub center_wavelength: f64,
}

impl Default for FiberLink {
    fn default() -> Self {
        Self::standard(50)
    }
}

impl FiberLink {
    /// Standard single-mode fiber: β₂ = -21.67 ps²/km, γ = 1.2 /W/km,
    /// α = 0.2 dB/km, 80 km spans, NF 5 dB, 1550 nm, 200 steps per span.
    pub fn standard(n_spans: usize) -> Self {
        Self {
            beta2: ps2_per_km(-21.67),
            gamma: per_w_km(1.2),
            alpha: db_per_km(0.2),
            span_length: 80e3,
            n_spans,
            nf_db: 5.0,
            steps_per_span: 200,
            center_wavelength: 1550e-9,
        }
    }

    /// Disables amplifier noise.
    pub fn noiseless(mut self) -> Self {
        self.nf_db = f64::NEG_INFINITY;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("span_length", self.span_length),
            ("center_wavelength", self.center_wavelength),
        ];
        for (name, v) in positive {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("fiber parameter {name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.beta2.is_finite() {
            return invalid("fiber beta2 must be finite");
        }
        if self.steps_per_span == 0 {
            return invalid("steps_per_span must be >= 1");
        }
        if self.nf_db.is_nan() || self.nf_db == f64::INFINITY {
            return invalid(format!("noise figure must be finite or -inf, got {}", self.nf_db));
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.span_length * self.n_spans as f64
    }

    /// Amplifier gain that exactly compensates one span, `e^{αL}`.
    pub fn span_gain(&self) -> f64 {
        (self.alpha * self.span_length).exp()
    }

    /// Spontaneous emission factor in the high-gain approximation, `F/2`.
    pub fn n_sp(&self) -> f64 {
        10f64.powf(self.nf_db / 10.0) / 2.0
    }

    /// ASE variance per polarization per sample, `(G-1) h ν n_sp f_s`, in W.
    pub fn ase_variance(&self, sample_rate: f64) -> f64 {
        let nu = SPEED_OF_LIGHT / self.center_wavelength;
        (self.span_gain() - 1.0) * PLANCK * nu * self.n_sp() * sample_rate
    }

    fn step_length(&self) -> f64 {
        self.span_length / self.steps_per_span as f64
    }

    /// Nonlinear phase per unit power for step `s` of a span.
    fn step_coefficient(&self, s: usize) -> f64 {
        let h = self.step_length();
        let z = s as f64 * h;
        let l_eff = if self.alpha == 0.0 { h } else { -(-self.alpha * h).exp_m1() / self.alpha };
        KERR_FACTOR * self.gamma * (-self.alpha * z).exp() * l_eff
    }
}

/// Link parameters in engineering units, as used in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub beta2_ps2_per_km: f64,
    pub gamma_per_w_km: f64,
    pub alpha_db_per_km: f64,
    pub span_length_km: f64,
    /// `-inf` disables ASE.
    pub nf_db: f64,
    pub steps_per_span: usize,
    pub center_wavelength_nm: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            beta2_ps2_per_km: -21.67,
            gamma_per_w_km: 1.2,
            alpha_db_per_km: 0.2,
            span_length_km: 80.0,
            nf_db: 5.0,
            steps_per_span: 200,
            center_wavelength_nm: 1550.0,
        }
    }
}

impl LinkParams {
    pub fn to_link(&self, n_spans: usize) -> Result<FiberLink> {
        let link = FiberLink {
            beta2: ps2_per_km(self.beta2_ps2_per_km),
            gamma: per_w_km(self.gamma_per_w_km),
            alpha: db_per_km(self.alpha_db_per_km),
            span_length: self.span_length_km * 1e3,
            n_spans,
            nf_db: self.nf_db,
            steps_per_span: self.steps_per_span,
            center_wavelength: self.center_wavelength_nm * 1e-9,
        };
        link.validate()?;
        Ok(link)
    }
}

/// ps²/km → s²/m.
pub fn ps2_per_km(v: f64) -> f64 {
    v * 1e-24 / 1e3
}

/// 1/(W·km) → 1/(W·m).
pub fn per_w_km(v: f64) -> f64 {
    v / 1e3
}

/// dB/km → 1/m (power attenuation).
pub fn db_per_km(v: f64) -> f64 {
    v * std::f64::consts::LN_10 / 10.0 / 1e3
}

/// Deterministic random stream keyed by a seed and a list of counters.
/// Distinct key lists give statistically independent streams.
pub fn substream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    // splitmix64 folding of (seed, keys) into a 256-bit key
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut mix = |v: u64| {
        state = state.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut words = [0u64; 4];
    for &k in keys {
        words[0] ^= mix(k);
    }
    words[0] ^= mix(keys.len() as u64);
    for w in words.iter_mut().skip(1) {
        *w = mix(0);
    }
    let mut bytes = [0u8; 32];
    for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Fields recorded by a forward span for the reverse pass.
#[derive(Debug, Clone)]
pub struct SpanTape<T> {
    link: FiberLink,
    sample_rate: f64,
    /// Field entering each nonlinear step.
    pre_nonlinear: Vec<DualPolWaveform<T>>,
}

fn dispersion_response<T: Real>(n: usize, sample_rate: f64, beta2: f64, length: f64) -> Vec<Complex<T>> {
    (0..n)
        .map(|k| {
            let (s, c) = dispersion_phase(omega(k, n, sample_rate), beta2, length).sin_cos();
            Complex::new(T::of(c), T::of(s))
        })
        .collect()
}

fn nonlinear_rotate<T: Real>(w: &mut DualPolWaveform<T>, coeff: f64) {
    let c = T::of(coeff);
    for (x, y) in w.x.iter_mut().zip(w.y.iter_mut()) {
        let theta = c * (x.norm_sqr() + y.norm_sqr());
        let r = Complex::new(theta.cos(), theta.sin());
        *x = *x * r;
        *y = *y * r;
    }
}

fn span_impl<T: Real>(
    mut w: DualPolWaveform<T>,
    link: &FiberLink,
    mut tape: Option<&mut Vec<DualPolWaveform<T>>>,
) -> Result<DualPolWaveform<T>> {
    link.validate()?;
    if link.gamma == 0.0 && tape.is_none() {
        // purely linear span: the split steps compose into one filter
        return Ok(crate::dsp::apply_dispersion(w, link.beta2, link.span_length));
    }
    let n = w.len();
    let h = link.step_length();
    let half = dispersion_response::<T>(n, w.sample_rate, link.beta2, 0.5 * h);
    let full = dispersion_response::<T>(n, w.sample_rate, link.beta2, h);
    let linear = link.beta2 != 0.0;
    for s in 0..link.steps_per_span {
        if linear {
            let d = if s == 0 { &half } else { &full };
            w.for_each_pol(|pol| filter_in_place(pol, |k| d[k]));
        }
        if let Some(t) = tape.as_deref_mut() {
            t.push(w.clone());
        }
        nonlinear_rotate(&mut w, link.step_coefficient(s));
        if !w.is_finite() {
            return Err(Error::Numerical(format!("non-finite field after split-step {s}")));
        }
    }
    if linear {
        w.for_each_pol(|pol| filter_in_place(pol, |k| half[k]));
    }
    Ok(w)
}

/// Propagates `w` through one span (no attenuation on the normalized field,
/// no amplifier).
pub fn ssfm_span<T: Real>(w: DualPolWaveform<T>, link: &FiberLink) -> Result<DualPolWaveform<T>> {
    span_impl(w, link, None)
}

/// As [`ssfm_span`] but records what the reverse pass needs.
pub fn ssfm_span_taped<T: Real>(w: DualPolWaveform<T>, link: &FiberLink) -> Result<(DualPolWaveform<T>, SpanTape<T>)> {
    let sample_rate = w.sample_rate;
    let mut fields = Vec::with_capacity(link.steps_per_span);
    let out = span_impl(w, link, Some(&mut fields))?;
    Ok((out, SpanTape { link: link.clone(), sample_rate, pre_nonlinear: fields }))
}

/// Reverse-mode gradient of one span.
///
/// Gradients of a real loss `L` with respect to a complex field are stored
/// as `∂L/∂Re + j ∂L/∂Im`. The dispersion steps are unitary and complex
/// linear, so their adjoint is the conjugate response. For the nonlinear
/// rotation `o = a e^{jθ}`, `θ = c(|a_x|² + |a_y|²)`:
///
/// ```text
/// g_a = g_o e^{-jθ} + 2c s a,   s = -Im(conj(g_ox) o_x + conj(g_oy) o_y)
/// ```
pub fn ssfm_span_backward<T: Real>(tape: &SpanTape<T>, grad_out: &DualPolWaveform<T>) -> Result<DualPolWaveform<T>> {
    let link = &tape.link;
    let n = grad_out.len();
    if tape.pre_nonlinear.len() != link.steps_per_span
        || tape.pre_nonlinear.first().is_some_and(|f| f.len() != n)
        || grad_out.sample_rate != tape.sample_rate
    {
        return Err(Error::Shape(format!(
            "span tape holds {} steps of {} samples, gradient has {} samples",
            tape.pre_nonlinear.len(),
            tape.pre_nonlinear.first().map_or(0, |f| f.len()),
            n
        )));
    }
    let h = link.step_length();
    let conj = |v: Vec<Complex<T>>| v.into_iter().map(|c| c.conj()).collect::<Vec<_>>();
    let half = conj(dispersion_response::<T>(n, tape.sample_rate, link.beta2, 0.5 * h));
    let full = conj(dispersion_response::<T>(n, tape.sample_rate, link.beta2, h));
    let linear = link.beta2 != 0.0;

    let mut g = grad_out.clone();
    if linear {
        g.for_each_pol(|pol| filter_in_place(pol, |k| half[k]));
    }
    for s in (0..link.steps_per_span).rev() {
        let a = &tape.pre_nonlinear[s];
        let c = T::of(link.step_coefficient(s));
        let two_c = c + c;
        for i in 0..n {
            let (ax, ay) = (a.x[i], a.y[i]);
            let theta = c * (ax.norm_sqr() + ay.norm_sqr());
            let r = Complex::new(theta.cos(), theta.sin());
            let (ox, oy) = (ax * r, ay * r);
            let (gx, gy) = (g.x[i], g.y[i]);
            let s_val = -((gx.conj() * ox).im + (gy.conj() * oy).im);
            let rc = r.conj();
            g.x[i] = gx * rc + ax * (two_c * s_val);
            g.y[i] = gy * rc + ay * (two_c * s_val);
        }
        if linear {
            let d = if s == 0 { &half } else { &full };
            g.for_each_pol(|pol| filter_in_place(pol, |k| d[k]));
        }
    }
    Ok(g)
}

/// Adds circular complex Gaussian ASE to each polarization.
pub fn edfa<T: Real, R: Rng>(mut w: DualPolWaveform<T>, link: &FiberLink, rng: &mut R) -> DualPolWaveform<T> {
    let var = link.ase_variance(w.sample_rate);
    if !(var > 0.0) {
        return w;
    }
    let sd = T::of((0.5 * var).sqrt());
    w.for_each_pol(|pol| {
        for v in pol.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v = *v + Complex::new(T::of(re) * sd, T::of(im) * sd);
        }
    });
    w
}

/// Noise variance per polarization (complex, `E|n|²`) that gives `snr_db`
/// per 2D component for symbols of mean 4D energy `mean_energy`.
pub fn awgn_variance(snr_db: f64, mean_energy: f64) -> f64 {
    0.5 * mean_energy / 10f64.powf(snr_db / 10.0)
}

/// Adds circular complex Gaussian noise of variance `var` per polarization
/// to every 4D symbol.
pub fn awgn_symbols<T: Real, R: Rng>(symbols: &mut [[T; 4]], var: f64, rng: &mut R) {
    let sd = (0.5 * var).sqrt();
    for s in symbols.iter_mut() {
        for v in s.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = *v + T::of(n * sd);
        }
    }
}

/// Reverse-pass record of a full link.
#[derive(Debug, Clone)]
pub struct LinkTape<T> {
    spans: Vec<SpanTape<T>>,
}

fn link_impl<T: Real>(
    mut w: DualPolWaveform<T>,
    link: &FiberLink,
    seed: u64,
    keys: &[u64],
    mut tape: Option<&mut Vec<SpanTape<T>>>,
) -> Result<DualPolWaveform<T>> {
    link.validate()?;
    let mut span_keys = keys.to_vec();
    span_keys.push(0);
    for span in 0..link.n_spans {
        w = match tape.as_deref_mut() {
            Some(t) => {
                let (out, st) = ssfm_span_taped(w, link)?;
                t.push(st);
                out
            }
            None => ssfm_span(w, link)?,
        };
        *span_keys.last_mut().unwrap() = span as u64;
        let mut rng = substream(seed, &span_keys);
        w = edfa(w, link, &mut rng);
    }
    Ok(w)
}

/// `n_spans × (span → EDFA)`. Noise for span `i` is drawn from
/// `substream(seed, keys ++ [i])`, so the output depends only on the inputs.
pub fn propagate_link<T: Real>(w: DualPolWaveform<T>, link: &FiberLink, seed: u64, keys: &[u64]) -> Result<DualPolWaveform<T>> {
    link_impl(w, link, seed, keys, None)
}

pub fn propagate_link_taped<T: Real>(
    w: DualPolWaveform<T>,
    link: &FiberLink,
    seed: u64,
    keys: &[u64],
) -> Result<(DualPolWaveform<T>, LinkTape<T>)> {
    let mut spans = Vec::with_capacity(link.n_spans);
    let out = link_impl(w, link, seed, keys, Some(&mut spans))?;
    Ok((out, LinkTape { spans }))
}

/// Gradient through the link. ASE is additive and independent of the input,
/// so it passes gradients unchanged.
pub fn propagate_link_backward<T: Real>(tape: &LinkTape<T>, grad_out: &DualPolWaveform<T>) -> Result<DualPolWaveform<T>> {
    let mut g = grad_out.clone();
    for st in tape.spans.iter().rev() {
        g = ssfm_span_backward(st, &g)?;
    }
    Ok(g)
}

/// WDM grid and per-channel transmitter settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdmConfig {
    pub n_channels: usize,
    /// Baud, Hz.
    pub symbol_rate: f64,
    /// Channel spacing, Hz.
    pub spacing: f64,
    pub sps: usize,
    pub rolloff: f64,
    pub per_channel_power_dbm: Vec<f64>,
}

impl Default for WdmConfig {
    /// Five 50 GBd channels on a 51.5 GHz grid, 16 samples per symbol,
    /// roll-off 0.01, 0 dBm per channel.
    fn default() -> Self {
        Self {
            n_channels: 5,
            symbol_rate: 50e9,
            spacing: 51.5e9,
            sps: 16,
            rolloff: 0.01,
            per_channel_power_dbm: vec![0.0; 5],
        }
    }
}

impl WdmConfig {
    pub fn single_channel(symbol_rate: f64, sps: usize, rolloff: f64) -> Self {
        Self { n_channels: 1, symbol_rate, spacing: symbol_rate * (1.0 + rolloff), sps, rolloff, per_channel_power_dbm: vec![0.0] }
    }

    pub fn sample_rate(&self) -> f64 {
        self.symbol_rate * self.sps as f64
    }

    /// Occupied bandwidth from the lowest to the highest channel edge.
    pub fn aggregate_bandwidth(&self) -> f64 {
        (self.n_channels.saturating_sub(1)) as f64 * self.spacing + self.symbol_rate * (1.0 + self.rolloff)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.sps < 2 || !(self.symbol_rate > 0.0) {
            return invalid("WDM config needs >= 1 channel, sps >= 2 and a positive symbol rate");
        }
        if self.per_channel_power_dbm.len() != self.n_channels {
            return invalid(format!(
                "{} per-channel powers given for {} channels",
                self.per_channel_power_dbm.len(),
                self.n_channels
            ));
        }
        if self.n_channels > 1 && self.spacing < self.symbol_rate * (1.0 + self.rolloff) * (1.0 - 1e-12) {
            return invalid(format!(
                "channel spacing {} Hz is below the occupied bandwidth {} Hz",
                self.spacing,
                self.symbol_rate * (1.0 + self.rolloff)
            ));
        }
        if self.aggregate_bandwidth() >= self.sample_rate() {
            return invalid(format!(
                "aggregate bandwidth {:.4e} Hz does not fit in sample rate {:.4e} Hz",
                self.aggregate_bandwidth(),
                self.sample_rate()
            ));
        }
        Ok(())
    }

    /// Carrier offset of channel `i`, `(i - (n-1)/2)·spacing`, rounded to the
    /// nearest bin of an `n_samples`-point FFT so each channel stays
    /// periodic over the simulation window.
    pub fn channel_offset(&self, i: usize, n_samples: usize) -> f64 {
        let nominal = (i as f64 - (self.n_channels as f64 - 1.0) / 2.0) * self.spacing;
        let bin = self.sample_rate() / n_samples as f64;
        (nominal / bin).round() * bin
    }
}

/// Sums the channels after shifting each to its carrier offset.
pub fn wdm_mux<T: Real>(channels: &[DualPolWaveform<T>], cfg: &WdmConfig) -> Result<DualPolWaveform<T>> {
    cfg.validate()?;
    if channels.len() != cfg.n_channels {
        return Err(Error::Shape(format!("{} waveforms for {} channels", channels.len(), cfg.n_channels)));
    }
    let n = channels[0].len();
    if channels.iter().any(|c| c.len() != n || c.sample_rate != cfg.sample_rate()) {
        return Err(Error::Shape("WDM channels must share length and sample rate".into()));
    }
    let mut out = DualPolWaveform::zeros(n, cfg.sample_rate());
    for (i, c) in channels.iter().enumerate() {
        let s = frequency_shift(c.clone(), cfg.channel_offset(i, n));
        for (o, v) in out.x.iter_mut().zip(&s.x) {
            *o = *o + v;
        }
        for (o, v) in out.y.iter_mut().zip(&s.y) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Moves channel `index` to baseband. Channel selection itself is done by
/// the matched filter.
pub fn wdm_demux<T: Real>(w: &DualPolWaveform<T>, cfg: &WdmConfig, index: usize) -> Result<DualPolWaveform<T>> {
    if index >= cfg.n_channels {
        return invalid(format!("channel index {index} out of range for {} channels", cfg.n_channels));
    }
    Ok(frequency_shift(w.clone(), -cfg.channel_offset(index, w.len())))
}

/// Nonlinear length scale, used for diagnostics: `1/(γ P)`.
pub fn nonlinear_length(link: &FiberLink, power_w: f64) -> f64 {
    1.0 / (link.gamma * power_w)
}

/// Dispersion length for a given symbol rate: `T₀²/|β₂|` with `T₀ = 1/(2πB)`.
pub fn dispersion_length(link: &FiberLink, symbol_rate: f64) -> f64 {
    let t0 = 1.0 / (2.0 * PI * symbol_rate);
    t0 * t0 / link.beta2.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{apply_dispersion, cd_compensate, design_rrc, matched_filter_downsample, modulate, set_launch_power};

    fn random_field(n: usize, seed: u64, scale: f64) -> DualPolWaveform<f64> {
        let mut rng = substream(seed, &[]);
        let mut draw = || Complex::new(rng.sample::<f64, _>(StandardNormal) * scale, rng.sample::<f64, _>(StandardNormal) * scale);
        let x = (0..n).map(|_| draw()).collect();
        let y = (0..n).map(|_| draw()).collect();
        DualPolWaveform::new(x, y, 100e9).unwrap()
    }

    #[test]
    fn unit_conversions() {
        let l = FiberLink::standard(1);
        assert!((l.beta2 - -2.167e-26).abs() < 1e-40);
        assert!((l.gamma - 1.2e-3).abs() < 1e-18);
        assert!((l.alpha * 80e3 * 10.0 / std::f64::consts::LN_10 - 16.0).abs() < 1e-12);
        assert!((l.span_gain() - 10f64.powf(1.6)).abs() < 1e-9);
        assert!((l.n_sp() - 10f64.powf(0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn linear_limit_is_pure_dispersion() {
        let mut link = FiberLink::standard(1);
        link.gamma = 0.0;
        link.steps_per_span = 7;
        let w = random_field(256, 1, 1e-2);
        let out = ssfm_span(w.clone(), &link).unwrap();
        let direct = apply_dispersion(w.clone(), link.beta2, link.span_length);
        for (a, b) in out.x.iter().chain(&out.y).zip(direct.x.iter().chain(&direct.y)) {
            assert!((a - b).norm() < 1e-12);
        }
        let back = cd_compensate(out, link.beta2, link.span_length);
        for (a, b) in back.x.iter().zip(&w.x) {
            assert!((a - b).norm() < 1e-6 * 1e-2);
        }
    }

    #[test]
    fn spm_closed_form() {
        let mut link = FiberLink::standard(1);
        link.beta2 = 0.0;
        link.alpha = 0.0;
        link.steps_per_span = 1;
        let w = random_field(512, 2, 3e-2);
        let out = ssfm_span(w.clone(), &link).unwrap();
        let c = 8.0 / 9.0 * link.gamma * link.span_length;
        for i in 0..w.len() {
            let theta = c * (w.x[i].norm_sqr() + w.y[i].norm_sqr());
            let r = Complex::from_polar(1.0, theta);
            assert!((out.x[i] - w.x[i] * r).norm() <= 1e-9 * w.x[i].norm().max(1e-300));
            assert!((out.y[i] - w.y[i] * r).norm() <= 1e-9 * w.y[i].norm().max(1e-300));
        }
    }

    #[test]
    fn span_conserves_power() {
        let mut link = FiberLink::standard(1);
        link.steps_per_span = 20;
        let w = random_field(1024, 3, 5e-2);
        let out = ssfm_span(w.clone(), &link).unwrap();
        assert!((out.energy() / w.energy() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ase_variance_matches_formula_and_statistics() {
        let link = FiberLink::standard(1);
        let fs = 800e9;
        let expected = (link.span_gain() - 1.0) * PLANCK * SPEED_OF_LIGHT / 1550e-9 * link.n_sp() * fs;
        assert!((link.ase_variance(fs) / expected - 1.0).abs() < 1e-14);
        let n = 1 << 16;
        let w = edfa(DualPolWaveform::<f64>::zeros(n, fs), &link, &mut substream(5, &[]));
        let px = w.x.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        assert!((px / expected - 1.0).abs() < 0.02);

        let quiet = FiberLink::standard(1).noiseless();
        assert_eq!(quiet.ase_variance(fs), 0.0);
        let w = edfa(DualPolWaveform::<f64>::zeros(16, fs), &quiet, &mut substream(5, &[]));
        assert_eq!(w.energy(), 0.0);
    }

    #[test]
    fn link_is_deterministic_and_zero_spans_is_identity() {
        let mut link = FiberLink::standard(3);
        link.steps_per_span = 4;
        let w = random_field(128, 4, 1e-2);
        let a = propagate_link(w.clone(), &link, 11, &[1, 2]).unwrap();
        let b = propagate_link(w.clone(), &link, 11, &[1, 2]).unwrap();
        assert_eq!(a, b);
        let c = propagate_link(w.clone(), &link, 12, &[1, 2]).unwrap();
        assert_ne!(a, c);
        link.n_spans = 0;
        assert_eq!(propagate_link(w.clone(), &link, 11, &[]).unwrap(), w);
    }

    #[test]
    fn substreams_differ() {
        let a: u64 = substream(1, &[0, 1]).random();
        let b: u64 = substream(1, &[1, 0]).random();
        let c: u64 = substream(1, &[0, 1]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn linear_gradient_is_inverse_dispersion() {
        let mut link = FiberLink::standard(1);
        link.gamma = 0.0;
        link.steps_per_span = 3;
        let w = random_field(64, 6, 1e-2);
        let (_, tape) = ssfm_span_taped(w, &link).unwrap();
        let g = random_field(64, 7, 1.0);
        let back = ssfm_span_backward(&tape, &g).unwrap();
        let expected = apply_dispersion(g, link.beta2, -link.span_length);
        for (a, b) in back.x.iter().zip(&expected.x) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let link = FiberLink { steps_per_span: 2, ..FiberLink::standard(1) };
        let (_, tape) = ssfm_span_taped(random_field(32, 1, 1e-2), &link).unwrap();
        assert!(ssfm_span_backward(&tape, &random_field(16, 1, 1.0)).is_err());
    }

    #[test]
    fn power_gradient_by_unitarity() {
        // L = ‖out‖² = ‖in‖², so dL/d(in) = 2·in, which also equals the
        // adjoint applied to 2·out.
        let link = FiberLink { steps_per_span: 5, ..FiberLink::standard(1) };
        let w = random_field(64, 8, 3e-2);
        let (out, tape) = ssfm_span_taped(w.clone(), &link).unwrap();
        let g = out.clone().scaled(2.0);
        let back = ssfm_span_backward(&tape, &g).unwrap();
        for (a, b) in back.x.iter().chain(&back.y).zip(w.x.iter().chain(&w.y)) {
            assert!((a - b * 2.0).norm() < 1e-10 * b.norm().max(1e-3));
        }
    }

    #[test]
    fn wdm_rejects_bandwidth_overflow() {
        let mut cfg = WdmConfig::default();
        cfg.sps = 4;
        assert!(cfg.validate().is_err());
        cfg.sps = 16;
        cfg.validate().unwrap();
        cfg.spacing = 40e9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wdm_single_channel_is_identity() {
        let cfg = WdmConfig::single_channel(50e9, 4, 0.1);
        let f = design_rrc(0.1, 4, 16).unwrap();
        let syms: Vec<[f64; 4]> = (0..64).map(|k| [k as f64 % 3.0 - 1.0, 0.5, -0.5, (k % 2) as f64]).collect();
        let w = modulate(&syms, &f, 50e9).unwrap();
        let out = wdm_mux(std::slice::from_ref(&w), &cfg).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn wdm_recovers_every_channel_and_adds_powers() {
        let cfg = WdmConfig { sps: 8, ..WdmConfig::default() };
        let f = design_rrc(cfg.rolloff, cfg.sps, 128).unwrap();
        let k = 512;
        let mut tx = Vec::new();
        let mut waves = Vec::new();
        let mut gains = Vec::new();
        for c in 0..cfg.n_channels {
            let mut rng = substream(100 + c as u64, &[]);
            let syms: Vec<[f64; 4]> = (0..k).map(|_| [0; 4].map(|_| if rng.random::<bool>() { 0.5 } else { -0.5 })).collect();
            let raw = modulate(&syms, &f, cfg.symbol_rate).unwrap();
            let p_raw = raw.mean_power();
            let w = set_launch_power(raw, c as f64 - 2.0).unwrap();
            gains.push((w.mean_power() / p_raw).sqrt());
            tx.push(syms);
            waves.push(w);
        }
        let total: f64 = waves.iter().map(|w| w.mean_power()).sum();
        let mux = wdm_mux(&waves, &cfg).unwrap();
        assert!((mux.mean_power() / total - 1.0).abs() < 1e-3);
        for c in 0..cfg.n_channels {
            let base = wdm_demux(&mux, &cfg, c).unwrap();
            let rx = matched_filter_downsample(&base, &f, k).unwrap();
            let g = gains[c];
            let err = rx
                .iter()
                .zip(&tx[c])
                .flat_map(|(a, b)| (0..4).map(move |i| (a[i] / g - b[i]).abs()))
                .fold(0.0, f64::max);
            assert!(err < 1e-3, "channel {c}: {err}");
        }
    }
}
