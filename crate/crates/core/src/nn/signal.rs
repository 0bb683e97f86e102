//! Tape operations on sampled dual-polarization signals.
//!
//! Symbols and waveforms are stored as `n×4` real matrices with columns
//! `[Re x, Im x, Re y, Im y]`, which is also the layout of their gradients
//! (`∂L/∂Re`, `∂L/∂Im` per polarization).

use ndarray::Array2;
use num_complex::Complex;

use super::tape::{CustomOp, Tape, Var};
use crate::channel::{self, FiberLink, LinkTape, WdmConfig};
use crate::dsp::{self, DualPolWaveform, RrcFilter};
use crate::{Error, Real, Result};

/// Packs a waveform into the `n×4` layout.
pub fn wave_to_array<T: Real>(w: &DualPolWaveform<T>) -> Array2<T> {
    let mut a = Array2::zeros((w.len(), 4));
    for (i, (x, y)) in w.x.iter().zip(&w.y).enumerate() {
        a[[i, 0]] = x.re;
        a[[i, 1]] = x.im;
        a[[i, 2]] = y.re;
        a[[i, 3]] = y.im;
    }
    a
}

/// Unpacks an `n×4` matrix into a waveform.
pub fn array_to_wave<T: Real>(a: &Array2<T>, sample_rate: f64) -> Result<DualPolWaveform<T>> {
    if a.ncols() != 4 {
        return Err(Error::Shape(format!("signal matrix must have 4 columns, got {}", a.ncols())));
    }
    let x = a.rows().into_iter().map(|r| Complex::new(r[0], r[1])).collect();
    let y = a.rows().into_iter().map(|r| Complex::new(r[2], r[3])).collect();
    DualPolWaveform::new(x, y, sample_rate)
}

pub fn symbols_to_array<T: Real>(s: &[[T; 4]]) -> Array2<T> {
    Array2::from_shape_fn((s.len(), 4), |(i, j)| s[i][j])
}

pub fn array_to_symbols<T: Real>(a: &Array2<T>) -> Vec<[T; 4]> {
    a.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect()
}

fn zero_stuff<T: Real>(g: &Array2<T>, sps: usize, sample_rate: f64) -> DualPolWaveform<T> {
    let mut w = DualPolWaveform::zeros(g.nrows() * sps, sample_rate);
    for (k, r) in g.rows().into_iter().enumerate() {
        w.x[k * sps] = Complex::new(r[0], r[1]);
        w.y[k * sps] = Complex::new(r[2], r[3]);
    }
    w
}

fn decimate<T: Real>(w: &DualPolWaveform<T>, sps: usize, n_symbols: usize) -> Array2<T> {
    let mut a = Array2::zeros((n_symbols, 4));
    for k in 0..n_symbols {
        let (x, y) = (w.x[k * sps], w.y[k * sps]);
        a[[k, 0]] = x.re;
        a[[k, 1]] = x.im;
        a[[k, 2]] = y.re;
        a[[k, 3]] = y.im;
    }
    a
}

struct PulseShape {
    filter: RrcFilter,
    sample_rate: f64,
    n_symbols: usize,
}

impl<T: Real> CustomOp<T> for PulseShape {
    fn name(&self) -> &'static str {
        "pulse_shape"
    }

    // the shaping filter is real and even, hence self-adjoint
    fn backward(&self, g: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let mut w = array_to_wave(g, self.sample_rate)?;
        dsp::apply_pulse(&mut w, &self.filter, (self.filter.sps as f64).sqrt());
        Ok(vec![decimate(&w, self.filter.sps, self.n_symbols)])
    }
}

/// Differentiable [`dsp::modulate`]: `N×4` symbols to an `(N·sps)×4` waveform.
pub fn pulse_shape<T: Real>(tape: &Tape<T>, symbols: Var, filter: &RrcFilter, symbol_rate: f64) -> Result<Var> {
    let s = tape.with_value(symbols, |a| {
        if a.ncols() != 4 {
            return Err(Error::Shape(format!("symbols must be N×4, got {:?}", a.dim())));
        }
        Ok(array_to_symbols(a))
    })?;
    let w = dsp::modulate(&s, filter, symbol_rate)?;
    let op = PulseShape { filter: filter.clone(), sample_rate: w.sample_rate, n_symbols: s.len() };
    Ok(tape.custom(&[symbols], wave_to_array(&w), Box::new(op)))
}

struct MatchedFilter {
    filter: RrcFilter,
    sample_rate: f64,
    n_samples: usize,
}

impl<T: Real> CustomOp<T> for MatchedFilter {
    fn name(&self) -> &'static str {
        "matched_filter"
    }

    fn backward(&self, g: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let sps = self.filter.sps;
        let mut w = zero_stuff(g, sps, self.sample_rate);
        let pad = self.n_samples - w.len();
        w.x.extend(std::iter::repeat_n(Complex::default(), pad));
        w.y.extend(std::iter::repeat_n(Complex::default(), pad));
        dsp::apply_pulse(&mut w, &self.filter, 1.0 / (sps as f64).sqrt());
        Ok(vec![wave_to_array(&w)])
    }
}

/// Differentiable [`dsp::matched_filter_downsample`].
pub fn matched_filter<T: Real>(tape: &Tape<T>, wave: Var, filter: &RrcFilter, sample_rate: f64, n_symbols: usize) -> Result<Var> {
    let w = tape.with_value(wave, |a| array_to_wave(a, sample_rate))?;
    let rx = dsp::matched_filter_downsample(&w, filter, n_symbols)?;
    let op = MatchedFilter { filter: filter.clone(), sample_rate, n_samples: w.len() };
    Ok(tape.custom(&[wave], symbols_to_array(&rx), Box::new(op)))
}

struct Dispersion {
    beta2: f64,
    length: f64,
    sample_rate: f64,
}

impl<T: Real> CustomOp<T> for Dispersion {
    fn name(&self) -> &'static str {
        "dispersion"
    }

    fn backward(&self, g: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let w = array_to_wave(g, self.sample_rate)?;
        Ok(vec![wave_to_array(&dsp::apply_dispersion(w, self.beta2, -self.length))])
    }
}

/// Differentiable [`dsp::apply_dispersion`]; a negative `length` gives
/// dispersion compensation.
pub fn dispersion<T: Real>(tape: &Tape<T>, wave: Var, beta2: f64, length: f64, sample_rate: f64) -> Result<Var> {
    let w = tape.with_value(wave, |a| array_to_wave(a, sample_rate))?;
    let out = dsp::apply_dispersion(w, beta2, length);
    Ok(tape.custom(&[wave], wave_to_array(&out), Box::new(Dispersion { beta2, length, sample_rate })))
}

struct Shift {
    delta_f: f64,
    sample_rate: f64,
}

impl<T: Real> CustomOp<T> for Shift {
    fn name(&self) -> &'static str {
        "frequency_shift"
    }

    fn backward(&self, g: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let w = array_to_wave(g, self.sample_rate)?;
        Ok(vec![wave_to_array(&dsp::frequency_shift(w, -self.delta_f))])
    }
}

/// Differentiable [`dsp::frequency_shift`].
pub fn frequency_shift<T: Real>(tape: &Tape<T>, wave: Var, delta_f: f64, sample_rate: f64) -> Result<Var> {
    let w = tape.with_value(wave, |a| array_to_wave(a, sample_rate))?;
    let out = dsp::frequency_shift(w, delta_f);
    Ok(tape.custom(&[wave], wave_to_array(&out), Box::new(Shift { delta_f, sample_rate })))
}

struct Mux {
    offsets: Vec<f64>,
    sample_rate: f64,
}

impl<T: Real> CustomOp<T> for Mux {
    fn name(&self) -> &'static str {
        "wdm_mux"
    }

    fn backward(&self, g: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let w = array_to_wave(g, self.sample_rate)?;
        Ok(self.offsets.iter().map(|&f| wave_to_array(&dsp::frequency_shift(w.clone(), -f))).collect())
    }
}

/// Differentiable [`channel::wdm_mux`].
pub fn wdm_mux<T: Real>(tape: &Tape<T>, channels: &[Var], cfg: &WdmConfig) -> Result<Var> {
    let fs = cfg.sample_rate();
    let waves = channels.iter().map(|&c| tape.with_value(c, |a| array_to_wave(a, fs))).collect::<Result<Vec<_>>>()?;
    let out = channel::wdm_mux(&waves, cfg)?;
    let n = out.len();
    let offsets = (0..cfg.n_channels).map(|i| cfg.channel_offset(i, n)).collect();
    Ok(tape.custom(channels, wave_to_array(&out), Box::new(Mux { offsets, sample_rate: fs })))
}

struct Link<T> {
    tape: LinkTape<T>,
    sample_rate: f64,
}

impl<T: Real> CustomOp<T> for Link<T> {
    fn name(&self) -> &'static str {
        "fiber_link"
    }

    fn backward(&self, g: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let w = array_to_wave(g, self.sample_rate)?;
        Ok(vec![wave_to_array(&channel::propagate_link_backward(&self.tape, &w)?)])
    }
}

/// Differentiable [`channel::propagate_link`]. The amplifier noise is an
/// additive constant for the reverse pass.
pub fn fiber_link<T: Real>(tape: &Tape<T>, wave: Var, link: &FiberLink, sample_rate: f64, seed: u64, keys: &[u64]) -> Result<Var> {
    let w = tape.with_value(wave, |a| array_to_wave(a, sample_rate))?;
    let (out, lt) = channel::propagate_link_taped(w, link, seed, keys)?;
    Ok(tape.custom(&[wave], wave_to_array(&out), Box::new(Link { tape: lt, sample_rate })))
}

/// Mean of `|x|² + |y|²` over the rows of an `n×4` signal, as a `1×1` node.
pub fn mean_power<T: Real>(tape: &Tape<T>, wave: Var) -> Result<Var> {
    let sq = tape.mul(wave, wave)?;
    let m = tape.mean(sq);
    Ok(tape.scale(m, T::of(4.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::substream;
    use crate::dsp::design_rrc;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, &[]);
        Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0))
    }

    /// ⟨A x, y⟩ = ⟨x, Aᵀ y⟩ for a linear op recorded on the tape.
    fn check_adjoint(build: impl Fn(&Tape<f64>, Var) -> Var, n_in: usize) {
        let x = random(n_in, 1);
        let t = Tape::new();
        let xv = t.leaf(x.clone());
        let yv = build(&t, xv);
        let n_out = t.shape(yv).0;
        let y = random(n_out, 2);
        let w = t.leaf(y.clone());
        let p = t.mul(yv, w).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap().get(xv);
        let lhs = t.scalar(l);
        let rhs: f64 = (&g * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn pack_round_trip() {
        let a = random(7, 0);
        let w = array_to_wave(&a, 1.0).unwrap();
        assert_eq!(wave_to_array(&w), a);
        assert!(array_to_wave(&Array2::<f64>::zeros((3, 2)), 1.0).is_err());
    }

    #[test]
    fn linear_ops_have_consistent_adjoints() {
        let f = design_rrc(0.1, 4, 16).unwrap();
        let fs = 4.0e10;
        check_adjoint(|t, x| pulse_shape(t, x, &f, 1e10).unwrap(), 32);
        check_adjoint(|t, x| matched_filter(t, x, &f, fs, 32).unwrap(), 128);
        check_adjoint(|t, x| dispersion(t, x, -2.167e-26, 8e4, fs).unwrap(), 128);
        check_adjoint(|t, x| frequency_shift(t, x, 3.1e9, fs).unwrap(), 128);
    }

    #[test]
    fn mux_adjoint() {
        let cfg = WdmConfig { n_channels: 3, symbol_rate: 1e10, spacing: 1.2e10, sps: 8, rolloff: 0.1, per_channel_power_dbm: vec![0.0; 3] };
        let n = 64;
        let xs: Vec<Array2<f64>> = (0..3).map(|i| random(n, 10 + i)).collect();
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = wdm_mux(&t, &vs, &cfg).unwrap();
        let y = random(n, 20);
        let w = t.leaf(y);
        let p = t.mul(out, w).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        let rhs: f64 = vs.iter().zip(&xs).map(|(v, x)| (&g.get(*v) * x).sum()).sum();
        assert!((t.scalar(l) - rhs).abs() < 1e-10);
    }

    #[test]
    fn mean_power_matches_waveform() {
        let a = random(50, 5);
        let t = Tape::new();
        let v = t.leaf(a.clone());
        let p = mean_power(&t, v).unwrap();
        let w = array_to_wave(&a, 1.0).unwrap();
        assert!((t.scalar(p) - w.mean_power()).abs() < 1e-14);
    }
}
