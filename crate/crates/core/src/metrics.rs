//! Generalized mutual information estimators and rate arithmetic.
//!
//! All GMI values are in bits per 4D symbol.

use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constellation::Constellation4D;
use crate::error::invalid;
use crate::{Error, Result};

/// Lower clamp on demapper probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Samples per parallel work unit; partial sums are reduced in chunk order.
const CHUNK: usize = 512;

/// `H(X) + (1/K) Σ_k Σ_i [b log₂ r + (1-b) log₂(1-r)]` for a `K×m` matrix
/// of transmitted bits and demapper estimates `r = p(b = 1 | y)`.
pub fn gmi_nn(entropy_bits: f64, bits: &Array2<u8>, probs_est: &Array2<f64>) -> Result<f64> {
    if bits.dim() != probs_est.dim() {
        return Err(Error::Shape(format!("bits {:?} vs estimates {:?}", bits.dim(), probs_est.dim())));
    }
    let k = bits.nrows();
    if k == 0 {
        return invalid("GMI needs at least one symbol");
    }
    let mut acc = 0.0;
    for (&b, &r) in bits.iter().zip(probs_est.iter()) {
        let r = r.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        acc += match b {
            1 => r.log2(),
            0 => (1.0 - r).log2(),
            _ => return invalid(format!("bit value {b} is not 0 or 1")),
        };
    }
    Ok(entropy_bits + acc / k as f64)
}

/// Receiver-side gain correction applied before the Gaussian metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// Use the received samples as they are.
    #[default]
    None,
    /// Divide each polarization by its least-squares complex gain
    /// `Σ conj(x) y / Σ |x|²` (absorbs common phase rotation and scaling).
    PerPolarization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxOptions {
    /// Fixed metric variance; fitted when `None`.
    pub sigma2: Option<f64>,
    pub gain: GainMode,
    /// Samples used by the variance search.
    pub fit_samples: usize,
}

impl Default for AuxOptions {
    fn default() -> Self {
        Self { sigma2: None, gain: GainMode::None, fit_samples: 4096 }
    }
}

/// Result of [`gmi_aux_gaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuxGmi {
    /// Clipped to `[0, H(X)]`.
    pub gmi: f64,
    /// Estimate before clipping.
    pub raw_gmi: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
    pub sigma2: f64,
    /// `mean ‖y - x‖² / 2`.
    pub sigma2_moment: f64,
    /// A bit subset lost all mass after the global shift and was re-evaluated
    /// with its own log-sum-exp.
    pub floor_hit: bool,
    /// The raw estimate was negative and has been clipped to 0.
    pub clipped: bool,
}

struct Metric<'a> {
    points: &'a [[f64; 4]],
    log_prior: Vec<f64>,
    bits: Vec<u8>,
    m: usize,
}

impl<'a> Metric<'a> {
    fn new(c: &'a Constellation4D) -> Self {
        let m = c.m();
        let mut bits = Vec::with_capacity(c.size() * m);
        for j in 0..c.size() {
            for i in 0..m {
                bits.push(c.bit(j, i));
            }
        }
        let log_prior = c.probs().iter().map(|p| p.ln()).collect();
        Self { points: c.points(), log_prior, bits, m }
    }

    /// `Σ_i log₂(Σ_x q P / Σ_{x: b_i(x) = b_i} q P)` for one sample.
    fn sample_loss(&self, y: &[f64; 4], tx: usize, inv_s2: f64, scratch: &mut Vec<f64>, sums: &mut [f64], floor_hit: &mut bool) -> f64 {
        let m = self.m;
        scratch.clear();
        let mut mx = f64::NEG_INFINITY;
        for (p, lp) in self.points.iter().zip(&self.log_prior) {
            let d = (y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2) + (y[2] - p[2]).powi(2) + (y[3] - p[3]).powi(2);
            let l = lp - d * inv_s2;
            mx = mx.max(l);
            scratch.push(l);
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let mut total = 0.0;
        for (j, l) in scratch.iter_mut().enumerate() {
            let w = (*l - mx).exp();
            total += w;
            let row = &self.bits[j * m..(j + 1) * m];
            for (i, &b) in row.iter().enumerate() {
                if b == 1 {
                    sums[i] += w;
                }
            }
        }
        let own = &self.bits[tx * m..(tx + 1) * m];
        let mut loss = 0.0;
        for i in 0..m {
            let num = if own[i] == 1 { sums[i] } else { total - sums[i] };
            if num > 0.0 && num.is_finite() {
                loss += (total / num).ln();
            } else {
                // the subset lost all mass after the global shift: evaluate
                // its log-sum-exp about its own maximum
                *floor_hit = true;
                let mut smx = f64::NEG_INFINITY;
                for (j, &l) in scratch.iter().enumerate() {
                    if self.bits[j * m + i] == own[i] {
                        smx = smx.max(l);
                    }
                }
                let mut s = 0.0;
                for (j, &l) in scratch.iter().enumerate() {
                    if self.bits[j * m + i] == own[i] {
                        s += (l - smx).exp();
                    }
                }
                let log_total = mx + total.ln();
                let log_num = smx + s.ln();
                loss += if log_num.is_finite() { log_total - log_num } else { 700.0 };
            }
        }
        loss / LN_2
    }

    /// Sum and sum of squares of the per-sample losses plus the floor flag,
    /// reduced in a fixed chunk order.
    fn accumulate(&self, rx: &[[f64; 4]], tx: &[usize], sigma2: f64) -> (f64, f64, bool) {
        let inv = 1.0 / sigma2;
        let parts: Vec<(f64, f64, bool)> = rx
            .par_chunks(CHUNK)
            .zip(tx.par_chunks(CHUNK))
            .map(|(ys, xs)| {
                let mut scratch = Vec::with_capacity(self.points.len());
                let mut sums = vec![0.0; self.m];
                let mut flag = false;
                let (mut s, mut s2) = (0.0, 0.0);
                for (y, &t) in ys.iter().zip(xs) {
                    let l = self.sample_loss(y, t, inv, &mut scratch, &mut sums, &mut flag);
                    s += l;
                    s2 += l * l;
                }
                (s, s2, flag)
            })
            .collect();
        parts.into_iter().fold((0.0, 0.0, false), |a, b| (a.0 + b.0, a.1 + b.1, a.2 || b.2))
    }
}

/// Least-squares complex gain per polarization, `Σ conj(x) y / Σ |x|²`.
pub fn fit_polarization_gains(tx: &[[f64; 4]], rx: &[[f64; 4]]) -> [Complex<f64>; 2] {
    let mut out = [Complex::new(1.0, 0.0); 2];
    for (p, g) in out.iter_mut().enumerate() {
        let mut num = Complex::new(0.0, 0.0);
        let mut den = 0.0;
        for (x, y) in tx.iter().zip(rx) {
            let xc = Complex::new(x[2 * p], x[2 * p + 1]);
            let yc = Complex::new(y[2 * p], y[2 * p + 1]);
            num += xc.conj() * yc;
            den += xc.norm_sqr();
        }
        if den > 0.0 && num.norm() > 0.0 {
            *g = num / den;
        }
    }
    out
}

/// Mismatched-decoding GMI of `c` under the isotropic 4D Gaussian auxiliary
/// channel `q(y|x) ∝ exp(-‖y - x‖²/σ²)`, with the a-priori probabilities of
/// `c`:
///
/// ```text
/// GMI = H(X) - (1/K) Σ_k Σ_i log₂[ Σ_x q(y_k|x)P(x) / Σ_{x: b_i(x) = b_ik} q(y_k|x)P(x) ]
/// ```
///
/// Without a fixed `σ²` the variance maximizing the estimate is searched on a
/// subsample and kept only if it beats the moment-matched value on the full
/// set.
pub fn gmi_aux_gaussian(c: &Constellation4D, tx_indices: &[usize], rx: &[[f64; 4]], opts: &AuxOptions) -> Result<AuxGmi> {
    let k = tx_indices.len();
    if k == 0 {
        return invalid("GMI needs at least one symbol");
    }
    if rx.len() != k {
        return Err(Error::Shape(format!("{k} transmitted indices, {} received samples", rx.len())));
    }
    if let Some(&bad) = tx_indices.iter().find(|&&i| i >= c.size()) {
        return invalid(format!("transmitted index {bad} out of range for {} points", c.size()));
    }
    if let Some(s) = opts.sigma2 {
        if !(s > 0.0) {
            return invalid(format!("sigma2 must be positive, got {s}"));
        }
    }
    let tx: Vec<[f64; 4]> = c.gather(tx_indices);
    let rx: Vec<[f64; 4]> = match opts.gain {
        GainMode::None => rx.to_vec(),
        GainMode::PerPolarization => {
            let g = fit_polarization_gains(&tx, rx);
            rx.iter()
                .map(|y| {
                    let a = Complex::new(y[0], y[1]) / g[0];
                    let b = Complex::new(y[2], y[3]) / g[1];
                    [a.re, a.im, b.re, b.im]
                })
                .collect()
        }
    };
    if rx.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("received samples contain NaN or Inf".into()));
    }

    let h = c.entropy();
    let metric = Metric::new(c);
    let d2: f64 = tx.iter().zip(&rx).map(|(x, y)| (0..4).map(|i| (y[i] - x[i]).powi(2)).sum::<f64>()).sum::<f64>() / k as f64;
    let floor = 1e-12 * c.mean_energy().max(f64::MIN_POSITIVE);
    let sigma2_moment = (0.5 * d2).max(floor);

    let sigma2 = match opts.sigma2 {
        Some(s) => s,
        None => {
            let n_fit = opts.fit_samples.clamp(1, k);
            let stride = k / n_fit;
            let idx: Vec<usize> = (0..n_fit).map(|i| i * stride).collect();
            let sub_rx: Vec<[f64; 4]> = idx.iter().map(|&i| rx[i]).collect();
            let sub_tx: Vec<usize> = idx.iter().map(|&i| tx_indices[i]).collect();
            let cost = |ls: f64| metric.accumulate(&sub_rx, &sub_tx, ls.exp()).0;
            let fitted = golden_section_min(cost, (sigma2_moment / 30.0).ln(), (sigma2_moment * 30.0).ln(), 24).exp();
            let at_fit = metric.accumulate(&rx, tx_indices, fitted).0;
            let at_mom = metric.accumulate(&rx, tx_indices, sigma2_moment).0;
            if at_fit < at_mom {
                fitted
            } else {
                sigma2_moment
            }
        }
    };
    let (s, s2, floor_hit) = metric.accumulate(&rx, tx_indices, sigma2);
    let mean = s / k as f64;
    let var = (s2 / k as f64 - mean * mean).max(0.0);
    let raw = h - mean;
    let clipped = raw < 0.0;
    Ok(AuxGmi {
        gmi: raw.clamp(0.0, h),
        raw_gmi: raw,
        ci95: 1.96 * (var / k as f64).sqrt(),
        sigma2,
        sigma2_moment,
        floor_hit,
        clipped,
    })
}

/// Minimizes a unimodal `f` on `[a, b]`.
fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `(symbol_rate · gmi, 100 (m / gmi - 1))`: net rate in bit/s and FEC
/// overhead in percent.
pub fn net_rate_and_oh(gmi: f64, m: usize, symbol_rate: f64) -> Result<(f64, f64)> {
    if !(gmi > 0.0) {
        return invalid(format!("GMI must be positive to define a net rate, got {gmi}"));
    }
    if gmi > m as f64 * (1.0 + 1e-12) {
        return invalid(format!("GMI {gmi} exceeds {m} bits per symbol"));
    }
    Ok((symbol_rate * gmi, 100.0 * (m as f64 / gmi - 1.0)))
}

/// Net rate per unit of channel spacing, bit/s/Hz.
pub fn spectral_efficiency(net_rate: f64, spacing: f64) -> f64 {
    net_rate / spacing
}

/// Relative reach increase `d_new / d_ref - 1`.
pub fn reach_gain(d_ref: f64, d_new: f64) -> f64 {
    d_new / d_ref - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReachInterp {
    /// Rate is linear in `ln(distance)` between grid points.
    #[default]
    LogDistance,
    /// Rate is linear in distance between grid points.
    Linear,
}

/// Distance at which a rate-vs-distance curve crosses `target`. `curve` is
/// `(distance, rate)` pairs with increasing distance and decreasing rate.
pub fn reach_at_rate(curve: &[(f64, f64)], target: f64, interp: ReachInterp) -> Result<f64> {
    if curve.len() < 2 {
        if let [(d, r)] = curve {
            if *r == target {
                return Ok(*d);
            }
        }
        return invalid("reach interpolation needs at least two curve points");
    }
    for w in curve.windows(2) {
        if !(w[1].0 > w[0].0) || w[1].1 > w[0].1 {
            return invalid("curve must have increasing distance and non-increasing rate");
        }
    }
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    if target > first.1 || target < last.1 {
        return invalid(format!("target rate {target} outside curve range [{}, {}]", last.1, first.1));
    }
    for w in curve.windows(2) {
        let ((d0, r0), (d1, r1)) = (w[0], w[1]);
        if target == r0 {
            return Ok(d0);
        }
        if target == r1 {
            return Ok(d1);
        }
        if target < r0 && target > r1 {
            let f = (r0 - target) / (r0 - r1);
            return Ok(match interp {
                ReachInterp::Linear => d0 + f * (d1 - d0),
                ReachInterp::LogDistance => (d0.ln() + f * (d1.ln() - d0.ln())).exp(),
            });
        }
    }
    Err(Error::Invariant("target not bracketed by a monotone curve".into()))
}

/// Per-channel GMI at one launch power and span count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmiReport {
    pub launch_power_dbm: f64,
    pub n_spans: usize,
    pub m: usize,
    pub symbol_rate: f64,
    pub per_channel_entropy: Vec<f64>,
    pub per_channel_gmi: Vec<f64>,
    pub per_channel_ci95: Vec<f64>,
    pub entropy: f64,
    pub avg_gmi: f64,
    pub net_rate_gbps: f64,
    pub fec_oh_percent: f64,
    /// Any channel's estimate was clipped or needed the log-sum-exp fallback.
    pub flagged: bool,
}

impl GmiReport {
    pub fn new(
        launch_power_dbm: f64,
        n_spans: usize,
        m: usize,
        symbol_rate: f64,
        per_channel_entropy: Vec<f64>,
        per_channel_gmi: Vec<f64>,
        per_channel_ci95: Vec<f64>,
        flagged: bool,
    ) -> Result<Self> {
        let n = per_channel_gmi.len();
        if n == 0 || per_channel_entropy.len() != n || per_channel_ci95.len() != n {
            return Err(Error::Shape("report needs one entropy, GMI and CI per channel".into()));
        }
        for (g, h) in per_channel_gmi.iter().zip(&per_channel_entropy) {
            if *g < 0.0 || *g > h + 1e-9 || *h > m as f64 + 1e-9 {
                return Err(Error::Invariant(format!("0 <= gmi <= entropy <= m violated: gmi {g}, entropy {h}, m {m}")));
            }
        }
        let avg_gmi = per_channel_gmi.iter().sum::<f64>() / n as f64;
        let entropy = per_channel_entropy.iter().sum::<f64>() / n as f64;
        let fec_oh_percent = if avg_gmi > 0.0 { 100.0 * (m as f64 / avg_gmi - 1.0) } else { f64::INFINITY };
        Ok(Self {
            launch_power_dbm,
            n_spans,
            m,
            symbol_rate,
            per_channel_entropy,
            per_channel_gmi,
            per_channel_ci95,
            entropy,
            avg_gmi,
            net_rate_gbps: symbol_rate * avg_gmi * 1e-9,
            fec_oh_percent,
            flagged,
        })
    }

    /// One CSV row per channel.
    pub fn rows(&self) -> Vec<ReportRow> {
        (0..self.per_channel_gmi.len())
            .map(|c| {
                let g = self.per_channel_gmi[c];
                ReportRow {
                    power_dbm: self.launch_power_dbm,
                    n_spans: self.n_spans,
                    channel: c,
                    entropy: self.per_channel_entropy[c],
                    gmi: g,
                    net_rate_gbps: self.symbol_rate * g * 1e-9,
                    fec_oh_pct: if g > 0.0 { 100.0 * (self.m as f64 / g - 1.0) } else { f64::INFINITY },
                    ci95: self.per_channel_ci95[c],
                }
            })
            .collect()
    }
}

/// Column order of evaluation CSV files.
pub const CSV_COLUMNS: [&str; 8] = ["power_dbm", "n_spans", "channel", "entropy", "gmi", "net_rate_gbps", "fec_oh_pct", "ci95"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub power_dbm: f64,
    pub n_spans: usize,
    pub channel: usize,
    pub entropy: f64,
    pub gmi: f64,
    pub net_rate_gbps: f64,
    pub fec_oh_pct: f64,
    pub ci95: f64,
}

/// Writes rows with the [`CSV_COLUMNS`] header.
pub fn write_rows_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Parse(format!("unexpected CSV columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Human-readable summary of a set of reports.
pub fn summary_text(reports: &[GmiReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(
            s,
            "P = {:+.2} dBm, {} spans: entropy {:.4} bit, avg GMI {:.4} bit, net {:.2} Gb/s, OH {:.2} %{}",
            r.launch_power_dbm,
            r.n_spans,
            r.entropy,
            r.avg_gmi,
            r.net_rate_gbps,
            r.fec_oh_percent,
            if r.flagged { " [flagged]" } else { "" }
        );
    }
    s
}
