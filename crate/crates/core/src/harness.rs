//! Experiment orchestration: launch-power and distance sweeps, baseline
//! formats, training runs with a run directory, energy reports and self tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_symbols, awgn_variance, edfa, ssfm_span, substream, wdm_mux, FiberLink, LinkParams, WdmConfig};
use crate::constellation::{format_label, make_mb_shaped_pm64qam, make_pm_qam, Constellation4D};
use crate::dsp::{cast_symbols, cd_compensate, design_rrc, frequency_shift, guard_symbols, matched_filter_downsample, modulate, DualPolWaveform, RrcFilter};
use crate::metrics::{gmi_aux_gaussian, reach_at_rate, write_rows_csv, AuxGmi, AuxOptions, GainMode, GmiReport, ReachInterp, ReportRow};
use crate::nn::gradcheck::{run_suite, ProbeReport};
use crate::trainer::{LearnedFormat, StepOutcome, TrainConfig, Trainer};
use crate::{dsp, Error, Precision, Real, Result};

const PURPOSE_TX: u64 = 0x7e;
const PURPOSE_LINK: u64 = 0x1e;

/// Names accepted by [`baseline`].
pub const BASELINES: [&str; 6] = ["pmqpsk", "pm8qam", "pm16qam", "pm32qam", "pm64qam", "pmps64qam"];

/// Default Maxwell-Boltzmann parameters swept for `pmps64qam`.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 0.005, 0.01, 0.015, 0.02, 0.03];

/// PM-QAM baselines by name. `pmps64qam:<lambda>` selects a
/// Maxwell-Boltzmann shaped PM-64QAM; a bare `pmps64qam` uses λ = 0.01.
pub fn baseline(name: &str) -> Result<Constellation4D> {
    let lower = name.to_ascii_lowercase().replace(['-', '_'], "");
    if let Some(rest) = lower.strip_prefix("pmps64qam") {
        let lambda = match rest.strip_prefix(':') {
            Some(v) => v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad lambda in {name:?}")))?,
            None if rest.is_empty() => 0.01,
            None => return Err(Error::InvalidArgument(format!("unknown baseline {name:?}"))),
        };
        return make_mb_shaped_pm64qam(lambda);
    }
    let bits = match lower.as_str() {
        "pmqpsk" | "pm4qam" => 2,
        "pm8qam" => 3,
        "pm16qam" => 4,
        "pm32qam" => 5,
        "pm64qam" => 6,
        _ => return Err(Error::InvalidArgument(format!("unknown baseline {name:?} (known: {})", BASELINES.join(", ")))),
    };
    make_pm_qam(bits)
}

/// A baseline name or a path to a format file.
pub fn load_format(spec: &str) -> Result<Constellation4D> {
    if Path::new(spec).is_file() {
        let c = Constellation4D::load(spec)?;
        c.validate()?;
        return Ok(c);
    }
    baseline(spec).map_err(|e| Error::InvalidArgument(format!("{spec:?} is neither a readable format file nor a baseline ({e})")))
}

/// `start, start + step, ...` up to and including `stop`.
pub fn power_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::InvalidArgument(format!("bad power grid {start}:{step}:{stop}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub link: LinkParams,
    pub n_channels: usize,
    pub symbol_rate: f64,
    pub spacing: f64,
    pub sps: usize,
    pub rolloff: f64,
    pub rrc_span: usize,
    /// Launch power per channel, dBm; all channels share it.
    pub powers_dbm: Vec<f64>,
    pub spans: Vec<usize>,
    /// Symbols per channel.
    pub n_symbols: usize,
    pub seed: u64,
    pub gain: GainMode,
    /// Net rates for the reach table, Gb/s.
    pub target_rates_gbps: Vec<f64>,
    pub reach_interp: ReachInterp,
    /// Drop filter and dispersion memory at both ends before estimating GMI.
    pub guard: bool,
    pub precision: Precision,
}

impl Default for EvalConfig {
    /// Five 50 GBd channels, −4..+6 dBm in 0.5 dB steps, 25..88 spans.
    fn default() -> Self {
        Self {
            link: LinkParams::default(),
            n_channels: 5,
            symbol_rate: 50e9,
            spacing: 51.5e9,
            sps: 16,
            rolloff: 0.01,
            rrc_span: 128,
            powers_dbm: power_grid(-4.0, 6.0, 0.5).unwrap_or_default(),
            spans: (25..=88).collect(),
            n_symbols: 1 << 14,
            seed: 1,
            gain: GainMode::PerPolarization,
            target_rates_gbps: vec![400.0],
            reach_interp: ReachInterp::LogDistance,
            guard: false,
            precision: Precision::Double,
        }
    }
}

impl EvalConfig {
    pub fn wdm(&self) -> WdmConfig {
        WdmConfig {
            n_channels: self.n_channels,
            symbol_rate: self.symbol_rate,
            spacing: self.spacing,
            sps: self.sps,
            rolloff: self.rolloff,
            per_channel_power_dbm: vec![0.0; self.n_channels],
        }
    }

    pub fn max_spans(&self) -> usize {
        self.spans.iter().copied().max().unwrap_or(0)
    }

    pub fn fiber_link(&self, n_spans: usize) -> Result<FiberLink> {
        let mut link = self.link.to_link(n_spans.max(1))?;
        link.n_spans = n_spans;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        self.wdm().validate()?;
        design_rrc(self.rolloff, self.sps, self.rrc_span)?;
        self.fiber_link(1)?;
        if self.powers_dbm.is_empty() || self.spans.is_empty() {
            return Err(Error::InvalidArgument("power and span grids must be non-empty".into()));
        }
        if self.powers_dbm.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("launch powers must be finite".into()));
        }
        if self.n_symbols < 2 {
            return Err(Error::InvalidArgument("need at least 2 symbols per channel".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("invalid config: {e}")))
    }
}

/// Transmitted indices per channel for `cfg.seed`; identical for every
/// power, span count and format of the same size.
fn draw_indices(format: &Constellation4D, cfg: &EvalConfig) -> Vec<Vec<usize>> {
    (0..cfg.n_channels as u64)
        .map(|c| format.sample_indices(cfg.n_symbols, &mut substream(cfg.seed, &[PURPOSE_TX, c])))
        .collect()
}

fn guard_range(cfg: &EvalConfig, filter: &RrcFilter, link: &FiberLink) -> std::ops::Range<usize> {
    let n = cfg.n_symbols;
    if !cfg.guard {
        return 0..n;
    }
    let g = guard_symbols(filter, link.beta2, link.total_length(), cfg.symbol_rate);
    if 2 * g >= n {
        log::warn!("guard of {g} symbols leaves nothing of {n}; using all symbols");
        return 0..n;
    }
    g..n - g
}

struct Launched<T> {
    field: DualPolWaveform<T>,
    /// Amplitude gain applied to every channel.
    gain: f64,
}

fn launch<T: Real>(format: &Constellation4D, indices: &[Vec<usize>], filter: &RrcFilter, cfg: &EvalConfig, power_dbm: f64) -> Result<Launched<T>> {
    let wdm = cfg.wdm();
    let target = dsp::dbm_to_watt(power_dbm);
    let mut chans = Vec::with_capacity(indices.len());
    let mut gain = 0.0;
    for idx in indices {
        let syms: Vec<[T; 4]> = cast_symbols(&format.gather(idx));
        let w = modulate(&syms, filter, cfg.symbol_rate)?;
        // one common gain keeps all channels at the same symbol scale
        if chans.is_empty() {
            gain = (target / w.mean_power()).sqrt();
        }
        chans.push(w.scaled(T::of(gain)));
    }
    let field = if chans.len() == 1 { chans.pop().unwrap_or_else(|| unreachable!()) } else { wdm_mux(&chans, &wdm)? };
    Ok(Launched { field, gain })
}

fn receive<T: Real>(
    field: &DualPolWaveform<T>,
    format: &Constellation4D,
    indices: &[Vec<usize>],
    filter: &RrcFilter,
    cfg: &EvalConfig,
    link: &FiberLink,
    gain: f64,
    power_dbm: f64,
) -> Result<GmiReport> {
    let wdm = cfg.wdm();
    let comp = cd_compensate(field.clone(), link.beta2, link.total_length());
    let range = guard_range(cfg, filter, link);
    let opts = AuxOptions { gain: cfg.gain, ..AuxOptions::default() };
    let mut gmis = Vec::new();
    let mut cis = Vec::new();
    let mut flagged = false;
    for (c, idx) in indices.iter().enumerate() {
        let base = if cfg.n_channels == 1 { comp.clone() } else { frequency_shift(comp.clone(), -wdm.channel_offset(c, comp.len())) };
        let rx = matched_filter_downsample(&base, filter, cfg.n_symbols)?;
        let rx: Vec<[f64; 4]> = rx[range.clone()].iter().map(|s| s.map(|v| v.f64() / gain)).collect();
        let r = gmi_aux_gaussian(format, &idx[range.clone()], &rx, &opts)?;
        flagged |= r.floor_hit || r.clipped;
        gmis.push(r.gmi);
        cis.push(r.ci95);
    }
    let h = format.entropy();
    GmiReport::new(power_dbm, link.n_spans, format.m(), cfg.symbol_rate, vec![h; gmis.len()], gmis, cis, flagged)
}

fn sweep_power<T: Real>(format: &Constellation4D, cfg: &EvalConfig, filter: &RrcFilter, indices: &[Vec<usize>], pidx: usize) -> Result<Vec<GmiReport>> {
    let p = cfg.powers_dbm[pidx];
    let grid: BTreeSet<usize> = cfg.spans.iter().copied().collect();
    let Launched { mut field, gain } = launch::<T>(format, indices, filter, cfg, p)?;
    let mut out = Vec::with_capacity(grid.len());
    let span_link = cfg.fiber_link(1)?;
    for n in 0..=cfg.max_spans() {
        if n > 0 {
            field = ssfm_span(field, &span_link)?;
            let mut rng = substream(cfg.seed, &[PURPOSE_LINK, pidx as u64, (n - 1) as u64]);
            field = edfa(field, &span_link, &mut rng);
            if !field.is_finite() {
                return Err(Error::Numerical(format!("field diverged after span {n} at {p} dBm")));
            }
        }
        if grid.contains(&n) {
            out.push(receive(&field, format, indices, filter, cfg, &cfg.fiber_link(n)?, gain, p)?);
        }
    }
    Ok(out)
}

/// Full link simulation of `format` on every (power, span count) of the
/// grid. Powers run in parallel; spans are collected along one propagation
/// per power. Reports are sorted by power, then span count.
pub fn evaluate(format: &Constellation4D, cfg: &EvalConfig) -> Result<Vec<GmiReport>> {
    cfg.validate()?;
    format.validate()?;
    match cfg.precision {
        Precision::Single => evaluate_with::<f32>(format, cfg),
        Precision::Double => evaluate_with::<f64>(format, cfg),
    }
}

fn evaluate_with<T: Real>(format: &Constellation4D, cfg: &EvalConfig) -> Result<Vec<GmiReport>> {
    let filter = design_rrc(cfg.rolloff, cfg.sps, cfg.rrc_span)?;
    let indices = draw_indices(format, cfg);
    let per: Vec<Vec<GmiReport>> = (0..cfg.powers_dbm.len())
        .into_par_iter()
        .map(|i| sweep_power::<T>(format, cfg, &filter, &indices, i))
        .collect::<Result<_>>()?;
    let mut all: Vec<GmiReport> = per.into_iter().flatten().collect();
    all.sort_by(|a, b| a.launch_power_dbm.total_cmp(&b.launch_power_dbm).then(a.n_spans.cmp(&b.n_spans)));
    Ok(all)
}

/// `gmi_aux_gaussian` of `format` over symbol-level AWGN at `snr_db` per 2D.
pub fn evaluate_awgn(format: &Constellation4D, snr_db: f64, n_symbols: usize, seed: u64) -> Result<AuxGmi> {
    let idx = format.sample_indices(n_symbols, &mut substream(seed, &[PURPOSE_TX]));
    let mut rx = format.gather(&idx);
    awgn_symbols(&mut rx, awgn_variance(snr_db, format.mean_energy()), &mut substream(seed, &[PURPOSE_LINK]));
    gmi_aux_gaussian(format, &idx, &rx, &AuxOptions::default())
}

/// Highest average GMI over the power grid, per span count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPower {
    pub n_spans: usize,
    pub distance_km: f64,
    pub power_dbm: f64,
    pub avg_gmi: f64,
    pub net_rate_gbps: f64,
}

pub fn best_power(reports: &[GmiReport], span_length_km: f64) -> Vec<BestPower> {
    let spans: BTreeSet<usize> = reports.iter().map(|r| r.n_spans).collect();
    spans
        .into_iter()
        .filter_map(|n| {
            reports
                .iter()
                .filter(|r| r.n_spans == n)
                .max_by(|a, b| a.avg_gmi.total_cmp(&b.avg_gmi))
                .map(|r| BestPower {
                    n_spans: n,
                    distance_km: n as f64 * span_length_km,
                    power_dbm: r.launch_power_dbm,
                    avg_gmi: r.avg_gmi,
                    net_rate_gbps: r.net_rate_gbps,
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachEntry {
    pub target_gbps: f64,
    /// `None` when the curve never crosses the target inside the span grid.
    pub reach_km: Option<f64>,
}

/// Distance at which the best-power net rate first drops below each target.
pub fn reach_table(best: &[BestPower], targets: &[f64], interp: ReachInterp) -> Vec<ReachEntry> {
    let curve: Vec<(f64, f64)> = best.iter().filter(|b| b.distance_km > 0.0).map(|b| (b.distance_km, b.net_rate_gbps)).collect();
    targets
        .iter()
        .map(|&t| {
            let reach_km = curve.iter().position(|&(_, r)| r < t).and_then(|i| {
                if i == 0 {
                    return None;
                }
                reach_at_rate(&curve[i - 1..=i], t, interp).ok()
            });
            ReachEntry { target_gbps: t, reach_km }
        })
        .collect()
}

/// Files written by [`cmd_evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub reports: Vec<GmiReport>,
    pub best: Vec<BestPower>,
    pub reach: Vec<ReachEntry>,
    pub files: Vec<PathBuf>,
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates `format_spec` (file or baseline name) and writes
/// `config.toml`, `gmi.csv`, `best_power.csv`, `reach.csv` and `summary.txt`.
/// For `pmps64qam` without an explicit λ, every λ in `lambdas` is evaluated
/// and the best per grid point is kept.
pub fn cmd_evaluate(format_spec: &str, cfg: &EvalConfig, lambdas: &[f64], out_dir: impl AsRef<Path>) -> Result<EvalOutput> {
    let out_dir = out_dir.as_ref();
    cfg.validate()?;
    let is_ps_sweep = format_spec.eq_ignore_ascii_case("pmps64qam") && !lambdas.is_empty();
    let reports = if is_ps_sweep {
        let mut best: Option<Vec<GmiReport>> = None;
        for &l in lambdas {
            let r = evaluate(&make_mb_shaped_pm64qam(l)?, cfg)?;
            best = Some(match best {
                None => r,
                Some(b) => b.into_iter().zip(r).map(|(x, y)| if y.avg_gmi > x.avg_gmi { y } else { x }).collect(),
            });
        }
        best.unwrap_or_default()
    } else {
        evaluate(&load_format(format_spec)?, cfg)?
    };
    let best = best_power(&reports, cfg.link.span_length_km);
    let reach = reach_table(&best, &cfg.target_rates_gbps, cfg.reach_interp);

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let snap = out_dir.join("config.toml");
    std::fs::write(&snap, format!("# format = {format_spec:?}\n{}", cfg.to_toml()?))?;
    files.push(snap);
    let rows: Vec<ReportRow> = reports.iter().flat_map(GmiReport::rows).collect();
    let p = out_dir.join("gmi.csv");
    write_rows_csv(&p, &rows)?;
    files.push(p);
    let p = out_dir.join("best_power.csv");
    write_csv(&p, &best)?;
    files.push(p);
    let p = out_dir.join("reach.csv");
    write_csv(&p, &reach)?;
    files.push(p);
    let p = out_dir.join("summary.txt");
    std::fs::write(&p, crate::metrics::summary_text(&reports))?;
    files.push(p);
    Ok(EvalOutput { reports, best, reach, files })
}

/// Paths of a training run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn loss(&self) -> PathBuf {
        self.root.join("loss.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }
}

fn write_loss_csv<T: Real>(path: &Path, t: &Trainer<T>) -> Result<()> {
    let mut s = String::from("iteration");
    for c in 0..t.config().n_channels {
        let _ = write!(s, ",gmi_ch{c}");
    }
    s.push_str(",loss\n");
    for r in t.history() {
        let _ = write!(s, "{}", r.iteration);
        for g in &r.per_channel_gmi {
            let _ = write!(s, ",{g}");
        }
        let _ = writeln!(s, ",{}", r.loss);
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn save_state<T: Real>(dir: &RunDir, t: &Trainer<T>) -> Result<()> {
    let tmp = dir.root.join("checkpoint.json.tmp");
    t.save_checkpoint(&tmp)?;
    std::fs::rename(&tmp, dir.checkpoint())?;
    write_loss_csv(&dir.loss(), t)
}

/// Trains with `cfg` inside `out_dir`: writes `config.toml`, `loss.csv`,
/// `checkpoint.json` and the learned formats. With `resume`, continues from
/// an existing checkpoint in the directory (its configuration wins, except
/// `max_iters`).
pub fn cmd_train(cfg: &TrainConfig, out_dir: impl AsRef<Path>, resume: bool) -> Result<LearnedFormat> {
    match cfg.precision {
        Precision::Single => train_with::<f32>(cfg, out_dir.as_ref(), resume),
        Precision::Double => train_with::<f64>(cfg, out_dir.as_ref(), resume),
    }
}

fn train_with<T: Real>(cfg: &TrainConfig, out_dir: &Path, resume: bool) -> Result<LearnedFormat> {
    let dir = RunDir::new(out_dir);
    std::fs::create_dir_all(&dir.root)?;
    let mut trainer = if resume && dir.checkpoint().is_file() {
        let mut t = Trainer::<T>::load_checkpoint(dir.checkpoint())?;
        t.set_max_iters(cfg.max_iters);
        log::info!("resuming at iteration {}", t.iteration());
        t
    } else {
        Trainer::<T>::new(cfg.clone())?
    };
    std::fs::write(dir.config(), trainer.config().to_toml()?)?;
    let every = trainer.config().checkpoint_every;
    let result = trainer.run(|t, out| {
        if let StepOutcome::Updated(r) = out {
            if every > 0 && (r.iteration + 1) % every == 0 {
                save_state(&dir, t)?;
            }
        }
        Ok(())
    });
    save_state(&dir, &trainer)?;
    result?;
    let learned = trainer.extract_format()?;
    learned.save(&dir.root)?;
    for (c, d) in learned.degenerate.iter().enumerate() {
        if *d {
            log::warn!("channel {c}: learned constellation has coincident points");
        }
    }
    Ok(learned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub index: usize,
    pub label: String,
    pub energy: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub min: f64,
    pub max: f64,
    /// Probability-weighted mean energy.
    pub mean: f64,
    /// Probability-weighted variance of the energy.
    pub variance: f64,
}

/// Energy and probability of every symbol index.
pub fn energy_report(c: &Constellation4D) -> EnergyReport {
    let e = c.energies();
    let rows: Vec<EnergyRow> = e
        .iter()
        .enumerate()
        .map(|(i, &en)| EnergyRow { index: i, label: format_label(c.labels()[i], c.m()), energy: en, probability: c.probs()[i] })
        .collect();
    let mean: f64 = rows.iter().map(|r| r.energy * r.probability).sum();
    let variance = rows.iter().map(|r| r.probability * (r.energy - mean).powi(2)).sum();
    EnergyReport {
        min: e.iter().cloned().fold(f64::INFINITY, f64::min),
        max: e.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean,
        variance,
        rows,
    }
}

impl EnergyReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path.as_ref(), &self.rows)
    }

    pub fn summary(&self) -> String {
        format!("min {:.6} max {:.6} mean {:.6} variance {:.6}", self.min, self.max, self.mean, self.variance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrcSelftest {
    pub taps: usize,
    pub isi_db: f64,
    /// Max error of a noiseless modulate → matched filter loopback.
    pub loopback_max_err: f64,
    pub invariants_ok: bool,
}

impl RrcSelftest {
    pub fn passes(&self) -> bool {
        self.invariants_ok && self.isi_db < -40.0 && self.loopback_max_err < 1e-6
    }
}

/// Filter invariants, truncated-cascade ISI and a loopback over 1024 random
/// PM-16QAM symbols.
pub fn rrc_selftest(rolloff: f64, sps: usize, span_symbols: usize, seed: u64) -> Result<RrcSelftest> {
    let f = design_rrc(rolloff, sps, span_symbols)?;
    let c = make_pm_qam(4)?;
    let idx = c.sample_indices(1024, &mut substream(seed, &[PURPOSE_TX]));
    let tx = c.gather(&idx);
    let w = modulate(&tx, &f, 1.0)?;
    let rx = matched_filter_downsample(&w, &f, tx.len())?;
    let err = tx.iter().zip(&rx).flat_map(|(a, b)| (0..4).map(move |i| (a[i] - b[i]).abs())).fold(0.0, f64::max);
    Ok(RrcSelftest { taps: f.taps.len(), isi_db: f.isi_db(), loopback_max_err: err, invariants_ok: f.validate().is_ok() })
}

/// Finite-difference checks of every differentiable operation.
pub fn grad_check(n_probes: usize, h: f64, seed: u64) -> Result<Vec<ProbeReport>> {
    run_suite(n_probes, h, seed)
}

/// Writes `name,probes,max_rel_err,pass` lines.
pub fn write_grad_report(mut out: impl std::io::Write, reports: &[ProbeReport], tol: f64) -> Result<()> {
    writeln!(out, "name,probes,max_rel_err,pass")?;
    for r in reports {
        writeln!(out, "{},{},{:.3e},{}", r.name, r.probes, r.max_rel_err, r.passes(tol))?;
    }
    Ok(())
}
