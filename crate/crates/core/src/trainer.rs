//! End-to-end training of the shaping networks through the channel.
//!
//! Per channel: a probabilistic-shaping network yields symbol logits, a
//! straight-through Gumbel-Softmax sampler draws one-hot symbol vectors, a
//! geometric-shaping network maps them to 4D points (energy-normalized under
//! the current probabilities), and one demapper network per bit estimates
//! `p(b_i = 1 | y)` at the receiver. The loss is the negated sum over
//! channels of the demapper-based GMI, averaged over batch items.

use std::f64::consts::{LN_10, LN_2};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_variance, substream, FiberLink, LinkParams, WdmConfig};
use crate::constellation::Constellation4D;
use crate::dsp::{design_rrc, RrcFilter};
use crate::nn::{adam_step, gumbel_softmax_st, signal, AdamConfig, AdamState, DenseNet, Tape, Var};
use crate::{Error, Precision, Real, Result};

/// Stream labels for [`substream`] keys.
const PURPOSE_INIT: u64 = 0x1417;
const PURPOSE_SAMPLE: u64 = 0x5a3;
const PURPOSE_NOISE: u64 = 0xa5e;
const PURPOSE_LINK: u64 = 0x11c;

/// Steps aborted in a row before training stops.
pub const MAX_CONSECUTIVE_ABORTS: u32 = 3;

/// Minimum distance below which an extracted constellation is flagged.
pub const DEGENERATE_DISTANCE: f64 = 1e-6;

const CHECKPOINT_MAGIC: &str = "fibershape-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Channel seen by the training graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// Symbol-level additive white Gaussian noise at `snr_db` per 2D; no
    /// pulse shaping and no launch power.
    Awgn,
    /// Pulse shaping, launch power, WDM, split-step link, CDC and matched filter.
    #[default]
    Fiber,
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(Self::Awgn),
            "fiber" | "ssfm" => Ok(Self::Fiber),
            _ => Err(Error::Parse(format!("unknown channel kind {s:?} (expected awgn or fiber)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Bits per 4D symbol.
    pub m: usize,
    pub n_channels: usize,
    pub n_spans_train: usize,
    /// Independent waveform realizations per update.
    pub batch_items: usize,
    pub symbols_per_channel: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: u64,
    pub precision: Precision,
    /// Gumbel-Softmax temperature of the reverse-pass surrogate.
    pub temperature: f64,
    pub seed: u64,
    /// Width of every hidden layer.
    pub hidden_width: usize,
    pub channel: ChannelKind,
    /// SNR per 2D component for the AWGN channel, dB.
    pub snr_db: f64,
    pub initial_power_dbm: f64,
    pub learn_power: bool,
    pub learn_probabilities: bool,
    /// Baud.
    pub symbol_rate: f64,
    /// Channel spacing, Hz.
    pub spacing: f64,
    pub sps: usize,
    pub rolloff: f64,
    pub rrc_span: usize,
    pub link: LinkParams,
    /// Iterations between checkpoints in a run directory; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Reduced profile that runs on a workstation: one channel, m = 6,
    /// 10 spans, 2^11 symbols, 25 split steps per span, double precision.
    pub fn desk() -> Self {
        Self {
            m: 6,
            n_channels: 1,
            n_spans_train: 10,
            batch_items: 1,
            symbols_per_channel: 1 << 11,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 2000,
            precision: Precision::Double,
            temperature: 1.0,
            seed: 1,
            hidden_width: 64,
            channel: ChannelKind::Fiber,
            snr_db: 12.0,
            initial_power_dbm: 0.0,
            learn_power: true,
            learn_probabilities: true,
            symbol_rate: 50e9,
            spacing: 51.5e9,
            sps: 4,
            rolloff: 0.01,
            rrc_span: 128,
            link: LinkParams { steps_per_span: 25, ..LinkParams::default() },
            checkpoint_every: 0,
            log_every: 100,
        }
    }

    /// Full-scale setting: 5×50 GBd channels, m = 10, 50 spans, batch of 2,
    /// 2^13 symbols per channel, 16 samples per symbol, single precision.
    pub fn full() -> Self {
        Self {
            m: 10,
            n_channels: 5,
            n_spans_train: 50,
            batch_items: 2,
            symbols_per_channel: 1 << 13,
            max_iters: 300_000,
            precision: Precision::Single,
            hidden_width: 256,
            sps: 16,
            checkpoint_every: 5000,
            log_every: 100,
            ..Self::desk()
        }
    }

    /// One channel, m = 4, symbol-level AWGN at 12 dB.
    pub fn toy_awgn() -> Self {
        Self {
            m: 4,
            channel: ChannelKind::Awgn,
            snr_db: 12.0,
            symbols_per_channel: 1024,
            max_iters: 5000,
            hidden_width: 32,
            lr: 1e-3,
            ..Self::desk()
        }
    }

    /// Named profile: `desk`, `full` or `toy-awgn`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "toy-awgn" | "toy_awgn" => Ok(Self::toy_awgn()),
            _ => Err(Error::InvalidArgument(format!("unknown profile {name:?} (expected desk, full or toy-awgn)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(1..=12).contains(&self.m) {
            return bad(format!("m must be in 1..=12, got {}", self.m));
        }
        if self.n_channels == 0 || self.batch_items == 0 || self.symbols_per_channel == 0 || self.hidden_width == 0 {
            return bad("n_channels, batch_items, symbols_per_channel and hidden_width must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("invalid ADAM settings lr={} beta1={} beta2={} eps={}", self.lr, self.beta1, self.beta2, self.eps));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !self.initial_power_dbm.is_finite() {
            return bad("initial_power_dbm must be finite".into());
        }
        match self.channel {
            ChannelKind::Awgn => {
                if !self.snr_db.is_finite() {
                    return bad("snr_db must be finite".into());
                }
            }
            ChannelKind::Fiber => {
                self.wdm().validate()?;
                design_rrc(self.rolloff, self.sps, self.rrc_span)?;
                self.fiber_link()?;
            }
        }
        Ok(())
    }

    pub fn wdm(&self) -> WdmConfig {
        WdmConfig {
            n_channels: self.n_channels,
            symbol_rate: self.symbol_rate,
            spacing: self.spacing,
            sps: self.sps,
            rolloff: self.rolloff,
            per_channel_power_dbm: vec![self.initial_power_dbm; self.n_channels],
        }
    }

    pub fn fiber_link(&self) -> Result<FiberLink> {
        self.link.to_link(self.n_spans_train)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Trainable parameters of one WDM channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModels<T> {
    pub ps: DenseNet<T>,
    pub gs: DenseNet<T>,
    /// One network per bit, MSB first.
    pub demappers: Vec<DenseNet<T>>,
    /// Launch power in dBm, `1×1`.
    pub power_dbm: Array2<T>,
}

impl<T: Real> ChannelModels<T> {
    pub fn params(&self) -> Vec<&Array2<T>> {
        let mut p = self.ps.params();
        p.extend(self.gs.params());
        for d in &self.demappers {
            p.extend(d.params());
        }
        p.push(&self.power_dbm);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut p = self.ps.params_mut();
        p.extend(self.gs.params_mut());
        for d in &mut self.demappers {
            p.extend(d.params_mut());
        }
        p.push(&mut self.power_dbm);
        p
    }
}

/// All channels' networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models<T> {
    pub channels: Vec<ChannelModels<T>>,
}

impl<T: Real> Models<T> {
    pub fn params(&self) -> Vec<&Array2<T>> {
        self.channels.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.channels.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Per channel: a PS net (`M → M`), a GS net (`M → 4`), `m` demappers
/// (`4 → 1`) and a launch power initialized at `initial_power_dbm`.
pub fn build_models<T: Real>(cfg: &TrainConfig) -> Models<T> {
    let w = cfg.hidden_width;
    let channels = (0..cfg.n_channels as u64)
        .map(|c| ChannelModels {
            ps: DenseNet::probabilistic_shaping(cfg.m, w, &mut substream(cfg.seed, &[PURPOSE_INIT, c, 0])),
            gs: DenseNet::geometric_shaping(cfg.m, w, &mut substream(cfg.seed, &[PURPOSE_INIT, c, 1])),
            demappers: (0..cfg.m as u64).map(|i| DenseNet::demapper(w, &mut substream(cfg.seed, &[PURPOSE_INIT, c, 2 + i]))).collect(),
            power_dbm: Array2::from_elem((1, 1), T::of(cfg.initial_power_dbm)),
        })
        .collect();
    Models { channels }
}

/// Training-curve entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    /// Mean over batch items of each channel's GMI estimate, bits.
    pub per_channel_gmi: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Updated(LossRecord),
    /// The step produced non-finite values and was skipped.
    Aborted { iteration: u64, reason: String },
}

/// Nodes of one recorded forward pass.
pub struct Forward<T: Real> {
    pub tape: Tape<T>,
    pub loss: Var,
    /// Parameter leaves in [`Models::params`] order.
    pub params: Vec<Var>,
    /// Per-channel `1×M` symbol logits.
    pub logits: Vec<Var>,
    /// `gmi[item][channel]` in bits.
    pub gmi: Vec<Vec<Var>>,
    /// Sampled symbol indices, `indices[item][channel]`.
    pub indices: Vec<Vec<Vec<usize>>>,
}

struct ChannelVars {
    ps: Vec<Var>,
    gs: Vec<Var>,
    demappers: Vec<Vec<Var>>,
    power: Var,
}

/// Per-channel nodes shared by every batch item.
struct Shared {
    logits: Var,
    entropy: Var,
    points: Var,
}

/// Transmitted bits `b_i` (MSB first) of every sampled index.
fn bit_columns(indices: &[usize], m: usize) -> Vec<Vec<u8>> {
    (0..m).map(|i| indices.iter().map(|&j| ((j >> (m - 1 - i)) & 1) as u8).collect()).collect()
}

fn probabilities_from_logits(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct Trainer<T: Real> {
    cfg: TrainConfig,
    models: Models<T>,
    adam: AdamState<T>,
    iteration: u64,
    consecutive_aborts: u32,
    history: Vec<LossRecord>,
    filter: RrcFilter,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision != T::PRECISION {
            return Err(Error::InvalidArgument(format!("config asks for {:?} precision, trainer is {:?}", cfg.precision, T::PRECISION)));
        }
        let models = build_models::<T>(&cfg);
        let adam = AdamState::new(models.params());
        let filter = design_rrc(cfg.rolloff, cfg.sps.max(2), cfg.rrc_span)?;
        Ok(Self { cfg, models, adam, iteration: 0, consecutive_aborts: 0, history: Vec::new(), filter })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn models(&self) -> &Models<T> {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut Models<T> {
        &mut self.models
    }

    /// Changes the stopping point, e.g. to extend a resumed run.
    pub fn set_max_iters(&mut self, n: u64) {
        self.cfg.max_iters = n;
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    fn register(&self, tape: &Tape<T>) -> (Vec<ChannelVars>, Vec<Var>) {
        let mut all = Vec::new();
        let mut per = Vec::with_capacity(self.models.channels.len());
        for ch in &self.models.channels {
            let ps = ch.ps.register(tape);
            let gs = ch.gs.register(tape);
            let demappers: Vec<Vec<Var>> = ch.demappers.iter().map(|d| d.register(tape)).collect();
            let power = tape.leaf(ch.power_dbm.clone());
            all.extend(&ps);
            all.extend(&gs);
            for d in &demappers {
                all.extend(d);
            }
            all.push(power);
            per.push(ChannelVars { ps, gs, demappers, power });
        }
        (per, all)
    }

    fn shared(&self, tape: &Tape<T>, ch: &ChannelModels<T>, vars: &ChannelVars, eye: Var) -> Result<Shared> {
        let size = 1usize << self.cfg.m;
        let logits = if self.cfg.learn_probabilities {
            let out = ch.ps.forward_on(tape, &vars.ps, eye, true)?;
            tape.diag(out)?
        } else {
            tape.leaf(Array2::zeros((1, size)))
        };
        let logp = tape.log_softmax_rows(logits);
        let probs = tape.exp(logp);
        let plogp = tape.mul(probs, logp)?;
        let s = tape.sum(plogp);
        let entropy = tape.scale(s, T::of(-1.0 / LN_2));

        let raw = ch.gs.forward_on(tape, &vars.gs, eye, true)?;
        let sq = tape.mul(raw, raw)?;
        let energies = tape.sum_cols(sq);
        let mean_energy = tape.matmul(probs, energies)?;
        let inv = tape.powf(mean_energy, T::of(-0.5));
        let points = tape.mul_scalar(raw, inv)?;
        Ok(Shared { logits, entropy, points })
    }

    /// `H + (1/K) Σ_i Σ_k h_b / ln 2` from the demapper logits.
    fn channel_gmi(&self, tape: &Tape<T>, ch: &ChannelModels<T>, vars: &ChannelVars, entropy: Var, rx: Var, indices: &[usize]) -> Result<Var> {
        let k = indices.len();
        let mut total: Option<Var> = None;
        for ((net, v), bits) in ch.demappers.iter().zip(&vars.demappers).zip(bit_columns(indices, self.cfg.m)) {
            let z = net.forward_on(tape, v, rx, false)?;
            let ll = tape.bit_log_likelihood(z, bits)?;
            total = Some(match total {
                Some(t) => tape.add(t, ll)?,
                None => ll,
            });
        }
        let total = total.ok_or_else(|| Error::Invariant("no demappers".into()))?;
        let avg = tape.scale(total, T::of(1.0 / (k as f64 * LN_2)));
        tape.add(entropy, avg)
    }

    /// Records the forward pass of `iteration` for the given batch items.
    /// The loss sums items in increasing item order regardless of the order
    /// in which they are listed.
    pub fn forward(&self, iteration: u64, items: &[u64]) -> Result<Forward<T>> {
        let cfg = &self.cfg;
        let tape = Tape::new();
        let (vars, params) = self.register(&tape);
        let size = 1usize << cfg.m;
        let eye = tape.leaf(Array2::eye(size));
        let shared = self
            .models
            .channels
            .iter()
            .zip(&vars)
            .map(|(ch, v)| self.shared(&tape, ch, v, eye))
            .collect::<Result<Vec<_>>>()?;

        let k = cfg.symbols_per_channel;
        let mut gmi = Vec::with_capacity(items.len());
        let mut indices = Vec::with_capacity(items.len());
        for &item in items {
            let mut syms = Vec::with_capacity(cfg.n_channels);
            let mut idx = Vec::with_capacity(cfg.n_channels);
            for (c, sh) in shared.iter().enumerate() {
                let mut rng = substream(cfg.seed, &[iteration, item, c as u64, PURPOSE_SAMPLE]);
                let (oh, chosen) = gumbel_softmax_st(&tape, sh.logits, k, cfg.temperature, &mut rng)?;
                syms.push(tape.matmul(oh, sh.points)?);
                idx.push(chosen);
            }
            let rx = match cfg.channel {
                ChannelKind::Awgn => self.awgn_receive(&tape, iteration, item, &syms)?,
                ChannelKind::Fiber => self.fiber_receive(&tape, iteration, item, &syms, &vars)?,
            };
            let mut per = Vec::with_capacity(cfg.n_channels);
            for c in 0..cfg.n_channels {
                per.push(self.channel_gmi(&tape, &self.models.channels[c], &vars[c], shared[c].entropy, rx[c], &idx[c])?);
            }
            gmi.push(per);
            indices.push(idx);
        }

        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by_key(|&i| items[i]);
        let mut total: Option<Var> = None;
        for &i in &order {
            for &g in &gmi[i] {
                total = Some(match total {
                    Some(t) => tape.add(t, g)?,
                    None => g,
                });
            }
        }
        let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let loss = tape.scale(total, T::of(-1.0 / items.len() as f64));
        let logits = shared.iter().map(|s| s.logits).collect();
        Ok(Forward { tape, loss, params, logits, gmi, indices })
    }

    fn awgn_receive(&self, tape: &Tape<T>, iteration: u64, item: u64, syms: &[Var]) -> Result<Vec<Var>> {
        let var = awgn_variance(self.cfg.snr_db, 1.0);
        let sd = (0.5 * var).sqrt();
        syms.iter()
            .enumerate()
            .map(|(c, &s)| {
                let mut rng = substream(self.cfg.seed, &[iteration, item, c as u64, PURPOSE_NOISE]);
                let (rows, cols) = tape.shape(s);
                let noise = Array2::from_shape_fn((rows, cols), |_| {
                    let n: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                    T::of(n * sd)
                });
                let n = tape.leaf(noise);
                tape.add(s, n)
            })
            .collect()
    }

    fn fiber_receive(&self, tape: &Tape<T>, iteration: u64, item: u64, syms: &[Var], vars: &[ChannelVars]) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let wdm = cfg.wdm();
        let link = cfg.fiber_link()?;
        let fs = wdm.sample_rate();
        let mut launched = Vec::with_capacity(syms.len());
        let mut rx_gain = Vec::with_capacity(syms.len());
        for (&s, v) in syms.iter().zip(vars) {
            let wave = signal::pulse_shape(tape, s, &self.filter, cfg.symbol_rate)?;
            // P = 1 mW · 10^(p/10)
            let e = tape.scale(v.power, T::of(LN_10 / 10.0));
            let e = tape.exp(e);
            let target = tape.scale(e, T::of(1e-3));
            let measured = signal::mean_power(tape, wave)?;
            let a = tape.powf(target, T::of(0.5));
            let b = tape.powf(measured, T::of(-0.5));
            let gain = tape.mul(a, b)?;
            launched.push(tape.mul_scalar(wave, gain)?);
            rx_gain.push(tape.powf(target, T::of(-0.5)));
        }
        let field = if launched.len() == 1 { launched[0] } else { signal::wdm_mux(tape, &launched, &wdm)? };
        let out = signal::fiber_link(tape, field, &link, fs, cfg.seed, &[iteration, item, PURPOSE_LINK])?;
        let comp = signal::dispersion(tape, out, link.beta2, -link.total_length(), fs)?;
        let n = tape.shape(comp).0;
        let k = cfg.symbols_per_channel;
        (0..syms.len())
            .map(|c| {
                let base = if syms.len() == 1 { comp } else { signal::frequency_shift(tape, comp, -wdm.channel_offset(c, n), fs)? };
                let rx = signal::matched_filter(tape, base, &self.filter, fs, k)?;
                tape.mul_scalar(rx, rx_gain[c])
            })
            .collect()
    }

    /// Loss of `iteration`'s batch without updating anything.
    pub fn evaluate_loss(&self, iteration: u64) -> Result<f64> {
        let items: Vec<u64> = (0..self.cfg.batch_items as u64).collect();
        self.batch_loss(iteration, &items)
    }

    /// Loss over the listed batch items, reduced in item order.
    pub fn batch_loss(&self, iteration: u64, items: &[u64]) -> Result<f64> {
        let f = self.forward(iteration, items)?;
        Ok(f.tape.scalar(f.loss).f64())
    }

    /// Gradients of the loss for every parameter, in [`Models::params`] order.
    pub fn gradients(&self, f: &Forward<T>) -> Result<Vec<Array2<T>>> {
        let grads = f.tape.backward(f.loss)?;
        let per_channel = self.models.channels.first().map_or(0, |c| c.params().len());
        Ok(f
            .params
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = grads.get(v);
                // the launch power is the last parameter of each channel
                if !self.cfg.learn_power && (i + 1) % per_channel == 0 {
                    Array2::zeros(g.dim())
                } else {
                    g
                }
            })
            .collect())
    }

    fn try_step(&mut self) -> Result<LossRecord> {
        let items: Vec<u64> = (0..self.cfg.batch_items as u64).collect();
        let f = self.forward(self.iteration, &items)?;
        let loss = f.tape.scalar(f.loss).f64();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        let grads = self.gradients(&f)?;
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let nb = items.len() as f64;
        let per_channel_gmi = (0..self.cfg.n_channels).map(|c| f.gmi.iter().map(|g| f.tape.scalar(g[c]).f64()).sum::<f64>() / nb).collect();
        drop(f);

        let backup = (self.models.clone(), self.adam.clone());
        let cfg = self.cfg.adam();
        adam_step(&mut self.models.params_mut(), &grads, &mut self.adam, &cfg)?;
        if !self.models.is_finite() {
            (self.models, self.adam) = backup;
            return Err(Error::Numerical("parameter update produced non-finite values".into()));
        }
        Ok(LossRecord { iteration: self.iteration, per_channel_gmi, loss })
    }

    /// One optimizer step. Steps with non-finite values are skipped; after
    /// [`MAX_CONSECUTIVE_ABORTS`] in a row training stops with an error.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let it = self.iteration;
        match self.try_step() {
            Ok(rec) => {
                self.iteration += 1;
                self.consecutive_aborts = 0;
                self.history.push(rec.clone());
                Ok(StepOutcome::Updated(rec))
            }
            Err(e) if e.is_numerical() => {
                self.iteration += 1;
                self.consecutive_aborts += 1;
                log::warn!("step aborted at iteration {it}: {e}");
                if self.consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
                    return Err(Error::Numerical(format!(
                        "training halted after {MAX_CONSECUTIVE_ABORTS} consecutive aborted steps (last at iteration {it}): {e}"
                    )));
                }
                Ok(StepOutcome::Aborted { iteration: it, reason: e.to_string() })
            }
            Err(e) => Err(e),
        }
    }

    /// Runs until `max_iters`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepOutcome) -> Result<()>) -> Result<()> {
        while self.iteration < self.cfg.max_iters {
            let out = self.step()?;
            if let StepOutcome::Updated(r) = &out {
                if self.cfg.log_every > 0 && r.iteration % self.cfg.log_every == 0 {
                    log::info!("iteration {} loss {:.5} gmi {:?}", r.iteration, r.loss, r.per_channel_gmi);
                }
            }
            on_step(self, &out)?;
        }
        Ok(())
    }

    /// Symbol probabilities of channel `c` as the networks currently define them.
    pub fn probabilities(&self, c: usize) -> Result<Vec<f64>> {
        let size = 1usize << self.cfg.m;
        if !self.cfg.learn_probabilities {
            return Ok(vec![1.0 / size as f64; size]);
        }
        let out = self.models.channels[c].ps.predict(&Array2::eye(size))?;
        let logits: Vec<f64> = out.diag().iter().map(|v| v.f64()).collect();
        Ok(probabilities_from_logits(&logits))
    }

    /// Constellations, launch powers and demappers defined by the current
    /// networks. Labels are the one-hot index of each point.
    pub fn extract_format(&self) -> Result<LearnedFormat> {
        let size = 1usize << self.cfg.m;
        let mut formats = Vec::new();
        let mut degenerate = Vec::new();
        for (c, ch) in self.models.channels.iter().enumerate() {
            let pts = ch.gs.predict(&Array2::eye(size))?;
            let points: Vec<[f64; 4]> = pts.rows().into_iter().map(|r| [r[0].f64(), r[1].f64(), r[2].f64(), r[3].f64()]).collect();
            let labels = (0..size as u32).collect();
            let fmt = Constellation4D::new(self.cfg.m, points, labels, self.probabilities(c)?)?.normalize()?;
            degenerate.push(fmt.min_distance() < DEGENERATE_DISTANCE);
            formats.push(fmt);
        }
        Ok(LearnedFormat {
            formats,
            launch_power_dbm: self.models.channels.iter().map(|c| c.power_dbm[[0, 0]].f64()).collect(),
            demappers: self.models.channels.iter().map(|c| c.demappers.iter().map(DenseNet::cast).collect()).collect(),
            curve: self.history.iter().map(|r| (r.iteration, r.loss)).collect(),
            degenerate,
        })
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        let file = CheckpointRef {
            format: CHECKPOINT_MAGIC,
            version: CHECKPOINT_VERSION,
            precision: T::PRECISION,
            config_toml: self.cfg.to_toml()?,
            iteration: self.iteration,
            consecutive_aborts: self.consecutive_aborts,
            models: &self.models,
            adam: &self.adam,
            history: &self.history,
        };
        serde_json::to_string(&file).map_err(|e| Error::Parse(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.checkpoint_json()?)?;
        Ok(())
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let head: CheckpointHeader = serde_json::from_str(text).map_err(|e| Error::Parse(format!("corrupt checkpoint: {e}")))?;
        if head.format != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!("not a checkpoint file (format {:?})", head.format)));
        }
        if head.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})", head.version)));
        }
        if head.precision != T::PRECISION {
            return Err(Error::Parse(format!("checkpoint holds {:?} precision, expected {:?}", head.precision, T::PRECISION)));
        }
        let file: CheckpointOwned<T> = serde_json::from_str(text).map_err(|e| Error::Parse(format!("corrupt checkpoint: {e}")))?;
        let cfg = TrainConfig::from_toml(&file.config_toml)?;
        let mut t = Self::new(cfg)?;
        let expect: Vec<_> = t.models.params().iter().map(|p| p.dim()).collect();
        let found: Vec<_> = file.models.params().iter().map(|p| p.dim()).collect();
        if expect != found || file.adam.first.len() != expect.len() {
            return Err(Error::Parse("checkpoint parameter shapes do not match its configuration".into()));
        }
        t.models = file.models;
        t.adam = file.adam;
        t.iteration = file.iteration;
        t.consecutive_aborts = file.consecutive_aborts;
        t.history = file.history;
        Ok(t)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a, T> {
    format: &'a str,
    version: u32,
    precision: Precision,
    config_toml: String,
    iteration: u64,
    consecutive_aborts: u32,
    models: &'a Models<T>,
    adam: &'a AdamState<T>,
    history: &'a [LossRecord],
}

#[derive(Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    precision: Precision,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real")]
struct CheckpointOwned<T> {
    config_toml: String,
    iteration: u64,
    consecutive_aborts: u32,
    models: Models<T>,
    adam: AdamState<T>,
    history: Vec<LossRecord>,
}

/// What training produces: one constellation per channel and its context.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedFormat {
    pub formats: Vec<Constellation4D>,
    pub launch_power_dbm: Vec<f64>,
    pub demappers: Vec<Vec<DenseNet<f64>>>,
    /// `(iteration, loss)`.
    pub curve: Vec<(u64, f64)>,
    /// Two points closer than [`DEGENERATE_DISTANCE`].
    pub degenerate: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct LearnedSidecar {
    launch_power_dbm: Vec<f64>,
    degenerate: Vec<bool>,
    curve: Vec<(u64, f64)>,
    demappers: Vec<Vec<DenseNet<f64>>>,
}

impl LearnedFormat {
    pub fn format_path(dir: impl AsRef<Path>, channel: usize) -> PathBuf {
        dir.as_ref().join(format!("format_ch{channel}.txt"))
    }

    /// Writes `format_ch<c>.txt` per channel plus `learned_format.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (c, f) in self.formats.iter().enumerate() {
            let p = Self::format_path(dir, c);
            f.save(&p)?;
            paths.push(p);
        }
        let side = LearnedSidecar {
            launch_power_dbm: self.launch_power_dbm.clone(),
            degenerate: self.degenerate.clone(),
            curve: self.curve.clone(),
            demappers: self.demappers.clone(),
        };
        let p = dir.join("learned_format.json");
        std::fs::write(&p, serde_json::to_string(&side).map_err(|e| Error::Parse(e.to_string()))?)?;
        paths.push(p);
        Ok(paths)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let side: LearnedSidecar = serde_json::from_str(&std::fs::read_to_string(dir.join("learned_format.json"))?)
            .map_err(|e| Error::Parse(format!("invalid learned_format.json: {e}")))?;
        let formats = (0..side.launch_power_dbm.len()).map(|c| Constellation4D::load(Self::format_path(dir, c))).collect::<Result<Vec<_>>>()?;
        Ok(Self { formats, launch_power_dbm: side.launch_power_dbm, demappers: side.demappers, curve: side.curve, degenerate: side.degenerate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_awgn(m: usize) -> TrainConfig {
        TrainConfig { m, symbols_per_channel: 64, hidden_width: 8, max_iters: 5, ..TrainConfig::toy_awgn() }
    }

    fn tiny_fiber() -> TrainConfig {
        TrainConfig {
            m: 2,
            symbols_per_channel: 32,
            hidden_width: 6,
            n_spans_train: 2,
            sps: 4,
            rolloff: 0.1,
            rrc_span: 16,
            link: LinkParams { steps_per_span: 3, ..LinkParams::default() },
            max_iters: 3,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn architecture_matches_profile() {
        let cfg = TrainConfig { hidden_width: 256, ..TrainConfig::full() };
        let models = build_models::<f32>(&TrainConfig { n_channels: 1, ..cfg.clone() });
        let ch = &models.channels[0];
        assert_eq!(ch.gs.input_dim(), 1024);
        assert_eq!(ch.demappers.len(), 10);
        assert_eq!(ch.gs.parameter_count(), 1024 * 256 + 256 * 256 * 2 + 256 * 4 + (256 * 3 + 4));
        let toy = build_models::<f64>(&tiny_awgn(2));
        assert_eq!(toy.channels[0].ps.output_dim(), 4);
        assert_eq!(toy.channels[0].demappers.len(), 2);
    }

    #[test]
    fn config_round_trips_through_toml() {
        for cfg in [TrainConfig::desk(), TrainConfig::full(), TrainConfig::toy_awgn()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        }
        assert!(TrainConfig::from_toml("bogus_field = 1").is_err());
        let partial = TrainConfig::from_toml("m = 4\n[link]\nnf_db = -inf\n").unwrap();
        assert_eq!(partial.m, 4);
        assert_eq!(partial.link.nf_db, f64::NEG_INFINITY);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { m: 13, ..tiny_awgn(2) }.validate().is_err());
        assert!(TrainConfig { temperature: 0.0, ..tiny_awgn(2) }.validate().is_err());
        assert!(TrainConfig { n_channels: 20, ..TrainConfig::desk() }.validate().is_err());
        assert!(Trainer::<f32>::new(tiny_awgn(2)).is_err());
    }

    #[test]
    fn bit_columns_are_msb_first() {
        let cols = bit_columns(&[0b10, 0b01, 0b11], 2);
        assert_eq!(cols, vec![vec![1, 0, 1], vec![0, 1, 1]]);
    }

    #[test]
    fn entropy_gradient_with_silent_demappers() {
        // zero last layers make every demapper output 1/2 independent of its
        // input, so only H(softmax(logits)) depends on the logits
        let cfg = TrainConfig { n_channels: 1, ..tiny_awgn(3) };
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        for d in &mut t.models_mut().channels[0].demappers {
            let last = d.layers.last_mut().unwrap();
            last.weights.fill(0.0);
            last.biases.fill(0.0);
        }
        let f = t.forward(0, &[0]).unwrap();
        let grads = f.tape.backward(f.loss).unwrap();
        let g = grads.get(f.logits[0]);
        let l = f.tape.value(f.logits[0]);
        let p = probabilities_from_logits(&l.iter().cloned().collect::<Vec<_>>());
        let h: f64 = p.iter().map(|v| -v * v.log2()).sum();
        // d(-H)/dl_j = p_j (log2 p_j + H)
        for j in 0..p.len() {
            let expect = p[j] * (p[j].log2() + h);
            assert!((g[[0, j]] - expect).abs() < 1e-5, "{j}: {} vs {expect}", g[[0, j]]);
        }
        let loss = f.tape.scalar(f.loss);
        assert!((loss - (-(h - 3.0))).abs() < 1e-9);
    }

    #[test]
    fn batch_order_does_not_change_the_loss() {
        let cfg = TrainConfig { batch_items: 3, ..tiny_awgn(2) };
        let t = Trainer::<f64>::new(cfg).unwrap();
        let a = t.batch_loss(4, &[0, 1, 2]).unwrap();
        let b = t.batch_loss(4, &[2, 0, 1]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = TrainConfig { max_iters: 6, ..tiny_awgn(2) };
        let mut a = Trainer::<f64>::new(cfg.clone()).unwrap();
        a.run(|_, _| Ok(())).unwrap();

        let mut b = Trainer::<f64>::new(TrainConfig { max_iters: 3, ..cfg.clone() }).unwrap();
        b.run(|_, _| Ok(())).unwrap();
        let json = b.checkpoint_json().unwrap();
        let mut c = Trainer::<f64>::from_checkpoint_json(&json).unwrap();
        assert_eq!(c.models(), b.models());
        c.cfg.max_iters = 6;
        c.run(|_, _| Ok(())).unwrap();
        assert_eq!(c.models(), a.models());
        assert_eq!(c.history(), a.history());
    }

    #[test]
    fn corrupt_or_mismatched_checkpoints_are_rejected() {
        let t = Trainer::<f64>::new(tiny_awgn(2)).unwrap();
        let json = t.checkpoint_json().unwrap();
        assert!(Trainer::<f64>::from_checkpoint_json(&json[..json.len() / 2]).is_err());
        let v2 = json.replacen("\"version\":1", "\"version\":2", 1);
        let err = Trainer::<f64>::from_checkpoint_json(&v2).err().unwrap();
        assert!(err.to_string().contains("version"));
        assert!(Trainer::<f32>::from_checkpoint_json(&json).is_err());
    }

    #[test]
    fn checkpoint_size_is_linear_in_parameters() {
        let sizes: Vec<(usize, usize)> = [8, 16, 32]
            .iter()
            .map(|&w| {
                let t = Trainer::<f64>::new(TrainConfig { hidden_width: w, ..tiny_awgn(2) }).unwrap();
                (t.models().parameter_count(), t.checkpoint_json().unwrap().len())
            })
            .collect();
        let slope1 = (sizes[1].1 - sizes[0].1) as f64 / (sizes[1].0 - sizes[0].0) as f64;
        let slope2 = (sizes[2].1 - sizes[1].1) as f64 / (sizes[2].0 - sizes[1].0) as f64;
        assert!((slope1 / slope2 - 1.0).abs() < 0.15, "{slope1} {slope2}");
    }

    #[test]
    fn fiber_graph_runs_and_learns_power_gradient() {
        let mut t = Trainer::<f64>::new(tiny_fiber()).unwrap();
        let f = t.forward(0, &[0]).unwrap();
        let g = t.gradients(&f).unwrap();
        assert!(g.last().unwrap()[[0, 0]] != 0.0);
        drop(f);
        t.run(|_, _| Ok(())).unwrap();
        assert_eq!(t.history().len(), 3);
        assert!(t.models().is_finite());
    }

    #[test]
    fn wdm_graph_runs() {
        let cfg = TrainConfig { n_channels: 2, sps: 8, spacing: 60e9, ..tiny_fiber() };
        let mut t = Trainer::<f32>::new(TrainConfig { precision: Precision::Single, ..cfg }).unwrap();
        assert!(matches!(t.step().unwrap(), StepOutcome::Updated(_)));
        assert_eq!(t.extract_format().unwrap().formats.len(), 2);
    }

    #[test]
    fn repeated_numerical_failures_halt_training() {
        let mut t = Trainer::<f64>::new(tiny_awgn(2)).unwrap();
        t.models_mut().channels[0].gs.layers[0].weights.fill(f64::NAN);
        assert!(matches!(t.step().unwrap(), StepOutcome::Aborted { iteration: 0, .. }));
        assert!(matches!(t.step().unwrap(), StepOutcome::Aborted { iteration: 1, .. }));
        let err = t.step().unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("iteration 2"));
    }

    #[test]
    fn extraction_is_deterministic_and_valid() {
        let t = Trainer::<f64>::new(tiny_awgn(3)).unwrap();
        let a = t.extract_format().unwrap();
        let b = t.extract_format().unwrap();
        assert_eq!(a, b);
        let f = &a.formats[0];
        assert!((f.mean_energy() - 1.0).abs() < 1e-9);
        assert!((f.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(a.degenerate, vec![false]);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(LearnedFormat::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn frozen_probabilities_stay_uniform() {
        let mut t = Trainer::<f64>::new(TrainConfig { learn_probabilities: false, ..tiny_awgn(2) }).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        assert_eq!(t.probabilities(0).unwrap(), vec![0.25; 4]);
    }
}
