use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fibershape::channel::LinkParams;
use fibershape::harness::{self, EvalConfig, DEFAULT_LAMBDAS};
use fibershape::metrics::{GainMode, ReachInterp};
use fibershape::trainer::{ChannelKind, TrainConfig};
use fibershape::{Constellation4D, Error, Precision};

const THREADS_ENV: &str = "FIBERSHAPE_THREADS";

/// Fiber link simulation, end-to-end constellation training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "fibershape", version, after_help = "Environment: FIBERSHAPE_THREADS sets the worker thread count.\nExit codes: 0 success, 1 invalid input, 2 numerical failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Launch-power / distance sweep of a format file or a baseline.
    Evaluate(EvaluateArgs),
    /// Train shaping networks and write the learned formats.
    Train(TrainArgs),
    /// Per-symbol energy and probability table of a format.
    EnergyReport(EnergyArgs),
    /// Check the RRC filter and a modulate/matched-filter loopback.
    RrcSelftest(RrcArgs),
    /// Finite-difference check of every differentiable operation.
    GradCheck(GradArgs),
}

#[derive(Args, Debug, Default)]
struct LinkArgs {
    #[arg(long, allow_hyphen_values = true)]
    beta2_ps2_per_km: Option<f64>,
    #[arg(long)]
    gamma_per_w_km: Option<f64>,
    #[arg(long)]
    alpha_db_per_km: Option<f64>,
    #[arg(long)]
    span_length_km: Option<f64>,
    /// Amplifier noise figure; `off` or `-inf` disables ASE.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_nf)]
    nf_db: Option<f64>,
    #[arg(long)]
    steps_per_span: Option<usize>,
    #[arg(long)]
    center_wavelength_nm: Option<f64>,
}

impl LinkArgs {
    fn apply(&self, l: &mut LinkParams) {
        set(&mut l.beta2_ps2_per_km, self.beta2_ps2_per_km);
        set(&mut l.gamma_per_w_km, self.gamma_per_w_km);
        set(&mut l.alpha_db_per_km, self.alpha_db_per_km);
        set(&mut l.span_length_km, self.span_length_km);
        set(&mut l.nf_db, self.nf_db);
        set(&mut l.steps_per_span, self.steps_per_span);
        set(&mut l.center_wavelength_nm, self.center_wavelength_nm);
    }
}

#[derive(Args, Debug, Default)]
struct WdmArgs {
    #[arg(long)]
    n_channels: Option<usize>,
    #[arg(long)]
    symbol_rate_gbd: Option<f64>,
    #[arg(long)]
    spacing_ghz: Option<f64>,
    #[arg(long)]
    sps: Option<usize>,
    #[arg(long)]
    rolloff: Option<f64>,
    /// RRC filter length in symbols.
    #[arg(long)]
    rrc_span: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Format file, run directory, or baseline (pmqpsk, pm8qam, pm16qam,
    /// pm32qam, pm64qam, pmps64qam, pmps64qam:<lambda>).
    #[arg(long)]
    format: String,
    /// TOML evaluation config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Comma list of values or start:stop:step ranges, dBm.
    #[arg(long, allow_hyphen_values = true)]
    powers: Option<String>,
    /// Comma list of span counts or a..b ranges (inclusive), optional /step.
    #[arg(long)]
    spans: Option<String>,
    #[arg(long)]
    n_symbols: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// none or per-pol.
    #[arg(long, value_parser = parse_gain)]
    gain: Option<GainMode>,
    /// Net-rate targets for the reach table, Gb/s, comma separated.
    #[arg(long)]
    targets: Option<String>,
    /// Maxwell-Boltzmann parameters swept for pmps64qam, comma separated.
    #[arg(long)]
    lambdas: Option<String>,
    /// log or linear.
    #[arg(long, value_parser = parse_interp)]
    reach_interp: Option<ReachInterp>,
    /// Discard filter and dispersion memory at both ends.
    #[arg(long)]
    guard: Option<bool>,
    #[arg(long)]
    precision: Option<Precision>,
    #[command(flatten)]
    wdm: WdmArgs,
    #[command(flatten)]
    link: LinkArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk, full or toy-awgn; ignored when --config is given.
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_spans_train: Option<usize>,
    #[arg(long)]
    batch_items: Option<usize>,
    #[arg(long)]
    symbols_per_channel: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iters: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_width: Option<usize>,
    /// awgn or fiber.
    #[arg(long)]
    channel: Option<ChannelKind>,
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    initial_power_dbm: Option<f64>,
    #[arg(long)]
    learn_power: Option<bool>,
    #[arg(long)]
    learn_probabilities: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[command(flatten)]
    wdm: WdmArgs,
    #[command(flatten)]
    link: LinkArgs,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    /// Format file, run directory or baseline name.
    format: String,
    /// CSV output; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RrcArgs {
    #[arg(long, default_value_t = 0.01)]
    rolloff: f64,
    #[arg(long, default_value_t = 16)]
    sps: usize,
    #[arg(long, default_value_t = 128)]
    rrc_span: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn parse_nf(s: &str) -> Result<f64, String> {
    match s {
        "off" | "none" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| format!("invalid noise figure {s:?}")),
    }
}

fn parse_gain(s: &str) -> Result<GainMode, String> {
    match s {
        "none" => Ok(GainMode::None),
        "per-pol" | "per_polarization" | "per-polarization" => Ok(GainMode::PerPolarization),
        _ => Err(format!("unknown gain mode {s:?} (expected none or per-pol)")),
    }
}

fn parse_interp(s: &str) -> Result<ReachInterp, String> {
    match s {
        "log" | "log-distance" => Ok(ReachInterp::LogDistance),
        "linear" => Ok(ReachInterp::Linear),
        _ => Err(format!("unknown interpolation {s:?} (expected log or linear)")),
    }
}

fn user(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',').map(|v| v.trim().parse().map_err(|_| user(format!("invalid number {v:?}")))).collect()
}

fn parse_powers(s: &str) -> Result<Vec<f64>, Error> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let parts: Vec<&str> = item.trim().split(':').collect();
        match parts.as_slice() {
            [v] => out.push(v.parse().map_err(|_| user(format!("invalid power {v:?}")))?),
            [a, b, c] => {
                let p = parse_f64_list(&format!("{a},{b},{c}"))?;
                out.extend(harness::power_grid(p[0], p[1], p[2])?);
            }
            _ => return Err(user(format!("invalid power item {item:?} (use value or start:stop:step)"))),
        }
    }
    Ok(out)
}

fn parse_spans(s: &str) -> Result<Vec<usize>, Error> {
    let bad = |item: &str| user(format!("invalid span item {item:?} (use N, A..B or A..B/step)"));
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim) {
        let (range, step) = match item.split_once('/') {
            Some((r, st)) => (r, st.parse::<usize>().map_err(|_| bad(item))?),
            None => (item, 1),
        };
        match range.split_once("..") {
            Some((a, b)) => {
                let a: usize = a.parse().map_err(|_| bad(item))?;
                let b: usize = b.parse().map_err(|_| bad(item))?;
                if step == 0 || b < a {
                    return Err(bad(item));
                }
                out.extend((a..=b).step_by(step));
            }
            None => out.push(range.parse().map_err(|_| bad(item))?),
        }
    }
    Ok(out)
}

fn load_format(spec: &str) -> Result<Constellation4D, Error> {
    let p = Path::new(spec);
    if p.is_dir() {
        return harness::load_format(&p.join("format_ch0.txt").to_string_lossy());
    }
    harness::load_format(spec)
}

fn eval_config(a: &EvaluateArgs) -> Result<EvalConfig, Error> {
    let mut cfg = match &a.config {
        Some(p) => EvalConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => EvalConfig::default(),
    };
    a.link.apply(&mut cfg.link);
    set(&mut cfg.n_channels, a.wdm.n_channels);
    set(&mut cfg.symbol_rate, a.wdm.symbol_rate_gbd.map(|v| v * 1e9));
    set(&mut cfg.spacing, a.wdm.spacing_ghz.map(|v| v * 1e9));
    set(&mut cfg.sps, a.wdm.sps);
    set(&mut cfg.rolloff, a.wdm.rolloff);
    set(&mut cfg.rrc_span, a.wdm.rrc_span);
    if let Some(p) = &a.powers {
        cfg.powers_dbm = parse_powers(p)?;
    }
    if let Some(s) = &a.spans {
        cfg.spans = parse_spans(s)?;
    }
    if let Some(t) = &a.targets {
        cfg.target_rates_gbps = parse_f64_list(t)?;
    }
    set(&mut cfg.n_symbols, a.n_symbols);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.gain, a.gain);
    set(&mut cfg.reach_interp, a.reach_interp);
    set(&mut cfg.guard, a.guard);
    set(&mut cfg.precision, a.precision);
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::profile(&a.profile)?,
    };
    a.link.apply(&mut cfg.link);
    set(&mut cfg.n_channels, a.wdm.n_channels);
    set(&mut cfg.symbol_rate, a.wdm.symbol_rate_gbd.map(|v| v * 1e9));
    set(&mut cfg.spacing, a.wdm.spacing_ghz.map(|v| v * 1e9));
    set(&mut cfg.sps, a.wdm.sps);
    set(&mut cfg.rolloff, a.wdm.rolloff);
    set(&mut cfg.rrc_span, a.wdm.rrc_span);
    set(&mut cfg.m, a.m);
    set(&mut cfg.n_spans_train, a.n_spans_train);
    set(&mut cfg.batch_items, a.batch_items);
    set(&mut cfg.symbols_per_channel, a.symbols_per_channel);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.beta1, a.beta1);
    set(&mut cfg.beta2, a.beta2);
    set(&mut cfg.eps, a.eps);
    set(&mut cfg.max_iters, a.max_iters);
    set(&mut cfg.precision, a.precision);
    set(&mut cfg.temperature, a.temperature);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.hidden_width, a.hidden_width);
    set(&mut cfg.channel, a.channel);
    set(&mut cfg.snr_db, a.snr_db);
    set(&mut cfg.initial_power_dbm, a.initial_power_dbm);
    set(&mut cfg.learn_power, a.learn_power);
    set(&mut cfg.learn_probabilities, a.learn_probabilities);
    set(&mut cfg.checkpoint_every, a.checkpoint_every);
    set(&mut cfg.log_every, a.log_every);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Evaluate(a) => {
            let cfg = eval_config(&a)?;
            let lambdas = match &a.lambdas {
                Some(l) => parse_f64_list(l)?,
                None => DEFAULT_LAMBDAS.to_vec(),
            };
            let spec = if Path::new(&a.format).is_dir() { a.format.clone() + "/format_ch0.txt" } else { a.format.clone() };
            load_format(&spec)?;
            let out = harness::cmd_evaluate(&spec, &cfg, &lambdas, &a.out)?;
            for b in &out.best {
                println!("{} spans ({:.0} km): best {:+.1} dBm, GMI {:.4} bit, {:.2} Gb/s", b.n_spans, b.distance_km, b.power_dbm, b.avg_gmi, b.net_rate_gbps);
            }
            for r in &out.reach {
                match r.reach_km {
                    Some(d) => println!("reach at {:.1} Gb/s: {d:.1} km", r.target_gbps),
                    None => println!("reach at {:.1} Gb/s: not bracketed by the span grid", r.target_gbps),
                }
            }
            println!("wrote {} files to {}", out.files.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = train_config(&a)?;
            let learned = harness::cmd_train(&cfg, &a.out, a.resume)?;
            for (c, f) in learned.formats.iter().enumerate() {
                println!(
                    "channel {c}: entropy {:.4} bit, launch power {:+.2} dBm{}",
                    f.entropy(),
                    learned.launch_power_dbm[c],
                    if learned.degenerate[c] { " [degenerate]" } else { "" }
                );
            }
            println!("run directory: {}", a.out.display());
        }
        Command::EnergyReport(a) => {
            let r = harness::energy_report(&load_format(&a.format)?);
            match &a.out {
                Some(p) => r.write_csv(p)?,
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    for row in &r.rows {
                        w.serialize(row)?;
                    }
                    w.flush()?;
                }
            }
            eprintln!("{}", r.summary());
        }
        Command::RrcSelftest(a) => {
            let r = harness::rrc_selftest(a.rolloff, a.sps, a.rrc_span, a.seed)?;
            println!("taps {}", r.taps);
            println!("invariants {}", if r.invariants_ok { "ok" } else { "FAILED" });
            println!("isi_db {:.2}", r.isi_db);
            println!("loopback_max_err {:.3e}", r.loopback_max_err);
            if !r.passes() {
                return Err(Error::Numerical("RRC self test failed".into()));
            }
            println!("PASS");
        }
        Command::GradCheck(a) => {
            let reports = harness::grad_check(a.probes, a.h, a.seed)?;
            harness::write_grad_report(std::io::stdout().lock(), &reports, a.tol)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passes(a.tol)).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| user(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| user(format!("cannot configure threads: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_lists() {
        assert_eq!(parse_spans("1,3..5").unwrap(), vec![1, 3, 4, 5]);
        assert_eq!(parse_spans("25..40/5").unwrap(), vec![25, 30, 35, 40]);
        assert!(parse_spans("5..1").is_err());
        assert!(parse_spans("x").is_err());
    }

    #[test]
    fn power_lists() {
        assert_eq!(parse_powers("-1,0:1:0.5").unwrap(), vec![-1.0, 0.0, 0.5, 1.0]);
        assert!(parse_powers("1:2").is_err());
    }

    #[test]
    fn noise_figure_off() {
        assert_eq!(parse_nf("off").unwrap(), f64::NEG_INFINITY);
        assert_eq!(parse_nf("-inf").unwrap(), f64::NEG_INFINITY);
        assert_eq!(parse_nf("4.5").unwrap(), 4.5);
    }

    #[test]
    fn flags_override_profile() {
        let cli = Cli::try_parse_from(["fibershape", "train", "--profile", "toy-awgn", "-o", "x", "--m", "3", "--nf-db", "off", "--sps", "8"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = train_config(&a).unwrap();
        assert_eq!(cfg.m, 3);
        assert_eq!(cfg.sps, 8);
        assert_eq!(cfg.channel, ChannelKind::Awgn);
        assert_eq!(cfg.link.nf_db, f64::NEG_INFINITY);
    }
}
