//! Python module `fibershape_py`: formats, the fiber link, training and
//! evaluation entry points.

use std::collections::HashMap;

use num_complex::Complex;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use fibershape::channel::{propagate_link, LinkParams};
use fibershape::dsp::DualPolWaveform;
use fibershape::harness::{self, EvalConfig, DEFAULT_LAMBDAS};
use fibershape::metrics::net_rate_and_oh;
use fibershape::trainer::{StepOutcome, TrainConfig, Trainer};
use fibershape::{Constellation4D, Error, FiberLink, Precision};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for fibershape::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// 4D constellation with labels and probabilities.
#[pyclass(name = "Constellation", module = "fibershape_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConstellation {
    inner: Constellation4D,
}

#[pymethods]
impl PyConstellation {
    #[new]
    fn new(m: usize, points: Vec<[f64; 4]>, labels: Vec<u32>, probs: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Constellation4D::new(m, points, labels, probs).py()? })
    }

    /// pmqpsk, pm8qam, pm16qam, pm32qam, pm64qam or pmps64qam[:lambda].
    #[staticmethod]
    fn baseline(name: &str) -> PyResult<Self> {
        Ok(Self { inner: harness::baseline(name).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Constellation4D::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 4]> {
        self.inner.points().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.inner.probs().to_vec()
    }

    fn entropy(&self) -> f64 {
        self.inner.entropy()
    }

    fn mean_energy(&self) -> f64 {
        self.inner.mean_energy()
    }

    fn min_distance(&self) -> f64 {
        self.inner.min_distance()
    }

    fn normalize(&self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.normalize().py()? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// `(index, label, energy, probability)` per point.
    fn energy_report(&self) -> Vec<(usize, String, f64, f64)> {
        harness::energy_report(&self.inner).rows.into_iter().map(|r| (r.index, r.label, r.energy, r.probability)).collect()
    }

    /// GMI estimate and 95% half-width over symbol-level AWGN at `snr_db` per 2D.
    #[pyo3(signature = (snr_db, n_symbols = 65536, seed = 1))]
    fn gmi_awgn(&self, snr_db: f64, n_symbols: usize, seed: u64) -> PyResult<(f64, f64)> {
        let r = harness::evaluate_awgn(&self.inner, snr_db, n_symbols, seed).py()?;
        Ok((r.gmi, r.ci95))
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    fn __repr__(&self) -> String {
        format!("Constellation(m={}, entropy={:.4}, mean_energy={:.4})", self.inner.m(), self.inner.entropy(), self.inner.mean_energy())
    }
}

/// Multi-span link with EDFA noise.
#[pyclass(name = "FiberLink", module = "fibershape_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFiberLink {
    inner: FiberLink,
}

#[pymethods]
impl PyFiberLink {
    #[new]
    #[pyo3(signature = (n_spans = 50, beta2_ps2_per_km = -21.67, gamma_per_w_km = 1.2, alpha_db_per_km = 0.2, span_length_km = 80.0, nf_db = 5.0, steps_per_span = 200, center_wavelength_nm = 1550.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_spans: usize,
        beta2_ps2_per_km: f64,
        gamma_per_w_km: f64,
        alpha_db_per_km: f64,
        span_length_km: f64,
        nf_db: f64,
        steps_per_span: usize,
        center_wavelength_nm: f64,
    ) -> PyResult<Self> {
        let p = LinkParams { beta2_ps2_per_km, gamma_per_w_km, alpha_db_per_km, span_length_km, nf_db, steps_per_span, center_wavelength_nm };
        Ok(Self { inner: p.to_link(n_spans).py()? })
    }

    #[getter]
    fn n_spans(&self) -> usize {
        self.inner.n_spans
    }

    #[getter]
    fn total_length_m(&self) -> f64 {
        self.inner.total_length()
    }

    #[getter]
    fn span_gain(&self) -> f64 {
        self.inner.span_gain()
    }

    /// ASE variance per polarization after one amplifier, W.
    fn ase_variance(&self, sample_rate: f64) -> f64 {
        self.inner.ase_variance(sample_rate)
    }

    /// Propagates both polarizations (complex samples, √W) through every span.
    #[pyo3(signature = (x, y, sample_rate, seed = 0))]
    fn propagate(&self, x: Vec<Complex<f64>>, y: Vec<Complex<f64>>, sample_rate: f64, seed: u64) -> PyResult<(Vec<Complex<f64>>, Vec<Complex<f64>>)> {
        let w = DualPolWaveform::new(x, y, sample_rate).py()?;
        let out = propagate_link(w, &self.inner, seed, &[]).py()?;
        Ok((out.x, out.y))
    }

    fn __repr__(&self) -> String {
        format!("FiberLink(n_spans={}, length={:.0} km)", self.inner.n_spans, self.inner.total_length() / 1e3)
    }
}

enum AnyTrainer {
    Single(Trainer<f32>),
    Double(Trainer<f64>),
}

macro_rules! each {
    ($t:expr, $v:ident => $body:expr) => {
        match $t {
            AnyTrainer::Single($v) => $body,
            AnyTrainer::Double($v) => $body,
        }
    };
}

/// End-to-end trainer; precision follows the configuration.
#[pyclass(name = "Trainer", module = "fibershape_py")]
struct PyTrainer {
    inner: AnyTrainer,
}

fn make_trainer(cfg: TrainConfig) -> PyResult<AnyTrainer> {
    Ok(match cfg.precision {
        Precision::Single => AnyTrainer::Single(Trainer::new(cfg).py()?),
        Precision::Double => AnyTrainer::Double(Trainer::new(cfg).py()?),
    })
}

fn config_from(config_toml: Option<&str>, profile: &str) -> PyResult<TrainConfig> {
    match config_toml {
        Some(t) => TrainConfig::from_toml(t).py(),
        None => TrainConfig::profile(profile).py(),
    }
}

#[pymethods]
impl PyTrainer {
    /// From a TOML configuration string, or a named profile
    /// (desk, full, toy-awgn).
    #[new]
    #[pyo3(signature = (config_toml = None, profile = "toy-awgn"))]
    fn new(config_toml: Option<&str>, profile: &str) -> PyResult<Self> {
        Ok(Self { inner: make_trainer(config_from(config_toml, profile)?)? })
    }

    #[staticmethod]
    fn load_checkpoint(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let inner = match Trainer::<f64>::from_checkpoint_json(&text) {
            Ok(t) => AnyTrainer::Double(t),
            Err(_) => AnyTrainer::Single(Trainer::<f32>::from_checkpoint_json(&text).py()?),
        };
        Ok(Self { inner })
    }

    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        each!(&self.inner, t => t.save_checkpoint(path).py())
    }

    #[getter]
    fn iteration(&self) -> u64 {
        each!(&self.inner, t => t.iteration())
    }

    fn config_toml(&self) -> PyResult<String> {
        each!(&self.inner, t => t.config().to_toml().py())
    }

    /// One update; returns `(iteration, loss, per-channel GMI)` or `None`
    /// when the step was skipped for non-finite values.
    fn step(&mut self) -> PyResult<Option<(u64, f64, Vec<f64>)>> {
        let out = each!(&mut self.inner, t => t.step().py()?);
        Ok(match out {
            StepOutcome::Updated(r) => Some((r.iteration, r.loss, r.per_channel_gmi)),
            StepOutcome::Aborted { .. } => None,
        })
    }

    /// Runs `n` steps and returns the last loss.
    fn run(&mut self, n: u64) -> PyResult<Option<f64>> {
        let mut last = None;
        for _ in 0..n {
            if let Some((_, l, _)) = self.step()? {
                last = Some(l);
            }
        }
        Ok(last)
    }

    /// `(iteration, loss)` of every completed step.
    fn history(&self) -> Vec<(u64, f64)> {
        each!(&self.inner, t => t.history().iter().map(|r| (r.iteration, r.loss)).collect())
    }

    /// Learned constellation of every channel.
    fn extract_formats(&self) -> PyResult<Vec<PyConstellation>> {
        let f = each!(&self.inner, t => t.extract_format().py()?);
        Ok(f.formats.into_iter().map(|inner| PyConstellation { inner }).collect())
    }

    fn launch_power_dbm(&self) -> PyResult<Vec<f64>> {
        Ok(each!(&self.inner, t => t.extract_format().py()?).launch_power_dbm)
    }
}

/// TOML text of a named training profile.
#[pyfunction]
fn profile_config(name: &str) -> PyResult<String> {
    TrainConfig::profile(name).py()?.to_toml().py()
}

/// TOML text of the default evaluation configuration.
#[pyfunction]
fn default_eval_config() -> PyResult<String> {
    EvalConfig::default().to_toml().py()
}

/// Power/span sweep of a format file or baseline; writes CSV files into
/// `out_dir` and returns one dict per (power, spans, channel).
#[pyfunction]
#[pyo3(signature = (format, out_dir, config_toml = None))]
fn evaluate(format: &str, out_dir: &str, config_toml: Option<&str>) -> PyResult<Vec<HashMap<String, f64>>> {
    let cfg = match config_toml {
        Some(t) => EvalConfig::from_toml(t).py()?,
        None => EvalConfig::default(),
    };
    let out = harness::cmd_evaluate(format, &cfg, &DEFAULT_LAMBDAS, out_dir).py()?;
    Ok(out
        .reports
        .iter()
        .flat_map(|r| r.rows())
        .map(|r| {
            HashMap::from([
                ("power_dbm".to_string(), r.power_dbm),
                ("n_spans".to_string(), r.n_spans as f64),
                ("channel".to_string(), r.channel as f64),
                ("entropy".to_string(), r.entropy),
                ("gmi".to_string(), r.gmi),
                ("net_rate_gbps".to_string(), r.net_rate_gbps),
                ("fec_oh_pct".to_string(), r.fec_oh_pct),
                ("ci95".to_string(), r.ci95),
            ])
        })
        .collect())
}

/// Trains into `out_dir` with the run directory layout and returns the
/// learned formats.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml = None, profile = "toy-awgn", resume = false))]
fn train(out_dir: &str, config_toml: Option<&str>, profile: &str, resume: bool) -> PyResult<Vec<PyConstellation>> {
    let cfg = config_from(config_toml, profile)?;
    let learned = harness::cmd_train(&cfg, out_dir, resume).py()?;
    Ok(learned.formats.into_iter().map(|inner| PyConstellation { inner }).collect())
}

/// `(net rate in bit/s, FEC overhead in percent)`.
#[pyfunction]
#[pyo3(name = "net_rate_and_oh")]
fn py_net_rate_and_oh(gmi: f64, m: usize, symbol_rate: f64) -> PyResult<(f64, f64)> {
    net_rate_and_oh(gmi, m, symbol_rate).py()
}

#[pyfunction]
#[pyo3(signature = (rolloff = 0.01, sps = 16, rrc_span = 128, seed = 1))]
fn rrc_selftest(rolloff: f64, sps: usize, rrc_span: usize, seed: u64) -> PyResult<HashMap<String, f64>> {
    let r = harness::rrc_selftest(rolloff, sps, rrc_span, seed).py()?;
    Ok(HashMap::from([
        ("taps".to_string(), r.taps as f64),
        ("isi_db".to_string(), r.isi_db),
        ("loopback_max_err".to_string(), r.loopback_max_err),
        ("passes".to_string(), if r.passes() { 1.0 } else { 0.0 }),
    ]))
}

/// `(name, probes, max relative error)` per checked operation.
#[pyfunction]
#[pyo3(signature = (probes = 10, h = 1e-6, seed = 1))]
fn grad_check(probes: usize, h: f64, seed: u64) -> PyResult<Vec<(String, usize, f64)>> {
    Ok(harness::grad_check(probes, h, seed).py()?.into_iter().map(|r| (r.name, r.probes, r.max_rel_err)).collect())
}

#[pymodule]
fn fibershape_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConstellation>()?;
    m.add_class::<PyFiberLink>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(profile_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_eval_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(py_net_rate_and_oh, m)?)?;
    m.add_function(wrap_pyfunction!(rrc_selftest, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("BASELINES", harness::BASELINES.to_vec())?;
    Ok(())
}
