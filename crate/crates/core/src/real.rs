use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst};
use rustfft::{Fft, FftDirection, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

/// Floating point precision used by waveforms, the autodiff tape and networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => crate::error::invalid(format!("unknown precision '{other}'")),
        }
    }
}

/// Scalar type the simulator can run in (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FftNum
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Display
    + FromStr
    + Default
    + Serialize
    + for<'de> Deserialize<'de>
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    #[doc(hidden)]
    fn planner() -> &'static Mutex<FftPlanner<Self>>;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    fn planner() -> &'static Mutex<FftPlanner<Self>> {
        static PLANNER: OnceLock<Mutex<FftPlanner<f32>>> = OnceLock::new();
        PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn planner() -> &'static Mutex<FftPlanner<Self>> {
        static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
        PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
    }
}

/// Returns a cached FFT plan. The planner is shared process-wide behind a
/// mutex; plans themselves are immutable and may be used concurrently.
pub fn fft_plan<T: Real>(len: usize, direction: FftDirection) -> Arc<dyn Fft<T>> {
    let mut planner = T::planner().lock().unwrap_or_else(|e| e.into_inner());
    planner.plan_fft(len, direction)
}
