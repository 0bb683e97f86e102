//! Four-dimensional modulation formats.
//!
//! A [`Constellation4D`] holds `M = 2^m` points `[r_X, i_X, r_Y, i_Y]`, one
//! `m`-bit label per point and an a-priori probability per point. Labels are
//! read most-significant bit first: bit `0` of a label is its MSB.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::invalid;
use crate::{Error, Result};

/// Tolerance on the probability simplex and on unit energy.
pub const SIMPLEX_TOL: f64 = 1e-9;

const FILE_MAGIC: &str = "fibershape-constellation";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation4D {
    m: usize,
    points: Vec<[f64; 4]>,
    labels: Vec<u32>,
    probs: Vec<f64>,
}

impl Constellation4D {
    /// Builds a constellation and checks the label and probability invariants.
    ///
    /// Energy normalization is not required here; see [`Constellation4D::normalize`].
    pub fn new(m: usize, points: Vec<[f64; 4]>, labels: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        let c = Self { m, points, labels, probs };
        c.validate()?;
        Ok(c)
    }

    /// Uniform probabilities with labels equal to the point index.
    pub fn uniform(m: usize, points: Vec<[f64; 4]>) -> Result<Self> {
        let n = points.len();
        let labels = (0..n as u32).collect();
        Self::new(m, points, labels, vec![1.0 / n as f64; n])
    }

    /// Checks every structural invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > 24 {
            return Err(Error::Invariant(format!("bits per symbol m={} outside 1..=24", self.m)));
        }
        let size = 1usize << self.m;
        if self.points.len() != size {
            return Err(Error::Invariant(format!(
                "M = 2^m: expected {size} points, found {}",
                self.points.len()
            )));
        }
        if self.labels.len() != size || self.probs.len() != size {
            return Err(Error::Invariant(format!(
                "field lengths differ: {} points, {} labels, {} probabilities",
                size,
                self.labels.len(),
                self.probs.len()
            )));
        }
        let mut seen = vec![false; size];
        for &l in &self.labels {
            let l = l as usize;
            if l >= size {
                return Err(Error::Invariant(format!("label {l} does not fit in {} bits", self.m)));
            }
            if seen[l] {
                return Err(Error::Invariant(format!(
                    "labels distinct: duplicate label {}",
                    format_label(l as u32, self.m)
                )));
            }
            seen[l] = true;
        }
        if let Some(p) = self.points.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("points finite: found {p}")));
        }
        if let Some(p) = self.probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invariant(format!("probabilities nonnegative: found {p}")));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invariant(format!("probabilities sum to 1: sum is {total}")));
        }
        Ok(())
    }

    /// Bits per symbol.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of points, `2^m`.
    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Bit `i` (0 = MSB) of the label of point `j`.
    #[inline]
    pub fn bit(&self, j: usize, i: usize) -> u8 {
        ((self.labels[j] >> (self.m - 1 - i)) & 1) as u8
    }

    /// `‖x_j‖²` for every point.
    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.iter().map(|v| v * v).sum()).collect()
    }

    /// Mean energy `Σ p_j ‖x_j‖²`.
    pub fn mean_energy(&self) -> f64 {
        self.energies().iter().zip(&self.probs).map(|(e, p)| e * p).sum()
    }

    /// Entropy of the symbol distribution in bits.
    pub fn entropy(&self) -> f64 {
        entropy_bits(&self.probs)
    }

    /// Scales all points by one common factor so that the mean energy is 1.
    pub fn normalize(&self) -> Result<Self> {
        let e = self.mean_energy();
        if !(e > 0.0) || !e.is_finite() {
            return invalid(format!("cannot normalize constellation with mean energy {e}"));
        }
        let s = e.sqrt().recip();
        let mut out = self.clone();
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// Replaces the probabilities, keeping geometry and labels.
    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        Self::new(self.m, self.points.clone(), self.labels.clone(), probs)
    }

    /// Draws `k` point indices distributed according to the probabilities.
    pub fn sample_indices<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        // validated probabilities always admit a weighted index
        let dist = WeightedIndex::new(&self.probs).expect("valid probability simplex");
        (0..k).map(|_| dist.sample(rng)).collect()
    }

    /// The points selected by `indices`.
    pub fn gather(&self, indices: &[usize]) -> Vec<[f64; 4]> {
        indices.iter().map(|&i| self.points[i]).collect()
    }

    /// Smallest Euclidean distance between two distinct points.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (a, pa) in self.points.iter().enumerate() {
            for pb in &self.points[a + 1..] {
                let d: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
                best = best.min(d);
            }
        }
        best.sqrt()
    }

    /// Text serialization. Every float is written with the shortest decimal
    /// representation that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_MAGIC} v{FILE_VERSION}");
        let _ = writeln!(s, "m {}", self.m);
        let _ = writeln!(s, "M {}", self.size());
        let _ = writeln!(s, "# r_x i_x r_y i_y label prob");
        for j in 0..self.size() {
            let p = &self.points[j];
            let _ = writeln!(
                s,
                "{:?} {:?} {:?} {:?} {} {:?}",
                p[0],
                p[1],
                p[2],
                p[3],
                format_label(self.labels[j], self.m),
                self.probs[j]
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let parse_err = |line: usize, msg: String| Error::Parse(format!("line {line}: {msg}"));

        let (n, header) = lines.next().ok_or_else(|| Error::Parse("empty file".into()))?;
        let version = header
            .strip_prefix(FILE_MAGIC)
            .map(str::trim)
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| parse_err(n, format!("expected header '{FILE_MAGIC} v{FILE_VERSION}'")))?;
        if version != FILE_VERSION {
            return Err(parse_err(n, format!("unsupported version {version}")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let (n, l) = lines.next().ok_or_else(|| Error::Parse(format!("missing '{name}' line")))?;
            l.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| parse_err(n, format!("expected '{name} <integer>'")))
        };
        let m = field("m")?;
        let size = field("M")?;
        if m == 0 || m > 24 || size != 1 << m {
            return Err(Error::Invariant(format!("M = 2^m: header has m={m}, M={size}")));
        }
        let mut points = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        let mut probs = Vec::with_capacity(size);
        for (n, line) in lines {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(parse_err(n, format!("expected 6 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(n, format!("'{s}': {e}")));
            points.push([num(cols[0])?, num(cols[1])?, num(cols[2])?, num(cols[3])?]);
            labels.push(parse_label(cols[4], m).ok_or_else(|| parse_err(n, format!("bad {m}-bit label '{}'", cols[4])))?);
            probs.push(num(cols[5])?);
        }
        if points.len() != size {
            return Err(Error::Invariant(format!("M = 2^m: header says {size} rows, found {}", points.len())));
        }
        Self::new(m, points, labels, probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `-Σ p log2 p` with `0 log 0 = 0`.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

/// MSB-first bit string of width `m`.
pub fn format_label(label: u32, m: usize) -> String {
    (0..m).map(|i| if (label >> (m - 1 - i)) & 1 == 1 { '1' } else { '0' }).collect()
}

fn parse_label(s: &str, m: usize) -> Option<u32> {
    if s.len() != m || !s.bytes().all(|b| b == b'0' || b == b'1') {
        return None;
    }
    u32::from_str_radix(s, 2).ok()
}

#[inline]
fn gray(n: u32) -> u32 {
    n ^ (n >> 1)
}

/// Gray-labelled PAM on the odd integers `-(L-1), ..., L-1`.
fn pam(levels: u32) -> impl Iterator<Item = (f64, u32)> {
    (0..levels).map(move |a| ((2 * a) as f64 - (levels - 1) as f64, gray(a)))
}

// Cross 32-QAM: an 8x4 Gray rectangle whose |I| = 7 columns are folded onto
// the |Q| = 5 rows. Placement minimizes the mean Hamming distance between
// nearest neighbours (1.154 bits).
const CROSS32: [(i8, i8, u8); 32] = [
    (-3, 5, 0b00011), (-1, 5, 0b00010), (1, 5, 0b10010), (3, 5, 0b10011),
    (-5, 3, 0b00110), (-3, 3, 0b01110), (-1, 3, 0b01010), (1, 3, 0b11010), (3, 3, 0b11110), (5, 3, 0b10110),
    (-5, 1, 0b00111), (-3, 1, 0b01111), (-1, 1, 0b01011), (1, 1, 0b11011), (3, 1, 0b11111), (5, 1, 0b10111),
    (-5, -1, 0b00101), (-3, -1, 0b01101), (-1, -1, 0b01001), (1, -1, 0b11001), (3, -1, 0b11101), (5, -1, 0b10101),
    (-5, -3, 0b00100), (-3, -3, 0b01100), (-1, -3, 0b01000), (1, -3, 0b11000), (3, -3, 0b11100), (5, -3, 0b10100),
    (-3, -5, 0b00000), (-1, -5, 0b00001), (1, -5, 0b10001), (3, -5, 0b10000),
];

/// Unnormalized 2D QAM on the odd-integer grid, indexed by label.
pub fn qam_2d(bits: u32) -> Result<Vec<[f64; 2]>> {
    let size = 1usize << bits;
    let mut out = vec![[0.0; 2]; size];
    match bits {
        5 => {
            for &(i, q, l) in &CROSS32 {
                out[l as usize] = [i as f64, q as f64];
            }
        }
        2..=6 => {
            // Square for even orders, 4x2 rectangle for 8-QAM.
            let q_bits = bits / 2;
            let i_bits = bits - q_bits;
            for (i, li) in pam(1 << i_bits) {
                for (q, lq) in pam(1 << q_bits) {
                    out[((li << q_bits) | lq) as usize] = [i, q];
                }
            }
        }
        _ => return invalid(format!("unsupported QAM order: {bits} bits per 2D symbol (supported: 2..=6)")),
    }
    Ok(out)
}

fn pm_grid(bits_per_2d: u32) -> Result<Vec<[f64; 4]>> {
    let qam = qam_2d(bits_per_2d)?;
    let mut pts = Vec::with_capacity(qam.len() * qam.len());
    // label = (X label << bits) | Y label, so the point index equals its label
    for x in &qam {
        for y in &qam {
            pts.push([x[0], x[1], y[0], y[1]]);
        }
    }
    Ok(pts)
}

/// Polarization-multiplexed QAM: the same 2D QAM on both polarizations,
/// labels formed by concatenating the X and Y Gray labels. Uniform, unit energy.
pub fn make_pm_qam(bits_per_2d: u32) -> Result<Constellation4D> {
    if !(2..=6).contains(&bits_per_2d) {
        return invalid(format!(
            "unsupported PM-QAM order: {bits_per_2d} bits per 2D symbol (supported: 2..=6)"
        ));
    }
    Constellation4D::uniform(2 * bits_per_2d as usize, pm_grid(bits_per_2d)?)?.normalize()
}

/// Maxwell-Boltzmann probabilities `exp(-λ‖x‖²)/Z` on the integer grid.
pub fn maxwell_boltzmann(energies: &[f64], lambda: f64) -> Vec<f64> {
    // shift by the minimum energy so large λ does not underflow everything
    let e0 = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = energies.iter().map(|e| (-lambda * (e - e0)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// PM-64QAM with Maxwell-Boltzmann shaping. `lambda` applies to the
/// unnormalized odd-integer grid (minimum energy per 4D point is 4).
pub fn make_mb_shaped_pm64qam(lambda: f64) -> Result<Constellation4D> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return invalid(format!("Maxwell-Boltzmann lambda must be finite and >= 0, got {lambda}"));
    }
    let grid = Constellation4D::uniform(12, pm_grid(6)?)?;
    let probs = maxwell_boltzmann(&grid.energies(), lambda);
    grid.with_probs(probs)?.normalize()
}
