//! Frame geometry, constellation mapping and the DD/TD transforms.
//!
//! Vectors are DD grids flattened column by column: entry `n * M + m` holds
//! delay bin `m` of Doppler bin `n`. DFTs use the unitary `1/sqrt(N)` scaling.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtfsError {
    #[error("invalid frame configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} bits, got {got}")]
    BitCount { expected: usize, got: usize },
    #[error("expected a vector of length {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("unsupported modulation order {0}; use 2 or 4")]
    Order(u32),
}

/// OTFS frame geometry and radio constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    /// Delay bins.
    pub m: usize,
    /// Doppler bins.
    pub n: usize,
    /// Subcarrier spacing (Hz).
    pub delta_f: f64,
    /// Slot duration (s).
    pub t: f64,
    /// Cyclic prefix length (samples).
    pub cp_len: usize,
    /// Carrier frequency (Hz).
    pub f0: f64,
    /// Speed of light (m/s).
    pub c: f64,
    pub sigma2_s: f64,
    /// Noise power at the access point (sensing receiver).
    pub sigma2_a: f64,
    /// Noise power at the user equipment.
    pub sigma2_u: f64,
    pub p_max: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FrameConfig {
    /// 16x16 grid, CP of 4, 15 kHz spacing at 3 GHz; 10 dB transmit SNR.
    pub fn full_scale() -> Self {
        Self::with_grid(16, 16, 4)
    }

    /// 4x4 grid with a one-sample CP; small enough for quick experiments.
    pub fn desk() -> Self {
        Self::with_grid(4, 4, 1)
    }

    pub fn with_grid(m: usize, n: usize, cp_len: usize) -> Self {
        let delta_f = 15e3;
        let mn = (m * n) as f64;
        Self {
            m,
            n,
            delta_f,
            t: 1.0 / delta_f,
            cp_len,
            f0: 3e9,
            c: 3e8,
            sigma2_s: 1.0,
            sigma2_a: 0.1,
            sigma2_u: 0.1,
            p_max: mn,
        }
        .with_snr_tx_db(10.0)
    }

    pub fn validate(&self) -> Result<(), OtfsError> {
        let bad = |msg: String| Err(OtfsError::InvalidConfig(msg));
        if self.m < 2 || self.n < 2 {
            return bad(format!("grid {}x{} must be at least 2x2", self.m, self.n));
        }
        if self.cp_len >= self.m {
            return bad(format!("cp_len {} must be below M = {}", self.cp_len, self.m));
        }
        if ((self.t * self.delta_f) - 1.0).abs() > 1e-9 {
            return bad(format!("T * delta_f = {} must equal 1", self.t * self.delta_f));
        }
        let positive = [
            ("delta_f", self.delta_f),
            ("f0", self.f0),
            ("c", self.c),
            ("sigma2_s", self.sigma2_s),
            ("sigma2_a", self.sigma2_a),
            ("sigma2_u", self.sigma2_u),
            ("p_max", self.p_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        Ok(())
    }

    pub fn mn(&self) -> usize {
        self.m * self.n
    }

    pub fn grid(&self) -> Grid {
        Grid { m: self.m, n: self.n }
    }

    /// Sets both noise powers so that `P_max / (MN sigma2_u)` equals `db`.
    pub fn with_snr_tx_db(mut self, db: f64) -> Self {
        let noise = self.p_max / (self.mn() as f64 * 10f64.powf(db / 10.0));
        self.sigma2_u = noise;
        self.sigma2_a = noise;
        self
    }

    pub fn snr_tx_db(&self) -> f64 {
        10.0 * (self.p_max / (self.mn() as f64 * self.sigma2_u)).log10()
    }
}

/// Grid shape used by the transforms. Unlike [`FrameConfig`], `n = 1` is allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub m: usize,
    pub n: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qpsk,
    Qam16,
}

impl Modulation {
    pub fn from_order(o: u32) -> Result<Self, OtfsError> {
        match o {
            2 => Ok(Self::Qpsk),
            4 => Ok(Self::Qam16),
            other => Err(OtfsError::Order(other)),
        }
    }

    /// Bits per symbol.
    pub fn order(self) -> u32 {
        match self {
            Self::Qpsk => 2,
            Self::Qam16 => 4,
        }
    }

    fn levels(self) -> &'static [f64] {
        match self {
            Self::Qpsk => &[1.0, -1.0],
            Self::Qam16 => &[3.0, 1.0, -1.0, -3.0],
        }
    }

    fn axis_scale(self) -> f64 {
        match self {
            Self::Qpsk => FRAC_1_SQRT_2,
            Self::Qam16 => 1.0 / 10f64.sqrt(),
        }
    }

    fn axis_bits(self) -> usize {
        self.order() as usize / 2
    }
}

// Gray code for one axis: bit pattern -> level.
fn axis_level(modulation: Modulation, bits: &[u8]) -> f64 {
    match modulation {
        Modulation::Qpsk => {
            if bits[0] == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Modulation::Qam16 => match (bits[0], bits[1]) {
            (0, 0) => 3.0,
            (0, _) => 1.0,
            (_, 0) => -3.0,
            _ => -1.0,
        },
    }
}

fn axis_bits_of(modulation: Modulation, level: f64) -> &'static [u8] {
    match modulation {
        Modulation::Qpsk => {
            if level > 0.0 {
                &[0]
            } else {
                &[1]
            }
        }
        Modulation::Qam16 => match level as i32 {
            3 => &[0, 0],
            1 => &[0, 1],
            -1 => &[1, 1],
            _ => &[1, 0],
        },
    }
}

/// Gray-mapped symbols with average power `sigma2_s`. The first half of each
/// symbol's bits selects the in-phase level, the second half the quadrature level.
pub fn map_symbols(
    bits: &[u8],
    modulation: Modulation,
    config: &FrameConfig,
) -> Result<Vec<Complex64>, OtfsError> {
    let o = modulation.order() as usize;
    let expected = o * config.mn();
    if bits.len() != expected {
        return Err(OtfsError::BitCount {
            expected,
            got: bits.len(),
        });
    }
    let half = modulation.axis_bits();
    let scale = modulation.axis_scale() * config.sigma2_s.sqrt();
    Ok(bits
        .chunks(o)
        .map(|b| {
            Complex64::new(
                axis_level(modulation, &b[..half]),
                axis_level(modulation, &b[half..]),
            ) * scale
        })
        .collect())
}

/// Minimum-distance hard decision. For these square constellations this is a
/// per-axis nearest-level slice.
pub fn demap_symbols(y: &[Complex64], modulation: Modulation, config: &FrameConfig) -> Vec<u8> {
    let scale = modulation.axis_scale() * config.sigma2_s.sqrt();
    let nearest = |v: f64| {
        let v = v / scale;
        *modulation
            .levels()
            .iter()
            .min_by(|a, b| (v - **a).abs().total_cmp(&(v - **b).abs()))
            .expect("non-empty constellation")
    };
    let mut out = Vec::with_capacity(y.len() * modulation.order() as usize);
    for s in y {
        out.extend_from_slice(axis_bits_of(modulation, nearest(s.re)));
        out.extend_from_slice(axis_bits_of(modulation, nearest(s.im)));
    }
    out
}

fn doppler_axis_fft(x: &[Complex64], grid: Grid, inverse: bool) -> Result<Vec<Complex64>, OtfsError> {
    if x.len() != grid.len() {
        return Err(OtfsError::Length {
            expected: grid.len(),
            got: x.len(),
        });
    }
    let (m, n) = (grid.m, grid.n);
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = vec![Complex64::default(); x.len()];
    let mut row = vec![Complex64::default(); n];
    for mi in 0..m {
        for ni in 0..n {
            row[ni] = x[ni * m + mi];
        }
        fft.process(&mut row);
        for ni in 0..n {
            out[ni * m + mi] = row[ni] * scale;
        }
    }
    Ok(out)
}

/// `(F_N^H ⊗ I_M) x`.
pub fn dd_to_td(x: &[Complex64], grid: Grid) -> Result<Vec<Complex64>, OtfsError> {
    doppler_axis_fft(x, grid, true)
}

/// `(F_N ⊗ I_M) r`.
pub fn td_to_dd(r: &[Complex64], grid: Grid) -> Result<Vec<Complex64>, OtfsError> {
    doppler_axis_fft(r, grid, false)
}

/// Unitary DFT matrix `F_N` with entries `exp(-j 2 pi a b / N) / sqrt(N)`.
pub fn dft_matrix(n: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |a, b| {
        Complex64::from_polar(scale, -2.0 * std::f64::consts::PI * (a * b) as f64 / n as f64)
    })
}

/// `F_N ⊗ I_M` as a dense matrix.
pub fn dd_transform_matrix(grid: Grid) -> DMatrix<Complex64> {
    let f = dft_matrix(grid.n);
    let eye = DMatrix::<Complex64>::identity(grid.m, grid.m);
    f.kronecker(&eye)
}
