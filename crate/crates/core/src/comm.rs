//! Communication metrics: normalization factor, closed-form and simulated
//! MSE, receiver baselines and the complexity model.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{fro_sq, regularized_inverse, trace, CMatrix};
use crate::otfs::{demap_symbols, map_symbols, FrameConfig, Modulation};

/// Condition number above which the zero-forcing inverse is regularized.
pub const ZF_COND_LIMIT: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("normalization undefined: HP = 0 and noise power is 0")]
    UndefinedNormalization,
    #[error("matrix shapes {h:?} and {p:?} are not conformable for an {mn}-point frame")]
    Shape {
        h: (usize, usize),
        p: (usize, usize),
        mn: usize,
    },
    #[error("regularized MMSE matrix is singular")]
    Singular,
}

/// Pre-equalization matrix applied to DD symbols before transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct PreEqMatrix {
    pub entries: CMatrix,
}

impl PreEqMatrix {
    pub fn new(entries: CMatrix) -> Self {
        Self { entries }
    }

    /// `sqrt(P_max / (MN σ_s²)) I`: uniform power, no shaping.
    pub fn scaled_identity(config: &FrameConfig) -> Self {
        let mn = config.mn();
        let g = (config.p_max / (mn as f64 * config.sigma2_s)).sqrt();
        Self::new(CMatrix::identity(mn, mn) * Complex64::new(g, 0.0))
    }

    pub fn power(&self) -> f64 {
        fro_sq(&self.entries)
    }

    /// Rescaled so that `‖P‖_F² = p_max`.
    pub fn normalized(&self, p_max: f64) -> Self {
        let s = (p_max / self.power()).sqrt();
        Self::new(&self.entries * Complex64::new(s, 0.0))
    }

    pub fn satisfies_power(&self, p_max: f64) -> bool {
        self.power() <= p_max + 1e-9
    }
}

fn check_shapes(h: &CMatrix, p: &CMatrix, config: &FrameConfig) -> Result<(), CommError> {
    let mn = config.mn();
    if h.shape() != (mn, mn) || p.shape() != (mn, mn) {
        return Err(CommError::Shape {
            h: h.shape(),
            p: p.shape(),
            mn,
        });
    }
    Ok(())
}

/// `sqrt(MN σ_s² / (σ_s² ‖HP‖_F² + MN σ_U²))`.
pub fn beta(h: &CMatrix, p: &CMatrix, config: &FrameConfig) -> Result<f64, CommError> {
    check_shapes(h, p, config)?;
    let mn = config.mn() as f64;
    let denom = config.sigma2_s * fro_sq(&(h * p)) + mn * config.sigma2_u;
    if denom <= 0.0 {
        return Err(CommError::UndefinedNormalization);
    }
    Ok((mn * config.sigma2_s / denom).sqrt())
}

/// `E‖βy - s‖² = 2 MN σ_s² - 2 β σ_s² Re tr(HP)` over one frame.
pub fn expected_mse(h: &CMatrix, p: &CMatrix, config: &FrameConfig) -> Result<f64, CommError> {
    let b = beta(h, p, config)?;
    let mn = config.mn() as f64;
    Ok(2.0 * mn * config.sigma2_s - 2.0 * b * config.sigma2_s * trace(&(h * p)).re)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub mse_closed: f64,
    /// Mean per-frame squared error.
    pub mse_mc: f64,
    pub mse_stderr: f64,
    pub ber: f64,
    pub beta: f64,
    pub snr_tx_db: f64,
    pub n_frames: usize,
}

/// Circularly-symmetric complex Gaussian noise with total variance `var`.
pub fn complex_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, var: f64) -> DVector<Complex64> {
    let sd = (var / 2.0).sqrt();
    DVector::from_fn(len, |_, _| {
        Complex64::new(sd * rng.sample::<f64, _>(StandardNormal), sd * rng.sample::<f64, _>(StandardNormal))
    })
}

pub fn random_bits<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

/// Simulates `s -> Ps -> H -> +z -> β -> demap` without equalization.
pub fn monte_carlo_link<R: Rng + ?Sized>(
    h: &CMatrix,
    p: &CMatrix,
    config: &FrameConfig,
    modulation: Modulation,
    n_frames: usize,
    rng: &mut R,
) -> Result<LinkReport, CommError> {
    let b = beta(h, p, config)?;
    let mse_closed = expected_mse(h, p, config)?;
    let hp = h * p;
    let mn = config.mn();
    let nbits = modulation.order() as usize * mn;
    let mut errs = Vec::with_capacity(n_frames);
    let mut bit_errors = 0usize;
    for _ in 0..n_frames.max(1) {
        let bits = random_bits(rng, nbits);
        let s = DVector::from_vec(map_symbols(&bits, modulation, config).expect("bit count"));
        let y = &hp * &s + complex_noise(rng, mn, config.sigma2_u);
        let est = y * Complex64::new(b, 0.0);
        errs.push((&est - &s).norm_squared());
        let est: Vec<Complex64> = est.iter().copied().collect();
        let out = demap_symbols(&est, modulation, config);
        bit_errors += out.iter().zip(&bits).filter(|(a, b)| a != b).count();
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = if errs.len() > 1 {
        errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(LinkReport {
        mse_closed,
        mse_mc: mean,
        mse_stderr: (var / n).sqrt(),
        ber: bit_errors as f64 / (n * nbits as f64),
        beta: b,
        snr_tx_db: config.snr_tx_db(),
        n_frames: errs.len(),
    })
}

/// `(HᴴH + (σ_U²/σ_s²) I)⁻¹ Hᴴ y`.
pub fn mmse_detect(h: &CMatrix, y: &DVector<Complex64>, config: &FrameConfig) -> Result<DVector<Complex64>, CommError> {
    let n = h.ncols();
    let gram = h.adjoint() * h + CMatrix::identity(n, n) * Complex64::new(config.sigma2_u / config.sigma2_s, 0.0);
    let inv = gram.try_inverse().ok_or(CommError::Singular)?;
    Ok(inv * h.adjoint() * y)
}

/// Closed-form per-frame MSE of the MMSE receiver on `y = H s + z`:
/// `σ_s² tr((I + (σ_s²/σ_U²) HᴴH)⁻¹)`.
pub fn mmse_mse(h: &CMatrix, config: &FrameConfig) -> Result<f64, CommError> {
    let n = h.ncols();
    let m = CMatrix::identity(n, n) + h.adjoint() * h * Complex64::new(config.sigma2_s / config.sigma2_u, 0.0);
    let inv = m.try_inverse().ok_or(CommError::Singular)?;
    Ok(config.sigma2_s * trace(&inv).re)
}

/// Closed-form per-frame MSE of the zero-forcing receiver: `σ_U² tr((HᴴH)⁻¹)`.
pub fn zf_receiver_mse(h: &CMatrix, config: &FrameConfig) -> Result<f64, CommError> {
    let inv = (h.adjoint() * h).try_inverse().ok_or(CommError::Singular)?;
    Ok(config.sigma2_u * trace(&inv).re)
}

/// MMSE-receiver baseline: perfect CSI at the UE, uniform-power transmission.
pub fn mmse_baseline_mse(h: &CMatrix, config: &FrameConfig) -> Result<f64, CommError> {
    let p = PreEqMatrix::scaled_identity(config);
    mmse_mse(&(h * &p.entries), config)
}

/// `sqrt(P_max) H⁻¹ / ‖H⁻¹‖_F`; the flag reports a regularized inverse.
pub fn zf_preeq(h: &CMatrix, config: &FrameConfig) -> (PreEqMatrix, bool) {
    let (inv, regularized) = regularized_inverse(h, ZF_COND_LIMIT);
    (PreEqMatrix::new(inv).normalized(config.p_max), regularized)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReceiverScheme {
    Conventional,
    Preeq,
}

/// Complex multiplications per frame: `(MN)³ + 2^o MN` with channel
/// equalization, `2^o MN` with pre-equalization.
pub fn receiver_complexity(m: usize, n: usize, o: u32, scheme: ReceiverScheme) -> u128 {
    let mn = (m * n) as u128;
    let detect = (1u128 << o) * mn;
    match scheme {
        ReceiverScheme::Conventional => mn.pow(3) + detect,
        ReceiverScheme::Preeq => detect,
    }
}

/// Percentage saved by the pre-equalized receiver.
pub fn complexity_reduction(m: usize, n: usize, o: u32) -> f64 {
    let conv = receiver_complexity(m, n, o, ReceiverScheme::Conventional) as f64;
    let pre = receiver_complexity(m, n, o, ReceiverScheme::Preeq) as f64;
    100.0 * (1.0 - pre / conv)
}

#[cfg(test)]
mod tests;
