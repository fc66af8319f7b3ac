//! Delay-Doppler channel matrices built from physical path parameters.
//!
//! A path with taps `(l, k)` contributes, in the time domain,
//! `h e^{-j2πlk/MN} Δ(k) (Ψ(l) + Ψ_CP(l))`. The DD form is
//! `(F_N ⊗ I_M) H_TD (F_N^H ⊗ I_M)`.
//!
//! Conventions settled against [`oracle_cp_transmission`]:
//! * `Ψ_CP(i, j) = sinc(MN - (j - i) - l)` on the band `j - i >= MN - L`, so a
//!   zero-length CP contributes nothing and integer taps wrap exactly like a
//!   cyclic shift.
//! * The Doppler ramp is referenced to the first sample after CP removal.
//! * Doppler taps are signed (`|k| <= N - 1`); approaching targets give `k < 0`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::CMatrix;
use crate::otfs::{td_to_dd, FrameConfig, Grid};

/// Margin kept from tap-range edges and from the `round(l)` split when
/// differentiating.
pub const DERIVATIVE_EPS: f64 = 1e-6;

const TAP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("path {path}: taps (l = {l}, k = {k}) outside 0 <= l <= {max_l}, |k| <= {max_k}")]
    TapOutOfRange {
        path: usize,
        l: f64,
        k: f64,
        max_l: usize,
        max_k: usize,
    },
    #[error("taps (l = {l}, k = {k}) too close to a range edge or the delay split for a derivative")]
    NearSplit { l: f64, k: f64 },
    #[error("oracle needs integer taps, got l = {l}, k = {k}")]
    NonIntegerTaps { l: f64, k: f64 },
    #[error("delay tap {l} exceeds the cyclic prefix length {cp_len}")]
    DelayExceedsCp { l: usize, cp_len: usize },
    #[error("expected a vector of length {expected}, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Sensing,
    Communication,
}

/// Physical description of one propagation path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub h: Complex64,
    /// Delay (s).
    pub tau: f64,
    /// Doppler shift (Hz).
    pub nu: f64,
    pub kind: PathKind,
}

/// Grid-normalized path: `l = τ M Δf`, `k = ν N T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathTaps {
    pub h: Complex64,
    pub l: f64,
    pub k: f64,
}

impl PathParams {
    pub fn taps(&self, config: &FrameConfig) -> PathTaps {
        PathTaps {
            h: self.h,
            l: self.tau * config.m as f64 * config.delta_f,
            k: self.nu * config.n as f64 * config.t,
        }
    }

    /// Inverse of [`PathParams::taps`].
    pub fn from_taps(taps: PathTaps, kind: PathKind, config: &FrameConfig) -> Self {
        Self {
            h: taps.h,
            tau: taps.l / (config.m as f64 * config.delta_f),
            nu: taps.k / (config.n as f64 * config.t),
            kind,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Td,
    Dd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    pub domain: Domain,
    pub entries: CMatrix,
    pub paths: Vec<PathParams>,
}

/// `sin(πx) / (πx)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// `d sinc / dx = (cos(πx) - sinc(x)) / x`, zero at the origin.
pub fn sinc_prime(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        // Taylor expansion avoids cancellation near zero.
        let p2 = PI * PI;
        -p2 * x / 3.0 + p2 * p2 * x.powi(3) / 30.0
    } else {
        ((PI * x).cos() - sinc(x)) / x
    }
}

fn split_index(l: f64, mn: usize) -> usize {
    (l.round().max(0.0) as usize).min(mn)
}

/// Exponents `e_m` with `Δ = diag(η^{e_m})`: `m` for the head, `-l + m'` for
/// the last `round(l)` entries.
pub fn doppler_exponents(l: f64, mn: usize) -> Vec<f64> {
    let r = split_index(l, mn);
    (0..mn)
        .map(|m| {
            if m < mn - r {
                m as f64
            } else {
                -l + (m - (mn - r)) as f64
            }
        })
        .collect()
}

/// Diagonal of `Δ(k)`, `η = e^{j2πk/MN}`.
pub fn doppler_diagonal(k: f64, l: f64, config: &FrameConfig) -> Vec<Complex64> {
    let mn = config.mn();
    doppler_exponents(l, mn)
        .into_iter()
        .map(|e| Complex64::from_polar(1.0, 2.0 * PI * k * e / mn as f64))
        .collect()
}

/// `Ψ(i, j) = sinc(i - j - l)`.
pub fn delay_matrix(l: f64, config: &FrameConfig) -> nalgebra::DMatrix<f64> {
    let mn = config.mn();
    nalgebra::DMatrix::from_fn(mn, mn, |i, j| sinc(i as f64 - j as f64 - l))
}

fn in_cp_band(i: usize, j: usize, mn: usize, cp_len: usize) -> bool {
    j >= i && j - i + cp_len >= mn
}

/// `Ψ_CP(i, j) = sinc(MN - (j - i) - l)` for `j - i >= MN - L`, zero elsewhere.
pub fn cp_matrix(l: f64, config: &FrameConfig) -> nalgebra::DMatrix<f64> {
    let mn = config.mn();
    nalgebra::DMatrix::from_fn(mn, mn, |i, j| {
        if in_cp_band(i, j, mn, config.cp_len) {
            sinc(mn as f64 - (j - i) as f64 - l)
        } else {
            0.0
        }
    })
}

fn check_taps(index: usize, taps: &PathTaps, config: &FrameConfig) -> Result<(), ChannelError> {
    let max_l = config.m - 1;
    let max_k = config.n - 1;
    let ok = taps.l.is_finite()
        && taps.k.is_finite()
        && taps.l >= -TAP_TOL
        && taps.l <= max_l as f64 + TAP_TOL
        && taps.k.abs() <= max_k as f64 + TAP_TOL;
    if ok {
        Ok(())
    } else {
        Err(ChannelError::TapOutOfRange {
            path: index,
            l: taps.l,
            k: taps.k,
            max_l,
            max_k,
        })
    }
}

// Ψ + Ψ_CP and its derivative in l.
fn delay_terms(l: f64, config: &FrameConfig, with_derivative: bool) -> (CMatrix, Option<CMatrix>) {
    let mn = config.mn();
    let mut psi = CMatrix::zeros(mn, mn);
    let mut dpsi = with_derivative.then(|| CMatrix::zeros(mn, mn));
    for j in 0..mn {
        for i in 0..mn {
            let mut arg = i as f64 - j as f64 - l;
            let mut v = sinc(arg);
            let mut dv = if with_derivative { -sinc_prime(arg) } else { 0.0 };
            if in_cp_band(i, j, mn, config.cp_len) {
                arg = mn as f64 - (j - i) as f64 - l;
                v += sinc(arg);
                if with_derivative {
                    dv -= sinc_prime(arg);
                }
            }
            psi[(i, j)] = Complex64::new(v, 0.0);
            if let Some(d) = dpsi.as_mut() {
                d[(i, j)] = Complex64::new(dv, 0.0);
            }
        }
    }
    (psi, dpsi)
}

fn scale_rows(diag: &[Complex64], a: &CMatrix) -> CMatrix {
    let mut out = a.clone();
    for (i, d) in diag.iter().enumerate() {
        let mut row = out.row_mut(i);
        row *= *d;
    }
    out
}

/// Unit-attenuation TD matrix of a path with taps `(l, k)`.
pub fn unit_td_matrix(l: f64, k: f64, config: &FrameConfig) -> CMatrix {
    let mn = config.mn() as f64;
    let phase = Complex64::from_polar(1.0, -2.0 * PI * l * k / mn);
    let (psi, _) = delay_terms(l, config, false);
    scale_rows(&doppler_diagonal(k, l, config), &psi) * phase
}

/// `(F_N ⊗ I_M) H (F_N^H ⊗ I_M)` using FFTs along the Doppler axis.
pub fn to_dd_domain(h: &CMatrix, grid: Grid) -> CMatrix {
    let mn = grid.len();
    let transform_columns = |a: &CMatrix| {
        let mut out = CMatrix::zeros(mn, mn);
        for j in 0..mn {
            let col: Vec<Complex64> = a.column(j).iter().copied().collect();
            let t = td_to_dd(&col, grid).expect("square matrix matches grid");
            out.column_mut(j).copy_from_slice(&t);
        }
        out
    };
    // A H A^H = (A (A H)^H)^H
    let ah = transform_columns(h);
    transform_columns(&ah.adjoint()).adjoint()
}

/// Per-path matrix `h G` in the requested domain.
pub fn path_matrix(path: &PathParams, config: &FrameConfig, domain: Domain) -> Result<CMatrix, ChannelError> {
    let taps = path.taps(config);
    check_taps(0, &taps, config)?;
    let td = unit_td_matrix(taps.l, taps.k, config) * taps.h;
    Ok(match domain {
        Domain::Td => td,
        Domain::Dd => to_dd_domain(&td, config.grid()),
    })
}

/// Sum of per-path TD matrices.
pub fn td_channel(paths: &[PathParams], config: &FrameConfig) -> Result<ChannelMatrix, ChannelError> {
    let mn = config.mn();
    let mut entries = CMatrix::zeros(mn, mn);
    for (i, p) in paths.iter().enumerate() {
        let taps = p.taps(config);
        check_taps(i, &taps, config)?;
        entries += unit_td_matrix(taps.l, taps.k, config) * taps.h;
    }
    Ok(ChannelMatrix {
        domain: Domain::Td,
        entries,
        paths: paths.to_vec(),
    })
}

pub fn dd_channel(paths: &[PathParams], config: &FrameConfig) -> Result<ChannelMatrix, ChannelError> {
    let td = td_channel(paths, config)?;
    Ok(ChannelMatrix {
        domain: Domain::Dd,
        entries: to_dd_domain(&td.entries, config.grid()),
        paths: td.paths,
    })
}

/// Component of the sensing parameter vector, in FIM order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    ReH,
    ImH,
    Nu,
    Tau,
}

impl Param {
    pub const ORDER: [Param; 4] = [Param::ReH, Param::ImH, Param::Nu, Param::Tau];
}

/// DD derivatives of one path matrix.
#[derive(Clone, Debug)]
pub struct PathDerivatives {
    pub re_h: CMatrix,
    pub im_h: CMatrix,
    /// With respect to ν (per Hz).
    pub nu: CMatrix,
    /// With respect to τ (per second).
    pub tau: CMatrix,
    /// With respect to the delay tap `l`.
    pub dl: CMatrix,
    /// With respect to the Doppler tap `k`.
    pub dk: CMatrix,
}

impl PathDerivatives {
    pub fn get(&self, p: Param) -> &CMatrix {
        match p {
            Param::ReH => &self.re_h,
            Param::ImH => &self.im_h,
            Param::Nu => &self.nu,
            Param::Tau => &self.tau,
        }
    }
}

/// Rejects taps where the derivative is undefined or unreliable.
pub fn check_derivative_taps(l: f64, k: f64, config: &FrameConfig) -> Result<(), ChannelError> {
    let eps = DERIVATIVE_EPS;
    let near_half = (l - l.floor() - 0.5).abs() < eps;
    let ok = l > eps && l < (config.m - 1) as f64 - eps && k.abs() < (config.n - 1) as f64 - eps && !near_half;
    if ok {
        Ok(())
    } else {
        Err(ChannelError::NearSplit { l, k })
    }
}

/// `(G, ∂G/∂l, ∂G/∂k)` in the DD domain, `round(l)` held fixed.
pub fn unit_dd_with_tap_derivatives(l: f64, k: f64, config: &FrameConfig) -> (CMatrix, CMatrix, CMatrix) {
    let mn = config.mn();
    let mnf = mn as f64;
    let phase = Complex64::from_polar(1.0, -2.0 * PI * l * k / mnf);
    let (psi, dpsi) = delay_terms(l, config, true);
    let dpsi = dpsi.expect("requested");
    let r = split_index(l, mn);
    let exps = doppler_exponents(l, mn);
    let eta: Vec<Complex64> = exps
        .iter()
        .map(|e| Complex64::from_polar(1.0, 2.0 * PI * k * e / mnf))
        .collect();
    let j2pi = Complex64::new(0.0, 2.0 * PI / mnf);

    let base = scale_rows(&eta, &psi) * phase;
    // ∂e_m/∂l = -1 on the tail.
    let deta_l: Vec<Complex64> = eta
        .iter()
        .enumerate()
        .map(|(m, v)| if m >= mn - r { -j2pi * k * v } else { Complex64::default() })
        .collect();
    let dl = &base * (-j2pi * k) + (scale_rows(&deta_l, &psi) + scale_rows(&eta, &dpsi)) * phase;
    let deta_k: Vec<Complex64> = eta.iter().zip(&exps).map(|(v, e)| j2pi * *e * v).collect();
    let dk = &base * (-j2pi * l) + scale_rows(&deta_k, &psi) * phase;

    let g = config.grid();
    (to_dd_domain(&base, g), to_dd_domain(&dl, g), to_dd_domain(&dk, g))
}

/// Derivatives of the DD path matrix `h G(τ, ν)` for every sensing parameter.
pub fn path_derivatives(path: &PathParams, config: &FrameConfig) -> Result<PathDerivatives, ChannelError> {
    let taps = path.taps(config);
    check_derivative_taps(taps.l, taps.k, config)?;
    let (g, dg_dl, dg_dk) = unit_dd_with_tap_derivatives(taps.l, taps.k, config);
    let dl = dg_dl * taps.h;
    let dk = dg_dk * taps.h;
    Ok(PathDerivatives {
        im_h: &g * Complex64::new(0.0, 1.0),
        re_h: g,
        nu: &dk * Complex64::new(config.n as f64 * config.t, 0.0),
        tau: &dl * Complex64::new(config.m as f64 * config.delta_f, 0.0),
        dl,
        dk,
    })
}

pub fn channel_derivative(path: &PathParams, wrt: Param, config: &FrameConfig) -> Result<CMatrix, ChannelError> {
    Ok(path_derivatives(path, config)?.get(wrt).clone())
}

/// Brute-force CP transmission of a TD frame over one integer-tap path.
pub fn oracle_cp_transmission(
    d: &[Complex64],
    path: &PathParams,
    config: &FrameConfig,
) -> Result<Vec<Complex64>, ChannelError> {
    let mn = config.mn();
    if d.len() != mn {
        return Err(ChannelError::Length {
            expected: mn,
            got: d.len(),
        });
    }
    let taps = path.taps(config);
    let (lr, kr) = (taps.l.round(), taps.k.round());
    if (taps.l - lr).abs() > TAP_TOL || (taps.k - kr).abs() > TAP_TOL || lr < 0.0 {
        return Err(ChannelError::NonIntegerTaps { l: taps.l, k: taps.k });
    }
    let l = lr as usize;
    let cp = config.cp_len;
    if l > cp {
        return Err(ChannelError::DelayExceedsCp { l, cp_len: cp });
    }
    let extended: Vec<Complex64> = d[mn - cp..].iter().chain(d).copied().collect();
    let mut delayed = vec![Complex64::default(); extended.len()];
    delayed[l..].copy_from_slice(&extended[..extended.len() - l]);
    let gain = taps.h * Complex64::from_polar(1.0, -2.0 * PI * lr * kr / mn as f64);
    Ok(delayed[cp..]
        .iter()
        .enumerate()
        .map(|(n, v)| gain * Complex64::from_polar(1.0, 2.0 * PI * kr * n as f64 / mn as f64) * v)
        .collect())
}

#[cfg(test)]
mod tests;
