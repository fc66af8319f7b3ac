//! Fisher information and CRLB of the sensing parameters as functions of the
//! pre-equalizer. The parameter vector is `[Re h, Im h, ν, τ]` per sensing path.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::channel::{path_derivatives, ChannelError, Param, PathDerivatives, PathParams};
use crate::linalg::{symmetric_condition, CMatrix};
use crate::otfs::FrameConfig;

/// Condition number above which the FIM is ridge-regularized before inversion.
pub const FIM_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrlbError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("Fisher information is zero; the pre-equalizer carries no sensing energy")]
    NoInformation,
    #[error("FIM dimension {0} is not a positive multiple of 4")]
    Dimension(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    pub entries: DMatrix<f64>,
    pub sigma2_s: f64,
    pub sigma2_a: f64,
}

impl FisherInfo {
    pub fn num_paths(&self) -> usize {
        self.entries.nrows() / 4
    }
}

/// Bound for one sensing path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathCrlb {
    pub re_h: f64,
    pub im_h: f64,
    /// Hz².
    pub nu: f64,
    /// s².
    pub tau: f64,
    /// m².
    pub range: f64,
    /// (m/s)².
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrlbMatrix {
    pub entries: DMatrix<f64>,
    pub regularized: bool,
    pub ridge: f64,
    pub paths: Vec<PathCrlb>,
}

impl CrlbMatrix {
    pub fn range(&self) -> f64 {
        self.paths.iter().map(|p| p.range).sum()
    }

    pub fn velocity(&self) -> f64 {
        self.paths.iter().map(|p| p.velocity).sum()
    }
}

/// `(2σ_s²/σ_A²) Re tr(D_i P Pᴴ D_jᴴ)` over all parameters of the given paths.
pub fn fim_from_derivatives(derivs: &[PathDerivatives], p: &CMatrix, config: &FrameConfig) -> FisherInfo {
    let products: Vec<CMatrix> = derivs
        .iter()
        .flat_map(|d| Param::ORDER.iter().map(move |q| d.get(*q) * p))
        .collect();
    let scale = 2.0 * config.sigma2_s / config.sigma2_a;
    let n = products.len();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            // Re tr(A Bᴴ) = Σ Re(a conj(b))
            let v: f64 = products[i]
                .iter()
                .zip(products[j].iter())
                .map(|(a, b)| a.re * b.re + a.im * b.im)
                .sum();
            entries[(i, j)] = scale * v;
            entries[(j, i)] = scale * v;
        }
    }
    FisherInfo {
        entries,
        sigma2_s: config.sigma2_s,
        sigma2_a: config.sigma2_a,
    }
}

pub fn fim(paths: &[PathParams], p: &CMatrix, config: &FrameConfig) -> Result<FisherInfo, CrlbError> {
    let derivs = paths
        .iter()
        .map(|path| path_derivatives(path, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fim_from_derivatives(&derivs, p, config))
}

/// `(FIM + ridge I)⁻¹`.
///
/// With `ridge = 0` the condition number is measured on the equilibrated
/// matrix `D^{-1/2} FIM D^{-1/2}` (`D` the diagonal), which is invariant to
/// the physical units of the parameters. Above [`FIM_COND_LIMIT`] a ridge of
/// `1e-9 tr(·) / dim` is added in that basis, i.e. `1e-9 FIM_ii` on each
/// diagonal entry, and the result is flagged.
pub fn crlb(fim: &FisherInfo, ridge: f64, config: &FrameConfig) -> Result<CrlbMatrix, CrlbError> {
    let dim = fim.entries.nrows();
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(CrlbError::Dimension(dim));
    }
    let sym = (&fim.entries + fim.entries.transpose()) * 0.5;
    let tr = sym.trace();
    if !(tr > 0.0) {
        return Err(CrlbError::NoInformation);
    }
    if ridge != 0.0 {
        let mat = &sym + DMatrix::identity(dim, dim) * ridge;
        return Ok(build_crlb(spd_inverse(mat)?, false, ridge, config));
    }
    let floor = tr / dim as f64;
    let d: Vec<f64> = (0..dim)
        .map(|i| if sym[(i, i)] > 0.0 { sym[(i, i)] } else { floor })
        .collect();
    let eq = DMatrix::from_fn(dim, dim, |i, j| sym[(i, j)] / (d[i] * d[j]).sqrt());
    let (eq, regularized, ridge) = if symmetric_condition(&eq) > FIM_COND_LIMIT {
        let r = 1e-9 * eq.trace() / dim as f64;
        (eq + DMatrix::identity(dim, dim) * r, true, r)
    } else {
        (eq, false, 0.0)
    };
    let inv = spd_inverse(eq)?;
    let inv = DMatrix::from_fn(dim, dim, |i, j| inv[(i, j)] / (d[i] * d[j]).sqrt());
    Ok(build_crlb(inv, regularized, ridge, config))
}

fn spd_inverse(mat: DMatrix<f64>) -> Result<DMatrix<f64>, CrlbError> {
    match mat.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => mat.try_inverse().ok_or(CrlbError::NoInformation),
    }
}

fn build_crlb(entries: DMatrix<f64>, regularized: bool, ridge: f64, config: &FrameConfig) -> CrlbMatrix {
    let range_scale = (config.c / 2.0).powi(2);
    let vel_scale = (config.c / (2.0 * config.f0)).powi(2);
    let paths = (0..entries.nrows() / 4)
        .map(|p| {
            let d = |i: usize| entries[(4 * p + i, 4 * p + i)];
            PathCrlb {
                re_h: d(0),
                im_h: d(1),
                nu: d(2),
                tau: d(3),
                range: range_scale * d(3),
                velocity: vel_scale * d(2),
            }
        })
        .collect();
    CrlbMatrix {
        entries,
        regularized,
        ridge,
        paths,
    }
}

/// Reference scales that make range and velocity bounds dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SensingRefs {
    pub range_m: f64,
    pub velocity_mps: f64,
}

impl Default for SensingRefs {
    fn default() -> Self {
        Self {
            range_m: 1.0,
            velocity_mps: 1.0,
        }
    }
}

/// `Σ_p crlb_range / range_ref² + crlb_velocity / velocity_ref²`.
pub fn sensing_objective(crlb: &CrlbMatrix, refs: &SensingRefs) -> f64 {
    crlb.paths
        .iter()
        .map(|p| p.range / refs.range_m.powi(2) + p.velocity / refs.velocity_mps.powi(2))
        .sum()
}
