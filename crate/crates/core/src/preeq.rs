//! Dual-branch residual pre-equalization network.
//!
//! The communication branch reads the stacked inverse of the estimated
//! channel, the sensing branch reads the stacked tap-unit derivatives of each
//! sensing path, and a fusion network adds a learned correction to the inverse.
//! With every weight at zero the output is the power-normalized zero-forcing
//! pre-equalizer.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CNode, NodeId, Tape, Tensor};
use crate::channel::{
    check_derivative_taps, dd_channel, unit_dd_with_tap_derivatives, ChannelError, ChannelMatrix, PathKind,
    PathParams, DERIVATIVE_EPS,
};
use crate::comm::{expected_mse, mmse_baseline_mse, CommError, PreEqMatrix, ZF_COND_LIMIT};
use crate::container::{Container, ContainerError, ContainerKind};
use crate::crlb::{crlb, fim, sensing_objective, CrlbError, CrlbMatrix, SensingRefs, FIM_COND_LIMIT};
use crate::linalg::{regularized_inverse, symmetric_condition, CMatrix};
use crate::nn::{flatten_params, unflatten_params, Mlp, MlpNodes};
use crate::optim::Adamax;
use crate::otfs::FrameConfig;

pub const PREEQ_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PreeqError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pre-equalizer output is all zeros; power normalization undefined")]
    ZeroOutput,
    #[error("training diverged at epoch {epoch} (learning rate {learning_rate}): loss is not finite")]
    Diverged { epoch: usize, learning_rate: f64 },
    #[error("no training instances")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Crlb(#[from] CrlbError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// `[Re; Im]` stacked along rows, shape `(2r, c)`.
pub fn stack(a: &CMatrix) -> Tensor {
    let (r, c) = a.shape();
    let mut data = Vec::with_capacity(2 * r * c);
    for i in 0..r {
        data.extend((0..c).map(|j| a[(i, j)].re));
    }
    for i in 0..r {
        data.extend((0..c).map(|j| a[(i, j)].im));
    }
    Tensor::matrix(2 * r, c, data).expect("shape")
}

/// Inverse of [`stack`].
pub fn unstack(t: &Tensor) -> Result<CMatrix, PreeqError> {
    let (rr, c) = t
        .dims2()
        .filter(|(r, _)| r % 2 == 0 && *r > 0)
        .ok_or_else(|| PreeqError::Shape(format!("cannot unstack {:?}", t.shape())))?;
    let r = rr / 2;
    Ok(CMatrix::from_fn(r, c, |i, j| Complex64::new(t.at(i, j), t.at(i + r, j))))
}

/// Moves a path into the admissible tap range, and for sensing paths away
/// from the points where derivatives are undefined. Returns whether anything
/// changed.
pub fn clamp_path(path: &PathParams, config: &FrameConfig) -> (PathParams, bool) {
    let mut taps = path.taps(config);
    let (l0, k0) = (taps.l, taps.k);
    let max_l = (config.m - 1) as f64;
    let max_k = (config.n - 1) as f64;
    let margin = if path.kind == PathKind::Sensing { 2.0 * DERIVATIVE_EPS } else { 0.0 };
    taps.l = if taps.l.is_finite() { taps.l.clamp(margin, max_l - margin) } else { margin };
    taps.k = if taps.k.is_finite() { taps.k.clamp(-max_k + margin, max_k - margin) } else { 0.0 };
    if path.kind == PathKind::Sensing {
        let frac = taps.l - taps.l.floor() - 0.5;
        if frac.abs() < DERIVATIVE_EPS {
            taps.l += if frac < 0.0 { -2.0 * DERIVATIVE_EPS } else { 2.0 * DERIVATIVE_EPS };
        }
    }
    let mut h = taps.h;
    if !(h.re.is_finite() && h.im.is_finite()) {
        h = Complex64::new(0.0, 0.0);
    }
    let changed = taps.l != l0 || taps.k != k0 || h != taps.h;
    taps.h = h;
    (PathParams::from_taps(taps, path.kind, config), changed)
}

/// DD channel from estimated parameters, clamping out-of-range taps.
pub fn reconstruct_channel(params: &[PathParams], config: &FrameConfig) -> Result<(ChannelMatrix, bool), PreeqError> {
    let mut clamped = false;
    let paths: Vec<PathParams> = params
        .iter()
        .map(|p| {
            let (q, c) = clamp_path(p, config);
            clamped |= c;
            q
        })
        .collect();
    Ok((dd_channel(&paths, config)?, clamped))
}

/// Inverse with Tikhonov regularization above condition number 1e10.
pub fn invert_csi(h: &CMatrix) -> (CMatrix, bool) {
    regularized_inverse(h, ZF_COND_LIMIT)
}

/// Stacked network inputs; sensing entries are per sensing path and in tap
/// units (`h ∂G/∂l`, `h ∂G/∂k`).
#[derive(Clone, Debug, PartialEq)]
pub struct PreEqInputs {
    pub inv_channel: Tensor,
    pub d_tau: Vec<Tensor>,
    pub d_nu: Vec<Tensor>,
}

impl PreEqInputs {
    pub fn mn(&self) -> usize {
        self.inv_channel.shape()[1]
    }

    pub fn comm_vector(&self) -> &[f64] {
        self.inv_channel.data()
    }

    /// `[d_tau_1, d_nu_1, d_tau_2, ...]` flattened row-major.
    pub fn sensing_vector(&self) -> Vec<f64> {
        self.d_tau
            .iter()
            .zip(&self.d_nu)
            .flat_map(|(a, b)| a.data().iter().chain(b.data()).copied())
            .collect()
    }
}

pub fn assemble_inputs(inv: &CMatrix, d_tau: &[CMatrix], d_nu: &[CMatrix]) -> Result<PreEqInputs, PreeqError> {
    let (r, c) = inv.shape();
    if r != c {
        return Err(PreeqError::Shape(format!("inverse is {r}x{c}")));
    }
    if d_tau.len() != d_nu.len() || d_tau.iter().chain(d_nu).any(|d| d.shape() != (r, c)) {
        return Err(PreeqError::Shape("derivative stacks must match the inverse".into()));
    }
    Ok(PreEqInputs {
        inv_channel: stack(inv),
        d_tau: d_tau.iter().map(stack).collect(),
        d_nu: d_nu.iter().map(stack).collect(),
    })
}

/// Tap-unit derivative matrices `(G, jG, h ∂G/∂k, h ∂G/∂l)` of a sensing path,
/// ordered like the sensing parameters (Re h, Im h, ν, τ).
fn tap_derivatives(path: &PathParams, config: &FrameConfig) -> Result<[CMatrix; 4], ChannelError> {
    let t = path.taps(config);
    check_derivative_taps(t.l, t.k, config)?;
    let (g, dl, dk) = unit_dd_with_tap_derivatives(t.l, t.k, config);
    Ok([g.clone(), g * Complex64::new(0.0, 1.0), dk * t.h, dl * t.h])
}

/// Inputs from estimated parameters. Returns the inputs and flags for
/// clamping and for a regularized inverse.
pub fn csi_inputs(
    comm: &[PathParams],
    sensing: &[PathParams],
    config: &FrameConfig,
) -> Result<(PreEqInputs, bool, bool), PreeqError> {
    let (h, mut clamped) = reconstruct_channel(comm, config)?;
    let (inv, regularized) = invert_csi(&h.entries);
    let mut d_tau = Vec::new();
    let mut d_nu = Vec::new();
    for p in sensing {
        let (q, c) = clamp_path(p, config);
        clamped |= c;
        let [_, _, dk, dl] = tap_derivatives(&q, config)?;
        d_tau.push(dl);
        d_nu.push(dk);
    }
    Ok((assemble_inputs(&inv, &d_tau, &d_nu)?, clamped, regularized))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreEqNetConfig {
    pub mn: usize,
    pub sensing_paths: usize,
    pub hidden: Vec<usize>,
    /// Dropout rate after the first two hidden layers of each branch.
    pub dropout: f64,
}

impl PreEqNetConfig {
    pub fn new(mn: usize, sensing_paths: usize) -> Self {
        Self {
            mn,
            sensing_paths,
            hidden: vec![128, 256, 512],
            dropout: 0.1,
        }
    }

    pub fn comm_inputs(&self) -> usize {
        2 * self.mn * self.mn
    }

    pub fn sensing_inputs(&self) -> usize {
        4 * self.mn * self.mn * self.sensing_paths
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreEqNet {
    pub config: PreEqNetConfig,
    pub comm: Mlp,
    pub sensing: Mlp,
    pub fusion: Mlp,
}

pub struct PreEqNodes {
    comm: MlpNodes,
    sensing: MlpNodes,
    fusion: MlpNodes,
}

impl PreEqNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        [&self.comm, &self.sensing, &self.fusion]
            .iter()
            .flat_map(|m| m.ids())
            .collect()
    }
}

impl PreEqNet {
    fn build(config: PreEqNetConfig, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mn2 = config.mn * config.mn;
        let comm = Mlp::uniform(config.comm_inputs(), &config.hidden, mn2, bound, rng);
        let sensing = Mlp::uniform(config.sensing_inputs(), &config.hidden, mn2, bound, rng);
        let fusion = Mlp::uniform(2 * mn2, &config.hidden, 2 * mn2, bound, rng);
        Self {
            config,
            comm,
            sensing,
            fusion,
        }
    }

    pub fn zeros(config: PreEqNetConfig) -> Self {
        Self::build(config, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// All weights uniform in `[-scale, scale]` except the last fusion layer,
    /// which starts at zero so that the initial output is the ZF inverse.
    pub fn init(config: PreEqNetConfig, scale: f64, seed: u64) -> Self {
        let mut net = Self::build(config, scale, &mut ChaCha8Rng::seed_from_u64(seed));
        if let Some(last) = net.fusion.layers.last_mut() {
            let (i, o) = (last.inputs(), last.outputs());
            *last = crate::nn::Dense::zeros(i, o);
        }
        net
    }

    /// Every weight uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn random(config: PreEqNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::build(config, 0.0, &mut rng);
        for mlp in [&mut net.comm, &mut net.sensing, &mut net.fusion] {
            for layer in &mut mlp.layers {
                let bound = 1.0 / (layer.inputs() as f64).sqrt();
                *layer = crate::nn::Dense::uniform(layer.inputs(), layer.outputs(), bound, &mut rng);
            }
        }
        net
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.comm.tensors().chain(self.sensing.tensors()).chain(self.fusion.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.comm
            .tensors_mut()
            .chain(self.sensing.tensors_mut())
            .chain(self.fusion.tensors_mut())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PreEqNodes {
        PreEqNodes {
            comm: self.comm.bind(tape, trainable),
            sensing: self.sensing.bind(tape, trainable),
            fusion: self.fusion.bind(tape, trainable),
        }
    }

    /// Raw outputs `(B, 2(MN)²)` for a batch; `x1` is `(B, 2(MN)²)` and `x2`
    /// is `(B, 4(MN)² P_S)`. Dropout is active when `rng` is given.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        nodes: &PreEqNodes,
        x1: NodeId,
        x2: NodeId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, AutodiffError> {
        let dropout = self.config.dropout;
        let c = nodes.comm.forward(tape, x1, dropout, rng.as_deref_mut())?;
        let s = nodes.sensing.forward(tape, x2, dropout, rng.as_deref_mut())?;
        let joined = tape.concat(&[c, s])?;
        let f = nodes.fusion.forward(tape, joined, dropout, rng)?;
        tape.add(x1, f)
    }

    fn check_inputs(&self, inputs: &PreEqInputs) -> Result<(), PreeqError> {
        if inputs.inv_channel.len() != self.config.comm_inputs()
            || inputs.d_tau.len() != self.config.sensing_paths
            || inputs.sensing_vector().len() != self.config.sensing_inputs()
        {
            return Err(PreeqError::Shape(format!(
                "inputs for MN={} with {} sensing paths do not fit the network ({:?})",
                inputs.mn(),
                inputs.d_tau.len(),
                self.config
            )));
        }
        Ok(())
    }

    fn batch(&self, tape: &mut Tape, batch: &[&PreEqInputs]) -> Result<(NodeId, NodeId), PreeqError> {
        for i in batch {
            self.check_inputs(i)?;
        }
        let b = batch.len();
        let x1: Vec<f64> = batch.iter().flat_map(|i| i.comm_vector().iter().copied()).collect();
        let x2: Vec<f64> = batch.iter().flat_map(|i| i.sensing_vector()).collect();
        let x1 = tape.constant(Tensor::matrix(b, self.config.comm_inputs(), x1)?);
        let x2 = tape.constant(Tensor::matrix(b, self.config.sensing_inputs(), x2)?);
        Ok((x1, x2))
    }

    /// Raw output stack `(2MN, MN)` for one input.
    pub fn forward(
        &self,
        inputs: &PreEqInputs,
        dropout_active: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, PreeqError> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false);
        let (x1, x2) = self.batch(&mut tape, &[inputs])?;
        let r = if dropout_active { Some(rng) } else { None };
        let y = self.forward_nodes(&mut tape, &nodes, x1, x2, r)?;
        let mn = self.config.mn;
        Ok(tape.value(y).clone().with_shape(vec![2 * mn, mn]))
    }

    pub fn to_container(&self) -> Result<Container, PreeqError> {
        let header = NetHeader {
            schema_version: PREEQ_SCHEMA_VERSION,
            config: self.config.clone(),
            values: self.num_params(),
        };
        Ok(Container::new(
            ContainerKind::PreeqWeights,
            &header,
            flatten_params(self.tensors()),
        )?)
    }

    pub fn from_container(c: &Container) -> Result<Self, PreeqError> {
        let header: NetHeader = c.header_as()?;
        if header.schema_version != PREEQ_SCHEMA_VERSION {
            return Err(PreeqError::Config(format!("schema version {}", header.schema_version)));
        }
        let mut net = Self::zeros(header.config);
        if net.num_params() != header.values || c.body.len() != header.values {
            return Err(ContainerError::BodyLength {
                expected: net.num_params(),
                got: c.body.len(),
            }
            .into());
        }
        unflatten_params(net.tensors_mut(), &c.body);
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), PreeqError> {
        Ok(self.to_container()?.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PreeqError> {
        Self::from_container(&Container::read(path, ContainerKind::PreeqWeights)?)
    }
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    schema_version: u32,
    config: PreEqNetConfig,
    values: usize,
}

/// `P = sqrt(P_max) P̄ / ‖P̄‖_F`, reassembled as `P[..MN] + j P[MN..]`.
pub fn normalize_power(raw: &Tensor, p_max: f64) -> Result<PreEqMatrix, PreeqError> {
    let norm = raw.sum_squares().sqrt();
    if !(norm > 0.0) {
        return Err(PreeqError::ZeroOutput);
    }
    let c = unstack(raw)?;
    Ok(PreEqMatrix::new(c * Complex64::new(p_max.sqrt() / norm, 0.0)))
}

/// Per-instance reference values that make both loss terms dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRefs {
    pub mse: f64,
    pub sensing: f64,
}

/// One training or evaluation example: network inputs from estimated CSI and
/// the true channel and sensing paths the loss is evaluated against.
#[derive(Clone, Debug)]
pub struct Instance {
    pub inputs: PreEqInputs,
    pub h_true: CMatrix,
    pub sensing_true: Vec<PathParams>,
    derivs: Vec<[(Tensor, Tensor); 4]>,
    h_pair: (Tensor, Tensor),
    pub refs: LossRefs,
    /// Per-frame MSE of the MMSE receiver baseline on the true channel.
    pub mmse: f64,
    pub clamped: bool,
    pub regularized: bool,
}

/// Evaluated quality of one pre-equalizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub mse: f64,
    pub sensing: f64,
    /// Summed velocity CRLB over sensing paths, (m/s)².
    pub crlb_velocity: f64,
    /// Summed range CRLB over sensing paths, m².
    pub crlb_range: f64,
}

pub fn evaluate_matrix(
    p: &PreEqMatrix,
    h_true: &CMatrix,
    sensing_true: &[PathParams],
    config: &FrameConfig,
    refs: &SensingRefs,
) -> Result<Evaluation, PreeqError> {
    let mse = expected_mse(h_true, &p.entries, config)?;
    let c: CrlbMatrix = crlb(&fim(sensing_true, &p.entries, config)?, 0.0, config)?;
    Ok(Evaluation {
        mse,
        sensing: sensing_objective(&c, refs),
        crlb_velocity: c.velocity(),
        crlb_range: c.range(),
    })
}

impl Instance {
    /// `csi_*` feed the network; `true_*` define the loss.
    pub fn new(
        csi_comm: &[PathParams],
        csi_sensing: &[PathParams],
        true_comm: &[PathParams],
        true_sensing: &[PathParams],
        config: &FrameConfig,
        sensing_refs: &SensingRefs,
    ) -> Result<Self, PreeqError> {
        let (inputs, clamped, regularized) = csi_inputs(csi_comm, csi_sensing, config)?;
        let h_true = dd_channel(true_comm, config)?.entries;
        let derivs = true_sensing
            .iter()
            .map(|p| Ok(tap_derivatives(p, config)?.map(|d| crate::linalg::to_pair(&d))))
            .collect::<Result<Vec<_>, ChannelError>>()?;
        let zf = normalize_power(&inputs.inv_channel, config.p_max)?;
        let e = evaluate_matrix(&zf, &h_true, true_sensing, config, sensing_refs)?;
        let mmse = mmse_baseline_mse(&h_true, config)?;
        Ok(Self {
            h_pair: crate::linalg::to_pair(&h_true),
            inputs,
            h_true,
            sensing_true: true_sensing.to_vec(),
            derivs,
            refs: LossRefs {
                mse: e.mse,
                sensing: e.sensing,
            },
            mmse,
            clamped,
            regularized,
        })
    }

    pub fn evaluate(&self, p: &PreEqMatrix, config: &FrameConfig, refs: &SensingRefs) -> Result<Evaluation, PreeqError> {
        evaluate_matrix(p, &self.h_true, &self.sensing_true, config, refs)
    }
}

/// Weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rho_c: f64,
    pub rho_l: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), PreeqError> {
        if !(0.0..=1.0).contains(&self.rho_c) || !(self.rho_l >= 0.0) {
            return Err(PreeqError::Config(format!("loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Nodes of one instance's loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// `ρ_C MSE/mse_ref + (1-ρ_C) sensing/sensing_ref`, without the weight penalty.
    pub loss: NodeId,
    pub mse: NodeId,
    pub sensing: NodeId,
}

/// Builds the per-instance loss from a raw output with `2(MN)²` entries.
pub fn instance_loss(
    tape: &mut Tape,
    raw: NodeId,
    inst: &Instance,
    config: &FrameConfig,
    rho_c: f64,
    refs: &SensingRefs,
) -> Result<LossNodes, PreeqError> {
    let mn = config.mn();
    let mnf = mn as f64;
    let x = tape.reshape(raw, vec![2 * mn, mn])?;
    let norm = tape.frobenius_norm(x);
    let inv = tape.recip(norm);
    let s = tape.scale(inv, config.p_max.sqrt());
    let xs = tape.scale_by(x, s)?;
    let p = CNode {
        re: tape.slice_rows(xs, 0, mn)?,
        im: tape.slice_rows(xs, mn, 2 * mn)?,
    };

    // Expected MSE with the receive scaling β.
    let h = CNode::constant(tape, inst.h_pair.0.clone(), inst.h_pair.1.clone());
    let hp = h.matmul(tape, p)?;
    let fro = hp.fro_sq(tape)?;
    let denom = tape.scale(fro, config.sigma2_s);
    let denom = tape.offset(denom, mnf * config.sigma2_u);
    let beta_sq = tape.recip(denom);
    let beta_sq = tape.scale(beta_sq, mnf * config.sigma2_s);
    let beta = tape.sqrt(beta_sq);
    let tr = hp.re_trace(tape)?;
    let bt = tape.mul(beta, tr)?;
    let mse = tape.scale(bt, -2.0 * config.sigma2_s);
    let mse = tape.offset(mse, 2.0 * mnf * config.sigma2_s);

    // Fisher information in tap units, then the sensing objective.
    let q: Vec<CNode> = inst
        .derivs
        .iter()
        .flat_map(|d| d.iter())
        .map(|(re, im)| {
            let d = CNode::constant(tape, re.clone(), im.clone());
            d.matmul(tape, p)
        })
        .collect::<Result<_, _>>()?;
    let dim = q.len();
    let fscale = 2.0 * config.sigma2_s / config.sigma2_a;
    let mut entries = vec![None; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let v = q[i].re_inner(tape, q[j])?;
            let v = tape.scale(v, fscale);
            entries[i * dim + j] = Some(v);
            entries[j * dim + i] = Some(v);
        }
    }
    let entries: Vec<NodeId> = entries.into_iter().map(|e| e.expect("filled")).collect();
    let mut f = tape.pack(&entries, vec![dim, dim])?;
    let fv = tape.value(f);
    let fm = DMatrix::from_fn(dim, dim, |i, j| fv.at(i, j));
    let d: Vec<f64> = (0..dim).map(|i| fm[(i, i)].max(f64::MIN_POSITIVE)).collect();
    let eq = DMatrix::from_fn(dim, dim, |i, j| fm[(i, j)] / (d[i] * d[j]).sqrt());
    if symmetric_condition(&eq) > FIM_COND_LIMIT {
        let ridge = 1e-9 * eq.trace() / dim as f64;
        let mut r = Tensor::zeros(vec![dim, dim]);
        for (i, di) in d.iter().enumerate() {
            r.data_mut()[i * dim + i] = ridge * di;
        }
        let r = tape.constant(r);
        f = tape.add(f, r)?;
    }
    let c = tape.inverse(f)?;
    let tau_scale = config.m as f64 * config.delta_f;
    let nu_scale = config.n as f64 * config.t;
    let range_w = (config.c / 2.0).powi(2) / (tau_scale * tau_scale) / refs.range_m.powi(2);
    let vel_w = (config.c / (2.0 * config.f0)).powi(2) / (nu_scale * nu_scale) / refs.velocity_mps.powi(2);
    let mut terms = Vec::new();
    for path in 0..dim / 4 {
        let ct = tape.index(c, (4 * path + 3) * dim + 4 * path + 3)?;
        let cn = tape.index(c, (4 * path + 2) * dim + 4 * path + 2)?;
        terms.push(tape.scale(ct, range_w));
        terms.push(tape.scale(cn, vel_w));
    }
    let mut sensing = terms[0];
    for t in &terms[1..] {
        sensing = tape.add(sensing, *t)?;
    }

    let a = tape.scale(mse, rho_c / inst.refs.mse);
    let b = tape.scale(sensing, (1.0 - rho_c) / inst.refs.sensing);
    let loss = tape.add(a, b)?;
    Ok(LossNodes { loss, mse, sensing })
}

/// `loss_L2` evaluated without a tape: the normalized weighted objective of
/// `p` plus `ρ_L Σ‖ψ‖²`.
pub fn loss_l2(
    p: &PreEqMatrix,
    inst: &Instance,
    weights: &LossWeights,
    config: &FrameConfig,
    refs: &SensingRefs,
    weight_sq_sum: f64,
) -> Result<f64, PreeqError> {
    weights.validate()?;
    let e = inst.evaluate(p, config, refs)?;
    Ok(weights.rho_c * e.mse / inst.refs.mse
        + (1.0 - weights.rho_c) * e.sensing / inst.refs.sensing
        + weights.rho_l * weight_sq_sum)
}

/// Mean batch loss plus the weight penalty, on the tape.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    net: &PreEqNet,
    tape: &mut Tape,
    nodes: &PreEqNodes,
    batch: &[&Instance],
    config: &FrameConfig,
    weights: &LossWeights,
    refs: &SensingRefs,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, PreeqError> {
    let inputs: Vec<&PreEqInputs> = batch.iter().map(|i| &i.inputs).collect();
    let (x1, x2) = net.batch(tape, &inputs)?;
    let out = net.forward_nodes(tape, nodes, x1, x2, rng)?;
    let mut total: Option<NodeId> = None;
    for (r, inst) in batch.iter().enumerate() {
        let row = tape.slice_rows(out, r, r + 1)?;
        let l = instance_loss(tape, row, inst, config, weights.rho_c, refs)?.loss;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or(PreeqError::Empty)?;
    let mut loss = tape.scale(total, 1.0 / batch.len() as f64);
    if weights.rho_l > 0.0 {
        for id in nodes.ids() {
            let sq = tape.sum_squares(id);
            let sq = tape.scale(sq, weights.rho_l);
            loss = tape.add(loss, sq)?;
        }
    }
    Ok(loss)
}

/// Outcome of [`check_loss_gradient`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1, |n|)`, the measure used by `grad_check`.
    pub max_error: f64,
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)`. Dominated by round-off in the
    /// difference quotient wherever the gradient entry is tiny.
    pub max_relative: f64,
    pub coords: usize,
}

/// Sampled central-difference check of the batch-loss gradient, dropout off.
///
/// For every parameter tensor `coords` random entries are perturbed by
/// `±step`.
pub fn check_loss_gradient(
    net: &PreEqNet,
    batch: &[&Instance],
    config: &FrameConfig,
    weights: &LossWeights,
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, PreeqError> {
    let refs = SensingRefs::default();
    let eval = |n: &PreEqNet| -> Result<f64, PreeqError> {
        let mut tape = Tape::new();
        let nodes = n.bind(&mut tape, false);
        let l = batch_loss(n, &mut tape, &nodes, batch, config, weights, &refs, None)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let nodes = net.bind(&mut tape, true);
    let loss = batch_loss(net, &mut tape, &nodes, batch, config, weights, &refs, None)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = nodes
        .ids()
        .iter()
        .zip(net.tensors())
        .map(|(id, t)| grads.get_or_zeros(*id, t))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_error: 0.0,
        max_relative: 0.0,
        coords: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        for _ in 0..coords.min(len) {
            let k = rng.random_range(0..len);
            let perturbed = |delta: f64| {
                let mut n = net.clone();
                let t = n.tensors_mut().nth(ti).expect("tensor index");
                t.data_mut()[k] += delta;
                eval(&n)
            };
            let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
            let a = grad.data()[k];
            let diff = (a - numeric).abs();
            report.max_error = report.max_error.max(diff / numeric.abs().max(1.0));
            report.max_relative = report.max_relative.max(diff / a.abs().max(numeric.abs()).max(1e-8));
            report.coords += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreeqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
    pub sensing_refs: SensingRefs,
    /// Return the best-validation snapshot instead of the final weights.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for PreeqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            weights: LossWeights {
                rho_c: 0.5,
                rho_l: 1e-6,
            },
            init_scale: 1e-3,
            sensing_refs: SensingRefs::default(),
            keep_best: false,
            seed: 0,
        }
    }
}

/// Mean evaluation of a network over a set of instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SetEvaluation {
    pub loss: f64,
    pub mse: f64,
    pub sensing: f64,
    pub crlb_velocity: f64,
    pub mmse: f64,
    pub zf_mse: f64,
    pub zf_sensing: f64,
}

/// Evaluation at one epoch; epoch 0 is the initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub val_mse: f64,
    pub val_sensing: f64,
    /// Root mean velocity CRLB over validation instances, m/s.
    pub val_velocity_rmse: f64,
}

/// Pre-equalizers produced by one forward pass over all instances.
pub fn infer_batch(net: &PreEqNet, instances: &[&PreEqInputs], config: &FrameConfig) -> Result<Vec<PreEqMatrix>, PreeqError> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(64) {
        let mut tape = Tape::new();
        let nodes = net.bind(&mut tape, false);
        let (x1, x2) = net.batch(&mut tape, chunk)?;
        let y = net.forward_nodes(&mut tape, &nodes, x1, x2, None)?;
        let y = tape.value(y);
        let (mn, width) = (net.config.mn, net.config.comm_inputs());
        for r in 0..chunk.len() {
            let raw = Tensor::matrix(2 * mn, mn, y.data()[r * width..(r + 1) * width].to_vec())?;
            out.push(normalize_power(&raw, config.p_max)?);
        }
    }
    Ok(out)
}

/// Reconstructs, inverts, assembles, runs the network once and normalizes.
/// The flag reports clamped taps.
pub fn infer(
    net: &PreEqNet,
    comm: &[PathParams],
    sensing: &[PathParams],
    config: &FrameConfig,
) -> Result<(PreEqMatrix, bool), PreeqError> {
    let (inputs, clamped, _) = csi_inputs(comm, sensing, config)?;
    let p = infer_batch(net, &[&inputs], config)?.pop().expect("one output");
    Ok((p, clamped))
}

/// Evaluation of the network output for every instance.
pub fn evaluate_each(
    net: &PreEqNet,
    instances: &[Instance],
    config: &FrameConfig,
    refs: &SensingRefs,
) -> Result<Vec<Evaluation>, PreeqError> {
    let inputs: Vec<&PreEqInputs> = instances.iter().map(|i| &i.inputs).collect();
    let ps = infer_batch(net, &inputs, config)?;
    instances.iter().zip(&ps).map(|(inst, p)| inst.evaluate(p, config, refs)).collect()
}

pub fn evaluate_set(
    net: &PreEqNet,
    instances: &[Instance],
    config: &FrameConfig,
    weights: &LossWeights,
    refs: &SensingRefs,
) -> Result<SetEvaluation, PreeqError> {
    if instances.is_empty() {
        return Err(PreeqError::Empty);
    }
    let evals = evaluate_each(net, instances, config, refs)?;
    let n = instances.len() as f64;
    let mut acc = SetEvaluation {
        loss: 0.0,
        mse: 0.0,
        sensing: 0.0,
        crlb_velocity: 0.0,
        mmse: 0.0,
        zf_mse: 0.0,
        zf_sensing: 0.0,
    };
    for (inst, e) in instances.iter().zip(evals) {
        acc.loss += weights.rho_c * e.mse / inst.refs.mse + (1.0 - weights.rho_c) * e.sensing / inst.refs.sensing;
        acc.mse += e.mse;
        acc.sensing += e.sensing;
        acc.crlb_velocity += e.crlb_velocity;
        acc.mmse += inst.mmse;
        acc.zf_mse += inst.refs.mse;
        acc.zf_sensing += inst.refs.sensing;
    }
    for v in [
        &mut acc.loss,
        &mut acc.mse,
        &mut acc.sensing,
        &mut acc.crlb_velocity,
        &mut acc.mmse,
        &mut acc.zf_mse,
        &mut acc.zf_sensing,
    ] {
        *v /= n;
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct TrainedPreEq {
    /// Final weights, or the best-validation snapshot with `keep_best`.
    pub net: PreEqNet,
    pub trace: Vec<EpochTrace>,
    pub best_epoch: usize,
}

/// Adamax on the mean batch loss for a fixed number of epochs.
pub fn train_preeq(
    net: PreEqNet,
    train: &[Instance],
    val: &[Instance],
    config: &FrameConfig,
    tc: &PreeqTrainConfig,
) -> Result<TrainedPreEq, PreeqError> {
    tc.weights.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(PreeqError::Empty);
    }
    if tc.batch_size == 0 {
        return Err(PreeqError::Config("batch size must be positive".into()));
    }
    let refs = tc.sensing_refs;
    let mut net = net;
    let mut opt = Adamax::new(tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let trace_point = |net: &PreEqNet, epoch: usize, train_loss: f64, best: f64| -> Result<EpochTrace, PreeqError> {
        let e = evaluate_set(net, val, config, &tc.weights, &refs)?;
        Ok(EpochTrace {
            epoch,
            train_loss,
            val_loss: e.loss,
            best_val_loss: best.min(e.loss),
            val_mse: e.mse,
            val_sensing: e.sensing,
            val_velocity_rmse: e.crlb_velocity.sqrt(),
        })
    };

    let first = trace_point(&net, 0, f64::NAN, f64::INFINITY)?;
    let (mut best_loss, mut best_epoch) = (first.val_loss, 0);
    let mut best_net = tc.keep_best.then(|| net.clone());
    let mut trace = vec![first];
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let batch: Vec<&Instance> = idx.iter().map(|i| &train[*i]).collect();
            let mut tape = Tape::new();
            let nodes = net.bind(&mut tape, true);
            let loss = batch_loss(&net, &mut tape, &nodes, &batch, config, &tc.weights, &refs, Some(&mut rng))?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(PreeqError::Diverged {
                    epoch,
                    learning_rate: tc.learning_rate,
                });
            }
            total += lv * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = nodes
                .ids()
                .into_iter()
                .zip(net.tensors())
                .map(|(id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            opt.step(net.tensors_mut().collect(), &g);
        }
        let point = trace_point(&net, epoch, total / train.len() as f64, best_loss)?;
        if !point.val_loss.is_finite() {
            return Err(PreeqError::Diverged {
                epoch,
                learning_rate: tc.learning_rate,
            });
        }
        if point.val_loss < best_loss {
            (best_loss, best_epoch) = (point.val_loss, epoch);
            if tc.keep_best {
                best_net = Some(net.clone());
            }
        }
        trace.push(point);
    }
    Ok(TrainedPreEq {
        net: best_net.unwrap_or(net),
        trace,
        best_epoch,
    })
}
