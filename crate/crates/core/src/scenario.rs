//! Parametric geometric scenarios: a UAV moving around an access point at the
//! origin, with fixed point scatterers, sampled once per OTFS frame.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{PathKind, PathParams};
use crate::container::{Container, ContainerError, ContainerKind};
use crate::otfs::FrameConfig;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Hard speed limit of the generated UAV motion (m/s).
pub const SPEED_CAP: f64 = 95.0;

pub type Vec2 = [f64; 2];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("trajectory speed {speed:.2} m/s exceeds the cap of {cap} m/s")]
    SpeedCap { speed: f64, cap: f64 },
    #[error("UE range {range:.3} m at slot {slot} is below 1 m")]
    TooClose { slot: usize, range: f64 },
    #[error("slot {slot}: {kind:?} path {path} has taps (l = {l:.3}, k = {k:.3}) outside the grid; shrink the scene scale or speeds")]
    OutOfGrid {
        slot: usize,
        kind: PathKind,
        path: usize,
        l: f64,
        k: f64,
    },
    #[error("invalid scenario parameters: {0}")]
    Invalid(String),
    #[error("dataset schema version {0} is not supported")]
    Schema(u32),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Trajectory {
    /// Uniform circular motion; `angular_speed` is signed (rad/s).
    Orbit {
        center: Vec2,
        radius: f64,
        angular_speed: f64,
        phase: f64,
    },
    /// Constant-velocity pass.
    Line { start: Vec2, velocity: Vec2 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scatterers: Vec<Vec2>,
    pub trajectory: Trajectory,
    pub speed_cap: f64,
    /// Time between samples (s); one OTFS frame `N T`.
    pub slot_period: f64,
    pub n_slots: usize,
    pub seed: u64,
}

impl Scenario {
    /// The access point sits at the origin.
    pub const AP: Vec2 = [0.0, 0.0];
}

/// Knobs of the random scenario family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub n_groups: usize,
    pub n_slots: usize,
    pub train_fraction: f64,
    pub range_min: f64,
    pub range_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub n_scatterers: usize,
    pub scatterer_radius: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            n_groups: 40,
            n_slots: 64,
            train_fraction: 0.8,
            range_min: 50.0,
            range_max: 500.0,
            speed_min: 20.0,
            speed_max: 95.0,
            n_scatterers: 2,
            scatterer_radius: 400.0,
        }
    }
}

impl ScenarioParams {
    pub fn full_scale() -> Self {
        Self {
            n_groups: 640,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.n_groups < 2 {
            return bad("n_groups must be at least 2");
        }
        if self.n_slots < 2 {
            return bad("n_slots must be at least 2");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(1.0 < self.range_min && self.range_min < self.range_max) {
            return bad("need 1 < range_min < range_max");
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max <= SPEED_CAP) {
            return bad("need 0 <= speed_min <= speed_max <= 95");
        }
        if self.scatterer_radius <= 0.0 {
            return bad("scatterer_radius must be positive");
        }
        Ok(())
    }

    /// Groups assigned to the training split: the first `round(n · fraction)`.
    pub fn n_train(&self) -> usize {
        ((self.n_groups as f64) * self.train_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    pub position: Vec<Vec2>,
    pub velocity: Vec<Vec2>,
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn trajectory_speed(t: &Trajectory) -> f64 {
    match t {
        Trajectory::Orbit {
            radius, angular_speed, ..
        } => radius * angular_speed.abs(),
        Trajectory::Line { velocity, .. } => norm(*velocity),
    }
}

/// Position at time `t` seconds.
pub fn position_at(traj: &Trajectory, t: f64) -> (Vec2, Vec2) {
    match traj {
        Trajectory::Orbit {
            center,
            radius,
            angular_speed,
            phase,
        } => {
            let a = phase + angular_speed * t;
            (
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()],
                [-radius * angular_speed * a.sin(), radius * angular_speed * a.cos()],
            )
        }
        Trajectory::Line { start, velocity } => {
            ([start[0] + velocity[0] * t, start[1] + velocity[1] * t], *velocity)
        }
    }
}

pub fn generate_trajectory(scenario: &Scenario) -> Result<Kinematics, ScenarioError> {
    let speed = trajectory_speed(&scenario.trajectory);
    if speed > scenario.speed_cap + 1e-9 {
        return Err(ScenarioError::SpeedCap {
            speed,
            cap: scenario.speed_cap,
        });
    }
    let (position, velocity) = (0..scenario.n_slots)
        .map(|s| position_at(&scenario.trajectory, s as f64 * scenario.slot_period))
        .unzip();
    Ok(Kinematics { position, velocity })
}

fn free_space(lambda: f64, dist: f64) -> f64 {
    lambda / (4.0 * PI * dist)
}

fn path(gain: f64, tau: f64, nu: f64, f0: f64, kind: PathKind) -> PathParams {
    PathParams {
        h: Complex64::from_polar(gain, -2.0 * PI * f0 * tau),
        tau,
        nu,
        kind,
    }
}

/// Communication paths (LoS first, then one per scatterer) and the single
/// sensing echo for a UE at `pos` moving with `vel`.
///
/// Doppler follows `ν = f0 (dℓ/dt) / c` for a path of length `ℓ`, so a
/// closing UE has negative Doppler.
pub fn paths_from_geometry(
    pos: Vec2,
    vel: Vec2,
    scenario: &Scenario,
    config: &FrameConfig,
) -> (Vec<PathParams>, Vec<PathParams>) {
    let c = config.c;
    let f0 = config.f0;
    let lambda = c / f0;
    let range = norm(pos);
    let radial = dot(pos, vel) / range;

    let mut comm = vec![path(
        free_space(lambda, range),
        range / c,
        f0 * radial / c,
        f0,
        PathKind::Communication,
    )];
    for s in &scenario.scatterers {
        let d1 = norm(sub(*s, Scenario::AP));
        let to_ue = sub(pos, *s);
        let d2 = norm(to_ue);
        let rate = dot(to_ue, vel) / d2;
        comm.push(path(
            free_space(lambda, d1) * free_space(lambda, d2),
            (d1 + d2) / c,
            f0 * rate / c,
            f0,
            PathKind::Communication,
        ));
    }
    let sensing = vec![path(
        free_space(lambda, range).powi(2),
        2.0 * range / c,
        2.0 * f0 * radial / c,
        f0,
        PathKind::Sensing,
    )];
    (comm, sensing)
}

/// Per-slot path parameters of one trajectory group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSeries {
    pub seed: u64,
    pub slot_period: f64,
    pub comm: Vec<Vec<PathParams>>,
    pub sensing: Vec<Vec<PathParams>>,
}

impl ParamSeries {
    pub fn len(&self) -> usize {
        self.comm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comm.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|s| s as f64 * self.slot_period).collect()
    }

    pub fn num_comm_paths(&self) -> usize {
        self.comm.first().map_or(0, Vec::len)
    }

    pub fn num_sensing_paths(&self) -> usize {
        self.sensing.first().map_or(0, Vec::len)
    }

    /// Copy with attenuations divided by the RMS total path gain over the
    /// series, separately for communication and sensing, so that the mean of
    /// `Σ_p |h_p|²` per slot is 1. Free-space gains are otherwise far below
    /// any noise floor expressed relative to unit symbol power.
    pub fn gain_normalized(&self) -> ParamSeries {
        let scale = |slots: &[Vec<PathParams>]| {
            let mean = slots
                .iter()
                .map(|ps| ps.iter().map(|p| p.h.norm_sqr()).sum::<f64>())
                .sum::<f64>()
                / slots.len().max(1) as f64;
            if mean > 0.0 {
                1.0 / mean.sqrt()
            } else {
                1.0
            }
        };
        let apply = |slots: &[Vec<PathParams>], s: f64| {
            slots
                .iter()
                .map(|ps| ps.iter().map(|p| PathParams { h: p.h * s, ..*p }).collect())
                .collect()
        };
        let (sc, ss) = (scale(&self.comm), scale(&self.sensing));
        ParamSeries {
            seed: self.seed,
            slot_period: self.slot_period,
            comm: apply(&self.comm, sc),
            sensing: apply(&self.sensing, ss),
        }
    }
}

fn check_grid(slot: usize, paths: &[PathParams], config: &FrameConfig) -> Result<(), ScenarioError> {
    for (i, p) in paths.iter().enumerate() {
        let t = p.taps(config);
        if !(t.l >= 0.0 && t.l <= (config.m - 1) as f64 && t.k.abs() <= (config.n - 1) as f64) {
            return Err(ScenarioError::OutOfGrid {
                slot,
                kind: p.kind,
                path: i,
                l: t.l,
                k: t.k,
            });
        }
    }
    Ok(())
}

pub fn series_from_scenario(scenario: &Scenario, config: &FrameConfig) -> Result<ParamSeries, ScenarioError> {
    let kin = generate_trajectory(scenario)?;
    let mut comm = Vec::with_capacity(scenario.n_slots);
    let mut sensing = Vec::with_capacity(scenario.n_slots);
    for (slot, (pos, vel)) in kin.position.iter().zip(&kin.velocity).enumerate() {
        let range = norm(*pos);
        if range <= 1.0 {
            return Err(ScenarioError::TooClose { slot, range });
        }
        let (c, s) = paths_from_geometry(*pos, *vel, scenario, config);
        check_grid(slot, &c, config)?;
        check_grid(slot, &s, config)?;
        comm.push(c);
        sensing.push(s);
    }
    Ok(ParamSeries {
        seed: scenario.seed,
        slot_period: scenario.slot_period,
        comm,
        sensing,
    })
}

fn uniform_in_disc(rng: &mut ChaCha8Rng, radius: f64) -> Vec2 {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    [r * a.cos(), r * a.sin()]
}

/// Draws one scenario of the family. Orbits have an offset centre so the
/// range varies; lines keep the whole pass inside the range limits.
pub fn random_scenario(params: &ScenarioParams, config: &FrameConfig, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot_period = config.n as f64 * config.t;
    let duration = params.n_slots as f64 * slot_period;
    let speed = rng.random_range(params.speed_min..=params.speed_max);
    let (lo, hi) = (params.range_min, params.range_max);
    let margin = speed * duration;

    let trajectory = if rng.random::<bool>() {
        let radius = rng.random_range(lo + 0.25 * (hi - lo)..=hi - 0.25 * (hi - lo));
        let offset = 0.2 * (hi - lo) * rng.random::<f64>();
        let offset = offset.min(radius - lo).min(hi - radius);
        let oa = rng.random_range(0.0..2.0 * PI);
        let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
        Trajectory::Orbit {
            center: [offset * oa.cos(), offset * oa.sin()],
            radius,
            angular_speed: dir * speed / radius,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    } else {
        let r0 = rng.random_range(lo + margin..=(hi - margin).max(lo + margin));
        let a0 = rng.random_range(0.0..2.0 * PI);
        let heading = rng.random_range(0.0..2.0 * PI);
        Trajectory::Line {
            start: [r0 * a0.cos(), r0 * a0.sin()],
            velocity: [speed * heading.cos(), speed * heading.sin()],
        }
    };

    // Keep scatterers away from the AP and the UE's path.
    let first = position_at(&trajectory, 0.0).0;
    let scatterers = (0..params.n_scatterers)
        .map(|_| loop {
            let s = uniform_in_disc(&mut rng, params.scatterer_radius);
            if norm(s) > 10.0 && norm(sub(s, first)) > 10.0 + margin {
                break s;
            }
        })
        .collect();

    Scenario {
        scatterers,
        trajectory,
        speed_cap: SPEED_CAP,
        slot_period,
        n_slots: params.n_slots,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub seed: u64,
    pub train: bool,
    pub scenario: Scenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    config: FrameConfig,
    params: ScenarioParams,
    seed: u64,
    n_comm_paths: usize,
    n_sensing_paths: usize,
    groups: Vec<GroupInfo>,
}

/// Train/test collection of parameter series with the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: FrameConfig,
    pub params: ScenarioParams,
    pub seed: u64,
    pub groups: Vec<GroupInfo>,
    pub series: Vec<ParamSeries>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &ParamSeries> {
        self.groups.iter().zip(&self.series).filter(|(g, _)| g.train).map(|(_, s)| s)
    }

    pub fn test(&self) -> impl Iterator<Item = &ParamSeries> {
        self.groups.iter().zip(&self.series).filter(|(g, _)| !g.train).map(|(_, s)| s)
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let train = self.groups.iter().filter(|g| g.train).count();
        (train, self.groups.len() - train)
    }

    pub fn to_container(&self) -> Result<Container, ScenarioError> {
        let first = self.series.first();
        let header = DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
            seed: self.seed,
            n_comm_paths: first.map_or(0, ParamSeries::num_comm_paths),
            n_sensing_paths: first.map_or(0, ParamSeries::num_sensing_paths),
            groups: self.groups.clone(),
        };
        let mut body = Vec::new();
        for s in &self.series {
            for (c, se) in s.comm.iter().zip(&s.sensing) {
                for p in c.iter().chain(se) {
                    body.extend_from_slice(&[p.h.re, p.h.im, p.tau, p.nu]);
                }
            }
        }
        Ok(Container::new(ContainerKind::Dataset, &header, body)?)
    }

    pub fn from_container(c: &Container) -> Result<Self, ScenarioError> {
        let h: DatasetHeader = c.header_as()?;
        if h.schema_version != DATASET_SCHEMA_VERSION {
            return Err(ScenarioError::Schema(h.schema_version));
        }
        let per_slot = 4 * (h.n_comm_paths + h.n_sensing_paths);
        let expected: usize = h.groups.iter().map(|g| g.scenario.n_slots * per_slot).sum();
        if expected != c.body.len() {
            return Err(ContainerError::BodyLength {
                expected,
                got: c.body.len(),
            }
            .into());
        }
        let mut values = c.body.chunks_exact(4);
        let mut next = |kind| {
            let v = values.next().expect("length checked");
            PathParams {
                h: Complex64::new(v[0], v[1]),
                tau: v[2],
                nu: v[3],
                kind,
            }
        };
        let series = h
            .groups
            .iter()
            .map(|g| {
                let mut comm = Vec::with_capacity(g.scenario.n_slots);
                let mut sensing = Vec::with_capacity(g.scenario.n_slots);
                for _ in 0..g.scenario.n_slots {
                    comm.push((0..h.n_comm_paths).map(|_| next(PathKind::Communication)).collect());
                    sensing.push((0..h.n_sensing_paths).map(|_| next(PathKind::Sensing)).collect());
                }
                ParamSeries {
                    seed: g.seed,
                    slot_period: g.scenario.slot_period,
                    comm,
                    sensing,
                }
            })
            .collect();
        Ok(Self {
            config: h.config,
            params: h.params,
            seed: h.seed,
            groups: h.groups,
            series,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        Ok(self.to_container()?.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_container(&Container::read(path, ContainerKind::Dataset)?)
    }
}

/// Per-group seed derived from the dataset seed.
pub fn group_seed(seed: u64, group: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(group as u64 + 1)
}

/// Generates `n_groups` trajectory groups; the first `n_train` go to the
/// training split.
pub fn build_dataset(params: &ScenarioParams, config: &FrameConfig, seed: u64) -> Result<Dataset, ScenarioError> {
    params.validate()?;
    config
        .validate()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let n_train = params.n_train();
    let mut groups = Vec::with_capacity(params.n_groups);
    let mut series = Vec::with_capacity(params.n_groups);
    for g in 0..params.n_groups {
        let gs = group_seed(seed, g);
        let scenario = random_scenario(params, config, gs);
        series.push(series_from_scenario(&scenario, config)?);
        groups.push(GroupInfo {
            seed: gs,
            train: g < n_train,
            scenario,
        });
    }
    Ok(Dataset {
        config: config.clone(),
        params: params.clone(),
        seed,
        groups,
        series,
    })
}
