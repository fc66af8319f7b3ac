//! Experiment configuration and runners behind the command-line verbs.
//!
//! Every runner has an in-memory form used by the tests and a `run_*` form
//! that reads and writes artifacts in an output directory.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::PathParams;
use crate::comm::{complexity_reduction, receiver_complexity, ReceiverScheme};
use crate::crlb::SensingRefs;
use crate::error::{Error, Result};
use crate::otfs::FrameConfig;
use crate::predictor::{
    evaluate_mape, extract_series, mape, train_predictor, windows_from_series, ForecastConfig, Forecaster, LinearAr,
    Persistence, PredictorBundle, PredictorTrainConfig, SeriesParam, TrainedPredictor,
};
use crate::preeq::{
    evaluate_each, train_preeq, Instance, LossWeights, PreEqNet, PreEqNetConfig, PreeqError, PreeqTrainConfig,
    TrainedPreEq,
};
use crate::scenario::{build_dataset, Dataset, ParamSeries, ScenarioParams};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const TRAIN_DATASET_FILE: &str = "train.bin";
pub const TEST_DATASET_FILE: &str = "test.bin";
pub const PREDICTOR_FILE: &str = "predictor.bin";
pub const PREEQ_FILE: &str = "preeq.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSettings {
    pub lookback: usize,
    pub width: usize,
    pub trunk_layers: usize,
    pub stacks: usize,
    pub blocks_per_stack: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        let f = ForecastConfig::default();
        let t = PredictorTrainConfig::default();
        Self {
            lookback: f.lookback,
            width: f.width,
            trunk_layers: f.trunk_layers,
            stacks: f.stacks,
            blocks_per_stack: f.blocks_per_stack,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            validation_fraction: t.validation_fraction,
        }
    }
}

impl PredictorSettings {
    pub fn model(&self) -> ForecastConfig {
        ForecastConfig {
            lookback: self.lookback,
            width: self.width,
            trunk_layers: self.trunk_layers,
            stacks: self.stacks,
            blocks_per_stack: self.blocks_per_stack,
        }
    }

    pub fn training(&self, seed: u64) -> PredictorTrainConfig {
        PredictorTrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }
}

/// Source of the parameters fed to the pre-equalizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    /// True parameters of the current slot.
    Perfect,
    /// Forecast from the previous `lookback` slots.
    Predicted,
    /// Parameters of the previous slot.
    Outdated,
}

impl CsiMode {
    pub const ALL: [CsiMode; 3] = [CsiMode::Perfect, CsiMode::Predicted, CsiMode::Outdated];

    pub fn name(self) -> &'static str {
        match self {
            CsiMode::Perfect => "perfect",
            CsiMode::Predicted => "predicted",
            CsiMode::Outdated => "outdated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreeqSettings {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub rho_c: f64,
    pub rho_grid: Vec<f64>,
    pub rho_l: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub snr_tx_db: f64,
    pub csi: CsiMode,
    pub range_ref_m: f64,
    pub velocity_ref_mps: f64,
}

impl Default for PreeqSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128, 256, 512],
            dropout: 0.1,
            rho_c: 0.5,
            rho_grid: vec![1.0, 0.75, 0.5, 0.25, 0.05],
            rho_l: 1e-6,
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            init_scale: 1e-3,
            n_train: 200,
            n_test: 50,
            snr_tx_db: 0.0,
            csi: CsiMode::Predicted,
            range_ref_m: 1.0,
            velocity_ref_mps: 1.0,
        }
    }
}

impl PreeqSettings {
    pub fn refs(&self) -> SensingRefs {
        SensingRefs {
            range_m: self.range_ref_m,
            velocity_mps: self.velocity_ref_mps,
        }
    }

    pub fn training(&self, rho_c: f64, seed: u64) -> PreeqTrainConfig {
        PreeqTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weights: LossWeights {
                rho_c,
                rho_l: self.rho_l,
            },
            init_scale: self.init_scale,
            sensing_refs: self.refs(),
            keep_best: false,
            seed,
        }
    }

    pub fn network(&self, mn: usize, sensing_paths: usize) -> PreEqNetConfig {
        PreEqNetConfig {
            mn,
            sensing_paths,
            hidden: self.hidden.clone(),
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub snr_db: Vec<f64>,
    pub rho_c: f64,
    /// Train a network per SNR point; otherwise one per CSI mode at
    /// `preeq.snr_tx_db`, evaluated at every point.
    pub retrain_per_point: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            rho_c: 1.0,
            retrain_per_point: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexitySettings {
    /// `[M, N]` pairs.
    pub grids: Vec<[usize; 2]>,
    pub orders: Vec<u32>,
}

impl Default for ComplexitySettings {
    fn default() -> Self {
        Self {
            grids: vec![[2, 2], [4, 4], [8, 8], [16, 16], [32, 32]],
            orders: vec![2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub frame: FrameConfig,
    pub scenario: ScenarioParams,
    pub predictor: PredictorSettings,
    pub preeq: PreeqSettings,
    pub sweep: SweepSettings,
    pub complexity: ComplexitySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 1,
            frame: FrameConfig::desk(),
            scenario: ScenarioParams::default(),
            predictor: PredictorSettings::default(),
            preeq: PreeqSettings::default(),
            sweep: SweepSettings::default(),
            complexity: ComplexitySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.frame.validate()?;
        self.scenario.validate()?;
        self.predictor.model().validate()?;
        let p = &self.preeq;
        let rhos = p.rho_grid.iter().chain([&p.rho_c, &self.sweep.rho_c]);
        for rho in rhos {
            LossWeights { rho_c: *rho, rho_l: p.rho_l }.validate()?;
        }
        if p.n_train == 0 || p.n_test == 0 || p.batch_size == 0 || p.hidden.is_empty() {
            return Err(Error::Config("preeq sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&p.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", p.dropout)));
        }
        if !(p.range_ref_m > 0.0 && p.velocity_ref_mps > 0.0) {
            return Err(Error::Config("sensing references must be positive".into()));
        }
        Ok(())
    }

    /// Frame with both noise powers set for `snr_db`.
    pub fn frame_at(&self, snr_db: f64) -> FrameConfig {
        self.frame.clone().with_snr_tx_db(snr_db)
    }
}

fn seed_for(base: u64, tag: u64) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(tag)
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(build_dataset(&cfg.scenario, &cfg.frame, cfg.seed)?)
}

/// One model per parameter type, trained on the training split.
pub fn train_predictors(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(PredictorBundle, Vec<(SeriesParam, TrainedPredictor)>)> {
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for (i, param) in SeriesParam::ALL.iter().enumerate() {
        let series = extract_series(dataset.train(), *param);
        let trained = train_predictor(
            &cfg.predictor.model(),
            &series,
            &cfg.predictor.training(seed_for(cfg.seed, 100 + i as u64)),
        )?;
        models.push((*param, trained.model.clone()));
        reports.push((*param, trained));
    }
    Ok((PredictorBundle { models }, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapeRow {
    pub parameter: SeriesParam,
    pub model: String,
    pub mape: f64,
    pub samples: usize,
    pub excluded: usize,
}

/// MAPE of each forecaster on the test split.
pub fn mape_table(cfg: &ExperimentConfig, dataset: &Dataset, bundle: &PredictorBundle) -> Result<Vec<MapeRow>> {
    let lookback = bundle.lookback();
    let mut rows = Vec::new();
    for param in SeriesParam::ALL {
        let test = extract_series(dataset.test(), param);
        let train = extract_series(dataset.train(), param);
        let samples = train
            .iter()
            .map(|s| windows_from_series(s, lookback))
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let ar = LinearAr::fit(&samples, 1e-9)?;
        let model = bundle
            .model(param)
            .ok_or_else(|| Error::Config(format!("predictor bundle has no {} model", param.name())))?;
        let persistence = Persistence { lookback };
        let forecasters: [(&str, &dyn Forecaster); 3] =
            [("nbeats", model), ("persistence", &persistence), ("linear-ar", &ar)];
        for (name, f) in forecasters {
            let r = evaluate_mape(f, &test)?;
            rows.push(MapeRow {
                parameter: param,
                model: name.into(),
                mape: r.mape,
                samples: r.samples,
                excluded: r.excluded,
            });
        }
        // Sanity row: forecasts equal to the truth.
        let truth: Vec<f64> = test.iter().flat_map(|s| s[lookback..].iter().copied()).collect();
        let r = mape(&truth, &truth);
        rows.push(MapeRow {
            parameter: param,
            model: "oracle".into(),
            mape: r.mape,
            samples: r.samples,
            excluded: r.excluded,
        });
    }
    let _ = cfg;
    Ok(rows)
}

/// Estimated parameters of one group for slots `lookback..len`.
struct GroupCsi {
    truth: ParamSeries,
    comm: Vec<Vec<PathParams>>,
    sensing: Vec<Vec<PathParams>>,
}

fn group_csi(series: &ParamSeries, mode: CsiMode, lookback: usize, bundle: Option<&PredictorBundle>) -> Result<GroupCsi> {
    let truth = series.gain_normalized();
    let n = truth.len();
    let (comm, sensing) = match mode {
        CsiMode::Perfect => (truth.comm[lookback..].to_vec(), truth.sensing[lookback..].to_vec()),
        CsiMode::Outdated => (truth.comm[lookback - 1..n - 1].to_vec(), truth.sensing[lookback - 1..n - 1].to_vec()),
        CsiMode::Predicted => {
            let b = bundle.ok_or_else(|| Error::Config("predicted CSI needs a trained predictor".into()))?;
            if b.lookback() != lookback {
                return Err(Error::Config(format!(
                    "predictor lookback {} differs from configured {lookback}",
                    b.lookback()
                )));
            }
            (b.forecast_slots(&truth.comm)?, b.forecast_slots(&truth.sensing)?)
        }
    };
    Ok(GroupCsi { truth, comm, sensing })
}

/// Samples `count` (group, slot) pairs of one split and builds instances
/// whose inputs come from `mode` and whose loss uses the true channel. The
/// sampled slots depend only on `seed`, not on `mode`.
#[allow(clippy::too_many_arguments)]
pub fn build_instances(
    frame: &FrameConfig,
    dataset: &Dataset,
    bundle: Option<&PredictorBundle>,
    mode: CsiMode,
    train: bool,
    count: usize,
    lookback: usize,
    seed: u64,
    refs: &SensingRefs,
) -> Result<Vec<Instance>> {
    let d = &dataset.config;
    if (d.m, d.n, d.cp_len) != (frame.m, frame.n, frame.cp_len) || d.delta_f != frame.delta_f || d.f0 != frame.f0 {
        return Err(Error::Config("frame geometry differs from the dataset's".into()));
    }
    let groups: Vec<&ParamSeries> = dataset
        .groups
        .iter()
        .zip(&dataset.series)
        .filter(|(g, _)| g.train == train)
        .map(|(_, s)| s)
        .collect();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (gi, s) in groups.iter().enumerate() {
        for t in lookback..s.len() {
            candidates.push((gi, t - lookback));
        }
    }
    if lookback == 0 || candidates.is_empty() {
        return Err(Error::Config("series too short for the configured lookback".into()));
    }
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut cache: HashMap<usize, GroupCsi> = HashMap::new();
    let mut out = Vec::with_capacity(count);
    for (gi, idx) in candidates {
        if out.len() == count {
            break;
        }
        let g = match cache.entry(gi) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(group_csi(groups[gi], mode, lookback, bundle)?),
        };
        let t = lookback + idx;
        match Instance::new(&g.comm[idx], &g.sensing[idx], &g.truth.comm[t], &g.truth.sensing[t], frame, refs) {
            Ok(inst) => out.push(inst),
            // True sensing taps on a derivative discontinuity carry no bound; skip the slot.
            Err(PreeqError::Channel(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no usable instances".into()));
    }
    Ok(out)
}

/// Training and test instances for one CSI mode at one SNR.
pub fn instance_sets(
    cfg: &ExperimentConfig,
    frame: &FrameConfig,
    dataset: &Dataset,
    bundle: Option<&PredictorBundle>,
    mode: CsiMode,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let p = &cfg.preeq;
    let lb = cfg.predictor.lookback;
    let refs = p.refs();
    let train = build_instances(frame, dataset, bundle, mode, true, p.n_train, lb, seed_for(cfg.seed, 200), &refs)?;
    let test = build_instances(frame, dataset, bundle, mode, false, p.n_test, lb, seed_for(cfg.seed, 201), &refs)?;
    Ok((train, test))
}

pub fn train_network(
    cfg: &ExperimentConfig,
    frame: &FrameConfig,
    train: &[Instance],
    test: &[Instance],
    rho_c: f64,
) -> Result<TrainedPreEq> {
    let sensing_paths = train[0].sensing_true.len();
    let net_seed = seed_for(cfg.seed, 300);
    let net = PreEqNet::init(cfg.preeq.network(frame.mn(), sensing_paths), cfg.preeq.init_scale, net_seed);
    Ok(train_preeq(net, train, test, frame, &cfg.preeq.training(rho_c, seed_for(cfg.seed, 301)))?)
}

/// Mean and standard error.
fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub mse: f64,
    pub mse_stderr: f64,
    pub sensing: f64,
    /// Square root of the mean velocity CRLB, m/s.
    pub sqrt_crlb_velocity: f64,
}

pub fn evaluate_network(
    cfg: &ExperimentConfig,
    frame: &FrameConfig,
    net: &PreEqNet,
    test: &[Instance],
) -> Result<OperatingPoint> {
    let evals = evaluate_each(net, test, frame, &cfg.preeq.refs())?;
    let mses: Vec<f64> = evals.iter().map(|e| e.mse).collect();
    let (mse, mse_stderr) = mean_stderr(&mses);
    let n = evals.len() as f64;
    Ok(OperatingPoint {
        mse,
        mse_stderr,
        sensing: evals.iter().map(|e| e.sensing).sum::<f64>() / n,
        sqrt_crlb_velocity: (evals.iter().map(|e| e.crlb_velocity).sum::<f64>() / n).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerRow {
    pub snr_db: f64,
    pub scheme: String,
    pub mse: f64,
    pub mse_stderr: f64,
}

/// MSE against transmit SNR for the MMSE receiver and the pre-equalizer with
/// each CSI mode.
pub fn power_sweep(cfg: &ExperimentConfig, dataset: &Dataset, bundle: Option<&PredictorBundle>) -> Result<Vec<PowerRow>> {
    let mut fixed: HashMap<CsiMode, PreEqNet> = HashMap::new();
    if !cfg.sweep.retrain_per_point {
        let frame = cfg.frame_at(cfg.preeq.snr_tx_db);
        for mode in CsiMode::ALL {
            let (train, test) = instance_sets(cfg, &frame, dataset, bundle, mode)?;
            fixed.insert(mode, train_network(cfg, &frame, &train, &test, cfg.sweep.rho_c)?.net);
        }
    }
    let mut rows = Vec::new();
    for &snr in &cfg.sweep.snr_db {
        let frame = cfg.frame_at(snr);
        for mode in CsiMode::ALL {
            let (train, test) = instance_sets(cfg, &frame, dataset, bundle, mode)?;
            if mode == CsiMode::Perfect {
                let (mse, mse_stderr) = mean_stderr(&test.iter().map(|i| i.mmse).collect::<Vec<_>>());
                rows.push(PowerRow {
                    snr_db: snr,
                    scheme: "mmse-perfect-csi".into(),
                    mse,
                    mse_stderr,
                });
            }
            let net = match fixed.get(&mode) {
                Some(n) => n.clone(),
                None => train_network(cfg, &frame, &train, &test, cfg.sweep.rho_c)?.net,
            };
            let op = evaluate_network(cfg, &frame, &net, &test)?;
            rows.push(PowerRow {
                snr_db: snr,
                scheme: format!("preeq-{}-csi", mode.name()),
                mse: op.mse,
                mse_stderr: op.mse_stderr,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub csi: CsiMode,
    pub rho_c: f64,
    pub mse: f64,
    pub sqrt_crlb_velocity: f64,
    pub sensing: f64,
    pub zf_mse: f64,
    pub zf_sensing: f64,
}

/// One trained network per CSI mode and loss weight, at `preeq.snr_tx_db`.
pub fn tradeoff(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    bundle: Option<&PredictorBundle>,
    modes: &[CsiMode],
) -> Result<Vec<TradeoffRow>> {
    let frame = cfg.frame_at(cfg.preeq.snr_tx_db);
    let mut rows = Vec::new();
    for &mode in modes {
        let (train, test) = instance_sets(cfg, &frame, dataset, bundle, mode)?;
        let n = test.len() as f64;
        let zf_mse = test.iter().map(|i| i.refs.mse).sum::<f64>() / n;
        let zf_sensing = test.iter().map(|i| i.refs.sensing).sum::<f64>() / n;
        for &rho in &cfg.preeq.rho_grid {
            let trained = train_network(cfg, &frame, &train, &test, rho)?;
            let op = evaluate_network(cfg, &frame, &trained.net, &test)?;
            rows.push(TradeoffRow {
                csi: mode,
                rho_c: rho,
                mse: op.mse,
                sqrt_crlb_velocity: op.sqrt_crlb_velocity,
                sensing: op.sensing,
                zf_mse,
                zf_sensing,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub m: usize,
    pub n: usize,
    pub order: u32,
    pub conventional: u128,
    pub preeq: u128,
    pub reduction_pct: f64,
}

pub fn complexity_table(cfg: &ExperimentConfig) -> Vec<ComplexityRow> {
    let mut rows = Vec::new();
    for &[m, n] in &cfg.complexity.grids {
        for &o in &cfg.complexity.orders {
            rows.push(ComplexityRow {
                m,
                n,
                order: o,
                conventional: receiver_complexity(m, n, o, ReceiverScheme::Conventional),
                preeq: receiver_complexity(m, n, o, ReceiverScheme::Preeq),
                reduction_pct: complexity_reduction(m, n, o),
            });
        }
    }
    rows
}

// Artifact I/O.

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Comma-separated text with a one-line header.
pub fn to_csv<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.as_ref().join(","));
        s.push('\n');
    }
    s
}

fn cells(values: &[&dyn Display]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Creates `out` and records the configuration and library version used by `command`.
pub fn write_snapshot(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join(format!("{command}.config.toml")), &cfg.to_toml())?;
    write_file(&out.join("version.txt"), &format!("otfs-isac {VERSION}\n"))
}

fn require(path: PathBuf, what: &'static str, command: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        let dir = path.parent().map(|p| p.display().to_string()).unwrap_or_default();
        Err(Error::MissingArtifact {
            what,
            path,
            hint: format!("run `otfs-isac {command} --out {dir}` first"),
        })
    }
}

fn split_dataset(d: &Dataset, train: bool) -> Dataset {
    let (groups, series) = d
        .groups
        .iter()
        .zip(&d.series)
        .filter(|(g, _)| g.train == train)
        .map(|(g, s)| (g.clone(), s.clone()))
        .unzip();
    Dataset {
        config: d.config.clone(),
        params: d.params.clone(),
        seed: d.seed,
        groups,
        series,
    }
}

pub fn run_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    write_snapshot(cfg, out, "generate-data")?;
    let d = generate_data(cfg)?;
    split_dataset(&d, true).save(&out.join(TRAIN_DATASET_FILE))?;
    split_dataset(&d, false).save(&out.join(TEST_DATASET_FILE))?;
    Ok(d)
}

pub fn load_dataset(out: &Path) -> Result<Dataset> {
    let train = Dataset::load(&require(out.join(TRAIN_DATASET_FILE), "training dataset", "generate-data")?)?;
    let test = Dataset::load(&require(out.join(TEST_DATASET_FILE), "test dataset", "generate-data")?)?;
    let mut d = train;
    d.groups.extend(test.groups);
    d.series.extend(test.series);
    Ok(d)
}

pub fn load_predictor(out: &Path) -> Result<PredictorBundle> {
    Ok(PredictorBundle::load(&require(
        out.join(PREDICTOR_FILE),
        "predictor weights",
        "train-predictor",
    )?)?)
}

fn bundle_for(cfg: &ExperimentConfig, out: &Path, modes: &[CsiMode]) -> Result<Option<PredictorBundle>> {
    let _ = cfg;
    if modes.contains(&CsiMode::Predicted) {
        Ok(Some(load_predictor(out)?))
    } else {
        Ok(None)
    }
}

pub fn run_train_predictor(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(SeriesParam, TrainedPredictor)>> {
    let dataset = load_dataset(out)?;
    write_snapshot(cfg, out, "train-predictor")?;
    let (bundle, reports) = train_predictors(cfg, &dataset)?;
    bundle.save(&out.join(PREDICTOR_FILE))?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|(p, r)| {
            r.curve.iter().map(move |e| {
                cells(&[&p.name(), &e.epoch, &e.train_loss, &e.val_loss, &e.best_val_loss])
            })
        })
        .collect();
    write_file(
        &out.join("predictor_curve.csv"),
        &to_csv(&["parameter", "epoch", "train_loss", "val_loss", "best_val_loss"], &rows),
    )?;
    Ok(reports)
}

pub fn run_eval_predictor(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MapeRow>> {
    let dataset = load_dataset(out)?;
    let bundle = load_predictor(out)?;
    write_snapshot(cfg, out, "eval-predictor")?;
    let rows = mape_table(cfg, &dataset, &bundle)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cells(&[&r.parameter.name(), &r.model, &r.mape, &r.samples, &r.excluded]))
        .collect();
    write_file(
        &out.join("mape.csv"),
        &to_csv(&["parameter", "model", "mape_pct", "samples", "excluded"], &csv),
    )?;
    Ok(rows)
}

pub fn run_train_preeq(cfg: &ExperimentConfig, out: &Path) -> Result<TrainedPreEq> {
    let dataset = load_dataset(out)?;
    let bundle = bundle_for(cfg, out, &[cfg.preeq.csi])?;
    write_snapshot(cfg, out, "train-preeq")?;
    let frame = cfg.frame_at(cfg.preeq.snr_tx_db);
    let (train, test) = instance_sets(cfg, &frame, &dataset, bundle.as_ref(), cfg.preeq.csi)?;
    let trained = train_network(cfg, &frame, &train, &test, cfg.preeq.rho_c)?;
    trained.net.save(&out.join(PREEQ_FILE))?;
    let mmse = test.iter().map(|i| i.mmse).sum::<f64>() / test.len() as f64;
    let mut rows: Vec<Vec<String>> = trained
        .trace
        .iter()
        .map(|e| {
            cells(&[
                &e.epoch,
                &e.val_mse,
                &e.val_velocity_rmse,
                &e.val_sensing,
                &e.train_loss,
                &e.val_loss,
                &mmse,
            ])
        })
        .collect();
    let fin = evaluate_network(cfg, &frame, &trained.net, &test)?;
    rows.push(cells(&[&"final", &fin.mse, &fin.sqrt_crlb_velocity, &fin.sensing, &"", &"", &mmse]));
    write_file(
        &out.join("convergence.csv"),
        &to_csv(
            &["epoch", "mse", "sqrt_crlb_v_mps", "sensing_objective", "train_loss", "val_loss", "mmse_mse"],
            &rows,
        ),
    )?;
    Ok(trained)
}

pub fn run_sweep_power(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PowerRow>> {
    let dataset = load_dataset(out)?;
    let bundle = bundle_for(cfg, out, &CsiMode::ALL)?;
    write_snapshot(cfg, out, "sweep-power")?;
    let rows = power_sweep(cfg, &dataset, bundle.as_ref())?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cells(&[&r.snr_db, &r.scheme, &r.mse, &r.mse_stderr]))
        .collect();
    write_file(&out.join("power.csv"), &to_csv(&["snr_db", "scheme", "mse", "mse_stderr"], &csv))?;
    Ok(rows)
}

pub fn run_tradeoff(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TradeoffRow>> {
    let dataset = load_dataset(out)?;
    let bundle = bundle_for(cfg, out, &CsiMode::ALL)?;
    write_snapshot(cfg, out, "tradeoff")?;
    let rows = tradeoff(cfg, &dataset, bundle.as_ref(), &CsiMode::ALL)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            cells(&[
                &r.csi.name(),
                &r.rho_c,
                &r.mse,
                &r.sqrt_crlb_velocity,
                &r.sensing,
                &r.zf_mse,
                &r.zf_sensing,
            ])
        })
        .collect();
    write_file(
        &out.join("tradeoff.csv"),
        &to_csv(
            &["csi", "rho_c", "mse", "sqrt_crlb_v_mps", "sensing_objective", "zf_mse", "zf_sensing_objective"],
            &csv,
        ),
    )?;
    Ok(rows)
}

pub fn run_complexity(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ComplexityRow>> {
    write_snapshot(cfg, out, "complexity")?;
    let rows = complexity_table(cfg);
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cells(&[&r.m, &r.n, &(r.m * r.n), &r.order, &r.conventional, &r.preeq, &r.reduction_pct]))
        .collect();
    write_file(
        &out.join("complexity.csv"),
        &to_csv(&["m", "n", "mn", "order", "conventional", "preeq", "reduction_pct"], &csv),
    )?;
    Ok(rows)
}
