//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use otfs_isac::channel::{
    channel_derivative, oracle_cp_transmission, path_derivatives, path_matrix, td_channel, Domain, Param, PathKind,
    PathParams, PathTaps,
};
use otfs_isac::comm::{
    expected_mse, monte_carlo_link, receiver_complexity, zf_preeq, ReceiverScheme,
};
use otfs_isac::crlb::{crlb, fim, fim_from_derivatives, SensingRefs};
use otfs_isac::experiment::{
    generate_data, instance_sets, mape_table, power_sweep, tradeoff, train_network, train_predictors, CsiMode,
    ExperimentConfig,
};
use otfs_isac::linalg::{fro_sq, CMatrix};
use otfs_isac::otfs::{FrameConfig, Modulation};
use otfs_isac::predictor::{PredictorBundle, SeriesParam};
use otfs_isac::preeq::{
    check_loss_gradient, normalize_power, Instance, LossWeights, PreEqNet, PreEqNetConfig,
};
use otfs_isac::scenario::Dataset;

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut outcome = f();
        let elapsed = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&outcome, budget) {
            if elapsed > limit {
                outcome = Err(format!("{detail}; runtime {elapsed:.1?} exceeds {limit:?}"));
            }
        }
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            self.failures += 1;
        }
        println!("[{tag}] {id:>2} {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cnormal(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * std::f64::consts::FRAC_1_SQRT_2
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
    CMatrix::from_fn(n, n, |_, _| cnormal(rng))
}

/// Fractional sensing tap away from the grid edges and the half-integer split points.
fn fractional_path(rng: &mut ChaCha8Rng, c: &FrameConfig) -> PathParams {
    let lmax = c.m as f64 - 1.0;
    let kmax = c.n as f64 - 1.0;
    let mut l: f64 = rng.random_range(0.05..lmax - 0.05);
    if (l - l.floor() - 0.5).abs() < 0.02 {
        l += 0.1;
    }
    let k = rng.random_range(-(kmax - 0.05)..kmax - 0.05);
    PathParams::from_taps(PathTaps { h: cnormal(rng), l, k }, PathKind::Sensing, c)
}

/// Desk-scale instance with a short communication path and a sensing path.
fn desk_instance(rng: &mut ChaCha8Rng, c: &FrameConfig) -> Instance {
    let lc = rng.random_range(0.02..0.15);
    let kc = rng.random_range(-0.25..0.25);
    let h = |rng: &mut ChaCha8Rng| Complex64::from_polar(rng.random_range(0.7..1.3), rng.random_range(0.0..std::f64::consts::TAU));
    let comm = [PathParams::from_taps(PathTaps { h: h(rng), l: lc, k: kc }, PathKind::Communication, c)];
    let sens = [PathParams::from_taps(
        PathTaps { h: h(rng), l: 2.0 * lc + 0.005, k: 2.0 * kc },
        PathKind::Sensing,
        c,
    )];
    Instance::new(&comm, &sens, &comm, &sens, c, &SensingRefs::default()).expect("instance")
}

fn c1_oracle() -> Outcome {
    let c = FrameConfig::with_grid(8, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mn = c.mn();
    let kmax = c.n as i64 - 1;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for l in 0..=c.cp_len {
        for k in -kmax..=kmax {
            let taps = PathTaps { h: cnormal(&mut rng), l: l as f64, k: k as f64 };
            let path = PathParams::from_taps(taps, PathKind::Communication, &c);
            let h = td_channel(&[path], &c).map_err(|e| e.to_string())?.entries;
            for _ in 0..20 {
                let d: Vec<Complex64> = (0..mn).map(|_| cnormal(&mut rng)).collect();
                let want = oracle_cp_transmission(&d, &path, &c).map_err(|e| e.to_string())?;
                let got = &h * DVector::from_column_slice(&d);
                for (a, b) in got.iter().zip(&want) {
                    worst = worst.max((a - b).norm());
                }
            }
            cases += 1;
        }
    }
    ensure(worst < 1e-9, format!("{cases} tap pairs x 20 vectors, max |diff| {worst:.2e} (limit 1e-9)"))
}

fn c2_derivatives() -> Outcome {
    let c = FrameConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let path = fractional_path(&mut rng, &c);
        for wrt in Param::ORDER {
            let analytic = channel_derivative(&path, wrt, &c).map_err(|e| e.to_string())?;
            let step = match wrt {
                Param::ReH | Param::ImH => 1e-6,
                Param::Nu => 1e-6 / (c.n as f64 * c.t),
                Param::Tau => 1e-6 / (c.m as f64 * c.delta_f),
            };
            let shifted = |delta: f64| {
                let mut p = path;
                match wrt {
                    Param::ReH => p.h.re += delta,
                    Param::ImH => p.h.im += delta,
                    Param::Nu => p.nu += delta,
                    Param::Tau => p.tau += delta,
                }
                path_matrix(&p, &c, Domain::Dd)
            };
            let plus = shifted(step).map_err(|e| e.to_string())?;
            let minus = shifted(-step).map_err(|e| e.to_string())?;
            let numeric = (plus - minus) / Complex64::new(2.0 * step, 0.0);
            let rel = fro_sq(&(&analytic - &numeric)).sqrt() / fro_sq(&analytic).sqrt();
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-4, format!("20 draws x 4 parameters, max relative error {worst:.2e} (limit 1e-4)"))
}

fn c3_fim_monte_carlo() -> Outcome {
    let c = FrameConfig::desk();
    let mn = c.mn();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let path = fractional_path(&mut rng, &c);
        let p = random_matrix(&mut rng, mn) * Complex64::new(0.5, 0.0);
        let derivs = path_derivatives(&path, &c).map_err(|e| e.to_string())?;
        let exact = fim_from_derivatives(std::slice::from_ref(&derivs), &p, &c).entries;
        let dp: Vec<CMatrix> = Param::ORDER.iter().map(|q| derivs.get(*q) * &p).collect();
        let draws = 10_000;
        let mut acc = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..draws {
            let s = DVector::from_fn(mn, |_, _| {
                let re = if rng.random::<bool>() { a } else { -a };
                let im = if rng.random::<bool>() { a } else { -a };
                Complex64::new(re, im) * c.sigma2_s.sqrt()
            });
            let v: Vec<_> = dp.iter().map(|m| m * &s).collect();
            for i in 0..4 {
                for j in 0..4 {
                    acc[(i, j)] += 2.0 / c.sigma2_a * v[i].dotc(&v[j]).re;
                }
            }
        }
        acc /= draws as f64;
        // Entries are compared relative to sqrt(F_ii F_jj) so that parameters
        // with different physical units are weighed alike.
        for i in 0..4 {
            for j in 0..4 {
                let scale = (exact[(i, i)] * exact[(j, j)]).sqrt();
                worst = worst.max((acc[(i, j)] - exact[(i, j)]).abs() / scale);
            }
        }
    }
    ensure(worst < 0.02, format!("5 instances, 1e4 draws, max relative deviation {:.3}% (limit 2%)", 100.0 * worst))
}

fn c4_mse_closed_form() -> Outcome {
    let c = FrameConfig::desk().with_snr_tx_db(10.0);
    let mn = c.mn();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let path = fractional_path(&mut rng, &c);
        let h = path_matrix(&path, &c, Domain::Dd).map_err(|e| e.to_string())?;
        let p = normalize_matrix(random_matrix(&mut rng, mn), c.p_max);
        let closed = expected_mse(&h, &p, &c).map_err(|e| e.to_string())?;
        let r = monte_carlo_link(&h, &p, &c, Modulation::Qpsk, 100_000, &mut rng).map_err(|e| e.to_string())?;
        worst = worst.max((r.mse_mc - closed).abs() / r.mse_stderr);
    }
    ensure(worst < 3.0, format!("5 instances, 1e5 frames, max deviation {worst:.2} standard errors (limit 3)"))
}

fn normalize_matrix(p: CMatrix, p_max: f64) -> CMatrix {
    let s = (p_max / fro_sq(&p)).sqrt();
    p * Complex64::new(s, 0.0)
}

fn c5_power_scaling() -> Outcome {
    let c = FrameConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let paths = [fractional_path(&mut rng, &c), fractional_path(&mut rng, &c)];
        let p = random_matrix(&mut rng, c.mn());
        let base = crlb(&fim(&paths, &p, &c).map_err(|e| e.to_string())?, 0.0, &c).map_err(|e| e.to_string())?;
        for alpha in [0.3, 2.0, 7.5] {
            let scaled_p = &p * Complex64::new(alpha, 0.0);
            let f = fim(&paths, &scaled_p, &c).map_err(|e| e.to_string())?;
            let b = crlb(&f, 0.0, &c).map_err(|e| e.to_string())?;
            for i in 0..base.entries.nrows() {
                let ratio = b.entries[(i, i)] / base.entries[(i, i)];
                worst = worst.max((ratio * alpha * alpha - 1.0).abs());
            }
        }
    }
    ensure(worst < 1e-8, format!("2-path FIMs, alpha in {{0.3, 2, 7.5}}, max relative error {worst:.2e} (limit 1e-8)"))
}

fn c6_residual_at_zero() -> Outcome {
    let c = FrameConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = desk_instance(&mut rng, &c);
    let net = PreEqNet::zeros(PreEqNetConfig::new(c.mn(), 1));
    let raw = net.forward(&inst.inputs, true, &mut rng).map_err(|e| e.to_string())?;
    let p = normalize_power(&raw, c.p_max).map_err(|e| e.to_string())?;
    let (zf, _) = zf_preeq(&inst.h_true, &c);
    let diff = fro_sq(&(&p.entries - &zf.entries)).sqrt();
    let mut quiet = c.clone();
    quiet.sigma2_u = 0.0;
    let mut errors = 0.0;
    for m in [Modulation::Qpsk, Modulation::Qam16] {
        let r = monte_carlo_link(&inst.h_true, &p.entries, &quiet, m, 200, &mut rng).map_err(|e| e.to_string())?;
        errors += r.ber;
    }
    ensure(
        diff < 1e-9 && errors == 0.0,
        format!("||P - P_zf|| = {diff:.1e}, noiseless BER {errors} (QPSK and 16-QAM, 200 frames)"),
    )
}

fn c7_gradient_check() -> Outcome {
    let c = FrameConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let insts: Vec<Instance> = (0..3).map(|_| desk_instance(&mut rng, &c)).collect();
    let batch: Vec<&Instance> = insts.iter().collect();
    let weights = LossWeights { rho_c: 0.5, rho_l: 1e-6 };
    let mut worst: f64 = 0.0;
    let mut strict: f64 = 0.0;
    let mut coords = 0;
    for seed in 0..2 {
        let net = PreEqNet::random(PreEqNetConfig::new(c.mn(), 1), seed);
        let r = check_loss_gradient(&net, &batch, &c, &weights, 3, 1e-5, seed).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_error);
        strict = strict.max(r.max_relative);
        coords += r.coords;
    }
    ensure(
        worst < 1e-3,
        format!(
            "MN = 16, 2 sampled networks, {coords} coordinates, max error {worst:.2e} (limit 1e-3); \
             unfloored relative error {strict:.2e} (informational)"
        ),
    )
}

struct Shared {
    cfg: ExperimentConfig,
    dataset: Dataset,
    bundle: PredictorBundle,
}

fn c8_predictor(s: &Shared) -> Outcome {
    let rows = mape_table(&s.cfg, &s.dataset, &s.bundle).map_err(|e| e.to_string())?;
    let get = |p: SeriesParam, m: &str| rows.iter().find(|r| r.parameter == p && r.model == m).map(|r| r.mape);
    let mut parts = Vec::new();
    let mut ok = true;
    for p in SeriesParam::ALL {
        let (nb, pe) = (get(p, "nbeats").unwrap_or(f64::NAN), get(p, "persistence").unwrap_or(f64::NAN));
        ok &= nb <= pe;
        parts.push(format!("{} {nb:.4}% vs {pe:.4}%", p.name()));
    }
    let tau = get(SeriesParam::Tau, "nbeats").unwrap_or(f64::NAN);
    let note = if tau < 5.0 { "below" } else { "above" };
    ensure(ok, format!("nbeats vs persistence MAPE: {}; tau MAPE {note} 5% (informational)", parts.join(", ")))
}

fn c9_training_direction(s: &Shared) -> Outcome {
    let cfg = &s.cfg;
    let frame = cfg.frame_at(cfg.preeq.snr_tx_db);
    let mode = cfg.preeq.csi;
    let (train, test) = instance_sets(cfg, &frame, &s.dataset, Some(&s.bundle), mode).map_err(|e| e.to_string())?;
    let trained = train_network(cfg, &frame, &train, &test, 0.5).map_err(|e| e.to_string())?;
    let first = &trained.trace[0];
    let last = trained.trace.last().expect("trace");
    let mmse = test.iter().map(|i| i.mmse).sum::<f64>() / test.len() as f64;
    let sens_ok = last.val_sensing < first.val_sensing;
    let mse_ok = last.val_mse <= 1.5 * mmse;
    ensure(
        sens_ok && mse_ok && frame.mn() <= 64 && cfg.preeq.epochs >= 40,
        format!(
            "{} CSI, MN = {}, {} epochs at {} dB: sensing {:.4e} -> {:.4e}, MSE {:.4} = {:.3} x MMSE (limit 1.5)",
            mode.name(),
            frame.mn(),
            last.epoch,
            cfg.preeq.snr_tx_db,
            first.val_sensing,
            last.val_sensing,
            last.val_mse,
            last.val_mse / mmse
        ),
    )
}

fn c10_tradeoff(s: &Shared) -> Outcome {
    let mut cfg = s.cfg.clone();
    cfg.preeq.rho_grid = vec![1.0, 0.75, 0.5, 0.25, 0.05];
    let rows = tradeoff(&cfg, &s.dataset, Some(&s.bundle), &CsiMode::ALL).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for mode in CsiMode::ALL {
        let curve: Vec<_> = rows.iter().filter(|r| r.csi == mode).collect();
        for w in curve.windows(2) {
            if w[1].sensing > 1.05 * w[0].sensing {
                problems.push(format!("{} sensing rises at rho {}", mode.name(), w[1].rho_c));
            }
            if w[1].mse < w[0].mse / 1.05 {
                problems.push(format!("{} MSE falls at rho {}", mode.name(), w[1].rho_c));
            }
        }
        let (first, last) = (curve[0], curve[curve.len() - 1]);
        let reduction = 1.0 - last.sensing / first.sensing;
        if reduction < 0.4 {
            problems.push(format!("{} sensing reduction {:.1}% < 40%", mode.name(), 100.0 * reduction));
        }
        summary.push(format!("{} reduction {:.1}%", mode.name(), 100.0 * reduction));
    }
    for rho in &cfg.preeq.rho_grid {
        let at = |m: CsiMode| rows.iter().find(|r| r.csi == m && r.rho_c == *rho).expect("row");
        let (p, o) = (at(CsiMode::Predicted), at(CsiMode::Outdated));
        if o.mse < p.mse && o.sensing < p.sensing {
            problems.push(format!("predicted dominated by outdated at rho {rho}"));
        }
    }
    let detail = format!("{}; {}", summary.join(", "), if problems.is_empty() { "shape holds".into() } else { problems.join("; ") });
    ensure(problems.is_empty(), detail)
}

fn c11_csi_ordering(s: &Shared) -> Outcome {
    let mut cfg = s.cfg.clone();
    cfg.sweep.snr_db = vec![10.0];
    cfg.sweep.retrain_per_point = true;
    let rows = power_sweep(&cfg, &s.dataset, Some(&s.bundle)).map_err(|e| e.to_string())?;
    let mse = |name: &str| rows.iter().find(|r| r.scheme == name).map(|r| r.mse).unwrap_or(f64::NAN);
    let (mmse, perfect, predicted, outdated) = (
        mse("mmse-perfect-csi"),
        mse("preeq-perfect-csi"),
        mse("preeq-predicted-csi"),
        mse("preeq-outdated-csi"),
    );
    ensure(
        predicted < outdated && perfect <= 1.5 * mmse,
        format!(
            "10 dB: predicted {predicted:.4} vs outdated {outdated:.4}; perfect {perfect:.4} = {:.3} x MMSE {mmse:.4} (limit 1.5)",
            perfect / mmse
        ),
    )
}

fn c12_complexity() -> Outcome {
    let conv = receiver_complexity(16, 16, 2, ReceiverScheme::Conventional);
    let pre = receiver_complexity(16, 16, 2, ReceiverScheme::Preeq);
    let mut min_reduction = f64::INFINITY;
    for side in [2usize, 4, 8, 16, 32, 64] {
        for (m, n) in [(side, side), (side, 2 * side)] {
            let c = receiver_complexity(m, n, 2, ReceiverScheme::Conventional) as f64;
            let p = receiver_complexity(m, n, 2, ReceiverScheme::Preeq) as f64;
            min_reduction = min_reduction.min(100.0 * (1.0 - p / c));
        }
    }
    ensure(
        conv == 16_778_240 && pre == 1_024 && min_reduction > 75.0,
        format!("M = N = 16, o = 2: {conv} vs {pre}; smallest reduction for MN >= 4 is {min_reduction:.1}%"),
    )
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    let secs = Duration::from_secs;
    report.run(1, "oracle equivalence", Some(secs(10)), c1_oracle);
    report.run(2, "derivative correctness", Some(secs(30)), c2_derivatives);
    report.run(3, "FIM Monte-Carlo equivalence", Some(secs(60)), c3_fim_monte_carlo);
    report.run(4, "MSE closed form", Some(secs(60)), c4_mse_closed_form);
    report.run(5, "CRLB power scaling", None, c5_power_scaling);
    report.run(6, "residual at zero", None, c6_residual_at_zero);
    report.run(7, "loss differentiability", None, c7_gradient_check);

    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let shared = generate_data(&cfg).and_then(|dataset| {
        let (bundle, _) = train_predictors(&cfg, &dataset)?;
        Ok(Shared { cfg: cfg.clone(), dataset, bundle })
    });
    let setup = start.elapsed();
    match shared {
        Ok(s) => {
            report.run(8, "predictor efficacy", Some(secs(600).saturating_sub(setup)), || c8_predictor(&s));
            report.run(9, "training direction", Some(secs(1800)), || c9_training_direction(&s));
            report.run(10, "trade-off shape", None, || c10_tradeoff(&s));
            report.run(11, "CSI-quality ordering", None, || c11_csi_ordering(&s));
        }
        Err(e) => {
            for (id, name) in [
                (8, "predictor efficacy"),
                (9, "training direction"),
                (10, "trade-off shape"),
                (11, "CSI-quality ordering"),
            ] {
                report.run(id, name, None, || Err(format!("setup failed: {e}")));
            }
        }
    }
    report.run(12, "complexity numbers", Some(secs(1)), c12_complexity);

    println!("acceptance: {} of 12 criteria passed", 12 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
