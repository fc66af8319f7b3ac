use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::channel::{dd_channel, PathKind, PathParams, PathTaps};

fn cfg_with_noise(sigma2_u: f64) -> FrameConfig {
    FrameConfig {
        sigma2_u,
        ..FrameConfig::desk()
    }
}

fn eye(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
    let v = complex_noise(rng, n * n, 1.0);
    CMatrix::from_iterator(n, n, v.iter().copied())
}

fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
    eye(n) * Complex64::new(2.0, 0.0) + random_matrix(rng, n) * Complex64::new(0.3, 0.0)
}

/// Q(x) = erfc(x / sqrt 2) / 2 via the Abramowitz-Stegun 7.1.26 fit.
fn q_function(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    0.5 * poly * (-z * z).exp()
}

#[test]
fn beta_examples() {
    let c = cfg_with_noise(0.0);
    assert_abs_diff_eq!(beta(&eye(16), &eye(16), &c).unwrap(), 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(beta(&eye(16), &(eye(16) * Complex64::new(2.0, 0.0)), &c).unwrap(), 0.5, epsilon = 1e-15);
    assert_eq!(
        beta(&eye(16), &CMatrix::zeros(16, 16), &c),
        Err(CommError::UndefinedNormalization)
    );
    assert!(matches!(beta(&eye(4), &eye(16), &c), Err(CommError::Shape { .. })));
}

#[test]
fn normalized_output_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let c = FrameConfig::desk();
    let h = random_matrix(&mut rng, 16);
    let p = random_matrix(&mut rng, 16);
    let b = beta(&h, &p, &c).unwrap();
    let hp = &h * &p;
    let draws = 10_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let bits = random_bits(&mut rng, 32);
        let s = DVector::from_vec(map_symbols(&bits, Modulation::Qpsk, &c).unwrap());
        let y = &hp * s + complex_noise(&mut rng, 16, c.sigma2_u);
        acc += (y * Complex64::new(b, 0.0)).norm_squared();
    }
    let mean = acc / draws as f64;
    assert!((mean / 16.0 - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn expected_mse_examples() {
    let c = cfg_with_noise(0.0);
    assert_abs_diff_eq!(expected_mse(&eye(16), &eye(16), &c).unwrap(), 0.0, epsilon = 1e-12);
    let noisy = cfg_with_noise(0.3);
    assert_abs_diff_eq!(
        expected_mse(&eye(16), &CMatrix::zeros(16, 16), &noisy).unwrap(),
        32.0,
        epsilon = 1e-12
    );
}

#[test]
fn closed_form_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let c = FrameConfig::desk();
    for _ in 0..3 {
        let h = random_matrix(&mut rng, 16);
        let p = PreEqMatrix::new(random_matrix(&mut rng, 16)).normalized(c.p_max);
        let r = monte_carlo_link(&h, &p.entries, &c, Modulation::Qpsk, 100_000, &mut rng).unwrap();
        assert!(
            (r.mse_mc - r.mse_closed).abs() < 3.0 * r.mse_stderr,
            "{} vs {} (se {})",
            r.mse_mc,
            r.mse_closed,
            r.mse_stderr
        );
        assert!((0.0..=1.0).contains(&r.ber));
    }
}

#[test]
fn noiseless_zf_link_is_error_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let c = cfg_with_noise(0.0);
    let h = well_conditioned(&mut rng, 16);
    let (p, regularized) = zf_preeq(&h, &c);
    assert!(!regularized);
    for modulation in [Modulation::Qpsk, Modulation::Qam16] {
        let r = monte_carlo_link(&h, &p.entries, &c, modulation, 200, &mut rng).unwrap();
        assert_eq!(r.ber, 0.0);
        assert!(r.mse_mc < 1e-20);
    }
}

#[test]
fn qpsk_awgn_ber_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for snr_db in [4.0, 7.0, 10.0] {
        let es_n0 = 10f64.powf(snr_db / 10.0);
        let c = cfg_with_noise(1.0 / es_n0);
        let r = monte_carlo_link(&eye(16), &eye(16), &c, Modulation::Qpsk, 40_000, &mut rng).unwrap();
        let theory = q_function(es_n0.sqrt());
        assert!(theory >= 1e-4);
        assert!((r.ber / theory - 1.0).abs() < 0.2, "{snr_db} dB: {} vs {}", r.ber, theory);
    }
}

#[test]
fn mmse_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let h = well_conditioned(&mut rng, 16);
    let bits = random_bits(&mut rng, 32);
    let quiet = cfg_with_noise(1e-14);
    let s = DVector::from_vec(map_symbols(&bits, Modulation::Qpsk, &quiet).unwrap());
    let y = &h * &s;
    let est = mmse_detect(&h, &y, &quiet).unwrap();
    assert!((est - &s).norm() < 1e-9);

    let c = cfg_with_noise(0.25);
    let est = mmse_detect(&eye(16), &y, &c).unwrap();
    let want = &y * Complex64::new(1.0 / 1.25, 0.0);
    assert!((est - want).norm() < 1e-12);
}

#[test]
fn mmse_closed_form_matches_detector() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let c = cfg_with_noise(0.2);
    let h = random_matrix(&mut rng, 16);
    let frames = 20_000;
    let mut acc = 0.0;
    let mut zf_acc = 0.0;
    let hinv = h.clone().try_inverse().unwrap();
    for _ in 0..frames {
        let bits = random_bits(&mut rng, 32);
        let s = DVector::from_vec(map_symbols(&bits, Modulation::Qpsk, &c).unwrap());
        let y = &h * &s + complex_noise(&mut rng, 16, c.sigma2_u);
        acc += (mmse_detect(&h, &y, &c).unwrap() - &s).norm_squared();
        zf_acc += (&hinv * &y - &s).norm_squared();
    }
    let mc = acc / frames as f64;
    let closed = mmse_mse(&h, &c).unwrap();
    assert!((mc / closed - 1.0).abs() < 0.03, "{mc} vs {closed}");
    let zf_closed = zf_receiver_mse(&h, &c).unwrap();
    assert!((zf_acc / frames as f64 / zf_closed - 1.0).abs() < 0.05);
}

#[test]
fn mmse_never_worse_than_zf_receiver() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..20 {
        let c = cfg_with_noise(rand::Rng::random_range(&mut rng, 0.01..1.0));
        let h = random_matrix(&mut rng, 16);
        assert!(mmse_mse(&h, &c).unwrap() <= zf_receiver_mse(&h, &c).unwrap());
    }
}

#[test]
fn zf_preeq_examples() {
    let c = FrameConfig::desk();
    let (p, _) = zf_preeq(&eye(16), &c);
    assert!((&p.entries - eye(16)).camax() < 1e-14);
    let (p, _) = zf_preeq(&(eye(16) * Complex64::new(2.0, 0.0)), &c);
    assert!((&p.entries - eye(16)).camax() < 1e-14);
    assert_abs_diff_eq!(p.power(), c.p_max, epsilon = 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..10 {
        let h = well_conditioned(&mut rng, 16);
        let (p, _) = zf_preeq(&h, &c);
        let hp = &h * &p.entries;
        let scale = hp[(0, 0)];
        let resid = &hp - eye(16) * scale;
        assert!(resid.camax() < 1e-6 * scale.norm());
        assert_abs_diff_eq!(p.power(), c.p_max, epsilon = 1e-9);
    }
}

#[test]
fn zf_preeq_on_singular_channel_is_regularized() {
    let c = FrameConfig::desk();
    let mut h = eye(16);
    h[(3, 3)] = Complex64::default();
    let (p, regularized) = zf_preeq(&h, &c);
    assert!(regularized);
    assert_abs_diff_eq!(p.power(), c.p_max, epsilon = 1e-9);
}

#[test]
fn zf_mse_vanishes_with_noise() {
    let c = FrameConfig::desk();
    let paths = [
        PathParams::from_taps(
            PathTaps {
                h: Complex64::new(1.0, 0.2),
                l: 0.0,
                k: 0.3,
            },
            PathKind::Communication,
            &c,
        ),
        PathParams::from_taps(
            PathTaps {
                h: Complex64::new(-0.3, 0.2),
                l: 1.4,
                k: -1.1,
            },
            PathKind::Communication,
            &c,
        ),
    ];
    let h = dd_channel(&paths, &c).unwrap().entries;
    let mut last = f64::INFINITY;
    for s in [1e-2, 1e-4, 1e-6] {
        let cn = cfg_with_noise(s);
        let (p, _) = zf_preeq(&h, &cn);
        let mse = expected_mse(&h, &p.entries, &cn).unwrap();
        assert!(mse < last);
        last = mse;
    }
    assert!(last < 1e-3);
}

#[test]
fn beta_invariant_under_unitary_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let c = FrameConfig::desk();
    let h = random_matrix(&mut rng, 16);
    let p = random_matrix(&mut rng, 16);
    let q = random_matrix(&mut rng, 16).qr().q();
    let a = beta(&h, &p, &c).unwrap();
    let b = beta(&(&q * &h), &p, &c).unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    assert_abs_diff_eq!(fro_sq(&(&h * &p)), fro_sq(&(&q * &h * &p)), epsilon = 1e-8);
}

#[test]
fn complexity_model() {
    assert_eq!(receiver_complexity(16, 16, 2, ReceiverScheme::Conventional), 16_778_240);
    assert_eq!(receiver_complexity(16, 16, 2, ReceiverScheme::Preeq), 1_024);
    assert_abs_diff_eq!(complexity_reduction(16, 16, 2), 100.0 * (1.0 - 1024.0 / 16_778_240.0), epsilon = 1e-12);
    assert_eq!(receiver_complexity(2, 2, 2, ReceiverScheme::Conventional), 80);
    assert_eq!(receiver_complexity(2, 2, 2, ReceiverScheme::Preeq), 16);
    assert_abs_diff_eq!(complexity_reduction(2, 2, 2), 80.0, epsilon = 1e-12);
    let mut last = 0.0;
    for m in 2..20 {
        let r = complexity_reduction(m, m, 4);
        assert!(r > last);
        last = r;
    }
}

#[test]
fn preeq_power_helpers() {
    let c = FrameConfig::full_scale();
    let p = PreEqMatrix::scaled_identity(&c);
    assert_abs_diff_eq!(p.power(), c.p_max, epsilon = 1e-9);
    assert!(p.satisfies_power(c.p_max));
    let big = PreEqMatrix::new(&p.entries * Complex64::new(1.1, 0.0));
    assert!(!big.satisfies_power(c.p_max));
    assert_abs_diff_eq!(big.normalized(c.p_max).power(), c.p_max, epsilon = 1e-9);
}
