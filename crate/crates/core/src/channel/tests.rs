use approx::assert_abs_diff_eq;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::linalg::fro_sq;
use crate::otfs::{dd_to_td, dd_transform_matrix};

fn cfg(m: usize, n: usize, cp: usize) -> FrameConfig {
    FrameConfig::with_grid(m, n, cp)
}

fn path_from_taps(h: Complex64, l: f64, k: f64, c: &FrameConfig) -> PathParams {
    PathParams::from_taps(PathTaps { h, l, k }, PathKind::Sensing, c)
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect()
}

fn apply(h: &CMatrix, x: &[Complex64]) -> Vec<Complex64> {
    (h * DVector::from_column_slice(x)).iter().copied().collect()
}

fn rel_fro(a: &CMatrix, b: &CMatrix) -> f64 {
    (fro_sq(&(a - b)) / fro_sq(b)).sqrt()
}

#[test]
fn taps_follow_grid_scaling() {
    let c = FrameConfig::full_scale();
    let p = PathParams {
        h: Complex64::new(1.0, 0.0),
        tau: 1e-6,
        nu: 500.0,
        kind: PathKind::Communication,
    };
    let t = p.taps(&c);
    assert_abs_diff_eq!(t.l, 1e-6 * 16.0 * 15e3, epsilon = 1e-15);
    assert_abs_diff_eq!(t.k, 500.0 * 16.0 / 15e3, epsilon = 1e-12);
    let back = PathParams::from_taps(t, PathKind::Communication, &c);
    assert_abs_diff_eq!(back.tau, p.tau, epsilon = 1e-20);
    assert_abs_diff_eq!(back.nu, p.nu, epsilon = 1e-9);
}

#[test]
fn zero_doppler_is_identity() {
    let c = cfg(4, 4, 1);
    for d in doppler_diagonal(0.0, 1.7, &c) {
        assert_abs_diff_eq!(d.re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.im, 0.0, epsilon = 1e-15);
    }
}

#[test]
fn quarter_turn_doppler() {
    let c = cfg(2, 2, 1);
    let want = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
    for (d, (re, im)) in doppler_diagonal(1.0, 0.0, &c).iter().zip(want) {
        assert_abs_diff_eq!(d.re, re, epsilon = 1e-15);
        assert_abs_diff_eq!(d.im, im, epsilon = 1e-15);
    }
}

#[test]
fn integer_delay_wraps_doppler_tail() {
    let c = cfg(2, 2, 1);
    let eta = Complex64::from_polar(1.0, 2.0 * PI / 4.0);
    let want = [eta.powi(0), eta.powi(1), eta.powi(2), eta.powi(-1)];
    let got = doppler_diagonal(1.0, 1.0, &c);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).norm() < 1e-15);
        assert_abs_diff_eq!(g.norm(), 1.0, epsilon = 1e-15);
    }
}

#[test]
fn delay_matrix_examples() {
    let c = cfg(2, 2, 1);
    let z = delay_matrix(0.0, &c);
    assert!((z - nalgebra::DMatrix::<f64>::identity(4, 4)).amax() < 1e-15);
    let c8 = cfg(4, 2, 1);
    let two = delay_matrix(2.0, &c8);
    for i in 0..8 {
        for j in 0..8 {
            let want = if i >= 2 && j == i - 2 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(two[(i, j)], want, epsilon = 1e-15);
        }
    }
    let half = delay_matrix(0.5, &c);
    assert_abs_diff_eq!(half[(0, 0)], 2.0 / PI, epsilon = 1e-15);
}

#[test]
fn cp_matrix_band() {
    // Zero-length CP: the band j - i >= MN is empty.
    let c0 = cfg(4, 2, 0);
    assert!(cp_matrix(0.6, &c0).iter().all(|v| *v == 0.0));

    // Integer l = 1, MN = 8, L = 4: the unit entry sits at j - i = MN - l.
    let c = FrameConfig { cp_len: 4, ..cfg(8, 2, 1) };
    let c = FrameConfig { m: 4, ..c };
    let cp = cp_matrix(1.0, &c);
    assert_abs_diff_eq!(cp[(0, 7)], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(cp[(0, 6)], 0.0, epsilon = 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let l = rng.random_range(0.0..3.0);
        let cp = cp_matrix(l, &c);
        for i in 0..8 {
            for j in 0..8 {
                if !(j >= i && j - i >= 8 - 4) {
                    assert_eq!(cp[(i, j)], 0.0);
                }
            }
        }
    }
}

#[test]
fn integer_taps_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = cfg(4, 4, 3);
    for l in 0..=3 {
        for k in -3..=3 {
            let h = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let p = path_from_taps(h, l as f64, k as f64, &c);
            let td = td_channel(&[p], &c).unwrap();
            for _ in 0..3 {
                let d = random_vec(&mut rng, c.mn());
                let want = oracle_cp_transmission(&d, &p, &c).unwrap();
                let got = apply(&td.entries, &d);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).norm() < 1e-9, "l={l} k={k}");
                }
            }
        }
    }
}

#[test]
fn identity_path_matches_oracle_dd_response() {
    for cp in [0, 1, 3] {
        let c = cfg(4, 4, cp);
        let p = path_from_taps(Complex64::new(1.0, 0.0), 0.0, 0.0, &c);
        let dd = dd_channel(&[p], &c).unwrap();
        for i in 0..c.mn() {
            let mut e = vec![Complex64::default(); c.mn()];
            e[i] = Complex64::new(1.0, 0.0);
            let td = dd_to_td(&e, c.grid()).unwrap();
            let resp = td_to_dd(&oracle_cp_transmission(&td, &p, &c).unwrap(), c.grid()).unwrap();
            for r in 0..c.mn() {
                assert!((dd.entries[(r, i)] - resp[r]).norm() < 1e-9);
            }
        }
    }
}

#[test]
fn random_integer_path_dd_matches_oracle_on_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = cfg(4, 4, 2);
    for _ in 0..10 {
        let l = rng.random_range(0..=2) as f64;
        let k = rng.random_range(-3..=3) as f64;
        let h = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let p = path_from_taps(h, l, k, &c);
        let dd = dd_channel(&[p], &c).unwrap();
        for i in 0..c.mn() {
            let mut e = vec![Complex64::default(); c.mn()];
            e[i] = Complex64::new(1.0, 0.0);
            let td = dd_to_td(&e, c.grid()).unwrap();
            let resp = td_to_dd(&oracle_cp_transmission(&td, &p, &c).unwrap(), c.grid()).unwrap();
            for r in 0..c.mn() {
                assert!((dd.entries[(r, i)] - resp[r]).norm() < 1e-9);
            }
        }
        // Exactly MN nonzero entries for an integer-tap path.
        let nnz = dd.entries.iter().filter(|z| z.norm() > 1e-9).count();
        assert_eq!(nnz, c.mn());
    }
}

#[test]
fn fft_conversion_matches_kronecker() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = cfg(4, 3, 1);
    let h = CMatrix::from_vec(12, 12, random_vec(&mut rng, 144));
    let a = dd_transform_matrix(c.grid());
    let want = &a * &h * a.adjoint();
    assert!(rel_fro(&to_dd_domain(&h, c.grid()), &want) < 1e-12);
}

#[test]
fn dd_and_td_share_singular_values() {
    let c = cfg(4, 4, 1);
    let paths = [
        path_from_taps(Complex64::new(0.8, 0.3), 1.3, -0.7, &c),
        path_from_taps(Complex64::new(-0.2, 0.5), 2.2, 1.6, &c),
    ];
    let td = td_channel(&paths, &c).unwrap();
    let dd = dd_channel(&paths, &c).unwrap();
    let a = td.entries.singular_values();
    let b = dd.entries.singular_values();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-10);
    }
}

#[test]
fn channel_is_linear_in_paths_and_gain() {
    let c = cfg(4, 4, 1);
    let p1 = path_from_taps(Complex64::new(0.8, 0.3), 1.3, -0.7, &c);
    let p2 = path_from_taps(Complex64::new(-0.2, 0.5), 2.2, 1.6, &c);
    let both = dd_channel(&[p1, p2], &c).unwrap().entries;
    let sum = path_matrix(&p1, &c, Domain::Dd).unwrap() + path_matrix(&p2, &c, Domain::Dd).unwrap();
    assert!(rel_fro(&both, &sum) < 1e-12);
    let doubled = PathParams { h: p1.h * 2.0, ..p1 };
    let a = path_matrix(&doubled, &c, Domain::Td).unwrap();
    let b = path_matrix(&p1, &c, Domain::Td).unwrap() * Complex64::new(2.0, 0.0);
    assert!(rel_fro(&a, &b) < 1e-14);
}

#[test]
fn out_of_range_taps_name_the_path() {
    let c = cfg(4, 4, 1);
    let ok = path_from_taps(Complex64::new(1.0, 0.0), 1.0, 0.0, &c);
    let bad = path_from_taps(Complex64::new(1.0, 0.0), 3.5, 0.0, &c);
    match td_channel(&[ok, bad], &c) {
        Err(ChannelError::TapOutOfRange { path, .. }) => assert_eq!(path, 1),
        other => panic!("{other:?}"),
    }
    let fast = path_from_taps(Complex64::new(1.0, 0.0), 1.0, -3.2, &c);
    assert!(dd_channel(&[fast], &c).is_err());
}

#[test]
fn fractional_delay_converges_to_integer() {
    let c = cfg(4, 4, 1);
    let h = Complex64::new(0.7, -0.4);
    let target = path_matrix(&path_from_taps(h, 2.0, 0.6, &c), &c, Domain::Td).unwrap();
    for sign in [-1.0, 1.0] {
        let gaps: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|d| {
                let m = path_matrix(&path_from_taps(h, 2.0 + sign * d, 0.6, &c), &c, Domain::Td).unwrap();
                (m - &target).iter().map(|z| z.norm()).fold(0.0, f64::max)
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }
}

#[test]
fn sinc_prime_matches_finite_difference() {
    for x in [-2.3, -0.7, -1e-4, 0.0, 3e-4, 0.2, 1.0, 4.9] {
        let h = 1e-6;
        let fd = (sinc(x + h) - sinc(x - h)) / (2.0 * h);
        assert_abs_diff_eq!(sinc_prime(x), fd, epsilon = 1e-8);
    }
    assert_eq!(sinc_prime(0.0), 0.0);
}

#[test]
fn gain_derivatives() {
    let c = cfg(4, 4, 1);
    let p = path_from_taps(Complex64::new(1.0, 0.0), 1.3, 0.4, &c);
    let d = path_derivatives(&p, &c).unwrap();
    let own = path_matrix(&p, &c, Domain::Dd).unwrap();
    assert!(rel_fro(&d.re_h, &own) < 1e-14);
    let j = Complex64::new(0.0, 1.0);
    assert!(rel_fro(&d.im_h, &(&d.re_h * j)) < 1e-15);
}

#[test]
fn near_split_taps_rejected() {
    let c = cfg(4, 4, 1);
    for (l, k) in [(1.5, 0.2), (0.0, 0.2), (3.0, 0.2), (1.2, 3.0), (1.2, -3.0)] {
        let p = path_from_taps(Complex64::new(1.0, 0.0), l, k, &c);
        assert!(matches!(path_derivatives(&p, &c), Err(ChannelError::NearSplit { .. })), "{l} {k}");
    }
}

fn fd_check(c: &FrameConfig, h: Complex64, l: f64, k: f64) {
    let p = path_from_taps(h, l, k, c);
    let d = path_derivatives(&p, c).unwrap();
    let step = 1e-4;
    let at = |l: f64, k: f64| path_matrix(&path_from_taps(h, l, k, c), c, Domain::Dd).unwrap();
    let fd_l = (at(l + step, k) - at(l - step, k)) / Complex64::new(2.0 * step, 0.0);
    let fd_k = (at(l, k + step) - at(l, k - step)) / Complex64::new(2.0 * step, 0.0);
    assert!(rel_fro(&d.dl, &fd_l) < 1e-4, "l={l} k={k}: {}", rel_fro(&d.dl, &fd_l));
    assert!(rel_fro(&d.dk, &fd_k) < 1e-4, "l={l} k={k}: {}", rel_fro(&d.dk, &fd_k));

    // Physical units: same check in τ and ν.
    let dtau = step / (c.m as f64 * c.delta_f);
    let dnu = step / (c.n as f64 * c.t);
    let phys = |tau: f64, nu: f64| path_matrix(&PathParams { tau, nu, ..p }, c, Domain::Dd).unwrap();
    let fd_tau = (phys(p.tau + dtau, p.nu) - phys(p.tau - dtau, p.nu)) / Complex64::new(2.0 * dtau, 0.0);
    let fd_nu = (phys(p.tau, p.nu + dnu) - phys(p.tau, p.nu - dnu)) / Complex64::new(2.0 * dnu, 0.0);
    assert!(rel_fro(&d.tau, &fd_tau) < 1e-4);
    assert!(rel_fro(&d.nu, &fd_nu) < 1e-4);
}

#[test]
fn derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let c = cfg(4, 4, 1);
    let mut draws = 0;
    while draws < 20 {
        let l: f64 = rng.random_range(0.01..2.99);
        let k = rng.random_range(-2.99..2.99);
        if (l - l.floor() - 0.5).abs() < 1e-3 {
            continue;
        }
        let h = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        fd_check(&c, h, l, k);
        draws += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn derivative_fd_agreement(l in 0.01f64..2.45, k in -2.9f64..2.9, re in -1.0f64..1.0, im in -1.0f64..1.0) {
        prop_assume!((l - l.floor() - 0.5).abs() > 1e-3);
        prop_assume!(re.abs() + im.abs() > 0.05);
        fd_check(&cfg(4, 4, 2), Complex64::new(re, im), l, k);
    }
}

#[test]
fn oracle_examples() {
    let c = cfg(4, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = random_vec(&mut rng, c.mn());
    let id = path_from_taps(Complex64::new(1.0, 0.0), 0.0, 0.0, &c);
    assert_eq!(oracle_cp_transmission(&d, &id, &c).unwrap(), d);

    let shift = path_from_taps(Complex64::new(1.0, 0.0), 1.0, 0.0, &c);
    let out = oracle_cp_transmission(&d, &shift, &c).unwrap();
    for n in 0..c.mn() {
        let src = (n + c.mn() - 1) % c.mn();
        assert!((out[n] - d[src]).norm() < 1e-15);
    }

    let alpha = Complex64::new(0.3, -1.2);
    let scaled: Vec<Complex64> = d.iter().map(|v| v * alpha).collect();
    let p = path_from_taps(Complex64::new(0.5, 0.5), 2.0, -1.0, &c);
    let a = oracle_cp_transmission(&scaled, &p, &c).unwrap();
    let b = oracle_cp_transmission(&d, &p, &c).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y * alpha).norm() < 1e-12);
    }

    let far = path_from_taps(Complex64::new(1.0, 0.0), 3.0, 0.0, &c);
    assert_eq!(
        oracle_cp_transmission(&d, &far, &c),
        Err(ChannelError::DelayExceedsCp { l: 3, cp_len: 2 })
    );
    let frac = path_from_taps(Complex64::new(1.0, 0.0), 0.5, 0.0, &c);
    assert!(matches!(
        oracle_cp_transmission(&d, &frac, &c),
        Err(ChannelError::NonIntegerTaps { .. })
    ));
}
