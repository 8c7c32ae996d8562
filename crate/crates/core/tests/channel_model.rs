mod common;

use nalgebra::DMatrix;
use num_complex::Complex64;
use onebit_ce::channel::{dft_matrix, draw_channel, from_angular, to_angular, ArrayGeometry, PathCount};
use onebit_ce::measurement::{generate_pilots, observe, one_bit_quantize, NoiseModel, PilotScheme};
use statrs::distribution::{ContinuousCDF, Normal};
use std::f64::consts::FRAC_PI_2;

#[test]
fn mean_user_power_matches_array_size() {
    // E|h_k|^2 = (N/L) * sum_l E|alpha_l|^2 |a|^2 = N; cross terms vanish.
    let n = 32;
    let g = ArrayGeometry::half_wavelength(n).unwrap();
    let draws: Vec<f64> = (0..2500)
        .flat_map(|i| {
            let h = draw_channel(&g, 4, PathCount::Fixed(10), 7, i).unwrap();
            (0..4).map(move |k| h.matrix.column(k).norm_squared()).collect::<Vec<_>>()
        })
        .collect();
    let m = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / m;
    let sd = (draws.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    assert!((mean / n as f64 - 1.0).abs() < 0.05, "mean power {mean}");
    // And the deviation is consistent with sampling error.
    assert!((mean - n as f64).abs() < 4.0 * sd / m.sqrt(), "mean {mean} sd {sd}");
}

#[test]
fn path_parameters_follow_their_laws() {
    let g = ArrayGeometry::half_wavelength(16).unwrap();
    let mut az = Vec::new();
    let mut power = Vec::new();
    for i in 0..400 {
        let h = draw_channel(&g, 2, PathCount::Fixed(5), 3, i).unwrap();
        for p in &h.per_user_paths {
            az.extend(&p.azimuths);
            power.extend(p.gains.iter().map(|a| a.norm_sqr()));
        }
    }
    let crit = 1.63 / (az.len() as f64).sqrt(); // 1% level
    let d_az = common::ks_statistic(&mut az, |x| ((x + FRAC_PI_2) / std::f64::consts::PI).clamp(0.0, 1.0));
    // |CN(0,1)|^2 is Exp(1).
    let d_pow = common::ks_statistic(&mut power, |x| 1.0 - (-x.max(0.0)).exp());
    assert!(d_az < crit, "azimuth KS {d_az} vs {crit}");
    assert!(d_pow < crit, "gain power KS {d_pow} vs {crit}");
}

#[test]
fn random_path_counts_stay_in_range() {
    let g = ArrayGeometry::half_wavelength(8).unwrap();
    let mut seen = [false; 6];
    for i in 0..200 {
        let h = draw_channel(&g, 3, PathCount::UniformUpTo(5), 1, i).unwrap();
        for p in &h.per_user_paths {
            assert!((1..=5).contains(&p.num_paths()));
            seen[p.num_paths()] = true;
        }
    }
    assert!(seen[1..].iter().all(|&s| s), "every count 1..=5 should occur");
}

#[test]
fn angular_round_trip_preserves_energy() {
    let g = ArrayGeometry::half_wavelength(32).unwrap();
    let t = dft_matrix(32).unwrap();
    for i in 0..20 {
        let h = draw_channel(&g, 8, PathCount::Fixed(10), 5, i).unwrap();
        let a = to_angular(&h, &t).unwrap();
        assert!((a.matrix.norm() - h.matrix.norm()).abs() < 1e-9 * h.matrix.norm());
        let back = from_angular(&a, &t).unwrap();
        assert!((back.matrix - &h.matrix).norm() < 1e-10 * h.matrix.norm());
    }
}

#[test]
fn sign_flip_rate_matches_gaussian_tail() {
    // For a fixed noiseless component x, P[sgn(x + n) != sgn(x)] with
    // n ~ N(0, s^2/2) per real dimension is Phi(-|x| / sqrt(s^2/2)).
    let g = ArrayGeometry::half_wavelength(4).unwrap();
    let h = draw_channel(&g, 2, PathCount::Fixed(2), 11, 0).unwrap();
    let p = generate_pilots(2, 2, PilotScheme::QpskRandom, 4).unwrap();
    let clean = &h.matrix * &p.matrix;
    let noise = NoiseModel::from_snr_db(0.0).unwrap();
    let sigma = (noise.noise_variance / 2.0).sqrt();
    let std = Normal::new(0.0, 1.0).unwrap();

    let trials = 20_000u64;
    let mut flips = DMatrix::<f64>::zeros(clean.nrows(), 2 * clean.ncols());
    for s in 0..trials {
        let y = observe(&h, &p, &noise, 1000 + s).unwrap().matrix;
        for ((r, c), z) in clean.iter().enumerate().map(|(i, z)| ((i % clean.nrows(), i / clean.nrows()), z)) {
            let v = y[(r, c)];
            flips[(r, 2 * c)] += ((v.re > 0.0) != (z.re >= 0.0)) as u8 as f64;
            flips[(r, 2 * c + 1)] += ((v.im > 0.0) != (z.im >= 0.0)) as u8 as f64;
        }
    }
    for (i, z) in clean.iter().enumerate() {
        let (r, c) = (i % clean.nrows(), i / clean.nrows());
        for (part, x) in [(0, z.re), (1, z.im)] {
            let expect = std.cdf(-x.abs() / sigma);
            let got = flips[(r, 2 * c + part)] / trials as f64;
            let tol = 4.0 * (expect * (1.0 - expect) / trials as f64).sqrt() + 1e-4;
            assert!((got - expect).abs() < tol, "({r},{c},{part}): {got} vs {expect}");
        }
    }
}

#[test]
fn quantizer_output_is_closed_and_idempotent() {
    let x = DMatrix::from_fn(6, 5, |r, c| Complex64::new(r as f64 - 2.5, 1.5 - c as f64));
    let y = one_bit_quantize(&x).unwrap();
    assert!(y.iter().all(|v| v.re.abs() == 1.0 && v.im.abs() == 1.0));
    assert_eq!(one_bit_quantize(&y).unwrap(), y);
    assert!(one_bit_quantize(&x.map(|_| Complex64::new(f64::NAN, 0.0))).is_err());
}

#[test]
fn same_seed_same_observation() {
    let g = ArrayGeometry::half_wavelength(16).unwrap();
    let h = draw_channel(&g, 4, PathCount::Fixed(3), 2, 9).unwrap();
    let p = generate_pilots(4, 4, PilotScheme::QpskRandom, 1).unwrap();
    let noise = NoiseModel::from_snr_db(5.0).unwrap();
    let a = observe(&h, &p, &noise, 77).unwrap();
    let b = observe(&h, &p, &noise, 77).unwrap();
    let c = observe(&h, &p, &noise, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.matrix, c.matrix);
}
