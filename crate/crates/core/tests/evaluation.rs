use nalgebra::DMatrix;
use num_complex::Complex64;
use onebit_ce::channel::{dft_matrix, draw_channel, to_angular, ArrayGeometry, PathCount};
use onebit_ce::eval::{ia_beam_select, nmse_db, sum_rate, NMSE_FLOOR_DB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn angular_channel(n: usize, k: usize, index: u64) -> DMatrix<Complex64> {
    let g = ArrayGeometry::half_wavelength(n).unwrap();
    let h = draw_channel(&g, k, PathCount::Fixed(3), 21, index).unwrap();
    to_angular(&h, &dft_matrix(n).unwrap()).unwrap().matrix
}

/// ZF sum rate from the SVD pseudo-inverse: with perfect CSI every user
/// sees no interference and gain 1/|column u of G^+|^2.
fn zf_oracle(h_ang: &DMatrix<Complex64>, beams: &[usize], snr_db: f64) -> f64 {
    let k = h_ang.ncols();
    let g = DMatrix::from_fn(k, k, |u, j| h_ang[(beams[j], u)].conj());
    let pinv = g.pseudo_inverse(1e-12).unwrap();
    let p = 10f64.powf(snr_db / 10.0) / k as f64;
    (0..k).map(|u| (1.0 + p / pinv.column(u).norm_squared()).log2()).sum()
}

#[test]
fn nmse_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h: Vec<_> = (0..4).map(|_| random(8, 3, &mut rng)).collect();
    let zero: Vec<_> = h.iter().map(|m| m * Complex64::new(0.0, 0.0)).collect();
    let double: Vec<_> = h.iter().map(|m| m * Complex64::new(2.0, 0.0)).collect();
    assert!(nmse_db(&zero, &h).unwrap().abs() < 1e-12);
    assert!(nmse_db(&double, &h).unwrap().abs() < 1e-12);
    assert_eq!(nmse_db(&h, &h).unwrap(), NMSE_FLOOR_DB);
    let half: Vec<_> = h.iter().map(|m| m * Complex64::new(0.5, 0.0)).collect();
    assert!((nmse_db(&half, &h).unwrap() - 10.0 * 0.25f64.log10()).abs() < 1e-12);
}

#[test]
fn beam_selection_takes_distinct_peaks_when_they_do_not_collide() {
    for i in 0..50 {
        let h = angular_channel(32, 4, i);
        let beams = ia_beam_select(&h, 4).unwrap();
        let mut sorted = beams.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "beams must be distinct");

        let peaks: Vec<usize> = (0..4)
            .map(|k| (0..32).max_by(|&a, &b| h[(a, k)].norm().total_cmp(&h[(b, k)].norm())).unwrap())
            .collect();
        let mut p = peaks.clone();
        p.sort();
        p.dedup();
        if p.len() == 4 {
            assert_eq!(beams, peaks, "no collision: every user keeps its peak");
        }
    }
}

#[test]
fn collisions_go_to_the_stronger_user() {
    // Two users peak on beam 0; user 1 is stronger and keeps it.
    let mut h = DMatrix::<Complex64>::zeros(4, 2);
    h[(0, 0)] = Complex64::new(1.0, 0.0);
    h[(2, 0)] = Complex64::new(0.5, 0.0);
    h[(0, 1)] = Complex64::new(2.0, 0.0);
    h[(3, 1)] = Complex64::new(0.1, 0.0);
    assert_eq!(ia_beam_select(&h, 2).unwrap(), vec![2, 0]);
    assert!(ia_beam_select(&h, 3).is_err());
}

#[test]
fn perfect_csi_matches_the_pseudo_inverse_oracle() {
    for i in 0..30 {
        let h = angular_channel(16, 4, 100 + i);
        let beams = ia_beam_select(&h, 4).unwrap();
        for snr in [0.0, 10.0, 20.0] {
            let got = sum_rate(&h, &h, snr).unwrap();
            if got.regularized {
                continue;
            }
            let want = zf_oracle(&h, &beams, snr);
            assert!((got.rate - want).abs() < 1e-8 * want.max(1.0), "{} vs {want}", got.rate);
        }
    }
}

#[test]
fn perfect_csi_dominates_noisy_estimates_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for snr in [0.0, 10.0, 20.0] {
        let (mut perfect, mut noisy) = (0.0, 0.0);
        for i in 0..200 {
            let h = angular_channel(16, 4, 300 + i);
            let e = &h + random(16, 4, &mut rng) * Complex64::new(0.5, 0.0);
            perfect += sum_rate(&h, &h, snr).unwrap().rate;
            noisy += sum_rate(&h, &e, snr).unwrap().rate;
        }
        assert!(perfect > noisy, "{snr} dB: {perfect} vs {noisy}");
    }
}

#[test]
fn sum_rate_grows_with_snr_under_perfect_csi() {
    let h = angular_channel(16, 4, 7);
    let rates: Vec<f64> = [-10.0, 0.0, 10.0, 20.0].iter().map(|&s| sum_rate(&h, &h, s).unwrap().rate).collect();
    assert!(rates.windows(2).all(|w| w[1] > w[0]), "{rates:?}");
}
