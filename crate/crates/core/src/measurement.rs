//! Pilot transmission and one-bit quantized observations `Y = sgn(HP + N)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::channel::{ChannelRealization, Domain};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum PilotScheme {
    /// i.i.d. entries from `{(±1±j)/√2}`.
    QpskRandom,
    /// `K x Q` section of an `L`-point DFT, `L = max(K, Q)`, with a
    /// seed-dependent cyclic row shift.
    ShiftedDft,
}

impl std::str::FromStr for PilotScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qpsk-random" => Ok(PilotScheme::QpskRandom),
            "shifted-dft" => Ok(PilotScheme::ShiftedDft),
            other => Err(Error::invalid(format!("unknown pilot scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for PilotScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PilotScheme::QpskRandom => "qpsk-random",
            PilotScheme::ShiftedDft => "shifted-dft",
        })
    }
}

/// Unit-modulus `K x Q` pilot block.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub matrix: DMatrix<Complex64>,
    pub scheme: PilotScheme,
    pub seed: u64,
}

impl PilotMatrix {
    pub fn num_users(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_pilots(&self) -> usize {
        self.matrix.ncols()
    }

    /// Content hash used to tie observations and checkpoints to a pilot block.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_users() as u64).to_le_bytes());
        hasher.update((self.num_pilots() as u64).to_le_bytes());
        for v in self.matrix.iter() {
            hasher.update(v.re.to_le_bytes());
            hasher.update(v.im.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

pub fn generate_pilots(
    num_users: usize,
    num_pilots: usize,
    scheme: PilotScheme,
    seed: u64,
) -> Result<PilotMatrix> {
    generate_pilots_indexed(num_users, num_pilots, scheme, seed, 0)
}

/// Pilot block number `index` of the stream `seed`. Index 0 is the
/// experiment-wide block; per-sample redraws use the sample index.
pub fn generate_pilots_indexed(
    num_users: usize,
    num_pilots: usize,
    scheme: PilotScheme,
    seed: u64,
    index: u64,
) -> Result<PilotMatrix> {
    if num_users == 0 || num_pilots == 0 {
        return Err(Error::invalid(format!(
            "pilot block must be at least 1x1, got {num_users}x{num_pilots}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Pilots, index);
    let matrix = match scheme {
        PilotScheme::QpskRandom => DMatrix::from_fn(num_users, num_pilots, |_, _| {
            let re = if rng.gen::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            let im = if rng.gen::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            Complex64::new(re, im)
        }),
        PilotScheme::ShiftedDft => {
            let len = num_users.max(num_pilots);
            let shift = rng.gen_range(0..len);
            DMatrix::from_fn(num_users, num_pilots, |k, q| {
                let row = (k + shift) % len;
                Complex64::from_polar(1.0, -2.0 * PI * (row * q) as f64 / len as f64)
            })
        }
    };
    Ok(PilotMatrix {
        matrix,
        scheme,
        seed,
    })
}

/// Receiver noise level.
///
/// SNR is the per-user received SNR: the channel normalization gives each
/// antenna unit average power per user and pilots are unit modulus, so
/// `σ² = 10^(-snr_db/10)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub noise_variance: f64,
    pub snr_db: f64,
}

impl NoiseModel {
    pub fn from_snr_db(snr_db: f64) -> Result<Self> {
        Ok(Self {
            noise_variance: snr_to_noise_variance(snr_db)?,
            snr_db,
        })
    }
}

pub fn snr_to_noise_variance(snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
    }
    Ok(10f64.powf(-snr_db / 10.0))
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Element-wise one-bit quantizer on the real and imaginary parts,
/// with `sgn(0) = +1`.
pub fn one_bit_quantize(x: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    if x.iter().any(|v| v.re.is_nan() || v.im.is_nan()) {
        return Err(Error::invalid("cannot quantize NaN"));
    }
    Ok(x.map(|v| Complex64::new(sgn(v.re), sgn(v.im))))
}

/// One-bit observation of a pilot block.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub matrix: DMatrix<Complex64>,
    pub noise_variance: f64,
    pub pilot_id: String,
    pub seed: u64,
}

impl Observation {
    pub fn num_antennas(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_pilots(&self) -> usize {
        self.matrix.ncols()
    }
}

/// `Y = sgn(HP + N)` with noise drawn from stream 0 of `seed`.
pub fn observe(
    h: &ChannelRealization,
    pilots: &PilotMatrix,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Observation> {
    let mut rng = rng::stream(seed, Purpose::Noise, 0);
    observe_with_rng(h, pilots, noise, seed, &mut rng)
}

pub fn observe_with_rng<R: Rng + ?Sized>(
    h: &ChannelRealization,
    pilots: &PilotMatrix,
    noise: &NoiseModel,
    seed: u64,
    rng: &mut R,
) -> Result<Observation> {
    if h.domain != Domain::Spatial {
        return Err(Error::state("observations are taken from spatial-domain channels"));
    }
    if h.num_users() != pilots.num_users() {
        return Err(Error::invalid(format!(
            "channel has {} users but pilot block has {} rows",
            h.num_users(),
            pilots.num_users()
        )));
    }
    if !(noise.noise_variance.is_finite() && noise.noise_variance >= 0.0) {
        return Err(Error::invalid("noise variance must be finite and non-negative"));
    }
    let sigma = (noise.noise_variance / 2.0).sqrt();
    let mut received = &h.matrix * &pilots.matrix;
    for v in received.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(re * sigma, im * sigma);
    }
    Ok(Observation {
        matrix: one_bit_quantize(&received)?,
        noise_variance: noise.noise_variance,
        pilot_id: pilots.id(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, ArrayGeometry, PathCount};
    use proptest::prelude::*;

    fn in_alphabet(v: &Complex64) -> bool {
        v.re.abs() == 1.0 && v.im.abs() == 1.0
    }

    #[test]
    fn pilots_unit_modulus() {
        for scheme in [PilotScheme::QpskRandom, PilotScheme::ShiftedDft] {
            for (k, q) in [(8, 4), (4, 8), (5, 5), (1, 1)] {
                let p = generate_pilots(k, q, scheme, 3).unwrap();
                assert_eq!((p.num_users(), p.num_pilots()), (k, q));
                assert!(p.matrix.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn pilots_deterministic_in_seed() {
        let a = generate_pilots(8, 4, PilotScheme::QpskRandom, 17).unwrap();
        let b = generate_pilots(8, 4, PilotScheme::QpskRandom, 17).unwrap();
        let c = generate_pilots(8, 4, PilotScheme::QpskRandom, 18).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn square_dft_pilots_orthogonal() {
        for k in [1usize, 4, 8, 13] {
            let p = generate_pilots(k, k, PilotScheme::ShiftedDft, 5).unwrap();
            let gram = &p.matrix * p.matrix.adjoint();
            let target = DMatrix::<Complex64>::identity(k, k) * Complex64::new(k as f64, 0.0);
            assert!((gram - target).norm() < 1e-9);
        }
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("qpsk-random".parse::<PilotScheme>().unwrap(), PilotScheme::QpskRandom);
        assert_eq!("shifted-dft".parse::<PilotScheme>().unwrap(), PilotScheme::ShiftedDft);
        assert!(matches!("zadoff".parse::<PilotScheme>(), Err(Error::InvalidArgument(_))));
        assert!(generate_pilots(0, 4, PilotScheme::QpskRandom, 0).is_err());
    }

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_noise_variance(0.0).unwrap(), 1.0);
        assert!((snr_to_noise_variance(10.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_variance(-10.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(snr_to_noise_variance(f64::NAN).is_err());
    }

    #[test]
    fn quantizer_points() {
        let x = DMatrix::from_row_slice(1, 3, &[
            Complex64::new(0.3, -0.2),
            Complex64::new(0.0, 0.0),
            Complex64::new(-4.0, 1e-300),
        ]);
        let y = one_bit_quantize(&x).unwrap();
        assert_eq!(y[(0, 0)], Complex64::new(1.0, -1.0));
        assert_eq!(y[(0, 1)], Complex64::new(1.0, 1.0));
        assert_eq!(y[(0, 2)], Complex64::new(-1.0, 1.0));
        let bad = DMatrix::from_element(1, 1, Complex64::new(f64::NAN, 0.0));
        assert!(matches!(one_bit_quantize(&bad), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn quantizer_idempotent_and_closed(vals in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
            let x = DMatrix::from_iterator(vals.len(), 1, vals.iter().map(|&(a, b)| Complex64::new(a, b)));
            let once = one_bit_quantize(&x).unwrap();
            prop_assert!(once.iter().all(in_alphabet));
            prop_assert_eq!(one_bit_quantize(&once).unwrap(), once);
        }
    }

    #[test]
    fn noiseless_first_quadrant() {
        let g = ArrayGeometry::half_wavelength(4).unwrap();
        let mut h = draw_channel(&g, 2, PathCount::Fixed(1), 0, 0).unwrap();
        h.matrix = DMatrix::from_element(4, 2, Complex64::new(0.4, 0.3));
        let p = PilotMatrix {
            matrix: DMatrix::from_element(2, 3, Complex64::new(1.0, 0.0)),
            scheme: PilotScheme::QpskRandom,
            seed: 0,
        };
        let noise = NoiseModel { noise_variance: 0.0, snr_db: f64::INFINITY };
        let y = observe(&h, &p, &noise, 1).unwrap();
        assert!(y.matrix.iter().all(|v| *v == Complex64::new(1.0, 1.0)));
    }

    #[test]
    fn observation_alphabet_and_errors() {
        let g = ArrayGeometry::half_wavelength(16).unwrap();
        let p = generate_pilots(4, 3, PilotScheme::QpskRandom, 2).unwrap();
        let noise = NoiseModel::from_snr_db(0.0).unwrap();
        let mut count = 0;
        for i in 0..700 {
            let h = draw_channel(&g, 4, PathCount::Fixed(10), 9, i).unwrap();
            let y = observe(&h, &p, &noise, i).unwrap();
            assert_eq!((y.num_antennas(), y.num_pilots()), (16, 3));
            assert!(y.matrix.iter().all(in_alphabet));
            count += y.matrix.len();
        }
        assert!(count >= 10_000);

        let h = draw_channel(&g, 4, PathCount::Fixed(10), 9, 0).unwrap();
        let wrong = generate_pilots(5, 3, PilotScheme::QpskRandom, 2).unwrap();
        assert!(matches!(observe(&h, &wrong, &noise, 0), Err(Error::InvalidArgument(_))));
        let a = observe(&h, &p, &noise, 77).unwrap();
        let b = observe(&h, &p, &noise, 77).unwrap();
        assert_eq!(a, b);
    }
}
