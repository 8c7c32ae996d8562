//! Saleh-Valenzuela mmWave channels for a uniform linear array, and the
//! DFT transform between the spatial and angular (beamspace) domains.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Which representation a channel matrix is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Spatial,
    Angular,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Spatial => f.write_str("spatial"),
            Domain::Angular => f.write_str("angular"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Domain::Spatial),
            "angular" => Ok(Domain::Angular),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// Base-station ULA. Only the ratio `spacing / wavelength` matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub num_antennas: usize,
    pub wavelength: f64,
    pub spacing: f64,
}

impl ArrayGeometry {
    /// Half-wavelength ULA with the wavelength normalized to 1.
    pub fn half_wavelength(num_antennas: usize) -> Result<Self> {
        Self::new(num_antennas, 1.0, 0.5)
    }

    pub fn new(num_antennas: usize, wavelength: f64, spacing: f64) -> Result<Self> {
        if num_antennas == 0 {
            return Err(Error::invalid("array needs at least one antenna"));
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::invalid(format!("antenna spacing must be positive, got {spacing}")));
        }
        Ok(Self {
            num_antennas,
            wavelength,
            spacing,
        })
    }

    /// Normalized spatial angle `d·sin(θ)/λ` for a physical azimuth.
    pub fn spatial_angle(&self, azimuth: f64) -> f64 {
        self.spacing * azimuth.sin() / self.wavelength
    }
}

/// Propagation paths of one user.
///
/// Elevation angles are drawn and kept alongside the azimuths but the ULA
/// response only depends on azimuth, so they never enter the synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<Complex64>,
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
}

impl PathSet {
    pub fn new(gains: Vec<Complex64>, azimuths: Vec<f64>, elevations: Vec<f64>) -> Result<Self> {
        let set = Self {
            gains,
            azimuths,
            elevations,
        };
        set.validate()?;
        Ok(set)
    }

    /// Paths with zero elevation, handy for hand-built channels.
    pub fn azimuth_only(gains: Vec<Complex64>, azimuths: Vec<f64>) -> Result<Self> {
        let elevations = vec![0.0; azimuths.len()];
        Self::new(gains, azimuths, elevations)
    }

    pub fn num_paths(&self) -> usize {
        self.gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gains.is_empty() {
            return Err(Error::invalid("a path set needs at least one path"));
        }
        if self.gains.len() != self.azimuths.len() || self.gains.len() != self.elevations.len() {
            return Err(Error::invalid(format!(
                "path set has {} gains, {} azimuths and {} elevations",
                self.gains.len(),
                self.azimuths.len(),
                self.elevations.len()
            )));
        }
        if let Some(bad) = self.azimuths.iter().find(|a| a.is_nan() || a.abs() >= FRAC_PI_2) {
            return Err(Error::invalid(format!("azimuth {bad} outside (-pi/2, pi/2)")));
        }
        if self.gains.iter().any(|g| !(g.re.is_finite() && g.im.is_finite())) {
            return Err(Error::invalid("non-finite path gain"));
        }
        Ok(())
    }
}

/// How many paths each user gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathCount {
    /// Every user has exactly this many paths.
    Fixed(usize),
    /// Each user draws its count uniformly from `1..=max`.
    UniformUpTo(usize),
}

impl PathCount {
    pub fn max_paths(&self) -> usize {
        match *self {
            PathCount::Fixed(n) | PathCount::UniformUpTo(n) => n,
        }
    }
}

/// A complex `N x K` channel matrix plus the paths that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub matrix: DMatrix<Complex64>,
    pub domain: Domain,
    pub per_user_paths: Vec<PathSet>,
    pub seed: u64,
}

impl ChannelRealization {
    pub fn num_antennas(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_users(&self) -> usize {
        self.matrix.ncols()
    }
}

/// ULA response for a normalized spatial angle `psi = d·sin(θ)/λ`.
pub fn steering_from_spatial(num_antennas: usize, psi: f64) -> DVector<Complex64> {
    let scale = 1.0 / (num_antennas as f64).sqrt();
    DVector::from_fn(num_antennas, |m, _| {
        Complex64::from_polar(scale, -2.0 * PI * psi * m as f64)
    })
}

/// Unit-norm ULA steering vector `(1/√N)·exp(-j2π d sin(θ) m / λ)`.
pub fn steering_vector(geometry: &ArrayGeometry, azimuth: f64) -> Result<DVector<Complex64>> {
    if !azimuth.is_finite() {
        return Err(Error::invalid(format!("azimuth must be finite, got {azimuth}")));
    }
    if !(azimuth > -FRAC_PI_2 && azimuth <= FRAC_PI_2) {
        return Err(Error::invalid(format!("azimuth {azimuth} outside (-pi/2, pi/2]")));
    }
    Ok(steering_from_spatial(
        geometry.num_antennas,
        geometry.spatial_angle(azimuth),
    ))
}

/// `sqrt(N/L) · Σ_l α_l · a(θ_l)` for one user.
pub fn generate_user_channel(geometry: &ArrayGeometry, paths: &PathSet) -> Result<DVector<Complex64>> {
    paths.validate()?;
    let n = geometry.num_antennas;
    let mut h = DVector::<Complex64>::zeros(n);
    for (gain, &azimuth) in paths.gains.iter().zip(&paths.azimuths) {
        let a = steering_vector(geometry, azimuth)?;
        h.axpy(*gain, &a, Complex64::new(1.0, 0.0));
    }
    let scale = (n as f64 / paths.num_paths() as f64).sqrt();
    Ok(h * Complex64::new(scale, 0.0))
}

/// Stack per-user channels into the spatial `N x K` matrix.
pub fn assemble_channel(
    geometry: &ArrayGeometry,
    all_paths: Vec<PathSet>,
    seed: u64,
) -> Result<ChannelRealization> {
    if all_paths.is_empty() {
        return Err(Error::invalid("channel needs at least one user"));
    }
    let mut matrix = DMatrix::<Complex64>::zeros(geometry.num_antennas, all_paths.len());
    for (k, paths) in all_paths.iter().enumerate() {
        let h = generate_user_channel(geometry, paths)?;
        matrix.set_column(k, &h);
    }
    Ok(ChannelRealization {
        matrix,
        domain: Domain::Spatial,
        per_user_paths: all_paths,
        seed,
    })
}

fn uniform_open_half_pi<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        if x > -FRAC_PI_2 {
            return x;
        }
    }
}

/// Draw `num_paths` paths: gains CN(0,1), azimuth and elevation U(-π/2, π/2).
pub fn sample_paths<R: Rng + ?Sized>(rng: &mut R, num_paths: usize) -> Result<PathSet> {
    if num_paths == 0 {
        return Err(Error::invalid("number of paths must be positive"));
    }
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut gains = Vec::with_capacity(num_paths);
    let mut azimuths = Vec::with_capacity(num_paths);
    let mut elevations = Vec::with_capacity(num_paths);
    for _ in 0..num_paths {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        gains.push(Complex64::new(re * half, im * half));
        azimuths.push(uniform_open_half_pi(rng));
        elevations.push(uniform_open_half_pi(rng));
    }
    Ok(PathSet {
        gains,
        azimuths,
        elevations,
    })
}

/// Draw the full channel of sample `index` from the stream of `seed`.
///
/// Each sample owns its own stream so any subset of samples can be
/// regenerated independently.
pub fn draw_channel(
    geometry: &ArrayGeometry,
    num_users: usize,
    paths: PathCount,
    seed: u64,
    index: u64,
) -> Result<ChannelRealization> {
    if num_users == 0 {
        return Err(Error::invalid("channel needs at least one user"));
    }
    if paths.max_paths() == 0 {
        return Err(Error::invalid("number of paths must be positive"));
    }
    let mut path_rng = rng::stream(seed, Purpose::Paths, index);
    let mut count_rng = rng::stream(seed, Purpose::NumPaths, index);
    let all = (0..num_users)
        .map(|_| {
            let l = match paths {
                PathCount::Fixed(l) => l,
                PathCount::UniformUpTo(max) => count_rng.gen_range(1..=max),
            };
            sample_paths(&mut path_rng, l)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_channel(geometry, all, seed)
}

/// Unitary DFT matrix whose row `n` is `a(ψ_n)^H` on the angular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularTransform {
    pub matrix: DMatrix<Complex64>,
    pub grid: Vec<f64>,
}

impl AngularTransform {
    pub fn size(&self) -> usize {
        self.grid.len()
    }
}

/// Grid `ψ_n = (1/N)(n - (N+1)/2)` for one-based `n = 1..N`, stored zero-based.
pub fn angular_grid(num_antennas: usize) -> Vec<f64> {
    let n = num_antennas as f64;
    (0..num_antennas)
        .map(|i| ((i + 1) as f64 - (n + 1.0) / 2.0) / n)
        .collect()
}

pub fn dft_matrix(num_antennas: usize) -> Result<AngularTransform> {
    if num_antennas == 0 {
        return Err(Error::invalid("DFT size must be positive"));
    }
    let grid = angular_grid(num_antennas);
    let mut matrix = DMatrix::<Complex64>::zeros(num_antennas, num_antennas);
    for (row, &psi) in grid.iter().enumerate() {
        let a = steering_from_spatial(num_antennas, psi);
        for col in 0..num_antennas {
            matrix[(row, col)] = a[col].conj();
        }
    }
    Ok(AngularTransform { matrix, grid })
}

fn check_transform(h: &ChannelRealization, t: &AngularTransform) -> Result<()> {
    if h.num_antennas() != t.size() {
        return Err(Error::invalid(format!(
            "channel has {} antennas but transform is {}x{}",
            h.num_antennas(),
            t.size(),
            t.size()
        )));
    }
    Ok(())
}

/// `H* = U·H`.
pub fn to_angular(h: &ChannelRealization, t: &AngularTransform) -> Result<ChannelRealization> {
    if h.domain != Domain::Spatial {
        return Err(Error::state("to_angular expects a spatial-domain channel"));
    }
    check_transform(h, t)?;
    Ok(ChannelRealization {
        matrix: &t.matrix * &h.matrix,
        domain: Domain::Angular,
        per_user_paths: h.per_user_paths.clone(),
        seed: h.seed,
    })
}

/// `H = U^H·H*`.
pub fn from_angular(h: &ChannelRealization, t: &AngularTransform) -> Result<ChannelRealization> {
    if h.domain != Domain::Angular {
        return Err(Error::state("from_angular expects an angular-domain channel"));
    }
    check_transform(h, t)?;
    Ok(ChannelRealization {
        matrix: t.matrix.adjoint() * &h.matrix,
        domain: Domain::Spatial,
        per_user_paths: h.per_user_paths.clone(),
        seed: h.seed,
    })
}
