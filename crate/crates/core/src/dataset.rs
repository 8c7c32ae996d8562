//! Training and test corpora of `(H, Y, P)` triples.
//!
//! On disk a corpus is a directory holding `manifest.json` and one raw
//! little-endian `f32` file per array. The manifest records each array's
//! shape and CRC-32 so that loading detects truncation and corruption.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cgan::build_condition_input;
use crate::channel::{draw_channel, ArrayGeometry, ChannelRealization};
use crate::config::{ConditionMode, ExperimentConfig, SnrPolicy};
use crate::error::{Error, Result};
use crate::measurement::{
    generate_pilots_indexed, observe_with_rng, NoiseModel, Observation, PilotMatrix, PilotScheme,
};
use crate::rng::{self, Purpose};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Percentile of `|component|` used as the normalization scale.
pub const NORMALIZATION_PERCENTILE: f64 = 99.9;
/// Minimum number of scalar components for a meaningful percentile.
pub const MIN_NORMALIZATION_VALUES: usize = 1000;

/// Which corpus of an experiment a dataset is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub crc32: u32,
}

impl ArrayEntry {
    pub fn num_values(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_bytes(&self) -> u64 {
        self.num_values() as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub role: CorpusRole,
    pub num_antennas: usize,
    pub num_users: usize,
    pub num_pilots: usize,
    pub num_paths: usize,
    pub random_path_count: bool,
    pub pilot_scheme: PilotScheme,
    pub pilot_seed: u64,
    pub redraw_pilots: bool,
    /// Identifier of the shared pilot block (empty when pilots are redrawn).
    pub pilot_id: String,
    pub snr_grid_db: Vec<f64>,
    pub snr_policy: SnrPolicy,
    /// Seed of the channel and noise streams.
    pub seed: u64,
    pub num_samples: usize,
    pub validation_fraction: f64,
    pub normalization_scale: f64,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl DatasetManifest {
    /// Read and validate only the manifest; no array data is touched.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        manifest.validate(&path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if !(self.normalization_scale.is_finite() && self.normalization_scale > 0.0) {
            return Err(bad("normalization scale must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(bad("validation fraction must lie in (0, 1)"));
        }
        let expect = |name: &str, shape: Vec<usize>| -> Result<()> {
            match self.arrays.get(name) {
                Some(e) if e.shape == shape && e.dtype == "f32" => Ok(()),
                Some(e) => Err(bad(&format!("array `{name}` has shape {:?}, expected {shape:?}", e.shape))),
                None => Err(bad(&format!("array `{name}` missing from manifest"))),
            }
        };
        let (m, n, k, q) = (self.num_samples, self.num_antennas, self.num_users, self.num_pilots);
        expect("channel", vec![m, 2, n, k])?;
        expect("observation", vec![m, 2, n, q])?;
        expect("snr_db", vec![m])?;
        expect("pilots", vec![if self.redraw_pilots { m } else { 1 }, 2, k, q])?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::half_wavelength(self.num_antennas)
    }

    /// SHA-256 of the manifest file bytes as written by [`save_dataset`].
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(manifest_bytes(self)))
    }
}

fn manifest_bytes(m: &DatasetManifest) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest always serializes");
    text.push('\n');
    text.into_bytes()
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub channel: ChannelRealization,
    pub observation: Observation,
    pub pilots: PilotMatrix,
    pub snr_db: f64,
    pub sample_index: usize,
}

/// Everything that determines the samples of one corpus.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub role: CorpusRole,
    pub geometry: ArrayGeometry,
    pub num_users: usize,
    pub num_pilots: usize,
    pub path_count: crate::channel::PathCount,
    pub pilot_scheme: PilotScheme,
    pub pilot_seed: u64,
    pub redraw_pilots: bool,
    pub snr_grid_db: Vec<f64>,
    pub snr_policy: SnrPolicy,
    pub seed: u64,
    pub num_samples: usize,
}

impl CorpusSpec {
    pub fn from_config(cfg: &ExperimentConfig, role: CorpusRole) -> Result<Self> {
        let (seed, num_samples, snr_policy) = match role {
            CorpusRole::Train => (cfg.master_seed, cfg.num_samples, cfg.snr_policy),
            // The test corpus is always exactly balanced across the grid.
            CorpusRole::Test => (cfg.eval_seed, cfg.test_samples(), SnrPolicy::RoundRobin),
        };
        Ok(Self {
            role,
            geometry: ArrayGeometry::half_wavelength(cfg.num_antennas)?,
            num_users: cfg.num_users,
            num_pilots: cfg.num_pilots,
            path_count: cfg.path_count(),
            pilot_scheme: cfg.pilot_scheme,
            pilot_seed: cfg.master_seed,
            redraw_pilots: cfg.redraw_pilots,
            snr_grid_db: cfg.snr_grid_db.clone(),
            snr_policy,
            seed,
            num_samples,
        })
    }

    /// The experiment-wide pilot block (block 0 of the pilot stream).
    pub fn shared_pilots(&self) -> Result<PilotMatrix> {
        generate_pilots_indexed(self.num_users, self.num_pilots, self.pilot_scheme, self.pilot_seed, 0)
    }

    pub fn snr_of(&self, index: usize) -> f64 {
        let grid = &self.snr_grid_db;
        match self.snr_policy {
            SnrPolicy::RoundRobin => grid[index % grid.len()],
            SnrPolicy::Uniform => {
                let mut r = rng::stream(self.seed, Purpose::SnrDraw, index as u64);
                grid[r.gen_range(0..grid.len())]
            }
        }
    }

    /// Generate sample `index`; depends on nothing but the spec and index.
    pub fn sample(&self, index: usize, shared: &PilotMatrix) -> Result<SampleRecord> {
        let pilots = if self.redraw_pilots {
            // Offset keeps per-sample blocks apart from the shared block 0,
            // and the corpus seed keeps train and test blocks apart.
            let stream = self.seed ^ self.pilot_seed.rotate_left(17);
            generate_pilots_indexed(self.num_users, self.num_pilots, self.pilot_scheme, stream, index as u64 + 1)?
        } else {
            shared.clone()
        };
        let channel = draw_channel(&self.geometry, self.num_users, self.path_count, self.seed, index as u64)?;
        let snr_db = self.snr_of(index);
        let noise = NoiseModel::from_snr_db(snr_db)?;
        let mut noise_rng = rng::stream(self.seed, Purpose::Noise, index as u64);
        let observation = observe_with_rng(&channel, &pilots, &noise, self.seed, &mut noise_rng)?;
        Ok(SampleRecord {
            channel,
            observation,
            pilots,
            snr_db,
            sample_index: index,
        })
    }
}

/// A corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub arrays: BTreeMap<String, Vec<f32>>,
}

fn push_complex_planes(out: &mut Vec<f32>, m: &DMatrix<Complex64>) {
    // Row-major planes: [re][row][col] then [im][row][col].
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)].re as f32);
        }
    }
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)].im as f32);
        }
    }
}

fn read_complex_planes(data: &[f32], rows: usize, cols: usize) -> DMatrix<Complex64> {
    let plane = rows * cols;
    DMatrix::from_fn(rows, cols, |r, c| {
        Complex64::new(data[r * cols + c] as f64, data[plane + r * cols + c] as f64)
    })
}

impl Dataset {
    fn array(&self, name: &str) -> &[f32] {
        &self.arrays[name]
    }

    pub fn len(&self) -> usize {
        self.manifest.num_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored channel of sample `i` (rounded to `f32`).
    pub fn channel(&self, i: usize) -> DMatrix<Complex64> {
        let (n, k) = (self.manifest.num_antennas, self.manifest.num_users);
        let len = 2 * n * k;
        read_complex_planes(&self.array("channel")[i * len..(i + 1) * len], n, k)
    }

    pub fn observation(&self, i: usize) -> DMatrix<Complex64> {
        let (n, q) = (self.manifest.num_antennas, self.manifest.num_pilots);
        let len = 2 * n * q;
        read_complex_planes(&self.array("observation")[i * len..(i + 1) * len], n, q)
    }

    pub fn pilots(&self, i: usize) -> DMatrix<Complex64> {
        let (k, q) = (self.manifest.num_users, self.manifest.num_pilots);
        let len = 2 * k * q;
        let j = if self.manifest.redraw_pilots { i } else { 0 };
        read_complex_planes(&self.array("pilots")[j * len..(j + 1) * len], k, q)
    }

    pub fn snr_db(&self, i: usize) -> f64 {
        self.array("snr_db")[i] as f64
    }

    /// Indices of the samples at `snr_db`.
    pub fn indices_at_snr(&self, snr_db: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.snr_db(i) == snr_db as f32 as f64).collect()
    }

    /// Generator input and target planes (`2 x N x K` each) of sample `i`.
    pub fn pack(&self, i: usize, mode: ConditionMode) -> Result<(Vec<f32>, Vec<f32>)> {
        let s = self.manifest.normalization_scale;
        let input = build_condition_input(&self.observation(i), &self.pilots(i), s, mode)?;
        let target = pack_channel(&self.channel(i), s, true);
        Ok((input, target))
    }
}

/// Build a corpus in memory. The normalization scale is computed from the
/// corpus itself unless `scale` is given (test corpora reuse the training
/// scale).
pub fn generate_dataset(spec: &CorpusSpec, validation_fraction: f64, scale: Option<f64>) -> Result<Dataset> {
    let (n, k, q, m) = (spec.geometry.num_antennas, spec.num_users, spec.num_pilots, spec.num_samples);
    if m == 0 {
        return Err(Error::invalid("corpus needs at least one sample"));
    }
    let shared = spec.shared_pilots()?;
    let mut channel = Vec::with_capacity(m * 2 * n * k);
    let mut observation = Vec::with_capacity(m * 2 * n * q);
    let mut snr = Vec::with_capacity(m);
    let mut pilots = Vec::new();
    if !spec.redraw_pilots {
        push_complex_planes(&mut pilots, &shared.matrix);
    }
    for i in 0..m {
        let rec = spec.sample(i, &shared)?;
        push_complex_planes(&mut channel, &rec.channel.matrix);
        push_complex_planes(&mut observation, &rec.observation.matrix);
        snr.push(rec.snr_db as f32);
        if spec.redraw_pilots {
            push_complex_planes(&mut pilots, &rec.pilots.matrix);
        }
    }
    let normalization_scale = match scale {
        Some(s) => s,
        None => compute_normalization(channel.iter().map(|&v| v as f64))?,
    };
    let entry = |name: &str, shape: Vec<usize>| {
        (
            name.to_string(),
            ArrayEntry {
                dtype: "f32".into(),
                shape,
                file: format!("{name}.bin"),
                crc32: 0,
            },
        )
    };
    let arrays_meta: BTreeMap<_, _> = [
        entry("channel", vec![m, 2, n, k]),
        entry("observation", vec![m, 2, n, q]),
        entry("snr_db", vec![m]),
        entry("pilots", vec![if spec.redraw_pilots { m } else { 1 }, 2, k, q]),
    ]
    .into_iter()
    .collect();
    let mut arrays = BTreeMap::new();
    arrays.insert("channel".to_string(), channel);
    arrays.insert("observation".to_string(), observation);
    arrays.insert("snr_db".to_string(), snr);
    arrays.insert("pilots".to_string(), pilots);
    let mut manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        role: spec.role,
        num_antennas: n,
        num_users: k,
        num_pilots: q,
        num_paths: spec.path_count.max_paths(),
        random_path_count: matches!(spec.path_count, crate::channel::PathCount::UniformUpTo(_)),
        pilot_scheme: spec.pilot_scheme,
        pilot_seed: spec.pilot_seed,
        redraw_pilots: spec.redraw_pilots,
        pilot_id: if spec.redraw_pilots { String::new() } else { shared.id() },
        snr_grid_db: spec.snr_grid_db.clone(),
        snr_policy: spec.snr_policy,
        seed: spec.seed,
        num_samples: m,
        validation_fraction,
        normalization_scale,
        arrays: arrays_meta,
    };
    for (name, entry) in manifest.arrays.iter_mut() {
        entry.crc32 = crc_of(&arrays[name]);
    }
    Ok(Dataset { manifest, arrays })
}

fn to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn crc_of(values: &[f32]) -> u32 {
    crc32fast::hash(&to_le_bytes(values))
}

/// Scale `s` such that at most 0.1% of `|component|` values exceed it.
pub fn compute_normalization(values: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut mags: Vec<f64> = values.into_iter().map(f64::abs).collect();
    if mags.is_empty() {
        return Err(Error::invalid("cannot normalize an empty stream"));
    }
    if mags.len() < MIN_NORMALIZATION_VALUES {
        return Err(Error::invalid(format!(
            "normalization needs at least {MIN_NORMALIZATION_VALUES} components, got {}",
            mags.len()
        )));
    }
    if mags.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite channel component"));
    }
    // Nearest-rank percentile.
    let rank = ((NORMALIZATION_PERCENTILE / 100.0) * mags.len() as f64).ceil() as usize;
    let idx = rank.clamp(1, mags.len()) - 1;
    let (_, s, _) = mags.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    let s = *s;
    if s > 0.0 {
        Ok(s)
    } else {
        Err(Error::invalid("degenerate stream: percentile magnitude is zero"))
    }
}

/// `(Re H / s, Im H / s)` as row-major `2 x N x K` planes, optionally
/// clipped to `[-1, 1]`.
pub fn pack_channel(h: &DMatrix<Complex64>, scale: f64, clip: bool) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * h.len());
    push_complex_planes(&mut out, &h.map(|v| v / scale));
    if clip {
        out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    out
}

/// Inverse of [`pack_channel`] (exact up to clipping and `f32` rounding).
pub fn unpack_channel(planes: &[f32], rows: usize, cols: usize, scale: f64) -> DMatrix<Complex64> {
    read_complex_planes(planes, rows, cols).map(|v| v * scale)
}

/// Generator input and target planes for one record under `manifest`.
pub fn pack_tensors(
    record: &SampleRecord,
    manifest: &DatasetManifest,
    mode: ConditionMode,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = manifest.normalization_scale;
    let input = build_condition_input(&record.observation.matrix, &record.pilots.matrix, s, mode)?;
    Ok((input, pack_channel(&record.channel.matrix, s, true)))
}

/// Deterministic shuffled split into sorted `(train, validation)` indices.
pub fn split_train_val(num_samples: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("validation fraction must lie strictly between 0 and 1"));
    }
    let (_, val) = crate::config::split_sizes(num_samples, fraction);
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let mut valid = order[..val].to_vec();
    let mut train = order[val..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((train, valid))
}

/// Write `data` into `dir`, replacing any previous corpus there. Files are
/// staged in a sibling directory and moved into place only once complete,
/// so a failed write leaves no partial corpus behind.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    write_atomically(dir, |staging| {
        for (name, entry) in &data.manifest.arrays {
            let path = staging.join(&entry.file);
            fs::write(&path, to_le_bytes(&data.arrays[name])).map_err(|e| Error::io(&path, e))?;
        }
        let path = staging.join(MANIFEST_FILE);
        fs::write(&path, manifest_bytes(&data.manifest)).map_err(|e| Error::io(&path, e))
    })
}

pub(crate) fn write_atomically(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let result = write(&staging).and_then(|()| {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "dataset".into());
    name.push(".partial");
    dir.with_file_name(name)
}

pub(crate) fn read_f32_file(path: &Path, name: &str, expected_bytes: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected_bytes {
        return Err(Error::Truncated {
            array: name.to_string(),
            expected: expected_bytes,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub(crate) fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::open(dir)?;
    let mut arrays = BTreeMap::new();
    for (name, entry) in &manifest.arrays {
        let bytes = read_f32_file(&dir.join(&entry.file), name, entry.num_bytes())?;
        let actual = crc32fast::hash(&bytes);
        if actual != entry.crc32 {
            return Err(Error::Checksum {
                array: name.clone(),
                expected: entry.crc32,
                actual,
            });
        }
        arrays.insert(name.clone(), bytes_to_f32(&bytes));
    }
    Ok(Dataset { manifest, arrays })
}

/// Directory names used for the corpora of an experiment.
pub fn corpus_dir(root: &Path, role: CorpusRole) -> PathBuf {
    root.join(match role {
        CorpusRole::Train => "train",
        CorpusRole::Test => "test",
    })
}

/// Generate and save both corpora of `cfg` under `root`; returns the
/// manifests `(train, test)`.
pub fn generate_experiment_data(cfg: &ExperimentConfig, root: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let train = generate_dataset(&CorpusSpec::from_config(cfg, CorpusRole::Train)?, cfg.validation_fraction, None)?;
    let scale = train.manifest.normalization_scale;
    save_dataset(&train, &corpus_dir(root, CorpusRole::Train))?;
    let test = generate_dataset(
        &CorpusSpec::from_config(cfg, CorpusRole::Test)?,
        cfg.validation_fraction,
        Some(scale),
    )?;
    save_dataset(&test, &corpus_dir(root, CorpusRole::Test))?;
    Ok((train.manifest, test.manifest))
}
