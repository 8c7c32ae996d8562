#![allow(dead_code)]

use onebit_ce::config::ExperimentConfig;
use std::path::Path;

/// A configuration small enough to train both stages in seconds.
pub const TINY_TOML: &str = r#"
num_antennas = 8
num_users = 2
num_pilots = 2
num_paths = 3
num_samples = 120
test_samples_per_snr = 10
snr_grid_db = [0.0, 10.0]
generator_filters = 8
discriminator_filters = 8
ridnet_filters = 4
ridnet_eau_count = 1
cgan_epochs = 1
ridnet_epochs = 1
cgan_batch_size = 16
ridnet_batch_size = 16
pilot_sweep = [2]
antenna_sweep = [8]
timing_warmup = 1
timing_iterations = 3
"#;

pub fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(TINY_TOML).expect("tiny config is valid");
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Write the tiny config with the `key = value` lines of `extra` replacing
/// or adding keys.
pub fn write_tiny(dir: &Path, extra: &str) -> std::path::PathBuf {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let replaced: Vec<String> = extra.lines().map(key).filter(|k| !k.is_empty()).collect();
    let mut text: String = TINY_TOML
        .lines()
        .filter(|l| !replaced.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    text.push('\n');
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Kolmogorov-Smirnov statistic of `samples` against the CDF `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
