//! Desk-scale acceptance criteria. Each check recomputes its verdict from
//! raw outputs (report rows, model outputs, files on disk) rather than
//! trusting the trend checks the pipeline prints for itself.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::{Duration, Instant};

use onebit_ce::cgan::EstimationResult;
use onebit_ce::channel::{dft_matrix, draw_channel, steering_from_spatial, ArrayGeometry, Domain, PathCount};
use onebit_ce::config::ExperimentConfig;
use onebit_ce::eval::{nmse_db, Report, TimingReport, NMSE_FLOOR_DB};
use onebit_ce::measurement::one_bit_quantize;
use onebit_ce::nn::Parameters;
use onebit_ce::ridnet::{denoise, RidnetModel, RidnetTrainConfig};

/// Outcome of one criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{}] {tag} {}: {}", self.id, self.name, self.detail)
    }
}

fn verdict(id: u8, name: &'static str, passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        id,
        name,
        passed,
        detail: detail.into(),
    }
}

/// Run `f`, turning an error into a failed verdict.
pub fn guarded(id: u8, name: &'static str, f: impl FnOnce() -> Result<Verdict, String>) -> Verdict {
    f().unwrap_or_else(|e| verdict(id, name, false, format!("error: {e}")))
}

pub const GAIN_SNRS: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
pub const RATE_SNRS: [f64; 3] = [0.0, 10.0, 20.0];

// ---------------------------------------------------------------- 1 ----

pub fn model_invariants() -> Verdict {
    let name = "model-layer invariants";
    let start = Instant::now();
    let mut failures = Vec::new();

    let n = 32;
    let u = dft_matrix(n).unwrap().matrix;
    let dev = (&u * u.adjoint() - DMatrix::<Complex64>::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if dev >= 1e-6 {
        failures.push(format!("DFT unitarity deviation {dev:e}"));
    }

    let steer = (0..1000)
        .map(|i| (steering_from_spatial(n, -0.5 + i as f64 / 1000.0).norm() - 1.0).abs())
        .fold(0.0, f64::max);
    if steer > 1e-9 {
        failures.push(format!("steering norm deviation {steer:e}"));
    }

    let g = ArrayGeometry::half_wavelength(n).unwrap();
    let draws = 10_000u64;
    let power: f64 = (0..draws)
        .map(|i| draw_channel(&g, 1, PathCount::Fixed(10), 0xacce, i).unwrap().matrix.norm_squared())
        .sum::<f64>()
        / draws as f64;
    let ratio = power / n as f64;
    if !(0.95..=1.05).contains(&ratio) {
        failures.push(format!("mean channel power {power:.3} = {ratio:.4} N"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DMatrix::from_fn(n, 8, |_, _| Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)));
    let y = one_bit_quantize(&x).unwrap();
    if !y.iter().all(|v| v.re.abs() == 1.0 && v.im.abs() == 1.0) {
        failures.push("quantizer output leaves {±1±j}".into());
    }
    if one_bit_quantize(&y).unwrap() != y {
        failures.push("quantizer is not idempotent".into());
    }

    let h = vec![x.clone()];
    let zero = nmse_db(&[x.map(|_| Complex64::new(0.0, 0.0))], &h).unwrap();
    let double = nmse_db(&[&x * Complex64::new(2.0, 0.0)], &h).unwrap();
    let exact = nmse_db(&h, &h).unwrap();
    if zero.abs() > 1e-9 || double.abs() > 1e-9 || exact != NMSE_FLOOR_DB {
        failures.push(format!("NMSE trivial values {zero} / {double} / {exact}"));
    }

    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(60) {
        failures.push(format!("runtime {:.1} s", elapsed.as_secs_f64()));
    }
    let detail = if failures.is_empty() {
        format!(
            "DFT dev {dev:.1e}, steering dev {steer:.1e}, power {ratio:.4} N over {draws} draws, quantizer closed, NMSE 0/0/floor dB, {:.2} s",
            elapsed.as_secs_f64()
        )
    } else {
        failures.join("; ")
    };
    verdict(1, name, failures.is_empty(), detail)
}

// ---------------------------------------------------------------- 2 ----

pub fn residual_identity(cfg: &ExperimentConfig) -> Verdict {
    let name = "residual identity";
    guarded(2, name, || {
        let (n, k) = (cfg.num_antennas, cfg.num_users);
        let mut model = RidnetModel::new(n, k, Domain::Spatial, 1.0, &RidnetTrainConfig::from(cfg)).map_err(|e| e.to_string())?;
        let tail_zero = model
            .named_params()
            .iter()
            .filter(|(name, _)| name.starts_with("tail"))
            .all(|(_, p)| p.value.iter().all(|&w| w == 0.0));
        if !tail_zero {
            return Ok(verdict(2, name, false, "reconstruction layer is not zero-initialized"));
        }
        // Run the network for real instead of the untrained pass-through.
        model.trained = true;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mismatches = 0;
        for _ in 0..100 {
            let coarse = DMatrix::from_fn(n, k, |_, _| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
            let r = EstimationResult {
                coarse: coarse.clone(),
                refined: None,
                cgan_latency: Duration::ZERO,
                ridnet_latency: None,
            };
            let out = denoise(&r, &model, Domain::Spatial).map_err(|e| e.to_string())?;
            let refined = out.refined.ok_or("no refined estimate")?;
            let same = refined
                .iter()
                .zip(coarse.iter())
                .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits());
            mismatches += (!same) as usize;
        }
        Ok(verdict(2, name, mismatches == 0, format!("{} of 100 random inputs returned bit-identical", 100 - mismatches)))
    })
}

// ----------------------------------------------------------- 3 .. 6 ----

fn mean_over(report: &Report, est: &str, q: usize, snrs: &[f64]) -> Result<f64, String> {
    let v: Option<Vec<f64>> = snrs.iter().map(|&s| report.value(est, q, "nmse_db", s)).collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64).ok_or_else(|| format!("{est} Q={q} lacks an SNR in {snrs:?}"))
}

pub fn two_stage_gain(report: &Report, q: usize) -> Verdict {
    guarded(3, "two-stage gain", || {
        let c = mean_over(report, "cGAN", q, &GAIN_SNRS)?;
        let r = mean_over(report, "cGAN-RIDNet", q, &GAIN_SNRS)?;
        Ok(verdict(
            3,
            "two-stage gain",
            r <= c - 0.5,
            format!("mean NMSE over 0-15 dB: cGAN {c:.3} dB, cGAN-RIDNet {r:.3} dB, gain {:.3} dB (need >= 0.5)", c - r),
        ))
    })
}

pub fn angular_gain(report: &Report, q: usize) -> Verdict {
    guarded(4, "angular-domain gain", || {
        let s = mean_over(report, "cGAN-RIDNet", q, &GAIN_SNRS)?;
        let a = mean_over(report, "cGAN-RIDNet*", q, &GAIN_SNRS)?;
        Ok(verdict(
            4,
            "angular-domain gain",
            a <= s + 0.2,
            format!("mean NMSE: spatial {s:.3} dB, angular {a:.3} dB (need angular <= spatial + 0.2)"),
        ))
    })
}

pub fn pilot_monotonicity(report: &Report, snr_grid: &[f64], q_low: usize, q_high: usize) -> Verdict {
    guarded(5, "pilot monotonicity", || {
        let mut parts = Vec::new();
        let mut ok = true;
        for &s in snr_grid.iter().filter(|&&s| s >= 0.0) {
            let hi = report.value("cGAN-RIDNet", q_high, "nmse_db", s).ok_or(format!("Q={q_high} lacks {s} dB"))?;
            let lo = report.value("cGAN-RIDNet", q_low, "nmse_db", s).ok_or(format!("Q={q_low} lacks {s} dB"))?;
            ok &= hi <= lo;
            parts.push(format!("{s}: {hi:.2}{}{lo:.2}", if hi <= lo { "<=" } else { ">" }));
        }
        Ok(verdict(5, "pilot monotonicity", ok, format!("NMSE(Q={q_high}) vs NMSE(Q={q_low}) [dB] {}", parts.join(", "))))
    })
}

pub fn snr_monotonicity(report: &Report) -> Verdict {
    let mut worst = (f64::NEG_INFINITY, String::new());
    let mut series = 0;
    let mut keys: Vec<(String, usize, usize)> = report
        .rows
        .iter()
        .filter(|r| r.metric == "nmse_db")
        .map(|r| (r.estimator.clone(), r.num_pilots, r.num_antennas))
        .collect();
    keys.sort();
    keys.dedup();
    for (est, q, n) in &keys {
        let mut pts: Vec<(f64, f64)> = report
            .rows
            .iter()
            .filter(|r| r.metric == "nmse_db" && &r.estimator == est && r.num_pilots == *q && r.num_antennas == *n)
            .map(|r| (r.snr_db, r.value))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        series += 1;
        for w in pts.windows(2) {
            let rise = w[1].1 - w[0].1;
            if rise > worst.0 {
                worst = (rise, format!("{est} Q={q} {}->{} dB", w[0].0, w[1].0));
            }
        }
    }
    let passed = series > 0 && worst.0 <= 0.5;
    verdict(
        6,
        "SNR monotonicity",
        passed,
        format!("{series} series; largest step-to-step NMSE change {:+.3} dB at {} (tolerance 0.5)", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- 7 ----

pub fn timing_ratio(t: &TimingReport) -> Verdict {
    let ratio = t.ridnet.mean_ms / t.cgan.mean_ms;
    let gap = (t.combined.mean_ms - (t.cgan.mean_ms + t.ridnet.mean_ms)).abs() / t.combined.mean_ms;
    let enough = t.iterations >= 100 && t.batch_size == 1;
    verdict(
        7,
        "timing ratio",
        enough && ratio < 0.10 && gap < 0.05,
        format!(
            "cGAN {:.3} ms, RIDNet {:.3} ms, combined {:.3} ms over {} iterations (batch {}): ratio {ratio:.3} (need < 0.10), additivity gap {:.2}% (need < 5%)",
            t.cgan.mean_ms,
            t.ridnet.mean_ms,
            t.combined.mean_ms,
            t.iterations,
            t.batch_size,
            100.0 * gap
        ),
    )
}

// ---------------------------------------------------------------- 8 ----

pub fn sum_rate_ordering(report: &Report, q: usize) -> Verdict {
    guarded(8, "sum-rate ordering", || {
        let mut ok = true;
        let mut parts = Vec::new();
        for s in RATE_SNRS {
            let row = |e: &str| {
                report
                    .rows
                    .iter()
                    .find(|r| r.estimator == e && r.num_pilots == q && r.metric == "sum_rate_bps_hz" && r.snr_db == s)
                    .ok_or(format!("{e} lacks {s} dB"))
            };
            let (p, r, c) = (row("perfect-CSI")?, row("cGAN-RIDNet")?, row("cGAN")?);
            let count = p.sample_count.min(r.sample_count).min(c.sample_count);
            ok &= p.value >= r.value && r.value >= c.value && count >= 200;
            parts.push(format!("{s} dB: {:.3} >= {:.3} >= {:.3} (n={count})", p.value, r.value, c.value));
        }
        Ok(verdict(8, "sum-rate ordering", ok, format!("perfect-CSI >= cGAN-RIDNet >= cGAN [bit/s/Hz] {}", parts.join("; "))))
    })
}

// ---------------------------------------------------------------- 9 ----

/// Bytes of the dataset manifests and the NMSE report of an output dir.
pub fn reproducibility_artifacts(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    ["data/train/manifest.json", "data/test/manifest.json", "reports/nmse.csv"]
        .iter()
        .map(|rel| std::fs::read(dir.join(rel)).map(|b| (rel.to_string(), b)).map_err(|e| format!("{rel}: {e}")))
        .collect()
}

pub fn compare_artifacts(first: &[(String, Vec<u8>)], second: &[(String, Vec<u8>)]) -> Verdict {
    let differing: Vec<&str> = first
        .iter()
        .zip(second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
    verdict(
        9,
        "reproducibility",
        differing.is_empty() && first.len() == second.len(),
        if differing.is_empty() {
            format!("{} files ({bytes} bytes) byte-identical across reruns", first.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}
