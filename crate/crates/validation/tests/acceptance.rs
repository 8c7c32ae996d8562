//! Desk-scale acceptance run: one PASS/FAIL line per criterion.
//!
//! Trained artifacts are cached under `target/acceptance` (override with
//! `ONEBIT_ACCEPTANCE_DIR`), keyed by configuration hashes; a cold run
//! trains two cells (Q = 2 and Q = 4) and takes on the order of an hour on
//! a single CPU core.

use std::path::PathBuf;
use std::process::ExitCode;

use onebit_ce::config::ExperimentConfig;
use onebit_ce::pipeline::{cell_config, reproduce_fig3, reproduce_fig5, reproduce_table1};
use onebit_ce_validation::*;

fn root() -> PathBuf {
    std::env::var_os("ONEBIT_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn failed(ids: &[u8], names: &[&'static str], e: &dyn std::fmt::Display) -> Vec<Verdict> {
    ids.iter()
        .zip(names)
        .map(|(&id, &name)| guarded(id, name, || Err(e.to_string())))
        .collect()
}

fn rerun(cfg_path: &str, out: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    for cmd in [&["gen-data"][..], &["eval", "nmse"]] {
        let mut args = vec!["onebit-ce", "--config", cfg_path, "--out", out, "--strict-determinism"];
        args.extend_from_slice(cmd);
        let code = onebit_ce::cli::run(args);
        if code != 0 {
            return Err(format!("{cmd:?} exited with {code}"));
        }
    }
    reproducibility_artifacts(out.as_ref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("onebit_ce=info")).init();
    let root = root();
    let base = ExperimentConfig {
        output_dir: root.clone(),
        ..ExperimentConfig::desk()
    };
    let (q_low, q_high) = (2, base.num_pilots);
    assert!(base.pilot_sweep.contains(&q_low) && base.pilot_sweep.contains(&q_high));

    let mut verdicts = vec![model_invariants(), residual_identity(&base)];

    match reproduce_fig3(&base) {
        Ok(t) => verdicts.extend([
            two_stage_gain(&t.report, q_high),
            angular_gain(&t.report, q_high),
            pilot_monotonicity(&t.report, &base.snr_grid_db, q_low, q_high),
            snr_monotonicity(&t.report),
        ]),
        Err(e) => verdicts.extend(failed(
            &[3, 4, 5, 6],
            &["two-stage gain", "angular-domain gain", "pilot monotonicity", "SNR monotonicity"],
            &e,
        )),
    }
    match reproduce_table1(&base) {
        Ok(t) => verdicts.push(timing_ratio(t.timing.as_ref().expect("table1 carries timings"))),
        Err(e) => verdicts.extend(failed(&[7], &["timing ratio"], &e)),
    }
    match reproduce_fig5(&base) {
        Ok(t) => verdicts.push(sum_rate_ordering(&t.report, q_high)),
        Err(e) => verdicts.extend(failed(&[8], &["sum-rate ordering"], &e)),
    }

    let cell = cell_config(&base, &root, base.num_antennas, q_high).output_dir;
    let cfg_path = cell.join("config.toml");
    verdicts.push(guarded(9, "reproducibility", || {
        let (c, o) = (cfg_path.to_string_lossy().into_owned(), cell.to_string_lossy().into_owned());
        let first = rerun(&c, &o)?;
        let second = rerun(&c, &o)?;
        Ok(compare_artifacts(&first, &second))
    }));

    println!();
    let mut summary = String::new();
    for v in &verdicts {
        let line = format!("ACCEPTANCE {v}");
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    let passed = verdicts.iter().filter(|v| v.passed).count();
    println!("acceptance: {passed}/{} criteria passed", verdicts.len());
    let _ = std::fs::write(root.join("acceptance.txt"), summary);
    if passed == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
