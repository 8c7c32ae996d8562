mod common;

use onebit_ce::cgan::{load_cgan, TRAIN_LOG_FILE};
use onebit_ce::channel::Domain;
use onebit_ce::dataset::split_train_val;
use onebit_ce::eval::{nmse_db, CganEstimator, ChannelEstimator, TwoStageEstimator};
use onebit_ce::pipeline::{self, Layout};
use onebit_ce::ridnet::load_ridnet;
use onebit_ce::Error;
use std::fs;

fn log_epochs(path: &std::path::Path) -> Vec<usize> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn reloaded_generator_reproduces_logged_validation_nmse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let layout = Layout::new(tmp.path());
    let (train, _) = pipeline::ensure_data(&cfg, &layout).unwrap();
    let trained = pipeline::train_cgan_stage(&cfg, &layout, &train, false).unwrap();
    let (manifest, loaded) = load_cgan(&layout.cgan()).unwrap();
    assert_eq!(manifest.epochs_completed, 1);

    let (_, val) = split_train_val(train.len(), cfg.validation_fraction, cfg.split_seed).unwrap();
    let est = CganEstimator(&loaded.best).estimate(&train, &val).unwrap();
    let truth: Vec<_> = val.iter().map(|&i| train.channel(i)).collect();
    let recomputed = nmse_db(&est, &truth).unwrap();
    assert!(
        (recomputed - trained.best_validation_nmse_db).abs() < 1e-6,
        "{recomputed} vs {}",
        trained.best_validation_nmse_db
    );
    assert!((manifest.validation_nmse_db - trained.best_validation_nmse_db).abs() < 1e-6);
}

#[test]
fn resume_continues_epoch_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let layout = Layout::new(tmp.path());
    let (train, _) = pipeline::ensure_data(&cfg, &layout).unwrap();
    pipeline::train_cgan_stage(&cfg, &layout, &train, false).unwrap();
    let resumed = pipeline::train_cgan_stage(&cfg, &layout, &train, true).unwrap();
    assert_eq!(resumed.epochs_completed, 2);
    assert_eq!(log_epochs(&layout.cgan().join(TRAIN_LOG_FILE)), vec![1, 2]);

    let cgan = pipeline::require_cgan(&cfg, &layout).unwrap();
    pipeline::train_ridnet_stage(&cfg, &layout, &train, &cgan, Domain::Spatial, false).unwrap();
    pipeline::train_ridnet_stage(&cfg, &layout, &train, &cgan, Domain::Spatial, true).unwrap();
    let ridnet_log = layout.ridnet(Domain::Spatial).join(TRAIN_LOG_FILE);
    assert_eq!(log_epochs(&ridnet_log), vec![1, 2]);
}

#[test]
fn ridnet_requires_a_matching_cgan() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let layout = Layout::new(tmp.path());
    pipeline::ensure_data(&cfg, &layout).unwrap();
    assert!(matches!(pipeline::require_cgan(&cfg, &layout), Err(Error::MissingPrerequisite(_))));

    let (train, _) = pipeline::load_data(&cfg, &layout).unwrap();
    pipeline::train_cgan_stage(&cfg, &layout, &train, false).unwrap();
    let mut other = cfg.clone();
    other.lambda_l1 = 1.0;
    // Different data or training setup invalidates the checkpoint.
    assert!(pipeline::load_data(&other, &layout).is_ok());
    assert!(matches!(pipeline::require_cgan(&other, &layout), Err(Error::MissingPrerequisite(_))));
}

#[test]
fn ensure_cell_trains_once_and_then_reuses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let layout = Layout::new(tmp.path());
    let (_, test, models) = pipeline::ensure_cell(&cfg, &layout, true).unwrap();
    let weights = layout.ridnet(Domain::Angular).join("weights.bin");
    let stamp = fs::metadata(&weights).unwrap().modified().unwrap();

    let (_, _, again) = pipeline::ensure_cell(&cfg, &layout, true).unwrap();
    assert_eq!(fs::metadata(&weights).unwrap().modified().unwrap(), stamp);
    assert_eq!(again.cgan.best_validation_nmse_db, models.cgan.best_validation_nmse_db);

    let (m, _) = load_ridnet(&layout.ridnet(Domain::Angular)).unwrap();
    assert_eq!(m.domain, Domain::Angular);

    // The two-stage estimate is a spatial channel of the right shape.
    let est = TwoStageEstimator {
        cgan: &models.cgan.best,
        ridnet: &models.angular.as_ref().unwrap().best,
    };
    let out = est.estimate(&test, &[0, 1]).unwrap();
    assert_eq!(out[0].shape(), (cfg.num_antennas, cfg.num_users));
    assert!(out.iter().flat_map(|m| m.iter()).all(|z| z.re.is_finite() && z.im.is_finite()));
}

#[test]
fn eval_records_missing_checkpoints_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let layout = Layout::new(tmp.path());
    let (train, _) = pipeline::ensure_data(&cfg, &layout).unwrap();
    pipeline::train_cgan_stage(&cfg, &layout, &train, false).unwrap();
    let report = pipeline::eval_nmse(&cfg, &layout).unwrap();
    let estimators: Vec<&str> = report.rows.iter().map(|r| r.estimator.as_str()).collect();
    assert!(estimators.contains(&"MF") && estimators.contains(&"cGAN"));
    assert_eq!(report.errors.len(), 2, "{:?}", report.errors);
    assert!(layout.reports().join("nmse.csv").exists());
    assert!(layout.reports().join("nmse_errors.csv").exists());
}

#[test]
fn timing_report_has_three_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let layout = Layout::new(tmp.path());
    pipeline::ensure_cell(&cfg, &layout, false).unwrap();
    let t = pipeline::eval_timing(&cfg, &layout, Domain::Spatial).unwrap();
    assert_eq!(t.iterations, cfg.timing_iterations);
    assert!(t.cgan.mean_ms > 0.0 && t.ridnet.mean_ms > 0.0 && t.combined.mean_ms > 0.0);
    let csv = fs::read_to_string(layout.reports().join("timing.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2, "{csv}");
}
