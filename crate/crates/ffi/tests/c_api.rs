use onebit_ce::channel::{draw_channel, ArrayGeometry, PathCount};
use onebit_ce_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

const TINY: &str = r#"
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
"#;

fn last_error() -> String {
    let p = oc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config(dir: &std::path::Path) -> *mut OcConfig {
    let text = CString::new(TINY).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(oc_config_from_toml(text.as_ptr(), &mut cfg), OcStatus::Ok);
    let d = CString::new(dir.to_str().unwrap()).unwrap();
    assert_eq!(oc_config_set_output_dir(cfg, d.as_ptr()), OcStatus::Ok);
    cfg
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    assert_eq!(oc_config_new_desk(ptr::null_mut()), OcStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(oc_estimate(ptr::null(), ptr::null(), ptr::null(), ptr::null_mut()), OcStatus::NullPointer);
    let mut out = 0.0;
    assert_eq!(oc_nmse_db(ptr::null(), ptr::null(), 1, &mut out), OcStatus::NullPointer);
    unsafe {
        oc_config_free(ptr::null_mut());
        oc_estimator_free(ptr::null_mut());
    }
}

#[test]
fn invalid_config_maps_to_config_status() {
    let text = CString::new("num_users = 99\nnum_antennas = 8").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(oc_config_from_toml(text.as_ptr(), &mut cfg), OcStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("num_users"), "{}", last_error());
}

#[test]
fn desk_config_dims() {
    let mut cfg = ptr::null_mut();
    assert_eq!(oc_config_new_desk(&mut cfg), OcStatus::Ok);
    let (mut n, mut k, mut q) = (0, 0, 0);
    assert_eq!(oc_config_dims(cfg, &mut n, &mut k, &mut q), OcStatus::Ok);
    assert_eq!((n, k, q), (32, 8, 4));
    unsafe { oc_config_free(cfg) };
}

#[test]
fn channel_draws_match_the_library() {
    let (n, k) = (16, 3);
    let mut buf = vec![0.0; 2 * n * k];
    assert_eq!(oc_draw_channel(n, k, 4, 9, 5, buf.as_mut_ptr()), OcStatus::Ok);
    let h = draw_channel(&ArrayGeometry::half_wavelength(n).unwrap(), k, PathCount::Fixed(4), 9, 5).unwrap();
    for c in 0..k {
        for r in 0..n {
            let i = 2 * (r + c * n);
            assert_eq!((buf[i], buf[i + 1]), (h.matrix[(r, c)].re, h.matrix[(r, c)].im));
        }
    }
    assert_eq!(oc_draw_channel(n, 0, 4, 9, 5, buf.as_mut_ptr()), OcStatus::InvalidArgument);
}

#[test]
fn observation_is_one_bit() {
    let (n, k, q) = (8, 2, 3);
    let mut h = vec![0.0; 2 * n * k];
    let mut p = vec![0.0; 2 * k * q];
    let mut y = vec![0.0; 2 * n * q];
    assert_eq!(oc_draw_channel(n, k, 2, 1, 0, h.as_mut_ptr()), OcStatus::Ok);
    assert_eq!(oc_generate_pilots(k, q, 2, p.as_mut_ptr()), OcStatus::Ok);
    assert_eq!(oc_observe(h.as_ptr(), n, k, p.as_ptr(), q, 10.0, 3, y.as_mut_ptr()), OcStatus::Ok);
    assert!(y.iter().all(|v| v.abs() == 1.0));
    assert_eq!(oc_observe(h.as_ptr(), n, k, p.as_ptr(), q, f64::NAN, 3, y.as_mut_ptr()), OcStatus::InvalidArgument);
}

#[test]
fn nmse_of_zero_estimate_is_zero_db() {
    let truth = [1.0, -2.0, 0.5, 3.0];
    let zero = [0.0; 4];
    let mut out = f64::NAN;
    assert_eq!(oc_nmse_db(zero.as_ptr(), truth.as_ptr(), 2, &mut out), OcStatus::Ok);
    assert!(out.abs() < 1e-12);
}

#[test]
fn train_load_and_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut est = ptr::null_mut();
    assert_eq!(oc_estimator_load(cfg, 0, OcDomain::Spatial, &mut est), OcStatus::MissingPrerequisite);
    assert_eq!(oc_train_cgan(cfg, 0), OcStatus::MissingPrerequisite);

    assert_eq!(oc_generate_data(cfg), OcStatus::Ok);
    assert_eq!(oc_train_ridnet(cfg, OcDomain::Angular, 0), OcStatus::MissingPrerequisite);
    assert_eq!(oc_train_cgan(cfg, 0), OcStatus::Ok);
    assert_eq!(oc_train_ridnet(cfg, OcDomain::Angular, 0), OcStatus::Ok);
    assert_eq!(oc_estimator_load(cfg, 1, OcDomain::Spatial, &mut est), OcStatus::MissingPrerequisite);
    assert_eq!(oc_estimator_load(cfg, 1, OcDomain::Angular, &mut est), OcStatus::Ok);

    let (mut n, mut k, mut q) = (0, 0, 0);
    assert_eq!(oc_estimator_dims(est, &mut n, &mut k, &mut q), OcStatus::Ok);
    assert_eq!((n, k, q), (8, 2, 2));
    let mut h = vec![0.0; 2 * n * k];
    let mut p = vec![0.0; 2 * k * q];
    let mut y = vec![0.0; 2 * n * q];
    oc_draw_channel(n, k, 3, 4, 0, h.as_mut_ptr());
    oc_generate_pilots(k, q, 5, p.as_mut_ptr());
    oc_observe(h.as_ptr(), n, k, p.as_ptr(), q, 10.0, 6, y.as_mut_ptr());
    let mut out = vec![f64::NAN; 2 * n * k];
    assert_eq!(oc_estimate(est, y.as_ptr(), p.as_ptr(), out.as_mut_ptr()), OcStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));
    unsafe {
        oc_estimator_free(est);
        oc_config_free(cfg);
    }
}
