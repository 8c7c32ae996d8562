mod common;

use onebit_ce::dataset::{corpus_dir, generate_experiment_data, load_dataset, pack_channel, unpack_channel, CorpusRole};
use onebit_ce::Error;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walk(dir) {
        out.insert(e.strip_prefix(dir).unwrap().display().to_string(), fs::read(&e).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = generate_experiment_data(&cfg, &a).unwrap();
    let second = generate_experiment_data(&cfg, &b).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.0.hash(), second.0.hash());
    let (fa, fb) = (files(&a), files(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);

    // Regenerating in place is idempotent too.
    generate_experiment_data(&cfg, &a).unwrap();
    assert_eq!(files(&a), fb);
}

#[test]
fn different_seed_changes_the_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny(tmp.path());
    let (m1, _) = generate_experiment_data(&cfg, &tmp.path().join("a")).unwrap();
    cfg.master_seed += 1;
    let (m2, _) = generate_experiment_data(&cfg, &tmp.path().join("b")).unwrap();
    assert_ne!(m1.hash(), m2.hash());
}

#[test]
fn test_corpus_is_balanced_and_shares_the_training_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    generate_experiment_data(&cfg, tmp.path()).unwrap();
    let train = load_dataset(&corpus_dir(tmp.path(), CorpusRole::Train)).unwrap();
    let test = load_dataset(&corpus_dir(tmp.path(), CorpusRole::Test)).unwrap();
    assert_eq!(train.len(), cfg.num_samples);
    assert_eq!(test.manifest.normalization_scale, train.manifest.normalization_scale);
    for &snr in &cfg.snr_grid_db {
        assert_eq!(test.indices_at_snr(snr).len(), cfg.test_samples_per_snr);
    }
    // Channels of the two corpora come from different seeds.
    assert_ne!(train.channel(0), test.channel(0));
}

#[test]
fn packing_round_trips_below_the_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    generate_experiment_data(&cfg, tmp.path()).unwrap();
    let train = load_dataset(&corpus_dir(tmp.path(), CorpusRole::Train)).unwrap();
    let s = train.manifest.normalization_scale;
    let mut clipped = 0usize;
    let mut total = 0usize;
    for i in 0..train.len() {
        let h = train.channel(i);
        total += 2 * h.len();
        clipped += h.iter().map(|z| (z.re.abs() > s) as usize + (z.im.abs() > s) as usize).sum::<usize>();
        if h.iter().all(|z| z.re.abs() <= s && z.im.abs() <= s) {
            let back = unpack_channel(&pack_channel(&h, s, true), h.nrows(), h.ncols(), s);
            assert!((back - &h).iter().all(|d| d.norm() < 1e-6 * s.max(1.0)));
        }
    }
    assert!((clipped as f64) <= 0.001 * total as f64 + 1.0, "{clipped} of {total} clipped");
}

#[test]
fn corrupted_or_truncated_arrays_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny(tmp.path());
    generate_experiment_data(&cfg, tmp.path()).unwrap();
    let dir = corpus_dir(tmp.path(), CorpusRole::Train);
    let bin = walk(&dir).into_iter().find(|p| p.extension().is_some_and(|e| e == "bin")).unwrap();

    let mut bytes = fs::read(&bin).unwrap();
    bytes[5] ^= 0x40;
    fs::write(&bin, &bytes).unwrap();
    assert!(matches!(load_dataset(&dir), Err(Error::Checksum { .. })));

    bytes.truncate(bytes.len() - 4);
    fs::write(&bin, &bytes).unwrap();
    assert!(matches!(load_dataset(&dir), Err(Error::Truncated { .. })));
}

#[test]
fn missing_corpus_is_an_io_or_prerequisite_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = load_dataset(&tmp.path().join("nothing")).unwrap_err();
    assert!(matches!(err, Error::Io { .. } | Error::MissingPrerequisite(_)), "{err}");
}
