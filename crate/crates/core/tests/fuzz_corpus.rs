//! Replays the checked-in fuzz corpus, plus truncated and bit-flipped
//! variants of each seed, through the same parsers the fuzz targets drive.
//! Decoders must return errors, never panic, and valid inputs must round-trip.

use std::path::{Path, PathBuf};

use ulda::encoders::external::{ExternalVision, TextTable};
use ulda::pipeline::checkpoint::Checkpoint;
use ulda::pipeline::config::RunConfig;
use ulda::segmentation::MetricsReport;
use ulda::simulation::StyleBank;
use ulda::toyworld::{decode_images, decode_labels, manifest_text, parse_manifest};

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files
        .into_iter()
        .map(|p| (p.clone(), std::fs::read(p).unwrap()))
        .collect()
}

/// The seed itself, every prefix at a handful of cut points, and single-byte
/// corruptions spread across the input.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec(), Vec::new()];
    let n = seed.len();
    for cut in [1, 2, n / 4, n / 2, n.saturating_sub(9), n.saturating_sub(1)] {
        if cut < n {
            out.push(seed[..cut].to_vec());
        }
    }
    let stride = (n / 97).max(1);
    for (k, i) in (0..n).step_by(stride).enumerate() {
        let mut v = seed.to_vec();
        v[i] ^= [0x01, 0x80, 0xff, 0x20][k % 4];
        out.push(v);
    }
    out
}

fn replay(target: &str, f: impl Fn(&[u8])) -> usize {
    let mut runs = 0;
    for (path, seed) in corpus(target) {
        for v in variants(&seed) {
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&v)));
            assert!(
                r.is_ok(),
                "{target}: panic on variant of {}",
                path.display()
            );
            runs += 1;
        }
    }
    runs
}

#[test]
fn bank() {
    replay("bank", |d| {
        if let Ok(b) = StyleBank::from_bytes(d) {
            assert_eq!(StyleBank::from_bytes(&b.to_bytes().unwrap()).unwrap(), b);
        }
    });
    for (_, seed) in corpus("bank") {
        assert!(StyleBank::from_bytes(&seed).is_ok());
    }
}

#[test]
fn checkpoint() {
    replay("checkpoint", |d| {
        if let Ok(c) = Checkpoint::from_bytes(d) {
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    });
    for (_, seed) in corpus("checkpoint") {
        assert!(Checkpoint::from_bytes(&seed).is_ok());
    }
}

#[test]
fn config_toml() {
    replay("config_toml", |d| {
        if let Ok(cfg) = std::str::from_utf8(d)
            .map_err(|_| ())
            .and_then(|t| RunConfig::from_toml(t).map_err(|_| ()))
        {
            let _ = cfg.digest();
        }
    });
    for (_, seed) in corpus("config_toml") {
        assert!(RunConfig::from_toml(std::str::from_utf8(&seed).unwrap()).is_ok());
    }
}

#[test]
fn dataset_manifest() {
    replay("dataset_manifest", |d| {
        if let Ok(spec) = parse_manifest(d) {
            assert_eq!(
                parse_manifest(manifest_text(&spec).as_bytes()).unwrap(),
                spec
            );
        }
    });
    for (_, seed) in corpus("dataset_manifest") {
        assert!(parse_manifest(&seed).is_ok());
    }
}

#[test]
fn dataset_arrays() {
    replay("dataset_arrays", |d| {
        let Some((&[count, size, classes], rest)) = d.split_first_chunk::<3>() else {
            return;
        };
        let (count, size) = (count as usize % 8, size as usize % 16);
        let _ = decode_images(rest, count, size);
        let _ = decode_labels(rest, count, size, classes as usize % 12);
    });
}

#[test]
fn vision_weights() {
    replay("vision_weights", |d| {
        if let Ok(v) = ExternalVision::from_bytes(d) {
            assert_eq!(ExternalVision::from_bytes(&v.to_bytes()).unwrap(), v);
        }
    });
}

#[test]
fn text_table() {
    replay("text_table", |d| {
        if let Ok(t) = TextTable::from_bytes(d) {
            assert_eq!(TextTable::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    });
}

#[test]
fn report_json() {
    replay("report_json", |d| {
        if let Ok(r) = std::str::from_utf8(d)
            .map_err(|_| ())
            .and_then(|t| MetricsReport::from_json(t).map_err(|_| ()))
        {
            let _ = r.to_json();
        }
    });
    for (_, seed) in corpus("report_json") {
        assert!(MetricsReport::from_json(std::str::from_utf8(&seed).unwrap()).is_ok());
    }
}
