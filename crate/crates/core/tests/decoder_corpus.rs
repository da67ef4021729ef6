//! Every decoder runs over the checked-in fuzz seeds and their truncations
//! and single-byte flips. Accepted inputs must satisfy the same properties
//! the fuzz targets assert.

use std::path::{Path, PathBuf};

use glimpse::config::{Overrides, RunConfig};
use glimpse::history::{parse_history, ActionVocabulary};
use glimpse::keyframe::{encode_pgm, laplacian_variance, parse_frame_manifest, parse_pnm};
use glimpse::model::{decode_checkpoint, encode_checkpoint};
use glimpse::synth::{decode_episode, parse_dataset_manifest};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    assert!(!paths.is_empty(), "no seeds for {target}");
    paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

/// Each seed, its prefixes at a few cut points, and copies with one byte
/// flipped at a spread of positions.
fn variants(target: &str) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for s in seeds(target) {
        let n = s.len();
        for cut in [0, 1, n / 3, n / 2, n.saturating_sub(1)] {
            out.push(s[..cut.min(n)].to_vec());
        }
        for i in (0..n).step_by((n / 40).max(1)) {
            let mut m = s.clone();
            m[i] ^= 0xa5;
            out.push(m);
        }
        out.push(s);
    }
    out
}

fn text(b: &[u8]) -> Option<&str> {
    std::str::from_utf8(b).ok()
}

#[test]
fn history_file() {
    let vocab = ActionVocabulary::new(["pick leg", "align screw", "rotate table", "a0", "a1"]).unwrap();
    let mut ok = 0;
    for v in variants("history_file") {
        if let Some(Ok(steps)) = text(&v).map(|t| parse_history(t, &vocab, 7, "seed")) {
            ok += 1;
            assert!(steps.iter().all(|q| q.len() <= 7 && q.items().iter().all(|&i| i < vocab.len())));
        }
    }
    assert!(ok > 0);
}

#[test]
fn pgm() {
    let mut ok = 0;
    for v in variants("pgm") {
        if let Ok(f) = parse_pnm(&v, "seed") {
            ok += 1;
            assert!(laplacian_variance(&f) >= 0.0);
            let again = parse_pnm(&encode_pgm(&f), "seed").unwrap();
            assert_eq!((again.width(), again.height()), (f.width(), f.height()));
        }
    }
    assert!(ok > 0);
}

#[test]
fn frame_manifest() {
    let mut ok = 0;
    for v in variants("frame_manifest") {
        if let Some(Ok(w)) = text(&v).map(|t| parse_frame_manifest(t, Path::new("/frames"), "seed")) {
            ok += 1;
            assert!(w.iter().all(|w| !w.is_empty()));
        }
    }
    assert!(ok > 0);
}

#[test]
fn dataset_manifest() {
    let mut ok = 0;
    for v in variants("dataset_manifest") {
        if let Some(Ok(m)) = text(&v).map(|t| parse_dataset_manifest(t, "seed")) {
            ok += 1;
            assert_eq!(m.episodes.len(), m.spec.episodes);
        }
    }
    assert!(ok > 0);
}

#[test]
fn run_config() {
    let mut ok = 0;
    for v in variants("run_config") {
        if let Some(Ok(rc)) = text(&v).map(|t| RunConfig::from_text(t, "seed", &Overrides::default())) {
            ok += 1;
            assert!(rc.model.validate().is_ok());
            assert_eq!(rc.world.seed, rc.seed);
        }
    }
    assert!(ok > 0);
}

#[test]
fn checkpoint() {
    let mut ok = 0;
    for v in variants("checkpoint") {
        if let Ok(m) = decode_checkpoint(&v, None, "seed") {
            ok += 1;
            assert_eq!(encode_checkpoint(&m), v);
        }
    }
    assert!(ok > 0);
}

#[test]
fn episode_file() {
    let mut ok = 0;
    for v in variants("episode_file") {
        if let Ok(ep) = decode_episode(&v, "seed") {
            ok += 1;
            for (_, rgb, depth) in &ep.steps {
                assert_eq!(rgb.shape(), (ep.window * ep.tokens, ep.d));
                assert_eq!(depth.shape(), rgb.shape());
            }
        }
    }
    assert!(ok > 0);
}
