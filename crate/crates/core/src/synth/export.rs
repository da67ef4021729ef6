//! Dataset directories:
//!
//! ```text
//! manifest.txt              world settings and the episode list
//! episodes/ep_0000.bin      actions and feature tokens
//! frames/ep_0000/s0003_f2.pgm
//! ```

use std::path::Path;

use rayon::prelude::*;

use super::{gen_task_graph, Dataset, Episode, PackedFrame, Split, Step, WorldSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::keyframe::{encode_pgm, parse_pnm};
use crate::tensor::Tensor;

const HEADER: &str = "glimpse-dataset 1";
const EPISODE_MAGIC: &[u8; 4] = b"GLEP";
const EPISODE_VERSION: u32 = 1;
/// Upper bound on values read from an episode header.
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub spec: WorldSpec,
    /// Episode name, split and step count.
    pub episodes: Vec<(String, Split, usize)>,
}

fn episode_name(i: usize) -> String {
    format!("ep_{i:04}")
}

pub fn manifest_text(ds: &Dataset) -> String {
    let mut s = format!("{HEADER}\n[world]\n");
    for (k, v) in ds.spec.to_pairs() {
        s.push_str(&format!("{k}={v}\n"));
    }
    s.push_str("[episodes]\n");
    for (i, (ep, split)) in ds.episodes.iter().zip(&ds.splits).enumerate() {
        s.push_str(&format!("{} {} {}\n", episode_name(i), split.key(), ep.len()));
    }
    s
}

pub fn parse_dataset_manifest(text: &str, source: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(Error::parse(source, 1, format!("expected `{HEADER}`"))),
    }
    let mut spec = WorldSpec::preset("ikea-like").expect("known preset");
    let mut section = "";
    let mut seen = std::collections::BTreeSet::new();
    let mut episodes = Vec::new();
    for (i, raw) in lines {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[world]" || line == "[episodes]" {
            section = if line == "[world]" { "world" } else { "episodes" };
            continue;
        }
        match section {
            "world" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::parse(source, ln, "expected key=value"))?;
                let k = k.trim();
                if !seen.insert(k.to_string()) {
                    return Err(Error::parse(source, ln, format!("duplicate key `{k}`")));
                }
                spec.set(k, v.trim())
                    .map_err(|e| Error::parse(source, ln, e.to_string()))?;
            }
            "episodes" => {
                let fields: Vec<&str> = line.split_whitespace().collect();
                let [name, split, steps] = fields[..] else {
                    return Err(Error::parse(source, ln, "expected `name split steps`"));
                };
                let want = episode_name(episodes.len());
                if name != want {
                    return Err(Error::parse(source, ln, format!("expected episode `{want}`")));
                }
                let split = Split::from_key(split)
                    .ok_or_else(|| Error::parse(source, ln, format!("unknown split `{split}`")))?;
                let steps: usize = steps
                    .parse()
                    .ok()
                    .filter(|&n| n > 0 && n <= MAX_DIM)
                    .ok_or_else(|| Error::parse(source, ln, format!("invalid step count `{steps}`")))?;
                episodes.push((name.to_string(), split, steps));
            }
            _ => return Err(Error::parse(source, ln, "content before the [world] section")),
        }
    }
    spec.validate()
        .map_err(|e| Error::parse(source, 1, e.to_string()))?;
    if episodes.len() != spec.episodes {
        return Err(Error::parse(
            source,
            text.lines().count().max(1),
            format!("{} episodes listed, world declares {}", episodes.len(), spec.episodes),
        ));
    }
    Ok(DatasetManifest { spec, episodes })
}

pub fn encode_episode(ep: &Episode, spec: &WorldSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(EPISODE_MAGIC);
    for v in [
        EPISODE_VERSION,
        ep.len() as u32,
        spec.window as u32,
        spec.tokens as u32,
        spec.d as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for st in &ep.steps {
        out.extend_from_slice(&(st.action as u32).to_le_bytes());
        for v in st.rgb.values().iter().chain(st.depth.values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decoded episode file: header dimensions plus per-step action and tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFile {
    pub window: usize,
    pub tokens: usize,
    pub d: usize,
    pub steps: Vec<(usize, Tensor, Tensor)>,
}

pub fn decode_episode(bytes: &[u8], source: &str) -> Result<EpisodeFile> {
    let err = |m: &str| Error::data(format!("{source}: {m}"));
    if bytes.len() < 24 || &bytes[..4] != EPISODE_MAGIC {
        return Err(err("not an episode file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != EPISODE_VERSION as usize {
        return Err(err("unsupported episode version"));
    }
    let (steps, window, tokens, d) = (word(1), word(2), word(3), word(4));
    if [steps, window, tokens, d].iter().any(|&v| v == 0 || v > MAX_DIM) {
        return Err(err("invalid header dimensions"));
    }
    let rows = window
        .checked_mul(tokens)
        .filter(|&r| r <= MAX_DIM)
        .ok_or_else(|| err("invalid header dimensions"))?;
    let per_step = rows
        .checked_mul(d)
        .and_then(|n| n.checked_mul(16))
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| err("invalid header dimensions"))?;
    let body = &bytes[24..];
    if per_step.checked_mul(steps) != Some(body.len()) {
        return Err(err("payload length does not match header"));
    }
    let mut out = Vec::with_capacity(steps);
    for chunk in body.chunks_exact(per_step) {
        let action = u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes")) as usize;
        let vals: Vec<f64> = chunk[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite feature value"));
        }
        let (a, b) = vals.split_at(rows * d);
        out.push((
            action,
            Tensor::from_vec(rows, d, a.to_vec())?,
            Tensor::from_vec(rows, d, b.to_vec())?,
        ));
    }
    Ok(EpisodeFile {
        window,
        tokens,
        d,
        steps: out,
    })
}

fn frame_path(dir: &Path, ep: usize, step: usize, frame: usize) -> std::path::PathBuf {
    dir.join("frames")
        .join(episode_name(ep))
        .join(format!("s{step:04}_f{frame}.pgm"))
}

/// Writes every file of `ds` under `dir`.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("episodes")).map_err(|e| Error::io(dir, e))?;
    ds.episodes
        .par_iter()
        .enumerate()
        .try_for_each(|(i, ep)| -> Result<()> {
            let path = dir.join("episodes").join(format!("{}.bin", episode_name(i)));
            write_atomic(&path, &encode_episode(ep, &ds.spec))?;
            for (s, st) in ep.steps.iter().enumerate() {
                for (f, frame) in st.frames.iter().enumerate() {
                    write_atomic(&frame_path(dir, i, s, f), &encode_pgm(&frame.to_gray()))?;
                }
            }
            Ok(())
        })?;
    write_atomic(&dir.join("manifest.txt"), manifest_text(ds).as_bytes())
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_dataset_manifest(&text, &mpath.display().to_string())?;
    let spec = manifest.spec;
    let graph = gen_task_graph(&spec)?;
    let episodes = manifest
        .episodes
        .par_iter()
        .enumerate()
        .map(|(i, (name, _, n))| -> Result<Episode> {
            let path = dir.join("episodes").join(format!("{name}.bin"));
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let src = path.display().to_string();
            let file = decode_episode(&bytes, &src)?;
            if (file.window, file.tokens, file.d) != (spec.window, spec.tokens, spec.d) || file.steps.len() != *n {
                return Err(Error::data(format!("{src}: shape disagrees with the manifest")));
            }
            let mut steps = Vec::with_capacity(*n);
            for (s, (action, rgb, depth)) in file.steps.into_iter().enumerate() {
                let frames = (0..spec.window)
                    .map(|f| {
                        let p = frame_path(dir, i, s, f);
                        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                        let g = parse_pnm(&bytes, &p.display().to_string())?;
                        PackedFrame::from_gray(&g)
                            .filter(|pf| pf.side == spec.frame_side)
                            .ok_or_else(|| Error::data(format!("{}: unexpected frame geometry", p.display())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                steps.push(Step::new(action, rgb, depth, frames)?);
            }
            let ep = Episode { steps };
            if !graph.is_walk(&ep.actions()) {
                return Err(Error::data(format!("{src}: actions are not a walk in the task graph")));
            }
            Ok(ep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec,
        graph,
        episodes,
        splits: manifest.episodes.iter().map(|e| e.1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let spec = WorldSpec {
            classes: 5,
            min_len: 2,
            max_len: 5,
            episodes: 4,
            frame_side: 8,
            window: 2,
            d: 3,
            ..WorldSpec::preset("ikea-like").unwrap()
        };
        Dataset::generate(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        assert_eq!(import_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corrupted_manifest_reports_line() {
        let ds = tiny();
        let text = manifest_text(&ds).replace("alpha=0.8", "alpha=lots");
        let line = text.lines().position(|l| l.starts_with("alpha")).unwrap() + 1;
        match parse_dataset_manifest(&text, "m") {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn episode_codec_rejects_damage() {
        let ds = tiny();
        let bytes = encode_episode(&ds.episodes[0], &ds.spec);
        let back = decode_episode(&bytes, "e").unwrap();
        assert_eq!(back.steps.len(), ds.episodes[0].len());
        assert!(decode_episode(&bytes[..bytes.len() - 1], "e").is_err());
        let mut bad = bytes.clone();
        bad[8] = 0xff;
        assert!(decode_episode(&bad, "e").is_err());
    }
}
