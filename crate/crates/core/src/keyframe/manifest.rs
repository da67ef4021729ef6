//! Frame-window manifests: one frame path per line, oldest first, with blank
//! lines separating windows. `#` starts a comment. Relative paths resolve
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use super::{read_pnm, FrameWindow};
use crate::error::{Error, Result};

pub fn parse_frame_manifest(text: &str, base: &Path, source_name: &str) -> Result<Vec<Vec<PathBuf>>> {
    let mut windows = Vec::new();
    let mut current: Vec<PathBuf> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let (body, comment) = match raw.split_once('#') {
            Some((b, _)) => (b.trim(), true),
            None => (raw.trim(), false),
        };
        if body.is_empty() {
            if !comment && !current.is_empty() {
                windows.push(std::mem::take(&mut current));
            }
            continue;
        }
        if body.contains('\0') {
            return Err(Error::parse(source_name, i + 1, "path contains a NUL byte"));
        }
        let p = Path::new(body);
        current.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
    }
    if !current.is_empty() {
        windows.push(current);
    }
    if windows.is_empty() {
        return Err(Error::parse(source_name, 1, "manifest lists no frames"));
    }
    Ok(windows)
}

/// Reads every window of a manifest file.
pub fn load_windows(manifest: &Path) -> Result<Vec<FrameWindow>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    parse_frame_manifest(&text, base, &manifest.display().to_string())?
        .into_iter()
        .map(|paths| {
            let frames = paths.iter().map(|p| read_pnm(p)).collect::<Result<Vec<_>>>()?;
            FrameWindow::new(frames, None)
        })
        .collect()
}
