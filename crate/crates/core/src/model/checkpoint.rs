//! Binary checkpoints: `GLCK`, a format version, the model configuration
//! echo, then every parameter as a named little-endian f64 blob.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 4] = b"GLCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let echo = model.cfg.echo();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::data(format!("{}: {msg} at byte {}", self.source, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        std::str::from_utf8(raw).map_err(|_| self.fail("non-UTF-8 text"))
    }
}

/// Lower bound on the parameter count of `cfg`, cheap to evaluate for any
/// configuration.
fn min_scalars(cfg: &ModelConfig) -> u128 {
    let d = cfg.d as u128;
    let mut n = 4 * d * cfg.head_input() as u128 + 4 * d * cfg.classes as u128;
    if cfg.modalities.ah {
        n += (cfg.history_len as u128) * (cfg.text_dim as u128) * d;
    }
    if cfg.modalities.ah && cfg.modalities.visual() {
        n += (cfg.layers.max(1) as u128) * d * d;
    }
    if cfg.modalities.rgb && cfg.modalities.depth {
        n += (cfg.visual_layers().max(1) as u128) * d * d;
    }
    n
}

/// Decodes a checkpoint. With `expected`, a different configuration is a
/// config error. The parameter names and shapes must match what the
/// configuration builds.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>, source: &str) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(4)? != MAGIC {
        return Err(Error::data(format!("{source}: not a checkpoint")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("{source}: unsupported checkpoint version {version}")));
    }
    let cfg = ModelConfig::from_echo(r.text()?)?;
    if let Some(want) = expected {
        if *want != cfg {
            return Err(Error::config(format!(
                "{source}: checkpoint was written for `{cfg}` but `{want}` was requested"
            )));
        }
    }
    let count = r.u32()? as usize;
    let mut ps = ParameterSet::new();
    let mut total: u128 = 0;
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.fail("blob too large"))?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if ps.contains(&name) {
            return Err(r.fail(&format!("duplicate parameter `{name}`")));
        }
        total += (rows * cols) as u128;
        ps.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    if min_scalars(&cfg) > total {
        return Err(Error::data(format!("{source}: parameters do not match `{cfg}`")));
    }
    let reference = Model::new(cfg.clone(), Seed::new(0))?;
    let same_layout = reference.params.len() == ps.len()
        && reference
            .params
            .iter()
            .all(|(n, t)| ps.get(n).is_some_and(|p| p.shape() == t.shape()));
    if !same_layout {
        return Err(Error::data(format!("{source}: parameters do not match `{cfg}`")));
    }
    Ok(Model { cfg, params: ps })
}

/// Writes atomically through a temporary sibling.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    crate::io::write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionVariant;
    use crate::model::Modalities;

    fn small() -> Model {
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            history_len: 2,
            text_dim: 4,
            classes: 4,
            fusion: FusionVariant::BiCaConcatIndependent,
            modalities: Modalities::ALL,
            ..ModelConfig::full_size(4)
        };
        Model::new(cfg, Seed::new(5)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let back = decode_checkpoint(&encode_checkpoint(&m), Some(&m.cfg), "mem").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let m = small();
        let mut other = m.cfg.clone();
        other.heads = 4;
        let err = decode_checkpoint(&encode_checkpoint(&m), Some(&other), "mem").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn corrupted_bytes_are_errors() {
        let bytes = encode_checkpoint(&small());
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], None, "mem").is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, None, "mem").is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, None, "mem").is_err());
    }
}
